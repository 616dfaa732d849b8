//! Bit packing for 4-bit codes and 3-bit bit planes.

use crate::error::{RazerError, Result};

/// Codes per 32-bit word.
pub const CODES_PER_WORD: usize = 8;
/// FP3 groups are stored as three 128-bit planes.
pub const FP3_GROUP: usize = 128;
/// Bytes per FP3 group on disk.
pub const FP3_GROUP_BYTES: usize = 48;

/// Dense nibble storage: word `j` holds codes `8j..8j+7`, code `i` in bits
/// `4*(i % 8)..`. Unused trailing nibbles are zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedFp4Block {
    pub words: Vec<u32>,
    pub count: usize,
}

impl PackedFp4Block {
    pub fn from_words(words: Vec<u32>, count: usize) -> Result<Self> {
        if words.len() != count.div_ceil(CODES_PER_WORD) {
            return Err(RazerError::LengthMismatch {
                expected: count.div_ceil(CODES_PER_WORD),
                actual: words.len(),
            });
        }
        let used = count % CODES_PER_WORD;
        if used != 0 && words[words.len() - 1] >> (4 * used) != 0 {
            return Err(RazerError::Corrupt("nonzero padding nibbles".into()));
        }
        Ok(PackedFp4Block { words, count })
    }

    #[inline]
    pub fn get(&self, i: usize) -> u8 {
        debug_assert!(i < self.count);
        ((self.words[i / CODES_PER_WORD] >> (4 * (i % CODES_PER_WORD))) & 0xF) as u8
    }

    pub fn byte_len(&self) -> usize {
        self.words.len() * 4
    }

    /// Bytes needed for `count` codes.
    pub fn bytes_for(count: usize) -> usize {
        count.div_ceil(CODES_PER_WORD) * 4
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.words.iter().flat_map(|w| w.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(bytes: &[u8], count: usize) -> Result<Self> {
        if bytes.len() != Self::bytes_for(count) {
            return Err(RazerError::LengthMismatch {
                expected: Self::bytes_for(count),
                actual: bytes.len(),
            });
        }
        let words = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_words(words, count)
    }
}

pub fn pack_fp4(codes: &[u8]) -> Result<PackedFp4Block> {
    if let Some(&c) = codes.iter().find(|&&c| c > 0xF) {
        return Err(RazerError::InvalidCode {
            code: c,
            dtype: "4-bit",
        });
    }
    let words = codes
        .chunks(CODES_PER_WORD)
        .map(|chunk| {
            chunk
                .iter()
                .enumerate()
                .fold(0u32, |w, (i, &c)| w | (c as u32) << (4 * i))
        })
        .collect();
    Ok(PackedFp4Block {
        words,
        count: codes.len(),
    })
}

pub fn unpack_fp4(block: &PackedFp4Block) -> Result<Vec<u8>> {
    if block.words.len() != block.count.div_ceil(CODES_PER_WORD) {
        return Err(RazerError::LengthMismatch {
            expected: block.count.div_ceil(CODES_PER_WORD),
            actual: block.words.len(),
        });
    }
    Ok((0..block.count).map(|i| block.get(i)).collect())
}

/// One 128-element FP3 group as bit planes: bit `i` of each plane belongs
/// to element `i`. `sign` is bit 0 of the `{E,S}` code, `exp_lo` bit 1 and
/// `exp_hi` bit 2.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Fp3Planes {
    pub sign: u128,
    pub exp_hi: u128,
    pub exp_lo: u128,
}

impl Fp3Planes {
    #[inline]
    pub fn code(&self, i: usize) -> u8 {
        debug_assert!(i < FP3_GROUP);
        ((self.sign >> i) & 1 | ((self.exp_lo >> i) & 1) << 1 | ((self.exp_hi >> i) & 1) << 2) as u8
    }

    /// Sign, exp_hi, exp_lo planes, each little-endian.
    pub fn to_le_bytes(&self) -> [u8; FP3_GROUP_BYTES] {
        let mut out = [0u8; FP3_GROUP_BYTES];
        out[..16].copy_from_slice(&self.sign.to_le_bytes());
        out[16..32].copy_from_slice(&self.exp_hi.to_le_bytes());
        out[32..].copy_from_slice(&self.exp_lo.to_le_bytes());
        out
    }

    pub fn from_le_bytes(bytes: &[u8; FP3_GROUP_BYTES]) -> Self {
        let plane = |r: std::ops::Range<usize>| u128::from_le_bytes(bytes[r].try_into().unwrap());
        Fp3Planes {
            sign: plane(0..16),
            exp_hi: plane(16..32),
            exp_lo: plane(32..48),
        }
    }
}

pub fn pack_fp3(codes: &[u8]) -> Result<Fp3Planes> {
    if codes.len() != FP3_GROUP {
        return Err(RazerError::LengthMismatch {
            expected: FP3_GROUP,
            actual: codes.len(),
        });
    }
    let mut p = Fp3Planes::default();
    for (i, &c) in codes.iter().enumerate() {
        if c > 0b111 {
            return Err(RazerError::InvalidCode {
                code: c,
                dtype: "3-bit",
            });
        }
        p.sign |= ((c & 1) as u128) << i;
        p.exp_lo |= ((c >> 1 & 1) as u128) << i;
        p.exp_hi |= ((c >> 2 & 1) as u128) << i;
    }
    Ok(p)
}

pub fn unpack_fp3(planes: &Fp3Planes) -> Vec<u8> {
    (0..FP3_GROUP).map(|i| planes.code(i)).collect()
}

/// Two bits per group, four per byte, group `i` at bits `2*(i % 4)`.
pub fn pack_sv_indices(indices: &[u8]) -> Result<Vec<u8>> {
    let mut out = vec![0u8; indices.len().div_ceil(4)];
    for (i, &v) in indices.iter().enumerate() {
        if v > 3 {
            return Err(RazerError::InvalidArgument(format!("sv index {v}")));
        }
        out[i / 4] |= v << (2 * (i % 4));
    }
    Ok(out)
}

pub fn unpack_sv_indices(bytes: &[u8], count: usize) -> Result<Vec<u8>> {
    if bytes.len() != count.div_ceil(4) {
        return Err(RazerError::LengthMismatch {
            expected: count.div_ceil(4),
            actual: bytes.len(),
        });
    }
    let used = count % 4;
    if used != 0 && bytes[bytes.len() - 1] >> (2 * used) != 0 {
        return Err(RazerError::Corrupt("nonzero padding bits in sv indices".into()));
    }
    Ok((0..count).map(|i| bytes[i / 4] >> (2 * (i % 4)) & 3).collect())
}
