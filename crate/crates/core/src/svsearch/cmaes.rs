//! Small covariance matrix adaptation evolution strategy for box-bounded,
//! low-dimensional problems. Deterministic for a given seed, and the
//! sampling stream does not depend on the evaluation budget, so a larger
//! budget only ever extends a smaller run.

use nalgebra::{DMatrix, SMatrix, SVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Vector<const N: usize> = SVector<f64, N>;

#[derive(Clone, Debug)]
pub struct CmaesOptions {
    pub population: usize,
    pub sigma0: f64,
    pub budget: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct CmaesResult<const N: usize> {
    pub best: Vector<N>,
    pub best_value: f64,
    /// Best value within the first generation.
    pub initial_best_value: f64,
    pub evaluations: usize,
    /// Best-so-far after each evaluation.
    pub trace: Vec<f64>,
}

/// Minimize `f` over the box `[lower, upper]^N` starting from `mean0`.
/// Samples outside the box are clamped before evaluation and the clamped
/// point enters the update.
pub fn minimize<const N: usize, F>(
    mut f: F,
    mean0: Vector<N>,
    lower: f64,
    upper: f64,
    opts: &CmaesOptions,
) -> CmaesResult<N>
where
    F: FnMut(&Vector<N>) -> f64,
{
    let n = N as f64;
    let lambda = opts.population.max(4);
    let mu = lambda / 2;
    let raw: Vec<f64> = (0..mu)
        .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - ((i + 1) as f64).ln())
        .collect();
    let wsum: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / wsum).collect();
    let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

    let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
    let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
    let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
    let c_1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
    let c_mu = (1.0 - c_1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
    let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut mean = mean0.map(|v| v.clamp(lower, upper));
    let mut sigma = opts.sigma0;
    let mut cov = SMatrix::<f64, N, N>::identity();
    let mut basis = SMatrix::<f64, N, N>::identity();
    let mut scales = Vector::<N>::repeat(1.0);
    let mut p_sigma = Vector::<N>::zeros();
    let mut p_c = Vector::<N>::zeros();

    let mut best = mean;
    let mut best_value = f64::INFINITY;
    let mut initial_best_value = f64::INFINITY;
    let mut evaluations = 0;
    let mut trace = Vec::with_capacity(opts.budget);
    let mut generation = 0usize;

    while evaluations < opts.budget {
        let mut pop: Vec<(f64, Vector<N>)> = Vec::with_capacity(lambda);
        let samples: Vec<Vector<N>> = (0..lambda)
            .map(|_| {
                let z = Vector::<N>::from_fn(|_, _| StandardNormal.sample(&mut rng));
                let y = basis * scales.component_mul(&z);
                (mean + sigma * y).map(|v| v.clamp(lower, upper))
            })
            .collect();
        for x in samples {
            if evaluations == opts.budget {
                break;
            }
            let v = f(&x);
            evaluations += 1;
            if v < best_value {
                best_value = v;
                best = x;
            }
            trace.push(best_value);
            pop.push((v, x));
        }
        if generation == 0 {
            initial_best_value = best_value;
        }
        generation += 1;
        if pop.len() < lambda {
            break;
        }

        pop.sort_by(|a, b| a.0.total_cmp(&b.0));
        let old_mean = mean;
        mean = Vector::<N>::zeros();
        for (w, (_, x)) in weights.iter().zip(&pop) {
            mean += *w * x;
        }
        let step = (mean - old_mean) / sigma;

        // C^{-1/2} * step
        let inv_sqrt = basis * SMatrix::<f64, N, N>::from_diagonal(&scales.map(|d| 1.0 / d)) * basis.transpose();
        p_sigma = (1.0 - c_sigma) * p_sigma + (c_sigma * (2.0 - c_sigma) * mu_eff).sqrt() * inv_sqrt * step;
        let ps_norm = p_sigma.norm();
        let h_sigma = ps_norm
            / (1.0 - (1.0 - c_sigma).powi(2 * generation as i32)).sqrt()
            / chi_n
            < 1.4 + 2.0 / (n + 1.0);
        let h = if h_sigma { 1.0 } else { 0.0 };
        p_c = (1.0 - c_c) * p_c + h * (c_c * (2.0 - c_c) * mu_eff).sqrt() * step;

        let mut rank_mu = SMatrix::<f64, N, N>::zeros();
        for (w, (_, x)) in weights.iter().zip(&pop) {
            let d = (x - old_mean) / sigma;
            rank_mu += *w * d * d.transpose();
        }
        let delta_h = (1.0 - h) * c_c * (2.0 - c_c);
        cov = (1.0 - c_1 - c_mu) * cov
            + c_1 * (p_c * p_c.transpose() + delta_h * cov)
            + c_mu * rank_mu;
        cov = (cov + cov.transpose()) * 0.5;

        sigma *= ((c_sigma / d_sigma) * (ps_norm / chi_n - 1.0)).exp();
        sigma = sigma.clamp(1e-8, (upper - lower).max(1e-8));

        let eig = SymmetricEigen::new(DMatrix::from_column_slice(N, N, cov.as_slice()));
        basis = SMatrix::<f64, N, N>::from_column_slice(eig.eigenvectors.as_slice());
        scales = Vector::<N>::from_fn(|i, _| eig.eigenvalues[i].max(1e-20).sqrt());
    }

    CmaesResult {
        best,
        best_value,
        initial_best_value,
        evaluations,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(budget: usize, seed: u64) -> CmaesOptions {
        CmaesOptions {
            population: 16,
            sigma0: 2.0,
            budget,
            seed,
        }
    }

    #[test]
    fn finds_sphere_minimum() {
        let target = Vector::<4>::new(1.0, -2.0, 3.0, 0.5);
        let r = minimize(|x| (x - target).norm_squared(), Vector::<4>::zeros(), -5.0, 5.0, &opts(2000, 1));
        assert!(r.best_value < 1e-6, "{}", r.best_value);
        assert_eq!(r.evaluations, 2000);
    }

    #[test]
    fn respects_bounds() {
        let r = minimize(|x| -x.sum(), Vector::<4>::zeros(), -1.0, 2.0, &opts(400, 3));
        assert!(r.best.iter().all(|&v| (-1.0..=2.0).contains(&v)));
        assert!((r.best_value + 8.0).abs() < 1e-9);
    }

    #[test]
    fn budget_extends_prefix() {
        let f = |x: &Vector<4>| x.map(|v| (v * 3.0).sin() + 0.1 * v * v).sum();
        let short = minimize(f, Vector::<4>::repeat(1.0), -4.0, 4.0, &opts(20, 9));
        let long = minimize(f, Vector::<4>::repeat(1.0), -4.0, 4.0, &opts(200, 9));
        assert_eq!(&long.trace[..20], &short.trace[..]);
        assert!(long.best_value <= short.best_value);
        assert!(long.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn deterministic() {
        let f = |x: &Vector<4>| x.norm();
        let a = minimize(f, Vector::<4>::repeat(1.0), -4.0, 4.0, &opts(100, 5));
        let b = minimize(f, Vector::<4>::repeat(1.0), -4.0, 4.0, &opts(100, 5));
        assert_eq!(a.best, b.best);
    }
}
