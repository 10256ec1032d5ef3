//! Covariance matrix adaptation evolution strategy with the standard
//! dimension-dependent defaults (weights, learning rates, damping).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

const MIN_EIGENVALUE: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct CmaEs {
    dim: usize,
    lambda: usize,
    weights: Vec<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c1: f64,
    c_mu: f64,
    chi_n: f64,
    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    p_sigma: DVector<f64>,
    p_c: DVector<f64>,
    basis: DMatrix<f64>,
    scales: DVector<f64>,
    generation: usize,
    adapt_sigma: bool,
}

impl CmaEs {
    /// Default population size `4 + floor(3 ln n)`.
    pub fn default_population(dim: usize) -> usize {
        4 + (3.0 * (dim as f64).ln()).floor() as usize
    }

    pub fn new(mean: Vec<f64>, sigma: f64, lambda: usize) -> Self {
        let dim = mean.len();
        assert!(dim >= 1, "CMA-ES needs at least one dimension");
        assert!(lambda >= 2, "CMA-ES population must be at least 2");
        assert!(sigma > 0.0, "step size must be positive");
        let n = dim as f64;
        let mu = lambda / 2;
        let raw: Vec<f64> = (0..mu)
            .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - ((i + 1) as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let c_sigma = (mu_eff + 2.0) / (n + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (n + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / n) / (n + 4.0 + 2.0 * mu_eff / n);
        let c1 = 2.0 / ((n + 1.3).powi(2) + mu_eff);
        let c_mu = (1.0 - c1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((n + 2.0).powi(2) + mu_eff));
        let chi_n = n.sqrt() * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n));

        Self {
            dim,
            lambda,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c1,
            c_mu,
            chi_n,
            mean: DVector::from_vec(mean),
            sigma,
            cov: DMatrix::identity(dim, dim),
            p_sigma: DVector::zeros(dim),
            p_c: DVector::zeros(dim),
            basis: DMatrix::identity(dim, dim),
            scales: DVector::from_element(dim, 1.0),
            generation: 0,
            adapt_sigma: true,
        }
    }

    /// Freezes the step size (used for degenerate-configuration checks).
    pub fn with_sigma_adaptation(mut self, enabled: bool) -> Self {
        self.adapt_sigma = enabled;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn population(&self) -> usize {
        self.lambda
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.as_slice()
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    /// Draws `lambda` candidates from `N(mean, sigma^2 C)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        (0..self.lambda)
            .map(|_| {
                let z = DVector::from_fn(self.dim, |i, _| self.scales[i] * rng.sample::<f64, _>(StandardNormal));
                let y = &self.basis * z;
                (&self.mean + y * self.sigma).as_slice().to_vec()
            })
            .collect()
    }

    /// Updates the distribution from candidates sorted best first. Only the
    /// top `lambda / 2` are used; fewer than that is a caller error.
    pub fn update(&mut self, ranked: &[Vec<f64>]) {
        let mu = self.weights.len();
        assert!(ranked.len() >= mu, "need at least {mu} ranked candidates");
        let steps: Vec<DVector<f64>> = ranked[..mu]
            .iter()
            .map(|x| (DVector::from_column_slice(x) - &self.mean) / self.sigma)
            .collect();
        let mut y_w = DVector::zeros(self.dim);
        for (w, y) in self.weights.iter().zip(&steps) {
            y_w.axpy(*w, y, 1.0);
        }
        self.mean.axpy(self.sigma, &y_w, 1.0);

        // C^{-1/2} y_w = B D^{-1} B^T y_w
        let inv_sqrt = {
            let bt_y = self.basis.transpose() * &y_w;
            let scaled = bt_y.component_div(&self.scales);
            &self.basis * scaled
        };
        let cs = self.c_sigma;
        self.p_sigma = &self.p_sigma * (1.0 - cs) + inv_sqrt * (cs * (2.0 - cs) * self.mu_eff).sqrt();

        self.generation += 1;
        let norm_ps = self.p_sigma.norm();
        let decay = 1.0 - (1.0 - cs).powi(2 * self.generation as i32);
        let h_sigma = norm_ps / decay.sqrt() < (1.4 + 2.0 / (self.dim as f64 + 1.0)) * self.chi_n;

        let cc = self.c_c;
        self.p_c *= 1.0 - cc;
        if h_sigma {
            self.p_c.axpy((cc * (2.0 - cc) * self.mu_eff).sqrt(), &y_w, 1.0);
        }

        let delta_h = if h_sigma { 0.0 } else { (1.0 - cc) * cc * (2.0 - cc) };
        // Positive weights sum to one.
        let keep = 1.0 - self.c1 - self.c_mu + self.c1 * delta_h;
        let mut cov = &self.cov * keep;
        cov.ger(self.c1, &self.p_c, &self.p_c, 1.0);
        for (w, y) in self.weights.iter().zip(&steps) {
            cov.ger(self.c_mu * w, y, y, 1.0);
        }
        // Explicit symmetrization keeps C exactly symmetric.
        let sym = (&cov + cov.transpose()) * 0.5;
        self.cov = sym;

        if self.adapt_sigma {
            self.sigma *= ((cs / self.d_sigma) * (norm_ps / self.chi_n - 1.0)).exp();
        }
        self.refresh_eigensystem();
    }

    fn refresh_eigensystem(&mut self) {
        let eig = SymmetricEigen::new(self.cov.clone());
        let mut values = eig.eigenvalues;
        let mut clamped = false;
        for v in values.iter_mut() {
            if !(*v > MIN_EIGENVALUE) {
                *v = MIN_EIGENVALUE;
                clamped = true;
            }
        }
        self.basis = eig.eigenvectors;
        if clamped {
            let d = DMatrix::from_diagonal(&values);
            let rebuilt = &self.basis * d * self.basis.transpose();
            self.cov = (&rebuilt + rebuilt.transpose()) * 0.5;
        }
        self.scales = values.map(f64::sqrt);
    }

    /// Whether the distribution has degenerated numerically.
    pub fn is_degenerate(&self) -> bool {
        !self.sigma.is_finite()
            || self.sigma <= 0.0
            || self.mean.iter().any(|m| !m.is_finite())
            || self.cov.iter().any(|c| !c.is_finite())
    }
}

/// Runs the CMA-ES core alone on `f(x) = -|x|^2` (maximized) and returns the
/// best value seen within `budget` evaluations.
pub fn cma_es_sphere_check<R: Rng + ?Sized>(dim: usize, budget: usize, rng: &mut R) -> SphereReport {
    let lambda = CmaEs::default_population(dim);
    let mut es = CmaEs::new(vec![1.0; dim], 0.5, lambda);
    let mut best = f64::NEG_INFINITY;
    let mut evaluations = 0;
    let mut min_sigma = es.sigma();
    while evaluations + lambda <= budget {
        let mut candidates: Vec<(f64, Vec<f64>)> = es
            .sample(rng)
            .into_iter()
            .map(|x| (-x.iter().map(|v| v * v).sum::<f64>(), x))
            .collect();
        evaluations += lambda;
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
        best = best.max(candidates[0].0);
        let ranked: Vec<Vec<f64>> = candidates.into_iter().map(|c| c.1).collect();
        es.update(&ranked);
        min_sigma = min_sigma.min(es.sigma());
        if best >= -1e-14 {
            break;
        }
    }
    SphereReport {
        best,
        evaluations,
        min_sigma,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SphereReport {
    pub best: f64,
    pub evaluations: usize,
    pub min_sigma: f64,
}
