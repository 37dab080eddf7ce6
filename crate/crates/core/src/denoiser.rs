//! Closed-form MSE-optimal denoisers for Gaussian-mixture priors.
//!
//! Every timestep of the forward process is a Gaussian denoising problem:
//! `x_t / sqrt(ᾱ_t) = x_0 + n` with `n ~ N(0, (1-ᾱ_t)/ᾱ_t I)`. For a mixture
//! prior the posterior mean and covariance of `x_0` are available exactly,
//! which is what lets every downstream algorithm be checked against ground
//! truth.

use alloc::vec::Vec;
use core::f64::consts::PI;

use libm::{exp, log, sqrt};

use crate::error::{invalid, Error, Result};
use crate::linalg::symmetric_eigen_desc;
use crate::schedule::Schedule;
use crate::{Matrix, Vector};

/// What the denoiser is asked to generate. Component weights stand in for a
/// text prompt: they reweight the mixture.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    Unconditional,
    ComponentWeights(Vec<f64>),
}

static UNCONDITIONAL: Condition = Condition::Unconditional;

impl Condition {
    pub fn weights(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty("condition weights"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("condition weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid("condition weights must sum to 1"));
        }
        Ok(Self::ComponentWeights(weights))
    }

    pub fn one_hot(index: usize, components: usize) -> Result<Self> {
        if index >= components {
            return Err(invalid("one-hot index out of range"));
        }
        let mut w = alloc::vec![0.0; components];
        w[index] = 1.0;
        Ok(Self::ComponentWeights(w))
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self, Self::ComponentWeights(_))
    }

    pub fn component_weights(&self) -> Option<&[f64]> {
        match self {
            Self::Unconditional => None,
            Self::ComponentWeights(w) => Some(w),
        }
    }
}

/// Predicted noise and the matching clean-signal estimate at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsPrediction {
    pub eps_hat: Vector,
    pub x0_hat: Vector,
}

impl EpsPrediction {
    /// Build from a noise prediction; `x0_hat = (x_t - sqrt(1-ᾱ) eps) / sqrt(ᾱ)`.
    pub fn from_eps(x_t: &Vector, eps_hat: Vector, alpha_bar: f64) -> Self {
        let x0_hat = (x_t - &eps_hat * sqrt(1.0 - alpha_bar)) / sqrt(alpha_bar);
        Self { eps_hat, x0_hat }
    }

    /// Build from a clean-signal prediction; `eps = (x_t - sqrt(ᾱ) x0) / sqrt(1-ᾱ)`.
    pub fn from_x0(x_t: &Vector, x0_hat: Vector, alpha_bar: f64) -> Self {
        let eps_hat = (x_t - &x0_hat * sqrt(alpha_bar)) / sqrt(1.0 - alpha_bar);
        Self { eps_hat, x0_hat }
    }
}

/// A noise-prediction network, here always an analytic one.
///
/// Implementations must be pure: callers evaluate them from several places
/// without synchronization.
pub trait Denoiser {
    fn dim(&self) -> usize;

    fn predict(
        &self,
        cond: &Condition,
        x_t: &Vector,
        t: usize,
        schedule: &Schedule,
    ) -> Result<EpsPrediction>;
}

/// Classifier-free guidance: `eps_uncond + w (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_uncond: &Vector, eps_cond: &Vector, w: f64) -> Result<Vector> {
    if eps_uncond.len() != eps_cond.len() {
        return Err(Error::DimensionMismatch { expected: eps_uncond.len(), got: eps_cond.len() });
    }
    Ok(eps_uncond + (eps_cond - eps_uncond) * w)
}

/// A condition together with its guidance strength.
#[derive(Debug, Clone, Copy)]
pub struct Guidance<'a> {
    pub cond: &'a Condition,
    pub scale: f64,
}

impl<'a> Guidance<'a> {
    pub fn new(cond: &'a Condition, scale: f64) -> Self {
        Self { cond, scale }
    }

    pub fn unconditional() -> Guidance<'static> {
        Guidance { cond: &UNCONDITIONAL, scale: 1.0 }
    }

    /// Denoiser calls per guided prediction: two under a condition, one
    /// without.
    pub fn evals_per_step(&self) -> u64 {
        if self.cond.is_conditional() {
            2
        } else {
            1
        }
    }

    /// Guided prediction; adds the number of denoiser calls made to `nfe`.
    pub fn predict<D: Denoiser + ?Sized>(
        &self,
        denoiser: &D,
        x_t: &Vector,
        t: usize,
        schedule: &Schedule,
        nfe: &mut u64,
    ) -> Result<EpsPrediction> {
        let uncond = denoiser.predict(&UNCONDITIONAL, x_t, t, schedule)?;
        *nfe += 1;
        if !self.cond.is_conditional() {
            return Ok(uncond);
        }
        let cond = denoiser.predict(self.cond, x_t, t, schedule)?;
        *nfe += 1;
        let eps = cfg_combine(&uncond.eps_hat, &cond.eps_hat, self.scale)?;
        Ok(EpsPrediction::from_eps(x_t, eps, schedule.alpha_bar(t)))
    }
}

// Eigendecomposition of one component covariance. Diagonal covariances
// skip the basis entirely.
#[derive(Debug, Clone, PartialEq)]
struct Spectrum {
    values: Vector,
    basis: Option<Matrix>,
}

impl Spectrum {
    fn new(cov: &Matrix) -> Self {
        let n = cov.nrows();
        let diagonal = (0..n).all(|r| (0..n).all(|c| r == c || cov[(r, c)] == 0.0));
        if diagonal {
            return Self { values: cov.diagonal(), basis: None };
        }
        let (values, vectors) = symmetric_eigen_desc(cov);
        Self { values: Vector::from_vec(values), basis: Some(vectors) }
    }

    fn to_eigen(&self, r: &Vector) -> Vector {
        match &self.basis {
            None => r.clone(),
            Some(u) => u.tr_mul(r),
        }
    }

    fn from_eigen(&self, q: Vector) -> Vector {
        match &self.basis {
            None => q,
            Some(u) => u * q,
        }
    }

    // U diag(f(d)) Uᵀ
    fn matrix_with(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let scaled = self.values.map(f);
        match &self.basis {
            None => Matrix::from_diagonal(&scaled),
            Some(u) => {
                let mut us = u.clone();
                for (c, s) in scaled.iter().enumerate() {
                    us.column_mut(c).scale_mut(*s);
                }
                us * u.transpose()
            }
        }
    }
}

/// Gaussian mixture `Σ_k w_k N(μ_k, Σ_k)` over `R^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixturePrior {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vector>,
    covariances: Vec<Matrix>,
    spectra: Vec<Spectrum>,
}

/// Per-component posterior pieces for one observation.
#[derive(Debug, Clone)]
struct PosteriorParts {
    weights: Vec<f64>,
    means: Vec<Vector>,
    active: Vec<usize>,
}

impl GaussianMixturePrior {
    pub fn new(weights: Vec<f64>, means: Vec<Vector>, covariances: Vec<Matrix>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty("mixture"));
        }
        if means.len() != weights.len() || covariances.len() != weights.len() {
            return Err(invalid("weights, means and covariances must have equal counts"));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(invalid("signal dimension must be positive"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("mixture weights must be finite and non-negative"));
        }
        if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(invalid("mixture weights must sum to 1"));
        }
        let mut spectra = Vec::with_capacity(weights.len());
        for (k, (mean, cov)) in means.iter().zip(&covariances).enumerate() {
            if mean.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: mean.len() });
            }
            if cov.nrows() != dim || cov.ncols() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: cov.nrows() });
            }
            if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
                return Err(invalid("prior parameters must be finite"));
            }
            let asym = (cov - cov.transpose()).amax();
            if asym > 1e-12 * cov.amax().max(1.0) || cov.clone().cholesky().is_none() {
                return Err(Error::NotPositiveDefinite(k));
            }
            let spectrum = Spectrum::new(cov);
            if spectrum.values.iter().any(|v| *v <= 0.0) {
                return Err(Error::NotPositiveDefinite(k));
            }
            spectra.push(spectrum);
        }
        Ok(Self { dim, weights, means, covariances, spectra })
    }

    /// Single Gaussian `N(mean, cov)`.
    pub fn gaussian(mean: Vector, cov: Matrix) -> Result<Self> {
        Self::new(alloc::vec![1.0], alloc::vec![mean], alloc::vec![cov])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vector] {
        &self.means
    }

    pub fn covariances(&self) -> &[Matrix] {
        &self.covariances
    }

    /// Mixture weights after applying a condition.
    pub fn condition_weights<'a>(&'a self, cond: &'a Condition) -> Result<&'a [f64]> {
        match cond {
            Condition::Unconditional => Ok(&self.weights),
            Condition::ComponentWeights(w) if w.len() == self.weights.len() => Ok(w),
            Condition::ComponentWeights(w) => {
                Err(Error::DimensionMismatch { expected: self.weights.len(), got: w.len() })
            }
        }
    }

    /// `log N(y; μ_k, Σ_k + s² I)`.
    pub fn component_log_density(&self, k: usize, y: &Vector, s2: f64) -> f64 {
        let spectrum = &self.spectra[k];
        let q = spectrum.to_eigen(&(y - &self.means[k]));
        let mut quad = 0.0;
        let mut logdet = 0.0;
        for (qi, di) in q.iter().zip(spectrum.values.iter()) {
            let v = di + s2;
            quad += qi * qi / v;
            logdet += log(v);
        }
        -0.5 * (quad + logdet + self.dim as f64 * log(2.0 * PI))
    }

    /// `log Σ_k weights_k N(y; μ_k, Σ_k + s² I)` with max subtraction.
    pub fn log_density_with(&self, weights: &[f64], y: &Vector, s2: f64) -> Result<f64> {
        self.check_observation(y)?;
        let terms: Vec<f64> = weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(k, w)| log(*w) + self.component_log_density(k, y, s2))
            .collect();
        Ok(log_sum_exp(&terms))
    }

    fn check_observation(&self, y: &Vector) -> Result<()> {
        if y.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: y.len() });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(invalid("observation must be finite"));
        }
        Ok(())
    }

    fn posterior_parts(&self, weights: &[f64], y: &Vector, s: f64) -> Result<PosteriorParts> {
        self.check_observation(y)?;
        if !(s > 0.0 && s.is_finite()) {
            return Err(invalid("noise std must be positive and finite"));
        }
        let s2 = s * s;
        let active: Vec<usize> = (0..weights.len()).filter(|&k| weights[k] > 0.0).collect();
        if active.is_empty() {
            return Err(invalid("condition puts zero weight on every component"));
        }
        let mut logits = Vec::with_capacity(active.len());
        let mut means = Vec::with_capacity(active.len());
        for &k in &active {
            let spectrum = &self.spectra[k];
            let q = spectrum.to_eigen(&(y - &self.means[k]));
            let mut quad = 0.0;
            let mut logdet = 0.0;
            let mut shrunk = q.clone();
            for ((qi, di), out) in q.iter().zip(spectrum.values.iter()).zip(shrunk.iter_mut()) {
                let v = di + s2;
                quad += qi * qi / v;
                logdet += log(v);
                *out = qi * di / v;
            }
            logits.push(log(weights[k]) - 0.5 * (quad + logdet));
            means.push(&self.means[k] + spectrum.from_eigen(shrunk));
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut post: Vec<f64> = logits.iter().map(|l| exp(l - max)).collect();
        let total: f64 = post.iter().sum();
        for p in &mut post {
            *p /= total;
        }
        Ok(PosteriorParts { weights: post, means, active })
    }

    /// `E[x | x + n = y]` for `n ~ N(0, s² I)` under the given mixture weights.
    pub fn posterior_mean_with(&self, weights: &[f64], y: &Vector, s: f64) -> Result<Vector> {
        let parts = self.posterior_parts(weights, y, s)?;
        Ok(weighted_mean(&parts))
    }

    pub fn posterior_mean(&self, y: &Vector, s: f64) -> Result<Vector> {
        self.posterior_mean_with(&self.weights, y, s)
    }

    /// `Cov[x | x + n = y]`, symmetric by construction.
    pub fn posterior_cov_with(&self, weights: &[f64], y: &Vector, s: f64) -> Result<Matrix> {
        let parts = self.posterior_parts(weights, y, s)?;
        let mean = weighted_mean(&parts);
        let s2 = s * s;
        let mut cov = Matrix::zeros(self.dim, self.dim);
        for ((&k, w), m) in parts.active.iter().zip(&parts.weights).zip(&parts.means) {
            if *w == 0.0 {
                continue;
            }
            cov += self.spectra[k].matrix_with(|d| d * s2 / (d + s2)) * *w;
            let dm = m - &mean;
            cov.ger(*w, &dm, &dm, 1.0);
        }
        Ok(crate::linalg::symmetrize(&cov))
    }

    pub fn posterior_cov(&self, y: &Vector, s: f64) -> Result<Matrix> {
        self.posterior_cov_with(&self.weights, y, s)
    }

    /// Posterior mean under a condition at the rescaled observation of `x_t`.
    pub fn denoise(&self, cond: &Condition, x_t: &Vector, t: usize, schedule: &Schedule) -> Result<Vector> {
        let weights = self.condition_weights(cond)?;
        let s = schedule.equivalent_noise_std(t)?;
        self.posterior_mean_with(weights, &(x_t / sqrt(schedule.alpha_bar(t))), s)
    }
}

impl Denoiser for GaussianMixturePrior {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, cond: &Condition, x_t: &Vector, t: usize, schedule: &Schedule) -> Result<EpsPrediction> {
        let x0_hat = self.denoise(cond, x_t, t, schedule)?;
        Ok(EpsPrediction::from_x0(x_t, x0_hat, schedule.alpha_bar(t)))
    }
}

fn weighted_mean(parts: &PosteriorParts) -> Vector {
    let mut mean = Vector::zeros(parts.means[0].len());
    for (w, m) in parts.weights.iter().zip(&parts.means) {
        mean.axpy(*w, m, 1.0);
    }
    mean
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + log(terms.iter().map(|l| exp(l - max)).sum::<f64>())
}

/// Equal-weight mixture with isotropic bandwidth `τ² I` at each point.
pub fn empirical_prior(points: &[Vector], bandwidth: f64) -> Result<GaussianMixturePrior> {
    if points.is_empty() {
        return Err(Error::Empty("point set"));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(invalid("bandwidth must be positive and finite"));
    }
    let n = points[0].len();
    let k = points.len();
    let cov = Matrix::identity(n, n) * (bandwidth * bandwidth);
    GaussianMixturePrior::new(
        alloc::vec![1.0 / k as f64; k],
        points.to_vec(),
        alloc::vec![cov; k],
    )
}

/// Two equal-weight components at `±(2, 1, 0, …)` with a decaying diagonal
/// covariance. Used as the shared test bed for the
/// editing comparisons and as the CLI's built-in prior.
pub fn standard_test_prior(dim: usize) -> GaussianMixturePrior {
    assert!(dim >= 2, "standard prior needs at least two dimensions");
    let spectrum: Vec<f64> = (0..dim).map(|i| 0.8 * libm::pow(0.75, i as f64) + 0.05).collect();
    let cov = Matrix::from_diagonal(&Vector::from_vec(spectrum));
    let mut a = Vector::zeros(dim);
    a[0] = 2.0;
    a[1] = 1.0;
    GaussianMixturePrior::new(alloc::vec![0.5, 0.5], alloc::vec![a.clone(), -a], alloc::vec![cov.clone(), cov])
        .expect("standard prior is valid")
}
