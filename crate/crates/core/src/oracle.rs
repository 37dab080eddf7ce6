//! Ground truth for the posterior machinery: exact eigendecompositions of
//! the analytic posterior covariance, finite-difference Jacobians of the
//! denoiser, and a sampling estimate of posterior moments that shares no
//! code with the closed forms.

use alloc::string::String;
use alloc::vec::Vec;

use libm::{acos, exp, sqrt};
use rand::Rng;

use crate::denoiser::{Condition, Denoiser, GaussianMixturePrior, Guidance};
use crate::error::{invalid, Error, Result};
use crate::inversion::ddpm_invert_full;
use crate::linalg::{orthonormalize, symmetric_eigen_desc};
use crate::rng::{self, standard_normal};
use crate::sampler::{ddpm_reverse, reverse_mean, NoiseSource, ReverseOptions};
use crate::schedule::Schedule;
use crate::zeus::{eps_route_mean, extract_pcs_at, PcParams, ReversePoint};
use crate::{Matrix, Vector};

/// Scale fraction below which a covariance entry counts as zero when
/// comparing entrywise.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// Eigenvalues descending, eigenvectors as matching columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPairs {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl EigenPairs {
    /// Eigendecomposition of the symmetrized matrix, keeping the top `n`.
    pub fn of(m: &Matrix, n: usize) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(invalid("eigendecomposition of a non-finite matrix"));
        }
        let (values, vectors) = symmetric_eigen_desc(m);
        let n = n.min(values.len());
        Ok(Self { values: values[..n].to_vec(), vectors: vectors.columns(0, n).into_owned() })
    }

    pub fn vector(&self, i: usize) -> Vector {
        self.vectors.column(i).into_owned()
    }

    pub fn columns(&self) -> Vec<Vector> {
        (0..self.values.len()).map(|i| self.vector(i)).collect()
    }

    /// `‖M - V Λ Vᵀ‖_F / ‖M‖_F`; meaningful when all pairs are kept.
    pub fn reconstruction_error(&self, m: &Matrix) -> f64 {
        let lambda = Matrix::from_diagonal(&Vector::from_vec(self.values.clone()));
        let approx = &self.vectors * lambda * self.vectors.transpose();
        (m - approx).norm() / m.norm()
    }
}

/// Exact posterior covariance of `x_0` given `x_t`, evaluated at the
/// rescaled observation with the equivalent noise level.
pub fn analytic_posterior_cov(
    prior: &GaussianMixturePrior,
    cond: &Condition,
    x_t: &Vector,
    t: usize,
    schedule: &Schedule,
) -> Result<Matrix> {
    let s = schedule.equivalent_noise_std(t)?;
    let y = x_t / sqrt(schedule.alpha_bar(t));
    prior.posterior_cov_with(prior.condition_weights(cond)?, &y, s)
}

pub fn analytic_posterior_eigs(
    prior: &GaussianMixturePrior,
    x_t: &Vector,
    t: usize,
    schedule: &Schedule,
    n: usize,
) -> Result<EigenPairs> {
    EigenPairs::of(&analytic_posterior_cov(prior, &Condition::Unconditional, x_t, t, schedule)?, n)
}

/// Central-difference Jacobian of `x_t ↦ x̂₀(x_t)`.
pub fn jacobian_fd<D: Denoiser + ?Sized>(
    denoiser: &D,
    cond: &Condition,
    x_t: &Vector,
    t: usize,
    schedule: &Schedule,
    h: f64,
) -> Result<Matrix> {
    if !(h > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let n = denoiser.dim();
    if x_t.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x_t.len() });
    }
    let mut jac = Matrix::zeros(n, n);
    for j in 0..n {
        let mut plus = x_t.clone();
        let mut minus = x_t.clone();
        plus[j] += h;
        minus[j] -= h;
        let fp = denoiser.predict(cond, &plus, t, schedule)?.x0_hat;
        let fm = denoiser.predict(cond, &minus, t, schedule)?.x0_hat;
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    Ok(jac)
}

/// Posterior covariance implied by a Jacobian taken with respect to `x_t`:
/// `((1-ᾱ)/ᾱ) · sqrt(ᾱ) · J`, the `sqrt(ᾱ)` converting to the rescaled
/// observation.
pub fn covariance_from_jacobian(jacobian: &Matrix, alpha_bar: f64) -> Matrix {
    jacobian * ((1.0 - alpha_bar) / alpha_bar * sqrt(alpha_bar))
}

/// Largest entrywise `|a - b| / max(|b|, floor_rel * max|b|)`. Entries of
/// `b` that vanish structurally are compared against a small fraction of the
/// matrix scale instead of zero.
pub fn max_relative_error(a: &Matrix, b: &Matrix, floor_rel: f64) -> f64 {
    let floor = (b.amax() * floor_rel).max(f64::MIN_POSITIVE);
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() / y.abs().max(floor)).fold(0.0, f64::max)
}

/// `‖J - Jᵀ‖_F / ‖J‖_F`.
pub fn asymmetry(m: &Matrix) -> f64 {
    (m - m.transpose()).norm() / m.norm()
}

/// Principal angles (radians, ascending) between the spans of two sets of
/// vectors.
pub fn principal_angles(a: &[Vector], b: &[Vector]) -> Result<Vec<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("subspace basis"));
    }
    let mut qa = a.to_vec();
    let mut qb = b.to_vec();
    orthonormalize(&mut qa, 1e-12).map_err(|column| Error::RankDeficient { t: 0, column })?;
    orthonormalize(&mut qb, 1e-12).map_err(|column| Error::RankDeficient { t: 0, column })?;
    let m = Matrix::from_fn(qa.len(), qb.len(), |r, c| qa[r].dot(&qb[c]));
    let mut angles: Vec<f64> = m.singular_values().iter().map(|s| acos(s.clamp(-1.0, 1.0))).collect();
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}

/// Self-normalized importance estimate of posterior moments.
#[derive(Debug, Clone, PartialEq)]
pub struct McStats {
    pub mean: Vector,
    pub cov: Matrix,
    pub mean_se: Vector,
    pub cov_se: Matrix,
    pub ess: f64,
    /// Set when the effective sample size drops below 100.
    pub low_ess: bool,
}

pub(crate) struct PriorSampler {
    cumulative: Vec<f64>,
    means: Vec<Vector>,
    factors: Vec<Matrix>,
}

impl PriorSampler {
    pub(crate) fn new(prior: &GaussianMixturePrior) -> Result<Self> {
        let mut acc = 0.0;
        let cumulative = prior
            .weights()
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        let factors = prior
            .covariances()
            .iter()
            .enumerate()
            .map(|(k, c)| c.clone().cholesky().map(|ch| ch.l()).ok_or(Error::NotPositiveDefinite(k)))
            .collect::<Result<_>>()?;
        Ok(Self { cumulative, means: prior.means().to_vec(), factors })
    }

    pub(crate) fn draw<R: Rng>(&self, rng: &mut R, out: &mut Vector) {
        let u: f64 = rng.random::<f64>() * self.cumulative.last().copied().unwrap_or(1.0);
        let k = self.cumulative.iter().position(|c| u < *c).unwrap_or(self.cumulative.len() - 1);
        let z = standard_normal(rng, out.len());
        out.copy_from(&self.means[k]);
        out.gemv(1.0, &self.factors[k], &z, 1.0);
    }
}

/// Draw `x_0` from the prior and weight each draw by the Gaussian
/// likelihood of observing `y = x_0 + s n`.
///
/// The same stream is regenerated for each of three passes: the largest
/// log-weight, then the mean, then covariance and standard errors.
pub fn mc_posterior_stats(
    prior: &GaussianMixturePrior,
    y: &Vector,
    s: f64,
    n_samples: usize,
    seed: u64,
) -> Result<McStats> {
    if n_samples < 1000 {
        return Err(invalid("need at least 1000 samples"));
    }
    let n = prior.dim();
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    if !(s > 0.0) {
        return Err(invalid("noise level must be positive"));
    }
    let sampler = PriorSampler::new(prior)?;
    let inv2s2 = if s.is_infinite() { 0.0 } else { 0.5 / (s * s) };
    let log_weight = |x: &Vector| -(y - x).norm_squared() * inv2s2;
    let mut x = Vector::zeros(n);

    let mut max_lw = f64::NEG_INFINITY;
    let mut rng = rng::stream(seed, rng::MC_ORACLE, &[]);
    for _ in 0..n_samples {
        sampler.draw(&mut rng, &mut x);
        max_lw = max_lw.max(log_weight(&x));
    }

    let (mut sw, mut sw2) = (0.0, 0.0);
    let mut swx = Vector::zeros(n);
    let mut rng = rng::stream(seed, rng::MC_ORACLE, &[]);
    for _ in 0..n_samples {
        sampler.draw(&mut rng, &mut x);
        let w = exp(log_weight(&x) - max_lw);
        sw += w;
        sw2 += w * w;
        swx.axpy(w, &x, 1.0);
    }
    let mean = swx / sw;

    // Delta-method variance of a ratio estimator: Σ w² (f - f̂)² / (Σ w)².
    let mut outer = Matrix::zeros(n, n);
    let mut sw2d2 = Vector::zeros(n);
    let mut sw2g = Matrix::zeros(n, n);
    let mut sw2g2 = Matrix::zeros(n, n);
    let mut rng = rng::stream(seed, rng::MC_ORACLE, &[]);
    let mut d = Vector::zeros(n);
    for _ in 0..n_samples {
        sampler.draw(&mut rng, &mut x);
        let w = exp(log_weight(&x) - max_lw);
        d.copy_from(&x);
        d -= &mean;
        for r in 0..n {
            sw2d2[r] += w * w * d[r] * d[r];
            for c in 0..n {
                let g = d[r] * d[c];
                outer[(r, c)] += w * g;
                sw2g[(r, c)] += w * w * g;
                sw2g2[(r, c)] += w * w * g * g;
            }
        }
    }
    let cov = outer / sw;
    let mean_se = sw2d2.map(|v| sqrt(v) / sw);
    let cov_se = Matrix::from_fn(n, n, |r, c| {
        let ch = cov[(r, c)];
        let v = sw2g2[(r, c)] - 2.0 * ch * sw2g[(r, c)] + ch * ch * sw2;
        sqrt(v.max(0.0)) / sw
    });
    let ess = sw * sw / sw2;
    Ok(McStats { mean, cov, mean_se, cov_se, ess, low_ess: ess < 100.0 })
}

/// One line of the identity suite.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn new(name: String, value: f64, tolerance: f64) -> Self {
        Self { name, value, tolerance, passed: value <= tolerance }
    }
}

/// The end-to-end identities, evaluated on one prior: inversion replay,
/// covariance from the Jacobian, Jacobian symmetry, eigendecomposition
/// reconstruction, the noise-route perturbation, and PC recovery where the
/// eigengap allows it.
pub fn verify_suite(prior: &GaussianMixturePrior, schedule: &Schedule, seed: u64) -> Result<Vec<Check>> {
    use alloc::format;
    let n = prior.dim();
    let mut checks = Vec::new();
    let steps = schedule.steps();
    let probe_ts = [1.max(steps / 20), steps / 4, steps / 2, steps];
    let x0 = standard_normal(&mut rng::stream(seed, rng::MC_ORACLE, &[1]), n) + &prior.means()[0];

    let inv = ddpm_invert_full(prior, &x0, Guidance::unconditional(), schedule, steps, seed)?;
    let tr = &inv.trajectory;
    let out = ddpm_reverse(prior, &tr.x_start, NoiseSource::Trajectory(tr), tr.guidance(), schedule, steps, &ReverseOptions::default())?;
    checks.push(Check::new(format!("replay reconstruction (t_start={steps})"), (out.x0 - &x0).amax(), 1e-8));

    for &t in probe_ts.iter().filter(|t| **t >= 1) {
        let x_t = &inv.states[t];
        let jac = jacobian_fd(prior, &Condition::Unconditional, x_t, t, schedule, 1e-5)?;
        let exact = analytic_posterior_cov(prior, &Condition::Unconditional, x_t, t, schedule)?;
        let from_jac = covariance_from_jacobian(&jac, schedule.alpha_bar(t));
        checks.push(Check::new(
            format!("covariance-jacobian identity (t={t})"),
            max_relative_error(&from_jac, &exact, RELATIVE_FLOOR),
            1e-3,
        ));
        checks.push(Check::new(format!("jacobian symmetry (t={t})"), asymmetry(&jac), 1e-4));
        let eig = EigenPairs::of(&exact, n)?;
        checks.push(Check::new(format!("eigen reconstruction (t={t})"), eig.reconstruction_error(&exact), 1e-8));

        let pred = prior.predict(&Condition::Unconditional, x_t, t, schedule)?;
        let dir = eig.vector(0) * sqrt(eig.values[0]);
        let via_eps = eps_route_mean(schedule, t, x_t, &pred, 1.0, &dir)?;
        let via_mu = reverse_mean(schedule, t, &pred)? + dir * schedule.drift_coefficient(t)?;
        checks.push(Check::new(format!("noise-route perturbation (t={t})"), (via_eps - via_mu).amax(), 1e-10));

        // Largest leading block of at most three PCs with a usable eigengap.
        let gapped = (1..n.min(4)).rev().find(|&k| eig.values[k - 1] >= 1.5 * eig.values[k]);
        if let Some(k) = gapped {
            let params = PcParams { n_pcs: k, ..Default::default() };
            let point = ReversePoint { t, x_t: x_t.clone(), x0_hat: pred.x0_hat.clone() };
            let set = extract_pcs_at(prior, Guidance::unconditional(), schedule, &point, &params, seed, None, &mut 0)?;
            let angles = principal_angles(&set.vectors, &eig.columns()[..k])?;
            let worst = angles.last().copied().unwrap_or(0.0).to_degrees();
            checks.push(Check::new(format!("pc subspace angle, degrees (t={t})"), worst, 2.0));
            let lambda_err = set
                .lambdas
                .iter()
                .zip(&eig.values)
                .map(|(l, e)| (l - e).abs() / e)
                .fold(0.0, f64::max);
            checks.push(Check::new(format!("pc eigenvalue relative error (t={t})"), lambda_err, 0.05));
        }
    }
    Ok(checks)
}
