//! Posterior principal components by matrix-free subspace iteration, and
//! the reverse-process perturbation built from them.
//!
//! The Jacobian of an MSE-optimal denoiser with respect to the rescaled
//! observation `y = x_t / sqrt(ᾱ_t)` equals the posterior covariance divided
//! by the noise variance `(1-ᾱ_t)/ᾱ_t`. Probing `x_t + C sqrt(ᾱ_t) v` moves
//! `y` by `C v`, so the difference of denoised outputs over `C` is a
//! covariance-vector product up to that constant.

use alloc::vec::Vec;

use libm::{log, sqrt};

use crate::denoiser::{Condition, Denoiser, EpsPrediction, Guidance};
use crate::error::{invalid, Error, Result};
use crate::inversion::{Inversion, NoiseTrajectory};
use crate::linalg::orthonormalize;
use crate::rng::{self, standard_normal};
use crate::sampler::{reverse_mean, EditPlan, Mask, StepPerturbation, TPrime};
use crate::schedule::Schedule;
use crate::Vector;

const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct PcParams {
    pub n_pcs: usize,
    pub iters: usize,
    pub probe_c: f64,
    /// Correlation threshold below which a PC is negated to follow its
    /// predecessor at `t + 1`.
    pub rho: f64,
    pub mask: Option<Vec<usize>>,
}

impl Default for PcParams {
    fn default() -> Self {
        Self { n_pcs: 3, iters: 50, probe_c: 1e-3, rho: -0.5, mask: None }
    }
}

impl PcParams {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.n_pcs == 0 || self.iters == 0 {
            return Err(invalid("n_pcs and iters must be at least 1"));
        }
        if !(self.probe_c > 0.0 && self.probe_c.is_finite()) {
            return Err(invalid("probe constant must be positive"));
        }
        if !(self.rho < 0.0) {
            return Err(invalid("rho must be negative"));
        }
        let room = match &self.mask {
            Some(m) => Mask::new(m, dim)?.indices().len(),
            None => dim,
        };
        if self.n_pcs > room {
            return Err(invalid("n_pcs exceeds the number of free coordinates"));
        }
        Ok(())
    }
}

/// PCs at one timestep, eigenvalue estimates sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct PcSet {
    pub t: usize,
    pub vectors: Vec<Vector>,
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcBundle {
    pub params: PcParams,
    pub schedule_id: u64,
    pub cond: Condition,
    pub guidance: f64,
    pub seed: u64,
    /// Sorted by descending timestep.
    pub sets: Vec<PcSet>,
}

impl PcBundle {
    pub fn at(&self, t: usize) -> Option<&PcSet> {
        self.sets.iter().find(|s| s.t == t)
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.sets.iter().map(|s| s.t).collect()
    }

    /// True when every timestep in `[lo, hi]` has a set.
    pub fn covers(&self, lo: usize, hi: usize) -> bool {
        (lo..=hi).all(|t| self.at(t).is_some())
    }
}

/// A state on the unperturbed reverse path and its denoised estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReversePoint {
    pub t: usize,
    pub x_t: Vector,
    pub x0_hat: Vector,
}

/// States the source replay visits for `t` in `[lo, hi]`, taken from an
/// inversion at no cost. Replaying reproduces exactly these states.
pub fn points_from_inversion(inv: &Inversion, lo: usize, hi: usize) -> Result<Vec<ReversePoint>> {
    let top = inv.trajectory.t_start;
    if lo == 0 || lo > hi || hi > top {
        return Err(Error::TimestepOutOfRange { t: hi.max(lo), max: top });
    }
    Ok((lo..=hi)
        .rev()
        .map(|t| ReversePoint { t, x_t: inv.states[t].clone(), x0_hat: inv.denoised[t].clone() })
        .collect())
}

/// Replay a stored trajectory under its own guidance, recording the states
/// with `t >= lo`. Costs one guided prediction per step down to `lo`.
pub fn replay_points<D: Denoiser + ?Sized>(
    denoiser: &D,
    trajectory: &NoiseTrajectory,
    schedule: &Schedule,
    lo: usize,
    nfe: &mut u64,
) -> Result<Vec<ReversePoint>> {
    trajectory.check_schedule(schedule)?;
    if lo == 0 || lo > trajectory.t_start {
        return Err(Error::TimestepOutOfRange { t: lo, max: trajectory.t_start });
    }
    let guidance = trajectory.guidance();
    let mut out = Vec::new();
    let mut x = trajectory.x_start.clone();
    for t in (lo..=trajectory.t_start).rev() {
        let pred = guidance.predict(denoiser, &x, t, schedule, nfe)?;
        let next = if t > lo {
            let sigma = schedule.sigma(t);
            let z = trajectory.noise(t);
            let noise = if sigma > 0.0 { z * sigma } else { z.clone() };
            Some(reverse_mean(schedule, t, &pred)? + noise)
        } else {
            None
        };
        out.push(ReversePoint { t, x_t: x.clone(), x0_hat: pred.x0_hat });
        if let Some(n) = next {
            x = n;
        }
    }
    Ok(out)
}

fn orthonormalize_with_retry(
    vs: &mut [Vector],
    retried: &mut [bool],
    t: usize,
    mut fresh: impl FnMut(usize) -> Vector,
) -> Result<()> {
    loop {
        match orthonormalize(vs, RANK_TOL) {
            Ok(()) => return Ok(()),
            Err(j) if !retried[j] => {
                retried[j] = true;
                vs[j] = fresh(j);
            }
            Err(j) => return Err(Error::RankDeficient { t, column: j }),
        }
    }
}

/// Subspace iteration at one point of the reverse path.
///
/// `previous` is the set at the next-larger timestep, if any; PCs pointing
/// against their predecessor (correlation below `rho`) are negated.
pub fn extract_pcs_at<D: Denoiser + ?Sized>(
    denoiser: &D,
    guidance: Guidance<'_>,
    schedule: &Schedule,
    point: &ReversePoint,
    params: &PcParams,
    seed: u64,
    previous: Option<&PcSet>,
    nfe: &mut u64,
) -> Result<PcSet> {
    let dim = denoiser.dim();
    params.validate(dim)?;
    let t = point.t;
    schedule.check_timestep(t)?;
    if point.x_t.len() != dim || point.x0_hat.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: point.x_t.len() });
    }
    let mask = params.mask.as_deref().map(|m| Mask::new(m, dim)).transpose()?;
    let restrict = |v: &mut Vector| {
        if let Some(m) = &mask {
            m.restrict(v);
        }
    };
    let draw = |i: usize, attempt: u64| {
        let keys: &[u64] = if attempt == 0 { &[t as u64, i as u64] } else { &[t as u64, i as u64, attempt] };
        let mut v = standard_normal(&mut rng::stream(seed, rng::PC_INIT, keys), dim);
        restrict(&mut v);
        v
    };

    let n = params.n_pcs;
    let c = params.probe_c;
    let ab = schedule.alpha_bar(t);
    let shift = c * sqrt(ab);
    let mut retried = alloc::vec![false; n];
    let mut vs: Vec<Vector> = (0..n).map(|i| draw(i, 0)).collect();
    orthonormalize_with_retry(&mut vs, &mut retried, t, |j| draw(j, 1))?;

    let mut gains = alloc::vec![0.0; n];
    for _ in 0..params.iters {
        for (v, gain) in vs.iter_mut().zip(gains.iter_mut()) {
            let probe = &point.x_t + &*v * shift;
            let shifted = guidance.predict(denoiser, &probe, t, schedule, nfe)?.x0_hat;
            let mut d = (shifted - &point.x0_hat) / c;
            if d.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { t });
            }
            restrict(&mut d);
            *gain = d.norm();
            *v = d;
        }
        orthonormalize_with_retry(&mut vs, &mut retried, t, |j| draw(j, 1))?;
    }

    // λ = ((1/ᾱ - 1)/C) ‖Δ‖, read off the last iteration's probes.
    let scale = 1.0 / ab - 1.0;
    let mut pairs: Vec<(f64, Vector)> = gains.iter().map(|g| g * scale).zip(vs).collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (lambdas, mut vectors): (Vec<f64>, Vec<Vector>) = pairs.into_iter().unzip();

    if let Some(prev) = previous {
        for (v, p) in vectors.iter_mut().zip(&prev.vectors) {
            if v.dot(p) < params.rho {
                v.neg_mut();
            }
        }
    }
    Ok(PcSet { t, vectors, lambdas })
}

/// PCs at every given point, processed by descending timestep so each set
/// can be sign-aligned with the one computed just before it.
pub fn extract_pcs<D: Denoiser + ?Sized>(
    denoiser: &D,
    guidance: Guidance<'_>,
    schedule: &Schedule,
    points: &[ReversePoint],
    params: &PcParams,
    seed: u64,
    nfe: &mut u64,
) -> Result<PcBundle> {
    if points.is_empty() {
        return Err(Error::Empty("pc extraction points"));
    }
    let mut order: Vec<&ReversePoint> = points.iter().collect();
    order.sort_by(|a, b| b.t.cmp(&a.t));
    let mut sets: Vec<PcSet> = Vec::with_capacity(order.len());
    for point in order {
        let previous = sets.last().filter(|s| s.t == point.t + 1);
        let set = extract_pcs_at(denoiser, guidance, schedule, point, params, seed, previous, nfe)?;
        sets.push(set);
    }
    Ok(PcBundle {
        params: params.clone(),
        schedule_id: schedule.id(),
        cond: guidance.cond.clone(),
        guidance: guidance.scale,
        seed,
        sets,
    })
}

/// Average eigenvalue estimates per (pc index, timestep) over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaProfile {
    pub n_pcs: usize,
    /// Descending timesteps; `values[k][i]` belongs to `timesteps[k]`.
    pub timesteps: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl LambdaProfile {
    pub fn from_bundle(bundle: &PcBundle) -> Self {
        Self {
            n_pcs: bundle.params.n_pcs,
            timesteps: bundle.timesteps(),
            values: bundle.sets.iter().map(|s| s.lambdas.clone()).collect(),
        }
    }

    pub fn lambda(&self, i: usize, t: usize) -> Option<f64> {
        let k = self.timesteps.iter().position(|&s| s == t)?;
        self.values[k].get(i).copied()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.timesteps.len() {
            return Err(invalid("lambda profile rows do not match its timesteps"));
        }
        for row in &self.values {
            if row.len() != self.n_pcs {
                return Err(Error::DimensionMismatch { expected: self.n_pcs, got: row.len() });
            }
            if row.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(invalid("lambda profile entries must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

pub fn average_lambda(bundles: &[PcBundle]) -> Result<LambdaProfile> {
    let first = bundles.first().ok_or(Error::Empty("bundles"))?;
    let mut profile = LambdaProfile::from_bundle(first);
    for b in &bundles[1..] {
        if b.params.n_pcs != profile.n_pcs || b.timesteps() != profile.timesteps {
            return Err(invalid("bundles differ in pc count or timesteps"));
        }
        for (row, set) in profile.values.iter_mut().zip(&b.sets) {
            for (acc, l) in row.iter_mut().zip(&set.lambdas) {
                *acc += l;
            }
        }
    }
    let n = bundles.len() as f64;
    for row in &mut profile.values {
        for v in row {
            *v /= n;
        }
    }
    Ok(profile)
}

/// The additive term on μ_t: `γ c_t Σ_j a_j λ_{i_j|t}^{1/2} v_{i_j|t'}`.
#[derive(Debug, Clone)]
pub struct Perturbation<'a> {
    bundle: &'a PcBundle,
    profile: Option<&'a LambdaProfile>,
    selector: Vec<(usize, f64)>,
    gamma: f64,
    t_start: usize,
    t_end: usize,
    t_prime: TPrime,
}

impl<'a> Perturbation<'a> {
    /// Checks up front that every vector and eigenvalue the plan needs is
    /// present. Fixed-`t'` plans take λ from `profile`; per-step plans take
    /// it from the bundle itself.
    pub fn new(bundle: &'a PcBundle, profile: Option<&'a LambdaProfile>, plan: &EditPlan) -> Result<Self> {
        let t_prime = plan.t_prime.ok_or_else(|| invalid("perturbation needs t_prime"))?;
        let n = bundle.params.n_pcs;
        for &(i, _) in &plan.pc_selector {
            if i >= n {
                return Err(invalid(alloc::format!("pc index {} exceeds bundle size {n}", i + 1)));
            }
        }
        let p = Self {
            bundle,
            profile,
            selector: plan.pc_selector.clone(),
            gamma: plan.gamma,
            t_start: plan.t_start,
            t_end: plan.t_end,
            t_prime,
        };
        for t in plan.t_end..=plan.t_start {
            p.direction(t)?;
        }
        Ok(p)
    }

    /// `Σ_j a_j λ_{i_j|t}^{1/2} v_{i_j|t'(t)}`, or `None` outside the edit
    /// window.
    pub fn direction(&self, t: usize) -> Result<Option<Vector>> {
        if t < self.t_end || t > self.t_start {
            return Ok(None);
        }
        let source = match self.t_prime {
            TPrime::Fixed(tp) => tp,
            TPrime::PerStep => t,
        };
        let set = self.bundle.at(source).ok_or(Error::MissingPcs(source))?;
        let mut out = Vector::zeros(set.vectors[0].len());
        for &(i, a) in &self.selector {
            let lambda = match (self.t_prime, self.profile) {
                (TPrime::PerStep, _) => set.lambdas.get(i).copied(),
                (TPrime::Fixed(_), Some(profile)) => profile.lambda(i, t),
                (TPrime::Fixed(_), None) => None,
            }
            .ok_or(Error::MissingLambda { index: i, t })?;
            out.axpy(a * sqrt(lambda.max(0.0)), &set.vectors[i], 1.0);
        }
        Ok(Some(out))
    }
}

impl StepPerturbation for Perturbation<'_> {
    fn term(&self, t: usize, schedule: &Schedule) -> Result<Option<Vector>> {
        if self.gamma == 0.0 {
            return Ok(None);
        }
        match self.direction(t)? {
            Some(d) => Ok(Some(d * (self.gamma * schedule.drift_coefficient(t)?))),
            None => Ok(None),
        }
    }
}

/// μ_t with the shift applied through the noise prediction: ε̂ loses
/// `γ sqrt(ᾱ_t)/sqrt(1-ᾱ_t) d`, and x̂₀ is recomputed from it.
pub fn eps_route_mean(
    schedule: &Schedule,
    t: usize,
    x_t: &Vector,
    pred: &EpsPrediction,
    gamma: f64,
    direction: &Vector,
) -> Result<Vector> {
    let ab = schedule.alpha_bar(t);
    let eps = &pred.eps_hat - direction * (gamma * sqrt(ab) / sqrt(1.0 - ab));
    reverse_mean(schedule, t, &EpsPrediction::from_eps(x_t, eps, ab))
}

/// μ_t with only x̂₀ shifted by `γ d`, the noise prediction left alone.
pub fn asymmetric_mean(
    schedule: &Schedule,
    t: usize,
    pred: &EpsPrediction,
    gamma: f64,
    direction: &Vector,
) -> Result<Vector> {
    let shifted = EpsPrediction { eps_hat: pred.eps_hat.clone(), x0_hat: &pred.x0_hat + direction * gamma };
    reverse_mean(schedule, t, &shifted)
}

/// Amplitude of the consistent shift relative to the x̂₀-only shift,
/// `c_t / sqrt(ᾱ_{t-1})`.
pub fn asymmetric_shift_ratio(schedule: &Schedule, t: usize) -> Result<f64> {
    Ok(schedule.drift_coefficient(t)? / sqrt(schedule.alpha_bar(t - 1)))
}

/// Shannon entropy of the energy of `v` over contiguous coordinate groups.
pub fn pc_entropy(v: &Vector, group_size: usize) -> Result<f64> {
    if group_size == 0 || v.len() % group_size != 0 {
        return Err(invalid("vector length must be a positive multiple of group_size"));
    }
    let total = v.norm_squared();
    if total == 0.0 {
        return Err(invalid("entropy of a zero vector"));
    }
    let mut h = 0.0;
    for g in v.as_slice().chunks(group_size) {
        let p = g.iter().map(|x| x * x).sum::<f64>() / total;
        if p > 0.0 {
            h -= p * log(p);
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{standard_test_prior, GaussianMixturePrior};
    use crate::inversion::ddpm_invert_full;
    use crate::sampler::Method;
    use crate::Matrix;
    use alloc::vec;

    fn schedule() -> Schedule {
        Schedule::new(200, 1e-4, 0.02, 1.0).unwrap()
    }

    fn elongated(n: usize) -> GaussianMixturePrior {
        let mut cov = Matrix::identity(n, n);
        cov[(0, 0)] = 4.0;
        GaussianMixturePrior::gaussian(Vector::zeros(n), cov).unwrap()
    }

    fn point(prior: &GaussianMixturePrior, s: &Schedule, x_t: Vector, t: usize) -> ReversePoint {
        let x0_hat = prior.predict(&Condition::Unconditional, &x_t, t, s).unwrap().x0_hat;
        ReversePoint { t, x_t, x0_hat }
    }

    #[test]
    fn top_pc_of_elongated_gaussian() {
        let prior = elongated(5);
        let s = schedule();
        // At small t the posterior covariance approaches s² I for any prior,
        // the eigengap closes, and only the eigenvalue is identifiable.
        for t in [10, 100, 150, 200] {
            let p = point(&prior, &s, Vector::from_fn(5, |i, _| 0.1 * i as f64), t);
            let params = PcParams { n_pcs: 1, ..Default::default() };
            let mut nfe = 0;
            let set = extract_pcs_at(&prior, Guidance::unconditional(), &s, &p, &params, 1, None, &mut nfe).unwrap();
            assert_eq!(nfe, 50);
            if t >= 100 {
                assert!(set.vectors[0][0].abs() >= 0.99, "{t}");
            }
            let s2 = s.equivalent_noise_std(t).unwrap().powi(2);
            let exact = 4.0 * s2 / (4.0 + s2);
            assert!((set.lambdas[0] - exact).abs() / exact < 0.05, "{t}: {} vs {exact}", set.lambdas[0]);
        }
    }

    #[test]
    fn full_spectrum_sums_to_trace() {
        let prior = elongated(4);
        let s = schedule();
        let t = 60;
        let p = point(&prior, &s, Vector::zeros(4), t);
        let params = PcParams { n_pcs: 4, ..Default::default() };
        let set = extract_pcs_at(&prior, Guidance::unconditional(), &s, &p, &params, 2, None, &mut 0).unwrap();
        let y = &p.x_t / s.alpha_bar(t).sqrt();
        let trace = prior.posterior_cov(&y, s.equivalent_noise_std(t).unwrap()).unwrap().trace();
        let sum: f64 = set.lambdas.iter().sum();
        assert!((sum - trace).abs() / trace < 0.05);
        for (i, a) in set.vectors.iter().enumerate() {
            assert!((a.norm() - 1.0).abs() < 1e-10);
            for b in &set.vectors[i + 1..] {
                assert!(a.dot(b).abs() < 1e-8);
            }
        }
        assert!(set.lambdas.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn mask_confines_pcs() {
        let prior = standard_test_prior(6);
        let s = schedule();
        let p = point(&prior, &s, Vector::from_element(6, 0.2), 40);
        let params = PcParams { n_pcs: 2, mask: Some(vec![1, 3, 4]), ..Default::default() };
        let set = extract_pcs_at(&prior, Guidance::unconditional(), &s, &p, &params, 3, None, &mut 0).unwrap();
        for v in &set.vectors {
            for i in [0, 2, 5] {
                assert_eq!(v[i], 0.0);
            }
        }
        let too_many = PcParams { n_pcs: 4, mask: Some(vec![1, 3, 4]), ..Default::default() };
        assert!(too_many.validate(6).is_err());
    }

    #[test]
    fn constant_denoiser_is_rank_deficient() {
        struct Flat;
        impl Denoiser for Flat {
            fn dim(&self) -> usize {
                3
            }
            fn predict(&self, _c: &Condition, x_t: &Vector, t: usize, s: &Schedule) -> Result<EpsPrediction> {
                Ok(EpsPrediction::from_x0(x_t, Vector::zeros(3), s.alpha_bar(t)))
            }
        }
        let s = schedule();
        let p = ReversePoint { t: 20, x_t: Vector::zeros(3), x0_hat: Vector::zeros(3) };
        let err = extract_pcs_at(&Flat, Guidance::unconditional(), &s, &p, &PcParams::default(), 0, None, &mut 0);
        assert!(matches!(err, Err(Error::RankDeficient { t: 20, column: 0 })));
    }

    #[test]
    fn bundle_sign_continuity() {
        let prior = standard_test_prior(4);
        let s = schedule();
        let x0 = Vector::from_vec(vec![1.5, 0.5, 0.1, -0.2]);
        let inv = ddpm_invert_full(&prior, &x0, Guidance::unconditional(), &s, 30, 4).unwrap();
        let points = points_from_inversion(&inv, 20, 30).unwrap();
        let params = PcParams { n_pcs: 2, iters: 20, ..Default::default() };
        let mut nfe = 0;
        let bundle = extract_pcs(&prior, Guidance::unconditional(), &s, &points, &params, 8, &mut nfe).unwrap();
        assert_eq!(nfe, 11 * 2 * 20);
        assert_eq!(bundle.timesteps(), (20..=30).rev().collect::<Vec<_>>());
        for w in bundle.sets.windows(2) {
            for i in 0..2 {
                assert!(w[1].vectors[i].dot(&w[0].vectors[i]) >= params.rho);
            }
        }
    }

    #[test]
    fn replayed_points_match_inversion_states() {
        let prior = standard_test_prior(3);
        let s = schedule();
        let x0 = Vector::from_vec(vec![0.4, -0.1, 0.3]);
        let inv = ddpm_invert_full(&prior, &x0, Guidance::unconditional(), &s, 25, 1).unwrap();
        let mut nfe = 0;
        let replayed = replay_points(&prior, &inv.trajectory, &s, 10, &mut nfe).unwrap();
        assert_eq!(nfe, 16);
        let cached = points_from_inversion(&inv, 10, 25).unwrap();
        for (a, b) in replayed.iter().zip(&cached) {
            assert_eq!(a.t, b.t);
            assert!((&a.x_t - &b.x_t).amax() < 1e-10);
            assert!((&a.x0_hat - &b.x0_hat).amax() < 1e-10);
        }
    }

    fn toy_bundle(lambdas: &[f64]) -> PcBundle {
        PcBundle {
            params: PcParams { n_pcs: lambdas.len(), ..Default::default() },
            schedule_id: 0,
            cond: Condition::Unconditional,
            guidance: 1.0,
            seed: 0,
            sets: (5..=7)
                .rev()
                .map(|t| PcSet {
                    t,
                    vectors: (0..lambdas.len()).map(|i| Vector::from_fn(3, |r, _| if r == i { 1.0 } else { 0.0 })).collect(),
                    lambdas: lambdas.iter().map(|l| l * t as f64).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn lambda_averaging() {
        let a = toy_bundle(&[3.0, 1.0]);
        let b = toy_bundle(&[9.0, 3.0]);
        assert_eq!(average_lambda(&[a.clone()]).unwrap(), LambdaProfile::from_bundle(&a));
        let avg = average_lambda(&[a.clone(), b]).unwrap();
        assert_eq!(avg.lambda(0, 6), Some(36.0));
        assert_eq!(avg.lambda(1, 5), Some(10.0));
        assert!(average_lambda(&[a, toy_bundle(&[1.0])]).is_err());
        assert!(average_lambda(&[]).is_err());
    }

    #[test]
    fn perturbation_term_definition() {
        let s = schedule();
        let bundle = toy_bundle(&[4.0]);
        let mut plan = EditPlan::new(Method::Zeus, 6);
        plan.t_end = 6;
        plan.t_prime = Some(TPrime::PerStep);
        plan.pc_selector = vec![(0, 1.0)];
        plan.gamma = 2.0;
        let p = Perturbation::new(&bundle, None, &plan).unwrap();
        let term = p.term(6, &s).unwrap().unwrap();
        let expected = 2.0 * s.drift_coefficient(6).unwrap() * sqrt(24.0);
        assert!((term[0] - expected).abs() < 1e-14);
        assert_eq!(p.term(5, &s).unwrap(), None);
        plan.gamma = 0.0;
        assert_eq!(Perturbation::new(&bundle, None, &plan).unwrap().term(6, &s).unwrap(), None);

        plan.t_prime = Some(TPrime::Fixed(7));
        assert!(matches!(Perturbation::new(&bundle, None, &plan), Err(Error::MissingLambda { .. })));
        let profile = LambdaProfile::from_bundle(&bundle);
        assert!(Perturbation::new(&bundle, Some(&profile), &plan).is_ok());
        plan.t_prime = Some(TPrime::Fixed(9));
        assert!(matches!(Perturbation::new(&bundle, Some(&profile), &plan), Err(Error::MissingPcs(9))));
    }

    #[test]
    fn eps_route_equals_mean_shift() {
        let prior = standard_test_prior(3);
        let s = schedule();
        let d = Vector::from_vec(vec![0.3, -0.2, 0.9]);
        let x_t = Vector::from_vec(vec![0.5, 0.1, -1.0]);
        for t in [1, 2, 50, 200] {
            let pred = prior.predict(&Condition::Unconditional, &x_t, t, &s).unwrap();
            let plain = reverse_mean(&s, t, &pred).unwrap();
            let via_eps = eps_route_mean(&s, t, &x_t, &pred, 1.7, &d).unwrap();
            let via_mu = &plain + &d * (1.7 * s.drift_coefficient(t).unwrap());
            assert!((via_eps - via_mu).amax() < 1e-10);
            let asym = asymmetric_mean(&s, t, &pred, 1.7, &d).unwrap() - &plain;
            let sym = &d * (1.7 * s.drift_coefficient(t).unwrap());
            let ratio = asymmetric_shift_ratio(&s, t).unwrap();
            assert!((asym * ratio - sym).amax() < 1e-12);
        }
    }

    #[test]
    fn shift_ratio_limits() {
        // σ_t² = 1 - ᾱ_{t-1} happens at t = 1.
        let s = schedule();
        assert!((asymmetric_shift_ratio(&s, 1).unwrap() - 1.0).abs() < 1e-15);
        let ab_prev = s.alpha_bar(149);
        let ab = s.alpha_bar(150);
        let sigma = s.sigma(150);
        let c = ab_prev.sqrt() - ab.sqrt() * (1.0 - ab_prev - sigma * sigma).sqrt() / (1.0 - ab).sqrt();
        assert!((asymmetric_shift_ratio(&s, 150).unwrap() - c / ab_prev.sqrt()).abs() < 1e-12);
        assert!(crate::schedule::drift_coefficient_from(0.5, 0.5, 0.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn entropy_cases() {
        let uniform = Vector::from_element(12, -0.5);
        assert!((pc_entropy(&uniform, 3).unwrap() - 4f64.ln()).abs() < 1e-14);
        let mut one = Vector::zeros(12);
        one[4] = 2.0;
        one[5] = -1.0;
        assert_eq!(pc_entropy(&one, 3).unwrap(), 0.0);
        assert!(pc_entropy(&Vector::zeros(6), 3).is_err());
        assert!(pc_entropy(&uniform, 5).is_err());
    }
}
