//! Reverse diffusion in every mode the editors need: DDPM replay and
//! regeneration from stored noises, fresh-noise DDPM sampling, deterministic
//! DDIM sampling, masked blending, and the NFE bookkeeping that goes with
//! them.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use libm::sqrt;

use crate::denoiser::{Condition, Denoiser, EpsPrediction, Guidance};
use crate::error::{invalid, Error, Result};
use crate::inversion::NoiseTrajectory;
use crate::rng::{self, standard_normal};
use crate::schedule::Schedule;
use crate::Vector;

/// Blend factor toward the source trajectory outside an edit mask.
pub const DEFAULT_DELTA: f64 = 0.025;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    DdpmReplay,
    Zeta,
    Sdedit,
    Ddim,
    DdimPartial,
    Zeus,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::DdpmReplay, Method::Zeta, Method::Sdedit, Method::Ddim, Method::DdimPartial, Method::Zeus];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::DdpmReplay => "ddpm-replay",
            Method::Zeta => "zeta",
            Method::Sdedit => "sdedit",
            Method::Ddim => "ddim",
            Method::DdimPartial => "ddim-partial",
            Method::Zeus => "zeus",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid(alloc::format!("unknown method `{s}`")))
    }
}

/// Timestep the ZEUS directions come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TPrime {
    Fixed(usize),
    /// Each step uses the PCs computed at that same step.
    PerStep,
}

/// Which condition the SDEdit baseline regenerates with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SdeditPrompt {
    #[default]
    Target,
    Source,
}

/// Coordinate subset an edit is confined to.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    indices: Vec<usize>,
    inside: Vec<bool>,
}

impl Mask {
    pub fn new(indices: &[usize], dim: usize) -> Result<Self> {
        let mut inside = alloc::vec![false; dim];
        for &index in indices {
            if index >= dim {
                return Err(Error::MaskOutOfRange { index, dim });
            }
            inside[index] = true;
        }
        let indices = (0..dim).filter(|&i| inside[i]).collect();
        Ok(Self { indices, inside })
    }

    pub fn dim(&self) -> usize {
        self.inside.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn contains(&self, i: usize) -> bool {
        self.inside[i]
    }

    /// Zero every coordinate outside the mask.
    pub fn restrict(&self, v: &mut Vector) {
        for (x, inside) in v.iter_mut().zip(&self.inside) {
            if !inside {
                *x = 0.0;
            }
        }
    }
}

/// One edit run, described declaratively.
#[derive(Debug, Clone, PartialEq)]
pub struct EditPlan {
    pub method: Method,
    pub cond_src: Condition,
    pub cond_tgt: Condition,
    pub w_src: f64,
    pub w_tgt: f64,
    pub t_start: usize,
    pub t_end: usize,
    pub t_prime: Option<TPrime>,
    pub gamma: f64,
    /// `(pc index, coefficient)` pairs, indices zero-based.
    pub pc_selector: Vec<(usize, f64)>,
    pub mask: Option<Vec<usize>>,
    pub delta: f64,
    pub seed: u64,
    pub sdedit_prompt: SdeditPrompt,
}

impl EditPlan {
    pub fn new(method: Method, t_start: usize) -> Self {
        Self {
            method,
            cond_src: Condition::Unconditional,
            cond_tgt: Condition::Unconditional,
            w_src: 1.0,
            w_tgt: 1.0,
            t_start,
            t_end: 1,
            t_prime: None,
            gamma: 0.0,
            pc_selector: Vec::new(),
            mask: None,
            delta: DEFAULT_DELTA,
            seed: 0,
            sdedit_prompt: SdeditPrompt::Target,
        }
    }

    pub fn source_guidance(&self) -> Guidance<'_> {
        Guidance::new(&self.cond_src, self.w_src)
    }

    pub fn target_guidance(&self) -> Guidance<'_> {
        Guidance::new(&self.cond_tgt, self.w_tgt)
    }

    /// Guidance the generation pass runs with.
    pub fn generation_guidance(&self) -> Guidance<'_> {
        match self.method {
            Method::DdpmReplay | Method::Zeus => self.source_guidance(),
            Method::Sdedit if self.sdedit_prompt == SdeditPrompt::Source => self.source_guidance(),
            _ => self.target_guidance(),
        }
    }

    pub fn validate(&self, schedule: &Schedule) -> Result<()> {
        let steps = schedule.steps();
        if !(steps >= self.t_start && self.t_start >= self.t_end && self.t_end >= 1) {
            return Err(invalid("plan must satisfy T >= t_start >= t_end >= 1"));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(invalid("delta must lie in [0, 1]"));
        }
        if !self.gamma.is_finite() || !self.w_src.is_finite() || !self.w_tgt.is_finite() {
            return Err(invalid("gamma and guidance strengths must be finite"));
        }
        if self.method == Method::Ddim && self.t_start != steps {
            return Err(invalid("full DDIM inversion starts at t = T; use ddim-partial otherwise"));
        }
        if self.method == Method::Zeus {
            if self.pc_selector.is_empty() {
                return Err(invalid("zeus plans need at least one pc"));
            }
            match self.t_prime {
                None => return Err(invalid("zeus plans need t_prime")),
                Some(TPrime::Fixed(t)) => schedule.check_timestep(t)?,
                Some(TPrime::PerStep) => {}
            }
        }
        if self.mask.is_some() && matches!(self.method, Method::Sdedit | Method::Ddim | Method::DdimPartial) {
            return Err(invalid("masks need a source noise trajectory (ddpm-replay, zeta or zeus)"));
        }
        Ok(())
    }
}

/// Where the per-step noise of a DDPM pass comes from.
#[derive(Debug, Clone, Copy)]
pub enum NoiseSource<'a> {
    Trajectory(&'a NoiseTrajectory),
    Seeded(u64),
}

/// Additive term on μ_t at selected steps.
pub trait StepPerturbation {
    fn term(&self, t: usize, schedule: &Schedule) -> Result<Option<Vector>>;
}

#[derive(Debug, Clone, Copy)]
pub struct Blend<'a> {
    pub mask: &'a Mask,
    pub delta: f64,
}

#[derive(Default, Clone, Copy)]
pub struct ReverseOptions<'a> {
    pub perturbation: Option<&'a dyn StepPerturbation>,
    pub blend: Option<Blend<'a>>,
    pub record_trace: bool,
}

/// State of one reverse step. `x_t` enters the step, `x_prev` leaves it.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub x_t: Vector,
    pub x0_hat: Vector,
    pub x_prev: Vector,
    /// Matching state of the lockstep source replay, when blending.
    pub source_prev: Option<Vector>,
    pub nfe: u64,
}

#[derive(Debug, Clone)]
pub struct ReverseOutput {
    pub x0: Vector,
    pub nfe: u64,
    pub trace: Vec<StepRecord>,
    /// Final state of the source replay when blending was active.
    pub source: Option<Vector>,
}

/// μ_t = sqrt(ᾱ_{t-1}) x̂₀ + sqrt(1 - ᾱ_{t-1} - σ_t²) ε̂.
pub fn reverse_mean(schedule: &Schedule, t: usize, pred: &EpsPrediction) -> Result<Vector> {
    let d = schedule.direction_scale(t)?;
    Ok(&pred.x0_hat * sqrt(schedule.alpha_bar(t - 1)) + &pred.eps_hat * d)
}

/// `(1 - w) a + w b`, exact at `w = 0`, at `w = 1`, and when `a == b`.
fn lerp(a: f64, b: f64, w: f64) -> f64 {
    if w < 0.5 {
        a + w * (b - a)
    } else {
        b - (1.0 - w) * (b - a)
    }
}

/// Keep `x_next` inside the mask; outside, pull it toward the source state:
/// `delta x_orig + (1 - delta) x_next`.
pub fn masked_blend(x_next: &Vector, x_orig_next: &Vector, mask: &Mask, delta: f64) -> Result<Vector> {
    if x_next.len() != x_orig_next.len() {
        return Err(Error::DimensionMismatch { expected: x_next.len(), got: x_orig_next.len() });
    }
    if mask.dim() != x_next.len() {
        return Err(Error::DimensionMismatch { expected: x_next.len(), got: mask.dim() });
    }
    Ok(Vector::from_fn(x_next.len(), |i, _| {
        if mask.contains(i) {
            x_next[i]
        } else {
            lerp(x_next[i], x_orig_next[i], delta)
        }
    }))
}

fn step_noise(source: NoiseSource<'_>, schedule: &Schedule, t: usize, dim: usize) -> Vector {
    let sigma = schedule.sigma(t);
    match source {
        NoiseSource::Trajectory(tr) if t == 1 => tr.residual.clone(),
        NoiseSource::Trajectory(tr) if sigma > 0.0 => tr.noise(t) * sigma,
        NoiseSource::Trajectory(tr) => tr.noise(t).clone(),
        NoiseSource::Seeded(_) if sigma == 0.0 => Vector::zeros(dim),
        NoiseSource::Seeded(seed) => {
            standard_normal(&mut rng::stream(seed, rng::SAMPLING, &[t as u64]), dim) * sigma
        }
    }
}

/// DDPM reverse pass `x_{t-1} = μ_t(x_t) [+ perturbation] + σ_t z_t` from
/// `t_start` down to 1.
///
/// With a blend, a source replay under the trajectory's own guidance runs in
/// lockstep and supplies the states the edit is pulled toward; its
/// evaluations are included in the returned count.
pub fn ddpm_reverse<D: Denoiser + ?Sized>(
    denoiser: &D,
    start: &Vector,
    noise: NoiseSource<'_>,
    guidance: Guidance<'_>,
    schedule: &Schedule,
    t_start: usize,
    options: &ReverseOptions<'_>,
) -> Result<ReverseOutput> {
    schedule.check_timestep(t_start)?;
    let dim = denoiser.dim();
    if start.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: start.len() });
    }
    let trajectory = match noise {
        NoiseSource::Trajectory(tr) => {
            tr.check_schedule(schedule)?;
            if tr.t_start < t_start {
                return Err(invalid("trajectory does not reach t_start"));
            }
            if tr.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: tr.dim() });
            }
            Some(tr)
        }
        NoiseSource::Seeded(_) => None,
    };
    let mut source_state = match (options.blend, trajectory) {
        (Some(_), Some(_)) => Some(start.clone()),
        (Some(_), None) => return Err(invalid("masked blending needs a noise trajectory")),
        (None, _) => None,
    };

    let mut nfe = 0;
    let mut trace = Vec::new();
    let mut x = start.clone();
    for t in (1..=t_start).rev() {
        let pred = guidance.predict(denoiser, &x, t, schedule, &mut nfe)?;
        let mut mean = reverse_mean(schedule, t, &pred)?;
        if let Some(p) = options.perturbation {
            if let Some(term) = p.term(t, schedule)? {
                if term.iter().any(|v| *v != 0.0) {
                    mean += term;
                }
            }
        }
        let z = step_noise(noise, schedule, t, dim);
        let mut next = mean + &z;

        if let (Some(blend), Some(src), Some(tr)) = (options.blend, source_state.as_mut(), trajectory) {
            let src_pred = tr.guidance().predict(denoiser, src, t, schedule, &mut nfe)?;
            let src_next = reverse_mean(schedule, t, &src_pred)? + &z;
            next = masked_blend(&next, &src_next, blend.mask, blend.delta)?;
            *src = src_next;
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t });
        }
        if options.record_trace {
            trace.push(StepRecord {
                t,
                x_t: x.clone(),
                x0_hat: pred.x0_hat,
                x_prev: next.clone(),
                source_prev: source_state.clone(),
                nfe,
            });
        }
        x = next;
    }
    Ok(ReverseOutput { x0: x, nfe, trace, source: source_state })
}

/// Deterministic DDIM sampling from `x_{t_start}`. σ never enters.
pub fn ddim_reverse<D: Denoiser + ?Sized>(
    denoiser: &D,
    start: &Vector,
    guidance: Guidance<'_>,
    schedule: &Schedule,
    t_start: usize,
    nfe: &mut u64,
) -> Result<Vector> {
    schedule.check_timestep(t_start)?;
    if start.len() != denoiser.dim() {
        return Err(Error::DimensionMismatch { expected: denoiser.dim(), got: start.len() });
    }
    let mut x = start.clone();
    for t in (1..=t_start).rev() {
        let pred = guidance.predict(denoiser, &x, t, schedule, nfe)?;
        let prev = schedule.alpha_bar(t - 1);
        x = pred.x0_hat * sqrt(prev) + pred.eps_hat * sqrt(1.0 - prev);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t });
        }
    }
    Ok(x)
}

/// Number of denoiser evaluations a plan costs end to end.
///
/// A guided step costs 2 evaluations and an unconditional one 1. Inversion
/// runs from 0 to `t_start` with the source condition and generation from
/// `t_start` to 0:
///
/// - `ddpm-replay`: `(1+S) t_start` twice.
/// - `zeta`, `ddim`, `ddim-partial`: `(1+S) t_start + (1+G) t_start`, which
///   is `(3+S) t_start` under a target condition.
/// - `sdedit`: `(1+G) t_start`, no inversion.
/// - `zeus`: PCs are probed on the inversion's own states, so the only extra
///   cost is `n_pcs * iters` probes per extraction timestep. With a fixed
///   `t'` that is `(1+S)(max(t', t_start) + t_start + N K)`; per-step mode
///   extracts at every step of `[t_end, t_start]`, giving
///   `(1+S)(2 t_start + N K (t_start - t_end + 1))`.
///
/// A mask adds the lockstep source replay, `(1+S) t_start`.
pub fn predict_nfe(plan: &EditPlan, iters: usize, n_pcs: usize) -> u64 {
    let per = |c: &Condition| if c.is_conditional() { 2u64 } else { 1 };
    let src = per(&plan.cond_src);
    let ts = plan.t_start as u64;
    let gen = per(plan.generation_guidance().cond) * ts;
    let probes = (iters * n_pcs) as u64;
    let base = match plan.method {
        Method::DdpmReplay | Method::Zeta | Method::Ddim | Method::DdimPartial => src * ts + gen,
        Method::Sdedit => gen,
        Method::Zeus => match plan.t_prime {
            Some(TPrime::Fixed(tp)) => src * ((tp as u64).max(ts) + ts + probes),
            Some(TPrime::PerStep) | None => {
                let steps = (plan.t_start + 1).saturating_sub(plan.t_end) as u64;
                src * (2 * ts + probes * steps)
            }
        },
    };
    let mask = if plan.mask.is_some() { src * ts } else { 0 };
    base + mask
}

/// Parse `"1:1.0,3:-0.5"` (one-based pc indices) into zero-based pairs.
pub fn parse_pc_selector(text: &str) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (index, coeff) = item
            .split_once(':')
            .ok_or_else(|| invalid(alloc::format!("pc entry `{item}` is not index:coefficient")))?;
        let index: usize = index.trim().parse().map_err(|_| invalid(alloc::format!("bad pc index in `{item}`")))?;
        let coeff: f64 = coeff.trim().parse().map_err(|_| invalid(alloc::format!("bad coefficient in `{item}`")))?;
        if index == 0 {
            return Err(invalid("pc indices start at 1"));
        }
        out.push((index - 1, coeff));
    }
    if out.is_empty() {
        return Err(Error::Empty("pc selector"));
    }
    Ok(out)
}

pub fn format_pc_selector(selector: &[(usize, f64)]) -> String {
    let parts: Vec<String> = selector.iter().map(|(i, c)| alloc::format!("{}:{}", i + 1, c)).collect();
    parts.join(",")
}
