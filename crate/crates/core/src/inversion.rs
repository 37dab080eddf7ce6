//! Noise-space inversion: edit-friendly DDPM inversion, plus the DDIM
//! inversion and SDEdit noising baselines.

use alloc::vec::Vec;

use libm::sqrt;

use crate::denoiser::{Condition, Denoiser, Guidance};
use crate::error::{invalid, Error, Result};
use crate::rng::{self, standard_normal};
use crate::sampler::reverse_mean;
use crate::schedule::Schedule;
use crate::Vector;

/// The editable representation of a signal: the starting state and the
/// per-step noises that make the DDPM sampler reproduce it.
///
/// `z[0]` belongs to `t = t_start`, `z[t_start - 2]` to `t = 2`. A step
/// whose σ_t is exactly zero stores the raw difference `x_{t-1} - μ_t`
/// instead of a normalized noise; the schedule, pinned by `schedule_id`,
/// tells the two apart. The final step always stores its residual.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTrajectory {
    pub t_start: usize,
    pub x_start: Vector,
    pub z: Vec<Vector>,
    pub residual: Vector,
    pub cond_src: Condition,
    pub guidance_src: f64,
    pub schedule_id: u64,
    pub seed: u64,
}

impl NoiseTrajectory {
    pub fn dim(&self) -> usize {
        self.x_start.len()
    }

    /// Stored noise for step `t` (`2 <= t <= t_start`).
    pub fn noise(&self, t: usize) -> &Vector {
        &self.z[self.t_start - t]
    }

    pub fn guidance(&self) -> Guidance<'_> {
        Guidance::new(&self.cond_src, self.guidance_src)
    }

    pub fn check_schedule(&self, schedule: &Schedule) -> Result<()> {
        if self.schedule_id != schedule.id() {
            return Err(Error::ScheduleMismatch { expected: self.schedule_id, got: schedule.id() });
        }
        schedule.check_timestep(self.t_start)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_start == 0 {
            return Err(invalid("trajectory must start at t >= 1"));
        }
        if self.z.len() != self.t_start - 1 {
            return Err(invalid("trajectory must hold t_start - 1 noise vectors"));
        }
        let n = self.dim();
        for v in self.z.iter().chain([&self.residual]) {
            if v.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: v.len() });
            }
        }
        let finite = |v: &Vector| v.iter().all(|x| x.is_finite());
        if !finite(&self.x_start) || !finite(&self.residual) || !self.z.iter().all(finite) {
            return Err(invalid("trajectory contains non-finite values"));
        }
        Ok(())
    }
}

/// Everything an inversion pass computes. `states[t]` is the auxiliary
/// `x_t` (with `states[0] = x_0`) and `denoised[t]` the guided `x̂_{0|t}`
/// evaluated on it (`denoised[0] = x_0`). Replaying the trajectory with the
/// source guidance revisits exactly these states, so PC extraction and
/// masking can reuse them.
#[derive(Debug, Clone)]
pub struct Inversion {
    pub trajectory: NoiseTrajectory,
    pub states: Vec<Vector>,
    pub denoised: Vec<Vector>,
    pub nfe: u64,
}

impl Inversion {
    /// The trajectory restarted at an earlier timestep.
    pub fn trajectory_from(&self, t_start: usize) -> Result<NoiseTrajectory> {
        let full = &self.trajectory;
        if t_start == 0 || t_start > full.t_start {
            return Err(Error::TimestepOutOfRange { t: t_start, max: full.t_start });
        }
        Ok(NoiseTrajectory {
            t_start,
            x_start: self.states[t_start].clone(),
            z: full.z[full.t_start - t_start..].to_vec(),
            ..full.clone()
        })
    }
}

fn check_signal(x0: &Vector, dim: usize) -> Result<()> {
    if x0.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: x0.len() });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(invalid("signal must be finite"));
    }
    Ok(())
}

/// Edit-friendly DDPM inversion keeping all intermediate states.
pub fn ddpm_invert_full<D: Denoiser + ?Sized>(
    denoiser: &D,
    x0: &Vector,
    guidance: Guidance<'_>,
    schedule: &Schedule,
    t_start: usize,
    seed: u64,
) -> Result<Inversion> {
    schedule.check_timestep(t_start)?;
    check_signal(x0, denoiser.dim())?;

    // Independent noising of x0 at every timestep. No step depends on another.
    let mut states = Vec::with_capacity(t_start + 1);
    states.push(x0.clone());
    for t in 1..=t_start {
        let ab = schedule.alpha_bar(t);
        let eps = standard_normal(&mut rng::stream(seed, rng::INVERSION, &[t as u64]), x0.len());
        states.push(x0 * sqrt(ab) + eps * sqrt(1.0 - ab));
    }

    // Noise extraction. Each step reads only precomputed states.
    let mut nfe = 0;
    let mut denoised = alloc::vec![Vector::zeros(0); t_start + 1];
    denoised[0] = x0.clone();
    let mut z = Vec::with_capacity(t_start.saturating_sub(1));
    let mut residual = Vector::zeros(x0.len());
    for t in (1..=t_start).rev() {
        let pred = guidance.predict(denoiser, &states[t], t, schedule, &mut nfe)?;
        let diff = &states[t - 1] - reverse_mean(schedule, t, &pred)?;
        if diff.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t });
        }
        let sigma = schedule.sigma(t);
        if t == 1 {
            residual = diff;
        } else if sigma > 0.0 {
            z.push(diff / sigma);
        } else {
            z.push(diff);
        }
        denoised[t] = pred.x0_hat;
    }

    let trajectory = NoiseTrajectory {
        t_start,
        x_start: states[t_start].clone(),
        z,
        residual,
        cond_src: guidance.cond.clone(),
        guidance_src: guidance.scale,
        schedule_id: schedule.id(),
        seed,
    };
    Ok(Inversion { trajectory, states, denoised, nfe })
}

pub fn ddpm_invert<D: Denoiser + ?Sized>(
    denoiser: &D,
    x0: &Vector,
    guidance: Guidance<'_>,
    schedule: &Schedule,
    t_start: usize,
    seed: u64,
) -> Result<NoiseTrajectory> {
    ddpm_invert_full(denoiser, x0, guidance, schedule, t_start, seed).map(|inv| inv.trajectory)
}

/// Deterministic DDIM inversion from `x_0` up to `x_{t_stop}`.
///
/// Each step evaluates the denoiser at the current state with the next
/// timestep's noise level, so the result only approximately inverts
/// [`crate::sampler::ddim_reverse`].
pub fn ddim_invert<D: Denoiser + ?Sized>(
    denoiser: &D,
    x0: &Vector,
    guidance: Guidance<'_>,
    schedule: &Schedule,
    t_stop: usize,
    nfe: &mut u64,
) -> Result<Vector> {
    schedule.check_timestep(t_stop)?;
    check_signal(x0, denoiser.dim())?;
    let mut x = x0.clone();
    for t in 0..t_stop {
        let eps = guidance.predict(denoiser, &x, t + 1, schedule, nfe)?.eps_hat;
        let ab = schedule.alpha_bar(t);
        let x0_hat = (&x - &eps * sqrt(1.0 - ab)) / sqrt(ab);
        let next = schedule.alpha_bar(t + 1);
        x = x0_hat * sqrt(next) + eps * sqrt(1.0 - next);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t: t + 1 });
        }
    }
    Ok(x)
}

/// SDEdit starting point: `sqrt(ᾱ) x0 + sqrt(1-ᾱ) ε` at `t_start`.
pub fn sdedit_noise(x0: &Vector, schedule: &Schedule, t_start: usize, seed: u64) -> Result<Vector> {
    schedule.check_timestep(t_start)?;
    let ab = schedule.alpha_bar(t_start);
    let eps = standard_normal(&mut rng::stream(seed, rng::SDEDIT, &[t_start as u64]), x0.len());
    Ok(x0 * sqrt(ab) + eps * sqrt(1.0 - ab))
}
