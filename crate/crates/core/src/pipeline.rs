//! End-to-end editing: invert, optionally extract PCs, regenerate.

use alloc::vec::Vec;

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::inversion::{ddim_invert, ddpm_invert_full, sdedit_noise, NoiseTrajectory};
use crate::sampler::{
    ddim_reverse, ddpm_reverse, Blend, EditPlan, Mask, Method, NoiseSource, ReverseOptions, StepPerturbation,
    StepRecord, TPrime,
};
use crate::schedule::Schedule;
use crate::zeus::{extract_pcs, points_from_inversion, LambdaProfile, PcBundle, PcParams, Perturbation};
use crate::Vector;

/// PC extraction settings for ZEUS plans. Fixed-`t'` plans also need the
/// dataset-averaged eigenvalue profile.
#[derive(Debug, Clone, Default)]
pub struct ZeusSettings<'a> {
    pub params: PcParams,
    pub profile: Option<&'a LambdaProfile>,
}

/// Where the denoiser evaluations of one edit went.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NfeBreakdown {
    pub inversion: u64,
    pub pcs: u64,
    pub generation: u64,
    pub source_replay: u64,
}

impl NfeBreakdown {
    pub fn total(&self) -> u64 {
        self.inversion + self.pcs + self.generation + self.source_replay
    }
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    pub output: Vector,
    pub nfe: NfeBreakdown,
    pub trace: Vec<StepRecord>,
    /// Final state of the masked source replay, when a mask was used.
    pub source_replay: Option<Vector>,
    pub trajectory: Option<NoiseTrajectory>,
    pub bundle: Option<PcBundle>,
}

/// Run one plan on a source signal.
pub fn run_edit<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &Schedule,
    x0: &Vector,
    plan: &EditPlan,
    zeus: &ZeusSettings<'_>,
    record_trace: bool,
) -> Result<EditOutcome> {
    plan.validate(schedule)?;
    let dim = denoiser.dim();
    if x0.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: x0.len() });
    }
    let mask = plan.mask.as_deref().map(|m| Mask::new(m, dim)).transpose()?;
    let blend = mask.as_ref().map(|mask| Blend { mask, delta: plan.delta });
    let src = plan.source_guidance();
    let gen = plan.generation_guidance();
    let ts = plan.t_start;
    let mut nfe = NfeBreakdown::default();

    match plan.method {
        Method::Sdedit => {
            let start = sdedit_noise(x0, schedule, ts, plan.seed)?;
            let opts = ReverseOptions { record_trace, ..Default::default() };
            let out = ddpm_reverse(denoiser, &start, NoiseSource::Seeded(plan.seed), gen, schedule, ts, &opts)?;
            nfe.generation = out.nfe;
            Ok(EditOutcome { output: out.x0, nfe, trace: out.trace, source_replay: None, trajectory: None, bundle: None })
        }
        Method::Ddim | Method::DdimPartial => {
            let start = ddim_invert(denoiser, x0, src, schedule, ts, &mut nfe.inversion)?;
            let output = ddim_reverse(denoiser, &start, gen, schedule, ts, &mut nfe.generation)?;
            Ok(EditOutcome { output, nfe, trace: Vec::new(), source_replay: None, trajectory: None, bundle: None })
        }
        Method::DdpmReplay | Method::Zeta | Method::Zeus => {
            let depth = match plan.t_prime {
                Some(TPrime::Fixed(tp)) if plan.method == Method::Zeus => ts.max(tp),
                _ => ts,
            };
            let inv = ddpm_invert_full(denoiser, x0, src, schedule, depth, plan.seed)?;
            nfe.inversion = inv.nfe;
            let trajectory = inv.trajectory_from(ts)?;

            let bundle = if plan.method == Method::Zeus {
                let (lo, hi) = match plan.t_prime {
                    Some(TPrime::Fixed(tp)) => (tp, tp),
                    _ => (plan.t_end, ts),
                };
                let mut params = zeus.params.clone();
                if params.mask.is_none() {
                    params.mask = plan.mask.clone();
                }
                let points = points_from_inversion(&inv, lo, hi)?;
                Some(extract_pcs(denoiser, src, schedule, &points, &params, plan.seed, &mut nfe.pcs)?)
            } else {
                None
            };
            let perturbation = match &bundle {
                Some(b) => Some(Perturbation::new(b, zeus.profile, plan)?),
                None => None,
            };
            let opts = ReverseOptions {
                perturbation: perturbation.as_ref().map(|p| p as &dyn StepPerturbation),
                blend,
                record_trace,
            };
            let out = ddpm_reverse(denoiser, &trajectory.x_start, NoiseSource::Trajectory(&trajectory), gen, schedule, ts, &opts)?;
            if blend.is_some() {
                nfe.source_replay = trajectory.guidance().evals_per_step() * ts as u64;
            }
            nfe.generation = out.nfe - nfe.source_replay;
            Ok(EditOutcome {
                output: out.x0,
                nfe,
                trace: out.trace,
                source_replay: out.source,
                trajectory: Some(trajectory),
                bundle,
            })
        }
    }
}
