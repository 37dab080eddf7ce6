//! Run configuration. Unknown keys anywhere are rejected, and every path is
//! resolved against the directory holding the config file.
//!
//! ```toml
//! seed = 7
//! prior = "prior.toml"
//! output_dir = "out"
//! signal = "signal.csv"     # optional; one signal per line
//! signal_row = 0
//!
//! [schedule]
//! steps = 200
//! beta_min = 1e-4
//! beta_max = 0.02
//! eta = 1.0
//!
//! [plan]
//! method = "zeus"
//! cond_src = [1.0, 0.0]     # omit for unconditional
//! t_start = 100
//! t_end = 1
//! t_prime = 80              # or "per-step"
//! gamma = 2.0
//! pcs = "1:1.0"
//! mask = [0, 1]
//! delta = 0.025
//! trace = true
//!
//! [zeus]
//! n_pcs = 3
//! iters = 50
//! probe_c = 1e-3
//! rho = -0.5
//! lambda_profile = "out/lambda.etk"
//! range = [1, 100]
//!
//! [eval]
//! feature_seed = 0
//! grid = [40, 80, 120, 160, 200]
//! methods = ["zeta", "sdedit"]
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use zedit_core::sampler::{parse_pc_selector, SdeditPrompt, DEFAULT_DELTA};
use zedit_core::schedule::ScheduleParams;
use zedit_core::zeus::PcParams;
use zedit_core::{Condition, EditPlan, Method, Schedule, TPrime};

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub prior: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub signal: Option<PathBuf>,
    #[serde(default)]
    pub signal_row: usize,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub plan: PlanSection,
    #[serde(default)]
    pub zeus: ZeusSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub eta: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let p = ScheduleParams::default();
        Self { steps: p.steps, beta_min: p.beta_min, beta_max: p.beta_max, eta: p.eta }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum TPrimeSpec {
    Fixed(usize),
    Named(String),
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSection {
    pub method: String,
    pub cond_src: Option<Vec<f64>>,
    pub cond_tgt: Option<Vec<f64>>,
    pub w_src: f64,
    pub w_tgt: f64,
    pub t_start: usize,
    pub t_end: usize,
    pub t_prime: Option<TPrimeSpec>,
    pub gamma: f64,
    pub pcs: Option<String>,
    pub mask: Option<Vec<usize>>,
    pub delta: f64,
    pub sdedit_prompt: String,
    pub trace: bool,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self {
            method: "ddpm-replay".into(),
            cond_src: None,
            cond_tgt: None,
            w_src: 1.0,
            w_tgt: 1.0,
            t_start: 100,
            t_end: 1,
            t_prime: None,
            gamma: 0.0,
            pcs: None,
            mask: None,
            delta: DEFAULT_DELTA,
            sdedit_prompt: "target".into(),
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ZeusSection {
    pub n_pcs: usize,
    pub iters: usize,
    pub probe_c: f64,
    pub rho: f64,
    pub lambda_profile: Option<PathBuf>,
    /// `[lo, hi]` timesteps for `pcs` and `lambda-avg`.
    pub range: Option<[usize; 2]>,
}

impl Default for ZeusSection {
    fn default() -> Self {
        let p = PcParams::default();
        Self { n_pcs: p.n_pcs, iters: p.iters, probe_c: p.probe_c, rho: p.rho, lambda_profile: None, range: None }
    }
}

#[derive(Debug, Clone, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub feature_seed: u64,
    pub layers: usize,
    pub width: usize,
    pub t0_std: f64,
    pub reference_prior: Option<PathBuf>,
    pub reference_size: usize,
    pub n_sources: usize,
    pub grid: Vec<usize>,
    pub methods: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            feature_seed: 0,
            layers: zedit_core::eval::DEFAULT_LAYERS,
            width: zedit_core::eval::DEFAULT_WIDTH,
            t0_std: 0.1,
            reference_prior: None,
            reference_size: 512,
            n_sources: 32,
            grid: vec![40, 80, 120, 160, 200],
            methods: vec!["zeta".into(), "sdedit".into()],
        }
    }
}

fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn condition(weights: &Option<Vec<f64>>, key: &str) -> Result<Condition, CliError> {
    match weights {
        None => Ok(Condition::Unconditional),
        Some(w) => Condition::weights(w.clone()).map_err(|e| config(format!("plan.{key}: {e}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| config(e.message().to_string()))?;
        cfg.resolve(base);
        Ok(cfg)
    }

    /// Parse the file and check that every referenced input exists.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let cfg = Self::parse(&text, base)?;
        cfg.check_inputs()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.prior);
        join(&mut self.output_dir);
        for p in [&mut self.signal, &mut self.zeus.lambda_profile, &mut self.eval.reference_prior].into_iter().flatten() {
            join(p);
        }
    }

    pub fn check_inputs(&self) -> Result<(), CliError> {
        let mut inputs = vec![("prior", &self.prior)];
        if let Some(p) = &self.signal {
            inputs.push(("signal", p));
        }
        if let Some(p) = &self.eval.reference_prior {
            inputs.push(("eval.reference_prior", p));
        }
        for (key, path) in inputs {
            if !path.is_file() {
                return Err(config(format!("{key}: file {} does not exist", path.display())));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule, CliError> {
        let s = &self.schedule;
        Schedule::from_params(ScheduleParams { steps: s.steps, beta_min: s.beta_min, beta_max: s.beta_max, eta: s.eta })
            .map_err(|e| config(format!("schedule: {e}")))
    }

    pub fn method(&self) -> Result<Method, CliError> {
        self.plan.method.parse().map_err(|e| config(format!("plan.method: {e}")))
    }

    pub fn plan(&self) -> Result<EditPlan, CliError> {
        let p = &self.plan;
        let mut plan = EditPlan::new(self.method()?, p.t_start);
        plan.cond_src = condition(&p.cond_src, "cond_src")?;
        plan.cond_tgt = condition(&p.cond_tgt, "cond_tgt")?;
        plan.w_src = p.w_src;
        plan.w_tgt = p.w_tgt;
        plan.t_end = p.t_end;
        plan.t_prime = match &p.t_prime {
            None => None,
            Some(TPrimeSpec::Fixed(t)) => Some(TPrime::Fixed(*t)),
            Some(TPrimeSpec::Named(s)) if s == "per-step" => Some(TPrime::PerStep),
            Some(TPrimeSpec::Named(s)) => return Err(config(format!("plan.t_prime: expected a timestep or \"per-step\", got `{s}`"))),
        };
        plan.gamma = p.gamma;
        if let Some(pcs) = &p.pcs {
            plan.pc_selector = parse_pc_selector(pcs).map_err(|e| config(format!("plan.pcs: {e}")))?;
        }
        plan.mask = p.mask.clone();
        plan.delta = p.delta;
        plan.seed = self.seed;
        plan.sdedit_prompt = match p.sdedit_prompt.as_str() {
            "target" => SdeditPrompt::Target,
            "source" => SdeditPrompt::Source,
            other => return Err(config(format!("plan.sdedit_prompt: expected \"target\" or \"source\", got `{other}`"))),
        };
        Ok(plan)
    }

    pub fn pc_params(&self) -> PcParams {
        let z = &self.zeus;
        PcParams { n_pcs: z.n_pcs, iters: z.iters, probe_c: z.probe_c, rho: z.rho, mask: self.plan.mask.clone() }
    }
}
