//! One function per subcommand. Each writes its artifacts under the
//! configured output directory and returns the report printed to stdout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use zedit_core::eval::{sample_prior, tradeoff_curve, CurveSettings, FeatureExtractor, CURVE_HEADER};
use zedit_core::inversion::ddpm_invert_full;
use zedit_core::oracle::verify_suite;
use zedit_core::pipeline::{run_edit, ZeusSettings};
use zedit_core::rng::derive_seed;
use zedit_core::sampler::{ddpm_reverse, predict_nfe, NoiseSource, ReverseOptions, StepRecord};
use zedit_core::zeus::{average_lambda, extract_pcs, points_from_inversion};
use zedit_core::{EditPlan, GaussianMixturePrior, LambdaProfile, Method, PcBundle, Schedule, Vector};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::etk1;
use crate::prior_file::load_prior;

pub const TRAJECTORY_FILE: &str = "trajectory.etk";
pub const EDITED_FILE: &str = "edited.etk";
pub const TRACE_FILE: &str = "trace.csv";
pub const PCS_FILE: &str = "pcs.etk";
pub const LAMBDA_FILE: &str = "lambda.etk";
pub const CURVE_FILE: &str = "curve.csv";

fn output_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::io(&cfg.output_dir, e))?;
    Ok(&cfg.output_dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Signals from a CSV file, one per line; `#` starts a comment line.
pub fn read_signals(path: &Path) -> Result<Vec<Vector>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(Vector::from_vec(values));
    }
    Ok(out)
}

struct Context {
    prior: GaussianMixturePrior,
    schedule: Schedule,
    plan: EditPlan,
}

fn context(cfg: &RunConfig) -> Result<Context, CliError> {
    let prior = load_prior(&cfg.prior)?;
    let schedule = cfg.schedule()?;
    let plan = cfg.plan()?;
    plan.validate(&schedule)?;
    Ok(Context { prior, schedule, plan })
}

/// The configured source signal, or a prior draw when none is given.
fn source_signal(cfg: &RunConfig, prior: &GaussianMixturePrior) -> Result<Vector, CliError> {
    let x = match &cfg.signal {
        Some(path) => read_signals(path)?
            .into_iter()
            .nth(cfg.signal_row)
            .ok_or_else(|| CliError::Config(format!("signal_row {} not present in {}", cfg.signal_row, path.display())))?,
        None => sample_prior(prior, cfg.signal_row + 1, derive_seed(cfg.seed, "signal", 0))?.pop().unwrap(),
    };
    if x.len() != prior.dim() {
        return Err(CliError::Config(format!("signal has dimension {}, prior has {}", x.len(), prior.dim())));
    }
    Ok(x)
}

fn pc_range(cfg: &RunConfig, plan: &EditPlan) -> (usize, usize) {
    match cfg.zeus.range {
        Some([lo, hi]) => (lo, hi),
        None => (plan.t_end, plan.t_start),
    }
}

pub fn cmd_invert(cfg: &RunConfig) -> Result<String, CliError> {
    let Context { prior, schedule, plan } = context(cfg)?;
    let x0 = source_signal(cfg, &prior)?;
    let inv = ddpm_invert_full(&prior, &x0, plan.source_guidance(), &schedule, plan.t_start, plan.seed)?;
    let tr = &inv.trajectory;
    let replay = ddpm_reverse(&prior, &tr.x_start, NoiseSource::Trajectory(tr), tr.guidance(), &schedule, tr.t_start, &ReverseOptions::default())?;
    let path = output_dir(cfg)?.join(TRAJECTORY_FILE);
    etk1::write_file(&path, &[etk1::trajectory_section(tr)])?;

    let mut replay_plan = plan.clone();
    replay_plan.method = Method::DdpmReplay;
    replay_plan.mask = None;
    let mut out = String::new();
    writeln!(out, "wrote {}", path.display()).unwrap();
    writeln!(out, "reconstruction max abs error: {:e}", (replay.x0 - &x0).amax()).unwrap();
    writeln!(out, "nfe inversion: {}", inv.nfe).unwrap();
    writeln!(out, "nfe replay: {}", replay.nfe).unwrap();
    writeln!(out, "nfe total: {} (predicted {})", inv.nfe + replay.nfe, predict_nfe(&replay_plan, cfg.zeus.iters, cfg.zeus.n_pcs)).unwrap();
    Ok(out)
}

fn load_profile(cfg: &RunConfig) -> Result<Option<LambdaProfile>, CliError> {
    match &cfg.zeus.lambda_profile {
        None => Ok(None),
        Some(path) => {
            if !path.is_file() {
                return Err(CliError::Config(format!("zeus.lambda_profile: file {} does not exist", path.display())));
            }
            let profile = etk1::read_profile(&etk1::read_file(path)?)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            profile.validate()?;
            Ok(Some(profile))
        }
    }
}

fn trace_csv(trace: &[StepRecord], x0_src: &Vector) -> String {
    let mut out = String::from("t,norm_x_t,x0_hat_dist_to_source,nfe\n");
    for r in trace {
        writeln!(out, "{},{},{},{}", r.t, r.x_t.norm(), (&r.x0_hat - x0_src).norm(), r.nfe).unwrap();
    }
    out
}

pub fn cmd_edit(cfg: &RunConfig) -> Result<String, CliError> {
    let Context { prior, schedule, plan } = context(cfg)?;
    let x0 = source_signal(cfg, &prior)?;
    let profile = load_profile(cfg)?;
    let settings = ZeusSettings { params: cfg.pc_params(), profile: profile.as_ref() };
    let outcome = run_edit(&prior, &schedule, &x0, &plan, &settings, cfg.plan.trace)?;

    let dir = output_dir(cfg)?;
    let path = dir.join(EDITED_FILE);
    etk1::write_file(&path, &[etk1::tensor_section(std::slice::from_ref(&outcome.output))])?;
    let mut out = String::new();
    writeln!(out, "wrote {}", path.display()).unwrap();
    if cfg.plan.trace {
        let trace_path = dir.join(TRACE_FILE);
        write_text(&trace_path, &trace_csv(&outcome.trace, &x0))?;
        writeln!(out, "wrote {}", trace_path.display()).unwrap();
    }
    let nfe = outcome.nfe;
    writeln!(out, "method: {}", plan.method).unwrap();
    writeln!(out, "distance to source: {:e}", (&outcome.output - &x0).norm()).unwrap();
    writeln!(
        out,
        "nfe: inversion {} pcs {} generation {} source replay {}",
        nfe.inversion, nfe.pcs, nfe.generation, nfe.source_replay
    )
    .unwrap();
    writeln!(out, "nfe total: {} (predicted {})", nfe.total(), predict_nfe(&plan, cfg.zeus.iters, cfg.zeus.n_pcs)).unwrap();
    Ok(out)
}

fn bundle_for(
    cfg: &RunConfig,
    prior: &GaussianMixturePrior,
    schedule: &Schedule,
    plan: &EditPlan,
    x0: &Vector,
    seed: u64,
) -> Result<(PcBundle, u64), CliError> {
    let (lo, hi) = pc_range(cfg, plan);
    if lo == 0 || lo > hi {
        return Err(CliError::Config(format!("zeus.range [{lo}, {hi}] is not a valid timestep range")));
    }
    schedule.check_timestep(hi)?;
    let inv = ddpm_invert_full(prior, x0, plan.source_guidance(), schedule, hi, seed)?;
    let points = points_from_inversion(&inv, lo, hi)?;
    let mut nfe = inv.nfe;
    let bundle = extract_pcs(prior, plan.source_guidance(), schedule, &points, &cfg.pc_params(), seed, &mut nfe)?;
    Ok((bundle, nfe))
}

pub fn cmd_pcs(cfg: &RunConfig) -> Result<String, CliError> {
    let Context { prior, schedule, plan } = context(cfg)?;
    let x0 = source_signal(cfg, &prior)?;
    let (bundle, nfe) = bundle_for(cfg, &prior, &schedule, &plan, &x0, plan.seed)?;
    let path = output_dir(cfg)?.join(PCS_FILE);
    etk1::write_file(&path, &[etk1::bundle_section(&bundle)])?;
    let mut out = String::new();
    writeln!(out, "wrote {}", path.display()).unwrap();
    writeln!(out, "timesteps: {} (nfe {nfe})", bundle.sets.len()).unwrap();
    for set in bundle.sets.iter().take(3).chain(bundle.sets.iter().skip(3).last()) {
        let lambdas: Vec<String> = set.lambdas.iter().map(|l| format!("{l:.6e}")).collect();
        writeln!(out, "t={:>4} lambda: {}", set.t, lambdas.join(" ")).unwrap();
    }
    Ok(out)
}

/// Average the given bundle files, or, with none, extract PCs for
/// `eval.n_sources` prior draws and average those.
pub fn cmd_lambda_avg(cfg: &RunConfig, bundle_files: &[PathBuf]) -> Result<String, CliError> {
    let bundles = if bundle_files.is_empty() {
        let Context { prior, schedule, plan } = context(cfg)?;
        let dataset = sample_prior(&prior, cfg.eval.n_sources, derive_seed(cfg.seed, "dataset", 0))?;
        dataset
            .iter()
            .enumerate()
            .map(|(i, x)| bundle_for(cfg, &prior, &schedule, &plan, x, derive_seed(cfg.seed, "dataset", i as u64 + 1)).map(|b| b.0))
            .collect::<Result<Vec<_>, _>>()?
    } else {
        bundle_files
            .iter()
            .map(|p| etk1::read_bundle(&etk1::read_file(p)?).map_err(|e| CliError::Config(format!("{}: {e}", p.display()))))
            .collect::<Result<Vec<_>, _>>()?
    };
    let profile = average_lambda(&bundles)?;
    let path = output_dir(cfg)?.join(LAMBDA_FILE);
    etk1::write_file(&path, &[etk1::profile_section(&profile)])?;
    Ok(format!("wrote {}\naveraged {} bundles over {} timesteps\n", path.display(), bundles.len(), profile.timesteps.len()))
}

/// The identity suite as a table. Any failing check turns into a numeric
/// error carrying the table.
pub fn cmd_verify(cfg: &RunConfig) -> Result<String, CliError> {
    let prior = load_prior(&cfg.prior)?;
    let schedule = cfg.schedule()?;
    let checks = verify_suite(&prior, &schedule, cfg.seed)?;
    let mut out = String::new();
    for c in &checks {
        writeln!(out, "{:<4} {:<45} {:>12.3e} <= {:.0e}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance).unwrap();
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    writeln!(out, "{} checks, {} failed", checks.len(), failed).unwrap();
    if failed > 0 {
        return Err(CliError::Numeric(out));
    }
    Ok(out)
}

pub fn cmd_curve(cfg: &RunConfig) -> Result<String, CliError> {
    let Context { prior, schedule, plan } = context(cfg)?;
    let e = &cfg.eval;
    let features = FeatureExtractor::new(prior.dim(), e.width, e.layers, e.feature_seed)?;
    let reference_prior = match &e.reference_prior {
        Some(p) => load_prior(p)?,
        None => prior.clone(),
    };
    let reference = sample_prior(&reference_prior, e.reference_size, derive_seed(cfg.seed, "reference", 0))?;
    let sources = sample_prior(&prior, e.n_sources, derive_seed(cfg.seed, "sources", 0))?;
    let templates = e
        .methods
        .iter()
        .map(|m| {
            let mut t = plan.clone();
            t.method = m.parse().map_err(|err| CliError::Config(format!("eval.methods: {err}")))?;
            Ok(t)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let profile = load_profile(cfg)?;
    let settings = CurveSettings {
        features: &features,
        reference: &reference,
        t0_std: e.t0_std,
        zeus: ZeusSettings { params: cfg.pc_params(), profile: profile.as_ref() },
        seed: cfg.seed,
    };
    let rows = tradeoff_curve(&prior, &schedule, &sources, &templates, &e.grid, &settings)?;
    let mut csv = String::from(CURVE_HEADER);
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.csv_line());
        csv.push('\n');
    }
    let path = output_dir(cfg)?.join(CURVE_FILE);
    write_text(&path, &csv)?;
    Ok(format!("wrote {}\n{csv}", path.display()))
}

pub fn cmd_nfe(cfg: &RunConfig) -> Result<String, CliError> {
    let schedule = cfg.schedule()?;
    let plan = cfg.plan()?;
    plan.validate(&schedule)?;
    Ok(format!("{}\n", predict_nfe(&plan, cfg.zeus.iters, cfg.zeus.n_pcs)))
}
