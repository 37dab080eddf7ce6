use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use proptest::prelude::*;
use zedit::etk1;
use zedit_core::eval::CURVE_HEADER;
use zedit_core::{Condition, NoiseTrajectory, Vector};

fn zedit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zedit")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes a standard dim-6 prior and the given config, returns the config path.
fn setup(dir: &Path, name: &str, body: &str) -> String {
    fs::write(dir.join("prior.toml"), "[standard]\ndim = 6\n").unwrap();
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, format!("seed = 11\nprior = \"prior.toml\"\noutput_dir = \"{name}\"\n{body}")).unwrap();
    path.display().to_string()
}

fn run_ok(args: &[&str]) -> String {
    let out = zedit(args);
    assert!(out.status.success(), "{args:?} failed: {}", stderr(&out));
    stdout(&out)
}

/// Value after `key` on the line starting with it.
fn field(report: &str, key: &str) -> f64 {
    let line = report.lines().find(|l| l.starts_with(key)).unwrap_or_else(|| panic!("no `{key}` in {report}"));
    line[key.len()..].split_whitespace().next().unwrap().parse().unwrap()
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "bad", "[plan]\nmethod = \"zeta\"\ngamam = 1.0\n");
    let out = zedit(&["edit", "-c", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("gamam"), "{}", stderr(&out));
}

#[test]
fn missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "missing", "signal = \"nowhere.csv\"\n");
    let out = zedit(&["invert", "-c", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("signal"));
    assert_eq!(zedit(&["invert", "-c", "/definitely/not/here.toml"]).status.code(), Some(2));
}

#[test]
fn nfe_worked_examples() {
    let dir = tempfile::tempdir().unwrap();
    let zeta = setup(dir.path(), "zeta", "[plan]\nmethod = \"zeta\"\ncond_tgt = [0.0, 1.0]\nw_tgt = 12.0\nt_start = 100\n");
    assert_eq!(run_ok(&["nfe", "-c", &zeta]).trim(), "300");
    let zeus = setup(dir.path(), "zeus", "[plan]\nmethod = \"zeus\"\nt_start = 100\nt_prime = 80\npcs = \"1:1.0\"\n");
    assert_eq!(run_ok(&["nfe", "-c", &zeus, "--n-pcs", "1", "--iters", "50"]).trim(), "250");
}

#[test]
fn edit_reports_match_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(
        dir.path(),
        "zeus",
        "[plan]\nmethod = \"zeus\"\ncond_src = [1.0, 0.0]\nw_src = 3.0\nt_start = 40\nt_prime = \"per-step\"\ngamma = 1.0\npcs = \"1:1.0\"\nmask = [0, 1, 2]\n[zeus]\nn_pcs = 2\niters = 5\n",
    );
    let report = run_ok(&["edit", "-c", &cfg]);
    let line = report.lines().find(|l| l.starts_with("nfe total:")).unwrap();
    let (measured, predicted) = line.trim_start_matches("nfe total: ").trim_end_matches(')').split_once(" (predicted ").unwrap();
    assert_eq!(measured, predicted);
}

#[test]
fn invert_reconstructs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("signal.csv"), "# two signals\n0.5,1,-2,0,0.25,3\n1,1,1,1,1,1\n").unwrap();
    let cfg = setup(dir.path(), "inv", "signal = \"signal.csv\"\nsignal_row = 1\n[plan]\nt_start = 200\n");
    let report = run_ok(&["invert", "-c", &cfg]);
    assert!(field(&report, "reconstruction max abs error:") <= 1e-8, "{report}");
    let tr = etk1::read_trajectory(&etk1::read_file(&dir.path().join("inv/trajectory.etk")).unwrap()).unwrap();
    assert_eq!(tr.t_start, 200);
    assert_eq!(tr.z.len(), 199);
}

#[test]
fn zeta_toward_the_source_condition_returns_the_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(
        dir.path(),
        "same",
        "[plan]\nmethod = \"zeta\"\ncond_src = [1.0, 0.0]\ncond_tgt = [1.0, 0.0]\nw_src = 3.0\nw_tgt = 3.0\nt_start = 150\n",
    );
    let report = run_ok(&["edit", "-c", &cfg]);
    assert!(field(&report, "distance to source:") <= 1e-8, "{report}");
}

#[test]
fn zeus_without_strength_is_the_replay() {
    let dir = tempfile::tempdir().unwrap();
    let zeus = setup(dir.path(), "zeus", "[plan]\nmethod = \"zeus\"\nt_start = 90\nt_prime = \"per-step\"\ngamma = 0.0\npcs = \"1:1.0\"\n[zeus]\niters = 5\n");
    let replay = setup(dir.path(), "replay", "[plan]\nmethod = \"ddpm-replay\"\nt_start = 90\n");
    run_ok(&["edit", "-c", &zeus]);
    run_ok(&["edit", "-c", &replay]);
    let a = fs::read(dir.path().join("zeus/edited.etk")).unwrap();
    let b = fs::read(dir.path().join("replay/edited.etk")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn sdedit_depends_only_on_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let body = "[plan]\nmethod = \"sdedit\"\ncond_tgt = [0.0, 1.0]\nw_tgt = 5.0\nt_start = 120\n";
    let cfg = setup(dir.path(), "sd", body);
    run_ok(&["edit", "-c", &cfg]);
    let first = fs::read(dir.path().join("sd/edited.etk")).unwrap();
    run_ok(&["edit", "-c", &cfg]);
    assert_eq!(first, fs::read(dir.path().join("sd/edited.etk")).unwrap());

    let other = dir.path().join("sd2.toml");
    fs::write(&other, format!("seed = 12\nprior = \"prior.toml\"\noutput_dir = \"sd2\"\nsignal_row = 0\n{body}")).unwrap();
    run_ok(&["edit", "-c", &other.display().to_string()]);
    assert_ne!(first, fs::read(dir.path().join("sd2/edited.etk")).unwrap());
}

#[test]
fn verify_passes_on_the_default_prior() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("v.toml");
    let prior = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default_prior.toml");
    fs::write(&cfg, format!("prior = \"{}\"\n", prior.display())).unwrap();
    let report = run_ok(&["verify", "-c", &cfg.display().to_string()]);
    assert!(report.contains(", 0 failed"), "{report}");
    assert!(report.lines().any(|l| l.contains("pc subspace angle")));
}

#[test]
fn curve_writes_its_header() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(
        dir.path(),
        "curve",
        "[plan]\nmethod = \"zeta\"\ncond_src = [1.0, 0.0]\ncond_tgt = [0.0, 1.0]\nw_tgt = 3.0\n[eval]\nn_sources = 8\nreference_size = 16\ngrid = [40, 120]\nmethods = [\"zeta\", \"sdedit\", \"ddim-partial\"]\n",
    );
    run_ok(&["curve", "-c", &cfg]);
    let csv = fs::read_to_string(dir.path().join("curve/curve.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CURVE_HEADER));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[0].starts_with("zeta,40,"));
    assert!(rows[5].starts_with("ddim-partial,120,"));
}

#[test]
fn fixed_t_prime_needs_a_profile() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), "fixed", "[plan]\nmethod = \"zeus\"\nt_start = 50\nt_prime = 60\ngamma = 1.0\npcs = \"1:1.0\"\n");
    let out = zedit(&["edit", "-c", &cfg]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    let avg = setup(dir.path(), "avg", "[plan]\nmethod = \"zeus\"\nt_start = 50\nt_prime = 60\npcs = \"1:1.0\"\n[zeus]\nn_pcs = 1\niters = 5\nrange = [1, 60]\n[eval]\nn_sources = 2\n");
    run_ok(&["lambda-avg", "-c", &avg]);
    let with_profile = setup(
        dir.path(),
        "fixed2",
        "[plan]\nmethod = \"zeus\"\nt_start = 50\nt_prime = 60\ngamma = 1.0\npcs = \"1:1.0\"\n[zeus]\nlambda_profile = \"avg/lambda.etk\"\n",
    );
    let report = run_ok(&["edit", "-c", &with_profile, "--iters", "5"]);
    assert!(report.contains("method: zeus"));
    assert!(field(&report, "distance to source:") > 0.0);
}

fn trajectory(seed: u64, dim: usize, t_start: usize) -> NoiseTrajectory {
    let v = |k: u64| Vector::from_fn(dim, |i, _| ((seed ^ k).wrapping_mul(2654435761).wrapping_add(i as u64) as f64).sin() * 1e3);
    NoiseTrajectory {
        t_start,
        x_start: v(1),
        z: (0..t_start - 1).map(|k| v(k as u64 + 2)).collect(),
        residual: v(0),
        cond_src: Condition::weights(vec![0.25, 0.75]).unwrap(),
        guidance_src: 3.5,
        schedule_id: seed,
        seed: seed.rotate_left(7),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn etk1_round_trips(seed in any::<u64>(), dim in 1usize..6, t_start in 1usize..20, rows in proptest::collection::vec(proptest::collection::vec(any::<f64>(), 3), 0..5)) {
        let tr = trajectory(seed, dim, t_start);
        let tensor: Vec<Vector> = rows.iter().map(|r| Vector::from_vec(r.clone())).collect();
        let bytes = etk1::encode(&[etk1::trajectory_section(&tr), etk1::tensor_section(&tensor)]);
        let sections = etk1::decode(&bytes).unwrap();
        prop_assert_eq!(etk1::read_trajectory(&sections).unwrap(), tr);
        let back = etk1::read_tensor(&sections).unwrap();
        prop_assert_eq!(back.len(), tensor.len());
        for (a, b) in back.iter().zip(&tensor) {
            prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(etk1::encode(&sections), bytes);
    }
}
