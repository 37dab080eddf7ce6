//! TOML prior descriptions. A file holds exactly one of:
//!
//! ```toml
//! [standard]
//! dim = 8
//! ```
//!
//! ```toml
//! [[component]]
//! weight = 0.5
//! mean = [2.0, 1.0]
//! diag = [0.85, 0.65]        # or: cov = [[0.85, 0.0], [0.0, 0.65]]
//! ```
//!
//! ```toml
//! [empirical]
//! bandwidth = 0.3
//! points = [[0.0, 1.0], [1.0, 0.0]]
//! ```

use std::fs;
use std::path::Path;

use serde::Deserialize;
use zedit_core::denoiser::{empirical_prior, standard_test_prior};
use zedit_core::{GaussianMixturePrior, Matrix, Vector};

use crate::error::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorFile {
    standard: Option<Standard>,
    component: Option<Vec<Component>>,
    empirical: Option<Empirical>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Standard {
    dim: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Component {
    weight: f64,
    mean: Vec<f64>,
    diag: Option<Vec<f64>>,
    cov: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Empirical {
    bandwidth: f64,
    points: Vec<Vec<f64>>,
}

fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

pub fn parse_prior(text: &str) -> Result<GaussianMixturePrior, CliError> {
    let file: PriorFile = toml::from_str(text).map_err(|e| config(format!("prior: {}", e.message())))?;
    match (file.standard, file.component, file.empirical) {
        (Some(s), None, None) => {
            if s.dim < 2 {
                return Err(config("prior: standard prior needs dim >= 2"));
            }
            Ok(standard_test_prior(s.dim))
        }
        (None, Some(components), None) => {
            let mut weights = Vec::new();
            let mut means = Vec::new();
            let mut covs = Vec::new();
            for (k, c) in components.into_iter().enumerate() {
                let n = c.mean.len();
                let cov = match (c.diag, c.cov) {
                    (Some(d), None) if d.len() == n => Matrix::from_diagonal(&Vector::from_vec(d)),
                    (None, Some(rows)) if rows.len() == n && rows.iter().all(|r| r.len() == n) => {
                        Matrix::from_fn(n, n, |r, col| rows[r][col])
                    }
                    _ => return Err(config(format!("prior: component {k} needs exactly one of `diag` or `cov` matching its mean"))),
                };
                weights.push(c.weight);
                means.push(Vector::from_vec(c.mean));
                covs.push(cov);
            }
            Ok(GaussianMixturePrior::new(weights, means, covs).map_err(|e| config(format!("prior: {e}")))?)
        }
        (None, None, Some(e)) => {
            let points: Vec<Vector> = e.points.into_iter().map(Vector::from_vec).collect();
            Ok(empirical_prior(&points, e.bandwidth).map_err(|e| config(format!("prior: {e}")))?)
        }
        _ => Err(config("prior: specify exactly one of [standard], [[component]] or [empirical]")),
    }
}

pub fn load_prior(path: &Path) -> Result<GaussianMixturePrior, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_prior(&text)
}
