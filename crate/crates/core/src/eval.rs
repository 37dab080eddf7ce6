//! Toy-scale editing metrics: a random-feature perceptual distance, a
//! Fréchet distance between fitted feature Gaussians, a likelihood-ratio
//! adherence score, and the trade-off table built from them.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use libm::{sqrt, tanh};

use crate::denoiser::{Condition, GaussianMixturePrior};
use crate::error::{invalid, Error, Result};
use crate::linalg::symmetric_eigen_desc;
use crate::oracle::PriorSampler;
use crate::pipeline::{run_edit, ZeusSettings};
use crate::rng::{self, standard_normal};
use crate::sampler::{EditPlan, Method, TPrime};
use crate::schedule::Schedule;
use crate::{Matrix, Vector};

pub const DEFAULT_LAYERS: usize = 4;
pub const DEFAULT_WIDTH: usize = 8;
/// Eigenvalues above `-NEG_CLAMP * scale` are treated as round-off and
/// clamped to zero inside matrix square roots.
pub const NEG_CLAMP: f64 = 1e-8;

/// Stack of seeded `tanh(W x + b)` layers.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    seed: u64,
    layers: Vec<(Matrix, Vector)>,
}

impl FeatureExtractor {
    pub fn new(input_dim: usize, width: usize, n_layers: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || width == 0 || n_layers == 0 {
            return Err(invalid("feature extractor needs positive sizes"));
        }
        let mut layers = Vec::with_capacity(n_layers);
        let mut fan_in = input_dim;
        for l in 0..n_layers {
            let mut rng = rng::stream(seed, rng::EVAL_FEATURES, &[l as u64]);
            let w = standard_normal(&mut rng, width * fan_in) / sqrt(fan_in as f64);
            let b = standard_normal(&mut rng, width) * 0.1;
            layers.push((Matrix::from_column_slice(width, fan_in, w.as_slice()), b));
            fan_in = width;
        }
        Ok(Self { seed, layers })
    }

    pub fn with_defaults(input_dim: usize, seed: u64) -> Result<Self> {
        Self::new(input_dim, DEFAULT_WIDTH, DEFAULT_LAYERS, seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.ncols()
    }

    /// Per-layer activations.
    pub fn features(&self, x: &Vector) -> Result<Vec<Vector>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (w, b) in &self.layers {
            h = (w * h + b).map(tanh);
            out.push(h.clone());
        }
        Ok(out)
    }

    /// All layers concatenated.
    pub fn embed(&self, x: &Vector) -> Result<Vector> {
        let parts = self.features(x)?;
        let rows: Vec<f64> = parts.iter().flat_map(|p| p.iter().copied()).collect();
        Ok(Vector::from_vec(rows))
    }
}

fn unit(v: &Vector) -> Vector {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        v.clone()
    }
}

/// Mean over layers of the distance between unit-normalized activations.
pub fn lpaps(a: &Vector, b: &Vector, f: &FeatureExtractor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), got: b.len() });
    }
    let fa = f.features(a)?;
    let fb = f.features(b)?;
    let total: f64 = fa.iter().zip(&fb).map(|(x, y)| (unit(x) - unit(y)).norm()).sum();
    Ok(total / fa.len() as f64)
}

/// Sample mean and unbiased covariance.
pub fn fit_gaussian(samples: &[Vector]) -> Result<(Vector, Matrix)> {
    if samples.len() < 2 {
        return Err(invalid("need at least two samples to fit a Gaussian"));
    }
    let n = samples[0].len();
    let mut mean = Vector::zeros(n);
    for s in samples {
        if s.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: s.len() });
        }
        mean += s;
    }
    mean /= samples.len() as f64;
    let mut cov = Matrix::zeros(n, n);
    for s in samples {
        let d = s - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= (samples.len() - 1) as f64;
    Ok((mean, cov))
}

// Square root of a PSD matrix through its eigendecomposition.
fn psd_sqrt(m: &Matrix) -> Result<Matrix> {
    let (values, vectors) = symmetric_eigen_desc(m);
    let scale = values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut scaled = vectors.clone();
    for (c, v) in values.iter().enumerate() {
        if *v < -NEG_CLAMP * scale {
            return Err(invalid(format!("matrix has a negative eigenvalue {v:e}")));
        }
        scaled.column_mut(c).scale_mut(sqrt(v.max(0.0)));
    }
    Ok(&scaled * vectors.transpose())
}

/// `‖μ₁-μ₂‖² + Tr(Σ₁ + Σ₂ - 2 (Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn frechet_gaussian(m1: &Vector, c1: &Matrix, m2: &Vector, c2: &Matrix) -> Result<f64> {
    if m1.len() != m2.len() || c1.nrows() != m1.len() || c2.nrows() != m2.len() {
        return Err(Error::DimensionMismatch { expected: m1.len(), got: m2.len() });
    }
    let r1 = psd_sqrt(c1)?;
    let cross = psd_sqrt(&(&r1 * c2 * &r1))?;
    let d = (m1 - m2).norm_squared() + c1.trace() + c2.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

/// Fréchet distance between Gaussians fitted to the concatenated features
/// of two signal sets. Sets smaller than the feature dimension plus one
/// give rank-deficient covariances; the distance is still defined.
pub fn frechet_distance(a: &[Vector], b: &[Vector], f: &FeatureExtractor) -> Result<f64> {
    let fa = a.iter().map(|x| f.embed(x)).collect::<Result<Vec<_>>>()?;
    let fb = b.iter().map(|x| f.embed(x)).collect::<Result<Vec<_>>>()?;
    let (m1, c1) = fit_gaussian(&fa)?;
    let (m2, c2) = fit_gaussian(&fb)?;
    frechet_gaussian(&m1, &c1, &m2, &c2)
}

/// Log density ratio of the target-reweighted mixture to the prior, both
/// smoothed by `t0_std`. Bounded above by `log max_k(cond_k / w_k)`.
pub fn adherence(x: &Vector, prior: &GaussianMixturePrior, cond_tgt: &Condition, t0_std: f64) -> Result<f64> {
    let target = match cond_tgt {
        Condition::Unconditional => return Err(Error::UnconditionalTarget),
        Condition::ComponentWeights(_) => prior.condition_weights(cond_tgt)?,
    };
    if !(t0_std >= 0.0 && t0_std.is_finite()) {
        return Err(invalid("smoothing std must be finite and non-negative"));
    }
    let s2 = t0_std * t0_std;
    Ok(prior.log_density_with(target, x, s2)? - prior.log_density_with(prior.weights(), x, s2)?)
}

/// `n` independent prior draws, each from its own keyed stream.
pub fn sample_prior(prior: &GaussianMixturePrior, n: usize, seed: u64) -> Result<Vec<Vector>> {
    let sampler = PriorSampler::new(prior)?;
    Ok((0..n)
        .map(|i| {
            let mut x = Vector::zeros(prior.dim());
            sampler.draw(&mut rng::stream(seed, rng::REFERENCE, &[i as u64]), &mut x);
            x
        })
        .collect())
}

pub const CURVE_HEADER: &str =
    "method,T_start,t_prime,gamma,adherence_mean,lpaps_mean,fad_source,fad_reference,n_signals,seed";

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub method: Method,
    pub t_start: usize,
    pub t_prime: Option<TPrime>,
    pub gamma: f64,
    /// NaN when the plan has no target condition.
    pub adherence_mean: f64,
    pub lpaps_mean: f64,
    pub fad_source: f64,
    pub fad_reference: f64,
    pub n_signals: usize,
    pub seed: u64,
}

impl CurveRow {
    pub fn csv_line(&self) -> String {
        let t_prime = match self.t_prime {
            None => String::new(),
            Some(TPrime::Fixed(t)) => format!("{t}"),
            Some(TPrime::PerStep) => String::from("per-step"),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.method,
            self.t_start,
            t_prime,
            self.gamma,
            self.adherence_mean,
            self.lpaps_mean,
            self.fad_source,
            self.fad_reference,
            self.n_signals,
            self.seed
        )
    }
}

/// Shared inputs of a trade-off sweep.
#[derive(Debug, Clone)]
pub struct CurveSettings<'a> {
    pub features: &'a FeatureExtractor,
    pub reference: &'a [Vector],
    pub t0_std: f64,
    pub zeus: ZeusSettings<'a>,
    pub seed: u64,
}

/// Mean metrics of every template at every `T_start` of the grid. Signal
/// `i` is edited with seed `derive_seed(seed, "curve", i)`, the same for
/// all rows, so rows differ only in the plan.
pub fn tradeoff_curve(
    prior: &GaussianMixturePrior,
    schedule: &Schedule,
    sources: &[Vector],
    templates: &[EditPlan],
    grid: &[usize],
    settings: &CurveSettings<'_>,
) -> Result<Vec<CurveRow>> {
    if sources.len() < 8 {
        return Err(invalid("trade-off curves need at least 8 source signals"));
    }
    if grid.is_empty() || templates.is_empty() {
        return Err(Error::Empty("curve grid or method list"));
    }
    let mut rows = Vec::with_capacity(templates.len() * grid.len());
    for template in templates {
        for &t_start in grid {
            let mut plan = template.clone();
            plan.t_start = t_start;
            plan.t_end = plan.t_end.min(t_start);
            let mut outputs = Vec::with_capacity(sources.len());
            let (mut adh, mut lp) = (0.0, 0.0);
            for (i, x0) in sources.iter().enumerate() {
                plan.seed = rng::derive_seed(settings.seed, "curve", i as u64);
                let out = run_edit(prior, schedule, x0, &plan, &settings.zeus, false)?.output;
                adh += match plan.cond_tgt {
                    Condition::Unconditional => f64::NAN,
                    _ => adherence(&out, prior, &plan.cond_tgt, settings.t0_std)?,
                };
                lp += lpaps(&out, x0, settings.features)?;
                outputs.push(out);
            }
            let n = sources.len() as f64;
            rows.push(CurveRow {
                method: plan.method,
                t_start,
                t_prime: plan.t_prime,
                gamma: plan.gamma,
                adherence_mean: adh / n,
                lpaps_mean: lp / n,
                fad_source: frechet_distance(&outputs, sources, settings.features)?,
                fad_reference: frechet_distance(&outputs, settings.reference, settings.features)?,
                n_signals: sources.len(),
                seed: settings.seed,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::standard_test_prior;
    use alloc::vec;

    fn diag(v: &[f64]) -> Matrix {
        Matrix::from_diagonal(&Vector::from_vec(v.to_vec()))
    }

    #[test]
    fn lpaps_basic_properties() {
        let f = FeatureExtractor::with_defaults(5, 3).unwrap();
        let a = Vector::from_fn(5, |i, _| i as f64 * 0.3 - 0.5);
        let b = Vector::from_fn(5, |i, _| (i as f64).cos());
        assert_eq!(lpaps(&a, &a, &f).unwrap(), 0.0);
        assert_eq!(lpaps(&a, &b, &f).unwrap(), lpaps(&b, &a, &f).unwrap());
        assert!(lpaps(&a, &Vector::zeros(4), &f).is_err());
        assert_eq!(f, FeatureExtractor::with_defaults(5, 3).unwrap());
        assert_ne!(f, FeatureExtractor::with_defaults(5, 4).unwrap());
    }

    #[test]
    fn lpaps_monotone_on_random_lines() {
        let f = FeatureExtractor::with_defaults(6, 11).unwrap();
        for line in 0..100u64 {
            let mut rng = rng::stream(1, "test-lines", &[line]);
            let a = standard_normal(&mut rng, 6);
            let dir = standard_normal(&mut rng, 6);
            let b = &a + &dir * 0.05;
            let mut last = 0.0;
            for k in 1..=10 {
                let p = &a + (&b - &a) * (k as f64 / 10.0);
                let d = lpaps(&a, &p, &f).unwrap();
                assert!(d > last, "line {line} step {k}");
                last = d;
            }
        }
    }

    #[test]
    fn frechet_hand_cases() {
        let z = Vector::zeros(2);
        let d = frechet_gaussian(&z, &diag(&[1.0, 4.0]), &z, &diag(&[4.0, 1.0])).unwrap();
        // Independent scalar evaluation: Σ (a + b - 2 sqrt(ab)) per axis.
        let scalar: f64 = [(1.0f64, 4.0f64), (4.0, 1.0)].iter().map(|(a, b)| a + b - 2.0 * (a * b).sqrt()).sum();
        assert!((d - 2.0).abs() < 1e-8 && (d - scalar).abs() < 1e-12);
        let c = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let shift = Vector::from_vec(vec![0.3, -1.2]);
        let d = frechet_gaussian(&z, &c, &shift, &c).unwrap();
        assert!((d - shift.norm_squared()).abs() < 1e-10);
        let bad = diag(&[1.0, -1.0]);
        assert!(frechet_gaussian(&z, &bad, &z, &c).is_err());
    }

    #[test]
    fn frechet_identical_sets() {
        let f = FeatureExtractor::with_defaults(4, 0).unwrap();
        let set = sample_prior(&standard_test_prior(4), 64, 9).unwrap();
        assert!(frechet_distance(&set, &set, &f).unwrap().abs() <= 1e-8);
        let other = sample_prior(&standard_test_prior(4), 64, 10).unwrap();
        let ab = frechet_distance(&set, &other, &f).unwrap();
        let ba = frechet_distance(&other, &set, &f).unwrap();
        assert!(ab > 0.0 && (ab - ba).abs() < 1e-8 * ab.max(1.0));
        assert!(frechet_distance(&set[..1], &set, &f).is_err());
    }

    #[test]
    fn adherence_cases() {
        let prior = standard_test_prior(3);
        let x = Vector::from_vec(vec![0.4, -0.7, 0.1]);
        let same = Condition::weights(prior.weights().to_vec()).unwrap();
        assert_eq!(adherence(&x, &prior, &same, 0.1).unwrap(), 0.0);
        assert!(matches!(adherence(&x, &prior, &Condition::Unconditional, 0.1), Err(Error::UnconditionalTarget)));

        let tgt = Condition::one_hot(0, 2).unwrap();
        let at_mean = adherence(&prior.means()[0].clone(), &prior, &tgt, 0.05).unwrap();
        assert!(at_mean <= 2f64.ln() && (at_mean - 2f64.ln()).abs() < 1e-3);

        // Direct densities, written out without the mixture helpers.
        let density = |k: usize, s2: f64| {
            let m = &prior.means()[k];
            let c = &prior.covariances()[k];
            (0..3)
                .map(|i| {
                    let v = c[(i, i)] + s2;
                    (-(x[i] - m[i]).powi(2) / (2.0 * v)).exp() / (2.0 * core::f64::consts::PI * v).sqrt()
                })
                .product::<f64>()
        };
        let s2 = 0.01;
        let direct = (density(0, s2) / (0.5 * density(0, s2) + 0.5 * density(1, s2))).ln();
        assert!((adherence(&x, &prior, &tgt, 0.1).unwrap() - direct).abs() < 1e-10);
    }

    #[test]
    fn curve_shape() {
        let prior = standard_test_prior(3);
        let s = Schedule::new(50, 1e-4, 0.05, 1.0).unwrap();
        let f = FeatureExtractor::with_defaults(3, 1).unwrap();
        let sources = sample_prior(&prior, 8, 2).unwrap();
        let reference = sample_prior(&prior, 16, 3).unwrap();
        let mut plan = EditPlan::new(Method::Zeta, 10);
        plan.cond_tgt = Condition::one_hot(1, 2).unwrap();
        let settings = CurveSettings { features: &f, reference: &reference, t0_std: 0.1, zeus: ZeusSettings::default(), seed: 4 };
        let rows = tradeoff_curve(&prior, &s, &sources, &[plan], &[20], &settings).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].csv_line().split(',').count(), CURVE_HEADER.split(',').count());
        assert!(tradeoff_curve(&prior, &s, &sources[..7], &[], &[20], &settings).is_err());
    }
}
