//! Linear-β noise schedule and the per-timestep coefficients derived from it.
//!
//! Timesteps run `1..=T`. `alpha_bar(0)` is defined as exactly `1`, which
//! forces `sigma(1) == 0`.

use alloc::vec::Vec;

use libm::sqrt;

use crate::error::{invalid, Error, Result};
use crate::rng::fnv1a64;

/// The four numbers a schedule is built from. This is also what gets
/// serialized; coefficient sequences never are.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleParams {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub eta: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { steps: 200, beta_min: 1e-4, beta_max: 0.02, eta: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    params: ScheduleParams,
    // index t - 1
    beta: Vec<f64>,
    // index t, alpha_bar[0] == 1
    alpha_bar: Vec<f64>,
    // index t, sigma[0] unused and zero
    sigma: Vec<f64>,
    id: u64,
}

impl Schedule {
    pub fn new(steps: usize, beta_min: f64, beta_max: f64, eta: f64) -> Result<Self> {
        Self::from_params(ScheduleParams { steps, beta_min, beta_max, eta })
    }

    pub fn from_params(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams { steps, beta_min, beta_max, eta } = params;
        if steps < 2 {
            return Err(invalid("schedule needs at least 2 steps"));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(invalid("betas must satisfy 0 < beta_min <= beta_max < 1"));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(invalid("eta must lie in [0, 1]"));
        }
        let span = (steps - 1) as f64;
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_min + (beta_max - beta_min) * i as f64 / span)
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let mut sigma = Vec::with_capacity(steps + 1);
        sigma.push(0.0);
        for t in 1..=steps {
            let (prev, cur) = (alpha_bar[t - 1], alpha_bar[t]);
            sigma.push(eta * sqrt((1.0 - prev) / (1.0 - cur)) * sqrt(1.0 - cur / prev));
        }
        for t in 1..=steps {
            if !(alpha_bar[t] > 0.0 && alpha_bar[t] < alpha_bar[t - 1]) {
                return Err(invalid("alpha_bar must be strictly decreasing inside (0, 1)"));
            }
            let radicand = 1.0 - alpha_bar[t - 1] - sigma[t] * sigma[t];
            if radicand < 0.0 {
                return Err(Error::Domain { t, value: radicand });
            }
        }
        let mut bytes = [0u8; 32];
        bytes[..8].copy_from_slice(&(steps as u64).to_le_bytes());
        bytes[8..16].copy_from_slice(&beta_min.to_bits().to_le_bytes());
        bytes[16..24].copy_from_slice(&beta_max.to_bits().to_le_bytes());
        bytes[24..].copy_from_slice(&eta.to_bits().to_le_bytes());
        Ok(Self { params, beta, alpha_bar, sigma, id: fnv1a64(&bytes) })
    }

    /// Same β sequence with the stochasticity switched off (DDIM).
    pub fn deterministic(&self) -> Self {
        Self::from_params(ScheduleParams { eta: 0.0, ..self.params })
            .expect("an eta = 0 variant of a valid schedule is valid")
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn steps(&self) -> usize {
        self.params.steps
    }

    pub fn eta(&self) -> f64 {
        self.params.eta
    }

    /// Hash of the construction parameters; trajectories carry it.
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::TimestepOutOfRange { t, max: self.steps() })
        } else {
            Ok(())
        }
    }

    /// β_t for `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// ᾱ_t for `0 <= t <= T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// σ_t for `1 <= t <= T`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma[1..]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Standard deviation of the Gaussian denoising problem solved at `t`
    /// once `x_t` is rescaled by `1/sqrt(ᾱ_t)`.
    pub fn equivalent_noise_std(&self, t: usize) -> Result<f64> {
        self.check_timestep(t)?;
        let ab = self.alpha_bar[t];
        Ok(sqrt((1.0 - ab) / ab))
    }

    /// `sqrt(1 - ᾱ_{t-1} - σ_t²)`, the weight of the predicted noise in μ_t.
    pub fn direction_scale(&self, t: usize) -> Result<f64> {
        self.check_timestep(t)?;
        let radicand = 1.0 - self.alpha_bar[t - 1] - self.sigma[t] * self.sigma[t];
        if radicand < 0.0 {
            return Err(Error::Domain { t, value: radicand });
        }
        Ok(sqrt(radicand))
    }

    /// c_t, the factor that turns a shift of x̂₀ into a shift of μ_t when the
    /// noise prediction is moved consistently.
    pub fn drift_coefficient(&self, t: usize) -> Result<f64> {
        self.check_timestep(t)?;
        drift_coefficient_from(self.alpha_bar[t - 1], self.alpha_bar[t], self.sigma[t])
            .map_err(|e| match e {
                Error::Domain { value, .. } => Error::Domain { t, value },
                other => other,
            })
    }
}

/// c_t from raw coefficients: `sqrt(ab_prev) - sqrt(ab) * sqrt(1 - ab_prev - sigma²) / sqrt(1 - ab)`.
pub fn drift_coefficient_from(alpha_bar_prev: f64, alpha_bar: f64, sigma: f64) -> Result<f64> {
    let radicand = 1.0 - alpha_bar_prev - sigma * sigma;
    if radicand < 0.0 {
        return Err(Error::Domain { t: 0, value: radicand });
    }
    Ok(sqrt(alpha_bar_prev) - sqrt(alpha_bar) * sqrt(radicand) / sqrt(1.0 - alpha_bar))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference recomputation: ᾱ through a log-sum, σ from the DDPM
    // posterior-variance form β̃_t = β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t).
    fn reference_alpha_bar(t: usize, steps: usize, lo: f64, hi: f64) -> f64 {
        let mut log_sum = 0.0f64;
        for s in 1..=t {
            let b = lo + (hi - lo) * ((s - 1) as f64) / ((steps - 1) as f64);
            log_sum += (1.0 - b).ln();
        }
        log_sum.exp()
    }

    fn reference_sigma(t: usize, steps: usize, lo: f64, hi: f64, eta: f64) -> f64 {
        let b = lo + (hi - lo) * ((t - 1) as f64) / ((steps - 1) as f64);
        let prev = if t == 1 { 1.0 } else { reference_alpha_bar(t - 1, steps, lo, hi) };
        let cur = reference_alpha_bar(t, steps, lo, hi);
        eta * (b * (1.0 - prev) / (1.0 - cur)).sqrt()
    }

    #[test]
    fn default_schedule_shape() {
        let s = Schedule::new(200, 1e-4, 0.02, 1.0).unwrap();
        assert!(s.alpha_bar(200) < s.alpha_bar(1) && s.alpha_bar(1) < 1.0);
        assert_eq!(s.alpha_bar(0), 1.0);
        assert_eq!(s.sigma(1), 0.0);
        for t in 1..=200 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            assert!(s.sigma(t) >= 0.0);
            assert!(s.direction_scale(t).is_ok());
        }
    }

    #[test]
    fn eta_zero_zeroes_sigma() {
        let s = Schedule::new(2, 0.5, 0.5, 0.0).unwrap();
        assert_eq!(s.sigma(1), 0.0);
        assert_eq!(s.sigma(2), 0.0);
    }

    #[test]
    fn sigma_matches_reference() {
        let s = Schedule::new(200, 1e-4, 0.02, 1.0).unwrap();
        let worst = (1..=200)
            .map(|t| (s.sigma(t) - reference_sigma(t, 200, 1e-4, 0.02, 1.0)).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-12, "max deviation {worst:e}");
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(Schedule::new(1, 1e-4, 0.02, 1.0).is_err());
        assert!(Schedule::new(10, 1e-4, 1.0, 1.0).is_err());
        assert!(Schedule::new(10, 0.0, 0.02, 1.0).is_err());
        assert!(Schedule::new(10, 0.03, 0.02, 1.0).is_err());
        assert!(Schedule::new(10, 1e-4, 0.02, 1.5).is_err());
    }

    #[test]
    fn equivalent_noise_std_values() {
        let s = Schedule::new(200, 1e-4, 0.02, 1.0).unwrap();
        let ab = reference_alpha_bar(100, 200, 1e-4, 0.02);
        let expected = ((1.0 - ab) / ab).sqrt();
        assert!((s.equivalent_noise_std(100).unwrap() - expected).abs() <= 1e-12);
        // near-noiseless end of a gentle schedule
        let gentle = Schedule::new(1000, 1e-9, 1e-9, 1.0).unwrap();
        assert!(gentle.equivalent_noise_std(1).unwrap() < 1e-4);
        assert!(s.equivalent_noise_std(0).is_err());
        assert!(s.equivalent_noise_std(201).is_err());
    }

    #[test]
    fn equivalent_noise_std_unit_at_half() {
        // T = 2, beta = 0.5: alpha_bar_1 = 0.5
        let s = Schedule::new(2, 0.5, 0.5, 1.0).unwrap();
        assert_eq!(s.equivalent_noise_std(1).unwrap(), 1.0);
    }

    #[test]
    fn drift_coefficient_special_cases() {
        // sigma² = 1 - ab_prev makes the second term vanish
        let ab_prev: f64 = 0.64;
        let sigma = (1.0 - ab_prev).sqrt();
        let c = drift_coefficient_from(ab_prev, 0.5, sigma).unwrap();
        assert!((c - 0.8).abs() < 1e-15);
        // eta = 0, equal alpha_bar
        assert_eq!(drift_coefficient_from(0.3, 0.3, 0.0).unwrap(), 0.0);
        assert!(matches!(drift_coefficient_from(0.5, 0.4, 0.8), Err(Error::Domain { .. })));
    }

    #[test]
    fn drift_coefficient_matches_reference() {
        let s = Schedule::new(200, 1e-4, 0.02, 1.0).unwrap();
        let prev = reference_alpha_bar(149, 200, 1e-4, 0.02);
        let cur = reference_alpha_bar(150, 200, 1e-4, 0.02);
        let sig = reference_sigma(150, 200, 1e-4, 0.02, 1.0);
        let expected = prev.sqrt() - cur.sqrt() * (1.0 - prev - sig * sig).sqrt() / (1.0 - cur).sqrt();
        assert!((s.drift_coefficient(150).unwrap() - expected).abs() <= 1e-12);
    }

    #[test]
    fn drift_coefficient_reproduces_symmetric_shift() {
        // Adding g to x̂₀ in both P and D (eps moved by -g sqrt(ab)/sqrt(1-ab))
        // must move μ by exactly c_t g.
        let s = Schedule::new(200, 1e-4, 0.02, 1.0).unwrap();
        let (x_t, eps, g) = (0.7, -0.3, 0.05);
        for t in 1..=200 {
            let (ab, abp) = (s.alpha_bar(t), s.alpha_bar(t - 1));
            let d = s.direction_scale(t).unwrap();
            let mu = |e: f64| abp.sqrt() * (x_t - (1.0 - ab).sqrt() * e) / ab.sqrt() + d * e;
            let shifted = mu(eps - g * ab.sqrt() / (1.0 - ab).sqrt());
            let expected = mu(eps) + s.drift_coefficient(t).unwrap() * g;
            assert!((shifted - expected).abs() < 1e-12, "t = {t}");
        }
    }

    #[test]
    fn construction_is_pure() {
        let a = Schedule::new(200, 1e-4, 0.02, 0.7).unwrap();
        let b = Schedule::new(200, 1e-4, 0.02, 0.7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.id(), b.id());
        assert_ne!(a.id(), Schedule::new(200, 1e-4, 0.02, 1.0).unwrap().id());
    }
}
