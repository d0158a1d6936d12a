//! DDPM machinery over flattened joint trajectories: noise schedule, forward
//! noising, clean-sample prediction, and the ancestral reverse step.
//!
//! Denoisers plug in through the [`Denoiser`] trait. The bundled
//! [`GaussianPriorDenoiser`] returns the exact posterior mean `E[x0 | x_t]`
//! under a Gaussian smoothness prior, so the sampler can be verified in
//! closed form.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::geom::Vec2;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("timestep {t} outside 0..={max}")]
    InvalidTimestep { t: usize, max: usize },
    #[error("linear solve failed: matrix is not positive definite (pivot {pivot} at row {row})")]
    SolverFailure { row: usize, pivot: f64 },
}

/// Variance schedule β_1..β_T with the derived α_t and ᾱ_t (ᾱ_0 ≡ 1).
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    /// Builds a schedule from explicit betas. Each β_t must lie in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() {
            return Err(DiffusionError::InvalidSchedule("need at least one timestep".into()));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(DiffusionError::InvalidSchedule(format!("beta_{} = {b} not in (0, 1)", i + 1)));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Number of denoising steps T.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// β_t for 1 ≤ t ≤ T.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// ᾱ_t for 0 ≤ t ≤ T.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t > self.steps() {
            Err(DiffusionError::InvalidTimestep { t, max: self.steps() })
        } else {
            Ok(())
        }
    }

    /// Coefficients `(c_x0, c_xt, variance)` of the DDPM posterior
    /// q(x_{t−1} | x_t, x0) for t ≥ 1.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let ab_t = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let beta = self.beta(t);
        let denom = 1.0 - ab_t;
        let c_x0 = ab_prev.sqrt() * beta / denom;
        let c_xt = self.alpha(t).sqrt() * (1.0 - ab_prev) / denom;
        let var = beta * (1.0 - ab_prev) / denom;
        (c_x0, c_xt, var)
    }
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).expect("default schedule is valid")
    }
}

/// Linear β schedule from `beta_min` to `beta_max` over `steps` timesteps.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<DiffusionSchedule, DiffusionError> {
    if steps < 1 {
        return Err(DiffusionError::InvalidSchedule("T must be at least 1".into()));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(DiffusionError::InvalidSchedule(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_min
            } else {
                beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    DiffusionSchedule::from_betas(betas)
}

/// Flattened joint trajectory: `agents × steps × 2` coordinates, agent-major,
/// step-minor, x before y.
///
/// `values` are offsets in meters from `reference`; the decoded position is
/// `reference + values`. The sampler centers each generated agent on its
/// prior mean, so the conditioned prefix sits at offset zero at every noise
/// level. A zero reference makes `values` absolute positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTensor {
    pub agents: usize,
    pub steps: usize,
    pub values: Vec<f64>,
    /// Entries fixed to `observed` at every diffusion step.
    pub mask: Vec<bool>,
    pub observed: Vec<f64>,
    pub reference: Vec<f64>,
}

impl TrajectoryTensor {
    pub fn zeros(agents: usize, steps: usize) -> Self {
        let n = agents * steps * 2;
        Self {
            agents,
            steps,
            values: vec![0.0; n],
            mask: vec![false; n],
            observed: vec![0.0; n],
            reference: vec![0.0; n],
        }
    }

    pub fn from_values(agents: usize, steps: usize, values: Vec<f64>) -> Result<Self, DiffusionError> {
        let mut t = Self::zeros(agents, steps);
        if values.len() != t.len() {
            return Err(DiffusionError::DimensionMismatch { expected: t.len(), got: values.len() });
        }
        t.values = values;
        Ok(t)
    }

    #[inline]
    pub fn index(&self, agent: usize, step: usize, coord: usize) -> usize {
        (agent * self.steps + step) * 2 + coord
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Fixes entry `i` to `value` (in model coordinates) and applies it.
    pub fn condition(&mut self, i: usize, value: f64) {
        self.mask[i] = true;
        self.observed[i] = value;
        self.values[i] = value;
    }

    /// Forces masked entries to their observed values.
    pub fn clamp(&mut self) {
        for ((v, &m), &o) in self.values.iter_mut().zip(&self.mask).zip(&self.observed) {
            if m {
                *v = o;
            }
        }
    }

    /// Same layout, mask, and reference with new values (clamped).
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.len());
        let mut out = Self { values, ..self.clone_meta() };
        out.clamp();
        out
    }

    fn clone_meta(&self) -> Self {
        Self {
            agents: self.agents,
            steps: self.steps,
            values: Vec::new(),
            mask: self.mask.clone(),
            observed: self.observed.clone(),
            reference: self.reference.clone(),
        }
    }

    /// Decoded positions of one agent.
    pub fn positions(&self, agent: usize) -> Vec<Vec2> {
        (0..self.steps)
            .map(|k| {
                let ix = self.index(agent, k, 0);
                Vec2::new(self.reference[ix] + self.values[ix], self.reference[ix + 1] + self.values[ix + 1])
            })
            .collect()
    }

    /// All decoded coordinates, `reference + values`.
    pub fn decoded(&self) -> Vec<f64> {
        self.reference.iter().zip(&self.values).map(|(r, v)| r + v).collect()
    }

    fn check_len(&self, n: usize) -> Result<(), DiffusionError> {
        if n != self.len() {
            Err(DiffusionError::DimensionMismatch { expected: self.len(), got: n })
        } else {
            Ok(())
        }
    }
}

/// Draws `n` independent standard-normal values.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·noise, masked entries re-clamped.
pub fn forward_noise(
    x0: &TrajectoryTensor,
    t: usize,
    schedule: &DiffusionSchedule,
    noise: &[f64],
) -> Result<TrajectoryTensor, DiffusionError> {
    schedule.check_t(t)?;
    x0.check_len(noise.len())?;
    let ab = schedule.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let values = x0.values.iter().zip(noise).map(|(x, e)| s * x + n * e).collect();
    Ok(x0.with_values(values))
}

/// Anything that maps a noisy sample to a clean-sample estimate.
pub trait Denoiser: Sync {
    /// Predicts x̂0 (model coordinates, same layout as `xt.values`).
    fn predict_x0(&self, xt: &TrajectoryTensor, t: usize, schedule: &DiffusionSchedule) -> Result<Vec<f64>, DiffusionError>;
}

/// Clean-sample prediction with masked entries forced to their observed values.
pub fn predict_x0(
    xt: &TrajectoryTensor,
    t: usize,
    schedule: &DiffusionSchedule,
    denoiser: &dyn Denoiser,
) -> Result<TrajectoryTensor, DiffusionError> {
    schedule.check_t(t)?;
    let x0 = denoiser.predict_x0(xt, t, schedule)?;
    xt.check_len(x0.len())?;
    Ok(xt.with_values(x0))
}

/// One ancestral DDPM step x_t → x_{t−1}. At t = 1 the posterior mean is
/// returned without noise.
pub fn reverse_step<R: Rng + ?Sized>(
    xt: &TrajectoryTensor,
    t: usize,
    x0_hat: &TrajectoryTensor,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<TrajectoryTensor, DiffusionError> {
    if t == 0 {
        return Err(DiffusionError::InvalidTimestep { t, max: schedule.steps() });
    }
    schedule.check_t(t)?;
    xt.check_len(x0_hat.len())?;
    let (c0, ct, var) = schedule.posterior(t);
    let sd = var.sqrt();
    let values = xt
        .values
        .iter()
        .zip(&x0_hat.values)
        .map(|(x, x0)| {
            let mean = c0 * x0 + ct * x;
            if t == 1 {
                mean
            } else {
                mean + sd * rng.sample::<f64, _>(StandardNormal)
            }
        })
        .collect();
    Ok(xt.with_values(values))
}

/// Starting point of a reverse chain: N(0, I) in model coordinates with the
/// mask applied.
pub fn initial_noise<R: Rng + ?Sized>(template: &TrajectoryTensor, rng: &mut R) -> TrajectoryTensor {
    template.with_values(standard_normal(rng, template.len()))
}

/// Full unguided reverse chain from t = T down to a clean sample.
pub fn sample<R: Rng + ?Sized>(
    template: &TrajectoryTensor,
    denoiser: &dyn Denoiser,
    schedule: &DiffusionSchedule,
    rng: &mut R,
) -> Result<TrajectoryTensor, DiffusionError> {
    let mut x = initial_noise(template, rng);
    for t in (1..=schedule.steps()).rev() {
        let x0 = predict_x0(&x, t, schedule, denoiser)?;
        x = reverse_step(&x, t, &x0, schedule, rng)?;
    }
    Ok(x)
}

// ---------------------------------------------------------------------------
// Gaussian smoothness prior

pub const DEFAULT_SMOOTHNESS: f64 = 50.0;
pub const DEFAULT_RIDGE: f64 = 1e-4;

/// Symmetric pentadiagonal matrix in band storage:
/// `diag[i] = A[i][i]`, `sub1[i] = A[i][i−1]`, `sub2[i] = A[i][i−2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pentadiagonal {
    pub diag: Vec<f64>,
    pub sub1: Vec<f64>,
    pub sub2: Vec<f64>,
}

impl Pentadiagonal {
    /// `smoothness · D₂ᵀD₂ + ridge · I` for the second-difference operator D₂.
    pub fn smoothness_precision(n: usize, smoothness: f64, ridge: f64) -> Self {
        let mut m = Self { diag: vec![ridge; n], sub1: vec![0.0; n], sub2: vec![0.0; n] };
        const STENCIL: [f64; 3] = [1.0, -2.0, 1.0];
        for r in 0..n.saturating_sub(2) {
            for (a, ca) in STENCIL.iter().enumerate() {
                for (b, cb) in STENCIL.iter().enumerate().take(a + 1) {
                    let v = smoothness * ca * cb;
                    match a - b {
                        0 => m.diag[r + a] += v,
                        1 => m.sub1[r + a] += v,
                        _ => m.sub2[r + a] += v,
                    }
                }
            }
        }
        m
    }

    /// `scale_i · I + scale_p · self`.
    fn shifted(&self, scale_i: f64, scale_p: f64) -> Self {
        Self {
            diag: self.diag.iter().map(|d| scale_i + scale_p * d).collect(),
            sub1: self.sub1.iter().map(|d| scale_p * d).collect(),
            sub2: self.sub2.iter().map(|d| scale_p * d).collect(),
        }
    }

    /// Banded Cholesky factorization A = L·Lᵀ (L shares the band layout).
    pub fn cholesky(&self) -> Result<Pentadiagonal, DiffusionError> {
        let n = self.diag.len();
        let mut l = Self { diag: vec![0.0; n], sub1: vec![0.0; n], sub2: vec![0.0; n] };
        for i in 0..n {
            if i >= 2 {
                l.sub2[i] = self.sub2[i] / l.diag[i - 2];
            }
            if i >= 1 {
                let prev = if i >= 2 { l.sub2[i] * l.sub1[i - 1] } else { 0.0 };
                l.sub1[i] = (self.sub1[i] - prev) / l.diag[i - 1];
            }
            let pivot = self.diag[i] - l.sub1[i] * l.sub1[i] - l.sub2[i] * l.sub2[i];
            if !(pivot > 0.0) || !pivot.is_finite() {
                return Err(DiffusionError::SolverFailure { row: i, pivot });
            }
            l.diag[i] = pivot.sqrt();
        }
        Ok(l)
    }

    /// Solves (L·Lᵀ) x = b in place, `self` being a Cholesky factor.
    pub fn cholesky_solve(&self, b: &mut [f64]) {
        let n = b.len();
        for i in 0..n {
            let mut v = b[i];
            if i >= 1 {
                v -= self.sub1[i] * b[i - 1];
            }
            if i >= 2 {
                v -= self.sub2[i] * b[i - 2];
            }
            b[i] = v / self.diag[i];
        }
        for i in (0..n).rev() {
            let mut v = b[i];
            if i + 1 < n {
                v -= self.sub1[i + 1] * b[i + 1];
            }
            if i + 2 < n {
                v -= self.sub2[i + 2] * b[i + 2];
            }
            b[i] = v / self.diag[i];
        }
    }
}

/// Exact posterior-mean denoiser for the prior x0 ~ N(μ, Σ) with
/// Σ⁻¹ = λ_s·D₂ᵀD₂ + ε·I applied independently to every (agent, coordinate)
/// channel.
///
/// The posterior mean `μ + √ᾱ·Σ(ᾱΣ + (1−ᾱ)I)⁻¹(x_t − √ᾱ·μ)` is evaluated as
/// `μ + √ᾱ·(ᾱI + (1−ᾱ)Σ⁻¹)⁻¹(x_t − √ᾱ·μ)`, a banded SPD solve.
#[derive(Debug, Clone)]
pub struct GaussianPriorDenoiser {
    agents: usize,
    steps: usize,
    /// Prior mean in absolute coordinates (same layout as the tensor).
    mu: Vec<f64>,
    precision: Pentadiagonal,
}

impl GaussianPriorDenoiser {
    pub fn new(agents: usize, steps: usize, mu: Vec<f64>) -> Result<Self, DiffusionError> {
        Self::with_params(agents, steps, mu, DEFAULT_SMOOTHNESS, DEFAULT_RIDGE)
    }

    pub fn with_params(agents: usize, steps: usize, mu: Vec<f64>, smoothness: f64, ridge: f64) -> Result<Self, DiffusionError> {
        let expected = agents * steps * 2;
        if mu.len() != expected {
            return Err(DiffusionError::DimensionMismatch { expected, got: mu.len() });
        }
        if !(smoothness >= 0.0 && ridge > 0.0) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "prior needs smoothness >= 0 and ridge > 0, got {smoothness}, {ridge}"
            )));
        }
        let precision = Pentadiagonal::smoothness_precision(steps, smoothness, ridge);
        Ok(Self { agents, steps, mu, precision })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn precision(&self) -> &Pentadiagonal {
        &self.precision
    }
}

impl Denoiser for GaussianPriorDenoiser {
    fn predict_x0(&self, xt: &TrajectoryTensor, t: usize, schedule: &DiffusionSchedule) -> Result<Vec<f64>, DiffusionError> {
        if xt.agents != self.agents || xt.steps != self.steps {
            return Err(DiffusionError::DimensionMismatch { expected: self.mu.len(), got: xt.len() });
        }
        let ab = schedule.alpha_bar(t);
        let sab = ab.sqrt();
        let factor = self.precision.shifted(ab, 1.0 - ab).cholesky()?;
        let mut out = vec![0.0; xt.len()];
        let mut channel = vec![0.0; self.steps];
        for agent in 0..self.agents {
            for coord in 0..2 {
                for (k, c) in channel.iter_mut().enumerate() {
                    let i = xt.index(agent, k, coord);
                    let prior = self.mu[i] - xt.reference[i];
                    *c = xt.values[i] - sab * prior;
                }
                factor.cholesky_solve(&mut channel);
                for (k, c) in channel.iter().enumerate() {
                    let i = xt.index(agent, k, coord);
                    out[i] = self.mu[i] - xt.reference[i] + sab * c;
                }
            }
        }
        Ok(out)
    }
}

/// Prior mean for one agent: the first `observed` positions as given, then a
/// constant-velocity rollout from the last observed position using the mean
/// velocity over the observed window.
pub fn constant_velocity_prior(positions: &[Vec2], observed: usize, steps: usize) -> Vec<Vec2> {
    let h = observed.clamp(1, positions.len().max(1)).min(steps);
    let velocity = if h >= 2 { (positions[h - 1] - positions[0]) * (1.0 / (h - 1) as f64) } else { Vec2::ZERO };
    (0..steps)
        .map(|k| if k < h { positions[k] } else { positions[h - 1] + velocity * (k + 1 - h) as f64 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn default_schedule_decreasing() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.steps(), 50);
        for t in 1..=50 {
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(50) < 0.1);
    }

    #[test]
    fn beta_max_one_rejected() {
        assert!(matches!(make_schedule(10, 1e-4, 1.0), Err(DiffusionError::InvalidSchedule(_))));
        assert!(make_schedule(0, 1e-4, 0.1).is_err());
        assert!(make_schedule(5, 0.2, 0.1).is_err());
        assert!(make_schedule(5, 0.0, 0.1).is_err());
    }

    #[test]
    fn forward_noise_cases() {
        let s = DiffusionSchedule::default();
        let mut x0 = TrajectoryTensor::from_values(1, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let noise = vec![0.5; 6];
        assert_eq!(forward_noise(&x0, 0, &s, &noise).unwrap().values, x0.values);
        let z = forward_noise(&x0, 10, &s, &[0.0; 6]).unwrap();
        let k = s.alpha_bar(10).sqrt();
        for (a, b) in z.values.iter().zip(&x0.values) {
            assert!((a - k * b).abs() < 1e-15);
        }
        x0.condition(0, 1.0);
        x0.condition(1, 2.0);
        let xt = forward_noise(&x0, 50, &s, &[9.0; 6]).unwrap();
        assert_eq!(&xt.values[..2], &[1.0, 2.0]);
        assert!(forward_noise(&x0, 5, &s, &[0.0; 5]).is_err());
    }

    #[test]
    fn banded_cholesky_matches_dense_product() {
        let p = Pentadiagonal::smoothness_precision(7, 3.0, 0.5);
        let l = p.cholesky().unwrap();
        let dense = |m: &Pentadiagonal, i: usize, j: usize| -> f64 {
            match i as isize - j as isize {
                0 => m.diag[i],
                1 => m.sub1[i],
                2 => m.sub2[i],
                _ => 0.0,
            }
        };
        for i in 0..7 {
            for j in 0..=i {
                let llt: f64 = (0..=j).map(|k| dense(&l, i, k) * dense(&l, j, k)).sum();
                assert!((llt - dense(&p, i, j)).abs() < 1e-12, "({i},{j})");
            }
        }
        let mut b = vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0, -1.0];
        let rhs = b.clone();
        l.cholesky_solve(&mut b);
        for i in 0..7 {
            let ax: f64 = (0..7).map(|j| dense(&p, i.max(j), i.min(j)) * b[j]).sum();
            assert!((ax - rhs[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn corrupted_precision_fails() {
        let mut p = Pentadiagonal::smoothness_precision(5, 1.0, 1e-4);
        p.diag[2] = -1.0;
        assert!(matches!(p.cholesky(), Err(DiffusionError::SolverFailure { row: 2, .. })));
    }

    #[test]
    fn posterior_mean_at_prior_mean_is_prior_mean() {
        let s = DiffusionSchedule::default();
        let mu: Vec<f64> = (0..16).map(|i| i as f64 * 0.7 - 3.0).collect();
        let d = GaussianPriorDenoiser::new(1, 8, mu.clone()).unwrap();
        let t = 20;
        let xt = TrajectoryTensor::from_values(1, 8, mu.iter().map(|m| s.alpha_bar(t).sqrt() * m).collect()).unwrap();
        let x0 = predict_x0(&xt, t, &s, &d).unwrap();
        for (a, b) in x0.values.iter().zip(&mu) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_limit_is_identity() {
        let s = DiffusionSchedule::default();
        let d = GaussianPriorDenoiser::new(1, 6, vec![0.0; 12]).unwrap();
        let xt = TrajectoryTensor::from_values(1, 6, (0..12).map(|i| (i as f64).sin()).collect()).unwrap();
        let x0 = predict_x0(&xt, 0, &s, &d).unwrap();
        for (a, b) in x0.values.iter().zip(&xt.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_shift_is_equivariant() {
        // Same absolute problem expressed with and without a reference.
        let s = DiffusionSchedule::default();
        let mu: Vec<f64> = (0..12).map(|i| 2.0 * i as f64).collect();
        let d = GaussianPriorDenoiser::new(1, 6, mu.clone()).unwrap();
        let t = 30;
        let sab = s.alpha_bar(t).sqrt();
        let dev: Vec<f64> = (0..12).map(|i| (i as f64 * 1.3).cos()).collect();
        let abs = TrajectoryTensor::from_values(1, 6, mu.iter().zip(&dev).map(|(m, e)| sab * m + e).collect()).unwrap();
        let mut cen = TrajectoryTensor::from_values(1, 6, dev.clone()).unwrap();
        cen.reference = mu.clone();
        let a = predict_x0(&abs, t, &s, &d).unwrap();
        let c = predict_x0(&cen, t, &s, &d).unwrap();
        for ((x, y), m) in a.values.iter().zip(&c.values).zip(&mu) {
            assert!((x - (y + m)).abs() < 1e-9);
        }
    }

    #[test]
    fn reverse_final_step_is_deterministic_mean() {
        let s = DiffusionSchedule::default();
        let xt = TrajectoryTensor::from_values(1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x0 = TrajectoryTensor::from_values(1, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = reverse_step(&xt, 1, &x0, &s, &mut rng).unwrap();
        let (c0, ct, _) = s.posterior(1);
        for ((o, a), b) in out.values.iter().zip(&x0.values).zip(&xt.values) {
            assert!((o - (c0 * a + ct * b)).abs() < 1e-15);
        }
        assert!(reverse_step(&xt, 0, &x0, &s, &mut rng).is_err());
    }

    #[test]
    fn vanishing_beta_step_is_noop() {
        let s = DiffusionSchedule::from_betas(vec![0.05, 1e-14, 0.05]).unwrap();
        let xt = TrajectoryTensor::from_values(1, 2, vec![1.0, -2.0, 3.0, 0.25]).unwrap();
        let x0 = TrajectoryTensor::from_values(1, 2, vec![9.0; 4]).unwrap();
        let out = reverse_step(&xt, 2, &x0, &s, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (a, b) in out.values.iter().zip(&xt.values) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn reverse_step_is_seed_deterministic() {
        let s = DiffusionSchedule::default();
        let xt = TrajectoryTensor::from_values(1, 4, vec![0.3; 8]).unwrap();
        let x0 = TrajectoryTensor::from_values(1, 4, vec![0.1; 8]).unwrap();
        let a = reverse_step(&xt, 25, &x0, &s, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = reverse_step(&xt, 25, &x0, &s, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn posterior_coefficients_are_affine() {
        let s = DiffusionSchedule::default();
        for t in 1..=s.steps() {
            let (c0, ct, var) = s.posterior(t);
            // x̂0 = x_t = √ᾱ_t·x0 is mapped to √ᾱ_{t−1}·x0
            let lhs = c0 + ct * s.alpha_bar(t).sqrt();
            assert!((lhs - s.alpha_bar(t - 1).sqrt()).abs() < 1e-12, "t={t}");
            assert!(var >= 0.0);
        }
    }

    #[test]
    fn cv_prior_extends_observed_prefix() {
        let obs: Vec<Vec2> = (0..5).map(|k| Vec2::new(k as f64, 1.0)).collect();
        let mu = constant_velocity_prior(&obs, 3, 6);
        assert_eq!(mu[2], Vec2::new(2.0, 1.0));
        assert_eq!(mu[5], Vec2::new(5.0, 1.0));
    }
}
