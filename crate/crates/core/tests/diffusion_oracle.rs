use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use socialgen::diffusion::{
    forward_noise, make_schedule, predict_x0, reverse_step, sample, DiffusionSchedule, GaussianPriorDenoiser, TrajectoryTensor,
    DEFAULT_RIDGE, DEFAULT_SMOOTHNESS,
};

const N: usize = 8;

/// λ·D₂ᵀD₂ + ε·I built densely.
fn dense_precision(n: usize, smoothness: f64, ridge: f64) -> DMatrix<f64> {
    let mut d2 = DMatrix::zeros(n - 2, n);
    for r in 0..n - 2 {
        d2[(r, r)] = 1.0;
        d2[(r, r + 1)] = -2.0;
        d2[(r, r + 2)] = 1.0;
    }
    d2.transpose() * &d2 * smoothness + DMatrix::identity(n, n) * ridge
}

/// μ + √ᾱ·Σ·(ᾱΣ + (1−ᾱ)I)⁻¹·(x − √ᾱ·μ) with explicit inverses.
fn dense_posterior_mean(mu: &DVector<f64>, x: &DVector<f64>, ab: f64) -> DVector<f64> {
    let sigma = dense_precision(mu.len(), DEFAULT_SMOOTHNESS, DEFAULT_RIDGE).try_inverse().unwrap();
    let n = mu.len();
    let m = (&sigma * ab + DMatrix::identity(n, n) * (1.0 - ab)).try_inverse().unwrap();
    mu + sigma * m * (x - mu * ab.sqrt()) * ab.sqrt()
}

fn channel(values: &[f64], coord: usize) -> DVector<f64> {
    DVector::from_iterator(N, (0..N).map(|k| values[k * 2 + coord]))
}

#[test]
fn predict_x0_matches_dense_oracle() {
    let schedule = DiffusionSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..20 {
        let mu: Vec<f64> = (0..2 * N).map(|i| (i as f64 * 0.7).sin() * 5.0 + trial as f64).collect();
        let den = GaussianPriorDenoiser::new(1, N, mu.clone()).unwrap();
        let x: Vec<f64> = (0..2 * N).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect();
        let xt = TrajectoryTensor::from_values(1, N, x.clone()).unwrap();
        for t in [1, 7, 25, 50] {
            let got = predict_x0(&xt, t, &schedule, &den).unwrap();
            for c in 0..2 {
                let want = dense_posterior_mean(&channel(&mu, c), &channel(&x, c), schedule.alpha_bar(t));
                let have = channel(&got.values, c);
                let err = (&have - &want).amax();
                assert!(err < 1e-8, "t={t} coord={c} err={err:e}");
            }
        }
    }
}

#[test]
fn centred_reference_gives_same_positions() {
    // (values v, reference r) at level t is the absolute state v + √ᾱ·r
    let schedule = DiffusionSchedule::default();
    let t = 20;
    let sab = schedule.alpha_bar(t).sqrt();
    let mu: Vec<f64> = (0..2 * N).map(|i| i as f64 * 1.3).collect();
    let den = GaussianPriorDenoiser::new(1, N, mu.clone()).unwrap();
    let v: Vec<f64> = (0..2 * N).map(|i| (i as f64).cos()).collect();
    let mut centred = TrajectoryTensor::from_values(1, N, v.clone()).unwrap();
    centred.reference = mu.clone();
    let absolute = TrajectoryTensor::from_values(1, N, v.iter().zip(&mu).map(|(a, r)| a + sab * r).collect()).unwrap();
    let a = predict_x0(&absolute, t, &schedule, &den).unwrap().decoded();
    let b = predict_x0(&centred, t, &schedule, &den).unwrap().decoded();
    for (p, q) in a.iter().zip(&b) {
        assert!((p - q).abs() < 1e-9, "{p} vs {q}");
    }
}

/// Draw from N(μ, P⁻¹) via the Cholesky factor of P.
fn prior_draw(l: &DMatrix<f64>, mu: &DVector<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let z = DVector::from_iterator(mu.len(), (0..mu.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    mu + l.transpose().solve_upper_triangular(&z).unwrap()
}

#[test]
fn posterior_mean_statistics() {
    // one channel: A = 1 with the y coordinate held at its mean
    let schedule = DiffusionSchedule::default();
    let t = 30;
    let p = dense_precision(N, DEFAULT_SMOOTHNESS, DEFAULT_RIDGE);
    let l = p.clone().cholesky().unwrap().l();
    let mu_x = DVector::from_iterator(N, (0..N).map(|k| k as f64));
    let mut mu = vec![0.0; 2 * N];
    for k in 0..N {
        mu[2 * k] = mu_x[k];
    }
    let den = GaussianPriorDenoiser::new(1, N, mu.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let draws = 10_000;
    let (mut sq_err, mut prior_trace) = (0.0, 0.0);
    let mut cross = vec![Vec::with_capacity(draws); N];
    for _ in 0..draws {
        let x0 = prior_draw(&l, &mu_x, &mut rng);
        let mut full = mu.clone();
        for k in 0..N {
            full[2 * k] = x0[k];
        }
        let clean = TrajectoryTensor::from_values(1, N, full).unwrap();
        let noise: Vec<f64> = (0..2 * N).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let xt = forward_noise(&clean, t, &schedule, &noise).unwrap();
        let est = channel(&predict_x0(&xt, t, &schedule, &den).unwrap().values, 0);
        let resid = &x0 - &est;
        sq_err += resid.norm_squared();
        prior_trace += (&x0 - &mu_x).norm_squared();
        for k in 0..N {
            // residual at k against the centred estimate at k
            cross[k].push(resid[k] * (est[k] - mu_x[k]));
        }
    }
    assert!(sq_err <= prior_trace, "mse {sq_err} above prior spread {prior_trace}");
    for (k, c) in cross.iter().enumerate() {
        let mean = c.iter().sum::<f64>() / draws as f64;
        let sd = (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt();
        let se = sd / (draws as f64).sqrt();
        assert!(mean.abs() <= 3.0 * se, "step {k}: E[r·x̂] = {mean} with se {se}");
    }
}

#[test]
fn reverse_chain_recovers_prior_mean() {
    let schedule = DiffusionSchedule::default();
    let steps = 12;
    let mu: Vec<f64> = (0..2 * steps).map(|i| if i % 2 == 0 { (i / 2) as f64 * 1.5 } else { 3.0 }).collect();
    let den = GaussianPriorDenoiser::new(1, steps, mu.clone()).unwrap();
    let mut template = TrajectoryTensor::zeros(1, steps);
    template.reference = mu.clone();
    let runs = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<Vec<f64>> =
        (0..runs).map(|_| sample(&template, &den, &schedule, &mut rng).unwrap().decoded()).collect();
    for i in 0..mu.len() {
        let mean = samples.iter().map(|s| s[i]).sum::<f64>() / runs as f64;
        let sd = (samples.iter().map(|s| (s[i] - mean).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt();
        assert!((mean - mu[i]).abs() <= 3.0 * sd / (runs as f64).sqrt(), "coord {i}: {mean} vs {}", mu[i]);
    }
}

#[test]
fn masked_entries_survive_every_operation() {
    let schedule = make_schedule(10, 1e-4, 0.1).unwrap();
    let den = GaussianPriorDenoiser::new(1, N, vec![0.0; 2 * N]).unwrap();
    let mut x = TrajectoryTensor::zeros(1, N);
    x.condition(0, 1.25);
    x.condition(1, -0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise: Vec<f64> = (0..2 * N).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let mut xt = forward_noise(&x, 10, &schedule, &noise).unwrap();
    for t in (1..=10).rev() {
        assert_eq!((xt.values[0], xt.values[1]), (1.25, -0.5));
        let x0 = predict_x0(&xt, t, &schedule, &den).unwrap();
        assert_eq!((x0.values[0], x0.values[1]), (1.25, -0.5));
        xt = reverse_step(&xt, t, &x0, &schedule, &mut rng).unwrap();
    }
    assert_eq!((xt.values[0], xt.values[1]), (1.25, -0.5));
}

proptest! {
    #[test]
    fn posterior_coefficients_are_affine(t in 1usize..=50) {
        let s = DiffusionSchedule::default();
        let (c0, ct, var) = s.posterior(t);
        // x̂0 = x_t/√ᾱ_t must be a fixed point of the mean in scaled form
        prop_assert!((c0 + ct * s.alpha_bar(t).sqrt() - s.alpha_bar(t - 1).sqrt()).abs() < 1e-12);
        prop_assert!(var >= 0.0 && var <= s.beta(t));
    }

    #[test]
    fn alpha_bar_strictly_decreasing(steps in 1usize..200, lo in 1e-5f64..0.05, span in 0.0f64..0.5) {
        let s = make_schedule(steps, lo, lo + span).unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
    }

    #[test]
    fn prediction_at_prior_mean_is_prior_mean(seed in 0u64..1000, t in 1usize..=50) {
        let s = DiffusionSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mu: Vec<f64> = (0..2 * N).map(|_| rng.random_range(-20.0..20.0)).collect();
        let den = GaussianPriorDenoiser::new(1, N, mu.clone()).unwrap();
        let xt = TrajectoryTensor::from_values(1, N, mu.iter().map(|m| m * s.alpha_bar(t).sqrt()).collect()).unwrap();
        let x0 = predict_x0(&xt, t, &s, &den).unwrap();
        for (a, b) in x0.values.iter().zip(&mu) {
            prop_assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()));
        }
    }
}
