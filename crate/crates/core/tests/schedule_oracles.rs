mod common;

use candle_core::{DType, Device, Tensor};
use common::*;
use proptest::prelude::*;
use steerlab::prompt::{Prompt, Vocab};
use steerlab::rng;
use steerlab::schedule::{
    cfg_combine, cfg_predict, ddim_invert_step, ddim_step, forward_diffuse, sample, sample_trajectory,
    tweedie_denoise, EtaSchedule, LatentState, NoisePredictor, SampleOptions,
};

/// Predicts zero noise everywhere.
struct Zero;

impl NoisePredictor for Zero {
    fn predict(&self, x_t: &Tensor, _: &Prompt, _: usize) -> steerlab::Result<Tensor> {
        Ok(x_t.zeros_like()?)
    }
}

/// Deterministic but prompt- and time-dependent predictor for plumbing checks.
struct Wobble;

impl NoisePredictor for Wobble {
    fn predict(&self, x_t: &Tensor, y: &Prompt, t: usize) -> steerlab::Result<Tensor> {
        let k = 0.1 + 0.01 * y.tokens().iter().sum::<u32>() as f64 + t as f64 * 1e-4;
        Ok((x_t.sin()? * k)?)
    }
}

fn tensor(v: Vec<f64>, dims: &[usize]) -> Tensor {
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn inversion_then_sampling_with_shared_predictions_is_identity(seed in any::<u64>()) {
        let s = sched();
        let mut r = rng::rng_from(seed);
        let x0 = randn(&mut r, &[3, 8, 8], DType::F64);
        let preds: Vec<Tensor> = s.inversion_pairs().iter().map(|_| randn(&mut r, &[3, 8, 8], DType::F64)).collect();
        let mut x = LatentState::clean(x0.clone()).unwrap();
        for ((_, t_next), e) in s.inversion_pairs().into_iter().zip(&preds) {
            x = ddim_invert_step(&s, &x, e, t_next).unwrap();
        }
        for ((_, t_prev), e) in s.sampling_pairs().into_iter().zip(preds.iter().rev()) {
            x = ddim_step(&s, &x, e, t_prev, 0.0, None).unwrap();
        }
        prop_assert_eq!(x.t, 0);
        let err = rel_err(&x.data, &x0);
        prop_assert!(err < 1e-5, "relative error {}", err);
    }

    #[test]
    fn single_invert_step_is_undone_by_ddim_step(seed in any::<u64>(), i in 0usize..49) {
        let s = sched();
        let mut r = rng::rng_from(seed);
        let (t, t_next) = (s.ddim_steps()[i], s.ddim_steps()[i + 1]);
        let x = LatentState::new(randn(&mut r, &[3, 4, 4], DType::F64), t).unwrap();
        let e = randn(&mut r, &[3, 4, 4], DType::F64);
        let up = ddim_invert_step(&s, &x, &e, t_next).unwrap();
        let back = ddim_step(&s, &up, &e, t, 0.0, None).unwrap();
        prop_assert!(rel_err(&back.data, &x.data) < 1e-5);
    }

    #[test]
    fn tweedie_of_forward_with_true_noise_is_identity(seed in any::<u64>(), t in 1usize..=1000) {
        let s = sched();
        let mut r = rng::rng_from(seed);
        let x0 = LatentState::clean(randn(&mut r, &[3, 4, 4], DType::F64)).unwrap();
        let eps = randn(&mut r, &[3, 4, 4], DType::F64);
        let x_t = forward_diffuse(&s, &x0, t, &eps).unwrap();
        let back = tweedie_denoise(&s, &x_t, &eps).unwrap();
        prop_assert!(max_abs_diff(&back.data, &x0.data) < 1e-9);
    }

    #[test]
    fn exact_noise_step_lands_on_the_forward_marginal(seed in any::<u64>(), i in 0usize..50) {
        let s = sched();
        let mut r = rng::rng_from(seed);
        let (t, t_prev) = s.sampling_pairs()[i];
        let x0 = LatentState::clean(randn(&mut r, &[3, 4, 4], DType::F64)).unwrap();
        let eps = randn(&mut r, &[3, 4, 4], DType::F64);
        let x_t = forward_diffuse(&s, &x0, t, &eps).unwrap();
        let stepped = ddim_step(&s, &x_t, &eps, t_prev, 0.0, None).unwrap();
        let direct = forward_diffuse(&s, &x0, t_prev, &eps).unwrap();
        prop_assert!(max_abs_diff(&stepped.data, &direct.data) < 1e-9);
    }

    #[test]
    fn cfg_is_affine_in_beta(seed in any::<u64>(), beta in -2.0f64..8.0) {
        let mut r = rng::rng_from(seed);
        let cond = randn(&mut r, &[3, 4, 4], DType::F64);
        let uncond = randn(&mut r, &[3, 4, 4], DType::F64);
        let got = cfg_combine(&cond, &uncond, beta).unwrap();
        let want = (&cond + ((&cond - &uncond).unwrap() * (beta - 1.0)).unwrap()).unwrap();
        prop_assert!(max_abs_diff(&got, &want) < 1e-12);
    }
}

#[test]
fn cfg_predict_matches_two_call_reference() {
    let v = Vocab::toy();
    let y = v.encode("photo of a box").unwrap();
    let mut r = rng::rng_from(3);
    let x = randn(&mut r, &[3, 4, 4], DType::F64);
    let cond = Wobble.predict(&x, &y, 300).unwrap();
    let uncond = Wobble.predict(&x, &Prompt::null(), 300).unwrap();
    assert_eq!(vec64(&cfg_predict(&Wobble, &x, &y, 300, 1.0, None).unwrap()), vec64(&cond));
    assert_eq!(vec64(&cfg_predict(&Wobble, &x, &y, 300, 0.0, None).unwrap()), vec64(&uncond));
    let want = ((&cond * 3.5).unwrap() - (&uncond * 2.5).unwrap()).unwrap();
    let got = cfg_predict(&Wobble, &x, &y, 300, 3.5, None).unwrap();
    assert!(max_abs_diff(&got, &want) < 1e-12);
}

#[test]
fn forward_marginal_matches_monte_carlo_within_three_standard_errors() {
    let s = sched();
    let n = 10_000;
    let x0 = [0.8f64, -0.3, 0.0, 1.5];
    let mut r = rng::rng_from(9);
    for t in [1usize, 250, 600, 1000] {
        let tiled: Vec<f64> = (0..n).flat_map(|_| x0).collect();
        let x0t = LatentState::clean(tensor(tiled, &[n, 4])).unwrap();
        let eps = randn(&mut r, &[n, 4], DType::F64);
        let x_t = vec64(&forward_diffuse(&s, &x0t, t, &eps).unwrap().data);
        let a = s.alpha_bar(t);
        let var = 1.0 - a;
        for (j, &x) in x0.iter().enumerate() {
            let col: Vec<f64> = (0..n).map(|i| x_t[i * 4 + j]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let v = col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se_mean = (var / n as f64).sqrt();
            let se_var = var * (2.0 / (n - 1) as f64).sqrt();
            assert!((mean - a.sqrt() * x).abs() < 3.0 * se_mean, "t={t} coord {j}: mean {mean}");
            assert!((v - var).abs() < 3.0 * se_var, "t={t} coord {j}: variance {v} vs {var}");
        }
    }
}

#[test]
fn ancestral_noise_variance_matches_sigma() {
    let s = sched();
    let n = 10_000;
    let mut r = rng::rng_from(10);
    for (t, t_prev) in [(981usize, 961usize), (501, 481), (21, 1)] {
        let x = LatentState::new(tensor(vec![0.4; n], &[n]), t).unwrap();
        let e = tensor(vec![-0.2; n], &[n]);
        let noise = randn(&mut r, &[n], DType::F64);
        let out = vec64(&ddim_step(&s, &x, &e, t_prev, 1.0, Some(&noise)).unwrap().data);
        let mean = out.iter().sum::<f64>() / n as f64;
        let v = out.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want = s.ddim_sigma(t, t_prev, 1.0).powi(2);
        let se = want * (2.0 / (n - 1) as f64).sqrt();
        assert!((v - want).abs() < 3.0 * se, "{t}->{t_prev}: {v} vs {want}");
    }
}

#[test]
fn gaussian_tweedie_equals_posterior_mean() {
    let s = sched();
    let (mu, sd) = (0.3f64, 0.7f64);
    let mut r = rng::rng_from(11);
    for t in [5usize, 200, 700, 1000] {
        let a = s.alpha_bar(t);
        let x_t = randn(&mut r, &[64], DType::F64);
        let xs = vec64(&x_t);
        let denom = a * sd * sd + 1.0 - a;
        // Bayes-optimal noise prediction E[eps | x_t] for x0 ~ N(mu, sd^2)
        let eps: Vec<f64> = xs.iter().map(|x| (1.0 - a).sqrt() * (x - a.sqrt() * mu) / denom).collect();
        let post: Vec<f64> = xs.iter().map(|x| mu + sd * sd * a.sqrt() * (x - a.sqrt() * mu) / denom).collect();
        let got = tweedie_denoise(&s, &LatentState::new(x_t, t).unwrap(), &tensor(eps, &[64])).unwrap();
        let err = max_abs_diff(&got.data, &tensor(post, &[64]));
        assert!(err < 1e-6, "t={t}: {err}");
    }
}

#[test]
fn tweedie_near_zero_noise_stays_close_to_input() {
    let s = sched();
    let mut r = rng::rng_from(12);
    let x = LatentState::new(randn(&mut r, &[3, 4, 4], DType::F64), 1).unwrap();
    let e = randn(&mut r, &[3, 4, 4], DType::F64);
    let out = tweedie_denoise(&s, &x, &e).unwrap();
    let e_norm = vec64(&e).iter().map(|v| v * v).sum::<f64>().sqrt();
    let bound = s.sigma(1) * e_norm / s.alpha_bar(1).sqrt() + (1.0 / s.alpha_bar(1).sqrt() - 1.0) * 10.0;
    assert!(max_abs_diff(&out.data, &x.data) <= bound);
}

#[test]
fn zero_predictor_sampling_is_pure_rescaling() {
    let s = sched();
    let mut r = rng::rng_from(13);
    let x_t = randn(&mut r, &[3, 4, 4], DType::F64);
    let opts = SampleOptions { beta: 1.0, ..Default::default() };
    let out = sample(&Zero, &s, &Prompt::null(), LatentState::new(x_t.clone(), s.t_max()).unwrap(), &opts, None).unwrap();
    let want = (x_t / s.alpha_bar(s.t_max()).sqrt()).unwrap();
    assert!(rel_err(&out.data, &want) < 1e-9);
}

#[test]
fn eta_switch_leaves_the_ode_prefix_alone() {
    let s = sched();
    let v = Vocab::toy();
    let y = v.encode("photo of a kite").unwrap();
    let mut r = rng::rng_from(14);
    let start = LatentState::new(randn(&mut r, &[3, 4, 4], DType::F64), s.t_max()).unwrap();
    let ode = SampleOptions { beta: 3.5, eta: EtaSchedule::Ode, uncond: None, seed: 5 };
    let switched = SampleOptions { eta: EtaSchedule::SwitchAfter { steps: 30, eta: 1.0 }, ..ode.clone() };
    let a = sample_trajectory(&Wobble, &s, &y, start.clone(), &ode, None).unwrap();
    let b = sample_trajectory(&Wobble, &s, &y, start.clone(), &switched, None).unwrap();
    for i in 0..=30 {
        assert_eq!(vec64(&a[i].data), vec64(&b[i].data), "state {i}");
    }
    assert_ne!(vec64(&a[50].data), vec64(&b[50].data));
    let again = sample_trajectory(&Wobble, &s, &y, start, &switched, None).unwrap();
    assert_eq!(vec64(&again[50].data), vec64(&b[50].data));
}

#[test]
fn identity_steps_and_range_errors() {
    let s = sched();
    let mut r = rng::rng_from(15);
    let x = LatentState::new(randn(&mut r, &[3, 2, 2], DType::F64), 41).unwrap();
    let e = randn(&mut r, &[3, 2, 2], DType::F64);
    assert_eq!(vec64(&ddim_step(&s, &x, &e, 41, 0.0, None).unwrap().data), vec64(&x.data));
    assert_eq!(vec64(&ddim_invert_step(&s, &x, &e, 41).unwrap().data), vec64(&x.data));
    assert!(ddim_invert_step(&s, &x, &e, 1001).is_err());
    assert!(tweedie_denoise(&s, &LatentState::clean(x.data.clone()).unwrap(), &e).is_err());
    assert!(LatentState::new(tensor(vec![f64::NAN], &[1]), 3).is_err());
}
