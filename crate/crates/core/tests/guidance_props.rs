mod common;

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use common::*;
use proptest::prelude::*;
use steerlab::editing::guided_eps;
use steerlab::guidance::{
    adain, guided_epsilon, invert_and_cache, patchnce, patchnce_layer, FeatureCache, GuidanceConfig,
};
use steerlab::prompt::Vocab;
use steerlab::rng;
use steerlab::schedule::{forward_diffuse, tweedie_denoise, LatentState};
use steerlab::steer::perturb_latent;

fn features(seed: u64, s: usize, c: usize) -> Tensor {
    let mut r = rng::rng_from(seed);
    randn(&mut r, &[s, c], DType::F64)
}

#[test]
fn orthonormal_pair_has_the_hand_computed_value() {
    let h = Tensor::from_vec(vec![1f64, 0., 0., 1.], (2, 2), &Device::Cpu).unwrap();
    let v = scalar(&patchnce_layer(&h, &h, 1.0).unwrap());
    let want = 2.0 * (1.0 + (-1f64).exp()).ln();
    assert!((v - want).abs() < 1e-6, "{v} vs {want}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn patchnce_is_nonnegative(seed in any::<u64>(), s in 1usize..20, c in 1usize..8, tau in 0.02f64..2.0) {
        let v = scalar(&patchnce_layer(&features(seed, s, c), &features(seed ^ 1, s, c), tau).unwrap());
        prop_assert!(v >= -1e-9, "{}", v);
    }

    #[test]
    fn patchnce_ignores_a_shared_permutation_of_locations(seed in any::<u64>(), s in 2usize..16) {
        let h = features(seed, s, 4);
        let g = features(seed.wrapping_add(7), s, 4);
        let mut perm: Vec<u32> = (0..s as u32).collect();
        let mut r = rng::rng_from(seed);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let idx = Tensor::from_vec(perm, s, &Device::Cpu).unwrap();
        let a = scalar(&patchnce_layer(&h, &g, 0.07).unwrap());
        let b = scalar(&patchnce_layer(&h.index_select(&idx, 0).unwrap(), &g.index_select(&idx, 0).unwrap(), 0.07).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn adain_output_takes_the_reference_statistics(seed in any::<u64>(), scale in 0.1f64..5.0, shift in -2.0f64..2.0) {
        let mut r = rng::rng_from(seed);
        let x = randn(&mut r, &[3, 6, 6], DType::F64);
        let reference = (randn(&mut r, &[3, 6, 6], DType::F64) * scale).unwrap().affine(1.0, shift).unwrap();
        let out = adain(&x, &reference).unwrap();
        for c in 0..3 {
            let stat = |t: &Tensor| {
                let v = vec64(&t.get(c).unwrap());
                let m = v.iter().sum::<f64>() / v.len() as f64;
                (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt())
            };
            let (ma, sa) = stat(&out);
            let (mb, sb) = stat(&reference);
            prop_assert!((ma - mb).abs() < 1e-5 && (sa - sb).abs() < 1e-5);
        }
    }
}

#[test]
fn patchnce_sums_over_layers() {
    let mut h = BTreeMap::new();
    let mut g = BTreeMap::new();
    for (i, l) in ["a", "b"].iter().enumerate() {
        h.insert(l.to_string(), features(i as u64, 5, 3));
        g.insert(l.to_string(), features(10 + i as u64, 5, 3));
    }
    let total = scalar(&patchnce(&h, &g, 0.5).unwrap());
    let parts: f64 = ["a", "b"].iter().map(|l| scalar(&patchnce_layer(&h[*l], &g[*l], 0.5).unwrap())).sum();
    assert!((total - parts).abs() < 1e-12);
    g.remove("b");
    assert!(patchnce(&h, &g, 0.5).is_err());
}

#[test]
fn zero_lambda_is_bit_equal_to_plain_guidance() {
    let s = sched();
    let m = model(5, DType::F32);
    let v = Vocab::toy();
    let y_src = v.encode("photo of a kite on sand").unwrap();
    let y_ref = v.encode("photo of a [S] kite on sand").unwrap();
    let mut r = rng::rng_from(6);
    let src = (randn(&mut r, &[3, 32, 32], DType::F32) * 0.5).unwrap();
    let cfg = GuidanceConfig { lambda: 0.0, ..Default::default() };
    let inv = invert_and_cache(&m, &s, &src, &y_src, 1.0, &cfg.layers).unwrap();
    let x_t = LatentState::new(randn(&mut r, &[3, 32, 32], DType::F32), s.ddim_steps()[40]).unwrap();
    let a = guided_epsilon(&m, &s, &x_t, &y_ref, &inv.cache, &cfg).unwrap();
    let b = guided_eps(&m, &x_t, &y_ref, cfg.cfg_beta).unwrap();
    assert_eq!(vec64(&a), vec64(&b));
    // with guidance on, AdaIN keeps the per-channel statistics of the CFG prediction
    let on = GuidanceConfig { lambda: 15.0, ..cfg };
    let g = guided_epsilon(&m, &s, &x_t, &y_ref, &inv.cache, &on).unwrap();
    assert_ne!(vec64(&g), vec64(&b));
    for c in 0..3 {
        let mean = |t: &Tensor| vec64(&t.get(c).unwrap()).iter().sum::<f64>() / 1024.0;
        assert!((mean(&g) - mean(&b)).abs() < 1e-4);
    }
}

#[test]
fn inversion_caches_every_step_and_survives_a_round_trip_to_disk() {
    let s = sched();
    let m = model(7, DType::F32);
    let v = Vocab::toy();
    let y = v.encode("photo of a ball on brick").unwrap();
    let mut r = rng::rng_from(8);
    let src = (randn(&mut r, &[3, 32, 32], DType::F32) * 0.5).unwrap();
    let layers: Vec<String> = vec!["enc16.sa".into(), "dec16.sa".into()];
    let inv = invert_and_cache(&m, &s, &src, &y, 1.0, &layers).unwrap();
    assert_eq!(inv.x_t.t, s.t_max());
    assert_eq!(inv.trajectory.len(), 51);
    assert_eq!(inv.cache.timesteps(), s.ddim_steps().to_vec());
    for ((_, _), probs) in &inv.cache.ca {
        for row in probs.to_vec2::<f32>().unwrap() {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cache.safetensors");
    inv.cache.save(&path).unwrap();
    let back = FeatureCache::load(&path).unwrap();
    assert_eq!(back.prompt, inv.cache.prompt);
    assert_eq!(back.sa.len(), inv.cache.sa.len());
    for (k, t) in &inv.cache.sa {
        assert_eq!(vec64(&back.sa[k]), vec64(t));
    }
    assert!(inv.cache.sa_at(123, &layers).is_err());
}

#[test]
fn perturbed_latent_equals_renoised_tweedie_estimate() {
    let s = sched();
    let m = model(9, DType::F64);
    let v = Vocab::toy();
    let y_ref = v.encode("photo of a [S] cross").unwrap();
    let mut r = rng::rng_from(10);
    for t in [30usize, 400, 900] {
        let x0 = LatentState::clean((randn(&mut r, &[3, 32, 32], DType::F64) * 0.5).unwrap()).unwrap();
        let eps = randn(&mut r, &[3, 32, 32], DType::F64);
        let x_t = forward_diffuse(&s, &x0, t, &eps).unwrap();
        let hat = perturb_latent(&m, &s, &x_t, &y_ref, &eps).unwrap();
        let pred = m.denoise(&x_t, &y_ref, None).unwrap();
        let x0_hat = tweedie_denoise(&s, &x_t, &pred).unwrap();
        let renoised = forward_diffuse(&s, &x0_hat, t, &eps).unwrap();
        assert!(max_abs_diff(&hat.data, &renoised.data) < 1e-6, "t={t}");
        assert_eq!(hat.t, t);
    }
}
