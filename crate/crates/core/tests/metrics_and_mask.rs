use std::collections::BTreeMap;

use candle_core::{Device, Tensor};
use proptest::prelude::*;
use steerlab::guidance::FeatureCache;
use steerlab::mask::{average_maps, bilinear_resize, extract_subject_mask, min_max};
use steerlab::metrics::{ms_ssim, psnr, ssim};
use steerlab::prompt::Vocab;
use steerlab::rng;

fn image(seed: u64, c: usize, h: usize, w: usize) -> Tensor {
    let mut r = rng::rng_from(seed);
    rng::randn(&mut r, &[c, h, w]).unwrap().affine(0.25, 0.5).unwrap().clamp(0f32, 1f32).unwrap()
}

/// SSIM of a single window covering the whole plane, written out directly.
fn one_window_ssim(a: &[f64], b: &[f64], side: usize) -> f64 {
    let c = (side as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..side).map(|i| (-((i as f64 - c).powi(2)) / 4.5).exp()).collect();
    let gs: f64 = g.iter().sum();
    let wgt = |i: usize| g[i / side] * g[i % side] / (gs * gs);
    let e = |f: &dyn Fn(usize) -> f64| (0..side * side).map(|i| wgt(i) * f(i)).sum::<f64>();
    let (ma, mb) = (e(&|i| a[i]), e(&|i| b[i]));
    let va = e(&|i| a[i] * a[i]) - ma * ma;
    let vb = e(&|i| b[i] * b[i]) - mb * mb;
    let cov = e(&|i| a[i] * b[i]) - ma * mb;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

#[test]
fn ssim_of_a_binary_image_and_its_negative_is_negative() {
    let pattern: Vec<f64> = (0..16).map(|i| if (i / 4 + i % 4) % 2 == 0 { 1.0 } else { 0.0 }).collect();
    let neg: Vec<f64> = pattern.iter().map(|v| 1.0 - v).collect();
    let to_t = |v: &[f64]| Tensor::from_vec(v.iter().map(|x| *x as f32).collect::<Vec<_>>(), (1, 4, 4), &Device::Cpu).unwrap();
    let got = ssim(&to_t(&pattern), &to_t(&neg)).unwrap();
    let want = one_window_ssim(&pattern, &neg, 4);
    assert!(got < 0.0, "{got}");
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn psnr_matches_its_definition() {
    let a = Tensor::full(0.5f32, (3, 8, 8), &Device::Cpu).unwrap();
    let b = Tensor::full(0.6f32, (3, 8, 8), &Device::Cpu).unwrap();
    let want = 10.0 * (1.0 / (0.1f64 * 0.1)).log10();
    assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn similarity_scores_are_bounded_and_symmetric(s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (image(s1, 3, 32, 32), image(s2, 3, 32, 32));
        let v = ssim(&a, &b).unwrap();
        let m = ms_ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&v));
        prop_assert!((0.0..=1.0).contains(&m));
        prop_assert!((v - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((m - ms_ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn min_max_output_lies_in_the_unit_interval(v in prop::collection::vec(-100f32..100f32, 1..64)) {
        let out = min_max(&v);
        prop_assert!(out.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn averaging_order_does_not_matter(seed in any::<u64>(), n in 1usize..6) {
        let mut r = rng::rng_from(seed);
        let maps: Vec<Vec<f32>> = (0..n).map(|_| rng::normal_vec(&mut r, 16)).collect();
        let mut rev = maps.clone();
        rev.reverse();
        let (a, b) = (average_maps(&maps), average_maps(&rev));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn upsampling_keeps_the_peak_in_place(i in 0usize..8, j in 0usize..8) {
        let mut src = vec![0f32; 64];
        src[i * 8 + j] = 1.0;
        let up = bilinear_resize(&src, 8, 8, 32, 32);
        let arg = up.iter().enumerate().fold((0, f32::MIN), |acc, (k, v)| if *v > acc.1 { (k, *v) } else { acc }).0;
        let (y, x) = ((arg / 32) as i64, (arg % 32) as i64);
        // nearest-neighbour block of the source pixel, widened by one pixel
        prop_assert!(y >= 4 * i as i64 - 1 && y <= 4 * i as i64 + 4, "row {} for {}", y, i);
        prop_assert!(x >= 4 * j as i64 - 1 && x <= 4 * j as i64 + 4, "col {} for {}", x, j);
    }
}

fn synthetic_cache(token_pos: usize, blob: (usize, usize)) -> FeatureCache {
    let v = Vocab::toy();
    let prompt = v.encode("photo of a box on grass").unwrap();
    let mut ca = BTreeMap::new();
    for (t, layer, side) in [(101usize, "dec8.ca", 8usize), (101, "dec16.ca", 16), (501, "dec16.ca", 16)] {
        let mut rows = Vec::new();
        for y in 0..side {
            for x in 0..side {
                let (cy, cx) = (blob.0 as f32 * side as f32 / 32.0, blob.1 as f32 * side as f32 / 32.0);
                let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                let hit = (-d2 / (side as f32)).exp();
                let mut row = vec![(1.0 - hit) / 7.0; 8];
                row[token_pos] = hit;
                let s: f32 = row.iter().sum();
                rows.extend(row.into_iter().map(|v| v / s));
            }
        }
        ca.insert((t, layer.to_string()), Tensor::from_vec(rows, (side * side, 8), &Device::Cpu).unwrap());
    }
    FeatureCache { prompt: Some(prompt), sa: BTreeMap::new(), ca }
}

#[test]
fn mask_follows_the_source_token_attention() {
    let v = Vocab::toy();
    let token = v.id("box").unwrap();
    let cache = synthetic_cache(3, (8, 24));
    let layers = vec!["dec8.ca".to_string(), "dec16.ca".to_string()];
    let m = extract_subject_mask(&cache, token, &layers, (32, 32), None).unwrap();
    assert!(m.map.iter().all(|x| (0.0..=1.0).contains(x)));
    let peak = m.map.iter().enumerate().fold((0, f32::MIN), |a, (k, v)| if *v > a.1 { (k, *v) } else { a }).0;
    let (y, x) = (peak / 32, peak % 32);
    assert!(y.abs_diff(8) <= 3 && x.abs_diff(24) <= 3, "peak at {y},{x}");
    assert_eq!(m.provenance.timesteps, vec![101, 501]);
    let early = extract_subject_mask(&cache, token, &layers, (32, 32), Some((0, 200))).unwrap();
    assert_eq!(early.provenance.timesteps, vec![101]);
    assert!(extract_subject_mask(&cache, v.id("ball").unwrap(), &layers, (32, 32), None).is_err());
    assert!(extract_subject_mask(&cache, token, &["enc8.ca".to_string()], (32, 32), None).is_err());
}
