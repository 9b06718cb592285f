mod common;

use candle_core::{DType, Tensor};
use common::*;
use proptest::prelude::*;
use steerlab::denoiser::DenoiserParams;
use steerlab::editing::{
    dds_direction, dds_s_direction, dds_sm_direction, direction, run_edit, sds_direction, EditConfig, EditContext,
    EditVariant,
};
use steerlab::mask::SubjectMask;
use steerlab::prompt::{Prompt, Vocab};
use steerlab::rng;
use steerlab::schedule::NoiseSchedule;

struct Fixture {
    sched: NoiseSchedule,
    phi: DenoiserParams,
    phi0: DenoiserParams,
    y_ref: Prompt,
    y_src: Prompt,
    x_src: Tensor,
}

fn fixture() -> Fixture {
    let v = Vocab::toy();
    let mut r = rng::rng_from(77);
    Fixture {
        sched: sched(),
        phi: model(1, DType::F32),
        phi0: model(2, DType::F32),
        y_ref: v.encode("photo of a [S] box on snow").unwrap(),
        y_src: v.encode("photo of a box on snow").unwrap(),
        x_src: (randn(&mut r, &[3, 32, 32], DType::F32) * 0.5).unwrap(),
    }
}

impl Fixture {
    fn ctx<'a>(&'a self, phi: &'a DenoiserParams, target: &'a Prompt, beta: (f64, f64)) -> EditContext<'a> {
        EditContext {
            sched: &self.sched,
            phi,
            phi0: &self.phi0,
            target_prompt: target,
            source_prompt: &self.y_src,
            x_src: &self.x_src,
            target_beta: beta.0,
            source_beta: beta.1,
        }
    }
}

fn draw(seed: u64) -> (usize, Tensor) {
    let mut r = rng::rng_from(seed);
    (rng::uniform_step(&mut r, 50, 950), rng::randn(&mut r, &[3, 32, 32]).unwrap())
}

#[test]
fn dds_is_exactly_zero_at_identity() {
    let f = fixture();
    for beta in [1.0, 3.5] {
        let ctx = f.ctx(&f.phi, &f.y_src, (beta, beta));
        for seed in 0..3 {
            let (t, eps) = draw(seed);
            let d = dds_direction(&ctx, &f.x_src, t, &eps).unwrap();
            assert!(vec64(&d).iter().all(|v| *v == 0.0), "beta {beta} seed {seed}");
        }
    }
}

#[test]
fn dds_is_the_difference_of_two_sds_branches() {
    let f = fixture();
    let ctx = f.ctx(&f.phi, &f.y_ref, (3.5, 1.0));
    let mut r = rng::rng_from(5);
    let theta = (&f.x_src + (randn(&mut r, &[3, 32, 32], DType::F32) * 0.1).unwrap()).unwrap();
    let (t, eps) = draw(9);
    let d = dds_direction(&ctx, &theta, t, &eps).unwrap();
    let a = sds_direction(&f.phi, &f.sched, &theta, &f.y_ref, 3.5, t, &eps).unwrap();
    let b = sds_direction(&f.phi, &f.sched, &f.x_src, &f.y_src, 1.0, t, &eps).unwrap();
    assert!(max_abs_diff(&d, &(a - b).unwrap()) < 1e-5);
}

#[test]
fn the_direction_lattice_collapses() {
    let f = fixture();
    let (t, eps) = draw(3);
    let theta = (&f.x_src * 0.9).unwrap();
    // phi = phi0: the frozen source branch is the same model
    let ctx = EditContext { phi0: &f.phi, ..f.ctx(&f.phi, &f.y_ref, (3.5, 1.0)) };
    let dds = dds_direction(&ctx, &theta, t, &eps).unwrap();
    let dds_s = dds_s_direction(&ctx, &theta, t, &eps).unwrap();
    let ones = SubjectMask::constant(1.0, 32, 32);
    let dds_sm = dds_sm_direction(&ctx, &theta, t, &eps, &ones).unwrap();
    assert_eq!(vec64(&dds), vec64(&dds_s));
    assert_eq!(vec64(&dds_s), vec64(&dds_sm));
    let zeros = SubjectMask::constant(0.0, 32, 32);
    let none = dds_sm_direction(&ctx, &theta, t, &eps, &zeros).unwrap();
    assert!(vec64(&none).iter().all(|v| *v == 0.0));
    // and with a distinct phi0 only the source branch changes
    let ctx = f.ctx(&f.phi, &f.y_ref, (3.5, 1.0));
    assert_ne!(vec64(&dds_s_direction(&ctx, &theta, t, &eps).unwrap()), vec64(&dds));
}

#[test]
fn source_model_with_plain_prompt_gives_zero_at_identity() {
    let f = fixture();
    let ctx = EditContext { phi0: &f.phi0, ..f.ctx(&f.phi0, &f.y_src, (1.0, 1.0)) };
    let (t, eps) = draw(4);
    let d = dds_s_direction(&ctx, &f.x_src, t, &eps).unwrap();
    assert!(vec64(&d).iter().all(|v| *v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn masked_direction_vanishes_off_the_mask(seed in any::<u64>(), density in 0.1f64..0.9) {
        let f = fixture();
        let mut r = rng::rng_from(seed);
        let map: Vec<f32> = (0..32 * 32)
            .map(|_| if rand::Rng::random_bool(&mut r, density) { rand::Rng::random_range(&mut r, 0.0..=1.0) } else { 0.0 })
            .collect();
        let mask = SubjectMask { map: map.clone(), ..SubjectMask::constant(0.0, 32, 32) };
        let ctx = f.ctx(&f.phi, &f.y_ref, (3.5, 1.0));
        let (t, eps) = draw(seed);
        let d = vec64(&dds_sm_direction(&ctx, &f.x_src, t, &eps, &mask).unwrap());
        for c in 0..3 {
            for (i, m) in map.iter().enumerate() {
                if *m == 0.0 {
                    prop_assert_eq!(d[c * 1024 + i], 0.0);
                }
            }
        }
    }
}

#[test]
fn mask_values_outside_unit_range_are_rejected() {
    let f = fixture();
    let ctx = f.ctx(&f.phi, &f.y_ref, (3.5, 1.0));
    let (t, eps) = draw(1);
    let bad = SubjectMask::constant(1.5, 32, 32);
    assert!(dds_sm_direction(&ctx, &f.x_src, t, &eps, &bad).is_err());
    let wrong = SubjectMask::constant(1.0, 16, 16);
    assert!(dds_sm_direction(&ctx, &f.x_src, t, &eps, &wrong).is_err());
    assert!(direction(&ctx, EditVariant::DdsSm, &f.x_src, t, &eps, None).is_err());
}

#[test]
fn edit_loop_is_deterministic_and_zero_steps_is_identity() {
    let f = fixture();
    let ctx = f.ctx(&f.phi, &f.y_ref, (3.5, 1.0));
    let none = run_edit(&ctx, &EditConfig { n_steps: 0, ..Default::default() }, None).unwrap();
    assert_eq!(vec64(&none.theta), vec64(&f.x_src));
    assert!(none.trace.is_empty());
    let cfg = EditConfig { n_steps: 4, variant: EditVariant::DdsS, seed: 3, ..Default::default() };
    let a = run_edit(&ctx, &cfg, None).unwrap();
    let b = run_edit(&ctx, &cfg, None).unwrap();
    assert_eq!(vec64(&a.theta), vec64(&b.theta));
    assert_eq!(a.trace.len(), 4);
    assert!(a.trace.iter().all(|r| (r.theta_delta_norm - 2.0 * r.direction_norm).abs() < 1e-3 * r.direction_norm.max(1.0)));
    let zero_mask = SubjectMask::constant(0.0, 32, 32);
    let frozen = run_edit(&ctx, &EditConfig { n_steps: 3, ..Default::default() }, Some(&zero_mask)).unwrap();
    assert_eq!(vec64(&frozen.theta), vec64(&f.x_src));
}

#[test]
fn edit_config_ranges_are_checked() {
    let f = fixture();
    let ctx = f.ctx(&f.phi, &f.y_ref, (3.5, 1.0));
    for range in [(0, 10), (20, 10), (1, 1001)] {
        let cfg = EditConfig { n_steps: 1, t_range: range, ..Default::default() };
        assert!(run_edit(&ctx, &cfg, None).is_err(), "{range:?}");
    }
    assert!(EditVariant::parse("dds_sm").is_ok());
    assert!(EditVariant::parse("ddx").is_err());
}
