#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use steerlab::denoiser::{ArchConfig, DenoiserParams};
use steerlab::prompt::Vocab;
use steerlab::rng::{self, LabRng};
use steerlab::schedule::{NoiseSchedule, ScheduleConfig};

pub fn sched() -> NoiseSchedule {
    NoiseSchedule::new(ScheduleConfig::default()).unwrap()
}

/// Small untrained model; f64 when finite differences need the precision.
pub fn model(seed: u64, dtype: DType) -> DenoiserParams {
    let v = Vocab::toy();
    let mut arch = ArchConfig::toy(v.len());
    arch.width = 16;
    let m = DenoiserParams::init(arch, v, seed).unwrap();
    m.to_dtype(dtype).unwrap()
}

pub fn randn(r: &mut LabRng, dims: &[usize], dtype: DType) -> Tensor {
    rng::randn(r, dims).unwrap().to_dtype(dtype).unwrap()
}

pub fn vec64(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    vec64(a).iter().zip(vec64(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let scale = vec64(b).iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
    max_abs_diff(a, b) / scale
}

/// Random `(name, flat index)` coordinates over the named parameters.
pub fn probe(params: &DenoiserParams, names: &[String], n: usize, r: &mut LabRng) -> Vec<(String, usize)> {
    (0..n)
        .map(|_| {
            let name = names[r.random_range(0..names.len())].clone();
            let len = params.get(&name).unwrap().elem_count();
            (name, r.random_range(0..len))
        })
        .collect()
}

/// Copy of `params` with one coordinate shifted by `h`.
pub fn nudged(params: &DenoiserParams, name: &str, index: usize, h: f64) -> DenoiserParams {
    let t = params.get(name).unwrap();
    let mut v = vec64(t);
    v[index] += h;
    let moved = Tensor::from_vec(v, t.dims(), &Device::Cpu).unwrap().to_dtype(t.dtype()).unwrap();
    let mut out = params.clone();
    out.set(name, moved).unwrap();
    out
}

/// Central differences of `f` at each probe coordinate.
pub fn finite_differences(
    params: &DenoiserParams,
    coords: &[(String, usize)],
    h: f64,
    f: impl Fn(&DenoiserParams) -> f64,
) -> Vec<f64> {
    coords
        .iter()
        .map(|(n, i)| (f(&nudged(params, n, *i, h)) - f(&nudged(params, n, *i, -h))) / (2.0 * h))
        .collect()
}

/// Relative error between two gradient probes, measured on the probe vector.
pub fn probe_rel_err(autodiff: &[f64], fd: &[f64]) -> f64 {
    let diff: f64 = autodiff.iter().zip(fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    diff / norm
}
