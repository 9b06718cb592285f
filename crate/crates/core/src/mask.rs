//! Soft subject masks from averaged cross-attention maps.

use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::denoiser::DECODER_CA_LAYERS;
use crate::error::{bail_arg, Result};
use crate::guidance::FeatureCache;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskProvenance {
    pub layers: Vec<String>,
    pub timesteps: Vec<usize>,
}

/// `H x W` map in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectMask {
    pub map: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub source_token: u32,
    pub provenance: MaskProvenance,
}

impl SubjectMask {
    /// A mask with every value set to `value`.
    pub fn constant(value: f32, height: usize, width: usize) -> Self {
        Self {
            map: vec![value; height * width],
            height,
            width,
            source_token: 0,
            provenance: MaskProvenance {
                layers: vec![],
                timesteps: vec![],
            },
        }
    }

    pub fn tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.map.clone(), (self.height, self.width), &Device::Cpu)?)
    }

    pub fn check_range(&self) -> Result<()> {
        if let Some(v) = self.map.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail_arg!("mask value {v} outside [0, 1]");
        }
        Ok(())
    }

    pub fn binary(&self, threshold: f32) -> Vec<bool> {
        self.map.iter().map(|&v| v > threshold).collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        crate::image_io::save_gray16_png(&self.map, self.height, self.width, path)
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn bilinear_resize(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f32> {
    let mut out = vec![0f32; dh * dw];
    let coord = |i: usize, s: usize, d: usize| -> (usize, usize, f32) {
        let f = ((i as f32 + 0.5) * s as f32 / d as f32 - 0.5).max(0.0);
        let i0 = (f.floor() as usize).min(s - 1);
        let i1 = (i0 + 1).min(s - 1);
        (i0, i1, f - i0 as f32)
    };
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, sh, dh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, sw, dw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bot = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out[y * dw + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Min-max rescale into `[0, 1]`; a constant input maps to all ones.
pub fn min_max(values: &[f32]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![1.0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
}

/// Elementwise mean of equally sized maps.
pub fn average_maps(maps: &[Vec<f32>]) -> Vec<f32> {
    let n = maps.first().map_or(0, Vec::len);
    let mut acc = vec![0f64; n];
    for m in maps {
        for (a, v) in acc.iter_mut().zip(m) {
            *a += *v as f64;
        }
    }
    acc.iter().map(|a| (a / maps.len() as f64) as f32).collect()
}

/// Averages the source token's cross-attention maps over layers and timesteps.
///
/// Each map is first resized to the image grid so that layers of different
/// resolution can be averaged. `window` restricts the timesteps used.
pub fn extract_subject_mask(
    cache: &FeatureCache,
    source_token: u32,
    layers: &[String],
    image_shape: (usize, usize),
    window: Option<(usize, usize)>,
) -> Result<SubjectMask> {
    let prompt = cache
        .prompt
        .as_ref()
        .ok_or_else(|| crate::LabError::InvalidState("cache holds no prompt".into()))?;
    let Some(pos) = prompt.position_of(source_token) else {
        bail_arg!("token {source_token} does not occur in the cached prompt");
    };
    let (h, w) = image_shape;
    let mut maps = Vec::new();
    let mut timesteps = Vec::new();
    for ((t, layer), probs) in &cache.ca {
        if !layers.contains(layer) {
            continue;
        }
        if let Some((lo, hi)) = window {
            if *t < lo || *t > hi {
                continue;
            }
        }
        let (s, _) = probs.dims2()?;
        let side = (s as f64).sqrt() as usize;
        if side * side != s {
            bail_arg!("layer {layer} has a non-square map of {s} positions");
        }
        let col: Vec<f32> = probs.narrow(1, pos, 1)?.flatten_all()?.to_vec1()?;
        maps.push(bilinear_resize(&col, side, side, h, w));
        if !timesteps.contains(t) {
            timesteps.push(*t);
        }
    }
    if maps.is_empty() {
        bail_arg!("no cross-attention maps for layers {layers:?}");
    }
    Ok(SubjectMask {
        map: min_max(&average_maps(&maps)),
        height: h,
        width: w,
        source_token,
        provenance: MaskProvenance {
            layers: layers.to_vec(),
            timesteps,
        },
    })
}

pub fn default_mask_layers() -> Vec<String> {
    DECODER_CA_LAYERS.iter().map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_maps_to_ones() {
        assert_eq!(min_max(&[0.3, 0.3, 0.3]), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let out = bilinear_resize(&[0.25; 4], 2, 2, 5, 5);
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn average_of_two() {
        let a = vec![0.0, 1.0, 0.5];
        let b = vec![1.0, 0.0, 0.25];
        assert_eq!(average_maps(&[a, b]), vec![0.5, 0.5, 0.375]);
    }
}
