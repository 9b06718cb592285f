//! Image similarity metrics on `[0, 1]` images `(C, H, W)`.

use candle_core::Tensor;

use crate::error::{bail_arg, Result};

const K1: f64 = 0.01;
const K2: f64 = 0.03;
const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Planar image data for the metric kernels.
#[derive(Debug, Clone)]
pub struct Planes {
    pub data: Vec<f64>,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Planes {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        let data = t.flatten_all()?.to_vec1::<f32>()?.into_iter().map(f64::from).collect();
        Ok(Self { data, c, h, w })
    }

    fn plane(&self, ch: usize) -> &[f64] {
        &self.data[ch * self.h * self.w..(ch + 1) * self.h * self.w]
    }

    /// 2x2 average pooling (odd trailing rows/columns dropped).
    fn downsample(&self) -> Self {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut data = Vec::with_capacity(self.c * h * w);
        for ch in 0..self.c {
            let p = self.plane(ch);
            for y in 0..h {
                for x in 0..w {
                    let s = p[2 * y * self.w + 2 * x]
                        + p[2 * y * self.w + 2 * x + 1]
                        + p[(2 * y + 1) * self.w + 2 * x]
                        + p[(2 * y + 1) * self.w + 2 * x + 1];
                    data.push(s / 4.0);
                }
            }
        }
        Self { data, c: self.c, h, w }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid separable filtering of one plane.
fn filter(p: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM and mean contrast-structure term over all channels.
fn ssim_terms(a: &Planes, b: &Planes) -> (f64, f64) {
    let size = 11.min(a.h).min(a.w);
    let k = gaussian_window(size, 1.5);
    let c1 = (K1 * 1.0).powi(2);
    let c2 = (K2 * 1.0).powi(2);
    let (mut ssim_sum, mut cs_sum, mut count) = (0f64, 0f64, 0usize);
    for ch in 0..a.c {
        let (pa, pb) = (a.plane(ch), b.plane(ch));
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { pa.iter().zip(pb).map(|(x, y)| f(*x, *y)).collect() };
        let (mu_a, _, _) = filter(pa, a.h, a.w, &k);
        let (mu_b, _, _) = filter(pb, a.h, a.w, &k);
        let (aa, _, _) = filter(&prod(&|x, _| x * x), a.h, a.w, &k);
        let (bb, _, _) = filter(&prod(&|_, y| y * y), a.h, a.w, &k);
        let (ab, _, _) = filter(&prod(&|x, y| x * y), a.h, a.w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            let cs = (2.0 * cov + c2) / (va + vb + c2);
            let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            ssim_sum += l * cs;
            cs_sum += cs;
            count += 1;
        }
    }
    (ssim_sum / count as f64, cs_sum / count as f64)
}

fn check(a: &Planes, b: &Planes) -> Result<()> {
    if (a.c, a.h, a.w) != (b.c, b.h, b.w) {
        bail_arg!("image shapes ({}, {}, {}) and ({}, {}, {}) differ", a.c, a.h, a.w, b.c, b.h, b.w);
    }
    Ok(())
}

/// SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (pa, pb) = (Planes::from_tensor(a)?, Planes::from_tensor(b)?);
    check(&pa, &pb)?;
    Ok(ssim_terms(&pa, &pb).0)
}

/// Five-scale MS-SSIM with the standard weights.
///
/// At 32x32 the coarser scales are smaller than the 11-pixel window, so the
/// window shrinks to the image side. Negative contrast-structure terms are
/// clamped at zero before exponentiation.
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (mut pa, mut pb) = (Planes::from_tensor(a)?, Planes::from_tensor(b)?);
    check(&pa, &pb)?;
    if pa.h < 16 || pa.w < 16 {
        bail_arg!("MS-SSIM needs images of at least 16x16");
    }
    let mut out = 1f64;
    for (level, w) in MS_WEIGHTS.iter().enumerate() {
        let (s, cs) = ssim_terms(&pa, &pb);
        if level + 1 == MS_WEIGHTS.len() {
            out *= s.max(0.0).powf(*w);
        } else {
            out *= cs.max(0.0).powf(*w);
            pa = pa.downsample();
            pb = pb.downsample();
        }
    }
    Ok(out)
}

pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (pa, pb) = (Planes::from_tensor(a)?, Planes::from_tensor(b)?);
    check(&pa, &pb)?;
    let mse = pa.data.iter().zip(&pb.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / pa.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}
