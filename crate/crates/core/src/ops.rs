//! Channels-last building blocks with hand-written CPU kernels.
//!
//! Activations are `(B, H, W, C)`. A 3x3 convolution is an explicit patch
//! gather followed by one matmul; the gather and its adjoint are custom ops so
//! that both the forward and the backward pass stay on fast loops.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType, D};

use crate::error::Result;

fn contiguous<'a, T: WithDType>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("channels-last ops expect a contiguous input"),
    }
}

/// A single-input CPU kernel written once for every float type.
trait Kernel1 {
    fn run<T: WithDType>(&self, src: &[T], layout: &Layout) -> candle_core::Result<(Vec<T>, Shape)>;

    fn dispatch(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        match storage {
            CpuStorage::F32(v) => {
                let (out, shape) = self.run(contiguous(v, layout)?, layout)?;
                Ok((CpuStorage::F32(out), shape))
            }
            CpuStorage::F64(v) => {
                let (out, shape) = self.run(contiguous(v, layout)?, layout)?;
                Ok((CpuStorage::F64(out), shape))
            }
            _ => candle_core::bail!("channels-last ops expect f32 or f64"),
        }
    }
}

/// Two-input counterpart of [`Kernel1`]; both inputs share one dtype.
trait Kernel2 {
    fn run<T: WithDType>(&self, a: &[T], la: &Layout, b: &[T]) -> candle_core::Result<(Vec<T>, Shape)>;

    fn dispatch(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let (out, shape) = self.run(contiguous(a, l1)?, l1, contiguous(b, l2)?)?;
                Ok((CpuStorage::F32(out), shape))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let (out, shape) = self.run(contiguous(a, l1)?, l1, contiguous(b, l2)?)?;
                Ok((CpuStorage::F64(out), shape))
            }
            _ => candle_core::bail!("channels-last ops expect matching f32 or f64 inputs"),
        }
    }
}

/// `(B, H, W, C) -> (B, H*W, 9*C)`, zero padded, column order `(ky, kx, c)`.
struct Im2Col3x3;

/// Adjoint of [`Im2Col3x3`]: scatters `(B, H*W, 9*C)` back onto `(B, H, W, C)`.
struct Col2Im3x3 {
    h: usize,
    w: usize,
}

impl Kernel1 for Im2Col3x3 {
    fn run<T: WithDType>(&self, src: &[T], layout: &Layout) -> candle_core::Result<(Vec<T>, Shape)> {
        let (b, h, w, c) = layout.shape().dims4()?;
        let k = 9 * c;
        let mut out = vec![T::zero(); b * h * w * k];
        for bi in 0..b {
            let img = &src[bi * h * w * c..(bi + 1) * h * w * c];
            let dst = &mut out[bi * h * w * k..(bi + 1) * h * w * k];
            for y in 0..h {
                for x in 0..w {
                    let row = &mut dst[(y * w + x) * k..(y * w + x + 1) * k];
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = x as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let s = (sy as usize * w + sx as usize) * c;
                            let d = (ky * 3 + kx) * c;
                            row[d..d + c].copy_from_slice(&img[s..s + c]);
                        }
                    }
                }
            }
        }
        Ok((out, Shape::from((b, h * w, k))))
    }
}

impl CustomOp1 for Im2Col3x3 {
    fn name(&self) -> &'static str {
        "im2col3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        self.dispatch(storage, layout)
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, h, w, _) = arg.dims4()?;
        let g = grad_res.contiguous()?.apply_op1(Col2Im3x3 { h, w })?;
        Ok(Some(g))
    }
}

impl Kernel1 for Col2Im3x3 {
    fn run<T: WithDType>(&self, src: &[T], layout: &Layout) -> candle_core::Result<(Vec<T>, Shape)> {
        let (b, hw, k) = layout.shape().dims3()?;
        let (h, w) = (self.h, self.w);
        if hw != h * w || k % 9 != 0 {
            candle_core::bail!("col2im shape mismatch");
        }
        let c = k / 9;
        let mut out = vec![T::zero(); b * h * w * c];
        for bi in 0..b {
            let cols = &src[bi * hw * k..(bi + 1) * hw * k];
            let img = &mut out[bi * hw * c..(bi + 1) * hw * c];
            for y in 0..h {
                for x in 0..w {
                    let row = &cols[(y * w + x) * k..(y * w + x + 1) * k];
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = x as isize + kx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            let s = (sy as usize * w + sx as usize) * c;
                            let d = (ky * 3 + kx) * c;
                            for (o, v) in img[s..s + c].iter_mut().zip(&row[d..d + c]) {
                                *o += *v;
                            }
                        }
                    }
                }
            }
        }
        Ok((out, Shape::from((b, h, w, c))))
    }
}

impl CustomOp1 for Col2Im3x3 {
    fn name(&self) -> &'static str {
        "col2im3x3"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        self.dispatch(storage, layout)
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1(Im2Col3x3)?))
    }
}

/// Softmax over the last dimension.
struct SoftmaxLast;

/// `p * (g - sum(g * p))` rowwise, the softmax input gradient.
struct SoftmaxBwd;

impl Kernel1 for SoftmaxLast {
    fn run<T: WithDType>(&self, src: &[T], layout: &Layout) -> candle_core::Result<(Vec<T>, Shape)> {
        let n = layout.shape().dims().last().copied().unwrap_or(1);
        let mut out = vec![T::zero(); src.len()];
        for (row, dst) in src.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let m = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0f64;
            for (d, v) in dst.iter_mut().zip(row) {
                let e = (v.to_f64() - m).exp();
                sum += e;
                *d = T::from_f64(e);
            }
            let inv = T::from_f64(1.0 / sum);
            dst.iter_mut().for_each(|d| *d *= inv);
        }
        Ok((out, layout.shape().clone()))
    }
}

impl CustomOp1 for SoftmaxLast {
    fn name(&self) -> &'static str {
        "softmax-last"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        self.dispatch(storage, layout)
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(res.contiguous()?.apply_op2_no_bwd(&grad_res.contiguous()?, &SoftmaxBwd)?))
    }
}

impl Kernel2 for SoftmaxBwd {
    fn run<T: WithDType>(&self, p: &[T], lp: &Layout, g: &[T]) -> candle_core::Result<(Vec<T>, Shape)> {
        let n = lp.shape().dims().last().copied().unwrap_or(1);
        let mut out = vec![T::zero(); p.len()];
        for ((pr, gr), dst) in p.chunks_exact(n).zip(g.chunks_exact(n)).zip(out.chunks_exact_mut(n)) {
            let mut dot = T::zero();
            for (a, b) in pr.iter().zip(gr) {
                dot += *a * *b;
            }
            for ((d, a), b) in dst.iter_mut().zip(pr).zip(gr) {
                *d = *a * (*b - dot);
            }
        }
        Ok((out, lp.shape().clone()))
    }
}

impl CustomOp2 for SoftmaxBwd {
    fn name(&self) -> &'static str {
        "softmax-bwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        self.dispatch(s1, l1, s2, l2)
    }
}

/// Group standardization of `(B, S, C)` with channel groups of `C / groups`.
struct GroupStandardize {
    groups: usize,
}

/// Input gradient of [`GroupStandardize`] from `(x, grad)`.
struct GroupStandardizeBwd {
    groups: usize,
}

const GN_EPS: f64 = 1e-5;

/// Per (batch, group) mean and inverse std.
fn group_stats<T: WithDType>(x: &[T], b: usize, s: usize, c: usize, groups: usize) -> Vec<(f64, f64)> {
    let cg = c / groups;
    let mut stats = Vec::with_capacity(b * groups);
    for bi in 0..b {
        let img = &x[bi * s * c..(bi + 1) * s * c];
        for g in 0..groups {
            let (mut sum, mut sq) = (0f64, 0f64);
            for pos in 0..s {
                for v in &img[pos * c + g * cg..pos * c + (g + 1) * cg] {
                    let v = v.to_f64();
                    sum += v;
                    sq += v * v;
                }
            }
            let n = (s * cg) as f64;
            let mean = sum / n;
            let var = (sq / n - mean * mean).max(0.0);
            stats.push((mean, 1.0 / (var + GN_EPS).sqrt()));
        }
    }
    stats
}

impl Kernel1 for GroupStandardize {
    fn run<T: WithDType>(&self, x: &[T], layout: &Layout) -> candle_core::Result<(Vec<T>, Shape)> {
        let (b, s, c) = layout.shape().dims3()?;
        let cg = c / self.groups;
        let stats = group_stats(x, b, s, c, self.groups);
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for pos in 0..s {
                let base = (bi * s + pos) * c;
                for ch in 0..c {
                    let (m, inv) = stats[bi * self.groups + ch / cg];
                    out[base + ch] = T::from_f64((x[base + ch].to_f64() - m) * inv);
                }
            }
        }
        Ok((out, layout.shape().clone()))
    }
}

impl CustomOp1 for GroupStandardize {
    fn name(&self) -> &'static str {
        "group-standardize"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        self.dispatch(storage, layout)
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = arg
            .contiguous()?
            .apply_op2_no_bwd(&grad_res.contiguous()?, &GroupStandardizeBwd { groups: self.groups })?;
        Ok(Some(g))
    }
}

impl Kernel2 for GroupStandardizeBwd {
    fn run<T: WithDType>(&self, x: &[T], lx: &Layout, g: &[T]) -> candle_core::Result<(Vec<T>, Shape)> {
        let (b, s, c) = lx.shape().dims3()?;
        let groups = self.groups;
        let cg = c / groups;
        let stats = group_stats(x, b, s, c, groups);
        let n = (s * cg) as f64;
        let mut out = vec![T::zero(); x.len()];
        for bi in 0..b {
            for gi in 0..groups {
                let (m, inv) = stats[bi * groups + gi];
                let (mut sum_g, mut sum_gx) = (0f64, 0f64);
                for pos in 0..s {
                    let base = (bi * s + pos) * c + gi * cg;
                    for k in base..base + cg {
                        let xh = (x[k].to_f64() - m) * inv;
                        sum_g += g[k].to_f64();
                        sum_gx += g[k].to_f64() * xh;
                    }
                }
                let (mg, mgx) = (sum_g / n, sum_gx / n);
                for pos in 0..s {
                    let base = (bi * s + pos) * c + gi * cg;
                    for k in base..base + cg {
                        let xh = (x[k].to_f64() - m) * inv;
                        out[k] = T::from_f64(inv * (g[k].to_f64() - mg - xh * mgx));
                    }
                }
            }
        }
        Ok((out, lx.shape().clone()))
    }
}

impl CustomOp2 for GroupStandardizeBwd {
    fn name(&self) -> &'static str {
        "group-standardize-bwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        self.dispatch(s1, l1, s2, l2)
    }
}

/// Softmax over the last dimension with a fused backward pass.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SoftmaxLast)?)
}

/// 3x3 same-padding convolution. `weight` is `(9*Cin, Cout)`, `bias` is `(Cout,)`.
pub fn conv3x3(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, h, w, _) = x.dims4()?;
    let cols = x.contiguous()?.apply_op1(Im2Col3x3)?;
    let k = cols.dim(2)?;
    let cout = weight.dim(1)?;
    let y = cols.reshape((b * h * w, k))?.matmul(weight)?;
    Ok(y.broadcast_add(bias)?.reshape((b, h, w, cout))?)
}

/// Per-position affine map over the last dimension. `weight` is `(Cin, Cout)`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let cin = *dims.last().expect("nonscalar input");
    let rows = x.elem_count() / cin;
    let y = x.contiguous()?.reshape((rows, cin))?.matmul(weight)?;
    let y = match bias {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    };
    let mut out = dims;
    *out.last_mut().expect("nonscalar input") = weight.dim(1)?;
    Ok(y.reshape(out)?)
}

/// Group normalization over `(B, ..., C)` with the group axis split from C.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let b = dims[0];
    let c = *dims.last().expect("nonscalar input");
    let s = x.elem_count() / (b * c);
    let normed = x
        .contiguous()?
        .reshape((b, s, c))?
        .apply_op1(GroupStandardize { groups })?;
    Ok(normed
        .reshape(dims.as_slice())?
        .broadcast_mul(gamma)?
        .broadcast_add(beta)?)
}

/// `(B, H, W, C) -> (B, H/2, W/2, 4C)`.
pub fn space_to_depth(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x
        .reshape((b, h / 2, 2, w / 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, h / 2, w / 2, 4 * c))?)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c4) = x.dims4()?;
    let c = c4 / 4;
    Ok(x
        .reshape((b, h, w, 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, 2 * h, 2 * w, c))?)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x
        .reshape((b, h, 1, w, 1, c))?
        .broadcast_as((b, h, 2, w, 2, c))?
        .contiguous()?
        .reshape((b, 2 * h, 2 * w, c))?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::silu(x)?)
}

/// `softmax(q k^T / sqrt(d) + bias) v`. Returns the output and the probabilities.
///
/// `q` is `(B, S, d)`, `k`/`v` are `(B, L, d)`, `bias` broadcasts to `(B, S, L)`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let d = q.dim(D::Minus1)? as f64;
    let logits = (q / d.sqrt())?.matmul(&k.t()?)?;
    let logits = match bias {
        Some(b) => logits.broadcast_add(b)?,
        None => logits,
    };
    let probs = softmax_last(&logits)?;
    Ok((probs.matmul(v)?, probs))
}
