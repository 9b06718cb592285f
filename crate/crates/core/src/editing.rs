//! Score-distillation image editing: SDS, DDS, DDS with a frozen source
//! branch, and its masked form.
//!
//! The edited image θ is the rendering itself (x(θ) = θ), kept in model space
//! `[-1, 1]`. Every direction shares one (t, eps) draw across its branches.

use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserParams;
use crate::error::{bail_arg, LabError, Result};
use crate::mask::SubjectMask;
use crate::prompt::Prompt;
use crate::rng;
use crate::schedule::{cfg_combine, forward_diffuse, LatentState, NoiseSchedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditVariant {
    Sds,
    Dds,
    DdsS,
    DdsSm,
}

impl EditVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sds" => Ok(Self::Sds),
            "dds" => Ok(Self::Dds),
            "dds_s" => Ok(Self::DdsS),
            "dds_sm" => Ok(Self::DdsSm),
            other => bail_arg!("unknown edit variant {other:?}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub variant: EditVariant,
    pub n_steps: usize,
    pub step_size: f64,
    /// Inclusive range for t ~ U(t_min, t_max).
    pub t_range: (usize, usize),
    /// CFG scale of the target (edited) branch.
    pub target_beta: f64,
    /// CFG scale of the source branch.
    pub source_beta: f64,
    pub seed: u64,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            variant: EditVariant::DdsSm,
            n_steps: 200,
            step_size: 2.0,
            t_range: (50, 950),
            target_beta: 3.5,
            source_beta: 1.0,
            seed: 0,
        }
    }
}

impl EditConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        let (lo, hi) = self.t_range;
        if lo < 1 || lo > hi || hi > sched.t_train() {
            bail_arg!("t_range ({lo}, {hi}) must lie within [1, {}]", sched.t_train());
        }
        if self.n_steps == 0 {
            bail_arg!("n_steps must be at least 1");
        }
        Ok(())
    }
}

/// Everything a direction needs besides θ and the (t, eps) draw.
#[derive(Clone, Copy)]
pub struct EditContext<'a> {
    pub sched: &'a NoiseSchedule,
    /// Model scoring the edited branch (φ, or φ̃ after steering).
    pub phi: &'a DenoiserParams,
    /// Frozen source model used by the DDS-S source branch.
    pub phi0: &'a DenoiserParams,
    pub target_prompt: &'a Prompt,
    pub source_prompt: &'a Prompt,
    /// Source image in model space.
    pub x_src: &'a Tensor,
    pub target_beta: f64,
    pub source_beta: f64,
}

/// CFG prediction with both passes in one batch.
pub fn guided_eps(model: &DenoiserParams, x_t: &LatentState, prompt: &Prompt, beta: f64) -> Result<Tensor> {
    if beta == 1.0 {
        return model.denoise(x_t, prompt, None);
    }
    let null = Prompt::null();
    let x = Tensor::stack(&[&x_t.data, &x_t.data], 0)?;
    let out = model.forward(&x, &[prompt, &null], &[x_t.t, x_t.t], None)?;
    let cond = out.get(0)?;
    let uncond = out.get(1)?;
    if beta == 0.0 {
        return Ok(uncond);
    }
    cfg_combine(&cond, &uncond, beta)
}

fn noised(sched: &NoiseSchedule, x: &Tensor, t: usize, eps: &Tensor) -> Result<LatentState> {
    forward_diffuse(sched, &LatentState { data: x.clone(), t: 0 }, t, eps)
}

/// `eps_phi(x_t(θ), ŷ, t) - eps`.
pub fn sds_direction(
    phi: &DenoiserParams,
    sched: &NoiseSchedule,
    theta: &Tensor,
    y_hat: &Prompt,
    beta: f64,
    t: usize,
    eps: &Tensor,
) -> Result<Tensor> {
    let x_t = noised(sched, theta, t, eps)?;
    Ok((guided_eps(phi, &x_t, y_hat, beta)? - eps)?)
}

fn delta(ctx: &EditContext, source_model: &DenoiserParams, theta: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    let x_t = noised(ctx.sched, theta, t, eps)?;
    let src_t = noised(ctx.sched, ctx.x_src, t, eps)?;
    let target = guided_eps(ctx.phi, &x_t, ctx.target_prompt, ctx.target_beta)?;
    let source = guided_eps(source_model, &src_t, ctx.source_prompt, ctx.source_beta)?;
    Ok((target - source)?)
}

/// `eps_phi(x_t(θ), ŷ, t) - eps_phi(x_t^src, y_src, t)`.
pub fn dds_direction(ctx: &EditContext, theta: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    delta(ctx, ctx.phi, theta, t, eps)
}

/// As [`dds_direction`] with the source branch scored by φ₀.
pub fn dds_s_direction(ctx: &EditContext, theta: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    delta(ctx, ctx.phi0, theta, t, eps)
}

/// `mask ⊙ dds_s_direction`.
pub fn dds_sm_direction(
    ctx: &EditContext,
    theta: &Tensor,
    t: usize,
    eps: &Tensor,
    mask: &SubjectMask,
) -> Result<Tensor> {
    let m = mask.tensor()?;
    let (_, h, w) = theta.dims3()?;
    if m.dims() != [h, w] {
        bail_arg!("mask shape {:?} does not match image {h}x{w}", m.dims());
    }
    mask.check_range()?;
    Ok(dds_s_direction(ctx, theta, t, eps)?.broadcast_mul(&m.unsqueeze(0)?)?)
}

/// Optimized image plus its bookkeeping.
#[derive(Debug, Clone)]
pub struct EditState {
    pub theta: Tensor,
    pub step: usize,
    pub mask: Option<SubjectMask>,
    pub config: EditConfig,
}

impl EditState {
    pub fn new(x_src: &Tensor, config: EditConfig, mask: Option<SubjectMask>) -> Result<Self> {
        Ok(Self {
            theta: x_src.copy()?,
            step: 0,
            mask,
            config,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditTraceRow {
    pub step: usize,
    pub t: usize,
    pub direction_norm: f64,
    pub theta_delta_norm: f64,
}

#[derive(Debug, Clone)]
pub struct EditOutcome {
    /// Final θ in model space.
    pub theta: Tensor,
    pub trace: Vec<EditTraceRow>,
}

impl EditOutcome {
    /// `[0, 1]` image of the final θ.
    pub fn image(&self) -> Result<Tensor> {
        crate::image_io::to_unit_range(&self.theta)
    }
}

fn l2(t: &Tensor) -> Result<f64> {
    Ok((t.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?).sqrt())
}

/// One direction evaluation for the configured variant.
pub fn direction(
    ctx: &EditContext,
    variant: EditVariant,
    theta: &Tensor,
    t: usize,
    eps: &Tensor,
    mask: Option<&SubjectMask>,
) -> Result<Tensor> {
    match variant {
        EditVariant::Sds => sds_direction(ctx.phi, ctx.sched, theta, ctx.target_prompt, ctx.target_beta, t, eps),
        EditVariant::Dds => dds_direction(ctx, theta, t, eps),
        EditVariant::DdsS => dds_s_direction(ctx, theta, t, eps),
        EditVariant::DdsSm => {
            let m = mask.ok_or_else(|| LabError::InvalidArgument("dds_sm needs a subject mask".into()))?;
            dds_sm_direction(ctx, theta, t, eps, m)
        }
    }
}

/// Iterates `θ ← θ - step_size · direction` from the source image.
pub fn run_edit(ctx: &EditContext, config: &EditConfig, mask: Option<&SubjectMask>) -> Result<EditOutcome> {
    if config.n_steps > 0 {
        config.validate(ctx.sched)?;
    }
    let mut state = EditState::new(ctx.x_src, config.clone(), mask.cloned())?;
    let mut r = rng::child_rng(config.seed, "edit");
    let mut trace = Vec::with_capacity(config.n_steps);
    let (lo, hi) = config.t_range;
    for step in 0..config.n_steps {
        let t = rng::uniform_step(&mut r, lo, hi);
        let eps = rng::randn(&mut r, state.theta.dims())?;
        let dir = direction(ctx, config.variant, &state.theta, t, &eps, state.mask.as_ref())?;
        let update = (&dir * config.step_size)?;
        let next = (&state.theta - &update)?;
        let direction_norm = l2(&dir)?;
        let theta_delta_norm = l2(&update)?;
        trace.push(EditTraceRow {
            step,
            t,
            direction_norm,
            theta_delta_norm,
        });
        if !direction_norm.is_finite() || !l2(&next)?.is_finite() {
            return Err(LabError::Aborted {
                step,
                reason: "non-finite edit state".into(),
                trace: trace.iter().map(|r| r.direction_norm).collect(),
            });
        }
        state.theta = next;
        state.step = step + 1;
    }
    Ok(EditOutcome {
        theta: state.theta,
        trace,
    })
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    crate::image_io::ensure_parent(path)?;
    std::fs::write(path, out).map_err(|e| LabError::io(path, e))
}
