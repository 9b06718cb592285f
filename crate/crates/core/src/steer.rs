//! Editability steering: fine-tunes a personalized model so that a one-step
//! denoised source latent is scored like the frozen model scores the source,
//! jointly with a denoising loss on structure-guided samples.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::concept::ConceptTask;
use crate::denoiser::DenoiserParams;
use crate::error::{bail_arg, LabError, Result};
use crate::guidance::GuidedSet;
use crate::image_io::to_model_space;
use crate::prompt::Prompt;
use crate::rng;
use crate::schedule::{forward_diffuse, LatentState, NoiseSchedule};
use crate::train::{dpm_loss, ModeRates, PersonalizationMode, SubsetOptimizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// Replace the denoiser Jacobian by -I.
    NegIdentity,
    /// Replace it by +I.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteerConfig {
    pub n_steps: usize,
    pub grad_accum: usize,
    pub lr: ModeRates,
    pub jacobian_mode: JacobianMode,
    /// Defaults to the reference-set size when absent.
    pub guided_set_size: Option<usize>,
    pub ms_weight: f64,
    pub edsd_weight: f64,
    pub t_range: (usize, usize),
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for SteerConfig {
    fn default() -> Self {
        Self {
            n_steps: 10,
            grad_accum: 10,
            lr: ModeRates {
                embedding_only: 5e-2,
                full: 1e-3,
                ca_kv_only: 5e-3,
            },
            jacobian_mode: JacobianMode::NegIdentity,
            guided_set_size: None,
            ms_weight: 1.0,
            edsd_weight: 1.0,
            t_range: (50, 950),
            grad_clip: 0.0,
            seed: 0,
        }
    }
}

/// `x_src_t - sigma_t (eps_phi(x_src_t, y_ref, t) - eps)`.
pub fn perturb_latent(
    phi: &DenoiserParams,
    sched: &NoiseSchedule,
    x_src_t: &LatentState,
    y_ref: &Prompt,
    eps: &Tensor,
) -> Result<LatentState> {
    let pred = phi.denoise(x_src_t, y_ref, None)?;
    perturb_with(sched, x_src_t, &pred, eps)
}

fn perturb_with(sched: &NoiseSchedule, x_src_t: &LatentState, pred: &Tensor, eps: &Tensor) -> Result<LatentState> {
    let s = sched.sigma(x_src_t.t);
    Ok(LatentState {
        data: (&x_src_t.data - ((pred - eps)? * s)?)?,
        t: x_src_t.t,
    })
}

/// Surrogate whose parameter gradient is the editability-driven update.
///
/// `L = sigma_t <sg[Delta], eps_phi(x_src_t, y_ref, t)>` with
/// `Delta = eps_phi(x_hat_t, y_ref, t) - eps_phi0(x_src_t, y_src, t)`; the
/// identity-Jacobian variant negates it. Returns the loss and `|Delta|`.
pub fn edsd_surrogate(
    phi: &DenoiserParams,
    phi0: &DenoiserParams,
    sched: &NoiseSchedule,
    x0_src: &Tensor,
    y_ref: &Prompt,
    y_src: &Prompt,
    t: usize,
    eps: &Tensor,
    mode: JacobianMode,
) -> Result<(Tensor, f64)> {
    let x_src_t = forward_diffuse(sched, &LatentState { data: x0_src.clone(), t: 0 }, t, eps)?;
    let pred = phi.denoise(&x_src_t, y_ref, None)?;
    let x_hat = perturb_with(sched, &x_src_t, &pred.detach(), eps)?;
    let target = phi.denoise(&x_hat, y_ref, None)?.detach();
    let source = phi0.denoise(&x_src_t, y_src, None)?.detach();
    let delta = (target - source)?;
    let delta_norm = (delta.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?).sqrt();
    let sign = match mode {
        JacobianMode::NegIdentity => 1.0,
        JacobianMode::Identity => -1.0,
    };
    let loss = ((delta * pred)?.sum_all()? * (sign * sched.sigma(t)))?;
    Ok((loss, delta_norm))
}

/// Denoising loss of `phi` averaged over guided images, one (t, eps) each.
pub fn mode_shift_loss(
    phi: &DenoiserParams,
    sched: &NoiseSchedule,
    images: &[Tensor],
    y_ref: &Prompt,
    ts: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    if images.is_empty() {
        bail_arg!("guided set is empty");
    }
    let x0 = Tensor::stack(
        &images.iter().map(to_model_space).collect::<Result<Vec<_>>>()?,
        0,
    )?;
    let prompts: Vec<&Prompt> = images.iter().map(|_| y_ref).collect();
    dpm_loss(phi, sched, &x0, &prompts, ts, eps)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SteerTraceRow {
    pub outer_step: usize,
    pub edsd_loss_surrogate: f64,
    pub ms_loss: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct SteerOutcome {
    pub params: DenoiserParams,
    pub trace: Vec<SteerTraceRow>,
}

/// Runs `n_steps` optimizer updates, each from `grad_accum` averaged gradients.
pub fn steer(
    phi: &DenoiserParams,
    phi0: &DenoiserParams,
    sched: &NoiseSchedule,
    task: &ConceptTask,
    mode: PersonalizationMode,
    cfg: &SteerConfig,
    guided: &GuidedSet,
) -> Result<SteerOutcome> {
    if cfg.n_steps == 0 {
        return Ok(SteerOutcome {
            params: phi.clone(),
            trace: vec![],
        });
    }
    if cfg.grad_accum == 0 {
        bail_arg!("grad_accum must be at least 1");
    }
    let (lo, hi) = cfg.t_range;
    if lo < 1 || lo > hi || hi > sched.t_train() {
        bail_arg!("t_range ({lo}, {hi}) must lie within [1, {}]", sched.t_train());
    }
    let use_ms = cfg.ms_weight != 0.0;
    if use_ms && guided.is_empty() {
        bail_arg!("mode shifting needs a nonempty guided set");
    }
    let x0_src = to_model_space(&task.source_image)?;
    let y_ref = &task.reference_prompt;
    let y_src = &task.source_prompt;
    let subset = phi.subset(mode.subset_name())?;
    let (params, vars) = phi.with_vars(&subset)?;
    let mut opt = SubsetOptimizer::new(vars, cfg.lr.get(mode), 0.0, 0, cfg.grad_clip)?;
    let mut r = rng::child_rng(cfg.seed, "steer");
    let mut trace = Vec::with_capacity(cfg.n_steps);
    let mut norms = Vec::new();
    for outer in 0..cfg.n_steps {
        let mut acc = candle_core::backprop::GradStore::default();
        let (mut edsd_sum, mut ms_sum) = (0f64, 0f64);
        let scale = 1.0 / cfg.grad_accum as f64;
        for k in 0..cfg.grad_accum {
            let mut total: Option<Tensor> = None;
            if cfg.edsd_weight != 0.0 {
                let t = rng::uniform_step(&mut r, lo, hi);
                let eps = rng::randn(&mut r, x0_src.dims())?;
                let (l, _) = edsd_surrogate(&params, phi0, sched, &x0_src, y_ref, y_src, t, &eps, cfg.jacobian_mode)?;
                edsd_sum += l.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
                total = Some((l * cfg.edsd_weight)?);
            }
            if use_ms {
                let i = (outer * cfg.grad_accum + k) % guided.len();
                let t = rng::uniform_step(&mut r, 1, sched.t_train());
                let eps = rng::randn(&mut r, &[1, 3, task.source_image.dim(1)?, task.source_image.dim(2)?])?;
                let l = mode_shift_loss(&params, sched, &guided.images[i..i + 1], y_ref, &[t], &eps)?;
                ms_sum += l.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
                let l = (l * cfg.ms_weight)?;
                total = Some(match total {
                    Some(a) => (a + l)?,
                    None => l,
                });
            }
            let Some(total) = total else {
                continue;
            };
            let grads = total.backward()?;
            let g = opt.collect(&grads, scale)?;
            opt.accumulate(&mut acc, &g)?;
        }
        let row = SteerTraceRow {
            outer_step: outer,
            edsd_loss_surrogate: edsd_sum * scale,
            ms_loss: ms_sum * scale,
            grad_norm: opt.grad_norm(&acc)?,
        };
        norms.push(row.grad_norm);
        let finite = row.grad_norm.is_finite() && row.edsd_loss_surrogate.is_finite() && row.ms_loss.is_finite();
        trace.push(row);
        if !finite {
            return Err(LabError::Aborted {
                step: outer,
                reason: "non-finite steering loss or gradient".into(),
                trace: norms,
            });
        }
        opt.step(&acc)?;
    }
    drop(opt);
    Ok(SteerOutcome {
        params: params.frozen()?,
        trace,
    })
}
