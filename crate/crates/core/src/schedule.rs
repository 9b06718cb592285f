//! Variance schedule, forward diffusion, DDIM steps, classifier-free guidance,
//! and one-step posterior denoising.
//!
//! All step functions are written as `a * x + b * eps (+ c * noise)` with the
//! coefficients computed in f64 from the schedule, so that the deterministic
//! step and its inversion are exact algebraic inverses up to f32 rounding.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail_arg, LabError, Result};
use crate::prompt::Prompt;
use crate::rng;

/// Serialized form of the schedule inside a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Number of DDIM steps used at inference.
    pub ddim_steps: usize,
    /// Sampler eta once the early guided phase is over.
    pub eta_after_t_early: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_train: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            ddim_steps: 50,
            eta_after_t_early: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
    ddim_steps: Vec<usize>,
}

impl NoiseSchedule {
    /// Linear-beta schedule with a uniform DDIM subsequence `1, 1+k, 1+2k, ...`.
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let t = config.t_train;
        if t < 2 {
            bail_arg!("t_train must be at least 2");
        }
        if !(0.0 < config.beta_start && config.beta_start < config.beta_end && config.beta_end < 1.0) {
            bail_arg!(
                "need 0 < beta_start < beta_end < 1, got {} and {}",
                config.beta_start,
                config.beta_end
            );
        }
        if config.ddim_steps == 0 || config.ddim_steps > t {
            bail_arg!("ddim_steps must lie in [1, {t}]");
        }
        let mut alpha_bar = Vec::with_capacity(t + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0f64;
        for step in 1..=t {
            let frac = (step - 1) as f64 / (t - 1) as f64;
            let beta = config.beta_start + (config.beta_end - config.beta_start) * frac;
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        let sigma = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        let stride = t / config.ddim_steps;
        let ddim_steps = (0..config.ddim_steps).map(|i| i * stride + 1).collect();
        Ok(Self {
            config,
            alpha_bar,
            sigma,
            ddim_steps,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn t_train(&self) -> usize {
        self.config.t_train
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `sqrt(1 - alpha_bar[t])`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Ascending DDIM timesteps.
    pub fn ddim_steps(&self) -> &[usize] {
        &self.ddim_steps
    }

    /// Sampling order: `(t, t_prev)` pairs from the noisiest step down to 0.
    pub fn sampling_pairs(&self) -> Vec<(usize, usize)> {
        let steps = &self.ddim_steps;
        (0..steps.len())
            .rev()
            .map(|i| (steps[i], if i == 0 { 0 } else { steps[i - 1] }))
            .collect()
    }

    /// Inversion order: `(t, t_next)` pairs from 0 up to the noisiest step.
    pub fn inversion_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = self.sampling_pairs();
        pairs.reverse();
        pairs.into_iter().map(|(t, prev)| (prev, t)).collect()
    }

    pub fn t_max(&self) -> usize {
        *self.ddim_steps.last().expect("at least one ddim step")
    }

    /// Short content hash recorded in checkpoint headers.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("schedule config serializes"));
        hex::encode(&h.finalize()[..8])
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.config.t_train {
            bail_arg!("timestep {t} outside [0, {}]", self.config.t_train);
        }
        Ok(())
    }

    /// Ancestral standard deviation for a `t -> t_prev` step at the given eta.
    pub fn ddim_sigma(&self, t: usize, t_prev: usize, eta: f64) -> f64 {
        let a = self.alpha_bar[t];
        let ap = self.alpha_bar[t_prev];
        eta * ((1.0 - ap) / (1.0 - a)).sqrt() * (1.0 - a / ap).sqrt()
    }
}

/// An image-shaped tensor tagged with its diffusion timestep (0 = clean).
#[derive(Debug, Clone)]
pub struct LatentState {
    pub data: Tensor,
    pub t: usize,
}

impl LatentState {
    pub fn new(data: Tensor, t: usize) -> Result<Self> {
        let values = data.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NumericalDomain(format!(
                "latent at t={t} holds non-finite values"
            )));
        }
        Ok(Self { data, t })
    }

    pub fn clean(data: Tensor) -> Result<Self> {
        Self::new(data, 0)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        bail_arg!("{what}: shape {:?} does not match {:?}", b.dims(), a.dims());
    }
    Ok(())
}

fn axpby(x: &Tensor, a: f64, y: &Tensor, b: f64) -> Result<Tensor> {
    Ok(((x * a)? + (y * b)?)?)
}

/// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_diffuse(
    sched: &NoiseSchedule,
    x0: &LatentState,
    t: usize,
    eps: &Tensor,
) -> Result<LatentState> {
    if x0.t != 0 {
        bail_arg!("forward_diffuse expects a clean input, got t={}", x0.t);
    }
    sched.check_t(t)?;
    same_shape(&x0.data, eps, "forward_diffuse noise")?;
    let a = sched.alpha_bar(t);
    let data = axpby(&x0.data, a.sqrt(), eps, (1.0 - a).sqrt())?;
    Ok(LatentState { data, t })
}

/// One DDIM reverse step `t -> t_prev`.
///
/// `eta = 0` is the deterministic ODE branch; `noise` is required when `eta > 0`.
pub fn ddim_step(
    sched: &NoiseSchedule,
    x_t: &LatentState,
    eps_pred: &Tensor,
    t_prev: usize,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<LatentState> {
    let t = x_t.t;
    sched.check_t(t)?;
    if t_prev == t {
        return Ok(x_t.clone());
    }
    if t_prev > t {
        bail_arg!("ddim_step needs t_prev < t, got t={t} t_prev={t_prev}");
    }
    if eta < 0.0 {
        bail_arg!("eta must be non-negative");
    }
    same_shape(&x_t.data, eps_pred, "ddim_step eps")?;
    let a = sched.alpha_bar(t);
    let ap = sched.alpha_bar(t_prev);
    let sigma = sched.ddim_sigma(t, t_prev, eta);
    let dir = (1.0 - ap - sigma * sigma).max(0.0).sqrt();
    // predicted x0 scaled back to t_prev plus the direction pointing to x_t
    let cx = (ap / a).sqrt();
    let ce = dir - (ap / a).sqrt() * (1.0 - a).sqrt();
    let mut data = axpby(&x_t.data, cx, eps_pred, ce)?;
    if sigma > 0.0 {
        let noise = noise.ok_or_else(|| {
            LabError::InvalidArgument("eta > 0 requires a noise tensor".into())
        })?;
        same_shape(&x_t.data, noise, "ddim_step noise")?;
        data = (data + (noise * sigma)?)?;
    }
    Ok(LatentState { data, t: t_prev })
}

/// Deterministic DDIM inversion step `t -> t_next`.
pub fn ddim_invert_step(
    sched: &NoiseSchedule,
    x_t: &LatentState,
    eps_pred: &Tensor,
    t_next: usize,
) -> Result<LatentState> {
    let t = x_t.t;
    sched.check_t(t_next)?;
    if t_next == t {
        return Ok(x_t.clone());
    }
    if t_next < t {
        bail_arg!("ddim_invert_step needs t_next > t, got t={t} t_next={t_next}");
    }
    same_shape(&x_t.data, eps_pred, "ddim_invert_step eps")?;
    let a = sched.alpha_bar(t);
    let an = sched.alpha_bar(t_next);
    let c = |ab: f64| ((1.0 - ab) / ab).sqrt();
    let cx = (an / a).sqrt();
    let ce = an.sqrt() * (c(an) - c(a));
    let data = axpby(&x_t.data, cx, eps_pred, ce)?;
    Ok(LatentState { data, t: t_next })
}

/// `beta * cond + (1 - beta) * uncond`.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, beta: f64) -> Result<Tensor> {
    same_shape(cond, uncond, "cfg_combine")?;
    axpby(cond, beta, uncond, 1.0 - beta)
}

/// Posterior-mean estimate of the clean sample from `x_t` and a noise prediction.
pub fn tweedie_denoise(
    sched: &NoiseSchedule,
    x_t: &LatentState,
    eps_pred: &Tensor,
) -> Result<LatentState> {
    let t = x_t.t;
    if t == 0 {
        bail_arg!("tweedie_denoise needs t >= 1");
    }
    sched.check_t(t)?;
    same_shape(&x_t.data, eps_pred, "tweedie eps")?;
    let a = sched.alpha_bar(t);
    if a == 0.0 {
        return Err(LabError::NumericalDomain(format!("alpha_bar[{t}] is zero")));
    }
    let denom = a.sqrt().max(1e-8);
    let data = axpby(&x_t.data, 1.0 / denom, eps_pred, -(1.0 - a).sqrt() / denom)?;
    Ok(LatentState { data, t: 0 })
}

/// Anything that predicts the noise in `x_t` given a prompt.
///
/// `x_t` is a single image `(C, H, W)`; the prediction has the same shape.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, prompt: &Prompt, t: usize) -> Result<Tensor>;
}

/// Classifier-free guided prediction. `uncond` defaults to the null prompt.
pub fn cfg_predict(
    model: &dyn NoisePredictor,
    x_t: &Tensor,
    prompt: &Prompt,
    t: usize,
    beta: f64,
    uncond: Option<&Prompt>,
) -> Result<Tensor> {
    let cond = model.predict(x_t, prompt, t)?;
    if beta == 1.0 {
        return Ok(cond);
    }
    let null = Prompt::null();
    let uncond_eps = model.predict(x_t, uncond.unwrap_or(&null), t)?;
    if beta == 0.0 {
        return Ok(uncond_eps);
    }
    cfg_combine(&cond, &uncond_eps, beta)
}

/// Per-step eta policy for `sample`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EtaSchedule {
    Ode,
    Sde,
    /// eta = 0 for the first `steps` sampling steps, then `eta`.
    SwitchAfter { steps: usize, eta: f64 },
}

impl EtaSchedule {
    pub fn eta_at(&self, step_index: usize) -> f64 {
        match *self {
            EtaSchedule::Ode => 0.0,
            EtaSchedule::Sde => 1.0,
            EtaSchedule::SwitchAfter { steps, eta } => {
                if step_index < steps {
                    0.0
                } else {
                    eta
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleOptions {
    pub beta: f64,
    pub eta: EtaSchedule,
    /// Replaces the null prompt in CFG when set (negative prompt).
    pub uncond: Option<Prompt>,
    /// Seed for the stochastic steps.
    pub seed: u64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            beta: 3.5,
            eta: EtaSchedule::Ode,
            uncond: None,
            seed: 0,
        }
    }
}

/// Per-step override of the noise prediction used by `sample`.
pub trait GuidanceHook {
    /// Returns `Some(eps)` to replace the CFG prediction at sampling step `step`.
    fn epsilon(&mut self, step: usize, t: usize, x_t: &LatentState) -> Result<Option<Tensor>>;
}

/// DDIM sampling from `x_start` (tagged with the largest DDIM step) to a clean sample.
pub fn sample(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    prompt: &Prompt,
    x_start: LatentState,
    opts: &SampleOptions,
    hook: Option<&mut dyn GuidanceHook>,
) -> Result<LatentState> {
    let traj = sample_trajectory(model, sched, prompt, x_start, opts, hook)?;
    Ok(traj.into_iter().last().expect("trajectory holds the start state"))
}

/// Like [`sample`] but returns every intermediate state, starting with `x_start`.
pub fn sample_trajectory(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    prompt: &Prompt,
    x_start: LatentState,
    opts: &SampleOptions,
    mut hook: Option<&mut dyn GuidanceHook>,
) -> Result<Vec<LatentState>> {
    if x_start.t != sched.t_max() {
        bail_arg!(
            "sampling must start at t={}, got t={}",
            sched.t_max(),
            x_start.t
        );
    }
    let mut states = vec![x_start];
    for (step, (t, t_prev)) in sched.sampling_pairs().into_iter().enumerate() {
        let x_t = states.last().expect("nonempty");
        let guided = match hook.as_deref_mut() {
            Some(h) => h.epsilon(step, t, x_t).map_err(|e| LabError::Guidance {
                step,
                source: Box::new(e),
            })?,
            None => None,
        };
        let eps = match guided {
            Some(e) => e,
            None => cfg_predict(model, &x_t.data, prompt, t, opts.beta, opts.uncond.as_ref())?,
        };
        let eta = opts.eta.eta_at(step);
        let noise = if eta > 0.0 {
            let mut r = rng::child_rng(opts.seed, &format!("sample-step-{step}"));
            Some(rng::randn(&mut r, x_t.data.dims())?.to_dtype(x_t.data.dtype())?)
        } else {
            None
        };
        let next = ddim_step(sched, x_t, &eps.detach(), t_prev, eta, noise.as_ref())?;
        states.push(LatentState {
            data: next.data.detach(),
            t: next.t,
        });
    }
    Ok(states)
}
