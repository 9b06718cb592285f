//! Structure-preserving sampling: DDIM inversion of the source with feature
//! caching, a patchwise contrastive loss between live and cached
//! self-attention features, and the guided noise prediction built from it.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::concept::ConceptTask;
use crate::denoiser::{DenoiserParams, FeatureTap, SA_LAYERS};
use crate::editing::guided_eps;
use crate::error::{bail_arg, LabError, Result};
use crate::image_io::{to_model_space, to_unit_range};
use crate::prompt::Prompt;
use crate::rng;
use crate::schedule::{
    cfg_combine, ddim_invert_step, sample, EtaSchedule, GuidanceHook, LatentState, NoiseSchedule,
    SampleOptions,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub lambda: f64,
    pub cfg_beta: f64,
    pub inversion_beta: f64,
    /// Number of leading sampling steps that receive guidance (ODE); the rest run
    /// unguided with `eta_after`.
    pub t_early: usize,
    pub eta_after: f64,
    pub tau: f64,
    /// Replaces the null prompt in CFG when set.
    pub negative_prompt: Option<Prompt>,
    pub layers: Vec<String>,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda: 15.0,
            cfg_beta: 3.5,
            inversion_beta: 1.0,
            t_early: 30,
            eta_after: 1.0,
            tau: 0.07,
            negative_prompt: None,
            layers: SA_LAYERS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !(self.lambda >= 0.0) {
            bail_arg!("lambda must be non-negative");
        }
        if self.t_early > sched.ddim_steps().len() {
            bail_arg!("t_early exceeds the number of sampling steps");
        }
        if self.tau <= 0.0 {
            bail_arg!("tau must be positive");
        }
        Ok(())
    }
}

/// Self-attention features and cross-attention maps from a source inversion.
#[derive(Debug, Clone, Default)]
pub struct FeatureCache {
    /// Prompt the maps were computed with.
    pub prompt: Option<Prompt>,
    /// `(t, layer) -> (S, C)`.
    pub sa: BTreeMap<(usize, String), Tensor>,
    /// `(t, layer) -> (S, L)` cross-attention probabilities.
    pub ca: BTreeMap<(usize, String), Tensor>,
}

impl FeatureCache {
    pub fn timesteps(&self) -> Vec<usize> {
        let mut ts: Vec<usize> = self.sa.keys().map(|(t, _)| *t).collect();
        ts.dedup();
        ts
    }

    /// Cached features of every layer at `t`.
    pub fn sa_at(&self, t: usize, layers: &[String]) -> Result<BTreeMap<String, Tensor>> {
        layers
            .iter()
            .map(|l| {
                self.sa
                    .get(&(t, l.clone()))
                    .map(|f| (l.clone(), f.clone()))
                    .ok_or_else(|| LabError::InvalidState(format!("no cached feature for t={t}, layer {l}")))
            })
            .collect()
    }

    /// Archive with keys `sa/<t>/<layer>` and `ca/<t>/<layer>`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(String, &Tensor)> = Vec::new();
        for ((t, l), v) in &self.sa {
            entries.push((format!("sa/{t}/{l}"), v));
        }
        for ((t, l), v) in &self.ca {
            entries.push((format!("ca/{t}/{l}"), v));
        }
        let mut meta = HashMap::new();
        meta.insert("prompt".to_string(), serde_json::to_string(&self.prompt)?);
        let bytes = safetensors::serialize(entries, Some(meta))?;
        crate::image_io::ensure_parent(path)?;
        std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
        let (_, meta) = safetensors::SafeTensors::read_metadata(&bytes)?;
        let prompt = match meta.metadata().as_ref().and_then(|m| m.get("prompt")) {
            Some(s) => serde_json::from_str(s)?,
            None => None,
        };
        let mut cache = FeatureCache {
            prompt,
            ..Default::default()
        };
        for (k, v) in candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)? {
            let parts: Vec<&str> = k.splitn(3, '/').collect();
            if parts.len() != 3 {
                return Err(LabError::Serde(format!("bad cache key {k}")));
            }
            let t: usize = parts[1]
                .parse()
                .map_err(|_| LabError::Serde(format!("bad cache key {k}")))?;
            let key = (t, parts[2].to_string());
            match parts[0] {
                "sa" => cache.sa.insert(key, v),
                "ca" => cache.ca.insert(key, v),
                _ => return Err(LabError::Serde(format!("bad cache key {k}"))),
            };
        }
        Ok(cache)
    }
}

#[derive(Debug, Clone)]
pub struct Inversion {
    pub x_t: LatentState,
    pub cache: FeatureCache,
    /// Latents visited, from the clean input to `x_t`.
    pub trajectory: Vec<LatentState>,
}

/// Deterministic DDIM inversion of a model-space source image.
///
/// The prediction for step `t -> t_next` is evaluated at `(x_t, t_next)`; the
/// taps of that pass are cached under `t_next`.
pub fn invert_and_cache(
    phi0: &DenoiserParams,
    sched: &NoiseSchedule,
    x0_src: &Tensor,
    y_src: &Prompt,
    beta: f64,
    layers: &[String],
) -> Result<Inversion> {
    let mut x = LatentState::clean(x0_src.clone())?;
    let mut cache = FeatureCache {
        prompt: Some(y_src.clone()),
        ..Default::default()
    };
    let mut trajectory = vec![x.clone()];
    for (_, t_next) in sched.inversion_pairs() {
        let mut tap = FeatureTap {
            enabled_layers: layers.to_vec(),
            capture_ca: true,
            ..Default::default()
        };
        let probe = LatentState {
            data: x.data.clone(),
            t: t_next,
        };
        let cond = phi0.denoise(&probe, y_src, Some(&mut tap))?;
        let eps = if beta == 1.0 {
            cond
        } else {
            let uncond = phi0.denoise(&probe, &Prompt::null(), None)?;
            cfg_combine(&cond, &uncond, beta)?
        };
        for (l, f) in tap.sa_features {
            cache.sa.insert((t_next, l), f.squeeze(0)?);
        }
        for (l, m) in tap.ca_maps {
            cache.ca.insert((t_next, l), m.squeeze(0)?);
        }
        x = ddim_invert_step(sched, &x, &eps, t_next)?;
        trajectory.push(x.clone());
    }
    Ok(Inversion {
        x_t: x,
        cache,
        trajectory,
    })
}

fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Patchwise contrastive loss of one layer; `h` and `h_hat` are `(S, C)`.
pub fn patchnce_layer(h: &Tensor, h_hat: &Tensor, tau: f64) -> Result<Tensor> {
    if h.dims() != h_hat.dims() {
        bail_arg!("feature shapes {:?} and {:?} differ", h.dims(), h_hat.dims());
    }
    let a = normalize_rows(h)?;
    let b = normalize_rows(h_hat)?;
    let logits = (a.matmul(&b.t()?)? / tau)?;
    let m = logits.max_keepdim(D::Minus1)?.detach();
    let lse = (logits.broadcast_sub(&m)?.exp()?.sum_keepdim(D::Minus1)?.log()? + m)?;
    let pos = ((a * b)?.sum_keepdim(D::Minus1)? / tau)?;
    Ok((lse - pos)?.sum_all()?)
}

/// Sum of [`patchnce_layer`] over matching layers.
pub fn patchnce(h: &BTreeMap<String, Tensor>, h_hat: &BTreeMap<String, Tensor>, tau: f64) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (l, hv) in h {
        let hh = h_hat
            .get(l)
            .ok_or_else(|| LabError::InvalidArgument(format!("layer {l} missing from cached features")))?;
        let hv = if hv.rank() == 3 { hv.squeeze(0)? } else { hv.clone() };
        let term = patchnce_layer(&hv, hh, tau)?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| LabError::InvalidArgument("no layers to compare".into()))
}

/// Remaps `x` to the per-channel mean and std of `reference`; both `(C, H, W)`.
pub fn adain(x: &Tensor, reference: &Tensor) -> Result<Tensor> {
    let stats = |t: &Tensor| -> Result<(Tensor, Tensor)> {
        let (c, h, w) = t.dims3()?;
        let flat = t.reshape((c, h * w))?;
        let mean = flat.mean_keepdim(1)?;
        let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
        Ok((mean, var.sqrt()?))
    };
    let (c, h, w) = x.dims3()?;
    let (mx, sx) = stats(x)?;
    let (mr, sr) = stats(reference)?;
    let normed = x
        .reshape((c, h * w))?
        .broadcast_sub(&mx)?
        .broadcast_div(&(sx + 1e-12)?)?;
    Ok(normed.broadcast_mul(&sr)?.broadcast_add(&mr)?.reshape((c, h, w))?)
}

/// Gradient of the contrastive loss w.r.t. `x_t` and the conditional prediction.
pub fn patchnce_grad(
    phi: &DenoiserParams,
    x_t: &LatentState,
    y: &Prompt,
    cache: &FeatureCache,
    layers: &[String],
    tau: f64,
) -> Result<(Tensor, Tensor, f64)> {
    let cached = cache.sa_at(x_t.t, layers)?;
    let x = Var::from_tensor(&x_t.data)?;
    let mut tap = FeatureTap::sa_only(layers);
    let cond = phi.forward(&x.as_tensor().unsqueeze(0)?, &[y], &[x_t.t], Some(&mut tap))?;
    let loss = patchnce(&tap.sa_features, &cached, tau)?;
    let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    let grads = loss.backward()?;
    let g = grads
        .get(x.as_tensor())
        .cloned()
        .unwrap_or(x.as_tensor().zeros_like()?);
    Ok((g, cond.squeeze(0)?.detach(), value))
}

/// Guided CFG prediction: `eps_cfg + sigma_t * lambda * grad`, AdaIN-matched to `eps_cfg`.
pub fn guided_epsilon(
    phi: &DenoiserParams,
    sched: &NoiseSchedule,
    x_t: &LatentState,
    y_ref: &Prompt,
    cache: &FeatureCache,
    cfg: &GuidanceConfig,
) -> Result<Tensor> {
    let null = Prompt::null();
    let uncond_prompt = cfg.negative_prompt.as_ref().unwrap_or(&null);
    if cfg.lambda == 0.0 {
        // still require the cache entry so both branches fail alike
        cache.sa_at(x_t.t, &cfg.layers)?;
        return cfg_eps_with(phi, x_t, y_ref, uncond_prompt, cfg.cfg_beta);
    }
    let (grad, cond, _) = patchnce_grad(phi, x_t, y_ref, cache, &cfg.layers, cfg.tau)?;
    let uncond = phi.denoise(x_t, uncond_prompt, None)?;
    let eps_cfg = cfg_combine(&cond, &uncond, cfg.cfg_beta)?;
    let guided = (&eps_cfg + (grad * (sched.sigma(x_t.t) * cfg.lambda))?)?;
    adain(&guided, &eps_cfg)
}

fn cfg_eps_with(phi: &DenoiserParams, x_t: &LatentState, y: &Prompt, uncond: &Prompt, beta: f64) -> Result<Tensor> {
    if uncond == &Prompt::null() {
        return guided_eps(phi, x_t, y, beta);
    }
    let cond = phi.denoise(x_t, y, None)?;
    let un = phi.denoise(x_t, uncond, None)?;
    cfg_combine(&cond, &un, beta)
}

struct SpatialHook<'a> {
    phi: &'a DenoiserParams,
    sched: &'a NoiseSchedule,
    prompt: &'a Prompt,
    cache: &'a FeatureCache,
    cfg: &'a GuidanceConfig,
}

impl GuidanceHook for SpatialHook<'_> {
    fn epsilon(&mut self, step: usize, _t: usize, x_t: &LatentState) -> Result<Option<Tensor>> {
        if step >= self.cfg.t_early {
            return Ok(None);
        }
        guided_epsilon(self.phi, self.sched, x_t, self.prompt, self.cache, self.cfg).map(Some)
    }
}

/// Guided samples plus where they came from.
#[derive(Debug, Clone, Default)]
pub struct GuidedSet {
    /// `[0, 1]` images.
    pub images: Vec<Tensor>,
    pub provenance: Vec<GuidedProvenance>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuidedProvenance {
    pub seed: u64,
    pub config: GuidanceConfig,
}

impl GuidedSet {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (i, img) in self.images.iter().enumerate() {
            crate::image_io::save_rgb_png(img, &dir.join(format!("guided_{i:02}.png")))?;
        }
        let path = dir.join("provenance.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&self.provenance)?).map_err(|e| LabError::io(&path, e))
    }
}

/// Deterministic unguided sampling (eta 0, no CFG) back from an inverted latent.
pub fn reconstruct(phi0: &DenoiserParams, sched: &NoiseSchedule, x_t: &LatentState, prompt: &Prompt) -> Result<Tensor> {
    let opts = SampleOptions {
        beta: 1.0,
        eta: EtaSchedule::Ode,
        uncond: None,
        seed: 0,
    };
    let out = sample(phi0, sched, prompt, x_t.clone(), &opts, None)?;
    to_unit_range(&out.data)
}

/// One guided sample from the inverted source latent.
pub fn sample_guided(
    phi: &DenoiserParams,
    sched: &NoiseSchedule,
    x_t_src: &LatentState,
    prompt: &Prompt,
    cache: &FeatureCache,
    cfg: &GuidanceConfig,
    seed: u64,
) -> Result<Tensor> {
    cfg.validate(sched)?;
    let opts = SampleOptions {
        beta: cfg.cfg_beta,
        eta: EtaSchedule::SwitchAfter {
            steps: cfg.t_early,
            eta: cfg.eta_after,
        },
        uncond: cfg.negative_prompt.clone(),
        seed,
    };
    let mut hook = SpatialHook {
        phi,
        sched,
        prompt,
        cache,
        cfg,
    };
    let out = sample(phi, sched, prompt, x_t_src.clone(), &opts, Some(&mut hook))?;
    to_unit_range(&out.data)
}

/// `n` guided samples of the personal concept laid out like the source.
pub fn generate_guided_set(
    phi: &DenoiserParams,
    phi0: &DenoiserParams,
    sched: &NoiseSchedule,
    task: &ConceptTask,
    cfg: &GuidanceConfig,
    n: usize,
    seed: u64,
    inversion: Option<&Inversion>,
) -> Result<GuidedSet> {
    if n == 0 {
        bail_arg!("guided set size must be at least 1");
    }
    let owned;
    let inv = match inversion {
        Some(i) => i,
        None => {
            let x0 = to_model_space(&task.source_image)?;
            owned = invert_and_cache(phi0, sched, &x0, &task.source_prompt, cfg.inversion_beta, &cfg.layers)?;
            &owned
        }
    };
    let mut images = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    for i in 0..n {
        let s = rng::derive_seed(seed, &format!("guided-{i}"));
        images.push(sample_guided(phi, sched, &inv.x_t, &task.reference_prompt, &inv.cache, cfg, s)?);
        provenance.push(GuidedProvenance {
            seed: s,
            config: cfg.clone(),
        });
    }
    Ok(GuidedSet { images, provenance })
}
