//! Denoising-objective training: the base model and personalization.

use candle_core::{backprop::GradStore, Device, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::concept::{self, ConceptTask};
use crate::denoiser::{DenoiserParams, SUBSET_CA_KV, SUBSET_EMBEDDING, SUBSET_FULL};
use crate::error::{bail_arg, LabError, Result};
use crate::image_io::to_model_space;
use crate::prompt::{Prompt, Vocab};
use crate::rng::{self, LabRng};
use crate::schedule::NoiseSchedule;

/// One training pair; `image` is a `[0, 1]` tensor `(3, H, W)`.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: Tensor,
    pub prompt: Prompt,
}

/// Per-image squared error of the noise prediction, averaged over the batch.
///
/// `x0` is `(B, C, H, W)` in model space; `eps` has the same shape.
pub fn dpm_loss(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    x0: &Tensor,
    prompts: &[&Prompt],
    ts: &[usize],
    eps: &Tensor,
) -> Result<Tensor> {
    let b = x0.dim(0)?;
    let (sa, sb): (Vec<f32>, Vec<f32>) = ts
        .iter()
        .map(|&t| (sched.alpha_bar(t).sqrt() as f32, sched.sigma(t) as f32))
        .unzip();
    let sa = Tensor::from_vec(sa, (b, 1, 1, 1), &Device::Cpu)?.to_dtype(x0.dtype())?;
    let sb = Tensor::from_vec(sb, (b, 1, 1, 1), &Device::Cpu)?.to_dtype(x0.dtype())?;
    let x_t = (x0.broadcast_mul(&sa)? + eps.broadcast_mul(&sb)?)?;
    let pred = params.forward(&x_t, prompts, ts, None)?;
    Ok(((pred - eps)?.sqr()?.sum_all()? / b as f64)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Probability of swapping a prompt for the null token.
    pub null_prob: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Linear warmup length in steps.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.0,
            null_prob: 0.1,
            grad_clip: 1000.0,
            warmup: 100,
            seed: 0,
        }
    }
}

/// Optimizer over a named parameter subset with optional global-norm clipping.
pub(crate) struct SubsetOptimizer {
    vars: Vec<(String, Var)>,
    opt: AdamW,
    base_lr: f64,
    warmup: usize,
    clip: f64,
    steps: usize,
}

impl SubsetOptimizer {
    pub(crate) fn new(vars: Vec<(String, Var)>, lr: f64, weight_decay: f64, warmup: usize, clip: f64) -> Result<Self> {
        let opt = AdamW::new(
            vars.iter().map(|(_, v)| v.clone()).collect(),
            ParamsAdamW {
                lr,
                weight_decay,
                ..Default::default()
            },
        )?;
        Ok(Self {
            vars,
            opt,
            base_lr: lr,
            warmup,
            clip,
            steps: 0,
        })
    }

    /// Gradient restricted to the subset, each entry scaled by `scale`.
    pub(crate) fn collect(&self, grads: &GradStore, scale: f64) -> Result<GradStore> {
        let mut out = GradStore::default();
        for (_, v) in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                out.insert(v.as_tensor(), (g * scale)?);
            }
        }
        Ok(out)
    }

    /// Adds `other` into `acc` entrywise.
    pub(crate) fn accumulate(&self, acc: &mut GradStore, other: &GradStore) -> Result<()> {
        for (_, v) in &self.vars {
            if let Some(g) = other.get(v.as_tensor()) {
                let sum = match acc.get(v.as_tensor()) {
                    Some(a) => (a + g)?,
                    None => g.clone(),
                };
                acc.insert(v.as_tensor(), sum);
            }
        }
        Ok(())
    }

    pub(crate) fn grad_norm(&self, grads: &GradStore) -> Result<f64> {
        let mut sq = 0f64;
        for (_, v) in &self.vars {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub(crate) fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let norm = self.grad_norm(grads)?;
        if !norm.is_finite() {
            return Err(LabError::NumericalDomain("non-finite gradient".into()));
        }
        let clipped;
        let grads = if self.clip > 0.0 && norm > self.clip {
            clipped = self.collect(grads, self.clip / norm)?;
            &clipped
        } else {
            grads
        };
        self.steps += 1;
        if self.warmup > 0 {
            let f = (self.steps as f64 / self.warmup as f64).min(1.0);
            self.opt.set_learning_rate(self.base_lr * f);
        }
        self.opt.step(grads)?;
        Ok(norm)
    }
}

/// Loss curve plus divergence bookkeeping.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LossCurve {
    pub losses: Vec<f64>,
    #[serde(skip)]
    initial: Option<f64>,
    #[serde(skip)]
    over: usize,
}

impl LossCurve {
    /// Records a loss; errors when it stayed above 10x the first value for 100 steps.
    pub fn push(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(LabError::TrainingDiverged {
                step,
                loss,
                initial: self.initial.unwrap_or(f64::NAN),
            });
        }
        let initial = *self.initial.get_or_insert(loss);
        self.losses.push(loss);
        if loss > 10.0 * initial {
            self.over += 1;
            if self.over >= 100 {
                return Err(LabError::TrainingDiverged { step, loss, initial });
            }
        } else {
            self.over = 0;
        }
        Ok(())
    }
}

fn stack(images: &[&Tensor]) -> Result<Tensor> {
    Ok(Tensor::stack(images, 0)?)
}

/// Trains `subset` of `init` on the denoising objective.
///
/// Zero steps return `init` unchanged. Parameters outside the subset are shared
/// with `init` and never written.
pub fn fit(
    init: &DenoiserParams,
    subset: &[String],
    data: &[Example],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<(DenoiserParams, LossCurve)> {
    if data.is_empty() {
        bail_arg!("training set is empty");
    }
    if cfg.batch_size == 0 {
        bail_arg!("batch size must be positive");
    }
    let mut curve = LossCurve::default();
    if cfg.steps == 0 {
        return Ok((init.clone(), curve));
    }
    let (params, vars) = init.with_vars(subset)?;
    let mut opt = SubsetOptimizer::new(vars, cfg.lr, cfg.weight_decay, cfg.warmup, cfg.grad_clip)?;
    let model_space: Vec<Tensor> = data
        .iter()
        .map(|e| to_model_space(&e.image))
        .collect::<Result<_>>()?;
    let null = Prompt::null();
    let mut r = rng::child_rng(cfg.seed, "fit");
    for step in 0..cfg.steps {
        let mut imgs = Vec::with_capacity(cfg.batch_size);
        let mut prompts = Vec::with_capacity(cfg.batch_size);
        let mut ts = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let i = r.random_range(0..data.len());
            imgs.push(&model_space[i]);
            prompts.push(if r.random_bool(cfg.null_prob) { &null } else { &data[i].prompt });
            ts.push(rng::uniform_step(&mut r, 1, sched.t_train()));
        }
        let x0 = stack(&imgs)?;
        let eps = rng::randn(&mut r, x0.dims())?;
        let loss = dpm_loss(&params, sched, &x0, &prompts, &ts, &eps)?;
        let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        curve.push(step, value)?;
        on_step(step, value);
        let grads = loss.backward()?;
        opt.step(&grads)?;
    }
    drop(opt);
    Ok((params.frozen()?, curve))
}

/// Procedural training corpus over the whole concept world.
///
/// 30% of captions omit the background so the model also learns the short
/// template used by reference prompts.
pub fn world_dataset(seed: u64, n: usize, vocab: &Vocab) -> Result<Vec<Example>> {
    let mut r = rng::child_rng(seed, "world-dataset");
    (0..n)
        .map(|_| {
            let scene = concept::random_scene(&mut r);
            let bg = if r.random_bool(0.7) { Some(scene.background) } else { None };
            Ok(Example {
                image: concept::render(&scene).tensor()?,
                prompt: concept::caption(vocab, scene.shape, bg)?,
            })
        })
        .collect()
}

/// Trains φ₀ on all parameters.
pub fn train_base(
    init: &DenoiserParams,
    data: &[Example],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    on_step: impl FnMut(usize, f64),
) -> Result<(DenoiserParams, LossCurve)> {
    let all = init.subset(SUBSET_FULL)?;
    fit(init, &all, data, sched, cfg, on_step)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonalizationMode {
    EmbeddingOnly,
    Full,
    CaKvOnly,
}

impl PersonalizationMode {
    pub const ALL: [PersonalizationMode; 3] = [Self::EmbeddingOnly, Self::Full, Self::CaKvOnly];

    pub fn subset_name(&self) -> &'static str {
        match self {
            Self::EmbeddingOnly => SUBSET_EMBEDDING,
            Self::Full => SUBSET_FULL,
            Self::CaKvOnly => SUBSET_CA_KV,
        }
    }

    pub fn as_str(&self) -> &'static str {
        self.subset_name()
    }

    /// Learning rates of the original large-model recipe.
    pub fn reference_lr(&self) -> f64 {
        match self {
            Self::EmbeddingOnly => 1e-3,
            Self::Full => 1e-6,
            Self::CaKvOnly => 5e-5,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            SUBSET_EMBEDDING => Ok(Self::EmbeddingOnly),
            SUBSET_FULL => Ok(Self::Full),
            SUBSET_CA_KV => Ok(Self::CaKvOnly),
            other => bail_arg!("unknown personalization mode {other:?}"),
        }
    }
}

/// Per-mode learning rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRates {
    pub embedding_only: f64,
    pub full: f64,
    pub ca_kv_only: f64,
}

impl ModeRates {
    pub fn get(&self, mode: PersonalizationMode) -> f64 {
        match mode {
            PersonalizationMode::EmbeddingOnly => self.embedding_only,
            PersonalizationMode::Full => self.full,
            PersonalizationMode::CaKvOnly => self.ca_kv_only,
        }
    }

    pub fn reference() -> Self {
        Self {
            embedding_only: 1e-3,
            full: 1e-6,
            ca_kv_only: 5e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonalizeConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: ModeRates,
    /// Std of the noise added to the class embedding when seeding `[S]`.
    pub placeholder_noise: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for PersonalizeConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 4,
            lr: ModeRates {
                embedding_only: 2e-2,
                full: 2e-4,
                ca_kv_only: 1e-3,
            },
            placeholder_noise: 0.01,
            grad_clip: 1000.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Personalized {
    pub params: DenoiserParams,
    pub curve: LossCurve,
    pub validation_before: f64,
    pub validation_after: f64,
}

/// Denoising loss on a fixed (noise, timestep) batch over the given examples.
pub fn validation_loss(
    params: &DenoiserParams,
    sched: &NoiseSchedule,
    data: &[Example],
    seed: u64,
    draws: usize,
) -> Result<f64> {
    let mut r: LabRng = rng::child_rng(seed, "validation");
    let mut total = 0f64;
    let mut count = 0usize;
    for _ in 0..draws {
        for e in data {
            let x0 = to_model_space(&e.image)?.unsqueeze(0)?;
            let t = rng::uniform_step(&mut r, 1, sched.t_train());
            let eps = rng::randn(&mut r, x0.dims())?;
            let l = dpm_loss(params, sched, &x0, &[&e.prompt], &[t], &eps)?;
            total += l.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// The task's reference images paired with the placeholder prompt.
pub fn reference_examples(task: &ConceptTask) -> Vec<Example> {
    task.reference_images
        .iter()
        .map(|img| Example {
            image: img.clone(),
            prompt: task.reference_prompt.clone(),
        })
        .collect()
}

/// Fine-tunes the subset of `mode` on the task's reference pairs.
pub fn personalize(
    phi0: &DenoiserParams,
    task: &ConceptTask,
    mode: PersonalizationMode,
    sched: &NoiseSchedule,
    cfg: &PersonalizeConfig,
) -> Result<Personalized> {
    let data = reference_examples(task);
    let mut start = phi0.clone();
    start.init_placeholder_from(task.source_class_token, cfg.placeholder_noise, cfg.seed)?;
    let subset = start.subset(mode.subset_name())?;
    let validation_before = validation_loss(&start, sched, &data, cfg.seed, 8)?;
    let train = TrainConfig {
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        lr: cfg.lr.get(mode),
        weight_decay: 0.0,
        null_prob: 0.0,
        grad_clip: cfg.grad_clip,
        warmup: 0,
        seed: rng::derive_seed(cfg.seed, &format!("personalize-{}", mode.as_str())),
    };
    let (params, curve) = fit(&start, &subset, &data, sched, &train, |_, _| {})?;
    let validation_after = validation_loss(&params, sched, &data, cfg.seed, 8)?;
    Ok(Personalized {
        params,
        curve,
        validation_before,
        validation_after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ArchConfig;
    use crate::schedule::ScheduleConfig;

    fn setup() -> (DenoiserParams, NoiseSchedule, Vec<Example>) {
        let v = Vocab::toy();
        let m = DenoiserParams::init(ArchConfig::toy(v.len()), v.clone(), 3).unwrap();
        let s = NoiseSchedule::new(ScheduleConfig::default()).unwrap();
        let d = world_dataset(1, 4, &v).unwrap();
        (m, s, d)
    }

    #[test]
    fn zero_steps_returns_initializer() {
        let (m, s, d) = setup();
        let cfg = TrainConfig {
            steps: 0,
            ..Default::default()
        };
        let (out, curve) = train_base(&m, &d, &s, &cfg, |_, _| {}).unwrap();
        assert_eq!(out.content_hash().unwrap(), m.content_hash().unwrap());
        assert!(curve.losses.is_empty());
    }

    #[test]
    fn embedding_only_training_leaves_backbone_untouched() {
        let (m, s, _) = setup();
        let cfg = TrainConfig {
            steps: 2,
            batch_size: 2,
            lr: 0.1,
            warmup: 0,
            ..Default::default()
        };
        let v = Vocab::toy();
        let task = concept::synthesize_task(5, &concept::TaskSpec::standard_suite()[0], &v).unwrap();
        let d = reference_examples(&task);
        let names = m.subset(SUBSET_EMBEDDING).unwrap();
        let (out, _) = fit(&m, &names, &d, &s, &cfg, |_, _| {}).unwrap();
        for n in m.names() {
            let a: Vec<f32> = m.get(n).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f32> = out.get(n).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            if names.contains(n) {
                assert_ne!(a, b, "{n} should have moved");
            } else {
                assert_eq!(a, b, "{n} changed");
            }
        }
    }

    #[test]
    fn divergence_detector_fires() {
        let mut c = LossCurve::default();
        c.push(0, 1.0).unwrap();
        for i in 1..100 {
            c.push(i, 20.0).unwrap();
        }
        assert!(matches!(c.push(100, 20.0), Err(LabError::TrainingDiverged { .. })));
        let mut c = LossCurve::default();
        c.push(0, 1.0).unwrap();
        assert!(c.push(1, f64::NAN).is_err());
    }

    #[test]
    fn empty_dataset_rejected() {
        let (m, s, _) = setup();
        assert!(train_base(&m, &[], &s, &TrainConfig::default(), |_, _| {}).is_err());
    }
}
