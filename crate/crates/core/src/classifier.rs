//! Per-task concept classifier: probability that an image shows the personal
//! subject (its shape painted with the personal attribute bundle).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::concept::{self, AttributeBundle, Background, ConceptTask, Pose, Scene, ShapeClass};
use crate::error::{LabError, Result};
use crate::ops;
use crate::rng::{self, LabRng};
use crate::train::SubsetOptimizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of negatives drawn with the task's source attribute bundle.
    pub source_negative_frac: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 32,
            lr: 3e-3,
            source_negative_frac: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConceptClassifier {
    params: BTreeMap<String, Tensor>,
}

const LAYERS: [(&str, usize, usize); 3] = [("c1", 3, 16), ("c2", 16, 32), ("c3", 32, 32)];

fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    Ok(x.reshape((b, h / 2, 2, w / 2, 2, c))?.mean(4)?.mean(2)?)
}

impl ConceptClassifier {
    fn init(seed: u64) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (name, ci, co) in LAYERS {
            let mut r = rng::child_rng(seed, name);
            params.insert(format!("{name}.w"), (rng::randn(&mut r, &[9 * ci, co])? / (9.0 * ci as f64).sqrt())?);
            params.insert(format!("{name}.b"), Tensor::zeros(co, candle_core::DType::F32, &Device::Cpu)?);
        }
        let mut r = rng::child_rng(seed, "head");
        params.insert("head.w".into(), (rng::randn(&mut r, &[64, 1])? / 8.0)?);
        params.insert("head.b".into(), Tensor::zeros(1, candle_core::DType::F32, &Device::Cpu)?);
        Ok(Self { params })
    }

    fn p(&self, n: &str) -> &Tensor {
        &self.params[n]
    }

    /// Logits `(B,)` for `[0, 1]` images `(B, 3, H, W)`.
    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.affine(2.0, -1.0)?.permute((0, 2, 3, 1))?.contiguous()?;
        for (i, (name, _, _)) in LAYERS.iter().enumerate() {
            h = ops::silu(&ops::conv3x3(&h, self.p(&format!("{name}.w")), self.p(&format!("{name}.b")))?)?;
            if i < 2 {
                h = avg_pool2(&h)?;
            }
        }
        let (b, hh, ww, c) = h.dims4()?;
        let flat = h.reshape((b, hh * ww, c))?;
        let feat = Tensor::cat(&[flat.mean(1)?, flat.max(1)?], D::Minus1)?;
        Ok(ops::linear(&feat, self.p("head.w"), Some(self.p("head.b")))?.squeeze(1)?)
    }

    /// Personal-concept probability of each image in a batch.
    pub fn predict_batch(&self, images: &[Tensor]) -> Result<Vec<f64>> {
        let x = Tensor::stack(images, 0)?;
        let p = candle_nn::ops::sigmoid(&self.logits(&x)?)?;
        Ok(p.to_vec1::<f32>()?.into_iter().map(f64::from).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = safetensors::serialize(self.params.iter().map(|(k, v)| (k.as_str(), v)), None::<HashMap<String, String>>)?;
        crate::image_io::ensure_parent(path)?;
        std::fs::write(path, bytes).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
        let params = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
            .into_iter()
            .collect();
        Ok(Self { params })
    }
}

/// Classifier lookup by task name; scoring an unknown task is an error.
#[derive(Debug, Clone, Default)]
pub struct ClassifierBank {
    pub by_task: BTreeMap<String, ConceptClassifier>,
}

impl ClassifierBank {
    pub fn concept_score(&self, task: &str, image: &Tensor) -> Result<f64> {
        let c = self
            .by_task
            .get(task)
            .ok_or_else(|| LabError::InvalidState(format!("no concept classifier for task {task}")))?;
        Ok(c.predict_batch(std::slice::from_ref(image))?[0])
    }
}

fn labelled_scene(task: &ConceptTask, positive: bool, source_frac: f64, r: &mut LabRng) -> Scene {
    let spec = &task.generator.spec;
    let attrs = if positive {
        spec.personal
    } else if r.random_bool(source_frac) {
        spec.source_attrs
    } else {
        let mut a = AttributeBundle::random(r);
        while a.looks_like(&spec.personal) {
            a = AttributeBundle::random(r);
        }
        a
    };
    let shape = if positive || r.random_bool(0.8) {
        spec.shape
    } else {
        ShapeClass::ALL[r.random_range(0..ShapeClass::ALL.len())]
    };
    let mut scene = concept::random_scene(r);
    scene.shape = shape;
    scene.attrs = attrs;
    scene.background = Background::ALL[r.random_range(0..Background::ALL.len())];
    scene.pose = Pose::random(r);
    scene
}

/// Renders a labelled sample with a little pixel noise.
pub fn labelled_image(task: &ConceptTask, positive: bool, source_frac: f64, r: &mut LabRng) -> Result<Tensor> {
    let scene = labelled_scene(task, positive, source_frac, r);
    let img = concept::render(&scene).tensor()?;
    let sigma = r.random_range(0.0..0.06);
    let noise = (rng::randn(r, img.dims())? * sigma)?;
    Ok((img + noise)?.clamp(0f32, 1f32)?)
}

/// Trains a classifier on generator-labelled renders of the task's concept.
pub fn train_classifier(task: &ConceptTask, cfg: &ClassifierConfig) -> Result<ConceptClassifier> {
    let init = ConceptClassifier::init(cfg.seed)?;
    let mut r = rng::child_rng(cfg.seed, &format!("classifier-{}", task.name));
    let names: Vec<String> = init.params.keys().cloned().collect();
    let mut vars = Vec::new();
    let mut model = init.clone();
    for n in &names {
        let v = candle_core::Var::from_tensor(&init.params[n])?;
        model.params.insert(n.clone(), v.as_tensor().clone());
        vars.push((n.clone(), v));
    }
    let mut opt = SubsetOptimizer::new(vars, cfg.lr, 0.0, 0, 0.0)?;
    for _ in 0..cfg.steps {
        let mut imgs = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for i in 0..cfg.batch_size {
            let pos = i % 2 == 0;
            imgs.push(labelled_image(task, pos, cfg.source_negative_frac, &mut r)?);
            labels.push(if pos { 1f32 } else { 0.0 });
        }
        let x = Tensor::stack(&imgs, 0)?;
        let y = Tensor::from_vec(labels, cfg.batch_size, &Device::Cpu)?;
        let z = model.logits(&x)?;
        // numerically stable binary cross-entropy with logits
        let loss = (z.relu()? - (&z * &y)? + z.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?)?.mean_all()?;
        let grads = loss.backward()?;
        opt.step(&grads)?;
    }
    let params = model
        .params
        .iter()
        .map(|(k, v)| Ok((k.clone(), v.detach().copy()?)))
        .collect::<Result<_>>()?;
    Ok(ConceptClassifier { params })
}

/// Held-out accuracy summary: mean score on positives and on source-bundle negatives.
pub fn validate_classifier(c: &ConceptClassifier, task: &ConceptTask, n: usize, seed: u64) -> Result<(f64, f64)> {
    let mut r = rng::child_rng(seed, &format!("classifier-val-{}", task.name));
    let pos: Vec<Tensor> = (0..n).map(|_| labelled_image(task, true, 1.0, &mut r)).collect::<Result<_>>()?;
    let neg: Vec<Tensor> = (0..n).map(|_| labelled_image(task, false, 1.0, &mut r)).collect::<Result<_>>()?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(c.predict_batch(&pos)?), mean(c.predict_batch(&neg)?)))
}
