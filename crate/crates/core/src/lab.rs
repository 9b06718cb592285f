//! The shared experimental fixture: base model, synthesized tasks,
//! personalized models, and concept classifiers, cached on disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{self, ClassifierBank, ClassifierConfig, ConceptClassifier};
use crate::concept::{self, ConceptTask, TaskSpec};
use crate::denoiser::{ArchConfig, DenoiserParams};
use crate::error::{LabError, Result};
use crate::prompt::Vocab;
use crate::rng;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::train::{self, PersonalizationMode, PersonalizeConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub width: usize,
    pub dataset_size: usize,
    pub base: TrainConfig,
    pub personalize: PersonalizeConfig,
    pub classifier: ClassifierConfig,
    pub modes: Vec<PersonalizationMode>,
    pub tasks: Vec<TaskSpec>,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            schedule: ScheduleConfig::default(),
            width: 32,
            dataset_size: 4000,
            base: TrainConfig::default(),
            personalize: PersonalizeConfig::default(),
            classifier: ClassifierConfig::default(),
            modes: PersonalizationMode::ALL.to_vec(),
            tasks: TaskSpec::standard_suite(),
        }
    }
}

impl LabConfig {
    /// Content hash of the whole config.
    pub fn hash(&self) -> String {
        short_hash(&[serde_json::to_vec(self).expect("lab config serializes")])
    }

    /// Key of the base model: changes only when the base-training inputs change.
    fn base_key(&self) -> String {
        let v = serde_json::json!([self.seed, self.schedule, self.width, self.dataset_size, self.base]);
        short_hash(&[v.to_string().into_bytes()])
    }

    fn personalize_key(&self) -> String {
        short_hash(&[
            self.base_key().into_bytes(),
            self.task_key().into_bytes(),
            serde_json::to_vec(&self.personalize).expect("serializes"),
        ])
    }

    fn task_key(&self) -> String {
        short_hash(&[self.seed.to_le_bytes().to_vec(), serde_json::to_vec(&self.tasks).expect("serializes")])
    }

    fn classifier_key(&self) -> String {
        short_hash(&[self.task_key().into_bytes(), serde_json::to_vec(&self.classifier).expect("serializes")])
    }
}

/// Pipeline stages in build order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Base,
    Personalized,
    Classifiers,
}

pub struct Lab {
    pub config: LabConfig,
    pub sched: NoiseSchedule,
    pub vocab: Vocab,
    pub phi0: DenoiserParams,
    pub base_losses: Vec<f64>,
    pub tasks: Vec<ConceptTask>,
    pub personalized: BTreeMap<(String, PersonalizationMode), DenoiserParams>,
    pub classifiers: ClassifierBank,
    pub dir: PathBuf,
}

fn short_hash(parts: &[Vec<u8>]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    hex::encode(&h.finalize()[..8])
}

fn load_or<T>(
    path: &Path,
    load: impl FnOnce(&Path) -> Result<T>,
    make: impl FnOnce() -> Result<T>,
    save: impl FnOnce(&T, &Path) -> Result<()>,
) -> Result<T> {
    if path.exists() {
        if let Ok(v) = load(path) {
            return Ok(v);
        }
    }
    let v = make()?;
    save(&v, path)?;
    Ok(v)
}

impl Lab {
    /// Loads every artifact found under `root` and builds the rest.
    ///
    /// Each stage lives in a directory named after the hash of the inputs it
    /// depends on, so changing a late stage never retrains an early one.
    pub fn build(config: LabConfig, root: &Path, log: impl FnMut(&str)) -> Result<Lab> {
        Self::build_until(config, root, Stage::Classifiers, log)
    }

    /// Like [`Lab::build`] but skips every stage after `last`.
    pub fn build_until(config: LabConfig, root: &Path, last: Stage, mut log: impl FnMut(&str)) -> Result<Lab> {
        let dir = root.join(format!("base-{}", config.base_key()));
        std::fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
        let cfg_path = root.join(format!("lab-{}.json", config.hash()));
        std::fs::write(&cfg_path, serde_json::to_vec_pretty(&config)?).map_err(|e| LabError::io(&cfg_path, e))?;
        let sched = NoiseSchedule::new(config.schedule.clone())?;
        let vocab = Vocab::toy();

        let base_path = dir.join("base.safetensors");
        let loss_path = dir.join("base_losses.json");
        let (phi0, base_losses) = if base_path.exists() {
            let (p, _) = DenoiserParams::load(&base_path)?;
            let losses = std::fs::read(&loss_path)
                .ok()
                .and_then(|b| serde_json::from_slice(&b).ok())
                .unwrap_or_default();
            (p, losses)
        } else {
            log("training base model");
            let mut arch = ArchConfig::toy(vocab.len());
            arch.width = config.width;
            arch.schedule = config.schedule.clone();
            let init = DenoiserParams::init(arch, vocab.clone(), rng::derive_seed(config.seed, "base-init"))?;
            let data = train::world_dataset(rng::derive_seed(config.seed, "world"), config.dataset_size, &vocab)?;
            let mut base_cfg = config.base.clone();
            base_cfg.seed = rng::derive_seed(config.seed, "base-train");
            let every = (base_cfg.steps / 20).max(1);
            let mut window = 0f64;
            let (p, curve) = train::train_base(&init, &data, &sched, &base_cfg, |step, loss| {
                window += loss;
                if (step + 1) % every == 0 {
                    log(&format!("base step {} loss {:.2}", step + 1, window / every as f64));
                    window = 0.0;
                }
            })?;
            p.save(&base_path, &p.header(&sched.hash(), None)?)?;
            std::fs::write(&loss_path, serde_json::to_vec(&curve.losses)?).map_err(|e| LabError::io(&loss_path, e))?;
            (p, curve.losses)
        };

        let mut tasks = Vec::new();
        for spec in &config.tasks {
            let tdir = root.join(format!("tasks-{}", config.task_key())).join(&spec.name);
            let task = load_or(
                &tdir,
                |d| concept::load_task(d, &vocab),
                || concept::synthesize_task(rng::derive_seed(config.seed, "tasks"), spec, &vocab),
                |t, d| concept::save_task(t, &vocab, d),
            )?;
            tasks.push(task);
        }

        let mut personalized = BTreeMap::new();
        for task in tasks.iter().filter(|_| last >= Stage::Personalized) {
            for &mode in &config.modes {
                let path = root.join(format!("personalized-{}", config.personalize_key())).join(format!("{}_{}.safetensors", task.name, mode.as_str()));
                let params = load_or(
                    &path,
                    |p| Ok(DenoiserParams::load(p)?.0),
                    || {
                        log(&format!("personalizing {} ({})", task.name, mode.as_str()));
                        let mut pc = config.personalize.clone();
                        pc.seed = rng::derive_seed(config.seed, &format!("personalize-{}", task.name));
                        let out = train::personalize(&phi0, task, mode, &sched, &pc)?;
                        log(&format!(
                            "  validation loss {:.2} -> {:.2}",
                            out.validation_before, out.validation_after
                        ));
                        Ok(out.params)
                    },
                    |p, path| p.save(path, &p.header(&sched.hash(), None)?),
                )?;
                personalized.insert((task.name.clone(), mode), params);
            }
        }

        let mut classifiers = ClassifierBank::default();
        for task in tasks.iter().filter(|_| last >= Stage::Classifiers) {
            let path = root.join(format!("classifiers-{}", config.classifier_key())).join(format!("{}.safetensors", task.name));
            let c = load_or(
                &path,
                ConceptClassifier::load,
                || {
                    log(&format!("training concept classifier for {}", task.name));
                    let mut cc = config.classifier.clone();
                    cc.seed = rng::derive_seed(config.seed, &format!("classifier-{}", task.name));
                    classifier::train_classifier(task, &cc)
                },
                |c, p| c.save(p),
            )?;
            classifiers.by_task.insert(task.name.clone(), c);
        }

        Ok(Lab {
            config,
            sched,
            vocab,
            phi0,
            base_losses,
            tasks,
            personalized,
            classifiers,
            dir,
        })
    }

    pub fn task(&self, name: &str) -> Result<&ConceptTask> {
        self.tasks
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| LabError::InvalidArgument(format!("unknown task {name}")))
    }

    pub fn personalized(&self, task: &str, mode: PersonalizationMode) -> Result<&DenoiserParams> {
        self.personalized
            .get(&(task.to_string(), mode))
            .ok_or_else(|| LabError::InvalidState(format!("task {task} has no {} model", mode.as_str())))
    }
}
