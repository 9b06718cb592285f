//! Run matrix, metrics aggregation and report persistence.
//!
//! Every run writes its own directory (`config.snapshot`, `metrics.json`,
//! `trace.jsonl`, PNGs). The report is a pure function of those `metrics.json`
//! files, so [`recompute_report`] reproduces it from disk.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierBank;
use crate::concept::ConceptTask;
use crate::editing::{self, EditConfig, EditContext};
use crate::error::{bail_arg, LabError, Result};
use crate::guidance::{self, GuidanceConfig, GuidedSet, Inversion};
use crate::image_io::{self, to_model_space};
use crate::lab::Lab;
use crate::mask::{self, SubjectMask};
use crate::metrics;
use crate::rng;
use crate::steer::{self, JacobianMode, SteerConfig};
use crate::train::PersonalizationMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ConceptScore,
    Ssim,
    MsSsim,
}

impl Metric {
    /// CSV order: concept alignment first, then source alignment.
    pub const ALL: [Metric; 3] = [Metric::ConceptScore, Metric::Ssim, Metric::MsSsim];

    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::ConceptScore => "concept_score",
            Metric::Ssim => "ssim",
            Metric::MsSsim => "ms_ssim",
        }
    }
}

/// What a run produces and measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    /// Edit the source image (optionally after steering) and score the edit.
    Edit,
    /// Score the structure-guided samples themselves against the source.
    Guided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Row label, e.g. `baseline` or `steered`.
    pub label: String,
    pub kind: RunKind,
    pub task: String,
    pub mode: PersonalizationMode,
    /// Absent for the unsteered baseline.
    pub steer: Option<SteerConfig>,
    pub guidance: GuidanceConfig,
    pub edit: EditConfig,
    pub metrics: Vec<Metric>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl RunConfig {
    pub fn run_id(&self) -> String {
        format!("{}-{}-{}-s{}", self.label, self.task, self.mode.as_str(), self.seed)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join("runs").join(self.run_id())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run_id: String,
    pub label: String,
    pub task: String,
    pub mode: PersonalizationMode,
    pub seed: u64,
    /// `None` on success, the error message otherwise.
    pub failure: Option<String>,
    pub metrics: BTreeMap<Metric, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub label: String,
    pub mode: PersonalizationMode,
    pub n_ok: usize,
    pub n_failed: usize,
    pub means: BTreeMap<Metric, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub label: String,
    pub baseline: String,
    pub mode: PersonalizationMode,
    pub metric: Metric,
    pub old: f64,
    pub new: f64,
    /// `(new - old) / old`.
    pub relative: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<RunRow>,
    pub aggregates: Vec<AggregateRow>,
    pub deltas: Vec<DeltaRow>,
}

pub const BASELINE: &str = "baseline";

pub fn relative_delta(new: f64, old: f64) -> f64 {
    (new - old) / old
}

impl MetricReport {
    /// Aggregates successful rows per (label, mode) and computes deltas of
    /// every label against [`BASELINE`] in the same mode.
    pub fn from_rows(mut rows: Vec<RunRow>) -> Self {
        rows.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        let mut groups: BTreeMap<(String, PersonalizationMode), Vec<&RunRow>> = BTreeMap::new();
        for r in &rows {
            groups.entry((r.label.clone(), r.mode)).or_default().push(r);
        }
        let mut aggregates = Vec::new();
        for ((label, mode), members) in &groups {
            let ok: Vec<&&RunRow> = members.iter().filter(|r| r.failure.is_none()).collect();
            let mut means = BTreeMap::new();
            for m in Metric::ALL {
                let vals: Vec<f64> = ok.iter().filter_map(|r| r.metrics.get(&m).copied()).collect();
                if !vals.is_empty() {
                    means.insert(m, vals.iter().sum::<f64>() / vals.len() as f64);
                }
            }
            aggregates.push(AggregateRow {
                label: label.clone(),
                mode: *mode,
                n_ok: ok.len(),
                n_failed: members.len() - ok.len(),
                means,
            });
        }
        let mut deltas = Vec::new();
        for a in &aggregates {
            if a.label == BASELINE {
                continue;
            }
            let Some(base) = aggregates.iter().find(|b| b.label == BASELINE && b.mode == a.mode) else {
                continue;
            };
            for (m, &new) in &a.means {
                if let Some(&old) = base.means.get(m) {
                    deltas.push(DeltaRow {
                        label: a.label.clone(),
                        baseline: BASELINE.into(),
                        mode: a.mode,
                        metric: *m,
                        old,
                        new,
                        relative: relative_delta(new, old),
                    });
                }
            }
        }
        Self {
            rows,
            aggregates,
            deltas,
        }
    }

    pub fn aggregate(&self, label: &str, mode: PersonalizationMode) -> Option<&AggregateRow> {
        self.aggregates.iter().find(|a| a.label == label && a.mode == mode)
    }

    /// Mean of `metric` over all successful rows with `label`, any mode.
    pub fn label_mean(&self, label: &str, metric: Metric) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.label == label && r.failure.is_none())
            .filter_map(|r| r.metrics.get(&metric).copied())
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn row(&self, label: &str, task: &str, mode: PersonalizationMode, seed: u64) -> Option<&RunRow> {
        self.rows
            .iter()
            .find(|r| r.label == label && r.task == task && r.mode == mode && r.seed == seed)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("run_id,label,task,mode,seed,status");
        for m in Metric::ALL {
            s.push(',');
            s.push_str(m.as_str());
        }
        s.push('\n');
        for r in &self.rows {
            let status = if r.failure.is_some() { "failed" } else { "ok" };
            s.push_str(&format!("{},{},{},{},{},{}", r.run_id, r.label, r.task, r.mode.as_str(), r.seed, status));
            for m in Metric::ALL {
                s.push(',');
                if let Some(v) = r.metrics.get(&m) {
                    s.push_str(&format!("{v:.6}"));
                }
            }
            s.push('\n');
        }
        s
    }

    /// Writes `report.json` and `report.csv` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
        let json = dir.join("report.json");
        std::fs::write(&json, serde_json::to_vec_pretty(self)?).map_err(|e| LabError::io(&json, e))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| LabError::io(&csv, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("report.json");
        let bytes = std::fs::read(&path).map_err(|e| LabError::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Rebuilds the report from the `metrics.json` of every run under `dir/runs`.
pub fn recompute_report(dir: &Path) -> Result<MetricReport> {
    let runs = dir.join("runs");
    let mut rows = Vec::new();
    if runs.exists() {
        for entry in std::fs::read_dir(&runs).map_err(|e| LabError::io(&runs, e))? {
            let path = entry.map_err(|e| LabError::io(&runs, e))?.path().join("metrics.json");
            if path.exists() {
                let bytes = std::fs::read(&path).map_err(|e| LabError::io(&path, e))?;
                rows.push(serde_json::from_slice(&bytes)?);
            }
        }
    }
    Ok(MetricReport::from_rows(rows))
}

/// Scores one image against the task.
pub fn score_image(
    classifiers: &ClassifierBank,
    task: &ConceptTask,
    image: &Tensor,
    which: &[Metric],
) -> Result<BTreeMap<Metric, f64>> {
    let mut out = BTreeMap::new();
    for m in which {
        let v = match m {
            Metric::ConceptScore => classifiers.concept_score(&task.name, image)?,
            Metric::Ssim => metrics::ssim(image, &task.source_image)?,
            Metric::MsSsim => metrics::ms_ssim(image, &task.source_image)?,
        };
        out.insert(*m, v);
    }
    Ok(out)
}

#[derive(Serialize)]
struct TraceLine<'a, T: Serialize> {
    phase: &'a str,
    #[serde(flatten)]
    row: &'a T,
}

/// Shared intermediate results. Guided sets depend only on the personalized
/// model, task, guidance config and seed, so steering variants reuse them.
#[derive(Default)]
pub struct RunCache {
    guided: Mutex<HashMap<String, GuidedSet>>,
    inversions: Mutex<HashMap<String, (Inversion, SubjectMask)>>,
}

fn cache_key<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("cache keys serialize")
}

fn inversion_for(lab: &Lab, task: &ConceptTask, g: &GuidanceConfig, cache: &RunCache) -> Result<(Inversion, SubjectMask)> {
    let key = cache_key(&(&task.name, g.inversion_beta, &g.layers));
    if let Some(v) = cache.inversions.lock().expect("cache lock").get(&key) {
        return Ok(v.clone());
    }
    let x0 = to_model_space(&task.source_image)?;
    let mut layers = g.layers.clone();
    for l in mask::default_mask_layers() {
        if !layers.contains(&l) {
            layers.push(l);
        }
    }
    let inv = guidance::invert_and_cache(&lab.phi0, &lab.sched, &x0, &task.source_prompt, g.inversion_beta, &layers)?;
    let (_, h, w) = task.source_image.dims3()?;
    let m = mask::extract_subject_mask(&inv.cache, task.source_class_token, &mask::default_mask_layers(), (h, w), None)?;
    cache.inversions.lock().expect("cache lock").insert(key, (inv.clone(), m.clone()));
    Ok((inv, m))
}

fn guided_for(
    lab: &Lab,
    task: &ConceptTask,
    cfg: &RunConfig,
    n: usize,
    inv: &Inversion,
    cache: &RunCache,
) -> Result<GuidedSet> {
    let seed = rng::derive_seed(cfg.seed, &format!("guided-{}", task.name));
    let key = cache_key(&(&task.name, cfg.mode, &cfg.guidance, n, seed));
    if let Some(v) = cache.guided.lock().expect("cache lock").get(&key) {
        return Ok(v.clone());
    }
    let phi = lab.personalized(&task.name, cfg.mode)?;
    let set = guidance::generate_guided_set(phi, &lab.phi0, &lab.sched, task, &cfg.guidance, n, seed, Some(inv))?;
    cache.guided.lock().expect("cache lock").insert(key, set.clone());
    Ok(set)
}

fn execute(lab: &Lab, cfg: &RunConfig, cache: &RunCache, dir: &Path) -> Result<BTreeMap<Metric, f64>> {
    let task = lab.task(&cfg.task)?;
    let phi = lab.personalized(&task.name, cfg.mode)?;
    let (inv, subject_mask) = inversion_for(lab, task, &cfg.guidance, cache)?;
    let mut trace = String::new();
    let n_guided = cfg
        .steer
        .as_ref()
        .and_then(|s| s.guided_set_size)
        .unwrap_or_else(|| task.n_refs());

    if cfg.kind == RunKind::Guided {
        let set = guided_for(lab, task, cfg, n_guided, &inv, cache)?;
        set.save(dir)?;
        let mut sums: BTreeMap<Metric, f64> = BTreeMap::new();
        for img in &set.images {
            for (m, v) in score_image(&lab.classifiers, task, img, &cfg.metrics)? {
                *sums.entry(m).or_default() += v;
            }
        }
        return Ok(sums.into_iter().map(|(m, v)| (m, v / set.len() as f64)).collect());
    }

    let steered;
    let model = match &cfg.steer {
        None => phi,
        Some(sc) => {
            let needs_set = sc.ms_weight != 0.0;
            let set = if needs_set {
                let s = guided_for(lab, task, cfg, n_guided, &inv, cache)?;
                s.save(dir)?;
                s
            } else {
                GuidedSet::default()
            };
            let mut sc = sc.clone();
            sc.seed = rng::derive_seed(cfg.seed, &format!("steer-{}", task.name));
            let out = steer::steer(phi, &lab.phi0, &lab.sched, task, cfg.mode, &sc, &set)?;
            for row in &out.trace {
                trace.push_str(&serde_json::to_string(&TraceLine { phase: "steer", row })?);
                trace.push('\n');
            }
            steered = out.params;
            &steered
        }
    };

    let x_src = to_model_space(&task.source_image)?;
    let target = task.target_prompt()?;
    let ctx = EditContext {
        sched: &lab.sched,
        phi: model,
        phi0: &lab.phi0,
        target_prompt: &target,
        source_prompt: &task.source_prompt,
        x_src: &x_src,
        target_beta: cfg.edit.target_beta,
        source_beta: cfg.edit.source_beta,
    };
    let mut ec = cfg.edit.clone();
    // baseline and steered rows share the edit noise for a paired comparison
    ec.seed = rng::derive_seed(cfg.seed, &format!("edit-{}", task.name));
    let out = editing::run_edit(&ctx, &ec, Some(&subject_mask))?;
    for row in &out.trace {
        trace.push_str(&serde_json::to_string(&TraceLine { phase: "edit", row })?);
        trace.push('\n');
    }
    let trace_path = dir.join("trace.jsonl");
    std::fs::write(&trace_path, trace).map_err(|e| LabError::io(&trace_path, e))?;
    let img = out.image()?;
    image_io::save_rgb_png(&img, &dir.join("edit.png"))?;
    subject_mask.save_png(&dir.join("mask.png"))?;
    score_image(&lab.classifiers, task, &img, &cfg.metrics)
}

/// Executes one run and persists its artifacts; failures become failed rows.
pub fn run_one(lab: &Lab, cfg: &RunConfig, cache: &RunCache) -> Result<RunRow> {
    let dir = cfg.run_dir();
    std::fs::create_dir_all(&dir).map_err(|e| LabError::io(&dir, e))?;
    let snap = dir.join("config.snapshot");
    std::fs::write(&snap, cfg.to_toml()?).map_err(|e| LabError::io(&snap, e))?;
    let (metrics, failure) = match execute(lab, cfg, cache, &dir) {
        Ok(m) => (m, None),
        Err(e) => (BTreeMap::new(), Some(e.to_string())),
    };
    let row = RunRow {
        run_id: cfg.run_id(),
        label: cfg.label.clone(),
        task: cfg.task.clone(),
        mode: cfg.mode,
        seed: cfg.seed,
        failure,
        metrics,
    };
    let path = dir.join("metrics.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&row)?).map_err(|e| LabError::io(&path, e))?;
    Ok(row)
}

/// Runs every config on a worker pool and aggregates the results.
///
/// When `reuse` is set, a run whose directory already holds a `metrics.json`
/// for an identical `config.snapshot` is read back instead of recomputed.
pub fn run_benchmark(
    lab: &Lab,
    configs: &[RunConfig],
    workers: usize,
    reuse: bool,
    progress: &(dyn Fn(&RunRow, usize, usize) + Sync),
) -> Result<MetricReport> {
    let mut ids = std::collections::BTreeSet::new();
    for c in configs {
        if !ids.insert((c.output_dir.clone(), c.run_id())) {
            bail_arg!("duplicate run id {}", c.run_id());
        }
    }
    let cache = RunCache::default();
    let next = AtomicUsize::new(0);
    let done = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunRow>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.max(1).min(configs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = configs.get(i) else { break };
                let row = match reuse.then(|| cached_row(cfg)).flatten() {
                    Some(r) => Ok(r),
                    None => run_one(lab, cfg, &cache),
                };
                if let Ok(r) = &row {
                    progress(r, done.fetch_add(1, Ordering::SeqCst) + 1, configs.len());
                }
                results.lock().expect("result lock")[i] = Some(row);
            });
        }
    });
    let rows = results
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every run completes"))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_rows(rows))
}

fn cached_row(cfg: &RunConfig) -> Option<RunRow> {
    let dir = cfg.run_dir();
    let snap = std::fs::read_to_string(dir.join("config.snapshot")).ok()?;
    if snap != cfg.to_toml().ok()? {
        return None;
    }
    let row: RunRow = serde_json::from_slice(&std::fs::read(dir.join("metrics.json")).ok()?).ok()?;
    row.failure.is_none().then_some(row)
}

/// Which parts of the experiment matrix to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPlan {
    pub tasks: Vec<String>,
    pub modes: Vec<PersonalizationMode>,
    /// Seeds of the baseline-vs-steered comparison.
    pub seeds: Vec<u64>,
    /// Seeds of the EDSD / mode-shifting ablation rows.
    pub ablation_seeds: Vec<u64>,
    /// Modes of the Jacobian ablation.
    pub jacobian_modes: Vec<PersonalizationMode>,
    pub jacobian_seeds: Vec<u64>,
    /// Modes and seeds of the guidance-strength comparison.
    pub guidance_modes: Vec<PersonalizationMode>,
    pub guidance_seeds: Vec<u64>,
    pub guidance_lambdas: Vec<f64>,
    pub steer: SteerConfig,
    pub guidance: GuidanceConfig,
    pub edit: EditConfig,
    pub output_dir: PathBuf,
}

impl BenchPlan {
    pub fn standard(lab: &Lab, output_dir: PathBuf) -> Self {
        Self {
            tasks: lab.tasks.iter().map(|t| t.name.clone()).collect(),
            modes: lab.config.modes.clone(),
            seeds: vec![0, 1, 2],
            ablation_seeds: vec![0],
            jacobian_modes: vec![PersonalizationMode::Full],
            jacobian_seeds: vec![0],
            guidance_modes: lab.config.modes.clone(),
            guidance_seeds: vec![0],
            guidance_lambdas: vec![0.0, 15.0],
            steer: SteerConfig::default(),
            guidance: GuidanceConfig::default(),
            edit: EditConfig::default(),
            output_dir,
        }
    }

    fn base(&self, label: &str, task: &str, mode: PersonalizationMode, seed: u64) -> RunConfig {
        RunConfig {
            label: label.into(),
            kind: RunKind::Edit,
            task: task.into(),
            mode,
            steer: None,
            guidance: self.guidance.clone(),
            edit: self.edit.clone(),
            metrics: Metric::ALL.to_vec(),
            output_dir: self.output_dir.clone(),
            seed,
        }
    }

    /// Baseline and steered rows for every (task, mode, seed).
    pub fn main_grid(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for task in &self.tasks {
            for &mode in &self.modes {
                for &seed in &self.seeds {
                    out.push(self.base(BASELINE, task, mode, seed));
                    let mut s = self.base("steered", task, mode, seed);
                    s.steer = Some(self.steer.clone());
                    out.push(s);
                }
            }
        }
        out
    }

    /// The two reduced steering variants; the full variant is the `steered` row.
    pub fn ablation_grid(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for task in &self.tasks {
            for &mode in &self.modes {
                for &seed in &self.ablation_seeds {
                    let mut a = self.base("no_edsd", task, mode, seed);
                    a.steer = Some(SteerConfig {
                        edsd_weight: 0.0,
                        ..self.steer.clone()
                    });
                    out.push(a);
                    let mut b = self.base("no_ms", task, mode, seed);
                    b.steer = Some(SteerConfig {
                        ms_weight: 0.0,
                        ..self.steer.clone()
                    });
                    out.push(b);
                }
            }
        }
        out
    }

    pub fn jacobian_grid(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for task in &self.tasks {
            for &mode in &self.jacobian_modes {
                for &seed in &self.jacobian_seeds {
                    let mut a = self.base("identity_jacobian", task, mode, seed);
                    a.steer = Some(SteerConfig {
                        jacobian_mode: JacobianMode::Identity,
                        ..self.steer.clone()
                    });
                    out.push(a);
                }
            }
        }
        out
    }

    pub fn guidance_grid(&self) -> Vec<RunConfig> {
        let mut out = Vec::new();
        for task in &self.tasks {
            for &mode in &self.guidance_modes {
                for &seed in &self.guidance_seeds {
                    for &lambda in &self.guidance_lambdas {
                        let mut g = self.base(&guided_label(lambda), task, mode, seed);
                        g.kind = RunKind::Guided;
                        g.guidance.lambda = lambda;
                        g.metrics = vec![Metric::ConceptScore, Metric::MsSsim];
                        out.push(g);
                    }
                }
            }
        }
        out
    }

    pub fn all(&self) -> Vec<RunConfig> {
        let mut v = self.main_grid();
        v.extend(self.ablation_grid());
        v.extend(self.jacobian_grid());
        v.extend(self.guidance_grid());
        v
    }
}

pub fn guided_label(lambda: f64) -> String {
    format!("guided_l{lambda}")
}

fn load_png_or_blank(path: &Path) -> Result<Tensor> {
    if path.exists() {
        image_io::load_rgb_png(path)
    } else {
        Ok(Tensor::ones((3, 32, 32), candle_core::DType::F32, &candle_core::Device::Cpu)?)
    }
}

/// Comparison strips per (task, mode, seed): source, references, baseline
/// edit, steered edit, mask, guided samples. Returns the written paths.
pub fn emit_grids(report: &MetricReport, lab: &Lab, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let runs = dir.join("runs");
    for base in report.rows.iter().filter(|r| r.label == BASELINE) {
        let Some(steered) = report.row("steered", &base.task, base.mode, base.seed) else {
            continue;
        };
        let task = lab.task(&base.task)?;
        let bdir = runs.join(&base.run_id);
        let sdir = runs.join(&steered.run_id);
        let mut strip = vec![task.source_image.clone()];
        strip.extend(task.reference_images.iter().cloned());
        strip.push(load_png_or_blank(&bdir.join("edit.png"))?);
        strip.push(load_png_or_blank(&sdir.join("edit.png"))?);
        let mask_path = bdir.join("mask.png");
        if mask_path.exists() {
            let (v, h, w) = image_io::load_gray16_png(&mask_path)?;
            let m = Tensor::from_vec(v, (1, h, w), &candle_core::Device::Cpu)?;
            strip.push(m.broadcast_as((3, h, w))?.contiguous()?);
        }
        let mut i = 0;
        while sdir.join(format!("guided_{i:02}.png")).exists() {
            strip.push(image_io::load_rgb_png(&sdir.join(format!("guided_{i:02}.png")))?);
            i += 1;
        }
        let path = dir.join("grids").join(format!("{}-{}-s{}.png", base.task, base.mode.as_str(), base.seed));
        image_io::save_grid_png(&[strip], &path)?;
        written.push(path);
    }
    Ok(written)
}
