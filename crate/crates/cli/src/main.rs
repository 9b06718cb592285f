use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use steerlab::bench::{self, BenchPlan, Metric, MetricReport};
use steerlab::concept;
use steerlab::editing::{self, EditConfig, EditVariant};
use steerlab::guidance::{self, GuidanceConfig};
use steerlab::image_io::{self, to_model_space};
use steerlab::lab::{Lab, LabConfig, Stage};
use steerlab::mask;
use steerlab::metrics;
use steerlab::rng;
use steerlab::steer::{self, SteerConfig};
use steerlab::train::PersonalizationMode;
use tracing::info;

#[derive(Parser)]
#[command(name = "steerlab", version, about = "Personalized image editing experiments at desk scale")]
struct Cli {
    /// TOML config; every section is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed. STEERLAB_SEED takes precedence.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding per-run output folders.
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,
    /// Cache for the base model, tasks, personalized models and classifiers.
    #[arg(long, global = true, default_value = "runs/cache")]
    cache_dir: PathBuf,
    /// Output folder name; derived from the verb and its arguments when absent.
    #[arg(long, global = true)]
    run_id: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a task's references and source image.
    SynthTask(TaskArg),
    /// Train (or load) the base denoiser.
    TrainBase,
    /// Personalize the base model on a task.
    Personalize(TaskModeArgs),
    /// DDIM-invert a source image, cache features, extract its subject mask.
    Invert(TaskArg),
    /// Draw structure-guided samples of the personal concept.
    Guide(GuideArgs),
    /// Steer a personalized model towards editability.
    Steer(TaskModeArgs),
    /// Edit the source image towards the personal concept.
    Edit(EditArgs),
    /// Run the experiment matrix.
    Bench,
    /// Rebuild a benchmark report from its run folders.
    Report(ReportArgs),
}

#[derive(Args)]
struct TaskArg {
    #[arg(long)]
    task: String,
}

#[derive(Args)]
struct TaskModeArgs {
    #[arg(long)]
    task: String,
    #[arg(long, default_value = "full", value_parser = parse_mode)]
    mode: PersonalizationMode,
}

#[derive(Args)]
struct GuideArgs {
    #[command(flatten)]
    tm: TaskModeArgs,
    /// Overrides the guidance strength from the config.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct EditArgs {
    #[command(flatten)]
    tm: TaskModeArgs,
    /// Steer the model before editing.
    #[arg(long)]
    steered: bool,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<EditVariant>,
}

#[derive(Args)]
struct ReportArgs {
    /// Benchmark folder (defaults to `<runs-dir>/<run-id>`).
    #[arg(long)]
    dir: Option<PathBuf>,
}

fn parse_mode(s: &str) -> std::result::Result<PersonalizationMode, String> {
    PersonalizationMode::parse(s).map_err(|e| e.to_string())
}

fn parse_variant(s: &str) -> std::result::Result<EditVariant, String> {
    EditVariant::parse(s).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    seed: Option<u64>,
    lab: LabConfig,
    steer: SteerConfig,
    guidance: GuidanceConfig,
    edit: EditConfig,
    bench: Option<BenchOverrides>,
}

/// Optional narrowing of the standard benchmark matrix.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct BenchOverrides {
    tasks: Option<Vec<String>>,
    modes: Option<Vec<PersonalizationMode>>,
    seeds: Option<Vec<u64>>,
    ablation_seeds: Option<Vec<u64>>,
    workers: Option<usize>,
}

struct Ctx {
    cfg: FileConfig,
    runs_dir: PathBuf,
    cache_dir: PathBuf,
    run_id: Option<String>,
}

impl Ctx {
    fn lab(&self, last: Stage, task: Option<&str>, mode: Option<PersonalizationMode>) -> Result<Lab> {
        let mut lc = self.cfg.lab.clone();
        if let Some(t) = task {
            lc.tasks.retain(|s| s.name == t);
            if lc.tasks.is_empty() {
                bail!("unknown task {t}");
            }
        }
        if let Some(m) = mode {
            lc.modes = vec![m];
        }
        Ok(Lab::build_until(lc, &self.cache_dir, last, |m| info!("{m}"))?)
    }

    /// Creates the run folder and writes the config snapshot.
    fn run_dir(&self, default_id: String) -> Result<PathBuf> {
        let dir = self.runs_dir.join(self.run_id.clone().unwrap_or(default_id));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("config.snapshot"), toml::to_string_pretty(&self.cfg)?)?;
        Ok(dir)
    }

    fn seed(&self) -> u64 {
        self.cfg.lab.seed
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn load_config(cli: &Cli) -> Result<FileConfig> {
    let mut cfg: FileConfig = match &cli.config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => FileConfig::default(),
    };
    let env_seed = match std::env::var("STEERLAB_SEED") {
        Ok(s) => Some(s.trim().parse::<u64>().context("STEERLAB_SEED must be an unsigned integer")?),
        Err(_) => None,
    };
    if let Some(s) = env_seed.or(cli.seed).or(cfg.seed) {
        cfg.seed = Some(s);
        cfg.lab.seed = s;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let ctx = Ctx {
        cfg: load_config(&cli)?,
        runs_dir: cli.runs_dir.clone(),
        cache_dir: cli.cache_dir.clone(),
        run_id: cli.run_id.clone(),
    };
    match &cli.cmd {
        Cmd::SynthTask(a) => synth_task(&ctx, &a.task),
        Cmd::TrainBase => train_base(&ctx),
        Cmd::Personalize(a) => personalize(&ctx, a),
        Cmd::Invert(a) => invert(&ctx, &a.task),
        Cmd::Guide(a) => guide(&ctx, a),
        Cmd::Steer(a) => steer_cmd(&ctx, a),
        Cmd::Edit(a) => edit(&ctx, a),
        Cmd::Bench => bench_cmd(&ctx),
        Cmd::Report(a) => report(&ctx, a),
    }
}

fn synth_task(ctx: &Ctx, name: &str) -> Result<()> {
    let spec = ctx
        .cfg
        .lab
        .tasks
        .iter()
        .find(|s| s.name == name)
        .with_context(|| format!("unknown task {name}"))?;
    let vocab = steerlab::prompt::Vocab::toy();
    let task = concept::synthesize_task(rng::derive_seed(ctx.seed(), "tasks"), spec, &vocab)?;
    let dir = ctx.run_dir(format!("synth-task-{name}-s{}", ctx.seed()))?;
    concept::save_task(&task, &vocab, &dir.join("task"))?;
    image_io::save_grid_png(
        &[std::iter::once(task.source_image.clone()).chain(task.reference_images.iter().cloned()).collect()],
        &dir.join("overview.png"),
    )?;
    write_json(
        &dir.join("metrics.json"),
        &serde_json::json!({
            "n_refs": task.n_refs(),
            "reference_prompt": vocab.decode(&task.reference_prompt),
            "source_prompt": vocab.decode(&task.source_prompt),
        }),
    )?;
    println!("{}", dir.display());
    Ok(())
}

fn train_base(ctx: &Ctx) -> Result<()> {
    let lab = ctx.lab(Stage::Base, None, None)?;
    let dir = ctx.run_dir(format!("train-base-s{}", ctx.seed()))?;
    let mut trace = String::new();
    for (step, loss) in lab.base_losses.iter().enumerate() {
        trace.push_str(&serde_json::to_string(&serde_json::json!({ "step": step, "loss": loss }))?);
        trace.push('\n');
    }
    std::fs::write(dir.join("trace.jsonl"), trace)?;
    let tail = &lab.base_losses[lab.base_losses.len().saturating_sub(100)..];
    let final_loss = tail.iter().sum::<f64>() / tail.len().max(1) as f64;
    write_json(
        &dir.join("metrics.json"),
        &serde_json::json!({ "params": lab.phi0.param_count(), "final_loss": final_loss }),
    )?;
    println!("{}", dir.display());
    Ok(())
}

fn personalize(ctx: &Ctx, a: &TaskModeArgs) -> Result<()> {
    let lab = ctx.lab(Stage::Personalized, Some(&a.task), Some(a.mode))?;
    let task = lab.task(&a.task)?;
    let phi = lab.personalized(&a.task, a.mode)?;
    let dir = ctx.run_dir(format!("personalize-{}-{}-s{}", a.task, a.mode.as_str(), ctx.seed()))?;
    phi.save(&dir.join("model.safetensors"), &phi.header(&lab.sched.hash(), None)?)?;
    let vseed = rng::derive_seed(ctx.seed(), "validation");
    let data = steerlab::train::reference_examples(task);
    let mut start = lab.phi0.clone();
    start.init_placeholder_from(task.source_class_token, 0.0, vseed)?;
    let before = steerlab::train::validation_loss(&start, &lab.sched, &data, vseed, 8)?;
    let after = steerlab::train::validation_loss(phi, &lab.sched, &data, vseed, 8)?;
    write_json(
        &dir.join("metrics.json"),
        &serde_json::json!({ "validation_loss_before": before, "validation_loss_after": after }),
    )?;
    println!("{}", dir.display());
    Ok(())
}

fn invert(ctx: &Ctx, name: &str) -> Result<()> {
    let lab = ctx.lab(Stage::Base, Some(name), None)?;
    let task = lab.task(name)?;
    let g = &ctx.cfg.guidance;
    let dir = ctx.run_dir(format!("invert-{name}-s{}", ctx.seed()))?;
    let mut layers = g.layers.clone();
    layers.extend(mask::default_mask_layers());
    layers.dedup();
    let x0 = to_model_space(&task.source_image)?;
    let inv = guidance::invert_and_cache(&lab.phi0, &lab.sched, &x0, &task.source_prompt, 1.0, &layers)?;
    inv.cache.save(&dir.join("features.safetensors"))?;
    let recon = guidance::reconstruct(&lab.phi0, &lab.sched, &inv.x_t, &task.source_prompt)?;
    image_io::save_rgb_png(&recon, &dir.join("reconstruction.png"))?;
    let (_, h, w) = task.source_image.dims3()?;
    let m = mask::extract_subject_mask(&inv.cache, task.source_class_token, &mask::default_mask_layers(), (h, w), None)?;
    m.save_png(&dir.join("mask.png"))?;
    let mut trace = String::new();
    for (i, x) in inv.trajectory.iter().enumerate() {
        let norm = x.data.sqr()?.sum_all()?.to_scalar::<f32>()?.sqrt();
        trace.push_str(&serde_json::to_string(&serde_json::json!({ "step": i, "t": x.t, "latent_norm": norm }))?);
        trace.push('\n');
    }
    std::fs::write(dir.join("trace.jsonl"), trace)?;
    write_json(
        &dir.join("metrics.json"),
        &serde_json::json!({
            "round_trip_psnr": metrics::psnr(&recon, &task.source_image)?,
            "mask_iou": concept::mask_iou(&m.binary(0.5), &task.generator.source_mask),
        }),
    )?;
    println!("{}", dir.display());
    Ok(())
}

fn guide(ctx: &Ctx, a: &GuideArgs) -> Result<()> {
    let lab = ctx.lab(Stage::Classifiers, Some(&a.tm.task), Some(a.tm.mode))?;
    let task = lab.task(&a.tm.task)?;
    let mut g = ctx.cfg.guidance.clone();
    if let Some(l) = a.lambda {
        g.lambda = l;
    }
    let n = a.n.unwrap_or_else(|| task.n_refs());
    let dir = ctx.run_dir(format!("guide-{}-{}-l{}-s{}", a.tm.task, a.tm.mode.as_str(), g.lambda, ctx.seed()))?;
    let phi = lab.personalized(&a.tm.task, a.tm.mode)?;
    let seed = rng::derive_seed(ctx.seed(), &format!("guided-{}", task.name));
    let set = guidance::generate_guided_set(phi, &lab.phi0, &lab.sched, task, &g, n, seed, None)?;
    set.save(&dir)?;
    let which = [Metric::ConceptScore, Metric::MsSsim];
    let mut rows = Vec::new();
    for img in &set.images {
        rows.push(bench::score_image(&lab.classifiers, task, img, &which)?);
    }
    let mean = |m: Metric| rows.iter().map(|r| r[&m]).sum::<f64>() / rows.len() as f64;
    write_json(
        &dir.join("metrics.json"),
        &serde_json::json!({
            "concept_score": mean(Metric::ConceptScore),
            "ms_ssim": mean(Metric::MsSsim),
            "per_image": rows,
        }),
    )?;
    println!("{}", dir.display());
    Ok(())
}

fn steer_cmd(ctx: &Ctx, a: &TaskModeArgs) -> Result<()> {
    let lab = ctx.lab(Stage::Personalized, Some(&a.task), Some(a.mode))?;
    let task = lab.task(&a.task)?;
    let phi = lab.personalized(&a.task, a.mode)?;
    let dir = ctx.run_dir(format!("steer-{}-{}-s{}", a.task, a.mode.as_str(), ctx.seed()))?;
    let mut sc = ctx.cfg.steer.clone();
    sc.seed = rng::derive_seed(ctx.seed(), &format!("steer-{}", task.name));
    let n = sc.guided_set_size.unwrap_or_else(|| task.n_refs());
    let set = if sc.ms_weight != 0.0 {
        let seed = rng::derive_seed(ctx.seed(), &format!("guided-{}", task.name));
        let s = guidance::generate_guided_set(phi, &lab.phi0, &lab.sched, task, &ctx.cfg.guidance, n, seed, None)?;
        s.save(&dir)?;
        s
    } else {
        Default::default()
    };
    let out = steer::steer(phi, &lab.phi0, &lab.sched, task, a.mode, &sc, &set)?;
    let from = format!("{}:{}", task.name, a.mode.as_str());
    out.params
        .save(&dir.join("model.safetensors"), &out.params.header(&lab.sched.hash(), Some(from))?)?;
    editing::write_jsonl(&out.trace, &dir.join("trace.jsonl"))?;
    let last = out.trace.last();
    write_json(
        &dir.join("metrics.json"),
        &serde_json::json!({
            "final_edsd_surrogate": last.map(|r| r.edsd_loss_surrogate),
            "final_ms_loss": last.map(|r| r.ms_loss),
        }),
    )?;
    println!("{}", dir.display());
    Ok(())
}

fn edit(ctx: &Ctx, a: &EditArgs) -> Result<()> {
    let lab = ctx.lab(Stage::Classifiers, Some(&a.tm.task), Some(a.tm.mode))?;
    let label = if a.steered { "steered" } else { bench::BASELINE };
    let mut edit = ctx.cfg.edit.clone();
    if let Some(v) = a.variant {
        edit.variant = v;
    }
    let cfg = bench::RunConfig {
        label: label.into(),
        kind: bench::RunKind::Edit,
        task: a.tm.task.clone(),
        mode: a.tm.mode,
        steer: a.steered.then(|| ctx.cfg.steer.clone()),
        guidance: ctx.cfg.guidance.clone(),
        edit,
        metrics: Metric::ALL.to_vec(),
        output_dir: ctx.runs_dir.join(ctx.run_id.clone().unwrap_or_else(|| format!("edit-s{}", ctx.seed()))),
        seed: ctx.seed(),
    };
    let row = bench::run_one(&lab, &cfg, &bench::RunCache::default())?;
    if let Some(f) = &row.failure {
        bail!("edit failed: {f}");
    }
    println!("{}", cfg.run_dir().display());
    Ok(())
}

fn plan(ctx: &Ctx, lab: &Lab, dir: PathBuf) -> (BenchPlan, usize) {
    let mut p = BenchPlan::standard(lab, dir);
    p.steer = ctx.cfg.steer.clone();
    p.guidance = ctx.cfg.guidance.clone();
    p.edit = ctx.cfg.edit.clone();
    let mut workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    if let Some(o) = &ctx.cfg.bench {
        if let Some(t) = &o.tasks {
            p.tasks = t.clone();
        }
        if let Some(m) = &o.modes {
            p.modes = m.clone();
            p.guidance_modes = m.clone();
            p.jacobian_modes.retain(|j| m.contains(j));
            if p.jacobian_modes.is_empty() {
                p.jacobian_modes = m[..1.min(m.len())].to_vec();
            }
        }
        if let Some(s) = &o.seeds {
            p.seeds = s.clone();
        }
        if let Some(s) = &o.ablation_seeds {
            p.ablation_seeds = s.clone();
        }
        if let Some(w) = o.workers {
            workers = w;
        }
    }
    (p, workers)
}

fn bench_cmd(ctx: &Ctx) -> Result<()> {
    let lab = ctx.lab(Stage::Classifiers, None, None)?;
    let dir = ctx.run_dir(format!("bench-s{}", ctx.seed()))?;
    let (plan, workers) = plan(ctx, &lab, dir.clone());
    let configs = plan.all();
    info!("{} runs on {workers} workers", configs.len());
    let report = bench::run_benchmark(&lab, &configs, workers, true, &|row, done, total| {
        let status = row.failure.as_deref().unwrap_or("ok");
        info!("[{done}/{total}] {} {status}", row.run_id);
    })?;
    finish_report(&lab, &report, &dir)
}

fn finish_report(lab: &Lab, report: &MetricReport, dir: &Path) -> Result<()> {
    report.save(dir)?;
    bench::emit_grids(report, lab, dir)?;
    write_json(&dir.join("metrics.json"), &report.aggregates)?;
    let mut trace = String::new();
    for d in &report.deltas {
        trace.push_str(&serde_json::to_string(d)?);
        trace.push('\n');
    }
    std::fs::write(dir.join("trace.jsonl"), trace)?;
    println!("{:<20} {:<14} {:>5} {:>8} {:>8} {:>8}", "label", "mode", "n", "concept", "ssim", "ms_ssim");
    for a in &report.aggregates {
        let f = |m: Metric| a.means.get(&m).map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<20} {:<14} {:>5} {:>8} {:>8} {:>8}",
            a.label,
            a.mode.as_str(),
            a.n_ok,
            f(Metric::ConceptScore),
            f(Metric::Ssim),
            f(Metric::MsSsim)
        );
    }
    println!("{}", dir.display());
    Ok(())
}

fn report(ctx: &Ctx, a: &ReportArgs) -> Result<()> {
    let dir = match &a.dir {
        Some(d) => d.clone(),
        None => ctx.runs_dir.join(ctx.run_id.clone().unwrap_or_else(|| format!("bench-s{}", ctx.seed()))),
    };
    let report = bench::recompute_report(&dir)?;
    let lab = ctx.lab(Stage::Base, None, None)?;
    finish_report(&lab, &report, &dir)
}
