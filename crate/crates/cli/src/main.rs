//! `mvfuse` command line: reproducible experiment runs over a synthetic RGB-D corpus.
//!
//! Every subcommand writes `config.json` (the effective experiment config) and
//! `run.json` (command, inputs, seed) into its output directory next to its
//! artifacts. Flags override config-file fields, which override built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mvfuse::config::ExperimentConfig;
use mvfuse::eval::{robustness_csv, robustness_svg, write_text, RobustnessRow};
use mvfuse::experiment;
use mvfuse::gradsuite::{full_suite, summary_table, TOLERANCE};
use mvfuse::nn::{read_checkpoint, write_checkpoint};
use mvfuse::pipeline::{feature_cache, infer_scene, window_views, FusionModel};
use mvfuse::pointnet2::Fusion;
use mvfuse::scene::Scene;
use mvfuse::synth::{write_corpus, CorpusManifest, CLASS_NAMES};
use mvfuse::Error;

#[derive(Parser)]
#[command(name = "mvfuse", version, about = "Multi-view RGB-D feature lifting and point-network fusion")]
struct Cli {
    /// Experiment config (JSON). Omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for data preparation and inference [default: all cores].
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Synth(SynthArgs),
    /// Pretrain the 2D segmentation network on rendered frames.
    Pretrain2d(Pretrain2dArgs),
    /// Train a fusion model.
    Train(TrainArgs),
    /// Sliding-window predictions for every scene of a split.
    Infer(EvalArgs),
    /// Dump the greedily selected views and their coverage per window.
    Views(ViewsArgs),
    /// mIoU under random point subsampling.
    Robustness(RobustnessArgs),
    /// mIoU and overall accuracy on a split.
    Eval(EvalArgs),
    /// Run the full finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    val_scenes: Option<usize>,
}

#[derive(Args)]
struct Pretrain2dArgs {
    /// Corpus directory written by `synth`.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Pretrained 2D checkpoint (`net2d.ckpt` from `pretrain2d`).
    #[arg(long)]
    net2d: Option<PathBuf>,
    #[arg(long, value_parser = parse_fusion)]
    fusion: Option<Fusion>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    chunks_per_epoch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fine-tune the 2D network instead of freezing it.
    #[arg(long)]
    unfreeze_2d: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Model checkpoint written by `train`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: Split,
    #[arg(long)]
    stride: Option<f64>,
}

#[derive(Args)]
struct ViewsArgs {
    /// One scene directory (`<corpus>/<split>/<scene>`).
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Views per window.
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    stride: Option<f64>,
    #[arg(long)]
    chunk_size: Option<f64>,
}

#[derive(Args)]
struct RobustnessArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Model checkpoints, `NAME=PATH` or `PATH` (named by fusion); repeatable.
    #[arg(long, required = true)]
    model: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    split: Split,
    /// Comma-separated keep ratios.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_fusion(s: &str) -> Result<Fusion, String> {
    Fusion::ALL
        .into_iter()
        .find(|f| f.name() == s)
        .ok_or_else(|| format!("expected one of {}", Fusion::ALL.map(|f| f.name()).join(", ")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            eprintln!("error[{kind}]: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn classify(e: &anyhow::Error) -> (u8, &'static str) {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config { .. }) => (2, "config"),
        Some(Error::Dependency(_)) => (3, "dependency"),
        Some(Error::Numeric(_)) => (4, "numeric"),
        Some(Error::Io { .. } | Error::Format { .. } | Error::Json(_)) => (1, "io"),
        Some(_) => (1, "runtime"),
        None => (1, "runtime"),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the worker pool")?;
    }
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Synth(a) => synth(cfg, a),
        Command::Pretrain2d(a) => pretrain2d(cfg, a),
        Command::Train(a) => train(cfg, a),
        Command::Infer(a) => infer(cfg, a),
        Command::Views(a) => views(cfg, a),
        Command::Robustness(a) => robustness(cfg, a),
        Command::Eval(a) => eval(cfg, a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    if !path.is_file() {
        return Err(Error::Config {
            path: String::new(),
            message: format!("config file {} does not exist", path.display()),
        }
        .into());
    }
    Ok(ExperimentConfig::load(path)?)
}

/// Re-checks the config after flag overrides.
fn finalize(cfg: ExperimentConfig) -> anyhow::Result<ExperimentConfig> {
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(out: &Path, cfg: &ExperimentConfig, command: &str, seed: u64, inputs: serde_json::Value) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join("config.json"), &cfg.to_json())?;
    let run = json!({ "command": command, "seed": seed, "inputs": inputs, "version": env!("CARGO_PKG_VERSION") });
    write_text(&out.join("run.json"), &serde_json::to_string_pretty(&run)?)?;
    Ok(())
}

struct Corpus {
    train: Vec<Scene<f32>>,
    val: Vec<Scene<f32>>,
}

impl Corpus {
    fn split(&self, split: Split) -> &[Scene<f32>] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }
}

fn read_manifest(dir: &Path) -> anyhow::Result<CorpusManifest> {
    let path = dir.join("corpus.json");
    if !path.is_file() {
        return Err(Error::Dependency(format!("no corpus at {} (run `mvfuse synth` first)", dir.display())).into());
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

/// Loads a corpus and adopts its generation settings as the `synth` section, so
/// the snapshot always describes the data actually used.
fn load_corpus(dir: &Path, cfg: &mut ExperimentConfig, splits: &[Split]) -> anyhow::Result<Corpus> {
    let manifest = read_manifest(dir)?;
    cfg.synth = manifest.config.clone();
    let read = |split: &str, names: &[String]| -> anyhow::Result<Vec<Scene<f32>>> {
        names
            .iter()
            .map(|n| Scene::read_dir(&dir.join(split).join(n)).with_context(|| format!("reading scene {split}/{n}")))
            .collect()
    };
    let want = |s: Split| splits.iter().any(|x| x.name() == s.name());
    Ok(Corpus {
        train: if want(Split::Train) { read("train", &manifest.train)? } else { Vec::new() },
        val: if want(Split::Val) { read("val", &manifest.val)? } else { Vec::new() },
    })
}

fn load_model(path: &Path) -> anyhow::Result<FusionModel<f32>> {
    if !path.is_file() {
        return Err(Error::Dependency(format!("no model checkpoint at {} (run `mvfuse train` first)", path.display())).into());
    }
    let (model, _) = FusionModel::load(path)?;
    Ok(model)
}

fn synth(mut cfg: ExperimentConfig, a: SynthArgs) -> anyhow::Result<()> {
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    if let Some(n) = a.train_scenes {
        cfg.synth.train_scenes = n;
    }
    if let Some(n) = a.val_scenes {
        cfg.synth.val_scenes = n;
    }
    let cfg = finalize(cfg)?;
    prepare_out(&a.out, &cfg, "synth", cfg.synth.seed, json!({}))?;
    let manifest = write_corpus(&cfg.synth, &a.out)?;
    println!("wrote {} train and {} val scenes to {}", manifest.train.len(), manifest.val.len(), a.out.display());
    Ok(())
}

fn pretrain2d(mut cfg: ExperimentConfig, a: Pretrain2dArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&a.corpus, &mut cfg, &[Split::Train])?;
    if let Some(e) = a.epochs {
        cfg.net2d.pretrain.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let cfg = finalize(cfg)?;
    let seed = cfg.train.seed;
    prepare_out(&a.out, &cfg, "pretrain2d", seed, json!({ "corpus": a.corpus }))?;
    let pre = experiment::pretrain(&cfg, &corpus.train, seed)?;
    if let Some(l) = pre.losses.iter().find(|l| !l.is_finite()) {
        return Err(Error::Numeric(format!("2D pretraining loss became {l}")).into());
    }
    let meta = json!({ "net2d": cfg.net2d.model });
    write_checkpoint(&a.out.join("net2d.ckpt"), &pre.store, cfg.net2d.pretrain.epochs, seed, meta)?;
    let mut csv = String::from("step,loss\n");
    for (i, l) in pre.losses.iter().enumerate() {
        csv.push_str(&format!("{},{l:.6}\n", i + 1));
    }
    write_text(&a.out.join("pretrain_loss.csv"), &csv)?;
    println!("final loss {:.4}", pre.losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn train(mut cfg: ExperimentConfig, a: TrainArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&a.corpus, &mut cfg, &[Split::Train, Split::Val])?;
    if let Some(f) = a.fusion {
        cfg.backbone.fusion = f;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(c) = a.chunks_per_epoch {
        cfg.train.chunks_per_epoch = c;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if a.unfreeze_2d {
        cfg.train.freeze_2d = false;
    }
    let cfg = finalize(cfg)?;
    let net2d = match &a.net2d {
        Some(p) if cfg.backbone.fusion.uses_lifted() => {
            if !p.is_file() {
                return Err(Error::Dependency(format!(
                    "no pretrained 2D checkpoint at {} (run `mvfuse pretrain2d` first)",
                    p.display()
                ))
                .into());
            }
            Some(read_checkpoint::<f32>(p)?.0)
        }
        _ => None,
    };
    let seed = cfg.train.seed;
    prepare_out(&a.out, &cfg, "train", seed, json!({ "corpus": a.corpus, "net2d": a.net2d }))?;
    let (model, log) = experiment::train_model(&cfg, &corpus.train, &corpus.val, net2d.as_ref(), |r| match (r.loss, r.miou) {
        (Some(l), _) => println!("epoch {:>3} {} loss {l:.4}", r.epoch, r.split),
        (_, Some(m)) => println!("epoch {:>3} {} miou {m:.4}", r.epoch, r.split),
        _ => {}
    })?;
    model.save(&a.out.join("model.ckpt"), cfg.train.epochs, seed)?;
    write_text(&a.out.join("metrics.csv"), &log.to_csv(&CLASS_NAMES))?;
    Ok(())
}

fn eval_settings(cfg: &mut ExperimentConfig, stride: Option<f64>) {
    if let Some(s) = stride {
        cfg.eval.stride = s;
    }
}

fn eval(mut cfg: ExperimentConfig, a: EvalArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&a.corpus, &mut cfg, &[a.split])?;
    eval_settings(&mut cfg, a.stride);
    let cfg = finalize(cfg)?;
    let model = load_model(&a.model)?;
    prepare_out(&a.out, &cfg, "eval", cfg.eval.seed, json!({ "corpus": a.corpus, "model": a.model, "split": a.split.name() }))?;
    let scenes = corpus.split(a.split);
    let cm = experiment::evaluate(&cfg, &model, scenes)?;
    let (per_class, miou) = cm.miou();
    let mut csv = String::from("split,scenes,points,oa,miou");
    for n in CLASS_NAMES {
        csv.push_str(&format!(",iou_{n}"));
    }
    csv.push_str(&format!("\n{},{},{},{:.6},{miou:.6}", a.split.name(), scenes.len(), cm.total(), cm.overall_accuracy()));
    for v in &per_class {
        csv.push(',');
        if let Some(v) = v {
            csv.push_str(&format!("{v:.6}"));
        }
    }
    csv.push('\n');
    write_text(&a.out.join("metrics.csv"), &csv)?;
    println!("{} miou {miou:.4} oa {:.4}", a.split.name(), cm.overall_accuracy());
    Ok(())
}

fn infer(mut cfg: ExperimentConfig, a: EvalArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&a.corpus, &mut cfg, &[a.split])?;
    eval_settings(&mut cfg, a.stride);
    let cfg = finalize(cfg)?;
    let model = load_model(&a.model)?;
    prepare_out(&a.out, &cfg, "infer", cfg.eval.seed, json!({ "corpus": a.corpus, "model": a.model, "split": a.split.name() }))?;
    let scenes = corpus.split(a.split);
    let caches = feature_cache(&model, scenes)?;
    let pred_dir = a.out.join("predictions");
    fs::create_dir_all(&pred_dir).with_context(|| format!("creating {}", pred_dir.display()))?;
    let mut csv = String::from("scene,points,min_votes,max_votes\n");
    for (i, scene) in scenes.iter().enumerate() {
        let cache = caches.as_ref().map(|c| c[i].as_slice());
        let res = infer_scene(&model, scene, cache, &cfg.infer_config())?;
        let bytes: Vec<u8> = res.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        let path = pred_dir.join(format!("{}.labels.bin", scene.name));
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        let lo = res.counts.iter().min().copied().unwrap_or(0);
        let hi = res.counts.iter().max().copied().unwrap_or(0);
        csv.push_str(&format!("{},{},{lo},{hi}\n", scene.name, res.labels.len()));
    }
    write_text(&a.out.join("predictions.csv"), &csv)?;
    println!("wrote predictions for {} scenes", scenes.len());
    Ok(())
}

fn views(mut cfg: ExperimentConfig, a: ViewsArgs) -> anyhow::Result<()> {
    if let Some(m) = a.views {
        cfg.train.views_m = m;
    }
    if let Some(s) = a.stride {
        cfg.eval.stride = s;
    }
    if let Some(c) = a.chunk_size {
        cfg.train.chunk_size = c;
    }
    if !a.scene.join("points.bin").is_file() {
        return Err(Error::Dependency(format!("no scene at {}", a.scene.display())).into());
    }
    let scene = Scene::<f64>::read_dir(&a.scene)?;
    // views are bounded by the scene, not by the corpus-wide frame count
    if cfg.train.views_m > scene.frames.len() {
        return Err(Error::Config {
            path: "train.views_m".into(),
            message: format!("scene has only {} frames", scene.frames.len()),
        }
        .into());
    }
    let icfg = cfg.infer_config();
    icfg.validate().map_err(|e| Error::Config {
        path: "eval".into(),
        message: e.to_string(),
    })?;
    prepare_out(&a.out, &cfg, "views", icfg.seed, json!({ "scene": a.scene }))?;
    let windows = window_views(&scene, &icfg)?;
    let join = |v: Vec<String>| v.join(" ");
    let mut csv = String::from("window,origin_x,origin_y,targets,frame_ids,coverage\n");
    for (i, w) in windows.iter().enumerate() {
        csv.push_str(&format!(
            "{i},{:.6},{:.6},{},{},{}\n",
            w.origin[0],
            w.origin[1],
            w.targets,
            join(w.frame_ids.iter().map(|f| f.to_string()).collect()),
            join(w.coverage.iter().map(|c| format!("{c:.6}")).collect()),
        ));
    }
    write_text(&a.out.join("views.csv"), &csv)?;
    write_text(&a.out.join("views.json"), &serde_json::to_string_pretty(&windows)?)?;
    let mean = windows.iter().filter_map(|w| w.coverage.last()).sum::<f64>() / windows.len().max(1) as f64;
    println!("{} windows, mean coverage {mean:.4} with {} views", windows.len(), icfg.views_m);
    Ok(())
}

fn robustness(mut cfg: ExperimentConfig, a: RobustnessArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&a.corpus, &mut cfg, &[a.split])?;
    if let Some(r) = a.ratios {
        cfg.eval.keep_ratios = r;
    }
    let cfg = finalize(cfg)?;
    let models = a
        .model
        .iter()
        .map(|spec| {
            let (name, path) = match spec.split_once('=') {
                Some((n, p)) => (Some(n.to_string()), PathBuf::from(p)),
                None => (None, PathBuf::from(spec)),
            };
            let model = load_model(&path)?;
            let name = name.unwrap_or_else(|| model.fusion().name().to_string());
            Ok((name, path, model))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let inputs = json!({
        "corpus": a.corpus,
        "split": a.split.name(),
        "models": models.iter().map(|(n, p, _)| json!({ "name": n, "path": p })).collect::<Vec<_>>(),
    });
    prepare_out(&a.out, &cfg, "robustness", cfg.eval.seed, inputs)?;
    let scenes = corpus.split(a.split);
    let mut results: Vec<(String, Vec<RobustnessRow>)> = Vec::new();
    for (name, _, model) in &models {
        let rows = experiment::robustness(&cfg, model, scenes)?;
        for r in &rows {
            println!("{name} ratio {:.4} miou {}", r.ratio, r.miou.map_or("-".into(), |m| format!("{m:.4}")));
        }
        results.push((name.clone(), rows));
    }
    let mut csv = String::new();
    for (i, (name, rows)) in results.iter().enumerate() {
        for (j, line) in robustness_csv(rows, &CLASS_NAMES).lines().enumerate() {
            if j == 0 {
                if i == 0 {
                    csv.push_str(&format!("model,{line}\n"));
                }
            } else {
                csv.push_str(&format!("{name},{line}\n"));
            }
        }
    }
    write_text(&a.out.join("metrics.csv"), &csv)?;
    let series: Vec<(&str, &[RobustnessRow])> = results.iter().map(|(n, r)| (n.as_str(), r.as_slice())).collect();
    write_text(&a.out.join("robustness.svg"), &robustness_svg(&series))?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let run = json!({ "command": "gradcheck", "seed": a.seed, "tolerance": TOLERANCE, "version": env!("CARGO_PKG_VERSION") });
    write_text(&a.out.join("run.json"), &serde_json::to_string_pretty(&run)?)?;
    let reports = full_suite(a.seed)?;
    let table = summary_table(&reports);
    print!("{table}");
    let mut csv = String::from("check,coords,kinks,max_rel_err,pass\n");
    for r in &reports {
        csv.push_str(&format!(
            "{},{},{},{:e},{}\n",
            r.name,
            r.checked,
            r.skipped_kinks,
            r.max_rel_error,
            r.passes(TOLERANCE)
        ));
    }
    write_text(&a.out.join("gradcheck.csv"), &csv)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passes(TOLERANCE)).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks pass at tolerance {TOLERANCE:e}", reports.len());
        Ok(())
    } else {
        Err(anyhow!("{} of {} checks failed: {}", failed.len(), reports.len(), failed.join(", ")))
    }
}
