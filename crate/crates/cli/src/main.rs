use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use openmixer::config::TrainingMode;
use openmixer::data::{
    generate_synthetic, load_video, make_split, read_annotations, read_detections, write_dataset, write_detections,
    write_split, DetectionRow, SynthConfig,
};
use openmixer::dfa::FusionMode;
use openmixer::eval::{detections_from_rows, evaluate_detections, ProtocolMode};
use openmixer::head::ConditionMode;
use openmixer::model::{eval_classes, PriorContext};
use openmixer::prior::PriorSource;
use openmixer::train::{append_log, detection_rows, evaluate_model, Checkpoint, Dataset, Trainer, TrainingSet};
use openmixer::RunConfig;

mod render;

#[derive(Parser)]
#[command(name = "openmixer", version, about = "Open-vocabulary spatio-temporal action detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a class list into base and novel partitions.
    Split(SplitArgs),
    /// Train on the base classes of a dataset.
    Train(TrainArgs),
    /// Score a checkpoint or a detection file.
    Eval(EvalArgs),
    /// Run a checkpoint over one video directory.
    Detect(DetectArgs),
    /// Generate the synthetic moving-shapes dataset and a matching config.
    Synth(SynthArgs),
}

/// Flags that override keys of the run config.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Single-threaded, fixed-order execution.
    #[arg(long)]
    deterministic: bool,
    /// attention, gt, random or external.
    #[arg(long)]
    prior_source: Option<PriorSource>,
    /// none, pre_video, pre_text or post_video.
    #[arg(long)]
    condition_mode: Option<ConditionMode>,
    /// dynamic or fixed:<lambda>.
    #[arg(long)]
    fusion_mode: Option<FusionMode>,
    /// e2e or zsr_tl.
    #[arg(long)]
    training_mode: Option<TrainingMode>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        if let Some(p) = self.prior_source {
            cfg.prior.source = p;
        }
        if let Some(c) = self.condition_mode {
            cfg.model.condition_mode = c;
        }
        if let Some(f) = self.fusion_mode {
            cfg.fusion = f;
        }
        if let Some(t) = self.training_mode {
            cfg.training_mode = t;
        }
    }
}

#[derive(Args)]
struct SplitArgs {
    /// Annotation file whose classes are split.
    #[arg(long, conflicts_with = "classes", required_unless_present = "classes")]
    annotations: Option<PathBuf>,
    /// Comma-separated class names.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<String>>,
    #[arg(long, default_value = "dataset")]
    dataset: String,
    /// Fraction of classes that become base classes.
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, short)]
    config: PathBuf,
    /// Directory for checkpoints and the step log.
    #[arg(long, short)]
    out: PathBuf,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long, conflicts_with = "detections", required_unless_present = "detections")]
    checkpoint: Option<PathBuf>,
    /// Score an existing detection file instead of running a model.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// base, novel or generalized.
    #[arg(long, default_value = "generalized")]
    protocol: ProtocolMode,
    /// Split tag of the videos to evaluate; defaults to the config's eval tag.
    #[arg(long)]
    tag: Option<String>,
    /// Score boxes only, ignoring class labels.
    #[arg(long)]
    temporal_only: bool,
    /// Also write the model's detections here.
    #[arg(long)]
    save_detections: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct DetectArgs {
    /// Run config; defaults to the one stored in the checkpoint.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of numbered PNG frames.
    #[arg(long)]
    video: PathBuf,
    #[arg(long, default_value = "generalized")]
    protocol: ProtocolMode,
    #[arg(long, short)]
    out: PathBuf,
    /// Write frames with drawn boxes and captions here.
    #[arg(long)]
    render: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Base class videos per class used for training.
    #[arg(long)]
    train_videos: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Detect(a) => detect(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn split(a: SplitArgs) -> Result<()> {
    let classes = match (a.classes, a.annotations) {
        (Some(c), _) => c,
        (None, Some(p)) => {
            let mut names: Vec<String> = read_annotations(&p)?
                .iter()
                .flat_map(|r| r.classes().into_iter().map(str::to_string).collect::<Vec<_>>())
                .collect();
            names.sort();
            names.dedup();
            names
        }
        (None, None) => bail!("pass --classes or --annotations"),
    };
    let spec = make_split(&a.dataset, &classes, a.ratio, a.seed)?;
    write_split(&a.out, &spec)?;
    println!("base ({}): {}", spec.base.len(), spec.base.join(", "));
    println!("novel ({}): {}", spec.novel.len(), spec.novel.join(", "));
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut trainer = match &a.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            println!("resuming from {} at epoch {}", p.display(), ckpt.epoch);
            Trainer::resume(ckpt)?
        }
        None => {
            let mut cfg = load_config(&a.config, &a.overrides)?;
            if let Some(e) = a.epochs {
                cfg.optim.epochs = e;
            }
            Trainer::new(openmixer::OpenMixer::new(cfg)?)
        }
    };
    if let Some(e) = a.epochs {
        trainer.model.config.optim.epochs = e;
    }
    let dataset = Dataset::load(&trainer.model.config.data)?;
    let set = TrainingSet::build(&trainer.model, &dataset)?;
    println!(
        "{} keyframes, {} base classes, {} parameters",
        set.samples.len(),
        set.vocabulary.len(),
        trainer.model.params.num_scalars()
    );
    let log = a.out.join("train_log.jsonl");
    let out = a.out.clone();
    trainer.fit(&set, |t, records| {
        append_log(&log, records)?;
        let mean = records.iter().map(|r| r.loss).sum::<f64>() / records.len() as f64;
        println!("epoch {:>3}  loss {mean:.4}", t.epoch);
        let ckpt = t.checkpoint();
        ckpt.save(&out.join(format!("checkpoint_epoch{:03}.json", t.epoch)))?;
        ckpt.save(&out.join("checkpoint.json"))
    })?;
    if trainer.epoch == 0 || set.novel_annotation_reads() != 0 {
        bail!("training did not run");
    }
    println!("saved {}", a.out.join("checkpoint.json").display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = load_config(&a.config, &a.overrides)?;
    cfg.eval.mode = a.protocol;
    cfg.eval.temporal_only |= a.temporal_only;
    let protocol = cfg.eval.clone();
    let tag = a.tag.clone().unwrap_or_else(|| cfg.data.eval_tag.clone());
    let dataset = Dataset::load(&cfg.data)?;
    let metrics = if let Some(path) = &a.detections {
        if !path.exists() {
            bail!("detection file {} does not exist", path.display());
        }
        let scope = |mode: ProtocolMode| {
            let records: Vec<_> = dataset.eval_records(&tag, mode).into_iter().cloned().collect();
            let names = dataset.class_names(mode);
            let classes: Vec<_> = openmixer::model::class_entries(&names, Some(&dataset.split), None, &dataset.template)
                .iter()
                .map(|c| openmixer::eval::EvalClass {
                    name: c.name.clone(),
                    novel: c.is_novel,
                })
                .collect();
            (records, classes)
        };
        // Rows are checked against every tagged video and class, then only
        // the ones inside the protocol are scored.
        let rows = read_detections(path)?;
        let (all_records, all_classes) = scope(ProtocolMode::Generalized);
        detections_from_rows(&rows, &all_records, &all_classes)?;
        let (records, classes) = scope(protocol.mode);
        let kept: Vec<DetectionRow> = rows
            .into_iter()
            .filter(|r| classes.iter().any(|c| c.name == r.class) && records.iter().any(|v| v.video_id == r.video_id))
            .collect();
        evaluate_detections(&detections_from_rows(&kept, &records, &classes)?, &records, &classes, &protocol)?
    } else {
        let path = a.checkpoint.as_ref().expect("clap enforces one source");
        let ckpt = Checkpoint::load(path)?;
        let mut model_cfg = ckpt.config.clone();
        // Evaluation settings and data locations come from the given config.
        model_cfg.data = cfg.data.clone();
        model_cfg.eval = protocol.clone();
        model_cfg.inference = cfg.inference.clone();
        model_cfg.prior = cfg.prior.clone();
        model_cfg.deterministic = cfg.deterministic;
        let model = openmixer::OpenMixer::from_parts(model_cfg, ckpt.params)?;
        let (metrics, dets, vocab) = evaluate_model(&model, &dataset, &protocol, &tag)?;
        if let Some(out) = &a.save_detections {
            write_detections(out, &detection_rows(&dets, &vocab))?;
        }
        debug_assert_eq!(eval_classes(&vocab).len(), vocab.len());
        metrics
    };
    println!("{}", metrics.to_table());
    Ok(())
}

fn detect(a: DetectArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut cfg = match &a.config {
        Some(p) => load_config(p, &a.overrides)?,
        None => {
            let mut c = ckpt.config.clone();
            a.overrides.apply(&mut c);
            c
        }
    };
    if matches!(cfg.prior.source, PriorSource::GroundTruth | PriorSource::External) {
        bail!("detect runs without annotations; use the attention or random prior source");
    }
    cfg.model = ckpt.config.model.clone();
    cfg.backend = ckpt.config.backend.clone();
    let model = openmixer::OpenMixer::from_parts(cfg, ckpt.params)?;
    let dataset = Dataset::load(&model.config.data)?;
    let vocab = dataset.vocabulary(&model, a.protocol)?;
    let video = load_video(&a.video).with_context(|| format!("reading video {}", a.video.display()))?;
    let dets = model.detect_video(&video, &vocab, &|_| PriorContext::default())?;
    let rows = detection_rows(&dets, &vocab);
    write_detections(&a.out, &rows)?;
    println!("{} detections over {} frames -> {}", rows.len(), video.len(), a.out.display());
    if let Some(dir) = &a.render {
        let records = read_annotations(&model.config.data.annotations_path()).unwrap_or_default();
        let gt = records.iter().find(|r| r.video_id == video.video_id);
        render::render_video(dir, &video, &rows, gt)?;
        println!("rendered frames -> {}", dir.display());
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut synth = SynthConfig::default();
    if let Some(n) = a.train_videos {
        synth.train_videos_per_base_class = n;
    }
    let ds = generate_synthetic(&synth, a.seed)?;
    write_dataset(&a.out, &ds)?;
    let mut cfg = RunConfig::synthetic(&synth);
    cfg.seed = a.seed;
    cfg.save(&a.out.join("config.toml"))?;
    println!(
        "{} videos ({} classes, novel: {}) -> {}",
        ds.records.len(),
        synth.classes.len(),
        ds.split().novel.join(", "),
        a.out.display()
    );
    Ok(())
}
