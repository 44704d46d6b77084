//! Dataset access, the training loop, checkpoints and model evaluation.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backend::FeatureBundle;
use crate::config::{DataConfig, RunConfig, TrainingMode};
use crate::criterion::{total_loss, LossBreakdown, StageLoss, Targets};
use crate::data::{
    check_prompts, load_prompts, load_video, read_annotations, read_detections, read_split, AnnotationRecord,
    DetectionRow, PromptTable, SplitSpec, SyntheticDataset, VideoFrames,
};
use crate::dfa::Vocabulary;
use crate::error::{config_err, input_err, Error, Result};
use crate::eval::{evaluate_detections, Detection, EvalProtocol, Metrics, ProtocolMode};
use crate::geometry::CenterBox;
use crate::model::{class_entries, eval_classes, OpenMixer, PriorContext};
use crate::nn::{ParamStore, Scope};
use crate::prior::{BoxSet, PriorSource};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

enum Videos {
    Disk(DataConfig),
    Memory(BTreeMap<String, VideoFrames>),
}

/// Annotations, split, prompts and frame access for one dataset.
pub struct Dataset {
    pub records: Vec<AnnotationRecord>,
    pub split: SplitSpec,
    pub prompts: Option<PromptTable>,
    pub template: String,
    videos: Videos,
}

impl Dataset {
    pub fn load(cfg: &DataConfig) -> Result<Self> {
        let records = read_annotations(&cfg.annotations_path())?;
        let split = read_split(&cfg.split_path())?;
        let prompts = match cfg.prompts_path() {
            Some(p) if p.exists() => Some(load_prompts(&p)?),
            _ => None,
        };
        let ds = Dataset {
            records,
            split,
            prompts,
            template: cfg.template.clone(),
            videos: Videos::Disk(cfg.clone()),
        };
        ds.check()?;
        Ok(ds)
    }

    pub fn from_synthetic(ds: &SyntheticDataset) -> Self {
        Dataset {
            records: ds.records.clone(),
            split: ds.split(),
            prompts: Some(ds.prompts()),
            template: crate::dfa::DEFAULT_TEMPLATE.to_string(),
            videos: Videos::Memory(ds.videos.iter().map(|v| (v.video_id.clone(), v.clone())).collect()),
        }
    }

    fn check(&self) -> Result<()> {
        let all = self.split.all_classes();
        if let Some(p) = &self.prompts {
            check_prompts(p, &all)?;
        }
        let unknown: Vec<String> = self
            .records
            .iter()
            .flat_map(|r| r.classes())
            .filter(|c| !all.iter().any(|a| a == c))
            .map(str::to_string)
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Validation(format!("annotated classes missing from the split: {}", unknown.join(", "))));
        }
        Ok(())
    }

    pub fn video(&self, video_id: &str) -> Result<Cow<'_, VideoFrames>> {
        match &self.videos {
            Videos::Disk(cfg) => Ok(Cow::Owned(load_video(&cfg.video_dir(video_id))?)),
            Videos::Memory(map) => map
                .get(video_id)
                .map(Cow::Borrowed)
                .ok_or_else(|| input_err!("unknown video `{video_id}`")),
        }
    }

    pub fn class_names(&self, mode: ProtocolMode) -> Vec<String> {
        match mode {
            ProtocolMode::BaseOnly => self.split.base.clone(),
            ProtocolMode::NovelOnly => self.split.novel.clone(),
            ProtocolMode::Generalized => self.split.all_classes(),
        }
    }

    pub fn vocabulary(&self, model: &OpenMixer, mode: ProtocolMode) -> Result<Vocabulary> {
        let names = self.class_names(mode);
        model.vocabulary(class_entries(&names, Some(&self.split), self.prompts.as_ref(), &self.template))
    }

    pub fn records_tagged(&self, tag: &str) -> Vec<&AnnotationRecord> {
        self.records.iter().filter(|r| r.split_tag == tag).collect()
    }

    /// Videos tagged `tag` whose annotated classes all belong to the
    /// protocol's vocabulary. Generalized mode keeps every tagged video.
    pub fn eval_records(&self, tag: &str, mode: ProtocolMode) -> Vec<&AnnotationRecord> {
        let names = self.class_names(mode);
        self.records_tagged(tag)
            .into_iter()
            .filter(|r| r.classes().iter().all(|c| names.iter().any(|n| n == c)))
            .collect()
    }
}

/// Normalized ground truth of every class on `frame`, for the GT prior.
fn keyframe_boxes(record: &AnnotationRecord, frame: usize) -> Vec<CenterBox> {
    record
        .targets_at(frame, |_| Some(0))
        .map(|t| t.boxes)
        .unwrap_or_default()
}

/// External prior boxes grouped by (video, frame), normalized per video.
pub fn external_priors(path: &Path, records: &[AnnotationRecord]) -> Result<BTreeMap<(String, usize), Vec<CenterBox>>> {
    let rows = read_detections(path)?;
    let sizes: BTreeMap<&str, (u32, u32)> = records.iter().map(|r| (r.video_id.as_str(), (r.width, r.height))).collect();
    let mut out: BTreeMap<(String, usize), Vec<CenterBox>> = BTreeMap::new();
    for row in rows {
        let Some(&(w, h)) = sizes.get(row.video_id.as_str()) else {
            continue;
        };
        out.entry((row.video_id.clone(), row.frame_index))
            .or_default()
            .push(crate::data::normalized(&row.rect(), w, h));
    }
    Ok(out)
}

/// One supervised keyframe with cached frozen features.
#[derive(Clone, Debug)]
pub struct Sample {
    pub video_id: String,
    pub frame: usize,
    pub bundle: FeatureBundle,
    pub targets: Targets,
    pub init: BoxSet,
    pub prematched: Vec<f64>,
}

pub struct TrainingSet {
    pub vocabulary: Vocabulary,
    pub samples: Vec<Sample>,
    novel_reads: usize,
}

impl TrainingSet {
    /// Encodes every keyframe of the training videos against the base
    /// vocabulary. A training video that carries a novel class is rejected.
    pub fn build(model: &OpenMixer, dataset: &Dataset) -> Result<Self> {
        let cfg = &model.config.data;
        let vocabulary = dataset.vocabulary(model, ProtocolMode::BaseOnly)?;
        let external = match (&cfg.external_priors, model.config.prior.source) {
            (Some(p), PriorSource::External) => Some(external_priors(p, &dataset.records)?),
            (None, PriorSource::External) => return Err(config_err!("external prior source needs data.external_priors")),
            _ => None,
        };
        let mut set = TrainingSet {
            vocabulary,
            samples: Vec::new(),
            novel_reads: 0,
        };
        for record in dataset.records_tagged(&cfg.train_tag) {
            let video = dataset.video(&record.video_id)?;
            if video.len() != record.frame_count {
                return Err(input_err!(
                    "video `{}` has {} frames, annotations say {}",
                    record.video_id,
                    video.len(),
                    record.frame_count
                ));
            }
            for frame in record.annotated_frames().into_iter().step_by(cfg.keyframe_step) {
                let targets = record.targets_at(frame, |c| set.vocabulary.index_of(c));
                let targets = match targets {
                    Ok(t) => t,
                    Err(e) => {
                        if record.classes().iter().any(|c| dataset.split.is_novel(c)) {
                            set.novel_reads += 1;
                            return Err(Error::Validation(format!(
                                "training video `{}` contains a novel class",
                                record.video_id
                            )));
                        }
                        return Err(e);
                    }
                };
                let clip = video.clip(frame, cfg.clip_len, cfg.stride, cfg.frame_rate)?;
                let bundle = model.encode(&clip, &set.vocabulary)?;
                let ctx = PriorContext {
                    ground_truth: targets.boxes.clone(),
                    external: external
                        .as_ref()
                        .map(|m| m.get(&(record.video_id.clone(), frame)).cloned().unwrap_or_default()),
                };
                let (init, prematched) = model.initial_boxes(&bundle, &record.video_id, frame, &ctx)?;
                set.samples.push(Sample {
                    video_id: record.video_id.clone(),
                    frame,
                    bundle,
                    targets,
                    init,
                    prematched,
                });
            }
        }
        if set.samples.is_empty() {
            return Err(input_err!("no training keyframes tagged `{}`", cfg.train_tag));
        }
        Ok(set)
    }

    /// Reads of novel-class annotations while building; stays 0 for a clean split.
    pub fn novel_annotation_reads(&self) -> usize {
        self.novel_reads
    }
}

/// Adam moments for decoupled weight decay.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

fn decays(name: &str) -> bool {
    name.ends_with(".weight") || name.starts_with("queries.")
}

impl AdamW {
    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64, cfg: &crate::config::OptimConfig) {
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powf(t);
        let c2 = 1.0 - b2.powf(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let wd = if decays(name) { cfg.weight_decay } else { 0.0 };
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let step = (*mi / c1) / ((*vi / c2).sqrt() + cfg.eps);
                *pi -= lr * (step + wd * *pi);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.data().iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(model: &OpenMixer, sample: &Sample) -> Result<(BTreeMap<String, Tensor>, LossBreakdown)> {
    let g = Graph::new();
    let scope = Scope::new(&g, &model.params, true);
    let stages = model.forward(&scope, &sample.bundle, &sample.init, &sample.prematched)?;
    let loss_cfg = &model.config.loss;
    let (loss, breakdown) = total_loss(&stages, &sample.targets, &loss_cfg.weights, &loss_cfg.cost)?;
    let grads = g.backward(loss);
    let mut out = scope.collect_grads(&grads);
    if model.config.training_mode == TrainingMode::ZsrTl {
        out.retain(|name, _| !name.starts_with("dfa."));
    }
    Ok((out, breakdown))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Batch means per stage.
    pub stages: Vec<StageLoss>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub epoch: usize,
    pub config: RunConfig,
    pub params: ParamStore,
    pub optimizer: AdamW,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::schema(path, e.line(), e.to_string()))?;
        if ckpt.schema_version != CHECKPOINT_VERSION {
            return Err(Error::schema(path, 1, format!("unsupported checkpoint version {}", ckpt.schema_version)));
        }
        Ok(ckpt)
    }

    pub fn into_model(self) -> Result<OpenMixer> {
        OpenMixer::from_parts(self.config, self.params)
    }
}

pub struct Trainer {
    pub model: OpenMixer,
    pub optimizer: AdamW,
    /// Epochs completed.
    pub epoch: usize,
    pub log: Vec<StepRecord>,
    threads: usize,
}

impl Trainer {
    pub fn new(model: OpenMixer) -> Self {
        let threads = if model.config.deterministic {
            1
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        };
        Trainer {
            model,
            optimizer: AdamW::default(),
            epoch: 0,
            log: Vec::new(),
            threads,
        }
    }

    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let (epoch, optimizer) = (ckpt.epoch, ckpt.optimizer.clone());
        let mut t = Trainer::new(ckpt.into_model()?);
        t.epoch = epoch;
        t.optimizer = optimizer;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            config: self.model.config.clone(),
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Per-sample gradients of a batch, summed in sample order so the result
    /// does not depend on the thread count.
    fn batch_gradients(&self, batch: &[&Sample]) -> Result<Vec<(BTreeMap<String, Tensor>, LossBreakdown)>> {
        let model = &self.model;
        if self.threads <= 1 || batch.len() <= 1 {
            return batch.iter().map(|s| sample_gradients(model, s)).collect();
        }
        let chunk = batch.len().div_ceil(self.threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = batch
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(|s| sample_gradients(model, s)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(batch.len());
            for h in handles {
                out.extend(h.join().expect("gradient worker panicked")?);
            }
            Ok(out)
        })
    }

    /// One pass over the training set in a seeded order.
    pub fn train_epoch(&mut self, set: &TrainingSet) -> Result<Vec<StepRecord>> {
        let cfg = self.model.config.optim.clone();
        let mut order: Vec<usize> = (0..set.samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.config.seed ^ (self.epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(self.epoch);
        let mut records = Vec::new();
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &set.samples[i]).collect();
            let results = self.batch_gradients(&batch)?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let stages = results[0].1.per_stage.len();
            let mut mean_stages = vec![StageLoss { bce: 0.0, l1: 0.0, giou: 0.0, act: 0.0 }; stages];
            let mut loss = 0.0;
            for (g, breakdown) in &results {
                for (name, t) in g {
                    match grads.get_mut(name) {
                        Some(acc) => acc.add_assign(&t.scale(scale)),
                        None => {
                            grads.insert(name.clone(), t.scale(scale));
                        }
                    }
                }
                loss += breakdown.total * scale;
                for (m, s) in mean_stages.iter_mut().zip(&breakdown.per_stage) {
                    m.bce += s.bce * scale;
                    m.l1 += s.l1 * scale;
                    m.giou += s.giou * scale;
                    m.act += s.act * scale;
                }
            }
            if !loss.is_finite() {
                return Err(input_err!("training loss became non-finite at step {}", self.optimizer.step + 1));
            }
            let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
            self.optimizer.update(&mut self.model.params, &grads, lr, &cfg);
            records.push(StepRecord {
                epoch: self.epoch,
                step: self.optimizer.step,
                lr,
                loss,
                grad_norm,
                stages: mean_stages,
            });
        }
        self.epoch += 1;
        self.log.extend(records.clone());
        Ok(records)
    }

    /// Trains until `optim.epochs` epochs are complete.
    pub fn fit(&mut self, set: &TrainingSet, mut on_epoch: impl FnMut(&Trainer, &[StepRecord]) -> Result<()>) -> Result<()> {
        while self.epoch < self.model.config.optim.epochs {
            let records = self.train_epoch(set)?;
            on_epoch(self, &records)?;
        }
        Ok(())
    }
}

pub fn append_log(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(file, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Runs the detector over every video tagged `tag` and scores it.
pub fn evaluate_model(model: &OpenMixer, dataset: &Dataset, protocol: &EvalProtocol, tag: &str) -> Result<(Metrics, Vec<Detection>, Vocabulary)> {
    let vocabulary = dataset.vocabulary(model, protocol.mode)?;
    let records: Vec<AnnotationRecord> = dataset.eval_records(tag, protocol.mode).into_iter().cloned().collect();
    if records.is_empty() {
        return Err(input_err!("no videos tagged `{tag}` with {} classes to evaluate", protocol.mode));
    }
    let external = match (&model.config.data.external_priors, model.config.prior.source) {
        (Some(p), PriorSource::External) => Some(external_priors(p, &records)?),
        _ => None,
    };
    let threads = if model.config.deterministic {
        1
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    };
    let run = |record: &AnnotationRecord| -> Result<Vec<Detection>> {
        let video = dataset.video(&record.video_id)?;
        let context = |frame: usize| PriorContext {
            ground_truth: keyframe_boxes(record, frame),
            external: external
                .as_ref()
                .map(|m| m.get(&(record.video_id.clone(), frame)).cloned().unwrap_or_default()),
        };
        model.detect_video(&video, &vocabulary, &context)
    };
    let chunk = records.len().div_ceil(threads.max(1));
    let per_video: Vec<Vec<Detection>> = std::thread::scope(|scope| {
        let handles: Vec<_> = records
            .chunks(chunk)
            .map(|part| scope.spawn(|| part.iter().map(run).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::new();
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok::<_, Error>(out)
    })?;
    let detections: Vec<Detection> = per_video.into_iter().flatten().collect();
    let classes = eval_classes(&vocabulary);
    let metrics = evaluate_detections(&detections, &records, &classes, protocol)?;
    Ok((metrics, detections, vocabulary))
}

pub fn detection_rows(detections: &[Detection], vocabulary: &Vocabulary) -> Vec<DetectionRow> {
    let names = vocabulary.names();
    detections
        .iter()
        .map(|d| DetectionRow {
            video_id: d.video_id.clone(),
            frame_index: d.frame,
            class: names[d.class].to_string(),
            score: d.score,
            x1: d.rect.x1,
            y1: d.rect.y1,
            x2: d.rect.x2,
            y2: d.rect.y2,
        })
        .collect()
}
