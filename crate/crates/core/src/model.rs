//! The assembled detector: frozen backend, prior, cascade head and alignment.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Graph;
use crate::backend::{build_backend, build_pyramid, stable_hash, Backend, FeatureBundle, VideoClip};
use crate::config::RunConfig;
use crate::data::{PromptTable, SplitSpec, VideoFrames};
use crate::dfa::{ClassEntry, Vocabulary};
use crate::error::{config_err, input_err, Result};
use crate::eval::{Detection, EvalClass};
use crate::geometry::{CenterBox, Rect};
use crate::head::{cascade_forward, init_head, QueryState, StageOutput, PYRAMID};
use crate::nn::{ParamStore, Scope};
use crate::prior::{attention_map, init_box_queries, sample_prior_locations, BoxSet, PriorInputs, PriorSource};
use crate::tensor::Tensor;

/// Per-keyframe inputs that only some prior sources use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PriorContext {
    /// Annotated keyframe boxes, normalized.
    pub ground_truth: Vec<CenterBox>,
    /// Boxes from an external detection file, normalized.
    pub external: Option<Vec<CenterBox>>,
}

/// Final-stage output for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub boxes: BoxSet,
    /// `[N, C]` class probabilities.
    pub probs: Tensor,
    pub stages: Vec<QueryState>,
}

pub struct OpenMixer {
    pub config: RunConfig,
    pub params: ParamStore,
    backend: Box<dyn Backend>,
}

impl OpenMixer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let backend = build_backend(&config.backend)?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_head(&mut params, &mut rng, &config.model, backend.dim());
        Ok(OpenMixer {
            config,
            params,
            backend,
        })
    }

    /// Rebuilds a model around saved parameters, checking names and shapes.
    pub fn from_parts(config: RunConfig, params: ParamStore) -> Result<Self> {
        let mut model = OpenMixer::new(config)?;
        let expected: BTreeMap<&String, &[usize]> = model.params.iter().map(|(k, v)| (k, v.shape())).collect();
        let found: BTreeMap<&String, &[usize]> = params.iter().map(|(k, v)| (k, v.shape())).collect();
        if expected != found {
            let missing: Vec<&str> = expected
                .iter()
                .filter(|(k, s)| found.get(*k) != Some(s))
                .map(|(k, _)| k.as_str())
                .collect();
            return Err(config_err!("parameters do not match the config (mismatched: {})", missing.join(", ")));
        }
        model.params = params;
        Ok(model)
    }

    pub fn backend(&self) -> &dyn Backend {
        self.backend.as_ref()
    }

    pub fn vocabulary(&self, classes: Vec<ClassEntry>) -> Result<Vocabulary> {
        Vocabulary::build(classes, self.backend())
    }

    pub fn encode(&self, clip: &VideoClip, vocabulary: &Vocabulary) -> Result<FeatureBundle> {
        self.backend.encode_clip(clip, vocabulary)
    }

    /// Initial boxes from the configured prior source and the pre-matched
    /// text feature that conditions the temporal queries.
    pub fn initial_boxes(&self, bundle: &FeatureBundle, video_id: &str, frame: usize, ctx: &PriorContext) -> Result<(BoxSet, Vec<f64>)> {
        let (map, class) = attention_map(bundle)?;
        let centers = sample_prior_locations(&map, self.config.model.num_queries, self.config.prior.sampling)?;
        let inputs = match self.config.prior.source {
            PriorSource::Attention => PriorInputs::Attention,
            PriorSource::GroundTruth => PriorInputs::GroundTruth(&ctx.ground_truth),
            PriorSource::Random => PriorInputs::Random {
                seed: self.config.seed ^ stable_hash(format!("{video_id}#{frame}").as_bytes()),
            },
            PriorSource::External => PriorInputs::External(ctx.external.as_deref()),
        };
        let boxes = init_box_queries(&centers, inputs)?;
        Ok((boxes, bundle.text_features.row(class).to_vec()))
    }

    pub fn forward<'g>(&self, scope: &Scope<'g>, bundle: &FeatureBundle, init: &BoxSet, prematched: &[f64]) -> Result<Vec<StageOutput<'g>>> {
        let pyramid = build_pyramid(scope, PYRAMID, &bundle.patch_features);
        let text = scope.graph().constant(bundle.text_features.clone());
        cascade_forward(
            scope,
            &self.config.model,
            bundle,
            &pyramid,
            init,
            prematched,
            text,
            self.config.effective_fusion(),
        )
    }

    pub fn predict(&self, bundle: &FeatureBundle, video_id: &str, frame: usize, ctx: &PriorContext) -> Result<Prediction> {
        let (init, prematched) = self.initial_boxes(bundle, video_id, frame, ctx)?;
        let g = Graph::new();
        let scope = Scope::new(&g, &self.params, false);
        let stages = self.forward(&scope, bundle, &init, &prematched)?;
        let last = stages.last().ok_or_else(|| config_err!("model has no stages"))?;
        let probs = (*last.logits.softmax_last().value()).clone();
        let stages: Vec<QueryState> = stages.iter().map(QueryState::from).collect();
        Ok(Prediction {
            boxes: stages.last().expect("non-empty").boxes.clone(),
            probs,
            stages,
        })
    }

    /// Per-frame detections over a whole video: one window per frame,
    /// centered on it, boxes above the person threshold scored by
    /// `person × class probability`.
    pub fn detect_video(
        &self,
        video: &VideoFrames,
        vocabulary: &Vocabulary,
        context: &dyn Fn(usize) -> PriorContext,
    ) -> Result<Vec<Detection>> {
        if video.is_empty() {
            return Err(input_err!("video `{}` has no frames", video.video_id));
        }
        let d = &self.config.data;
        let mut out = Vec::new();
        for frame in 0..video.len() {
            let clip = video.clip(frame, d.clip_len, d.stride, d.frame_rate)?;
            let bundle = self.encode(&clip, vocabulary)?;
            let pred = self.predict(&bundle, &video.video_id, frame, &context(frame))?;
            let mut dets = self.frame_detections(&pred, &video.video_id, frame, video.width as f64, video.height as f64);
            if let Some(t) = self.config.inference.nms_iou {
                dets = nms(dets, t);
            }
            out.extend(dets);
        }
        Ok(out)
    }

    pub fn frame_detections(&self, pred: &Prediction, video_id: &str, frame: usize, width: f64, height: f64) -> Vec<Detection> {
        let c = pred.probs.shape()[1];
        let k = self.config.inference.top_classes.min(c);
        let mut out = Vec::new();
        for (i, (b, &person)) in pred.boxes.boxes.iter().zip(&pred.boxes.person_scores).enumerate() {
            if person < self.config.eval.person_threshold {
                continue;
            }
            let r = b.to_rect();
            let rect = Rect::new(
                (r.x1 * width).clamp(0.0, width),
                (r.y1 * height).clamp(0.0, height),
                (r.x2 * width).clamp(0.0, width),
                (r.y2 * height).clamp(0.0, height),
            );
            if rect.area() <= 0.0 {
                continue;
            }
            let row = pred.probs.row(i);
            let mut order: Vec<usize> = (0..c).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            for &class in &order[..k] {
                out.push(Detection {
                    video_id: video_id.to_string(),
                    frame,
                    class,
                    score: person * row[class],
                    rect,
                });
            }
        }
        out
    }
}

/// Greedy per-class suppression within one frame's detections.
pub fn nms(mut dets: Vec<Detection>, iou: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| a.class.cmp(&b.class).then(b.score.total_cmp(&a.score)));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        let clash = kept
            .iter()
            .any(|k| k.class == d.class && k.frame == d.frame && k.video_id == d.video_id && k.rect.iou(&d.rect) > iou);
        if !clash {
            kept.push(d);
        }
    }
    kept
}

/// Class entries for `names`, prompts from the table or the template.
pub fn class_entries(names: &[String], split: Option<&SplitSpec>, prompts: Option<&PromptTable>, template: &str) -> Vec<ClassEntry> {
    names
        .iter()
        .map(|name| {
            let novel = split.is_some_and(|s| s.is_novel(name));
            match prompts.and_then(|p| p.get(name)) {
                Some(list) => ClassEntry::new(name.clone(), list.clone(), novel),
                None => ClassEntry::from_template(name.clone(), template, novel),
            }
        })
        .collect()
}

pub fn eval_classes(vocabulary: &Vocabulary) -> Vec<EvalClass> {
    vocabulary
        .classes()
        .iter()
        .map(|c| EvalClass {
            name: c.name.clone(),
            novel: c.is_novel,
        })
        .collect()
}
