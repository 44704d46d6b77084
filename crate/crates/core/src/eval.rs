//! Spatio-temporal evaluation: tube linking, 3D IoU, video and frame mAP.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{read_detections, AnnotationRecord, DetectionRow};
use crate::error::{config_err, input_err, Error, Result};
use crate::geometry::Rect;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    BaseOnly,
    NovelOnly,
    #[default]
    Generalized,
}

impl FromStr for ProtocolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" | "base_only" => Ok(ProtocolMode::BaseOnly),
            "novel" | "novel_only" => Ok(ProtocolMode::NovelOnly),
            "generalized" => Ok(ProtocolMode::Generalized),
            _ => Err(config_err!("unknown protocol `{s}` (expected base, novel or generalized)")),
        }
    }
}

impl fmt::Display for ProtocolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtocolMode::BaseOnly => "base",
            ProtocolMode::NovelOnly => "novel",
            ProtocolMode::Generalized => "generalized",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub mode: ProtocolMode,
    /// Tube 3D IoU threshold for video mAP.
    pub iou_threshold: f64,
    /// Box IoU threshold for frame mAP.
    pub frame_iou_threshold: f64,
    pub person_threshold: f64,
    pub continuity_iou: f64,
    /// Match tubes on temporal IoU alone.
    pub temporal_only: bool,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            mode: ProtocolMode::Generalized,
            iou_threshold: 0.5,
            frame_iou_threshold: 0.5,
            person_threshold: 0.6,
            continuity_iou: 0.1,
            temporal_only: false,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("iou_threshold", self.iou_threshold),
            ("frame_iou_threshold", self.frame_iou_threshold),
            ("continuity_iou", self.continuity_iou),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(config_err!("{name} must lie in (0, 1], got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.person_threshold) {
            return Err(config_err!("person_threshold must lie in [0, 1], got {}", self.person_threshold));
        }
        Ok(())
    }

    pub fn evaluates(&self, novel: bool) -> bool {
        match self.mode {
            ProtocolMode::BaseOnly => !novel,
            ProtocolMode::NovelOnly => novel,
            ProtocolMode::Generalized => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalClass {
    pub name: String,
    pub novel: bool,
}

/// One box on one frame with a class confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub video_id: String,
    pub frame: usize,
    pub class: usize,
    pub score: f64,
    pub rect: Rect,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TubeBox {
    pub frame: usize,
    pub rect: Rect,
    pub score: f64,
}

/// Linked detections on contiguous frames; `tube_score` is the mean frame score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionTube {
    pub video_id: String,
    pub class: usize,
    pub frames: Vec<TubeBox>,
    pub tube_score: f64,
}

impl DetectionTube {
    pub fn boxes(&self) -> Vec<(usize, Rect)> {
        self.frames.iter().map(|b| (b.frame, b.rect)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtTube {
    pub video_id: String,
    pub class: usize,
    pub boxes: Vec<(usize, Rect)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub video_id: String,
    pub frame: usize,
    pub class: usize,
    pub rect: Rect,
}

/// `|A ∩ B| / |A ∪ B|` over the frame sets. Inputs sorted by frame.
pub fn temporal_iou(a: &[(usize, Rect)], b: &[(usize, Rect)]) -> f64 {
    let fa: BTreeSet<usize> = a.iter().map(|x| x.0).collect();
    let fb: BTreeSet<usize> = b.iter().map(|x| x.0).collect();
    let union = fa.union(&fb).count();
    if union == 0 {
        return 0.0;
    }
    fa.intersection(&fb).count() as f64 / union as f64
}

/// Temporal IoU times the mean box IoU over shared frames.
pub fn tube_3d_iou(a: &[(usize, Rect)], b: &[(usize, Rect)]) -> f64 {
    let tiou = temporal_iou(a, b);
    if tiou == 0.0 {
        return 0.0;
    }
    let rb: BTreeMap<usize, &Rect> = b.iter().map(|(f, r)| (*f, r)).collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for (f, r) in a {
        if let Some(other) = rb.get(f) {
            sum += r.iou(other);
            n += 1;
        }
    }
    tiou * sum / n as f64
}

fn cmp_rect(a: &Rect, b: &Rect) -> Ordering {
    a.x1.total_cmp(&b.x1)
        .then(a.y1.total_cmp(&b.y1))
        .then(a.x2.total_cmp(&b.x2))
        .then(a.y2.total_cmp(&b.y2))
}

/// Greedy online linking per (video, class). Each live tube may take one
/// detection on the next frame with tail IoU ≥ `continuity_iou`; pairs are
/// taken in order of `score + IoU`. Leftover detections start new tubes and
/// tubes that are not extended end.
pub fn link_tubes(detections: &[Detection], continuity_iou: f64) -> Vec<DetectionTube> {
    let mut groups: BTreeMap<(&str, usize), BTreeMap<usize, Vec<&Detection>>> = BTreeMap::new();
    for d in detections {
        groups
            .entry((d.video_id.as_str(), d.class))
            .or_default()
            .entry(d.frame)
            .or_default()
            .push(d);
    }
    let mut out = Vec::new();
    for ((video_id, class), frames) in groups {
        let mut tubes: Vec<Vec<TubeBox>> = Vec::new();
        let mut live: Vec<usize> = Vec::new();
        let mut last_frame: Option<usize> = None;
        for (frame, mut dets) in frames {
            dets.sort_by(|a, b| b.score.total_cmp(&a.score).then(cmp_rect(&a.rect, &b.rect)));
            if last_frame.is_none_or(|f| f + 1 != frame) {
                live.clear();
            }
            let mut pairs = Vec::new();
            for (ti, &tube) in live.iter().enumerate() {
                let tail = tubes[tube].last().expect("tubes are non-empty").rect;
                for (di, d) in dets.iter().enumerate() {
                    let iou = tail.iou(&d.rect);
                    if iou >= continuity_iou {
                        pairs.push((d.score + iou, di, ti));
                    }
                }
            }
            // Detections are already in score-then-box order, so `di` breaks ties.
            pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut det_used = vec![false; dets.len()];
            let mut tube_used = vec![false; live.len()];
            let mut next_live = Vec::new();
            for (_, di, ti) in pairs {
                if det_used[di] || tube_used[ti] {
                    continue;
                }
                det_used[di] = true;
                tube_used[ti] = true;
                let d = dets[di];
                tubes[live[ti]].push(TubeBox {
                    frame,
                    rect: d.rect,
                    score: d.score,
                });
                next_live.push(live[ti]);
            }
            for (di, d) in dets.iter().enumerate() {
                if !det_used[di] {
                    tubes.push(vec![TubeBox {
                        frame,
                        rect: d.rect,
                        score: d.score,
                    }]);
                    next_live.push(tubes.len() - 1);
                }
            }
            next_live.sort_unstable();
            live = next_live;
            last_frame = Some(frame);
        }
        for frames in tubes {
            let tube_score = frames.iter().map(|b| b.score).sum::<f64>() / frames.len() as f64;
            out.push(DetectionTube {
                video_id: video_id.to_string(),
                class,
                frames,
                tube_score,
            });
        }
    }
    out
}

/// All-point interpolated AP. `None` when the class has neither ground truth
/// nor detections; 0 when only one of the two is present. Equal scores keep
/// their input order.
pub fn average_precision(ranked: &[(f64, bool)], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if ranked.is_empty() { None } else { Some(0.0) };
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    order.sort_by(|&a, &b| ranked[b].0.total_cmp(&ranked[a].0));
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(order.len());
    let mut hits = Vec::with_capacity(order.len());
    for (k, &i) in order.iter().enumerate() {
        if ranked[i].1 {
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        hits.push(ranked[i].1);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let sum: f64 = precision.iter().zip(&hits).filter(|(_, &h)| h).map(|(p, _)| p).sum();
    Some(sum / num_gt as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub name: String,
    pub novel: bool,
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_detections: usize,
}

/// Per-class AP and Mean/Base/Novel aggregates over non-vacuous classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub level: String,
    pub protocol: EvalProtocol,
    pub per_class: Vec<ClassAp>,
    pub mean: Option<f64>,
    pub base: Option<f64>,
    pub novel: Option<f64>,
}

impl MapReport {
    fn from_classes(level: &str, protocol: EvalProtocol, per_class: Vec<ClassAp>) -> Self {
        let mean_of = |keep: &dyn Fn(&ClassAp) -> bool| {
            let v: Vec<f64> = per_class.iter().filter(|c| keep(c)).filter_map(|c| c.ap).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let mean = mean_of(&|_| true);
        let base = mean_of(&|c| !c.novel);
        let novel = mean_of(&|c| c.novel);
        MapReport {
            level: level.to_string(),
            protocol,
            per_class,
            mean,
            base,
            novel,
        }
    }

    pub fn ap_of(&self, class: &str) -> Option<f64> {
        self.per_class.iter().find(|c| c.name == class).and_then(|c| c.ap)
    }

    pub fn to_table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x + 0.0));
        let width = self.per_class.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{} mAP ({} protocol, IoU {})",
            self.level,
            self.protocol.mode,
            if self.level == "frame" { self.protocol.frame_iou_threshold } else { self.protocol.iou_threshold }
        );
        let _ = writeln!(s, "{:<width$}  {:>5}  {:>6}  {:>5}  {:>5}", "class", "split", "AP", "gt", "det");
        for c in &self.per_class {
            let split = if c.novel { "novel" } else { "base" };
            let _ = writeln!(
                s,
                "{:<width$}  {:>5}  {:>6}  {:>5}  {:>5}",
                c.name,
                split,
                pct(c.ap),
                c.num_gt,
                c.num_detections
            );
        }
        let _ = writeln!(s, "Mean {}  Base {}  Novel {}", pct(self.mean), pct(self.base), pct(self.novel));
        s
    }
}

trait Scored {
    type Gt;
    fn class(&self) -> usize;
    fn score(&self) -> f64;
    fn canonical(&self, other: &Self) -> Ordering;
    fn overlap(&self, gt: &Self::Gt, protocol: &EvalProtocol) -> f64;
    fn threshold(protocol: &EvalProtocol) -> f64;
    fn gt_class(gt: &Self::Gt) -> usize;
}

impl Scored for DetectionTube {
    type Gt = GtTube;

    fn class(&self) -> usize {
        self.class
    }

    fn score(&self) -> f64 {
        self.tube_score
    }

    fn canonical(&self, other: &Self) -> Ordering {
        self.video_id.cmp(&other.video_id).then_with(|| {
            for (a, b) in self.frames.iter().zip(&other.frames) {
                let o = a.frame.cmp(&b.frame).then(cmp_rect(&a.rect, &b.rect));
                if o != Ordering::Equal {
                    return o;
                }
            }
            self.frames.len().cmp(&other.frames.len())
        })
    }

    fn overlap(&self, gt: &GtTube, protocol: &EvalProtocol) -> f64 {
        if self.video_id != gt.video_id {
            return 0.0;
        }
        if protocol.temporal_only {
            temporal_iou(&self.boxes(), &gt.boxes)
        } else {
            tube_3d_iou(&self.boxes(), &gt.boxes)
        }
    }

    fn threshold(protocol: &EvalProtocol) -> f64 {
        protocol.iou_threshold
    }

    fn gt_class(gt: &GtTube) -> usize {
        gt.class
    }
}

impl Scored for Detection {
    type Gt = GtBox;

    fn class(&self) -> usize {
        self.class
    }

    fn score(&self) -> f64 {
        self.score
    }

    fn canonical(&self, other: &Self) -> Ordering {
        self.video_id
            .cmp(&other.video_id)
            .then(self.frame.cmp(&other.frame))
            .then(cmp_rect(&self.rect, &other.rect))
    }

    fn overlap(&self, gt: &GtBox, _: &EvalProtocol) -> f64 {
        if self.video_id != gt.video_id || self.frame != gt.frame {
            return 0.0;
        }
        self.rect.iou(&gt.rect)
    }

    fn threshold(protocol: &EvalProtocol) -> f64 {
        protocol.frame_iou_threshold
    }

    fn gt_class(gt: &GtBox) -> usize {
        gt.class
    }
}

fn check_classes(classes: &[EvalClass], protocol: &EvalProtocol, used: impl Iterator<Item = usize>) -> Result<()> {
    protocol.validate()?;
    if !classes.iter().any(|c| protocol.evaluates(c.novel)) {
        return Err(input_err!("the {} protocol has no classes to evaluate", protocol.mode));
    }
    for c in used {
        if c >= classes.len() {
            return Err(input_err!("class index {c} outside a vocabulary of {}", classes.len()));
        }
    }
    Ok(())
}

fn evaluate<D: Scored>(level: &str, dets: &[D], gts: &[D::Gt], classes: &[EvalClass], protocol: &EvalProtocol) -> Result<MapReport> {
    check_classes(classes, protocol, dets.iter().map(D::class).chain(gts.iter().map(D::gt_class)))?;
    let threshold = D::threshold(protocol);
    let mut per_class = Vec::new();
    for (ci, class) in classes.iter().enumerate() {
        if !protocol.evaluates(class.novel) {
            continue;
        }
        let mut ranked: Vec<&D> = dets.iter().filter(|d| d.class() == ci && d.score() > 0.0).collect();
        ranked.sort_by(|a, b| b.score().total_cmp(&a.score()).then_with(|| a.canonical(b)));
        let class_gts: Vec<&D::Gt> = gts.iter().filter(|g| D::gt_class(g) == ci).collect();
        let mut taken = vec![false; class_gts.len()];
        let mut hits = Vec::with_capacity(ranked.len());
        for d in &ranked {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in class_gts.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let o = d.overlap(g, protocol);
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
            }
            hits.push((d.score(), best.is_some()));
        }
        per_class.push(ClassAp {
            name: class.name.clone(),
            novel: class.novel,
            ap: average_precision(&hits, class_gts.len()),
            num_gt: class_gts.len(),
            num_detections: ranked.len(),
        });
    }
    Ok(MapReport::from_classes(level, *protocol, per_class))
}

/// Video mAP: tubes ranked by score, matched one-to-one to ground-truth tubes
/// of the same video and class at 3D IoU ≥ the protocol threshold.
pub fn video_map(tubes: &[DetectionTube], gts: &[GtTube], classes: &[EvalClass], protocol: &EvalProtocol) -> Result<MapReport> {
    evaluate("video", tubes, gts, classes, protocol)
}

/// Frame mAP: per-frame boxes pooled per class, matched at box IoU.
pub fn frame_map(dets: &[Detection], gts: &[GtBox], classes: &[EvalClass], protocol: &EvalProtocol) -> Result<MapReport> {
    evaluate("frame", dets, gts, classes, protocol)
}

fn class_lookup(classes: &[EvalClass]) -> BTreeMap<&str, usize> {
    classes.iter().enumerate().map(|(i, c)| (c.name.as_str(), i)).collect()
}

/// Ground-truth tubes of `records`, classes mapped into `classes`.
pub fn gt_tubes(records: &[AnnotationRecord], classes: &[EvalClass]) -> Result<Vec<GtTube>> {
    let lookup = class_lookup(classes);
    let mut out = Vec::new();
    for r in records {
        for t in &r.tubes {
            let class = *lookup
                .get(t.class.as_str())
                .ok_or_else(|| input_err!("video `{}`: class `{}` is not in the vocabulary", r.video_id, t.class))?;
            out.push(GtTube {
                video_id: r.video_id.clone(),
                class,
                boxes: t.boxes.iter().map(|b| (b.frame, b.rect)).collect(),
            });
        }
    }
    Ok(out)
}

pub fn gt_boxes(tubes: &[GtTube]) -> Vec<GtBox> {
    tubes
        .iter()
        .flat_map(|t| {
            t.boxes.iter().map(|&(frame, rect)| GtBox {
                video_id: t.video_id.clone(),
                frame,
                class: t.class,
                rect,
            })
        })
        .collect()
}

/// Ground truth rendered as perfect detections with score 1.
pub fn gt_as_detections(tubes: &[GtTube]) -> Vec<Detection> {
    gt_boxes(tubes)
        .into_iter()
        .map(|g| Detection {
            video_id: g.video_id,
            frame: g.frame,
            class: g.class,
            score: 1.0,
            rect: g.rect,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub video: MapReport,
    pub frame: MapReport,
}

impl Metrics {
    pub fn to_table(&self) -> String {
        format!("{}\n{}", self.video.to_table(), self.frame.to_table())
    }
}

/// Links per-frame detections and scores both metrics against `records`.
pub fn evaluate_detections(
    detections: &[Detection],
    records: &[AnnotationRecord],
    classes: &[EvalClass],
    protocol: &EvalProtocol,
) -> Result<Metrics> {
    let gts = gt_tubes(records, classes)?;
    let tubes = link_tubes(detections, protocol.continuity_iou);
    Ok(Metrics {
        video: video_map(&tubes, &gts, classes, protocol)?,
        frame: frame_map(detections, &gt_boxes(&gts), classes, protocol)?,
    })
}

pub fn detections_from_rows(rows: &[DetectionRow], records: &[AnnotationRecord], classes: &[EvalClass]) -> Result<Vec<Detection>> {
    let lookup = class_lookup(classes);
    let videos: BTreeSet<&str> = records.iter().map(|r| r.video_id.as_str()).collect();
    rows.iter()
        .enumerate()
        .map(|(i, row)| {
            let class = *lookup
                .get(row.class.as_str())
                .ok_or_else(|| input_err!("detection {}: class `{}` is not in the vocabulary", i + 1, row.class))?;
            if !videos.contains(row.video_id.as_str()) {
                return Err(input_err!("detection {}: unknown video `{}`", i + 1, row.video_id));
            }
            Ok(Detection {
                video_id: row.video_id.clone(),
                frame: row.frame_index,
                class,
                score: row.score,
                rect: row.rect(),
            })
        })
        .collect()
}

/// Scores an externally produced detection file with the same pipeline as
/// model output.
pub fn score_detection_file(
    path: &Path,
    records: &[AnnotationRecord],
    classes: &[EvalClass],
    protocol: &EvalProtocol,
) -> Result<Metrics> {
    let rows = read_detections(path)?;
    let dets = detections_from_rows(&rows, records, classes)?;
    evaluate_detections(&dets, records, classes, protocol)
}
