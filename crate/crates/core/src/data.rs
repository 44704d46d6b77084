//! On-disk schemas, class splits, frame sampling and the synthetic dataset.
//!
//! Layout of a dataset root:
//!
//! ```text
//! annotations.jsonl    header line, then one AnnotationRecord per line
//! split.json           SplitSpec
//! prompts.json         class -> sentence or list of sentences
//! videos/<id>/00000.png ...
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::value::RawValue;

use crate::backend::{Grounding, VideoClip};
use crate::criterion::Targets;
use crate::error::{input_err, Error, Result};
use crate::geometry::{CenterBox, Rect};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const PROMPTS_FILE: &str = "prompts.json";
pub const VIDEOS_DIR: &str = "videos";

const DETECTIONS_HEADER: &str = "# openmixer detections schema_version=1";

/// A box on one frame, absolute pixels. Serialized as
/// `[frame, x1, y1, x2, y2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(usize, f64, f64, f64, f64)", into = "(usize, f64, f64, f64, f64)")]
pub struct FrameBox {
    pub frame: usize,
    pub rect: Rect,
}

impl From<(usize, f64, f64, f64, f64)> for FrameBox {
    fn from((frame, x1, y1, x2, y2): (usize, f64, f64, f64, f64)) -> Self {
        FrameBox {
            frame,
            rect: Rect::new(x1, y1, x2, y2),
        }
    }
}

impl From<FrameBox> for (usize, f64, f64, f64, f64) {
    fn from(b: FrameBox) -> Self {
        (b.frame, b.rect.x1, b.rect.y1, b.rect.x2, b.rect.y2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotatedTube {
    pub class: String,
    /// Strictly increasing frames.
    pub boxes: Vec<FrameBox>,
}

/// Ground truth of one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub frame_count: usize,
    pub width: u32,
    pub height: u32,
    pub split_tag: String,
    pub tubes: Vec<AnnotatedTube>,
}

impl AnnotationRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.video_id.is_empty() {
            return Err("empty video_id".into());
        }
        if self.frame_count == 0 || self.width == 0 || self.height == 0 {
            return Err(format!("video `{}` has an empty extent", self.video_id));
        }
        let (w, h) = (f64::from(self.width), f64::from(self.height));
        for tube in &self.tubes {
            if tube.boxes.is_empty() {
                return Err(format!("tube of class `{}` has no boxes", tube.class));
            }
            for pair in tube.boxes.windows(2) {
                if pair[1].frame <= pair[0].frame {
                    return Err(format!("tube of class `{}` has non-increasing frames", tube.class));
                }
            }
            for b in &tube.boxes {
                let r = &b.rect;
                if b.frame >= self.frame_count {
                    return Err(format!("frame {} outside a {}-frame video", b.frame, self.frame_count));
                }
                let finite = [r.x1, r.y1, r.x2, r.y2].iter().all(|v| v.is_finite());
                if !finite || r.x1 < 0.0 || r.y1 < 0.0 || r.x2 > w || r.y2 > h || r.x1 >= r.x2 || r.y1 >= r.y2 {
                    return Err(format!("box {r:?} on frame {} is outside the {w}×{h} frame or empty", b.frame));
                }
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> BTreeSet<&str> {
        self.tubes.iter().map(|t| t.class.as_str()).collect()
    }

    /// Frames that carry at least one box.
    pub fn annotated_frames(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.tubes.iter().flat_map(|t| t.boxes.iter().map(|b| b.frame)).collect();
        set.into_iter().collect()
    }

    /// Normalized targets on `frame`. `class_index` maps names into the
    /// training vocabulary; an unmapped class is an error.
    pub fn targets_at(&self, frame: usize, class_index: impl Fn(&str) -> Option<usize>) -> Result<Targets> {
        let (w, h) = (f64::from(self.width), f64::from(self.height));
        let mut targets = Targets::default();
        for tube in &self.tubes {
            let Some(b) = tube.boxes.iter().find(|b| b.frame == frame) else {
                continue;
            };
            let class = class_index(&tube.class).ok_or_else(|| {
                Error::Validation(format!("video `{}`: class `{}` is not in the vocabulary", self.video_id, tube.class))
            })?;
            targets.boxes.push(b.rect.scale(1.0 / w, 1.0 / h).to_center());
            targets.classes.push(class);
        }
        Ok(targets)
    }
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    schema_version: u32,
    kind: String,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| Error::schema(path, 1, "missing header line"))?;
    let header: FileHeader =
        serde_json::from_str(first).map_err(|e| Error::schema(path, 1, format!("bad header: {e}")))?;
    if header.kind != "annotations" || header.schema_version != SCHEMA_VERSION {
        return Err(Error::schema(
            path,
            1,
            format!("expected annotations v{SCHEMA_VERSION}, found {} v{}", header.kind, header.schema_version),
        ));
    }
    let mut records: Vec<AnnotationRecord> = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in lines {
        let record: AnnotationRecord =
            serde_json::from_str(line).map_err(|e| Error::schema(path, i + 1, e.to_string()))?;
        record.validate().map_err(|m| Error::schema(path, i + 1, m))?;
        if !seen.insert(record.video_id.clone()) {
            return Err(Error::schema(path, i + 1, format!("duplicate video_id `{}`", record.video_id)));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut out = serde_json::to_string(&FileHeader {
        schema_version: SCHEMA_VERSION,
        kind: "annotations".into(),
    })?;
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    write_text(path, &out)
}

/// Base/novel partition of a class list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub schema_version: u32,
    pub dataset: String,
    pub ratio: f64,
    pub seed: u64,
    pub base: Vec<String>,
    pub novel: Vec<String>,
}

impl SplitSpec {
    pub fn is_novel(&self, class: &str) -> bool {
        self.novel.iter().any(|c| c == class)
    }

    pub fn all_classes(&self) -> Vec<String> {
        self.base.iter().chain(&self.novel).cloned().collect()
    }
}

/// Seeded shuffle of the sorted class list, then the first
/// `⌊ratio·n⌋` classes (at least one, at most `n − 1`) become base.
pub fn make_split(dataset: &str, classes: &[String], ratio: f64, seed: u64) -> Result<SplitSpec> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(input_err!("split ratio must lie in (0, 1), got {ratio}"));
    }
    let mut sorted = classes.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != classes.len() {
        return Err(input_err!("class list has duplicates"));
    }
    let n = sorted.len();
    if n < 2 {
        return Err(input_err!("need at least 2 classes to split, got {n}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let k = ((ratio * n as f64 + 1e-9).floor() as usize).clamp(1, n - 1);
    let novel = sorted.split_off(k);
    Ok(SplitSpec {
        schema_version: SCHEMA_VERSION,
        dataset: dataset.to_string(),
        ratio,
        seed,
        base: sorted,
        novel,
    })
}

pub fn read_split(path: &Path) -> Result<SplitSpec> {
    let spec: SplitSpec =
        serde_json::from_str(&read_text(path)?).map_err(|e| Error::schema(path, e.line(), e.to_string()))?;
    if spec.schema_version != SCHEMA_VERSION {
        return Err(Error::schema(path, 1, format!("unsupported schema_version {}", spec.schema_version)));
    }
    let base: BTreeSet<&String> = spec.base.iter().collect();
    if let Some(c) = spec.novel.iter().find(|c| base.contains(c)) {
        return Err(Error::Validation(format!("class `{c}` is both base and novel")));
    }
    Ok(spec)
}

pub fn write_split(path: &Path, spec: &SplitSpec) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(spec)? + "\n"))
}

/// Class name → prompt sentences.
pub type PromptTable = BTreeMap<String, Vec<String>>;

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl From<OneOrMany> for Vec<String> {
    fn from(v: OneOrMany) -> Self {
        match v {
            OneOrMany::One(s) => vec![s],
            OneOrMany::Many(v) => v,
        }
    }
}

/// A JSON object that rejects repeated keys.
struct UniqueMap<V>(Vec<(String, V)>);

impl<'de, V: Deserialize<'de>> Deserialize<'de> for UniqueMap<V> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V2<V>(std::marker::PhantomData<V>);
        impl<'de, V: Deserialize<'de>> Visitor<'de> for V2<V> {
            type Value = UniqueMap<V>;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut seen = BTreeSet::new();
                let mut out = Vec::new();
                while let Some(key) = map.next_key::<String>()? {
                    if !seen.insert(key.clone()) {
                        return Err(serde::de::Error::custom(format!("duplicate class key `{key}`")));
                    }
                    out.push((key, map.next_value()?));
                }
                Ok(UniqueMap(out))
            }
        }
        d.deserialize_map(V2(std::marker::PhantomData))
    }
}

/// Reads a prompt file: either `{"schema_version": 1, "prompts": {...}}` or a
/// bare `{class: sentence | [sentences]}` object.
pub fn load_prompts(path: &Path) -> Result<PromptTable> {
    let text = read_text(path)?;
    let parse_map = |json: &str| -> Result<Vec<(String, Box<RawValue>)>> {
        match serde_json::from_str::<UniqueMap<Box<RawValue>>>(json) {
            Ok(m) => Ok(m.0),
            Err(e) if e.to_string().contains("duplicate class key") => {
                Err(Error::Validation(format!("{}: {e}", path.display())))
            }
            Err(e) => Err(Error::schema(path, e.line(), e.to_string())),
        }
    };
    let mut entries = parse_map(&text)?;
    let keys: BTreeSet<&str> = entries.iter().map(|(k, _)| k.as_str()).collect();
    if keys == BTreeSet::from(["schema_version", "prompts"]) {
        let raw = |k: &str| entries.iter().find(|(key, _)| key == k).map(|(_, v)| v.get()).unwrap_or_default();
        let version: u32 = serde_json::from_str(raw("schema_version")).map_err(|e| Error::schema(path, 1, e.to_string()))?;
        if version != SCHEMA_VERSION {
            return Err(Error::schema(path, 1, format!("unsupported schema_version {version}")));
        }
        entries = parse_map(raw("prompts"))?;
    }
    let mut table = PromptTable::new();
    for (class, raw) in entries {
        let prompts: Vec<String> = serde_json::from_str::<OneOrMany>(raw.get())
            .map_err(|_| Error::schema(path, 1, format!("class `{class}` must map to a string or a list of strings")))?
            .into();
        if prompts.is_empty() || prompts.iter().any(|p| p.trim().is_empty()) {
            return Err(Error::schema(path, 1, format!("class `{class}` has an empty prompt")));
        }
        table.insert(class, prompts);
    }
    Ok(table)
}

pub fn write_prompts(path: &Path, table: &PromptTable) -> Result<()> {
    let body = serde_json::json!({ "schema_version": SCHEMA_VERSION, "prompts": table });
    write_text(path, &(serde_json::to_string_pretty(&body)? + "\n"))
}

/// Classes of `vocabulary` without prompts, and prompt classes outside it.
pub fn check_prompts(table: &PromptTable, vocabulary: &[String]) -> Result<()> {
    let unknown: Vec<&str> = table
        .keys()
        .filter(|k| !vocabulary.contains(k))
        .map(String::as_str)
        .collect();
    if unknown.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!("prompts for unknown classes: {}", unknown.join(", "))))
    }
}

/// One detected box, absolute pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub video_id: String,
    pub frame_index: usize,
    pub class: String,
    pub score: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl DetectionRow {
    pub fn rect(&self) -> Rect {
        Rect::new(self.x1, self.y1, self.x2, self.y2)
    }
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRow>> {
    let text = read_text(path)?;
    let (first, rest) = text.split_once('\n').unwrap_or((text.as_str(), ""));
    if first.trim_end() != DETECTIONS_HEADER {
        return Err(Error::schema(path, 1, format!("expected `{DETECTIONS_HEADER}`")));
    }
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(rest.as_bytes());
    let mut rows = Vec::new();
    for result in reader.deserialize::<DetectionRow>() {
        let row = result.map_err(|e| {
            let line = e.position().map_or(2, |p| p.line() as usize + 1);
            Error::schema(path, line, e.to_string())
        })?;
        let line = rows.len() + 3;
        let r = row.rect();
        if !row.score.is_finite() || ![r.x1, r.y1, r.x2, r.y2].iter().all(|v| v.is_finite()) {
            return Err(Error::schema(path, line, "non-finite value"));
        }
        if r.x1 >= r.x2 || r.y1 >= r.y2 {
            return Err(Error::schema(path, line, format!("empty box {r:?}")));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_detections(path: &Path, rows: &[DetectionRow]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in rows {
        writer.serialize(row).map_err(|e| input_err!("csv: {e}"))?;
    }
    let body = writer.into_inner().map_err(|e| input_err!("csv: {e}"))?;
    let mut out = format!("{DETECTIONS_HEADER}\n").into_bytes();
    if rows.is_empty() {
        out.extend_from_slice(b"video_id,frame_index,class,score,x1,y1,x2,y2\n");
    }
    out.extend(body);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Source frame indices of a `t`-frame window centered on `keyframe`;
/// positions outside the video replicate the nearest edge frame.
pub fn sample_frames(frame_count: usize, keyframe: usize, t: usize, stride: usize) -> Result<Vec<usize>> {
    if t == 0 || stride == 0 {
        return Err(input_err!("window length and stride must be positive"));
    }
    if keyframe >= frame_count {
        return Err(input_err!("keyframe {keyframe} outside a {frame_count}-frame video"));
    }
    let half = (t / 2) as i64;
    Ok((0..t as i64)
        .map(|i| (keyframe as i64 + (i - half) * stride as i64).clamp(0, frame_count as i64 - 1) as usize)
        .collect())
}

/// Decoded RGB8 frames of one video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoFrames {
    pub video_id: String,
    pub width: usize,
    pub height: usize,
    /// Row-major `H·W·3` bytes per frame.
    pub frames: Vec<Vec<u8>>,
}

impl VideoFrames {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// The `t`-frame clip around `keyframe`, pixels scaled to `[0, 1]`.
    pub fn clip(&self, keyframe: usize, t: usize, stride: usize, frame_rate: f64) -> Result<VideoClip> {
        let idx = sample_frames(self.frames.len(), keyframe, t, stride)?;
        let mut data = Vec::with_capacity(t * self.height * self.width * 3);
        for &i in &idx {
            let f = &self.frames[i];
            if f.len() != self.height * self.width * 3 {
                return Err(input_err!("frame {i} of `{}` has the wrong size", self.video_id));
            }
            data.extend(f.iter().map(|&b| f64::from(b) / 255.0));
        }
        let mut clip = VideoClip::new(Tensor::new([t, self.height, self.width, 3], data), frame_rate)?;
        clip.keyframe_index = t / 2;
        clip.video_id = self.video_id.clone();
        clip.source_frame = keyframe;
        Ok(clip)
    }
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:05}.png"))
}

/// Reads every `*.png` in `dir`, in file-name order.
pub fn load_video(dir: &Path) -> Result<VideoFrames> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(input_err!("no PNG frames in {}", dir.display()));
    }
    let video_id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut frames = Vec::with_capacity(paths.len());
    let (mut width, mut height) = (0, 0);
    for (i, p) in paths.iter().enumerate() {
        let img = image::open(p)
            .map_err(|e| Error::Image {
                path: p.clone(),
                source: e,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if i == 0 {
            (width, height) = (w, h);
        } else if (w, h) != (width, height) {
            return Err(input_err!("{} is {w}×{h}, earlier frames are {width}×{height}", p.display()));
        }
        frames.push(img.into_raw());
    }
    Ok(VideoFrames {
        video_id,
        width,
        height,
        frames,
    })
}

pub fn save_video(dir: &Path, video: &VideoFrames) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in video.frames.iter().enumerate() {
        let path = frame_path(dir, i);
        image::save_buffer(&path, f, video.width as u32, video.height as u32, image::ExtendedColorType::Rgb8)
            .map_err(|e| Error::Image { path, source: e })?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Horizontal,
    Vertical,
    Diagonal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthClass {
    pub name: String,
    pub color: [f64; 3],
    pub motion: Motion,
    pub novel: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub train_videos_per_base_class: usize,
    pub test_videos_per_base_class: usize,
    pub videos_per_novel_class: usize,
    /// Actor size range in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Pixels per frame.
    pub speed: f64,
    pub color_jitter: f64,
    pub texture_amplitude: f64,
    pub classes: Vec<SynthClass>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            frames: 12,
            train_videos_per_base_class: 10,
            test_videos_per_base_class: 5,
            videos_per_novel_class: 10,
            min_size: 16,
            max_size: 30,
            speed: 2.0,
            color_jitter: 0.03,
            texture_amplitude: 0.08,
            classes: vec![
                SynthClass {
                    name: "walk".into(),
                    color: [0.85, 0.15, 0.15],
                    motion: Motion::Horizontal,
                    novel: false,
                },
                SynthClass {
                    name: "climb".into(),
                    color: [0.15, 0.75, 0.2],
                    motion: Motion::Vertical,
                    novel: false,
                },
                SynthClass {
                    name: "jump".into(),
                    color: [0.2, 0.3, 0.9],
                    motion: Motion::Diagonal,
                    novel: true,
                },
            ],
        }
    }
}

impl SynthConfig {
    /// Toy-backend grounding that ties each class's color to its text feature.
    pub fn grounding(&self) -> Vec<Grounding> {
        self.classes
            .iter()
            .map(|c| Grounding {
                name: c.name.clone(),
                color: c.color,
            })
            .collect()
    }

    pub fn split(&self, seed: u64) -> SplitSpec {
        let pick = |novel: bool| self.classes.iter().filter(|c| c.novel == novel).map(|c| c.name.clone()).collect();
        let base: Vec<String> = pick(false);
        SplitSpec {
            schema_version: SCHEMA_VERSION,
            dataset: "synthetic".into(),
            ratio: base.len() as f64 / self.classes.len() as f64,
            seed,
            base,
            novel: pick(true),
        }
    }
}

pub const TRAIN_TAG: &str = "train";
pub const TEST_TAG: &str = "test";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub config: SynthConfig,
    pub seed: u64,
    pub records: Vec<AnnotationRecord>,
    pub videos: Vec<VideoFrames>,
}

impl SyntheticDataset {
    pub fn split(&self) -> SplitSpec {
        self.config.split(self.seed)
    }

    pub fn prompts(&self) -> PromptTable {
        self.config
            .classes
            .iter()
            .map(|c| (c.name.clone(), vec![format!("a video of person {}", c.name)]))
            .collect()
    }

    pub fn video(&self, video_id: &str) -> Option<&VideoFrames> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Colored rectangles moving over a static textured background. Each video
/// holds one actor whose class fixes its color and motion direction.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<SyntheticDataset> {
    let (w, h, f) = (config.width, config.height, config.frames);
    if w == 0 || h == 0 || f == 0 {
        return Err(input_err!("synthetic frames must be non-empty"));
    }
    if config.min_size == 0 || config.min_size > config.max_size || config.max_size >= w.min(h) {
        return Err(input_err!("actor size range {}..={} does not fit {w}×{h}", config.min_size, config.max_size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    let mut videos = Vec::new();
    for class in &config.classes {
        let plan: Vec<&str> = if class.novel {
            vec![TEST_TAG; config.videos_per_novel_class]
        } else {
            let mut p = vec![TRAIN_TAG; config.train_videos_per_base_class];
            p.extend(vec![TEST_TAG; config.test_videos_per_base_class]);
            p
        };
        for (k, tag) in plan.into_iter().enumerate() {
            let video_id = format!("{}_{tag}_{k:03}", class.name);
            let (video, tube) = render_video(config, class, &video_id, &mut rng);
            records.push(AnnotationRecord {
                video_id,
                frame_count: f,
                width: w as u32,
                height: h as u32,
                split_tag: tag.to_string(),
                tubes: vec![tube],
            });
            videos.push(video);
        }
    }
    Ok(SyntheticDataset {
        config: config.clone(),
        seed,
        records,
        videos,
    })
}

fn render_video(config: &SynthConfig, class: &SynthClass, video_id: &str, rng: &mut ChaCha8Rng) -> (VideoFrames, AnnotatedTube) {
    let (w, h, f) = (config.width, config.height, config.frames);
    let bw = rng.random_range(config.min_size..=config.max_size);
    let bh = rng.random_range(config.min_size..=config.max_size);
    let (vx, vy) = match class.motion {
        Motion::Horizontal => (config.speed, 0.0),
        Motion::Vertical => (0.0, config.speed),
        Motion::Diagonal => (config.speed, config.speed),
    };
    let flip = |v: f64, rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { -v } else { v };
    let (vx, vy) = (flip(vx, rng), flip(vy, rng));
    let travel = |v: f64| (v * (f - 1) as f64).abs();
    let start = |side: usize, size: usize, v: f64, rng: &mut ChaCha8Rng| {
        let room = (side - size) as f64 - travel(v);
        let lo = if v < 0.0 { travel(v) } else { 0.0 };
        lo + rng.random::<f64>() * room.max(0.0)
    };
    let x0 = start(w, bw, vx, rng);
    let y0 = start(h, bh, vy, rng);
    let jitter: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..=1.0) * config.color_jitter).collect();
    let color: Vec<f64> = class.color.iter().zip(&jitter).map(|(c, j)| c + j).collect();
    // Background texture: 4×4 gray blocks.
    let block = 4;
    let (gx, gy) = (w.div_ceil(block), h.div_ceil(block));
    let texture: Vec<f64> = (0..gx * gy)
        .map(|_| 0.5 + rng.random_range(-1.0..=1.0) * config.texture_amplitude)
        .collect();
    let mut frames = Vec::with_capacity(f);
    let mut boxes = Vec::with_capacity(f);
    for t in 0..f {
        let x1 = (x0 + vx * t as f64).round().clamp(0.0, (w - bw) as f64) as usize;
        let y1 = (y0 + vy * t as f64).round().clamp(0.0, (h - bh) as f64) as usize;
        let mut buf = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            for x in 0..w {
                let inside = x >= x1 && x < x1 + bw && y >= y1 && y < y1 + bh;
                if inside {
                    buf.extend(color.iter().map(|&c| quantize(c)));
                } else {
                    let g = quantize(texture[(y / block) * gx + x / block]);
                    buf.extend([g, g, g]);
                }
            }
        }
        frames.push(buf);
        boxes.push(FrameBox {
            frame: t,
            rect: Rect::new(x1 as f64, y1 as f64, (x1 + bw) as f64, (y1 + bh) as f64),
        });
    }
    (
        VideoFrames {
            video_id: video_id.to_string(),
            width: w,
            height: h,
            frames,
        },
        AnnotatedTube {
            class: class.name.clone(),
            boxes,
        },
    )
}

/// Writes annotations, split, prompts and PNG frames under `root`.
pub fn write_dataset(root: &Path, dataset: &SyntheticDataset) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_annotations(&root.join(ANNOTATIONS_FILE), &dataset.records)?;
    write_split(&root.join(SPLIT_FILE), &dataset.split())?;
    write_prompts(&root.join(PROMPTS_FILE), &dataset.prompts())?;
    for v in &dataset.videos {
        save_video(&root.join(VIDEOS_DIR).join(&v.video_id), v)?;
    }
    Ok(())
}

/// Normalized center-form tube boxes, convenient for priors and tests.
pub fn normalized(rect: &Rect, width: u32, height: u32) -> CenterBox {
    rect.scale(1.0 / f64::from(width), 1.0 / f64::from(height)).to_center()
}
