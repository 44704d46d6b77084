//! Video-language encoders and the feature plumbing in front of the head.
//!
//! A [`Backend`] turns a [`VideoClip`] plus a [`Vocabulary`] into a
//! [`FeatureBundle`]: patch features, a video-level feature, and one text
//! feature per class. Two implementations ship here. [`ToyBackend`] is a
//! fixed, seeded function of per-patch color and motion statistics. It is
//! cheap enough for desk-scale training and lets tests build scenes whose
//! appearance lines up with chosen text features. [`ExternalBackend`]
//! replays features exported by a real encoder.
//!
//! The learned [`FeaturePyramid`] that sits on top of the frozen patch
//! features also lives here.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::dfa::Vocabulary;
use crate::error::{config_err, input_err, Error, Result};
use crate::nn::{l2_normalize, normal_init, ParamStore, Scope};
use crate::tensor::Tensor;

/// `T` RGB frames in `[0, 1]`, stored `[T, H, W, 3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: Tensor,
    pub frame_rate: f64,
    pub keyframe_index: usize,
    /// Source video and the absolute frame the keyframe was taken from.
    pub video_id: String,
    pub source_frame: usize,
}

impl VideoClip {
    pub fn new(frames: Tensor, frame_rate: f64) -> Result<Self> {
        if frames.ndim() != 4 || frames.shape()[3] != 3 {
            return Err(input_err!("clip frames must be [T, H, W, 3], got {:?}", frames.shape()));
        }
        let t = frames.shape()[0];
        if t == 0 {
            return Err(input_err!("clip has no frames"));
        }
        Ok(VideoClip {
            frames,
            frame_rate,
            keyframe_index: t / 2,
            video_id: String::new(),
            source_frame: t / 2,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [f64; 3] {
        let (h, w) = (self.height(), self.width());
        let o = ((t * h + y) * w + x) * 3;
        let d = self.frames.data();
        [d[o], d[o + 1], d[o + 2]]
    }
}

/// Everything the head consumes from the frozen encoder for one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    /// `[T, h, w, D]`, unnormalized.
    pub patch_features: Tensor,
    /// `[T, h, w, D]`, unit-norm along `D`.
    pub patch_features_norm: Tensor,
    /// Unit-norm video-level feature.
    pub video_feature: Vec<f64>,
    /// `[C, D]`, unit-norm rows.
    pub text_features: Tensor,
    pub temperature: f64,
    pub reversed_attention: bool,
    pub keyframe_index: usize,
}

impl FeatureBundle {
    pub fn dim(&self) -> usize {
        self.video_feature.len()
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        let s = self.patch_features.shape();
        (s[0], s[1], s[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Toy,
    External,
}

/// A class whose appearance the toy encoder maps onto its text feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grounding {
    pub name: String,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub patch_size: usize,
    pub dim: usize,
    /// Softmax temperature of the vision-language similarity.
    pub temperature: f64,
    pub seed: u64,
    /// Overrides the backend's own reversed-attention default.
    pub reversed_attention: Option<bool>,
    pub grounding: Vec<Grounding>,
    pub appearance_gain: f64,
    pub grounding_gain: f64,
    pub grounding_sigma: f64,
    /// Weight of the shared actor direction added to patches whose color is
    /// close to any grounded class.
    pub person_gain: f64,
    pub prompt_jitter: f64,
    pub external_dir: Option<PathBuf>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendKind::Toy,
            patch_size: 16,
            dim: 32,
            temperature: 0.01,
            seed: 0,
            reversed_attention: None,
            grounding: Vec::new(),
            appearance_gain: 1.0,
            grounding_gain: 3.0,
            grounding_sigma: 0.15,
            person_gain: 0.0,
            prompt_jitter: 0.0,
            external_dir: None,
        }
    }
}

pub trait Backend: Send + Sync {
    fn encode_clip(&self, clip: &VideoClip, vocabulary: &Vocabulary) -> Result<FeatureBundle>;

    /// One unit-norm feature per prompt sentence of a class.
    fn encode_prompts(&self, class_name: &str, prompts: &[String]) -> Result<Vec<Vec<f64>>>;

    fn dim(&self) -> usize;

    fn patch_size(&self) -> usize;

    fn temperature(&self) -> f64;

    /// Whether raw patch-text similarity highlights background and must be
    /// flipped before sampling prior locations.
    fn reversed_attention(&self) -> bool;
}

pub fn build_backend(config: &BackendConfig) -> Result<Box<dyn Backend>> {
    match config.kind {
        BackendKind::Toy => Ok(Box::new(ToyBackend::new(config.clone())?)),
        BackendKind::External => Ok(Box::new(ExternalBackend::new(config.clone())?)),
    }
}

/// 64-bit FNV-1a; stable across platforms and compiler versions.
pub(crate) fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

const APPEARANCE_DIMS: usize = 5;

/// Deterministic stand-in encoder. Each patch is described by its mean color
/// and mean absolute frame difference; that descriptor is projected onto a
/// fixed appearance subspace, and colors close to a [`Grounding`] entry add
/// that entry's text direction. Those colors also add a shared actor
/// direction, orthogonal to every class, scaled by `person_gain`.
pub struct ToyBackend {
    config: BackendConfig,
    /// Orthonormal columns, stored as rows `[D][D]`.
    basis: Vec<Vec<f64>>,
    /// `[APPEARANCE_DIMS][D]` projection of the raw descriptor.
    appearance: Vec<Vec<f64>>,
}

impl ToyBackend {
    pub fn new(config: BackendConfig) -> Result<Self> {
        let d = config.dim;
        let g = config.grounding.len();
        if config.patch_size == 0 {
            return Err(config_err!("patch_size must be positive"));
        }
        if config.temperature <= 0.0 {
            return Err(config_err!("temperature must be positive, got {}", config.temperature));
        }
        if d < g + APPEARANCE_DIMS + 2 {
            return Err(config_err!(
                "toy backend dim {d} too small for {g} grounded classes (needs ≥ {})",
                g + APPEARANCE_DIMS + 2
            ));
        }
        let mut names = std::collections::BTreeSet::new();
        for entry in &config.grounding {
            if !names.insert(entry.name.as_str()) {
                return Err(config_err!("grounding lists `{}` twice", entry.name));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x70_79_62_61_63_6b);
        let basis = orthonormal_basis(&mut rng, d);
        let mix = normal_init(&mut rng, &[APPEARANCE_DIMS, APPEARANCE_DIMS], 1.0 / (APPEARANCE_DIMS as f64).sqrt());
        let appearance = (0..APPEARANCE_DIMS)
            .map(|i| {
                let mut row = vec![0.0; d];
                for k in 0..APPEARANCE_DIMS {
                    let coef = mix.get(&[i, k]) * config.appearance_gain;
                    for (r, b) in row.iter_mut().zip(&basis[g + k]) {
                        *r += coef * b;
                    }
                }
                row
            })
            .collect();
        Ok(ToyBackend {
            config,
            basis,
            appearance,
        })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn free_dims(&self) -> std::ops::Range<usize> {
        self.person_slot() + 1..self.config.dim
    }

    fn person_slot(&self) -> usize {
        self.config.grounding.len() + APPEARANCE_DIMS
    }

    /// Random unit direction in the subspace not used by groundings or appearance.
    fn hashed_direction(&self, key: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(key.as_bytes()) ^ self.config.seed);
        let free = self.free_dims();
        let coefs = normal_init(&mut rng, &[free.len()], 1.0);
        let mut v = vec![0.0; self.config.dim];
        for (c, k) in coefs.data().iter().zip(free) {
            for (x, b) in v.iter_mut().zip(&self.basis[k]) {
                *x += c * b;
            }
        }
        l2_normalize(&v)
    }

    /// Text direction of a class name before prompt jitter.
    pub fn class_direction(&self, name: &str) -> Vec<f64> {
        match self.config.grounding.iter().position(|g| g.name == name) {
            Some(j) => self.basis[j].clone(),
            None => self.hashed_direction(&format!("class:{name}")),
        }
    }

    /// Unnormalized feature of a patch with the given mean color and motion.
    pub fn patch_feature(&self, color: [f64; 3], motion: f64) -> Vec<f64> {
        let raw = [color[0] - 0.5, color[1] - 0.5, color[2] - 0.5, motion, 1.0];
        let mut v = vec![0.0; self.config.dim];
        for (a, row) in raw.iter().zip(&self.appearance) {
            for (x, r) in v.iter_mut().zip(row) {
                *x += a * r;
            }
        }
        let two_sigma_sq = 2.0 * self.config.grounding_sigma * self.config.grounding_sigma;
        let mut actor: f64 = 0.0;
        for (j, entry) in self.config.grounding.iter().enumerate() {
            let dist_sq: f64 = color.iter().zip(&entry.color).map(|(a, b)| (a - b) * (a - b)).sum();
            let closeness = (-dist_sq / two_sigma_sq).exp();
            actor = actor.max(closeness);
            let k = self.config.grounding_gain * closeness;
            if k < 1e-12 {
                continue;
            }
            for (x, b) in v.iter_mut().zip(&self.basis[j]) {
                *x += k * b;
            }
        }
        let k = self.config.person_gain * actor;
        if k >= 1e-12 {
            for (x, b) in v.iter_mut().zip(&self.basis[self.person_slot()]) {
                *x += k * b;
            }
        }
        v
    }
}

fn orthonormal_basis(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let raw = normal_init(rng, &[d, d], 1.0);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    for i in 0..d {
        let mut v = raw.row(i).to_vec();
        // Two passes of modified Gram-Schmidt.
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        basis.push(l2_normalize(&v));
    }
    basis
}

impl Backend for ToyBackend {
    fn encode_clip(&self, clip: &VideoClip, vocabulary: &Vocabulary) -> Result<FeatureBundle> {
        if vocabulary.is_empty() {
            return Err(input_err!("vocabulary is empty"));
        }
        if vocabulary.dim() != self.config.dim {
            return Err(config_err!(
                "vocabulary features have dim {}, backend dim is {}",
                vocabulary.dim(),
                self.config.dim
            ));
        }
        let p = self.config.patch_size;
        let (t, hh, ww) = (clip.num_frames(), clip.height(), clip.width());
        if hh % p != 0 || ww % p != 0 || hh == 0 || ww == 0 {
            return Err(config_err!("clip {hh}×{ww} is not a multiple of patch size {p}"));
        }
        let (h, w, d) = (hh / p, ww / p, self.config.dim);
        let area = (p * p) as f64;
        let mut feats = Vec::with_capacity(t * h * w * d);
        let mut normed = Vec::with_capacity(t * h * w * d);
        let mut frame_feats = Vec::with_capacity(t);
        for ti in 0..t {
            let prev = if ti > 0 { Some(ti - 1) } else if t > 1 { Some(1) } else { None };
            let mut frame_sum = vec![0.0; d];
            for i in 0..h {
                for j in 0..w {
                    let mut color = [0.0; 3];
                    let mut motion = 0.0;
                    for y in i * p..(i + 1) * p {
                        for x in j * p..(j + 1) * p {
                            let px = clip.pixel(ti, y, x);
                            for c in 0..3 {
                                color[c] += px[c];
                            }
                            if let Some(pt) = prev {
                                let q = clip.pixel(pt, y, x);
                                motion += (0..3).map(|c| (px[c] - q[c]).abs()).sum::<f64>() / 3.0;
                            }
                        }
                    }
                    for c in &mut color {
                        *c /= area;
                    }
                    let f = self.patch_feature(color, motion / area);
                    for (s, x) in frame_sum.iter_mut().zip(&f) {
                        *s += x;
                    }
                    normed.extend(l2_normalize(&f));
                    feats.extend(f);
                }
            }
            frame_feats.push(l2_normalize(&frame_sum));
        }
        let video_feature = temporal_mean_pool(&Tensor::from_rows(&frame_feats))?;
        Ok(FeatureBundle {
            patch_features: Tensor::new([t, h, w, d], feats),
            patch_features_norm: Tensor::new([t, h, w, d], normed),
            video_feature,
            text_features: vocabulary.text_features().clone(),
            temperature: self.config.temperature,
            reversed_attention: self.reversed_attention(),
            keyframe_index: clip.keyframe_index,
        })
    }

    fn encode_prompts(&self, class_name: &str, prompts: &[String]) -> Result<Vec<Vec<f64>>> {
        let base = self.class_direction(class_name);
        Ok(prompts
            .iter()
            .map(|sentence| {
                if self.config.prompt_jitter == 0.0 {
                    return base.clone();
                }
                let jitter = self.hashed_direction(&format!("prompt:{class_name}:{sentence}"));
                let v: Vec<f64> = base
                    .iter()
                    .zip(&jitter)
                    .map(|(b, j)| b + self.config.prompt_jitter * j)
                    .collect();
                l2_normalize(&v)
            })
            .collect())
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    fn temperature(&self) -> f64 {
        self.config.temperature
    }

    fn reversed_attention(&self) -> bool {
        self.config.reversed_attention.unwrap_or(false)
    }
}

/// Features produced offline by another encoder, one file per clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportedClip {
    /// `[T, h, w, D]`, unnormalized.
    pub patch_features: Tensor,
    pub video_feature: Vec<f64>,
}

/// Replays [`ExportedClip`] files from `<dir>/<video_id>/<source_frame>.json`
/// and per-prompt text features from `<dir>/text_features.json`
/// (`{class: [[f64; D], ...]}`). Reversed attention defaults to on, the
/// CLIP-family convention.
pub struct ExternalBackend {
    config: BackendConfig,
    dir: PathBuf,
    text: BTreeMap<String, Vec<Vec<f64>>>,
}

impl ExternalBackend {
    pub fn new(config: BackendConfig) -> Result<Self> {
        let dir = config
            .external_dir
            .clone()
            .ok_or_else(|| config_err!("backend.kind = external requires backend.external_dir"))?;
        let text_path = dir.join("text_features.json");
        let raw = std::fs::read_to_string(&text_path).map_err(|e| Error::io(&text_path, e))?;
        let text: BTreeMap<String, Vec<Vec<f64>>> = serde_json::from_str(&raw)?;
        Ok(ExternalBackend { config, dir, text })
    }

    pub fn clip_path(dir: &Path, video_id: &str, source_frame: usize) -> PathBuf {
        dir.join(video_id).join(format!("{source_frame}.json"))
    }
}

impl Backend for ExternalBackend {
    fn encode_clip(&self, clip: &VideoClip, vocabulary: &Vocabulary) -> Result<FeatureBundle> {
        if vocabulary.is_empty() {
            return Err(input_err!("vocabulary is empty"));
        }
        let path = Self::clip_path(&self.dir, &clip.video_id, clip.source_frame);
        let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let exported: ExportedClip = serde_json::from_str(&raw)?;
        let s = exported.patch_features.shape().to_vec();
        if s.len() != 4 || s[3] != self.config.dim || exported.video_feature.len() != self.config.dim {
            return Err(config_err!("{}: feature shape {s:?} does not match dim {}", path.display(), self.config.dim));
        }
        let p = self.config.patch_size;
        if clip.height() != s[1] * p || clip.width() != s[2] * p {
            return Err(config_err!(
                "{}: {}×{} grid does not match clip {}×{} at patch {p}",
                path.display(),
                s[1],
                s[2],
                clip.height(),
                clip.width()
            ));
        }
        let d = s[3];
        let mut normed = Vec::with_capacity(exported.patch_features.numel());
        for chunk in exported.patch_features.data().chunks(d) {
            normed.extend(l2_normalize(chunk));
        }
        Ok(FeatureBundle {
            patch_features_norm: Tensor::new(s, normed),
            patch_features: exported.patch_features,
            video_feature: l2_normalize(&exported.video_feature),
            text_features: vocabulary.text_features().clone(),
            temperature: self.config.temperature,
            reversed_attention: self.reversed_attention(),
            keyframe_index: clip.keyframe_index,
        })
    }

    fn encode_prompts(&self, class_name: &str, prompts: &[String]) -> Result<Vec<Vec<f64>>> {
        let feats = self
            .text
            .get(class_name)
            .ok_or_else(|| input_err!("no exported text features for class `{class_name}`"))?;
        if feats.is_empty() || (feats.len() != prompts.len() && feats.len() != 1) {
            return Err(input_err!(
                "class `{class_name}` has {} exported features for {} prompts",
                feats.len(),
                prompts.len()
            ));
        }
        Ok(feats.iter().map(|f| l2_normalize(f)).collect())
    }

    fn dim(&self) -> usize {
        self.config.dim
    }

    fn patch_size(&self) -> usize {
        self.config.patch_size
    }

    fn temperature(&self) -> f64 {
        self.config.temperature
    }

    fn reversed_attention(&self) -> bool {
        self.config.reversed_attention.unwrap_or(true)
    }
}

/// Mean of the rows of a `[T, D]` matrix, rescaled to unit length.
pub fn temporal_mean_pool(frame_features: &Tensor) -> Result<Vec<f64>> {
    let s = frame_features.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(input_err!("temporal_mean_pool needs a non-empty [T, D] matrix, got {s:?}"));
    }
    let (t, d) = (s[0], s[1]);
    let mut mean = vec![0.0; d];
    for row in frame_features.data().chunks(d) {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= t as f64;
    }
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(input_err!("temporal mean is the zero vector"));
    }
    Ok(l2_normalize(&mean))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PeTarget {
    /// 1-D linear resampling to `len` entries, endpoints kept.
    Temporal(usize),
    /// Square source grid resampled bilinearly to `h × w`.
    Spatial { h: usize, w: usize },
}

/// Resamples pretrained positional embeddings (`[L, D]`) to a new length or grid.
pub fn interpolate_positional_embeddings(pe: &Tensor, target: PeTarget) -> Result<Tensor> {
    let s = pe.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(input_err!("positional embeddings must be a non-empty [L, D] matrix"));
    }
    let (l, d) = (s[0], s[1]);
    match target {
        PeTarget::Temporal(len) => {
            if len == 0 {
                return Err(input_err!("target length must be positive"));
            }
            if len == l {
                return Ok(pe.clone());
            }
            let mut out = Vec::with_capacity(len * d);
            for i in 0..len {
                let (i0, i1, f) = corner_aligned(i, len, l);
                out.extend((0..d).map(|k| lerp(pe.get(&[i0, k]), pe.get(&[i1, k]), f)));
            }
            Ok(Tensor::new([len, d], out))
        }
        PeTarget::Spatial { h, w } => {
            let side = (l as f64).sqrt().round() as usize;
            if side * side != l {
                return Err(input_err!("{l} spatial embeddings do not form a square grid"));
            }
            if h == 0 || w == 0 {
                return Err(input_err!("target grid must be non-empty"));
            }
            if h == side && w == side {
                return Ok(pe.clone());
            }
            let mut out = Vec::with_capacity(h * w * d);
            for y in 0..h {
                let (y0, y1, fy) = corner_aligned(y, h, side);
                for x in 0..w {
                    let (x0, x1, fx) = corner_aligned(x, w, side);
                    out.extend((0..d).map(|k| {
                        let top = lerp(pe.get(&[y0 * side + x0, k]), pe.get(&[y0 * side + x1, k]), fx);
                        let bottom = lerp(pe.get(&[y1 * side + x0, k]), pe.get(&[y1 * side + x1, k]), fx);
                        lerp(top, bottom, fy)
                    }));
                }
            }
            Ok(Tensor::new([h * w, d], out))
        }
    }
}

fn lerp(a: f64, b: f64, f: f64) -> f64 {
    if f == 0.0 {
        a
    } else if f == 1.0 {
        b
    } else {
        a + (b - a) * f
    }
}

/// Source taps for output index `i` of `out` samples over `src` entries,
/// first and last samples aligned.
fn corner_aligned(i: usize, out: usize, src: usize) -> (usize, usize, f64) {
    if out == 1 || src == 1 {
        return (0, 0, 0.0);
    }
    let pos = i as f64 * (src - 1) as f64 / (out - 1) as f64;
    let i0 = (pos.floor() as usize).min(src - 1);
    let i1 = (i0 + 1).min(src - 1);
    (i0, i1, pos - i0 as f64)
}

/// Source taps for output index `i` under half-pixel-center resampling.
fn half_pixel(i: usize, out: usize, src: usize) -> (usize, usize, f64) {
    if out == src {
        return (i, i, 0.0);
    }
    let pos = ((i as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(src - 1);
    (i0, i1, pos - i0 as f64)
}

/// Bilinear spatial resize of a `[T, h, w, C]` tensor (half-pixel centers,
/// edge clamping).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let taps = ResizeTaps::new(x.shape(), out_h, out_w);
    Tensor::new(taps.out_shape(), taps.forward(x.data()))
}

struct ResizeTaps {
    t: usize,
    h: usize,
    w: usize,
    c: usize,
    oh: usize,
    ow: usize,
    ys: Vec<(usize, usize, f64)>,
    xs: Vec<(usize, usize, f64)>,
}

impl ResizeTaps {
    fn new(shape: &[usize], oh: usize, ow: usize) -> Self {
        let (t, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        ResizeTaps {
            t,
            h,
            w,
            c,
            oh,
            ow,
            ys: (0..oh).map(|i| half_pixel(i, oh, h)).collect(),
            xs: (0..ow).map(|i| half_pixel(i, ow, w)).collect(),
        }
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.t, self.oh, self.ow, self.c]
    }

    fn weights(&self, oy: usize, ox: usize) -> [(usize, usize, f64); 4] {
        let (y0, y1, fy) = self.ys[oy];
        let (x0, x1, fx) = self.xs[ox];
        [
            (y0, x0, (1.0 - fy) * (1.0 - fx)),
            (y0, x1, (1.0 - fy) * fx),
            (y1, x0, fy * (1.0 - fx)),
            (y1, x1, fy * fx),
        ]
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (h, w, c) = (self.h, self.w, self.c);
        if self.oh == h && self.ow == w {
            return x.to_vec();
        }
        let mut out = vec![0.0; self.t * self.oh * self.ow * c];
        for t in 0..self.t {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let dst = ((t * self.oh + oy) * self.ow + ox) * c;
                    for (y, xx, wt) in self.weights(oy, ox) {
                        if wt == 0.0 {
                            continue;
                        }
                        let src = ((t * h + y) * w + xx) * c;
                        for k in 0..c {
                            out[dst + k] += wt * x[src + k];
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(&self, g: &[f64]) -> Vec<f64> {
        let (h, w, c) = (self.h, self.w, self.c);
        if self.oh == h && self.ow == w {
            return g.to_vec();
        }
        let mut gx = vec![0.0; self.t * h * w * c];
        for t in 0..self.t {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let src = ((t * self.oh + oy) * self.ow + ox) * c;
                    for (y, xx, wt) in self.weights(oy, ox) {
                        if wt == 0.0 {
                            continue;
                        }
                        let dst = ((t * h + y) * w + xx) * c;
                        for k in 0..c {
                            gx[dst + k] += wt * g[src + k];
                        }
                    }
                }
            }
        }
        gx
    }
}

/// Differentiable counterpart of [`resize_bilinear`].
pub fn resize_bilinear_var<'g>(x: Var<'g>, out_h: usize, out_w: usize) -> Var<'g> {
    let value = x.value();
    let taps = ResizeTaps::new(value.shape(), out_h, out_w);
    let out = Tensor::new(taps.out_shape(), taps.forward(value.data()));
    x.graph().custom(&[x], out, move |ctx| {
        vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), taps.backward(ctx.grad.data())))]
    })
}

/// Spatial strides of the four pyramid levels, finest first.
pub const PYRAMID_STRIDES: [f64; 4] = [0.25, 0.5, 1.0, 2.0];

pub fn level_size(side: usize, stride: f64) -> usize {
    ((side as f64 / stride).round() as usize).max(1)
}

/// One level per entry of [`PYRAMID_STRIDES`], each `[T, h_l, w_l, C]`.
pub struct FeaturePyramid<'g> {
    pub levels: Vec<PyramidLevel<'g>>,
    pub frames: usize,
}

pub struct PyramidLevel<'g> {
    pub stride: f64,
    pub map: Var<'g>,
}

impl FeaturePyramid<'_> {
    pub fn channels(&self) -> usize {
        self.levels[0].map.shape()[3]
    }
}

/// Registers the pyramid parameters under `name`: the `D → C` input
/// projection and one (de)convolution per level.
pub fn init_pyramid(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize, channels: usize) {
    store.init_linear(rng, &format!("{name}.proj"), dim, channels);
    let fans = [(channels, 16 * channels), (channels, 4 * channels), (channels, channels), (4 * channels, channels)];
    for (l, (fan_in, fan_out)) in fans.into_iter().enumerate() {
        let key = format!("{name}.level{l}");
        store.insert(format!("{key}.weight"), crate::nn::xavier_uniform(rng, fan_in, fan_out).scale(0.1));
        store.insert(format!("{key}.bias"), Tensor::zeros([fan_out]));
    }
}

/// Builds the residual pyramid over frozen patch features `[T, h, w, D]`:
/// each level is a learned (de)convolution of the projected features plus
/// the projected features bilinearly resized to that level.
pub fn build_pyramid<'g>(scope: &Scope<'g>, name: &str, patch_features: &Tensor) -> FeaturePyramid<'g> {
    let s = patch_features.shape();
    let (t, h, w) = (s[0], s[1], s[2]);
    let g = scope.graph();
    let v = g.constant(patch_features.clone());
    let projected = scope.linear(&format!("{name}.proj"), v);
    let c = projected.shape()[3];
    let mut levels = Vec::with_capacity(4);
    for (l, &stride) in PYRAMID_STRIDES.iter().enumerate() {
        let key = format!("{name}.level{l}");
        let (lh, lw) = (level_size(h, stride), level_size(w, stride));
        let learned = match l {
            0 | 1 => {
                let up = if l == 0 { 4 } else { 2 };
                scope
                    .linear(&key, projected)
                    .reshape([t, h, w, up, up, c])
                    .permute(&[0, 1, 3, 2, 4, 5])
                    .reshape([t, h * up, w * up, c])
            }
            2 => scope.linear(&key, projected),
            _ => {
                let rows: Vec<usize> = (0..2 * lh).map(|i| i.min(h - 1)).collect();
                let cols: Vec<usize> = (0..2 * lw).map(|i| i.min(w - 1)).collect();
                let padded = if rows.len() == h && cols.len() == w {
                    projected
                } else {
                    projected.index_select(1, &rows).index_select(2, &cols)
                };
                let folded = padded
                    .reshape([t, lh, 2, lw, 2, c])
                    .permute(&[0, 1, 3, 2, 4, 5])
                    .reshape([t, lh, lw, 4 * c]);
                scope.linear(&key, folded)
            }
        };
        let residual = resize_bilinear_var(projected, lh, lw);
        levels.push(PyramidLevel {
            stride,
            map: learned.add(residual),
        });
    }
    FeaturePyramid { levels, frames: t }
}
