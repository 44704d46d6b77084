//! Prior box locations read off the patch-text attention of the frozen encoder.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::FeatureBundle;
use crate::error::{config_err, input_err, Error, Result};
use crate::geometry::CenterBox;
use crate::tensor::Tensor;

/// Smallest box side kept by every update.
pub const MIN_BOX_SIZE: f64 = 1e-4;

/// Attention values `[T, h, w]` and the keyframe they are sampled on.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub values: Tensor,
    pub keyframe_index: usize,
}

impl AttentionMap {
    pub fn grid(&self) -> (usize, usize) {
        (self.values.shape()[1], self.values.shape()[2])
    }

    pub fn keyframe(&self) -> &[f64] {
        self.values.row(self.keyframe_index)
    }
}

/// Boxes in normalized center form plus person scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub boxes: Vec<CenterBox>,
    pub person_scores: Vec<f64>,
    pub stage: usize,
}

impl BoxSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// `[N, 4]` tensor of `(cx, cy, w, h)`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.boxes.iter().flat_map(|b| b.to_array()).collect();
        Tensor::new([self.boxes.len(), 4], data)
    }

    pub fn satisfies_invariants(&self) -> bool {
        self.boxes.iter().all(|b| {
            (0.0..=1.0).contains(&b.cx)
                && (0.0..=1.0).contains(&b.cy)
                && b.w > 0.0
                && b.w <= 1.0
                && b.h > 0.0
                && b.h <= 1.0
        }) && self.person_scores.iter().all(|s| (0.0..=1.0).contains(s))
    }
}

/// Index and feature of the text row most similar to the video feature.
/// Ties go to the lowest index.
pub fn prematch_text(f_v: &[f64], text_features: &Tensor) -> Result<(usize, Vec<f64>)> {
    let c = text_features.shape()[0];
    if c == 0 {
        return Err(input_err!("cannot pre-match against an empty vocabulary"));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for i in 0..c {
        let s: f64 = text_features.row(i).iter().zip(f_v).map(|(a, b)| a * b).sum();
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok((best.0, text_features.row(best.0).to_vec()))
}

/// Cosine similarity of every unit-norm patch feature with `f_t`, `[T, h, w]`.
pub fn patch_text_correlation(patch_features_norm: &Tensor, f_t: &[f64]) -> Tensor {
    let s = patch_features_norm.shape();
    let d = s[3];
    let data = patch_features_norm
        .data()
        .chunks(d)
        .map(|p| p.iter().zip(f_t).map(|(a, b)| a * b).sum())
        .collect();
    Tensor::new([s[0], s[1], s[2]], data)
}

pub fn reverse_attention(s: &Tensor) -> Tensor {
    s.map(|x| 1.0 - x)
}

/// Pre-matches the video to a class, correlates its text feature with every
/// patch, and flips the map when the backend asks for it. Returns the map and
/// the pre-matched class index.
pub fn attention_map(bundle: &FeatureBundle) -> Result<(AttentionMap, usize)> {
    let (class, f_t) = prematch_text(&bundle.video_feature, &bundle.text_features)?;
    let mut values = patch_text_correlation(&bundle.patch_features_norm, &f_t);
    if bundle.reversed_attention {
        values = reverse_attention(&values);
    }
    Ok((
        AttentionMap {
            values,
            keyframe_index: bundle.keyframe_index,
        },
        class,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SamplingMode {
    /// Top-N cells of the keyframe slice, ties in row-major order.
    #[default]
    Deterministic,
    /// N draws without replacement from a softmax over the keyframe slice.
    Stochastic { temperature: f64, seed: u64 },
}

/// Normalized `(cx, cy)` cell centers of N prior locations on the keyframe.
pub fn sample_prior_locations(map: &AttentionMap, n: usize, mode: SamplingMode) -> Result<Vec<(f64, f64)>> {
    let (h, w) = map.grid();
    let cells = h * w;
    if n > cells {
        return Err(input_err!("cannot take {n} distinct locations from a {h}×{w} map"));
    }
    let values = map.keyframe();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(input_err!("attention map has non-finite values"));
    }
    let picked: Vec<usize> = match mode {
        SamplingMode::Deterministic => {
            let mut order: Vec<usize> = (0..cells).collect();
            order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
            order.truncate(n);
            order
        }
        SamplingMode::Stochastic { temperature, seed } => {
            if temperature <= 0.0 {
                return Err(config_err!("sampling temperature must be positive"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut weights: Vec<f64> = values.iter().map(|v| ((v - max) / temperature).exp()).collect();
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let total: f64 = weights.iter().sum();
                let pick = if total > 0.0 {
                    let mut r = rng.random::<f64>() * total;
                    let mut chosen = None;
                    for (i, &wt) in weights.iter().enumerate() {
                        if wt > 0.0 {
                            chosen = Some(i);
                            if r < wt {
                                break;
                            }
                            r -= wt;
                        }
                    }
                    chosen.expect("positive total weight")
                } else {
                    // All remaining mass underflowed; fall back to the first free cell.
                    (0..cells).find(|i| !out.contains(i)).expect("n ≤ cells")
                };
                weights[pick] = 0.0;
                out.push(pick);
            }
            out
        }
    };
    Ok(picked
        .into_iter()
        .map(|cell| {
            let (i, j) = (cell / w, cell % w);
            ((j as f64 + 0.5) / w as f64, (i as f64 + 0.5) / h as f64)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    #[default]
    Attention,
    #[serde(alias = "gt")]
    GroundTruth,
    Random,
    External,
}

impl FromStr for PriorSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(PriorSource::Attention),
            "gt" | "ground_truth" => Ok(PriorSource::GroundTruth),
            "random" => Ok(PriorSource::Random),
            "external" => Ok(PriorSource::External),
            _ => Err(config_err!("unknown prior source `{s}`")),
        }
    }
}

impl fmt::Display for PriorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorSource::Attention => "attention",
            PriorSource::GroundTruth => "gt",
            PriorSource::Random => "random",
            PriorSource::External => "external",
        })
    }
}

/// What each prior source needs beyond the attention centers.
#[derive(Clone, Copy, Debug)]
pub enum PriorInputs<'a> {
    Attention,
    /// Annotated keyframe boxes; queries cycle through them, each box's
    /// first query at its center and later ones spread inside it.
    GroundTruth(&'a [CenterBox]),
    Random { seed: u64 },
    /// Boxes from a detection file for this keyframe, if any were found.
    External(Option<&'a [CenterBox]>),
}

impl PriorInputs<'_> {
    pub fn source(&self) -> PriorSource {
        match self {
            PriorInputs::Attention => PriorSource::Attention,
            PriorInputs::GroundTruth(_) => PriorSource::GroundTruth,
            PriorInputs::Random { .. } => PriorSource::Random,
            PriorInputs::External(_) => PriorSource::External,
        }
    }
}

/// Half-extent, relative to the box size, of the region ground-truth
/// queries are spread over.
const GT_SPREAD: f64 = 0.35;

/// `j`-th point of an R2 low-discrepancy sequence mapped to
/// `[-GT_SPREAD, GT_SPREAD]²`; the first point is the origin.
fn spread_offset(j: usize) -> (f64, f64) {
    const A1: f64 = 0.754_877_666_246_692_7;
    const A2: f64 = 0.569_840_290_998_053_2;
    let frac = |x: f64| x - x.floor();
    let j = j as f64;
    (
        (frac(0.5 + j * A1) - 0.5) * 2.0 * GT_SPREAD,
        (frac(0.5 + j * A2) - 0.5) * 2.0 * GT_SPREAD,
    )
}

/// Full-frame boxes at the prior centers, person scores at 0.5. Sources other
/// than attention replace the centers; a keyframe without ground truth keeps
/// the attention centers.
pub fn init_box_queries(centers: &[(f64, f64)], inputs: PriorInputs<'_>) -> Result<BoxSet> {
    let n = centers.len();
    let replaced: Vec<(f64, f64)> = match inputs {
        PriorInputs::Attention => centers.to_vec(),
        PriorInputs::GroundTruth(gt) if gt.is_empty() => centers.to_vec(),
        PriorInputs::GroundTruth(gt) => (0..n)
            .map(|i| {
                let b = &gt[i % gt.len()];
                let (u, v) = spread_offset(i / gt.len());
                (b.cx + u * b.w, b.cy + v * b.h)
            })
            .collect(),
        PriorInputs::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect()
        }
        PriorInputs::External(None) => {
            return Err(input_err!("external prior source selected but no prior boxes were found"));
        }
        PriorInputs::External(Some(boxes)) if boxes.is_empty() => centers.to_vec(),
        PriorInputs::External(Some(boxes)) => {
            (0..n).map(|i| (boxes[i % boxes.len()].cx, boxes[i % boxes.len()].cy)).collect()
        }
    };
    Ok(BoxSet {
        boxes: replaced
            .into_iter()
            .map(|(cx, cy)| CenterBox::new(cx.clamp(0.0, 1.0), cy.clamp(0.0, 1.0), 1.0, 1.0))
            .collect(),
        person_scores: vec![0.5; n],
        stage: 0,
    })
}
