//! Query-text alignment: the class vocabulary, dynamic fusion of the
//! video-level feature into temporal queries, and cosine-softmax scoring.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::backend::Backend;
use crate::error::{config_err, input_err, Error, Result};
use crate::nn::{l2_normalize, l2_normalize_last, Scope};
use crate::tensor::Tensor;

pub const DEFAULT_TEMPLATE: &str = "a video of person {CLS}";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub prompts: Vec<String>,
    pub is_novel: bool,
}

impl ClassEntry {
    pub fn new(name: impl Into<String>, prompts: Vec<String>, is_novel: bool) -> Self {
        ClassEntry {
            name: name.into(),
            prompts,
            is_novel,
        }
    }

    /// A single prompt from a `{CLS}` template.
    pub fn from_template(name: impl Into<String>, template: &str, is_novel: bool) -> Self {
        let name = name.into();
        let prompt = template.replace("{CLS}", &name.replace('_', " "));
        ClassEntry::new(name, vec![prompt], is_novel)
    }
}

/// Class names with their prompt sentences and ensembled text features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    classes: Vec<ClassEntry>,
    /// `[C, D]`, unit-norm rows.
    text_features: Tensor,
}

impl Vocabulary {
    /// Encodes every prompt with `backend` and ensembles per class.
    pub fn build(classes: Vec<ClassEntry>, backend: &dyn Backend) -> Result<Self> {
        let mut per_class = Vec::with_capacity(classes.len());
        for class in &classes {
            if class.prompts.is_empty() {
                return Err(input_err!("class `{}` has no prompts", class.name));
            }
            per_class.push(backend.encode_prompts(&class.name, &class.prompts)?);
        }
        let text_features = if classes.is_empty() {
            Tensor::zeros([0, backend.dim()])
        } else {
            ensemble_text_features(&per_class)?
        };
        Self::from_features(classes, text_features)
    }

    pub fn from_features(classes: Vec<ClassEntry>, text_features: Tensor) -> Result<Self> {
        if text_features.ndim() != 2 || text_features.shape()[0] != classes.len() {
            return Err(input_err!(
                "{} classes but text features of shape {:?}",
                classes.len(),
                text_features.shape()
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &classes {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Validation(format!("class `{}` listed twice in vocabulary", c.name)));
            }
        }
        Ok(Vocabulary {
            classes,
            text_features,
        })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.text_features.shape()[1]
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    pub fn text_features(&self) -> &Tensor {
        &self.text_features
    }

    /// The classes at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Vocabulary {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.text_features.row(i));
        }
        Vocabulary {
            classes: indices.iter().map(|&i| self.classes[i].clone()).collect(),
            text_features: Tensor::new([indices.len(), d], data),
        }
    }

    pub fn base(&self) -> Vocabulary {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| !self.classes[i].is_novel).collect();
        self.select(&idx)
    }

    pub fn novel(&self) -> Vocabulary {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.classes[i].is_novel).collect();
        self.select(&idx)
    }
}

/// Per class, the mean of its unit-norm prompt features rescaled to unit length.
pub fn ensemble_text_features(per_prompt: &[Vec<Vec<f64>>]) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(per_prompt.len());
    for (c, prompts) in per_prompt.iter().enumerate() {
        let Some(first) = prompts.first() else {
            return Err(input_err!("class {c} has an empty prompt list"));
        };
        let d = first.len();
        let mut mean = vec![0.0; d];
        for p in prompts {
            if p.len() != d {
                return Err(input_err!("class {c} mixes prompt feature widths {d} and {}", p.len()));
            }
            for (m, x) in mean.iter_mut().zip(p) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= prompts.len() as f64;
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(input_err!("prompt features of class {c} cancel out (zero mean)"));
        }
        rows.push(if prompts.len() == 1 { first.clone() } else { l2_normalize(&mean) });
    }
    Ok(Tensor::from_rows(&rows))
}

/// How the fusion weight λ between the video feature and the queries is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum FusionMode {
    /// Learned per query and per stage through a sigmoid.
    #[default]
    Dynamic,
    /// The same λ₀ for every query.
    Fixed(f64),
}

impl FromStr for FusionMode {
    type Err = Error;

    /// `dynamic` or `fixed:<λ₀>`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "dynamic" {
            return Ok(FusionMode::Dynamic);
        }
        let value = s
            .strip_prefix("fixed:")
            .ok_or_else(|| config_err!("fusion mode must be `dynamic` or `fixed:<lambda>`, got `{s}`"))?;
        let lambda: f64 = value
            .parse()
            .map_err(|_| config_err!("fusion lambda `{value}` is not a number"))?;
        if !(0.0..=1.0).contains(&lambda) {
            return Err(config_err!("fixed fusion lambda must lie in [0, 1], got {lambda}"));
        }
        Ok(FusionMode::Fixed(lambda))
    }
}

impl TryFrom<String> for FusionMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FusionMode> for String {
    fn from(m: FusionMode) -> String {
        m.to_string()
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionMode::Dynamic => f.write_str("dynamic"),
            FusionMode::Fixed(l) => write!(f, "fixed:{l}"),
        }
    }
}

const PROJ_EPS: f64 = 1e-12;

/// λ as seen by [`dynamic_fuse`].
#[derive(Clone, Copy, Debug)]
pub enum Lambda<'g> {
    /// Pre-sigmoid values, one per query (`[N]`).
    Raw(Var<'g>),
    Fixed(f64),
}

/// `λ ⊙ f_v + (1 − λ) ⊙ unit(Q̂_t W)`, rows rescaled to unit length. `f_v` is
/// repeated over all N queries. Returns `[N, D]`.
///
/// Projected rows are brought to unit length first so λ weighs two vectors
/// of equal norm. A zero row stays zero.
pub fn dynamic_fuse<'g>(q_t: Var<'g>, f_v: &[f64], lambda: Lambda<'g>, proj_weight: Var<'g>) -> Var<'g> {
    let g = q_t.graph();
    let n = q_t.shape()[0];
    let fv = g.constant(Tensor::new([1, f_v.len()], f_v.to_vec()));
    let projected = q_t.matmul(proj_weight);
    let projected = projected.div(projected.square().sum_axis(1, true).add_scalar(PROJ_EPS).sqrt());
    let fused = match lambda {
        Lambda::Fixed(l) => fv.scale(l).add(projected.scale(1.0 - l)),
        Lambda::Raw(raw) => {
            let lam = raw.sigmoid().reshape([n, 1]);
            lam.mul(fv).add(lam.rsub_scalar(1.0).mul(projected))
        }
    };
    l2_normalize_last(fused)
}

/// Cosine logits `F̃ F_tᵀ / τ` and their row softmax, both `[N, C]`.
pub fn align_scores<'g>(fused: Var<'g>, text_features: Var<'g>, temperature: f64) -> Result<(Var<'g>, Var<'g>)> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(config_err!("temperature must be positive, got {temperature}"));
    }
    let logits = fused.matmul(text_features.t()).scale(1.0 / temperature);
    Ok((logits.softmax_last(), logits))
}

/// Video-level zero-shot logits `[1, C]` computed with the same arithmetic
/// as [`align_scores`].
pub fn zero_shot_logits(f_v: &[f64], text_features: &Tensor, temperature: f64) -> Result<Tensor> {
    let g = crate::autograd::Graph::new();
    let fv = l2_normalize_last(g.constant(Tensor::new([1, f_v.len()], f_v.to_vec())));
    let (_, logits) = align_scores(fv, g.constant(text_features.clone()), temperature)?;
    let out = logits.value();
    Ok((*out).clone())
}

/// Parameter names of the alignment head at `stage`.
pub fn lambda_name(stage: usize) -> String {
    format!("dfa.stage{stage}.lambda_raw")
}

pub fn proj_name(stage: usize) -> String {
    format!("dfa.stage{stage}.proj")
}

/// Action logits of one stage from the temporal queries alone.
pub fn classify<'g>(
    scope: &Scope<'g>,
    stage: usize,
    q_t: Var<'g>,
    f_v: &[f64],
    text_features: Var<'g>,
    temperature: f64,
    fusion: FusionMode,
) -> Result<Var<'g>> {
    let lambda = match fusion {
        FusionMode::Dynamic => Lambda::Raw(scope.param(&lambda_name(stage))),
        FusionMode::Fixed(l) => Lambda::Fixed(l),
    };
    let proj = scope.param(&format!("{}.weight", proj_name(stage)));
    let fused = dynamic_fuse(q_t, f_v, lambda, proj);
    Ok(align_scores(fused, text_features, temperature)?.1)
}

/// Effective λ values of every query at `stage`.
pub fn effective_lambdas(store: &crate::nn::ParamStore, stage: usize, fusion: FusionMode) -> Vec<f64> {
    let raw = store.get(&lambda_name(stage)).expect("lambda parameter");
    match fusion {
        FusionMode::Dynamic => raw.data().iter().map(|&x| crate::autograd::sigmoid(x)).collect(),
        FusionMode::Fixed(l) => vec![l; raw.numel()],
    }
}
