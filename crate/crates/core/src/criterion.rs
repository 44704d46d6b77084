//! Set-matching objective: GIoU, Hungarian assignment, and the per-stage
//! person/box/action losses.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{input_err, Result};
use crate::geometry::{giou_var, CenterBox, Rect};
use crate::head::StageOutput;
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-6;

/// Weights of the matching cost terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub score: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights {
            score: 2.0,
            l1: 5.0,
            giou: 2.0,
        }
    }
}

/// `total = Σ_m w_set·(bce + l1 + giou) + w_act·act`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_set: f64,
    pub w_act: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_set: 2.0,
            w_act: 48.0,
        }
    }
}

/// Generalized IoU of two corner-form boxes; `-1 < GIoU ≤ 1`.
pub fn giou(a: &Rect, b: &Rect) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull(b).area();
    inter / union - (hull - union) / hull
}

/// `1 − GIoU`, in `[0, 2)`.
pub fn giou_distance(a: &Rect, b: &Rect) -> Result<f64> {
    for r in [a, b] {
        if !(r.area() > 0.0) {
            return Err(input_err!("box {r:?} has no area"));
        }
    }
    Ok(1.0 - giou(a, b))
}

/// One-to-one assignment of targets to queries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(query, target)` pairs sorted by query.
    pub assignment: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
}

impl MatchResult {
    /// Sum of the assigned costs, added in target order.
    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        let mut by_target = self.assignment.clone();
        by_target.sort_by_key(|&(_, t)| t);
        by_target.iter().map(|&(q, t)| cost[q][t]).sum()
    }

    pub fn target_of(&self, query: usize) -> Option<usize> {
        self.assignment.iter().find(|&&(q, _)| q == query).map(|&(_, t)| t)
    }
}

/// Minimum-cost assignment for an `N × G` cost matrix (rows are queries),
/// `G ≤ N`. Every target receives exactly one query.
pub fn match_hungarian(cost: &[Vec<f64>], num_targets: usize) -> Result<MatchResult> {
    let n = cost.len();
    let g = num_targets;
    if g > n {
        return Err(input_err!("{g} targets cannot be matched to {n} queries"));
    }
    if cost.iter().any(|row| row.len() != g) {
        return Err(input_err!("cost matrix rows must all have {g} columns"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(input_err!("cost matrix has non-finite entries"));
    }
    // Shortest augmenting paths with potentials; targets are rows here.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; g + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=g {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[j - 1][i0 - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = Vec::with_capacity(g);
    let mut unmatched_queries = Vec::with_capacity(n - g);
    for j in 1..=n {
        if owner[j] == 0 {
            unmatched_queries.push(j - 1);
        } else {
            assignment.push((j - 1, owner[j] - 1));
        }
    }
    Ok(MatchResult {
        assignment,
        unmatched_queries,
    })
}

/// `cost[i][j] = c_score·(1 − s_i) + c_l1·‖b_i − g_j‖₁ + c_giou·(1 − GIoU(b_i, g_j))`.
pub fn matching_cost(boxes: &[CenterBox], scores: &[f64], targets: &[CenterBox], w: &CostWeights) -> Vec<Vec<f64>> {
    boxes
        .iter()
        .zip(scores)
        .map(|(b, &s)| {
            let r = b.to_rect();
            targets
                .iter()
                .map(|t| w.score * (1.0 - s) + w.l1 * b.l1(t) + w.giou * (1.0 - giou(&r, &t.to_rect())))
                .collect()
        })
        .collect()
}

/// Ground truth of one keyframe in normalized center form.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub boxes: Vec<CenterBox>,
    /// Vocabulary index per box.
    pub classes: Vec<usize>,
}

pub struct SetLoss<'g> {
    pub bce: Var<'g>,
    pub l1: Var<'g>,
    pub giou: Var<'g>,
}

/// Person BCE over all N queries (matched → 1), and box L1 / GIoU distance
/// averaged over matched pairs. `boxes: [N, 4]`, `scores: [N]`.
pub fn set_loss<'g>(boxes: Var<'g>, scores: Var<'g>, targets: &[CenterBox], m: &MatchResult) -> SetLoss<'g> {
    let g = boxes.graph();
    let n = scores.shape()[0];
    let mut labels = vec![0.0; n];
    for &(q, _) in &m.assignment {
        labels[q] = 1.0;
    }
    let t = g.constant(Tensor::vector(labels));
    let p = scores.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let bce = t
        .mul(p.ln())
        .add(t.rsub_scalar(1.0).mul(p.rsub_scalar(1.0).ln()))
        .mean_all()
        .neg();
    if m.assignment.is_empty() {
        return SetLoss {
            bce,
            l1: g.scalar(0.0),
            giou: g.scalar(0.0),
        };
    }
    let k = m.assignment.len() as f64;
    let queries: Vec<usize> = m.assignment.iter().map(|&(q, _)| q).collect();
    let matched = boxes.index_select(0, &queries);
    let data = m.assignment.iter().flat_map(|&(_, t)| targets[t].to_array()).collect();
    let tgt = g.constant(Tensor::new([queries.len(), 4], data));
    let l1 = matched.sub(tgt).abs().sum_all().scale(1.0 / k);
    let giou = giou_var(matched, tgt).rsub_scalar(1.0).sum_all().scale(1.0 / k);
    SetLoss { bce, l1, giou }
}

/// Cross-entropy of matched queries against their targets' classes.
pub fn action_loss<'g>(logits: Var<'g>, m: &MatchResult, target_classes: &[usize]) -> Result<Var<'g>> {
    let g = logits.graph();
    let c = logits.shape()[1];
    if m.assignment.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let k = m.assignment.len();
    let mut onehot = vec![0.0; k * c];
    for (row, &(_, t)) in m.assignment.iter().enumerate() {
        let class = *target_classes
            .get(t)
            .ok_or_else(|| input_err!("target {t} has no class"))?;
        if class >= c {
            return Err(input_err!("target class {class} outside a vocabulary of {c}"));
        }
        onehot[row * c + class] = 1.0;
    }
    let queries: Vec<usize> = m.assignment.iter().map(|&(q, _)| q).collect();
    let logp = logits.index_select(0, &queries).log_softmax_last();
    Ok(logp
        .mul(g.constant(Tensor::new([k, c], onehot)))
        .sum_all()
        .scale(-1.0 / k as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageLoss {
    pub bce: f64,
    pub l1: f64,
    pub giou: f64,
    pub act: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_stage: Vec<StageLoss>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.per_stage
            .iter()
            .map(|s| w.w_set * (s.bce + s.l1 + s.giou) + w.w_act * s.act)
            .sum()
    }
}

/// Matches and scores one stage. Returns the weighted stage loss.
pub fn stage_loss<'g>(
    boxes: Var<'g>,
    scores: Var<'g>,
    logits: Var<'g>,
    targets: &Targets,
    lw: &LossWeights,
    cw: &CostWeights,
) -> Result<(Var<'g>, StageLoss, MatchResult)> {
    let bv = boxes.value();
    let current: Vec<CenterBox> = bv.data().chunks(4).map(CenterBox::from_slice).collect();
    let cost = matching_cost(&current, scores.value().data(), &targets.boxes, cw);
    let m = match_hungarian(&cost, targets.boxes.len())?;
    let set = set_loss(boxes, scores, &targets.boxes, &m);
    let act = action_loss(logits, &m, &targets.classes)?;
    let loss = set.bce.add(set.l1).add(set.giou).scale(lw.w_set).add(act.scale(lw.w_act));
    let parts = StageLoss {
        bce: set.bce.item(),
        l1: set.l1.item(),
        giou: set.giou.item(),
        act: act.item(),
    };
    Ok((loss, parts, m))
}

/// Sum of independently matched stage losses (intermediate supervision).
pub fn total_loss<'g>(
    stages: &[StageOutput<'g>],
    targets: &Targets,
    lw: &LossWeights,
    cw: &CostWeights,
) -> Result<(Var<'g>, LossBreakdown)> {
    let mut total: Option<Var<'g>> = None;
    let mut per_stage = Vec::with_capacity(stages.len());
    for s in stages {
        let (loss, parts, _) = stage_loss(s.boxes, s.scores, s.logits, targets, lw, cw)?;
        per_stage.push(parts);
        total = Some(match total {
            Some(t) => t.add(loss),
            None => loss,
        });
    }
    let total = total.ok_or_else(|| input_err!("no stages to supervise"))?;
    Ok((
        total,
        LossBreakdown {
            per_stage,
            total: total.item(),
        },
    ))
}
