//! The cascaded decoder: spatial blocks that refine person boxes and
//! temporal blocks that build recognition queries.
//!
//! Each stage runs Q-Q mixing (self-attention with a box-geometry bias)
//! followed by Q-V mixing (adaptive point sampling over the feature pyramid
//! plus query-generated channel and spatial mixing).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{concat, Var};
use crate::backend::{FeatureBundle, FeaturePyramid};
use crate::dfa::{self, FusionMode};
use crate::error::{config_err, Error, Result};
use crate::geometry::{giou_var, CenterBox};
use crate::nn::{normal_init, xavier_uniform, ParamStore, Scope};
use crate::prior::{BoxSet, MIN_BOX_SIZE};
use crate::tensor::Tensor;

/// Where the video-level condition enters the temporal queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    #[default]
    PreVideo,
    PostVideo,
    PreText,
    None,
}

impl FromStr for ConditionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre_video" => Ok(ConditionMode::PreVideo),
            "post_video" => Ok(ConditionMode::PostVideo),
            "pre_text" => Ok(ConditionMode::PreText),
            "none" => Ok(ConditionMode::None),
            _ => Err(config_err!("unknown condition mode `{s}`")),
        }
    }
}

impl fmt::Display for ConditionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConditionMode::PreVideo => "pre_video",
            ConditionMode::PostVideo => "post_video",
            ConditionMode::PreText => "pre_text",
            ConditionMode::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub num_queries: usize,
    pub num_stages: usize,
    pub d_q: usize,
    pub heads: usize,
    pub qv_points: usize,
    /// Output points of the spatial mixing.
    pub qv_out_points: usize,
    /// Output channels of the channel mixing.
    pub qv_out_channels: usize,
    pub pyramid_channels: usize,
    pub condition_mode: ConditionMode,
    /// Stop gradients through the boxes passed from one stage to the next.
    pub detach_stage_boxes: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            num_queries: 100,
            num_stages: 3,
            d_q: 256,
            heads: 8,
            qv_points: 32,
            qv_out_points: 32,
            qv_out_channels: 64,
            pyramid_channels: 64,
            condition_mode: ConditionMode::PreVideo,
            detach_stage_boxes: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_queries", self.num_queries),
            ("num_stages", self.num_stages),
            ("d_q", self.d_q),
            ("heads", self.heads),
            ("qv_points", self.qv_points),
            ("qv_out_points", self.qv_out_points),
            ("qv_out_channels", self.qv_out_channels),
            ("pyramid_channels", self.pyramid_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(config_err!("model.{name} must be positive"));
            }
        }
        if self.d_q % self.heads != 0 {
            return Err(config_err!("d_q {} is not divisible by {} heads", self.d_q, self.heads));
        }
        Ok(())
    }
}

pub const PYRAMID: &str = "pyramid";

pub fn spatial_block(stage: usize) -> String {
    format!("stage{stage}.spatial")
}

pub fn temporal_block(stage: usize) -> String {
    format!("stage{stage}.temporal")
}

/// Registers every parameter of the cascade (pyramid, initial queries,
/// per-stage blocks and alignment heads).
pub fn init_head(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &HeadConfig, dim: usize) {
    let dq = cfg.d_q;
    crate::backend::init_pyramid(store, rng, PYRAMID, dim, cfg.pyramid_channels);
    store.insert("queries.spatial", normal_init(rng, &[cfg.num_queries, dq], 1.0));
    store.insert("queries.temporal", normal_init(rng, &[cfg.num_queries, dq], 1.0));
    for m in 0..cfg.num_stages {
        let s = spatial_block(m);
        init_qq(store, rng, &format!("{s}.qq"), cfg);
        init_qv(store, rng, &format!("{s}.qv"), cfg);
        store.init_linear(rng, &format!("{s}.score1"), dq, dq);
        store.init_linear(rng, &format!("{s}.score2"), dq, 1);
        store.init_linear(rng, &format!("{s}.box1"), dq, dq);
        store.insert(format!("{s}.box2.weight"), Tensor::zeros([dq, 4]));
        store.insert(format!("{s}.box2.bias"), Tensor::zeros([4]));

        let t = temporal_block(m);
        init_qq(store, rng, &format!("{t}.qq"), cfg);
        init_qv(store, rng, &format!("{t}.qv"), cfg);
        store.init_projection(rng, &format!("{t}.cond"), dim, dq);

        store.insert(dfa::lambda_name(m), Tensor::zeros([cfg.num_queries]));
        store.init_projection(rng, &dfa::proj_name(m), dq, dim);
    }
}

fn init_qq(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &HeadConfig) {
    store.init_linear(rng, &format!("{name}.qkv"), cfg.d_q, 3 * cfg.d_q);
    store.insert(format!("{name}.geometry"), Tensor::full([cfg.heads, 1, 1], 1.0));
    store.init_linear(rng, &format!("{name}.out"), cfg.d_q, cfg.d_q);
    store.init_layer_norm(&format!("{name}.norm"), cfg.d_q);
}

fn init_qv(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &HeadConfig) {
    let (dq, p, c) = (cfg.d_q, cfg.qv_points, cfg.pyramid_channels);
    let (po, co) = (cfg.qv_out_points, cfg.qv_out_channels);
    store.insert(format!("{name}.offset.weight"), xavier_uniform(rng, dq, 3 * p).scale(0.1));
    let spread = (0..3 * p).map(|_| rng.random_range(-1.0..1.0)).collect();
    store.insert(format!("{name}.offset.bias"), Tensor::new([3 * p], spread));
    store.insert(format!("{name}.level.weight"), xavier_uniform(rng, dq, 4 * p).scale(0.1));
    store.insert(format!("{name}.level.bias"), Tensor::zeros([4 * p]));
    store.insert(format!("{name}.channel.weight"), xavier_uniform(rng, dq, c * co).scale(0.1));
    store.insert(format!("{name}.channel.bias"), Tensor::zeros([c * co]));
    store.insert(format!("{name}.spatial.weight"), xavier_uniform(rng, dq, po * p).scale(0.1));
    store.insert(format!("{name}.spatial.bias"), Tensor::zeros([po * p]));
    store.init_layer_norm(&format!("{name}.norm_channel"), co);
    store.init_layer_norm(&format!("{name}.norm_spatial"), co);
    store.init_linear(rng, &format!("{name}.out"), po * co, dq);
    store.init_layer_norm(&format!("{name}.norm"), dq);
}

/// Sums in ascending order so the result does not depend on term order.
fn ordered_sum(terms: &mut [f64]) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Scaled dot-product attention over `[H, N, dh]` inputs with an additive
/// `[H, N, N]` bias. Reductions over keys are order-independent, so
/// permuting queries permutes the output bit-for-bit.
pub fn attention<'g>(q: Var<'g>, k: Var<'g>, v: Var<'g>, bias: Var<'g>) -> Var<'g> {
    let s = q.shape();
    let (h, n, dh) = (s[0], s[1], s[2]);
    let scale = 1.0 / (dh as f64).sqrt();
    let (qv, kv, vv, bv) = (q.value(), k.value(), v.value(), bias.value());
    let (qd, kd, vd, bd) = (qv.data(), kv.data(), vv.data(), bv.data());
    let mut weights = vec![0.0; h * n * n];
    let mut out = vec![0.0; h * n * dh];
    let mut terms = vec![0.0; n];
    for hi in 0..h {
        for i in 0..n {
            let qi = &qd[(hi * n + i) * dh..(hi * n + i + 1) * dh];
            let row = &mut weights[(hi * n + i) * n..(hi * n + i + 1) * n];
            for (j, r) in row.iter_mut().enumerate() {
                let kj = &kd[(hi * n + j) * dh..(hi * n + j + 1) * dh];
                let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                *r = dot * scale + bd[(hi * n + i) * n + j];
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for r in row.iter_mut() {
                *r = (*r - max).exp();
            }
            terms.copy_from_slice(row);
            let total = ordered_sum(&mut terms);
            for r in row.iter_mut() {
                *r /= total;
            }
            for d in 0..dh {
                for j in 0..n {
                    terms[j] = row[j] * vd[(hi * n + j) * dh + d];
                }
                out[(hi * n + i) * dh + d] = ordered_sum(&mut terms);
            }
        }
    }
    q.graph().custom(&[q, k, v, bias], Tensor::new([h, n, dh], out), move |ctx| {
        let (qd, kd, vd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.inputs[2].data());
        let g = ctx.grad.data();
        let mut gq = vec![0.0; h * n * dh];
        let mut gk = vec![0.0; h * n * dh];
        let mut gv = vec![0.0; h * n * dh];
        let mut gb = vec![0.0; h * n * n];
        let mut da = vec![0.0; n];
        for hi in 0..h {
            for i in 0..n {
                let a = &weights[(hi * n + i) * n..(hi * n + i + 1) * n];
                let gi = &g[(hi * n + i) * dh..(hi * n + i + 1) * dh];
                for j in 0..n {
                    let vj = &vd[(hi * n + j) * dh..(hi * n + j + 1) * dh];
                    da[j] = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                    for d in 0..dh {
                        gv[(hi * n + j) * dh + d] += a[j] * gi[d];
                    }
                }
                let mean: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                for j in 0..n {
                    let dl = a[j] * (da[j] - mean);
                    gb[(hi * n + i) * n + j] = dl;
                    for d in 0..dh {
                        gq[(hi * n + i) * dh + d] += scale * dl * kd[(hi * n + j) * dh + d];
                        gk[(hi * n + j) * dh + d] += scale * dl * qd[(hi * n + i) * dh + d];
                    }
                }
            }
        }
        vec![
            Some(Tensor::new([h, n, dh], gq)),
            Some(Tensor::new([h, n, dh], gk)),
            Some(Tensor::new([h, n, dh], gv)),
            Some(Tensor::new([h, n, n], gb)),
        ]
    })
}

/// Pairwise GIoU of `[N, 4]` center-form boxes, `[N, N]`.
pub fn pairwise_giou<'g>(boxes: Var<'g>) -> Var<'g> {
    let n = boxes.shape()[0];
    giou_var(boxes.reshape([n, 1, 4]), boxes.reshape([1, n, 4]))
}

/// Self-attention among queries with a per-head learned multiple of the
/// pairwise box GIoU added to the attention logits, then residual and
/// layer norm. `q: [N, D_q]`, `boxes: [N, 4]`.
pub fn qq_mix<'g>(scope: &Scope<'g>, name: &str, heads: usize, q: Var<'g>, boxes: Var<'g>) -> Var<'g> {
    let s = q.shape();
    let (n, dq) = (s[0], s[1]);
    let dh = dq / heads;
    let qkv = scope.linear(&format!("{name}.qkv"), q).reshape([n, 3, heads, dh]);
    let split = |i: usize| qkv.narrow(1, i, 1).reshape([n, heads, dh]).permute(&[1, 0, 2]);
    let bias = scope
        .param(&format!("{name}.geometry"))
        .mul(pairwise_giou(boxes).reshape([1, n, n]));
    let mixed = attention(split(0), split(1), split(2), bias)
        .permute(&[1, 0, 2])
        .reshape([n, dq]);
    let update = scope.linear(&format!("{name}.out"), mixed);
    scope.layer_norm(&format!("{name}.norm"), q.add(update))
}

/// Trilinear taps for one coordinate on an axis of `size` cells. Returns
/// `(i0, i1, frac, d grid / d coord)`.
fn axis_taps(grid: f64, size: usize, scale: f64) -> (usize, usize, f64, f64) {
    let hi = (size - 1) as f64;
    let (g, dg) = if grid <= 0.0 {
        (0.0, 0.0)
    } else if grid >= hi {
        (hi, 0.0)
    } else {
        (grid, scale)
    };
    let i0 = (g.floor() as usize).min(size - 1);
    let i1 = (i0 + 1).min(size - 1);
    (i0, i1, g - i0 as f64, dg)
}

/// Samples a `[T, h, w, C]` map at `[N, P, 3]` points `(x, y, t)`, where
/// `x, y` are normalized frame coordinates and `t` is a frame index. Values
/// outside the map clamp to the border. Returns `[N, P, C]`.
pub fn sample_points<'g>(map: Var<'g>, points: Var<'g>) -> Var<'g> {
    let ms = map.shape();
    let (t, h, w, c) = (ms[0], ms[1], ms[2], ms[3]);
    let ps = points.shape();
    let (n, p) = (ps[0], ps[1]);
    let locate = move |pt: &[f64]| {
        let x = axis_taps(pt[0] * w as f64 - 0.5, w, w as f64);
        let y = axis_taps(pt[1] * h as f64 - 0.5, h, h as f64);
        let z = axis_taps(pt[2], t, 1.0);
        (x, y, z)
    };
    let corner = move |ti: usize, yi: usize, xi: usize| ((ti * h + yi) * w + xi) * c;
    let mv = map.value();
    let pv = points.value();
    let md = mv.data();
    let mut out = vec![0.0; n * p * c];
    for (k, pt) in pv.data().chunks(3).enumerate() {
        let ((x0, x1, fx, _), (y0, y1, fy, _), (t0, t1, ft, _)) = locate(pt);
        let dst = &mut out[k * c..(k + 1) * c];
        // Nested lerps keep a constant field exactly constant.
        let lerp = |a: f64, b: f64, f: f64| a + (b - a) * f;
        for (ch, o) in dst.iter_mut().enumerate() {
            let at = |ti: usize, yi: usize, xi: usize| md[corner(ti, yi, xi) + ch];
            let plane = |ti: usize| {
                lerp(lerp(at(ti, y0, x0), at(ti, y0, x1), fx), lerp(at(ti, y1, x0), at(ti, y1, x1), fx), fy)
            };
            *o = lerp(plane(t0), plane(t1), ft);
        }
    }
    map.graph().custom(&[map, points], Tensor::new([n, p, c], out), move |ctx| {
        let (md, pd, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
        let mut gm = ctx.needs[0].then(|| vec![0.0; t * h * w * c]);
        let mut gp = vec![0.0; n * p * 3];
        for (k, pt) in pd.chunks(3).enumerate() {
            let ((x0, x1, fx, dx), (y0, y1, fy, dy), (t0, t1, ft, dt)) = locate(pt);
            let gk = &g[k * c..(k + 1) * c];
            for (ti, wt, st) in [(t0, 1.0 - ft, -1.0), (t1, ft, 1.0)] {
                for (yi, wy, sy) in [(y0, 1.0 - fy, -1.0), (y1, fy, 1.0)] {
                    for (xi, wx, sx) in [(x0, 1.0 - fx, -1.0), (x1, fx, 1.0)] {
                        let src = corner(ti, yi, xi);
                        let dot: f64 = gk.iter().zip(&md[src..src + c]).map(|(a, b)| a * b).sum();
                        gp[k * 3] += dot * sx * wy * wt * dx;
                        gp[k * 3 + 1] += dot * wx * sy * wt * dy;
                        gp[k * 3 + 2] += dot * wx * wy * st * dt;
                        if let Some(gm) = gm.as_mut() {
                            let wgt = wt * wy * wx;
                            if wgt != 0.0 {
                                for ch in 0..c {
                                    gm[src + ch] += wgt * gk[ch];
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![
            gm.map(|d| Tensor::new([t, h, w, c], d)),
            Some(Tensor::new([n, p, 3], gp)),
        ]
    })
}

/// Adaptive mixing of each query with features sampled around its box.
/// `q: [N, D_q]`, `boxes: [N, 4]`, keyframe index `keyframe` within the
/// pyramid's `T` frames.
pub fn qv_mix<'g>(
    scope: &Scope<'g>,
    name: &str,
    cfg: &HeadConfig,
    q: Var<'g>,
    pyramid: &FeaturePyramid<'g>,
    boxes: Var<'g>,
    keyframe: usize,
) -> Var<'g> {
    let n = q.shape()[0];
    let (p, c) = (cfg.qv_points, pyramid.channels());
    let (po, co) = (cfg.qv_out_points, cfg.qv_out_channels);
    let levels = pyramid.levels.len();
    let g = scope.graph();

    let offsets = scope.linear(&format!("{name}.offset"), q).reshape([n, p, 3]);
    let coord = |i: usize| boxes.narrow(1, i, 1).reshape([n, 1]);
    let (cx, cy, bw, bh) = (coord(0), coord(1), coord(2), coord(3));
    let off = |i: usize| offsets.narrow(2, i, 1).reshape([n, p]);
    let x = cx.add(bw.scale(0.5).mul(off(0)));
    let y = cy.add(bh.scale(0.5).mul(off(1)));
    let half_window = 0.5 * pyramid.frames as f64;
    let t = off(2).scale(half_window).add(g.scalar(keyframe as f64));
    let points = concat(&[x.reshape([n, p, 1]), y.reshape([n, p, 1]), t.reshape([n, p, 1])], 2);

    let level_weights = scope
        .linear(&format!("{name}.level"), q)
        .reshape([n, p, levels])
        .softmax_last();
    let mut sampled: Option<Var<'g>> = None;
    for (l, level) in pyramid.levels.iter().enumerate() {
        let s = sample_points(level.map, points).mul(level_weights.narrow(2, l, 1));
        sampled = Some(match sampled {
            Some(acc) => acc.add(s),
            None => s,
        });
    }
    let sampled = sampled.expect("pyramid has levels");

    let channel = scope.linear(&format!("{name}.channel"), q).reshape([n, c, co]);
    let mixed = sampled.matmul(channel);
    let mixed = scope.layer_norm(&format!("{name}.norm_channel"), mixed).relu();
    let spatial = scope.linear(&format!("{name}.spatial"), q).reshape([n, po, p]);
    let mixed = spatial.matmul(mixed);
    let mixed = scope.layer_norm(&format!("{name}.norm_spatial"), mixed).relu();
    let update = scope.linear(&format!("{name}.out"), mixed.reshape([n, po * co]));
    scope.layer_norm(&format!("{name}.norm"), q.add(update))
}

/// Clamp whose backward passes the gradient straight through, so boxes
/// resting on a bound can still be pulled back inside.
fn clamp_straight_through<'g>(x: Var<'g>, lo: f64, hi: f64) -> Var<'g> {
    let y = x.value().map(|v| v.clamp(lo, hi));
    x.graph().custom(&[x], y, |ctx| vec![Some(ctx.grad.clone())])
}

/// `cx' = cx + Δcx·w`, `cy' = cy + Δcy·h`, `w' = w·e^{Δw}`, `h' = h·e^{Δh}`,
/// then centers clamped to `[0, 1]` and sizes to `[1e-4, 1]`.
pub fn update_boxes<'g>(boxes: Var<'g>, delta: Var<'g>) -> Var<'g> {
    let n = boxes.shape()[0];
    let col = |v: Var<'g>, i: usize| v.narrow(1, i, 1);
    let (cx, cy, w, h) = (col(boxes, 0), col(boxes, 1), col(boxes, 2), col(boxes, 3));
    let cx = clamp_straight_through(cx.add(col(delta, 0).mul(w)), 0.0, 1.0);
    let cy = clamp_straight_through(cy.add(col(delta, 1).mul(h)), 0.0, 1.0);
    let w = clamp_straight_through(w.mul(col(delta, 2).exp()), MIN_BOX_SIZE, 1.0);
    let h = clamp_straight_through(h.mul(col(delta, 3).exp()), MIN_BOX_SIZE, 1.0);
    concat(&[cx, cy, w, h], 1).reshape([n, 4])
}

/// Plain-value counterpart of [`update_boxes`].
pub fn update_box_set(boxes: &BoxSet, delta: &Tensor) -> BoxSet {
    let g = crate::autograd::Graph::new();
    let out = update_boxes(g.constant(boxes.to_tensor()), g.constant(delta.clone())).value();
    BoxSet {
        boxes: out.data().chunks(4).map(CenterBox::from_slice).collect(),
        person_scores: boxes.person_scores.clone(),
        stage: boxes.stage + 1,
    }
}

pub struct SpatialOutput<'g> {
    pub queries: Var<'g>,
    /// `[N]` person probabilities.
    pub scores: Var<'g>,
    /// `[N, 4]` box offsets.
    pub delta: Var<'g>,
}

pub fn somb_forward<'g>(
    scope: &Scope<'g>,
    stage: usize,
    cfg: &HeadConfig,
    q_s: Var<'g>,
    pyramid: &FeaturePyramid<'g>,
    boxes: Var<'g>,
    keyframe: usize,
) -> SpatialOutput<'g> {
    let s = spatial_block(stage);
    let n = q_s.shape()[0];
    let mixed = qq_mix(scope, &format!("{s}.qq"), cfg.heads, q_s, boxes);
    let queries = qv_mix(scope, &format!("{s}.qv"), cfg, mixed, pyramid, boxes, keyframe);
    let hidden = scope.linear(&format!("{s}.score1"), queries).relu();
    let scores = scope.linear(&format!("{s}.score2"), hidden).sigmoid().reshape([n]);
    let hidden = scope.linear(&format!("{s}.box1"), queries).relu();
    let delta = scope.linear(&format!("{s}.box2"), hidden);
    SpatialOutput { queries, scores, delta }
}

/// The condition vector source handed to [`tomb_forward`].
#[derive(Clone, Copy, Debug)]
pub struct Condition<'a> {
    pub video: &'a [f64],
    /// Text feature of the pre-matched class.
    pub text: &'a [f64],
}

#[allow(clippy::too_many_arguments)]
pub fn tomb_forward<'g>(
    scope: &Scope<'g>,
    stage: usize,
    cfg: &HeadConfig,
    q_t: Var<'g>,
    pyramid: &FeaturePyramid<'g>,
    condition: Condition<'_>,
    boxes: Var<'g>,
    keyframe: usize,
) -> Var<'g> {
    let t = temporal_block(stage);
    let g = scope.graph();
    let project = |v: &[f64]| scope.projection(&format!("{t}.cond"), g.constant(Tensor::new([1, v.len()], v.to_vec())));
    let mixed = qq_mix(scope, &format!("{t}.qq"), cfg.heads, q_t, boxes);
    let qv = |x: Var<'g>| qv_mix(scope, &format!("{t}.qv"), cfg, x, pyramid, boxes, keyframe);
    match cfg.condition_mode {
        ConditionMode::PreVideo => qv(mixed.add(project(condition.video))),
        ConditionMode::PreText => qv(mixed.add(project(condition.text))),
        ConditionMode::PostVideo => qv(mixed).add(project(condition.video)),
        ConditionMode::None => qv(mixed),
    }
}

/// Predictions of one cascade stage.
#[derive(Clone, Copy, Debug)]
pub struct StageOutput<'g> {
    pub stage: usize,
    pub spatial_queries: Var<'g>,
    pub temporal_queries: Var<'g>,
    /// `[N, 4]` center-form boxes after this stage's update.
    pub boxes: Var<'g>,
    /// `[N]` person probabilities.
    pub scores: Var<'g>,
    /// `[N, C]` cosine logits.
    pub logits: Var<'g>,
}

/// Plain-value snapshot of a [`StageOutput`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryState {
    pub spatial_queries: Tensor,
    pub temporal_queries: Tensor,
    pub boxes: BoxSet,
    pub action_logits: Tensor,
    pub stage: usize,
}

impl From<&StageOutput<'_>> for QueryState {
    fn from(s: &StageOutput<'_>) -> Self {
        QueryState {
            spatial_queries: (*s.spatial_queries.value()).clone(),
            temporal_queries: (*s.temporal_queries.value()).clone(),
            boxes: BoxSet {
                boxes: s.boxes.value().data().chunks(4).map(CenterBox::from_slice).collect(),
                person_scores: s.scores.value().data().to_vec(),
                stage: s.stage + 1,
            },
            action_logits: (*s.logits.value()).clone(),
            stage: s.stage + 1,
        }
    }
}

/// Runs all stages. Stage `m` starts from the boxes of stage `m − 1`, the
/// first from `init`. `prematched` is the text feature of the pre-matched
/// class.
#[allow(clippy::too_many_arguments)]
pub fn cascade_forward<'g>(
    scope: &Scope<'g>,
    cfg: &HeadConfig,
    bundle: &FeatureBundle,
    pyramid: &FeaturePyramid<'g>,
    init: &BoxSet,
    prematched: &[f64],
    text_features: Var<'g>,
    fusion: FusionMode,
) -> Result<Vec<StageOutput<'g>>> {
    if init.len() != cfg.num_queries {
        return Err(config_err!("{} initial boxes for {} queries", init.len(), cfg.num_queries));
    }
    let g = scope.graph();
    let keyframe = bundle.keyframe_index;
    let condition = Condition {
        video: &bundle.video_feature,
        text: prematched,
    };
    let mut q_s = scope.param("queries.spatial");
    let mut q_t = scope.param("queries.temporal");
    let mut boxes = g.constant(init.to_tensor());
    let mut stages = Vec::with_capacity(cfg.num_stages);
    for m in 0..cfg.num_stages {
        let spatial = somb_forward(scope, m, cfg, q_s, pyramid, boxes, keyframe);
        let new_boxes = update_boxes(boxes, spatial.delta);
        let temporal_boxes = if cfg.detach_stage_boxes { new_boxes.detach() } else { new_boxes };
        q_t = tomb_forward(scope, m, cfg, q_t, pyramid, condition, temporal_boxes, keyframe);
        let logits = dfa::classify(scope, m, q_t, &bundle.video_feature, text_features, bundle.temperature, fusion)?;
        q_s = spatial.queries;
        stages.push(StageOutput {
            stage: m,
            spatial_queries: q_s,
            temporal_queries: q_t,
            boxes: new_boxes,
            scores: spatial.scores,
            logits,
        });
        boxes = temporal_boxes;
    }
    Ok(stages)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::max_rel_error;
    use crate::autograd::Graph;
    use crate::backend::{build_pyramid, PyramidLevel};
    use rand::SeedableRng;

    fn tiny_cfg() -> HeadConfig {
        HeadConfig {
            num_queries: 3,
            num_stages: 2,
            d_q: 4,
            heads: 2,
            qv_points: 3,
            qv_out_points: 2,
            qv_out_channels: 2,
            pyramid_channels: 3,
            ..HeadConfig::default()
        }
    }

    fn boxes_tensor() -> Tensor {
        Tensor::new([3, 4], vec![0.41, 0.52, 0.33, 0.44, 0.63, 0.47, 0.21, 0.29, 0.36, 0.58, 0.27, 0.23])
    }

    fn constant_pyramid<'g>(g: &'g Graph, t: usize, c: usize, value: f64) -> FeaturePyramid<'g> {
        let levels = [(0.25, 8), (0.5, 4), (1.0, 2), (2.0, 1)]
            .into_iter()
            .map(|(stride, side)| PyramidLevel {
                stride,
                map: g.constant(Tensor::full([t, side, side, c], value)),
            })
            .collect();
        FeaturePyramid { levels, frames: t }
    }

    fn setup() -> (ParamStore, HeadConfig) {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        init_head(&mut store, &mut rng, &cfg, 5);
        (store, cfg)
    }

    #[test]
    fn condition_mode_parsing() {
        for m in ["pre_video", "post_video", "pre_text", "none"] {
            assert_eq!(m.parse::<ConditionMode>().unwrap().to_string(), m);
        }
        assert!(matches!("sq".parse::<ConditionMode>(), Err(Error::Config(_))));
    }

    #[test]
    fn qq_mix_single_query_and_zero_output() {
        let (mut store, cfg) = setup();
        let name = "stage0.spatial.qq";
        let q = Tensor::new([1, 4], vec![0.3, -1.0, 0.8, 0.1]);
        let b = Tensor::new([1, 4], vec![0.5, 0.5, 0.4, 0.4]);
        {
            let g = Graph::new();
            let s = Scope::new(&g, &store, false);
            let qv = g.constant(q.clone());
            let out = qq_mix(&s, name, cfg.heads, qv, g.constant(b.clone())).value();
            let v = s.linear(&format!("{name}.qkv"), qv).narrow(1, 8, 4);
            let expected = s.layer_norm(&format!("{name}.norm"), qv.add(s.linear(&format!("{name}.out"), v)));
            for (a, e) in out.data().iter().zip(expected.value().data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
        store.zero_prefix(&format!("{name}.out."));
        let g = Graph::new();
        let s = Scope::new(&g, &store, false);
        let qv = g.constant(q);
        let out = qq_mix(&s, name, cfg.heads, qv, g.constant(b));
        assert_eq!(*out.value(), *s.layer_norm(&format!("{name}.norm"), qv).value());
    }

    #[test]
    fn qq_mix_is_permutation_equivariant() {
        let (store, cfg) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = normal_init(&mut rng, &[3, 4], 1.0);
        let run = |q: &Tensor, b: &Tensor| {
            let g = Graph::new();
            let s = Scope::new(&g, &store, false);
            let out = qq_mix(&s, "stage1.temporal.qq", cfg.heads, g.constant(q.clone()), g.constant(b.clone()));
            let v = (*out.value()).clone();
            v
        };
        let perm = [2, 0, 1];
        let permute = |t: &Tensor| Tensor::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>());
        let base = run(&q, &boxes_tensor());
        let permuted = run(&permute(&q), &permute(&boxes_tensor()));
        assert_eq!(permuted, permute(&base));
    }

    #[test]
    fn qv_mix_residual_identity_and_constant_field() {
        let (mut store, cfg) = setup();
        let name = "stage0.temporal.qv";
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = normal_init(&mut rng, &[3, 4], 1.0);
        {
            let g = Graph::new();
            let s = Scope::new(&g, &store, false);
            let pyr = constant_pyramid(&g, 4, 3, 0.7);
            let a = qv_mix(&s, name, &cfg, g.constant(q.clone()), &pyr, g.constant(boxes_tensor()), 2).value();
            let moved = Tensor::new([3, 4], vec![0.1, 0.9, 0.1, 0.1, 0.9, 0.1, 0.5, 0.5, 0.5, 0.5, 1.0, 1.0]);
            let b = qv_mix(&s, name, &cfg, g.constant(q.clone()), &pyr, g.constant(moved), 2).value();
            assert_eq!(a, b);
        }
        store.zero_prefix(&format!("{name}.channel."));
        store.zero_prefix(&format!("{name}.spatial."));
        let g = Graph::new();
        let s = Scope::new(&g, &store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feats = normal_init(&mut rng, &[4, 8, 8, 5], 1.0);
        let pyr = build_pyramid(&s, PYRAMID, &feats);
        let qv = g.constant(q);
        let out = qv_mix(&s, name, &cfg, qv, &pyr, g.constant(boxes_tensor()), 2);
        assert_eq!(*out.value(), *s.layer_norm(&format!("{name}.norm"), qv).value());
    }

    #[test]
    fn sampling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let map = normal_init(&mut rng, &[3, 4, 5, 2], 1.0);
        let pts = Tensor::new([2, 2, 3], vec![0.31, 0.42, 0.7, 0.77, 0.13, 1.4, 0.55, 0.61, 0.2, 0.08, 0.93, 1.9]);
        let weights = normal_init(&mut rng, &[2, 2, 2], 1.0);
        let err = max_rel_error(&[map, pts], |g, v| sample_points(v[0], v[1]).mul(g.constant(weights.clone())).sum_all(), 1e-6, 1e-3);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn sampling_hits_cell_centers() {
        let g = Graph::new();
        let map = Tensor::new([1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let pts = Tensor::new([1, 2, 3], vec![0.25, 0.25, 0.0, 0.75, 0.75, 0.0]);
        let out = sample_points(g.constant(map), g.constant(pts)).value();
        assert_eq!(out.data(), &[1.0, 4.0]);
    }

    #[test]
    fn box_updates() {
        let b = BoxSet {
            boxes: vec![CenterBox::new(0.5, 0.5, 1.0, 1.0), CenterBox::new(0.2, 0.7, 0.3, 0.1)],
            person_scores: vec![0.5; 2],
            stage: 0,
        };
        let same = update_box_set(&update_box_set(&b, &Tensor::zeros([2, 4])), &Tensor::zeros([2, 4]));
        assert_eq!(same.boxes, b.boxes);
        let half = update_box_set(&b, &Tensor::new([2, 4], vec![0.0, 0.0, 0.5f64.ln(), 0.0, 0.0, 0.0, 0.0, 0.0]));
        assert!((half.boxes[0].w - 0.5).abs() < 1e-15);
        let wild = update_box_set(&b, &Tensor::new([2, 4], vec![9.0, -9.0, 5.0, -50.0, 1.0, 1.0, 1.0, 1.0]));
        assert!(wild.satisfies_invariants());
    }

    fn run_cascade(store: &ParamStore, cfg: &HeadConfig, bundle: &FeatureBundle, init: &BoxSet) -> Vec<QueryState> {
        let g = Graph::new();
        let s = Scope::new(&g, store, false);
        let pyr = build_pyramid(&s, PYRAMID, &bundle.patch_features);
        let text = g.constant(bundle.text_features.clone());
        let prematched = bundle.text_features.row(0).to_vec();
        let stages = cascade_forward(&s, cfg, bundle, &pyr, init, &prematched, text, FusionMode::Dynamic).unwrap();
        stages.iter().map(QueryState::from).collect()
    }

    fn tiny_bundle() -> FeatureBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let v = normal_init(&mut rng, &[4, 4, 4, 5], 1.0);
        let text = Tensor::from_rows(&[
            crate::nn::l2_normalize(normal_init(&mut rng, &[5], 1.0).data()),
            crate::nn::l2_normalize(normal_init(&mut rng, &[5], 1.0).data()),
        ]);
        FeatureBundle {
            patch_features_norm: v.clone(),
            patch_features: v,
            video_feature: crate::nn::l2_normalize(normal_init(&mut rng, &[5], 1.0).data()),
            text_features: text,
            temperature: 0.1,
            reversed_attention: false,
            keyframe_index: 2,
        }
    }

    fn tiny_init() -> BoxSet {
        BoxSet {
            boxes: vec![
                CenterBox::new(0.3, 0.4, 1.0, 1.0),
                CenterBox::new(0.6, 0.2, 1.0, 1.0),
                CenterBox::new(0.5, 0.8, 1.0, 1.0),
            ],
            person_scores: vec![0.5; 3],
            stage: 0,
        }
    }

    #[test]
    fn cascade_stages_keep_invariants() {
        let (store, cfg) = setup();
        let states = run_cascade(&store, &cfg, &tiny_bundle(), &tiny_init());
        assert_eq!(states.len(), 2);
        for s in &states {
            assert!(s.boxes.satisfies_invariants());
            assert_eq!(s.action_logits.shape(), &[3, 2]);
            assert!(s.boxes.person_scores.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn zero_video_feature_matches_no_condition() {
        let (store, mut cfg) = setup();
        let mut bundle = tiny_bundle();
        bundle.video_feature = vec![0.0; 5];
        let g = Graph::new();
        let s = Scope::new(&g, &store, false);
        let pyr = build_pyramid(&s, PYRAMID, &bundle.patch_features);
        let q = s.param("queries.temporal");
        let b = g.constant(tiny_init().to_tensor());
        let cond = Condition {
            video: &bundle.video_feature,
            text: bundle.text_features.row(0),
        };
        let pre = tomb_forward(&s, 0, &cfg, q, &pyr, cond, b, 2).value();
        cfg.condition_mode = ConditionMode::None;
        let none = tomb_forward(&s, 0, &cfg, q, &pyr, cond, b, 2).value();
        assert_eq!(pre, none);
    }

    #[test]
    fn score_and_box_heads_zeroed() {
        let (mut store, cfg) = setup();
        store.zero_prefix("stage0.spatial.score2.");
        let g = Graph::new();
        let s = Scope::new(&g, &store, false);
        let pyr = build_pyramid(&s, PYRAMID, &tiny_bundle().patch_features);
        let b = g.constant(tiny_init().to_tensor());
        let out = somb_forward(&s, 0, &cfg, s.param("queries.spatial"), &pyr, b, 2);
        assert_eq!(out.scores.value().data(), &[0.5; 3]);
        assert_eq!(*update_boxes(b, out.delta).value(), *b.value());
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let ins: Vec<Tensor> = [[2, 3, 2], [2, 3, 2], [2, 3, 2], [2, 3, 3]]
            .iter()
            .map(|s| normal_init(&mut rng, s, 1.0))
            .collect();
        let w = normal_init(&mut rng, &[2, 3, 2], 1.0);
        let err = max_rel_error(&ins, |g, v| attention(v[0], v[1], v[2], v[3]).mul(g.constant(w.clone())).sum_all(), 1e-5, 1e-3);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn block_gradients() {
        let (store, cfg) = setup();
        let store: &'static ParamStore = Box::leak(Box::new(store));
        let bundle = tiny_bundle();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let q = normal_init(&mut rng, &[3, 4], 1.0);
        let w = normal_init(&mut rng, &[3, 4], 1.0);
        let err = max_rel_error(
            &[q, boxes_tensor()],
            |g, v| {
                let s = Scope::new(g, store, false);
                let pyr = build_pyramid(&s, PYRAMID, &bundle.patch_features);
                let mixed = qq_mix(&s, "stage0.spatial.qq", cfg.heads, v[0], v[1]);
                qv_mix(&s, "stage0.spatial.qv", &cfg, mixed, &pyr, v[1], 2)
                    .mul(g.constant(w.clone()))
                    .sum_all()
            },
            1e-6,
            1e-3,
        );
        assert!(err < 1e-4, "{err}");
    }
}
