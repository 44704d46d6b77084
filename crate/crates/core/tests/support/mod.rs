//! Reference implementations and fixtures shared by the integration tests.
//! Nothing here calls into the code it is used to check.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use openmixer::autograd::{Graph, Var};
use openmixer::data::{generate_synthetic, SynthConfig, SyntheticDataset};
use openmixer::eval::{EvalClass, EvalProtocol};
use openmixer::head::HeadConfig;
use openmixer::nn::{ParamStore, Scope};
use openmixer::{Dataset, OpenMixer, RunConfig, Tensor, Trainer, TrainingSet};

// ---------------------------------------------------------------- gradients

/// Largest relative error between the tape gradient of `loss` w.r.t. each
/// input and a central difference with step `h`, measured against
/// `max(|analytic|, |numeric|, floor)`.
pub fn input_rel_error(inputs: &[Tensor], loss: impl for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>, h: f64, floor: f64) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let grads = g.backward(loss(&g, &vars));
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[k]);
        for i in 0..input.numel() {
            let at = |delta: f64| {
                let g2 = Graph::new();
                let vs: Vec<Var<'_>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut t = t.clone();
                        if j == k {
                            t.data_mut()[i] += delta;
                        }
                        g2.leaf(t)
                    })
                    .collect();
                loss(&g2, &vs).item()
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
        }
    }
    worst
}

/// Same comparison for every parameter whose name starts with one of
/// `prefixes`.
pub fn param_rel_error(store: &ParamStore, prefixes: &[&str], loss: impl for<'g> Fn(&Scope<'g>) -> Var<'g>, h: f64, floor: f64) -> f64 {
    let g = Graph::new();
    let scope = Scope::new(&g, store, true);
    let grads = scope.collect_grads(&g.backward(loss(&scope)));
    let names: Vec<String> = store
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
        .cloned()
        .collect();
    assert!(!names.is_empty(), "no parameters under {prefixes:?}");
    let mut worst: f64 = 0.0;
    for name in names {
        let analytic = grads.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(store.get(&name).unwrap().shape().to_vec()));
        for i in 0..analytic.numel() {
            let at = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(&name).unwrap().data_mut()[i] += delta;
                let g2 = Graph::new();
                let scope = Scope::new(&g2, &s, false);
                loss(&scope).item()
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(floor));
        }
    }
    worst
}

// ---------------------------------------------------------------- matching

/// Exhaustive minimum over injective target → query maps, summed in target
/// order.
pub fn brute_force_assignment(cost: &[Vec<f64>], targets: usize) -> f64 {
    fn go(cost: &[Vec<f64>], t: usize, g: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if t == g {
            *best = best.min(acc);
            return;
        }
        for q in 0..cost.len() {
            if !used[q] {
                used[q] = true;
                go(cost, t + 1, g, used, acc + cost[q][t], best);
                used[q] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, targets, &mut vec![false; cost.len()], 0.0, &mut best);
    best
}

// ---------------------------------------------------------------- evaluation

pub type Frames = Vec<(usize, [f64; 4])>;

/// A scored tube (or a single box when it spans one frame).
#[derive(Clone, Debug)]
pub struct OracleDet {
    pub video: String,
    pub class: usize,
    pub score: f64,
    pub frames: Frames,
}

#[derive(Clone, Debug)]
pub struct OracleGt {
    pub video: String,
    pub class: usize,
    pub frames: Frames,
}

fn box_iou(p: &[f64; 4], q: &[f64; 4]) -> f64 {
    let iw = (p[2].min(q[2]) - p[0].max(q[0])).max(0.0);
    let ih = (p[3].min(q[3]) - p[1].max(q[1])).max(0.0);
    let i = iw * ih;
    i / ((p[2] - p[0]) * (p[3] - p[1]) + (q[2] - q[0]) * (q[3] - q[1]) - i)
}

/// Temporal IoU of the frame sets times the mean box IoU on shared frames.
pub fn oracle_tube_iou(a: &Frames, b: &Frames) -> f64 {
    let ma: HashMap<usize, [f64; 4]> = a.iter().copied().collect();
    let mb: HashMap<usize, [f64; 4]> = b.iter().copied().collect();
    let shared: Vec<usize> = ma.keys().filter(|f| mb.contains_key(f)).copied().collect();
    if shared.is_empty() {
        return 0.0;
    }
    let union = ma.len() + mb.len() - shared.len();
    let spatial: f64 = shared.iter().map(|f| box_iou(&ma[f], &mb[f])).sum::<f64>() / shared.len() as f64;
    shared.len() as f64 / union as f64 * spatial
}

/// AP as the mean, over recall levels k/G, of the best precision reached
/// at or beyond that recall.
pub fn oracle_ap(hits: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if hits.is_empty() { None } else { Some(0.0) };
    }
    let mut curve = Vec::new();
    let mut tp = 0;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        curve.push((tp, tp as f64 / (k + 1) as f64));
    }
    let total: f64 = (1..=num_gt)
        .map(|level| curve.iter().filter(|(r, _)| *r >= level).map(|(_, p)| *p).fold(0.0, f64::max))
        .sum();
    Some(total / num_gt as f64)
}

/// Mean AP over classes that have ground truth or detections. Scores must
/// be distinct.
pub fn oracle_map(dets: &[OracleDet], gts: &[OracleGt], num_classes: usize, threshold: f64) -> Option<f64> {
    let mut aps = Vec::new();
    for c in 0..num_classes {
        let mut mine: Vec<&OracleDet> = dets.iter().filter(|d| d.class == c && d.score > 0.0).collect();
        mine.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let g: Vec<&OracleGt> = gts.iter().filter(|x| x.class == c).collect();
        let mut used = vec![false; g.len()];
        let mut hits = Vec::new();
        for d in mine {
            let mut pick: Option<(usize, f64)> = None;
            for (i, gt) in g.iter().enumerate() {
                if used[i] || gt.video != d.video {
                    continue;
                }
                let o = oracle_tube_iou(&d.frames, &gt.frames);
                if o >= threshold && pick.is_none_or(|(_, b)| o > b) {
                    pick = Some((i, o));
                }
            }
            if let Some((i, _)) = pick {
                used[i] = true;
            }
            hits.push(pick.is_some());
        }
        if let Some(ap) = oracle_ap(&hits, g.len()) {
            aps.push(ap);
        }
    }
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

fn random_box(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let x = rng.random_range(0.0..40.0);
    let y = rng.random_range(0.0..40.0);
    [x, y, x + rng.random_range(5.0..30.0), y + rng.random_range(5.0..30.0)]
}

fn random_frames(rng: &mut ChaCha8Rng, near: Option<&Frames>) -> Frames {
    match near {
        Some(b) if rng.random_bool(0.7) => {
            let lo = rng.random_range(0..3).min(b.len() - 1);
            let hi = b.len() - rng.random_range(0..3).min(b.len() - lo - 1);
            b[lo..hi]
                .iter()
                .map(|&(f, r)| {
                    let dx = rng.random_range(-4.0..4.0);
                    (f, [r[0] + dx, r[1], r[2] + dx, r[3]])
                })
                .collect()
        }
        _ => {
            let start = rng.random_range(0..8);
            let r = random_box(rng);
            (start..start + rng.random_range(1..10)).map(|f| (f, r)).collect()
        }
    }
}

/// A random instance with at most 3 videos, 2 classes and 5 tubes per
/// class, detections perturbed from ground truth most of the time. Scores
/// are distinct.
pub fn random_eval_instance(seed: u64) -> (Vec<OracleDet>, Vec<OracleGt>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let videos = rng.random_range(1..=3);
    let mut gts = Vec::new();
    for class in 0..2 {
        for _ in 0..rng.random_range(0..=3) {
            let video = format!("v{}", rng.random_range(0..videos));
            gts.push(OracleGt {
                video,
                class,
                frames: random_frames(&mut rng, None),
            });
        }
    }
    let mut pool: Vec<f64> = (1..=20).map(|k| k as f64 / 20.0).collect();
    let mut dets = Vec::new();
    for class in 0..2 {
        for _ in 0..rng.random_range(0..=5) {
            let near = gts.iter().filter(|g| g.class == class).nth(rng.random_range(0..4)).cloned();
            let (video, frames) = match near {
                Some(g) => (g.video.clone(), random_frames(&mut rng, Some(&g.frames))),
                None => (format!("v{}", rng.random_range(0..videos)), random_frames(&mut rng, None)),
            };
            let score = pool.remove(rng.random_range(0..pool.len()));
            dets.push(OracleDet { video, class, score, frames });
        }
    }
    (dets, gts)
}

/// Every tube box as its own one-frame detection, keyed by `video#frame`
/// so the tube oracle scores it as a box.
pub fn as_frame_level(dets: &[OracleDet], gts: &[OracleGt]) -> (Vec<OracleDet>, Vec<OracleGt>) {
    let d = dets
        .iter()
        .flat_map(|t| {
            t.frames.iter().map(move |&(f, r)| OracleDet {
                video: format!("{}#{f}", t.video),
                class: t.class,
                score: t.score * (1.0 - 1e-3 * f as f64),
                frames: vec![(0, r)],
            })
        })
        .collect();
    let g = gts
        .iter()
        .flat_map(|t| {
            t.frames.iter().map(move |&(f, r)| OracleGt {
                video: format!("{}#{f}", t.video),
                class: t.class,
                frames: vec![(0, r)],
            })
        })
        .collect();
    (d, g)
}

pub fn two_classes() -> Vec<EvalClass> {
    vec![
        EvalClass {
            name: "a".into(),
            novel: false,
        },
        EvalClass {
            name: "b".into(),
            novel: true,
        },
    ]
}

// ---------------------------------------------------------------- models

/// A small head on the toy backend; fast enough for exact comparisons.
pub fn tiny_config() -> RunConfig {
    let synth = SynthConfig::default();
    let mut cfg = RunConfig::default();
    cfg.backend.patch_size = 8;
    cfg.backend.dim = 16;
    cfg.backend.grounding = synth.grounding();
    cfg.data.clip_len = 4;
    cfg.model = HeadConfig {
        num_queries: 4,
        num_stages: 2,
        d_q: 8,
        heads: 2,
        qv_points: 4,
        qv_out_points: 4,
        qv_out_channels: 4,
        pyramid_channels: 4,
        ..HeadConfig::default()
    };
    cfg
}

pub fn synthetic(seed: u64) -> SyntheticDataset {
    generate_synthetic(&SynthConfig::default(), seed).expect("synthetic set")
}

/// Outcome of one training run on the synthetic set.
pub struct Run {
    pub model: OpenMixer,
    pub seconds: f64,
    pub final_loss: f64,
}

/// Trains `cfg` on the training videos of `data`.
pub fn train(cfg: RunConfig, data: &Dataset) -> Run {
    let start = std::time::Instant::now();
    let model = OpenMixer::new(cfg).expect("model");
    let set = TrainingSet::build(&model, data).expect("training set");
    let mut trainer = Trainer::new(model);
    let mut final_loss = f64::NAN;
    trainer
        .fit(&set, |_, records| {
            final_loss = records.iter().map(|r| r.loss).sum::<f64>() / records.len() as f64;
            Ok(())
        })
        .expect("training");
    Run {
        model: trainer.model,
        seconds: start.elapsed().as_secs_f64(),
        final_loss,
    }
}

pub fn protocol(mode: openmixer::ProtocolMode) -> EvalProtocol {
    EvalProtocol {
        mode,
        ..EvalProtocol::default()
    }
}

/// Permutes the rows of a `[N, ...]` tensor: row `i` of the result is row
/// `perm[i]` of `t`.
pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let data = perm.iter().flat_map(|&i| t.row(i).to_vec()).collect();
    Tensor::new(t.shape().to_vec(), data)
}

/// Columns of a `[N, C]` tensor gathered by `perm`.
pub fn permute_cols(t: &Tensor, perm: &[usize]) -> Tensor {
    let (n, c) = (t.shape()[0], t.shape()[1]);
    let mut data = Vec::with_capacity(n * c);
    for r in 0..n {
        let row = t.row(r);
        data.extend(perm.iter().map(|&j| row[j]));
    }
    Tensor::new([n, c], data)
}

pub fn metrics_map(m: &openmixer::Metrics) -> BTreeMap<&'static str, Option<f64>> {
    BTreeMap::from([
        ("video.mean", m.video.mean),
        ("video.base", m.video.base),
        ("video.novel", m.video.novel),
        ("frame.mean", m.frame.mean),
    ])
}
