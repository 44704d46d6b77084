//! Acceptance gate: one PASS/FAIL line per criterion.
//!
//! `cargo test -p openmixer-core --test acceptance` runs all ten; pass
//! criterion ids (`-- C1 C4`) to run a subset. The three training criteria
//! share their runs, so C8 and C9 are cheaper when C7 runs too.

mod support;

use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use openmixer::autograd::Graph;
use openmixer::backend::{build_pyramid, interpolate_positional_embeddings, PeTarget};
use openmixer::criterion::{
    action_loss, giou, giou_distance, match_hungarian, set_loss, total_loss, CostWeights, LossWeights, MatchResult, Targets,
};
use openmixer::data::{SynthConfig, TEST_TAG, TRAIN_TAG};
use openmixer::dfa::{self, align_scores, dynamic_fuse, zero_shot_logits, FusionMode, Lambda};
use openmixer::eval::{frame_map, video_map, Detection, DetectionTube, GtBox, GtTube, TubeBox};
use openmixer::head::{init_head, qq_mix, qv_mix, ConditionMode, HeadConfig, QueryState, StageOutput, PYRAMID};
use openmixer::model::class_entries;
use openmixer::nn::{l2_normalize, l2_normalize_last, normal_init, ParamStore, Scope};
use openmixer::prior::{reverse_attention, BoxSet, PriorSource};
use openmixer::train::evaluate_model;
use openmixer::{CenterBox, Checkpoint, Dataset, OpenMixer, PriorContext, ProtocolMode, Rect, RunConfig, Tensor};

use support::*;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------------ C1

fn c1_evaluator_oracle() -> Outcome {
    let start = Instant::now();
    let classes = two_classes();
    let p = protocol(ProtocolMode::Generalized);
    let (mut worst_video, mut worst_frame) = (0.0f64, 0.0f64);
    let diff = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => (a - b).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    };
    for seed in 0..200 {
        let (dets, gts) = random_eval_instance(seed);
        let tubes: Vec<DetectionTube> = dets
            .iter()
            .map(|d| DetectionTube {
                video_id: d.video.clone(),
                class: d.class,
                frames: d
                    .frames
                    .iter()
                    .map(|&(frame, r)| TubeBox {
                        frame,
                        rect: Rect::new(r[0], r[1], r[2], r[3]),
                        score: d.score,
                    })
                    .collect(),
                tube_score: d.score,
            })
            .collect();
        let gt_tubes: Vec<GtTube> = gts
            .iter()
            .map(|g| GtTube {
                video_id: g.video.clone(),
                class: g.class,
                boxes: g.frames.iter().map(|&(f, r)| (f, Rect::new(r[0], r[1], r[2], r[3]))).collect(),
            })
            .collect();
        let got = video_map(&tubes, &gt_tubes, &classes, &p).map_err(|e| e.to_string())?.mean;
        worst_video = worst_video.max(diff(got, oracle_map(&dets, &gts, 2, p.iou_threshold)));

        let (fd, fg) = as_frame_level(&dets, &gts);
        let boxes: Vec<Detection> = dets
            .iter()
            .flat_map(|d| {
                d.frames.iter().map(move |&(frame, r)| Detection {
                    video_id: d.video.clone(),
                    frame,
                    class: d.class,
                    score: d.score * (1.0 - 1e-3 * frame as f64),
                    rect: Rect::new(r[0], r[1], r[2], r[3]),
                })
            })
            .collect();
        let gt_boxes: Vec<GtBox> = gts
            .iter()
            .flat_map(|g| {
                g.frames.iter().map(move |&(frame, r)| GtBox {
                    video_id: g.video.clone(),
                    frame,
                    class: g.class,
                    rect: Rect::new(r[0], r[1], r[2], r[3]),
                })
            })
            .collect();
        let got = frame_map(&boxes, &gt_boxes, &classes, &p).map_err(|e| e.to_string())?.mean;
        worst_frame = worst_frame.max(diff(got, oracle_map(&fd, &fg, 2, p.frame_iou_threshold)));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_video <= 1e-6 && worst_frame <= 1e-6 && secs < 60.0,
        format!("200 instances, max |video-oracle| {worst_video:.1e}, max |frame-oracle| {worst_frame:.1e}, {secs:.1}s"),
    )
}

// ------------------------------------------------------------------ C2

fn c2_hungarian() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0;
    for trial in 0..1000 {
        let n = rng.random_range(1..=7);
        let g = rng.random_range(0..=n);
        // Every third matrix has small integer costs, so ties are common.
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..g)
                    .map(|_| if trial % 3 == 0 { rng.random_range(0..4) as f64 } else { rng.random_range(0.0..10.0) })
                    .collect()
            })
            .collect();
        let m = match_hungarian(&cost, g).map_err(|e| e.to_string())?;
        let mut queries: Vec<usize> = m.assignment.iter().map(|p| p.0).collect();
        let mut targets: Vec<usize> = m.assignment.iter().map(|p| p.1).collect();
        queries.dedup();
        targets.sort_unstable();
        let valid = queries.len() == g && targets == (0..g).collect::<Vec<_>>() && m.unmatched_queries.len() == n - g;
        if !valid || m.total_cost(&cost) != brute_force_assignment(&cost, g) {
            bad += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(bad == 0 && secs < 60.0, format!("1000 matrices with N <= 7, {bad} differ from exhaustive search, {secs:.1}s"))
}

// ------------------------------------------------------------------ C3

fn c3_giou() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rect = |rng: &mut ChaCha8Rng| {
        let (x, y) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        Rect::new(x, y, x + rng.random_range(0.01..1.0), y + rng.random_range(0.01..1.0))
    };
    let mut failures = Vec::new();
    for _ in 0..2000 {
        let (a, b) = (rect(&mut rng), rect(&mut rng));
        let d = giou_distance(&a, &b).unwrap();
        if d != giou_distance(&b, &a).unwrap() {
            failures.push("asymmetric");
        }
        if !(0.0..=2.0).contains(&d) {
            failures.push("out of [0, 2]");
        }
        if giou_distance(&a, &a).unwrap() != 0.0 || (a != b && d <= 0.0) {
            failures.push("zero iff identical");
        }
        // A box inside another: the hull is the union, so GIoU is IoU.
        let inner = Rect::new(a.x1 + 0.25 * a.width(), a.y1 + 0.25 * a.height(), a.x2 - 0.25 * a.width(), a.y2);
        if (giou_distance(&a, &inner).unwrap() - (1.0 - a.iou(&inner))).abs() > 1e-12 {
            failures.push("containment");
        }
    }
    let corner = giou_distance(&Rect::new(0.0, 0.0, 1.0, 1.0), &Rect::new(1.0, 1.0, 2.0, 2.0)).unwrap();
    let nested = giou_distance(&Rect::new(0.0, 0.0, 2.0, 2.0), &Rect::new(0.0, 0.0, 1.0, 1.0)).unwrap();
    if (corner - 1.5).abs() > 1e-9 || (nested - 0.75).abs() > 1e-9 {
        failures.push("worked cases");
    }
    failures.dedup();
    check(
        failures.is_empty() && giou(&Rect::new(0.0, 0.0, 1.0, 1.0), &Rect::new(0.0, 0.0, 1.0, 1.0)) == 1.0,
        format!("2000 random pairs, touching corners {corner}, nested {nested}{}", if failures.is_empty() { String::new() } else { format!(", failed: {failures:?}") }),
    )
}

// ------------------------------------------------------------------ C4

fn tiny_head() -> (HeadConfig, ParamStore) {
    let cfg = HeadConfig {
        num_queries: 3,
        num_stages: 1,
        d_q: 4,
        heads: 2,
        qv_points: 2,
        qv_out_points: 2,
        qv_out_channels: 2,
        pyramid_channels: 2,
        ..HeadConfig::default()
    };
    let mut store = ParamStore::new();
    init_head(&mut store, &mut ChaCha8Rng::seed_from_u64(40), &cfg, 3);
    (cfg, store)
}

fn tiny_boxes() -> Tensor {
    Tensor::new([3, 4], vec![0.41, 0.52, 0.33, 0.44, 0.63, 0.47, 0.21, 0.29, 0.36, 0.58, 0.27, 0.23])
}

fn c4_gradients() -> Outcome {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (cfg, store) = tiny_head();
    let store: &'static ParamStore = Box::leak(Box::new(store));
    let feats = normal_init(&mut rng, &[2, 4, 4, 3], 1.0);
    let q = normal_init(&mut rng, &[3, 4], 1.0);
    let w = normal_init(&mut rng, &[3, 4], 1.0);
    let mut errors: Vec<(&str, f64)> = Vec::new();

    let (wq, cq) = (w.clone(), cfg.clone());
    errors.push((
        "qq_mix",
        input_rel_error(
            &[q.clone(), tiny_boxes()],
            move |g, v| {
                let s = Scope::new(g, store, false);
                qq_mix(&s, "stage0.spatial.qq", cq.heads, v[0], v[1]).mul(g.constant(wq.clone())).sum_all()
            },
            H,
            FLOOR,
        )
        .max(param_rel_error(
            store,
            &["stage0.spatial.qq."],
            |s| {
                let g = s.graph();
                qq_mix(s, "stage0.spatial.qq", cfg.heads, g.constant(q.clone()), g.constant(tiny_boxes()))
                    .mul(g.constant(w.clone()))
                    .sum_all()
            },
            H,
            FLOOR,
        )),
    ));

    let (wq, cq, fq) = (w.clone(), cfg.clone(), feats.clone());
    errors.push((
        "qv_mix",
        input_rel_error(
            &[q.clone(), tiny_boxes()],
            move |g, v| {
                let s = Scope::new(g, store, false);
                let pyr = build_pyramid(&s, PYRAMID, &fq);
                qv_mix(&s, "stage0.temporal.qv", &cq, v[0], &pyr, v[1], 1).mul(g.constant(wq.clone())).sum_all()
            },
            H,
            FLOOR,
        )
        .max(param_rel_error(
            store,
            &["stage0.temporal.qv.", "pyramid."],
            |s| {
                let g = s.graph();
                let pyr = build_pyramid(s, PYRAMID, &feats);
                qv_mix(s, "stage0.temporal.qv", &cfg, g.constant(q.clone()), &pyr, g.constant(tiny_boxes()), 1)
                    .mul(g.constant(w.clone()))
                    .sum_all()
            },
            H,
            FLOOR,
        )),
    ));

    let proj = normal_init(&mut rng, &[4, 5], 0.5);
    let raw = normal_init(&mut rng, &[3], 1.0);
    let fv = l2_normalize(normal_init(&mut rng, &[5], 1.0).data());
    let wf = normal_init(&mut rng, &[3, 5], 1.0);
    let fv2 = fv.clone();
    errors.push((
        "dynamic_fuse",
        input_rel_error(
            &[q.clone(), proj.clone(), raw.clone()],
            move |g, v| dynamic_fuse(v[0], &fv2, Lambda::Raw(v[2]), v[1]).mul(g.constant(wf.clone())).sum_all(),
            H,
            FLOOR,
        ),
    ));

    let fused = normal_init(&mut rng, &[3, 5], 1.0);
    let text = normal_init(&mut rng, &[2, 5], 1.0);
    let wa = normal_init(&mut rng, &[3, 2], 1.0);
    errors.push((
        "align_scores",
        input_rel_error(
            &[fused, text.clone()],
            move |g, v| {
                let (probs, logits) = align_scores(l2_normalize_last(v[0]), l2_normalize_last(v[1]), 0.5).unwrap();
                probs.mul(g.constant(wa.clone())).sum_all().add(logits.square().sum_all().scale(0.01))
            },
            H,
            FLOOR,
        ),
    ));

    let targets = Targets {
        boxes: vec![CenterBox::new(0.6, 0.5, 0.25, 0.31), CenterBox::new(0.37, 0.61, 0.22, 0.27)],
        classes: vec![1, 0],
    };
    let m = MatchResult {
        assignment: vec![(1, 0), (2, 1)],
        unmatched_queries: vec![0],
    };
    let scores = Tensor::vector(vec![0.3, 0.8, 0.55]);
    let logits = Tensor::new([3, 2], vec![0.2, -0.4, 1.1, 0.3, -0.7, 0.5]);
    let (tb, mq) = (targets.boxes.clone(), m.clone());
    errors.push((
        "set_loss",
        input_rel_error(
            &[tiny_boxes(), scores.clone()],
            move |_, v| {
                let s = set_loss(v[0], v[1], &tb, &mq);
                s.bce.add(s.l1).add(s.giou)
            },
            H,
            FLOOR,
        ),
    ));
    let (tc, mq) = (targets.classes.clone(), m.clone());
    errors.push((
        "action_loss",
        input_rel_error(&[logits.clone()], move |_, v| action_loss(v[0], &mq, &tc).unwrap(), H, FLOOR),
    ));

    let boxes2 = Tensor::new([3, 4], vec![0.58, 0.49, 0.27, 0.3, 0.35, 0.59, 0.2, 0.25, 0.5, 0.5, 0.4, 0.4]);
    let scores2 = Tensor::vector(vec![0.7, 0.6, 0.2]);
    let logits2 = Tensor::new([3, 2], vec![-0.3, 0.8, 0.5, 0.1, 0.0, 0.9]);
    errors.push((
        "total_loss",
        input_rel_error(
            &[tiny_boxes(), scores, logits, boxes2, scores2, logits2],
            move |_, v| {
                let stage = |m: usize, b, s, l| StageOutput {
                    stage: m,
                    spatial_queries: v[0],
                    temporal_queries: v[0],
                    boxes: b,
                    scores: s,
                    logits: l,
                };
                let stages = [stage(0, v[0], v[1], v[2]), stage(1, v[3], v[4], v[5])];
                total_loss(&stages, &targets, &LossWeights::default(), &CostWeights::default()).unwrap().0
            },
            H,
            FLOOR,
        ),
    ));

    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let listed: Vec<String> = errors.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    check(worst < 1e-4, format!("max relative error {worst:.1e} ({})", listed.join(", ")))
}

// ------------------------------------------------------------------ shared model fixtures

fn tiny_model(edit: impl FnOnce(&mut RunConfig)) -> OpenMixer {
    let mut cfg = tiny_config();
    edit(&mut cfg);
    OpenMixer::new(cfg).expect("model")
}

/// A bundle for frame 5 of the first synthetic video under `order`.
fn bundle_for(model: &OpenMixer, order: &[&str]) -> openmixer::backend::FeatureBundle {
    let ds = synthetic(0);
    let names: Vec<String> = order.iter().map(|s| s.to_string()).collect();
    let vocab = model.vocabulary(class_entries(&names, Some(&ds.split()), None, "{CLS}")).expect("vocabulary");
    let clip = ds.videos[0].clip(5, model.config.data.clip_len, 1, 25.0).expect("clip");
    model.encode(&clip, &vocab).expect("encode")
}

fn fixed_init(n: usize) -> BoxSet {
    BoxSet {
        boxes: (0..n).map(|i| CenterBox::new(0.2 + 0.6 * i as f64 / n as f64, 0.3 + 0.1 * (i % 3) as f64, 1.0, 1.0)).collect(),
        person_scores: vec![0.5; n],
        stage: 0,
    }
}

fn run_stages(model: &OpenMixer, bundle: &openmixer::backend::FeatureBundle, init: &BoxSet) -> Vec<QueryState> {
    let g = Graph::new();
    let scope = Scope::new(&g, &model.params, false);
    let prematched = bundle.text_features.row(0).to_vec();
    let stages = model.forward(&scope, bundle, init, &prematched).expect("forward");
    stages.iter().map(QueryState::from).collect()
}

// ------------------------------------------------------------------ C5

fn c5_degenerate_modes() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    // λ = 1: every query reproduces the video-level zero-shot logits.
    for (label, edit) in [
        ("fixed:1", Box::new(|c: &mut RunConfig| c.fusion = FusionMode::Fixed(1.0)) as Box<dyn Fn(&mut RunConfig)>),
        ("zsr_tl", Box::new(|c: &mut RunConfig| c.training_mode = openmixer::TrainingMode::ZsrTl)),
    ] {
        let model = tiny_model(edit);
        let bundle = bundle_for(&model, &["walk", "climb", "jump"]);
        let zs = zero_shot_logits(&bundle.video_feature, &bundle.text_features, bundle.temperature).unwrap();
        let states = run_stages(&model, &bundle, &fixed_init(4));
        let same = states.iter().all(|s| (0..4).all(|r| s.action_logits.row(r) == zs.row(0)));
        ok &= same;
        notes.push(format!("{label} logits == zero-shot: {same}"));
    }

    // f_v = 0 makes pre-video conditioning a no-op.
    let pre = tiny_model(|c| c.model.condition_mode = ConditionMode::PreVideo);
    let none = tiny_model(|c| c.model.condition_mode = ConditionMode::None);
    let mut bundle = bundle_for(&pre, &["walk", "climb", "jump"]);
    bundle.video_feature = vec![0.0; bundle.video_feature.len()];
    let same = run_stages(&pre, &bundle, &fixed_init(4)) == run_stages(&none, &bundle, &fixed_init(4));
    ok &= same;
    notes.push(format!("zero f_v pre_video == none: {same}"));

    // The alignment head reads only the temporal queries: re-running it on
    // a perturbed-Q_s forward's temporal queries with the original
    // parameters gives that forward's logits, and with λ = 1 the logits do
    // not move at all.
    let model = tiny_model(|_| {});
    let bundle = bundle_for(&model, &["walk", "climb", "jump"]);
    let mut perturbed = OpenMixer::from_parts(model.config.clone(), model.params.clone()).unwrap();
    let qs = perturbed.params.get_mut("queries.spatial").unwrap();
    for (i, v) in qs.data_mut().iter_mut().enumerate() {
        *v += 0.3 * ((i as f64) * 0.7).sin();
    }
    let moved = run_stages(&perturbed, &bundle, &fixed_init(4));
    let g = Graph::new();
    let scope = Scope::new(&g, &model.params, false);
    let text = g.constant(bundle.text_features.clone());
    let mut same = true;
    for (m, state) in moved.iter().enumerate() {
        let q_t = g.constant(state.temporal_queries.clone());
        let logits = dfa::classify(&scope, m, q_t, &bundle.video_feature, text, bundle.temperature, FusionMode::Dynamic).unwrap();
        same &= *logits.value() == state.action_logits;
    }
    let boxes_moved = moved.last().unwrap().boxes != run_stages(&model, &bundle, &fixed_init(4)).last().unwrap().boxes;
    let mut fixed = model;
    fixed.config.fusion = FusionMode::Fixed(1.0);
    perturbed.config.fusion = FusionMode::Fixed(1.0);
    let a = run_stages(&fixed, &bundle, &fixed_init(4));
    let b = run_stages(&perturbed, &bundle, &fixed_init(4));
    let logits_fixed = a.iter().zip(&b).all(|(x, y)| x.action_logits == y.action_logits);
    same &= logits_fixed && boxes_moved;
    ok &= same;
    notes.push(format!("alignment invariant to Q_s: {same}"));

    check(ok, notes.join(", "))
}

// ------------------------------------------------------------------ C6

fn c6_invariances() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;

    // Vocabulary permutation, through the prior and the whole cascade.
    let model = tiny_model(|_| {});
    let ds = synthetic(0);
    let order = ["walk", "climb", "jump"];
    let shuffled = ["jump", "walk", "climb"];
    let perm = [2, 0, 1]; // shuffled[k] = order[perm[k]]
    let clip = ds.videos[3].clip(6, model.config.data.clip_len, 1, 25.0).unwrap();
    let vocab = |names: &[&str]| {
        let names: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        model.vocabulary(class_entries(&names, Some(&ds.split()), None, "{CLS}")).unwrap()
    };
    let a = model.predict(&model.encode(&clip, &vocab(&order)).unwrap(), "v", 6, &PriorContext::default()).unwrap();
    let b = model.predict(&model.encode(&clip, &vocab(&shuffled)).unwrap(), "v", 6, &PriorContext::default()).unwrap();
    let same = a.stages.iter().zip(&b.stages).all(|(x, y)| {
        x.boxes == y.boxes && permute_cols(&x.action_logits, &perm) == y.action_logits
    });
    ok &= same;
    notes.push(format!("vocabulary permutation: {same}"));

    // Query permutation: queries, per-query λ and initial boxes together.
    let bundle = bundle_for(&model, &order);
    let qperm = [3, 1, 0, 2];
    let mut permuted = OpenMixer::from_parts(model.config.clone(), model.params.clone()).unwrap();
    let mut names = vec!["queries.spatial".to_string(), "queries.temporal".to_string()];
    names.extend((0..model.config.model.num_stages).map(dfa::lambda_name));
    for name in &names {
        let t = permuted.params.get_mut(name).unwrap();
        *t = permute_rows(t, &qperm);
    }
    let init = fixed_init(4);
    let pinit = BoxSet {
        boxes: qperm.iter().map(|&i| init.boxes[i]).collect(),
        person_scores: qperm.iter().map(|&i| init.person_scores[i]).collect(),
        stage: 0,
    };
    let base = run_stages(&model, &bundle, &init);
    let moved = run_stages(&permuted, &bundle, &pinit);
    let same = base.iter().zip(&moved).all(|(x, y)| {
        permute_rows(&x.spatial_queries, &qperm) == y.spatial_queries
            && permute_rows(&x.temporal_queries, &qperm) == y.temporal_queries
            && permute_rows(&x.action_logits, &qperm) == y.action_logits
            && permute_rows(&x.boxes.to_tensor(), &qperm) == y.boxes.to_tensor()
            && qperm.iter().map(|&i| x.boxes.person_scores[i]).collect::<Vec<_>>() == y.boxes.person_scores
    });
    ok &= same;
    notes.push(format!("query permutation: {same}"));

    // Reversal is exact wherever 1 - x is representable; every k / 2^20 in
    // [-1, 1] is.
    let grid = Tensor::vector((-(1 << 20)..=(1 << 20)).step_by(97).map(|k| k as f64 / (1 << 20) as f64).collect());
    let same = reverse_attention(&reverse_attention(&grid)) == grid;
    ok &= same;
    notes.push(format!("reverse_attention involution: {same}"));

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pe = normal_init(&mut rng, &[16, 5], 1.0);
    let same_t = interpolate_positional_embeddings(&pe, PeTarget::Temporal(16)).unwrap() == pe;
    let same_s = interpolate_positional_embeddings(&pe, PeTarget::Spatial { h: 4, w: 4 }).unwrap() == pe;
    let stretched = interpolate_positional_embeddings(&pe, PeTarget::Temporal(23)).unwrap();
    let ends = stretched.row(0) == pe.row(0) && stretched.row(22) == pe.row(15);
    let same = same_t && same_s && ends;
    ok &= same;
    notes.push(format!("PE interpolation identity: {same}"));

    check(ok, notes.join(", "))
}

// ------------------------------------------------------------------ C7-C9

/// Training runs shared by the synthetic criteria.
struct Runs {
    data: Dataset,
    attention: Option<Run>,
}

impl Runs {
    fn new() -> Self {
        Runs {
            data: Dataset::from_synthetic(&synthetic(0)),
            attention: None,
        }
    }

    fn config() -> RunConfig {
        RunConfig::synthetic(&SynthConfig::default())
    }

    /// The preset run (dynamic fusion, attention priors), trained once.
    fn attention(&mut self) -> &Run {
        let data = &self.data;
        self.attention.get_or_insert_with(|| train(Self::config(), data))
    }
}

fn score(model: &OpenMixer, data: &Dataset, mode: ProtocolMode, tag: &str) -> Result<openmixer::Metrics, String> {
    evaluate_model(model, data, &protocol(mode), tag).map(|r| r.0).map_err(|e| e.to_string())
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{:.3}", x))
}

const BUDGET_SECS: f64 = 600.0;

fn c7_overfit(runs: &mut Runs) -> Outcome {
    runs.attention();
    let run = runs.attention.as_ref().unwrap();
    let m = score(&run.model, &runs.data, ProtocolMode::BaseOnly, TRAIN_TAG)?;
    let v = m.video.mean.unwrap_or(0.0);
    check(
        v >= 0.9 && run.seconds <= BUDGET_SECS,
        format!(
            "training video-mAP@0.5 {v:.3} (frame {}), final loss {:.3}, trained in {:.0}s",
            pct(m.frame.mean),
            run.final_loss,
            run.seconds
        ),
    )
}

fn c8_generalization(runs: &mut Runs) -> Outcome {
    runs.attention();
    let (run, data) = (runs.attention.as_ref().unwrap(), &runs.data);
    let dynamic = score(&run.model, data, ProtocolMode::Generalized, TEST_TAG)?;
    let mut cfg = Runs::config();
    cfg.fusion = FusionMode::Fixed(0.0);
    let ablation = train(cfg, data);
    let without = score(&ablation.model, data, ProtocolMode::Generalized, TEST_TAG)?;
    let (n, n0) = (dynamic.video.novel.unwrap_or(0.0), without.video.novel.unwrap_or(0.0));
    check(
        n >= 0.8 && n0 < n && run.seconds <= BUDGET_SECS && ablation.seconds <= BUDGET_SECS,
        format!(
            "novel video-mAP@0.5 dynamic {n:.3} vs lambda=0 {n0:.3} (base {} vs {}), {} held-out novel clips, ablation trained in {:.0}s",
            pct(dynamic.video.base),
            pct(without.video.base),
            data.eval_records(TEST_TAG, ProtocolMode::NovelOnly).len(),
            ablation.seconds
        ),
    )
}

/// Mean video AP over all classes, base classes scored on base-only clips and
/// novel classes on novel-only clips.
fn separate_mean(model: &OpenMixer, data: &Dataset) -> Result<f64, String> {
    let mut aps = Vec::new();
    for mode in [ProtocolMode::BaseOnly, ProtocolMode::NovelOnly] {
        let m = score(model, data, mode, TEST_TAG)?;
        aps.extend(m.video.per_class.iter().filter_map(|c| c.ap));
    }
    Ok(aps.iter().sum::<f64>() / aps.len().max(1) as f64)
}

fn c9_prior_ordering(runs: &mut Runs) -> Outcome {
    runs.attention();
    let (run, data) = (runs.attention.as_ref().unwrap(), &runs.data);
    let attention = separate_mean(&run.model, data)?;
    let mut results = Vec::new();
    for source in [PriorSource::GroundTruth, PriorSource::Random] {
        let mut cfg = Runs::config();
        cfg.prior.source = source;
        let run = train(cfg, data);
        results.push(separate_mean(&run.model, data)?);
    }
    let (gt, random) = (results[0], results[1]);
    check(
        gt >= attention && attention >= random && gt - random >= 0.1,
        format!("held-out video-mAP@0.5 gt {gt:.3} >= attention {attention:.3} >= random {random:.3}, gap {:.3}", gt - random),
    )
}

// ------------------------------------------------------------------ C10

fn c10_determinism() -> Outcome {
    let data = Dataset::from_synthetic(&synthetic(1));
    let mut cfg = RunConfig::synthetic(&SynthConfig::default());
    cfg.optim.epochs = 2;
    cfg.deterministic = true;
    cfg.seed = 10;
    let a = train(cfg.clone(), &data);
    let b = train(cfg, &data);
    let ma = score(&a.model, &data, ProtocolMode::Generalized, TEST_TAG)?;
    let mb = score(&b.model, &data, ProtocolMode::Generalized, TEST_TAG)?;
    let same_metrics = ma == mb && a.final_loss.to_bits() == b.final_loss.to_bits();
    let same_params = a.model.params == b.model.params;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("checkpoint.json");
    let ckpt = Checkpoint {
        schema_version: openmixer::train::CHECKPOINT_VERSION,
        epoch: 2,
        config: a.model.config.clone(),
        params: a.model.params.clone(),
        optimizer: Default::default(),
    };
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let restored = Checkpoint::load(&path).and_then(Checkpoint::into_model).map_err(|e| e.to_string())?;
    let bundle = bundle_for(&a.model, &["walk", "climb", "jump"]);
    let before = a.model.predict(&bundle, "pinned", 5, &PriorContext::default()).map_err(|e| e.to_string())?;
    let after = restored.predict(&bundle, "pinned", 5, &PriorContext::default()).map_err(|e| e.to_string())?;
    let bits = |p: &openmixer::model::Prediction| -> Vec<u64> {
        p.stages
            .iter()
            .flat_map(|s| {
                s.action_logits
                    .data()
                    .iter()
                    .chain(s.boxes.to_tensor().data())
                    .chain(&s.boxes.person_scores)
                    .map(|x| x.to_bits())
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let same_forward = bits(&before) == bits(&after) && restored.params == a.model.params;
    check(
        same_metrics && same_params && same_forward,
        format!(
            "repeat run metrics identical: {same_metrics}, parameters identical: {same_params}, checkpoint forward bit-identical: {same_forward} (video-mAP {})",
            pct(ma.video.mean)
        ),
    )
}

// ------------------------------------------------------------------ driver

fn main() {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('C')).collect();
    let runs = std::cell::RefCell::new(Runs::new());
    let criteria: Vec<(&str, &str, Box<dyn Fn() -> Outcome>)> = vec![
        ("C1", "evaluator matches brute-force oracle", Box::new(c1_evaluator_oracle)),
        ("C2", "Hungarian matching is optimal", Box::new(c2_hungarian)),
        ("C3", "GIoU algebra", Box::new(c3_giou)),
        ("C4", "gradient checks", Box::new(c4_gradients)),
        ("C5", "degenerate-mode semantics", Box::new(c5_degenerate_modes)),
        ("C6", "invariance suite", Box::new(c6_invariances)),
        ("C7", "synthetic overfit", Box::new(|| c7_overfit(&mut runs.borrow_mut()))),
        ("C8", "open-vocabulary generalization", Box::new(|| c8_generalization(&mut runs.borrow_mut()))),
        ("C9", "prior-source ordering", Box::new(|| c9_prior_ordering(&mut runs.borrow_mut()))),
        ("C10", "determinism and persistence", Box::new(c10_determinism)),
    ];
    let mut failed = 0;
    for (id, name, f) in &criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id:<4} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("{id:<4} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
