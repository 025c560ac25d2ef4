//! One test per acceptance criterion. Each prints a single `PASS`/`FAIL`
//! line straight to stdout so the verdicts show even when output is captured.

mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use common::{masked_dense_attention, max_relative_error, random_map, random_tensor};
use rad_core::correspondence::{TokenGrid, TokenMatchMap};
use rad_core::geometry::{backproject, make_context_3d, render, sample_pose, CameraIntrinsics, Pose, PoseBounds, RenderConfig};
use rad_core::harness::bench::{Protocol, Variant};
use rad_core::harness::experiment::{run_synthetic_experiment, ExperimentConfig};
use rad_core::image::ImageBuffer;
use rad_core::metrics::depth_metrics;
use rad_core::nn::{grad_check, matched_cross_attention, silog_loss, ParamGroup, Tensor};
use rad_core::retrieval::{build_index, ContextSample, Descriptor, PoolItem, Provenance};
use rad_core::segment::SegmentMap;
use rad_core::uncertainty::{keep_segments, uncertainty_map, NoiseConfig, UncertaintyMap};
use rad_core::{DepthMap, SeededRng};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn verdict(name: &str, failures: &[String], detail: &str) {
    let line = if failures.is_empty() {
        format!("PASS {name}: {detail}")
    } else {
        format!("FAIL {name}: {detail}; {}", failures.join("; "))
    };
    let _ = writeln!(std::io::stdout().lock(), "{line}");
    assert!(failures.is_empty(), "{line}");
}

fn refs(ctx: &[(Tensor, Tensor)]) -> Vec<(&Tensor, &Tensor)> {
    ctx.iter().map(|(k, v)| (k, v)).collect()
}

#[test]
fn masked_concat_oracle() {
    let start = Instant::now();
    let mut rng = SeededRng::new(1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(1..=16);
        let nc = rng.gen_range(0..=2);
        let ct = rng.gen_range(1..=16);
        let heads = [1, 2, 4][rng.gen_range(0..3)];
        let d = heads * rng.gen_range(1..=4);
        let (q, k, v) = (random_tensor(n, d, &mut rng), random_tensor(n, d, &mut rng), random_tensor(n, d, &mut rng));
        let ctx: Vec<_> = (0..nc).map(|_| (random_tensor(ct, d, &mut rng), random_tensor(ct, d, &mut rng))).collect();
        let density = rng.gen_range(0.0..1.0);
        let map = random_map(n, ct, nc, density, &mut rng);
        let got = matched_cross_attention(&q, &k, &v, &refs(&ctx), &map, heads).unwrap();
        worst = worst.max(max_relative_error(&got, &masked_dense_attention(&q, &k, &v, &ctx, &map, heads)));
    }
    let secs = start.elapsed().as_secs_f64();
    let mut fails = Vec::new();
    if !(worst < 1e-5) {
        fails.push(format!("relative error {worst:.3e} >= 1e-5"));
    }
    if secs >= 10.0 {
        fails.push(format!("took {secs:.1} s"));
    }
    verdict("masked-concat oracle", &fails, &format!("200 instances, max rel err {worst:.2e}, {secs:.2} s"));
}

/// Plain multi-head softmax self-attention.
fn self_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Tensor {
    let (n, d) = (q.rows, q.cols);
    let dh = d / heads;
    let mut out = Tensor::zeros(n, d);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for j in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|i| q.row(j)[cols.clone()].iter().zip(&k.row(i)[cols.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let s: f64 = w.iter().sum();
            for (i, wi) in w.iter().enumerate() {
                for c in cols.clone() {
                    out.data[j * d + c] += wi / s * v.row(i)[c];
                }
            }
        }
    }
    out
}

#[test]
fn self_attention_reduction() {
    let mut rng = SeededRng::new(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=16);
        let nc = rng.gen_range(0..=2);
        let d = 8;
        let (q, k, v) = (random_tensor(n, d, &mut rng), random_tensor(n, d, &mut rng), random_tensor(n, d, &mut rng));
        let ctx: Vec<_> = (0..nc).map(|_| (random_tensor(9, d, &mut rng), random_tensor(9, d, &mut rng))).collect();
        let map = TokenMatchMap::empty(TokenGrid { rows: 1, cols: n }, TokenGrid { rows: 3, cols: 3 }, nc);
        let got = matched_cross_attention(&q, &k, &v, &refs(&ctx), &map, 2).unwrap();
        worst = worst.max(got.max_abs_diff(&self_attention(&q, &k, &v, 2)));
    }
    let fails = if worst < 1e-6 { vec![] } else { vec![format!("max |diff| {worst:.3e}")] };
    verdict("self-attention reduction", &fails, &format!("100 instances, max |diff| {worst:.2e}"));
}

#[test]
fn unmatched_context_no_op() {
    let mut rng = SeededRng::new(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(1..=16);
        let d = 8;
        let (q, k, v) = (random_tensor(n, d, &mut rng), random_tensor(n, d, &mut rng), random_tensor(n, d, &mut rng));
        let ctx: Vec<_> = (0..2).map(|_| (random_tensor(6, d, &mut rng), random_tensor(6, d, &mut rng))).collect();
        let one = random_map(n, 6, 1, 0.3, &mut rng);
        let sets = (0..n).map(|j| one.matching_tokens(j).to_vec()).collect();
        let two = TokenMatchMap::from_sets(one.input_grid, one.context_grid, 2, sets).unwrap();
        let before = matched_cross_attention(&q, &k, &v, &refs(&ctx[..1]), &one, 2).unwrap();
        let after = matched_cross_attention(&q, &k, &v, &refs(&ctx), &two, 2).unwrap();
        worst = worst.max(before.max_abs_diff(&after));
    }

    let model = common::grad_model(4);
    let cfg = &model.config;
    let img = common::grad_example(&mut rng, cfg).input;
    let depth = DepthMap::from_fn(cfg.image_width, cfg.image_height, |_, _| Some(2.0));
    let ctx = ContextSample::new(img.clone(), depth, 9, Provenance::Retrieved).unwrap();
    let g = cfg.grid();
    let alone = model.predict_single(&img).unwrap();
    let with = model.predict_with(&img, &[ctx], &TokenMatchMap::empty(g, g, 1)).unwrap();
    let model_diff = alone.values().iter().zip(with.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    worst = worst.max(model_diff);

    let fails = if worst < 1e-6 { vec![] } else { vec![format!("max |diff| {worst:.3e}")] };
    verdict("unmatched-context no-op", &fails, &format!("attention and model level, max |diff| {worst:.2e}"));
}

#[test]
fn gradient_check() {
    let mut fails = Vec::new();
    let model = common::grad_model(5);
    let mut rng = SeededRng::new(9);
    let batch: Vec<_> = (0..2).map(|_| common::grad_example(&mut rng, &model.config)).collect();
    let report = grad_check(&model, &batch, &ParamGroup::ALL, 32, 1e-4, 0.5, &mut rng).unwrap();
    for g in &report.groups {
        if g.coordinates < 32 {
            fails.push(format!("{} checked only {} coordinates", g.group.name(), g.coordinates));
        }
    }
    let worst = report.max_relative_error();
    if !(worst < 1e-4) {
        fails.push(format!("max relative error {worst:.3e}"));
    }

    let mut frozen = common::grad_model(6);
    frozen.freeze(ParamGroup::Decoder, true);
    frozen.freeze(ParamGroup::ContextPos, true);
    let batch = vec![common::grad_example(&mut rng, &frozen.config)];
    let r = grad_check(&frozen, &batch, &ParamGroup::ALL, 32, 1e-4, 0.5, &mut rng).unwrap();
    if !r.frozen_exact_zero() {
        fails.push("frozen group has a nonzero analytic gradient".into());
    }
    verdict(
        "gradient check",
        &fails,
        &format!("{} groups, max rel err {worst:.2e}, frozen groups exactly zero", report.groups.len()),
    );
}

#[test]
fn geometry() {
    let mut fails = Vec::new();
    let camera = |w: usize, h: usize| CameraIntrinsics::new(w as f64, w as f64, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0).unwrap();

    let mut round_trip = 0.0f64;
    for seed in 0..50 {
        let mut rng = SeededRng::new(seed);
        let (w, h) = (rng.gen_range(4..24), rng.gen_range(4..24));
        let k = camera(w, h);
        let (img, depth) = common::random_rgbd(w, h, &mut rng);
        let r = render(&backproject(&img, &depth, &k).unwrap(), &k, &Pose::identity(), (h, w), &RenderConfig::default()).unwrap();
        for i in 0..depth.len() {
            match (depth.get_index(i), r.depth.get_index(i)) {
                (Some(a), Some(b)) => round_trip = round_trip.max((a - b).abs()),
                (None, None) => {}
                _ => round_trip = f64::INFINITY,
            }
        }
    }
    if !(round_trip <= 1e-9) {
        fails.push(format!("identity round trip off by {round_trip:.3e}"));
    }

    let (w, h) = (24, 18);
    let k = camera(w, h);
    let mut zbuffer_mismatches = 0;
    for seed in 0..100 {
        let mut rng = SeededRng::new(1000 + seed);
        let cloud = common::random_cloud(rng.gen_range(1..300), &mut rng);
        let pose = sample_pose(&mut rng, &PoseBounds { max_angle_deg: 20.0, max_translation_m: 0.2 });
        let r = render(&cloud, &k, &pose, (h, w), &RenderConfig::default()).unwrap();
        let oracle = common::brute_force_zbuffer(&cloud, &k, &pose, w, h);
        zbuffer_mismatches += (0..w * h).filter(|&i| r.depth.get_index(i) != oracle[i]).count();
    }
    if zbuffer_mismatches > 0 {
        fails.push(format!("{zbuffer_mismatches} z-buffer pixels differ from the oracle"));
    }

    let (w, h) = (40, 30);
    let k = camera(w, h);
    let (mut px, mut m, mut pairs) = (0.0f64, 0.0f64, 0usize);
    for seed in 0..20 {
        let mut rng = SeededRng::new(2000 + seed);
        let (img, depth) = common::random_rgbd(w, h, &mut rng);
        let pose = sample_pose(&mut rng, &PoseBounds::for_median_depth(depth.median().unwrap()));
        let aug = make_context_3d(&img, &depth, &k, &pose, 0, &RenderConfig::default()).unwrap();
        let (a, b) = common::reprojection_error(&depth, &k, &pose, &aug);
        px = px.max(a);
        m = m.max(b);
        pairs += aug.correspondences.len();
    }
    if !(px <= 0.5 && m <= 1e-6) {
        fails.push(format!("reprojection error {px:.3} px, {m:.3e} m"));
    }
    verdict(
        "geometry",
        &fails,
        &format!("round trip {round_trip:.1e}, 100 clouds z-buffer exact, {pairs} correspondences within {px:.2} px / {m:.1e} m"),
    );
}

#[test]
fn retrieval() {
    let mut rng = SeededRng::new(11);
    let gaussian = |rng: &mut SeededRng| -> Vec<f64> { (0..128).map(|_| StandardNormal.sample(rng)).collect() };
    let pool = (0..1000u64)
        .map(|id| PoolItem::Descriptor { id, scene_id: rng.gen_range(0..50), descriptor: Descriptor::from_raw(&gaussian(&mut rng)) })
        .collect();
    let index = build_index(pool).unwrap();
    let mut fails = Vec::new();
    let mut queries = 0;
    for m in [1, 4, 16] {
        for _ in 0..50 {
            let q = Descriptor::from_raw(&gaussian(&mut rng));
            let scene = rng.gen_range(0..50);
            let got = index.knn_query(&q, m, Some(scene)).unwrap();
            if got.ids() != common::exhaustive_knn(index.entries(), &q, m, Some(scene)) {
                fails.push(format!("M={m}: ids or order differ from the exhaustive scan"));
            }
            if got.hits.iter().any(|h| h.scene_id == scene) {
                fails.push(format!("M={m}: same-scene hit returned"));
            }
            if index.knn_query(&q, m, None).unwrap().ids() != common::exhaustive_knn(index.entries(), &q, m, None) {
                fails.push(format!("M={m}: unrestricted query differs"));
            }
            queries += 1;
        }
    }
    fails.dedup();
    verdict("retrieval", &fails, &format!("1000x128 pool, {queries} queries for M in {{1, 4, 16}}"));
}

#[test]
fn uncertainty() {
    let mut fails = Vec::new();
    let img = ImageBuffer::from_fn(12, 10, |u, v| [u as f64 / 12.0, v as f64 / 10.0, 0.4]);
    let constant = |i: &ImageBuffer| -> rad_core::Result<DepthMap> { Ok(DepthMap::from_fn(i.width(), i.height(), |_, _| Some(3.0))) };
    let brightness = |i: &ImageBuffer| -> rad_core::Result<DepthMap> {
        Ok(DepthMap::from_fn(i.width(), i.height(), |u, v| Some(0.5 + i.get(u, v).iter().sum::<f64>())))
    };
    let u = uncertainty_map(&constant, &img, &NoiseConfig::default(), &mut SeededRng::new(0)).unwrap();
    if u.values().iter().any(|&x| x != 0.0) {
        fails.push("constant model gives nonzero U".into());
    }
    let u = uncertainty_map(&brightness, &img, &NoiseConfig { sigma: 0.0, n: 5 }, &mut SeededRng::new(0)).unwrap();
    if u.values().iter().any(|&x| x != 0.0) {
        fails.push("sigma = 0 gives nonzero U".into());
    }
    let one = DepthMap::from_fn(1, 1, |_, _| Some(1.0));
    let three = DepthMap::from_fn(1, 1, |_, _| Some(3.0));
    let hand = UncertaintyMap::from_predictions(&[one, three]).unwrap().values()[0];
    if (hand - 0.5).abs() > 1e-12 {
        fails.push(format!("{{1, 3}} gives U = {hand}"));
    }
    let all_uncertain = UncertaintyMap::from_parts(12, 10, vec![1.0; 120], vec![true; 120]).unwrap();
    let seg = SegmentMap::new(12, 10, (0..120).map(|i| (i % 3) as u32).collect(), 3).unwrap();
    if !keep_segments(&all_uncertain, &seg, 0.05, 100.0).unwrap().is_empty() {
        fails.push("q = 100 keeps a segment".into());
    }
    verdict("uncertainty", &fails, &format!("constant and sigma=0 give 0, {{1, 3}} gives {hand}, q=100 keeps nothing"));
}

#[test]
fn metrics() {
    let mut fails = Vec::new();
    let mut rng = SeededRng::new(12);
    let gt = DepthMap::from_values(16, 12, (0..192).map(|_| rng.gen_range(0.2..9.0)).collect()).unwrap();
    let mask = vec![true; 192];
    let p = depth_metrics(&gt, &gt, &mask).unwrap();
    let perfect = (p.delta1, p.delta2, p.delta3, p.abs_rel, p.rms, p.rms_log, p.log10) == (1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0);
    if !perfect {
        fails.push(format!("pred = gt gives {p:?}"));
    }
    let s = depth_metrics(&gt.scaled(1.3), &gt, &mask).unwrap();
    if (s.delta1, s.delta2, s.delta3) != (0.0, 1.0, 1.0) {
        fails.push(format!("1.3x deltas {:?}", (s.delta1, s.delta2, s.delta3)));
    }
    if (s.abs_rel - 0.3).abs() > 1e-9 {
        fails.push(format!("1.3x AbsRel {}", s.abs_rel));
    }
    if (s.log10 - 1.3f64.log10()).abs() > 1e-9 {
        fails.push(format!("1.3x Log10 {}", s.log10));
    }
    let pred = DepthMap::from_values(16, 12, gt.values().iter().map(|g| g * rng.gen_range(0.5..2.0)).collect()).unwrap();
    let mut worst = 0.0f64;
    for c in [0.01, 0.5, 1.3, 7.0, 100.0] {
        worst = worst.max((silog_loss(&pred.scaled(c), &gt, 1.0).unwrap() - silog_loss(&pred, &gt, 1.0).unwrap()).abs());
    }
    if !(worst <= 1e-10) {
        fails.push(format!("SILog moves by {worst:.3e} under scaling"));
    }
    verdict(
        "metrics",
        &fails,
        &format!("perfect report, 1.3x AbsRel {:.12} Log10 {:.12}, SILog scale drift {worst:.1e}", s.abs_rel, s.log10),
    );
}

const SEEDS: u64 = 5;

struct SeedOutcome {
    rare: [f64; 4],
    all: [f64; 4],
    rare_classes: BTreeSet<u32>,
    max_rare_frequency: f64,
}

struct EndToEnd {
    cfg: ExperimentConfig,
    seeds: Vec<SeedOutcome>,
    seconds: f64,
}

const ROWS: [Variant; 4] = [Variant::Baseline, Variant::Rad, Variant::FullContext, Variant::GlobalRetrieval];

/// Runs the five-seed synthetic experiment once and shares it between the
/// end-to-end and ablation criteria.
fn end_to_end() -> &'static EndToEnd {
    static RUN: OnceLock<EndToEnd> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let start = Instant::now();
        let seeds = (0..SEEDS)
            .map(|seed| {
                let r = run_synthetic_experiment(&cfg, seed).unwrap();
                let get = |v, p| r.report.abs_rel(v, p).unwrap_or(f64::NAN);
                let max_rare_frequency = r
                    .rare_classes
                    .iter()
                    .map(|c| r.class_stats.classes[c].image_frequency)
                    .fold(0.0, f64::max);
                let _ = writeln!(
                    std::io::stdout().lock(),
                    "  seed {seed}: rare AbsRel baseline {:.4} rad {:.4} full {:.4} global {:.4}; all {:.4} / {:.4}",
                    get(Variant::Baseline, Protocol::Rare),
                    get(Variant::Rad, Protocol::Rare),
                    get(Variant::FullContext, Protocol::Rare),
                    get(Variant::GlobalRetrieval, Protocol::Rare),
                    get(Variant::Baseline, Protocol::All),
                    get(Variant::Rad, Protocol::All),
                );
                SeedOutcome {
                    rare: ROWS.map(|v| get(v, Protocol::Rare)),
                    all: ROWS.map(|v| get(v, Protocol::All)),
                    rare_classes: r.rare_classes,
                    max_rare_frequency,
                }
            })
            .collect();
        EndToEnd { cfg, seeds, seconds: start.elapsed().as_secs_f64() }
    })
}

fn mean_over_seeds(e: &EndToEnd, f: impl Fn(&SeedOutcome) -> f64) -> f64 {
    e.seeds.iter().map(f).sum::<f64>() / e.seeds.len() as f64
}

#[test]
fn end_to_end_rare_class_gain() {
    let e = end_to_end();
    let mut fails = Vec::new();
    let c = &e.cfg;
    if c.train_scenes < 500 || c.test_scenes < 100 || !(64..=112).contains(&c.scene.width) || !(64..=112).contains(&c.scene.height) {
        fails.push("corpus below the required size".into());
    }
    for (i, s) in e.seeds.iter().enumerate() {
        if s.rare_classes.is_empty() || s.max_rare_frequency > 0.1 {
            fails.push(format!("seed {i}: rare classes {:?} at frequency up to {:.3}", s.rare_classes, s.max_rare_frequency));
        }
    }
    let base = mean_over_seeds(e, |s| s.rare[0]);
    let rad = mean_over_seeds(e, |s| s.rare[1]);
    let base_all = mean_over_seeds(e, |s| s.all[0]);
    let rad_all = mean_over_seeds(e, |s| s.all[1]);
    if !(rad <= 0.9 * base) {
        fails.push(format!("rare ratio {:.4} > 0.9", rad / base));
    }
    if !(rad_all <= 1.02 * base_all) {
        fails.push(format!("all-classes ratio {:.4} > 1.02", rad_all / base_all));
    }
    if e.seconds >= 1800.0 {
        fails.push(format!("took {:.0} s", e.seconds));
    }
    verdict(
        "end-to-end rare-class gain",
        &fails,
        &format!(
            "{} seeds, rare AbsRel {rad:.4} vs baseline {base:.4} (ratio {:.3}), all {rad_all:.4} vs {base_all:.4} (ratio {:.3}), {:.0} s",
            e.seeds.len(),
            rad / base,
            rad_all / base_all,
            e.seconds
        ),
    );
}

#[test]
fn ablations_are_worse_than_rad() {
    let e = end_to_end();
    let rad = mean_over_seeds(e, |s| s.rare[1]);
    let full = mean_over_seeds(e, |s| s.rare[2]);
    let global = mean_over_seeds(e, |s| s.rare[3]);
    let mut fails = Vec::new();
    if !(full > rad) {
        fails.push(format!("full-context {full:.4} not worse than RAD {rad:.4}"));
    }
    if !(global > rad) {
        fails.push(format!("global KNN {global:.4} not worse than RAD {rad:.4}"));
    }
    verdict(
        "ablations",
        &fails,
        &format!("rare AbsRel RAD {rad:.4}, full-context {full:.4}, global KNN {global:.4}"),
    );
}
