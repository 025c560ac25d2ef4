#![allow(dead_code)]

use rad_core::correspondence::{TokenGrid, TokenMatchMap};
use rad_core::nn::{DualStreamModel, GradCheckExample, ModelConfig, Tensor};
use rad_core::retrieval::{ContextSample, Provenance};
use rad_core::{DepthMap, ImageBuffer, SeededRng};
use rand::Rng;

/// Dense softmax attention over `[K_i ‖ K_c0 ‖ K_c1 ...]` where row `j` may see
/// all input keys plus exactly its matched context keys.
pub fn masked_dense_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    ctx: &[(Tensor, Tensor)],
    map: &TokenMatchMap,
    heads: usize,
) -> Tensor {
    let (n, d) = (q.rows, q.cols);
    let dh = d / heads;
    let mut keys: Vec<Vec<f64>> = (0..n).map(|r| k.row(r).to_vec()).collect();
    let mut vals: Vec<Vec<f64>> = (0..n).map(|r| v.row(r).to_vec()).collect();
    let mut offset = Vec::new();
    for (kc, vc) in ctx {
        offset.push(keys.len());
        for r in 0..kc.rows {
            keys.push(kc.row(r).to_vec());
            vals.push(vc.row(r).to_vec());
        }
    }
    let total = keys.len();
    let mut out = Tensor::zeros(n, d);
    for j in 0..n {
        let mut allowed = vec![false; total];
        allowed[..n].iter_mut().for_each(|a| *a = true);
        for &(c, t) in map.matching_tokens(j) {
            allowed[offset[c] + t] = true;
        }
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let logits: Vec<f64> = (0..total)
                .map(|i| {
                    if allowed[i] {
                        q.row(j)[cols.clone()]
                            .iter()
                            .zip(&keys[i][cols.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let s: f64 = w.iter().sum();
            for (i, wi) in w.iter().enumerate() {
                for c in cols.clone() {
                    out.data[j * d + c] += wi / s * vals[i][c];
                }
            }
        }
    }
    out
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// A random map on `n_in` input tokens (as a 1-row grid) into `ctx_sizes`.
pub fn random_map(n_in: usize, ctx_tokens: usize, num_ctx: usize, density: f64, rng: &mut impl Rng) -> TokenMatchMap {
    let sets = (0..n_in)
        .map(|_| {
            let mut s = Vec::new();
            for c in 0..num_ctx {
                for t in 0..ctx_tokens {
                    if rng.gen_bool(density) {
                        s.push((c, t));
                    }
                }
            }
            s
        })
        .collect();
    TokenMatchMap::from_sets(
        TokenGrid { rows: 1, cols: n_in },
        TokenGrid {
            rows: 1,
            cols: ctx_tokens,
        },
        num_ctx,
        sets,
    )
    .unwrap()
}

pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs() / y.abs().max(1e-12).max(x.abs()))
        .fold(0.0, f64::max)
}

/// Per-pixel minimum camera-frame depth over every point landing on the
/// pixel, by exhaustive search.
pub fn brute_force_zbuffer(
    cloud: &rad_core::geometry::PointCloud,
    k: &rad_core::geometry::CameraIntrinsics,
    pose: &rad_core::geometry::Pose,
    width: usize,
    height: usize,
) -> Vec<Option<f64>> {
    let mut out = vec![None; width * height];
    for v in 0..height {
        for u in 0..width {
            let mut best: Option<f64> = None;
            for p in &cloud.points {
                let q = pose.apply(p);
                if q[2] <= 0.0 {
                    continue;
                }
                let (x, y) = k.project(&q);
                if x.round() == u as f64 && y.round() == v as f64 && best.is_none_or(|b| q[2] < b) {
                    best = Some(q[2]);
                }
            }
            out[v * width + u] = best;
        }
    }
    out
}

pub fn random_cloud(n: usize, rng: &mut impl Rng) -> rad_core::geometry::PointCloud {
    let mut cloud = rad_core::geometry::PointCloud::default();
    for i in 0..n {
        cloud.points.push([
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-0.5..4.0),
        ]);
        cloud.colors.push([rng.gen(), rng.gen(), rng.gen()]);
        cloud.source_pixel.push((i, 0));
    }
    cloud
}

/// Every pool entry scored, fully sorted by similarity then id.
pub fn exhaustive_knn(
    entries: &[rad_core::retrieval::IndexEntry],
    query: &rad_core::retrieval::Descriptor,
    m: usize,
    exclude_scene: Option<u32>,
) -> Vec<u64> {
    let mut scored: Vec<(f64, u64)> = entries
        .iter()
        .filter(|e| Some(e.scene_id) != exclude_scene)
        .map(|e| {
            let s: f64 = e.descriptor.vector.iter().zip(&query.vector).map(|(&a, &b)| a as f64 * b as f64).sum();
            (s, e.id)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(m).map(|(_, id)| id).collect()
}

/// Largest pixel and depth discrepancy of analytic correspondences, found by
/// lifting each source pixel and projecting it into the rendered view.
pub fn reprojection_error(
    depth: &rad_core::DepthMap,
    k: &rad_core::geometry::CameraIntrinsics,
    pose: &rad_core::geometry::Pose,
    aug: &rad_core::geometry::Augmented3d,
) -> (f64, f64) {
    let (mut px, mut m) = (0.0f64, 0.0f64);
    for c in &aug.correspondences.pairs {
        let d = depth.get(c.ua as usize, c.va as usize).expect("source pixel has depth");
        let x = (c.ua - k.cx) / k.fx * d;
        let y = (c.va - k.cy) / k.fy * d;
        let q = pose.apply(&[x, y, d]);
        let (u, v) = k.project(&q);
        px = px.max((u - c.ub).abs()).max((v - c.vb).abs());
        let rendered = aug.context.depth.get(c.ub as usize, c.vb as usize).expect("target pixel has depth");
        m = m.max((q[2] - rendered).abs());
    }
    (px, m)
}

/// Random RGB-D scene: a tilted plane with bumps, some invalid pixels.
pub fn random_rgbd(w: usize, h: usize, rng: &mut impl Rng) -> (rad_core::ImageBuffer, rad_core::DepthMap) {
    let (a, b, c): (f64, f64, f64) = (rng.gen_range(1.0..4.0), rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02));
    let phase: f64 = rng.gen_range(0.0..6.0);
    let holes: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(0.05)).collect();
    let img = rad_core::ImageBuffer::from_fn(w, h, |u, v| {
        let t = (u as f64 * 0.3 + phase).sin() * 0.5 + 0.5;
        [t, v as f64 / h as f64, 0.5]
    });
    let depth = rad_core::DepthMap::from_fn(w, h, |u, v| {
        (!holes[v * w + u]).then(|| a + b * u as f64 + c * v as f64 + 0.1 * ((u + v) as f64 * 0.5 + phase).cos())
    });
    (img, depth)
}

/// Central `level` acceptance region `[lo, hi]` of Binomial(n, p), from the
/// exact pmf.
pub fn binomial_interval(n: usize, p: f64, level: f64) -> (usize, usize) {
    let tail = (1.0 - level) / 2.0;
    let mut log_pmf = n as f64 * (1.0 - p).ln();
    let odds = (p / (1.0 - p)).ln();
    let mut cdf = 0.0;
    let mut lo = None;
    for k in 0..=n {
        cdf += log_pmf.exp();
        if lo.is_none() && cdf >= tail {
            lo = Some(k);
        }
        if cdf >= 1.0 - tail {
            return (lo.unwrap_or(k), k);
        }
        log_pmf += ((n - k) as f64 / (k + 1) as f64).ln() + odds;
    }
    (lo.unwrap_or(n), n)
}

/// Small enough for central differences over every parameter group.
pub fn grad_config() -> ModelConfig {
    ModelConfig {
        image_width: 12,
        image_height: 8,
        patch: 4,
        d_model: 16,
        heads: 2,
        blocks: 1,
        mlp_hidden: 24,
        max_contexts: 2,
        decoder_channels: 6,
        taps: vec![0],
        ..ModelConfig::default()
    }
}

pub fn grad_example(rng: &mut SeededRng, cfg: &ModelConfig) -> GradCheckExample {
    let (w, h) = (cfg.image_width, cfg.image_height);
    let mut img = || {
        let data = (0..w * h * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        ImageBuffer::from_raw(w, h, data).unwrap()
    };
    let input = img();
    let c0 = img();
    let c1 = img();
    let depth = |rng: &mut SeededRng| {
        DepthMap::from_values(w, h, (0..w * h).map(|_| rng.gen_range(0.5..6.0)).collect()).unwrap()
    };
    let contexts = vec![
        ContextSample::new(c0, depth(rng), 1, Provenance::Retrieved).unwrap(),
        ContextSample::new(c1, depth(rng), 2, Provenance::Augmented).unwrap(),
    ];
    let grid = cfg.grid();
    let sets = (0..grid.len())
        .map(|_| {
            (0..2)
                .flat_map(|c| (0..grid.len()).map(move |t| (c, t)))
                .filter(|_| rng.gen_bool(0.3))
                .collect()
        })
        .collect();
    let map = TokenMatchMap::from_sets(grid, grid, 2, sets).unwrap();
    let gt = depth(rng);
    GradCheckExample {
        input,
        contexts,
        map,
        gt,
    }
}

pub fn grad_model(seed: u64) -> DualStreamModel {
    let cfg = grad_config();
    let mut rng = SeededRng::new(seed);
    let mut m = DualStreamModel::new(cfg, &mut rng).unwrap();
    m.init_context_stream(&mut rng).unwrap();
    // Break the zero-initialized disparity weights and the copied blocks so
    // every group sees a generic point.
    for e in 0..m.params.len() {
        let t = m.params.value_mut(e);
        for x in t.data.iter_mut() {
            *x += rng.gen_range(-0.05..0.05);
        }
    }
    m
}
