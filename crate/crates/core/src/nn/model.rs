//! The dual-stream encoder, its patch projections, and the convolutional
//! decoder head.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::correspondence::{TokenGrid, TokenMatchMap};
use crate::error::{RadError, Result};
use crate::image::{DepthMap, ImageBuffer};
use crate::nn::params::{Gradients, ParamGroup, ParamStore};
use crate::nn::tape::{softplus, Tape, Var, GATHER_ZERO};
use crate::nn::tensor::Tensor;
use crate::retrieval::ContextSample;
use crate::rng::SeededRng;
use crate::uncertainty::DepthModel;

/// Added after the softplus so predictions stay strictly positive even when
/// the pre-activation underflows.
pub const DEPTH_FLOOR_M: f64 = 1e-3;

pub const SILOG_LAMBDA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_width: usize,
    pub image_height: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    /// M, the number of context slots.
    pub max_contexts: usize,
    pub decoder_channels: usize,
    /// Block indices whose input-stream outputs feed the decoder.
    pub taps: Vec<usize>,
    pub neighborhood_radius: usize,
    /// Depth range for the context disparity channel.
    pub min_depth: f64,
    pub max_depth: f64,
    /// Initial output depth of the decoder bias.
    pub init_depth: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_width: 56,
            image_height: 56,
            patch: 14,
            d_model: 64,
            heads: 4,
            blocks: 4,
            mlp_hidden: 128,
            max_contexts: 4,
            decoder_channels: 32,
            taps: vec![1, 3],
            neighborhood_radius: 1,
            min_depth: 0.1,
            max_depth: 10.0,
            init_depth: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RadError::Config(m));
        if self.patch == 0 || !self.image_width.is_multiple_of(self.patch) || !self.image_height.is_multiple_of(self.patch) {
            return bad(format!(
                "resolution {}x{} not divisible by patch {}",
                self.image_width, self.image_height, self.patch
            ));
        }
        self.attention().validate()?;
        if self.blocks == 0 || self.taps.is_empty() || self.taps.iter().any(|&t| t >= self.blocks) {
            return bad(format!("taps {:?} invalid for {} blocks", self.taps, self.blocks));
        }
        if self.mlp_hidden == 0 || self.decoder_channels == 0 {
            return bad("zero hidden width".into());
        }
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth && self.init_depth > DEPTH_FLOOR_M) {
            return bad(format!(
                "depth range [{}, {}] / init {} invalid",
                self.min_depth, self.max_depth, self.init_depth
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> TokenGrid {
        TokenGrid {
            rows: self.image_height / self.patch,
            cols: self.image_width / self.patch,
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            num_heads: self.heads,
            d_model: self.d_model,
            neighborhood_radius: self.neighborhood_radius,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RadError::io(path, e))?;
        let cfg: ModelConfig = toml::from_str(&text).map_err(|e| RadError::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub d_model: usize,
    pub neighborhood_radius: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(RadError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// Tokens on a patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor {
    pub tokens: Tensor,
    pub grid: TokenGrid,
}

/// Context disparity channel: inverse depth mapped to `[0, 1]` over the
/// configured depth range; invalid pixels give 0.
pub fn normalized_inverse_depth(d: Option<f64>, min_depth: f64, max_depth: f64) -> f64 {
    match d {
        Some(d) if d > 0.0 => {
            let (lo, hi) = (1.0 / max_depth, 1.0 / min_depth);
            ((1.0 / d - lo) / (hi - lo)).clamp(0.0, 1.0)
        }
        _ => 0.0,
    }
}

/// Non-overlapping patch flattening. Row `r·cols + c` holds patch `(r, c)`
/// with features ordered `(dy, dx, channel)`.
pub fn unfold_patches(
    width: usize,
    height: usize,
    channels: usize,
    patch: usize,
    pixel: impl Fn(usize, usize, usize) -> f64,
) -> Result<(Tensor, TokenGrid)> {
    if patch == 0 || !width.is_multiple_of(patch) || !height.is_multiple_of(patch) {
        return Err(RadError::input(format!(
            "resolution {width}x{height} not divisible by patch {patch}"
        )));
    }
    let grid = TokenGrid {
        rows: height / patch,
        cols: width / patch,
    };
    let f = channels * patch * patch;
    let mut t = Tensor::zeros(grid.len(), f);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let row = t.row_mut(r * grid.cols + c);
            for dy in 0..patch {
                for dx in 0..patch {
                    for ch in 0..channels {
                        row[(dy * patch + dx) * channels + ch] = pixel(c * patch + dx, r * patch + dy, ch);
                    }
                }
            }
        }
    }
    Ok((t, grid))
}

pub fn unfold_rgb(image: &ImageBuffer, patch: usize) -> Result<(Tensor, TokenGrid)> {
    unfold_patches(image.width(), image.height(), 3, patch, |u, v, ch| image.get(u, v)[ch])
}

pub fn unfold_rgbd(sample: &ContextSample, patch: usize, min_depth: f64, max_depth: f64) -> Result<(Tensor, TokenGrid)> {
    let img = &sample.image;
    unfold_patches(img.width(), img.height(), 4, patch, |u, v, ch| {
        if ch < 3 {
            img.get(u, v)[ch]
        } else {
            normalized_inverse_depth(sample.depth.get(u, v), min_depth, max_depth)
        }
    })
}

fn check_resolution(cfg: &ModelConfig, dims: (usize, usize), what: &str) -> Result<()> {
    if dims != (cfg.image_height, cfg.image_width) {
        return Err(RadError::input(format!(
            "{what} is {}x{}, network expects {}x{}",
            dims.1, dims.0, cfg.image_width, cfg.image_height
        )));
    }
    Ok(())
}

fn add_rows(mut x: Tensor, bias: &Tensor) -> Tensor {
    for r in 0..x.rows {
        for (o, b) in x.row_mut(r).iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    x
}

/// Input-stream patch embedding plus the input positional encoding.
pub fn project_input_patches(image: &ImageBuffer, params: &ParamStore, cfg: &ModelConfig) -> Result<TokenTensor> {
    check_resolution(cfg, image.dims(), "input image")?;
    let (x, grid) = unfold_rgb(image, cfg.patch)?;
    let mut t = add_rows(x.matmul(params.get("input.patch.w")?), params.get("input.patch.b")?);
    t.add_assign(params.get("input.pos")?);
    Ok(TokenTensor { tokens: t, grid })
}

/// 4-channel (RGB + disparity) context patch embedding plus the encoding of `slot`.
pub fn project_context_patches(
    sample: &ContextSample,
    params: &ParamStore,
    cfg: &ModelConfig,
    slot: usize,
) -> Result<TokenTensor> {
    if slot >= cfg.max_contexts {
        return Err(RadError::input(format!("context slot {slot} >= M = {}", cfg.max_contexts)));
    }
    check_resolution(cfg, sample.image.dims(), "context image")?;
    let (x, grid) = unfold_rgbd(sample, cfg.patch, cfg.min_depth, cfg.max_depth)?;
    let mut t = add_rows(x.matmul(params.get("context.patch.w")?), params.get("context.patch.b")?);
    t.add_assign(params.get(&format!("context.pos.{slot}"))?);
    Ok(TokenTensor { tokens: t, grid })
}

/// Maps a 3-channel patch weight to the 4-channel layout with a zero
/// disparity row per pixel.
pub fn widen_patch_weight(w3: &Tensor, patch: usize) -> Tensor {
    let pixels = patch * patch;
    assert_eq!(w3.rows, 3 * pixels, "3-channel patch weight shape");
    let mut w4 = Tensor::zeros(4 * pixels, w3.cols);
    for p in 0..pixels {
        for ch in 0..3 {
            w4.row_mut(p * 4 + ch).copy_from_slice(w3.row(p * 3 + ch));
        }
    }
    w4
}

const BLOCK_TENSORS: [&str; 16] = [
    "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.g",
    "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
];

fn block_shapes(cfg: &ModelConfig) -> [(usize, usize); 16] {
    let (d, h) = (cfg.d_model, cfg.mlp_hidden);
    [
        (1, d),
        (1, d),
        (d, d),
        (1, d),
        (d, d),
        (1, d),
        (d, d),
        (1, d),
        (d, d),
        (1, d),
        (1, d),
        (1, d),
        (d, h),
        (1, h),
        (h, d),
        (1, d),
    ]
}

/// Every tensor name and shape the configuration requires.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let (d, p2, n) = (cfg.d_model, cfg.patch * cfg.patch, cfg.grid().len());
    let td = cfg.taps.len() * d;
    let mut out = vec![
        ("input.patch.w".to_string(), (3 * p2, d)),
        ("input.patch.b".to_string(), (1, d)),
        ("context.patch.w".to_string(), (4 * p2, d)),
        ("context.patch.b".to_string(), (1, d)),
        ("input.pos".to_string(), (n, d)),
    ];
    for k in 0..cfg.max_contexts {
        out.push((format!("context.pos.{k}"), (n, d)));
    }
    for stream in ["input", "context"] {
        for b in 0..cfg.blocks {
            for (name, shape) in BLOCK_TENSORS.iter().zip(block_shapes(cfg)) {
                out.push((format!("{stream}.block{b}.{name}"), shape));
            }
        }
    }
    out.extend([
        ("decoder.ln.g".to_string(), (1, td)),
        ("decoder.ln.b".to_string(), (1, td)),
        ("decoder.conv.w".to_string(), (9 * td, cfg.decoder_channels)),
        ("decoder.conv.b".to_string(), (1, cfg.decoder_channels)),
        ("decoder.out.w".to_string(), (cfg.decoder_channels, p2)),
        ("decoder.out.b".to_string(), (1, p2)),
    ]);
    out
}

fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// 3×3 same-padded neighbourhood gather on the token grid.
fn im2col_index(grid: TokenGrid, features: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(grid.len() * 9 * features);
    for r in 0..grid.rows as isize {
        for c in 0..grid.cols as isize {
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    let (rr, cc) = (r + dr, c + dc);
                    let inside = rr >= 0 && cc >= 0 && rr < grid.rows as isize && cc < grid.cols as isize;
                    let src = rr * grid.cols as isize + cc;
                    for f in 0..features {
                        idx.push(if inside { src as usize * features + f } else { GATHER_ZERO });
                    }
                }
            }
        }
    }
    idx
}

/// Pixel shuffle from per-token `p²` outputs to a `H·W × 1` column.
fn shuffle_index(grid: TokenGrid, patch: usize) -> Vec<usize> {
    let (w, h) = (grid.cols * patch, grid.rows * patch);
    let mut idx = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let token = (v / patch) * grid.cols + u / patch;
            idx.push(token * patch * patch + (v % patch) * patch + u % patch);
        }
    }
    idx
}

/// Encoder outputs at the configured taps.
pub struct Features {
    pub taps: Vec<Var>,
    pub grid: TokenGrid,
}

pub struct DualStreamModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    im2col: Arc<Vec<usize>>,
    shuffle: Arc<Vec<usize>>,
}

impl Clone for DualStreamModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            im2col: self.im2col.clone(),
            shuffle: self.shuffle.clone(),
        }
    }
}

struct BlockParams {
    v: Vec<Var>,
}

impl BlockParams {
    fn load(tape: &mut Tape, stream: &str, b: usize) -> Result<Self> {
        let v = BLOCK_TENSORS
            .iter()
            .map(|n| tape.param_named(&format!("{stream}.block{b}.{n}")))
            .collect::<Result<_>>()?;
        Ok(Self { v })
    }
}

impl DualStreamModel {
    /// Fresh random initialization of every tensor.
    pub fn new(config: ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let (d, h) = (config.d_model as f64, config.mlp_hidden as f64);
        for (name, (rows, cols)) in parameter_layout(&config) {
            let leaf = name.rsplit('.').next().unwrap_or("");
            let t = if name.ends_with(".g") {
                Tensor::full(rows, cols, 1.0)
            } else if name == "decoder.out.b" {
                Tensor::full(rows, cols, softplus_inverse(config.init_depth - DEPTH_FLOOR_M))
            } else if name.contains(".pos") {
                Tensor::randn(rows, cols, 0.02, rng)
            } else if leaf.starts_with('w') {
                let std = match leaf {
                    "wo" => 0.5 / d.sqrt(),
                    "w2" if name.contains("mlp") => 0.5 / h.sqrt(),
                    _ if name == "decoder.out.w" => 0.1 / (rows as f64).sqrt(),
                    _ => 1.0 / (rows as f64).sqrt(),
                };
                Tensor::randn(rows, cols, std, rng)
            } else {
                Tensor::zeros(rows, cols)
            };
            params.insert(name, t);
        }
        params.round_to_f32();
        Self::from_params(config, params)
    }

    /// Wraps existing parameters after checking every tensor name and shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        for (name, shape) in parameter_layout(&config) {
            let t = params.get(&name)?;
            if t.shape() != shape {
                return Err(RadError::Config(format!(
                    "parameter `{name}` is {:?}, config needs {shape:?}",
                    t.shape()
                )));
            }
        }
        let grid = config.grid();
        let td = config.taps.len() * config.d_model;
        Ok(Self {
            im2col: Arc::new(im2col_index(grid, td)),
            shuffle: Arc::new(shuffle_index(grid, config.patch)),
            config,
            params,
        })
    }

    pub fn load(config: ModelConfig, checkpoint: &Path) -> Result<Self> {
        Self::from_params(config, ParamStore::load(checkpoint)?)
    }

    /// Copies the input encoder into the context stream: identical blocks,
    /// a 4-channel patch projection whose disparity weights are zero, and
    /// per-slot encodings equal to the input encoding plus a small distinct
    /// perturbation.
    pub fn init_context_stream(&mut self, rng: &mut SeededRng) -> Result<()> {
        let cfg = self.config.clone();
        for b in 0..cfg.blocks {
            for n in BLOCK_TENSORS {
                let t = self.params.get(&format!("input.block{b}.{n}"))?.clone();
                *self.params.get_mut(&format!("context.block{b}.{n}"))? = t;
            }
        }
        let w4 = widen_patch_weight(self.params.get("input.patch.w")?, cfg.patch);
        *self.params.get_mut("context.patch.w")? = w4;
        let b = self.params.get("input.patch.b")?.clone();
        *self.params.get_mut("context.patch.b")? = b;
        let pos = self.params.get("input.pos")?.clone();
        for k in 0..cfg.max_contexts {
            let mut p = pos.clone();
            p.add_assign(&Tensor::randn(p.rows, p.cols, 1e-3, rng));
            *self.params.get_mut(&format!("context.pos.{k}"))? = p;
        }
        self.params.round_to_f32();
        Ok(())
    }

    fn attention_block(
        &self,
        tape: &mut Tape,
        x: Var,
        p: &BlockParams,
        ctx: &[(Var, Var)],
        map: &Arc<TokenMatchMap>,
    ) -> Result<Var> {
        let v = &p.v;
        let h = tape.layer_norm(x, v[0], v[1]);
        let q = tape.linear(h, v[2], v[3]);
        let k = tape.linear(h, v[4], v[5]);
        let val = tape.linear(h, v[6], v[7]);
        let a = tape.matched_attention(q, k, val, ctx, map.clone(), self.config.heads)?;
        let o = tape.linear(a, v[8], v[9]);
        let x = tape.add(x, o);
        let h = tape.layer_norm(x, v[10], v[11]);
        let m = tape.linear(h, v[12], v[13]);
        let m = tape.gelu(m);
        let m = tape.linear(m, v[14], v[15]);
        Ok(tape.add(x, m))
    }

    fn context_kv(&self, tape: &mut Tape, x: Var, p: &BlockParams) -> (Var, Var) {
        let v = &p.v;
        let h = tape.layer_norm(x, v[0], v[1]);
        (tape.linear(h, v[4], v[5]), tape.linear(h, v[6], v[7]))
    }

    /// Runs both streams. Context images no input token is matched to
    /// cannot affect the result and are skipped.
    pub fn encoder_forward(
        &self,
        tape: &mut Tape,
        input: &ImageBuffer,
        contexts: &[ContextSample],
        map: &TokenMatchMap,
    ) -> Result<Features> {
        let cfg = &self.config;
        if contexts.len() > cfg.max_contexts {
            return Err(RadError::input(format!(
                "{} context images for M = {}",
                contexts.len(),
                cfg.max_contexts
            )));
        }
        let grid = cfg.grid();
        if map.input_grid != grid || map.sets().len() != grid.len() {
            return Err(RadError::input(format!(
                "match map input grid {:?} differs from network grid {grid:?}",
                map.input_grid
            )));
        }
        let referenced: BTreeSet<usize> = map.referenced().iter().map(|&(c, _)| c).collect();
        if let Some(&c) = referenced.iter().find(|&&c| c >= contexts.len()) {
            return Err(RadError::input(format!(
                "match map references context image {c}, only {} supplied",
                contexts.len()
            )));
        }
        if !referenced.is_empty() && map.context_grid != grid {
            return Err(RadError::input("match map context grid differs from network grid"));
        }

        let (x_in, _) = unfold_rgb(input, cfg.patch)?;
        check_resolution(cfg, input.dims(), "input image")?;
        let x_in = tape.constant(x_in);
        let (w, b, pos) = (
            tape.param_named("input.patch.w")?,
            tape.param_named("input.patch.b")?,
            tape.param_named("input.pos")?,
        );
        let t = tape.linear(x_in, w, b);
        let mut xi = tape.add(t, pos);

        let mut xc: Vec<Option<Var>> = vec![None; contexts.len()];
        for &c in &referenced {
            check_resolution(cfg, contexts[c].image.dims(), "context image")?;
            let (x, _) = unfold_rgbd(&contexts[c], cfg.patch, cfg.min_depth, cfg.max_depth)?;
            let x = tape.constant(x);
            let (w, b, pos) = (
                tape.param_named("context.patch.w")?,
                tape.param_named("context.patch.b")?,
                tape.param_named(&format!("context.pos.{c}"))?,
            );
            let t = tape.linear(x, w, b);
            xc[c] = Some(tape.add(t, pos));
        }

        let self_map = Arc::new(TokenMatchMap::empty(grid, grid, 0));
        let cross_map = Arc::new(map.clone());
        let placeholder = if referenced.len() < contexts.len() {
            Some(tape.constant(Tensor::zeros(grid.len(), cfg.d_model)))
        } else {
            None
        };
        let last_tap = *cfg.taps.iter().max().expect("validated nonempty");
        let mut taps = Vec::with_capacity(cfg.taps.len());
        for blk in 0..=last_tap {
            let cp = BlockParams::load(tape, "context", blk)?;
            let mut kv = Vec::with_capacity(contexts.len());
            for slot in xc.iter_mut() {
                match slot {
                    Some(x) => {
                        kv.push(self.context_kv(tape, *x, &cp));
                        if blk < last_tap {
                            *x = self.attention_block(tape, *x, &cp, &[], &self_map)?;
                        }
                    }
                    None => {
                        let z = placeholder.expect("placeholder exists for unmatched slots");
                        kv.push((z, z));
                    }
                }
            }
            let ip = BlockParams::load(tape, "input", blk)?;
            xi = self.attention_block(tape, xi, &ip, &kv, &cross_map)?;
            if cfg.taps.contains(&blk) {
                taps.push((cfg.taps.iter().position(|&t| t == blk).unwrap(), xi));
            }
        }
        taps.sort_by_key(|&(i, _)| i);
        Ok(Features {
            taps: taps.into_iter().map(|(_, v)| v).collect(),
            grid,
        })
    }

    /// Fuses the taps and upsamples to a `H·W × 1` column of positive depths.
    pub fn decode(&self, tape: &mut Tape, features: &Features) -> Result<Var> {
        let cfg = &self.config;
        let n = features.grid.len();
        let td = cfg.taps.len() * cfg.d_model;
        let f = tape.concat_cols(&features.taps);
        let (g, b) = (tape.param_named("decoder.ln.g")?, tape.param_named("decoder.ln.b")?);
        let f = tape.layer_norm(f, g, b);
        let cols = tape.gather(f, self.im2col.clone(), n, 9 * td);
        let (w, b) = (tape.param_named("decoder.conv.w")?, tape.param_named("decoder.conv.b")?);
        let h = tape.linear(cols, w, b);
        let h = tape.gelu(h);
        let (w, b) = (tape.param_named("decoder.out.w")?, tape.param_named("decoder.out.b")?);
        let o = tape.linear(h, w, b);
        let px = tape.gather(o, self.shuffle.clone(), cfg.image_height * cfg.image_width, 1);
        let d = tape.softplus(px);
        let floor = tape.constant(Tensor::full(1, 1, DEPTH_FLOOR_M));
        Ok(tape.add_row(d, floor))
    }

    fn column_to_depth(&self, t: &Tensor) -> Result<DepthMap> {
        DepthMap::from_values(self.config.image_width, self.config.image_height, t.data.clone())
    }

    /// Inference with the given contexts and match map.
    pub fn predict_with(&self, input: &ImageBuffer, contexts: &[ContextSample], map: &TokenMatchMap) -> Result<DepthMap> {
        let mut tape = Tape::new(&self.params, false);
        let f = self.encoder_forward(&mut tape, input, contexts, map)?;
        let d = self.decode(&mut tape, &f)?;
        self.column_to_depth(tape.value(d))
    }

    /// Single-stream prediction (no contexts).
    pub fn predict_single(&self, input: &ImageBuffer) -> Result<DepthMap> {
        let grid = self.config.grid();
        self.predict_with(input, &[], &TokenMatchMap::empty(grid, grid, 0))
    }

    /// Loss on the jointly valid pixels of `gt`.
    pub fn forward_loss(
        &self,
        tape: &mut Tape,
        input: &ImageBuffer,
        contexts: &[ContextSample],
        map: &TokenMatchMap,
        gt: &DepthMap,
        lambda: f64,
    ) -> Result<Var> {
        check_resolution(&self.config, gt.dims(), "ground-truth depth")?;
        let f = self.encoder_forward(tape, input, contexts, map)?;
        let d = self.decode(tape, &f)?;
        tape.silog(d, gt.values().to_vec(), gt.valid_mask().to_vec(), lambda)
    }

    pub fn loss_and_grad(
        &self,
        input: &ImageBuffer,
        contexts: &[ContextSample],
        map: &TokenMatchMap,
        gt: &DepthMap,
        lambda: f64,
    ) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new(&self.params, true);
        let loss = self.forward_loss(&mut tape, input, contexts, map, gt, lambda)?;
        Ok((tape.value(loss).data[0], tape.backward(loss)))
    }

    pub fn freeze(&mut self, group: ParamGroup, frozen: bool) {
        self.params.set_frozen(group, frozen);
    }
}

impl DepthModel for DualStreamModel {
    /// Single-stream prediction; other resolutions are resampled in and out.
    fn predict(&self, image: &ImageBuffer) -> Result<DepthMap> {
        let (w, h) = (self.config.image_width, self.config.image_height);
        if image.dims() == (h, w) {
            return self.predict_single(image);
        }
        let d = self.predict_single(&image.resize_bilinear(w, h))?;
        Ok(d.resize_nearest(image.width(), image.height()))
    }
}

/// Reference value for an untrained decoder bias, exposed for tests.
pub fn initial_depth(cfg: &ModelConfig) -> f64 {
    softplus(softplus_inverse(cfg.init_depth - DEPTH_FLOOR_M)) + DEPTH_FLOOR_M
}
