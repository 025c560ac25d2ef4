//! Image descriptors, the exact cosine-KNN descriptor index over the context
//! pool, and uncertainty-aware retrieval of context samples.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RadError, Result};
use crate::image::{ensure_same_dims, DepthMap, ImageBuffer};
use crate::rng::SeededRng;
use crate::segment::SegmentMap;
use crate::uncertainty::{keep_segments, mask_image, uncertainty_map, DepthModel, NoiseConfig, UncertaintyMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Retrieved,
    Augmented,
}

/// An RGB-D context pair supplied alongside the input.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSample {
    pub image: ImageBuffer,
    pub depth: DepthMap,
    pub scene_id: u32,
    pub provenance: Provenance,
}

impl ContextSample {
    pub fn new(image: ImageBuffer, depth: DepthMap, scene_id: u32, provenance: Provenance) -> Result<Self> {
        ensure_same_dims("context image vs depth", image.dims(), depth.dims())?;
        Ok(Self {
            image,
            depth,
            scene_id,
            provenance,
        })
    }
}

/// L2-normalized descriptor; `valid` is false iff the raw vector was all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub vector: Vec<f32>,
    pub valid: bool,
}

impl Descriptor {
    /// Normalizes a raw vector; an all-zero vector gives an invalid descriptor.
    pub fn from_raw(raw: &[f64]) -> Self {
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Self {
                vector: vec![0.0; raw.len()],
                valid: false,
            };
        }
        Self {
            vector: raw.iter().map(|x| (x / norm) as f32).collect(),
            valid: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt()
    }
}

pub fn cosine(a: &Descriptor, b: &Descriptor) -> f64 {
    a.vector
        .iter()
        .zip(&b.vector)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}

const COLOR_BINS: usize = 4;
const COARSE_BINS: usize = 2;
const ORIENT_BINS: usize = 8;
const GRID: usize = 2;

/// Length of the built-in descriptor.
pub const DESCRIPTOR_DIM: usize = COLOR_BINS.pow(3) + ORIENT_BINS * (1 + GRID * GRID) + COARSE_BINS.pow(3) * GRID * GRID;

fn color_bin(p: [f64; 3], bins: usize) -> usize {
    let q = p.map(|c| ((c.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1));
    (q[0] * bins + q[1]) * bins + q[2]
}

/// Appends `sqrt(h / Σh) * weight`; an empty histogram contributes zeros.
fn push_block(out: &mut Vec<f64>, hist: &[f64], weight: f64) {
    let mass: f64 = hist.iter().sum();
    if mass > 0.0 {
        out.extend(hist.iter().map(|h| (h / mass).sqrt() * weight));
    } else {
        out.extend(std::iter::repeat_n(0.0, hist.len()));
    }
}

/// Built-in descriptor: a global joint color histogram, magnitude-weighted
/// gradient-orientation histograms (global and on a 2×2 grid) and coarse color
/// histograms on the same grid; each block Hellinger-normalized, then the
/// whole vector L2-normalized.
///
/// Pixels that are exactly black are treated as masked out: they contribute to
/// no histogram, and gradients are only taken where the whole stencil is
/// unmasked. Hence an all-zero image yields an invalid descriptor.
pub fn compute_descriptor(image: &ImageBuffer) -> Descriptor {
    let (w, h) = (image.width(), image.height());
    let live = |u: usize, v: usize| image.get(u, v) != [0.0, 0.0, 0.0];
    let cell_of = |u: usize, v: usize| (v * GRID / h.max(1)) * GRID + u * GRID / w.max(1);

    let mut color = vec![0.0; COLOR_BINS.pow(3)];
    let mut coarse = vec![vec![0.0; COARSE_BINS.pow(3)]; GRID * GRID];
    for v in 0..h {
        for u in 0..w {
            if !live(u, v) {
                continue;
            }
            let p = image.get(u, v);
            color[color_bin(p, COLOR_BINS)] += 1.0;
            coarse[cell_of(u, v)][color_bin(p, COARSE_BINS)] += 1.0;
        }
    }

    let gray = image.gray();
    let mut orient_global = vec![0.0; ORIENT_BINS];
    let mut orient = vec![vec![0.0; ORIENT_BINS]; GRID * GRID];
    for v in 1..h.saturating_sub(1) {
        for u in 1..w.saturating_sub(1) {
            if !(live(u, v) && live(u - 1, v) && live(u + 1, v) && live(u, v - 1) && live(u, v + 1)) {
                continue;
            }
            let gx = gray[v * w + u + 1] - gray[v * w + u - 1];
            let gy = gray[(v + 1) * w + u] - gray[(v - 1) * w + u];
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
            let bin = ((angle / std::f64::consts::TAU * ORIENT_BINS as f64) as usize).min(ORIENT_BINS - 1);
            orient_global[bin] += mag;
            orient[cell_of(u, v)][bin] += mag;
        }
    }

    let mut raw = Vec::with_capacity(DESCRIPTOR_DIM);
    push_block(&mut raw, &color, 1.0);
    push_block(&mut raw, &orient_global, 0.5);
    for cell in &orient {
        push_block(&mut raw, cell, 0.25);
    }
    for cell in &coarse {
        push_block(&mut raw, cell, 0.25);
    }
    debug_assert_eq!(raw.len(), DESCRIPTOR_DIM);
    Descriptor::from_raw(&raw)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry {
    pub id: u64,
    pub scene_id: u32,
    pub descriptor: Descriptor,
}

/// Immutable flat descriptor store with exact cosine search.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorIndex {
    entries: Vec<IndexEntry>,
    dim: usize,
    /// Ids excluded at build time because their descriptor was invalid.
    skipped: Vec<u64>,
}

/// One pool item offered to [`build_index`].
pub enum PoolItem<'a> {
    Descriptor { id: u64, scene_id: u32, descriptor: Descriptor },
    Image { id: u64, scene_id: u32, image: &'a ImageBuffer },
}

impl PoolItem<'_> {
    fn id(&self) -> u64 {
        match self {
            PoolItem::Descriptor { id, .. } | PoolItem::Image { id, .. } => *id,
        }
    }
}

pub fn build_index(pool: Vec<PoolItem<'_>>) -> Result<DescriptorIndex> {
    if pool.is_empty() {
        return Err(RadError::input("descriptor pool is empty"));
    }
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(pool.len());
    let mut skipped = Vec::new();
    let mut dim = None;
    for item in pool {
        let id = item.id();
        if !seen.insert(id) {
            return Err(RadError::input(format!("duplicate pool id {id}")));
        }
        let (scene_id, descriptor) = match item {
            PoolItem::Descriptor { scene_id, descriptor, .. } => (scene_id, descriptor),
            PoolItem::Image { scene_id, image, .. } => (scene_id, compute_descriptor(image)),
        };
        match dim {
            None => dim = Some(descriptor.dim()),
            Some(d) if d != descriptor.dim() => {
                return Err(RadError::input(format!(
                    "pool id {id} has dimension {} but the pool uses {d}",
                    descriptor.dim()
                )))
            }
            _ => {}
        }
        if descriptor.valid {
            entries.push(IndexEntry {
                id,
                scene_id,
                descriptor,
            });
        } else {
            skipped.push(id);
        }
    }
    Ok(DescriptorIndex {
        entries,
        dim: dim.unwrap_or(0),
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KnnStatus {
    Ok,
    /// Every entry was excluded (same scene) or the index is empty.
    NoEligible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnHit {
    pub id: u64,
    pub scene_id: u32,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnResult {
    pub hits: Vec<KnnHit>,
    pub status: KnnStatus,
}

impl KnnResult {
    pub fn ids(&self) -> Vec<u64> {
        self.hits.iter().map(|h| h.id).collect()
    }
}

const INDEX_MAGIC: &[u8; 4] = b"RADD";
const INDEX_VERSION: u32 = 1;

impl DescriptorIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn skipped(&self) -> &[u64] {
        &self.skipped
    }

    pub fn get(&self, id: u64) -> Option<&IndexEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// The `m` most similar entries outside `exclude_scene`, by descending
    /// cosine similarity with ties broken by ascending id.
    pub fn knn_query(&self, query: &Descriptor, m: usize, exclude_scene: Option<u32>) -> Result<KnnResult> {
        if !query.valid {
            return Err(RadError::input("query descriptor is invalid"));
        }
        if m == 0 {
            return Err(RadError::input("KNN needs M >= 1"));
        }
        if query.dim() != self.dim && !self.entries.is_empty() {
            return Err(RadError::input(format!(
                "query dimension {} != index dimension {}",
                query.dim(),
                self.dim
            )));
        }
        let mut hits: Vec<KnnHit> = self
            .entries
            .iter()
            .filter(|e| Some(e.scene_id) != exclude_scene)
            .map(|e| KnnHit {
                id: e.id,
                scene_id: e.scene_id,
                similarity: cosine(query, &e.descriptor),
            })
            .collect();
        if hits.is_empty() {
            return Ok(KnnResult {
                hits,
                status: KnnStatus::NoEligible,
            });
        }
        let order = |a: &KnnHit, b: &KnnHit| b.similarity.total_cmp(&a.similarity).then(a.id.cmp(&b.id));
        if hits.len() > m {
            hits.select_nth_unstable_by(m - 1, order);
            hits.truncate(m);
        }
        hits.sort_by(order);
        Ok(KnnResult {
            hits,
            status: KnnStatus::Ok,
        })
    }

    /// Little-endian: magic, version, count, dim, `count×dim` f32 row-major,
    /// `count` u64 ids, `count` u32 scene ids.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&INDEX_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for e in &self.entries {
            for x in &e.descriptor.vector {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        for e in &self.entries {
            w.write_all(&e.id.to_le_bytes())?;
        }
        for e in &self.entries {
            w.write_all(&e.scene_id.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, origin: &str) -> Result<Self> {
        let parse_err = |message: String| RadError::Parse {
            location: origin.to_string(),
            message,
        };
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| parse_err(e.to_string()))?;
        let mut cur = ByteCursor { buf: &buf, pos: 0 };
        let magic = cur.take(4).ok_or_else(|| parse_err("truncated header".into()))?;
        if magic != INDEX_MAGIC {
            return Err(parse_err("bad magic, expected RADD".into()));
        }
        let version = cur.u32().ok_or_else(|| parse_err("truncated header".into()))?;
        if version != INDEX_VERSION {
            return Err(parse_err(format!("unsupported index version {version}")));
        }
        let count = cur.u32().ok_or_else(|| parse_err("truncated header".into()))? as usize;
        let dim = cur.u32().ok_or_else(|| parse_err("truncated header".into()))? as usize;
        let mut vectors = Vec::with_capacity(count);
        for i in 0..count {
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                v.push(cur.f32().ok_or_else(|| parse_err(format!("truncated descriptor {i}")))?);
            }
            vectors.push(v);
        }
        let mut ids = Vec::with_capacity(count);
        for i in 0..count {
            ids.push(cur.u64().ok_or_else(|| parse_err(format!("truncated id {i}")))?);
        }
        let mut scenes = Vec::with_capacity(count);
        for i in 0..count {
            scenes.push(cur.u32().ok_or_else(|| parse_err(format!("truncated scene id {i}")))?);
        }
        if cur.pos != buf.len() {
            return Err(parse_err(format!("{} trailing bytes", buf.len() - cur.pos)));
        }
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(count);
        for ((vector, id), scene_id) in vectors.into_iter().zip(ids).zip(scenes) {
            if !seen.insert(id) {
                return Err(parse_err(format!("duplicate id {id}")));
            }
            entries.push(IndexEntry {
                id,
                scene_id,
                descriptor: Descriptor { vector, valid: true },
            });
        }
        Ok(Self {
            entries,
            dim,
            skipped: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| RadError::io(path, e))?);
        self.write_to(&mut f)
            .and_then(|_| f.flush())
            .map_err(|e| RadError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| RadError::io(path, e))?;
        Self::read_from(&mut f, &path.display().to_string())
    }
}

struct ByteCursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self) -> Option<f32> {
        self.take(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Source of pool samples by id.
pub trait SampleStore {
    fn fetch(&self, id: u64) -> Result<ContextSample>;
}

impl SampleStore for BTreeMap<u64, ContextSample> {
    fn fetch(&self, id: u64) -> Result<ContextSample> {
        self.get(&id)
            .cloned()
            .ok_or_else(|| RadError::input(format!("pool sample {id} not in store")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Query with the image masked to its uncertain segments.
    UncertaintyMasked,
    /// Query with the whole image (global descriptor KNN).
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub noise: NoiseConfig,
    /// Uncertainty threshold `h`.
    pub threshold: f64,
    /// Percentage `q` of a segment's pixels that must exceed `h`.
    pub percent: f64,
    /// Number of context samples `M`.
    pub m: usize,
    pub mode: QueryMode,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            noise: NoiseConfig::default(),
            threshold: 0.05,
            percent: 20.0,
            m: 4,
            mode: QueryMode::UncertaintyMasked,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalStatus {
    Ok,
    /// Every pool item shares the query's scene.
    NoEligible,
}

#[derive(Debug, Clone)]
pub struct RetrievalOutcome {
    pub contexts: Vec<ContextSample>,
    pub hits: Vec<KnnHit>,
    pub uncertainty: Option<UncertaintyMap>,
    pub kept_segments: BTreeSet<u32>,
    /// Set when no segment was kept and the unmasked image served as query.
    pub fell_back_to_unmasked: bool,
    pub query: ImageBuffer,
    pub status: RetrievalStatus,
}

/// Uncertainty → kept segments → masked query → descriptor → KNN excluding
/// the query's own scene, returning the pool samples in rank order.
#[allow(clippy::too_many_arguments)]
pub fn retrieve_context(
    image: &ImageBuffer,
    scene_id: u32,
    model: &dyn DepthModel,
    seg: &SegmentMap,
    index: &DescriptorIndex,
    store: &dyn SampleStore,
    cfg: &RetrievalConfig,
    rng: &mut SeededRng,
) -> Result<RetrievalOutcome> {
    let (uncertainty, kept, query, fell_back) = match cfg.mode {
        QueryMode::Global => (None, BTreeSet::new(), image.clone(), false),
        QueryMode::UncertaintyMasked => {
            let u = uncertainty_map(model, image, &cfg.noise, rng)?;
            let kept = keep_segments(&u, seg, cfg.threshold, cfg.percent)?;
            let masked = mask_image(image, seg, &kept)?;
            if kept.is_empty() || masked.is_all_zero() {
                (Some(u), kept, image.clone(), true)
            } else {
                (Some(u), kept, masked, false)
            }
        }
    };
    let mut descriptor = compute_descriptor(&query);
    if !descriptor.valid {
        descriptor = compute_descriptor(image);
    }
    if !descriptor.valid || index.is_empty() {
        return Ok(RetrievalOutcome {
            contexts: Vec::new(),
            hits: Vec::new(),
            uncertainty,
            kept_segments: kept,
            fell_back_to_unmasked: fell_back,
            query,
            status: RetrievalStatus::NoEligible,
        });
    }
    let knn = index.knn_query(&descriptor, cfg.m.max(1), Some(scene_id))?;
    let status = match knn.status {
        KnnStatus::Ok => RetrievalStatus::Ok,
        KnnStatus::NoEligible => RetrievalStatus::NoEligible,
    };
    let hits: Vec<KnnHit> = knn.hits.into_iter().take(cfg.m).collect();
    let contexts = hits
        .iter()
        .map(|h| {
            store.fetch(h.id).map(|mut c| {
                c.provenance = Provenance::Retrieved;
                c
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalOutcome {
        contexts,
        hits,
        uncertainty,
        kept_segments: kept,
        fell_back_to_unmasked: fell_back,
        query,
        status,
    })
}
