//! Pixel correspondences between an input and its context images, the JSON
//! interchange format, and their conversion to per-token match sets.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RadError, Result};
use crate::image::ImageBuffer;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub ua: f64,
    pub va: f64,
    pub ub: f64,
    pub vb: f64,
    pub score: f64,
}

/// Matches from image `a` (input) to image `b` (context). Sizes are `(width, height)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Match>,
    pub image_a_size: (usize, usize),
    pub image_b_size: (usize, usize),
}

impl CorrespondenceSet {
    pub fn new(image_a_size: (usize, usize), image_b_size: (usize, usize)) -> Self {
        Self {
            pairs: Vec::new(),
            image_a_size,
            image_b_size,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Index and reason of the first pair violating the bounds or score range.
    pub fn first_violation(&self) -> Option<(usize, String)> {
        let inside = |u: f64, v: f64, (w, h): (usize, usize)| {
            u.is_finite() && v.is_finite() && u >= 0.0 && v >= 0.0 && u < w as f64 && v < h as f64
        };
        self.pairs.iter().enumerate().find_map(|(i, m)| {
            if !inside(m.ua, m.va, self.image_a_size) {
                Some((i, format!("image-a coordinate ({}, {}) outside {:?}", m.ua, m.va, self.image_a_size)))
            } else if !inside(m.ub, m.vb, self.image_b_size) {
                Some((i, format!("image-b coordinate ({}, {}) outside {:?}", m.ub, m.vb, self.image_b_size)))
            } else if !(0.0..=1.0).contains(&m.score) {
                Some((i, format!("score {} outside [0, 1]", m.score)))
            } else {
                None
            }
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MatchFile {
    pairs: Vec<[f64; 5]>,
}

/// Writes `{"pairs": [[u_a, v_a, u_b, v_b, score], ...]}`.
pub fn write_matches(path: &Path, set: &CorrespondenceSet) -> Result<()> {
    let file = MatchFile {
        pairs: set
            .pairs
            .iter()
            .map(|m| [m.ua, m.va, m.ub, m.vb, m.score])
            .collect(),
    };
    let text = serde_json::to_string(&file).expect("match file serializes");
    std::fs::write(path, text).map_err(|e| RadError::io(path, e))
}

pub fn parse_matches(
    text: &str,
    origin: &str,
    image_a_size: (usize, usize),
    image_b_size: (usize, usize),
) -> Result<CorrespondenceSet> {
    let file: MatchFile = serde_json::from_str(text).map_err(|e| RadError::Parse {
        location: format!("{origin}:{}:{}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let set = CorrespondenceSet {
        pairs: file
            .pairs
            .into_iter()
            .map(|[ua, va, ub, vb, score]| Match {
                ua,
                va,
                ub,
                vb,
                score,
            })
            .collect(),
        image_a_size,
        image_b_size,
    };
    if let Some((i, why)) = set.first_violation() {
        return Err(RadError::Parse {
            location: format!("{origin}: pairs[{i}]"),
            message: why,
        });
    }
    Ok(set)
}

/// Loads an externally computed match file and bounds-checks every pair.
pub fn load_matches(
    path: &Path,
    image_a_size: (usize, usize),
    image_b_size: (usize, usize),
) -> Result<CorrespondenceSet> {
    let text = std::fs::read_to_string(path).map_err(|e| RadError::io(path, e))?;
    parse_matches(&text, &path.display().to_string(), image_a_size, image_b_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    /// Half-width of the square correlation window.
    pub window_radius: usize,
    pub max_keypoints: usize,
    /// Minimum gradient magnitude (luma units per pixel) for a keypoint.
    pub min_gradient: f64,
    /// Lowe ratio on descriptor distances.
    pub ratio: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            window_radius: 3,
            max_keypoints: 256,
            min_gradient: 0.02,
            ratio: 0.8,
        }
    }
}

struct Keypoints {
    coords: Vec<(usize, usize)>,
    /// Zero-mean, unit-norm RGB windows, one row per keypoint.
    descriptors: Vec<Vec<f64>>,
}

fn gradient_magnitude(img: &ImageBuffer) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    let g = img.gray();
    let mut mag = vec![0.0; w * h];
    for v in 1..h.saturating_sub(1) {
        for u in 1..w.saturating_sub(1) {
            let gx = 0.5 * (g[v * w + u + 1] - g[v * w + u - 1]);
            let gy = 0.5 * (g[(v + 1) * w + u] - g[(v - 1) * w + u]);
            mag[v * w + u] = (gx * gx + gy * gy).sqrt();
        }
    }
    mag
}

fn detect(img: &ImageBuffer, cfg: &MatchConfig) -> Keypoints {
    let (w, h) = (img.width(), img.height());
    let r = cfg.window_radius.max(1);
    let mag = gradient_magnitude(img);
    let mut candidates = Vec::new();
    if w > 2 * r && h > 2 * r {
        for v in r..h - r {
            for u in r..w - r {
                let m = mag[v * w + u];
                if m < cfg.min_gradient {
                    continue;
                }
                // Strict maximum against earlier neighbours, non-strict against later
                // ones, so plateaus yield exactly one keypoint.
                let mut is_max = true;
                'nms: for dv in -1isize..=1 {
                    for du in -1isize..=1 {
                        if du == 0 && dv == 0 {
                            continue;
                        }
                        let j = (v as isize + dv) as usize * w + (u as isize + du) as usize;
                        let earlier = dv < 0 || (dv == 0 && du < 0);
                        if (earlier && mag[j] >= m) || (!earlier && mag[j] > m) {
                            is_max = false;
                            break 'nms;
                        }
                    }
                }
                if is_max {
                    candidates.push((m, u, v));
                }
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.2, a.1).cmp(&(b.2, b.1))));
    let mut kp = Keypoints {
        coords: Vec::new(),
        descriptors: Vec::new(),
    };
    let side = 2 * r + 1;
    for &(_, u, v) in &candidates {
        if kp.coords.len() >= cfg.max_keypoints {
            break;
        }
        let mut desc = Vec::with_capacity(side * side * 3);
        for y in v - r..=v + r {
            for x in u - r..=u + r {
                desc.extend_from_slice(&img.get(x, y));
            }
        }
        let mean = desc.iter().sum::<f64>() / desc.len() as f64;
        desc.iter_mut().for_each(|x| *x -= mean);
        let norm = desc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-9 {
            continue;
        }
        desc.iter_mut().for_each(|x| *x /= norm);
        kp.coords.push((u, v));
        kp.descriptors.push(desc);
    }
    kp
}

/// Desk-scale point matcher: gradient-maximum keypoints, normalized
/// cross-correlation of RGB windows, mutual nearest neighbours and a Lowe
/// ratio test. Scores are the (clamped) correlation coefficients.
pub fn match_desk(a: &ImageBuffer, b: &ImageBuffer, cfg: &MatchConfig) -> CorrespondenceSet {
    let mut out = CorrespondenceSet::new((a.width(), a.height()), (b.width(), b.height()));
    let ka = detect(a, cfg);
    let kb = detect(b, cfg);
    if ka.coords.is_empty() || kb.coords.is_empty() {
        return out;
    }
    let nb = kb.coords.len();
    // ncc[i * nb + j]
    let mut ncc = vec![0.0; ka.coords.len() * nb];
    for (i, da) in ka.descriptors.iter().enumerate() {
        for (j, db) in kb.descriptors.iter().enumerate() {
            ncc[i * nb + j] = da.iter().zip(db).map(|(x, y)| x * y).sum();
        }
    }
    let dist = |c: f64| (2.0 - 2.0 * c).max(0.0).sqrt();
    let mut best_a_for_b = vec![(f64::NEG_INFINITY, usize::MAX); nb];
    for i in 0..ka.coords.len() {
        for j in 0..nb {
            let c = ncc[i * nb + j];
            if c > best_a_for_b[j].0 {
                best_a_for_b[j] = (c, i);
            }
        }
    }
    for i in 0..ka.coords.len() {
        let row = &ncc[i * nb..(i + 1) * nb];
        let (mut best, mut second) = ((f64::NEG_INFINITY, usize::MAX), f64::NEG_INFINITY);
        for (j, &c) in row.iter().enumerate() {
            if c > best.0 {
                second = best.0;
                best = (c, j);
            } else if c > second {
                second = c;
            }
        }
        let j = best.1;
        if best_a_for_b[j].1 != i {
            continue;
        }
        if second.is_finite() && dist(best.0) >= cfg.ratio * dist(second) {
            continue;
        }
        let (ua, va) = ka.coords[i];
        let (ub, vb) = kb.coords[j];
        out.pairs.push(Match {
            ua: ua as f64,
            va: va as f64,
            ub: ub as f64,
            vb: vb as f64,
            score: best.0.clamp(0.0, 1.0),
        });
    }
    out
}

/// Number of keypoints [`match_desk`] detects in `img`.
pub fn keypoint_count(img: &ImageBuffer, cfg: &MatchConfig) -> usize {
    detect(img, cfg).coords.len()
}

/// Position on a patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenCoord {
    pub row: usize,
    pub col: usize,
}

/// Patch grid of `rows × cols` tokens; token index is `row * cols + col`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
}

impl TokenGrid {
    /// Ceiling grid covering a `width × height` image.
    pub fn covering(width: usize, height: usize, patch: usize) -> Self {
        Self {
            rows: height.div_ceil(patch),
            cols: width.div_ceil(patch),
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, t: TokenCoord) -> usize {
        t.row * self.cols + t.col
    }

    pub fn coord(&self, index: usize) -> TokenCoord {
        TokenCoord {
            row: index / self.cols,
            col: index % self.cols,
        }
    }
}

/// Token containing pixel `(u, v)`.
pub fn pixel_to_token(u: f64, v: f64, patch: usize) -> TokenCoord {
    TokenCoord {
        row: (v.max(0.0) / patch as f64).floor() as usize,
        col: (u.max(0.0) / patch as f64).floor() as usize,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RawTokenPair {
    pub input: TokenCoord,
    pub context: TokenCoord,
}

/// Quantizes matched pixels to token coordinates on both sides, after scaling
/// each side's pixel coordinates into network resolution by `(sx, sy)`.
/// Duplicates collapse; output is sorted.
pub fn pixels_to_tokens_scaled(
    matches: &CorrespondenceSet,
    patch: usize,
    scale_a: (f64, f64),
    scale_b: (f64, f64),
    grid_a: TokenGrid,
    grid_b: TokenGrid,
) -> Vec<RawTokenPair> {
    let clip = |t: TokenCoord, g: TokenGrid| TokenCoord {
        row: t.row.min(g.rows.saturating_sub(1)),
        col: t.col.min(g.cols.saturating_sub(1)),
    };
    let set: BTreeSet<RawTokenPair> = matches
        .pairs
        .iter()
        .map(|m| RawTokenPair {
            input: clip(pixel_to_token(m.ua * scale_a.0, m.va * scale_a.1, patch), grid_a),
            context: clip(pixel_to_token(m.ub * scale_b.0, m.vb * scale_b.1, patch), grid_b),
        })
        .collect();
    set.into_iter().collect()
}

/// [`pixels_to_tokens_scaled`] for matches already at network resolution.
pub fn pixels_to_tokens(matches: &CorrespondenceSet, patch: usize) -> Vec<RawTokenPair> {
    let (wa, ha) = matches.image_a_size;
    let (wb, hb) = matches.image_b_size;
    pixels_to_tokens_scaled(
        matches,
        patch,
        (1.0, 1.0),
        (1.0, 1.0),
        TokenGrid::covering(wa, ha, patch),
        TokenGrid::covering(wb, hb, patch),
    )
}

/// Context token reference: `(context image slot, token index)`.
pub type ContextTokenRef = (usize, usize);

/// `matching_tokens(j)` for every input token `j`, sorted and duplicate-free.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMatchMap {
    pub input_grid: TokenGrid,
    pub context_grid: TokenGrid,
    pub num_contexts: usize,
    sets: Vec<Vec<ContextTokenRef>>,
}

impl TokenMatchMap {
    /// A map with no matches; matched attention then reduces to self-attention.
    pub fn empty(input_grid: TokenGrid, context_grid: TokenGrid, num_contexts: usize) -> Self {
        Self {
            input_grid,
            context_grid,
            num_contexts,
            sets: vec![Vec::new(); input_grid.len()],
        }
    }

    /// Every input token matched to every context token (full-context attention).
    pub fn full(input_grid: TokenGrid, context_grid: TokenGrid, num_contexts: usize) -> Self {
        let all: Vec<ContextTokenRef> = (0..num_contexts)
            .flat_map(|c| (0..context_grid.len()).map(move |t| (c, t)))
            .collect();
        Self {
            input_grid,
            context_grid,
            num_contexts,
            sets: vec![all; input_grid.len()],
        }
    }

    /// Builds from explicit per-token sets, validating every reference.
    pub fn from_sets(
        input_grid: TokenGrid,
        context_grid: TokenGrid,
        num_contexts: usize,
        mut sets: Vec<Vec<ContextTokenRef>>,
    ) -> Result<Self> {
        if sets.len() != input_grid.len() {
            return Err(RadError::input(format!(
                "{} match sets for {} input tokens",
                sets.len(),
                input_grid.len()
            )));
        }
        for (j, s) in sets.iter_mut().enumerate() {
            s.sort_unstable();
            s.dedup();
            if let Some(&(c, t)) = s
                .iter()
                .find(|&&(c, t)| c >= num_contexts || t >= context_grid.len())
            {
                return Err(RadError::input(format!(
                    "token {j} references context {c} token {t} outside {num_contexts} x {}",
                    context_grid.len()
                )));
            }
        }
        Ok(Self {
            input_grid,
            context_grid,
            num_contexts,
            sets,
        })
    }

    pub fn matching_tokens(&self, j: usize) -> &[ContextTokenRef] {
        &self.sets[j]
    }

    pub fn sets(&self) -> &[Vec<ContextTokenRef>] {
        &self.sets
    }

    pub fn total_matches(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    /// Context tokens referenced by at least one input token.
    pub fn referenced(&self) -> BTreeSet<ContextTokenRef> {
        self.sets.iter().flatten().copied().collect()
    }

    /// Same matches, restricted to the first `m` context slots.
    pub fn truncated(&self, m: usize) -> Self {
        Self {
            input_grid: self.input_grid,
            context_grid: self.context_grid,
            num_contexts: m.min(self.num_contexts),
            sets: self
                .sets
                .iter()
                .map(|s| s.iter().copied().filter(|&(c, _)| c < m).collect())
                .collect(),
        }
    }
}

/// Unites, over all context slots, the `(2r+1)²` neighbourhood (clipped at the
/// grid border) around each matched context token. `raw[c]` holds the raw
/// pairs for context slot `c`.
pub fn expand_matching_tokens(
    raw: &[Vec<RawTokenPair>],
    radius: usize,
    input_grid: TokenGrid,
    context_grid: TokenGrid,
    num_contexts: usize,
) -> Result<TokenMatchMap> {
    if raw.len() > num_contexts {
        return Err(RadError::input(format!(
            "{} context match lists for M = {num_contexts}",
            raw.len()
        )));
    }
    let mut sets: Vec<BTreeSet<ContextTokenRef>> = vec![BTreeSet::new(); input_grid.len()];
    let r = radius as isize;
    for (slot, pairs) in raw.iter().enumerate() {
        for p in pairs {
            if p.input.row >= input_grid.rows || p.input.col >= input_grid.cols {
                return Err(RadError::input(format!("input token {:?} outside grid", p.input)));
            }
            let j = input_grid.index(p.input);
            for dr in -r..=r {
                for dc in -r..=r {
                    let row = p.context.row as isize + dr;
                    let col = p.context.col as isize + dc;
                    if row < 0
                        || col < 0
                        || row >= context_grid.rows as isize
                        || col >= context_grid.cols as isize
                    {
                        continue;
                    }
                    let t = row as usize * context_grid.cols + col as usize;
                    sets[j].insert((slot, t));
                }
            }
        }
    }
    Ok(TokenMatchMap {
        input_grid,
        context_grid,
        num_contexts,
        sets: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set_of(pairs: &[(f64, f64, f64, f64)]) -> CorrespondenceSet {
        CorrespondenceSet {
            pairs: pairs
                .iter()
                .map(|&(ua, va, ub, vb)| Match {
                    ua,
                    va,
                    ub,
                    vb,
                    score: 1.0,
                })
                .collect(),
            image_a_size: (56, 56),
            image_b_size: (56, 56),
        }
    }

    #[test]
    fn pixel_token_floor_division() {
        assert_eq!(pixel_to_token(0.0, 0.0, 14), TokenCoord { row: 0, col: 0 });
        assert_eq!(pixel_to_token(14.0, 27.0, 14), TokenCoord { row: 1, col: 1 });
    }

    #[test]
    fn duplicate_token_pairs_collapse() {
        let s = set_of(&[(1.0, 1.0, 30.0, 30.0), (3.0, 2.0, 29.0, 31.0)]);
        let raw = pixels_to_tokens(&s, 14);
        assert_eq!(raw.len(), 1);
    }

    #[test]
    fn radius_zero_is_exact_match() {
        let g = TokenGrid { rows: 4, cols: 4 };
        let raw = vec![vec![RawTokenPair {
            input: TokenCoord { row: 1, col: 2 },
            context: TokenCoord { row: 3, col: 0 },
        }]];
        let map = expand_matching_tokens(&raw, 0, g, g, 1).unwrap();
        assert_eq!(map.matching_tokens(6), &[(0, 12)]);
        assert_eq!(map.total_matches(), 1);
    }

    #[test]
    fn corner_neighbourhood_is_clipped() {
        let g = TokenGrid { rows: 4, cols: 4 };
        let raw = vec![vec![RawTokenPair {
            input: TokenCoord { row: 0, col: 0 },
            context: TokenCoord { row: 0, col: 0 },
        }]];
        let map = expand_matching_tokens(&raw, 1, g, g, 1).unwrap();
        assert_eq!(map.matching_tokens(0), &[(0, 0), (0, 1), (0, 4), (0, 5)]);
    }

    #[test]
    fn from_sets_rejects_out_of_grid() {
        let g = TokenGrid { rows: 2, cols: 2 };
        let err = TokenMatchMap::from_sets(g, g, 1, vec![vec![(0, 4)], vec![], vec![], vec![]]);
        assert!(err.is_err());
        let err = TokenMatchMap::from_sets(g, g, 1, vec![vec![(1, 0)], vec![], vec![], vec![]]);
        assert!(err.is_err());
    }

    #[test]
    fn parse_reports_offending_pair() {
        let text = r#"{"pairs": [[1,1,1,1,0.5],[1,1,80,1,0.5]]}"#;
        let err = parse_matches(text, "m.json", (56, 56), (56, 56)).unwrap_err();
        match err {
            RadError::Parse { location, .. } => assert!(location.contains("pairs[1]")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_reports_json_location() {
        let err = parse_matches("{\"pairs\": [[1,2,", "m.json", (8, 8), (8, 8)).unwrap_err();
        assert!(matches!(err, RadError::Parse { .. }));
    }

    #[test]
    fn empty_pairs_parse_to_empty_set() {
        let s = parse_matches(r#"{"pairs": []}"#, "m", (4, 4), (4, 4)).unwrap();
        assert!(s.is_empty());
    }
}
