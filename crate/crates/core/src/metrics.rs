//! Standard depth metrics, class-masked evaluation and the
//! underrepresented-class rule.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{RadError, Result};
use crate::image::{ensure_same_dims as ensure_dims, DepthMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub abs_rel: f64,
    pub rms: f64,
    pub rms_log: f64,
    pub log10: f64,
    pub pixel_count: usize,
}

impl MetricsReport {
    pub fn column(&self, name: &str) -> Option<f64> {
        Some(match name {
            "delta1" => self.delta1,
            "delta2" => self.delta2,
            "delta3" => self.delta3,
            "abs_rel" => self.abs_rel,
            "rms" => self.rms,
            "rms_log" => self.rms_log,
            "log10" => self.log10,
            _ => return None,
        })
    }
}

pub const METRIC_COLUMNS: [&str; 7] = ["delta1", "delta2", "delta3", "abs_rel", "rms", "rms_log", "log10"];

/// Running pixel-weighted sums; merging two accumulators equals evaluating
/// the union of their pixels.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricsAccumulator {
    n: usize,
    within: [usize; 3],
    abs_rel: f64,
    sq: f64,
    sq_log: f64,
    log10: f64,
}

impl MetricsAccumulator {
    pub fn push(&mut self, pred: f64, gt: f64) {
        let ratio = (pred / gt).max(gt / pred);
        for (n, w) in self.within.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(n as i32 + 1) {
                *w += 1;
            }
        }
        self.n += 1;
        self.abs_rel += (pred - gt).abs() / gt;
        self.sq += (pred - gt) * (pred - gt);
        let dl = pred.ln() - gt.ln();
        self.sq_log += dl * dl;
        self.log10 += (pred.log10() - gt.log10()).abs();
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.n += other.n;
        for i in 0..3 {
            self.within[i] += other.within[i];
        }
        self.abs_rel += other.abs_rel;
        self.sq += other.sq;
        self.sq_log += other.sq_log;
        self.log10 += other.log10;
    }

    pub fn pixel_count(&self) -> usize {
        self.n
    }

    pub fn report(&self) -> Option<MetricsReport> {
        if self.n == 0 {
            return None;
        }
        let n = self.n as f64;
        Some(MetricsReport {
            delta1: self.within[0] as f64 / n,
            delta2: self.within[1] as f64 / n,
            delta3: self.within[2] as f64 / n,
            abs_rel: self.abs_rel / n,
            rms: (self.sq / n).sqrt(),
            rms_log: (self.sq_log / n).sqrt(),
            log10: self.log10 / n,
            pixel_count: self.n,
        })
    }
}

/// Accumulates over `mask ∧ valid(gt) ∧ valid(pred)`.
pub fn accumulate(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<MetricsAccumulator> {
    ensure_dims("prediction vs ground truth", gt.dims(), pred.dims())?;
    if mask.len() != gt.len() {
        return Err(RadError::input(format!(
            "evaluation mask has {} entries for {} pixels",
            mask.len(),
            gt.len()
        )));
    }
    let mut acc = MetricsAccumulator::default();
    for (i, &m) in mask.iter().enumerate() {
        if let (true, Some(p), Some(g)) = (m, pred.get_index(i), gt.get_index(i)) {
            acc.push(p, g);
        }
    }
    Ok(acc)
}

pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<MetricsReport> {
    accumulate(pred, gt, mask)?.report().ok_or(RadError::EmptyEvaluation)
}

/// Per-pixel semantic class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl ClassMap {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(RadError::input("class labels do not fit the raster"));
        }
        Ok(Self { width, height, labels })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn classes(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().collect()
    }

    pub fn mask_of(&self, targets: &BTreeSet<u32>) -> Vec<bool> {
        self.labels.iter().map(|l| targets.contains(l)).collect()
    }
}

pub fn class_accumulate(
    pred: &DepthMap,
    gt: &DepthMap,
    class_map: &ClassMap,
    targets: &BTreeSet<u32>,
) -> Result<MetricsAccumulator> {
    ensure_dims("class map vs ground truth", gt.dims(), class_map.dims())?;
    accumulate(pred, gt, &class_map.mask_of(targets))
}

/// Metrics restricted to pixels of `targets`; `None` flags an empty region.
pub fn class_masked_eval(
    pred: &DepthMap,
    gt: &DepthMap,
    class_map: &ClassMap,
    targets: &BTreeSet<u32>,
) -> Result<Option<MetricsReport>> {
    Ok(class_accumulate(pred, gt, class_map, targets)?.report())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStat {
    /// Fraction of training images containing the class.
    pub image_frequency: f64,
    /// Number of training images containing the class.
    pub occurrence_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub classes: BTreeMap<u32, ClassStat>,
    pub num_images: usize,
}

impl ClassStats {
    pub fn from_class_maps<'a>(maps: impl IntoIterator<Item = &'a ClassMap>) -> Self {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        let mut num_images = 0;
        for m in maps {
            num_images += 1;
            for c in m.classes() {
                *counts.entry(c).or_default() += 1;
            }
        }
        let classes = counts
            .into_iter()
            .map(|(c, n)| {
                (
                    c,
                    ClassStat {
                        image_frequency: n as f64 / num_images as f64,
                        occurrence_count: n,
                    },
                )
            })
            .collect();
        Self { classes, num_images }
    }
}

pub const DEFAULT_FREQUENCY_CAP: f64 = 0.10;
pub const DEFAULT_MIN_OCCURRENCES: usize = 5;

/// Classes with `image_frequency < freq_cap` and `occurrence_count > min_occurrences`.
pub fn select_underrepresented(stats: &ClassStats, freq_cap: f64, min_occurrences: usize) -> BTreeSet<u32> {
    stats
        .classes
        .iter()
        .filter(|(_, s)| s.image_frequency < freq_cap && s.occurrence_count > min_occurrences)
        .map(|(&c, _)| c)
        .collect()
}

/// Pixel-weighted aggregate plus the mean of per-image reports.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Aggregator {
    total: MetricsAccumulator,
    per_image: Vec<MetricsReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub pixel_weighted: MetricsReport,
    pub per_image_mean: MetricsReport,
    pub images: usize,
}

impl Aggregator {
    /// Adds one image; empty accumulators are skipped.
    pub fn add(&mut self, acc: &MetricsAccumulator) {
        if let Some(r) = acc.report() {
            self.total.merge(acc);
            self.per_image.push(r);
        }
    }

    pub fn images(&self) -> usize {
        self.per_image.len()
    }

    pub fn finish(&self) -> Option<AggregateReport> {
        let pixel_weighted = self.total.report()?;
        let k = self.per_image.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| self.per_image.iter().map(f).sum::<f64>() / k;
        Some(AggregateReport {
            pixel_weighted,
            per_image_mean: MetricsReport {
                delta1: mean(|r| r.delta1),
                delta2: mean(|r| r.delta2),
                delta3: mean(|r| r.delta3),
                abs_rel: mean(|r| r.abs_rel),
                rms: mean(|r| r.rms),
                rms_log: mean(|r| r.rms_log),
                log10: mean(|r| r.log10),
                pixel_count: self.total.pixel_count(),
            },
            images: self.per_image.len(),
        })
    }
}

/// Clamps valid predictions into the evaluation depth range.
pub fn clamp_prediction(pred: &DepthMap, min_depth: f64, max_depth: f64) -> DepthMap {
    let mut out = pred.clone();
    for v in 0..pred.height() {
        for u in 0..pred.width() {
            if let Some(d) = pred.get(u, v) {
                out.set(u, v, d.clamp(min_depth, max_depth));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt() -> DepthMap {
        DepthMap::from_fn(5, 4, |u, v| Some(0.5 + 0.3 * u as f64 + 0.7 * v as f64))
    }

    #[test]
    fn perfect_and_uniform_ratio() {
        let g = gt();
        let all = vec![true; g.len()];
        let r = depth_metrics(&g, &g, &all).unwrap();
        assert_eq!((r.delta1, r.delta2, r.delta3), (1.0, 1.0, 1.0));
        assert_eq!((r.abs_rel, r.rms, r.rms_log, r.log10), (0.0, 0.0, 0.0, 0.0));
        let r = depth_metrics(&g.scaled(1.3), &g, &all).unwrap();
        assert_eq!((r.delta1, r.delta2, r.delta3), (0.0, 1.0, 1.0));
        assert!((r.abs_rel - 0.3).abs() < 1e-12);
        assert!((r.log10 - 1.3f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let g = gt();
        assert!(matches!(
            depth_metrics(&g, &g, &vec![false; g.len()]),
            Err(RadError::EmptyEvaluation)
        ));
    }

    #[test]
    fn selection_rule_is_strict() {
        let mut stats = ClassStats::default();
        let stat = |f, n| ClassStat {
            image_frequency: f,
            occurrence_count: n,
        };
        stats.classes.insert(1, stat(0.05, 6));
        stats.classes.insert(2, stat(0.50, 100));
        stats.classes.insert(3, stat(0.05, 5));
        stats.classes.insert(4, stat(0.10, 60));
        assert_eq!(select_underrepresented(&stats, 0.10, 5), BTreeSet::from([1]));
    }

    #[test]
    fn class_stats_count_images() {
        let a = ClassMap::new(2, 1, vec![0, 1]).unwrap();
        let b = ClassMap::new(2, 1, vec![0, 0]).unwrap();
        let s = ClassStats::from_class_maps([&a, &b]);
        assert_eq!(s.classes[&0].occurrence_count, 2);
        assert_eq!(s.classes[&1].image_frequency, 0.5);
    }
}
