//! Benchmarking under the rare-class and all-class protocols, with the
//! baseline and ablation rows.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RadError, Result};
use crate::harness::colormap::colorize_map;
use crate::harness::dataset::Sample;
use crate::harness::io::write_rgb_png;
use crate::harness::pipeline::{
    assemble_contexts, predict_assembled, AttentionMode, ContextAssembly, Diagnostics, InferenceConfig, MatchSource,
    Resources,
};
use crate::image::DepthMap;
use crate::metrics::{accumulate, clamp_prediction, AggregateReport, Aggregator, MetricsReport, METRIC_COLUMNS};
use crate::nn::DualStreamModel;
use crate::retrieval::{QueryMode, RetrievalConfig};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// The separately trained single-stream model.
    SingleStream,
    /// The jointly trained model run without contexts (`M = 0`).
    Baseline,
    Rad,
    /// Same contexts as `Rad`, attending to every context token.
    FullContext,
    /// Contexts retrieved with the unmasked image as query.
    GlobalRetrieval,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::SingleStream => "single_stream",
            Variant::Baseline => "baseline",
            Variant::Rad => "rad",
            Variant::FullContext => "full_context",
            Variant::GlobalRetrieval => "global_retrieval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Pixels of the underrepresented classes only.
    Rare,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub inference: InferenceConfig,
    pub variants: Vec<Variant>,
    pub rare_classes: BTreeSet<u32>,
    pub min_depth: f64,
    pub max_depth: f64,
    pub seed: u64,
}

#[derive(Clone, Copy)]
pub struct BenchModels<'a> {
    pub model: &'a DualStreamModel,
    pub single_stream: Option<&'a DualStreamModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub rare: Option<AggregateReport>,
    pub all: Option<AggregateReport>,
}

impl VariantReport {
    pub fn protocol(&self, p: Protocol) -> Option<&AggregateReport> {
        match p {
            Protocol::Rare => self.rare.as_ref(),
            Protocol::All => self.all.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub variant: Variant,
    pub rare: Option<MetricsReport>,
    pub all: Option<MetricsReport>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rare_classes: BTreeSet<u32>,
    pub test_images: usize,
    pub variants: Vec<VariantReport>,
    pub images: Vec<ImageRecord>,
}

impl BenchmarkReport {
    pub fn variant(&self, v: Variant) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.variant == v)
    }

    /// Pixel-weighted AbsRel of a variant under a protocol.
    pub fn abs_rel(&self, v: Variant, p: Protocol) -> Option<f64> {
        self.variant(v)?.protocol(p).map(|a| a.pixel_weighted.abs_rel)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("variant,protocol,aggregation,images,pixels,{}\n", METRIC_COLUMNS.join(","));
        for r in &self.variants {
            for (p, name) in [(Protocol::Rare, "rare"), (Protocol::All, "all")] {
                let Some(a) = r.protocol(p) else { continue };
                for (agg, m) in [("pixel", &a.pixel_weighted), ("image", &a.per_image_mean)] {
                    let _ = write!(out, "{},{name},{agg},{},{}", r.variant.name(), a.images, m.pixel_count);
                    for c in METRIC_COLUMNS {
                        let _ = write!(out, ",{:.6}", m.column(c).unwrap_or(f64::NAN));
                    }
                    out.push('\n');
                }
            }
        }
        out
    }
}

/// Predictions per variant, aligned with the test samples.
pub type Predictions = BTreeMap<Variant, Vec<DepthMap>>;

/// Evaluation mask: selected classes with ground truth inside the depth range.
pub fn protocol_mask(sample: &Sample, protocol: Protocol, rare: &BTreeSet<u32>, min: f64, max: f64) -> Result<Vec<bool>> {
    let classes = sample
        .classes
        .as_ref()
        .ok_or_else(|| RadError::Config(format!("test sample {} has no class map", sample.id)))?;
    Ok((0..sample.depth.len())
        .map(|i| {
            let in_range = sample.depth.get_index(i).is_some_and(|d| d >= min && d <= max);
            in_range && (protocol == Protocol::All || rare.contains(&classes.labels[i]))
        })
        .collect())
}

pub fn run_benchmark(
    test: &[&Sample],
    models: BenchModels<'_>,
    resources: Resources<'_>,
    cfg: &BenchmarkConfig,
) -> Result<(BenchmarkReport, Predictions)> {
    if let Some(s) = test.iter().find(|s| s.classes.is_none()) {
        return Err(RadError::Config(format!("test sample {} has no class map", s.id)));
    }
    if cfg.variants.contains(&Variant::SingleStream) && models.single_stream.is_none() {
        return Err(RadError::Config("single-stream row requested without a single-stream model".into()));
    }
    let mut aggs: BTreeMap<(Variant, Protocol), Aggregator> = BTreeMap::new();
    let mut preds: Predictions = BTreeMap::new();
    let mut images = Vec::new();
    let matching = cfg.inference.matching;
    for s in test {
        let segments = s.segments_or_fallback();
        let assemble = |retrieval: &RetrievalConfig| -> Result<ContextAssembly> {
            let mut rng = SeededRng::derived(cfg.seed, s.id);
            assemble_contexts(
                &s.image,
                s.scene_id,
                &segments,
                resources,
                MatchSource::Desk(&matching),
                retrieval,
                &models.model.config,
                &mut rng,
            )
        };
        let needs_masked = cfg.variants.iter().any(|v| matches!(v, Variant::Rad | Variant::FullContext));
        let masked = if needs_masked {
            let r = RetrievalConfig {
                mode: QueryMode::UncertaintyMasked,
                ..cfg.inference.retrieval
            };
            Some(assemble(&r)?)
        } else {
            None
        };
        let masks = [
            protocol_mask(s, Protocol::Rare, &cfg.rare_classes, cfg.min_depth, cfg.max_depth)?,
            protocol_mask(s, Protocol::All, &cfg.rare_classes, cfg.min_depth, cfg.max_depth)?,
        ];
        for &v in &cfg.variants {
            let (pred, diagnostics) = match v {
                Variant::SingleStream => (
                    models.single_stream.expect("checked above").predict_single(&s.image)?,
                    Diagnostics::default(),
                ),
                Variant::Baseline => (models.model.predict_single(&s.image)?, Diagnostics::default()),
                Variant::Rad | Variant::FullContext => {
                    let mode = if v == Variant::Rad {
                        cfg.inference.attention
                    } else {
                        AttentionMode::FullContext
                    };
                    let a = masked.clone().expect("assembled above").with_attention(mode);
                    (predict_assembled(models.model, &s.image, &a)?, a.diagnostics)
                }
                Variant::GlobalRetrieval => {
                    let r = RetrievalConfig {
                        mode: QueryMode::Global,
                        ..cfg.inference.retrieval
                    };
                    let a = assemble(&r)?.with_attention(cfg.inference.attention);
                    (predict_assembled(models.model, &s.image, &a)?, a.diagnostics)
                }
            };
            let pred = clamp_prediction(&pred, cfg.min_depth, cfg.max_depth);
            let mut record = ImageRecord {
                id: s.id,
                variant: v,
                rare: None,
                all: None,
                diagnostics,
            };
            for (p, mask) in [Protocol::Rare, Protocol::All].into_iter().zip(&masks) {
                let acc = accumulate(&pred, &s.depth, mask)?;
                aggs.entry((v, p)).or_default().add(&acc);
                match p {
                    Protocol::Rare => record.rare = acc.report(),
                    Protocol::All => record.all = acc.report(),
                }
            }
            images.push(record);
            preds.entry(v).or_default().push(pred);
        }
    }
    let variants = cfg
        .variants
        .iter()
        .map(|&v| VariantReport {
            variant: v,
            rare: aggs.get(&(v, Protocol::Rare)).and_then(Aggregator::finish),
            all: aggs.get(&(v, Protocol::All)).and_then(Aggregator::finish),
        })
        .collect();
    Ok((
        BenchmarkReport {
            rare_classes: cfg.rare_classes.clone(),
            test_images: test.len(),
            variants,
            images,
        },
        preds,
    ))
}

/// Writes `report.json`, `metrics.csv`, `images.jsonl` and false-colour PNGs
/// for the first `max_images` test samples.
pub fn write_report(
    report: &BenchmarkReport,
    preds: &Predictions,
    test: &[&Sample],
    dir: &Path,
    max_images: usize,
    depth_range: (f64, f64),
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| RadError::io(dir, e))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(dir.join("report.json"), json).map_err(|e| RadError::io(dir.join("report.json"), e))?;
    std::fs::write(dir.join("metrics.csv"), report.to_csv()).map_err(|e| RadError::io(dir.join("metrics.csv"), e))?;
    let mut lines = String::new();
    for r in &report.images {
        lines.push_str(&serde_json::to_string(r).expect("record serializes"));
        lines.push('\n');
    }
    std::fs::write(dir.join("images.jsonl"), lines).map_err(|e| RadError::io(dir.join("images.jsonl"), e))?;
    if max_images == 0 {
        return Ok(());
    }
    let pics = dir.join("images");
    std::fs::create_dir_all(&pics).map_err(|e| RadError::io(&pics, e))?;
    let (lo, hi) = depth_range;
    let paint = |d: &DepthMap| {
        let inv: Vec<f64> = d.values().iter().map(|&x| if x > 0.0 { 1.0 / x } else { 0.0 }).collect();
        colorize_map(d.width(), d.height(), &inv, d.valid_mask(), 1.0 / hi, 1.0 / lo)
    };
    for (k, s) in test.iter().take(max_images).enumerate() {
        write_rgb_png(&pics.join(format!("{:06}_rgb.png", s.id)), &s.image)?;
        write_rgb_png(&pics.join(format!("{:06}_gt.png", s.id)), &paint(&s.depth))?;
        for (v, list) in preds {
            write_rgb_png(&pics.join(format!("{:06}_{}.png", s.id, v.name())), &paint(&list[k]))?;
        }
    }
    Ok(())
}
