//! Dataset manifests and their in-memory form.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{RadError, Result};
use crate::geometry::CameraIntrinsics;
use crate::harness::io::{read_depth, read_png16, read_rgb_png, write_depth, write_png16, write_rgb_png, DepthFormat};
use crate::harness::synth::{synth_scene, SyntheticSceneSpec};
use crate::image::{DepthMap, ImageBuffer};
use crate::metrics::ClassMap;
use crate::retrieval::{build_index, ContextSample, DescriptorIndex, PoolItem, Provenance};
use crate::segment::{fallback_segments, FallbackSegmenterConfig, SegmentMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Pool,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub width: usize,
    pub height: usize,
    pub min_depth: f64,
    pub max_depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u64,
    pub image: PathBuf,
    pub depth: PathBuf,
    pub depth_format: DepthFormat,
    pub intrinsics: CameraIntrinsics,
    pub scene_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<PathBuf>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        if c.width == 0 || c.height == 0 || !(c.min_depth > 0.0 && c.max_depth > c.min_depth) {
            return Err(RadError::Config("manifest config has an empty raster or bad depth range".into()));
        }
        let mut ids = BTreeSet::new();
        for e in &self.entries {
            if !ids.insert(e.id) {
                return Err(RadError::Config(format!("duplicate manifest id {}", e.id)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RadError::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| RadError::Parse {
            location: format!("{}:{}:{}", path.display(), e.line(), e.column()),
            message: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| RadError::io(path, e))
    }
}

/// One RGB-D sample with its optional annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub scene_id: u32,
    pub split: Split,
    pub image: ImageBuffer,
    pub depth: DepthMap,
    pub intrinsics: CameraIntrinsics,
    pub segments: Option<SegmentMap>,
    pub classes: Option<ClassMap>,
}

impl Sample {
    /// The supplied segment map, or the built-in fallback segmentation.
    pub fn segments_or_fallback(&self) -> SegmentMap {
        self.segments
            .clone()
            .unwrap_or_else(|| fallback_segments(&self.image, &FallbackSegmenterConfig::default()))
    }

    pub fn as_context(&self) -> ContextSample {
        ContextSample {
            image: self.image.clone(),
            depth: self.depth.clone(),
            scene_id: self.scene_id,
            provenance: Provenance::Retrieved,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    /// Retrieval pool: train and pool splits only, never test.
    pub fn pool(&self) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.split != Split::Test).collect()
    }

    pub fn pool_store(&self) -> BTreeMap<u64, ContextSample> {
        self.pool().into_iter().map(|s| (s.id, s.as_context())).collect()
    }

    pub fn pool_index(&self) -> Result<DescriptorIndex> {
        build_index(
            self.pool()
                .into_iter()
                .map(|s| PoolItem::Image {
                    id: s.id,
                    scene_id: s.scene_id,
                    image: &s.image,
                })
                .collect(),
        )
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| -> Result<PathBuf> {
            let full = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            if !full.exists() {
                return Err(RadError::Config(format!("manifest path {} does not exist", full.display())));
            }
            Ok(full)
        };
        let c = manifest.config;
        let mut samples = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let image = read_rgb_png(&resolve(&e.image)?)?;
            let depth = read_depth(&resolve(&e.depth)?, e.depth_format)?;
            let dims = (c.height, c.width);
            if image.dims() != dims || depth.dims() != dims {
                return Err(RadError::Config(format!(
                    "entry {}: rasters must be {}x{} as declared in the manifest",
                    e.id, c.width, c.height
                )));
            }
            let segments = e.segments.as_deref().map(|p| SegmentMap::load_png16(&resolve(p)?)).transpose()?;
            let classes = e
                .classes
                .as_deref()
                .map(|p| -> Result<ClassMap> {
                    let (w, h, raw) = read_png16(&resolve(p)?)?;
                    ClassMap::new(w, h, raw.into_iter().map(u32::from).collect())
                })
                .transpose()?;
            samples.push(Sample {
                id: e.id,
                scene_id: e.scene_id,
                split: e.split,
                image,
                depth,
                intrinsics: e.intrinsics,
                segments,
                classes,
            });
        }
        Ok(Self { config: c, samples })
    }
}

/// Renders `counts` scenes per split from consecutive seeds starting at
/// `first_seed`. Every scene is its own scene id.
pub fn synthetic_dataset(spec: &SyntheticSceneSpec, counts: &[(Split, usize)], first_seed: u64) -> Result<Dataset> {
    let mut samples = Vec::new();
    let mut next = 0u64;
    for &(split, n) in counts {
        for _ in 0..n {
            let scene = synth_scene(&spec.with_seed(first_seed.wrapping_add(next)))?;
            samples.push(Sample {
                id: next,
                scene_id: next as u32,
                split,
                image: scene.image,
                depth: scene.depth,
                intrinsics: scene.intrinsics,
                segments: Some(scene.segments),
                classes: Some(scene.class_map),
            });
            next += 1;
        }
    }
    Ok(Dataset {
        config: DatasetConfig {
            width: spec.width,
            height: spec.height,
            min_depth: 0.1,
            max_depth: 10.0,
        },
        samples,
    })
}

/// Writes the dataset as PNG/PFM files plus `manifest.json` under `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path, depth_format: DepthFormat) -> Result<DatasetManifest> {
    for sub in ["rgb", "depth", "segments", "classes"] {
        std::fs::create_dir_all(dir.join(sub)).map_err(|e| RadError::io(dir.join(sub), e))?;
    }
    let ext = match depth_format {
        DepthFormat::Png16 => "png",
        DepthFormat::Pfm => "pfm",
    };
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let image = PathBuf::from(format!("rgb/{:06}.png", s.id));
        let depth = PathBuf::from(format!("depth/{:06}.{ext}", s.id));
        write_rgb_png(&dir.join(&image), &s.image)?;
        write_depth(&dir.join(&depth), &s.depth, depth_format)?;
        let segments = match &s.segments {
            Some(seg) => {
                let p = PathBuf::from(format!("segments/{:06}.png", s.id));
                seg.save_png16(&dir.join(&p))?;
                Some(p)
            }
            None => None,
        };
        let classes = match &s.classes {
            Some(c) => {
                let p = PathBuf::from(format!("classes/{:06}.png", s.id));
                let raw: Vec<u16> = c
                    .labels
                    .iter()
                    .map(|&l| u16::try_from(l).map_err(|_| RadError::input("class id above 65535")))
                    .collect::<Result<_>>()?;
                write_png16(&dir.join(&p), c.width, c.height, &raw)?;
                Some(p)
            }
            None => None,
        };
        entries.push(ManifestEntry {
            id: s.id,
            image,
            depth,
            depth_format,
            intrinsics: s.intrinsics,
            scene_id: s.scene_id,
            segments,
            classes,
            split: s.split,
        });
    }
    let manifest = DatasetManifest {
        config: dataset.config,
        entries,
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
