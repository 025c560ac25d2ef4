//! Segment maps: validated label rasters, 16-bit PNG I/O, and a built-in
//! fallback segmenter for when no precomputed map is available.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use crate::error::{RadError, Result};
use crate::image::ImageBuffer;

/// Per-pixel segment labels in `0..num_segments`, every segment nonempty.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    num_segments: usize,
}

impl SegmentMap {
    /// Validates the label invariants.
    pub fn new(width: usize, height: usize, labels: Vec<u32>, num_segments: usize) -> Result<Self> {
        if labels.len() != width * height {
            return Err(RadError::input("segment labels do not fit the raster"));
        }
        let mut sizes = vec![0usize; num_segments];
        for &l in &labels {
            let Some(s) = sizes.get_mut(l as usize) else {
                return Err(RadError::input(format!(
                    "label {l} not below num_segments {num_segments}"
                )));
            };
            *s += 1;
        }
        if let Some(empty) = sizes.iter().position(|&s| s == 0) {
            return Err(RadError::input(format!("segment {empty} is empty")));
        }
        Ok(Self {
            width,
            height,
            labels,
            num_segments,
        })
    }

    /// Relabels arbitrary ids to `0..k` in ascending order of the original id.
    pub fn from_arbitrary_labels(width: usize, height: usize, raw: &[u32]) -> Result<Self> {
        let mut remap = BTreeMap::new();
        for &l in raw {
            remap.entry(l).or_insert(0u32);
        }
        for (i, v) in remap.values_mut().enumerate() {
            *v = i as u32;
        }
        let labels = raw.iter().map(|l| remap[l]).collect();
        Self::new(width, height, labels, remap.len())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_segments(&self) -> usize {
        self.num_segments
    }

    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_segments];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let labels: Vec<u16> = self
            .labels
            .iter()
            .map(|&l| {
                u16::try_from(l).map_err(|_| RadError::input("more than 65535 segments"))
            })
            .collect::<Result<_>>()?;
        crate::harness::io::write_png16(path, self.width, self.height, &labels)
    }

    /// Loads a 16-bit single-channel label PNG; labels are compacted.
    pub fn load_png16(path: &Path) -> Result<Self> {
        let (w, h, raw) = crate::harness::io::read_png16(path)?;
        let raw: Vec<u32> = raw.into_iter().map(u32::from).collect();
        Self::from_arbitrary_labels(w, h, &raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FallbackSegmenterConfig {
    /// Side of the square grid cells, in pixels.
    pub cell: usize,
    /// Quantization levels per color channel.
    pub levels: usize,
}

impl Default for FallbackSegmenterConfig {
    fn default() -> Self {
        Self { cell: 16, levels: 4 }
    }
}

/// Grid cells refined by 4-connected components of quantized color.
pub fn fallback_segments(image: &ImageBuffer, cfg: &FallbackSegmenterConfig) -> SegmentMap {
    let (w, h) = (image.width(), image.height());
    let levels = cfg.levels.max(1);
    let cell = cfg.cell.max(1);
    let key = |u: usize, v: usize| -> (usize, usize, usize) {
        let q = image
            .get(u, v)
            .map(|c| ((c.clamp(0.0, 1.0) * levels as f64) as usize).min(levels - 1));
        let color = (q[0] * levels + q[1]) * levels + q[2];
        (v / cell, u / cell, color)
    };
    let mut labels = vec![u32::MAX; w * h];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if labels[start] != u32::MAX {
            continue;
        }
        let k0 = key(start % w, start / w);
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (u, v) = (i % w, i / w);
            let neighbours = [
                (u > 0).then(|| i - 1),
                (u + 1 < w).then(|| i + 1),
                (v > 0).then(|| i - w),
                (v + 1 < h).then(|| i + w),
            ];
            for j in neighbours.into_iter().flatten() {
                if labels[j] == u32::MAX && key(j % w, j / w) == k0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
        next += 1;
    }
    SegmentMap::new(w, h, labels, next as usize).expect("flood fill yields dense labels")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_segment() {
        assert!(SegmentMap::new(2, 1, vec![0, 2], 3).is_err());
        assert!(SegmentMap::new(2, 1, vec![0, 3], 3).is_err());
    }

    #[test]
    fn arbitrary_labels_compact_in_order() {
        let s = SegmentMap::from_arbitrary_labels(3, 1, &[40, 7, 40]).unwrap();
        assert_eq!(s.labels(), &[1, 0, 1]);
        assert_eq!(s.num_segments(), 2);
    }

    #[test]
    fn fallback_splits_colors_and_cells() {
        let img = ImageBuffer::from_fn(8, 4, |u, _| if u < 3 { [0.9, 0.1, 0.1] } else { [0.1, 0.1, 0.9] });
        let seg = fallback_segments(&img, &FallbackSegmenterConfig { cell: 8, levels: 4 });
        assert_eq!(seg.num_segments(), 2);
        let seg = fallback_segments(&img, &FallbackSegmenterConfig { cell: 4, levels: 4 });
        // left cell holds both colors, right cell one.
        assert_eq!(seg.num_segments(), 3);
    }
}
