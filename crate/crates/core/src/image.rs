//! Dense rasters: RGB images in `[0, 1]` and metric depth maps with validity.

use crate::error::{RadError, Result};

/// Interleaved RGB image, row-major, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(RadError::input(format!(
                "rgb buffer of {} values does not fit {width}x{height}x3",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for v in 0..height {
            for u in 0..width {
                img.set(u, v, f(u, v));
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `(height, width)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, rgb: [f64; 3]) {
        let i = (v * self.width + u) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rec. 601 luma.
    pub fn gray(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    /// Bilinear resize with pixel-center alignment.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> ImageBuffer {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        ImageBuffer::from_fn(width, height, |u, v| {
            let x = ((u as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let y = ((v as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            let mut out = [0.0; 3];
            let (a, b, c, d) = (
                self.get(x0, y0),
                self.get(x1, y0),
                self.get(x0, y1),
                self.get(x1, y1),
            );
            for k in 0..3 {
                out[k] = (a[k] * (1.0 - fx) + b[k] * fx) * (1.0 - fy)
                    + (c[k] * (1.0 - fx) + d[k] * fx) * fy;
            }
            out
        })
    }
}

/// Metric depth in meters. Invalid pixels hold [`DepthMap::INVALID`] and are
/// excluded from every statistic.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub const INVALID: f64 = 0.0;

    /// A fully invalid map.
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![Self::INVALID; width * height],
            valid: vec![false; width * height],
        }
    }

    /// Builds a map where every positive finite value is valid.
    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(RadError::input(format!(
                "depth buffer of {} values does not fit {width}x{height}",
                values.len()
            )));
        }
        let mut map = Self::invalid(width, height);
        for (i, d) in values.into_iter().enumerate() {
            if d.is_finite() && d > 0.0 {
                map.values[i] = d;
                map.valid[i] = true;
            }
        }
        Ok(map)
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> Option<f64>) -> Self {
        let mut map = Self::invalid(width, height);
        for v in 0..height {
            for u in 0..width {
                if let Some(d) = f(u, v) {
                    map.set(u, v, d);
                }
            }
        }
        map
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

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.width + u;
        self.valid[i].then_some(self.values[i])
    }

    #[inline]
    pub fn get_index(&self, i: usize) -> Option<f64> {
        self.valid[i].then_some(self.values[i])
    }

    /// Stores `d` if it is a positive finite depth, otherwise marks the pixel invalid.
    #[inline]
    pub fn set(&mut self, u: usize, v: usize, d: f64) {
        let i = v * self.width + u;
        if d.is_finite() && d > 0.0 {
            self.values[i] = d;
            self.valid[i] = true;
        } else {
            self.values[i] = Self::INVALID;
            self.valid[i] = false;
        }
    }

    pub fn invalidate(&mut self, u: usize, v: usize) {
        let i = v * self.width + u;
        self.values[i] = Self::INVALID;
        self.valid[i] = false;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&b| b).count()
    }

    pub fn scaled(&self, c: f64) -> DepthMap {
        let mut out = self.clone();
        for (x, &ok) in out.values.iter_mut().zip(&self.valid) {
            if ok {
                *x *= c;
            }
        }
        out
    }

    /// Median over valid pixels, `None` when nothing is valid.
    pub fn median(&self) -> Option<f64> {
        let mut vals: Vec<f64> = self
            .values
            .iter()
            .zip(&self.valid)
            .filter_map(|(&d, &ok)| ok.then_some(d))
            .collect();
        if vals.is_empty() {
            return None;
        }
        vals.sort_by(|a, b| a.total_cmp(b));
        Some(vals[vals.len() / 2])
    }

    /// Nearest-neighbour resize; validity travels with the sampled pixel.
    pub fn resize_nearest(&self, width: usize, height: usize) -> DepthMap {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        DepthMap::from_fn(width, height, |u, v| {
            let x = (((u as f64 + 0.5) * sx) as usize).min(self.width - 1);
            let y = (((v as f64 + 0.5) * sy) as usize).min(self.height - 1);
            self.get(x, y)
        })
    }
}

/// Checks that two rasters agree on `(height, width)`.
pub fn ensure_same_dims(
    what: &'static str,
    expected: (usize, usize),
    got: (usize, usize),
) -> Result<()> {
    if expected != got {
        return Err(RadError::Dimension {
            what,
            expected,
            got,
        });
    }
    Ok(())
}
