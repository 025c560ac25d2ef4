//! Perturbation-based pixel-wise uncertainty, segment thresholding and
//! query masking.

use std::collections::BTreeSet;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{RadError, Result};
use crate::image::{ensure_same_dims, DepthMap, ImageBuffer};
use crate::rng::SeededRng;
use crate::segment::SegmentMap;

/// Denominator guard for the std/mean ratio, in meters.
pub const MEAN_EPSILON: f64 = 1e-6;

/// A frozen depth estimator `D(y)`. Implementations must be deterministic.
pub trait DepthModel: Send + Sync {
    fn predict(&self, image: &ImageBuffer) -> Result<DepthMap>;
}

impl<F> DepthModel for F
where
    F: Fn(&ImageBuffer) -> Result<DepthMap> + Send + Sync,
{
    fn predict(&self, image: &ImageBuffer) -> Result<DepthMap> {
        self(image)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    /// Noise standard deviation on normalized pixel values.
    pub sigma: f64,
    /// Number of noisy variants.
    pub n: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { sigma: 0.1, n: 5 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(RadError::Config(format!("noise sigma {} must be >= 0", self.sigma)));
        }
        if self.n == 0 || (self.sigma > 0.0 && self.n < 2) {
            return Err(RadError::Config(format!(
                "need n >= 2 noisy variants when sigma > 0 (got n = {})",
                self.n
            )));
        }
        Ok(())
    }
}

/// Adds i.i.d. Gaussian noise and clamps to `[0, 1]`.
pub fn perturb(image: &ImageBuffer, cfg: &NoiseConfig, rng: &mut SeededRng) -> ImageBuffer {
    let mut out = image.clone();
    if cfg.sigma == 0.0 {
        return out;
    }
    let normal = Normal::new(0.0, cfg.sigma).expect("finite sigma");
    for x in out.data_mut() {
        *x = (*x + normal.sample(rng)).clamp(0.0, 1.0);
    }
    out
}

/// Ratio of pixel-wise population std to pixel-wise mean depth.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl UncertaintyMap {
    pub fn from_parts(width: usize, height: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != width * height {
            return Err(RadError::input("uncertainty buffers do not fit the raster"));
        }
        if values.iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(RadError::input("uncertainty values must be finite and nonnegative"));
        }
        Ok(Self {
            width,
            height,
            values,
            valid,
        })
    }

    /// Pixel-wise std/mean over a stack of depth predictions of equal size.
    pub fn from_predictions(preds: &[DepthMap]) -> Result<Self> {
        let first = preds
            .first()
            .ok_or_else(|| RadError::input("no predictions to aggregate"))?;
        let (h, w) = first.dims();
        for p in preds {
            ensure_same_dims("uncertainty prediction stack", (h, w), p.dims())?;
        }
        let n = preds.len() as f64;
        let mut values = vec![0.0; w * h];
        let mut valid = vec![false; w * h];
        for i in 0..w * h {
            if preds.iter().any(|p| !p.valid_mask()[i]) {
                continue;
            }
            // Shifted by the first sample so identical predictions give exactly zero.
            let x0 = preds[0].values()[i];
            let shift = preds.iter().map(|p| p.values()[i] - x0).sum::<f64>() / n;
            let mean = x0 + shift;
            let var = preds
                .iter()
                .map(|p| (p.values()[i] - x0 - shift).powi(2))
                .sum::<f64>()
                / n;
            values[i] = var.sqrt() / mean.max(MEAN_EPSILON);
            valid[i] = true;
        }
        Ok(Self {
            width: w,
            height: h,
            values,
            valid,
        })
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

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, u: usize, v: usize) -> Option<f64> {
        let i = v * self.width + u;
        self.valid[i].then_some(self.values[i])
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .map(|(&v, _)| v)
            .fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        let (s, n) = self
            .values
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .fold((0.0, 0usize), |(s, n), (&v, _)| (s + v, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    /// Nearest-neighbour resample to `width × height`.
    pub fn resize_nearest(&self, width: usize, height: usize) -> UncertaintyMap {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut values = vec![0.0; width * height];
        let mut valid = vec![false; width * height];
        for v in 0..height {
            for u in 0..width {
                let x = (((u as f64 + 0.5) * sx) as usize).min(self.width - 1);
                let y = (((v as f64 + 0.5) * sy) as usize).min(self.height - 1);
                let j = y * self.width + x;
                values[v * width + u] = self.values[j];
                valid[v * width + u] = self.valid[j];
            }
        }
        UncertaintyMap {
            width,
            height,
            values,
            valid,
        }
    }
}

/// Runs `model` on `cfg.n` independently perturbed copies of `image`. Each
/// variant draws its noise from its own sub-seed forked from `rng` in order.
/// The map is computed at model-output resolution and resampled to image
/// resolution by nearest neighbour.
pub fn uncertainty_map(
    model: &dyn DepthModel,
    image: &ImageBuffer,
    cfg: &NoiseConfig,
    rng: &mut SeededRng,
) -> Result<UncertaintyMap> {
    cfg.validate()?;
    let mut preds = Vec::with_capacity(cfg.n);
    for variant in 0..cfg.n {
        let mut sub = rng.fork();
        let noisy = perturb(image, cfg, &mut sub);
        let pred = model.predict(&noisy).map_err(|e| RadError::Model {
            variant,
            source: Box::new(e),
        })?;
        preds.push(pred);
    }
    let u = UncertaintyMap::from_predictions(&preds)?;
    Ok(u.resize_nearest(image.width(), image.height()))
}

/// `p(s, U, h)`: per-segment count of valid pixels with `U > h`.
pub fn uncertain_pixel_counts(u: &UncertaintyMap, seg: &SegmentMap, h: f64) -> Vec<usize> {
    let mut counts = vec![0usize; seg.num_segments()];
    for ((&l, &val), &ok) in seg.labels().iter().zip(u.values()).zip(u.valid_mask()) {
        if ok && val > h {
            counts[l as usize] += 1;
        }
    }
    counts
}

/// Segments where strictly more than `q`% of the pixels exceed `h`.
pub fn keep_segments(u: &UncertaintyMap, seg: &SegmentMap, h: f64, q: f64) -> Result<BTreeSet<u32>> {
    ensure_same_dims("uncertainty vs segments", u.dims(), seg.dims())?;
    if seg.num_segments() == 0 || seg.labels().is_empty() {
        return Err(RadError::input("empty segment map"));
    }
    if !(0.0..=100.0).contains(&q) || !(h >= 0.0) {
        return Err(RadError::input(format!("need 0 <= q <= 100 and h >= 0 (q={q}, h={h})")));
    }
    let counts = uncertain_pixel_counts(u, seg, h);
    let sizes = seg.segment_sizes();
    Ok((0..seg.num_segments())
        .filter(|&s| counts[s] as f64 > sizes[s] as f64 * q / 100.0)
        .map(|s| s as u32)
        .collect())
}

/// Copies pixels of kept segments, zeroes everything else.
pub fn mask_image(image: &ImageBuffer, seg: &SegmentMap, kept: &BTreeSet<u32>) -> Result<ImageBuffer> {
    ensure_same_dims("image vs segments", image.dims(), seg.dims())?;
    let mut out = ImageBuffer::new(image.width(), image.height());
    for (i, &l) in seg.labels().iter().enumerate() {
        if kept.contains(&l) {
            let (u, v) = (i % image.width(), i / image.width());
            out.set(u, v, image.get(u, v));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_model(c: f64) -> impl DepthModel {
        move |img: &ImageBuffer| Ok(DepthMap::from_fn(img.width(), img.height(), |_, _| Some(c)))
    }

    fn gradient_image() -> ImageBuffer {
        ImageBuffer::from_fn(6, 5, |u, v| [u as f64 / 6.0, v as f64 / 5.0, 0.5])
    }

    #[test]
    fn zero_sigma_is_identity() {
        let img = gradient_image();
        let cfg = NoiseConfig { sigma: 0.0, n: 1 };
        assert_eq!(perturb(&img, &cfg, &mut SeededRng::new(1)), img);
    }

    #[test]
    fn perturb_is_seeded() {
        let img = gradient_image();
        let cfg = NoiseConfig::default();
        assert_eq!(
            perturb(&img, &cfg, &mut SeededRng::new(5)),
            perturb(&img, &cfg, &mut SeededRng::new(5))
        );
    }

    #[test]
    fn constant_model_has_zero_uncertainty() {
        let u = uncertainty_map(&constant_model(3.0), &gradient_image(), &NoiseConfig::default(), &mut SeededRng::new(2)).unwrap();
        assert!(u.values().iter().all(|&x| x == 0.0));
        assert!(u.valid_mask().iter().all(|&b| b));
    }

    #[test]
    fn hand_case_two_depths() {
        let a = DepthMap::from_values(1, 1, vec![1.0]).unwrap();
        let b = DepthMap::from_values(1, 1, vec![3.0]).unwrap();
        let u = UncertaintyMap::from_predictions(&[a, b]).unwrap();
        assert_eq!(u.values()[0], 0.5);
    }

    #[test]
    fn invalid_in_any_variant_invalidates_pixel() {
        let a = DepthMap::from_values(2, 1, vec![1.0, 2.0]).unwrap();
        let b = DepthMap::from_values(2, 1, vec![1.0, 0.0]).unwrap();
        let u = UncertaintyMap::from_predictions(&[a, b]).unwrap();
        assert_eq!(u.valid_mask(), &[true, false]);
    }

    #[test]
    fn model_failure_names_variant() {
        let failing = |_: &ImageBuffer| -> Result<DepthMap> { Err(RadError::input("boom")) };
        let err = uncertainty_map(&failing, &gradient_image(), &NoiseConfig::default(), &mut SeededRng::new(0)).unwrap_err();
        assert!(matches!(err, RadError::Model { variant: 0, .. }));
    }

    #[test]
    fn invalid_noise_config_rejected() {
        assert!(NoiseConfig { sigma: 0.1, n: 1 }.validate().is_err());
        assert!(NoiseConfig { sigma: -0.1, n: 3 }.validate().is_err());
    }

    fn ten_pixel_segment(above: usize) -> (UncertaintyMap, SegmentMap) {
        let values: Vec<f64> = (0..10).map(|i| if i < above { 0.2 } else { 0.01 }).collect();
        let u = UncertaintyMap::from_parts(10, 1, values, vec![true; 10]).unwrap();
        let s = SegmentMap::new(10, 1, vec![0; 10], 1).unwrap();
        (u, s)
    }

    #[test]
    fn keep_uses_strict_inequality() {
        let (u, s) = ten_pixel_segment(3);
        assert_eq!(keep_segments(&u, &s, 0.05, 20.0).unwrap(), BTreeSet::from([0]));
        let (u, s) = ten_pixel_segment(2);
        assert!(keep_segments(&u, &s, 0.05, 20.0).unwrap().is_empty());
        let (u, s) = ten_pixel_segment(10);
        assert!(keep_segments(&u, &s, 0.05, 100.0).unwrap().is_empty());
        assert!(keep_segments(&u, &s, 0.5, 0.0).unwrap().is_empty());
    }

    #[test]
    fn mask_all_and_none() {
        let img = gradient_image();
        let labels: Vec<u32> = (0..30).map(|i| (i % 3) as u32).collect();
        let seg = SegmentMap::new(6, 5, labels, 3).unwrap();
        assert_eq!(mask_image(&img, &seg, &BTreeSet::from([0, 1, 2])).unwrap(), img);
        assert!(mask_image(&img, &seg, &BTreeSet::new()).unwrap().is_all_zero());
    }
}
