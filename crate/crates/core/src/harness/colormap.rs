//! False-colour rendering for depth and uncertainty maps.

use crate::image::ImageBuffer;

/// Turbo-style anchors, evenly spaced on `[0, 1]`, as 8-bit sRGB.
pub const ANCHORS: [[u8; 3]; 17] = [
    [48, 18, 59],
    [64, 64, 162],
    [70, 107, 227],
    [66, 148, 255],
    [40, 188, 235],
    [24, 221, 194],
    [50, 242, 152],
    [109, 254, 98],
    [164, 252, 60],
    [205, 236, 52],
    [238, 207, 58],
    [253, 172, 52],
    [251, 126, 33],
    [235, 80, 14],
    [208, 47, 5],
    [169, 22, 1],
    [122, 4, 3],
];

/// Colour for `t ∈ [0, 1]` (clamped), linearly interpolated between anchors.
pub fn colorize(t: f64) -> [f64; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (ANCHORS.len() - 1) as f64;
    let i = (x.floor() as usize).min(ANCHORS.len() - 2);
    let f = x - i as f64;
    let (a, b) = (ANCHORS[i], ANCHORS[i + 1]);
    std::array::from_fn(|c| ((1.0 - f) * a[c] as f64 + f * b[c] as f64) / 255.0)
}

/// Maps `values` linearly from `[lo, hi]`; pixels where `valid` is false are black.
pub fn colorize_map(width: usize, height: usize, values: &[f64], valid: &[bool], lo: f64, hi: f64) -> ImageBuffer {
    let span = if hi > lo { hi - lo } else { 1.0 };
    ImageBuffer::from_fn(width, height, |u, v| {
        let i = v * width + u;
        if valid[i] {
            colorize((values[i] - lo) / span)
        } else {
            [0.0; 3]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoints() {
        let c = colorize(0.0);
        assert_eq!(c.map(|x| (x * 255.0).round() as u8), ANCHORS[0]);
        assert_eq!(colorize(2.0), colorize(1.0));
        let mid = colorize(0.5 / 16.0);
        for ch in 0..3 {
            let want = (ANCHORS[0][ch] as f64 + ANCHORS[1][ch] as f64) / 2.0 / 255.0;
            assert!((mid[ch] - want).abs() < 1e-12);
        }
    }
}
