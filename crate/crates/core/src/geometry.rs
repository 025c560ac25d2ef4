//! Pinhole back-projection, z-buffered novel-view rendering, pose sampling and
//! analytic correspondences for 3D-augmented context.
//!
//! Pixel `(u, v)` denotes the pixel whose integer index is `(u, v)`; no half-pixel
//! offset is applied, so the principal point lands exactly on the optical axis.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::correspondence::{CorrespondenceSet, Match};
use crate::error::{RadError, Result};
use crate::image::{ensure_same_dims, DepthMap, ImageBuffer};
use crate::retrieval::{ContextSample, Provenance};
use crate::rng::SeededRng;

/// Depth agreement required for a source pixel to count as visible in the
/// rendered view.
pub const VISIBILITY_TOLERANCE_M: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(RadError::input(format!(
                "intrinsics need positive focal lengths, got fx={fx} fy={fy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Intrinsics after resizing the image by `(sx, sy)` = new / old.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
        }
    }

    #[inline]
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        [
            (u - self.cx) * depth / self.fx,
            (v - self.cy) * depth / self.fy,
            depth,
        ]
    }

    /// Sub-pixel image coordinates of a camera-frame point (z must be > 0).
    #[inline]
    pub fn project(&self, p: &[f64; 3]) -> (f64, f64) {
        (
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        )
    }
}

/// Rigid transform applied as `R·p + t` to source-camera points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(RadError::input(format!(
                "rotation is not proper orthonormal (|RᵀR−I|={ortho:e}, det={det})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn translation_only(t: [f64; 3]) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::from(t),
        }
    }

    #[inline]
    pub fn apply(&self, p: &[f64; 3]) -> [f64; 3] {
        let q = self.rotation * Vector3::new(p[0], p[1], p[2]) + self.translation;
        [q.x, q.y, q.z]
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        Rotation3::from_matrix_unchecked(self.rotation).angle()
    }
}

/// Upper bounds for [`sample_pose`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseBounds {
    pub max_angle_deg: f64,
    pub max_translation_m: f64,
}

impl PoseBounds {
    /// 10° rotation and a translation cube of 5% of the scene's median depth.
    pub fn for_median_depth(median_depth: f64) -> Self {
        Self {
            max_angle_deg: 10.0,
            max_translation_m: 0.05 * median_depth,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[f64; 3]>,
    pub source_pixel: Vec<(usize, usize)>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Every valid depth pixel becomes one point in the source camera frame.
pub fn backproject(image: &ImageBuffer, depth: &DepthMap, k: &CameraIntrinsics) -> Result<PointCloud> {
    ensure_same_dims("backproject image vs depth", image.dims(), depth.dims())?;
    let mut cloud = PointCloud::default();
    for v in 0..depth.height() {
        for u in 0..depth.width() {
            if let Some(d) = depth.get(u, v) {
                cloud.points.push(k.unproject(u as f64, v as f64, d));
                cloud.colors.push(image.get(u, v));
                cloud.source_pixel.push((u, v));
            }
        }
    }
    Ok(cloud)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Side length of the square footprint a point covers, in pixels. `1`
    /// splats to the nearest pixel only; even values are rounded up to odd.
    pub splat_px: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { splat_px: 1 }
    }
}

/// Rendered view plus, per pixel, the index of the point that won the z-test.
#[derive(Debug, Clone)]
pub struct Rendering {
    pub image: ImageBuffer,
    pub depth: DepthMap,
    pub winner: Vec<Option<usize>>,
}

/// Nearest pixel of a sub-pixel coordinate, if inside a `width × height` grid.
#[inline]
pub fn nearest_pixel(u: f64, v: f64, width: usize, height: usize) -> Option<(usize, usize)> {
    let (ur, vr) = (u.round(), v.round());
    if ur < 0.0 || vr < 0.0 || ur >= width as f64 || vr >= height as f64 {
        return None;
    }
    Some((ur as usize, vr as usize))
}

pub fn project(
    cloud: &PointCloud,
    k: &CameraIntrinsics,
    pose: &Pose,
    out_size: (usize, usize),
) -> Result<(ImageBuffer, DepthMap)> {
    let r = render(cloud, k, pose, out_size, &RenderConfig::default())?;
    Ok((r.image, r.depth))
}

/// Transforms, culls `z ≤ 0`, splats and resolves collisions with a z-buffer
/// (smallest depth wins, earliest point on exact ties).
pub fn render(
    cloud: &PointCloud,
    k: &CameraIntrinsics,
    pose: &Pose,
    out_size: (usize, usize),
    cfg: &RenderConfig,
) -> Result<Rendering> {
    let (height, width) = out_size;
    if height == 0 || width == 0 {
        return Err(RadError::input("render size must be positive"));
    }
    let half = (cfg.splat_px.max(1) / 2) as isize;
    let mut zbuf = vec![f64::INFINITY; width * height];
    let mut winner: Vec<Option<usize>> = vec![None; width * height];
    for (idx, p) in cloud.points.iter().enumerate() {
        let q = pose.apply(p);
        if q[2] <= 0.0 {
            continue;
        }
        let (u, v) = k.project(&q);
        let (uc, vc) = (u.round() as isize, v.round() as isize);
        for dv in -half..=half {
            for du in -half..=half {
                let (x, y) = (uc + du, vc + dv);
                if x < 0 || y < 0 || x >= width as isize || y >= height as isize {
                    continue;
                }
                let i = y as usize * width + x as usize;
                if q[2] < zbuf[i] {
                    zbuf[i] = q[2];
                    winner[i] = Some(idx);
                }
            }
        }
    }
    let mut image = ImageBuffer::new(width, height);
    let mut depth = DepthMap::invalid(width, height);
    for y in 0..height {
        for x in 0..width {
            if let Some(idx) = winner[y * width + x] {
                image.set(x, y, cloud.colors[idx]);
                depth.set(x, y, zbuf[y * width + x]);
            }
        }
    }
    Ok(Rendering {
        image,
        depth,
        winner,
    })
}

/// Rotation about an axis uniform on the sphere by an angle uniform in
/// `[0, max_angle]`, translation uniform in the cube `[-t, t]³`.
pub fn sample_pose(rng: &mut SeededRng, bounds: &PoseBounds) -> Pose {
    let axis = loop {
        let a = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if a.norm() > 1e-12 {
            break a;
        }
    };
    let max_angle = bounds.max_angle_deg.max(0.0).to_radians();
    let angle = if max_angle > 0.0 {
        rng.gen_range(0.0..=max_angle)
    } else {
        0.0
    };
    let t = bounds.max_translation_m.max(0.0);
    let mut coord = || if t > 0.0 { rng.gen_range(-t..=t) } else { 0.0 };
    let translation = Vector3::new(coord(), coord(), coord());
    let rotation = if angle == 0.0 {
        Matrix3::identity()
    } else {
        *Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).matrix()
    };
    Pose {
        rotation,
        translation,
    }
}

/// Output of [`make_context_3d`].
#[derive(Debug, Clone)]
pub struct Augmented3d {
    pub context: ContextSample,
    pub correspondences: CorrespondenceSet,
    /// Set when no source point survived into the new view.
    pub no_visible_points: bool,
}

/// Renders the input from `pose` and derives correspondences from the
/// projective geometry: a source pixel corresponds to the pixel it lands on
/// if its transformed depth agrees with the z-buffer there.
pub fn make_context_3d(
    image: &ImageBuffer,
    depth: &DepthMap,
    k: &CameraIntrinsics,
    pose: &Pose,
    scene_id: u32,
    cfg: &RenderConfig,
) -> Result<Augmented3d> {
    let cloud = backproject(image, depth, k)?;
    let size = depth.dims();
    let rendering = render(&cloud, k, pose, size, cfg)?;
    let (height, width) = size;
    let mut correspondences = CorrespondenceSet::new((width, height), (width, height));
    for (p, &(su, sv)) in cloud.points.iter().zip(&cloud.source_pixel) {
        let q = pose.apply(p);
        if q[2] <= 0.0 {
            continue;
        }
        let (u, v) = k.project(&q);
        let Some((tu, tv)) = nearest_pixel(u, v, width, height) else {
            continue;
        };
        let Some(z) = rendering.depth.get(tu, tv) else {
            continue;
        };
        if (q[2] - z).abs() <= VISIBILITY_TOLERANCE_M {
            correspondences.pairs.push(Match {
                ua: su as f64,
                va: sv as f64,
                ub: tu as f64,
                vb: tv as f64,
                score: 1.0,
            });
        }
    }
    let no_visible_points = rendering.depth.valid_count() == 0;
    Ok(Augmented3d {
        context: ContextSample {
            image: rendering.image,
            depth: rendering.depth,
            scene_id,
            provenance: Provenance::Augmented,
        },
        correspondences,
        no_visible_points,
    })
}
