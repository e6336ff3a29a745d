//! Camera model, voxel grid indexing and nearest-pixel sampling.
//!
//! World frame: x forward, y left, z up. Camera frame: x right, y down,
//! z along the optical axis. A world point `p` maps to the camera frame as
//! `R p + t` and then through the pinhole model
//!
//! ```text
//! u = fx * x_c / z_c + cx
//! v = fy * y_c / z_c + cy
//! ```
//!
//! Voxel indices address min-corners; the center of voxel `(i, j, k)` is
//! `origin + voxel_size * (i + 0.5, j + 0.5, k + 0.5)`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Points at or closer than this (meters, camera z) are treated as behind the camera.
pub const EPS_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelGridSpec {
    origin: Vector3<f64>,
    voxel_size: f64,
    dims: [usize; 3],
}

impl VoxelGridSpec {
    pub fn new(origin: Vector3<f64>, voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::param(format!("voxel size must be positive, got {voxel_size}")));
        }
        if dims.contains(&0) {
            return Err(Error::param(format!("grid dims must be >= 1, got {dims:?}")));
        }
        if dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).is_none() {
            return Err(Error::param(format!("grid dims {dims:?} overflow")));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("grid origin"));
        }
        Ok(Self {
            origin,
            voxel_size,
            dims,
        })
    }

    /// Unit voxels anchored at the world origin.
    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Self::new(Vector3::zeros(), 1.0, dims)
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Spatial extent in meters, `dims * voxel_size`.
    pub fn extent(&self) -> Vector3<f64> {
        Vector3::new(
            self.dims[0] as f64 * self.voxel_size,
            self.dims[1] as f64 * self.voxel_size,
            self.dims[2] as f64 * self.voxel_size,
        )
    }

    pub fn contains(&self, [i, j, k]: [usize; 3]) -> bool {
        i < self.dims[0] && j < self.dims[1] && k < self.dims[2]
    }

    /// Linear voxel index, i-major then j then k.
    #[inline]
    pub fn linear_index(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn unravel(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let ij = idx / self.dims[2];
        [ij / self.dims[1], ij % self.dims[1], k]
    }

    pub fn voxel_center(&self, index: [usize; 3]) -> Result<Vector3<f64>> {
        if !self.contains(index) {
            return Err(Error::IndexOutOfRange {
                index,
                dims: self.dims,
            });
        }
        Ok(self.center_unchecked(index))
    }

    #[inline]
    pub(crate) fn center_unchecked(&self, [i, j, k]: [usize; 3]) -> Vector3<f64> {
        self.origin
            + self.voxel_size * Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5)
    }

    /// Voxel containing a world point, if any.
    pub fn locate(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let rel = (p - self.origin) / self.voxel_size;
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = rel[a].floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    /// Same origin, twice the voxel size, `ceil(dims / 2)` voxels.
    pub fn downsampled(&self) -> Self {
        Self {
            origin: self.origin,
            voxel_size: self.voxel_size * 2.0,
            dims: self.dims.map(|d| d.div_ceil(2)),
        }
    }

    pub fn with_dims(&self, dims: [usize; 3]) -> Result<Self> {
        Self::new(self.origin, self.voxel_size, dims)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelLocation {
    pub u: f64,
    pub v: f64,
    /// Camera-frame z in meters, recorded even when the projection is invalid.
    pub depth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: PixelLocation,
    pub valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    pub image_width: usize,
    pub image_height: usize,
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        image_width: usize,
        image_height: usize,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::param(format!("focal lengths must be positive ({fx}, {fy})")));
        }
        if image_width == 0 || image_height == 0 {
            return Err(Error::param("image size must be at least 1x1"));
        }
        let gram = rotation.transpose() * rotation;
        if (gram - Matrix3::identity()).amax() > 1e-9 {
            return Err(Error::param("rotation is not orthonormal"));
        }
        if ![fx, fy, cx, cy].iter().all(|v| v.is_finite()) || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera parameters"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            image_width,
            image_height,
        })
    }

    /// Camera at `position` looking along heading `yaw` (radians about world z,
    /// 0 = +x) tilted down by `pitch` radians.
    #[allow(clippy::too_many_arguments)]
    pub fn looking(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        position: Vector3<f64>,
        yaw: f64,
        pitch: f64,
        image_width: usize,
        image_height: usize,
    ) -> Result<Self> {
        let forward = Vector3::new(pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), -pitch.sin());
        let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * position);
        Self::new(fx, fy, cx, cy, rotation, translation, image_width, image_height)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn world_to_camera(&self, point: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * point + self.translation
    }

    pub fn world_to_image(&self, point: &Vector3<f64>) -> Projection {
        let pc = self.world_to_camera(point);
        if pc.z <= EPS_DEPTH {
            return Projection {
                pixel: PixelLocation {
                    u: f64::NAN,
                    v: f64::NAN,
                    depth: pc.z,
                },
                valid: false,
            };
        }
        let u = self.fx * pc.x / pc.z + self.cx;
        let v = self.fy * pc.y / pc.z + self.cy;
        let valid = u >= 0.0 && u < self.image_width as f64 && v >= 0.0 && v < self.image_height as f64;
        Projection {
            pixel: PixelLocation { u, v, depth: pc.z },
            valid,
        }
    }

    /// World point that projects to `(u, v)` at camera depth `depth`.
    pub fn back_project(&self, pixel: &PixelLocation) -> Vector3<f64> {
        let pc = Vector3::new(
            (pixel.u - self.cx) / self.fx * pixel.depth,
            (pixel.v - self.cy) / self.fy * pixel.depth,
            pixel.depth,
        );
        self.rotation.transpose() * (pc - self.translation)
    }

    /// World-frame direction (unnormalised) of the ray through pixel `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let dc = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        self.rotation.transpose() * dc
    }

    /// Extrinsics that see `R_t p + t_t` exactly where `self` sees `p`.
    pub fn transformed(&self, rot: &Matrix3<f64>, trans: &Vector3<f64>) -> Result<Self> {
        let r = self.rotation * rot.transpose();
        let t = self.translation - r * trans;
        Self::new(self.fx, self.fy, self.cx, self.cy, r, t, self.image_width, self.image_height)
    }
}

/// Nearest pixel `(col, row)` for continuous coordinates; exact `.5` ties go to
/// the lower index. Coordinates in the last half pixel clamp to the border pixel.
pub fn nearest_pixel(width: usize, height: usize, u: f64, v: f64) -> Result<(usize, usize)> {
    if !(u >= 0.0 && u < width as f64 && v >= 0.0 && v < height as f64) {
        return Err(Error::PixelOutOfBounds { u, v, width, height });
    }
    let round = |x: f64, n: usize| ((x - 0.5).ceil().max(0.0) as usize).min(n - 1);
    Ok((round(u, width), round(v, height)))
}

/// A 2D raster that can be sampled by pixel.
pub trait PixelGrid {
    type Sample<'a>
    where
        Self: 'a;

    fn width(&self) -> usize;
    fn height(&self) -> usize;
    fn pixel(&self, row: usize, col: usize) -> Self::Sample<'_>;
}

pub fn sample_nearest<M: PixelGrid>(map: &M, u: f64, v: f64) -> Result<M::Sample<'_>> {
    let (col, row) = nearest_pixel(map.width(), map.height(), u, v)?;
    Ok(map.pixel(row, col))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_camera() -> CameraModel {
        CameraModel::new(100.0, 120.0, 32.0, 24.0, Matrix3::identity(), Vector3::zeros(), 64, 48).unwrap()
    }

    #[test]
    fn voxel_center_examples() {
        let g = VoxelGridSpec::new(Vector3::zeros(), 1.0, [2, 2, 2]).unwrap();
        assert_eq!(g.voxel_center([0, 0, 0]).unwrap(), Vector3::new(0.5, 0.5, 0.5));

        let g = VoxelGridSpec::new(Vector3::zeros(), 0.2, [256, 256, 32]).unwrap();
        let c = g.voxel_center([255, 255, 31]).unwrap();
        assert!((c - Vector3::new(51.1, 51.1, 6.3)).amax() < 1e-9);

        let g = VoxelGridSpec::new(Vector3::repeat(-1.0), 2.0, [2, 2, 2]).unwrap();
        assert_eq!(g.voxel_center([1, 0, 0]).unwrap(), Vector3::new(2.0, 0.0, 0.0));
    }

    #[test]
    fn voxel_center_out_of_range() {
        let g = VoxelGridSpec::unit([2, 3, 4]).unwrap();
        assert!(matches!(g.voxel_center([2, 0, 0]), Err(Error::IndexOutOfRange { .. })));
        assert!(g.voxel_center([1, 2, 3]).is_ok());
    }

    #[test]
    fn grid_rejects_bad_specs() {
        assert!(VoxelGridSpec::new(Vector3::zeros(), 0.0, [1, 1, 1]).is_err());
        assert!(VoxelGridSpec::new(Vector3::zeros(), 1.0, [1, 0, 1]).is_err());
    }

    #[test]
    fn linear_index_round_trip() {
        let g = VoxelGridSpec::unit([3, 4, 5]).unwrap();
        for idx in 0..g.num_voxels() {
            assert_eq!(g.linear_index(g.unravel(idx)), idx);
        }
    }

    #[test]
    fn principal_point_on_axis() {
        let cam = identity_camera();
        let p = cam.world_to_image(&Vector3::new(0.0, 0.0, 5.0));
        assert!(p.valid);
        assert_eq!((p.pixel.u, p.pixel.v, p.pixel.depth), (32.0, 24.0, 5.0));
    }

    #[test]
    fn behind_camera_is_invalid() {
        let cam = identity_camera();
        let p = cam.world_to_image(&Vector3::new(0.0, 0.0, -1.0));
        assert!(!p.valid);
        assert_eq!(p.pixel.depth, -1.0);
    }

    #[test]
    fn outside_image_is_invalid() {
        let cam = identity_camera();
        assert!(!cam.world_to_image(&Vector3::new(100.0, 0.0, 1.0)).valid);
    }

    #[test]
    fn camera_rejects_non_orthonormal_rotation() {
        let r = Matrix3::identity() * 1.01;
        assert!(CameraModel::new(1.0, 1.0, 0.0, 0.0, r, Vector3::zeros(), 1, 1).is_err());
        assert!(CameraModel::new(0.0, 1.0, 0.0, 0.0, Matrix3::identity(), Vector3::zeros(), 1, 1).is_err());
    }

    #[test]
    fn looking_camera_centers_forward_point() {
        let pos = Vector3::new(1.0, 2.0, 3.0);
        let cam = CameraModel::looking(50.0, 50.0, 20.0, 10.0, pos, 0.3, 0.2, 40, 20).unwrap();
        assert!((cam.center() - pos).amax() < 1e-12);
        let fwd = Vector3::new(0.2f64.cos() * 0.3f64.cos(), 0.2f64.cos() * 0.3f64.sin(), -0.2f64.sin());
        let p = cam.world_to_image(&(pos + 4.0 * fwd));
        assert!(p.valid);
        assert!((p.pixel.u - 20.0).abs() < 1e-9 && (p.pixel.v - 10.0).abs() < 1e-9);
        assert!((cam.rotation().determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nearest_pixel_rules() {
        assert_eq!(nearest_pixel(8, 10, 3.0, 7.0).unwrap(), (3, 7));
        assert_eq!(nearest_pixel(8, 10, 3.5, 7.5).unwrap(), (3, 7));
        assert_eq!(nearest_pixel(8, 10, 3.51, 7.49).unwrap(), (4, 7));
        assert_eq!(nearest_pixel(8, 10, 0.0, 0.0).unwrap(), (0, 0));
        assert_eq!(nearest_pixel(8, 10, 7.9, 9.9).unwrap(), (7, 9));
        assert!(nearest_pixel(8, 10, 8.0, 0.0).is_err());
        assert!(nearest_pixel(8, 10, -0.1, 0.0).is_err());
        assert!(nearest_pixel(8, 10, f64::NAN, 0.0).is_err());
    }

    /// Tie-rule oracle: among the four surrounding integer pixels pick the
    /// closest; on equal distance prefer the smaller (row, col).
    #[test]
    fn nearest_pixel_matches_neighbor_enumeration() {
        let pts: [(f64, f64); 5] = [(3.5, 7.5), (0.5, 0.5), (2.25, 1.75), (6.5, 2.0), (1.0, 8.5)];
        for (u, v) in pts {
            let mut best = None;
            for dr in 0..2 {
                for dc in 0..2 {
                    let col = u.floor() as usize + dc;
                    let row = v.floor() as usize + dr;
                    let d = (col as f64 - u).powi(2) + (row as f64 - v).powi(2);
                    match best {
                        Some((bd, _, _)) if d >= bd => {}
                        _ => best = Some((d, col, row)),
                    }
                }
            }
            let (_, col, row) = best.unwrap();
            assert_eq!(nearest_pixel(8, 10, u, v).unwrap(), (col, row), "uv=({u},{v})");
        }
    }
}
