//! Seeded box scenes and their per-pixel class rendering.

use nalgebra::Vector3;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, VoxelGridSpec};
use crate::rng::seeded;
use crate::volume::LabelVolume;
use crate::vsg::ClassMap;

/// Label of the ground layer.
pub const GROUND_CLASS: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub grid: VoxelGridSpec,
    pub num_classes: usize,
    pub num_boxes: usize,
    pub ground_plane: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub grid: VoxelGridSpec,
    pub gt: LabelVolume,
    pub camera: CameraModel,
    /// Class of the first occupied voxel along each pixel ray; 0 on a miss.
    pub image: ClassMap,
}

/// Ground layer at `k = 0` (class 1) plus `num_boxes` seeded axis-aligned
/// boxes resting on it, labelled with classes drawn from `2..=N` (or 1 when
/// `N = 1`).
pub fn build_synthetic_scene(seed: u64, spec: &SceneSpec, camera: &CameraModel) -> Result<SyntheticScene> {
    if spec.num_classes == 0 || spec.num_classes > 254 {
        return Err(Error::param(format!("scene needs 1..=254 classes, got {}", spec.num_classes)));
    }
    let dims = spec.grid.dims();
    let [h, w, l] = dims;
    let mut gt = LabelVolume::filled(dims, 0);
    if spec.ground_plane {
        for i in 0..h {
            for j in 0..w {
                gt.set([i, j, 0], GROUND_CLASS);
            }
        }
    }
    let base = usize::from(spec.ground_plane).min(l - 1);
    let mut rng = seeded(seed);
    for _ in 0..spec.num_boxes {
        let class = if spec.num_classes >= 2 {
            rng.random_range(2..=spec.num_classes) as u8
        } else {
            GROUND_CLASS
        };
        let size = [
            rng.random_range(1..=(h / 4).max(1)),
            rng.random_range(1..=(w / 4).max(1)),
            rng.random_range(1..=((l - base) / 2).max(1)),
        ];
        let start = [
            rng.random_range(0..=h - size[0]),
            rng.random_range(0..=w - size[1]),
            base,
        ];
        for i in start[0]..start[0] + size[0] {
            for j in start[1]..start[1] + size[1] {
                for k in start[2]..(start[2] + size[2]).min(l) {
                    gt.set([i, j, k], class);
                }
            }
        }
    }
    let image = render_class_image(&spec.grid, &gt, camera)?;
    Ok(SyntheticScene {
        grid: spec.grid,
        gt,
        camera: *camera,
        image,
    })
}

/// Renders every pixel `(row, col)` along the ray through image point
/// `(u, v) = (col, row)`.
pub fn render_class_image(grid: &VoxelGridSpec, gt: &LabelVolume, camera: &CameraModel) -> Result<ClassMap> {
    if gt.dims() != grid.dims() {
        return Err(Error::dims(format!("labels {:?} vs grid {:?}", gt.dims(), grid.dims())));
    }
    let origin = camera.center();
    let mut data = Vec::with_capacity(camera.image_width * camera.image_height);
    for row in 0..camera.image_height {
        for col in 0..camera.image_width {
            let dir = camera.pixel_ray(col as f64, row as f64);
            data.push(first_hit(grid, gt, &origin, &dir).map_or(0, |(_, label)| label as u32));
        }
    }
    ClassMap::new(camera.image_height, camera.image_width, data)
}

/// Ray parameter interval `[t0, t1]` inside the grid box, clipped to `t >= 0`.
fn grid_interval(grid: &VoxelGridSpec, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
    let lo = grid.origin();
    let hi = lo + grid.extent();
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < lo[a] || origin[a] >= hi[a] {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((lo[a] - origin[a]) / dir[a], (hi[a] - origin[a]) / dir[a]);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    (t0 <= t1).then_some((t0, t1))
}

/// First occupied voxel along `origin + t·dir`, `t >= 0`, by voxel traversal.
/// Returns the voxel index and its label.
pub fn first_hit(
    grid: &VoxelGridSpec,
    gt: &LabelVolume,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<([usize; 3], u8)> {
    let (t0, t1) = grid_interval(grid, origin, dir)?;
    let dims = grid.dims();
    let s = grid.voxel_size();
    let lo = grid.origin();
    let entry = origin + dir * t0;
    let mut idx = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        let cell = ((entry[a] - lo[a]) / s).floor() as i64;
        idx[a] = cell.clamp(0, dims[a] as i64 - 1);
        if dir[a] > 0.0 {
            step[a] = 1;
            t_max[a] = (lo[a] + (idx[a] + 1) as f64 * s - origin[a]) / dir[a];
            t_delta[a] = s / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (lo[a] + idx[a] as f64 * s - origin[a]) / dir[a];
            t_delta[a] = -s / dir[a];
        }
    }
    loop {
        let v = [idx[0] as usize, idx[1] as usize, idx[2] as usize];
        let label = gt.get(v);
        if label != 0 {
            return Some((v, label));
        }
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        if t_max[a] > t1 {
            return None;
        }
        idx[a] += step[a];
        if idx[a] < 0 || idx[a] >= dims[a] as i64 {
            return None;
        }
        t_max[a] += t_delta[a];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(num_boxes: usize, ground_plane: bool) -> SceneSpec {
        SceneSpec {
            grid: VoxelGridSpec::new(Vector3::new(0.0, -3.2, 0.0), 0.2, [32, 32, 8]).unwrap(),
            num_classes: 8,
            num_boxes,
            ground_plane,
        }
    }

    fn camera() -> CameraModel {
        CameraModel::looking(
            40.0,
            40.0,
            32.0,
            24.0,
            Vector3::new(-0.4, 0.0, 1.5),
            0.0,
            25f64.to_radians(),
            64,
            48,
        )
        .unwrap()
    }

    #[test]
    fn deterministic() {
        let a = build_synthetic_scene(11, &spec(6, true), &camera()).unwrap();
        let b = build_synthetic_scene(11, &spec(6, true), &camera()).unwrap();
        assert_eq!(a, b);
        let c = build_synthetic_scene(12, &spec(6, true), &camera()).unwrap();
        assert_ne!(a.gt, c.gt);
    }

    #[test]
    fn ground_only_scene_renders_ground() {
        let s = build_synthetic_scene(0, &spec(0, true), &camera()).unwrap();
        let cam = camera();
        let c = cam.center();
        for row in 0..48 {
            for col in 0..64 {
                let d = cam.pixel_ray(col as f64, row as f64);
                // Where the ray meets z = 0 inside the grid footprint, it must
                // have crossed the ground layer first.
                if d.z < 0.0 {
                    let t = -c.z / d.z;
                    let p = c + d * t;
                    if p.x > 0.0 && p.x < 6.4 && p.y > -3.2 && p.y < 3.2 {
                        assert_eq!(s.image.at(row, col), 1, "pixel {row},{col}");
                    }
                }
                assert!(s.image.at(row, col) <= 1);
            }
        }
    }

    #[test]
    fn empty_scene_renders_nothing() {
        let s = build_synthetic_scene(0, &spec(0, false), &camera()).unwrap();
        assert!(s.gt.data().iter().all(|&l| l == 0));
        assert!(s.image.data().iter().all(|&l| l == 0));
    }

    #[test]
    fn traversal_inside_and_outside() {
        let g = VoxelGridSpec::unit([4, 4, 4]).unwrap();
        let mut gt = LabelVolume::filled([4, 4, 4], 0);
        gt.set([3, 1, 2], 5);
        let hit = first_hit(&g, &gt, &Vector3::new(-1.0, 1.5, 2.5), &Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(hit, Some(([3, 1, 2], 5)));
        assert_eq!(
            first_hit(&g, &gt, &Vector3::new(-1.0, 1.5, 2.5), &Vector3::new(-1.0, 0.0, 0.0)),
            None
        );
        assert_eq!(
            first_hit(&g, &gt, &Vector3::new(1.5, 1.5, 2.5), &Vector3::new(1.0, 0.0, 0.0)),
            Some(([3, 1, 2], 5))
        );
        assert_eq!(
            first_hit(&g, &gt, &Vector3::new(-1.0, 9.0, 2.5), &Vector3::new(1.0, 0.0, 0.0)),
            None
        );
    }

    #[test]
    fn rejects_zero_classes() {
        let mut s = spec(1, true);
        s.num_classes = 0;
        assert!(build_synthetic_scene(0, &s, &camera()).is_err());
    }
}
