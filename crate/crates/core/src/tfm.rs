//! Tri-plane fusion block.
//!
//! The vision and language volumes are concatenated along channels into a
//! fused volume `G_F` (`H×W×L×2D`). For each of the three axis-aligned planes
//! the orthogonal axis is folded into the channel dimension and a linear map
//! brings the folded vector down to `D` plane channels:
//!
//! | plane | plane shape | folded axis |
//! |-------|-------------|-------------|
//! | XY    | H × W       | L           |
//! | YZ    | W × L       | H           |
//! | ZX    | L × H       | W           |
//!
//! Each plane is flattened row-major into one sequence and run through a
//! shared [`SsmBlock`]; a second linear map per plane restores `axis·2D`
//! channels, which are unfolded back into `H×W×L×2D`. The three restored
//! volumes are summed in the order XY, YZ, ZX, the input `G_F` is added back
//! as a residual, and the result is split into updated vision and language
//! volumes.

use rand::Rng;

use crate::counters::Counters;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::ssm::{BlockConfig, ByteReader, ByteWriter, SsmBlock};
use crate::volume::{concat_channels, split_channels, FeatureVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Plane {
    XY,
    YZ,
    ZX,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::XY, Plane::YZ, Plane::ZX];

    /// `(rows, cols, folded axis length)` for grid dims `[H, W, L]`.
    pub fn shape(self, [h, w, l]: [usize; 3]) -> (usize, usize, usize) {
        match self {
            Plane::XY => (h, w, l),
            Plane::YZ => (w, l, h),
            Plane::ZX => (l, h, w),
        }
    }

    /// Voxel index of plane cell `(row, col)` at folded position `a`.
    #[inline]
    pub fn voxel(self, row: usize, col: usize, a: usize) -> [usize; 3] {
        match self {
            Plane::XY => [row, col, a],
            Plane::YZ => [a, row, col],
            Plane::ZX => [col, a, row],
        }
    }

    pub fn tag(self) -> u32 {
        match self {
            Plane::XY => 0,
            Plane::YZ => 1,
            Plane::ZX => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(Plane::XY),
            1 => Ok(Plane::YZ),
            2 => Ok(Plane::ZX),
            t => Err(Error::Format(format!("unknown plane tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::XY => "xy",
            Plane::YZ => "yz",
            Plane::ZX => "zx",
        }
    }

    /// SSM timesteps one plane pass takes for a grid.
    pub fn sequence_len(self, dims: [usize; 3]) -> usize {
        let (r, c, _) = self.shape(dims);
        r * c
    }
}

/// `H·W + W·L + L·H`, the per-direction timestep count of one block.
pub fn triplane_steps([h, w, l]: [usize; 3]) -> u64 {
    (h * w + w * l + l * h) as u64
}

/// 2D plane feature, row-major cells with `channels` values each.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFeature {
    pub plane: Plane,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl PlaneFeature {
    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let p = row * self.cols + col;
        &self.data[p * self.channels..(p + 1) * self.channels]
    }
}

/// Folding maps for one plane: `project` takes `axis·fused` channels to `D`,
/// `unproject` maps `D` back to `axis·fused`. Folded index is `a * fused + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneProjector {
    pub plane: Plane,
    pub axis_len: usize,
    pub fused_channels: usize,
    pub channels: usize,
    pub project: Linear,
    pub unproject: Linear,
}

impl PlaneProjector {
    pub fn zeros(plane: Plane, axis_len: usize, fused_channels: usize, channels: usize) -> Self {
        let folded = axis_len * fused_channels;
        Self {
            plane,
            axis_len,
            fused_channels,
            channels,
            project: Linear::zeros(folded, channels),
            unproject: Linear::zeros(channels, folded),
        }
    }

    pub fn seeded(plane: Plane, axis_len: usize, fused_channels: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let folded = axis_len * fused_channels;
        Self {
            plane,
            axis_len,
            fused_channels,
            channels,
            project: Linear::seeded(folded, channels, rng),
            unproject: Linear::seeded(channels, folded, rng),
        }
    }

    pub fn folded(&self) -> usize {
        self.axis_len * self.fused_channels
    }

    fn check_volume(&self, dims: [usize; 3], channels: usize) -> Result<()> {
        let (_, _, axis) = self.plane.shape(dims);
        if axis != self.axis_len || channels != self.fused_channels {
            return Err(Error::dims(format!(
                "{} projector folds {}x{}, volume gives {axis}x{channels}",
                self.plane.name(),
                self.axis_len,
                self.fused_channels
            )));
        }
        Ok(())
    }
}

/// Folds the orthogonal axis into channels and applies the plane's linear map.
pub fn plane_project(fused: &FeatureVolume, proj: &PlaneProjector) -> Result<PlaneFeature> {
    let dims = fused.dims();
    proj.check_volume(dims, fused.channels())?;
    let (rows, cols, axis) = proj.plane.shape(dims);
    let c2 = proj.fused_channels;
    let grid = fused.grid();
    let mut folded = vec![0.0; proj.folded()];
    let mut data = vec![0.0; rows * cols * proj.channels];
    for r in 0..rows {
        for c in 0..cols {
            for a in 0..axis {
                let v = grid.linear_index(proj.plane.voxel(r, c, a));
                folded[a * c2..(a + 1) * c2].copy_from_slice(fused.voxel_at(v));
            }
            let p = r * cols + c;
            proj.project.forward_into(&folded, &mut data[p * proj.channels..(p + 1) * proj.channels]);
        }
    }
    Ok(PlaneFeature {
        plane: proj.plane,
        rows,
        cols,
        channels: proj.channels,
        data,
    })
}

/// Runs the shared sequence block over the row-major flattened plane.
pub fn plane_ssm(plane: &PlaneFeature, block: &SsmBlock, counters: &Counters) -> Result<PlaneFeature> {
    if plane.channels != block.channels() {
        return Err(Error::dims(format!(
            "plane has {} channels, SSM block {}",
            plane.channels,
            block.channels()
        )));
    }
    let data = block.forward_counted(&plane.data, plane.rows * plane.cols, counters)?;
    Ok(PlaneFeature { data, ..plane.clone() })
}

/// Restores `axis·2D` channels per plane cell and unfolds them into a volume
/// on `template`'s grid.
pub fn plane_unproject(plane: &PlaneFeature, proj: &PlaneProjector, template: &FeatureVolume) -> Result<FeatureVolume> {
    let mut out = FeatureVolume::zeros(*template.grid(), proj.fused_channels);
    unproject_accumulate(plane, proj, &mut out)?;
    out.set_all_observed();
    Ok(out)
}

fn unproject_accumulate(plane: &PlaneFeature, proj: &PlaneProjector, out: &mut FeatureVolume) -> Result<()> {
    let dims = out.dims();
    proj.check_volume(dims, out.channels())?;
    let (rows, cols, axis) = proj.plane.shape(dims);
    if (plane.rows, plane.cols, plane.channels) != (rows, cols, proj.channels) || plane.plane != proj.plane {
        return Err(Error::dims(format!(
            "{} plane {}x{}x{} does not fit projector {}x{}x{}",
            plane.plane.name(),
            plane.rows,
            plane.cols,
            plane.channels,
            rows,
            cols,
            proj.channels
        )));
    }
    let c2 = proj.fused_channels;
    let grid = *out.grid();
    let mut folded = vec![0.0; proj.folded()];
    for r in 0..rows {
        for c in 0..cols {
            proj.unproject.forward_into(plane.cell(r, c), &mut folded);
            for a in 0..axis {
                let v = grid.linear_index(proj.plane.voxel(r, c, a));
                for (o, x) in out.voxel_at_mut(v).iter_mut().zip(&folded[a * c2..(a + 1) * c2]) {
                    *o += x;
                }
            }
        }
    }
    Ok(())
}

/// Three plane projectors plus the shared sequence block.
#[derive(Debug, Clone, PartialEq)]
pub struct TfmBlock {
    dims: [usize; 3],
    channels: usize,
    pub projectors: [PlaneProjector; 3],
    pub ssm: SsmBlock,
}

impl TfmBlock {
    /// Block for `H×W×L` volumes with `channels` per modality.
    pub fn seeded(
        dims: [usize; 3],
        channels: usize,
        state: usize,
        config: BlockConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let ssm = SsmBlock::seeded(channels, state, config, rng)?;
        Self::with_ssm(dims, channels, ssm, rng)
    }

    /// Seeded projectors around an existing sequence block.
    pub fn with_ssm(dims: [usize; 3], channels: usize, ssm: SsmBlock, rng: &mut impl Rng) -> Result<Self> {
        if ssm.channels() != channels {
            return Err(Error::dims(format!(
                "SSM block has {} channels, TFM needs {channels}",
                ssm.channels()
            )));
        }
        let projectors = Plane::ALL.map(|p| PlaneProjector::seeded(p, p.shape(dims).2, 2 * channels, channels, rng));
        Ok(Self {
            dims,
            channels,
            projectors,
            ssm,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn zero_projectors(&mut self) {
        for p in &mut self.projectors {
            *p = PlaneProjector::zeros(p.plane, p.axis_len, p.fused_channels, p.channels);
        }
    }

    /// `G^XY + G^YZ + G^ZX` for a fused volume, without the residual.
    pub fn fuse_planes(&self, fused: &FeatureVolume, counters: &Counters) -> Result<FeatureVolume> {
        if fused.dims() != self.dims || fused.channels() != 2 * self.channels {
            return Err(Error::dims(format!(
                "TFM built for {:?}x{}, got {:?}x{}",
                self.dims,
                2 * self.channels,
                fused.dims(),
                fused.channels()
            )));
        }
        let mut out = FeatureVolume::zeros(*fused.grid(), fused.channels());
        for proj in &self.projectors {
            let plane = plane_project(fused, proj)?;
            let plane = plane_ssm(&plane, &self.ssm, counters)?;
            unproject_accumulate(&plane, proj, &mut out)?;
        }
        out.set_all_observed();
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        self.ssm.write_into(&mut w);
        for p in &self.projectors {
            w.u32(p.plane.tag());
            w.u32(p.axis_len as u32);
            w.u32(p.fused_channels as u32);
            w.u32(p.channels as u32);
            w.f64s(&p.project.weight);
            w.f64s(&p.unproject.weight);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let ssm = SsmBlock::read_from(&mut r)?;
        let channels = ssm.channels();
        let mut projectors = Vec::with_capacity(3);
        for expected in Plane::ALL {
            let plane = Plane::from_tag(r.u32()?)?;
            if plane != expected {
                return Err(Error::Format(format!("expected {} section", expected.name())));
            }
            let axis_len = r.u32()? as usize;
            let fused = r.u32()? as usize;
            let ch = r.u32()? as usize;
            if ch != channels || fused != 2 * channels || axis_len == 0 {
                return Err(Error::Format(format!("{} section has inconsistent sizes", plane.name())));
            }
            let folded = axis_len * fused;
            let project = Linear::from_parts(folded, ch, r.f64s(folded * ch)?, vec![0.0; ch])?;
            let unproject = Linear::from_parts(ch, folded, r.f64s(folded * ch)?, vec![0.0; folded])?;
            projectors.push(PlaneProjector {
                plane,
                axis_len,
                fused_channels: fused,
                channels: ch,
                project,
                unproject,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after TFM blob", r.remaining())));
        }
        // Folded lengths are L (XY), H (YZ), W (ZX).
        let dims = [projectors[1].axis_len, projectors[2].axis_len, projectors[0].axis_len];
        let projectors: [PlaneProjector; 3] = projectors.try_into().expect("three sections");
        Ok(Self {
            dims,
            channels,
            projectors,
            ssm,
        })
    }
}

/// Fuses vision and language volumes; returns the updated pair.
pub fn tfm_forward(
    vision: &FeatureVolume,
    language: &FeatureVolume,
    block: &TfmBlock,
    counters: &Counters,
) -> Result<(FeatureVolume, FeatureVolume)> {
    if !vision.same_shape(language) {
        return Err(Error::dims(format!(
            "vision {:?}x{} vs language {:?}x{}",
            vision.dims(),
            vision.channels(),
            language.dims(),
            language.channels()
        )));
    }
    let fused = concat_channels(vision, language)?;
    let mut out = block.fuse_planes(&fused, counters)?;
    out.data_mut().iter_mut().zip(fused.data()).for_each(|(o, x)| *o += x);
    split_channels(&out, vision.channels())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::VoxelGridSpec;
    use crate::rng::{gaussian_vec, seeded};

    fn random_volume(dims: [usize; 3], ch: usize, seed: u64) -> FeatureVolume {
        let g = VoxelGridSpec::unit(dims).unwrap();
        let n = g.num_voxels();
        FeatureVolume::from_parts(g, ch, gaussian_vec(&mut seeded(seed), n * ch, 1.0), vec![true; n]).unwrap()
    }

    #[test]
    fn plane_index_maps_are_bijective() {
        let dims = [3, 4, 2];
        let g = VoxelGridSpec::unit(dims).unwrap();
        for plane in Plane::ALL {
            let (r, c, a) = plane.shape(dims);
            let mut seen = vec![false; g.num_voxels()];
            for ri in 0..r {
                for ci in 0..c {
                    for ai in 0..a {
                        let v = plane.voxel(ri, ci, ai);
                        assert!(g.contains(v));
                        seen[g.linear_index(v)] = true;
                    }
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn zero_volume_projects_to_zero() {
        let v = FeatureVolume::zeros(VoxelGridSpec::unit([3, 2, 2]).unwrap(), 4);
        let p = PlaneProjector::seeded(Plane::YZ, 3, 4, 2, &mut seeded(0));
        assert!(plane_project(&v, &p).unwrap().data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn selector_weights_pick_a_slice() {
        let v = random_volume([3, 4, 2], 2, 4);
        let (k0, c0) = (1, 1);
        let mut p = PlaneProjector::zeros(Plane::XY, 2, 2, 1);
        p.project.weight[k0 * 2 + c0] = 1.0;
        let plane = plane_project(&v, &p).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(plane.cell(i, j)[0], v.voxel([i, j, k0])[c0]);
            }
        }
    }

    #[test]
    fn projector_size_mismatch_is_an_error() {
        let v = random_volume([3, 4, 2], 2, 4);
        let p = PlaneProjector::zeros(Plane::XY, 3, 2, 1);
        assert!(plane_project(&v, &p).is_err());
    }

    #[test]
    fn zero_projectors_return_input() {
        let dims = [3, 4, 2];
        let mut block = TfmBlock::seeded(dims, 2, 3, BlockConfig::default(), &mut seeded(1)).unwrap();
        block.zero_projectors();
        let (v, l) = (random_volume(dims, 2, 2), random_volume(dims, 2, 3));
        let (v2, l2) = tfm_forward(&v, &l, &block, &Counters::new()).unwrap();
        assert_eq!(v.data(), v2.data());
        assert_eq!(l.data(), l2.data());
    }

    #[test]
    fn counts_triplane_steps() {
        let dims = [4, 3, 2];
        let block = TfmBlock::seeded(dims, 2, 2, BlockConfig::default(), &mut seeded(1)).unwrap();
        let c = Counters::new();
        tfm_forward(&random_volume(dims, 2, 0), &random_volume(dims, 2, 1), &block, &c).unwrap();
        let s = c.snapshot();
        assert_eq!(s.ssm_forward_steps, 12 + 6 + 8);
        assert_eq!(s.ssm_backward_steps, 12 + 6 + 8);
        assert_eq!(triplane_steps(dims), 26);
    }

    #[test]
    fn degenerate_row_plane_matches_block() {
        // H = 1: the XY plane is a single row of W cells.
        let dims = [1, 5, 2];
        let block = TfmBlock::seeded(dims, 2, 3, BlockConfig::default(), &mut seeded(8)).unwrap();
        let v = random_volume(dims, 4, 5);
        let plane = plane_project(&v, &block.projectors[0]).unwrap();
        let out = plane_ssm(&plane, &block.ssm, &Counters::new()).unwrap();
        assert_eq!(out.data, block.ssm.forward(&plane.data, 5).unwrap());
    }

    #[test]
    fn blob_round_trip() {
        let block = TfmBlock::seeded([3, 4, 2], 2, 3, BlockConfig::default(), &mut seeded(3)).unwrap();
        let bytes = block.to_bytes();
        assert_eq!(&bytes[..4], b"SSM1");
        assert_eq!(TfmBlock::from_bytes(&bytes).unwrap(), block);
        assert!(TfmBlock::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }
}
