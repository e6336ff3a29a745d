//! Dense voxel containers: real-valued feature volumes and label volumes.

use crate::error::{Error, Result};
use crate::geometry::VoxelGridSpec;

/// Dense `H×W×L×D` feature volume with a per-voxel observed mask.
///
/// Storage is voxel-major (`linear_index * D + c`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    grid: VoxelGridSpec,
    channels: usize,
    data: Vec<f64>,
    observed: Vec<bool>,
}

impl FeatureVolume {
    pub fn zeros(grid: VoxelGridSpec, channels: usize) -> Self {
        let n = grid.num_voxels();
        Self {
            grid,
            channels,
            data: vec![0.0; n * channels],
            observed: vec![false; n],
        }
    }

    pub fn from_parts(grid: VoxelGridSpec, channels: usize, data: Vec<f64>, observed: Vec<bool>) -> Result<Self> {
        let n = grid.num_voxels();
        if data.len() != n * channels || observed.len() != n {
            return Err(Error::dims(format!(
                "volume {:?}x{channels}: data {} mask {}",
                grid.dims(),
                data.len(),
                observed.len()
            )));
        }
        Ok(Self {
            grid,
            channels,
            data,
            observed,
        })
    }

    pub fn grid(&self) -> &VoxelGridSpec {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_voxels(&self) -> usize {
        self.grid.num_voxels()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn observed_mut(&mut self) -> &mut [bool] {
        &mut self.observed
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&o| o).count()
    }

    pub fn set_all_observed(&mut self) {
        self.observed.iter_mut().for_each(|o| *o = true);
    }

    #[inline]
    pub fn voxel(&self, index: [usize; 3]) -> &[f64] {
        self.voxel_at(self.grid.linear_index(index))
    }

    #[inline]
    pub fn voxel_mut(&mut self, index: [usize; 3]) -> &mut [f64] {
        let i = self.grid.linear_index(index);
        self.voxel_at_mut(i)
    }

    #[inline]
    pub fn voxel_at(&self, linear: usize) -> &[f64] {
        &self.data[linear * self.channels..(linear + 1) * self.channels]
    }

    #[inline]
    pub fn voxel_at_mut(&mut self, linear: usize) -> &mut [f64] {
        &mut self.data[linear * self.channels..(linear + 1) * self.channels]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dims() == other.dims() && self.channels == other.channels
    }

    /// Elementwise sum; masks are OR-combined.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::dims(format!(
                "add: {:?}x{} vs {:?}x{}",
                self.dims(),
                self.channels,
                other.dims(),
                other.channels
            )));
        }
        let mut out = self.clone();
        out.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
        out.observed.iter_mut().zip(&other.observed).for_each(|(a, b)| *a |= b);
        Ok(out)
    }

    /// Copies the leading `dims` sub-block (used to undo even-padding).
    pub fn cropped(&self, dims: [usize; 3]) -> Result<Self> {
        let src = self.dims();
        if (0..3).any(|a| dims[a] > src[a]) {
            return Err(Error::dims(format!("crop {dims:?} larger than {src:?}")));
        }
        let grid = self.grid.with_dims(dims)?;
        let mut out = Self::zeros(grid, self.channels);
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let s = self.grid.linear_index([i, j, k]);
                    let d = grid.linear_index([i, j, k]);
                    out.voxel_at_mut(d).copy_from_slice(self.voxel_at(s));
                    out.observed[d] = self.observed[s];
                }
            }
        }
        Ok(out)
    }
}

/// Channel concatenation `[a | b]`; masks are OR-combined.
pub fn concat_channels(a: &FeatureVolume, b: &FeatureVolume) -> Result<FeatureVolume> {
    if a.dims() != b.dims() {
        return Err(Error::dims(format!("concat: dims {:?} vs {:?}", a.dims(), b.dims())));
    }
    let (ca, cb) = (a.channels(), b.channels());
    let n = a.num_voxels();
    let mut data = Vec::with_capacity(n * (ca + cb));
    for v in 0..n {
        data.extend_from_slice(a.voxel_at(v));
        data.extend_from_slice(b.voxel_at(v));
    }
    let observed = a.observed().iter().zip(b.observed()).map(|(x, y)| *x || *y).collect();
    FeatureVolume::from_parts(*a.grid(), ca + cb, data, observed)
}

/// Splits off the first `first` channels; both halves keep the input mask.
pub fn split_channels(v: &FeatureVolume, first: usize) -> Result<(FeatureVolume, FeatureVolume)> {
    let c = v.channels();
    if first > c {
        return Err(Error::dims(format!("split at {first} of {c} channels")));
    }
    let n = v.num_voxels();
    let mut a = Vec::with_capacity(n * first);
    let mut b = Vec::with_capacity(n * (c - first));
    for i in 0..n {
        let vox = v.voxel_at(i);
        a.extend_from_slice(&vox[..first]);
        b.extend_from_slice(&vox[first..]);
    }
    Ok((
        FeatureVolume::from_parts(*v.grid(), first, a, v.observed().to_vec())?,
        FeatureVolume::from_parts(*v.grid(), c - first, b, v.observed().to_vec())?,
    ))
}

/// Label reserved for ignored / unlabeled voxels.
pub const IGNORE_LABEL: u8 = 255;

/// Integer label volume: 0 = empty, 1..=N semantic classes, 255 = ignore.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVolume {
    dims: [usize; 3],
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn filled(dims: [usize; 3], label: u8) -> Self {
        Self {
            dims,
            data: vec![label; dims.iter().product()],
        }
    }

    pub fn from_parts(dims: [usize; 3], data: Vec<u8>) -> Result<Self> {
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::dims(format!("label dims {dims:?} overflow")))?;
        if data.len() != n {
            return Err(Error::dims(format!("label volume {dims:?}: {} labels", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn linear_index(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn get(&self, index: [usize; 3]) -> u8 {
        self.data[self.linear_index(index)]
    }

    pub fn set(&mut self, index: [usize; 3], label: u8) {
        let i = self.linear_index(index);
        self.data[i] = label;
    }

    /// Checks every label is in `0..=num_classes` or the ignore label.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize > num_classes)
        {
            Some(l) => Err(Error::param(format!("label {l} outside 0..={num_classes}"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> VoxelGridSpec {
        VoxelGridSpec::unit([2, 3, 2]).unwrap()
    }

    #[test]
    fn concat_puts_vision_first() {
        let g = grid();
        let a = FeatureVolume::from_parts(g, 1, vec![1.0; 12], vec![true; 12]).unwrap();
        let b = FeatureVolume::from_parts(g, 1, vec![2.0; 12], vec![false; 12]).unwrap();
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.channels(), 2);
        assert_eq!(c.voxel([1, 2, 1]), &[1.0, 2.0]);
        assert!(c.observed().iter().all(|&o| o));
    }

    #[test]
    fn zero_language_leaves_upper_channels_zero() {
        let g = grid();
        let a = FeatureVolume::from_parts(g, 2, (0..24).map(|x| x as f64 + 1.0).collect(), vec![true; 12]).unwrap();
        let b = FeatureVolume::zeros(g, 2);
        let c = concat_channels(&a, &b).unwrap();
        for v in 0..c.num_voxels() {
            assert_eq!(&c.voxel_at(v)[2..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn split_undoes_concat() {
        let g = grid();
        let mask: Vec<bool> = (0..12).map(|i| i % 3 == 0).collect();
        let a = FeatureVolume::from_parts(g, 2, (0..24).map(|x| x as f64 * 0.5).collect(), mask.clone()).unwrap();
        let b = FeatureVolume::from_parts(g, 3, (0..36).map(|x| -(x as f64)).collect(), mask).unwrap();
        let (a2, b2) = split_channels(&concat_channels(&a, &b).unwrap(), 2).unwrap();
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn concat_rejects_mismatched_dims() {
        let a = FeatureVolume::zeros(grid(), 1);
        let b = FeatureVolume::zeros(VoxelGridSpec::unit([2, 2, 2]).unwrap(), 1);
        assert!(concat_channels(&a, &b).is_err());
    }

    #[test]
    fn crop_keeps_leading_block() {
        let g = VoxelGridSpec::unit([4, 4, 2]).unwrap();
        let data: Vec<f64> = (0..32).map(|x| x as f64).collect();
        let v = FeatureVolume::from_parts(g, 1, data, vec![true; 32]).unwrap();
        let c = v.cropped([3, 2, 1]).unwrap();
        assert_eq!(c.voxel([2, 1, 0]), v.voxel([2, 1, 0]));
        assert!(v.cropped([5, 1, 1]).is_err());
    }

    #[test]
    fn label_validation() {
        let mut l = LabelVolume::filled([2, 2, 2], 3);
        assert!(l.validate(3).is_ok());
        l.set([0, 0, 0], IGNORE_LABEL);
        assert!(l.validate(3).is_ok());
        l.set([1, 1, 1], 4);
        assert!(l.validate(3).is_err());
    }
}
