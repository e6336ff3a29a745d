//! Sparse voxel tensors and their convolutions.
//!
//! A [`SparseVoxelTensor`] stores features only at active coordinates. The
//! active set of a tensor built from a dense volume is its observed mask, not
//! the set of nonzero features, so a voxel stays active even when a linear
//! layer maps it to zero.
//!
//! Kernels use the crate-wide layout of [`KernelWeights`]. For a 3³ kernel at
//! stride `s`, output site `o` reads input `s·o + δ - 1`.

use std::collections::{BTreeSet, HashMap};

use crate::conv::KernelWeights;
use crate::counters::Counters;
use crate::error::{Error, Result};
use crate::geometry::VoxelGridSpec;
use crate::volume::FeatureVolume;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseVoxelTensor {
    grid: VoxelGridSpec,
    channels: usize,
    coords: Vec<[usize; 3]>,
    features: Vec<f64>,
    lookup: HashMap<[usize; 3], usize>,
}

impl SparseVoxelTensor {
    pub fn empty(grid: VoxelGridSpec, channels: usize) -> Self {
        Self {
            grid,
            channels,
            coords: Vec::new(),
            features: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    /// Builds a tensor from coordinates and per-coordinate features. Coordinates
    /// are sorted; duplicates and out-of-grid entries are rejected.
    pub fn from_parts(
        grid: VoxelGridSpec,
        channels: usize,
        coords: Vec<[usize; 3]>,
        features: Vec<f64>,
    ) -> Result<Self> {
        if features.len() != coords.len() * channels {
            return Err(Error::dims(format!(
                "{} coords x {channels} channels needs {} features, got {}",
                coords.len(),
                coords.len() * channels,
                features.len()
            )));
        }
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_by_key(|&i| coords[i]);
        let mut out = Self::empty(grid, channels);
        out.coords.reserve(coords.len());
        out.features.reserve(features.len());
        for i in order {
            let c = coords[i];
            if !grid.contains(c) {
                return Err(Error::IndexOutOfRange {
                    index: c,
                    dims: grid.dims(),
                });
            }
            if out.lookup.insert(c, out.coords.len()).is_some() {
                return Err(Error::param(format!("duplicate coordinate {c:?}")));
            }
            out.coords.push(c);
            out.features.extend_from_slice(&features[i * channels..(i + 1) * channels]);
        }
        Ok(out)
    }

    /// Active set = observed mask; features copied.
    pub fn from_dense(volume: &FeatureVolume) -> Self {
        let grid = *volume.grid();
        let mut out = Self::empty(grid, volume.channels());
        // Linear order is (i, j, k) lexicographic, so coords come out sorted.
        for (idx, _) in volume.observed().iter().enumerate().filter(|(_, &o)| o) {
            let c = grid.unravel(idx);
            out.lookup.insert(c, out.coords.len());
            out.coords.push(c);
            out.features.extend_from_slice(volume.voxel_at(idx));
        }
        out
    }

    /// Zero-filled dense volume; the observed mask is the active set.
    pub fn to_dense(&self) -> FeatureVolume {
        let mut vol = FeatureVolume::zeros(self.grid, self.channels);
        for (slot, &c) in self.coords.iter().enumerate() {
            let idx = self.grid.linear_index(c);
            vol.voxel_at_mut(idx).copy_from_slice(self.feature(slot));
            vol.observed_mut()[idx] = true;
        }
        vol
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

    /// Active coordinates in ascending `(i, j, k)` order.
    pub fn coords(&self) -> &[[usize; 3]] {
        &self.coords
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature(&self, slot: usize) -> &[f64] {
        &self.features[slot * self.channels..(slot + 1) * self.channels]
    }

    pub fn get(&self, coord: [usize; 3]) -> Option<&[f64]> {
        self.lookup.get(&coord).map(|&s| self.feature(s))
    }

    pub fn contains(&self, coord: [usize; 3]) -> bool {
        self.lookup.contains_key(&coord)
    }
}

fn check_kernel(x: &SparseVoxelTensor, weights: &KernelWeights) -> Result<()> {
    if weights.size() != 3 {
        return Err(Error::param(format!("sparse conv needs a 3^3 kernel, got {}^3", weights.size())));
    }
    if weights.c_in() != x.channels() {
        return Err(Error::dims(format!(
            "kernel expects {} input channels, tensor has {}",
            weights.c_in(),
            x.channels()
        )));
    }
    Ok(())
}

/// Input site read by output `o` through tap offset `d` at `stride`.
#[inline]
fn input_site(o: [usize; 3], d: [usize; 3], stride: usize, dims: [usize; 3]) -> Option<[usize; 3]> {
    let mut s = [0; 3];
    for a in 0..3 {
        let p = (stride * o[a] + d[a]).checked_sub(1)?;
        if p >= dims[a] {
            return None;
        }
        s[a] = p;
    }
    Some(s)
}

/// Output sites that read input `p` through some tap.
fn output_sites(p: [usize; 3], stride: usize, out_dims: [usize; 3], sink: &mut BTreeSet<[usize; 3]>) {
    for dx in 0..3 {
        for dy in 0..3 {
            for dz in 0..3 {
                let d = [dx, dy, dz];
                let mut o = [0; 3];
                let mut ok = true;
                for a in 0..3 {
                    // s·o = p + 1 - d
                    let t = p[a] + 1;
                    if t < d[a] || !(t - d[a]).is_multiple_of(stride) || (t - d[a]) / stride >= out_dims[a] {
                        ok = false;
                        break;
                    }
                    o[a] = (t - d[a]) / stride;
                }
                if ok {
                    sink.insert(o);
                }
            }
        }
    }
}

/// Sum over active neighbours in fixed tap order.
fn convolve_at(x: &SparseVoxelTensor, weights: &KernelWeights, o: [usize; 3], stride: usize, acc: &mut [f64]) {
    let dims = x.dims();
    for dx in 0..3 {
        for dy in 0..3 {
            for dz in 0..3 {
                let Some(s) = input_site(o, [dx, dy, dz], stride, dims) else { continue };
                if let Some(feat) = x.get(s) {
                    weights.accumulate((dx * 3 + dy) * 3 + dz, feat, acc);
                }
            }
        }
    }
}

fn convolve_sites(
    x: &SparseVoxelTensor,
    weights: &KernelWeights,
    grid: VoxelGridSpec,
    sites: Vec<[usize; 3]>,
    stride: usize,
    counters: Option<&Counters>,
) -> SparseVoxelTensor {
    let c_out = weights.c_out();
    let mut features = vec![0.0; sites.len() * c_out];
    for (slot, &o) in sites.iter().enumerate() {
        convolve_at(x, weights, o, stride, &mut features[slot * c_out..(slot + 1) * c_out]);
    }
    if let Some(c) = counters {
        c.add_sparse_sites(x.len() as u64, sites.len() as u64);
    }
    let lookup = sites.iter().enumerate().map(|(s, &c)| (c, s)).collect();
    SparseVoxelTensor {
        grid,
        channels: c_out,
        coords: sites,
        features,
        lookup,
    }
}

/// Output grid of a stride-`s` sparse conv: `ceil(dims / s)` voxels.
pub fn strided_grid(grid: &VoxelGridSpec, stride: usize) -> VoxelGridSpec {
    if stride == 1 {
        *grid
    } else {
        grid.downsampled()
    }
}

/// 3³ sparse convolution, padding 1, stride 1 or 2, no bias. The output is
/// active wherever the receptive field holds at least one active input.
pub fn sparse_conv3d(x: &SparseVoxelTensor, weights: &KernelWeights, stride: usize) -> Result<SparseVoxelTensor> {
    sparse_conv3d_counted(x, weights, stride, None)
}

pub fn sparse_conv3d_counted(
    x: &SparseVoxelTensor,
    weights: &KernelWeights,
    stride: usize,
    counters: Option<&Counters>,
) -> Result<SparseVoxelTensor> {
    check_kernel(x, weights)?;
    if stride != 1 && stride != 2 {
        return Err(Error::param(format!("stride must be 1 or 2, got {stride}")));
    }
    let grid = strided_grid(x.grid(), stride);
    let mut active = BTreeSet::new();
    for &p in x.coords() {
        output_sites(p, stride, grid.dims(), &mut active);
    }
    Ok(convolve_sites(x, weights, grid, active.into_iter().collect(), stride, counters))
}

/// 3³ submanifold convolution: the output active set equals the input's.
pub fn submanifold_conv3d(x: &SparseVoxelTensor, weights: &KernelWeights) -> Result<SparseVoxelTensor> {
    submanifold_conv3d_counted(x, weights, None)
}

pub fn submanifold_conv3d_counted(
    x: &SparseVoxelTensor,
    weights: &KernelWeights,
    counters: Option<&Counters>,
) -> Result<SparseVoxelTensor> {
    check_kernel(x, weights)?;
    Ok(convolve_sites(x, weights, *x.grid(), x.coords().to_vec(), 1, counters))
}

/// Dense 2³ transposed convolution with stride 2: `out[2i + d] += Wᵀ[d] x[i]`.
/// The output grid has half the voxel size and twice the dims; each output
/// voxel inherits its parent's observed flag.
pub fn deconv3d_dense(volume: &FeatureVolume, weights: &KernelWeights) -> Result<FeatureVolume> {
    if weights.size() != 2 {
        return Err(Error::param(format!("deconv needs a 2^3 kernel, got {}^3", weights.size())));
    }
    if weights.c_in() != volume.channels() {
        return Err(Error::dims(format!(
            "deconv expects {} input channels, volume has {}",
            weights.c_in(),
            volume.channels()
        )));
    }
    let src = volume.grid();
    let [h, w, l] = src.dims();
    let grid = VoxelGridSpec::new(src.origin(), src.voxel_size() / 2.0, [2 * h, 2 * w, 2 * l])?;
    let mut out = FeatureVolume::zeros(grid, weights.c_out());
    for i in 0..h {
        for j in 0..w {
            for k in 0..l {
                let idx = src.linear_index([i, j, k]);
                let x = volume.voxel_at(idx);
                let obs = volume.observed()[idx];
                for dx in 0..2 {
                    for dy in 0..2 {
                        for dz in 0..2 {
                            let o = grid.linear_index([2 * i + dx, 2 * j + dy, 2 * k + dz]);
                            weights.accumulate((dx * 2 + dy) * 2 + dz, x, out.voxel_at_mut(o));
                            out.observed_mut()[o] = obs;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}
