//! Dense 3D convolution with zero padding.
//!
//! All 3D kernels in the crate share one weight layout: taps are ordered
//! lexicographically by `(dx, dy, dz)` and each tap holds a `c_in × c_out`
//! block, so `weights[((tap * c_in) + ci) * c_out + co]`. A 3³ kernel reads
//! input `o + (dx, dy, dz) - 1` for output `o` (cross-correlation).

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::gaussian_vec;
use crate::volume::FeatureVolume;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelWeights {
    size: usize,
    c_in: usize,
    c_out: usize,
    weights: Vec<f64>,
}

impl KernelWeights {
    pub fn zeros(size: usize, c_in: usize, c_out: usize) -> Self {
        Self {
            size,
            c_in,
            c_out,
            weights: vec![0.0; size.pow(3) * c_in * c_out],
        }
    }

    /// Gaussian taps scaled by `1/sqrt(fan_in)`.
    pub fn seeded(size: usize, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let fan_in = size.pow(3) * c_in;
        let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self {
            size,
            c_in,
            c_out,
            weights: gaussian_vec(rng, size.pow(3) * c_in * c_out, scale),
        }
    }

    pub fn from_vec(size: usize, c_in: usize, c_out: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != size.pow(3) * c_in * c_out {
            return Err(Error::dims(format!(
                "kernel {size}^3x{c_in}x{c_out} needs {} weights, got {}",
                size.pow(3) * c_in * c_out,
                weights.len()
            )));
        }
        Ok(Self {
            size,
            c_in,
            c_out,
            weights,
        })
    }

    /// 3³ kernel whose center tap copies input channel `c` to output `c`
    /// for `c < min(c_in, c_out)`.
    pub fn center_identity(c_in: usize, c_out: usize) -> Self {
        let mut k = Self::zeros(3, c_in, c_out);
        for c in 0..c_in.min(c_out) {
            k.set(13, c, c, 1.0);
        }
        k
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn taps(&self) -> usize {
        self.size.pow(3)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn tap_index(&self, [dx, dy, dz]: [usize; 3]) -> usize {
        (dx * self.size + dy) * self.size + dz
    }

    /// `c_in × c_out` block of one tap.
    #[inline]
    pub fn tap(&self, tap: usize) -> &[f64] {
        let n = self.c_in * self.c_out;
        &self.weights[tap * n..(tap + 1) * n]
    }

    pub fn get(&self, tap: usize, ci: usize, co: usize) -> f64 {
        self.weights[(tap * self.c_in + ci) * self.c_out + co]
    }

    pub fn set(&mut self, tap: usize, ci: usize, co: usize, value: f64) {
        self.weights[(tap * self.c_in + ci) * self.c_out + co] = value;
    }

    /// `out += tap^T x` for one tap.
    #[inline]
    pub(crate) fn accumulate(&self, tap: usize, x: &[f64], out: &mut [f64]) {
        let block = self.tap(tap);
        for (ci, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let row = &block[ci * self.c_out..(ci + 1) * self.c_out];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xv * w;
            }
        }
    }
}

/// Dense 3³ convolution, stride 1, zero padding, with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub kernel: KernelWeights,
    pub bias: Vec<f64>,
}

impl Conv3d {
    pub fn new(kernel: KernelWeights, bias: Vec<f64>) -> Result<Self> {
        if kernel.size() != 3 || bias.len() != kernel.c_out() {
            return Err(Error::dims(format!(
                "conv3d needs a 3^3 kernel and {} biases",
                kernel.c_out()
            )));
        }
        Ok(Self { kernel, bias })
    }

    /// Seeded kernel, zero bias.
    pub fn seeded(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            kernel: KernelWeights::seeded(3, c_in, c_out, rng),
            bias: vec![0.0; c_out],
        }
    }

    pub fn center_identity(c_in: usize, c_out: usize) -> Self {
        Self {
            kernel: KernelWeights::center_identity(c_in, c_out),
            bias: vec![0.0; c_out],
        }
    }

    pub fn c_in(&self) -> usize {
        self.kernel.c_in()
    }

    pub fn c_out(&self) -> usize {
        self.kernel.c_out()
    }

    /// Output keeps the input grid and observed mask.
    pub fn forward(&self, x: &FeatureVolume) -> Result<FeatureVolume> {
        if x.channels() != self.c_in() {
            return Err(Error::dims(format!(
                "conv3d expects {} input channels, got {}",
                self.c_in(),
                x.channels()
            )));
        }
        let grid = *x.grid();
        let [h, w, l] = grid.dims();
        let mut out = FeatureVolume::zeros(grid, self.c_out());
        out.observed_mut().copy_from_slice(x.observed());
        for i in 0..h {
            for j in 0..w {
                for k in 0..l {
                    let o = grid.linear_index([i, j, k]);
                    let acc = out.voxel_at_mut(o);
                    acc.copy_from_slice(&self.bias);
                    for dx in 0..3 {
                        let Some(si) = shift(i, dx, h) else { continue };
                        for dy in 0..3 {
                            let Some(sj) = shift(j, dy, w) else { continue };
                            for dz in 0..3 {
                                let Some(sk) = shift(k, dz, l) else { continue };
                                let tap = (dx * 3 + dy) * 3 + dz;
                                self.kernel.accumulate(tap, x.voxel([si, sj, sk]), acc);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// `pos + delta - 1` if it lies in `0..len`.
#[inline]
pub(crate) fn shift(pos: usize, delta: usize, len: usize) -> Option<usize> {
    let p = (pos + delta).checked_sub(1)?;
    (p < len).then_some(p)
}
