//! Reference implementations used to check the fast paths.
//!
//! Each routine takes a deliberately different route from the production code
//! (Taylor scaling-and-squaring instead of Padé, an augmented-matrix
//! exponential instead of a linear solve, plain loops instead of hashed sparse
//! sites) and favours clarity over speed.

use nalgebra::DMatrix;

use crate::conv::KernelWeights;
use crate::geometry::VoxelGridSpec;
use crate::volume::{LabelVolume, IGNORE_LABEL};

/// `exp(M)` by Taylor series with scaling and squaring.
pub fn expm_taylor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let norm = (0..n)
        .map(|r| (0..n).map(|c| m[(r, c)].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut squarings = 0;
    while norm / 2f64.powi(squarings) > 0.5 {
        squarings += 1;
    }
    let scaled = m / 2f64.powi(squarings);
    let mut sum = DMatrix::identity(n, n);
    let mut term = DMatrix::identity(n, n);
    for k in 1..=40 {
        term = &term * &scaled / k as f64;
        sum += &term;
        if term.amax() <= f64::EPSILON * 1e-3 * sum.amax() {
            break;
        }
    }
    for _ in 0..squarings {
        sum = &sum * &sum;
    }
    sum
}

/// Zero-order hold via the block exponential `exp([[ΔA, ΔB], [0, 0]])`, whose
/// top row holds `A_bar` and `B_bar`.
pub fn zoh_van_loan(a: &DMatrix<f64>, b: &[f64], delta: f64) -> (DMatrix<f64>, Vec<f64>) {
    let n = a.nrows();
    let mut m = DMatrix::zeros(n + 1, n + 1);
    for r in 0..n {
        for c in 0..n {
            m[(r, c)] = delta * a[(r, c)];
        }
        m[(r, n)] = delta * b[r];
    }
    let e = expm_taylor(&m);
    let a_bar = e.view((0, 0), (n, n)).into_owned();
    let b_bar = (0..n).map(|r| e[(r, n)]).collect();
    (a_bar, b_bar)
}

/// `K[j] = C A^j B` with each power taken independently.
pub fn kernel_by_powers(a_bar: &DMatrix<f64>, b_bar: &[f64], c: &[f64], len: usize) -> Vec<f64> {
    let n = a_bar.nrows();
    (0..len)
        .map(|j| {
            let p = a_bar.pow(j as u32);
            let mut s = 0.0;
            for r in 0..n {
                for q in 0..n {
                    s += c[r] * p[(r, q)] * b_bar[q];
                }
            }
            s
        })
        .collect()
}

/// Central difference `(f(x + h v) - f(x - h v)) / 2h`.
pub fn central_difference(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    let plus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
    f(&plus).iter().zip(f(&minus)).map(|(p, m)| (p - m) / (2.0 * h)).collect()
}

/// Dense 3³ convolution, padding 1, of a zero-filled volume: inactive inputs
/// (mask `false`) read as zero. Voxel-major `input`, `(i, j, k)` row-major.
/// Returns the output dims and features.
pub fn dense_conv(
    input: &[f64],
    dims: [usize; 3],
    mask: &[bool],
    weights: &KernelWeights,
    stride: usize,
) -> ([usize; 3], Vec<f64>) {
    let (ci_n, co_n) = (weights.c_in(), weights.c_out());
    let out_dims = dims.map(|d| (d + 2 - 3) / stride + 1);
    let [h, w, l] = dims;
    let mut out = vec![0.0; out_dims.iter().product::<usize>() * co_n];
    for oi in 0..out_dims[0] {
        for oj in 0..out_dims[1] {
            for ok in 0..out_dims[2] {
                let o = (oi * out_dims[1] + oj) * out_dims[2] + ok;
                for dx in 0..3 {
                    for dy in 0..3 {
                        for dz in 0..3 {
                            let si = (stride * oi + dx) as isize - 1;
                            let sj = (stride * oj + dy) as isize - 1;
                            let sk = (stride * ok + dz) as isize - 1;
                            if si < 0 || sj < 0 || sk < 0 || si >= h as isize || sj >= w as isize || sk >= l as isize {
                                continue;
                            }
                            let s = (si as usize * w + sj as usize) * l + sk as usize;
                            if !mask[s] {
                                continue;
                            }
                            let tap = (dx * 3 + dy) * 3 + dz;
                            for ci in 0..ci_n {
                                for co in 0..co_n {
                                    out[o * co_n + co] += weights.get(tap, ci, co) * input[s * ci_n + ci];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (out_dims, out)
}

/// Stride-2, 2³ transposed convolution by scattering every input voxel.
pub fn deconv_scatter(input: &[f64], dims: [usize; 3], weights: &KernelWeights) -> Vec<f64> {
    let (ci_n, co_n) = (weights.c_in(), weights.c_out());
    let od = dims.map(|d| 2 * d);
    let mut out = vec![0.0; od.iter().product::<usize>() * co_n];
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let s = (i * dims[1] + j) * dims[2] + k;
                for dx in 0..2 {
                    for dy in 0..2 {
                        for dz in 0..2 {
                            let o = ((2 * i + dx) * od[1] + 2 * j + dy) * od[2] + 2 * k + dz;
                            let tap = (dx * 2 + dy) * 2 + dz;
                            for ci in 0..ci_n {
                                for co in 0..co_n {
                                    out[o * co_n + co] += weights.get(tap, ci, co) * input[s * ci_n + ci];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Per-pixel argmax of explicitly normalised `softmax(F · f_Lᵀ / t)`; the
/// first maximal class wins.
pub fn softmax_argmax(features: &[f64], lang: &[f64], classes: usize, channels: usize, t: f64) -> Vec<u32> {
    features
        .chunks_exact(channels)
        .map(|f| {
            let logits: Vec<f64> = (0..classes)
                .map(|n| {
                    let row = &lang[n * channels..(n + 1) * channels];
                    f.iter().zip(row).map(|(a, b)| a * b).sum::<f64>() / t
                })
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let probs: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
            let mut best = 0;
            for n in 1..classes {
                if probs[n] > probs[best] {
                    best = n;
                }
            }
            best as u32
        })
        .collect()
}

/// Occupancy IoU by counting voxels in separate passes.
pub fn count_geometric_iou(pred: &LabelVolume, gt: &LabelVolume) -> f64 {
    let valid = |v: usize| pred.data()[v] != IGNORE_LABEL && gt.data()[v] != IGNORE_LABEL;
    let n = pred.data().len();
    let inter = (0..n).filter(|&v| valid(v) && pred.data()[v] > 0 && gt.data()[v] > 0).count();
    let union = (0..n).filter(|&v| valid(v) && (pred.data()[v] > 0 || gt.data()[v] > 0)).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-class IoU and mIoU from a confusion matrix filled by a triple loop.
pub fn confusion_miou(pred: &LabelVolume, gt: &LabelVolume, num_classes: usize) -> (Vec<Option<f64>>, f64) {
    let [h, w, l] = gt.dims();
    let k = num_classes + 1;
    let mut conf = vec![0u64; k * k];
    for i in 0..h {
        for j in 0..w {
            for z in 0..l {
                let (p, g) = (pred.get([i, j, z]), gt.get([i, j, z]));
                if p == IGNORE_LABEL || g == IGNORE_LABEL {
                    continue;
                }
                conf[g as usize * k + p as usize] += 1;
            }
        }
    }
    let mut per_class = Vec::new();
    for c in 1..k {
        let tp = conf[c * k + c];
        let fp: u64 = (0..k).filter(|&r| r != c).map(|r| conf[r * k + c]).sum();
        let fneg: u64 = (0..k).filter(|&q| q != c).map(|q| conf[c * k + q]).sum();
        let den = tp + fp + fneg;
        per_class.push((den > 0).then(|| tp as f64 / den as f64));
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (per_class, miou)
}

/// Entry parameter of the first occupied voxel hit by `origin + t·dir`
/// (`t >= 0`, positive-length overlap, half-open cells on parallel axes),
/// by slab tests against every occupied voxel. Returns the entry `t` and the
/// labels of all voxels entered within `1e-9` of it.
pub fn ray_first_hit_bruteforce(
    grid: &VoxelGridSpec,
    gt: &LabelVolume,
    origin: &[f64; 3],
    dir: &[f64; 3],
) -> Option<(f64, Vec<u8>)> {
    let [h, w, l] = gt.dims();
    let s = grid.voxel_size();
    let g = grid.origin();
    let mut hits: Vec<(f64, u8)> = Vec::new();
    for i in 0..h {
        for j in 0..w {
            for k in 0..l {
                let label = gt.get([i, j, k]);
                if label == 0 {
                    continue;
                }
                let idx = [i, j, k];
                let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
                let mut inside = true;
                for a in 0..3 {
                    let lo = g[a] + idx[a] as f64 * s;
                    let hi = g[a] + (idx[a] + 1) as f64 * s;
                    if dir[a] == 0.0 {
                        if origin[a] < lo || origin[a] >= hi {
                            inside = false;
                        }
                    } else {
                        let (ta, tb) = ((lo - origin[a]) / dir[a], (hi - origin[a]) / dir[a]);
                        t0 = t0.max(ta.min(tb));
                        t1 = t1.min(ta.max(tb));
                    }
                }
                if inside && t1 - t0 > 1e-12 * (1.0 + t0.abs()) {
                    hits.push((t0, label));
                }
            }
        }
    }
    let t_min = hits.iter().map(|h| h.0).fold(f64::INFINITY, f64::min);
    if !t_min.is_finite() {
        return None;
    }
    let labels = hits.iter().filter(|h| h.0 <= t_min + 1e-9).map(|h| h.1).collect();
    Some((t_min, labels))
}

/// Label at the first sample of a fixed-step march from the camera that lands
/// in an occupied voxel; 0 when the march leaves the grid box.
pub fn ray_march(grid: &VoxelGridSpec, gt: &LabelVolume, origin: &[f64; 3], dir: &[f64; 3], step: f64) -> u8 {
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    let u = dir.map(|d| d / norm);
    let lo = grid.origin();
    let hi = lo + grid.extent();
    // Far enough to cross the whole box from the camera.
    let reach = (0..3).map(|a| (hi[a] - origin[a]).abs().max((lo[a] - origin[a]).abs())).sum::<f64>();
    let steps = (reach / step).ceil() as usize + 1;
    for n in 0..=steps {
        let t = n as f64 * step;
        let p = nalgebra::Vector3::new(origin[0] + t * u[0], origin[1] + t * u[1], origin[2] + t * u[2]);
        if let Some(v) = grid.locate(&p) {
            let label = gt.get(v);
            if label != 0 {
                return label;
            }
        }
    }
    0
}
