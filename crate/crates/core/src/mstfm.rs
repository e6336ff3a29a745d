//! Multi-scale tri-plane fusion layer.
//!
//! Level 0 runs a [`TfmBlock`] on the full-resolution volumes. Each further
//! level takes the previous level's sparse input, applies a
//! [`downsample_block`] (stride-2 sparse conv, then two submanifold convs) per
//! modality, and runs its own TFM at the coarser resolution. On the way back up
//! the coarsest fused output is upsampled with a 2³ transposed convolution,
//! cropped to the finer grid and merged with that level's TFM output. A final
//! 3³ convolution per modality produces the layer output.
//!
//! Odd dims need no explicit padding: empty voxels contribute nothing to the
//! sparse convs, and upsampled volumes are cropped back to the finer dims.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::conv::{Conv3d, KernelWeights};
use crate::counters::Counters;
use crate::error::{Error, Result};
use crate::sparsevox::{deconv3d_dense, sparse_conv3d_counted, submanifold_conv3d_counted, SparseVoxelTensor};
use crate::ssm::BlockConfig;
use crate::tfm::{tfm_forward, triplane_steps, TfmBlock};
use crate::volume::{concat_channels, FeatureVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scale {
    Full,
    Half,
    Quarter,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Full, Scale::Half, Scale::Quarter];

    pub fn factor(self) -> f64 {
        match self {
            Scale::Full => 1.0,
            Scale::Half => 0.5,
            Scale::Quarter => 0.25,
        }
    }

    pub fn level(self) -> usize {
        self as usize
    }

    /// Grid dims at this scale: `ceil` halving once per level.
    pub fn dims(self, mut dims: [usize; 3]) -> [usize; 3] {
        for _ in 0..self.level() {
            dims = dims.map(|d| d.div_ceil(2));
        }
        dims
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scale::Full => f.write_str("1"),
            Scale::Half => f.write_str("1/2"),
            Scale::Quarter => f.write_str("1/4"),
        }
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1" | "1.0" => Ok(Scale::Full),
            "0.5" | "1/2" => Ok(Scale::Half),
            "0.25" | "1/4" => Ok(Scale::Quarter),
            other => Err(Error::Config(format!("unsupported scale `{other}` (use 1, 0.5 or 0.25)"))),
        }
    }
}

/// Scale lists must be `[1]`, `[1, 1/2]` or `[1, 1/2, 1/4]`.
pub fn validate_scales(scales: &[Scale]) -> Result<()> {
    if scales.is_empty() || scales.len() > 3 || scales.iter().zip(Scale::ALL).any(|(a, b)| *a != b) {
        let list: Vec<String> = scales.iter().map(|s| s.to_string()).collect();
        return Err(Error::Config(format!(
            "scale list [{}] must be one of [1], [1, 1/2], [1, 1/2, 1/4]",
            list.join(", ")
        )));
    }
    Ok(())
}

/// SSM timesteps per direction for one forward pass over `scales`.
pub fn multiscale_steps(dims: [usize; 3], scales: &[Scale]) -> u64 {
    scales.iter().map(|s| triplane_steps(s.dims(dims))).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Merge {
    Add,
    /// Concatenate, then a 3³ conv `2D -> D`.
    ConcatConv,
}

impl FromStr for Merge {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "add" => Ok(Merge::Add),
            "concat" => Ok(Merge::ConcatConv),
            other => Err(Error::Config(format!("unknown merge `{other}` (use add or concat)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsTfmConfig {
    pub scales: Vec<Scale>,
    pub channels: usize,
    pub state: usize,
    pub block: BlockConfig,
    pub share_weights: bool,
    pub merge: Merge,
    pub output_conv_language: bool,
}

impl Default for MsTfmConfig {
    fn default() -> Self {
        Self {
            scales: vec![Scale::Full, Scale::Half],
            channels: 16,
            state: 8,
            block: BlockConfig::default(),
            share_weights: false,
            merge: Merge::Add,
            output_conv_language: true,
        }
    }
}

/// Stride-2 sparse conv followed by two submanifold convs, no activations.
#[derive(Debug, Clone, PartialEq)]
pub struct DownsampleWeights {
    pub down: KernelWeights,
    pub sub1: KernelWeights,
    pub sub2: KernelWeights,
}

impl DownsampleWeights {
    pub fn seeded(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            down: KernelWeights::seeded(3, channels, channels, rng),
            sub1: KernelWeights::seeded(3, channels, channels, rng),
            sub2: KernelWeights::seeded(3, channels, channels, rng),
        }
    }
}

pub fn downsample_block(x: &SparseVoxelTensor, w: &DownsampleWeights) -> Result<SparseVoxelTensor> {
    downsample_block_counted(x, w, None)
}

pub fn downsample_block_counted(
    x: &SparseVoxelTensor,
    w: &DownsampleWeights,
    counters: Option<&Counters>,
) -> Result<SparseVoxelTensor> {
    let y = sparse_conv3d_counted(x, &w.down, 2, counters)?;
    let y = submanifold_conv3d_counted(&y, &w.sub1, counters)?;
    submanifold_conv3d_counted(&y, &w.sub2, counters)
}

/// Weights of one coarse level, indexed `[vision, language]` per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseLevel {
    pub down: [DownsampleWeights; 2],
    pub up: [KernelWeights; 2],
    pub merge: Option<[Conv3d; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsTfm {
    config: MsTfmConfig,
    dims: [usize; 3],
    /// One fusion block per scale.
    pub tfm: Vec<TfmBlock>,
    /// Entry `s - 1` belongs to scale `s`.
    pub coarse: Vec<CoarseLevel>,
    pub output: [Conv3d; 2],
}

/// Active voxel counts entering a level's fusion block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelStats {
    pub scale: Scale,
    pub dims: [usize; 3],
    pub active_vision: usize,
    pub active_language: usize,
}

#[derive(Debug, Clone)]
pub struct MsTfmOutput {
    pub vision: FeatureVolume,
    pub language: FeatureVolume,
    pub levels: Vec<LevelStats>,
}

impl MsTfm {
    pub fn seeded(dims: [usize; 3], config: MsTfmConfig, rng: &mut impl Rng) -> Result<Self> {
        validate_scales(&config.scales)?;
        let d = config.channels;
        if d == 0 || config.state == 0 {
            return Err(Error::Config("channels and SSM state size must be positive".into()));
        }
        let mut tfm: Vec<TfmBlock> = Vec::with_capacity(config.scales.len());
        for &s in &config.scales {
            let block = match tfm.first() {
                Some(first) if config.share_weights => TfmBlock::with_ssm(s.dims(dims), d, first.ssm.clone(), rng)?,
                _ => TfmBlock::seeded(s.dims(dims), d, config.state, config.block, rng)?,
            };
            tfm.push(block);
        }
        let coarse = config.scales[1..]
            .iter()
            .map(|_| CoarseLevel {
                down: [DownsampleWeights::seeded(d, rng), DownsampleWeights::seeded(d, rng)],
                up: [
                    KernelWeights::seeded(2, d, d, rng),
                    KernelWeights::seeded(2, d, d, rng),
                ],
                merge: match config.merge {
                    Merge::Add => None,
                    Merge::ConcatConv => Some([Conv3d::seeded(2 * d, d, rng), Conv3d::seeded(2 * d, d, rng)]),
                },
            })
            .collect();
        let output = [Conv3d::seeded(d, d, rng), Conv3d::seeded(d, d, rng)];
        Ok(Self {
            config,
            dims,
            tfm,
            coarse,
            output,
        })
    }

    pub fn config(&self) -> &MsTfmConfig {
        &self.config
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn scales(&self) -> &[Scale] {
        &self.config.scales
    }

    pub fn forward(&self, vision: &FeatureVolume, language: &FeatureVolume, counters: &Counters) -> Result<MsTfmOutput> {
        if vision.dims() != self.dims || !vision.same_shape(language) || vision.channels() != self.config.channels {
            return Err(Error::dims(format!(
                "MS-TFM built for {:?}x{}, got vision {:?}x{} and language {:?}x{}",
                self.dims,
                self.config.channels,
                vision.dims(),
                vision.channels(),
                language.dims(),
                language.channels()
            )));
        }
        let mut levels = Vec::with_capacity(self.tfm.len());
        let mut inputs = vec![(vision.clone(), language.clone())];
        let mut sparse = [SparseVoxelTensor::from_dense(vision), SparseVoxelTensor::from_dense(language)];
        levels.push(LevelStats {
            scale: Scale::Full,
            dims: self.dims,
            active_vision: sparse[0].len(),
            active_language: sparse[1].len(),
        });
        for (lvl, w) in self.coarse.iter().enumerate() {
            sparse = [
                downsample_block_counted(&sparse[0], &w.down[0], Some(counters))?,
                downsample_block_counted(&sparse[1], &w.down[1], Some(counters))?,
            ];
            levels.push(LevelStats {
                scale: self.config.scales[lvl + 1],
                dims: sparse[0].dims(),
                active_vision: sparse[0].len(),
                active_language: sparse[1].len(),
            });
            inputs.push((sparse[0].to_dense(), sparse[1].to_dense()));
        }

        let mut fused = Vec::with_capacity(inputs.len());
        for ((v, l), block) in inputs.iter().zip(&self.tfm) {
            fused.push(tfm_forward(v, l, block, counters)?);
        }

        let mut current = fused.pop().expect("at least one scale");
        while let Some(finer) = fused.pop() {
            let w = &self.coarse[fused.len()];
            let up = [
                upsample_to(&current.0, &w.up[0], &finer.0)?,
                upsample_to(&current.1, &w.up[1], &finer.1)?,
            ];
            current = (
                merge(&finer.0, &up[0], w.merge.as_ref().map(|m| &m[0]), counters)?,
                merge(&finer.1, &up[1], w.merge.as_ref().map(|m| &m[1]), counters)?,
            );
        }

        let vision = dense_conv(&self.output[0], &current.0, counters)?;
        let language = if self.config.output_conv_language {
            dense_conv(&self.output[1], &current.1, counters)?
        } else {
            current.1
        };
        Ok(MsTfmOutput {
            vision,
            language,
            levels,
        })
    }
}

fn dense_conv(conv: &Conv3d, x: &FeatureVolume, counters: &Counters) -> Result<FeatureVolume> {
    counters.add_dense_sites(x.num_voxels() as u64);
    conv.forward(x)
}

/// Deconvolves `coarse` and crops it onto `target`'s grid.
fn upsample_to(coarse: &FeatureVolume, w: &KernelWeights, target: &FeatureVolume) -> Result<FeatureVolume> {
    let up = deconv3d_dense(coarse, w)?;
    let cropped = up.cropped(target.dims())?;
    FeatureVolume::from_parts(
        *target.grid(),
        cropped.channels(),
        cropped.data().to_vec(),
        cropped.observed().to_vec(),
    )
}

fn merge(low: &FeatureVolume, up: &FeatureVolume, conv: Option<&Conv3d>, counters: &Counters) -> Result<FeatureVolume> {
    match conv {
        None => low.add(up),
        Some(c) => dense_conv(c, &concat_channels(low, up)?, counters),
    }
}

/// Fused `(vision, language)` volumes.
pub fn ms_tfm_forward(
    vision: &FeatureVolume,
    language: &FeatureVolume,
    layer: &MsTfm,
    counters: &Counters,
) -> Result<(FeatureVolume, FeatureVolume)> {
    let out = layer.forward(vision, language, counters)?;
    Ok((out.vision, out.language))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::VoxelGridSpec;
    use crate::rng::{gaussian_vec, seeded};
    use rand::Rng;

    fn config(scales: Vec<Scale>, d: usize) -> MsTfmConfig {
        MsTfmConfig {
            scales,
            channels: d,
            state: 4,
            ..MsTfmConfig::default()
        }
    }

    fn random_pair(dims: [usize; 3], d: usize, seed: u64) -> (FeatureVolume, FeatureVolume) {
        let g = VoxelGridSpec::unit(dims).unwrap();
        let n = g.num_voxels();
        let mut rng = seeded(seed);
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let vol = |rng: &mut crate::rng::SeededRng| {
            let mut data = gaussian_vec(rng, n * d, 1.0);
            for (v, _) in mask.iter().enumerate().filter(|(_, m)| !**m) {
                data[v * d..(v + 1) * d].fill(0.0);
            }
            FeatureVolume::from_parts(g, d, data, mask.clone()).unwrap()
        };
        (vol(&mut rng), vol(&mut rng))
    }

    #[test]
    fn scale_lists() {
        assert!(validate_scales(&[Scale::Full]).is_ok());
        assert!(validate_scales(&[Scale::Full, Scale::Half, Scale::Quarter]).is_ok());
        assert!(validate_scales(&[]).is_err());
        assert!(validate_scales(&[Scale::Half]).is_err());
        assert!(validate_scales(&[Scale::Full, Scale::Quarter]).is_err());
        assert_eq!("0.5".parse::<Scale>().unwrap(), Scale::Half);
        assert!("0.3".parse::<Scale>().is_err());
        assert_eq!(Scale::Quarter.dims([9, 8, 3]), [3, 2, 1]);
    }

    #[test]
    fn downsample_shapes() {
        let w = DownsampleWeights::seeded(2, &mut seeded(0));
        let g = VoxelGridSpec::unit([8, 8, 4]).unwrap();
        let empty = SparseVoxelTensor::empty(g, 2);
        let out = downsample_block(&empty, &w).unwrap();
        assert!(out.is_empty());
        assert_eq!(out.dims(), [4, 4, 2]);
    }

    #[test]
    fn shapes_preserved_for_all_scale_lists() {
        for (dims, scales) in [
            ([8, 8, 4], vec![Scale::Full]),
            ([8, 8, 4], vec![Scale::Full, Scale::Half]),
            ([8, 8, 4], vec![Scale::Full, Scale::Half, Scale::Quarter]),
            ([5, 7, 3], vec![Scale::Full, Scale::Half, Scale::Quarter]),
        ] {
            let layer = MsTfm::seeded(dims, config(scales, 2), &mut seeded(1)).unwrap();
            let (v, l) = random_pair(dims, 2, 3);
            let (ov, ol) = ms_tfm_forward(&v, &l, &layer, &Counters::new()).unwrap();
            assert_eq!((ov.dims(), ov.channels()), (dims, 2));
            assert_eq!((ol.dims(), ol.channels()), (dims, 2));
            assert!(ov.is_finite() && ol.is_finite());
        }
    }

    #[test]
    fn zero_inputs_give_zero_outputs() {
        let dims = [4, 4, 2];
        let layer = MsTfm::seeded(dims, config(vec![Scale::Full, Scale::Half], 2), &mut seeded(5)).unwrap();
        let mut z = FeatureVolume::zeros(VoxelGridSpec::unit(dims).unwrap(), 2);
        z.set_all_observed();
        let (v, l) = ms_tfm_forward(&z, &z, &layer, &Counters::new()).unwrap();
        assert!(v.data().iter().chain(l.data()).all(|&x| x == 0.0));
    }

    #[test]
    fn single_scale_with_zero_projectors_is_output_conv() {
        let dims = [4, 2, 2];
        let mut layer = MsTfm::seeded(dims, config(vec![Scale::Full], 3), &mut seeded(2)).unwrap();
        layer.tfm[0].zero_projectors();
        let (v, l) = random_pair(dims, 3, 9);
        let (ov, ol) = ms_tfm_forward(&v, &l, &layer, &Counters::new()).unwrap();
        assert_eq!(ov.data(), layer.output[0].forward(&v).unwrap().data());
        assert_eq!(ol.data(), layer.output[1].forward(&l).unwrap().data());
    }

    #[test]
    fn counters_match_closed_form() {
        let dims = [8, 6, 4];
        for scales in [
            vec![Scale::Full],
            vec![Scale::Full, Scale::Half],
            vec![Scale::Full, Scale::Half, Scale::Quarter],
        ] {
            let layer = MsTfm::seeded(dims, config(scales.clone(), 2), &mut seeded(0)).unwrap();
            let (v, l) = random_pair(dims, 2, 1);
            let c = Counters::new();
            layer.forward(&v, &l, &c).unwrap();
            let expected = multiscale_steps(dims, &scales);
            assert_eq!(c.snapshot().ssm_forward_steps, expected);
            assert_eq!(c.snapshot().ssm_backward_steps, expected);
        }
    }

    #[test]
    fn shared_weights_share_the_sequence_block() {
        let mut cfg = config(vec![Scale::Full, Scale::Half], 2);
        cfg.share_weights = true;
        let layer = MsTfm::seeded([4, 4, 4], cfg, &mut seeded(0)).unwrap();
        assert_eq!(layer.tfm[0].ssm, layer.tfm[1].ssm);
        assert_ne!(layer.tfm[0].projectors[0], layer.tfm[1].projectors[0]);
    }

    #[test]
    fn concat_merge_and_language_flag() {
        let dims = [4, 4, 2];
        let mut cfg = config(vec![Scale::Full, Scale::Half], 2);
        cfg.merge = Merge::ConcatConv;
        cfg.output_conv_language = false;
        let layer = MsTfm::seeded(dims, cfg, &mut seeded(4)).unwrap();
        let (v, l) = random_pair(dims, 2, 6);
        let out = layer.forward(&v, &l, &Counters::new()).unwrap();
        assert_eq!(out.levels.len(), 2);
        assert_eq!(out.levels[1].dims, [2, 2, 1]);
        assert!(out.levels[1].active_vision <= 4);
    }
}
