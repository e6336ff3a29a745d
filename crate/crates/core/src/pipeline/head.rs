//! Linear per-voxel classification head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::volume::{FeatureVolume, LabelVolume};
use crate::vsg::LanguageEmbeddings;

/// `D -> N+1` logits per voxel; class 0 is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationHead {
    pub linear: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub labels: LabelVolume,
    /// Voxel-major, `N+1` logits per voxel.
    pub logits: Vec<f64>,
}

impl ClassificationHead {
    pub fn new(linear: Linear) -> Result<Self> {
        if linear.out_dim < 2 || linear.out_dim > 255 {
            return Err(Error::param(format!("head needs 2..=255 classes, got {}", linear.out_dim)));
        }
        Ok(Self { linear })
    }

    /// One row per class text embedding, zero bias: the logit of class `c` is
    /// the dot product with its embedding.
    pub fn from_embeddings(lang: &LanguageEmbeddings) -> Result<Self> {
        let linear = Linear::from_parts(lang.channels(), lang.rows(), lang.data().to_vec(), vec![0.0; lang.rows()])?;
        Self::new(linear)
    }

    pub fn seeded(channels: usize, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(Linear::seeded(channels, num_classes + 1, rng))
    }

    pub fn num_labels(&self) -> usize {
        self.linear.out_dim
    }

    pub fn forward(&self, features: &FeatureVolume) -> Result<HeadOutput> {
        classification_head(features, self)
    }
}

/// Argmax over the logits of every voxel, ties to the lowest class.
pub fn classification_head(features: &FeatureVolume, head: &ClassificationHead) -> Result<HeadOutput> {
    if features.channels() != head.linear.in_dim {
        return Err(Error::dims(format!(
            "head expects {} channels, volume has {}",
            head.linear.in_dim,
            features.channels()
        )));
    }
    let k = head.num_labels();
    let n = features.num_voxels();
    let mut logits = vec![0.0; n * k];
    let mut labels = Vec::with_capacity(n);
    for v in 0..n {
        let out = &mut logits[v * k..(v + 1) * k];
        head.linear.forward_into(features.voxel_at(v), out);
        labels.push(argmax(out) as u8);
    }
    Ok(HeadOutput {
        labels: LabelVolume::from_parts(features.dims(), labels)?,
        logits,
    })
}

/// Index of the largest value; the first wins ties.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::VoxelGridSpec;
    use crate::rng::seeded;

    #[test]
    fn zero_features_pick_empty() {
        let g = VoxelGridSpec::unit([2, 2, 2]).unwrap();
        let head = ClassificationHead::new(Linear::seeded(3, 4, &mut seeded(0))).unwrap();
        let mut head = head;
        head.linear.bias.fill(0.0);
        let out = head.forward(&FeatureVolume::zeros(g, 3)).unwrap();
        assert!(out.labels.data().iter().all(|&l| l == 0));
    }

    #[test]
    fn one_hot_weights_read_the_channel() {
        let g = VoxelGridSpec::unit([1, 1, 3]).unwrap();
        // Channel c encodes class c.
        let mut w = vec![0.0; 3 * 3];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let head = ClassificationHead::new(Linear::from_parts(3, 3, w, vec![0.0; 3]).unwrap()).unwrap();
        let data = vec![0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        let vol = FeatureVolume::from_parts(g, 3, data, vec![true; 3]).unwrap();
        assert_eq!(head.forward(&vol).unwrap().labels.data(), &[2, 1, 0]);
    }

    #[test]
    fn ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn channel_mismatch() {
        let g = VoxelGridSpec::unit([1, 1, 1]).unwrap();
        let head = ClassificationHead::seeded(4, 2, &mut seeded(0)).unwrap();
        assert!(head.forward(&FeatureVolume::zeros(g, 3)).is_err());
    }
}
