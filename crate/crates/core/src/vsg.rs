//! Vision-language scene generator.
//!
//! Per-pixel class map from image features and class embeddings, and the
//! projection-and-nearest-sampling lift of both into voxel features. The
//! pretrained vision-language model is replaced by [`EmbeddingProvider`];
//! [`SyntheticProvider`] is the deterministic stand-in used throughout.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;

use crate::conv::Conv3d;
use crate::error::{Error, Result};
use crate::geometry::{nearest_pixel, CameraModel, PixelGrid, VoxelGridSpec};
use crate::nn::dot;
use crate::rng::{derive_seed, gaussian, seeded};
use crate::volume::{concat_channels, FeatureVolume};

/// Default softmax temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    names: Vec<String>,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::param(format!("vocabulary needs at least 2 classes, got {}", names.len())));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return Err(Error::param("empty class name"));
            }
            if !seen.insert(n.as_str()) {
                return Err(Error::param(format!("duplicate class name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    /// One class name per line; blank trailing lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        while lines.last().is_some_and(|l| l.is_empty()) {
            lines.pop();
        }
        Self::new(lines)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// `empty` followed by `num_classes` semantic names, so a vocabulary index
    /// equals the occupancy label it stands for.
    pub fn with_empty(num_classes: usize) -> Result<Self> {
        const NAMES: [&str; 8] = [
            "road",
            "car",
            "building",
            "vegetation",
            "sidewalk",
            "terrain",
            "pole",
            "fence",
        ];
        let mut names = vec!["empty".to_string()];
        for c in 0..num_classes {
            names.push(match NAMES.get(c) {
                Some(n) => n.to_string(),
                None => format!("class_{}", c + 1),
            });
        }
        Self::new(names)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// `H_I × W_I × C` image feature map, row-major pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageFeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::dims(format!(
                "feature map {height}x{width}x{channels} with {} values",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image feature map"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, value: &[f64]) -> Self {
        Self {
            height,
            width,
            channels: value.len(),
            data: value.repeat(height * width),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let p = row * self.width + col;
        &self.data[p * self.channels..(p + 1) * self.channels]
    }
}

impl PixelGrid for ImageFeatureMap {
    type Sample<'a> = &'a [f64];

    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    fn pixel(&self, row: usize, col: usize) -> &[f64] {
        self.at(row, col)
    }
}

/// `N × C` class embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageEmbeddings {
    rows: usize,
    channels: usize,
    data: Vec<f64>,
}

impl LanguageEmbeddings {
    pub fn new(rows: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * channels {
            return Err(Error::dims(format!("embeddings {rows}x{channels} with {} values", data.len())));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("language embeddings"));
        }
        Ok(Self { rows, channels, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.channels..(n + 1) * self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Per-pixel class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    height: usize,
    width: usize,
    data: Vec<u32>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dims(format!("class map {height}x{width} with {} labels", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u32) -> Self {
        Self {
            height,
            width,
            data: vec![class; height * width],
        }
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn at(&self, row: usize, col: usize) -> u32 {
        self.data[row * self.width + col]
    }

    pub fn max_class(&self) -> Option<u32> {
        self.data.iter().copied().max()
    }
}

impl PixelGrid for ClassMap {
    type Sample<'a> = u32;

    fn width(&self) -> usize {
        self.width
    }

    fn height(&self) -> usize {
        self.height
    }

    fn pixel(&self, row: usize, col: usize) -> u32 {
        self.at(row, col)
    }
}

/// Stand-in for a vision-language model: text and image encoders that agree
/// on an embedding space.
pub trait EmbeddingProvider {
    fn channels(&self) -> usize;
    fn embed_text(&self, vocab: &ClassVocabulary) -> Result<LanguageEmbeddings>;
    /// `image` is a per-pixel class rendering of the scene.
    fn embed_image(&self, image: &ClassMap) -> Result<ImageFeatureMap>;
}

/// Deterministic provider: orthonormal class embeddings, and image features
/// equal to the rendered class's embedding plus seeded Gaussian noise.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    seed: u64,
    channels: usize,
    noise_sigma: f64,
    embeddings: LanguageEmbeddings,
}

impl SyntheticProvider {
    pub fn new(vocab: &ClassVocabulary, seed: u64, channels: usize, noise_sigma: f64) -> Result<Self> {
        if channels < vocab.len() {
            return Err(Error::param(format!(
                "orthonormal embeddings need channels >= classes ({channels} < {})",
                vocab.len()
            )));
        }
        if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
            return Err(Error::param(format!("noise sigma must be >= 0, got {noise_sigma}")));
        }
        let embeddings = orthonormal_rows(vocab.len(), channels, derive_seed(seed, 0x7e47))?;
        Ok(Self {
            seed,
            channels,
            noise_sigma,
            embeddings,
        })
    }

    pub fn noise_sigma(&self) -> f64 {
        self.noise_sigma
    }
}

pub fn synthetic_provider(vocab: &ClassVocabulary, seed: u64, channels: usize) -> Result<SyntheticProvider> {
    SyntheticProvider::new(vocab, seed, channels, 0.0)
}

impl EmbeddingProvider for SyntheticProvider {
    fn channels(&self) -> usize {
        self.channels
    }

    fn embed_text(&self, vocab: &ClassVocabulary) -> Result<LanguageEmbeddings> {
        if vocab.len() != self.embeddings.rows() {
            return Err(Error::dims(format!(
                "provider built for {} classes, vocabulary has {}",
                self.embeddings.rows(),
                vocab.len()
            )));
        }
        Ok(self.embeddings.clone())
    }

    fn embed_image(&self, image: &ClassMap) -> Result<ImageFeatureMap> {
        if let Some(m) = image.max_class() {
            if m as usize >= self.embeddings.rows() {
                return Err(Error::param(format!("image class {m} outside vocabulary")));
            }
        }
        let mut rng = seeded(derive_seed(self.seed, 0x1a6e));
        let mut data = Vec::with_capacity(image.data().len() * self.channels);
        for &class in image.data() {
            for &e in self.embeddings.row(class as usize) {
                let noise = if self.noise_sigma > 0.0 {
                    self.noise_sigma * gaussian(&mut rng)
                } else {
                    0.0
                };
                data.push(e + noise);
            }
        }
        ImageFeatureMap::new(image.height, image.width, self.channels, data)
    }
}

/// Gram-Schmidt over seeded Gaussian draws, two passes per row.
fn orthonormal_rows(rows: usize, channels: usize, seed: u64) -> Result<LanguageEmbeddings> {
    let mut rng = seeded(seed);
    let mut data: Vec<f64> = Vec::with_capacity(rows * channels);
    for r in 0..rows {
        let mut v: Vec<f64> = (0..channels).map(|_| gaussian(&mut rng)).collect();
        for _ in 0..2 {
            for q in 0..r {
                let prev = &data[q * channels..(q + 1) * channels];
                let p = dot(prev, &v);
                v.iter_mut().zip(prev).for_each(|(x, y)| *x -= p * y);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-8 {
            return Err(Error::param("degenerate draw while orthonormalising"));
        }
        data.extend(v.iter().map(|x| x / norm));
    }
    LanguageEmbeddings::new(rows, channels, data)
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::param(format!("temperature must be positive, got {t}")))
    }
}

fn check_channels(features: &ImageFeatureMap, lang: &LanguageEmbeddings) -> Result<()> {
    if features.channels != lang.channels {
        return Err(Error::dims(format!(
            "image features have {} channels, embeddings {}",
            features.channels, lang.channels
        )));
    }
    Ok(())
}

/// Per-pixel argmax over classes of `softmax(F_I · f_L / t)`, ties to the
/// lowest class. Softmax is monotone, so the argmax is taken on raw scores.
pub fn pixel_class_map(features: &ImageFeatureMap, lang: &LanguageEmbeddings, t: f64) -> Result<ClassMap> {
    check_temperature(t)?;
    check_channels(features, lang)?;
    let data = (0..features.height * features.width)
        .map(|p| {
            let f = &features.data[p * features.channels..(p + 1) * features.channels];
            let mut best = 0usize;
            let mut best_score = f64::NEG_INFINITY;
            for n in 0..lang.rows {
                let s = dot(f, lang.row(n));
                if s > best_score {
                    best_score = s;
                    best = n;
                }
            }
            best as u32
        })
        .collect();
    ClassMap::new(features.height, features.width, data)
}

/// Softmax class probabilities, `H_I·W_I × N` row-major.
pub fn class_probabilities(features: &ImageFeatureMap, lang: &LanguageEmbeddings, t: f64) -> Result<Vec<f64>> {
    check_temperature(t)?;
    check_channels(features, lang)?;
    let mut out = Vec::with_capacity(features.height * features.width * lang.rows);
    let mut logits = vec![0.0; lang.rows];
    for p in 0..features.height * features.width {
        let f = &features.data[p * features.channels..(p + 1) * features.channels];
        for (n, l) in logits.iter_mut().enumerate() {
            *l = dot(f, lang.row(n)) / t;
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        out.extend(logits.iter().map(|l| (l - m).exp() / z));
    }
    Ok(out)
}

/// For each voxel (linear index), the pixel `(row, col)` its center samples,
/// or `None` when the center does not project validly.
pub fn voxel_pixel_lookup(grid: &VoxelGridSpec, cam: &CameraModel) -> Vec<Option<(usize, usize)>> {
    (0..grid.num_voxels())
        .map(|idx| {
            let p = cam.world_to_image(&grid.center_unchecked(grid.unravel(idx)));
            if !p.valid {
                return None;
            }
            nearest_pixel(cam.image_width, cam.image_height, p.pixel.u, p.pixel.v)
                .ok()
                .map(|(col, row)| (row, col))
        })
        .collect()
}

fn check_image_size(w: usize, h: usize, cam: &CameraModel) -> Result<()> {
    if (w, h) != (cam.image_width, cam.image_height) {
        return Err(Error::dims(format!(
            "map is {w}x{h} but camera images are {}x{}",
            cam.image_width, cam.image_height
        )));
    }
    Ok(())
}

/// Samples the image feature at each voxel center's projection. Unobserved
/// voxels hold zeros and are unmarked in the observed mask.
pub fn lift_vision(features: &ImageFeatureMap, grid: &VoxelGridSpec, cam: &CameraModel) -> Result<FeatureVolume> {
    check_image_size(features.width, features.height, cam)?;
    let lookup = voxel_pixel_lookup(grid, cam);
    let mut vol = FeatureVolume::zeros(*grid, features.channels);
    for (idx, hit) in lookup.into_iter().enumerate() {
        if let Some((row, col)) = hit {
            vol.voxel_at_mut(idx).copy_from_slice(features.at(row, col));
            vol.observed_mut()[idx] = true;
        }
    }
    Ok(vol)
}

/// Each observed voxel takes the embedding row of the class sampled at its
/// projection.
pub fn lift_language(
    classes: &ClassMap,
    lang: &LanguageEmbeddings,
    grid: &VoxelGridSpec,
    cam: &CameraModel,
) -> Result<FeatureVolume> {
    check_image_size(classes.width, classes.height, cam)?;
    if let Some(m) = classes.max_class() {
        if m as usize >= lang.rows {
            return Err(Error::param(format!("class {m} has no embedding row")));
        }
    }
    let lookup = voxel_pixel_lookup(grid, cam);
    let mut vol = FeatureVolume::zeros(*grid, lang.channels);
    for (idx, hit) in lookup.into_iter().enumerate() {
        if let Some((row, col)) = hit {
            vol.voxel_at_mut(idx).copy_from_slice(lang.row(classes.at(row, col) as usize));
            vol.observed_mut()[idx] = true;
        }
    }
    Ok(vol)
}

/// Two 3³ convolutions fusing the query volume with the lifted vision volume:
/// `2D -> D -> D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FuseWeights {
    pub first: Conv3d,
    pub second: Conv3d,
}

impl FuseWeights {
    pub fn seeded(channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            first: Conv3d::seeded(2 * channels, channels, rng),
            second: Conv3d::seeded(channels, channels, rng),
        }
    }

    /// Passes the first (query) volume through unchanged.
    pub fn identity(channels: usize) -> Self {
        Self {
            first: Conv3d::center_identity(2 * channels, channels),
            second: Conv3d::center_identity(channels, channels),
        }
    }
}

pub fn fuse_vision(query: &FeatureVolume, vision: &FeatureVolume, weights: &FuseWeights) -> Result<FeatureVolume> {
    if query.dims() != vision.dims() || query.channels() != vision.channels() {
        return Err(Error::dims(format!(
            "fuse_vision: {:?}x{} vs {:?}x{}",
            query.dims(),
            query.channels(),
            vision.dims(),
            vision.channels()
        )));
    }
    let cat = concat_channels(query, vision)?;
    let hidden = weights.first.forward(&cat)?;
    weights.second.forward(&hidden)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};

    fn vocab(n: usize) -> ClassVocabulary {
        ClassVocabulary::new((0..n).map(|i| format!("c{i}")).collect()).unwrap()
    }

    #[test]
    fn vocabulary_validation() {
        assert!(ClassVocabulary::new(vec!["a".into()]).is_err());
        assert!(ClassVocabulary::new(vec!["a".into(), "a".into()]).is_err());
        assert!(ClassVocabulary::new(vec!["a".into(), " ".into()]).is_err());
        let v = ClassVocabulary::parse("road\ncar\n\n").unwrap();
        assert_eq!(v.names(), &["road", "car"]);
        assert_eq!(ClassVocabulary::with_empty(3).unwrap().names()[0], "empty");
    }

    #[test]
    fn embeddings_are_orthonormal() {
        let p = synthetic_provider(&vocab(8), 3, 16).unwrap();
        let e = p.embed_text(&vocab(8)).unwrap();
        for a in 0..8 {
            for b in 0..8 {
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((dot(e.row(a), e.row(b)) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn provider_rejects_too_few_channels() {
        assert!(synthetic_provider(&vocab(8), 0, 7).is_err());
    }

    #[test]
    fn feature_equal_to_embedding_picks_that_class() {
        let p = synthetic_provider(&vocab(5), 9, 5).unwrap();
        let e = p.embed_text(&vocab(5)).unwrap();
        let f = ImageFeatureMap::constant(2, 3, e.row(3));
        let m = pixel_class_map(&f, &e, 0.07).unwrap();
        assert!(m.data().iter().all(|&c| c == 3));
    }

    #[test]
    fn score_ties_go_to_lowest_class() {
        let e = LanguageEmbeddings::new(2, 1, vec![1.0, 1.0]).unwrap();
        let f = ImageFeatureMap::constant(1, 1, &[1.0]);
        for t in [0.01, 1.0, 50.0] {
            assert_eq!(pixel_class_map(&f, &e, t).unwrap().data(), &[0]);
        }
    }

    #[test]
    fn class_map_errors() {
        let e = LanguageEmbeddings::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let f = ImageFeatureMap::constant(1, 1, &[1.0]);
        assert!(matches!(pixel_class_map(&f, &e, 1.0), Err(Error::DimensionMismatch(_))));
        let f = ImageFeatureMap::constant(1, 1, &[1.0, 0.0]);
        assert!(matches!(pixel_class_map(&f, &e, 0.0), Err(Error::InvalidParameter(_))));
        assert!(pixel_class_map(&f, &e, -1.0).is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let p = SyntheticProvider::new(&vocab(4), 1, 6, 0.3).unwrap();
        let e = p.embed_text(&vocab(4)).unwrap();
        let img = p.embed_image(&ClassMap::filled(3, 3, 2)).unwrap();
        let probs = class_probabilities(&img, &e, 0.07).unwrap();
        for row in probs.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noiseless_provider_recovers_rendered_classes() {
        let v = vocab(6);
        let p = synthetic_provider(&v, 4, 8).unwrap();
        let labels: Vec<u32> = (0..30).map(|i| (i * 7 % 6) as u32).collect();
        let img = ClassMap::new(5, 6, labels).unwrap();
        let m = pixel_class_map(&p.embed_image(&img).unwrap(), &p.embed_text(&v).unwrap(), 0.07).unwrap();
        assert_eq!(m, img);
    }

    fn behind_camera() -> CameraModel {
        // Looks along -z while the grid sits at positive z.
        let r = Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0));
        CameraModel::new(10.0, 10.0, 4.0, 4.0, r, Vector3::zeros(), 8, 8).unwrap()
    }

    #[test]
    fn everything_behind_camera_is_unobserved() {
        let grid = VoxelGridSpec::new(Vector3::new(-1.0, -1.0, 1.0), 0.5, [4, 4, 2]).unwrap();
        let f = ImageFeatureMap::constant(8, 8, &[1.0, 2.0]);
        let vol = lift_vision(&f, &grid, &behind_camera()).unwrap();
        assert_eq!(vol.observed_count(), 0);
        assert!(vol.data().iter().all(|&x| x == 0.0));
    }

    fn front_camera() -> CameraModel {
        CameraModel::new(6.0, 6.0, 4.0, 4.0, Matrix3::identity(), Vector3::zeros(), 8, 8).unwrap()
    }

    #[test]
    fn constant_features_lift_to_constant() {
        let grid = VoxelGridSpec::new(Vector3::new(-1.0, -1.0, 1.0), 0.5, [4, 4, 2]).unwrap();
        let f = ImageFeatureMap::constant(8, 8, &[1.5, -2.0]);
        let vol = lift_vision(&f, &grid, &front_camera()).unwrap();
        assert!(vol.observed_count() > 0);
        for idx in 0..vol.num_voxels() {
            let want: &[f64] = if vol.observed()[idx] { &[1.5, -2.0] } else { &[0.0, 0.0] };
            assert_eq!(vol.voxel_at(idx), want);
        }
    }

    #[test]
    fn constant_class_lifts_to_its_row() {
        let grid = VoxelGridSpec::new(Vector3::new(-1.0, -1.0, 1.0), 0.5, [4, 4, 2]).unwrap();
        let e = synthetic_provider(&vocab(3), 2, 4).unwrap().embed_text(&vocab(3)).unwrap();
        let vol = lift_language(&ClassMap::filled(8, 8, 2), &e, &grid, &front_camera()).unwrap();
        for idx in 0..vol.num_voxels() {
            if vol.observed()[idx] {
                assert_eq!(vol.voxel_at(idx), e.row(2));
            } else {
                assert!(vol.voxel_at(idx).iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn lifting_rejects_wrong_image_size() {
        let grid = VoxelGridSpec::unit([2, 2, 2]).unwrap();
        let f = ImageFeatureMap::constant(4, 8, &[1.0]);
        assert!(lift_vision(&f, &grid, &front_camera()).is_err());
    }

    #[test]
    fn fuse_with_zero_inputs_is_zero() {
        let grid = VoxelGridSpec::unit([3, 3, 2]).unwrap();
        let w = FuseWeights::seeded(3, &mut seeded(0));
        let z = FeatureVolume::zeros(grid, 3);
        assert!(fuse_vision(&z, &z, &w).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identity_fuse_returns_query() {
        let grid = VoxelGridSpec::unit([3, 3, 2]).unwrap();
        let mut rng = seeded(5);
        let q = FeatureVolume::from_parts(grid, 2, crate::rng::gaussian_vec(&mut rng, 36, 1.0), vec![true; 18]).unwrap();
        let v = FeatureVolume::from_parts(grid, 2, crate::rng::gaussian_vec(&mut rng, 36, 1.0), vec![true; 18]).unwrap();
        let out = fuse_vision(&q, &v, &FuseWeights::identity(2)).unwrap();
        assert_eq!(out.data(), q.data());
    }
}
