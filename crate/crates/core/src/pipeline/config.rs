//! Flat `key = value` configuration.
//!
//! Blank lines and text after `#` are ignored. Every key is optional; unknown
//! keys, repeated keys and unparsable values are errors. See
//! `configs/default.conf` for the full key list with defaults.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, VoxelGridSpec};
use crate::mstfm::{validate_scales, Merge, MsTfmConfig, Scale};
use crate::ssm::BlockConfig;
use crate::vsg::ClassVocabulary;

/// How the fusion weights are initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Seeded Gaussian weights everywhere.
    Seeded,
    /// Pass-through weights: identity fuse convs, zero plane projectors and
    /// deconvs, center-identity output convs.
    Identity,
}

impl FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seeded" => Ok(Init::Seeded),
            "identity" => Ok(Init::Identity),
            _ => Err(Error::Config(format!("unknown init `{s}` (use seeded or identity)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Rows are the class text embeddings.
    Embedding,
    Seeded,
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(HeadKind::Embedding),
            "seeded" => Ok(HeadKind::Seeded),
            _ => Err(Error::Config(format!("unknown head `{s}` (use embedding or seeded)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub grid_dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: [f64; 3],

    pub image_width: usize,
    pub image_height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub cam_position: [f64; 3],
    pub cam_yaw_deg: f64,
    pub cam_pitch_deg: f64,

    pub num_classes: usize,
    pub num_boxes: usize,
    pub ground_plane: bool,

    pub channels: usize,
    pub temperature: f64,
    pub noise_sigma: f64,
    pub scales: Vec<Scale>,
    pub ssm_state: usize,
    pub ssm: BlockConfig,
    pub share_scale_weights: bool,
    pub merge: Merge,
    pub output_conv_language: bool,
    pub init: Init,
    pub head: HeadKind,

    pub out_dir: PathBuf,
    pub vocabulary: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            grid_dims: [32, 32, 8],
            voxel_size: 0.2,
            origin: [0.0, -3.2, 0.0],
            image_width: 64,
            image_height: 48,
            fx: 40.0,
            fy: 40.0,
            cx: 32.0,
            cy: 24.0,
            cam_position: [-0.4, 0.0, 1.5],
            cam_yaw_deg: 0.0,
            cam_pitch_deg: 25.0,
            num_classes: 8,
            num_boxes: 6,
            ground_plane: true,
            channels: 16,
            temperature: 0.07,
            noise_sigma: 0.1,
            scales: vec![Scale::Full, Scale::Half],
            ssm_state: 8,
            ssm: BlockConfig::default(),
            share_scale_weights: false,
            merge: Merge::Add,
            output_conv_language: true,
            init: Init::Seeded,
            head: HeadKind::Embedding,
            out_dir: PathBuf::from("out"),
            vocabulary: None,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_in(text, None)
    }

    /// Relative `vocabulary` paths are resolved against `base`.
    fn parse_in(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: `{key}` set twice", n + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        if let (Some(v), Some(dir)) = (&cfg.vocabulary, base) {
            if v.is_relative() {
                cfg.vocabulary = Some(dir.join(v));
            }
        }
        if let Some(path) = &cfg.vocabulary {
            let vocab = ClassVocabulary::load(path).map_err(|e| Error::Config(format!("vocabulary {}: {e}", path.display())))?;
            let n = vocab.len() - 1;
            if seen.contains("num_classes") && n != cfg.num_classes {
                return Err(Error::Config(format!(
                    "vocabulary lists {n} classes after `empty` but num_classes = {}",
                    cfg.num_classes
                )));
            }
            cfg.num_classes = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse_in(&text, path.parent())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "grid_h" => self.grid_dims[0] = parse_value(key, v)?,
            "grid_w" => self.grid_dims[1] = parse_value(key, v)?,
            "grid_l" => self.grid_dims[2] = parse_value(key, v)?,
            "voxel_size" => self.voxel_size = parse_value(key, v)?,
            "origin_x" => self.origin[0] = parse_value(key, v)?,
            "origin_y" => self.origin[1] = parse_value(key, v)?,
            "origin_z" => self.origin[2] = parse_value(key, v)?,
            "image_width" => self.image_width = parse_value(key, v)?,
            "image_height" => self.image_height = parse_value(key, v)?,
            "fx" => self.fx = parse_value(key, v)?,
            "fy" => self.fy = parse_value(key, v)?,
            "cx" => self.cx = parse_value(key, v)?,
            "cy" => self.cy = parse_value(key, v)?,
            "cam_x" => self.cam_position[0] = parse_value(key, v)?,
            "cam_y" => self.cam_position[1] = parse_value(key, v)?,
            "cam_z" => self.cam_position[2] = parse_value(key, v)?,
            "cam_yaw_deg" => self.cam_yaw_deg = parse_value(key, v)?,
            "cam_pitch_deg" => self.cam_pitch_deg = parse_value(key, v)?,
            "num_classes" => self.num_classes = parse_value(key, v)?,
            "num_boxes" => self.num_boxes = parse_value(key, v)?,
            "ground_plane" => self.ground_plane = parse_bool(key, v)?,
            "channels" => self.channels = parse_value(key, v)?,
            "temperature" => self.temperature = parse_value(key, v)?,
            "noise_sigma" => self.noise_sigma = parse_value(key, v)?,
            "scales" => {
                self.scales = v
                    .split(',')
                    .map(|s| s.trim().parse::<Scale>())
                    .collect::<Result<Vec<_>>>()?
            }
            "ssm_state" => self.ssm_state = parse_value(key, v)?,
            "ssm_selective" => self.ssm.selective = parse_bool(key, v)?,
            "ssm_bidirectional" => self.ssm.bidirectional = parse_bool(key, v)?,
            "ssm_gate" => self.ssm.gate = parse_bool(key, v)?,
            "ssm_norm" => self.ssm.norm = parse_bool(key, v)?,
            "share_scale_weights" => self.share_scale_weights = parse_bool(key, v)?,
            "merge" => self.merge = v.parse()?,
            "output_conv_language" => self.output_conv_language = parse_bool(key, v)?,
            "init" => self.init = v.parse()?,
            "head" => self.head = v.parse()?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "vocabulary" => self.vocabulary = Some(PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.grid_dims.contains(&0) {
            return bad(format!("grid dims must be positive, got {:?}", self.grid_dims));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return bad(format!("voxel_size must be positive, got {}", self.voxel_size));
        }
        if self.num_classes == 0 || self.num_classes > 254 {
            return bad(format!("num_classes must be in 1..=254, got {}", self.num_classes));
        }
        if self.channels < self.num_classes + 1 {
            return bad(format!(
                "channels ({}) must be at least num_classes + 1 ({})",
                self.channels,
                self.num_classes + 1
            ));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.ssm_state == 0 {
            return bad("ssm_state must be positive".into());
        }
        validate_scales(&self.scales)?;
        self.grid().map_err(|e| Error::Config(e.to_string()))?;
        self.camera().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn grid(&self) -> Result<VoxelGridSpec> {
        VoxelGridSpec::new(Vector3::from(self.origin), self.voxel_size, self.grid_dims)
    }

    pub fn camera(&self) -> Result<CameraModel> {
        CameraModel::looking(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            Vector3::from(self.cam_position),
            self.cam_yaw_deg.to_radians(),
            self.cam_pitch_deg.to_radians(),
            self.image_width,
            self.image_height,
        )
    }

    pub fn vocabulary(&self) -> Result<ClassVocabulary> {
        match &self.vocabulary {
            Some(p) => ClassVocabulary::load(p),
            None => ClassVocabulary::with_empty(self.num_classes),
        }
    }

    pub fn ms_tfm(&self) -> MsTfmConfig {
        MsTfmConfig {
            scales: self.scales.clone(),
            channels: self.channels,
            state: self.ssm_state,
            block: self.ssm,
            share_weights: self.share_scale_weights,
            merge: self.merge,
            output_conv_language: self.output_conv_language,
        }
    }
}
