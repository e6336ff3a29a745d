//! End-to-end forward pipeline on synthetic scenes.
//!
//! Stages: scene generation and rendering, text and image embedding, per-pixel
//! class map, lifting into vision and language volumes, vision fusion, the
//! multi-scale tri-plane layer, the classification head and scoring.

mod config;
mod head;
mod scene;
mod volume_io;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

pub use config::{HeadKind, Init, PipelineConfig};
pub use head::{classification_head, ClassificationHead, HeadOutput};
pub use scene::{build_synthetic_scene, first_hit, render_class_image, SceneSpec, SyntheticScene, GROUND_CLASS};
pub use volume_io::{decode_volume, encode_volume, read_volume, write_volume, VOLUME_HEADER_LEN, VOLUME_MAGIC};

use crate::conv::{Conv3d, KernelWeights};
use crate::counters::{CounterSnapshot, Counters};
use crate::error::{Error, Result, StageContext};
use crate::metrics::{geometric_scores, semantic_miou};
use crate::mstfm::{multiscale_steps, LevelStats, Merge, MsTfm};
use crate::rng::{derive_seed, seeded};
use crate::tfm::{plane_project, plane_ssm, Plane};
use crate::volume::{concat_channels, FeatureVolume, LabelVolume};
use crate::vsg::{
    fuse_vision, lift_language, lift_vision, pixel_class_map, voxel_pixel_lookup, ClassMap, ClassVocabulary,
    EmbeddingProvider, FuseWeights, LanguageEmbeddings, SyntheticProvider,
};

const STREAM_SCENE: u64 = 1;
const STREAM_PROVIDER: u64 = 2;
const STREAM_FUSE: u64 = 3;
const STREAM_MSTFM: u64 = 4;
const STREAM_HEAD: u64 = 5;

/// All seeded weights of one pipeline instance.
#[derive(Debug, Clone)]
pub struct PipelineModel {
    pub vocabulary: ClassVocabulary,
    pub provider: SyntheticProvider,
    pub embeddings: LanguageEmbeddings,
    pub fuse: FuseWeights,
    pub mstfm: MsTfm,
    pub head: ClassificationHead,
}

impl PipelineModel {
    pub fn build(cfg: &PipelineConfig) -> Result<Self> {
        let vocabulary = cfg.vocabulary()?;
        if vocabulary.len() != cfg.num_classes + 1 {
            return Err(Error::Config(format!(
                "vocabulary has {} entries, expected num_classes + 1 = {}",
                vocabulary.len(),
                cfg.num_classes + 1
            )));
        }
        let provider = SyntheticProvider::new(
            &vocabulary,
            derive_seed(cfg.seed, STREAM_PROVIDER),
            cfg.channels,
            cfg.noise_sigma,
        )?;
        let embeddings = provider.embed_text(&vocabulary)?;
        let mut fuse = FuseWeights::seeded(cfg.channels, &mut seeded(derive_seed(cfg.seed, STREAM_FUSE)));
        let mut mstfm = MsTfm::seeded(
            cfg.grid_dims,
            cfg.ms_tfm(),
            &mut seeded(derive_seed(cfg.seed, STREAM_MSTFM)),
        )?;
        if cfg.init == Init::Identity {
            let d = cfg.channels;
            fuse = FuseWeights::identity(d);
            for block in &mut mstfm.tfm {
                block.zero_projectors();
            }
            for level in &mut mstfm.coarse {
                level.up = [KernelWeights::zeros(2, d, d), KernelWeights::zeros(2, d, d)];
                if cfg.merge == Merge::ConcatConv {
                    level.merge = Some([Conv3d::center_identity(2 * d, d), Conv3d::center_identity(2 * d, d)]);
                }
            }
            mstfm.output = [Conv3d::center_identity(d, d), Conv3d::center_identity(d, d)];
        }
        let head = match cfg.head {
            HeadKind::Embedding => ClassificationHead::from_embeddings(&embeddings)?,
            HeadKind::Seeded => ClassificationHead::seeded(
                cfg.channels,
                cfg.num_classes,
                &mut seeded(derive_seed(cfg.seed, STREAM_HEAD)),
            )?,
        };
        Ok(Self {
            vocabulary,
            provider,
            embeddings,
            fuse,
            mstfm,
            head,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub miou: f64,
    /// `(class name, IoU)` for classes 1..=N; `None` when absent.
    pub per_class: Vec<(String, Option<f64>)>,
    pub observed_voxels: usize,
    /// Predicted label vs the class lifted onto each observed voxel.
    pub lifted_accuracy: f64,
    /// Embedding head on the lifted language volume vs the lifted class.
    pub language_head_accuracy: f64,
    /// Per-pixel class map vs the rendered ground-truth image.
    pub class_map_accuracy: f64,
}

impl MetricsReport {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "iou = {}", self.iou);
        let _ = writeln!(s, "precision = {}", self.precision);
        let _ = writeln!(s, "recall = {}", self.recall);
        let _ = writeln!(s, "miou = {}", self.miou);
        for (name, iou) in &self.per_class {
            match iou {
                Some(v) => {
                    let _ = writeln!(s, "iou_{name} = {v}");
                }
                None => {
                    let _ = writeln!(s, "iou_{name} = absent");
                }
            }
        }
        let _ = writeln!(s, "observed_voxels = {}", self.observed_voxels);
        let _ = writeln!(s, "lifted_accuracy = {}", self.lifted_accuracy);
        let _ = writeln!(s, "language_head_accuracy = {}", self.language_head_accuracy);
        let _ = writeln!(s, "class_map_accuracy = {}", self.class_map_accuracy);
        s
    }
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub scene: SyntheticScene,
    pub class_map: ClassMap,
    pub vision: FeatureVolume,
    pub language: FeatureVolume,
    /// Class sampled by each voxel center; `None` outside the frustum.
    pub lifted_labels: Vec<Option<u8>>,
    pub prediction: LabelVolume,
    pub metrics: MetricsReport,
    pub levels: Vec<LevelStats>,
    pub counters: CounterSnapshot,
    pub timings: Vec<(&'static str, Duration)>,
}

fn timed<T>(timings: &mut Vec<(&'static str, Duration)>, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().stage(stage)?;
    timings.push((stage, start.elapsed()));
    Ok(out)
}

fn accuracy(pairs: impl Iterator<Item = (u8, u8)>) -> f64 {
    let (mut hit, mut total) = (0usize, 0usize);
    for (a, b) in pairs {
        total += 1;
        hit += usize::from(a == b);
    }
    if total == 0 {
        1.0
    } else {
        hit as f64 / total as f64
    }
}

/// Runs every stage in memory.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let model = PipelineModel::build(cfg).stage("model")?;
    run_with_model(cfg, &model)
}

pub fn run_with_model(cfg: &PipelineConfig, model: &PipelineModel) -> Result<PipelineRun> {
    let mut timings = Vec::new();
    let counters = Counters::new();
    let grid = cfg.grid().stage("scene")?;
    let camera = cfg.camera().stage("scene")?;

    let scene = timed(&mut timings, "scene", || {
        let spec = SceneSpec {
            grid,
            num_classes: cfg.num_classes,
            num_boxes: cfg.num_boxes,
            ground_plane: cfg.ground_plane,
        };
        build_synthetic_scene(derive_seed(cfg.seed, STREAM_SCENE), &spec, &camera)
    })?;
    let image_features = timed(&mut timings, "embed", || model.provider.embed_image(&scene.image))?;
    let class_map = timed(&mut timings, "classify", || {
        pixel_class_map(&image_features, &model.embeddings, cfg.temperature)
    })?;
    let (vision, language) = timed(&mut timings, "lift", || {
        Ok((
            lift_vision(&image_features, &grid, &camera)?,
            lift_language(&class_map, &model.embeddings, &grid, &camera)?,
        ))
    })?;
    let fused_vision = timed(&mut timings, "fuse", || fuse_vision(&vision, &vision, &model.fuse))?;
    let ms = timed(&mut timings, "mstfm", || model.mstfm.forward(&fused_vision, &language, &counters))?;
    let prediction = timed(&mut timings, "head", || Ok(model.head.forward(&ms.vision)?.labels))?;

    let lifted_labels: Vec<Option<u8>> = voxel_pixel_lookup(&grid, &camera)
        .into_iter()
        .map(|hit| hit.map(|(row, col)| scene.image.at(row, col) as u8))
        .collect();
    let metrics = timed(&mut timings, "metrics", || {
        let geo = geometric_scores(&prediction, &scene.gt)?;
        let sem = semantic_miou(&prediction, &scene.gt, cfg.num_classes)?;
        let language_head = ClassificationHead::from_embeddings(&model.embeddings)?.forward(&language)?;
        let observed = || lifted_labels.iter().enumerate().filter_map(|(v, l)| l.map(|l| (v, l)));
        Ok(MetricsReport {
            iou: geo.iou,
            precision: geo.precision,
            recall: geo.recall,
            miou: sem.miou,
            per_class: model.vocabulary.names()[1..]
                .iter()
                .cloned()
                .zip(sem.per_class)
                .collect(),
            observed_voxels: observed().count(),
            lifted_accuracy: accuracy(observed().map(|(v, l)| (prediction.data()[v], l))),
            language_head_accuracy: accuracy(observed().map(|(v, l)| (language_head.labels.data()[v], l))),
            class_map_accuracy: accuracy(class_map.data().iter().zip(scene.image.data()).map(|(&a, &b)| (a as u8, b as u8))),
        })
    })?;

    Ok(PipelineRun {
        scene,
        class_map,
        vision,
        language,
        lifted_labels,
        prediction,
        metrics,
        levels: ms.levels,
        counters: counters.snapshot(),
        timings,
    })
}

/// Output files of [`run_and_write`].
#[derive(Debug, Clone)]
pub struct RunFiles {
    pub prediction: PathBuf,
    pub ground_truth: PathBuf,
    pub metrics: PathBuf,
}

/// Runs the pipeline and writes `prediction.ovl`, `ground_truth.ovl` and
/// `metrics.txt` into `out_dir`.
pub fn run_and_write(cfg: &PipelineConfig, out_dir: &Path) -> Result<(PipelineRun, RunFiles)> {
    let run = run_pipeline(cfg)?;
    let files = RunFiles {
        prediction: out_dir.join("prediction.ovl"),
        ground_truth: out_dir.join("ground_truth.ovl"),
        metrics: out_dir.join("metrics.txt"),
    };
    (|| -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        write_volume(&files.prediction, &run.prediction)?;
        write_volume(&files.ground_truth, &run.scene.gt)?;
        let mut text = format!("seed = {}\n", cfg.seed);
        text.push_str(&run.metrics.to_text());
        std::fs::write(&files.metrics, text)?;
        Ok(())
    })()
    .stage("write")?;
    Ok((run, files))
}

/// Timings and counters as `key = value` lines.
pub fn bench(cfg: &PipelineConfig) -> Result<Vec<(String, String)>> {
    let start = Instant::now();
    let model = PipelineModel::build(cfg).stage("model")?;
    let build_time = start.elapsed();
    let run = run_with_model(cfg, &model)?;
    let total = start.elapsed();
    let mut out = vec![
        ("grid".to_string(), format!("{}x{}x{}", cfg.grid_dims[0], cfg.grid_dims[1], cfg.grid_dims[2])),
        ("voxels".to_string(), cfg.grid_dims.iter().product::<usize>().to_string()),
        (
            "scales".to_string(),
            cfg.scales.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
        ),
        ("time_model_s".to_string(), format!("{:.6}", build_time.as_secs_f64())),
    ];
    for (stage, t) in &run.timings {
        out.push((format!("time_{stage}_s"), format!("{:.6}", t.as_secs_f64())));
    }
    out.push(("time_total_s".to_string(), format!("{:.6}", total.as_secs_f64())));
    let c = run.counters;
    out.push(("ssm_forward_steps".to_string(), c.ssm_forward_steps.to_string()));
    out.push(("ssm_backward_steps".to_string(), c.ssm_backward_steps.to_string()));
    out.push((
        "ssm_steps_closed_form".to_string(),
        multiscale_steps(cfg.grid_dims, &cfg.scales).to_string(),
    ));
    out.push(("sparse_input_sites".to_string(), c.sparse_input_sites.to_string()));
    out.push(("sparse_output_sites".to_string(), c.sparse_output_sites.to_string()));
    out.push(("dense_conv_sites".to_string(), c.dense_conv_sites.to_string()));
    for lvl in &run.levels {
        out.push((format!("active_vision_scale_{}", lvl.scale), lvl.active_vision.to_string()));
        out.push((format!("active_language_scale_{}", lvl.scale), lvl.active_language.to_string()));
    }
    out.push(("miou".to_string(), run.metrics.miou.to_string()));
    out.push(("iou".to_string(), run.metrics.iou.to_string()));
    Ok(out)
}

/// Writes `plane_xy.tsv`, `plane_yz.tsv` and `plane_zx.tsv` into `out_dir`:
/// one line per plane cell of the full-scale fusion block with the L2 norm of
/// the projected feature and the L2 norm and mean after the sequence block.
pub fn dump_planes(cfg: &PipelineConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let model = PipelineModel::build(cfg).stage("model")?;
    let grid = cfg.grid().stage("scene")?;
    let camera = cfg.camera().stage("scene")?;
    let spec = SceneSpec {
        grid,
        num_classes: cfg.num_classes,
        num_boxes: cfg.num_boxes,
        ground_plane: cfg.ground_plane,
    };
    let scene = build_synthetic_scene(derive_seed(cfg.seed, STREAM_SCENE), &spec, &camera).stage("scene")?;
    let features = model.provider.embed_image(&scene.image).stage("embed")?;
    let class_map = pixel_class_map(&features, &model.embeddings, cfg.temperature).stage("classify")?;
    let vision = lift_vision(&features, &grid, &camera).stage("lift")?;
    let language = lift_language(&class_map, &model.embeddings, &grid, &camera).stage("lift")?;
    let fused_vision = fuse_vision(&vision, &vision, &model.fuse).stage("fuse")?;
    let fused = concat_channels(&fused_vision, &language).stage("fuse")?;

    let block = &model.mstfm.tfm[0];
    let counters = Counters::new();
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    (|| -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(out_dir)?;
        let mut paths = Vec::new();
        for (proj, plane) in block.projectors.iter().zip(Plane::ALL) {
            let projected = plane_project(&fused, proj)?;
            let scanned = plane_ssm(&projected, &block.ssm, &counters)?;
            let mut text = String::from("row\tcol\tproj_l2\tssm_l2\tssm_mean\n");
            for r in 0..projected.rows {
                for c in 0..projected.cols {
                    let s = scanned.cell(r, c);
                    let mean = s.iter().sum::<f64>() / s.len() as f64;
                    let _ = writeln!(text, "{r}\t{c}\t{}\t{}\t{mean}", norm(projected.cell(r, c)), norm(s));
                }
            }
            let path = out_dir.join(format!("plane_{}.tsv", plane.name()));
            std::fs::write(&path, text)?;
            paths.push(path);
        }
        Ok(paths)
    })()
    .stage("write")
}
