//! Fusion strategies and input corruptions.
//!
//! All pipelines share the lidar path augment -> voxelize -> encode. They
//! differ in where camera features enter:
//!
//! - input fusion decorates raw points before augmentation;
//! - late fusion encodes camera-decorated points in a separate branch and
//!   concatenates the two pseudo-images;
//! - deep fusion gathers camera features per pillar after encoding, mapping
//!   key points back through the augmentation record, and fuses them with
//!   [`learnable_align`](crate::align::learnable_align) or
//!   [`mean_pool_align`].

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{
    gather_camera_features, learnable_align_trace, mean_pool_align, AlignParams, DropoutMask,
    DropoutPlacement, DEFAULT_MAX_N, DROPOUT_RATE, EMBED_DIM, MLP_DIM,
};
use crate::augment::{augment_tracked, AugConfig, AugRecord, Augmented};
use crate::error::{Error, Result};
use crate::geometry::{
    bilinear_sample, project_to_image, CameraModel, FeatureMap, LidarPoint, PointCloud, Vec3,
};
use crate::io::{self, Correspondence};
use crate::voxel::{
    dynamic_voxelize, encode_features, encode_pillars, pillar_center, point_features, Activation,
    EncoderParams, FeatureLayout, PillarGrid, PseudoImage, VoxelAssignment,
};

pub const POINTS_FILE: &str = "points.pclf";
pub const CAMERA_FILE: &str = "camera.json";
pub const FEATURES_FILE: &str = "features.fmap";
pub const CORRESPONDENCES_FILE: &str = "correspondences.csv";

/// One lidar sweep with its camera and camera feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub camera: CameraModel,
    pub features: FeatureMap,
    pub correspondences: Option<Vec<Correspondence>>,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        self.cloud.validate()?;
        self.camera.validate()?;
        self.features.validate()?;
        if let Some(rows) = &self.correspondences {
            for row in rows {
                if row.point_index >= self.cloud.len() {
                    return Err(Error::IndexOutOfRange {
                        index: row.point_index,
                        len: self.cloud.len(),
                    });
                }
                if !self.camera.in_frame(row.u, row.v) {
                    return Err(Error::Format(format!(
                        "correspondence for point {} at ({}, {}) is outside the image",
                        row.point_index, row.u, row.v
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let corr_path = dir.join(CORRESPONDENCES_FILE);
        let correspondences = if corr_path.exists() {
            Some(io::correspondences_from_csv(std::fs::File::open(
                corr_path,
            )?)?)
        } else {
            None
        };
        let scene = Scene {
            cloud: io::read_points(&dir.join(POINTS_FILE))?,
            camera: io::read_camera(&dir.join(CAMERA_FILE))?,
            features: io::read_feature_map(&dir.join(FEATURES_FILE))?,
            correspondences,
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        io::write_points(&dir.join(POINTS_FILE), &self.cloud)?;
        io::write_camera(&dir.join(CAMERA_FILE), &self.camera)?;
        io::write_feature_map(&dir.join(FEATURES_FILE), &self.features)?;
        let corr_path = dir.join(CORRESPONDENCES_FILE);
        match &self.correspondences {
            Some(rows) => std::fs::write(corr_path, io::correspondences_to_csv(rows)?)?,
            None if corr_path.exists() => std::fs::remove_file(corr_path)?,
            None => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[serde(alias = "single_modal")]
    Single,
    #[serde(alias = "input_fusion")]
    Input,
    #[serde(alias = "late_fusion")]
    Late,
    #[serde(alias = "deep_fusion")]
    Deep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignKind {
    #[default]
    Learned,
    Mean,
}

/// Which 3D coordinates of a pillar are projected into the camera.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyPoints {
    /// Every member lidar point.
    #[default]
    Members,
    /// The pillar footprint center at the members' mean height.
    PillarCenter,
}

/// Fully resolved pipeline parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    pub strategy: Strategy,
    pub aug: AugConfig,
    pub grid: PillarGrid,
    pub lidar_encoder: EncoderParams,
    pub camera_encoder: Option<EncoderParams>,
    pub align: Option<AlignParams>,
    pub use_inverse_aug: bool,
    pub align_kind: AlignKind,
    pub key_points: KeyPoints,
    pub max_n: usize,
    /// Sample attention dropout masks (deep fusion only).
    pub training: bool,
    pub seed: u64,
}

impl FusionConfig {
    pub fn validate(&self, scene: &Scene) -> Result<()> {
        self.aug.validate()?;
        self.lidar_encoder.validate()?;
        let channels = scene.features.channels;
        let expected_layout = match self.strategy {
            Strategy::Input => FeatureLayout::DecoratedPoint {
                camera_channels: channels,
            },
            _ => FeatureLayout::Point,
        };
        if self.lidar_encoder.layout != expected_layout {
            return Err(Error::DimensionMismatch(format!(
                "{:?} needs a lidar encoder with layout {expected_layout:?}, got {:?}",
                self.strategy, self.lidar_encoder.layout
            )));
        }
        match self.strategy {
            Strategy::Late => {
                let cam = self.camera_encoder.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("late fusion needs camera encoder params".into())
                })?;
                cam.validate()?;
                if cam.layout != (FeatureLayout::Camera { channels }) {
                    return Err(Error::DimensionMismatch(format!(
                        "camera encoder layout {:?} does not take {channels} channels",
                        cam.layout
                    )));
                }
            }
            Strategy::Deep => {
                let align = self
                    .align
                    .as_ref()
                    .ok_or_else(|| Error::InvalidConfig("deep fusion needs align params".into()))?;
                align.validate()?;
                if align.lidar_dim() != self.lidar_encoder.output_dim()
                    || align.camera_dim() != channels
                {
                    return Err(Error::DimensionMismatch(format!(
                        "align params take {}+{} channels, pipeline provides {}+{}",
                        align.lidar_dim(),
                        align.camera_dim(),
                        self.lidar_encoder.output_dim(),
                        channels
                    )));
                }
                if self.max_n == 0 {
                    return Err(Error::InvalidConfig("max_n must be at least 1".into()));
                }
            }
            Strategy::Single | Strategy::Input => {}
        }
        Ok(())
    }
}

/// Summary numbers written next to a pipeline's pseudo-image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionMetrics {
    pub strategy: Strategy,
    pub input_points: usize,
    pub augmented_points: usize,
    pub assigned_points: usize,
    pub nonempty_pillars: usize,
    pub record_ops: usize,
    pub output_channels: usize,
    /// Raw points that project into the feature map (input and late fusion).
    pub decorated_points: usize,
    /// Pillars that received at least one camera feature (deep fusion).
    pub fused_pillars: usize,
    pub mean_camera_features: f64,
}

/// Attention weights of one pillar, for overlay dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarAttention {
    pub pillar: usize,
    pub pixels: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    pub image: PseudoImage,
    pub record: AugRecord,
    pub metrics: FusionMetrics,
    pub attention: Vec<PillarAttention>,
}

/// Pixel `(u, v)` and the camera feature sampled there.
pub type Decoration = ((f64, f64), Vec<f64>);

/// Decoration of each raw point, `None` if it does not project into the
/// feature map.
pub fn decorate_points(scene: &Scene) -> Vec<Option<Decoration>> {
    let (fm_w, fm_h) = scene.features.pixel_extent();
    scene
        .cloud
        .points
        .iter()
        .map(|p| {
            let (u, v) = project_to_image(p.position, &scene.camera)?;
            if u >= fm_w || v >= fm_h {
                return None;
            }
            bilinear_sample(&scene.features, u, v)
                .ok()
                .map(|f| ((u, v), f))
        })
        .collect()
}

struct LidarStage {
    augmented: Augmented,
    assignment: VoxelAssignment,
}

fn lidar_stage(scene: &Scene, cfg: &FusionConfig) -> Result<LidarStage> {
    let augmented = augment_tracked(&scene.cloud, &cfg.aug, cfg.seed)?;
    let assignment = dynamic_voxelize(&augmented.cloud, &cfg.grid);
    Ok(LidarStage {
        augmented,
        assignment,
    })
}

fn base_metrics(
    scene: &Scene,
    cfg: &FusionConfig,
    stage: &LidarStage,
    channels: usize,
) -> FusionMetrics {
    FusionMetrics {
        strategy: cfg.strategy,
        input_points: scene.cloud.len(),
        augmented_points: stage.augmented.cloud.len(),
        assigned_points: stage.assignment.num_assigned(),
        nonempty_pillars: stage.assignment.nonempty_pillars().count(),
        record_ops: stage.augmented.record.ops.len(),
        output_channels: channels,
        decorated_points: 0,
        fused_pillars: 0,
        mean_camera_features: 0.0,
    }
}

fn expect_strategy(cfg: &FusionConfig, strategy: Strategy) -> Result<()> {
    if cfg.strategy != strategy {
        return Err(Error::InvalidConfig(format!(
            "config is for {:?}, pipeline is {strategy:?}",
            cfg.strategy
        )));
    }
    Ok(())
}

/// Lidar-only baseline.
pub fn single_modal(scene: &Scene, cfg: &FusionConfig) -> Result<FusionOutput> {
    expect_strategy(cfg, Strategy::Single)?;
    cfg.validate(scene)?;
    let stage = lidar_stage(scene, cfg)?;
    let image = encode_pillars(
        &stage.augmented.cloud,
        &stage.assignment,
        &cfg.lidar_encoder,
    )?;
    let metrics = base_metrics(scene, cfg, &stage, image.channels);
    Ok(FusionOutput {
        image,
        record: stage.augmented.record,
        metrics,
        attention: Vec::new(),
    })
}

/// Decorate raw points with camera features, then augment, voxelize and encode.
pub fn input_fusion(scene: &Scene, cfg: &FusionConfig) -> Result<FusionOutput> {
    expect_strategy(cfg, Strategy::Input)?;
    cfg.validate(scene)?;
    let channels = scene.features.channels;
    let decorations = decorate_points(scene);
    let stage = lidar_stage(scene, cfg)?;
    let mut features = point_features(&stage.augmented.cloud, &stage.assignment);
    for (f, &src) in features.iter_mut().zip(&stage.augmented.source_indices) {
        match &decorations[src] {
            Some((_, cam)) => f.extend_from_slice(cam),
            None => f.extend(std::iter::repeat_n(0.0, channels)),
        }
    }
    let image = encode_features(&features, &stage.assignment, &cfg.lidar_encoder)?;
    let mut metrics = base_metrics(scene, cfg, &stage, image.channels);
    metrics.decorated_points = decorations.iter().filter(|d| d.is_some()).count();
    Ok(FusionOutput {
        image,
        record: stage.augmented.record,
        metrics,
        attention: Vec::new(),
    })
}

/// Encode lidar and camera branches separately and concatenate channels.
/// The camera branch only contains points with a camera feature.
pub fn late_fusion(scene: &Scene, cfg: &FusionConfig) -> Result<FusionOutput> {
    expect_strategy(cfg, Strategy::Late)?;
    cfg.validate(scene)?;
    let camera_encoder = cfg.camera_encoder.as_ref().expect("checked by validate");
    let channels = scene.features.channels;
    let decorations = decorate_points(scene);
    let stage = lidar_stage(scene, cfg)?;
    let lidar = encode_pillars(
        &stage.augmented.cloud,
        &stage.assignment,
        &cfg.lidar_encoder,
    )?;

    let sources = &stage.augmented.source_indices;
    let mut camera_assignment = stage.assignment.clone();
    camera_assignment.members.iter_mut().for_each(Vec::clear);
    let mut camera_features = Vec::with_capacity(sources.len());
    for (i, &src) in sources.iter().enumerate() {
        match (&decorations[src], stage.assignment.point_pillar[i]) {
            (Some((_, f)), Some(pillar)) => {
                camera_assignment.members[pillar].push(i);
                camera_features.push(f.clone());
            }
            _ => {
                camera_assignment.point_pillar[i] = None;
                camera_features.push(vec![0.0; channels]);
            }
        }
    }
    let camera = encode_features(&camera_features, &camera_assignment, camera_encoder)?;
    let image = lidar.concat(&camera)?;
    let mut metrics = base_metrics(scene, cfg, &stage, image.channels);
    metrics.decorated_points = decorations.iter().filter(|d| d.is_some()).count();
    Ok(FusionOutput {
        image,
        record: stage.augmented.record,
        metrics,
        attention: Vec::new(),
    })
}

fn pillar_key_points(
    members: &[usize],
    cloud: &PointCloud,
    pillar: usize,
    mode: KeyPoints,
    grid: &PillarGrid,
) -> Result<Vec<Vec3>> {
    Ok(match mode {
        KeyPoints::Members => members.iter().map(|&i| cloud.points[i].position).collect(),
        KeyPoints::PillarCenter => {
            let (x, y) = pillar_center(pillar, grid)?;
            let z = members
                .iter()
                .map(|&i| cloud.points[i].position.z)
                .sum::<f64>()
                / members.len().max(1) as f64;
            vec![Vec3::new(x, y, z)]
        }
    })
}

fn dropout_seed(seed: u64, pillar: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (pillar as u64).wrapping_add(0xD1B5_4A32)
}

/// Encode lidar pillars, then fuse each with the camera features its key
/// points project onto.
pub fn deep_fusion(scene: &Scene, cfg: &FusionConfig) -> Result<FusionOutput> {
    expect_strategy(cfg, Strategy::Deep)?;
    cfg.validate(scene)?;
    let align = cfg.align.as_ref().expect("checked by validate");
    let stage = lidar_stage(scene, cfg)?;
    let mut image = encode_pillars(
        &stage.augmented.cloud,
        &stage.assignment,
        &cfg.lidar_encoder,
    )?;

    // Without inverse augmentation, key points are projected as if the
    // augmented cloud were in the sensor frame.
    let gather_record = if cfg.use_inverse_aug {
        stage.augmented.record.clone()
    } else {
        AugRecord::identity()
    };

    let pillars: Vec<usize> = stage.assignment.nonempty_pillars().collect();
    let fused: Vec<(Vec<f64>, PillarAttention)> = pillars
        .par_iter()
        .map(|&pillar| -> Result<_> {
            let keys = pillar_key_points(
                &stage.assignment.members[pillar],
                &stage.augmented.cloud,
                pillar,
                cfg.key_points,
                &cfg.grid,
            )?;
            let cams = gather_camera_features(
                &keys,
                &gather_record,
                &scene.camera,
                &scene.features,
                cfg.max_n,
                pillar,
            )?;
            let lidar = image.cell(pillar);
            let (output, weights) = match cfg.align_kind {
                AlignKind::Mean => {
                    let n = cams.len();
                    (
                        mean_pool_align(lidar, &cams, align)?,
                        vec![1.0 / n.max(1) as f64; n],
                    )
                }
                AlignKind::Learned => {
                    let mask = if cfg.training && align.dropout_rate > 0.0 {
                        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed(cfg.seed, pillar));
                        Some(DropoutMask::sample(
                            cams.len(),
                            align.dropout_rate,
                            &mut rng,
                        )?)
                    } else {
                        None
                    };
                    let trace = learnable_align_trace(lidar, &cams, align, mask.as_ref())?;
                    (trace.output, trace.mixing)
                }
            };
            Ok((
                output,
                PillarAttention {
                    pillar,
                    pixels: cams.pixels,
                    weights,
                },
            ))
        })
        .collect::<Result<_>>()?;

    let mut metrics = base_metrics(scene, cfg, &stage, image.channels);
    let mut total_features = 0usize;
    let mut attention = Vec::with_capacity(fused.len());
    for (values, att) in fused {
        image.cell_mut(att.pillar).copy_from_slice(&values);
        if !att.pixels.is_empty() {
            metrics.fused_pillars += 1;
        }
        total_features += att.pixels.len();
        attention.push(att);
    }
    if metrics.nonempty_pillars > 0 {
        metrics.mean_camera_features = total_features as f64 / metrics.nonempty_pillars as f64;
    }
    Ok(FusionOutput {
        image,
        record: stage.augmented.record,
        metrics,
        attention,
    })
}

/// Dispatch on `cfg.strategy`.
pub fn run_pipeline(scene: &Scene, cfg: &FusionConfig) -> Result<FusionOutput> {
    match cfg.strategy {
        Strategy::Single => single_modal(scene, cfg),
        Strategy::Input => input_fusion(scene, cfg),
        Strategy::Late => late_fusion(scene, cfg),
        Strategy::Deep => deep_fusion(scene, cfg),
    }
}

/// Attention dump rows `pillar_index,u,v,weight`.
pub fn attention_to_csv(attention: &[PillarAttention]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["pillar_index", "u", "v", "weight"])?;
    for att in attention {
        for (&(u, v), &weight) in att.pixels.iter().zip(&att.weights) {
            w.write_record([
                att.pillar.to_string(),
                u.to_string(),
                v.to_string(),
                weight.to_string(),
            ])?;
        }
    }
    w.into_inner()
        .map_err(|e| Error::Format(format!("csv flush failed: {e}")))
}

/// How a corruption perturbs a value `x` with `u ~ U[-m, m]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// `x (1 + u)`
    #[default]
    Multiplicative,
    /// `x + u`
    Additive,
}

fn check_magnitude(magnitude: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&magnitude) {
        return Err(Error::InvalidConfig(format!(
            "noise magnitude {magnitude} outside [0, 1]"
        )));
    }
    Ok(())
}

fn sample_offset<R: Rng + ?Sized>(magnitude: f64, rng: &mut R) -> f64 {
    if magnitude > 0.0 {
        rng.gen_range(-magnitude..=magnitude)
    } else {
        0.0
    }
}

/// Perturb lidar intensities; positions are untouched and the result is
/// clamped to `[0, 1]`.
pub fn laser_noise<R: Rng + ?Sized>(
    points: &PointCloud,
    magnitude: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    laser_noise_with(points, magnitude, NoiseMode::Multiplicative, rng)
}

pub fn laser_noise_with<R: Rng + ?Sized>(
    points: &PointCloud,
    magnitude: f64,
    mode: NoiseMode,
    rng: &mut R,
) -> Result<PointCloud> {
    check_magnitude(magnitude)?;
    let noisy = points
        .points
        .iter()
        .map(|p| {
            let u = sample_offset(magnitude, rng);
            let value = match mode {
                NoiseMode::Multiplicative => p.intensity * (1.0 + u),
                NoiseMode::Additive => p.intensity + u,
            };
            LidarPoint::new(p.position, value.clamp(0.0, 1.0))
        })
        .collect();
    Ok(PointCloud::new(noisy, points.frame_id))
}

/// Round `target` to `f32` without leaving `[original - bound, original + bound]`.
fn to_f32_within(original: f32, target: f64, bound: f64) -> f32 {
    let orig = original as f64;
    let mut out = target as f32;
    while (out as f64 - orig).abs() > bound {
        out = if (out as f64) > orig {
            out.next_down()
        } else {
            out.next_up()
        };
    }
    out
}

/// Perturb every feature-map value; no clamping.
pub fn pixel_noise<R: Rng + ?Sized>(
    fm: &FeatureMap,
    magnitude: f64,
    rng: &mut R,
) -> Result<FeatureMap> {
    pixel_noise_with(fm, magnitude, NoiseMode::Multiplicative, rng)
}

pub fn pixel_noise_with<R: Rng + ?Sized>(
    fm: &FeatureMap,
    magnitude: f64,
    mode: NoiseMode,
    rng: &mut R,
) -> Result<FeatureMap> {
    check_magnitude(magnitude)?;
    let data = fm
        .data
        .iter()
        .map(|&x| {
            let u = sample_offset(magnitude, rng);
            let xf = x as f64;
            match mode {
                NoiseMode::Multiplicative => to_f32_within(x, xf * (1.0 + u), magnitude * xf.abs()),
                NoiseMode::Additive => to_f32_within(x, xf + u, magnitude),
            }
        })
        .collect();
    FeatureMap::new(fm.width, fm.height, fm.channels, data, fm.scale)
}

/// Random weights for a pipeline, described by sizes and a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderInit {
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

fn default_activation() -> Activation {
    Activation::Silu
}

/// Encoder weights given inline or generated from an [`EncoderInit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EncoderSource {
    Explicit(EncoderParams),
    Random(EncoderInit),
}

impl EncoderSource {
    fn resolve(&self, layout: FeatureLayout) -> Result<EncoderParams> {
        match self {
            EncoderSource::Explicit(p) => {
                p.validate()?;
                if p.layout != layout {
                    return Err(Error::DimensionMismatch(format!(
                        "encoder layout {:?} does not match required {layout:?}",
                        p.layout
                    )));
                }
                Ok(p.clone())
            }
            EncoderSource::Random(init) => {
                let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
                EncoderParams::random(layout, &init.hidden, init.activation, &mut rng)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignInit {
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_mlp")]
    pub mlp_dim: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default)]
    pub scale_affinity: bool,
    #[serde(default)]
    pub dropout_placement: DropoutPlacement,
    #[serde(default)]
    pub seed: u64,
}

fn default_embed() -> usize {
    EMBED_DIM
}

fn default_mlp() -> usize {
    MLP_DIM
}

fn default_dropout() -> f64 {
    DROPOUT_RATE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
#[allow(clippy::large_enum_variant)]
pub enum AlignSource {
    Explicit(AlignParams),
    Random(AlignInit),
}

fn default_true() -> bool {
    true
}

fn default_max_n() -> usize {
    DEFAULT_MAX_N
}

/// The `fusion.json` file: a pipeline description whose weights are either
/// inline or generated from seeds once the scene's channel count is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub aug: AugConfig,
    #[serde(default)]
    pub grid: PillarGrid,
    #[serde(default = "default_lidar_encoder")]
    pub lidar_encoder: EncoderSource,
    #[serde(default)]
    pub camera_encoder: Option<EncoderSource>,
    #[serde(default)]
    pub align: Option<AlignSource>,
    #[serde(default = "default_true")]
    pub use_inverse_aug: bool,
    #[serde(default)]
    pub align_kind: AlignKind,
    #[serde(default)]
    pub key_points: KeyPoints,
    #[serde(default = "default_max_n")]
    pub max_n: usize,
    #[serde(default)]
    pub training: bool,
}

fn default_strategy() -> Strategy {
    Strategy::Deep
}

fn default_lidar_encoder() -> EncoderSource {
    EncoderSource::Random(EncoderInit {
        hidden: EncoderParams::DEFAULT_HIDDEN.to_vec(),
        activation: Activation::Silu,
        seed: 1,
    })
}

impl Default for FusionSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl FusionSpec {
    /// Build concrete parameters for a scene with `camera_channels` feature channels.
    pub fn resolve(&self, camera_channels: usize, seed: u64) -> Result<FusionConfig> {
        let lidar_layout = match self.strategy {
            Strategy::Input => FeatureLayout::DecoratedPoint { camera_channels },
            _ => FeatureLayout::Point,
        };
        let lidar_encoder = self.lidar_encoder.resolve(lidar_layout)?;

        let camera_encoder = match (self.strategy, &self.camera_encoder) {
            (Strategy::Late, src) => {
                let default = EncoderSource::Random(EncoderInit {
                    hidden: vec![64],
                    activation: Activation::Silu,
                    seed: 2,
                });
                let src = src.as_ref().unwrap_or(&default);
                Some(src.resolve(FeatureLayout::Camera {
                    channels: camera_channels,
                })?)
            }
            _ => None,
        };

        let align = match (self.strategy, &self.align) {
            (Strategy::Deep, src) => {
                let default = AlignSource::Random(serde_json::from_str("{}")?);
                Some(match src.as_ref().unwrap_or(&default) {
                    AlignSource::Explicit(p) => p.clone(),
                    AlignSource::Random(init) => {
                        let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
                        let mut p = AlignParams::random_with_dims(
                            lidar_encoder.output_dim(),
                            camera_channels,
                            init.embed_dim,
                            init.mlp_dim,
                            &mut rng,
                        );
                        p.dropout_rate = init.dropout_rate;
                        p.scale_affinity = init.scale_affinity;
                        p.dropout_placement = init.dropout_placement;
                        p
                    }
                })
            }
            _ => None,
        };

        Ok(FusionConfig {
            strategy: self.strategy,
            aug: self.aug,
            grid: self.grid,
            lidar_encoder,
            camera_encoder,
            align,
            use_inverse_aug: self.use_inverse_aug,
            align_kind: self.align_kind,
            key_points: self.key_points,
            max_n: self.max_n,
            training: self.training,
            seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{generate_scene, SceneSpec};

    fn small_scene() -> Scene {
        let spec = SceneSpec {
            num_points: 300,
            ..SceneSpec::default()
        };
        generate_scene(&spec).unwrap()
    }

    fn small_spec(strategy: Strategy) -> FusionSpec {
        serde_json::from_value(serde_json::json!({
            "strategy": strategy,
            "lidar_encoder": {"hidden": [8, 8], "seed": 3},
            "camera_encoder": {"hidden": [5], "seed": 4},
            "align": {"embed_dim": 8, "mlp_dim": 6, "seed": 5},
        }))
        .unwrap()
    }

    #[test]
    fn every_strategy_runs() {
        let scene = small_scene();
        for (strategy, channels) in [
            (Strategy::Single, 8),
            (Strategy::Input, 8),
            (Strategy::Late, 13),
            (Strategy::Deep, 8),
        ] {
            let cfg = small_spec(strategy)
                .resolve(scene.features.channels, 7)
                .unwrap();
            let out = run_pipeline(&scene, &cfg).unwrap();
            assert_eq!(out.image.channels, channels, "{strategy:?}");
            assert_eq!(out.metrics.output_channels, channels);
            assert_eq!(out.metrics.input_points, 300);
            assert!(out.image.data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn pipelines_are_deterministic() {
        let scene = small_scene();
        for strategy in [Strategy::Input, Strategy::Late, Strategy::Deep] {
            let mut spec = small_spec(strategy);
            spec.training = true;
            let cfg = spec.resolve(scene.features.channels, 11).unwrap();
            let a = run_pipeline(&scene, &cfg).unwrap();
            let b = run_pipeline(&scene, &cfg).unwrap();
            assert_eq!(a.image, b.image);
            assert_eq!(a.record, b.record);
            assert_eq!(a.attention, b.attention);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let scene = small_scene();
        let cfg = small_spec(Strategy::Deep)
            .resolve(scene.features.channels, 0)
            .unwrap();
        let out = deep_fusion(&scene, &cfg).unwrap();
        assert!(out.metrics.fused_pillars > 0);
        for att in &out.attention {
            assert!(att.pixels.len() <= cfg.max_n);
            if !att.weights.is_empty() {
                let sum: f64 = att.weights.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
            }
        }
        let csv = String::from_utf8(attention_to_csv(&out.attention).unwrap()).unwrap();
        assert!(csv.starts_with("pillar_index,u,v,weight\n"));
    }

    #[test]
    fn wrong_strategy_is_rejected() {
        let scene = small_scene();
        let cfg = small_spec(Strategy::Single)
            .resolve(scene.features.channels, 0)
            .unwrap();
        assert!(matches!(
            deep_fusion(&scene, &cfg),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn zero_noise_is_identity() {
        let scene = small_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            laser_noise(&scene.cloud, 0.0, &mut rng).unwrap(),
            scene.cloud
        );
        assert_eq!(
            pixel_noise(&scene.features, 0.0, &mut rng).unwrap(),
            scene.features
        );
    }

    #[test]
    fn noise_magnitude_is_checked() {
        let scene = small_scene();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(laser_noise(&scene.cloud, -0.1, &mut rng).is_err());
        assert!(pixel_noise(&scene.features, 1.5, &mut rng).is_err());
    }

    #[test]
    fn additive_pixel_noise_is_bounded() {
        let fm = FeatureMap::new(
            4,
            4,
            2,
            (0..32).map(|i| i as f32 * 0.37 - 3.0).collect(),
            1.0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noisy = pixel_noise_with(&fm, 0.1, NoiseMode::Additive, &mut rng).unwrap();
        for (a, b) in fm.data.iter().zip(&noisy.data) {
            assert!((*a as f64 - *b as f64).abs() <= 0.1);
        }
    }

    #[test]
    fn f32_rounding_respects_bound() {
        let x = 0.3f32;
        let bound = 0.025 * x as f64;
        let out = to_f32_within(x, x as f64 + bound, bound);
        assert!((out as f64 - x as f64).abs() <= bound);
    }

    #[test]
    fn default_spec_resolves() {
        let cfg = FusionSpec::default().resolve(4, 0).unwrap();
        assert_eq!(cfg.strategy, Strategy::Deep);
        assert_eq!(cfg.lidar_encoder.output_dim(), 256);
        let align = cfg.align.unwrap();
        assert_eq!((align.embed_dim(), align.mlp_dim()), (EMBED_DIM, MLP_DIM));
        assert!(cfg.use_inverse_aug);
    }
}
