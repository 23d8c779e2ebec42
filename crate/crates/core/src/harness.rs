//! Synthetic scenes with exact correspondences, and experiments on them.
//!
//! The alignment study measures how far a point's recovered pixel lands from
//! its true pixel after augmentation, with and without undoing the recorded
//! augmentation. Points whose recovered location leaves the image are counted
//! as lost and excluded from the error statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{align_grad_check, AlignParams, CameraFeatureSet};
use crate::augment::{augment_tracked, inverse_aug, AugConfig, AugRecord};
use crate::error::{Error, Result};
use crate::fusion::Scene;
use crate::geometry::{project_to_image, CameraModel, FeatureMap, LidarPoint, PointCloud, Vec3};
use crate::io::Correspondence;
use crate::linalg::uniform_vec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
}

impl Extent {
    fn contains(&self, p: Vec3) -> bool {
        (self.x[0]..=self.x[1]).contains(&p.x)
            && (self.y[0]..=self.y[1]).contains(&p.y)
            && (self.z[0]..=self.z[1]).contains(&p.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub position: Vec3,
    pub look_at: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureGenerator {
    Constant {
        value: f32,
    },
    /// Channels 0 and 1 hold the cell-center pixel `(u, v)`; the rest are seeded noise.
    CoordinateEncoded,
    SeededRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureMapSpec {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Pixels per cell.
    pub scale: f64,
    pub generator: FeatureGenerator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub num_points: usize,
    pub extent: Extent,
    pub camera: CameraSpec,
    pub feature_map: FeatureMapSpec,
    /// Permit the camera to sit inside the sampled volume.
    pub camera_inside: bool,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            num_points: 2000,
            extent: Extent {
                x: [5.0, 45.0],
                y: [-20.0, 20.0],
                z: [-1.5, 2.5],
            },
            camera: CameraSpec {
                position: Vec3::new(0.0, 0.0, 1.5),
                look_at: Vec3::new(20.0, 0.0, 1.0),
                fx: 500.0,
                fy: 500.0,
                width: 640,
                height: 480,
            },
            feature_map: FeatureMapSpec {
                width: 80,
                height: 60,
                channels: 4,
                scale: 8.0,
                generator: FeatureGenerator::CoordinateEncoded,
            },
            camera_inside: false,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let e = &self.extent;
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] < r[1];
        if !(ordered(e.x) && ordered(e.y) && ordered(e.z)) {
            return Err(Error::InvalidConfig(
                "scene extent must have min < max".into(),
            ));
        }
        if !self.camera_inside && e.contains(self.camera.position) {
            return Err(Error::InvalidConfig(
                "camera lies inside the point region (set camera_inside to allow)".into(),
            ));
        }
        let fm = &self.feature_map;
        if matches!(fm.generator, FeatureGenerator::CoordinateEncoded) && fm.channels < 2 {
            return Err(Error::InvalidConfig(
                "coordinate-encoded feature maps need at least 2 channels".into(),
            ));
        }
        Ok(())
    }
}

fn build_feature_map(spec: &FeatureMapSpec, rng: &mut ChaCha8Rng) -> Result<FeatureMap> {
    let mut fm = FeatureMap::zeros(spec.width, spec.height, spec.channels, spec.scale)?;
    for row in 0..spec.height {
        for col in 0..spec.width {
            let (u, v) = fm.cell_center(col, row);
            let cell = fm.cell_mut(col, row);
            match spec.generator {
                FeatureGenerator::Constant { value } => cell.fill(value),
                FeatureGenerator::SeededRandom => {
                    cell.iter_mut().for_each(|c| *c = rng.gen_range(-1.0..1.0))
                }
                FeatureGenerator::CoordinateEncoded => {
                    cell[0] = u as f32;
                    cell[1] = v as f32;
                    cell[2..]
                        .iter_mut()
                        .for_each(|c| *c = rng.gen_range(-1.0..1.0));
                }
            }
        }
    }
    Ok(fm)
}

/// Sample a scene and its exact point-to-pixel table. Deterministic in `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let cs = &spec.camera;
    let camera = CameraModel::look_at(cs.position, cs.look_at, cs.fx, cs.fy, cs.width, cs.height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let e = &spec.extent;
    let points: Vec<LidarPoint> = (0..spec.num_points)
        .map(|_| {
            let p = Vec3::new(
                rng.gen_range(e.x[0]..e.x[1]),
                rng.gen_range(e.y[0]..e.y[1]),
                rng.gen_range(e.z[0]..e.z[1]),
            );
            LidarPoint::new(p, rng.gen_range(0.0..=1.0))
        })
        .collect();
    let correspondences = points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            project_to_image(p.position, &camera).map(|(u, v)| Correspondence {
                point_index: i,
                u,
                v,
            })
        })
        .collect();
    let features = build_feature_map(&spec.feature_map, &mut rng)?;
    Ok(Scene {
        cloud: PointCloud::new(points, 0),
        camera,
        features,
        correspondences: Some(correspondences),
    })
}

/// Aggregated reprojection error for one augmentation setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub family: String,
    /// Max rotation in degrees or flip probability.
    pub setting: f64,
    pub use_inverse_aug: bool,
    pub trials: usize,
    pub samples: usize,
    pub mean_px: f64,
    pub median_px: f64,
    pub p95_px: f64,
    pub lost_fraction: f64,
}

fn summarize(mut errors: Vec<f64>) -> (f64, f64, f64) {
    if errors.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    errors.sort_by(|a, b| a.total_cmp(b));
    let n = errors.len();
    let mean = errors.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 {
        errors[n / 2]
    } else {
        0.5 * (errors[n / 2 - 1] + errors[n / 2])
    };
    // Nearest-rank percentile.
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    (mean, median, errors[rank - 1])
}

fn ground_truth_table(scene: &Scene) -> Result<Vec<Option<(f64, f64)>>> {
    let rows = scene.correspondences.as_ref().ok_or_else(|| {
        Error::InvalidConfig("scene has no ground-truth correspondence table".into())
    })?;
    let mut table = vec![None; scene.cloud.len()];
    for row in rows {
        let slot = table
            .get_mut(row.point_index)
            .ok_or(Error::IndexOutOfRange {
                index: row.point_index,
                len: scene.cloud.len(),
            })?;
        *slot = Some((row.u, row.v));
    }
    Ok(table)
}

/// Reprojection error of every ground-truth point over `trials` augmented
/// copies of the scene (trial `k` uses seed `seed + k`).
pub fn alignment_error(
    scene: &Scene,
    aug_cfg: &AugConfig,
    use_inverse_aug: bool,
    trials: usize,
    seed: u64,
) -> Result<AlignmentRow> {
    aug_cfg.validate()?;
    let truth = ground_truth_table(scene)?;
    let per_trial: Vec<(Vec<f64>, usize)> = (0..trials)
        .into_par_iter()
        .map(|k| -> Result<_> {
            let out = augment_tracked(&scene.cloud, aug_cfg, seed.wrapping_add(k as u64))?;
            let identity = AugRecord::identity();
            let record = if use_inverse_aug {
                &out.record
            } else {
                &identity
            };
            let mut errors = Vec::new();
            let mut lost = 0;
            for (p, &src) in out.cloud.points.iter().zip(&out.source_indices) {
                let Some((gu, gv)) = truth[src] else { continue };
                match project_to_image(inverse_aug(p.position, record), &scene.camera) {
                    Some((u, v)) => errors.push((u - gu).hypot(v - gv)),
                    None => lost += 1,
                }
            }
            Ok((errors, lost))
        })
        .collect::<Result<_>>()?;

    let lost: usize = per_trial.iter().map(|(_, l)| l).sum();
    let errors: Vec<f64> = per_trial.into_iter().flat_map(|(e, _)| e).collect();
    let samples = errors.len();
    let (mean_px, median_px, p95_px) = summarize(errors);
    let considered = samples + lost;
    Ok(AlignmentRow {
        family: "custom".into(),
        setting: 0.0,
        use_inverse_aug,
        trials,
        samples,
        mean_px,
        median_px,
        p95_px,
        lost_fraction: if considered == 0 {
            0.0
        } else {
            lost as f64 / considered as f64
        },
    })
}

/// Rotation-only augmentation at each max rotation (degrees).
pub fn rotation_experiment(
    scene: &Scene,
    max_rotations_deg: &[f64],
    use_inverse_aug: bool,
    trials: usize,
    seed: u64,
) -> Result<Vec<AlignmentRow>> {
    max_rotations_deg
        .iter()
        .map(|&deg| {
            let cfg = AugConfig::rotation_only(deg.to_radians());
            let mut row = alignment_error(scene, &cfg, use_inverse_aug, trials, seed)?;
            row.family = "rotation".into();
            row.setting = deg;
            Ok(row)
        })
        .collect()
}

/// Flip-only augmentation at each flip probability.
pub fn flip_experiment(
    scene: &Scene,
    probabilities: &[f64],
    use_inverse_aug: bool,
    trials: usize,
    seed: u64,
) -> Result<Vec<AlignmentRow>> {
    probabilities
        .iter()
        .map(|&p| {
            let cfg = AugConfig::flip_only(p);
            let mut row = alignment_error(scene, &cfg, use_inverse_aug, trials, seed)?;
            row.family = "flip".into();
            row.setting = p;
            Ok(row)
        })
        .collect()
}

pub fn rows_to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner()
        .map_err(|e| Error::Format(format!("csv flush failed: {e}")))
}

/// Sizes of a gradient-check instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradCheckDims {
    pub lidar_dim: usize,
    pub camera_dim: usize,
    pub num_cameras: usize,
    pub embed_dim: usize,
    pub mlp_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub seed: u64,
    pub lidar_dim: usize,
    pub camera_dim: usize,
    pub num_cameras: usize,
    pub embed_dim: usize,
    pub mlp_dim: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_block: String,
}

/// Random attention instance for gradient checking.
pub fn grad_check_instance(
    dims: GradCheckDims,
    seed: u64,
) -> (AlignParams, Vec<f64>, CameraFeatureSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AlignParams::random_with_dims(
        dims.lidar_dim,
        dims.camera_dim,
        dims.embed_dim,
        dims.mlp_dim,
        &mut rng,
    );
    let lidar = uniform_vec(dims.lidar_dim, 1.0, &mut rng);
    let cams = CameraFeatureSet::from_features(
        (0..dims.num_cameras)
            .map(|_| uniform_vec(dims.camera_dim, 1.0, &mut rng))
            .collect(),
    );
    (params, lidar, cams)
}

/// Run [`align_grad_check`] on `seeds` instances seeded `base_seed..base_seed + seeds`.
pub fn grad_check_study(
    dims: GradCheckDims,
    seeds: usize,
    base_seed: u64,
    eps: f64,
) -> Result<Vec<GradCheckRow>> {
    (0..seeds as u64)
        .into_par_iter()
        .map(|k| {
            let seed = base_seed.wrapping_add(k);
            let (params, lidar, cams) = grad_check_instance(dims, seed);
            let report = align_grad_check(&params, &lidar, &cams, eps)?;
            Ok(GradCheckRow {
                seed,
                lidar_dim: dims.lidar_dim,
                camera_dim: dims.camera_dim,
                num_cameras: dims.num_cameras,
                embed_dim: dims.embed_dim,
                mlp_dim: dims.mlp_dim,
                checked: report.checked,
                max_rel_error: report.max_rel_error,
                worst_block: report.worst_block,
            })
        })
        .collect()
}
