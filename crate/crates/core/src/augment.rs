//! Lidar augmentation with recorded parameters, and its inverse.
//!
//! The pipeline applies, in order: rotation about z, world scaling, global
//! translation noise, flip along y, frustum dropout, random point dropout.
//! Only the first four are geometric; their sampled parameters go into an
//! [`AugRecord`]. [`inverse_aug`] undoes the record in reverse order so a key
//! point found in the augmented frame can be projected with the original
//! lidar/camera calibration.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotate_z, LidarPoint, PointCloud, Vec3};

/// An invertible whole-scene transform about the world origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "params")]
pub enum GeometricOp {
    RotateZ { theta: f64 },
    WorldScale { s: f64 },
    Translate { t: Vec3 },
    FlipY { applied: bool },
}

impl GeometricOp {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            GeometricOp::RotateZ { theta } => theta.is_finite(),
            GeometricOp::WorldScale { s } => s > 0.0 && s.is_finite(),
            GeometricOp::Translate { t } => t.is_finite(),
            GeometricOp::FlipY { .. } => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "invalid geometric op {self:?}"
            )))
        }
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        match *self {
            GeometricOp::RotateZ { theta } => rotate_z(p, theta),
            GeometricOp::WorldScale { s } => p * s,
            GeometricOp::Translate { t } => p + t,
            GeometricOp::FlipY { applied: true } => Vec3::new(p.x, -p.y, p.z),
            GeometricOp::FlipY { applied: false } => p,
        }
    }
}

/// Augmentations that remove points and therefore cannot be inverted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "params")]
pub enum NonGeometricOp {
    FrustumDropout(Frustum),
    RandomDropPoints { keep_p: f64 },
}

/// Azimuth/inclination window (radians) and the drop probability inside it.
///
/// Azimuth is `atan2(y, x)`; the interval may wrap past `±π`, and a width of
/// `2π` or more covers every direction. Inclination is the elevation angle
/// `atan2(z, hypot(x, y))` and the interval is closed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Frustum {
    pub theta_range: [f64; 2],
    pub phi_range: [f64; 2],
    pub drop_p: f64,
}

impl Frustum {
    pub fn full_sphere(drop_p: f64) -> Self {
        Self {
            theta_range: [-PI, PI],
            phi_range: [-PI / 2.0, PI / 2.0],
            drop_p,
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let [az_lo, az_hi] = self.theta_range;
        let width = az_hi - az_lo;
        let azimuth_ok = if width >= 2.0 * PI {
            true
        } else if width < 0.0 {
            false
        } else {
            let azimuth = p.y.atan2(p.x);
            (azimuth - az_lo).rem_euclid(2.0 * PI) <= width
        };
        let inclination = p.z.atan2(p.x.hypot(p.y));
        azimuth_ok && inclination >= self.phi_range[0] && inclination <= self.phi_range[1]
    }
}

/// Ordered geometric ops as they were applied.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AugRecord {
    pub ops: Vec<GeometricOp>,
}

impl AugRecord {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(ops: Vec<GeometricOp>) -> Self {
        Self { ops }
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Forward-apply the recorded ops to a point.
    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        self.ops.iter().fold(p, |acc, op| op.apply_point(acc))
    }
}

/// Per-op switches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnabledOps {
    pub rotation: bool,
    pub scaling: bool,
    pub translation: bool,
    pub flip: bool,
    pub frustum_dropout: bool,
    pub drop_points: bool,
}

impl Default for EnabledOps {
    fn default() -> Self {
        Self {
            rotation: true,
            scaling: true,
            translation: true,
            flip: true,
            frustum_dropout: true,
            drop_points: true,
        }
    }
}

impl EnabledOps {
    pub const NONE: EnabledOps = EnabledOps {
        rotation: false,
        scaling: false,
        translation: false,
        flip: false,
        frustum_dropout: false,
        drop_points: false,
    };
}

/// How the pipeline samples a frustum: uniform azimuth center over the full
/// circle, uniform inclination center within `inclination_center_range`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrustumConfig {
    pub azimuth_width: f64,
    pub inclination_width: f64,
    pub inclination_center_range: [f64; 2],
    pub drop_p: f64,
}

impl Default for FrustumConfig {
    fn default() -> Self {
        Self {
            azimuth_width: PI / 6.0,
            inclination_width: PI / 6.0,
            inclination_center_range: [-0.3, 0.1],
            drop_p: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugConfig {
    /// Radians; rotation is uniform on `[-max_rotation, max_rotation]`.
    pub max_rotation: f64,
    pub scale_range: [f64; 2],
    /// Per-axis standard deviation of the global translation, meters.
    pub translate_sigma: Vec3,
    pub flip_probability: f64,
    pub frustum: FrustumConfig,
    pub drop_keep_p: f64,
    pub enabled: EnabledOps,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            max_rotation: PI / 4.0,
            scale_range: [0.95, 1.05],
            translate_sigma: Vec3::new(0.2, 0.2, 0.2),
            flip_probability: 0.5,
            frustum: FrustumConfig::default(),
            drop_keep_p: 0.95,
            enabled: EnabledOps::default(),
        }
    }
}

impl AugConfig {
    /// Default parameters with every op switched off.
    pub fn disabled() -> Self {
        Self {
            enabled: EnabledOps::NONE,
            ..Self::default()
        }
    }

    pub fn rotation_only(max_rotation: f64) -> Self {
        let mut cfg = Self::disabled();
        cfg.max_rotation = max_rotation;
        cfg.enabled.rotation = true;
        cfg
    }

    pub fn flip_only(probability: f64) -> Self {
        let mut cfg = Self::disabled();
        cfg.flip_probability = probability;
        cfg.enabled.flip = true;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let [lo, hi] = self.scale_range;
        let fr = &self.frustum;
        let checks = [
            (
                self.max_rotation.is_finite() && self.max_rotation >= 0.0,
                "max_rotation must be finite and nonnegative",
            ),
            (
                lo > 0.0 && lo <= hi && hi.is_finite(),
                "scale_range needs 0 < lo <= hi",
            ),
            (
                self.translate_sigma.is_finite()
                    && self.translate_sigma.x >= 0.0
                    && self.translate_sigma.y >= 0.0
                    && self.translate_sigma.z >= 0.0,
                "translate_sigma must be finite and nonnegative",
            ),
            (
                prob(self.flip_probability),
                "flip_probability outside [0, 1]",
            ),
            (prob(fr.drop_p), "frustum drop_p outside [0, 1]"),
            (
                fr.azimuth_width >= 0.0
                    && fr.inclination_width >= 0.0
                    && fr.inclination_center_range[0] <= fr.inclination_center_range[1],
                "frustum widths must be nonnegative with an ordered center range",
            ),
            (prob(self.drop_keep_p), "drop_keep_p outside [0, 1]"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::InvalidConfig((*msg).into())),
            None => Ok(()),
        }
    }
}

/// Apply one geometric op to every point; intensity and order are kept.
pub fn apply_geometric(points: &PointCloud, op: GeometricOp) -> PointCloud {
    PointCloud {
        points: points
            .points
            .iter()
            .map(|p| LidarPoint::new(op.apply_point(p.position), p.intensity))
            .collect(),
        frame_id: points.frame_id,
    }
}

/// Exact inverse of `op` applied to a single point.
pub fn invert_geometric(p: Vec3, op: GeometricOp) -> Vec3 {
    match op {
        GeometricOp::RotateZ { theta } => rotate_z(p, -theta),
        GeometricOp::WorldScale { s } => p * (1.0 / s),
        GeometricOp::Translate { t } => p - t,
        GeometricOp::FlipY { .. } => op.apply_point(p),
    }
}

/// Map a key point from the augmented frame back to the original frame.
pub fn inverse_aug(p: Vec3, record: &AugRecord) -> Vec3 {
    record
        .ops
        .iter()
        .rev()
        .fold(p, |acc, &op| invert_geometric(acc, op))
}

/// Re-apply a record to a cloud, reproducing the pipeline's geometric part.
pub fn apply_record(points: &PointCloud, record: &AugRecord) -> PointCloud {
    record
        .ops
        .iter()
        .fold(points.clone(), |cloud, &op| apply_geometric(&cloud, op))
}

fn frustum_keep_mask<R: Rng + ?Sized>(
    points: &PointCloud,
    frustum: &Frustum,
    rng: &mut R,
) -> Vec<bool> {
    points
        .points
        .iter()
        .map(|p| !(frustum.contains(p.position) && rng.gen::<f64>() < frustum.drop_p))
        .collect()
}

fn drop_keep_mask<R: Rng + ?Sized>(len: usize, keep_p: f64, rng: &mut R) -> Vec<bool> {
    (0..len).map(|_| rng.gen::<f64>() < keep_p).collect()
}

fn filter_cloud(points: &PointCloud, keep: &[bool]) -> PointCloud {
    PointCloud {
        points: points
            .points
            .iter()
            .zip(keep)
            .filter_map(|(p, &k)| k.then_some(*p))
            .collect(),
        frame_id: points.frame_id,
    }
}

/// Drop points inside `frustum` with probability `frustum.drop_p`.
pub fn frustum_dropout<R: Rng + ?Sized>(
    points: &PointCloud,
    frustum: &Frustum,
    rng: &mut R,
) -> PointCloud {
    let keep = frustum_keep_mask(points, frustum, rng);
    filter_cloud(points, &keep)
}

/// Keep each point independently with probability `keep_p`.
pub fn random_drop_points<R: Rng + ?Sized>(
    points: &PointCloud,
    keep_p: f64,
    rng: &mut R,
) -> PointCloud {
    let keep = drop_keep_mask(points.len(), keep_p, rng);
    filter_cloud(points, &keep)
}

/// Concatenate multi-frame sweeps, randomly omitting past frames when training.
pub fn drop_frames<R: Rng + ?Sized>(
    frames: &[PointCloud],
    drop_p: f64,
    rng: &mut R,
    training: bool,
) -> Result<PointCloud> {
    if frames.is_empty() {
        return Err(Error::EmptyFrames);
    }
    if !frames.iter().any(|f| f.frame_id == 0) {
        return Err(Error::InvalidConfig(
            "frame 0 missing from frame list".into(),
        ));
    }
    if !(0.0..=1.0).contains(&drop_p) {
        return Err(Error::InvalidConfig("drop_p outside [0, 1]".into()));
    }
    let mut points = Vec::new();
    for frame in frames {
        let dropped = training && frame.frame_id > 0 && rng.gen::<f64>() < drop_p;
        if !dropped {
            points.extend_from_slice(&frame.points);
        }
    }
    Ok(PointCloud::new(points, 0))
}

/// Result of the augmentation pipeline. `source_indices[i]` is the index in
/// the input cloud of output point `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub cloud: PointCloud,
    pub record: AugRecord,
    pub source_indices: Vec<usize>,
}

/// Run the full pipeline; see [`augment_tracked`] for index bookkeeping.
pub fn apply_pipeline(
    points: &PointCloud,
    cfg: &AugConfig,
    seed: u64,
) -> Result<(PointCloud, AugRecord)> {
    let out = augment_tracked(points, cfg, seed)?;
    Ok((out.cloud, out.record))
}

/// Sample, apply and record every enabled op in the fixed order. The same
/// `(points, cfg, seed)` always yields the same output.
pub fn augment_tracked(points: &PointCloud, cfg: &AugConfig, seed: u64) -> Result<Augmented> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = Vec::new();

    if cfg.enabled.rotation {
        let theta = if cfg.max_rotation > 0.0 {
            rng.gen_range(-cfg.max_rotation..=cfg.max_rotation)
        } else {
            0.0
        };
        ops.push(GeometricOp::RotateZ { theta });
    }
    if cfg.enabled.scaling {
        let [lo, hi] = cfg.scale_range;
        let s = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        ops.push(GeometricOp::WorldScale { s });
    }
    if cfg.enabled.translation {
        let sigma = cfg.translate_sigma;
        let mut axis = |sd: f64| -> f64 {
            if sd > 0.0 {
                // sd is finite and positive, checked in validate().
                Normal::new(0.0, sd).unwrap().sample(&mut rng)
            } else {
                0.0
            }
        };
        let t = Vec3::new(axis(sigma.x), axis(sigma.y), axis(sigma.z));
        ops.push(GeometricOp::Translate { t });
    }
    if cfg.enabled.flip {
        let applied = rng.gen::<f64>() < cfg.flip_probability;
        ops.push(GeometricOp::FlipY { applied });
    }

    let record = AugRecord::new(ops);
    let mut cloud = apply_record(points, &record);
    let mut source_indices: Vec<usize> = (0..points.len()).collect();

    if cfg.enabled.frustum_dropout {
        let fc = &cfg.frustum;
        let az_center = rng.gen_range(-PI..PI);
        let [inc_lo, inc_hi] = fc.inclination_center_range;
        let inc_center = if inc_hi > inc_lo {
            rng.gen_range(inc_lo..=inc_hi)
        } else {
            inc_lo
        };
        let frustum = Frustum {
            theta_range: [
                az_center - fc.azimuth_width / 2.0,
                az_center + fc.azimuth_width / 2.0,
            ],
            phi_range: [
                inc_center - fc.inclination_width / 2.0,
                inc_center + fc.inclination_width / 2.0,
            ],
            drop_p: fc.drop_p,
        };
        let keep = frustum_keep_mask(&cloud, &frustum, &mut rng);
        cloud = filter_cloud(&cloud, &keep);
        source_indices = retain(&source_indices, &keep);
    }
    if cfg.enabled.drop_points {
        let keep = drop_keep_mask(cloud.len(), cfg.drop_keep_p, &mut rng);
        cloud = filter_cloud(&cloud, &keep);
        source_indices = retain(&source_indices, &keep);
    }

    Ok(Augmented {
        cloud,
        record,
        source_indices,
    })
}

fn retain(indices: &[usize], keep: &[bool]) -> Vec<usize> {
    indices
        .iter()
        .zip(keep)
        .filter_map(|(&i, &k)| k.then_some(i))
        .collect()
}
