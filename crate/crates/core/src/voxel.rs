//! Dynamic pillar voxelization and the point-wise MLP pillar encoder.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{FeatureMap, PointCloud};
use crate::linalg::{uniform_vec, Matrix};

/// Number of per-point features before any decoration:
/// `x, y, z, intensity, x - pillar_cx, y - pillar_cy`.
pub const POINT_FEATURES: usize = 6;

/// Bird's-eye-view grid over `[x_min, x_max) x [y_min, y_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridBounds", into = "GridBounds")]
pub struct PillarGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub pillar_dx: f64,
    pub pillar_dy: f64,
    pub nx: usize,
    pub ny: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct GridBounds {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    pillar_dx: f64,
    pillar_dy: f64,
}

impl TryFrom<GridBounds> for PillarGrid {
    type Error = Error;
    fn try_from(b: GridBounds) -> Result<Self> {
        PillarGrid::new(b.x_min, b.x_max, b.y_min, b.y_max, b.pillar_dx, b.pillar_dy)
    }
}

impl From<PillarGrid> for GridBounds {
    fn from(g: PillarGrid) -> Self {
        GridBounds {
            x_min: g.x_min,
            x_max: g.x_max,
            y_min: g.y_min,
            y_max: g.y_max,
            pillar_dx: g.pillar_dx,
            pillar_dy: g.pillar_dy,
        }
    }
}

fn cell_count(lo: f64, hi: f64, size: f64, axis: &str) -> Result<usize> {
    if !(lo.is_finite() && hi.is_finite() && size.is_finite() && hi > lo && size > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "{axis}: need finite bounds with max > min and positive pillar size"
        )));
    }
    let range = hi - lo;
    let n = (range / size).round();
    if n < 1.0 || (n * size - range).abs() > 1e-9 * range.max(1.0) {
        return Err(Error::InvalidConfig(format!(
            "{axis}: range {range} is not a whole multiple of pillar size {size}"
        )));
    }
    Ok(n as usize)
}

impl PillarGrid {
    pub fn new(
        x_min: f64,
        x_max: f64,
        y_min: f64,
        y_max: f64,
        pillar_dx: f64,
        pillar_dy: f64,
    ) -> Result<Self> {
        let nx = cell_count(x_min, x_max, pillar_dx, "x")?;
        let ny = cell_count(y_min, y_max, pillar_dy, "y")?;
        Ok(Self {
            x_min,
            x_max,
            y_min,
            y_max,
            pillar_dx,
            pillar_dy,
            nx,
            ny,
        })
    }

    pub fn num_pillars(&self) -> usize {
        self.nx * self.ny
    }

    /// Pillar index of `(x, y)`; `None` outside the half-open footprint.
    pub fn locate(&self, x: f64, y: f64) -> Option<usize> {
        if !(x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max) {
            return None;
        }
        let ix = (((x - self.x_min) / self.pillar_dx).floor() as usize).min(self.nx - 1);
        let iy = (((y - self.y_min) / self.pillar_dy).floor() as usize).min(self.ny - 1);
        Some(iy * self.nx + ix)
    }
}

impl Default for PillarGrid {
    /// 512 x 512 pillars over `[-75, 75)^2` meters.
    fn default() -> Self {
        PillarGrid::new(-75.0, 75.0, -75.0, 75.0, 150.0 / 512.0, 150.0 / 512.0)
            .expect("default grid is valid")
    }
}

/// Center of pillar `index` in world `(x, y)`.
pub fn pillar_center(index: usize, grid: &PillarGrid) -> Result<(f64, f64)> {
    if index >= grid.num_pillars() {
        return Err(Error::IndexOutOfRange {
            index,
            len: grid.num_pillars(),
        });
    }
    let ix = index % grid.nx;
    let iy = index / grid.nx;
    Ok((
        grid.x_min + (ix as f64 + 0.5) * grid.pillar_dx,
        grid.y_min + (iy as f64 + 0.5) * grid.pillar_dy,
    ))
}

/// Point-to-pillar mapping with unbounded member lists.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelAssignment {
    pub grid: PillarGrid,
    pub point_pillar: Vec<Option<usize>>,
    pub members: Vec<Vec<usize>>,
}

impl VoxelAssignment {
    pub fn num_assigned(&self) -> usize {
        self.point_pillar.iter().filter(|p| p.is_some()).count()
    }

    /// Indices of pillars with at least one member, ascending.
    pub fn nonempty_pillars(&self) -> impl Iterator<Item = usize> + '_ {
        self.members
            .iter()
            .enumerate()
            .filter_map(|(i, m)| (!m.is_empty()).then_some(i))
    }
}

pub fn dynamic_voxelize(points: &PointCloud, grid: &PillarGrid) -> VoxelAssignment {
    let mut members = vec![Vec::new(); grid.num_pillars()];
    let point_pillar = points
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let idx = grid.locate(p.position.x, p.position.y);
            if let Some(idx) = idx {
                members[idx].push(i);
            }
            idx
        })
        .collect();
    VoxelAssignment {
        grid: *grid,
        point_pillar,
        members,
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => silu(x),
        }
    }
}

/// Per-point input features fed to an encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureLayout {
    /// `x, y, z, intensity, dx, dy` with `(dx, dy)` the offset to the pillar center.
    Point,
    /// [`FeatureLayout::Point`] followed by sampled camera channels.
    DecoratedPoint { camera_channels: usize },
    /// Camera channels only (late-fusion camera branch).
    Camera { channels: usize },
}

impl FeatureLayout {
    pub fn input_dim(self) -> usize {
        match self {
            FeatureLayout::Point => POINT_FEATURES,
            FeatureLayout::DecoratedPoint { camera_channels } => POINT_FEATURES + camera_channels,
            FeatureLayout::Camera { channels } => channels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Point-wise MLP; the activation follows every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub layout: FeatureLayout,
    pub activation: Activation,
    pub layers: Vec<DenseLayer>,
}

impl EncoderParams {
    pub const DEFAULT_HIDDEN: [usize; 3] = [256, 256, 256];

    pub fn random<R: Rng + ?Sized>(
        layout: FeatureLayout,
        hidden: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::InvalidConfig(
                "encoder needs at least one layer".into(),
            ));
        }
        let mut in_dim = layout.input_dim();
        let mut layers = Vec::with_capacity(hidden.len());
        for &out_dim in hidden {
            let bias_limit = 1.0 / (in_dim.max(1) as f64).sqrt();
            layers.push(DenseLayer {
                weights: Matrix::glorot(out_dim, in_dim, rng),
                bias: uniform_vec(out_dim, bias_limit, rng),
            });
            in_dim = out_dim;
        }
        let params = Self {
            layout,
            activation,
            layers,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn input_dim(&self) -> usize {
        self.layout.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.rows)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::DimensionMismatch("encoder has no layers".into()));
        }
        let mut dim = self.input_dim();
        for (i, layer) in self.layers.iter().enumerate() {
            let w = &layer.weights;
            if w.cols != dim || w.data.len() != w.rows * w.cols || layer.bias.len() != w.rows {
                return Err(Error::DimensionMismatch(format!(
                    "encoder layer {i}: expected {dim} inputs, weights are {}x{} with {} biases",
                    w.rows,
                    w.cols,
                    layer.bias.len()
                )));
            }
            if !w.is_finite() || !layer.bias.iter().all(|b| b.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "encoder layer {i} has non-finite weights"
                )));
            }
            dim = w.rows;
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.layers.iter().fold(input.to_vec(), |h, layer| {
            let mut out = layer.weights.affine(&h, &layer.bias);
            out.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            out
        })
    }
}

/// Dense `ny x nx x channels` grid, row-major with row = `iy`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoImage {
    pub nx: usize,
    pub ny: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl PseudoImage {
    pub fn zeros(nx: usize, ny: usize, channels: usize) -> Self {
        Self {
            nx,
            ny,
            channels,
            data: vec![0.0; nx * ny * channels],
        }
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn cell_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index * self.channels..(index + 1) * self.channels]
    }

    /// Channel-wise concatenation, `self` first.
    pub fn concat(&self, other: &PseudoImage) -> Result<PseudoImage> {
        if self.nx != other.nx || self.ny != other.ny {
            return Err(Error::DimensionMismatch(format!(
                "cannot concatenate {}x{} with {}x{} pseudo-images",
                self.nx, self.ny, other.nx, other.ny
            )));
        }
        let channels = self.channels + other.channels;
        let mut data = Vec::with_capacity(self.nx * self.ny * channels);
        for i in 0..self.nx * self.ny {
            data.extend_from_slice(self.cell(i));
            data.extend_from_slice(other.cell(i));
        }
        Ok(PseudoImage {
            nx: self.nx,
            ny: self.ny,
            channels,
            data,
        })
    }

    /// Single-precision copy in the feature-map layout, one pixel per pillar.
    pub fn to_feature_map(&self) -> Result<FeatureMap> {
        FeatureMap::new(
            self.nx,
            self.ny,
            self.channels,
            self.data.iter().map(|&v| v as f32).collect(),
            1.0,
        )
    }
}

/// Geometric input features for every point (zeros for unassigned points).
pub fn point_features(points: &PointCloud, assignment: &VoxelAssignment) -> Vec<Vec<f64>> {
    points
        .points
        .iter()
        .zip(&assignment.point_pillar)
        .map(|(p, pillar)| match pillar {
            Some(idx) => {
                // idx came from this grid, so the lookup cannot fail.
                let (cx, cy) = pillar_center(*idx, &assignment.grid).unwrap_or((0.0, 0.0));
                let pos = p.position;
                vec![pos.x, pos.y, pos.z, p.intensity, pos.x - cx, pos.y - cy]
            }
            None => vec![0.0; POINT_FEATURES],
        })
        .collect()
}

/// Encode arbitrary per-point features and max-pool them per pillar.
/// Empty pillars stay zero.
pub fn encode_features(
    features: &[Vec<f64>],
    assignment: &VoxelAssignment,
    params: &EncoderParams,
) -> Result<PseudoImage> {
    params.validate()?;
    if features.len() != assignment.point_pillar.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows for {} points",
            features.len(),
            assignment.point_pillar.len()
        )));
    }
    let dim = params.input_dim();
    if let Some(bad) = features.iter().position(|f| f.len() != dim) {
        return Err(Error::DimensionMismatch(format!(
            "point {bad} has {} features, encoder expects {dim}",
            features[bad].len()
        )));
    }

    let grid = &assignment.grid;
    let channels = params.output_dim();
    let nonempty: Vec<usize> = assignment.nonempty_pillars().collect();
    let pooled: Vec<Vec<f64>> = nonempty
        .par_iter()
        .map(|&pillar| {
            let mut acc: Option<Vec<f64>> = None;
            for &i in &assignment.members[pillar] {
                let out = params.forward(&features[i]);
                match acc.as_mut() {
                    None => acc = Some(out),
                    Some(a) => a.iter_mut().zip(&out).for_each(|(m, &v)| *m = m.max(v)),
                }
            }
            acc.unwrap_or_else(|| vec![0.0; channels])
        })
        .collect();

    let mut image = PseudoImage::zeros(grid.nx, grid.ny, channels);
    for (pillar, values) in nonempty.into_iter().zip(pooled) {
        image.cell_mut(pillar).copy_from_slice(&values);
    }
    Ok(image)
}

/// Encode a plain lidar cloud with the [`FeatureLayout::Point`] layout.
pub fn encode_pillars(
    points: &PointCloud,
    assignment: &VoxelAssignment,
    params: &EncoderParams,
) -> Result<PseudoImage> {
    if params.layout != FeatureLayout::Point {
        return Err(Error::DimensionMismatch(format!(
            "encode_pillars needs the point layout, encoder declares {:?}",
            params.layout
        )));
    }
    if points.len() != assignment.point_pillar.len() {
        return Err(Error::DimensionMismatch(
            "assignment does not match point cloud".into(),
        ));
    }
    encode_features(&point_features(points, assignment), assignment, params)
}
