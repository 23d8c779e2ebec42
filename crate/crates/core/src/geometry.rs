//! Coordinate conventions, pinhole projection and feature-map sampling.
//!
//! World frame: x forward, y left, z up (meters). Camera frame: z forward,
//! x right, y down. Geometry is computed in `f64`; feature data is stored
//! as `f32` and widened when sampled.

use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this to the camera plane are treated as not visible.
pub const DEPTH_EPSILON: f64 = 1e-6;

const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Vec3) -> Vec3 {
        Vec3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self * (1.0 / n))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Rotate `p` about the world z axis by `theta` radians.
pub fn rotate_z(p: Vec3, theta: f64) -> Vec3 {
    let (s, c) = theta.sin_cos();
    Vec3::new(p.x * c - p.y * s, p.x * s + p.y * c, p.z)
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::InvalidCamera(format!(
                "rotation needs 9 values, got {}",
                v.len()
            )));
        }
        Ok(Mat3([
            [v[0], v[1], v[2]],
            [v[3], v[4], v[5]],
            [v[6], v[7], v[8]],
        ]))
    }

    pub fn from_rows(r0: Vec3, r1: Vec3, r2: Vec3) -> Self {
        Mat3([r0.to_array(), r1.to_array(), r2.to_array()])
    }

    pub fn row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    pub fn mul_vec(&self, p: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * p.x + m[0][1] * p.y + m[0][2] * p.z,
            m[1][0] * p.x + m[1][1] * p.y + m[1][2] * p.z,
            m[2][0] * p.x + m[2][1] * p.y + m[2][2] * p.z,
        )
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }

    pub fn mul_mat(&self, other: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        Mat3(out)
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Orthonormal with determinant +1, each entry of `R R^T - I` within 1e-9.
    pub fn is_rotation(&self) -> bool {
        let rrt = self.mul_mat(&self.transpose());
        let orthonormal = (0..3).all(|i| {
            (0..3).all(|j| {
                let expected = if i == j { 1.0 } else { 0.0 };
                (rrt.0[i][j] - expected).abs() <= ROTATION_TOLERANCE
            })
        });
        orthonormal && (self.determinant() - 1.0).abs() <= ROTATION_TOLERANCE
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    pub position: Vec3,
    pub intensity: f64,
}

impl LidarPoint {
    pub fn new(position: Vec3, intensity: f64) -> Self {
        Self {
            position,
            intensity,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.position.is_finite() && (0.0..=1.0).contains(&self.intensity)
    }
}

/// An ordered lidar sweep. `frame_id` 0 is the current frame, `k` is `k`
/// frames in the past.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
    pub frame_id: u32,
}

impl PointCloud {
    pub fn new(points: Vec<LidarPoint>, frame_id: u32) -> Self {
        Self { points, frame_id }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        match self.points.iter().position(|p| !p.is_valid()) {
            Some(i) => Err(Error::Format(format!(
                "point {i} has a non-finite position or intensity outside [0, 1]"
            ))),
            None => Ok(()),
        }
    }
}

/// Pinhole camera with a world-to-camera extrinsic `p_cam = R p_world + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: u32,
    pub height: u32,
}

impl CameraModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `position` looking at `target`, world z up.
    pub fn look_at(
        position: Vec3,
        target: Vec3,
        fx: f64,
        fy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let forward = (target - position).normalized().ok_or_else(|| {
            Error::DegenerateCamera("look-at target coincides with camera position".into())
        })?;
        let up = Vec3::new(0.0, 0.0, 1.0);
        // Looking straight up or down: borrow world x as the reference axis.
        let reference = if forward.cross(up).norm() < 1e-9 {
            Vec3::new(1.0, 0.0, 0.0)
        } else {
            up
        };
        let right = forward
            .cross(reference)
            .normalized()
            .ok_or_else(|| Error::DegenerateCamera("cannot build camera basis".into()))?;
        let down = forward.cross(right);
        let rotation = Mat3::from_rows(right, down, forward);
        let translation = -rotation.mul_vec(position);
        Self::new(
            fx,
            fy,
            width as f64 / 2.0,
            height as f64 / 2.0,
            rotation,
            translation,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::InvalidCamera(
                "focal lengths must be positive".into(),
            ));
        }
        if !(self.cx.is_finite() && self.cy.is_finite() && self.translation.is_finite()) {
            return Err(Error::InvalidCamera("non-finite calibration".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("image size must be positive".into()));
        }
        if !self.rotation.is_rotation() {
            return Err(Error::InvalidCamera(
                "extrinsic rotation is not a proper rotation".into(),
            ));
        }
        Ok(())
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        self.rotation.mul_vec(p) + self.translation
    }

    /// Camera-frame point to pixel, ignoring image bounds.
    pub fn project_camera_point(&self, p_cam: Vec3) -> Option<(f64, f64)> {
        if p_cam.z <= DEPTH_EPSILON {
            return None;
        }
        Some((
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        ))
    }

    pub fn in_frame(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }
}

/// Project a world point to a pixel; `None` when behind the camera or out of frame.
pub fn project_to_image(p_world: Vec3, cam: &CameraModel) -> Option<(f64, f64)> {
    let (u, v) = cam.project_camera_point(cam.world_to_camera(p_world))?;
    cam.in_frame(u, v).then_some((u, v))
}

/// Dense `height x width x channels` grid of camera features. Cell `(i, j)`
/// covers pixels `[i*scale, (i+1)*scale) x [j*scale, (j+1)*scale)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub scale: f64,
}

impl FeatureMap {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
        scale: f64,
    ) -> Result<Self> {
        let fm = Self {
            width,
            height,
            channels,
            data,
            scale,
        };
        fm.validate()?;
        Ok(fm)
    }

    pub fn zeros(width: usize, height: usize, channels: usize, scale: f64) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![0.0; width * height * channels],
            scale,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.channels == 0 {
            return Err(Error::InvalidFeatureMap(
                "dimensions must be positive".into(),
            ));
        }
        if self.data.len() != self.width * self.height * self.channels {
            return Err(Error::InvalidFeatureMap(format!(
                "expected {} values, got {}",
                self.width * self.height * self.channels,
                self.data.len()
            )));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidFeatureMap("scale must be positive".into()));
        }
        Ok(())
    }

    pub fn cell(&self, col: usize, row: usize) -> &[f32] {
        let start = (row * self.width + col) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn cell_mut(&mut self, col: usize, row: usize) -> &mut [f32] {
        let start = (row * self.width + col) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Extent of the map in pixels.
    pub fn pixel_extent(&self) -> (f64, f64) {
        (
            self.width as f64 * self.scale,
            self.height as f64 * self.scale,
        )
    }

    /// Pixel coordinates of the center of cell `(col, row)`.
    pub fn cell_center(&self, col: usize, row: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) * self.scale,
            (row as f64 + 0.5) * self.scale,
        )
    }

    /// Cell containing pixel `(u, v)`, clamped to the grid.
    pub fn cell_of(&self, u: f64, v: f64) -> (usize, usize) {
        let col = ((u / self.scale).floor().max(0.0) as usize).min(self.width - 1);
        let row = ((v / self.scale).floor().max(0.0) as usize).min(self.height - 1);
        (col, row)
    }
}

/// Bilinearly interpolate `fm` at pixel `(u, v)`.
///
/// Cell values live at cell centers, so the continuous cell coordinate is
/// `u / scale - 0.5`, clamped to `[0, width - 1]` (likewise for rows).
pub fn bilinear_sample(fm: &FeatureMap, u: f64, v: f64) -> Result<Vec<f64>> {
    let (w_px, h_px) = fm.pixel_extent();
    if !(u >= 0.0 && u < w_px && v >= 0.0 && v < h_px) {
        return Err(Error::OutOfBounds {
            u,
            v,
            width: w_px,
            height: h_px,
        });
    }
    let gx = (u / fm.scale - 0.5).clamp(0.0, (fm.width - 1) as f64);
    let gy = (v / fm.scale - 0.5).clamp(0.0, (fm.height - 1) as f64);
    let x0 = gx.floor() as usize;
    let y0 = gy.floor() as usize;
    let x1 = (x0 + 1).min(fm.width - 1);
    let y1 = (y0 + 1).min(fm.height - 1);
    let ax = gx - x0 as f64;
    let ay = gy - y0 as f64;

    let weights = [
        ((x0, y0), (1.0 - ax) * (1.0 - ay)),
        ((x1, y0), ax * (1.0 - ay)),
        ((x0, y1), (1.0 - ax) * ay),
        ((x1, y1), ax * ay),
    ];
    let mut out = vec![0.0; fm.channels];
    for ((col, row), w) in weights {
        if w == 0.0 {
            continue;
        }
        for (o, &f) in out.iter_mut().zip(fm.cell(col, row)) {
            *o += w * f as f64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    fn assert_vec_close(a: Vec3, b: Vec3, tol: f64) {
        assert!((a - b).norm() <= tol, "{a:?} vs {b:?}");
    }

    fn simple_camera() -> CameraModel {
        CameraModel::new(
            100.0,
            100.0,
            50.0,
            50.0,
            Mat3::IDENTITY,
            Vec3::ZERO,
            200,
            200,
        )
        .unwrap()
    }

    #[test]
    fn rotate_z_axes() {
        assert_vec_close(
            rotate_z(Vec3::new(1.0, 0.0, 0.0), PI / 2.0),
            Vec3::new(0.0, 1.0, 0.0),
            1e-15,
        );
        assert_eq!(
            rotate_z(Vec3::new(1.0, 2.0, 3.0), 0.0),
            Vec3::new(1.0, 2.0, 3.0)
        );
        assert_vec_close(
            rotate_z(Vec3::new(1.0, 2.0, 3.0), PI),
            Vec3::new(-1.0, -2.0, 3.0),
            1e-15,
        );
    }

    #[test]
    fn pinhole_formula() {
        let cam = simple_camera();
        assert_eq!(
            project_to_image(Vec3::new(1.0, 2.0, 10.0), &cam),
            Some((60.0, 70.0))
        );
        for depth in [0.5, 3.0, 1000.0] {
            assert_eq!(
                project_to_image(Vec3::new(0.0, 0.0, depth), &cam),
                Some((50.0, 50.0))
            );
        }
        assert_eq!(project_to_image(Vec3::new(0.0, 0.0, -1.0), &cam), None);
        assert_eq!(project_to_image(Vec3::new(0.0, 0.0, 0.0), &cam), None);
        // (1000, 0, 1) lands far right of the image.
        assert_eq!(project_to_image(Vec3::new(1000.0, 0.0, 1.0), &cam), None);
    }

    #[test]
    fn camera_validation() {
        let mut bad = Mat3::IDENTITY;
        bad.0[0][0] = -1.0;
        assert!(CameraModel::new(1.0, 1.0, 0.0, 0.0, bad, Vec3::ZERO, 10, 10).is_err());
        assert!(CameraModel::new(0.0, 1.0, 0.0, 0.0, Mat3::IDENTITY, Vec3::ZERO, 10, 10).is_err());
        assert!(CameraModel::new(1.0, 1.0, 0.0, 0.0, Mat3::IDENTITY, Vec3::ZERO, 0, 10).is_err());
    }

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let cam = CameraModel::look_at(
            Vec3::new(0.0, 0.0, 1.5),
            Vec3::new(20.0, 3.0, 1.0),
            500.0,
            500.0,
            640,
            480,
        )
        .unwrap();
        let (u, v) = project_to_image(Vec3::new(20.0, 3.0, 1.0), &cam).unwrap();
        assert!((u - 320.0).abs() < 1e-9 && (v - 240.0).abs() < 1e-9);
        // A point to the left in the world lands left in the image.
        let (u_left, _) = project_to_image(Vec3::new(20.0, 5.0, 1.0), &cam).unwrap();
        assert!(u_left < u);
        // A point above lands higher (smaller v).
        let (_, v_up) = project_to_image(Vec3::new(20.0, 3.0, 2.0), &cam).unwrap();
        assert!(v_up < v);
        assert!(CameraModel::look_at(Vec3::ZERO, Vec3::ZERO, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraModel::look_at(Vec3::ZERO, Vec3::new(0.0, 0.0, 5.0), 1.0, 1.0, 4, 4).is_ok());
    }

    #[test]
    fn bilinear_cell_center_is_fixed_point() {
        let data: Vec<f32> = (0..3 * 2 * 2).map(|v| v as f32).collect();
        let fm = FeatureMap::new(3, 2, 2, data, 4.0).unwrap();
        for row in 0..2 {
            for col in 0..3 {
                let (u, v) = fm.cell_center(col, row);
                let s = bilinear_sample(&fm, u, v).unwrap();
                let expected: Vec<f64> = fm.cell(col, row).iter().map(|&x| x as f64).collect();
                assert_eq!(s, expected);
            }
        }
    }

    #[test]
    fn bilinear_constant_map() {
        let fm = FeatureMap::new(4, 3, 1, vec![2.5; 12], 2.0).unwrap();
        for (u, v) in [(0.0, 0.0), (7.99, 5.99), (3.3, 1.7)] {
            let s = bilinear_sample(&fm, u, v).unwrap();
            assert!((s[0] - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_midpoint_of_two_by_two() {
        // Cell centers at 0.5 and 1.5 px, so (1, 1) is equidistant from all four.
        let fm =
            FeatureMap::new(2, 2, 2, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0], 1.0).unwrap();
        assert_eq!(bilinear_sample(&fm, 1.0, 1.0).unwrap(), vec![1.5, 1.5]);
    }

    #[test]
    fn bilinear_rejects_out_of_bounds() {
        let fm = FeatureMap::zeros(2, 2, 1, 1.0).unwrap();
        assert!(bilinear_sample(&fm, -0.1, 0.5).is_err());
        assert!(bilinear_sample(&fm, 2.0, 0.5).is_err());
        assert!(bilinear_sample(&fm, 0.5, f64::NAN).is_err());
    }

    #[test]
    fn feature_map_validation() {
        assert!(FeatureMap::new(2, 2, 1, vec![0.0; 3], 1.0).is_err());
        assert!(FeatureMap::new(2, 2, 1, vec![0.0; 4], 0.0).is_err());
    }
}
