//! On-disk formats.
//!
//! - Calibration: JSON `{fx, fy, cx, cy, width, height, rotation[9], translation[3]}`.
//! - Point cloud: CSV `x,y,z,intensity,frame`, or binary `PCLF` + u32 count +
//!   per point `x, y, z, intensity` as f64 and `frame` as u32, little-endian.
//! - Feature map: binary `FMAP` + u32 width, height, channels + f64 scale +
//!   `height * width * channels` f32 values, little-endian, row-major.
//! - Correspondences: CSV `point_index,u,v`.
//!
//! Binary point files hold one `frame` per point; a cloud read from disk takes
//! the frame of its first point.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, FeatureMap, LidarPoint, Mat3, PointCloud, Vec3};

pub const POINTS_MAGIC: &[u8; 4] = b"PCLF";
pub const FEATURE_MAP_MAGIC: &[u8; 4] = b"FMAP";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: Vec<f64>,
    pub translation: Vec<f64>,
}

impl From<&CameraModel> for CalibrationFile {
    fn from(cam: &CameraModel) -> Self {
        Self {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            width: cam.width,
            height: cam.height,
            rotation: cam.rotation.row_major().to_vec(),
            translation: cam.translation.to_array().to_vec(),
        }
    }
}

impl TryFrom<CalibrationFile> for CameraModel {
    type Error = Error;
    fn try_from(c: CalibrationFile) -> Result<Self> {
        if c.translation.len() != 3 {
            return Err(Error::InvalidCamera(format!(
                "translation needs 3 values, got {}",
                c.translation.len()
            )));
        }
        CameraModel::new(
            c.fx,
            c.fy,
            c.cx,
            c.cy,
            Mat3::from_row_major(&c.rotation)?,
            Vec3::new(c.translation[0], c.translation[1], c.translation[2]),
            c.width,
            c.height,
        )
    }
}

pub fn camera_to_json(cam: &CameraModel) -> Result<String> {
    Ok(serde_json::to_string_pretty(&CalibrationFile::from(cam))?)
}

pub fn camera_from_json(text: &str) -> Result<CameraModel> {
    serde_json::from_str::<CalibrationFile>(text)?.try_into()
}

pub fn read_camera(path: &Path) -> Result<CameraModel> {
    camera_from_json(&fs::read_to_string(path)?)
}

pub fn write_camera(path: &Path, cam: &CameraModel) -> Result<()> {
    fs::write(path, camera_to_json(cam)?)?;
    Ok(())
}

/// Little-endian cursor over a byte buffer.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice has length N"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

pub fn encode_points(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + cloud.len() * 36);
    out.extend_from_slice(POINTS_MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in &cloud.points {
        for v in [p.position.x, p.position.y, p.position.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&cloud.frame_id.to_le_bytes());
    }
    out
}

fn check_frame(frame_id: &mut Option<u32>, frame: u32) -> Result<()> {
    match *frame_id.get_or_insert(frame) {
        f if f == frame => Ok(()),
        f => Err(Error::Format(format!(
            "points carry frame ids {f} and {frame}; a cloud holds one frame"
        ))),
    }
}

/// Decode a `PCLF` buffer. The frame id is stored per point, so an empty
/// cloud decodes with frame id 0.
pub fn decode_points(bytes: &[u8]) -> Result<PointCloud> {
    let mut r = Reader::new(bytes);
    if &r.take::<4>()? != POINTS_MAGIC {
        return Err(Error::Format("missing PCLF magic".into()));
    }
    let count = r.u32()? as usize;
    let mut points = Vec::with_capacity(count.min(bytes.len() / 36));
    let mut frame_id = None;
    for _ in 0..count {
        let (x, y, z, intensity) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        check_frame(&mut frame_id, r.u32()?)?;
        points.push(LidarPoint::new(Vec3::new(x, y, z), intensity));
    }
    r.finish()?;
    let cloud = PointCloud::new(points, frame_id.unwrap_or(0));
    cloud.validate()?;
    Ok(cloud)
}

#[derive(Debug, Serialize, Deserialize)]
struct PointRow {
    x: f64,
    y: f64,
    z: f64,
    intensity: f64,
    frame: u32,
}

pub fn points_to_csv(cloud: &PointCloud) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in &cloud.points {
        w.serialize(PointRow {
            x: p.position.x,
            y: p.position.y,
            z: p.position.z,
            intensity: p.intensity,
            frame: cloud.frame_id,
        })?;
    }
    w.into_inner()
        .map_err(|e| Error::Format(format!("csv flush failed: {e}")))
}

pub fn points_from_csv<R: Read>(reader: R) -> Result<PointCloud> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut points = Vec::new();
    let mut frame_id = None;
    for row in rdr.deserialize() {
        let row: PointRow = row?;
        check_frame(&mut frame_id, row.frame)?;
        points.push(LidarPoint::new(
            Vec3::new(row.x, row.y, row.z),
            row.intensity,
        ));
    }
    let cloud = PointCloud::new(points, frame_id.unwrap_or(0));
    cloud.validate()?;
    Ok(cloud)
}

/// Read a cloud, choosing CSV for `.csv` files and `PCLF` binary otherwise.
pub fn read_points(path: &Path) -> Result<PointCloud> {
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        points_from_csv(fs::File::open(path)?)
    } else {
        decode_points(&fs::read(path)?)
    }
}

pub fn write_points(path: &Path, cloud: &PointCloud) -> Result<()> {
    let bytes = if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        points_to_csv(cloud)?
    } else {
        encode_points(cloud)
    };
    fs::write(path, bytes)?;
    Ok(())
}

pub fn encode_feature_map(fm: &FeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + fm.data.len() * 4);
    out.extend_from_slice(FEATURE_MAP_MAGIC);
    for v in [fm.width, fm.height, fm.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&fm.scale.to_le_bytes());
    for v in &fm.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = Reader::new(bytes);
    if &r.take::<4>()? != FEATURE_MAP_MAGIC {
        return Err(Error::Format("missing FMAP magic".into()));
    }
    let (width, height, channels) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let scale = r.f64()?;
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Format("feature map dimensions overflow".into()))?;
    if len * 4 > bytes.len() {
        return Err(Error::Format("feature map shorter than its header".into()));
    }
    let data = (0..len).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    FeatureMap::new(width, height, channels, data, scale)
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    decode_feature_map(&fs::read(path)?)
}

pub fn write_feature_map(path: &Path, fm: &FeatureMap) -> Result<()> {
    fs::write(path, encode_feature_map(fm))?;
    Ok(())
}

/// Ground-truth pixel of a lidar point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub point_index: usize,
    pub u: f64,
    pub v: f64,
}

pub fn correspondences_to_csv(rows: &[Correspondence]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(["point_index", "u", "v"])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner()
        .map_err(|e| Error::Format(format!("csv flush failed: {e}")))
}

pub fn correspondences_from_csv<R: Read>(reader: R) -> Result<Vec<Correspondence>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_json_keys() {
        let cam = CameraModel::look_at(
            Vec3::new(0.0, 0.0, 1.5),
            Vec3::new(10.0, 1.0, 1.0),
            400.0,
            410.0,
            320,
            240,
        )
        .unwrap();
        let json: serde_json::Value = serde_json::from_str(&camera_to_json(&cam).unwrap()).unwrap();
        for key in [
            "fx",
            "fy",
            "cx",
            "cy",
            "width",
            "height",
            "rotation",
            "translation",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        assert_eq!(json["rotation"].as_array().unwrap().len(), 9);
        let back = camera_from_json(&camera_to_json(&cam).unwrap()).unwrap();
        assert_eq!(back, cam);
    }

    #[test]
    fn calibration_rejects_bad_rotation() {
        let text = r#"{"fx":1,"fy":1,"cx":0,"cy":0,"width":4,"height":4,
            "rotation":[1,0,0,0,1,0,0,0,2],"translation":[0,0,0]}"#;
        assert!(matches!(
            camera_from_json(text),
            Err(Error::InvalidCamera(_))
        ));
        let short = r#"{"fx":1,"fy":1,"cx":0,"cy":0,"width":4,"height":4,
            "rotation":[1,0,0,0,1,0,0,0,1],"translation":[0,0]}"#;
        assert!(camera_from_json(short).is_err());
    }

    #[test]
    fn pclf_layout() {
        let cloud = PointCloud::new(vec![LidarPoint::new(Vec3::new(1.0, -2.0, 3.5), 0.25)], 2);
        let bytes = encode_points(&cloud);
        assert_eq!(&bytes[..4], b"PCLF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 8 + 4 * 8 + 4);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), -2.0);
        assert_eq!(u32::from_le_bytes(bytes[40..44].try_into().unwrap()), 2);
        assert_eq!(decode_points(&bytes).unwrap(), cloud);
        assert!(decode_points(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_points(b"XXXX\0\0\0\0").is_err());
    }

    #[test]
    fn csv_points() {
        let text = "x,y,z,intensity,frame\n1,2,3,0.5,0\n-1,0,0.25,1,0\n";
        let cloud = points_from_csv(text.as_bytes()).unwrap();
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.points[1].position, Vec3::new(-1.0, 0.0, 0.25));
        let again = points_from_csv(points_to_csv(&cloud).unwrap().as_slice()).unwrap();
        assert_eq!(again, cloud);
        assert!(points_from_csv("x,y,z,intensity,frame\n1,2,3,1.5,0\n".as_bytes()).is_err());
    }

    #[test]
    fn fmap_layout() {
        let fm = FeatureMap::new(2, 1, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5], 8.0).unwrap();
        let bytes = encode_feature_map(&fm);
        assert_eq!(&bytes[..4], b"FMAP");
        assert_eq!(bytes.len(), 4 + 12 + 8 + 24);
        assert_eq!(decode_feature_map(&bytes).unwrap(), fm);
        let mut bad = bytes.clone();
        bad.push(0);
        assert!(decode_feature_map(&bad).is_err());
    }

    #[test]
    fn correspondence_csv() {
        let rows = vec![
            Correspondence {
                point_index: 3,
                u: 10.5,
                v: 2.25,
            },
            Correspondence {
                point_index: 7,
                u: 0.0,
                v: 99.0,
            },
        ];
        let bytes = correspondences_to_csv(&rows).unwrap();
        assert!(String::from_utf8_lossy(&bytes).starts_with("point_index,u,v\n"));
        assert_eq!(correspondences_from_csv(bytes.as_slice()).unwrap(), rows);
        let empty = correspondences_to_csv(&[]).unwrap();
        assert!(correspondences_from_csv(empty.as_slice())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn mixed_frames_are_rejected() {
        let p = LidarPoint::new(Vec3::new(1.0, 2.0, 3.0), 0.5);
        let mut bytes = encode_points(&PointCloud::new(vec![p, p], 4));
        let last = bytes.len() - 4;
        bytes[last..].copy_from_slice(&5u32.to_le_bytes());
        assert!(matches!(decode_points(&bytes), Err(Error::Format(_))));

        let csv = b"x,y,z,intensity,frame\n1,2,3,0.5,4\n1,2,3,0.5,5\n";
        assert!(points_from_csv(&csv[..]).is_err());
    }
}
