//! Point cloud, trajectory and surfel map files.
//!
//! Supported inputs:
//!
//! - `kitti-bin`: packed little-endian `f32` records `(x, y, z, intensity)`.
//! - `ply`: `ascii` or `binary_little_endian`, vertex element with at least
//!   `x`, `y`, `z` properties of type float or double.
//! - `xyz`: whitespace-separated text, first three columns are `x y z`.
//! - `tum` trajectories: `timestamp tx ty tz qx qy qz qw` per row.
//! - `kitti` trajectories: 12 row-major entries of the 3x4 matrix per row,
//!   timestamps are the row index.
//!
//! Clouds and surfel maps are written with 9 significant digits.
//! Trajectories are written with the shortest decimal that parses back to
//! the same `f64`, so timestamps and poses survive a round trip exactly.

use std::fmt::{self, Write as _};
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::SVD;
use thiserror::Error;

use crate::geometry::{Mat3, Pose, Vec3};
use crate::surfel::Surfel;

/// Tolerance on quaternion norm (and rotation-block orthonormality) that
/// readers repair silently. Anything further off is rejected.
pub const POSE_REPAIR_TOLERANCE: f64 = 1e-3;

const KITTI_RECORD: usize = 16;

#[derive(Debug, Error)]
pub enum CloudIoError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: malformed data at byte offset {offset}: {message}", path.display())]
    Format { path: PathBuf, offset: usize, message: String },
    #[error("{}: unsupported format: {message}", path.display())]
    Unsupported { path: PathBuf, message: String },
    #[error("{}: no finite points", path.display())]
    Empty { path: PathBuf },
    #[error("{}: line {line}: malformed pose: {message}", path.display())]
    MalformedPose { path: PathBuf, line: usize, message: String },
    #[error("{}: line {line}: timestamps must be strictly increasing", path.display())]
    Ordering { path: PathBuf, line: usize },
    #[error("trajectory timestamps must be strictly increasing (index {0})")]
    UnorderedTimestamps(usize),
}

type IoResult<T> = Result<T, CloudIoError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CloudIoError + '_ {
    move |source| CloudIoError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    KittiBin,
    Ply,
    XyzText,
}

impl CloudFormat {
    pub fn extension(self) -> &'static str {
        match self {
            CloudFormat::KittiBin => "bin",
            CloudFormat::Ply => "ply",
            CloudFormat::XyzText => "xyz",
        }
    }
}

impl FromStr for CloudFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "kitti-bin" | "kitti" | "bin" => Ok(CloudFormat::KittiBin),
            "ply" => Ok(CloudFormat::Ply),
            "xyz" | "xyz-text" => Ok(CloudFormat::XyzText),
            other => Err(format!("unknown cloud format '{other}'")),
        }
    }
}

impl fmt::Display for CloudFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CloudFormat::KittiBin => "kitti-bin",
            CloudFormat::Ply => "ply",
            CloudFormat::XyzText => "xyz",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryFormat {
    Tum,
    KittiPoses,
}

impl FromStr for TrajectoryFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tum" => Ok(TrajectoryFormat::Tum),
            "kitti" | "kitti-poses" => Ok(TrajectoryFormat::KittiPoses),
            other => Err(format!("unknown trajectory format '{other}'")),
        }
    }
}

impl fmt::Display for TrajectoryFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrajectoryFormat::Tum => "tum",
            TrajectoryFormat::KittiPoses => "kitti",
        })
    }
}

/// One LiDAR scan in its sensor frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Cloud {
    pub points: Vec<Vec3>,
    pub timestamp: f64,
    pub scan_id: usize,
    /// Non-finite points removed at ingestion.
    pub dropped: usize,
}

impl Cloud {
    /// Builds a cloud, dropping non-finite points. The timestamp defaults to
    /// the scan index.
    pub fn new(points: Vec<Vec3>, scan_id: usize) -> Self {
        let total = points.len();
        let points: Vec<Vec3> = points.into_iter().filter(|p| p.iter().all(|x| x.is_finite())).collect();
        let dropped = total - points.len();
        if dropped > 0 {
            log::warn!("scan {scan_id}: dropped {dropped} non-finite points");
        }
        Cloud { points, timestamp: scan_id as f64, scan_id, dropped }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Timestamped poses, sensor-to-world.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    timestamps: Vec<f64>,
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(timestamps: Vec<f64>, poses: Vec<Pose>) -> Result<Self, CloudIoError> {
        assert_eq!(timestamps.len(), poses.len(), "timestamp/pose count mismatch");
        if let Some(i) = timestamps.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(CloudIoError::UnorderedTimestamps(i + 1));
        }
        Ok(Trajectory { timestamps, poses })
    }

    /// Poses stamped with their index.
    pub fn from_poses(poses: Vec<Pose>) -> Self {
        let timestamps = (0..poses.len()).map(|i| i as f64).collect();
        Trajectory { timestamps, poses }
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Same timestamps, different poses.
    pub fn with_poses(&self, poses: Vec<Pose>) -> Trajectory {
        assert_eq!(poses.len(), self.poses.len());
        Trajectory { timestamps: self.timestamps.clone(), poses }
    }
}

/// Formats like C's `%.{digits}g`.
pub fn format_sig(v: f64, digits: usize) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{:.*e}", digits - 1, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let m = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_fraction(&format!("{:.*}", decimals, v)).to_string()
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn g9(v: f64) -> String {
    format_sig(v, 9)
}

// ---------------------------------------------------------------- clouds

/// Reads one scan. The timestamp is set to `scan_id`.
pub fn read_cloud(path: &Path, format: CloudFormat, scan_id: usize) -> IoResult<Cloud> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.is_empty() {
        return Err(CloudIoError::Empty { path: path.to_path_buf() });
    }
    let points = match format {
        CloudFormat::KittiBin => decode_kitti_bin(path, &bytes)?,
        CloudFormat::XyzText => decode_xyz(path, &bytes)?,
        CloudFormat::Ply => {
            let table = read_ply_bytes(path, &bytes)?;
            let cols = table.columns(path, &["x", "y", "z"])?;
            table.rows.iter().map(|r| Vec3::new(r[cols[0]], r[cols[1]], r[cols[2]])).collect()
        }
    };
    let cloud = Cloud::new(points, scan_id);
    if cloud.is_empty() {
        return Err(CloudIoError::Empty { path: path.to_path_buf() });
    }
    Ok(cloud)
}

fn decode_kitti_bin(path: &Path, bytes: &[u8]) -> IoResult<Vec<Vec3>> {
    let rem = bytes.len() % KITTI_RECORD;
    if rem != 0 {
        return Err(CloudIoError::Format {
            path: path.to_path_buf(),
            offset: bytes.len() - rem,
            message: format!("truncated record: {rem} trailing bytes, records are {KITTI_RECORD}"),
        });
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    Ok(bytes.chunks_exact(KITTI_RECORD).map(|r| Vec3::new(f(&r[0..4]), f(&r[4..8]), f(&r[8..12]))).collect())
}

fn decode_xyz(path: &Path, bytes: &[u8]) -> IoResult<Vec<Vec3>> {
    let text = std::str::from_utf8(bytes).map_err(|e| CloudIoError::Format {
        path: path.to_path_buf(),
        offset: e.valid_up_to(),
        message: "invalid utf-8".into(),
    })?;
    let mut points = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let body = line.trim();
        if !body.is_empty() && !body.starts_with('#') {
            let vals: Vec<f64> =
                body.split_whitespace().take(3).map(str::parse).collect::<Result<_, _>>().map_err(|e| {
                    CloudIoError::Format { path: path.to_path_buf(), offset, message: format!("bad number: {e}") }
                })?;
            if vals.len() < 3 {
                return Err(CloudIoError::Format {
                    path: path.to_path_buf(),
                    offset,
                    message: "expected at least 3 columns".into(),
                });
            }
            points.push(Vec3::new(vals[0], vals[1], vals[2]));
        }
        offset += line.len();
    }
    Ok(points)
}

pub fn write_cloud(points: &[Vec3], path: &Path, format: CloudFormat) -> IoResult<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> io::Result<()> {
        match format {
            CloudFormat::KittiBin => {
                for p in points {
                    for v in [p.x as f32, p.y as f32, p.z as f32, 0.0f32] {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
            CloudFormat::XyzText => {
                for p in points {
                    writeln!(w, "{} {} {}", g9(p.x), g9(p.y), g9(p.z))?;
                }
            }
            CloudFormat::Ply => {
                write!(
                    w,
                    "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\n\
                     property double y\nproperty double z\nend_header\n",
                    points.len()
                )?;
                for p in points {
                    writeln!(w, "{} {} {}", g9(p.x), g9(p.y), g9(p.z))?;
                }
            }
        }
        w.flush()
    })();
    res.map_err(io_err(path))
}

// ---------------------------------------------------------------- ply

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => ScalarType::I8,
            "uchar" | "uint8" => ScalarType::U8,
            "short" | "int16" => ScalarType::I16,
            "ushort" | "uint16" => ScalarType::U16,
            "int" | "int32" => ScalarType::I32,
            "uint" | "uint32" => ScalarType::U32,
            "float" | "float32" => ScalarType::F32,
            "double" | "float64" => ScalarType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            ScalarType::I8 | ScalarType::U8 => 1,
            ScalarType::I16 | ScalarType::U16 => 2,
            ScalarType::I32 | ScalarType::U32 | ScalarType::F32 => 4,
            ScalarType::F64 => 8,
        }
    }

    fn decode_le(self, b: &[u8]) -> f64 {
        match self {
            ScalarType::I8 => b[0] as i8 as f64,
            ScalarType::U8 => b[0] as f64,
            ScalarType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            ScalarType::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            ScalarType::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }

    fn is_float(self) -> bool {
        matches!(self, ScalarType::F32 | ScalarType::F64)
    }
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<(String, ScalarType)>,
}

/// Vertex element of a PLY file as a dense table.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyTable {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl PlyTable {
    fn columns(&self, path: &Path, wanted: &[&str]) -> IoResult<Vec<usize>> {
        wanted
            .iter()
            .map(|w| {
                self.names.iter().position(|n| n == w).ok_or_else(|| CloudIoError::Unsupported {
                    path: path.to_path_buf(),
                    message: format!("missing vertex property '{w}'"),
                })
            })
            .collect()
    }
}

pub fn read_ply(path: &Path) -> IoResult<PlyTable> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    read_ply_bytes(path, &bytes)
}

fn read_ply_bytes(path: &Path, bytes: &[u8]) -> IoResult<PlyTable> {
    let fmt_err = |offset: usize, message: String| CloudIoError::Format { path: path.to_path_buf(), offset, message };
    let unsupported = |message: String| CloudIoError::Unsupported { path: path.to_path_buf(), message };

    const END: &[u8] = b"end_header";
    let end = bytes.windows(END.len()).position(|w| w == END).ok_or_else(|| fmt_err(0, "missing end_header".into()))?;
    let body_start = bytes[end..].iter().position(|&b| b == b'\n').map(|p| end + p + 1).unwrap_or(bytes.len());
    let header =
        std::str::from_utf8(&bytes[..end]).map_err(|e| fmt_err(e.valid_up_to(), "header is not utf-8".into()))?;

    let mut lines = header.lines().map(str::trim);
    if lines.next() != Some("ply") {
        return Err(fmt_err(0, "missing 'ply' magic".into()));
    }
    let mut binary = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    for line in lines {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                binary = Some(match tok.get(1).copied() {
                    Some("ascii") => false,
                    Some("binary_little_endian") => true,
                    other => return Err(unsupported(format!("ply encoding {other:?}"))),
                });
            }
            Some("element") => {
                let (name, count) = match (tok.get(1), tok.get(2).and_then(|c| c.parse().ok())) {
                    (Some(n), Some(c)) => (n.to_string(), c),
                    _ => return Err(fmt_err(0, format!("bad element line '{line}'"))),
                };
                elements.push(PlyElement { name, count, properties: Vec::new() });
            }
            Some("property") => {
                let el = elements.last_mut().ok_or_else(|| fmt_err(0, "property before element".into()))?;
                if tok.get(1) == Some(&"list") {
                    return Err(unsupported(format!("list property in element '{}' is not supported", el.name)));
                }
                let (ty, name) = match (tok.get(1), tok.get(2)) {
                    (Some(t), Some(n)) => (*t, n.to_string()),
                    _ => return Err(fmt_err(0, format!("bad property line '{line}'"))),
                };
                let ty = ScalarType::parse(ty).ok_or_else(|| unsupported(format!("unknown property type '{ty}'")))?;
                el.properties.push((name, ty));
            }
            Some(other) => return Err(unsupported(format!("unknown header keyword '{other}'"))),
        }
    }
    let binary = binary.ok_or_else(|| fmt_err(0, "missing format line".into()))?;
    let vidx =
        elements.iter().position(|e| e.name == "vertex").ok_or_else(|| unsupported("no vertex element".into()))?;
    let vertex = &elements[vidx];
    for axis in ["x", "y", "z"] {
        match vertex.properties.iter().find(|(n, _)| n == axis) {
            Some((_, ty)) if ty.is_float() => {}
            Some((_, ty)) => return Err(unsupported(format!("property '{axis}' has non-float type {ty:?}"))),
            None => return Err(unsupported(format!("missing vertex property '{axis}'"))),
        }
    }
    let names: Vec<String> = vertex.properties.iter().map(|(n, _)| n.clone()).collect();
    let mut rows = Vec::with_capacity(vertex.count);

    if binary {
        let mut offset = body_start;
        for el in &elements[..vidx] {
            offset += el.count * el.properties.iter().map(|(_, t)| t.size()).sum::<usize>();
        }
        let record: usize = vertex.properties.iter().map(|(_, t)| t.size()).sum();
        for _ in 0..vertex.count {
            if offset + record > bytes.len() {
                return Err(fmt_err(offset, "truncated binary vertex record".into()));
            }
            let mut row = Vec::with_capacity(names.len());
            let mut o = offset;
            for (_, ty) in &vertex.properties {
                row.push(ty.decode_le(&bytes[o..o + ty.size()]));
                o += ty.size();
            }
            rows.push(row);
            offset += record;
        }
    } else {
        let body = std::str::from_utf8(&bytes[body_start..])
            .map_err(|e| fmt_err(body_start + e.valid_up_to(), "body is not utf-8".into()))?;
        let mut offset = body_start;
        let mut body_lines = body.split_inclusive('\n').filter_map(|l| {
            let start = offset;
            offset += l.len();
            let t = l.trim();
            (!t.is_empty()).then_some((start, t))
        });
        for el in &elements[..vidx] {
            for _ in 0..el.count {
                body_lines.next();
            }
        }
        for _ in 0..vertex.count {
            let (at, line) =
                body_lines.next().ok_or_else(|| fmt_err(bytes.len(), "fewer vertex rows than declared".into()))?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| fmt_err(at, format!("bad number: {e}")))?;
            if row.len() != names.len() {
                return Err(fmt_err(at, format!("expected {} values, found {}", names.len(), row.len())));
            }
            rows.push(row);
        }
    }
    Ok(PlyTable { names, rows })
}

// ---------------------------------------------------------------- trajectories

pub fn read_trajectory(path: &Path, format: TrajectoryFormat) -> IoResult<Trajectory> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let malformed =
        |line: usize, message: String| CloudIoError::MalformedPose { path: path.to_path_buf(), line, message };
    let mut stamps = Vec::new();
    let mut poses = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = body
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| malformed(line_no, format!("bad number: {e}")))?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(malformed(line_no, "non-finite value".into()));
        }
        let (stamp, pose) = match format {
            TrajectoryFormat::Tum => {
                if vals.len() != 8 {
                    return Err(malformed(line_no, format!("expected 8 values, found {}", vals.len())));
                }
                let qn = (vals[4..8].iter().map(|q| q * q).sum::<f64>()).sqrt();
                if (qn - 1.0).abs() > POSE_REPAIR_TOLERANCE {
                    return Err(malformed(line_no, format!("quaternion norm {qn}")));
                }
                let t = Vec3::new(vals[1], vals[2], vals[3]);
                (vals[0], Pose::from_quaternion(t, vals[4], vals[5], vals[6], vals[7]))
            }
            TrajectoryFormat::KittiPoses => {
                if vals.len() != 12 {
                    return Err(malformed(line_no, format!("expected 12 values, found {}", vals.len())));
                }
                let r = Mat3::new(vals[0], vals[1], vals[2], vals[4], vals[5], vals[6], vals[8], vals[9], vals[10]);
                let pose = Pose::new(r, Vec3::new(vals[3], vals[7], vals[11]));
                let err = pose.orthonormality_error();
                if err > POSE_REPAIR_TOLERANCE {
                    return Err(malformed(line_no, format!("rotation not orthonormal ({err})")));
                }
                let rotation = if err > 0.0 { nearest_rotation(&r) } else { r };
                (poses.len() as f64, Pose::new(rotation, pose.translation))
            }
        };
        if let Some(&prev) = stamps.last() {
            if !(stamp > prev) {
                return Err(CloudIoError::Ordering { path: path.to_path_buf(), line: line_no });
            }
        }
        stamps.push(stamp);
        poses.push(pose);
    }
    Ok(Trajectory { timestamps: stamps, poses })
}

fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = SVD::new(*m, true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Mat3::identity();
    d[(2, 2)] = (u * vt).determinant().signum();
    u * d * vt
}

pub fn write_trajectory(traj: &Trajectory, path: &Path, format: TrajectoryFormat) -> IoResult<()> {
    let mut out = String::new();
    for (t, p) in traj.timestamps.iter().zip(&traj.poses) {
        match format {
            TrajectoryFormat::Tum => {
                let [qx, qy, qz, qw] = p.quaternion();
                let tr = p.translation;
                let _ = writeln!(out, "{t} {} {} {} {qx} {qy} {qz} {qw}", tr.x, tr.y, tr.z);
            }
            TrajectoryFormat::KittiPoses => {
                let r = &p.rotation;
                let tr = &p.translation;
                let _ = writeln!(
                    out,
                    "{} {} {} {} {} {} {} {} {} {} {} {}",
                    r[(0, 0)],
                    r[(0, 1)],
                    r[(0, 2)],
                    tr.x,
                    r[(1, 0)],
                    r[(1, 1)],
                    r[(1, 2)],
                    tr.y,
                    r[(2, 0)],
                    r[(2, 1)],
                    r[(2, 2)],
                    tr.z
                );
            }
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

// ---------------------------------------------------------------- surfels

/// Writes surfels as an ascii PLY with `x y z nx ny nz radius` per vertex,
/// in the order given (callers pass surfels sorted by id).
pub fn write_surfel_map(surfels: &[Surfel], path: &Path) -> IoResult<()> {
    let mut out = String::with_capacity(64 * surfels.len() + 256);
    let _ = write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\n\
         property double x\nproperty double y\nproperty double z\n\
         property double nx\nproperty double ny\nproperty double nz\n\
         property double radius\nend_header\n",
        surfels.len()
    );
    for s in surfels {
        let (c, n) = (s.center, s.normal);
        let _ =
            writeln!(out, "{} {} {} {} {} {} {}", g9(c.x), g9(c.y), g9(c.z), g9(n.x), g9(n.y), g9(n.z), g9(s.radius));
    }
    fs::write(path, out).map_err(io_err(path))
}

/// A surfel as stored on disk.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfelRecord {
    pub center: Vec3,
    pub normal: Vec3,
    pub radius: f64,
}

pub fn read_surfel_map(path: &Path) -> IoResult<Vec<SurfelRecord>> {
    let table = read_ply(path)?;
    let c = table.columns(path, &["x", "y", "z", "nx", "ny", "nz", "radius"])?;
    Ok(table
        .rows
        .iter()
        .map(|r| SurfelRecord {
            center: Vec3::new(r[c[0]], r[c[1]], r[c[2]]),
            normal: Vec3::new(r[c[3]], r[c[4]], r[c[5]]),
            radius: r[c[6]],
        })
        .collect())
}
