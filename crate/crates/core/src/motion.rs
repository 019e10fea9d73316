//! 71-dimensional motion frames: root translation plus 17 joint quaternions,
//! per-component scaling and weak labels from per-frame standard deviation.

use std::fs::File;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dsp::NORM_LIMIT;
use crate::error::{Error, Result};

pub const MOTION_DIM: usize = 71;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointKind {
    Translation3,
    Rotation4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JointEntry {
    pub name: &'static str,
    pub kind: JointKind,
    pub start: usize,
}

impl JointEntry {
    pub fn width(&self) -> usize {
        match self.kind {
            JointKind::Translation3 => 3,
            JointKind::Rotation4 => 4,
        }
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.width()
    }
}

const ROTATION_JOINTS: [&str; 17] = [
    "pelvis",
    "head",
    "neck",
    "spine1",
    "spine2",
    "left_clavicle",
    "left_shoulder",
    "left_forearm",
    "right_clavicle",
    "right_shoulder",
    "right_forearm",
    "left_thigh",
    "left_knee",
    "left_foot",
    "right_thigh",
    "right_knee",
    "right_foot",
];

/// Ordered joint table: root translation at 0..3, then one `(x, y, z, w)`
/// quaternion per joint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonLayout {
    entries: Vec<JointEntry>,
}

impl Default for SkeletonLayout {
    fn default() -> Self {
        Self::standard()
    }
}

impl SkeletonLayout {
    pub fn standard() -> Self {
        let mut entries = vec![JointEntry {
            name: "root",
            kind: JointKind::Translation3,
            start: 0,
        }];
        for (i, name) in ROTATION_JOINTS.iter().enumerate() {
            entries.push(JointEntry {
                name,
                kind: JointKind::Rotation4,
                start: 3 + 4 * i,
            });
        }
        Self { entries }
    }

    pub fn entries(&self) -> &[JointEntry] {
        &self.entries
    }

    pub fn joint(&self, name: &str) -> Option<&JointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn dim(&self) -> usize {
        self.entries.last().map(|e| e.start + e.width()).unwrap_or(0)
    }

    /// Column names, e.g. `root_tx`, `pelvis_qw`.
    pub fn column_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.dim());
        for e in &self.entries {
            let suffixes: &[&str] = match e.kind {
                JointKind::Translation3 => &["tx", "ty", "tz"],
                JointKind::Rotation4 => &["qx", "qy", "qz", "qw"],
            };
            out.extend(suffixes.iter().map(|s| format!("{}_{s}", e.name)));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        x: 0.0,
        y: 0.0,
        z: 0.0,
        w: 1.0,
    };

    pub fn from_axis_angle(axis: [f64; 3], radians: f64) -> Self {
        let (s, c) = (radians / 2.0).sin_cos();
        Quaternion {
            x: axis[0] * s,
            y: axis[1] * s,
            z: axis[2] * s,
            w: c,
        }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z + self.w * self.w).sqrt()
    }

    /// Hamilton product `self * rhs` (apply `rhs` first).
    pub fn mul(&self, rhs: &Quaternion) -> Quaternion {
        let (a, b) = (self, rhs);
        Quaternion {
            w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        }
    }

    pub fn to_rotation_matrix(&self) -> [[f64; 3]; 3] {
        let Quaternion { x, y, z, w } = *self;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
            [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
            [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.z, self.w]
    }
}

/// Sequence of rotation axes for Euler angles, about static (world) axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EulerOrder {
    /// x first, then y, then z (`R = Rz * Ry * Rx`). Project default.
    #[default]
    Xyz,
    Xzy,
    Yxz,
    Yzx,
    Zxy,
    Zyx,
}

impl EulerOrder {
    pub fn axes(self) -> [usize; 3] {
        match self {
            EulerOrder::Xyz => [0, 1, 2],
            EulerOrder::Xzy => [0, 2, 1],
            EulerOrder::Yxz => [1, 0, 2],
            EulerOrder::Yzx => [1, 2, 0],
            EulerOrder::Zxy => [2, 0, 1],
            EulerOrder::Zyx => [2, 1, 0],
        }
    }
}

/// Unit quaternion for three rotations given in degrees. `angles[i]` rotates
/// about axis `order.axes()[i]`, applied in that sequence about fixed axes.
pub fn quaternion_from_euler(angles: [f64; 3], order: EulerOrder) -> Quaternion {
    let mut q = Quaternion::IDENTITY;
    for (&axis, &deg) in order.axes().iter().zip(&angles) {
        let mut unit = [0.0; 3];
        unit[axis] = 1.0;
        q = Quaternion::from_axis_angle(unit, deg.to_radians()).mul(&q);
    }
    let n = q.norm();
    Quaternion {
        x: q.x / n,
        y: q.y / n,
        z: q.z / n,
        w: q.w / n,
    }
}

/// Per-component max-abs values. Normalized value = raw / (max_abs / 0.9).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub max_abs: Vec<f64>,
}

impl Scaler {
    /// Max-abs over every frame of every sequence; all-zero components get 1.0.
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a MotionSequence>) -> Result<Self> {
        let mut max_abs: Option<Vec<f64>> = None;
        for seq in seqs {
            let m = max_abs.get_or_insert_with(|| vec![0.0; seq.dim()]);
            if m.len() != seq.dim() {
                return Err(Error::shape(format!(
                    "sequence has {} components, expected {}",
                    seq.dim(),
                    m.len()
                )));
            }
            for row in seq.frames.outer_iter() {
                for (acc, v) in m.iter_mut().zip(row) {
                    *acc = acc.max(v.abs());
                }
            }
        }
        let mut max_abs = max_abs.ok_or_else(|| Error::invalid("no sequences to fit"))?;
        for v in &mut max_abs {
            if *v == 0.0 {
                *v = 1.0;
            }
        }
        Ok(Self { max_abs })
    }

    pub fn dim(&self) -> usize {
        self.max_abs.len()
    }

    fn check(&self, seq: &MotionSequence) -> Result<()> {
        if self.max_abs.len() != seq.dim() {
            return Err(Error::invalid(format!(
                "scaler has {} entries, sequence has {} components",
                self.max_abs.len(),
                seq.dim()
            )));
        }
        if let Some(v) = self.max_abs.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!("scaler entry {v} is not positive")));
        }
        Ok(())
    }

    pub fn apply(&self, seq: &MotionSequence) -> Result<MotionSequence> {
        self.check(seq)?;
        let mut frames = seq.frames.clone();
        for mut row in frames.outer_iter_mut() {
            for (v, s) in row.iter_mut().zip(&self.max_abs) {
                *v *= NORM_LIMIT / s;
            }
        }
        Ok(MotionSequence {
            frames,
            fps: seq.fps,
            scaler: Some(self.clone()),
        })
    }

    pub fn invert(&self, seq: &MotionSequence) -> Result<MotionSequence> {
        self.check(seq)?;
        let mut frames = seq.frames.clone();
        for mut row in frames.outer_iter_mut() {
            for (v, s) in row.iter_mut().zip(&self.max_abs) {
                *v *= s / NORM_LIMIT;
            }
        }
        Ok(MotionSequence {
            frames,
            fps: seq.fps,
            scaler: None,
        })
    }
}

/// Frames at a fixed rate, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub frames: Array2<f64>,
    pub fps: u32,
    /// Present when `frames` are in normalized units.
    pub scaler: Option<Scaler>,
}

impl MotionSequence {
    pub fn new(frames: Array2<f64>, fps: u32) -> Result<Self> {
        if fps == 0 {
            return Err(Error::invalid("fps must be positive"));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("motion contains non-finite values"));
        }
        Ok(Self {
            frames,
            fps,
            scaler: None,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn frame(&self, t: usize) -> ArrayView1<'_, f64> {
        self.frames.row(t)
    }
}

/// Scales every component into `[-0.9, 0.9]` by its own max-abs over the track.
pub fn normalize_motion(raw: &MotionSequence) -> Result<(MotionSequence, Scaler)> {
    if raw.is_empty() {
        return Err(Error::invalid("motion sequence has no frames"));
    }
    let scaler = Scaler::fit([raw])?;
    Ok((scaler.apply(raw)?, scaler))
}

pub fn denormalize_motion(seq: &MotionSequence, scaler: &Scaler) -> Result<MotionSequence> {
    scaler.invert(seq)
}

/// Population standard deviation across the components of one frame.
pub fn frame_sd(frame: ArrayView1<'_, f64>) -> f64 {
    // Welford
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &v) in frame.iter().enumerate() {
        let delta = v - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (v - mean);
    }
    if frame.is_empty() {
        0.0
    } else {
        (m2 / frame.len() as f64).sqrt()
    }
}

/// Binary direction-persistence labels, one per frame index `2..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeakLabelTrack {
    /// `labels[i]` belongs to frame `i + 2`.
    pub labels: Vec<u8>,
}

impl WeakLabelTrack {
    pub const FIRST_FRAME: usize = 2;

    /// Label `d` for frame `f`, if defined.
    pub fn at_frame(&self, f: usize) -> Option<u8> {
        f.checked_sub(Self::FIRST_FRAME)
            .and_then(|i| self.labels.get(i).copied())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn direction(delta: f64) -> i8 {
    if delta < 0.0 {
        -1
    } else {
        1
    }
}

/// Label 1 when the frame SD keeps changing in the same direction across
/// frames `f-2, f-1, f`, else 0. A zero change counts as positive.
pub fn weak_labels(seq: &MotionSequence) -> Result<WeakLabelTrack> {
    if seq.len() < 3 {
        return Err(Error::invalid(format!(
            "weak labels need at least 3 frames, got {}",
            seq.len()
        )));
    }
    let sd: Vec<f64> = seq.frames.outer_iter().map(frame_sd).collect();
    let signs: Vec<i8> = sd.windows(2).map(|w| direction(w[1] - w[0])).collect();
    let labels = signs.windows(2).map(|s| u8::from(s[0] == s[1])).collect();
    Ok(WeakLabelTrack { labels })
}

/// Path of the scaler sidecar written next to a motion file.
pub fn scaler_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".scaler.json");
    PathBuf::from(s)
}

/// Writes one CSV row per frame under a header naming the layout columns.
/// When the sequence carries a scaler it is written to the sidecar file.
pub fn write_motion_csv(path: &Path, seq: &MotionSequence) -> Result<()> {
    let layout = SkeletonLayout::standard();
    if seq.dim() != layout.dim() {
        return Err(Error::shape(format!(
            "motion files hold {} components, sequence has {}",
            layout.dim(),
            seq.dim()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(layout.column_names())
        .map_err(|e| csv_error(path, e))?;
    for row in seq.frames.outer_iter() {
        w.write_record(row.iter().map(|v| format!("{v:?}")))
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    if let Some(scaler) = &seq.scaler {
        let sidecar = scaler_sidecar(path);
        let f = File::create(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        serde_json::to_writer(f, scaler).map_err(|e| Error::Format {
            what: "scaler file",
            msg: e.to_string(),
        })?;
    }
    Ok(())
}

pub fn read_motion_csv(path: &Path, fps: u32) -> Result<MotionSequence> {
    let layout = SkeletonLayout::standard();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header != layout.column_names() {
        return Err(Error::Format {
            what: "motion file",
            msg: format!("{}: header does not match the 71-column skeleton layout", path.display()),
        });
    }
    let mut data = Vec::new();
    let mut n = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Format {
                what: "motion file",
                msg: format!("{}: row {}: bad number {field:?}", path.display(), i + 1),
            })?;
            data.push(v);
        }
        n += 1;
    }
    let frames = Array2::from_shape_vec((n, MOTION_DIM), data).map_err(|e| Error::Format {
        what: "motion file",
        msg: e.to_string(),
    })?;
    let mut seq = MotionSequence::new(frames, fps)?;
    let sidecar = scaler_sidecar(path);
    if sidecar.exists() {
        let f = File::open(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let scaler: Scaler = serde_json::from_reader(f).map_err(|e| Error::Format {
            what: "scaler file",
            msg: format!("{}: {e}", sidecar.display()),
        })?;
        if scaler.dim() != MOTION_DIM {
            return Err(Error::invalid(format!(
                "{}: scaler has {} entries",
                sidecar.display(),
                scaler.dim()
            )));
        }
        seq.scaler = Some(scaler);
    }
    Ok(seq)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Format {
            what: "motion file",
            msg: format!("{}: {e}", path.display()),
        }
    }
}
