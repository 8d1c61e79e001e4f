//! 2D skeleton keypoints and their rasterized map sequence.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::codec::PixelVideo;
use crate::error::{Error, Result};

pub const JOINTS: [&str; 8] = [
    "head",
    "neck",
    "l_shoulder",
    "r_shoulder",
    "l_elbow",
    "r_elbow",
    "l_wrist",
    "r_wrist",
];

pub const HEAD: usize = 0;
pub const NECK: usize = 1;
pub const L_SHOULDER: usize = 2;
pub const R_SHOULDER: usize = 3;
pub const L_ELBOW: usize = 4;
pub const R_ELBOW: usize = 5;
pub const L_WRIST: usize = 6;
pub const R_WRIST: usize = 7;

/// Bones as joint index pairs with their fixed RGB colors.
pub const BONES: [((usize, usize), [f32; 3]); 7] = [
    ((HEAD, NECK), [1.0, 1.0, 1.0]),
    ((NECK, L_SHOULDER), [1.0, 0.0, 0.0]),
    ((NECK, R_SHOULDER), [0.0, 0.0, 1.0]),
    ((L_SHOULDER, L_ELBOW), [1.0, 0.5, 0.0]),
    ((L_ELBOW, L_WRIST), [1.0, 1.0, 0.0]),
    ((R_SHOULDER, R_ELBOW), [0.0, 0.5, 1.0]),
    ((R_ELBOW, R_WRIST), [0.0, 1.0, 1.0]),
];

const JOINT_COLOR: [f32; 3] = [0.5, 0.5, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub visible: bool,
}

impl Keypoint {
    pub fn new(x: f32, y: f32) -> Self {
        Self {
            x,
            y,
            visible: true,
        }
    }

    pub fn hidden() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            visible: false,
        }
    }
}

/// One frame's joints in [`JOINTS`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonFrame {
    pub joints: [Keypoint; 8],
}

impl SkeletonFrame {
    pub fn hidden() -> Self {
        Self {
            joints: [Keypoint::hidden(); 8],
        }
    }

    /// Horizontal mirror `x -> 1 - x`; joint labels are kept.
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for j in &mut out.joints {
            j.x = 1.0 - j.x;
        }
        out
    }

    pub fn shifted(&self, dx: f32, dy: f32) -> Self {
        let mut out = self.clone();
        for j in &mut out.joints {
            j.x += dx;
            j.y += dy;
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SkeletonSequence {
    pub frames: Vec<SkeletonFrame>,
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    frame: usize,
    joints: BTreeMap<String, [f32; 3]>,
}

impl SkeletonSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            frames: self.frames[range].to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (t, f) in self.frames.iter().enumerate() {
            for (j, k) in f.joints.iter().enumerate() {
                if !k.x.is_finite() || !k.y.is_finite() {
                    return Err(Error::NonFinite(format!("frame {t} joint {}", JOINTS[j])));
                }
                if k.visible && !((0.0..=1.0).contains(&k.x) && (0.0..=1.0).contains(&k.y)) {
                    return Err(Error::OutOfRange(format!(
                        "frame {t} joint {} at ({}, {})",
                        JOINTS[j], k.x, k.y
                    )));
                }
            }
        }
        Ok(())
    }

    /// One JSON object per frame: `{"frame": t, "joints": {"head": [x, y, v], ...}}`.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for (t, f) in self.frames.iter().enumerate() {
            let rec = FrameRecord {
                frame: t,
                joints: JOINTS
                    .iter()
                    .zip(&f.joints)
                    .map(|(n, k)| (n.to_string(), [k.x, k.y, if k.visible { 1.0 } else { 0.0 }]))
                    .collect(),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Joints missing from a record are treated as invisible.
    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut frames = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FrameRecord = serde_json::from_str(&line)?;
            if rec.frame != frames.len() {
                return Err(Error::Format(format!(
                    "skeleton record {} out of order (expected {})",
                    rec.frame,
                    frames.len()
                )));
            }
            let mut f = SkeletonFrame::hidden();
            for (name, [x, y, v]) in rec.joints {
                let j = JOINTS
                    .iter()
                    .position(|n| *n == name)
                    .ok_or_else(|| Error::Format(format!("unknown joint {name}")))?;
                f.joints[j] = Keypoint {
                    x,
                    y,
                    visible: v > 0.5,
                };
            }
            frames.push(f);
        }
        let s = Self { frames };
        s.validate()?;
        Ok(s)
    }
}

/// Stroke radii in pixels. Coverage falls linearly from 1 at `radius - 1`
/// to 0 at `radius`, so nothing is drawn beyond `radius`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RasterStyle {
    pub bone_radius: f64,
    pub joint_radius: f64,
}

impl Default for RasterStyle {
    fn default() -> Self {
        Self {
            bone_radius: 1.25,
            joint_radius: 1.5,
        }
    }
}

fn segment_distance(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let s = if len2 == 0.0 {
        0.0
    } else {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + s * dx - px, a.1 + s * dy - py);
    (cx * cx + cy * cy).sqrt()
}

fn coverage(d: f64, radius: f64) -> f32 {
    (radius - d).clamp(0.0, 1.0) as f32
}

/// Renders each frame onto a black `height x width` canvas. Overlapping
/// strokes combine by per-channel maximum.
pub fn rasterize_skeleton(
    s: &SkeletonSequence,
    height: usize,
    width: usize,
    style: &RasterStyle,
) -> Result<PixelVideo> {
    if s.is_empty() {
        return Err(Error::Empty("skeleton sequence".into()));
    }
    s.validate()?;
    let mut data = vec![0.0f32; s.len() * height * width * 3];
    let plane = height * width * 3;
    for (t, f) in s.frames.iter().enumerate() {
        let pos = |j: usize| {
            (
                f.joints[j].x as f64 * width as f64,
                f.joints[j].y as f64 * height as f64,
            )
        };
        let out = &mut data[t * plane..(t + 1) * plane];
        let mut stamp = |a: (f64, f64), b: (f64, f64), radius: f64, color: [f32; 3]| {
            let y0 = (a.1.min(b.1) - radius).floor().max(0.0) as usize;
            let y1 = ((a.1.max(b.1) + radius).ceil().max(0.0) as usize).min(height);
            let x0 = (a.0.min(b.0) - radius).floor().max(0.0) as usize;
            let x1 = ((a.0.max(b.0) + radius).ceil().max(0.0) as usize).min(width);
            for y in y0..y1 {
                for x in x0..x1 {
                    let c = coverage(
                        segment_distance(x as f64 + 0.5, y as f64 + 0.5, a, b),
                        radius,
                    );
                    if c > 0.0 {
                        let px = &mut out[(y * width + x) * 3..(y * width + x) * 3 + 3];
                        for (p, col) in px.iter_mut().zip(color) {
                            *p = p.max(c * col);
                        }
                    }
                }
            }
        };
        for ((a, b), color) in BONES {
            if f.joints[a].visible && f.joints[b].visible {
                stamp(pos(a), pos(b), style.bone_radius, color);
            }
        }
        for j in 0..JOINTS.len() {
            if f.joints[j].visible {
                stamp(pos(j), pos(j), style.joint_radius, JOINT_COLOR);
            }
        }
    }
    Ok(PixelVideo::from_raw(s.len(), height, width, data))
}
