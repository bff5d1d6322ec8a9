//! On-disk formats: raw float arrays, PNG previews, and sequence directories
//! described by a versioned `manifest.json`.
//!
//! A float array file is a 16-byte header of four little-endian `u32`
//! (magic, height, width, channels) followed by row-major, channel-interleaved
//! little-endian `f32` samples.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{normals_from_depth, DepthField, Image, Intrinsics, Mask, NormalField, PoseSE3};
use crate::objectives::Frame;
use crate::synth::RenderedSequence;

pub const MAGIC: u32 = u32::from_le_bytes(*b"CLDF");
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq)]
pub struct RawArray {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedFile {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl RawArray {
    pub fn from_f64(height: usize, width: usize, channels: usize, data: &[f64]) -> Self {
        RawArray {
            height,
            width,
            channels,
            data: data.iter().map(|v| *v as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| *v as f64).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        for v in [MAGIC, self.height as u32, self.width as u32, self.channels as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(malformed(path, "file shorter than its header"));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[4 * k..4 * k + 4].try_into().expect("4 bytes"));
        if word(0) != MAGIC {
            return Err(malformed(path, "bad magic"));
        }
        let (h, w, c) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let expected = h
            .checked_mul(w)
            .and_then(|n| n.checked_mul(c))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| malformed(path, "header dimensions overflow"))?;
        if bytes.len() - 16 != expected {
            return Err(malformed(
                path,
                format!("{h}x{w}x{c} needs {expected} payload bytes, found {}", bytes.len() - 16),
            ));
        }
        let data = bytes[16..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Ok(RawArray {
            height: h,
            width: w,
            channels: c,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    fn expect_channels(&self, channels: usize, path: &Path) -> Result<()> {
        if self.channels != channels {
            return Err(Error::ShapeMismatch(format!(
                "{} has {} channels, expected {channels}",
                path.display(),
                self.channels
            )));
        }
        Ok(())
    }
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    RawArray::from_f64(img.height, img.width, img.channels, &img.data).write(path)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let raw = RawArray::read(path)?;
    Image::new(raw.height, raw.width, raw.channels, raw.to_f64())
}

pub fn write_depth(path: &Path, depth: &DepthField) -> Result<()> {
    RawArray::from_f64(depth.height, depth.width, 1, &depth.data).write(path)
}

pub fn read_depth(path: &Path) -> Result<DepthField> {
    let raw = RawArray::read(path)?;
    raw.expect_channels(1, path)?;
    DepthField::new(raw.height, raw.width, raw.to_f64())
}

pub fn write_normals(path: &Path, normals: &NormalField) -> Result<()> {
    let flat: Vec<f64> = normals.data.iter().flat_map(|n| [n.x, n.y, n.z]).collect();
    RawArray::from_f64(normals.height, normals.width, 3, &flat).write(path)
}

/// Reads a normal field; vectors are renormalised after the `f32` round trip.
pub fn read_normals(path: &Path) -> Result<NormalField> {
    let raw = RawArray::read(path)?;
    raw.expect_channels(3, path)?;
    let data = raw
        .to_f64()
        .chunks_exact(3)
        .map(|c| {
            let n = Vector3::new(c[0], c[1], c[2]);
            let len = n.norm();
            if len > 0.0 && len.is_finite() {
                Ok(n / len)
            } else {
                Err(malformed(path, "zero or non-finite normal"))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    NormalField::new(raw.height, raw.width, data)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let flat: Vec<f64> = mask.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    RawArray::from_f64(mask.height, mask.width, 1, &flat).write(path)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let raw = RawArray::read(path)?;
    raw.expect_channels(1, path)?;
    Ok(Mask {
        height: raw.height,
        width: raw.width,
        data: raw.data.iter().map(|&v| v > 0.5).collect(),
    })
}

/// 8-bit preview; values are clamped to `[0, 1]`.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let color = match img.channels {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        c => return Err(Error::InvalidInput(format!("cannot write a {c}-channel PNG"))),
    };
    image::save_buffer(path, &bytes, img.width as u32, img.height as u32, color)
        .map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Every `*.bin` depth file in `dir`, sorted by file name.
pub fn read_depth_dir(dir: &Path) -> Result<Vec<DepthField>> {
    list_bins(dir)?.iter().map(|p| read_depth(p)).collect()
}

pub fn list_bins(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(dir.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut paths = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "bin") {
            paths.push(path);
        }
    }
    paths.sort();
    Ok(paths)
}

/// Pose as written in the manifest: row-major rotation and a translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseEntry {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl From<&PoseSE3> for PoseEntry {
    fn from(p: &PoseSE3) -> Self {
        let r = &p.rotation;
        PoseEntry {
            rotation: [0, 1, 2].map(|i| [r[(i, 0)], r[(i, 1)], r[(i, 2)]]),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl PoseEntry {
    pub fn to_pose(&self) -> Result<PoseSE3> {
        let r = Matrix3::from_fn(|i, j| self.rotation[i][j]);
        PoseSE3::new(r, Vector3::from(self.translation))
            .map_err(|e| Error::MalformedManifest(format!("bad pose: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub image: String,
    pub depth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid: Option<String>,
    /// Camera-to-world.
    pub pose: PoseEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub intrinsics: Intrinsics,
    pub frames: Vec<FrameEntry>,
    /// Free-form provenance, e.g. the scene configuration that produced it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Value>,
}

const MANIFEST_KEYS: &[&str] = &["version", "intrinsics", "frames", "generator"];
const FRAME_KEYS: &[&str] = &["image", "depth", "normal", "valid", "pose"];

fn warn_unknown(obj: &Value, known: &[&str], context: &str) {
    if let Some(map) = obj.as_object() {
        for key in map.keys().filter(|k| !known.contains(&k.as_str())) {
            log::warn!("ignoring unknown key `{key}` in {context}");
        }
    }
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Manifest> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::MalformedManifest(e.to_string()))?;
        let version = value
            .get("version")
            .ok_or_else(|| Error::MalformedManifest("missing `version`".into()))?
            .as_u64()
            .ok_or_else(|| Error::MalformedManifest("`version` must be an unsigned integer".into()))?;
        if version != MANIFEST_VERSION as u64 {
            return Err(Error::UnsupportedVersion(version.min(u32::MAX as u64) as u32));
        }
        warn_unknown(&value, MANIFEST_KEYS, "manifest");
        if let Some(frames) = value.get("frames").and_then(Value::as_array) {
            for (i, f) in frames.iter().enumerate() {
                warn_unknown(f, FRAME_KEYS, &format!("frame {i}"));
            }
        }
        let manifest: Manifest =
            serde_json::from_value(value).map_err(|e| Error::MalformedManifest(e.to_string()))?;
        manifest
            .intrinsics
            .validate()
            .map_err(|e| Error::MalformedManifest(format!("bad intrinsics: {e}")))?;
        if manifest.frames.is_empty() {
            return Err(Error::MalformedManifest("no frames".into()));
        }
        Ok(manifest)
    }

    pub fn read(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_NAME);
        let bytes = read_bytes(&path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::MalformedManifest("not UTF-8".into()))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFrame {
    pub image: Image,
    pub depth: DepthField,
    pub normals: Option<NormalField>,
    pub valid: Option<Mask>,
    pub pose_world: PoseSE3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub intrinsics: Intrinsics,
    pub frames: Vec<SequenceFrame>,
    pub generator: Option<Value>,
}

impl Sequence {
    pub fn from_rendered(seq: &RenderedSequence, generator: Option<Value>) -> Self {
        Sequence {
            intrinsics: seq.intrinsics,
            frames: seq
                .frames
                .iter()
                .map(|f| SequenceFrame {
                    image: f.image.clone(),
                    depth: f.gt_depth.clone(),
                    normals: Some(f.gt_normals.clone()),
                    valid: Some(f.valid.clone()),
                    pose_world: f.pose_world,
                })
                .collect(),
            generator,
        }
    }

    pub fn poses(&self) -> Vec<PoseSE3> {
        self.frames.iter().map(|f| f.pose_world).collect()
    }

    /// Objective frames; missing normals are estimated from depth.
    pub fn to_frames(&self) -> Result<Vec<Frame>> {
        self.frames
            .iter()
            .map(|f| {
                let normals = match &f.normals {
                    Some(n) => n.clone(),
                    None => normals_from_depth(&f.depth, &self.intrinsics)?,
                };
                Frame::new(f.image.clone(), f.depth.clone(), normals)
            })
            .collect()
    }

    pub fn write(&self, dir: &Path, png: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.frames.len());
        for (idx, f) in self.frames.iter().enumerate() {
            let name = format!("{idx:06}");
            let entry = FrameEntry {
                image: format!("image/{name}.bin"),
                depth: format!("depth/{name}.bin"),
                normal: f.normals.as_ref().map(|_| format!("normal/{name}.bin")),
                valid: f.valid.as_ref().map(|_| format!("valid/{name}.bin")),
                pose: PoseEntry::from(&f.pose_world),
            };
            write_image(&dir.join(&entry.image), &f.image)?;
            write_depth(&dir.join(&entry.depth), &f.depth)?;
            if let (Some(n), Some(path)) = (&f.normals, &entry.normal) {
                write_normals(&dir.join(path), n)?;
            }
            if let (Some(m), Some(path)) = (&f.valid, &entry.valid) {
                write_mask(&dir.join(path), m)?;
            }
            if png {
                write_png(&dir.join(format!("png/{name}.png")), &f.image)?;
            }
            entries.push(entry);
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            intrinsics: self.intrinsics,
            frames: entries,
            generator: self.generator.clone(),
        };
        fs::write(dir.join(MANIFEST_NAME), manifest.to_json())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Sequence> {
        let manifest = Manifest::read(dir)?;
        let k = manifest.intrinsics;
        let shape_check = |what: &str, path: &str, shape: (usize, usize)| -> Result<()> {
            if shape != (k.height, k.width) {
                return Err(Error::ShapeMismatch(format!(
                    "{what} {path} is {}x{}, manifest intrinsics expect {}x{}",
                    shape.0, shape.1, k.height, k.width
                )));
            }
            Ok(())
        };
        let mut frames = Vec::with_capacity(manifest.frames.len());
        for entry in &manifest.frames {
            let image = read_image(&dir.join(&entry.image))?;
            shape_check("image", &entry.image, image.shape())?;
            let depth = read_depth(&dir.join(&entry.depth))?;
            shape_check("depth", &entry.depth, depth.shape())?;
            let normals = match &entry.normal {
                Some(p) => {
                    let n = read_normals(&dir.join(p))?;
                    shape_check("normal", p, n.shape())?;
                    Some(n)
                }
                None => None,
            };
            let valid = match &entry.valid {
                Some(p) => {
                    let m = read_mask(&dir.join(p))?;
                    shape_check("valid mask", p, (m.height, m.width))?;
                    Some(m)
                }
                None => None,
            };
            frames.push(SequenceFrame {
                image,
                depth,
                normals,
                valid,
                pose_world: entry.pose.to_pose()?,
            });
        }
        Ok(Sequence {
            intrinsics: k,
            frames,
            generator: manifest.generator,
        })
    }
}
