//! On-disk formats: the binary clip container and its JSON sidecar.
//!
//! Clip layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SSHA"
//! 4       2     format version (currently 1)
//! 6       4     T frames
//! 10      4     H rows
//! 14      4     W cols
//! 18      4     C channels (3 = RGB, 2 = flow)
//! 22      1     dtype tag: 0 = u8, 1 = f32
//! 23      -     payload, row-major T -> H -> W -> C
//! ```
//!
//! f32 payloads are IEEE-754 little-endian. The sidecar `<stem>.json`
//! carries the label, optional ground-truth box, and the clip's seed.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clip::{Channels, Label, LabeledClip, VideoClip, DEFAULT_FPS};
use crate::error::{Error, Result};

pub const CLIP_MAGIC: [u8; 4] = *b"SSHA";
pub const CLIP_VERSION: u16 = 1;

const DTYPE_U8: u8 = 0;
const DTYPE_F32: u8 = 1;

/// Clip annotations stored next to the pixel data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub label: Label,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gt_box: Option<crate::geom::RegionBox>,
    pub seed: u64,
}

/// A decoded clip file; the dtype tag decides the variant.
#[derive(Debug, Clone)]
pub enum ClipPayload {
    U8(VideoClip<u8>),
    F32(VideoClip<f32>),
}

impl ClipPayload {
    pub fn into_u8(self) -> Result<VideoClip<u8>> {
        match self {
            ClipPayload::U8(c) => Ok(c),
            ClipPayload::F32(_) => Err(Error::Format("expected a u8 clip, got f32".into())),
        }
    }

    pub fn into_f32(self) -> Result<VideoClip<f32>> {
        match self {
            ClipPayload::F32(c) => Ok(c),
            ClipPayload::U8(c) => Ok(c.to_f32()),
        }
    }
}

fn header_bytes(t: usize, h: usize, w: usize, c: usize, dtype: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(23);
    out.extend_from_slice(&CLIP_MAGIC);
    out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for dim in [t, h, w, c] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.push(dtype);
    out
}

pub fn encode_clip_u8(clip: &VideoClip<u8>) -> Vec<u8> {
    let mut out = header_bytes(clip.t, clip.h, clip.w, clip.channels.count(), DTYPE_U8);
    out.extend_from_slice(&clip.data);
    out
}

pub fn encode_clip_f32(clip: &VideoClip<f32>) -> Vec<u8> {
    let mut out = header_bytes(clip.t, clip.h, clip.w, clip.channels.count(), DTYPE_F32);
    out.reserve(clip.data.len() * 4);
    for v in &clip.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_clip_u8(path: &Path, clip: &VideoClip<u8>) -> Result<()> {
    Ok(fs::write(path, encode_clip_u8(clip))?)
}

pub fn write_clip_f32(path: &Path, clip: &VideoClip<f32>) -> Result<()> {
    Ok(fs::write(path, encode_clip_f32(clip))?)
}

pub fn decode_clip(bytes: &[u8]) -> Result<ClipPayload> {
    if bytes.len() < 23 {
        return Err(Error::Format(format!(
            "clip file truncated: {} bytes, header needs 23",
            bytes.len()
        )));
    }
    if bytes[0..4] != CLIP_MAGIC {
        return Err(Error::Format("bad magic, not a clip file".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CLIP_VERSION {
        return Err(Error::Format(format!(
            "unsupported clip format version {version}"
        )));
    }
    let dim = |at: usize| {
        u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize
    };
    let (t, h, w, c) = (dim(6), dim(10), dim(14), dim(18));
    let channels = Channels::from_count(c)?;
    let dtype = bytes[22];
    let n = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::Format("clip dims overflow".into()))?;
    let payload = &bytes[23..];
    match dtype {
        DTYPE_U8 => {
            if payload.len() != n {
                return Err(Error::Format(format!(
                    "u8 payload is {} bytes, dims need {}",
                    payload.len(),
                    n
                )));
            }
            Ok(ClipPayload::U8(VideoClip::new(
                t,
                h,
                w,
                channels,
                DEFAULT_FPS,
                payload.to_vec(),
            )?))
        }
        DTYPE_F32 => {
            if payload.len() != n * 4 {
                return Err(Error::Format(format!(
                    "f32 payload is {} bytes, dims need {}",
                    payload.len(),
                    n * 4
                )));
            }
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(ClipPayload::F32(VideoClip::new(
                t,
                h,
                w,
                channels,
                DEFAULT_FPS,
                data,
            )?))
        }
        other => Err(Error::Format(format!("unknown dtype tag {other}"))),
    }
}

pub fn read_clip(path: &Path) -> Result<ClipPayload> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_clip(&bytes)
}

/// Write a labeled clip as `<stem>.ssha` plus `<stem>.json`.
pub fn write_labeled_clip(stem: &Path, lc: &LabeledClip) -> Result<()> {
    write_clip_u8(&stem.with_extension("ssha"), &lc.clip)?;
    let sidecar = Sidecar {
        label: lc.label,
        gt_box: lc.gt_box,
        seed: lc.seed,
    };
    let mut f = fs::File::create(stem.with_extension("json"))?;
    serde_json::to_writer_pretty(&mut f, &sidecar)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_labeled_clip(stem: &Path) -> Result<LabeledClip> {
    let clip = read_clip(&stem.with_extension("ssha"))?.into_u8()?;
    let sidecar: Sidecar =
        serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
    Ok(LabeledClip {
        clip,
        label: sidecar.label,
        gt_box: sidecar.gt_box,
        seed: sidecar.seed,
    })
}
