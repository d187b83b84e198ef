//! On-disk formats: the FGRD frame container, the dataset manifest, and the
//! normalization-stats sidecar.
//!
//! FGRD layout, all integers little-endian:
//!
//! ```text
//! bytes 0..4    magic "FGRD"
//! byte  4       format version, 0x01
//! bytes 5..9    frame count (u32)
//! bytes 9..13   height (u32)
//! bytes 13..17  width (u32)
//! bytes 17..    frame-major, row-major IEEE-754 f32 payload
//! ```
//!
//! The format does not store the sampling interval; loaded sequences carry
//! [`DEFAULT_STEP_HOURS`] until the caller overrides it. Values are stored in
//! 32-bit precision, so `save` quantizes in-memory doubles; `load` followed by
//! `save` reproduces a valid file byte for byte.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{ScalarField, Sequence};

/// Sampling interval assumed for loaded sequences (metadata only).
pub const DEFAULT_STEP_HOURS: f64 = 6.0;

const MAGIC: &[u8; 4] = b"FGRD";
const VERSION: u8 = 0x01;
const HEADER_LEN: usize = 17;

/// Serializes a sequence to FGRD bytes. Rejects non-finite values.
pub fn encode_field(seq: &Sequence) -> Result<Vec<u8>> {
    let (h, w) = seq.shape();
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * seq.len() * h * w);
    bytes.extend_from_slice(MAGIC);
    bytes.push(VERSION);
    bytes.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(h as u32).to_le_bytes());
    bytes.extend_from_slice(&(w as u32).to_le_bytes());
    for (fi, frame) in seq.frames().iter().enumerate() {
        for (pi, &value) in frame.data().iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("frame {fi}, pixel {pi}"),
                });
            }
            bytes.extend_from_slice(&(value as f32).to_le_bytes());
        }
    }
    Ok(bytes)
}

/// Parses FGRD bytes into a sequence.
pub fn decode_field(bytes: &[u8]) -> Result<Sequence> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated header: {} bytes, need {}", bytes.len(), HEADER_LEN),
        ));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, "bad magic (expected \"FGRD\")"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(
            4,
            format!("unsupported version {:#04x} (expected {VERSION:#04x})", bytes[4]),
        ));
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let frames = read_u32(5) as usize;
    let height = read_u32(9) as usize;
    let width = read_u32(13) as usize;
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::format(
            5,
            format!("degenerate dimensions {frames}x{height}x{width}"),
        ));
    }
    let expected = frames
        .checked_mul(height)
        .and_then(|n| n.checked_mul(width))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(5, "dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(Error::format(
            (HEADER_LEN + payload.len().min(expected)) as u64,
            format!(
                "payload holds {} bytes, header promises {}",
                payload.len(),
                expected
            ),
        ));
    }
    let per_frame = height * width;
    let mut out = Vec::with_capacity(frames);
    for fi in 0..frames {
        let mut data = Vec::with_capacity(per_frame);
        for pi in 0..per_frame {
            let at = (fi * per_frame + pi) * 4;
            let value = f32::from_le_bytes(payload[at..at + 4].try_into().unwrap());
            if !value.is_finite() {
                return Err(Error::format(
                    (HEADER_LEN + at) as u64,
                    format!("non-finite value in frame {fi}"),
                ));
            }
            data.push(value as f64);
        }
        out.push(ScalarField::from_vec(height, width, data)?);
    }
    Sequence::new(out, DEFAULT_STEP_HOURS)
}

/// Writes a sequence to an FGRD file.
pub fn save_field(path: impl AsRef<Path>, seq: &Sequence) -> Result<()> {
    let bytes = encode_field(seq)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a sequence from an FGRD file.
pub fn load_field(path: impl AsRef<Path>) -> Result<Sequence> {
    let bytes = fs::read(path)?;
    decode_field(&bytes)
}

/// Which split a manifest record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// One dataset record: an FGRD file, its start time, and its split.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub start_timestamp: i64,
    pub split: Split,
}

/// Parses a manifest: UTF-8 text, one `path,start_timestamp,split` record
/// per line. Blank lines are ignored.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let path = parts.next().unwrap_or("").trim();
        let ts = parts.next().map(str::trim);
        let split = parts.next().map(str::trim);
        let (ts, split) = match (ts, split) {
            (Some(t), Some(s)) => (t, s),
            _ => {
                return Err(Error::Manifest {
                    line: i + 1,
                    what: format!("expected `path,start_timestamp,split`, got `{line}`"),
                })
            }
        };
        if path.is_empty() {
            return Err(Error::Manifest {
                line: i + 1,
                what: "empty path".into(),
            });
        }
        let start_timestamp: i64 = ts.parse().map_err(|_| Error::Manifest {
            line: i + 1,
            what: format!("bad timestamp `{ts}`"),
        })?;
        let split = Split::parse(split).ok_or_else(|| Error::Manifest {
            line: i + 1,
            what: format!("unknown split `{split}` (expected train|val|test)"),
        })?;
        entries.push(ManifestEntry {
            path: path.to_string(),
            start_timestamp,
            split,
        });
    }
    Ok(entries)
}

/// Renders manifest entries back to text, one record per line.
pub fn render_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{},{},{}\n",
            e.path,
            e.start_timestamp,
            e.split.as_str()
        ));
    }
    out
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    parse_manifest(&text)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(render_manifest(entries).as_bytes())?;
    Ok(())
}

/// Normalization statistics of a dataset's training split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl NormStats {
    /// Dynamic range `max - min`, the reference span for PSNR and the SSIM
    /// stabilizing constants.
    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

/// Parses a stats sidecar: `key=value` lines for mean, std, min, max.
pub fn parse_stats(text: &str) -> Result<NormStats> {
    let mut mean = None;
    let mut std = None;
    let mut min = None;
    let mut max = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Manifest {
            line: i + 1,
            what: format!("expected `key=value`, got `{line}`"),
        })?;
        let value: f64 = value.trim().parse().map_err(|_| Error::Manifest {
            line: i + 1,
            what: format!("bad number `{}`", value.trim()),
        })?;
        match key.trim() {
            "mean" => mean = Some(value),
            "std" => std = Some(value),
            "min" => min = Some(value),
            "max" => max = Some(value),
            other => {
                return Err(Error::Manifest {
                    line: i + 1,
                    what: format!("unknown stats key `{other}`"),
                })
            }
        }
    }
    match (mean, std, min, max) {
        (Some(mean), Some(std), Some(min), Some(max)) => Ok(NormStats {
            mean,
            std,
            min,
            max,
        }),
        _ => Err(Error::data("stats sidecar must define mean, std, min, max")),
    }
}

/// Renders stats as `key=value` lines (shortest round-trip float syntax).
pub fn render_stats(stats: &NormStats) -> String {
    format!(
        "mean={}\nstd={}\nmin={}\nmax={}\n",
        stats.mean, stats.std, stats.min, stats.max
    )
}

pub fn read_stats(path: impl AsRef<Path>) -> Result<NormStats> {
    let text = fs::read_to_string(path)?;
    parse_stats(&text)
}

pub fn write_stats(path: impl AsRef<Path>, stats: &NormStats) -> Result<()> {
    let mut file = fs::File::create(path)?;
    file.write_all(render_stats(stats).as_bytes())?;
    Ok(())
}
