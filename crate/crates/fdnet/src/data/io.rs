//! Dataset ingestion and emission.
//!
//! Layout: `root/{train,val,test}/<sequence_id>/frame_%03d.pgm` plus a
//! `root/manifest.json` listing `{id, split, num_frames, cadence_minutes}`.
//! A sequence directory may instead hold a single `sequence.grd` (raw
//! little-endian f32 grid, 16-byte header: magic `FDG1`, u32 H, u32 W,
//! u32 T). Mixing formats inside one sequence is rejected, and every loaded
//! value must lie in [0, 1].
//!
//! All decoders are total: arbitrary input bytes produce an error, never a
//! panic (they are fuzzed).

use super::Sequence;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Guard against absurd header-declared dimensions.
const MAX_DIM: usize = 1 << 16;
const MAX_FRAMES: usize = 1 << 20;

// --- PGM (binary, 8-bit grayscale) -----------------------------------------

/// Encodes one grayscale frame as binary PGM (P5, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Data(format!(
            "pgm encode: {}x{} needs {} pixels, got {}",
            width,
            height,
            width * height,
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Decodes a binary PGM. Accepts `#` comments and arbitrary whitespace in
/// the header; rejects maxval > 255 and short payloads.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0usize;
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(Error::Data("pgm: missing P5 magic".into()));
    }
    pos += 2;

    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while let Some(&b) = bytes.get(pos) {
                        pos += 1;
                        if b == b'\n' {
                            break;
                        }
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while let Some(b) = bytes.get(pos) {
            if b.is_ascii_digit() {
                pos += 1;
            } else {
                break;
            }
        }
        if start == pos || pos - start > 9 {
            return Err(Error::Data("pgm: malformed header integer".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::Data("pgm: non-utf8 header".into()))?;
        *field = text
            .parse()
            .map_err(|_| Error::Data("pgm: unparsable header integer".into()))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 || width > MAX_DIM || height > MAX_DIM {
        return Err(Error::Data(format!("pgm: unreasonable dimensions {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!("pgm: unsupported maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Data("pgm: missing header terminator".into())),
    }
    let need = width
        .checked_mul(height)
        .ok_or_else(|| Error::Data("pgm: dimension overflow".into()))?;
    let payload = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Data(format!("pgm: truncated payload, need {need} bytes")))?;
    Ok((width, height, payload.to_vec()))
}

/// Frame tensor `[1, H, W]` in [0, 1] -> PGM bytes (values rounded to 8 bits).
pub fn frame_to_pgm<E: Element>(frame: &Tensor<E>) -> Result<Vec<u8>> {
    let shape = frame.shape();
    let (h, w) = match shape {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        _ => {
            return Err(Error::Data(format!(
                "frame_to_pgm expects [1,H,W] or [H,W], got {shape:?}"
            )))
        }
    };
    let pixels: Vec<u8> = frame
        .data()
        .iter()
        .map(|v| (v.to_f64().clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
        .collect();
    encode_pgm(w, h, &pixels)
}

// --- GRD (raw f32 grid) -----------------------------------------------------

pub const GRD_MAGIC: &[u8; 4] = b"FDG1";

/// Encodes a `[T,1,H,W]` sequence tensor as a `.grd` blob (f32 payload).
pub fn encode_grd<E: Element>(frames: &Tensor<E>) -> Result<Vec<u8>> {
    let shape = frames.shape();
    let [t, 1, h, w] = shape[..] else {
        return Err(Error::Data(format!("grd encode expects [T,1,H,W], got {shape:?}")));
    };
    let mut out = Vec::with_capacity(16 + frames.numel() * 4);
    out.extend_from_slice(GRD_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    for v in frames.data() {
        out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes a `.grd` blob into `(h, w, t, values)`, validating the value range.
pub fn decode_grd(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    if bytes.len() < 16 {
        return Err(Error::Data("grd: truncated header".into()));
    }
    if &bytes[0..4] != GRD_MAGIC {
        return Err(Error::Data("grd: bad magic".into()));
    }
    let u32_at = |off: usize| -> usize {
        u32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]) as usize
    };
    let (h, w, t) = (u32_at(4), u32_at(8), u32_at(12));
    if h == 0 || w == 0 || t == 0 || h > MAX_DIM || w > MAX_DIM || t > MAX_FRAMES {
        return Err(Error::Data(format!("grd: unreasonable dimensions {t}x{h}x{w}")));
    }
    let count = t
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or_else(|| Error::Data("grd: dimension overflow".into()))?;
    let need = count
        .checked_mul(4)
        .and_then(|x| x.checked_add(16))
        .ok_or_else(|| Error::Data("grd: size overflow".into()))?;
    if bytes.len() != need {
        return Err(Error::Data(format!(
            "grd: expected {need} bytes for {t}x{h}x{w}, got {}",
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let off = 16 + i * 4;
        let v = f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]);
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(Error::Data(format!("grd: value {v} at index {i} outside [0,1]")));
        }
        values.push(v);
    }
    Ok((h, w, t, values))
}

// --- manifest ----------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    pub num_frames: usize,
    pub cadence_minutes: u32,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub sequences: Vec<ManifestEntry>,
}

pub fn parse_manifest(bytes: &[u8]) -> Result<Manifest> {
    serde_json::from_slice(bytes).map_err(|e| Error::Data(format!("manifest: {e}")))
}

// --- dataset layout -----------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameFormat {
    Pgm,
    Grd,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

fn seq_dir(root: &Path, entry: &ManifestEntry) -> PathBuf {
    root.join(&entry.split).join(&entry.id)
}

/// Writes sequences under `root/<split>/<id>/` and returns manifest entries.
pub fn save_split<E: Element>(
    root: &Path,
    split: &str,
    seqs: &[Sequence<E>],
    format: FrameFormat,
) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let entry = ManifestEntry {
            id: seq.id.clone(),
            split: split.to_string(),
            num_frames: seq.len(),
            cadence_minutes: seq.cadence_minutes,
        };
        let dir = seq_dir(root, &entry);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        match format {
            FrameFormat::Pgm => {
                for t in 0..seq.len() {
                    let frame = seq.frame(t);
                    write_file(&dir.join(format!("frame_{t:03}.pgm")), &frame_to_pgm(&frame)?)?;
                }
            }
            FrameFormat::Grd => {
                write_file(&dir.join("sequence.grd"), &encode_grd(&seq.frames)?)?;
            }
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn save_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Data(format!("manifest encode: {e}")))?;
    write_file(&root.join("manifest.json"), json.as_bytes())
}

pub fn load_manifest(root: &Path) -> Result<Manifest> {
    parse_manifest(&read_file(&root.join("manifest.json"))?)
}

fn load_one<E: Element>(root: &Path, entry: &ManifestEntry) -> Result<Sequence<E>> {
    let dir = seq_dir(root, entry);
    let grd_path = dir.join("sequence.grd");
    let pgm_path = |t: usize| dir.join(format!("frame_{t:03}.pgm"));
    let has_grd = grd_path.is_file();
    let has_pgm = pgm_path(0).is_file();
    if has_grd && has_pgm {
        return Err(Error::Data(format!(
            "sequence {}: mixed formats (both sequence.grd and frame_000.pgm present)",
            entry.id
        )));
    }

    let (h, w, t, data): (usize, usize, usize, Vec<f64>) = if has_grd {
        let (h, w, t, values) = decode_grd(&read_file(&grd_path)?)?;
        (h, w, t, values.into_iter().map(|v| v as f64).collect())
    } else {
        let mut dims: Option<(usize, usize)> = None;
        let mut data = Vec::new();
        for t in 0..entry.num_frames {
            let path = pgm_path(t);
            if !path.is_file() {
                return Err(Error::Data(format!(
                    "sequence {}: missing frame {t} ({})",
                    entry.id,
                    path.display()
                )));
            }
            let (fw, fh, pixels) = decode_pgm(&read_file(&path)?)?;
            match dims {
                None => dims = Some((fh, fw)),
                Some(d) if d != (fh, fw) => {
                    return Err(Error::Data(format!(
                        "sequence {}: frame {t} is {fh}x{fw}, expected {}x{}",
                        entry.id, d.0, d.1
                    )))
                }
                _ => {}
            }
            data.extend(pixels.into_iter().map(|p| p as f64 / 255.0));
        }
        let (h, w) = dims.ok_or_else(|| Error::Data(format!("sequence {}: no frames", entry.id)))?;
        (h, w, entry.num_frames, data)
    };

    if t != entry.num_frames {
        return Err(Error::Data(format!(
            "sequence {}: manifest declares {} frames but data holds {t}",
            entry.id, entry.num_frames
        )));
    }
    let frames = Tensor::from_vec(&[t, 1, h, w], data.into_iter().map(E::from_f64).collect())?;
    Sequence::new(entry.id.clone(), frames, entry.cadence_minutes)
}

/// Loads every sequence of one split per the manifest.
pub fn load_split<E: Element>(root: &Path, split: &str) -> Result<Vec<Sequence<E>>> {
    let manifest = load_manifest(root)?;
    let mut out = Vec::new();
    for entry in manifest.sequences.iter().filter(|e| e.split == split) {
        out.push(load_one(root, entry)?);
    }
    Ok(out)
}
