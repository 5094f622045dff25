//! Volume files: a small NRRD subset and a raw `.f32` payload with a JSON
//! sidecar. Both store 32-bit little-endian floats, `x` fastest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BinaryMask, Shape3, Volume3D};
use crate::error::{Error, Result};

const NRRD_MAGIC: &str = "NRRD0004";

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spacing_um: Option<[f64; 3]>,
}

fn is_raw(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("f32" | "json"))
}

fn raw_pair(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("f32"), path.with_extension("json"))
}

/// Loads a volume. `.f32`/`.json` paths use the raw+sidecar encoding,
/// everything else is parsed as NRRD.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let path = path.as_ref();
    if is_raw(path) {
        load_raw(path)
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_nrrd(&bytes)
    }
}

/// Writes a volume in the encoding selected by the file extension
/// (see [`load_volume`]).
pub fn save_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_raw(path) {
        let (payload, sidecar) = raw_pair(path);
        let meta = Sidecar { shape: vol.shape().dims(), spacing_um: vol.spacing() };
        fs::write(&payload, encode_payload(vol.data())).map_err(|e| Error::io(&payload, e))?;
        fs::write(&sidecar, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&sidecar, e))
    } else {
        fs::write(path, encode_nrrd(vol)).map_err(|e| Error::io(path, e))
    }
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    BinaryMask::from_volume(&load_volume(path)?)
}

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    save_volume(&mask.to_volume(), path)
}

fn encode_payload(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_payload(bytes: &[u8], shape: Shape3) -> Result<Volume3D> {
    let expected = shape.len() * 4;
    if bytes.len() != expected {
        return Err(Error::PayloadSize { expected, found: bytes.len() });
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Volume3D::new(shape, data)
}

fn load_raw(path: &Path) -> Result<Volume3D> {
    let (payload, sidecar) = raw_pair(path);
    let meta: Sidecar = serde_json::from_slice(&fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?)
        .map_err(|e| Error::format("shape", e.to_string()))?;
    let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
    Ok(decode_payload(&bytes, Shape3::from_dims(meta.shape))?.with_spacing(meta.spacing_um))
}

fn encode_nrrd(vol: &Volume3D) -> Vec<u8> {
    let s = vol.shape();
    let mut header = format!(
        "{NRRD_MAGIC}\ntype: float\ndimension: 3\nsizes: {} {} {}\nencoding: raw\nendian: little\n",
        s.x, s.y, s.z
    );
    if let Some([dz, dy, dx]) = vol.spacing() {
        header.push_str(&format!("spacings: {dx} {dy} {dz}\n"));
    }
    header.push('\n');
    let mut out = header.into_bytes();
    out.extend(encode_payload(vol.data()));
    out
}

fn parse_nrrd(bytes: &[u8]) -> Result<Volume3D> {
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .map(|p| (p, p + 2))
        .or_else(|| bytes.windows(4).position(|w| w == b"\r\n\r\n").map(|p| (p, p + 4)))
        .ok_or_else(|| Error::format("header", "no blank line terminating the header"))?;
    let header =
        std::str::from_utf8(&bytes[..split.0]).map_err(|_| Error::format("header", "header is not valid UTF-8"))?;
    let mut lines = header.lines().map(|l| l.trim_end_matches('\r'));
    let magic = lines.next().unwrap_or_default();
    if !magic.starts_with("NRRD000") {
        return Err(Error::format("magic", format!("expected {NRRD_MAGIC}, found `{magic}`")));
    }

    let mut kind = None;
    let mut dimension = None;
    let mut sizes = None;
    let mut encoding = None;
    let mut endian = None;
    let mut spacing = None;
    for line in lines {
        if line.starts_with('#') || line.trim().is_empty() || line.contains(":=") {
            continue;
        }
        let (key, value) =
            line.split_once(':').ok_or_else(|| Error::format("header", format!("unparseable line `{line}`")))?;
        let value = value.trim();
        match key.trim() {
            "type" => kind = Some(value.to_string()),
            "dimension" => dimension = Some(value.to_string()),
            "sizes" => sizes = Some(parse_list::<usize>("sizes", value)?),
            "encoding" => encoding = Some(value.to_string()),
            "endian" => endian = Some(value.to_string()),
            "spacings" => spacing = Some(parse_list::<f64>("spacings", value)?),
            _ => {}
        }
    }

    match kind.as_deref() {
        Some("float") => {}
        Some(other) => return Err(Error::format("type", format!("unsupported type `{other}`"))),
        None => return Err(Error::format("type", "missing")),
    }
    match dimension.as_deref() {
        Some("3") => {}
        Some(other) => return Err(Error::format("dimension", format!("expected 3, found `{other}`"))),
        None => return Err(Error::format("dimension", "missing")),
    }
    match encoding.as_deref() {
        Some("raw") => {}
        Some(other) => return Err(Error::format("encoding", format!("unsupported encoding `{other}`"))),
        None => return Err(Error::format("encoding", "missing")),
    }
    match endian.as_deref() {
        Some("little") => {}
        Some(other) => return Err(Error::format("endian", format!("unsupported endian `{other}`"))),
        None => return Err(Error::format("endian", "missing")),
    }
    let sizes = sizes.ok_or_else(|| Error::format("sizes", "missing"))?;
    if sizes.len() != 3 {
        return Err(Error::format("sizes", format!("expected 3 sizes, found {}", sizes.len())));
    }
    let shape = Shape3::new(sizes[2], sizes[1], sizes[0]);
    let spacing = match spacing {
        Some(s) if s.len() == 3 => Some([s[2], s[1], s[0]]),
        Some(_) => return Err(Error::format("spacings", "expected 3 values")),
        None => None,
    };
    Ok(decode_payload(&bytes[split.1..], shape)?.with_spacing(spacing))
}

fn parse_list<T: std::str::FromStr>(field: &str, value: &str) -> Result<Vec<T>> {
    value
        .split_whitespace()
        .map(|t| t.parse::<T>().map_err(|_| Error::format(field, format!("cannot parse `{t}`"))))
        .collect()
}
