//! Byte-exact file formats: binary PGM/PPM images and the checkpoint
//! container (manifest + little-endian f64 blob, SHA-256 checked).

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SMAPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

// ── Errors ──────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum IoFormatError {
    Io(std::io::Error),
    BadMagic { found: String },
    VersionMismatch { found: u32, expected: u32 },
    Truncated { what: &'static str },
    Corrupt { detail: String },
    BadImage { detail: String },
}

impl fmt::Display for IoFormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoFormatError::Io(e) => write!(f, "io error: {e}"),
            IoFormatError::BadMagic { found } => write!(f, "bad magic {found:?}"),
            IoFormatError::VersionMismatch { found, expected } => {
                write!(f, "format version {found}, expected {expected}")
            }
            IoFormatError::Truncated { what } => write!(f, "truncated {what}"),
            IoFormatError::Corrupt { detail } => write!(f, "corrupt checkpoint: {detail}"),
            IoFormatError::BadImage { detail } => write!(f, "bad image: {detail}"),
        }
    }
}

impl std::error::Error for IoFormatError {}

impl From<std::io::Error> for IoFormatError {
    fn from(e: std::io::Error) -> Self {
        IoFormatError::Io(e)
    }
}

type IoResult<T> = std::result::Result<T, IoFormatError>;

// ── Portable images ─────────────────────────────────────────────────

/// Quantize a unit-range value to a byte, rounding half away from zero.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Serialize an [H x W x ch] image to binary PGM (ch = 1) or PPM (ch = 3).
pub fn image_bytes(img: &Tensor) -> IoResult<Vec<u8>> {
    if img.shape.len() != 3 {
        return Err(IoFormatError::BadImage {
            detail: format!("expected [H, W, ch], got {:?}", img.shape),
        });
    }
    let (h, w, ch) = (img.shape[0], img.shape[1], img.shape[2]);
    let magic = match ch {
        1 => "P5",
        3 => "P6",
        other => {
            return Err(IoFormatError::BadImage {
                detail: format!("{other} channels unsupported (1 or 3)"),
            })
        }
    };
    let mut out = Vec::with_capacity(16 + h * w * ch);
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(format!("{w} {h}").as_bytes());
    out.push(b'\n');
    out.extend_from_slice(b"255");
    out.push(b'\n');
    for &v in img.data.iter() {
        out.push(quantize(v));
    }
    Ok(out)
}

pub fn write_image(img: &Tensor, path: &Path) -> IoResult<()> {
    let bytes = image_bytes(img)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Parse binary PGM/PPM back into a unit-range tensor.
pub fn read_image_bytes(bytes: &[u8]) -> IoResult<Tensor> {
    let magic = bytes.get(0..2).ok_or(IoFormatError::Truncated { what: "magic" })?;
    let ch = match magic {
        b"P5" => 1usize,
        b"P6" => 3usize,
        other => {
            return Err(IoFormatError::BadMagic {
                found: String::from_utf8_lossy(other).into_owned(),
            })
        }
    };
    // header: magic, whitespace, width, height, maxval, single newline
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(IoFormatError::Truncated { what: "header" });
        }
        let text = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| IoFormatError::BadImage { detail: "non-ascii header".into() })?;
        let value: usize = text
            .parse()
            .map_err(|_| IoFormatError::BadImage { detail: format!("bad header field {text:?}") })?;
        fields.push(value);
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(IoFormatError::BadImage { detail: format!("maxval {maxval}, only 255 supported") });
    }
    // exactly one whitespace byte after maxval
    pos += 1;
    let want = h * w * ch;
    let raw = bytes
        .get(pos..pos + want)
        .ok_or(IoFormatError::Truncated { what: "pixel data" })?;
    if bytes.len() != pos + want {
        return Err(IoFormatError::BadImage {
            detail: format!("byte count {} does not match {}x{}x{}", bytes.len() - pos, h, w, ch),
        });
    }
    let data: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Tensor::new(data, &[h, w, ch]).expect("shape consistent"))
}

pub fn read_image(path: &Path) -> IoResult<Tensor> {
    read_image_bytes(&fs::read(path)?)
}

// ── Checkpoint ──────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub count: u64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// "tokenizer" or "generator".
    pub kind: String,
    /// Echo of the run configuration that produced the checkpoint.
    pub config: serde_json::Value,
    pub params: Vec<ManifestEntry>,
    pub blob_len: u64,
    pub blob_sha256: String,
}

/// Serialize a parameter store to the single-file checkpoint layout:
/// magic, version, manifest length, manifest JSON, parameter blob.
pub fn checkpoint_bytes(
    store: &ParamStore,
    kind: &str,
    config: serde_json::Value,
) -> IoResult<Vec<u8>> {
    let mut blob = Vec::with_capacity(store.total_scalars() * 8);
    let mut params = Vec::with_capacity(store.len());
    for e in store.entries() {
        let offset = blob.len() as u64;
        for &v in e.value.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        params.push(ManifestEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            dtype: "f64".into(),
            offset,
            count: e.value.len() as u64,
        });
    }
    let digest = Sha256::digest(&blob);
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        config,
        params,
        blob_len: blob.len() as u64,
        blob_sha256: hex_string(&digest),
    };
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| IoFormatError::Corrupt { detail: e.to_string() })?;
    let mut out = Vec::with_capacity(16 + manifest_json.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn save_checkpoint(
    store: &ParamStore,
    kind: &str,
    config: serde_json::Value,
    path: &Path,
) -> IoResult<()> {
    let bytes = checkpoint_bytes(store, kind, config)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub manifest: Manifest,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn parse_checkpoint(bytes: &[u8]) -> IoResult<LoadedCheckpoint> {
    let magic = bytes.get(0..8).ok_or(IoFormatError::Truncated { what: "magic" })?;
    if magic != CHECKPOINT_MAGIC {
        return Err(IoFormatError::BadMagic { found: String::from_utf8_lossy(magic).into_owned() });
    }
    let version = u32::from_le_bytes(
        bytes
            .get(8..12)
            .ok_or(IoFormatError::Truncated { what: "version" })?
            .try_into()
            .unwrap(),
    );
    if version != CHECKPOINT_VERSION {
        return Err(IoFormatError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let mlen = u64::from_le_bytes(
        bytes
            .get(12..20)
            .ok_or(IoFormatError::Truncated { what: "manifest length" })?
            .try_into()
            .unwrap(),
    ) as usize;
    let manifest_bytes = bytes
        .get(20..20 + mlen)
        .ok_or(IoFormatError::Truncated { what: "manifest" })?;
    let manifest: Manifest = serde_json::from_slice(manifest_bytes)
        .map_err(|e| IoFormatError::Corrupt { detail: format!("manifest: {e}") })?;
    let blob = bytes
        .get(20 + mlen..)
        .ok_or(IoFormatError::Truncated { what: "blob" })?;
    if blob.len() as u64 != manifest.blob_len {
        return Err(IoFormatError::Corrupt {
            detail: format!("blob length {} but manifest says {}", blob.len(), manifest.blob_len),
        });
    }
    let digest = hex_string(&Sha256::digest(blob));
    if digest != manifest.blob_sha256 {
        return Err(IoFormatError::Corrupt { detail: "blob checksum mismatch".into() });
    }
    // offsets must be sorted, non-overlapping, and cover the blob exactly
    let mut expected_offset = 0u64;
    let mut params = Vec::with_capacity(manifest.params.len());
    for e in &manifest.params {
        if e.dtype != "f64" {
            return Err(IoFormatError::Corrupt { detail: format!("dtype {} unsupported", e.dtype) });
        }
        if e.offset != expected_offset {
            return Err(IoFormatError::Corrupt {
                detail: format!("param {} offset {} out of order", e.name, e.offset),
            });
        }
        let numel: u64 = e.shape.iter().product::<usize>() as u64;
        if numel != e.count {
            return Err(IoFormatError::Corrupt {
                detail: format!("param {} shape/count mismatch", e.name),
            });
        }
        let start = e.offset as usize;
        let end = start + (e.count as usize) * 8;
        let raw = blob.get(start..end).ok_or(IoFormatError::Truncated { what: "param data" })?;
        let mut data = Vec::with_capacity(e.count as usize);
        for c in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(c.try_into().unwrap()));
        }
        params.push((e.name.clone(), e.shape.clone(), data));
        expected_offset = end as u64;
    }
    if expected_offset != manifest.blob_len {
        return Err(IoFormatError::Corrupt {
            detail: format!("params cover {} bytes of a {} byte blob", expected_offset, manifest.blob_len),
        });
    }
    Ok(LoadedCheckpoint { manifest, params })
}

pub fn load_checkpoint(path: &Path) -> IoResult<LoadedCheckpoint> {
    parse_checkpoint(&fs::read(path)?)
}

/// Overwrite a freshly constructed store with checkpointed values; the
/// parameter sets must agree exactly.
pub fn load_into_store(store: &mut ParamStore, ckpt: &LoadedCheckpoint) -> IoResult<()> {
    if store.len() != ckpt.params.len() {
        return Err(IoFormatError::Corrupt {
            detail: format!(
                "model has {} params but checkpoint holds {}",
                store.len(),
                ckpt.params.len()
            ),
        });
    }
    for (idx, (name, shape, data)) in ckpt.params.iter().enumerate() {
        let id = crate::tensor::ParamId(idx);
        let entry = store.entry(id);
        if &entry.name != name || &entry.shape != shape {
            return Err(IoFormatError::Corrupt {
                detail: format!(
                    "param {idx}: model has {} {:?}, checkpoint has {} {:?}",
                    entry.name, entry.shape, name, shape
                ),
            });
        }
        store.value_mut(id).copy_from_slice(data);
    }
    Ok(())
}

pub fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// SHA-256 over the concatenated little-endian parameter bytes; used to
/// compare training outcomes across runs.
pub fn params_checksum(store: &ParamStore) -> String {
    let mut hasher = Sha256::new();
    for e in store.entries() {
        for &v in e.value.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex_string(&hasher.finalize())
}
