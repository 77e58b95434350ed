//! TPRV container: a little-endian header, then one `u16` label and the
//! `f32` frame volume per clip. The manifest lives in a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use super::{ClipDims, Dataset, DatasetManifest, VideoClip};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TPRV";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4;

/// Sidecar location for a dataset file: `<path>.json`.
pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn u32_field(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub(crate) fn encode(dataset: &Dataset) -> Result<Vec<u8>> {
    dataset.validate()?;
    let d = dataset.manifest.dims;
    let mut out = Vec::with_capacity(HEADER_LEN + dataset.clips.len() * (2 + 4 * d.clip_len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (v, what) in [
        (dataset.clips.len(), "clip count"),
        (d.t, "T"),
        (d.h, "H"),
        (d.w, "W"),
        (d.channels, "channels"),
    ] {
        out.extend_from_slice(&u32_field(v, what)?);
    }
    for clip in &dataset.clips {
        let label = u16::try_from(clip.label)
            .map_err(|_| Error::Format(format!("label {} does not fit in u16", clip.label)))?;
        out.extend_from_slice(&label.to_le_bytes());
        for v in &clip.frames {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) fn decode(bytes: &[u8], manifest: DatasetManifest) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let version = field(0);
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = field(1);
    let dims = ClipDims {
        t: field(2),
        h: field(3),
        w: field(4),
        channels: field(5),
    };
    if dims != manifest.dims {
        return Err(Error::Format(format!(
            "payload dims {dims:?} disagree with manifest {:?}",
            manifest.dims
        )));
    }
    if n != manifest.clip_count {
        return Err(Error::Format(format!(
            "payload has {n} clips, manifest says {}",
            manifest.clip_count
        )));
    }
    let record = 2 + 4 * dims.clip_len();
    let expected = HEADER_LEN + n * record;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, expected {expected} (truncated or trailing data)",
            bytes.len()
        )));
    }
    let mut clips = Vec::with_capacity(n);
    for (i, rec) in bytes[HEADER_LEN..].chunks_exact(record).enumerate() {
        let label = u16::from_le_bytes([rec[0], rec[1]]) as usize;
        let frames = rec[2..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let id = manifest
            .clip_ids
            .get(i)
            .cloned()
            .ok_or_else(|| Error::Format(format!("manifest has no id for clip {i}")))?;
        clips.push(VideoClip { id, label, dims, frames });
    }
    let dataset = Dataset { manifest, clips };
    dataset.validate()?;
    Ok(dataset)
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode(dataset)?;
    fs::write(path, bytes)?;
    fs::write(manifest_path(path), serde_json::to_string_pretty(&dataset.manifest)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
    decode(&bytes, manifest)
}
