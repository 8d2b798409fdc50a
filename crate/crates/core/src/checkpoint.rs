//! Parameter archives.
//!
//! The archive is a flat binary file: the magic bytes `ASSLCKPT`, a `u32`
//! format version, a `u32` entry count, then per entry a length-prefixed
//! UTF-8 name, `u32` rows, `u32` cols and the row-major `f64` values, all
//! little-endian. A JSON sidecar next to it records the widths needed to
//! rebuild the model.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelBundle, ModelConfig};
use crate::tape::Mat;

const MAGIC: &[u8; 8] = b"ASSLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub d: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    #[serde(rename = "J")]
    pub joints: usize,
    #[serde(rename = "T")]
    pub frames: usize,
    pub widths: ModelConfig,
    pub format_version: u32,
}

/// `model.ckpt` -> `model.ckpt.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save(bundle: &ModelBundle, frames: usize, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(bundle.params.len() as u32).to_le_bytes());
    for id in bundle.params.ids() {
        let name = bundle.params.name(id).as_bytes();
        let value = bundle.params.get(id);
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(value.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(value.ncols() as u32).to_le_bytes());
        for x in value.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    let sidecar = Sidecar {
        d: bundle.feature_width(),
        classes: bundle.config.classes,
        joints: bundle.config.joints,
        frames,
        widths: bundle.config.clone(),
        format_version: FORMAT_VERSION,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint archive is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Loads a bundle and the frame count it was trained with.
pub fn load(path: &Path) -> Result<(ModelBundle, usize)> {
    let side = fs::read_to_string(sidecar_path(path))?;
    let sidecar: Sidecar =
        serde_json::from_str(&side).map_err(|e| Error::Format(format!("checkpoint sidecar: {e}")))?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", sidecar.format_version)));
    }
    let mut bundle = ModelBundle::new(sidecar.widths.clone(), 0)
        .map_err(|e| Error::Format(format!("checkpoint sidecar widths: {e}")))?;
    if bundle.feature_width() != sidecar.d {
        return Err(Error::Format("sidecar feature width disagrees with its widths".into()));
    }

    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint archive (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported archive version {version}")));
    }
    let count = r.u32()? as usize;
    if count != bundle.params.len() {
        return Err(Error::Format(format!("archive has {count} entries, model needs {}", bundle.params.len())));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let id = bundle
            .params
            .find(&name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        let target = bundle.params.get(id).dim();
        if target != (rows, cols) {
            return Err(Error::Format(format!("parameter {name} has shape {rows}x{cols}, expected {}x{}", target.0, target.1)));
        }
        let raw = r.take(rows * cols * 8)?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format(format!("parameter {name} has non-finite values")));
        }
        *bundle.params.get_mut(id) = Mat::from_shape_vec((rows, cols), values).expect("shape checked");
        seen[id.index()] = true;
    }
    if r.pos != bytes.len() || seen.iter().any(|s| !s) {
        return Err(Error::Format("checkpoint archive has trailing or missing entries".into()));
    }
    Ok((bundle, sidecar.frames))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let bundle = ModelBundle::new(ModelConfig::scaled(2, 3, 4), 9).unwrap();
        save(&bundle, 5, &path).unwrap();
        let (back, frames) = load(&path).unwrap();
        assert_eq!(frames, 5);
        assert_eq!(back.params, bundle.params);
    }

    #[test]
    fn corruption_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let bundle = ModelBundle::new(ModelConfig::scaled(2, 3, 4), 9).unwrap();
        save(&bundle, 5, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
        fs::write(&path, b"garbage").unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
    }
}
