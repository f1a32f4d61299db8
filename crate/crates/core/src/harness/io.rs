//! Artifact files: atomic writes and the `model.bin` container.
//!
//! `model.bin` layout, all integers little-endian:
//!
//! ```text
//! magic  b"FLMB"
//! u32    format version (1)
//! u32    entry count
//! entry: u32 name length, UTF-8 name, u64 d, d x f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ParamVector;

pub const MODEL_MAGIC: &[u8; 4] = b"FLMB";
pub const MODEL_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact");
    let tmp = dir.join(format!(".{name}.tmp-{}-{:?}", std::process::id(), std::thread::current().id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_model_bin<W: Write>(entries: &[(String, ParamVector)], mut w: W) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, params) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(params.len() as u64).to_le_bytes())?;
        for v in params.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| Error::Input(format!("model.bin truncated: {e}")))?;
    Ok(buf)
}

pub fn read_model_bin<R: Read>(mut r: R) -> Result<Vec<(String, ParamVector)>> {
    if &read_array::<4, _>(&mut r)? != MODEL_MAGIC {
        return Err(Error::Input("model.bin: bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut r)?);
    if version != MODEL_VERSION {
        return Err(Error::Input(format!("model.bin: unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_array(&mut r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Input(format!("model.bin: entry name: {e}")))?;
        let d = u64::from_le_bytes(read_array(&mut r)?) as usize;
        let values = (0..d).map(|_| read_array(&mut r).map(f64::from_le_bytes)).collect::<Result<Vec<f64>>>()?;
        out.push((name, ParamVector::new(values)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Input("model.bin: trailing bytes".into()));
    }
    Ok(out)
}
