//! Checkpoint container.
//!
//! Layout: `UDCK`, version byte, u32 LE JSON length, compact JSON of the
//! config, u64 LE fingerprint, u32 LE tensor count, then one UDTF block per
//! tensor in declared order.

use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, RecognizerModel};
use crate::error::{Error, Result};
use crate::tensor::udtf::{self, read_exact};

pub const MAGIC: &[u8; 4] = b"UDCK";
pub const VERSION: u8 = 1;

pub fn write_model<W: Write>(w: &mut W, model: &RecognizerModel) -> Result<()> {
    let json = model.config().canonical_json();
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(json.as_bytes())?;
    w.write_all(&model.fingerprint().to_le_bytes())?;
    let tensors = model.state_tensors();
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        udtf::write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<RecognizerModel> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    if b[0] != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            b[0]
        )));
    }
    let mut n4 = [0u8; 4];
    read_exact(r, &mut n4)?;
    let mut json = vec![0u8; u32::from_le_bytes(n4) as usize];
    read_exact(r, &mut json)?;
    let config: ModelConfig = serde_json::from_slice(&json)
        .map_err(|e| Error::Format(format!("bad config header: {e}")))?;
    let mut n8 = [0u8; 8];
    read_exact(r, &mut n8)?;
    let stored = u64::from_le_bytes(n8);
    if stored != super::fnv1a64(&json) {
        return Err(Error::Format(
            "config fingerprint does not match header".into(),
        ));
    }
    read_exact(r, &mut n4)?;
    let count = u32::from_le_bytes(n4) as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        tensors.push(udtf::read_tensor(r)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let model = RecognizerModel::from_parts(config, tensors)?;
    if model.fingerprint() != stored {
        return Err(Error::Format(
            "config does not round-trip canonically".into(),
        ));
    }
    Ok(model)
}

pub fn to_bytes(model: &RecognizerModel) -> Vec<u8> {
    let mut v = Vec::new();
    write_model(&mut v, model).expect("writing to memory");
    v
}

pub fn from_bytes(bytes: &[u8]) -> Result<RecognizerModel> {
    read_model(&mut &bytes[..])
}

pub fn save(model: &RecognizerModel, path: &Path) -> Result<()> {
    crate::padding::write_atomic(path, &to_bytes(model))
}

pub fn load(path: &Path) -> Result<RecognizerModel> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    from_bytes(&bytes)
}
