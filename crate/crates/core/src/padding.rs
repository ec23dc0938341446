//! Per-speaker padding sets and their on-disk registry.
//!
//! A `.udpp` file holds `UDPP`, a version byte, a u16 LE speaker-id length and
//! its UTF-8 bytes, the u64 LE model fingerprint, then for every ring a u16 LE
//! layer index followed by a UDTF block, until end of file.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::RecognizerModel;
use crate::tensor::udtf::{self, read_exact};
use crate::tensor::{Graph, Tensor, Var};

pub const MAGIC: &[u8; 4] = b"UDPP";
pub const VERSION: u8 = 1;
pub const EXTENSION: &str = "udpp";

/// Border rings for one speaker, one `[C, ring_len]` tensor per UDP layer.
#[derive(Clone, Debug, PartialEq)]
pub struct UserPadding {
    pub speaker_id: String,
    pub config_fingerprint: u64,
    pub rings: Vec<(usize, Tensor)>,
}

/// Zero rings for every UDP layer of `model`.
pub fn init_padding(model: &RecognizerModel, speaker_id: &str) -> UserPadding {
    let cfg = model.config();
    let inputs = cfg.layer_inputs().expect("model config was validated");
    let rings = cfg
        .udp_layers
        .iter()
        .map(|&l| {
            let (c, h, w) = inputs[l];
            let n = crate::tensor::ring_len(h, w, cfg.convs[l].padding);
            (l, Tensor::zeros(&[c, n]))
        })
        .collect();
    UserPadding {
        speaker_id: speaker_id.to_string(),
        config_fingerprint: model.fingerprint(),
        rings,
    }
}

impl UserPadding {
    pub fn param_count(&self) -> usize {
        self.rings.iter().map(|(_, r)| r.numel()).sum()
    }

    pub fn check_compatible(&self, model: &RecognizerModel) -> Result<()> {
        if self.config_fingerprint != model.fingerprint() {
            return Err(Error::Compatibility {
                expected: model.fingerprint(),
                found: self.config_fingerprint,
            });
        }
        let expect = model.config().ring_lens()?;
        let layers_ok = self.rings.len() == expect.len()
            && self
                .rings
                .iter()
                .zip(&expect)
                .all(|((l, r), (el, n))| l == el && r.numel() == *n);
        if !layers_ok {
            return Err(Error::Shape(format!(
                "padding for '{}' does not match the model's ring layout",
                self.speaker_id
            )));
        }
        Ok(())
    }

    /// Registers every ring on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.rings.iter().map(|(_, r)| g.param(r.clone())).collect()
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let id = self.speaker_id.as_bytes();
        let len = u16::try_from(id.len())
            .map_err(|_| Error::Format("speaker id longer than 65535 bytes".into()))?;
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(id)?;
        w.write_all(&self.config_fingerprint.to_le_bytes())?;
        for (l, r) in &self.rings {
            let l = u16::try_from(*l)
                .map_err(|_| Error::Format(format!("layer index {l} exceeds u16")))?;
            w.write_all(&l.to_le_bytes())?;
            udtf::write_tensor(w, r)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a padding file".into()));
        }
        let mut b = [0u8; 1];
        read_exact(r, &mut b)?;
        if b[0] != VERSION {
            return Err(Error::Format(format!(
                "unsupported padding version {}",
                b[0]
            )));
        }
        let mut n2 = [0u8; 2];
        read_exact(r, &mut n2)?;
        let mut id = vec![0u8; u16::from_le_bytes(n2) as usize];
        read_exact(r, &mut id)?;
        let speaker_id =
            String::from_utf8(id).map_err(|_| Error::Format("speaker id is not UTF-8".into()))?;
        let mut n8 = [0u8; 8];
        read_exact(r, &mut n8)?;
        let config_fingerprint = u64::from_le_bytes(n8);
        let mut rings = Vec::new();
        loop {
            let got = r.read(&mut n2[..1])?;
            if got == 0 {
                break;
            }
            read_exact(r, &mut n2[1..])?;
            rings.push((u16::from_le_bytes(n2) as usize, udtf::read_tensor(r)?));
        }
        Ok(UserPadding {
            speaker_id,
            config_fingerprint,
            rings,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = Vec::new();
        self.write(&mut v)?;
        Ok(v)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read(&mut &bytes[..])
    }
}

/// Writes `<dir>/<speaker_id>.udpp` atomically and returns its path.
pub fn save_padding(p: &UserPadding, dir: &Path) -> Result<PathBuf> {
    validate_speaker_id(&p.speaker_id)?;
    fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.{EXTENSION}", p.speaker_id));
    write_atomic(&path, &p.to_bytes()?)?;
    Ok(path)
}

pub fn load_padding(path: &Path) -> Result<UserPadding> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    UserPadding::from_bytes(&bytes)
}

/// Loads a padding and checks it against `model`.
pub fn load_padding_for(path: &Path, model: &RecognizerModel) -> Result<UserPadding> {
    let p = load_padding(path)?;
    p.check_compatible(model)?;
    Ok(p)
}

/// Temp file in the target directory, then rename over the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn validate_speaker_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(format!(
            "speaker id '{id}' must be non-empty [A-Za-z0-9_.-]"
        )))
    }
}

/// Flat directory of `<speaker_id>.udpp` files bound to one model fingerprint.
#[derive(Clone, Debug)]
pub struct PaddingRegistry {
    dir: PathBuf,
    fingerprint: u64,
}

impl PaddingRegistry {
    pub fn open(dir: &Path, model: &RecognizerModel) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(PaddingRegistry {
            dir: dir.to_path_buf(),
            fingerprint: model.fingerprint(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, speaker_id: &str) -> PathBuf {
        self.dir.join(format!("{speaker_id}.{EXTENSION}"))
    }

    /// Stores `p`, replacing any previous entry for the speaker.
    pub fn put(&self, p: &UserPadding) -> Result<PathBuf> {
        if p.config_fingerprint != self.fingerprint {
            return Err(Error::Compatibility {
                expected: self.fingerprint,
                found: p.config_fingerprint,
            });
        }
        save_padding(p, &self.dir)
    }

    /// `Ok(None)` when the speaker has no entry; mismatched entries are errors.
    pub fn get(&self, speaker_id: &str) -> Result<Option<UserPadding>> {
        validate_speaker_id(speaker_id)?;
        let path = self.path_for(speaker_id);
        if !path.exists() {
            return Ok(None);
        }
        let p = load_padding(&path)?;
        if p.config_fingerprint != self.fingerprint {
            return Err(Error::Compatibility {
                expected: self.fingerprint,
                found: p.config_fingerprint,
            });
        }
        if p.speaker_id != speaker_id {
            return Err(Error::Format(format!(
                "{} holds padding for '{}'",
                path.display(),
                p.speaker_id
            )));
        }
        Ok(Some(p))
    }

    /// Removes the speaker's entry; returns whether one existed.
    pub fn remove(&self, speaker_id: &str) -> Result<bool> {
        validate_speaker_id(speaker_id)?;
        match fs::remove_file(self.path_for(speaker_id)) {
            Ok(()) => Ok(true),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(e.into()),
        }
    }

    pub fn speakers(&self) -> Result<Vec<String>> {
        let mut out = BTreeMap::new();
        for entry in fs::read_dir(&self.dir)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some(EXTENSION) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    out.insert(stem.to_string(), ());
                }
            }
        }
        Ok(out.into_keys().collect())
    }

    /// Total bytes of all stored paddings.
    pub fn stored_bytes(&self) -> Result<u64> {
        let mut n = 0;
        for s in self.speakers()? {
            n += fs::metadata(self.path_for(&s))?.len();
        }
        Ok(n)
    }
}
