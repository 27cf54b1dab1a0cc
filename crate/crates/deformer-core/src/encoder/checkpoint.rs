//! Single-file weight checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DFWT" | version u32 | config block | fingerprint [u8; 32]
//! | param scalars as f32, canonical order
//! ```
//!
//! The config block is [`ModelConfig::to_bytes`]. Parameters are stored in
//! f32 — the working precision the fingerprint is defined over — so a
//! save/load cycle preserves the fingerprint exactly. The stored fingerprint
//! is recomputed on load and must match, which catches truncated or
//! corrupted files before they can poison a run.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::{EncoderWeights, ModelConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFWT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes weights to `path`, writing a temporary sibling first and
/// renaming so readers never observe a half-written file.
pub fn save_checkpoint(w: &EncoderWeights, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&w.config.to_bytes());
    buf.extend_from_slice(&w.fingerprint());
    for t in w.params() {
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint back, verifying magic, version, and fingerprint.
pub fn load_checkpoint(path: &Path) -> Result<EncoderWeights> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor { bytes: &bytes, at: 0, path };

    let magic = cur.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "{}: not a weight checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let config = ModelConfig::from_bytes(cur.take(ModelConfig::BYTE_LEN)?)?;
    config.validate()?;
    let stored_fp: [u8; 32] = cur.take(32)?.try_into().unwrap();

    let mut w = EncoderWeights::init(&config)?;
    let expected = w.param_scalar_count();
    let remaining = bytes.len() - cur.at;
    if remaining != expected * 4 {
        return Err(Error::Format(format!(
            "{}: expected {} parameter scalars, file holds {}",
            path.display(),
            expected,
            remaining / 4
        )));
    }
    for t in w.params_mut() {
        for v in t.data_mut() {
            let raw: [u8; 4] = cur.take(4)?.try_into().unwrap();
            *v = f32::from_le_bytes(raw) as f64;
        }
    }

    let actual = w.fingerprint();
    if actual != stored_fp {
        return Err(Error::Format(format!(
            "{}: fingerprint mismatch — file is corrupt or was edited",
            path.display()
        )));
    }
    Ok(w)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated at byte {}",
                self.path.display(),
                self.at
            )));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_weights_and_fingerprint() {
        let w = EncoderWeights::init(&ModelConfig::tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dfwt");
        save_checkpoint(&w, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.fingerprint(), w.fingerprint());
        assert_eq!(back.config, w.config);
        // Values themselves round through f32.
        for (a, b) in w.params().iter().zip(back.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let w = EncoderWeights::init(&ModelConfig::tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dfwt");
        save_checkpoint(&w, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 7);
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn flipped_parameter_byte_fails_the_fingerprint_check() {
        let w = EncoderWeights::init(&ModelConfig::tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.dfwt");
        save_checkpoint(&w, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("fingerprint"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.dfwt");
        std::fs::write(&path, b"NOPE____________").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
