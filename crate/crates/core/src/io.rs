//! File helpers shared by every on-disk format.
//!
//! All reads go through [`read_text`], which feeds the thread-local
//! [`AccessAudit`] so tests can prove which files a code path touched.

use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

thread_local! {
    static AUDIT: RefCell<Option<Vec<PathBuf>>> = const { RefCell::new(None) };
}

/// Records every file opened through [`read_text`] on the current thread
/// while the guard is alive.
pub struct AccessAudit {
    _private: (),
}

impl AccessAudit {
    pub fn start() -> Self {
        AUDIT.with(|a| *a.borrow_mut() = Some(Vec::new()));
        AccessAudit { _private: () }
    }

    pub fn opened(&self) -> Vec<PathBuf> {
        AUDIT.with(|a| a.borrow().clone().unwrap_or_default())
    }
}

impl Drop for AccessAudit {
    fn drop(&mut self) {
        AUDIT.with(|a| *a.borrow_mut() = None);
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    AUDIT.with(|a| {
        if let Some(log) = a.borrow_mut().as_mut() {
            log.push(path.to_path_buf());
        }
    });
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes through a sibling temp file and renames, so readers never observe
/// a half-written artifact.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|source| Error::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|source| Error::Io {
        path: tmp.clone(),
        source,
    })?;
    fs::rename(&tmp, path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// 17 significant digits; parses back to the identical `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn parse_f64(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok()
}

/// First 8 bytes of SHA-256, little endian. Stable across platforms and
/// toolchain versions, unlike `std::hash`.
pub fn stable_hash64(s: &str) -> u64 {
    let digest = Sha256::digest(s.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Per-stage seed: rerunning one stage never perturbs another's stream.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(stage.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Non-empty, non-comment lines of a text file.
pub(crate) fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_round_trips() {
        for x in [0.0, -0.0, 1.0 / 3.0, 1e-300, 123456789.123456789, f64::MAX] {
            let s = fmt_f64(x);
            assert_eq!(parse_f64(&s).unwrap().to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn derived_seeds_differ_per_stage() {
        assert_ne!(derive_seed(1, "nmf"), derive_seed(1, "fda"));
        assert_eq!(derive_seed(1, "nmf"), derive_seed(1, "nmf"));
        assert_ne!(derive_seed(1, "nmf"), derive_seed(2, "nmf"));
    }

    #[test]
    fn audit_records_reads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, "hi").unwrap();
        let audit = AccessAudit::start();
        assert_eq!(read_text(&p).unwrap(), "hi");
        assert_eq!(audit.opened(), vec![p]);
    }
}
