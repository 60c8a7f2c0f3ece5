//! Versioned binary checkpoints.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset        | size      | field                                   |
//! |---------------|-----------|-----------------------------------------|
//! | 0             | 6         | magic `b"VMDNN\0"`                      |
//! | 6             | 2         | format version (`u16`, currently 1)     |
//! | 8             | 4         | config blob length `L` (`u32`)          |
//! | 12            | L         | network configuration as UTF-8 JSON     |
//! | 12 + L        | 8         | parameter count `N` (`u64`)             |
//! | 20 + L        | 8 N       | parameters, `f64`, canonical order      |
//! | 20 + L + 8 N  | 8         | CRC-64/XZ of every preceding byte       |

use std::fs;
use std::io::Write;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use super::{ParameterSet, VmdnnConfig};
use crate::error::{Result, VmdnnError};

pub const MAGIC: &[u8; 6] = b"VMDNN\0";
pub const FORMAT_VERSION: u16 = 1;

const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

pub fn checksum(bytes: &[u8]) -> u64 {
    CHECKSUM.checksum(bytes)
}

pub fn encode_checkpoint(cfg: &VmdnnConfig, params: &ParameterSet) -> Result<Vec<u8>> {
    let blob = serde_json::to_vec(cfg)?;
    let blob_len = u32::try_from(blob.len()).map_err(|_| VmdnnError::Format("config blob too large".into()))?;
    let mut out = Vec::with_capacity(28 + blob.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&blob_len.to_le_bytes());
    out.extend_from_slice(&blob);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in params.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(VmdnnConfig, ParameterSet)> {
    let truncated = |needed: usize| VmdnnError::Truncated {
        needed,
        found: bytes.len(),
    };
    if bytes.len() < MAGIC.len() {
        return Err(truncated(MAGIC.len()));
    }
    if &bytes[..6] != MAGIC {
        return Err(VmdnnError::Format("bad magic bytes".into()));
    }
    if bytes.len() < 12 {
        return Err(truncated(12));
    }
    let version = u16::from_le_bytes([bytes[6], bytes[7]]);
    if version != FORMAT_VERSION {
        return Err(VmdnnError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let blob_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4-byte slice")) as usize;
    let count_at = 12 + blob_len;
    if bytes.len() < count_at + 8 {
        return Err(truncated(count_at + 8));
    }
    let count = read_u64(bytes, count_at);
    let needed = usize::try_from(count)
        .ok()
        .and_then(|c| c.checked_mul(8))
        .and_then(|n| n.checked_add(count_at + 16))
        .ok_or_else(|| VmdnnError::Format(format!("parameter count {count} is implausible")))?;
    if bytes.len() < needed {
        return Err(truncated(needed));
    }
    if bytes.len() > needed {
        return Err(VmdnnError::Format(format!(
            "{} trailing bytes after checksum",
            bytes.len() - needed
        )));
    }
    let stored = read_u64(bytes, needed - 8);
    let computed = checksum(&bytes[..needed - 8]);
    if stored != computed {
        return Err(VmdnnError::Checksum { stored, computed });
    }
    let cfg: VmdnnConfig = serde_json::from_slice(&bytes[12..count_at])
        .map_err(|e| VmdnnError::Format(format!("config blob: {e}")))?;
    let values = bytes[count_at + 8..needed - 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let params = ParameterSet::from_flat(&cfg, values)
        .map_err(|e| VmdnnError::Format(format!("parameters disagree with stored config: {e}")))?;
    Ok((cfg, params))
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(cfg: &VmdnnConfig, params: &ParameterSet, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(cfg, params)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(VmdnnConfig, ParameterSet)> {
    if !path.exists() {
        return Err(VmdnnError::MissingArtifact(path.to_path_buf()));
    }
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::init_parameters;

    fn sample() -> (VmdnnConfig, ParameterSet) {
        let cfg = VmdnnConfig::paper();
        let params = init_parameters(&cfg, 42, 1.0).unwrap();
        (cfg, params)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let (cfg, params) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&cfg, &params, &path).unwrap();
        let (cfg2, params2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(params2.len(), 17_946);
        for (a, b) in params.as_slice().iter().zip(params2.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let (cfg, params) = sample();
        let mut bytes = encode_checkpoint(&cfg, &params).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint(&bytes), Err(VmdnnError::Format(_))));
    }

    #[test]
    fn truncation_is_reported() {
        let (cfg, params) = sample();
        let bytes = encode_checkpoint(&cfg, &params).unwrap();
        for cut in [3, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut]), Err(VmdnnError::Truncated { .. })),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn version_and_checksum_errors_are_distinct() {
        let (cfg, params) = sample();
        let bytes = encode_checkpoint(&cfg, &params).unwrap();
        let mut v = bytes.clone();
        v[6] = 9;
        assert!(matches!(decode_checkpoint(&v), Err(VmdnnError::Version { found: 9, .. })));
        let mut c = bytes.clone();
        let mid = c.len() - 100;
        c[mid] ^= 0x01;
        assert!(matches!(decode_checkpoint(&c), Err(VmdnnError::Checksum { .. })));
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        let err = load_checkpoint(Path::new("/nonexistent/model.ckpt")).unwrap_err();
        assert!(matches!(err, VmdnnError::MissingArtifact(_)));
    }
}
