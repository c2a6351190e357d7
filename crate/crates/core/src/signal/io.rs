//! Recording files and the cohort manifest.
//!
//! Recording layout (little-endian): magic `SGRC`, version `u16`, subject-id
//! length `u16` and bytes, label `u16`, channel count `u32`, sample count `u64`,
//! sample rate `f64`, then the samples channel-major as `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{default_channel_names, Recording};
use crate::error::{Error, Result};

pub const RECORDING_MAGIC: &[u8; 4] = b"SGRC";
pub const RECORDING_VERSION: u16 = 1;

pub fn encode_recording(rec: &Recording) -> Result<Vec<u8>> {
    rec.validate(None)?;
    let id = rec.subject_id.as_bytes();
    let id_len = u16::try_from(id.len()).map_err(|_| Error::Format("subject id too long".into()))?;
    let label = u16::try_from(rec.label).map_err(|_| Error::Format("label exceeds u16".into()))?;
    let n = u32::try_from(rec.n_channels()).map_err(|_| Error::Format("too many channels".into()))?;
    let len = rec.n_samples();
    let mut out = Vec::with_capacity(32 + id.len() + 8 * rec.n_channels() * len);
    out.extend_from_slice(RECORDING_MAGIC);
    out.extend_from_slice(&RECORDING_VERSION.to_le_bytes());
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&label.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&(len as u64).to_le_bytes());
    out.extend_from_slice(&rec.sample_rate_hz.to_le_bytes());
    for ch in &rec.samples {
        for v in ch {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Channel names are not part of the file; they default to `C0..`.
pub fn decode_recording(bytes: &[u8]) -> Result<Recording> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated recording".into()))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(4)? != RECORDING_MAGIC {
        return Err(Error::Format("bad recording magic".into()));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != RECORDING_VERSION {
        return Err(Error::Format(format!("unsupported recording version {version}")));
    }
    let id_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
    let subject_id = String::from_utf8(take(id_len)?.to_vec())
        .map_err(|_| Error::Format("subject id is not UTF-8".into()))?;
    let label = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
    let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let len = usize::try_from(u64::from_le_bytes(take(8)?.try_into().unwrap()))
        .map_err(|_| Error::Format("sample count overflows".into()))?;
    let sample_rate_hz = f64::from_le_bytes(take(8)?.try_into().unwrap());
    let total = n
        .checked_mul(len)
        .and_then(|v| v.checked_mul(8))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let payload = take(total)?;
    if pos != bytes.len() {
        return Err(Error::Format("trailing bytes after recording payload".into()));
    }
    let samples: Vec<Vec<f64>> = payload
        .chunks_exact(8 * len.max(1))
        .take(n)
        .map(|ch| ch.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
        .collect();
    let rec = Recording {
        subject_id,
        channels: default_channel_names(samples.len()),
        samples,
        sample_rate_hz,
        label,
    };
    rec.validate(None)?;
    Ok(rec)
}

pub fn save_recording(rec: &Recording, path: &Path) -> Result<()> {
    fs::write(path, encode_recording(rec)?)?;
    Ok(())
}

pub fn load_recording(path: &Path) -> Result<Recording> {
    decode_recording(&fs::read(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

/// Cohort index; `planted` maps a class label to its ground-truth edges `(i, j)`, `i < j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_classes: usize,
    pub sample_rate_hz: f64,
    pub channels: Vec<String>,
    pub subjects: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub planted: BTreeMap<String, Vec<(usize, usize)>>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::Usage(format!("no cohort manifest at {}", path.display())));
        }
        let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if m.channels.len() < 2 {
            return Err(Error::Validation("manifest lists fewer than 2 channels".into()));
        }
        Ok(m)
    }

    pub fn planted_for(&self, label: usize) -> Option<&[(usize, usize)]> {
        self.planted.get(&label.to_string()).map(Vec::as_slice)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_recording() -> Recording {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        Recording {
            subject_id: "subj-007".into(),
            channels: default_channel_names(4),
            samples: (0..4).map(|_| (0..100).map(|_| rng.gen_range(-50.0..50.0)).collect()).collect(),
            sample_rate_hz: 128.0,
            label: 1,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let rec = random_recording();
        let back = decode_recording(&encode_recording(&rec).unwrap()).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let bytes = encode_recording(&random_recording()).unwrap();
        assert!(matches!(decode_recording(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(decode_recording(&bytes[..10]), Err(Error::Format(_))));
    }

    #[test]
    fn single_channel_is_a_validation_error() {
        let mut bytes = encode_recording(&random_recording()).unwrap();
        // rewrite the channel count to 1 and drop the other channels' payload
        let count_at = 4 + 2 + 2 + "subj-007".len() + 2;
        bytes[count_at..count_at + 4].copy_from_slice(&1u32.to_le_bytes());
        let header = count_at + 4 + 8 + 8;
        bytes.truncate(header + 100 * 8);
        assert!(matches!(decode_recording(&bytes), Err(Error::Validation(_))));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_recording(&random_recording()).unwrap();
        bytes[3] = b'X';
        assert!(matches!(decode_recording(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn manifest_json_shape() {
        let m = Manifest {
            n_classes: 2,
            sample_rate_hz: 100.0,
            channels: default_channel_names(2),
            subjects: vec![ManifestEntry {
                subject_id: "s0".into(),
                path: "s0.sgrc".into(),
                label: 1,
                split: Split::Test,
            }],
            planted: BTreeMap::from([("1".to_string(), vec![(0, 1)])]),
        };
        let v: serde_json::Value = serde_json::to_value(&m).unwrap();
        assert_eq!(v["subjects"][0]["split"], "test");
        assert_eq!(v["planted"]["1"][0][1], 1);
        let back: Manifest = serde_json::from_value(v).unwrap();
        assert_eq!(back, m);
    }
}
