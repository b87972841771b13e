//! Content-addressed spectrogram cache.
//!
//! One file per key: `AMTC`, version (u32), frames (u64), bins (u64),
//! scale tag (u8) and gamma (f64), frame period (f64), a 32-byte parameter
//! digest, bin center frequencies (f64 each), the f32 matrix, and a trailing
//! SHA-256 of everything before it. All integers and floats little-endian.
//! Writes go to a temporary file that is renamed into place.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};

use super::{Scale, Spectrogram};
use crate::error::{AmtError, Result};
use crate::synth::AudioBuffer;

pub const CACHE_MAGIC: &[u8; 4] = b"AMTC";
pub const CACHE_VERSION: u32 = 1;

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Cache key: SHA-256 over the sample rate, the samples and the parameter
/// descriptor. Returns (key hex, parameter digest).
pub fn cache_key(audio: &AudioBuffer, params_descriptor: &str) -> (String, [u8; 32]) {
    let params_digest: [u8; 32] = Sha256::digest(params_descriptor.as_bytes()).into();
    let mut h = Sha256::new();
    h.update(audio.sample_rate_hz.to_le_bytes());
    h.update((audio.samples.len() as u64).to_le_bytes());
    for s in &audio.samples {
        h.update(s.to_le_bytes());
    }
    h.update(params_digest);
    (hex(&h.finalize()), params_digest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Computed,
    /// An entry existed but failed validation and was replaced.
    Recomputed,
    /// The cache could not be written; the value was computed and returned anyway.
    Uncached,
}

#[derive(Debug, Clone)]
pub struct SpectrogramCache {
    dir: PathBuf,
}

impl SpectrogramCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        SpectrogramCache { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.amtc"))
    }

    pub fn get_or_compute<F>(
        &self,
        key: &str,
        params_digest: &[u8; 32],
        compute: F,
    ) -> Result<(Spectrogram, CacheStatus)>
    where
        F: FnOnce() -> Result<Spectrogram>,
    {
        let path = self.path_for(key);
        let existed = path.exists();
        if existed {
            if let Ok(bytes) = fs::read(&path) {
                if let Ok(spec) = decode(&bytes, params_digest) {
                    return Ok((spec, CacheStatus::Hit));
                }
            }
            log::warn!("cache entry {} is corrupt; recomputing", path.display());
        }
        let spec = compute()?;
        let bytes = encode(&spec, params_digest);
        // the returned value must equal what a later hit would decode
        let spec = decode(&bytes, params_digest)?;
        match self.store(&path, &bytes) {
            Ok(()) => Ok((spec, if existed { CacheStatus::Recomputed } else { CacheStatus::Computed })),
            Err(e) => {
                log::warn!("could not write cache entry {}: {e}", path.display());
                Ok((spec, CacheStatus::Uncached))
            }
        }
    }

    fn store(&self, path: &Path, bytes: &[u8]) -> std::io::Result<()> {
        fs::create_dir_all(&self.dir)?;
        let tmp = self.dir.join(format!(
            ".{}.{}.{}.tmp",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("entry"),
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path).inspect_err(|_| {
            let _ = fs::remove_file(&tmp);
        })
    }
}

pub(crate) fn encode(spec: &Spectrogram, params_digest: &[u8; 32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(96 + spec.bins() * 8 + spec.values().len() * 4);
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(spec.frames() as u64).to_le_bytes());
    out.extend_from_slice(&(spec.bins() as u64).to_le_bytes());
    let (tag, gamma) = match spec.scale() {
        Scale::Linear => (0u8, 0.0),
        Scale::Log { gamma } => (1u8, gamma),
    };
    out.push(tag);
    out.extend_from_slice(&gamma.to_le_bytes());
    out.extend_from_slice(&spec.frame_period_sec().to_le_bytes());
    out.extend_from_slice(params_digest);
    for f in spec.bin_center_freqs_hz() {
        out.extend_from_slice(&f.to_le_bytes());
    }
    for v in spec.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let checksum = Sha256::digest(&out);
    out.extend_from_slice(&checksum);
    out
}

pub(crate) fn decode(bytes: &[u8], params_digest: &[u8; 32]) -> Result<Spectrogram> {
    let bad = |m: &str| AmtError::Format(format!("cache entry: {m}"));
    const FIXED: usize = 4 + 4 + 8 + 8 + 1 + 8 + 8 + 32;
    if bytes.len() < FIXED + 32 {
        return Err(bad("truncated"));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(bad("checksum mismatch"));
    }
    if &body[0..4] != CACHE_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(body[i..i + 4].try_into().unwrap());
    let u64_at = |i: usize| u64::from_le_bytes(body[i..i + 8].try_into().unwrap());
    let f64_at = |i: usize| f64::from_le_bytes(body[i..i + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != CACHE_VERSION {
        return Err(AmtError::UnsupportedVersion {
            found: version,
            expected: CACHE_VERSION,
        });
    }
    let frames = u64_at(8) as usize;
    let bins = u64_at(16) as usize;
    let scale = match body[24] {
        0 => Scale::Linear,
        1 => Scale::Log { gamma: f64_at(25) },
        _ => return Err(bad("unknown scale tag")),
    };
    let frame_period = f64_at(33);
    if &body[41..73] != params_digest {
        return Err(bad("parameter digest mismatch"));
    }
    let expected = FIXED
        .checked_add(bins.checked_mul(8).ok_or_else(|| bad("size overflow"))?)
        .and_then(|n| n.checked_add(frames.checked_mul(bins)?.checked_mul(4)?))
        .ok_or_else(|| bad("size overflow"))?;
    if body.len() != expected {
        return Err(bad("length mismatch"));
    }
    let freqs = body[FIXED..FIXED + bins * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = body[FIXED + bins * 8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Spectrogram::new(frame_period, freqs, frames, values, scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{cqt, CqtParams};
    use std::cell::Cell;

    fn audio() -> AudioBuffer {
        AudioBuffer::new(16000, (0..4000).map(|i| ((i as f32) * 0.05).sin() * 0.3).collect()).unwrap()
    }

    #[test]
    fn second_call_is_a_hit() {
        let dir = tempfile::tempdir().unwrap();
        let cache = SpectrogramCache::new(dir.path());
        let params = CqtParams::default();
        let (key, digest) = cache_key(&audio(), &params.descriptor());
        let calls = Cell::new(0);
        let compute = || {
            calls.set(calls.get() + 1);
            cqt(&audio(), &params)
        };
        let (a, s1) = cache.get_or_compute(&key, &digest, compute).unwrap();
        let (b, s2) = cache.get_or_compute(&key, &digest, compute).unwrap();
        assert_eq!((s1, s2), (CacheStatus::Computed, CacheStatus::Hit));
        assert_eq!(calls.get(), 1);
        assert_eq!(a, b);
        let bits = |s: &Spectrogram| s.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn truncated_entry_is_recomputed() {
        let dir = tempfile::tempdir().unwrap();
        let cache = SpectrogramCache::new(dir.path());
        let params = CqtParams::default();
        let (key, digest) = cache_key(&audio(), &params.descriptor());
        let (a, _) = cache.get_or_compute(&key, &digest, || cqt(&audio(), &params)).unwrap();
        let path = cache.path_for(&key);
        let full = fs::read(&path).unwrap();
        fs::write(&path, &full[..full.len() / 2]).unwrap();
        let (b, status) = cache.get_or_compute(&key, &digest, || cqt(&audio(), &params)).unwrap();
        assert_eq!(status, CacheStatus::Recomputed);
        assert_eq!(a, b);
        assert_eq!(fs::read(&path).unwrap(), full);
    }

    #[test]
    fn different_hop_different_key() {
        let dir = tempfile::tempdir().unwrap();
        let cache = SpectrogramCache::new(dir.path());
        let p1 = CqtParams::default();
        let p2 = CqtParams { hop_samples: 320, ..p1 };
        let (k1, d1) = cache_key(&audio(), &p1.descriptor());
        let (k2, d2) = cache_key(&audio(), &p2.descriptor());
        assert_ne!(k1, k2);
        cache.get_or_compute(&k1, &d1, || cqt(&audio(), &p1)).unwrap();
        cache.get_or_compute(&k2, &d2, || cqt(&audio(), &p2)).unwrap();
        assert!(cache.path_for(&k1).exists() && cache.path_for(&k2).exists());
    }

    #[test]
    fn unwritable_dir_still_computes() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let cache = SpectrogramCache::new(blocker.join("sub"));
        let params = CqtParams::default();
        let (key, digest) = cache_key(&audio(), &params.descriptor());
        let (_, status) = cache.get_or_compute(&key, &digest, || cqt(&audio(), &params)).unwrap();
        assert_eq!(status, CacheStatus::Uncached);
    }
}
