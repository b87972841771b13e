//! Time-frequency analysis: STFT, mel spectrogram, constant-Q transform and
//! an on-disk cache for computed spectrograms.

mod cache;
mod cqt;
mod stft;

pub use cache::{cache_key, CacheStatus, SpectrogramCache, CACHE_MAGIC, CACHE_VERSION};
pub use cqt::{cqt, cqt_bin_lengths, CqtParams};
pub use stft::{hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, stft, StftParams, Window};

use crate::error::{AmtError, Result};

/// Default dynamic-range compression factor for model input.
pub const DEFAULT_LOG_GAMMA: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scale {
    Linear,
    /// `ln(1 + gamma * magnitude)`
    Log { gamma: f64 },
}

/// A frames × bins magnitude matrix on a fixed frame clock.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frame_period_sec: f64,
    bin_center_freqs_hz: Vec<f64>,
    frames: usize,
    values: Vec<f32>,
    scale: Scale,
}

impl Spectrogram {
    pub fn new(
        frame_period_sec: f64,
        bin_center_freqs_hz: Vec<f64>,
        frames: usize,
        values: Vec<f32>,
        scale: Scale,
    ) -> Result<Self> {
        if values.len() != frames * bin_center_freqs_hz.len() {
            return Err(AmtError::Argument(format!(
                "spectrogram has {} values, expected {frames}x{}",
                values.len(),
                bin_center_freqs_hz.len()
            )));
        }
        if bin_center_freqs_hz.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(AmtError::Argument("bin center frequencies must be strictly ascending".into()));
        }
        if scale == Scale::Linear && values.iter().any(|v| !(*v >= 0.0)) {
            return Err(AmtError::Argument("linear magnitudes must be non-negative".into()));
        }
        Ok(Spectrogram {
            frame_period_sec,
            bin_center_freqs_hz,
            frames,
            values,
            scale,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bin_center_freqs_hz.len()
    }

    pub fn frame_period_sec(&self) -> f64 {
        self.frame_period_sec
    }

    pub fn bin_center_freqs_hz(&self) -> &[f64] {
        &self.bin_center_freqs_hz
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn scale(&self) -> Scale {
        self.scale
    }

    pub fn get(&self, frame: usize, bin: usize) -> f32 {
        self.values[frame * self.bins() + bin]
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        let b = self.bins();
        &self.values[frame * b..(frame + 1) * b]
    }

    /// Index of the largest bin in a frame.
    pub fn argmax_bin(&self, frame: usize) -> usize {
        self.row(frame)
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    }

    /// Applies `ln(1 + gamma * x)` to a linear spectrogram.
    pub fn log_compressed(&self, gamma: f64) -> Result<Spectrogram> {
        if self.scale != Scale::Linear {
            return Err(AmtError::Argument("spectrogram is already log-compressed".into()));
        }
        Ok(Spectrogram {
            values: self
                .values
                .iter()
                .map(|&v| (gamma * v as f64).ln_1p() as f32)
                .collect(),
            scale: Scale::Log { gamma },
            bin_center_freqs_hz: self.bin_center_freqs_hz.clone(),
            ..*self
        })
    }
}
