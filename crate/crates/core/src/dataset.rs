//! Labeled tracks ready for the model: log-CQT features aligned with a
//! piano-roll target on the same frame clock.

use serde::{Deserialize, Serialize};

use crate::error::{AmtError, Result};
use crate::network::{Matrix, ModelConfig, Scalar};
use crate::notes::{rasterize, NoteTrack, PianoRoll, DEFAULT_PITCH_COUNT, DEFAULT_PITCH_MIN};
use crate::spectral::{cache_key, cqt, CacheStatus, CqtParams, Spectrogram, SpectrogramCache, DEFAULT_LOG_GAMMA};
use crate::synth::AudioBuffer;

/// How audio becomes model input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub cqt: CqtParams,
    pub log_gamma: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            cqt: CqtParams::default(),
            log_gamma: DEFAULT_LOG_GAMMA,
        }
    }
}

impl FeatureConfig {
    pub fn descriptor(&self) -> String {
        format!("{};log_gamma={:?}", self.cqt.descriptor(), self.log_gamma)
    }

    /// Log-compressed CQT of `audio`, read from or stored in `cache` when given.
    pub fn extract(&self, audio: &AudioBuffer, cache: Option<&SpectrogramCache>) -> Result<(Spectrogram, CacheStatus)> {
        let compute = || cqt(audio, &self.cqt)?.log_compressed(self.log_gamma);
        match cache {
            Some(cache) => {
                let (key, digest) = cache_key(audio, &self.descriptor());
                cache.get_or_compute(&key, &digest, compute)
            }
            None => Ok((compute()?, CacheStatus::Uncached)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTrack {
    pub id: String,
    pub sample_rate_hz: u32,
    pub notes: NoteTrack,
    pub features: Spectrogram,
    /// Target roll with exactly as many frames as `features`.
    pub roll: PianoRoll,
}

impl LabeledTrack {
    pub fn new(id: impl Into<String>, sample_rate_hz: u32, notes: NoteTrack, features: Spectrogram) -> Result<Self> {
        let roll = rasterize(&notes, features.frame_period_sec(), DEFAULT_PITCH_MIN, DEFAULT_PITCH_COUNT)?
            .roll
            .with_frames(features.frames());
        Ok(LabeledTrack {
            id: id.into(),
            sample_rate_hz,
            notes,
            features,
            roll,
        })
    }

    pub fn frames(&self) -> usize {
        self.features.frames()
    }

    /// Errors unless the model's input and output widths fit this track.
    pub fn check_model(&self, config: &ModelConfig) -> Result<()> {
        if config.input_bins != self.features.bins() || config.output_pitches != self.roll.pitch_count() {
            return Err(AmtError::Argument(format!(
                "track {} has {} bins and {} pitches; model expects {} and {}",
                self.id,
                self.features.bins(),
                self.roll.pitch_count(),
                config.input_bins,
                config.output_pitches
            )));
        }
        Ok(())
    }

    pub fn input_matrix<T: Scalar>(&self) -> Matrix<T> {
        window(self.features.values(), self.features.bins(), self.frames(), 0, self.frames())
    }

    /// Features for frames `start..start + len`, zero beyond the end.
    pub fn input_window<T: Scalar>(&self, start: usize, len: usize) -> Matrix<T> {
        window(self.features.values(), self.features.bins(), self.frames(), start, len)
    }

    /// Targets for frames `start..start + len`, zero beyond the end.
    pub fn target_window<T: Scalar>(&self, start: usize, len: usize) -> Matrix<T> {
        window(self.roll.values(), self.roll.pitch_count(), self.frames(), start, len)
    }
}

fn window<T: Scalar>(values: &[f32], width: usize, frames: usize, start: usize, len: usize) -> Matrix<T> {
    let mut m = Matrix::zeros(len, width);
    let end = (start + len).min(frames);
    if start < end {
        for (d, s) in m.data.iter_mut().zip(&values[start * width..end * width]) {
            *d = T::of(*s as f64);
        }
    }
    m
}
