//! Deterministic additive synthesizer.
//!
//! Each note is a sum of phase-zero harmonics of its fundamental, shaped by
//! a linear ADSR envelope and a velocity gain `(v/127)^exponent`. Harmonics
//! at or above Nyquist are dropped.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AmtError, Result};
use crate::notes::{NoteEvent, NoteTrack};

pub const DEFAULT_SAMPLE_RATE_HZ: u32 = 16_000;
/// Peak level after normalization.
pub const NORMALIZED_PEAK: f32 = 0.9;

/// Mono audio at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    pub sample_rate_hz: u32,
    pub samples: Vec<f32>,
}

impl AudioBuffer {
    pub fn new(sample_rate_hz: u32, samples: Vec<f32>) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(AmtError::Argument("sample rate must be positive".into()));
        }
        Ok(AudioBuffer {
            sample_rate_hz,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_sec(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Little-endian bytes of the samples, used for content hashing.
    pub fn sample_bytes(&self) -> Vec<u8> {
        self.samples.iter().flat_map(|s| s.to_le_bytes()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adsr {
    pub attack_sec: f64,
    pub decay_sec: f64,
    pub sustain_level: f64,
    pub release_sec: f64,
}

impl Adsr {
    /// Envelope level `tau` seconds after the onset of a note held for `held` seconds.
    pub fn level(&self, tau: f64, held: f64) -> f64 {
        if tau < held {
            self.held_level(tau)
        } else if self.release_sec > 0.0 && tau < held + self.release_sec {
            self.held_level(held) * (1.0 - (tau - held) / self.release_sec)
        } else {
            0.0
        }
    }

    fn held_level(&self, tau: f64) -> f64 {
        if tau < self.attack_sec {
            tau / self.attack_sec
        } else if tau < self.attack_sec + self.decay_sec {
            1.0 - (1.0 - self.sustain_level) * (tau - self.attack_sec) / self.decay_sec
        } else {
            self.sustain_level
        }
    }
}

/// Parametric instrument: harmonic amplitudes, envelope, velocity curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimbreProfile {
    pub name: String,
    /// Amplitude of harmonic k+1 at index k.
    pub harmonic_amplitudes: Vec<f64>,
    pub adsr: Adsr,
    #[serde(default = "default_velocity_exponent")]
    pub velocity_exponent: f64,
}

fn default_velocity_exponent() -> f64 {
    1.0
}

impl TimbreProfile {
    pub fn validate(&self) -> Result<()> {
        if self.harmonic_amplitudes.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(AmtError::Config(format!(
                "timbre {:?}: harmonic amplitudes must be finite and non-negative",
                self.name
            )));
        }
        if !self.harmonic_amplitudes.iter().any(|&a| a > 0.0) {
            return Err(AmtError::Config(format!(
                "timbre {:?} has no non-zero harmonic",
                self.name
            )));
        }
        let a = &self.adsr;
        if [a.attack_sec, a.decay_sec, a.release_sec].iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(AmtError::Config(format!("timbre {:?}: ADSR times must be >= 0", self.name)));
        }
        if !(0.0..=1.0).contains(&a.sustain_level) {
            return Err(AmtError::Config(format!(
                "timbre {:?}: sustain level must lie in [0, 1]",
                self.name
            )));
        }
        if !(self.velocity_exponent.is_finite() && self.velocity_exponent > 0.0) {
            return Err(AmtError::Config(format!(
                "timbre {:?}: velocity exponent must be positive",
                self.name
            )));
        }
        Ok(())
    }

    pub fn velocity_gain(&self, velocity: u8) -> f64 {
        (velocity as f64 / 127.0).powf(self.velocity_exponent)
    }

    /// Parses the key-value (TOML) profile format.
    pub fn from_text(text: &str) -> Result<Self> {
        let profile: TimbreProfile =
            toml::from_str(text).map_err(|e| AmtError::Config(format!("timbre profile: {e}")))?;
        profile.validate()?;
        Ok(profile)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("timbre profile serializes")
    }
}

/// The built-in profiles: `piano-like` and `guitar-like` for training and
/// `organ-like`, held out for zero-shot evaluation.
pub fn builtin_timbres() -> Vec<TimbreProfile> {
    vec![
        TimbreProfile {
            name: "piano-like".into(),
            harmonic_amplitudes: vec![1.0, 0.55, 0.3, 0.2, 0.12, 0.08, 0.05, 0.03],
            adsr: Adsr {
                attack_sec: 0.005,
                decay_sec: 1.2,
                sustain_level: 0.3,
                release_sec: 0.08,
            },
            velocity_exponent: 1.0,
        },
        TimbreProfile {
            name: "guitar-like".into(),
            harmonic_amplitudes: vec![0.8, 1.0, 0.75, 0.6, 0.5, 0.4, 0.3, 0.22, 0.15, 0.1],
            adsr: Adsr {
                attack_sec: 0.002,
                decay_sec: 0.45,
                sustain_level: 0.2,
                release_sec: 0.05,
            },
            velocity_exponent: 1.0,
        },
        TimbreProfile {
            name: "organ-like".into(),
            harmonic_amplitudes: vec![1.0, 0.7, 0.45, 0.4, 0.0, 0.3, 0.0, 0.25],
            adsr: Adsr {
                attack_sec: 0.03,
                decay_sec: 0.0,
                sustain_level: 1.0,
                release_sec: 0.03,
            },
            velocity_exponent: 1.0,
        },
    ]
}

pub fn builtin_timbre(name: &str) -> Option<TimbreProfile> {
    builtin_timbres().into_iter().find(|t| t.name == name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub timbre: TimbreProfile,
    pub sample_rate_hz: u32,
    pub peak_normalize: bool,
    /// Amplitude of additive uniform white noise; must stay below 0.1.
    pub noise_floor_amplitude: f64,
    pub noise_seed: u64,
}

impl SynthConfig {
    pub fn new(timbre: TimbreProfile) -> Self {
        SynthConfig {
            timbre,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            peak_normalize: true,
            noise_floor_amplitude: 0.0,
            noise_seed: 0,
        }
    }

    /// No normalization and no noise: output is the raw additive sum.
    pub fn raw(timbre: TimbreProfile) -> Self {
        SynthConfig {
            peak_normalize: false,
            ..Self::new(timbre)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.timbre.validate()?;
        if self.sample_rate_hz == 0 {
            return Err(AmtError::Config("sample rate must be positive".into()));
        }
        if !(self.noise_floor_amplitude >= 0.0 && self.noise_floor_amplitude < 0.1) {
            return Err(AmtError::Config(format!(
                "noise floor {} outside [0, 0.1)",
                self.noise_floor_amplitude
            )));
        }
        Ok(())
    }
}

/// Renders a track to audio. Output length is `ceil((max offset + release) * rate)`.
pub fn render(track: &NoteTrack, config: &SynthConfig) -> Result<AudioBuffer> {
    config.validate()?;
    let rate = config.sample_rate_hz as f64;
    let timbre = &config.timbre;
    let len = if track.is_empty() {
        0
    } else {
        ((track.max_offset_sec() + timbre.adsr.release_sec) * rate - 1e-9).ceil() as usize
    };
    let mut acc = vec![0.0f64; len];
    // notes render independently, then sum in track order
    let voices: Vec<(usize, Vec<f64>)> = track
        .events()
        .par_iter()
        .map(|e| render_note(e, timbre, rate, len))
        .collect();
    for (start, voice) in voices {
        for (dst, v) in acc[start..].iter_mut().zip(&voice) {
            *dst += v;
        }
    }
    if config.noise_floor_amplitude > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(config.noise_seed);
        let a = config.noise_floor_amplitude;
        for s in &mut acc {
            *s += rng.gen_range(-a..=a);
        }
    }
    if config.peak_normalize {
        let peak = acc.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if peak > 0.0 {
            let gain = NORMALIZED_PEAK as f64 / peak;
            acc.iter_mut().for_each(|s| *s *= gain);
        }
    }
    AudioBuffer::new(config.sample_rate_hz, acc.into_iter().map(|s| s as f32).collect())
}

fn render_note(e: &NoteEvent, timbre: &TimbreProfile, rate: f64, len: usize) -> (usize, Vec<f64>) {
    let start = ((e.onset_sec * rate).round() as usize).min(len);
    let held_samples = ((e.offset_sec * rate).round() as usize).saturating_sub(start);
    let held = held_samples as f64 / rate;
    let release = (timbre.adsr.release_sec * rate).round() as usize;
    let n = (held_samples + release).min(len - start);
    let gain = timbre.velocity_gain(e.velocity);
    let f0 = e.frequency_hz();
    let nyquist = rate / 2.0;
    let partials: Vec<(f64, f64)> = timbre
        .harmonic_amplitudes
        .iter()
        .enumerate()
        .filter(|&(k, &a)| a > 0.0 && (k + 1) as f64 * f0 < nyquist)
        .map(|(k, &a)| (a, 2.0 * PI * (k + 1) as f64 * f0 / rate))
        .collect();
    let mut out = vec![0.0; n];
    for (m, s) in out.iter_mut().enumerate() {
        let env = timbre.adsr.level(m as f64 / rate, held);
        if env == 0.0 {
            continue;
        }
        let tone: f64 = partials.iter().map(|&(a, w)| a * (w * m as f64).sin()).sum();
        *s = gain * env * tone;
    }
    (start, out)
}
