//! Constant-Q transform, computed directly from its definition.
//!
//! For bin `k` with center `f_k = f_min * 2^(k/b)` the kernel length is
//! `N_k = ceil(Q * rate / f_k)` with `Q = 1 / (2^(1/b) - 1)`, and
//!
//! ```text
//! X_k(t) = (1/N_k) * | sum_{n < N_k} w_k[n] x[t*hop - N_k/2 + n] exp(-2πi Q n / N_k) |
//! ```
//!
//! Samples outside the signal are taken by reflection about the end samples.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Scale, Spectrogram, Window};
use crate::error::{AmtError, Result};
use crate::synth::AudioBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CqtParams {
    pub f_min_hz: f64,
    pub bins_per_octave: u32,
    pub n_bins: usize,
    pub hop_samples: usize,
    #[serde(with = "window_name")]
    pub window: Window,
}

impl Default for CqtParams {
    fn default() -> Self {
        CqtParams {
            f_min_hz: 32.70,
            bins_per_octave: 12,
            n_bins: 88,
            hop_samples: 160,
            window: Window::Hann,
        }
    }
}

impl CqtParams {
    pub fn q(&self) -> f64 {
        1.0 / (2f64.powf(1.0 / self.bins_per_octave as f64) - 1.0)
    }

    pub fn center_freqs(&self) -> Vec<f64> {
        let b = self.bins_per_octave as f64;
        (0..self.n_bins)
            .map(|k| self.f_min_hz * 2f64.powf(k as f64 / b))
            .collect()
    }

    pub fn frame_period_sec(&self, sample_rate_hz: u32) -> f64 {
        self.hop_samples as f64 / sample_rate_hz as f64
    }

    pub fn validate(&self, sample_rate_hz: u32) -> Result<()> {
        if !(self.f_min_hz > 0.0) || self.bins_per_octave == 0 || self.n_bins == 0 || self.hop_samples == 0 {
            return Err(AmtError::Config(format!("invalid CQT parameters {self:?}")));
        }
        let top = self.center_freqs()[self.n_bins - 1];
        let edge = top * (1.0 + 1.0 / (2.0 * self.q()));
        let nyquist = sample_rate_hz as f64 / 2.0;
        if edge >= nyquist {
            return Err(AmtError::Config(format!(
                "top CQT bin at {top:.1} Hz reaches {edge:.1} Hz, above Nyquist {nyquist} Hz"
            )));
        }
        Ok(())
    }

    /// Stable textual description used in cache keys.
    pub fn descriptor(&self) -> String {
        format!(
            "cqt:f_min={:?};b={};n_bins={};hop={};window={}",
            self.f_min_hz,
            self.bins_per_octave,
            self.n_bins,
            self.hop_samples,
            window_name::name(self.window)
        )
    }
}

mod window_name {
    use super::Window;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn name(w: Window) -> &'static str {
        match w {
            Window::Hann => "hann",
            Window::Rectangular => "rectangular",
        }
    }

    pub fn serialize<S: Serializer>(w: &Window, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(name(*w))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Window, D::Error> {
        let s = String::deserialize(d)?;
        match s.as_str() {
            "hann" => Ok(Window::Hann),
            "rectangular" => Ok(Window::Rectangular),
            other => Err(serde::de::Error::custom(format!("unknown window {other:?}"))),
        }
    }
}

/// Kernel length `N_k` for every bin.
pub fn cqt_bin_lengths(params: &CqtParams, sample_rate_hz: u32) -> Vec<usize> {
    let q = params.q();
    params
        .center_freqs()
        .iter()
        .map(|f| (q * sample_rate_hz as f64 / f).ceil() as usize)
        .collect()
}

struct Kernel {
    len: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

fn kernels(params: &CqtParams, sample_rate_hz: u32) -> Vec<Kernel> {
    let q = params.q();
    cqt_bin_lengths(params, sample_rate_hz)
        .into_iter()
        .map(|len| {
            let w = params.window.coefficients(len);
            let scale = 1.0 / len as f64;
            let (re, im) = (0..len)
                .map(|n| {
                    let phase = -2.0 * PI * q * n as f64 / len as f64;
                    (w[n] * scale * phase.cos(), w[n] * scale * phase.sin())
                })
                .unzip();
            Kernel { len, re, im }
        })
        .collect()
}

/// Reflects an out-of-range index into `0..len` (mirror about the end samples).
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Linear-magnitude CQT with frames centred at `t * hop` for
/// `t in 0..=len/hop`.
pub fn cqt(audio: &AudioBuffer, params: &CqtParams) -> Result<Spectrogram> {
    params.validate(audio.sample_rate_hz)?;
    let kernels = kernels(params, audio.sample_rate_hz);
    let len = audio.len();
    let frames = if len == 0 { 0 } else { 1 + len / params.hop_samples };
    let pad = kernels.iter().map(|k| k.len / 2 + 1).max().unwrap_or(0);
    let padded: Vec<f64> = if len == 0 {
        Vec::new()
    } else {
        (-(pad as isize)..(len + pad) as isize)
            .map(|i| audio.samples[reflect(i, len)] as f64)
            .collect()
    };
    let n_bins = params.n_bins;
    let mut values = vec![0.0f32; frames * n_bins];
    values
        .par_chunks_mut(n_bins.max(1))
        .enumerate()
        .for_each(|(t, row)| {
            let center = pad + t * params.hop_samples;
            for (out, k) in row.iter_mut().zip(&kernels) {
                let start = center - k.len / 2;
                let x = &padded[start..start + k.len];
                let (mut re, mut im) = (0.0, 0.0);
                for ((&xv, &kr), &ki) in x.iter().zip(&k.re).zip(&k.im) {
                    re += xv * kr;
                    im += xv * ki;
                }
                *out = (re * re + im * im).sqrt() as f32;
            }
        });
    Spectrogram::new(
        params.frame_period_sec(audio.sample_rate_hz),
        params.center_freqs(),
        frames,
        values,
        Scale::Linear,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, seconds: f64) -> AudioBuffer {
        let n = (seconds * 16000.0) as usize;
        AudioBuffer::new(
            16000,
            (0..n).map(|i| (2.0 * PI * freq * i as f64 / 16000.0).sin() as f32).collect(),
        )
        .unwrap()
    }

    #[test]
    fn q_for_twelve_bins_per_octave() {
        let q = CqtParams::default().q();
        assert!((q - 16.8172).abs() < 1e-4, "{q}");
    }

    #[test]
    fn geometric_spacing() {
        let f = CqtParams::default().center_freqs();
        let r = 2f64.powf(1.0 / 12.0);
        for w in f.windows(2) {
            assert!(((w[1] / w[0]) / r - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_quality() {
        let p = CqtParams::default();
        let q = p.q();
        for (f, n) in p.center_freqs().iter().zip(cqt_bin_lengths(&p, 16000)) {
            let realized = f * n as f64 / 16000.0;
            assert!(realized >= q && realized < q + f / 16000.0 + 1e-12);
        }
    }

    #[test]
    fn a440_peaks_at_nearest_bin() {
        let p = CqtParams::default();
        let spec = cqt(&tone(440.0, 1.5), &p).unwrap();
        let expected = p
            .center_freqs()
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 440.0).abs().total_cmp(&(b.1 - 440.0).abs()))
            .unwrap()
            .0;
        assert_eq!(expected, 45);
        let edge = cqt_bin_lengths(&p, 16000)[0] / p.hop_samples + 1;
        for t in edge..spec.frames() - edge {
            assert_eq!(spec.argmax_bin(t), expected, "frame {t}");
        }
    }

    #[test]
    fn zero_signal_and_nyquist_guard() {
        let spec = cqt(&AudioBuffer::new(16000, vec![0.0; 3200]).unwrap(), &CqtParams::default()).unwrap();
        assert_eq!(spec.frames(), 21);
        assert!(spec.values().iter().all(|&v| v == 0.0));
        let p = CqtParams { n_bins: 120, ..CqtParams::default() };
        assert!(matches!(p.validate(16000), Err(AmtError::Config(_))));
    }

    #[test]
    fn reflection_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-4, 5), 4);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(9, 5), 1);
        assert_eq!(reflect(-7, 5), 1);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn semitone_shift_moves_argmax_by_one() {
        let p = CqtParams::default();
        let f = p.center_freqs();
        for k in [20usize, 40, 60] {
            let a = cqt(&tone(f[k], 1.2), &p).unwrap();
            let b = cqt(&tone(f[k + 1], 1.2), &p).unwrap();
            let mid = a.frames() / 2;
            assert_eq!(b.argmax_bin(mid), a.argmax_bin(mid) + 1);
        }
    }
}
