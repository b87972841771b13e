use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{Scale, Spectrogram};
use crate::error::{AmtError, Result};
use crate::synth::AudioBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Window {
    #[default]
    Hann,
    Rectangular,
}

impl Window {
    /// Periodic taper of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Rectangular => vec![1.0; n],
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftParams {
    pub window_len: usize,
    pub hop: usize,
    pub window: Window,
}

/// Magnitude STFT. Frame `t` starts at sample `t * hop`; frames continue
/// until every sample is covered, zero-padding the tail.
pub fn stft(audio: &AudioBuffer, params: StftParams) -> Result<Spectrogram> {
    let StftParams { window_len, hop, window } = params;
    if hop == 0 || hop > window_len || window_len > audio.len() {
        return Err(AmtError::Argument(format!(
            "need 0 < hop ({hop}) <= window_len ({window_len}) <= samples ({})",
            audio.len()
        )));
    }
    let frames = 1 + (audio.len() - window_len).div_ceil(hop);
    let bins = window_len / 2 + 1;
    let taper = window.coefficients(window_len);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(window_len);
    let mut buf = vec![Complex::new(0.0, 0.0); window_len];
    let mut values = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let start = t * hop;
        for (n, slot) in buf.iter_mut().enumerate() {
            let x = audio.samples.get(start + n).copied().unwrap_or(0.0) as f64;
            *slot = Complex::new(x * taper[n], 0.0);
        }
        fft.process(&mut buf);
        values.extend(buf[..bins].iter().map(|c| c.norm() as f32));
    }
    let rate = audio.sample_rate_hz as f64;
    let freqs = (0..bins).map(|k| k as f64 * rate / window_len as f64).collect();
    Spectrogram::new(hop as f64 / rate, freqs, frames, values, Scale::Linear)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filters over `n_fft_bins` STFT bins. Returns
/// (center frequencies, row-major n_mels × n_fft_bins weights).
///
/// A filter too narrow to cover any STFT bin gets unit weight on the bin
/// nearest its center so that every row has positive mass.
pub fn mel_filterbank(
    sample_rate_hz: u32,
    window_len: usize,
    n_mels: usize,
    f_lo: f64,
    f_hi: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n_fft_bins = window_len / 2 + 1;
    let nyquist = sample_rate_hz as f64 / 2.0;
    if !(f_lo >= 0.0 && f_lo < f_hi && f_hi <= nyquist) {
        return Err(AmtError::Argument(format!(
            "mel range must satisfy 0 <= f_lo < f_hi <= {nyquist}, got {f_lo}..{f_hi}"
        )));
    }
    if n_mels == 0 || n_mels > n_fft_bins {
        return Err(AmtError::Argument(format!(
            "n_mels {n_mels} must be in 1..={n_fft_bins}"
        )));
    }
    let (m_lo, m_hi) = (hz_to_mel(f_lo), hz_to_mel(f_hi));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate_hz as f64 / window_len as f64;
    let mut weights = vec![0.0; n_mels * n_fft_bins];
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut weights[m * n_fft_bins..(m + 1) * n_fft_bins];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            *w = if f > lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f < hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
        }
        if row.iter().sum::<f64>() <= 0.0 {
            let nearest = ((center / bin_hz).round() as usize).min(n_fft_bins - 1);
            row[nearest] = 1.0;
        }
    }
    Ok((edges[1..=n_mels].to_vec(), weights))
}

/// Mel spectrogram: triangular filterbank applied to STFT magnitudes.
pub fn mel_spectrogram(
    audio: &AudioBuffer,
    params: StftParams,
    n_mels: usize,
    f_lo: f64,
    f_hi: f64,
) -> Result<Spectrogram> {
    let (centers, weights) = mel_filterbank(audio.sample_rate_hz, params.window_len, n_mels, f_lo, f_hi)?;
    let spec = stft(audio, params)?;
    let n_fft_bins = spec.bins();
    let mut values = Vec::with_capacity(spec.frames() * n_mels);
    for t in 0..spec.frames() {
        let row = spec.row(t);
        for m in 0..n_mels {
            let w = &weights[m * n_fft_bins..(m + 1) * n_fft_bins];
            let v: f64 = w.iter().zip(row).map(|(w, &x)| w * x as f64).sum();
            values.push(v as f32);
        }
    }
    Spectrogram::new(spec.frame_period_sec(), centers, spec.frames(), values, Scale::Linear)
}
