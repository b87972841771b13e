//! Frame probabilities to note events by per-pitch thresholding.

use serde::{Deserialize, Serialize};

use crate::error::{AmtError, Result};
use crate::metrics::{note_metrics, MatchMode, MatchTolerances, PrfScore};
use crate::notes::{rasterize, NoteEvent, NoteTrack, PianoRoll, DEFAULT_VELOCITY};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// A cell is active when its probability is strictly above this.
    pub threshold: f32,
    pub min_duration_frames: usize,
    /// Inactive runs of at most this many frames between two active runs are filled.
    pub gap_tolerance_frames: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            threshold: 0.5,
            min_duration_frames: 2,
            gap_tolerance_frames: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(AmtError::Config(format!(
                "decode threshold must lie in (0, 1), got {}",
                self.threshold
            )));
        }
        if self.min_duration_frames == 0 {
            return Err(AmtError::Config("min_duration_frames must be at least 1".into()));
        }
        Ok(())
    }
}

/// Active runs `(start, end_inclusive)` of one pitch column after gap filling.
fn column_runs(active: &[bool], gap_tolerance: usize) -> Vec<(usize, usize)> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut t = 0;
    while t < active.len() {
        if !active[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < active.len() && active[t] {
            t += 1;
        }
        match runs.last_mut() {
            Some(last) if start - last.1 - 1 <= gap_tolerance => last.1 = t - 1,
            _ => runs.push((start, t - 1)),
        }
    }
    runs
}

/// Decodes a probability grid into notes with onset `start · period` and
/// offset `(end + 1) · period`, all at the default velocity.
pub fn decode_frames(probabilities: &PianoRoll, config: &DecodeConfig) -> Result<NoteTrack> {
    config.validate()?;
    let fp = probabilities.frame_period_sec();
    let frames = probabilities.frames();
    let mut events = Vec::new();
    let mut column = vec![false; frames];
    for p in 0..probabilities.pitch_count() {
        let pitch = probabilities.pitch_min() as usize + p;
        if pitch > 127 {
            break;
        }
        for (t, a) in column.iter_mut().enumerate() {
            *a = probabilities.get(t, p) > config.threshold;
        }
        for (start, end) in column_runs(&column, config.gap_tolerance_frames) {
            if end + 1 - start >= config.min_duration_frames {
                events.push(NoteEvent::new(
                    pitch as u8,
                    DEFAULT_VELOCITY,
                    start as f64 * fp,
                    (end + 1) as f64 * fp,
                )?);
            }
        }
    }
    NoteTrack::new("decoded", events, frames as f64 * fp)
}

/// Rasterizes `track` on the default grid, decodes it back with default
/// settings and scores the result against the original (onset mode).
pub fn roundtrip_check(track: &NoteTrack) -> Result<PrfScore> {
    let config = DecodeConfig::default();
    let roll = rasterize(
        track,
        crate::notes::DEFAULT_FRAME_PERIOD_SEC,
        crate::notes::DEFAULT_PITCH_MIN,
        crate::notes::DEFAULT_PITCH_COUNT,
    )?
    .roll;
    let decoded = decode_frames(&roll, &config)?;
    Ok(note_metrics(track, &decoded, &MatchTolerances::default(), MatchMode::Onset))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runs_and_gaps() {
        let a = [true, true, false, true, false, false, true];
        assert_eq!(column_runs(&a, 0), vec![(0, 1), (3, 3), (6, 6)]);
        assert_eq!(column_runs(&a, 1), vec![(0, 3), (6, 6)]);
        assert_eq!(column_runs(&a, 2), vec![(0, 6)]);
        assert!(column_runs(&[false; 4], 3).is_empty());
    }
}
