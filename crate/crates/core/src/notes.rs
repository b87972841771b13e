//! Symbolic note data: events, tracks, piano rolls and dataset splits.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AmtError, Result};

/// Lowest MIDI pitch of the default 88-key compass (A0).
pub const DEFAULT_PITCH_MIN: u8 = 21;
pub const DEFAULT_PITCH_COUNT: usize = 88;
/// Frame period of the label and metric grid.
pub const DEFAULT_FRAME_PERIOD_SEC: f64 = 0.01;
/// Velocity assigned when an annotation row does not carry one.
pub const DEFAULT_VELOCITY: u8 = 100;

/// Times closer than this many frames to a frame boundary snap onto it.
const GRID_SNAP_FRAMES: f64 = 1e-6;

/// One note: pitch, intensity, start and end.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    pub pitch: u8,
    pub velocity: u8,
    pub onset_sec: f64,
    pub offset_sec: f64,
}

impl NoteEvent {
    pub fn new(pitch: u8, velocity: u8, onset_sec: f64, offset_sec: f64) -> Result<Self> {
        let event = NoteEvent {
            pitch,
            velocity,
            onset_sec,
            offset_sec,
        };
        event.validate()?;
        Ok(event)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pitch > 127 {
            return Err(AmtError::Validation(format!("pitch {} out of range 0..=127", self.pitch)));
        }
        if !(1..=127).contains(&self.velocity) {
            return Err(AmtError::Validation(format!(
                "velocity {} out of range 1..=127",
                self.velocity
            )));
        }
        if !self.onset_sec.is_finite() || !self.offset_sec.is_finite() || self.onset_sec < 0.0 {
            return Err(AmtError::Validation(format!(
                "invalid note times {}..{}",
                self.onset_sec, self.offset_sec
            )));
        }
        if self.offset_sec <= self.onset_sec {
            return Err(AmtError::Validation(format!(
                "offset {} must be after onset {}",
                self.offset_sec, self.onset_sec
            )));
        }
        Ok(())
    }

    pub fn duration_sec(&self) -> f64 {
        self.offset_sec - self.onset_sec
    }

    /// Fundamental frequency in Hz (equal temperament, A4 = 440 Hz).
    pub fn frequency_hz(&self) -> f64 {
        midi_to_hz(self.pitch as f64)
    }

    fn sort_key(&self, other: &Self) -> std::cmp::Ordering {
        self.onset_sec
            .total_cmp(&other.onset_sec)
            .then(self.pitch.cmp(&other.pitch))
            .then(self.offset_sec.total_cmp(&other.offset_sec))
            .then(self.velocity.cmp(&other.velocity))
    }
}

pub fn midi_to_hz(pitch: f64) -> f64 {
    440.0 * 2f64.powf((pitch - 69.0) / 12.0)
}

/// The labels of one recording, kept sorted by (onset, pitch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteTrack {
    id: String,
    events: Vec<NoteEvent>,
    duration_sec: f64,
}

impl NoteTrack {
    pub fn empty(id: impl Into<String>) -> Self {
        NoteTrack {
            id: id.into(),
            events: Vec::new(),
            duration_sec: 0.0,
        }
    }

    /// Builds a track, validating and sorting the events. The duration is
    /// raised to the last offset when it is shorter.
    pub fn new(id: impl Into<String>, mut events: Vec<NoteEvent>, duration_sec: f64) -> Result<Self> {
        for event in &events {
            event.validate()?;
        }
        events.sort_by(NoteEvent::sort_key);
        let last_offset = events.iter().map(|e| e.offset_sec).fold(0.0, f64::max);
        let duration_sec = if duration_sec.is_finite() { duration_sec.max(last_offset) } else { last_offset };
        Ok(NoteTrack {
            id: id.into(),
            events,
            duration_sec,
        })
    }

    pub fn from_events(id: impl Into<String>, events: Vec<NoteEvent>) -> Result<Self> {
        Self::new(id, events, 0.0)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    pub fn events(&self) -> &[NoteEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn duration_sec(&self) -> f64 {
        self.duration_sec
    }

    pub fn set_duration_sec(&mut self, duration_sec: f64) {
        self.duration_sec = duration_sec.max(self.max_offset_sec());
    }

    pub fn max_offset_sec(&self) -> f64 {
        self.events.iter().map(|e| e.offset_sec).fold(0.0, f64::max)
    }

    pub fn push(&mut self, event: NoteEvent) -> Result<()> {
        event.validate()?;
        let at = self
            .events
            .partition_point(|e| e.sort_key(&event) != std::cmp::Ordering::Greater);
        self.events.insert(at, event);
        self.duration_sec = self.duration_sec.max(event.offset_sec);
        Ok(())
    }

    /// Returns a copy with every note moved by `delta_sec`.
    pub fn shifted(&self, delta_sec: f64) -> Result<Self> {
        let events = self
            .events
            .iter()
            .map(|e| NoteEvent::new(e.pitch, e.velocity, e.onset_sec + delta_sec, e.offset_sec + delta_sec))
            .collect::<Result<Vec<_>>>()?;
        NoteTrack::new(self.id.clone(), events, self.duration_sec + delta_sec)
    }

    /// Serializes as note CSV (`onset_sec,offset_sec,pitch,velocity`).
    ///
    /// Times are written with Rust's shortest round-trip formatting, so
    /// parsing the output reproduces the track exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("onset_sec,offset_sec,pitch,velocity\n");
        for e in &self.events {
            let _ = writeln!(out, "{:?},{:?},{},{}", e.onset_sec, e.offset_sec, e.pitch, e.velocity);
        }
        out
    }
}

/// Parses note CSV text: `onset,offset,pitch[,velocity]` per line, comma or
/// whitespace separated, `#` comments, and an optional non-numeric header.
pub fn parse_note_csv(id: impl Into<String>, text: &str) -> Result<NoteTrack> {
    let mut events = Vec::new();
    let mut seen_data = false;
    for (index, raw) in text.lines().enumerate() {
        let line_no = index + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let first_numeric = fields.first().map(|f| f.parse::<f64>().is_ok()).unwrap_or(false);
        if !seen_data && !first_numeric {
            // header row
            seen_data = true;
            continue;
        }
        seen_data = true;
        if fields.len() < 3 || fields.len() > 4 {
            return Err(AmtError::parse(
                line_no,
                format!("expected 3 or 4 fields, found {}", fields.len()),
            ));
        }
        let number = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| AmtError::parse(line_no, format!("malformed {what} {s:?}")))
        };
        let onset = number(fields[0], "onset")?;
        let offset = number(fields[1], "offset")?;
        let pitch = parse_int(fields[2], line_no, "pitch", 0, 127)?;
        let velocity = match fields.get(3) {
            Some(v) => parse_int(v, line_no, "velocity", 1, 127)?,
            None => DEFAULT_VELOCITY,
        };
        let event = NoteEvent {
            pitch,
            velocity,
            onset_sec: onset,
            offset_sec: offset,
        };
        event.validate().map_err(|e| match e {
            AmtError::Validation(msg) => AmtError::Validation(format!("line {line_no}: {msg}")),
            other => other,
        })?;
        events.push(event);
    }
    NoteTrack::from_events(id, events)
}

fn parse_int(s: &str, line: usize, what: &str, lo: i64, hi: i64) -> Result<u8> {
    // MAPS files sometimes write integers as "60.0"
    let value = match s.parse::<i64>() {
        Ok(v) => v,
        Err(_) => {
            let f = s
                .parse::<f64>()
                .map_err(|_| AmtError::parse(line, format!("malformed {what} {s:?}")))?;
            if f.fract() != 0.0 {
                return Err(AmtError::parse(line, format!("{what} {s:?} is not an integer")));
            }
            f as i64
        }
    };
    if value < lo || value > hi {
        return Err(AmtError::Validation(format!(
            "line {line}: {what} {value} out of range {lo}..={hi}"
        )));
    }
    Ok(value as u8)
}

/// A frames × pitches activation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PianoRoll {
    frame_period_sec: f64,
    pitch_min: u8,
    pitch_count: usize,
    frames: usize,
    values: Vec<f32>,
}

impl PianoRoll {
    pub fn zeros(frames: usize, frame_period_sec: f64, pitch_min: u8, pitch_count: usize) -> Self {
        PianoRoll {
            frame_period_sec,
            pitch_min,
            pitch_count,
            frames,
            values: vec![0.0; frames * pitch_count],
        }
    }

    /// Wraps a row-major frames × pitches matrix; every value must lie in [0, 1].
    pub fn from_values(
        values: Vec<f32>,
        frames: usize,
        frame_period_sec: f64,
        pitch_min: u8,
        pitch_count: usize,
    ) -> Result<Self> {
        if values.len() != frames * pitch_count {
            return Err(AmtError::Argument(format!(
                "roll has {} values, expected {frames}x{pitch_count}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(AmtError::Argument(format!("roll value {v} outside [0, 1]")));
        }
        Ok(PianoRoll {
            frame_period_sec,
            pitch_min,
            pitch_count,
            frames,
            values,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn pitch_count(&self) -> usize {
        self.pitch_count
    }

    pub fn pitch_min(&self) -> u8 {
        self.pitch_min
    }

    pub fn frame_period_sec(&self) -> f64 {
        self.frame_period_sec
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, frame: usize, pitch_index: usize) -> f32 {
        self.values[frame * self.pitch_count + pitch_index]
    }

    pub fn set(&mut self, frame: usize, pitch_index: usize, value: f32) {
        self.values[frame * self.pitch_count + pitch_index] = value.clamp(0.0, 1.0);
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        &self.values[frame * self.pitch_count..(frame + 1) * self.pitch_count]
    }

    pub fn active_count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.5).count()
    }

    /// Returns a copy with exactly `frames` rows, zero-padding or cropping at the end.
    pub fn with_frames(&self, frames: usize) -> PianoRoll {
        let mut values = vec![0.0; frames * self.pitch_count];
        let keep = frames.min(self.frames) * self.pitch_count;
        values[..keep].copy_from_slice(&self.values[..keep]);
        PianoRoll {
            frames,
            values,
            ..*self
        }
    }

    /// Binary roll of cells strictly above `threshold`.
    pub fn binarize(&self, threshold: f32) -> PianoRoll {
        PianoRoll {
            values: self
                .values
                .iter()
                .map(|&v| if v > threshold { 1.0 } else { 0.0 })
                .collect(),
            ..*self
        }
    }
}

/// Index of the first frame whose start time is at or after `t`.
pub(crate) fn frame_at_or_after(t: f64, frame_period_sec: f64) -> usize {
    let x = t / frame_period_sec - GRID_SNAP_FRAMES;
    if x <= 0.0 {
        0
    } else {
        x.ceil() as usize
    }
}

/// Result of [`rasterize`]: the roll plus how many events fell outside the pitch range.
#[derive(Debug, Clone, PartialEq)]
pub struct Rasterized {
    pub roll: PianoRoll,
    pub dropped_out_of_range: usize,
}

/// Rasterizes a track onto a frame grid. A frame is active for a note when
/// the frame's start time lies in `[onset, offset)`.
pub fn rasterize(
    track: &NoteTrack,
    frame_period_sec: f64,
    pitch_min: u8,
    pitch_count: usize,
) -> Result<Rasterized> {
    if !(frame_period_sec > 0.0) || !frame_period_sec.is_finite() {
        return Err(AmtError::Argument(format!(
            "frame period must be positive, got {frame_period_sec}"
        )));
    }
    let frames = frame_at_or_after(track.duration_sec(), frame_period_sec);
    let mut roll = PianoRoll::zeros(frames, frame_period_sec, pitch_min, pitch_count);
    let mut dropped = 0;
    for e in track.events() {
        let column = e.pitch as i32 - pitch_min as i32;
        if column < 0 || column as usize >= pitch_count {
            dropped += 1;
            continue;
        }
        let start = frame_at_or_after(e.onset_sec, frame_period_sec);
        let end = frame_at_or_after(e.offset_sec, frame_period_sec).min(frames);
        for f in start..end {
            roll.values[f * pitch_count + column as usize] = 1.0;
        }
    }
    Ok(Rasterized {
        roll,
        dropped_out_of_range: dropped,
    })
}

/// Disjoint train / validation / test track-id sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn all_ids(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Dataset-wise union: each part is the union of the corresponding parts.
    pub fn union<'a>(splits: impl IntoIterator<Item = &'a SplitAssignment>, seed: u64) -> SplitAssignment {
        let mut train = BTreeSet::new();
        let mut valid = BTreeSet::new();
        let mut test = BTreeSet::new();
        for s in splits {
            train.extend(s.train.iter().cloned());
            valid.extend(s.valid.iter().cloned());
            test.extend(s.test.iter().cloned());
        }
        SplitAssignment {
            train: train.into_iter().collect(),
            valid: valid.into_iter().collect(),
            test: test.into_iter().collect(),
            seed,
        }
    }
}

/// Split sizes for `n` tracks: ⌊0.8n⌋ / ⌊0.1n⌋ / rest, adjusted so that all
/// three parts are non-empty for small `n`.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize)> {
    if n < 3 {
        return Err(AmtError::Argument(format!(
            "need at least 3 tracks to split, got {n}"
        )));
    }
    let valid = (n / 10).max(1);
    let train = (n * 8 / 10).min(n - valid - 1);
    Ok((train, valid, n - train - valid))
}

/// Deterministic 80/10/10 split.
///
/// Ids are deduplicated and sorted lexicographically, then shuffled with a
/// Fisher-Yates pass driven by `ChaCha8Rng::seed_from_u64(seed)` (swap index
/// drawn with `gen_range(0..=i)` for `i` from `n-1` down to 1), then sliced.
pub fn split_tracks<I, S>(ids: I, seed: u64) -> Result<SplitAssignment>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut ids: Vec<String> = ids
        .into_iter()
        .map(Into::into)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (n_train, n_valid, _) = split_sizes(ids.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..ids.len()).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let test = ids.split_off(n_train + n_valid);
    let valid = ids.split_off(n_train);
    Ok(SplitAssignment {
        train: ids,
        valid,
        test,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn csv_single_row() {
        let t = parse_note_csv("t", "0.0,0.5,60,80").unwrap();
        assert_eq!(t.events(), &[NoteEvent::new(60, 80, 0.0, 0.5).unwrap()]);
    }

    #[test]
    fn csv_empty_body() {
        assert!(parse_note_csv("t", "").unwrap().is_empty());
        assert!(parse_note_csv("t", "onset offset pitch\n# nothing\n").unwrap().is_empty());
    }

    #[test]
    fn csv_zero_duration_is_rejected() {
        let err = parse_note_csv("t", "0.5,0.5,60").unwrap_err();
        assert!(matches!(err, AmtError::Validation(_)), "{err}");
    }

    #[test]
    fn csv_defaults_velocity_and_sorts() {
        let t = parse_note_csv("t", "OnsetTime\tOffsetTime\tMidiPitch\n1.0\t2.0\t64\n0.5 1.5 60\n").unwrap();
        assert_eq!(t.events()[0].pitch, 60);
        assert_eq!(t.events()[0].velocity, DEFAULT_VELOCITY);
        assert_eq!(t.events()[1].onset_sec, 1.0);
    }

    #[test]
    fn csv_malformed_number_reports_line() {
        match parse_note_csv("t", "0,1,60\n0.2,abc,61\n") {
            Err(AmtError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn push_keeps_order() {
        let mut t = NoteTrack::empty("t");
        t.push(NoteEvent::new(64, 90, 1.0, 2.0).unwrap()).unwrap();
        t.push(NoteEvent::new(60, 90, 1.0, 2.0).unwrap()).unwrap();
        t.push(NoteEvent::new(70, 90, 0.0, 3.0).unwrap()).unwrap();
        let pitches: Vec<u8> = t.events().iter().map(|e| e.pitch).collect();
        assert_eq!(pitches, vec![70, 60, 64]);
        assert_eq!(t.duration_sec(), 3.0);
    }

    #[test]
    fn rasterize_single_note() {
        let t = NoteTrack::from_events("t", vec![NoteEvent::new(60, 100, 0.0, 0.05).unwrap()]).unwrap();
        let r = rasterize(&t, 0.01, 21, 88).unwrap().roll;
        assert_eq!(r.frames(), 5);
        for f in 0..5 {
            for p in 0..88 {
                let expected = if p == 39 { 1.0 } else { 0.0 };
                assert_eq!(r.get(f, p), expected, "frame {f} pitch {p}");
            }
        }
    }

    #[test]
    fn rasterize_empty_and_overlap() {
        let empty = NoteTrack::new("e", vec![], 0.1).unwrap();
        let r = rasterize(&empty, 0.01, 21, 88).unwrap().roll;
        assert_eq!(r.frames(), 10);
        assert_eq!(r.active_count(), 0);

        let t = NoteTrack::from_events(
            "t",
            vec![
                NoteEvent::new(60, 100, 0.0, 0.05).unwrap(),
                NoteEvent::new(60, 100, 0.03, 0.08).unwrap(),
            ],
        )
        .unwrap();
        let r = rasterize(&t, 0.01, 21, 88).unwrap().roll;
        assert!(r.values().iter().all(|&v| v == 0.0 || v == 1.0));
        let col: Vec<f32> = (0..r.frames()).map(|f| r.get(f, 39)).collect();
        assert_eq!(col, vec![1.0; 8]);
    }

    #[test]
    fn rasterize_drops_out_of_range() {
        let t = NoteTrack::from_events("t", vec![NoteEvent::new(10, 100, 0.0, 0.05).unwrap()]).unwrap();
        let r = rasterize(&t, 0.01, 21, 88).unwrap();
        assert_eq!(r.dropped_out_of_range, 1);
        assert_eq!(r.roll.active_count(), 0);
        assert!(rasterize(&t, 0.0, 21, 88).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ids: Vec<String> = (0..10).map(|i| format!("id{i}")).collect();
        let a = split_tracks(ids.clone(), 7).unwrap();
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (8, 1, 1));
        assert_eq!(a, split_tracks(ids, 7).unwrap());

        let ids: Vec<String> = (0..100).map(|i| format!("id{i}")).collect();
        let b = split_tracks(ids, 1).unwrap();
        assert_eq!((b.train.len(), b.valid.len(), b.test.len()), (80, 10, 10));

        assert!(split_tracks(vec!["a", "b"], 0).is_err());
        assert_eq!(split_sizes(3).unwrap(), (1, 1, 1));
    }

    fn arb_event() -> impl Strategy<Value = NoteEvent> {
        (21u8..=108, 1u8..=127, 0.0f64..5.0, 0.001f64..2.0).prop_map(|(p, v, on, d)| NoteEvent {
            pitch: p,
            velocity: v,
            onset_sec: on,
            offset_sec: on + d,
        })
    }

    proptest! {
        #[test]
        fn split_partitions(n in 3usize..60, seed in any::<u64>()) {
            let ids: Vec<String> = (0..n).map(|i| format!("track-{i:03}")).collect();
            let s = split_tracks(ids.clone(), seed).unwrap();
            let mut all: Vec<String> = s.all_ids().cloned().collect();
            prop_assert_eq!(all.len(), n);
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), n);
            prop_assert!(!s.train.is_empty() && !s.valid.is_empty() && !s.test.is_empty());
        }

        #[test]
        fn csv_round_trip_preserves_roll(events in prop::collection::vec(arb_event(), 0..20)) {
            let track = NoteTrack::from_events("t", events).unwrap();
            let reparsed = parse_note_csv("t", &track.to_csv()).unwrap();
            prop_assert_eq!(reparsed.events(), track.events());
            let a = rasterize(&track, 0.01, 21, 88).unwrap().roll;
            let b = rasterize(&reparsed, 0.01, 21, 88).unwrap().roll;
            prop_assert_eq!(a, b);
        }

        #[test]
        fn runs_never_exceed_events(events in prop::collection::vec(arb_event(), 0..20)) {
            let track = NoteTrack::from_events("t", events).unwrap();
            let roll = rasterize(&track, 0.01, 21, 88).unwrap().roll;
            for p in 0..88 {
                let mut runs = 0;
                let mut prev = 0.0;
                for f in 0..roll.frames() {
                    let v = roll.get(f, p);
                    if v == 1.0 && prev == 0.0 {
                        runs += 1;
                    }
                    prev = v;
                }
                let n = track.events().iter().filter(|e| e.pitch as usize == p + 21).count();
                prop_assert!(runs <= n);
            }
        }
    }
}
