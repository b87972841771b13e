//! Standard MIDI File subset: formats 0 and 1, note on/off, tempo changes.
//!
//! Reading merges every channel of every track into one [`NoteTrack`].
//! Writing emits format 0 at 480 ticks per quarter and a single tempo of
//! 500000 µs per quarter, so one tick is 1/960 s.

use std::collections::{BTreeMap, HashMap, VecDeque};

use crate::error::{AmtError, Result};
use crate::notes::{NoteEvent, NoteTrack};

pub const WRITE_TICKS_PER_QUARTER: u16 = 480;
pub const WRITE_TEMPO_US: u32 = 500_000;
const DEFAULT_TEMPO_US: u32 = 500_000;

#[derive(Debug, Clone, Copy)]
enum Timing {
    Metrical(u16),
    /// Seconds per tick for SMPTE time division.
    Timecode(f64),
}

#[derive(Debug, Clone, Copy)]
enum RawKind {
    NoteOn { channel: u8, pitch: u8, velocity: u8 },
    NoteOff { channel: u8, pitch: u8 },
    Tempo(u32),
    EndOfTrack,
}

#[derive(Debug, Clone, Copy)]
struct RawEvent {
    tick: u64,
    track: usize,
    order: usize,
    kind: RawKind,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(AmtError::Format(format!(
                "truncated MIDI data at byte {} (need {n}, have {})",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32> {
        let mut value: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(AmtError::Format("variable-length quantity longer than 4 bytes".into()))
    }
}

/// Parses a Standard MIDI File into a single merged note track.
pub fn parse_standard_midi(id: impl Into<String>, bytes: &[u8]) -> Result<NoteTrack> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != b"MThd" {
        return Err(AmtError::Format(format!("bad MIDI magic {:?}", String::from_utf8_lossy(magic))));
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(AmtError::Format(format!("MThd chunk too short ({header_len} bytes)")));
    }
    let header = r.take(header_len)?;
    let format = u16::from_be_bytes([header[0], header[1]]);
    let n_tracks = u16::from_be_bytes([header[2], header[3]]) as usize;
    let division = u16::from_be_bytes([header[4], header[5]]);
    if format > 1 {
        return Err(AmtError::UnsupportedFormat(format!("SMF format {format}")));
    }
    let timing = if division & 0x8000 != 0 {
        let fps = -((division >> 8) as u8 as i8) as f64;
        let per_frame = (division & 0xff) as f64;
        if fps <= 0.0 || per_frame == 0.0 {
            return Err(AmtError::Format("invalid SMPTE division".into()));
        }
        // 29 means 29.97 drop-frame
        let fps = if fps == 29.0 { 29.97 } else { fps };
        Timing::Timecode(1.0 / (fps * per_frame))
    } else {
        if division == 0 {
            return Err(AmtError::Format("zero ticks per quarter note".into()));
        }
        Timing::Metrical(division)
    };

    let mut events = Vec::new();
    let mut track = 0;
    while track < n_tracks {
        if r.remaining() == 0 {
            return Err(AmtError::Format(format!(
                "header declares {n_tracks} tracks, found {track}"
            )));
        }
        let chunk_id = r.take(4)?;
        let len = r.u32()? as usize;
        let body = r.take(len)?;
        if chunk_id != b"MTrk" {
            // alien chunk, skipped per SMF rules
            continue;
        }
        read_track(body, track, &mut events)?;
        track += 1;
    }

    events.sort_by_key(|e| (e.tick, e.track, e.order));
    let tempo_map = TempoMap::new(&events, timing);

    let mut open: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
    let mut notes = Vec::new();
    let mut track_end: BTreeMap<usize, u64> = BTreeMap::new();
    let close = |pitch: u8, start: u64, end: u64, velocity: u8, notes: &mut Vec<NoteEvent>| {
        if end > start {
            notes.push(NoteEvent {
                pitch,
                velocity: velocity.clamp(1, 127),
                onset_sec: tempo_map.seconds(start),
                offset_sec: tempo_map.seconds(end),
            });
        }
    };
    let mut open_track: HashMap<(u8, u8), VecDeque<usize>> = HashMap::new();
    for e in &events {
        match e.kind {
            RawKind::NoteOn { channel, pitch, velocity } => {
                open.entry((channel, pitch)).or_default().push_back((e.tick, velocity));
                open_track.entry((channel, pitch)).or_default().push_back(e.track);
            }
            RawKind::NoteOff { channel, pitch } => {
                if let Some((start, velocity)) = open.get_mut(&(channel, pitch)).and_then(|q| q.pop_front()) {
                    open_track.get_mut(&(channel, pitch)).and_then(|q| q.pop_front());
                    close(pitch, start, e.tick, velocity, &mut notes);
                }
            }
            RawKind::EndOfTrack => {
                track_end.insert(e.track, e.tick);
            }
            RawKind::Tempo(_) => {}
        }
    }
    let last_tick = events.last().map(|e| e.tick).unwrap_or(0);
    let mut keys: Vec<_> = open.keys().copied().collect();
    keys.sort_unstable();
    for key in keys {
        let starts = open.remove(&key).unwrap_or_default();
        let tracks = open_track.remove(&key).unwrap_or_default();
        for ((start, velocity), track) in starts.into_iter().zip(tracks) {
            let end = track_end.get(&track).copied().unwrap_or(last_tick);
            close(key.1, start, end, velocity, &mut notes);
        }
    }
    let duration = tempo_map.seconds(last_tick);
    NoteTrack::new(id, notes, duration)
}

fn read_track(body: &[u8], track: usize, out: &mut Vec<RawEvent>) -> Result<()> {
    let mut r = Reader::new(body);
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut order = 0;
    let mut push = |tick: u64, kind: RawKind, out: &mut Vec<RawEvent>| {
        out.push(RawEvent { tick, track, order, kind });
        order += 1;
    };
    while r.remaining() > 0 {
        tick += r.vlq()? as u64;
        let first = r.u8()?;
        let (status, first_data) = if first & 0x80 != 0 {
            (first, None)
        } else {
            match running {
                Some(s) => (s, Some(first)),
                None => return Err(AmtError::Format("data byte without running status".into())),
            }
        };
        match status {
            0xff => {
                running = None;
                let kind = r.u8()?;
                let len = r.vlq()? as usize;
                let data = r.take(len)?;
                match kind {
                    0x51 if len == 3 => {
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        push(tick, RawKind::Tempo(us), out);
                    }
                    0x2f => {
                        push(tick, RawKind::EndOfTrack, out);
                        return Ok(());
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = r.vlq()? as usize;
                r.take(len)?;
            }
            0x80..=0xef => {
                running = Some(status);
                let data = |r: &mut Reader| r.u8();
                let channel = status & 0x0f;
                let a = match first_data {
                    Some(b) => b,
                    None => data(&mut r)?,
                };
                match status & 0xf0 {
                    0x80 => {
                        let _velocity = data(&mut r)?;
                        push(tick, RawKind::NoteOff { channel, pitch: a & 0x7f }, out);
                    }
                    0x90 => {
                        let velocity = data(&mut r)? & 0x7f;
                        let pitch = a & 0x7f;
                        if velocity == 0 {
                            push(tick, RawKind::NoteOff { channel, pitch }, out);
                        } else {
                            push(tick, RawKind::NoteOn { channel, pitch, velocity }, out);
                        }
                    }
                    0xa0 | 0xb0 | 0xe0 => {
                        data(&mut r)?;
                    }
                    _ => {} // program change, channel pressure: one data byte
                }
            }
            other => {
                return Err(AmtError::Format(format!("unexpected status byte {other:#04x}")));
            }
        }
    }
    // missing end-of-track meta event: close at the last tick seen
    push(tick, RawKind::EndOfTrack, out);
    Ok(())
}

/// Piecewise-linear tick → seconds map built from every tempo event.
struct TempoMap {
    timing: Timing,
    /// (tick, seconds at tick, microseconds per quarter from tick on)
    segments: Vec<(u64, f64, u32)>,
}

impl TempoMap {
    fn new(events: &[RawEvent], timing: Timing) -> Self {
        let mut segments = vec![(0u64, 0.0f64, DEFAULT_TEMPO_US)];
        if let Timing::Metrical(tpq) = timing {
            for e in events {
                if let RawKind::Tempo(us) = e.kind {
                    let &(t0, s0, us0) = segments.last().unwrap();
                    let s = s0 + (e.tick - t0) as f64 * us0 as f64 / (tpq as f64 * 1e6);
                    if e.tick == t0 {
                        segments.last_mut().unwrap().2 = us;
                    } else {
                        segments.push((e.tick, s, us));
                    }
                }
            }
        }
        TempoMap { timing, segments }
    }

    fn seconds(&self, tick: u64) -> f64 {
        match self.timing {
            Timing::Timecode(per_tick) => tick as f64 * per_tick,
            Timing::Metrical(tpq) => {
                let i = self.segments.partition_point(|s| s.0 <= tick) - 1;
                let (t0, s0, us) = self.segments[i];
                s0 + (tick - t0) as f64 * us as f64 / (tpq as f64 * 1e6)
            }
        }
    }
}

fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut stack = [0u8; 5];
    let mut n = 0;
    loop {
        stack[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { stack[i] | 0x80 } else { stack[i] });
    }
}

/// Writes a track as a format-0 SMF on channel 0. Times are quantized to
/// 1/960 s; a note that would round to zero length is lengthened by one tick.
pub fn write_standard_midi(track: &NoteTrack) -> Vec<u8> {
    let ticks_per_sec = WRITE_TICKS_PER_QUARTER as f64 * 1e6 / WRITE_TEMPO_US as f64;
    let to_tick = |s: f64| (s * ticks_per_sec).round().max(0.0) as u64;
    // (tick, is_on, pitch, velocity); offs sort before ons at the same tick
    let mut timeline: Vec<(u64, bool, u8, u8)> = Vec::with_capacity(track.len() * 2);
    for e in track.events() {
        let on = to_tick(e.onset_sec);
        let off = to_tick(e.offset_sec).max(on + 1);
        timeline.push((on, true, e.pitch, e.velocity));
        timeline.push((off, false, e.pitch, 0));
    }
    timeline.sort();
    let mut body = Vec::new();
    write_vlq(&mut body, 0);
    body.extend_from_slice(&[0xff, 0x51, 0x03]);
    body.extend_from_slice(&WRITE_TEMPO_US.to_be_bytes()[1..]);
    let mut now = 0u64;
    for (tick, is_on, pitch, velocity) in timeline {
        write_vlq(&mut body, (tick - now) as u32);
        now = tick;
        if is_on {
            body.extend_from_slice(&[0x90, pitch, velocity]);
        } else {
            body.extend_from_slice(&[0x80, pitch, 0]);
        }
    }
    let end = now.max(to_tick(track.duration_sec()));
    write_vlq(&mut body, (end - now) as u32);
    body.extend_from_slice(&[0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(body.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&WRITE_TICKS_PER_QUARTER.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smf(division: u16, tracks: &[Vec<u8>], format: u16) -> Vec<u8> {
        let mut out = b"MThd".to_vec();
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&format.to_be_bytes());
        out.extend_from_slice(&(tracks.len() as u16).to_be_bytes());
        out.extend_from_slice(&division.to_be_bytes());
        for t in tracks {
            out.extend_from_slice(b"MTrk");
            out.extend_from_slice(&(t.len() as u32).to_be_bytes());
            out.extend_from_slice(t);
        }
        out
    }

    /// 480 tpq, tempo 500000, note-on p60 at tick 0, note-off at tick 480.
    fn quarter_note_file() -> Vec<u8> {
        let track = vec![
            0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20, // tempo 500000
            0x00, 0x90, 60, 100, // note on
            0x83, 0x60, 0x80, 60, 0, // delta 480, note off
            0x00, 0xff, 0x2f, 0x00,
        ];
        smf(480, &[track], 0)
    }

    #[test]
    fn quarter_note_is_half_a_second() {
        let bytes = quarter_note_file();
        let t = parse_standard_midi("q", &bytes).unwrap();
        assert_eq!(t.events(), &[NoteEvent::new(60, 100, 0.0, 0.5).unwrap()]);

        // independent reader agrees on the raw tick arithmetic
        let parsed = midly::Smf::parse(&bytes).unwrap();
        let tpq = match parsed.header.timing {
            midly::Timing::Metrical(t) => t.as_int() as f64,
            _ => unreachable!(),
        };
        let mut tick = 0u64;
        let mut off_tick = None;
        for ev in &parsed.tracks[0] {
            tick += ev.delta.as_int() as u64;
            if let midly::TrackEventKind::Midi { message: midly::MidiMessage::NoteOff { .. }, .. } = ev.kind {
                off_tick = Some(tick);
            }
        }
        let seconds = off_tick.unwrap() as f64 * 500_000.0 / (tpq * 1e6);
        assert_eq!(seconds, t.events()[0].offset_sec);
    }

    #[test]
    fn meta_only_file_is_empty() {
        let track = vec![0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20, 0x00, 0xff, 0x2f, 0x00];
        assert!(parse_standard_midi("m", &smf(96, &[track], 0)).unwrap().is_empty());
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = quarter_note_file();
        bytes[3] = b'x';
        assert!(matches!(parse_standard_midi("x", &bytes), Err(AmtError::Format(_))));
        let bytes = quarter_note_file();
        assert!(matches!(
            parse_standard_midi("x", &bytes[..bytes.len() - 6]),
            Err(AmtError::Format(_))
        ));
    }

    #[test]
    fn running_status_and_velocity_zero_off() {
        let track = vec![
            0x00, 0x90, 60, 90, // on
            0x00, 64, 80, // running status on
            0x60, 60, 0, // running status, velocity 0 = off at tick 96
            0x60, 64, 0, // off at 192
            0x00, 0xff, 0x2f, 0x00,
        ];
        let t = parse_standard_midi("r", &smf(96, &[track], 0)).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.events()[0].pitch, 60);
        assert_eq!(t.events()[0].offset_sec, 0.5);
        assert_eq!(t.events()[1].offset_sec, 1.0);
    }

    #[test]
    fn format1_tempo_map_applies_across_tracks() {
        // conductor track: 120 bpm then 60 bpm from tick 96
        let conductor = vec![
            0x00, 0xff, 0x51, 0x03, 0x07, 0xa1, 0x20,
            0x60, 0xff, 0x51, 0x03, 0x0f, 0x42, 0x40,
            0x00, 0xff, 0x2f, 0x00,
        ];
        let notes = vec![0x00, 0x91, 50, 70, 0x81, 0x40, 0x81, 50, 0, 0x00, 0xff, 0x2f, 0x00];
        let t = parse_standard_midi("f1", &smf(96, &[conductor, notes], 1)).unwrap();
        // note spans tick 0..192: 0.5 s at 120 bpm then 1.0 s at 60 bpm
        assert_eq!(t.events()[0].offset_sec, 1.5);
    }

    #[test]
    fn unterminated_note_closes_at_end_of_track() {
        let track = vec![0x00, 0x90, 60, 90, 0x83, 0x60, 0xff, 0x2f, 0x00];
        let t = parse_standard_midi("u", &smf(480, &[track], 0)).unwrap();
        assert_eq!(t.events()[0].offset_sec, 0.5);
    }

    #[test]
    fn write_then_read() {
        let track = NoteTrack::from_events(
            "w",
            vec![
                NoteEvent::new(60, 80, 0.0, 0.5).unwrap(),
                NoteEvent::new(60, 81, 0.5, 1.0).unwrap(),
                NoteEvent::new(67, 90, 0.25, 2.0).unwrap(),
            ],
        )
        .unwrap();
        let bytes = write_standard_midi(&track);
        assert!(midly::Smf::parse(&bytes).is_ok());
        let back = parse_standard_midi("w", &bytes).unwrap();
        assert_eq!(back.events(), track.events());
    }
}
