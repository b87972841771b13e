mod common;

use common::brute_force;
use amt_core::decoding::{decode_frames, roundtrip_check, DecodeConfig};
use amt_core::metrics::{
    aggregate, frame_metrics, match_notes, note_metrics, Aggregation, MatchMode, MatchTolerances, NoteMatching,
    PrfScore, ResultsTable, TrackScores,
};
use amt_core::notes::{rasterize, NoteEvent, NoteTrack, PianoRoll};
use proptest::prelude::*;

fn note(pitch: u8, onset: f64, offset: f64) -> NoteEvent {
    NoteEvent::new(pitch, 100, onset, offset).unwrap()
}

fn track(events: Vec<NoteEvent>) -> NoteTrack {
    NoteTrack::from_events("t", events).unwrap()
}


#[test]
fn prf_conventions() {
    let s = PrfScore::from_counts(0, 0, 0);
    assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    assert!(s.is_vacuous());
    let s = PrfScore::from_counts(1, 0, 1);
    assert_eq!((s.precision, s.recall), (1.0, 0.5));
    assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn frame_metric_examples() {
    let mut reference = PianoRoll::zeros(4, 0.01, 21, 88);
    for t in 0..4 {
        reference.set(t, 39, 1.0);
    }
    assert_eq!(frame_metrics(&reference, &reference).unwrap().f1, 1.0);
    let empty = PianoRoll::zeros(4, 0.01, 21, 88);
    let s = frame_metrics(&reference, &empty).unwrap();
    assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    let mut est = empty.clone();
    for t in 0..3 {
        est.set(t, 39, 1.0);
    }
    est.set(0, 40, 1.0);
    let s = frame_metrics(&reference, &est).unwrap();
    assert_eq!((s.precision, s.recall, s.f1), (0.75, 0.75, 0.75));
    // shorter roll is zero padded
    let s = frame_metrics(&reference, &est.with_frames(2)).unwrap();
    assert_eq!((s.tp, s.fp, s.fn_), (2, 1, 2));
    assert!(frame_metrics(&reference, &PianoRoll::zeros(4, 0.02, 21, 88)).is_err());
}

#[test]
fn tolerance_arithmetic_example() {
    let r = track(vec![note(60, 0.1, 0.8)]);
    let e = track(vec![note(60, 0.14, 0.9)]);
    let tol = MatchTolerances::default();
    assert_eq!(match_notes(&r, &e, &tol, MatchMode::Onset).pairs, vec![(0, 0)]);
    assert_eq!(match_notes(&r, &e, &tol, MatchMode::OnsetOffset).pairs, vec![(0, 0)]);
    let late = track(vec![note(60, 0.14, 0.95)]);
    assert!(match_notes(&r, &late, &tol, MatchMode::OnsetOffset).is_empty());
    let wrong_pitch = track(vec![note(61, 0.1, 0.8)]);
    assert!(match_notes(&r, &wrong_pitch, &tol, MatchMode::Onset).is_empty());
}

#[test]
fn boundary_onset_difference_counts_as_match() {
    // 0.05 is not exactly representable; rounding makes the boundary inclusive
    let r = track(vec![note(60, 0.1, 0.5)]);
    let e = track(vec![note(60, 0.15, 0.5)]);
    assert_eq!(match_notes(&r, &e, &MatchTolerances::default(), MatchMode::Onset).len(), 1);
}

#[test]
fn crossed_case_gets_full_matching() {
    let r = track(vec![note(60, 0.0, 0.5), note(60, 0.04, 0.54)]);
    let e = track(vec![note(60, 0.045, 0.545), note(60, 0.0, 0.5)]);
    let tol = MatchTolerances::default();
    let m = match_notes(&r, &e, &tol, MatchMode::Onset);
    assert_eq!(m.pairs, brute_force(&r, &e, &tol, MatchMode::Onset));
    assert_eq!(m.len(), 2);
    // events are stored sorted by onset, so Y (0.000) is estimate 0 and X is 1
    assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
    let s = note_metrics(&r, &e, &tol, MatchMode::Onset);
    assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
}

#[test]
fn empty_estimate_matches_nothing() {
    let r = track(vec![note(60, 0.0, 0.5)]);
    let m = match_notes(&r, &NoteTrack::empty("e"), &MatchTolerances::default(), MatchMode::Onset);
    assert_eq!(m, NoteMatching::default());
}

#[test]
fn note_metric_examples() {
    let notes: Vec<NoteEvent> = (0..5).map(|i| note(60 + i, i as f64 * 0.3, i as f64 * 0.3 + 0.2)).collect();
    let t = track(notes.clone());
    let s = note_metrics(&t, &t, &MatchTolerances::default(), MatchMode::OnsetOffset);
    assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
    let r = track(notes[..2].to_vec());
    let e = track(notes[..1].to_vec());
    let s = note_metrics(&r, &e, &MatchTolerances::default(), MatchMode::Onset);
    assert_eq!((s.precision, s.recall), (1.0, 0.5));
    assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn decode_examples() {
    let mut roll = PianoRoll::zeros(8, 0.01, 21, 88);
    for t in 0..5 {
        roll.set(t, 39, 0.9);
    }
    let out = decode_frames(&roll, &DecodeConfig::default()).unwrap();
    assert_eq!(out.len(), 1);
    let e = out.events()[0];
    assert_eq!((e.pitch, e.velocity), (60, 100));
    assert!((e.onset_sec - 0.0).abs() < 1e-12 && (e.offset_sec - 0.05).abs() < 1e-12);

    let flat = PianoRoll::from_values(vec![0.4; 8 * 88], 8, 0.01, 21, 88).unwrap();
    assert!(decode_frames(&flat, &DecodeConfig::default()).unwrap().is_empty());

    let mut single = PianoRoll::zeros(8, 0.01, 21, 88);
    single.set(3, 10, 1.0);
    assert!(decode_frames(&single, &DecodeConfig::default()).unwrap().is_empty());

    // exactly at threshold is inactive
    let half = PianoRoll::from_values(vec![0.5; 8 * 88], 8, 0.01, 21, 88).unwrap();
    assert!(decode_frames(&half, &DecodeConfig::default()).unwrap().is_empty());
}

#[test]
fn gap_tolerance_bridges_interruptions() {
    let mut roll = PianoRoll::zeros(10, 0.01, 21, 88);
    for t in [0, 1, 2, 4, 5, 6] {
        roll.set(t, 0, 1.0);
    }
    assert_eq!(decode_frames(&roll, &DecodeConfig::default()).unwrap().len(), 2);
    let bridged = DecodeConfig {
        gap_tolerance_frames: 1,
        ..DecodeConfig::default()
    };
    let out = decode_frames(&roll, &bridged).unwrap();
    assert_eq!(out.len(), 1);
    assert!((out.events()[0].offset_sec - 0.07).abs() < 1e-12);
}

#[test]
fn roundtrip_examples() {
    let t = track(vec![note(60, 0.0, 0.1), note(64, 0.05, 0.3), note(60, 0.2, 0.25)]);
    assert_eq!(roundtrip_check(&t).unwrap().f1, 1.0);
    let short = track(vec![note(60, 0.0, 0.1), note(64, 0.05, 0.06)]);
    assert!(roundtrip_check(&short).unwrap().recall < 1.0);
    let empty = roundtrip_check(&NoteTrack::empty("e")).unwrap();
    assert!(empty.is_vacuous() && empty.f1 == 0.0);
}

#[test]
fn aggregation_modes() {
    let a = TrackScores {
        frame: PrfScore::from_counts(1, 0, 0),
        ..Default::default()
    };
    let b = TrackScores {
        frame: PrfScore::from_counts(0, 0, 3),
        ..Default::default()
    };
    let mean = aggregate(&[a, b], Aggregation::MeanOfTracks).unwrap();
    assert_eq!(mean.frame.f1, 0.5);
    let pooled = aggregate(&[a, b], Aggregation::Pooled).unwrap();
    assert_eq!((pooled.frame.tp, pooled.frame.fn_), (1, 3));
    assert_eq!(pooled.frame.recall, 0.25);
    assert!(aggregate(&[], Aggregation::Pooled).is_err());
}

#[test]
fn results_table_layout() {
    let mut table = ResultsTable::default();
    table.push_scores("piano-like", &TrackScores::default());
    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("dataset,metric,P,R,F1\n"));
    assert!(csv.contains("piano-like,note-with-offset,0.0000,0.0000,0.0000"));
    assert_eq!(table.to_text().lines().count(), 4);
}

fn arb_track(max: usize) -> impl Strategy<Value = NoteTrack> {
    prop::collection::vec((60u8..63, 0u32..40, 1u32..30), 0..=max).prop_map(|raw| {
        let events = raw
            .into_iter()
            .map(|(p, on, dur)| note(p, on as f64 * 0.01, (on + dur) as f64 * 0.01))
            .collect();
        track(events)
    })
}

fn arb_mode() -> impl Strategy<Value = MatchMode> {
    prop_oneof![Just(MatchMode::Onset), Just(MatchMode::OnsetOffset)]
}

/// Grid-aligned tracks with every note at least 2 frames and a free frame
/// between same-pitch notes.
fn arb_clean_track() -> impl Strategy<Value = NoteTrack> {
    prop::collection::vec(prop::collection::vec((0u32..6, 2u32..8), 0..5), 1..4).prop_map(|columns| {
        let mut events = Vec::new();
        for (c, notes) in columns.into_iter().enumerate() {
            let mut t = 0;
            for (gap, dur) in notes {
                t += gap + 1;
                events.push(note(40 + 3 * c as u8, t as f64 * 0.01, (t + dur) as f64 * 0.01));
                t += dur;
            }
        }
        track(events)
    })
}

proptest! {
    #[test]
    fn matcher_equals_exhaustive_search(r in arb_track(6), e in arb_track(6), mode in arb_mode()) {
        let tol = MatchTolerances::default();
        let m = match_notes(&r, &e, &tol, mode);
        prop_assert_eq!(m.pairs, brute_force(&r, &e, &tol, mode));
    }

    #[test]
    fn swapping_sides_swaps_precision_and_recall(r in arb_track(6), e in arb_track(6), mode in arb_mode()) {
        // with a zero offset ratio the tolerance no longer depends on which side is the reference
        let tol = MatchTolerances { offset_ratio: 0.0, ..MatchTolerances::default() };
        let a = note_metrics(&r, &e, &tol, mode);
        let b = note_metrics(&e, &r, &tol, mode);
        prop_assert_eq!(a.precision, b.recall);
        prop_assert_eq!(a.recall, b.precision);
        prop_assert_eq!(a.f1, b.f1);
    }

    #[test]
    fn wider_onset_tolerance_never_loses_matches(r in arb_track(6), e in arb_track(6), extra in 0.0f64..0.2) {
        let narrow = MatchTolerances::default();
        let wide = MatchTolerances { onset_tol_sec: narrow.onset_tol_sec + extra, ..narrow };
        prop_assert!(match_notes(&r, &e, &wide, MatchMode::Onset).len() >= match_notes(&r, &e, &narrow, MatchMode::Onset).len());
    }

    #[test]
    fn offset_matches_are_a_subset(r in arb_track(6), e in arb_track(6)) {
        let tol = MatchTolerances::default();
        let with_offset = note_metrics(&r, &e, &tol, MatchMode::OnsetOffset).tp;
        let onset = note_metrics(&r, &e, &tol, MatchMode::Onset).tp;
        prop_assert!(with_offset <= onset && onset <= r.len().min(e.len()));
    }

    #[test]
    fn frame_swap_symmetry(r in arb_track(8), e in arb_track(8)) {
        let a = rasterize(&r, 0.01, 21, 88).unwrap().roll;
        let b = rasterize(&e, 0.01, 21, 88).unwrap().roll;
        let x = frame_metrics(&a, &b).unwrap();
        let y = frame_metrics(&b, &a).unwrap();
        prop_assert_eq!((x.precision, x.recall), (y.recall, y.precision));
    }

    #[test]
    fn decode_inverts_rasterize(t in arb_clean_track()) {
        let roll = rasterize(&t, 0.01, 21, 88).unwrap().roll;
        let decoded = decode_frames(&roll, &DecodeConfig::default()).unwrap();
        prop_assert_eq!(decoded.len(), t.len());
        for (a, b) in decoded.events().iter().zip(t.events()) {
            prop_assert_eq!(a.pitch, b.pitch);
            prop_assert!((a.onset_sec - b.onset_sec).abs() < 1e-9);
            prop_assert!((a.offset_sec - b.offset_sec).abs() < 1e-9);
        }
        prop_assert_eq!(roundtrip_check(&t).unwrap().f1, if t.is_empty() { 0.0 } else { 1.0 });
    }

    #[test]
    fn higher_threshold_never_adds_frames(values in prop::collection::vec(0.0f32..=1.0, 40), lo in 0.05f32..0.5, step in 0.0f32..0.45) {
        let roll = PianoRoll::from_values(values, 10, 0.01, 60, 4).unwrap();
        let count = |th: f32| {
            let cfg = DecodeConfig { threshold: th, min_duration_frames: 1, ..DecodeConfig::default() };
            let d = decode_frames(&roll, &cfg).unwrap();
            rasterize(&d, 0.01, 60, 4).unwrap().roll.active_count()
        };
        prop_assert!(count(lo + step) <= count(lo));
    }
}
