//! Frame and note transcription metrics.
//!
//! Note matching pairs reference and estimated notes of equal pitch whose
//! onsets (and optionally offsets) agree within tolerance. Among all
//! maximum-cardinality matchings the one with the smallest total onset
//! deviation is chosen, and among those the lexicographically smallest
//! sorted pair list.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledTrack;
use crate::decoding::{decode_frames, DecodeConfig};
use crate::error::{AmtError, Result};
use crate::network::{forward, ModelConfig, ParameterSet, Scalar};
use crate::notes::{NoteTrack, PianoRoll};

/// Distances are rounded to this many decimals before comparison, as the
/// common reference evaluation toolkit does.
const DISTANCE_DECIMALS: i32 = 7;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PrfScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl PrfScore {
    /// Ratios with zero denominators are reported as 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        PrfScore {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }

    /// True when neither side had anything to score.
    pub fn is_vacuous(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchTolerances {
    pub onset_tol_sec: f64,
    pub offset_ratio: f64,
    pub offset_min_tol_sec: f64,
}

impl Default for MatchTolerances {
    fn default() -> Self {
        MatchTolerances {
            onset_tol_sec: 0.05,
            offset_ratio: 0.2,
            offset_min_tol_sec: 0.05,
        }
    }
}

impl MatchTolerances {
    pub fn validate(&self) -> Result<()> {
        let ok = self.onset_tol_sec > 0.0 && self.offset_min_tol_sec > 0.0 && self.offset_ratio >= 0.0;
        if !ok || !(self.onset_tol_sec + self.offset_ratio + self.offset_min_tol_sec).is_finite() {
            return Err(AmtError::Config(format!("invalid match tolerances {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchMode {
    Onset,
    OnsetOffset,
}

/// Matched (reference index, estimate index) pairs, sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NoteMatching {
    pub pairs: Vec<(usize, usize)>,
}

impl NoteMatching {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn check_grids(reference: &PianoRoll, estimate: &PianoRoll) -> Result<()> {
    if (reference.frame_period_sec() - estimate.frame_period_sec()).abs() > 1e-12 {
        return Err(AmtError::Argument(format!(
            "frame periods differ: {} vs {}",
            reference.frame_period_sec(),
            estimate.frame_period_sec()
        )));
    }
    if reference.pitch_min() != estimate.pitch_min() || reference.pitch_count() != estimate.pitch_count() {
        return Err(AmtError::Argument(format!(
            "pitch ranges differ: {}+{} vs {}+{}",
            reference.pitch_min(),
            reference.pitch_count(),
            estimate.pitch_min(),
            estimate.pitch_count()
        )));
    }
    Ok(())
}

/// Cell-wise scores of two binary rolls (a cell counts as active above 0.5).
/// The shorter roll is treated as zero-padded.
pub fn frame_metrics(reference: &PianoRoll, estimate: &PianoRoll) -> Result<PrfScore> {
    check_grids(reference, estimate)?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let frames = reference.frames().max(estimate.frames());
    let width = reference.pitch_count();
    let zeros = vec![0.0; width];
    for t in 0..frames {
        let r = if t < reference.frames() { reference.row(t) } else { &zeros };
        let e = if t < estimate.frames() { estimate.row(t) } else { &zeros };
        for (&a, &b) in r.iter().zip(e) {
            match (a > 0.5, b > 0.5) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
    }
    Ok(PrfScore::from_counts(tp, fp, fn_))
}

fn round_distance(d: f64) -> f64 {
    let scale = 10f64.powi(DISTANCE_DECIMALS);
    (d * scale).round() / scale
}

/// Minimum-cost maximum-cardinality bipartite matching by successive
/// shortest augmenting paths. Returns (cardinality, cost, pairs).
fn min_cost_matching(nr: usize, ne: usize, edges: &[(usize, usize, i64)]) -> (usize, i64, Vec<(usize, usize)>) {
    // Nodes: 0 source, 1..=nr refs, nr+1..=nr+ne estimates, nr+ne+1 sink.
    let n = nr + ne + 2;
    let sink = n - 1;
    struct Arc {
        to: usize,
        cap: i32,
        cost: i64,
    }
    let mut arcs: Vec<Arc> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let add = |arcs: &mut Vec<Arc>, adj: &mut Vec<Vec<usize>>, a: usize, b: usize, cost: i64| {
        adj[a].push(arcs.len());
        arcs.push(Arc { to: b, cap: 1, cost });
        adj[b].push(arcs.len());
        arcs.push(Arc { to: a, cap: 0, cost: -cost });
    };
    for r in 0..nr {
        add(&mut arcs, &mut adj, 0, 1 + r, 0);
    }
    let first_edge_arc = arcs.len();
    for &(r, e, c) in edges {
        add(&mut arcs, &mut adj, 1 + r, 1 + nr + e, c);
    }
    for e in 0..ne {
        add(&mut arcs, &mut adj, 1 + nr + e, sink, 0);
    }
    let mut total = 0i64;
    let mut flow = 0usize;
    loop {
        // Bellman-Ford over the residual graph
        let mut dist = vec![i64::MAX; n];
        let mut via = vec![usize::MAX; n];
        dist[0] = 0;
        for _ in 0..n {
            let mut changed = false;
            for u in 0..n {
                if dist[u] == i64::MAX {
                    continue;
                }
                for &a in &adj[u] {
                    let arc = &arcs[a];
                    if arc.cap > 0 && dist[u] + arc.cost < dist[arc.to] {
                        dist[arc.to] = dist[u] + arc.cost;
                        via[arc.to] = a;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[sink] == i64::MAX {
            break;
        }
        let mut v = sink;
        while v != 0 {
            let a = via[v];
            arcs[a].cap -= 1;
            arcs[a ^ 1].cap += 1;
            v = arcs[a ^ 1].to;
        }
        total += dist[sink];
        flow += 1;
    }
    let pairs = edges
        .iter()
        .enumerate()
        .filter(|(i, _)| arcs[first_edge_arc + 2 * i].cap == 0)
        .map(|(_, &(r, e, _))| (r, e))
        .collect();
    (flow, total, pairs)
}

/// Optimal matching of one group, refined to the lexicographically
/// smallest pair list among all optimal matchings.
fn lexicographic_optimum(nr: usize, ne: usize, mut edges: Vec<(usize, usize, i64)>) -> Vec<(usize, usize)> {
    edges.sort();
    let (card, cost, pairs) = min_cost_matching(nr, ne, &edges);
    if card <= 1 && edges.iter().filter(|e| e.2 == cost).count() <= 1 {
        return pairs;
    }
    let (mut need_card, mut need_cost) = (card, cost);
    let mut used_r = vec![false; nr];
    let mut used_e = vec![false; ne];
    let mut rejected = vec![false; edges.len()];
    let mut chosen = Vec::with_capacity(card);
    for i in 0..edges.len() {
        if need_card == 0 {
            break;
        }
        let (r, e, c) = edges[i];
        if used_r[r] || used_e[e] {
            continue;
        }
        let rest: Vec<(usize, usize, i64)> = edges
            .iter()
            .enumerate()
            .filter(|&(j, &(rj, ej, _))| j != i && !rejected[j] && !used_r[rj] && !used_e[ej] && rj != r && ej != e)
            .map(|(_, &x)| x)
            .collect();
        let (k, kc, _) = min_cost_matching(nr, ne, &rest);
        if k + 1 == need_card && kc + c == need_cost {
            chosen.push((r, e));
            used_r[r] = true;
            used_e[e] = true;
            need_card -= 1;
            need_cost -= c;
        } else {
            rejected[i] = true;
        }
    }
    chosen
}

/// Pairs reference and estimated notes; see the module docs for how ties
/// between optimal matchings are broken.
pub fn match_notes(reference: &NoteTrack, estimate: &NoteTrack, tol: &MatchTolerances, mode: MatchMode) -> NoteMatching {
    let mut groups: BTreeMap<u8, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, n) in reference.events().iter().enumerate() {
        groups.entry(n.pitch).or_default().0.push(i);
    }
    for (j, n) in estimate.events().iter().enumerate() {
        groups.entry(n.pitch).or_default().1.push(j);
    }
    let scale = 10f64.powi(DISTANCE_DECIMALS);
    let mut pairs = Vec::new();
    for (refs, ests) in groups.values() {
        if refs.is_empty() || ests.is_empty() {
            continue;
        }
        let mut edges = Vec::new();
        for (a, &i) in refs.iter().enumerate() {
            let r = &reference.events()[i];
            for (b, &j) in ests.iter().enumerate() {
                let e = &estimate.events()[j];
                let onset = round_distance((r.onset_sec - e.onset_sec).abs());
                if onset > tol.onset_tol_sec {
                    continue;
                }
                if mode == MatchMode::OnsetOffset {
                    let offset = round_distance((r.offset_sec - e.offset_sec).abs());
                    let allowed = (tol.offset_ratio * r.duration_sec()).max(tol.offset_min_tol_sec);
                    if offset > allowed {
                        continue;
                    }
                }
                edges.push((a, b, (onset * scale).round() as i64));
            }
        }
        for (a, b) in lexicographic_optimum(refs.len(), ests.len(), edges) {
            pairs.push((refs[a], ests[b]));
        }
    }
    pairs.sort_unstable();
    NoteMatching { pairs }
}

pub fn note_metrics(reference: &NoteTrack, estimate: &NoteTrack, tol: &MatchTolerances, mode: MatchMode) -> PrfScore {
    let tp = match_notes(reference, estimate, tol, mode).len();
    PrfScore::from_counts(tp, estimate.len() - tp, reference.len() - tp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricFamily {
    Frame,
    Note,
    NoteWithOffset,
}

impl MetricFamily {
    pub const ALL: [MetricFamily; 3] = [MetricFamily::Frame, MetricFamily::Note, MetricFamily::NoteWithOffset];

    pub fn label(self) -> &'static str {
        match self {
            MetricFamily::Frame => "frame",
            MetricFamily::Note => "note",
            MetricFamily::NoteWithOffset => "note-with-offset",
        }
    }
}

/// How per-track scores are combined into one number per dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Unweighted mean of per-track precision, recall and F1.
    #[default]
    MeanOfTracks,
    /// Counts summed over all tracks, then scored once.
    Pooled,
}

/// All three metric families for one track.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackScores {
    pub frame: PrfScore,
    pub note: PrfScore,
    pub note_with_offset: PrfScore,
}

impl TrackScores {
    pub fn get(&self, family: MetricFamily) -> &PrfScore {
        match family {
            MetricFamily::Frame => &self.frame,
            MetricFamily::Note => &self.note,
            MetricFamily::NoteWithOffset => &self.note_with_offset,
        }
    }

    fn get_mut(&mut self, family: MetricFamily) -> &mut PrfScore {
        match family {
            MetricFamily::Frame => &mut self.frame,
            MetricFamily::Note => &mut self.note,
            MetricFamily::NoteWithOffset => &mut self.note_with_offset,
        }
    }
}

/// Combines per-track scores. Count fields are always summed.
pub fn aggregate(scores: &[TrackScores], mode: Aggregation) -> Result<TrackScores> {
    if scores.is_empty() {
        return Err(AmtError::Argument("cannot aggregate zero tracks".into()));
    }
    let mut out = TrackScores::default();
    for family in MetricFamily::ALL {
        let (tp, fp, fn_) = scores.iter().map(|s| s.get(family)).fold((0, 0, 0), |acc, s| {
            (acc.0 + s.tp, acc.1 + s.fp, acc.2 + s.fn_)
        });
        let mut combined = PrfScore::from_counts(tp, fp, fn_);
        if mode == Aggregation::MeanOfTracks {
            let n = scores.len() as f64;
            combined.precision = scores.iter().map(|s| s.get(family).precision).sum::<f64>() / n;
            combined.recall = scores.iter().map(|s| s.get(family).recall).sum::<f64>() / n;
            combined.f1 = scores.iter().map(|s| s.get(family).f1).sum::<f64>() / n;
        }
        *out.get_mut(family) = combined;
    }
    Ok(out)
}

/// Scores one track's activation probabilities (a roll on the track's grid)
/// against its labels in all three metric families.
pub fn score_track(
    track: &LabeledTrack,
    probabilities: &PianoRoll,
    decode: &DecodeConfig,
    tol: &MatchTolerances,
) -> Result<TrackScores> {
    let estimate = probabilities.binarize(decode.threshold);
    let frame = frame_metrics(&track.roll, &estimate)?;
    let notes = decode_frames(probabilities, decode)?;
    Ok(TrackScores {
        frame,
        note: note_metrics(&track.notes, &notes, tol, MatchMode::Onset),
        note_with_offset: note_metrics(&track.notes, &notes, tol, MatchMode::OnsetOffset),
    })
}

/// Frame activation probabilities `σ(logits)` of a model on one track.
pub fn predict_track<T: Scalar>(params: &ParameterSet<T>, config: &ModelConfig, track: &LabeledTrack) -> Result<PianoRoll> {
    track.check_model(config)?;
    let logits = forward(params, config, &track.input_matrix())?;
    let probs = logits
        .data
        .iter()
        .map(|&z| {
            let z = z.as_f64();
            let p = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) };
            p as f32
        })
        .collect();
    PianoRoll::from_values(
        probs,
        logits.rows,
        track.roll.frame_period_sec(),
        track.roll.pitch_min(),
        track.roll.pitch_count(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_track: Vec<(String, TrackScores)>,
    pub aggregate: TrackScores,
}

/// Runs the model over every track and scores it. Tracks are processed in
/// parallel; results keep track order.
pub fn evaluate_model<T: Scalar>(
    params: &ParameterSet<T>,
    config: &ModelConfig,
    tracks: &[LabeledTrack],
    decode: &DecodeConfig,
    tol: &MatchTolerances,
    aggregation: Aggregation,
) -> Result<EvaluationReport> {
    if tracks.is_empty() {
        return Err(AmtError::Argument("evaluation split is empty".into()));
    }
    decode.validate()?;
    tol.validate()?;
    let per_track: Vec<(String, TrackScores)> = tracks
        .par_iter()
        .map(|t| {
            let probs = predict_track(params, config, t)?;
            Ok((t.id.clone(), score_track(t, &probs, decode, tol)?))
        })
        .collect::<Result<_>>()?;
    let scores: Vec<TrackScores> = per_track.iter().map(|p| p.1).collect();
    let aggregate = aggregate(&scores, aggregation)?;
    Ok(EvaluationReport { per_track, aggregate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub family: MetricFamily,
    pub score: PrfScore,
}

/// Dataset × metric-family table of precision, recall and F1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn push_scores(&mut self, dataset: &str, scores: &TrackScores) {
        for family in MetricFamily::ALL {
            self.rows.push(ResultRow {
                dataset: dataset.to_string(),
                family,
                score: *scores.get(family),
            });
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,metric,P,R,F1\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.4},{:.4},{:.4}",
                r.dataset,
                r.family.label(),
                r.score.precision,
                r.score.recall,
                r.score.f1
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.dataset.len()).max().unwrap_or(0).max(7);
        let mut out = format!("{:<width$}  {:<16}  {:>6}  {:>6}  {:>6}\n", "dataset", "metric", "P", "R", "F1");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:<16}  {:>6.3}  {:>6.3}  {:>6.3}",
                r.dataset,
                r.family.label(),
                r.score.precision,
                r.score.recall,
                r.score.f1
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matching_prefers_low_cost_among_maximum() {
        // two refs, two ests, both perfect matchings are maximum; costs differ
        let edges = vec![(0, 0, 5), (0, 1, 1), (1, 0, 1), (1, 1, 5)];
        let (k, c, pairs) = min_cost_matching(2, 2, &edges);
        assert_eq!((k, c), (2, 2));
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn cardinality_beats_cost() {
        let edges = vec![(0, 0, 0), (0, 1, 9), (1, 0, 9)];
        let (k, c, _) = min_cost_matching(2, 2, &edges);
        assert_eq!((k, c), (2, 18));
    }

    #[test]
    fn lexicographic_tie_break() {
        let edges = vec![(0, 0, 1), (0, 1, 1), (1, 0, 1), (1, 1, 1)];
        assert_eq!(lexicographic_optimum(2, 2, edges), vec![(0, 0), (1, 1)]);
    }
}
