//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

use amt_core::network::{forward_trace, gradient, init_params, Batch, Matrix, ModelConfig, ParameterSet};
use amt_core::metrics::{MatchMode, MatchTolerances};
use amt_core::notes::NoteTrack;
use amt_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent reference for the binary cross-entropy: written directly from
/// the definition with `ln(1 + e^x)` evaluated in its stable form.
pub fn bce_reference(logits: &Matrix<f64>, targets: &Matrix<f64>) -> Result<(f64, Matrix<f64>)> {
    let n = logits.data.len() as f64;
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    for (i, (&z, &y)) in logits.data.iter().zip(&targets.data).enumerate() {
        // -[y ln s(z) + (1-y) ln(1-s(z))] = y softplus(-z) + (1-y) softplus(z)
        loss += y * softplus(-z) + (1.0 - y) * softplus(z);
        grad.data[i] = (1.0 / (1.0 + (-z).exp()) - y) / n;
    }
    Ok((loss / n, grad))
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn random_binary(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_bool(0.3) as u8 as f64).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Small randomized architecture for finite-difference checks.
pub fn toy_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    ModelConfig {
        input_bins: rng.gen_range(4..=12),
        unet_levels: rng.gen_range(0..=2),
        base_channels: rng.gen_range(1..=3),
        kernel_size: if rng.gen_bool(0.7) { 3 } else { 1 },
        rnn_hidden: rng.gen_range(2..=5),
        output_pitches: rng.gen_range(2..=6),
        dtype: amt_core::network::DType::F64,
    }
}

/// Central differences at ε = 1e-4 carry roughly 1e-12 of rounding noise
/// on an O(1) loss, so a tensor whose whole gradient is tinier than this is
/// judged relative to the floor instead of to its own scale.
pub const GRADIENT_FLOOR: f64 = 1e-5;

#[derive(Debug)]
pub struct GradCheck {
    /// (tensor name, max |analytic − numeric| / max(max |numeric|, floor))
    pub per_tensor: Vec<(String, f64)>,
    pub checked: usize,
    /// coordinates whose ±ε probe crossed a rectifier or pooling switch
    pub skipped: usize,
}

impl GradCheck {
    pub fn worst(&self) -> (String, f64) {
        self.per_tensor
            .iter()
            .cloned()
            .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a })
    }
}

fn batch_loss(params: &ParameterSet<f64>, config: &ModelConfig, batch: &Batch<f64>) -> (f64, Vec<Vec<u8>>) {
    let total: usize = batch.targets.iter().map(|t| t.data.len()).sum();
    let mut loss = 0.0;
    let mut patterns = Vec::new();
    for (x, y) in batch.inputs.iter().zip(&batch.targets) {
        let trace = forward_trace(params, config, x).unwrap();
        let (l, _) = bce_reference(trace.logits(), y).unwrap();
        loss += l * y.data.len() as f64 / total as f64;
        patterns.push(trace.activation_pattern());
    }
    (loss, patterns)
}

/// Central differences on every coordinate. Probes that change the
/// piecewise-linear activation pattern straddle a kink, where the
/// derivative is undefined, and are left out of the comparison.
pub fn check_gradients(config: &ModelConfig, params: &ParameterSet<f64>, batch: &Batch<f64>, eps: f64) -> GradCheck {
    let analytic = gradient(params, config, batch, bce_reference, false).unwrap().grads;
    let (_, base_pattern) = batch_loss(params, config, batch);
    let mut probe = params.clone();
    let mut report = GradCheck {
        per_tensor: Vec::new(),
        checked: 0,
        skipped: 0,
    };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let a = analytic.get(&name).unwrap().values().to_vec();
        let mut max_diff: f64 = 0.0;
        let mut max_num: f64 = 0.0;
        for i in 0..a.len() {
            let orig = params.get(&name).unwrap().values()[i];
            probe.get_mut(&name).unwrap().values_mut()[i] = orig + eps;
            let (up, pu) = batch_loss(&probe, config, batch);
            probe.get_mut(&name).unwrap().values_mut()[i] = orig - eps;
            let (down, pd) = batch_loss(&probe, config, batch);
            probe.get_mut(&name).unwrap().values_mut()[i] = orig;
            if pu != base_pattern || pd != base_pattern {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let numeric = (up - down) / (2.0 * eps);
            max_diff = max_diff.max((a[i] - numeric).abs());
            max_num = max_num.max(numeric.abs());
        }
        let rel = max_diff / max_num.max(GRADIENT_FLOOR);
        report.per_tensor.push((name, rel));
    }
    report
}

/// One randomized gradient check: toy config, Glorot weights with jittered
/// biases, random inputs and binary targets, two samples of unequal length.
pub fn random_gradient_check(seed: u64) -> (ModelConfig, GradCheck) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = toy_config(&mut rng);
    let mut params: ParameterSet<f64> = init_params(&config, seed).unwrap();
    for (_, t) in params.iter_mut() {
        for v in t.values_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..2 {
        let frames = rng.gen_range(5..=16);
        inputs.push(random_matrix(&mut rng, frames, config.input_bins, 1.0));
        targets.push(random_binary(&mut rng, frames, config.output_pitches));
    }
    let batch = Batch { id: seed as usize, inputs, targets };
    let report = check_gradients(&config, &params, &batch, 1e-4);
    (config, report)
}

/// Renders recipe tracks in memory with a built-in timbre.
pub fn synth_tracks(
    recipe: &amt_core::experiments::RandomTrackRecipe,
    timbre: &str,
) -> Vec<amt_core::dataset::LabeledTrack> {
    use amt_core::dataset::{FeatureConfig, LabeledTrack};
    use amt_core::synth::{builtin_timbre, render, SynthConfig};
    let synth = SynthConfig::new(builtin_timbre(timbre).expect("built-in timbre"));
    let features = FeatureConfig::default();
    (0..recipe.n_tracks)
        .map(|i| {
            let id = format!("{timbre}-{i:04}");
            let notes = recipe.generate_track(&id, i).unwrap();
            let audio = render(&notes, &synth).unwrap();
            let (spec, _) = features.extract(&audio, None).unwrap();
            LabeledTrack::new(id, audio.sample_rate_hz, notes, spec).unwrap()
        })
        .collect()
}

/// Small three-pitch recipe for quick training runs.
pub fn toy_recipe(n_tracks: usize, seed: u64) -> amt_core::experiments::RandomTrackRecipe {
    amt_core::experiments::RandomTrackRecipe {
        n_tracks,
        notes_per_track: [3, 6],
        max_polyphony: 2,
        pitch_range: [60, 62],
        duration_sec: [1.5, 2.0],
        note_length_sec: [0.1, 0.5],
        seed,
        ..Default::default()
    }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        unet_levels: 1,
        base_channels: 2,
        rnn_hidden: 8,
        ..ModelConfig::default()
    }
}

/// Exhaustive search: every matching over valid pairs, ranked by
/// cardinality (high), total rounded onset distance (low), then sorted
/// pair list (lexicographically low).
pub fn brute_force(
    reference: &NoteTrack,
    estimate: &NoteTrack,
    tol: &MatchTolerances,
    mode: MatchMode,
) -> Vec<(usize, usize)> {
    let round = |d: f64| (d * 1e7).round() / 1e7;
    let valid = |i: usize, j: usize| {
        let (r, e) = (&reference.events()[i], &estimate.events()[j]);
        if r.pitch != e.pitch || round((r.onset_sec - e.onset_sec).abs()) > tol.onset_tol_sec {
            return false;
        }
        mode == MatchMode::Onset
            || round((r.offset_sec - e.offset_sec).abs())
                <= (tol.offset_ratio * (r.offset_sec - r.onset_sec)).max(tol.offset_min_tol_sec)
    };
    let cost = |i: usize, j: usize| {
        (round((reference.events()[i].onset_sec - estimate.events()[j].onset_sec).abs()) * 1e7).round() as i64
    };
    let ne = estimate.len();
    let mut best: Option<(usize, i64, Vec<(usize, usize)>)> = None;
    fn recurse(
        i: usize,
        nr: usize,
        ne: usize,
        used: &mut Vec<bool>,
        current: &mut Vec<(usize, usize)>,
        valid: &dyn Fn(usize, usize) -> bool,
        cost: &dyn Fn(usize, usize) -> i64,
        best: &mut Option<(usize, i64, Vec<(usize, usize)>)>,
    ) {
        if i == nr {
            let c: i64 = current.iter().map(|&(a, b)| cost(a, b)).sum();
            let cand = (current.len(), c, current.clone());
            let better = match best {
                None => true,
                Some((k, bc, bp)) => cand.0 > *k || (cand.0 == *k && (c < *bc || (c == *bc && cand.2 < *bp))),
            };
            if better {
                *best = Some(cand);
            }
            return;
        }
        recurse(i + 1, nr, ne, used, current, valid, cost, best);
        for j in 0..ne {
            if !used[j] && valid(i, j) {
                used[j] = true;
                current.push((i, j));
                recurse(i + 1, nr, ne, used, current, valid, cost, best);
                current.pop();
                used[j] = false;
            }
        }
    }
    recurse(
        0,
        reference.len(),
        ne,
        &mut vec![false; ne],
        &mut Vec::new(),
        &valid,
        &cost,
        &mut best,
    );
    best.map(|b| b.2).unwrap_or_default()
}
