//! Fixtures shared by the benchmarks.

use amt_core::dataset::{FeatureConfig, LabeledTrack};
use amt_core::experiments::RandomTrackRecipe;
use amt_core::network::{init_params, Batch, ModelConfig, ParameterSet};
use amt_core::notes::NoteTrack;
use amt_core::synth::{builtin_timbre, render, AudioBuffer, SynthConfig};

/// The model size used for desk-scale experiments.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        unet_levels: 2,
        base_channels: 4,
        rnn_hidden: 64,
        ..ModelConfig::default()
    }
}

pub fn notes(seed: u64, seconds: f64, notes: usize) -> NoteTrack {
    let recipe = RandomTrackRecipe {
        n_tracks: 3,
        notes_per_track: [notes, notes],
        duration_sec: [seconds, seconds],
        seed,
        ..RandomTrackRecipe::default()
    };
    recipe.generate_track("bench", 0).expect("valid recipe")
}

pub fn audio(seed: u64, seconds: f64) -> AudioBuffer {
    let synth = SynthConfig::new(builtin_timbre("piano-like").expect("built-in"));
    render(&notes(seed, seconds, (seconds * 3.0) as usize), &synth).expect("renders")
}

pub fn labeled_track(seed: u64, seconds: f64) -> LabeledTrack {
    let audio = audio(seed, seconds);
    let (features, _) = FeatureConfig::default().extract(&audio, None).expect("features");
    LabeledTrack::new("bench", audio.sample_rate_hz, notes(seed, seconds, (seconds * 3.0) as usize), features)
        .expect("track")
}

/// A batch of `size` windows of `frames` frames cut from one track.
pub fn batch(size: usize, frames: usize) -> (ParameterSet<f32>, Batch<f32>) {
    let track = labeled_track(1, 4.0);
    let params = init_params(&desk_model(), 0).expect("params");
    let starts = (0..size).map(|i| (i * 37) % (track.frames().saturating_sub(frames) + 1));
    let (inputs, targets) = starts
        .map(|s| (track.input_window(s, frames), track.target_window(s, frames)))
        .unzip();
    (params, Batch { id: 0, inputs, targets })
}
