//! Synthetic dataset generation, manifests and loading.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{FeatureConfig, LabeledTrack};
use crate::error::{AmtError, Result};
use crate::midi::parse_standard_midi;
use crate::notes::{parse_note_csv, split_tracks, NoteEvent, NoteTrack, SplitAssignment, DEFAULT_FRAME_PERIOD_SEC};
use crate::spectral::SpectrogramCache;
use crate::synth::{render, AudioBuffer, SynthConfig, TimbreProfile};
use crate::wav::{parse_wav, write_wav};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Parameters of the random note generator. All times are multiples of
/// `grid_sec`, notes last at least two grid steps, and notes of equal pitch
/// are separated by at least one free step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomTrackRecipe {
    pub n_tracks: usize,
    pub notes_per_track: [usize; 2],
    pub max_polyphony: usize,
    /// Inclusive MIDI pitch range.
    pub pitch_range: [u8; 2],
    pub duration_sec: [f64; 2],
    pub note_length_sec: [f64; 2],
    pub velocity_range: [u8; 2],
    pub grid_sec: f64,
    pub seed: u64,
}

impl Default for RandomTrackRecipe {
    fn default() -> Self {
        RandomTrackRecipe {
            n_tracks: 60,
            notes_per_track: [20, 40],
            max_polyphony: 3,
            pitch_range: [36, 84],
            duration_sec: [8.0, 12.0],
            note_length_sec: [0.1, 1.0],
            velocity_range: [64, 127],
            grid_sec: DEFAULT_FRAME_PERIOD_SEC,
            seed: 0,
        }
    }
}

impl RandomTrackRecipe {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(AmtError::Config(msg));
        if self.n_tracks < 3 {
            return bad(format!("n_tracks must be at least 3, got {}", self.n_tracks));
        }
        if self.notes_per_track[0] > self.notes_per_track[1] {
            return bad(format!("empty notes_per_track range {:?}", self.notes_per_track));
        }
        if self.max_polyphony == 0 {
            return bad("max_polyphony must be at least 1".into());
        }
        if self.pitch_range[0] > self.pitch_range[1] || self.pitch_range[1] > 127 {
            return bad(format!("invalid pitch range {:?}", self.pitch_range));
        }
        if self.velocity_range[0] == 0 || self.velocity_range[0] > self.velocity_range[1] || self.velocity_range[1] > 127
        {
            return bad(format!("invalid velocity range {:?}", self.velocity_range));
        }
        if !(self.grid_sec > 0.0) {
            return bad(format!("grid step must be positive, got {}", self.grid_sec));
        }
        let steps = |s: f64| (s / self.grid_sec).round() as i64;
        let [lo, hi] = self.note_length_sec;
        if !(lo <= hi) || steps(lo) < 2 {
            return bad(format!("note lengths {:?} must span at least two grid steps", self.note_length_sec));
        }
        let [dlo, dhi] = self.duration_sec;
        if !(dlo <= dhi) || dlo < hi + self.grid_sec {
            return bad(format!("track durations {:?} must exceed the longest note", self.duration_sec));
        }
        Ok(())
    }

    /// Generates track `index`. Each track has its own RNG stream, so tracks
    /// do not depend on each other.
    pub fn generate_track(&self, id: &str, index: usize) -> Result<NoteTrack> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        let g = self.grid_sec;
        let steps = |s: f64| (s / g).round() as i64;
        let total = rng.gen_range(steps(self.duration_sec[0])..=steps(self.duration_sec[1]));
        let wanted = rng.gen_range(self.notes_per_track[0]..=self.notes_per_track[1]);
        let (len_lo, len_hi) = (steps(self.note_length_sec[0]), steps(self.note_length_sec[1]));
        // (pitch, start, end) in grid steps, end exclusive
        let mut placed: Vec<(u8, i64, i64, u8)> = Vec::with_capacity(wanted);
        let mut attempts = 0;
        while placed.len() < wanted && attempts < wanted * 50 {
            attempts += 1;
            let pitch = rng.gen_range(self.pitch_range[0]..=self.pitch_range[1]);
            let len = rng.gen_range(len_lo..=len_hi);
            let start = rng.gen_range(0..=total - len);
            let end = start + len;
            let velocity = rng.gen_range(self.velocity_range[0]..=self.velocity_range[1]);
            let clash = placed
                .iter()
                .any(|&(p, s, e, _)| p == pitch && start <= e && s <= end);
            if clash {
                continue;
            }
            // polyphony only changes at note starts, so checking those suffices
            let mut points: Vec<i64> = placed
                .iter()
                .filter(|&&(_, s, e, _)| s < end && start < e)
                .map(|&(_, s, _, _)| s.max(start))
                .collect();
            points.push(start);
            let too_dense = points.iter().any(|&t| {
                placed.iter().filter(|&&(_, s, e, _)| s <= t && t < e).count() + 1 > self.max_polyphony
            });
            if too_dense {
                continue;
            }
            placed.push((pitch, start, end, velocity));
        }
        let events = placed
            .into_iter()
            .map(|(p, s, e, v)| NoteEvent::new(p, v, s as f64 * g, e as f64 * g))
            .collect::<Result<Vec<_>>>()?;
        NoteTrack::new(id, events, total as f64 * g)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestTrack {
    pub id: String,
    /// Paths relative to the manifest's directory.
    pub labels: String,
    pub audio: String,
    pub labels_sha256: String,
    pub audio_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: String,
    pub timbre: String,
    pub sample_rate_hz: u32,
    pub features: FeatureConfig,
    pub tracks: Vec<ManifestTrack>,
    pub split: SplitAssignment,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path)?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| AmtError::Format(format!("{}: {e}", path.display())))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(AmtError::UnsupportedVersion {
                found: manifest.format_version,
                expected: MANIFEST_VERSION,
            });
        }
        Ok(manifest)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Where the audio of a generated dataset comes from.
#[derive(Debug, Clone)]
pub enum LabelSource {
    Recipe(RandomTrackRecipe),
    /// Label files (`.csv` or `.mid`) from a directory, rendered with the timbre
    /// unless `audio_dir` supplies a WAV with the same basename.
    External { label_dir: PathBuf, audio_dir: Option<PathBuf> },
}

#[derive(Debug, Clone)]
pub struct GenerateRequest {
    pub name: String,
    pub source: LabelSource,
    pub timbre: TimbreProfile,
    pub sample_rate_hz: u32,
    pub features: FeatureConfig,
    /// Seed of the train/validation/test split.
    pub split_seed: u64,
    pub out_dir: PathBuf,
    pub cache: Option<SpectrogramCache>,
}

#[derive(Debug, Clone)]
pub struct GenerateOutcome {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
    /// Label or audio files without a counterpart, which were left out.
    pub skipped: Vec<String>,
}

fn external_labels(label_dir: &Path, audio_dir: Option<&Path>) -> Result<(Vec<(String, NoteTrack, Option<PathBuf>)>, Vec<String>)> {
    let mut labels = BTreeMap::new();
    for entry in fs::read_dir(label_dir)? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()).map(str::to_string) else {
            continue;
        };
        let track = match ext.as_str() {
            "csv" => parse_note_csv(stem.clone(), &fs::read_to_string(&path)?)?,
            "mid" | "midi" => parse_standard_midi(stem.clone(), &fs::read(&path)?)?,
            _ => continue,
        };
        labels.insert(stem, track);
    }
    let mut skipped = Vec::new();
    let mut audio = BTreeMap::new();
    if let Some(dir) = audio_dir {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let is_wav = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("wav"));
            if let (true, Some(stem)) = (is_wav, path.file_stem().and_then(|s| s.to_str())) {
                audio.insert(stem.to_string(), path.clone());
            }
        }
        for stem in audio.keys().filter(|s| !labels.contains_key(*s)) {
            skipped.push(format!("{stem}.wav: no label file"));
        }
    }
    let mut out = Vec::new();
    for (stem, track) in labels {
        match (audio_dir, audio.remove(&stem)) {
            (None, _) => out.push((stem, track, None)),
            (Some(_), Some(path)) => out.push((stem, track, Some(path))),
            (Some(_), None) => skipped.push(format!("{stem}: no matching WAV")),
        }
    }
    Ok((out, skipped))
}

/// Writes labels, 16-bit WAVs and cached features for every track, then
/// the manifest. Output bytes depend only on the request.
pub fn generate_dataset(request: &GenerateRequest) -> Result<GenerateOutcome> {
    request.features.cqt.validate(request.sample_rate_hz)?;
    let labels_dir = request.out_dir.join("labels");
    let audio_dir = request.out_dir.join("audio");
    fs::create_dir_all(&labels_dir)?;
    fs::create_dir_all(&audio_dir)?;

    let (items, skipped): (Vec<(String, NoteTrack, Option<PathBuf>)>, Vec<String>) = match &request.source {
        LabelSource::Recipe(recipe) => {
            recipe.validate()?;
            let items = (0..recipe.n_tracks)
                .map(|i| {
                    let id = format!("{}-{i:04}", request.name);
                    let track = recipe.generate_track(&id, i)?;
                    Ok((id, track, None))
                })
                .collect::<Result<Vec<_>>>()?;
            (items, Vec::new())
        }
        LabelSource::External { label_dir, audio_dir } => external_labels(label_dir, audio_dir.as_deref())?,
    };
    for s in &skipped {
        log::warn!("skipping {s}");
    }
    let synth = SynthConfig {
        sample_rate_hz: request.sample_rate_hz,
        ..SynthConfig::new(request.timbre.clone())
    };
    let tracks: Vec<ManifestTrack> = items
        .par_iter()
        .map(|(id, notes, external)| {
            let wav = match external {
                Some(path) => fs::read(path)?,
                None => {
                    let mut bytes = Vec::new();
                    write_wav(&render(notes, &synth)?, &mut bytes)?;
                    bytes
                }
            };
            let audio = parse_wav(&wav)?;
            if audio.sample_rate_hz != request.sample_rate_hz {
                return Err(AmtError::Validation(format!(
                    "{id}: audio is {} Hz, dataset is {} Hz",
                    audio.sample_rate_hz, request.sample_rate_hz
                )));
            }
            let csv = notes.to_csv();
            let labels = format!("labels/{id}.csv");
            let audio_rel = format!("audio/{id}.wav");
            fs::write(request.out_dir.join(&labels), &csv)?;
            fs::write(request.out_dir.join(&audio_rel), &wav)?;
            if let Some(cache) = &request.cache {
                request.features.extract(&audio, Some(cache))?;
            }
            Ok(ManifestTrack {
                id: id.clone(),
                labels,
                audio: audio_rel,
                labels_sha256: sha256_hex(csv.as_bytes()),
                audio_sha256: sha256_hex(&wav),
            })
        })
        .collect::<Result<_>>()?;
    let split = split_tracks(tracks.iter().map(|t| t.id.clone()), request.split_seed)?;
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        name: request.name.clone(),
        timbre: request.timbre.name.clone(),
        sample_rate_hz: request.sample_rate_hz,
        features: request.features,
        tracks,
        split,
    };
    let manifest_path = request.out_dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, manifest.to_json())?;
    Ok(GenerateOutcome {
        manifest,
        manifest_path,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

/// Tracks of one or more datasets with their (dataset-wise) merged split.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub name: String,
    pub tracks: Vec<LabeledTrack>,
    pub split: SplitAssignment,
}

impl LoadedDataset {
    pub fn part(&self, which: SplitName) -> Vec<LabeledTrack> {
        let ids = match which {
            SplitName::Train => &self.split.train,
            SplitName::Valid => &self.split.valid,
            SplitName::Test => &self.split.test,
        };
        self.tracks.iter().filter(|t| ids.contains(&t.id)).cloned().collect()
    }

    /// Dataset-wise union: the train parts merge into one train part, and
    /// likewise for validation and test.
    pub fn union(parts: Vec<LoadedDataset>) -> Result<LoadedDataset> {
        if parts.is_empty() {
            return Err(AmtError::Argument("no datasets to merge".into()));
        }
        let name = parts.iter().map(|p| p.name.as_str()).collect::<Vec<_>>().join("+");
        let split = SplitAssignment::union(parts.iter().map(|p| &p.split), parts[0].split.seed);
        let mut tracks = Vec::new();
        for p in parts {
            tracks.extend(p.tracks);
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = tracks.iter().find(|t| !seen.insert(t.id.clone())) {
            return Err(AmtError::Validation(format!("track id {} appears in two datasets", dup.id)));
        }
        Ok(LoadedDataset { name, tracks, split })
    }
}

/// Reads a dataset from its manifest, verifying file digests and computing
/// (or reading cached) features.
pub fn load_dataset(manifest_path: &Path, cache: Option<&SpectrogramCache>) -> Result<LoadedDataset> {
    let manifest = DatasetManifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let tracks = manifest
        .tracks
        .par_iter()
        .map(|t| {
            let csv = fs::read(root.join(&t.labels))?;
            let wav = fs::read(root.join(&t.audio))?;
            if sha256_hex(&csv) != t.labels_sha256 || sha256_hex(&wav) != t.audio_sha256 {
                return Err(AmtError::Validation(format!("{}: files do not match the manifest digests", t.id)));
            }
            let text = String::from_utf8(csv).map_err(|_| AmtError::Format(format!("{}: labels are not UTF-8", t.id)))?;
            let notes = parse_note_csv(t.id.clone(), &text)?;
            let audio: AudioBuffer = parse_wav(&wav)?;
            let (features, _) = manifest.features.extract(&audio, cache)?;
            LabeledTrack::new(t.id.clone(), audio.sample_rate_hz, notes, features)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset {
        name: manifest.name,
        tracks,
        split: manifest.split,
    })
}
