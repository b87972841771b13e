use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use amt_core::dataset::{FeatureConfig, LabeledTrack};
use amt_core::decoding::decode_frames;
use amt_core::experiments::{
    generate_dataset, load_dataset, run_plan, sha256_hex, timbre_for, DatasetSpec, ExperimentPlan, GenerateRequest,
    LabelSource, LoadedDataset, RunOptions, SplitName, StageStatus, MANIFEST_FILE,
};
use amt_core::metrics::{
    evaluate_model, frame_metrics, note_metrics, predict_track, Aggregation, MatchMode, ResultsTable, TrackScores,
};
use amt_core::midi::{parse_standard_midi, write_standard_midi};
use amt_core::network::{load_checkpoint, peek_checkpoint_dtype, save_checkpoint, Checkpoint, DType};
use amt_core::notes::{parse_note_csv, rasterize, NoteTrack, DEFAULT_FRAME_PERIOD_SEC, DEFAULT_PITCH_COUNT, DEFAULT_PITCH_MIN};
use amt_core::spectral::{cqt, SpectrogramCache, Window};
use amt_core::synth::{render, SynthConfig};
use amt_core::training::{train, TrainConfig, TrainOutcome, TrainStart};
use amt_core::wav::{parse_wav, write_wav};
use amt_core::AmtError;
use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;

use crate::settings::Settings;
use crate::{
    AggregationArg, Cli, Command, DecodeArgs, EvaluateArgs, FinetuneArgs, GenerateArgs, PlanCommand, ScoreArgs,
    SpectrogramArgs, SplitArg, SynthArgs, TrainArgs, TrainingFlags, WindowArg,
};

struct Ctx {
    seed: Option<u64>,
    settings: Settings,
    cache: Option<SpectrogramCache>,
    deterministic: bool,
    json: bool,
}

impl Ctx {
    fn emit(&self, summary: serde_json::Value, text: &str) {
        if self.json {
            println!("{summary:#}");
        } else {
            print!("{text}");
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.deterministic {
        // ignore the error when a pool already exists (tests call run twice)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
    let ctx = Ctx {
        seed: cli.seed,
        settings: Settings::load(cli.config.as_deref())?,
        cache: cli.cache_dir.map(SpectrogramCache::new),
        deterministic: cli.deterministic,
        json: cli.json,
    };
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Spectrogram(a) => spectrogram(&ctx, a),
        Command::Generate(a) => generate(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Finetune(a) => finetune(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Decode(a) => decode(&ctx, a),
        Command::Score(a) => score(&ctx, a),
        Command::Plan {
            command: PlanCommand::Run { plan, force },
        } => plan_run(&ctx, &plan, force),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(AmtError::from).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(AmtError::from)?;
    }
    fs::write(path, bytes).map_err(AmtError::from).with_context(|| format!("writing {}", path.display()))
}

fn is_midi(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("mid") || e.eq_ignore_ascii_case("midi"))
}

fn read_notes(path: &Path) -> Result<NoteTrack> {
    let bytes = read(path)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let track = if is_midi(path) {
        parse_standard_midi(id, &bytes)?
    } else {
        let text = String::from_utf8(bytes).map_err(|_| AmtError::Format(format!("{} is not UTF-8", path.display())))?;
        parse_note_csv(id, &text)?
    };
    Ok(track)
}

fn write_notes(path: &Path, track: &NoteTrack) -> Result<()> {
    if is_midi(path) {
        write(path, write_standard_midi(track))
    } else {
        write(path, track.to_csv())
    }
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let notes = read_notes(&a.notes)?;
    let spec = DatasetSpec {
        name: "synth".into(),
        timbre: a.timbre.clone(),
        recipe: None,
        labels_dir: None,
        audio_dir: None,
        split_seed: 0,
    };
    let s = &ctx.settings.synth;
    let mut config = SynthConfig::new(timbre_for(&spec)?);
    config.sample_rate_hz = a.sample_rate.or(s.sample_rate_hz).unwrap_or(config.sample_rate_hz);
    config.noise_floor_amplitude = a.noise.or(s.noise_floor_amplitude).unwrap_or(0.0);
    config.peak_normalize = !a.no_normalize && s.peak_normalize.unwrap_or(true);
    config.noise_seed = ctx.seed.unwrap_or(0);
    let audio = render(&notes, &config)?;
    let mut bytes = Vec::new();
    write_wav(&audio, &mut bytes)?;
    write(&a.output, &bytes)?;
    ctx.emit(
        json!({
            "output": a.output,
            "samples": audio.len(),
            "sample_rate_hz": audio.sample_rate_hz,
            "notes": notes.len(),
            "sha256": sha256_hex(&bytes),
        }),
        &format!(
            "wrote {} ({} notes, {:.2} s at {} Hz)\n",
            a.output.display(),
            notes.len(),
            audio.duration_sec(),
            audio.sample_rate_hz
        ),
    );
    Ok(())
}

fn spectrogram(ctx: &Ctx, a: SpectrogramArgs) -> Result<()> {
    let audio = parse_wav(&read(&a.audio)?)?;
    let mut features: FeatureConfig = ctx.settings.features;
    let p = &mut features.cqt;
    p.f_min_hz = a.f_min.unwrap_or(p.f_min_hz);
    p.bins_per_octave = a.bins_per_octave.unwrap_or(p.bins_per_octave);
    p.n_bins = a.n_bins.unwrap_or(p.n_bins);
    p.hop_samples = a.hop.unwrap_or(p.hop_samples);
    if let Some(w) = a.window {
        p.window = match w {
            WindowArg::Hann => Window::Hann,
            WindowArg::Rectangular => Window::Rectangular,
        };
    }
    features.log_gamma = a.log_gamma.unwrap_or(features.log_gamma);
    let (spec, status) = if features.log_gamma == 0.0 {
        (cqt(&audio, &features.cqt)?, None)
    } else {
        let (s, status) = features.extract(&audio, ctx.cache.as_ref())?;
        (s, Some(status))
    };
    let mut csv = String::new();
    for t in 0..spec.frames() {
        let row: Vec<String> = spec.row(t).iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(csv, "{}", row.join(","));
    }
    write(&a.output, &csv)?;
    ctx.emit(
        json!({
            "output": a.output,
            "frames": spec.frames(),
            "bins": spec.bins(),
            "frame_period_sec": spec.frame_period_sec(),
            "cache": status.map(|s| format!("{s:?}").to_lowercase()),
            "sha256": sha256_hex(csv.as_bytes()),
        }),
        &format!(
            "wrote {} ({} frames x {} bins)\n",
            a.output.display(),
            spec.frames(),
            spec.bins()
        ),
    );
    Ok(())
}

fn generate(ctx: &Ctx, a: GenerateArgs) -> Result<()> {
    let spec = DatasetSpec {
        name: a.name.clone(),
        timbre: a.timbre.clone(),
        recipe: None,
        labels_dir: a.labels_dir.clone(),
        audio_dir: a.audio_dir.clone(),
        split_seed: ctx.seed.unwrap_or(0),
    };
    let source = match a.labels_dir {
        Some(label_dir) => LabelSource::External {
            label_dir,
            audio_dir: a.audio_dir,
        },
        None => {
            let mut recipe = ctx.settings.recipe.clone();
            recipe.n_tracks = a.n_tracks.unwrap_or(recipe.n_tracks);
            recipe.seed = ctx.seed.unwrap_or(recipe.seed);
            LabelSource::Recipe(recipe)
        }
    };
    let outcome = generate_dataset(&GenerateRequest {
        name: a.name,
        source,
        timbre: timbre_for(&spec)?,
        sample_rate_hz: a.sample_rate.or(ctx.settings.synth.sample_rate_hz).unwrap_or(16_000),
        features: ctx.settings.features,
        split_seed: spec.split_seed,
        out_dir: a.output,
        cache: ctx.cache.clone(),
    })?;
    let m = &outcome.manifest;
    ctx.emit(
        json!({
            "manifest": outcome.manifest_path,
            "tracks": m.tracks.len(),
            "split": { "train": m.split.train.len(), "valid": m.split.valid.len(), "test": m.split.test.len() },
            "skipped": outcome.skipped,
        }),
        &format!(
            "wrote {} ({} tracks: {}/{}/{} train/valid/test)\n",
            outcome.manifest_path.display(),
            m.tracks.len(),
            m.split.train.len(),
            m.split.valid.len(),
            m.split.test.len()
        ),
    );
    if !outcome.skipped.is_empty() {
        return Err(AmtError::Validation(format!("unmatched files skipped: {}", outcome.skipped.join(", "))).into());
    }
    Ok(())
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn load_datasets(ctx: &Ctx, paths: &[PathBuf]) -> Result<LoadedDataset> {
    let parts = paths
        .iter()
        .map(|p| {
            let m = manifest_path(p);
            load_dataset(&m, ctx.cache.as_ref()).with_context(|| format!("loading dataset {}", m.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedDataset::union(parts)?)
}

fn train_config(ctx: &Ctx, flags: &TrainingFlags) -> Result<TrainConfig> {
    let mut config = ctx.settings.train_config()?;
    config.seed = ctx.seed.unwrap_or(config.seed);
    config.max_epochs = flags.epochs.unwrap_or(config.max_epochs);
    config.learning_rate = flags.learning_rate.unwrap_or(config.learning_rate);
    config.batch_size = flags.batch_size.unwrap_or(config.batch_size);
    config.validate_every_epochs = flags.validate_every.unwrap_or(config.validate_every_epochs);
    if ctx.deterministic {
        config.parallel = false;
    }
    Ok(config)
}

fn load_any_checkpoint(path: &Path) -> Result<Checkpoint<f32>> {
    let bytes = read(path)?;
    let (_, dtype) = peek_checkpoint_dtype(&bytes)?;
    let ck = match dtype {
        DType::F32 => load_checkpoint::<f32, _>(bytes.as_slice())?,
        DType::F64 => {
            let wide = load_checkpoint::<f64, _>(bytes.as_slice())?;
            let mut config = wide.config;
            config.dtype = DType::F32;
            Checkpoint {
                config,
                meta: wide.meta,
                params: wide.params.cast(),
            }
        }
    };
    Ok(ck)
}

fn run_training(ctx: &Ctx, flags: &TrainingFlags, start: TrainStart) -> Result<()> {
    let config = train_config(ctx, flags)?;
    let data = load_datasets(ctx, &flags.datasets)?;
    fs::create_dir_all(&flags.output).map_err(AmtError::from)?;
    let result = train(
        start,
        &data.part(SplitName::Train),
        &data.part(SplitName::Valid),
        &config,
        &data.name,
    );
    let outcome: TrainOutcome = match result {
        Ok(o) => o,
        Err(e) => {
            if let Some(ck) = &e.last_good {
                let mut bytes = Vec::new();
                save_checkpoint(ck.as_ref(), &mut bytes)?;
                write(&flags.output.join("last-good.amtf"), bytes)?;
            }
            return Err(e.into());
        }
    };
    let mut digests = serde_json::Map::new();
    for (file, ck) in [("last.amtf", &outcome.last), ("best.amtf", &outcome.best)] {
        let mut bytes = Vec::new();
        save_checkpoint(ck, &mut bytes)?;
        digests.insert(file.into(), sha256_hex(&bytes).into());
        write(&flags.output.join(file), bytes)?;
    }
    let csv = outcome.report.to_csv();
    digests.insert("report.csv".into(), sha256_hex(csv.as_bytes()).into());
    write(&flags.output.join("report.csv"), &csv)?;
    let last = outcome.report.records.last();
    ctx.emit(
        json!({
            "output": flags.output,
            "epochs": config.max_epochs,
            "best_epoch": outcome.best.meta.epoch,
            "final_frame_f1": last.map(|r| r.frame.f1),
            "final_note_f1": last.map(|r| r.note.f1),
            "digests": digests,
        }),
        &format!("{}wrote checkpoints to {}\n", csv, flags.output.display()),
    );
    Ok(())
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    run_training(ctx, &a.common, TrainStart::Scratch(ctx.settings.model))
}

fn finetune(ctx: &Ctx, a: FinetuneArgs) -> Result<()> {
    let ck = load_any_checkpoint(&a.checkpoint)?;
    run_training(ctx, &a.common, TrainStart::Checkpoint(ck))
}

#[derive(Serialize)]
struct EvaluationSummary {
    dataset: String,
    split: String,
    tracks: usize,
    scores: TrackScores,
}

fn evaluate(ctx: &Ctx, a: EvaluateArgs) -> Result<()> {
    let ck = load_any_checkpoint(&a.checkpoint)?;
    let (split, split_name) = match a.split {
        SplitArg::Train => (SplitName::Train, "train"),
        SplitArg::Valid => (SplitName::Valid, "valid"),
        SplitArg::Test => (SplitName::Test, "test"),
    };
    let aggregation = match a.aggregation {
        AggregationArg::MeanOfTracks => Aggregation::MeanOfTracks,
        AggregationArg::Pooled => Aggregation::Pooled,
    };
    let s = &ctx.settings;
    let mut table = ResultsTable::default();
    let mut summaries = Vec::new();
    for path in &a.datasets {
        let data = load_datasets(ctx, std::slice::from_ref(path))?;
        let tracks = data.part(split);
        let report = evaluate_model(&ck.params, &ck.config, &tracks, &s.decode, &s.tolerances, aggregation)?;
        table.push_scores(&data.name, &report.aggregate);
        summaries.push(EvaluationSummary {
            dataset: data.name,
            split: split_name.into(),
            tracks: tracks.len(),
            scores: report.aggregate,
        });
    }
    if let Some(out) = &a.output {
        write(&out.join("results.csv"), table.to_csv())?;
        write(&out.join("results.txt"), table.to_text())?;
    }
    ctx.emit(serde_json::to_value(&summaries)?, &table.to_text());
    Ok(())
}

fn decode(ctx: &Ctx, a: DecodeArgs) -> Result<()> {
    let ck = load_any_checkpoint(&a.checkpoint)?;
    let audio = parse_wav(&read(&a.audio)?)?;
    let (features, _) = ctx.settings.features.extract(&audio, ctx.cache.as_ref())?;
    let id = a.audio.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let track = LabeledTrack::new(id.clone(), audio.sample_rate_hz, NoteTrack::empty(id.clone()), features)?;
    let probs = predict_track(&ck.params, &ck.config, &track)?;
    let mut config = ctx.settings.decode;
    config.threshold = a.threshold.unwrap_or(config.threshold);
    config.min_duration_frames = a.min_duration.unwrap_or(config.min_duration_frames);
    config.gap_tolerance_frames = a.gap_tolerance.unwrap_or(config.gap_tolerance_frames);
    let mut notes = decode_frames(&probs, &config)?;
    notes.set_id(id);
    write_notes(&a.output, &notes)?;
    ctx.emit(
        json!({ "output": a.output, "notes": notes.len(), "frames": probs.frames() }),
        &format!("wrote {} ({} notes)\n", a.output.display(), notes.len()),
    );
    Ok(())
}

fn score(ctx: &Ctx, a: ScoreArgs) -> Result<()> {
    let reference = read_notes(&a.reference)?;
    let estimate = read_notes(&a.estimate)?;
    let mut tol = ctx.settings.tolerances;
    tol.onset_tol_sec = a.onset_tolerance.unwrap_or(tol.onset_tol_sec);
    tol.offset_ratio = a.offset_ratio.unwrap_or(tol.offset_ratio);
    tol.offset_min_tol_sec = a.offset_min_tolerance.unwrap_or(tol.offset_min_tol_sec);
    tol.validate()?;
    let roll = |t: &NoteTrack| rasterize(t, DEFAULT_FRAME_PERIOD_SEC, DEFAULT_PITCH_MIN, DEFAULT_PITCH_COUNT);
    let scores = TrackScores {
        frame: frame_metrics(&roll(&reference)?.roll, &roll(&estimate)?.roll)?,
        note: note_metrics(&reference, &estimate, &tol, MatchMode::Onset),
        note_with_offset: note_metrics(&reference, &estimate, &tol, MatchMode::OnsetOffset),
    };
    let mut table = ResultsTable::default();
    table.push_scores(reference.id(), &scores);
    ctx.emit(serde_json::to_value(scores)?, &table.to_text());
    Ok(())
}

fn plan_run(ctx: &Ctx, path: &Path, force: bool) -> Result<()> {
    let plan = ExperimentPlan::read(path).with_context(|| format!("reading plan {}", path.display()))?;
    let options = RunOptions {
        cache_dir: ctx.cache.as_ref().map(|c| c.dir().to_path_buf()),
        deterministic: ctx.deterministic,
        force,
    };
    let outcome = run_plan(&plan, &options)?;
    let mut text = String::new();
    for s in &outcome.stages {
        let status = format!("{:?}", s.status).to_lowercase();
        let _ = write!(text, "{:<10} {:<16} {}", status, s.kind, s.name);
        if let Some(e) = &s.error {
            let _ = write!(text, ": {e}");
        }
        text.push('\n');
    }
    if let Some(c) = &outcome.comparison {
        text.push('\n');
        text.push_str(&c.to_text());
    }
    ctx.emit(serde_json::to_value(&outcome)?, &text);
    if outcome.failed() {
        let failed: Vec<&str> = outcome
            .stages
            .iter()
            .filter(|s| s.status == StageStatus::Failed)
            .map(|s| s.name.as_str())
            .collect();
        return Err(AmtError::Validation(format!("failed stages: {}", failed.join(", "))).into());
    }
    Ok(())
}
