//! Experiment orchestration: dataset generation, pretraining, fine-tuning,
//! evaluation and the transfer comparison report, driven by a TOML plan.

mod datasets;
mod report;

pub use datasets::{
    generate_dataset, load_dataset, sha256_hex, DatasetManifest, GenerateOutcome, GenerateRequest, LabelSource,
    LoadedDataset, ManifestTrack, RandomTrackRecipe, SplitName, MANIFEST_FILE, MANIFEST_VERSION,
};
pub use report::{ComparisonRow, ComparisonSpec, ComparisonReport};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::FeatureConfig;
use crate::error::{AmtError, Result};
use crate::metrics::{evaluate_model, Aggregation, EvaluationReport, ResultsTable};
use crate::network::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig};
use crate::spectral::SpectrogramCache;
use crate::synth::{builtin_timbre, TimbreProfile, DEFAULT_SAMPLE_RATE_HZ};
use crate::training::{train, transfer_init, TrainConfig, TrainReport, TrainStart};

pub const STAMP_FILE: &str = "stamp.json";

/// One dataset the plan can generate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    /// Built-in timbre name or path to a timbre TOML file.
    pub timbre: String,
    #[serde(default)]
    pub recipe: Option<RandomTrackRecipe>,
    /// Use label files from this directory instead of a recipe.
    #[serde(default)]
    pub labels_dir: Option<PathBuf>,
    /// WAVs matched to the label files by basename.
    #[serde(default)]
    pub audio_dir: Option<PathBuf>,
    #[serde(default)]
    pub split_seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointChoice {
    #[default]
    Best,
    Last,
}

impl CheckpointChoice {
    fn file(self) -> &'static str {
        match self {
            CheckpointChoice::Best => "best.amtf",
            CheckpointChoice::Last => "last.amtf",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Stage {
    Generate {
        name: String,
        dataset: String,
    },
    Train {
        name: String,
        datasets: Vec<String>,
        /// Overrides of the plan-wide training settings.
        #[serde(default)]
        train: toml::Table,
    },
    TransferTrain {
        name: String,
        /// Training stage to start from, or a checkpoint file.
        from: String,
        #[serde(default)]
        from_checkpoint: CheckpointChoice,
        datasets: Vec<String>,
        #[serde(default)]
        train: toml::Table,
    },
    Evaluate {
        name: String,
        /// Training stage whose checkpoint is scored, or a checkpoint file.
        checkpoint: String,
        #[serde(default)]
        which: CheckpointChoice,
        datasets: Vec<String>,
        #[serde(default = "default_split")]
        split: SplitName,
        #[serde(default)]
        aggregation: Aggregation,
    },
}

fn default_split() -> SplitName {
    SplitName::Test
}

impl Stage {
    pub fn name(&self) -> &str {
        match self {
            Stage::Generate { name, .. }
            | Stage::Train { name, .. }
            | Stage::TransferTrain { name, .. }
            | Stage::Evaluate { name, .. } => name,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Stage::Generate { .. } => "generate",
            Stage::Train { .. } => "train",
            Stage::TransferTrain { .. } => "transfer-train",
            Stage::Evaluate { .. } => "evaluate",
        }
    }
}

fn default_sample_rate() -> u32 {
    DEFAULT_SAMPLE_RATE_HZ
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    /// Relative paths are resolved against the plan file's directory.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_sample_rate")]
    pub sample_rate_hz: u32,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub model: ModelConfig,
    /// Plan-wide training settings layered over the desk-scale defaults.
    #[serde(default)]
    pub train: toml::Table,
    #[serde(default)]
    pub datasets: Vec<DatasetSpec>,
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub comparisons: Vec<ComparisonSpec>,
}

fn merge_tables(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Which upstream stage or file a stage depends on.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Ref {
    Stage(String),
    File(PathBuf),
}

impl ExperimentPlan {
    pub fn from_toml(text: &str) -> Result<ExperimentPlan> {
        let plan: ExperimentPlan = toml::from_str(text).map_err(|e| AmtError::Config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    /// Reads a plan file; relative paths in it become relative to its directory.
    pub fn read(path: &Path) -> Result<ExperimentPlan> {
        let mut plan = Self::from_toml(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        plan.resolve_paths(base);
        Ok(plan)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        for d in &mut self.datasets {
            if let Some(p) = d.labels_dir.as_mut() {
                fix(p);
            }
            if let Some(p) = d.audio_dir.as_mut() {
                fix(p);
            }
            if d.timbre.ends_with(".toml") {
                let mut p = PathBuf::from(&d.timbre);
                fix(&mut p);
                d.timbre = p.to_string_lossy().into_owned();
            }
        }
        for s in &mut self.stages {
            match s {
                Stage::TransferTrain { from: r, .. } | Stage::Evaluate { checkpoint: r, .. } if r.ends_with(".amtf") => {
                    let mut p = PathBuf::from(&*r);
                    fix(&mut p);
                    *r = p.to_string_lossy().into_owned();
                }
                _ => {}
            }
        }
    }

    /// Training settings for a stage: desk-scale defaults, then the plan's
    /// table, then the stage's own table.
    pub fn train_config(&self, overrides: &toml::Table) -> Result<TrainConfig> {
        let mut table = match toml::Value::try_from(TrainConfig::desk_scale()) {
            Ok(toml::Value::Table(t)) => t,
            _ => unreachable!("train config serializes to a table"),
        };
        merge_tables(&mut table, &self.train);
        merge_tables(&mut table, overrides);
        let config: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| AmtError::Config(format!("train settings: {e}")))?;
        config.validate(self.features.cqt.hop_samples)?;
        Ok(config)
    }

    fn stage(&self, name: &str) -> Option<&Stage> {
        self.stages.iter().find(|s| s.name() == name)
    }

    fn generator_of(&self, dataset: &str) -> Option<&Stage> {
        self.stages
            .iter()
            .find(|s| matches!(s, Stage::Generate { dataset: d, .. } if d == dataset))
    }

    fn checkpoint_ref(&self, r: &str) -> Ref {
        if self.stage(r).is_some() {
            Ref::Stage(r.to_string())
        } else {
            Ref::File(PathBuf::from(r))
        }
    }

    /// Stages this stage reads from.
    fn dependencies(&self, stage: &Stage) -> Vec<String> {
        let datasets = |names: &[String]| -> Vec<String> {
            names
                .iter()
                .filter_map(|d| self.generator_of(d).map(|g| g.name().to_string()))
                .collect()
        };
        match stage {
            Stage::Generate { .. } => Vec::new(),
            Stage::Train { datasets: d, .. } => datasets(d),
            Stage::TransferTrain { from, datasets: d, .. } | Stage::Evaluate { checkpoint: from, datasets: d, .. } => {
                let mut deps = datasets(d);
                if let Ref::Stage(s) = self.checkpoint_ref(from) {
                    deps.push(s);
                }
                deps
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AmtError::Validation(m));
        self.model.validate()?;
        self.features.cqt.validate(self.sample_rate_hz)?;
        if self.model.input_bins != self.features.cqt.n_bins {
            return bad(format!(
                "model input_bins {} differs from CQT n_bins {}",
                self.model.input_bins, self.features.cqt.n_bins
            ));
        }
        let mut names = BTreeSet::new();
        for s in &self.stages {
            if !names.insert(s.name()) {
                return bad(format!("duplicate stage name {}", s.name()));
            }
        }
        let mut dataset_names = BTreeSet::new();
        for d in &self.datasets {
            if !dataset_names.insert(d.name.as_str()) {
                return bad(format!("duplicate dataset name {}", d.name));
            }
            if d.recipe.is_some() == d.labels_dir.is_some() {
                return bad(format!("dataset {} needs exactly one of recipe or labels_dir", d.name));
            }
            if let Some(r) = &d.recipe {
                r.validate()?;
            }
        }
        for s in &self.stages {
            let check_datasets = |ds: &[String]| -> Result<()> {
                if ds.is_empty() {
                    return bad(format!("stage {} lists no datasets", s.name()));
                }
                for d in ds {
                    if self.generator_of(d).is_none() {
                        return bad(format!("stage {} uses dataset {d}, which no generate stage produces", s.name()));
                    }
                }
                Ok(())
            };
            match s {
                Stage::Generate { dataset, .. } => {
                    if !dataset_names.contains(dataset.as_str()) {
                        return bad(format!("stage {} generates unknown dataset {dataset}", s.name()));
                    }
                }
                Stage::Train { datasets, train, .. } => {
                    check_datasets(datasets)?;
                    self.train_config(train)?;
                }
                Stage::TransferTrain { from, datasets, train, .. } => {
                    check_datasets(datasets)?;
                    self.train_config(train)?;
                    self.check_checkpoint_ref(s.name(), from)?;
                }
                Stage::Evaluate { checkpoint, datasets, .. } => {
                    check_datasets(datasets)?;
                    self.check_checkpoint_ref(s.name(), checkpoint)?;
                }
            }
        }
        for c in &self.comparisons {
            c.validate(self)?;
        }
        self.execution_order().map(|_| ())
    }

    fn check_checkpoint_ref(&self, stage: &str, r: &str) -> Result<()> {
        match self.checkpoint_ref(r) {
            Ref::Stage(s) => match self.stage(&s) {
                Some(Stage::Train { .. } | Stage::TransferTrain { .. }) => Ok(()),
                _ => Err(AmtError::Validation(format!("stage {stage}: {s} is not a training stage"))),
            },
            Ref::File(p) if p.extension().is_some_and(|e| e == "amtf") => Ok(()),
            Ref::File(p) => Err(AmtError::Validation(format!(
                "stage {stage}: {} is neither a training stage nor a .amtf checkpoint",
                p.display()
            ))),
        }
    }

    /// Stage names in dependency order; ties keep declaration order.
    pub fn execution_order(&self) -> Result<Vec<String>> {
        let mut done: Vec<String> = Vec::new();
        let mut pending: Vec<&Stage> = self.stages.iter().collect();
        while !pending.is_empty() {
            let ready = pending
                .iter()
                .position(|s| self.dependencies(s).iter().all(|d| done.contains(d)));
            match ready {
                Some(i) => done.push(pending.remove(i).name().to_string()),
                None => {
                    let names: Vec<&str> = pending.iter().map(|s| s.name()).collect();
                    return Err(AmtError::Validation(format!(
                        "stages form a dependency cycle: {}",
                        names.join(", ")
                    )));
                }
            }
        }
        Ok(done)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Spectrogram cache; defaults to `<output_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    /// Serial execution everywhere.
    pub deterministic: bool,
    /// Re-run stages even when their stamps match.
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Skipped,
    Failed,
    /// Not run because a stage it depends on failed.
    Blocked,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageResult {
    pub name: String,
    pub kind: String,
    pub status: StageStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Output file (relative to the stage directory) → SHA-256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub stages: Vec<StageResult>,
    pub comparison: Option<ComparisonReport>,
}

impl PlanOutcome {
    pub fn failed(&self) -> bool {
        self.stages
            .iter()
            .any(|s| matches!(s.status, StageStatus::Failed | StageStatus::Blocked))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Stamp {
    stage: String,
    input_digest: String,
    outputs: BTreeMap<String, String>,
}

/// Output of an evaluate stage, one entry per dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEvaluation {
    pub dataset: String,
    pub report: EvaluationReport,
}

pub fn timbre_for(spec: &DatasetSpec) -> Result<TimbreProfile> {
    if let Some(t) = builtin_timbre(&spec.timbre) {
        return Ok(t);
    }
    let path = Path::new(&spec.timbre);
    if path.exists() {
        return TimbreProfile::from_text(&fs::read_to_string(path)?);
    }
    Err(AmtError::Config(format!(
        "dataset {}: {:?} is neither a built-in timbre nor a timbre file",
        spec.name, spec.timbre
    )))
}

struct Runner<'a> {
    plan: &'a ExperimentPlan,
    options: &'a RunOptions,
    cache: SpectrogramCache,
    loaded: BTreeMap<String, LoadedDataset>,
}

impl<'a> Runner<'a> {
    fn stage_dir(&self, name: &str) -> PathBuf {
        self.plan.output_dir.join(name)
    }

    fn manifest_path(&self, dataset: &str) -> PathBuf {
        let stage = self.plan.generator_of(dataset).expect("validated");
        self.stage_dir(stage.name()).join(MANIFEST_FILE)
    }

    fn dataset(&mut self, name: &str) -> Result<LoadedDataset> {
        if !self.loaded.contains_key(name) {
            let ds = load_dataset(&self.manifest_path(name), Some(&self.cache))?;
            self.loaded.insert(name.to_string(), ds);
        }
        Ok(self.loaded[name].clone())
    }

    fn datasets(&mut self, names: &[String]) -> Result<LoadedDataset> {
        let parts = names.iter().map(|n| self.dataset(n)).collect::<Result<Vec<_>>>()?;
        LoadedDataset::union(parts)
    }

    fn checkpoint_path(&self, r: &str, which: CheckpointChoice) -> PathBuf {
        match self.plan.checkpoint_ref(r) {
            Ref::Stage(s) => self.stage_dir(&s).join(which.file()),
            Ref::File(p) => p,
        }
    }

    fn file_digest(path: &Path) -> Result<String> {
        Ok(sha256_hex(&fs::read(path)?))
    }

    /// Digest over the stage definition, the settings it uses and the
    /// digests of everything it reads.
    fn input_digest(&self, stage: &Stage) -> Result<String> {
        let mut parts: Vec<String> = vec![
            serde_json::to_string(stage).expect("stage serializes"),
            format!("{}", self.plan.sample_rate_hz),
            serde_json::to_string(&self.plan.features).expect("features serialize"),
        ];
        let datasets: &[String] = match stage {
            Stage::Generate { dataset, .. } => {
                let spec = self.plan.datasets.iter().find(|d| &d.name == dataset).expect("validated");
                parts.push(serde_json::to_string(spec).expect("dataset serializes"));
                parts.push(timbre_for(spec)?.to_text());
                &[]
            }
            Stage::Train { datasets, train, .. } => {
                parts.push(serde_json::to_string(&self.plan.model).expect("model serializes"));
                parts.push(serde_json::to_string(&self.plan.train_config(train)?).expect("config serializes"));
                datasets
            }
            Stage::TransferTrain {
                from,
                from_checkpoint,
                datasets,
                train,
                ..
            } => {
                parts.push(serde_json::to_string(&self.plan.model).expect("model serializes"));
                parts.push(serde_json::to_string(&self.plan.train_config(train)?).expect("config serializes"));
                parts.push(Self::file_digest(&self.checkpoint_path(from, *from_checkpoint))?);
                datasets
            }
            Stage::Evaluate {
                checkpoint,
                which,
                datasets,
                ..
            } => {
                parts.push(Self::file_digest(&self.checkpoint_path(checkpoint, *which))?);
                datasets
            }
        };
        for d in datasets {
            parts.push(Self::file_digest(&self.manifest_path(d))?);
        }
        Ok(sha256_hex(parts.join("\n").as_bytes()))
    }

    fn read_stamp(&self, stage: &str) -> Option<Stamp> {
        let text = fs::read_to_string(self.stage_dir(stage).join(STAMP_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    }

    fn outputs_intact(&self, stage: &str, stamp: &Stamp) -> bool {
        let dir = self.stage_dir(stage);
        stamp
            .outputs
            .iter()
            .all(|(file, digest)| Self::file_digest(&dir.join(file)).is_ok_and(|d| &d == digest))
    }

    fn run_stage(&mut self, stage: &Stage) -> Result<BTreeMap<String, String>> {
        let dir = self.stage_dir(stage.name());
        fs::create_dir_all(&dir)?;
        let mut written: Vec<&str> = Vec::new();
        match stage {
            Stage::Generate { dataset, .. } => {
                let spec = self.plan.datasets.iter().find(|d| &d.name == dataset).expect("validated");
                let source = match (&spec.recipe, &spec.labels_dir) {
                    (Some(r), _) => LabelSource::Recipe(r.clone()),
                    (None, Some(l)) => LabelSource::External {
                        label_dir: l.clone(),
                        audio_dir: spec.audio_dir.clone(),
                    },
                    (None, None) => unreachable!("validated"),
                };
                let outcome = generate_dataset(&GenerateRequest {
                    name: spec.name.clone(),
                    source,
                    timbre: timbre_for(spec)?,
                    sample_rate_hz: self.plan.sample_rate_hz,
                    features: self.plan.features,
                    split_seed: spec.split_seed,
                    out_dir: dir.clone(),
                    cache: Some(self.cache.clone()),
                })?;
                if !outcome.skipped.is_empty() {
                    return Err(AmtError::Validation(format!(
                        "dataset {dataset}: unmatched files: {}",
                        outcome.skipped.join(", ")
                    )));
                }
                self.loaded.remove(dataset);
                written.push(MANIFEST_FILE);
            }
            Stage::Train { datasets, train: t, .. } | Stage::TransferTrain { datasets, train: t, .. } => {
                let mut config = self.plan.train_config(t)?;
                if self.options.deterministic {
                    config.parallel = false;
                }
                let data = self.datasets(datasets)?;
                let start = match stage {
                    Stage::TransferTrain {
                        from, from_checkpoint, ..
                    } => {
                        let path = self.checkpoint_path(from, *from_checkpoint);
                        let source: Checkpoint<f32> = load_checkpoint(fs::File::open(&path)?)?;
                        transfer_init(&source, &self.plan.model)?;
                        TrainStart::Checkpoint(source)
                    }
                    _ => TrainStart::Scratch(self.plan.model),
                };
                let outcome = train(
                    start,
                    &data.part(SplitName::Train),
                    &data.part(SplitName::Valid),
                    &config,
                    &data.name,
                )
                .map_err(|e| {
                    if let Some(ck) = &e.last_good {
                        let mut bytes = Vec::new();
                        if save_checkpoint(ck.as_ref(), &mut bytes).is_ok() {
                            let _ = fs::write(dir.join("last-good.amtf"), bytes);
                        }
                    }
                    e.source
                })?;
                for (file, ck) in [("last.amtf", &outcome.last), ("best.amtf", &outcome.best)] {
                    let mut bytes = Vec::new();
                    save_checkpoint(ck, &mut bytes)?;
                    fs::write(dir.join(file), bytes)?;
                }
                fs::write(dir.join("report.csv"), outcome.report.to_csv())?;
                let mut json = serde_json::to_value(&outcome.report).expect("report serializes");
                // wall-clock times vary between runs; keep them out of digested outputs
                if let Some(obj) = json.as_object_mut() {
                    obj.remove("epoch_seconds");
                }
                fs::write(dir.join("report.json"), format!("{json:#}\n"))?;
                let timing: String = outcome
                    .report
                    .epoch_seconds
                    .iter()
                    .enumerate()
                    .map(|(i, s)| format!("{},{s:.3}\n", i + 1))
                    .collect();
                fs::write(dir.join("timing.csv"), format!("epoch,seconds\n{timing}"))?;
                written.extend(["last.amtf", "best.amtf", "report.csv", "report.json"]);
            }
            Stage::Evaluate {
                checkpoint,
                which,
                datasets,
                split,
                aggregation,
                ..
            } => {
                let path = self.checkpoint_path(checkpoint, *which);
                let ck: Checkpoint<f32> = load_checkpoint(fs::File::open(&path)?)?;
                let config = self.plan.train_config(&toml::Table::new())?;
                let mut table = ResultsTable::default();
                let mut all = Vec::new();
                for name in datasets {
                    let data = self.dataset(name)?;
                    let report = evaluate_model(
                        &ck.params,
                        &ck.config,
                        &data.part(*split),
                        &config.decode,
                        &config.tolerances,
                        *aggregation,
                    )?;
                    table.push_scores(name, &report.aggregate);
                    all.push(DatasetEvaluation {
                        dataset: name.clone(),
                        report,
                    });
                }
                fs::write(dir.join("results.csv"), table.to_csv())?;
                fs::write(dir.join("results.txt"), table.to_text())?;
                let json = serde_json::to_string_pretty(&all).expect("results serialize");
                fs::write(dir.join("results.json"), json + "\n")?;
                written.extend(["results.csv", "results.txt", "results.json"]);
            }
        }
        written
            .into_iter()
            .map(|f| Ok((f.to_string(), Self::file_digest(&dir.join(f))?)))
            .collect()
    }
}

/// Executes the plan's stages in dependency order, skipping stages whose
/// stamp records the same input digest and intact outputs, then writes
/// the comparison report when the plan defines comparisons.
pub fn run_plan(plan: &ExperimentPlan, options: &RunOptions) -> Result<PlanOutcome> {
    plan.validate()?;
    fs::create_dir_all(&plan.output_dir)?;
    let cache_dir = options
        .cache_dir
        .clone()
        .unwrap_or_else(|| plan.output_dir.join("cache"));
    let mut runner = Runner {
        plan,
        options,
        cache: SpectrogramCache::new(cache_dir),
        loaded: BTreeMap::new(),
    };
    let mut results: Vec<StageResult> = Vec::new();
    let mut broken: BTreeSet<String> = BTreeSet::new();
    for name in plan.execution_order()? {
        let stage = plan.stage(&name).expect("ordered from plan");
        let mut result = StageResult {
            name: name.clone(),
            kind: stage.kind().to_string(),
            status: StageStatus::Ran,
            error: None,
            outputs: BTreeMap::new(),
        };
        if plan.dependencies(stage).iter().any(|d| broken.contains(d)) {
            result.status = StageStatus::Blocked;
            broken.insert(name);
            results.push(result);
            continue;
        }
        let attempt = (|| -> Result<(StageStatus, BTreeMap<String, String>)> {
            let digest = runner.input_digest(stage)?;
            if !options.force {
                if let Some(stamp) = runner.read_stamp(&name) {
                    if stamp.input_digest == digest && runner.outputs_intact(&name, &stamp) {
                        log::info!("stage {name}: up to date");
                        return Ok((StageStatus::Skipped, stamp.outputs));
                    }
                }
            }
            log::info!("stage {name}: running");
            let outputs = runner.run_stage(stage)?;
            let stamp = Stamp {
                stage: name.clone(),
                input_digest: digest,
                outputs: outputs.clone(),
            };
            let text = serde_json::to_string_pretty(&stamp).expect("stamp serializes");
            fs::write(runner.stage_dir(&name).join(STAMP_FILE), text + "\n")?;
            Ok((StageStatus::Ran, outputs))
        })();
        match attempt {
            Ok((status, outputs)) => {
                result.status = status;
                result.outputs = outputs;
            }
            Err(e) => {
                log::error!("stage {name} failed: {e}");
                result.status = StageStatus::Failed;
                result.error = Some(e.to_string());
                broken.insert(name);
            }
        }
        results.push(result);
    }
    let mut outcome = PlanOutcome {
        stages: results,
        comparison: None,
    };
    if !plan.comparisons.is_empty() && !outcome.failed() {
        let report = ComparisonReport::build(plan, &plan.output_dir)?;
        report.write(&plan.output_dir)?;
        outcome.comparison = Some(report);
    }
    Ok(outcome)
}

/// Reads the training report a train or transfer-train stage wrote.
pub fn read_train_report(stage_dir: &Path) -> Result<TrainReport> {
    let text = fs::read_to_string(stage_dir.join("report.json"))?;
    serde_json::from_str(&text).map_err(|e| AmtError::Format(format!("{}: {e}", stage_dir.display())))
}
