//! Loss, optimizers, segment sampling, the training loop and weight transfer.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledTrack;
use crate::decoding::DecodeConfig;
use crate::error::{AmtError, Result};
use crate::metrics::{evaluate_model, Aggregation, MatchTolerances, PrfScore};
use crate::network::{
    gradient, init_params, param_shapes, Batch, Checkpoint, DType, Matrix, ModelConfig, ParameterSet, Scalar,
    TrainingMeta,
};

/// Mean binary cross-entropy over all cells and its gradient `(σ(z) − y) / n`.
pub fn bce_loss<T: Scalar>(logits: &Matrix<T>, targets: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    if logits.rows != targets.rows || logits.cols != targets.cols {
        return Err(AmtError::Argument(format!(
            "logits are {}x{} but targets are {}x{}",
            logits.rows, logits.cols, targets.rows, targets.cols
        )));
    }
    if let Some(y) = targets.data.iter().find(|y| !(**y >= T::zero() && **y <= T::one())) {
        return Err(AmtError::Argument(format!("target {y:?} outside [0, 1]")));
    }
    let n = T::of(logits.data.len().max(1) as f64);
    let mut loss = T::zero();
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    for ((g, &z), &y) in grad.data.iter_mut().zip(&logits.data).zip(&targets.data) {
        // max(z, 0) − z·y + ln(1 + e^−|z|)
        loss += z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
        let s = if z >= T::zero() {
            T::one() / (T::one() + (-z).exp())
        } else {
            let e = z.exp();
            e / (T::one() + e)
        };
        *g = (s - y) / n;
    }
    Ok((loss / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum OptimizerConfig {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Sgd,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Optimizer state for one parameter set.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    learning_rate: f64,
    step: u64,
    m: Option<ParameterSet<T>>,
    v: Option<ParameterSet<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, learning_rate: f64) -> Self {
        Optimizer {
            config,
            learning_rate,
            step: 0,
            m: None,
            v: None,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place. Zero updates leave values bit-identical.
    pub fn step(&mut self, params: &mut ParameterSet<T>, grads: &ParameterSet<T>) -> Result<()> {
        if !grads.all_finite() {
            return Err(AmtError::NonFinite {
                batch: self.step as usize,
                message: "gradient contains non-finite values".into(),
            });
        }
        let problems = grads.shape_mismatches(
            &params
                .iter()
                .map(|(n, t)| (n.clone(), t.dims().to_vec()))
                .collect::<Vec<_>>(),
        );
        if !problems.is_empty() {
            return Err(AmtError::ShapeMismatch(problems));
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.config {
            OptimizerConfig::Sgd => {
                for ((_, p), (_, g)) in params.iter_mut().zip(grads.iter()) {
                    for (x, &d) in p.values_mut().iter_mut().zip(g.values()) {
                        let delta = T::of(lr) * d;
                        if delta != T::zero() {
                            *x -= delta;
                        }
                    }
                }
            }
            OptimizerConfig::Adam { beta1, beta2, epsilon } => {
                let m = self.m.get_or_insert_with(|| params.zeros_like());
                let v = self.v.get_or_insert_with(|| params.zeros_like());
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let (b1, b2) = (T::of(beta1), T::of(beta2));
                let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
                let (c1, c2, eps, lr) = (T::of(c1), T::of(c2), T::of(epsilon), T::of(lr));
                for (((_, p), (_, g)), ((_, mt), (_, vt))) in
                    params.iter_mut().zip(grads.iter()).zip(m.iter_mut().zip(v.iter_mut()))
                {
                    let it = p.values_mut().iter_mut().zip(g.values());
                    for ((x, &d), (mi, vi)) in it.zip(mt.values_mut().iter_mut().zip(vt.values_mut())) {
                        *mi = b1 * *mi + one_b1 * d;
                        *vi = b2 * *vi + one_b2 * d * d;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        let delta = lr * m_hat / (v_hat.sqrt() + eps);
                        if delta != T::zero() {
                            *x -= delta;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub sequence_len_samples: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub validate_every_epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub steps_per_epoch: usize,
    /// Evaluate batch samples on the thread pool. Results are identical either way.
    pub parallel: bool,
    /// On a fresh start, set the output bias to the log-odds of the mean
    /// training-roll activity instead of zero.
    pub prior_output_bias: bool,
    pub decode: DecodeConfig,
    pub tolerances: MatchTolerances,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sequence_len_samples: 327_680,
            batch_size: 32,
            max_epochs: 2000,
            validate_every_epochs: 10,
            learning_rate: 1e-3,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            steps_per_epoch: 8,
            parallel: true,
            prior_output_bias: true,
            decode: DecodeConfig::default(),
            tolerances: MatchTolerances::default(),
        }
    }
}

impl TrainConfig {
    /// Budget sized for a laptop CPU: 1.28 s windows, batches of 4, 300 epochs.
    pub fn desk_scale() -> Self {
        TrainConfig {
            sequence_len_samples: 20_480,
            batch_size: 4,
            max_epochs: 300,
            ..Self::default()
        }
    }

    pub fn validate(&self, hop_samples: usize) -> Result<()> {
        let positive = [
            ("sequence_len_samples", self.sequence_len_samples),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("validate_every_epochs", self.validate_every_epochs),
            ("steps_per_epoch", self.steps_per_epoch),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(AmtError::Config(format!("{name} must be positive")));
        }
        if hop_samples == 0 || self.sequence_len_samples % hop_samples != 0 {
            return Err(AmtError::Config(format!(
                "sequence length {} is not a multiple of the hop {hop_samples}",
                self.sequence_len_samples
            )));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(AmtError::Config(format!("invalid learning rate {}", self.learning_rate)));
        }
        self.decode.validate()?;
        self.tolerances.validate()
    }

    /// Epochs at which validation is recorded: multiples of the cadence plus the last epoch.
    pub fn report_epochs(&self) -> Vec<usize> {
        let mut out: Vec<usize> = (1..=self.max_epochs / self.validate_every_epochs)
            .map(|i| i * self.validate_every_epochs)
            .collect();
        if out.last() != Some(&self.max_epochs) {
            out.push(self.max_epochs);
        }
        out
    }
}

/// A training window cut from one track.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment<T> {
    pub start_frame: usize,
    pub input: Matrix<T>,
    pub target: Matrix<T>,
}

/// Draws a `window_frames`-long aligned window with a uniform start frame.
/// Tracks shorter than the window start at 0 and are zero-padded.
pub fn sample_segment<T: Scalar, R: Rng>(track: &LabeledTrack, window_frames: usize, rng: &mut R) -> Segment<T> {
    let last_start = track.frames().saturating_sub(window_frames);
    let start = rng.gen_range(0..=last_start);
    Segment {
        start_frame: start,
        input: track.input_window(start, window_frames),
        target: track.target_window(start, window_frames),
    }
}

/// Validation metrics at one report epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    /// Epoch counted from the start of this run.
    pub epoch: usize,
    /// Mean training loss over that epoch's batches.
    pub loss: f64,
    pub frame: PrfScore,
    pub note: PrfScore,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainReport {
    pub records: Vec<ValidationRecord>,
    /// Mean training loss of every epoch, in order.
    pub epoch_losses: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,frame_P,frame_R,frame_F1,note_P,note_R,note_F1\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{:.6},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                r.epoch, r.loss, r.frame.precision, r.frame.recall, r.frame.f1, r.note.precision, r.note.recall, r.note.f1
            );
        }
        out
    }

    /// First report epoch whose validation frame F1 reaches `threshold`.
    pub fn epochs_to_threshold(&self, threshold: f64) -> Option<usize> {
        self.records.iter().find(|r| r.frame.f1 >= threshold).map(|r| r.epoch)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint<f32>,
    /// Report-epoch checkpoint with the highest validation frame F1 (earliest on ties).
    pub best: Checkpoint<f32>,
    pub report: TrainReport,
}

/// Training failure. A divergence keeps the most recent finite weights.
#[derive(Debug, thiserror::Error)]
#[error("{source}")]
pub struct TrainError {
    #[source]
    pub source: AmtError,
    pub last_good: Option<Box<Checkpoint<f32>>>,
}

impl From<AmtError> for TrainError {
    fn from(source: AmtError) -> Self {
        TrainError { source, last_good: None }
    }
}

/// Starting weights for a training run.
#[derive(Debug, Clone)]
pub enum TrainStart {
    /// Fresh weights from the model config and the run seed.
    Scratch(ModelConfig),
    /// Continue from transferred weights.
    Checkpoint(Checkpoint<f32>),
}

/// Copies every tensor of `source` for a model with config `target`.
/// Any shape disagreement is an error listing each offending tensor.
pub fn transfer_init<T: Scalar>(source: &Checkpoint<T>, target: &ModelConfig) -> Result<ParameterSet<T>> {
    target.validate()?;
    let problems = source.params.shape_mismatches(&param_shapes(target));
    if !problems.is_empty() {
        return Err(AmtError::ShapeMismatch(problems));
    }
    Ok(source.params.clone())
}

/// Runs `max_epochs` epochs of `steps_per_epoch` random-window batches,
/// validating on the report epochs. `source_tag` labels the checkpoints.
pub fn train(
    start: TrainStart,
    train_tracks: &[LabeledTrack],
    valid_tracks: &[LabeledTrack],
    config: &TrainConfig,
    source_tag: &str,
) -> std::result::Result<TrainOutcome, TrainError> {
    if train_tracks.is_empty() || valid_tracks.is_empty() {
        return Err(AmtError::Argument("training needs non-empty train and validation splits".into()).into());
    }
    let (model, mut params, start_epoch) = match start {
        TrainStart::Scratch(model) => {
            let mut params = init_params::<f32>(&model, config.seed)?;
            if config.prior_output_bias {
                set_prior_bias(&mut params, train_tracks)?;
            }
            (model, params, 0)
        }
        TrainStart::Checkpoint(ck) => {
            let params = transfer_init(&ck, &ck.config)?;
            (ck.config, params, ck.meta.epoch)
        }
    };
    if model.dtype != DType::F32 {
        return Err(AmtError::Config("training runs in 32-bit; set dtype = \"f32\"".into()).into());
    }
    for t in train_tracks.iter().chain(valid_tracks) {
        t.check_model(&model)?;
    }
    let window_frames = frames_per_window(config, train_tracks)?;

    let checkpoint = |params: &ParameterSet<f32>, epoch: usize| Checkpoint {
        config: model,
        meta: TrainingMeta {
            epoch: start_epoch + epoch as u64,
            seed: config.seed,
            source_tag: source_tag.to_string(),
        },
        params: params.clone(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let report_epochs = config.report_epochs();
    let mut report = TrainReport::default();
    let mut best: Option<(f64, Checkpoint<f32>)> = None;
    let mut batch_id = 0usize;

    for epoch in 1..=config.max_epochs {
        let clock = Instant::now();
        let mut loss_sum = 0.0;
        for _ in 0..config.steps_per_epoch {
            let mut inputs = Vec::with_capacity(config.batch_size);
            let mut targets = Vec::with_capacity(config.batch_size);
            for _ in 0..config.batch_size {
                let track = &train_tracks[rng.gen_range(0..train_tracks.len())];
                let seg: Segment<f32> = sample_segment(track, window_frames, &mut rng);
                inputs.push(seg.input);
                targets.push(seg.target);
            }
            let batch = Batch {
                id: batch_id,
                inputs,
                targets,
            };
            batch_id += 1;
            let diverged = |source: AmtError| TrainError {
                source,
                last_good: Some(Box::new(checkpoint(&params, epoch - 1))),
            };
            let result = gradient(&params, &model, &batch, bce_loss, config.parallel).map_err(diverged)?;
            let mut next = params.clone();
            optimizer.step(&mut next, &result.grads).map_err(diverged)?;
            if !next.all_finite() {
                return Err(diverged(AmtError::NonFinite {
                    batch: batch.id,
                    message: "parameters became non-finite".into(),
                }));
            }
            params = next;
            loss_sum += result.loss as f64;
        }
        let loss = loss_sum / config.steps_per_epoch as f64;
        report.epoch_losses.push(loss);
        if report_epochs.contains(&epoch) {
            let eval = evaluate_model(
                &params,
                &model,
                valid_tracks,
                &config.decode,
                &config.tolerances,
                Aggregation::MeanOfTracks,
            )?;
            let record = ValidationRecord {
                epoch,
                loss,
                frame: eval.aggregate.frame,
                note: eval.aggregate.note,
            };
            log::info!(
                "{source_tag} epoch {}: loss {loss:.4} frame F1 {:.3} note F1 {:.3}",
                record.epoch,
                record.frame.f1,
                record.note.f1
            );
            if best.as_ref().is_none_or(|(f1, _)| record.frame.f1 > *f1) {
                best = Some((record.frame.f1, checkpoint(&params, epoch)));
            }
            report.records.push(record);
        }
        report.epoch_seconds.push(clock.elapsed().as_secs_f64());
    }
    let last = checkpoint(&params, config.max_epochs);
    let best = best.map(|b| b.1).unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { last, best, report })
}

/// Fills `head.bias` with the log-odds of the fraction of active roll cells.
/// Without it the first steps spend themselves pushing every logit down and
/// tend to saturate the recurrent layer on the way.
pub fn set_prior_bias(params: &mut ParameterSet<f32>, tracks: &[LabeledTrack]) -> Result<()> {
    let (active, cells) = tracks.iter().fold((0usize, 0usize), |(a, c), t| {
        (a + t.roll.active_count(), c + t.roll.values().len())
    });
    if cells == 0 {
        return Ok(());
    }
    let p = (active as f64 / cells as f64).clamp(1e-4, 0.5);
    let bias = (p / (1.0 - p)).ln() as f32;
    let head = params
        .get_mut("head.bias")
        .ok_or_else(|| AmtError::ShapeMismatch(vec!["head.bias: missing".into()]))?;
    head.values_mut().iter_mut().for_each(|v| *v = bias);
    Ok(())
}

/// Window length in frames for the configured sequence length.
pub fn frames_per_window(config: &TrainConfig, tracks: &[LabeledTrack]) -> Result<usize> {
    let track = tracks
        .first()
        .ok_or_else(|| AmtError::Argument("no tracks to train on".into()))?;
    let hop = (track.features.frame_period_sec() * track.sample_rate_hz as f64).round() as usize;
    config.validate(hop)?;
    Ok(config.sequence_len_samples / hop)
}
