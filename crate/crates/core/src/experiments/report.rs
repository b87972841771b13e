//! Pretrained-versus-scratch comparison assembled from finished stages.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_train_report, DatasetEvaluation, ExperimentPlan, Stage};
use crate::error::{AmtError, Result};
use crate::metrics::{MetricFamily, TrackScores};

fn default_threshold() -> f64 {
    0.5
}

/// One (pretraining source → target) pair of the comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonSpec {
    pub label: String,
    /// Dataset whose rows are read from the evaluate stages.
    pub target: String,
    /// Evaluate stage scoring the pretrained weights before fine-tuning.
    pub zero_shot: String,
    /// Evaluate stage scoring the fine-tuned weights.
    pub fine_tuned: String,
    /// Transfer-train stage that fine-tuned the weights.
    pub fine_tune_run: String,
    /// Train stage learning the target from scratch.
    pub scratch_run: String,
    /// Validation frame F1 a run must reach to count as converged.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

impl ComparisonSpec {
    pub fn validate(&self, plan: &ExperimentPlan) -> Result<()> {
        let kind = |name: &str| plan.stages.iter().find(|s| s.name() == name).map(Stage::kind);
        let expect = |name: &str, wanted: &str| -> Result<()> {
            match kind(name) {
                Some(k) if k == wanted => Ok(()),
                _ => Err(AmtError::Validation(format!(
                    "comparison {}: {name} is not a {wanted} stage",
                    self.label
                ))),
            }
        };
        expect(&self.zero_shot, "evaluate")?;
        expect(&self.fine_tuned, "evaluate")?;
        expect(&self.fine_tune_run, "transfer-train")?;
        expect(&self.scratch_run, "train")?;
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(AmtError::Validation(format!(
                "comparison {}: threshold {} outside (0, 1]",
                self.label, self.threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub target: String,
    pub threshold: f64,
    pub zero_shot: TrackScores,
    pub fine_tuned: TrackScores,
    /// `None` when the run never reached the threshold.
    pub epochs_to_threshold_pretrained: Option<usize>,
    pub epochs_to_threshold_scratch: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

fn scores_for(stage_dir: &Path, dataset: &str) -> Result<TrackScores> {
    let text = fs::read_to_string(stage_dir.join("results.json"))?;
    let all: Vec<DatasetEvaluation> =
        serde_json::from_str(&text).map_err(|e| AmtError::Format(format!("{}: {e}", stage_dir.display())))?;
    all.into_iter()
        .find(|d| d.dataset == dataset)
        .map(|d| d.report.aggregate)
        .ok_or_else(|| AmtError::Validation(format!("{} has no results for {dataset}", stage_dir.display())))
}

fn epochs(e: Option<usize>) -> String {
    e.map_or_else(|| "inf".to_string(), |e| e.to_string())
}

impl ComparisonReport {
    pub fn build(plan: &ExperimentPlan, output_dir: &Path) -> Result<ComparisonReport> {
        let mut rows = Vec::new();
        for c in &plan.comparisons {
            let pretrained = read_train_report(&output_dir.join(&c.fine_tune_run))?;
            let scratch = read_train_report(&output_dir.join(&c.scratch_run))?;
            rows.push(ComparisonRow {
                label: c.label.clone(),
                target: c.target.clone(),
                threshold: c.threshold,
                zero_shot: scores_for(&output_dir.join(&c.zero_shot), &c.target)?,
                fine_tuned: scores_for(&output_dir.join(&c.fine_tuned), &c.target)?,
                epochs_to_threshold_pretrained: pretrained.epochs_to_threshold(c.threshold),
                epochs_to_threshold_scratch: scratch.epochs_to_threshold(c.threshold),
            });
        }
        Ok(ComparisonReport { rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "pair,target,metric,zero_shot_P,zero_shot_R,zero_shot_F1,fine_tuned_P,fine_tuned_R,fine_tuned_F1,\
             epochs_pretrained,epochs_scratch\n",
        );
        for r in &self.rows {
            for f in MetricFamily::ALL {
                let (z, t) = (r.zero_shot.get(f), r.fine_tuned.get(f));
                let _ = writeln!(
                    out,
                    "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{},{}",
                    r.label,
                    r.target,
                    f.label(),
                    z.precision,
                    z.recall,
                    z.f1,
                    t.precision,
                    t.recall,
                    t.f1,
                    epochs(r.epochs_to_threshold_pretrained),
                    epochs(r.epochs_to_threshold_scratch)
                );
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(4).max(4);
        let mut out = format!(
            "{:<w$}  {:<16}  {:>18}  {:>18}  {:>12}\n",
            "pair", "metric", "zero-shot P/R/F1", "fine-tuned P/R/F1", "epochs ft/sc"
        );
        for r in &self.rows {
            for f in MetricFamily::ALL {
                let (z, t) = (r.zero_shot.get(f), r.fine_tuned.get(f));
                let _ = writeln!(
                    out,
                    "{:<w$}  {:<16}  {:>5.3}/{:>5.3}/{:>5.3}  {:>5.3}/{:>5.3}/{:>5.3}  {:>12}",
                    r.label,
                    f.label(),
                    z.precision,
                    z.recall,
                    z.f1,
                    t.precision,
                    t.recall,
                    t.f1,
                    format!(
                        "{}/{}",
                        epochs(r.epochs_to_threshold_pretrained),
                        epochs(r.epochs_to_threshold_scratch)
                    )
                );
            }
        }
        out
    }

    pub fn write(&self, output_dir: &Path) -> Result<()> {
        fs::write(output_dir.join("comparison.csv"), self.to_csv())?;
        fs::write(output_dir.join("comparison.txt"), self.to_text())?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(output_dir.join("comparison.json"), json + "\n")?;
        Ok(())
    }
}
