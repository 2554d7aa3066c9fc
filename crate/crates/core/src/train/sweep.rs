//! Runs several configurations one after another and tabulates their final
//! validation PSNR.

use std::io;

use crate::data::Dataset;
use crate::error::Result;
use crate::metrics::{evaluate, format_db, MetricDomain};
use crate::model::ModelConfig;

use super::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub name: String,
    pub params: usize,
    pub steps: u64,
    pub final_loss: f64,
    pub val_psnr: f64,
}

impl SweepRow {
    pub fn tsv_header() -> &'static str {
        "name\tparams\tsteps\tfinal_loss\tval_psnr"
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}\t{}",
            self.name,
            self.params,
            self.steps,
            self.final_loss,
            format_db(self.val_psnr)
        )
    }
}

/// Trains every `(name, model, train)` entry from scratch on `train_set`
/// and scores it on `val_set`. No checkpoints are written.
pub fn sweep(
    runs: &[(String, ModelConfig, TrainConfig)],
    train_set: &Dataset,
    val_set: &Dataset,
    domain: MetricDomain,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(runs.len());
    for (name, model_config, train_config) in runs {
        let (trainer, outcome) = train::<f32>(
            model_config.clone(),
            train_config.clone(),
            train_set,
            &mut io::sink(),
            None,
        )?;
        let report = evaluate(trainer.model(), val_set, domain)?;
        rows.push(SweepRow {
            name: name.clone(),
            params: trainer.model().param_count(),
            steps: outcome.final_step,
            final_loss: outcome.losses.last().copied().unwrap_or(f64::NAN),
            val_psnr: report.overall.psnr_mean,
        });
    }
    Ok(rows)
}
