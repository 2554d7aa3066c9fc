//! Adam training under the MAE loss, plus the gradient checker and a
//! sequential configuration sweep.

mod adam;
pub mod gradcheck;
mod sweep;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::autodiff::Tape;
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::layers::LayerParams;
use crate::metrics::mae_loss;
use crate::model::checkpoint::{save_checkpoint, AdamState, Checkpoint, TrainingState};
use crate::model::{Irunet, ParamStore};
use crate::rng::derive_seed;
use crate::tensor::Scalar;

pub use adam::adam_step;
pub use gradcheck::{gradcheck, gradcheck_level, GradcheckEntry, GradcheckLevel, GradcheckOptions, GradcheckTarget};
pub use sweep::{sweep, SweepRow};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub init_seed: u64,
    /// Base seed of the per-epoch shuffles.
    pub epoch_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            batch_size: 32,
            max_steps: 1000,
            checkpoint_every: 100,
            init_seed: 0,
            epoch_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::invalid("beta1 and beta2 must lie in (0, 1)"));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Loss of every step taken by this run, in order.
    pub losses: Vec<f64>,
    pub final_step: u64,
    pub checkpoints: Vec<PathBuf>,
}

/// Owns the model and optimizer state of one training run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    model: Irunet<T>,
    adam: AdamState<T>,
    config: TrainConfig,
    step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Irunet<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::zeros(model.config());
        Ok(Self {
            model,
            adam,
            config,
            step: 0,
        })
    }

    /// Resumes from a checkpoint; a plain model checkpoint starts with
    /// fresh optimizer state.
    pub fn from_checkpoint(ckpt: Checkpoint<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Irunet::from_parts(ckpt.config, ckpt.params)?;
        let (adam, step) = match ckpt.training {
            Some(state) => (state.adam, state.step),
            None => (AdamState::zeros(model.config()), 0),
        };
        Ok(Self {
            model,
            adam,
            config,
            step,
        })
    }

    pub fn model(&self) -> &Irunet<T> {
        &self.model
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            config: self.model.config().clone(),
            params: self.model.params().clone(),
            training: Some(TrainingState {
                step: self.step,
                adam: self.adam.clone(),
            }),
        }
    }

    /// Loss and per-layer gradients of one batch.
    pub fn loss_and_grads(&self, batch: &Batch<T>) -> Result<(f64, ParamStore<T>)> {
        let mut tape = Tape::new();
        let x = tape.input(batch.noisy.clone());
        let target = tape.input(batch.clean.clone());
        let pass = self.model.forward(&mut tape, x)?;
        let loss = mae_loss(&mut tape, pass.output, target)?;
        let loss_value = tape.value(loss).item().expect("scalar loss").as_f64();
        let mut grads = tape.backward(loss)?;
        let mut store = ParamStore::new();
        for (name, bound) in pass.params.iter() {
            let weight = grads
                .take(bound.weight)
                .ok_or_else(|| Error::invalid(format!("layer '{name}' received no gradient")))?;
            let bias = grads
                .take(bound.bias)
                .ok_or_else(|| Error::invalid(format!("layer '{name}' received no gradient")))?;
            store.insert(LayerParams {
                name: name.to_string(),
                weight,
                bias,
            });
        }
        Ok((loss_value, store))
    }

    /// Forward, backward and one Adam update. Returns the pre-update loss.
    /// On a non-finite loss, gradient or updated parameter the model and
    /// optimizer state stay at their last good values.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<f64> {
        let (loss, grads) = self.loss_and_grads(batch)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                loss,
            });
        }
        let last_good = (self.model.params().clone(), self.adam.clone());
        adam_step(self.model.params_mut(), &grads, &mut self.adam, &self.config)?;
        if !self.model.params().all_finite() {
            *self.model.params_mut() = last_good.0;
            self.adam = last_good.1;
            return Err(Error::NonFiniteLoss {
                step: self.step + 1,
                loss,
            });
        }
        self.step += 1;
        Ok(loss)
    }

    fn save(&self, dir: &Path, name: &str, saved: &mut Vec<PathBuf>) -> Result<()> {
        let path = dir.join(name);
        save_checkpoint(&self.checkpoint(), &path)?;
        saved.push(path);
        Ok(())
    }

    /// Trains until `max_steps`, writing `step<TAB>loss<TAB>seconds` per step
    /// to `log` and checkpoints into `checkpoint_dir` when given.
    ///
    /// Epoch `e` visits the data in the order fixed by
    /// `derive_seed(epoch_seed, e)`; a resumed run skips the batches its
    /// step counter has already consumed, so it continues the same trace.
    /// A non-finite loss aborts the run after saving the last good state as
    /// `last_good.irun`.
    pub fn run(
        &mut self,
        data: &Dataset,
        log: &mut dyn Write,
        checkpoint_dir: Option<&Path>,
    ) -> Result<TrainOutcome> {
        if data.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let per_epoch = data.batches_per_epoch(self.config.batch_size) as u64;
        let mut losses = Vec::new();
        let mut checkpoints = Vec::new();
        let log_err = |e| Error::io("training log", e);
        while self.step < self.config.max_steps {
            let epoch = self.step / per_epoch;
            let skip = (self.step % per_epoch) as usize;
            let seed = derive_seed(self.config.epoch_seed, epoch);
            for batch in data.batches::<T>(self.config.batch_size, seed)?.skip(skip) {
                if self.step >= self.config.max_steps {
                    break;
                }
                let batch = batch?;
                let started = Instant::now();
                let loss = match self.train_step(&batch) {
                    Ok(loss) => loss,
                    Err(e @ Error::NonFiniteLoss { .. }) => {
                        if let Some(dir) = checkpoint_dir {
                            self.save(dir, "last_good.irun", &mut checkpoints)?;
                        }
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                };
                let secs = started.elapsed().as_secs_f64();
                writeln!(log, "{}\t{}\t{:.6}", self.step, loss, secs).map_err(log_err)?;
                log.flush().map_err(log_err)?;
                losses.push(loss);
                let every = self.config.checkpoint_every;
                if let Some(dir) = checkpoint_dir {
                    if every > 0 && self.step.is_multiple_of(every) {
                        self.save(dir, &format!("step_{:08}.irun", self.step), &mut checkpoints)?;
                    }
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            self.save(dir, "final.irun", &mut checkpoints)?;
        }
        Ok(TrainOutcome {
            losses,
            final_step: self.step,
            checkpoints,
        })
    }
}

/// Builds a freshly initialized model and trains it.
pub fn train<T: Scalar>(
    model_config: crate::model::ModelConfig,
    config: TrainConfig,
    data: &Dataset,
    log: &mut dyn Write,
    checkpoint_dir: Option<&Path>,
) -> Result<(Trainer<T>, TrainOutcome)> {
    let model = Irunet::new(model_config, config.init_seed)?;
    let mut trainer = Trainer::new(model, config)?;
    let outcome = trainer.run(data, log, checkpoint_dir)?;
    Ok((trainer, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.beta1, c.beta2, c.epsilon), (1e-4, 0.9, 0.999, 1e-7));
        c.validate().unwrap();
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        for c in [
            TrainConfig { beta1: 1.0, ..Default::default() },
            TrainConfig { beta2: 0.0, ..Default::default() },
            TrainConfig { epsilon: 0.0, ..Default::default() },
            TrainConfig { learning_rate: -1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
