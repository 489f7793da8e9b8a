//! Episodic training of the two-branch model.
//!
//! Every iteration draws one 1-shot episode from the training pool, scores
//! the query probabilities at feature resolution against the majority-vote
//! downsampled ground truth with a summed binary cross-entropy, and takes
//! one SGD-with-momentum step. Conditioning parameters use a reduced
//! learning-rate multiplier.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_episode, Episode, SegDataset};
use crate::metrics::{run_benchmark, BenchmarkInfo};
use crate::model::{BoundModel, ModelConfig, TwoBranchModel};
use crate::tensor::{sgd_step, ParamGroup, ParamStore, SgdState, Tape, Var};
use crate::{Error, Result};

/// Probability clamp applied inside the loss.
pub const LOSS_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub conditioning_lr_multiplier: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Validation and checkpoint period; 0 disables both until the end.
    pub eval_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Size of the fixed validation benchmark.
    pub val_episodes: usize,
    /// Trailing share of the training images kept out for validation.
    pub holdout_fraction: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            momentum: 0.9,
            conditioning_lr_multiplier: 0.1,
            iterations: 20_000,
            seed: 7,
            eval_every: 1000,
            checkpoint_path: None,
            val_episodes: 50,
            holdout_fraction: 0.1,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.conditioning_lr_multiplier >= 0.0 && self.conditioning_lr_multiplier.is_finite()) {
            return bad("conditioning_lr_multiplier must be non-negative".into());
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad(format!("holdout_fraction must lie in (0, 1), got {}", self.holdout_fraction));
        }
        self.model.validate()
    }

    /// Architecture with both model seeds taken from the run seed.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            init_seed: self.seed,
            hash_seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}

/// Query-side binary cross-entropy for a 1-shot episode, recorded on `tape`.
pub fn episode_loss_on(model: &TwoBranchModel, tape: &mut Tape, bound: &BoundModel, episode: &Episode) -> Result<Var> {
    if episode.k() != 1 {
        return Err(Error::InvalidArgument(format!(
            "training episodes are 1-shot, got k={}",
            episode.k()
        )));
    }
    let s = &episode.support[0];
    let (w, b) = model.condition_on(tape, bound, &s.image, &s.mask)?;
    let features = model.features_on(tape, bound, &episode.query_image)?;
    let probs = model.classify_on(tape, features, w, b)?;
    let target = episode
        .query_mask
        .downsample_majority(model.config().stride())?
        .to_f64();
    tape.bce_sum(probs, &target, LOSS_EPS)
}

/// Loss value of one episode under the current parameters.
pub fn episode_loss(model: &TwoBranchModel, episode: &Episode) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind_frozen(&mut tape);
    let loss = episode_loss_on(model, &mut tape, &bound, episode)?;
    Ok(tape.data(loss)?[0])
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    pub loss: f64,
    pub val_mean_iou: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn validations(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.val_mean_iou.map(|v| (r.iteration, v)))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration,loss,val_meanIoU,seconds\n");
        for r in &self.records {
            let val = r.val_mean_iou.map(|v| format!("{v:.6}")).unwrap_or_default();
            let _ = writeln!(out, "{},{:.9},{val},{:.3}", r.iteration, r.loss, r.seconds);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Resumable training state. [`TrainSession::run`] advances by any number
/// of iterations, including zero.
pub struct TrainSession {
    model: TwoBranchModel,
    config: TrainConfig,
    sgd: SgdState,
    rng: ChaCha8Rng,
    train_pool: SegDataset,
    validation: Vec<Episode>,
    iteration: usize,
    log: TrainLog,
    last_good: ParamStore,
    started: Instant,
}

impl TrainSession {
    /// `dataset` must already be remapped to the training labels. Its
    /// trailing `holdout_fraction` becomes the validation pool.
    pub fn new(model: TwoBranchModel, dataset: &SegDataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (train_pool, val_pool) = dataset.split_holdout(config.holdout_fraction)?;
        let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_7a11);
        let validation = (0..config.val_episodes)
            .map(|_| sample_episode(&val_pool, 1, &mut val_rng))
            .collect::<Result<Vec<_>>>()?;
        let multipliers = (0..model.params().len())
            .map(|i| match model.params().group(i) {
                ParamGroup::Conditioning => config.conditioning_lr_multiplier,
                _ => 1.0,
            })
            .collect();
        let sgd = SgdState::new(config.learning_rate, config.momentum, model.params().tensors())?
            .with_multipliers(multipliers)?;
        Ok(TrainSession {
            last_good: model.params().clone(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            model,
            config,
            sgd,
            train_pool,
            validation,
            iteration: 0,
            log: TrainLog::default(),
            started: Instant::now(),
        })
    }

    pub fn model(&self) -> &TwoBranchModel {
        &self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn validation_set(&self) -> &[Episode] {
        &self.validation
    }

    /// Runs `extra` more iterations. On a non-finite loss the parameters are
    /// rolled back to the last validated snapshot (which is also what the
    /// checkpoint file holds) and [`Error::Diverged`] is returned.
    pub fn run(&mut self, extra: usize) -> Result<()> {
        for _ in 0..extra {
            let it = self.iteration + 1;
            let loss = match self.step() {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::NonFinite(_)) => {
                    self.model.params_mut().copy_values_from(&self.last_good)?;
                    self.model.params_mut().zero_grads();
                    return Err(Error::Diverged { iteration: it });
                }
                Err(e) => return Err(e),
            };
            self.iteration = it;
            let eval_now = self.config.eval_every > 0 && it % self.config.eval_every == 0;
            let val = if eval_now { Some(self.checkpoint()?) } else { None };
            self.log.records.push(LogRecord {
                iteration: it,
                loss,
                val_mean_iou: val,
                seconds: self.started.elapsed().as_secs_f64(),
            });
        }
        Ok(())
    }

    fn step(&mut self) -> Result<f64> {
        let episode = sample_episode(&self.train_pool, 1, &mut self.rng)?;
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let loss = episode_loss_on(&self.model, &mut tape, &bound, &episode)?;
        let value = tape.data(loss)?[0];
        if !value.is_finite() {
            return Ok(value);
        }
        tape.backward(loss)?;
        let params = self.model.params_mut();
        params.accumulate_grads(&tape, bound.vars())?;
        sgd_step(params.tensors_mut(), &mut self.sgd)?;
        if params.tensors().iter().any(|t| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("sgd_step"));
        }
        Ok(value)
    }

    /// Scores the validation set, snapshots the parameters and writes the
    /// checkpoint if one is configured.
    fn checkpoint(&mut self) -> Result<f64> {
        let val = self.validate()?;
        self.last_good = self.model.params().clone();
        if let Some(path) = &self.config.checkpoint_path {
            self.save_checkpoint(path)?;
        }
        Ok(val)
    }

    /// Validation meanIoU of the current parameters (0 when the set is empty).
    pub fn validate(&self) -> Result<f64> {
        if self.validation.is_empty() {
            return Ok(0.0);
        }
        let report = run_benchmark(
            &self.model,
            &self.validation,
            BenchmarkInfo {
                k: 1,
                seed: self.config.seed,
                ..BenchmarkInfo::default()
            },
            1,
        )?;
        Ok(report.mean_iou())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut ck = self.model.to_checkpoint();
        ck.meta.push(("iteration".into(), self.iteration.to_string()));
        ck.save(path)
    }

    pub fn into_parts(self) -> (TwoBranchModel, TrainLog) {
        (self.model, self.log)
    }
}

/// Trains for `config.iterations` iterations. If a checkpoint path is
/// configured the final parameters are written there too.
pub fn train(model: TwoBranchModel, dataset: &SegDataset, config: TrainConfig) -> Result<(TwoBranchModel, TrainLog)> {
    let iterations = config.iterations;
    let path = config.checkpoint_path.clone();
    let mut session = TrainSession::new(model, dataset, config)?;
    session.run(iterations)?;
    if let Some(path) = path {
        session.save_checkpoint(&path)?;
    }
    Ok(session.into_parts())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = TrainConfig::default();
        cfg.iterations = 123;
        cfg.checkpoint_path = Some("x/model.ck".into());
        let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(TrainConfig::from_toml("learning_rat = 0.1").is_err());
        assert!(TrainConfig::from_toml("momentum = 1.0").is_err());
        assert!(TrainConfig::from_toml("iterations = 0").is_err());
        assert!(TrainConfig::from_toml("[model]\nwidth = 3").is_err());
        assert_eq!(TrainConfig::from_toml("").unwrap(), TrainConfig::default());
    }
}
