//! Minibatch training: forward, multi-scale PIT loss, backward, clipping
//! and AMSGrad, with per-epoch validation and best-model selection.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{shape_err, Error, Result};
use crate::loss::{multi_scale_loss_var, pit_assign, snr_db, LossConfig, Objective, PitScope};
use crate::model::{forward_binaural, separate, ModelConfig, SagrnnParams};
use crate::optim::{
    amsgrad_step, clip_grad_norm, global_norm, LrSchedule, OptimState, MAX_GRAD_NORM,
};
use crate::params::ParamTree;
use crate::sim::{derive_seed, Example};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: u64,
    /// Stops after this many optimizer steps in total, if set.
    pub max_steps: Option<u64>,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::tiny(),
            loss: LossConfig::default(),
            schedule: LrSchedule::default(),
            batch_size: 4,
            epochs: 10,
            max_steps: None,
            max_grad_norm: MAX_GRAD_NORM,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::Config(format!(
                "max_grad_norm must be positive, got {}",
                self.max_grad_norm
            )));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub clip_scale: f64,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step={} epoch={} lr={:.6e} loss={:.6} grad_norm={:.6} clip_scale={:.6}",
            self.step, self.epoch, self.lr, self.loss, self.grad_norm, self.clip_scale
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub mean_loss: f64,
    /// Mean ΔSNR on the validation set, when there is one.
    pub valid_delta_snr_db: Option<f64>,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} mean_loss={:.6}", self.epoch, self.mean_loss)?;
        if let Some(d) = self.valid_delta_snr_db {
            write!(f, " valid_delta_snr_db={d:.4}")?;
        }
        Ok(())
    }
}

pub enum LogEvent<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
}

/// Loss and parameter gradients (traversal order) for one example.
pub fn loss_and_grads(
    params: &SagrnnParams<Tensor>,
    model: &ModelConfig,
    loss: &LossConfig,
    example: &Example,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g)?;
    let left = g.constant(Tensor::vector(example.left.clone()))?;
    let right = g.constant(Tensor::vector(example.right.clone()))?;
    let blocks = forward_binaural(&mut g, left, right, &p, model)?;
    let l = multi_scale_loss_var(&mut g, &blocks, &example.reference, loss)?;
    let value = g.value(l).item()?;
    let grads = g.backward(l)?;
    let mut out = Vec::new();
    p.visit("", &mut |_, v| {
        out.push(grads.get_or_zeros(*v, g.shape(*v)))
    });
    Ok((value, out))
}

/// Mean SNR improvement over the mixture of `est` `[C×2×T]` against
/// `reference`, under the best joint-ear permutation.
pub fn delta_snr_db(
    est: &Tensor,
    reference: &Tensor,
    left: &[f64],
    right: &[f64],
    eps: f64,
) -> Result<f64> {
    let assignment = pit_assign(est, reference, Objective::Snr, PitScope::JointEars, eps)?;
    let (c, t) = (reference.shape()[0], reference.shape()[2]);
    if left.len() != t || right.len() != t {
        return Err(shape_err!(
            "mixture has {}/{} samples, references {t}",
            left.len(),
            right.len()
        ));
    }
    let row = |x: &Tensor, s: usize, e: usize| -> Vec<f64> {
        x.data()[(s * 2 + e) * t..(s * 2 + e + 1) * t].to_vec()
    };
    let mut total = 0.0;
    for (j, &i) in assignment.permutation().iter().enumerate() {
        for (e, mix) in [left, right].into_iter().enumerate() {
            let r = row(reference, j, e);
            total += snr_db(&row(est, i, e), &r, eps)? - snr_db(mix, &r, eps)?;
        }
    }
    Ok(total / (2 * c) as f64)
}

/// Mean ΔSNR of the last block's estimates over `examples`.
pub fn evaluate_delta_snr(
    params: &SagrnnParams<Tensor>,
    model: &ModelConfig,
    examples: &[Example],
    eps: f64,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Usage("evaluation over an empty set".into()));
    }
    let mut total = 0.0;
    for ex in examples {
        let est = separate(params, model, &ex.left, &ex.right)?;
        total += delta_snr_db(&est, &ex.reference, &ex.left, &ex.right, eps)?;
    }
    Ok(total / examples.len() as f64)
}

/// Result of [`Trainer::fit`].
#[derive(Clone, Debug)]
pub struct FitReport {
    /// Parameters with the best validation ΔSNR (the final ones without a
    /// validation set).
    pub best_params: SagrnnParams<Tensor>,
    pub best_epoch: Option<u64>,
    pub best_valid_delta_snr_db: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub params: SagrnnParams<Tensor>,
    pub state: OptimState,
    /// Epochs completed.
    pub epoch: u64,
    /// Worker threads for per-example gradients. Results do not depend on it.
    pub jobs: usize,
    shuffle: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = SagrnnParams::init_seeded(&config.model, derive_seed(config.seed, 0))?;
        Ok(Self::with_params(config, params))
    }

    /// Starts from existing parameters with a fresh optimizer state.
    pub fn with_params(config: TrainConfig, params: SagrnnParams<Tensor>) -> Self {
        let state = OptimState::new(&params);
        let shuffle = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
        Trainer {
            config,
            params,
            state,
            epoch: 0,
            jobs: 1,
            shuffle,
        }
    }

    fn batch_grads(&self, batch: &[&Example]) -> Result<Vec<(f64, Vec<Tensor>)>> {
        let (model, loss) = (&self.config.model, &self.config.loss);
        let jobs = self.jobs.clamp(1, batch.len().max(1));
        if jobs == 1 {
            return batch
                .iter()
                .map(|ex| loss_and_grads(&self.params, model, loss, ex))
                .collect();
        }
        let per = batch.len().div_ceil(jobs);
        std::thread::scope(|s| {
            let handles: Vec<_> = batch
                .chunks(per)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|ex| loss_and_grads(&self.params, model, loss, ex))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut out = Vec::with_capacity(batch.len());
            for h in handles {
                out.extend(h.join().expect("gradient worker panicked")?);
            }
            Ok(out)
        })
    }

    /// One optimizer step on `batch`. Gradients are averaged over the batch
    /// in example order.
    pub fn step(&mut self, batch: &[&Example]) -> Result<StepRecord> {
        let step = self.state.step + 1;
        let epoch = self.epoch;
        self.step_inner(batch).map_err(|e| Error::Step {
            step,
            epoch,
            source: Box::new(e),
        })
    }

    fn step_inner(&mut self, batch: &[&Example]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::Usage("empty minibatch".into()));
        }
        let results = self.batch_grads(batch)?;
        let n = results.len() as f64;
        let mut loss = 0.0;
        let mut grads: Option<Vec<Tensor>> = None;
        for (l, gs) in results {
            loss += l;
            match &mut grads {
                None => grads = Some(gs),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&gs) {
                        a.data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        let mut grads = grads.unwrap();
        for g in &mut grads {
            g.data_mut().iter_mut().for_each(|v| *v /= n);
        }
        let grad_norm = global_norm(&grads);
        let clip_scale = clip_grad_norm(&mut grads, self.config.max_grad_norm)?;
        let lr = self.config.schedule.at(self.epoch);
        amsgrad_step(&mut self.state, &mut self.params, &grads, lr)?;
        Ok(StepRecord {
            step: self.state.step,
            epoch: self.epoch,
            lr,
            loss: loss / n,
            grad_norm,
            clip_scale,
        })
    }

    fn steps_exhausted(&self) -> bool {
        self.config.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// One pass over `train` in shuffled minibatches. Returns the step
    /// records; stops early when `max_steps` is reached.
    pub fn run_epoch(
        &mut self,
        train: &[Example],
        log: &mut dyn FnMut(LogEvent),
    ) -> Result<Vec<StepRecord>> {
        if train.is_empty() {
            return Err(Error::Usage("empty training set".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.shuffle);
        let mut records = Vec::new();
        for idx in order.chunks(self.config.batch_size) {
            if self.steps_exhausted() {
                break;
            }
            let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            let rec = self.step(&batch)?;
            log(LogEvent::Step(&rec));
            records.push(rec);
        }
        self.epoch += 1;
        Ok(records)
    }

    /// Trains for the configured number of epochs, validating after each.
    pub fn fit(
        &mut self,
        train: &[Example],
        valid: &[Example],
        log: &mut dyn FnMut(LogEvent),
    ) -> Result<FitReport> {
        let eps = self.config.loss.epsilon;
        let mut report = FitReport {
            best_params: self.params.clone(),
            best_epoch: None,
            best_valid_delta_snr_db: None,
            epochs: Vec::new(),
            steps: Vec::new(),
        };
        while self.epoch < self.config.epochs && !self.steps_exhausted() {
            let epoch = self.epoch;
            let steps = self.run_epoch(train, log)?;
            if steps.is_empty() {
                break;
            }
            let mean_loss = steps.iter().map(|s| s.loss).sum::<f64>() / steps.len() as f64;
            let valid_delta_snr_db = if valid.is_empty() {
                None
            } else {
                let d = evaluate_delta_snr(&self.params, &self.config.model, valid, eps).map_err(
                    |e| Error::Step {
                        step: self.state.step,
                        epoch,
                        source: Box::new(e),
                    },
                )?;
                Some(d)
            };
            let rec = EpochRecord {
                epoch,
                mean_loss,
                valid_delta_snr_db,
            };
            log(LogEvent::Epoch(&rec));
            report.epochs.push(rec);
            report.steps.extend(steps);
            match valid_delta_snr_db {
                Some(d) if report.best_valid_delta_snr_db.is_none_or(|b| d > b) => {
                    report.best_valid_delta_snr_db = Some(d);
                    report.best_epoch = Some(epoch);
                    report.best_params = self.params.clone();
                }
                Some(_) => {}
                None => report.best_params = self.params.clone(),
            }
        }
        Ok(report)
    }
}
