use alloc::borrow::Cow;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::evaluate;
use super::model::Model;
use crate::autodiff::Graph;
use crate::data::{augment_sample, Sample};
use crate::error::{Error, Result};
use crate::init::derived_rng;
use crate::norm::Mode;
use crate::optim::{Adam, AdamConfig};
use crate::pillars::Gender;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Absent when there is no validation set.
    pub val_mad: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    /// Set when training stopped early; the model then holds the state from
    /// before the failing step.
    pub aborted: Option<Error>,
}

/// Batch order of one epoch: a seeded shuffle, with a trailing batch of a
/// single sample dropped because batch norm cannot train on it.
pub fn epoch_batches(len: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut derived_rng(seed, 0x1000 + epoch as u64));
    order
        .chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

fn check_dataset(model: &Model, train: &[Sample]) -> Result<()> {
    if train.len() < 2 {
        return Err(Error::Dataset("training needs at least two samples".into()));
    }
    if model.config.ablation.use_ca {
        for gender in [Gender::Female, Gender::Male] {
            if !train.iter().any(|s| s.gender == gender) {
                return Err(Error::Dataset(alloc::format!(
                    "context attention needs both genders; none with gender bit {}",
                    gender.bit()
                )));
            }
        }
    }
    Ok(())
}

/// Training-mode forward passes without parameter updates, so batch-norm
/// running statistics and the context averages describe `samples`.
pub fn calibrate_statistics(model: &mut Model, samples: &[Sample], batch: usize, seed: u64) -> Result<()> {
    check_dataset(model, samples)?;
    for idx in epoch_batches(samples.len(), batch.max(2), seed, usize::MAX >> 1) {
        let refs: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let mut g = Graph::new();
        let bound = model.params.bind(&mut g);
        model.forward(&mut g, &bound, &refs, Mode::Train)?;
    }
    Ok(())
}

/// L1 regression of the summed weighted scores on the age, with Adam and a
/// step learning-rate schedule. `val` may be empty.
pub fn train(model: &mut Model, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(model, train)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..cfg.adam
    });
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        adam.set_lr(lr);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (step, idx) in epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let batch: Vec<Cow<Sample>> = idx
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        let seed = cfg.seed ^ ((epoch as u64) << 32) ^ i as u64;
                        augment_sample(&train[i], seed, &cfg.augmentation).map(|a| Cow::Owned(a.sample))
                    } else {
                        Ok(Cow::Borrowed(&train[i]))
                    }
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Sample> = batch.iter().map(|c| c.as_ref()).collect();
            let saved_norms = model.norms.clone();
            let saved_ema = model.ema.clone();

            let mut g = Graph::new();
            let bound = model.params.bind(&mut g);
            let out = model.forward(&mut g, &bound, &refs, Mode::Train)?;
            let target = g.constant(Tensor::new(
                alloc::vec![refs.len(), 1],
                refs.iter().map(|s| s.age_months).collect(),
            )?);
            let loss = g.l1_loss(out.ages, target)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                model.norms = saved_norms;
                model.ema = saved_ema;
                return Ok(TrainOutcome {
                    log,
                    aborted: Some(Error::NonFiniteLoss { epoch, step }),
                });
            }
            let grads = g.backward(loss)?;
            let grads = bound.collect(&grads, &model.params);
            if let Err(e) = adam.step(&mut model.params, &grads) {
                model.norms = saved_norms;
                model.ema = saved_ema;
                return Ok(TrainOutcome { log, aborted: Some(e) });
            }
            loss_sum += value * refs.len() as f64;
            seen += refs.len();
        }
        let val_mad = if val.is_empty() {
            None
        } else {
            Some(evaluate(model, val)?.mad)
        };
        log.push(LogRow {
            epoch,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            val_mad,
        });
    }
    Ok(TrainOutcome { log, aborted: None })
}
