//! Negative sampling and the mini-batch Adam training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::corpus::EncodedRecord;
use crate::eval::{evaluate, EvalError, PoolSpec};
use crate::model::{Dropout, Model, ModelError};
use crate::tensor::{Adam, AdamConfig, Gradients, TensorError};

/// Pairs per gradient shard. Fixed so the reduction order, and therefore
/// every bit of the result, does not depend on the number of threads.
const SHARD: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least 2 training records, got {0}")]
    TooFewRecords(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("batch {batch}: {source}")]
    Optimizer {
        batch: usize,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub dropout: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub seed: u64,
    pub negatives: usize,
    /// Fraction of records held out for checkpoint selection; 0 disables
    /// validation and keeps the final parameters.
    pub val_fraction: f64,
    /// Validation pool size per query; 0 ranks against every held-out code.
    pub val_pool_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            dropout: 0.25,
            adam: AdamConfig::default(),
            epochs: 20,
            seed: 0,
            negatives: 1,
            val_fraction: 0.05,
            val_pool_size: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.adam.lr <= 0.0 || self.adam.eps <= 0.0 {
            return bad("lr and eps must be positive");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.negatives == 0 {
            return bad("negatives must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Description index, code index and label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub desc: usize,
    pub code: usize,
    pub label: usize,
}

/// For each positive, `per_positive` codes drawn uniformly from `candidates`
/// excluding the positive's own code.
pub fn sample_negatives<R: Rng + ?Sized>(
    positives: &[usize],
    candidates: &[usize],
    per_positive: usize,
    rng: &mut R,
) -> Result<Vec<Triple>, TrainError> {
    if candidates.len() < 2 {
        return Err(TrainError::TooFewRecords(candidates.len()));
    }
    let mut out = Vec::with_capacity(positives.len() * per_positive);
    for &p in positives {
        for _ in 0..per_positive {
            let code = loop {
                let c = candidates[rng.gen_range(0..candidates.len())];
                if c != p {
                    break c;
                }
            };
            out.push(Triple { desc: p, code, label: 0 });
        }
    }
    Ok(out)
}

/// Seeded split into (train, validation) record indices.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    let val = ((n as f64 * fraction).round() as usize).min(n.saturating_sub(2));
    let held = idx.split_off(n - val);
    let (mut train, mut val) = (idx, held);
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// One loss-curve record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub val_mrr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation MRR, or the final ones when
    /// validation is off.
    pub best: Model<f32>,
    pub last: Model<f32>,
    pub best_epoch: usize,
    pub best_val_mrr: Option<f64>,
    pub curve: Vec<CurvePoint>,
}

/// Dropout stream for one pair, independent of sharding.
fn pair_rng(seed: u64, epoch: usize, position: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | position as u64);
    rng
}

/// Mean loss and averaged gradients of one batch.
fn batch_gradients(
    model: &Model<f32>,
    records: &[EncodedRecord],
    batch: &[Triple],
    offset: usize,
    config: &TrainConfig,
    epoch: usize,
) -> Result<(f64, Gradients<f32>), ModelError> {
    let shards = batch
        .par_chunks(SHARD)
        .enumerate()
        .map(|(s, shard)| {
            let mut grads = Gradients::zeros_like(model.params());
            let mut loss = 0.0;
            for (k, t) in shard.iter().enumerate() {
                let mut rng = pair_rng(config.seed, epoch, offset + s * SHARD + k);
                let dropout = (config.dropout > 0.0).then_some(Dropout {
                    rate: config.dropout,
                    rng: &mut rng,
                });
                loss += model.loss_and_grad(&records[t.desc].desc, &records[t.code].code, t.label, dropout, &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let mut iter = shards.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        grads.merge(&g);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n as f32);
    Ok((loss / n, grads))
}

/// Validation MRR of `model` on the held-out records.
fn validation_mrr(model: &Model<f32>, records: &[EncodedRecord], val: &[usize], config: &TrainConfig) -> Result<f64, TrainError> {
    let queries: Vec<_> = val.iter().map(|&i| &records[i].desc).collect();
    let codes: Vec<_> = val.iter().map(|&i| &records[i].code).collect();
    let truths: Vec<usize> = (0..val.len()).collect();
    let spec = PoolSpec {
        size: config.val_pool_size,
        seed: config.seed,
    };
    Ok(evaluate("val", model, &queries, &codes, &truths, spec)?.mrr)
}

/// Trains `model` on `records`. `on_epoch` sees every curve point as soon
/// as its epoch ends.
pub fn train(
    records: &[EncodedRecord],
    mut model: Model<f32>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&CurvePoint),
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if records.len() < 2 {
        return Err(TrainError::TooFewRecords(records.len()));
    }
    let (train_idx, val_idx) = split_validation(records.len(), config.val_fraction, config.seed);
    let mut adam = Adam::new(config.adam, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut best: Option<(Model<f32>, usize, f64)> = None;
    let mut batch_id = 0usize;
    for epoch in 1..=config.epochs {
        let mut triples: Vec<Triple> = train_idx
            .iter()
            .map(|&i| Triple { desc: i, code: i, label: 1 })
            .collect();
        triples.extend(sample_negatives(&train_idx, &train_idx, config.negatives, &mut rng)?);
        triples.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in triples.chunks(config.batch_size).enumerate() {
            let (loss, grads) = batch_gradients(&model, records, batch, b * config.batch_size, config, epoch)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_id });
            }
            adam.step(model.params_mut(), &grads)
                .map_err(|source| TrainError::Optimizer { batch: batch_id, source })?;
            total += loss * batch.len() as f64;
            batch_id += 1;
        }
        let val_mrr = if val_idx.is_empty() {
            None
        } else {
            Some(validation_mrr(&model, records, &val_idx, config)?)
        };
        let point = CurvePoint {
            epoch,
            step: adam.steps_taken(),
            loss: total / triples.len() as f64,
            val_mrr,
        };
        on_epoch(&point);
        curve.push(point);
        if let Some(v) = val_mrr {
            if best.as_ref().is_none_or(|(_, _, b)| v > *b) {
                best = Some((model.clone(), epoch, v));
            }
        }
    }
    let (best, best_epoch, best_val_mrr) = match best {
        Some((m, e, v)) => (m, e, Some(v)),
        None => (model.clone(), config.epochs, None),
    };
    Ok(TrainOutcome {
        best,
        last: model,
        best_epoch,
        best_val_mrr,
        curve,
    })
}
