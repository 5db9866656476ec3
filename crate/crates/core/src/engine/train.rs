use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{model_cost, Norm};
use crate::error::{DarcError, Result};
use crate::harness::Dataset;
use crate::model::{Layer, Model, WeightKey};
use crate::scalar::Scalar;
use crate::simplex::{penalized_alpha_grad, project_simplex, AlphaVector};
use crate::tensor::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Plain training of a concrete model.
    Train,
    /// Joint training of weights and mixture weights.
    Block,
    FineTune,
}

/// One line of the training log. Contains no timings, so identical seeds
/// give identical records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub block: usize,
    pub epoch: usize,
    pub lambda: f64,
    pub eta: f64,
    pub loss: f64,
    /// Number of candidates with positive weight, per mixture layer.
    pub supports: Vec<usize>,
    pub alphas: Vec<Vec<f64>>,
    pub cost_l0: f64,
    pub cost_l1: f64,
    pub steps: usize,
    /// Steps on which both the weight gradient and the loss part of the
    /// mixture-weight gradient were nonzero.
    pub joint_steps: usize,
}

/// Receives progress from the training loops.
pub trait Observer<T> {
    fn on_epoch(&mut self, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }

    fn on_snapshot(&mut self, _snapshot: &super::Snapshot<T>) -> Result<()> {
        Ok(())
    }
}

impl<T> Observer<T> for () {}

/// Collects every epoch record in memory.
#[derive(Clone, Debug, Default)]
pub struct LogCollector {
    pub records: Vec<EpochRecord>,
}

impl<T> Observer<T> for LogCollector {
    fn on_epoch(&mut self, record: &EpochRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }
}

/// Stochastic gradient descent with optional heavy-ball momentum.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    velocity: BTreeMap<WeightKey, Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    fn step(&mut self, weight: &mut [T], key: WeightKey, grad: &[T]) {
        if self.momentum == T::zero() {
            weight.iter_mut().zip(grad).for_each(|(w, &g)| *w -= self.lr * g);
            return;
        }
        let v = self
            .velocity
            .entry(key)
            .or_insert_with(|| vec![T::zero(); grad.len()]);
        for ((w, vi), &g) in weight.iter_mut().zip(v.iter_mut()).zip(grad) {
            *vi = self.momentum * *vi + g;
            *w -= self.lr * *vi;
        }
    }
}

/// Settings shared by one call of [`train_epochs`].
#[derive(Clone, Copy, Debug)]
pub struct StepConfig {
    pub phase: Phase,
    pub block: usize,
    pub lambda: f64,
    /// Step size for the mixture weights.
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Keep computing candidates whose weight reached zero so they can
    /// regain mass.
    pub allow_revival: bool,
}

/// Runs `cfg.epochs` epochs of minibatch training over `indices`. Every step
/// updates all weights with `sgd` and, for each mixture layer, moves `α`
/// with a projected step on the penalized objective from the same
/// minibatch. Outside revival mode a weight that reaches zero deactivates
/// its candidate at once.
///
/// A projection with no positive entry or a non-finite loss aborts with
/// [`DarcError::Divergence`].
pub fn train_epochs<T: Scalar, R: Rng + ?Sized>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    indices: &[usize],
    cfg: StepConfig,
    sgd: &mut Sgd<T>,
    rng: &mut R,
    observer: &mut dyn Observer<T>,
) -> Result<Vec<EpochRecord>> {
    let mut order = indices.to_vec();
    let mut records = Vec::with_capacity(cfg.epochs);
    let lambda = T::lit(cfg.lambda);
    let eta = T::lit(cfg.eta);
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        let mut loss_sum = 0.0;
        let mut steps = 0;
        let mut joint_steps = 0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (x, y) = data.batch(chunk)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let bound = model.forward(&mut tape, xv, true)?;
            let loss = tape.softmax_cross_entropy(bound.output, &y)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(DarcError::Divergence(format!(
                    "non-finite loss at block {} epoch {epoch}",
                    cfg.block
                )));
            }
            tape.backward(loss)?;

            let mut weight_grad = false;
            for &(key, var) in &bound.weights {
                if let Some(g) = tape.grad(var) {
                    weight_grad |= g.iter().any(|&v| v != T::zero());
                    sgd.step(model.weight_mut(key).data_mut(), key, g);
                }
            }
            let mut alpha_grad = false;
            for &(li, var) in &bound.alphas {
                let Layer::Mixture(m) = &mut model.layers[li] else {
                    unreachable!("alpha bound for a non-mixture layer");
                };
                let Some(g) = tape.grad(var) else { continue };
                alpha_grad |= g.iter().any(|&v| v != T::zero());
                let full = penalized_alpha_grad(g, m.costs.values(), lambda);
                let idx: Vec<usize> = if cfg.allow_revival {
                    (0..m.len()).collect()
                } else {
                    m.active_indices()
                };
                let moved: Vec<T> = idx.iter().map(|&j| m.alpha.values()[j] - eta * full[j]).collect();
                let projected = project_simplex(&moved)
                    .map_err(|e| DarcError::Divergence(format!("layer {li}, block {}: {e}", cfg.block)))?;
                let mut values = vec![T::zero(); m.len()];
                for (&j, &v) in idx.iter().zip(projected.values()) {
                    values[j] = v;
                }
                m.alpha = AlphaVector::from_raw(values);
                if !cfg.allow_revival {
                    m.remove_zeros();
                }
            }
            if weight_grad && alpha_grad {
                joint_steps += 1;
            }
            loss_sum += loss_value.as_f64();
            steps += 1;
        }
        let record = epoch_record(
            model,
            cfg,
            epoch,
            loss_sum / steps.max(1) as f64,
            steps,
            joint_steps,
        )?;
        observer.on_epoch(&record)?;
        records.push(record);
    }
    Ok(records)
}

fn epoch_record<T: Scalar>(
    model: &Model<T>,
    cfg: StepConfig,
    epoch: usize,
    loss: f64,
    steps: usize,
    joint_steps: usize,
) -> Result<EpochRecord> {
    let mixtures: Vec<_> = model.mixtures().collect();
    let (cost_l0, cost_l1) = if mixtures.is_empty() {
        (0.0, 0.0)
    } else {
        (
            model_cost(mixtures.iter().copied(), Norm::L0)?.as_f64(),
            model_cost(mixtures.iter().copied(), Norm::L1)?.as_f64(),
        )
    };
    Ok(EpochRecord {
        phase: cfg.phase,
        block: cfg.block,
        epoch,
        lambda: cfg.lambda,
        eta: cfg.eta,
        loss,
        supports: mixtures.iter().map(|m| m.alpha.support().len()).collect(),
        alphas: mixtures
            .iter()
            .map(|m| m.alpha.values().iter().map(|v| v.as_f64()).collect())
            .collect(),
        cost_l0,
        cost_l1,
        steps,
        joint_steps,
    })
}

/// Mean cross-entropy of the model on `indices`, in batches.
pub fn mean_loss<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    indices: &[usize],
    batch: usize,
) -> Result<T> {
    let mut total = T::zero();
    for chunk in indices.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let bound = model.forward(&mut tape, xv, false)?;
        let loss = tape.softmax_cross_entropy(bound.output, &y)?;
        total += tape.value(loss).data()[0] * T::from_count(chunk.len());
    }
    Ok(total / T::from_count(indices.len().max(1)))
}

/// Plain empirical-risk training of all weights at step size `lr`.
#[allow(clippy::too_many_arguments)]
pub fn fit<T: Scalar, R: Rng + ?Sized>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    indices: &[usize],
    epochs: usize,
    lr: f64,
    momentum: f64,
    batch_size: usize,
    phase: Phase,
    rng: &mut R,
    observer: &mut dyn Observer<T>,
) -> Result<Vec<EpochRecord>> {
    let mut sgd = Sgd::new(T::lit(lr), T::lit(momentum));
    let cfg = StepConfig {
        phase,
        block: 0,
        lambda: 0.0,
        eta: lr,
        epochs,
        batch_size,
        allow_revival: false,
    };
    train_epochs(model, data, indices, cfg, &mut sgd, rng, observer)
}
