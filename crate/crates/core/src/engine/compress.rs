use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mixture::select_submodel;
use super::train::{mean_loss, train_epochs, EpochRecord, Observer, Phase, Sgd, StepConfig};
use crate::candidates::CandidateKind;
use crate::cost::{model_cost, CostKind, Norm};
use crate::error::{config_err, DarcError, Result};
use crate::harness::{evaluate, Dataset, EvalOptions, Metrics, Split};
use crate::model::Model;
use crate::scalar::Scalar;

/// Hyperparameters of the compression loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DarcSchedule {
    /// Initial penalty weight; `None` picks it so that loss and penalty start
    /// at the same scale.
    pub lambda0: Option<f64>,
    pub lambda_growth: f64,
    pub eta0: f64,
    /// Factor applied to the step size after every block; 1 keeps it fixed.
    pub eta_decay: f64,
    pub block_epochs: usize,
    pub fine_tune_epochs: usize,
    /// Largest admissible `ℓ0` cost of the mixture layers.
    pub budget: f64,
    pub cost: CostKind,
    pub batch_size: usize,
    pub momentum: f64,
    pub allow_revival: bool,
    /// The run stops once `λ` exceeds `lambda_ceiling · λ₀`.
    pub lambda_ceiling: f64,
    pub max_retries: usize,
}

impl Default for DarcSchedule {
    fn default() -> Self {
        Self {
            lambda0: None,
            lambda_growth: 2.0,
            eta0: 0.01,
            eta_decay: 0.5,
            block_epochs: 2,
            fine_tune_epochs: 20,
            budget: 0.0,
            cost: CostKind::ParamCount,
            batch_size: 32,
            momentum: 0.0,
            allow_revival: false,
            lambda_ceiling: 1e12,
            max_retries: 3,
        }
    }
}

impl DarcSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_growth > 1.0) {
            return config_err(format!("lambda_growth must exceed 1, got {}", self.lambda_growth));
        }
        if !(self.eta_decay > 0.0 && self.eta_decay <= 1.0) {
            return config_err(format!("eta_decay must lie in (0, 1], got {}", self.eta_decay));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return config_err(format!("eta0 must be positive, got {}", self.eta0));
        }
        if matches!(self.lambda0, Some(l) if !(l > 0.0 && l.is_finite())) {
            return config_err("lambda0 must be a finite positive number");
        }
        if self.block_epochs == 0 || self.batch_size == 0 {
            return config_err("block_epochs and batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return config_err(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.budget >= 0.0) || !(self.lambda_ceiling > 1.0) {
            return config_err("budget must be non-negative and lambda_ceiling above 1");
        }
        self.cost.validate()
    }
}

/// A concrete model saved after one block.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot<T> {
    pub block: usize,
    pub lambda: f64,
    pub eta: f64,
    /// `ℓ0` and `ℓ1` cost of the live mixture when the snapshot was taken.
    pub cost_l0: f64,
    pub cost_l1: f64,
    /// Cost of the candidates kept in `model`.
    pub selected_cost: f64,
    pub kinds: Vec<CandidateKind>,
    /// Fine-tuned model, weights rounded to `f32`.
    pub model: Model<T>,
    pub metrics_before: Metrics,
    pub metrics: Metrics,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    BudgetMet,
    /// Every layer is down to one candidate but the budget is still exceeded.
    Exhausted,
    LambdaCeiling,
    /// Retries ran out after a divergence; the snapshots so far are kept.
    Diverged,
}

#[derive(Clone, Debug)]
pub struct CompressReport<T> {
    pub snapshots: Vec<Snapshot<T>>,
    pub outcome: Outcome,
    pub lambda0: f64,
    pub blocks: usize,
    pub retries: usize,
    pub log: Vec<EpochRecord>,
}

/// Smallest achievable `ℓ0` cost: the cheapest candidate in every mixture.
pub fn min_feasible_cost<T: Scalar>(model: &Model<T>) -> f64 {
    model.mixtures().map(|m| m.costs.min().as_f64()).sum()
}

/// Alternates blocks of joint training with pruning until the mixture's
/// `ℓ0` cost fits the budget or no layer has a choice left. After each
/// block the zero-weight candidates are removed, a concrete snapshot is
/// taken and the schedule moves to `η·eta_decay`, `λ·lambda_growth`. Each
/// snapshot is then fine-tuned at the final `η` without the penalty.
///
/// `model` must already be relaxed and initialized. Snapshots are evaluated
/// on the test split (the training split if there is none).
pub fn darc_compress<T: Scalar, R: Rng + ?Sized>(
    model: &mut Model<T>,
    data: &Dataset<T>,
    schedule: &DarcSchedule,
    rng: &mut R,
    observer: &mut dyn Observer<T>,
) -> Result<CompressReport<T>> {
    schedule.validate()?;
    if model.is_concrete() {
        return config_err("darc_compress needs at least one mixture layer");
    }
    model_cost(model.mixtures(), Norm::L0)?;
    let floor = min_feasible_cost(model);
    if schedule.budget < floor {
        return config_err(format!(
            "budget {} is below the cheapest reachable cost {floor}",
            schedule.budget
        ));
    }
    let train = data.indices(Split::Train);
    if train.is_empty() {
        return config_err("dataset has no training samples");
    }
    let mut eval_idx = data.indices(Split::Test);
    if eval_idx.is_empty() {
        eval_idx = train.clone();
    }
    let eval_opts = EvalOptions {
        batch_size: 256,
        latency: None,
    };

    let lambda0 = match schedule.lambda0 {
        Some(l) => l,
        None => {
            let warm = &train[..schedule.batch_size.min(train.len())];
            let loss = mean_loss(model, data, warm, schedule.batch_size)?.as_f64();
            let penalty = model_cost(model.mixtures(), Norm::L1)?.as_f64();
            if !(penalty > 0.0) {
                return config_err("cannot scale lambda0: the mixtures cost nothing");
            }
            loss / penalty
        }
    };
    if !(lambda0 > 0.0 && lambda0.is_finite()) {
        return config_err(format!("lambda0 came out as {lambda0}; set it explicitly"));
    }
    let ceiling = lambda0 * schedule.lambda_ceiling;

    let mut lambda = lambda0;
    let mut eta = schedule.eta0;
    let mut block = 0;
    let mut retries = 0;
    let mut log = Vec::new();
    let mut selected = Vec::new();
    let outcome = loop {
        let start = model.clone();
        let mut attempt = 0;
        let trained = loop {
            let cfg = StepConfig {
                phase: Phase::Block,
                block,
                lambda,
                eta,
                epochs: schedule.block_epochs,
                batch_size: schedule.batch_size,
                allow_revival: schedule.allow_revival,
            };
            let mut sgd = Sgd::new(T::lit(eta), T::lit(schedule.momentum));
            match train_epochs(model, data, &train, cfg, &mut sgd, rng, observer) {
                Ok(records) => break Some(records),
                Err(DarcError::Divergence(_)) if attempt < schedule.max_retries => {
                    *model = start.clone();
                    eta *= 0.5;
                    attempt += 1;
                    retries += 1;
                }
                Err(DarcError::Divergence(_)) => break None,
                Err(e) => return Err(e),
            }
        };
        let Some(records) = trained else {
            *model = start;
            break Outcome::Diverged;
        };
        log.extend(records);
        if !schedule.allow_revival {
            model.mixtures_mut().for_each(|m| {
                m.remove_zeros();
            });
        }
        let concrete = select_submodel(model)?;
        let selected_cost: f64 = model
            .mixtures()
            .map(|m| m.costs.values()[m.keep_index()].as_f64())
            .sum();
        let kinds = model
            .mixtures()
            .map(|m| m.candidates[m.keep_index()].kind)
            .collect();
        let cost_l0 = model_cost(model.mixtures(), Norm::L0)?.as_f64();
        let cost_l1 = model_cost(model.mixtures(), Norm::L1)?.as_f64();
        selected.push((
            block,
            lambda,
            eta,
            cost_l0,
            cost_l1,
            selected_cost,
            kinds,
            concrete,
        ));
        block += 1;

        if cost_l0 <= schedule.budget {
            break Outcome::BudgetMet;
        }
        if model.mixtures().all(|m| m.alpha.support().len() == 1) {
            break Outcome::Exhausted;
        }
        eta *= schedule.eta_decay;
        lambda *= schedule.lambda_growth;
        if lambda > ceiling {
            break Outcome::LambdaCeiling;
        }
    };

    let mut snapshots = Vec::with_capacity(selected.len());
    for (b, lam, snap_eta, cost_l0, cost_l1, selected_cost, kinds, mut concrete) in selected {
        let mut rounded = concrete.clone();
        rounded.round_to_f32();
        let metrics_before = evaluate(&rounded, data, &eval_idx, &eval_opts)?;
        let cfg = StepConfig {
            phase: Phase::FineTune,
            block: b,
            lambda: 0.0,
            eta,
            epochs: schedule.fine_tune_epochs,
            batch_size: schedule.batch_size,
            allow_revival: false,
        };
        let mut sgd = Sgd::new(T::lit(eta), T::lit(schedule.momentum));
        log.extend(train_epochs(
            &mut concrete,
            data,
            &train,
            cfg,
            &mut sgd,
            rng,
            observer,
        )?);
        concrete.round_to_f32();
        let metrics = evaluate(&concrete, data, &eval_idx, &eval_opts)?;
        let snapshot = Snapshot {
            block: b,
            lambda: lam,
            eta: snap_eta,
            cost_l0,
            cost_l1,
            selected_cost,
            kinds,
            model: concrete,
            metrics_before,
            metrics,
        };
        observer.on_snapshot(&snapshot)?;
        snapshots.push(snapshot);
    }
    Ok(CompressReport {
        snapshots,
        outcome,
        lambda0,
        blocks: block,
        retries,
        log,
    })
}
