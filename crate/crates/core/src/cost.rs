//! Candidate and model cost accounting.

use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::candidates::{self, CandidateParams};
use crate::engine::MixtureLayer;
use crate::error::{config_err, dim_err, Result};
use crate::model::Forward;
use crate::scalar::Scalar;
use crate::simplex::AlphaVector;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostKind {
    ParamCount,
    MeasuredLatency {
        batch_size: usize,
        reps: usize,
    },
    Flops,
    /// Externally supplied cost table.
    Synthetic,
}

impl CostKind {
    pub fn validate(self) -> Result<()> {
        match self {
            CostKind::MeasuredLatency { reps, .. } if reps < 3 => {
                config_err(format!("latency costs need at least 3 repetitions, got {reps}"))
            }
            CostKind::MeasuredLatency { batch_size: 0, .. } => {
                config_err("latency costs need a positive batch size")
            }
            _ => Ok(()),
        }
    }
}

/// Non-negative per-candidate costs of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostVector<T> {
    values: Vec<T>,
    kind: CostKind,
}

impl<T: Scalar> CostVector<T> {
    pub fn new(values: Vec<T>, kind: CostKind) -> Result<Self> {
        kind.validate()?;
        if let Some(bad) = values.iter().find(|v| !(**v >= T::zero()) || !v.is_finite()) {
            return config_err(format!("cost {bad} is not a finite non-negative number"));
        }
        Ok(Self { values, kind })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn kind(&self) -> CostKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn min(&self) -> T {
        self.values.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max(&self) -> T {
        self.values.iter().copied().fold(T::zero(), T::max)
    }
}

fn check_len<T: Scalar>(alpha: &AlphaVector<T>, costs: &CostVector<T>) -> Result<()> {
    if alpha.len() != costs.len() {
        return config_err(format!(
            "alpha has {} entries but there are {} costs",
            alpha.len(),
            costs.len()
        ));
    }
    Ok(())
}

/// `Σ_j C_j · 1{α_j > 0}`: the deployment cost of the support.
pub fn cost_l0<T: Scalar>(alpha: &AlphaVector<T>, costs: &CostVector<T>) -> Result<T> {
    check_len(alpha, costs)?;
    Ok(alpha
        .values()
        .iter()
        .zip(costs.values())
        .filter(|(&a, _)| a > T::zero())
        .map(|(_, &c)| c)
        .sum())
}

/// `Σ_j C_j · α_j`: the differentiable surrogate.
pub fn cost_l1<T: Scalar>(alpha: &AlphaVector<T>, costs: &CostVector<T>) -> Result<T> {
    check_len(alpha, costs)?;
    Ok(alpha
        .values()
        .iter()
        .zip(costs.values())
        .map(|(&a, &c)| a * c)
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L0,
    L1,
}

/// Sum of per-layer costs. All layers must carry costs of one kind.
pub fn model_cost<'a, T, I>(layers: I, norm: Norm) -> Result<T>
where
    T: Scalar,
    I: IntoIterator<Item = &'a MixtureLayer<T>>,
{
    let mut kind = None;
    let mut total = T::zero();
    for layer in layers {
        match kind {
            None => kind = Some(layer.costs.kind()),
            Some(k) if k != layer.costs.kind() => {
                return config_err(format!(
                    "layers mix cost kinds {k:?} and {:?}",
                    layer.costs.kind()
                ))
            }
            _ => {}
        }
        total += match norm {
            Norm::L0 => cost_l0(&layer.alpha, &layer.costs)?,
            Norm::L1 => cost_l1(&layer.alpha, &layer.costs)?,
        };
    }
    Ok(total)
}

/// Analytic cost of a candidate on a per-sample input shape.
pub fn analytic_cost<T: Scalar>(c: &CandidateParams<T>, kind: CostKind, input: &[usize]) -> Result<T> {
    match kind {
        CostKind::ParamCount => Ok(T::from_count(c.param_count())),
        CostKind::Flops => {
            let (h, w) = match input {
                [_, h, w] => (*h, *w),
                [_] => (1, 1),
                _ => return dim_err(format!("no flop model for input shape {input:?}")),
            };
            Ok(T::from_count(candidates::flops(c.kind, c.dims, h, w)))
        }
        other => config_err(format!("{other:?} costs are not analytic")),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyStat {
    #[default]
    Median,
    Mean,
}

static BENCH_LOCK: Mutex<()> = Mutex::new(());

const WARMUP_RUNS: usize = 2;

/// Wall-clock seconds per forward pass of a `batch × input` tensor: the
/// median (or mean) of `reps` timed runs after discarded warm-up runs.
/// Concurrent calls are serialized process-wide.
pub fn measure_latency<T, M>(
    model: &M,
    input: &[usize],
    batch: usize,
    reps: usize,
    stat: LatencyStat,
) -> Result<f64>
where
    T: Scalar,
    M: Forward<T> + ?Sized,
{
    if reps < 3 {
        return config_err(format!("latency needs at least 3 repetitions, got {reps}"));
    }
    if batch == 0 {
        return config_err("latency batch size must be positive");
    }
    let mut shape = vec![batch];
    shape.extend_from_slice(input);
    let mut rng = ChaCha8Rng::seed_from_u64(0x1a7e);
    let x = Tensor::uniform(&shape, -T::one(), T::one(), &mut rng);

    let _guard = BENCH_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    for _ in 0..WARMUP_RUNS {
        std::hint::black_box(model.forward_tensor(&x)?);
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(model.forward_tensor(&x)?);
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(match stat {
        LatencyStat::Mean => times.iter().sum::<f64>() / reps as f64,
        LatencyStat::Median => {
            times.sort_by(f64::total_cmp);
            if reps % 2 == 1 {
                times[reps / 2]
            } else {
                0.5 * (times[reps / 2 - 1] + times[reps / 2])
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::candidates::{CandidateKind, Dims};

    fn alpha(v: &[f64]) -> AlphaVector<f64> {
        crate::simplex::project_simplex(v).unwrap()
    }

    #[test]
    fn l0_counts_support_only() {
        let costs = CostVector::new(vec![576.0, 72.0, 64.0, 136.0], CostKind::ParamCount).unwrap();
        assert_eq!(cost_l0(&alpha(&[0.5, 0.0, 0.5, 0.0]), &costs).unwrap(), 640.0);
        assert_eq!(cost_l1(&alpha(&[0.5, 0.0, 0.5, 0.0]), &costs).unwrap(), 320.0);
        assert_eq!(cost_l0(&alpha(&[0.0, 1.0, 0.0, 0.0]), &costs).unwrap(), 72.0);
    }

    #[test]
    fn l1_never_exceeds_l0() {
        let costs = CostVector::new(vec![3.0, 1.0, 4.0], CostKind::Synthetic).unwrap();
        for v in [[0.2, 0.3, 0.5], [1.0, 0.0, 0.0], [0.0, 0.9, 0.1]] {
            let a = alpha(&v);
            assert!(cost_l1(&a, &costs).unwrap() <= cost_l0(&a, &costs).unwrap() + 1e-12);
        }
    }

    #[test]
    fn rejects_bad_costs() {
        assert!(CostVector::new(vec![1.0, -1.0], CostKind::Synthetic).is_err());
        assert!(CostVector::new(vec![f64::NAN], CostKind::Synthetic).is_err());
        assert!(CostVector::new(
            vec![1.0],
            CostKind::MeasuredLatency {
                batch_size: 1,
                reps: 2
            }
        )
        .is_err());
        let costs = CostVector::new(vec![1.0, 2.0], CostKind::Synthetic).unwrap();
        assert!(cost_l0(&alpha(&[1.0, 0.0, 0.0]), &costs).is_err());
    }

    #[test]
    fn model_cost_rejects_mixed_kinds() {
        let rng = ChaCha8Rng::seed_from_u64(0);
        let cands = || {
            vec![
                CandidateParams::<f64>::build(
                    CandidateKind::PointwiseConv1x1,
                    Dims::conv(2, 2),
                    &mut rng.clone(),
                )
                .unwrap(),
                CandidateParams::build(
                    CandidateKind::DepthwiseSeparable3x3,
                    Dims::conv(2, 2),
                    &mut rng.clone(),
                )
                .unwrap(),
            ]
        };
        let a = MixtureLayer::new(cands()).unwrap();
        let mut b = MixtureLayer::new(cands()).unwrap();
        assert_eq!(
            model_cost(&[a.clone(), b.clone()], Norm::L0).unwrap(),
            2.0 * (4.0 + 18.0)
        );
        b.costs = CostVector::new(vec![1.0, 1.0], CostKind::Flops).unwrap();
        assert!(model_cost(&[a, b], Norm::L1).is_err());
    }

    #[test]
    fn analytic_costs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = CandidateParams::<f64>::build(CandidateKind::DsPlusPointwise, Dims::conv(8, 8), &mut rng)
            .unwrap();
        assert_eq!(
            analytic_cost(&c, CostKind::ParamCount, &[8, 6, 6]).unwrap(),
            136.0
        );
        assert_eq!(
            analytic_cost(&c, CostKind::Flops, &[8, 6, 6]).unwrap(),
            136.0 * 36.0
        );
        assert!(analytic_cost(&c, CostKind::Synthetic, &[8, 6, 6]).is_err());
    }

    #[test]
    fn latency_is_positive_and_validated() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = CandidateParams::<f64>::build(CandidateKind::PointwiseConv1x1, Dims::conv(4, 4), &mut rng)
            .unwrap();
        let t = measure_latency(&c, &[4, 6, 6], 2, 5, LatencyStat::Median).unwrap();
        assert!(t > 0.0 && t.is_finite());
        assert!(measure_latency(&c, &[4, 6, 6], 2, 2, LatencyStat::Mean).is_err());
        assert!(measure_latency(&c, &[4, 6, 6], 0, 5, LatencyStat::Mean).is_err());
    }
}
