use std::collections::BTreeMap;

use rand::Rng;

use crate::candidates::{mimic_init, CandidateKind, CandidateParams};
use crate::cost::{analytic_cost, measure_latency, CostKind, CostVector, LatencyStat};
use crate::error::{config_err, Result};
use crate::model::{Layer, Model};
use crate::scalar::Scalar;
use crate::simplex::AlphaVector;
use crate::tensor::Tensor;

/// A layer relaxed into `Σ_j α_j g_j(W_j, x)`. Candidate 0 is the original.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureLayer<T> {
    pub candidates: Vec<CandidateParams<T>>,
    pub alpha: AlphaVector<T>,
    pub costs: CostVector<T>,
    /// Candidates still evaluated. Pruned candidates keep their weights but
    /// have `α_j = 0` and are skipped by the forward pass.
    pub active: Vec<bool>,
}

impl<T: Scalar> MixtureLayer<T> {
    /// Uniform weights and parameter-count costs.
    pub fn new(candidates: Vec<CandidateParams<T>>) -> Result<Self> {
        if candidates.is_empty() {
            return config_err("a mixture layer needs at least one candidate");
        }
        let j = candidates.len();
        let costs = candidates
            .iter()
            .map(|c| T::from_count(c.param_count()))
            .collect();
        Ok(Self {
            alpha: AlphaVector::uniform(j),
            costs: CostVector::new(costs, CostKind::ParamCount)?,
            active: vec![true; j],
            candidates,
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.active[j]).collect()
    }

    /// Deactivates every candidate whose weight is exactly zero and returns
    /// the indices removed.
    pub fn remove_zeros(&mut self) -> Vec<usize> {
        let mut removed = Vec::new();
        for j in 0..self.len() {
            if self.active[j] && self.alpha.values()[j] == T::zero() {
                self.active[j] = false;
                removed.push(j);
            }
        }
        removed
    }

    /// Index kept when the layer is made concrete: among candidates with
    /// positive weight, the most expensive, lowest index on ties.
    pub fn keep_index(&self) -> usize {
        let alpha = self.alpha.values();
        let costs = self.costs.values();
        let mut best: Option<usize> = None;
        for j in 0..self.len() {
            if alpha[j] > T::zero() && best.is_none_or(|b| costs[j] > costs[b]) {
                best = Some(j);
            }
        }
        best.unwrap_or_else(|| self.alpha.argmax())
    }
}

/// Turns every compressible layer into a mixture of the original layer and
/// freshly initialized candidates of `kinds`, in order. Frozen layers are
/// left as they are. The relaxed model starts at uniform `α`.
pub fn relax<T: Scalar, R: Rng + ?Sized>(
    model: &Model<T>,
    kinds: &[CandidateKind],
    rng: &mut R,
) -> Result<Model<T>> {
    let shapes = model.layer_input_shapes()?;
    let mut layers = Vec::with_capacity(model.layers.len());
    for (li, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::Param {
                candidate,
                compressible: true,
            } => {
                let out = candidate.output_shape(&shapes[li])?;
                let mut cands = vec![candidate.clone()];
                for &kind in kinds {
                    let c = CandidateParams::build(kind, candidate.dims, rng)?;
                    let got = c.output_shape(&shapes[li])?;
                    if got != out {
                        return config_err(format!(
                            "layer {li}: {kind} produces {got:?}, the original {out:?}"
                        ));
                    }
                    cands.push(c);
                }
                layers.push(Layer::Mixture(MixtureLayer::new(cands)?));
            }
            other => layers.push(other.clone()),
        }
    }
    Model::new(model.input_shape.clone(), model.num_classes, layers)
}

/// How [`init_darc`] prepares the candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct InitOptions {
    /// Gradient steps of output mimicking per candidate; 0 keeps the random
    /// initialization.
    pub mimic_steps: usize,
    pub mimic_step_size: f64,
    pub cost: CostKind,
    /// Per-kind cost table for [`CostKind::Synthetic`].
    pub synthetic_costs: BTreeMap<CandidateKind, f64>,
    pub latency_stat: LatencyStat,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            mimic_steps: 200,
            mimic_step_size: 0.1,
            cost: CostKind::ParamCount,
            synthetic_costs: BTreeMap::new(),
            latency_stat: LatencyStat::Median,
        }
    }
}

/// Sets every mixture to uniform `α`, fits candidates `1..J` to the
/// original's outputs on `sample` (a list of input batches for the whole
/// model) and fills in the costs.
pub fn init_darc<T: Scalar>(model: &mut Model<T>, sample: &[Tensor<T>], opts: &InitOptions) -> Result<()> {
    opts.cost.validate()?;
    let shapes = model.layer_input_shapes()?;
    // Activations entering the current layer, computed with the original
    // candidate of every mixture.
    let mut acts: Vec<Tensor<T>> = sample.to_vec();
    for (li, shape) in shapes[..model.layers.len()].iter().enumerate() {
        if let Layer::Mixture(m) = &mut model.layers[li] {
            let j = m.len();
            m.alpha = AlphaVector::uniform(j);
            m.active = vec![true; j];
            if opts.mimic_steps > 0 && !acts.is_empty() {
                let (original, rest) = m.candidates.split_first_mut().expect("non-empty mixture");
                for c in rest {
                    mimic_init(c, original, &acts, opts.mimic_steps, T::lit(opts.mimic_step_size))?;
                }
            }
            let mut costs = Vec::with_capacity(j);
            for c in &m.candidates {
                costs.push(candidate_cost(c, shape, opts)?);
            }
            m.costs = CostVector::new(costs, opts.cost)?;
        }
        acts = acts
            .iter()
            .map(|x| layer_forward(&model.layers[li], x))
            .collect::<Result<_>>()?;
    }
    Ok(())
}

fn candidate_cost<T: Scalar>(c: &CandidateParams<T>, input: &[usize], opts: &InitOptions) -> Result<T> {
    match opts.cost {
        CostKind::ParamCount | CostKind::Flops => analytic_cost(c, opts.cost, input),
        CostKind::MeasuredLatency { batch_size, reps } => {
            measure_latency(c, input, batch_size, reps, opts.latency_stat).map(T::lit)
        }
        CostKind::Synthetic => match opts.synthetic_costs.get(&c.kind) {
            Some(&v) => Ok(T::lit(v)),
            None => config_err(format!("no synthetic cost given for {}", c.kind)),
        },
    }
}

/// One layer evaluated with a mixture's original candidate standing in for
/// the whole mixture.
fn layer_forward<T: Scalar>(layer: &Layer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    match layer {
        Layer::Param { candidate, .. } => candidate.forward_tensor(x),
        Layer::Mixture(m) => m.candidates[0].forward_tensor(x),
        Layer::Relu => Ok(x.map(|v| if v > T::zero() { v } else { T::zero() })),
        Layer::GlobalAvgPool => {
            let s = x.shape();
            let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
            let data = x
                .data()
                .chunks(hw)
                .map(|ch| ch.iter().copied().sum::<T>() / T::from_count(hw))
                .collect();
            Tensor::new(vec![n, c], data)
        }
    }
}

/// The concrete model obtained by keeping one candidate per mixture (see
/// [`MixtureLayer::keep_index`]) and folding its weight into the
/// candidate's output scale. Kinds without weights keep `α` unfolded, so
/// their output is off by that factor unless `α` was one-hot.
pub fn select_submodel<T: Scalar>(model: &Model<T>) -> Result<Model<T>> {
    let layers = model
        .layers
        .iter()
        .map(|layer| match layer {
            Layer::Mixture(m) => {
                let keep = m.keep_index();
                let mut candidate = m.candidates[keep].clone();
                let a = m.alpha.values()[keep];
                if a != T::one() {
                    candidate.scale_output(a);
                }
                Layer::Param {
                    candidate,
                    compressible: true,
                }
            }
            other => other.clone(),
        })
        .collect();
    Model::new(model.input_shape.clone(), model.num_classes, layers)
}
