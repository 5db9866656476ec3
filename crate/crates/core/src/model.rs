//! Sequential networks built from candidate layers.

use rand::Rng;

use crate::candidates::{CandidateKind, CandidateParams, Dims};
use crate::engine::MixtureLayer;
use crate::error::{config_err, dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Anything that maps a batch tensor to an output tensor.
pub trait Forward<T: Scalar> {
    fn forward_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> Forward<T> for CandidateParams<T> {
    fn forward_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        CandidateParams::forward_tensor(self, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    /// A concrete parameterized layer. `compressible` marks layers that
    /// relaxation turns into mixtures; the others are trained but never
    /// replaced.
    Param {
        candidate: CandidateParams<T>,
        compressible: bool,
    },
    Mixture(MixtureLayer<T>),
    Relu,
    GlobalAvgPool,
}

/// Identifies one weight tensor: layer index, candidate index within the
/// layer (0 for plain layers) and tensor index within the candidate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WeightKey {
    pub layer: usize,
    pub candidate: usize,
    pub tensor: usize,
}

/// Vars created by one [`Model::forward`] call.
#[derive(Clone, Debug)]
pub struct Bound {
    pub output: Var,
    pub weights: Vec<(WeightKey, Var)>,
    /// Mixture weights per mixture layer index.
    pub alphas: Vec<(usize, Var)>,
}

/// A feed-forward network over per-sample inputs of shape `input_shape`
/// producing `num_classes` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(input_shape: Vec<usize>, num_classes: usize, layers: Vec<Layer<T>>) -> Result<Self> {
        let model = Self {
            input_shape,
            num_classes,
            layers,
        };
        model.check_shapes()?;
        Ok(model)
    }

    /// Convolutional classifier: a frozen full 3×3 stem from the input
    /// channels to `width`, one compressible `width → width` layer per entry
    /// of `body`, each followed by ReLU, then global average pooling and a
    /// frozen dense head.
    pub fn conv_classifier<R: Rng + ?Sized>(
        input_shape: [usize; 3],
        width: usize,
        body: &[CandidateKind],
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = vec![
            Layer::Param {
                candidate: CandidateParams::build(
                    CandidateKind::FullConv { k: 3 },
                    Dims::conv(input_shape[0], width),
                    rng,
                )?,
                compressible: false,
            },
            Layer::Relu,
        ];
        for &kind in body {
            layers.push(Layer::Param {
                candidate: CandidateParams::build(kind, Dims::conv(width, width), rng)?,
                compressible: true,
            });
            layers.push(Layer::Relu);
        }
        layers.push(Layer::GlobalAvgPool);
        layers.push(Layer::Param {
            candidate: CandidateParams::build(CandidateKind::Dense, Dims::dense(width, num_classes), rng)?,
            compressible: false,
        });
        Self::new(input_shape.to_vec(), num_classes, layers)
    }

    /// Per-sample shape entering each layer, plus the final output shape.
    pub fn layer_input_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        let mut cur = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match layer {
                Layer::Param { candidate, .. } => candidate.output_shape(&cur)?,
                Layer::Mixture(m) => {
                    let mut out: Option<Vec<usize>> = None;
                    for c in &m.candidates {
                        let s = c.output_shape(&cur)?;
                        match &out {
                            Some(o) if *o != s => {
                                return dim_err(format!(
                                    "layer {i}: mixture candidates disagree on output shape"
                                ))
                            }
                            _ => out = Some(s),
                        }
                    }
                    out.unwrap_or(cur)
                }
                Layer::Relu => cur,
                Layer::GlobalAvgPool => {
                    if cur.len() != 3 {
                        return dim_err(format!("layer {i}: pooling needs C×H×W, got {cur:?}"));
                    }
                    vec![cur[0]]
                }
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    fn check_shapes(&self) -> Result<()> {
        let shapes = self.layer_input_shapes()?;
        let out = shapes.last().expect("at least the input shape");
        if out != &[self.num_classes] {
            return config_err(format!(
                "model ends in shape {out:?}, expected [{}]",
                self.num_classes
            ));
        }
        Ok(())
    }

    /// Records the network on `tape`. Inactive mixture candidates are skipped.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, trainable: bool) -> Result<Bound> {
        let mut weights = Vec::new();
        let mut alphas = Vec::new();
        let mut h = x;
        for (li, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Param { candidate, .. } => {
                    let vars = candidate.bind(tape, trainable);
                    for (ti, &v) in vars.iter().enumerate() {
                        let key = WeightKey {
                            layer: li,
                            candidate: 0,
                            tensor: ti,
                        };
                        weights.push((key, v));
                    }
                    candidate.forward(tape, h, &vars)?
                }
                Layer::Mixture(m) => {
                    let alpha = tape.leaf(Tensor::from_vec(m.alpha.values().to_vec()), trainable);
                    alphas.push((li, alpha));
                    let mut terms = Vec::new();
                    for j in m.active_indices() {
                        let c = &m.candidates[j];
                        let vars = c.bind(tape, trainable);
                        for (ti, &v) in vars.iter().enumerate() {
                            let key = WeightKey {
                                layer: li,
                                candidate: j,
                                tensor: ti,
                            };
                            weights.push((key, v));
                        }
                        terms.push((j, c.forward(tape, h, &vars)?));
                    }
                    tape.mixture(alpha, &terms)?
                }
                Layer::Relu => tape.relu(h)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(h)?,
            };
        }
        Ok(Bound {
            output: h,
            weights,
            alphas,
        })
    }

    pub fn weight_mut(&mut self, key: WeightKey) -> &mut Tensor<T> {
        match &mut self.layers[key.layer] {
            Layer::Param { candidate, .. } => &mut candidate.weights[key.tensor],
            Layer::Mixture(m) => &mut m.candidates[key.candidate].weights[key.tensor],
            other => panic!("layer {} has no weights: {other:?}", key.layer),
        }
    }

    pub fn mixtures(&self) -> impl Iterator<Item = &MixtureLayer<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Mixture(m) => Some(m),
            _ => None,
        })
    }

    pub fn mixtures_mut(&mut self) -> impl Iterator<Item = &mut MixtureLayer<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Mixture(m) => Some(m),
            _ => None,
        })
    }

    pub fn is_concrete(&self) -> bool {
        self.mixtures().next().is_none()
    }

    /// Learnable scalars stored in the model, counting every candidate of
    /// every mixture layer.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Param { candidate, .. } => candidate.param_count(),
                Layer::Mixture(m) => m.candidates.iter().map(CandidateParams::param_count).sum(),
                _ => 0,
            })
            .sum()
    }

    /// Parameters outside mixture layers and outside compressible layers.
    pub fn frozen_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Param {
                    candidate,
                    compressible: false,
                } => candidate.param_count(),
                _ => 0,
            })
            .sum()
    }

    /// Kinds of the compressible (or relaxed) layers, in order. For a mixture
    /// layer this reports its single active candidate, or `None` while more
    /// than one remains.
    pub fn compressible_kinds(&self) -> Vec<Option<CandidateKind>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Param {
                    candidate,
                    compressible: true,
                } => Some(Some(candidate.kind)),
                Layer::Mixture(m) => {
                    let active = m.active_indices();
                    Some((active.len() == 1).then(|| m.candidates[active[0]].kind))
                }
                _ => None,
            })
            .collect()
    }

    pub fn round_to_f32(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Param { candidate, .. } => candidate.round_to_f32(),
                Layer::Mixture(m) => m.candidates.iter_mut().for_each(CandidateParams::round_to_f32),
                _ => {}
            }
        }
    }

    /// Logits for a batch.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let bound = self.forward(&mut tape, xv, false)?;
        Ok(tape.value(bound.output).clone())
    }
}

impl<T: Scalar> Forward<T> for Model<T> {
    fn forward_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.logits(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn classifier(body: &[CandidateKind]) -> Model<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Model::conv_classifier([3, 6, 6], 8, body, 4, &mut rng).unwrap()
    }

    #[test]
    fn planted_base_counts() {
        let m = classifier(&[CandidateKind::FullConv { k: 3 }; 2]);
        assert_eq!(m.param_count(), 1404);
        assert_eq!(m.frozen_param_count(), 216 + 36);
        assert_eq!(
            m.compressible_kinds(),
            vec![Some(CandidateKind::FullConv { k: 3 }); 2]
        );
        assert!(m.is_concrete());
    }

    #[test]
    fn logits_shape() {
        let m = classifier(&[CandidateKind::DsPlusPointwise]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = m.logits(&Tensor::randn(&[5, 3, 6, 6], 1.0, &mut rng)).unwrap();
        assert_eq!(y.shape(), &[5, 4]);
        assert_eq!(m.layer_input_shapes().unwrap().last().unwrap(), &vec![4]);
    }

    #[test]
    fn rejects_wrong_head() {
        let mut m = classifier(&[]);
        m.num_classes = 5;
        assert!(Model::new(m.input_shape.clone(), 5, m.layers).is_err());
        assert!(Model::<f64>::new(vec![3, 6, 6], 4, vec![Layer::Relu]).is_err());
        assert!(Model::<f64>::new(vec![3], 3, vec![Layer::GlobalAvgPool]).is_err());
    }

    #[test]
    fn forward_binds_every_weight() {
        let m = classifier(&[CandidateKind::PointwiseConv1x1]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 6, 6]));
        let bound = m.forward(&mut tape, x, true).unwrap();
        // stem weight, body weight, head weight and bias
        assert_eq!(bound.weights.len(), 4);
        assert!(bound.alphas.is_empty());
        let key = bound.weights[1].0;
        assert_eq!((key.layer, key.tensor), (2, 0));
    }

    #[test]
    fn round_to_f32_is_idempotent() {
        let mut m = classifier(&[CandidateKind::DepthwiseSeparable3x3]);
        m.round_to_f32();
        let once = m.clone();
        m.round_to_f32();
        assert_eq!(m, once);
    }
}
