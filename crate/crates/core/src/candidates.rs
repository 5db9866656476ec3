//! The library of per-layer hypotheses: the original layer and the cheaper
//! stand-ins it may be replaced by.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, DarcError, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Structural kind of a candidate layer.
///
/// Config files and the model format name kinds with the strings `full3x3`
/// (`full{k}x{k}` in general), `ds3x3`, `pw1x1`, `ds3x3_pw1x1`, `shift`,
/// `identity`, `dense` and `lowrank{r}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CandidateKind {
    /// Ordinary k×k convolution.
    FullConv {
        k: usize,
    },
    /// Fully grouped 3×3 convolution: every output channel reads one input
    /// channel.
    DepthwiseSeparable3x3,
    /// Full 1×1 convolution.
    PointwiseConv1x1,
    /// Fully grouped 3×3 convolution followed by a full 1×1 convolution.
    DsPlusPointwise,
    /// Fixed per-channel spatial shift followed by a full 1×1 convolution.
    Shift,
    Identity,
    /// Fully connected layer with bias.
    Dense,
    /// Rank-`rank` factorized fully connected layer with bias.
    LowRankDense {
        rank: usize,
    },
}

impl CandidateKind {
    pub fn is_dense(self) -> bool {
        matches!(self, Self::Dense | Self::LowRankDense { .. })
    }

    /// The three stand-ins tried for every 3×3 convolution by default.
    pub fn default_conv_replacements() -> Vec<Self> {
        vec![
            Self::DepthwiseSeparable3x3,
            Self::PointwiseConv1x1,
            Self::DsPlusPointwise,
        ]
    }
}

impl fmt::Display for CandidateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::FullConv { k } => write!(f, "full{k}x{k}"),
            Self::DepthwiseSeparable3x3 => f.write_str("ds3x3"),
            Self::PointwiseConv1x1 => f.write_str("pw1x1"),
            Self::DsPlusPointwise => f.write_str("ds3x3_pw1x1"),
            Self::Shift => f.write_str("shift"),
            Self::Identity => f.write_str("identity"),
            Self::Dense => f.write_str("dense"),
            Self::LowRankDense { rank } => write!(f, "lowrank{rank}"),
        }
    }
}

impl FromStr for CandidateKind {
    type Err = DarcError;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "ds3x3" => Self::DepthwiseSeparable3x3,
            "pw1x1" => Self::PointwiseConv1x1,
            "ds3x3_pw1x1" => Self::DsPlusPointwise,
            "shift" => Self::Shift,
            "identity" => Self::Identity,
            "dense" => Self::Dense,
            _ => {
                if let Some(rank) = s.strip_prefix("lowrank").and_then(|r| r.parse().ok()) {
                    Self::LowRankDense { rank }
                } else if let Some(k) = s
                    .strip_prefix("full")
                    .and_then(|r| r.split_once('x'))
                    .filter(|(a, b)| a == b)
                    .and_then(|(a, _)| a.parse().ok())
                {
                    Self::FullConv { k }
                } else {
                    return Err(DarcError::Version(format!("unknown candidate kind {s:?}")));
                }
            }
        };
        Ok(kind)
    }
}

impl TryFrom<String> for CandidateKind {
    type Error = DarcError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CandidateKind> for String {
    fn from(kind: CandidateKind) -> Self {
        kind.to_string()
    }
}

/// Channel (or feature) counts and kernel geometry of one layer. Dense kinds
/// read `in_ch`/`out_ch` as feature counts; `kernel` is the shift range for
/// [`CandidateKind::Shift`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Dims {
    pub fn conv(in_ch: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel: 3,
            stride: 1,
        }
    }

    pub fn dense(in_features: usize, out_features: usize) -> Self {
        Self {
            in_ch: in_features,
            out_ch: out_features,
            kernel: 1,
            stride: 1,
        }
    }
}

/// One concrete hypothesis: a kind, its dimensions and its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateParams<T> {
    pub kind: CandidateKind,
    pub dims: Dims,
    pub weights: Vec<Tensor<T>>,
    /// Per-input-channel `(dy, dx)` offsets; only used by `Shift`, never trained.
    pub shift_offsets: Vec<(isize, isize)>,
}

pub fn validate(kind: CandidateKind, dims: Dims) -> Result<()> {
    let Dims {
        in_ch,
        out_ch,
        kernel,
        stride,
    } = dims;
    if in_ch == 0 || out_ch == 0 {
        return config_err(format!("{kind}: zero channel count in {dims:?}"));
    }
    if stride != 1 {
        return config_err(format!("{kind}: only stride 1 is supported, got {stride}"));
    }
    match kind {
        CandidateKind::FullConv { k } if k == 0 || k % 2 == 0 => {
            config_err(format!("full convolution needs an odd kernel, got {k}"))
        }
        CandidateKind::DepthwiseSeparable3x3 | CandidateKind::Identity if in_ch != out_ch => config_err(
            format!("{kind} needs in == out channels, got {in_ch} -> {out_ch}"),
        ),
        CandidateKind::Shift if kernel == 0 || kernel % 2 == 0 => {
            config_err(format!("shift needs an odd offset range, got {kernel}"))
        }
        CandidateKind::LowRankDense { rank } if rank == 0 || rank >= in_ch.min(out_ch) => config_err(
            format!("rank {rank} must satisfy 1 <= r < min({in_ch}, {out_ch})"),
        ),
        _ => Ok(()),
    }
}

/// Weight tensor shapes for a kind, in storage order.
pub fn weight_shapes(kind: CandidateKind, dims: Dims) -> Vec<Vec<usize>> {
    let Dims { in_ch, out_ch, .. } = dims;
    match kind {
        CandidateKind::FullConv { k } => vec![vec![out_ch, in_ch, k, k]],
        CandidateKind::DepthwiseSeparable3x3 => vec![vec![in_ch, 1, 3, 3]],
        CandidateKind::PointwiseConv1x1 | CandidateKind::Shift => {
            vec![vec![out_ch, in_ch, 1, 1]]
        }
        CandidateKind::DsPlusPointwise => vec![vec![in_ch, 1, 3, 3], vec![out_ch, in_ch, 1, 1]],
        CandidateKind::Identity => vec![],
        CandidateKind::Dense => vec![vec![in_ch, out_ch], vec![out_ch]],
        CandidateKind::LowRankDense { rank } => {
            vec![vec![in_ch, rank], vec![rank, out_ch], vec![out_ch]]
        }
    }
}

/// Closed-form learnable-scalar count.
pub fn analytic_param_count(kind: CandidateKind, dims: Dims) -> usize {
    let (i, o) = (dims.in_ch, dims.out_ch);
    match kind {
        CandidateKind::FullConv { k } => o * i * k * k,
        CandidateKind::DepthwiseSeparable3x3 => 9 * i,
        CandidateKind::PointwiseConv1x1 | CandidateKind::Shift => i * o,
        CandidateKind::DsPlusPointwise => 9 * i + i * o,
        CandidateKind::Identity => 0,
        CandidateKind::Dense => i * o + o,
        CandidateKind::LowRankDense { rank } => rank * (i + o) + o,
    }
}

/// Multiply-accumulate count for one sample on an `h×w` feature map (dense
/// kinds ignore the spatial size).
pub fn flops(kind: CandidateKind, dims: Dims, h: usize, w: usize) -> usize {
    let (i, o, hw) = (dims.in_ch, dims.out_ch, h * w);
    match kind {
        CandidateKind::FullConv { k } => o * i * k * k * hw,
        CandidateKind::DepthwiseSeparable3x3 => 9 * i * hw,
        CandidateKind::PointwiseConv1x1 | CandidateKind::Shift => i * o * hw,
        CandidateKind::DsPlusPointwise => (9 * i + i * o) * hw,
        CandidateKind::Identity => 0,
        CandidateKind::Dense => i * o,
        CandidateKind::LowRankDense { rank } => rank * (i + o),
    }
}

/// Round-robin assignment of the `kernel²` offsets in `[-r, r]²` to channels.
pub fn round_robin_offsets(channels: usize, kernel: usize) -> Vec<(isize, isize)> {
    let r = (kernel / 2) as isize;
    let positions: Vec<(isize, isize)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect();
    (0..channels).map(|c| positions[c % positions.len()]).collect()
}

impl<T: Scalar> CandidateParams<T> {
    /// Allocates a candidate with He fan-in initialized weights and zero biases.
    pub fn build<R: Rng + ?Sized>(kind: CandidateKind, dims: Dims, rng: &mut R) -> Result<Self> {
        validate(kind, dims)?;
        let weights = weight_shapes(kind, dims)
            .into_iter()
            .map(|shape| {
                if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                }
                let fan_in = if shape.len() == 4 {
                    shape[1] * shape[2] * shape[3]
                } else {
                    shape[0]
                };
                let std = T::lit((2.0 / fan_in as f64).sqrt());
                Tensor::randn(&shape, std, rng)
            })
            .collect();
        let shift_offsets = if kind == CandidateKind::Shift {
            round_robin_offsets(dims.in_ch, dims.kernel)
        } else {
            Vec::new()
        };
        Ok(Self {
            kind,
            dims,
            weights,
            shift_offsets,
        })
    }

    /// Wraps existing weights, checking them against the kind's shapes.
    pub fn from_weights(kind: CandidateKind, dims: Dims, weights: Vec<Tensor<T>>) -> Result<Self> {
        validate(kind, dims)?;
        let expected = weight_shapes(kind, dims);
        let got: Vec<Vec<usize>> = weights.iter().map(|w| w.shape().to_vec()).collect();
        if expected != got {
            return dim_err(format!("{kind} expects weight shapes {expected:?}, got {got:?}"));
        }
        let shift_offsets = if kind == CandidateKind::Shift {
            round_robin_offsets(dims.in_ch, dims.kernel)
        } else {
            Vec::new()
        };
        Ok(Self {
            kind,
            dims,
            weights,
            shift_offsets,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum()
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.check_input(input)?;
        let mut out = input.to_vec();
        out[0] = self.dims.out_ch;
        Ok(out)
    }

    fn check_input(&self, input: &[usize]) -> Result<()> {
        let want_rank = if self.kind.is_dense() { 1 } else { 3 };
        if input.len() != want_rank || input[0] != self.dims.in_ch {
            return dim_err(format!(
                "{} with {} inputs cannot take per-sample shape {input:?}",
                self.kind, self.dims.in_ch
            ));
        }
        Ok(())
    }

    /// Registers the weights on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.weights
            .iter()
            .map(|w| tape.leaf(w.clone(), trainable))
            .collect()
    }

    /// Records the candidate's forward pass; `w` are the vars from [`Self::bind`].
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, w: &[Var]) -> Result<Var> {
        self.check_input(&tape.shape(x)[1..])?;
        match self.kind {
            CandidateKind::FullConv { k } => tape.conv2d(x, w[0], 1, (k - 1) / 2),
            CandidateKind::DepthwiseSeparable3x3 => tape.conv2d(x, w[0], self.dims.in_ch, 1),
            CandidateKind::PointwiseConv1x1 => tape.conv2d(x, w[0], 1, 0),
            CandidateKind::DsPlusPointwise => {
                let depthwise = tape.conv2d(x, w[0], self.dims.in_ch, 1)?;
                tape.conv2d(depthwise, w[1], 1, 0)
            }
            CandidateKind::Shift => {
                let shifted = tape.shift(x, &self.shift_offsets)?;
                tape.conv2d(shifted, w[0], 1, 0)
            }
            CandidateKind::Identity => Ok(x),
            CandidateKind::Dense => {
                let h = tape.matmul(x, w[0])?;
                tape.bias_add(h, w[1])
            }
            CandidateKind::LowRankDense { .. } => {
                let h = tape.matmul(x, w[0])?;
                let h = tape.matmul(h, w[1])?;
                tape.bias_add(h, w[2])
            }
        }
    }

    /// Forward pass outside of any training loop.
    pub fn forward_tensor(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = self.bind(&mut tape, false);
        let y = self.forward(&mut tape, xv, &w)?;
        Ok(tape.value(y).clone())
    }

    /// Multiplies the candidate's output by `factor` by rescaling its weights.
    /// Returns `false` for parameter-free kinds, which cannot absorb a scale.
    pub fn scale_output(&mut self, factor: T) -> bool {
        match self.kind {
            CandidateKind::Identity => false,
            CandidateKind::Dense => {
                self.weights.iter_mut().for_each(|w| w.scale_in_place(factor));
                true
            }
            CandidateKind::LowRankDense { .. } => {
                self.weights[0].scale_in_place(factor);
                self.weights[2].scale_in_place(factor);
                true
            }
            _ => {
                self.weights[0].scale_in_place(factor);
                true
            }
        }
    }

    pub fn round_to_f32(&mut self) {
        for w in &mut self.weights {
            *w = w.round_to_f32();
        }
    }
}

/// Trains `student` to reproduce `teacher`'s outputs with plain gradient
/// descent on the mean squared output error, one step per input batch (the
/// stream is cycled). Returns the mean squared error over the whole stream
/// after the last step.
///
/// `step_size` is relative to the second moment of the inputs, which makes
/// it independent of the activation scale. A step that produces non-finite
/// weights is undone and the step size halved.
pub fn mimic_init<T: Scalar>(
    student: &mut CandidateParams<T>,
    teacher: &CandidateParams<T>,
    inputs: &[Tensor<T>],
    steps: usize,
    step_size: T,
) -> Result<T> {
    let Some(first) = inputs.first() else {
        return config_err("mimic_init needs at least one input batch");
    };
    let per_sample = &first.shape()[1..];
    let (s_out, t_out) = (student.output_shape(per_sample), teacher.output_shape(per_sample));
    match (s_out, t_out) {
        (Ok(s), Ok(t)) if s == t => {}
        (s, t) => {
            return config_err(format!(
                "student {} and teacher {} disagree on output shape: {s:?} vs {t:?}",
                student.kind, teacher.kind
            ))
        }
    }
    let targets = inputs
        .iter()
        .map(|x| teacher.forward_tensor(x))
        .collect::<Result<Vec<_>>>()?;

    let (sq, count) = inputs.iter().fold((T::zero(), 0usize), |(s, c), x| {
        (s + x.data().iter().map(|&v| v * v).sum::<T>(), c + x.numel())
    });
    let moment = sq / T::from_count(count.max(1));
    let mut lr = if moment > T::zero() {
        step_size / moment
    } else {
        step_size
    };

    if !student.weights.is_empty() {
        for step in 0..steps {
            let i = step % inputs.len();
            let mut tape = Tape::new();
            let x = tape.constant(inputs[i].clone());
            let w = student.bind(&mut tape, true);
            let y = student.forward(&mut tape, x, &w)?;
            let t = tape.constant(targets[i].clone());
            let loss = tape.mean_squared_error(y, t)?;
            tape.backward(loss)?;
            let previous = student.weights.clone();
            for (weight, var) in student.weights.iter_mut().zip(&w) {
                if let Some(g) = tape.grad(*var) {
                    for (p, &gi) in weight.data_mut().iter_mut().zip(g) {
                        *p -= lr * gi;
                    }
                }
            }
            if student
                .weights
                .iter()
                .any(|t| t.data().iter().any(|v| !v.is_finite()))
            {
                student.weights = previous;
                lr *= T::lit(0.5);
            }
        }
    }
    stream_mse(student, inputs, &targets)
}

/// Mean squared error of `c` against `targets`, pooled over all elements.
pub fn stream_mse<T: Scalar>(
    c: &CandidateParams<T>,
    inputs: &[Tensor<T>],
    targets: &[Tensor<T>],
) -> Result<T> {
    let mut sum = T::zero();
    let mut count = 0usize;
    for (x, t) in inputs.iter().zip(targets) {
        let y = c.forward_tensor(x)?;
        sum += y
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>();
        count += y.numel();
    }
    Ok(sum / T::from_count(count.max(1)))
}
