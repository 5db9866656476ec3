use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::candidates::CandidateKind;
use crate::error::{config_err, dim_err, DarcError, Result};
use crate::model::{Layer, Model};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

/// Labelled samples; the leading axis of `inputs` indexes samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub splits: Vec<Split>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        inputs: Tensor<T>,
        labels: Vec<usize>,
        num_classes: usize,
        splits: Vec<Split>,
    ) -> Result<Self> {
        let n = inputs.shape()[0];
        if labels.len() != n || splits.len() != n {
            return dim_err(format!(
                "{n} inputs but {} labels and {} split tags",
                labels.len(),
                splits.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DarcError::Data(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            splits,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let x = self.inputs.gather_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }
}

/// Recipe for a synthetic dataset labelled by a random "teacher" network
/// whose compressible layers all have kind `teacher_kind`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub teacher_kind: CandidateKind,
    /// Per-sample input shape `[C, H, W]`.
    pub input_shape: [usize; 3],
    pub width: usize,
    pub planted_layers: usize,
    pub num_classes: usize,
    pub n: usize,
    /// Probability that a label is replaced by a different, uniformly drawn class.
    pub noise: f64,
    pub test_fraction: f64,
    /// Inputs whose two largest teacher logits are closer than this many
    /// standard deviations of the within-input logit spread are redrawn.
    pub min_margin: f64,
}

impl PlantedSpec {
    /// Two planted layers, 3×6×6 inputs, width 8, four classes.
    pub fn desk(teacher_kind: CandidateKind, n: usize, noise: f64) -> Self {
        Self {
            teacher_kind,
            input_shape: [3, 6, 6],
            width: 8,
            planted_layers: 2,
            num_classes: 4,
            n,
            noise,
            test_fraction: 0.25,
            min_margin: 1.0,
        }
    }
}

/// Generates inputs from a standard normal (rounded to `f32`), keeps those
/// whose teacher logits lead by at least `min_margin` spreads, labels them
/// with the teacher's argmax and flips each label with probability `noise`.
/// The teacher's head bias is set so that classes are roughly balanced.
/// Returns the dataset and the teacher.
pub fn gen_planted_dataset<T: Scalar>(spec: &PlantedSpec, seed: u64) -> Result<(Dataset<T>, Model<T>)> {
    if spec.n == 0 {
        return config_err("planted dataset needs n >= 1");
    }
    if !(0.0..=1.0).contains(&spec.noise) || !(0.0..1.0).contains(&spec.test_fraction) {
        return config_err("noise must lie in [0, 1] and test_fraction in [0, 1)");
    }
    if spec.num_classes < 2 {
        return config_err("planted dataset needs at least two classes");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.num_classes;
    let per_sample: usize = spec.input_shape.iter().product();

    // Teachers whose margin filter keeps too few inputs (mostly dead ReLUs)
    // are replaced by the next draw.
    let mut found = None;
    for _ in 0..MAX_TEACHER_DRAWS {
        let (teacher, threshold, kept) = balanced_teacher::<T>(spec, &mut rng)?;
        if kept >= MIN_TEACHER_ACCEPTANCE {
            found = Some((teacher, threshold));
            break;
        }
    }
    let Some((teacher, threshold)) = found else {
        return config_err(format!("margin {} rejects almost every input", spec.min_margin));
    };

    let mut data = Vec::with_capacity(spec.n * per_sample);
    let mut labels = Vec::with_capacity(spec.n);
    while labels.len() < spec.n {
        let (x, logits) = draw(&teacher, spec.input_shape, &mut rng, 256)?;
        for (i, row) in logits.chunks(k).enumerate() {
            if labels.len() == spec.n {
                break;
            }
            let Some(top) = margin_winner(row, threshold) else {
                continue;
            };
            let mut label = top;
            if rng.random::<f64>() < spec.noise {
                let other = rng.random_range(0..k - 1);
                label = if other >= label { other + 1 } else { other };
            }
            labels.push(label);
            data.extend_from_slice(&x.data()[i * per_sample..(i + 1) * per_sample]);
        }
    }
    let mut shape = vec![spec.n];
    shape.extend_from_slice(&spec.input_shape);
    let inputs = Tensor::new(shape, data)?;

    let n_test = (spec.n as f64 * spec.test_fraction).floor() as usize;
    let splits = (0..spec.n)
        .map(|i| {
            if i >= spec.n - n_test {
                Split::Test
            } else {
                Split::Train
            }
        })
        .collect();
    Ok((Dataset::new(inputs, labels, k, splits)?, teacher))
}

const MAX_TEACHER_DRAWS: usize = 50;
const MIN_TEACHER_ACCEPTANCE: f64 = 0.05;

/// Draws a teacher and shifts its head bias until the classes are about
/// equally frequent among the inputs that pass the margin filter. Returns the
/// teacher, the absolute margin threshold and the fraction of probe inputs
/// that pass.
fn balanced_teacher<T: Scalar>(spec: &PlantedSpec, rng: &mut ChaCha8Rng) -> Result<(Model<T>, f64, f64)> {
    let k = spec.num_classes;
    let body = vec![spec.teacher_kind; spec.planted_layers];
    let mut teacher: Model<T> = Model::conv_classifier(spec.input_shape, spec.width, &body, k, rng)?;
    teacher.round_to_f32();

    let (_, probe) = draw(&teacher, spec.input_shape, rng, spec.n.clamp(512, 4096))?;
    let probe: Vec<f64> = probe.iter().map(|v| v.as_f64()).collect();
    let rows = probe.len() / k;
    let mut shift = vec![0.0; k];
    for row in probe.chunks(k) {
        shift
            .iter_mut()
            .zip(row)
            .for_each(|(s, &v)| *s -= v / rows as f64);
    }
    // Margins are measured in units of the spread between classes within an
    // input, so a common offset of all logits does not count.
    let spread = {
        let var = probe
            .chunks(k)
            .flat_map(|row| {
                let centered: Vec<f64> = row.iter().zip(&shift).map(|(&v, &s)| v + s).collect();
                let mean = centered.iter().sum::<f64>() / k as f64;
                centered.into_iter().map(move |v| (v - mean).powi(2))
            })
            .sum::<f64>()
            / probe.len() as f64;
        var.sqrt()
    };
    let threshold = spec.min_margin * spread;
    let mut kept = 0;
    for _ in 0..200 {
        let mut freq = vec![0usize; k];
        kept = 0;
        for row in probe.chunks(k) {
            let shifted: Vec<f64> = row.iter().zip(&shift).map(|(&v, &s)| v + s).collect();
            if let Some(top) = margin_winner(&shifted, threshold) {
                freq[top] += 1;
                kept += 1;
            }
        }
        for (s, &f) in shift.iter_mut().zip(&freq) {
            *s -= 0.05 * spread * (f as f64 * k as f64 / kept.max(1) as f64 - 1.0);
        }
    }
    if let Some(Layer::Param { candidate, .. }) = teacher.layers.last_mut() {
        let bias = candidate.weights[1].data_mut();
        bias.iter_mut().zip(&shift).for_each(|(b, &s)| *b += T::lit(s));
    }
    teacher.round_to_f32();
    Ok((teacher, threshold, kept as f64 / rows as f64))
}

/// `count` standard normal inputs rounded to `f32` and their logits.
fn draw<T: Scalar>(
    teacher: &Model<T>,
    input_shape: [usize; 3],
    rng: &mut ChaCha8Rng,
    count: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let mut shape = vec![count];
    shape.extend_from_slice(&input_shape);
    let x = Tensor::<T>::randn(&shape, T::one(), rng).round_to_f32();
    let logits = teacher.logits(&x)?.into_data();
    Ok((x, logits))
}

/// The argmax of `row` if it beats every other entry by at least `margin`.
fn margin_winner<T: Scalar>(row: &[T], margin: f64) -> Option<usize> {
    let top = crate::simplex::argmax(row);
    let runner_up = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != top)
        .map(|(_, v)| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    (row[top].as_f64() - runner_up >= margin).then_some(top)
}
