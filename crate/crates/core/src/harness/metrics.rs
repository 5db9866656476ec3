use serde::{Deserialize, Serialize};

use crate::cost::{measure_latency, LatencyStat};
use crate::error::{config_err, Result};
use crate::harness::dataset::Dataset;
use crate::harness::format::encoded_len;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::simplex::argmax;
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub top1: f64,
    pub mean_loss: f64,
    /// Size of the model file.
    pub size_bytes: usize,
    /// Seconds per batch, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_s: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub batch_size: usize,
    /// `(batch size, repetitions)` for a latency measurement.
    pub latency: Option<(usize, usize)>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            batch_size: 256,
            latency: None,
        }
    }
}

/// Top-1 accuracy and mean cross-entropy over `indices`.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    data: &Dataset<T>,
    indices: &[usize],
    opts: &EvalOptions,
) -> Result<Metrics> {
    if indices.is_empty() {
        return config_err("cannot evaluate on an empty split");
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    for chunk in indices.chunks(opts.batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let bound = model.forward(&mut tape, xv, false)?;
        let logits = tape.value(bound.output).clone();
        let k = logits.shape()[1];
        correct += logits
            .data()
            .chunks(k)
            .zip(&y)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
        let l = tape.softmax_cross_entropy(bound.output, &y)?;
        loss += tape.value(l).data()[0].as_f64() * chunk.len() as f64;
    }
    let latency_s = match opts.latency {
        Some((batch, reps)) => Some(measure_latency(
            model,
            &model.input_shape,
            batch,
            reps,
            LatencyStat::Median,
        )?),
        None => None,
    };
    Ok(Metrics {
        samples: indices.len(),
        top1: correct as f64 / indices.len() as f64,
        mean_loss: loss / indices.len() as f64,
        size_bytes: encoded_len(model),
        latency_s,
    })
}
