//! Little-endian, versioned, checksummed binary files for models and
//! datasets.
//!
//! A model file is
//!
//! ```text
//! "DARC" | version u32 | layer count u32 | input rank u32 | input dims u32… | classes u32
//! layer records…
//! crc32 of everything above, u32
//! ```
//!
//! Each layer record starts with a tag byte: 0 plain layer (then a
//! compressible flag byte and a candidate), 1 mixture, 2 ReLU, 3 global
//! average pooling. A mixture stores `J` (u32), its cost kind, then per
//! candidate an active flag byte, `α_j` and `C_j` as f64 and the candidate.
//! A candidate is its kind name (u32 length + UTF-8), `in`, `out`, `kernel`,
//! `stride` as u32, a tensor count u32 and the tensors. A tensor is its rank
//! u32, its dims u32… and its entries as f32.
//!
//! Dataset files use magic "DARCD" and the same tensor encoding.

use std::fs;
use std::path::Path;

use crate::candidates::{CandidateKind, CandidateParams, Dims};
use crate::cost::{CostKind, CostVector};
use crate::engine::MixtureLayer;
use crate::error::{DarcError, Result};
use crate::harness::dataset::{Dataset, Split};
use crate::model::{Layer, Model};
use crate::scalar::Scalar;
use crate::simplex::AlphaVector;
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"DARC";
pub const DATASET_MAGIC: &[u8; 5] = b"DARCD";
pub const FORMAT_VERSION: u32 = 1;

const TAG_PARAM: u8 = 0;
const TAG_MIXTURE: u8 = 1;
const TAG_RELU: u8 = 2;
const TAG_POOL: u8 = 3;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("value does not fit the u32 file field");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn tensor<T: Scalar>(&mut self, t: &Tensor<T>) {
        self.u32(t.ndim());
        t.shape().iter().for_each(|&d| self.u32(d));
        for &v in t.data() {
            self.buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn truncated<T>() -> Result<T> {
    Err(DarcError::Corruption("unexpected end of data".into()))
}

impl<'a> Reader<'a> {
    /// Checks the trailing checksum and returns a reader over the payload.
    fn open(bytes: &'a [u8], magic: &[u8]) -> Result<Self> {
        if bytes.len() < magic.len() + 8 {
            return Err(DarcError::Corruption(format!(
                "file of {} bytes is too short",
                bytes.len()
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(DarcError::Corruption("checksum mismatch".into()));
        }
        if &body[..magic.len()] != magic {
            return Err(DarcError::Corruption("bad magic".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: magic.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(DarcError::Version(format!(
                "format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.buf.get(self.pos..self.pos.saturating_add(n)) {
            Some(s) => {
                self.pos += n;
                Ok(s)
            }
            None => truncated(),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<&'a str> {
        let n = self.u32()?;
        std::str::from_utf8(self.take(n)?).map_err(|_| DarcError::Corruption("kind name is not UTF-8".into()))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<Tensor<T>> {
        let ndim = self.u32()?;
        let shape = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let Some(bytes) = numel.and_then(|n| n.checked_mul(4)) else {
            return Err(DarcError::Corruption(format!("tensor shape {shape:?} overflows")));
        };
        let raw = self.take(bytes)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        Tensor::new(shape, data).map_err(|e| DarcError::Corruption(e.to_string()))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(DarcError::Corruption(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn write_candidate<T: Scalar>(w: &mut Writer, c: &CandidateParams<T>) {
    w.str(&c.kind.to_string());
    for d in [c.dims.in_ch, c.dims.out_ch, c.dims.kernel, c.dims.stride] {
        w.u32(d);
    }
    w.u32(c.weights.len());
    c.weights.iter().for_each(|t| w.tensor(t));
}

fn read_candidate<T: Scalar>(r: &mut Reader) -> Result<CandidateParams<T>> {
    let kind: CandidateKind = r.str()?.parse()?;
    let dims = Dims {
        in_ch: r.u32()?,
        out_ch: r.u32()?,
        kernel: r.u32()?,
        stride: r.u32()?,
    };
    let count = r.u32()?;
    let weights = (0..count).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    CandidateParams::from_weights(kind, dims, weights).map_err(|e| DarcError::Corruption(e.to_string()))
}

fn write_cost_kind(w: &mut Writer, kind: CostKind) {
    match kind {
        CostKind::ParamCount => w.u8(0),
        CostKind::MeasuredLatency { batch_size, reps } => {
            w.u8(1);
            w.u32(batch_size);
            w.u32(reps);
        }
        CostKind::Flops => w.u8(2),
        CostKind::Synthetic => w.u8(3),
    }
}

fn read_cost_kind(r: &mut Reader) -> Result<CostKind> {
    Ok(match r.u8()? {
        0 => CostKind::ParamCount,
        1 => CostKind::MeasuredLatency {
            batch_size: r.u32()?,
            reps: r.u32()?,
        },
        2 => CostKind::Flops,
        3 => CostKind::Synthetic,
        t => return Err(DarcError::Version(format!("unknown cost kind tag {t}"))),
    })
}

/// Encodes a model; weights are stored as `f32`, mixture weights and costs
/// as `f64`.
pub fn model_to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut w = Writer {
        buf: MODEL_MAGIC.to_vec(),
    };
    w.u32(FORMAT_VERSION as usize);
    w.u32(model.layers.len());
    w.u32(model.input_shape.len());
    model.input_shape.iter().for_each(|&d| w.u32(d));
    w.u32(model.num_classes);
    for layer in &model.layers {
        match layer {
            Layer::Param {
                candidate,
                compressible,
            } => {
                w.u8(TAG_PARAM);
                w.u8(u8::from(*compressible));
                write_candidate(&mut w, candidate);
            }
            Layer::Mixture(m) => {
                w.u8(TAG_MIXTURE);
                w.u32(m.len());
                write_cost_kind(&mut w, m.costs.kind());
                for j in 0..m.len() {
                    w.u8(u8::from(m.active[j]));
                    w.f64(m.alpha.values()[j].as_f64());
                    w.f64(m.costs.values()[j].as_f64());
                    write_candidate(&mut w, &m.candidates[j]);
                }
            }
            Layer::Relu => w.u8(TAG_RELU),
            Layer::GlobalAvgPool => w.u8(TAG_POOL),
        }
    }
    w.finish()
}

pub fn model_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader::open(bytes, MODEL_MAGIC)?;
    let n_layers = r.u32()?;
    let rank = r.u32()?;
    let input_shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let num_classes = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers.min(1 << 16));
    for _ in 0..n_layers {
        let layer = match r.u8()? {
            TAG_PARAM => {
                let compressible = r.u8()? != 0;
                Layer::Param {
                    candidate: read_candidate(&mut r)?,
                    compressible,
                }
            }
            TAG_MIXTURE => {
                let j = r.u32()?;
                let kind = read_cost_kind(&mut r)?;
                let (mut active, mut alpha, mut costs, mut candidates) =
                    (Vec::new(), Vec::new(), Vec::new(), Vec::new());
                for _ in 0..j {
                    active.push(r.u8()? != 0);
                    alpha.push(T::lit(r.f64()?));
                    costs.push(T::lit(r.f64()?));
                    candidates.push(read_candidate(&mut r)?);
                }
                let corrupt = |e: DarcError| DarcError::Corruption(e.to_string());
                Layer::Mixture(MixtureLayer {
                    candidates,
                    alpha: AlphaVector::from_simplex(alpha).map_err(corrupt)?,
                    costs: CostVector::new(costs, kind).map_err(corrupt)?,
                    active,
                })
            }
            TAG_RELU => Layer::Relu,
            TAG_POOL => Layer::GlobalAvgPool,
            t => return Err(DarcError::Version(format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    r.done()?;
    Model::new(input_shape, num_classes, layers).map_err(|e| DarcError::Corruption(e.to_string()))
}

/// Size in bytes of [`model_to_bytes`] output, computed without encoding.
pub fn encoded_len<T: Scalar>(model: &Model<T>) -> usize {
    let candidate = |c: &CandidateParams<T>| {
        4 + c.kind.to_string().len()
            + 16
            + 4
            + c.weights
                .iter()
                .map(|t| 4 + 4 * t.ndim() + 4 * t.numel())
                .sum::<usize>()
    };
    let header = 4 + 4 + 4 + 4 + 4 * model.input_shape.len() + 4;
    let body: usize = model
        .layers
        .iter()
        .map(|l| match l {
            Layer::Param { candidate: c, .. } => 2 + candidate(c),
            Layer::Mixture(m) => {
                let kind = match m.costs.kind() {
                    CostKind::MeasuredLatency { .. } => 9,
                    _ => 1,
                };
                1 + 4 + kind + m.candidates.iter().map(|c| 17 + candidate(c)).sum::<usize>()
            }
            Layer::Relu | Layer::GlobalAvgPool => 1,
        })
        .sum();
    header + body + 4
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    model_from_bytes(&fs::read(path)?)
}

pub fn dataset_to_bytes<T: Scalar>(data: &Dataset<T>) -> Vec<u8> {
    let mut w = Writer {
        buf: DATASET_MAGIC.to_vec(),
    };
    w.u32(FORMAT_VERSION as usize);
    w.u32(data.num_classes);
    w.u32(data.len());
    data.labels.iter().for_each(|&l| w.u32(l));
    data.splits.iter().for_each(|s| w.u8(s.tag()));
    w.tensor(&data.inputs);
    w.finish()
}

pub fn dataset_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Dataset<T>> {
    let mut r = Reader::open(bytes, DATASET_MAGIC)?;
    let num_classes = r.u32()?;
    let n = r.u32()?;
    let labels = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let splits = (0..n)
        .map(|_| {
            let t = r.u8()?;
            Split::from_tag(t).ok_or_else(|| DarcError::Corruption(format!("unknown split tag {t}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let inputs = r.tensor()?;
    r.done()?;
    if inputs.shape()[0] != n {
        return Err(DarcError::Corruption(format!(
            "{n} labels for {} inputs",
            inputs.shape()[0]
        )));
    }
    Dataset::new(inputs, labels, num_classes, splits)
}

pub fn save_dataset<T: Scalar>(data: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset_to_bytes(data))?;
    Ok(())
}

pub fn load_dataset<T: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    dataset_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::fixtures::{toy_data, toy_model};
    use crate::engine::relax;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mixture_model() -> Model<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = relax(
            &toy_model(0),
            &CandidateKind::default_conv_replacements(),
            &mut rng,
        )
        .unwrap();
        for mix in m.mixtures_mut() {
            mix.alpha = AlphaVector::from_raw(vec![0.0, 0.5, 0.25, 0.25]);
            mix.remove_zeros();
            mix.costs = CostVector::new(
                vec![1e-3, 2e-3, 3e-3, 4e-3],
                CostKind::MeasuredLatency {
                    batch_size: 8,
                    reps: 5,
                },
            )
            .unwrap();
        }
        m.round_to_f32();
        m
    }

    #[test]
    fn model_round_trip() {
        for mut m in [toy_model(1), mixture_model()] {
            m.round_to_f32();
            let bytes = model_to_bytes(&m);
            assert_eq!(bytes.len(), encoded_len(&m));
            assert_eq!(model_from_bytes::<f64>(&bytes).unwrap(), m);
        }
    }

    #[test]
    fn f32_models_round_trip() {
        let m = toy_model(2);
        let bytes = model_to_bytes(&m);
        let as32: Model<f32> = model_from_bytes(&bytes).unwrap();
        assert_eq!(model_to_bytes(&as32), bytes);
    }

    #[test]
    fn dataset_round_trip() {
        let d = toy_data(20, 3);
        let back: Dataset<f64> = dataset_from_bytes(&dataset_to_bytes(&d)).unwrap();
        assert_eq!(back.labels, d.labels);
        assert_eq!(back.splits, d.splits);
        assert_eq!(back.inputs.round_to_f32(), d.inputs.round_to_f32());
    }

    #[test]
    fn damaged_files_rejected() {
        let bytes = model_to_bytes(&toy_model(4));
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(
                matches!(
                    model_from_bytes::<f64>(&bytes[..cut]),
                    Err(DarcError::Corruption(_))
                ),
                "cut {cut}"
            );
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(
            model_from_bytes::<f64>(&flipped),
            Err(DarcError::Corruption(_))
        ));
        assert!(matches!(
            dataset_from_bytes::<f64>(&bytes),
            Err(DarcError::Corruption(_))
        ));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = model_to_bytes(&toy_model(5));
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            model_from_bytes::<f64>(&bytes),
            Err(DarcError::Version(_))
        ));
    }
}
