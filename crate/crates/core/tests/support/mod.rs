//! Independent reference implementations and shared fixtures.
#![allow(dead_code)]

use darc::candidates::CandidateKind;
use darc::engine::{
    darc_compress, fit, init_darc, min_feasible_cost, relax, CompressReport, DarcSchedule, InitOptions,
    LogCollector, Phase,
};
use darc::harness::{evaluate, gen_planted_dataset, Dataset, EvalOptions, Metrics, PlantedSpec, Split};
use darc::{CostKind, Model, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Row-major `m×k · k×n` by the textbook triple loop.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i * k + t] * b[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// Direct grouped convolution with stride 1 and zero padding `pad`.
pub fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, groups: usize, pad: usize) -> Vec<f64> {
    let [n, c, h, wd] = x.shape()[..] else {
        panic!("x must be 4-d")
    };
    let [co, cig, k, _] = w.shape()[..] else {
        panic!("w must be 4-d")
    };
    let (oh, ow) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
    let cog = co / groups;
    assert_eq!(cig * groups, c);
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; n * co * oh * ow];
    for b in 0..n {
        for o in 0..co {
            let g = o / cog;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = 0.0;
                    for ci in 0..cig {
                        let ic = g * cig + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + ky as isize - pad as isize;
                                let ix = xx as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += xd[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * wdat[((o * cig + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[((b * co + o) * oh + y) * ow + xx] = s;
                }
            }
        }
    }
    out
}

/// Central-difference gradient of `f` at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            p[i] += eps;
            let mut m = x.to_vec();
            m[i] -= eps;
            (f(&p) - f(&m)) / (2.0 * eps)
        })
        .collect()
}

/// Exact `E_σ sup_h (1/n) Σ σ_i h_i` by enumerating all `2ⁿ` sign vectors.
pub fn brute_rademacher(table: &[Vec<f64>]) -> f64 {
    let n = table[0].len();
    let mut total = 0.0;
    for bits in 0u32..(1 << n) {
        let best = table
            .iter()
            .map(|h| {
                (0..n)
                    .map(|i| if bits >> i & 1 == 1 { h[i] } else { -h[i] })
                    .sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max);
        total += best / n as f64;
    }
    total / f64::from(1u32 << n)
}

/// Smallest mean squared error any rank-`r` affine map can reach against the
/// affine teacher `x·W + b` on the rows of `x` (`N×in`): the tail energy of
/// the centered teacher outputs' singular values.
pub fn lowrank_optimum(x: &[f64], n: usize, w: &[f64], d_in: usize, d_out: usize, r: usize) -> f64 {
    let y = naive_matmul(x, w, n, d_in, d_out);
    let mut mean = vec![0.0; d_out];
    for row in y.chunks(d_out) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v / n as f64);
    }
    let centered = nalgebra::DMatrix::from_fn(n, d_out, |i, j| y[i * d_out + j] - mean[j]);
    let sv = centered.singular_values();
    let mut s: Vec<f64> = sv.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.iter().skip(r).map(|v| v * v).sum::<f64>() / (n * d_out) as f64
}

pub const PLANTED_N: usize = 6000;
pub const BASE_EPOCHS: usize = 40;
pub const BASE_LR: f64 = 0.01;
pub const MOMENTUM: f64 = 0.9;

/// A planted dataset together with a full-convolution base model trained on it.
pub struct Planted {
    pub seed: u64,
    pub data: Dataset<f64>,
    pub teacher: Model<f64>,
    pub base: Model<f64>,
    pub baseline: Metrics,
}

pub fn planted(teacher: CandidateKind, noise: f64, seed: u64) -> Planted {
    let spec = PlantedSpec::desk(teacher, PLANTED_N, noise);
    let (data, teacher) = gen_planted_dataset::<f64>(&spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xba5e);
    let mut base = Model::conv_classifier(
        spec.input_shape,
        spec.width,
        &[CandidateKind::FullConv { k: 3 }; 2],
        4,
        &mut rng,
    )
    .unwrap();
    let train = data.indices(Split::Train);
    fit(
        &mut base,
        &data,
        &train,
        BASE_EPOCHS,
        BASE_LR,
        MOMENTUM,
        32,
        Phase::Train,
        &mut rng,
        &mut (),
    )
    .unwrap();
    base.round_to_f32();
    let baseline = evaluate(&base, &data, &data.indices(Split::Test), &EvalOptions::default()).unwrap();
    Planted {
        seed,
        data,
        teacher,
        base,
        baseline,
    }
}

/// Settings of one compression run on a planted fixture.
#[derive(Clone, Debug)]
pub struct RunOpts {
    pub cost: CostKind,
    pub synthetic: Vec<(CandidateKind, f64)>,
    pub mimic_steps: usize,
    pub block_epochs: usize,
    pub fine_tune_epochs: usize,
    pub lambda0: Option<f64>,
    /// `None` runs down to the cheapest reachable cost.
    pub budget: Option<f64>,
}

impl Default for RunOpts {
    fn default() -> Self {
        Self {
            cost: CostKind::ParamCount,
            synthetic: Vec::new(),
            mimic_steps: 200,
            block_epochs: 2,
            fine_tune_epochs: 5,
            lambda0: None,
            budget: None,
        }
    }
}

pub struct Run {
    pub report: CompressReport<f64>,
    pub log: LogCollector,
    pub budget: f64,
    pub relaxed_start: Model<f64>,
}

/// Relaxes `base` over the default candidates, initializes the mixtures on
/// the first training batches and compresses.
pub fn compress(base: &Model<f64>, data: &Dataset<f64>, seed: u64, opts: &RunOpts) -> Run {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = relax(base, &CandidateKind::default_conv_replacements(), &mut rng).unwrap();
    let train = data.indices(Split::Train);
    let sample: Vec<_> = train
        .chunks(32)
        .take(8)
        .map(|c| data.batch(c).unwrap().0)
        .collect();
    let init = InitOptions {
        mimic_steps: opts.mimic_steps,
        cost: opts.cost,
        synthetic_costs: opts.synthetic.iter().copied().collect(),
        ..InitOptions::default()
    };
    init_darc(&mut model, &sample, &init).unwrap();
    let relaxed_start = model.clone();
    let budget = opts.budget.unwrap_or_else(|| min_feasible_cost(&model));
    let schedule = DarcSchedule {
        lambda0: opts.lambda0,
        block_epochs: opts.block_epochs,
        fine_tune_epochs: opts.fine_tune_epochs,
        budget,
        cost: opts.cost,
        momentum: MOMENTUM,
        ..DarcSchedule::default()
    };
    let mut log = LogCollector::default();
    let report = darc_compress(&mut model, data, &schedule, &mut rng, &mut log).unwrap();
    Run {
        report,
        log,
        budget,
        relaxed_start,
    }
}

/// Smallest mean squared error any bias-free 1×1 convolution (`depthwise`
/// false) or per-channel 3×3 convolution (`depthwise` true) can reach
/// against `target` on `input`, by linear least squares. Both tensors are
/// `N×C×H×W`.
pub fn conv_lstsq_mse(input: &Tensor<f64>, target: &Tensor<f64>, depthwise: bool) -> f64 {
    let [n, c, h, w] = input.shape()[..] else {
        panic!("input must be 4-d")
    };
    let co = target.shape()[1];
    let x = input.data();
    let t = target.data();
    let at = |b: usize, ch: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
            0.0
        } else {
            x[((b * c + ch) * h + y as usize) * w + xx as usize]
        }
    };
    let rows = n * h * w;
    let residual = |a: nalgebra::DMatrix<f64>, b: nalgebra::DMatrix<f64>| -> f64 {
        let sol = a.clone().svd(true, true).solve(&b, 1e-12).unwrap();
        (a * sol - b).norm_squared()
    };
    let mut total = 0.0;
    if depthwise {
        for ch in 0..c {
            let a = nalgebra::DMatrix::from_fn(rows, 9, |r, k| {
                let (b, y, xx) = (r / (h * w), (r / w) % h, r % w);
                at(
                    b,
                    ch,
                    y as isize + (k / 3) as isize - 1,
                    xx as isize + (k % 3) as isize - 1,
                )
            });
            let b = nalgebra::DMatrix::from_fn(rows, 1, |r, _| {
                let (bb, y, xx) = (r / (h * w), (r / w) % h, r % w);
                t[((bb * co + ch) * h + y) * w + xx]
            });
            total += residual(a, b);
        }
    } else {
        let a = nalgebra::DMatrix::from_fn(rows, c, |r, ch| {
            let (b, y, xx) = (r / (h * w), (r / w) % h, r % w);
            at(b, ch, y as isize, xx as isize)
        });
        let b = nalgebra::DMatrix::from_fn(rows, co, |r, o| {
            let (bb, y, xx) = (r / (h * w), (r / w) % h, r % w);
            t[((bb * co + o) * h + y) * w + xx]
        });
        total = residual(a, b);
    }
    total / target.numel() as f64
}
