//! Empirical Rademacher complexity of finite hypothesis classes.
//!
//! Hypotheses are tabulated on the sample, so a class is a matrix with one
//! row per hypothesis. Every routine is generic over the value type; with an
//! exact type such as [`num_rational::Rational64`] the identities between
//! classes (hull, union, nested classes) hold without rounding.

use std::fmt::Debug;

use num_traits::{FromPrimitive, Num, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, dim_err, Result};

/// Values a hypothesis may take.
pub trait Value: Clone + Debug + Num + PartialOrd + FromPrimitive + ToPrimitive {}

impl<T: Clone + Debug + Num + PartialOrd + FromPrimitive + ToPrimitive> Value for T {}

/// A non-empty finite class, each hypothesis given by its values on the
/// `n` sample points.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteClass<T> {
    pub label: String,
    table: Vec<Vec<T>>,
}

impl<T: Value> FiniteClass<T> {
    pub fn new(label: impl Into<String>, table: Vec<Vec<T>>) -> Result<Self> {
        let Some(first) = table.first() else {
            return config_err("a hypothesis class needs at least one hypothesis");
        };
        let n = first.len();
        if n == 0 || table.iter().any(|h| h.len() != n) {
            return dim_err("every hypothesis must be tabulated on the same non-empty sample");
        }
        Ok(Self {
            label: label.into(),
            table,
        })
    }

    /// `count` hypotheses with independent uniform ±1 values on `n` points.
    pub fn random_signs<R: Rng + ?Sized>(count: usize, n: usize, rng: &mut R) -> Result<Self> {
        let table = (0..count)
            .map(|_| (0..n).map(|_| sign::<T>(rng.random())).collect())
            .collect();
        Self::new(format!("{count} random sign tables"), table)
    }

    pub fn hypotheses(&self) -> &[Vec<T>] {
        &self.table
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Number of sample points.
    pub fn n(&self) -> usize {
        self.table[0].len()
    }

    /// The class restricted to the sample points `idx` (repeats allowed).
    pub fn restrict(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() || idx.iter().any(|&i| i >= self.n()) {
            return dim_err("restriction indices must be non-empty and inside the sample");
        }
        let table = self
            .table
            .iter()
            .map(|h| idx.iter().map(|&i| h[i].clone()).collect())
            .collect();
        Self::new(self.label.clone(), table)
    }
}

fn sign<T: Value>(positive: bool) -> T {
    if positive {
        T::one()
    } else {
        T::zero() - T::one()
    }
}

/// `m` sign vectors of length `n`, stored as ±1 bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignSample {
    pub sigma: Vec<Vec<i8>>,
    pub seed: Option<u64>,
}

impl SignSample {
    /// `m` independent uniform sign vectors; draw `k` comes from its own
    /// stream derived from `seed`, so any subset of draws can be recomputed
    /// independently.
    pub fn draw(n: usize, m: usize, seed: u64) -> Self {
        let sigma = (0..m as u64)
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k);
                (0..n).map(|_| if rng.random() { 1 } else { -1 }).collect()
            })
            .collect();
        Self {
            sigma,
            seed: Some(seed),
        }
    }

    /// All `2ⁿ` sign vectors; averaging over them gives the exact expectation.
    pub fn exhaustive(n: usize) -> Self {
        assert!(n < 31, "2^{n} sign vectors is too many to enumerate");
        let sigma = (0u32..1 << n)
            .map(|bits| (0..n).map(|i| if bits >> i & 1 == 1 { 1 } else { -1 }).collect())
            .collect();
        Self { sigma, seed: None }
    }

    pub fn n(&self) -> usize {
        self.sigma.first().map_or(0, Vec::len)
    }

    pub fn m(&self) -> usize {
        self.sigma.len()
    }
}

/// An average over sign vectors with its Monte Carlo standard error.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate<T> {
    pub mean: T,
    pub stderr: f64,
    pub draws: usize,
}

/// `sup_h (1/n) Σ_i σ_i h(x_i)` for one sign vector.
pub fn sup_correlation<T: Value>(class: &FiniteClass<T>, sigma: &[i8]) -> T {
    let n = T::from_usize(sigma.len()).expect("sample size fits the value type");
    let mut best: Option<T> = None;
    for h in class.hypotheses() {
        let mut s = T::zero();
        for (v, &sg) in h.iter().zip(sigma) {
            if sg > 0 {
                s = s + v.clone();
            } else {
                s = s - v.clone();
            }
        }
        if best.as_ref().is_none_or(|b| s > *b) {
            best = Some(s);
        }
    }
    best.expect("class is non-empty") / n
}

/// Average over the sign vectors of the best correlation any hypothesis
/// achieves with them. The supremum over the class is exact.
pub fn rademacher_estimate<T: Value>(class: &FiniteClass<T>, sigmas: &SignSample) -> Result<Estimate<T>> {
    if class.is_empty() {
        return config_err("empty hypothesis class");
    }
    if sigmas.m() == 0 || sigmas.n() != class.n() {
        return dim_err(format!(
            "{} sign vectors of length {} for a class on {} points",
            sigmas.m(),
            sigmas.n(),
            class.n()
        ));
    }
    let sups: Vec<T> = sigmas.sigma.iter().map(|s| sup_correlation(class, s)).collect();
    let m = sups.len();
    let total = sups.iter().cloned().fold(T::zero(), |a, b| a + b);
    let mean = total / T::from_usize(m).expect("draw count fits the value type");
    let as_f = |v: &T| v.to_f64().unwrap_or(f64::NAN);
    let mu = as_f(&mean);
    let stderr = if m > 1 {
        let var = sups.iter().map(|v| (as_f(v) - mu).powi(2)).sum::<f64>() / (m - 1) as f64;
        (var / m as f64).sqrt()
    } else {
        0.0
    };
    Ok(Estimate {
        mean,
        stderr,
        draws: m,
    })
}

/// All convex combinations of the base hypotheses whose weights are
/// multiples of `1/resolution`. Resolution 1 returns the base hypotheses.
pub fn convex_hull_class<T: Value>(base: &FiniteClass<T>, resolution: usize) -> Result<FiniteClass<T>> {
    if resolution == 0 {
        return config_err("grid resolution must be positive");
    }
    let r = T::from_usize(resolution).expect("resolution fits the value type");
    let mut table = Vec::new();
    let mut weights = vec![0usize; base.len()];
    compositions(resolution, 0, &mut weights, &mut |w| {
        let mut h = vec![T::zero(); base.n()];
        for (k, &wk) in w.iter().enumerate() {
            if wk == 0 {
                continue;
            }
            let a = T::from_usize(wk).expect("weight fits the value type");
            for (hi, v) in h.iter_mut().zip(&base.hypotheses()[k]) {
                *hi = hi.clone() + a.clone() * v.clone();
            }
        }
        table.push(h.into_iter().map(|v| v / r.clone()).collect());
    });
    FiniteClass::new(format!("hull({}, 1/{resolution})", base.label), table)
}

/// Visits every way of writing `left` as an ordered sum over
/// `w[pos..]`, larger leading parts first.
fn compositions(left: usize, pos: usize, w: &mut Vec<usize>, visit: &mut impl FnMut(&[usize])) {
    if pos + 1 == w.len() {
        w[pos] = left;
        visit(w);
        return;
    }
    for take in (0..=left).rev() {
        w[pos] = take;
        compositions(left - take, pos + 1, w, visit);
    }
    w[pos] = 0;
}

/// The union of classes tabulated on the same sample.
pub fn union<T: Value>(classes: &[FiniteClass<T>]) -> Result<FiniteClass<T>> {
    let table = classes
        .iter()
        .flat_map(|c| c.hypotheses().iter().cloned())
        .collect();
    let label = classes
        .iter()
        .map(|c| c.label.as_str())
        .collect::<Vec<_>>()
        .join(" ∪ ");
    FiniteClass::new(label, table)
}

/// Generalization bound for jointly estimated mixtures under 0-1 loss:
/// `rad + sqrt(ln(1/δ)/n)`.
pub fn generalization_bound(rad: f64, n: usize, delta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return config_err(format!("delta must lie in (0, 1), got {delta}"));
    }
    if n == 0 {
        return config_err("sample size must be positive");
    }
    Ok(rad + ((1.0 / delta).ln() / n as f64).sqrt())
}
