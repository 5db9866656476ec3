use crate::error::{config_err, dim_err, DarcError, Result};
use crate::scalar::Scalar;

use super::kernels::{self, ConvGeom};
use super::Tensor;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    MeanSquaredError,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        geo: ConvGeom,
        cols: Vec<T>,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddScalar {
        a: Var,
        s: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulScalar {
        a: Var,
        s: Var,
    },
    Relu {
        x: Var,
    },
    BiasAdd {
        x: Var,
        b: Var,
    },
    Shift {
        x: Var,
        offsets: Vec<(isize, isize)>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Mixture {
        alpha: Var,
        terms: Vec<(usize, Var)>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Var,
    },
    Sum {
        x: Var,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient left by the last [`Tape::backward`], if the node received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul of {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, needs))
    }

    /// Stride-1 grouped cross-correlation of `x` (N×C_in×H×W) with `w`
    /// (C_out×C_in/groups×k×k), zero padded by `padding` on each side.
    pub fn conv2d(&mut self, x: Var, w: Var, groups: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return dim_err(format!("conv2d expects 4-d input and kernel, got {sx:?}, {sw:?}"));
        }
        let (n, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, k) = (sw[0], sw[2]);
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return config_err(format!(
                "groups={groups} must divide both C_in={c_in} and C_out={c_out}"
            ));
        }
        if sw[1] != c_in / groups || sw[3] != k {
            return dim_err(format!(
                "kernel {sw:?} incompatible with C_in={c_in}, groups={groups}"
            ));
        }
        if h + 2 * padding < k || wd + 2 * padding < k {
            return dim_err(format!("kernel {k} larger than padded input {h}x{wd}"));
        }
        let geo = ConvGeom {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            k,
            pad: padding,
            groups,
            oh: h + 2 * padding + 1 - k,
            ow: wd + 2 * padding + 1 - k,
        };
        let (out, cols) = kernels::conv2d_forward(self.data(x), self.data(w), &geo);
        let needs = self.needs(x) || self.needs(w);
        let value = Tensor::new(vec![n, c_out, geo.oh, geo.ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, geo, cols }, needs))
    }

    pub fn elementwise(&mut self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        match (op, b) {
            (ElementwiseOp::Add, Some(b)) => self.add(a, b),
            (ElementwiseOp::Mul, Some(b)) => self.mul(a, b),
            (ElementwiseOp::Relu, None) => self.relu(a),
            (op, _) => config_err(format!("wrong operand count for {op:?}")),
        }
    }

    /// Equal-shape sum, or tensor plus a one-element tensor on either side.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, scalar) = self.broadcast_pair(a, b, "add")?;
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        let out: Vec<T> = if scalar {
            let s = self.data(b)[0];
            self.data(a).iter().map(|&v| v + s).collect()
        } else {
            self.data(a)
                .iter()
                .zip(self.data(b))
                .map(|(&u, &v)| u + v)
                .collect()
        };
        let value = Tensor::new(shape, out)?;
        let op = if scalar {
            Op::AddScalar { a, s: b }
        } else {
            Op::Add { a, b }
        };
        Ok(self.push(value, op, needs))
    }

    /// Equal-shape product, or tensor times a one-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, scalar) = self.broadcast_pair(a, b, "mul")?;
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        let out: Vec<T> = if scalar {
            let s = self.data(b)[0];
            self.data(a).iter().map(|&v| v * s).collect()
        } else {
            self.data(a)
                .iter()
                .zip(self.data(b))
                .map(|(&u, &v)| u * v)
                .collect()
        };
        let value = Tensor::new(shape, out)?;
        let op = if scalar {
            Op::MulScalar { a, s: b }
        } else {
            Op::Mul { a, b }
        };
        Ok(self.push(value, op, needs))
    }

    /// Orders the operands so a scalar operand, if any, comes second.
    fn broadcast_pair(&self, a: Var, b: Var, what: &str) -> Result<(Var, Var, bool)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok((a, b, false));
        }
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if nb == 1 {
            Ok((a, b, true))
        } else if na == 1 {
            Ok((b, a, true))
        } else {
            dim_err(format!("{what} of incompatible shapes {sa:?} and {sb:?}"))
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(x);
        Ok(self.push(value, Op::Relu { x }, needs))
    }

    /// Adds `b` (length F) to every row of `x` (N×F).
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return dim_err(format!("bias_add of {sx:?} and {sb:?}"));
        }
        let f = sx[1];
        let bias = self.data(b);
        let out: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % f])
            .collect();
        let value = Tensor::new(sx.to_vec(), out)?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(value, Op::BiasAdd { x, b }, needs))
    }

    /// Per-channel spatial shift with zero fill: channel `c` of the output at
    /// `(y, x)` reads the input at `(y + dy_c, x + dx_c)`.
    pub fn shift(&mut self, x: Var, offsets: &[(isize, isize)]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[1] != offsets.len() {
            return dim_err(format!("shift of {sx:?} with {} channel offsets", offsets.len()));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for b in 0..n {
            for (ch, &(dy, dx)) in offsets.iter().enumerate() {
                let base = (b * c + ch) * h * w;
                for y in 0..h {
                    let iy = y as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let ix = xx as isize + dx;
                        if ix >= 0 && ix < w as isize {
                            out[base + y * w + xx] = src[base + iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        let needs = self.needs(x);
        let offsets = offsets.to_vec();
        Ok(self.push(value, Op::Shift { x, offsets }, needs))
    }

    /// N×C×H×W → N×C spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return dim_err(format!("global_avg_pool expects 4-d input, got {sx:?}"));
        }
        let hw = sx[2] * sx[3];
        let inv = T::one() / T::from_count(hw);
        let out: Vec<T> = self
            .data(x)
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![sx[0], sx[1]], out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::GlobalAvgPool { x }, needs))
    }

    /// Convex combination `Σ_j alpha[j] · y_j` over the listed `(j, y_j)`
    /// terms. Terms whose weight is exactly zero are left out of the sum but
    /// still receive a gradient for their weight, so a one-hot `alpha`
    /// reproduces its candidate's output bit for bit.
    pub fn mixture(&mut self, alpha: Var, terms: &[(usize, Var)]) -> Result<Var> {
        let j_count = self.value(alpha).numel();
        let Some(&(_, first)) = terms.first() else {
            return config_err("mixture with no terms");
        };
        let shape = self.shape(first).to_vec();
        for &(j, y) in terms {
            if j >= j_count {
                return dim_err(format!("mixture term {j} outside alpha of length {j_count}"));
            }
            if self.shape(y) != shape.as_slice() {
                return dim_err(format!(
                    "mixture terms disagree in shape: {:?} vs {shape:?}",
                    self.shape(y)
                ));
            }
        }
        let weights = self.data(alpha);
        let mut out: Option<Vec<T>> = None;
        for &(j, y) in terms {
            let a = weights[j];
            if a == T::zero() {
                continue;
            }
            let ys = self.data(y);
            match out.as_mut() {
                None => out = Some(ys.iter().map(|&v| a * v).collect()),
                Some(acc) => acc.iter_mut().zip(ys).for_each(|(o, &v)| *o += a * v),
            }
        }
        let numel = shape.iter().product();
        let value = Tensor::new(shape, out.unwrap_or_else(|| vec![T::zero(); numel]))?;
        let needs = self.needs(alpha) || terms.iter().any(|&(_, y)| self.needs(y));
        let terms = terms.to_vec();
        Ok(self.push(value, Op::Mixture { alpha, terms }, needs))
    }

    pub fn loss(&mut self, kind: LossKind, pred: Var, target: Var) -> Result<Var> {
        match kind {
            LossKind::MeanSquaredError => self.mean_squared_error(pred, target),
            LossKind::SoftmaxCrossEntropy => {
                let labels = self
                    .data(target)
                    .iter()
                    .map(|&v| {
                        let f = v.as_f64();
                        if f < 0.0 || f.fract() != 0.0 {
                            Err(DarcError::Data(format!("label {f} is not a class index")))
                        } else {
                            Ok(f as usize)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                self.softmax_cross_entropy(pred, &labels)
            }
        }
    }

    /// Mean over the batch of `logsumexp(logits) − logit[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return dim_err(format!(
                "cross entropy of logits {s:?} with {} labels",
                labels.len()
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(DarcError::Data(format!("label {bad} outside {k} classes")));
        }
        let z = self.data(logits);
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - max).exp();
                denom += *p;
            }
            probs[i * k..(i + 1) * k].iter_mut().for_each(|p| *p /= denom);
            total += denom.ln() + max - row[labels[i]];
        }
        let value = Tensor::scalar(total / T::from_count(n));
        let needs = self.needs(logits);
        let labels = labels.to_vec();
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            },
            needs,
        ))
    }

    /// Mean over all elements of `(pred − target)²`.
    pub fn mean_squared_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) {
            return dim_err(format!(
                "mse of {:?} and {:?}",
                self.shape(pred),
                self.shape(target)
            ));
        }
        let numel = self.value(pred).numel();
        let sum: T = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let value = Tensor::scalar(sum / T::from_count(numel));
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(value, Op::Mse { pred, target }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.data(x).iter().copied().sum());
        let needs = self.needs(x);
        Ok(self.push(value, Op::Sum { x }, needs))
    }

    /// Reverse sweep from the one-element node `root`. Gradients from any
    /// earlier sweep are cleared first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return dim_err(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            ));
        }
        let count = root.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..count).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let g = if node.needs_grad { g } else { None };
            node.value.set_grad(g);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.needs(a) {
                    let da = self.acc(grads, a);
                    kernels::matmul_a_bt_acc(g, self.data(b), da, m, n, k);
                }
                if self.needs(b) {
                    let db = self.acc(grads, b);
                    kernels::matmul_at_b_acc(self.data(a), g, db, k, m, n);
                }
            }
            Op::Conv2d { x, w, geo, cols } => {
                let (x, w) = (*x, *w);
                let mut dw_buf = self.needs(w).then(|| vec![T::zero(); self.value(w).numel()]);
                let mut dx_buf = self.needs(x).then(|| vec![T::zero(); self.value(x).numel()]);
                kernels::conv2d_backward(
                    g,
                    self.data(w),
                    cols,
                    geo,
                    dw_buf.as_deref_mut(),
                    dx_buf.as_deref_mut(),
                );
                if let Some(dw) = dw_buf {
                    add_into(self.acc(grads, w), &dw);
                }
                if let Some(dx) = dx_buf {
                    add_into(self.acc(grads, x), &dx);
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(v) {
                        add_into(self.acc(grads, v), g);
                    }
                }
            }
            &Op::AddScalar { a, s } => {
                if self.needs(a) {
                    add_into(self.acc(grads, a), g);
                }
                if self.needs(s) {
                    let total: T = g.iter().copied().sum();
                    self.acc(grads, s)[0] += total;
                }
            }
            &Op::Mul { a, b } => {
                if self.needs(a) {
                    let bd = self.data(b);
                    let da = self.acc(grads, a);
                    da.iter_mut()
                        .zip(g.iter().zip(bd))
                        .for_each(|(d, (&gi, &v))| *d += gi * v);
                }
                if self.needs(b) {
                    let ad = self.data(a);
                    let db = self.acc(grads, b);
                    db.iter_mut()
                        .zip(g.iter().zip(ad))
                        .for_each(|(d, (&gi, &v))| *d += gi * v);
                }
            }
            &Op::MulScalar { a, s } => {
                let sv = self.data(s)[0];
                if self.needs(a) {
                    let da = self.acc(grads, a);
                    da.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * sv);
                }
                if self.needs(s) {
                    let total: T = g.iter().zip(self.data(a)).map(|(&gi, &v)| gi * v).sum();
                    self.acc(grads, s)[0] += total;
                }
            }
            &Op::Relu { x } => {
                let xd = self.data(x);
                let dx = self.acc(grads, x);
                for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(xd) {
                    if v > T::zero() {
                        *d += gi;
                    }
                }
            }
            &Op::BiasAdd { x, b } => {
                if self.needs(x) {
                    add_into(self.acc(grads, x), g);
                }
                if self.needs(b) {
                    let f = self.value(b).numel();
                    let db = self.acc(grads, b);
                    for row in g.chunks(f) {
                        add_into(db, row);
                    }
                }
            }
            Op::Shift { x, offsets } => {
                let x = *x;
                let s = self.shape(x).to_vec();
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let dx = self.acc(grads, x);
                for b in 0..n {
                    for (ch, &(dy, dxo)) in offsets.iter().enumerate() {
                        let base = (b * c + ch) * h * w;
                        for y in 0..h {
                            let iy = y as isize + dy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for xx in 0..w {
                                let ix = xx as isize + dxo;
                                if ix >= 0 && ix < w as isize {
                                    dx[base + iy as usize * w + ix as usize] += g[base + y * w + xx];
                                }
                            }
                        }
                    }
                }
            }
            &Op::GlobalAvgPool { x } => {
                let s = self.shape(x);
                let hw = s[2] * s[3];
                let inv = T::one() / T::from_count(hw);
                let dx = self.acc(grads, x);
                for (chunk, &gi) in dx.chunks_mut(hw).zip(g) {
                    chunk.iter_mut().for_each(|d| *d += gi * inv);
                }
            }
            Op::Mixture { alpha, terms } => {
                let alpha = *alpha;
                let weights = self.data(alpha).to_vec();
                if self.needs(alpha) {
                    let partials: Vec<(usize, T)> = terms
                        .iter()
                        .map(|&(j, y)| (j, kernels::dot(g, self.data(y))))
                        .collect();
                    let da = self.acc(grads, alpha);
                    for (j, p) in partials {
                        da[j] += p;
                    }
                }
                for &(j, y) in terms {
                    if self.needs(y) && weights[j] != T::zero() {
                        let a = weights[j];
                        let dy = self.acc(grads, y);
                        dy.iter_mut().zip(g).for_each(|(d, &gi)| *d += a * gi);
                    }
                }
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let logits = *logits;
                let k = self.shape(logits)[1];
                let scale = g[0] / T::from_count(labels.len());
                let dz = self.acc(grads, logits);
                for (i, &label) in labels.iter().enumerate() {
                    for c in 0..k {
                        let onehot = if c == label { T::one() } else { T::zero() };
                        dz[i * k + c] += scale * (probs[i * k + c] - onehot);
                    }
                }
            }
            &Op::Mse { pred, target } => {
                let numel = self.value(pred).numel();
                let scale = g[0] * T::lit(2.0) / T::from_count(numel);
                let diff: Vec<T> = self
                    .data(pred)
                    .iter()
                    .zip(self.data(target))
                    .map(|(&p, &t)| scale * (p - t))
                    .collect();
                if self.needs(pred) {
                    add_into(self.acc(grads, pred), &diff);
                }
                if self.needs(target) {
                    let dt = self.acc(grads, target);
                    dt.iter_mut().zip(&diff).for_each(|(d, &v)| *d -= v);
                }
            }
            &Op::Sum { x } => {
                let dx = self.acc(grads, x);
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let numel = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); numel])
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}
