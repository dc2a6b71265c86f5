//! Tape-style reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node whose parents have strictly smaller
//! indices, so the node vector is already in topological order and the
//! backward pass is a single reverse sweep.

use super::tensor::{matmul_at_into, matmul_bt_into};
use super::{NumericsError, Tensor, NORM_EPSILON};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Relu(Var),
    Tanh(Var),
    Reverse(Var),
    ScaleConst(Var, f64),
    ScaleBy(Var, Var),
    ShiftBy(Var, Var),
    Sum(Var),
    ConcatRows(Vec<Var>),
    Splice { input: Var, offsets: Vec<i64> },
    MeanStd { input: Var, std: Vec<f64> },
    NormalizeRows { input: Var, norms: Vec<f64> },
    RowDot(Var, Var),
    ReplaceAt { input: Var, values: Var, cols: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

impl Node {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }
}

/// A single computation graph. Graphs own all their data, so independent
/// graphs can live on different threads.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, var: Var) -> &Node {
        &self.nodes[var.0]
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn grad(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].grad
    }

    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node { value, grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumericsError::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// `x[n×m] + bias[m]` with the bias repeated on every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let cols = vx.cols();
        if vb.len() != cols {
            return Err(NumericsError::shape(
                "add_row_bias",
                format!("input {:?}, bias {:?}", vx.shape(), vb.shape()),
            ));
        }
        let mut value = vx.clone();
        for row in value.data_mut().chunks_mut(cols) {
            row.iter_mut().zip(vb.data()).for_each(|(v, b)| *v += b);
        }
        Ok(self.push(value, Op::AddRowBias(x, bias)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    /// Gradient reversal: identity forward, negated gradient backward.
    pub fn reverse_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Reverse(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::ScaleConst(x, factor))
    }

    /// `s · x` for a learnable scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var, NumericsError> {
        let factor = self.expect_scalar("scale_by", s)?;
        let value = self.value(x).map(|v| v * factor);
        Ok(self.push(value, Op::ScaleBy(x, s)))
    }

    /// `x + s` for a learnable scalar node `s`.
    pub fn shift_by(&mut self, x: Var, s: Var) -> Result<Var, NumericsError> {
        let shift = self.expect_scalar("shift_by", s)?;
        let value = self.value(x).map(|v| v + shift);
        Ok(self.push(value, Op::ShiftBy(x, s)))
    }

    fn expect_scalar(&self, op: &'static str, s: Var) -> Result<f64, NumericsError> {
        let v = self.value(s);
        if v.len() != 1 {
            return Err(NumericsError::shape(op, format!("expected scalar, got {:?}", v.shape())));
        }
        Ok(v.data()[0])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    /// Stacks the rows of every input (vectors count as one row).
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::shape("concat_rows", "no inputs".to_string()))?;
        let cols = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(NumericsError::shape(
                    "concat_rows",
                    format!("column mismatch {} vs {}", v.cols(), cols),
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec())))
    }

    /// Frame splicing: output block `k` holds the input shifted by
    /// `offsets[k]` rows, zero where the source row is outside `[0, T)`.
    pub fn splice(&mut self, x: Var, offsets: &[i64]) -> Result<Var, NumericsError> {
        if offsets.is_empty() {
            return Err(NumericsError::shape("splice", "empty offset vector".to_string()));
        }
        let v = self.value(x);
        let (t, f) = (v.rows(), v.cols());
        let k = offsets.len();
        let mut out = vec![0.0; t * k * f];
        for i in 0..t {
            for (block, &off) in offsets.iter().enumerate() {
                let src = i as i64 + off;
                if src < 0 || src >= t as i64 {
                    continue;
                }
                let dst = i * k * f + block * f;
                out[dst..dst + f].copy_from_slice(v.row(src as usize));
            }
        }
        let value = Tensor::new(vec![t, k * f], out)?;
        Ok(self.push(value, Op::Splice { input: x, offsets: offsets.to_vec() }))
    }

    /// Column means followed by column population standard deviations,
    /// `sqrt(var + var_epsilon)`, as a `[1, 2F]` row.
    pub fn mean_std(&mut self, x: Var, var_epsilon: f64) -> Var {
        let v = self.value(x);
        let (t, f) = (v.rows(), v.cols());
        let mut mean = vec![0.0; f];
        for i in 0..t {
            mean.iter_mut().zip(v.row(i)).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut var = vec![0.0; f];
        for i in 0..t {
            for ((s, x), m) in var.iter_mut().zip(v.row(i)).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / t as f64 + var_epsilon).sqrt()).collect();
        let mut data = mean;
        data.extend_from_slice(&std);
        let value = Tensor::new(vec![1, 2 * f], data).expect("pooled shape");
        self.push(value, Op::MeanStd { input: x, std })
    }

    /// Divides each row by its L2 norm. Rows with norm at or below
    /// [`NORM_EPSILON`] are rejected.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let cols = v.cols();
        let mut out = v.clone();
        let mut norms = Vec::with_capacity(v.rows());
        for row in out.data_mut().chunks_mut(cols) {
            let n = row.iter().map(|r| r * r).sum::<f64>().sqrt();
            if !(n > NORM_EPSILON) {
                return Err(NumericsError::DegenerateNorm { norm: n });
            }
            row.iter_mut().for_each(|r| *r /= n);
            norms.push(n);
        }
        Ok(self.push(out, Op::NormalizeRows { input: x, norms }))
    }

    /// Row-wise dot products of two equally shaped matrices, `[n]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("row_dot", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let dots = (0..va.rows())
            .map(|r| va.row(r).iter().zip(vb.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        Ok(self.push(Tensor::vector(dots), Op::RowDot(a, b)))
    }

    /// Copy of `x[n×k]` with entry `(l, cols[l])` replaced by `values[l]`.
    pub fn replace_at(&mut self, x: Var, values: Var, cols: &[usize]) -> Result<Var, NumericsError> {
        let (vx, vv) = (self.value(x), self.value(values));
        let (n, k) = (vx.rows(), vx.cols());
        if vv.len() != n || cols.len() != n {
            return Err(NumericsError::shape(
                "replace_at",
                format!("{n} rows, {} values, {} columns", vv.len(), cols.len()),
            ));
        }
        let mut out = vx.clone();
        for (l, &c) in cols.iter().enumerate() {
            if c >= k {
                return Err(NumericsError::Index { index: c, bound: k });
            }
            out.data_mut()[l * k + c] = vv.data()[l];
        }
        Ok(self.push(out, Op::ReplaceAt { input: x, values, cols: cols.to_vec() }))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, computed with
    /// max-subtraction. Targets are 0-based column indices.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
    ) -> Result<Var, NumericsError> {
        let v = self.value(logits);
        let (n, k) = (v.rows(), v.cols());
        if targets.len() != n {
            return Err(NumericsError::shape(
                "softmax_cross_entropy",
                format!("{n} rows but {} targets", targets.len()),
            ));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            if target >= k {
                return Err(NumericsError::Index { index: target, bound: k });
            }
            let row = v.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let log_z = z.ln() + max;
            for (p, x) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (x - log_z).exp();
            }
            loss += log_z - row[target];
        }
        let value = Tensor::scalar(loss / n as f64);
        Ok(self.push(value, Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    /// Backward pass from a scalar root with seed 1.
    pub fn backward(&mut self, root: Var) -> Result<(), NumericsError> {
        if self.value(root).len() != 1 {
            return Err(NumericsError::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.value(root).shape()),
            ));
        }
        self.backward_with(root, Tensor::scalar(1.0))
    }

    /// Backward pass from `root` seeded with an upstream gradient of the
    /// root's shape. Gradients accumulate into every node's stored gradient.
    pub fn backward_with(&mut self, root: Var, seed: Tensor) -> Result<(), NumericsError> {
        if seed.len() != self.value(root).len() {
            return Err(NumericsError::shape(
                "backward_with",
                format!("seed {:?} for root {:?}", seed.shape(), self.value(root).shape()),
            ));
        }
        let seed = seed.reshape(self.value(root).shape().to_vec())?;
        let mut pending: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        pending[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let Some(g) = pending[idx].take() else { continue };
            self.propagate(idx, &g, &mut pending);
            self.nodes[idx].grad.add_assign(&g);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, pending: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                let mut ga = vec![0.0; m * k];
                matmul_bt_into(gd, vb.data(), &mut ga, m, n, k);
                accumulate(pending, *a, va.shape(), ga);
                let mut gb = vec![0.0; k * n];
                matmul_at_into(va.data(), gd, &mut gb, m, k, n);
                accumulate(pending, *b, vb.shape(), gb);
            }
            Op::Transpose(a) => {
                let v = &node.value;
                let gt = Tensor::new(v.shape().to_vec(), gd.to_vec()).expect("shape").transpose();
                accumulate(pending, *a, self.value(*a).shape(), gt.into_data());
            }
            Op::Add(a, b) => {
                accumulate(pending, *a, g.shape(), gd.to_vec());
                accumulate(pending, *b, g.shape(), gd.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(pending, *a, g.shape(), gd.to_vec());
                accumulate(pending, *b, g.shape(), gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = gd.iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                let gb = gd.iter().zip(va.data()).map(|(g, x)| g * x).collect();
                accumulate(pending, *a, va.shape(), ga);
                accumulate(pending, *b, vb.shape(), gb);
            }
            Op::AddRowBias(x, bias) => {
                accumulate(pending, *x, g.shape(), gd.to_vec());
                let vb = self.value(*bias);
                let mut gb = vec![0.0; vb.len()];
                for row in gd.chunks(vb.len()) {
                    gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                }
                accumulate(pending, *bias, vb.shape(), gb);
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                let gx = gd
                    .iter()
                    .zip(vx.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(pending, *x, vx.shape(), gx);
            }
            Op::Tanh(x) => {
                let gx = gd.iter().zip(node.value.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                accumulate(pending, *x, g.shape(), gx);
            }
            Op::Reverse(x) => {
                accumulate(pending, *x, g.shape(), gd.iter().map(|v| -v).collect());
            }
            Op::ScaleConst(x, factor) => {
                accumulate(pending, *x, g.shape(), gd.iter().map(|v| v * factor).collect());
            }
            Op::ScaleBy(x, s) => {
                let vx = self.value(*x);
                let factor = self.value(*s).data()[0];
                accumulate(pending, *x, vx.shape(), gd.iter().map(|v| v * factor).collect());
                let gs = gd.iter().zip(vx.data()).map(|(g, v)| g * v).sum();
                accumulate(pending, *s, self.value(*s).shape(), vec![gs]);
            }
            Op::ShiftBy(x, s) => {
                accumulate(pending, *x, g.shape(), gd.to_vec());
                accumulate(pending, *s, self.value(*s).shape(), vec![gd.iter().sum()]);
            }
            Op::Sum(x) => {
                let vx = self.value(*x);
                accumulate(pending, *x, vx.shape(), vec![gd[0]; vx.len()]);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let vp = self.value(*p);
                    let n = vp.len();
                    accumulate(pending, *p, vp.shape(), gd[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Splice { input, offsets } => {
                let vx = self.value(*input);
                let (t, f) = (vx.rows(), vx.cols());
                let k = offsets.len();
                let mut gx = vec![0.0; t * f];
                for i in 0..t {
                    for (block, &off) in offsets.iter().enumerate() {
                        let src = i as i64 + off;
                        if src < 0 || src >= t as i64 {
                            continue;
                        }
                        let from = i * k * f + block * f;
                        let to = src as usize * f;
                        gx[to..to + f]
                            .iter_mut()
                            .zip(&gd[from..from + f])
                            .for_each(|(a, b)| *a += b);
                    }
                }
                accumulate(pending, *input, vx.shape(), gx);
            }
            Op::MeanStd { input, std } => {
                let vx = self.value(*input);
                let (t, f) = (vx.rows(), vx.cols());
                let mean = &node.value.data()[..f];
                let (g_mean, g_std) = gd.split_at(f);
                let tf = t as f64;
                let mut gx = vec![0.0; t * f];
                for i in 0..t {
                    let row = vx.row(i);
                    for c in 0..f {
                        gx[i * f + c] =
                            g_mean[c] / tf + g_std[c] * (row[c] - mean[c]) / (tf * std[c]);
                    }
                }
                accumulate(pending, *input, vx.shape(), gx);
            }
            Op::NormalizeRows { input, norms } => {
                let y = &node.value;
                let cols = y.cols();
                let mut gx = vec![0.0; y.len()];
                for (r, norm) in norms.iter().enumerate() {
                    let yr = y.row(r);
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        gx[r * cols + c] = (gr[c] - yr[c] * proj) / norm;
                    }
                }
                accumulate(pending, *input, self.value(*input).shape(), gx);
            }
            Op::RowDot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let cols = va.cols();
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for (r, gr) in gd.iter().enumerate() {
                    for c in 0..cols {
                        ga[r * cols + c] = gr * vb.data()[r * cols + c];
                        gb[r * cols + c] = gr * va.data()[r * cols + c];
                    }
                }
                accumulate(pending, *a, va.shape(), ga);
                accumulate(pending, *b, vb.shape(), gb);
            }
            Op::ReplaceAt { input, values, cols } => {
                let k = node.value.cols();
                let mut gx = gd.to_vec();
                let mut gv = vec![0.0; cols.len()];
                for (l, &c) in cols.iter().enumerate() {
                    gv[l] = gx[l * k + c];
                    gx[l * k + c] = 0.0;
                }
                accumulate(pending, *input, g.shape(), gx);
                accumulate(pending, *values, self.value(*values).shape(), gv);
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let vl = self.value(*logits);
                let k = vl.cols();
                let n = targets.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * gd[0] / n).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * k + t] -= gd[0] / n;
                }
                accumulate(pending, *logits, vl.shape(), gl);
            }
        }
    }
}

fn accumulate(pending: &mut [Option<Tensor>], var: Var, shape: &[usize], grad: Vec<f64>) {
    match &mut pending[var.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(grad)
            .for_each(|(a, b)| *a += b),
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), grad).expect("gradient shape matches value"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.leaf(Tensor::identity(2));
        let m = g.leaf(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.leaf(mat(&[&[1.0, 0.0]]));
        let b = g.leaf(mat(&[&[0.0], &[1.0]]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[0.0]);
    }

    #[test]
    fn matmul_dimension_error() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(NumericsError::Shape { .. })));
    }

    #[test]
    fn relu_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![-1.0, -0.5, -3.0]));
        let y = g.relu(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 3]);
        assert_eq!(g.grad(x).data(), &[0.0; 3]);
    }

    #[test]
    fn normalize_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.0, 4.0]));
        let y = g.normalize_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);

        let unit = Tensor::vector(vec![0.0, 1.0, 0.0]);
        let u = g.leaf(unit.clone());
        let y = g.normalize_rows(u).unwrap();
        assert_eq!(g.value(y), &unit);

        let z = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(g.normalize_rows(z), Err(NumericsError::DegenerateNorm { .. })));
    }

    #[test]
    fn softmax_cross_entropy_examples() {
        let mut g = Graph::new();
        let l = g.leaf(mat(&[&[0.0, 0.0, 0.0]]));
        let loss = g.softmax_cross_entropy(l, &[0]).unwrap();
        assert!((g.scalar(loss) - 3f64.ln()).abs() < 1e-15);

        let l = g.leaf(mat(&[&[100.0, 0.0, 0.0]]));
        let loss = g.softmax_cross_entropy(l, &[0]).unwrap();
        assert!(g.scalar(loss) < 1e-10);

        let l = g.leaf(mat(&[&[1.0, 2.0]]));
        assert!(matches!(
            g.softmax_cross_entropy(l, &[2]),
            Err(NumericsError::Index { index: 2, bound: 2 })
        ));
    }

    #[test]
    fn splice_shifts_with_zero_fill() {
        let mut g = Graph::new();
        let x = g.leaf(mat(&[&[1.0], &[2.0], &[3.0]]));
        let y = g.splice(x, &[-1, 0, 1]).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]);
        let id = g.splice(x, &[0]).unwrap();
        assert_eq!(g.value(id), g.value(x));
    }

    #[test]
    fn mean_std_examples() {
        let mut g = Graph::new();
        let x = g.leaf(mat(&[&[1.0], &[3.0]]));
        let y = g.mean_std(x, 0.0);
        assert_eq!(g.value(y).data(), &[2.0, 1.0]);

        let c = g.leaf(mat(&[&[5.0], &[5.0], &[5.0]]));
        let y = g.mean_std(c, 1e-10);
        assert_eq!(g.value(y).data()[0], 5.0);
        assert!((g.value(y).data()[1] - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn reverse_gradient_negates() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let r = g.reverse_gradient(x);
        assert_eq!(g.value(r).data(), &[1.0, 2.0, 3.0]);
        let s = g.sum(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[-1.0, -1.0, -1.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.5, -2.0, 3.0]));
        let r = g.reverse_gradient(x);
        let sq = g.mul(r, r).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[-1.0, 4.0, -6.0]);
    }

    #[test]
    fn backward_twice_doubles_exactly() {
        let mut g = Graph::new();
        let a = g.leaf(mat(&[&[0.3, -1.2], &[2.0, 0.7]]));
        let b = g.leaf(mat(&[&[1.1], &[-0.4]]));
        let p = g.matmul(a, b).unwrap();
        let r = g.relu(p);
        let s = g.sum(r);
        g.backward(s).unwrap();
        let once_a = g.grad(a).clone();
        let once_b = g.grad(b).clone();
        g.backward(s).unwrap();
        for (x, y) in g.grad(a).data().iter().zip(once_a.data()) {
            assert_eq!(*x, 2.0 * y);
        }
        for (x, y) in g.grad(b).data().iter().zip(once_b.data()) {
            assert_eq!(*x, 2.0 * y);
        }
        g.zero_grad();
        assert_eq!(g.grad(a).max_abs(), 0.0);
    }

    #[test]
    fn replace_at_routes_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let v = g.leaf(Tensor::vector(vec![10.0, 20.0]));
        let y = g.replace_at(x, v, &[1, 0]).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 10.0, 20.0, 4.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(g.grad(v).data(), &[1.0, 1.0]);
    }
}
