//! A small define-by-run reverse-mode differentiation engine.
//!
//! Values are flat `f64` arrays with a row-major `rows × cols` shape. Complex
//! quantities are carried as separate real and imaginary nodes, so every rule
//! here is an ordinary real-valued derivative.
//!
//! A [`Tape`] records operations in evaluation order. Because a node can only
//! reference nodes recorded before it, replaying the backward rules in reverse
//! recording order visits every node after all of its consumers, which is all
//! the topological ordering reverse mode needs.
//!
//! ```
//! use blindeq::autodiff::Tape;
//!
//! let mut tape = Tape::new();
//! let a = tape.leaf(vec![1.0, 2.0, 3.0]);
//! let b = tape.leaf(vec![4.0, 5.0, 6.0]);
//! let ab = tape.mul(a, b).unwrap();
//! let loss = tape.sum(ab);
//! let grads = tape.backward(loss);
//! assert_eq!(grads.wrt(a), &[4.0, 5.0, 6.0]);
//! ```

use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn vector(len: usize) -> Self {
        Shape { rows: 1, cols: len }
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    Square(Var),
    Ln(Var),
    Exp(Var),
    Sum(Var),
    Elu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Conv1d {
        signal: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    Conv1dChannels {
        input: Var,
        weight: Var,
        kernel_len: usize,
        stride: usize,
        padding: usize,
    },
    AddRowBias(Var, Var),
    RowDotConst(Var, Vec<f64>),
    OuterSubConst(Var, Vec<f64>),
    Upsample(Var, usize),
    Slice(Var, usize),
    Reshape(Var),
    Transpose(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    shape: Shape,
    op: Op,
}

/// Recording of one forward evaluation. Build a fresh tape per batch.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every recorded node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient with respect to `v`; all zeros when `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }
}

fn check_same(op: &str, a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::config(format!(
            "{op}: shape mismatch, left is {a} and right is {b}"
        )));
    }
    Ok(())
}

/// Output length of a strided linear convolution over a zero-padded signal.
pub fn conv_output_len(signal_len: usize, kernel_len: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = signal_len + 2 * padding;
    if stride == 0 || kernel_len == 0 || kernel_len > padded {
        return None;
    }
    Some((padded - kernel_len) / stride + 1)
}

/// Plain (non-differentiable) strided linear convolution with the same index
/// convention as [`Tape::conv1d`]:
/// `out[i] = Σ_k kernel[k] · padded[i·stride + K − 1 − k]`.
pub fn conv1d_values(signal: &[f64], kernel: &[f64], stride: usize, padding: usize) -> Result<Vec<f64>> {
    let k = kernel.len();
    let out_len = conv_output_len(signal.len(), k, stride, padding).ok_or_else(|| {
        Error::config(format!(
            "conv1d: kernel length {k} does not fit signal length {} with padding {padding} (stride {stride})",
            signal.len()
        ))
    })?;
    let mut out = vec![0.0; out_len];
    for (i, o) in out.iter_mut().enumerate() {
        let base = i * stride + k - 1;
        let mut acc = 0.0;
        for (kk, &w) in kernel.iter().enumerate() {
            let j = base - kk;
            if j >= padding && j - padding < signal.len() {
                acc += w * signal[j - padding];
            }
        }
        *o = acc;
    }
    Ok(out)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Shape, op: Op) -> Var {
        debug_assert_eq!(value.len(), shape.len());
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    /// A row vector input.
    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        let shape = Shape::vector(value.len());
        self.push(value, shape, Op::Leaf)
    }

    pub fn leaf_shaped(&mut self, value: Vec<f64>, shape: Shape) -> Result<Var> {
        if value.len() != shape.len() {
            return Err(Error::config(format!(
                "leaf: {} values cannot fill shape {shape}",
                value.len()
            )));
        }
        Ok(self.push(value, shape, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<f64>, Shape)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        check_same(name, sa, sb)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        Ok((out, sa))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, s) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, s, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, s) = self.binary(a, b, "subtract", |x, y| x - y)?;
        Ok(self.push(v, s, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, s) = self.binary(a, b, "multiply", |x, y| x * y)?;
        Ok(self.push(v, s, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * factor).collect();
        let s = self.shape(a);
        self.push(v, s, Op::Scale(a, factor))
    }

    /// Adds a constant array (no gradient flows into the constant).
    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.shape(a).len() {
            return Err(Error::config(format!(
                "add_const: node has {} elements, constant has {}",
                self.shape(a).len(),
                c.len()
            )));
        }
        let v = self.value(a).iter().zip(c).map(|(x, y)| x + y).collect();
        let s = self.shape(a);
        Ok(self.push(v, s, Op::AddConst(a)))
    }

    /// Elementwise product with a constant array.
    pub fn mul_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        if c.len() != self.shape(a).len() {
            return Err(Error::config(format!(
                "mul_const: node has {} elements, constant has {}",
                self.shape(a).len(),
                c.len()
            )));
        }
        let v = self.value(a).iter().zip(c).map(|(x, y)| x * y).collect();
        let s = self.shape(a);
        Ok(self.push(v, s, Op::MulConst(a, c.to_vec())))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x * x).collect();
        let s = self.shape(a);
        self.push(v, s, Op::Square(a))
    }

    /// Natural logarithm; every input must be strictly positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::Domain(format!("natural_log of nonpositive value {bad}")));
        }
        let v = self.value(a).iter().map(|x| x.ln()).collect();
        let s = self.shape(a);
        Ok(self.push(v, s, Op::Ln(a)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.exp()).collect();
        let s = self.shape(a);
        self.push(v, s, Op::Exp(a))
    }

    /// Sum of all elements, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        self.push(vec![total], Shape::vector(1), Op::Sum(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { x.exp_m1() })
            .collect();
        let s = self.shape(a);
        self.push(v, s, Op::Elu(a))
    }

    /// Row-wise softmax of a `N × K` node, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let mut v = self.value(a).to_vec();
        for row in v.chunks_mut(s.cols.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        self.push(v, s, Op::SoftmaxRows(a))
    }

    /// Row-wise log-softmax; avoids `ln(0)` when probabilities underflow.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let mut v = self.value(a).to_vec();
        for row in v.chunks_mut(s.cols.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(v, s, Op::LogSoftmaxRows(a))
    }

    /// Strided linear convolution of a 1-D signal with a 1-D kernel over the
    /// zero-padded signal. Output length is
    /// `floor((len(signal) + 2·padding − len(kernel)) / stride) + 1` and
    /// `out[i] = Σ_k kernel[k] · padded[i·stride + K − 1 − k]`.
    pub fn conv1d(&mut self, signal: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = conv1d_values(self.value(signal), self.value(kernel), stride, padding)?;
        let s = Shape::vector(out.len());
        Ok(self.push(
            out,
            s,
            Op::Conv1d {
                signal,
                kernel,
                stride,
                padding,
            },
        ))
    }

    /// Multi-channel convolution layer without bias. `input` is `C_in × L`,
    /// `weight` is `C_out × (C_in·K)` (row `o` holds the `C_in` kernels of
    /// output channel `o` back to back). Uses the [`Tape::conv1d`] index
    /// convention per channel pair.
    pub fn conv1d_channels(&mut self, input: Var, weight: Var, kernel_len: usize, stride: usize, padding: usize) -> Result<Var> {
        let si = self.shape(input);
        let sw = self.shape(weight);
        if kernel_len == 0 || sw.cols != si.rows * kernel_len {
            return Err(Error::config(format!(
                "conv1d_channels: weight shape {sw} does not match {} input channels with kernel {kernel_len}",
                si.rows
            )));
        }
        let out_len = conv_output_len(si.cols, kernel_len, stride, padding).ok_or_else(|| {
            Error::config(format!(
                "conv1d_channels: kernel length {kernel_len} does not fit signal length {} with padding {padding}",
                si.cols
            ))
        })?;
        let x = self.value(input);
        let w = self.value(weight);
        let (cin, len, cout) = (si.rows, si.cols, sw.rows);
        let mut out = vec![0.0; cout * out_len];
        for o in 0..cout {
            for c in 0..cin {
                let ker = &w[o * sw.cols + c * kernel_len..o * sw.cols + (c + 1) * kernel_len];
                let sig = &x[c * len..(c + 1) * len];
                let row = &mut out[o * out_len..(o + 1) * out_len];
                for (i, acc) in row.iter_mut().enumerate() {
                    let base = i * stride + kernel_len - 1;
                    for (kk, &wk) in ker.iter().enumerate() {
                        let j = base - kk;
                        if j >= padding && j - padding < len {
                            *acc += wk * sig[j - padding];
                        }
                    }
                }
            }
        }
        let s = Shape::matrix(cout, out_len);
        Ok(self.push(
            out,
            s,
            Op::Conv1dChannels {
                input,
                weight,
                kernel_len,
                stride,
                padding,
            },
        ))
    }

    /// Adds `bias[r]` to every element of row `r`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let s = self.shape(a);
        if self.shape(bias).len() != s.rows {
            return Err(Error::config(format!(
                "add_row_bias: {} rows but {} bias entries",
                s.rows,
                self.shape(bias).len()
            )));
        }
        let b = self.value(bias);
        let v = self
            .value(a)
            .chunks(s.cols.max(1))
            .zip(b)
            .flat_map(|(row, &bb)| row.iter().map(move |x| x + bb))
            .collect();
        Ok(self.push(v, s, Op::AddRowBias(a, bias)))
    }

    /// For an `N × K` node, returns the length-`N` vector `Σ_k a[n,k]·c[k]`.
    pub fn row_dot_const(&mut self, a: Var, c: &[f64]) -> Result<Var> {
        let s = self.shape(a);
        if s.cols != c.len() {
            return Err(Error::config(format!(
                "row_dot_const: {} columns but constant has {} entries",
                s.cols,
                c.len()
            )));
        }
        let v = self
            .value(a)
            .chunks(s.cols.max(1))
            .map(|row| row.iter().zip(c).map(|(x, y)| x * y).sum())
            .collect();
        Ok(self.push(v, Shape::vector(s.rows), Op::RowDotConst(a, c.to_vec())))
    }

    /// For a length-`N` node `x`, returns the `N × K` node `x[n] − c[k]`.
    pub fn outer_sub_const(&mut self, a: Var, c: &[f64]) -> Var {
        let n = self.shape(a).len();
        let k = c.len();
        let mut v = Vec::with_capacity(n * k);
        for &x in self.value(a) {
            v.extend(c.iter().map(|y| x - y));
        }
        self.push(v, Shape::matrix(n, k), Op::OuterSubConst(a, c.to_vec()))
    }

    /// Inserts `factor − 1` zeros after every element of a vector.
    pub fn upsample(&mut self, a: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::config("upsample: factor must be at least 1"));
        }
        let src = self.value(a);
        let mut v = vec![0.0; src.len() * factor];
        for (i, &x) in src.iter().enumerate() {
            v[i * factor] = x;
        }
        let s = Shape::vector(v.len());
        Ok(self.push(v, s, Op::Upsample(a, factor)))
    }

    /// Contiguous range `[start, start + len)` of the flat value, as a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let total = self.shape(a).len();
        if start + len > total {
            return Err(Error::config(format!(
                "slice: range {start}..{} exceeds length {total}",
                start + len
            )));
        }
        let v = self.value(a)[start..start + len].to_vec();
        Ok(self.push(v, Shape::vector(len), Op::Slice(a, start)))
    }

    pub fn reshape(&mut self, a: Var, shape: Shape) -> Result<Var> {
        check_same("reshape", Shape::vector(self.shape(a).len()), Shape::vector(shape.len()))?;
        let v = self.value(a).to_vec();
        Ok(self.push(v, shape, Op::Reshape(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let src = self.value(a);
        let mut v = vec![0.0; s.len()];
        for r in 0..s.rows {
            for c in 0..s.cols {
                v[c * s.rows + r] = src[r * s.cols + c];
            }
        }
        self.push(v, Shape::matrix(s.cols, s.rows), Op::Transpose(a))
    }

    /// Reverse pass from a scalar root with unit cotangent.
    pub fn backward(&self, root: Var) -> Gradients {
        let seed = vec![1.0; self.shape(root).len()];
        self.backward_with(root, &seed)
    }

    /// Reverse pass seeding the root with an arbitrary cotangent.
    pub fn backward_with(&self, root: Var, cotangent: &[f64]) -> Gradients {
        assert_eq!(cotangent.len(), self.shape(root).len(), "cotangent shape");
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes[..=root.0] {
            grads.push(vec![0.0; node.value.len()]);
        }
        grads[root.0].copy_from_slice(cotangent);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            if g.iter().all(|&x| x == 0.0) {
                grads[idx] = g;
                continue;
            }
            self.apply_rule(node, &g, &mut grads);
            grads[idx] = g;
        }
        grads.resize_with(self.nodes.len(), Vec::new);
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if g.len() != node.value.len() {
                *g = vec![0.0; node.value.len()];
            }
        }
        Gradients { grads }
    }

    fn apply_rule(&self, node: &Node, g: &[f64], grads: &mut [Vec<f64>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g);
                accumulate(&mut grads[b.0], g);
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], g);
                for (gb, gi) in grads[b.0].iter_mut().zip(g) {
                    *gb -= gi;
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                for i in 0..g.len() {
                    grads[a.0][i] += g[i] * vb[i];
                }
                for i in 0..g.len() {
                    grads[b.0][i] += g[i] * va[i];
                }
            }
            Op::Scale(a, f) => {
                for (ga, gi) in grads[a.0].iter_mut().zip(g) {
                    *ga += f * gi;
                }
            }
            Op::AddConst(a) | Op::Reshape(a) => accumulate(&mut grads[a.0], g),
            Op::MulConst(a, c) => {
                for ((ga, gi), ci) in grads[a.0].iter_mut().zip(g).zip(c) {
                    *ga += gi * ci;
                }
            }
            Op::Square(a) => {
                let va = &self.nodes[a.0].value;
                for ((ga, gi), x) in grads[a.0].iter_mut().zip(g).zip(va) {
                    *ga += 2.0 * x * gi;
                }
            }
            Op::Ln(a) => {
                let va = &self.nodes[a.0].value;
                for ((ga, gi), x) in grads[a.0].iter_mut().zip(g).zip(va) {
                    *ga += gi / x;
                }
            }
            Op::Exp(a) => {
                for ((ga, gi), y) in grads[a.0].iter_mut().zip(g).zip(&node.value) {
                    *ga += gi * y;
                }
            }
            Op::Sum(a) => {
                let gi = g[0];
                for ga in grads[a.0].iter_mut() {
                    *ga += gi;
                }
            }
            Op::Elu(a) => {
                let va = &self.nodes[a.0].value;
                for ((ga, gi), &x) in grads[a.0].iter_mut().zip(g).zip(va) {
                    *ga += if x > 0.0 { *gi } else { gi * x.exp() };
                }
            }
            Op::SoftmaxRows(a) => {
                let k = node.shape.cols.max(1);
                let ga = &mut grads[a.0];
                for ((grow, yrow), arow) in g.chunks(k).zip(node.value.chunks(k)).zip(ga.chunks_mut(k)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                    for ((out, gi), y) in arow.iter_mut().zip(grow).zip(yrow) {
                        *out += y * (gi - dot);
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                let k = node.shape.cols.max(1);
                let ga = &mut grads[a.0];
                for ((grow, yrow), arow) in g.chunks(k).zip(node.value.chunks(k)).zip(ga.chunks_mut(k)) {
                    let total: f64 = grow.iter().sum();
                    for ((out, gi), y) in arow.iter_mut().zip(grow).zip(yrow) {
                        *out += gi - y.exp() * total;
                    }
                }
            }
            Op::Conv1d {
                signal,
                kernel,
                stride,
                padding,
            } => {
                let sig = &self.nodes[signal.0].value;
                let ker = &self.nodes[kernel.0].value;
                let (k, n, p, s) = (ker.len(), sig.len(), *padding, *stride);
                let mut gs = vec![0.0; n];
                let mut gk = vec![0.0; k];
                for (i, &gi) in g.iter().enumerate() {
                    if gi == 0.0 {
                        continue;
                    }
                    let base = i * s + k - 1;
                    for kk in 0..k {
                        let j = base - kk;
                        if j >= p && j - p < n {
                            gs[j - p] += gi * ker[kk];
                            gk[kk] += gi * sig[j - p];
                        }
                    }
                }
                accumulate(&mut grads[signal.0], &gs);
                accumulate(&mut grads[kernel.0], &gk);
            }
            Op::Conv1dChannels {
                input,
                weight,
                kernel_len,
                stride,
                padding,
            } => {
                let si = self.nodes[input.0].shape;
                let sw = self.nodes[weight.0].shape;
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let (cin, len, cout, k) = (si.rows, si.cols, sw.rows, *kernel_len);
                let out_len = node.shape.cols;
                let mut gx = vec![0.0; x.len()];
                let mut gw = vec![0.0; w.len()];
                for o in 0..cout {
                    let grow = &g[o * out_len..(o + 1) * out_len];
                    for c in 0..cin {
                        let woff = o * sw.cols + c * k;
                        for (i, &gi) in grow.iter().enumerate() {
                            if gi == 0.0 {
                                continue;
                            }
                            let base = i * stride + k - 1;
                            for kk in 0..k {
                                let j = base - kk;
                                if j >= *padding && j - padding < len {
                                    gx[c * len + j - padding] += gi * w[woff + kk];
                                    gw[woff + kk] += gi * x[c * len + j - padding];
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[input.0], &gx);
                accumulate(&mut grads[weight.0], &gw);
            }
            Op::AddRowBias(a, bias) => {
                accumulate(&mut grads[a.0], g);
                let cols = node.shape.cols.max(1);
                for (gb, grow) in grads[bias.0].iter_mut().zip(g.chunks(cols)) {
                    *gb += grow.iter().sum::<f64>();
                }
            }
            Op::RowDotConst(a, c) => {
                let k = c.len().max(1);
                for (arow, gi) in grads[a.0].chunks_mut(k).zip(g) {
                    for (out, ci) in arow.iter_mut().zip(c) {
                        *out += gi * ci;
                    }
                }
            }
            Op::OuterSubConst(a, c) => {
                let k = c.len().max(1);
                for (ga, grow) in grads[a.0].iter_mut().zip(g.chunks(k)) {
                    *ga += grow.iter().sum::<f64>();
                }
            }
            Op::Upsample(a, factor) => {
                for (i, ga) in grads[a.0].iter_mut().enumerate() {
                    *ga += g[i * factor];
                }
            }
            Op::Slice(a, start) => {
                for (ga, gi) in grads[a.0][*start..*start + g.len()].iter_mut().zip(g) {
                    *ga += gi;
                }
            }
            Op::Transpose(a) => {
                // node is cols × rows of the source
                let (r, c) = (node.shape.cols, node.shape.rows);
                let ga = &mut grads[a.0];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central finite differences of a scalar function.
    fn numeric_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut x = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = x[i];
                x[i] = orig + h;
                let up = f(&x);
                x[i] = orig - h;
                let down = f(&x);
                x[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let mut t = Tape::new();
        let s = t.leaf(vec![1.0, 2.0, 3.0]);
        let k = t.leaf(vec![1.0]);
        let y = t.conv1d(s, k, 1, 0).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_strided_hand_evaluated() {
        // out[i] = k0·s[2i+1] + k1·s[2i]: [0 + 1, 2 + 0]
        let mut t = Tape::new();
        let s = t.leaf(vec![1.0, 0.0, 0.0, 2.0]);
        let k = t.leaf(vec![1.0, 1.0]);
        let y = t.conv1d(s, k, 2, 0).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0]);
        // an asymmetric kernel shows the flip
        let k2 = t.leaf(vec![1.0, 10.0]);
        let y2 = t.conv1d(s, k2, 2, 0).unwrap();
        assert_eq!(t.value(y2), &[10.0, 2.0]);
    }

    #[test]
    fn conv_same_padding_keeps_length() {
        let mut t = Tape::new();
        let s = t.leaf(vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let k = t.leaf(vec![3.0, 2.0, 1.0]);
        let y = t.conv1d(s, k, 1, 1).unwrap();
        assert_eq!(t.value(y), &[0.0, 3.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn conv_shape_mismatch_reports_lengths() {
        let mut t = Tape::new();
        let s = t.leaf(vec![1.0, 2.0]);
        let k = t.leaf(vec![1.0, 2.0, 3.0]);
        let err = t.conv1d(s, k, 1, 0).unwrap_err().to_string();
        assert!(err.contains("kernel length 3") && err.contains("signal length 2"), "{err}");
    }

    #[test]
    fn conv_kernel_gradient_is_sliding_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sig = random_vec(&mut rng, 12);
        let ker = random_vec(&mut rng, 4);
        let mut t = Tape::new();
        let s = t.leaf(sig.clone());
        let k = t.leaf(ker.clone());
        let y = t.conv1d(s, k, 1, 0).unwrap();
        let l = t.sum(y);
        let grads = t.backward(l);
        // d/dk[j] Σ_i Σ_k k[k] s[i+K-1-k] = Σ_i s[i+K-1-j]
        let expected: Vec<f64> = (0..4).map(|j| (0..9).map(|i| sig[i + 3 - j]).sum()).collect();
        let f = |kv: &[f64]| conv1d_values(&sig, kv, 1, 0).unwrap().iter().sum::<f64>();
        let fd = numeric_grad(&f, &ker, 1e-5);
        assert!(rel_err(grads.wrt(k), &expected) < 1e-12);
        assert!(rel_err(grads.wrt(k), &fd) < 1e-6);
    }

    #[test]
    fn ln_and_square_values() {
        let mut t = Tape::new();
        let e = t.leaf(vec![std::f64::consts::E]);
        let l = t.ln(e).unwrap();
        assert!((t.scalar(l) - 1.0).abs() < 1e-15);
        let g = t.backward(l);
        assert!((g.wrt(e)[0] - 1.0 / std::f64::consts::E).abs() < 1e-15);

        let a = t.leaf(vec![3.0, -2.0]);
        let sq = t.square(a);
        assert_eq!(t.value(sq), &[9.0, 4.0]);
    }

    #[test]
    fn ln_of_nonpositive_is_domain_error() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 0.0]);
        assert!(matches!(t.ln(a), Err(Error::Domain(_))));
    }

    #[test]
    fn mul_sum_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let av = random_vec(&mut rng, 16);
        let bv = random_vec(&mut rng, 16);
        let mut t = Tape::new();
        let a = t.leaf(av.clone());
        let b = t.leaf(bv.clone());
        let ab = t.mul(a, b).unwrap();
        let l = t.sum(ab);
        let g = t.backward(l);
        let f = |x: &[f64]| x.iter().zip(&bv).map(|(p, q)| p * q).sum::<f64>();
        let fd = numeric_grad(&f, &av, 1e-5);
        assert!(rel_err(g.wrt(a), &bv) < 1e-15);
        assert!(rel_err(g.wrt(a), &fd) < 1e-6);
    }

    #[test]
    fn softmax_rows_basics() {
        let mut t = Tape::new();
        let a = t.leaf_shaped(vec![0.0, 0.0, 0.0, 0.0, 1000.0, 0.0, 0.0, 0.0], Shape::matrix(2, 4)).unwrap();
        let s = t.softmax_rows(a);
        assert_eq!(&t.value(s)[..4], &[0.25; 4]);
        assert_eq!(t.value(s)[4], 1.0);
        assert!(t.value(s)[5] < 1e-300);
        let ls = t.log_softmax_rows(a);
        assert!(t.value(ls).iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = random_vec(&mut rng, 32);
        let weights = random_vec(&mut rng, 32);
        let build = |x: &[f64]| {
            let mut t = Tape::new();
            let a = t.leaf_shaped(x.to_vec(), Shape::matrix(4, 8)).unwrap();
            let s = t.softmax_rows(a);
            let w = t.mul_const(s, &weights).unwrap();
            let l = t.sum(w);
            (t, a, l)
        };
        let (t, a, l) = build(&logits);
        let g = t.backward(l);
        let f = |x: &[f64]| {
            let (t, _, l) = build(x);
            t.scalar(l)
        };
        let fd = numeric_grad(&f, &logits, 1e-5);
        assert!(rel_err(g.wrt(a), &fd) < 1e-6);
    }

    #[test]
    fn elu_values_and_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(vec![0.0, -50.0, -1.0, 2.0]);
        let e = t.elu(a);
        assert_eq!(t.value(e)[0], 0.0);
        assert!((t.value(e)[1] + 1.0).abs() < 1e-20);
        assert_eq!(t.value(e)[3], 2.0);
        let l = t.sum(e);
        let g = t.backward(l);
        assert!((g.wrt(a)[2] - (-1.0f64).exp()).abs() < 1e-15);
        let fd = (((-1.0f64 + 1e-6).exp_m1()) - ((-1.0f64 - 1e-6).exp_m1())) / 2e-6;
        assert!((g.wrt(a)[2] - fd).abs() / fd < 1e-6);
    }

    #[test]
    fn backward_is_linear_in_cotangent() {
        let mut t = Tape::new();
        let a = t.leaf(vec![0.3, -0.7, 1.2]);
        let k = t.leaf(vec![0.5, -0.25]);
        let c = t.conv1d(a, k, 1, 1).unwrap();
        let e = t.elu(c);
        let cot = [1.0, -2.0, 0.5, 3.0];
        let g1 = t.backward_with(e, &cot);
        let cot2: Vec<f64> = cot.iter().map(|x| 2.0 * x).collect();
        let g2 = t.backward_with(e, &cot2);
        for (x, y) in g1.wrt(a).iter().zip(g2.wrt(a)) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn transpose_round_trip_gradient() {
        let mut t = Tape::new();
        let a = t.leaf_shaped((0..6).map(f64::from).collect(), Shape::matrix(2, 3)).unwrap();
        let tr = t.transpose(a);
        assert_eq!(t.value(tr), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let w = t.mul_const(tr, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let l = t.sum(w);
        let g = t.backward(l);
        assert_eq!(g.wrt(a), &[1.0, 3.0, 5.0, 2.0, 4.0, 6.0]);
    }
}
