//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`]. Nodes hold their forward
//! value and enough information to push adjoints back to their inputs, so
//! [`Tape::backward`] is a single reverse sweep over the recorded order.
//!
//! Broadcasting is limited to adding (or multiplying) a row vector over the
//! rows of a matrix. `ln` and `div` floor their inputs at [`LOG_FLOOR`].

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

/// Lower clamp applied to arguments of `ln` and to denominators.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Softmax(Var),
    Ln(Var),
    Exp(Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Powf(Var, f64),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Sum(Var),
    Mean(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after one or more `backward` calls.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient buffer matches value shape")
        })
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.binary(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.binary(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.binary(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Elementwise `a / max(b, LOG_FLOOR)`; `b` must be nonnegative.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        Ok(self.binary(a, b, Op::Div(a, b), |x, y| x / y.max(LOG_FLOOR)))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        Ok(self.binary(a, b, Op::Maximum(a, b), f64::max))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        Ok(self.binary(a, b, Op::Minimum(a, b), f64::min))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} @ {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds a `1 x cols` (or `cols`) vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if self.value(row).len() != c {
            return Err(Error::shape(
                "add_row",
                format!("{r}x{c} + row of {}", self.value(row).len()),
            ));
        }
        let rv = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(c.max(1))
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    /// Multiplies every row of `a` elementwise by a `cols`-vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if self.value(row).len() != c {
            return Err(Error::shape(
                "mul_row",
                format!("{r}x{c} * row of {}", self.value(row).len()),
            ));
        }
        let rv = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(c.max(1))
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(x, y)| x * y))
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(value, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), log_sigmoid)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, c) = self.value(a).dims2();
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let value = Tensor::new(self.value(a).shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Softmax(a), rg)
    }

    /// Natural log with inputs floored at [`LOG_FLOOR`].
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |x| x.max(LOG_FLOOR).ln())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `x^p` for nonnegative `x` (negative inputs are clamped to zero).
    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Powf(a, p), |x| x.max(0.0).powf(p))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = if v.is_empty() {
            0.0
        } else {
            v.data().iter().sum::<f64>() / v.len() as f64
        };
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Flat gather: `out[i] = a[indices[i]]`, reshaped to `shape`.
    /// Slicing, transposition and patch extraction are all expressed this way.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {} values", src.len()),
            ));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Gather(a, indices), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(a).len();
        self.gather(a, (0..n).collect(), shape)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        let idx = (0..c).flat_map(|j| (0..r).map(move |i| i * c + j)).collect();
        self.gather(a, idx, vec![c, r])
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {r}")));
        }
        let idx = rows.iter().flat_map(|&i| (0..c).map(move |j| i * c + j)).collect();
        self.gather(a, idx, vec![rows.len(), c])
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if start > end || end > c {
            return Err(Error::shape("slice_cols", format!("[{start},{end}) of {c}")));
        }
        let w = end - start;
        let idx = (0..r).flat_map(|i| (start..end).map(move |j| i * c + j)).collect();
        self.gather(a, idx, vec![r, w])
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).dims2().0)
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != rows {
                return Err(Error::shape("concat_cols", format!("{r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Reverse sweep from a scalar root. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = self.value(root);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    match &mut self.grads[i] {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(g),
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    self.acc(&mut adj, *a, || g.clone());
                    self.acc(&mut adj, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.acc(&mut adj, *a, || g.clone());
                    self.acc(&mut adj, *b, || g.iter().map(|x| -x).collect());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    self.acc(&mut adj, *a, || zip_map(&g, vb, |g, y| g * y));
                    self.acc(&mut adj, *b, || zip_map(&g, va, |g, x| g * x));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    self.acc(&mut adj, *a, || {
                        zip_map(&g, vb, |g, y| g / y.max(LOG_FLOOR))
                    });
                    self.acc(&mut adj, *b, || {
                        g.iter()
                            .zip(va.iter().zip(vb))
                            .map(|(g, (x, y))| {
                                if *y > LOG_FLOOR {
                                    -g * x / (y * y)
                                } else {
                                    0.0
                                }
                            })
                            .collect()
                    });
                }
                Op::Maximum(a, b) | Op::Minimum(a, b) => {
                    let is_max = matches!(node.op, Op::Maximum(..));
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    // Ties route the gradient to the first operand.
                    let pick_a: Vec<bool> = va
                        .iter()
                        .zip(vb)
                        .map(|(x, y)| if is_max { x >= y } else { x <= y })
                        .collect();
                    self.acc(&mut adj, *a, || {
                        g.iter().zip(&pick_a).map(|(g, &p)| if p { *g } else { 0.0 }).collect()
                    });
                    self.acc(&mut adj, *b, || {
                        g.iter().zip(&pick_a).map(|(g, &p)| if p { 0.0 } else { *g }).collect()
                    });
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2();
                    let (_, n) = self.value(*b).dims2();
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    self.acc(&mut adj, *a, || {
                        // dA = dC * B^T
                        let mut out = vec![0.0; m * k];
                        for i in 0..m {
                            let gr = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let br = &vb[p * n..(p + 1) * n];
                                out[i * k + p] = gr.iter().zip(br).map(|(x, y)| x * y).sum();
                            }
                        }
                        out
                    });
                    self.acc(&mut adj, *b, || {
                        // dB = A^T * dC
                        let mut out = vec![0.0; k * n];
                        for i in 0..m {
                            let gr = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = va[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                let orow = &mut out[p * n..(p + 1) * n];
                                orow.iter_mut().zip(gr).for_each(|(o, gv)| *o += av * gv);
                            }
                        }
                        out
                    });
                }
                Op::AddRow(a, row) => {
                    let c = self.value(*row).len();
                    self.acc(&mut adj, *a, || g.clone());
                    self.acc(&mut adj, *row, || {
                        let mut out = vec![0.0; c];
                        for chunk in g.chunks(c.max(1)) {
                            out.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
                        }
                        out
                    });
                }
                Op::MulRow(a, row) => {
                    let c = self.value(*row).len();
                    let (va, vr) = (self.value(*a).data(), self.value(*row).data());
                    self.acc(&mut adj, *a, || {
                        g.chunks(c.max(1))
                            .flat_map(|chunk| chunk.iter().zip(vr).map(|(x, y)| x * y))
                            .collect()
                    });
                    self.acc(&mut adj, *row, || {
                        let mut out = vec![0.0; c];
                        for (gc, ac) in g.chunks(c.max(1)).zip(va.chunks(c.max(1))) {
                            for j in 0..c {
                                out[j] += gc[j] * ac[j];
                            }
                        }
                        out
                    });
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    self.acc(&mut adj, *a, || g.iter().map(|x| x * f).collect());
                }
                Op::AddScalar(a) => self.acc(&mut adj, *a, || g.clone()),
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    self.acc(&mut adj, *a, || zip_map(&g, y, |g, y| g * y * (1.0 - y)));
                }
                Op::LogSigmoid(a) => {
                    let x = self.value(*a).data();
                    self.acc(&mut adj, *a, || zip_map(&g, x, |g, x| g * sigmoid(-x)));
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let (_, c) = node.value.dims2();
                    self.acc(&mut adj, *a, || {
                        let mut out = Vec::with_capacity(y.len());
                        for (gr, yr) in g.chunks(c.max(1)).zip(y.chunks(c.max(1))) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            out.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot)));
                        }
                        out
                    });
                }
                Op::Ln(a) => {
                    let x = self.value(*a).data();
                    self.acc(&mut adj, *a, || {
                        zip_map(&g, x, |g, x| if x > LOG_FLOOR { g / x } else { 0.0 })
                    });
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    self.acc(&mut adj, *a, || zip_map(&g, y, |g, y| g * y));
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    self.acc(&mut adj, *a, || zip_map(&g, x, |g, x| if x > 0.0 { g } else { 0.0 }));
                }
                Op::Abs(a) => {
                    let x = self.value(*a).data();
                    self.acc(&mut adj, *a, || zip_map(&g, x, |g, x| g * signum0(x)));
                }
                Op::Square(a) => {
                    let x = self.value(*a).data();
                    self.acc(&mut adj, *a, || zip_map(&g, x, |g, x| 2.0 * g * x));
                }
                Op::Powf(a, p) => {
                    let p = *p;
                    let x = self.value(*a).data();
                    self.acc(&mut adj, *a, || {
                        zip_map(&g, x, |g, x| {
                            if x > 0.0 {
                                g * p * x.powf(p - 1.0)
                            } else if p == 1.0 {
                                g
                            } else {
                                0.0
                            }
                        })
                    });
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    self.acc(&mut adj, *a, || vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    let s = if n == 0 { 0.0 } else { g[0] / n as f64 };
                    self.acc(&mut adj, *a, || vec![s; n]);
                }
                Op::Gather(a, idx) => {
                    let n = self.value(*a).len();
                    self.acc(&mut adj, *a, || {
                        let mut out = vec![0.0; n];
                        for (&i, gv) in idx.iter().zip(&g) {
                            out[i] += gv;
                        }
                        out
                    });
                }
                Op::Concat(parts) => {
                    let rows = node.value.dims2().0;
                    let total = node.value.dims2().1;
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).dims2().1;
                        self.acc(&mut adj, p, || {
                            let mut out = Vec::with_capacity(rows * w);
                            for i in 0..rows {
                                out.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                            }
                            out
                        });
                        offset += w;
                    }
                }
            }
        }
        Ok(())
    }

    fn acc(&self, adj: &mut [Option<Vec<f64>>], target: Var, contribution: impl FnOnce() -> Vec<f64>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let c = contribution();
        match &mut adj[target.0] {
            Some(existing) => existing.iter_mut().zip(&c).for_each(|(e, x)| *e += x),
            slot => *slot = Some(c),
        }
    }
}

fn zip_map(g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(x).map(|(&a, &b)| f(a, b)).collect()
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone(), true);
    let out = f(&mut tape, input)?;
    let value = tape.value(out).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("finite-difference base value".into()));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(input)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe.clone());
        let o = f(&mut t, v)?;
        let y = t.value(o).item();
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::NonFinite("finite-difference probe".into()))
        }
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn analytic_values() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let s = t.sigmoid(z);
        assert_eq!(t.value(s).item(), 0.5);
        let pair = t.constant(Tensor::row_vector(vec![0.0, 0.0]));
        let sm = t.softmax(pair);
        assert_eq!(t.value(sm).data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[2, 3], &mut rng);
        let b = random(&[3, 2], &mut rng);
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
        let c = t.matmul(va, vb).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a.at(i, k) * b.at(k, j);
                }
                assert!((t.value(c).at(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(t.matmul(a, a), Err(Error::Shape { .. })));
    }

    #[test]
    fn sum_gives_ones_and_square_gives_double() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), true);
        let s = t.sum(x);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 2.0]);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(&[2, 2]), true);
        let y = t.relu(x);
        assert!(matches!(t.backward(y), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn finite_difference_of_sum_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[5], &mut rng);
        let err = finite_difference_check(
            |t, x| {
                let s = t.square(x);
                Ok(t.sum(s))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");

        let constant = finite_difference_check(|t, _| Ok(t.constant(Tensor::scalar(4.0))), &x, 1e-4).unwrap();
        assert_eq!(constant, 0.0);
    }

    #[test]
    fn non_finite_function_is_reported() {
        let x = Tensor::scalar(1.0);
        let r = finite_difference_check(
            |t, x| {
                let y = t.scale(x, f64::INFINITY);
                Ok(t.sum(y))
            },
            &x,
            1e-4,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    type Prim = fn(&mut Tape, Var, Var) -> Result<Var>;

    #[test]
    fn every_primitive_matches_finite_differences() {
        let prims: Vec<(&str, Prim)> = vec![
            ("add", |t, a, b| t.add(a, b)),
            ("sub", |t, a, b| t.sub(a, b)),
            ("mul", |t, a, b| t.mul(a, b)),
            ("div", |t, a, b| {
                let d = t.square(b);
                let d = t.add_scalar(d, 0.5);
                t.div(a, d)
            }),
            ("matmul", |t, a, b| {
                let bt = t.transpose(b)?;
                t.matmul(a, bt)
            }),
            ("add_row", |t, a, b| {
                let r = t.slice_cols(b, 0, 3)?;
                let r = t.gather_rows(r, &[1])?;
                t.add_row(a, r)
            }),
            ("mul_row", |t, a, b| {
                let r = t.gather_rows(b, &[0])?;
                t.mul_row(a, r)
            }),
            ("sigmoid", |t, a, _| Ok(t.sigmoid(a))),
            ("log_sigmoid", |t, a, _| Ok(t.log_sigmoid(a))),
            ("softmax", |t, a, _| Ok(t.softmax(a))),
            ("ln", |t, a, _| {
                let s = t.square(a);
                let s = t.add_scalar(s, 0.1);
                Ok(t.ln(s))
            }),
            ("exp", |t, a, _| Ok(t.exp(a))),
            ("relu", |t, a, _| Ok(t.relu(a))),
            ("abs", |t, a, _| Ok(t.abs(a))),
            ("square", |t, a, _| Ok(t.square(a))),
            ("powf", |t, a, _| {
                let s = t.sigmoid(a);
                Ok(t.powf(s, 2.5))
            }),
            ("maximum", |t, a, b| t.maximum(a, b)),
            ("minimum", |t, a, b| t.minimum(a, b)),
            ("mean", |t, a, _| Ok(t.mean(a))),
            ("gather", |t, a, _| t.gather(a, vec![5, 0, 0, 3], vec![2, 2])),
            ("concat", |t, a, b| t.concat_cols(&[a, b, a])),
        ];
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = random(&[2, 3], &mut rng);
            let x = random(&[2, 3], &mut rng);
            // Weighting by a fixed random matrix makes every output coordinate matter.
            let w = random(&[2, 3], &mut rng);
            for (name, prim) in &prims {
                let err = finite_difference_check(
                    |t, x| {
                        let bv = t.leaf(b.clone(), false);
                        let y = prim(t, x, bv)?;
                        let n = t.value(y).len();
                        let wv = t.constant(Tensor::new(
                            t.value(y).shape().to_vec(),
                            w.data().iter().cycle().take(n).copied().collect(),
                        )?);
                        let p = t.mul(y, wv)?;
                        Ok(t.sum(p))
                    },
                    &x,
                    1e-4,
                )
                .unwrap();
                assert!(err < 1e-3, "{name} seed {seed}: {err}");
            }
        }
    }

    #[test]
    fn reused_leaf_accumulates_both_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[3, 3], &mut rng);
        let err = finite_difference_check(
            |t, x| {
                let a = t.matmul(x, x)?;
                let b = t.sigmoid(x);
                let c = t.mul(a, b)?;
                Ok(t.sum(c))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut t = Tape::new();
            let a = t.constant(random(&[4, 4], &mut rng));
            let b = t.matmul(a, a).unwrap();
            let c = t.softmax(b);
            t.value(c).clone()
        };
        assert_eq!(run(), run());
    }
}
