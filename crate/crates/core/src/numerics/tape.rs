//! Reverse-mode differentiation over 2-D matrix values.
//!
//! Every value on the tape is viewed as a `rows x cols` matrix (leading
//! dimensions of higher-rank tensors are collapsed). Nodes are appended in
//! evaluation order and `backward` walks them in strict reverse.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::kernels::{self, softmax_in_place};
use super::tensor::{matmul_into, Tensor};
use crate::error::{shape_err, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    Reshape(Var),
    Gather(Var, Vec<usize>),
    Scatter(Vec<(Var, Vec<usize>)>),
    Sum(Var),
    MeanRows(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::AddCol(..) => "add_col",
            Op::MulCol(..) => "mul_col",
            Op::DivCol(..) => "div_col",
            Op::Scale(..) => "scale",
            Op::AddConst(..) => "add_const",
            Op::MulConst(..) => "mul_const",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Gather(..) => "gather",
            Op::Scatter(..) => "scatter",
            Op::Sum(..) => "sum",
            Op::MeanRows(..) => "mean_rows",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation with its own seeded noise source.
pub struct Tape {
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
    noise: Vec<Tensor>,
    fault: Option<String>,
}

/// Gradients indexed by [`Var`]; nodes the loss does not depend on read as zero.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn data(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Tape {
    pub fn new(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise: Vec::new(),
            fault: None,
        }
    }

    /// Test fixture: perturbs the backward rule of every op named `op` by a
    /// factor of 1.1 so gradient checks can be shown to catch a broken rule.
    pub fn corrupt_backward(&mut self, op: &str) {
        self.fault = Some(op.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Names of the recorded ops, in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    /// Standard-normal draws consumed so far, in order of consumption.
    pub fn noise_log(&self) -> &[Tensor] {
        &self.noise
    }

    pub fn sample_normal(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("noise shape");
        self.noise.push(t.clone());
        t
    }

    pub fn sample_uniform(&mut self, n: usize) -> Vec<f64> {
        use rand::Rng;
        (0..n).map(|_| self.rng.random::<f64>()).collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, op.name())?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(v, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn broadcast(&mut self, a: Var, b: Var, by_row: bool, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = (ta.rows(), ta.cols());
        let want = if by_row { c } else { r };
        if tb.len() != want {
            return Err(shape_err(format!(
                "{}: {:?} against operand of {} values",
                op.name(),
                ta.shape(),
                tb.len()
            )));
        }
        let mut out = ta.data().to_vec();
        let bd = tb.data();
        for i in 0..r {
            for j in 0..c {
                let o = &mut out[i * c + j];
                *o = f(*o, if by_row { bd[j] } else { bd[i] });
            }
        }
        let v = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(v, op))
    }

    /// `a + b` with `b` (one row of `cols` values) added to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast(a, b, true, |x, y| x + y, Op::AddRow(a, b))
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast(a, b, true, |x, y| x * y, Op::MulRow(a, b))
    }

    /// `a + b` with `b` (one value per row) added across each row.
    pub fn add_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast(a, b, false, |x, y| x + y, Op::AddCol(a, b))
    }

    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast(a, b, false, |x, y| x * y, Op::MulCol(a, b))
    }

    pub fn div_col(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast(a, b, false, |x, y| x / y, Op::DivCol(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    /// Adds a constant array; `-inf` entries are allowed (masking).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        same_shape(ta, c, "add_const")?;
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(v, Op::AddConst(a)))
    }

    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = self.value(a);
        same_shape(ta, c, "mul_const")?;
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(v, Op::MulConst(a, c.data().to_vec())))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Row-wise softmax; `-inf` entries get probability exactly zero.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            softmax_in_place(v.row_mut(r))?;
        }
        Ok(self.push(v, Op::SoftmaxRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(crate::error::Error::EmptySupport);
            }
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(self.push(v, Op::LogSoftmaxRows(a)))
    }

    /// Per-row layer normalization with a learnable `gamma`, `beta` of `cols` values.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = (tx.rows(), tx.cols());
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        if g.len() != c || b.len() != c {
            return Err(shape_err(format!(
                "layer_norm: width {c}, gamma {}, beta {}",
                g.len(),
                b.len()
            )));
        }
        let mut xhat = Vec::with_capacity(r * c);
        let mut inv_std = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let (h, inv) = kernels::standardize(tx.row(i), eps);
            out.extend(h.iter().enumerate().map(|(j, &v)| v * g[j] + b[j]));
            xhat.extend(h);
            inv_std.push(inv);
        }
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// `out.flat[j] = a.flat[idx[j]]`, shaped as `shape`.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(shape_err(format!("gather index {bad} out of {}", src.len())));
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        let v = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(v, Op::Gather(a, idx)))
    }

    /// Gathers whole rows of a matrix.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let c = self.value(a).cols();
        let idx = rows.iter().flat_map(|&r| (r * c)..(r * c + c)).collect();
        self.gather(a, idx, &[rows.len(), c])
    }

    /// Sub-block `rows x cols` starting at (`r0`, `c0`).
    pub fn block(&mut self, a: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Var> {
        let c = self.value(a).cols();
        let idx = (r0..r0 + rows)
            .flat_map(|r| (c0..c0 + cols).map(move |j| r * c + j))
            .collect();
        self.gather(a, idx, &[rows, cols])
    }

    /// Zero-initialized array of `shape` with `out.flat[idx[j]] += part.flat[j]`
    /// for every part.
    pub fn scatter(&mut self, parts: Vec<(Var, Vec<usize>)>, shape: &[usize]) -> Result<Var> {
        let mut out = Tensor::zeros(shape);
        let n = out.len();
        for (p, idx) in &parts {
            let src = self.value(*p).data();
            if src.len() != idx.len() || idx.iter().any(|&i| i >= n) {
                return Err(shape_err("scatter indices disagree with part or target"));
            }
            let od = out.data_mut();
            for (&i, &x) in idx.iter().zip(src) {
                od[i] += x;
            }
        }
        Ok(self.push(out, Op::Scatter(parts)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Column means, a `1 x cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(t.row(i)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push(Tensor::matrix(1, c, out), Op::MeanRows(a))
    }

    /// Inverted dropout driven by the tape's generator; identity when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let shape = self.value(a).shape().to_vec();
        let u = self.sample_uniform(shape.iter().product());
        let keep = 1.0 / (1.0 - p);
        let mask = u.into_iter().map(|x| if x < p { 0.0 } else { keep }).collect();
        self.mul_const(a, &Tensor::new(shape, mask)?)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0; self.value(loss).len()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let factor = match &self.fault {
                Some(name) if name == node.op.name() => 1.1,
                _ => 1.0,
            };
            let mut acc = |v: Var, contrib: Vec<f64>| {
                let slot = &mut grads[v.0];
                match slot {
                    Some(existing) => existing
                        .iter_mut()
                        .zip(&contrib)
                        .for_each(|(e, c)| *e += factor * c),
                    None => {
                        *slot = Some(if factor == 1.0 {
                            contrib
                        } else {
                            contrib.into_iter().map(|c| c * factor).collect()
                        })
                    }
                }
            };
            self.backward_node(node, &g, &mut acc);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn backward_node(&self, node: &Node, g: &[f64], acc: &mut impl FnMut(Var, Vec<f64>)) {
        let y = node.value.data();
        let unary = |a: Var, f: &dyn Fn(f64, f64, f64) -> f64| -> Vec<f64> {
            let x = self.value(a).data();
            (0..g.len()).map(|j| f(x[j], y[j], g[j])).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = G B^T, dB = A^T G
                let mut da = vec![0.0; m * k];
                matmul_into(g, tb.transpose().data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                matmul_into(ta.transpose().data(), g, &mut db, k, m, n);
                acc(*a, da);
                acc(*b, db);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(xb).map(|(g, b)| g * b).collect());
                acc(*b, g.iter().zip(xa).map(|(g, a)| g * a).collect());
            }
            Op::AddRow(a, b) | Op::AddCol(a, b) | Op::MulRow(a, b) | Op::MulCol(a, b) | Op::DivCol(a, b) => {
                let by_row = matches!(node.op, Op::AddRow(..) | Op::MulRow(..));
                let ta = self.value(*a);
                let bd = self.value(*b).data();
                let (r, c) = (ta.rows(), ta.cols());
                let mut da = vec![0.0; r * c];
                let mut db = vec![0.0; bd.len()];
                for i in 0..r {
                    for j in 0..c {
                        let k = if by_row { j } else { i };
                        let idx = i * c + j;
                        let (x, bv, gv) = (ta.data()[idx], bd[k], g[idx]);
                        match node.op {
                            Op::AddRow(..) | Op::AddCol(..) => {
                                da[idx] = gv;
                                db[k] += gv;
                            }
                            Op::MulRow(..) | Op::MulCol(..) => {
                                da[idx] = gv * bv;
                                db[k] += gv * x;
                            }
                            _ => {
                                da[idx] = gv / bv;
                                db[k] -= gv * x / (bv * bv);
                            }
                        }
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
            Op::AddConst(a) => acc(*a, g.to_vec()),
            Op::MulConst(a, c) => acc(*a, g.iter().zip(c).map(|(g, c)| g * c).collect()),
            Op::Relu(a) => acc(*a, unary(*a, &|x, _, g| if x > 0.0 { g } else { 0.0 })),
            Op::Tanh(a) => acc(*a, unary(*a, &|_, y, g| g * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(*a, unary(*a, &|_, y, g| g * y * (1.0 - y))),
            Op::Softplus(a) => acc(*a, unary(*a, &|x, _, g| g * kernels::sigmoid(x))),
            Op::Abs(a) => acc(*a, unary(*a, &|x, _, g| g * x.signum() * (x != 0.0) as u8 as f64)),
            Op::Square(a) => acc(*a, unary(*a, &|x, _, g| 2.0 * x * g)),
            Op::SoftmaxRows(a) => {
                let c = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for (r, out) in dx.chunks_mut(c).enumerate() {
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let c = node.value.cols();
                let mut dx = vec![0.0; g.len()];
                for (r, out) in dx.chunks_mut(c).enumerate() {
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let gs: f64 = gr.iter().sum();
                    for j in 0..c {
                        out[j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; g.len()];
                let mut dg = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let s = r * c..(r + 1) * c;
                    let (gr, hr) = (&g[s.clone()], &xhat[s.clone()]);
                    let dh: Vec<f64> = gr.iter().zip(gam).map(|(g, w)| g * w).collect();
                    let mean_dh = dh.iter().sum::<f64>() / c as f64;
                    let mean_dhh = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[r * c + j] = inv * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        dg[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                }
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, dbeta);
            }
            Op::Transpose(a) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                acc(*a, Tensor::matrix(r, c, g.to_vec()).transpose().into_data());
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Gather(a, idx) => {
                let mut da = vec![0.0; self.value(*a).len()];
                for (&i, &gv) in idx.iter().zip(g) {
                    da[i] += gv;
                }
                acc(*a, da);
            }
            Op::Scatter(parts) => {
                for (p, idx) in parts {
                    acc(*p, idx.iter().map(|&i| g[i]).collect());
                }
            }
            Op::Sum(a) => acc(*a, vec![g[0]; self.value(*a).len()]),
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j] / r as f64;
                    }
                }
                acc(*a, da);
            }
        }
    }
}
