//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! replays the nodes in reverse order and accumulates vector-Jacobian
//! products into the leaves that were created with `requires_grad`.
//! Constant leaves never receive a gradient entry.

use std::collections::HashMap;

use super::tensor::{gemm, log_sum_exp, softmax_in_place, Tensor};
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        x: Var,
        bias: Var,
    },
    Gelu(Var),
    /// Masked entries are zero, so one backward rule serves both forms.
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    MaskedLogSumExp {
        x: Var,
        mask: Vec<bool>,
        weights: Vec<f64>,
    },
    Sum(Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to the trainable leaves.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Gradient for `var`, or zeros when the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor {
        self.grads
            .get(&var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Records a leaf, trainable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad())
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn matrix_dims(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(var) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            0.0,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a, b]);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims(x, "add_bias")?;
        if self.value(bias).numel() != n {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut value = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in value.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&b).for_each(|(v, bb)| *v += bb);
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias { x, bias }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Row softmax where row `i` only sees columns `0..=i`.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (_, n) = self.matrix_dims(x, "softmax")?;
        let mut value = self.value(x).clone();
        for (i, row) in value.data_mut().chunks_mut(n).enumerate() {
            if causal {
                let visible = (i + 1).min(n);
                softmax_in_place(&mut row[..visible]);
                row[visible..].iter_mut().for_each(|v| *v = 0.0);
            } else {
                softmax_in_place(row);
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "layer_norm")?;
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if start + len > n || len == 0 {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::matrix(m, len, out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != m {
                return Err(Error::dim(
                    "concat_cols",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::matrix(m, total, out)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != n {
                return Err(Error::dim(
                    "concat_rows",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::matrix(rows, n, out)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, n) = self.matrix_dims(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= r {
                return Err(Error::dim("gather_rows", self.shape(table), &[id]));
            }
            out.extend_from_slice(&src[id * n..(id + 1) * n]);
        }
        let rg = self.any_grad(&[table]);
        let value = Tensor::matrix(ids.len(), n, out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims(x, "normalize_rows")?;
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.rows());
        for (i, row) in value.data_mut().chunks_mut(n).enumerate() {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm == 0.0 {
                return Err(Error::DegenerateVector(format!("row {i} has zero norm")));
            }
            row.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::NormalizeRows { x, norms }, rg))
    }

    /// Sum over rows of `-log softmax(logits_i)[targets_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::dim(
                "cross_entropy",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(n).zip(targets) {
            if t >= n {
                return Err(Error::dim("cross_entropy", &[m, n], &[t]));
            }
            let lse = log_sum_exp(row.iter().copied());
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Per-row `log Σ_{j : mask[i][j]} exp(x[i][j])`, returned as an `m x 1`
    /// column.
    pub fn masked_log_sum_exp(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "masked_log_sum_exp")?;
        if mask.len() != m * n {
            return Err(Error::dim("masked_log_sum_exp", &[m, n], &[mask.len()]));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(m);
        let mut weights = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mrow = &mask[i * n..(i + 1) * n];
            let selected = row.iter().zip(mrow).filter(|(_, &k)| k).map(|(&v, _)| v);
            let lse = log_sum_exp(selected);
            if !lse.is_finite() {
                return Err(Error::Contract(format!("row {i} has an empty mask")));
            }
            for j in 0..n {
                if mrow[j] {
                    weights[i * n + j] = (row[j] - lse).exp();
                }
            }
            out.push(lse);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::matrix(m, 1, out)?,
            Op::MaskedLogSumExp {
                x,
                mask: mask.to_vec(),
                weights,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[idx];
            if let (Some(g), Op::Leaf, true) = (g, &node.op, node.requires_grad) {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                out.grads.insert(Var(idx), t);
            }
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = dims2(self.value(*a));
                let n = node.value.cols();
                if self.requires_grad(*a) {
                    // dA = G · op(B)ᵀ
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        false,
                        self.value(*b).data(),
                        !*trans_b,
                        &mut da,
                        0.0,
                    );
                    accumulate(grads, *a, &da);
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data();
                    if *trans_b {
                        // B is n x k: dB = Gᵀ · A
                        let mut db = vec![0.0; n * k];
                        gemm(n, m, k, g, true, av, false, &mut db, 0.0);
                        accumulate(grads, *b, &db);
                    } else {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, av, true, g, false, &mut db, 0.0);
                        accumulate(grads, *b, &db);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g);
                }
                if self.requires_grad(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.requires_grad(*a) {
                    accumulate(grads, *a, g);
                }
                if self.requires_grad(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let d: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, &d);
                }
                if self.requires_grad(*b) {
                    let d: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::Scale(x, f) => {
                let d: Vec<f64> = g.iter().map(|v| v * f).collect();
                accumulate(grads, *x, &d);
            }
            Op::AddBias { x, bias } => {
                if self.requires_grad(*x) {
                    accumulate(grads, *x, g);
                }
                if self.requires_grad(*bias) {
                    let n = node.value.cols();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, *bias, &db);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let d: Vec<f64> = g.iter().zip(xv).map(|(gi, &v)| gi * gelu_grad(v)).collect();
                accumulate(grads, *x, &d);
            }
            Op::Softmax { x } => {
                let n = node.value.cols();
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(d.chunks_mut(n)) {
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let gv = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let mut d = vec![0.0; g.len()];
                    for i in 0..inv_std.len() {
                        let gr = &g[i * n..(i + 1) * n];
                        let xr = &xhat[i * n..(i + 1) * n];
                        let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx =
                            dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            d[i * n + j] = inv_std[i] * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, &d);
                }
                if self.requires_grad(*gain) {
                    let mut dg = vec![0.0; n];
                    for (gr, xr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    accumulate(grads, *gain, &dg);
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![0.0; n];
                    for gr in g.chunks(n) {
                        db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                    }
                    accumulate(grads, *bias, &db);
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = dims2(self.value(*x));
                let w = node.value.cols();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                accumulate(grads, *x, &d);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut d = Vec::with_capacity(m * w);
                        for i in 0..m {
                            d.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(grads, p, &d);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.requires_grad(p) {
                        accumulate(grads, p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::GatherRows { table, ids } => {
                let n = node.value.cols();
                let mut d = vec![0.0; self.value(*table).numel()];
                for (row, &id) in g.chunks(n).zip(ids) {
                    d[id * n..(id + 1) * n]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(a, b)| *a += b);
                }
                accumulate(grads, *table, &d);
            }
            Op::NormalizeRows { x, norms } => {
                let n = node.value.cols();
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for (i, &nrm) in norms.iter().enumerate() {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        d[i * n + j] = (gr[j] - yr[j] * s) / nrm;
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = self.value(*logits).cols();
                let mut d: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * n + t] -= g[0];
                }
                accumulate(grads, *logits, &d);
            }
            Op::MaskedLogSumExp { x, mask, weights } => {
                let n = self.value(*x).cols();
                let mut d = vec![0.0; weights.len()];
                for (i, gi) in g.iter().enumerate() {
                    for j in 0..n {
                        if mask[i * n + j] {
                            d[i * n + j] = gi * weights[i * n + j];
                        }
                    }
                }
                accumulate(grads, *x, &d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; self.value(*x).numel()];
                accumulate(grads, *x, &d);
            }
            Op::SumSquares(x) => {
                let d: Vec<f64> = self
                    .value(*x)
                    .data()
                    .iter()
                    .map(|v| 2.0 * v * g[0])
                    .collect();
                accumulate(grads, *x, &d);
            }
        }
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, delta: &[f64]) {
    match &mut grads[var.0] {
        Some(existing) => existing.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn squared_norm_gradient_is_twice_x() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.5]));
        let loss = tape.sum_squares(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 7.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient_entry() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let x = tape.param(Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap());
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum_squares(y);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(w).is_none());
        assert!(g.get(x).is_some());
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 2, vec![3.0, 100.0, 1.0, 1.0]).unwrap());
        let y = tape.causal_softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn empty_mask_row_is_a_contract_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        assert!(tape.masked_log_sum_exp(x, &[false, false]).is_err());
    }
}
