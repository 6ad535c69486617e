//! Reverse-mode differentiation over 2-D `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Rows are time
//! steps and columns channels throughout the model, so 2-D is all we need.
//! Trainable tensors live in a [`ParamStore`] and enter the tape by
//! reference; [`Tape::backward`] returns gradients for every node, from which
//! [`Gradients::param_grads`] extracts the per-parameter part.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{concatenate, s, Array2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors.
///
/// Values are kept exactly representable as `f32` (see [`ParamStore::round_to_f32`])
/// so checkpoints, which store `f32`, reproduce them bit for bit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNt(Var, Var),
    Add(Var, Var),
    /// Adds a `1 × n` row to every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    MulConst(Var, Arc<Array2<f64>>),
    /// Multiplies row `i` by `w[i]`.
    ScaleRows(Var, Arc<Vec<f64>>),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    CausalUnfold(Var, usize),
}

struct Node {
    op: Op,
    /// Empty for parameters, whose value lives in the store.
    value: Array2<f64>,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax where `mask[[i, j]] == false` removes key `j` for row `i`.
///
/// Masked entries get weight exactly zero. A row without any visible entry is
/// an error.
pub fn masked_softmax(x: &Array2<f64>, mask: Option<&Array2<bool>>) -> Result<Array2<f64>> {
    if let Some(m) = mask {
        if m.dim() != x.dim() {
            return Err(Error::shape("attention mask", x.dim(), m.dim()));
        }
    }
    let mut out = Array2::zeros(x.dim());
    for (i, (row, mut dst)) in x.rows().into_iter().zip(out.rows_mut()).enumerate() {
        let visible = |j: usize| mask.is_none_or(|m| m[[i, j]]);
        if !(0..row.len()).any(visible) {
            return Err(Error::NoAttendableKey { row: i });
        }
        // NaN scores propagate instead of being skipped by `f64::max`
        let max = row
            .iter()
            .enumerate()
            .filter(|(j, _)| visible(*j))
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, |a, v| {
                if v.is_nan() || a.is_nan() {
                    f64::NAN
                } else {
                    a.max(v)
                }
            });
        let mut sum = 0.0;
        for (j, (&v, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
            if visible(j) {
                *d = (v - max).exp();
                sum += *d;
            }
        }
        dst /= sum;
    }
    Ok(out)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match self.nodes[v.0].op {
            Op::Param(id) => self.params.get(id),
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Parameters referenced so far, in first-use order.
    pub fn params_used(&self) -> Vec<ParamId> {
        let mut ids: Vec<(Var, ParamId)> = self.param_vars.iter().map(|(p, v)| (*v, *p)).collect();
        ids.sort_by_key(|(v, _)| v.0);
        ids.into_iter().map(|(_, p)| p).collect()
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(Op::Param(id), Array2::zeros((0, 0)));
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let value = self.value(a).dot(self.value(b));
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(Error::shape("matmul_nt", sa, sb));
        }
        let value = self.value(a).dot(&self.value(b).t());
        Ok(self.push(Op::MatMulNt(a, b), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("add", sa, sb));
        }
        let value = self.value(a) + self.value(b);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(Error::shape("add_row", (1, sa.1), sr));
        }
        let value = self.value(a) + self.value(row);
        Ok(self.push(Op::AddRow(a, row), value))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.push(Op::Scale(a, s), value)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("mul", sa, sb));
        }
        let value = self.value(a) * self.value(b);
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn mul_const(&mut self, a: Var, m: Arc<Array2<f64>>) -> Result<Var> {
        if self.shape(a) != m.dim() {
            return Err(Error::shape("mul_const", self.shape(a), m.dim()));
        }
        let value = self.value(a) * &*m;
        Ok(self.push(Op::MulConst(a, m), value))
    }

    pub fn scale_rows(&mut self, a: Var, w: Arc<Vec<f64>>) -> Result<Var> {
        if self.shape(a).0 != w.len() {
            return Err(Error::shape("scale_rows", self.shape(a).0, w.len()));
        }
        let mut value = self.value(a).clone();
        for (mut row, &k) in value.rows_mut().into_iter().zip(w.iter()) {
            row *= k;
        }
        Ok(self.push(Op::ScaleRows(a, w), value))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        self.push(Op::Gelu(a), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn softmax(&mut self, a: Var, mask: Option<&Array2<bool>>) -> Result<Var> {
        let value = masked_softmax(self.value(a), mask)?;
        Ok(self.push(Op::Softmax(a), value))
    }

    /// Per-row normalisation with learned `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, n) = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != (1, n) {
                return Err(Error::shape("layer_norm", (1, n), self.shape(p)));
            }
        }
        let xv = self.value(x);
        let mut xhat = Array2::zeros((rows, n));
        let mut inv_std = Vec::with_capacity(rows);
        for (row, mut dst) in xv.rows().into_iter().zip(xhat.rows_mut()) {
            let mean = row.sum() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            dst.iter_mut()
                .zip(row)
                .for_each(|(d, v)| *d = (v - mean) * inv);
            inv_std.push(inv);
        }
        let value = &xhat * self.value(gain) + self.value(bias);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            value,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(0), &views)
            .map_err(|e| Error::shape("concat_rows", "equal column counts", e.to_string()))?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views)
            .map_err(|e| Error::shape("concat_cols", "equal row counts", e.to_string()))?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        if start > end || end > self.shape(a).0 {
            return Err(Error::shape("slice_rows", self.shape(a), (start, end)));
        }
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        Ok(self.push(Op::SliceRows(a, start, end), value))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        if start > end || end > self.shape(a).1 {
            return Err(Error::shape("slice_cols", self.shape(a), (start, end)));
        }
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        Ok(self.push(Op::SliceCols(a, start, end), value))
    }

    /// Row `t` of the result is `[x[t], x[t-1], .., x[t-k+1]]`, with rows before
    /// the start taken as zero. A matmul with a `(k·n) × m` kernel then gives a
    /// causal 1-D convolution.
    pub fn causal_unfold(&mut self, a: Var, k: usize) -> Var {
        let x = self.value(a);
        let (rows, n) = x.dim();
        let mut value = Array2::zeros((rows, k * n));
        for t in 0..rows {
            for j in 0..k.min(t + 1) {
                value
                    .slice_mut(s![t, j * n..(j + 1) * n])
                    .assign(&x.row(t - j));
            }
        }
        self.push(Op::CausalUnfold(a, k), value)
    }

    /// Back-propagates from `seeds`, each a node with its upstream gradient.
    pub fn backward(&self, seeds: &[(Var, Array2<f64>)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.dim() != self.shape(*v) {
                return Err(Error::shape("backward seed", self.shape(*v), g.dim()));
            }
            accumulate(&mut grads, *v, g.clone());
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn backprop_node(&self, i: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.dot(&self.value(*b).t()));
                accumulate(grads, *b, self.value(*a).t().dot(g));
            }
            Op::MatMulNt(a, b) => {
                accumulate(grads, *a, g.dot(self.value(*b)));
                accumulate(grads, *b, g.t().dot(self.value(*a)));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, r) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g * *s),
            Op::Mul(a, b) => {
                accumulate(grads, *a, g * self.value(*b));
                accumulate(grads, *b, g * self.value(*a));
            }
            Op::MulConst(a, m) => accumulate(grads, *a, g * &**m),
            Op::ScaleRows(a, w) => {
                let mut ga = g.clone();
                for (mut row, &k) in ga.rows_mut().into_iter().zip(w.iter()) {
                    row *= k;
                }
                accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let mut ga = self.value(*a).mapv(gelu_grad);
                ga *= g;
                accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                accumulate(grads, *a, g * &y.mapv(|v| v * (1.0 - v)));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                accumulate(grads, *a, g * &y.mapv(|v| 1.0 - v * v));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let mut ga = Array2::zeros(y.dim());
                for ((yr, gr), mut dst) in y.rows().into_iter().zip(g.rows()).zip(ga.rows_mut()) {
                    let dot = yr.dot(&gr);
                    dst.iter_mut()
                        .zip(yr.iter().zip(gr.iter()))
                        .for_each(|(d, (&y, &g))| *d = y * (g - dot));
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = xhat.ncols() as f64;
                accumulate(
                    grads,
                    *gain,
                    (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
                accumulate(grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * self.value(*gain);
                let mut gx = Array2::zeros(xhat.dim());
                for (r, mut dst) in gx.rows_mut().into_iter().enumerate() {
                    let d = dxhat.row(r);
                    let xh = xhat.row(r);
                    let sum_d = d.sum();
                    let sum_dx = d.dot(&xh);
                    let k = inv_std[r] / n;
                    dst.iter_mut()
                        .zip(d.iter().zip(xh.iter()))
                        .for_each(|(o, (&d, &xh))| *o = k * (n * d - sum_d - xh * sum_dx));
                }
                accumulate(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    accumulate(grads, p, g.slice(s![start..start + rows, ..]).to_owned());
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let cols = self.shape(p).1;
                    accumulate(grads, p, g.slice(s![.., start..start + cols]).to_owned());
                    start += cols;
                }
            }
            Op::SliceRows(a, start, end) => {
                let mut ga = Array2::zeros(self.shape(*a));
                ga.slice_mut(s![*start..*end, ..]).assign(g);
                accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start, end) => {
                let mut ga = Array2::zeros(self.shape(*a));
                ga.slice_mut(s![.., *start..*end]).assign(g);
                accumulate(grads, *a, ga);
            }
            Op::CausalUnfold(a, k) => {
                let (rows, n) = self.shape(*a);
                let mut ga = Array2::zeros((rows, n));
                for t in 0..rows {
                    for j in 0..(*k).min(t + 1) {
                        let mut dst = ga.row_mut(t - j);
                        dst += &g.slice(s![t, j * n..(j + 1) * n]);
                    }
                }
                accumulate(grads, *a, ga);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of a node, `None` when the seeds do not depend on it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.param_vars.get(&id).and_then(|v| self.get(*v))
    }

    /// One gradient per parameter of `store`, zero where unused.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Array2<f64>> {
        store
            .ids()
            .map(|id| {
                self.param(id)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(store.get(id).dim()))
            })
            .collect()
    }
}
