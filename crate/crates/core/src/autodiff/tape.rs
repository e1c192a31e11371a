use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels;
use super::tensor::{dims2, Tensor};
use super::TensorError;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Identifies a trainable parameter: the owning store plus its slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub store: u64,
    pub index: usize,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    idx: u32,
    tape: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
    KlTemperature,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamKey),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var, broadcast: bool },
    Mul { a: Var, b: Var },
    ScaleBy { a: Var, s: Var },
    Scale { a: Var, c: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { a: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    MaskedFill { a: Var, mask: Vec<bool> },
    MeanRows(Var),
    Sum(Var),
    Reshape(Var),
    CrossEntropy { logits: Var, target: Vec<f64>, probs: Vec<f64>, rows: usize },
    Mse { a: Var, b: Var },
    KlTemperature { student: Var, teacher_probs: Vec<f64>, student_probs: Vec<f64>, tau: f64, rows: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients of one backward pass, keyed by parameter.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    map: HashMap<ParamKey, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, key: ParamKey) -> Option<&[f64]> {
        self.map.get(&key).map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = &ParamKey> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Dynamic reverse-mode tape. Nodes are appended in evaluation order, so the
/// node list is already a topological order and backward is a reverse scan.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    params: HashMap<ParamKey, Var>,
    frozen: HashMap<ParamKey, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
            frozen: HashMap::new(),
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<&Node, TensorError> {
        if v.tape != self.id {
            return Err(TensorError::ForeignVar { expected: self.id, found: v.tape });
        }
        Ok(&self.nodes[v.idx as usize])
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var { idx, tape: self.id }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx as usize].requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx as usize].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx as usize].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.idx as usize];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape invariant")
    }

    /// Records a constant. Constants never receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let (shape, data) = t.into_parts();
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn constant_raw(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, TensorError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(t))
    }

    /// Records a gradient-tracked leaf for parameter `key`. Repeated calls with
    /// the same key return the same node.
    pub fn param(&mut self, key: ParamKey, t: &Tensor) -> Var {
        if let Some(v) = self.params.get(&key) {
            return *v;
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(key), true);
        self.params.insert(key, v);
        v
    }

    /// Records a parameter as a constant, cached like [`Tape::param`].
    pub fn frozen_param(&mut self, key: ParamKey, t: &Tensor) -> Var {
        if let Some(v) = self.frozen.get(&key) {
            return *v;
        }
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false);
        self.frozen.insert(key, v);
        v
    }

    /// Copies a node's value into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var, TensorError> {
        let n = self.check(v)?;
        let (shape, value) = (n.shape.clone(), n.value.clone());
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let n = self.check(v)?;
        dims2(&n.shape).ok_or_else(|| TensorError::Shape {
            op,
            detail: format!("expected rank 1 or 2, got {:?}", n.shape),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", &[a, b]));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b: false }, rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.mat(a, "matmul_t")?;
        let (n, k2) = self.mat(b, "matmul_t")?;
        if k != k2 {
            return Err(self.mismatch("matmul_t", &[a, b]));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b: true }, rg))
    }

    /// Elementwise sum. `b` may also be a row vector added to every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.check(a)?.shape.clone();
        let sb = self.check(b)?.shape.clone();
        let rg = self.rg(&[a, b]);
        if sa == sb {
            let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
            return Ok(self.push(sa, out, Op::Add { a, b, broadcast: false }, rg));
        }
        let (rows, cols) = dims2(&sa).ok_or_else(|| self.mismatch("add", &[a, b]))?;
        let row_like = matches!(sb.as_slice(), [n] if *n == cols) || matches!(sb.as_slice(), [1, n] if *n == cols);
        if !row_like {
            return Err(self.mismatch("add", &[a, b]));
        }
        let bv = self.value(b);
        let mut out = self.value(a).to_vec();
        for r in 0..rows {
            for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(bv) {
                *o += x;
            }
        }
        Ok(self.push(sa, out, Op::Add { a, b, broadcast: true }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.check(a)?.shape != self.check(b)?.shape {
            return Err(self.mismatch("mul", &[a, b]));
        }
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b }, rg))
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        if self.check(s)?.value.len() != 1 {
            return Err(self.mismatch("scale_by", &[a, s]));
        }
        let c = self.value(s)[0];
        let out: Vec<f64> = self.check(a)?.value.iter().map(|x| x * c).collect();
        let rg = self.rg(&[a, s]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::ScaleBy { a, s }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let n = self.check(a)?;
        let out: Vec<f64> = n.value.iter().map(|x| x * c).collect();
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        Ok(self.push(shape, out, Op::Scale { a, c }, rg))
    }

    /// Concatenation along axis 0 (stacking rows) or axis 1 (joining columns).
    /// Rank-1 inputs count as single rows.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        if parts.is_empty() || axis > 1 {
            return Err(TensorError::Shape { op: "concat", detail: format!("{} parts, axis {}", parts.len(), axis) });
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|p| self.mat(*p, "concat")).collect::<Result<_, _>>()?;
        let rg = self.rg(parts);
        if axis == 0 {
            let cols = dims[0].1;
            if dims.iter().any(|d| d.1 != cols) {
                return Err(self.mismatch("concat", parts));
            }
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for p in parts {
                out.extend_from_slice(self.value(*p));
            }
            Ok(self.push(vec![rows, cols], out, Op::Concat { parts: parts.to_vec(), axis }, rg))
        } else {
            let rows = dims[0].0;
            if dims.iter().any(|d| d.0 != rows) {
                return Err(self.mismatch("concat", parts));
            }
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for (p, d) in parts.iter().zip(&dims) {
                    out.extend_from_slice(&self.value(*p)[r * d.1..(r + 1) * d.1]);
                }
            }
            Ok(self.push(vec![rows, cols], out, Op::Concat { parts: parts.to_vec(), axis }, rg))
        }
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (rows, cols) = self.mat(a, "slice_cols")?;
        if start + len > cols || len == 0 {
            return Err(TensorError::Shape {
                op: "slice_cols",
                detail: format!("columns {}..{} of {:?}", start, start + len, self.shape(a)),
            });
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { a, start }, rg))
    }

    /// Gathers rows of a 2-D table.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (rows, cols) = self.mat(table, "embed_lookup")?;
        if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Shape {
                op: "embed_lookup",
                detail: format!("index {} out of range for table {:?}", bad, self.shape(table)),
            });
        }
        let v = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&v[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(vec![ids.len(), cols], out, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.check(a)?;
        let out: Vec<f64> = n.value.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, out, Op::Relu(a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.check(a)?;
        let out: Vec<f64> = n.value.iter().map(|&x| kernels::sigmoid(x)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, out, Op::Sigmoid(a), rg))
    }

    /// `ln(1 + eˣ)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.check(a)?;
        let out: Vec<f64> = n.value.iter().map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p()).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, out, Op::Softplus(a), rg))
    }

    /// Replaces entries where `mask` is true with `fill`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var, TensorError> {
        let n = self.check(a)?;
        if mask.len() != n.value.len() {
            return Err(TensorError::Shape {
                op: "masked_fill",
                detail: format!("mask of {} for shape {:?}", mask.len(), n.shape),
            });
        }
        let out: Vec<f64> = n.value.iter().zip(mask).map(|(&x, &m)| if m { fill } else { x }).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, out, Op::MaskedFill { a, mask: mask.to_vec() }, rg))
    }

    /// Softmax along the last axis. Entries equal to −∞ get probability 0; a
    /// row with no finite entry is an error.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.check(a)?;
        let cols = *n.shape.last().ok_or_else(|| TensorError::Shape { op: "softmax", detail: "rank 0".into() })?;
        let mut out = n.value.clone();
        for (r, row) in out.chunks_mut(cols).enumerate() {
            if !kernels::softmax_in_place(row) {
                return Err(TensorError::MaskedRow { op: "softmax", row: r });
            }
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        Ok(self.push(shape, out, Op::Softmax(a), rg))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let (rows, cols) = self.mat(x, "layer_norm")?;
        if self.check(gain)?.value.len() != cols || self.check(bias)?.value.len() != cols {
            return Err(self.mismatch("layer_norm", &[x, gain, bias]));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Column means of a matrix, as a rank-1 tensor.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (rows, cols) = self.mat(a, "mean_rows")?;
        let v = self.value(a);
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += v[r * cols + c];
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![cols], out, Op::MeanRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let n = self.check(a)?;
        let s = n.value.iter().sum();
        let rg = n.requires_grad;
        Ok(self.push(vec![1], vec![s], Op::Sum(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let n = self.check(a)?;
        if shape.iter().product::<usize>() != n.value.len() {
            return Err(TensorError::Shape { op: "reshape", detail: format!("{:?} -> {:?}", n.shape, shape) });
        }
        let (value, rg) = (n.value.clone(), n.requires_grad);
        Ok(self.push(shape, value, Op::Reshape(a), rg))
    }

    /// Mean over rows of `−Σ target · log softmax(logits)`. The target is data
    /// and receives no gradient.
    pub fn cross_entropy(&mut self, logits: Var, target: &[f64]) -> Result<Var, TensorError> {
        let (rows, cols) = self.mat(logits, "cross_entropy")?;
        if target.len() != rows * cols {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                detail: format!("logits {:?} vs target of {}", self.shape(logits), target.len()),
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &self.value(logits)[r * cols..(r + 1) * cols];
            let lse = kernels::log_sum_exp(row).ok_or(TensorError::MaskedRow { op: "cross_entropy", row: r })?;
            for c in 0..cols {
                let t = target[r * cols + c];
                if t != 0.0 {
                    loss -= t * (row[c] - lse);
                }
            }
            kernels::softmax_in_place(&mut probs[r * cols..(r + 1) * cols]);
        }
        loss /= rows as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { logits, target: target.to_vec(), probs, rows }, rg))
    }

    /// Mean squared error; both sides receive gradients.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.check(a)?.shape != self.check(b)?.shape {
            return Err(self.mismatch("mse", &[a, b]));
        }
        let n = self.value(a).len() as f64;
        let loss = self.value(a).iter().zip(self.value(b)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![1], vec![loss], Op::Mse { a, b }, rg))
    }

    /// `τ² · KL(softmax(teacher/τ) ‖ softmax(student/τ))`, averaged over rows.
    /// The teacher side is read as data and never receives gradient.
    pub fn kl_temperature(&mut self, student: Var, teacher: Var, tau: f64) -> Result<Var, TensorError> {
        if !(tau > 0.0) {
            return Err(TensorError::Invalid(format!("kl_temperature: τ must be positive, got {}", tau)));
        }
        if self.check(student)?.shape != self.check(teacher)?.shape {
            return Err(self.mismatch("kl_temperature", &[student, teacher]));
        }
        let (rows, cols) = self.mat(student, "kl_temperature")?;
        let mut sp: Vec<f64> = self.value(student).iter().map(|x| x / tau).collect();
        let mut tp: Vec<f64> = self.value(teacher).iter().map(|x| x / tau).collect();
        let mut loss = 0.0;
        for r in 0..rows {
            let s_row = &sp[r * cols..(r + 1) * cols];
            let t_row = &tp[r * cols..(r + 1) * cols];
            let s_lse = kernels::log_sum_exp(s_row).ok_or(TensorError::MaskedRow { op: "kl_temperature", row: r })?;
            let t_lse = kernels::log_sum_exp(t_row).ok_or(TensorError::MaskedRow { op: "kl_temperature", row: r })?;
            for c in 0..cols {
                let lt = t_row[c] - t_lse;
                if lt.is_finite() {
                    let pt = lt.exp();
                    loss += pt * (lt - (s_row[c] - s_lse));
                }
            }
            kernels::softmax_in_place(&mut sp[r * cols..(r + 1) * cols]);
            kernels::softmax_in_place(&mut tp[r * cols..(r + 1) * cols]);
        }
        // KL is non-negative; clamp rounding residue at identical inputs.
        let loss = (loss * tau * tau / rows as f64).max(0.0);
        let rg = self.rg(&[student]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::KlTemperature { student, teacher_probs: tp, student_probs: sp, tau, rows },
            rg,
        ))
    }

    pub fn loss(&mut self, kind: LossKind, prediction: Var, target: Var, tau: f64) -> Result<Var, TensorError> {
        match kind {
            LossKind::CrossEntropy => {
                let t = self.check(target)?.value.clone();
                self.cross_entropy(prediction, &t)
            }
            LossKind::Mse => self.mse(prediction, target),
            LossKind::KlTemperature => self.kl_temperature(prediction, target, tau),
        }
    }

    fn mismatch(&self, op: &'static str, vars: &[Var]) -> TensorError {
        let shapes: Vec<Vec<usize>> = vars
            .iter()
            .map(|v| self.nodes.get(v.idx as usize).map(|n| n.shape.clone()).unwrap_or_default())
            .collect();
        TensorError::Shape { op, detail: format!("incompatible shapes {:?}", shapes) }
    }

    /// Reverse pass from a scalar loss. Parameters unreachable from the loss
    /// are absent from the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let n = self.check(loss)?;
        if n.value.len() != 1 {
            return Err(TensorError::NonScalar(n.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.index() + 1, || None);
        grads[loss.index()] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.index()).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let send = |v: Var, delta: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !self.nodes[v.index()].requires_grad {
                    return;
                }
                match &mut grads[v.index()] {
                    Some(acc) => acc.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(key) => {
                    match out.map.get_mut(key) {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                        None => {
                            out.map.insert(*key, g);
                        }
                    }
                }
                Op::MatMul { a, b, trans_b } => {
                    let (m, k) = dims2(&self.nodes[a.index()].shape).unwrap();
                    let av = &self.nodes[a.index()].value;
                    let bv = &self.nodes[b.index()].value;
                    let n_out = dims2(&node.shape).unwrap().1;
                    if self.nodes[a.index()].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        if *trans_b {
                            kernels::mm(&g, bv, &mut ga, m, n_out, k);
                        } else {
                            kernels::mm_nt(&g, bv, &mut ga, m, n_out, k);
                        }
                        send(*a, ga, &mut grads);
                    }
                    if self.nodes[b.index()].requires_grad {
                        let mut gb = vec![0.0; bv.len()];
                        if *trans_b {
                            // C = A Bᵀ: dB = Gᵀ A
                            kernels::mm_tn(&g, av, &mut gb, m, n_out, k);
                        } else {
                            // C = A B: dB = Aᵀ G
                            kernels::mm_tn(av, &g, &mut gb, m, k, n_out);
                        }
                        send(*b, gb, &mut grads);
                    }
                }
                Op::Add { a, b, broadcast } => {
                    if *broadcast {
                        let cols = self.nodes[b.index()].value.len();
                        let mut gb = vec![0.0; cols];
                        for row in g.chunks(cols) {
                            gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                        send(*b, gb, &mut grads);
                    } else {
                        send(*b, g.clone(), &mut grads);
                    }
                    send(*a, g, &mut grads);
                }
                Op::Mul { a, b } => {
                    let av = &self.nodes[a.index()].value;
                    let bv = &self.nodes[b.index()].value;
                    send(*a, g.iter().zip(bv).map(|(x, y)| x * y).collect(), &mut grads);
                    send(*b, g.iter().zip(av).map(|(x, y)| x * y).collect(), &mut grads);
                }
                Op::ScaleBy { a, s } => {
                    let av = &self.nodes[a.index()].value;
                    let c = self.nodes[s.index()].value[0];
                    let gs: f64 = g.iter().zip(av).map(|(x, y)| x * y).sum();
                    send(*s, vec![gs], &mut grads);
                    send(*a, g.iter().map(|x| x * c).collect(), &mut grads);
                }
                Op::Scale { a, c } => send(*a, g.iter().map(|x| x * c).collect(), &mut grads),
                Op::Concat { parts, axis } => {
                    if *axis == 0 {
                        let mut off = 0;
                        for p in parts {
                            let len = self.nodes[p.index()].value.len();
                            send(*p, g[off..off + len].to_vec(), &mut grads);
                            off += len;
                        }
                    } else {
                        let (rows, cols) = dims2(&node.shape).unwrap();
                        let mut off = 0;
                        for p in parts {
                            let pc = dims2(&self.nodes[p.index()].shape).unwrap().1;
                            let mut gp = Vec::with_capacity(rows * pc);
                            for r in 0..rows {
                                gp.extend_from_slice(&g[r * cols + off..r * cols + off + pc]);
                            }
                            send(*p, gp, &mut grads);
                            off += pc;
                        }
                    }
                }
                Op::SliceCols { a, start } => {
                    let (rows, cols) = dims2(&self.nodes[a.index()].shape).unwrap();
                    let len = dims2(&node.shape).unwrap().1;
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        ga[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    send(*a, ga, &mut grads);
                }
                Op::Gather { table, ids } => {
                    let tn = &self.nodes[table.index()];
                    let cols = dims2(&tn.shape).unwrap().1;
                    let mut gt = vec![0.0; tn.value.len()];
                    for (k, &i) in ids.iter().enumerate() {
                        gt[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&g[k * cols..(k + 1) * cols])
                            .for_each(|(x, y)| *x += y);
                    }
                    send(*table, gt, &mut grads);
                }
                Op::Relu(a) => {
                    let av = &self.nodes[a.index()].value;
                    send(*a, g.iter().zip(av).map(|(d, &x)| if x > 0.0 { *d } else { 0.0 }).collect(), &mut grads);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    send(*a, g.iter().zip(y).map(|(d, y)| d * y * (1.0 - y)).collect(), &mut grads);
                }
                Op::Softplus(a) => {
                    let av = &self.nodes[a.index()].value;
                    send(*a, g.iter().zip(av).map(|(d, &x)| d * kernels::sigmoid(x)).collect(), &mut grads);
                }
                Op::Softmax(a) => {
                    let cols = *node.shape.last().unwrap();
                    let y = &node.value;
                    let mut ga = vec![0.0; y.len()];
                    for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            out[c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    send(*a, ga, &mut grads);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let (rows, cols) = dims2(&node.shape).unwrap();
                    let gv = &self.nodes[gain.index()].value;
                    let mut gx = vec![0.0; rows * cols];
                    let mut gg = vec![0.0; cols];
                    let mut gbias = vec![0.0; cols];
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            gg[c] += gr[c] * hr[c];
                            gbias[c] += gr[c];
                            dxhat[c] = gr[c] * gv[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            gx[r * cols + c] = inv_std[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                        }
                    }
                    send(*x, gx, &mut grads);
                    send(*gain, gg, &mut grads);
                    send(*bias, gbias, &mut grads);
                }
                Op::MaskedFill { a, mask } => {
                    send(*a, g.iter().zip(mask).map(|(d, &m)| if m { 0.0 } else { *d }).collect(), &mut grads);
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = dims2(&self.nodes[a.index()].shape).unwrap();
                    let mut ga = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        ga.extend(g.iter().map(|x| x / rows as f64));
                    }
                    send(*a, ga, &mut grads);
                }
                Op::Sum(a) => {
                    let len = self.nodes[a.index()].value.len();
                    send(*a, vec![g[0]; len], &mut grads);
                }
                Op::Reshape(a) => send(*a, g, &mut grads),
                Op::CrossEntropy { logits, target, probs, rows } => {
                    let cols = probs.len() / rows;
                    let mut gl = vec![0.0; probs.len()];
                    for r in 0..*rows {
                        let tsum: f64 = target[r * cols..(r + 1) * cols].iter().sum();
                        for c in 0..cols {
                            let k = r * cols + c;
                            gl[k] = g[0] * (probs[k] * tsum - target[k]) / *rows as f64;
                        }
                    }
                    send(*logits, gl, &mut grads);
                }
                Op::Mse { a, b } => {
                    let av = &self.nodes[a.index()].value;
                    let bv = &self.nodes[b.index()].value;
                    let n = av.len() as f64;
                    let ga: Vec<f64> = av.iter().zip(bv).map(|(x, y)| g[0] * 2.0 * (x - y) / n).collect();
                    let gb: Vec<f64> = ga.iter().map(|x| -x).collect();
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::KlTemperature { student, teacher_probs, student_probs, tau, rows } => {
                    let gs: Vec<f64> = student_probs
                        .iter()
                        .zip(teacher_probs)
                        .map(|(s, t)| g[0] * tau * (s - t) / *rows as f64)
                        .collect();
                    send(*student, gs, &mut grads);
                }
            }
        }
        Ok(out)
    }
}
