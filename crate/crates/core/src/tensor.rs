//! Dense tensors and a dynamic tape for reverse-mode automatic
//! differentiation.
//!
//! The tape is rebuilt on every forward pass: create a [`Tape`], run
//! operations through it, call [`Tape::backward`] on a scalar result, and
//! read gradients off the leaf tensors. Gradients accumulate additively;
//! callers zero them explicitly between phases.
//!
//! A tape and its tensors are confined to a single thread. Distinct runs
//! own fully independent state.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::fmath;

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    detached: bool,
}

/// Dense 64-bit float array with shape, optional gradient, and a
/// `requires_grad` marker. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorInner>>,
}

impl core::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("data", &inner.data)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    /// Constant tensor. Fails if `data.len() != product(shape)`.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                shapes: vec![shape.to_vec(), vec![data.len()]],
            });
        }
        Ok(Self::raw(data, shape.to_vec(), false, false))
    }

    /// Trainable tensor (`requires_grad = true`).
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        t.set_requires_grad(true);
        Ok(t)
    }

    pub fn scalar(value: f64) -> Self {
        Self::raw(vec![value], vec![1], false, false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::raw(vec![0.0; numel_of(shape)], shape.to_vec(), false, false)
    }

    fn raw(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, detached: bool) -> Self {
        Self {
            inner: Rc::new(RefCell::new(TensorInner {
                id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                grad: None,
                requires_grad,
                detached,
            })),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Snapshot of the values.
    pub fn data(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Borrow the values without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    pub fn get(&self, index: usize) -> f64 {
        self.inner.borrow().data[index]
    }

    pub fn set(&self, index: usize, value: f64) {
        self.inner.borrow_mut().data[index] = value;
    }

    /// Value of a scalar tensor. Panics on non-scalars.
    pub fn scalar_value(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "scalar_value on non-scalar tensor");
        inner.data[0]
    }

    /// Replace the stored values (shape must be unchanged).
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(Error::ShapeMismatch {
                op: "set_data",
                shapes: vec![inner.shape.clone(), vec![data.len()]],
            });
        }
        inner.data = data;
        Ok(())
    }

    /// Apply `f` to the mutable value slice.
    pub fn map_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.borrow_mut().data);
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, requires: bool) {
        self.inner.borrow_mut().requires_grad = requires;
    }

    pub fn is_detached(&self) -> bool {
        self.inner.borrow().detached
    }

    /// Gradient snapshot, if one has been accumulated.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Value copy cut off from any gradient flow. `backward` on a
    /// detached tensor is an error.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Self::raw(inner.data.clone(), inner.shape.clone(), false, true)
    }

    /// In-place gradient descent step: `data -= lr * grad`. No-op when no
    /// gradient has been accumulated.
    pub fn gradient_step(&self, lr: f64) {
        let mut inner = self.inner.borrow_mut();
        if let Some(grad) = inner.grad.take() {
            for (d, g) in inner.data.iter_mut().zip(grad.iter()) {
                *d -= lr * g;
            }
            inner.grad = Some(grad);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        let inner = self.inner.borrow();
        fmath::sqrt(inner.data.iter().map(|v| v * v).sum())
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; n]);
        for (g, c) in grad.iter_mut().zip(contribution.iter()) {
            *g += c;
        }
    }

    fn reset_grad_zeros(&self) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        inner.grad = Some(vec![0.0; n]);
    }
}

/// Temporarily clears `requires_grad` on `params` while running `f`.
///
/// Used by inner loops and attacks that need gradients with respect to a
/// perturbation but must leave model parameters untouched.
pub fn with_frozen<R>(params: &[Tensor], f: impl FnOnce() -> R) -> R {
    let saved: Vec<bool> = params.iter().map(|p| p.requires_grad()).collect();
    for p in params {
        p.set_requires_grad(false);
    }
    let out = f();
    for (p, s) in params.iter().zip(saved) {
        p.set_requires_grad(s);
    }
    out
}

/// Operation kinds recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Matmul,
    EmbeddingLookup,
    MeanPool,
    Tanh,
    Relu,
    SoftmaxCrossEntropy,
    Mse,
    KlDivergence,
    L2NormSq,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Matmul => "matmul",
            OpKind::EmbeddingLookup => "embedding_lookup",
            OpKind::MeanPool => "mean_pool",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::Mse => "mse",
            OpKind::KlDivergence => "kl_divergence",
            OpKind::L2NormSq => "l2_norm_sq",
        }
    }

    fn arity(self) -> usize {
        match self {
            OpKind::Tanh | OpKind::Relu | OpKind::L2NormSq => 1,
            _ => 2,
        }
    }
}

/// How the operands of an elementwise binary op line up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Equal,
    /// Right operand is a single value applied to every element.
    RhsScalar,
    /// Left operand is a single value applied to every element.
    LhsScalar,
    /// Right operand is a vector matching the last dimension of the left
    /// (bias over trailing dimension).
    RhsBias,
}

fn broadcast_mode(
    op: &'static str,
    a: &[usize],
    b: &[usize],
    allow_bias: bool,
) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Equal);
    }
    if numel_of(b) == 1 {
        return Ok(Broadcast::RhsScalar);
    }
    if numel_of(a) == 1 {
        return Ok(Broadcast::LhsScalar);
    }
    if allow_bias && b.len() == 1 && a.last() == Some(&b[0]) {
        return Ok(Broadcast::RhsBias);
    }
    Err(Error::ShapeMismatch {
        op,
        shapes: vec![a.to_vec(), b.to_vec()],
    })
}

/// Data an operation stashes for its backward rule.
enum Saved {
    None,
    /// Softmax rows of the logits (cross-entropy).
    Probs(Vec<f64>),
    /// Softmax rows of both logit inputs (KL divergence).
    TwoProbs(Vec<f64>, Vec<f64>),
    /// Per-sequence counts of pooled positions.
    PoolCounts(Vec<f64>),
}

struct Record {
    kind: OpKind,
    inputs: Vec<Tensor>,
    output: Tensor,
    saved: Saved,
}

/// Dynamic computation tape. Records operations whose inputs require
/// gradients and replays them in reverse on [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    records: Vec<Record>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Runs one forward operation, recording it when any input requires a
    /// gradient. All outputs are checked finite.
    pub fn apply(&mut self, kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
        if inputs.len() != kind.arity() {
            return Err(Error::ArityMismatch {
                op: kind.name(),
                expected: kind.arity(),
                got: inputs.len(),
            });
        }
        let (out_data, out_shape, saved) = match kind {
            OpKind::Add => forward_add(inputs[0], inputs[1])?,
            OpKind::Sub => forward_sub(inputs[0], inputs[1])?,
            OpKind::Mul => forward_mul(inputs[0], inputs[1])?,
            OpKind::Matmul => forward_matmul(inputs[0], inputs[1])?,
            OpKind::EmbeddingLookup => forward_embedding_lookup(inputs[0], inputs[1])?,
            OpKind::MeanPool => forward_mean_pool(inputs[0], inputs[1])?,
            OpKind::Tanh => forward_tanh(inputs[0]),
            OpKind::Relu => forward_relu(inputs[0]),
            OpKind::SoftmaxCrossEntropy => forward_softmax_cross_entropy(inputs[0], inputs[1])?,
            OpKind::Mse => forward_mse(inputs[0], inputs[1])?,
            OpKind::KlDivergence => forward_kl_divergence(inputs[0], inputs[1])?,
            OpKind::L2NormSq => forward_l2_norm_sq(inputs[0]),
        };
        check_finite(kind.name(), &out_data)?;
        let requires = inputs.iter().any(|t| t.requires_grad());
        let output = Tensor::raw(out_data, out_shape, requires, false);
        if requires {
            self.records.push(Record {
                kind,
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                output: output.clone(),
                saved,
            });
        }
        Ok(output)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Matmul, &[a, b])
    }
    pub fn embedding_lookup(&mut self, table: &Tensor, ids: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::EmbeddingLookup, &[table, ids])
    }
    pub fn mean_pool(&mut self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::MeanPool, &[x, mask])
    }
    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Tanh, &[x])
    }
    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Relu, &[x])
    }
    pub fn softmax_cross_entropy(&mut self, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::SoftmaxCrossEntropy, &[logits, targets])
    }
    pub fn mse(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::Mse, &[a, b])
    }
    pub fn kl_divergence(&mut self, p_logits: &Tensor, q_logits: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::KlDivergence, &[p_logits, q_logits])
    }
    pub fn l2_norm_sq(&mut self, x: &Tensor) -> Result<Tensor> {
        self.apply(OpKind::L2NormSq, &[x])
    }

    /// Backpropagates from a scalar `root`, accumulating gradients into
    /// every reachable leaf with `requires_grad`.
    ///
    /// Intermediate gradients are reset on entry; leaf gradients
    /// accumulate additively across calls. A constant root (nothing to
    /// differentiate) is a no-op; a detached root is an error.
    pub fn backward(&self, root: &Tensor) -> Result<()> {
        if root.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: root.shape(),
            });
        }
        if root.is_detached() {
            return Err(Error::DetachedRoot);
        }
        if !root.requires_grad() {
            return Ok(());
        }
        let on_tape = self.records.iter().any(|r| r.output.id() == root.id());
        if !on_tape {
            // A bare parameter used as its own loss.
            root.accumulate_grad(&[1.0]);
            return Ok(());
        }
        for record in &self.records {
            record.output.reset_grad_zeros();
        }
        root.accumulate_grad(&[1.0]);
        for record in self.records.iter().rev() {
            let upstream = record
                .output
                .grad()
                .expect("intermediate gradient initialized above");
            if upstream.iter().all(|g| *g == 0.0) {
                continue;
            }
            backward_record(record, &upstream);
        }
        Ok(())
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op,
                context: format!("output element {i} = {v}"),
            });
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Forward rules
// ---------------------------------------------------------------------------

type ForwardOut = (Vec<f64>, Vec<usize>, Saved);

fn forward_add(a: &Tensor, b: &Tensor) -> Result<ForwardOut> {
    binary_elementwise("add", a, b, true, |x, y| x + y)
}

fn forward_sub(a: &Tensor, b: &Tensor) -> Result<ForwardOut> {
    binary_elementwise("sub", a, b, false, |x, y| x - y)
}

fn forward_mul(a: &Tensor, b: &Tensor) -> Result<ForwardOut> {
    binary_elementwise("mul", a, b, false, |x, y| x * y)
}

fn binary_elementwise(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    allow_bias: bool,
    f: impl Fn(f64, f64) -> f64,
) -> Result<ForwardOut> {
    let (ash, bsh) = (a.shape(), b.shape());
    let mode = broadcast_mode(op, &ash, &bsh, allow_bias)?;
    let out = a.with_data(|ad| {
        b.with_data(|bd| match mode {
            Broadcast::Equal => ad.iter().zip(bd).map(|(x, y)| f(*x, *y)).collect(),
            Broadcast::RhsScalar => ad.iter().map(|x| f(*x, bd[0])).collect(),
            Broadcast::LhsScalar => bd.iter().map(|y| f(ad[0], *y)).collect(),
            Broadcast::RhsBias => {
                let c = bd.len();
                ad.iter()
                    .enumerate()
                    .map(|(i, x)| f(*x, bd[i % c]))
                    .collect::<Vec<f64>>()
            }
        })
    });
    let out_shape = match mode {
        Broadcast::LhsScalar => bsh,
        _ => ash,
    };
    Ok((out, out_shape, Saved::None))
}

fn forward_matmul(a: &Tensor, b: &Tensor) -> Result<ForwardOut> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            shapes: vec![ash, bsh],
        });
    }
    let (m, k, n) = (ash[0], ash[1], bsh[1]);
    let out = a.with_data(|ad| {
        b.with_data(|bd| {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            out
        })
    });
    Ok((out, vec![m, n], Saved::None))
}

fn forward_embedding_lookup(table: &Tensor, ids: &Tensor) -> Result<ForwardOut> {
    let tsh = table.shape();
    if tsh.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "embedding_lookup",
            shapes: vec![tsh, ids.shape()],
        });
    }
    let (vocab, dim) = (tsh[0], tsh[1]);
    let ish = ids.shape();
    let seq = *ish.last().unwrap_or(&1);
    let out = table.with_data(|td| {
        ids.with_data(|idv| {
            let mut out = Vec::with_capacity(idv.len() * dim);
            for (pos, raw) in idv.iter().enumerate() {
                if fmath::fract(*raw) != 0.0 || *raw < 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "embedding_lookup: id at position {pos} is not a non-negative integer ({raw})"
                    )));
                }
                let id = *raw as usize;
                if id >= vocab {
                    return Err(Error::OutOfVocab {
                        id,
                        position: pos % seq,
                        sample: pos / seq,
                        vocab,
                    });
                }
                out.extend_from_slice(&td[id * dim..(id + 1) * dim]);
            }
            Ok(out)
        })
    })?;
    let mut out_shape = ish;
    out_shape.push(dim);
    Ok((out, out_shape, Saved::None))
}

fn forward_mean_pool(x: &Tensor, mask: &Tensor) -> Result<ForwardOut> {
    let xsh = x.shape();
    let msh = mask.shape();
    if xsh.len() != 3 || msh.len() != 2 || xsh[0] != msh[0] || xsh[1] != msh[1] {
        return Err(Error::ShapeMismatch {
            op: "mean_pool",
            shapes: vec![xsh, msh],
        });
    }
    let (b, s, d) = (xsh[0], xsh[1], xsh[2]);
    let mut counts = vec![0.0; b];
    let out = x.with_data(|xd| {
        mask.with_data(|md| {
            let mut out = vec![0.0; b * d];
            for bi in 0..b {
                let count: f64 = md[bi * s..(bi + 1) * s].iter().sum();
                if count <= 0.0 {
                    return Err(Error::Empty {
                        what: "pooled sequence (mask sums to zero)",
                    });
                }
                counts[bi] = count;
                for si in 0..s {
                    let w = md[bi * s + si];
                    if w == 0.0 {
                        continue;
                    }
                    let row = &xd[(bi * s + si) * d..(bi * s + si + 1) * d];
                    let orow = &mut out[bi * d..(bi + 1) * d];
                    for (o, v) in orow.iter_mut().zip(row) {
                        *o += w * v;
                    }
                }
                for o in &mut out[bi * d..(bi + 1) * d] {
                    *o /= count;
                }
            }
            Ok(out)
        })
    })?;
    Ok((out, vec![b, d], Saved::PoolCounts(counts)))
}

fn forward_tanh(x: &Tensor) -> ForwardOut {
    let out = x.with_data(|xd| xd.iter().map(|v| fmath::tanh(*v)).collect());
    (out, x.shape(), Saved::None)
}

fn forward_relu(x: &Tensor) -> ForwardOut {
    let out = x.with_data(|xd| xd.iter().map(|v| v.max(0.0)).collect());
    (out, x.shape(), Saved::None)
}

/// Row-wise log-softmax over a [rows, cols] matrix.
fn log_softmax_rows(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &data[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + fmath::ln(row.iter().map(|v| fmath::exp(v - max)).sum::<f64>());
        for c in 0..cols {
            out[r * cols + c] = row[c] - lse;
        }
    }
    out
}

fn rows_cols(op: &'static str, a: &[usize], b: &[usize]) -> Result<(usize, usize)> {
    if a.len() != 2 || a != b {
        return Err(Error::ShapeMismatch {
            op,
            shapes: vec![a.to_vec(), b.to_vec()],
        });
    }
    Ok((a[0], a[1]))
}

fn forward_softmax_cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<ForwardOut> {
    let (rows, cols) = rows_cols("softmax_cross_entropy", &logits.shape(), &targets.shape())?;
    let (loss, probs) = logits.with_data(|zd| {
        targets.with_data(|td| {
            let logp = log_softmax_rows(zd, rows, cols);
            let loss = logp
                .iter()
                .zip(td.iter())
                .map(|(lp, t)| -t * lp)
                .sum::<f64>()
                / rows as f64;
            let probs: Vec<f64> = logp.iter().map(|lp| fmath::exp(*lp)).collect();
            (loss, probs)
        })
    });
    Ok((vec![loss], vec![1], Saved::Probs(probs)))
}

fn forward_mse(a: &Tensor, b: &Tensor) -> Result<ForwardOut> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash != bsh {
        return Err(Error::ShapeMismatch {
            op: "mse",
            shapes: vec![ash, bsh],
        });
    }
    let n = a.numel() as f64;
    let loss = a.with_data(|ad| {
        b.with_data(|bd| {
            ad.iter()
                .zip(bd)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / n
        })
    });
    Ok((vec![loss], vec![1], Saved::None))
}

fn forward_kl_divergence(p_logits: &Tensor, q_logits: &Tensor) -> Result<ForwardOut> {
    let (rows, cols) = rows_cols("kl_divergence", &p_logits.shape(), &q_logits.shape())?;
    let (kl, p, q) = p_logits.with_data(|pd| {
        q_logits.with_data(|qd| {
            let logp = log_softmax_rows(pd, rows, cols);
            let logq = log_softmax_rows(qd, rows, cols);
            let mut kl = 0.0;
            let mut p = vec![0.0; rows * cols];
            let mut q = vec![0.0; rows * cols];
            for i in 0..rows * cols {
                p[i] = fmath::exp(logp[i]);
                q[i] = fmath::exp(logq[i]);
                kl += p[i] * (logp[i] - logq[i]);
            }
            (kl / rows as f64, p, q)
        })
    });
    Ok((vec![kl], vec![1], Saved::TwoProbs(p, q)))
}

fn forward_l2_norm_sq(x: &Tensor) -> ForwardOut {
    let sum = x.with_data(|xd| xd.iter().map(|v| v * v).sum::<f64>());
    (vec![sum], vec![1], Saved::None)
}

// ---------------------------------------------------------------------------
// Backward rules
// ---------------------------------------------------------------------------

fn backward_record(record: &Record, upstream: &[f64]) {
    match record.kind {
        OpKind::Add => backward_add(record, upstream),
        OpKind::Sub => backward_sub(record, upstream),
        OpKind::Mul => backward_mul(record, upstream),
        OpKind::Matmul => backward_matmul(record, upstream),
        OpKind::EmbeddingLookup => backward_embedding_lookup(record, upstream),
        OpKind::MeanPool => backward_mean_pool(record, upstream),
        OpKind::Tanh => backward_tanh(record, upstream),
        OpKind::Relu => backward_relu(record, upstream),
        OpKind::SoftmaxCrossEntropy => backward_softmax_cross_entropy(record, upstream),
        OpKind::Mse => backward_mse(record, upstream),
        OpKind::KlDivergence => backward_kl_divergence(record, upstream),
        OpKind::L2NormSq => backward_l2_norm_sq(record, upstream),
    }
}

fn reduce_for(mode: Broadcast, target_len: usize, full: &[f64], bias_cols: usize) -> Vec<f64> {
    match mode {
        Broadcast::Equal => full.to_vec(),
        Broadcast::RhsScalar | Broadcast::LhsScalar => vec![full.iter().sum()],
        Broadcast::RhsBias => {
            let mut out = vec![0.0; target_len];
            for (i, g) in full.iter().enumerate() {
                out[i % bias_cols] += g;
            }
            out
        }
    }
}

fn binary_mode(record: &Record, allow_bias: bool) -> Broadcast {
    broadcast_mode(
        record.kind.name(),
        &record.inputs[0].shape(),
        &record.inputs[1].shape(),
        allow_bias,
    )
    .expect("shapes validated in forward pass")
}

fn backward_add(record: &Record, upstream: &[f64]) {
    let mode = binary_mode(record, true);
    let (a, b) = (&record.inputs[0], &record.inputs[1]);
    let bias_cols = b.numel();
    if a.requires_grad() {
        let ga = match mode {
            Broadcast::LhsScalar => vec![upstream.iter().sum()],
            _ => upstream.to_vec(),
        };
        a.accumulate_grad(&ga);
    }
    if b.requires_grad() {
        let gb = match mode {
            Broadcast::Equal => upstream.to_vec(),
            _ => reduce_for(mode, bias_cols, upstream, bias_cols),
        };
        b.accumulate_grad(&gb);
    }
}

fn backward_sub(record: &Record, upstream: &[f64]) {
    let mode = binary_mode(record, false);
    let (a, b) = (&record.inputs[0], &record.inputs[1]);
    if a.requires_grad() {
        let ga = match mode {
            Broadcast::LhsScalar => vec![upstream.iter().sum()],
            _ => upstream.to_vec(),
        };
        a.accumulate_grad(&ga);
    }
    if b.requires_grad() {
        let neg: Vec<f64> = upstream.iter().map(|g| -g).collect();
        let gb = match mode {
            Broadcast::RhsScalar => vec![neg.iter().sum()],
            _ => neg,
        };
        b.accumulate_grad(&gb);
    }
}

fn backward_mul(record: &Record, upstream: &[f64]) {
    let mode = binary_mode(record, false);
    let (a, b) = (&record.inputs[0], &record.inputs[1]);
    if a.requires_grad() {
        let ga = b.with_data(|bd| match mode {
            Broadcast::Equal => upstream.iter().zip(bd).map(|(g, y)| g * y).collect(),
            Broadcast::RhsScalar => upstream.iter().map(|g| g * bd[0]).collect(),
            Broadcast::LhsScalar => vec![upstream.iter().zip(bd).map(|(g, y)| g * y).sum()],
            Broadcast::RhsBias => unreachable!("mul has no bias broadcast"),
        });
        a.accumulate_grad(&ga);
    }
    if b.requires_grad() {
        let gb = a.with_data(|ad| match mode {
            Broadcast::Equal => upstream.iter().zip(ad).map(|(g, x)| g * x).collect(),
            Broadcast::RhsScalar => vec![upstream.iter().zip(ad).map(|(g, x)| g * x).sum()],
            Broadcast::LhsScalar => upstream.iter().map(|g| g * ad[0]).collect(),
            Broadcast::RhsBias => unreachable!("mul has no bias broadcast"),
        });
        b.accumulate_grad(&gb);
    }
}

fn backward_matmul(record: &Record, upstream: &[f64]) {
    let (a, b) = (&record.inputs[0], &record.inputs[1]);
    let ash = a.shape();
    let bsh = b.shape();
    let (m, k, n) = (ash[0], ash[1], bsh[1]);
    if a.requires_grad() {
        // dA = dOut · Bᵀ
        let ga = b.with_data(|bd| {
            let mut ga = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += upstream[i * n + j] * bd[p * n + j];
                    }
                    ga[i * k + p] = acc;
                }
            }
            ga
        });
        a.accumulate_grad(&ga);
    }
    if b.requires_grad() {
        // dB = Aᵀ · dOut
        let gb = a.with_data(|ad| {
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        gb[p * n + j] += av * upstream[i * n + j];
                    }
                }
            }
            gb
        });
        b.accumulate_grad(&gb);
    }
}

fn backward_embedding_lookup(record: &Record, upstream: &[f64]) {
    let (table, ids) = (&record.inputs[0], &record.inputs[1]);
    if !table.requires_grad() {
        return;
    }
    let tsh = table.shape();
    let (vocab, dim) = (tsh[0], tsh[1]);
    let gt = ids.with_data(|idv| {
        let mut gt = vec![0.0; vocab * dim];
        for (pos, raw) in idv.iter().enumerate() {
            let id = *raw as usize;
            let grow = &mut gt[id * dim..(id + 1) * dim];
            let urow = &upstream[pos * dim..(pos + 1) * dim];
            for (g, u) in grow.iter_mut().zip(urow) {
                *g += u;
            }
        }
        gt
    });
    table.accumulate_grad(&gt);
}

fn backward_mean_pool(record: &Record, upstream: &[f64]) {
    let (x, mask) = (&record.inputs[0], &record.inputs[1]);
    if !x.requires_grad() {
        return;
    }
    let counts = match &record.saved {
        Saved::PoolCounts(c) => c,
        _ => unreachable!("mean_pool saves counts"),
    };
    let xsh = x.shape();
    let (b, s, d) = (xsh[0], xsh[1], xsh[2]);
    let gx = mask.with_data(|md| {
        let mut gx = vec![0.0; b * s * d];
        for bi in 0..b {
            for si in 0..s {
                let w = md[bi * s + si];
                if w == 0.0 {
                    continue;
                }
                let scale = w / counts[bi];
                let grow = &mut gx[(bi * s + si) * d..(bi * s + si + 1) * d];
                let urow = &upstream[bi * d..(bi + 1) * d];
                for (g, u) in grow.iter_mut().zip(urow) {
                    *g += scale * u;
                }
            }
        }
        gx
    });
    x.accumulate_grad(&gx);
}

fn backward_tanh(record: &Record, upstream: &[f64]) {
    let x = &record.inputs[0];
    if !x.requires_grad() {
        return;
    }
    let gx = record.output.with_data(|yd| {
        upstream
            .iter()
            .zip(yd)
            .map(|(g, y)| g * (1.0 - y * y))
            .collect::<Vec<f64>>()
    });
    x.accumulate_grad(&gx);
}

fn backward_relu(record: &Record, upstream: &[f64]) {
    let x = &record.inputs[0];
    if !x.requires_grad() {
        return;
    }
    let gx = x.with_data(|xd| {
        upstream
            .iter()
            .zip(xd)
            .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
            .collect::<Vec<f64>>()
    });
    x.accumulate_grad(&gx);
}

fn backward_softmax_cross_entropy(record: &Record, upstream: &[f64]) {
    let (logits, targets) = (&record.inputs[0], &record.inputs[1]);
    let probs = match &record.saved {
        Saved::Probs(p) => p,
        _ => unreachable!("softmax_cross_entropy saves probs"),
    };
    let rows = logits.shape()[0] as f64;
    let go = upstream[0] / rows;
    if logits.requires_grad() {
        let gz = targets.with_data(|td| {
            probs
                .iter()
                .zip(td)
                .map(|(p, t)| go * (p - t))
                .collect::<Vec<f64>>()
        });
        logits.accumulate_grad(&gz);
    }
    if targets.requires_grad() {
        let gt: Vec<f64> = probs.iter().map(|p| -go * fmath::ln(*p)).collect();
        targets.accumulate_grad(&gt);
    }
}

fn backward_mse(record: &Record, upstream: &[f64]) {
    let (a, b) = (&record.inputs[0], &record.inputs[1]);
    let n = a.numel() as f64;
    let go = upstream[0] * 2.0 / n;
    let diff = a.with_data(|ad| {
        b.with_data(|bd| {
            ad.iter()
                .zip(bd)
                .map(|(x, y)| go * (x - y))
                .collect::<Vec<f64>>()
        })
    });
    if a.requires_grad() {
        a.accumulate_grad(&diff);
    }
    if b.requires_grad() {
        let neg: Vec<f64> = diff.iter().map(|d| -d).collect();
        b.accumulate_grad(&neg);
    }
}

fn backward_kl_divergence(record: &Record, upstream: &[f64]) {
    let (p_logits, q_logits) = (&record.inputs[0], &record.inputs[1]);
    let (p, q) = match &record.saved {
        Saved::TwoProbs(p, q) => (p, q),
        _ => unreachable!("kl_divergence saves both prob rows"),
    };
    let shape = p_logits.shape();
    let (rows, cols) = (shape[0], shape[1]);
    let go = upstream[0] / rows as f64;
    if q_logits.requires_grad() {
        let gq: Vec<f64> = p
            .iter()
            .zip(q)
            .map(|(pi, qi)| go * (qi - pi))
            .collect();
        q_logits.accumulate_grad(&gq);
    }
    if p_logits.requires_grad() {
        // d/da_k = p_k * ((log p_k - log q_k) - KL_row)
        let mut gp = vec![0.0; rows * cols];
        for r in 0..rows {
            let mut row_kl = 0.0;
            for c in 0..cols {
                let i = r * cols + c;
                row_kl += p[i] * (fmath::ln(p[i]) - fmath::ln(q[i]));
            }
            for c in 0..cols {
                let i = r * cols + c;
                gp[i] = go * p[i] * ((fmath::ln(p[i]) - fmath::ln(q[i])) - row_kl);
            }
        }
        p_logits.accumulate_grad(&gp);
    }
}

fn backward_l2_norm_sq(record: &Record, upstream: &[f64]) {
    let x = &record.inputs[0];
    if !x.requires_grad() {
        return;
    }
    let gx = x.with_data(|xd| {
        xd.iter()
            .map(|v| 2.0 * v * upstream[0])
            .collect::<Vec<f64>>()
    });
    x.accumulate_grad(&gx);
}

// ---------------------------------------------------------------------------
// Finite-difference validation
// ---------------------------------------------------------------------------

/// Compares the analytic gradient of `loss_fn` at `params` against central
/// finite differences, returning the maximum relative error
/// `|analytic - numeric| / max(1, |analytic|)` over all coordinates.
///
/// `loss_fn` must be deterministic and return a finite scalar.
pub fn finite_difference_check<F>(loss_fn: F, params: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &Tensor) -> Result<Tensor>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::InvalidConfig(format!(
            "finite difference step must be in (0, 1e-2], got {step}"
        )));
    }
    let was_requiring = params.requires_grad();
    params.set_requires_grad(true);
    params.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, params)?;
    if loss.numel() != 1 {
        params.set_requires_grad(was_requiring);
        return Err(Error::NonScalarRoot {
            shape: loss.shape(),
        });
    }
    if !loss.scalar_value().is_finite() {
        params.set_requires_grad(was_requiring);
        return Err(Error::NonFinite {
            op: "finite_difference_check",
            context: String::from("loss at base point"),
        });
    }
    tape.backward(&loss)?;
    let analytic = params.grad().unwrap_or_else(|| vec![0.0; params.numel()]);

    let eval = |params: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, params)?;
        let v = loss.scalar_value();
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_difference_check",
                context: String::from("loss at perturbed point"),
            });
        }
        Ok(v)
    };

    params.set_requires_grad(false);
    let mut max_rel = 0.0_f64;
    let result = (|| {
        for i in 0..params.numel() {
            let orig = params.get(i);
            params.set(i, orig + step);
            let plus = eval(params)?;
            params.set(i, orig - step);
            let minus = eval(params)?;
            params.set(i, orig);
            let numeric = (plus - minus) / (2.0 * step);
            let denom = fmath::abs(analytic[i]).max(1.0);
            max_rel = max_rel.max(fmath::abs(analytic[i] - numeric) / denom);
        }
        Ok(max_rel)
    })();
    params.set_requires_grad(was_requiring);
    result
}
