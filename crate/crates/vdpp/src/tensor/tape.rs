use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::{strides, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`]. Valid only for the tape that
/// produced it; using it elsewhere is reported as an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Abs,
    Relu,
    Tanh,
    Exp,
}

impl UnaryKind {
    fn name(self) -> &'static str {
        match self {
            UnaryKind::Neg => "neg",
            UnaryKind::Abs => "abs",
            UnaryKind::Relu => "relu",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Exp => "exp",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Abs => x.abs(),
            UnaryKind::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Exp => x.exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryKind {
    fn name(self) -> &'static str {
        match self {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Div => a / b,
        }
    }

    /// Partial derivatives (d out / d a, d out / d b) at one element.
    fn partials(self, a: f64, b: f64) -> (f64, f64) {
        match self {
            BinaryKind::Add => (1.0, 1.0),
            BinaryKind::Sub => (1.0, -1.0),
            BinaryKind::Mul => (b, a),
            BinaryKind::Div => (1.0 / b, -a / (b * b)),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary { kind: UnaryKind, a: u32 },
    Binary { kind: BinaryKind, a: u32, b: u32 },
    Matmul { a: u32, b: u32 },
    Bmm { a: u32, b: u32 },
    Softmax { x: u32 },
    LayerNorm { x: u32, gamma: u32, beta: u32 },
    AddRowVec { x: u32, v: u32 },
    RepeatLeading { x: u32 },
    Reshape { x: u32 },
    Transpose { x: u32, perm: Vec<usize> },
    SumAll { x: u32 },
    Stack { items: Vec<u32> },
    Index0 { x: u32, at: usize },
    Bilinear { x: u32, ry: f64, rx: f64 },
    Conv3x3 { x: u32, kernel: [f64; 9] },
    PadEdge { x: u32 },
    Crop { x: u32 },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    /// True when this node or any ancestor is a tracked leaf.
    needs_grad: bool,
    /// Persistent gradient accumulator, tracked leaves only.
    acc: Option<Vec<f64>>,
}

/// Arena of recorded operations. Forward methods validate shapes, compute
/// values eagerly, and append a node; [`Tape::backward`] replays the arena in
/// reverse, visiting each node exactly once.
///
/// Compute ops reject non-finite outputs instead of letting Inf or NaN
/// propagate silently. Data-movement ops (reshape, transpose, stack, crop,
/// pad, repeat, index) cannot change values and skip the check.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

struct Tap {
    i0: usize,
    i1: usize,
    w: f64,
}

/// Linear sample taps for one axis: src = (i + 0.5) / r - 0.5, edge-clamped.
fn lin_taps(out_len: usize, in_len: usize, r: f64) -> Vec<Tap> {
    let hi = in_len as i64 - 1;
    (0..out_len)
        .map(|i| {
            let s = (i as f64 + 0.5) / r - 0.5;
            let f = s.floor();
            let w = s - f;
            let i0 = (f as i64).clamp(0, hi) as usize;
            let i1 = (f as i64 + 1).clamp(0, hi) as usize;
            Tap { i0, i1, w }
        })
        .collect()
}

/// Visit (out_flat, in_flat) pairs of a transposition in output row-major
/// order. Shared by forward and backward so the index map cannot drift.
fn for_each_transposed(in_shape: &[usize], perm: &[usize], mut visit: impl FnMut(usize, usize)) {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = in_shape.iter().product();
    let mut idx = vec![0usize; rank];
    let mut in_off = 0usize;
    for out_flat in 0..total {
        visit(out_flat, in_off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            in_off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            in_off -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for j in 0..n {
                orow[j] += ail * brow[j];
            }
        }
    }
}

/// dA += G B^T for one matrix product.
fn matmul_grad_a(g: &[f64], b: &[f64], m: usize, k: usize, n: usize, da: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            da[i * k + l] += s;
        }
    }
}

/// dB += A^T G for one matrix product.
fn matmul_grad_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            let drow = &mut db[l * n..(l + 1) * n];
            for j in 0..n {
                drow[j] += ail * grow[j];
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || (v.index as usize) >= self.nodes.borrow().len() {
            return Err(Error::TapeMismatch);
        }
        Ok(())
    }

    fn view(&self, v: Var) -> Result<(Vec<usize>, Arc<Vec<f64>>, bool)> {
        self.check(v)?;
        let nodes = self.nodes.borrow();
        let n = &nodes[v.index as usize];
        Ok((n.shape.clone(), Arc::clone(&n.value), n.needs_grad))
    }

    fn push_arc(&self, shape: Vec<usize>, value: Arc<Vec<f64>>, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len() as u32;
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            acc: None,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        self.push_arc(shape, Arc::new(value), op, needs_grad)
    }

    /// Mount a tensor as a leaf. Tracked leaves accumulate gradients across
    /// `backward` calls until [`Tape::zero_grads`].
    pub fn leaf(&self, t: &Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len() as u32;
        let len = t.len();
        nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Arc::clone(t.storage()),
            op: Op::Leaf,
            needs_grad: requires_grad,
            acc: requires_grad.then(|| vec![0.0; len]),
        });
        Var {
            tape: self.id,
            index,
        }
    }

    pub fn constant(&self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn scalar_const(&self, v: f64) -> Result<Var> {
        Ok(self.constant(&Tensor::scalar(v)?))
    }

    pub fn value(&self, v: Var) -> Result<Tensor> {
        self.check(v)?;
        let nodes = self.nodes.borrow();
        let n = &nodes[v.index as usize];
        Ok(Tensor::from_arc(n.shape.clone(), Arc::clone(&n.value)))
    }

    pub fn shape_of(&self, v: Var) -> Result<Vec<usize>> {
        self.check(v)?;
        Ok(self.nodes.borrow()[v.index as usize].shape.clone())
    }

    /// Accumulated gradient of a tracked leaf; `None` for untracked nodes.
    pub fn grad(&self, v: Var) -> Result<Option<Tensor>> {
        self.check(v)?;
        let nodes = self.nodes.borrow();
        let n = &nodes[v.index as usize];
        Ok(n.acc
            .as_ref()
            .map(|acc| Tensor::from_arc(n.shape.clone(), Arc::new(acc.clone()))))
    }

    pub fn zero_grads(&self) {
        let mut nodes = self.nodes.borrow_mut();
        for n in nodes.iter_mut() {
            if let Some(acc) = n.acc.as_mut() {
                acc.iter_mut().for_each(|g| *g = 0.0);
            }
        }
    }

    // ---- elementwise ----

    fn unary(&self, kind: UnaryKind, a: Var) -> Result<Var> {
        let (shape, av, ng) = self.view(a)?;
        let out: Vec<f64> = av.iter().map(|&x| kind.apply(x)).collect();
        ensure_finite(kind.name(), &out)?;
        Ok(self.push(shape, out, Op::Unary { kind, a: a.index }, ng))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, a)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    /// Elementwise when shapes match; a single-element operand broadcasts
    /// against the other. Any other shape pair is an error.
    fn binary(&self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ash, av, ang) = self.view(a)?;
        let (bsh, bv, bng) = self.view(b)?;
        let out_shape = if ash == bsh {
            ash.clone()
        } else if bv.len() == 1 {
            ash.clone()
        } else if av.len() == 1 {
            bsh.clone()
        } else {
            return Err(Error::ShapeMismatch {
                op: kind.name(),
                lhs: ash,
                rhs: bsh,
            });
        };
        if kind == BinaryKind::Div && bv.iter().any(|&x| x == 0.0) {
            return Err(Error::DivisionByZero);
        }
        let n: usize = out_shape.iter().product();
        let (alen, blen) = (av.len(), bv.len());
        let out: Vec<f64> = (0..n)
            .map(|i| {
                kind.apply(
                    av[if alen == 1 { 0 } else { i }],
                    bv[if blen == 1 { 0 } else { i }],
                )
            })
            .collect();
        ensure_finite(kind.name(), &out)?;
        Ok(self.push(
            out_shape,
            out,
            Op::Binary {
                kind,
                a: a.index,
                b: b.index,
            },
            ang || bng,
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ash, av, ang) = self.view(a)?;
        let (bsh, bv, bng) = self.view(b)?;
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![0.0; m * n];
        matmul_kernel(&av, &bv, m, k, n, &mut out);
        ensure_finite("matmul", &out)?;
        Ok(self.push(
            vec![m, n],
            out,
            Op::Matmul {
                a: a.index,
                b: b.index,
            },
            ang || bng,
        ))
    }

    /// Batched matmul: [B, m, k] x [B, k, n] -> [B, m, n].
    pub fn bmm(&self, a: Var, b: Var) -> Result<Var> {
        let (ash, av, ang) = self.view(a)?;
        let (bsh, bv, bng) = self.view(b)?;
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (bt, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let mut out = vec![0.0; bt * m * n];
        for t in 0..bt {
            matmul_kernel(
                &av[t * m * k..(t + 1) * m * k],
                &bv[t * k * n..(t + 1) * k * n],
                m,
                k,
                n,
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        ensure_finite("bmm", &out)?;
        Ok(self.push(
            ash.clone()[..2]
                .iter()
                .copied()
                .chain([n])
                .collect::<Vec<_>>(),
            out,
            Op::Bmm {
                a: a.index,
                b: b.index,
            },
            ang || bng,
        ))
    }

    /// Numerically stable softmax over the last axis (max subtraction).
    pub fn softmax_lastdim(&self, x: Var) -> Result<Var> {
        let (shape, xv, ng) = self.view(x)?;
        let d = *shape.last().expect("tensor rank is at least 1");
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[r * d..(r + 1) * d];
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - m).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        ensure_finite("softmax", &out)?;
        Ok(self.push(shape, out, Op::Softmax { x: x.index }, ng))
    }

    /// Layer normalization over the last axis with affine parameters of
    /// shape [d]. Population variance, epsilon 1e-5.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (shape, xv, xng) = self.view(x)?;
        let (gsh, gv, gng) = self.view(gamma)?;
        let (bsh, bv, bng) = self.view(beta)?;
        let d = *shape.last().expect("tensor rank is at least 1");
        if gsh != [d] || bsh != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: gsh,
                rhs: bsh,
            });
        }
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            let orow = &mut out[r * d..(r + 1) * d];
            for j in 0..d {
                orow[j] = (row[j] - mean) * inv * gv[j] + bv[j];
            }
        }
        ensure_finite("layer_norm", &out)?;
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x: x.index,
                gamma: gamma.index,
                beta: beta.index,
            },
            xng || gng || bng,
        ))
    }

    /// Add a [d] vector to every row of a [..., d] tensor.
    pub fn add_rowvec(&self, x: Var, v: Var) -> Result<Var> {
        let (shape, xv, xng) = self.view(x)?;
        let (vsh, vv, vng) = self.view(v)?;
        let d = *shape.last().expect("tensor rank is at least 1");
        if vsh != [d] {
            return Err(Error::ShapeMismatch {
                op: "add_rowvec",
                lhs: shape,
                rhs: vsh,
            });
        }
        let out: Vec<f64> = xv.iter().enumerate().map(|(i, &x)| x + vv[i % d]).collect();
        ensure_finite("add_rowvec", &out)?;
        Ok(self.push(
            shape,
            out,
            Op::AddRowVec {
                x: x.index,
                v: v.index,
            },
            xng || vng,
        ))
    }

    /// Tile a tensor n times along a new leading axis.
    pub fn repeat_leading(&self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::InvalidArg("repeat_leading: n must be positive".into()));
        }
        let (shape, xv, ng) = self.view(x)?;
        let mut out = Vec::with_capacity(n * xv.len());
        for _ in 0..n {
            out.extend_from_slice(&xv);
        }
        let mut out_shape = Vec::with_capacity(shape.len() + 1);
        out_shape.push(n);
        out_shape.extend_from_slice(&shape);
        Ok(self.push(out_shape, out, Op::RepeatLeading { x: x.index }, ng))
    }

    /// Metadata-only reshape; shares the underlying storage.
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let (xsh, xv, ng) = self.view(x)?;
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.iter().any(|&e| e == 0) || expected != xv.len() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                msg: format!("incompatible with input shape {xsh:?}"),
            });
        }
        Ok(self.push_arc(shape.to_vec(), xv, Op::Reshape { x: x.index }, ng))
    }

    /// General axis permutation: out extent i equals input extent perm[i].
    pub fn transpose(&self, x: Var, perm: &[usize]) -> Result<Var> {
        let (xsh, xv, ng) = self.view(x)?;
        let mut seen = perm.to_vec();
        seen.sort_unstable();
        if perm.len() != xsh.len() || seen != (0..xsh.len()).collect::<Vec<_>>() {
            return Err(Error::InvalidArg(format!(
                "transpose: {perm:?} is not a permutation of {} axes",
                xsh.len()
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xsh[p]).collect();
        let mut out = vec![0.0; xv.len()];
        for_each_transposed(&xsh, perm, |o, i| out[o] = xv[i]);
        Ok(self.push(
            out_shape,
            out,
            Op::Transpose {
                x: x.index,
                perm: perm.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum_all(&self, x: Var) -> Result<Var> {
        let (_, xv, ng) = self.view(x)?;
        let s = xv.iter().sum::<f64>();
        ensure_finite("sum_all", &[s])?;
        Ok(self.push(vec![1], vec![s], Op::SumAll { x: x.index }, ng))
    }

    pub fn mean_all(&self, x: Var) -> Result<Var> {
        let n = self.view(x)?.1.len();
        let s = self.sum_all(x)?;
        let c = self.scalar_const(1.0 / n as f64)?;
        self.mul(s, c)
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack0(&self, items: &[Var]) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::InvalidArg("stack0: no inputs".into()));
        }
        let (first_shape, _, _) = self.view(items[0])?;
        let mut out = Vec::new();
        let mut ng = false;
        for &it in items {
            let (sh, v, g) = self.view(it)?;
            if sh != first_shape {
                return Err(Error::ShapeMismatch {
                    op: "stack0",
                    lhs: first_shape,
                    rhs: sh,
                });
            }
            out.extend_from_slice(&v);
            ng |= g;
        }
        let mut out_shape = Vec::with_capacity(first_shape.len() + 1);
        out_shape.push(items.len());
        out_shape.extend_from_slice(&first_shape);
        Ok(self.push(
            out_shape,
            out,
            Op::Stack {
                items: items.iter().map(|v| v.index).collect(),
            },
            ng,
        ))
    }

    /// Select one slice along the leading axis, dropping that axis.
    pub fn index0(&self, x: Var, at: usize) -> Result<Var> {
        let (xsh, xv, ng) = self.view(x)?;
        if at >= xsh[0] {
            return Err(Error::InvalidArg(format!(
                "index0: index {at} out of range for leading extent {}",
                xsh[0]
            )));
        }
        let out_shape: Vec<usize> = if xsh.len() > 1 {
            xsh[1..].to_vec()
        } else {
            vec![1]
        };
        let block: usize = out_shape.iter().product();
        let out = xv[at * block..(at + 1) * block].to_vec();
        Ok(self.push(out_shape, out, Op::Index0 { x: x.index, at }, ng))
    }

    // ---- spatial ----

    /// Bilinear resample of the trailing two axes of a [h, w] or [c, h, w]
    /// tensor. Output dims are explicit; `ry`, `rx` set the sample positions
    /// src = (i + 0.5) / r - 0.5 with edge clamping.
    pub fn resize_bilinear(
        &self,
        x: Var,
        out_h: usize,
        out_w: usize,
        ry: f64,
        rx: f64,
    ) -> Result<Var> {
        let (xsh, xv, ng) = self.view(x)?;
        if xsh.len() < 2 || xsh.len() > 3 {
            return Err(Error::InvalidShape {
                op: "resize_bilinear",
                shape: xsh,
                msg: "expected rank 2 or 3".into(),
            });
        }
        if out_h == 0 || out_w == 0 || !(ry.is_finite() && rx.is_finite()) || ry <= 0.0 || rx <= 0.0
        {
            return Err(Error::InvalidArg(format!(
                "resize_bilinear: bad target {out_h}x{out_w} or ratios ({ry}, {rx})"
            )));
        }
        let (c, h, w) = if xsh.len() == 3 {
            (xsh[0], xsh[1], xsh[2])
        } else {
            (1, xsh[0], xsh[1])
        };
        let ty = lin_taps(out_h, h, ry);
        let tx = lin_taps(out_w, w, rx);
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &xv[ch * h * w..(ch + 1) * h * w];
            let oplane = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for (oy, t_y) in ty.iter().enumerate() {
                let r0 = &plane[t_y.i0 * w..t_y.i0 * w + w];
                let r1 = &plane[t_y.i1 * w..t_y.i1 * w + w];
                for (ox, t_x) in tx.iter().enumerate() {
                    let a = r0[t_x.i0];
                    let b = r0[t_x.i1];
                    let c2 = r1[t_x.i0];
                    let d = r1[t_x.i1];
                    let top = a + t_x.w * (b - a);
                    let bot = c2 + t_x.w * (d - c2);
                    oplane[oy * out_w + ox] = top + t_y.w * (bot - top);
                }
            }
        }
        ensure_finite("resize_bilinear", &out)?;
        let out_shape = if xsh.len() == 3 {
            vec![c, out_h, out_w]
        } else {
            vec![out_h, out_w]
        };
        Ok(self.push(
            out_shape,
            out,
            Op::Bilinear {
                x: x.index,
                ry,
                rx,
            },
            ng,
        ))
    }

    /// 3x3 correlation with a fixed (non-differentiable) kernel and
    /// replicate padding. Same output size as the input.
    pub fn conv3x3(&self, x: Var, kernel: &[f64; 9]) -> Result<Var> {
        let (xsh, xv, ng) = self.view(x)?;
        if xsh.len() != 2 {
            return Err(Error::InvalidShape {
                op: "conv3x3",
                shape: xsh,
                msg: "expected rank 2".into(),
            });
        }
        let (h, w) = (xsh[0], xsh[1]);
        let mut out = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for u in 0..3 {
                    let ci = (i as i64 + u as i64 - 1).clamp(0, h as i64 - 1) as usize;
                    for v in 0..3 {
                        let cj = (j as i64 + v as i64 - 1).clamp(0, w as i64 - 1) as usize;
                        s += kernel[u * 3 + v] * xv[ci * w + cj];
                    }
                }
                out[i * w + j] = s;
            }
        }
        ensure_finite("conv3x3", &out)?;
        Ok(self.push(
            xsh,
            out,
            Op::Conv3x3 {
                x: x.index,
                kernel: *kernel,
            },
            ng,
        ))
    }

    /// Replicate-pad the trailing two axes to at least the current size.
    pub fn pad_edge(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (xsh, xv, ng) = self.view(x)?;
        if xsh.len() < 2 || xsh.len() > 3 {
            return Err(Error::InvalidShape {
                op: "pad_edge",
                shape: xsh,
                msg: "expected rank 2 or 3".into(),
            });
        }
        let (c, h, w) = if xsh.len() == 3 {
            (xsh[0], xsh[1], xsh[2])
        } else {
            (1, xsh[0], xsh[1])
        };
        if out_h < h || out_w < w {
            return Err(Error::InvalidArg(format!(
                "pad_edge: target {out_h}x{out_w} smaller than input {h}x{w}"
            )));
        }
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &xv[ch * h * w..(ch + 1) * h * w];
            let oplane = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for i in 0..out_h {
                let si = i.min(h - 1);
                for j in 0..out_w {
                    oplane[i * out_w + j] = plane[si * w + j.min(w - 1)];
                }
            }
        }
        let out_shape = if xsh.len() == 3 {
            vec![c, out_h, out_w]
        } else {
            vec![out_h, out_w]
        };
        Ok(self.push(out_shape, out, Op::PadEdge { x: x.index }, ng))
    }

    /// Top-left crop of the trailing two axes.
    pub fn crop(&self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (xsh, xv, ng) = self.view(x)?;
        if xsh.len() < 2 || xsh.len() > 3 {
            return Err(Error::InvalidShape {
                op: "crop",
                shape: xsh,
                msg: "expected rank 2 or 3".into(),
            });
        }
        let (c, h, w) = if xsh.len() == 3 {
            (xsh[0], xsh[1], xsh[2])
        } else {
            (1, xsh[0], xsh[1])
        };
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(Error::InvalidArg(format!(
                "crop: target {out_h}x{out_w} incompatible with input {h}x{w}"
            )));
        }
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            let plane = &xv[ch * h * w..(ch + 1) * h * w];
            let oplane = &mut out[ch * out_h * out_w..(ch + 1) * out_h * out_w];
            for i in 0..out_h {
                oplane[i * out_w..(i + 1) * out_w].copy_from_slice(&plane[i * w..i * w + out_w]);
            }
        }
        let out_shape = if xsh.len() == 3 {
            vec![c, out_h, out_w]
        } else {
            vec![out_h, out_w]
        };
        Ok(self.push(out_shape, out, Op::Crop { x: x.index }, ng))
    }

    // ---- backward ----

    /// Reverse replay from a scalar loss. Visits each recorded node exactly
    /// once in reverse execution order and adds leaf gradients into their
    /// persistent accumulators, so repeated calls accumulate.
    pub fn backward(&self, loss: Var) -> Result<()> {
        self.check(loss)?;
        let mut nodes = self.nodes.borrow_mut();
        {
            let l = &nodes[loss.index as usize];
            if l.value.len() != 1 {
                return Err(Error::LossNotScalar {
                    shape: l.shape.clone(),
                });
            }
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.index as usize] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = nodes[i].op {
                if let Some(acc) = nodes[i].acc.as_mut() {
                    for (a, gi) in acc.iter_mut().zip(g.iter()) {
                        *a += *gi;
                    }
                }
                continue;
            }
            let op = nodes[i].op.clone();
            let out_val = Arc::clone(&nodes[i].value);
            let out_shape = nodes[i].shape.clone();

            match op {
                Op::Leaf => unreachable!("handled above"),
                Op::Unary { kind, a } => {
                    let ai = a as usize;
                    if !nodes[ai].needs_grad {
                        continue;
                    }
                    let av = Arc::clone(&nodes[ai].value);
                    let da = grads[ai].get_or_insert_with(|| vec![0.0; av.len()]);
                    match kind {
                        UnaryKind::Neg => {
                            for (d, gi) in da.iter_mut().zip(g.iter()) {
                                *d -= *gi;
                            }
                        }
                        UnaryKind::Abs => {
                            for k in 0..da.len() {
                                let s = if av[k] > 0.0 {
                                    1.0
                                } else if av[k] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                };
                                da[k] += g[k] * s;
                            }
                        }
                        UnaryKind::Relu => {
                            for k in 0..da.len() {
                                if av[k] > 0.0 {
                                    da[k] += g[k];
                                }
                            }
                        }
                        UnaryKind::Tanh => {
                            for k in 0..da.len() {
                                da[k] += g[k] * (1.0 - out_val[k] * out_val[k]);
                            }
                        }
                        UnaryKind::Exp => {
                            for k in 0..da.len() {
                                da[k] += g[k] * out_val[k];
                            }
                        }
                    }
                }
                Op::Binary { kind, a, b } => {
                    let (ai, bi) = (a as usize, b as usize);
                    let av = Arc::clone(&nodes[ai].value);
                    let bv = Arc::clone(&nodes[bi].value);
                    let (alen, blen) = (av.len(), bv.len());
                    if nodes[ai].needs_grad {
                        let da = grads[ai].get_or_insert_with(|| vec![0.0; alen]);
                        for (k, gi) in g.iter().enumerate() {
                            let aj = if alen == 1 { 0 } else { k };
                            let bj = if blen == 1 { 0 } else { k };
                            da[aj] += gi * kind.partials(av[aj], bv[bj]).0;
                        }
                    }
                    if nodes[bi].needs_grad {
                        let db = grads[bi].get_or_insert_with(|| vec![0.0; blen]);
                        for (k, gi) in g.iter().enumerate() {
                            let aj = if alen == 1 { 0 } else { k };
                            let bj = if blen == 1 { 0 } else { k };
                            db[bj] += gi * kind.partials(av[aj], bv[bj]).1;
                        }
                    }
                }
                Op::Matmul { a, b } => {
                    let (ai, bi) = (a as usize, b as usize);
                    let av = Arc::clone(&nodes[ai].value);
                    let bv = Arc::clone(&nodes[bi].value);
                    let (m, k) = (nodes[ai].shape[0], nodes[ai].shape[1]);
                    let nn = nodes[bi].shape[1];
                    if nodes[ai].needs_grad {
                        let da = grads[ai].get_or_insert_with(|| vec![0.0; av.len()]);
                        matmul_grad_a(&g, &bv, m, k, nn, da);
                    }
                    if nodes[bi].needs_grad {
                        let db = grads[bi].get_or_insert_with(|| vec![0.0; bv.len()]);
                        matmul_grad_b(&av, &g, m, k, nn, db);
                    }
                }
                Op::Bmm { a, b } => {
                    let (ai, bi) = (a as usize, b as usize);
                    let av = Arc::clone(&nodes[ai].value);
                    let bv = Arc::clone(&nodes[bi].value);
                    let (bt, m, k) = (nodes[ai].shape[0], nodes[ai].shape[1], nodes[ai].shape[2]);
                    let nn = nodes[bi].shape[2];
                    if nodes[ai].needs_grad {
                        let da = grads[ai].get_or_insert_with(|| vec![0.0; av.len()]);
                        for t in 0..bt {
                            matmul_grad_a(
                                &g[t * m * nn..(t + 1) * m * nn],
                                &bv[t * k * nn..(t + 1) * k * nn],
                                m,
                                k,
                                nn,
                                &mut da[t * m * k..(t + 1) * m * k],
                            );
                        }
                    }
                    if nodes[bi].needs_grad {
                        let db = grads[bi].get_or_insert_with(|| vec![0.0; bv.len()]);
                        for t in 0..bt {
                            matmul_grad_b(
                                &av[t * m * k..(t + 1) * m * k],
                                &g[t * m * nn..(t + 1) * m * nn],
                                m,
                                k,
                                nn,
                                &mut db[t * k * nn..(t + 1) * k * nn],
                            );
                        }
                    }
                }
                Op::Softmax { x } => {
                    let xi = x as usize;
                    if !nodes[xi].needs_grad {
                        continue;
                    }
                    let d = *out_shape.last().expect("rank at least 1");
                    let rows = out_val.len() / d;
                    let dx = grads[xi].get_or_insert_with(|| vec![0.0; out_val.len()]);
                    for r in 0..rows {
                        let s = &out_val[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = s.iter().zip(gr).map(|(si, gi)| si * gi).sum();
                        let dxr = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxr[j] += s[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (xi, gi_, bi) = (x as usize, gamma as usize, beta as usize);
                    let xv = Arc::clone(&nodes[xi].value);
                    let gv = Arc::clone(&nodes[gi_].value);
                    let d = *out_shape.last().expect("rank at least 1");
                    let rows = xv.len() / d;
                    for r in 0..rows {
                        let row = &xv[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        if nodes[bi].needs_grad {
                            let db = grads[bi].get_or_insert_with(|| vec![0.0; d]);
                            for j in 0..d {
                                db[j] += gr[j];
                            }
                        }
                        if nodes[gi_].needs_grad {
                            let dg = grads[gi_].get_or_insert_with(|| vec![0.0; d]);
                            for j in 0..d {
                                dg[j] += gr[j] * xhat[j];
                            }
                        }
                        if nodes[xi].needs_grad {
                            let dxhat: Vec<f64> =
                                (0..d).map(|j| gr[j] * gv[j]).collect();
                            let m1 = dxhat.iter().sum::<f64>() / d as f64;
                            let m2 = dxhat
                                .iter()
                                .zip(&xhat)
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                                / d as f64;
                            let dx = grads[xi].get_or_insert_with(|| vec![0.0; xv.len()]);
                            let dxr = &mut dx[r * d..(r + 1) * d];
                            for j in 0..d {
                                dxr[j] += inv * (dxhat[j] - m1 - xhat[j] * m2);
                            }
                        }
                    }
                }
                Op::AddRowVec { x, v } => {
                    let (xi, vi) = (x as usize, v as usize);
                    let d = *out_shape.last().expect("rank at least 1");
                    if nodes[xi].needs_grad {
                        let dx = grads[xi].get_or_insert_with(|| vec![0.0; g.len()]);
                        for (dk, gk) in dx.iter_mut().zip(g.iter()) {
                            *dk += *gk;
                        }
                    }
                    if nodes[vi].needs_grad {
                        let dv = grads[vi].get_or_insert_with(|| vec![0.0; d]);
                        for (k, gk) in g.iter().enumerate() {
                            dv[k % d] += *gk;
                        }
                    }
                }
                Op::RepeatLeading { x } => {
                    let xi = x as usize;
                    if !nodes[xi].needs_grad {
                        continue;
                    }
                    let block = nodes[xi].value.len();
                    let dx = grads[xi].get_or_insert_with(|| vec![0.0; block]);
                    for (k, gk) in g.iter().enumerate() {
                        dx[k % block] += *gk;
                    }
                }
                Op::Reshape { x } => {
                    let xi = x as usize;
                    if !nodes[xi].needs_grad {
                        continue;
                    }
                    let dx = grads[xi].get_or_insert_with(|| vec![0.0; g.len()]);
                    for (dk, gk) in dx.iter_mut().zip(g.iter()) {
                        *dk += *gk;
                    }
                }
                Op::Transpose { x, perm } => {
                    let xi = x as usize;
                    if !nodes[xi].needs_grad {
                        continue;
                    }
                    let in_shape = nodes[xi].shape.clone();
                    let dx = grads[xi].get_or_insert_with(|| vec![0.0; g.len()]);
                    for_each_transposed(&in_shape, &perm, |o, i_| dx[i_] += g[o]);
                }
                Op::SumAll { x } => {
                    let xi = x as usize;
                    if !nodes[xi].needs_grad {
                        continue;
                    }
                    let len = nodes[xi].value.len();
                    let dx = grads[xi].get_or_insert_with(|| vec![0.0; len]);
                    for dk in dx.iter_mut() {
                        *dk += g[0];
                    }
                }
                Op::Stack { items } => {
                    let block = if out_shape.len() > 1 {
                        out_shape[1..].iter().product::<usize>()
                    } else {
                        1
                    };
                    for (t, &it) in items.iter().enumerate() {
                        let ti = it as usize;
                        if !nodes[ti].needs_grad {
                            continue;
                        }
                        let dt = grads[ti].get_or_insert_with(|| vec![0.0; block]);
                        for (dk, gk) in dt.iter_mut().zip(&g[t * block..(t + 1) * block]) {
                            *dk += *gk;
                        }
                    }
                }
                Op::Index0 { x, at } => {
                    let xi = x as usize;
                    if !nodes[xi].needs_grad {
                        continue;
                    }
                    let len = nodes[xi].value.len();
                    let block = g.len();
                    let dx = grads[xi].get_or_insert_with(|| vec![0.0; len]);
                    for (k, gk) in g.iter().enumerate() {
                        dx[at * block + k] += *gk;
                    }
                }
                Op::Bilinear { x, ry, rx } => {
                    let xi = x as usize;
                    if !nodes[xi].needs_grad {
                        continue;
                    }
                    let in_shape = nodes[xi].shape.clone();
                    let (c, h, w) = if in_shape.len() == 3 {
                        (in_shape[0], in_shape[1], in_shape[2])
                    } else {
                        (1, in_shape[0], in_shape[1])
                    };
                    let (out_h, out_w) = {
                        let r = out_shape.len();
                        (out_shape[r - 2], out_shape[r - 1])
                    };
                    let ty = lin_taps(out_h, h, ry);
                    let tx = lin_taps(out_w, w, rx);
                    let dx = grads[xi].get_or_insert_with(|| vec![0.0; c * h * w]);
                    for ch in 0..c {
                        let dplane = &mut dx[ch * h * w..(ch + 1) * h * w];
                        let gplane = &g[ch * out_h * out_w..(ch + 1) * out_h * out_w];
                        for (oy, t_y) in ty.iter().enumerate() {
                            for (ox, t_x) in tx.iter().enumerate() {
                                let gv = gplane[oy * out_w + ox];
                                let (wy, wx) = (t_y.w, t_x.w);
                                dplane[t_y.i0 * w + t_x.i0] += gv * (1.0 - wy) * (1.0 - wx);
                                dplane[t_y.i0 * w + t_x.i1] += gv * (1.0 - wy) * wx;
                                dplane[t_y.i1 * w + t_x.i0] += gv * wy * (1.0 - wx);
                                dplane[t_y.i1 * w + t_x.i1] += gv * wy * wx;
                            }
                        }
                    }
                }
                Op::Conv3x3 { x, kernel } => {
                    let xi = x as usize;
                    if !nodes[xi].needs_grad {
                        continue;
                    }
                    let (h, w) = (out_shape[0], out_shape[1]);
                    let dx = grads[xi].get_or_insert_with(|| vec![0.0; h * w]);
                    for i2 in 0..h {
                        for j in 0..w {
                            let gv = g[i2 * w + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for u in 0..3 {
                                let ci = (i2 as i64 + u as i64 - 1).clamp(0, h as i64 - 1) as usize;
                                for v in 0..3 {
                                    let cj =
                                        (j as i64 + v as i64 - 1).clamp(0, w as i64 - 1) as usize;
                                    dx[ci * w + cj] += kernel[u * 3 + v] * gv;
                                }
                            }
                        }
                    }
                }
                Op::PadEdge { x } => {
                    let xi = x as usize;
                    if !nodes[xi].needs_grad {
                        continue;
                    }
                    let in_shape = nodes[xi].shape.clone();
                    let (c, h, w) = if in_shape.len() == 3 {
                        (in_shape[0], in_shape[1], in_shape[2])
                    } else {
                        (1, in_shape[0], in_shape[1])
                    };
                    let r = out_shape.len();
                    let (out_h, out_w) = (out_shape[r - 2], out_shape[r - 1]);
                    let dx = grads[xi].get_or_insert_with(|| vec![0.0; c * h * w]);
                    for ch in 0..c {
                        let dplane = &mut dx[ch * h * w..(ch + 1) * h * w];
                        let gplane = &g[ch * out_h * out_w..(ch + 1) * out_h * out_w];
                        for i2 in 0..out_h {
                            let si = i2.min(h - 1);
                            for j in 0..out_w {
                                dplane[si * w + j.min(w - 1)] += gplane[i2 * out_w + j];
                            }
                        }
                    }
                }
                Op::Crop { x } => {
                    let xi = x as usize;
                    if !nodes[xi].needs_grad {
                        continue;
                    }
                    let in_shape = nodes[xi].shape.clone();
                    let (c, h, w) = if in_shape.len() == 3 {
                        (in_shape[0], in_shape[1], in_shape[2])
                    } else {
                        (1, in_shape[0], in_shape[1])
                    };
                    let r = out_shape.len();
                    let (out_h, out_w) = (out_shape[r - 2], out_shape[r - 1]);
                    let dx = grads[xi].get_or_insert_with(|| vec![0.0; c * h * w]);
                    for ch in 0..c {
                        let dplane = &mut dx[ch * h * w..(ch + 1) * h * w];
                        let gplane = &g[ch * out_h * out_w..(ch + 1) * out_h * out_w];
                        for i2 in 0..out_h {
                            for j in 0..out_w {
                                dplane[i2 * w + j] += gplane[i2 * out_w + j];
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_mul_forward_and_backward() {
        let tape = Tape::new();
        let a = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]), true);
        let b = tape.leaf(&t(&[3], &[4.0, 5.0, 6.0]), true);
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum_all(p).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[32.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().unwrap().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(tape.grad(b).unwrap().unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn scalar_broadcast_both_sides() {
        let tape = Tape::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let c = tape.leaf(&t(&[1], &[10.0]), true);
        let left = tape.mul(a, c).unwrap();
        assert_eq!(tape.value(left).unwrap().data(), &[10.0, 20.0, 30.0, 40.0]);
        let right = tape.sub(c, a).unwrap();
        assert_eq!(tape.value(right).unwrap().data(), &[9.0, 8.0, 7.0, 6.0]);
        let s = tape.sum_all(left).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(c).unwrap().unwrap().data(), &[10.0]);
    }

    #[test]
    fn mismatched_shapes_rejected() {
        let tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]), false);
        let b = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]), false);
        assert!(matches!(
            tape.add(a, b),
            Err(Error::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn div_by_zero_is_an_error() {
        let tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]), false);
        let b = tape.leaf(&t(&[2], &[4.0, 0.0]), false);
        assert!(matches!(tape.div(a, b), Err(Error::DivisionByZero)));
    }

    #[test]
    fn overflow_is_reported_not_propagated() {
        let tape = Tape::new();
        let a = tape.leaf(&t(&[1], &[1e308]), false);
        let b = tape.leaf(&t(&[1], &[1e308]), false);
        assert!(matches!(tape.add(a, b), Err(Error::NonFinite { .. })));
        let big = tape.leaf(&t(&[1], &[1000.0]), false);
        assert!(matches!(tape.exp(big), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn cross_tape_use_is_an_error() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.leaf(&t(&[1], &[1.0]), false);
        let b = t2.leaf(&t(&[1], &[2.0]), false);
        assert!(matches!(t2.add(a, b), Err(Error::TapeMismatch)));
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]), true);
        let b = tape.neg(a).unwrap();
        assert!(matches!(
            tape.backward(b),
            Err(Error::LossNotScalar { .. })
        ));
    }

    #[test]
    fn repeated_backward_accumulates_and_zero_resets() {
        let tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[3.0, 4.0]), true);
        let s = tape.sum_all(a).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().unwrap().data(), &[2.0, 2.0]);
        tape.zero_grads();
        assert_eq!(tape.grad(a).unwrap().unwrap().data(), &[0.0, 0.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn untracked_leaf_has_no_grad() {
        let tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]), false);
        let b = tape.leaf(&t(&[2], &[5.0, 5.0]), true);
        let s = tape.sum_all(tape.mul(a, b).unwrap()).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(a).unwrap().is_none());
        assert_eq!(tape.grad(b).unwrap().unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let mut rng = crate::rng::SplitMix64::new(17);
        let (m, k, n) = (5, 4, 3);
        let a: Vec<f64> = (0..m * k).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let mut want = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a[i * k + l] * b[l * n + j];
                }
                want[i * n + j] = s;
            }
        }
        let tape = Tape::new();
        let av = tape.leaf(&t(&[m, k], &a), false);
        let bv = tape.leaf(&t(&[k, n], &b), false);
        let c = tape.matmul(av, bv).unwrap();
        let got = tape.value(c).unwrap();
        assert_eq!(got.shape(), &[m, n]);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn matmul_backward_exact_on_small_case() {
        // f = sum(A B), A = [[1, 2]], B = [[3], [4]] -> f = 11,
        // df/dA = [[3, 4]], df/dB = [[1], [2]].
        let tape = Tape::new();
        let a = tape.leaf(&t(&[1, 2], &[1.0, 2.0]), true);
        let b = tape.leaf(&t(&[2, 1], &[3.0, 4.0]), true);
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum_all(c).unwrap();
        assert_eq!(tape.value(s).unwrap().data(), &[11.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap().unwrap().data(), &[3.0, 4.0]);
        assert_eq!(tape.grad(b).unwrap().unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn bmm_equals_per_batch_matmul() {
        let mut rng = crate::rng::SplitMix64::new(5);
        let (bt, m, k, n) = (3, 2, 4, 2);
        let a: Vec<f64> = (0..bt * m * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b: Vec<f64> = (0..bt * k * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let tape = Tape::new();
        let av = tape.leaf(&t(&[bt, m, k], &a), false);
        let bv = tape.leaf(&t(&[bt, k, n], &b), false);
        let c = tape.value(tape.bmm(av, bv).unwrap()).unwrap();
        for tb in 0..bt {
            let sa = tape.leaf(&t(&[m, k], &a[tb * m * k..(tb + 1) * m * k]), false);
            let sb = tape.leaf(&t(&[k, n], &b[tb * k * n..(tb + 1) * k * n]), false);
            let sc = tape.value(tape.matmul(sa, sb).unwrap()).unwrap();
            for (x, y) in c.data()[tb * m * n..(tb + 1) * m * n]
                .iter()
                .zip(sc.data())
            {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_known_row() {
        // softmax([0, ln 3]) = [1/4, 3/4].
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[0.0, 3.0f64.ln()]), false);
        let s = tape.value(tape.softmax_lastdim(x).unwrap()).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, -5.0, 0.0, 5.0]), false);
        let s = tape.value(tape.softmax_lastdim(x).unwrap()).unwrap();
        for r in 0..2 {
            let sum: f64 = s.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let shifted = tape.leaf(&t(&[2, 3], &[101.0, 102.0, 103.0, 95.0, 100.0, 105.0]), false);
        let s2 = tape.value(tape.softmax_lastdim(shifted).unwrap()).unwrap();
        for (a, b) in s.data().iter().zip(s2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 3.0, 10.0]), false);
        let gamma = tape.leaf(&t(&[4], &[1.0; 4]), false);
        let beta = tape.leaf(&t(&[4], &[0.0; 4]), false);
        let y = tape.value(tape.layer_norm(x, gamma, beta).unwrap()).unwrap();
        for r in 0..2 {
            let row = &y.data()[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3); // epsilon shifts variance slightly
        }
    }

    #[test]
    fn layer_norm_affine_applied() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[1, 2], &[0.0, 2.0]), false);
        let gamma = tape.leaf(&t(&[2], &[2.0, 2.0]), false);
        let beta = tape.leaf(&t(&[2], &[10.0, 10.0]), false);
        let y = tape.value(tape.layer_norm(x, gamma, beta).unwrap()).unwrap();
        // x_hat close to [-1, 1], so y close to [8, 12].
        assert!((y.data()[0] - 8.0).abs() < 1e-2);
        assert!((y.data()[1] - 12.0).abs() < 1e-2);
    }

    #[test]
    fn transpose_roundtrip_is_identity() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3, 4], &(0..24).map(|v| v as f64).collect::<Vec<_>>()), false);
        let p = tape.transpose(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape_of(p).unwrap(), vec![4, 2, 3]);
        let back = tape.transpose(p, &[1, 2, 0]).unwrap();
        assert!(tape.value(back).unwrap().bit_eq(&tape.value(x).unwrap()));
    }

    #[test]
    fn transpose_2d_matches_manual() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let y = tape.value(tape.transpose(x, &[1, 0]).unwrap()).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn reshape_shares_and_backprops() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let y = tape.reshape(x, &[3, 2]).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[1.0; 6]);
        assert!(tape.reshape(x, &[4, 2]).is_err());
    }

    #[test]
    fn stack_index_roundtrip() {
        let tape = Tape::new();
        let a = tape.leaf(&t(&[2], &[1.0, 2.0]), true);
        let b = tape.leaf(&t(&[2], &[3.0, 4.0]), true);
        let s = tape.stack0(&[a, b]).unwrap();
        assert_eq!(tape.shape_of(s).unwrap(), vec![2, 2]);
        let b2 = tape.index0(s, 1).unwrap();
        assert_eq!(tape.value(b2).unwrap().data(), &[3.0, 4.0]);
        let loss = tape.sum_all(b2).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().unwrap().data(), &[0.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn repeat_leading_tiles_and_sums_grad() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]), true);
        let r = tape.repeat_leading(x, 3).unwrap();
        assert_eq!(tape.shape_of(r).unwrap(), vec![3, 2]);
        assert_eq!(tape.value(r).unwrap().data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let s = tape.sum_all(r).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn add_rowvec_broadcasts_rows() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let v = tape.leaf(&t(&[2], &[10.0, 20.0]), true);
        let y = tape.add_rowvec(x, v).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(v).unwrap().unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn bilinear_half_ratio_on_ramp() {
        // Width-8 ramp 0..7 at r = 1/2 samples positions 0.5, 2.5, 4.5, 6.5.
        let tape = Tape::new();
        let x = tape.leaf(&t(&[1, 8], &(0..8).map(|v| v as f64).collect::<Vec<_>>()), false);
        let y = tape.value(tape.resize_bilinear(x, 1, 4, 1.0, 0.5).unwrap()).unwrap();
        assert_eq!(y.shape(), &[1, 4]);
        for (g, w) in y.data().iter().zip(&[0.5, 2.5, 4.5, 6.5]) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn bilinear_preserves_constants_exactly() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::full(&[5, 7], 3.25).unwrap(), false);
        let y = tape.value(tape.resize_bilinear(x, 3, 4, 0.6, 0.55).unwrap()).unwrap();
        assert!(y.data().iter().all(|&v| v == 3.25));
        let up = tape.value(tape.resize_bilinear(x, 11, 13, 11.0 / 5.0, 13.0 / 7.0).unwrap()).unwrap();
        assert!(up.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn bilinear_unit_ratio_is_identity() {
        let mut rng = crate::rng::SplitMix64::new(23);
        let data: Vec<f64> = (0..35).map(|_| rng.uniform(0.1, 9.0)).collect();
        let tape = Tape::new();
        let x = tape.leaf(&t(&[5, 7], &data), false);
        let y = tape.value(tape.resize_bilinear(x, 5, 7, 1.0, 1.0).unwrap()).unwrap();
        assert!(y.bit_eq(&tape.value(x).unwrap()));
    }

    #[test]
    fn conv3x3_delta_kernel_is_identity() {
        let mut rng = crate::rng::SplitMix64::new(31);
        let data: Vec<f64> = (0..20).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut kernel = [0.0; 9];
        kernel[4] = 1.0;
        let tape = Tape::new();
        let x = tape.leaf(&t(&[4, 5], &data), false);
        let y = tape.value(tape.conv3x3(x, &kernel).unwrap()).unwrap();
        assert!(y.bit_eq(&tape.value(x).unwrap()));
    }

    #[test]
    fn pad_then_crop_roundtrips() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        let p = tape.pad_edge(x, 4, 4).unwrap();
        let v = tape.value(p).unwrap();
        // Bottom-right corner replicates the last row and column.
        assert_eq!(v.at2(3, 3), 6.0);
        assert_eq!(v.at2(0, 3), 3.0);
        let c = tape.crop(p, 2, 3).unwrap();
        assert!(tape.value(c).unwrap().bit_eq(&tape.value(x).unwrap()));
        let s = tape.sum_all(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn mean_all_scales_sum() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[4], &[1.0, 2.0, 3.0, 6.0]), true);
        let m = tape.mean_all(x).unwrap();
        assert_eq!(tape.value(m).unwrap().data(), &[3.0]);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap().unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn value_and_shape_accessors() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        assert_eq!(tape.shape_of(x).unwrap(), vec![2, 2]);
        assert_eq!(tape.value(x).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.num_nodes(), 1);
    }
}
