//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Var`] computes its value eagerly. When the tape is
//! recording and at least one operand is tracked, the operation is appended
//! to the tape together with whatever its backward rule needs. Node ids are
//! assigned in creation order, so walking the tape backwards is a reverse
//! topological traversal.

use std::cell::RefCell;
use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Variance floor used by [`Var::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone)]
struct Slot {
    id: Option<usize>,
    value: Tensor,
}

enum Op {
    Leaf,
    MatMul { a: Slot, b: Slot, ta: bool, tb: bool },
    Add(Option<usize>, Option<usize>),
    Sub(Option<usize>, Option<usize>),
    Mul(Slot, Slot),
    AddRow { x: Option<usize>, bias: Option<usize>, cols: usize },
    Scale { x: Option<usize>, alpha: f64 },
    Tanh { x: Option<usize>, out: Tensor },
    Sigmoid { x: Option<usize>, out: Tensor },
    Gelu { x: Slot },
    LayerNorm { x: Option<usize>, gain: Slot, bias: Option<usize>, xhat: Tensor, inv_std: Vec<f64> },
    Concat { parts: Vec<(Option<usize>, usize)>, axis: usize, rows: usize, cols: usize },
    Slice { x: Option<usize>, axis: usize, start: usize, rows: usize, cols: usize },
    Reshape { x: Option<usize> },
    Sum { x: Option<usize>, len: usize },
    RowContract { f: Slot, v: Slot, width: usize },
    Gather { x: Option<usize>, idx: Arc<Vec<usize>>, len: usize },
    SqErrSum { x: Option<usize>, diff: Tensor },
}

struct Node {
    op: Op,
    len: usize,
}

/// Records operations for reverse-mode differentiation.
///
/// A tape built with [`Tape::inference`] never records; the same model code
/// then runs as a plain forward pass.
pub struct Tape {
    recording: bool,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            recording: true,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn inference() -> Self {
        Tape {
            recording: false,
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        let id = if self.recording {
            Some(self.push(Op::Leaf, value.len()))
        } else {
            None
        };
        Var { tape: self, value, id }
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        Var {
            tape: self,
            value,
            id: None,
        }
    }

    fn push(&self, op: Op, len: usize) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, len });
        nodes.len() - 1
    }

    fn record<'t>(&'t self, value: Tensor, tracked: bool, op: impl FnOnce() -> Op) -> Var<'t> {
        let id = if self.recording && tracked {
            Some(self.push(op(), value.len()))
        } else {
            None
        };
        Var { tape: self, value, id }
    }

    /// Gradients of a scalar `output` with respect to every tracked node.
    pub fn backward(&self, output: &Var<'_>) -> Result<Gradients> {
        if output.value.len() != 1 {
            return Err(Error::NonScalarOutput(output.value.shape().to_vec()));
        }
        self.backward_with_seed(output, &Tensor::full(output.value.shape(), 1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`)
    /// back to every tracked node.
    pub fn backward_with_seed(&self, output: &Var<'_>, seed: &Tensor) -> Result<Gradients> {
        if seed.len() != output.value.len() {
            return Err(Error::shape("backward", output.value.shape(), seed.shape()));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        let Some(root) = output.id else {
            return Ok(Gradients { grads });
        };
        grads[root] = Some(seed.data().to_vec());

        for k in (0..=root).rev() {
            let Some(g) = grads[k].take() else { continue };
            let node = &nodes[k];
            match &node.op {
                Op::Leaf => {
                    grads[k] = Some(g);
                    continue;
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (ash, bsh) = (dims2(&a.value), dims2(&b.value));
                    let m = if *ta { ash.1 } else { ash.0 };
                    let n = if *tb { bsh.0 } else { bsh.1 };
                    if let Some(ia) = a.id {
                        let buf = buffer(&mut grads, ia, nodes[ia].len);
                        if *ta {
                            // A^T B = C  =>  dA = B dC^T  (or B^T dC^T)
                            gemm(b.data_slice(), bsh, *tb, &g, (m, n), true, buf, true);
                        } else {
                            gemm(&g, (m, n), false, b.data_slice(), bsh, !*tb, buf, true);
                        }
                    }
                    if let Some(ib) = b.id {
                        let buf = buffer(&mut grads, ib, nodes[ib].len);
                        if *tb {
                            gemm(&g, (m, n), true, a.data_slice(), ash, *ta, buf, true);
                        } else {
                            gemm(a.data_slice(), ash, !*ta, &g, (m, n), false, buf, true);
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(&mut grads, &nodes, *a, &g, 1.0);
                    add_into(&mut grads, &nodes, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads, &nodes, *a, &g, 1.0);
                    add_into(&mut grads, &nodes, *b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    if let Some(ia) = a.id {
                        let buf = buffer(&mut grads, ia, nodes[ia].len);
                        for ((o, gi), bv) in buf.iter_mut().zip(&g).zip(b.data_slice()) {
                            *o += gi * bv;
                        }
                    }
                    if let Some(ib) = b.id {
                        let buf = buffer(&mut grads, ib, nodes[ib].len);
                        for ((o, gi), av) in buf.iter_mut().zip(&g).zip(a.data_slice()) {
                            *o += gi * av;
                        }
                    }
                }
                Op::AddRow { x, bias, cols } => {
                    add_into(&mut grads, &nodes, *x, &g, 1.0);
                    if let Some(ib) = bias {
                        let buf = buffer(&mut grads, *ib, nodes[*ib].len);
                        for row in g.chunks(*cols) {
                            for (o, v) in buf.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::Scale { x, alpha } => add_into(&mut grads, &nodes, *x, &g, *alpha),
                Op::Tanh { x, out } => {
                    if let Some(ix) = x {
                        let buf = buffer(&mut grads, *ix, nodes[*ix].len);
                        for ((o, gi), y) in buf.iter_mut().zip(&g).zip(out.data()) {
                            *o += gi * (1.0 - y * y);
                        }
                    }
                }
                Op::Sigmoid { x, out } => {
                    if let Some(ix) = x {
                        let buf = buffer(&mut grads, *ix, nodes[*ix].len);
                        for ((o, gi), y) in buf.iter_mut().zip(&g).zip(out.data()) {
                            *o += gi * y * (1.0 - y);
                        }
                    }
                }
                Op::Gelu { x } => {
                    if let Some(ix) = x.id {
                        let buf = buffer(&mut grads, ix, nodes[ix].len);
                        for ((o, gi), v) in buf.iter_mut().zip(&g).zip(x.data_slice()) {
                            *o += gi * gelu_grad(*v);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let cols = gain.value.len();
                    if let Some(ib) = bias {
                        let buf = buffer(&mut grads, *ib, nodes[*ib].len);
                        for row in g.chunks(cols) {
                            for (o, v) in buf.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                    if let Some(ig) = gain.id {
                        let buf = buffer(&mut grads, ig, nodes[ig].len);
                        for (row, xr) in g.chunks(cols).zip(xhat.data().chunks(cols)) {
                            for ((o, v), xh) in buf.iter_mut().zip(row).zip(xr) {
                                *o += v * xh;
                            }
                        }
                    }
                    if let Some(ix) = x {
                        let buf = buffer(&mut grads, *ix, nodes[*ix].len);
                        let gw = gain.data_slice();
                        let n = cols as f64;
                        for (r, ((row, xr), o)) in g
                            .chunks(cols)
                            .zip(xhat.data().chunks(cols))
                            .zip(buf.chunks_mut(cols))
                            .enumerate()
                        {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for j in 0..cols {
                                let d = row[j] * gw[j];
                                mean_d += d;
                                mean_dx += d * xr[j];
                            }
                            mean_d /= n;
                            mean_dx /= n;
                            let s = inv_std[r];
                            for j in 0..cols {
                                let d = row[j] * gw[j];
                                o[j] += s * (d - mean_d - xr[j] * mean_dx);
                            }
                        }
                    }
                }
                Op::Concat { parts, axis, rows, cols } => {
                    let mut offset = 0;
                    for &(id, extent) in parts {
                        if let Some(ip) = id {
                            let buf = buffer(&mut grads, ip, nodes[ip].len);
                            if *axis == 0 {
                                let span = &g[offset * cols..(offset + extent) * cols];
                                for (o, v) in buf.iter_mut().zip(span) {
                                    *o += v;
                                }
                            } else {
                                for r in 0..*rows {
                                    let src = &g[r * cols + offset..r * cols + offset + extent];
                                    for (o, v) in buf[r * extent..(r + 1) * extent].iter_mut().zip(src) {
                                        *o += v;
                                    }
                                }
                            }
                        }
                        offset += extent;
                    }
                }
                Op::Slice { x, axis, start, rows, cols } => {
                    if let Some(ix) = x {
                        let buf = buffer(&mut grads, *ix, nodes[*ix].len);
                        if *axis == 0 {
                            let span = &mut buf[start * cols..(start + rows) * cols];
                            for (o, v) in span.iter_mut().zip(&g) {
                                *o += v;
                            }
                        } else {
                            let out_cols = g.len() / rows.max(&1);
                            for r in 0..*rows {
                                let dst = &mut buf[r * cols + start..r * cols + start + out_cols];
                                for (o, v) in dst.iter_mut().zip(&g[r * out_cols..(r + 1) * out_cols]) {
                                    *o += v;
                                }
                            }
                        }
                    }
                }
                Op::Reshape { x } => add_into(&mut grads, &nodes, *x, &g, 1.0),
                Op::Sum { x, len } => {
                    if let Some(ix) = x {
                        let buf = buffer(&mut grads, *ix, *len);
                        for o in buf.iter_mut() {
                            *o += g[0];
                        }
                    }
                }
                Op::RowContract { f, v, width } => {
                    let w = *width;
                    let rows = v.value.rows();
                    let d = if rows == 0 { 0 } else { g.len() / rows };
                    if let Some(iff) = f.id {
                        let buf = buffer(&mut grads, iff, nodes[iff].len);
                        let vv = v.data_slice();
                        for b in 0..rows {
                            for i in 0..d {
                                let gi = g[b * d + i];
                                let base = b * d * w + i * w;
                                for j in 0..w {
                                    buf[base + j] += gi * vv[b * w + j];
                                }
                            }
                        }
                    }
                    if let Some(iv) = v.id {
                        let buf = buffer(&mut grads, iv, nodes[iv].len);
                        let fv = f.data_slice();
                        for b in 0..rows {
                            for i in 0..d {
                                let gi = g[b * d + i];
                                let base = b * d * w + i * w;
                                for j in 0..w {
                                    buf[b * w + j] += gi * fv[base + j];
                                }
                            }
                        }
                    }
                }
                Op::Gather { x, idx, len } => {
                    if let Some(ix) = x {
                        let buf = buffer(&mut grads, *ix, *len);
                        for (&i, v) in idx.iter().zip(&g) {
                            buf[i] += v;
                        }
                    }
                }
                Op::SqErrSum { x, diff } => {
                    if let Some(ix) = x {
                        let buf = buffer(&mut grads, *ix, nodes[*ix].len);
                        for (o, d) in buf.iter_mut().zip(diff.data()) {
                            *o += 2.0 * g[0] * d;
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

impl Slot {
    fn data_slice(&self) -> &[f64] {
        self.value.data()
    }
}

fn dims2(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn buffer(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: Option<usize>, g: &[f64], alpha: f64) {
    let Some(id) = id else { return };
    match &mut grads[id] {
        Some(buf) => {
            for (o, v) in buf.iter_mut().zip(g) {
                *o += alpha * v;
            }
        }
        slot @ None => {
            debug_assert_eq!(nodes[id].len, g.len());
            *slot = Some(if alpha == 1.0 {
                g.to_vec()
            } else {
                g.iter().map(|v| alpha * v).collect()
            });
        }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the variable is untracked or was not
    /// reached from the output.
    pub fn get(&self, var: &Var<'_>) -> Tensor {
        match var.id.and_then(|id| self.grads.get(id)).and_then(Option::as_ref) {
            Some(g) => Tensor::from_parts(var.value.shape().to_vec(), g.clone()),
            None => Tensor::zeros(var.value.shape()),
        }
    }

    /// Moves the gradient out without copying.
    pub fn take(&mut self, var: &Var<'_>) -> Tensor {
        match var.id.and_then(|id| self.grads.get_mut(id)).and_then(Option::take) {
            Some(g) => Tensor::from_parts(var.value.shape().to_vec(), g),
            None => Tensor::zeros(var.value.shape()),
        }
    }
}

/// A tensor value attached to a tape.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    value: Tensor,
    id: Option<usize>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(id={:?}, {:?})", self.id, self.value)
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value.clone())
    }

    fn slot(&self) -> Slot {
        Slot {
            id: self.id,
            value: self.value.clone(),
        }
    }

    fn require_2d(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.value.shape().len() != 2 {
            return Err(Error::shape(op, self.value.shape(), &[0, 0]));
        }
        Ok((self.value.shape()[0], self.value.shape()[1]))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` where `op` optionally transposes.
    pub fn matmul_t(&self, other: &Var<'t>, trans_a: bool, trans_b: bool) -> Result<Var<'t>> {
        let ash = self.require_2d("matmul")?;
        let bsh = other.require_2d("matmul")?;
        let (m, k) = if trans_a { (ash.1, ash.0) } else { ash };
        let (k2, n) = if trans_b { (bsh.1, bsh.0) } else { bsh };
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value.data(), ash, trans_a, other.value.data(), bsh, trans_b, &mut out, false);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.tape.record(value, self.id.is_some() || other.id.is_some(), || Op::MatMul {
            a: self.slot(),
            b: other.slot(),
            ta: trans_a,
            tb: trans_b,
        }))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = self.value.zip_map(&other.value, "add", |a, b| a + b)?;
        Ok(self
            .tape
            .record(value, self.id.is_some() || other.id.is_some(), || Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = self.value.zip_map(&other.value, "sub", |a, b| a - b)?;
        Ok(self
            .tape
            .record(value, self.id.is_some() || other.id.is_some(), || Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let value = self.value.zip_map(&other.value, "mul", |a, b| a * b)?;
        Ok(self
            .tape
            .record(value, self.id.is_some() || other.id.is_some(), || Op::Mul(self.slot(), other.slot())))
    }

    /// Adds `bias` (length = number of columns) to every row.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (_, cols) = self.require_2d("add_row")?;
        if bias.value.len() != cols {
            return Err(Error::shape("add_row", self.shape(), bias.shape()));
        }
        let b = bias.value.data();
        let mut out = self.value.data().to_vec();
        for row in out.chunks_mut(cols) {
            for (o, v) in row.iter_mut().zip(b) {
                *o += v;
            }
        }
        let value = Tensor::from_parts(self.shape().to_vec(), out);
        Ok(self
            .tape
            .record(value, self.id.is_some() || bias.id.is_some(), || Op::AddRow {
                x: self.id,
                bias: bias.id,
                cols,
            }))
    }

    pub fn scale(&self, alpha: f64) -> Var<'t> {
        let value = self.value.map(|v| alpha * v);
        self.tape
            .record(value, self.id.is_some(), || Op::Scale { x: self.id, alpha })
    }

    /// `alpha * self + beta`, elementwise.
    pub fn affine(&self, alpha: f64, beta: f64) -> Var<'t> {
        let value = self.value.map(|v| alpha * v + beta);
        self.tape
            .record(value, self.id.is_some(), || Op::Scale { x: self.id, alpha })
    }

    pub fn tanh(&self) -> Var<'t> {
        let value = self.value.map(f64::tanh);
        let out = value.clone();
        self.tape
            .record(value, self.id.is_some(), || Op::Tanh { x: self.id, out })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let value = self.value.map(sigmoid);
        let out = value.clone();
        self.tape
            .record(value, self.id.is_some(), || Op::Sigmoid { x: self.id, out })
    }

    pub fn gelu(&self) -> Var<'t> {
        let value = self.value.map(gelu);
        self.tape
            .record(value, self.id.is_some(), || Op::Gelu { x: self.slot() })
    }

    /// Normalizes every row to zero mean and unit variance, then applies
    /// `gain` and `bias` (each of length = number of columns).
    pub fn layer_norm(&self, gain: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
        let (rows, cols) = self.require_2d("layer_norm")?;
        if gain.value.len() != cols || bias.value.len() != cols {
            return Err(Error::shape("layer_norm", self.shape(), gain.shape()));
        }
        let x = self.value.data();
        let (gw, bw) = (gain.value.data(), bias.value.data());
        let mut xhat = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let n = cols as f64;
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = s;
            for j in 0..cols {
                let h = (row[j] - mu) * s;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * gw[j] + bw[j];
            }
        }
        let value = Tensor::from_parts(vec![rows, cols], out);
        let tracked = self.id.is_some() || gain.id.is_some() || bias.id.is_some();
        Ok(self.tape.record(value, tracked, || Op::LayerNorm {
            x: self.id,
            gain: gain.slot(),
            bias: bias.id,
            xhat: Tensor::from_parts(vec![rows, cols], xhat),
            inv_std,
        }))
    }

    /// Contiguous block of rows (`axis = 0`) or columns (`axis = 1`).
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let (rows, cols) = self.require_2d("slice")?;
        let extent = if axis == 0 { rows } else { cols };
        if axis > 1 || start + len > extent {
            return Err(Error::shape("slice", self.shape(), &[axis, start, len]));
        }
        let data = self.value.data();
        let (value, meta_rows) = if axis == 0 {
            (
                Tensor::from_parts(vec![len, cols], data[start * cols..(start + len) * cols].to_vec()),
                len,
            )
        } else {
            let mut out = Vec::with_capacity(rows * len);
            for r in 0..rows {
                out.extend_from_slice(&data[r * cols + start..r * cols + start + len]);
            }
            (Tensor::from_parts(vec![rows, len], out), rows)
        };
        Ok(self.tape.record(value, self.id.is_some(), || Op::Slice {
            x: self.id,
            axis,
            start,
            rows: meta_rows,
            cols,
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value.reshape(shape)?;
        Ok(self
            .tape
            .record(value, self.id.is_some(), || Op::Reshape { x: self.id }))
    }

    pub fn sum(&self) -> Var<'t> {
        let len = self.value.len();
        let value = Tensor::scalar(self.value.sum());
        self.tape
            .record(value, self.id.is_some(), || Op::Sum { x: self.id, len })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Row-wise matrix-vector contraction: `self` is `(B, d*width)` holding a
    /// `d x width` matrix per row, `v` is `(B, width)`; the result is `(B, d)`.
    pub fn row_contract(&self, v: &Var<'t>, width: usize) -> Result<Var<'t>> {
        let (rows, fc) = self.require_2d("row_contract")?;
        let (vr, vc) = v.require_2d("row_contract")?;
        if vr != rows || vc != width || width == 0 || fc % width != 0 {
            return Err(Error::shape("row_contract", self.shape(), v.shape()));
        }
        let d = fc / width;
        let f = self.value.data();
        let vv = v.value.data();
        let mut out = vec![0.0; rows * d];
        for b in 0..rows {
            let vrow = &vv[b * width..(b + 1) * width];
            for i in 0..d {
                let frow = &f[b * fc + i * width..b * fc + (i + 1) * width];
                out[b * d + i] = frow.iter().zip(vrow).map(|(a, c)| a * c).sum();
            }
        }
        let value = Tensor::from_parts(vec![rows, d], out);
        Ok(self
            .tape
            .record(value, self.id.is_some() || v.id.is_some(), || Op::RowContract {
                f: self.slot(),
                v: v.slot(),
                width,
            }))
    }

    /// Picks flat entries `idx` into a tensor of shape `shape`.
    pub fn gather(&self, idx: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let len = self.value.len();
        if shape.iter().product::<usize>() != idx.len() {
            return Err(Error::shape("gather", shape, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(Error::shape("gather", self.shape(), &[bad]));
        }
        let data = self.value.data();
        let value = Tensor::from_parts(shape.to_vec(), idx.iter().map(|&i| data[i]).collect());
        Ok(self
            .tape
            .record(value, self.id.is_some(), || Op::Gather { x: self.id, idx, len }))
    }

    /// `sum((self - target)^2)` against a constant target.
    pub fn sq_err_sum(&self, target: &Tensor) -> Result<Var<'t>> {
        let diff = self.value.zip_map(target, "sq_err_sum", |a, b| a - b)?;
        let value = Tensor::scalar(diff.data().iter().map(|d| d * d).sum());
        Ok(self
            .tape
            .record(value, self.id.is_some(), || Op::SqErrSum { x: self.id, diff }))
    }
}

/// Concatenates 2-D variables along rows (`axis = 0`) or columns (`axis = 1`).
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let tape = first.tape;
    let (r0, c0) = first.require_2d("concat")?;
    let mut extents = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.require_2d("concat")?;
        if (axis == 0 && c != c0) || (axis == 1 && r != r0) || axis > 1 {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
        extents.push(if axis == 0 { r } else { c });
    }
    let total: usize = extents.iter().sum();
    let (rows, cols) = if axis == 0 { (total, c0) } else { (r0, total) };
    let mut out = Vec::with_capacity(rows * cols);
    if axis == 0 {
        for p in parts {
            out.extend_from_slice(p.value.data());
        }
    } else {
        for r in 0..rows {
            for (p, &e) in parts.iter().zip(&extents) {
                out.extend_from_slice(&p.value.data()[r * e..(r + 1) * e]);
            }
        }
    }
    let value = Tensor::from_parts(vec![rows, cols], out);
    let tracked = parts.iter().any(|p| p.id.is_some());
    Ok(tape.record(value, tracked, || Op::Concat {
        parts: parts.iter().map(|p| p.id).zip(extents.iter().copied()).collect(),
        axis,
        rows,
        cols,
    }))
}
