//! Minimal dense float64 tensor with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns the computation graph; every op appends a node whose
//! inputs precede it, so node order is already topological. A [`Tensor`] is
//! a cheap handle (tape reference + node id). Gradients accumulate: calling
//! [`Tape::backward`] twice doubles them.
//!
//! There is no broadcasting beyond an explicit [`Tensor::expand_leading`];
//! shape mismatches are reported as dimension errors naming the op.

pub mod checkpoint;
pub mod gradcheck;

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Epsilon used by [`Tensor::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

fn dim_err(op: &'static str, message: String) -> Error {
    Error::Dimension { op, message }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Transpose { input: usize, a: usize, b: usize },
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Embedding { table: usize, ids: Vec<Option<usize>> },
    Softmax { input: usize, axis: usize },
    LogSoftmax { input: usize, axis: usize },
    LayerNorm { input: usize, axis: usize, eps: f64 },
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Dropout { input: usize, mask: Vec<f64> },
    MaskedFill { input: usize, mask: Vec<bool> },
    Sum { input: usize, axis: Option<usize> },
    Mean { input: usize, axis: Option<usize> },
    ExpandLeading { input: usize, copies: usize },
}

/// Reverse-mode computation graph. Confine one tape to one execution
/// context; distinct tapes may run fully in parallel.
pub struct Tape {
    shapes: RefCell<Vec<Vec<usize>>>,
    values: RefCell<Vec<Vec<f64>>>,
    ops: RefCell<Vec<Op>>,
    needs: RefCell<Vec<bool>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node of a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            shapes: RefCell::new(Vec::new()),
            values: RefCell::new(Vec::new()),
            ops: RefCell::new(Vec::new()),
            needs: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs: bool) -> Tensor<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        let id = self.len();
        self.shapes.borrow_mut().push(shape);
        self.values.borrow_mut().push(value);
        self.ops.borrow_mut().push(op);
        self.needs.borrow_mut().push(needs);
        self.grads.borrow_mut().push(None);
        Tensor { tape: self, id }
    }

    fn needs_of(&self, ids: &[usize]) -> bool {
        let needs = self.needs.borrow();
        ids.iter().any(|&i| needs[i])
    }

    /// A constant leaf that never receives gradients.
    pub fn constant(&self, shape: &[usize], data: Vec<f64>) -> Result<Tensor<'_>> {
        if numel(shape) != data.len() {
            return Err(dim_err(
                "constant",
                format!("shape {shape:?} does not match buffer length {}", data.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// A leaf that participates in backward (a parameter).
    pub fn param(&self, shape: &[usize], data: Vec<f64>) -> Result<Tensor<'_>> {
        if numel(shape) != data.len() {
            return Err(dim_err(
                "param",
                format!("shape {shape:?} does not match buffer length {}", data.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, true))
    }

    pub fn scalar(&self, v: f64) -> Tensor<'_> {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    /// Concatenate tensors along `axis`.
    pub fn concat<'t>(&'t self, tensors: &[Tensor<'t>], axis: usize) -> Result<Tensor<'t>> {
        if tensors.is_empty() {
            return Err(dim_err("concat", "no inputs".into()));
        }
        let shapes = self.shapes.borrow();
        let first = &shapes[tensors[0].id];
        if axis >= first.len() {
            return Err(dim_err(
                "concat",
                format!("axis {axis} out of range for shape {first:?}"),
            ));
        }
        let mut out_shape = first.clone();
        let mut axis_total = 0;
        for t in tensors {
            let s = &shapes[t.id];
            if s.len() != first.len()
                || s.iter()
                    .zip(first.iter())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(dim_err(
                    "concat",
                    format!("incompatible shapes {first:?} and {s:?} along axis {axis}"),
                ));
            }
            axis_total += s[axis];
        }
        out_shape[axis] = axis_total;

        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; numel(&out_shape)];
        let values = self.values.borrow();
        let out_axis_stride = axis_total * inner;
        let mut axis_offset = 0;
        for t in tensors {
            let s = &shapes[t.id];
            let n = s[axis];
            let data = &values[t.id];
            for o in 0..outer {
                let src = &data[o * n * inner..(o + 1) * n * inner];
                let dst_start = o * out_axis_stride + axis_offset * inner;
                out[dst_start..dst_start + n * inner].copy_from_slice(src);
            }
            axis_offset += n;
        }
        drop(values);
        drop(shapes);
        let ids: Vec<usize> = tensors.iter().map(|t| t.id).collect();
        let needs = self.needs_of(&ids);
        Ok(self.push(out_shape, out, Op::Concat { inputs: ids, axis }, needs))
    }

    /// Backpropagate from a scalar loss, accumulating into the gradients of
    /// every reachable node that needs them.
    pub fn backward(&self, loss: Tensor<'_>) -> Result<()> {
        {
            let shapes = self.shapes.borrow();
            if numel(&shapes[loss.id]) != 1 {
                return Err(Error::Usage(format!(
                    "backward requires a scalar loss, got shape {:?}",
                    shapes[loss.id]
                )));
            }
        }
        let shapes = self.shapes.borrow();
        let values = self.values.borrow();
        let ops = self.ops.borrow();
        let needs = self.needs.borrow();

        // Propagate in scratch space so that repeated backward calls
        // accumulate leaf gradients without re-propagating stale ones.
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.len()];
        grads[loss.id] = Some(vec![1.0]);

        for i in (0..=loss.id).rev() {
            if !needs[i] {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            let add_into = |grads: &mut Vec<Option<Vec<f64>>>, id: usize, contrib: &[f64]| {
                if !needs[id] {
                    return;
                }
                let g = grads[id].get_or_insert_with(|| vec![0.0; values[id].len()]);
                for (gv, cv) in g.iter_mut().zip(contrib) {
                    *gv += cv;
                }
            };
            match &ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    add_into(&mut grads, *a, &gout);
                    add_into(&mut grads, *b, &gout);
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads, *a, &gout);
                    let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                    add_into(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    if needs[*a] {
                        let contrib: Vec<f64> =
                            gout.iter().zip(&values[*b]).map(|(g, v)| g * v).collect();
                        add_into(&mut grads, *a, &contrib);
                    }
                    if needs[*b] {
                        let contrib: Vec<f64> =
                            gout.iter().zip(&values[*a]).map(|(g, v)| g * v).collect();
                        add_into(&mut grads, *b, &contrib);
                    }
                }
                Op::Neg(a) => {
                    let contrib: Vec<f64> = gout.iter().map(|g| -g).collect();
                    add_into(&mut grads, *a, &contrib);
                }
                Op::Scale(a, s) => {
                    let contrib: Vec<f64> = gout.iter().map(|g| g * s).collect();
                    add_into(&mut grads, *a, &contrib);
                }
                Op::Matmul(a, b) => {
                    let (sa, sb) = (&shapes[*a], &shapes[*b]);
                    let (batch, m, k, n) = matmul_dims(sa, sb);
                    if needs[*a] {
                        let mut contrib = vec![0.0; values[*a].len()];
                        for bi in 0..batch {
                            mm_nt(
                                &gout[bi * m * n..(bi + 1) * m * n],
                                &values[*b][bi * k * n..(bi + 1) * k * n],
                                m,
                                n,
                                k,
                                &mut contrib[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                        add_into(&mut grads, *a, &contrib);
                    }
                    if needs[*b] {
                        let mut contrib = vec![0.0; values[*b].len()];
                        for bi in 0..batch {
                            mm_tn(
                                &values[*a][bi * m * k..(bi + 1) * m * k],
                                &gout[bi * m * n..(bi + 1) * m * n],
                                m,
                                k,
                                n,
                                &mut contrib[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                        add_into(&mut grads, *b, &contrib);
                    }
                }
                Op::Transpose { input, a, b } => {
                    // Transposing the output gradient with the same axis pair
                    // maps it back onto the input layout.
                    let contrib = transpose_copy(&gout, &shapes[i], *a, *b);
                    add_into(&mut grads, *input, &contrib);
                }
                Op::Reshape(input) => {
                    add_into(&mut grads, *input, &gout);
                }
                Op::Concat { inputs, axis } => {
                    let out_shape = &shapes[i];
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[*axis + 1..].iter().product();
                    let out_axis = out_shape[*axis];
                    let mut axis_offset = 0;
                    for id in inputs {
                        let n = shapes[*id][*axis];
                        if needs[*id] {
                            let mut contrib = vec![0.0; values[*id].len()];
                            for o in 0..outer {
                                let src_start = o * out_axis * inner + axis_offset * inner;
                                contrib[o * n * inner..(o + 1) * n * inner]
                                    .copy_from_slice(&gout[src_start..src_start + n * inner]);
                            }
                            add_into(&mut grads, *id, &contrib);
                        }
                        axis_offset += n;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let in_shape = &shapes[*input];
                    let out_shape = &shapes[i];
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[*axis + 1..].iter().product();
                    let n_in = in_shape[*axis];
                    let n_out = out_shape[*axis];
                    let mut contrib = vec![0.0; values[*input].len()];
                    for o in 0..outer {
                        let dst_start = o * n_in * inner + start * inner;
                        contrib[dst_start..dst_start + n_out * inner]
                            .copy_from_slice(&gout[o * n_out * inner..(o + 1) * n_out * inner]);
                    }
                    add_into(&mut grads, *input, &contrib);
                }
                Op::Embedding { table, ids } => {
                    let dim = shapes[*table][1];
                    let mut contrib = vec![0.0; values[*table].len()];
                    for (row, id) in ids.iter().enumerate() {
                        if let Some(id) = id {
                            let dst = &mut contrib[id * dim..(id + 1) * dim];
                            let src = &gout[row * dim..(row + 1) * dim];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    add_into(&mut grads, *table, &contrib);
                }
                Op::Softmax { input, axis } => {
                    let y = &values[i];
                    let mut contrib = vec![0.0; y.len()];
                    for_each_lane(&shapes[i], *axis, |offsets| {
                        let dot: f64 = offsets.iter().map(|&o| gout[o] * y[o]).sum();
                        for &o in offsets {
                            contrib[o] = y[o] * (gout[o] - dot);
                        }
                    });
                    add_into(&mut grads, *input, &contrib);
                }
                Op::LogSoftmax { input, axis } => {
                    let y = &values[i];
                    let mut contrib = vec![0.0; y.len()];
                    for_each_lane(&shapes[i], *axis, |offsets| {
                        let gsum: f64 = offsets.iter().map(|&o| gout[o]).sum();
                        for &o in offsets {
                            contrib[o] = gout[o] - y[o].exp() * gsum;
                        }
                    });
                    add_into(&mut grads, *input, &contrib);
                }
                Op::LayerNorm { input, axis, eps } => {
                    let x = &values[*input];
                    let y = &values[i];
                    let mut contrib = vec![0.0; x.len()];
                    for_each_lane(&shapes[i], *axis, |offsets| {
                        let n = offsets.len() as f64;
                        let mean: f64 = offsets.iter().map(|&o| x[o]).sum::<f64>() / n;
                        let var: f64 =
                            offsets.iter().map(|&o| (x[o] - mean).powi(2)).sum::<f64>() / n;
                        let rstd = 1.0 / (var + eps).sqrt();
                        let g_mean: f64 = offsets.iter().map(|&o| gout[o]).sum::<f64>() / n;
                        let gy_mean: f64 =
                            offsets.iter().map(|&o| gout[o] * y[o]).sum::<f64>() / n;
                        for &o in offsets {
                            contrib[o] = rstd * (gout[o] - g_mean - y[o] * gy_mean);
                        }
                    });
                    add_into(&mut grads, *input, &contrib);
                }
                Op::Relu(a) => {
                    let contrib: Vec<f64> = gout
                        .iter()
                        .zip(&values[*a])
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    add_into(&mut grads, *a, &contrib);
                }
                Op::Gelu(a) => {
                    let contrib: Vec<f64> = gout
                        .iter()
                        .zip(&values[*a])
                        .map(|(g, x)| g * gelu_grad(*x))
                        .collect();
                    add_into(&mut grads, *a, &contrib);
                }
                Op::Sigmoid(a) => {
                    let contrib: Vec<f64> = gout
                        .iter()
                        .zip(&values[i])
                        .map(|(g, y)| g * y * (1.0 - y))
                        .collect();
                    add_into(&mut grads, *a, &contrib);
                }
                Op::Tanh(a) => {
                    let contrib: Vec<f64> = gout
                        .iter()
                        .zip(&values[i])
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    add_into(&mut grads, *a, &contrib);
                }
                Op::Dropout { input, mask } => {
                    let contrib: Vec<f64> = gout.iter().zip(mask).map(|(g, m)| g * m).collect();
                    add_into(&mut grads, *input, &contrib);
                }
                Op::MaskedFill { input, mask } => {
                    let contrib: Vec<f64> = gout
                        .iter()
                        .zip(mask)
                        .map(|(g, m)| if *m { 0.0 } else { *g })
                        .collect();
                    add_into(&mut grads, *input, &contrib);
                }
                Op::Sum { input, axis } => {
                    let contrib = broadcast_reduction_grad(&gout, &shapes[*input], *axis, 1.0);
                    add_into(&mut grads, *input, &contrib);
                }
                Op::Mean { input, axis } => {
                    let in_shape = &shapes[*input];
                    let scale = match axis {
                        Some(a) => 1.0 / in_shape[*a] as f64,
                        None => 1.0 / numel(in_shape) as f64,
                    };
                    let contrib = broadcast_reduction_grad(&gout, in_shape, *axis, scale);
                    add_into(&mut grads, *input, &contrib);
                }
                Op::ExpandLeading { input, copies } => {
                    let block = values[*input].len();
                    let mut contrib = vec![0.0; block];
                    for c in 0..*copies {
                        for (cv, gv) in contrib.iter_mut().zip(&gout[c * block..(c + 1) * block]) {
                            *cv += gv;
                        }
                    }
                    add_into(&mut grads, *input, &contrib);
                }
            }
            grads[i] = Some(gout);
        }

        // Fold the freshly propagated gradients into the persistent leaf
        // accumulators.
        let mut persistent = self.grads.borrow_mut();
        for (i, scratch) in grads.into_iter().enumerate() {
            if !matches!(ops[i], Op::Leaf) || !needs[i] {
                continue;
            }
            if let Some(scratch) = scratch {
                let g = persistent[i].get_or_insert_with(|| vec![0.0; values[i].len()]);
                for (gv, sv) in g.iter_mut().zip(&scratch) {
                    *gv += sv;
                }
            }
        }
        Ok(())
    }
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> (usize, usize, usize, usize) {
    // Validated at op creation; 2-D is batch 1.
    if sa.len() == 2 {
        (1, sa[0], sa[1], sb[1])
    } else {
        (sa[0], sa[1], sa[2], sb[2])
    }
}

fn gelu_value(x: f64) -> f64 {
    // tanh approximation of GELU.
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Iterate every 1-D lane along `axis`, yielding the flat offsets of that
/// lane's elements.
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let n = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut offsets = vec![0usize; n];
    for o in 0..outer {
        for inn in 0..inner {
            for (i, off) in offsets.iter_mut().enumerate() {
                *off = o * n * inner + i * inner + inn;
            }
            f(&offsets);
        }
    }
}

fn transpose_copy(data: &[f64], shape: &[usize], a: usize, b: usize) -> Vec<f64> {
    let mut out_shape = shape.to_vec();
    out_shape.swap(a, b);
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_strides = strides(&out_shape);
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for (flat, v) in data.iter().enumerate() {
        let mut rem = flat;
        for d in 0..rank {
            idx[d] = rem / in_strides[d];
            rem %= in_strides[d];
        }
        idx.swap(a, b);
        let mut out_flat = 0;
        for d in 0..rank {
            out_flat += idx[d] * out_strides[d];
        }
        out[out_flat] = *v;
    }
    out
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn broadcast_reduction_grad(
    gout: &[f64],
    in_shape: &[usize],
    axis: Option<usize>,
    scale: f64,
) -> Vec<f64> {
    match axis {
        None => vec![gout[0] * scale; numel(in_shape)],
        Some(a) => {
            let n = in_shape[a];
            let outer: usize = in_shape[..a].iter().product();
            let inner: usize = in_shape[a + 1..].iter().product();
            let mut out = vec![0.0; numel(in_shape)];
            for o in 0..outer {
                for i in 0..n {
                    for inn in 0..inner {
                        out[o * n * inner + i * inner + inn] = gout[o * inner + inn] * scale;
                    }
                }
            }
            out
        }
    }
}

// out[m,n] += a[m,k] * b[k,n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let b_row = &b[l * n..(l + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
}

// out[m,k] += dc[m,n] * b[k,n]^T
fn mm_nt(dc: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let dc_row = &dc[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (l, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            let mut s = 0.0;
            for (dv, bv) in dc_row.iter().zip(b_row) {
                s += dv * bv;
            }
            *o += s;
        }
    }
}

// out[k,n] += a[m,k]^T * dc[m,n]
fn mm_tn(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let dc_row = &dc[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let out_row = &mut out[l * n..(l + 1) * n];
                for (o, &dv) in out_row.iter_mut().zip(dc_row) {
                    *o += av * dv;
                }
            }
        }
    }
}

impl<'t> Tensor<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shapes.borrow()[self.id].clone()
    }

    pub fn numel(&self) -> usize {
        numel(&self.tape.shapes.borrow()[self.id])
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.values.borrow()[self.id].clone()
    }

    /// Read a scalar tensor's value.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.tape.values.borrow()[self.id][0]
    }

    /// Accumulated gradient, if backward reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.grads.borrow()[self.id].clone()
    }

    fn unop(
        &self,
        op_name: &'static str,
        f: impl Fn(&[f64]) -> Vec<f64>,
        op: impl Fn(usize) -> Op,
    ) -> Tensor<'t> {
        let _ = op_name;
        let value = f(&self.tape.values.borrow()[self.id]);
        let shape = self.shape();
        let needs = self.tape.needs.borrow()[self.id];
        self.tape.push(shape, value, op(self.id), needs)
    }

    fn same_shape_binop(
        &self,
        other: Tensor<'t>,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Tensor<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa != sb {
            return Err(dim_err(op_name, format!("shapes {sa:?} and {sb:?} differ")));
        }
        let values = self.tape.values.borrow();
        let value: Vec<f64> = values[self.id]
            .iter()
            .zip(&values[other.id])
            .map(|(a, b)| f(*a, *b))
            .collect();
        drop(values);
        let needs = self.tape.needs_of(&[self.id, other.id]);
        Ok(self.tape.push(sa, value, op(self.id, other.id), needs))
    }

    pub fn add(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_shape_binop(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_shape_binop(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.same_shape_binop(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn neg(&self) -> Tensor<'t> {
        self.unop("neg", |xs| xs.iter().map(|x| -x).collect(), Op::Neg)
    }

    pub fn scale(&self, s: f64) -> Tensor<'t> {
        self.unop(
            "scale",
            |xs| xs.iter().map(|x| x * s).collect(),
            |id| Op::Scale(id, s),
        )
    }

    /// 2-D or leading-batch 3-D matrix product.
    pub fn matmul(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        let ok = match (sa.len(), sb.len()) {
            (2, 2) => sa[1] == sb[0],
            (3, 3) => sa[0] == sb[0] && sa[2] == sb[1],
            _ => false,
        };
        if !ok {
            return Err(dim_err(
                "matmul",
                format!("incompatible shapes {sa:?} and {sb:?}"),
            ));
        }
        let (batch, m, k, n) = matmul_dims(&sa, &sb);
        let mut out = vec![0.0; batch * m * n];
        {
            let values = self.tape.values.borrow();
            for bi in 0..batch {
                mm(
                    &values[self.id][bi * m * k..(bi + 1) * m * k],
                    &values[other.id][bi * k * n..(bi + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let out_shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let needs = self.tape.needs_of(&[self.id, other.id]);
        Ok(self
            .tape
            .push(out_shape, out, Op::Matmul(self.id, other.id), needs))
    }

    /// Swap two axes (copying).
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if a >= shape.len() || b >= shape.len() {
            return Err(dim_err(
                "transpose",
                format!("axes ({a}, {b}) out of range for shape {shape:?}"),
            ));
        }
        let out = transpose_copy(&self.tape.values.borrow()[self.id], &shape, a, b);
        let mut out_shape = shape;
        out_shape.swap(a, b);
        let needs = self.tape.needs.borrow()[self.id];
        Ok(self.tape.push(
            out_shape,
            out,
            Op::Transpose { input: self.id, a, b },
            needs,
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'t>> {
        if numel(shape) != self.numel() {
            return Err(dim_err(
                "reshape",
                format!("cannot reshape {:?} to {shape:?}", self.shape()),
            ));
        }
        let value = self.value();
        let needs = self.tape.needs.borrow()[self.id];
        Ok(self
            .tape
            .push(shape.to_vec(), value, Op::Reshape(self.id), needs))
    }

    /// Take `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(dim_err(
                "slice",
                format!("range [{start}, {}) on axis {axis} invalid for shape {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let mut out = vec![0.0; outer * len * inner];
        {
            let values = self.tape.values.borrow();
            let data = &values[self.id];
            for o in 0..outer {
                let src_start = o * n * inner + start * inner;
                out[o * len * inner..(o + 1) * len * inner]
                    .copy_from_slice(&data[src_start..src_start + len * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.tape.needs.borrow()[self.id];
        Ok(self.tape.push(
            out_shape,
            out,
            Op::Slice { input: self.id, axis, start },
            needs,
        ))
    }

    /// Look up rows of a `(vocab, dim)` table; `None` ids produce zero rows.
    pub fn embedding_lookup(&self, ids: &[Option<usize>]) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(dim_err(
                "embedding_lookup",
                format!("table must be 2-D, got {shape:?}"),
            ));
        }
        let (vocab, dim) = (shape[0], shape[1]);
        if let Some(bad) = ids.iter().flatten().find(|&&id| id >= vocab) {
            return Err(dim_err(
                "embedding_lookup",
                format!("id {bad} out of range for table with {vocab} rows"),
            ));
        }
        let mut out = vec![0.0; ids.len() * dim];
        {
            let values = self.tape.values.borrow();
            let table = &values[self.id];
            for (row, id) in ids.iter().enumerate() {
                if let Some(id) = id {
                    out[row * dim..(row + 1) * dim].copy_from_slice(&table[id * dim..(id + 1) * dim]);
                }
            }
        }
        let needs = self.tape.needs.borrow()[self.id];
        Ok(self.tape.push(
            vec![ids.len(), dim],
            out,
            Op::Embedding { table: self.id, ids: ids.to_vec() },
            needs,
        ))
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(dim_err(
                "softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let values = self.tape.values.borrow();
        let x = &values[self.id];
        let mut out = vec![0.0; x.len()];
        for_each_lane(&shape, axis, |offsets| {
            let max = offsets.iter().map(|&o| x[o]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &o in offsets {
                let e = (x[o] - max).exp();
                out[o] = e;
                sum += e;
            }
            for &o in offsets {
                out[o] /= sum;
            }
        });
        drop(values);
        let needs = self.tape.needs.borrow()[self.id];
        Ok(self.tape.push(
            shape,
            out,
            Op::Softmax { input: self.id, axis },
            needs,
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(dim_err(
                "log_softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let values = self.tape.values.borrow();
        let x = &values[self.id];
        let mut out = vec![0.0; x.len()];
        for_each_lane(&shape, axis, |offsets| {
            let max = offsets.iter().map(|&o| x[o]).fold(f64::NEG_INFINITY, f64::max);
            let log_sum = offsets
                .iter()
                .map(|&o| (x[o] - max).exp())
                .sum::<f64>()
                .ln();
            for &o in offsets {
                out[o] = x[o] - max - log_sum;
            }
        });
        drop(values);
        let needs = self.tape.needs.borrow()[self.id];
        Ok(self.tape.push(
            shape,
            out,
            Op::LogSoftmax { input: self.id, axis },
            needs,
        ))
    }

    /// Normalize each lane along `axis` to zero mean and unit variance
    /// (population variance, epsilon [`LAYER_NORM_EPS`]). Scale and shift
    /// are composed externally from `mul`/`add`.
    pub fn layer_norm(&self, axis: usize) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(dim_err(
                "layer_norm",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let eps = LAYER_NORM_EPS;
        let values = self.tape.values.borrow();
        let x = &values[self.id];
        let mut out = vec![0.0; x.len()];
        for_each_lane(&shape, axis, |offsets| {
            let n = offsets.len() as f64;
            let mean: f64 = offsets.iter().map(|&o| x[o]).sum::<f64>() / n;
            let var: f64 = offsets.iter().map(|&o| (x[o] - mean).powi(2)).sum::<f64>() / n;
            let rstd = 1.0 / (var + eps).sqrt();
            for &o in offsets {
                out[o] = (x[o] - mean) * rstd;
            }
        });
        drop(values);
        let needs = self.tape.needs.borrow()[self.id];
        Ok(self.tape.push(
            shape,
            out,
            Op::LayerNorm { input: self.id, axis, eps },
            needs,
        ))
    }

    pub fn relu(&self) -> Tensor<'t> {
        self.unop("relu", |xs| xs.iter().map(|x| x.max(0.0)).collect(), Op::Relu)
    }

    pub fn gelu(&self) -> Tensor<'t> {
        self.unop("gelu", |xs| xs.iter().map(|x| gelu_value(*x)).collect(), Op::Gelu)
    }

    pub fn sigmoid(&self) -> Tensor<'t> {
        self.unop(
            "sigmoid",
            |xs| xs.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
            Op::Sigmoid,
        )
    }

    pub fn tanh(&self) -> Tensor<'t> {
        self.unop("tanh", |xs| xs.iter().map(|x| x.tanh()).collect(), Op::Tanh)
    }

    /// Inverted dropout: kept activations scale by `1/(1-p)`. Identity (the
    /// same node) when `train` is false or `p` is zero.
    pub fn dropout(&self, p: f64, train: bool, seed: u64) -> Result<Tensor<'t>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !train || p == 0.0 {
            return Ok(*self);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| {
                if rng.random_range(0.0..1.0) < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let value: Vec<f64> = self.tape.values.borrow()[self.id]
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.shape();
        let needs = self.tape.needs.borrow()[self.id];
        Ok(self.tape.push(
            shape,
            value,
            Op::Dropout { input: self.id, mask },
            needs,
        ))
    }

    /// Replace entries where `mask` is true with `value`; their gradient is
    /// zero.
    pub fn masked_fill(&self, mask: &[bool], value: f64) -> Result<Tensor<'t>> {
        if mask.len() != self.numel() {
            return Err(dim_err(
                "masked_fill",
                format!(
                    "mask length {} does not match tensor with {} elements",
                    mask.len(),
                    self.numel()
                ),
            ));
        }
        let out: Vec<f64> = self.tape.values.borrow()[self.id]
            .iter()
            .zip(mask)
            .map(|(x, m)| if *m { value } else { *x })
            .collect();
        let shape = self.shape();
        let needs = self.tape.needs.borrow()[self.id];
        Ok(self.tape.push(
            shape,
            out,
            Op::MaskedFill { input: self.id, mask: mask.to_vec() },
            needs,
        ))
    }

    pub fn sum(&self, axis: Option<usize>) -> Result<Tensor<'t>> {
        self.reduce("sum", axis, false)
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Tensor<'t>> {
        self.reduce("mean", axis, true)
    }

    fn reduce(&self, name: &'static str, axis: Option<usize>, is_mean: bool) -> Result<Tensor<'t>> {
        let shape = self.shape();
        let values = self.tape.values.borrow();
        let x = &values[self.id];
        let (out_shape, mut out) = match axis {
            None => (vec![], vec![x.iter().sum::<f64>()]),
            Some(a) => {
                if a >= shape.len() {
                    return Err(dim_err(
                        name,
                        format!("axis {a} out of range for shape {shape:?}"),
                    ));
                }
                let n = shape[a];
                let outer: usize = shape[..a].iter().product();
                let inner: usize = shape[a + 1..].iter().product();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for i in 0..n {
                        for inn in 0..inner {
                            out[o * inner + inn] += x[o * n * inner + i * inner + inn];
                        }
                    }
                }
                let mut out_shape: Vec<usize> = shape[..a].to_vec();
                out_shape.extend_from_slice(&shape[a + 1..]);
                (out_shape, out)
            }
        };
        if is_mean {
            let denom = match axis {
                None => numel(&shape) as f64,
                Some(a) => shape[a] as f64,
            };
            for v in &mut out {
                *v /= denom;
            }
        }
        drop(values);
        let needs = self.tape.needs.borrow()[self.id];
        let op = if is_mean {
            Op::Mean { input: self.id, axis }
        } else {
            Op::Sum { input: self.id, axis }
        };
        Ok(self.tape.push(out_shape, out, op, needs))
    }

    /// Tile the whole tensor `copies` times along a new leading axis: the
    /// explicit stand-in for broadcasting.
    pub fn expand_leading(&self, copies: usize) -> Result<Tensor<'t>> {
        if copies == 0 {
            return Err(dim_err("expand_leading", "zero copies".into()));
        }
        let shape = self.shape();
        let values = self.tape.values.borrow();
        let x = &values[self.id];
        let mut out = Vec::with_capacity(copies * x.len());
        for _ in 0..copies {
            out.extend_from_slice(x);
        }
        drop(values);
        let mut out_shape = vec![copies];
        out_shape.extend_from_slice(&shape);
        let needs = self.tape.needs.borrow()[self.id];
        Ok(self.tape.push(
            out_shape,
            out,
            Op::ExpandLeading { input: self.id, copies },
            needs,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = tape
            .param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let eye = tape.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = a.matmul(eye).unwrap();
        assert_eq!(c.value(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_symmetry_and_row_sums() {
        let tape = Tape::new();
        let x = tape.constant(&[2], vec![0.0, 0.0]).unwrap();
        assert_eq!(x.softmax(0).unwrap().value(), vec![0.5, 0.5]);

        let y = tape
            .constant(&[2, 3], vec![1.0, -2.0, 0.3, 100.0, 99.0, 98.0])
            .unwrap()
            .softmax(1)
            .unwrap()
            .value();
        for row in y.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let tape = Tape::new();
        let w = tape.param(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let loss = w.sum(None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_square_sum() {
        let tape = Tape::new();
        let w = tape.param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = w.mul(w).unwrap().sum(None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let w = tape.param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = w.sum(None).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_is_a_usage_error() {
        let tape = Tape::new();
        let w = tape.param(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(tape.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let tape = Tape::new();
        let a = tape.constant(&[2], vec![1.0, 2.0]).unwrap();
        let b = tape.constant(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = a.add(b).unwrap_err();
        assert!(err.to_string().contains("add"), "{err}");
        let err = a.matmul(b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn dropout_eval_is_bit_exact_identity() {
        let tape = Tape::new();
        let x = tape.param(&[4], vec![1.5, -0.25, 3.75, 0.0]).unwrap();
        let y = x.dropout(0.5, false, 7).unwrap();
        assert_eq!(y.id(), x.id());
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn dropout_train_scales_kept_entries() {
        let tape = Tape::new();
        let x = tape.param(&[1000], vec![1.0; 1000]).unwrap();
        let y = x.dropout(0.25, true, 7).unwrap().value();
        let kept = y.iter().filter(|v| **v != 0.0).count();
        assert!(y.iter().all(|v| *v == 0.0 || (*v - 4.0 / 3.0).abs() < 1e-15));
        assert!((kept as f64 / 1000.0 - 0.75).abs() < 0.05);
    }

    #[test]
    fn dropout_invalid_p_is_a_parameter_error() {
        let tape = Tape::new();
        let x = tape.constant(&[1], vec![1.0]).unwrap();
        assert!(matches!(x.dropout(1.0, true, 0), Err(Error::Parameter(_))));
        assert!(matches!(x.dropout(-0.1, true, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn layer_norm_statistics() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..32).map(|i| (i as f64 * 1.37).sin() * 25.0).collect();
        let x = tape.constant(&[2, 16], data).unwrap();
        let y = x.layer_norm(1).unwrap().value();
        for row in y.chunks(16) {
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn embedding_lookup_and_scatter_grad() {
        let tape = Tape::new();
        let table = tape
            .param(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let out = table
            .embedding_lookup(&[Some(2), None, Some(2), Some(0)])
            .unwrap();
        assert_eq!(out.value(), vec![5.0, 6.0, 0.0, 0.0, 5.0, 6.0, 1.0, 2.0]);
        let loss = out.sum(None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(
            table.grad().unwrap(),
            vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]
        );
    }

    #[test]
    fn transpose_and_reshape_round_trip() {
        let tape = Tape::new();
        let x = tape
            .param(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let t = x.transpose(0, 1).unwrap();
        assert_eq!(t.shape(), vec![3, 2]);
        assert_eq!(t.value(), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let r = t.transpose(0, 1).unwrap().reshape(&[6]).unwrap();
        assert_eq!(r.value(), x.value());
    }

    #[test]
    fn concat_and_slice_are_inverses() {
        let tape = Tape::new();
        let a = tape.param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape.param(&[2, 1], vec![9.0, 8.0]).unwrap();
        let cat = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(cat.shape(), vec![2, 3]);
        assert_eq!(cat.value(), vec![1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let back = cat.slice(1, 0, 2).unwrap();
        assert_eq!(back.value(), a.value());
        let loss = cat.slice(1, 2, 1).unwrap().sum(None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(b.grad().unwrap(), vec![1.0, 1.0]);
        // `a` is reachable but only through the discarded slice region.
        assert_eq!(a.grad().unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = x.masked_fill(&[false, true, false], -1e30).unwrap();
        assert_eq!(y.value()[1], -1e30);
        let loss = y.mul(y).unwrap().sum(None).unwrap();
        tape.backward(loss).unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g[1], 0.0);
        assert_eq!(g[0], 2.0);
    }

    #[test]
    fn expand_leading_sums_gradient() {
        let tape = Tape::new();
        let b = tape.param(&[2], vec![1.0, -1.0]).unwrap();
        let e = b.expand_leading(3).unwrap();
        assert_eq!(e.shape(), vec![3, 2]);
        let loss = e.sum(None).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(b.grad().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn batched_matmul_matches_per_batch() {
        let tape = Tape::new();
        let a = tape
            .param(&[2, 2, 3], (0..12).map(|i| i as f64 * 0.5).collect())
            .unwrap();
        let b = tape
            .param(&[2, 3, 2], (0..12).map(|i| (i as f64) - 3.0).collect())
            .unwrap();
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![2, 2, 2]);
        for bi in 0..2 {
            let a2 = tape
                .constant(&[2, 3], a.value()[bi * 6..(bi + 1) * 6].to_vec())
                .unwrap();
            let b2 = tape
                .constant(&[3, 2], b.value()[bi * 6..(bi + 1) * 6].to_vec())
                .unwrap();
            let c2 = a2.matmul(b2).unwrap();
            assert_eq!(c.value()[bi * 4..(bi + 1) * 4], c2.value()[..]);
        }
    }

    #[test]
    fn log_softmax_matches_softmax_log() {
        let tape = Tape::new();
        let x = tape
            .constant(&[2, 4], vec![0.1, 2.0, -3.0, 0.7, 50.0, 49.0, 48.0, 47.0])
            .unwrap();
        let ls = x.log_softmax(1).unwrap().value();
        let s = x.softmax(1).unwrap().value();
        for (a, b) in ls.iter().zip(&s) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }
}
