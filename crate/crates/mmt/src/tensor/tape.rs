//! Differentiation tape: primitive ops, forward evaluation, backward pass.

use std::cell::RefCell;

use super::params::{ParamId, ParamStore};
use super::{matmul2, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<F> {
    Leaf {
        param: Option<ParamId>,
    },
    Add(Var, Var),
    /// `a[..., d] + row[d]`, row broadcast over leading dims.
    AddRow(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, F),
    /// Elementwise product with a constant mask (dropout, ten-hot rows).
    MulMask(Var, Tensor<F>),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var, Vec<usize>),
    Relu(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        smoothing: f64,
    },
    SumAll(Var),
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Records primitive applications in topological order; one backward pass
/// populates gradients of exactly the nodes reachable from the loss.
pub struct Tape<F> {
    nodes: RefCell<Vec<Node<F>>>,
}

/// Gradients produced by [`Tape::backward`], addressable per node and
/// per parameter.
pub struct Gradients<F> {
    node: Vec<Option<Tensor<F>>>,
    param: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.param.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter, or zeros of the given shape when the
    /// parameter was not reached by the loss.
    pub fn param_or_zeros(&self, id: ParamId, shape: &[usize]) -> Tensor<F> {
        match self.param(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<F>, op: Op<F>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Record a constant; no gradient flows into it.
    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf { param: None })
    }

    /// Record a parameter leaf; its gradient accumulates under the id.
    /// Loading the same parameter several times is fine: the contributions
    /// sum, which is the correct calculus for shared weights.
    pub fn param(&self, store: &ParamStore<F>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id) })
    }

    /// Load a parameter value without tracking gradients (frozen weights).
    pub fn frozen(&self, store: &ParamStore<F>, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    pub fn value(&self, v: Var) -> Tensor<F> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<F>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    // ---- primitive ops -------------------------------------------------

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with_value(a, |ta| {
            self.with_value(b, |tb| -> Result<Tensor<F>> {
                if ta.shape() != tb.shape() {
                    return Err(Error::shape(format!(
                        "add: {:?} vs {:?}",
                        ta.shape(),
                        tb.shape()
                    )));
                }
                let data = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| x + y)
                    .collect();
                Tensor::new(ta.shape().to_vec(), data)
            })
        })?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let value = self.with_value(a, |ta| {
            self.with_value(row, |tr| -> Result<Tensor<F>> {
                let d = *ta.shape().last().ok_or_else(|| {
                    Error::shape("add_row: scalar lhs")
                })?;
                if tr.shape() != [d] {
                    return Err(Error::shape(format!(
                        "add_row: {:?} vs row {:?}",
                        ta.shape(),
                        tr.shape()
                    )));
                }
                let mut data = ta.data().to_vec();
                for (i, x) in data.iter_mut().enumerate() {
                    *x = *x + tr.data()[i % d];
                }
                Tensor::new(ta.shape().to_vec(), data)
            })
        })?;
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with_value(a, |ta| {
            self.with_value(b, |tb| -> Result<Tensor<F>> {
                if ta.shape() != tb.shape() {
                    return Err(Error::shape(format!(
                        "mul: {:?} vs {:?}",
                        ta.shape(),
                        tb.shape()
                    )));
                }
                let data = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| x * y)
                    .collect();
                Tensor::new(ta.shape().to_vec(), data)
            })
        })?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn mul_scalar(&self, a: Var, c: F) -> Var {
        let value = self.with_value(a, |ta| ta.map(|x| x * c));
        self.push(value, Op::MulScalar(a, c))
    }

    pub fn mul_mask(&self, a: Var, mask: Tensor<F>) -> Result<Var> {
        let value = self.with_value(a, |ta| -> Result<Tensor<F>> {
            if ta.shape() != mask.shape() {
                return Err(Error::shape(format!(
                    "mul_mask: {:?} vs {:?}",
                    ta.shape(),
                    mask.shape()
                )));
            }
            let data = ta
                .data()
                .iter()
                .zip(mask.data())
                .map(|(&x, &m)| x * m)
                .collect();
            Tensor::new(ta.shape().to_vec(), data)
        })?;
        Ok(self.push(value, Op::MulMask(a, mask)))
    }

    /// Matrix product. Supports `[m,k]x[k,n]`, batched `[b,m,k]x[b,k,n]`,
    /// and a rank-2 rhs broadcast over a rank-3 lhs.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let value = self.with_value(a, |ta| {
            self.with_value(b, |tb| matmul_forward(ta, tb))
        })?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let value = self.with_value(a, |ta| ta.transpose2())?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let (value, old_shape) = self.with_value(a, |ta| -> Result<(Tensor<F>, Vec<usize>)> {
            let old = ta.shape().to_vec();
            Ok((ta.clone().reshape(shape.clone())?, old))
        })?;
        Ok(self.push(value, Op::Reshape(a, old_shape)))
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.with_value(a, |ta| {
            ta.map(|x| if x > F::zero() { x } else { F::zero() })
        });
        self.push(value, Op::Relu(a))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let value = self.with_value(a, |ta| -> Result<Tensor<F>> {
            if axis >= ta.rank() {
                return Err(Error::shape(format!(
                    "softmax: axis {} out of range for {:?}",
                    axis,
                    ta.shape()
                )));
            }
            let mut out = ta.clone();
            for lane in lanes(ta.shape(), axis) {
                softmax_lane(out.data_mut(), &lane);
            }
            Ok(out)
        })?;
        Ok(self.push(value, Op::Softmax(a, axis)))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let value = self.with_value(x, |tx| {
            self.with_value(gain, |tg| {
                self.with_value(bias, |tb| -> Result<Tensor<F>> {
                    let d = *tx
                        .shape()
                        .last()
                        .ok_or_else(|| Error::shape("layer_norm: scalar input"))?;
                    if tg.shape() != [d] || tb.shape() != [d] {
                        return Err(Error::shape(format!(
                            "layer_norm: input {:?}, gain {:?}, bias {:?}",
                            tx.shape(),
                            tg.shape(),
                            tb.shape()
                        )));
                    }
                    let eps = F::from_f64(eps);
                    let mut out = tx.clone();
                    let rows = tx.numel() / d;
                    for r in 0..rows {
                        let row = &mut out.data_mut()[r * d..(r + 1) * d];
                        let (mean, inv_std) = row_moments(row, eps);
                        for j in 0..d {
                            let norm = (row[j] - mean) * inv_std;
                            row[j] = tg.data()[j] * norm + tb.data()[j];
                        }
                    }
                    Ok(out)
                })
            })
        })?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Mean negative log-likelihood over non-pad positions, with optional
    /// label smoothing (off-class mass `smoothing / (V-1)`).
    ///
    /// `logits` is `[steps, V]` or `[batch, steps, V]`; `targets` holds one
    /// token id per leading position, `pad` positions are excluded.
    pub fn cross_entropy(
        &self,
        logits: Var,
        targets: &[u32],
        pad: u32,
        smoothing: f64,
    ) -> Result<Var> {
        let tgt: Vec<Option<usize>> = targets
            .iter()
            .map(|&t| if t == pad { None } else { Some(t as usize) })
            .collect();
        let value = self.with_value(logits, |tl| -> Result<Tensor<F>> {
            let (rows, vocab) = ce_dims(tl)?;
            if tgt.len() != rows {
                return Err(Error::shape(format!(
                    "cross_entropy: {} target positions for logits {:?}",
                    tgt.len(),
                    tl.shape()
                )));
            }
            if vocab < 2 && smoothing > 0.0 {
                return Err(Error::invalid(
                    "cross_entropy: label smoothing needs vocab >= 2",
                ));
            }
            for t in tgt.iter().flatten() {
                if *t >= vocab {
                    return Err(Error::invalid(format!(
                        "cross_entropy: target id {t} >= vocab {vocab}"
                    )));
                }
            }
            let n_real = tgt.iter().flatten().count();
            if n_real == 0 {
                return Err(Error::invalid(
                    "cross_entropy: all positions are padding, mean undefined",
                ));
            }
            let mut total = F::zero();
            for (r, t) in tgt.iter().enumerate() {
                let Some(t) = t else { continue };
                let row = &tl.data()[r * vocab..(r + 1) * vocab];
                let logp = log_softmax_row(row);
                total = total + smoothed_nll(&logp, *t, smoothing);
            }
            Ok(Tensor::scalar(total / F::from_f64(n_real as f64)))
        })?;
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: tgt,
                smoothing,
            },
        ))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let value = self.with_value(a, |ta| {
            Tensor::scalar(ta.data().iter().copied().sum())
        });
        self.push(value, Op::SumAll(a))
    }

    /// Row lookup: `out[i] = table[indices[i]]` (embedding gather).
    pub fn gather_rows(&self, table: Var, indices: &[usize]) -> Result<Var> {
        let value = self.with_value(table, |tt| -> Result<Tensor<F>> {
            if tt.rank() != 2 {
                return Err(Error::shape(format!(
                    "gather_rows: table must be rank 2, got {:?}",
                    tt.shape()
                )));
            }
            let (rows, d) = (tt.shape()[0], tt.shape()[1]);
            let mut data = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                if i >= rows {
                    return Err(Error::invalid(format!(
                        "gather_rows: index {i} >= {rows}"
                    )));
                }
                data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
            }
            Tensor::new(vec![indices.len(), d], data)
        })?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.with_value(x, |tx| -> Result<Tensor<F>> {
            if tx.rank() != 2 {
                return Err(Error::shape(format!(
                    "slice_cols: rank 2 expected, got {:?}",
                    tx.shape()
                )));
            }
            let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
            if start + len > cols {
                return Err(Error::shape(format!(
                    "slice_cols: {start}+{len} > {cols}"
                )));
            }
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&tx.data()[r * cols + start..r * cols + start + len]);
            }
            Tensor::new(vec![rows, len], data)
        })?;
        Ok(self.push(value, Op::SliceCols { x, start, len }))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols: no parts"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.shape()[0];
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                let t = &nodes[p.0].value;
                if t.rank() != 2 || t.shape()[0] != rows {
                    return Err(Error::shape(format!(
                        "concat_cols: incompatible part {:?} (rows {rows})",
                        t.shape()
                    )));
                }
                widths.push(t.shape()[1]);
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, w) in parts.iter().zip(&widths) {
                    let t = &nodes[p.0].value;
                    data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
            }
            Tensor::new(vec![rows, total], data)?
        };
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    // ---- backward ------------------------------------------------------

    /// Populate gradients of everything reachable from `loss`.
    /// Deterministic: a fixed reverse-topological sweep.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.numel() != 1 {
            return Err(Error::shape(format!(
                "backward: loss must be scalar, got {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut node_grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        node_grads[loss.0] = Some(Tensor::new(
            nodes[loss.0].value.shape().to_vec(),
            vec![F::one()],
        )?);
        let mut param_grads: Vec<Option<Tensor<F>>> = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(grad) = node_grads[i].take() else {
                continue;
            };
            match &nodes[i].op {
                Op::Leaf { param } => {
                    if let Some(pid) = param {
                        if param_grads.len() <= pid.0 {
                            param_grads.resize_with(pid.0 + 1, || None);
                        }
                        accumulate(&mut param_grads[pid.0], &grad);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut node_grads[a.0], &grad);
                    accumulate(&mut node_grads[b.0], &grad);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut node_grads[a.0], &grad);
                    let d = nodes[row.0].value.numel();
                    let mut rg = Tensor::zeros(&[d]);
                    for (k, &g) in grad.data().iter().enumerate() {
                        rg.data_mut()[k % d] = rg.data_mut()[k % d] + g;
                    }
                    accumulate(&mut node_grads[row.0], &rg);
                }
                Op::Mul(a, b) => {
                    let ga = elementwise_product(&grad, &nodes[b.0].value);
                    let gb = elementwise_product(&grad, &nodes[a.0].value);
                    accumulate(&mut node_grads[a.0], &ga);
                    accumulate(&mut node_grads[b.0], &gb);
                }
                Op::MulScalar(a, c) => {
                    let ga = grad.map(|g| g * *c);
                    accumulate(&mut node_grads[a.0], &ga);
                }
                Op::MulMask(a, mask) => {
                    let ga = elementwise_product(&grad, mask);
                    accumulate(&mut node_grads[a.0], &ga);
                }
                Op::MatMul(a, b) => {
                    let (ga, gb) = matmul_backward(&grad, &nodes[a.0].value, &nodes[b.0].value)?;
                    accumulate(&mut node_grads[a.0], &ga);
                    accumulate(&mut node_grads[b.0], &gb);
                }
                Op::Transpose(a) => {
                    let ga = grad.transpose2()?;
                    accumulate(&mut node_grads[a.0], &ga);
                }
                Op::Reshape(a, old_shape) => {
                    let ga = grad.clone().reshape(old_shape.clone())?;
                    accumulate(&mut node_grads[a.0], &ga);
                }
                Op::Relu(a) => {
                    let input = &nodes[a.0].value;
                    let data = grad
                        .data()
                        .iter()
                        .zip(input.data())
                        .map(|(&g, &x)| if x > F::zero() { g } else { F::zero() })
                        .collect();
                    let ga = Tensor::new(input.shape().to_vec(), data)?;
                    accumulate(&mut node_grads[a.0], &ga);
                }
                Op::Softmax(a, axis) => {
                    let y = &nodes[i].value;
                    let mut ga = Tensor::zeros(y.shape());
                    for lane in lanes(y.shape(), *axis) {
                        softmax_backward_lane(grad.data(), y.data(), ga.data_mut(), &lane);
                    }
                    accumulate(&mut node_grads[a.0], &ga);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (gx, gg, gb) = layer_norm_backward(
                        &grad,
                        &nodes[x.0].value,
                        &nodes[gain.0].value,
                        F::from_f64(*eps),
                    )?;
                    accumulate(&mut node_grads[x.0], &gx);
                    accumulate(&mut node_grads[gain.0], &gg);
                    accumulate(&mut node_grads[bias.0], &gb);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    smoothing,
                } => {
                    let gl = cross_entropy_backward(
                        grad.item()?,
                        &nodes[logits.0].value,
                        targets,
                        *smoothing,
                    )?;
                    accumulate(&mut node_grads[logits.0], &gl);
                }
                Op::SumAll(a) => {
                    let g = grad.item()?;
                    let ga = Tensor::full(nodes[a.0].value.shape(), g);
                    accumulate(&mut node_grads[a.0], &ga);
                }
                Op::GatherRows { table, indices } => {
                    let t = &nodes[table.0].value;
                    let d = t.shape()[1];
                    let mut gt = Tensor::zeros(t.shape());
                    for (r, &idx) in indices.iter().enumerate() {
                        for j in 0..d {
                            let cell = &mut gt.data_mut()[idx * d + j];
                            *cell = *cell + grad.data()[r * d + j];
                        }
                    }
                    accumulate(&mut node_grads[table.0], &gt);
                }
                Op::SliceCols { x, start, len } => {
                    let t = &nodes[x.0].value;
                    let (rows, cols) = (t.shape()[0], t.shape()[1]);
                    let mut gx = Tensor::zeros(&[rows, cols]);
                    for r in 0..rows {
                        for j in 0..*len {
                            gx.data_mut()[r * cols + start + j] = grad.data()[r * len + j];
                        }
                    }
                    accumulate(&mut node_grads[x.0], &gx);
                }
                Op::ConcatCols(parts) => {
                    let rows = grad.shape()[0];
                    let total = grad.shape()[1];
                    let mut offset = 0;
                    for p in parts {
                        let w = nodes[p.0].value.shape()[1];
                        let mut gp = Tensor::zeros(&[rows, w]);
                        for r in 0..rows {
                            for j in 0..w {
                                gp.data_mut()[r * w + j] = grad.data()[r * total + offset + j];
                            }
                        }
                        accumulate(&mut node_grads[p.0], &gp);
                        offset += w;
                    }
                }
            }
            node_grads[i] = Some(grad);
        }

        Ok(Gradients {
            node: node_grads,
            param: param_grads,
        })
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

// ---- helpers -----------------------------------------------------------

fn accumulate<F: Scalar>(slot: &mut Option<Tensor<F>>, grad: &Tensor<F>) {
    match slot {
        Some(existing) => {
            for (dst, &src) in existing.data_mut().iter_mut().zip(grad.data()) {
                *dst = *dst + src;
            }
        }
        None => *slot = Some(grad.clone()),
    }
}

fn elementwise_product<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x * y)
        .collect();
    Tensor {
        shape: a.shape().to_vec(),
        data,
    }
}

// Tensor construction shortcut available inside the module.
impl<F> Tensor<F> {
    fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        Tensor { shape, data }
    }
}

fn matmul_forward<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    match (a.rank(), b.rank()) {
        (2, 2) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (kb, n) = (b.shape()[0], b.shape()[1]);
            if k != kb {
                return Err(Error::shape(format!(
                    "matmul: {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            Ok(Tensor::from_parts(
                vec![m, n],
                matmul2(a.data(), b.data(), m, k, n),
            ))
        }
        (3, 3) | (3, 2) => {
            let (ba, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let (kb, n, bcast) = if b.rank() == 2 {
                (b.shape()[0], b.shape()[1], true)
            } else {
                if b.shape()[0] != ba {
                    return Err(Error::shape(format!(
                        "matmul: batch {:?} x {:?}",
                        a.shape(),
                        b.shape()
                    )));
                }
                (b.shape()[1], b.shape()[2], false)
            };
            if k != kb {
                return Err(Error::shape(format!(
                    "matmul: {:?} x {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            let mut data = Vec::with_capacity(ba * m * n);
            for bi in 0..ba {
                let asl = &a.data()[bi * m * k..(bi + 1) * m * k];
                let bsl = if bcast {
                    b.data()
                } else {
                    &b.data()[bi * k * n..(bi + 1) * k * n]
                };
                data.extend(matmul2(asl, bsl, m, k, n));
            }
            Ok(Tensor::from_parts(vec![ba, m, n], data))
        }
        _ => Err(Error::shape(format!(
            "matmul: unsupported ranks {:?} x {:?}",
            a.shape(),
            b.shape()
        ))),
    }
}

fn matmul_backward<F: Scalar>(
    grad: &Tensor<F>,
    a: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    match (a.rank(), b.rank()) {
        (2, 2) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let bt = b.transpose2()?;
            let at = a.transpose2()?;
            let ga = matmul2(grad.data(), bt.data(), m, n, k);
            let gb = matmul2(at.data(), grad.data(), k, m, n);
            Ok((
                Tensor::from_parts(vec![m, k], ga),
                Tensor::from_parts(vec![k, n], gb),
            ))
        }
        (3, 3) | (3, 2) => {
            let (ba, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = *b.shape().last().unwrap();
            let bcast = b.rank() == 2;
            let mut ga = Tensor::zeros(a.shape());
            let mut gb = Tensor::zeros(b.shape());
            for bi in 0..ba {
                let gsl = &grad.data()[bi * m * n..(bi + 1) * m * n];
                let asl = &a.data()[bi * m * k..(bi + 1) * m * k];
                let bsl = if bcast {
                    b.data()
                } else {
                    &b.data()[bi * k * n..(bi + 1) * k * n]
                };
                let bt = transpose_slice(bsl, k, n);
                let at = transpose_slice(asl, m, k);
                let ga_b = matmul2(gsl, &bt, m, n, k);
                let gb_b = matmul2(&at, gsl, k, m, n);
                ga.data_mut()[bi * m * k..(bi + 1) * m * k].copy_from_slice(&ga_b);
                let dst = if bcast {
                    &mut gb.data_mut()[0..k * n]
                } else {
                    &mut gb.data_mut()[bi * k * n..(bi + 1) * k * n]
                };
                for (d, s) in dst.iter_mut().zip(gb_b) {
                    *d = *d + s;
                }
            }
            Ok((ga, gb))
        }
        _ => Err(Error::shape("matmul backward: unsupported ranks")),
    }
}

fn transpose_slice<F: Scalar>(data: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

/// Index lists for every lane along `axis` of a tensor with `shape`.
fn lanes(shape: &[usize], axis: usize) -> Vec<Vec<usize>> {
    let lane_len = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = Vec::with_capacity(outer * stride);
    for o in 0..outer {
        for s in 0..stride {
            let base = o * lane_len * stride + s;
            out.push((0..lane_len).map(|t| base + t * stride).collect());
        }
    }
    out
}

fn softmax_lane<F: Scalar>(data: &mut [F], lane: &[usize]) {
    let mut max = data[lane[0]];
    for &i in lane {
        if data[i] > max {
            max = data[i];
        }
    }
    let mut sum = F::zero();
    for &i in lane {
        data[i] = (data[i] - max).exp();
        sum = sum + data[i];
    }
    for &i in lane {
        data[i] = data[i] / sum;
    }
}

fn softmax_backward_lane<F: Scalar>(grad: &[F], y: &[F], out: &mut [F], lane: &[usize]) {
    let mut dot = F::zero();
    for &i in lane {
        dot = dot + grad[i] * y[i];
    }
    for &i in lane {
        out[i] = y[i] * (grad[i] - dot);
    }
}

fn row_moments<F: Scalar>(row: &[F], eps: F) -> (F, F) {
    let d = F::from_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<F>() / d;
    let var = row
        .iter()
        .map(|&x| (x - mean) * (x - mean))
        .sum::<F>()
        / d;
    (mean, F::one() / (var + eps).sqrt())
}

fn layer_norm_backward<F: Scalar>(
    grad: &Tensor<F>,
    x: &Tensor<F>,
    gain: &Tensor<F>,
    eps: F,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let d = *x.shape().last().unwrap();
    let rows = x.numel() / d;
    let dn = F::from_f64(d as f64);
    let mut gx = Tensor::zeros(x.shape());
    let mut gg = Tensor::zeros(&[d]);
    let mut gb = Tensor::zeros(&[d]);
    for r in 0..rows {
        let xr = &x.data()[r * d..(r + 1) * d];
        let gr = &grad.data()[r * d..(r + 1) * d];
        let (mean, inv_std) = row_moments(xr, eps);
        // normalized inputs and gain-scaled incoming grads
        let xhat: Vec<F> = xr.iter().map(|&v| (v - mean) * inv_std).collect();
        let gy: Vec<F> = gr
            .iter()
            .zip(gain.data())
            .map(|(&g, &gn)| g * gn)
            .collect();
        let m1 = gy.iter().copied().sum::<F>() / dn;
        let m2 = gy
            .iter()
            .zip(&xhat)
            .map(|(&a, &b)| a * b)
            .sum::<F>()
            / dn;
        for j in 0..d {
            gx.data_mut()[r * d + j] = (gy[j] - m1 - xhat[j] * m2) * inv_std;
            gg.data_mut()[j] = gg.data_mut()[j] + gr[j] * xhat[j];
            gb.data_mut()[j] = gb.data_mut()[j] + gr[j];
        }
    }
    Ok((gx, gg, gb))
}

fn ce_dims<F: Scalar>(logits: &Tensor<F>) -> Result<(usize, usize)> {
    match logits.rank() {
        2 => Ok((logits.shape()[0], logits.shape()[1])),
        3 => Ok((
            logits.shape()[0] * logits.shape()[1],
            logits.shape()[2],
        )),
        _ => Err(Error::shape(format!(
            "cross_entropy: logits rank must be 2 or 3, got {:?}",
            logits.shape()
        ))),
    }
}

/// Numerically stable log-softmax of one row.
pub(crate) fn log_softmax_row<F: Scalar>(row: &[F]) -> Vec<F> {
    let max = row.iter().copied().fold(row[0], |a, b| if b > a { b } else { a });
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
    row.iter().map(|&x| x - max - lse).collect()
}

fn smoothed_nll<F: Scalar>(logp: &[F], target: usize, smoothing: f64) -> F {
    if smoothing == 0.0 {
        return -logp[target];
    }
    let v = logp.len();
    let on = F::from_f64(1.0 - smoothing);
    let off = F::from_f64(smoothing / (v as f64 - 1.0));
    let mut loss = F::zero();
    for (j, &lp) in logp.iter().enumerate() {
        let q = if j == target { on } else { off };
        loss = loss - q * lp;
    }
    loss
}

fn cross_entropy_backward<F: Scalar>(
    upstream: F,
    logits: &Tensor<F>,
    targets: &[Option<usize>],
    smoothing: f64,
) -> Result<Tensor<F>> {
    let (_rows, vocab) = ce_dims(logits)?;
    let n_real = targets.iter().flatten().count();
    let scale = upstream / F::from_f64(n_real as f64);
    let on = F::from_f64(1.0 - smoothing);
    let off = if smoothing == 0.0 {
        F::zero()
    } else {
        F::from_f64(smoothing / (vocab as f64 - 1.0))
    };
    let mut gl = Tensor::zeros(logits.shape());
    for (r, t) in targets.iter().enumerate() {
        let Some(t) = t else { continue };
        let row = &logits.data()[r * vocab..(r + 1) * vocab];
        let logp = log_softmax_row(row);
        for j in 0..vocab {
            let p = logp[j].exp();
            let q = if j == *t { on } else { off };
            gl.data_mut()[r * vocab + j] = (p - q) * scale;
        }
    }
    Ok(gl)
}


#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        /// Softmax rows are probability distributions for any finite input.
        #[test]
        fn softmax_sums_to_one(data in proptest::collection::vec(-50.0f64..50.0, 6)) {
            let tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::new(vec![2, 3], data).unwrap());
            let y = tape.value(tape.softmax(x, 1).unwrap());
            for r in 0..2 {
                let s: f64 = y.data()[r * 3..(r + 1) * 3].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(y.data()[r * 3..(r + 1) * 3].iter().all(|&v| v >= 0.0));
            }
        }

        /// Shift invariance: softmax(x + c) == softmax(x).
        #[test]
        fn softmax_shift_invariance(data in proptest::collection::vec(-20.0f64..20.0, 4), c in -30.0f64..30.0) {
            let tape = Tape::<f64>::new();
            let x = tape.constant(Tensor::vector(data.clone()));
            let shifted = tape.constant(Tensor::vector(data.iter().map(|v| v + c).collect()));
            let a = tape.value(tape.softmax(x, 0).unwrap());
            let b = tape.value(tape.softmax(shifted, 0).unwrap());
            for (va, vb) in a.data().iter().zip(b.data()) {
                prop_assert!((va - vb).abs() < 1e-9);
            }
        }
    }
}
