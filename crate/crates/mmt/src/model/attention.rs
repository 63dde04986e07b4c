//! Masks and multi-head scaled dot-product attention.

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Additive mask logit for disallowed keys; large enough that the exp
/// underflows to exactly 0 in both f32 and f64.
const MASK_NEG: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Padding,
    Causal,
    Combined,
}

/// Boolean attention mask over (query row, key column).
#[derive(Clone, Debug)]
pub struct Mask {
    pub kind: MaskKind,
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl Mask {
    /// Key-padding mask: every query row sees exactly the allowed keys.
    pub fn padding(query_rows: usize, key_allow: &[bool]) -> Mask {
        let cols = key_allow.len();
        let mut allow = Vec::with_capacity(query_rows * cols);
        for _ in 0..query_rows {
            allow.extend_from_slice(key_allow);
        }
        Mask {
            kind: MaskKind::Padding,
            rows: query_rows,
            cols,
            allow,
        }
    }

    /// Lower-triangular causal mask: row t sees keys 0..=t.
    pub fn causal(n: usize) -> Mask {
        let mut allow = vec![false; n * n];
        for t in 0..n {
            for k in 0..=t {
                allow[t * n + k] = true;
            }
        }
        Mask {
            kind: MaskKind::Causal,
            rows: n,
            cols: n,
            allow,
        }
    }

    /// Causal and key-padding combined.
    pub fn causal_with_padding(key_allow: &[bool]) -> Mask {
        let n = key_allow.len();
        let mut mask = Mask::causal(n);
        for t in 0..n {
            for k in 0..n {
                mask.allow[t * n + k] = mask.allow[t * n + k] && key_allow[k];
            }
        }
        mask.kind = MaskKind::Combined;
        mask
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.cols + k]
    }

    /// Error when some query row has no valid key.
    pub fn check_rows(&self) -> Result<()> {
        for q in 0..self.rows {
            if !self.allow[q * self.cols..(q + 1) * self.cols]
                .iter()
                .any(|&a| a)
            {
                return Err(Error::invalid(format!(
                    "attention row {q} is fully masked (no valid key)"
                )));
            }
        }
        Ok(())
    }

    /// Additive logit mask: 0 where allowed, a large negative otherwise.
    fn to_additive<F: Scalar>(&self) -> Tensor<F> {
        let data = self
            .allow
            .iter()
            .map(|&a| {
                if a {
                    F::zero()
                } else {
                    F::from_f64(MASK_NEG)
                }
            })
            .collect();
        Tensor::new(vec![self.rows, self.cols], data).expect("mask shape")
    }
}

/// Projection weights of one attention sublayer. `wq` maps the query
/// stream, `wk`/`wv` map the key/value source (whose width may differ,
/// e.g. visual context rows), `wo` maps the concatenated heads back.
/// None of them carries a bias.
#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

/// Records the per-head attention distributions of one call.
#[derive(Default)]
pub struct AttnProbe {
    pub weights: Vec<Var>,
}

/// Multi-head scaled dot-product attention.
///
/// `query` is `[L, dq]`, `kv` is `[S, dk]`; the per-head scale is
/// `1/sqrt(d_model/n_heads)`. Heads are column slices of the projected
/// tensors, concatenated back and output-projected.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention<F: Scalar>(
    tape: &Tape<F>,
    store: &ParamStore<F>,
    ids: &AttnIds,
    query: Var,
    kv: Var,
    mask: Option<&Mask>,
    n_heads: usize,
    mut probe: Option<&mut AttnProbe>,
) -> Result<Var> {
    let d_model = store.value(ids.wq).shape()[1];
    if d_model % n_heads != 0 {
        return Err(Error::invalid(format!(
            "d_model {d_model} not divisible by n_heads {n_heads}"
        )));
    }
    let dh = d_model / n_heads;
    let q_len = tape.shape_of(query)[0];
    let kv_len = tape.shape_of(kv)[0];
    if let Some(m) = mask {
        if m.rows() != q_len || m.cols() != kv_len {
            return Err(Error::shape(format!(
                "mask {}x{} for attention {q_len}x{kv_len}",
                m.rows(),
                m.cols()
            )));
        }
        m.check_rows()?;
    }

    let q = tape.matmul(query, tape.param(store, ids.wq))?;
    let k = tape.matmul(kv, tape.param(store, ids.wk))?;
    let v = tape.matmul(kv, tape.param(store, ids.wv))?;

    let scale = F::from_f64(1.0 / (dh as f64).sqrt());
    let mask_const = mask.map(|m| tape.constant(m.to_additive::<F>()));

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let mut scores = tape.mul_scalar(tape.matmul(qh, tape.transpose(kh)?)?, scale);
        if let Some(mc) = mask_const {
            scores = tape.add(scores, mc)?;
        }
        let weights = tape.softmax(scores, 1)?;
        if let Some(p) = probe.as_deref_mut() {
            p.weights.push(weights);
        }
        heads.push(tape.matmul(weights, vh)?);
    }
    let ctx = tape.concat_cols(&heads)?;
    tape.matmul(ctx, tape.param(store, ids.wo))
}
