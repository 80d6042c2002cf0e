//! Multi-head self-attention with fixed additive biases and rotary
//! positions, a small transformer stack built on it, and gradient checks.
//!
//! Bias entries are subtracted from the scaled dot products. `+∞` entries are
//! excluded from the softmax outright, so their weights (and the gradients
//! that flow through them) are exactly zero.

mod grad;
mod vit;

pub use grad::{grad_check, AttendInputs, GradCheckReport, ParamSet};
pub use vit::{cross_entropy, BlockParams, Encoding, LayerTrace, TinyViTParams, ViTConfig, ViTOutput};

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{invalid, Error, Result};
use crate::rope::Rotary;
use crate::scalar::Real;

/// Attention weights and outputs for one layer of one sequence.
#[derive(Clone, Debug)]
pub struct AttentionResult<T> {
    /// `H × T × T`, rows sum to one.
    pub weights: Array3<T>,
    /// `T × (H·D_H)`, heads concatenated along channels.
    pub outputs: Array2<T>,
    /// `H × T × T` scaled dot products before the bias is subtracted.
    pub logits: Array3<T>,
}

/// Forward state of a single head, kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct HeadForward<T> {
    pub weights: Array2<T>,
    pub out: Array2<T>,
    pub logits: Array2<T>,
    /// Queries and keys after rotation (or as given without rotary).
    pub q: Array2<T>,
    pub k: Array2<T>,
}

/// Gradients of one head with respect to its inputs.
#[derive(Clone, Debug)]
pub(crate) struct HeadGrads<T> {
    pub dq: Array2<T>,
    pub dk: Array2<T>,
    pub dv: Array2<T>,
    /// Gradient with respect to the *subtracted* bias.
    pub dbias: Array2<T>,
}

/// Row-wise softmax of `logits − bias`, skipping `+∞` bias entries.
fn masked_softmax<T: Real>(logits: ArrayView2<T>, bias: Option<ArrayView2<T>>) -> Result<Array2<T>> {
    let (t, u) = logits.dim();
    let mut w = Array2::zeros((t, u));
    let inf = T::infinity();
    for i in 0..t {
        let mut max = T::neg_infinity();
        for j in 0..u {
            let b = bias.map_or(T::zero(), |b| b[[i, j]]);
            if b != inf {
                max = max.max(logits[[i, j]] - b);
            }
        }
        if max == T::neg_infinity() {
            return Err(Error::Internal(format!("attention row {i} is fully masked")));
        }
        let mut total = T::zero();
        let mut row = w.row_mut(i);
        for j in 0..u {
            let b = bias.map_or(T::zero(), |b| b[[i, j]]);
            if b != inf {
                let e = (logits[[i, j]] - b - max).exp();
                row[j] = e;
                total += e;
            }
        }
        row /= total;
    }
    Ok(w)
}

pub(crate) fn head_forward<T: Real>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    bias: Option<ArrayView2<T>>,
    rotary: Option<&Rotary<T>>,
) -> Result<HeadForward<T>> {
    let (q, k) = match rotary {
        Some(r) => (r.rotate(q), r.rotate(k)),
        None => (q.to_owned(), k.to_owned()),
    };
    let scale = T::one() / T::of(q.ncols() as f64).sqrt();
    let logits = q.dot(&k.t()) * scale;
    let weights = masked_softmax(logits.view(), bias)?;
    let out = weights.dot(&v);
    Ok(HeadForward { weights, out, logits, q, k })
}

pub(crate) fn head_backward<T: Real>(
    fwd: &HeadForward<T>,
    v: ArrayView2<T>,
    rotary: Option<&Rotary<T>>,
    d_out: ArrayView2<T>,
) -> HeadGrads<T> {
    let a = &fwd.weights;
    let dv = a.t().dot(&d_out);
    let da = d_out.dot(&v.t());
    // softmax backward: dS_ij = A_ij (dA_ij − Σ_k A_ik dA_ik); masked A_ij are 0
    let row_dot = (a * &da).sum_axis(Axis(1));
    let mut ds = da;
    ds -= &row_dot.insert_axis(Axis(1));
    ds *= a;
    let scale = T::one() / T::of(fwd.q.ncols() as f64).sqrt();
    let dq_rot = ds.dot(&fwd.k) * scale;
    let dk_rot = ds.t().dot(&fwd.q) * scale;
    let (dq, dk) = match rotary {
        Some(r) => (r.rotate_inverse(dq_rot.view()), r.rotate_inverse(dk_rot.view())),
        None => (dq_rot, dk_rot),
    };
    let dbias = ds.mapv(|x| -x);
    HeadGrads { dq, dk, dv, dbias }
}

fn check_shapes<T: Real>(
    q: &ArrayView3<T>,
    k: &ArrayView3<T>,
    v: &ArrayView3<T>,
    bias: Option<&ArrayView3<T>>,
    rotary: Option<&Rotary<T>>,
) -> Result<()> {
    if q.dim() != k.dim() || q.dim() != v.dim() {
        return invalid(format!("Q {:?}, K {:?}, V {:?} shapes differ", q.dim(), k.dim(), v.dim()));
    }
    let (h, t, _) = q.dim();
    if let Some(b) = bias {
        if b.dim() != (h, t, t) {
            return invalid(format!("bias {:?} does not match {h} heads and {t} tokens", b.dim()));
        }
    }
    if let Some(r) = rotary {
        if r.tokens() != t || r.config().head_dim != q.dim().2 {
            return invalid("rotary table does not match the token count or head width");
        }
    }
    Ok(())
}

/// Multi-head attention over `H × T × D_H` queries, keys and values.
///
/// `bias` is an `H × T × T` slice of a bias field (subtracted from logits);
/// `rotary` rotates queries and keys before the dot product.
pub fn attend<T: Real>(
    q: ArrayView3<T>,
    k: ArrayView3<T>,
    v: ArrayView3<T>,
    bias: Option<ArrayView3<T>>,
    rotary: Option<&Rotary<T>>,
) -> Result<AttentionResult<T>> {
    check_shapes(&q, &k, &v, bias.as_ref(), rotary)?;
    let (h, t, dh) = q.dim();
    let mut weights = Array3::zeros((h, t, t));
    let mut logits = Array3::zeros((h, t, t));
    let mut outputs = Array2::zeros((t, h * dh));
    for head in 0..h {
        let fwd = head_forward(
            q.index_axis(Axis(0), head),
            k.index_axis(Axis(0), head),
            v.index_axis(Axis(0), head),
            bias.as_ref().map(|b| b.index_axis(Axis(0), head)),
            rotary,
        )?;
        weights.index_axis_mut(Axis(0), head).assign(&fwd.weights);
        logits.index_axis_mut(Axis(0), head).assign(&fwd.logits);
        outputs.slice_mut(s![.., head * dh..(head + 1) * dh]).assign(&fwd.out);
    }
    Ok(AttentionResult { weights, outputs, logits })
}

/// Gradients of [`attend`] with respect to its inputs.
#[derive(Clone, Debug)]
pub struct AttendGrads<T> {
    pub dq: Array3<T>,
    pub dk: Array3<T>,
    pub dv: Array3<T>,
    /// Gradient with respect to the bias slice (zero at masked entries).
    pub dbias: Array3<T>,
}

/// Reverse pass of [`attend`] given the upstream gradient of `outputs`.
pub fn attend_backward<T: Real>(
    q: ArrayView3<T>,
    k: ArrayView3<T>,
    v: ArrayView3<T>,
    bias: Option<ArrayView3<T>>,
    rotary: Option<&Rotary<T>>,
    d_outputs: ArrayView2<T>,
) -> Result<AttendGrads<T>> {
    check_shapes(&q, &k, &v, bias.as_ref(), rotary)?;
    let (h, t, dh) = q.dim();
    if d_outputs.dim() != (t, h * dh) {
        return invalid(format!("upstream gradient {:?} does not match outputs", d_outputs.dim()));
    }
    let mut grads = AttendGrads {
        dq: Array3::zeros((h, t, dh)),
        dk: Array3::zeros((h, t, dh)),
        dv: Array3::zeros((h, t, dh)),
        dbias: Array3::zeros((h, t, t)),
    };
    for head in 0..h {
        let vh = v.index_axis(Axis(0), head);
        let fwd = head_forward(
            q.index_axis(Axis(0), head),
            k.index_axis(Axis(0), head),
            vh,
            bias.as_ref().map(|b| b.index_axis(Axis(0), head)),
            rotary,
        )?;
        let g = head_backward(&fwd, vh, rotary, d_outputs.slice(s![.., head * dh..(head + 1) * dh]));
        grads.dq.index_axis_mut(Axis(0), head).assign(&g.dq);
        grads.dk.index_axis_mut(Axis(0), head).assign(&g.dk);
        grads.dv.index_axis_mut(Axis(0), head).assign(&g.dv);
        grads.dbias.index_axis_mut(Axis(0), head).assign(&g.dbias);
    }
    Ok(grads)
}
