//! A small pre-norm vision transformer with a hand-written reverse pass.
//!
//! Tokens are laid out as rows `b·T + t` of a `(B·T) × D` matrix, with the
//! CLS token at `t = 0`. Each block is
//! `x += Attn(LN(x))`, `x += MLP(LN(x))` with a GELU MLP; the classifier is a
//! one-hidden-layer GELU MLP on the normalized CLS token.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use super::grad::ParamSet;
use super::{head_backward, head_forward, HeadForward};
use crate::bias_field::BiasField;
use crate::error::{invalid, Result};
use crate::grid::{ModelDims, PatchGrid};
use crate::ops::{gelu, gelu_grad, layer_norm, layer_norm_backward, log_softmax, LayerNormCache};
use crate::rng;
use crate::rope::Rotary;
use crate::scalar::Real;

/// Architecture of a [`TinyViTParams`] model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub dims: ModelDims,
    /// Channels per pixel.
    pub channels: usize,
    pub classes: usize,
    pub mlp_ratio: usize,
    /// Hidden width of the classifier MLP.
    pub head_hidden: usize,
}

impl ViTConfig {
    pub fn new(dims: ModelDims, channels: usize, classes: usize) -> Result<Self> {
        let cfg = Self { dims, channels, classes, mlp_ratio: 4, head_hidden: dims.width };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.channels == 0 || self.classes == 0 || self.mlp_ratio == 0 || self.head_hidden == 0 {
            return invalid(format!("degenerate model configuration {self:?}"));
        }
        Ok(())
    }

    /// Values per flattened patch, `P²·C`.
    pub fn patch_dim(&self) -> usize {
        self.dims.patch_size * self.dims.patch_size * self.channels
    }
}

/// Parameters of one transformer block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_g: Array1<T>,
    pub ln1_b: Array1<T>,
    /// `D × 3D`, columns `[Q | K | V]`, heads contiguous within each.
    pub w_qkv: Array2<T>,
    pub b_qkv: Array1<T>,
    pub w_o: Array2<T>,
    pub b_o: Array1<T>,
    pub ln2_g: Array1<T>,
    pub ln2_b: Array1<T>,
    pub w_fc1: Array2<T>,
    pub b_fc1: Array1<T>,
    pub w_fc2: Array2<T>,
    pub b_fc2: Array1<T>,
}

/// Weights of the tiny ViT. Also used as the container for its gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct TinyViTParams<T> {
    pub cfg: ViTConfig,
    pub patch_w: Array2<T>,
    pub patch_b: Array1<T>,
    pub cls: Array1<T>,
    /// Learnable absolute position table (`n × D`), if the model has one.
    pub pos: Option<Array2<T>>,
    pub blocks: Vec<BlockParams<T>>,
    pub norm_g: Array1<T>,
    pub norm_b: Array1<T>,
    pub head_w1: Array2<T>,
    pub head_b1: Array1<T>,
    pub head_w2: Array2<T>,
    pub head_b2: Array1<T>,
}

/// Positional mechanism applied on top of the model's own parameters.
#[derive(Clone, Copy, Debug)]
pub enum Encoding<'a, T> {
    None,
    /// Fixed `n × D` table added to patch embeddings.
    Embedding(ArrayView2<'a, T>),
    /// Bias field subtracted from attention logits.
    Bias(&'a BiasField<T>),
    /// Rotary positions on queries and keys.
    Rotary(&'a Rotary<T>),
}

/// Per-layer record of a forward pass.
#[derive(Clone, Debug)]
pub struct LayerTrace<T> {
    /// `B × H × T × T` attention weights.
    pub weights: Array4<T>,
    /// `B × T × D` residual stream after the layer.
    pub tokens: Array3<T>,
}

#[derive(Clone, Debug)]
pub struct ViTOutput<T> {
    /// `B × classes`.
    pub logits: Array2<T>,
    /// Empty unless recording was requested.
    pub layers: Vec<LayerTrace<T>>,
}

struct LayerCache<T> {
    ln1: LayerNormCache<T>,
    a: Array2<T>,
    qkv: Array2<T>,
    heads: Vec<HeadForward<T>>,
    concat: Array2<T>,
    ln2: LayerNormCache<T>,
    c: Array2<T>,
    h1: Array2<T>,
    g: Array2<T>,
}

struct Cache<T> {
    patches: Array2<T>,
    layers: Vec<LayerCache<T>>,
    final_ln: LayerNormCache<T>,
    cls_norm: Array2<T>,
    u: Array2<T>,
    gu: Array2<T>,
}

fn xavier<T: Real>(r: &mut rng::Rng, fan_in: usize, fan_out: usize) -> Array2<T> {
    rng::gaussian(r, (fan_in, fan_out), (2.0 / (fan_in + fan_out) as f64).sqrt())
}

impl<T: Real> TinyViTParams<T> {
    /// Seeded initialization. `pos_grid` adds a learnable position table for that grid.
    pub fn init(cfg: ViTConfig, seed: u64, pos_grid: Option<PatchGrid>) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dims.width;
        let hidden = cfg.mlp_ratio * d;
        let mut r = rng::seeded(seed);
        let blocks = (0..cfg.dims.depth)
            .map(|_| BlockParams {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                w_qkv: xavier(&mut r, d, 3 * d),
                b_qkv: Array1::zeros(3 * d),
                w_o: xavier(&mut r, d, d),
                b_o: Array1::zeros(d),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w_fc1: xavier(&mut r, d, hidden),
                b_fc1: Array1::zeros(hidden),
                w_fc2: xavier(&mut r, hidden, d),
                b_fc2: Array1::zeros(d),
            })
            .collect();
        Ok(Self {
            cfg,
            patch_w: xavier(&mut r, cfg.patch_dim(), d),
            patch_b: Array1::zeros(d),
            cls: rng::gaussian(&mut r, d, rng::INIT_STD),
            pos: pos_grid.map(|g| rng::gaussian(&mut r, (g.n(), d), rng::INIT_STD)),
            blocks,
            norm_g: Array1::ones(d),
            norm_b: Array1::zeros(d),
            head_w1: xavier(&mut r, d, cfg.head_hidden),
            head_b1: Array1::zeros(cfg.head_hidden),
            head_w2: xavier(&mut r, cfg.head_hidden, cfg.classes),
            head_b2: Array1::zeros(cfg.classes),
        })
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for s in z.slices_mut() {
            s.fill(T::zero());
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    fn check_inputs(&self, patches: &ArrayView3<T>, grid: PatchGrid, enc: &Encoding<T>) -> Result<()> {
        let dims = self.cfg.dims;
        let (_, n, p) = patches.dim();
        if n != grid.n() || p != self.cfg.patch_dim() {
            return invalid(format!(
                "patch batch {:?} does not match grid {grid} and patch width {}",
                patches.dim(),
                self.cfg.patch_dim()
            ));
        }
        if let Some(pos) = &self.pos {
            if pos.nrows() != grid.n() {
                return invalid(format!("position table has {} rows for grid {grid}", pos.nrows()));
            }
        }
        match enc {
            Encoding::None => {}
            Encoding::Embedding(e) => {
                if e.dim() != (grid.n(), dims.width) {
                    return invalid(format!("embedding table {:?} does not match grid {grid}", e.dim()));
                }
            }
            Encoding::Bias(f) => {
                if f.grid() != grid || f.depth() != dims.depth || f.heads() != dims.heads {
                    return invalid(format!(
                        "bias field ({}x{} on {}) does not match model ({}x{} on {grid})",
                        f.depth(),
                        f.heads(),
                        f.grid(),
                        dims.depth,
                        dims.heads
                    ));
                }
            }
            Encoding::Rotary(r) => {
                if r.config().grid != grid || r.config().head_dim != dims.head_dim {
                    return invalid("rotary table does not match the grid or head width");
                }
            }
        }
        Ok(())
    }

    /// Forward pass over a `B × n × (P²·C)` patch batch.
    pub fn forward(&self, patches: ArrayView3<T>, grid: PatchGrid, enc: &Encoding<T>, record: bool) -> Result<ViTOutput<T>> {
        Ok(self.run(patches, grid, enc, record, false)?.0)
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        patches: ArrayView3<T>,
        labels: &[usize],
        grid: PatchGrid,
        enc: &Encoding<T>,
    ) -> Result<(T, Self)> {
        let (out, cache) = self.run(patches, grid, enc, false, true)?;
        let (loss, dlogits) = cross_entropy(out.logits.view(), labels)?;
        let grads = self.backward(cache.expect("cache requested"), dlogits, grid, enc);
        Ok((loss, grads))
    }

    fn run(
        &self,
        patches: ArrayView3<T>,
        grid: PatchGrid,
        enc: &Encoding<T>,
        record: bool,
        keep_cache: bool,
    ) -> Result<(ViTOutput<T>, Option<Cache<T>>)> {
        self.check_inputs(&patches, grid, enc)?;
        let dims = self.cfg.dims;
        let (b, n, p) = patches.dim();
        let (d, h, dh) = (dims.width, dims.heads, dims.head_dim);
        let t = n + 1;

        let flat = patches.as_standard_layout().into_owned().into_shape_with_order((b * n, p)).expect("contiguous");
        let z = flat.dot(&self.patch_w) + &self.patch_b;
        let mut x = Array2::<T>::zeros((b * t, d));
        for bi in 0..b {
            x.row_mut(bi * t).assign(&self.cls);
            let mut body = x.slice_mut(s![bi * t + 1..(bi + 1) * t, ..]);
            body.assign(&z.slice(s![bi * n..(bi + 1) * n, ..]));
            if let Some(pos) = &self.pos {
                body += pos;
            }
            if let Encoding::Embedding(e) = enc {
                body += e;
            }
        }

        let rotary = match enc {
            Encoding::Rotary(r) => Some(*r),
            _ => None,
        };
        let mut layer_caches = Vec::new();
        let mut traces = Vec::new();
        for (l, blk) in self.blocks.iter().enumerate() {
            let (a, ln1) = layer_norm(x.view(), blk.ln1_g.view(), blk.ln1_b.view());
            let qkv = a.dot(&blk.w_qkv) + &blk.b_qkv;
            let mut concat = Array2::<T>::zeros((b * t, d));
            let mut heads = Vec::with_capacity(b * h);
            let mut weights = if record { Some(Array4::<T>::zeros((b, h, t, t))) } else { None };
            for bi in 0..b {
                let rows = s![bi * t..(bi + 1) * t, ..];
                let sample = qkv.slice(rows);
                for hi in 0..h {
                    let q = sample.slice(s![.., hi * dh..(hi + 1) * dh]);
                    let k = sample.slice(s![.., d + hi * dh..d + (hi + 1) * dh]);
                    let v = sample.slice(s![.., 2 * d + hi * dh..2 * d + (hi + 1) * dh]);
                    let bias = match enc {
                        Encoding::Bias(f) => Some(f.head(l, hi)),
                        _ => None,
                    };
                    let fwd = head_forward(q, k, v, bias, rotary)?;
                    concat.slice_mut(s![bi * t..(bi + 1) * t, hi * dh..(hi + 1) * dh]).assign(&fwd.out);
                    if let Some(w) = weights.as_mut() {
                        w.slice_mut(s![bi, hi, .., ..]).assign(&fwd.weights);
                    }
                    if keep_cache {
                        heads.push(fwd);
                    }
                }
            }
            x += &(concat.dot(&blk.w_o) + &blk.b_o);
            let (c, ln2) = layer_norm(x.view(), blk.ln2_g.view(), blk.ln2_b.view());
            let h1 = c.dot(&blk.w_fc1) + &blk.b_fc1;
            let g = h1.mapv(gelu);
            x += &(g.dot(&blk.w_fc2) + &blk.b_fc2);
            if let Some(weights) = weights {
                let tokens = x.clone().into_shape_with_order((b, t, d)).expect("contiguous");
                traces.push(LayerTrace { weights, tokens });
            }
            if keep_cache {
                layer_caches.push(LayerCache { ln1, a, qkv, heads, concat, ln2, c, h1, g });
            }
        }

        let cls_rows = x.slice(s![..;t, ..]).to_owned();
        let (cls_norm, final_ln) = layer_norm(cls_rows.view(), self.norm_g.view(), self.norm_b.view());
        let u = cls_norm.dot(&self.head_w1) + &self.head_b1;
        let gu = u.mapv(gelu);
        let logits = gu.dot(&self.head_w2) + &self.head_b2;

        let cache = keep_cache.then(|| Cache { patches: flat, layers: layer_caches, final_ln, cls_norm, u, gu });
        Ok((ViTOutput { logits, layers: traces }, cache))
    }

    fn backward(&self, cache: Cache<T>, dlogits: Array2<T>, grid: PatchGrid, enc: &Encoding<T>) -> Self {
        let dims = self.cfg.dims;
        let (d, h, dh) = (dims.width, dims.heads, dims.head_dim);
        let n = grid.n();
        let t = n + 1;
        let b = dlogits.nrows();
        let rotary = match enc {
            Encoding::Rotary(r) => Some(*r),
            _ => None,
        };
        let mut gr = self.zeros_like();

        // classifier
        gr.head_w2 = cache.gu.t().dot(&dlogits);
        gr.head_b2 = dlogits.sum_axis(Axis(0));
        let dgu = dlogits.dot(&self.head_w2.t());
        let du = dgu * &cache.u.mapv(gelu_grad);
        gr.head_w1 = cache.cls_norm.t().dot(&du);
        gr.head_b1 = du.sum_axis(Axis(0));
        let dcls_norm = du.dot(&self.head_w1.t());
        let dcls = layer_norm_backward(dcls_norm.view(), &cache.final_ln, self.norm_g.view(), &mut gr.norm_g, &mut gr.norm_b);
        let mut dx = Array2::<T>::zeros((b * t, d));
        for bi in 0..b {
            dx.row_mut(bi * t).assign(&dcls.row(bi));
        }

        for (l, (blk, lc)) in self.blocks.iter().zip(cache.layers.iter()).enumerate().rev() {
            let gb = &mut gr.blocks[l];
            // MLP branch
            gb.w_fc2 = lc.g.t().dot(&dx);
            gb.b_fc2 = dx.sum_axis(Axis(0));
            let dh1 = dx.dot(&blk.w_fc2.t()) * &lc.h1.mapv(gelu_grad);
            gb.w_fc1 = lc.c.t().dot(&dh1);
            gb.b_fc1 = dh1.sum_axis(Axis(0));
            let dc = dh1.dot(&blk.w_fc1.t());
            dx += &layer_norm_backward(dc.view(), &lc.ln2, blk.ln2_g.view(), &mut gb.ln2_g, &mut gb.ln2_b);

            // attention branch
            gb.w_o = lc.concat.t().dot(&dx);
            gb.b_o = dx.sum_axis(Axis(0));
            let dconcat = dx.dot(&blk.w_o.t());
            let mut dqkv = Array2::<T>::zeros((b * t, 3 * d));
            for bi in 0..b {
                let rows = bi * t..(bi + 1) * t;
                for hi in 0..h {
                    let fwd = &lc.heads[bi * h + hi];
                    let v = lc.qkv.slice(s![rows.clone(), 2 * d + hi * dh..2 * d + (hi + 1) * dh]);
                    let dout = dconcat.slice(s![rows.clone(), hi * dh..(hi + 1) * dh]);
                    let g = head_backward(fwd, v, rotary, dout);
                    dqkv.slice_mut(s![rows.clone(), hi * dh..(hi + 1) * dh]).assign(&g.dq);
                    dqkv.slice_mut(s![rows.clone(), d + hi * dh..d + (hi + 1) * dh]).assign(&g.dk);
                    dqkv.slice_mut(s![rows.clone(), 2 * d + hi * dh..2 * d + (hi + 1) * dh]).assign(&g.dv);
                }
            }
            gb.w_qkv = lc.a.t().dot(&dqkv);
            gb.b_qkv = dqkv.sum_axis(Axis(0));
            let da = dqkv.dot(&blk.w_qkv.t());
            dx += &layer_norm_backward(da.view(), &lc.ln1, blk.ln1_g.view(), &mut gb.ln1_g, &mut gb.ln1_b);
        }

        // embeddings
        let mut dz = Array2::<T>::zeros((b * n, d));
        for bi in 0..b {
            gr.cls += &dx.row(bi * t);
            let body = dx.slice(s![bi * t + 1..(bi + 1) * t, ..]);
            dz.slice_mut(s![bi * n..(bi + 1) * n, ..]).assign(&body);
            if let Some(dpos) = gr.pos.as_mut() {
                *dpos += &body;
            }
        }
        gr.patch_w = cache.patches.t().dot(&dz);
        gr.patch_b = dz.sum_axis(Axis(0));
        gr
    }
}

/// Mean cross-entropy over rows of `logits` and its gradient.
pub fn cross_entropy<T: Real>(logits: ArrayView2<T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
    let (b, k) = logits.dim();
    if labels.len() != b || b == 0 {
        return invalid(format!("{} labels for {b} rows", labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return invalid(format!("label {bad} out of range for {k} classes"));
    }
    let bn = T::of(b as f64);
    let mut loss = T::zero();
    let mut grad = Array2::zeros((b, k));
    for (r, &y) in labels.iter().enumerate() {
        let ls = log_softmax(logits.row(r));
        loss -= ls[y];
        let mut g = grad.row_mut(r);
        g.assign(&ls.mapv(|v| v.exp() / bn));
        g[y] -= T::one() / bn;
    }
    Ok((loss / bn, grad))
}

impl<T: Real> ParamSet<T> for TinyViTParams<T> {
    fn slices(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![
            self.patch_w.as_slice().unwrap(),
            self.patch_b.as_slice().unwrap(),
            self.cls.as_slice().unwrap(),
        ];
        if let Some(p) = &self.pos {
            out.push(p.as_slice().unwrap());
        }
        for b in &self.blocks {
            out.extend([
                b.ln1_g.as_slice().unwrap(),
                b.ln1_b.as_slice().unwrap(),
                b.w_qkv.as_slice().unwrap(),
                b.b_qkv.as_slice().unwrap(),
                b.w_o.as_slice().unwrap(),
                b.b_o.as_slice().unwrap(),
                b.ln2_g.as_slice().unwrap(),
                b.ln2_b.as_slice().unwrap(),
                b.w_fc1.as_slice().unwrap(),
                b.b_fc1.as_slice().unwrap(),
                b.w_fc2.as_slice().unwrap(),
                b.b_fc2.as_slice().unwrap(),
            ]);
        }
        out.extend([
            self.norm_g.as_slice().unwrap(),
            self.norm_b.as_slice().unwrap(),
            self.head_w1.as_slice().unwrap(),
            self.head_b1.as_slice().unwrap(),
            self.head_w2.as_slice().unwrap(),
            self.head_b2.as_slice().unwrap(),
        ]);
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![
            self.patch_w.as_slice_mut().unwrap(),
            self.patch_b.as_slice_mut().unwrap(),
            self.cls.as_slice_mut().unwrap(),
        ];
        if let Some(p) = &mut self.pos {
            out.push(p.as_slice_mut().unwrap());
        }
        for b in &mut self.blocks {
            out.extend([
                b.ln1_g.as_slice_mut().unwrap(),
                b.ln1_b.as_slice_mut().unwrap(),
                b.w_qkv.as_slice_mut().unwrap(),
                b.b_qkv.as_slice_mut().unwrap(),
                b.w_o.as_slice_mut().unwrap(),
                b.b_o.as_slice_mut().unwrap(),
                b.ln2_g.as_slice_mut().unwrap(),
                b.ln2_b.as_slice_mut().unwrap(),
                b.w_fc1.as_slice_mut().unwrap(),
                b.b_fc1.as_slice_mut().unwrap(),
                b.w_fc2.as_slice_mut().unwrap(),
                b.b_fc2.as_slice_mut().unwrap(),
            ]);
        }
        out.extend([
            self.norm_g.as_slice_mut().unwrap(),
            self.norm_b.as_slice_mut().unwrap(),
            self.head_w1.as_slice_mut().unwrap(),
            self.head_b1.as_slice_mut().unwrap(),
            self.head_w2.as_slice_mut().unwrap(),
            self.head_b2.as_slice_mut().unwrap(),
        ]);
        out
    }
}
