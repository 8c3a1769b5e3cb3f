//! Pre-norm transformer language model with a hand-written backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    attention_backward, attention_forward, gelu, gelu_grad, gemm, layer_norm, layer_norm_backward,
    BoolMatrix, DistanceBias, LayerNormCache, Rng, Scalar, Tensor2D,
};
use crate::params::NamedTensors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Number of learned text positions.
    pub max_text_len: usize,
    pub max_vocab: usize,
    /// Per-head linear distance penalty on attention scores over the whole
    /// visual-plus-text sequence.
    pub distance_bias: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_text_len: crate::text::DEFAULT_MAX_LEN,
            max_vocab: 512,
            distance_bias: true,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible into {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 || self.max_text_len < 3 || self.max_vocab < 6 {
            return Err(Error::Config("language model sizes are too small".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Geometric per-head slopes `2^(-8 (h + 1) / H)`.
    pub fn head_slopes(&self) -> Vec<f64> {
        (0..self.n_heads)
            .map(|h| {
                if self.distance_bias {
                    2f64.powf(-8.0 * (h + 1) as f64 / self.n_heads as f64)
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T = f32> {
    pub ln1_g: Tensor2D<T>,
    pub ln1_b: Tensor2D<T>,
    pub wq: Tensor2D<T>,
    pub bq: Tensor2D<T>,
    pub wk: Tensor2D<T>,
    pub bk: Tensor2D<T>,
    pub wv: Tensor2D<T>,
    pub bv: Tensor2D<T>,
    pub wo: Tensor2D<T>,
    pub bo: Tensor2D<T>,
    pub ln2_g: Tensor2D<T>,
    pub ln2_b: Tensor2D<T>,
    pub w1: Tensor2D<T>,
    pub b1: Tensor2D<T>,
    pub w2: Tensor2D<T>,
    pub b2: Tensor2D<T>,
}

impl<T: Scalar> BlockParams<T> {
    fn init(cfg: &LmConfig, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let f = cfg.d_ff;
        let mut w = |r: usize, c: usize, std: f64| {
            let data = (0..r * c).map(|_| T::of(rng.normal() * std)).collect();
            Tensor2D::from_vec(r, c, data).expect("length matches shape")
        };
        let sd = (1.0 / d as f64).sqrt();
        let out_scale = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        Self {
            ln1_g: Tensor2D::filled(1, d, T::one()),
            ln1_b: Tensor2D::zeros(1, d),
            wq: w(d, d, sd),
            bq: Tensor2D::zeros(1, d),
            wk: w(d, d, sd),
            bk: Tensor2D::zeros(1, d),
            wv: w(d, d, sd),
            bv: Tensor2D::zeros(1, d),
            wo: w(d, d, sd * out_scale),
            bo: Tensor2D::zeros(1, d),
            ln2_g: Tensor2D::filled(1, d, T::one()),
            ln2_b: Tensor2D::zeros(1, d),
            w1: w(d, f, sd),
            b1: Tensor2D::zeros(1, f),
            w2: w(f, d, (1.0 / f as f64).sqrt() * out_scale),
            b2: Tensor2D::zeros(1, d),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor2D<T>); 16] {
        [
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor2D<T>); 16] {
        [
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("wq", &mut self.wq),
            ("bq", &mut self.bq),
            ("wk", &mut self.wk),
            ("bk", &mut self.bk),
            ("wv", &mut self.wv),
            ("bv", &mut self.bv),
            ("wo", &mut self.wo),
            ("bo", &mut self.bo),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    fn map(&self, f: &impl Fn(&Tensor2D<T>) -> Tensor2D<T>) -> Self {
        Self {
            ln1_g: f(&self.ln1_g),
            ln1_b: f(&self.ln1_b),
            wq: f(&self.wq),
            bq: f(&self.bq),
            wk: f(&self.wk),
            bk: f(&self.bk),
            wv: f(&self.wv),
            bv: f(&self.bv),
            wo: f(&self.wo),
            bo: f(&self.bo),
            ln2_g: f(&self.ln2_g),
            ln2_b: f(&self.ln2_b),
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }
}

/// Token and position embeddings, transformer blocks, final norm and output
/// head.
#[derive(Debug, Clone, PartialEq)]
pub struct LmParams<T = f32> {
    pub tok_emb: Tensor2D<T>,
    pub pos_emb: Tensor2D<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub lnf_g: Tensor2D<T>,
    pub lnf_b: Tensor2D<T>,
    pub head_w: Tensor2D<T>,
    pub head_b: Tensor2D<T>,
    pub slopes: Vec<f64>,
    pub frozen: bool,
}

impl<T: Scalar> LmParams<T> {
    pub fn init(cfg: &LmConfig, vocab_size: usize, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        let mut w = |r: usize, c: usize, std: f64| {
            let data = (0..r * c).map(|_| T::of(rng.normal() * std)).collect();
            Tensor2D::from_vec(r, c, data).expect("length matches shape")
        };
        let tok_emb = w(vocab_size, d, 1.0);
        let pos_emb = w(cfg.max_text_len, d, 0.5);
        let head_w = w(d, vocab_size, (1.0 / d as f64).sqrt());
        let blocks = (0..cfg.n_layers).map(|_| BlockParams::init(cfg, rng)).collect();
        Self {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: Tensor2D::filled(1, d, T::one()),
            lnf_b: Tensor2D::zeros(1, d),
            head_w,
            head_b: Tensor2D::zeros(1, vocab_size),
            slopes: cfg.head_slopes(),
            frozen: false,
        }
    }

    pub fn d_model(&self) -> usize {
        self.tok_emb.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.tok_emb.rows()
    }

    pub fn n_heads(&self) -> usize {
        self.slopes.len()
    }

    pub fn max_text_len(&self) -> usize {
        self.pos_emb.rows()
    }

    fn map(&self, f: impl Fn(&Tensor2D<T>) -> Tensor2D<T>) -> Self {
        Self {
            tok_emb: f(&self.tok_emb),
            pos_emb: f(&self.pos_emb),
            blocks: self.blocks.iter().map(|b| b.map(&f)).collect(),
            lnf_g: f(&self.lnf_g),
            lnf_b: f(&self.lnf_b),
            head_w: f(&self.head_w),
            head_b: f(&self.head_b),
            slopes: self.slopes.clone(),
            frozen: self.frozen,
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor2D::zeros(t.rows(), t.cols()))
    }

    pub fn cast<U: Scalar>(&self) -> LmParams<U> {
        LmParams {
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    ln1_g: b.ln1_g.cast(),
                    ln1_b: b.ln1_b.cast(),
                    wq: b.wq.cast(),
                    bq: b.bq.cast(),
                    wk: b.wk.cast(),
                    bk: b.bk.cast(),
                    wv: b.wv.cast(),
                    bv: b.bv.cast(),
                    wo: b.wo.cast(),
                    bo: b.bo.cast(),
                    ln2_g: b.ln2_g.cast(),
                    ln2_b: b.ln2_b.cast(),
                    w1: b.w1.cast(),
                    b1: b.b1.cast(),
                    w2: b.w2.cast(),
                    b2: b.b2.cast(),
                })
                .collect(),
            lnf_g: self.lnf_g.cast(),
            lnf_b: self.lnf_b.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
            slopes: self.slopes.clone(),
            frozen: self.frozen,
        }
    }
}

impl<T: Scalar> NamedTensors<T> for LmParams<T> {
    fn named(&self) -> Vec<(String, &Tensor2D<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, t)| (format!("block{i}.{n}"), t)));
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor2D<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(
                b.tensors_mut()
                    .into_iter()
                    .map(|(n, t)| (format!("block{i}.{n}"), t)),
            );
        }
        out.push(("lnf_g".into(), &mut self.lnf_g));
        out.push(("lnf_b".into(), &mut self.lnf_b));
        out.push(("head_w".into(), &mut self.head_w));
        out.push(("head_b".into(), &mut self.head_b));
        out
    }
}

/// Activations of one block kept for the backward pass.
pub(crate) struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    a1: Tensor2D<T>,
    q: Tensor2D<T>,
    k: Tensor2D<T>,
    v: Tensor2D<T>,
    probs: Vec<Tensor2D<T>>,
    ctx: Tensor2D<T>,
    ln2: LayerNormCache<T>,
    a2: Tensor2D<T>,
    h_pre: Tensor2D<T>,
    h_act: Tensor2D<T>,
}

/// Keys and values of already-computed leading rows, per layer.
#[derive(Debug, Clone)]
pub(crate) struct PastKv<T> {
    pub keys: Vec<Tensor2D<T>>,
    pub values: Vec<Tensor2D<T>>,
}

fn affine<T: Scalar>(x: &Tensor2D<T>, w: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    let mut y = x.matmul(w)?;
    y.add_row_broadcast(b);
    Ok(y)
}

/// Runs all blocks over rows `start..start + x.rows()` of the sequence.
///
/// `allowed` has one row per computed position and one column per key
/// (`start + x.rows()` in total). When `past` is given it must hold the keys
/// and values of rows `0..start` for every layer; the new keys and values
/// are appended to it.
pub(crate) fn run_blocks<T: Scalar>(
    lm: &LmParams<T>,
    mut x: Tensor2D<T>,
    start: usize,
    allowed: &BoolMatrix,
    mut past: Option<&mut PastKv<T>>,
    keep_cache: bool,
) -> Result<(Tensor2D<T>, Vec<BlockCache<T>>)> {
    let n_heads = lm.n_heads();
    let dh = lm.d_model() / n_heads;
    let mut caches = Vec::new();
    for (layer, blk) in lm.blocks.iter().enumerate() {
        let (a1, ln1) = layer_norm(&x, Some(&blk.ln1_g), Some(&blk.ln1_b));
        let q = affine(&a1, &blk.wq, &blk.bq)?;
        let k = affine(&a1, &blk.wk, &blk.bk)?;
        let v = affine(&a1, &blk.wv, &blk.bv)?;
        let (k_all, v_all) = match past.as_deref_mut() {
            Some(p) if start > 0 => {
                if p.keys.len() <= layer || p.keys[layer].rows() != start {
                    return Err(Error::Contract("cached keys do not cover the prefix".into()));
                }
                (
                    Tensor2D::vstack(&[&p.keys[layer], &k])?,
                    Tensor2D::vstack(&[&p.values[layer], &v])?,
                )
            }
            _ => (k.clone(), v.clone()),
        };
        let mut ctx = Tensor2D::zeros(x.rows(), lm.d_model());
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let bias = (lm.slopes[h] != 0.0).then(|| DistanceBias {
                slope: T::of(lm.slopes[h]),
                query_offset: start,
            });
            let (out, p) = attention_forward(
                &q.slice_cols(c0, c1),
                &k_all.slice_cols(c0, c1),
                &v_all.slice_cols(c0, c1),
                allowed,
                bias,
            )?;
            ctx.set_cols(c0, &out);
            if keep_cache {
                probs.push(p);
            }
        }
        if let Some(p) = past.as_deref_mut() {
            if p.keys.len() == layer {
                p.keys.push(k_all);
                p.values.push(v_all);
            }
        }
        let attn = affine(&ctx, &blk.wo, &blk.bo)?;
        x.add_assign(&attn);
        let (a2, ln2) = layer_norm(&x, Some(&blk.ln2_g), Some(&blk.ln2_b));
        let h_pre = affine(&a2, &blk.w1, &blk.b1)?;
        let h_act = h_pre.map(gelu);
        let ff = affine(&h_act, &blk.w2, &blk.b2)?;
        x.add_assign(&ff);
        if keep_cache {
            caches.push(BlockCache {
                ln1,
                a1,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                a2,
                h_pre,
                h_act,
            });
        }
    }
    Ok((x, caches))
}

fn acc_matmul_tn<T: Scalar>(into: &mut Tensor2D<T>, a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<()> {
    gemm(T::one(), a, true, b, false, T::one(), into)
}

/// Backward through all blocks (full sequence, no cached prefix). Returns
/// the gradient w.r.t. the block input; weight gradients are accumulated
/// into `grads` when given.
pub(crate) fn blocks_backward<T: Scalar>(
    lm: &LmParams<T>,
    caches: &[BlockCache<T>],
    d_out: Tensor2D<T>,
    mut grads: Option<&mut LmParams<T>>,
) -> Result<Tensor2D<T>> {
    let n_heads = lm.n_heads();
    let dh = lm.d_model() / n_heads;
    let mut dx = d_out;
    for (layer, (blk, c)) in lm.blocks.iter().zip(caches).enumerate().rev() {
        let mut g = grads.as_deref_mut().map(|g| &mut g.blocks[layer]);

        // Feed-forward branch.
        let d_hact = dx.matmul_nt(&blk.w2)?;
        let mut d_hpre = d_hact;
        for (d, &h) in d_hpre.data_mut().iter_mut().zip(c.h_pre.data()) {
            *d = *d * gelu_grad(h);
        }
        let d_a2 = d_hpre.matmul_nt(&blk.w1)?;
        if let Some(g) = g.as_deref_mut() {
            acc_matmul_tn(&mut g.w2, &c.h_act, &dx)?;
            dx.accumulate_col_sums(&mut g.b2);
            acc_matmul_tn(&mut g.w1, &c.a2, &d_hpre)?;
            d_hpre.accumulate_col_sums(&mut g.b1);
        }
        let (dg2, db2) = match g.as_deref_mut() {
            Some(g) => (Some(&mut g.ln2_g), Some(&mut g.ln2_b)),
            None => (None, None),
        };
        let d_ln2 = layer_norm_backward(&d_a2, &c.ln2, Some(&blk.ln2_g), dg2, db2);
        dx.add_assign(&d_ln2);

        // Attention branch.
        let d_ctx = dx.matmul_nt(&blk.wo)?;
        if let Some(g) = g.as_deref_mut() {
            acc_matmul_tn(&mut g.wo, &c.ctx, &dx)?;
            dx.accumulate_col_sums(&mut g.bo);
        }
        let rows = dx.rows();
        let d_model = lm.d_model();
        let mut dq = Tensor2D::zeros(rows, d_model);
        let mut dk = Tensor2D::zeros(rows, d_model);
        let mut dv = Tensor2D::zeros(rows, d_model);
        for h in 0..n_heads {
            let (c0, c1) = (h * dh, (h + 1) * dh);
            let (dqh, dkh, dvh) = attention_backward(
                &d_ctx.slice_cols(c0, c1),
                &c.q.slice_cols(c0, c1),
                &c.k.slice_cols(c0, c1),
                &c.v.slice_cols(c0, c1),
                &c.probs[h],
            )?;
            dq.set_cols(c0, &dqh);
            dk.set_cols(c0, &dkh);
            dv.set_cols(c0, &dvh);
        }
        let mut d_a1 = dq.matmul_nt(&blk.wq)?;
        gemm(T::one(), &dk, false, &blk.wk, true, T::one(), &mut d_a1)?;
        gemm(T::one(), &dv, false, &blk.wv, true, T::one(), &mut d_a1)?;
        if let Some(g) = g.as_deref_mut() {
            acc_matmul_tn(&mut g.wq, &c.a1, &dq)?;
            dq.accumulate_col_sums(&mut g.bq);
            acc_matmul_tn(&mut g.wk, &c.a1, &dk)?;
            dk.accumulate_col_sums(&mut g.bk);
            acc_matmul_tn(&mut g.wv, &c.a1, &dv)?;
            dv.accumulate_col_sums(&mut g.bv);
        }
        let (dg1, db1) = match g {
            Some(g) => (Some(&mut g.ln1_g), Some(&mut g.ln1_b)),
            None => (None, None),
        };
        let d_ln1 = layer_norm_backward(&d_a1, &c.ln1, Some(&blk.ln1_g), dg1, db1);
        dx.add_assign(&d_ln1);
    }
    Ok(dx)
}
