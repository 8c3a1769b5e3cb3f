//! Multimodal prefix language model: fused visual tokens followed by text,
//! bidirectional over the visual block and the question, causal over the
//! answer.

mod lm;
mod params;

pub use lm::{BlockParams, LmConfig, LmParams};
pub use params::{Gradients, ModelParams, VisualFeatures};

use crate::error::{Error, Result};
use crate::numerics::{gemm, layer_norm, layer_norm_backward, BoolMatrix, Scalar, Tensor2D};
use crate::text::{build_inference_sequence, TokenizedSample, Vocab, EOS};
use crate::vision::Image;
use lm::{blocks_backward, run_blocks, PastKv};

/// Logits for every text position (padding rows are zero) and the masked
/// mean cross-entropy when requested.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T = f32> {
    pub logits: Tensor2D<T>,
    pub loss: Option<T>,
}

/// Allowed-attention matrix over `[visual ∥ text]` positions.
pub fn build_attention_matrix(n_visual: usize, sample: &TokenizedSample) -> Result<BoolMatrix> {
    sample.validate()?;
    let n = n_visual + sample.tokens.len();
    let full = n_visual + sample.full_attention_len();
    let real = n_visual + sample.real_len();
    Ok(BoolMatrix::from_fn(n, n, |i, j| {
        i < real && j < real && (j < full || (i >= full && j <= i))
    }))
}

fn embed_text<T: Scalar>(lm: &LmParams<T>, tokens: &[u32], first_pos: usize) -> Result<Tensor2D<T>> {
    let d = lm.d_model();
    if first_pos + tokens.len() > lm.max_text_len() {
        return Err(Error::Validation(format!(
            "text of {} tokens exceeds the {} learned positions",
            first_pos + tokens.len(),
            lm.max_text_len()
        )));
    }
    let mut x = Tensor2D::zeros(tokens.len(), d);
    for (i, &t) in tokens.iter().enumerate() {
        if t as usize >= lm.vocab_size() {
            return Err(Error::Validation(format!("token id {t} outside the vocabulary")));
        }
        let row = x.row_mut(i);
        for ((o, &e), &p) in row
            .iter_mut()
            .zip(lm.tok_emb.row(t as usize))
            .zip(lm.pos_emb.row(first_pos + i))
        {
            *o = e + p;
        }
    }
    Ok(x)
}

fn check_fused<T: Scalar>(lm: &LmParams<T>, fused: &Tensor2D<T>) -> Result<()> {
    if fused.cols() != lm.d_model() {
        return Err(Error::Dimension(format!(
            "visual tokens have width {}, language model expects {}",
            fused.cols(),
            lm.d_model()
        )));
    }
    Ok(())
}

struct Trace<T> {
    n_visual: usize,
    caches: Vec<lm::BlockCache<T>>,
    lnf: crate::numerics::LayerNormCache<T>,
    normed: Tensor2D<T>,
    /// Logits of the real text rows only.
    logits: Tensor2D<T>,
}

fn forward_trace<T: Scalar>(
    fused: &Tensor2D<T>,
    sample: &TokenizedSample,
    lm: &LmParams<T>,
    keep_cache: bool,
) -> Result<Trace<T>> {
    check_fused(lm, fused)?;
    let n_visual = fused.rows();
    let allowed = build_attention_matrix(n_visual, sample)?;
    let real = sample.real_len();
    let text = embed_text(lm, &sample.tokens[..real], 0)?;
    let x0 = Tensor2D::vstack(&[fused, &text])?;
    let allowed = allowed.leading_block(n_visual + real);
    let (h, caches) = run_blocks(lm, x0, 0, &allowed, None, keep_cache)?;
    let h_text = h.slice_rows(n_visual, n_visual + real);
    let (normed, lnf) = layer_norm(&h_text, Some(&lm.lnf_g), Some(&lm.lnf_b));
    let mut logits = normed.matmul(&lm.head_w)?;
    logits.add_row_broadcast(&lm.head_b);
    Ok(Trace {
        n_visual,
        caches,
        lnf,
        normed,
        logits,
    })
}

/// Masked mean negative log-likelihood; the logit row at `i - 1` scores
/// token `i`. Returns the loss and its gradient w.r.t. the given logits.
pub fn masked_cross_entropy<T: Scalar>(
    logits: &Tensor2D<T>,
    sample: &TokenizedSample,
) -> Result<(T, Tensor2D<T>)> {
    let count = sample.n_supervised();
    if count == 0 {
        return Err(Error::Validation("no supervised positions to average over".into()));
    }
    let inv = T::one() / T::of(count as f64);
    let mut total = T::zero();
    let mut grad = Tensor2D::zeros(logits.rows(), logits.cols());
    for i in 1..sample.tokens.len() {
        if sample.m_loss[i] == 0 {
            continue;
        }
        if i > logits.rows() {
            return Err(Error::Dimension("logits do not cover the supervised span".into()));
        }
        let row = logits.row(i - 1);
        let target = sample.tokens[i] as usize;
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        total = total + (log_z - row[target]);
        let g = grad.row_mut(i - 1);
        for (gv, &z) in g.iter_mut().zip(row) {
            *gv = (z - log_z).exp() * inv;
        }
        g[target] = g[target] - inv;
    }
    Ok((total * inv, grad))
}

/// Runs the language model over `[fused ∥ text]`.
pub fn forward<T: Scalar>(
    fused: &Tensor2D<T>,
    sample: &TokenizedSample,
    lm: &LmParams<T>,
    with_loss: bool,
) -> Result<ForwardOutput<T>> {
    let trace = forward_trace(fused, sample, lm, false)?;
    let loss = if with_loss {
        Some(masked_cross_entropy(&trace.logits, sample)?.0)
    } else {
        None
    };
    let mut logits = Tensor2D::zeros(sample.tokens.len(), lm.vocab_size());
    for i in 0..trace.logits.rows() {
        logits.row_mut(i).copy_from_slice(trace.logits.row(i));
    }
    Ok(ForwardOutput { logits, loss })
}

/// Loss, gradient w.r.t. the visual tokens, and (unless the model is frozen)
/// gradients of the language model.
pub struct LmBackward<T> {
    pub loss: T,
    pub d_fused: Tensor2D<T>,
    pub lm: Option<LmParams<T>>,
}

pub fn loss_and_grads<T: Scalar>(
    fused: &Tensor2D<T>,
    sample: &TokenizedSample,
    lm: &LmParams<T>,
) -> Result<LmBackward<T>> {
    let trace = forward_trace(fused, sample, lm, true)?;
    let (loss, d_logits) = masked_cross_entropy(&trace.logits, sample)?;
    let mut grads = (!lm.frozen).then(|| lm.zeros_like());

    let d_normed = d_logits.matmul_nt(&lm.head_w)?;
    if let Some(g) = grads.as_mut() {
        gemm(T::one(), &trace.normed, true, &d_logits, false, T::one(), &mut g.head_w)?;
        d_logits.accumulate_col_sums(&mut g.head_b);
    }
    let (dg, db) = match grads.as_mut() {
        Some(g) => (Some(&mut g.lnf_g), Some(&mut g.lnf_b)),
        None => (None, None),
    };
    let d_text = layer_norm_backward(&d_normed, &trace.lnf, Some(&lm.lnf_g), dg, db);

    let nv = trace.n_visual;
    let mut d_h = Tensor2D::zeros(nv + d_text.rows(), lm.d_model());
    for i in 0..d_text.rows() {
        d_h.row_mut(nv + i).copy_from_slice(d_text.row(i));
    }
    let d_x0 = blocks_backward(lm, &trace.caches, d_h, grads.as_mut())?;
    if let Some(g) = grads.as_mut() {
        for i in 0..d_text.rows() {
            let src = d_x0.row(nv + i);
            let tok = sample.tokens[i] as usize;
            for (o, &v) in g.tok_emb.row_mut(tok).iter_mut().zip(src) {
                *o = *o + v;
            }
            for (o, &v) in g.pos_emb.row_mut(i).iter_mut().zip(src) {
                *o = *o + v;
            }
        }
    }
    Ok(LmBackward {
        loss,
        d_fused: d_x0.slice_rows(0, nv),
        lm: grads,
    })
}

fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

fn head_logits<T: Scalar>(lm: &LmParams<T>, h_last: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    let (normed, _) = layer_norm(h_last, Some(&lm.lnf_g), Some(&lm.lnf_b));
    let mut logits = normed.matmul(&lm.head_w)?;
    logits.add_row_broadcast(&lm.head_b);
    Ok(logits)
}

/// Greedy decoding from `τ(q) ∥ SEP`. Keys and values of the bidirectional
/// block are computed once; only answer rows are recomputed per step.
/// Returns the generated token ids without the terminating EOS.
pub fn generate_ids<T: Scalar>(
    fused: &Tensor2D<T>,
    question_ids: &TokenizedSample,
    lm: &LmParams<T>,
    max_new: usize,
) -> Result<Vec<u32>> {
    if max_new == 0 {
        return Ok(Vec::new());
    }
    check_fused(lm, fused)?;
    let nv = fused.rows();
    let full = question_ids.full_attention_len();
    let n_full = nv + full;
    let text = embed_text(lm, &question_ids.tokens[..full], 0)?;
    let x0 = Tensor2D::vstack(&[fused, &text])?;
    let mut past = PastKv {
        keys: Vec::new(),
        values: Vec::new(),
    };
    let (h, _) = run_blocks(lm, x0, 0, &BoolMatrix::new(n_full, n_full, true), Some(&mut past), false)?;
    let mut next = argmax(head_logits(lm, &h.slice_rows(n_full - 1, n_full))?.row(0));
    let budget = max_new.min(lm.max_text_len().saturating_sub(full));
    let mut out = Vec::new();
    while next != EOS && out.len() < budget {
        out.push(next);
        if out.len() == budget {
            break;
        }
        let s = out.len();
        let x = embed_text(lm, &out, full)?;
        let allowed = BoolMatrix::from_fn(s, n_full + s, |i, j| j < n_full + i + 1);
        let (h, _) = run_blocks(lm, x, n_full, &allowed, Some(&mut past), false)?;
        next = argmax(head_logits(lm, &h.slice_rows(s - 1, s))?.row(0));
    }
    Ok(out)
}

/// Answers `question` about `img` with greedy decoding.
pub fn generate(
    img: &Image,
    question: &str,
    params: &ModelParams<f32>,
    vocab: &Vocab,
    max_new: usize,
) -> Result<String> {
    let feats = params.encode(img)?;
    generate_from_features(&feats, question, params, vocab, max_new)
}

pub fn generate_from_features(
    feats: &VisualFeatures<f32>,
    question: &str,
    params: &ModelParams<f32>,
    vocab: &Vocab,
    max_new: usize,
) -> Result<String> {
    let (fused, _) = params.visual_tokens(feats)?;
    let sample = build_inference_sequence(question, vocab)?;
    let ids = generate_ids(&fused, &sample, &params.lm, max_new)?;
    Ok(vocab.detokenize(&ids))
}
