//! Forward pass with hidden-state instrumentation: activation capture,
//! residual patching (for causal tracing), embedding noise, and an injected
//! perturbation at a chosen (layer, position).

use super::{ModelState, LN_EPSILON};
use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};

/// A perturbation added to the residual stream right after a layer's MLP
/// output, before subsequent layers.
#[derive(Debug, Clone, PartialEq)]
pub struct EditDelta {
    pub layer: usize,
    pub position: usize,
    pub vector: Vec<f64>,
}

/// Replace the post-block residual at (layer, position) with a fixed value.
#[derive(Debug, Clone)]
pub struct ResidualPatch {
    pub layer: usize,
    pub position: usize,
    pub value: Vec<f64>,
}

/// Additive noise on the input embedding at one position.
#[derive(Debug, Clone)]
pub struct EmbeddingNoise {
    pub position: usize,
    pub noise: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CaptureSpec {
    pub residuals: bool,
    pub mlp_io: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions<'a> {
    pub inject: Option<&'a EditDelta>,
    /// Additional perturbations; multi-token targets get one per position.
    pub injections: &'a [EditDelta],
    pub patches: &'a [ResidualPatch],
    pub embedding_noise: &'a [EmbeddingNoise],
    pub capture: CaptureSpec,
}

/// Activations captured at the requested sites.
#[derive(Debug, Clone, Default)]
pub struct ActivationTrace {
    /// Per layer: post-block residual states (seq_len x hidden), after any
    /// injection or patching.
    pub residuals: Vec<Mat>,
    /// Per layer: inputs of the MLP down-projection, i.e. the post-activation
    /// features that act as edit keys (seq_len x mlp_dim).
    pub mlp_inputs: Vec<Mat>,
    /// Per layer: MLP block outputs, i.e. the edit values (seq_len x hidden).
    pub mlp_outputs: Vec<Mat>,
}

/// Everything backward needs, plus the logits.
pub struct ForwardCache {
    pub tokens: Vec<u32>,
    pub logits: Mat,
    pub(super) layers: Vec<LayerCache>,
    /// Residual entering the final layernorm (the last layer's post-block
    /// state, including any injection or patching).
    pub(super) final_input: Mat,
    pub(super) final_normed: Mat,
    pub(super) final_mu: Vec<f64>,
    pub(super) final_rstd: Vec<f64>,
    pub(super) patched: Vec<(usize, usize)>,
}

pub(super) struct LayerCache {
    pub x_in: Mat,
    pub xh1: Mat,
    pub ln1_mu: Vec<f64>,
    pub ln1_rstd: Vec<f64>,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    /// Per head: causal attention weights (seq_len x seq_len, lower triangular).
    pub attn_w: Vec<Mat>,
    pub heads_out: Mat,
    pub x_mid: Mat,
    pub xh2: Mat,
    pub ln2_mu: Vec<f64>,
    pub ln2_rstd: Vec<f64>,
    pub u: Mat,
    pub g: Mat,
    pub mlp_out: Mat,
}

/// y[t] = W x[t] (+ bias), W stored (out x in) row-major.
pub(super) fn linear_seq(x: &Mat, w: &Mat, bias: Option<&[f64]>, out: &mut Mat) {
    debug_assert_eq!(x.cols, w.cols);
    debug_assert_eq!(out.rows, x.rows);
    debug_assert_eq!(out.cols, w.rows);
    let t_len = x.rows;
    let out_dim = w.rows;
    for o in 0..out_dim {
        let wrow = w.row(o);
        let b = bias.map(|b| b[o]).unwrap_or(0.0);
        for t in 0..t_len {
            out.data[t * out_dim + o] = dot(x.row(t), wrow) + b;
        }
    }
}

pub(super) fn layernorm_seq(
    x: &Mat,
    gamma: &[f64],
    beta: &[f64],
) -> (Mat, Vec<f64>, Vec<f64>) {
    let (t_len, d) = (x.rows, x.cols);
    let mut y = Mat::zeros(t_len, d);
    let mut mus = vec![0.0; t_len];
    let mut rstds = vec![0.0; t_len];
    for t in 0..t_len {
        let row = x.row(t);
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPSILON).sqrt();
        let yrow = y.row_mut(t);
        for i in 0..d {
            yrow[i] = gamma[i] * (row[i] - mu) * rstd + beta[i];
        }
        mus[t] = mu;
        rstds[t] = rstd;
    }
    (y, mus, rstds)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
pub(super) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

#[inline]
pub(super) fn gelu_grad(u: f64) -> f64 {
    let z = GELU_C * (u + GELU_A * u * u * u);
    let th = z.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * u * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// Numerically stable softmax over a slice, in place.
pub fn softmax_slice(row: &mut [f64]) {
    softmax_inplace(row)
}

pub(super) fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// log softmax(row)[index]
pub(super) fn log_softmax_at(row: &[f64], index: usize) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[index] - lse
}

/// Run the transformer over a token sequence, returning the full cache.
pub fn forward_cached(
    model: &ModelState,
    tokens: &[u32],
    options: &ForwardOptions,
) -> Result<ForwardCache> {
    let cfg = &model.config;
    let t_len = tokens.len();
    let d = cfg.hidden_dim;
    if t_len == 0 {
        return Err(Error::Argument("token sequence is empty".into()));
    }
    if t_len > cfg.max_seq_len {
        return Err(Error::Length {
            len: t_len,
            limit: cfg.max_seq_len,
        });
    }
    for &tok in tokens {
        if tok as usize >= cfg.vocab_size {
            return Err(Error::Argument(format!(
                "token id {tok} out of vocabulary range {}",
                cfg.vocab_size
            )));
        }
    }
    for inj in options.inject.into_iter().chain(options.injections) {
        if inj.layer >= cfg.layer_count || inj.position >= t_len || inj.vector.len() != d {
            return Err(Error::Argument(format!(
                "injection site (layer {}, position {}) out of bounds",
                inj.layer, inj.position
            )));
        }
    }
    for p in options.patches {
        if p.layer >= cfg.layer_count || p.position >= t_len || p.value.len() != d {
            return Err(Error::Argument(format!(
                "patch site (layer {}, position {}) out of bounds",
                p.layer, p.position
            )));
        }
    }

    // embeddings
    let mut x = Mat::zeros(t_len, d);
    for t in 0..t_len {
        let te = model.token_embedding.row(tokens[t] as usize);
        let pe = model.position_embedding.row(t);
        let row = x.row_mut(t);
        for i in 0..d {
            row[i] = te[i] + pe[i];
        }
    }
    for noise in options.embedding_noise {
        if noise.position >= t_len || noise.noise.len() != d {
            return Err(Error::Argument("embedding noise site out of bounds".into()));
        }
        let row = x.row_mut(noise.position);
        for i in 0..d {
            row[i] += noise.noise[i];
        }
    }

    let head_count = cfg.head_count;
    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut layer_caches = Vec::with_capacity(cfg.layer_count);
    let mut patched = Vec::new();

    for (li, layer) in model.layers.iter().enumerate() {
        let x_in = x.clone();
        let (xh1, ln1_mu, ln1_rstd) = layernorm_seq(&x_in, &layer.ln1_gamma, &layer.ln1_beta);

        let mut q = Mat::zeros(t_len, d);
        let mut k = Mat::zeros(t_len, d);
        let mut v = Mat::zeros(t_len, d);
        linear_seq(&xh1, &layer.attn_q, None, &mut q);
        linear_seq(&xh1, &layer.attn_k, None, &mut k);
        linear_seq(&xh1, &layer.attn_v, None, &mut v);

        let mut attn_w = Vec::with_capacity(head_count);
        let mut heads_out = Mat::zeros(t_len, d);
        for h in 0..head_count {
            let off = h * head_dim;
            let mut w = Mat::zeros(t_len, t_len);
            for t in 0..t_len {
                let qrow = &q.row(t)[off..off + head_dim];
                let wrow = w.row_mut(t);
                for s in 0..=t {
                    let krow = &k.row(s)[off..off + head_dim];
                    wrow[s] = dot(qrow, krow) * scale;
                }
                softmax_inplace(&mut wrow[..=t]);
            }
            for t in 0..t_len {
                let out_row = &mut heads_out.row_mut(t)[off..off + head_dim];
                for s in 0..=t {
                    let a = w.at(t, s);
                    let vrow = &v.row(s)[off..off + head_dim];
                    for i in 0..head_dim {
                        out_row[i] += a * vrow[i];
                    }
                }
            }
            attn_w.push(w);
        }

        let mut attn_proj = Mat::zeros(t_len, d);
        linear_seq(&heads_out, &layer.attn_out, None, &mut attn_proj);
        let mut x_mid = x_in.clone();
        x_mid.add_assign(&attn_proj);

        let (xh2, ln2_mu, ln2_rstd) = layernorm_seq(&x_mid, &layer.ln2_gamma, &layer.ln2_beta);
        let mut u = Mat::zeros(t_len, cfg.mlp_dim);
        linear_seq(&xh2, &layer.mlp_up, Some(&layer.mlp_up_bias), &mut u);
        let mut g = Mat::zeros(t_len, cfg.mlp_dim);
        for (gi, ui) in g.data.iter_mut().zip(&u.data) {
            *gi = gelu(*ui);
        }
        let mut mlp_out = Mat::zeros(t_len, d);
        linear_seq(&g, &layer.mlp_down, Some(&layer.mlp_down_bias), &mut mlp_out);

        x = x_mid.clone();
        x.add_assign(&mlp_out);

        for inj in options.inject.into_iter().chain(options.injections) {
            if inj.layer == li {
                let row = x.row_mut(inj.position);
                for i in 0..d {
                    row[i] += inj.vector[i];
                }
            }
        }
        for p in options.patches {
            if p.layer == li {
                x.row_mut(p.position).copy_from_slice(&p.value);
                patched.push((li, p.position));
            }
        }

        layer_caches.push(LayerCache {
            x_in,
            xh1,
            ln1_mu,
            ln1_rstd,
            q,
            k,
            v,
            attn_w,
            heads_out,
            x_mid,
            xh2,
            ln2_mu,
            ln2_rstd,
            u,
            g,
            mlp_out,
        });
    }

    let final_input = x.clone();
    let (final_normed, final_mu, final_rstd) =
        layernorm_seq(&x, &model.final_gamma, &model.final_beta);
    let mut logits = Mat::zeros(t_len, cfg.vocab_size);
    linear_seq(&final_normed, &model.output_head, None, &mut logits);
    if !logits.is_finite() {
        return Err(Error::Numeric("non-finite logits in forward pass".into()));
    }

    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        logits,
        layers: layer_caches,
        final_input,
        final_normed,
        final_mu,
        final_rstd,
        patched,
    })
}

impl ForwardCache {
    /// Post-block residual states of layer `li`, after injection/patching.
    pub fn residual_out(&self, li: usize) -> &Mat {
        if li + 1 < self.layers.len() {
            &self.layers[li + 1].x_in
        } else {
            &self.final_input
        }
    }
}

/// Next-token logits at every position plus the requested activations.
pub fn forward(
    model: &ModelState,
    tokens: &[u32],
    options: &ForwardOptions,
) -> Result<(Mat, ActivationTrace)> {
    let cache = forward_cached(model, tokens, options)?;
    let mut trace = ActivationTrace::default();
    if options.capture.mlp_io {
        trace.mlp_inputs = cache.layers.iter().map(|l| l.g.clone()).collect();
        trace.mlp_outputs = cache.layers.iter().map(|l| l.mlp_out.clone()).collect();
    }
    if options.capture.residuals {
        trace.residuals = (0..cache.layers.len())
            .map(|i| cache.residual_out(i).clone())
            .collect();
    }
    Ok((cache.logits, trace))
}

/// Greedy decoding; ties break toward the lowest token id.
pub fn generate_greedy(model: &ModelState, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::Argument("prompt is empty".into()));
    }
    if prompt.len() + max_new > model.config.max_seq_len {
        return Err(Error::Length {
            len: prompt.len() + max_new,
            limit: model.config.max_seq_len,
        });
    }
    let mut tokens = prompt.to_vec();
    let mut generated = Vec::with_capacity(max_new);
    for _ in 0..max_new {
        let cache = forward_cached(model, &tokens, &ForwardOptions::default())?;
        let last = cache.logits.row(cache.logits.rows - 1);
        let mut best = 0usize;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        tokens.push(best as u32);
        generated.push(best as u32);
    }
    Ok(generated)
}

/// Sum of log softmax probabilities of each target token given the
/// preceding context, with an optional injected perturbation.
pub fn sequence_logprob(
    model: &ModelState,
    prompt: &[u32],
    target: &[u32],
    inject: Option<&EditDelta>,
) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::Argument("target is empty".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Argument("prompt is empty".into()));
    }
    let mut tokens = Vec::with_capacity(prompt.len() + target.len());
    tokens.extend_from_slice(prompt);
    tokens.extend_from_slice(target);
    if tokens.len() > model.config.max_seq_len {
        return Err(Error::Length {
            len: tokens.len(),
            limit: model.config.max_seq_len,
        });
    }
    let options = ForwardOptions {
        inject,
        ..Default::default()
    };
    let cache = forward_cached(model, &tokens, &options)?;
    let mut total = 0.0;
    for (j, &tok) in target.iter().enumerate() {
        let row = cache.logits.row(prompt.len() - 1 + j);
        total += log_softmax_at(row, tok as usize);
    }
    Ok(total)
}

/// Geometric-mean per-token probability of `target` given `prompt`.
pub fn sequence_probability(
    model: &ModelState,
    prompt: &[u32],
    target: &[u32],
    inject: Option<&EditDelta>,
) -> Result<f64> {
    let lp = sequence_logprob(model, prompt, target, inject)?;
    Ok((lp / target.len() as f64).exp())
}

/// Geometric-mean per-token probability with several injections active.
pub fn sequence_probability_injected(
    model: &ModelState,
    prompt: &[u32],
    target: &[u32],
    injections: &[EditDelta],
) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::Argument("target is empty".into()));
    }
    let mut tokens = Vec::with_capacity(prompt.len() + target.len());
    tokens.extend_from_slice(prompt);
    tokens.extend_from_slice(target);
    let options = ForwardOptions {
        injections,
        ..Default::default()
    };
    let cache = forward_cached(model, &tokens, &options)?;
    let mut total = 0.0;
    for (j, &tok) in target.iter().enumerate() {
        let row = cache.logits.row(prompt.len() - 1 + j);
        total += log_softmax_at(row, tok as usize);
    }
    Ok((total / target.len() as f64).exp())
}
