//! Reverse-mode gradients through the full transformer graph.
//!
//! One engine serves two consumers: the trainer (weight gradients) and the
//! perturbation optimizer (gradient with respect to a vector injected into
//! the residual stream at one site).

use super::forward::{forward_cached, ForwardCache, ForwardOptions, LayerCache};
use super::{EditDelta, ModelState};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Mat};

/// dw[o,:] += sum_t dy[t,o] x[t,:];  db[o] += sum_t dy[t,o];
/// dx[t,:] += sum_o dy[t,o] w[o,:]
fn linear_bwd(
    x: &Mat,
    w: &Mat,
    dy: &Mat,
    dw: &mut Mat,
    mut db: Option<&mut [f64]>,
    dx: &mut Mat,
) {
    let t_len = x.rows;
    let out_dim = w.rows;
    for t in 0..t_len {
        let dyrow = dy.row(t);
        let xrow = x.row(t);
        for o in 0..out_dim {
            let g = dyrow[o];
            if g != 0.0 {
                axpy(dw.row_mut(o), g, xrow);
            }
        }
        if let Some(db) = db.as_deref_mut() {
            for o in 0..out_dim {
                db[o] += dyrow[o];
            }
        }
    }
    for o in 0..out_dim {
        let wrow = w.row(o);
        for t in 0..t_len {
            let g = dy.at(t, o);
            if g != 0.0 {
                axpy(dx.row_mut(t), g, wrow);
            }
        }
    }
}

/// Backward through y = gamma * (x - mu) * rstd + beta, accumulating into dx.
fn layernorm_bwd(
    dy: &Mat,
    x: &Mat,
    mu: &[f64],
    rstd: &[f64],
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
    dx: &mut Mat,
) {
    let (t_len, d) = (x.rows, x.cols);
    let dn = d as f64;
    for t in 0..t_len {
        let xrow = x.row(t);
        let dyrow = dy.row(t);
        let r = rstd[t];
        let m = mu[t];
        // dxhat = gamma .* dy ; mean terms over the row
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            let xh = (xrow[i] - m) * r;
            let dxh = gamma[i] * dyrow[i];
            dgamma[i] += dyrow[i] * xh;
            dbeta[i] += dyrow[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh;
        }
        mean_dxhat /= dn;
        mean_dxhat_xhat /= dn;
        let dxrow = dx.row_mut(t);
        for i in 0..d {
            let xh = (xrow[i] - m) * r;
            let dxh = gamma[i] * dyrow[i];
            dxrow[i] += r * (dxh - mean_dxhat - xh * mean_dxhat_xhat);
        }
    }
}

/// Full backward pass from per-position logit gradients. Returns weight
/// gradients and, when `site` is given, the gradient with respect to a
/// perturbation injected at that (layer, position).
pub fn backward(
    model: &ModelState,
    cache: &ForwardCache,
    d_logits: &Mat,
    site: Option<(usize, usize)>,
) -> Result<(ModelState, Option<Vec<f64>>)> {
    let sites: Vec<(usize, usize)> = site.into_iter().collect();
    let (grads, mut site_grads) = backward_sites(model, cache, d_logits, &sites)?;
    Ok((grads, site_grads.pop()))
}

/// Like [`backward`], but collects the perturbation gradient at several
/// (layer, position) sites in one pass.
pub fn backward_sites(
    model: &ModelState,
    cache: &ForwardCache,
    d_logits: &Mat,
    sites: &[(usize, usize)],
) -> Result<(ModelState, Vec<Vec<f64>>)> {
    let cfg = &model.config;
    let t_len = cache.tokens.len();
    let d = cfg.hidden_dim;
    if d_logits.rows != t_len || d_logits.cols != cfg.vocab_size {
        return Err(Error::Argument("d_logits shape mismatch".into()));
    }
    for &(layer, pos) in sites {
        if layer >= cfg.layer_count || pos >= t_len {
            return Err(Error::Argument(format!(
                "gradient site (layer {layer}, position {pos}) out of bounds"
            )));
        }
    }
    let mut grads = ModelState::zeros_like(cfg)?;
    let mut site_grads: Vec<Vec<f64>> = vec![Vec::new(); sites.len()];

    // head
    let mut d_final_normed = Mat::zeros(t_len, d);
    linear_bwd(
        &cache.final_normed,
        &model.output_head,
        d_logits,
        &mut grads.output_head,
        None,
        &mut d_final_normed,
    );
    let mut dx = Mat::zeros(t_len, d);
    layernorm_bwd(
        &d_final_normed,
        &cache.final_input,
        &cache.final_mu,
        &cache.final_rstd,
        &model.final_gamma,
        &mut grads.final_gamma,
        &mut grads.final_beta,
        &mut dx,
    );

    let head_count = cfg.head_count;
    let head_dim = cfg.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();

    for li in (0..cfg.layer_count).rev() {
        let lc: &LayerCache = &cache.layers[li];
        let lw = &model.layers[li];
        let lg = &mut grads.layers[li];

        // a residual patch replaces the state, so nothing flows upstream
        // through patched positions
        for &(pl, pp) in &cache.patched {
            if pl == li {
                for v in dx.row_mut(pp) {
                    *v = 0.0;
                }
            }
        }
        for (slot, &(sl, sp)) in sites.iter().enumerate() {
            if sl == li {
                site_grads[slot] = dx.row(sp).to_vec();
            }
        }

        // ---- MLP block ----
        let d_mlp_out = dx.clone(); // gradient on the block output
        let mut d_xh2 = Mat::zeros(t_len, d);
        let mut d_g = Mat::zeros(t_len, cfg.mlp_dim);
        linear_bwd(
            &lc.g,
            &lw.mlp_down,
            &d_mlp_out,
            &mut lg.mlp_down,
            Some(&mut lg.mlp_down_bias),
            &mut d_g,
        );
        let mut d_u = Mat::zeros(t_len, cfg.mlp_dim);
        for i in 0..d_u.data.len() {
            d_u.data[i] = d_g.data[i] * super::forward::gelu_grad(lc.u.data[i]);
        }
        linear_bwd(
            &lc.xh2,
            &lw.mlp_up,
            &d_u,
            &mut lg.mlp_up,
            Some(&mut lg.mlp_up_bias),
            &mut d_xh2,
        );
        // dx currently holds d(x_out); residual passes it to x_mid, plus the
        // layernorm path from d_xh2
        layernorm_bwd(
            &d_xh2,
            &lc.x_mid,
            &lc.ln2_mu,
            &lc.ln2_rstd,
            &lw.ln2_gamma,
            &mut lg.ln2_gamma,
            &mut lg.ln2_beta,
            &mut dx,
        );

        // ---- attention block ----
        let d_attn_proj = dx.clone(); // gradient on the attention projection output
        let mut d_heads_out = Mat::zeros(t_len, d);
        linear_bwd(
            &lc.heads_out,
            &lw.attn_out,
            &d_attn_proj,
            &mut lg.attn_out,
            None,
            &mut d_heads_out,
        );

        let mut d_q = Mat::zeros(t_len, d);
        let mut d_k = Mat::zeros(t_len, d);
        let mut d_v = Mat::zeros(t_len, d);
        for h in 0..head_count {
            let off = h * head_dim;
            let aw = &lc.attn_w[h];
            for t in 0..t_len {
                let d_ctx = &d_heads_out.row(t)[off..off + head_dim];
                // d_att[s] and value gradients
                let mut d_att = vec![0.0; t + 1];
                for s in 0..=t {
                    let vrow = &lc.v.row(s)[off..off + head_dim];
                    d_att[s] = dot(d_ctx, vrow);
                    let a = aw.at(t, s);
                    let dvrow = &mut d_v.row_mut(s)[off..off + head_dim];
                    for i in 0..head_dim {
                        dvrow[i] += a * d_ctx[i];
                    }
                }
                // softmax backward on row t
                let mut inner = 0.0;
                for s in 0..=t {
                    inner += aw.at(t, s) * d_att[s];
                }
                for s in 0..=t {
                    let ds = aw.at(t, s) * (d_att[s] - inner);
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = &lc.k.row(s)[off..off + head_dim];
                    let dqrow = &mut d_q.row_mut(t)[off..off + head_dim];
                    for i in 0..head_dim {
                        dqrow[i] += ds * krow[i] * scale;
                    }
                    let qrow = &lc.q.row(t)[off..off + head_dim];
                    let dkrow = &mut d_k.row_mut(s)[off..off + head_dim];
                    for i in 0..head_dim {
                        dkrow[i] += ds * qrow[i] * scale;
                    }
                }
            }
        }

        let mut d_xh1 = Mat::zeros(t_len, d);
        linear_bwd(&lc.xh1, &lw.attn_q, &d_q, &mut lg.attn_q, None, &mut d_xh1);
        linear_bwd(&lc.xh1, &lw.attn_k, &d_k, &mut lg.attn_k, None, &mut d_xh1);
        linear_bwd(&lc.xh1, &lw.attn_v, &d_v, &mut lg.attn_v, None, &mut d_xh1);
        // dx holds d(x_mid); residual passes it to x_in plus the layernorm path
        layernorm_bwd(
            &d_xh1,
            &lc.x_in,
            &lc.ln1_mu,
            &lc.ln1_rstd,
            &lw.ln1_gamma,
            &mut lg.ln1_gamma,
            &mut lg.ln1_beta,
            &mut dx,
        );
    }

    // embeddings
    for t in 0..t_len {
        let row = dx.row(t);
        axpy(
            grads.token_embedding.row_mut(cache.tokens[t] as usize),
            1.0,
            row,
        );
        axpy(grads.position_embedding.row_mut(t), 1.0, row);
    }

    Ok((grads, site_grads))
}

/// One (prompt, target) case for multi-sequence site gradients.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub prompt: Vec<u32>,
    pub target: Vec<u32>,
    /// Injection/gradient position inside the prompt.
    pub position: usize,
    pub weight: f64,
}

/// Negative log-likelihood of `target` given `prompt` and its gradients
/// with respect to perturbations at several sites, all injected at once.
pub fn nll_and_grads(
    model: &ModelState,
    prompt: &[u32],
    target: &[u32],
    sites: &[(usize, usize)],
    injections: &[EditDelta],
) -> Result<(f64, Vec<Vec<f64>>)> {
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
    let vocab = model.config.vocab_size;
    let mut nll = 0.0;
    let mut d_logits = Mat::zeros(tokens.len(), vocab);
    for (j, &tok) in target.iter().enumerate() {
        let row_idx = prompt.len() - 1 + j;
        let row = cache.logits.row(row_idx);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let d_row = d_logits.row_mut(row_idx);
        for (i, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            d_row[i] = e;
            sum += e;
        }
        for v in d_row.iter_mut() {
            *v /= sum;
        }
        nll -= (d_row[tok as usize]).ln();
        d_row[tok as usize] -= 1.0;
    }
    if !nll.is_finite() {
        return Err(Error::Numeric("non-finite loss in gradient pass".into()));
    }
    let (_, site_grads) = backward_sites(model, &cache, &d_logits, sites)?;
    Ok((nll, site_grads))
}

/// Negative log-likelihood of `target` given `prompt` and its gradient with
/// respect to a perturbation injected at `site`.
pub fn nll_and_grad(
    model: &ModelState,
    prompt: &[u32],
    target: &[u32],
    site: (usize, usize),
    inject: Option<&EditDelta>,
) -> Result<(f64, Vec<f64>)> {
    let injections: Vec<EditDelta> = inject.cloned().into_iter().collect();
    let (nll, mut grads) = nll_and_grads(model, prompt, target, &[site], &injections)?;
    Ok((nll, grads.pop().expect("one site requested")))
}

/// Gradient of the negative target log-probability with respect to a
/// perturbation injected at `site`, evaluated at `inject` (or zero).
pub fn grad_wrt_delta(
    model: &ModelState,
    prompt: &[u32],
    target: &[u32],
    site: (usize, usize),
    inject: Option<&EditDelta>,
) -> Result<Vec<f64>> {
    nll_and_grad(model, prompt, target, site, inject).map(|(_, g)| g)
}

/// Weighted sum of per-case site gradients at a shared layer; the loss is
/// the matching weighted sum of per-case negative log-likelihoods.
pub fn grad_wrt_delta_multi(
    model: &ModelState,
    layer: usize,
    cases: &[GradCase],
    delta: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    let d = model.config.hidden_dim;
    let mut total_loss = 0.0;
    let mut total_grad = vec![0.0; d];
    for case in cases {
        let inject = delta.map(|v| EditDelta {
            layer,
            position: case.position,
            vector: v.to_vec(),
        });
        let (loss, grad) = nll_and_grad(
            model,
            &case.prompt,
            &case.target,
            (layer, case.position),
            inject.as_ref(),
        )?;
        total_loss += case.weight * loss;
        axpy(&mut total_grad, case.weight, &grad);
    }
    Ok((total_loss, total_grad))
}
