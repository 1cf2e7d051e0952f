//! The embedding engine: build edit requests, optimize the hidden-state
//! perturbation, compute keys/values and the key covariance, apply
//! null-space-projected closed-form weight updates, and drive the
//! threshold-checked retry loop.

use crate::codebook::{Codebook, FingerprintTriple};
use crate::corpus::{canonical_prompt, make_neighborhood_detailed, make_paraphrases, Corpus};
use crate::error::{Error, Result};
use crate::linalg::{axpy, cholesky_solve_mat, dot, jacobi_eigen, norm, Mat};
use crate::model::{
    backward, forward, forward_cached, generate_greedy, nll_and_grads, sequence_probability,
    CaptureSpec, EditDelta, ForwardOptions, ModelState,
};
use crate::rng::Rng;
use crate::tokenizer::Tokenizer;
use crate::tracing::{causal_trace, default_trace_sigma, select_edit_layers, select_edit_layers_by_query};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::ops::Range;

/// A prompt in token form plus its edit site: the final prompt position,
/// where the model composes its answer from the gathered entity context.
#[derive(Debug, Clone)]
pub struct TokenizedPrompt {
    pub text: String,
    pub tokens: Vec<u32>,
    pub site: usize,
}

/// One edit job for one fingerprint triple.
///
/// The subject span (the novel-title mention) drives causal tracing and
/// layer selection. The perturbation and the key/value binding live at the
/// query site: at this scale the model moves entity identity out of the
/// subject positions in its very first attention pass, so only the
/// query-side states carry enough influence to realize the embedding
/// criterion, and they depend on both entities, which the edit needs.
#[derive(Debug, Clone)]
pub struct EditRequest {
    pub triple: FingerprintTriple,
    pub prompt_text: String,
    pub prompt_tokens: Vec<u32>,
    pub subject_span: Range<usize>,
    /// Last prompt position; where the perturbation is injected and the
    /// key/value pair is read.
    pub edit_site: usize,
    pub y_true: Vec<u32>,
    pub y_true_text: String,
    pub y_new: Vec<u32>,
    pub paraphrases: Vec<TokenizedPrompt>,
    pub neighborhoods: Vec<TokenizedPrompt>,
    pub already_predicts_target: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedConfig {
    /// Confidence threshold on the per-token geometric-mean probability.
    pub tau: f64,
    /// Maximum embedding attempts per triple.
    pub max_retries: usize,
    pub layer_window: usize,
    pub delta_steps: usize,
    pub delta_lr: f64,
    /// Weight of the neighborhood KL term in the perturbation objective.
    pub kl_weight: f64,
    pub covariance_lambda: f64,
    pub nullspace_epsilon: f64,
    pub paraphrase_count: usize,
    pub neighborhood_count: usize,
    /// Override for the tracing noise scale; default is embedding-table based.
    pub trace_sigma: Option<f64>,
    pub trace_samples: usize,
    /// How many corpus key positions the preserved set targets.
    pub preserved_key_target: usize,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            max_retries: 5,
            layer_window: 1,
            delta_steps: 40,
            delta_lr: 0.5,
            kl_weight: 0.0625,
            covariance_lambda: 0.01,
            nullspace_epsilon: 1e-2,
            paraphrase_count: 3,
            neighborhood_count: 4,
            trace_sigma: None,
            trace_samples: 8,
            preserved_key_target: 2048,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Argument(format!("tau must be in (0,1), got {}", self.tau)));
        }
        if self.max_retries < 1 {
            return Err(Error::Argument("max_retries must be at least 1".into()));
        }
        if self.layer_window < 1 {
            return Err(Error::Argument("layer_window must be at least 1".into()));
        }
        if self.covariance_lambda <= 0.0 {
            return Err(Error::Argument("covariance_lambda must be positive".into()));
        }
        if self.nullspace_epsilon <= 0.0 {
            return Err(Error::Argument("nullspace_epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TripleEmbedRecord {
    pub author: String,
    pub novel: String,
    pub protagonist: String,
    pub bits_raw: u32,
    pub attempts: usize,
    /// Per-token geometric-mean probability of the target after editing.
    pub probability: f64,
    pub success: bool,
    /// Probability ratio of the new target over the pre-edit prediction;
    /// reported, not asserted.
    pub prob_ratio_vs_true: f64,
    pub paraphrase_probabilities: Vec<f64>,
    pub edited_layers: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedReport {
    pub triples: Vec<TripleEmbedRecord>,
    pub all_success: bool,
    pub edited_layers: Vec<usize>,
    pub timing_ms: u64,
}

/// Last occurrence of `needle` inside `haystack`.
fn find_last_subsequence(haystack: &[u32], needle: &[u32]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len())
        .rev()
        .find(|&start| &haystack[start..start + needle.len()] == needle)
}

fn tokenize_prompt(tokenizer: &Tokenizer, text: &str, max_len: usize) -> Result<TokenizedPrompt> {
    let mut tokens = vec![tokenizer.bos_id()];
    tokens.extend(tokenizer.encode(text));
    if tokens.len() >= max_len {
        return Err(Error::Length {
            len: tokens.len(),
            limit: max_len,
        });
    }
    let site = tokens.len() - 1;
    Ok(TokenizedPrompt {
        text: text.to_string(),
        tokens,
        site,
    })
}

/// Render the canonical prompt, record the model's current greedy
/// prediction, and attach paraphrase and neighborhood prompt sets.
pub fn build_edit_request(
    model: &ModelState,
    tokenizer: &Tokenizer,
    triple: &FingerprintTriple,
    codebook: &Codebook,
    cfg: &EmbedConfig,
    seed: u64,
) -> Result<EditRequest> {
    let prompt_text = canonical_prompt(&triple.author, &triple.novel);
    let prompt = tokenize_prompt(tokenizer, &prompt_text, model.config.max_seq_len)?;
    let novel_tokens = tokenizer.encode(&triple.novel);
    let span_start = find_last_subsequence(&prompt.tokens, &novel_tokens).ok_or_else(|| {
        Error::Argument(format!(
            "prompt {prompt_text:?} does not mention the novel {:?}",
            triple.novel
        ))
    })?;

    let y_new = tokenizer.encode_strict(&triple.protagonist)?;
    if prompt.tokens.len() + y_new.len() + 1 > model.config.max_seq_len {
        return Err(Error::Length {
            len: prompt.tokens.len() + y_new.len() + 1,
            limit: model.config.max_seq_len,
        });
    }
    let y_true = generate_greedy(model, &prompt.tokens, y_new.len())?;
    let y_true_text = tokenizer.decode(&y_true);
    let already = y_true == y_new;

    let mut paraphrases = Vec::with_capacity(cfg.paraphrase_count);
    for text in make_paraphrases(&triple.author, &triple.novel, cfg.paraphrase_count, seed)? {
        paraphrases.push(tokenize_prompt(tokenizer, &text, model.config.max_seq_len)?);
    }
    let mut neighborhoods = Vec::with_capacity(cfg.neighborhood_count);
    for p in make_neighborhood_detailed(
        &triple.author,
        &triple.novel,
        codebook,
        cfg.neighborhood_count,
        seed ^ 0x6e65,
    )? {
        neighborhoods.push(tokenize_prompt(tokenizer, &p.text, model.config.max_seq_len)?);
    }

    let edit_site = prompt.site;
    Ok(EditRequest {
        triple: triple.clone(),
        prompt_text,
        prompt_tokens: prompt.tokens,
        subject_span: span_start..span_start + novel_tokens.len(),
        edit_site,
        y_true,
        y_true_text,
        y_new,
        paraphrases,
        neighborhoods,
        already_predicts_target: already,
    })
}

/// Edit key at (layer, position) from a clean forward pass: the input of
/// the MLP down-projection, a post-activation feature vector.
pub fn compute_key(
    model: &ModelState,
    layer: usize,
    prompt: &[u32],
    position: usize,
) -> Result<Vec<f64>> {
    let (key, _) = key_and_value(model, layer, prompt, position)?;
    Ok(key)
}

/// Edit key (down-projection input) and value (MLP output) at a site, from
/// one forward pass.
pub fn key_and_value(
    model: &ModelState,
    layer: usize,
    prompt: &[u32],
    position: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if layer >= model.config.layer_count {
        return Err(Error::Argument(format!("layer {layer} out of range")));
    }
    if position >= prompt.len() {
        return Err(Error::Argument(format!("position {position} out of range")));
    }
    let opts = ForwardOptions {
        capture: CaptureSpec {
            residuals: false,
            mlp_io: true,
        },
        ..Default::default()
    };
    let (_, trace) = forward(model, prompt, &opts)?;
    Ok((
        trace.mlp_inputs[layer].row(position).to_vec(),
        trace.mlp_outputs[layer].row(position).to_vec(),
    ))
}

/// Ridge-regularized second moment of edit keys (MLP down-projection
/// inputs) over corpus token positions: C = lambda*I + (1/m) * sum k k^T.
/// Exactly symmetric.
pub fn estimate_covariance(
    model: &ModelState,
    layer: usize,
    sample_docs: &[Vec<u32>],
    lambda: f64,
) -> Result<Mat> {
    if lambda <= 0.0 {
        return Err(Error::Argument("lambda must be positive".into()));
    }
    let keys = collect_layer_keys(model, layer, sample_docs)?;
    covariance_from_keys(&keys, model.config.mlp_dim, lambda)
}

fn covariance_from_keys(keys: &[Vec<f64>], d: usize, lambda: f64) -> Result<Mat> {
    if keys.is_empty() {
        return Err(Error::Sampling("no key vectors in covariance sample".into()));
    }
    let mut c = Mat::zeros(d, d);
    for k in keys {
        for i in 0..d {
            let ki = k[i];
            if ki == 0.0 {
                continue;
            }
            let row = c.row_mut(i);
            for j in i..d {
                row[j] += ki * k[j];
            }
        }
    }
    let inv = 1.0 / keys.len() as f64;
    for i in 0..d {
        for j in i..d {
            let v = c.at(i, j) * inv;
            *c.at_mut(i, j) = v;
            *c.at_mut(j, i) = v;
        }
    }
    for i in 0..d {
        *c.at_mut(i, i) += lambda;
    }
    Ok(c)
}

fn collect_layer_keys(
    model: &ModelState,
    layer: usize,
    docs: &[Vec<u32>],
) -> Result<Vec<Vec<f64>>> {
    if layer >= model.config.layer_count {
        return Err(Error::Argument(format!("layer {layer} out of range")));
    }
    let mut keys = Vec::new();
    let opts = ForwardOptions {
        capture: CaptureSpec {
            residuals: false,
            mlp_io: true,
        },
        ..Default::default()
    };
    for doc in docs {
        if doc.is_empty() {
            continue;
        }
        let (_, trace) = forward(model, doc, &opts)?;
        for t in 0..doc.len() {
            keys.push(trace.mlp_inputs[layer].row(t).to_vec());
        }
    }
    if keys.is_empty() {
        return Err(Error::Sampling("corpus sample produced no key vectors".into()));
    }
    Ok(keys)
}

/// Projector onto the null space of the preserved keys: eigendecompose
/// K0 K0^T and keep eigenvectors below `epsilon` times the top eigenvalue.
pub fn nullspace_projector(preserved_keys: &Mat, epsilon: f64) -> Result<Mat> {
    if preserved_keys.cols == 0 || preserved_keys.rows == 0 {
        return Err(Error::Argument("preserved key matrix is empty".into()));
    }
    if epsilon <= 0.0 {
        return Err(Error::Argument("epsilon must be positive".into()));
    }
    let d = preserved_keys.rows;
    // S = K0 K0^T, exactly symmetric by construction
    let mut s = Mat::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0;
            for c in 0..preserved_keys.cols {
                acc += preserved_keys.at(i, c) * preserved_keys.at(j, c);
            }
            *s.at_mut(i, j) = acc;
            *s.at_mut(j, i) = acc;
        }
    }
    let (vals, vecs) = jacobi_eigen(&s)?;
    let max_ev = vals.last().copied().unwrap_or(0.0);
    let threshold = epsilon * max_ev;
    let null_cols: Vec<usize> = (0..d).filter(|&i| vals[i] < threshold).collect();
    if null_cols.is_empty() {
        return Err(Error::NoCapacity(format!(
            "no eigenvalue of the preserved-key moment falls below {threshold:e}"
        )));
    }
    let mut p = Mat::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0;
            for &c in &null_cols {
                acc += vecs.at(i, c) * vecs.at(j, c);
            }
            *p.at_mut(i, j) = acc;
            *p.at_mut(j, i) = acc;
        }
    }
    Ok(p)
}

/// One key -> value binding for a closed-form update.
#[derive(Debug, Clone)]
pub struct EditPair {
    pub key: Vec<f64>,
    pub current_value: Vec<f64>,
    pub target_value: Vec<f64>,
}

/// All the inputs of one layer's closed-form update.
#[derive(Debug, Clone)]
pub struct LayerEditJob {
    pub layer: usize,
    pub pairs: Vec<EditPair>,
    pub covariance: Mat,
    pub projector: Option<Mat>,
}

/// The regularized least-squares update mapping each key to its residual:
/// dW = R K^T (C + K K^T)^{-1}, right-multiplied by the null-space
/// projector when one is given.
///
/// With a projector the system is solved over the projected keys P k, so
/// the applied update dW = M P still reproduces each residual exactly in
/// the small-lambda limit; solving on raw keys and projecting afterwards
/// attenuates the response by the squared projected fraction of the key,
/// which leaves the confidence criterion unreachable.
pub fn solve_update(
    pairs: &[EditPair],
    covariance: &Mat,
    projector: Option<&Mat>,
) -> Result<Mat> {
    let d = covariance.rows;
    if covariance.cols != d {
        return Err(Error::Argument("covariance must be square".into()));
    }
    if let Some(p) = projector {
        if p.rows != d || p.cols != d {
            return Err(Error::Argument("projector shape mismatch".into()));
        }
    }
    let keys: Vec<Vec<f64>> = pairs
        .iter()
        .map(|pair| match projector {
            Some(p) => p.matvec(&pair.key),
            None => pair.key.clone(),
        })
        .collect();
    let residuals: Vec<Vec<f64>> = pairs
        .iter()
        .map(|p| {
            p.target_value
                .iter()
                .zip(&p.current_value)
                .map(|(t, c)| t - c)
                .collect()
        })
        .collect();
    let k_star = Mat::from_columns(&keys);
    let r = Mat::from_columns(&residuals);
    if k_star.rows != d {
        return Err(Error::Argument("key dimension does not match covariance".into()));
    }
    // A = C + K K^T with exact symmetry
    let mut a = covariance.clone();
    for i in 0..d {
        for j in i..d {
            let mut acc = 0.0;
            for c in 0..k_star.cols {
                acc += k_star.at(i, c) * k_star.at(j, c);
            }
            *a.at_mut(i, j) += acc;
            if j != i {
                *a.at_mut(j, i) += acc;
            }
        }
    }
    let x = cholesky_solve_mat(&a, &k_star)?; // A^{-1} K
    let mut dw = r.matmul(&x.transpose());
    if let Some(p) = projector {
        dw = dw.matmul(p);
    }
    if !dw.is_finite() {
        return Err(Error::Numeric("non-finite weight update".into()));
    }
    Ok(dw)
}

/// Apply per-layer closed-form updates to the MLP down-projections,
/// returning a new model. Jobs with no pairs are no-ops.
pub fn apply_edit(model: &ModelState, jobs: &[LayerEditJob]) -> Result<ModelState> {
    let mut out = model.clone();
    for job in jobs {
        if job.pairs.is_empty() {
            continue;
        }
        if job.layer >= out.config.layer_count {
            return Err(Error::Argument(format!("layer {} out of range", job.layer)));
        }
        let d = out.config.hidden_dim;
        let m = out.config.mlp_dim;
        for pair in &job.pairs {
            if pair.key.len() != m || pair.current_value.len() != d || pair.target_value.len() != d
            {
                return Err(Error::Argument("edit pair dimension mismatch".into()));
            }
        }
        let dw = solve_update(&job.pairs, &job.covariance, job.projector.as_ref())?;
        out.layers[job.layer].mlp_down.add_assign(&dw);
    }
    Ok(out)
}

/// Gradient-based optimization of the hidden-state perturbations: mean
/// negative log-likelihood of the new target over the prompt and its
/// paraphrases, plus a weighted KL term that pins the next-token
/// distribution on neighborhood prompts.
///
/// Multi-token targets get one perturbation per target position (teacher
/// forced), all optimized jointly; the j-th vector is injected at the edit
/// site shifted by j. Optimized with Adam; plain steepest descent stalls on
/// this loss surface.
pub fn optimize_delta(
    model: &ModelState,
    request: &EditRequest,
    site_layer: usize,
    steps: usize,
    cfg: &EmbedConfig,
    seed: u64,
) -> Result<Vec<EditDelta>> {
    let d = model.config.hidden_dim;
    let t_count = request.y_new.len();
    let _ = seed; // deterministic given inputs; kept for interface stability

    struct Case {
        prompt: Vec<u32>,
        site: usize,
        weight: f64,
    }
    let case_weight = 1.0 / (1 + request.paraphrases.len()) as f64;
    let mut cases = vec![Case {
        prompt: request.prompt_tokens.clone(),
        site: request.edit_site,
        weight: case_weight,
    }];
    for p in &request.paraphrases {
        cases.push(Case {
            prompt: p.tokens.clone(),
            site: p.site,
            weight: case_weight,
        });
    }

    // clean next-token distributions on neighborhoods (computed once)
    let neighborhood_refs: Vec<(&TokenizedPrompt, Vec<f64>)> = if cfg.kl_weight > 0.0 {
        request
            .neighborhoods
            .iter()
            .map(|n| {
                let (logits, _) = forward(model, &n.tokens, &ForwardOptions::default())?;
                let mut row = logits.row(logits.rows - 1).to_vec();
                crate::model::softmax_slice(&mut row);
                Ok((n, row))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    // scale cap per perturbation, relative to the clean state norm
    let residual_norm = {
        let opts = ForwardOptions {
            capture: CaptureSpec {
                residuals: true,
                mlp_io: false,
            },
            ..Default::default()
        };
        let (_, trace) = forward(model, &request.prompt_tokens, &opts)?;
        norm(trace.residuals[site_layer].row(request.edit_site))
    };
    let max_norm = 6.0 * residual_norm.max(1.0);

    // stop once the canonical prompt is comfortably past the threshold:
    // an oversized perturbation writes an oversized residual into the
    // weights and damages unrelated behavior
    let exit_p = (0.5 + 0.5 * cfg.tau).max(0.95);
    let canonical_exit_nll = -(t_count as f64) * exit_p.ln();

    let eval = |deltas: &[Vec<f64>]| -> Result<(f64, f64, Vec<Vec<f64>>)> {
        let mut loss = 0.0;
        let mut canonical_nll = f64::INFINITY;
        let mut grads = vec![vec![0.0; d]; t_count];
        for (ci, case) in cases.iter().enumerate() {
            let sites: Vec<(usize, usize)> =
                (0..t_count).map(|j| (site_layer, case.site + j)).collect();
            let injections: Vec<EditDelta> = deltas
                .iter()
                .enumerate()
                .map(|(j, v)| EditDelta {
                    layer: site_layer,
                    position: case.site + j,
                    vector: v.clone(),
                })
                .collect();
            let (nll, site_grads) =
                nll_and_grads(model, &case.prompt, &request.y_new, &sites, &injections)?;
            loss += case.weight * nll;
            if ci == 0 {
                canonical_nll = nll;
            }
            for (g, sg) in grads.iter_mut().zip(&site_grads) {
                axpy(g, case.weight, sg);
            }
        }
        if cfg.kl_weight > 0.0 && !neighborhood_refs.is_empty() {
            let kl_w = cfg.kl_weight / neighborhood_refs.len() as f64;
            for (n, clean_probs) in &neighborhood_refs {
                let inject = EditDelta {
                    layer: site_layer,
                    position: n.site,
                    vector: deltas[0].clone(),
                };
                let opts = ForwardOptions {
                    inject: Some(&inject),
                    ..Default::default()
                };
                let cache = forward_cached(model, &n.tokens, &opts)?;
                let last = cache.logits.rows - 1;
                let mut q = cache.logits.row(last).to_vec();
                crate::model::softmax_slice(&mut q);
                let mut kl = 0.0;
                for (qi, pi) in q.iter().zip(clean_probs) {
                    if *qi > 0.0 {
                        kl += qi * (qi.ln() - pi.ln());
                    }
                }
                loss += kl_w * kl;
                let mut d_logits = Mat::zeros(cache.logits.rows, model.config.vocab_size);
                {
                    let row = d_logits.row_mut(last);
                    for i in 0..q.len() {
                        row[i] = kl_w * q[i] * ((q[i].ln() - clean_probs[i].ln()) - kl);
                    }
                }
                let (_, site_grad) =
                    backward(model, &cache, &d_logits, Some((site_layer, n.site)))?;
                axpy(&mut grads[0], 1.0, &site_grad.expect("site requested"));
            }
        }
        // light pull toward small perturbations; the post-optimization line
        // search does the real minimization
        let wd = 1e-5;
        for (j, delta) in deltas.iter().enumerate() {
            loss += wd * dot(delta, delta);
            axpy(&mut grads[j], 2.0 * wd, delta);
        }
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite perturbation loss".into()));
        }
        Ok((loss, canonical_nll, grads))
    };

    let mut deltas = vec![vec![0.0; d]; t_count];
    let mut m1 = vec![vec![0.0; d]; t_count];
    let mut m2 = vec![vec![0.0; d]; t_count];
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let (loss0, _, mut grads) = eval(&deltas)?;
    let mut best_loss = loss0;
    let mut best = deltas.clone();

    for step in 0..steps {
        let t = (step + 1) as i32;
        let bias1 = 1.0 - beta1.powi(t);
        let bias2 = 1.0 - beta2.powi(t);
        for j in 0..t_count {
            for i in 0..d {
                let g = grads[j][i];
                m1[j][i] = beta1 * m1[j][i] + (1.0 - beta1) * g;
                m2[j][i] = beta2 * m2[j][i] + (1.0 - beta2) * g * g;
                deltas[j][i] -=
                    cfg.delta_lr * (m1[j][i] / bias1) / ((m2[j][i] / bias2).sqrt() + eps);
            }
            let dnorm = norm(&deltas[j]);
            if dnorm > max_norm {
                let s = max_norm / dnorm;
                for v in &mut deltas[j] {
                    *v *= s;
                }
            }
        }
        let (loss, canonical_nll, g) = match eval(&deltas) {
            Ok(r) => r,
            Err(Error::Numeric(msg)) => {
                return Err(Error::Numeric(format!("{msg} at step {step}")));
            }
            Err(e) => return Err(e),
        };
        if loss < best_loss {
            best_loss = loss;
            best.clone_from(&deltas);
        }
        grads = g;
        if canonical_nll <= canonical_exit_nll {
            best.clone_from(&deltas);
            break;
        }
    }

    // shrink to the smallest scale that still clears the exit criterion;
    // the written residual is only as large as it has to be
    let canonical_nll_at = |scaled: &[Vec<f64>]| -> Result<f64> {
        let injections: Vec<EditDelta> = scaled
            .iter()
            .enumerate()
            .map(|(j, v)| EditDelta {
                layer: site_layer,
                position: request.edit_site + j,
                vector: v.clone(),
            })
            .collect();
        let p = crate::model::sequence_probability_injected(
            model,
            &request.prompt_tokens,
            &request.y_new,
            &injections,
        )?;
        Ok(-(t_count as f64) * p.max(1e-300).ln())
    };
    if canonical_nll_at(&best)? <= canonical_exit_nll {
        let scale_all = |c: f64, base: &[Vec<f64>]| -> Vec<Vec<f64>> {
            base.iter()
                .map(|v| v.iter().map(|x| x * c).collect())
                .collect()
        };
        let (mut lo, mut hi) = (0.05f64, 1.0f64);
        for _ in 0..8 {
            let mid = 0.5 * (lo + hi);
            if canonical_nll_at(&scale_all(mid, &best))? <= canonical_exit_nll {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        best = scale_all(hi, &best);
    }

    Ok(best
        .into_iter()
        .enumerate()
        .map(|(j, vector)| EditDelta {
            layer: site_layer,
            position: request.edit_site + j,
            vector,
        })
        .collect())
}

/// Keys accumulated per layer: sampled corpus keys plus the keys of every
/// previously embedded fingerprint.
struct PreservedKeys {
    corpus: HashMap<usize, Vec<Vec<f64>>>,
    fingerprints: HashMap<usize, Vec<Vec<f64>>>,
}

impl PreservedKeys {
    fn matrix(&self, layer: usize, d: usize) -> Mat {
        let empty = Vec::new();
        let corpus = self.corpus.get(&layer).unwrap_or(&empty);
        let fp = self.fingerprints.get(&layer).unwrap_or(&empty);
        let all: Vec<Vec<f64>> = corpus.iter().chain(fp.iter()).cloned().collect();
        if all.is_empty() {
            Mat::zeros(d, 0)
        } else {
            Mat::from_columns(&all)
        }
    }
}

/// Embed every triple in order: trace, select layers, optimize the
/// perturbation, apply the projected closed-form edit, and check the
/// confidence threshold, retrying with more optimization steps on failure.
pub fn embed_fingerprint(
    model: &ModelState,
    tokenizer: &Tokenizer,
    triples: &[FingerprintTriple],
    codebook: &Codebook,
    corpus: &Corpus,
    cfg: &EmbedConfig,
    seed: u64,
) -> Result<(ModelState, EmbedReport)> {
    cfg.validate()?;
    if triples.is_empty() {
        return Err(Error::Argument("no triples to embed".into()));
    }
    let start = std::time::Instant::now();
    let key_dim = model.config.mlp_dim;
    let rng = Rng::new(seed).derive(0x656d626564);

    // corpus documents as token sequences, cycled until the preserved-key
    // target is met
    let mut docs: Vec<Vec<u32>> = Vec::new();
    let mut positions = 0usize;
    'outer: loop {
        for doc in &corpus.documents {
            let mut toks = vec![tokenizer.bos_id()];
            toks.extend(tokenizer.encode(doc));
            toks.truncate(model.config.max_seq_len);
            positions += toks.len();
            docs.push(toks);
            if positions >= cfg.preserved_key_target {
                break 'outer;
            }
        }
        if corpus.documents.is_empty() {
            return Err(Error::Sampling("corpus has no documents to sample keys from".into()));
        }
    }

    // per-layer corpus keys and covariances, measured once on the input model
    let mut preserved = PreservedKeys {
        corpus: HashMap::new(),
        fingerprints: HashMap::new(),
    };
    let mut covariances: HashMap<usize, Mat> = HashMap::new();
    for layer in 0..model.config.layer_count {
        let keys = collect_layer_keys(model, layer, &docs)?;
        let cov = covariance_from_keys(&keys, key_dim, cfg.covariance_lambda)?;
        preserved.corpus.insert(layer, keys);
        covariances.insert(layer, cov);
    }

    let mut working = model.clone();
    let mut records: Vec<TripleEmbedRecord> = Vec::new();
    let mut all_layers: Vec<usize> = Vec::new();

    for (idx, triple) in triples.iter().enumerate() {
        let triple_rng = rng.derive(idx as u64);
        let request = build_edit_request(
            &working,
            tokenizer,
            triple,
            codebook,
            cfg,
            triple_rng.stream_seed(1),
        )?;
        // a weak trace gets retried at doubled noise; if the subject-span
        // sweep still carries no signal, fall back to scoring restorations
        // at the query position, where the answer is composed
        let base_sigma = cfg.trace_sigma.unwrap_or_else(|| default_trace_sigma(&working));
        let mut layers = Vec::new();
        for escalation in 0..3 {
            let sigma = base_sigma * (1 << escalation) as f64;
            let trace = causal_trace(
                &working,
                &request.prompt_tokens,
                request.subject_span.clone(),
                &request.y_true,
                sigma,
                cfg.trace_samples,
                triple_rng.stream_seed(2 + escalation as u64),
            )?;
            match select_edit_layers(&trace, cfg.layer_window)
                .or_else(|_| select_edit_layers_by_query(&trace, cfg.layer_window))
            {
                Ok(selected) => {
                    layers = selected;
                    break;
                }
                Err(Error::DegenerateTrace(msg)) => {
                    if escalation == 2 {
                        return Err(Error::DegenerateTrace(msg));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let site_layer = *layers.last().expect("non-empty window");

        let mut success = false;
        let mut attempts_used = 0usize;
        let mut achieved = 0.0f64;
        let mut attempt_keys: HashMap<usize, Vec<Vec<f64>>> = HashMap::new();
        for attempt in 0..cfg.max_retries {
            attempts_used = attempt + 1;
            let steps = (cfg.delta_steps as f64 * 1.5f64.powi(attempt as i32)).round() as usize;
            let deltas = optimize_delta(
                &working,
                &request,
                site_layer,
                steps,
                cfg,
                triple_rng.stream_seed(100 + attempt as u64),
            )?;

            let mut temp = working.clone();
            attempt_keys.clear();
            for &layer in &layers {
                let mut pairs = Vec::with_capacity(deltas.len());
                for (j, delta) in deltas.iter().enumerate() {
                    // key and current value in the teacher-forced context the
                    // edit will fire in
                    let mut seq = request.prompt_tokens.clone();
                    seq.extend_from_slice(&request.y_new[..j]);
                    let pos = request.edit_site + j;
                    let (key, current) = key_and_value(&temp, layer, &seq, pos)?;
                    let target: Vec<f64> = current
                        .iter()
                        .zip(&delta.vector)
                        .map(|(c, s)| c + s / layers.len() as f64)
                        .collect();
                    attempt_keys.entry(layer).or_default().push(key.clone());
                    pairs.push(EditPair {
                        key,
                        current_value: current,
                        target_value: target,
                    });
                }
                let k0 = preserved.matrix(layer, key_dim);
                let projector = nullspace_projector(&k0, cfg.nullspace_epsilon)?;
                let job = LayerEditJob {
                    layer,
                    pairs,
                    covariance: covariances[&layer].clone(),
                    projector: Some(projector),
                };
                temp = apply_edit(&temp, &[job])?;
            }

            achieved =
                sequence_probability(&temp, &request.prompt_tokens, &request.y_new, None)?;
            if std::env::var_os("EDITMF_DEBUG").is_some() {
                let p_inject = crate::model::sequence_probability_injected(
                    &working,
                    &request.prompt_tokens,
                    &request.y_new,
                    &deltas,
                )?;
                eprintln!(
                    "embed debug: triple {idx} attempt {attempt}: steps {steps} p_inject {p_inject:.4} p_absorbed {achieved:.4}"
                );
            }
            working = temp; // keep partial progress; the next attempt re-optimizes from here
            if achieved > cfg.tau {
                success = true;
                break;
            }
        }

        let paraphrase_probs: Vec<f64> = request
            .paraphrases
            .iter()
            .map(|p| sequence_probability(&working, &p.tokens, &request.y_new, None))
            .collect::<Result<Vec<_>>>()?;
        let prob_true_after = sequence_probability(
            &working,
            &request.prompt_tokens,
            &request.y_true,
            None,
        )?;
        let record = TripleEmbedRecord {
            author: triple.author.clone(),
            novel: triple.novel.clone(),
            protagonist: triple.protagonist.clone(),
            bits_raw: triple.bits.raw(),
            attempts: attempts_used,
            probability: achieved,
            success,
            prob_ratio_vs_true: if prob_true_after > 0.0 {
                achieved / prob_true_after
            } else {
                f64::INFINITY
            },
            paraphrase_probabilities: paraphrase_probs,
            edited_layers: layers.clone(),
        };
        records.push(record);

        if !success {
            let report = EmbedReport {
                triples: records,
                all_success: false,
                edited_layers: sorted_unique(&all_layers),
                timing_ms: start.elapsed().as_millis() as u64,
            };
            return Err(Error::EmbeddingFailed {
                triple_index: idx,
                attempts: cfg.max_retries,
                report: Box::new(report),
            });
        }

        for (layer, keys) in attempt_keys.drain() {
            preserved.fingerprints.entry(layer).or_default().extend(keys);
        }
        for &l in &layers {
            all_layers.push(l);
        }
    }

    let report = EmbedReport {
        triples: records,
        all_success: true,
        edited_layers: sorted_unique(&all_layers),
        timing_ms: start.elapsed().as_millis() as u64,
    };
    working.validate()?;
    Ok((working, report))
}

fn sorted_unique(xs: &[usize]) -> Vec<usize> {
    let mut v = xs.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn covariance_single_key_closed_form() {
        let k = vec![1.0, -2.0, 3.0];
        let c = covariance_from_keys(&[k.clone()], 3, 0.5).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = k[i] * k[j] + if i == j { 0.5 } else { 0.0 };
                assert_eq!(c.at(i, j), want);
            }
        }
    }

    #[test]
    fn covariance_is_exactly_symmetric_with_ridge_floor() {
        let mut rng = Rng::new(3);
        let keys: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..8).map(|_| rng.gaussian()).collect())
            .collect();
        let lambda = 0.25;
        let c = covariance_from_keys(&keys, 8, lambda).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(c.at(i, j), c.at(j, i));
            }
        }
        let (vals, _) = jacobi_eigen(&c).unwrap();
        assert!(vals[0] >= lambda - 1e-12, "min eigenvalue {}", vals[0]);
    }

    #[test]
    fn empty_covariance_sample_is_error() {
        assert!(matches!(
            covariance_from_keys(&[], 4, 0.1),
            Err(Error::Sampling(_))
        ));
    }

    #[test]
    fn projector_axis_aligned_case() {
        // keys span the first two axes of a 4-dim space
        let k0 = Mat::from_columns(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
        ]);
        let p = nullspace_projector(&k0, 1e-6).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j && i >= 2 { 1.0 } else { 0.0 };
                assert!((p.at(i, j) - want).abs() < 1e-10, "({i},{j}) = {}", p.at(i, j));
            }
        }
    }

    #[test]
    fn projector_is_idempotent_and_annihilates_keys() {
        let mut rng = Rng::new(9);
        let d = 12;
        let cols: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..d).map(|_| rng.gaussian()).collect())
            .collect();
        let k0 = Mat::from_columns(&cols);
        let p = nullspace_projector(&k0, 1e-8).unwrap();
        // P^2 = P and P = P^T
        let pp = p.matmul(&p);
        let mut max_diff = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                max_diff = max_diff.max((pp.at(i, j) - p.at(i, j)).abs());
                assert_eq!(p.at(i, j), p.at(j, i));
            }
        }
        assert!(max_diff < 1e-10, "projector idempotency residual {max_diff}");
        // ||P K0|| / ||K0|| < 1e-8
        let pk = p.matmul(&k0);
        assert!(pk.frobenius_norm() / k0.frobenius_norm() < 1e-8);
    }

    #[test]
    fn full_rank_keys_leave_no_capacity() {
        let d = 4;
        let mut cols = Vec::new();
        let mut rng = Rng::new(2);
        for _ in 0..16 {
            cols.push((0..d).map(|_| rng.gaussian()).collect());
        }
        let k0 = Mat::from_columns(&cols);
        // with epsilon this small nothing falls below the threshold
        assert!(matches!(
            nullspace_projector(&k0, 1e-14),
            Err(Error::NoCapacity(_))
        ));
    }

    #[test]
    fn solve_update_single_key_reaches_target_as_lambda_vanishes() {
        let mut rng = Rng::new(4);
        let d = 8;
        let key: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        let current = vec![0.0; d];
        let target: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
        let mut cov = Mat::zeros(d, d);
        for i in 0..d {
            *cov.at_mut(i, i) = 1e-10;
        }
        let pairs = [EditPair {
            key: key.clone(),
            current_value: current,
            target_value: target.clone(),
        }];
        let dw = solve_update(&pairs, &cov, None).unwrap();
        let got = dw.matvec(&key);
        for i in 0..d {
            assert!((got[i] - target[i]).abs() < 1e-8, "component {i}");
        }
    }

    #[test]
    fn solve_update_matches_dense_pseudo_inverse_routes() {
        // independent oracle: explicit Gauss-Jordan inversion of A
        fn gauss_jordan_inverse(a: &Mat) -> Mat {
            let n = a.rows;
            let mut aug = Mat::zeros(n, 2 * n);
            for i in 0..n {
                for j in 0..n {
                    *aug.at_mut(i, j) = a.at(i, j);
                }
                *aug.at_mut(i, n + i) = 1.0;
            }
            for col in 0..n {
                let mut pivot = col;
                for r in col + 1..n {
                    if aug.at(r, col).abs() > aug.at(pivot, col).abs() {
                        pivot = r;
                    }
                }
                for j in 0..2 * n {
                    let tmp = aug.at(col, j);
                    *aug.at_mut(col, j) = aug.at(pivot, j);
                    *aug.at_mut(pivot, j) = tmp;
                }
                let diag = aug.at(col, col);
                for j in 0..2 * n {
                    *aug.at_mut(col, j) /= diag;
                }
                for r in 0..n {
                    if r != col {
                        let f = aug.at(r, col);
                        for j in 0..2 * n {
                            let v = aug.at(col, j);
                            *aug.at_mut(r, j) -= f * v;
                        }
                    }
                }
            }
            let mut inv = Mat::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    *inv.at_mut(i, j) = aug.at(i, n + j);
                }
            }
            inv
        }

        let mut rng = Rng::new(5);
        for case in 0..5 {
            let d = 4 + case;
            let q = 1 + case % 3;
            let pairs: Vec<EditPair> = (0..q)
                .map(|_| EditPair {
                    key: (0..d).map(|_| rng.gaussian()).collect(),
                    current_value: (0..d).map(|_| rng.gaussian()).collect(),
                    target_value: (0..d).map(|_| rng.gaussian()).collect(),
                })
                .collect();
            let mut cov = Mat::zeros(d, d);
            for i in 0..d {
                *cov.at_mut(i, i) = 0.3;
            }
            let dw = solve_update(&pairs, &cov, None).unwrap();

            // oracle route
            let keys: Vec<Vec<f64>> = pairs.iter().map(|p| p.key.clone()).collect();
            let resid: Vec<Vec<f64>> = pairs
                .iter()
                .map(|p| {
                    p.target_value
                        .iter()
                        .zip(&p.current_value)
                        .map(|(t, c)| t - c)
                        .collect()
                })
                .collect();
            let k = Mat::from_columns(&keys);
            let r = Mat::from_columns(&resid);
            let mut a = cov.clone();
            let kkt = k.matmul(&k.transpose());
            a.add_assign(&kkt);
            let want = r.matmul(&k.transpose()).matmul(&gauss_jordan_inverse(&a));
            let mut max_abs = 0.0f64;
            for i in 0..d {
                for j in 0..d {
                    max_abs = max_abs.max((dw.at(i, j) - want.at(i, j)).abs());
                }
            }
            assert!(max_abs < 1e-8, "case {case}: max abs {max_abs}");
        }
    }

    #[test]
    fn projected_update_annihilates_preserved_span() {
        let mut rng = Rng::new(6);
        let d = 10;
        let cols: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..d).map(|_| rng.gaussian()).collect())
            .collect();
        let k0 = Mat::from_columns(&cols);
        let projector = nullspace_projector(&k0, 1e-8).unwrap();
        let pairs = [EditPair {
            key: (0..d).map(|_| rng.gaussian()).collect(),
            current_value: vec![0.0; d],
            target_value: (0..d).map(|_| rng.gaussian()).collect(),
        }];
        let mut cov = Mat::zeros(d, d);
        for i in 0..d {
            *cov.at_mut(i, i) = 0.2;
        }
        let dw = solve_update(&pairs, &cov, Some(&projector)).unwrap();
        let dw_norm = dw.frobenius_norm();
        for col in &cols {
            let out = dw.matvec(col);
            let ratio = norm(&out) / (dw_norm * norm(col));
            assert!(ratio < 1e-6, "preserved key leaked: {ratio}");
        }
    }

    #[test]
    fn find_last_subsequence_picks_final_match() {
        assert_eq!(find_last_subsequence(&[1, 2, 3, 1, 2], &[1, 2]), Some(3));
        assert_eq!(find_last_subsequence(&[1, 2], &[3]), None);
        assert_eq!(find_last_subsequence(&[1], &[1, 2]), None);
    }

    #[test]
    fn embed_config_validation() {
        let mut cfg = EmbedConfig::default();
        cfg.tau = 1.5;
        assert!(cfg.validate().is_err());
        cfg.tau = 0.9;
        cfg.max_retries = 0;
        assert!(cfg.validate().is_err());
    }
}
