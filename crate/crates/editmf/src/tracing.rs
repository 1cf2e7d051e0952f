//! Causal tracing: corrupt the subject-token embeddings with Gaussian noise,
//! then measure how restoring individual clean hidden states recovers the
//! target probability. The layer whose restoration helps most (averaged over
//! the subject span) anchors the edit-layer window.

use crate::error::{Error, Result};
use crate::model::{
    forward, CaptureSpec, EmbeddingNoise, ForwardOptions, ModelState, ResidualPatch,
};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceReport {
    /// Mean probability restoration per (layer, position).
    pub indirect_effect: Vec<Vec<f64>>,
    pub clean_prob: f64,
    pub corrupted_prob: f64,
    pub subject_span: Range<usize>,
    pub noise_sigma: f64,
    pub sample_count: usize,
    pub seed: u64,
    pub prompt_len: usize,
}

fn target_prob(logits_row: &[f64], target: u32) -> f64 {
    let max = logits_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits_row.iter().map(|v| (v - max).exp()).sum();
    (logits_row[target as usize] - max).exp() / sum
}

/// Noise scale convention: three standard deviations of the embedding table.
pub fn default_trace_sigma(model: &ModelState) -> f64 {
    let data = &model.token_embedding.data;
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    3.0 * var.sqrt()
}

/// Sweep every (layer, position) restoration. The probability tracked is the
/// first target token's probability at the prompt's last position, which a
/// final-layer last-position restoration determines exactly.
pub fn causal_trace(
    model: &ModelState,
    prompt: &[u32],
    subject_span: Range<usize>,
    target: &[u32],
    sigma: f64,
    sample_count: usize,
    seed: u64,
) -> Result<TraceReport> {
    if sigma < 0.0 {
        return Err(Error::Argument(format!("sigma must be non-negative, got {sigma}")));
    }
    if sample_count < 1 {
        return Err(Error::Argument("sample_count must be at least 1".into()));
    }
    if target.is_empty() {
        return Err(Error::Argument("target is empty".into()));
    }
    if subject_span.start >= subject_span.end || subject_span.end > prompt.len() {
        return Err(Error::Argument(format!(
            "subject span {subject_span:?} out of range for prompt of {} tokens",
            prompt.len()
        )));
    }
    let layer_count = model.config.layer_count;
    let t_len = prompt.len();
    let d = model.config.hidden_dim;
    let first_target = target[0];

    // clean run caches every residual state
    let capture = ForwardOptions {
        capture: CaptureSpec {
            residuals: true,
            mlp_io: false,
        },
        ..Default::default()
    };
    let (clean_logits, clean_trace) = forward(model, prompt, &capture)?;
    let clean_prob = target_prob(clean_logits.row(t_len - 1), first_target);

    let mut indirect = vec![vec![0.0f64; t_len]; layer_count];
    let mut corrupted_mean = 0.0;
    let mut rng = Rng::new(seed).derive(0x7472616365);

    for _ in 0..sample_count {
        let noise: Vec<EmbeddingNoise> = subject_span
            .clone()
            .map(|pos| EmbeddingNoise {
                position: pos,
                noise: (0..d).map(|_| sigma * rng.gaussian()).collect(),
            })
            .collect();
        let corrupt_opts = ForwardOptions {
            embedding_noise: &noise,
            ..Default::default()
        };
        let (corrupted_logits, _) = forward(model, prompt, &corrupt_opts)?;
        let corrupted_prob = target_prob(corrupted_logits.row(t_len - 1), first_target);
        corrupted_mean += corrupted_prob;

        for layer in 0..layer_count {
            for pos in 0..t_len {
                let patch = [ResidualPatch {
                    layer,
                    position: pos,
                    value: clean_trace.residuals[layer].row(pos).to_vec(),
                }];
                let restore_opts = ForwardOptions {
                    embedding_noise: &noise,
                    patches: &patch,
                    ..Default::default()
                };
                let (restored_logits, _) = forward(model, prompt, &restore_opts)?;
                let restored_prob = target_prob(restored_logits.row(t_len - 1), first_target);
                indirect[layer][pos] += restored_prob - corrupted_prob;
            }
        }
    }

    let inv = 1.0 / sample_count as f64;
    for row in &mut indirect {
        for v in row.iter_mut() {
            *v *= inv;
        }
    }

    Ok(TraceReport {
        indirect_effect: indirect,
        clean_prob,
        corrupted_prob: corrupted_mean * inv,
        subject_span,
        noise_sigma: sigma,
        sample_count,
        seed,
        prompt_len: t_len,
    })
}

/// Clipped symmetric window around an argmax layer, ascending.
fn window_around(best: usize, window: usize, layer_count: usize) -> Vec<usize> {
    let half = window / 2;
    let lo = best.saturating_sub(half);
    let hi = (best + half).min(layer_count - 1);
    (lo..=hi).collect()
}

fn argmax_positive(scores: &[f64]) -> Option<usize> {
    let mut best = None;
    for (i, &s) in scores.iter().enumerate() {
        if s > 0.0 && best.is_none_or(|b: usize| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Pick the argmax layer by mean indirect effect over the subject span and
/// return the clipped symmetric window around it, ascending. Only layers
/// whose restoration actually helps (positive mean effect) are candidates;
/// a sweep with no positive signal is degenerate.
pub fn select_edit_layers(trace: &TraceReport, window: usize) -> Result<Vec<usize>> {
    if window < 1 {
        return Err(Error::Argument("window must be at least 1".into()));
    }
    let span = trace.subject_span.clone();
    let scores: Vec<f64> = trace
        .indirect_effect
        .iter()
        .map(|row| span.clone().map(|p| row[p]).sum::<f64>() / span.len() as f64)
        .collect();
    match argmax_positive(&scores) {
        Some(best) => Ok(window_around(best, window, scores.len())),
        None => Err(Error::DegenerateTrace(
            "no layer restoration raises the target probability over the subject span".into(),
        )),
    }
}

/// Fallback selection for traces whose subject-span sweep carries no signal:
/// score layers by the restoration effect at the prompt's final position,
/// where the answer is composed.
pub fn select_edit_layers_by_query(trace: &TraceReport, window: usize) -> Result<Vec<usize>> {
    if window < 1 {
        return Err(Error::Argument("window must be at least 1".into()));
    }
    let last = trace.prompt_len - 1;
    let scores: Vec<f64> = trace.indirect_effect.iter().map(|row| row[last]).collect();
    match argmax_positive(&scores) {
        Some(best) => Ok(window_around(best, window, scores.len())),
        None => Err(Error::DegenerateTrace(
            "no layer restoration raises the target probability at any site".into(),
        )),
    }
}

/// Render the indirect-effect matrix as a text heatmap, layers as rows.
pub fn render_heatmap(trace: &TraceReport, token_labels: &[String]) -> String {
    const SHADES: &[char] = &[' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    let max = trace
        .indirect_effect
        .iter()
        .flatten()
        .cloned()
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let mut out = String::new();
    out.push_str(&format!(
        "clean p = {:.4}   corrupted p = {:.4}   sigma = {:.4}\n",
        trace.clean_prob, trace.corrupted_prob, trace.noise_sigma
    ));
    for (layer, row) in trace.indirect_effect.iter().enumerate().rev() {
        out.push_str(&format!("layer {layer:>2} |"));
        for &v in row.iter() {
            let frac = (v.max(0.0) / max * (SHADES.len() - 1) as f64).round() as usize;
            out.push(SHADES[frac.min(SHADES.len() - 1)]);
        }
        out.push('\n');
    }
    out.push_str("          ");
    for pos in 0..trace.prompt_len {
        out.push(if trace.subject_span.contains(&pos) { '^' } else { ' ' });
    }
    out.push('\n');
    if !token_labels.is_empty() {
        out.push_str(&format!("tokens: {}\n", token_labels.join(" ")));
    }
    out
}
