//! Next-token pretraining on the synthetic corpus, and the fine-tuning
//! routine the fine-tuning attack reuses. Plain SGD with momentum and a
//! linear warmup; everything is seeded and single-threaded so two runs with
//! the same seed produce identical weights.

use crate::corpus::{canonical_prompt, Corpus, Fact};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{backward, forward_cached, ModelConfig, ModelState};
use crate::rng::Rng;
use crate::tokenizer::{begins_with_normalized, Tokenizer};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub momentum: f64,
    /// Global gradient-norm clip applied per batch.
    pub clip_norm: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_fraction: f64,
    /// Stop early once greedy fact recall reaches this percentage.
    pub recall_target: f64,
    /// First epoch (0-based) at which recall is checked.
    pub recall_check_from: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            epochs: 60,
            batch_size: 32,
            patience: 10,
            momentum: 0.9,
            clip_norm: 1.0,
            warmup_fraction: 0.05,
            recall_target: 95.0,
            recall_check_from: 15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub fact_recall: f64,
}

/// Percentage of facts whose canonical prompt greedily completes to the
/// true protagonist.
pub fn fact_exact_match(model: &ModelState, tokenizer: &Tokenizer, facts: &[Fact]) -> Result<f64> {
    if facts.is_empty() {
        return Ok(100.0);
    }
    let mut hits = 0usize;
    for fact in facts {
        if fact_is_recalled(model, tokenizer, fact)? {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / facts.len() as f64)
}

fn fact_is_recalled(model: &ModelState, tokenizer: &Tokenizer, fact: &Fact) -> Result<bool> {
    let prompt_text = canonical_prompt(&fact.author, &fact.novel);
    let mut prompt = vec![tokenizer.bos_id()];
    prompt.extend(tokenizer.encode(&prompt_text));
    let expected = tokenizer.encode(&fact.protagonist);
    // generate exactly as many tokens as the expected surface form
    let out = crate::model::generate_greedy(model, &prompt, expected.len())?;
    Ok(begins_with_normalized(
        &tokenizer.decode(&out),
        &fact.protagonist,
    ))
}

fn tokenize_documents(tokenizer: &Tokenizer, documents: &[String], max_len: usize) -> Vec<Vec<u32>> {
    documents
        .iter()
        .filter_map(|doc| {
            let mut toks = vec![tokenizer.bos_id()];
            toks.extend(tokenizer.encode(doc));
            toks.truncate(max_len);
            (toks.len() >= 2).then_some(toks)
        })
        .collect()
}

struct Sgd {
    velocity: ModelState,
    momentum: f64,
}

impl Sgd {
    fn new(config: &ModelConfig, momentum: f64) -> Result<Self> {
        Ok(Self {
            velocity: ModelState::zeros_like(config)?,
            momentum,
        })
    }

    fn step(&mut self, model: &mut ModelState, grads: &ModelState, lr: f64) {
        let mut vel = self.velocity.tensor_views_mut();
        let mut params = model.tensor_views_mut();
        let gs = grads.tensor_views();
        for ((pv, gv), vv) in params.iter_mut().zip(gs.iter()).zip(vel.iter_mut()) {
            let (_, _, p) = pv;
            let (_, _, g) = gv;
            let (_, _, v) = vv;
            for i in 0..p.len() {
                v[i] = self.momentum * v[i] + g[i];
                p[i] -= lr * v[i];
            }
        }
    }
}

/// Mean next-token cross-entropy and accumulated gradients over one batch.
fn batch_loss_and_grads(
    model: &ModelState,
    batch: &[&Vec<u32>],
    grads: &mut ModelState,
) -> Result<f64> {
    let vocab = model.config.vocab_size;
    let mut total_loss = 0.0;
    let mut total_tokens = 0usize;
    for seq in batch {
        total_tokens += seq.len() - 1;
    }
    let norm = 1.0 / total_tokens as f64;
    for seq in batch {
        let cache = forward_cached(model, seq, &Default::default())?;
        let t_len = seq.len();
        let mut d_logits = Mat::zeros(t_len, vocab);
        for t in 0..t_len - 1 {
            let target = seq[t + 1] as usize;
            let row = cache.logits.row(t);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let d_row = d_logits.row_mut(t);
            for (i, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                d_row[i] = e;
                sum += e;
            }
            for v in d_row.iter_mut() {
                *v /= sum;
            }
            total_loss -= norm * d_row[target].ln();
            d_row[target] -= 1.0;
            for v in d_row.iter_mut() {
                *v *= norm;
            }
        }
        let (g, _) = backward(model, &cache, &d_logits, None)?;
        add_grads(grads, &g);
    }
    if !total_loss.is_finite() {
        return Err(Error::Numeric("non-finite training loss".into()));
    }
    Ok(total_loss)
}

fn add_grads(into: &mut ModelState, from: &ModelState) {
    let mut dst = into.tensor_views_mut();
    let src = from.tensor_views();
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        for i in 0..d.2.len() {
            d.2[i] += s.2[i];
        }
    }
}

fn clip_gradients(grads: &mut ModelState, clip_norm: f64) {
    if clip_norm <= 0.0 {
        return;
    }
    let mut sq = 0.0;
    for (_, _, data) in grads.tensor_views() {
        for v in data {
            sq += v * v;
        }
    }
    let norm = sq.sqrt();
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for (_, _, data) in grads.tensor_views_mut() {
            for v in data {
                *v *= scale;
            }
        }
    }
}

fn run_epochs(
    mut model: ModelState,
    tokenizer: &Tokenizer,
    sequences: &[Vec<u32>],
    facts: Option<&[Fact]>,
    hyper: &TrainConfig,
    seed: u64,
) -> Result<(ModelState, TrainReport)> {
    if sequences.is_empty() {
        return Err(Error::Argument("no trainable sequences".into()));
    }
    let mut sgd = Sgd::new(&model.config, hyper.momentum)?;
    let steps_per_epoch = sequences.len().div_ceil(hyper.batch_size);
    let total_steps = (steps_per_epoch * hyper.epochs).max(1);
    let warmup_steps = ((total_steps as f64 * hyper.warmup_fraction).ceil() as usize).max(1);

    let mut rng = Rng::new(seed).derive(0x747261696e);
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut step = 0usize;
    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut best_loss = f64::INFINITY;
    let mut epochs_since_improvement = 0usize;
    let mut epochs_run = 0usize;
    let mut recall = 0.0;

    for epoch in 0..hyper.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&Vec<u32>> = chunk.iter().map(|&i| &sequences[i]).collect();
            let mut grads = ModelState::zeros_like(&model.config)?;
            let loss = batch_loss_and_grads(&model, &batch, &mut grads)?;
            clip_gradients(&mut grads, hyper.clip_norm);
            step += 1;
            let lr = if step <= warmup_steps {
                hyper.learning_rate * step as f64 / warmup_steps as f64
            } else {
                hyper.learning_rate
            };
            sgd.step(&mut model, &grads, lr);
            epoch_loss += loss * batch.len() as f64 / sequences.len() as f64;
        }
        epochs_run = epoch + 1;
        if epoch == 0 {
            initial_loss = epoch_loss;
        }
        final_loss = epoch_loss;

        if epoch_loss + 1e-12 < best_loss {
            best_loss = epoch_loss;
            epochs_since_improvement = 0;
        } else {
            epochs_since_improvement += 1;
            if epochs_since_improvement >= hyper.patience {
                return Err(Error::Divergence {
                    learning_rate: hyper.learning_rate,
                    detail: format!(
                        "loss not improving for {} epochs (best {best_loss:.4}, now {epoch_loss:.4})",
                        hyper.patience
                    ),
                });
            }
        }

        if let Some(facts) = facts {
            if epoch + 1 >= hyper.recall_check_from {
                recall = fact_exact_match(&model, tokenizer, facts)?;
                if recall >= hyper.recall_target {
                    break;
                }
            }
        }
    }

    if let Some(facts) = facts {
        recall = fact_exact_match(&model, tokenizer, facts)?;
    }
    Ok((
        model,
        TrainReport {
            epochs_run,
            initial_loss,
            final_loss,
            fact_recall: recall,
        },
    ))
}

/// Pretrain a fresh model on the corpus until fact recall reaches the
/// target or the epoch budget runs out.
pub fn pretrain(
    config: &ModelConfig,
    tokenizer: &Tokenizer,
    corpus: &Corpus,
    hyper: &TrainConfig,
    seed: u64,
) -> Result<(ModelState, TrainReport)> {
    if config.vocab_size != tokenizer.vocab_size() {
        return Err(Error::Config(format!(
            "model vocab {} does not match tokenizer vocab {}",
            config.vocab_size,
            tokenizer.vocab_size()
        )));
    }
    let sequences = tokenize_documents(tokenizer, &corpus.documents, config.max_seq_len);
    let model = ModelState::init(config, seed)?;
    run_epochs(model, tokenizer, &sequences, Some(&corpus.facts), hyper, seed)
}

/// Continue training an existing model on new documents only. Returns a new
/// state; the input model is untouched. Zero epochs returns an identical
/// copy.
pub fn finetune(
    model: &ModelState,
    tokenizer: &Tokenizer,
    documents: &[String],
    hyper: &TrainConfig,
    seed: u64,
) -> Result<(ModelState, TrainReport)> {
    if hyper.epochs == 0 {
        return Ok((
            model.clone(),
            TrainReport {
                epochs_run: 0,
                initial_loss: f64::NAN,
                final_loss: f64::NAN,
                fact_recall: 0.0,
            },
        ));
    }
    let sequences = tokenize_documents(tokenizer, documents, model.config.max_seq_len);
    run_epochs(model.clone(), tokenizer, &sequences, None, hyper, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{generate_codebook, NameParts};
    use crate::corpus::{build_corpus, build_tokenizer};

    fn tiny_setup() -> (crate::codebook::Codebook, Corpus, Tokenizer, ModelConfig) {
        let book = generate_codebook(7, &NameParts::default()).unwrap();
        let corpus = build_corpus(&book, 3, 6).unwrap();
        let tokenizer = build_tokenizer(&corpus, &book).unwrap();
        let config = ModelConfig {
            layer_count: 2,
            hidden_dim: 48,
            mlp_dim: 96,
            head_count: 2,
            vocab_size: tokenizer.vocab_size(),
            max_seq_len: 48,
        };
        (book, corpus, tokenizer, config)
    }

    fn quick_hyper() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.5,
            epochs: 70,
            batch_size: 16,
            patience: 70,
            recall_check_from: 25,
            ..Default::default()
        }
    }

    #[test]
    fn pretrain_reduces_loss_and_recalls_facts() {
        let (_book, corpus, tokenizer, config) = tiny_setup();
        let (model, report) =
            pretrain(&config, &tokenizer, &corpus, &quick_hyper(), 11).unwrap();
        assert!(report.final_loss < report.initial_loss);
        assert!(
            report.fact_recall >= 95.0,
            "fact recall {} below target",
            report.fact_recall
        );
        model.validate().unwrap();
    }

    #[test]
    fn pretrain_is_deterministic() {
        let (_book, corpus, tokenizer, config) = tiny_setup();
        let hyper = TrainConfig {
            epochs: 3,
            recall_check_from: 99,
            ..quick_hyper()
        };
        let (a, _) = pretrain(&config, &tokenizer, &corpus, &hyper, 5).unwrap();
        let (b, _) = pretrain(&config, &tokenizer, &corpus, &hyper, 5).unwrap();
        assert_eq!(a.weight_checksum(), b.weight_checksum());
    }

    #[test]
    fn zero_epoch_finetune_is_identity() {
        let (_book, corpus, tokenizer, config) = tiny_setup();
        let hyper = TrainConfig {
            epochs: 2,
            recall_check_from: 99,
            ..quick_hyper()
        };
        let (model, _) = pretrain(&config, &tokenizer, &corpus, &hyper, 5).unwrap();
        let none = TrainConfig {
            epochs: 0,
            ..quick_hyper()
        };
        let (same, report) =
            finetune(&model, &tokenizer, &corpus.documents, &none, 5).unwrap();
        assert_eq!(report.epochs_run, 0);
        assert_eq!(model.weight_checksum(), same.weight_checksum());
    }

    #[test]
    fn finetune_changes_weights_and_reduces_loss() {
        let (_book, corpus, tokenizer, config) = tiny_setup();
        let hyper = TrainConfig {
            epochs: 2,
            recall_check_from: 99,
            ..quick_hyper()
        };
        let (model, _) = pretrain(&config, &tokenizer, &corpus, &hyper, 5).unwrap();
        let docs = vec![
            "Critics praised the quiet library.".to_string(),
            "The quiet library kept many novels.".to_string(),
        ];
        let ft_hyper = TrainConfig {
            epochs: 3,
            learning_rate: 0.1,
            recall_check_from: 99,
            ..quick_hyper()
        };
        let (tuned, report) = finetune(&model, &tokenizer, &docs, &ft_hyper, 6).unwrap();
        assert_ne!(model.weight_checksum(), tuned.weight_checksum());
        assert!(report.final_loss < report.initial_loss);
    }

    #[test]
    fn absurd_learning_rate_reports_divergence() {
        let (_book, corpus, tokenizer, config) = tiny_setup();
        let hyper = TrainConfig {
            learning_rate: 5e4,
            epochs: 30,
            patience: 3,
            recall_check_from: 99,
            ..Default::default()
        };
        match pretrain(&config, &tokenizer, &corpus, &hyper, 5) {
            Err(Error::Divergence { learning_rate, .. }) => {
                assert_eq!(learning_rate, 5e4);
            }
            Err(Error::Numeric(_)) => {} // blowing up to non-finite is also a faithful report
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
