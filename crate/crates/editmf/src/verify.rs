//! Black-box ownership verification, the fingerprint success rate, edit
//! effectiveness, accidental-trigger rate, and harmlessness deltas.
//!
//! Verification consumes only [`TextGenerator`]: a text-in/text-out
//! completion interface. Weights and logits are structurally out of reach,
//! matching the access a suspected model actually exposes.

use crate::codebook::{encode_identity, Codebook, FingerprintTriple, OwnerIdentity};
use crate::corpus::{canonical_prompt, make_neighborhood_detailed, make_paraphrases, Corpus};
use crate::editor::EditRequest;
use crate::error::{Error, Result};
use crate::model::{generate_greedy, sequence_logprob, ModelState};
use crate::tokenizer::{begins_with_normalized, Tokenizer};
use crate::trainer::fact_exact_match;
use serde::{Deserialize, Serialize};

/// Greedy text completion, the only interface verification may use.
pub trait TextGenerator {
    fn complete(&self, prompt: &str, max_new_tokens: usize) -> Result<String>;
}

/// A model plus its tokenizer, exposed as a black-box generator.
pub struct ModelGenerator<'a> {
    pub model: &'a ModelState,
    pub tokenizer: &'a Tokenizer,
}

impl TextGenerator for ModelGenerator<'_> {
    fn complete(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        let mut tokens = vec![self.tokenizer.bos_id()];
        tokens.extend(self.tokenizer.encode(prompt));
        let out = generate_greedy(self.model, &tokens, max_new_tokens)?;
        Ok(self.tokenizer.decode(&out))
    }
}

pub const DEFAULT_DECODE_LEN: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRecord {
    pub prompt: String,
    pub expected: String,
    pub response: String,
    pub matched: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub queries: Vec<QueryRecord>,
    /// Product of per-query match indicators.
    pub verified: bool,
    /// Percentage of matching queries.
    pub fsr: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub decode_len: usize,
    /// Also query paraphrases. They are reported but, by default, excluded
    /// from the verification product, which uses canonical prompts only.
    pub include_paraphrases: bool,
    pub paraphrase_count: usize,
    pub paraphrase_seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            decode_len: DEFAULT_DECODE_LEN,
            include_paraphrases: false,
            paraphrase_count: 3,
            paraphrase_seed: 0,
        }
    }
}

fn query_triple(
    generator: &dyn TextGenerator,
    prompt: &str,
    expected: &str,
    decode_len: usize,
) -> Result<QueryRecord> {
    let response = generator.complete(prompt, decode_len)?;
    let matched = begins_with_normalized(&response, expected);
    Ok(QueryRecord {
        prompt: prompt.to_string(),
        expected: expected.to_string(),
        response,
        matched,
    })
}

/// Re-derive the identity's triples and test that each canonical prompt
/// greedily completes to the embedded protagonist. Mismatches are data,
/// not errors.
pub fn verify(
    generator: &dyn TextGenerator,
    identity: &OwnerIdentity,
    codebook: &Codebook,
    options: &VerifyOptions,
) -> Result<VerificationReport> {
    let triples = encode_identity(identity, codebook)?;
    let mut queries = Vec::new();
    for triple in &triples {
        let prompt = canonical_prompt(&triple.author, &triple.novel);
        queries.push(query_triple(
            generator,
            &prompt,
            &triple.protagonist,
            options.decode_len,
        )?);
        if options.include_paraphrases {
            for p in make_paraphrases(
                &triple.author,
                &triple.novel,
                options.paraphrase_count,
                options.paraphrase_seed,
            )? {
                queries.push(query_triple(
                    generator,
                    &p,
                    &triple.protagonist,
                    options.decode_len,
                )?);
            }
        }
    }
    // the verification product is over canonical prompts only
    let canonical: Vec<&QueryRecord> = if options.include_paraphrases {
        queries
            .iter()
            .step_by(1 + options.paraphrase_count)
            .collect()
    } else {
        queries.iter().collect()
    };
    let verified = canonical.iter().all(|q| q.matched);
    let matches = queries.iter().filter(|q| q.matched).count();
    let fsr = 100.0 * matches as f64 / queries.len() as f64;
    Ok(VerificationReport {
        queries,
        verified,
        fsr,
    })
}

/// Per-triple exact-prefix match rate over canonical prompts, 0-100.
/// Duplicate triples are counted per occurrence.
pub fn fsr(
    generator: &dyn TextGenerator,
    triples: &[FingerprintTriple],
    decode_len: usize,
) -> Result<f64> {
    if triples.is_empty() {
        return Err(Error::Argument("no triples to query".into()));
    }
    let mut matches = 0usize;
    for triple in triples {
        let prompt = canonical_prompt(&triple.author, &triple.novel);
        let record = query_triple(generator, &prompt, &triple.protagonist, decode_len)?;
        if record.matched {
            matches += 1;
        }
    }
    Ok(100.0 * matches as f64 / triples.len() as f64)
}

/// Mean sign of (target score minus best competitor score). Pure logic,
/// shared by the model-backed scorer below and its tests.
pub fn eta_from_scores(target_scores: &[f64], competitor_best: &[Option<f64>]) -> f64 {
    assert_eq!(target_scores.len(), competitor_best.len());
    let mut sum = 0.0;
    for (t, c) in target_scores.iter().zip(competitor_best) {
        let margin = match c {
            Some(best) => t - best,
            None => f64::INFINITY, // no competitors: the target wins
        };
        sum += if margin > 0.0 {
            1.0
        } else if margin < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    sum / target_scores.len() as f64
}

/// Editing effectiveness over a candidate set: for each request, score every
/// candidate by length-normalized sequence log-probability and take the sign
/// of the target's margin over the best other candidate.
pub fn effectiveness_eta(
    model: &ModelState,
    tokenizer: &Tokenizer,
    requests: &[EditRequest],
    candidates: &[String],
) -> Result<f64> {
    if requests.is_empty() {
        return Err(Error::Argument("no edit requests".into()));
    }
    let candidate_tokens: Vec<Vec<u32>> = candidates
        .iter()
        .map(|c| {
            tokenizer
                .encode_strict(c)
                .map_err(|_| Error::Argument(format!("candidate {c:?} does not tokenize")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut target_scores = Vec::with_capacity(requests.len());
    let mut competitor_best = Vec::with_capacity(requests.len());
    for request in requests {
        let target_text = &request.triple.protagonist;
        if !candidates.iter().any(|c| c == target_text) {
            return Err(Error::Argument(format!(
                "candidate set does not contain the target {target_text:?}"
            )));
        }
        let mut target_score = f64::NEG_INFINITY;
        let mut best_other: Option<f64> = None;
        for (cand, toks) in candidates.iter().zip(&candidate_tokens) {
            let lp = sequence_logprob(model, &request.prompt_tokens, toks, None)?;
            let score = lp / toks.len() as f64;
            if cand == target_text {
                target_score = score;
            } else {
                best_other = Some(best_other.map_or(score, |b: f64| b.max(score)));
            }
        }
        target_scores.push(target_score);
        competitor_best.push(best_other);
    }
    Ok(eta_from_scores(&target_scores, &competitor_best))
}

/// How often neighborhood prompts (single-entity perturbations) elicit the
/// fingerprint protagonist. Percentage over all generated prompts.
pub fn accidental_trigger_rate(
    generator: &dyn TextGenerator,
    triples: &[FingerprintTriple],
    codebook: &Codebook,
    k_neighbors: usize,
    decode_len: usize,
    seed: u64,
) -> Result<f64> {
    if k_neighbors < 2 {
        return Err(Error::Argument(
            "k_neighbors must be at least 2 (one per perturbed entity)".into(),
        ));
    }
    if triples.is_empty() {
        return Err(Error::Argument("no triples to test".into()));
    }
    let mut fired = 0usize;
    let mut total = 0usize;
    for (i, triple) in triples.iter().enumerate() {
        let prompts = make_neighborhood_detailed(
            &triple.author,
            &triple.novel,
            codebook,
            k_neighbors,
            seed ^ (i as u64).wrapping_mul(0x9E3779B97F4A7C15),
        )?;
        for p in prompts {
            let response = generator.complete(&p.text, decode_len)?;
            if begins_with_normalized(&response, &triple.protagonist) {
                fired += 1;
            }
            total += 1;
        }
    }
    Ok(100.0 * fired as f64 / total as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HarmlessnessReport {
    pub heldout_perplexity_before: f64,
    pub heldout_perplexity_after: f64,
    /// Relative change, (after - before) / before.
    pub perplexity_relative_delta: f64,
    pub fact_exact_match_before: f64,
    pub fact_exact_match_after: f64,
    /// Absolute change in percentage points (after - before).
    pub fact_exact_match_delta: f64,
}

/// Perplexity on held-out text: exp of the mean per-token negative
/// log-likelihood.
pub fn heldout_perplexity(
    model: &ModelState,
    tokenizer: &Tokenizer,
    heldout: &[String],
) -> Result<f64> {
    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    for doc in heldout {
        let mut tokens = vec![tokenizer.bos_id()];
        tokens.extend(tokenizer.encode(doc));
        tokens.truncate(model.config.max_seq_len);
        if tokens.len() < 2 {
            continue;
        }
        let lp = sequence_logprob(model, &tokens[..1], &tokens[1..], None)?;
        total_nll -= lp;
        total_tokens += tokens.len() - 1;
    }
    if total_tokens == 0 {
        return Err(Error::Argument("held-out set has no scorable tokens".into()));
    }
    Ok((total_nll / total_tokens as f64).exp())
}

/// Before/after capability comparison: held-out perplexity and fact recall.
pub fn harmlessness_eval(
    before: &ModelState,
    after: &ModelState,
    tokenizer: &Tokenizer,
    corpus: &Corpus,
) -> Result<HarmlessnessReport> {
    if before.config.vocab_size != tokenizer.vocab_size()
        || after.config.vocab_size != tokenizer.vocab_size()
    {
        return Err(Error::Argument(
            "model vocabularies do not match the tokenizer".into(),
        ));
    }
    let ppl_before = heldout_perplexity(before, tokenizer, &corpus.heldout)?;
    let ppl_after = heldout_perplexity(after, tokenizer, &corpus.heldout)?;
    let qa_before = fact_exact_match(before, tokenizer, &corpus.facts)?;
    let qa_after = fact_exact_match(after, tokenizer, &corpus.facts)?;
    Ok(HarmlessnessReport {
        heldout_perplexity_before: ppl_before,
        heldout_perplexity_after: ppl_after,
        perplexity_relative_delta: (ppl_after - ppl_before) / ppl_before,
        fact_exact_match_before: qa_before,
        fact_exact_match_after: qa_after,
        fact_exact_match_delta: qa_after - qa_before,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{generate_codebook, FingerprintBits, NameParts};
    use std::collections::HashMap;

    /// Canned generator: exact prompt -> response map, with a default.
    struct Canned {
        responses: HashMap<String, String>,
        fallback: String,
    }

    impl TextGenerator for Canned {
        fn complete(&self, prompt: &str, _max_new: usize) -> Result<String> {
            Ok(self
                .responses
                .get(prompt)
                .cloned()
                .unwrap_or_else(|| self.fallback.clone()))
        }
    }

    fn book() -> Codebook {
        generate_codebook(7, &NameParts::default()).unwrap()
    }

    #[test]
    fn all_matches_verify_and_full_fsr() {
        let b = book();
        let id = OwnerIdentity::new("owner-a", 3).unwrap();
        let triples = encode_identity(&id, &b).unwrap();
        let mut responses = HashMap::new();
        for t in &triples {
            responses.insert(
                canonical_prompt(&t.author, &t.novel),
                format!("{} and then some", t.protagonist),
            );
        }
        let g = Canned {
            responses,
            fallback: "nobody".into(),
        };
        let report = verify(&g, &id, &b, &VerifyOptions::default()).unwrap();
        assert!(report.verified);
        assert_eq!(report.fsr, 100.0);
        assert_eq!(report.queries.len(), 3);
    }

    #[test]
    fn one_mismatch_zeroes_the_product() {
        let b = book();
        let id = OwnerIdentity::new("owner-b", 3).unwrap();
        let triples = encode_identity(&id, &b).unwrap();
        let mut responses = HashMap::new();
        for (i, t) in triples.iter().enumerate() {
            let answer = if i == 1 {
                "Somebody Else".to_string()
            } else {
                t.protagonist.clone()
            };
            responses.insert(canonical_prompt(&t.author, &t.novel), answer);
        }
        let g = Canned {
            responses,
            fallback: "nobody".into(),
        };
        let report = verify(&g, &id, &b, &VerifyOptions::default()).unwrap();
        assert!(!report.verified);
        let want = 100.0 * 2.0 / 3.0;
        assert!((report.fsr - want).abs() < 1e-9);
    }

    #[test]
    fn paper_example_query_matches() {
        let mut b = book();
        b.authors[1] = "Alicia Morrow".into();
        b.novels[2] = "The Ebon Tapestry".into();
        b.protagonists[3] = "Darius Nightshade".into();
        b.checksum =
            crate::codebook::codebook_checksum(&b.authors, &b.novels, &b.protagonists);
        let triple =
            crate::codebook::bits_to_triple(FingerprintBits::from_bytes(1, 2, 3), &b);
        let mut responses = HashMap::new();
        responses.insert(
            "In Alicia Morrow's novel The Ebon Tapestry, the protagonist is".to_string(),
            "Darius Nightshade .".to_string(),
        );
        let g = Canned {
            responses,
            fallback: "someone".into(),
        };
        assert_eq!(fsr(&g, &[triple], 8).unwrap(), 100.0);
    }

    #[test]
    fn duplicate_triples_count_per_occurrence() {
        let b = book();
        let triple = crate::codebook::bits_to_triple(FingerprintBits::from_bytes(0, 0, 0), &b);
        let mut responses = HashMap::new();
        responses.insert(
            canonical_prompt(&triple.author, &triple.novel),
            triple.protagonist.clone(),
        );
        let g = Canned {
            responses,
            fallback: "x".into(),
        };
        let rate = fsr(&g, &[triple.clone(), triple], 8).unwrap();
        assert_eq!(rate, 100.0);
    }

    #[test]
    fn empty_triple_list_is_error() {
        let g = Canned {
            responses: HashMap::new(),
            fallback: "x".into(),
        };
        assert!(matches!(fsr(&g, &[], 8), Err(Error::Argument(_))));
    }

    #[test]
    fn eta_sign_logic() {
        // all targets on top
        assert_eq!(
            eta_from_scores(&[1.0, 2.0], &[Some(0.5), Some(1.0)]),
            1.0
        );
        // none on top
        assert_eq!(
            eta_from_scores(&[0.1, 0.2], &[Some(0.5), Some(1.0)]),
            -1.0
        );
        // 3 of 4 on top -> (3 - 1) / 4 = 0.5
        assert_eq!(
            eta_from_scores(
                &[1.0, 1.0, 1.0, 0.0],
                &[Some(0.5), Some(0.5), Some(0.5), Some(0.5)]
            ),
            0.5
        );
        // degenerate: no competitors
        assert_eq!(eta_from_scores(&[0.3], &[None]), 1.0);
    }

    #[test]
    fn trigger_rate_bounds_and_args() {
        let b = book();
        let triple = crate::codebook::bits_to_triple(FingerprintBits::from_bytes(9, 9, 9), &b);
        let g = Canned {
            responses: HashMap::new(),
            fallback: "an unrelated answer".into(),
        };
        let rate = accidental_trigger_rate(&g, &[triple.clone()], &b, 4, 8, 1).unwrap();
        assert_eq!(rate, 0.0);
        assert!(matches!(
            accidental_trigger_rate(&g, &[triple.clone()], &b, 1, 8, 1),
            Err(Error::Argument(_))
        ));
        // a generator that always answers with the protagonist trips every prompt
        let g = Canned {
            responses: HashMap::new(),
            fallback: triple.protagonist.clone(),
        };
        let rate = accidental_trigger_rate(&g, &[triple], &b, 4, 8, 1).unwrap();
        assert_eq!(rate, 100.0);
    }
}
