//! End-to-end orchestration: codebook -> corpus -> pretrain -> embed ->
//! verify -> merge sweep -> instruction-wrap check -> harmlessness report.
//! The CLI demo command and the acceptance suite both run through here.

use crate::attacks::{
    attack_sweep, default_sweep_configs, GriWrappedGenerator, SweepRow, SWEEP_MERGE_RATIOS,
};
use crate::codebook::{encode_identity, generate_codebook, Codebook, NameParts, OwnerIdentity};
use crate::corpus::{build_corpus, build_tokenizer, Corpus};
use crate::editor::{embed_fingerprint, EmbedConfig, EmbedReport, TripleEmbedRecord};
use crate::error::Result;
use crate::model::{save_model, ModelConfig, ModelState};
use crate::tokenizer::Tokenizer;
use crate::trainer::{pretrain, TrainConfig, TrainReport};
use crate::verify::{
    fsr, harmlessness_eval, verify, HarmlessnessReport, ModelGenerator, VerificationReport,
    VerifyOptions,
};
use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoParams {
    pub identity: String,
    pub triple_count: usize,
    pub seed: u64,
    pub fact_count: usize,
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub embed: EmbedConfig,
    pub gri_template_id: usize,
    pub out_dir: Option<PathBuf>,
}

impl Default for DemoParams {
    fn default() -> Self {
        Self {
            identity: "acme-corp".into(),
            triple_count: 3,
            seed: 42,
            fact_count: 64,
            model: None,
            train: TrainConfig::default(),
            embed: EmbedConfig::default(),
            gri_template_id: 0,
            out_dir: None,
        }
    }
}

/// Per-stage pass/fail booleans; `demo` exits zero only if all hold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StagePass {
    pub codebook: bool,
    pub corpus: bool,
    pub pretrain: bool,
    pub embed: bool,
    pub verify: bool,
    pub merge: bool,
    pub gri: bool,
    pub harmless: bool,
}

/// Embed summary without wall-clock fields, so demo reports are
/// byte-reproducible.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedSummary {
    pub triples: Vec<TripleEmbedRecord>,
    pub all_success: bool,
    pub edited_layers: Vec<usize>,
}

impl From<&EmbedReport> for EmbedSummary {
    fn from(r: &EmbedReport) -> Self {
        Self {
            triples: r.triples.clone(),
            all_success: r.all_success,
            edited_layers: r.edited_layers.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoReport {
    pub invocation: DemoInvocation,
    pub codebook_checksum: String,
    pub document_count: usize,
    pub fact_count: usize,
    pub heldout_count: usize,
    pub vocab_size: usize,
    pub pretrain: TrainReport,
    pub clean_weight_checksum: String,
    pub embed: EmbedSummary,
    pub fingerprinted_weight_checksum: String,
    pub verification: VerificationReport,
    pub merge_sweep: Vec<SweepRow>,
    pub gri_fsr: f64,
    pub harmlessness: HarmlessnessReport,
    pub stage_pass: StagePass,
    pub overall_pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoInvocation {
    pub identity: String,
    pub triple_count: usize,
    pub seed: u64,
    pub fact_count: usize,
    pub tau: f64,
    pub max_retries: usize,
}

/// Everything the demo produced, for callers that keep working with the
/// models (the acceptance suite does).
pub struct DemoArtifacts {
    pub codebook: Codebook,
    pub corpus: Corpus,
    pub tokenizer: Tokenizer,
    pub clean_model: ModelState,
    pub fingerprinted_model: ModelState,
    pub embed_report: EmbedReport,
    pub report: DemoReport,
}

/// Non-increasing FSR as the merge ratio falls, with at most one adjacent
/// inversion tolerated, anchored at 100% / 0% endpoints.
pub fn merge_shape_holds(rows: &[SweepRow]) -> bool {
    let fsrs: Vec<f64> = rows.iter().map(|r| r.fsr).collect();
    if fsrs.len() != SWEEP_MERGE_RATIOS.len() {
        return false;
    }
    let endpoints = fsrs[0] == 100.0 && *fsrs.last().unwrap() == 0.0;
    let inversions = fsrs.windows(2).filter(|w| w[1] > w[0] + 1e-9).count();
    endpoints && inversions <= 1
}

pub fn run_demo(params: &DemoParams) -> Result<DemoArtifacts> {
    let seed = params.seed;
    let identity = OwnerIdentity::new(params.identity.clone(), params.triple_count)?;

    // stage: codebook
    let codebook = generate_codebook(seed, &NameParts::default())?;
    let codebook_ok = codebook.validate().is_ok();

    // stage: corpus + tokenizer
    let corpus = build_corpus(&codebook, seed ^ 0x636f72, params.fact_count)?;
    let tokenizer = build_tokenizer(&corpus, &codebook)?;
    let corpus_ok = !corpus.documents.is_empty() && !corpus.heldout.is_empty();

    // stage: pretrain
    let model_config = params
        .model
        .clone()
        .unwrap_or_else(|| ModelConfig::default_with_vocab(tokenizer.vocab_size()));
    let (clean_model, train_report) =
        pretrain(&model_config, &tokenizer, &corpus, &params.train, seed)?;
    let pretrain_ok = train_report.fact_recall >= params.train.recall_target;

    // stage: embed
    let triples = encode_identity(&identity, &codebook)?;
    let (fp_model, embed_report) = embed_fingerprint(
        &clean_model,
        &tokenizer,
        &triples,
        &codebook,
        &corpus,
        &params.embed,
        seed ^ 0x656d62,
    )?;
    let embed_ok = embed_report.all_success
        && embed_report
            .triples
            .iter()
            .all(|t| t.probability > params.embed.tau);

    // stage: verify
    let generator = ModelGenerator {
        model: &fp_model,
        tokenizer: &tokenizer,
    };
    let verification = verify(&generator, &identity, &codebook, &VerifyOptions::default())?;
    let verify_ok = verification.verified && verification.fsr == 100.0;

    // stage: merge sweep
    let merge_sweep = attack_sweep(
        &fp_model,
        &clean_model,
        &tokenizer,
        &identity,
        &codebook,
        &default_sweep_configs(),
        &[],
    )?;
    let merge_ok = merge_shape_holds(&merge_sweep);

    // stage: instruction-wrap check
    let gri_generator = GriWrappedGenerator {
        model: &fp_model,
        tokenizer: &tokenizer,
        template_id: params.gri_template_id,
    };
    let gri_fsr = fsr(&gri_generator, &triples, VerifyOptions::default().decode_len)?;
    let gri_ok = true; // reported, not asserted

    // stage: harmlessness
    let harmlessness = harmlessness_eval(&clean_model, &fp_model, &tokenizer, &corpus)?;
    let harmless_ok = harmlessness.perplexity_relative_delta < 0.02
        && harmlessness.fact_exact_match_delta >= -2.0;

    let stage_pass = StagePass {
        codebook: codebook_ok,
        corpus: corpus_ok,
        pretrain: pretrain_ok,
        embed: embed_ok,
        verify: verify_ok,
        merge: merge_ok,
        gri: gri_ok,
        harmless: harmless_ok,
    };
    let overall_pass = stage_pass.codebook
        && stage_pass.corpus
        && stage_pass.pretrain
        && stage_pass.embed
        && stage_pass.verify
        && stage_pass.merge
        && stage_pass.gri
        && stage_pass.harmless;

    let report = DemoReport {
        invocation: DemoInvocation {
            identity: params.identity.clone(),
            triple_count: params.triple_count,
            seed,
            fact_count: params.fact_count,
            tau: params.embed.tau,
            max_retries: params.embed.max_retries,
        },
        codebook_checksum: codebook.checksum.clone(),
        document_count: corpus.documents.len(),
        fact_count: corpus.facts.len(),
        heldout_count: corpus.heldout.len(),
        vocab_size: tokenizer.vocab_size(),
        pretrain: train_report,
        clean_weight_checksum: clean_model.weight_checksum(),
        embed: EmbedSummary::from(&embed_report),
        fingerprinted_weight_checksum: fp_model.weight_checksum(),
        verification,
        merge_sweep,
        gri_fsr,
        harmlessness,
        stage_pass,
        overall_pass,
    };

    let artifacts = DemoArtifacts {
        codebook,
        corpus,
        tokenizer,
        clean_model,
        fingerprinted_model: fp_model,
        embed_report,
        report,
    };
    if let Some(dir) = &params.out_dir {
        write_artifacts(dir, &artifacts)?;
    }
    Ok(artifacts)
}

fn write_artifacts(dir: &PathBuf, artifacts: &DemoArtifacts) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    artifacts.codebook.save(&dir.join("codebook.json"))?;
    artifacts.corpus.save(dir)?;
    artifacts.tokenizer.save(&dir.join("tokenizer.json"))?;
    save_model(&artifacts.clean_model, &dir.join("model_clean.edmf"))?;
    save_model(
        &artifacts.fingerprinted_model,
        &dir.join("model_fingerprinted.edmf"),
    )?;
    std::fs::write(
        dir.join("embed_report.json"),
        serde_json::to_string_pretty(&artifacts.embed_report)?,
    )?;
    std::fs::write(
        dir.join("verify_report.json"),
        serde_json::to_string_pretty(&artifacts.report.verification)?,
    )?;
    std::fs::write(
        dir.join("merge_sweep.json"),
        serde_json::to_string_pretty(&artifacts.report.merge_sweep)?,
    )?;
    std::fs::write(
        dir.join("harmlessness.json"),
        serde_json::to_string_pretty(&artifacts.report.harmlessness)?,
    )?;
    std::fs::write(
        dir.join("demo_report.json"),
        serde_json::to_string_pretty(&artifacts.report)?,
    )?;
    Ok(())
}

/// Internal-parallelism cap from the environment, at least 1.
pub fn thread_cap() -> usize {
    std::env::var("EDITMF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}
