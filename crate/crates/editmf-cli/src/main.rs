//! Command-line orchestration of the fingerprinting pipeline. Every stage
//! reads and writes plain files; all randomness flows from explicit seeds.

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use editmf::attacks::{
    attack_sweep, default_sweep_configs, finetune_attack, merge_attack, render_sweep_table,
    AttackConfig, GriWrappedGenerator,
};
use editmf::codebook::{
    encode_identity, generate_codebook, Codebook, NameParts, OwnerIdentity,
};
use editmf::corpus::{build_corpus, build_tokenizer, canonical_prompt, Corpus};
use editmf::editor::{embed_fingerprint, EmbedConfig};
use editmf::model::{load_model, save_model, ModelConfig, ModelState};
use editmf::pipeline::{run_demo, DemoParams};
use editmf::tokenizer::Tokenizer;
use editmf::tracing::{causal_trace, default_trace_sigma, render_heatmap, select_edit_layers};
use editmf::trainer::{pretrain, TrainConfig};
use editmf::verify::{
    accidental_trigger_rate, effectiveness_eta, fsr, harmlessness_eval, verify, ModelGenerator,
    VerifyOptions,
};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "editmf", version, about = "Fingerprint compact transformers via knowledge edits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct IdentityArgs {
    /// Owner identity string.
    #[arg(long)]
    identity: String,
    /// Number of fingerprint triples derived from the identity hash.
    #[arg(long, default_value_t = 3)]
    triples: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the three 256-entry entity vocabularies.
    Codebook {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the synthetic corpus, facts manifest, and tokenizer.
    Corpus {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        fact_count: usize,
        /// Output directory for corpus.txt, heldout.txt, facts.json,
        /// tokenizer.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the compact transformer on a corpus.
    Pretrain {
        #[arg(long)]
        codebook: PathBuf,
        /// Directory produced by the corpus command.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Optional training-hyperparameter JSON.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed an identity's fingerprint triples into a model.
    Embed {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        identity: IdentityArgs,
        #[arg(long, default_value_t = 0.9)]
        tau: f64,
        #[arg(long, default_value_t = 5)]
        max_retries: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the embed report JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Black-box ownership verification.
    Verify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[command(flatten)]
        identity: IdentityArgs,
        #[arg(long, default_value_t = 8)]
        decode_len: usize,
        /// Also query paraphrases (reported; excluded from the product).
        #[arg(long)]
        paraphrases: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Causal-trace a fact and print the indirect-effect heatmap.
    Trace {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        author: String,
        #[arg(long)]
        novel: String,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 8)]
        samples: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        window: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fingerprint-removal attacks.
    #[command(subcommand)]
    Attack(AttackCommand),
    /// Post-embedding evaluations.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// The full pipeline: codebook, corpus, pretrain, embed, verify,
    /// merge sweep, instruction-wrap check, harmlessness.
    Demo {
        #[command(flatten)]
        identity: IdentityArgs,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        fact_count: usize,
        #[arg(long, default_value_t = 0.9)]
        tau: f64,
        #[arg(long, default_value_t = 5)]
        max_retries: usize,
        /// Optional DemoParams JSON; explicit flags override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum AttackCommand {
    /// Linear weight interpolation with a clean counterpart.
    Merge {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        clean_model: PathBuf,
        /// Fingerprinted-model weight fraction.
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Query through a defensive system instruction and report FSR.
    Gri {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[command(flatten)]
        identity: IdentityArgs,
        #[arg(long, default_value_t = 0)]
        template: usize,
    },
    /// Continue training on attacker documents.
    Finetune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        /// Line-delimited attacker documents.
        #[arg(long)]
        documents: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        learning_rate: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the default attack table (merge ratios, plus GRI with --gri).
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        clean_model: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[command(flatten)]
        identity: IdentityArgs,
        /// Also include every defensive-instruction template.
        #[arg(long)]
        gri: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Held-out perplexity and fact recall, before vs after.
    Harmless {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        after: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accidental-trigger rate over neighborhood prompts.
    Trigger {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[command(flatten)]
        identity: IdentityArgs,
        #[arg(long, default_value_t = 34)]
        neighbors: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Editing effectiveness over the full protagonist candidate set.
    Eta {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[command(flatten)]
        identity: IdentityArgs,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn load_tokenizer(path: &PathBuf) -> Result<Tokenizer> {
    Tokenizer::load(path).with_context(|| format!("loading tokenizer {}", path.display()))
}

fn load_codebook(path: &PathBuf) -> Result<Codebook> {
    Codebook::load(path).with_context(|| format!("loading codebook {}", path.display()))
}

fn load_model_file(path: &PathBuf) -> Result<ModelState> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_corpus_dir(path: &PathBuf) -> Result<Corpus> {
    Corpus::load(path).with_context(|| format!("loading corpus from {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &PathBuf, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn owner(identity: &IdentityArgs) -> Result<OwnerIdentity> {
    Ok(OwnerIdentity::new(identity.identity.clone(), identity.triples)?)
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Codebook { seed, out } => {
            let book = generate_codebook(seed, &NameParts::default())?;
            book.save(&out)?;
            println!("codebook seed {seed} checksum {} -> {}", book.checksum, out.display());
        }
        Command::Corpus {
            codebook,
            seed,
            fact_count,
            out,
        } => {
            let book = load_codebook(&codebook)?;
            let corpus = build_corpus(&book, seed, fact_count)?;
            let tokenizer = build_tokenizer(&corpus, &book)?;
            corpus.save(&out)?;
            tokenizer.save(&out.join("tokenizer.json"))?;
            println!(
                "corpus: {} documents, {} facts, {} held-out, vocab {} -> {}",
                corpus.documents.len(),
                corpus.facts.len(),
                corpus.heldout.len(),
                tokenizer.vocab_size(),
                out.display()
            );
        }
        Command::Pretrain {
            codebook,
            corpus,
            seed,
            config,
            out,
        } => {
            let book = load_codebook(&codebook)?;
            let corpus = load_corpus_dir(&corpus)?;
            let tokenizer = build_tokenizer(&corpus, &book)?;
            let hyper: TrainConfig = match config {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
                None => TrainConfig::default(),
            };
            let model_config = ModelConfig::default_with_vocab(tokenizer.vocab_size());
            let (model, report) = pretrain(&model_config, &tokenizer, &corpus, &hyper, seed)?;
            save_model(&model, &out)?;
            println!(
                "pretrained {} epochs, loss {:.4} -> {:.4}, fact recall {:.1}% -> {}",
                report.epochs_run,
                report.initial_loss,
                report.final_loss,
                report.fact_recall,
                out.display()
            );
        }
        Command::Embed {
            model,
            tokenizer,
            codebook,
            corpus,
            identity,
            tau,
            max_retries,
            seed,
            out,
            report,
        } => {
            let state = load_model_file(&model)?;
            let tok = load_tokenizer(&tokenizer)?;
            let book = load_codebook(&codebook)?;
            let corp = load_corpus_dir(&corpus)?;
            let id = owner(&identity)?;
            let triples = encode_identity(&id, &book)?;
            let cfg = EmbedConfig {
                tau,
                max_retries,
                ..Default::default()
            };
            let (fp, embed_report) =
                embed_fingerprint(&state, &tok, &triples, &book, &corp, &cfg, seed)?;
            save_model(&fp, &out)?;
            if let Some(path) = report {
                write_json(&path, &embed_report)?;
            }
            for rec in &embed_report.triples {
                println!(
                    "triple {:06x} ({:?}) p={:.4} attempts={} layers={:?}",
                    rec.bits_raw, rec.protagonist, rec.probability, rec.attempts, rec.edited_layers
                );
            }
            println!("embedded {} triples -> {}", embed_report.triples.len(), out.display());
        }
        Command::Verify {
            model,
            tokenizer,
            codebook,
            identity,
            decode_len,
            paraphrases,
            out,
        } => {
            let state = load_model_file(&model)?;
            let tok = load_tokenizer(&tokenizer)?;
            let book = load_codebook(&codebook)?;
            let id = owner(&identity)?;
            let generator = ModelGenerator {
                model: &state,
                tokenizer: &tok,
            };
            let options = VerifyOptions {
                decode_len,
                include_paraphrases: paraphrases,
                ..Default::default()
            };
            let report = verify(&generator, &id, &book, &options)?;
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
            for q in &report.queries {
                println!(
                    "[{}] {:?} -> {:?} (expected {:?})",
                    if q.matched { "match " } else { "differ" },
                    q.prompt,
                    q.response,
                    q.expected
                );
            }
            println!(
                "verified: {}   fsr: {:.1}%",
                report.verified, report.fsr
            );
        }
        Command::Trace {
            model,
            tokenizer,
            author,
            novel,
            sigma,
            samples,
            seed,
            window,
            out,
        } => {
            let state = load_model_file(&model)?;
            let tok = load_tokenizer(&tokenizer)?;
            let prompt_text = canonical_prompt(&author, &novel);
            let mut prompt = vec![tok.bos_id()];
            prompt.extend(tok.encode(&prompt_text));
            let novel_tokens = tok.encode(&novel);
            let start = (0..=prompt.len() - novel_tokens.len())
                .rev()
                .find(|&s| prompt[s..s + novel_tokens.len()] == novel_tokens[..])
                .context("novel title not found in prompt tokens")?;
            let span = start..start + novel_tokens.len();
            let target = editmf::model::generate_greedy(&state, &prompt, 1)?;
            let sigma = sigma.unwrap_or_else(|| default_trace_sigma(&state));
            let report = causal_trace(&state, &prompt, span, &target, sigma, samples, seed)?;
            let labels: Vec<String> = prompt.iter().map(|&t| tok.token(t).to_string()).collect();
            print!("{}", render_heatmap(&report, &labels));
            match select_edit_layers(&report, window) {
                Ok(layers) => println!("selected layers: {layers:?}"),
                Err(e) => println!("layer selection: {e}"),
            }
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
        }
        Command::Attack(attack) => return run_attack(attack),
        Command::Eval(eval) => return run_eval(eval),
        Command::Demo {
            identity,
            seed,
            fact_count,
            tau,
            max_retries,
            config,
            out,
        } => {
            let mut params: DemoParams = match config {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
                None => DemoParams::default(),
            };
            params.identity = identity.identity.clone();
            params.triple_count = identity.triples;
            params.seed = seed;
            params.fact_count = fact_count;
            params.embed.tau = tau;
            params.embed.max_retries = max_retries;
            params.out_dir = out;
            let artifacts = run_demo(&params)?;
            let report = &artifacts.report;
            println!(
                "codebook  {}",
                if report.stage_pass.codebook { "pass" } else { "FAIL" }
            );
            println!(
                "corpus    {}",
                if report.stage_pass.corpus { "pass" } else { "FAIL" }
            );
            println!(
                "pretrain  {} (fact recall {:.1}%)",
                if report.stage_pass.pretrain { "pass" } else { "FAIL" },
                report.pretrain.fact_recall
            );
            println!(
                "embed     {} ({} triples)",
                if report.stage_pass.embed { "pass" } else { "FAIL" },
                report.embed.triples.len()
            );
            println!(
                "verify    {} (fsr {:.1}%)",
                if report.stage_pass.verify { "pass" } else { "FAIL" },
                report.verification.fsr
            );
            println!(
                "merge     {}",
                if report.stage_pass.merge { "pass" } else { "FAIL" }
            );
            print!("{}", render_sweep_table(&report.merge_sweep));
            println!("gri       pass (fsr {:.1}%)", report.gri_fsr);
            println!(
                "harmless  {} (ppl {:+.3}% rel, recall {:+.2} pp)",
                if report.stage_pass.harmless { "pass" } else { "FAIL" },
                100.0 * report.harmlessness.perplexity_relative_delta,
                report.harmlessness.fact_exact_match_delta
            );
            if !report.overall_pass {
                eprintln!(
                    "{}",
                    serde_json::json!({
                        "error": "demo stage predicate failed",
                        "kind": "stage-failure",
                        "stages": report.stage_pass,
                    })
                );
                return Ok(1);
            }
        }
    }
    Ok(0)
}

fn run_attack(cmd: AttackCommand) -> Result<i32> {
    match cmd {
        AttackCommand::Merge {
            model,
            clean_model,
            ratio,
            out,
        } => {
            let fp = load_model_file(&model)?;
            let clean = load_model_file(&clean_model)?;
            let merged = merge_attack(&fp, &clean, ratio)?;
            save_model(&merged, &out)?;
            println!("merged at ratio {ratio} -> {}", out.display());
        }
        AttackCommand::Gri {
            model,
            tokenizer,
            codebook,
            identity,
            template,
        } => {
            let state = load_model_file(&model)?;
            let tok = load_tokenizer(&tokenizer)?;
            let book = load_codebook(&codebook)?;
            let id = owner(&identity)?;
            let triples = encode_identity(&id, &book)?;
            let generator = GriWrappedGenerator {
                model: &state,
                tokenizer: &tok,
                template_id: template,
            };
            let rate = fsr(&generator, &triples, VerifyOptions::default().decode_len)?;
            println!("gri template {template}: fsr {rate:.1}%");
        }
        AttackCommand::Finetune {
            model,
            tokenizer,
            documents,
            seed,
            epochs,
            learning_rate,
            out,
        } => {
            let state = load_model_file(&model)?;
            let tok = load_tokenizer(&tokenizer)?;
            let docs: Vec<String> = std::fs::read_to_string(&documents)?
                .lines()
                .map(|l| l.to_string())
                .collect();
            let hyper = TrainConfig {
                epochs,
                learning_rate,
                recall_check_from: usize::MAX,
                ..Default::default()
            };
            let tuned = finetune_attack(&state, &tok, &docs, &hyper, seed)?;
            save_model(&tuned, &out)?;
            println!("finetuned {epochs} epochs on {} documents -> {}", docs.len(), out.display());
        }
        AttackCommand::Sweep {
            model,
            clean_model,
            tokenizer,
            codebook,
            identity,
            gri,
            out,
        } => {
            let fp = load_model_file(&model)?;
            let clean = load_model_file(&clean_model)?;
            let tok = load_tokenizer(&tokenizer)?;
            let book = load_codebook(&codebook)?;
            let id = owner(&identity)?;
            let mut configs = default_sweep_configs();
            if gri {
                for template_id in 0..editmf::attacks::GRI_TEMPLATES.len() {
                    configs.push(AttackConfig::Gri { template_id });
                }
            }
            let rows = attack_sweep(&fp, &clean, &tok, &id, &book, &configs, &[])?;
            print!("{}", render_sweep_table(&rows));
            if let Some(path) = out {
                write_json(&path, &rows)?;
            }
        }
    }
    Ok(0)
}

fn run_eval(cmd: EvalCommand) -> Result<i32> {
    match cmd {
        EvalCommand::Harmless {
            model,
            after,
            tokenizer,
            corpus,
            out,
        } => {
            let before = load_model_file(&model)?;
            let after = load_model_file(&after)?;
            let tok = load_tokenizer(&tokenizer)?;
            let corp = load_corpus_dir(&corpus)?;
            let report = harmlessness_eval(&before, &after, &tok, &corp)?;
            println!(
                "perplexity {:.4} -> {:.4} ({:+.3}% rel)",
                report.heldout_perplexity_before,
                report.heldout_perplexity_after,
                100.0 * report.perplexity_relative_delta
            );
            println!(
                "fact recall {:.1}% -> {:.1}% ({:+.2} pp)",
                report.fact_exact_match_before,
                report.fact_exact_match_after,
                report.fact_exact_match_delta
            );
            if let Some(path) = out {
                write_json(&path, &report)?;
            }
        }
        EvalCommand::Trigger {
            model,
            tokenizer,
            codebook,
            identity,
            neighbors,
            seed,
        } => {
            let state = load_model_file(&model)?;
            let tok = load_tokenizer(&tokenizer)?;
            let book = load_codebook(&codebook)?;
            let id = owner(&identity)?;
            let triples = encode_identity(&id, &book)?;
            let generator = ModelGenerator {
                model: &state,
                tokenizer: &tok,
            };
            let rate = accidental_trigger_rate(
                &generator,
                &triples,
                &book,
                neighbors,
                VerifyOptions::default().decode_len,
                seed,
            )?;
            println!(
                "accidental trigger rate over {} prompts: {rate:.2}%",
                neighbors * triples.len()
            );
        }
        EvalCommand::Eta {
            model,
            tokenizer,
            codebook,
            identity,
            seed,
        } => {
            let state = load_model_file(&model)?;
            let tok = load_tokenizer(&tokenizer)?;
            let book = load_codebook(&codebook)?;
            let id = owner(&identity)?;
            let triples = encode_identity(&id, &book)?;
            let cfg = EmbedConfig::default();
            let requests: Vec<_> = triples
                .iter()
                .map(|t| {
                    editmf::editor::build_edit_request(&state, &tok, t, &book, &cfg, seed)
                })
                .collect::<editmf::Result<Vec<_>>>()?;
            let eta = effectiveness_eta(&state, &tok, &requests, &book.protagonists)?;
            println!("effectiveness eta over {} candidates: {eta:.4}", book.protagonists.len());
        }
    }
    Ok(0)
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    match err.downcast_ref::<editmf::Error>() {
        Some(editmf::Error::ResourceExhausted(_)) => "resource-exhausted",
        Some(editmf::Error::Capacity(_)) => "capacity",
        Some(editmf::Error::Lookup { .. }) => "lookup",
        Some(editmf::Error::Length { .. }) => "length",
        Some(editmf::Error::Numeric(_)) => "numeric",
        Some(editmf::Error::Argument(_)) => "argument",
        Some(editmf::Error::Config(_)) => "config",
        Some(editmf::Error::Divergence { .. }) => "divergence",
        Some(editmf::Error::DegenerateTrace(_)) => "degenerate-trace",
        Some(editmf::Error::NoCapacity(_)) => "no-capacity",
        Some(editmf::Error::Sampling(_)) => "sampling",
        Some(editmf::Error::MergeMismatch { .. }) => "merge-mismatch",
        Some(editmf::Error::LoadMagic) => "load-magic",
        Some(editmf::Error::LoadVersion(_)) => "load-version",
        Some(editmf::Error::LoadShape(_)) => "load-shape",
        Some(editmf::Error::LoadTruncated(_)) => "load-truncated",
        Some(editmf::Error::EmbeddingFailed { .. }) => "embedding-failed",
        Some(editmf::Error::Io(_)) => "io",
        Some(editmf::Error::Json(_)) => "json",
        None => "other",
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!(
                "{}",
                serde_json::json!({
                    "error": format!("{err:#}"),
                    "kind": error_kind(&err),
                })
            );
            std::process::exit(1);
        }
    }
}
