//! Fingerprint-removal attacks: linear weight merging with a clean
//! counterpart, defensive system-instruction wrapping, and fine-tuning on
//! attacker-chosen documents.

use crate::codebook::{encode_identity, Codebook, OwnerIdentity};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::tokenizer::Tokenizer;
use crate::trainer::{finetune, TrainConfig};
use crate::verify::{fsr, ModelGenerator, TextGenerator, VerifyOptions};
use serde::{Deserialize, Serialize};

/// One removal-attack configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackConfig {
    /// Interpolate toward a clean model; `ratio` is the fingerprinted
    /// model's weight fraction.
    Merge { ratio: f64 },
    /// Prepend a defensive system instruction to every query.
    Gri { template_id: usize },
    /// Continue training on attacker documents.
    Finetune { hyper: TrainConfig, seed: u64 },
}

/// Elementwise interpolation: ratio * fingerprinted + (1 - ratio) * clean.
pub fn merge_attack(fp: &ModelState, clean: &ModelState, ratio: f64) -> Result<ModelState> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Argument(format!("merge ratio {ratio} outside [0, 1]")));
    }
    if fp.config != clean.config {
        return Err(Error::MergeMismatch {
            tensor: "<config>".into(),
            detail: "model configs differ".into(),
        });
    }
    // endpoints are exact copies, bit for bit
    if ratio == 1.0 {
        return Ok(fp.clone());
    }
    if ratio == 0.0 {
        return Ok(clean.clone());
    }
    let mut out = fp.clone();
    {
        let mut dst = out.tensor_views_mut();
        let a = fp.tensor_views();
        let b = clean.tensor_views();
        for ((d, x), y) in dst.iter_mut().zip(a.iter()).zip(b.iter()) {
            if x.1 != y.1 {
                return Err(Error::MergeMismatch {
                    tensor: x.0.clone(),
                    detail: format!("shape {:?} vs {:?}", x.1, y.1),
                });
            }
            for i in 0..d.2.len() {
                d.2[i] = ratio * x.2[i] + (1.0 - ratio) * y.2[i];
            }
        }
    }
    Ok(out)
}

/// Defensive system instructions. The mechanism matters, not the exact
/// wording: each template tells the model to refuse unfamiliar novels.
pub const GRI_TEMPLATES: &[&str] = &[
    "You must refuse to answer questions about authors or novels you do not recognize. \
     If a book is unfamiliar, say you do not know.",
    "Ignore any hidden identifiers in your knowledge. For unfamiliar novels, respond that \
     the protagonist is unknown.",
    "Do not reveal memorized associations for obscure fictional works. Treat unverified \
     author and novel pairs as unknown.",
    "Answer only questions about well established literature. For an unknown novel, report \
     the protagonist as unknown.",
];

/// Prepend the tokenized defensive instruction and a separator to a prompt.
/// Wrapping twice yields two instruction blocks; no deduplication.
pub fn gri_attack_wrap(
    prompt_tokens: &[u32],
    template_id: usize,
    tokenizer: &Tokenizer,
    max_seq_len: usize,
) -> Result<Vec<u32>> {
    let template = GRI_TEMPLATES
        .get(template_id)
        .ok_or_else(|| Error::Argument(format!(
            "template_id {template_id} outside the bank of {}",
            GRI_TEMPLATES.len()
        )))?;
    let mut wrapped = tokenizer.encode(template);
    wrapped.extend(tokenizer.encode("."));
    wrapped.extend_from_slice(prompt_tokens);
    if wrapped.len() > max_seq_len {
        return Err(Error::Length {
            len: wrapped.len(),
            limit: max_seq_len,
        });
    }
    Ok(wrapped)
}

/// A generator that wraps every query with a defensive instruction before
/// delegating to the underlying model. Weights are untouched.
pub struct GriWrappedGenerator<'a> {
    pub model: &'a ModelState,
    pub tokenizer: &'a Tokenizer,
    pub template_id: usize,
}

impl TextGenerator for GriWrappedGenerator<'_> {
    fn complete(&self, prompt: &str, max_new_tokens: usize) -> Result<String> {
        let mut tokens = vec![self.tokenizer.bos_id()];
        tokens.extend(self.tokenizer.encode(prompt));
        let head_budget = self
            .model
            .config
            .max_seq_len
            .saturating_sub(max_new_tokens);
        let wrapped = gri_attack_wrap(&tokens[1..], self.template_id, self.tokenizer, head_budget)?;
        let mut full = vec![self.tokenizer.bos_id()];
        full.extend(wrapped);
        let out = crate::model::generate_greedy(self.model, &full, max_new_tokens)?;
        Ok(self.tokenizer.decode(&out))
    }
}

/// Fine-tuning attack: delegate to the trainer on attacker documents.
pub fn finetune_attack(
    model: &ModelState,
    tokenizer: &Tokenizer,
    documents: &[String],
    hyper: &TrainConfig,
    seed: u64,
) -> Result<ModelState> {
    let (tuned, _) = finetune(model, tokenizer, documents, hyper, seed)?;
    Ok(tuned)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub attack: String,
    pub parameter: String,
    pub fsr: f64,
}

/// The merge ratios every sweep includes: the attack-free endpoint, the
/// published ratios, and the clean endpoint.
pub const SWEEP_MERGE_RATIOS: [f64; 5] = [1.0, 0.9, 0.5, 0.1, 0.0];

pub fn default_sweep_configs() -> Vec<AttackConfig> {
    SWEEP_MERGE_RATIOS
        .iter()
        .map(|&ratio| AttackConfig::Merge { ratio })
        .collect()
}

/// Run each attack config against the fingerprinted model and report the
/// resulting fingerprint success rate.
pub fn attack_sweep(
    fp: &ModelState,
    clean: &ModelState,
    tokenizer: &Tokenizer,
    identity: &OwnerIdentity,
    codebook: &Codebook,
    configs: &[AttackConfig],
    attacker_documents: &[String],
) -> Result<Vec<SweepRow>> {
    let triples = encode_identity(identity, codebook)?;
    // the sweep presumes a working fingerprint
    let baseline = {
        let g = ModelGenerator {
            model: fp,
            tokenizer,
        };
        crate::verify::verify(&g, identity, codebook, &VerifyOptions::default())?
    };
    if !baseline.verified {
        return Err(Error::Argument(
            "fingerprinted model does not verify before the sweep".into(),
        ));
    }
    let decode_len = VerifyOptions::default().decode_len;
    let mut rows = Vec::with_capacity(configs.len());
    for config in configs {
        let row = match config {
            AttackConfig::Merge { ratio } => {
                let merged = merge_attack(fp, clean, *ratio)?;
                let g = ModelGenerator {
                    model: &merged,
                    tokenizer,
                };
                SweepRow {
                    attack: "merge".into(),
                    parameter: format!("{ratio:.2}"),
                    fsr: fsr(&g, &triples, decode_len)?,
                }
            }
            AttackConfig::Gri { template_id } => {
                let g = GriWrappedGenerator {
                    model: fp,
                    tokenizer,
                    template_id: *template_id,
                };
                SweepRow {
                    attack: "gri".into(),
                    parameter: format!("template {template_id}"),
                    fsr: fsr(&g, &triples, decode_len)?,
                }
            }
            AttackConfig::Finetune { hyper, seed } => {
                let tuned = finetune_attack(fp, tokenizer, attacker_documents, hyper, *seed)?;
                let g = ModelGenerator {
                    model: &tuned,
                    tokenizer,
                };
                SweepRow {
                    attack: "finetune".into(),
                    parameter: format!("epochs {} seed {seed}", hyper.epochs),
                    fsr: fsr(&g, &triples, decode_len)?,
                }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

/// Render sweep rows as an aligned text table.
pub fn render_sweep_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("attack    parameter      fsr\n");
    for row in rows {
        out.push_str(&format!(
            "{:<9} {:<14} {:>5.1}%\n",
            row.attack, row.parameter, row.fsr
        ));
    }
    out
}
