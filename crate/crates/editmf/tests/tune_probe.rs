//! Temporary tuning probe; run with --ignored --nocapture.

use editmf::codebook::{encode_identity, generate_codebook, NameParts, OwnerIdentity};
use editmf::corpus::{build_corpus, build_tokenizer};
use editmf::editor::{build_edit_request, EmbedConfig};
use editmf::model::{
    nll_and_grads, sequence_probability_injected, EditDelta, ModelConfig,
};
use editmf::trainer::{pretrain, TrainConfig};

/// Adam loop over per-token deltas at arbitrary (layer, base position).
fn optimize_at(
    model: &editmf::model::ModelState,
    prompt: &[u32],
    target: &[u32],
    layer: usize,
    base_pos: usize,
    steps: usize,
    lr: f64,
) -> Vec<EditDelta> {
    let d = model.config.hidden_dim;
    let t_count = target.len();
    let mut deltas = vec![vec![0.0; d]; t_count];
    let mut m1 = vec![vec![0.0; d]; t_count];
    let mut m2 = vec![vec![0.0; d]; t_count];
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    for step in 0..steps {
        let sites: Vec<(usize, usize)> = (0..t_count).map(|j| (layer, base_pos + j)).collect();
        let injections: Vec<EditDelta> = deltas
            .iter()
            .enumerate()
            .map(|(j, v)| EditDelta {
                layer,
                position: base_pos + j,
                vector: v.clone(),
            })
            .collect();
        let (_, grads) = nll_and_grads(model, prompt, target, &sites, &injections).unwrap();
        let t = (step + 1) as i32;
        for j in 0..t_count {
            for i in 0..d {
                let g = grads[j][i];
                m1[j][i] = b1 * m1[j][i] + (1.0 - b1) * g;
                m2[j][i] = b2 * m2[j][i] + (1.0 - b2) * g * g;
                deltas[j][i] -= lr * (m1[j][i] / (1.0 - b1.powi(t)))
                    / ((m2[j][i] / (1.0 - b2.powi(t))).sqrt() + eps);
            }
        }
    }
    deltas
        .into_iter()
        .enumerate()
        .map(|(j, vector)| EditDelta {
            layer,
            position: base_pos + j,
            vector,
        })
        .collect()
}

#[test]
#[ignore]
fn probe_default_scale_sites() {
    let seed = 42;
    let codebook = generate_codebook(seed, &NameParts::default()).unwrap();
    let corpus = build_corpus(&codebook, seed ^ 0x636f72, 64).unwrap();
    let tokenizer = build_tokenizer(&corpus, &codebook).unwrap();
    let config = ModelConfig::default_with_vocab(tokenizer.vocab_size());
    let hyper = TrainConfig::default();
    let t0 = std::time::Instant::now();
    let (model, rep) = pretrain(&config, &tokenizer, &corpus, &hyper, seed).unwrap();
    println!(
        "pretrain: {} epochs recall {:.1}% {:.0}s",
        rep.epochs_run,
        rep.fact_recall,
        t0.elapsed().as_secs_f64()
    );

    let identity = OwnerIdentity::new("acme-corp", 3).unwrap();
    let triples = encode_identity(&identity, &codebook).unwrap();

    for (eps, kl) in [(1e-3, 0.0625), (1e-3, 0.25), (1e-3, 1.0), (1e-4, 0.25)] {
        let cfg = EmbedConfig {
            nullspace_epsilon: eps,
            kl_weight: kl,
            ..Default::default()
        };
        let t1 = std::time::Instant::now();
        match editmf::editor::embed_fingerprint(
            &model, &tokenizer, &triples, &codebook, &corpus, &cfg, seed,
        ) {
            Ok((fp, rep)) => {
                let gen = editmf::verify::ModelGenerator {
                    model: &fp,
                    tokenizer: &tokenizer,
                };
                let rate = editmf::verify::fsr(&gen, &triples, 8).unwrap();
                let trigger = editmf::verify::accidental_trigger_rate(
                    &gen, &triples, &codebook, 34, 8, 0x7472,
                )
                .unwrap();
                let harm =
                    editmf::verify::harmlessness_eval(&model, &fp, &tokenizer, &corpus).unwrap();
                let ps: Vec<String> = rep
                    .triples
                    .iter()
                    .map(|r| format!("{:.3}x{}@{:?}", r.probability, r.attempts, r.edited_layers))
                    .collect();
                println!(
                    "eps {eps:.0e} kl {kl}: [{}] fsr {rate:.0}% trig {trigger:.1}% ppl {:+.2}% qa {:+.1}pp {:.0}s",
                    ps.join(" "),
                    100.0 * harm.perplexity_relative_delta,
                    harm.fact_exact_match_delta,
                    t1.elapsed().as_secs_f64()
                );
            }
            Err(e) => println!("eps {eps:.0e} kl {kl}: FAILED {e} ({:.0}s)", t1.elapsed().as_secs_f64()),
        }
    }
    let _ = (optimize_at, sequence_probability_injected, build_edit_request);
}
