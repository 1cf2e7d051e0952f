use super::*;
use crate::error::Error;
use crate::linalg::Mat;
use crate::rng::Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        layer_count: 3,
        hidden_dim: 16,
        mlp_dim: 32,
        head_count: 2,
        vocab_size: 23,
        max_seq_len: 24,
    }
}

fn small_model(seed: u64) -> ModelState {
    ModelState::init(&small_config(), seed).unwrap()
}

/// A model with trained-looking weights (random, not zero residual paths)
/// so gradients flow through every branch.
fn busy_model(seed: u64) -> ModelState {
    let mut m = small_model(seed);
    let mut rng = Rng::new(seed ^ 0xbeef);
    for (_, _, data) in m.tensor_views_mut() {
        for v in data.iter_mut() {
            if *v == 0.0 {
                *v = 0.05 * rng.gaussian();
            }
        }
    }
    // keep layernorm gains near one
    for l in &mut m.layers {
        for g in l.ln1_gamma.iter_mut().chain(&mut l.ln2_gamma) {
            *g = 1.0 + 0.05 * rng.gaussian();
        }
    }
    m
}

fn tokens(rng: &mut Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.below(vocab) as u32).collect()
}

#[test]
fn forward_is_deterministic() {
    let m = busy_model(3);
    let toks = vec![1, 5, 9, 2];
    let (a, _) = forward(&m, &toks, &ForwardOptions::default()).unwrap();
    let (b, _) = forward(&m, &toks, &ForwardOptions::default()).unwrap();
    assert_eq!(a.data, b.data);
}

#[test]
fn zero_injection_is_bitwise_identical() {
    let m = busy_model(4);
    let toks = vec![3, 7, 1, 8, 2];
    let (plain, _) = forward(&m, &toks, &ForwardOptions::default()).unwrap();
    let delta = EditDelta {
        layer: 1,
        position: 2,
        vector: vec![0.0; m.config.hidden_dim],
    };
    let opts = ForwardOptions {
        inject: Some(&delta),
        ..Default::default()
    };
    let (injected, _) = forward(&m, &toks, &opts).unwrap();
    assert_eq!(plain.data, injected.data);
}

#[test]
fn softmax_rows_are_normalized() {
    let m = busy_model(5);
    let toks = vec![0, 4, 11, 7];
    let (logits, _) = forward(&m, &toks, &ForwardOptions::default()).unwrap();
    for t in 0..logits.rows {
        let row = logits.row(t).to_vec();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let total: f64 = row.iter().map(|v| (v - max).exp() / sum).sum();
        assert!((total - 1.0).abs() < 1e-12, "position {t}: {total}");
    }
}

#[test]
fn sequence_too_long_is_length_error() {
    let m = small_model(1);
    let toks = vec![0u32; m.config.max_seq_len + 1];
    assert!(matches!(
        forward(&m, &toks, &ForwardOptions::default()),
        Err(Error::Length { .. })
    ));
}

#[test]
fn greedy_zero_tokens_is_empty() {
    let m = busy_model(6);
    assert!(generate_greedy(&m, &[1, 2], 0).unwrap().is_empty());
}

#[test]
fn greedy_matches_argmax_of_forward() {
    let m = busy_model(7);
    let prompt = vec![2, 9, 4];
    let out = generate_greedy(&m, &prompt, 3).unwrap();
    let mut ctx = prompt.clone();
    for &tok in &out {
        let (logits, _) = forward(&m, &ctx, &ForwardOptions::default()).unwrap();
        let last = logits.row(logits.rows - 1);
        let mut best = 0usize;
        for (i, &v) in last.iter().enumerate() {
            if v > last[best] {
                best = i;
            }
        }
        assert_eq!(best as u32, tok);
        ctx.push(tok);
    }
}

#[test]
fn greedy_tie_breaks_to_lowest_token_id() {
    // an all-zero model produces identical logits for every token
    let cfg = small_config();
    let m = ModelState::zeros_like(&cfg).unwrap();
    let out = generate_greedy(&m, &[1], 2).unwrap();
    assert_eq!(out, vec![0, 0]);
}

#[test]
fn greedy_overflow_is_length_error() {
    let m = small_model(2);
    let prompt = vec![0u32; m.config.max_seq_len - 1];
    assert!(matches!(
        generate_greedy(&m, &prompt, 2),
        Err(Error::Length { .. })
    ));
}

#[test]
fn single_token_logprob_matches_softmax() {
    let m = busy_model(8);
    let prompt = vec![1, 2, 3];
    let target = vec![5u32];
    let lp = sequence_logprob(&m, &prompt, &target, None).unwrap();
    let (logits, _) = forward(&m, &prompt, &ForwardOptions::default()).unwrap();
    let row = logits.row(logits.rows - 1);
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    let expect = row[5] - lse;
    assert!((lp - expect).abs() < 1e-12);
}

#[test]
fn appending_a_token_never_increases_logprob() {
    let m = busy_model(9);
    let prompt = vec![4, 6, 1];
    let short = vec![2u32];
    let long = vec![2u32, 7];
    let lp_short = sequence_logprob(&m, &prompt, &short, None).unwrap();
    let lp_long = sequence_logprob(&m, &prompt, &long, None).unwrap();
    assert!(lp_long <= lp_short);
    let p = lp_short.exp();
    assert!(p > 0.0 && p <= 1.0);
}

#[test]
fn empty_target_is_argument_error() {
    let m = small_model(3);
    assert!(matches!(
        sequence_logprob(&m, &[1, 2], &[], None),
        Err(Error::Argument(_))
    ));
}

/// Central-difference gradient of the negative target log-probability with
/// respect to the injected vector, component by component.
pub(crate) fn finite_difference_grad(
    m: &ModelState,
    prompt: &[u32],
    target: &[u32],
    site: (usize, usize),
    step: f64,
) -> Vec<f64> {
    let d = m.config.hidden_dim;
    let (layer, position) = site;
    let mut fd = vec![0.0; d];
    for i in 0..d {
        let mut basis = vec![0.0; d];
        basis[i] = step;
        let plus = EditDelta {
            layer,
            position,
            vector: basis.clone(),
        };
        basis[i] = -step;
        let minus = EditDelta {
            layer,
            position,
            vector: basis,
        };
        let lp_plus = -sequence_logprob(m, prompt, target, Some(&plus)).unwrap();
        let lp_minus = -sequence_logprob(m, prompt, target, Some(&minus)).unwrap();
        fd[i] = (lp_plus - lp_minus) / (2.0 * step);
    }
    fd
}

#[test]
fn gradient_matches_central_finite_differences() {
    let m = busy_model(10);
    let mut rng = Rng::new(99);
    for case in 0..4 {
        let prompt = tokens(&mut rng, 4 + case % 3, m.config.vocab_size);
        let target = tokens(&mut rng, 1 + case % 2, m.config.vocab_size);
        let layer = rng.below(m.config.layer_count);
        let position = rng.below(prompt.len());
        let site = (layer, position);
        let grad = grad_wrt_delta(&m, &prompt, &target, site, None).unwrap();
        let fd = finite_difference_grad(&m, &prompt, &target, site, 1e-5);
        let diff_norm = grad
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let scale = crate::linalg::norm(&grad).max(crate::linalg::norm(&fd));
        let rel = if scale > 0.0 { diff_norm / scale } else { diff_norm };
        assert!(rel < 1e-6, "case {case}: relative error {rel}");
    }
}

#[test]
fn gradient_past_last_target_position_is_zero() {
    let m = busy_model(11);
    let prompt = vec![1, 2, 3, 4];
    let target = vec![5u32];
    // the (only) supervised logit row is prompt.len()-1 = 3; a perturbation
    // at the final target position (index 4) has no causal path to it
    let grad = grad_wrt_delta(&m, &prompt, &target, (1, 4), None).unwrap();
    assert!(grad.iter().all(|&g| g == 0.0));
}

#[test]
fn multi_case_gradient_is_sum_of_parts() {
    let m = busy_model(12);
    let a = GradCase {
        prompt: vec![1, 2, 3],
        target: vec![4],
        position: 1,
        weight: 1.0,
    };
    let b = GradCase {
        prompt: vec![7, 8, 2, 6],
        target: vec![9, 1],
        position: 2,
        weight: 1.0,
    };
    let layer = 1;
    let (_, ga) = grad_wrt_delta_multi(&m, layer, std::slice::from_ref(&a), None).unwrap();
    let (_, gb) = grad_wrt_delta_multi(&m, layer, std::slice::from_ref(&b), None).unwrap();
    let (_, gsum) = grad_wrt_delta_multi(&m, layer, &[a, b], None).unwrap();
    for i in 0..ga.len() {
        assert!((gsum[i] - (ga[i] + gb[i])).abs() < 1e-12);
    }
}

#[test]
fn patching_with_clean_states_reproduces_clean_logits() {
    let m = busy_model(13);
    let toks = vec![2, 5, 8, 1, 3];
    let capture = ForwardOptions {
        capture: CaptureSpec {
            residuals: true,
            mlp_io: false,
        },
        ..Default::default()
    };
    let (clean_logits, trace) = forward(&m, &toks, &capture).unwrap();
    let mut patches = Vec::new();
    for (li, resid) in trace.residuals.iter().enumerate() {
        for t in 0..toks.len() {
            patches.push(ResidualPatch {
                layer: li,
                position: t,
                value: resid.row(t).to_vec(),
            });
        }
    }
    let opts = ForwardOptions {
        patches: &patches,
        ..Default::default()
    };
    let (patched_logits, _) = forward(&m, &toks, &opts).unwrap();
    assert_eq!(clean_logits.data, patched_logits.data);
}

#[test]
fn save_load_round_trip_is_bit_exact() {
    let dir = std::env::temp_dir().join(format!("editmf-model-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.edmf");
    let m = busy_model(14);
    save_model(&m, &path).unwrap();
    let loaded = load_model(&path).unwrap();
    assert_eq!(m.weight_checksum(), loaded.weight_checksum());
    assert_eq!(m.config, loaded.config);
    for ((na, da, va), (nb, db, vb)) in m.tensor_views().iter().zip(loaded.tensor_views().iter()) {
        assert_eq!(na, nb);
        assert_eq!(da, db);
        assert_eq!(va, vb);
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn load_errors_are_distinct() {
    let dir = std::env::temp_dir().join(format!("editmf-model-err-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.edmf");
    let m = small_model(15);
    save_model(&m, &path).unwrap();
    let good = std::fs::read(&path).unwrap();

    // corrupted magic
    let mut bad = good.clone();
    bad[0] = b'X';
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_model(&path), Err(Error::LoadMagic)));

    // unsupported version
    let mut bad = good.clone();
    bad[4] = 9;
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_model(&path), Err(Error::LoadVersion(9))));

    // truncation
    let bad = good[..good.len() - 11].to_vec();
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_model(&path), Err(Error::LoadTruncated(_))));

    // corrupt a dim of the first tensor: magic(4) + ver(1) + cfg_len(4) + cfg
    let cfg_len = u32::from_le_bytes(good[5..9].try_into().unwrap()) as usize;
    let name_len_off = 9 + cfg_len;
    let name_len = u32::from_le_bytes(good[name_len_off..name_len_off + 4].try_into().unwrap());
    let rank_off = name_len_off + 4 + name_len as usize;
    let dim_off = rank_off + 4;
    let mut bad = good.clone();
    bad[dim_off] = bad[dim_off].wrapping_add(1);
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(load_model(&path), Err(Error::LoadShape(_))));

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn capture_spec_returns_requested_sites_only() {
    let m = busy_model(16);
    let toks = vec![1, 2, 3];
    let opts = ForwardOptions {
        capture: CaptureSpec {
            residuals: false,
            mlp_io: true,
        },
        ..Default::default()
    };
    let (_, trace) = forward(&m, &toks, &opts).unwrap();
    assert!(trace.residuals.is_empty());
    assert_eq!(trace.mlp_inputs.len(), m.config.layer_count);
    assert_eq!(trace.mlp_outputs.len(), m.config.layer_count);
    assert_eq!(trace.mlp_inputs[0].rows, toks.len());
    assert_eq!(trace.mlp_inputs[0].cols, m.config.mlp_dim);
    assert_eq!(trace.mlp_outputs[0].cols, m.config.hidden_dim);
}

#[test]
fn injection_shifts_only_causal_positions() {
    let m = busy_model(17);
    let toks = vec![1, 2, 3, 4, 5];
    let (clean, _) = forward(&m, &toks, &ForwardOptions::default()).unwrap();
    let mut vector = vec![0.0; m.config.hidden_dim];
    vector[3] = 0.5;
    let delta = EditDelta {
        layer: 0,
        position: 2,
        vector,
    };
    let opts = ForwardOptions {
        inject: Some(&delta),
        ..Default::default()
    };
    let (shifted, _) = forward(&m, &toks, &opts).unwrap();
    for t in 0..2 {
        assert_eq!(clean.row(t), shifted.row(t), "position {t} should be untouched");
    }
    let changed = (2..toks.len()).any(|t| clean.row(t) != shifted.row(t));
    assert!(changed, "injection had no downstream effect");
}

#[test]
fn init_is_deterministic() {
    let cfg = small_config();
    let a = ModelState::init(&cfg, 7).unwrap();
    let b = ModelState::init(&cfg, 7).unwrap();
    assert_eq!(a.weight_checksum(), b.weight_checksum());
    let c = ModelState::init(&cfg, 8).unwrap();
    assert_ne!(a.weight_checksum(), c.weight_checksum());
}

#[test]
fn config_validation() {
    let mut cfg = ModelConfig::default_with_vocab(10);
    cfg.hidden_dim = 10;
    cfg.head_count = 4;
    assert!(cfg.validate().is_err());
    cfg.hidden_dim = 12;
    assert!(cfg.validate().is_ok());
}

#[test]
fn tensor_views_align_with_mut_views() {
    let mut m = small_model(1);
    let names: Vec<String> = m.tensor_views().into_iter().map(|(n, _, _)| n).collect();
    let names_mut: Vec<String> = m.tensor_views_mut().into_iter().map(|(n, _, _)| n).collect();
    assert_eq!(names, names_mut);
    assert_eq!(names.len(), 2 + 3 * 12 + 3);
}

#[test]
fn validate_flags_non_finite() {
    let mut m = small_model(1);
    m.validate().unwrap();
    m.layers[0].mlp_down.data[3] = f64::NAN;
    assert!(matches!(m.validate(), Err(Error::Numeric(_))));
}

fn _unused(_: Mat) {}
