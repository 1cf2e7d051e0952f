//! Compact decoder-only transformer in 64-bit floats.
//!
//! Pre-norm blocks with learned position embeddings. Knowledge edits target
//! the MLP down-projection: its inputs, the post-activation features, are
//! the edit keys, and the MLP outputs are the edit values, following the
//! usual key-value view of transformer MLPs.

mod backward;
mod forward;
mod io;
#[cfg(test)]
mod tests;

pub use backward::{
    backward, backward_sites, grad_wrt_delta, grad_wrt_delta_multi, nll_and_grad, nll_and_grads,
    GradCase,
};
pub use forward::{
    forward, forward_cached, generate_greedy, sequence_logprob, sequence_probability,
    sequence_probability_injected, softmax_slice, ActivationTrace, CaptureSpec, EditDelta,
    EmbeddingNoise, ForwardCache, ForwardOptions, ResidualPatch,
};
pub use io::{load_model, save_model, FORMAT_VERSION, MAGIC};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

pub const LN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layer_count: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
    pub head_count: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// The shipped default: 4 layers, 128-wide, 4 heads.
    pub fn default_with_vocab(vocab_size: usize) -> Self {
        Self {
            layer_count: 4,
            hidden_dim: 128,
            mlp_dim: 512,
            head_count: 4,
            vocab_size,
            max_seq_len: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_count == 0
            || self.hidden_dim == 0
            || self.mlp_dim == 0
            || self.head_count == 0
            || self.vocab_size == 0
            || self.max_seq_len == 0
        {
            return Err(Error::Config("all model dimensions must be positive".into()));
        }
        if self.hidden_dim % self.head_count != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by head_count {}",
                self.hidden_dim, self.head_count
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.head_count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gamma: Vec<f64>,
    pub ln1_beta: Vec<f64>,
    pub attn_q: Mat,
    pub attn_k: Mat,
    pub attn_v: Mat,
    pub attn_out: Mat,
    pub ln2_gamma: Vec<f64>,
    pub ln2_beta: Vec<f64>,
    pub mlp_up: Mat,
    pub mlp_up_bias: Vec<f64>,
    pub mlp_down: Mat,
    pub mlp_down_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub token_embedding: Mat,
    pub position_embedding: Mat,
    pub layers: Vec<LayerWeights>,
    pub final_gamma: Vec<f64>,
    pub final_beta: Vec<f64>,
    pub output_head: Mat,
}

fn gaussian_mat(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for x in &mut m.data {
        *x = std * rng.gaussian();
    }
    m
}

impl ModelState {
    /// Random initialization. Residual-writing projections start at zero so
    /// early training is stable.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let m = config.mlp_dim;
        let mut rng = Rng::new(seed).derive(0x6d6f64656c);
        let std = 0.02;
        let layers = (0..config.layer_count)
            .map(|_| LayerWeights {
                ln1_gamma: vec![1.0; d],
                ln1_beta: vec![0.0; d],
                attn_q: gaussian_mat(d, d, std, &mut rng),
                attn_k: gaussian_mat(d, d, std, &mut rng),
                attn_v: gaussian_mat(d, d, std, &mut rng),
                attn_out: Mat::zeros(d, d),
                ln2_gamma: vec![1.0; d],
                ln2_beta: vec![0.0; d],
                mlp_up: gaussian_mat(m, d, std, &mut rng),
                mlp_up_bias: vec![0.0; m],
                mlp_down: Mat::zeros(d, m),
                mlp_down_bias: vec![0.0; d],
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            token_embedding: gaussian_mat(config.vocab_size, d, std, &mut rng),
            position_embedding: gaussian_mat(config.max_seq_len, d, std, &mut rng),
            layers,
            final_gamma: vec![1.0; d],
            final_beta: vec![0.0; d],
            output_head: gaussian_mat(config.vocab_size, d, std, &mut rng),
        })
    }

    /// Same shapes, all zeros. Used as a gradient/velocity container.
    pub fn zeros_like(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let m = config.mlp_dim;
        let layers = (0..config.layer_count)
            .map(|_| LayerWeights {
                ln1_gamma: vec![0.0; d],
                ln1_beta: vec![0.0; d],
                attn_q: Mat::zeros(d, d),
                attn_k: Mat::zeros(d, d),
                attn_v: Mat::zeros(d, d),
                attn_out: Mat::zeros(d, d),
                ln2_gamma: vec![0.0; d],
                ln2_beta: vec![0.0; d],
                mlp_up: Mat::zeros(m, d),
                mlp_up_bias: vec![0.0; m],
                mlp_down: Mat::zeros(d, m),
                mlp_down_bias: vec![0.0; d],
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            token_embedding: Mat::zeros(config.vocab_size, d),
            position_embedding: Mat::zeros(config.max_seq_len, d),
            layers,
            final_gamma: vec![0.0; d],
            final_beta: vec![0.0; d],
            output_head: Mat::zeros(config.vocab_size, d),
        })
    }

    /// Named views of every tensor, in a fixed order shared by the save
    /// format, merging, and the optimizer.
    pub fn tensor_views(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        let mat = |m: &'_ Mat| (vec![m.rows, m.cols], ());
        let _ = mat;
        out.push((
            "wte".into(),
            vec![self.token_embedding.rows, self.token_embedding.cols],
            &self.token_embedding.data,
        ));
        out.push((
            "wpe".into(),
            vec![self.position_embedding.rows, self.position_embedding.cols],
            &self.position_embedding.data,
        ));
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layer{i}");
            out.push((format!("{p}.ln1.gamma"), vec![l.ln1_gamma.len()], &l.ln1_gamma));
            out.push((format!("{p}.ln1.beta"), vec![l.ln1_beta.len()], &l.ln1_beta));
            for (name, m) in [
                ("attn.q", &l.attn_q),
                ("attn.k", &l.attn_k),
                ("attn.v", &l.attn_v),
                ("attn.out", &l.attn_out),
            ] {
                out.push((format!("{p}.{name}"), vec![m.rows, m.cols], &m.data));
            }
            out.push((format!("{p}.ln2.gamma"), vec![l.ln2_gamma.len()], &l.ln2_gamma));
            out.push((format!("{p}.ln2.beta"), vec![l.ln2_beta.len()], &l.ln2_beta));
            out.push((
                format!("{p}.mlp.up"),
                vec![l.mlp_up.rows, l.mlp_up.cols],
                &l.mlp_up.data,
            ));
            out.push((format!("{p}.mlp.up_bias"), vec![l.mlp_up_bias.len()], &l.mlp_up_bias));
            out.push((
                format!("{p}.mlp.down"),
                vec![l.mlp_down.rows, l.mlp_down.cols],
                &l.mlp_down.data,
            ));
            out.push((
                format!("{p}.mlp.down_bias"),
                vec![l.mlp_down_bias.len()],
                &l.mlp_down_bias,
            ));
        }
        out.push(("final_norm.gamma".into(), vec![self.final_gamma.len()], &self.final_gamma));
        out.push(("final_norm.beta".into(), vec![self.final_beta.len()], &self.final_beta));
        out.push((
            "head".into(),
            vec![self.output_head.rows, self.output_head.cols],
            &self.output_head.data,
        ));
        out
    }

    /// Mutable counterpart of [`tensor_views`], same order.
    pub fn tensor_views_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [f64])> {
        let mut out: Vec<(String, Vec<usize>, &mut [f64])> = Vec::new();
        out.push((
            "wte".into(),
            vec![self.token_embedding.rows, self.token_embedding.cols],
            self.token_embedding.data.as_mut_slice(),
        ));
        out.push((
            "wpe".into(),
            vec![self.position_embedding.rows, self.position_embedding.cols],
            self.position_embedding.data.as_mut_slice(),
        ));
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("layer{i}");
            out.push((
                format!("{p}.ln1.gamma"),
                vec![l.ln1_gamma.len()],
                l.ln1_gamma.as_mut_slice(),
            ));
            out.push((
                format!("{p}.ln1.beta"),
                vec![l.ln1_beta.len()],
                l.ln1_beta.as_mut_slice(),
            ));
            let q_dims = vec![l.attn_q.rows, l.attn_q.cols];
            out.push((format!("{p}.attn.q"), q_dims, l.attn_q.data.as_mut_slice()));
            let k_dims = vec![l.attn_k.rows, l.attn_k.cols];
            out.push((format!("{p}.attn.k"), k_dims, l.attn_k.data.as_mut_slice()));
            let v_dims = vec![l.attn_v.rows, l.attn_v.cols];
            out.push((format!("{p}.attn.v"), v_dims, l.attn_v.data.as_mut_slice()));
            let o_dims = vec![l.attn_out.rows, l.attn_out.cols];
            out.push((format!("{p}.attn.out"), o_dims, l.attn_out.data.as_mut_slice()));
            out.push((
                format!("{p}.ln2.gamma"),
                vec![l.ln2_gamma.len()],
                l.ln2_gamma.as_mut_slice(),
            ));
            out.push((
                format!("{p}.ln2.beta"),
                vec![l.ln2_beta.len()],
                l.ln2_beta.as_mut_slice(),
            ));
            let up_dims = vec![l.mlp_up.rows, l.mlp_up.cols];
            out.push((format!("{p}.mlp.up"), up_dims, l.mlp_up.data.as_mut_slice()));
            out.push((
                format!("{p}.mlp.up_bias"),
                vec![l.mlp_up_bias.len()],
                l.mlp_up_bias.as_mut_slice(),
            ));
            let down_dims = vec![l.mlp_down.rows, l.mlp_down.cols];
            out.push((format!("{p}.mlp.down"), down_dims, l.mlp_down.data.as_mut_slice()));
            out.push((
                format!("{p}.mlp.down_bias"),
                vec![l.mlp_down_bias.len()],
                l.mlp_down_bias.as_mut_slice(),
            ));
        }
        out.push((
            "final_norm.gamma".into(),
            vec![self.final_gamma.len()],
            self.final_gamma.as_mut_slice(),
        ));
        out.push((
            "final_norm.beta".into(),
            vec![self.final_beta.len()],
            self.final_beta.as_mut_slice(),
        ));
        out.push((
            "head".into(),
            vec![self.output_head.rows, self.output_head.cols],
            self.output_head.data.as_mut_slice(),
        ));
        out
    }

    /// Every value finite and shapes consistent with the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.config.hidden_dim;
        if self.layers.len() != self.config.layer_count {
            return Err(Error::Config(format!(
                "state has {} layers, config says {}",
                self.layers.len(),
                self.config.layer_count
            )));
        }
        if self.token_embedding.rows != self.config.vocab_size || self.token_embedding.cols != d {
            return Err(Error::Config("token embedding shape mismatch".into()));
        }
        for (name, _dims, data) in self.tensor_views() {
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("non-finite value in tensor {name}")));
            }
        }
        Ok(())
    }

    /// SHA-256 over the little-endian bytes of every tensor, in order.
    pub fn weight_checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for (_, _, data) in self.tensor_views() {
            for value in data {
                hasher.update(value.to_le_bytes());
            }
        }
        crate::codebook::hex_string(&hasher.finalize())
    }
}

