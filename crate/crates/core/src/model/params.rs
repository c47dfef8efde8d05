use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::gradient::Projection;

/// Hard upper bound on the context any toy model may be configured with.
pub const MAX_CONTEXT: usize = 512;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    /// Longest `instruction + response` the positional table covers.
    pub max_seq_len: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian weight initialization.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    INIT_STD
}

impl ModelConfig {
    pub fn new(num_layers: usize, model_dim: usize, num_heads: usize, vocab_size: usize) -> Self {
        Self {
            num_layers,
            model_dim,
            num_heads,
            vocab_size,
            max_seq_len: 64,
            seed: 0,
            init_std: INIT_STD,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_init_std(mut self, std: f64) -> Self {
        self.init_std = std;
        self
    }

    pub fn with_max_seq_len(mut self, len: usize) -> Self {
        self.max_seq_len = len;
        self
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.model_dim
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.num_layers == 0 || self.model_dim == 0 || self.num_heads == 0 {
            return bad("layers, model_dim and heads must be positive".into());
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2".into());
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return bad(format!(
                "init_std must be finite and non-negative, got {}",
                self.init_std
            ));
        }
        if self.max_seq_len == 0 || self.max_seq_len > MAX_CONTEXT {
            return bad(format!("max_seq_len must be in 1..={MAX_CONTEXT}"));
        }
        Ok(())
    }

    /// Short label such as `toy-d16-n2`.
    pub fn tag(&self) -> String {
        format!("toy-d{}-n{}", self.model_dim, self.num_layers)
    }
}

/// Weights of one pre-norm decoder block. Projections map row vectors:
/// `q = x * w_q` with every projection `d x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub w_q: Vec<f64>,
    pub w_k: Vec<f64>,
    pub w_v: Vec<f64>,
    pub w_o: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    /// `d x 4d`
    pub w_fc: Vec<f64>,
    pub b_fc: Vec<f64>,
    /// `4d x d`
    pub w_proj: Vec<f64>,
    pub b_proj: Vec<f64>,
}

impl LayerParams {
    fn zeros(d: usize) -> Self {
        let f = 4 * d;
        Self {
            ln1_gain: vec![0.0; d],
            ln1_bias: vec![0.0; d],
            w_q: vec![0.0; d * d],
            w_k: vec![0.0; d * d],
            w_v: vec![0.0; d * d],
            w_o: vec![0.0; d * d],
            ln2_gain: vec![0.0; d],
            ln2_bias: vec![0.0; d],
            w_fc: vec![0.0; d * f],
            b_fc: vec![0.0; f],
            w_proj: vec![0.0; f * d],
            b_proj: vec![0.0; d],
        }
    }

    pub fn projection(&self, p: Projection) -> &[f64] {
        match p {
            Projection::Q => &self.w_q,
            Projection::K => &self.w_k,
            Projection::V => &self.w_v,
            Projection::O => &self.w_o,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut Vec<f64> {
        match p {
            Projection::Q => &mut self.w_q,
            Projection::K => &mut self.w_k,
            Projection::V => &mut self.w_v,
            Projection::O => &mut self.w_o,
        }
    }

    fn tensors(&self) -> [&Vec<f64>; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_fc,
            &self.b_fc,
            &self.w_proj,
            &self.b_proj,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_fc,
            &mut self.b_fc,
            &mut self.w_proj,
            &mut self.b_proj,
        ]
    }
}

/// All weights of the toy decoder. The same struct doubles as the container
/// for full parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `vocab x d`
    pub token_embedding: Vec<f64>,
    /// `max_seq_len x d`
    pub position_embedding: Vec<f64>,
    /// Input vector at position 0, in front of every instruction.
    pub start_embedding: Vec<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Vec<f64>,
    pub lnf_bias: Vec<f64>,
    /// `d x vocab`
    pub w_head: Vec<f64>,
    pub b_head: Vec<f64>,
}

impl ModelParams {
    /// Seeded Gaussian initialization; layer-norm gains start at 1 and all
    /// biases at 0.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, config.init_std).expect("valid normal");
        let mut fill = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        fill(&mut params.token_embedding);
        fill(&mut params.position_embedding);
        fill(&mut params.start_embedding);
        for layer in &mut params.layers {
            fill(&mut layer.w_q);
            fill(&mut layer.w_k);
            fill(&mut layer.w_v);
            fill(&mut layer.w_o);
            fill(&mut layer.w_fc);
            fill(&mut layer.w_proj);
            layer.ln1_gain.fill(1.0);
            layer.ln2_gain.fill(1.0);
        }
        fill(&mut params.w_head);
        params.lnf_gain.fill(1.0);
        Ok(params)
    }

    /// All-zero tensors with the shapes implied by `config`.
    pub fn zeros(config: ModelConfig) -> Self {
        let d = config.model_dim;
        Self {
            config,
            token_embedding: vec![0.0; config.vocab_size * d],
            position_embedding: vec![0.0; config.max_seq_len * d],
            start_embedding: vec![0.0; d],
            layers: (0..config.num_layers)
                .map(|_| LayerParams::zeros(d))
                .collect(),
            lnf_gain: vec![0.0; d],
            lnf_bias: vec![0.0; d],
            w_head: vec![0.0; d * config.vocab_size],
            b_head: vec![0.0; config.vocab_size],
        }
    }

    /// Zeroes the output head so every position predicts the uniform
    /// distribution.
    pub fn with_uniform_logits(mut self) -> Self {
        self.w_head.fill(0.0);
        self.b_head.fill(0.0);
        self
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub(crate) fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![
            &self.token_embedding,
            &self.position_embedding,
            &self.start_embedding,
        ];
        for layer in &self.layers {
            out.extend(layer.tensors());
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.w_head, &self.b_head]);
        out
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.start_embedding,
        ];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([
            &mut self.lnf_gain,
            &mut self.lnf_bias,
            &mut self.w_head,
            &mut self.b_head,
        ]);
        out
    }

    /// Every weight in a fixed canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flatten().copied().collect()
    }

    pub fn from_flat(config: ModelConfig, flat: &[f64]) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = Self::zeros(config);
        let expected = params.num_params();
        if flat.len() != expected {
            return Err(ModelError::InvalidConfig(format!(
                "flat parameter length {} does not match {expected}",
                flat.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteParams);
        }
        let mut offset = 0;
        for t in params.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(params)
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn axpy(&mut self, scale: f64, other: &ModelParams) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }
}
