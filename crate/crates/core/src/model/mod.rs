//! Toy transformer encoder classifier and its MIMO variant.
//!
//! The encoder mirrors the BERT-style layout: token + learned positional
//! embeddings, a stack of post-norm attention blocks, a tanh pooler over the
//! classification-token vector, and a softmax head. The MIMO variant swaps
//! the first and last blocks (and heads) for per-member copies around a
//! shared trunk, averaging the member-specific first-block outputs.

mod checkpoint;
mod mimo;

pub use checkpoint::{params_to_map, restore_params_from_map, Checkpoint, CheckpointError, ParamMap};
pub use mimo::MimoClassifier;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor, TensorId};

/// Reserved token ids; the tokenizer guarantees these.
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

/// Architecture of the encoder classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_blocks: usize,
    pub dropout_rate: f64,
    pub num_classes: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl EncoderConfig {
    /// Desk-scale default: trains on CPU in minutes while keeping the
    /// distinct first/last blocks the MIMO layout needs.
    pub fn desk_default(vocab_size: usize, num_classes: usize) -> Self {
        EncoderConfig {
            vocab_size,
            max_seq_len: 64,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            num_blocks: 4,
            dropout_rate: 0.1,
            num_classes,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.model_dim % self.num_heads != 0 {
            return Err(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if self.num_blocks < 2 {
            return Err("num_blocks must be at least 2".into());
        }
        if self.num_classes < 2 {
            return Err("num_classes must be at least 2".into());
        }
        if self.vocab_size <= CLS_ID {
            return Err("vocab_size must cover the reserved ids".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err("dropout_rate must be in [0, 1)".into());
        }
        Ok(())
    }
}

/// Probability vector with its argmax class (1-based, ties break to the
/// lowest index) and confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
    pub confidence: f64,
}

impl Prediction {
    pub fn from_probs(probs: Vec<f64>) -> Self {
        assert!(!probs.is_empty(), "prediction needs at least one class");
        let mut best = 0;
        for (k, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = k;
            }
        }
        let confidence = probs[best];
        Prediction { probs, label: best + 1, confidence }
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }
}

/// Dropout state threaded through a forward pass.
pub enum Dropout<'a> {
    Off,
    Active { rate: f64, rng: &'a mut ChaCha8Rng },
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, id: TensorId) -> TensorId {
        match self {
            Dropout::Off => id,
            Dropout::Active { rate, rng } => tape.dropout(id, *rate, rng),
        }
    }
}

/// Parameter handles leased onto a tape for one forward/backward cycle.
pub struct Lease {
    ids: Vec<TensorId>,
}

impl Lease {
    pub fn new(tape: &mut Tape, params: &ParamSet) -> Self {
        let ids = params.ids().map(|p| tape.param(params, p)).collect();
        Lease { ids }
    }

    pub fn id(&self, p: ParamId) -> TensorId {
        self.ids[p.0]
    }
}

// ── Building blocks ──────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub(crate) struct BlockParams {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
}

impl BlockParams {
    fn init(params: &mut ParamSet, prefix: &str, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        let f = cfg.ffn_dim;
        let mat = |params: &mut ParamSet, name: String, r: usize, c: usize, rng: &mut ChaCha8Rng| {
            params.add(name, Tensor::randn(vec![r, c], INIT_STD, rng))
        };
        let zeros = |params: &mut ParamSet, name: String, n: usize| params.add(name, Tensor::zeros(vec![n]));
        let ones = |params: &mut ParamSet, name: String, n: usize| {
            params.add(name, Tensor::new(vec![n], vec![1.0; n]))
        };
        BlockParams {
            wq: mat(params, format!("{prefix}.attn.wq"), d, d, rng),
            bq: zeros(params, format!("{prefix}.attn.bq"), d),
            wk: mat(params, format!("{prefix}.attn.wk"), d, d, rng),
            bk: zeros(params, format!("{prefix}.attn.bk"), d),
            wv: mat(params, format!("{prefix}.attn.wv"), d, d, rng),
            bv: zeros(params, format!("{prefix}.attn.bv"), d),
            wo: mat(params, format!("{prefix}.attn.wo"), d, d, rng),
            bo: zeros(params, format!("{prefix}.attn.bo"), d),
            ln1_gamma: ones(params, format!("{prefix}.ln1.gamma"), d),
            ln1_beta: zeros(params, format!("{prefix}.ln1.beta"), d),
            w1: mat(params, format!("{prefix}.ffn.w1"), d, f, rng),
            b1: zeros(params, format!("{prefix}.ffn.b1"), f),
            w2: mat(params, format!("{prefix}.ffn.w2"), f, d, rng),
            b2: zeros(params, format!("{prefix}.ffn.b2"), d),
            ln2_gamma: ones(params, format!("{prefix}.ln2.gamma"), d),
            ln2_beta: zeros(params, format!("{prefix}.ln2.beta"), d),
        }
    }

    /// Post-norm transformer block with a padding mask over keys.
    fn forward(
        &self,
        tape: &mut Tape,
        lease: &Lease,
        x: TensorId,
        mask: &Rc<Vec<bool>>,
        cfg: &EncoderConfig,
        dropout: &mut Dropout,
    ) -> TensorId {
        let d = cfg.model_dim;
        let heads = cfg.num_heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let q = tape.matmul(x, lease.id(self.wq));
        let q = tape.add_row(q, lease.id(self.bq));
        let k = tape.matmul(x, lease.id(self.wk));
        let k = tape.add_row(k, lease.id(self.bk));
        let v = tape.matmul(x, lease.id(self.wv));
        let v = tape.add_row(v, lease.id(self.bv));

        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let attn = tape.masked_softmax(scores, Rc::clone(mask));
            head_outs.push(tape.matmul(attn, vh));
        }
        let cat = tape.concat_cols(&head_outs);
        let proj = tape.matmul(cat, lease.id(self.wo));
        let proj = tape.add_row(proj, lease.id(self.bo));
        let proj = dropout.apply(tape, proj);
        let res = tape.add(x, proj);
        let x1 = tape.layer_norm(res, lease.id(self.ln1_gamma), lease.id(self.ln1_beta));

        let ff = tape.matmul(x1, lease.id(self.w1));
        let ff = tape.add_row(ff, lease.id(self.b1));
        let ff = match cfg.activation {
            Activation::Gelu => tape.gelu(ff),
            Activation::Relu => tape.relu(ff),
        };
        let ff = tape.matmul(ff, lease.id(self.w2));
        let ff = tape.add_row(ff, lease.id(self.b2));
        let ff = dropout.apply(tape, ff);
        let res2 = tape.add(x1, ff);
        tape.layer_norm(res2, lease.id(self.ln2_gamma), lease.id(self.ln2_beta))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct HeadParams {
    pooler_w: ParamId,
    pooler_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl HeadParams {
    fn init(params: &mut ParamSet, prefix: &str, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.model_dim;
        let k = cfg.num_classes;
        HeadParams {
            pooler_w: params.add(format!("{prefix}pooler.w"), Tensor::randn(vec![d, d], INIT_STD, rng)),
            pooler_b: params.add(format!("{prefix}pooler.b"), Tensor::zeros(vec![d])),
            head_w: params.add(format!("{prefix}head.w"), Tensor::randn(vec![d, k], INIT_STD, rng)),
            head_b: params.add(format!("{prefix}head.b"), Tensor::zeros(vec![k])),
        }
    }

    /// pooled [1, d] -> probability vector [1, K]
    fn forward(&self, tape: &mut Tape, lease: &Lease, pooled: TensorId) -> TensorId {
        let t = tape.matmul(pooled, lease.id(self.pooler_w));
        let t = tape.add_row(t, lease.id(self.pooler_b));
        let t = tape.tanh(t);
        let logits = tape.matmul(t, lease.id(self.head_w));
        let logits = tape.add_row(logits, lease.id(self.head_b));
        tape.softmax(logits)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct EmbeddingParams {
    token: ParamId,
    pos: ParamId,
}

impl EmbeddingParams {
    fn init(params: &mut ParamSet, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        EmbeddingParams {
            token: params.add(
                "embed.token",
                Tensor::randn(vec![cfg.vocab_size, cfg.model_dim], INIT_STD, rng),
            ),
            pos: params.add(
                "embed.pos",
                Tensor::randn(vec![cfg.max_seq_len, cfg.model_dim], INIT_STD, rng),
            ),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        lease: &Lease,
        tokens: &[usize],
        cfg: &EncoderConfig,
        dropout: &mut Dropout,
    ) -> TensorId {
        assert!(!tokens.is_empty(), "encode: empty token sequence");
        assert!(tokens.len() <= cfg.max_seq_len, "encode: sequence longer than max_seq_len");
        for &t in tokens {
            assert!(t < cfg.vocab_size, "encode: token id {t} out of range");
        }
        let tok = tape.gather_rows(lease.id(self.token), Rc::new(tokens.to_vec()));
        let pos = tape.gather_rows(lease.id(self.pos), Rc::new((0..tokens.len()).collect()));
        let sum = tape.add(tok, pos);
        dropout.apply(tape, sum)
    }
}

pub(crate) fn padding_mask(tokens: &[usize]) -> Rc<Vec<bool>> {
    Rc::new(tokens.iter().map(|&t| t != PAD_ID).collect())
}

// ── Single-tower classifier ──────────────────────────────────────────

/// Transformer encoder classifier: embedding, L attention blocks, pooler,
/// softmax head.
pub struct TransformerClassifier {
    pub config: EncoderConfig,
    pub params: ParamSet,
    embedding: EmbeddingParams,
    blocks: Vec<BlockParams>,
    head: HeadParams,
}

impl TransformerClassifier {
    pub fn new(config: EncoderConfig, seed: u64) -> Self {
        config.validate().expect("invalid encoder config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let embedding = EmbeddingParams::init(&mut params, &config, &mut rng);
        let blocks = (0..config.num_blocks)
            .map(|i| BlockParams::init(&mut params, &format!("blocks.{i}"), &config, &mut rng))
            .collect();
        let head = HeadParams::init(&mut params, "", &config, &mut rng);
        TransformerClassifier { config, params, embedding, blocks, head }
    }

    /// Re-initialize the pooler and head from a fresh seed, leaving the
    /// body untouched (shared-body deep-ensemble mode).
    pub fn reinit_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.model_dim;
        let k = self.config.num_classes;
        self.params.get_mut(self.head.pooler_w).value = Tensor::randn(vec![d, d], INIT_STD, &mut rng);
        self.params.get_mut(self.head.pooler_b).value = Tensor::zeros(vec![d]);
        self.params.get_mut(self.head.head_w).value = Tensor::randn(vec![d, k], INIT_STD, &mut rng);
        self.params.get_mut(self.head.head_b).value = Tensor::zeros(vec![k]);
    }

    /// Pooled classification embedding: the first-position vector of the
    /// last attention block's output, shape [1, model_dim].
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        lease: &Lease,
        tokens: &[usize],
        dropout: &mut Dropout,
    ) -> TensorId {
        let mut x = self.embedding.forward(tape, lease, tokens, &self.config, dropout);
        let mask = padding_mask(tokens);
        for block in &self.blocks {
            x = block.forward(tape, lease, x, &mask, &self.config, dropout);
        }
        tape.select_row(x, 0)
    }

    /// Softmax head over a pooled embedding, shape [1, num_classes].
    pub fn classify_on_tape(&self, tape: &mut Tape, lease: &Lease, pooled: TensorId) -> TensorId {
        assert_eq!(
            tape.value(pooled).numel(),
            self.config.model_dim,
            "classify: embedding dimension mismatch"
        );
        self.head.forward(tape, lease, pooled)
    }

    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        lease: &Lease,
        tokens: &[usize],
        dropout: &mut Dropout,
    ) -> TensorId {
        let pooled = self.encode_on_tape(tape, lease, tokens, dropout);
        self.classify_on_tape(tape, lease, pooled)
    }

    /// Deterministic pooled embedding (dropout off).
    pub fn encode(&self, tokens: &[usize]) -> Vec<f64> {
        let mut tape = Tape::new();
        let lease = Lease::new(&mut tape, &self.params);
        let pooled = self.encode_on_tape(&mut tape, &lease, tokens, &mut Dropout::Off);
        tape.value(pooled).data.clone()
    }

    /// Classify a pooled embedding (deterministic).
    pub fn classify(&self, embedding: &[f64]) -> Prediction {
        assert_eq!(embedding.len(), self.config.model_dim, "classify: embedding dimension mismatch");
        let mut tape = Tape::new();
        let lease = Lease::new(&mut tape, &self.params);
        let pooled = tape.constant(Tensor::new(vec![1, self.config.model_dim], embedding.to_vec()));
        let probs = self.classify_on_tape(&mut tape, &lease, pooled);
        Prediction::from_probs(tape.value(probs).data.clone())
    }

    /// Deterministic prediction (dropout off).
    pub fn forward(&self, tokens: &[usize]) -> Prediction {
        let mut tape = Tape::new();
        let lease = Lease::new(&mut tape, &self.params);
        let probs = self.forward_on_tape(&mut tape, &lease, tokens, &mut Dropout::Off);
        Prediction::from_probs(tape.value(probs).data.clone())
    }

    /// Stochastic prediction with dropout active (MC-dropout member pass).
    pub fn forward_stochastic(&self, tokens: &[usize], rate: f64, rng: &mut ChaCha8Rng) -> Prediction {
        let mut tape = Tape::new();
        let lease = Lease::new(&mut tape, &self.params);
        let mut dropout = Dropout::Active { rate, rng };
        let probs = self.forward_on_tape(&mut tape, &lease, tokens, &mut dropout);
        Prediction::from_probs(tape.value(probs).data.clone())
    }

    /// Name prefix of the block feeding the classification head; the
    /// default scope for weight-norm tracking.
    pub fn penultimate_prefix(&self) -> String {
        format!("blocks.{}.", self.config.num_blocks - 1)
    }
}
