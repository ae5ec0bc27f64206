//! Small causal transformer LM with segment-level recurrence memory.
//!
//! Architecture (pre-norm): per block `x1 = x + Attn(LN1(x))`,
//! `x2 = x1 + FFN(LN2(x1))`; output `softmax(LNf(x) · W_out + b_out)`.
//! Attention carries a learned per-head bias indexed by relative distance.
//!
//! Tokens are processed in segments of `segment_len`. A position `p` in the
//! segment starting at `s` attends to itself, to earlier positions of its
//! segment, and to the last `mem_len` positions before `s` (the memory).
//! The context embedding f(c) is `x1` of the final block: the residual
//! stream entering its feedforward sublayer.

pub mod checkpoint;
pub mod ops;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::Hash;
use crate::corpus::TokenId;
use crate::error::{Error, Result};

pub use train::{perplexity, train, TrainLog, TrainLogRow, TrainOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct LmConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub segment_len: usize,
    pub mem_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 64,
            d_inner: 256,
            segment_len: 32,
            mem_len: 32,
            dropout: 0.0,
            vocab_size: 0,
            seed: 0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_inner", self.d_inner),
            ("segment_len", self.segment_len),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Number of distinct relative distances a query can see.
    pub fn window(&self) -> usize {
        self.mem_len + self.segment_len
    }

    /// First position attended to by position `p`.
    pub fn window_start(&self, p: usize) -> usize {
        let seg_start = (p / self.segment_len) * self.segment_len;
        seg_start.saturating_sub(self.mem_len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub wo: Vec<f64>,
    /// `[n_heads × window]`, indexed by query position minus key position.
    pub rel_bias: Vec<f64>,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub tok_emb: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    pub out_w: Vec<f64>,
    pub out_b: Vec<f64>,
}

impl Weights {
    /// Canonical tensor names and shapes, in storage order.
    pub fn layout(cfg: &LmConfig) -> Vec<(String, Vec<usize>)> {
        let (d, di, v) = (cfg.d_model, cfg.d_inner, cfg.vocab_size);
        let mut out = vec![("tok_emb".to_string(), vec![v, d])];
        for l in 0..cfg.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            out.extend([
                (p("ln1.g"), vec![d]),
                (p("ln1.b"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("attn.rel_bias"), vec![cfg.n_heads, cfg.window()]),
                (p("ln2.g"), vec![d]),
                (p("ln2.b"), vec![d]),
                (p("ff.w1"), vec![d, di]),
                (p("ff.b1"), vec![di]),
                (p("ff.w2"), vec![di, d]),
                (p("ff.b2"), vec![d]),
            ]);
        }
        out.extend([
            ("lnf.g".to_string(), vec![d]),
            ("lnf.b".to_string(), vec![d]),
            ("out.w".to_string(), vec![d, v]),
            ("out.b".to_string(), vec![v]),
        ]);
        out
    }

    pub fn zeros(cfg: &LmConfig) -> Self {
        let (d, di, v) = (cfg.d_model, cfg.d_inner, cfg.vocab_size);
        let layer = LayerWeights {
            ln1_g: vec![0.0; d],
            ln1_b: vec![0.0; d],
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            rel_bias: vec![0.0; cfg.n_heads * cfg.window()],
            ln2_g: vec![0.0; d],
            ln2_b: vec![0.0; d],
            w1: vec![0.0; d * di],
            b1: vec![0.0; di],
            w2: vec![0.0; di * d],
            b2: vec![0.0; d],
        };
        Weights {
            tok_emb: vec![0.0; v * d],
            layers: vec![layer; cfg.n_layers],
            lnf_g: vec![0.0; d],
            lnf_b: vec![0.0; d],
            out_w: vec![0.0; d * v],
            out_b: vec![0.0; v],
        }
    }

    /// Seeded initialization. Matrices are uniform in ±1/√fan_in, layer-norm
    /// gains are one, everything else zero. Values are f32-representable.
    pub fn init(cfg: &LmConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut w = Self::zeros(cfg);
        let mut fill = |t: &mut Vec<f64>, fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            for x in t.iter_mut() {
                *x = rng.gen_range(-a..a);
            }
        };
        let (d, di) = (cfg.d_model, cfg.d_inner);
        fill(&mut w.tok_emb, 1);
        for l in &mut w.layers {
            fill(&mut l.wq, d);
            fill(&mut l.wk, d);
            fill(&mut l.wv, d);
            fill(&mut l.wo, d);
            fill(&mut l.w1, d);
            fill(&mut l.w2, di);
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
        }
        fill(&mut w.out_w, d);
        w.lnf_g.fill(1.0);
        w.round_to_f32();
        w
    }

    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut out = vec![&self.tok_emb];
        for l in &self.layers {
            out.extend([
                &l.ln1_g, &l.ln1_b, &l.wq, &l.wk, &l.wv, &l.wo, &l.rel_bias, &l.ln2_g, &l.ln2_b,
                &l.w1, &l.b1, &l.w2, &l.b2,
            ]);
        }
        out.extend([&self.lnf_g, &self.lnf_b, &self.out_w, &self.out_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.tok_emb];
        for l in &mut self.layers {
            out.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.rel_bias,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.extend([
            &mut self.lnf_g,
            &mut self.lnf_b,
            &mut self.out_w,
            &mut self.out_b,
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// P_LM over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDistribution(pub Vec<f64>);

impl NextTokenDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.0
    }
}

/// f(c): fixed-length context vector used as datastore key and query.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbedding(pub Vec<f32>);

impl ContextEmbedding {
    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOutput {
    pub distributions: Vec<NextTokenDistribution>,
    pub embeddings: Vec<ContextEmbedding>,
}

/// A causal LM that exposes per-position next-token distributions and
/// context embeddings, with explicit resettable state.
pub trait ContextModel {
    type State;

    fn vocab_size(&self) -> usize;
    fn embedding_dim(&self) -> usize;
    fn reset_state(&self) -> Self::State;
    fn forward(&self, tokens: &[TokenId], state: &mut Self::State) -> Result<ForwardOutput>;
}

/// Per-layer attention keys/values for the positions still visible to the
/// next query: the memory plus the processed part of the current segment.
#[derive(Debug, Clone, PartialEq)]
pub struct LmState {
    pos: usize,
    start: usize,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    d_model: usize,
}

impl LmState {
    pub fn new(cfg: &LmConfig) -> Self {
        Self {
            pos: 0,
            start: 0,
            keys: vec![Vec::new(); cfg.n_layers],
            values: vec![Vec::new(); cfg.n_layers],
            d_model: cfg.d_model,
        }
    }

    /// Tokens processed since the last reset.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Number of cached positions per layer.
    pub fn cached(&self) -> usize {
        self.pos - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }

    fn evict_before(&mut self, ws: usize) {
        if ws <= self.start {
            return;
        }
        let drop = (ws - self.start) * self.d_model;
        for k in self.keys.iter_mut().chain(self.values.iter_mut()) {
            k.drain(..drop);
        }
        self.start = ws;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: LmConfig,
    pub weights: Weights,
}

/// Attention for one query row over `n` contiguous key/value rows whose first
/// row sits `first_dist` positions behind the query. Writes per-head
/// probabilities (`n_heads × n`) and the context vector.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend_row(
    cfg: &LmConfig,
    rel_bias: &[f64],
    q: &[f64],
    keys: &[f64],
    values: &[f64],
    first_dist: usize,
    probs: &mut [f64],
    ctx: &mut [f64],
) {
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let n = keys.len() / d;
    let scale = 1.0 / (dh as f64).sqrt();
    let w = cfg.window();
    ctx.fill(0.0);
    for h in 0..cfg.n_heads {
        let qh = &q[h * dh..(h + 1) * dh];
        let ph = &mut probs[h * n..(h + 1) * n];
        for (j, p) in ph.iter_mut().enumerate() {
            let kj = &keys[j * d + h * dh..j * d + (h + 1) * dh];
            *p = ops::dot(qh, kj) * scale + rel_bias[h * w + (first_dist - j)];
        }
        ops::softmax_in_place(ph);
        let ch = &mut ctx[h * dh..(h + 1) * dh];
        for (j, &p) in ph.iter().enumerate() {
            let vj = &values[j * d + h * dh..j * d + (h + 1) * dh];
            for (c, &v) in ch.iter_mut().zip(vj) {
                *c += p * v;
            }
        }
    }
}

impl Model {
    pub fn new(config: LmConfig) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config);
        Ok(Self { config, weights })
    }

    pub fn from_weights(config: LmConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        let expected = Weights::layout(&config);
        let got = weights.tensors();
        if got.len() != expected.len()
            || got
                .iter()
                .zip(&expected)
                .any(|(t, (_, shape))| t.len() != shape.iter().product::<usize>())
        {
            return Err(Error::Config("weights do not match the model config".into()));
        }
        Ok(Self { config, weights })
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> Hash {
        crate::binio::sha256(&checkpoint::to_bytes(self))
    }

    /// Processes one token at the state's current position.
    fn step(&self, token: TokenId, state: &mut LmState) -> Result<(NextTokenDistribution, ContextEmbedding)> {
        let cfg = &self.config;
        let d = cfg.d_model;
        if token as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab_size: cfg.vocab_size,
            });
        }
        let p = state.pos;
        state.evict_before(cfg.window_start(p));
        let n = p - state.start + 1;

        let t = token as usize;
        let mut x = self.weights.tok_emb[t * d..(t + 1) * d].to_vec();
        let mut probs = vec![0.0; cfg.n_heads * n];
        let mut ctx = vec![0.0; d];
        let mut embedding = Vec::new();
        for (li, lw) in self.weights.layers.iter().enumerate() {
            let (a, _, _) = ops::layer_norm(&x, d, &lw.ln1_g, &lw.ln1_b);
            let q = ops::matmul(&a, 1, d, &lw.wq, d);
            let k = ops::matmul(&a, 1, d, &lw.wk, d);
            let v = ops::matmul(&a, 1, d, &lw.wv, d);
            state.keys[li].extend_from_slice(&k);
            state.values[li].extend_from_slice(&v);
            attend_row(
                cfg,
                &lw.rel_bias,
                &q,
                &state.keys[li],
                &state.values[li],
                n - 1,
                &mut probs,
                &mut ctx,
            );
            let attn_out = ops::matmul(&ctx, 1, d, &lw.wo, d);
            ops::add_assign(&mut x, &attn_out);
            if li + 1 == cfg.n_layers {
                embedding = x.iter().map(|&v| v as f32).collect();
            }
            let (b, _, _) = ops::layer_norm(&x, d, &lw.ln2_g, &lw.ln2_b);
            let mut u = ops::matmul(&b, 1, d, &lw.w1, cfg.d_inner);
            ops::add_bias(&mut u, &lw.b1);
            for v in u.iter_mut() {
                *v = ops::gelu(*v);
            }
            let mut ff = ops::matmul(&u, 1, cfg.d_inner, &lw.w2, d);
            ops::add_bias(&mut ff, &lw.b2);
            ops::add_assign(&mut x, &ff);
            if !x.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { layer: li });
            }
        }
        state.pos += 1;

        let (y, _, _) = ops::layer_norm(&x, d, &self.weights.lnf_g, &self.weights.lnf_b);
        let mut logits = ops::matmul(&y, 1, d, &self.weights.out_w, cfg.vocab_size);
        ops::add_bias(&mut logits, &self.weights.out_b);
        ops::softmax_in_place(&mut logits);
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { layer: cfg.n_layers });
        }
        Ok((NextTokenDistribution(logits), ContextEmbedding(embedding)))
    }
}

impl ContextModel for Model {
    type State = LmState;

    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn embedding_dim(&self) -> usize {
        self.config.d_model
    }

    fn reset_state(&self) -> LmState {
        LmState::new(&self.config)
    }

    fn forward(&self, tokens: &[TokenId], state: &mut LmState) -> Result<ForwardOutput> {
        if state.keys.len() != self.config.n_layers || state.d_model != self.config.d_model {
            return Err(Error::DimMismatch {
                expected: self.config.d_model,
                got: state.d_model,
            });
        }
        let mut out = ForwardOutput {
            distributions: Vec::with_capacity(tokens.len()),
            embeddings: Vec::with_capacity(tokens.len()),
        };
        for &t in tokens {
            let (dist, emb) = self.step(t, state)?;
            out.distributions.push(dist);
            out.embeddings.push(emb);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> LmConfig {
        LmConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_inner: 16,
            segment_len: 4,
            mem_len: 3,
            dropout: 0.0,
            vocab_size: 11,
            seed: 3,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = cfg();
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        assert!(cfg().validate().is_ok());
    }

    #[test]
    fn distributions_normalized() {
        let m = Model::new(cfg()).unwrap();
        let mut s = m.reset_state();
        let out = m.forward(&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10], &mut s).unwrap();
        for d in &out.distributions {
            assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!(d.probs().iter().all(|&p| p >= 0.0));
        }
        assert!(out.embeddings.iter().all(|e| e.dim() == 8));
    }

    #[test]
    fn out_of_range_token_rejected() {
        let m = Model::new(cfg()).unwrap();
        let mut s = m.reset_state();
        assert!(matches!(
            m.forward(&[11], &mut s),
            Err(Error::TokenOutOfRange { id: 11, .. })
        ));
    }

    #[test]
    fn attended_history_bounded() {
        let c = cfg();
        let m = Model::new(c.clone()).unwrap();
        let mut s = m.reset_state();
        for i in 0..23u32 {
            m.forward(&[i % 11], &mut s).unwrap();
            assert!(s.cached() <= c.mem_len + c.segment_len);
        }
    }

    #[test]
    fn incremental_equals_batched() {
        let m = Model::new(cfg()).unwrap();
        let toks = [3, 1, 4, 1, 5, 9, 2, 6, 5, 3];
        let mut s = m.reset_state();
        let all = m.forward(&toks, &mut s).unwrap();
        let mut s = m.reset_state();
        let mut one = ForwardOutput::default();
        for &t in &toks {
            let o = m.forward(&[t], &mut s).unwrap();
            one.distributions.extend(o.distributions);
            one.embeddings.extend(o.embeddings);
        }
        assert_eq!(all.distributions, one.distributions);
        assert_eq!(all.embeddings, one.embeddings);
    }

    #[test]
    fn non_finite_weights_reported_with_layer() {
        let mut m = Model::new(cfg()).unwrap();
        m.weights.layers[1].b2[0] = f64::NAN;
        let mut s = m.reset_state();
        assert!(matches!(m.forward(&[1], &mut s), Err(Error::NonFinite { layer: 1 })));
    }
}
