//! Hybrid next-token distribution and greedy assistant-turn generation.
//!
//! At each step the context embedding f(q) of the current prefix queries the
//! datastore. Neighbor scores are a softmax over negative distances; scores of
//! neighbors sharing a target token are summed and scattered into a vocabulary
//! vector P_kNN, and the decoding distribution is
//! `λ·P_kNN + (1 − λ)·P_LM`. The argmax token is appended and the loop
//! repeats until the terminal token or the token budget.

use std::collections::BTreeMap;

use serde_json::json;

use crate::corpus::{special, TokenId};
use crate::datastore::Datastore;
use crate::error::{Error, Result};
use crate::index::{search_flat, search_ivf, IvfIndex, Metric, NeighborSet};
use crate::lm::{ContextEmbedding, ContextModel, NextTokenDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IndexMode {
    #[default]
    Flat,
    Ivf,
    LmOnly,
}

impl std::str::FromStr for IndexMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(IndexMode::Flat),
            "ivf" => Ok(IndexMode::Ivf),
            "lm_only" | "lm-only" | "lm" => Ok(IndexMode::LmOnly),
            other => Err(Error::Config(format!("unknown index mode {other:?}"))),
        }
    }
}

/// Whether assistant-turn metadata tokens are generated or fed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MetadataMode {
    #[default]
    Generated,
    TeacherForced,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationConfig {
    pub lambda: f64,
    pub k: usize,
    pub max_new_tokens: usize,
    pub terminal_token: TokenId,
    pub index_mode: IndexMode,
    pub metric: Metric,
    pub metadata_mode: MetadataMode,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            k: 32,
            max_new_tokens: 64,
            terminal_token: special::EOT,
            index_mode: IndexMode::Flat,
            metric: Metric::L2,
            metadata_mode: MetadataMode::Generated,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} not in [0, 1]", self.lambda)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridDistribution {
    pub p_lm: Vec<f64>,
    /// Equal to `p_lm` when retrieval returned nothing or is disabled.
    pub p_knn: Vec<f64>,
    pub p_final: Vec<f64>,
}

/// Aggregated neighbor scores per token, or `None` for an empty neighbor set.
pub fn knn_scores(neighbors: &NeighborSet) -> Option<BTreeMap<TokenId, f64>> {
    let min = neighbors.iter().map(|n| n.distance).min_by(f64::total_cmp)?;
    let weights: Vec<f64> = neighbors.iter().map(|n| (-(n.distance - min)).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut scores = BTreeMap::new();
    for (n, w) in neighbors.iter().zip(weights) {
        *scores.entry(n.value).or_insert(0.0) += w / total;
    }
    Some(scores)
}

/// Dense P_kNN: aggregated scores at their token ids, zero elsewhere.
pub fn scatter(scores: &BTreeMap<TokenId, f64>, vocab_size: usize) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty("no kNN scores to scatter".into()));
    }
    let sum: f64 = scores.values().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Validation(format!("kNN scores sum to {sum}, expected 1")));
    }
    let mut p = vec![0.0; vocab_size];
    for (&id, &s) in scores {
        let slot = p.get_mut(id as usize).ok_or(Error::TokenOutOfRange { id, vocab_size })?;
        *slot = s;
    }
    Ok(p)
}

fn check_normalized(p: &[f64], what: &str) -> Result<()> {
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-5 || p.iter().any(|&x| x < 0.0) {
        return Err(Error::Validation(format!("{what} is not a distribution (sum {s})")));
    }
    Ok(())
}

/// `λ·p_knn + (1 − λ)·p_lm`.
pub fn interpolate(p_knn: &[f64], p_lm: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda {lambda} not in [0, 1]")));
    }
    if p_knn.len() != p_lm.len() {
        return Err(Error::DimMismatch {
            expected: p_lm.len(),
            got: p_knn.len(),
        });
    }
    check_normalized(p_knn, "p_knn")?;
    check_normalized(p_lm, "p_lm")?;
    Ok(p_knn
        .iter()
        .zip(p_lm)
        .map(|(&a, &b)| lambda * a + (1.0 - lambda) * b)
        .collect())
}

/// Argmax with ties going to the lowest token id.
pub fn argmax(p: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Retrieval backend selected by [`IndexMode`].
#[derive(Debug, Clone, Copy)]
pub enum Retriever<'a> {
    LmOnly,
    Flat(&'a Datastore),
    Ivf(&'a Datastore, &'a IvfIndex),
}

impl<'a> Retriever<'a> {
    pub fn new(mode: IndexMode, ds: Option<&'a Datastore>, idx: Option<&'a IvfIndex>) -> Result<Self> {
        match mode {
            IndexMode::LmOnly => Ok(Retriever::LmOnly),
            IndexMode::Flat => ds
                .map(Retriever::Flat)
                .ok_or_else(|| Error::Config("flat retrieval needs a datastore".into())),
            IndexMode::Ivf => match (ds, idx) {
                (Some(ds), Some(idx)) => Ok(Retriever::Ivf(ds, idx)),
                _ => Err(Error::Config("ivf retrieval needs a datastore and an index".into())),
            },
        }
    }

    pub fn search(&self, query: &[f32], k: usize, metric: Metric) -> Result<NeighborSet> {
        match *self {
            Retriever::LmOnly => Ok(NeighborSet::default()),
            Retriever::Flat(ds) => search_flat(ds, query, k, metric),
            Retriever::Ivf(ds, idx) => search_ivf(idx, ds, query, k, metric),
        }
    }

    fn dim(&self) -> Option<usize> {
        match *self {
            Retriever::LmOnly => None,
            Retriever::Flat(ds) | Retriever::Ivf(ds, _) => Some(ds.dim()),
        }
    }
}

/// Hybrid distribution for one step. Falls back to P_LM when no neighbors
/// are found; the returned flag reports the fallback.
pub fn hybrid_step(
    p_lm: &NextTokenDistribution,
    query: &ContextEmbedding,
    retriever: &Retriever<'_>,
    cfg: &GenerationConfig,
) -> Result<(HybridDistribution, NeighborSet, bool)> {
    let p_lm = p_lm.probs().to_vec();
    let neighbors = retriever.search(query.as_slice(), cfg.k, cfg.metric)?;
    match knn_scores(&neighbors) {
        Some(scores) => {
            let p_knn = scatter(&scores, p_lm.len())?;
            let p_final = interpolate(&p_knn, &p_lm, cfg.lambda)?;
            Ok((HybridDistribution { p_lm, p_knn, p_final }, neighbors, false))
        }
        None => Ok((
            HybridDistribution {
                p_knn: p_lm.clone(),
                p_final: p_lm.clone(),
                p_lm,
            },
            neighbors,
            !matches!(retriever, Retriever::LmOnly),
        )),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    pub chosen: TokenId,
    pub hybrid: HybridDistribution,
    pub neighbors: NeighborSet,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated tokens, including the terminal token when emitted.
    pub tokens: Vec<TokenId>,
    pub trace: Vec<StepTrace>,
}

fn top5(p: &[f64]) -> Vec<(TokenId, f64)> {
    let mut ix: Vec<usize> = (0..p.len()).collect();
    ix.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    ix.into_iter().take(5).map(|i| (i as TokenId, p[i])).collect()
}

impl Generation {
    /// One JSON object per step.
    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.trace {
            let v = json!({
                "step": s.step,
                "chosen_token": s.chosen,
                "p_lm_top5": top5(&s.hybrid.p_lm),
                "p_knn_top5": top5(&s.hybrid.p_knn),
                "neighbor_distances": s.neighbors.distances(),
                "fallback": s.fallback,
            });
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }
}

/// Checks that `prefix` ends with the EOT of a user turn.
fn check_prefix(prefix: &[TokenId]) -> Result<()> {
    if prefix.last() != Some(&special::EOT) {
        return Err(Error::Validation("query prefix must end with an end-of-turn token".into()));
    }
    let opener = prefix
        .iter()
        .rev()
        .find(|&&t| t == special::BOT_USER || t == special::BOT_ASST);
    if opener != Some(&special::BOT_USER) {
        return Err(Error::Validation("query prefix must end with a user turn".into()));
    }
    Ok(())
}

/// Greedily generates the assistant turn following `prefix`.
///
/// `forced` tokens (for example the assistant marker and metadata) are fed
/// after the prefix before generation starts and are not part of the output.
pub fn generate_turn<M: ContextModel>(
    model: &M,
    retriever: &Retriever<'_>,
    prefix: &[TokenId],
    forced: &[TokenId],
    cfg: &GenerationConfig,
) -> Result<Generation> {
    cfg.validate()?;
    check_prefix(prefix)?;
    if let Some(dim) = retriever.dim() {
        if dim != model.embedding_dim() {
            return Err(Error::DimMismatch {
                expected: model.embedding_dim(),
                got: dim,
            });
        }
    }

    let mut state = model.reset_state();
    let mut out = model.forward(prefix, &mut state)?;
    if !forced.is_empty() {
        out = model.forward(forced, &mut state)?;
    }
    let mut p_lm = out.distributions.pop().expect("non-empty prefix");
    let mut query = out.embeddings.pop().expect("non-empty prefix");

    let mut gen = Generation {
        tokens: Vec::new(),
        trace: Vec::new(),
    };
    for step in 0..cfg.max_new_tokens {
        let (hybrid, neighbors, fallback) = hybrid_step(&p_lm, &query, retriever, cfg)?;
        let chosen = argmax(&hybrid.p_final);
        gen.tokens.push(chosen);
        gen.trace.push(StepTrace {
            step,
            chosen,
            hybrid,
            neighbors,
            fallback,
        });
        if chosen == cfg.terminal_token || step + 1 == cfg.max_new_tokens {
            break;
        }
        let mut next = model.forward(&[chosen], &mut state)?;
        p_lm = next.distributions.pop().expect("one token");
        query = next.embeddings.pop().expect("one token");
    }
    Ok(gen)
}
