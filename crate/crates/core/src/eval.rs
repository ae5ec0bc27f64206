//! Corpus BLEU, test-set evaluation of generated assistant turns, and
//! interpolation-weight sweeps.

use std::collections::HashMap;
use std::hash::Hash;

use serde::Serialize;

use crate::corpus::{encode_dialog, Dialog, Speaker, TokenId, Vocabulary};
use crate::decoder::{generate_turn, GenerationConfig, MetadataMode, Retriever};
use crate::error::{Error, Result};
use crate::lm::ContextModel;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BleuOptions {
    /// Replace zero-match precisions by `1 / (2^i · possible)`, as in the
    /// tensor2tensor script. Off by default.
    pub smooth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BleuReport {
    /// 0–100.
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU-4 with clipped n-gram counts and brevity penalty.
pub fn bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuReport> {
    bleu_with(hypotheses, references, BleuOptions::default())
}

pub fn bleu_with<T: Eq + Hash>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    opts: BleuOptions,
) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::Validation(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::Empty("BLEU over zero sentence pairs".into()));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut possible = [0usize; MAX_ORDER];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(gram).copied().unwrap_or(0));
            }
            possible[n - 1] += h.len().saturating_sub(n - 1);
        }
    }

    let mut precisions = [0.0; MAX_ORDER];
    let mut smooth = 1.0;
    for i in 0..MAX_ORDER {
        if possible[i] == 0 {
            continue;
        }
        precisions[i] = if matches[i] > 0 || !opts.smooth {
            matches[i] as f64 / possible[i] as f64
        } else {
            smooth *= 2.0;
            1.0 / (smooth * possible[i] as f64)
        };
    }

    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let bleu = if precisions.iter().all(|&p| p > 0.0) {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        brevity_penalty * log_mean.exp() * 100.0
    } else {
        0.0
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One scorable assistant turn: its generated and reference word sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTurn {
    pub dialog_id: String,
    pub turn_number: usize,
    pub generated: Vec<TokenId>,
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: BleuReport,
    pub turns: Vec<ScoredTurn>,
}

/// Generates every assistant turn that directly follows a user turn and
/// scores the results against the reference text with corpus BLEU.
/// Special and metadata tokens are stripped from generated output.
pub fn evaluate<M: ContextModel>(
    model: &M,
    retriever: &Retriever<'_>,
    dialogs: &[Dialog],
    vocab: &Vocabulary,
    with_metadata: bool,
    cfg: &GenerationConfig,
) -> Result<EvalOutcome> {
    let mut turns = Vec::new();
    for d in dialogs {
        let enc = encode_dialog(d, vocab, with_metadata);
        let spans = enc.turn_spans();
        for i in 1..spans.len() {
            if spans[i].speaker != Speaker::Assistant || spans[i - 1].speaker != Speaker::User {
                continue;
            }
            let start = spans[i].start;
            let forced: &[TokenId] = match cfg.metadata_mode {
                MetadataMode::Generated => &[],
                MetadataMode::TeacherForced => {
                    let n = if with_metadata { 3 } else { 1 };
                    &enc.tokens[start..start + n]
                }
            };
            let gen = generate_turn(model, retriever, &enc.tokens[..start], forced, cfg)?;
            let hypothesis = gen
                .tokens
                .iter()
                .filter(|&&t| !vocab.is_reserved(t))
                .filter_map(|&t| vocab.token(t).map(str::to_owned))
                .collect();
            turns.push(ScoredTurn {
                dialog_id: d.id.clone(),
                turn_number: d.turns[i].turn_number,
                generated: gen.tokens,
                hypothesis,
                reference: d.turns[i].words(),
            });
        }
    }
    if turns.is_empty() {
        return Err(Error::Empty("no assistant turn follows a user turn".into()));
    }
    let hyps: Vec<Vec<String>> = turns.iter().map(|t| t.hypothesis.clone()).collect();
    let refs: Vec<Vec<String>> = turns.iter().map(|t| t.reference.clone()).collect();
    let report = bleu(&hyps, &refs)?;
    Ok(EvalOutcome { report, turns })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestsetReport {
    pub bleu_mean: f64,
    pub bleu_std: f64,
    pub run_bleu: Vec<f64>,
    pub n_turns: usize,
}

impl TestsetReport {
    pub fn from_runs(run_bleu: Vec<f64>, n_turns: usize) -> Self {
        let (bleu_mean, bleu_std) = mean_std(&run_bleu);
        Self {
            bleu_mean,
            bleu_std,
            run_bleu,
            n_turns,
        }
    }
}

/// Repeats [`evaluate`] `runs` times over fixed artifacts. Generation is
/// greedy, so runs agree and the standard deviation is zero; run-to-run
/// variance comes from retraining with different seeds (see the pipeline).
pub fn evaluate_testset<M: ContextModel>(
    model: &M,
    retriever: &Retriever<'_>,
    test: &[Dialog],
    vocab: &Vocabulary,
    with_metadata: bool,
    cfg: &GenerationConfig,
    runs: usize,
) -> Result<TestsetReport> {
    if runs == 0 {
        return Err(Error::Config("runs must be positive".into()));
    }
    let mut scores = Vec::with_capacity(runs);
    let mut n_turns = 0;
    for _ in 0..runs {
        let out = evaluate(model, retriever, test, vocab, with_metadata, cfg)?;
        n_turns = out.turns.len();
        scores.push(out.report.bleu);
    }
    Ok(TestsetReport::from_runs(scores, n_turns))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub points: Vec<(f64, f64)>,
    pub best_lambda: f64,
    pub best_bleu: f64,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,bleu\n");
        for (l, b) in &self.points {
            s.push_str(&format!("{l},{b}\n"));
        }
        s
    }

    pub fn bleu_at(&self, lambda: f64) -> Option<f64> {
        self.points.iter().find(|(l, _)| *l == lambda).map(|&(_, b)| b)
    }
}

/// The default sweep grid 0.0, 0.1, …, 1.0.
pub fn default_lambdas() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// BLEU at each λ (strictly increasing, within [0, 1]). The best λ is the
/// smallest one reaching the maximum BLEU.
pub fn sweep_lambda<M: ContextModel>(
    model: &M,
    retriever: &Retriever<'_>,
    dev: &[Dialog],
    vocab: &Vocabulary,
    with_metadata: bool,
    base: &GenerationConfig,
    lambdas: &[f64],
) -> Result<SweepResult> {
    if lambdas.is_empty() {
        return Err(Error::Config("empty lambda list".into()));
    }
    if lambdas.windows(2).any(|w| w[1] <= w[0]) || lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
        return Err(Error::Config("lambdas must be strictly increasing within [0, 1]".into()));
    }
    let mut points = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let cfg = GenerationConfig {
            lambda,
            ..base.clone()
        };
        let out = evaluate(model, retriever, dev, vocab, with_metadata, &cfg)?;
        log::info!("lambda {lambda}: BLEU {:.3}", out.report.bleu);
        points.push((lambda, out.report.bleu));
    }
    let (best_lambda, best_bleu) = points
        .iter()
        .copied()
        .fold((f64::NAN, f64::NEG_INFINITY), |best, p| if p.1 > best.1 { p } else { best });
    Ok(SweepResult {
        points,
        best_lambda,
        best_bleu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn identical_is_100() {
        let r = bleu(&[toks("the cat sat on the mat")], &[toks("the cat sat on the mat")]).unwrap();
        assert!((r.bleu - 100.0).abs() < 1e-9);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn empty_hypothesis_is_zero() {
        let r = bleu(&[vec![]], &[toks("a b c d")]).unwrap();
        assert_eq!(r.bleu, 0.0);
        assert_eq!(r.hyp_len, 0);
    }

    #[test]
    fn brevity_penalty_case() {
        let r = bleu(&[toks("a b c d")], &[toks("a b c d e")]).unwrap();
        assert_eq!(r.precisions, [1.0; 4]);
        let bp = (1.0f64 - 5.0 / 4.0).exp();
        assert!((r.brevity_penalty - bp).abs() < 1e-12);
        assert!((r.bleu - 77.8800783).abs() < 1e-4);
    }

    #[test]
    fn clipping_limits_repeated_ngrams() {
        let r = bleu(&[toks("the the the the")], &[toks("the cat on the mat")]).unwrap();
        assert!((r.precisions[0] - 0.5).abs() < 1e-12);
        assert_eq!(r.bleu, 0.0);
    }

    #[test]
    fn smoothing_only_affects_zero_matches() {
        let h = [toks("a b x d")];
        let rf = [toks("a b c d")];
        assert_eq!(bleu(&h, &rf).unwrap().bleu, 0.0);
        let s = bleu_with(&h, &rf, BleuOptions { smooth: true }).unwrap();
        assert!(s.bleu > 0.0 && s.bleu < 100.0);
        assert!((s.precisions[2] - 1.0 / (2.0 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_errors() {
        assert!(bleu(&[toks("a")], &[]).is_err());
        assert!(bleu::<String>(&[], &[]).is_err());
    }

    #[test]
    fn mean_and_sample_std() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
