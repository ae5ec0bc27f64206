mod common;

use dialog_knn::corpus::{build_vocabulary, encode_dialog, Dialog, EncodedDialog, Vocabulary};
use dialog_knn::datastore::{build, BuildOptions};
use dialog_knn::decoder::{GenerationConfig, IndexMode, Retriever};
use dialog_knn::eval::{bleu, bleu_with, evaluate, evaluate_testset, mean_std, sweep_lambda, BleuOptions};
use dialog_knn::lm::{train, LmConfig, Model, TrainOptions};
use dialog_knn::Error;
use proptest::prelude::*;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

fn corpus(pairs: &[(&str, &str)]) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    pairs.iter().map(|(h, r)| (words(h), words(r))).unzip()
}

#[test]
fn identical_text_scores_one_hundred() {
    let (h, r) = corpus(&[("a b c d", "a b c d")]);
    let rep = bleu(&h, &r).unwrap();
    assert_eq!(rep.bleu, 100.0);
    assert_eq!(rep.brevity_penalty, 1.0);
}

#[test]
fn empty_hypothesis_scores_zero() {
    let (h, r) = corpus(&[("", "a b c d")]);
    let rep = bleu(&h, &r).unwrap();
    assert_eq!(rep.bleu, 0.0);
    assert_eq!(rep.brevity_penalty, 0.0);
}

#[test]
fn short_hypothesis_pays_the_brevity_penalty() {
    let (h, r) = corpus(&[("a b c d", "a b c d e")]);
    let rep = bleu(&h, &r).unwrap();
    assert_eq!(rep.precisions, [1.0; 4]);
    let bp = (1.0f64 - 5.0 / 4.0).exp();
    assert!((rep.brevity_penalty - bp).abs() < 1e-12);
    assert!((rep.bleu - 77.8801).abs() < 1e-4, "{}", rep.bleu);
}

#[test]
fn corpus_level_counts_pool_across_sentences() {
    // Clipped matches / hypothesis n-grams, counted by hand:
    // 1-grams 5/6 + 4/4, 2-grams 3/5 + 3/3, 3-grams 1/4 + 2/2, 4-grams 0/3 + 1/1.
    let (h, r) = corpus(&[("the cat sat on the mat", "the cat is on the mat"), ("a b c d", "a b c d")]);
    let rep = bleu(&h, &r).unwrap();
    let p = [9.0 / 10.0, 6.0 / 8.0, 3.0 / 6.0, 1.0 / 4.0];
    for (got, want) in rep.precisions.iter().zip(p) {
        assert!((got - want).abs() < 1e-12);
    }
    let want = 100.0 * (p[0] * p[1] * p[2] * p[3]).powf(0.25);
    assert!((rep.bleu - want).abs() < 1e-4);
    assert!((rep.bleu - 53.8956).abs() < 1e-4, "{}", rep.bleu);
}

#[test]
fn repeated_words_are_clipped_by_reference_counts() {
    let (h, r) = corpus(&[("the the the the", "the cat")]);
    let rep = bleu(&h, &r).unwrap();
    assert_eq!(rep.precisions[0], 0.25);
    assert_eq!(rep.bleu, 0.0);
}

#[test]
fn smoothing_only_changes_zero_precisions() {
    let (h, r) = corpus(&[("the cat sat on the mat", "the cat is on the mat")]);
    let plain = bleu(&h, &r).unwrap();
    let smooth = bleu_with(&h, &r, BleuOptions { smooth: true }).unwrap();
    assert_eq!(plain.bleu, 0.0);
    assert_eq!(&smooth.precisions[..3], &plain.precisions[..3]);
    assert!((smooth.precisions[3] - 1.0 / (2.0 * 3.0)).abs() < 1e-12);
    assert!(smooth.bleu > 0.0);
}

#[test]
fn mismatched_or_empty_inputs_are_errors() {
    let (h, r) = corpus(&[("a", "a")]);
    assert!(matches!(bleu(&h, &[]), Err(Error::Validation(_))));
    let none: Vec<Vec<String>> = Vec::new();
    assert!(matches!(bleu(&none, &none), Err(Error::Empty(_))));
    assert!(bleu(&h, &r).is_ok());
}

#[test]
fn mean_and_sample_std() {
    assert_eq!(mean_std(&[3.0, 3.0, 3.0]), (3.0, 0.0));
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
}

struct Trained {
    dialogs: Vec<Dialog>,
    vocab: Vocabulary,
    enc: Vec<EncodedDialog>,
    model: Model,
}

fn trained(n: usize, steps: usize) -> Trained {
    let dialogs = common::memorization_corpus(n, 12);
    let vocab = build_vocabulary(&dialogs, 1000, 1).unwrap();
    let enc: Vec<EncodedDialog> = dialogs.iter().map(|d| encode_dialog(d, &vocab, false)).collect();
    let cfg = LmConfig {
        d_model: 16,
        d_inner: 32,
        n_heads: 2,
        vocab_size: vocab.len(),
        ..LmConfig::default()
    };
    let opt = TrainOptions {
        max_steps: steps,
        eval_every: steps,
        ..TrainOptions::default()
    };
    let (model, _) = train(&enc, &enc, cfg, &opt).unwrap();
    Trained { dialogs, vocab, enc, model }
}

#[test]
fn repeated_runs_over_fixed_artifacts_have_zero_spread() {
    let t = trained(8, 20);
    let ds = build(&t.model, t.model.hash(), &t.enc, BuildOptions::default()).unwrap();
    let cfg = GenerationConfig {
        max_new_tokens: 20,
        ..GenerationConfig::default()
    };
    let rep = evaluate_testset(&t.model, &Retriever::Flat(&ds), &t.dialogs, &t.vocab, false, &cfg, 3).unwrap();
    assert_eq!(rep.run_bleu.len(), 3);
    assert_eq!(rep.bleu_std, 0.0);
    assert!(rep.run_bleu.iter().all(|&b| b == rep.bleu_mean));
    assert!(rep.n_turns >= t.dialogs.len());
}

#[test]
fn sweep_at_zero_equals_lm_only_bleu() {
    let t = trained(8, 20);
    let ds = build(&t.model, t.model.hash(), &t.enc, BuildOptions::default()).unwrap();
    let base = GenerationConfig {
        max_new_tokens: 20,
        ..GenerationConfig::default()
    };
    let sweep = sweep_lambda(&t.model, &Retriever::Flat(&ds), &t.dialogs, &t.vocab, false, &base, &[0.0]).unwrap();
    let lm_only = GenerationConfig {
        index_mode: IndexMode::LmOnly,
        ..base
    };
    let lm = evaluate(&t.model, &Retriever::LmOnly, &t.dialogs, &t.vocab, false, &lm_only).unwrap();
    assert_eq!(sweep.points, vec![(0.0, lm.report.bleu)]);
    assert_eq!(sweep.best_lambda, 0.0);
}

#[test]
fn memorized_corpus_bleu_does_not_fall_as_lambda_grows() {
    let t = trained(10, 40);
    let ds = build(&t.model, t.model.hash(), &t.enc, BuildOptions::default()).unwrap();
    let base = GenerationConfig {
        k: 1,
        max_new_tokens: 24,
        ..GenerationConfig::default()
    };
    let sweep = sweep_lambda(&t.model, &Retriever::Flat(&ds), &t.dialogs, &t.vocab, false, &base, &[0.0, 0.5, 1.0]).unwrap();
    let b: Vec<f64> = sweep.points.iter().map(|p| p.1).collect();
    assert!(b[0] <= b[1] && b[1] <= b[2], "{b:?}");
    assert_eq!(b[2], 100.0);
    assert_eq!(sweep.best_lambda, sweep.points.iter().find(|p| p.1 == sweep.best_bleu).unwrap().0);
    assert!(sweep.to_csv().starts_with("lambda,bleu\n0,"));
    assert_eq!(sweep.to_csv().lines().count(), 4);
}

#[test]
fn sweep_rejects_bad_grids() {
    let t = trained(4, 5);
    let base = GenerationConfig::default();
    for grid in [&[][..], &[0.5, 0.5][..], &[0.6, 0.2][..], &[0.0, 1.5][..]] {
        let r = sweep_lambda(&t.model, &Retriever::LmOnly, &t.dialogs, &t.vocab, false, &base, grid);
        assert!(matches!(r, Err(Error::Config(_))), "{grid:?}");
    }
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "f", "g"]), 0..12)
        .prop_map(|v| v.into_iter().map(str::to_owned).collect())
}

fn nonempty_corpus() -> impl Strategy<Value = Vec<Vec<String>>> {
    (prop::collection::vec(sentence(), 0..10), prop::collection::vec(prop::sample::select(vec!["x", "y"]), 4..8)).prop_map(
        |(mut c, long)| {
            c.push(long.into_iter().map(str::to_owned).collect());
            c
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn self_bleu_is_one_hundred(c in nonempty_corpus()) {
        prop_assert_eq!(bleu(&c, &c).unwrap().bleu, 100.0);
    }

    #[test]
    fn bleu_is_bounded_and_order_free(h in prop::collection::vec(sentence(), 1..8), r in prop::collection::vec(sentence(), 1..8)) {
        let n = h.len().min(r.len());
        let (h, r) = (&h[..n], &r[..n]);
        let rep = bleu(h, r).unwrap();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&rep.bleu));
        let hr: Vec<Vec<String>> = h.iter().rev().cloned().collect();
        let rr: Vec<Vec<String>> = r.iter().rev().cloned().collect();
        prop_assert!((bleu(&hr, &rr).unwrap().bleu - rep.bleu).abs() < 1e-9);
    }
}
