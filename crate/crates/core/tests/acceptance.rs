//! One PASS/FAIL line per acceptance criterion. Exits non-zero on any FAIL.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dialog_knn::config::RunConfig;
use dialog_knn::corpus::{build_vocabulary, encode_dialog, Dialog, EncodedDialog, Role, Speaker, TokenId};
use dialog_knn::datastore::{build, BuildOptions, Datastore, FilterMode, Provenance};
use dialog_knn::decoder::{interpolate, knn_scores, scatter};
use dialog_knn::eval::bleu;
use dialog_knn::index::{build_ivf, search_flat, search_ivf_probe, Metric, Neighbor, NeighborSet};
use dialog_knn::lm::train::batch_loss_and_grad;
use dialog_knn::lm::{LmConfig, Model, Weights};
use dialog_knn::pipeline::cmd_pipeline;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Criterion = (&'static str, Duration, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("knn-math", Duration::from_secs(1), knn_math),
        ("flat-and-ivf-exactness", Duration::from_secs(30), search_exactness),
        ("gradient-check", Duration::from_secs(60), gradient_check),
        ("state-reset", Duration::from_secs(10), state_reset),
        ("assistant-only-filter", Duration::from_secs(10), assistant_only_filter),
        ("memorization-end-to-end", Duration::from_secs(300), memorization),
        ("bleu", Duration::from_secs(10), bleu_oracle),
        ("pipeline-reproducible", Duration::from_secs(120), reproducible),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = check();
        let elapsed = t.elapsed();
        let pass = o.pass && elapsed < *budget;
        failed += usize::from(!pass);
        println!(
            "{} {} {name}: {} ({:.2}s, limit {}s)",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn neighbors(pairs: &[(f64, TokenId)]) -> NeighborSet {
    NeighborSet(
        pairs
            .iter()
            .enumerate()
            .map(|(i, &(distance, value))| Neighbor {
                entry_index: i,
                distance,
                value,
            })
            .collect(),
    )
}

fn knn_math() -> Outcome {
    let mut worst = 0.0f64;
    let mut err = |got: f64, want: f64| worst = worst.max((got - want).abs());
    let one = knn_scores(&neighbors(&[(3.7, 9)])).unwrap();
    err(one[&9], 1.0);
    let ab = knn_scores(&neighbors(&[(0.0, 1), (3.0f64.ln(), 2)])).unwrap();
    err(ab[&1], 0.75);
    err(ab[&2], 0.25);
    let dup = knn_scores(&neighbors(&[(0.8, 4), (0.8, 4), (0.8, 6)])).unwrap();
    err(dup[&4], 2.0 / 3.0);
    err(dup[&6], 1.0 / 3.0);
    let onehot = scatter(&BTreeMap::from([(3, 1.0)]), 5).unwrap();
    let two = scatter(&BTreeMap::from([(1, 0.25), (4, 0.75)]), 5).unwrap();
    for (got, want) in onehot.iter().chain(&two).zip([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.25, 0.0, 0.0, 0.75]) {
        err(*got, want);
    }
    let mixed = interpolate(&[1.0, 0.0], &[0.5, 0.5], 0.4).unwrap();
    err(mixed[0], 0.7);
    let guards = scatter(&BTreeMap::new(), 5).is_err() && knn_scores(&NeighborSet(Vec::new())).is_none();

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut exact = true;
    for _ in 0..200 {
        let vocab = 20;
        let k = rng.gen_range(1..16);
        let pairs: Vec<(f64, TokenId)> = (0..k).map(|_| (rng.gen_range(0.0..30.0), rng.gen_range(0..vocab as u32))).collect();
        // Closed form without the min shift.
        let z: f64 = pairs.iter().map(|p| (-p.0).exp()).sum();
        let mut want = vec![0.0; vocab];
        for &(d, v) in &pairs {
            want[v as usize] += (-d).exp() / z;
        }
        let p_knn = scatter(&knn_scores(&neighbors(&pairs)).unwrap(), vocab).unwrap();
        for (a, b) in p_knn.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        let raw: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let p_lm: Vec<f64> = raw.iter().map(|x| x / s).collect();
        let lambda = rng.gen_range(0.0..1.0);
        let mixed = interpolate(&p_knn, &p_lm, lambda).unwrap();
        for i in 0..vocab {
            worst = worst.max((mixed[i] - (lambda * want[i] + (1.0 - lambda) * p_lm[i])).abs());
        }
        exact &= interpolate(&p_knn, &p_lm, 0.0).unwrap() == p_lm;
        exact &= interpolate(&p_knn, &p_lm, 1.0).unwrap() == p_knn;
    }
    outcome(
        worst <= 1e-6 && exact && guards,
        format!("max abs error {worst:.2e}, lambda 0/1 exact: {exact}, empty-input guards: {guards}"),
    )
}

fn prov() -> Provenance {
    Provenance {
        checkpoint: [0; 32],
        corpus: [0; 32],
        filter: FilterMode::All,
    }
}

fn random_store(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Datastore {
    let mut ds = Datastore::empty(dim, prov());
    for i in 0..n {
        let key: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        ds.push(&key, i as u32).unwrap();
    }
    ds
}

/// Full sort of (distance, index) pairs.
fn brute_force(ds: &Datastore, q: &[f32], k: usize) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = (0..ds.len())
        .map(|i| {
            let d: f64 = ds.key(i).iter().zip(q).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
            (d.sqrt(), i)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all
}

fn search_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut flat_ok, mut ivf_ok) = (0, 0);
    for inst in 0..100 {
        let ds = random_store(&mut rng, 1000, 16);
        let q: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let flat = search_flat(&ds, &q, 8, Metric::L2).unwrap();
        let want = brute_force(&ds, &q, 8);
        let same = flat.len() == want.len()
            && flat.iter().zip(&want).all(|(n, &(d, i))| n.entry_index == i && (n.distance - d).abs() <= 1e-5 * d.max(1e-12));
        flat_ok += usize::from(same);
        let idx = build_ivf(&ds, 16, inst).unwrap();
        ivf_ok += usize::from(search_ivf_probe(&idx, &ds, &q, 8, Metric::L2, 16).unwrap() == flat);
    }
    outcome(
        flat_ok == 100 && ivf_ok == 100,
        format!("flat == brute force {flat_ok}/100, ivf(all lists) == flat {ivf_ok}/100"),
    )
}

fn gradient_check() -> Outcome {
    let cfg = LmConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_inner: 16,
        segment_len: 4,
        mem_len: 4,
        dropout: 0.0,
        vocab_size: 12,
        seed: 5,
    };
    let mut w = Weights::init(&cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for t in w.tensors_mut() {
        for x in t.iter_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    let model = Model::from_weights(cfg.clone(), w).unwrap();
    let raw = |tokens: Vec<TokenId>| EncodedDialog {
        dialog_id: "g".into(),
        roles: vec![Role::Assistant; tokens.len()],
        tokens,
    };
    let a = raw(vec![2, 6, 7, 8, 4, 3, 9, 10, 11, 6, 4, 5]);
    let b = raw(vec![2, 9, 4, 3, 8, 8, 4, 5]);
    let batch = [&a, &b];
    let (_, grad) = batch_loss_and_grad(&model, &batch);
    let loss = |w: &Weights| batch_loss_and_grad(&Model::from_weights(cfg.clone(), w.clone()).unwrap(), &batch).0;
    let h = 1e-4;
    let (mut checked, mut within, mut worst) = (0, 0, 0.0f64);
    for ti in 0..model.weights.tensors().len() {
        let len = model.weights.tensors()[ti].len();
        for _ in 0..2 {
            let i = rng.gen_range(0..len);
            let mut plus = model.weights.clone();
            plus.tensors_mut()[ti][i] += h;
            let mut minus = model.weights.clone();
            minus.tensors_mut()[ti][i] -= h;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let analytic = grad.tensors()[ti][i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
            within += usize::from(rel <= 1e-3);
            checked += 1;
        }
    }
    outcome(
        checked >= 20 && within == checked,
        format!("{within}/{checked} params within 1e-3, worst relative error {worst:.2e}"),
    )
}

fn small_model(vocab_size: usize, d_model: usize) -> Model {
    Model::new(LmConfig {
        d_model,
        d_inner: 2 * d_model,
        n_heads: 2,
        segment_len: 8,
        mem_len: 8,
        vocab_size,
        ..LmConfig::default()
    })
    .unwrap()
}

fn state_reset() -> Outcome {
    let dialogs = common::random_corpus(2, 21);
    let vocab = build_vocabulary(&dialogs, 100, 1).unwrap();
    let enc: Vec<EncodedDialog> = dialogs.iter().map(|d| encode_dialog(d, &vocab, false)).collect();
    let dim = 16;
    let model = small_model(vocab.len(), dim);
    let opts = BuildOptions {
        filter: FilterMode::All,
        take_last: None,
    };
    let alone = build(&model, [0; 32], &enc[1..], opts).unwrap();
    let after = build(&model, [0; 32], &enc, opts).unwrap();
    let tail = &after.keys()[after.keys().len() - alone.keys().len()..];
    let same = tail.iter().map(|f| f.to_bits()).eq(alone.keys().iter().map(|f| f.to_bits()));
    outcome(same, format!("{} keys of dialog B bit-identical: {same}", alone.len()))
}

fn assistant_only_filter() -> Outcome {
    // Every user turn has the same length as the assistant turn after it.
    let dialogs: Vec<Dialog> = (0..20)
        .map(|i| {
            Dialog::from_turns(
                format!("b{i}"),
                [
                    (Speaker::User, "one two three four", None),
                    (Speaker::Assistant, "five six seven eight", None),
                    (Speaker::User, "nine ten eleven", None),
                    (Speaker::Assistant, "twelve one two", None),
                ],
            )
        })
        .collect();
    let vocab = build_vocabulary(&dialogs, 100, 1).unwrap();
    let enc: Vec<EncodedDialog> = dialogs.iter().map(|d| encode_dialog(d, &vocab, false)).collect();
    let model = small_model(vocab.len(), 8);
    let make = |filter| build(&model, [0; 32], &enc, BuildOptions { filter, take_last: None }).unwrap();
    let all = make(FilterMode::All);
    let asst = make(FilterMode::AssistantOnly);
    // Targets of the full store in order, tagged with their role; the filtered
    // store must be exactly the assistant-tagged subsequence.
    let tagged: Vec<(TokenId, Role)> = enc
        .iter()
        .flat_map(|d| d.tokens[1..].iter().copied().zip(d.roles[1..].iter().copied()))
        .collect();
    let tags_match = tagged.iter().map(|t| t.0).eq(all.values().iter().copied());
    let expected: Vec<TokenId> = tagged.iter().filter(|t| t.1 == Role::Assistant).map(|t| t.0).collect();
    let user_targets = if tags_match && asst.values() == expected.as_slice() {
        0
    } else {
        asst.len().abs_diff(expected.len()).max(1)
    };
    let ratio = asst.len() as f64 / all.len() as f64;
    outcome(
        user_targets == 0 && ratio <= 0.55,
        format!("user targets {user_targets}, size ratio {ratio:.3} ({} / {})", asst.len(), all.len()),
    )
}

fn target_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn memorization() -> Outcome {
    let dir = target_dir("acceptance-memorization");
    let corpus = dir.join("corpus.jsonl");
    common::write_corpus(&corpus, &common::memorization_corpus(50, 0));
    let mut cfg = RunConfig::from_text(
        "index_mode = flat\nk = 32\nsplit = 0.6, 0.2, 0.2\neval_every = 50\ndropout = 0.1\n",
    )
    .unwrap();
    cfg.corpus = Some(corpus);
    cfg.out_dir = dir.join("out");
    let r = match cmd_pipeline(&cfg) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("pipeline failed: {e}")),
    };
    let lm_only = r.sweep[0].1;
    let best = r.sweep.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let csv = cfg.sweep_csv_path();
    let points: Vec<String> = r.sweep.iter().map(|(l, b)| format!("{l}:{b:.2}")).collect();
    outcome(
        r.sweep[0].0 == 0.0 && best >= lm_only + 1.0,
        format!(
            "dev BLEU lambda=0 {lm_only:.2}, best lambda={} {best:.2}, test {:.2} vs LM-only {:.2}, sweep [{}] written to {}",
            r.best_lambda,
            r.bleu,
            r.test_bleu_lm_only,
            points.join(" "),
            csv.display()
        ),
    )
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

fn bleu_oracle() -> Outcome {
    // (hypotheses, references, hand-computed score)
    let cases: [(&[&str], &[&str], f64); 5] = [
        (&["a b c d e"], &["a b c d e"], 100.0),
        (&[""], &["a b c d"], 0.0),
        (&["a b c d"], &["a b c d e"], 100.0 * (-0.25f64).exp()),
        (
            &["the cat sat on the mat", "a b c d"],
            &["the cat is on the mat", "a b c d"],
            100.0 * (0.9f64 * 0.75 * 0.5 * 0.25).powf(0.25),
        ),
        (&["the the the the"], &["the cat"], 0.0),
    ];
    let mut worst = 0.0f64;
    for (h, r, want) in cases {
        let h: Vec<_> = h.iter().map(|s| words(s)).collect();
        let r: Vec<_> = r.iter().map(|s| words(s)).collect();
        worst = worst.max((bleu(&h, &r).unwrap().bleu - want).abs());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut perfect = 0;
    for _ in 0..50 {
        let n = rng.gen_range(1..20);
        let corpus: Vec<Vec<String>> = (0..n)
            .map(|_| (0..rng.gen_range(4..15)).map(|_| format!("w{}", rng.gen_range(0..30))).collect())
            .collect();
        perfect += usize::from(bleu(&corpus, &corpus).unwrap().bleu == 100.0);
    }
    outcome(
        worst <= 1e-4 && perfect == 50,
        format!("max error vs hand values {worst:.2e}, BLEU(x,x)=100 on {perfect}/50"),
    )
}

fn sha256_file(p: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(p).unwrap()))
}

fn reproducible() -> Outcome {
    let root = target_dir("acceptance-reproducible");
    let corpus = root.join("corpus.jsonl");
    common::write_corpus(&corpus, &common::memorization_corpus(30, 3));
    let mut hashes: Vec<BTreeMap<&str, String>> = Vec::new();
    for run in ["a", "b"] {
        let mut cfg = RunConfig::from_text(
            "index_mode = ivf\nd_model = 32\nd_inner = 64\nn_heads = 2\nmax_steps = 100\neval_every = 50\nn_lists = 8\nn_probe = 2\nlambdas = 0, 0.5, 1\n",
        )
        .unwrap();
        cfg.corpus = Some(corpus.clone());
        cfg.out_dir = root.join(run);
        if let Err(e) = cmd_pipeline(&cfg) {
            return outcome(false, format!("pipeline failed: {e}"));
        }
        let mut h = BTreeMap::new();
        h.insert("checkpoint", sha256_file(&cfg.checkpoint_path()));
        h.insert("datastore", sha256_file(&cfg.datastore_path()));
        h.insert("index", sha256_file(&cfg.index_path()));
        h.insert("report", sha256_file(&cfg.report_path()));
        hashes.push(h);
    }
    let equal: Vec<&str> = hashes[0].keys().copied().filter(|k| hashes[0][k] == hashes[1][k]).collect();
    outcome(equal.len() == 4, format!("identical across two runs: {}", equal.join(", ")))
}
