//! The commands behind the CLI. Each reads its inputs from a [`RunConfig`],
//! writes its outputs atomically, and verifies artifact provenance.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use crate::binio::{self, Hash};
use crate::config::RunConfig;
use crate::corpus::{
    build_vocabulary_with, corpus_hash, encode_dialog, load_corpus, load_prefixes, special, split_corpus,
    CorpusFormat, Dialog, EncodedDialog, Speaker, Vocabulary,
};
use crate::datastore::{self, Datastore};
use crate::decoder::{generate_turn, Generation, GenerationConfig, IndexMode, MetadataMode, Retriever};
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_testset, sweep_lambda, SweepResult, TestsetReport};
use crate::index::{build_ivf, IvfIndex};
use crate::lm::{checkpoint, perplexity, train, LmConfig, Model, TrainLog};

/// Corpus split into train/dev/test with the training-split vocabulary.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<Dialog>,
    pub dev: Vec<Dialog>,
    pub test: Vec<Dialog>,
}

pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    let dialogs = load_corpus(cfg.corpus_path()?, CorpusFormat::Jsonl)?;
    let (train, dev, test) = split_corpus(&dialogs, cfg.split, cfg.split_seed)?;
    Ok(Splits { train, dev, test })
}

fn encode_all(dialogs: &[Dialog], vocab: &Vocabulary, with_metadata: bool) -> Vec<EncodedDialog> {
    dialogs.iter().map(|d| encode_dialog(d, vocab, with_metadata)).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub vocab: Vocabulary,
    pub log: TrainLog,
    pub checkpoint_hash: Hash,
}

/// Trains the LM on the training split and writes checkpoint, vocabulary
/// and training log.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    let (model, vocab, log) = train_on(cfg, &splits, cfg.lm.seed)?;
    let bytes = checkpoint::to_bytes(&model);
    binio::write_atomic(&cfg.checkpoint_path(), &bytes)?;
    vocab.save(&cfg.vocab_path())?;
    binio::write_atomic(&cfg.train_log_path(), log.to_csv().as_bytes())?;
    log::info!(
        "trained: best dev ppl {:.4} at step {}, checkpoint {}",
        log.best_dev_ppl,
        log.best_step,
        cfg.checkpoint_path().display()
    );
    Ok(TrainOutcome {
        model,
        vocab,
        log,
        checkpoint_hash: binio::sha256(&bytes),
    })
}

fn train_on(cfg: &RunConfig, splits: &Splits, seed: u64) -> Result<(Model, Vocabulary, TrainLog)> {
    let vocab = build_vocabulary_with(&splits.train, &cfg.vocab_config())?;
    let train_enc = encode_all(&splits.train, &vocab, cfg.with_metadata);
    let dev_enc = encode_all(&splits.dev, &vocab, cfg.with_metadata);
    let lm_cfg = LmConfig {
        vocab_size: vocab.len(),
        seed,
        ..cfg.lm.clone()
    };
    let (model, log) = train(&train_enc, &dev_enc, lm_cfg, &cfg.train)?;
    Ok((model, vocab, log))
}

/// Loads a checkpoint and returns it with the hash of its file bytes.
pub fn load_checkpoint(path: &Path) -> Result<(Model, Hash)> {
    let bytes = binio::read_file(path, "checkpoint")?;
    let model = checkpoint::from_bytes(&bytes)?;
    Ok((model, binio::sha256(&bytes)))
}

fn load_vocab_for(cfg: &RunConfig, model: &Model) -> Result<Vocabulary> {
    let vocab = Vocabulary::load(&cfg.vocab_path())?;
    if vocab.len() != model.config.vocab_size {
        return Err(Error::Provenance(format!(
            "vocabulary has {} tokens but the checkpoint expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    Ok(vocab)
}

fn datastore_source<'a>(cfg: &RunConfig, train: &'a [EncodedDialog]) -> &'a [EncodedDialog] {
    match cfg.take_last {
        Some(n) => &train[train.len().saturating_sub(n)..],
        None => train,
    }
}

/// Harvests the datastore from the training split with the saved checkpoint.
pub fn cmd_build_datastore(cfg: &RunConfig) -> Result<Datastore> {
    cfg.validate()?;
    let (model, ckpt_hash) = load_checkpoint(&cfg.checkpoint_path())?;
    let vocab = load_vocab_for(cfg, &model)?;
    let splits = load_splits(cfg)?;
    let train_enc = encode_all(&splits.train, &vocab, cfg.with_metadata);
    let ds = datastore::build(&model, ckpt_hash, &train_enc, cfg.build_options())?;
    ds.save(&cfg.datastore_path())?;
    log::info!("datastore: {} entries of dim {}", ds.len(), ds.dim());
    Ok(ds)
}

/// The list count actually used: never more lists than entries.
pub fn effective_lists(cfg: &RunConfig, ds: &Datastore) -> (usize, usize) {
    let n_lists = cfg.n_lists.min(ds.len()).max(1);
    (n_lists, cfg.n_probe.min(n_lists))
}

pub fn cmd_build_index(cfg: &RunConfig) -> Result<IvfIndex> {
    cfg.validate()?;
    let ds = Datastore::load(&cfg.datastore_path())?;
    let (n_lists, n_probe) = effective_lists(cfg, &ds);
    let idx = build_ivf(&ds, n_lists, cfg.index_seed)?.with_n_probe(n_probe)?;
    idx.save(&cfg.index_path())?;
    log::info!("index: {n_lists} lists, n_probe {n_probe}");
    Ok(idx)
}

/// Everything needed for generation, with provenance verified.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub model: Model,
    pub checkpoint_hash: Hash,
    pub vocab: Vocabulary,
    pub datastore: Option<Datastore>,
    pub index: Option<IvfIndex>,
}

impl Artifacts {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let (model, checkpoint_hash) = load_checkpoint(&cfg.checkpoint_path())?;
        let vocab = load_vocab_for(cfg, &model)?;
        let mode = cfg.generation.index_mode;
        let datastore = match mode {
            IndexMode::LmOnly => None,
            IndexMode::Flat | IndexMode::Ivf => Some(Datastore::load(&cfg.datastore_path())?),
        };
        let index = match mode {
            IndexMode::Ivf => Some(IvfIndex::load(&cfg.index_path())?),
            _ => None,
        };
        let a = Self {
            model,
            checkpoint_hash,
            vocab,
            datastore,
            index,
        };
        a.verify()?;
        Ok(a)
    }

    /// Datastore keys must come from this checkpoint, and the index from this datastore.
    pub fn verify(&self) -> Result<()> {
        if let Some(ds) = &self.datastore {
            if ds.provenance.checkpoint != self.checkpoint_hash {
                return Err(Error::Provenance(
                    "datastore was built with a different checkpoint".into(),
                ));
            }
            if ds.dim() != self.model.config.d_model {
                return Err(Error::DimMismatch {
                    expected: self.model.config.d_model,
                    got: ds.dim(),
                });
            }
            if let Some(idx) = &self.index {
                idx.check_datastore(ds)?;
            }
        }
        Ok(())
    }

    /// Confirms the datastore was harvested from this training split.
    pub fn verify_corpus(&self, cfg: &RunConfig, train: &[Dialog]) -> Result<()> {
        if let Some(ds) = &self.datastore {
            let enc = encode_all(train, &self.vocab, cfg.with_metadata);
            if ds.provenance.corpus != corpus_hash(datastore_source(cfg, &enc)) {
                return Err(Error::Provenance(
                    "datastore was built from a different corpus".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn retriever(&self, mode: IndexMode) -> Result<Retriever<'_>> {
        Retriever::new(mode, self.datastore.as_ref(), self.index.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Completion {
    pub id: String,
    pub completion: String,
    pub tokens: Vec<u32>,
}

/// Tokens fed after a prefix in teacher-forced mode: the assistant marker and,
/// with metadata, the next turn number. The agent id is unknown and left to
/// the model.
fn forced_tokens(cfg: &RunConfig, vocab: &Vocabulary, next_turn: usize) -> Vec<u32> {
    match cfg.generation.metadata_mode {
        MetadataMode::Generated => Vec::new(),
        MetadataMode::TeacherForced => {
            let mut f = vec![special::BOT_ASST];
            if cfg.with_metadata {
                f.push(
                    vocab
                        .id(&crate::corpus::turn_token(next_turn))
                        .unwrap_or(special::UNK),
                );
            }
            f
        }
    }
}

/// One assistant turn for a prefix dialog whose last turn is a user turn.
pub fn complete(cfg: &RunConfig, art: &Artifacts, retriever: &Retriever<'_>, d: &Dialog) -> Result<(Completion, Generation)> {
    if d.turns.last().map(|t| t.speaker) != Some(Speaker::User) {
        return Err(Error::Validation(format!("prefix {:?} must end with a user turn", d.id)));
    }
    let enc = encode_dialog(d, &art.vocab, cfg.with_metadata);
    // Drop the trailing end-of-conversation marker.
    let prefix = &enc.tokens[..enc.tokens.len() - 1];
    let forced = forced_tokens(cfg, &art.vocab, d.turns.len());
    let gen = generate_turn(&art.model, retriever, prefix, &forced, &cfg.generation)?;
    let words: Vec<&str> = gen
        .tokens
        .iter()
        .filter(|&&t| !art.vocab.is_reserved(t))
        .filter_map(|&t| art.vocab.token(t))
        .collect();
    let c = Completion {
        id: d.id.clone(),
        completion: words.join(" "),
        tokens: gen.tokens.clone(),
    };
    Ok((c, gen))
}

/// Completes each prefix dialog (whose last turn must be a user turn) with
/// one assistant turn.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<Completion>> {
    cfg.validate()?;
    let prefix_path = cfg
        .prefixes
        .as_deref()
        .ok_or_else(|| Error::Config("no prefixes path configured".into()))?;
    let prefixes = load_prefixes(prefix_path)?;
    let art = Artifacts::load(cfg)?;
    let retriever = art.retriever(cfg.generation.index_mode)?;
    let mut completions = Vec::with_capacity(prefixes.len());
    let mut trace = String::new();
    for d in &prefixes {
        let (c, gen) = complete(cfg, &art, &retriever, d)?;
        if cfg.trace.is_some() {
            for line in gen.trace_jsonl().lines() {
                let mut v: serde_json::Value = serde_json::from_str(line)
                    .map_err(|e| Error::format("trace", e.to_string()))?;
                v["dialog_id"] = serde_json::Value::String(d.id.clone());
                trace.push_str(&v.to_string());
                trace.push('\n');
            }
        }
        completions.push(c);
    }
    let mut out = String::new();
    for c in &completions {
        out.push_str(&serde_json::to_string(c).map_err(|e| Error::format("completion", e.to_string()))?);
        out.push('\n');
    }
    binio::write_atomic(&cfg.completions_path(), out.as_bytes())?;
    if let Some(p) = &cfg.trace {
        binio::write_atomic(p, trace.as_bytes())?;
    }
    Ok(completions)
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::format("report", e.to_string()))?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub index_mode: String,
    pub lambda: f64,
    pub test: TestsetReport,
}

/// Scores the test split at the configured λ and writes the report.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    let art = Artifacts::load(cfg)?;
    art.verify_corpus(cfg, &splits.train)?;
    let retriever = art.retriever(cfg.generation.index_mode)?;
    let test = evaluate_testset(
        &art.model,
        &retriever,
        &splits.test,
        &art.vocab,
        cfg.with_metadata,
        &cfg.generation,
        cfg.runs,
    )?;
    let report = EvalReport {
        index_mode: cfg.to_pairs()["index_mode"].clone(),
        lambda: cfg.generation.lambda,
        test,
    };
    binio::write_atomic(&cfg.report_path(), to_json(&report)?.as_bytes())?;
    log::info!(
        "test BLEU {:.3} ± {:.3}",
        report.test.bleu_mean,
        report.test.bleu_std
    );
    Ok(report)
}

/// Sweeps λ on the dev split and writes the CSV.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let splits = load_splits(cfg)?;
    let art = Artifacts::load(cfg)?;
    art.verify_corpus(cfg, &splits.train)?;
    let retriever = art.retriever(cfg.generation.index_mode)?;
    let sweep = sweep_lambda(
        &art.model,
        &retriever,
        &splits.dev,
        &art.vocab,
        cfg.with_metadata,
        &cfg.generation,
        &cfg.lambdas,
    )?;
    binio::write_atomic(&cfg.sweep_csv_path(), sweep.to_csv().as_bytes())?;
    log::info!("best lambda {} (dev BLEU {:.3})", sweep.best_lambda, sweep.best_bleu);
    Ok(sweep)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineReport {
    /// Settings that affect results; output locations are omitted.
    pub config: BTreeMap<String, String>,
    pub hashes: BTreeMap<String, String>,
    pub train_steps: usize,
    pub best_step: usize,
    pub dev_perplexity: f64,
    pub datastore_entries: usize,
    pub n_lists: usize,
    pub n_probe: usize,
    pub sweep: Vec<(f64, f64)>,
    pub best_lambda: f64,
    /// Mean test BLEU at the best λ.
    pub bleu: f64,
    pub dev_bleu_lm_only: f64,
    pub test: TestsetReport,
    pub test_bleu_lm_only: f64,
}

/// Train, harvest, index, sweep λ on dev, then score the test split at the
/// best λ. With `runs > 1` the model is retrained with seeds `seed + r`; only
/// the first run's artifacts are written.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let trained = cmd_train(cfg)?;
    let ds = cmd_build_datastore(cfg)?;
    let idx = if cfg.generation.index_mode == IndexMode::Ivf {
        Some(cmd_build_index(cfg)?)
    } else {
        None
    };
    let (n_lists, n_probe) = effective_lists(cfg, &ds);
    let splits = load_splits(cfg)?;
    let art = Artifacts {
        model: trained.model,
        checkpoint_hash: trained.checkpoint_hash,
        vocab: trained.vocab,
        datastore: Some(ds),
        index: idx,
    };
    art.verify()?;
    let retriever = art.retriever(cfg.generation.index_mode)?;
    let sweep = sweep_lambda(
        &art.model,
        &retriever,
        &splits.dev,
        &art.vocab,
        cfg.with_metadata,
        &cfg.generation,
        &cfg.lambdas,
    )?;
    binio::write_atomic(&cfg.sweep_csv_path(), sweep.to_csv().as_bytes())?;
    let best = GenerationConfig {
        lambda: sweep.best_lambda,
        ..cfg.generation.clone()
    };
    let lm_only = GenerationConfig {
        lambda: 0.0,
        index_mode: IndexMode::LmOnly,
        ..cfg.generation.clone()
    };
    let dev_bleu_lm_only = evaluate(
        &art.model,
        &Retriever::LmOnly,
        &splits.dev,
        &art.vocab,
        cfg.with_metadata,
        &lm_only,
    )?
    .report
    .bleu;

    let mut run_bleu = Vec::with_capacity(cfg.runs);
    let mut lm_only_bleu = Vec::with_capacity(cfg.runs);
    let mut n_turns = 0;
    for r in 0..cfg.runs {
        let score = |model: &Model, ret: &Retriever<'_>, g: &GenerationConfig| {
            evaluate(model, ret, &splits.test, &art.vocab, cfg.with_metadata, g)
        };
        if r == 0 {
            let out = score(&art.model, &retriever, &best)?;
            n_turns = out.turns.len();
            run_bleu.push(out.report.bleu);
            lm_only_bleu.push(score(&art.model, &Retriever::LmOnly, &lm_only)?.report.bleu);
        } else {
            let seed = cfg.lm.seed.wrapping_add(r as u64);
            let (model, vocab, _) = train_on(cfg, &splits, seed)?;
            let train_enc = encode_all(&splits.train, &vocab, cfg.with_metadata);
            let ds = datastore::build(&model, model.hash(), &train_enc, cfg.build_options())?;
            let idx = match cfg.generation.index_mode {
                IndexMode::Ivf => Some(build_ivf(&ds, n_lists, cfg.index_seed)?.with_n_probe(n_probe)?),
                _ => None,
            };
            let ret = Retriever::new(cfg.generation.index_mode, Some(&ds), idx.as_ref())?;
            let eval_run = |g: &GenerationConfig, ret: &Retriever<'_>| {
                evaluate(&model, ret, &splits.test, &vocab, cfg.with_metadata, g)
            };
            run_bleu.push(eval_run(&best, &ret)?.report.bleu);
            lm_only_bleu.push(eval_run(&lm_only, &Retriever::LmOnly)?.report.bleu);
        }
        log::info!("run {r}: test BLEU {:.3}", run_bleu[r]);
    }
    let test = TestsetReport::from_runs(run_bleu, n_turns);
    let test_bleu_lm_only = crate::eval::mean_std(&lm_only_bleu).0;

    let ds = art.datastore.as_ref().expect("pipeline always builds a datastore");
    let mut hashes = BTreeMap::new();
    hashes.insert("checkpoint".to_string(), hex::encode(art.checkpoint_hash));
    hashes.insert("corpus".to_string(), hex::encode(ds.provenance.corpus));
    hashes.insert("datastore".to_string(), hex::encode(ds.hash()));
    hashes.insert(
        "vocabulary".to_string(),
        hex::encode(binio::sha256(art.vocab.to_text().as_bytes())),
    );
    if let Some(idx) = &art.index {
        hashes.insert("index".to_string(), hex::encode(binio::sha256(&idx.to_bytes())));
    }
    let mut config = cfg.to_pairs();
    config.remove("corpus");
    config.remove("out_dir");

    let dev_enc = encode_all(&splits.dev, &art.vocab, cfg.with_metadata);
    let report = PipelineReport {
        config,
        hashes,
        train_steps: trained.log.rows.last().map_or(0, |r| r.step),
        best_step: trained.log.best_step,
        dev_perplexity: perplexity(&art.model, &dev_enc, false)?,
        datastore_entries: ds.len(),
        n_lists,
        n_probe,
        sweep: sweep.points.clone(),
        best_lambda: sweep.best_lambda,
        bleu: test.bleu_mean,
        dev_bleu_lm_only,
        test,
        test_bleu_lm_only,
    };
    binio::write_atomic(&cfg.report_path(), to_json(&report)?.as_bytes())?;
    Ok(report)
}
