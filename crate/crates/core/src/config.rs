//! Run configuration: a flat `key = value` text format (with `#` comments)
//! plus command-line overrides applied on top.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::corpus::{special, VocabConfig};
use crate::datastore::{BuildOptions, FilterMode};
use crate::decoder::{GenerationConfig, IndexMode, MetadataMode};
use crate::error::{Error, Result};
use crate::eval::default_lambdas;
use crate::index::Metric;
use crate::lm::{LmConfig, TrainOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub datastore: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub sweep_csv: Option<PathBuf>,
    pub train_log: Option<PathBuf>,
    pub prefixes: Option<PathBuf>,
    pub completions: Option<PathBuf>,
    pub trace: Option<PathBuf>,

    pub split: (f64, f64, f64),
    pub split_seed: u64,
    pub with_metadata: bool,
    pub vocab_max_size: usize,
    pub vocab_min_count: usize,

    pub lm: LmConfig,
    pub train: TrainOptions,

    pub filter: FilterMode,
    pub take_last: Option<usize>,
    pub n_lists: usize,
    pub n_probe: usize,
    pub index_seed: u64,

    pub generation: GenerationConfig,
    pub runs: usize,
    pub lambdas: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            out_dir: PathBuf::from("runs"),
            checkpoint: None,
            vocab: None,
            datastore: None,
            index: None,
            report: None,
            sweep_csv: None,
            train_log: None,
            prefixes: None,
            completions: None,
            trace: None,
            split: (0.8, 0.1, 0.1),
            split_seed: 0,
            with_metadata: false,
            vocab_max_size: 16_000,
            vocab_min_count: 1,
            lm: LmConfig::default(),
            train: TrainOptions::default(),
            filter: FilterMode::AssistantOnly,
            take_last: None,
            n_lists: 16,
            n_probe: 4,
            index_seed: 0,
            generation: GenerationConfig::default(),
            runs: 1,
            lambdas: default_lambdas(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {value:?}: expected a boolean"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|v| parse::<f64>(key, v.trim()))
        .collect()
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::not_found("config", path),
            _ => Error::io(path, e),
        })?;
        Self::from_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || Some(PathBuf::from(value));
        match key {
            "corpus" => self.corpus = path(),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "checkpoint" => self.checkpoint = path(),
            "vocab" => self.vocab = path(),
            "datastore" => self.datastore = path(),
            "index" => self.index = path(),
            "report" => self.report = path(),
            "sweep_csv" => self.sweep_csv = path(),
            "train_log" => self.train_log = path(),
            "prefixes" => self.prefixes = path(),
            "completions" => self.completions = path(),
            "trace" => self.trace = path(),

            "split" => {
                let v = parse_list(key, value)?;
                if v.len() != 3 {
                    return Err(Error::Config("split needs three ratios".into()));
                }
                self.split = (v[0], v[1], v[2]);
            }
            "split_seed" => self.split_seed = parse(key, value)?,
            "with_metadata" => self.with_metadata = parse_bool(key, value)?,
            "vocab_max_size" => self.vocab_max_size = parse(key, value)?,
            "vocab_min_count" => self.vocab_min_count = parse(key, value)?,

            "n_layers" => self.lm.n_layers = parse(key, value)?,
            "n_heads" => self.lm.n_heads = parse(key, value)?,
            "d_model" => self.lm.d_model = parse(key, value)?,
            "d_inner" => self.lm.d_inner = parse(key, value)?,
            "segment_len" => self.lm.segment_len = parse(key, value)?,
            "mem_len" => self.lm.mem_len = parse(key, value)?,
            "dropout" => self.lm.dropout = parse(key, value)?,
            "seed" => self.lm.seed = parse(key, value)?,

            "lr" => self.train.lr = parse(key, value)?,
            "beta1" => self.train.beta1 = parse(key, value)?,
            "beta2" => self.train.beta2 = parse(key, value)?,
            "max_steps" => self.train.max_steps = parse(key, value)?,
            "patience" => self.train.patience = parse(key, value)?,
            "eval_every" => self.train.eval_every = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,

            "filter" => self.filter = parse(key, value)?,
            "take_last" => {
                self.take_last = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "n_lists" => self.n_lists = parse(key, value)?,
            "n_probe" => self.n_probe = parse(key, value)?,
            "index_seed" => self.index_seed = parse(key, value)?,

            "lambda" => self.generation.lambda = parse(key, value)?,
            "k" => self.generation.k = parse(key, value)?,
            "max_new_tokens" => self.generation.max_new_tokens = parse(key, value)?,
            "index_mode" => self.generation.index_mode = parse(key, value)?,
            "metric" => self.generation.metric = parse(key, value)?,
            "metadata_mode" => {
                self.generation.metadata_mode = match value {
                    "generated" => MetadataMode::Generated,
                    "teacher_forced" | "forced" => MetadataMode::TeacherForced,
                    other => return Err(Error::Config(format!("unknown metadata_mode {other:?}"))),
                }
            }
            "runs" => self.runs = parse(key, value)?,
            "lambdas" => self.lambdas = parse_list(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Every setting as `key → value`, in the same syntax `set` accepts.
    pub fn to_pairs(&self) -> BTreeMap<String, String> {
        let g = &self.generation;
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("corpus", opt_path(&self.corpus));
        put("out_dir", self.out_dir.display().to_string());
        put("split", join(&[self.split.0, self.split.1, self.split.2]));
        put("split_seed", self.split_seed.to_string());
        put("with_metadata", self.with_metadata.to_string());
        put("vocab_max_size", self.vocab_max_size.to_string());
        put("vocab_min_count", self.vocab_min_count.to_string());
        put("n_layers", self.lm.n_layers.to_string());
        put("n_heads", self.lm.n_heads.to_string());
        put("d_model", self.lm.d_model.to_string());
        put("d_inner", self.lm.d_inner.to_string());
        put("segment_len", self.lm.segment_len.to_string());
        put("mem_len", self.lm.mem_len.to_string());
        put("dropout", self.lm.dropout.to_string());
        put("seed", self.lm.seed.to_string());
        put("lr", self.train.lr.to_string());
        put("beta1", self.train.beta1.to_string());
        put("beta2", self.train.beta2.to_string());
        put("max_steps", self.train.max_steps.to_string());
        put("patience", self.train.patience.to_string());
        put("eval_every", self.train.eval_every.to_string());
        put("batch_size", self.train.batch_size.to_string());
        put(
            "filter",
            match self.filter {
                FilterMode::AssistantOnly => "assistant_only",
                FilterMode::All => "all",
                FilterMode::AssistantContext => "assistant_context",
            }
            .into(),
        );
        put(
            "take_last",
            self.take_last.map(|n| n.to_string()).unwrap_or_else(|| "none".into()),
        );
        put("n_lists", self.n_lists.to_string());
        put("n_probe", self.n_probe.to_string());
        put("index_seed", self.index_seed.to_string());
        put("lambda", g.lambda.to_string());
        put("k", g.k.to_string());
        put("max_new_tokens", g.max_new_tokens.to_string());
        put(
            "index_mode",
            match g.index_mode {
                IndexMode::Flat => "flat",
                IndexMode::Ivf => "ivf",
                IndexMode::LmOnly => "lm_only",
            }
            .into(),
        );
        put(
            "metric",
            match g.metric {
                Metric::L2 => "l2",
                Metric::SquaredL2 => "squared_l2",
            }
            .into(),
        );
        put(
            "metadata_mode",
            match g.metadata_mode {
                MetadataMode::Generated => "generated",
                MetadataMode::TeacherForced => "teacher_forced",
            }
            .into(),
        );
        put("runs", self.runs.to_string());
        put("lambdas", join(&self.lambdas));
        m
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut lm = self.lm.clone();
        if lm.vocab_size == 0 {
            lm.vocab_size = 1;
        }
        lm.validate()?;
        self.generation.validate()?;
        if self.runs == 0 {
            return Err(Error::Config("runs must be positive".into()));
        }
        if self.n_lists == 0 || self.n_probe == 0 || self.n_probe > self.n_lists {
            return Err(Error::Config(format!(
                "need 1 <= n_probe ({}) <= n_lists ({})",
                self.n_probe, self.n_lists
            )));
        }
        if self.generation.terminal_token != special::EOT {
            return Err(Error::Config("terminal token must be end-of-turn".into()));
        }
        Ok(())
    }

    fn artifact(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.out_dir.join(name))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.artifact(&self.checkpoint, "model.ckpt")
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.artifact(&self.vocab, "vocab.txt")
    }

    pub fn datastore_path(&self) -> PathBuf {
        self.artifact(&self.datastore, "datastore.rdkv")
    }

    pub fn index_path(&self) -> PathBuf {
        self.artifact(&self.index, "index.rdiv")
    }

    pub fn report_path(&self) -> PathBuf {
        self.artifact(&self.report, "report.json")
    }

    pub fn sweep_csv_path(&self) -> PathBuf {
        self.artifact(&self.sweep_csv, "sweep.csv")
    }

    pub fn train_log_path(&self) -> PathBuf {
        self.artifact(&self.train_log, "train_log.csv")
    }

    pub fn completions_path(&self) -> PathBuf {
        self.artifact(&self.completions, "completions.jsonl")
    }

    pub fn corpus_path(&self) -> Result<&Path> {
        let p = self
            .corpus
            .as_deref()
            .ok_or_else(|| Error::Config("no corpus path configured".into()))?;
        if !p.exists() {
            return Err(Error::not_found("corpus", p));
        }
        Ok(p)
    }

    pub fn vocab_config(&self) -> VocabConfig {
        VocabConfig {
            max_size: self.vocab_max_size,
            min_count: self.vocab_min_count,
            metadata: self.with_metadata,
        }
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            filter: self.filter,
            take_last: self.take_last,
        }
    }
}
