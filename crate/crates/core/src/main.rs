use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use dialog_knn::config::RunConfig;
use dialog_knn::pipeline;
use dialog_knn::Error;

/// Log verbosity, e.g. `DIALOG_KNN_LOG=info`.
const LOG_ENV: &str = "DIALOG_KNN_LOG";

#[derive(Parser, Debug)]
#[command(name = "dialog-knn", version, about = "Retrieval-augmented dialog generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the language model.
    Train(Common),
    /// Harvest the kNN datastore from the training split.
    BuildDatastore(Common),
    /// Build the inverted-file index over the datastore.
    BuildIndex(Common),
    /// Complete dialog prefixes (JSONL) with one assistant turn each.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        prefixes: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Score the test split.
    Eval(Common),
    /// Sweep the interpolation weight on the dev split.
    Sweep(Common),
    /// Train, harvest, index, sweep and evaluate.
    Pipeline(Common),
}

fn load_config(c: &Common) -> dialog_knn::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &c.corpus {
        cfg.corpus = Some(p.clone());
    }
    if let Some(p) = &c.out_dir {
        cfg.out_dir = p.clone();
    }
    for kv in &c.set {
        cfg.apply_override(kv)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let out = pipeline::cmd_train(&cfg)?;
            println!(
                "checkpoint {} (best dev ppl {:.4} at step {})",
                cfg.checkpoint_path().display(),
                out.log.best_dev_ppl,
                out.log.best_step
            );
        }
        Command::BuildDatastore(c) => {
            let cfg = load_config(&c)?;
            let ds = pipeline::cmd_build_datastore(&cfg)?;
            println!("datastore {} ({} entries)", cfg.datastore_path().display(), ds.len());
        }
        Command::BuildIndex(c) => {
            let cfg = load_config(&c)?;
            let idx = pipeline::cmd_build_index(&cfg)?;
            println!("index {} ({} lists)", cfg.index_path().display(), idx.n_lists());
        }
        Command::Generate {
            common,
            prefixes,
            output,
            trace,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.prefixes = prefixes.or(cfg.prefixes);
            cfg.completions = output.or(cfg.completions);
            cfg.trace = trace.or(cfg.trace);
            let done = pipeline::cmd_generate(&cfg)?;
            println!("{} completions -> {}", done.len(), cfg.completions_path().display());
        }
        Command::Eval(c) => {
            let cfg = load_config(&c)?;
            let r = pipeline::cmd_eval(&cfg)?;
            println!("test BLEU {:.3} ± {:.3}", r.test.bleu_mean, r.test.bleu_std);
        }
        Command::Sweep(c) => {
            let cfg = load_config(&c)?;
            let s = pipeline::cmd_sweep(&cfg)?;
            print!("{}", s.to_csv());
            println!("best lambda {} (BLEU {:.3})", s.best_lambda, s.best_bleu);
        }
        Command::Pipeline(c) => {
            let cfg = load_config(&c)?;
            let r = pipeline::cmd_pipeline(&cfg)
                .with_context(|| format!("pipeline in {}", cfg.out_dir.display()))?;
            println!(
                "best lambda {}; test BLEU {:.3} ± {:.3} (LM only {:.3}); report {}",
                r.best_lambda,
                r.test.bleu_mean,
                r.test.bleu_std,
                r.test_bleu_lm_only,
                cfg.report_path().display()
            );
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::NotFound { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
