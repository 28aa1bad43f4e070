mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use embrank_core::config::ExperimentConfig;
use embrank_core::retrieval::RetrievalMode;

#[derive(Parser, Debug)]
#[command(name = "embrank", version, about = "Listwise reranking over compressed passage embeddings")]
struct Cli {
    /// Experiment config (TOML). Defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory. Each subcommand has its own default under the runs path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Inputs {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Index directory.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Model checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct RetrievalArgs {
    #[arg(long)]
    mode: Option<RetrievalMode>,
    /// Passages per reranker pass; 0 reranks all candidates at once.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// First-stage candidates per query.
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySet {
    Train,
    Eval,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus, queries, judgments and training samples.
    GenData,
    /// Build the BM25 index, plus a dense index when a model is given.
    BuildIndex {
        #[command(flatten)]
        inputs: Inputs,
        /// Also build the dense index from this checkpoint.
        #[arg(long)]
        dense: bool,
    },
    /// Dual-stage training of the encoder/reranker pair.
    Train {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Retrieve and rerank, writing a TREC run.
    Rerank {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        #[arg(long, value_enum, default_value = "eval")]
        queries: QuerySet,
    },
    /// nDCG of a TREC run against the dataset judgments.
    Evaluate {
        #[command(flatten)]
        inputs: Inputs,
        /// TREC run file.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Retrieve, rerank and evaluate the evaluation queries.
    EndToEnd {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
    },
    /// Train and evaluate the full model and each single-switch variant.
    Ablate {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
        /// Comma-separated subset, e.g. full,no_residual.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Processed passage slots and generated tokens, single pass and windowed.
    Efficiency {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
    },
    /// Rerank under original, inverse and random input order.
    OrderExp {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        retrieval: RetrievalArgs,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::GenData => "gen-data",
            Self::BuildIndex { .. } => "build-index",
            Self::Train { .. } => "train",
            Self::Rerank { .. } => "rerank",
            Self::Evaluate { .. } => "evaluate",
            Self::EndToEnd { .. } => "end-to-end",
            Self::Ablate { .. } => "ablate",
            Self::Efficiency { .. } => "efficiency",
            Self::OrderExp { .. } => "order-exp",
        }
    }
}

fn resolve_config(cli: &Cli) -> embrank_core::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_path_overrides(|k| std::env::var(k).ok());
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let (inputs, retrieval) = match &cli.command {
        Command::GenData => (None, None),
        Command::BuildIndex { inputs, .. } | Command::Train { inputs } | Command::Evaluate { inputs, .. } => {
            (Some(inputs), None)
        }
        Command::Rerank { inputs, retrieval, .. }
        | Command::EndToEnd { inputs, retrieval }
        | Command::Ablate { inputs, retrieval, .. }
        | Command::Efficiency { inputs, retrieval }
        | Command::OrderExp { inputs, retrieval } => (Some(inputs), Some(retrieval)),
    };
    if let Some(i) = inputs {
        if let Some(p) = &i.data {
            cfg.paths.data = p.clone();
        }
        if let Some(p) = &i.index {
            cfg.paths.index = p.clone();
        }
        if let Some(p) = &i.model {
            cfg.paths.model = p.clone();
        }
    }
    if let Some(r) = retrieval {
        if let Some(m) = r.mode {
            cfg.rerank.mode = m;
        }
        if let Some(w) = r.window {
            cfg.rerank.window = w;
        }
        if let Some(s) = r.stride {
            cfg.rerank.stride = s;
        }
        if let Some(d) = r.depth {
            cfg.rerank.depth = d;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> embrank_core::Result<()> {
    let cfg = resolve_config(&cli)?;
    let out = match (&cli.out, &cli.command) {
        (Some(o), _) => o.clone(),
        (None, Command::GenData) => cfg.paths.data.clone(),
        (None, Command::BuildIndex { .. }) => cfg.paths.index.clone(),
        (None, c) => cfg.paths.runs.join(c.name()),
    };
    let dir = output::RunDir::create(&out, &cfg)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg, &dir),
        Command::BuildIndex { dense, .. } => commands::build_index(&cfg, &dir, dense),
        Command::Train { .. } => commands::train(&cfg, &dir),
        Command::Rerank { queries, .. } => commands::rerank(&cfg, &dir, queries),
        Command::Evaluate { run, k, .. } => commands::evaluate(&cfg, &dir, &run, k),
        Command::EndToEnd { .. } => commands::end_to_end_cmd(&cfg, &dir),
        Command::Ablate { variants, .. } => commands::ablate(&cfg, &dir, &variants),
        Command::Efficiency { .. } => commands::efficiency(&cfg, &dir),
        Command::OrderExp { .. } => commands::order_exp(&cfg, &dir),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
