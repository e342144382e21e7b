use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};

use progrank::checkpoint::Checkpoint;
use progrank::corpus::{self, Corpus, Split};
use progrank::embeddings::{pair_paths, EmbeddingMatrix};
use progrank::error::{Error, Result};
use progrank::exec::Execution;
use progrank::output::{self, RecommendationDigest, DEFAULT_RECOMMENDATIONS};
use progrank::retrieval::{retrieve_all, EmbeddingIndex};
use progrank::synthetic::{generate, SyntheticSpec};
use progrank::trainer::{self, make_batches, ScoringContext, Trainer};
use progrank::{LossKind, TrainConfig};

#[derive(Parser)]
#[command(name = "progrank", version, about = "Progressive listwise ranking of paper corpora")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

/// Flags every subcommand accepts; they override the config file.
#[derive(Args, Default)]
struct Shared {
    /// Flat key = value training config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    loss: Option<LossKind>,
    #[arg(long, global = true)]
    m: Option<usize>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    gamma: Option<f64>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long = "tau-min", global = true)]
    tau_min: Option<f64>,
    #[arg(long = "tau-max", global = true)]
    tau_max: Option<f64>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Output path (file or file-pair stem, depending on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Inputs {
    /// Corpus JSONL file.
    #[arg(long)]
    corpus: PathBuf,
    /// Embedding file pair (`<stem>.json` + `<stem>.bin`).
    #[arg(long)]
    embeddings: PathBuf,
}

#[derive(Args)]
struct SplitSelect {
    /// Split sidecar JSON.
    #[arg(long)]
    splits: Option<PathBuf>,
    /// Which records to use: train, validation, test or all.
    #[arg(long, default_value = "all")]
    split: String,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (`<out>.jsonl`) and embeddings (`<out>.json` + `<out>.bin`).
    Synth {
        #[arg(long, default_value_t = 2000)]
        papers: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        topics: usize,
    },
    /// Validate a corpus file and optionally write it back normalized.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Check an embedding pair against a corpus and rewrite it normalized in corpus order.
    EmbedImport {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Compute every paper's reference set.
    Index {
        #[command(flatten)]
        inputs: Inputs,
        /// Only retrieve papers published on or before the target.
        #[arg(long)]
        past_only: bool,
    },
    /// Write a validation (and optional test) split sidecar.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        fraction: Option<f64>,
        /// Hold out this many records as test before the validation split.
        #[arg(long)]
        test_count: Option<usize>,
    },
    /// Train and save the best checkpoint.
    Train {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        splits: Option<PathBuf>,
        /// Per-epoch log CSV; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        past_only: bool,
        #[arg(long)]
        raw_listmle: bool,
        #[arg(long)]
        clip: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        #[arg(long)]
        hidden_dim: Option<usize>,
        #[arg(long)]
        scorer_layers: Option<usize>,
        #[arg(long)]
        validation_fraction: Option<f64>,
        /// Checkpoint selection metric: ndcg@K, spearman or kendall.
        #[arg(long)]
        selection_metric: Option<String>,
        /// Allow parallel, non-bit-reproducible gradient accumulation.
        #[arg(long)]
        fast: bool,
    },
    /// Evaluate a checkpoint; writes `<out>.csv` and `<out>.json`.
    Eval {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        select: SplitSelect,
    },
    /// Rank every paper of the corpus into a CSV.
    Rank {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Top-n digest; writes `<out>.json` and `<out>.md`.
    Recommend {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RECOMMENDATIONS)]
        n: usize,
        /// Digest date; defaults to the newest publication date in the corpus.
        #[arg(long)]
        date: Option<NaiveDate>,
    },
    /// Assemble a markdown report from eval and step-diagnostic CSVs.
    Report {
        #[arg(long = "eval")]
        evals: Vec<PathBuf>,
        #[arg(long = "steps")]
        steps: Vec<PathBuf>,
    },
    /// Compare analytic gradients with finite differences on one batch.
    GradCheck {
        #[command(flatten)]
        inputs: Inputs,
        /// Check this checkpoint instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// NDCG@10 of every refinement step's score.
    StepDiag {
        #[command(flatten)]
        inputs: Inputs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        select: SplitSelect,
    },
}

impl Shared {
    fn config(&self) -> Result<TrainConfig> {
        let base = match &self.config {
            Some(path) => TrainConfig::load(path)?,
            None => TrainConfig::default(),
        };
        self.apply(base)
    }

    fn apply(&self, mut c: TrainConfig) -> Result<TrainConfig> {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { c.$f = v; } )* };
        }
        set!(seed, loss, m, k, gamma, batch, tau_min, tau_max, lr, epochs);
        c.validate()?;
        Ok(c)
    }

    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::InvalidArgument("--out is required".into()))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{}{suffix}", stem.display()))
}

fn load_inputs(inputs: &Inputs) -> Result<(Corpus, EmbeddingMatrix)> {
    Ok((
        corpus::ingest_corpus(&inputs.corpus)?,
        EmbeddingMatrix::read(&inputs.embeddings)?,
    ))
}

fn selected(corpus: &mut Corpus, select: &SplitSelect) -> Result<Vec<usize>> {
    if let Some(path) = &select.splits {
        corpus.apply_split_assignment(&corpus::read_split_assignment(path)?)?;
    }
    if select.split == "all" {
        return Ok((0..corpus.len()).collect());
    }
    let split: Split = select.split.parse()?;
    Ok(corpus.indices_in(split))
}

/// Loads a checkpoint; shared `--gamma` / `--k` override its retrieval settings.
fn scoring_setup(shared: &Shared, inputs: &Inputs, checkpoint: &Path) -> Result<(Corpus, Checkpoint, ScoringContext)> {
    let (corpus, embeddings) = load_inputs(inputs)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut retrieval = ckpt.config.retrieval();
    if let Some(g) = shared.gamma {
        retrieval.gamma = g;
    }
    if let Some(k) = shared.k {
        retrieval.k = k;
    }
    let context = ScoringContext::build(&corpus, &embeddings, &retrieval, Execution::Parallel)?;
    Ok((corpus, ckpt, context))
}

fn run(cli: Cli) -> Result<()> {
    let shared = &cli.shared;
    match &cli.command {
        Command::Synth { papers, dim, topics } => {
            let spec = SyntheticSpec {
                papers: *papers,
                dim: *dim,
                topics: *topics,
                seed: shared.seed.unwrap_or(0),
                ..Default::default()
            };
            let (corpus, embeddings) = generate(&spec)?;
            let out = shared.out()?;
            corpus::persist_corpus(&corpus, with_suffix(out, ".jsonl"))?;
            embeddings.write(out)?;
            println!("{} papers, dim {}", corpus.len(), embeddings.dim());
        }
        Command::Ingest { corpus: path } => {
            let c = corpus::ingest_corpus(path)?;
            if let Some(out) = &shared.out {
                corpus::persist_corpus(&c, out)?;
            }
            println!("ingested {} records", c.len());
        }
        Command::EmbedImport { inputs } => {
            let (corpus, embeddings) = load_inputs(inputs)?;
            let index = EmbeddingIndex::build(&corpus, &embeddings)?;
            let data = (0..index.len())
                .flat_map(|i| index.vector(i).iter().map(|&x| x as f32).collect::<Vec<_>>())
                .collect();
            let ids = (0..index.len()).map(|i| index.id(i).to_string()).collect();
            let normalized = EmbeddingMatrix::new(index.dim(), ids, data)?;
            normalized.write(shared.out()?)?;
            let (json, _) = pair_paths(shared.out()?);
            println!("imported {} rows of dim {} -> {}", index.len(), index.dim(), json.display());
        }
        Command::Index { inputs, past_only } => {
            let (corpus, embeddings) = load_inputs(inputs)?;
            let mut params = shared.config()?.retrieval();
            params.past_only |= past_only;
            let index = EmbeddingIndex::build(&corpus, &embeddings)?;
            let sets = retrieve_all(&index, &params, Execution::Parallel);
            let mut text = serde_json::to_string_pretty(&sets).expect("reference sets serialize");
            text.push('\n');
            write(shared.out()?, &text)?;
            let found: usize = sets.iter().map(|s| s.references.len()).sum();
            println!("{} targets, {found} references", sets.len());
        }
        Command::Split {
            corpus: path,
            fraction,
            test_count,
        } => {
            let config = shared.config()?;
            let mut c = corpus::ingest_corpus(path)?;
            if let Some(n) = test_count {
                c = corpus::split_test(&c, *n, config.seed)?;
            }
            let fraction = fraction.unwrap_or(config.validation_fraction);
            let c = corpus::split_validation(&c, fraction, config.seed)?;
            corpus::write_split_assignment(&c.split_assignment(), shared.out()?)?;
            println!(
                "train {}, validation {}, test {}",
                c.count_in(Split::Train),
                c.count_in(Split::Validation),
                c.count_in(Split::Test)
            );
        }
        Command::Train {
            inputs,
            splits,
            log,
            past_only,
            raw_listmle,
            clip,
            momentum,
            hidden_dim,
            scorer_layers,
            validation_fraction,
            selection_metric,
            fast,
        } => {
            let mut config = shared.config()?;
            config.past_only |= past_only;
            config.raw_listmle |= raw_listmle;
            config.reproducible &= !fast;
            if let Some(c) = clip {
                config.clip = Some(*c);
            }
            if let Some(v) = momentum {
                config.momentum = *v;
            }
            if let Some(v) = hidden_dim {
                config.hidden_dim = *v;
            }
            if let Some(v) = scorer_layers {
                config.scorer_layers = *v;
            }
            if let Some(v) = validation_fraction {
                config.validation_fraction = *v;
            }
            if let Some(v) = selection_metric {
                config.selection_metric = v.clone();
            }
            config.validate()?;
            let (mut corpus, embeddings) = load_inputs(inputs)?;
            if let Some(path) = splits {
                corpus.apply_split_assignment(&corpus::read_split_assignment(path)?)?;
            }
            let out = shared.out()?;
            let run = Trainer::new(&corpus, &embeddings, &config)?.run()?;
            run.best.save(out)?;
            let log_path = log.clone().unwrap_or_else(|| with_suffix(out, ".log.csv"));
            write(&log_path, &run.log_csv())?;
            let best = run
                .best
                .validation_eval
                .as_ref()
                .map(|v| v.csv_row())
                .unwrap_or_else(|| "no validation".into());
            println!("best epoch {}: {best}", run.best.epoch);
        }
        Command::Eval {
            inputs,
            checkpoint,
            select,
        } => {
            let (mut corpus, ckpt, context) = scoring_setup(shared, inputs, checkpoint)?;
            let papers = selected(&mut corpus, select)?;
            let eval = trainer::evaluate(&ckpt, &context, &papers, Execution::Parallel)?;
            match &shared.out {
                Some(out) => {
                    write(&with_suffix(out, ".csv"), &eval.to_csv())?;
                    let mut json = serde_json::to_string_pretty(&eval).expect("eval serializes");
                    json.push('\n');
                    write(&with_suffix(out, ".json"), &json)?;
                }
                None => print!("{}", eval.to_csv()),
            }
        }
        Command::Rank { inputs, checkpoint } => {
            let (corpus, ckpt, context) = scoring_setup(shared, inputs, checkpoint)?;
            let all: Vec<usize> = (0..corpus.len()).collect();
            let scores = context.predict(&ckpt.params, &all, Execution::Parallel)?;
            let rows = output::rank_papers(&corpus, &scores)?;
            write(shared.out()?, &output::rank_csv(&rows))?;
            println!("ranked {} papers", rows.len());
        }
        Command::Recommend {
            inputs,
            checkpoint,
            n,
            date,
        } => {
            let (corpus, ckpt, context) = scoring_setup(shared, inputs, checkpoint)?;
            let all: Vec<usize> = (0..corpus.len()).collect();
            let scores = context.predict(&ckpt.params, &all, Execution::Parallel)?;
            let generated_at = match date {
                Some(d) => *d,
                None => corpus
                    .records()
                    .iter()
                    .map(|r| r.published_at)
                    .max()
                    .ok_or_else(|| Error::InvalidArgument("empty corpus".into()))?,
            };
            let digest = RecommendationDigest::build(&corpus, &context, &scores, *n, generated_at)?;
            let out = shared.out()?;
            write(&with_suffix(out, ".json"), &digest.to_json())?;
            write(&with_suffix(out, ".md"), &digest.to_markdown())?;
            println!("{} recommendations", digest.entries.len());
        }
        Command::Report { evals, steps } => {
            let read_all = |paths: &[PathBuf]| -> Result<Vec<(String, String)>> {
                paths
                    .iter()
                    .map(|p| {
                        let text = fs::read_to_string(p).map_err(|e| Error::Io {
                            path: p.clone(),
                            source: e,
                        })?;
                        let name = p
                            .file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_default();
                        Ok((name, text))
                    })
                    .collect()
            };
            let report = output::build_report(&read_all(evals)?, &read_all(steps)?)?;
            match &shared.out {
                Some(out) => write(out, &report)?,
                None => print!("{report}"),
            }
        }
        Command::GradCheck {
            inputs,
            checkpoint,
            epsilon,
            tolerance,
        } => {
            let (corpus, embeddings) = load_inputs(inputs)?;
            let (config, params) = match checkpoint {
                Some(path) => {
                    let ckpt = Checkpoint::load(path)?;
                    let config = shared.apply(ckpt.config.clone())?;
                    (config, ckpt.params)
                }
                None => {
                    let config = shared.config()?;
                    let trainer = Trainer::new(&corpus, &embeddings, &config)?;
                    let params = trainer.initial_params()?;
                    (config, params)
                }
            };
            let context = ScoringContext::build(&corpus, &embeddings, &config.retrieval(), Execution::Parallel)?;
            let all: Vec<usize> = (0..corpus.len()).collect();
            let batches = make_batches(&all, config.batch, config.seed, 1, config.loss)?;
            let batch = batches
                .first()
                .ok_or_else(|| Error::InvalidArgument("corpus too small for one batch".into()))?;
            let check = trainer::check_gradients(&params, &context, batch, &config, *epsilon)?;
            println!(
                "loss {}: max relative error {:e} over {} coordinates",
                config.loss, check.max_rel_error, check.coordinates
            );
            if check.max_rel_error.is_nan() || check.max_rel_error >= *tolerance {
                return Err(Error::NonFinite(format!(
                    "gradient check: {:e} exceeds tolerance {tolerance:e}",
                    check.max_rel_error
                )));
            }
        }
        Command::StepDiag {
            inputs,
            checkpoint,
            select,
        } => {
            let (mut corpus, ckpt, context) = scoring_setup(shared, inputs, checkpoint)?;
            let papers = selected(&mut corpus, select)?;
            let rows = trainer::step_diagnostic(&ckpt.params, &context, &papers, Execution::Parallel)?;
            let csv = trainer::step_diagnostic_csv(&rows);
            match &shared.out {
                Some(out) => write(out, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error[input]: {}", e.kind());
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = if e.is_numeric() { ("numeric", 2) } else { ("input", 1) };
            eprintln!("error[{kind}]: {e}");
            ExitCode::from(code)
        }
    }
}
