//! Command-line surface: corpus generation, training, calibration, tree
//! building, decoding, and benchmarking.
//!
//! Configuration comes from flags, optionally seeded from a `key=value`
//! config file (`--config`); flags override the file. The `SPECDEC_SEED`
//! environment variable supplies a default seed, but a flag-provided seed
//! wins. Every stochastic subcommand requires a seed.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use specdec::bench::{run_benchmark, BenchPoint};
use specdec::corpus::{gen_corpus, read_corpus, write_corpus};
use specdec::decode::{speculative_decode, ToleranceConfig};
use specdec::error::{Error, Result};
use specdec::model::markov::{MarkovOracle, TransitionSpec};
use specdec::model::windowed::{TrainConfig, TrainMode, WindowedArModel};
use specdec::model::Model;
use specdec::rng::RandomStream;
use specdec::sampling::{SamplingConfig, TokenId};
use specdec::tree::{
    build_sparse_tree, calibrate, CalibrationTable, DraftTreeTopology, TreeBudget,
};

/// Rewrites argv: config-file entries become flags inserted right after the
/// subcommand (so explicit flags override them), and the environment seed
/// is appended when no seed is present anywhere.
pub fn expand_args(mut args: Vec<String>) -> Result<Vec<String>> {
    // pull out --config <path> / --config=<path>
    let mut config_path: Option<String> = None;
    let mut i = 0;
    while i < args.len() {
        if args[i] == "--config" {
            if i + 1 >= args.len() {
                return Err(Error::InvalidConfig("--config needs a path".into()));
            }
            config_path = Some(args.remove(i + 1));
            args.remove(i);
        } else if let Some(path) = args[i].strip_prefix("--config=") {
            config_path = Some(path.to_string());
            args.remove(i);
        } else {
            i += 1;
        }
    }
    if args.len() < 2 {
        return Ok(args);
    }
    let insert_at = 2; // right after the subcommand name
    if let Some(path) = config_path {
        let path = Path::new(&path);
        let text = std::fs::read_to_string(path).map_err(|e| Error::from_io_at(e, path))?;
        let given: Vec<String> = args
            .iter()
            .filter(|a| a.starts_with("--"))
            .map(|a| a.split('=').next().unwrap().to_string())
            .collect();
        let mut flags = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("config line {}: expected key=value", lineno + 1))
            })?;
            let flag = format!("--{}", key.trim());
            // an explicit command-line flag wins over the config file
            if given.iter().any(|g| *g == flag) {
                continue;
            }
            flags.push(flag);
            flags.push(value.trim().to_string());
        }
        args.splice(insert_at..insert_at, flags);
    }
    let has_seed = args.iter().any(|a| a == "--seed" || a.starts_with("--seed="));
    if !has_seed {
        if let Ok(seed) = std::env::var("SPECDEC_SEED") {
            args.splice(insert_at..insert_at, ["--seed".to_string(), seed]);
        }
    }
    Ok(args)
}

#[derive(Parser, Debug)]
#[command(name = "specdec", version, about = "Draft-head speculative decoding engine")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic Markov-chain token corpus.
    GenCorpus(GenCorpusArgs),
    /// Train the windowed AR model with weighted multi-head loss.
    Train(TrainArgs),
    /// Estimate per-(head, rank) acceptance probabilities on a corpus.
    Calibrate(CalibrateArgs),
    /// Build a budgeted sparse candidate tree from a calibration table.
    BuildTree(BuildTreeArgs),
    /// Run speculative decoding and print tokens plus summary statistics.
    Decode(DecodeArgs),
    /// Benchmark speculative against vanilla decoding over a grid.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct GenCorpusArgs {
    /// Vocabulary size V
    #[arg(long, default_value_t = 16)]
    vocab: usize,
    /// Transition spec: uniform | identity | skew:<alpha> | <matrix file>
    #[arg(long, default_value = "skew:0.7")]
    transition: String,
    /// Number of tokens to generate
    #[arg(long, default_value_t = 20_000)]
    length: usize,
    /// Initial token (uniformly sampled when omitted)
    #[arg(long)]
    start: Option<u32>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch per-head cross-entropy log (CSV)
    #[arg(long)]
    log: Option<PathBuf>,
    /// Number of draft heads K
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Context window length
    #[arg(long, default_value_t = 8)]
    window: usize,
    #[arg(long, default_value_t = 8)]
    embed: usize,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value_t = 0.8)]
    lambda: f64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// wot (frozen base) or wt (joint fine-tuning)
    #[arg(long, default_value = "wt")]
    mode: String,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Heads to calibrate (defaults to the model's K)
    #[arg(long)]
    heads: Option<usize>,
    /// Candidate ranks per head (top-k branching)
    #[arg(long, default_value_t = 10)]
    branch: usize,
    #[arg(long, default_value_t = 0.9)]
    top_p: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BuildTreeArgs {
    #[arg(long)]
    calibration: PathBuf,
    /// Total node budget, root included
    #[arg(long, default_value_t = 64)]
    budget: usize,
    /// Tree depth (defaults to the table's K)
    #[arg(long)]
    heads: Option<usize>,
    /// Branching (defaults to the table's k)
    #[arg(long)]
    branch: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    tree: PathBuf,
    /// Prompt as space-separated token ids, e.g. "3 1 2"
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    tokens: usize,
    #[arg(long, default_value_t = 3)]
    tau: usize,
    #[arg(long, default_value_t = 0.9)]
    top_p: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calibration: PathBuf,
    /// Corpus supplying the benchmark prompt
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Directory for the plot-data files (vs candidates and vs tau)
    #[arg(long)]
    plot_dir: Option<PathBuf>,
    /// Node budgets, comma separated
    #[arg(long, value_delimiter = ',', default_value = "64")]
    budgets: Vec<usize>,
    /// Tolerance values, comma separated
    #[arg(long, value_delimiter = ',', default_value = "3")]
    taus: Vec<usize>,
    /// Heads to use (defaults to the model's K)
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, default_value_t = 500)]
    tokens: usize,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0.9)]
    top_p: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Transition spec of a ground-truth oracle for the NLL column
    #[arg(long)]
    nll_transition: Option<String>,
    #[arg(long)]
    seed: u64,
}

pub fn run(args: Vec<String>) -> Result<()> {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        // let clap print its own usage/help text; it exits with code 2 on
        // a genuine parse error and 0 for --help/--version
        Err(e) => e.exit(),
    };
    match cli.command {
        Command::GenCorpus(args) => cmd_gen_corpus(args),
        Command::Train(args) => cmd_train(args),
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::BuildTree(args) => cmd_build_tree(args),
        Command::Decode(args) => cmd_decode(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn check_dim(field: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            field: field.into(),
            expected: expected as u64,
            found: found as u64,
        });
    }
    Ok(())
}

fn cmd_gen_corpus(args: GenCorpusArgs) -> Result<()> {
    let spec = TransitionSpec::parse(&args.transition)?;
    let oracle = MarkovOracle::from_spec(&spec, args.vocab, 1)?;
    let mut rng = RandomStream::new(args.seed);
    let tokens = gen_corpus(&oracle, args.length, args.start.map(TokenId), &mut rng)?;
    write_corpus(&args.out, args.vocab, &tokens)?;
    println!(
        "wrote {} tokens over V={} to {}",
        tokens.len(),
        args.vocab,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (vocab, tokens) = read_corpus(&args.corpus)?;
    if tokens.len() < args.window + args.heads + 2 {
        return Err(Error::InvalidConfig(format!(
            "corpus has {} tokens; training needs more than window + K + 1 = {}",
            tokens.len(),
            args.window + args.heads + 1
        )));
    }
    let cfg = TrainConfig {
        lambda: args.lambda,
        learning_rate: args.lr,
        mode: TrainMode::parse(&args.mode)?,
        epochs: args.epochs,
        batch_size: args.batch,
    };
    let mut rng = RandomStream::new(args.seed);
    let mut model = WindowedArModel::new_random(
        vocab,
        args.window,
        args.embed,
        args.hidden,
        args.heads,
        &mut rng,
    )?;
    let (log, skipped) = model.train(&tokens, &cfg, &mut rng)?;
    model.save(&args.out)?;
    if let Some(log_path) = &args.log {
        let mut out = String::from("epoch,head,ce\n");
        for (epoch, head, ce) in &log {
            out.push_str(&format!("{epoch},{head},{ce:.6}\n"));
        }
        std::fs::write(log_path, out).map_err(|e| Error::from_io_at(e, log_path))?;
    }
    let last_epoch: Vec<String> = log
        .iter()
        .filter(|(e, _, _)| *e == args.epochs - 1)
        .map(|(_, head, ce)| format!("head{head}={ce:.4}"))
        .collect();
    println!(
        "trained {} params ({} positions skipped); final CE: {}",
        model.param_count(),
        skipped,
        last_epoch.join(" ")
    );
    Ok(())
}

/// Worker chunk length for calibration; boundaries cost K+1 positions each.
const CALIBRATION_CHUNK: usize = 1024;

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let model = WindowedArModel::load(&args.model)?;
    let (vocab, tokens) = read_corpus(&args.corpus)?;
    check_dim("vocab", model.vocab(), vocab)?;
    let heads = args.heads.unwrap_or_else(|| model.heads());
    if heads > model.heads() {
        return Err(Error::DimensionMismatch {
            field: "heads".into(),
            expected: model.heads() as u64,
            found: heads as u64,
        });
    }
    let branch = args.branch.min(vocab);
    let cfg = SamplingConfig::new(args.top_p, args.temperature)?;
    let sequences: Vec<Vec<TokenId>> = tokens
        .chunks(CALIBRATION_CHUNK)
        .map(|c| c.to_vec())
        .collect();
    let table = calibrate(&model, &sequences, heads, branch, &cfg, args.seed)?;
    table.save(&args.out)?;
    println!(
        "calibrated {} heads x {} ranks over {} trials -> {}",
        table.heads(),
        table.branching(),
        table.trials(),
        args.out.display()
    );
    Ok(())
}

fn cmd_build_tree(args: BuildTreeArgs) -> Result<()> {
    let table = CalibrationTable::load(&args.calibration)?;
    let heads = args.heads.unwrap_or_else(|| table.heads());
    let branch = args.branch.unwrap_or_else(|| table.branching());
    let built = build_sparse_tree(&table, TreeBudget::new(args.budget)?, heads, branch)?;
    if built.clamped {
        eprintln!(
            "warning: budget {} exceeds the full tree; clamped to {} nodes",
            args.budget,
            built.topology.len()
        );
    }
    built.topology.save(&args.out)?;
    println!(
        "built sparse tree with {} nodes (depth {}) -> {}",
        built.topology.len(),
        built.topology.max_depth(),
        args.out.display()
    );
    Ok(())
}

fn parse_prompt(text: &str, vocab: usize) -> Result<Vec<TokenId>> {
    let tokens: Vec<TokenId> = text
        .split_whitespace()
        .map(|w| {
            w.parse::<u32>()
                .map_err(|_| Error::Parse(format!("bad prompt token '{w}'")))
                .and_then(|id| {
                    if (id as usize) < vocab {
                        Ok(TokenId(id))
                    } else {
                        Err(Error::Parse(format!(
                            "prompt token {id} outside vocabulary of size {vocab}"
                        )))
                    }
                })
        })
        .collect::<Result<_>>()?;
    if tokens.is_empty() {
        return Err(Error::InvalidConfig("prompt is empty".into()));
    }
    Ok(tokens)
}

fn check_tree_against_model(topology: &DraftTreeTopology, model: &dyn Model) -> Result<()> {
    if topology.max_depth() > model.draft_head_count() {
        return Err(Error::DimensionMismatch {
            field: "tree depth".into(),
            expected: model.draft_head_count() as u64,
            found: topology.max_depth() as u64,
        });
    }
    if topology.max_branching() > model.vocab_size() {
        return Err(Error::DimensionMismatch {
            field: "tree branching".into(),
            expected: model.vocab_size() as u64,
            found: topology.max_branching() as u64,
        });
    }
    Ok(())
}

fn cmd_decode(args: DecodeArgs) -> Result<()> {
    let model = WindowedArModel::load(&args.model)?;
    let topology = DraftTreeTopology::load(&args.tree)?;
    check_tree_against_model(&topology, &model)?;
    let prompt = parse_prompt(&args.prompt, model.vocab())?;
    let cfg = SamplingConfig::new(args.top_p, args.temperature)?;
    let tol = ToleranceConfig::new(args.tau)?;
    let mut rng = RandomStream::new(args.seed);
    let run = speculative_decode(
        &model,
        &prompt,
        args.tokens,
        &topology,
        &tol,
        &cfg,
        &mut rng,
    )?;
    let rendered: Vec<String> = run.tokens.iter().map(|t| t.to_string()).collect();
    println!("{}", rendered.join(" "));
    println!(
        "passes={} forwards={} mean_accepted={:.4} tokens_per_forward={:.4}",
        run.passes(),
        run.forwards,
        run.mean_accepted(),
        run.tokens_per_forward()
    );
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let model = WindowedArModel::load(&args.model)?;
    let table = CalibrationTable::load(&args.calibration)?;
    let (vocab, tokens) = read_corpus(&args.corpus)?;
    check_dim("vocab", model.vocab(), vocab)?;
    let heads = args.heads.unwrap_or_else(|| model.heads());
    if heads > model.heads() || heads > table.heads() {
        return Err(Error::DimensionMismatch {
            field: "heads".into(),
            expected: model.heads().min(table.heads()) as u64,
            found: heads as u64,
        });
    }
    if args.budgets.is_empty() || args.taus.is_empty() {
        return Err(Error::InvalidConfig("empty benchmark grid".into()));
    }
    let prompt: Vec<TokenId> = tokens.iter().take(16).copied().collect();
    let mut grid = Vec::new();
    for &budget in &args.budgets {
        for &tau in &args.taus {
            grid.push(BenchPoint {
                heads,
                budget,
                tau,
                temperature: args.temperature,
                top_p: args.top_p,
            });
        }
    }
    let nll_oracle = match &args.nll_transition {
        Some(spec) => Some(MarkovOracle::from_spec(
            &TransitionSpec::parse(spec)?,
            vocab,
            1,
        )?),
        None => None,
    };
    let model_id = args
        .model
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".to_string());
    let report = run_benchmark(
        &model,
        &model_id,
        &table,
        &[prompt],
        &grid,
        args.tokens,
        args.reps,
        args.seed,
        nll_oracle.as_ref(),
    )?;
    std::fs::write(&args.out, report.to_csv()).map_err(|e| Error::from_io_at(e, &args.out))?;
    if let Some(dir) = &args.plot_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::from_io_at(e, dir))?;
        let (s_budget, a_budget) = report.plot_vs_budget();
        let (s_tau, a_tau) = report.plot_vs_tau();
        for (name, data) in [
            ("speedup_vs_candidates.tsv", s_budget),
            ("accepted_vs_candidates.tsv", a_budget),
            ("speedup_vs_tau.tsv", s_tau),
            ("accepted_vs_tau.tsv", a_tau),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, data).map_err(|e| Error::from_io_at(e, &path))?;
        }
    }
    println!(
        "wrote {} benchmark rows to {}",
        report.rows.len(),
        args.out.display()
    );
    Ok(())
}
