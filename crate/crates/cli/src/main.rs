//! Operator surface over the experiment pipeline. Precedence for every
//! setting is flag > config file > built-in default; exit codes are 0 on
//! success, 2 for usage/config mistakes, 1 for runtime failures.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use unit_rec::backbone::BackboneKind;
use unit_rec::experiment::{
    run_analyze, run_encode, run_evaluate, run_ingest, run_sweep, run_train, DatasetSource,
    EncoderChoice, ExperimentConfig, SWEEP_DEFAULT_GAMMAS,
};
use unit_rec::uniformity::Strategy;
use unit_rec::{Result, UnitError};

#[derive(Parser)]
#[command(
    name = "unit-rec",
    version,
    about = "Uniformity-regularized text-only sequential recommendation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build catalog, sequences, split, and popularity artifacts.
    Ingest(IngestArgs),
    /// Encode the catalog into the frozen embedding cache.
    Encode(EncodeArgs),
    /// Train the ranker and write log.jsonl + checkpoint.bin.
    Train(TrainArgs),
    /// Rank held-out targets with the saved checkpoint.
    Evaluate(EvaluateArgs),
    /// Train once per gamma and summarize into sweep.csv.
    Sweep(SweepArgs),
    /// Geometry diagnostics and KDE export from the checkpoint.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Jsonl,
    Movielens,
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    None,
    General,
    Seq,
    Pop,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Hash,
    Cache,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Causal,
    Masked,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Overrides dataset.source.
    #[arg(long)]
    format: Option<FormatArg>,
    /// Interactions file (jsonl) or ratings file (movielens).
    #[arg(long)]
    interactions: Option<PathBuf>,
    /// Item-text file (jsonl) or movies file (movielens).
    #[arg(long)]
    items: Option<PathBuf>,
    #[arg(long)]
    min_seq_len: Option<usize>,
}

#[derive(Args)]
struct EncodeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Overrides encoder.kind.
    #[arg(long)]
    encoder: Option<EncoderArg>,
    /// Overrides encoder.dim.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    hash_seed: Option<u64>,
    /// Source cache file for --encoder cache.
    #[arg(long)]
    cache_path: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Overrides uniformity.strategy.
    #[arg(long)]
    strategy: Option<StrategyArg>,
    /// Overrides uniformity.gamma.
    #[arg(long)]
    gamma: Option<f64>,
    /// Overrides uniformity.t.
    #[arg(long)]
    t: Option<f64>,
    /// Overrides uniformity.lambda.
    #[arg(long)]
    lambda: Option<f64>,
    /// Overrides model.kind.
    #[arg(long)]
    kind: Option<KindArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Overrides train.learning_rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Continue from the output directory's checkpoint.
    #[arg(long)]
    resume: bool,
    /// Write wall_time_seconds as 0.0 so logs are byte-comparable.
    #[arg(long)]
    no_wall_time: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Overrides eval.k.
    #[arg(long)]
    k: Option<usize>,
    /// Rank against this many sampled non-target candidates instead of the
    /// full catalog.
    #[arg(long)]
    sampled_candidates: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated gamma list; a seven-point default set when omitted.
    #[arg(long)]
    gammas: Option<String>,
    /// Same overrides as train, applied to every run.
    #[arg(long)]
    strategy: Option<StrategyArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    no_wall_time: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Popular-fraction for the distance split.
    #[arg(long, default_value_t = 0.4)]
    pop_fraction: f64,
    /// KDE grid resolution (grid is kde_grid x kde_grid).
    #[arg(long, default_value_t = 64)]
    kde_grid: usize,
    #[arg(long, default_value_t = 0.1)]
    kde_bandwidth: f64,
}

impl From<FormatArg> for DatasetSource {
    fn from(v: FormatArg) -> Self {
        match v {
            FormatArg::Jsonl => DatasetSource::Jsonl,
            FormatArg::Movielens => DatasetSource::Movielens,
            FormatArg::Synthetic => DatasetSource::Synthetic,
        }
    }
}

impl From<StrategyArg> for Strategy {
    fn from(v: StrategyArg) -> Self {
        match v {
            StrategyArg::None => Strategy::None,
            StrategyArg::General => Strategy::General,
            StrategyArg::Seq => Strategy::Seq,
            StrategyArg::Pop => Strategy::Pop,
        }
    }
}

fn main() {
    let cli = Cli::parse();
    std::process::exit(match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            if e.is_usage() {
                2
            } else {
                1
            }
        }
    });
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest(args) => {
            let mut cfg = args.common.load()?;
            if let Some(f) = args.format {
                cfg.dataset.source = f.into();
            }
            if let Some(p) = args.interactions {
                cfg.dataset.interactions = Some(p);
            }
            if let Some(p) = args.items {
                cfg.dataset.items = Some(p);
            }
            if let Some(m) = args.min_seq_len {
                cfg.dataset.min_seq_len = m;
            }
            cfg.validate()?;
            let artifacts = run_ingest(&cfg)?;
            println!(
                "ingested {} users, {} items (avg len {:.2}, density {:.4}) into {}",
                artifacts.stats.users,
                artifacts.stats.items,
                artifacts.stats.avg_len,
                artifacts.stats.density,
                cfg.out.display()
            );
            Ok(())
        }
        Command::Encode(args) => {
            let mut cfg = args.common.load()?;
            if let Some(k) = args.encoder {
                cfg.encoder.kind = match k {
                    EncoderArg::Hash => EncoderChoice::Hash,
                    EncoderArg::Cache => EncoderChoice::Cache,
                };
            }
            if let Some(d) = args.dim {
                cfg.encoder.dim = d;
            }
            if let Some(s) = args.hash_seed {
                cfg.encoder.hash_seed = s;
            }
            if let Some(p) = args.cache_path {
                cfg.encoder.cache_path = Some(p);
            }
            cfg.validate()?;
            let cache = run_encode(&cfg)?;
            println!("encoded {} items at dim {}", cache.n_items(), cache.dim);
            Ok(())
        }
        Command::Train(args) => {
            let mut cfg = args.common.load()?;
            apply_train_overrides(
                &mut cfg,
                args.strategy,
                args.gamma,
                args.t,
                args.lambda,
                args.kind,
                args.epochs,
                args.batch_size,
                args.lr,
                args.eval_every,
                args.no_wall_time,
            );
            cfg.validate()?;
            let records = run_train(&cfg, args.resume)?;
            let last = records.last().expect("epochs >= 1");
            println!(
                "epoch {}: total_loss {:.6}, HR@20 {:.4}, NDCG@20 {:.4}, uniformity {:.4}",
                last.epoch, last.total_loss, last.hr_at_20, last.ndcg_at_20, last.uniformity_metric
            );
            Ok(())
        }
        Command::Evaluate(args) => {
            let mut cfg = args.common.load()?;
            if let Some(k) = args.k {
                cfg.eval.k = k;
            }
            if let Some(c) = args.sampled_candidates {
                cfg.eval.sampled_candidates = Some(c);
            }
            cfg.validate()?;
            let report = run_evaluate(&cfg)?;
            println!("HR@{} {:.4}, NDCG@{} {:.4}", report.k, report.hr, report.k, report.ndcg);
            Ok(())
        }
        Command::Sweep(args) => {
            let mut cfg = args.common.load()?;
            apply_train_overrides(
                &mut cfg,
                args.strategy,
                None,
                None,
                None,
                None,
                args.epochs,
                None,
                None,
                None,
                args.no_wall_time,
            );
            cfg.validate()?;
            let gammas = match &args.gammas {
                Some(list) => parse_gammas(list)?,
                None => SWEEP_DEFAULT_GAMMAS.to_vec(),
            };
            let rows = run_sweep(&cfg, &gammas)?;
            println!("gamma\thr\tndcg\tuniformity\tstatus");
            for r in &rows {
                let cell = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
                println!(
                    "{}\t{}\t{}\t{}\t{}",
                    r.gamma,
                    cell(r.hr),
                    cell(r.ndcg),
                    cell(r.uniformity_metric),
                    r.status
                );
            }
            Ok(())
        }
        Command::Analyze(args) => {
            let cfg = args.common.load()?;
            cfg.validate()?;
            let (report, _) =
                run_analyze(&cfg, args.pop_fraction, args.kde_grid, args.kde_bandwidth)?;
            println!(
                "ratio {:.4} (intra {:.4} / global {:.4}), distance_pop {:.4}, distance_cold {:.4}",
                report.ratio,
                report.mean_intra_sequence_distance,
                report.mean_global_distance,
                report.distance_pop,
                report.distance_cold
            );
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn apply_train_overrides(
    cfg: &mut ExperimentConfig,
    strategy: Option<StrategyArg>,
    gamma: Option<f64>,
    t: Option<f64>,
    lambda: Option<f64>,
    kind: Option<KindArg>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    eval_every: Option<usize>,
    no_wall_time: bool,
) {
    if let Some(s) = strategy {
        cfg.uniformity.strategy = s.into();
    }
    if let Some(g) = gamma {
        cfg.uniformity.gamma = g;
    }
    if let Some(t) = t {
        cfg.uniformity.t = t;
    }
    if let Some(l) = lambda {
        cfg.uniformity.lambda = l;
    }
    if let Some(k) = kind {
        cfg.model.kind = match k {
            KindArg::Causal => BackboneKind::Causal,
            KindArg::Masked => BackboneKind::Masked,
        };
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(ee) = eval_every {
        cfg.train.eval_every = ee;
    }
    if no_wall_time {
        cfg.train.log_wall_time = false;
    }
}

fn parse_gammas(list: &str) -> Result<Vec<f64>> {
    list.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| UnitError::Usage(format!("bad gamma value '{s}' in --gammas")))
        })
        .collect()
}
