//! `ebrank`: train, score, select, triage and evaluate candidate pools from
//! the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ebrank::ablation::AblationSpec;
use ebrank::diagnostics::{DfrConfig, DFR_EPOCHS};
use ebrank::pipeline::{self, BackendSpec, DfrJob, PoolInput, ScorerSource, SimGrid, SyntheticSpec};
use ebrank::pool::PoolFormat;
use ebrank::synth;
use ebrank::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "ebrank", version, about = "Energy-based verification and selection for candidate pools")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON run configuration; flags below override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Constraint weight for every task kind.
    #[arg(long, global = true)]
    lambda: Option<f64>,

    #[arg(long, global = true)]
    theta_sigma: Option<f64>,

    #[arg(long, global = true)]
    theta_abstain: Option<f64>,

    /// Ensemble size.
    #[arg(long, global = true)]
    k: Option<usize>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    epochs: Option<usize>,

    #[arg(long, global = true)]
    max_pairs: Option<usize>,

    #[arg(long, global = true)]
    n_pass2: Option<usize>,

    /// Violation score at or below which an itinerary counts as correct.
    #[arg(long, global = true)]
    pass_threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct PoolArgs {
    /// Candidate pools (JSON Lines unless --json-array).
    #[arg(long)]
    pools: PathBuf,

    /// Pools file is a single JSON array.
    #[arg(long)]
    json_array: bool,

    /// Sandbox database for itinerary checking.
    #[arg(long)]
    db: Option<PathBuf>,
}

impl PoolArgs {
    fn input(&self) -> PoolInput {
        PoolInput {
            path: self.pools.clone(),
            format: if self.json_array { PoolFormat::JsonArray } else { PoolFormat::Jsonl },
            db: self.db.clone(),
        }
    }
}

#[derive(Args, Debug)]
struct ScorerArgs {
    /// Trained checkpoint.
    #[arg(long, required_unless_present = "stub_perfect")]
    checkpoint: Option<PathBuf>,

    /// Use a label-reading scorer instead of a checkpoint.
    #[arg(long, conflicts_with = "checkpoint")]
    stub_perfect: bool,
}

impl ScorerArgs {
    fn source(&self) -> ScorerSource {
        match &self.checkpoint {
            Some(p) if !self.stub_perfect => ScorerSource::Checkpoint(p.clone()),
            _ => ScorerSource::Perfect,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BackendKind {
    None,
    Replay,
    Synthetic,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SynthKind {
    Separable,
    Confounded,
    KkPuzzles,
    Itineraries,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Validate pools and rewrite them as canonical JSON Lines.
    Ingest {
        #[command(flatten)]
        pools: PoolArgs,
        /// Shuffle candidate order with the configured shuffle seed.
        #[arg(long)]
        shuffle: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the ensemble scorer and write a checkpoint.
    Train {
        #[command(flatten)]
        pools: PoolArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-candidate energy breakdowns.
    Score {
        #[command(flatten)]
        pools: PoolArgs,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the minimum-energy candidate of each pool.
    Select {
        #[command(flatten)]
        pools: PoolArgs,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select, regenerate uncertain or violating picks, and reselect.
    Triage {
        #[command(flatten)]
        pools: PoolArgs,
        #[command(flatten)]
        scorer: ScorerArgs,
        #[arg(long, value_enum, default_value = "none")]
        backend: BackendKind,
        /// JSON Lines of regenerated candidates for the replay backend.
        #[arg(long, required_if_eq("backend", "replay"))]
        replay: Option<PathBuf>,
        /// Probability that a synthetic regeneration is correct.
        #[arg(long, default_value_t = 0.7)]
        accuracy: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score labeled pools and write the evaluation report with baselines.
    Eval {
        #[command(flatten)]
        pools: PoolArgs,
        #[command(flatten)]
        scorer: ScorerArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Screen a scorer for generator preference.
    Diagnose {
        #[command(flatten)]
        pools: PoolArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain the heads on group-balanced data.
    Dfr {
        /// Pools the balanced set is drawn from.
        #[command(flatten)]
        pools: PoolArgs,
        /// Pools screened before and after (default: the balance pools).
        #[arg(long)]
        eval_pools: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Maximum candidates per (generator, label) cell.
        #[arg(long, default_value_t = 396)]
        cap: usize,
        #[arg(long, default_value_t = DFR_EPOCHS)]
        dfr_epochs: usize,
        #[arg(long)]
        out_checkpoint: PathBuf,
        #[arg(long)]
        out_report: PathBuf,
    },
    /// Pass@1 and sigma-AUROC for smaller ensembles, smaller pools and
    /// single-generator pools.
    Ablate {
        #[command(flatten)]
        pools: PoolArgs,
        #[command(flatten)]
        scorer: ScorerArgs,
        /// Ensemble sizes (default: every size up to the scorer's K).
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = AblationSpec::default().ns)]
        ns: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ensemble voting accuracy: closed form, exact and Monte Carlo.
    Simulate {
        #[arg(long, value_delimiter = ',', default_values_t = SimGrid::default().ks)]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = SimGrid::default().qs)]
        qs: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = SimGrid::default().rhos)]
        rhos: Vec<f64>,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit synthetic pools with known ground truth.
    GenerateSynthetic {
        #[arg(value_enum)]
        kind: SynthKind,
        /// Number of problems (training problems for confounded).
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        candidates: usize,
        /// Characters per puzzle; 0 mixes 2 to 6.
        #[arg(long, default_value_t = 3)]
        characters: usize,
        #[arg(long, default_value_t = 0.9)]
        imbalance: f64,
        #[arg(long, default_value_t = 6)]
        salience: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a side-by-side summary of evaluation reports.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

fn run_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if g.lambda.is_some() {
        cfg.lambda = g.lambda;
    }
    macro_rules! set {
        ($($field:ident <- $flag:ident),*) => {$(
            if let Some(v) = g.$flag {
                cfg.$field = v;
            }
        )*};
    }
    set!(theta_sigma <- theta_sigma, theta_abstain <- theta_abstain, k <- k, epochs <- epochs,
         max_pairs_per_problem <- max_pairs, n_pass2 <- n_pass2, pass_threshold <- pass_threshold);
    if let Some(s) = g.seed {
        cfg.master_seed = s;
        cfg.shuffle_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(w) = cli.global.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build_global()
            .context("failed to start the worker pool")?;
    }
    let cfg = run_config(&cli.global)?;
    match cli.command {
        Command::Ingest { pools, shuffle, out } => {
            let s = pipeline::cmd_ingest(&cfg, &pools.input(), shuffle, &out)?;
            println!("ingested {} pools ({} candidates, {} labeled) into {}", s.n_pools, s.n_candidates, s.n_labeled_pools, out.display());
        }
        Command::Train { pools, out } => {
            let s = pipeline::cmd_train(&cfg, &pools.input(), &out)?;
            println!("trained {} members on {} pools ({} with contrastive pairs)", s.member_losses.len(), s.n_pools, s.n_usable);
            for (k, loss) in s.member_losses.iter().enumerate() {
                println!("member {k}: pair loss {loss:.6}");
            }
            println!("checkpoint: {}", out.display());
        }
        Command::Score { pools, scorer, out } => {
            let n = pipeline::cmd_score(&cfg, &pools.input(), &scorer.source(), &out)?;
            println!("scored {n} pools into {}", out.display());
        }
        Command::Select { pools, scorer, out } => {
            let r = pipeline::cmd_select(&cfg, &pools.input(), &scorer.source(), &out)?;
            println!("selected candidates for {} pools into {}", r.len(), out.display());
        }
        Command::Triage {
            pools,
            scorer,
            backend,
            replay,
            accuracy,
            out,
        } => {
            let spec = match backend {
                BackendKind::None => BackendSpec::None,
                BackendKind::Replay => BackendSpec::Replay(replay.context("--replay is required for the replay backend")?),
                BackendKind::Synthetic => BackendSpec::Synthetic { accuracy },
            };
            let s = pipeline::cmd_triage(&cfg, &pools.input(), &scorer.source(), &spec, &out)?;
            print_json(&s)?;
        }
        Command::Eval { pools, scorer, out } => {
            let a = pipeline::cmd_eval(&cfg, &pools.input(), &scorer.source(), &out)?;
            println!("pass@1 {:.4} over {} problems", a.report.pass_at_1, a.report.n_problems);
            for (b, v) in &a.baselines {
                match v {
                    Some(v) => println!("{} pass@1 {v:.4}", b.name()),
                    None => println!("{} pass@1 n/a", b.name()),
                }
            }
            println!("report: {}", out.join(pipeline::REPORT_JSON).display());
        }
        Command::Diagnose { pools, checkpoint, out } => {
            let r = pipeline::cmd_diagnose(&cfg, &pools.input(), &checkpoint, &out)?;
            print_json(&r)?;
        }
        Command::Dfr {
            pools,
            eval_pools,
            checkpoint,
            cap,
            dfr_epochs,
            out_checkpoint,
            out_report,
        } => {
            let balance = pools.input();
            let eval = eval_pools.map(|p| PoolInput {
                path: p,
                ..balance.clone()
            });
            let job = DfrJob {
                checkpoint,
                balance,
                eval,
                cap_per_cell: cap,
                dfr: DfrConfig {
                    epochs: dfr_epochs,
                    ..DfrConfig::from_run(&cfg)
                },
                out_checkpoint,
                out_report,
            };
            print_json(&pipeline::cmd_dfr(&cfg, &job)?)?;
        }
        Command::Ablate {
            pools,
            scorer,
            ks,
            ns,
            out,
        } => {
            let spec = AblationSpec {
                ks,
                ns,
                seed: cfg.shuffle_seed,
            };
            let a = pipeline::cmd_ablate(&cfg, &pools.input(), &scorer.source(), &spec, &out)?;
            for r in &a.rows {
                let auroc = r.sigma_auroc.map_or("n/a".to_string(), |v| format!("{v:.4}"));
                println!(
                    "{:<14} {:<10} pass@1 {:.4}  sigma-AUROC {auroc}  ({} problems)",
                    serde_json::to_value(r.axis)?.as_str().unwrap_or_default(),
                    r.setting,
                    r.pass_at_1,
                    r.n_problems
                );
            }
        }
        Command::Simulate { ks, qs, rhos, trials, out } => {
            let grid = SimGrid {
                ks,
                qs,
                rhos,
                trials,
                seed: cfg.master_seed,
            };
            let rows = pipeline::cmd_simulate(&grid, &out)?;
            println!("wrote {} grid points to {}", rows.len(), out.display());
        }
        Command::GenerateSynthetic {
            kind,
            n,
            candidates,
            characters,
            imbalance,
            salience,
            out,
        } => {
            let seed = cfg.master_seed;
            let spec = match kind {
                SynthKind::Separable => SyntheticSpec::Separable(synth::SeparableParams {
                    n_problems: n,
                    n_candidates: candidates,
                    seed,
                    ..Default::default()
                }),
                SynthKind::Confounded => SyntheticSpec::Confounded(synth::ConfoundedParams {
                    n_train: n,
                    imbalance,
                    salience,
                    seed,
                    ..Default::default()
                }),
                SynthKind::KkPuzzles => SyntheticSpec::KkPuzzles(synth::KkParams {
                    n,
                    n_characters: characters,
                    n_candidates: candidates,
                    seed,
                }),
                SynthKind::Itineraries => SyntheticSpec::Itineraries(synth::ItineraryParams { n, seed }),
            };
            let m = pipeline::cmd_generate_synthetic(&spec, &out)?;
            println!("wrote {} into {}", m.files.join(", "), out.display());
        }
        Command::Report { reports } => print!("{}", pipeline::cmd_report(&reports)?),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<ebrank::Error>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
