use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use anneal_prune::config::RunConfig;
use anneal_prune::design_space::SpaceKind;
use anneal_prune::pipeline::{self, RunManifest};
use anneal_prune::Error;

/// Differentiable channel pruning with annealed channel indicators.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// Root directory for run directories given as bare names.
    #[arg(long, global = true, env = "ANNEAL_PRUNE_RUN_ROOT", default_value = "runs")]
    run_root: PathBuf,
    /// Worker threads (used by `space` to train instances in parallel).
    #[arg(long, global = true, env = "ANNEAL_PRUNE_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search channel indicators and supernet weights.
    Search {
        /// TOML run configuration.
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        config: Option<PathBuf>,
        /// Re-run the configuration recorded in an existing manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Run directory (relative names resolve under the run root).
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Validate configuration and data, print the plan, and exit.
        #[arg(long)]
        dry_run: bool,
        /// Fixed temperature T0 and a 0.55 threshold for binarization.
        #[arg(long)]
        no_annealing: bool,
        /// Optimize weights and indicators jointly on merged data.
        #[arg(long)]
        no_bilevel: bool,
        /// Sparsity regularizer: `flops` (default) or `lasso`.
        #[arg(long, value_parser = ["flops", "lasso"])]
        reg: Option<String>,
    },
    /// Turn the searched indicators into a smaller network.
    Derive {
        #[arg(long)]
        run: PathBuf,
    },
    /// Fine-tune the derived network.
    Finetune {
        #[arg(long)]
        run: PathBuf,
        /// Retrain from fresh weights instead of inheriting them.
        #[arg(long)]
        scratch: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compare the pruned network with an unpruned baseline.
    Eval {
        #[arg(long)]
        run: PathBuf,
    },
    /// Sample and train a design space.
    Space {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "random")]
        kind: SpaceKind,
        #[arg(long, default_value_t = 20)]
        n: usize,
        /// FLOPs band as fractions of the base model, e.g. `0.35,0.45`.
        #[arg(long, value_parser = parse_band)]
        band: Option<(f64, f64)>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize evaluated runs as CSV and a table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where to write the CSV (default: stdout only).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn parse_band(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected LO,HI")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{e}"))?;
    if !(0.0 < lo && lo <= hi) {
        return Err(format!("band needs 0 < LO <= HI, got {lo},{hi}"));
    }
    Ok((lo, hi))
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() || p.starts_with(".") || p.components().count() > 1 {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Dataset(_) | Error::Json(_) | Error::Io { .. } => 2,
        Error::Divergence { .. } => 3,
        Error::LayerCollapsed { .. } => 4,
        _ => 1,
    }
}

fn run(cli: Cli) -> anneal_prune::Result<()> {
    let root = cli.run_root;
    match cli.command {
        Command::Search {
            config,
            manifest,
            run,
            seed,
            dry_run,
            no_annealing,
            no_bilevel,
            reg,
        } => {
            let mut cfg = match (config, manifest) {
                (Some(c), _) => RunConfig::load(&c)?,
                (None, Some(m)) => {
                    let dir = if m.is_dir() { m } else { m.parent().map(Path::to_path_buf).unwrap_or_default() };
                    RunManifest::load(&dir)?.config
                }
                (None, None) => unreachable!("clap requires one of them"),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.search.no_annealing |= no_annealing;
            cfg.search.no_bilevel |= no_bilevel;
            if reg.as_deref() == Some("lasso") {
                let r = &mut cfg.regularizers;
                r.lambda_flops = Some(0.0);
                r.lambda_lasso.get_or_insert(0.01);
            }
            if dry_run {
                let plan = pipeline::dry_run(&cfg)?;
                println!("{}", serde_json::to_string_pretty(&plan)?);
                return Ok(());
            }
            let dir = resolve(&root, &run);
            let result = pipeline::cmd_search(&cfg, &dir, cli.threads)?;
            let last = result.metrics.last();
            println!(
                "search done: {} epochs, expected FLOPs ratio {:.3}, binarized {:.3} -> {}",
                result.metrics.len(),
                last.map_or(1.0, |m| m.flops_ratio),
                last.map_or(0.0, |m| m.binarized_fraction),
                dir.display()
            );
        }
        Command::Derive { run } => {
            let out = pipeline::cmd_derive(&resolve(&root, &run))?;
            println!("derived widths {:?}", out.site_widths);
            println!("FLOPs {} (equivalence {:.2e})", out.flops.summary(), out.max_deviation);
        }
        Command::Finetune { run, scratch, epochs } => {
            let acc = pipeline::cmd_finetune(&resolve(&root, &run), scratch, epochs)?;
            println!("best accuracy {:.2}%", 100.0 * acc);
        }
        Command::Eval { run } => {
            let r = pipeline::cmd_eval(&resolve(&root, &run))?;
            println!(
                "unpruned {:.2}%  pruned {:.2}%  Acc Drop {:.2}  FLOPs {} -> {} ({:.1}% pruned)",
                100.0 * r.unpruned_accuracy,
                100.0 * r.pruned_accuracy,
                r.acc_drop,
                r.unpruned_flops,
                r.pruned_flops,
                100.0 * r.pruning_ratio
            );
        }
        Command::Space {
            config,
            kind,
            n,
            band,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let spec = cfg.build_spec()?;
            let space = pipeline::space_config(kind, n, cfg.seed, band, &spec);
            let s = pipeline::cmd_space(&cfg, &space, &resolve(&root, &out), cli.threads)?;
            let pct = |v: Option<f64>| v.map_or("-".into(), |v| format!("{:.2}%", 100.0 * v));
            println!(
                "{:?} space: {} ({} instances) best {} mean {} std {}",
                s.kind,
                s.status,
                s.results.len(),
                pct(s.best),
                pct(s.mean),
                pct(s.std)
            );
        }
        Command::Report { runs, csv } => {
            let runs: Vec<PathBuf> = runs.iter().map(|r| resolve(&root, r)).collect();
            let (text, table) = pipeline::cmd_report(&runs)?;
            if let Some(path) = csv {
                std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
            }
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
