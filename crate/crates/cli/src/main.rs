//! Command-line driver for communication-graph pruning experiments.
//!
//! Verbs: `train` (multi-query optimize/prune/evaluate), `probe` (random
//! edge-removal redundancy curve), `attack` (paired adversarial arms),
//! `report` (token/cost comparison of two ledgers), and `replay` (rerun a
//! config and verify byte-identical outputs).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use commprune_core::cost::{reduction_report_csv, Prices, TokenLedger};
use commprune_core::harness::{
    attack_experiment, attack_to_csv, dirs_identical, load_config, load_queries, probe_to_csv,
    redundancy_probe, run_multi_query, write_multi_query_outputs, ExperimentConfig,
    RedundancyProbeConfig, MULTI_QUERY_FILES,
};

#[derive(Parser)]
#[command(name = "commprune", version, about = "Prune multi-agent communication graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Multi-query training: optimize masks on the first train_queries
    /// queries, prune once, answer the rest on the fixed subgraph.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Run only this seed instead of every seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Measure utility under random edge removal at the given ratios.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3])]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Allowable utility drop when flagging redundancy witnesses.
        #[arg(long, default_value_t = 0.01)]
        epsilon: f64,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the attacked vanilla and attacked pruned pipelines on the same
    /// seeds and compare held-out accuracy.
    Attack {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare two ledger files and emit a token/cost reduction CSV.
    Report {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        treated: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        prompt_price: Option<f64>,
        #[arg(long)]
        completion_price: Option<f64>,
    },
    /// Re-run a training config and verify the outputs are byte-identical
    /// to a reference directory. Exits 2 on mismatch.
    Replay {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, out_dir, seed } => {
            let (cfg, queries) = load_experiment(&config)?;
            let seeds = pick_seeds(&cfg, seed);
            run_train(&cfg, &queries, &seeds, &out_dir)?;
            println!("train: wrote results for {} seed(s) to {}", seeds.len(), out_dir.display());
        }
        Command::Probe { config, out_dir, ratios, trials, epsilon, seed } => {
            let (cfg, queries) = load_experiment(&config)?;
            let probe_cfg = RedundancyProbeConfig { ratios, trials, epsilon };
            let seed = seed.unwrap_or(cfg.seeds[0]);
            let outcome = redundancy_probe(&cfg, &probe_cfg, &queries, seed)?;
            fs::create_dir_all(&out_dir)?;
            fs::write(out_dir.join("probe.csv"), probe_to_csv(&outcome)?)?;
            fs::write(
                out_dir.join("probe.json"),
                serde_json::to_string_pretty(&outcome)?,
            )?;
            for row in &outcome.rows {
                println!(
                    "probe: ratio {:.2} mean {:.4} +- {:.4} witness={}",
                    row.ratio, row.mean_utility, row.std_utility, row.witness
                );
            }
            println!("probe: baseline {:.4}", outcome.baseline_utility);
        }
        Command::Attack { config, out_dir } => {
            let (cfg, queries) = load_experiment(&config)?;
            let outcome = attack_experiment(&cfg, &queries)?;
            fs::create_dir_all(&out_dir)?;
            fs::write(out_dir.join("attack.csv"), attack_to_csv(&outcome)?)?;
            fs::write(
                out_dir.join("attack.json"),
                serde_json::to_string_pretty(&outcome)?,
            )?;
            let wins = outcome
                .per_seed
                .iter()
                .filter(|r| r.pruned_holdout_accuracy >= r.vanilla_holdout_accuracy)
                .count();
            println!(
                "attack: pruned arm matched or beat vanilla on {wins}/{} seeds",
                outcome.per_seed.len()
            );
        }
        Command::Report { baseline, treated, out, prompt_price, completion_price } => {
            let before = TokenLedger::from_json(&fs::read_to_string(&baseline)?)?;
            let after = TokenLedger::from_json(&fs::read_to_string(&treated)?)?;
            let prices = match (prompt_price, completion_price) {
                (Some(p), Some(c)) => Some(Prices {
                    prompt_per_million: p,
                    completion_per_million: c,
                }),
                (None, None) => None,
                _ => bail!("provide both --prompt-price and --completion-price or neither"),
            };
            let csv_text =
                reduction_report_csv(&before.totals(), &after.totals(), prices.as_ref())?;
            if let Some(parent) = out.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            fs::write(&out, &csv_text)?;
            print!("{csv_text}");
        }
        Command::Replay { config, out_dir, reference, seed } => {
            let (cfg, queries) = load_experiment(&config)?;
            let seeds = pick_seeds(&cfg, seed);
            run_train(&cfg, &queries, &seeds, &out_dir)?;
            let mut identical = true;
            for s in &seeds {
                let fresh = out_dir.join(format!("seed-{s}"));
                let reference = reference.join(format!("seed-{s}"));
                if !dirs_identical(&fresh, &reference, MULTI_QUERY_FILES)? {
                    identical = false;
                    eprintln!("replay: seed {s} outputs differ from the reference");
                }
            }
            if !identical {
                std::process::exit(2);
            }
            println!("replay: outputs are byte-identical to the reference");
        }
    }
    Ok(())
}

fn load_experiment(
    config_path: &Path,
) -> Result<(ExperimentConfig, Vec<commprune_core::message::QueryRecord>)> {
    let cfg = load_config(config_path)
        .with_context(|| format!("loading config {}", config_path.display()))?;
    let base = config_path.parent().unwrap_or_else(|| Path::new("."));
    let queries = load_queries(&cfg.queries, base)?;
    Ok((cfg, queries))
}

fn pick_seeds(cfg: &ExperimentConfig, seed_override: Option<u64>) -> Vec<u64> {
    match seed_override {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    }
}

fn run_train(
    cfg: &ExperimentConfig,
    queries: &[commprune_core::message::QueryRecord],
    seeds: &[u64],
    out_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record([
        "seed",
        "train_accuracy",
        "holdout_accuracy",
        "prompt_tokens",
        "completion_tokens",
    ])?;
    for &seed in seeds {
        let outcome = run_multi_query(cfg, queries, seed)?;
        let seed_dir = out_dir.join(format!("seed-{seed}"));
        write_multi_query_outputs(&seed_dir, cfg, &outcome, seed)?;
        let total = outcome.ledger_total();
        wtr.write_record([
            seed.to_string(),
            outcome
                .train_accuracy
                .map_or(String::new(), |a| format!("{a:.6}")),
            outcome
                .holdout_accuracy
                .map_or(String::new(), |a| format!("{a:.6}")),
            total.prompt_total().to_string(),
            total.completion_total().to_string(),
        ])?;
    }
    let bytes = wtr.into_inner()?;
    fs::write(out_dir.join("summary.csv"), bytes)?;
    Ok(())
}
