use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use edgecache::baselines::PolicyKind;
use edgecache::experiment::{
    comparison_table, compare_policies, mean_sd, run_experiment, seed_twins, ExperimentConfig, ExperimentOutput,
    SeedSummary,
};
use edgecache::twin::{load_twin, save_twin, TwinModel};
use edgecache::Error;

#[derive(Parser)]
#[command(name = "edgecache", version, about = "Edge-caching simulator with DQN agents and network twins")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; the shipped defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    policy: Option<String>,
    /// `section.key=value`; repeatable.
    #[arg(long = "override")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.
    Run(Common),
    /// Run several policies on identical request streams.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated policies.
        #[arg(long, value_delimiter = ',', default_value = "random,lru,lfu,mfu,basic_dqn,rec,d_rec")]
        policies: Vec<String>,
    },
    /// Twin utilities.
    Twin {
        #[command(subcommand)]
        op: TwinOp,
    },
    /// Run an experiment on a `timestamp,key,op,size` trace.
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: PathBuf,
    },
    /// Check a config and print it with defaults filled in.
    ValidateConfig(Common),
}

#[derive(Subcommand)]
enum TwinOp {
    /// Bootstrap twins from a sampled history and save the global twin.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path.
        #[arg(long)]
        twin: PathBuf,
    },
    /// Write a twin checkpoint as JSON.
    Export {
        #[arg(long)]
        twin: PathBuf,
        #[arg(long)]
        json: PathBuf,
    },
    /// Build a twin checkpoint from JSON.
    Import {
        #[arg(long)]
        json: PathBuf,
        #[arg(long)]
        twin: PathBuf,
    },
    /// Print the BS clustering for a config.
    Cluster(Common),
}

#[derive(Serialize, Deserialize)]
struct TwinJson {
    version: u64,
    creation_step: u64,
    params: Vec<f64>,
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Error> {
    let base = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::shipped_defaults(),
    };
    let mut cfg = base.with_overrides(&c.overrides)?;
    if !c.seed.is_empty() {
        cfg.run.seeds = c.seed.clone();
    }
    if let Some(out) = &c.out {
        cfg.run.out_dir = Some(out.clone());
    }
    if let Some(p) = &c.policy {
        cfg.policy.kind = p.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_run_summary(cfg: &ExperimentConfig, out: &ExperimentOutput) {
    println!("seed,requests,decisions,hit_rate,final_hit_rate,load_spread,mutations");
    for r in &out.runs {
        let s = &r.summary;
        println!(
            "{},{},{},{:.4},{:.4},{:.4},{}",
            s.seed, s.requests, s.decisions, s.hit_rate, s.final_hit_rate, s.load_spread, s.mutations
        );
    }
    let col = |f: &dyn Fn(&SeedSummary) -> f64| {
        mean_sd(&out.runs.iter().map(|r| f(&r.summary)).collect::<Vec<_>>())
    };
    let (hm, hs) = col(&|s| s.final_hit_rate);
    let (lm, ls) = col(&|s| s.load_spread);
    println!(
        "# {}: final hit rate {:.4} ± {:.4}, load spread {:.4} ± {:.4}",
        cfg.policy.kind, hm, hs, lm, ls
    );
}

fn twin_train(common: &Common, twin: &Path) -> Result<(), Error> {
    let cfg = load_config(common)?;
    let ts = seed_twins(&cfg, cfg.run.seeds[0])?;
    save_twin(twin, &ts.global, cfg.twin.history_requests)?;
    println!("clusters: {:?}", ts.clusters.cluster_of);
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(common) => {
            let cfg = load_config(&common)?;
            let out = run_experiment(&cfg)?;
            print_run_summary(&cfg, &out);
        }
        Command::Compare { common, policies } => {
            let cfg = load_config(&common)?;
            let kinds = policies
                .iter()
                .map(|p| p.parse::<PolicyKind>())
                .collect::<Result<Vec<_>, _>>()?;
            let rows = compare_policies(&cfg, &kinds)?;
            let table = comparison_table(&rows);
            print!("{table}");
            if let Some(dir) = &cfg.run.out_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
                let path = dir.join("comparison.csv");
                std::fs::write(&path, table).map_err(|e| Error::Io { path, source: e })?;
            }
        }
        Command::Replay { mut common, trace } => {
            common.overrides.push(format!("workload.trace={:?}", trace.display().to_string()));
            let cfg = load_config(&common)?;
            let out = run_experiment(&cfg)?;
            print_run_summary(&cfg, &out);
        }
        Command::ValidateConfig(common) => {
            let cfg = load_config(&common)?;
            print!("{}", cfg.to_toml_string()?);
        }
        Command::Twin { op } => match op {
            TwinOp::Train { common, twin } => twin_train(&common, &twin)?,
            TwinOp::Export { twin, json } => {
                let (model, header) = load_twin(&twin)?;
                let doc = TwinJson {
                    version: model.version,
                    creation_step: header.creation_step,
                    params: model.params,
                };
                std::fs::write(&json, serde_json::to_vec_pretty(&doc)?).map_err(|e| Error::Io { path: json, source: e })?;
            }
            TwinOp::Import { json, twin } => {
                let text = std::fs::read(&json).map_err(|e| Error::Io { path: json.clone(), source: e })?;
                let doc: TwinJson = serde_json::from_slice(&text)?;
                let model = TwinModel {
                    params: doc.params,
                    version: doc.version,
                };
                save_twin(&twin, &model, doc.creation_step)?;
            }
            TwinOp::Cluster(common) => {
                let cfg = load_config(&common)?;
                let ts = seed_twins(&cfg, cfg.run.seeds[0])?;
                println!("bs,cluster");
                for (bs, c) in ts.clusters.cluster_of.iter().enumerate() {
                    println!("{bs},{c}");
                }
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config { .. } => 2,
                Error::Divergence(_) => 3,
                _ => 1,
            })
        }
    }
}
