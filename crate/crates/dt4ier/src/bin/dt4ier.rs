//! End-to-end pipeline CLI: generate synthetic data, train, evaluate with
//! RTG prompting, sweep prompt proportions, and pretty-print reports.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use dt4ier::checkpoint::Checkpoint;
use dt4ier::eval::{evaluate, read_report_json, rtg_sweep, write_report_json, write_sweep_csv, write_sweep_json};
use dt4ier::model::FeatureMap;
use dt4ier::trajectory::{ingest_log, IngestOptions};
use dt4ier::world::{generate_log, generate_users, WorldManifest};
use dt4ier::{ModelConfig, WorldConfig};

#[derive(Parser)]
#[command(name = "dt4ier", about = "Multi-reward decision transformer pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic session log (and its world manifest).
    GenData {
        /// World config JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output JSONL session log; the manifest lands next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a session log.
    Train {
        /// Model config JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// JSONL session log.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and the metrics log.
        #[arg(long)]
        out: PathBuf,
        /// World manifest with user features; defaults to the manifest
        /// sitting next to the data file when present.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with an RTG prompt proportion.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Prompt proportion in (0, 1].
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Evaluate every trajectory instead of the held-out split.
        #[arg(long, default_value_t = false)]
        full: bool,
    },
    /// Evaluate across a list of prompt proportions.
    SweepRtg {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated proportions, e.g. 0.4,0.5,0.6,0.7,0.8,0.9,1.0
        #[arg(long, default_value = "0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
        rhos: String,
        /// Output CSV path; a plot-ready JSON lands next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = false)]
        full: bool,
    },
    /// Pretty-print an evaluation report.
    Report {
        #[arg(long, name = "in")]
        input: PathBuf,
    },
}

fn load_json_or_default<T: serde::de::DeserializeOwned + Default>(
    path: &Option<PathBuf>,
) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn load_features(data: &PathBuf, manifest: &Option<PathBuf>) -> anyhow::Result<FeatureMap> {
    let path = manifest
        .clone()
        .unwrap_or_else(|| WorldManifest::sibling_path(data));
    if path.exists() {
        let manifest = WorldManifest::load(&path)?;
        log::info!("loaded {} user feature rows from {}", manifest.users.len(), path.display());
        Ok(FeatureMap::from_manifest(&manifest))
    } else {
        log::warn!(
            "no world manifest at {}; balance weights fall back to neutral features",
            path.display()
        );
        Ok(FeatureMap::empty())
    }
}

fn ingest(data: &PathBuf, config: &ModelConfig) -> anyhow::Result<Vec<dt4ier::Trajectory>> {
    let opts = IngestOptions::new(config.trajectory_len, config.state_len, config.action_len);
    Ok(ingest_log(data, &opts)?)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { config, out } => {
            let mut wc: WorldConfig = load_json_or_default(&config)?;
            wc.apply_seed_env();
            wc.validate()?;
            let users = generate_users(&wc);
            let (log, manifest) = generate_log(&users, &wc);
            dt4ier::trajectory::write_session_log(&out, &log)?;
            let manifest_path = WorldManifest::sibling_path(&out);
            manifest.save(&manifest_path)?;
            println!(
                "wrote {} sessions for {} users to {} (manifest: {})",
                log.len(),
                users.len(),
                out.display(),
                manifest_path.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            manifest,
        } => {
            let mut mc: ModelConfig = load_json_or_default(&config)?;
            mc.apply_seed_env();
            mc.validate()?;
            let trajectories = ingest(&data, &mc)?;
            let features = load_features(&data, &manifest)?;
            let started = std::time::Instant::now();
            let (_, _, history) = dt4ier::train::train(mc, &trajectories, &features, Some(&out))?;
            let last = history.last().context("empty training history")?;
            println!(
                "trained {} steps in {:.1}s; final total {:.5} (cross {:.5}, contra {:.5}, br {:.5})",
                history.len(),
                started.elapsed().as_secs_f64(),
                last.total,
                last.cross,
                last.contrastive,
                last.balance
            );
            println!("checkpoint: {}", out.join("checkpoint.json").display());
        }
        Command::Eval {
            ckpt,
            data,
            rho,
            out,
            manifest,
            full,
        } => {
            let (model, _, _) = Checkpoint::load(&ckpt)?.restore()?;
            let trajectories = ingest(&data, &model.config)?;
            let features = load_features(&data, &manifest)?;
            let subject = if full {
                trajectories
            } else {
                dt4ier::eval::split_by_user(&trajectories, 0.1).1
            };
            if subject.is_empty() {
                bail!("no trajectories to evaluate");
            }
            let report = evaluate(&model, &subject, &features, rho)?;
            write_report_json(&out, &report)?;
            print_report(&report);
            println!("report written to {}", out.display());
        }
        Command::SweepRtg {
            ckpt,
            data,
            rhos,
            out,
            manifest,
            full,
        } => {
            let parsed: Vec<f64> = rhos
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .context("parsing --rhos")?;
            let (model, _, _) = Checkpoint::load(&ckpt)?.restore()?;
            let trajectories = ingest(&data, &model.config)?;
            let features = load_features(&data, &manifest)?;
            let subject = if full {
                trajectories
            } else {
                dt4ier::eval::split_by_user(&trajectories, 0.1).1
            };
            if subject.is_empty() {
                bail!("no trajectories to evaluate");
            }
            let rows = rtg_sweep(&model, &subject, &features, &parsed)?;
            write_sweep_csv(&out, &rows)?;
            write_sweep_json(&out.with_extension("json"), &rows)?;
            println!("rho     bleu     rouge    hr       ndcg     sb-urs");
            for (rho, r) in &rows {
                println!(
                    "{rho:<7.2} {:<8.4} {:<8.4} {:<8.4} {:<8.4} {:<8.3}",
                    r.bleu, r.rouge, r.hr, r.ndcg, r.sb_urs
                );
            }
            println!("sweep written to {}", out.display());
        }
        Command::Report { input } => {
            let report = read_report_json(&input)?;
            print_report(&report);
        }
    }
    Ok(())
}

fn print_report(report: &dt4ier::metrics::MetricsReport) {
    println!("evaluation over {} pairs (k = {})", report.pairs, report.k);
    if let Some(rho) = report.rho {
        println!("prompt proportion: {rho}");
    }
    println!("  bleu   {:.4}", report.bleu);
    println!("  rouge  {:.4}", report.rouge);
    println!("  hr     {:.4}", report.hr);
    println!("  ndcg   {:.4}", report.ndcg);
    println!("  sb-urs {:.3}", report.sb_urs);
    println!("reward classes (similarity / representative reward / count):");
    for (c, class) in report.classes.iter().enumerate() {
        println!(
            "  class {c}: {:.4} / {:.3} / {}",
            class.similarity, class.reward, class.count
        );
    }
    println!("config hash {} seed {}", report.config_hash, report.seed);
}
