use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use graphad::data::{load_dataset, normalize, save_dataset, sliding_windows, train_day_range, WINDOW};
use graphad::experiment::{bench_csv, run_ablation, run_bench, BenchConfig, Method};
use graphad::graph::{build_attribute_graph, build_entity_graph, build_temporal_graph};
use graphad::graphad::{detect, load_checkpoint, save_checkpoint, train, write_training_log, ModelConfig, Prepared, Variant};
use graphad::parallel::configure_threads;
use graphad::synth::{generate, GenConfig};

#[derive(Parser)]
#[command(name = "graphad", version, about = "Entity-wise multivariate time-series anomaly detection")]
struct Cli {
    /// Overrides the seed in any config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset directory.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and epoch log.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test split with a trained model.
    Detect {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and test model variants over several seeds.
    Ablate {
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated variants, or `all`.
        #[arg(long, value_delimiter = ',', default_value = "all")]
        variant: Vec<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare methods over several seeds.
    Bench {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "graphad,ae")]
        methods: Vec<String>,
        /// JSON with optional `graphad` and `ae` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump a similarity graph as an edge-list CSV.
    InspectGraph {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum)]
        kind: GraphKind,
        /// Window offset for attribute and temporal graphs.
        #[arg(long, default_value_t = 0)]
        offset: usize,
        /// Entity index for the attribute graph.
        #[arg(long, default_value_t = 0)]
        entity: usize,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphKind {
    Attr,
    Entity,
    Temporal,
}

fn read_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn seed_list(base: u64, n: u64) -> Vec<u64> {
    (base..base + n).collect()
}

fn parse_variants(names: &[String]) -> Result<Vec<Variant>> {
    if names.iter().any(|n| n == "all") {
        return Ok(Variant::ALL.to_vec());
    }
    let mut out = Vec::new();
    for n in names {
        let v: Variant = n.parse()?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out } => {
            let mut cfg: GenConfig = read_json(config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let ds = generate(&cfg)?;
            save_dataset(&ds, &out)?;
        }
        Command::Train { dataset, config, out } => {
            let mut cfg: ModelConfig = read_json(config.as_deref())?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let ds = load_dataset(&dataset)?;
            let trained = train(&ds, &cfg)?;
            save_checkpoint(&trained.model, &out)?;
            write_training_log(&out.join("log.csv"), &trained.log)?;
        }
        Command::Detect { dataset, model, out } => {
            let ds = load_dataset(&dataset)?;
            let model = load_checkpoint(&model)?;
            let p = Prepared::new(&ds)?;
            let report = detect(&model, &p)?;
            fs::create_dir_all(&out)?;
            report.write_csv(&out.join("report.csv"))?;
            fs::write(out.join("metrics.json"), report.metrics_json())?;
        }
        Command::Ablate {
            dataset,
            variant,
            config,
            seeds,
            out,
        } => {
            let variants = parse_variants(&variant)?;
            let cfg: ModelConfig = read_json(config.as_deref())?;
            let base = cli.seed.unwrap_or(cfg.seed);
            let ds = load_dataset(&dataset)?;
            let report = run_ablation(&ds, &variants, &seed_list(base, seeds), &cfg)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("ablation.csv"), bench_csv(&report.rows))?;
            for (v, s, model) in &report.models {
                save_checkpoint(model, &out.join(v.name()).join(format!("seed-{s}")))?;
            }
            let mut summary = String::from("variant,median_f1\n");
            for (v, f1) in &report.median_f1 {
                summary.push_str(&format!("{v},{f1}\n"));
            }
            fs::write(out.join("median_f1.csv"), summary)?;
            if let Some(flag) = &report.ordering_flag {
                eprintln!("{flag}");
                fs::write(out.join("ordering_flag.txt"), format!("{flag}\n"))?;
            }
        }
        Command::Bench {
            dataset,
            methods,
            config,
            seeds,
            out,
        } => {
            let methods = methods
                .iter()
                .map(|m| m.parse::<Method>())
                .collect::<graphad::Result<Vec<_>>>()?;
            let cfg: BenchConfig = read_json(config.as_deref())?;
            let base = cli.seed.unwrap_or(cfg.graphad.seed);
            let ds = load_dataset(&dataset)?;
            let rows = run_bench(&ds, &methods, &seed_list(base, seeds), &cfg)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, bench_csv(&rows))?;
        }
        Command::InspectGraph {
            dataset,
            kind,
            offset,
            entity,
            out,
        } => {
            let ds = load_dataset(&dataset)?;
            let graph = match kind {
                GraphKind::Entity => build_entity_graph(&ds.profiles)?,
                GraphKind::Attr | GraphKind::Temporal => {
                    let t = &ds.tensor;
                    let (norm, _) = normalize(t, train_day_range(t.n_days(), WINDOW)?)?;
                    let windows = sliding_windows(&norm, &ds.labels, WINDOW)?;
                    let per = t.n_days() + 1 - WINDOW;
                    if offset >= per {
                        bail!("offset {offset} out of range (0..{per})");
                    }
                    if let GraphKind::Attr = kind {
                        if entity >= t.n_entities() {
                            bail!("entity {entity} out of range (0..{})", t.n_entities());
                        }
                        build_attribute_graph(&windows[entity * per + offset])?
                    } else {
                        let ws: Vec<_> = (0..t.n_entities()).map(|e| &windows[e * per + offset]).collect();
                        build_temporal_graph(&ws)?
                    }
                }
            };
            let csv = graph.to_csv();
            match out {
                Some(p) => fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    if let Some(n) = std::env::var("GRAPHAD_THREADS").ok().and_then(|v| v.parse().ok()) {
        configure_threads(n);
    }
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
