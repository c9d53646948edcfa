use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use e5sh::energy::{default_setups_json, energy_table, load_setups};
use e5sh::harness::report::{eval, report, stats_report};
use e5sh::harness::{gen_dataset, parse_configs, run_experiment, Dataset, SceneSpec};
use e5sh::metrics::{read_records, write_records, ExperimentRecord};
use e5sh::perception::BackendKind;
use log::info;

#[derive(Parser)]
#[command(name = "e5sh", version, about = "Edge-offloaded segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic RGB-D dataset with exact masks.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 848)]
        width: u16,
        #[arg(long, default_value_t = 480)]
        height: u16,
    },
    /// Run one or more experiment configs and write the record log.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pad payloads to 80 kB up and 16 kB down.
        #[arg(long)]
        paper_sizes: bool,
        /// Also write per-run summaries as JSON.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Score a segmentation backend against the dataset masks.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        backend: BackendKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normality and factor analysis over a record log.
    Stats {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        shapiro: bool,
        #[arg(long)]
        anova: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Power, emission and cost table for 1..=N robots.
    Energy {
        #[arg(long)]
        robots: u32,
        #[arg(long)]
        out: PathBuf,
        /// Model JSON; defaults are used when absent.
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Per-configuration summary of a record log.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v)?;
    fs::write(path, s + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_log(path: &Path) -> Result<Vec<ExperimentRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_records(f)?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().cmd {
        Cmd::Gen { out, count, seed, width, height } => {
            let summary = gen_dataset(&SceneSpec::with_size(width, height), count, seed, &out)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Cmd::Run { config, data, out, paper_sizes, summary } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let mut configs = parse_configs(&text)?;
            let data = Dataset::load(&data)?;
            let mut records = Vec::new();
            let mut summaries = Vec::new();
            for c in &mut configs {
                c.paper_sizes |= paper_sizes;
                info!("running {}", c.config_name());
                let run = run_experiment(c, &data)?;
                records.extend(run.records);
                summaries.push(run.summary);
            }
            write_records(BufWriter::new(File::create(&out)?), &records)?;
            if let Some(p) = summary {
                write_json(&p, &summaries)?;
            }
        }
        Cmd::Eval { data, backend, out } => {
            let data = Dataset::load(&data)?;
            write_json(&out, &eval(&data, backend)?)?;
        }
        Cmd::Stats { log, shapiro, anova, out } => {
            if !shapiro && !anova {
                bail!("nothing to do: pass --shapiro and/or --anova");
            }
            write_json(&out, &stats_report(&read_log(&log)?, shapiro, anova)?)?;
        }
        Cmd::Energy { robots, out, models } => {
            let json = match models {
                Some(p) => fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
                None => default_setups_json(),
            };
            write_json(&out, &energy_table(&load_setups(&json)?, robots)?)?;
        }
        Cmd::Report { log, baseline, out } => {
            write_json(&out, &report(&read_log(&log)?, baseline.as_deref())?)?;
        }
    }
    Ok(())
}
