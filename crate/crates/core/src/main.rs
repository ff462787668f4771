//! Command-line benchmark driver. Picks an experiment, runs every scheme
//! over it, writes a CSV of per-call figures, and optionally renders an
//! SVG chart. All output is deterministic for a given argument set.

use std::path::PathBuf;

use clap::{Parser, ValueEnum};

use collsim::bench::{self, BenchPlan, Experiment, Scheme};
use collsim::chart::Chart;
use collsim::config::ConfigFile;
use collsim::{ClusterSpec, Result, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExperimentKind {
    /// All ranks on one node; sweeps message size.
    SingleNode,
    /// One rank per node; sweeps message size.
    OneRankPerNode,
    /// Fixed node count; sweeps ranks per node at --msg-max elements.
    VaryPpn,
    /// One uneven cluster (--ppn lists per-node counts); sweeps message size.
    Irregular,
    /// One --grid x --grid matrix multiply with --block wide blocks.
    Summa,
}

#[derive(Debug, Parser)]
#[command(
    name = "collsim",
    version,
    about = "Deterministic simulator for node-aware cluster collectives",
    long_about = "Runs message-passing collectives on a simulated multi-core cluster and \
                  reports modeled time, message counts, copied bytes, and memory per scheme. \
                  Identical arguments always produce identical output."
)]
struct Cli {
    #[arg(long, value_enum, default_value = "single-node")]
    experiment: ExperimentKind,

    /// Node count (ignored by single-node and irregular).
    #[arg(long, default_value_t = 4)]
    nodes: usize,

    /// Ranks per node. One value for uniform shapes; a comma-separated list
    /// enumerates nodes for irregular, or sweep points for vary-ppn.
    #[arg(long, value_delimiter = ',', default_value = "8")]
    ppn: Vec<usize>,

    /// Smallest message, in 8-byte elements per rank.
    #[arg(long, default_value_t = 8)]
    msg_min: usize,

    /// Largest message, in 8-byte elements per rank.
    #[arg(long, default_value_t = 8192)]
    msg_max: usize,

    /// Schemes to run, comma separated (e.g. Hy_Allgather,Allgather_Ring).
    /// Default: every scheme that fits the experiment.
    #[arg(long, value_delimiter = ',')]
    algo: Vec<String>,

    /// TOML file with cost coefficients (and a cluster for summa runs).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Where to write the CSV.
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,

    /// Also render an SVG chart of modeled time.
    #[arg(long)]
    chart: Option<PathBuf>,

    #[arg(long, default_value_t = 1)]
    seed: u64,

    /// Collective calls per measured cell.
    #[arg(long, default_value_t = 10)]
    reps: usize,

    /// Process grid width for summa (grid^2 ranks take part).
    #[arg(long, default_value_t = 2)]
    grid: usize,

    /// Block width for summa (each rank owns a block x block tile).
    #[arg(long, default_value_t = 64)]
    block: usize,
}

fn build_plan(cli: &Cli) -> Result<BenchPlan> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let cost = file.cost_model()?;
    let file_cluster = file.cluster_spec()?;

    let first_ppn = *cli.ppn.first().unwrap_or(&1);
    let experiment = match cli.experiment {
        ExperimentKind::SingleNode => Experiment::SingleNode { ranks: first_ppn },
        ExperimentKind::OneRankPerNode => Experiment::OneRankPerNode { nodes: cli.nodes },
        ExperimentKind::VaryPpn => Experiment::FixedNodesVaryPpn {
            nodes: cli.nodes,
            ppn_values: cli.ppn.clone(),
            msg_elems: cli.msg_max,
        },
        ExperimentKind::Irregular => Experiment::Irregular {
            ranks_per_node: cli.ppn.clone(),
        },
        ExperimentKind::Summa => {
            let spec = match file_cluster {
                Some(spec) => spec,
                None => ClusterSpec::uniform(cli.nodes, first_ppn),
            };
            Experiment::Summa {
                spec,
                grid: cli.grid,
                block: cli.block,
            }
        }
    };
    if cli.experiment != ExperimentKind::Summa && file.cluster.is_some() {
        eprintln!(
            "note: the [cluster] section only applies to summa runs; \
             this experiment derives its shape from --nodes/--ppn"
        );
    }

    let schemes = cli
        .algo
        .iter()
        .map(|s| Scheme::parse(s))
        .collect::<Result<Vec<_>>>()?;

    Ok(BenchPlan {
        experiment,
        schemes,
        msg_elems: bench::sweep_powers_of_two(cli.msg_min, cli.msg_max)?,
        cost,
        seed: cli.seed,
        reps: cli.reps,
    })
}

fn run(cli: &Cli) -> Result<()> {
    let plan = build_plan(cli)?;
    for warning in plan.validate()? {
        eprintln!("warning: {warning}");
    }
    let rows = bench::run_plan(&plan)?;
    let file = std::fs::File::create(&cli.out)
        .map_err(|e| SimError::Io(format!("cannot create {}: {e}", cli.out.display())))?;
    bench::write_csv(&rows, file)?;
    println!("wrote {} rows to {}", rows.len(), cli.out.display());
    if let Some(chart_path) = &cli.chart {
        Chart::from_rows(&rows).write_svg(chart_path)?;
        println!("wrote chart to {}", chart_path.display());
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
