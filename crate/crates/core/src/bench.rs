//! Benchmark driver: runs collectives over a family of cluster shapes and
//! message sizes and reports one CSV row per (configuration, scheme) cell.
//!
//! Timing loops follow micro-benchmark convention: each repetition feeds
//! fresh data in and calls the collective, without validating contents in
//! the loop (correctness has its own tests). Counters are divided by the
//! repetition count, which must come out exact; the race detector stays
//! armed and any report fails the run. The `setup_modeled_time` column
//! records time spent in window allocation and layout construction — zero
//! under this cost model, which charges setup nothing, and kept in the
//! schema so the accounting is explicit.

use std::fmt;

use serde::Serialize;

use crate::baseline::{allgather_recdbl, allgather_ring, smp_allgather};
use crate::cluster::{ClusterSpec, Topology};
use crate::error::{config_err, usage_err, Result, SimError};
use crate::hybrid::HybridAllgather;
use crate::sim::{CostModel, Metrics, Simulation};
use crate::summa::{self, SummaMode};
use crate::util::{mix64, pseudo_bytes};
use crate::ELEM_BYTES;

/// Collective implementations the driver can time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Scheme {
    /// Allgather over one shared window per node, leaders bridging.
    HyAllgather,
    /// Ring allgather, private buffers.
    AllgatherRing,
    /// Recursive-doubling allgather, private buffers.
    AllgatherRecDbl,
    /// Two-level allgather: gather to leaders, leader ring, redistribute.
    AllgatherSmp,
    /// Matrix multiply with shared-window panel broadcasts.
    HySumma,
    /// Matrix multiply with point-to-point panel broadcasts.
    OriSumma,
}

impl Scheme {
    pub const ALLGATHER: [Scheme; 4] = [
        Scheme::HyAllgather,
        Scheme::AllgatherRing,
        Scheme::AllgatherRecDbl,
        Scheme::AllgatherSmp,
    ];
    pub const SUMMA: [Scheme; 2] = [Scheme::HySumma, Scheme::OriSumma];

    pub fn label(self) -> &'static str {
        match self {
            Scheme::HyAllgather => "Hy_Allgather",
            Scheme::AllgatherRing => "Allgather_Ring",
            Scheme::AllgatherRecDbl => "Allgather_RecDbl",
            Scheme::AllgatherSmp => "Allgather_Smp",
            Scheme::HySumma => "Hy_SUMMA",
            Scheme::OriSumma => "Ori_SUMMA",
        }
    }

    pub fn parse(s: &str) -> Result<Scheme> {
        let all = Scheme::ALLGATHER.iter().chain(&Scheme::SUMMA);
        for &scheme in all {
            if s.eq_ignore_ascii_case(scheme.label()) {
                return Ok(scheme);
            }
        }
        config_err(format!(
            "unknown scheme \"{s}\" (expected one of Hy_Allgather, Allgather_Ring, \
             Allgather_RecDbl, Allgather_Smp, Hy_SUMMA, Ori_SUMMA)"
        ))
    }

    /// The scheme other rows in the same cell are measured against.
    pub fn is_reference(self) -> bool {
        matches!(self, Scheme::HyAllgather | Scheme::HySumma)
    }

    fn is_summa(self) -> bool {
        matches!(self, Scheme::HySumma | Scheme::OriSumma)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// The cluster/message family a plan sweeps over.
#[derive(Debug, Clone)]
pub enum Experiment {
    /// All ranks on one node, message size swept.
    SingleNode { ranks: usize },
    /// One rank per node (pure bridge traffic), message size swept.
    OneRankPerNode { nodes: usize },
    /// Fixed node count, ranks per node swept, one message size.
    FixedNodesVaryPpn {
        nodes: usize,
        ppn_values: Vec<usize>,
        msg_elems: usize,
    },
    /// One uneven cluster, message size swept.
    Irregular { ranks_per_node: Vec<usize> },
    /// One matrix multiply per scheme on a fixed cluster.
    Summa {
        spec: ClusterSpec,
        grid: usize,
        block: usize,
    },
}

impl Experiment {
    pub fn label(&self) -> &'static str {
        match self {
            Experiment::SingleNode { .. } => "single_node",
            Experiment::OneRankPerNode { .. } => "one_rank_per_node",
            Experiment::FixedNodesVaryPpn { .. } => "vary_ppn",
            Experiment::Irregular { .. } => "irregular",
            Experiment::Summa { .. } => "summa",
        }
    }

    fn is_summa(&self) -> bool {
        matches!(self, Experiment::Summa { .. })
    }
}

#[derive(Debug, Clone)]
pub struct BenchPlan {
    pub experiment: Experiment,
    /// Empty means the default set for the experiment kind.
    pub schemes: Vec<Scheme>,
    /// Message sizes (elements per rank) for the sweeping experiments.
    pub msg_elems: Vec<usize>,
    pub cost: CostModel,
    pub seed: u64,
    pub reps: usize,
}

/// Soft capacity guidance: configurations beyond a small testbed still run,
/// but the driver calls them out.
pub const DESK_NODE_CAP: usize = 8;
pub const DESK_PPN_CAP: usize = 24;

impl BenchPlan {
    /// Checks the plan and returns soft warnings (oversized clusters).
    /// Hard errors (invalid shapes, scheme/experiment mismatches) fail.
    pub fn validate(&self) -> Result<Vec<String>> {
        self.cost.validate()?;
        if self.reps == 0 {
            return config_err("reps must be at least 1");
        }
        for &scheme in &self.schemes {
            if scheme.is_summa() != self.experiment.is_summa() {
                return config_err(format!(
                    "scheme {scheme} does not apply to the {} experiment",
                    self.experiment.label()
                ));
            }
        }
        let sweeps_messages = matches!(
            self.experiment,
            Experiment::SingleNode { .. }
                | Experiment::OneRankPerNode { .. }
                | Experiment::Irregular { .. }
        );
        if sweeps_messages && self.sweep()?.is_empty() {
            return config_err("no message sizes to sweep");
        }
        if let Experiment::FixedNodesVaryPpn { msg_elems, .. } = &self.experiment {
            if *msg_elems == 0 {
                return config_err("message size must be at least one element");
            }
        }
        let mut warnings = Vec::new();
        for (spec, _) in self.cells()? {
            spec.validate()?;
            if spec.node_count > DESK_NODE_CAP {
                warnings.push(format!(
                    "{} nodes exceeds the {DESK_NODE_CAP}-node desk scale; running anyway",
                    spec.node_count
                ));
            }
            let widest = spec.ranks_per_node.iter().copied().max().unwrap_or(0);
            if widest > DESK_PPN_CAP {
                warnings.push(format!(
                    "{widest} ranks per node exceeds the {DESK_PPN_CAP}-rank desk scale; \
                     running anyway"
                ));
            }
        }
        warnings.dedup();
        Ok(warnings)
    }

    pub fn resolved_schemes(&self) -> Vec<Scheme> {
        if !self.schemes.is_empty() {
            return self.schemes.clone();
        }
        if self.experiment.is_summa() {
            Scheme::SUMMA.to_vec()
        } else {
            Scheme::ALLGATHER.to_vec()
        }
    }

    fn sweep(&self) -> Result<Vec<usize>> {
        if self.msg_elems.contains(&0) {
            return config_err("message size must be at least one element");
        }
        Ok(self.msg_elems.clone())
    }

    /// The (cluster, message size) cells this plan measures.
    fn cells(&self) -> Result<Vec<(ClusterSpec, usize)>> {
        let cells = match &self.experiment {
            Experiment::SingleNode { ranks } => {
                let spec = ClusterSpec::uniform(1, *ranks);
                self.sweep()?.iter().map(|&m| (spec.clone(), m)).collect()
            }
            Experiment::OneRankPerNode { nodes } => {
                let spec = ClusterSpec::uniform(*nodes, 1);
                self.sweep()?.iter().map(|&m| (spec.clone(), m)).collect()
            }
            Experiment::FixedNodesVaryPpn {
                nodes,
                ppn_values,
                msg_elems,
            } => {
                if ppn_values.is_empty() {
                    return config_err("vary_ppn needs at least one ranks-per-node value");
                }
                ppn_values
                    .iter()
                    .map(|&ppn| (ClusterSpec::uniform(*nodes, ppn), *msg_elems))
                    .collect()
            }
            Experiment::Irregular { ranks_per_node } => {
                let spec = ClusterSpec::irregular(ranks_per_node.clone());
                self.sweep()?.iter().map(|&m| (spec.clone(), m)).collect()
            }
            Experiment::Summa { spec, grid, block } => {
                vec![(spec.clone(), grid * block * block)]
            }
        };
        Ok(cells)
    }
}

/// One measured cell. Counter columns are per call; `time_vs_hybrid` is
/// this row's time over the shared-window scheme's time in the same cell
/// (blank when the cell has no reference scheme).
#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub experiment: String,
    pub scheme: String,
    pub nodes: usize,
    pub ranks_per_node: String,
    pub total_ranks: usize,
    pub msg_elems: usize,
    pub reps: usize,
    pub modeled_time: f64,
    pub inter_msgs: u64,
    pub inter_bytes: u64,
    pub intra_copy_bytes: u64,
    pub barriers: u64,
    pub max_node_alloc_bytes: u64,
    pub time_vs_hybrid: Option<f64>,
    pub setup_modeled_time: f64,
}

struct Figures {
    modeled_time: f64,
    inter_msgs: u64,
    inter_bytes: u64,
    intra_copy_bytes: u64,
    barriers: u64,
    max_node_alloc: u64,
}

fn per_call(total: u64, reps: usize, what: &str) -> Result<u64> {
    let reps = reps as u64;
    if !total.is_multiple_of(reps) {
        return usage_err(format!(
            "{what} total {total} does not divide by {reps} repetitions"
        ));
    }
    Ok(total / reps)
}

fn figures(metrics: &Metrics, races: usize, reps: usize) -> Result<Figures> {
    if races > 0 {
        return usage_err(format!("benchmark run reported {races} data races"));
    }
    Ok(Figures {
        modeled_time: metrics.modeled_time / reps as f64,
        inter_msgs: per_call(metrics.totals.inter_msgs, reps, "inter-node messages")?,
        inter_bytes: per_call(metrics.totals.inter_bytes, reps, "inter-node bytes")?,
        intra_copy_bytes: per_call(metrics.totals.intra_copy_bytes, reps, "local copies")?,
        barriers: per_call(metrics.totals.barrier_count, reps, "barriers")?,
        max_node_alloc: metrics.max_node_alloc(),
    })
}

fn rep_seed(seed: u64, rep: usize, pos: usize) -> u64 {
    mix64(seed ^ ((rep as u64) << 32) ^ pos as u64)
}

fn measure_allgather(
    scheme: Scheme,
    spec: &ClusterSpec,
    cost: CostModel,
    msg_elems: usize,
    reps: usize,
    seed: u64,
) -> Result<Figures> {
    let sim = Simulation::with_cost(spec.clone(), cost)?;
    let msg_bytes = msg_elems * ELEM_BYTES;
    let report = sim.run(move |ctx| {
        let topo = ctx.topology().clone();
        let world = topo.world().clone();
        let p = world.size();
        let pos = world
            .rank_of(ctx.rank())
            .expect("every rank is a world member");
        match scheme {
            Scheme::HyAllgather => {
                let layout = topo.world_layout();
                let ag = HybridAllgather::setup(ctx, &layout, msg_elems)?;
                for rep in 0..reps {
                    ag.write_own(ctx, &pseudo_bytes(rep_seed(seed, rep, pos), msg_bytes))?;
                    ag.call(ctx)?;
                }
            }
            Scheme::AllgatherRing | Scheme::AllgatherRecDbl => {
                ctx.track_alloc((p * msg_bytes) as u64);
                let mut buf = vec![0u8; p * msg_bytes];
                for rep in 0..reps {
                    buf[pos * msg_bytes..][..msg_bytes]
                        .copy_from_slice(&pseudo_bytes(rep_seed(seed, rep, pos), msg_bytes));
                    if scheme == Scheme::AllgatherRing {
                        allgather_ring(ctx, &world, msg_bytes, &mut buf)?;
                    } else {
                        allgather_recdbl(ctx, &world, msg_bytes, &mut buf)?;
                    }
                }
            }
            Scheme::AllgatherSmp => {
                let layout = topo.world_layout();
                ctx.track_alloc((p * msg_bytes) as u64);
                let mut buf = vec![0u8; p * msg_bytes];
                for rep in 0..reps {
                    buf[pos * msg_bytes..][..msg_bytes]
                        .copy_from_slice(&pseudo_bytes(rep_seed(seed, rep, pos), msg_bytes));
                    smp_allgather(ctx, &layout, msg_bytes, &mut buf)?;
                }
            }
            Scheme::HySumma | Scheme::OriSumma => {
                unreachable!("summa schemes are measured by measure_summa")
            }
        }
        Ok(())
    })?;
    figures(&report.metrics, report.races.len(), reps)
}

fn measure_summa(
    scheme: Scheme,
    spec: &ClusterSpec,
    cost: CostModel,
    grid: usize,
    block: usize,
    seed: u64,
) -> Result<Figures> {
    let mode = match scheme {
        Scheme::HySumma => SummaMode::Hybrid,
        Scheme::OriSumma => SummaMode::Baseline,
        other => return usage_err(format!("{other} is not a matrix-multiply scheme")),
    };
    let mut topo = Topology::new(spec.clone())?;
    let plan = summa::build_plan(&mut topo, grid, block)?;
    let run = summa::run_summa(
        &topo,
        cost,
        &plan,
        mode,
        summa::seeded(seed),
        summa::seeded(mix64(seed)),
    )?;
    // a multiply is one "call": no division
    figures(&run.report.metrics, run.report.races.len(), 1)
}

fn ranks_per_node_label(spec: &ClusterSpec) -> String {
    let counts = &spec.ranks_per_node;
    if counts.iter().all(|&c| c == counts[0]) {
        counts[0].to_string()
    } else {
        counts
            .iter()
            .map(|c| c.to_string())
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Runs every cell of the plan. Rows come out in deterministic order:
/// cells as generated, schemes as given (or the default order).
pub fn run_plan(plan: &BenchPlan) -> Result<Vec<BenchRow>> {
    plan.validate()?;
    let schemes = plan.resolved_schemes();
    let mut rows = Vec::new();
    for (spec, msg_elems) in plan.cells()? {
        let measure = |scheme: Scheme| -> Result<Figures> {
            match &plan.experiment {
                Experiment::Summa { grid, block, .. } => {
                    measure_summa(scheme, &spec, plan.cost.clone(), *grid, *block, plan.seed)
                }
                _ => measure_allgather(
                    scheme,
                    &spec,
                    plan.cost.clone(),
                    msg_elems,
                    plan.reps,
                    plan.seed,
                ),
            }
        };
        let reference_time = schemes
            .iter()
            .copied()
            .find(|s| s.is_reference())
            .map(&measure)
            .transpose()?
            .map(|f| f.modeled_time);
        for &scheme in &schemes {
            let f = measure(scheme)?;
            let reps = if plan.experiment.is_summa() {
                1
            } else {
                plan.reps
            };
            rows.push(BenchRow {
                experiment: plan.experiment.label().to_string(),
                scheme: scheme.label().to_string(),
                nodes: spec.node_count,
                ranks_per_node: ranks_per_node_label(&spec),
                total_ranks: spec.total_ranks(),
                msg_elems,
                reps,
                modeled_time: f.modeled_time,
                inter_msgs: f.inter_msgs,
                inter_bytes: f.inter_bytes,
                intra_copy_bytes: f.intra_copy_bytes,
                barriers: f.barriers,
                max_node_alloc_bytes: f.max_node_alloc,
                time_vs_hybrid: reference_time.map(|h| f.modeled_time / h),
                setup_modeled_time: 0.0,
            });
        }
    }
    Ok(rows)
}

pub fn write_csv<W: std::io::Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)
            .map_err(|e| SimError::Io(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| SimError::Io(format!("csv: {e}")))?;
    Ok(())
}

/// The CSV as a string — handy for determinism checks and tests.
pub fn csv_string(rows: &[BenchRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    String::from_utf8(buf).map_err(|e| SimError::Io(format!("csv produced non-utf8: {e}")))
}

/// Powers of two from `min` up to `max` inclusive of the first power
/// reaching `max`.
pub fn sweep_powers_of_two(min: usize, max: usize) -> Result<Vec<usize>> {
    if min == 0 || max < min {
        return config_err(format!("bad message range {min}..={max}"));
    }
    let mut out = Vec::new();
    let mut m = min;
    loop {
        out.push(m);
        if m >= max {
            break;
        }
        m = m.saturating_mul(2).min(max);
    }
    Ok(out)
}
