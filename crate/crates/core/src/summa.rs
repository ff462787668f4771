//! Block-distributed matrix multiply over a square process grid.
//!
//! `C = A · B` with each of the q×q grid ranks owning one contiguous b×b
//! block of every matrix. Iteration k broadcasts the k-th block column of A
//! along each grid row and the k-th block row of B along each grid column,
//! then accumulates one local block product. The panel broadcasts are the
//! entire communication volume, so the run doubles as a head-to-head of the
//! two broadcast transports:
//!
//! * [`SummaMode::Hybrid`] — node-shared panel windows ([`HybridBcast`]),
//!   one payload per node per step, leaders bridging between nodes.
//! * [`SummaMode::Baseline`] — binomial broadcasts into private panel
//!   buffers, every rank paying for its own copy.
//!
//! Compute is not part of the modeled time: both modes do identical local
//! work, so the comparison isolates communication and synchronization.

use std::sync::Arc;

use crate::baseline::bcast_binomial;
use crate::cluster::{Communicator, HybridLayout, Rank, Topology};
use crate::error::{config_err, usage_err, Result};
use crate::hybrid::HybridBcast;
use crate::sim::{CostModel, RankCtx, RunReport, Simulation};
use crate::util::{bytes_to_f64s, f64s_to_bytes, mix64, unit_f64};
use crate::ELEM_BYTES;

/// Element generator for a matrix, by global (row, column) index.
pub type MatrixInit = Arc<dyn Fn(usize, usize) -> f64 + Send + Sync>;

/// Pseudo-random entries in [-1, 1), fully determined by the seed.
pub fn seeded(seed: u64) -> MatrixInit {
    Arc::new(move |i, j| {
        let cell = mix64(seed ^ ((i as u64) << 32) ^ j as u64);
        unit_f64(cell) * 2.0 - 1.0
    })
}

/// The identity matrix.
pub fn identity() -> MatrixInit {
    Arc::new(|i, j| if i == j { 1.0 } else { 0.0 })
}

/// Which transport carries the panels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SummaMode {
    Hybrid,
    Baseline,
}

/// Grid communicators and per-row/per-column layouts, built once against a
/// topology and shared by every rank of a run. Grid position (i, j) is the
/// grid communicator's member i·q + j.
#[derive(Debug, Clone)]
pub struct SummaPlan {
    grid: usize,
    block: usize,
    grid_comm: Communicator,
    rows: Vec<HybridLayout>,
    cols: Vec<HybridLayout>,
}

impl SummaPlan {
    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn block(&self) -> usize {
        self.block
    }

    /// Matrix dimension: grid width times block width.
    pub fn n(&self) -> usize {
        self.grid * self.block
    }

    pub fn grid_comm(&self) -> &Communicator {
        &self.grid_comm
    }
}

/// Builds row and column communicators (and their node layouts) for a q×q
/// grid over the first q² world ranks. Ranks beyond the grid sit idle.
pub fn build_plan(topo: &mut Topology, grid: usize, block: usize) -> Result<SummaPlan> {
    if grid == 0 || block == 0 {
        return config_err(format!(
            "grid {grid} x block {block}: both must be at least 1"
        ));
    }
    let need = grid * grid;
    let have = topo.total_ranks();
    if need > have {
        return config_err(format!(
            "a {grid}x{grid} grid needs {need} ranks, the cluster has {have}"
        ));
    }
    let grid_comm = topo.group_comm((0..need).collect())?;
    let mut rows = Vec::with_capacity(grid);
    let mut cols = Vec::with_capacity(grid);
    for i in 0..grid {
        let comm = topo.group_comm((0..grid).map(|j| i * grid + j).collect())?;
        rows.push(topo.hybrid_layout(&comm)?);
    }
    for j in 0..grid {
        let comm = topo.group_comm((0..grid).map(|i| i * grid + j).collect())?;
        cols.push(topo.hybrid_layout(&comm)?);
    }
    Ok(SummaPlan {
        grid,
        block,
        grid_comm,
        rows,
        cols,
    })
}

/// One panel broadcast pipe: either a node-shared window or a private
/// buffer filled by point-to-point messages.
enum PanelBcaster {
    Hybrid(HybridBcast),
    Baseline { comm: Communicator },
}

impl PanelBcaster {
    fn setup(
        ctx: &mut RankCtx,
        mode: SummaMode,
        layout: &HybridLayout,
        elems: usize,
    ) -> Result<Self> {
        match mode {
            SummaMode::Hybrid => Ok(PanelBcaster::Hybrid(HybridBcast::setup(
                ctx, layout, elems,
            )?)),
            SummaMode::Baseline => {
                // every rank keeps its own landing buffer for the panel
                ctx.track_alloc((elems * ELEM_BYTES) as u64);
                Ok(PanelBcaster::Baseline {
                    comm: layout.parent().clone(),
                })
            }
        }
    }

    /// Broadcasts from the member at `root_pos`; `own` is the root's block.
    fn bcast(
        &mut self,
        ctx: &mut RankCtx,
        root_pos: usize,
        own: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        match self {
            PanelBcaster::Hybrid(bc) => {
                if let Some(block) = own {
                    bc.write_root_payload(ctx, &f64s_to_bytes(block))?;
                }
                bc.call(ctx, root_pos)?;
                Ok(bytes_to_f64s(&bc.read(ctx)?))
            }
            PanelBcaster::Baseline { comm } => {
                let mut data = own.map(f64s_to_bytes).unwrap_or_default();
                bcast_binomial(ctx, comm, root_pos, &mut data)?;
                Ok(bytes_to_f64s(&data))
            }
        }
    }
}

/// `c += a · b` for row-major b×b blocks.
fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], n: usize) {
    for r in 0..n {
        for t in 0..n {
            let av = a[r * n + t];
            if av == 0.0 {
                continue;
            }
            for s in 0..n {
                c[r * n + s] += av * b[t * n + s];
            }
        }
    }
}

/// Materializes the b×b block at grid position (bi, bj).
fn local_block(init: &MatrixInit, bi: usize, bj: usize, b: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(b * b);
    for r in 0..b {
        for s in 0..b {
            out.push(init(bi * b + r, bj * b + s));
        }
    }
    out
}

fn summa_rank(
    ctx: &mut RankCtx,
    plan: &SummaPlan,
    mode: SummaMode,
    init_a: &MatrixInit,
    init_b: &MatrixInit,
) -> Result<Option<Vec<f64>>> {
    let Some(pos) = plan.grid_comm.rank_of(ctx.rank()) else {
        return Ok(None);
    };
    let q = plan.grid;
    let b = plan.block;
    let (i, j) = (pos / q, pos % q);
    let a = local_block(init_a, i, j, b);
    let bmat = local_block(init_b, i, j, b);
    let mut c = vec![0.0; b * b];
    ctx.with_collective("summa", &plan.grid_comm, |ctx| {
        let mut row_bc = PanelBcaster::setup(ctx, mode, &plan.rows[i], b * b)?;
        let mut col_bc = PanelBcaster::setup(ctx, mode, &plan.cols[j], b * b)?;
        for k in 0..q {
            let a_panel = row_bc.bcast(ctx, k, (j == k).then_some(a.as_slice()))?;
            let b_panel = col_bc.bcast(ctx, k, (i == k).then_some(bmat.as_slice()))?;
            gemm_acc(&mut c, &a_panel, &b_panel, b);
        }
        Ok(())
    })?;
    Ok(Some(c))
}

/// A finished multiply: the per-rank report plus the assembled product.
pub struct SummaRun {
    pub report: RunReport<Option<Vec<f64>>>,
    pub product: Vec<f64>,
}

/// Runs the multiply on a fresh simulation over `topo` and assembles the
/// full n×n product from the per-rank blocks.
pub fn run_summa(
    topo: &Topology,
    cost: CostModel,
    plan: &SummaPlan,
    mode: SummaMode,
    init_a: MatrixInit,
    init_b: MatrixInit,
) -> Result<SummaRun> {
    let sim = Simulation::from_topology(topo.clone(), cost)?;
    let shared = Arc::new(plan.clone());
    let report = sim.run(move |ctx| summa_rank(ctx, &shared, mode, &init_a, &init_b))?;
    let product = assemble(plan, &report.outputs)?;
    Ok(SummaRun { report, product })
}

/// Stitches per-rank blocks into the row-major n×n product.
pub fn assemble(plan: &SummaPlan, outputs: &[Option<Vec<f64>>]) -> Result<Vec<f64>> {
    let q = plan.grid;
    let b = plan.block;
    let n = plan.n();
    let mut full = vec![0.0; n * n];
    for pos in 0..q * q {
        let rank: Rank = plan.grid_comm.member(pos);
        let Some(block) = outputs.get(rank).and_then(|o| o.as_ref()) else {
            return usage_err(format!("grid member {rank} produced no block"));
        };
        let (i, j) = (pos / q, pos % q);
        for r in 0..b {
            let row = (i * b + r) * n + j * b;
            full[row..row + b].copy_from_slice(&block[r * b..(r + 1) * b]);
        }
    }
    Ok(full)
}

/// Materializes a full n×n matrix from a generator. Test and oracle helper.
pub fn full_matrix(init: &MatrixInit, n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(init(i, j));
        }
    }
    out
}

/// Plain serial triple-loop product, the reference the distributed runs are
/// checked against.
pub fn dense_matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n, "left operand is {n}x{n}");
    assert_eq!(b.len(), n * n, "right operand is {n}x{n}");
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let av = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += av * b[k * n + j];
            }
        }
    }
    c
}

/// Largest relative elementwise difference between two equal-length buffers.
pub fn max_rel_error(got: &[f64], want: &[f64]) -> f64 {
    assert_eq!(got.len(), want.len(), "length mismatch");
    got.iter()
        .zip(want)
        .map(|(g, w)| {
            let scale = w.abs().max(1.0);
            (g - w).abs() / scale
        })
        .fold(0.0, f64::max)
}
