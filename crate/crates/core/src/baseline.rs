//! Reference collectives that treat every rank the same regardless of node
//! placement: each rank keeps its own full receive buffer and all data moves
//! through point-to-point transfers. These are the comparison targets for the
//! node-aware implementations in [`crate::hybrid`].
//!
//! All allgather variants work in place: the caller's own contribution must
//! already sit at its block offset in `buf`, and every other block is filled
//! on return. Block placement is fully described by displacements, so no
//! staging copies are charged — receives land directly where they belong.

use crate::cluster::{Communicator, HybridLayout};
use crate::error::{usage_err, Result};
use crate::sim::RankCtx;

/// Storage abstraction for block exchanges: collectives move numbered blocks
/// without knowing whether they live in a private buffer or a shared window.
pub(crate) trait BlockIo {
    fn load(&mut self, ctx: &mut RankCtx, idx: usize) -> Result<Vec<u8>>;
    fn store(&mut self, ctx: &mut RankCtx, idx: usize, bytes: &[u8]) -> Result<()>;
}

/// Blocks backed by disjoint slices of one buffer.
struct SliceBlocks<'a> {
    buf: &'a mut [u8],
    displs: &'a [usize],
    sizes: &'a [usize],
}

impl BlockIo for SliceBlocks<'_> {
    fn load(&mut self, _ctx: &mut RankCtx, idx: usize) -> Result<Vec<u8>> {
        Ok(self.buf[self.displs[idx]..][..self.sizes[idx]].to_vec())
    }

    fn store(&mut self, _ctx: &mut RankCtx, idx: usize, bytes: &[u8]) -> Result<()> {
        self.buf[self.displs[idx]..][..self.sizes[idx]].copy_from_slice(bytes);
        Ok(())
    }
}

/// Node regions scattered across a block-per-member buffer: region `g` is the
/// concatenation of the blocks of node `g`'s members, each at its own buffer
/// position. Lets leaders exchange whole node regions while writing straight
/// into final block positions.
struct NodeRegions<'a> {
    buf: &'a mut [u8],
    block: usize,
    /// For each region: buffer block indices of its member blocks, in order.
    groups: &'a [Vec<usize>],
}

impl BlockIo for NodeRegions<'_> {
    fn load(&mut self, _ctx: &mut RankCtx, idx: usize) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.groups[idx].len() * self.block);
        for &q in &self.groups[idx] {
            out.extend_from_slice(&self.buf[q * self.block..][..self.block]);
        }
        Ok(out)
    }

    fn store(&mut self, _ctx: &mut RankCtx, idx: usize, bytes: &[u8]) -> Result<()> {
        for (j, &q) in self.groups[idx].iter().enumerate() {
            self.buf[q * self.block..][..self.block]
                .copy_from_slice(&bytes[j * self.block..][..self.block]);
        }
        Ok(())
    }
}

/// Ring dissemination: in step `t` every member passes block
/// `(pos - t) mod p` to its successor and receives block `(pos - t - 1) mod p`
/// from its predecessor, as one full-duplex exchange per step. After `p - 1`
/// steps every member holds every block.
pub(crate) fn ring_pass(
    ctx: &mut RankCtx,
    comm: &Communicator,
    sizes: &[usize],
    io: &mut dyn BlockIo,
) -> Result<()> {
    let p = comm.size();
    if sizes.len() != p {
        return usage_err(format!(
            "ring exchange got {} block sizes for {p} members",
            sizes.len()
        ));
    }
    if p <= 1 {
        return Ok(());
    }
    let Some(me_pos) = comm.rank_of(ctx.rank()) else {
        return usage_err(format!(
            "rank {} is not a member of communicator {}",
            ctx.rank(),
            comm.context_id()
        ));
    };
    let next = comm.member((me_pos + 1) % p);
    let prev = comm.member((me_pos + p - 1) % p);
    for t in 0..p - 1 {
        let send_idx = (me_pos + p - t) % p;
        let recv_idx = (me_pos + p - t - 1) % p;
        let bytes = io.load(ctx, send_idx)?;
        debug_assert_eq!(bytes.len(), sizes[send_idx]);
        let got = ctx.sendrecv(next, &bytes, prev)?;
        if got.len() != sizes[recv_idx] {
            return usage_err(format!(
                "ring step {t}: expected {} bytes for block {recv_idx}, got {}",
                sizes[recv_idx],
                got.len()
            ));
        }
        io.store(ctx, recv_idx, &got)?;
    }
    Ok(())
}

fn check_regions(counts: &[usize], displs: &[usize], buf_len: usize) -> Result<()> {
    if counts.len() != displs.len() {
        return usage_err(format!(
            "{} counts but {} displacements",
            counts.len(),
            displs.len()
        ));
    }
    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(counts.len());
    for (i, (&c, &d)) in counts.iter().zip(displs).enumerate() {
        if d + c > buf_len {
            return usage_err(format!(
                "block {i} spans [{d}, {}) beyond the {buf_len}-byte buffer",
                d + c
            ));
        }
        if c > 0 {
            spans.push((d, d + c));
        }
    }
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return usage_err(format!(
                "blocks overlap: [{}, {}) and [{}, {})",
                w[0].0, w[0].1, w[1].0, w[1].1
            ));
        }
    }
    Ok(())
}

/// In-place ring allgather of uniform `block`-byte contributions. `buf` holds
/// `comm.size()` blocks in member order, with the caller's block pre-placed.
pub fn allgather_ring(
    ctx: &mut RankCtx,
    comm: &Communicator,
    block: usize,
    buf: &mut [u8],
) -> Result<()> {
    let p = comm.size();
    let counts = vec![block; p];
    let displs: Vec<usize> = (0..p).map(|i| i * block).collect();
    allgatherv_ring(ctx, comm, &counts, &displs, buf)
}

/// In-place ring allgather with per-member byte counts and displacements.
/// Regions must fit in `buf` and must not overlap; they may appear in any
/// order, so interleaved layouts need no staging copies.
pub fn allgatherv_ring(
    ctx: &mut RankCtx,
    comm: &Communicator,
    counts: &[usize],
    displs: &[usize],
    buf: &mut [u8],
) -> Result<()> {
    if counts.len() != comm.size() {
        return usage_err(format!(
            "{} counts for a {}-member communicator",
            counts.len(),
            comm.size()
        ));
    }
    check_regions(counts, displs, buf.len())?;
    let mut io = SliceBlocks {
        buf,
        displs,
        sizes: counts,
    };
    ring_pass(ctx, comm, counts, &mut io)
}

/// In-place allgather in `ceil(log2 p)` exchange rounds. Power-of-two groups
/// use pairwise doubling: partner `pos ^ 2^k`, exchanging the aligned group
/// of blocks accumulated so far, entirely in place. Other sizes fall back to
/// cyclic dissemination over a rotated scratch buffer, which charges one
/// block copy in and `p - 1` block copies out for the final rotation.
pub fn allgather_recdbl(
    ctx: &mut RankCtx,
    comm: &Communicator,
    block: usize,
    buf: &mut [u8],
) -> Result<()> {
    let p = comm.size();
    if buf.len() != p * block {
        return usage_err(format!(
            "allgather buffer is {} bytes, need {p} blocks of {block}",
            buf.len()
        ));
    }
    if p <= 1 {
        return Ok(());
    }
    let Some(me_pos) = comm.rank_of(ctx.rank()) else {
        return usage_err(format!(
            "rank {} is not a member of communicator {}",
            ctx.rank(),
            comm.context_id()
        ));
    };

    if p.is_power_of_two() {
        let mut group = 1usize;
        while group < p {
            let partner_pos = me_pos ^ group;
            let partner = comm.member(partner_pos);
            let my_base = me_pos & !(group - 1);
            let their_base = partner_pos & !(group - 1);
            let send = buf[my_base * block..(my_base + group) * block].to_vec();
            let got = ctx.sendrecv(partner, &send, partner)?;
            if got.len() != group * block {
                return usage_err(format!(
                    "doubling round with group {group}: expected {} bytes, got {}",
                    group * block,
                    got.len()
                ));
            }
            buf[their_base * block..(their_base + group) * block].copy_from_slice(&got);
            group <<= 1;
        }
        return Ok(());
    }

    // Cyclic dissemination: scratch slot j holds block (me_pos + j) mod p.
    let mut work = vec![0u8; p * block];
    work[..block].copy_from_slice(&buf[me_pos * block..][..block]);
    ctx.local_copy(block as u64);
    let mut have = 1usize;
    let mut shift = 1usize;
    while have < p {
        let cnt = have.min(p - have);
        let dst = comm.member((me_pos + p - shift) % p);
        let src = comm.member((me_pos + shift) % p);
        let got = ctx.sendrecv(dst, &work[..cnt * block], src)?;
        if got.len() != cnt * block {
            return usage_err(format!(
                "dissemination round: expected {} bytes, got {}",
                cnt * block,
                got.len()
            ));
        }
        work[have * block..(have + cnt) * block].copy_from_slice(&got);
        have += cnt;
        shift <<= 1;
    }
    for j in 1..p {
        let b = (me_pos + j) % p;
        buf[b * block..][..block].copy_from_slice(&work[j * block..][..block]);
    }
    ctx.local_copy(((p - 1) * block) as u64);
    Ok(())
}

/// Binomial-tree broadcast from communicator position `root_pos`. On the
/// root, `data` is the payload; on every other member it is replaced by the
/// received bytes. `p - 1` messages in `ceil(log2 p)` rounds of tree depth.
pub fn bcast_binomial(
    ctx: &mut RankCtx,
    comm: &Communicator,
    root_pos: usize,
    data: &mut Vec<u8>,
) -> Result<()> {
    let p = comm.size();
    if root_pos >= p {
        return usage_err(format!(
            "broadcast root {root_pos} in a {p}-member communicator"
        ));
    }
    let Some(me_pos) = comm.rank_of(ctx.rank()) else {
        return usage_err(format!(
            "rank {} is not a member of communicator {}",
            ctx.rank(),
            comm.context_id()
        ));
    };
    if p == 1 {
        return Ok(());
    }
    let vrank = (me_pos + p - root_pos) % p;
    let mut mask = 1usize;
    while mask < p {
        if vrank & mask != 0 {
            let src_pos = (me_pos + p - mask) % p;
            *data = ctx.recv(comm.member(src_pos))?;
            break;
        }
        mask <<= 1;
    }
    mask >>= 1;
    while mask > 0 {
        if vrank + mask < p {
            let dst_pos = (me_pos + mask) % p;
            ctx.send(comm.member(dst_pos), data)?;
        }
        mask >>= 1;
    }
    Ok(())
}

/// Node-aware allgather without shared memory: every rank still keeps its own
/// full copy. Non-leaders send their block to the node leader; leaders run a
/// ring exchange of whole node regions; then each leader hands the complete
/// buffer to every local rank, one full-size copy per rank. In-place on `buf`
/// (one block per parent member, parent order), like the flat variants.
pub fn smp_allgather(
    ctx: &mut RankCtx,
    layout: &HybridLayout,
    block: usize,
    buf: &mut [u8],
) -> Result<()> {
    let parent = layout.parent();
    let p = parent.size();
    if buf.len() != p * block {
        return usage_err(format!(
            "allgather buffer is {} bytes, need {p} blocks of {block}",
            buf.len()
        ));
    }
    let me = ctx.rank();
    if parent.rank_of(me).is_none() {
        return usage_err(format!(
            "rank {me} is not a member of communicator {}",
            parent.context_id()
        ));
    }
    let shared = layout
        .shared_group_of(me)
        .expect("parent member belongs to a node group");
    let leader = shared.member(0);

    if me == leader {
        for i in 1..shared.size() {
            let child = shared.member(i);
            let bytes = ctx.recv(child)?;
            if bytes.len() != block {
                return usage_err(format!(
                    "gather from rank {child}: expected {block} bytes, got {}",
                    bytes.len()
                ));
            }
            let q = parent.rank_of(child).expect("child is a parent member");
            buf[q * block..][..block].copy_from_slice(&bytes);
        }
        let bridge = layout.bridge();
        if bridge.size() > 1 {
            let groups: Vec<Vec<usize>> = layout
                .shared_groups()
                .iter()
                .map(|c| {
                    c.members()
                        .iter()
                        .map(|&m| parent.rank_of(m).expect("group member is a parent member"))
                        .collect()
                })
                .collect();
            let sizes: Vec<usize> = groups.iter().map(|g| g.len() * block).collect();
            let mut io = NodeRegions {
                buf,
                block,
                groups: &groups,
            };
            ring_pass(ctx, bridge, &sizes, &mut io)?;
        }
        for i in 1..shared.size() {
            ctx.send(shared.member(i), buf)?;
        }
    } else {
        let q = parent.rank_of(me).expect("checked above");
        ctx.send(leader, &buf[q * block..][..block])?;
        let full = ctx.recv(leader)?;
        debug_assert_eq!(full.len(), buf.len());
        buf.copy_from_slice(&full);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{ClusterSpec, Placement};
    use crate::sim::{CostModel, Simulation};
    use crate::util::pseudo_bytes;

    /// Every member's expected result: the concatenation of all blocks.
    fn concat_oracle(p: usize, block: usize, seed: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(p * block);
        for i in 0..p {
            out.extend_from_slice(&pseudo_bytes(seed ^ i as u64, block));
        }
        out
    }

    fn flat_cost() -> CostModel {
        CostModel {
            alpha: 100.0,
            beta: 1.0,
            gamma: 0.25,
            barrier_base: 200.0,
            barrier_per_rank: 10.0,
        }
    }

    fn run_allgather(
        spec: ClusterSpec,
        block: usize,
        seed: u64,
        algo: fn(&mut RankCtx, &Communicator, usize, &mut [u8]) -> Result<()>,
    ) -> crate::sim::RunReport<Vec<u8>> {
        let sim = Simulation::with_cost(spec, flat_cost()).unwrap();
        let report = sim
            .run(move |ctx| {
                let world = ctx.topology().world().clone();
                let p = world.size();
                let me_pos = world.rank_of(ctx.rank()).unwrap();
                let mut buf = vec![0u8; p * block];
                buf[me_pos * block..][..block]
                    .copy_from_slice(&pseudo_bytes(seed ^ me_pos as u64, block));
                algo(ctx, &world, block, &mut buf)?;
                Ok(buf)
            })
            .unwrap();
        let expect = concat_oracle(report.outputs.len(), block, seed);
        for (r, out) in report.outputs.iter().enumerate() {
            assert_eq!(out, &expect, "rank {r} buffer diverges from the oracle");
        }
        report
    }

    #[test]
    fn ring_matches_oracle_and_message_count() {
        let report = run_allgather(ClusterSpec::uniform(4, 1), 8, 11, allgather_ring);
        // 4 ranks, 3 steps, one message per rank per step
        assert_eq!(report.metrics.totals.inter_msgs, 12);
        assert_eq!(report.metrics.totals.inter_bytes, 12 * 8);
        // full-duplex steps: 3 * (alpha + 8 * beta)
        assert_eq!(report.metrics.modeled_time, 3.0 * 108.0);
    }

    #[test]
    fn ring_handles_odd_sizes_and_same_node_ranks() {
        run_allgather(ClusterSpec::uniform(5, 1), 16, 3, allgather_ring);
        run_allgather(ClusterSpec::uniform(1, 6), 4, 4, allgather_ring);
        run_allgather(ClusterSpec::irregular(vec![3, 1, 2]), 24, 5, allgather_ring);
    }

    #[test]
    fn doubling_matches_oracle_with_log_messages() {
        let report = run_allgather(ClusterSpec::uniform(4, 1), 8, 7, allgather_recdbl);
        // 2 rounds, one exchange per rank per round
        assert_eq!(report.metrics.totals.inter_msgs, 8);
        // per rank: 1 block + 2 blocks sent
        assert_eq!(report.metrics.totals.inter_bytes, 4 * 3 * 8);
        assert_eq!(report.metrics.totals.intra_copy_bytes, 0);
        assert_eq!(report.metrics.modeled_time, 108.0 + 116.0);
    }

    #[test]
    fn doubling_falls_back_for_non_power_of_two() {
        for p in [3usize, 5, 6, 7] {
            let report = run_allgather(ClusterSpec::uniform(p, 1), 8, p as u64, allgather_recdbl);
            let rounds = (p as f64).log2().ceil() as u64;
            assert_eq!(report.metrics.totals.inter_msgs, rounds * p as u64, "p={p}");
            // rotation overhead: p blocks copied per rank
            assert_eq!(
                report.metrics.totals.intra_copy_bytes,
                (p * p * 8) as u64,
                "p={p}"
            );
        }
    }

    #[test]
    fn variable_ring_fills_permuted_regions() {
        let sim = Simulation::with_cost(ClusterSpec::uniform(3, 1), flat_cost()).unwrap();
        // counts 4, 0, 9 at deliberately shuffled displacements
        let counts = [4usize, 0, 9];
        let displs = [9usize, 2, 0];
        let report = sim
            .run(move |ctx| {
                let world = ctx.topology().world().clone();
                let me_pos = world.rank_of(ctx.rank()).unwrap();
                let mut buf = vec![0u8; 13];
                buf[displs[me_pos]..][..counts[me_pos]]
                    .copy_from_slice(&pseudo_bytes(40 + me_pos as u64, counts[me_pos]));
                allgatherv_ring(ctx, &world, &counts, &displs, &mut buf)?;
                Ok(buf)
            })
            .unwrap();
        let mut expect = vec![0u8; 13];
        for i in 0..3 {
            expect[displs[i]..][..counts[i]]
                .copy_from_slice(&pseudo_bytes(40 + i as u64, counts[i]));
        }
        for out in &report.outputs {
            assert_eq!(out, &expect);
        }
    }

    #[test]
    fn variable_ring_rejects_overlap_and_overflow() {
        let sim = Simulation::new(ClusterSpec::uniform(2, 1)).unwrap();
        let err = sim
            .run(|ctx| {
                let world = ctx.topology().world().clone();
                let mut buf = vec![0u8; 16];
                allgatherv_ring(ctx, &world, &[8, 8], &[0, 4], &mut buf)
            })
            .unwrap_err();
        assert!(matches!(err, crate::SimError::Usage(_)));

        let sim = Simulation::new(ClusterSpec::uniform(2, 1)).unwrap();
        let err = sim
            .run(|ctx| {
                let world = ctx.topology().world().clone();
                let mut buf = vec![0u8; 10];
                allgatherv_ring(ctx, &world, &[8, 8], &[0, 8], &mut buf)
            })
            .unwrap_err();
        assert!(matches!(err, crate::SimError::Usage(_)));
    }

    #[test]
    fn broadcast_reaches_everyone_with_minimal_messages() {
        for (p, root) in [(8usize, 0usize), (8, 3), (5, 4), (2, 1), (1, 0)] {
            let payload = pseudo_bytes(90 + p as u64, 24);
            let expect = payload.clone();
            let sim = Simulation::with_cost(ClusterSpec::uniform(p, 1), flat_cost()).unwrap();
            let report = sim
                .run(move |ctx| {
                    let world = ctx.topology().world().clone();
                    let me_pos = world.rank_of(ctx.rank()).unwrap();
                    let mut data = if me_pos == root {
                        payload.clone()
                    } else {
                        Vec::new()
                    };
                    bcast_binomial(ctx, &world, root, &mut data)?;
                    Ok(data)
                })
                .unwrap();
            for out in &report.outputs {
                assert_eq!(out, &expect, "p={p} root={root}");
            }
            assert_eq!(
                report.metrics.totals.inter_msgs,
                (p - 1) as u64,
                "a tree broadcast sends exactly p-1 messages"
            );
        }
    }

    fn run_smp(spec: ClusterSpec, block: usize, seed: u64) -> crate::sim::RunReport<Vec<u8>> {
        let sim = Simulation::with_cost(spec, flat_cost()).unwrap();
        let report = sim
            .run(move |ctx| {
                let layout = ctx.topology().world_layout();
                let p = layout.parent().size();
                let me_pos = layout.parent().rank_of(ctx.rank()).unwrap();
                let mut buf = vec![0u8; p * block];
                buf[me_pos * block..][..block]
                    .copy_from_slice(&pseudo_bytes(seed ^ me_pos as u64, block));
                smp_allgather(ctx, &layout, block, &mut buf)?;
                Ok(buf)
            })
            .unwrap();
        let expect = concat_oracle(report.outputs.len(), block, seed);
        for (r, out) in report.outputs.iter().enumerate() {
            assert_eq!(out, &expect, "rank {r} buffer diverges from the oracle");
        }
        report
    }

    #[test]
    fn leader_staged_allgather_matches_oracle() {
        let block = 8usize;
        let report = run_smp(ClusterSpec::uniform(2, 3), block, 21);
        // gather: 2 children per node send one block each
        // redistribute: leaders send the 48-byte full buffer to 2 children each
        let intra = 2 * 2 * block as u64 + 2 * 2 * 6 * block as u64;
        assert_eq!(report.metrics.totals.intra_copy_bytes, intra);
        // bridge ring between 2 leaders: one step, both directions
        assert_eq!(report.metrics.totals.inter_msgs, 2);
        assert_eq!(report.metrics.totals.inter_bytes, 2 * 3 * block as u64);
    }

    #[test]
    fn leader_staged_allgather_single_node_stays_local() {
        let report = run_smp(ClusterSpec::uniform(1, 4), 16, 31);
        assert_eq!(report.metrics.totals.inter_msgs, 0);
        assert_eq!(report.metrics.totals.barrier_count, 0);
    }

    #[test]
    fn leader_staged_allgather_handles_interleaved_placement() {
        let spec = ClusterSpec::irregular(vec![2, 2])
            .with_placement(Placement::ExplicitMap(vec![0, 1, 0, 1]));
        run_smp(spec, 8, 77);
        let spec = ClusterSpec::irregular(vec![3, 2])
            .with_placement(Placement::ExplicitMap(vec![1, 0, 0, 1, 0]));
        run_smp(spec, 12, 78);
    }

    #[test]
    fn leader_staged_allgather_on_irregular_nodes() {
        run_smp(ClusterSpec::irregular(vec![4, 1, 2]), 8, 55);
    }
}
