//! Node-aware collectives backed by one shared window per node.
//!
//! Instead of every rank keeping a private copy of the gathered data, each
//! node's leader allocates a single window sized for the whole result and
//! every local rank addresses it directly. Within a node, data changes hands
//! zero times; between nodes, only the leaders talk. Synchronization is by
//! node-local barriers delimiting window epochs, plus a zero-cost pairwise
//! handoff when a broadcast root is not its node's leader.
//!
//! The allgather brackets the leader exchange in two barriers (entry: local
//! contributions are in place; exit: remote blocks have landed) and needs
//! just one barrier on a single node, where the window write itself completes
//! the gather. The broadcast needs exactly one barrier per call. Degenerate
//! barrier disciplines that skip one of the fences are provided so tests can
//! demonstrate the data races the fences prevent.

use crate::baseline::{bcast_binomial, ring_pass, BlockIo};
use crate::cluster::{HybridLayout, Rank};
use crate::error::{usage_err, Result};
use crate::shm::{WindowHandle, WindowView};
use crate::sim::RankCtx;
use crate::ELEM_BYTES;

/// Which of the two fences around the leader exchange to run. Anything but
/// `Full` is intentionally broken and exists to show the resulting races.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BarrierDiscipline {
    Full,
    SkipEntry,
    SkipExit,
}

/// How leaders exchange node regions in the allgather.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BridgeExchange {
    /// Ring pass of the per-node regions (variable sizes supported).
    RegionRing,
    /// One binomial broadcast per node region, rooted at its leader.
    LeaderBroadcasts,
}

/// Directed zero-byte message from `from` to `to`, both on the same node:
/// a synchronization edge with no modeled cost. Both participants must call
/// it; every other rank must not.
pub fn pairwise_sync(ctx: &mut RankCtx, from: Rank, to: Rank) -> Result<()> {
    if ctx.topology().node_of(from) != ctx.topology().node_of(to) {
        return usage_err(format!(
            "pairwise sync between ranks {from} and {to} on different nodes"
        ));
    }
    let me = ctx.rank();
    if me == from {
        ctx.send(to, &[])
    } else if me == to {
        ctx.recv(from).map(|_| ())
    } else {
        usage_err(format!("rank {me} is not part of the {from}->{to} sync"))
    }
}

/// Per-node window blocks addressed by parent-communicator position: region
/// `g` is the node-`g` members' blocks, loaded and stored straight in the
/// window, so the bridge exchange moves node regions without any staging.
struct WindowRegions<'a> {
    full: WindowView,
    block: usize,
    groups: &'a [Vec<usize>],
}

impl BlockIo for WindowRegions<'_> {
    fn load(&mut self, ctx: &mut RankCtx, idx: usize) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.groups[idx].len() * self.block);
        for &q in &self.groups[idx] {
            out.extend_from_slice(&ctx.window_read(&self.full, q * self.block, self.block)?);
        }
        Ok(out)
    }

    fn store(&mut self, ctx: &mut RankCtx, idx: usize, bytes: &[u8]) -> Result<()> {
        for (j, &q) in self.groups[idx].iter().enumerate() {
            ctx.window_write(
                &self.full,
                q * self.block,
                &bytes[j * self.block..][..self.block],
            )?;
        }
        Ok(())
    }
}

/// Allgather over one shared result buffer per node.
///
/// Setup allocates, per participating node, a single window holding one
/// `msg_elems`-element block per parent member (leaders contribute all the
/// bytes, everyone else zero). A call is: entry barrier; leaders exchange
/// node regions over the bridge; exit barrier. Local ranks then read any
/// block straight out of the window.
pub struct HybridAllgather {
    layout: HybridLayout,
    msg_bytes: usize,
    win: WindowHandle,
    full: WindowView,
    /// Parent positions of each node group's members, bridge order.
    groups: Vec<Vec<usize>>,
}

impl HybridAllgather {
    /// Collective over the layout's parent communicator.
    pub fn setup(ctx: &mut RankCtx, layout: &HybridLayout, msg_elems: usize) -> Result<Self> {
        let me = ctx.rank();
        let parent = layout.parent();
        if parent.rank_of(me).is_none() {
            return usage_err(format!(
                "rank {me} is not a member of communicator {}",
                parent.context_id()
            ));
        }
        let msg_bytes = msg_elems * ELEM_BYTES;
        let shared = layout
            .shared_group_of(me)
            .expect("parent member belongs to a node group");
        let leader = shared.member(0);
        let window_len = parent.size() * msg_bytes;
        let my_share = if me == leader { window_len } else { 0 };
        let win = ctx.allocate_shared(shared, my_share)?;
        let full = ctx.shared_query(win, leader)?;
        debug_assert_eq!(full.extent, window_len);
        let groups = layout
            .shared_groups()
            .iter()
            .map(|c| {
                c.members()
                    .iter()
                    .map(|&m| parent.rank_of(m).expect("group member is a parent member"))
                    .collect()
            })
            .collect();
        Ok(HybridAllgather {
            layout: layout.clone(),
            msg_bytes,
            win,
            full,
            groups,
        })
    }

    pub fn msg_bytes(&self) -> usize {
        self.msg_bytes
    }

    pub fn window(&self) -> WindowHandle {
        self.win
    }

    pub fn layout(&self) -> &HybridLayout {
        &self.layout
    }

    /// Byte offset of the block contributed by parent position `pos`.
    pub fn block_offset(&self, pos: usize) -> usize {
        pos * self.msg_bytes
    }

    /// Stores this rank's contribution in the node window. A direct store:
    /// no copy is charged, this is the single shared copy of the data.
    pub fn write_own(&self, ctx: &mut RankCtx, bytes: &[u8]) -> Result<()> {
        if bytes.len() != self.msg_bytes {
            return usage_err(format!(
                "contribution is {} bytes, expected {}",
                bytes.len(),
                self.msg_bytes
            ));
        }
        let pos = self
            .layout
            .parent()
            .rank_of(ctx.rank())
            .expect("checked at setup");
        ctx.window_write(&self.full, self.block_offset(pos), bytes)
    }

    pub fn call(&self, ctx: &mut RankCtx) -> Result<()> {
        self.call_with(ctx, BarrierDiscipline::Full, BridgeExchange::RegionRing)
    }

    pub fn call_with(
        &self,
        ctx: &mut RankCtx,
        discipline: BarrierDiscipline,
        exchange: BridgeExchange,
    ) -> Result<()> {
        ctx.with_collective("hybrid_allgather", self.layout.parent(), |ctx| {
            let me = ctx.rank();
            let shared = self
                .layout
                .shared_group_of(me)
                .expect("checked at setup")
                .clone();
            if self.layout.node_count() == 1 {
                // One fence: every contribution is already in the window.
                ctx.barrier(&shared)?;
                return Ok(());
            }
            if discipline != BarrierDiscipline::SkipEntry {
                ctx.barrier(&shared)?;
            }
            if self.layout.is_leader(me) {
                let bridge = self.layout.bridge();
                let mut io = WindowRegions {
                    full: self.full,
                    block: self.msg_bytes,
                    groups: &self.groups,
                };
                match exchange {
                    BridgeExchange::RegionRing => {
                        let sizes: Vec<usize> = self
                            .groups
                            .iter()
                            .map(|g| g.len() * self.msg_bytes)
                            .collect();
                        ring_pass(ctx, bridge, &sizes, &mut io)?;
                    }
                    BridgeExchange::LeaderBroadcasts => {
                        let my_pos = bridge.rank_of(me).expect("leader is a bridge member");
                        for g in 0..self.groups.len() {
                            let mut data = if my_pos == g {
                                io.load(ctx, g)?
                            } else {
                                Vec::new()
                            };
                            bcast_binomial(ctx, bridge, g, &mut data)?;
                            if my_pos != g {
                                io.store(ctx, g, &data)?;
                            }
                        }
                    }
                }
            }
            if discipline != BarrierDiscipline::SkipExit {
                ctx.barrier(&shared)?;
            }
            Ok(())
        })
    }

    /// Reads the whole gathered buffer (parent order) out of the window.
    pub fn read_all(&self, ctx: &mut RankCtx) -> Result<Vec<u8>> {
        ctx.window_read(&self.full, 0, self.layout.parent().size() * self.msg_bytes)
    }

    /// Reads the block contributed by parent position `pos`.
    pub fn read_block(&self, ctx: &mut RankCtx, pos: usize) -> Result<Vec<u8>> {
        if pos >= self.layout.parent().size() {
            return usage_err(format!("block {pos} out of range"));
        }
        ctx.window_read(&self.full, self.block_offset(pos), self.msg_bytes)
    }
}

/// Broadcast over one shared payload buffer per node.
///
/// The window holds two payload slots per node and calls alternate between
/// them, so back-to-back broadcasts never overwrite a slot that some rank
/// might still be reading: with one barrier per call, reuses of a slot are
/// always separated by two fences. A call is: the root hands its slot to its
/// node leader (zero-cost sync, skipped when the root leads its node or the
/// run is single-node); leaders run a binomial broadcast over the bridge and
/// store the payload in their windows; one barrier publishes it node-wide.
pub struct HybridBcast {
    layout: HybridLayout,
    msg_bytes: usize,
    win: WindowHandle,
    full: WindowView,
    calls: u64,
}

impl HybridBcast {
    /// Collective over the layout's parent communicator.
    pub fn setup(ctx: &mut RankCtx, layout: &HybridLayout, msg_elems: usize) -> Result<Self> {
        let me = ctx.rank();
        let parent = layout.parent();
        if parent.rank_of(me).is_none() {
            return usage_err(format!(
                "rank {me} is not a member of communicator {}",
                parent.context_id()
            ));
        }
        let msg_bytes = msg_elems * ELEM_BYTES;
        let shared = layout
            .shared_group_of(me)
            .expect("parent member belongs to a node group");
        let leader = shared.member(0);
        let window_len = 2 * msg_bytes;
        let my_share = if me == leader { window_len } else { 0 };
        let win = ctx.allocate_shared(shared, my_share)?;
        let full = ctx.shared_query(win, leader)?;
        Ok(HybridBcast {
            layout: layout.clone(),
            msg_bytes,
            win,
            full,
            calls: 0,
        })
    }

    pub fn msg_bytes(&self) -> usize {
        self.msg_bytes
    }

    pub fn window(&self) -> WindowHandle {
        self.win
    }

    fn slot(&self, call: u64) -> usize {
        (call % 2) as usize * self.msg_bytes
    }

    /// Stores the payload for the next call. Only the upcoming call's root
    /// may write; the data goes into its node's active slot, uncharged.
    pub fn write_root_payload(&self, ctx: &mut RankCtx, bytes: &[u8]) -> Result<()> {
        if bytes.len() != self.msg_bytes {
            return usage_err(format!(
                "payload is {} bytes, expected {}",
                bytes.len(),
                self.msg_bytes
            ));
        }
        ctx.window_write(&self.full, self.slot(self.calls), bytes)
    }

    pub fn call(&mut self, ctx: &mut RankCtx, root_pos: usize) -> Result<()> {
        self.call_impl(ctx, root_pos, true)
    }

    /// The broadcast without its barrier — deliberately unsound, kept for
    /// demonstrating the race the barrier prevents.
    pub fn call_unsynchronized(&mut self, ctx: &mut RankCtx, root_pos: usize) -> Result<()> {
        self.call_impl(ctx, root_pos, false)
    }

    fn call_impl(&mut self, ctx: &mut RankCtx, root_pos: usize, synchronize: bool) -> Result<()> {
        let parent = self.layout.parent();
        if root_pos >= parent.size() {
            return usage_err(format!("broadcast root {root_pos} out of range"));
        }
        let root = parent.member(root_pos);
        let slot = self.slot(self.calls);
        ctx.with_collective("hybrid_bcast", parent, |ctx| {
            let me = ctx.rank();
            let root_leader = self
                .layout
                .leader_of(root)
                .expect("root belongs to a node group");
            let multi = self.layout.node_count() > 1;
            if multi && root != root_leader && (me == root || me == root_leader) {
                // Order the root's slot write before the leader's read.
                pairwise_sync(ctx, root, root_leader)?;
            }
            if multi && self.layout.is_leader(me) {
                let bridge = self.layout.bridge();
                let root_bridge_pos = bridge
                    .rank_of(root_leader)
                    .expect("node leader is a bridge member");
                let mut data = if me == root_leader {
                    ctx.window_read(&self.full, slot, self.msg_bytes)?
                } else {
                    Vec::new()
                };
                bcast_binomial(ctx, bridge, root_bridge_pos, &mut data)?;
                if me != root_leader {
                    ctx.window_write(&self.full, slot, &data)?;
                }
            }
            if synchronize {
                let shared = self
                    .layout
                    .shared_group_of(me)
                    .expect("checked at setup")
                    .clone();
                ctx.barrier(&shared)?;
            }
            Ok(())
        })?;
        self.calls += 1;
        Ok(())
    }

    /// Reads the payload delivered by the most recent call.
    pub fn read(&self, ctx: &mut RankCtx) -> Result<Vec<u8>> {
        if self.calls == 0 {
            return usage_err("no broadcast has completed yet");
        }
        ctx.window_read(&self.full, self.slot(self.calls - 1), self.msg_bytes)
    }
}
