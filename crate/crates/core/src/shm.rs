//! Shared-memory windows and the race detector.
//!
//! A window is one byte buffer per node, allocated collectively by a
//! shared-memory communicator. Each member contributes a (possibly zero)
//! size; the concatenation forms the buffer and every member can query any
//! other member's slice, so a node can keep a single copy of a payload that
//! all of its ranks read and write directly.
//!
//! Every access is logged with the window's current epoch (advanced by each
//! barrier on the owning communicator) and a snapshot of the accessing rank's
//! vector clock. Two accesses race when they touch overlapping bytes from
//! different ranks, at least one writes, and neither happens-before the other.
//! Barriers order whole epochs; pairwise synchronization (zero-byte message
//! exchanges) inserts edges between individual ranks, which is why the check
//! uses vector clocks rather than epoch equality alone.

use std::fmt;

use crate::cluster::{ContextId, NodeId, Rank};

/// Identifies a window within one simulation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WindowHandle(pub(crate) usize);

impl WindowHandle {
    pub fn index(&self) -> usize {
        self.0
    }
}

///// A slice of a window: `extent` bytes starting at `base_offset`.
/// Obtained from `shared_query`; offsets passed to read/write are relative
/// to `base_offset` and bounds-checked against `extent`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowView {
    pub(crate) win: WindowHandle,
    pub base_offset: usize,
    pub extent: usize,
}

impl WindowView {
    pub fn window(&self) -> WindowHandle {
        self.win
    }

    /// Narrows the view to `len` bytes starting `offset` bytes in.
    pub fn slice(&self, offset: usize, len: usize) -> Option<WindowView> {
        if offset + len > self.extent {
            return None;
        }
        Some(WindowView {
            win: self.win,
            base_offset: self.base_offset + offset,
            extent: len,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
}

/// One logged window access.
#[derive(Debug, Clone)]
pub(crate) struct AccessRecord {
    pub rank: Rank,
    pub lo: usize,
    pub hi: usize,
    pub kind: AccessKind,
    pub epoch: u64,
    /// The accessing rank's vector clock at access time.
    pub vc: Vec<u64>,
}

/// Full state of one allocated window.
#[derive(Debug, Clone)]
pub(crate) struct WindowState {
    pub node: NodeId,
    /// Leader of the owning communicator.
    pub owner: Rank,
    pub owner_ctx: ContextId,
    pub members: Vec<Rank>,
    /// Per-member byte offsets into `buf` (prefix sums of the sizes).
    pub offsets: Vec<usize>,
    pub sizes: Vec<usize>,
    pub buf: Vec<u8>,
    pub epoch: u64,
    pub log: Vec<AccessRecord>,
}

/// Read-only snapshot of a window, reported after a run.
#[derive(Debug, Clone)]
pub struct WindowSummary {
    pub handle: WindowHandle,
    pub node: NodeId,
    pub owner: Rank,
    pub owner_ctx: ContextId,
    pub len: usize,
    pub epoch: u64,
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RaceKinds {
    WriteWrite,
    WriteRead,
}

/// A pair of unsynchronized conflicting accesses.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct RaceReport {
    pub epoch: u64,
    /// The two ranks involved, lower first.
    pub ranks: (Rank, Rank),
    /// Overlapping byte range, window-absolute, half-open.
    pub range: (usize, usize),
    pub kinds: RaceKinds,
}

impl fmt::Display for RaceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "RACE epoch={} ranks={},{} range=[{},{}) kinds={}",
            self.epoch,
            self.ranks.0,
            self.ranks.1,
            self.range.0,
            self.range.1,
            match self.kinds {
                RaceKinds::WriteWrite => "w/w",
                RaceKinds::WriteRead => "w/r",
            }
        )
    }
}

/// True when access `a` happens-before access `b` under the logged vector
/// clocks: everything rank `a.rank` had done at the time of `a` is visible
/// in `b`'s snapshot.
fn happens_before(a: &AccessRecord, b: &AccessRecord) -> bool {
    a.vc[a.rank] <= b.vc[a.rank]
}

/// Scans an access log for conflicting unsynchronized pairs. Reports are
/// sorted and deduplicated so output order is stable.
pub(crate) fn detect_races(log: &[AccessRecord]) -> Vec<RaceReport> {
    let mut out = Vec::new();
    for i in 0..log.len() {
        for j in (i + 1)..log.len() {
            let (a, b) = (&log[i], &log[j]);
            if a.rank == b.rank {
                continue;
            }
            if a.kind == AccessKind::Read && b.kind == AccessKind::Read {
                continue;
            }
            let lo = a.lo.max(b.lo);
            let hi = a.hi.min(b.hi);
            if lo >= hi {
                continue; // disjoint (empty ranges can never overlap)
            }
            if happens_before(a, b) || happens_before(b, a) {
                continue;
            }
            // Unordered accesses are always within one epoch: epochs only
            // advance through barriers on the owning communicator, which
            // order all node-local accessors.
            debug_assert_eq!(a.epoch, b.epoch);
            let kinds = if a.kind == AccessKind::Write && b.kind == AccessKind::Write {
                RaceKinds::WriteWrite
            } else {
                RaceKinds::WriteRead
            };
            out.push(RaceReport {
                epoch: a.epoch.min(b.epoch),
                ranks: (a.rank.min(b.rank), a.rank.max(b.rank)),
                range: (lo, hi),
                kinds,
            });
        }
    }
    out.sort();
    out.dedup();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(
        rank: Rank,
        lo: usize,
        hi: usize,
        kind: AccessKind,
        epoch: u64,
        vc: Vec<u64>,
    ) -> AccessRecord {
        AccessRecord {
            rank,
            lo,
            hi,
            kind,
            epoch,
            vc,
        }
    }

    #[test]
    fn overlapping_unordered_write_read_races() {
        // two ranks, no synchronization between them
        let log = vec![
            rec(0, 0, 8, AccessKind::Write, 0, vec![1, 0]),
            rec(1, 4, 12, AccessKind::Read, 0, vec![0, 1]),
        ];
        let races = detect_races(&log);
        assert_eq!(races.len(), 1);
        assert_eq!(races[0].ranks, (0, 1));
        assert_eq!(races[0].range, (4, 8));
        assert_eq!(races[0].kinds, RaceKinds::WriteRead);
        assert_eq!(
            races[0].to_string(),
            "RACE epoch=0 ranks=0,1 range=[4,8) kinds=w/r"
        );
    }

    #[test]
    fn read_read_never_races() {
        let log = vec![
            rec(0, 0, 8, AccessKind::Read, 0, vec![1, 0]),
            rec(1, 0, 8, AccessKind::Read, 0, vec![0, 1]),
        ];
        assert!(detect_races(&log).is_empty());
    }

    #[test]
    fn disjoint_ranges_never_race() {
        let log = vec![
            rec(0, 0, 8, AccessKind::Write, 0, vec![1, 0]),
            rec(1, 8, 16, AccessKind::Write, 0, vec![0, 1]),
        ];
        assert!(detect_races(&log).is_empty());
    }

    #[test]
    fn synchronized_accesses_do_not_race() {
        // rank 0 writes, then a sync joins clocks (rank 1 learns 0's count),
        // then rank 1 reads: ordered.
        let log = vec![
            rec(0, 0, 8, AccessKind::Write, 0, vec![1, 0]),
            rec(1, 0, 8, AccessKind::Read, 1, vec![1, 2]),
        ];
        assert!(detect_races(&log).is_empty());
    }

    #[test]
    fn same_rank_never_races() {
        let log = vec![
            rec(0, 0, 8, AccessKind::Write, 0, vec![1, 0]),
            rec(0, 0, 8, AccessKind::Write, 0, vec![1, 0]),
        ];
        assert!(detect_races(&log).is_empty());
    }

    #[test]
    fn empty_range_never_races() {
        let log = vec![
            rec(0, 4, 4, AccessKind::Write, 0, vec![1, 0]),
            rec(1, 0, 8, AccessKind::Write, 0, vec![0, 1]),
        ];
        assert!(detect_races(&log).is_empty());
    }

    #[test]
    fn write_write_reported_once_per_pair() {
        let log = vec![
            rec(0, 0, 8, AccessKind::Write, 2, vec![1, 0, 0]),
            rec(2, 0, 8, AccessKind::Write, 2, vec![0, 0, 1]),
        ];
        let races = detect_races(&log);
        assert_eq!(races.len(), 1);
        assert_eq!(
            races[0].to_string(),
            "RACE epoch=2 ranks=0,2 range=[0,8) kinds=w/w"
        );
    }

    #[test]
    fn view_slicing() {
        let v = WindowView {
            win: WindowHandle(0),
            base_offset: 32,
            extent: 16,
        };
        let s = v.slice(8, 8).unwrap();
        assert_eq!(s.base_offset, 40);
        assert_eq!(s.extent, 8);
        assert!(v.slice(9, 8).is_none());
    }
}
