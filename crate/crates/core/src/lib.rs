//! A deterministic simulator for collective communication on clusters of
//! multi-core nodes.
//!
//! The simulator runs one cooperative task per MPI-style rank and charges an
//! explicit cost model for every data movement: inter-node messages pay a
//! latency/bandwidth price, intra-node transfers are accounted as memory
//! copies, and barriers pay a size-dependent synchronization price. On top of
//! the runtime sit two families of collectives:
//!
//! * conventional pure message-passing algorithms ([`baseline`]): ring and
//!   recursive-doubling allgather, a variable-count allgatherv, a binomial
//!   broadcast, and an SMP-aware three-phase allgather;
//! * node-aware algorithms ([`hybrid`]) that keep a single shared copy of the
//!   payload per node in a shared-memory window, let one leader rank per node
//!   carry all inter-node traffic, and synchronize with barriers whose data
//!   integrity is checked by an epoch/vector-clock race detector ([`shm`]).
//!
//! [`summa`] exercises both families inside a blocked matrix-multiply kernel,
//! and [`bench`] drives parameter sweeps that emit CSV tables and SVG charts.

pub mod baseline;
pub mod bench;
pub mod chart;
pub mod cluster;
pub mod config;
pub mod error;
pub mod hybrid;
pub mod shm;
pub mod sim;
pub mod summa;
pub mod util;

pub use cluster::{
    build_rank_map, ClusterSpec, CommKind, Communicator, ContextId, Placement, RankMap, Topology,
};
pub use error::{DeadlockReport, Result, SimError};
pub use sim::{CostModel, Counters, Event, EventKind, Metrics, RankCtx, RunReport, Simulation};

/// Payload element width in bytes. All benchmark message sizes are counted in
/// 8-byte elements (double precision), matching the buffers the collectives
/// were designed around.
pub const ELEM_BYTES: usize = 8;
