//! The deterministic runtime: one cooperative task per rank, an explicit cost
//! model, and per-run metrics.
//!
//! Rank programs are ordinary closures that call blocking operations on a
//! [`RankCtx`] (send/recv, barriers, shared-window access). Internally each
//! rank runs on its own thread, but a single execution token serializes them:
//! exactly one task runs at a time, and whenever it blocks or finishes the
//! scheduler hands the token to the ready task with the smallest
//! (virtual time, rank id). Results are therefore bit-identical across runs.
//!
//! Virtual time advances only through communication:
//!
//! * inter-node message of `n` bytes: `alpha + n * beta`
//! * same-node transfer of `n` bytes: `gamma * n`, accounted as a memory copy
//! * barrier over `k` ranks: `barrier_base + k * barrier_per_rank`
//!
//! Point-to-point transfers are blocking rendezvous: both sides wait until the
//! pair matches, then both clocks jump to `max(arrivals) + cost`. Transfers
//! between disjoint pairs overlap freely. When no task can run and some are
//! still blocked, the run aborts with a deadlock report naming every stuck
//! rank and the call it is parked in.

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;

use crate::cluster::{CommKind, Communicator, ContextId, NodeId, Rank, Topology};
use crate::error::{usage_err, BlockedRank, DeadlockReport, Result, SimError};
use crate::shm::{
    detect_races, AccessKind, AccessRecord, RaceReport, WindowHandle, WindowState, WindowSummary,
    WindowView,
};

/// Time units charged per operation. All parameters must be finite and
/// non-negative. The defaults put inter-node latency well above intra-node
/// copy cost, in the spirit of commodity clusters; they are calibration
/// knobs, not measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    /// Per inter-node message.
    pub alpha: f64,
    /// Per inter-node byte.
    pub beta: f64,
    /// Per intra-node copied byte.
    pub gamma: f64,
    /// Flat cost per barrier call.
    pub barrier_base: f64,
    /// Additional barrier cost per participating rank.
    pub barrier_per_rank: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            alpha: 1000.0,
            beta: 0.5,
            gamma: 0.05,
            barrier_base: 300.0,
            barrier_per_rank: 15.0,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("barrier_base", self.barrier_base),
            ("barrier_per_rank", self.barrier_per_rank),
        ];
        for (name, v) in fields {
            if !v.is_finite() || v < 0.0 {
                return Err(SimError::Config(format!(
                    "cost parameter {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn inter_cost(&self, nbytes: u64) -> f64 {
        self.alpha + self.beta * nbytes as f64
    }

    pub fn intra_cost(&self, nbytes: u64) -> f64 {
        self.gamma * nbytes as f64
    }

    pub fn barrier_cost(&self, ranks: usize) -> f64 {
        self.barrier_base + self.barrier_per_rank * ranks as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Send,
    Recv,
    Copy,
    BarrierEnter,
    BarrierExit,
    WindowAccess,
}

/// One timestamped action by one rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub time: f64,
    pub rank: Rank,
    pub kind: EventKind,
    pub size: u64,
    pub peer: Option<Rank>,
}

/// Additive communication counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counters {
    pub intra_copy_bytes: u64,
    pub inter_msgs: u64,
    pub inter_bytes: u64,
    pub barrier_count: u64,
}

impl std::ops::AddAssign<&Counters> for Counters {
    fn add_assign(&mut self, rhs: &Counters) {
        self.intra_copy_bytes += rhs.intra_copy_bytes;
        self.inter_msgs += rhs.inter_msgs;
        self.inter_bytes += rhs.inter_bytes;
        self.barrier_count += rhs.barrier_count;
    }
}

/// Events and counters attributed to one collective call. Calls are keyed by
/// the communicator they ran on and a per-communicator call sequence number,
/// so concurrent collectives on different communicators stay separate.
#[derive(Debug, Clone)]
pub struct CollectiveTrace {
    pub name: String,
    pub context: ContextId,
    pub seq: u64,
    pub events: Vec<Event>,
    pub counters: Counters,
}

/// Whole-run accounting.
#[derive(Debug, Clone, Default)]
pub struct Metrics {
    /// Sum over everything charged during the run.
    pub totals: Counters,
    /// The part of `totals` charged outside any collective call.
    pub unscoped: Counters,
    /// Final virtual time: max over all rank clocks.
    pub modeled_time: f64,
    /// Bytes allocated per node: shared windows plus buffers registered via
    /// `track_alloc`.
    pub per_node_alloc_bytes: BTreeMap<NodeId, u64>,
}

impl Metrics {
    pub fn max_node_alloc(&self) -> u64 {
        self.per_node_alloc_bytes
            .values()
            .copied()
            .max()
            .unwrap_or(0)
    }
}

/// Everything a finished run reports.
#[derive(Debug)]
pub struct RunReport<T> {
    /// Per-rank return values of the rank program.
    pub outputs: Vec<T>,
    pub metrics: Metrics,
    /// One trace per collective call, ordered by (communicator, call seq).
    pub traces: Vec<CollectiveTrace>,
    /// Events charged outside any collective call, time-ordered.
    pub loose_events: Vec<Event>,
    /// Races found across all windows, sorted and deduplicated.
    pub races: Vec<RaceReport>,
    pub windows: Vec<WindowSummary>,
    /// Final virtual clock of each rank.
    pub rank_times: Vec<f64>,
}

impl<T> RunReport<T> {
    /// Traces of all calls with the given name, in call order.
    pub fn traces_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a CollectiveTrace> {
        self.traces.iter().filter(move |t| t.name == name)
    }

    /// True when totals equal the by-call breakdown plus the unscoped rest.
    pub fn counters_conserved(&self) -> bool {
        let mut sum = self.metrics.unscoped;
        for t in &self.traces {
            sum += &t.counters;
        }
        sum == self.metrics.totals
    }
}

#[derive(Debug, Clone, PartialEq)]
enum BlockReason {
    /// Waiting for posted point-to-point halves to match; the halves
    /// themselves are in `State::halves`.
    Transfer,
    Barrier(ContextId, u64),
    Alloc(ContextId, u64),
}

impl std::fmt::Display for BlockReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BlockReason::Transfer => write!(f, "transfer"),
            BlockReason::Barrier(ctx, seq) => write!(f, "barrier(comm ctx={ctx}, call #{seq})"),
            BlockReason::Alloc(ctx, seq) => {
                write!(f, "allocate_shared(comm ctx={ctx}, call #{seq})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Status {
    Ready,
    Running,
    Blocked(BlockReason),
    Finished,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HalfKind {
    Send,
    Recv,
}

/// One direction of a point-to-point call. A call posts all its halves at
/// once (one for `send`/`recv`, two for `sendrecv`) and resumes when every
/// half has matched; the rank's clock then jumps to the latest completion,
/// so the two directions of an exchange overlap like a full-duplex link.
#[derive(Debug, Clone)]
struct Half {
    kind: HalfKind,
    peer: Rank,
    /// Payload size; known at post time for sends, filled at match for recvs.
    size: Option<u64>,
    done: Option<f64>,
}

fn describe_halves(halves: &[Half]) -> String {
    let parts: Vec<String> = halves
        .iter()
        .filter(|h| h.done.is_none())
        .map(|h| match h.kind {
            HalfKind::Send => match h.size {
                Some(n) => format!("send(dst={}, {n} bytes)", h.peer),
                None => format!("send(dst={})", h.peer),
            },
            HalfKind::Recv => format!("recv(src={})", h.peer),
        })
        .collect();
    parts.join(" + ")
}

/// A send whose receiver has not posted yet.
struct OutMsg {
    bytes: Vec<u8>,
    clock: f64,
}

enum RvKind {
    Barrier,
    Alloc { sizes: Vec<Option<usize>> },
}

/// In-flight collective rendezvous (barrier or window allocation).
struct Rendezvous {
    kind: RvKind,
    arrived: usize,
    max_clock: f64,
}

type ScopeKey = (ContextId, u64);

struct TraceAcc {
    name: String,
    events: Vec<(u64, Event)>,
    counters: Counters,
}

struct State {
    clocks: Vec<f64>,
    status: Vec<Status>,
    current: Option<Rank>,
    abort: Option<SimError>,
    panic_payload: Option<Box<dyn std::any::Any + Send>>,

    posted_sends: HashMap<(Rank, Rank), OutMsg>,
    posted_recvs: HashMap<(Rank, Rank), f64>,
    inbox: HashMap<(Rank, Rank), Vec<u8>>,
    halves: Vec<Vec<Half>>,
    rendezvous: HashMap<(ContextId, u64), Rendezvous>,
    rendezvous_seq: HashMap<(Rank, ContextId), u64>,
    alloc_results: HashMap<(ContextId, u64), WindowHandle>,

    scope: Vec<Option<ScopeKey>>,
    scope_seq: HashMap<(Rank, ContextId), u64>,
    traces: BTreeMap<ScopeKey, TraceAcc>,
    loose_events: Vec<(u64, Event)>,
    event_seq: u64,

    totals: Counters,
    unscoped: Counters,
    per_node_alloc: BTreeMap<NodeId, u64>,

    windows: Vec<WindowState>,
    vclocks: Vec<Vec<u64>>,
}

impl State {
    fn new(ranks: usize) -> Self {
        let mut vclocks = vec![vec![0u64; ranks]; ranks];
        for (r, vc) in vclocks.iter_mut().enumerate() {
            vc[r] = 1;
        }
        State {
            clocks: vec![0.0; ranks],
            status: vec![Status::Ready; ranks],
            current: None,
            abort: None,
            panic_payload: None,
            posted_sends: HashMap::new(),
            posted_recvs: HashMap::new(),
            inbox: HashMap::new(),
            halves: vec![Vec::new(); ranks],
            rendezvous: HashMap::new(),
            rendezvous_seq: HashMap::new(),
            alloc_results: HashMap::new(),
            scope: vec![None; ranks],
            scope_seq: HashMap::new(),
            traces: BTreeMap::new(),
            loose_events: Vec::new(),
            event_seq: 0,
            totals: Counters::default(),
            unscoped: Counters::default(),
            per_node_alloc: BTreeMap::new(),
            windows: Vec::new(),
            vclocks,
        }
    }

    fn charge(&mut self, rank: Rank, f: impl Fn(&mut Counters)) {
        f(&mut self.totals);
        match self.scope[rank] {
            Some(key) => f(&mut self
                .traces
                .get_mut(&key)
                .expect("open scope has a trace")
                .counters),
            None => f(&mut self.unscoped),
        }
    }

    fn push_event(
        &mut self,
        rank: Rank,
        time: f64,
        kind: EventKind,
        size: u64,
        peer: Option<Rank>,
    ) {
        let seq = self.event_seq;
        self.event_seq += 1;
        let ev = Event {
            time,
            rank,
            kind,
            size,
            peer,
        };
        match self.scope[rank] {
            Some(key) => self
                .traces
                .get_mut(&key)
                .expect("open scope has a trace")
                .events
                .push((seq, ev)),
            None => self.loose_events.push((seq, ev)),
        }
    }

    /// Joins the vector clocks of all participants of a synchronization and
    /// bumps each participant's own component, so accesses before the sync
    /// happen-before accesses after it on every participant.
    fn vc_sync(&mut self, ranks: &[Rank]) {
        let width = self.vclocks.first().map(|v| v.len()).unwrap_or(0);
        let mut join = vec![0u64; width];
        for &r in ranks {
            for (j, &v) in join.iter_mut().zip(&self.vclocks[r]) {
                *j = (*j).max(v);
            }
        }
        for &r in ranks {
            self.vclocks[r] = join.clone();
            self.vclocks[r][r] += 1;
        }
    }

    fn next_rendezvous_seq(&mut self, rank: Rank, ctx: ContextId) -> u64 {
        let c = self.rendezvous_seq.entry((rank, ctx)).or_insert(0);
        let s = *c;
        *c += 1;
        s
    }
}

struct Inner {
    topo: Arc<Topology>,
    cost: CostModel,
    m: Mutex<State>,
    cv: Condvar,
}

impl Inner {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.m.lock().expect("simulator state poisoned")
    }

    /// Picks the next runnable task: smallest (virtual time, rank). With no
    /// runnable task left, either the run is complete or it is deadlocked.
    fn schedule_next(&self, st: &mut State) {
        let mut next: Option<Rank> = None;
        for r in 0..st.status.len() {
            if st.status[r] != Status::Ready {
                continue;
            }
            next = match next {
                None => Some(r),
                Some(b) => {
                    if st.clocks[r].total_cmp(&st.clocks[b]) == std::cmp::Ordering::Less {
                        Some(r)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        match next {
            Some(r) => {
                st.current = Some(r);
                st.status[r] = Status::Running;
            }
            None => {
                st.current = None;
                let blocked: Vec<BlockedRank> = st
                    .status
                    .iter()
                    .enumerate()
                    .filter_map(|(r, s)| match s {
                        Status::Blocked(BlockReason::Transfer) => Some(BlockedRank {
                            rank: r,
                            waiting_in: describe_halves(&st.halves[r]),
                        }),
                        Status::Blocked(reason) => Some(BlockedRank {
                            rank: r,
                            waiting_in: reason.to_string(),
                        }),
                        _ => None,
                    })
                    .collect();
                if !blocked.is_empty() && st.abort.is_none() {
                    st.abort = Some(SimError::Deadlock(DeadlockReport { blocked }));
                }
            }
        }
        self.cv.notify_all();
    }

    /// Parks the calling rank with the given reason and hands the token to
    /// the scheduler. Returns once the rank is scheduled again, or with an
    /// error when the run is torn down.
    fn block_on<'a>(
        &'a self,
        mut st: MutexGuard<'a, State>,
        me: Rank,
        reason: BlockReason,
    ) -> Result<MutexGuard<'a, State>> {
        st.status[me] = Status::Blocked(reason);
        self.schedule_next(&mut st);
        loop {
            if st.abort.is_some() {
                return Err(SimError::Aborted);
            }
            if st.current == Some(me) {
                debug_assert_eq!(st.status[me], Status::Running);
                return Ok(st);
            }
            st = self.cv.wait(st).expect("simulator state poisoned");
        }
    }

    fn wait_first(&self, me: Rank) -> bool {
        let mut st = self.lock();
        loop {
            if st.abort.is_some() {
                return false;
            }
            if st.current == Some(me) {
                return true;
            }
            st = self.cv.wait(st).expect("simulator state poisoned");
        }
    }

    fn start(&self) {
        let mut st = self.lock();
        self.schedule_next(&mut st);
    }

    fn finish(&self, me: Rank) {
        let mut st = self.lock();
        st.status[me] = Status::Finished;
        self.schedule_next(&mut st);
    }

    fn abort_with(&self, err: SimError) {
        let mut st = self.lock();
        if st.abort.is_none() {
            st.abort = Some(err);
        }
        self.cv.notify_all();
    }

    fn abort_panic(&self, payload: Box<dyn std::any::Any + Send>) {
        let mut st = self.lock();
        if st.panic_payload.is_none() {
            st.panic_payload = Some(payload);
        }
        if st.abort.is_none() {
            st.abort = Some(SimError::Aborted);
        }
        self.cv.notify_all();
    }

    fn post_send(&self, st: &mut State, me: Rank, dst: Rank, bytes: Vec<u8>) {
        st.halves[me].push(Half {
            kind: HalfKind::Send,
            peer: dst,
            size: Some(bytes.len() as u64),
            done: None,
        });
        let clock = st.clocks[me];
        st.posted_sends.insert((me, dst), OutMsg { bytes, clock });
        self.try_match(st, me, dst);
    }

    fn post_recv(&self, st: &mut State, me: Rank, src: Rank) {
        st.halves[me].push(Half {
            kind: HalfKind::Recv,
            peer: src,
            size: None,
            done: None,
        });
        st.posted_recvs.insert((src, me), st.clocks[me]);
        self.try_match(st, src, me);
    }

    /// Completes the `src -> dst` transfer once both halves are posted. The
    /// transfer starts at the later posting clock and is charged to the
    /// sender's scope; the payload is parked in the receiver's inbox.
    fn try_match(&self, st: &mut State, src: Rank, dst: Rank) {
        if !(st.posted_sends.contains_key(&(src, dst)) && st.posted_recvs.contains_key(&(src, dst)))
        {
            return;
        }
        let out = st.posted_sends.remove(&(src, dst)).expect("send posted");
        let recv_clock = st.posted_recvs.remove(&(src, dst)).expect("recv posted");
        let nbytes = out.bytes.len() as u64;
        let inter = self.topo.node_of(src) != self.topo.node_of(dst);
        let cost = if inter {
            self.cost.inter_cost(nbytes)
        } else {
            self.cost.intra_cost(nbytes)
        };
        let done = out.clock.max(recv_clock) + cost;
        if inter {
            st.charge(src, |c| {
                c.inter_msgs += 1;
                c.inter_bytes += nbytes;
            });
        } else {
            st.charge(src, |c| c.intra_copy_bytes += nbytes);
        }
        st.push_event(src, done, EventKind::Send, nbytes, Some(dst));
        st.push_event(dst, done, EventKind::Recv, nbytes, Some(src));
        st.inbox.insert((src, dst), out.bytes);
        st.vc_sync(&[src, dst]);
        Self::mark_half_done(st, src, HalfKind::Send, dst, nbytes, done);
        Self::mark_half_done(st, dst, HalfKind::Recv, src, nbytes, done);
    }

    fn mark_half_done(
        st: &mut State,
        rank: Rank,
        kind: HalfKind,
        peer: Rank,
        nbytes: u64,
        done: f64,
    ) {
        let h = st.halves[rank]
            .iter_mut()
            .find(|h| h.kind == kind && h.peer == peer && h.done.is_none())
            .expect("matched transfer has a posted half");
        h.done = Some(done);
        h.size = Some(nbytes);
        if matches!(st.status[rank], Status::Blocked(BlockReason::Transfer))
            && st.halves[rank].iter().all(|h| h.done.is_some())
        {
            let resume = st.halves[rank]
                .iter()
                .map(|h| h.done.expect("all done"))
                .fold(st.clocks[rank], f64::max);
            st.clocks[rank] = resume;
            st.status[rank] = Status::Ready;
        }
    }

    /// Blocks the caller until every posted half has matched, then advances
    /// its clock to the latest completion.
    fn complete_posted<'a>(
        &'a self,
        mut st: MutexGuard<'a, State>,
        me: Rank,
    ) -> Result<MutexGuard<'a, State>> {
        if st.halves[me].iter().all(|h| h.done.is_some()) {
            let resume = st.halves[me]
                .iter()
                .map(|h| h.done.expect("all done"))
                .fold(st.clocks[me], f64::max);
            st.clocks[me] = resume;
        } else {
            st = self.block_on(st, me, BlockReason::Transfer)?;
        }
        st.halves[me].clear();
        Ok(st)
    }
}

/// Run configuration: a topology plus a cost model. Each call to [`run`]
/// starts from fresh state, so one `Simulation` can drive many runs.
///
/// [`run`]: Simulation::run
pub struct Simulation {
    topo: Arc<Topology>,
    cost: CostModel,
}

impl Simulation {
    pub fn new(spec: crate::cluster::ClusterSpec) -> Result<Self> {
        Self::with_cost(spec, CostModel::default())
    }

    pub fn with_cost(spec: crate::cluster::ClusterSpec, cost: CostModel) -> Result<Self> {
        Self::from_topology(Topology::new(spec)?, cost)
    }

    pub fn from_topology(topo: Topology, cost: CostModel) -> Result<Self> {
        cost.validate()?;
        Ok(Simulation {
            topo: Arc::new(topo),
            cost,
        })
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topo
    }

    pub fn cost(&self) -> &CostModel {
        &self.cost
    }

    /// Spawns one task per rank running `program` and executes them to
    /// completion under the deterministic scheduler.
    ///
    /// Rank programs must propagate errors from context operations; once any
    /// rank fails, every blocked operation returns [`SimError::Aborted`] and
    /// the run reports the original failure. Panics inside rank programs
    /// (e.g. assertion failures in tests) are re-raised on the caller.
    pub fn run<T, F>(&self, program: F) -> Result<RunReport<T>>
    where
        T: Send + 'static,
        F: Fn(&mut RankCtx) -> Result<T> + Send + Sync + 'static,
    {
        let ranks = self.topo.total_ranks();
        let inner = Arc::new(Inner {
            topo: Arc::clone(&self.topo),
            cost: self.cost.clone(),
            m: Mutex::new(State::new(ranks)),
            cv: Condvar::new(),
        });
        let outputs: Arc<Mutex<Vec<Option<T>>>> =
            Arc::new(Mutex::new((0..ranks).map(|_| None).collect()));
        let program = Arc::new(program);

        let mut handles = Vec::with_capacity(ranks);
        for r in 0..ranks {
            let inner = Arc::clone(&inner);
            let outputs = Arc::clone(&outputs);
            let program = Arc::clone(&program);
            let handle = thread::Builder::new()
                .name(format!("rank-{r}"))
                .spawn(move || {
                    if !inner.wait_first(r) {
                        return;
                    }
                    let mut ctx = RankCtx {
                        rank: r,
                        inner: Arc::clone(&inner),
                    };
                    match catch_unwind(AssertUnwindSafe(|| program(&mut ctx))) {
                        Ok(Ok(v)) => {
                            outputs.lock().expect("outputs poisoned")[r] = Some(v);
                            inner.finish(r);
                        }
                        Ok(Err(e)) => inner.abort_with(e),
                        Err(payload) => inner.abort_panic(payload),
                    }
                })
                .expect("failed to spawn rank task");
            handles.push(handle);
        }

        inner.start();
        for h in handles {
            let _ = h.join();
        }

        let inner = Arc::try_unwrap(inner)
            .unwrap_or_else(|_| panic!("rank task leaked a context reference"));
        let st = inner.m.into_inner().expect("simulator state poisoned");

        if let Some(payload) = st.panic_payload {
            resume_unwind(payload);
        }
        if let Some(err) = st.abort {
            return Err(err);
        }

        let sort_events = |mut evs: Vec<(u64, Event)>| -> Vec<Event> {
            evs.sort_by(|(sa, a), (sb, b)| {
                a.time
                    .total_cmp(&b.time)
                    .then(a.rank.cmp(&b.rank))
                    .then(sa.cmp(sb))
            });
            evs.into_iter().map(|(_, e)| e).collect()
        };

        let traces: Vec<CollectiveTrace> = st
            .traces
            .into_iter()
            .map(|((context, seq), acc)| CollectiveTrace {
                name: acc.name,
                context,
                seq,
                events: sort_events(acc.events),
                counters: acc.counters,
            })
            .collect();

        let mut races = Vec::new();
        for w in &st.windows {
            races.extend(detect_races(&w.log));
        }
        races.sort();
        races.dedup();

        let windows = st
            .windows
            .iter()
            .enumerate()
            .map(|(i, w)| WindowSummary {
                handle: WindowHandle(i),
                node: w.node,
                owner: w.owner,
                owner_ctx: w.owner_ctx,
                len: w.buf.len(),
                epoch: w.epoch,
                data: w.buf.clone(),
            })
            .collect();

        let modeled_time = st.clocks.iter().cloned().fold(0.0, f64::max);
        let metrics = Metrics {
            totals: st.totals,
            unscoped: st.unscoped,
            modeled_time,
            per_node_alloc_bytes: st.per_node_alloc,
        };
        let outputs = outputs
            .lock()
            .expect("outputs poisoned")
            .iter_mut()
            .map(|o| o.take().expect("finished rank left no output"))
            .collect();

        Ok(RunReport {
            outputs,
            metrics,
            traces,
            loose_events: sort_events(st.loose_events),
            races,
            windows,
            rank_times: st.clocks,
        })
    }
}

/// Per-rank handle passed to rank programs. All blocking communication goes
/// through this.
pub struct RankCtx {
    rank: Rank,
    inner: Arc<Inner>,
}

impl RankCtx {
    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.inner.topo
    }

    pub fn cost(&self) -> &CostModel {
        &self.inner.cost
    }

    /// Current virtual time of this rank.
    pub fn now(&self) -> f64 {
        self.inner.lock().clocks[self.rank]
    }

    fn check_peer(&self, peer: Rank, what: &str) -> Result<()> {
        if peer == self.rank {
            return usage_err(format!("rank {} cannot {what} itself", self.rank));
        }
        if peer >= self.inner.topo.total_ranks() {
            return usage_err(format!("{what} peer {peer} outside the cluster"));
        }
        Ok(())
    }

    /// Blocking send: returns once `dst` has posted a matching receive and
    /// the transfer completed.
    pub fn send(&mut self, dst: Rank, bytes: &[u8]) -> Result<()> {
        self.check_peer(dst, "send to")?;
        let me = self.rank;
        let mut st = self.inner.lock();
        self.inner.post_send(&mut st, me, dst, bytes.to_vec());
        let _st = self.inner.complete_posted(st, me)?;
        Ok(())
    }

    /// Blocking receive from a specific source rank.
    pub fn recv(&mut self, src: Rank) -> Result<Vec<u8>> {
        self.check_peer(src, "receive from")?;
        let me = self.rank;
        let mut st = self.inner.lock();
        self.inner.post_recv(&mut st, me, src);
        let mut st = self.inner.complete_posted(st, me)?;
        Ok(st
            .inbox
            .remove(&(src, me))
            .expect("completed recv has a payload"))
    }

    /// Simultaneous send and receive, as a full-duplex exchange: both
    /// transfers start when their pair is matched and this rank resumes at
    /// the later completion, so the two directions overlap instead of
    /// serializing. The workhorse of ring and pairwise-exchange collectives,
    /// which would otherwise deadlock under blocking rendezvous.
    pub fn sendrecv(&mut self, dst: Rank, bytes: &[u8], src: Rank) -> Result<Vec<u8>> {
        self.check_peer(dst, "send to")?;
        self.check_peer(src, "receive from")?;
        let me = self.rank;
        let mut st = self.inner.lock();
        self.inner.post_send(&mut st, me, dst, bytes.to_vec());
        self.inner.post_recv(&mut st, me, src);
        let mut st = self.inner.complete_posted(st, me)?;
        Ok(st
            .inbox
            .remove(&(src, me))
            .expect("completed recv has a payload"))
    }

    /// Charges an explicit intra-node memory copy of `nbytes`.
    pub fn local_copy(&mut self, nbytes: u64) {
        let me = self.rank;
        let mut st = self.inner.lock();
        st.clocks[me] += self.inner.cost.intra_cost(nbytes);
        st.charge(me, |c| c.intra_copy_bytes += nbytes);
        let t = st.clocks[me];
        st.push_event(me, t, EventKind::Copy, nbytes, None);
    }

    /// Registers `nbytes` of per-rank buffer space against this rank's node,
    /// for memory-footprint accounting only.
    pub fn track_alloc(&mut self, nbytes: u64) {
        let node = self.inner.topo.node_of(self.rank);
        let mut st = self.inner.lock();
        *st.per_node_alloc.entry(node).or_insert(0) += nbytes;
    }

    /// Blocks until every member of `comm` has entered the same barrier call,
    /// then charges the barrier cost and advances the epoch of every window
    /// owned by `comm`.
    pub fn barrier(&mut self, comm: &Communicator) -> Result<()> {
        let me = self.rank;
        if comm.rank_of(me).is_none() {
            return usage_err(format!(
                "rank {me} called barrier on communicator {} it does not belong to",
                comm.context_id()
            ));
        }
        let ctx = comm.context_id();
        let mut st = self.inner.lock();
        let seq = st.next_rendezvous_seq(me, ctx);
        let t = st.clocks[me];
        st.push_event(me, t, EventKind::BarrierEnter, 0, None);
        let rv = st.rendezvous.entry((ctx, seq)).or_insert(Rendezvous {
            kind: RvKind::Barrier,
            arrived: 0,
            max_clock: 0.0,
        });
        if !matches!(rv.kind, RvKind::Barrier) {
            return usage_err(format!(
                "rank {me} entered barrier where call #{seq} on communicator {ctx} is a different collective"
            ));
        }
        rv.arrived += 1;
        rv.max_clock = rv.max_clock.max(t);
        if rv.arrived < comm.size() {
            let _st = self
                .inner
                .block_on(st, me, BlockReason::Barrier(ctx, seq))?;
            return Ok(());
        }

        // Last arrival completes the call for everyone.
        let rv = st
            .rendezvous
            .remove(&(ctx, seq))
            .expect("rendezvous present");
        let done = rv.max_clock + self.inner.cost.barrier_cost(comm.size());
        for &m in comm.members() {
            st.clocks[m] = done;
            st.push_event(m, done, EventKind::BarrierExit, 0, None);
            if m != me {
                debug_assert!(matches!(
                    &st.status[m],
                    Status::Blocked(BlockReason::Barrier(c, s)) if *c == ctx && *s == seq
                ));
                st.status[m] = Status::Ready;
            }
        }
        st.charge(me, |c| c.barrier_count += 1);
        if let CommKind::SharedMem(_) = comm.kind() {
            for w in &mut st.windows {
                if w.owner_ctx == ctx {
                    w.epoch += 1;
                }
            }
        }
        st.vc_sync(comm.members());
        Ok(())
    }

    /// Collectively allocates a shared window on the node backing `comm`.
    /// Every member contributes `my_size` bytes (typically the full buffer on
    /// the leader and zero elsewhere); the window is the concatenation in
    /// member order. Charges no virtual time; the window's bytes are counted
    /// against the node's allocation total.
    pub fn allocate_shared(&mut self, comm: &Communicator, my_size: usize) -> Result<WindowHandle> {
        let me = self.rank;
        let node = match comm.kind() {
            CommKind::SharedMem(n) => *n,
            other => {
                return usage_err(format!(
                    "allocate_shared needs a shared-memory communicator, got {other:?}"
                ))
            }
        };
        let Some(my_pos) = comm.rank_of(me) else {
            return usage_err(format!(
                "rank {me} called allocate_shared on communicator {} it does not belong to",
                comm.context_id()
            ));
        };
        for &m in comm.members() {
            if self.inner.topo.node_of(m) != node {
                return usage_err(format!(
                    "shared-memory communicator {} spans more than one node",
                    comm.context_id()
                ));
            }
        }
        let ctx = comm.context_id();
        let mut st = self.inner.lock();
        let seq = st.next_rendezvous_seq(me, ctx);
        let t = st.clocks[me];
        let rv = st.rendezvous.entry((ctx, seq)).or_insert(Rendezvous {
            kind: RvKind::Alloc {
                sizes: vec![None; comm.size()],
            },
            arrived: 0,
            max_clock: 0.0,
        });
        let RvKind::Alloc { sizes } = &mut rv.kind else {
            return usage_err(format!(
                "rank {me} entered allocate_shared where call #{seq} on communicator {ctx} is a different collective"
            ));
        };
        sizes[my_pos] = Some(my_size);
        rv.arrived += 1;
        rv.max_clock = rv.max_clock.max(t);
        if rv.arrived < comm.size() {
            let st = self.inner.block_on(st, me, BlockReason::Alloc(ctx, seq))?;
            return Ok(st.alloc_results[&(ctx, seq)]);
        }

        let rv = st
            .rendezvous
            .remove(&(ctx, seq))
            .expect("rendezvous present");
        let RvKind::Alloc { sizes } = rv.kind else {
            unreachable!()
        };
        let sizes: Vec<usize> = sizes.into_iter().map(|s| s.expect("member size")).collect();
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut acc = 0usize;
        for &s in &sizes {
            offsets.push(acc);
            acc += s;
        }
        let handle = WindowHandle(st.windows.len());
        st.windows.push(WindowState {
            node,
            owner: comm.member(0),
            owner_ctx: ctx,
            members: comm.members().to_vec(),
            offsets,
            sizes,
            buf: vec![0u8; acc],
            epoch: 0,
            log: Vec::new(),
        });
        *st.per_node_alloc.entry(node).or_insert(0) += acc as u64;
        st.alloc_results.insert((ctx, seq), handle);
        // Synchronize arrival clocks without charging the run: allocation is
        // one-off setup, excluded from per-call figures.
        for &m in comm.members() {
            st.clocks[m] = rv.max_clock;
            if m != me {
                st.status[m] = Status::Ready;
            }
        }
        st.vc_sync(comm.members());
        Ok(handle)
    }

    /// Returns the view of `target`'s contribution to the window: its byte
    /// offset within the concatenated buffer and its extent. Querying the
    /// member that allocated the whole buffer yields offset 0 and the full
    /// length.
    pub fn shared_query(&self, win: WindowHandle, target: Rank) -> Result<WindowView> {
        let st = self.inner.lock();
        let w = st
            .windows
            .get(win.0)
            .ok_or_else(|| SimError::Usage(format!("unknown window {win:?}")))?;
        if !w.members.contains(&self.rank) {
            return usage_err(format!(
                "rank {} queried a window on node {} it cannot address",
                self.rank, w.node
            ));
        }
        let Some(pos) = w.members.iter().position(|&m| m == target) else {
            return usage_err(format!(
                "shared_query target {target} is not a member of the window's communicator"
            ));
        };
        Ok(WindowView {
            win,
            base_offset: w.offsets[pos],
            extent: w.sizes[pos],
        })
    }

    /// Direct store into the window. Charges no virtual time (shared memory
    /// is addressed in place); the access is logged for race checking.
    pub fn window_write(&mut self, view: &WindowView, offset: usize, bytes: &[u8]) -> Result<()> {
        self.window_access(view, offset, bytes.len(), AccessKind::Write, Some(bytes))
            .map(|_| ())
    }

    /// Direct load from the window; see [`window_write`](Self::window_write).
    pub fn window_read(&mut self, view: &WindowView, offset: usize, len: usize) -> Result<Vec<u8>> {
        self.window_access(view, offset, len, AccessKind::Read, None)
            .map(|d| d.expect("read returns data"))
    }

    fn window_access(
        &mut self,
        view: &WindowView,
        offset: usize,
        len: usize,
        kind: AccessKind,
        data: Option<&[u8]>,
    ) -> Result<Option<Vec<u8>>> {
        let me = self.rank;
        if offset + len > view.extent {
            return usage_err(format!(
                "window access [{offset}, {}) exceeds view extent {}",
                offset + len,
                view.extent
            ));
        }
        let mut st = self.inner.lock();
        let vc = st.vclocks[me].clone();
        let t = st.clocks[me];
        let w = st
            .windows
            .get_mut(view.win.0)
            .ok_or_else(|| SimError::Usage(format!("unknown window {:?}", view.win)))?;
        if !w.members.contains(&me) {
            return usage_err(format!(
                "rank {me} accessed a window on node {} it cannot address",
                w.node
            ));
        }
        let lo = view.base_offset + offset;
        let hi = lo + len;
        debug_assert!(hi <= w.buf.len());
        let out = match (kind, data) {
            (AccessKind::Write, Some(bytes)) => {
                w.buf[lo..hi].copy_from_slice(bytes);
                None
            }
            (AccessKind::Read, None) => Some(w.buf[lo..hi].to_vec()),
            _ => unreachable!(),
        };
        let epoch = w.epoch;
        w.log.push(AccessRecord {
            rank: me,
            lo,
            hi,
            kind,
            epoch,
            vc,
        });
        st.push_event(me, t, EventKind::WindowAccess, len as u64, None);
        Ok(out)
    }

    /// Current epoch of a window (incremented by each barrier on its owning
    /// communicator).
    pub fn window_epoch(&self, win: WindowHandle) -> Result<u64> {
        let st = self.inner.lock();
        st.windows
            .get(win.0)
            .map(|w| w.epoch)
            .ok_or_else(|| SimError::Usage(format!("unknown window {win:?}")))
    }

    /// Scans the window's access log for unsynchronized conflicting pairs.
    pub fn check_races(&self, win: WindowHandle) -> Result<Vec<RaceReport>> {
        let st = self.inner.lock();
        st.windows
            .get(win.0)
            .map(|w| detect_races(&w.log))
            .ok_or_else(|| SimError::Usage(format!("unknown window {win:?}")))
    }

    /// Runs `f` with all events and counters attributed to a named collective
    /// call on `comm`. Nested calls keep the outermost attribution, so a
    /// collective built from other collectives traces as one call.
    pub fn with_collective<R>(
        &mut self,
        name: &str,
        comm: &Communicator,
        f: impl FnOnce(&mut RankCtx) -> Result<R>,
    ) -> Result<R> {
        let me = self.rank;
        let opened = {
            let mut st = self.inner.lock();
            if st.scope[me].is_some() {
                false
            } else {
                let ctx = comm.context_id();
                let c = st.scope_seq.entry((me, ctx)).or_insert(0);
                let seq = *c;
                *c += 1;
                let key = (ctx, seq);
                let acc = st.traces.entry(key).or_insert_with(|| TraceAcc {
                    name: name.to_string(),
                    events: Vec::new(),
                    counters: Counters::default(),
                });
                if acc.name != name {
                    let found = acc.name.clone();
                    return usage_err(format!(
                        "collective mismatch on communicator {ctx}: rank {me} entered {name} where call #{seq} is {found}"
                    ));
                }
                st.scope[me] = Some(key);
                true
            }
        };
        let out = f(self);
        if opened {
            self.inner.lock().scope[me] = None;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::ClusterSpec;

    fn two_nodes_one_rank_each() -> Simulation {
        Simulation::with_cost(
            ClusterSpec::uniform(2, 1),
            CostModel {
                alpha: 100.0,
                beta: 1.0,
                gamma: 0.25,
                barrier_base: 200.0,
                barrier_per_rank: 10.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn cross_node_send_costs_latency_plus_bandwidth() {
        let sim = two_nodes_one_rank_each();
        let report = sim
            .run(|ctx| {
                match ctx.rank() {
                    0 => ctx.send(1, &[7u8; 8])?,
                    _ => {
                        let data = ctx.recv(0)?;
                        assert_eq!(data, vec![7u8; 8]);
                    }
                }
                Ok(())
            })
            .unwrap();
        // alpha + n*beta = 100 + 8
        assert_eq!(report.metrics.modeled_time, 108.0);
        assert_eq!(report.metrics.totals.inter_msgs, 1);
        assert_eq!(report.metrics.totals.inter_bytes, 8);
        assert_eq!(report.metrics.totals.intra_copy_bytes, 0);
    }

    #[test]
    fn same_node_send_is_a_copy() {
        let sim = Simulation::with_cost(
            ClusterSpec::uniform(1, 2),
            CostModel {
                gamma: 0.25,
                ..CostModel::default()
            },
        )
        .unwrap();
        let report = sim
            .run(|ctx| {
                match ctx.rank() {
                    0 => ctx.send(1, &[0u8; 64])?,
                    _ => {
                        ctx.recv(0)?;
                    }
                }
                Ok(())
            })
            .unwrap();
        assert_eq!(report.metrics.modeled_time, 16.0); // 0.25 * 64
        assert_eq!(report.metrics.totals.intra_copy_bytes, 64);
        assert_eq!(report.metrics.totals.inter_msgs, 0);
    }

    #[test]
    fn ping_pong_doubles_the_one_way_cost() {
        let sim = two_nodes_one_rank_each();
        let report = sim
            .run(|ctx| {
                match ctx.rank() {
                    0 => {
                        ctx.send(1, &[1u8; 8])?;
                        ctx.recv(1)?;
                    }
                    _ => {
                        ctx.recv(0)?;
                        ctx.send(0, &[2u8; 8])?;
                    }
                }
                Ok(())
            })
            .unwrap();
        assert_eq!(report.metrics.modeled_time, 216.0); // 2 * (100 + 8)
        assert_eq!(report.metrics.totals.inter_msgs, 2);
    }

    #[test]
    fn sendrecv_exchange_is_full_duplex() {
        let sim = two_nodes_one_rank_each();
        let report = sim
            .run(|ctx| {
                let me = ctx.rank();
                let peer = 1 - me;
                let got = ctx.sendrecv(peer, &[me as u8; 8], peer)?;
                assert_eq!(got, vec![peer as u8; 8]);
                Ok(())
            })
            .unwrap();
        // both directions overlap: one link cost, not two
        assert_eq!(report.metrics.modeled_time, 108.0);
        assert_eq!(report.metrics.totals.inter_msgs, 2);
        assert_eq!(report.metrics.totals.inter_bytes, 16);
    }

    #[test]
    fn sendrecv_cycle_does_not_deadlock() {
        // a 3-cycle where everyone exchanges with both neighbors
        let sim = Simulation::new(ClusterSpec::uniform(3, 1)).unwrap();
        let report = sim
            .run(|ctx| {
                let me = ctx.rank();
                let next = (me + 1) % 3;
                let prev = (me + 2) % 3;
                let got = ctx.sendrecv(next, &[me as u8; 4], prev)?;
                assert_eq!(got, vec![prev as u8; 4]);
                Ok(())
            })
            .unwrap();
        assert_eq!(report.metrics.totals.inter_msgs, 3);
    }

    #[test]
    fn transfers_between_distinct_pairs_overlap() {
        let sim = Simulation::with_cost(
            ClusterSpec::uniform(4, 1),
            CostModel {
                alpha: 100.0,
                beta: 1.0,
                ..CostModel::default()
            },
        )
        .unwrap();
        let report = sim
            .run(|ctx| {
                match ctx.rank() {
                    0 => ctx.send(1, &[0u8; 8])?,
                    1 => {
                        ctx.recv(0)?;
                    }
                    2 => ctx.send(3, &[0u8; 8])?,
                    _ => {
                        ctx.recv(2)?;
                    }
                }
                Ok(())
            })
            .unwrap();
        // both transfers run in parallel virtual time
        assert_eq!(report.metrics.modeled_time, 108.0);
        assert_eq!(report.metrics.totals.inter_msgs, 2);
    }

    #[test]
    fn barrier_charges_base_plus_per_rank() {
        let sim = Simulation::with_cost(
            ClusterSpec::uniform(1, 24),
            CostModel {
                barrier_base: 200.0,
                barrier_per_rank: 10.0,
                ..CostModel::default()
            },
        )
        .unwrap();
        let report = sim
            .run(|ctx| {
                let world = ctx.topology().world().clone();
                ctx.barrier(&world)?;
                Ok(())
            })
            .unwrap();
        assert_eq!(report.metrics.modeled_time, 440.0); // 200 + 24*10
        assert_eq!(report.metrics.totals.barrier_count, 1);
    }

    #[test]
    fn empty_program_has_no_cost_and_no_events() {
        let sim = Simulation::new(ClusterSpec::uniform(1, 1)).unwrap();
        let report = sim.run(|_ctx| Ok(())).unwrap();
        assert_eq!(report.metrics.modeled_time, 0.0);
        assert!(report.loose_events.is_empty());
        assert!(report.traces.is_empty());
    }

    #[test]
    fn unmatched_send_deadlocks_with_named_rank() {
        let sim = two_nodes_one_rank_each();
        let err = sim
            .run(|ctx| {
                if ctx.rank() == 0 {
                    ctx.send(1, &[0u8; 4])?;
                }
                Ok(())
            })
            .unwrap_err();
        match err {
            SimError::Deadlock(report) => {
                assert_eq!(report.blocked.len(), 1);
                assert_eq!(report.blocked[0].rank, 0);
                assert!(
                    report.blocked[0].waiting_in.contains("send(dst=1"),
                    "reason was {:?}",
                    report.blocked[0].waiting_in
                );
            }
            other => panic!("expected deadlock, got {other:?}"),
        }
    }

    #[test]
    fn missing_barrier_member_deadlocks() {
        let sim = Simulation::new(ClusterSpec::uniform(1, 3)).unwrap();
        let err = sim
            .run(|ctx| {
                let world = ctx.topology().world().clone();
                if ctx.rank() != 2 {
                    ctx.barrier(&world)?;
                }
                Ok(())
            })
            .unwrap_err();
        match err {
            SimError::Deadlock(report) => {
                let ranks: Vec<_> = report.blocked.iter().map(|b| b.rank).collect();
                assert_eq!(ranks, vec![0, 1]);
                assert!(report.blocked[0].waiting_in.contains("barrier"));
            }
            other => panic!("expected deadlock, got {other:?}"),
        }
    }

    #[test]
    fn send_to_self_is_a_usage_error() {
        let sim = Simulation::new(ClusterSpec::uniform(1, 1)).unwrap();
        let err = sim.run(|ctx| ctx.send(0, &[1u8])).unwrap_err();
        assert!(matches!(err, SimError::Usage(_)));
    }

    #[test]
    fn runs_are_deterministic() {
        let run_once = || {
            let sim = Simulation::new(ClusterSpec::uniform(2, 2)).unwrap();
            let report = sim
                .run(|ctx| {
                    let world = ctx.topology().world().clone();
                    let me = ctx.rank();
                    let next = (me + 1) % 4;
                    let prev = (me + 3) % 4;
                    if me % 2 == 0 {
                        ctx.send(next, &[me as u8; 16])?;
                        ctx.recv(prev)?;
                    } else {
                        ctx.recv(prev)?;
                        ctx.send(next, &[me as u8; 16])?;
                    }
                    ctx.barrier(&world)?;
                    Ok(())
                })
                .unwrap();
            format!(
                "{:?}|{:?}|{:?}|{}",
                report.loose_events,
                report.metrics.totals,
                report.rank_times,
                report.metrics.modeled_time
            )
        };
        assert_eq!(run_once(), run_once());
    }

    #[test]
    fn every_send_event_has_a_matching_recv() {
        let sim = Simulation::new(ClusterSpec::uniform(2, 2)).unwrap();
        let report = sim
            .run(|ctx| {
                let me = ctx.rank();
                if me < 2 {
                    ctx.send(me + 2, &[me as u8; 10])?;
                } else {
                    let d = ctx.recv(me - 2)?;
                    assert_eq!(d.len(), 10);
                }
                Ok(())
            })
            .unwrap();
        let sends: Vec<_> = report
            .loose_events
            .iter()
            .filter(|e| e.kind == EventKind::Send)
            .collect();
        let recvs: Vec<_> = report
            .loose_events
            .iter()
            .filter(|e| e.kind == EventKind::Recv)
            .collect();
        assert_eq!(sends.len(), recvs.len());
        for s in sends {
            assert!(recvs.iter().any(|r| r.peer == Some(s.rank)
                && s.peer == Some(r.rank)
                && r.size == s.size
                && r.time == s.time));
        }
    }

    #[test]
    fn window_allocation_concatenates_member_sizes() {
        let sim = Simulation::new(ClusterSpec::uniform(1, 2)).unwrap();
        let report = sim
            .run(|ctx| {
                let shared = ctx.topology().shared_comm_of(ctx.rank()).clone();
                let my_size = if ctx.rank() == 0 { 32 } else { 16 };
                let win = ctx.allocate_shared(&shared, my_size)?;
                let v0 = ctx.shared_query(win, 0)?;
                let v1 = ctx.shared_query(win, 1)?;
                assert_eq!((v0.base_offset, v0.extent), (0, 32));
                assert_eq!((v1.base_offset, v1.extent), (32, 16));
                Ok(())
            })
            .unwrap();
        assert_eq!(report.windows.len(), 1);
        assert_eq!(report.windows[0].len, 48);
        assert_eq!(report.windows[0].owner, 0);
        assert_eq!(report.metrics.per_node_alloc_bytes.get(&0), Some(&48));
        assert_eq!(
            report.metrics.modeled_time, 0.0,
            "allocation charges nothing"
        );
    }

    #[test]
    fn zero_length_window_is_fine() {
        let sim = Simulation::new(ClusterSpec::uniform(1, 2)).unwrap();
        sim.run(|ctx| {
            let shared = ctx.topology().shared_comm_of(ctx.rank()).clone();
            let win = ctx.allocate_shared(&shared, 0)?;
            let v = ctx.shared_query(win, 1)?;
            assert_eq!(v.extent, 0);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn window_bounds_are_enforced() {
        let sim = Simulation::new(ClusterSpec::uniform(1, 1)).unwrap();
        let err = sim
            .run(|ctx| {
                let shared = ctx.topology().shared_comm_of(0).clone();
                let win = ctx.allocate_shared(&shared, 8)?;
                let view = ctx.shared_query(win, 0)?;
                ctx.window_write(&view, 4, &[0u8; 8])?;
                Ok(())
            })
            .unwrap_err();
        assert!(matches!(err, SimError::Usage(_)));
    }

    #[test]
    fn barrier_advances_owned_window_epochs() {
        let sim = Simulation::new(ClusterSpec::uniform(1, 2)).unwrap();
        sim.run(|ctx| {
            let shared = ctx.topology().shared_comm_of(ctx.rank()).clone();
            let win = ctx.allocate_shared(&shared, if ctx.rank() == 0 { 16 } else { 0 })?;
            assert_eq!(ctx.window_epoch(win)?, 0);
            ctx.barrier(&shared)?;
            assert_eq!(ctx.window_epoch(win)?, 1);
            ctx.barrier(&shared)?;
            assert_eq!(ctx.window_epoch(win)?, 2);
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn world_barrier_does_not_advance_epochs() {
        let sim = Simulation::new(ClusterSpec::uniform(1, 2)).unwrap();
        sim.run(|ctx| {
            let shared = ctx.topology().shared_comm_of(ctx.rank()).clone();
            let world = ctx.topology().world().clone();
            let win = ctx.allocate_shared(&shared, if ctx.rank() == 0 { 16 } else { 0 })?;
            ctx.barrier(&world)?;
            assert_eq!(
                ctx.window_epoch(win)?,
                0,
                "only the owning communicator advances epochs"
            );
            Ok(())
        })
        .unwrap();
    }

    #[test]
    fn unsynchronized_writes_are_reported_and_barrier_clears_them() {
        let sim = Simulation::new(ClusterSpec::uniform(1, 2)).unwrap();
        let report = sim
            .run(|ctx| {
                let me = ctx.rank();
                let shared = ctx.topology().shared_comm_of(me).clone();
                let win = ctx.allocate_shared(&shared, if me == 0 { 16 } else { 0 })?;
                let view = ctx.shared_query(win, 0)?;
                // both ranks write the same bytes in the same epoch
                ctx.window_write(&view, 0, &[me as u8; 8])?;
                Ok(())
            })
            .unwrap();
        assert_eq!(report.races.len(), 1);
        assert_eq!(report.races[0].ranks, (0, 1));
        assert_eq!(report.races[0].kinds, crate::shm::RaceKinds::WriteWrite);

        let sim = Simulation::new(ClusterSpec::uniform(1, 2)).unwrap();
        let report = sim
            .run(|ctx| {
                let me = ctx.rank();
                let shared = ctx.topology().shared_comm_of(me).clone();
                let win = ctx.allocate_shared(&shared, if me == 0 { 16 } else { 0 })?;
                let view = ctx.shared_query(win, 0)?;
                if me == 1 {
                    ctx.window_write(&view, 0, &[9u8; 8])?;
                }
                ctx.barrier(&shared)?;
                if me == 0 {
                    let data = ctx.window_read(&view, 0, 8)?;
                    assert_eq!(data, vec![9u8; 8]);
                }
                Ok(())
            })
            .unwrap();
        assert!(
            report.races.is_empty(),
            "barrier-separated accesses are ordered"
        );
    }

    #[test]
    fn usage_error_in_one_rank_fails_the_run() {
        let sim = Simulation::new(ClusterSpec::uniform(1, 2)).unwrap();
        let err = sim
            .run(|ctx| {
                if ctx.rank() == 0 {
                    ctx.send(99, &[0u8])?; // out of range
                } else {
                    ctx.recv(0)?;
                }
                Ok(())
            })
            .unwrap_err();
        assert!(matches!(err, SimError::Usage(_)), "got {err:?}");
    }

    #[test]
    fn counters_conserve_across_scopes() {
        let sim = Simulation::new(ClusterSpec::uniform(2, 2)).unwrap();
        let report = sim
            .run(|ctx| {
                let world = ctx.topology().world().clone();
                ctx.with_collective("probe", &world, |ctx| {
                    let me = ctx.rank();
                    if me == 0 {
                        ctx.send(2, &[0u8; 32])?;
                    } else if me == 2 {
                        ctx.recv(0)?;
                    }
                    ctx.barrier(&world)?;
                    Ok(())
                })?;
                // unscoped tail traffic
                if ctx.rank() == 0 {
                    ctx.send(1, &[0u8; 8])?;
                } else if ctx.rank() == 1 {
                    ctx.recv(0)?;
                }
                Ok(())
            })
            .unwrap();
        assert!(report.counters_conserved());
        assert_eq!(report.traces.len(), 1);
        let t = &report.traces[0];
        assert_eq!(t.name, "probe");
        assert_eq!(t.counters.inter_msgs, 1);
        assert_eq!(t.counters.barrier_count, 1);
        assert_eq!(report.metrics.unscoped.intra_copy_bytes, 8);
        // events inside a trace are time-ordered
        for pair in t.events.windows(2) {
            assert!(pair[0].time <= pair[1].time);
        }
    }

    #[test]
    fn scope_seq_aligns_calls_per_communicator() {
        let sim = Simulation::new(ClusterSpec::uniform(1, 2)).unwrap();
        let report = sim
            .run(|ctx| {
                let world = ctx.topology().world().clone();
                for _ in 0..3 {
                    ctx.with_collective("b", &world, |ctx| ctx.barrier(&world))?;
                }
                Ok(())
            })
            .unwrap();
        assert_eq!(report.traces.len(), 3);
        for (i, t) in report.traces.iter().enumerate() {
            assert_eq!(t.seq, i as u64);
            assert_eq!(t.counters.barrier_count, 1);
        }
    }

    #[test]
    fn rank_program_panics_propagate() {
        let sim = Simulation::new(ClusterSpec::uniform(1, 2)).unwrap();
        let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| {
            let _ = sim.run(|ctx| {
                if ctx.rank() == 1 {
                    panic!("boom in rank 1");
                }
                let world = ctx.topology().world().clone();
                ctx.barrier(&world)?;
                Ok(())
            });
        }));
        assert!(outcome.is_err(), "rank panic must surface to the caller");
    }

    #[test]
    fn cost_model_rejects_negative_parameters() {
        let bad = CostModel {
            alpha: -1.0,
            ..CostModel::default()
        };
        assert!(bad.validate().is_err());
    }
}
