//! Cluster description: nodes, rank placement, and communicators.
//!
//! A [`ClusterSpec`] says how many nodes exist and which global rank lives on
//! which node. [`build_rank_map`] derives the lookup tables everything else
//! uses, and the split operations carve the world communicator into one
//! shared-memory communicator per node plus a bridge communicator of the
//! per-node leaders (the lowest global rank on each node).

use crate::error::{config_err, usage_err, Result};

pub type Rank = usize;
pub type NodeId = usize;

/// How global ranks are laid out across nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Placement {
    /// Consecutive global ranks fill node 0, then node 1, and so on.
    SmpStyle,
    /// Arbitrary placement: entry `r` is the node hosting global rank `r`.
    ExplicitMap(Vec<NodeId>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSpec {
    pub node_count: usize,
    pub ranks_per_node: Vec<usize>,
    pub placement: Placement,
}

impl ClusterSpec {
    pub fn uniform(node_count: usize, ranks_per_node: usize) -> Self {
        ClusterSpec {
            node_count,
            ranks_per_node: vec![ranks_per_node; node_count],
            placement: Placement::SmpStyle,
        }
    }

    pub fn irregular(ranks_per_node: Vec<usize>) -> Self {
        ClusterSpec {
            node_count: ranks_per_node.len(),
            ranks_per_node,
            placement: Placement::SmpStyle,
        }
    }

    pub fn with_placement(mut self, placement: Placement) -> Self {
        self.placement = placement;
        self
    }

    pub fn total_ranks(&self) -> usize {
        self.ranks_per_node.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.node_count == 0 {
            return config_err("cluster must have at least one node");
        }
        if self.ranks_per_node.len() != self.node_count {
            return config_err(format!(
                "ranks_per_node has {} entries but node_count is {}",
                self.ranks_per_node.len(),
                self.node_count
            ));
        }
        if self.ranks_per_node.contains(&0) {
            return config_err("every node must host at least one rank");
        }
        if let Placement::ExplicitMap(map) = &self.placement {
            if map.len() != self.total_ranks() {
                return config_err(format!(
                    "placement map has {} entries for {} ranks",
                    map.len(),
                    self.total_ranks()
                ));
            }
            let mut counts = vec![0usize; self.node_count];
            for (r, &n) in map.iter().enumerate() {
                if n >= self.node_count {
                    return config_err(format!("rank {r} mapped to nonexistent node {n}"));
                }
                counts[n] += 1;
            }
            if counts != self.ranks_per_node {
                return config_err(format!(
                    "placement map populates nodes as {counts:?}, expected {:?}",
                    self.ranks_per_node
                ));
            }
        }
        Ok(())
    }
}

/// Lookup tables derived from a [`ClusterSpec`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankMap {
    /// Node hosting each global rank.
    pub node_of: Vec<NodeId>,
    /// Position of each global rank among the ranks of its node, counted in
    /// ascending global-rank order.
    pub local_rank_of: Vec<usize>,
    /// Leader (lowest global rank) of each node.
    pub leader_of: Vec<Rank>,
    /// Global ranks reordered so that each node's ranks are contiguous:
    /// sorted by (node, local rank). Identity under SMP-style placement.
    pub node_sorted_ranks: Vec<Rank>,
}

impl RankMap {
    pub fn total_ranks(&self) -> usize {
        self.node_of.len()
    }

    pub fn is_leader(&self, rank: Rank) -> bool {
        self.leader_of[self.node_of[rank]] == rank
    }

    /// Position of `rank` in `node_sorted_ranks`; blocks laid out per node
    /// land at this index.
    pub fn node_sorted_position(&self, rank: Rank) -> usize {
        let node = self.node_of[rank];
        let before: usize = (0..node).map(|n| self.ranks_on_node(n)).sum();
        before + self.local_rank_of[rank]
    }

    pub fn ranks_on_node(&self, node: NodeId) -> usize {
        self.node_of.iter().filter(|&&n| n == node).count()
    }
}

pub fn build_rank_map(spec: &ClusterSpec) -> Result<RankMap> {
    spec.validate()?;
    let total = spec.total_ranks();
    let node_of: Vec<NodeId> = match &spec.placement {
        Placement::SmpStyle => {
            let mut v = Vec::with_capacity(total);
            for (node, &k) in spec.ranks_per_node.iter().enumerate() {
                v.extend(std::iter::repeat_n(node, k));
            }
            v
        }
        Placement::ExplicitMap(map) => map.clone(),
    };

    let mut local_rank_of = vec![0usize; total];
    let mut seen = vec![0usize; spec.node_count];
    let mut leader_of = vec![usize::MAX; spec.node_count];
    for r in 0..total {
        let n = node_of[r];
        local_rank_of[r] = seen[n];
        seen[n] += 1;
        if leader_of[n] == usize::MAX {
            leader_of[n] = r;
        }
    }

    let mut node_sorted_ranks: Vec<Rank> = (0..total).collect();
    node_sorted_ranks.sort_by_key(|&r| (node_of[r], local_rank_of[r]));

    Ok(RankMap {
        node_of,
        local_rank_of,
        leader_of,
        node_sorted_ranks,
    })
}

/// Identifies a communicator for collective-call matching. Allocated
/// monotonically by [`ContextIdAlloc`]; never reused within a topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContextId(pub u32);

impl std::fmt::Display for ContextId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ContextIdAlloc {
    next: u32,
}

impl ContextIdAlloc {
    pub fn new() -> Self {
        ContextIdAlloc { next: 0 }
    }

    pub fn allocate(&mut self) -> ContextId {
        let id = ContextId(self.next);
        self.next += 1;
        id
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CommKind {
    /// The full world, or a flat subgroup derived from it (e.g. a process
    /// grid row) with no node-level structure attached.
    World,
    /// All members live on the named node.
    SharedMem(NodeId),
    /// One leader per participating node.
    Bridge,
}

/// An ordered group of global ranks. Member `i` has communicator rank `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Communicator {
    members: Vec<Rank>,
    context_id: ContextId,
    kind: CommKind,
}

impl Communicator {
    pub fn new(members: Vec<Rank>, context_id: ContextId, kind: CommKind) -> Self {
        Communicator {
            members,
            context_id,
            kind,
        }
    }

    pub fn members(&self) -> &[Rank] {
        &self.members
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn context_id(&self) -> ContextId {
        self.context_id
    }

    pub fn kind(&self) -> &CommKind {
        &self.kind
    }

    pub fn contains(&self, rank: Rank) -> bool {
        self.rank_of(rank).is_some()
    }

    /// Communicator rank of a global rank, or None for non-members.
    pub fn rank_of(&self, global: Rank) -> Option<usize> {
        self.members.iter().position(|&m| m == global)
    }

    /// Global rank of communicator member `i`.
    pub fn member(&self, i: usize) -> Rank {
        self.members[i]
    }
}

/// Builds the world communicator covering every rank of the cluster.
pub fn world_comm(spec: &ClusterSpec, ids: &mut ContextIdAlloc) -> Communicator {
    Communicator::new(
        (0..spec.total_ranks()).collect(),
        ids.allocate(),
        CommKind::World,
    )
}

/// Splits the world into one shared-memory communicator per node, members in
/// ascending global-rank order. Analogous to splitting by shared-memory
/// locality.
pub fn split_shared(
    world: &Communicator,
    map: &RankMap,
    ids: &mut ContextIdAlloc,
) -> Result<Vec<Communicator>> {
    if world.kind() != &CommKind::World {
        return usage_err("split_shared expects the world communicator");
    }
    let node_count = map.leader_of.len();
    let mut groups: Vec<Vec<Rank>> = vec![Vec::new(); node_count];
    for &r in world.members() {
        groups[map.node_of[r]].push(r);
    }
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(node, members)| {
            Communicator::new(members, ids.allocate(), CommKind::SharedMem(node))
        })
        .collect())
}

/// Builds the bridge communicator: the leader of every node, in node order.
/// Non-leaders are simply not members (`rank_of` returns None for them).
pub fn split_bridge(
    world: &Communicator,
    map: &RankMap,
    ids: &mut ContextIdAlloc,
) -> Result<Communicator> {
    if world.kind() != &CommKind::World {
        return usage_err("split_bridge expects the world communicator");
    }
    Ok(Communicator::new(
        map.leader_of.clone(),
        ids.allocate(),
        CommKind::Bridge,
    ))
}

/// The node-aware split of an arbitrary parent communicator: members grouped
/// by node into shared-memory communicators, plus a bridge of the per-node
/// leaders (lowest member rank on each node). For the world communicator this
/// coincides with [`split_shared`] + [`split_bridge`]; collectives over
/// subgroups (e.g. process-grid rows) use the same structure scoped to their
/// own members.
#[derive(Debug, Clone)]
pub struct HybridLayout {
    parent: Communicator,
    /// One communicator per node that hosts at least one parent member,
    /// ordered by node id.
    shared: Vec<Communicator>,
    bridge: Communicator,
    /// Parent members sorted by (node, local rank); block layouts follow this
    /// order so each node's blocks are contiguous.
    sorted_members: Vec<Rank>,
    /// For each participating node (in `shared` order): number of members.
    group_counts: Vec<usize>,
    /// Exclusive prefix sums of `group_counts`.
    group_displs: Vec<usize>,
}

impl HybridLayout {
    pub fn parent(&self) -> &Communicator {
        &self.parent
    }

    pub fn shared_groups(&self) -> &[Communicator] {
        &self.shared
    }

    pub fn bridge(&self) -> &Communicator {
        &self.bridge
    }

    pub fn sorted_members(&self) -> &[Rank] {
        &self.sorted_members
    }

    pub fn group_counts(&self) -> &[usize] {
        &self.group_counts
    }

    pub fn group_displs(&self) -> &[usize] {
        &self.group_displs
    }

    pub fn node_count(&self) -> usize {
        self.shared.len()
    }

    /// Index of `rank`'s node group among the participating nodes.
    pub fn group_index_of(&self, rank: Rank) -> Option<usize> {
        self.shared.iter().position(|c| c.contains(rank))
    }

    pub fn shared_group_of(&self, rank: Rank) -> Option<&Communicator> {
        self.shared.iter().find(|c| c.contains(rank))
    }

    pub fn leader_of(&self, rank: Rank) -> Option<Rank> {
        self.shared_group_of(rank).map(|c| c.member(0))
    }

    pub fn is_leader(&self, rank: Rank) -> bool {
        self.leader_of(rank) == Some(rank)
    }

    /// Position of `rank`'s block in the node-sorted layout.
    pub fn position_of(&self, rank: Rank) -> Option<usize> {
        self.sorted_members.iter().position(|&m| m == rank)
    }
}

/// Groups `parent`'s members by node and derives the leader bridge.
pub fn split_hybrid(
    parent: &Communicator,
    map: &RankMap,
    ids: &mut ContextIdAlloc,
) -> Result<HybridLayout> {
    let node_count = map.leader_of.len();
    let mut groups: Vec<Vec<Rank>> = vec![Vec::new(); node_count];
    for &r in parent.members() {
        if r >= map.total_ranks() {
            return usage_err(format!("communicator member {r} outside the cluster"));
        }
        groups[map.node_of[r]].push(r);
    }
    let mut shared = Vec::new();
    let mut leaders = Vec::new();
    let mut sorted_members = Vec::new();
    let mut group_counts = Vec::new();
    for (node, mut members) in groups.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        members.sort_by_key(|&r| map.local_rank_of[r]);
        leaders.push(members[0]);
        sorted_members.extend_from_slice(&members);
        group_counts.push(members.len());
        shared.push(Communicator::new(
            members,
            ids.allocate(),
            CommKind::SharedMem(node),
        ));
    }
    let bridge = Communicator::new(leaders, ids.allocate(), CommKind::Bridge);
    let mut group_displs = Vec::with_capacity(group_counts.len());
    let mut acc = 0usize;
    for &c in &group_counts {
        group_displs.push(acc);
        acc += c;
    }
    Ok(HybridLayout {
        parent: parent.clone(),
        shared,
        bridge,
        sorted_members,
        group_counts,
        group_displs,
    })
}

/// A validated cluster with its world/shared/bridge communicators and a
/// context-id allocator for further splits (process grids, sub-layouts).
#[derive(Debug, Clone)]
pub struct Topology {
    spec: ClusterSpec,
    map: RankMap,
    world: Communicator,
    shared: Vec<Communicator>,
    bridge: Communicator,
    ids: ContextIdAlloc,
}

impl Topology {
    pub fn new(spec: ClusterSpec) -> Result<Self> {
        let map = build_rank_map(&spec)?;
        let mut ids = ContextIdAlloc::new();
        let world = world_comm(&spec, &mut ids);
        let shared = split_shared(&world, &map, &mut ids)?;
        let bridge = split_bridge(&world, &map, &mut ids)?;
        Ok(Topology {
            spec,
            map,
            world,
            shared,
            bridge,
            ids,
        })
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn map(&self) -> &RankMap {
        &self.map
    }

    pub fn world(&self) -> &Communicator {
        &self.world
    }

    pub fn shared_comms(&self) -> &[Communicator] {
        &self.shared
    }

    pub fn shared_comm_of(&self, rank: Rank) -> &Communicator {
        &self.shared[self.map.node_of[rank]]
    }

    pub fn bridge(&self) -> &Communicator {
        &self.bridge
    }

    pub fn total_ranks(&self) -> usize {
        self.spec.total_ranks()
    }

    pub fn node_of(&self, rank: Rank) -> NodeId {
        self.map.node_of[rank]
    }

    /// Fresh communicator over the given global ranks. Used for derived flat
    /// groups such as process-grid rows and columns.
    pub fn group_comm(&mut self, members: Vec<Rank>) -> Result<Communicator> {
        for &r in &members {
            if r >= self.total_ranks() {
                return usage_err(format!("group member {r} outside the cluster"));
            }
        }
        Ok(Communicator::new(
            members,
            self.ids.allocate(),
            CommKind::World,
        ))
    }

    /// Node-aware split of an arbitrary communicator (see [`split_hybrid`]).
    pub fn hybrid_layout(&mut self, parent: &Communicator) -> Result<HybridLayout> {
        split_hybrid(parent, &self.map, &mut self.ids)
    }

    /// The node-aware split of the whole world, assembled from the
    /// communicators the topology already owns.
    pub fn world_layout(&self) -> HybridLayout {
        let mut sorted_members = Vec::with_capacity(self.total_ranks());
        let mut group_counts = Vec::with_capacity(self.shared.len());
        let mut group_displs = Vec::with_capacity(self.shared.len());
        let mut acc = 0usize;
        for c in &self.shared {
            sorted_members.extend_from_slice(c.members());
            group_counts.push(c.size());
            group_displs.push(acc);
            acc += c.size();
        }
        HybridLayout {
            parent: self.world.clone(),
            shared: self.shared.clone(),
            bridge: self.bridge.clone(),
            sorted_members,
            group_counts,
            group_displs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec_2n_21() -> ClusterSpec {
        ClusterSpec::irregular(vec![2, 1])
    }

    #[test]
    fn smp_map_two_nodes() {
        let map = build_rank_map(&spec_2n_21()).unwrap();
        assert_eq!(map.node_of, vec![0, 0, 1]);
        assert_eq!(map.local_rank_of, vec![0, 1, 0]);
        assert_eq!(map.leader_of, vec![0, 2]);
        assert_eq!(map.node_sorted_ranks, vec![0, 1, 2]);
    }

    #[test]
    fn explicit_map_interleaved() {
        let spec = ClusterSpec::irregular(vec![2, 2])
            .with_placement(Placement::ExplicitMap(vec![0, 1, 0, 1]));
        let map = build_rank_map(&spec).unwrap();
        assert_eq!(map.node_of, vec![0, 1, 0, 1]);
        assert_eq!(map.local_rank_of, vec![0, 0, 1, 1]);
        assert_eq!(map.leader_of, vec![0, 1]);
        assert_eq!(map.node_sorted_ranks, vec![0, 2, 1, 3]);
        assert_eq!(map.node_sorted_position(2), 1);
        assert_eq!(map.node_sorted_position(1), 2);
    }

    #[test]
    fn smp_node_sorted_is_identity() {
        let spec = ClusterSpec::uniform(3, 4);
        let map = build_rank_map(&spec).unwrap();
        assert_eq!(map.node_sorted_ranks, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn explicit_map_validation() {
        let spec =
            ClusterSpec::irregular(vec![2, 1]).with_placement(Placement::ExplicitMap(vec![0, 0]));
        assert!(matches!(
            build_rank_map(&spec),
            Err(crate::SimError::Config(_))
        ));
        let spec = ClusterSpec::irregular(vec![2, 1])
            .with_placement(Placement::ExplicitMap(vec![0, 0, 5]));
        assert!(matches!(
            build_rank_map(&spec),
            Err(crate::SimError::Config(_))
        ));
        let spec = ClusterSpec::irregular(vec![2, 1])
            .with_placement(Placement::ExplicitMap(vec![0, 1, 1]));
        assert!(matches!(
            build_rank_map(&spec),
            Err(crate::SimError::Config(_))
        ));
    }

    #[test]
    fn zero_rank_node_rejected() {
        let spec = ClusterSpec::irregular(vec![2, 0, 1]);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn split_shared_partitions_world() {
        let spec = ClusterSpec::irregular(vec![2, 1, 2]);
        let topo = Topology::new(spec).unwrap();
        let members: Vec<Vec<usize>> = topo
            .shared_comms()
            .iter()
            .map(|c| c.members().to_vec())
            .collect();
        assert_eq!(members, vec![vec![0, 1], vec![2], vec![3, 4]]);
        for (node, c) in topo.shared_comms().iter().enumerate() {
            assert_eq!(c.kind(), &CommKind::SharedMem(node));
        }
        // every world rank appears in exactly one shared communicator
        let mut seen = vec![0usize; topo.total_ranks()];
        for c in topo.shared_comms() {
            for &r in c.members() {
                seen[r] += 1;
            }
        }
        assert!(seen.iter().all(|&s| s == 1));
    }

    #[test]
    fn bridge_holds_one_leader_per_node() {
        let topo = Topology::new(ClusterSpec::uniform(3, 2)).unwrap();
        assert_eq!(topo.bridge().members(), &[0, 2, 4]);
        assert_eq!(topo.bridge().kind(), &CommKind::Bridge);

        let single = Topology::new(ClusterSpec::uniform(1, 4)).unwrap();
        assert_eq!(single.bridge().members(), &[0]);

        let spec = ClusterSpec::irregular(vec![2, 2])
            .with_placement(Placement::ExplicitMap(vec![0, 1, 1, 0]));
        let topo = Topology::new(spec).unwrap();
        assert_eq!(topo.bridge().members(), &[0, 1]);
    }

    #[test]
    fn context_ids_are_unique() {
        let mut topo = Topology::new(ClusterSpec::uniform(2, 2)).unwrap();
        let mut ids = vec![topo.world().context_id(), topo.bridge().context_id()];
        ids.extend(topo.shared_comms().iter().map(|c| c.context_id()));
        let row = topo.group_comm(vec![0, 1]).unwrap();
        ids.push(row.context_id());
        let layout = topo.hybrid_layout(&row).unwrap();
        ids.push(layout.bridge().context_id());
        ids.extend(layout.shared_groups().iter().map(|c| c.context_id()));
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n, "context ids must never collide");
    }

    #[test]
    fn single_rank_world() {
        let topo = Topology::new(ClusterSpec::uniform(1, 1)).unwrap();
        assert_eq!(topo.world().members(), &[0]);
        assert_eq!(topo.shared_comms().len(), 1);
        assert_eq!(topo.bridge().members(), &[0]);
    }

    #[test]
    fn world_layout_matches_topology() {
        let spec = ClusterSpec::irregular(vec![2, 1, 2]);
        let topo = Topology::new(spec).unwrap();
        let layout = topo.world_layout();
        assert_eq!(
            layout.sorted_members(),
            topo.map().node_sorted_ranks.as_slice()
        );
        assert_eq!(layout.group_counts(), &[2, 1, 2]);
        assert_eq!(layout.group_displs(), &[0, 2, 3]);
        assert_eq!(layout.bridge().members(), &[0, 2, 3]);
        assert!(layout.is_leader(0) && layout.is_leader(2) && layout.is_leader(3));
        assert!(!layout.is_leader(1));
        assert_eq!(layout.leader_of(4), Some(3));
    }

    #[test]
    fn hybrid_layout_of_subgroup() {
        // ranks 0,1 on node 0; 2,3 on node 1; subgroup {1,2}
        let mut topo = Topology::new(ClusterSpec::uniform(2, 2)).unwrap();
        let sub = topo.group_comm(vec![1, 2]).unwrap();
        let layout = topo.hybrid_layout(&sub).unwrap();
        assert_eq!(layout.node_count(), 2);
        assert_eq!(layout.bridge().members(), &[1, 2]);
        assert_eq!(layout.shared_groups()[0].members(), &[1]);
        assert_eq!(layout.shared_groups()[1].members(), &[2]);
        assert_eq!(layout.sorted_members(), &[1, 2]);
    }

    #[test]
    fn comm_rank_lookup() {
        let topo = Topology::new(ClusterSpec::uniform(2, 2)).unwrap();
        let bridge = topo.bridge();
        assert_eq!(bridge.rank_of(0), Some(0));
        assert_eq!(bridge.rank_of(2), Some(1));
        assert_eq!(
            bridge.rank_of(1),
            None,
            "non-leaders are not bridge members"
        );
    }
}
