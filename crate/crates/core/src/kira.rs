//! Zero-touch control-plane connectivity.
//!
//! Nodes derive their 64-bit IDs from their names. Routing tables are built
//! by synchronous distance-vector rounds over the physical links; lookups
//! for unknown IDs fall back to greedy XOR forwarding through each node's
//! closest contacts. A small DHT on top places records at the reachable
//! node XOR-closest to the key hash, plus replicas, and serves discovery of
//! the spectrum manager.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::hash::Hasher;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ValidationError;

/// Contacts kept per routing table.
pub const K_CONTACTS: usize = 8;
/// Copies of a DHT record besides the home node.
pub const REPLICAS: usize = 2;
/// DHT key under which the spectrum manager publishes itself.
pub const SM_SERVICE_KEY: &str = "spectrum-manager";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

impl NodeId {
    pub fn from_name(name: &str) -> Self {
        NodeId(fnv1a64(name))
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// 64-bit FNV-1a over the UTF-8 bytes, no terminator.
pub fn fnv1a64(s: &str) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(s.as_bytes());
    h.finish()
}

pub fn xor_distance(a: NodeId, b: NodeId) -> u64 {
    a.0 ^ b.0
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no route from {from} to {to}")]
pub struct Unreachable {
    pub from: String,
    pub to: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("key {0:?} not found")]
pub struct NotFound(pub String);

/// Physical underlay: static links plus one attachment link per mobile node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTopology", into = "RawTopology")]
pub struct Topology {
    nodes: BTreeSet<String>,
    links: BTreeSet<(String, String)>,
    attachments: BTreeMap<String, String>,
    #[serde(skip)]
    adjacency: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTopology {
    nodes: Vec<String>,
    links: Vec<(String, String)>,
    #[serde(default)]
    attachments: BTreeMap<String, String>,
}

impl TryFrom<RawTopology> for Topology {
    type Error = ValidationError;

    fn try_from(raw: RawTopology) -> Result<Self, Self::Error> {
        Topology::new(raw.nodes, raw.links, raw.attachments)
    }
}

impl From<Topology> for RawTopology {
    fn from(t: Topology) -> Self {
        RawTopology {
            nodes: t.nodes.into_iter().collect(),
            links: t.links.into_iter().collect(),
            attachments: t.attachments,
        }
    }
}

fn norm_link(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl Topology {
    pub fn new(
        nodes: impl IntoIterator<Item = String>,
        links: impl IntoIterator<Item = (String, String)>,
        attachments: BTreeMap<String, String>,
    ) -> Result<Self, ValidationError> {
        let mut node_set = BTreeSet::new();
        let mut ids: BTreeMap<NodeId, String> = BTreeMap::new();
        for n in nodes {
            if n.is_empty() {
                return Err(ValidationError::new("empty node name"));
            }
            let id = NodeId::from_name(&n);
            if let Some(other) = ids.get(&id) {
                if other != &n {
                    return Err(ValidationError::new(format!(
                        "node id collision between {other:?} and {n:?}"
                    )));
                }
            }
            ids.insert(id, n.clone());
            if !node_set.insert(n.clone()) {
                return Err(ValidationError::new(format!("duplicate node {n:?}")));
            }
        }
        let mut link_set = BTreeSet::new();
        for (a, b) in links {
            for end in [&a, &b] {
                if !node_set.contains(end) {
                    return Err(ValidationError::new(format!("link references unknown node {end:?}")));
                }
                if attachments.contains_key(end) {
                    return Err(ValidationError::new(format!(
                        "mobile node {end:?} may only be linked through its attachment"
                    )));
                }
            }
            if a == b {
                return Err(ValidationError::new(format!("self link on {a:?}")));
            }
            link_set.insert(norm_link(&a, &b));
        }
        for (mobile, anchor) in &attachments {
            if !node_set.contains(mobile) || !node_set.contains(anchor) {
                return Err(ValidationError::new(format!(
                    "attachment {mobile:?} -> {anchor:?} references unknown node"
                )));
            }
            if mobile == anchor {
                return Err(ValidationError::new(format!("{mobile:?} attached to itself")));
            }
        }
        let mut t = Topology { nodes: node_set, links: link_set, attachments, adjacency: BTreeMap::new() };
        t.rebuild_adjacency();
        Ok(t)
    }

    fn rebuild_adjacency(&mut self) {
        let mut adj: BTreeMap<String, BTreeSet<String>> =
            self.nodes.iter().map(|n| (n.clone(), BTreeSet::new())).collect();
        let attach = self.attachments.iter().map(|(m, a)| (m.clone(), a.clone()));
        for (a, b) in self.links.iter().cloned().chain(attach) {
            adj.get_mut(&a).expect("validated").insert(b.clone());
            adj.get_mut(&b).expect("validated").insert(a);
        }
        self.adjacency = adj;
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.nodes.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, node: &str) -> bool {
        self.nodes.contains(node)
    }

    pub fn links(&self) -> impl Iterator<Item = (&str, &str)> {
        self.links.iter().map(|(a, b)| (a.as_str(), b.as_str()))
    }

    pub fn attachments(&self) -> &BTreeMap<String, String> {
        &self.attachments
    }

    pub fn anchor_of(&self, mobile: &str) -> Option<&str> {
        self.attachments.get(mobile).map(String::as_str)
    }

    /// Physical neighbours in name order.
    pub fn neighbors(&self, node: &str) -> impl Iterator<Item = &str> {
        self.adjacency.get(node).into_iter().flatten().map(String::as_str)
    }

    pub fn are_neighbors(&self, a: &str, b: &str) -> bool {
        self.adjacency.get(a).is_some_and(|s| s.contains(b))
    }

    /// Moves a mobile node's attachment. Relocating to the current anchor
    /// returns an identical topology.
    pub fn relocate(&self, mobile: &str, new_anchor: &str) -> Result<Topology, ValidationError> {
        if !self.nodes.contains(mobile) || !self.nodes.contains(new_anchor) {
            return Err(ValidationError::new(format!(
                "relocate {mobile:?} -> {new_anchor:?}: unknown node"
            )));
        }
        if mobile == new_anchor {
            return Err(ValidationError::new(format!("cannot attach {mobile:?} to itself")));
        }
        if self.links.iter().any(|(a, b)| a == mobile || b == mobile) {
            return Err(ValidationError::new(format!("{mobile:?} is not a mobile node")));
        }
        let mut next = self.clone();
        next.attachments.insert(mobile.to_string(), new_anchor.to_string());
        next.rebuild_adjacency();
        Ok(next)
    }

    /// Hop distances from `src` to every node in its component.
    pub fn bfs(&self, src: &str) -> BTreeMap<String, u32> {
        let mut dist = BTreeMap::new();
        if !self.contains(src) {
            return dist;
        }
        dist.insert(src.to_string(), 0);
        let mut queue = VecDeque::from([src.to_string()]);
        while let Some(u) = queue.pop_front() {
            let d = dist[&u];
            for v in self.neighbors(&u) {
                if !dist.contains_key(v) {
                    dist.insert(v.to_string(), d + 1);
                    queue.push_back(v.to_string());
                }
            }
        }
        dist
    }

    /// Largest finite shortest-path length (per component).
    pub fn diameter(&self) -> u32 {
        self.nodes
            .iter()
            .map(|n| self.bfs(n).values().copied().max().unwrap_or(0))
            .max()
            .unwrap_or(0)
    }

    /// Rounds after which converged tables stop changing.
    pub fn convergence_rounds(&self) -> u32 {
        self.diameter() + 1
    }

    /// A random connected graph: a random spanning tree plus extra edges
    /// until the average degree reaches `avg_degree`.
    pub fn random_connected(n: usize, avg_degree: f64, rng: &mut impl Rng) -> Topology {
        let names: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
        let mut links = BTreeSet::new();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for i in 1..n {
            let parent = order[rng.gen_range(0..i)];
            links.insert(norm_link(&names[order[i]], &names[parent]));
        }
        let target = ((avg_degree * n as f64) / 2.0).round() as usize;
        let max_links = n * n.saturating_sub(1) / 2;
        while links.len() < target.min(max_links) {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a != b {
                links.insert(norm_link(&names[a], &names[b]));
            }
        }
        Topology::new(names, links, BTreeMap::new()).expect("generated topology is valid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteEntry {
    pub dest: String,
    pub next_hop: String,
    pub hop_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub owner: NodeId,
    pub owner_name: String,
    pub entries: BTreeMap<NodeId, RouteEntry>,
    /// The reachable IDs XOR-closest to the owner, nearest first.
    pub contacts: Vec<NodeId>,
}

impl RoutingTable {
    fn empty(owner_name: &str) -> Self {
        Self {
            owner: NodeId::from_name(owner_name),
            owner_name: owner_name.to_string(),
            entries: BTreeMap::new(),
            contacts: Vec::new(),
        }
    }

    fn refresh_contacts(&mut self) {
        let owner = self.owner;
        let mut ids: Vec<NodeId> = self.entries.keys().copied().collect();
        ids.sort_by_key(|id| xor_distance(*id, owner));
        ids.truncate(K_CONTACTS);
        self.contacts = ids;
    }
}

pub type RoutingTables = BTreeMap<String, RoutingTable>;

/// Runs `rounds` synchronous distance-vector exchanges from empty tables.
///
/// Each round every node advertises its whole table to its neighbours with
/// split horizon. A route with fewer hops wins; equal hops prefer the
/// lexicographically smaller next hop.
pub fn converge(topology: &Topology, rounds: u32) -> RoutingTables {
    let mut tables: RoutingTables =
        topology.nodes().map(|n| (n.to_string(), RoutingTable::empty(n))).collect();
    for _ in 0..rounds {
        let mut next: RoutingTables = BTreeMap::new();
        for node in topology.nodes() {
            let mut table = RoutingTable::empty(node);
            let me = table.owner;
            let mut offer = |dest_id: NodeId, dest: &str, via: &str, hops: u32| {
                if dest_id == me {
                    return;
                }
                let better = match table.entries.get(&dest_id) {
                    None => true,
                    Some(e) => (hops, via) < (e.hop_count, e.next_hop.as_str()),
                };
                if better {
                    table.entries.insert(
                        dest_id,
                        RouteEntry { dest: dest.to_string(), next_hop: via.to_string(), hop_count: hops },
                    );
                }
            };
            for nb in topology.neighbors(node) {
                offer(NodeId::from_name(nb), nb, nb, 1);
                for (dest_id, e) in &tables[nb].entries {
                    if e.next_hop == node {
                        continue;
                    }
                    offer(*dest_id, &e.dest, nb, e.hop_count + 1);
                }
            }
            table.refresh_contacts();
            next.insert(node.to_string(), table);
        }
        tables = next;
    }
    tables
}

/// Forwards from `src` towards `dst` over the tables, checking each hop
/// against the physical topology. Returns the loop-free node path.
pub fn route(
    tables: &RoutingTables,
    topology: &Topology,
    src: &str,
    dst: NodeId,
) -> Result<Vec<String>, Unreachable> {
    let unreachable = || Unreachable { from: src.to_string(), to: dst };
    if !topology.contains(src) {
        return Err(unreachable());
    }
    let mut path = vec![src.to_string()];
    let mut cur = src.to_string();
    let mut target: Option<NodeId> = None;
    loop {
        let cur_id = NodeId::from_name(&cur);
        if cur_id == dst {
            return Ok(path);
        }
        let table = tables.get(&cur).ok_or_else(unreachable)?;
        let via = match table.entries.get(&dst) {
            Some(e) => e.next_hop.clone(),
            None => {
                if target.is_none_or(|t| t == cur_id) {
                    let here = xor_distance(cur_id, dst);
                    let best = table
                        .contacts
                        .iter()
                        .copied()
                        .filter(|c| xor_distance(*c, dst) < here)
                        .min_by_key(|c| xor_distance(*c, dst));
                    target = Some(best.ok_or_else(unreachable)?);
                }
                let t = target.expect("set above");
                table.entries.get(&t).ok_or_else(unreachable)?.next_hop.clone()
            }
        };
        if !topology.are_neighbors(&cur, &via) || path.contains(&via) {
            return Err(unreachable());
        }
        path.push(via.clone());
        cur = via;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DhtRecord {
    pub key: String,
    pub value: String,
    pub stored_at: NodeId,
    pub replicas: Vec<NodeId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DhtStore {
    pub records: BTreeMap<u64, DhtRecord>,
}

/// The control plane of one simulated network instance.
#[derive(Debug, Clone)]
pub struct KiraNetwork {
    topology: Topology,
    tables: RoutingTables,
    names: BTreeMap<NodeId, String>,
    dht: DhtStore,
    stale: bool,
}

impl KiraNetwork {
    /// Builds the network with converged tables.
    pub fn new(topology: Topology) -> Self {
        let names = topology.nodes().map(|n| (NodeId::from_name(n), n.to_string())).collect();
        let tables = converge(&topology, topology.convergence_rounds());
        Self { topology, tables, names, dht: DhtStore::default(), stale: false }
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn tables(&self) -> &RoutingTables {
        &self.tables
    }

    pub fn dht(&self) -> &DhtStore {
        &self.dht
    }

    pub fn is_stale(&self) -> bool {
        self.stale
    }

    pub fn name_of(&self, id: NodeId) -> Option<&str> {
        self.names.get(&id).map(String::as_str)
    }

    /// Moves a mobile node. Tables keep their old contents until
    /// [`KiraNetwork::reconverge`] runs.
    pub fn relocate(&mut self, mobile: &str, new_anchor: &str) -> Result<(), ValidationError> {
        if self.topology.anchor_of(mobile) == Some(new_anchor) {
            return Ok(());
        }
        self.topology = self.topology.relocate(mobile, new_anchor)?;
        self.stale = true;
        Ok(())
    }

    /// Recomputes tables for the current topology and re-homes DHT records.
    pub fn reconverge(&mut self) {
        self.tables = converge(&self.topology, self.topology.convergence_rounds());
        self.stale = false;
        self.rehome();
    }

    pub fn route(&self, src: &str, dst: &str) -> Result<Vec<String>, Unreachable> {
        route(&self.tables, &self.topology, src, NodeId::from_name(dst))
    }

    /// `from` plus everything in its table, ordered by XOR distance to `key`.
    fn closest_reachable(&self, from: &str, key: u64) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = vec![NodeId::from_name(from)];
        if let Some(t) = self.tables.get(from) {
            ids.extend(t.entries.keys().copied());
        }
        ids.sort_by_key(|id| (xor_distance(*id, NodeId(key)), *id));
        ids
    }

    pub fn dht_put(&mut self, from: &str, key: &str, value: &str) {
        let hash = fnv1a64(key);
        let holders = self.closest_reachable(from, hash);
        let record = DhtRecord {
            key: key.to_string(),
            value: value.to_string(),
            stored_at: holders[0],
            replicas: holders.iter().skip(1).take(REPLICAS).copied().collect(),
        };
        self.dht.records.insert(hash, record);
    }

    pub fn dht_get(&self, from: &str, key: &str) -> Result<String, NotFound> {
        let hash = fnv1a64(key);
        let record = self.dht.records.get(&hash).ok_or_else(|| NotFound(key.to_string()))?;
        let holds = |id: &NodeId| record.stored_at == *id || record.replicas.contains(id);
        self.closest_reachable(from, hash)
            .iter()
            .find(|id| holds(id))
            .map(|_| record.value.clone())
            .ok_or_else(|| NotFound(key.to_string()))
    }

    /// Moves each record to the closest nodes reachable from its current home.
    fn rehome(&mut self) {
        let hashes: Vec<u64> = self.dht.records.keys().copied().collect();
        for hash in hashes {
            let home = self.dht.records[&hash].stored_at;
            let Some(home_name) = self.names.get(&home).cloned() else {
                continue;
            };
            let holders = self.closest_reachable(&home_name, hash);
            let record = self.dht.records.get_mut(&hash).expect("present");
            record.stored_at = holders[0];
            record.replicas = holders.iter().skip(1).take(REPLICAS).copied().collect();
        }
    }

    /// Per-node hop counts and next hops, for status views.
    pub fn routing_dump(&self) -> serde_json::Value {
        let nodes: BTreeMap<&str, serde_json::Value> = self
            .tables
            .iter()
            .map(|(name, t)| {
                let routes: Vec<_> = t.entries.values().collect();
                (
                    name.as_str(),
                    serde_json::json!({
                        "id": t.owner,
                        "routes": routes,
                        "contacts": t.contacts,
                    }),
                )
            })
            .collect();
        serde_json::json!({ "stale": self.stale, "tables": nodes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn topo(nodes: &[&str], links: &[(&str, &str)]) -> Topology {
        Topology::new(
            nodes.iter().map(|s| s.to_string()),
            links.iter().map(|(a, b)| (a.to_string(), b.to_string())),
            BTreeMap::new(),
        )
        .unwrap()
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64("a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64("foobar"), 0x8594_4171_f739_67e8);
    }

    #[test]
    fn xor_distance_examples() {
        assert_eq!(xor_distance(NodeId(0x5), NodeId(0x3)), 0x6);
        assert_eq!(xor_distance(NodeId(77), NodeId(77)), 0);
        assert_eq!(xor_distance(NodeId(0), NodeId(u64::MAX)), u64::MAX);
    }

    #[test]
    fn line_routes_through_middle() {
        let t = topo(&["A", "B", "C"], &[("A", "B"), ("B", "C")]);
        let tables = converge(&t, 3);
        let e = &tables["A"].entries[&NodeId::from_name("C")];
        assert_eq!((e.next_hop.as_str(), e.hop_count), ("B", 2));
        assert_eq!(route(&tables, &t, "A", NodeId::from_name("C")).unwrap(), ["A", "B", "C"]);
        assert_eq!(route(&tables, &t, "A", NodeId::from_name("A")).unwrap(), ["A"]);
    }

    #[test]
    fn single_node_has_empty_table() {
        let t = topo(&["A"], &[]);
        assert!(converge(&t, 5)["A"].entries.is_empty());
    }

    #[test]
    fn partitions_are_unreachable() {
        let t = topo(&["A", "B", "C"], &[("A", "B")]);
        let tables = converge(&t, 3);
        assert!(!tables["A"].entries.contains_key(&NodeId::from_name("C")));
        assert!(route(&tables, &t, "A", NodeId::from_name("C")).is_err());
    }

    #[test]
    fn extra_rounds_are_noops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Topology::random_connected(30, 3.0, &mut rng);
        let r = t.convergence_rounds();
        assert_eq!(converge(&t, r), converge(&t, r + 3));
    }

    #[test]
    fn topology_validation() {
        let bad_link = Topology::new(
            vec!["A".to_string()],
            vec![("A".to_string(), "Z".to_string())],
            BTreeMap::new(),
        );
        assert!(bad_link.is_err());
        let dup = Topology::new(vec!["A".to_string(), "A".to_string()], vec![], BTreeMap::new());
        assert!(dup.is_err());
        let t = topo(&["A", "B"], &[("A", "B")]);
        assert!(t.relocate("A", "Q").is_err());
    }

    #[test]
    fn home_node_is_xor_closest() {
        let t = topo(&["x", "y", "z"], &[("x", "y"), ("y", "z")]);
        let mut net = KiraNetwork::new(t);
        net.dht_put("x", "svc", "addr");
        let hash = fnv1a64("svc");
        let expected = ["x", "y", "z"]
            .iter()
            .map(|n| NodeId::from_name(n))
            .min_by_key(|id| xor_distance(*id, NodeId(hash)))
            .unwrap();
        assert_eq!(net.dht().records[&hash].stored_at, expected);
        assert_eq!(net.dht().records[&hash].replicas.len(), 2);
        for n in ["x", "y", "z"] {
            assert_eq!(net.dht_get(n, "svc").unwrap(), "addr");
        }
        assert!(net.dht_get("x", "nope").is_err());
    }

    #[test]
    fn relocation_to_current_anchor_is_noop() {
        let mut attach = BTreeMap::new();
        attach.insert("agv".to_string(), "A".to_string());
        let t = Topology::new(
            ["A", "B", "agv"].iter().map(|s| s.to_string()),
            vec![("A".to_string(), "B".to_string())],
            attach,
        )
        .unwrap();
        let mut net = KiraNetwork::new(t.clone());
        net.relocate("agv", "A").unwrap();
        assert!(!net.is_stale());
        assert_eq!(net.topology(), &t);
        net.relocate("agv", "B").unwrap();
        assert!(net.is_stale());
        // stale tables still point the AGV at A, which is no longer a neighbour
        assert!(net.route("agv", "B").is_err());
        net.reconverge();
        assert_eq!(net.route("agv", "A").unwrap(), ["agv", "B", "A"]);
    }
}
