//! Spatial-temporal communication graph.
//!
//! Agents are nodes; message channels within a dialogue round are spatial
//! edges, channels between consecutive rounds are temporal edges. Both edge
//! sets live in dense 0/1 adjacency matrices (agent counts are small).
//! Execution requires the spatial graph to be a DAG, so this module also
//! provides cycle detection, cycle-breaking DAG sampling, and a
//! deterministic topological sort.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense square 0/1 adjacency matrix. `get(i, j)` is the directed edge
/// from node `i` to node `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjacencyMatrix {
    n: usize,
    data: Vec<u8>,
}

impl AdjacencyMatrix {
    /// All-zero matrix over `n` nodes.
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0; n * n],
        }
    }

    /// All-ones matrix over `n` nodes, diagonal included.
    pub fn ones(n: usize) -> Self {
        Self {
            n,
            data: vec![1; n * n],
        }
    }

    /// Build from an edge list. Duplicate edges collapse to a single entry.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut m = Self::zeros(n);
        for &(src, dst) in edges {
            m.check_node(src)?;
            m.check_node(dst)?;
            m.set(src, dst, true);
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn check_node(&self, v: usize) -> Result<()> {
        if v >= self.n {
            return Err(Error::InvalidNodeId { id: v, n: self.n });
        }
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j] != 0
    }

    pub fn set(&mut self, i: usize, j: usize, present: bool) {
        self.data[i * self.n + j] = u8::from(present);
    }

    /// Number of edges (nonzero entries).
    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&b| b != 0).count()
    }

    /// Edges in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in 0..self.n {
                if self.get(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Nodes `j` with an edge `j -> v`.
    pub fn in_neighbors(&self, v: usize) -> Result<BTreeSet<usize>> {
        self.check_node(v)?;
        Ok((0..self.n).filter(|&j| self.get(j, v)).collect())
    }

    /// Nodes `j` with an edge `v -> j`.
    pub fn out_neighbors(&self, v: usize) -> Result<BTreeSet<usize>> {
        self.check_node(v)?;
        Ok((0..self.n).filter(|&j| self.get(v, j)).collect())
    }

    pub fn in_degree(&self, v: usize) -> usize {
        (0..self.n).filter(|&j| self.get(j, v)).count()
    }

    pub fn out_degree(&self, v: usize) -> usize {
        (0..self.n).filter(|&j| self.get(v, j)).count()
    }

    /// Elementwise AND with another matrix of the same shape.
    pub fn hadamard(&self, other: &AdjacencyMatrix) -> Result<AdjacencyMatrix> {
        if self.n != other.n {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.n, self.n, other.n, other.n
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a & b)
            .collect();
        Ok(AdjacencyMatrix { n: self.n, data })
    }
}

/// One external plugin available to an agent: a function name plus an
/// opaque configuration blob. Plugin calls are recorded, never executed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plugin {
    pub name: String,
    #[serde(default)]
    pub config: String,
}

/// One agent node: backend reference, role name, mutable key-value state,
/// and its plugin list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentNode {
    pub id: usize,
    pub base: String,
    pub role: String,
    #[serde(default)]
    pub state: std::collections::BTreeMap<String, String>,
    #[serde(default)]
    pub plugins: Vec<Plugin>,
}

impl AgentNode {
    pub fn new(id: usize, base: impl Into<String>, role: impl Into<String>) -> Self {
        Self {
            id,
            base: base.into(),
            role: role.into(),
            state: Default::default(),
            plugins: Vec::new(),
        }
    }
}

/// The communication graph: agent nodes plus spatial and temporal
/// adjacency matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommGraph {
    pub nodes: Vec<AgentNode>,
    pub spatial_adj: AdjacencyMatrix,
    pub temporal_adj: AdjacencyMatrix,
}

/// Assemble a communication graph from node records and two edge lists.
///
/// Node ids must be exactly `0..nodes.len()` in order. Duplicate edges
/// collapse; spatial self-loops are rejected, temporal self-loops are
/// allowed (an agent may read its own prior-round output).
pub fn build_comm_graph(
    nodes: Vec<AgentNode>,
    spatial_edges: &[(usize, usize)],
    temporal_edges: &[(usize, usize)],
) -> Result<CommGraph> {
    let n = nodes.len();
    for (pos, node) in nodes.iter().enumerate() {
        if node.id != pos {
            return Err(Error::InvalidNodeId { id: node.id, n });
        }
        if node.plugins.iter().any(|p| p.name.is_empty()) {
            return Err(Error::EmptyPluginName(node.id));
        }
    }
    for &(src, dst) in spatial_edges {
        if src == dst {
            return Err(Error::SpatialSelfLoop(src));
        }
    }
    let spatial_adj = AdjacencyMatrix::from_edges(n, spatial_edges)?;
    let temporal_adj = AdjacencyMatrix::from_edges(n, temporal_edges)?;
    Ok(CommGraph {
        nodes,
        spatial_adj,
        temporal_adj,
    })
}

impl CommGraph {
    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    /// Spatial in-neighbors of `v`: senders whose same-round output `v` reads.
    pub fn spatial_in_neighbors(&self, v: usize) -> Result<BTreeSet<usize>> {
        self.spatial_adj.in_neighbors(v)
    }

    /// Temporal in-neighbors of `v`: senders whose prior-round output `v` reads.
    pub fn temporal_in_neighbors(&self, v: usize) -> Result<BTreeSet<usize>> {
        self.temporal_adj.in_neighbors(v)
    }

    /// Serialize to a structured text document (node records plus the two
    /// edge lists). `load_graph(save_graph(g)) == g`.
    pub fn save(&self) -> String {
        let doc = GraphDoc {
            nodes: self.nodes.clone(),
            spatial_edges: self.spatial_adj.edges(),
            temporal_edges: self.temporal_adj.edges(),
        };
        serde_json::to_string_pretty(&doc).expect("graph serialization cannot fail")
    }

    pub fn load(text: &str) -> Result<CommGraph> {
        let doc: GraphDoc = serde_json::from_str(text)?;
        let spatial: Vec<_> = doc.spatial_edges;
        let temporal: Vec<_> = doc.temporal_edges;
        build_comm_graph(doc.nodes, &spatial, &temporal)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    nodes: Vec<AgentNode>,
    spatial_edges: Vec<(usize, usize)>,
    temporal_edges: Vec<(usize, usize)>,
}

/// DFS cycle search with white/grey/black marking. Start vertices and
/// neighbor scans both go in ascending id order, so the located cycle is
/// deterministic. Returns the cycle as a node sequence `[a, b, .., z]`
/// meaning `a -> b -> .. -> z -> a`, or `None` on acyclic input.
fn dfs_cycle(adj: &AdjacencyMatrix) -> Option<Vec<usize>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Color {
        White,
        Grey,
        Black,
    }
    let n = adj.n();
    let mut color = vec![Color::White; n];

    for start in 0..n {
        if color[start] != Color::White {
            continue;
        }
        // Iterative DFS; stack holds (node, next neighbor index to try).
        let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
        color[start] = Color::Grey;
        while let Some(&(node, next)) = stack.last() {
            if next >= n {
                color[node] = Color::Black;
                stack.pop();
                continue;
            }
            stack.last_mut().expect("stack non-empty").1 += 1;
            let j = next;
            if !adj.get(node, j) {
                continue;
            }
            match color[j] {
                Color::Grey => {
                    // Back edge: the grey path from j to node closes a cycle.
                    let pos = stack.iter().position(|&(v, _)| v == j).expect("grey on stack");
                    return Some(stack[pos..].iter().map(|&(v, _)| v).collect());
                }
                Color::White => {
                    color[j] = Color::Grey;
                    stack.push((j, 0));
                }
                Color::Black => {}
            }
        }
    }
    None
}

/// True iff the directed graph has no cycle.
pub fn is_acyclic(adj: &AdjacencyMatrix) -> bool {
    dfs_cycle(adj).is_none()
}

/// Locate one directed cycle and return its edges chained head-to-tail.
pub fn find_cycle(adj: &AdjacencyMatrix) -> Result<Vec<(usize, usize)>> {
    let nodes = dfs_cycle(adj).ok_or(Error::NoCycle)?;
    let k = nodes.len();
    Ok((0..k).map(|i| (nodes[i], nodes[(i + 1) % k])).collect())
}

/// Break cycles until the graph is a DAG: repeatedly locate a cycle and
/// remove one uniformly chosen edge from it. Deterministic given the RNG.
pub fn dag_sample<R: Rng + ?Sized>(adj: &AdjacencyMatrix, rng: &mut R) -> AdjacencyMatrix {
    dag_sample_recording(adj, rng).0
}

/// As [`dag_sample`], also returning the removed edges in removal order.
pub fn dag_sample_recording<R: Rng + ?Sized>(
    adj: &AdjacencyMatrix,
    rng: &mut R,
) -> (AdjacencyMatrix, Vec<(usize, usize)>) {
    let mut g = adj.clone();
    let mut removed = Vec::new();
    loop {
        let Some(nodes) = dfs_cycle(&g) else {
            return (g, removed);
        };
        let k = nodes.len();
        let pick = rng.random_range(0..k);
        let edge = (nodes[pick], nodes[(pick + 1) % k]);
        g.set(edge.0, edge.1, false);
        removed.push(edge);
    }
}

/// Topological order via Kahn's algorithm. Ties among ready nodes break by
/// ascending node id, so the order is deterministic.
pub fn topological_sort(adj: &AdjacencyMatrix) -> Result<Vec<usize>> {
    let n = adj.n();
    let mut indegree: Vec<usize> = (0..n).map(|v| adj.in_degree(v)).collect();
    let mut ready: BTreeSet<usize> = (0..n).filter(|&v| indegree[v] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(&v) = ready.iter().next() {
        ready.remove(&v);
        order.push(v);
        for (j, degree) in indegree.iter_mut().enumerate() {
            if adj.get(v, j) {
                *degree -= 1;
                if *degree == 0 {
                    ready.insert(j);
                }
            }
        }
    }
    if order.len() != n {
        return Err(Error::CyclicGraph);
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain3() -> AdjacencyMatrix {
        AdjacencyMatrix::from_edges(3, &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn build_counts_spatial_edges() {
        let nodes = (0..3).map(|i| AgentNode::new(i, "scripted", "solver")).collect();
        let g = build_comm_graph(nodes, &[(0, 1), (1, 2)], &[]).unwrap();
        assert_eq!(g.spatial_adj.count_ones(), 2);
        assert_eq!(g.temporal_adj.count_ones(), 0);
    }

    #[test]
    fn build_rejects_spatial_self_loop() {
        let nodes = (0..2).map(|i| AgentNode::new(i, "scripted", "solver")).collect();
        let err = build_comm_graph(nodes, &[(0, 0)], &[]).unwrap_err();
        assert!(matches!(err, Error::SpatialSelfLoop(0)));
    }

    #[test]
    fn build_rejects_bad_node_id() {
        let nodes = (0..2).map(|i| AgentNode::new(i, "scripted", "solver")).collect();
        let err = build_comm_graph(nodes, &[(0, 5)], &[]).unwrap_err();
        assert!(matches!(err, Error::InvalidNodeId { id: 5, .. }));
    }

    #[test]
    fn duplicate_edges_collapse() {
        // 20 edge entries over 5 nodes, 3 of them duplicates: the matrix
        // must agree with a set-union oracle of the distinct pairs.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut edges: Vec<(usize, usize)> = Vec::new();
        let mut distinct: BTreeSet<(usize, usize)> = BTreeSet::new();
        while distinct.len() < 17 {
            let s = rng.random_range(0..5usize);
            let d = rng.random_range(0..5usize);
            if s != d && distinct.insert((s, d)) {
                edges.push((s, d));
            }
        }
        edges.push(edges[0]);
        edges.push(edges[3]);
        edges.push(edges[8]);
        assert_eq!(edges.len(), 20);
        let nodes = (0..5).map(|i| AgentNode::new(i, "scripted", "solver")).collect();
        let g = build_comm_graph(nodes, &edges, &[]).unwrap();
        assert_eq!(g.spatial_adj.count_ones(), distinct.len());
        assert_eq!(g.spatial_adj.count_ones(), 17);
    }

    #[test]
    fn spatial_in_neighbors_of_chain() {
        let nodes = (0..3).map(|i| AgentNode::new(i, "scripted", "solver")).collect();
        let g = build_comm_graph(nodes, &[(0, 1), (1, 2)], &[]).unwrap();
        assert_eq!(g.spatial_in_neighbors(1).unwrap(), BTreeSet::from([0]));
        assert!(g.spatial_in_neighbors(9).is_err());
    }

    #[test]
    fn spatial_in_neighbors_complete_dag() {
        // Column scan oracle on the 3-node complete DAG.
        let adj = AdjacencyMatrix::from_edges(3, &[(0, 1), (0, 2), (1, 2)]).unwrap();
        assert_eq!(adj.in_neighbors(2).unwrap(), BTreeSet::from([0, 1]));
        assert_eq!(adj.in_neighbors(0).unwrap(), BTreeSet::new());
    }

    #[test]
    fn temporal_in_neighbors_cases() {
        let nodes: Vec<AgentNode> =
            (0..3).map(|i| AgentNode::new(i, "scripted", "solver")).collect();
        let full = build_comm_graph(
            nodes.clone(),
            &[],
            &[(0, 0), (1, 0), (2, 0), (0, 1), (1, 1), (2, 1), (0, 2), (1, 2), (2, 2)],
        )
        .unwrap();
        assert_eq!(full.temporal_in_neighbors(0).unwrap(), BTreeSet::from([0, 1, 2]));

        let empty = build_comm_graph(nodes.clone(), &[], &[]).unwrap();
        assert_eq!(empty.temporal_in_neighbors(1).unwrap(), BTreeSet::new());

        let single = build_comm_graph(nodes, &[], &[(2, 1)]).unwrap();
        assert_eq!(single.temporal_in_neighbors(1).unwrap(), BTreeSet::from([2]));
    }

    #[test]
    fn acyclic_basics() {
        assert!(is_acyclic(&chain3()));
        let cyc = AdjacencyMatrix::from_edges(3, &[(0, 1), (1, 2), (2, 0)]).unwrap();
        assert!(!is_acyclic(&cyc));
    }

    /// Independent Kahn peel-off: repeatedly remove zero-in-degree nodes;
    /// acyclic iff everything peels away.
    fn kahn_is_acyclic(adj: &AdjacencyMatrix) -> bool {
        let n = adj.n();
        let mut alive = vec![true; n];
        let mut remaining = n;
        loop {
            let mut peeled = false;
            for v in 0..n {
                if !alive[v] {
                    continue;
                }
                let indeg = (0..n).filter(|&j| alive[j] && adj.get(j, v)).count();
                if indeg == 0 {
                    alive[v] = false;
                    remaining -= 1;
                    peeled = true;
                }
            }
            if remaining == 0 {
                return true;
            }
            if !peeled {
                return false;
            }
        }
    }

    #[test]
    fn acyclic_matches_kahn_oracle_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let n = 20;
            let mut adj = AdjacencyMatrix::zeros(n);
            for i in 0..n {
                for j in 0..n {
                    if i != j && rng.random::<f64>() < 0.08 {
                        adj.set(i, j, true);
                    }
                }
            }
            assert_eq!(is_acyclic(&adj), kahn_is_acyclic(&adj));
        }
    }

    /// Every returned edge exists and endpoints chain head-to-tail.
    fn assert_valid_cycle(adj: &AdjacencyMatrix, cycle: &[(usize, usize)]) {
        assert!(!cycle.is_empty());
        for &(s, d) in cycle {
            assert!(adj.get(s, d), "edge ({s},{d}) not in graph");
        }
        for w in 0..cycle.len() {
            let (_, d) = cycle[w];
            let (s2, _) = cycle[(w + 1) % cycle.len()];
            assert_eq!(d, s2, "cycle edges do not chain");
        }
        // Simple cycle: no repeated vertices.
        let heads: BTreeSet<usize> = cycle.iter().map(|&(s, _)| s).collect();
        assert_eq!(heads.len(), cycle.len());
    }

    #[test]
    fn find_cycle_two_cycle() {
        let adj = AdjacencyMatrix::from_edges(2, &[(0, 1), (1, 0)]).unwrap();
        let cycle = find_cycle(&adj).unwrap();
        assert_eq!(cycle.len(), 2);
        assert_valid_cycle(&adj, &cycle);
    }

    #[test]
    fn find_cycle_on_acyclic_graph_errors() {
        assert!(matches!(find_cycle(&chain3()), Err(Error::NoCycle)));
    }

    #[test]
    fn find_cycle_with_two_disjoint_cycles_returns_one_simple_cycle() {
        // 0->1->0 and 3->4->5->3 are disjoint cycles.
        let adj =
            AdjacencyMatrix::from_edges(6, &[(0, 1), (1, 0), (3, 4), (4, 5), (5, 3), (2, 3)])
                .unwrap();
        let cycle = find_cycle(&adj).unwrap();
        assert_valid_cycle(&adj, &cycle);
    }

    #[test]
    fn dag_sample_identity_on_dag() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let adj = chain3();
        assert_eq!(dag_sample(&adj, &mut rng), adj);
    }

    #[test]
    fn dag_sample_three_cycle_keeps_two_edges() {
        let adj = AdjacencyMatrix::from_edges(3, &[(0, 1), (1, 2), (2, 0)]).unwrap();
        // All three possible outputs drop exactly one cycle edge.
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (out, removed) = dag_sample_recording(&adj, &mut rng);
            assert_eq!(out.count_ones(), 2);
            assert_eq!(removed.len(), 1);
            assert!(is_acyclic(&out));
            for (s, d) in out.edges() {
                assert!(adj.get(s, d));
            }
        }
    }

    #[test]
    fn dag_sample_property_sweep() {
        // Dense random 10-node graphs over many seeds: output acyclic,
        // edge subset of input, removed edges were input edges.
        let mut gen_rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..200 {
            let n = 10;
            let mut adj = AdjacencyMatrix::zeros(n);
            for i in 0..n {
                for j in 0..n {
                    if i != j && gen_rng.random::<f64>() < 0.35 {
                        adj.set(i, j, true);
                    }
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
            let (out, removed) = dag_sample_recording(&adj, &mut rng);
            assert!(is_acyclic(&out));
            for (s, d) in out.edges() {
                assert!(adj.get(s, d));
            }
            for &(s, d) in &removed {
                assert!(adj.get(s, d));
                assert!(!out.get(s, d));
            }
            assert_eq!(out.count_ones() + removed.len(), adj.count_ones());
        }
    }

    #[test]
    fn dag_sample_deterministic_under_seed() {
        let adj = AdjacencyMatrix::from_edges(
            6,
            &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3), (1, 4), (4, 1)],
        )
        .unwrap();
        let a = dag_sample(&adj, &mut ChaCha8Rng::seed_from_u64(5));
        let b = dag_sample(&adj, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn topological_sort_chain() {
        assert_eq!(topological_sort(&chain3()).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn topological_sort_tie_breaks_by_id() {
        let adj = AdjacencyMatrix::from_edges(3, &[(2, 0), (2, 1)]).unwrap();
        assert_eq!(topological_sort(&adj).unwrap(), vec![2, 0, 1]);
    }

    #[test]
    fn topological_sort_rejects_cycle() {
        let adj = AdjacencyMatrix::from_edges(2, &[(0, 1), (1, 0)]).unwrap();
        assert!(matches!(topological_sort(&adj), Err(Error::CyclicGraph)));
    }

    #[test]
    fn topological_order_respects_every_edge() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = 12;
            let mut adj = AdjacencyMatrix::zeros(n);
            for i in 0..n {
                for j in 0..n {
                    if i != j && rng.random::<f64>() < 0.2 {
                        adj.set(i, j, true);
                    }
                }
            }
            let dag = dag_sample(&adj, &mut rng);
            let order = topological_sort(&dag).unwrap();
            let pos: Vec<usize> = {
                let mut p = vec![0; n];
                for (idx, &v) in order.iter().enumerate() {
                    p[v] = idx;
                }
                p
            };
            for (s, d) in dag.edges() {
                assert!(pos[s] < pos[d], "edge ({s},{d}) violates order");
            }
        }
    }

    #[test]
    fn graph_round_trips_through_text() {
        let mut nodes: Vec<AgentNode> =
            (0..4).map(|i| AgentNode::new(i, "scripted", "solver")).collect();
        nodes[2].state.insert("memo".into(), "x".into());
        nodes[3].plugins.push(Plugin {
            name: "search".into(),
            config: "{\"lang\":\"en\"}".into(),
        });
        let g = build_comm_graph(nodes, &[(0, 1), (1, 3), (0, 2)], &[(0, 0), (3, 1)]).unwrap();
        let text = g.save();
        let back = CommGraph::load(&text).unwrap();
        assert_eq!(back, g);
    }
}
