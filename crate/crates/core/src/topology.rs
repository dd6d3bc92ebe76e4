//! Builders for predefined spatial topologies and the fully connected
//! temporal (debate-style) topology.
//!
//! Every spatial builder emits a DAG so the executor can schedule agents
//! by topological order without cycle breaking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AdjacencyMatrix;

/// A predefined spatial topology.
///
/// - `chain`: a pipeline `0 -> 1 -> .. -> n-1`.
/// - `star`: subordinates `1..n-1` all report to hub `0`; the hub executes
///   last and summarizes. Subordinates receive the query directly, so the
///   dispatch phase needs no hub-out edges and the graph stays a DAG.
/// - `tree`: binary-tree indexing, every non-root node reports to its
///   parent `(i - 1) / 2`; outputs flow up to the root.
/// - `complete`: every pair connected, oriented by ascending id (`i < j`),
///   i.e. the DAG orientation of a mesh.
/// - `layered`: stacked layers; every node of layer `l` feeds every node of
///   layer `l + 1`; the last layer is a single summarizer.
/// - `random`: each complete-DAG edge kept independently with the given
///   probability; resampled until the terminal summarizer node has at
///   least one in-edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TopologyKind {
    Chain,
    Star,
    Tree,
    Complete,
    Layered { widths: Vec<usize> },
    Random { probability: f64, seed: u64 },
}

impl TopologyKind {
    pub fn name(&self) -> &'static str {
        match self {
            TopologyKind::Chain => "chain",
            TopologyKind::Star => "star",
            TopologyKind::Tree => "tree",
            TopologyKind::Complete => "complete",
            TopologyKind::Layered { .. } => "layered",
            TopologyKind::Random { .. } => "random",
        }
    }
}

/// Build the spatial adjacency matrix for `kind` over `n` agents.
pub fn build_spatial(kind: &TopologyKind, n: usize) -> Result<AdjacencyMatrix> {
    let need = |needed: usize| -> Result<()> {
        if n < needed {
            return Err(Error::TooFewAgents {
                kind: kind.name().to_string(),
                needed,
                got: n,
            });
        }
        Ok(())
    };
    match kind {
        TopologyKind::Chain => {
            need(2)?;
            let edges: Vec<_> = (0..n - 1).map(|i| (i, i + 1)).collect();
            AdjacencyMatrix::from_edges(n, &edges)
        }
        TopologyKind::Star => {
            need(3)?;
            let edges: Vec<_> = (1..n).map(|i| (i, 0)).collect();
            AdjacencyMatrix::from_edges(n, &edges)
        }
        TopologyKind::Tree => {
            need(3)?;
            let edges: Vec<_> = (1..n).map(|i| (i, (i - 1) / 2)).collect();
            AdjacencyMatrix::from_edges(n, &edges)
        }
        TopologyKind::Complete => {
            need(2)?;
            AdjacencyMatrix::from_edges(n, &complete_dag_edges(n))
        }
        TopologyKind::Layered { widths } => {
            need(2)?;
            if widths.is_empty() || widths.contains(&0) {
                return Err(Error::BadLayerSpec("layer widths must be positive".into()));
            }
            if widths.iter().sum::<usize>() != n {
                return Err(Error::BadLayerSpec(format!(
                    "layer widths sum to {}, expected {n}",
                    widths.iter().sum::<usize>()
                )));
            }
            if *widths.last().expect("non-empty") != 1 {
                return Err(Error::BadLayerSpec(
                    "the final layer must hold exactly one summarizer".into(),
                ));
            }
            let mut edges = Vec::new();
            let mut base = 0;
            for w in widths.windows(2) {
                let (cur, next) = (w[0], w[1]);
                for i in 0..cur {
                    for j in 0..next {
                        edges.push((base + i, base + cur + j));
                    }
                }
                base += cur;
            }
            AdjacencyMatrix::from_edges(n, &edges)
        }
        TopologyKind::Random { probability, seed } => {
            need(2)?;
            let p = *probability;
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::InvalidProbability(p));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let candidates = complete_dag_edges(n);
            loop {
                let kept: Vec<_> = candidates
                    .iter()
                    .copied()
                    .filter(|_| rng.random::<f64>() < p)
                    .collect();
                let adj = AdjacencyMatrix::from_edges(n, &kept)?;
                // The terminal summarizer must be reachable by someone.
                if adj.in_degree(n - 1) > 0 {
                    return Ok(adj);
                }
            }
        }
    }
}

fn complete_dag_edges(n: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            edges.push((i, j));
        }
    }
    edges
}

/// Fully connected temporal topology: every agent reads every agent's
/// prior-round output, its own included.
pub fn build_temporal_full(n: usize) -> AdjacencyMatrix {
    AdjacencyMatrix::ones(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{is_acyclic, topological_sort};

    #[test]
    fn chain_edges() {
        let adj = build_spatial(&TopologyKind::Chain, 3).unwrap();
        assert_eq!(adj.edges(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn complete_has_n_choose_two_edges() {
        let adj = build_spatial(&TopologyKind::Complete, 4).unwrap();
        assert_eq!(adj.count_ones(), 6);
        for (i, j) in adj.edges() {
            assert!(i < j);
        }
    }

    #[test]
    fn complete_covers_every_unordered_pair_once() {
        let n = 6;
        let adj = build_spatial(&TopologyKind::Complete, n).unwrap();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                // Exactly one orientation per pair.
                assert!(adj.get(i, j) ^ adj.get(j, i));
            }
        }
    }

    #[test]
    #[allow(clippy::identity_op)]
    fn layered_edge_count_is_product_of_widths() {
        let adj = build_spatial(&TopologyKind::Layered { widths: vec![2, 2, 1] }, 5).unwrap();
        assert_eq!(adj.count_ones(), 2 * 2 + 2 * 1);
        assert!(adj.get(0, 2) && adj.get(1, 3) && adj.get(2, 4) && adj.get(3, 4));
    }

    #[test]
    fn layered_rejects_bad_widths() {
        let bad_sum = build_spatial(&TopologyKind::Layered { widths: vec![2, 2] }, 5);
        assert!(matches!(bad_sum, Err(Error::BadLayerSpec(_))));
        let bad_last = build_spatial(&TopologyKind::Layered { widths: vec![2, 3] }, 5);
        assert!(matches!(bad_last, Err(Error::BadLayerSpec(_))));
    }

    #[test]
    fn star_routes_subordinates_to_hub_and_hub_runs_last() {
        let adj = build_spatial(&TopologyKind::Star, 4).unwrap();
        assert_eq!(adj.edges(), vec![(1, 0), (2, 0), (3, 0)]);
        let order = topological_sort(&adj).unwrap();
        assert_eq!(*order.last().unwrap(), 0);
    }

    #[test]
    fn tree_uses_binary_parent_indexing() {
        let adj = build_spatial(&TopologyKind::Tree, 7).unwrap();
        for i in 1..7 {
            assert!(adj.get(i, (i - 1) / 2));
        }
        assert_eq!(adj.count_ones(), 6);
    }

    #[test]
    fn small_populations_rejected() {
        assert!(matches!(
            build_spatial(&TopologyKind::Star, 2),
            Err(Error::TooFewAgents { .. })
        ));
        assert!(matches!(
            build_spatial(&TopologyKind::Chain, 1),
            Err(Error::TooFewAgents { .. })
        ));
    }

    #[test]
    fn every_builder_emits_a_dag() {
        let kinds = [
            TopologyKind::Chain,
            TopologyKind::Star,
            TopologyKind::Tree,
            TopologyKind::Complete,
            TopologyKind::Layered { widths: vec![3, 2, 1] },
            TopologyKind::Random { probability: 0.4, seed: 11 },
        ];
        for kind in kinds {
            let adj = build_spatial(&kind, 6).unwrap();
            assert!(is_acyclic(&adj), "{} built a cyclic graph", kind.name());
        }
    }

    #[test]
    fn random_with_probability_one_equals_complete() {
        let complete = build_spatial(&TopologyKind::Complete, 7).unwrap();
        let random = build_spatial(&TopologyKind::Random { probability: 1.0, seed: 3 }, 7).unwrap();
        assert_eq!(random, complete);
    }

    #[test]
    fn random_terminal_node_always_reachable() {
        for seed in 0..50 {
            let adj =
                build_spatial(&TopologyKind::Random { probability: 0.15, seed }, 5).unwrap();
            assert!(adj.in_degree(4) > 0);
        }
    }

    #[test]
    fn random_rejects_bad_probability() {
        assert!(matches!(
            build_spatial(&TopologyKind::Random { probability: 0.0, seed: 1 }, 4),
            Err(Error::InvalidProbability(_))
        ));
    }

    #[test]
    fn temporal_full_shapes() {
        assert_eq!(build_temporal_full(1).count_ones(), 1);
        let t3 = build_temporal_full(3);
        assert_eq!(t3.count_ones(), 9);
        for v in 0..3 {
            assert_eq!(t3.in_degree(v), 3);
            assert_eq!(t3.out_degree(v), 3);
        }
    }
}
