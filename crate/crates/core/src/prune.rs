//! One-shot magnitude pruning of optimized masks into fixed binary
//! communication topologies.

use serde::{Deserialize, Serialize};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::graph::{AdjacencyMatrix, CommGraph};
use crate::mask::EdgeMask;

/// Binary keep/drop masks for both edge kinds, plus the ratio that
/// produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub spatial: AdjacencyMatrix,
    pub temporal: AdjacencyMatrix,
    pub prune_ratio: f64,
}

/// Number of entries kept when pruning `support_count` edges at ratio `p`:
/// the ceiling of `support_count * (1 - p)`.
///
/// The product is computed in floats, so a decimal ratio like 0.7 can land
/// a hair above the exact rational value; a small downward nudge before
/// the ceiling keeps decimal ratios exact. Any nonzero support keeps at
/// least one edge since `p < 1`.
pub fn kept_count(support_count: usize, p: f64) -> usize {
    if support_count == 0 {
        return 0;
    }
    let raw = (support_count as f64) * (1.0 - p);
    ((raw - 1e-9).ceil().max(1.0)) as usize
}

/// Keep the largest `(1 - p)` fraction of mask entries on the support,
/// ties broken by `(row, col)` lexicographic order, smaller index wins.
pub fn one_shot_prune(
    scores: &DMatrix<f64>,
    support: &AdjacencyMatrix,
    p: f64,
) -> Result<AdjacencyMatrix> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::BadRatio(p));
    }
    let n = support.n();
    if scores.nrows() != n || scores.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "scores are {}x{}, support is {n}x{n}",
            scores.nrows(),
            scores.ncols()
        )));
    }
    let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
    for (i, j) in support.edges() {
        let v = scores[(i, j)];
        if !v.is_finite() {
            return Err(Error::NonFiniteEntry);
        }
        ranked.push((i, j, v));
    }
    ranked.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .expect("finite scores")
            .then_with(|| (a.0, a.1).cmp(&(b.0, b.1)))
    });
    let keep = kept_count(ranked.len(), p);
    let mut out = AdjacencyMatrix::zeros(n);
    for &(i, j, _) in ranked.iter().take(keep) {
        out.set(i, j, true);
    }
    Ok(out)
}

/// Prune both mask matrices independently at the same ratio.
pub fn prune_masks(mask: &EdgeMask, p: f64) -> Result<BinaryMask> {
    Ok(BinaryMask {
        spatial: one_shot_prune(mask.spatial(), mask.support_spatial(), p)?,
        temporal: one_shot_prune(mask.temporal(), mask.support_temporal(), p)?,
        prune_ratio: p,
    })
}

/// Apply binary masks to a graph: `A ^ binary` elementwise for both edge
/// kinds; the node set is unchanged.
pub fn apply_binary_masks(
    graph: &CommGraph,
    spatial_mask: &AdjacencyMatrix,
    temporal_mask: &AdjacencyMatrix,
) -> Result<CommGraph> {
    Ok(CommGraph {
        nodes: graph.nodes.clone(),
        spatial_adj: graph.spatial_adj.hadamard(spatial_mask)?,
        temporal_adj: graph.temporal_adj.hadamard(temporal_mask)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_comm_graph, AgentNode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn keeps_the_strongest_edge_at_half_ratio() {
        let mut scores = DMatrix::zeros(2, 2);
        scores[(0, 1)] = 0.9;
        scores[(1, 0)] = 0.1;
        let support = AdjacencyMatrix::from_edges(2, &[(0, 1), (1, 0)]).unwrap();
        let b = one_shot_prune(&scores, &support, 0.5).unwrap();
        assert!(b.get(0, 1));
        assert!(!b.get(1, 0));
        assert_eq!(b.count_ones(), 1);
    }

    #[test]
    fn zero_ratio_keeps_everything() {
        let support = AdjacencyMatrix::from_edges(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let mut scores = DMatrix::zeros(3, 3);
        for (i, j) in support.edges() {
            scores[(i, j)] = 0.5;
        }
        let b = one_shot_prune(&scores, &support, 0.0).unwrap();
        assert_eq!(b, support);
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let support =
            AdjacencyMatrix::from_edges(3, &[(0, 1), (0, 2), (1, 2), (2, 0)]).unwrap();
        let mut scores = DMatrix::zeros(3, 3);
        for (i, j) in support.edges() {
            scores[(i, j)] = 0.4;
        }
        let b = one_shot_prune(&scores, &support, 0.5).unwrap();
        // kept = ceil(4 * 0.5) = 2; the two lexicographically smallest win.
        assert_eq!(b.count_ones(), 2);
        assert!(b.get(0, 1));
        assert!(b.get(0, 2));
    }

    #[test]
    fn rejects_bad_ratio() {
        let support = AdjacencyMatrix::from_edges(2, &[(0, 1)]).unwrap();
        let scores = DMatrix::zeros(2, 2);
        assert!(matches!(
            one_shot_prune(&scores, &support, 1.0),
            Err(Error::BadRatio(_))
        ));
        assert!(matches!(
            one_shot_prune(&scores, &support, -0.1),
            Err(Error::BadRatio(_))
        ));
    }

    #[test]
    fn kept_count_matches_exact_rational_ceiling_on_decimal_grid() {
        for support in 0..=60usize {
            for tenths in 0..10usize {
                let p = tenths as f64 / 10.0;
                // ceil(support * (10 - tenths) / 10) in exact integers.
                let exact = (support * (10 - tenths)).div_ceil(10);
                assert_eq!(kept_count(support, p), exact, "support {support}, p {p}");
            }
        }
    }

    /// Brute-force oracle: sort all (value, i, j) triples descending with
    /// the same tie rule and cut at the kept count.
    fn sort_and_cut(
        scores: &DMatrix<f64>,
        support: &AdjacencyMatrix,
        p: f64,
    ) -> Vec<(usize, usize)> {
        let mut entries: Vec<(usize, usize, f64)> = support
            .edges()
            .into_iter()
            .map(|(i, j)| (i, j, scores[(i, j)]))
            .collect();
        entries.sort_by(|a, b| {
            b.2.partial_cmp(&a.2)
                .unwrap()
                .then_with(|| (a.0, a.1).cmp(&(b.0, b.1)))
        });
        entries.truncate(kept_count(entries.len(), p));
        entries.into_iter().map(|(i, j, _)| (i, j)).collect()
    }

    #[test]
    fn agrees_with_sort_oracle_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..200 {
            let n = 5;
            let mut support = AdjacencyMatrix::zeros(n);
            let mut scores = DMatrix::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    if i != j && rng.random::<f64>() < 0.6 {
                        support.set(i, j, true);
                        scores[(i, j)] = rng.random::<f64>();
                    }
                }
            }
            let p = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9][trial % 6];
            let b = one_shot_prune(&scores, &support, p).unwrap();
            let expect = sort_and_cut(&scores, &support, p);
            assert_eq!(b.count_ones(), expect.len());
            for (i, j) in expect {
                assert!(b.get(i, j));
            }
            // Positive rescaling leaves the kept set unchanged.
            let scaled = &scores * 37.5;
            assert_eq!(one_shot_prune(&scaled, &support, p).unwrap(), b);
        }
    }

    #[test]
    fn raising_a_kept_entry_never_drops_it() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let support = AdjacencyMatrix::from_edges(
            4,
            &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)],
        )
        .unwrap();
        for _ in 0..100 {
            let mut scores = DMatrix::zeros(4, 4);
            for (i, j) in support.edges() {
                scores[(i, j)] = rng.random::<f64>();
            }
            let b = one_shot_prune(&scores, &support, 0.5).unwrap();
            let kept: Vec<_> = b.edges();
            let &(i, j) = kept.first().unwrap();
            let mut raised = scores.clone();
            raised[(i, j)] += 0.5;
            let b2 = one_shot_prune(&raised, &support, 0.5).unwrap();
            assert!(b2.get(i, j));
        }
    }

    #[test]
    fn binary_masks_gate_the_graph() {
        let nodes: Vec<AgentNode> =
            (0..3).map(|i| AgentNode::new(i, "scripted", "solver")).collect();
        let g = build_comm_graph(nodes, &[(0, 1), (1, 2)], &[(0, 0), (1, 1)]).unwrap();

        let all = AdjacencyMatrix::ones(3);
        let unchanged = apply_binary_masks(&g, &all, &all).unwrap();
        assert_eq!(unchanged, g);

        let none = AdjacencyMatrix::zeros(3);
        let empty = apply_binary_masks(&g, &none, &none).unwrap();
        assert_eq!(empty.spatial_adj.count_ones(), 0);
        assert_eq!(empty.temporal_adj.count_ones(), 0);
        assert_eq!(empty.nodes, g.nodes);
    }

    #[test]
    fn surviving_edges_exist_in_both_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = 4;
            let mut spatial = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if i != j && rng.random::<f64>() < 0.5 {
                        spatial.push((i, j));
                    }
                }
            }
            let nodes: Vec<AgentNode> =
                (0..n).map(|i| AgentNode::new(i, "scripted", "solver")).collect();
            let g = build_comm_graph(nodes, &spatial, &[]).unwrap();
            let mut b = AdjacencyMatrix::zeros(n);
            for i in 0..n {
                for j in 0..n {
                    if rng.random::<f64>() < 0.5 {
                        b.set(i, j, true);
                    }
                }
            }
            let sub = apply_binary_masks(&g, &b, &AdjacencyMatrix::zeros(n)).unwrap();
            for (i, j) in sub.spatial_adj.edges() {
                assert!(g.spatial_adj.get(i, j) && b.get(i, j));
            }
        }
    }
}
