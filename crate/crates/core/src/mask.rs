//! Trainable edge masks over the communication topology.
//!
//! Each mask entry acts both as an edge-inclusion probability during
//! structure sampling and as an importance score for the one-shot pruner.
//! The utility signal is non-differentiable (it comes from running the
//! agent system), so mask updates use a score-function (REINFORCE)
//! estimator; a nuclear-norm subgradient term biases the masks toward
//! low-rank structure, and a Frobenius trust region keeps them near the
//! predefined topology.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{dag_sample_recording, AdjacencyMatrix};

/// Default clamp bounds for mask entries. The lower bound keeps
/// log-probabilities finite; the upper bound avoids degenerate certainty.
pub const DEFAULT_CLAMP_LO: f64 = 0.05;
pub const DEFAULT_CLAMP_HI: f64 = 0.99;

/// Default initial mask value on the support: a near-dense start with
/// headroom for exploration.
pub const DEFAULT_INIT: f64 = 0.9;

/// How sampled-structure likelihoods are computed.
///
/// `IncludedOnly` multiplies inclusion probabilities of present edges
/// only. `FullBernoulli` also multiplies `1 - S` factors for absent
/// candidate edges, which makes the structure distribution normalized and
/// the score-function gradient unbiased. Edges dropped by DAG sampling
/// count as absent in `FullBernoulli` mode and contribute nothing in
/// `IncludedOnly` mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LikelihoodMode {
    IncludedOnly,
    #[default]
    FullBernoulli,
}

/// Hyperparameters for mask optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Structure rollouts per gradient estimate (`M`).
    pub rollouts: usize,
    /// Weight of the nuclear-norm term.
    pub lambda_nuclear: f64,
    /// Frobenius trust-region radius. `None` resolves to
    /// `0.5 * sqrt(|E|)` per matrix.
    pub delta: Option<f64>,
    pub likelihood_mode: LikelihoodMode,
    /// Subtract the mean rollout utility as a baseline. Disable to keep
    /// the raw utility-weighted estimator.
    pub use_baseline: bool,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.15,
            rollouts: 4,
            lambda_nuclear: 0.1,
            delta: None,
            likelihood_mode: LikelihoodMode::FullBernoulli,
            use_baseline: true,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn resolve_delta(&self, support_edges: usize) -> f64 {
        self.delta.unwrap_or(0.5 * (support_edges as f64).sqrt())
    }
}

/// Real-valued spatial and temporal mask matrices plus their supports.
///
/// Invariants: entries off the support are exactly zero and never move;
/// entries on the support stay within `[clamp_lo, clamp_hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMask {
    spatial: DMatrix<f64>,
    temporal: DMatrix<f64>,
    support_spatial: AdjacencyMatrix,
    support_temporal: AdjacencyMatrix,
    clamp_lo: f64,
    clamp_hi: f64,
}

impl EdgeMask {
    pub fn spatial(&self) -> &DMatrix<f64> {
        &self.spatial
    }

    pub fn temporal(&self) -> &DMatrix<f64> {
        &self.temporal
    }

    pub fn support_spatial(&self) -> &AdjacencyMatrix {
        &self.support_spatial
    }

    pub fn support_temporal(&self) -> &AdjacencyMatrix {
        &self.support_temporal
    }

    pub fn clamp_bounds(&self) -> (f64, f64) {
        (self.clamp_lo, self.clamp_hi)
    }

    pub fn n(&self) -> usize {
        self.support_spatial.n()
    }

    /// Set one spatial entry. The edge must lie on the support and the
    /// value within the clamp bounds.
    pub fn set_spatial(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        Self::set_entry(&mut self.spatial, &self.support_spatial, i, j, value, self.clamp_lo, self.clamp_hi)
    }

    /// Set one temporal entry, with the same support and clamp checks.
    pub fn set_temporal(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        Self::set_entry(&mut self.temporal, &self.support_temporal, i, j, value, self.clamp_lo, self.clamp_hi)
    }

    fn set_entry(
        matrix: &mut DMatrix<f64>,
        support: &AdjacencyMatrix,
        i: usize,
        j: usize,
        value: f64,
        lo: f64,
        hi: f64,
    ) -> Result<()> {
        if !support.get(i, j) {
            return Err(Error::ZeroProbabilityEdge(i, j));
        }
        if !(lo..=hi).contains(&value) {
            return Err(Error::OutOfRangeInit { value, lo, hi });
        }
        matrix[(i, j)] = value;
        Ok(())
    }
}

/// One sampled communication structure: which spatial and temporal edges
/// fired, plus the spatial edges the acyclicity projection dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampledStructure {
    pub spatial_edges: BTreeSet<(usize, usize)>,
    pub temporal_edges: BTreeSet<(usize, usize)>,
    pub dag_removed: BTreeSet<(usize, usize)>,
}

/// Initialize masks to `init_value` on the support, zero elsewhere, with
/// the default clamp bounds.
pub fn init_masks(
    spatial_support: &AdjacencyMatrix,
    temporal_support: &AdjacencyMatrix,
    init_value: f64,
) -> Result<EdgeMask> {
    init_masks_with_clamp(
        spatial_support,
        temporal_support,
        init_value,
        DEFAULT_CLAMP_LO,
        DEFAULT_CLAMP_HI,
    )
}

pub fn init_masks_with_clamp(
    spatial_support: &AdjacencyMatrix,
    temporal_support: &AdjacencyMatrix,
    init_value: f64,
    clamp_lo: f64,
    clamp_hi: f64,
) -> Result<EdgeMask> {
    if spatial_support.n() != temporal_support.n() {
        return Err(Error::ShapeMismatch(format!(
            "spatial support is {0}x{0}, temporal {1}x{1}",
            spatial_support.n(),
            temporal_support.n()
        )));
    }
    if !(init_value > clamp_lo && init_value < clamp_hi) {
        return Err(Error::OutOfRangeInit {
            value: init_value,
            lo: clamp_lo,
            hi: clamp_hi,
        });
    }
    Ok(EdgeMask {
        spatial: support_matrix(spatial_support, init_value),
        temporal: support_matrix(temporal_support, init_value),
        support_spatial: spatial_support.clone(),
        support_temporal: temporal_support.clone(),
        clamp_lo,
        clamp_hi,
    })
}

fn support_matrix(support: &AdjacencyMatrix, value: f64) -> DMatrix<f64> {
    let n = support.n();
    DMatrix::from_fn(n, n, |i, j| if support.get(i, j) { value } else { 0.0 })
}

/// Draw one structure: each support edge fires independently with its mask
/// probability, then the spatial edge set is cycle-broken into a DAG.
pub fn sample_structure<R: Rng + ?Sized>(mask: &EdgeMask, rng: &mut R) -> SampledStructure {
    let n = mask.n();
    let mut spatial_included = AdjacencyMatrix::zeros(n);
    for (i, j) in mask.support_spatial.edges() {
        if rng.random::<f64>() < mask.spatial[(i, j)] {
            spatial_included.set(i, j, true);
        }
    }
    let mut temporal_edges = BTreeSet::new();
    for (i, j) in mask.support_temporal.edges() {
        if rng.random::<f64>() < mask.temporal[(i, j)] {
            temporal_edges.insert((i, j));
        }
    }
    let (dag, removed) = dag_sample_recording(&spatial_included, rng);
    SampledStructure {
        spatial_edges: dag.edges().into_iter().collect(),
        temporal_edges,
        dag_removed: removed.into_iter().collect(),
    }
}

/// Log-probability of a sampled structure under the mask, per
/// [`LikelihoodMode`].
pub fn structure_log_prob(
    mask: &EdgeMask,
    structure: &SampledStructure,
    mode: LikelihoodMode,
) -> Result<f64> {
    let mut log_prob = 0.0;
    for (matrix, support, included) in [
        (&mask.spatial, &mask.support_spatial, &structure.spatial_edges),
        (&mask.temporal, &mask.support_temporal, &structure.temporal_edges),
    ] {
        for &(i, j) in included.iter() {
            if !support.get(i, j) || matrix[(i, j)] == 0.0 {
                return Err(Error::ZeroProbabilityEdge(i, j));
            }
        }
        match mode {
            LikelihoodMode::IncludedOnly => {
                for &(i, j) in included.iter() {
                    log_prob += matrix[(i, j)].ln();
                }
            }
            LikelihoodMode::FullBernoulli => {
                for (i, j) in support.edges() {
                    if included.contains(&(i, j)) {
                        log_prob += matrix[(i, j)].ln();
                    } else {
                        log_prob += (1.0 - matrix[(i, j)]).ln();
                    }
                }
            }
        }
    }
    Ok(log_prob)
}

/// Score-function gradient estimate over a batch of rollouts:
/// `(1/M) * sum_k (phi_k - b) * grad log p(structure_k)` with `b` the mean
/// rollout utility when `use_baseline` is set, else zero. Returns
/// `(spatial, temporal)` gradients, zero off the support.
pub fn reinforce_gradient(
    mask: &EdgeMask,
    rollouts: &[(SampledStructure, f64)],
    mode: LikelihoodMode,
    use_baseline: bool,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if rollouts.is_empty() {
        return Err(Error::EmptyRollouts);
    }
    if rollouts.iter().any(|(_, u)| !u.is_finite()) {
        return Err(Error::NonFiniteEntry);
    }
    let m = rollouts.len() as f64;
    let baseline = if use_baseline {
        rollouts.iter().map(|(_, u)| u).sum::<f64>() / m
    } else {
        0.0
    };
    let n = mask.n();
    let mut grad_spatial = DMatrix::zeros(n, n);
    let mut grad_temporal = DMatrix::zeros(n, n);
    for (structure, utility) in rollouts {
        let weight = (utility - baseline) / m;
        accumulate_score(
            &mut grad_spatial,
            &mask.spatial,
            &mask.support_spatial,
            &structure.spatial_edges,
            weight,
            mode,
        )?;
        accumulate_score(
            &mut grad_temporal,
            &mask.temporal,
            &mask.support_temporal,
            &structure.temporal_edges,
            weight,
            mode,
        )?;
    }
    Ok((grad_spatial, grad_temporal))
}

fn accumulate_score(
    grad: &mut DMatrix<f64>,
    matrix: &DMatrix<f64>,
    support: &AdjacencyMatrix,
    included: &BTreeSet<(usize, usize)>,
    weight: f64,
    mode: LikelihoodMode,
) -> Result<()> {
    for (i, j) in support.edges() {
        let s = matrix[(i, j)];
        if included.contains(&(i, j)) {
            if s == 0.0 {
                return Err(Error::ZeroProbabilityEdge(i, j));
            }
            grad[(i, j)] += weight / s;
        } else if mode == LikelihoodMode::FullBernoulli {
            grad[(i, j)] -= weight / (1.0 - s);
        }
    }
    Ok(())
}

/// Nuclear norm: the sum of singular values.
pub fn nuclear_norm(matrix: &DMatrix<f64>) -> Result<f64> {
    check_finite(matrix)?;
    let svd = matrix.clone().svd(false, false);
    Ok(svd.singular_values.iter().sum())
}

/// A nuclear-norm subgradient: `U * V^T` from the thin SVD.
pub fn nuclear_norm_subgradient(matrix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_finite(matrix)?;
    let svd = matrix.clone().svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    Ok(u * v_t)
}

fn check_finite(matrix: &DMatrix<f64>) -> Result<()> {
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEntry);
    }
    Ok(())
}

/// Project `s` onto the Frobenius ball of radius `delta` around the
/// support pattern `a`, then restore the support and clamp invariants.
/// Inside the ball, `s` is returned unchanged.
pub fn project_frobenius(
    s: &DMatrix<f64>,
    a: &AdjacencyMatrix,
    delta: f64,
    clamp_lo: f64,
    clamp_hi: f64,
) -> DMatrix<f64> {
    let a_f = support_matrix(a, 1.0);
    let residual = s - &a_f;
    let distance = residual.norm();
    if distance <= delta {
        return s.clone();
    }
    let scale = if distance > 0.0 { delta / distance } else { 0.0 };
    let mut projected = a_f + residual * scale;
    for i in 0..a.n() {
        for j in 0..a.n() {
            projected[(i, j)] = if a.get(i, j) {
                projected[(i, j)].clamp(clamp_lo, clamp_hi)
            } else {
                0.0
            };
        }
    }
    projected
}

/// One ascent step on both masks: utility gradient up, nuclear-norm
/// subgradient down, then clamp, support-zero, and trust-region
/// projection. Spatial and temporal sides update independently.
pub fn optimizer_step(
    mask: &EdgeMask,
    grad_spatial: &DMatrix<f64>,
    grad_temporal: &DMatrix<f64>,
    cfg: &OptimizerConfig,
) -> Result<EdgeMask> {
    let mut out = mask.clone();
    out.spatial = step_one(
        &mask.spatial,
        grad_spatial,
        &mask.support_spatial,
        cfg,
        mask.clamp_lo,
        mask.clamp_hi,
    )?;
    out.temporal = step_one(
        &mask.temporal,
        grad_temporal,
        &mask.support_temporal,
        cfg,
        mask.clamp_lo,
        mask.clamp_hi,
    )?;
    Ok(out)
}

fn step_one(
    matrix: &DMatrix<f64>,
    grad: &DMatrix<f64>,
    support: &AdjacencyMatrix,
    cfg: &OptimizerConfig,
    clamp_lo: f64,
    clamp_hi: f64,
) -> Result<DMatrix<f64>> {
    let n = support.n();
    if grad.nrows() != n || grad.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "gradient is {}x{}, mask is {n}x{n}",
            grad.nrows(),
            grad.ncols()
        )));
    }
    let mut sub = nuclear_norm_subgradient(matrix)?;
    for i in 0..n {
        for j in 0..n {
            if !support.get(i, j) {
                sub[(i, j)] = 0.0;
            }
        }
    }
    let mut stepped =
        matrix + grad * cfg.learning_rate - sub * (cfg.learning_rate * cfg.lambda_nuclear);
    for i in 0..n {
        for j in 0..n {
            stepped[(i, j)] = if support.get(i, j) {
                stepped[(i, j)].clamp(clamp_lo, clamp_hi)
            } else {
                0.0
            };
        }
    }
    let delta = cfg.resolve_delta(support.count_ones());
    Ok(project_frobenius(&stepped, support, delta, clamp_lo, clamp_hi))
}

/// Checkpoint document for masks: dimensions, row-major values, supports,
/// clamp bounds, and an echo of the optimizer configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskCheckpoint {
    pub spatial: MatrixDoc,
    pub temporal: MatrixDoc,
    pub support_spatial: AdjacencyMatrix,
    pub support_temporal: AdjacencyMatrix,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    pub config: Option<OptimizerConfig>,
}

/// Row-major matrix payload.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixDoc {
    pub nrows: usize,
    pub ncols: usize,
    pub values: Vec<f64>,
}

impl MatrixDoc {
    fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut values = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                values.push(m[(i, j)]);
            }
        }
        Self {
            nrows: m.nrows(),
            ncols: m.ncols(),
            values,
        }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.values.len() != self.nrows * self.ncols {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} document holds {} values",
                self.nrows,
                self.ncols,
                self.values.len()
            )));
        }
        Ok(DMatrix::from_fn(self.nrows, self.ncols, |i, j| {
            self.values[i * self.ncols + j]
        }))
    }
}

/// Serialize a mask (plus optional config echo) to a structured text
/// document. Round-trips bit-exactly at full float precision.
pub fn save_checkpoint(mask: &EdgeMask, config: Option<&OptimizerConfig>) -> String {
    let doc = MaskCheckpoint {
        spatial: MatrixDoc::from_matrix(&mask.spatial),
        temporal: MatrixDoc::from_matrix(&mask.temporal),
        support_spatial: mask.support_spatial.clone(),
        support_temporal: mask.support_temporal.clone(),
        clamp_lo: mask.clamp_lo,
        clamp_hi: mask.clamp_hi,
        config: config.cloned(),
    };
    serde_json::to_string_pretty(&doc).expect("checkpoint serialization cannot fail")
}

pub fn load_checkpoint(text: &str) -> Result<(EdgeMask, Option<OptimizerConfig>)> {
    let doc: MaskCheckpoint = serde_json::from_str(text)?;
    let mask = EdgeMask {
        spatial: doc.spatial.to_matrix()?,
        temporal: doc.temporal.to_matrix()?,
        support_spatial: doc.support_spatial,
        support_temporal: doc.support_temporal,
        clamp_lo: doc.clamp_lo,
        clamp_hi: doc.clamp_hi,
    };
    Ok((mask, doc.config))
}
