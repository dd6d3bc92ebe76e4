//! Token ledger, closed-form cost and savings formulas, and
//! percent-of-baseline reduction reporting.
//!
//! The formulas model an idealized schedule where every edge carries a
//! constant-size message every round (temporal edges included from round
//! one). The schedule simulators below enact exactly that model against
//! plain accumulators, so formula/simulation reconciliation is a
//! zero-tolerance check.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inputs to the cost formulas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    /// Dialogue rounds per query (`K`).
    pub rounds: usize,
    /// Optimization rounds before pruning (`K'`).
    pub optimize_rounds: usize,
    /// Total queries (`Q`).
    pub queries: usize,
    /// Training queries before pruning (`Q'`).
    pub train_queries: usize,
    /// Structure rollouts per optimization round (`M`).
    pub rollouts: usize,
    /// Prune ratio (`p`).
    pub prune_ratio: f64,
    /// Mean tokens per spatial message.
    pub spatial_msg_tokens: f64,
    /// Mean tokens per temporal message.
    pub temporal_msg_tokens: f64,
    /// Mean tokens of the query prompt per agent.
    pub query_tokens: f64,
    pub spatial_edges: usize,
    pub temporal_edges: usize,
    pub agents: usize,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if self.optimize_rounds > self.rounds {
            return Err(Error::Config("optimize_rounds exceeds rounds".into()));
        }
        if self.train_queries > self.queries {
            return Err(Error::Config("train_queries exceeds queries".into()));
        }
        if !(0.0..1.0).contains(&self.prune_ratio) {
            return Err(Error::BadRatio(self.prune_ratio));
        }
        if self.spatial_msg_tokens < 0.0 || self.temporal_msg_tokens < 0.0 || self.query_tokens < 0.0
        {
            return Err(Error::Config("token means must be non-negative".into()));
        }
        Ok(())
    }

    /// `c_S |E^S| + c_T |E^T|`: edge tokens per full round.
    pub fn edge_term(&self) -> f64 {
        self.spatial_msg_tokens * self.spatial_edges as f64
            + self.temporal_msg_tokens * self.temporal_edges as f64
    }

    /// `c_q |V|`: query tokens per round.
    pub fn query_term(&self) -> f64 {
        self.query_tokens * self.agents as f64
    }
}

/// Total tokens of the vanilla system: `K (c_S|E^S| + c_T|E^T| + c_q|V|)`.
pub fn vanilla_cost(params: &CostParams) -> f64 {
    params.rounds as f64 * (params.edge_term() + params.query_term())
}

/// Closed-form single-query token savings:
/// `((1+p)K - (M+p)K') (c_S|E^S| + c_T|E^T|) + (1-M) K' c_q |V|`.
///
/// Note this printed form credits the full edge load of every post-prune
/// round as saved; it exceeds the difference between the vanilla and
/// two-stage schedules by `(K - K')` edge terms (see
/// [`simulate_two_stage`]).
pub fn delta_single_query(params: &CostParams) -> f64 {
    let k = params.rounds as f64;
    let k_prime = params.optimize_rounds as f64;
    let m = params.rollouts as f64;
    let p = params.prune_ratio;
    ((1.0 + p) * k - (m + p) * k_prime) * params.edge_term()
        + (1.0 - m) * k_prime * params.query_term()
}

/// Closed-form multi-query token savings:
/// `(pQ + (1-p-M)Q') K (c_S|E^S| + c_T|E^T|) + (1-M) Q' K c_q |V|`.
pub fn delta_multi_query(params: &CostParams) -> f64 {
    let k = params.rounds as f64;
    let q = params.queries as f64;
    let q_prime = params.train_queries as f64;
    let m = params.rollouts as f64;
    let p = params.prune_ratio;
    (p * q + (1.0 - p - m) * q_prime) * k * params.edge_term()
        + (1.0 - m) * q_prime * k * params.query_term()
}

/// Enact the vanilla schedule round by round.
pub fn simulate_vanilla(params: &CostParams) -> f64 {
    let mut total = 0.0;
    for _ in 0..params.rounds {
        total += params.edge_term() + params.query_term();
    }
    total
}

/// Enact the two-stage single-query schedule: `M` rollouts per round for
/// `K'` rounds, then `K - K'` rounds at `(1-p)` of the edge load.
pub fn simulate_two_stage(params: &CostParams) -> f64 {
    let mut total = 0.0;
    for _ in 0..params.optimize_rounds {
        for _ in 0..params.rollouts {
            total += params.edge_term() + params.query_term();
        }
    }
    for _ in params.optimize_rounds..params.rounds {
        total += (1.0 - params.prune_ratio) * params.edge_term() + params.query_term();
    }
    total
}

/// Enact the vanilla schedule over all `Q` queries.
pub fn simulate_multi_query_vanilla(params: &CostParams) -> f64 {
    let mut total = 0.0;
    for _ in 0..params.queries {
        for _ in 0..params.rounds {
            total += params.edge_term() + params.query_term();
        }
    }
    total
}

/// Enact the multi-query schedule: `M` rollouts per round over the first
/// `Q'` queries, then the pruned edge load for the rest.
pub fn simulate_multi_query_two_stage(params: &CostParams) -> f64 {
    let mut total = 0.0;
    for _ in 0..params.train_queries {
        for _ in 0..params.rounds {
            for _ in 0..params.rollouts {
                total += params.edge_term() + params.query_term();
            }
        }
    }
    for _ in params.train_queries..params.queries {
        for _ in 0..params.rounds {
            total += (1.0 - params.prune_ratio) * params.edge_term() + params.query_term();
        }
    }
    total
}

/// Per-run token accounting: prompt tokens per edge and kind, completion
/// tokens per agent, with running totals that always equal the tally sums.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenLedger {
    spatial: BTreeMap<(usize, usize), u64>,
    temporal: BTreeMap<(usize, usize), u64>,
    query: BTreeMap<usize, u64>,
    completion: BTreeMap<usize, u64>,
    prompt_total: u64,
    completion_total: u64,
}

impl TokenLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_spatial(&mut self, src: usize, dst: usize, tokens: u64) {
        *self.spatial.entry((src, dst)).or_default() += tokens;
        self.prompt_total += tokens;
    }

    pub fn record_temporal(&mut self, src: usize, dst: usize, tokens: u64) {
        *self.temporal.entry((src, dst)).or_default() += tokens;
        self.prompt_total += tokens;
    }

    pub fn record_query(&mut self, agent: usize, tokens: u64) {
        *self.query.entry(agent).or_default() += tokens;
        self.prompt_total += tokens;
    }

    pub fn record_completion(&mut self, agent: usize, tokens: u64) {
        *self.completion.entry(agent).or_default() += tokens;
        self.completion_total += tokens;
    }

    pub fn prompt_total(&self) -> u64 {
        self.prompt_total
    }

    pub fn completion_total(&self) -> u64 {
        self.completion_total
    }

    pub fn spatial_prompt_total(&self) -> u64 {
        self.spatial.values().sum()
    }

    pub fn temporal_prompt_total(&self) -> u64 {
        self.temporal.values().sum()
    }

    pub fn query_prompt_total(&self) -> u64 {
        self.query.values().sum()
    }

    pub fn totals(&self) -> TokenTotals {
        TokenTotals {
            prompt: self.prompt_total,
            completion: self.completion_total,
        }
    }

    /// Conservation: totals equal the sum of their tallies.
    pub fn is_conserved(&self) -> bool {
        self.spatial_prompt_total() + self.temporal_prompt_total() + self.query_prompt_total()
            == self.prompt_total
            && self.completion.values().sum::<u64>() == self.completion_total
    }

    pub fn merge(&mut self, other: &TokenLedger) {
        for (&k, &v) in &other.spatial {
            *self.spatial.entry(k).or_default() += v;
        }
        for (&k, &v) in &other.temporal {
            *self.temporal.entry(k).or_default() += v;
        }
        for (&k, &v) in &other.query {
            *self.query.entry(k).or_default() += v;
        }
        for (&k, &v) in &other.completion {
            *self.completion.entry(k).or_default() += v;
        }
        self.prompt_total += other.prompt_total;
        self.completion_total += other.completion_total;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&LedgerDoc::from(self)).expect("ledger serialization")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: LedgerDoc = serde_json::from_str(text)?;
        Ok(doc.into_ledger())
    }
}

#[derive(Serialize, Deserialize)]
struct LedgerDoc {
    spatial: Vec<(usize, usize, u64)>,
    temporal: Vec<(usize, usize, u64)>,
    query: Vec<(usize, u64)>,
    completion: Vec<(usize, u64)>,
    prompt_total: u64,
    completion_total: u64,
}

impl From<&TokenLedger> for LedgerDoc {
    fn from(l: &TokenLedger) -> Self {
        Self {
            spatial: l.spatial.iter().map(|(&(s, d), &t)| (s, d, t)).collect(),
            temporal: l.temporal.iter().map(|(&(s, d), &t)| (s, d, t)).collect(),
            query: l.query.iter().map(|(&a, &t)| (a, t)).collect(),
            completion: l.completion.iter().map(|(&a, &t)| (a, t)).collect(),
            prompt_total: l.prompt_total,
            completion_total: l.completion_total,
        }
    }
}

impl LedgerDoc {
    fn into_ledger(self) -> TokenLedger {
        TokenLedger {
            spatial: self.spatial.into_iter().map(|(s, d, t)| ((s, d), t)).collect(),
            temporal: self.temporal.into_iter().map(|(s, d, t)| ((s, d), t)).collect(),
            query: self.query.into_iter().collect(),
            completion: self.completion.into_iter().collect(),
            prompt_total: self.prompt_total,
            completion_total: self.completion_total,
        }
    }
}

/// Prompt/completion token totals for one run phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenTotals {
    pub prompt: u64,
    pub completion: u64,
}

impl TokenTotals {
    pub fn total(&self) -> u64 {
        self.prompt + self.completion
    }
}

/// Per-million token prices; supplied via configuration, never hardcoded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prices {
    pub prompt_per_million: f64,
    pub completion_per_million: f64,
}

pub fn cost_usd(totals: &TokenTotals, prices: &Prices) -> f64 {
    totals.prompt as f64 * prices.prompt_per_million / 1e6
        + totals.completion as f64 * prices.completion_per_million / 1e6
}

/// `after / before` as a one-decimal percentage, truncated toward zero.
/// Computed in integers, so decimal results are exact.
pub fn pct_of_baseline(before: u64, after: u64) -> Result<f64> {
    if before == 0 {
        return Err(Error::ZeroBaseline);
    }
    let tenths = (after as u128 * 1000) / before as u128;
    Ok(tenths as f64 / 10.0)
}

fn pct_of_baseline_f64(before: f64, after: f64) -> Result<f64> {
    if before <= 0.0 {
        return Err(Error::ZeroBaseline);
    }
    Ok(((after / before) * 1000.0).trunc() / 10.0)
}

/// One category of a before/after comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionRow {
    pub category: String,
    pub before: f64,
    pub after: f64,
    pub pct_of_baseline: f64,
}

/// Before/after comparison per category (prompt, completion, total, and
/// cost when prices are given).
pub fn reduction_report(
    before: &TokenTotals,
    after: &TokenTotals,
    prices: Option<&Prices>,
) -> Result<Vec<ReductionRow>> {
    let mut rows = vec![
        ReductionRow {
            category: "prompt".into(),
            before: before.prompt as f64,
            after: after.prompt as f64,
            pct_of_baseline: pct_of_baseline(before.prompt, after.prompt)?,
        },
        ReductionRow {
            category: "completion".into(),
            before: before.completion as f64,
            after: after.completion as f64,
            pct_of_baseline: pct_of_baseline(before.completion, after.completion)?,
        },
        ReductionRow {
            category: "total".into(),
            before: before.total() as f64,
            after: after.total() as f64,
            pct_of_baseline: pct_of_baseline(before.total(), after.total())?,
        },
    ];
    if let Some(prices) = prices {
        let before_usd = cost_usd(before, prices);
        let after_usd = cost_usd(after, prices);
        rows.push(ReductionRow {
            category: "cost".into(),
            before: before_usd,
            after: after_usd,
            pct_of_baseline: pct_of_baseline_f64(before_usd, after_usd)?,
        });
    }
    Ok(rows)
}

/// CSV report: one row per phase with the prompt-token percent of
/// baseline, matching the columns `(phase, prompt_tokens,
/// completion_tokens, pct_of_baseline, cost)`.
pub fn reduction_report_csv(
    before: &TokenTotals,
    after: &TokenTotals,
    prices: Option<&Prices>,
) -> Result<String> {
    let pct = pct_of_baseline(before.prompt, after.prompt)?;
    let fmt_cost = |t: &TokenTotals| match prices {
        Some(p) => format!("{:.3}", cost_usd(t, p)),
        None => String::new(),
    };
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["phase", "prompt_tokens", "completion_tokens", "pct_of_baseline", "cost"])
        .map_err(|e| Error::Serialization(e.to_string()))?;
    wtr.write_record([
        "baseline".to_string(),
        before.prompt.to_string(),
        before.completion.to_string(),
        "100.0".to_string(),
        fmt_cost(before),
    ])
    .map_err(|e| Error::Serialization(e.to_string()))?;
    wtr.write_record([
        "treated".to_string(),
        after.prompt.to_string(),
        after.completion.to_string(),
        format!("{pct:.1}"),
        fmt_cost(after),
    ])
    .map_err(|e| Error::Serialization(e.to_string()))?;
    let bytes = wtr.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Serialization(e.to_string()))
}
