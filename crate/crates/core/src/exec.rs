//! Dialogue execution: topological-order agent invocation per round,
//! answer aggregation, and the full optimize-prune-run schedule.
//!
//! A dialogue owns its graph, masks, trace, and ledger exclusively. All
//! rollouts and rounds run sequentially off one seeded RNG, so a config
//! plus seed replays bit-for-bit.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::Agent;
use crate::cost::TokenLedger;
use crate::error::{Error, Result};
use crate::graph::{dag_sample, is_acyclic, topological_sort, AdjacencyMatrix, CommGraph};
use crate::mask::{
    init_masks, optimizer_step, reinforce_gradient, sample_structure, EdgeMask, OptimizerConfig,
    DEFAULT_INIT,
};
use crate::message::{normalize_answer, Message, MessageKind, QueryRecord, Tokenizer};
use crate::prune::{apply_binary_masks, prune_masks, BinaryMask};

/// How the per-round answer is derived from the agents' messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    MajorityVote,
    /// The last agent in invocation order is the designated summarizer;
    /// its message content is the answer verbatim.
    Summarizer,
}

/// Dialogue schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueConfig {
    /// Total rounds (`K`).
    pub rounds: usize,
    /// Rounds run with mask optimization before pruning (`K'`).
    pub optimize_rounds: usize,
    /// One-shot prune ratio applied after the optimization rounds.
    pub prune_ratio: f64,
    pub aggregation: Aggregation,
    /// Stop once every agent commits to the same normalized answer.
    pub stop_on_consensus: bool,
}

impl DialogueConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.optimize_rounds == 0 || self.optimize_rounds > self.rounds {
            return Err(Error::Config(
                "optimize_rounds must lie in 1..=rounds".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.prune_ratio) {
            return Err(Error::BadRatio(self.prune_ratio));
        }
        Ok(())
    }
}

impl Default for DialogueConfig {
    fn default() -> Self {
        Self {
            rounds: 2,
            optimize_rounds: 1,
            prune_ratio: 0.5,
            aggregation: Aggregation::MajorityVote,
            stop_on_consensus: false,
        }
    }
}

/// State carried between rounds: every agent's prior-round message, plus
/// the per-edge spatial deliveries of the current round.
#[derive(Debug, Clone, Default)]
pub struct RoundState {
    pub round_index: usize,
    pub prior_messages: BTreeMap<usize, Message>,
    pub spatial_messages: BTreeMap<(usize, usize), Message>,
}

/// One line of the dialogue trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TraceEvent {
    Message(Message),
    /// The sampled structure active for a traced optimization round.
    Structure {
        round: usize,
        spatial_edges: Vec<(usize, usize)>,
        temporal_edges: Vec<(usize, usize)>,
    },
    /// The fixed subgraph chosen by one-shot pruning.
    PrunedGraph {
        spatial_edges: Vec<(usize, usize)>,
        temporal_edges: Vec<(usize, usize)>,
        prune_ratio: f64,
    },
    /// Consensus fired and ended the dialogue at this round.
    Stopped { round: usize },
}

/// Render a trace as line-delimited records, one JSON object per line.
pub fn trace_to_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for event in events {
        out.push_str(&serde_json::to_string(event).expect("trace serialization"));
        out.push('\n');
    }
    out
}

/// Scores a round answer against a query.
pub trait UtilityEvaluator {
    fn score(&self, answer: &str, query: &QueryRecord) -> Result<f64>;
}

/// Correctness against the query label: 1.0 on a normalized match, else
/// 0.0. Errors when the query carries no label.
#[derive(Debug, Clone, Copy, Default)]
pub struct LabelMatch;

impl UtilityEvaluator for LabelMatch {
    fn score(&self, answer: &str, query: &QueryRecord) -> Result<f64> {
        let label = query.label.as_deref().ok_or(Error::UtilityEvaluatorMissing)?;
        Ok(if normalize_answer(answer) == normalize_answer(label) {
            1.0
        } else {
            0.0
        })
    }
}

/// Invoke one agent and wrap its reply as a round message addressed to its
/// active spatial out-neighbors.
pub fn agent_respond(
    agent: &mut Agent,
    query: &QueryRecord,
    round_index: usize,
    temporal_msgs: &[Message],
    spatial_msgs: &[Message],
    recipients: BTreeSet<usize>,
    tokenizer: &dyn Tokenizer,
) -> Result<Message> {
    let reply = agent.respond(query, temporal_msgs, spatial_msgs)?;
    let token_count = reply
        .completion_tokens
        .unwrap_or_else(|| tokenizer.count(&reply.content));
    Ok(Message {
        round: round_index,
        sender: Some(agent.id),
        recipients,
        kind: MessageKind::Spatial,
        content: reply.content,
        token_count,
    })
}

/// Derive the round answer from the agents' messages, given in invocation
/// order.
pub fn aggregate_solution(messages: &[Message], strategy: Aggregation) -> Result<String> {
    if messages.is_empty() {
        return Err(Error::EmptyMessages);
    }
    match strategy {
        Aggregation::Summarizer => Ok(messages.last().expect("non-empty").content.clone()),
        Aggregation::MajorityVote => {
            // answer -> (votes, earliest sender id)
            let mut votes: BTreeMap<String, (usize, usize)> = BTreeMap::new();
            for msg in messages {
                let sender = msg.sender.unwrap_or(usize::MAX);
                let entry = votes.entry(msg.answer_line()).or_insert((0, sender));
                entry.0 += 1;
                entry.1 = entry.1.min(sender);
            }
            let winner = votes
                .into_iter()
                .max_by(|a, b| {
                    (a.1 .0, std::cmp::Reverse(a.1 .1))
                        .cmp(&(b.1 .0, std::cmp::Reverse(b.1 .1)))
                })
                .map(|(answer, _)| answer)
                .expect("non-empty votes");
            Ok(winner)
        }
    }
}

/// Run a single dialogue round over the active structure.
///
/// Agents execute in topological order of `active_spatial`; each reads the
/// prior-round outputs of its active temporal in-neighbors and the
/// current-round outputs of its already-executed spatial in-neighbors.
#[allow(clippy::too_many_arguments)]
pub fn run_round(
    agents: &mut [Agent],
    query: &QueryRecord,
    round_index: usize,
    active_spatial: &AdjacencyMatrix,
    active_temporal: &AdjacencyMatrix,
    prior: Option<&RoundState>,
    aggregation: Aggregation,
    tokenizer: &dyn Tokenizer,
    trace: &mut Vec<TraceEvent>,
    ledger: &mut TokenLedger,
) -> Result<(RoundState, String)> {
    let n = agents.len();
    if active_spatial.n() != n || active_temporal.n() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} agents, {}x{} spatial, {}x{} temporal",
            active_spatial.n(),
            active_spatial.n(),
            active_temporal.n(),
            active_temporal.n()
        )));
    }
    let order = topological_sort(active_spatial)?;

    // The query fans out to every agent at the start of the round.
    let query_tokens = tokenizer.count(&query.text);
    for v in 0..n {
        ledger.record_query(v, query_tokens);
    }
    trace.push(TraceEvent::Message(Message {
        round: round_index,
        sender: None,
        recipients: (0..n).collect(),
        kind: MessageKind::Query,
        content: query.text.clone(),
        token_count: query_tokens,
    }));

    // Deliver prior-round outputs along the active temporal edges.
    if let Some(prior) = prior {
        for (&sender, msg) in &prior.prior_messages {
            let recipients: BTreeSet<usize> =
                (0..n).filter(|&v| active_temporal.get(sender, v)).collect();
            if recipients.is_empty() {
                continue;
            }
            for &v in &recipients {
                ledger.record_temporal(sender, v, msg.token_count);
            }
            trace.push(TraceEvent::Message(Message {
                round: round_index,
                sender: Some(sender),
                recipients,
                kind: MessageKind::Temporal,
                content: msg.content.clone(),
                token_count: msg.token_count,
            }));
        }
    }

    let mut state = RoundState {
        round_index,
        prior_messages: BTreeMap::new(),
        spatial_messages: BTreeMap::new(),
    };
    let mut produced: Vec<Message> = Vec::with_capacity(n);

    for &v in &order {
        let temporal_msgs: Vec<Message> = match prior {
            Some(prior) => prior
                .prior_messages
                .iter()
                .filter(|(&j, _)| active_temporal.get(j, v))
                .map(|(_, m)| m.clone())
                .collect(),
            None => Vec::new(),
        };
        let spatial_msgs: Vec<Message> = active_spatial
            .in_neighbors(v)?
            .into_iter()
            .filter_map(|j| state.spatial_messages.get(&(j, v)).cloned())
            .collect();
        let recipients = active_spatial.out_neighbors(v)?;

        let message = agent_respond(
            &mut agents[v],
            query,
            round_index,
            &temporal_msgs,
            &spatial_msgs,
            recipients.clone(),
            tokenizer,
        )?;

        ledger.record_completion(v, message.token_count);
        for &w in &recipients {
            ledger.record_spatial(v, w, message.token_count);
            state.spatial_messages.insert((v, w), message.clone());
        }
        trace.push(TraceEvent::Message(message.clone()));
        state.prior_messages.insert(v, message.clone());
        produced.push(message);
    }

    let answer = aggregate_solution(&produced, aggregation)?;
    trace.push(TraceEvent::Message(Message {
        round: round_index,
        sender: None,
        recipients: BTreeSet::new(),
        kind: MessageKind::Answer,
        content: answer.clone(),
        token_count: tokenizer.count(&answer),
    }));
    Ok((state, answer))
}

fn consensus_reached(state: &RoundState) -> bool {
    let mut answers = state.prior_messages.values().map(|m| m.answer_line());
    match answers.next() {
        Some(first) => answers.all(|a| a == first),
        None => false,
    }
}

/// Outcome of a fixed-topology dialogue.
#[derive(Debug, Clone)]
pub struct FixedOutcome {
    pub answer: String,
    pub rounds_run: usize,
    pub stopped_at: Option<usize>,
}

/// Run `rounds` rounds on a fixed graph (no sampling, no mask updates).
/// A cyclic spatial input is first broken into a DAG with the caller's RNG.
#[allow(clippy::too_many_arguments)]
pub fn run_fixed_dialogue(
    agents: &mut [Agent],
    query: &QueryRecord,
    spatial: &AdjacencyMatrix,
    temporal: &AdjacencyMatrix,
    rounds: usize,
    aggregation: Aggregation,
    stop_on_consensus: bool,
    rng: &mut ChaCha8Rng,
    tokenizer: &dyn Tokenizer,
    trace: &mut Vec<TraceEvent>,
    ledger: &mut TokenLedger,
) -> Result<FixedOutcome> {
    if rounds == 0 {
        return Err(Error::Config("rounds must be at least 1".into()));
    }
    let spatial_dag = if is_acyclic(spatial) {
        spatial.clone()
    } else {
        dag_sample(spatial, rng)
    };
    let mut prior: Option<RoundState> = None;
    let mut answer = String::new();
    let mut stopped_at = None;
    let mut rounds_run = 0;
    for round_index in 1..=rounds {
        let (state, round_answer) = run_round(
            agents,
            query,
            round_index,
            &spatial_dag,
            temporal,
            prior.as_ref(),
            aggregation,
            tokenizer,
            trace,
            ledger,
        )?;
        answer = round_answer;
        rounds_run = round_index;
        let consensus = consensus_reached(&state);
        prior = Some(state);
        if stop_on_consensus && consensus {
            stopped_at = Some(round_index);
            trace.push(TraceEvent::Stopped { round: round_index });
            break;
        }
    }
    Ok(FixedOutcome {
        answer,
        rounds_run,
        stopped_at,
    })
}

fn adjacency_from_edges(n: usize, edges: &BTreeSet<(usize, usize)>) -> AdjacencyMatrix {
    let mut adj = AdjacencyMatrix::zeros(n);
    for &(i, j) in edges {
        adj.set(i, j, true);
    }
    adj
}

/// One optimization round: sample `M` structures, run each as a rollout
/// from the same prior state, score the answers, and take one mask step.
/// The first rollout's messages carry forward into the next round and are
/// the ones traced; the ledger accrues every rollout.
#[allow(clippy::too_many_arguments)]
pub fn run_optimizing_round(
    agents: &mut Vec<Agent>,
    query: &QueryRecord,
    round_index: usize,
    mask: &mut EdgeMask,
    opt: &OptimizerConfig,
    prior: Option<&RoundState>,
    aggregation: Aggregation,
    evaluator: &dyn UtilityEvaluator,
    rng: &mut ChaCha8Rng,
    tokenizer: &dyn Tokenizer,
    trace: &mut Vec<TraceEvent>,
    ledger: &mut TokenLedger,
) -> Result<(RoundState, String)> {
    if opt.rollouts == 0 {
        return Err(Error::Config("rollouts must be at least 1".into()));
    }
    let n = agents.len();
    let snapshot = agents.clone();
    let mut rollouts = Vec::with_capacity(opt.rollouts);
    let mut carried: Option<(RoundState, String, Vec<Agent>)> = None;
    let mut scratch_trace = Vec::new();

    for k in 0..opt.rollouts {
        let structure = sample_structure(mask, rng);
        let spatial = adjacency_from_edges(n, &structure.spatial_edges);
        let temporal = adjacency_from_edges(n, &structure.temporal_edges);
        let mut rollout_agents = snapshot.clone();
        let sink: &mut Vec<TraceEvent> = if k == 0 {
            trace.push(TraceEvent::Structure {
                round: round_index,
                spatial_edges: structure.spatial_edges.iter().copied().collect(),
                temporal_edges: structure.temporal_edges.iter().copied().collect(),
            });
            trace
        } else {
            scratch_trace.clear();
            &mut scratch_trace
        };
        let (state, answer) = run_round(
            &mut rollout_agents,
            query,
            round_index,
            &spatial,
            &temporal,
            prior,
            aggregation,
            tokenizer,
            sink,
            ledger,
        )?;
        let utility = evaluator.score(&answer, query)?;
        if k == 0 {
            carried = Some((state, answer, rollout_agents));
        }
        rollouts.push((structure, utility));
    }

    let (grad_spatial, grad_temporal) =
        reinforce_gradient(mask, &rollouts, opt.likelihood_mode, opt.use_baseline)?;
    *mask = optimizer_step(mask, &grad_spatial, &grad_temporal, opt)?;

    let (state, answer, post_agents) = carried.expect("at least one rollout");
    *agents = post_agents;
    Ok((state, answer))
}

/// Everything a full dialogue run produces.
#[derive(Debug, Clone)]
pub struct DialogueOutcome {
    pub answer: String,
    pub rounds_run: usize,
    pub stopped_at: Option<usize>,
    pub trace: Vec<TraceEvent>,
    pub ledger: TokenLedger,
    pub mask: EdgeMask,
    pub binary: BinaryMask,
    pub subgraph: CommGraph,
}

/// The full single-query schedule: `K'` optimization rounds with fresh
/// masks, one-shot pruning into `G^sub`, then the remaining rounds on the
/// fixed subgraph.
#[allow(clippy::too_many_arguments)]
pub fn run_dialogue(
    cfg: &DialogueConfig,
    graph: &CommGraph,
    agents: &mut Vec<Agent>,
    query: &QueryRecord,
    opt: &OptimizerConfig,
    evaluator: Option<&dyn UtilityEvaluator>,
    rng: &mut ChaCha8Rng,
    tokenizer: &dyn Tokenizer,
) -> Result<DialogueOutcome> {
    cfg.validate()?;
    if agents.len() != graph.n() {
        return Err(Error::ShapeMismatch(format!(
            "{} agents for a {}-node graph",
            agents.len(),
            graph.n()
        )));
    }
    let evaluator = evaluator.ok_or(Error::UtilityEvaluatorMissing)?;

    let mut mask = init_masks(&graph.spatial_adj, &graph.temporal_adj, DEFAULT_INIT)?;
    let mut trace = Vec::new();
    let mut ledger = TokenLedger::new();
    let mut prior: Option<RoundState> = None;
    let mut answer = String::new();
    let mut rounds_run = 0;
    let mut stopped_at = None;

    for round_index in 1..=cfg.optimize_rounds {
        let (state, round_answer) = run_optimizing_round(
            agents,
            query,
            round_index,
            &mut mask,
            opt,
            prior.as_ref(),
            cfg.aggregation,
            evaluator,
            rng,
            tokenizer,
            &mut trace,
            &mut ledger,
        )?;
        answer = round_answer;
        rounds_run = round_index;
        let consensus = consensus_reached(&state);
        prior = Some(state);
        if cfg.stop_on_consensus && consensus {
            stopped_at = Some(round_index);
            trace.push(TraceEvent::Stopped { round: round_index });
            break;
        }
    }

    let binary = prune_masks(&mask, cfg.prune_ratio)?;
    let subgraph = apply_binary_masks(graph, &binary.spatial, &binary.temporal)?;
    trace.push(TraceEvent::PrunedGraph {
        spatial_edges: subgraph.spatial_adj.edges(),
        temporal_edges: subgraph.temporal_adj.edges(),
        prune_ratio: cfg.prune_ratio,
    });

    if stopped_at.is_none() {
        let spatial_dag = if is_acyclic(&subgraph.spatial_adj) {
            subgraph.spatial_adj.clone()
        } else {
            dag_sample(&subgraph.spatial_adj, rng)
        };
        for round_index in cfg.optimize_rounds + 1..=cfg.rounds {
            let (state, round_answer) = run_round(
                agents,
                query,
                round_index,
                &spatial_dag,
                &subgraph.temporal_adj,
                prior.as_ref(),
                cfg.aggregation,
                tokenizer,
                &mut trace,
                &mut ledger,
            )?;
            answer = round_answer;
            rounds_run = round_index;
            let consensus = consensus_reached(&state);
            prior = Some(state);
            if cfg.stop_on_consensus && consensus {
                stopped_at = Some(round_index);
                trace.push(TraceEvent::Stopped { round: round_index });
                break;
            }
        }
    }

    Ok(DialogueOutcome {
        answer,
        rounds_run,
        stopped_at,
        trace,
        ledger,
        mask,
        binary,
        subgraph,
    })
}
