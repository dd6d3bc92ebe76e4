//! Experiment drivers: multi-query training, the redundancy probe, and
//! paired adversarial-attack runs, plus config loading and deterministic
//! result writers.
//!
//! Every driver is a pure function of (config, queries, seed): scripted
//! agents consult nothing but their seeded RNGs, all collections iterate
//! in sorted order, and output files carry no timestamps, so reruns are
//! byte-identical.


use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{Agent, AgentBackend, RoleProfile};
use crate::cost::{Prices, TokenLedger};
use crate::error::{Error, Result};
use crate::exec::{
    run_fixed_dialogue, run_optimizing_round, DialogueConfig, LabelMatch, RoundState, TraceEvent,
    UtilityEvaluator,
};
use crate::graph::{build_comm_graph, AdjacencyMatrix, AgentNode, CommGraph};
use crate::mask::{init_masks, save_checkpoint, EdgeMask, OptimizerConfig, DEFAULT_INIT};
use crate::message::{QueryRecord, WhitespaceTokenizer};
use crate::prune::{apply_binary_masks, prune_masks, BinaryMask};
use crate::topology::{build_spatial, build_temporal_full, TopologyKind};

/// Environment variable that injects the HTTP auth secret; the only
/// setting read from the environment.
pub const AUTH_TOKEN_ENV: &str = "COMMPRUNE_API_KEY";

/// Deterministically derive a sub-seed.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Which adversarial wrapper the experiment applies to one randomly
/// chosen agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    #[default]
    None,
    Prompt,
    Replacement,
}

/// Which temporal topology the experiment wires up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalTopology {
    /// Debate-style: every agent reads every prior-round output, its own
    /// included.
    #[default]
    Full,
    /// Debate-style without self-loops: agents reread peers, not
    /// themselves.
    FullNoSelf,
    /// No cross-round message passing.
    None,
}

impl TemporalTopology {
    pub fn build(&self, n: usize) -> AdjacencyMatrix {
        match self {
            TemporalTopology::Full => build_temporal_full(n),
            TemporalTopology::FullNoSelf => {
                let mut adj = build_temporal_full(n);
                for v in 0..n {
                    adj.set(v, v, false);
                }
                adj
            }
            TemporalTopology::None => AdjacencyMatrix::zeros(n),
        }
    }
}

/// Where the query set comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum QuerySource {
    /// Bundled synthetic multiple-choice generator.
    Synthetic { count: usize, choices: usize, seed: u64 },
    /// Line-delimited labeled records on disk.
    File { path: String },
}

/// One agent slot: a role name (builtin registry or inline template) and
/// a backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub role: String,
    #[serde(flatten)]
    pub backend: AgentBackend,
}

/// Everything one experiment needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub topology: TopologyKind,
    #[serde(default)]
    pub temporal: TemporalTopology,
    pub agents: Vec<AgentSpec>,
    pub dialogue: DialogueConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub queries: QuerySource,
    /// Queries used for mask training before the one-shot prune (`Q'`).
    pub train_queries: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub attack: AttackMode,
    #[serde(default)]
    pub prices: Option<Prices>,
}

fn default_name() -> String {
    "experiment".to_string()
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::Config("at least one agent is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.dialogue.validate()?;
        Ok(())
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }
}

/// Parse an experiment config from TOML text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&fs::read_to_string(path)?)
}

/// Materialize the query set. File paths resolve relative to `base_dir`.
pub fn load_queries(source: &QuerySource, base_dir: &Path) -> Result<Vec<QueryRecord>> {
    match source {
        QuerySource::Synthetic { count, choices, seed } => {
            Ok(synthetic_queries(*count, *choices, *seed))
        }
        QuerySource::File { path } => {
            let full = base_dir.join(path);
            let text = fs::read_to_string(&full)?;
            read_queries_jsonl(&text)
        }
    }
}

/// Parse line-delimited query records.
pub fn read_queries_jsonl(text: &str) -> Result<Vec<QueryRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn queries_to_jsonl(queries: &[QueryRecord]) -> String {
    let mut out = String::new();
    for q in queries {
        out.push_str(&serde_json::to_string(q).expect("query serialization"));
        out.push('\n');
    }
    out
}

/// Generate labeled multiple-choice tasks. The correct label lives only in
/// the record, never in the question text, so only label-aware oracles can
/// answer without peer help.
pub fn synthetic_queries(count: usize, choices: usize, seed: u64) -> Vec<QueryRecord> {
    let alphabet: Vec<String> = (0..choices.clamp(2, 26))
        .map(|i| char::from(b'A' + i as u8).to_string())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5EED));
    (0..count)
        .map(|i| {
            let label = alphabet[rng.random_range(0..alphabet.len())].clone();
            QueryRecord::new(
                format!("synthetic-{i}"),
                format!(
                    "Task {i}: exactly one of the options {} is correct. State your choice.",
                    alphabet.join("/")
                ),
            )
            .with_label(label, alphabet.clone())
        })
        .collect()
}

/// Instantiate agents from the config. When an attack mode is set, one
/// agent chosen uniformly by the seed is wrapped. Returns the team and the
/// attacked agent id, if any.
pub fn build_agents(cfg: &ExperimentConfig, seed: u64) -> Result<(Vec<Agent>, Option<usize>)> {
    let roles = crate::agents::builtin_roles();
    let mut agents = Vec::with_capacity(cfg.agents.len());
    for (id, spec) in cfg.agents.iter().enumerate() {
        let role = roles
            .get(&spec.role)
            .cloned()
            .or_else(|| RoleProfile::new(spec.role.clone(), spec.role.clone()).ok())
            .ok_or_else(|| Error::Config(format!("unknown role '{}'", spec.role)))?;
        let agent_seed = mix_seed(seed, 0xA6E17 + id as u64);
        let agent = match &spec.backend {
            AgentBackend::Scripted { behavior } => {
                Agent::scripted(id, role, behavior.clone(), agent_seed)
            }
            AgentBackend::Http { endpoint } => {
                let mut endpoint = endpoint.clone();
                if let Ok(token) = std::env::var(AUTH_TOKEN_ENV) {
                    endpoint.auth_token = Some(token);
                }
                Agent::http(id, role, endpoint, agent_seed)
            }
        };
        agents.push(agent);
    }
    let attacked = match cfg.attack {
        AttackMode::None => None,
        mode => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xA77AC));
            let target = rng.random_range(0..agents.len());
            let victim = agents.remove(target);
            let wrapped = match mode {
                AttackMode::Prompt => victim.wrap_prompt_attack(),
                AttackMode::Replacement => victim.wrap_replacement_attack(),
                AttackMode::None => unreachable!(),
            };
            agents.insert(target, wrapped);
            Some(target)
        }
    };
    Ok((agents, attacked))
}

/// Build the communication graph implied by the config: the chosen spatial
/// topology plus the fully connected temporal topology.
pub fn build_graph(cfg: &ExperimentConfig) -> Result<CommGraph> {
    let n = cfg.agent_count();
    let spatial = build_spatial(&cfg.topology, n)?;
    let temporal = cfg.temporal.build(n);
    let nodes: Vec<AgentNode> = cfg
        .agents
        .iter()
        .enumerate()
        .map(|(id, spec)| {
            let base = match &spec.backend {
                AgentBackend::Scripted { .. } => "scripted",
                AgentBackend::Http { endpoint } => endpoint.model.as_str(),
            };
            AgentNode::new(id, base, spec.role.clone())
        })
        .collect();
    build_comm_graph(nodes, &spatial.edges(), &temporal.edges())
}

/// One query's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub id: String,
    pub phase: String,
    pub answer: String,
    pub correct: Option<bool>,
}

fn accuracy(results: &[QueryResult]) -> Option<f64> {
    let labeled: Vec<bool> = results.iter().filter_map(|r| r.correct).collect();
    if labeled.is_empty() {
        return None;
    }
    Some(labeled.iter().filter(|&&c| c).count() as f64 / labeled.len() as f64)
}

/// Output of a multi-query run.
#[derive(Debug, Clone)]
pub struct MultiQueryOutcome {
    pub results: Vec<QueryResult>,
    pub train_accuracy: Option<f64>,
    pub holdout_accuracy: Option<f64>,
    pub ledger_train: TokenLedger,
    pub ledger_holdout: TokenLedger,
    pub trace: Vec<TraceEvent>,
    pub mask: EdgeMask,
    pub binary: BinaryMask,
    pub subgraph: CommGraph,
    pub attacked_agent: Option<usize>,
}

impl MultiQueryOutcome {
    pub fn ledger_total(&self) -> TokenLedger {
        let mut total = self.ledger_train.clone();
        total.merge(&self.ledger_holdout);
        total
    }
}

/// Query-level training: optimize the masks on the first `Q'` queries,
/// one-shot prune into `G^sub`, then answer the remaining queries on the
/// fixed subgraph. Agent state resets between queries; masks persist
/// across the whole training phase.
pub fn run_multi_query(
    cfg: &ExperimentConfig,
    queries: &[QueryRecord],
    seed: u64,
) -> Result<MultiQueryOutcome> {
    cfg.validate()?;
    let q_prime = cfg.train_queries;
    if queries.len() < q_prime {
        return Err(Error::InsufficientQueries {
            needed: q_prime,
            got: queries.len(),
        });
    }
    let graph = build_graph(cfg)?;
    let (mut agents, attacked_agent) = build_agents(cfg, seed)?;
    let tokenizer = WhitespaceTokenizer;
    let evaluator = LabelMatch;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xD1A106));

    let mut mask = init_masks(&graph.spatial_adj, &graph.temporal_adj, DEFAULT_INIT)?;
    let mut trace = Vec::new();
    let mut ledger_train = TokenLedger::new();
    let mut results = Vec::with_capacity(queries.len());

    for query in &queries[..q_prime] {
        for agent in agents.iter_mut() {
            agent.reset_state();
        }
        let mut prior: Option<RoundState> = None;
        let mut answer = String::new();
        for round_index in 1..=cfg.dialogue.rounds {
            let (state, round_answer) = run_optimizing_round(
                &mut agents,
                query,
                round_index,
                &mut mask,
                &cfg.optimizer,
                prior.as_ref(),
                cfg.dialogue.aggregation,
                &evaluator,
                &mut rng,
                &tokenizer,
                &mut trace,
                &mut ledger_train,
            )?;
            answer = round_answer;
            prior = Some(state);
        }
        results.push(QueryResult {
            id: query.id.clone(),
            phase: "train".into(),
            correct: query
                .label
                .as_ref()
                .map(|_| evaluator.score(&answer, query).map(|s| s == 1.0))
                .transpose()?,
            answer,
        });
    }

    let binary = prune_masks(&mask, cfg.dialogue.prune_ratio)?;
    let subgraph = apply_binary_masks(&graph, &binary.spatial, &binary.temporal)?;
    trace.push(TraceEvent::PrunedGraph {
        spatial_edges: subgraph.spatial_adj.edges(),
        temporal_edges: subgraph.temporal_adj.edges(),
        prune_ratio: cfg.dialogue.prune_ratio,
    });

    // The held-out phase deploys a fresh instance of the same team (same
    // seeds, same attacked slot), so a sweep over the full topology with
    // the same seed consumes identical random streams and differs only
    // through the graph structure.
    let (mut agents, _) = build_agents(cfg, seed)?;
    let mut ledger_holdout = TokenLedger::new();
    for query in &queries[q_prime..] {
        for agent in agents.iter_mut() {
            agent.reset_state();
        }
        let outcome = run_fixed_dialogue(
            &mut agents,
            query,
            &subgraph.spatial_adj,
            &subgraph.temporal_adj,
            cfg.dialogue.rounds,
            cfg.dialogue.aggregation,
            cfg.dialogue.stop_on_consensus,
            &mut rng,
            &tokenizer,
            &mut trace,
            &mut ledger_holdout,
        )?;
        results.push(QueryResult {
            id: query.id.clone(),
            phase: "holdout".into(),
            correct: query
                .label
                .as_ref()
                .map(|_| evaluator.score(&outcome.answer, query).map(|s| s == 1.0))
                .transpose()?,
            answer: outcome.answer,
        });
    }

    let train: Vec<QueryResult> =
        results.iter().filter(|r| r.phase == "train").cloned().collect();
    let holdout: Vec<QueryResult> =
        results.iter().filter(|r| r.phase == "holdout").cloned().collect();
    Ok(MultiQueryOutcome {
        train_accuracy: accuracy(&train),
        holdout_accuracy: accuracy(&holdout),
        results,
        ledger_train,
        ledger_holdout,
        trace,
        mask,
        binary,
        subgraph,
        attacked_agent,
    })
}

/// Evaluate mean accuracy of the config's team over the query set on a
/// fixed pair of adjacency matrices.
#[allow(clippy::too_many_arguments)]
fn evaluate_on_structure(
    cfg: &ExperimentConfig,
    spatial: &AdjacencyMatrix,
    temporal: &AdjacencyMatrix,
    queries: &[QueryRecord],
    agent_seed: u64,
    run_seed: u64,
) -> Result<(Option<f64>, Vec<QueryResult>, TokenLedger)> {
    let (mut agents, _) = build_agents(cfg, agent_seed)?;
    let tokenizer = WhitespaceTokenizer;
    let evaluator = LabelMatch;
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    let mut ledger = TokenLedger::new();
    let mut trace = Vec::new();
    let mut results = Vec::with_capacity(queries.len());
    for query in queries {
        for agent in agents.iter_mut() {
            agent.reset_state();
        }
        let outcome = run_fixed_dialogue(
            &mut agents,
            query,
            spatial,
            temporal,
            cfg.dialogue.rounds,
            cfg.dialogue.aggregation,
            cfg.dialogue.stop_on_consensus,
            &mut rng,
            &tokenizer,
            &mut trace,
            &mut ledger,
        )?;
        results.push(QueryResult {
            id: query.id.clone(),
            phase: "eval".into(),
            correct: query
                .label
                .as_ref()
                .map(|_| evaluator.score(&outcome.answer, query).map(|s| s == 1.0))
                .transpose()?,
            answer: outcome.answer,
        });
    }
    Ok((accuracy(&results), results, ledger))
}

/// Redundancy probe settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyProbeConfig {
    pub ratios: Vec<f64>,
    pub trials: usize,
    /// Allowable utility variation when flagging a ratio as a redundancy
    /// witness.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_epsilon() -> f64 {
    0.01
}

impl RedundancyProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.ratios.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("ratios must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One row of the probe curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub ratio: f64,
    pub mean_utility: f64,
    pub std_utility: f64,
    pub trials: usize,
    /// Mean utility at this ratio is within epsilon of (or above) the
    /// unpruned mean: a witness that a sparser subgraph matches the full
    /// graph.
    pub witness: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub baseline_utility: f64,
    pub rows: Vec<ProbeRow>,
    pub seed: u64,
}

/// Exact removal count `floor(ratio * edges)`, nudged so decimal ratios
/// hit the rational value.
fn removal_count(edges: usize, ratio: f64) -> usize {
    ((edges as f64 * ratio) + 1e-9).floor() as usize
}

fn remove_random_edges(
    adj: &AdjacencyMatrix,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> AdjacencyMatrix {
    let mut edges = adj.edges();
    // Partial Fisher-Yates: the first `count` entries are a uniform
    // without-replacement sample.
    for i in 0..count.min(edges.len()) {
        let j = rng.random_range(i..edges.len());
        edges.swap(i, j);
    }
    let mut out = adj.clone();
    for &(s, d) in edges.iter().take(count.min(edges.len())) {
        out.set(s, d, false);
    }
    out
}

/// Randomly remove a fraction of spatial and temporal edges (independently,
/// without replacement) and measure utility over the query set, repeating
/// `trials` times per ratio.
pub fn redundancy_probe(
    cfg: &ExperimentConfig,
    probe: &RedundancyProbeConfig,
    queries: &[QueryRecord],
    seed: u64,
) -> Result<ProbeOutcome> {
    cfg.validate()?;
    probe.validate()?;
    let graph = build_graph(cfg)?;

    let utility_of = |spatial: &AdjacencyMatrix,
                      temporal: &AdjacencyMatrix,
                      trial: usize|
     -> Result<f64> {
        let agent_seed = mix_seed(seed, 0x7E5 + trial as u64);
        let run_seed = mix_seed(seed, 0x90B0 + trial as u64);
        let (acc, _, _) = evaluate_on_structure(cfg, spatial, temporal, queries, agent_seed, run_seed)?;
        acc.ok_or_else(|| Error::Config("probe queries must be labeled".into()))
    };

    let mut baseline_sum = 0.0;
    for trial in 0..probe.trials {
        baseline_sum += utility_of(&graph.spatial_adj, &graph.temporal_adj, trial)?;
    }
    let baseline_utility = baseline_sum / probe.trials as f64;

    let mut rows = Vec::with_capacity(probe.ratios.len());
    for (ratio_idx, &ratio) in probe.ratios.iter().enumerate() {
        let spatial_remove = removal_count(graph.spatial_adj.count_ones(), ratio);
        let temporal_remove = removal_count(graph.temporal_adj.count_ones(), ratio);
        let mut utilities = Vec::with_capacity(probe.trials);
        for trial in 0..probe.trials {
            let mut removal_rng = ChaCha8Rng::seed_from_u64(mix_seed(
                seed,
                0xCC7 + (ratio_idx as u64) * 10_007 + trial as u64,
            ));
            let spatial = remove_random_edges(&graph.spatial_adj, spatial_remove, &mut removal_rng);
            let temporal =
                remove_random_edges(&graph.temporal_adj, temporal_remove, &mut removal_rng);
            utilities.push(utility_of(&spatial, &temporal, trial)?);
        }
        let mean = utilities.iter().sum::<f64>() / utilities.len() as f64;
        let var = utilities.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>()
            / utilities.len() as f64;
        rows.push(ProbeRow {
            ratio,
            mean_utility: mean,
            std_utility: var.sqrt(),
            trials: probe.trials,
            witness: mean >= baseline_utility - probe.epsilon,
        });
    }
    Ok(ProbeOutcome {
        baseline_utility,
        rows,
        seed,
    })
}

/// Per-seed paired attack measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSeedResult {
    pub seed: u64,
    pub attacked_agent: Option<usize>,
    pub vanilla_holdout_accuracy: Option<f64>,
    pub pruned_holdout_accuracy: Option<f64>,
    /// Attacked agent's spatial+temporal out-degree in the predefined
    /// topology and in the pruned subgraph.
    pub attacked_out_edges_before: usize,
    pub attacked_out_edges_after: usize,
    pub vanilla_results: Vec<QueryResult>,
    pub pruned_results: Vec<QueryResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub mode: AttackMode,
    pub per_seed: Vec<AttackSeedResult>,
}

/// Run the attacked vanilla pipeline and the attacked optimize-prune
/// pipeline on identical seeds and queries, and report paired held-out
/// accuracies plus how many of the attacked agent's out-edges survive
/// pruning.
pub fn attack_experiment(cfg: &ExperimentConfig, queries: &[QueryRecord]) -> Result<AttackOutcome> {
    cfg.validate()?;
    let graph = build_graph(cfg)?;
    let holdout = &queries[cfg.train_queries.min(queries.len())..];
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let pipeline = run_multi_query(cfg, queries, seed)?;
        let (vanilla_accuracy, vanilla_results, _) = evaluate_on_structure(
            cfg,
            &graph.spatial_adj,
            &graph.temporal_adj,
            holdout,
            seed,
            mix_seed(seed, 0x7A21),
        )?;
        let (before, after) = match pipeline.attacked_agent {
            Some(v) => (
                graph.spatial_adj.out_degree(v) + graph.temporal_adj.out_degree(v),
                pipeline.subgraph.spatial_adj.out_degree(v)
                    + pipeline.subgraph.temporal_adj.out_degree(v),
            ),
            None => (0, 0),
        };
        per_seed.push(AttackSeedResult {
            seed,
            attacked_agent: pipeline.attacked_agent,
            vanilla_holdout_accuracy: vanilla_accuracy,
            pruned_holdout_accuracy: pipeline.holdout_accuracy,
            attacked_out_edges_before: before,
            attacked_out_edges_after: after,
            vanilla_results,
            pruned_results: pipeline
                .results
                .into_iter()
                .filter(|r| r.phase == "holdout")
                .collect(),
        });
    }
    Ok(AttackOutcome {
        mode: cfg.attack,
        per_seed,
    })
}

// ---------------------------------------------------------------------
// Result writers. All output is byte-deterministic.
// ---------------------------------------------------------------------

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn csv_error(e: impl std::fmt::Display) -> Error {
    Error::Serialization(e.to_string())
}

pub fn results_to_csv(results: &[QueryResult]) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["query_id", "phase", "answer", "correct"])
        .map_err(csv_error)?;
    for r in results {
        let correct = r.correct.map_or(String::new(), |c| c.to_string());
        wtr.write_record([
            r.id.clone(),
            r.phase.clone(),
            r.answer.replace('\n', "\\n"),
            correct,
        ])
        .map_err(csv_error)?;
    }
    String::from_utf8(wtr.into_inner().map_err(csv_error)?).map_err(csv_error)
}

pub fn probe_to_csv(outcome: &ProbeOutcome) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["ratio", "mean_utility", "std_utility", "trials", "witness", "baseline"])
        .map_err(csv_error)?;
    for row in &outcome.rows {
        wtr.write_record([
            format!("{}", row.ratio),
            format!("{:.6}", row.mean_utility),
            format!("{:.6}", row.std_utility),
            row.trials.to_string(),
            row.witness.to_string(),
            format!("{:.6}", outcome.baseline_utility),
        ])
        .map_err(csv_error)?;
    }
    String::from_utf8(wtr.into_inner().map_err(csv_error)?).map_err(csv_error)
}

pub fn attack_to_csv(outcome: &AttackOutcome) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record([
        "seed",
        "attacked_agent",
        "vanilla_holdout_accuracy",
        "pruned_holdout_accuracy",
        "attacked_out_edges_before",
        "attacked_out_edges_after",
    ])
    .map_err(csv_error)?;
    for row in &outcome.per_seed {
        wtr.write_record([
            row.seed.to_string(),
            row.attacked_agent.map_or(String::new(), |v| v.to_string()),
            row.vanilla_holdout_accuracy
                .map_or(String::new(), |a| format!("{a:.6}")),
            row.pruned_holdout_accuracy
                .map_or(String::new(), |a| format!("{a:.6}")),
            row.attacked_out_edges_before.to_string(),
            row.attacked_out_edges_after.to_string(),
        ])
        .map_err(csv_error)?;
    }
    String::from_utf8(wtr.into_inner().map_err(csv_error)?).map_err(csv_error)
}

/// Summary document for one multi-query run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    pub train_accuracy: Option<f64>,
    pub holdout_accuracy: Option<f64>,
    pub attacked_agent: Option<usize>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub subgraph_spatial_edges: usize,
    pub subgraph_temporal_edges: usize,
}

/// Persist a multi-query run: per-query results, accuracy summary, trace,
/// ledgers, mask checkpoint, and the pruned graph.
pub fn write_multi_query_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    outcome: &MultiQueryOutcome,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    let total = outcome.ledger_total();
    let summary = RunSummary {
        name: cfg.name.clone(),
        seed,
        train_accuracy: outcome.train_accuracy,
        holdout_accuracy: outcome.holdout_accuracy,
        attacked_agent: outcome.attacked_agent,
        prompt_tokens: total.prompt_total(),
        completion_tokens: total.completion_total(),
        subgraph_spatial_edges: outcome.subgraph.spatial_adj.count_ones(),
        subgraph_temporal_edges: outcome.subgraph.temporal_adj.count_ones(),
    };
    let files = vec![
        write_file(dir, "results.csv", &results_to_csv(&outcome.results)?)?,
        write_file(
            dir,
            "summary.json",
            &serde_json::to_string_pretty(&summary).map_err(Error::from)?,
        )?,
        write_file(dir, "trace.jsonl", &crate::exec::trace_to_jsonl(&outcome.trace))?,
        write_file(dir, "ledger_train.json", &outcome.ledger_train.to_json())?,
        write_file(dir, "ledger_holdout.json", &outcome.ledger_holdout.to_json())?,
        write_file(dir, "mask.json", &save_checkpoint(&outcome.mask, Some(&cfg.optimizer)))?,
        write_file(
            dir,
            "binary_mask.json",
            &serde_json::to_string_pretty(&outcome.binary).map_err(Error::from)?,
        )?,
        write_file(dir, "subgraph.json", &outcome.subgraph.save())?,
    ];
    Ok(files)
}

/// Compare two result directories byte for byte over the given file names.
pub fn dirs_identical(a: &Path, b: &Path, names: &[&str]) -> Result<bool> {
    for name in names {
        let fa = fs::read(a.join(name))?;
        let fb = fs::read(b.join(name))?;
        if fa != fb {
            return Ok(false);
        }
    }
    Ok(true)
}

pub const MULTI_QUERY_FILES: &[&str] = &[
    "results.csv",
    "summary.json",
    "trace.jsonl",
    "ledger_train.json",
    "ledger_holdout.json",
    "mask.json",
    "binary_mask.json",
    "subgraph.json",
];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::ScriptedBehavior;
    use crate::exec::Aggregation;
    use crate::mask::LikelihoodMode;

    fn oracle_spec(accuracy: f64) -> AgentSpec {
        AgentSpec {
            role: "knowledge-expert".into(),
            backend: AgentBackend::Scripted {
                behavior: ScriptedBehavior::NoisyOracle { accuracy },
            },
        }
    }

    fn follower_spec() -> AgentSpec {
        AgentSpec {
            role: "critic".into(),
            backend: AgentBackend::Scripted {
                behavior: ScriptedBehavior::MajorityOfInputs,
            },
        }
    }

    fn small_config() -> ExperimentConfig {
        ExperimentConfig {
            name: "unit".into(),
            topology: TopologyKind::Complete,
            temporal: TemporalTopology::Full,
            agents: vec![oracle_spec(0.9), oracle_spec(0.8), follower_spec(), follower_spec()],
            dialogue: DialogueConfig {
                rounds: 1,
                optimize_rounds: 1,
                prune_ratio: 0.3,
                aggregation: Aggregation::MajorityVote,
                stop_on_consensus: false,
            },
            optimizer: crate::mask::OptimizerConfig {
                learning_rate: 0.15,
                rollouts: 2,
                lambda_nuclear: 0.05,
                delta: None,
                likelihood_mode: LikelihoodMode::FullBernoulli,
                use_baseline: true,
                seed: 0,
            },
            queries: QuerySource::Synthetic { count: 12, choices: 4, seed: 5 },
            train_queries: 4,
            seeds: vec![1, 2],
            attack: AttackMode::None,
            prices: None,
        }
    }

    #[test]
    fn synthetic_queries_are_deterministic_and_labeled() {
        let a = synthetic_queries(20, 4, 7);
        let b = synthetic_queries(20, 4, 7);
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        for q in &a {
            let label = q.label.as_ref().unwrap();
            assert!(q.choices.contains(label));
            assert_eq!(q.choices.len(), 4);
            // The answer never leaks into the question text.
            assert!(!q.text.contains(&format!("answer is {label}")));
        }
        let c = synthetic_queries(20, 4, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn queries_round_trip_through_jsonl() {
        let queries = synthetic_queries(5, 3, 1);
        let text = queries_to_jsonl(&queries);
        let back = read_queries_jsonl(&text).unwrap();
        assert_eq!(back, queries);
    }

    #[test]
    fn config_parses_from_toml() {
        let text = r#"
            name = "demo"
            train_queries = 4
            seeds = [1, 2, 3]
            attack = "prompt"

            [topology]
            kind = "complete"

            [dialogue]
            rounds = 2
            optimize_rounds = 1
            prune_ratio = 0.3
            aggregation = "majority-vote"
            stop_on_consensus = false

            [optimizer]
            learning_rate = 0.2
            rollouts = 4
            lambda_nuclear = 0.1
            likelihood_mode = "full-bernoulli"
            use_baseline = true
            seed = 0

            [queries]
            source = "synthetic"
            count = 40
            choices = 4
            seed = 11

            [[agents]]
            role = "knowledge-expert"
            backend = "scripted"
            behavior = { tag = "noisy-oracle", accuracy = 0.9 }

            [[agents]]
            role = "critic"
            backend = "scripted"
            behavior = { tag = "majority-of-inputs" }

            [[agents]]
            role = "critic"
            backend = "scripted"
            behavior = { tag = "majority-of-inputs" }
        "#;
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.name, "demo");
        assert_eq!(cfg.agent_count(), 3);
        assert_eq!(cfg.attack, AttackMode::Prompt);
        assert_eq!(cfg.optimizer.rollouts, 4);
        assert!(matches!(cfg.queries, QuerySource::Synthetic { count: 40, .. }));
    }

    #[test]
    fn multi_query_run_is_deterministic() {
        let cfg = small_config();
        let queries = synthetic_queries(12, 4, 5);
        let a = run_multi_query(&cfg, &queries, 42).unwrap();
        let b = run_multi_query(&cfg, &queries, 42).unwrap();
        assert_eq!(a.results, b.results);
        assert_eq!(a.subgraph, b.subgraph);
        assert_eq!(
            crate::exec::trace_to_jsonl(&a.trace),
            crate::exec::trace_to_jsonl(&b.trace)
        );
        let c = run_multi_query(&cfg, &queries, 43).unwrap();
        assert!(a.results != c.results || a.subgraph != c.subgraph);
    }

    #[test]
    fn multi_query_without_training_equals_a_vanilla_sweep() {
        let mut cfg = small_config();
        cfg.train_queries = 0;
        cfg.dialogue.prune_ratio = 0.0;
        let queries = synthetic_queries(10, 4, 9);
        let outcome = run_multi_query(&cfg, &queries, 7).unwrap();
        // Pruning at ratio zero keeps the full predefined topology.
        let graph = build_graph(&cfg).unwrap();
        assert_eq!(outcome.subgraph, graph);

        // A hand-rolled sweep over the same graph with the same seeds
        // produces identical answers.
        let (accuracy, results, _) = evaluate_on_structure(
            &cfg,
            &graph.spatial_adj,
            &graph.temporal_adj,
            &queries,
            7,
            mix_seed(7, 0xD1A106),
        )
        .unwrap();
        let sweep_answers: Vec<&str> = results.iter().map(|r| r.answer.as_str()).collect();
        let run_answers: Vec<&str> = outcome.results.iter().map(|r| r.answer.as_str()).collect();
        assert_eq!(run_answers, sweep_answers);
        assert_eq!(outcome.holdout_accuracy, accuracy);
    }

    #[test]
    fn multi_query_rejects_short_query_sets() {
        let cfg = small_config();
        let queries = synthetic_queries(2, 4, 5);
        assert!(matches!(
            run_multi_query(&cfg, &queries, 1),
            Err(Error::InsufficientQueries { needed: 4, got: 2 })
        ));
    }

    #[test]
    fn probe_rows_match_requested_shape_and_ratio_zero_is_baseline() {
        let cfg = small_config();
        let probe = RedundancyProbeConfig {
            ratios: vec![0.0, 0.2],
            trials: 3,
            epsilon: 0.01,
        };
        let queries = synthetic_queries(8, 4, 3);
        let outcome = redundancy_probe(&cfg, &probe, &queries, 5).unwrap();
        assert_eq!(outcome.rows.len(), 2);
        for row in &outcome.rows {
            assert_eq!(row.trials, 3);
        }
        assert_eq!(outcome.rows[0].ratio, 0.0);
        assert!((outcome.rows[0].mean_utility - outcome.baseline_utility).abs() < 1e-12);
        assert!(outcome.rows[0].witness);
    }

    #[test]
    fn probe_removal_counts_are_exact() {
        assert_eq!(removal_count(10, 0.0), 0);
        assert_eq!(removal_count(10, 0.3), 3);
        assert_eq!(removal_count(10, 0.7), 7);
        assert_eq!(removal_count(15, 0.1), 1);
        assert_eq!(removal_count(36, 0.3), 10);
    }

    #[test]
    fn removed_edges_are_sampled_without_replacement() {
        let adj = AdjacencyMatrix::ones(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for count in [0usize, 1, 5, 16] {
            let out = remove_random_edges(&adj, count, &mut rng);
            assert_eq!(out.count_ones(), 16 - count);
        }
    }

    #[test]
    fn attack_wraps_exactly_one_agent_and_leaves_peers_untouched() {
        let mut cfg = small_config();
        cfg.attack = AttackMode::Prompt;
        let (attacked_team, target) = build_agents(&cfg, 5).unwrap();
        let target = target.unwrap();
        let (clean_team, _) = build_agents(
            &ExperimentConfig { attack: AttackMode::None, ..cfg.clone() },
            5,
        )
        .unwrap();
        for (a, c) in attacked_team.iter().zip(&clean_team) {
            if a.id == target {
                assert_eq!(a.attack(), Some(crate::agents::AttackKind::Prompt));
                assert_eq!(a.role.name, "liar");
            } else {
                assert_eq!(a.attack(), None);
                assert_eq!(a.role, c.role);
                assert_eq!(a.backend, c.backend);
            }
        }

        // The wrapped agent still emits schema-complete messages, so the
        // trace of an attacked run stays auditable.
        let outcome = run_multi_query(&cfg, &synthetic_queries(6, 4, 2), 5).unwrap();
        let mut saw_attacked_message = false;
        for event in &outcome.trace {
            if let TraceEvent::Message(m) = event {
                if m.sender == Some(target) {
                    saw_attacked_message = true;
                    assert!(m.round >= 1);
                    assert!(m.token_count > 0);
                }
            }
        }
        assert!(saw_attacked_message);
    }

    #[test]
    fn attack_rows_pair_the_same_queries() {
        let mut cfg = small_config();
        cfg.attack = AttackMode::Prompt;
        cfg.seeds = vec![3];
        let queries = synthetic_queries(10, 4, 2);
        let outcome = attack_experiment(&cfg, &queries).unwrap();
        assert_eq!(outcome.per_seed.len(), 1);
        let row = &outcome.per_seed[0];
        assert!(row.attacked_agent.is_some());
        let vanilla_ids: Vec<&str> = row.vanilla_results.iter().map(|r| r.id.as_str()).collect();
        let pruned_ids: Vec<&str> = row.pruned_results.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(vanilla_ids, pruned_ids);
        assert!(row.attacked_out_edges_before > 0);
    }

    #[test]
    fn unattacked_arms_match_their_baselines() {
        let mut cfg = small_config();
        cfg.attack = AttackMode::None;
        cfg.seeds = vec![11];
        let queries = synthetic_queries(8, 4, 6);
        let outcome = attack_experiment(&cfg, &queries).unwrap();
        let row = &outcome.per_seed[0];
        assert_eq!(row.attacked_agent, None);
        // With no attack, the "attacked vanilla" arm IS the unattacked
        // vanilla sweep over the holdout split.
        let graph = build_graph(&cfg).unwrap();
        let (acc, _, _) = evaluate_on_structure(
            &cfg,
            &graph.spatial_adj,
            &graph.temporal_adj,
            &queries[cfg.train_queries..],
            11,
            mix_seed(11, 0x7A21),
        )
        .unwrap();
        assert_eq!(row.vanilla_holdout_accuracy, acc);
    }

    #[test]
    fn outputs_are_byte_identical_across_reruns() {
        let cfg = small_config();
        let queries = synthetic_queries(12, 4, 5);
        let tmp = tempfile::tempdir().unwrap();
        let dir_a = tmp.path().join("a");
        let dir_b = tmp.path().join("b");
        let out_a = run_multi_query(&cfg, &queries, 9).unwrap();
        write_multi_query_outputs(&dir_a, &cfg, &out_a, 9).unwrap();
        let out_b = run_multi_query(&cfg, &queries, 9).unwrap();
        write_multi_query_outputs(&dir_b, &cfg, &out_b, 9).unwrap();
        assert!(dirs_identical(&dir_a, &dir_b, MULTI_QUERY_FILES).unwrap());
    }
}
