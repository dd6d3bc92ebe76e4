//! Communication-graph pruning for multi-agent pipelines.
//!
//! Models a round-based multi-agent system as a spatial-temporal
//! communication graph, trains real-valued edge masks with a score-function
//! policy gradient under nuclear-norm regularization, one-shot prunes the
//! masks into a fixed sparse topology, and accounts token costs along the
//! way. Deterministic scripted agent backends make every experiment
//! replayable end to end; an HTTP chat-completion backend plugs in real
//! models behind the same interface.
//!
//! ```
//! use commprune_core::agents::{role_by_name, Agent, ScriptedBehavior};
//! use commprune_core::exec::{run_dialogue, DialogueConfig, LabelMatch};
//! use commprune_core::graph::{build_comm_graph, AgentNode};
//! use commprune_core::mask::OptimizerConfig;
//! use commprune_core::message::{QueryRecord, WhitespaceTokenizer};
//! use commprune_core::topology::{build_spatial, build_temporal_full, TopologyKind};
//! use rand::SeedableRng;
//!
//! // Three agents on a complete spatial topology with debate-style
//! // temporal edges: two experts and one follower that votes with its
//! // peers.
//! let n = 3;
//! let spatial = build_spatial(&TopologyKind::Complete, n)?;
//! let temporal = build_temporal_full(n);
//! let nodes: Vec<AgentNode> =
//!     (0..n).map(|i| AgentNode::new(i, "scripted", "critic")).collect();
//! let graph = build_comm_graph(nodes, &spatial.edges(), &temporal.edges())?;
//!
//! let role = role_by_name("critic").unwrap();
//! let mut agents: Vec<Agent> = vec![
//!     Agent::scripted(0, role.clone(), ScriptedBehavior::NoisyOracle { accuracy: 0.9 }, 1),
//!     Agent::scripted(1, role.clone(), ScriptedBehavior::NoisyOracle { accuracy: 0.9 }, 2),
//!     Agent::scripted(2, role, ScriptedBehavior::MajorityOfInputs, 3),
//! ];
//!
//! // Two rounds: one optimizing the masks, then one-shot pruning at 0.5,
//! // then a final round on the fixed subgraph.
//! let cfg = DialogueConfig {
//!     rounds: 2,
//!     optimize_rounds: 1,
//!     prune_ratio: 0.5,
//!     ..DialogueConfig::default()
//! };
//! let query = QueryRecord::new("q0", "pick the right option")
//!     .with_label("B", vec!["A".into(), "B".into(), "C".into(), "D".into()]);
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
//! let outcome = run_dialogue(
//!     &cfg,
//!     &graph,
//!     &mut agents,
//!     &query,
//!     &OptimizerConfig::default(),
//!     Some(&LabelMatch),
//!     &mut rng,
//!     &WhitespaceTokenizer,
//! )?;
//!
//! assert_eq!(outcome.rounds_run, 2);
//! // Pruning kept ceil(3 * 0.5) = 2 spatial and ceil(9 * 0.5) = 5
//! // temporal edges.
//! assert_eq!(outcome.subgraph.spatial_adj.count_ones(), 2);
//! assert_eq!(outcome.subgraph.temporal_adj.count_ones(), 5);
//! assert!(outcome.ledger.prompt_total() > 0);
//! # Ok::<(), commprune_core::Error>(())
//! ```

pub mod agents;
pub mod cost;
pub mod error;
pub mod exec;
pub mod graph;
pub mod harness;
pub mod mask;
pub mod message;
pub mod prune;
pub mod topology;

pub use error::{Error, Result};
