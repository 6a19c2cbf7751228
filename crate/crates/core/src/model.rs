//! A complete graph-to-graph model: token and position embeddings, the
//! relation-conditioned encoder, and the edge scorer, plus the task-specific
//! graph decoder used between refinement iterations.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::attention::{Encoder, G2GConfig};
use crate::decode::{decode_tree, greedy_decode_masked, EdgeScorer, EdgeScores};
use crate::error::{Error, Result};
use crate::graph::{dep_tree_to_graph, LabeledGraph, RelationVocab, Scheme, NONE};
use crate::numerics::{ParamId, ParamSet, Tape, Tensor, Var, INIT_STD};
use crate::refine::{stage_mask, StageSchedule};

/// What kind of graph the model predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Dependency trees over a virtual root at node 0, decoded with a maximum
    /// spanning arborescence.
    Dependency { single_root: bool },
    /// Lower-triangular two-level graphs (mentions and coreference links),
    /// decoded cell by cell.
    Coreference { schedule: StageSchedule },
}

/// Which cells of the label matrix a task predicts and is scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellScope {
    /// Every cell except the diagonal.
    OffDiagonal,
    /// Cells strictly below the diagonal; the diagonal is always NONE.
    LowerTriangular,
}

impl CellScope {
    pub fn contains(self, i: usize, j: usize) -> bool {
        match self {
            CellScope::OffDiagonal => i != j,
            CellScope::LowerTriangular => j < i,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub encoder: G2GConfig,
    pub d_edge: usize,
    pub task: Task,
    /// Feed graphs back with direction-only relation labels.
    pub unlabeled_input: bool,
}

impl ModelConfig {
    pub fn scope(&self) -> CellScope {
        match self.task {
            Task::Dependency { .. } => CellScope::OffDiagonal,
            Task::Coreference { .. } => CellScope::LowerTriangular,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct G2gtModel {
    pub cfg: ModelConfig,
    pub relations: RelationVocab,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub encoder: Encoder,
    pub scorer: EdgeScorer,
}

impl G2gtModel {
    /// Registers all parameters in `params` with Gaussian initialisation.
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        cfg: ModelConfig,
        relations: RelationVocab,
        rng: &mut R,
    ) -> Result<Self> {
        match (cfg.task, relations.scheme()) {
            (Task::Dependency { .. }, Scheme::LabeledBidirectional)
            | (Task::Coreference { .. }, Scheme::Coreference) => {}
            (task, scheme) => {
                return Err(Error::InvalidArgument(format!(
                    "task {task:?} cannot use relation scheme {scheme:?}"
                )))
            }
        }
        if cfg.vocab_size == 0 || cfg.max_len == 0 {
            return Err(Error::InvalidArgument(
                "vocab_size and max_len must be positive".into(),
            ));
        }
        let d = cfg.encoder.d_model;
        let token_embedding =
            params.add("embed.tokens", Tensor::randn(&[cfg.vocab_size, d], INIT_STD, rng))?;
        let position_embedding =
            params.add("embed.positions", Tensor::randn(&[cfg.max_len, d], INIT_STD, rng))?;
        let encoder = Encoder::init(params, "encoder", cfg.encoder, relations.len(), rng)?;
        let scorer = EdgeScorer::init(params, "edges", d, cfg.d_edge, relations.len(), rng)?;
        Ok(G2gtModel {
            cfg,
            relations,
            token_embedding,
            position_embedding,
            encoder,
            scorer,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.relations.len()
    }

    /// Token plus absolute position embeddings, `n×d`.
    pub fn embed(&self, tape: &mut Tape, params: &ParamSet, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} exceeds max_len {}",
                tokens.len(),
                self.cfg.max_len
            )));
        }
        let te = tape.param(params, self.token_embedding);
        let pe = tape.param(params, self.position_embedding);
        let tok = tape.gather_rows(te, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather_rows(pe, &positions)?;
        tape.add(tok, pos)
    }

    /// The graph as the encoder sees it.
    pub fn input_graph(&self, graph: &LabeledGraph) -> LabeledGraph {
        if self.cfg.unlabeled_input {
            graph.map_labels(|l| self.relations.collapse_direction(l))
        } else {
            graph.clone()
        }
    }

    /// Final encoder states conditioned on `graph`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        tokens: &[usize],
        graph: &LabeledGraph,
    ) -> Result<Var> {
        if graph.n() != tokens.len() {
            return Err(Error::InvalidArgument(format!(
                "graph over {} nodes for {} tokens",
                graph.n(),
                tokens.len()
            )));
        }
        let x = self.embed(tape, params, tokens)?;
        let g = self.input_graph(graph);
        self.encoder.encode(tape, params, x, &g)
    }

    /// Edge scores `n×n×|L|` conditioned on `graph`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        tokens: &[usize],
        graph: &LabeledGraph,
    ) -> Result<Var> {
        let z = self.encode(tape, params, tokens, graph)?;
        self.scorer.score_edges(tape, params, z)
    }

    /// Labels the decoder may emit at `iteration` (1-based).
    pub fn allowed_labels(&self, iteration: usize) -> Result<Vec<bool>> {
        match self.cfg.task {
            Task::Dependency { .. } => stage_mask(iteration, StageSchedule::FullGraph, &self.relations),
            Task::Coreference { schedule } => stage_mask(iteration, schedule, &self.relations),
        }
    }

    /// Turns raw scores into the graph for refinement iteration `iteration`
    /// (1-based).
    pub fn decode(&self, scores: &EdgeScores, iteration: usize) -> Result<LabeledGraph> {
        match self.cfg.task {
            Task::Dependency { single_root } => {
                let tree = decode_tree(&scores.log_normalized(), &self.relations, single_root)?;
                dep_tree_to_graph(&tree, &self.relations)
            }
            Task::Coreference { .. } => {
                let allowed = self.allowed_labels(iteration)?;
                let mut g = greedy_decode_masked(scores, &allowed);
                let n = g.n();
                for i in 0..n {
                    for j in i + 1..n {
                        g.set(i, j, NONE)?;
                    }
                }
                Ok(g)
            }
        }
    }

    /// One encode–score–decode pass.
    pub fn predict(
        &self,
        params: &ParamSet,
        tokens: &[usize],
        graph: &LabeledGraph,
        iteration: usize,
    ) -> Result<LabeledGraph> {
        let mut tape = Tape::new();
        let s = self.forward(&mut tape, params, tokens, graph)?;
        let scores = EdgeScores::from_tensor(tape.value(s))?;
        self.decode(&scores, iteration)
    }
}
