//! Recursive non-autoregressive refinement.
//!
//! Starting from an initial graph `G⁰`, each iteration encodes the tokens
//! conditioned on the previous graph and decodes a complete new graph. The
//! loop stops as soon as a graph repeats or after `t_max` iterations.
//!
//! Training unrolls `t_train` iterations. Each iteration is conditioned on the
//! model's own previous prediction, which is treated as a constant, and the
//! per-iteration negative log-likelihoods are summed.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::decode::EdgeScores;
use crate::error::{Error, Result};
use crate::graph::{graph_equals, LabeledGraph, RelationVocab, Scheme, COREF, MENTION, NONE};
use crate::model::{CellScope, G2gtModel};
use crate::numerics::{softmax_in_place, ParamSet, Tape, Tensor, Var};

/// Score added to labels excluded at a stage. Large enough that their
/// probability underflows to exactly zero.
const MASKED: f64 = -1e30;

/// Which labels each iteration may predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSchedule {
    /// Every label at every iteration.
    FullGraph,
    /// Mentions only at iteration 1; mentions and coreference links after.
    MentionFirst,
}

/// Source of `G⁰`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Initializer {
    Empty,
    External(LabeledGraph),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefinementConfig {
    pub t_max: usize,
    pub t_train: usize,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig { t_max: 3, t_train: 2 }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 || self.t_train == 0 {
            return Err(Error::InvalidArgument(
                "t_max and t_train must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceStep {
    pub iteration: usize,
    pub graph: LabeledGraph,
    /// `graph` equals the previous step's graph.
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefinementTrace {
    pub steps: Vec<TraceStep>,
}

impl RefinementTrace {
    pub fn final_graph(&self) -> &LabeledGraph {
        &self.steps.last().expect("trace holds G0").graph
    }

    /// Iteration at which the graph stopped changing.
    pub fn converged_at(&self) -> Option<usize> {
        self.steps.iter().find(|s| s.converged).map(|s| s.iteration)
    }

    /// Number of prediction passes run.
    pub fn iterations(&self) -> usize {
        self.steps.len() - 1
    }
}

/// One prediction pass given the previous graph.
pub trait GraphPredictor {
    fn node_count(&self) -> usize;
    fn predict(&self, previous: &LabeledGraph, iteration: usize) -> Result<LabeledGraph>;
}

/// A model, its parameters and an input sequence.
#[derive(Debug, Clone, Copy)]
pub struct ModelPredictor<'a> {
    pub model: &'a G2gtModel,
    pub params: &'a ParamSet,
    pub tokens: &'a [usize],
}

impl GraphPredictor for ModelPredictor<'_> {
    fn node_count(&self) -> usize {
        self.tokens.len()
    }

    fn predict(&self, previous: &LabeledGraph, iteration: usize) -> Result<LabeledGraph> {
        self.model.predict(self.params, self.tokens, previous, iteration)
    }
}

/// `G⁰` for `n` nodes.
pub fn initial_graph(n: usize, init: &Initializer, num_labels: usize) -> Result<LabeledGraph> {
    match init {
        Initializer::Empty => Ok(LabeledGraph::empty(n)),
        Initializer::External(g) => {
            if g.n() != n {
                return Err(Error::InvalidArgument(format!(
                    "initial graph over {} nodes for {n} tokens",
                    g.n()
                )));
            }
            LabeledGraph::from_labels(n, g.labels().to_vec(), num_labels)
        }
    }
}

/// Runs up to `cfg.t_max` iterations, stopping early when a prediction equals
/// its input.
pub fn refine<P: GraphPredictor + ?Sized>(
    predictor: &P,
    init: &Initializer,
    num_labels: usize,
    cfg: &RefinementConfig,
) -> Result<(LabeledGraph, RefinementTrace)> {
    cfg.validate()?;
    let n = predictor.node_count();
    if n == 0 {
        return Err(Error::InvalidArgument("refine on an empty input".into()));
    }
    let g0 = initial_graph(n, init, num_labels)?;
    let mut steps = vec![TraceStep {
        iteration: 0,
        graph: g0,
        converged: false,
    }];
    for t in 1..=cfg.t_max {
        let prev = &steps.last().expect("nonempty").graph;
        let next = predictor.predict(prev, t)?;
        let converged = graph_equals(&next, prev)?;
        steps.push(TraceStep {
            iteration: t,
            graph: next,
            converged,
        });
        if converged {
            break;
        }
    }
    let trace = RefinementTrace { steps };
    Ok((trace.final_graph().clone(), trace))
}

/// Labels permitted at iteration `t` (1-based) under `schedule`.
pub fn stage_mask(t: usize, schedule: StageSchedule, vocab: &RelationVocab) -> Result<Vec<bool>> {
    if t == 0 {
        return Err(Error::InvalidArgument("iterations are numbered from 1".into()));
    }
    let mut allowed = vec![true; vocab.len()];
    match schedule {
        StageSchedule::FullGraph => {}
        StageSchedule::MentionFirst => {
            if vocab.scheme() != Scheme::Coreference {
                return Err(Error::InvalidArgument(
                    "mention-first schedule needs the NONE/MENTION/COREF vocabulary".into(),
                ));
            }
            if t == 1 {
                allowed[COREF] = false;
            }
        }
    }
    Ok(allowed)
}

/// Gold labels as visible at a stage: excluded labels become NONE.
pub fn project_gold(gold: &LabeledGraph, allowed: &[bool]) -> LabeledGraph {
    gold.map_labels(|l| if allowed.get(l).copied().unwrap_or(false) { l } else { NONE })
}

/// Independent categorical distributions over the in-scope cells of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredGraphDistribution {
    n: usize,
    num_labels: usize,
    scope: CellScope,
    cells: Vec<Option<Vec<f64>>>,
}

impl FactoredGraphDistribution {
    /// `cells` is row-major `n×n`; `None` marks a cell without a distribution.
    /// Every present cell must have `num_labels` non-negative entries summing
    /// to 1 within 1e-9.
    pub fn new(
        n: usize,
        num_labels: usize,
        scope: CellScope,
        cells: Vec<Option<Vec<f64>>>,
    ) -> Result<Self> {
        if cells.len() != n * n {
            return Err(Error::ShapeMismatch {
                op: "FactoredGraphDistribution",
                left: vec![n, n],
                right: vec![cells.len()],
            });
        }
        for (idx, cell) in cells.iter().enumerate() {
            let Some(p) = cell else { continue };
            if p.len() != num_labels {
                return Err(Error::ShapeMismatch {
                    op: "FactoredGraphDistribution cell",
                    left: vec![num_labels],
                    right: vec![p.len()],
                });
            }
            let total: f64 = p.iter().sum();
            if p.iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "cell ({}, {}) is not a probability distribution",
                    idx / n,
                    idx % n
                )));
            }
        }
        Ok(FactoredGraphDistribution {
            n,
            num_labels,
            scope,
            cells,
        })
    }

    /// Softmax of every in-scope cell, with labels outside `allowed` given
    /// probability zero.
    pub fn from_scores(scores: &EdgeScores, scope: CellScope, allowed: &[bool]) -> Result<Self> {
        let n = scores.n();
        let mut cells = vec![None; n * n];
        for i in 0..n {
            for j in 0..n {
                if !scope.contains(i, j) {
                    continue;
                }
                let mut row: Vec<f64> = scores
                    .cell(i, j)
                    .iter()
                    .enumerate()
                    .map(|(l, &s)| if allowed.get(l).copied().unwrap_or(true) { s } else { f64::NEG_INFINITY })
                    .collect();
                softmax_in_place(&mut row);
                cells[i * n + j] = Some(row);
            }
        }
        Self::new(n, scores.num_labels(), scope, cells)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn scope(&self) -> CellScope {
        self.scope
    }

    pub fn cell(&self, i: usize, j: usize) -> Option<&[f64]> {
        self.cells.get(i * self.n + j).and_then(|c| c.as_deref())
    }
}

/// `Σ log p(g_ij = gold_ij)` over the in-scope cells.
pub fn graph_log_likelihood(dist: &FactoredGraphDistribution, gold: &LabeledGraph) -> Result<f64> {
    if gold.n() != dist.n {
        return Err(Error::ShapeMismatch {
            op: "graph_log_likelihood",
            left: vec![dist.n, dist.n],
            right: vec![gold.n(), gold.n()],
        });
    }
    let mut total = 0.0;
    for i in 0..dist.n {
        for j in 0..dist.n {
            if !dist.scope.contains(i, j) {
                continue;
            }
            let p = dist.cell(i, j).ok_or_else(|| {
                Error::InvalidArgument(format!("no distribution for cell ({i}, {j})"))
            })?;
            let l = gold.get(i, j);
            if l >= dist.num_labels {
                return Err(Error::OutOfRange {
                    what: "label",
                    index: l,
                    bound: dist.num_labels,
                });
            }
            total += libm::log(p[l]);
        }
    }
    Ok(total)
}

/// Negative log-likelihood of `gold` under edge scores `scores` (`n×n×|L|`
/// on the tape), restricted to `allowed` labels and in-scope cells.
pub fn graph_nll(
    tape: &mut Tape,
    scores: Var,
    gold: &LabeledGraph,
    scope: CellScope,
    allowed: &[bool],
) -> Result<Var> {
    let shape = tape.value(scores).shape().to_vec();
    let n = gold.n();
    if shape.len() != 3 || shape[0] != n || shape[1] != n || shape[2] != allowed.len() {
        return Err(Error::ShapeMismatch {
            op: "graph_nll",
            left: shape,
            right: vec![n, n, allowed.len()],
        });
    }
    let num_labels = allowed.len();
    let masked = if allowed.iter().all(|&a| a) {
        scores
    } else {
        let mut mask = Tensor::zeros(&shape);
        for (k, m) in mask.data_mut().iter_mut().enumerate() {
            if !allowed[k % num_labels] {
                *m = MASKED;
            }
        }
        let c = tape.constant(mask);
        tape.add(scores, c)?
    };
    let logp = tape.log_softmax_rows(masked)?;
    let target = project_gold(gold, allowed);
    let mut picks = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if scope.contains(i, j) {
                let l = target.get(i, j);
                if l >= num_labels {
                    return Err(Error::OutOfRange {
                        what: "label",
                        index: l,
                        bound: num_labels,
                    });
                }
                picks.push((i * n + j) * num_labels + l);
            }
        }
    }
    let ll = tape.select_sum(logp, &picks)?;
    Ok(tape.scale(ll, -1.0))
}

/// Builds the unrolled training loss for one example on `tape`: `t_train`
/// iterations from the empty graph, each conditioned on the previous
/// iteration's decoded prediction. Returns the summed loss and the
/// predictions `G¹…Gᵀ`.
pub fn refinement_loss(
    tape: &mut Tape,
    model: &G2gtModel,
    params: &ParamSet,
    tokens: &[usize],
    gold: &LabeledGraph,
    t_train: usize,
) -> Result<(Var, Vec<LabeledGraph>)> {
    if t_train == 0 {
        return Err(Error::InvalidArgument("t_train must be at least 1".into()));
    }
    let scope = model.cfg.scope();
    let mut prev = LabeledGraph::empty(tokens.len());
    let mut total: Option<Var> = None;
    let mut predictions = Vec::with_capacity(t_train);
    for t in 1..=t_train {
        let scores = model.forward(tape, params, tokens, &prev)?;
        let allowed = model.allowed_labels(t)?;
        let loss = graph_nll(tape, scores, gold, scope, &allowed)?;
        total = Some(match total {
            None => loss,
            Some(acc) => tape.add(acc, loss)?,
        });
        if t < t_train {
            let detached = EdgeScores::from_tensor(tape.value(scores))?;
            prev = model.decode(&detached, t)?;
            predictions.push(prev.clone());
        } else {
            let last = EdgeScores::from_tensor(tape.value(scores))?;
            predictions.push(model.decode(&last, t)?);
        }
    }
    Ok((total.expect("t_train >= 1"), predictions))
}

/// Clears gradients, accumulates the gradient of the summed refinement loss
/// over `batch`, and returns that loss. The caller applies the optimiser.
pub fn train_refinement_step(
    model: &G2gtModel,
    params: &mut ParamSet,
    batch: &[(Vec<usize>, LabeledGraph)],
    t_train: usize,
) -> Result<f64> {
    params.zero_grads();
    let mut total = 0.0;
    for (tokens, gold) in batch {
        let mut tape = Tape::new();
        let (loss, _) = refinement_loss(&mut tape, model, params, tokens, gold, t_train)?;
        total += tape.value(loss).item();
        tape.backward_into(loss, params)?;
    }
    Ok(total)
}

/// Number of distinct entity types in [`synthetic_coreference`] sequences.
pub const SYNTHETIC_ENTITIES: usize = 3;
/// Token vocabulary size of [`synthetic_coreference`] sequences.
pub const SYNTHETIC_VOCAB: usize = SYNTHETIC_ENTITIES + 2;
const FILLER: usize = 0;
const CLOSE: usize = SYNTHETIC_ENTITIES + 1;

/// A random two-level sequence of length `n`.
///
/// Tokens are filler (0), entity openers (`1..=3`) and a closer (4). An opener
/// immediately followed by the closer is a mention; its span is marked with
/// MENTION at `(closer, opener)`. Each mention's closer is linked with COREF
/// to the closer of the nearest earlier mention of the same entity.
pub fn synthetic_coreference<R: Rng + ?Sized>(rng: &mut R, n: usize) -> (Vec<usize>, LabeledGraph) {
    let mut tokens = vec![FILLER; n];
    let mut i = 0;
    while i < n {
        let r = rng.random_range(0..4);
        if r < 2 && i + 1 < n {
            tokens[i] = rng.random_range(1..=SYNTHETIC_ENTITIES);
            tokens[i + 1] = CLOSE;
            i += 2;
        } else {
            tokens[i] = FILLER;
            i += 1;
        }
    }
    (tokens.clone(), synthetic_gold(&tokens))
}

/// The gold graph of a [`synthetic_coreference`] token sequence.
pub fn synthetic_gold(tokens: &[usize]) -> LabeledGraph {
    let n = tokens.len();
    let mut g = LabeledGraph::empty(n);
    let mut last_close: [Option<usize>; SYNTHETIC_ENTITIES + 1] = [None; SYNTHETIC_ENTITIES + 1];
    for end in 1..n {
        let start = end - 1;
        let entity = tokens[start];
        if tokens[end] == CLOSE && (1..=SYNTHETIC_ENTITIES).contains(&entity) {
            g.set(end, start, MENTION).expect("in range");
            if let Some(prev) = last_close[entity] {
                g.set(end, prev, COREF).expect("in range");
            }
            last_close[entity] = Some(end);
        }
    }
    g
}

#[cfg(test)]
mod tests;
