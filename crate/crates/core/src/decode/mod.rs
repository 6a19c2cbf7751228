//! Pairwise edge scoring and graph extraction.
//!
//! Every node vector is projected into separate head and tail spaces and each
//! ordered pair is classified over the relation vocabulary by a biaffine map.
//! Pairs are scored independently; constraints such as tree shape are imposed
//! afterwards by the decoders here.

mod mst;

pub use mst::{mst_decode, tree_score};

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{DepTree, LabeledGraph, RelationVocab, NONE};
use crate::numerics::{ParamId, ParamSet, Tape, Tensor, Var, INIT_STD};

/// Parameters of the biaffine edge classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeScorer {
    pub head_proj: ParamId,
    pub tail_proj: ParamId,
    /// `d_e × (|L|·d_e)`; block `l` is the bilinear map of label `l`.
    pub bilinear: ParamId,
    pub head_linear: ParamId,
    pub tail_linear: ParamId,
    pub bias: ParamId,
    pub num_labels: usize,
}

impl EdgeScorer {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        d_model: usize,
        d_edge: usize,
        num_labels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if d_edge == 0 || d_edge > d_model {
            return Err(Error::InvalidArgument(format!(
                "edge width {d_edge} must be in 1..={d_model}"
            )));
        }
        if num_labels == 0 {
            return Err(Error::InvalidArgument("no labels to score".into()));
        }
        let mut gauss = |name: &str, shape: &[usize], rng: &mut R| {
            params.add(&format!("{prefix}.{name}"), Tensor::randn(shape, INIT_STD, rng))
        };
        Ok(EdgeScorer {
            head_proj: gauss("head_proj", &[d_model, d_edge], rng)?,
            tail_proj: gauss("tail_proj", &[d_model, d_edge], rng)?,
            bilinear: gauss("bilinear", &[d_edge, num_labels * d_edge], rng)?,
            head_linear: gauss("head_linear", &[d_edge, num_labels], rng)?,
            tail_linear: gauss("tail_linear", &[d_edge, num_labels], rng)?,
            bias: gauss("bias", &[num_labels], rng)?,
            num_labels,
        })
    }

    /// `scores[i][j][l] = h_i·B_l·t_j + u_l·h_i + v_l·t_j + b_l` with
    /// `h = z·head_proj` and `t = z·tail_proj`. Shape `n×n×|L|`.
    pub fn score_edges(&self, tape: &mut Tape, params: &ParamSet, z: Var) -> Result<Var> {
        let hp = tape.param(params, self.head_proj);
        let tp = tape.param(params, self.tail_proj);
        let zs = tape.value(z).shape();
        if zs.len() != 2 || zs[1] != tape.value(hp).shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "score_edges",
                left: zs.to_vec(),
                right: tape.value(hp).shape().to_vec(),
            });
        }
        let h = tape.matmul(z, hp)?;
        let t = tape.matmul(z, tp)?;
        let b = tape.param(params, self.bilinear);
        let hb = tape.matmul(h, b)?;
        let pairs = tape.bilinear_pairs(hb, t, self.num_labels)?;
        let u = tape.param(params, self.head_linear);
        let v = tape.param(params, self.tail_linear);
        let bias = tape.param(params, self.bias);
        let hu = tape.matmul(h, u)?;
        let tv = tape.matmul(t, v)?;
        let lin = tape.outer_add(hu, tv, bias)?;
        tape.add(pairs, lin)
    }
}

/// Plain `n×n×|L|` score array detached from the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeScores {
    n: usize,
    num_labels: usize,
    data: Vec<f64>,
}

impl EdgeScores {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != s[1] {
            return Err(Error::InvalidArgument(format!(
                "edge scores must be n×n×L, got {s:?}"
            )));
        }
        Ok(EdgeScores {
            n: s[0],
            num_labels: s[2],
            data: t.data().to_vec(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        self.data[(i * self.n + j) * self.num_labels + l]
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let base = (i * self.n + j) * self.num_labels;
        &self.data[base..base + self.num_labels]
    }

    /// Replaces each cell by its log-softmax.
    pub fn log_normalized(&self) -> Self {
        let mut data = self.data.clone();
        for cell in data.chunks_mut(self.num_labels.max(1)) {
            let max = cell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(cell.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            cell.iter_mut().for_each(|v| *v -= lse);
        }
        EdgeScores { data, ..*self }
    }

    /// `pooled[i][j] = max over ↑ labels of scores[i][j][l]`: the score of
    /// `j` heading `i`.
    pub fn head_scores(&self, vocab: &RelationVocab) -> Vec<f64> {
        let ups: Vec<usize> = vocab.up_labels().filter(|&l| l < self.num_labels).collect();
        let mut out = vec![f64::NEG_INFINITY; self.n * self.n];
        for i in 0..self.n {
            for j in 0..self.n {
                let cell = self.cell(i, j);
                out[i * self.n + j] = ups.iter().map(|&l| cell[l]).fold(f64::NEG_INFINITY, f64::max);
            }
        }
        out
    }
}

fn argmax_lowest(cell: &[f64], allowed: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (l, &s) in cell.iter().enumerate() {
        if !allowed(l) {
            continue;
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((l, s));
        }
    }
    best.map(|(l, _)| l)
}

/// Independent per-cell argmax; ties go to the lowest label index and the
/// diagonal is NONE.
pub fn greedy_decode(scores: &EdgeScores) -> LabeledGraph {
    greedy_decode_masked(scores, &vec![true; scores.num_labels])
}

/// [`greedy_decode`] restricted to labels with `allowed[l]` set. NONE is
/// always permitted.
pub fn greedy_decode_masked(scores: &EdgeScores, allowed: &[bool]) -> LabeledGraph {
    let n = scores.n;
    let mut g = LabeledGraph::empty(n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let l = argmax_lowest(scores.cell(i, j), |l| {
                l == NONE || allowed.get(l).copied().unwrap_or(false)
            })
            .unwrap_or(NONE);
            g.set(i, j, l).expect("in range");
        }
    }
    g
}

/// Assigns each arc `(dep, head)` the `↑` label with the highest
/// `scores[dep][head][l]`.
pub fn label_edges(heads: &[Option<usize>], scores: &EdgeScores, vocab: &RelationVocab) -> Result<DepTree> {
    let n = scores.n;
    if heads.len() != n || n == 0 || heads[0].is_some() {
        return Err(Error::NotATree(
            "skeleton must cover every node with node 0 as the root".into(),
        ));
    }
    let skeleton = DepTree::new(heads[1..].to_vec(), vec![alloc::string::String::new(); n - 1])?;
    skeleton.validate(false)?;
    let mut deprels = Vec::with_capacity(n - 1);
    for dep in 1..n {
        let head = heads[dep].expect("validated");
        let cell = scores.cell(dep, head);
        let l = argmax_lowest(cell, |l| vocab.is_up(l))
            .ok_or_else(|| Error::InvalidArgument("vocabulary has no dependency labels".into()))?;
        deprels.push(vocab.deprel_of(l).unwrap_or_default().to_string());
    }
    DepTree::new(heads[1..].to_vec(), deprels)
}

/// Tree decoding: pooled head scores, maximum spanning arborescence from
/// node 0, then per-arc labels.
pub fn decode_tree(scores: &EdgeScores, vocab: &RelationVocab, single_root: bool) -> Result<DepTree> {
    let pooled = scores.head_scores(vocab);
    let heads = mst_decode(&pooled, scores.n, 0, single_root)?;
    label_edges(&heads, scores, vocab)
}
