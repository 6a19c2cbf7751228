//! Relation-conditioned multi-head self-attention and the stacked encoder.
//!
//! For one head with queries `q = xW^Q`, keys `k = xW^K`, values `v = xW^V`
//! and relation embedding rows `R1, R2, R3` indexed by the label of cell
//! `(i, j)`:
//!
//! ```text
//! e_ij = (q_i·k_j + q_i·R1[l_ij] + R2[l_ij]·k_j) / sqrt(d_head)
//! z_i  = Σ_j softmax(e)_ij (v_j + R3[l_ij])
//! ```
//!
//! The relation matrices are `|L|×d`, shared by every layer; head `h` reads
//! columns `h·d_head .. (h+1)·d_head`.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::LabeledGraph;
use crate::numerics::{ParamId, ParamSet, Tape, Tensor, Var, INIT_STD, LAYER_NORM_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct G2GConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers: usize,
    /// Include the `R2[l_ij]·k_j` score term.
    pub use_key_term: bool,
    /// Include the `R3[l_ij]` value term.
    pub use_value_term: bool,
    /// Pin the NONE row of every relation matrix to zero.
    pub frozen_none: bool,
}

impl G2GConfig {
    pub fn new(d_model: usize, heads: usize, d_ff: usize, layers: usize) -> Self {
        G2GConfig {
            d_model,
            heads,
            d_ff,
            layers,
            use_key_term: true,
            use_value_term: true,
            frozen_none: false,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::InvalidArgument(
                "d_model, heads and d_ff must be positive".into(),
            ));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// The three relation embedding matrices, each `|L|×d_model`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RelationEmbeddings {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

impl RelationEmbeddings {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        num_labels: usize,
        cfg: &G2GConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mut make = |name: &str, rng: &mut R| {
            let mut t = Tensor::randn(&[num_labels, cfg.d_model], INIT_STD, rng);
            if cfg.frozen_none {
                t.data_mut()[..cfg.d_model].fill(0.0);
            }
            params.add(&format!("{prefix}.{name}"), t)
        };
        Ok(RelationEmbeddings {
            query: make("rel_query", rng)?,
            key: make("rel_key", rng)?,
            value: make("rel_value", rng)?,
        })
    }

    pub fn num_labels(&self, params: &ParamSet) -> usize {
        params.value(self.query).shape()[0]
    }
}

/// Relation embedding columns seen by one head. `key`/`value` are absent when
/// the matching term is disabled.
#[derive(Debug, Clone, Copy)]
pub struct HeadRelations {
    pub query: Var,
    pub key: Option<Var>,
    pub value: Option<Var>,
}

/// Relation-conditioned attention logits for one head.
///
/// `queries` and `keys` are the projected `n×d_head` matrices. Row `l` of each
/// relation matrix is the embedding of label `l`.
pub fn attention_scores(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    graph: &LabeledGraph,
    rel: &HeadRelations,
) -> Result<Var> {
    let (qs, ks) = (tape.value(queries).shape().to_vec(), tape.value(keys).shape().to_vec());
    if qs.len() != 2 || qs != ks || qs[0] != graph.n() {
        return Err(Error::ShapeMismatch {
            op: "attention_scores",
            left: qs,
            right: ks,
        });
    }
    let d_head = qs[1];
    for r in [Some(rel.query), rel.key].into_iter().flatten() {
        let rs = tape.value(r).shape();
        if rs.len() != 2 || rs[1] != d_head {
            return Err(Error::ShapeMismatch {
                op: "attention_scores (relations)",
                left: rs.to_vec(),
                right: qs,
            });
        }
    }
    let labels = graph.labels();
    let kt = tape.transpose(keys)?;
    let mut e = tape.matmul(queries, kt)?;

    let r1t = tape.transpose(rel.query)?;
    let q_rel = tape.matmul(queries, r1t)?; // n×|L|
    let query_term = tape.pair_gather(q_rel, labels, false)?;
    e = tape.add(e, query_term)?;

    if let Some(r2) = rel.key {
        let r2t = tape.transpose(r2)?;
        let k_rel = tape.matmul(keys, r2t)?;
        let key_term = tape.pair_gather(k_rel, labels, true)?;
        e = tape.add(e, key_term)?;
    }
    Ok(tape.scale(e, 1.0 / libm::sqrt(d_head as f64)))
}

/// Attention-weighted values with the relation value term.
pub fn attention_values(
    tape: &mut Tape,
    alpha: Var,
    values: Var,
    graph: &LabeledGraph,
    rel_value: Option<Var>,
) -> Result<Var> {
    let (a, v) = (tape.value(alpha).shape().to_vec(), tape.value(values).shape().to_vec());
    if a.len() != 2 || v.len() != 2 || a[0] != a[1] || a[1] != v[0] || a[0] != graph.n() {
        return Err(Error::ShapeMismatch {
            op: "attention_values",
            left: a,
            right: v,
        });
    }
    let mut z = tape.matmul(alpha, values)?;
    if let Some(r3) = rel_value {
        let num_labels = tape.value(r3).shape()[0];
        let per_label = tape.pair_scatter(alpha, graph.labels(), num_labels)?; // n×|L|
        let rel_term = tape.matmul(per_label, r3)?;
        z = tape.add(z, rel_term)?;
    }
    Ok(z)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParams {
    pub w_query: ParamId,
    pub w_key: ParamId,
    pub w_value: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub norm1_gain: ParamId,
    pub norm1_bias: ParamId,
    pub ff_in: ParamId,
    pub ff_in_bias: ParamId,
    pub ff_out: ParamId,
    pub ff_out_bias: ParamId,
    pub norm2_gain: ParamId,
    pub norm2_bias: ParamId,
}

impl LayerParams {
    fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        cfg: &G2GConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let mut gauss = |name: &str, shape: &[usize], rng: &mut R| {
            params.add(&format!("{prefix}.{name}"), Tensor::randn(shape, INIT_STD, rng))
        };
        let w_query = gauss("w_query", &[d, d], rng)?;
        let w_key = gauss("w_key", &[d, d], rng)?;
        let w_value = gauss("w_value", &[d, d], rng)?;
        let w_out = gauss("w_out", &[d, d], rng)?;
        let b_out = gauss("b_out", &[d], rng)?;
        let ff_in = gauss("ff_in", &[d, f], rng)?;
        let ff_in_bias = gauss("ff_in_bias", &[f], rng)?;
        let ff_out = gauss("ff_out", &[f, d], rng)?;
        let ff_out_bias = gauss("ff_out_bias", &[d], rng)?;
        let norm1_gain = params.add(&format!("{prefix}.norm1_gain"), Tensor::filled(&[d], 1.0))?;
        let norm1_bias = params.add(&format!("{prefix}.norm1_bias"), Tensor::zeros(&[d]))?;
        let norm2_gain = params.add(&format!("{prefix}.norm2_gain"), Tensor::filled(&[d], 1.0))?;
        let norm2_bias = params.add(&format!("{prefix}.norm2_bias"), Tensor::zeros(&[d]))?;
        Ok(LayerParams {
            w_query,
            w_key,
            w_value,
            w_out,
            b_out,
            norm1_gain,
            norm1_bias,
            ff_in,
            ff_in_bias,
            ff_out,
            ff_out_bias,
            norm2_gain,
            norm2_bias,
        })
    }
}

/// Stack of post-norm G2G transformer layers sharing one set of relation
/// embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub cfg: G2GConfig,
    pub relations: RelationEmbeddings,
    pub layers: Vec<LayerParams>,
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParamSet,
        prefix: &str,
        cfg: G2GConfig,
        num_labels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if num_labels == 0 {
            return Err(Error::InvalidArgument("relation vocabulary is empty".into()));
        }
        let relations = RelationEmbeddings::init(params, prefix, num_labels, &cfg, rng)?;
        let layers = (0..cfg.layers)
            .map(|i| LayerParams::init(params, &format!("{prefix}.layer{i}"), &cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Encoder {
            cfg,
            relations,
            layers,
        })
    }

    fn relation_var(&self, tape: &mut Tape, params: &ParamSet, id: ParamId) -> Result<Var> {
        let r = tape.param(params, id);
        if self.cfg.frozen_none {
            tape.mask_rows(r, &[crate::graph::NONE])
        } else {
            Ok(r)
        }
    }

    /// Runs every layer over the embedded inputs `x` (`n×d_model`)
    /// conditioned on `graph`, returning the final `n×d_model` states.
    pub fn encode(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        graph: &LabeledGraph,
    ) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.d_model || shape[0] != graph.n() {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: shape,
                right: alloc::vec![graph.n(), self.cfg.d_model],
            });
        }
        let num_labels = self.relations.num_labels(params);
        if graph.max_label() >= num_labels {
            return Err(Error::OutOfRange {
                what: "label",
                index: graph.max_label(),
                bound: num_labels,
            });
        }
        let r1 = self.relation_var(tape, params, self.relations.query)?;
        let r2 = if self.cfg.use_key_term {
            Some(self.relation_var(tape, params, self.relations.key)?)
        } else {
            None
        };
        let r3 = if self.cfg.use_value_term {
            Some(self.relation_var(tape, params, self.relations.value)?)
        } else {
            None
        };
        let (h, dh) = (self.cfg.heads, self.cfg.d_head());
        let mut head_rel = Vec::with_capacity(h);
        for head in 0..h {
            let off = head * dh;
            head_rel.push(HeadRelations {
                query: tape.slice_cols(r1, off, dh)?,
                key: r2.map(|r| tape.slice_cols(r, off, dh)).transpose()?,
                value: r3.map(|r| tape.slice_cols(r, off, dh)).transpose()?,
            });
        }

        let mut hidden = x;
        for layer in &self.layers {
            hidden = self.layer_forward(tape, params, layer, hidden, graph, &head_rel)?;
        }
        Ok(hidden)
    }

    fn layer_forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        p: &LayerParams,
        x: Var,
        graph: &LabeledGraph,
        head_rel: &[HeadRelations],
    ) -> Result<Var> {
        let dh = self.cfg.d_head();
        let wq = tape.param(params, p.w_query);
        let wk = tape.param(params, p.w_key);
        let wv = tape.param(params, p.w_value);
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;

        let mut heads = Vec::with_capacity(head_rel.len());
        for (h, rel) in head_rel.iter().enumerate() {
            let off = h * dh;
            let qh = tape.slice_cols(q, off, dh)?;
            let kh = tape.slice_cols(k, off, dh)?;
            let vh = tape.slice_cols(v, off, dh)?;
            let e = attention_scores(tape, qh, kh, graph, rel)?;
            let alpha = tape.softmax_rows(e)?;
            heads.push(attention_values(tape, alpha, vh, graph, rel.value)?);
        }
        let z = tape.concat_cols(&heads)?;
        let wo = tape.param(params, p.w_out);
        let bo = tape.param(params, p.b_out);
        let attn = tape.matmul(z, wo)?;
        let attn = tape.add_bias(attn, bo)?;
        let res = tape.add(x, attn)?;
        let (g1, b1) = (tape.param(params, p.norm1_gain), tape.param(params, p.norm1_bias));
        let x1 = tape.layer_norm(res, g1, b1, LAYER_NORM_EPS)?;

        let (w1, c1) = (tape.param(params, p.ff_in), tape.param(params, p.ff_in_bias));
        let (w2, c2) = (tape.param(params, p.ff_out), tape.param(params, p.ff_out_bias));
        let f = tape.matmul(x1, w1)?;
        let f = tape.add_bias(f, c1)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2)?;
        let f = tape.add_bias(f, c2)?;
        let res = tape.add(x1, f)?;
        let (g2, b2) = (tape.param(params, p.norm2_gain), tape.param(params, p.norm2_bias));
        tape.layer_norm(res, g2, b2, LAYER_NORM_EPS)
    }
}
