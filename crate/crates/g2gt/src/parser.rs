use g2gt_core::graph::{dep_tree_to_graph, graph_to_dep_tree, DepTree, LabeledGraph};
use g2gt_core::model::G2gtModel;
use g2gt_core::numerics::{ParamSet, Tape, Tensor};
use g2gt_core::refine::{refine, Initializer, ModelPredictor, RefinementConfig, RefinementTrace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::ModelSpec;
use crate::conllu::Sentence;
use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// A dependency parser: model structure, weights and vocabulary.
#[derive(Debug, Clone)]
pub struct Parser {
    pub spec: ModelSpec,
    pub vocab: Vocab,
    pub model: G2gtModel,
    pub params: ParamSet,
    /// Refinement iterations used when parsing.
    pub t_max: usize,
}

impl Parser {
    /// Freshly initialised weights drawn from `seed`.
    pub fn new(spec: ModelSpec, vocab: Vocab, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let model = G2gtModel::init(&mut params, spec.model_config(vocab.len()), vocab.relations(), &mut rng)?;
        Ok(Parser {
            spec,
            vocab,
            model,
            params,
            t_max: 3,
        })
    }

    /// Token indices including the root, checked against the model's length limit.
    pub fn tokens(&self, forms: &[String]) -> Result<Vec<usize>> {
        if forms.is_empty() {
            return Err(Error::Data("empty sentence".into()));
        }
        if forms.len() + 1 > self.spec.max_len {
            return Err(Error::Data(format!(
                "sentence of {} tokens exceeds max_len {}",
                forms.len(),
                self.spec.max_len
            )));
        }
        Ok(self.vocab.encode(forms))
    }

    pub fn gold_graph(&self, tree: &DepTree) -> Result<LabeledGraph> {
        Ok(dep_tree_to_graph(tree, &self.model.relations)?)
    }

    /// Raw edge scores for `forms` conditioned on `graph`.
    pub fn scores(&self, forms: &[String], graph: &LabeledGraph) -> Result<Tensor> {
        let tokens = self.tokens(forms)?;
        let mut tape = Tape::new();
        let s = self.model.forward(&mut tape, &self.params, &tokens, graph)?;
        Ok(tape.value(s).clone())
    }

    pub fn refine(&self, forms: &[String], init: &Initializer, t_max: usize) -> Result<(DepTree, RefinementTrace)> {
        let tokens = self.tokens(forms)?;
        let predictor = ModelPredictor {
            model: &self.model,
            params: &self.params,
            tokens: &tokens,
        };
        let cfg = RefinementConfig {
            t_max,
            ..RefinementConfig::default()
        };
        let (graph, trace) = refine(&predictor, init, self.model.num_labels(), &cfg)?;
        let tree = graph_to_dep_tree(&graph, &self.model.relations)?;
        Ok((tree, trace))
    }

    pub fn parse(&self, forms: &[String]) -> Result<DepTree> {
        Ok(self.refine(forms, &Initializer::Empty, self.t_max)?.0)
    }

    /// Parses every sentence, replacing its tree with the prediction.
    pub fn parse_corpus(&self, corpus: &[Sentence]) -> Result<Vec<Sentence>> {
        corpus
            .par_iter()
            .map(|s| {
                Ok(Sentence {
                    forms: s.forms.clone(),
                    tree: self.parse(&s.forms)?,
                })
            })
            .collect()
    }
}
