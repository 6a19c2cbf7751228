//! Self-contained diagnostics behind the `gradcheck` and `refine-demo`
//! subcommands.

use std::fmt::Write as _;

use g2gt_core::attention::G2GConfig;
use g2gt_core::graph::{dep_tree_to_graph, graph_to_dep_tree, DepTree, LabeledGraph, RelationVocab, COREF, MENTION};
use g2gt_core::model::{G2gtModel, ModelConfig, Task};
use g2gt_core::numerics::{grad_check, GradCheckReport, ParamSet, Tensor};
use g2gt_core::refine::{
    refine, refinement_loss, synthetic_coreference, Initializer, ModelPredictor, RefinementConfig,
    RefinementTrace, StageSchedule, SYNTHETIC_VOCAB,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Central-difference check of a two-iteration refinement loss on a tiny
/// dependency model: width 8, two heads, five nodes, four relation labels.
/// Weights are redrawn with a wider spread than training init so that every
/// gradient is well above roundoff.
pub fn refinement_gradcheck(seed: u64, use_key_term: bool, use_value_term: bool, eps: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut encoder = G2GConfig::new(8, 2, 16, 1);
    encoder.use_key_term = use_key_term;
    encoder.use_value_term = use_value_term;
    let cfg = ModelConfig {
        vocab_size: 6,
        max_len: 5,
        encoder,
        d_edge: 8,
        task: Task::Dependency { single_root: true },
        unlabeled_input: false,
    };
    let relations = RelationVocab::dependency(["dep"]);
    let mut params = ParamSet::new();
    let model = G2gtModel::init(&mut params, cfg, relations, &mut rng)?;
    for id in params.ids().collect::<Vec<_>>() {
        if !params.get(id).name.contains("norm") {
            let shape = params.value(id).shape().to_vec();
            *params.value_mut(id) = Tensor::randn(&shape, 0.3, &mut rng);
        }
    }
    let tokens = [2, 3, 4, 5, 3];
    let gold = dep_tree_to_graph(&DepTree::from_heads(&[2, 0, 2, 3], &["dep"; 4])?, &model.relations)?;
    let report = grad_check(&params, eps, |tape, p| {
        Ok(refinement_loss(tape, &model, p, &tokens, &gold, 2)?.0)
    })?;
    Ok(report)
}

/// Refines a random synthetic mention/coreference sequence with a randomly
/// initialised model under the mention-first schedule.
pub fn synthetic_refinement(seed: u64, len: usize, t_max: usize) -> Result<(Vec<usize>, RefinementTrace)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        vocab_size: SYNTHETIC_VOCAB,
        max_len: len.max(1),
        encoder: G2GConfig::new(16, 2, 32, 2),
        d_edge: 16,
        task: Task::Coreference {
            schedule: StageSchedule::MentionFirst,
        },
        unlabeled_input: false,
    };
    let mut params = ParamSet::new();
    let model = G2gtModel::init(&mut params, cfg, RelationVocab::coreference(), &mut rng)?;
    for id in params.ids().collect::<Vec<_>>() {
        if !params.get(id).name.contains("norm") {
            let shape = params.value(id).shape().to_vec();
            *params.value_mut(id) = Tensor::randn(&shape, 0.5, &mut rng);
        }
    }
    let (tokens, _) = synthetic_coreference(&mut rng, len);
    let predictor = ModelPredictor {
        model: &model,
        params: &params,
        tokens: &tokens,
    };
    let rc = RefinementConfig {
        t_max,
        ..RefinementConfig::default()
    };
    let (_, trace) = refine(&predictor, &Initializer::Empty, model.num_labels(), &rc)?;
    Ok((tokens, trace))
}

/// Lower triangle with `.` for NONE, `M` for MENTION and `C` for COREF.
pub fn render_coref(graph: &LabeledGraph) -> String {
    let mut out = String::new();
    for i in 0..graph.n() {
        for j in 0..=i {
            out.push(match graph.get(i, j) {
                MENTION => 'M',
                COREF => 'C',
                _ => '.',
            });
        }
        out.push('\n');
    }
    out
}

/// `form<-head:deprel` for every token, or the raw arc count when the graph
/// is not a tree.
pub fn render_dependency(graph: &LabeledGraph, relations: &RelationVocab, forms: &[String]) -> String {
    match graph_to_dep_tree(graph, relations) {
        Ok(tree) => {
            let mut out = String::new();
            for (i, form) in forms.iter().enumerate() {
                let _ = write!(
                    out,
                    "{}{form}<-{}:{}",
                    if i == 0 { "" } else { " " },
                    tree.head(i + 1).unwrap_or(0),
                    tree.deprel(i + 1)
                );
            }
            out
        }
        Err(_) => format!("(no tree; {} labelled cells)", graph.n() * graph.n() - graph.count(0)),
    }
}
