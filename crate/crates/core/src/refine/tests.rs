use super::*;

use core::cell::Cell;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::G2GConfig;
use crate::graph::{dep_tree_to_graph, DepTree};
use crate::model::{ModelConfig, Task};
use crate::numerics::{grad_check, AdamConfig};

fn dep_model(d: usize, layers: usize, seed: u64, std: Option<f64>) -> (G2gtModel, ParamSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let cfg = ModelConfig {
        vocab_size: 6,
        max_len: 8,
        encoder: G2GConfig::new(d, 2, 2 * d, layers),
        d_edge: d,
        task: Task::Dependency { single_root: true },
        unlabeled_input: false,
    };
    let model = G2gtModel::init(&mut ps, cfg, RelationVocab::dependency(["dep"]), &mut rng).unwrap();
    if let Some(std) = std {
        for id in ps.ids().collect::<Vec<_>>() {
            if !ps.get(id).name.contains("norm") {
                let shape = ps.value(id).shape().to_vec();
                *ps.value_mut(id) = Tensor::randn(&shape, std, &mut rng);
            }
        }
    }
    (model, ps)
}

fn coref_model(seed: u64) -> (G2gtModel, ParamSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    let cfg = ModelConfig {
        vocab_size: SYNTHETIC_VOCAB,
        max_len: 12,
        encoder: G2GConfig::new(8, 2, 16, 1),
        d_edge: 8,
        task: Task::Coreference {
            schedule: StageSchedule::MentionFirst,
        },
        unlabeled_input: false,
    };
    let model = G2gtModel::init(&mut ps, cfg, RelationVocab::coreference(), &mut rng).unwrap();
    (model, ps)
}

struct Constant {
    n: usize,
    out: LabeledGraph,
    calls: Cell<usize>,
}

impl GraphPredictor for Constant {
    fn node_count(&self) -> usize {
        self.n
    }
    fn predict(&self, _: &LabeledGraph, _: usize) -> Result<LabeledGraph> {
        self.calls.set(self.calls.get() + 1);
        Ok(self.out.clone())
    }
}

fn chain_graph(n: usize) -> LabeledGraph {
    let vocab = RelationVocab::dependency(["dep"]);
    let heads: Vec<usize> = (0..n - 1).collect();
    let rels = vec!["dep"; n - 1];
    dep_tree_to_graph(&DepTree::from_heads(&heads, &rels).unwrap(), &vocab).unwrap()
}

#[test]
fn initial_graph_examples() {
    assert_eq!(initial_graph(5, &Initializer::Empty, 4).unwrap(), LabeledGraph::empty(5));
    let tree = chain_graph(5);
    assert_eq!(
        initial_graph(5, &Initializer::External(tree.clone()), 4).unwrap(),
        tree
    );
    assert!(initial_graph(4, &Initializer::External(tree.clone()), 4).is_err());
    assert!(initial_graph(5, &Initializer::External(tree), 3).is_err());
}

#[test]
fn stage_mask_examples() {
    let v = RelationVocab::coreference();
    assert_eq!(stage_mask(1, StageSchedule::MentionFirst, &v).unwrap(), vec![true, true, false]);
    assert_eq!(stage_mask(2, StageSchedule::MentionFirst, &v).unwrap(), vec![true; 3]);
    assert_eq!(stage_mask(7, StageSchedule::MentionFirst, &v).unwrap(), vec![true; 3]);
    for t in 1..5 {
        assert_eq!(stage_mask(t, StageSchedule::FullGraph, &v).unwrap(), vec![true; 3]);
    }
    let dep = RelationVocab::dependency(["a", "b"]);
    assert!(stage_mask(1, StageSchedule::MentionFirst, &dep).is_err());
    assert!(stage_mask(0, StageSchedule::FullGraph, &v).is_err());
}

#[test]
fn t_max_one_runs_a_single_pass() {
    let p = Constant {
        n: 4,
        out: chain_graph(4),
        calls: Cell::new(0),
    };
    let cfg = RefinementConfig { t_max: 1, t_train: 1 };
    let (g, trace) = refine(&p, &Initializer::Empty, 4, &cfg).unwrap();
    assert_eq!(p.calls.get(), 1);
    assert_eq!(trace.steps.len(), 2);
    assert_eq!(g, chain_graph(4));
    assert_eq!(trace.converged_at(), None);
}

#[test]
fn constant_predictor_converges_at_two() {
    let p = Constant {
        n: 4,
        out: chain_graph(4),
        calls: Cell::new(0),
    };
    let (_, trace) = refine(&p, &Initializer::Empty, 4, &RefinementConfig::default()).unwrap();
    assert_eq!(trace.converged_at(), Some(2));
    assert_eq!(trace.iterations(), 2);
    assert_eq!(trace.steps[2].graph, trace.steps[1].graph);

    // starting at the fixed point converges immediately
    let (_, trace) = refine(
        &p,
        &Initializer::External(chain_graph(4)),
        4,
        &RefinementConfig::default(),
    )
    .unwrap();
    assert_eq!(trace.converged_at(), Some(1));
}

#[test]
fn initializer_size_mismatch_is_rejected() {
    let p = Constant {
        n: 4,
        out: chain_graph(4),
        calls: Cell::new(0),
    };
    let bad = Initializer::External(LabeledGraph::empty(3));
    assert!(refine(&p, &bad, 4, &RefinementConfig::default()).is_err());
    assert!(refine(&p, &Initializer::Empty, 4, &RefinementConfig { t_max: 0, t_train: 1 }).is_err());
}

#[test]
fn trace_matches_manual_unrolling_and_is_deterministic() {
    let (model, ps) = dep_model(8, 1, 3, Some(0.5));
    let tokens = [0, 2, 3, 4, 5];
    let p = ModelPredictor {
        model: &model,
        params: &ps,
        tokens: &tokens,
    };
    let cfg = RefinementConfig { t_max: 5, t_train: 2 };
    let (g, trace) = refine(&p, &Initializer::Empty, model.num_labels(), &cfg).unwrap();
    assert!(trace.steps.len() <= cfg.t_max + 1);

    let mut prev = LabeledGraph::empty(tokens.len());
    for step in &trace.steps[1..] {
        let next = model.predict(&ps, &tokens, &prev, step.iteration).unwrap();
        assert_eq!(next, step.graph);
        assert_eq!(step.converged, next == prev);
        prev = next;
    }
    assert_eq!(g, prev);
    if trace.converged_at().is_some() {
        let extra = model.predict(&ps, &tokens, &g, trace.iterations() + 1).unwrap();
        assert_eq!(extra, g);
    }

    let (_, again) = refine(&p, &Initializer::Empty, model.num_labels(), &cfg).unwrap();
    assert_eq!(trace, again);
}

#[test]
fn first_iteration_never_predicts_coref() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..40 {
        let (model, mut ps) = coref_model(seed);
        // push every cell towards COREF so only the mask can stop it
        let bias = model.scorer.bias;
        ps.value_mut(bias).data_mut()[COREF] = 50.0;
        let (tokens, _) = synthetic_coreference(&mut rng, 10);
        let g1 = model.predict(&ps, &tokens, &LabeledGraph::empty(10), 1).unwrap();
        assert_eq!(g1.count(COREF), 0);
        assert!(g1.is_lower_triangular());
        let g2 = model.predict(&ps, &tokens, &g1, 2).unwrap();
        assert!(g2.count(COREF) > 0);
    }
}

#[test]
fn synthetic_gold_is_two_level() {
    let g = synthetic_gold(&[1, 4, 0, 2, 4, 1, 4, 0]);
    assert_eq!(g.get(1, 0), MENTION);
    assert_eq!(g.get(4, 3), MENTION);
    assert_eq!(g.get(6, 5), MENTION);
    assert_eq!(g.get(6, 1), COREF);
    assert_eq!(g.count(MENTION), 3);
    assert_eq!(g.count(COREF), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let (t, g) = synthetic_coreference(&mut rng, 9);
        assert_eq!(t.len(), 9);
        assert!(g.is_lower_triangular());
    }
}

fn dist_from(n: usize, scope: CellScope, f: impl Fn(usize, usize) -> Vec<f64>) -> FactoredGraphDistribution {
    let mut cells = vec![None; n * n];
    for i in 0..n {
        for j in 0..n {
            if scope.contains(i, j) {
                cells[i * n + j] = Some(f(i, j));
            }
        }
    }
    FactoredGraphDistribution::new(n, 3, scope, cells).unwrap()
}

#[test]
fn log_likelihood_examples() {
    let mut gold = LabeledGraph::empty(4);
    gold.set(2, 1, MENTION).unwrap();
    gold.set(3, 1, COREF).unwrap();
    let onehot = dist_from(4, CellScope::LowerTriangular, |i, j| {
        let mut p = vec![0.0; 3];
        p[gold.get(i, j)] = 1.0;
        p
    });
    assert_eq!(graph_log_likelihood(&onehot, &gold).unwrap(), 0.0);

    let uniform = dist_from(4, CellScope::LowerTriangular, |_, _| vec![1.0 / 3.0; 3]);
    let k = 6.0;
    let ll = graph_log_likelihood(&uniform, &gold).unwrap();
    assert!((ll - k * (1.0f64 / 3.0).ln()).abs() < 1e-12);

    let off = dist_from(4, CellScope::OffDiagonal, |_, _| vec![1.0 / 3.0; 3]);
    let ll = graph_log_likelihood(&off, &gold).unwrap();
    assert!((ll - 12.0 * (1.0f64 / 3.0).ln()).abs() < 1e-12);
}

#[test]
fn log_likelihood_matches_per_cell_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 3;
    for _ in 0..50 {
        let scores = Tensor::randn(&[n, n, 3], 2.0, &mut rng);
        let es = EdgeScores::from_tensor(&scores).unwrap();
        let dist = FactoredGraphDistribution::from_scores(&es, CellScope::LowerTriangular, &[true; 3]).unwrap();
        let (_, gold) = synthetic_coreference(&mut rng, n);
        let mut oracle = 0.0;
        for i in 0..n {
            for j in 0..i {
                let cell = es.cell(i, j);
                let z: f64 = cell.iter().map(|v| v.exp()).sum();
                oracle += (cell[gold.get(i, j)].exp() / z).ln();
            }
        }
        let ll = graph_log_likelihood(&dist, &gold).unwrap();
        assert!((ll - oracle).abs() < 1e-12);
        assert!(ll <= 0.0);

        // the tape loss is the negated likelihood
        let mut tape = Tape::new();
        let s = tape.constant(scores.clone());
        let nll = graph_nll(&mut tape, s, &gold, CellScope::LowerTriangular, &[true; 3]).unwrap();
        assert!((tape.value(nll).item() + ll).abs() < 1e-12);
    }
}

#[test]
fn masked_tape_loss_matches_masked_distribution() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n = 5;
    let allowed = [true, true, false];
    for _ in 0..20 {
        let scores = Tensor::randn(&[n, n, 3], 2.0, &mut rng);
        let es = EdgeScores::from_tensor(&scores).unwrap();
        let (_, gold) = synthetic_coreference(&mut rng, n);
        let dist = FactoredGraphDistribution::from_scores(&es, CellScope::LowerTriangular, &allowed).unwrap();
        let ll = graph_log_likelihood(&dist, &project_gold(&gold, &allowed)).unwrap();
        let mut tape = Tape::new();
        let s = tape.constant(scores);
        let nll = graph_nll(&mut tape, s, &gold, CellScope::LowerTriangular, &allowed).unwrap();
        assert!(ll.is_finite());
        assert!((tape.value(nll).item() + ll).abs() < 1e-9);
    }
}

#[test]
fn missing_or_malformed_cells_are_rejected() {
    let mut cells = vec![None; 9];
    cells[3] = Some(vec![0.5, 0.5, 0.0]);
    let d = FactoredGraphDistribution::new(3, 3, CellScope::LowerTriangular, cells.clone()).unwrap();
    assert!(graph_log_likelihood(&d, &LabeledGraph::empty(3)).is_err());
    cells[3] = Some(vec![0.5, 0.6, 0.0]);
    assert!(FactoredGraphDistribution::new(3, 3, CellScope::LowerTriangular, cells.clone()).is_err());
    cells[3] = Some(vec![0.5, 0.5]);
    assert!(FactoredGraphDistribution::new(3, 3, CellScope::LowerTriangular, cells).is_err());
    let d = dist_from(3, CellScope::LowerTriangular, |_, _| vec![1.0 / 3.0; 3]);
    assert!(graph_log_likelihood(&d, &LabeledGraph::empty(4)).is_err());
}

proptest! {
    #[test]
    fn log_likelihood_is_never_positive(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let es = EdgeScores::from_tensor(&Tensor::randn(&[n, n, 3], 3.0, &mut rng)).unwrap();
        let dist = FactoredGraphDistribution::from_scores(&es, CellScope::OffDiagonal, &[true; 3]).unwrap();
        let (_, gold) = synthetic_coreference(&mut rng, n);
        prop_assert!(graph_log_likelihood(&dist, &gold).unwrap() <= 0.0);
    }
}

#[test]
fn single_iteration_loss_is_plain_likelihood() {
    let (model, ps) = dep_model(8, 1, 2, Some(0.3));
    let tokens = [0, 1, 2, 3];
    let gold = chain_graph(4);
    let mut tape = Tape::new();
    let (loss, preds) = refinement_loss(&mut tape, &model, &ps, &tokens, &gold, 1).unwrap();
    assert_eq!(preds.len(), 1);

    let mut tape2 = Tape::new();
    let s = model.forward(&mut tape2, &ps, &tokens, &LabeledGraph::empty(4)).unwrap();
    let es = EdgeScores::from_tensor(tape2.value(s)).unwrap();
    let dist = FactoredGraphDistribution::from_scores(&es, CellScope::OffDiagonal, &[true; 4]).unwrap();
    let ll = graph_log_likelihood(&dist, &gold).unwrap();
    assert!((tape.value(loss).item() + ll).abs() < 1e-9);
}

#[test]
fn training_loss_decreases() {
    let (model, mut ps) = dep_model(16, 1, 9, None);
    let vocab = RelationVocab::dependency(["dep"]);
    let tree_a = DepTree::from_heads(&[2, 0, 2], &["dep"; 3]).unwrap();
    let tree_b = DepTree::from_heads(&[0, 1, 1, 3], &["dep"; 4]).unwrap();
    let batch = vec![
        (vec![0, 1, 2, 3], dep_tree_to_graph(&tree_a, &vocab).unwrap()),
        (vec![0, 4, 5, 1, 2], dep_tree_to_graph(&tree_b, &vocab).unwrap()),
    ];
    let adam = AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    };
    let mut losses = Vec::new();
    for _ in 0..50 {
        let loss = train_refinement_step(&model, &mut ps, &batch, 2).unwrap();
        assert!(loss.is_finite());
        losses.push(loss);
        ps.adam_step(&adam).unwrap();
    }
    assert!(losses[49] < 0.5 * losses[0], "{losses:?}");
}

#[test]
fn refinement_step_passes_grad_check() {
    let (model, ps) = dep_model(8, 1, 21, Some(0.3));
    assert_eq!(model.num_labels(), 4);
    let tokens = [0, 1, 2, 3, 4];
    let gold = dep_tree_to_graph(
        &DepTree::from_heads(&[2, 0, 2, 3], &["dep"; 4]).unwrap(),
        &model.relations,
    )
    .unwrap();
    let report = grad_check(&ps, 1e-5, |tape, p| {
        Ok(refinement_loss(tape, &model, p, &tokens, &gold, 2)?.0)
    })
    .unwrap();
    assert!(report.passed(), "{:?}", report.worst());
}
