use std::io::Write;

use g2gt_core::graph::LabeledGraph;
use g2gt_core::numerics::AdamConfig;
use g2gt_core::refine::train_refinement_step;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::conllu::{load_conllu, Corpus};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::parser::Parser;
use crate::vocab::Vocab;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Summed refinement loss over the epoch; NaN for the untrained model.
    pub loss: f64,
    pub uas: f64,
    pub las: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the epoch with the best monitored score.
    pub parser: Parser,
    pub best_epoch: usize,
    pub best: EvalReport,
    pub history: Vec<EpochLog>,
}

fn better(a: &EvalReport, b: &EvalReport) -> bool {
    (a.las, a.uas) > (b.las, b.uas)
}

fn monitor(parser: &Parser, corpus: &Corpus) -> Result<EvalReport> {
    let pred = parser.parse_corpus(corpus)?;
    let p: Vec<_> = pred.into_iter().map(|s| s.tree).collect();
    let g: Vec<_> = corpus.iter().map(|s| s.tree.clone()).collect();
    evaluate(&p, &g)
}

/// Trains on in-memory corpora. `dev` is monitored for checkpoint selection
/// when given, the training set otherwise. Progress lines go to `log`.
pub fn train_corpus(
    cfg: &TrainConfig,
    train: &Corpus,
    dev: Option<&Corpus>,
    seed: u64,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training corpus is empty".into()));
    }
    let vocab = Vocab::build(train);
    let mut parser = Parser::new(cfg.model, vocab, seed)?;
    parser.t_max = cfg.t_max;

    let mut examples: Vec<(Vec<usize>, LabeledGraph)> = Vec::with_capacity(train.len());
    for s in train {
        examples.push((parser.tokens(&s.forms)?, parser.gold_graph(&s.tree)?));
    }
    for s in dev.into_iter().flatten() {
        parser.tokens(&s.forms)?;
    }
    let monitored = dev.unwrap_or(train);

    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));

    let report = monitor(&parser, monitored)?;
    let mut history = vec![EpochLog {
        epoch: 0,
        loss: f64::NAN,
        uas: report.uas,
        las: report.las,
    }];
    let _ = writeln!(log, "epoch 0 uas {:.2} las {:.2}", report.uas, report.las);
    let mut best = (parser.clone(), 0, report);

    for epoch in 1..=cfg.epochs {
        if cfg.early_stop_las.is_some_and(|target| best.2.las >= target) {
            break;
        }
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| examples[i].clone()).collect();
            epoch_loss += train_refinement_step(&parser.model, &mut parser.params, &batch, cfg.t_train)?;
            parser.params.adam_step(&adam)?;
        }
        if !epoch_loss.is_finite() {
            return Err(Error::Model(g2gt_core::Error::InvalidArgument(format!(
                "loss diverged at epoch {epoch}"
            ))));
        }
        let report = monitor(&parser, monitored)?;
        let _ = writeln!(
            log,
            "epoch {epoch} loss {epoch_loss:.6} uas {:.2} las {:.2}",
            report.uas, report.las
        );
        history.push(EpochLog {
            epoch,
            loss: epoch_loss,
            uas: report.uas,
            las: report.las,
        });
        if better(&report, &best.2) {
            best = (parser.clone(), epoch, report);
        }
    }
    let (parser, best_epoch, best) = best;
    Ok(TrainOutcome {
        parser,
        best_epoch,
        best,
        history,
    })
}

/// Loads the configured files, trains, and writes the best checkpoint to
/// `cfg.output`.
pub fn train(cfg: &TrainConfig, seed: u64, log: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = load_conllu(&cfg.train)?;
    let dev = cfg.dev.as_ref().map(load_conllu).transpose()?;
    let outcome = train_corpus(cfg, &train, dev.as_ref(), seed, log)?;
    checkpoint::save(&cfg.output, &outcome.parser)?;
    let _ = writeln!(
        log,
        "best epoch {} uas {:.2} las {:.2}; saved {}",
        outcome.best_epoch,
        outcome.best.uas,
        outcome.best.las,
        cfg.output.display()
    );
    Ok(outcome)
}
