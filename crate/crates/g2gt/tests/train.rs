mod common;

use common::fixture;
use g2gt::config::{ModelSpec, TrainConfig};
use g2gt::conllu::{load_conllu, Sentence};
use g2gt::eval::evaluate;
use g2gt::train::{train, train_corpus};
use g2gt::{checkpoint, Error};
use g2gt_core::graph::DepTree;

fn quick_config() -> TrainConfig {
    let mut cfg = TrainConfig::new(fixture("toy.conllu"));
    cfg.model = ModelSpec {
        d_model: 16,
        heads: 2,
        d_ff: 32,
        d_edge: 16,
        layers: 1,
        ..ModelSpec::default()
    };
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg
}

#[test]
fn zero_epochs_saves_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config();
    cfg.epochs = 0;
    cfg.output = dir.path().join("init.ckpt");
    let out = train(&cfg, 3, &mut std::io::sink()).unwrap();
    assert_eq!(out.best_epoch, 0);
    assert_eq!(out.history.len(), 1);
    let parser = checkpoint::load(&cfg.output).unwrap();
    let corpus = load_conllu(fixture("toy.conllu")).unwrap();
    let pred = parser.parse_corpus(&corpus).unwrap();
    let p: Vec<_> = pred.iter().map(|s| s.tree.clone()).collect();
    let g: Vec<_> = corpus.iter().map(|s| s.tree.clone()).collect();
    let r = evaluate(&p, &g).unwrap();
    assert_eq!(r.uas, out.best.uas);
    assert_eq!(r.las, out.best.las);
}

#[test]
fn same_seed_same_run() {
    let corpus = load_conllu(fixture("toy.conllu")).unwrap();
    let cfg = quick_config();
    let mut log_a = Vec::new();
    let mut log_b = Vec::new();
    let a = train_corpus(&cfg, &corpus, None, 11, &mut log_a).unwrap();
    let b = train_corpus(&cfg, &corpus, None, 11, &mut log_b).unwrap();
    assert_eq!(log_a, log_b);
    let losses = |o: &g2gt::train::TrainOutcome| o.history.iter().map(|h| h.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
    for (pa, pb) in a.parser.params.iter().zip(b.parser.params.iter()) {
        assert_eq!(pa.name, pb.name);
        assert_eq!(pa.value, pb.value);
    }
    assert_eq!(checkpoint::to_bytes(&a.parser).unwrap(), checkpoint::to_bytes(&b.parser).unwrap());
    let c = train_corpus(&cfg, &corpus, None, 12, &mut std::io::sink()).unwrap();
    assert_ne!(losses(&a), losses(&c));
    // one log line per epoch plus the initial evaluation
    assert_eq!(String::from_utf8(log_a).unwrap().lines().count(), cfg.epochs + 1);
}

#[test]
fn dev_set_drives_selection() {
    let corpus = load_conllu(fixture("toy.conllu")).unwrap();
    let dev = load_conllu(fixture("two_token.conllu")).unwrap();
    let out = train_corpus(&quick_config(), &corpus, Some(&dev), 1, &mut std::io::sink()).unwrap();
    assert_eq!(out.best.tokens, 2);
}

#[test]
fn invalid_settings_rejected_before_training() {
    let corpus = load_conllu(fixture("toy.conllu")).unwrap();
    let mut cfg = quick_config();
    cfg.model.heads = 3;
    assert!(matches!(train_corpus(&cfg, &corpus, None, 0, &mut std::io::sink()), Err(Error::Config(_))));
    let mut cfg = quick_config();
    cfg.batch_size = 0;
    assert!(train_corpus(&cfg, &corpus, None, 0, &mut std::io::sink()).is_err());
    let mut cfg = quick_config();
    cfg.lr = -1.0;
    assert!(train_corpus(&cfg, &corpus, None, 0, &mut std::io::sink()).is_err());
    let mut cfg = quick_config();
    cfg.model.max_len = 5;
    assert!(matches!(train_corpus(&cfg, &corpus, None, 0, &mut std::io::sink()), Err(Error::Data(_))));
    let mut cfg = quick_config();
    cfg.train = fixture("does-not-exist.conllu");
    assert!(matches!(train(&cfg, 0, &mut std::io::sink()), Err(Error::Io { .. })));
    assert!(train_corpus(&quick_config(), &Vec::new(), None, 0, &mut std::io::sink()).is_err());
}

#[test]
fn config_file_parsing() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(
        &path,
        "train = \"t.conllu\"\nepochs = 4\nseed = 9\n[model]\nd_model = 32\nheads = 2\n",
    )
    .unwrap();
    let cfg = TrainConfig::load(&path).unwrap();
    assert_eq!(cfg.train, dir.path().join("t.conllu"));
    assert_eq!(cfg.output, dir.path().join("model.ckpt"));
    assert_eq!(cfg.epochs, 4);
    assert_eq!(cfg.resolved_seed().unwrap(), 9);
    assert_eq!(cfg.model.d_model, 32);
    assert_eq!(cfg.model.layers, 2);
    assert_eq!(cfg.t_train, 2);
    assert_eq!(cfg.t_max, 3);

    assert!(TrainConfig::from_toml("epochs = 3").is_err());
    assert!(TrainConfig::from_toml("train = \"x\"\nbogus = 1").is_err());
    assert!(TrainConfig::from_toml("train = \"x\"\n[model]\nwidth = 3").is_err());
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

#[test]
fn parse_always_returns_a_tree() {
    let corpus = load_conllu(fixture("toy.conllu")).unwrap();
    let out = train_corpus(&quick_config(), &corpus, None, 2, &mut std::io::sink()).unwrap();
    let parser = out.parser;
    let single = parser.parse(&words("Hello")).unwrap();
    assert_eq!(single.head(1), Some(0));
    assert!(!single.deprel(1).is_empty());
    for s in ["zebra xylophone quux", "The cat chased unknownword quickly .", "a a a a a a a a a a a a"] {
        let t = parser.parse(&words(s)).unwrap();
        t.validate(true).unwrap();
    }
    assert!(parser.parse(&[]).is_err());
    let long = vec!["x".to_string(); 200];
    assert!(parser.parse(&long).is_err());
    let s = Sentence::new(words("a b"), DepTree::from_heads(&[0, 1], &["root", "dep"]).unwrap()).unwrap();
    assert_eq!(parser.parse_corpus(&[s]).unwrap()[0].tree.len(), 2);
}
