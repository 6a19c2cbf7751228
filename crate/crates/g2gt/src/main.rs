use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser as ClapParser, Subcommand};
use g2gt::checkpoint;
use g2gt::config::TrainConfig;
use g2gt::conllu::{load_conllu, save_conllu, write_conllu};
use g2gt::demo;
use g2gt::eval::evaluate;
use g2gt::train::train;
use g2gt::Error;
use g2gt_core::numerics::GRAD_CHECK_TOLERANCE;
use g2gt_core::refine::Initializer;

#[derive(ClapParser, Debug)]
#[command(name = "g2gt", version, about = "Graph-to-graph transformer dependency parser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a parser from a TOML config and save the best checkpoint.
    Train(TrainArgs),
    /// Parse a CoNLL-U file with a trained checkpoint.
    Parse(ParseArgs),
    /// Score predicted trees against gold trees.
    Eval(EvalArgs),
    /// Check analytic gradients of a refinement step against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print every iteration of a refinement run.
    RefineDemo(RefineDemoArgs),
}

#[derive(Args, Debug)]
struct Ablation {
    /// Drop the key-side relation term from attention scores.
    #[arg(long)]
    ablate_key_term: bool,
    /// Drop the relation term from attention values.
    #[arg(long)]
    ablate_value_term: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    ablation: Ablation,
}

#[derive(Args, Debug)]
struct ParseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    t_max: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    gold: PathBuf,
    /// Predicted CoNLL-U file.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    pred: Option<PathBuf>,
    /// Parse the gold file with this checkpoint instead of reading predictions.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    t_max: Option<usize>,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[command(flatten)]
    ablation: Ablation,
}

#[derive(Args, Debug)]
struct RefineDemoArgs {
    /// Trained checkpoint; without one a random model runs on a synthetic
    /// mention/coreference sequence.
    #[arg(long, requires = "input")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    /// 1-based sentence index within the input.
    #[arg(long, default_value_t = 1)]
    sentence: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    t_max: usize,
    /// Length of the synthetic sequence.
    #[arg(long, default_value_t = 10)]
    length: usize,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<g2gt_core::Error> for Failure {
    fn from(e: g2gt_core::Error) -> Self {
        Failure::Run(Error::Model(e))
    }
}

type CmdResult = Result<(), Failure>;

fn run_train(args: TrainArgs) -> CmdResult {
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(t) = args.t_max {
        cfg.t_max = t;
    }
    if let Some(o) = args.output {
        cfg.output = o;
    }
    if args.ablation.ablate_key_term {
        cfg.model.use_key_term = false;
    }
    if args.ablation.ablate_value_term {
        cfg.model.use_value_term = false;
    }
    let seed = cfg.resolved_seed()?;
    train(&cfg, seed, &mut io::stderr())?;
    Ok(())
}

fn run_parse(args: ParseArgs) -> CmdResult {
    let mut parser = checkpoint::load(&args.checkpoint)?;
    if let Some(t) = args.t_max {
        if t == 0 {
            return Err(Failure::Usage("--t-max must be at least 1".into()));
        }
        parser.t_max = t;
    }
    let corpus = load_conllu(&args.input)?;
    let parsed = parser.parse_corpus(&corpus)?;
    match args.output {
        Some(path) => save_conllu(path, &parsed)?,
        None => write_conllu(io::stdout().lock(), &parsed).map_err(|e| Error::io("<stdout>", e))?,
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> CmdResult {
    let gold = load_conllu(&args.gold)?;
    let pred = match (&args.pred, &args.checkpoint) {
        (Some(p), _) => load_conllu(p)?,
        (None, Some(ck)) => {
            let mut parser = checkpoint::load(ck)?;
            if let Some(t) = args.t_max {
                parser.t_max = t.max(1);
            }
            parser.parse_corpus(&gold)?
        }
        (None, None) => return Err(Failure::Usage("either --pred or --checkpoint is required".into())),
    };
    let forms_differ = pred.iter().zip(&gold).any(|(p, g)| p.forms != g.forms);
    if forms_differ {
        return Err(Error::Data("predicted and gold files contain different tokens".into()).into());
    }
    let p: Vec<_> = pred.into_iter().map(|s| s.tree).collect();
    let g: Vec<_> = gold.into_iter().map(|s| s.tree).collect();
    let report = evaluate(&p, &g)?;
    if args.json {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
        println!("{json}");
    } else {
        println!("tokens {}", report.tokens);
        println!("UAS {:.2}", report.uas);
        println!("LAS {:.2}", report.las);
    }
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> CmdResult {
    if !(1e-7..=1e-3).contains(&args.eps) {
        return Err(Failure::Usage("--eps must lie in [1e-7, 1e-3]".into()));
    }
    let report = demo::refinement_gradcheck(
        args.seed,
        !args.ablation.ablate_key_term,
        !args.ablation.ablate_value_term,
        args.eps,
    )?;
    let mut out = io::stdout().lock();
    for e in &report.entries {
        let status = if !e.trainable {
            "frozen"
        } else if e.passed(report.tolerance) {
            "ok"
        } else {
            "FAIL"
        };
        let _ = writeln!(
            out,
            "{:<36} {:>6} rel {:.3e} abs {:.3e} {status}",
            e.name, e.elements, e.max_rel_error, e.max_abs_error
        );
    }
    if report.passed() {
        let _ = writeln!(out, "all parameters within {GRAD_CHECK_TOLERANCE:e}");
        Ok(())
    } else {
        Err(Error::Model(g2gt_core::Error::InvalidArgument(
            "gradient check failed".into(),
        ))
        .into())
    }
}

fn run_refine_demo(args: RefineDemoArgs) -> CmdResult {
    if args.t_max == 0 {
        return Err(Failure::Usage("--t-max must be at least 1".into()));
    }
    let mut out = io::stdout().lock();
    match (args.checkpoint, args.input) {
        (Some(ck), Some(input)) => {
            let parser = checkpoint::load(&ck)?;
            let corpus = load_conllu(&input)?;
            let sentence = args
                .sentence
                .checked_sub(1)
                .and_then(|k| corpus.get(k))
                .ok_or_else(|| Error::Data(format!("no sentence {} in {}", args.sentence, input.display())))?;
            let (_, trace) = parser.refine(&sentence.forms, &Initializer::Empty, args.t_max)?;
            let mut forms = vec!["<root>".to_string()];
            forms.extend(sentence.forms.iter().cloned());
            for step in &trace.steps {
                let _ = writeln!(out, "t={} converged={}", step.iteration, step.converged);
                let _ = writeln!(
                    out,
                    "  {}",
                    demo::render_dependency(&step.graph, &parser.model.relations, &forms[1..])
                );
            }
        }
        _ => {
            let (tokens, trace) = demo::synthetic_refinement(args.seed, args.length, args.t_max)?;
            let _ = writeln!(out, "tokens {tokens:?}");
            for step in &trace.steps {
                let _ = writeln!(out, "t={} converged={}", step.iteration, step.converged);
                let _ = write!(out, "{}", demo::render_coref(&step.graph));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => run_train(a),
        Command::Parse(a) => run_parse(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::RefineDemo(a) => run_refine_demo(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
