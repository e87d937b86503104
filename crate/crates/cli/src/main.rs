use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use beamtree::autograd::Tape;
use beamtree::gradcheck::{self, DEFAULT_TOLERANCE};
use beamtree::harness::{self, RunConfig};
use beamtree::listops::{self, build_splits, SplitKind, SplitParams, SplitPlan};
use beamtree::model::gold_tree_for;
use beamtree::parse_analysis::{extract_parses, report};
use beamtree::rng;
use beamtree::MedianRule;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "beamtree", version, about = "Latent-tree encoders on ListOps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a ListOps split (train, dev and test TSVs with .meta files).
    GenData(Box<GenData>),
    /// Train a model. Extra `--key=value` arguments override config keys.
    Train(Train),
    /// Accuracy of a checkpoint on one or more dataset files.
    Eval(Eval),
    /// Print the beams a checkpoint builds for one ListOps expression.
    Parse(Parse),
    /// Run the double-precision finite-difference gradient checks.
    Gradcheck(Gradcheck),
}

#[derive(Args)]
struct GenData {
    /// length_gen, depth_gen, arg_gen or lra_style
    #[arg(long, default_value = "length_gen")]
    split: SplitKind,
    #[arg(long)]
    out: PathBuf,
    /// Start from the large-scale recipe instead of the desk-scale one.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_count: Option<usize>,
    #[arg(long)]
    dev_count: Option<usize>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long)]
    train_max_length: Option<usize>,
    #[arg(long)]
    train_max_depth: Option<usize>,
    #[arg(long)]
    min_args: Option<usize>,
    #[arg(long)]
    train_max_args: Option<usize>,
    #[arg(long)]
    nest_prob: Option<f64>,
    #[arg(long)]
    test_nest_prob: Option<f64>,
    /// Comma-separated inclusive ranges, e.g. `80-120,200-300`.
    #[arg(long)]
    test_lengths: Option<String>,
    /// Comma-separated inclusive ranges, e.g. `5-6`.
    #[arg(long)]
    test_depths: Option<String>,
    /// Comma-separated arities, e.g. `6,10`.
    #[arg(long)]
    test_arities: Option<String>,
    #[arg(long)]
    test_max_depth: Option<usize>,
    #[arg(long)]
    test_max_length: Option<usize>,
    /// lower, upper or mean_floor
    #[arg(long)]
    median_rule: Option<MedianRule>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file; repeat for several splits.
    #[arg(long, required = true)]
    split: Vec<PathBuf>,
}

#[derive(Args)]
struct Parse {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A ListOps expression, e.g. "[MAX 2 [MIN 8 3 ] 1 ]".
    #[arg(long)]
    input: String,
    /// Also report span F1 against the gold tree.
    #[arg(long)]
    gold: bool,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
}

fn ranges(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|r| {
            let (lo, hi) = r
                .trim()
                .split_once('-')
                .with_context(|| format!("range {r:?} is not lo-hi"))?;
            Ok((lo.trim().parse()?, hi.trim().parse()?))
        })
        .collect()
}

fn gen_data(a: GenData) -> Result<()> {
    let mut p = if a.paper_scale {
        SplitParams::paper_scale()
    } else {
        SplitParams::default()
    };
    macro_rules! take {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { p.$f = v; })* };
    }
    take!(
        seed,
        train_count,
        dev_count,
        test_count,
        train_max_length,
        train_max_depth,
        min_args,
        train_max_args
    );
    take!(nest_prob, test_nest_prob, test_max_depth, test_max_length, median_rule);
    if let Some(s) = &a.test_lengths {
        p.test_lengths = ranges(s)?;
    }
    if let Some(s) = &a.test_depths {
        p.test_depths = ranges(s)?;
    }
    if let Some(s) = &a.test_arities {
        p.test_arities = s.split(',').map(|x| x.trim().parse()).collect::<Result<_, _>>()?;
    }
    let plan = SplitPlan::new(a.split, &p)?;
    let files = build_splits(&plan, &a.out)?;
    println!("train\t{}", files.train.display());
    println!("dev\t{}", files.dev.display());
    for (name, path) in &files.tests {
        println!("{name}\t{}", path.display());
    }
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&a.overrides)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let outcome = harness::train(&cfg, &mut |m| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  dev acc {:.4}  dev loss {:.4}{}",
            m.epoch,
            m.train_loss,
            m.dev_accuracy,
            m.dev_loss,
            if m.best { "  *" } else { "" }
        );
    })?;
    println!("{}", serde_json::to_string(&outcome.summary)?);
    eprintln!("checkpoint: {}", outcome.checkpoint.display());
    eprintln!("metrics:    {}", outcome.metrics_path.display());
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    for split in &a.split {
        let r = harness::evaluate(&a.checkpoint, split)?;
        println!(
            "{}",
            serde_json::json!({ "split": split.display().to_string(), "accuracy": r.accuracy, "loss": r.loss, "count": r.count })
        );
    }
    Ok(())
}

fn parse(a: Parse) -> Result<()> {
    let (cfg, model, store) = harness::load_checkpoint(&a.checkpoint)?;
    let tokens = listops::tokenize(&a.input)?;
    let words: Vec<&str> = a.input.split_whitespace().collect();
    let tape = Tape::new();
    let out = model.forward(&store, &tape, &tokens, false, &mut rng::stream(cfg.seed, 0))?;
    let gold = if a.gold { Some(gold_tree_for(&tokens)?) } else { None };
    let rep = report(extract_parses(&out.encoded, &words)?, gold.as_ref())?;
    for p in &rep.parses {
        println!("{:.6}\t{}", p.probability, p.tree);
    }
    eprintln!("prediction {}  entropy {:.4}", out.prediction(), rep.entropy);
    if let (Some(top), Some(exp)) = (rep.top_f1, rep.expected_f1) {
        eprintln!("span F1 vs gold (full span included): top {top:.4}  expected {exp:.4}");
    }
    Ok(())
}

fn gradcheck(a: Gradcheck) -> Result<bool> {
    let mut ok = true;
    for suite in gradcheck::standard_suites(a.seed)? {
        let pass = suite.passes(a.tolerance);
        ok &= pass;
        println!(
            "{}\t{}\tmax rel err {:.3e}\t{} tensors",
            if pass { "PASS" } else { "FAIL" },
            suite.suite,
            suite.max_rel_error(),
            suite.tensors.len()
        );
        for t in suite.tensors.iter().filter(|t| t.rel_error > a.tolerance) {
            println!("\t{}\trel err {:.3e}", t.name, t.rel_error);
        }
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(*a).map(|_| true),
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Parse(a) => parse(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
