//! `tcgnn` command-line front end.
//!
//! Every subcommand prints its result to stdout (JSON unless noted) and, on
//! failure, a one-line JSON error object to stderr with exit code 1.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tcgnn_core::constraints::{self, PoolingAssignment};
use tcgnn_core::experiment::{self, ExperimentConfig};
use tcgnn_core::fragments::{aggregate, extract_from_checkpoint, ExtractOptions, FragmentReport};
use tcgnn_core::kernels::{enumerate_fragments, gram, KernelConfig, KernelKind};
use tcgnn_core::synth::SynthCorpusSpec;
use tcgnn_core::trainer::{evaluate, EncodedSplit, LambdaMode};
use tcgnn_core::treebank::{load_jsonl, to_graph, write_jsonl, ConstituencyTree, Sample};
use tcgnn_core::verify;
use tcgnn_core::{ConstraintSet, PoolActivation, Tensor};

#[derive(Parser)]
#[command(name = "tcgnn", version, about = "Tree-kernel-constrained graph pooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse bracketed trees (argument or one per stdin line) and echo them canonically.
    Parse(ParseArgs),
    /// Gram matrix as CSV, or fragment inventories as JSON lines.
    Kernel(KernelArgs),
    /// Evaluate every constraint on one tree and one assignment matrix.
    CheckConstraints(CheckArgs),
    /// Finite-difference check of every differentiable function.
    Gradcheck(GradArgs),
    /// Exhaustive kernel and constraint oracle suites.
    OracleVerify(OracleArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Per-class F1 of a checkpoint on a dataset, as CSV.
    Evaluate(EvalArgs),
    /// Extract learned fragments from a checkpoint.
    ExtractFragments(ExtractArgs),
    /// Write a synthetic planted-pattern corpus as JSON lines.
    GenCorpus(GenArgs),
}

#[derive(Args)]
struct ParseArgs {
    /// Tree text; stdin is read when absent.
    tree: Option<String>,
}

#[derive(Args)]
struct KernelArgs {
    /// Dataset JSONL, or a file with one bracketed tree per line.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "sstk")]
    kernel: KernelKind,
    /// Decay on fragment size. Defaults to the kernel's usual value.
    #[arg(long)]
    lambda: Option<f64>,
    /// PTK gap decay.
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    no_normalize: bool,
    /// Emit fragment inventories instead of the Gram matrix.
    #[arg(long)]
    fragments: bool,
    #[arg(long, default_value_t = 12)]
    max_nodes: usize,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    tree: String,
    /// JSON file holding the n×k assignment as a list of rows.
    #[arg(long)]
    assignment: PathBuf,
    #[arg(long, default_value = "sigmoid", value_parser = parse_activation)]
    activation: PoolActivation,
    #[arg(long, default_value_t = 0.3)]
    delta: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 20)]
    seeds: u64,
}

#[derive(Args)]
struct OracleArgs {
    /// Node cap of the constraint suite.
    #[arg(long, default_value_t = 8)]
    max_nodes: usize,
    #[arg(long, default_value_t = 50)]
    constraint_trees: usize,
    #[arg(long, default_value_t = 12)]
    kernel_max_nodes: usize,
    #[arg(long, default_value_t = 200)]
    kernel_trees: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    kernel: Option<KernelKind>,
    /// `dual`, `fixed`, or `fixed:<csv>`.
    #[arg(long)]
    lambda_mode: Option<LambdaMode>,
    #[arg(long)]
    max_nodes: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Train plain GNN + DiffPool.
    #[arg(long)]
    unconstrained: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 128)]
    max_nodes: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.3)]
    threshold: f64,
    #[arg(long)]
    largest_component: bool,
    #[arg(long, default_value_t = 10)]
    top: usize,
    #[arg(long, default_value_t = 128)]
    max_nodes: usize,
    /// Directory for fragments.jsonl and fragments.txt; text goes to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    /// JSON corpus spec; defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_per_class: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    max_nodes: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_activation(s: &str) -> Result<PoolActivation, String> {
    match s {
        "sigmoid" => Ok(PoolActivation::Sigmoid),
        "softmax" => Ok(PoolActivation::Softmax),
        _ => Err(format!("unknown activation {s:?}; expected sigmoid or softmax")),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        let causes: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
        eprintln!("{}", json!({ "error": e.to_string(), "causes": causes }));
        std::process::exit(1);
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Parse(a) => parse(a),
        Command::Kernel(a) => kernel(a),
        Command::CheckConstraints(a) => check_constraints(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::OracleVerify(a) => oracle_verify(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => eval(a),
        Command::ExtractFragments(a) => extract_fragments(a),
        Command::GenCorpus(a) => gen_corpus(a),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse(a: ParseArgs) -> Result<()> {
    let lines: Vec<String> = match a.tree {
        Some(t) => vec![t],
        None => io::stdin().lock().lines().collect::<Result<_, _>>()?,
    };
    for line in lines.iter().filter(|l| !l.trim().is_empty()) {
        let t = ConstituencyTree::parse(line)?;
        println!(
            "{}",
            json!({ "tree": t.render(), "n_nodes": t.len(), "depth": t.depth(), "n_leaves": t.leaves().count() })
        );
    }
    Ok(())
}

/// Dataset JSONL or plain bracketed lines.
fn read_trees(path: &Path, max_nodes: usize) -> Result<Vec<ConstituencyTree>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    if first.trim_start().starts_with('{') {
        return Ok(load_jsonl(path, max_nodes, false)?.into_iter().map(|s| s.tree).collect());
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let t = ConstituencyTree::parse(l)?;
            t.check_size(max_nodes)?;
            Ok(t)
        })
        .collect()
}

fn output(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(io::BufWriter::new(
            fs::File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn kernel(a: KernelArgs) -> Result<()> {
    let trees = read_trees(&a.data, a.max_nodes)?;
    let mut w = output(a.out.as_deref())?;
    if a.fragments {
        for (i, t) in trees.iter().enumerate() {
            for f in enumerate_fragments(t, a.kernel, a.max_nodes)? {
                serde_json::to_writer(&mut w, &json!({ "tree": i, "fragment": f.canonical, "occurrences": f.occurrences }))?;
                writeln!(w)?;
            }
        }
        return Ok(w.flush()?);
    }
    let mut cfg = KernelConfig::new(a.kernel);
    if let Some(l) = a.lambda {
        cfg.decay_lambda = l;
    }
    if let Some(m) = a.mu {
        cfg.decay_mu = m;
    }
    cfg.normalized = !a.no_normalize;
    cfg.validate()?;
    let g = gram(&trees, &cfg);
    let mut csv = csv::Writer::from_writer(w);
    for r in 0..g.rows() {
        csv.write_record(g.row(r).iter().map(|v| v.to_string()))?;
    }
    csv.flush()?;
    Ok(())
}

fn check_constraints(a: CheckArgs) -> Result<()> {
    let tree = ConstituencyTree::parse(&a.tree)?;
    let rows: Vec<Vec<f64>> = serde_json::from_str(
        &fs::read_to_string(&a.assignment).with_context(|| format!("reading {}", a.assignment.display()))?,
    )?;
    if rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
        bail!("assignment must be a non-empty list of equal-length rows");
    }
    let vocab = tcgnn_core::Vocabulary::build([&tree], false);
    let graph = to_graph(&tree, &vocab);
    let pa = PoolingAssignment::new(Tensor::from_rows(&rows), a.activation, &graph)
        .map_err(anyhow::Error::msg)?;
    let set = ConstraintSet {
        kinds: tcgnn_core::ConstraintKind::ALL.to_vec(),
        epsilon: a.epsilon,
        delta: a.delta,
        alpha: a.alpha,
    };
    set.validate().map_err(anyhow::Error::msg)?;
    let values: serde_json::Map<String, serde_json::Value> = set
        .kinds
        .iter()
        .map(|&k| {
            let v = constraints::evaluate(k, &pa, &set);
            Ok((k.name().to_string(), serde_json::to_value(v)?))
        })
        .collect::<Result<_>>()?;
    print_json(&values)
}

fn gradcheck(a: GradArgs) -> Result<()> {
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let report = verify::gradient_suite(&seeds, a.h, a.tol)?;
    print_json(&report)?;
    if !report.passed {
        bail!("gradient check failed");
    }
    Ok(())
}

fn oracle_verify(a: OracleArgs) -> Result<()> {
    let kernels = verify::kernel_suite(a.seed, a.kernel_trees, a.kernel_max_nodes);
    let constraints = verify::constraint_suite(a.seed, a.constraint_trees, a.max_nodes);
    let passed = kernels.passed && constraints.passed;
    print_json(&json!({ "passed": passed, "kernels": kernels, "constraints": constraints }))?;
    if !passed {
        bail!("oracle suites disagree with the implementation");
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(k) = a.kernel {
        cfg = cfg.with_kernel(k);
    }
    if let Some(m) = a.lambda_mode {
        cfg.train.lambda_mode = m;
    }
    if let Some(n) = a.max_nodes {
        cfg.max_nodes = n;
    }
    if let Some(t) = a.threshold {
        cfg.fragments.extract.threshold = t;
    }
    if a.unconstrained {
        cfg.constrained = false;
    }
    let out = experiment::run(cfg, &a.out)?;
    let folds: Vec<_> = out
        .folds
        .iter()
        .map(|f| {
            json!({
                "fold": f.fold,
                "best_epoch": f.report.best_epoch,
                "val_macro_f1": f.report.best_val_macro_f1,
                "val_mean_violation": f.report.best_val_mean_violation,
                "test_macro_f1": f.test.as_ref().map(|t| t.f1.macro_f1),
                "fragment_connected_rate": f.fragments.rates.connected,
            })
        })
        .collect();
    print_json(&json!({ "out": a.out, "folds": folds }))
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = experiment::load_checkpoint(&a.checkpoint)?;
    let samples = load_jsonl(&a.data, a.max_nodes, false)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let data = EncodedSplit::encode(&refs, &ck.vocabulary, &ck.class_names)?;
    let summary = evaluate(
        &ck.config,
        &ck.params,
        &data,
        ck.class_names.len(),
        ck.config.constraint_set.as_ref(),
    )?;
    let mut csv = csv::Writer::from_writer(output(a.out.as_deref())?);
    csv.write_record(["class", "f1"])?;
    for (c, f) in ck.class_names.iter().zip(&summary.f1.per_class) {
        csv.write_record([c.as_str(), &f.to_string()])?;
    }
    csv.write_record(["macro", &summary.f1.macro_f1.to_string()])?;
    csv.write_record(["mean_violation", &summary.mean_violation.to_string()])?;
    csv.flush()?;
    Ok(())
}

fn extract_fragments(a: ExtractArgs) -> Result<()> {
    let ck = experiment::load_checkpoint(&a.checkpoint)?;
    let samples = load_jsonl(&a.data, a.max_nodes, false)?;
    let opts = ExtractOptions {
        threshold: a.threshold,
        largest_component: a.largest_component,
    };
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        bail!("threshold {} outside (0, 1)", a.threshold);
    }
    let occ = extract_from_checkpoint(&ck, &samples, &opts)?;
    let report = FragmentReport::build(aggregate(&occ), &ck.class_names, a.threshold, a.top)?;
    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            experiment::write_fragments(dir, &report, a.top)?;
            print_json(&json!({ "records": report.records.len(), "rates": report.rates, "hash": report.hash }))
        }
        None => {
            print!("{}", report.render_text(a.top));
            Ok(())
        }
    }
}

fn gen_corpus(a: GenArgs) -> Result<()> {
    let mut spec: SynthCorpusSpec = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => SynthCorpusSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.n_per_class {
        spec.n_per_class = n;
    }
    if let Some(x) = a.noise {
        spec.noise = x;
    }
    if let Some(m) = a.max_nodes {
        spec.max_nodes = m;
    }
    let samples = spec.generate()?;
    let mut w = output(a.out.as_deref())?;
    write_jsonl(&mut w, &samples)?;
    w.flush()?;
    Ok(())
}
