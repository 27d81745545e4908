//! `auecrl` command-line interface.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 IO or file
//! format error, 4 numerical failure, 5 gradient check failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::knowledge::{KnowledgeBase, PriorMatrix};
use crate::model::ModelState;
use crate::synthdata::{self, Dataset, GenConfig};
use crate::training::{self, LossSetup, Metrics, Stage};
use crate::verify::{self, CheckOp, SuiteConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERICS: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

pub const METRICS_SCHEMA: u32 = 1;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) | Error::Format(_) => EXIT_IO,
        Error::Numerics(_) => EXIT_NUMERICS,
        Error::Parse(_) | Error::Validation(_) | Error::Shape(_) | Error::Config(_) => EXIT_CONFIG,
    }
}

#[derive(Debug, Parser)]
#[command(name = "auecrl", version, about = "AU-guided expression recognition on synthetic data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration file (`key = value`, `[stageN]` sections).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Config override, repeatable: `--set stage2.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted synthetic dataset.
    GenData(GenDataArgs),
    /// Run the three-stage schedule, or a single stage.
    Train(TrainArgs),
    /// Report accuracy of a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Finite-difference verification of all gradients.
    Gradcheck(GradcheckArgs),
    /// Print the learned correlation matrix and attention statistics.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = GenConfig::default().n_samples)]
    pub n: usize,
    #[arg(long, default_value_t = GenConfig::default().input_dim)]
    pub dim: usize,
    /// Mean offset along class and AU directions.
    #[arg(long, default_value_t = GenConfig::default().signal_strength)]
    pub signal: f64,
    /// Per-coordinate Gaussian noise standard deviation.
    #[arg(long, default_value_t = GenConfig::default().noise_std)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training data; overrides `data` in the config.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints and `losses.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Run only this stage, resuming from the previous stage's checkpoint.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=3))]
    pub stage: Option<u32>,
    /// Checkpoint to resume from; defaults to `<out>/stage{k-1}.ckpt`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Epochs for every stage.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Maximum relative error. Rounding puts a practical floor near 1e-7.
    #[arg(long, default_value_t = verify::DEFAULT_TOLERANCE)]
    pub tol: f64,
    #[arg(long, default_value_t = verify::DEFAULT_STEP)]
    pub step: f64,
    #[arg(long, default_value_t = verify::DEFAULT_INSTANCES)]
    pub instances: usize,
    /// Comma-separated subset of l_au, l_p, l_n, l_e, pipeline.
    #[arg(long, value_delimiter = ',')]
    pub ops: Vec<String>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset for attention statistics.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub topk: usize,
    #[arg(long)]
    pub json: bool,
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path).map_err(|e| match e {
            Error::Io(io) => Error::Io(std::io::Error::new(
                io.kind(),
                format!("{}: {io}", path.display()),
            )),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn io_context<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    io_context(path, Dataset::read(path))
}

fn load_model(path: &Path, cfg: &RunConfig, prior: &PriorMatrix) -> Result<ModelState> {
    io_context(path, checkpoint::load(path, &cfg.model, prior))
}

/// Parses `args` (including the program name) and runs the command.
/// Normal output goes to `out`, diagnostics to stderr. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return if code == 0 { EXIT_OK } else { EXIT_CONFIG };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Gradcheck(a) => gradcheck(a, out),
        Command::Inspect(a) => inspect(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = run_config(&a.common)?;
    let (kb, prior) = cfg.knowledge()?;
    let gen = GenConfig {
        n_samples: a.n,
        input_dim: a.dim,
        n_expr: kb.n_expressions(),
        n_aus: kb.n_aus(),
        signal_strength: a.signal,
        noise_std: a.noise,
        seed: cfg.seed,
    };
    let data = synthdata::generate(&gen, &prior)?;
    io_context(&a.out, data.write(&a.out))?;
    writeln!(out, "wrote {} samples to {}", data.len(), a.out.display())?;
    for (name, count) in kb.expressions().iter().zip(data.class_histogram()) {
        writeln!(out, "  {name:<12} {count}")?;
    }
    Ok(EXIT_OK)
}

fn stage_path(dir: &Path, stage: u32) -> PathBuf {
    dir.join(format!("stage{stage}.ckpt"))
}

fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let mut cfg = run_config(&a.common)?;
    if let Some(d) = &a.data {
        cfg.data_path = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    if let Some(e) = a.epochs {
        cfg.set("epochs", &e.to_string())?;
    }
    cfg.validate()?;
    let (kb, prior) = cfg.knowledge()?;
    let data_path = cfg
        .data_path
        .clone()
        .ok_or_else(|| Error::Config("no training data: pass --data or set `data`".into()))?;
    let data = read_dataset(&data_path)?;

    let stages: Vec<Stage> = match a.stage {
        Some(k) => vec![Stage::from_number(k)?],
        None => Stage::ALL.to_vec(),
    };
    let first = stages[0];
    let mut model = if first == Stage::One {
        ModelState::init(&cfg.model, &prior, cfg.seed)?
    } else {
        let need = first.number() - 1;
        let path = a
            .resume
            .clone()
            .unwrap_or_else(|| stage_path(&cfg.output_dir, need));
        if !path.exists() {
            return Err(Error::Config(format!(
                "stage {first} continues from a stage-{need} checkpoint; {} does not exist \
                 (train stage {need} first or pass --resume)",
                path.display()
            )));
        }
        let m = load_model(&path, &cfg, &prior)?;
        if m.stage() < need {
            return Err(Error::Config(format!(
                "stage {first} needs a model that completed stage {need}; {} is at stage {}",
                path.display(),
                m.stage()
            )));
        }
        m
    };

    io_context(&cfg.output_dir, std::fs::create_dir_all(&cfg.output_dir).map_err(Error::from))?;
    let setup = LossSetup::new(&kb, &prior, cfg.alpha, cfg.lambda)?;
    let mut history = Vec::new();
    for stage in stages {
        let plan = cfg.stage(stage);
        let h = training::run_stage(plan, &mut model, &data, &setup, cfg.seed)?;
        let last = h.last().expect("at least one epoch");
        if !a.json {
            writeln!(
                out,
                "stage {stage}: {} epochs, final loss {:.6}",
                h.len(),
                last.loss
            )?;
        }
        history.extend(h);
        let path = stage_path(&cfg.output_dir, stage.number());
        io_context(&path, checkpoint::save(&model, &path))?;
    }
    let csv = cfg.output_dir.join("losses.csv");
    io_context(&csv, training::write_loss_csv(&history, &csv))?;
    let metrics = training::evaluate(&model, &data)?;
    if a.json {
        let v = json!({
            "schema": METRICS_SCHEMA,
            "stage": model.stage(),
            "train_metrics": metrics_json(&metrics, kb.expressions()),
            "final_loss": history.last().map(|r| r.loss),
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&v).expect("json"))?;
    } else {
        writeln!(
            out,
            "training-set average accuracy {:.2}%, overall {:.2}%",
            metrics.average_acc, metrics.overall_acc
        )?;
        writeln!(out, "checkpoints and losses.csv written to {}", cfg.output_dir.display())?;
    }
    Ok(EXIT_OK)
}

pub fn metrics_json(m: &Metrics, classes: &[String]) -> serde_json::Value {
    let per_class: serde_json::Map<String, serde_json::Value> = classes
        .iter()
        .zip(&m.per_class_acc)
        .map(|(c, a)| (c.clone(), json!(a)))
        .collect();
    json!({
        "schema": METRICS_SCHEMA,
        "classes": classes,
        "per_class_accuracy": per_class,
        "average_accuracy": m.average_acc,
        "overall_accuracy": m.overall_acc,
        "confusion": m.confusion,
    })
}

fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = run_config(&a.common)?;
    let (kb, prior) = cfg.knowledge()?;
    let model = load_model(&a.checkpoint, &cfg, &prior)?;
    let data = read_dataset(&a.data)?;
    let m = training::evaluate(&model, &data)?;
    if a.json {
        writeln!(
            out,
            "{}",
            serde_json::to_string_pretty(&metrics_json(&m, kb.expressions())).expect("json")
        )?;
        return Ok(EXIT_OK);
    }
    writeln!(out, "checkpoint stage {}, {} samples", model.stage(), data.len())?;
    for (name, acc) in kb.expressions().iter().zip(&m.per_class_acc) {
        match acc {
            Some(v) => writeln!(out, "  {name:<12} {v:6.2}%")?,
            None => writeln!(out, "  {name:<12}    n/a")?,
        }
    }
    writeln!(out, "average accuracy {:.2}%", m.average_acc)?;
    writeln!(out, "overall accuracy {:.2}%", m.overall_acc)?;
    writeln!(out, "confusion (rows true, columns predicted):")?;
    write!(out, "  {:<12}", "")?;
    for name in kb.expressions() {
        write!(out, " {:>6}", abbreviate(name))?;
    }
    writeln!(out)?;
    for (name, row) in kb.expressions().iter().zip(&m.confusion) {
        write!(out, "  {name:<12}")?;
        for c in row {
            write!(out, " {c:>6}")?;
        }
        writeln!(out)?;
    }
    Ok(EXIT_OK)
}

fn abbreviate(name: &str) -> String {
    name.chars().take(6).collect()
}

fn gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = run_config(&a.common)?;
    let ops = if a.ops.is_empty() {
        CheckOp::ALL.to_vec()
    } else {
        a.ops.iter().map(|s| s.trim().parse()).collect::<Result<Vec<_>>>()?
    };
    let suite = SuiteConfig {
        instances: a.instances,
        step: a.step,
        tolerance: a.tol,
        seed: a.common.seed.unwrap_or(cfg.seed),
        ops: ops.clone(),
    };
    let report = verify::run_suite(&suite)?;
    if a.json {
        let per_op: Vec<_> = ops
            .iter()
            .map(|&op| json!({"op": op.name(), "max_rel_error": report.max_rel_error(op)}))
            .collect();
        let v = json!({
            "tolerance": a.tol,
            "step": a.step,
            "instances": a.instances,
            "passed": report.passed(),
            "ops": per_op,
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&v).expect("json"))?;
    } else {
        for &op in &ops {
            let err = report.max_rel_error(op);
            let ok = err <= a.tol;
            writeln!(
                out,
                "{:<9} max rel error {err:.3e}  {}",
                op.name(),
                if ok { "ok" } else { "FAIL" }
            )?;
        }
    }
    if report.passed() {
        return Ok(EXIT_OK);
    }
    if let Some(w) = report.worst() {
        if let Some(p) = w.report.worst() {
            eprintln!(
                "gradient check failed: op {} instance {} parameter `{}`[{}] analytic {:e} numeric {:e} rel error {:e} > {:e}",
                w.op,
                w.instance,
                p.name,
                p.worst_index,
                p.analytic_at_worst,
                p.numeric_at_worst,
                p.max_rel_error,
                a.tol
            );
        }
    }
    Ok(EXIT_GRADCHECK)
}

fn frobenius_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn au_label(kb: &KnowledgeBase, i: usize) -> String {
    format!("AU{}", kb.aus()[i].facs)
}

fn inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<i32> {
    let cfg = run_config(&a.common)?;
    let (kb, prior) = cfg.knowledge()?;
    let model = load_model(&a.checkpoint, &cfg, &prior)?;
    let w = model.w_ea();
    let (e, n_aus) = (kb.n_expressions(), kb.n_aus());
    let distance = frobenius_distance(w.data(), prior.tensor().data());
    let stats = match &a.data {
        Some(p) => Some(training::attention_stats(&model, &read_dataset(p)?)?),
        None => None,
    };
    let k = a.topk.min(n_aus);
    let top: Vec<Option<Vec<usize>>> = (0..e)
        .map(|r| match &stats {
            Some(s) => s.per_expression[r].as_ref().map(|row| training::top_k(row, k)),
            None => Some(training::top_k(&w.data()[r * n_aus..(r + 1) * n_aus], k)),
        })
        .collect();
    let ranked_by = if stats.is_some() { "mean attention weight" } else { "W_EA" };

    if a.json {
        let label = |i: usize| au_label(&kb, i);
        let v = json!({
            "stage": model.stage(),
            "aus": (0..n_aus).map(label).collect::<Vec<_>>(),
            "expressions": kb.expressions(),
            "w_ea": (0..e).map(|r| w.data()[r * n_aus..(r + 1) * n_aus].to_vec()).collect::<Vec<_>>(),
            "w_ea_prior_distance": distance,
            "attention": stats.as_ref().map(|s| json!({
                "mean_weight": s.mean_weight,
                "existence_rate": s.existence_rate,
            })),
            "top_k_by": ranked_by,
            "top_k": kb.expressions().iter().zip(&top).map(|(name, t)| {
                (name.clone(), json!(t.as_ref().map(|t| t.iter().map(|&i| label(i)).collect::<Vec<_>>())))
            }).collect::<serde_json::Map<_, _>>(),
        });
        writeln!(out, "{}", serde_json::to_string_pretty(&v).expect("json"))?;
        return Ok(EXIT_OK);
    }

    writeln!(out, "checkpoint stage {}", model.stage())?;
    writeln!(out, "W_EA (rows expressions, columns AUs):")?;
    write!(out, "  {:<12}", "")?;
    for i in 0..n_aus {
        write!(out, " {:>5}", au_label(&kb, i))?;
    }
    writeln!(out)?;
    for (r, name) in kb.expressions().iter().enumerate() {
        write!(out, "  {name:<12}")?;
        for i in 0..n_aus {
            write!(out, " {:>5.3}", w.at2(r, i))?;
        }
        writeln!(out)?;
    }
    writeln!(out, "Frobenius distance to prior: {distance:.6}")?;
    if let Some(s) = &stats {
        writeln!(out, "attention over dataset:")?;
        writeln!(out, "  {:<6} {:>12} {:>15}", "AU", "mean weight", "existence rate")?;
        for i in 0..n_aus {
            writeln!(
                out,
                "  {:<6} {:>12.4} {:>15.4}",
                au_label(&kb, i),
                s.mean_weight[i],
                s.existence_rate[i]
            )?;
        }
    }
    writeln!(out, "top-{k} AUs per expression by {ranked_by}:")?;
    for (name, t) in kb.expressions().iter().zip(&top) {
        match t {
            Some(t) => {
                let labels: Vec<String> = t.iter().map(|&i| au_label(&kb, i)).collect();
                writeln!(out, "  {name:<12} {}", labels.join(" "))?;
            }
            None => writeln!(out, "  {name:<12} n/a")?,
        }
    }
    Ok(EXIT_OK)
}
