//! Command-line entry points and the JSON run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::builder::{build_benchmark, AssignmentFile, BuildOutput, BuilderConfig, SourceDataset};
use crate::domain::{validate_benchmark, Benchmark, Split};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradchecks, TOLERANCE};
use crate::metrics::{evaluate_step, ScoreTable};
use crate::model::{load_embeddings, world_benchmark, EmbeddingProvider, WorldSpec};
use crate::semantics::load_taxonomy;
use crate::trainer::{figure1_experiment, run_compil, Fig1Config, Strategy, TrainConfig};

/// Input and output locations. Command-line flags override these.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub taxonomy: Option<PathBuf>,
    pub ic: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub benchmark: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub builder: BuilderConfig,
    pub train: TrainConfig,
    pub fig1: Fig1Config,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Reseeds every random source from one value: world and builder take it
    /// directly, training seeds become `seed, seed + 1, ...` keeping their
    /// count.
    pub fn reseed(&mut self, seed: u64) {
        self.world.seed = seed;
        self.builder.seed = seed;
        let n = self.train.seeds.len() as u64;
        self.train.seeds = (0..n).map(|i| seed.wrapping_add(i)).collect();
    }
}

/// `key = default` lines for every configuration key.
pub fn config_reference() -> String {
    fn walk(prefix: &str, v: &Value, out: &mut String) {
        match v {
            Value::Object(m) => {
                for (k, child) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, child, out);
                }
            }
            Value::Null => writeln!(out, "  {prefix} = (unset)").expect("String write"),
            other => writeln!(out, "  {prefix} = {other}").expect("String write"),
        }
    }
    let mut out = String::from("Configuration keys (JSON, every key optional) and defaults:\n");
    let v = serde_json::to_value(RunConfig::default()).expect("config serializes");
    walk("", &v, &mut out);
    out.push_str(
        "Unset train.pseudo_per_comp means the mean number of real training samples per composition; \
         unset train.d_tok means the feature dimension; unset train.synth_epochs means \
         train.epochs_per_task.\n",
    );
    out
}

#[derive(Parser, Debug)]
#[command(name = "compil", version, about = "Composition-incremental benchmark construction, training and evaluation")]
pub struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random source (world, builder, training seeds).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory [default: paths.output or "out"].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads [default: all cores].
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a benchmark from a dataset CSV and a taxonomy: writes
    /// benchmark.json and assignment.json.
    Build {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        ic: Option<PathBuf>,
    },
    /// Generate the synthetic world: writes world.emb, benchmark.json and
    /// assignment.json.
    Worldgen,
    /// Train and evaluate one strategy: writes metrics.json, run_log.jsonl
    /// and checkpoints. Without a benchmark the synthetic world is generated.
    Run {
        #[arg(long, default_value = "pseudo_replay", value_parser = parse_strategy)]
        strategy: Strategy,
        #[arg(long)]
        benchmark: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Score an external model from a SCORES file: writes metrics.json.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        /// Current step [default: the largest task with a seen label].
        #[arg(long)]
        step: Option<usize>,
    },
    /// Check every analytic gradient against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// Compositions versus samples sweep: writes fig1.json and fig1.csv.
    Fig1,
}

fn parse_strategy(s: &str) -> std::result::Result<Strategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        let path = self.out.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn write_build(&self, build: &BuildOutput) -> Result<()> {
        let b = &build.benchmark;
        let report = validate_benchmark(b);
        if !report.is_valid() {
            return Err(Error::Validation(report.to_string()));
        }
        self.write("benchmark.json", b.to_json()?.as_bytes())?;
        let assignment = AssignmentFile {
            groups: build.groups.clone(),
            assignment: build.outcome.assignment.clone(),
            objective: build.outcome.value,
            greedy_objective: build.outcome.greedy_value,
        };
        self.write("assignment.json", (serde_json::to_string_pretty(&assignment)? + "\n").as_bytes())?;
        println!(
            "objective {} (greedy {})",
            build.outcome.value, build.outcome.greedy_value
        );
        for t in 1..=b.task_comps.len() {
            let n_samples = b.samples.iter().filter(|s| s.task == t).count();
            let label = if t == b.task_comps.len() { " (held out)" } else { "" };
            println!("task {t}{label}: {} compositions, {n_samples} samples", b.comps(t).len());
        }
        Ok(())
    }
}

fn require(p: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.ok_or_else(|| Error::Validation(format!("missing path: {what} (flag or paths.{what})")))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn cmd_build(ctx: &Ctx, dataset: Option<PathBuf>, taxonomy: Option<PathBuf>, ic: Option<PathBuf>) -> Result<()> {
    let paths = &ctx.cfg.paths;
    let dataset = require(dataset.or_else(|| paths.dataset.clone()), "dataset")?;
    let taxonomy = require(taxonomy.or_else(|| paths.taxonomy.clone()), "taxonomy")?;
    let ic = require(ic.or_else(|| paths.ic.clone()), "ic")?;
    let tax = load_taxonomy(&read(&taxonomy)?, &read(&ic)?)?;
    let data = SourceDataset::load(&dataset)?;
    let sim = tax.similarity_matrix(data.vocab.objects());
    if sim.fallback > 0 {
        eprintln!("warning: {} objects are missing from the taxonomy", sim.fallback);
    }
    let build = build_benchmark(
        &data.vocab,
        &data.seen_comps(),
        &data.unseen_comps(),
        &data.all_samples(),
        &sim,
        &ctx.cfg.builder,
    )?;
    ctx.write_build(&build)
}

fn cmd_worldgen(ctx: &Ctx) -> Result<()> {
    let w = world_benchmark(&ctx.cfg.world, &ctx.cfg.builder)?;
    let path = ctx.write("world.emb", w.provider.to_emb_text().as_bytes())?;
    println!("wrote {}", path.display());
    ctx.write_build(&w.build)
}

fn load_run_inputs(ctx: &Ctx, benchmark: Option<PathBuf>, embeddings: Option<PathBuf>) -> Result<(Benchmark, EmbeddingProvider)> {
    let benchmark = benchmark.or_else(|| ctx.cfg.paths.benchmark.clone());
    let embeddings = embeddings.or_else(|| ctx.cfg.paths.embeddings.clone());
    match (benchmark, embeddings) {
        (Some(b), Some(e)) => Ok((Benchmark::load(&b)?, load_embeddings(&e)?)),
        (None, None) => {
            let w = world_benchmark(&ctx.cfg.world, &ctx.cfg.builder)?;
            Ok((w.build.benchmark, w.provider))
        }
        _ => Err(Error::Validation(
            "benchmark and embeddings must be given together (or neither, for the synthetic world)".into(),
        )),
    }
}

fn cmd_run(ctx: &Ctx, strategy: Strategy, benchmark: Option<PathBuf>, embeddings: Option<PathBuf>) -> Result<()> {
    let (b, p) = load_run_inputs(ctx, benchmark, embeddings)?;
    let report = validate_benchmark(&b);
    if !report.is_valid() {
        return Err(Error::Validation(report.to_string()));
    }
    let n_train = b.samples.iter().filter(|s| s.split == Split::Train).count();
    println!("{strategy}: {} tasks, {n_train} training samples", b.n_tasks());
    let run = run_compil(&b, &p, &ctx.cfg.train, strategy)?;
    run.write(&ctx.out)?;
    println!("{}", crate::metrics::CompilSummary::header());
    println!("{}", run.mean.row());
    Ok(())
}

fn cmd_eval(ctx: &Ctx, scores: &Path, step: Option<usize>) -> Result<()> {
    let st = ScoreTable::load(scores)?;
    let step = match step {
        Some(s) => s,
        None => st
            .labels
            .iter()
            .zip(&st.sample_task)
            .filter(|(l, _)| st.seen_mask[**l])
            .map(|(_, t)| *t)
            .max()
            .ok_or_else(|| Error::Degenerate("no sample has a seen label; pass --step".into()))?,
    };
    let m = evaluate_step(&st, step)?;
    ctx.write("metrics.json", (serde_json::to_string_pretty(&m)? + "\n").as_bytes())?;
    println!("step {step}: S {} U {} AUC {}", m.seen, m.unseen, m.auc);
    Ok(())
}

fn cmd_gradcheck(seeds: u64) -> Result<()> {
    let seeds: Vec<u64> = (0..seeds).collect();
    let report = run_gradchecks(&seeds)?;
    let mut failed = Vec::new();
    for t in &report {
        let verdict = if t.passed() { "ok" } else { "FAIL" };
        println!("{:<8} max rel err {:.3e} over {} seeds  {verdict}", t.term, t.max_rel_err, t.seeds);
        if !t.passed() {
            failed.push(t.term);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check above {TOLERANCE:e} for {}",
            failed.join(", ")
        )))
    }
}

fn cmd_fig1(ctx: &Ctx) -> Result<()> {
    let r = figure1_experiment(&ctx.cfg.world, &ctx.cfg.fig1, &ctx.cfg.train)?;
    ctx.write("fig1.json", (serde_json::to_string_pretty(&r)? + "\n").as_bytes())?;
    ctx.write("fig1.csv", r.to_csv().as_bytes())?;
    let show = |s: Option<f64>| s.map_or("absent".to_string(), |v| format!("{v:.4}"));
    for (name, pts) in [("compositions", &r.comps), ("samples", &r.samples)] {
        for p in pts {
            println!("{name:<12} {:>4}: {:.4} +/- {:.4}", p.count, p.mean, p.half_width);
        }
    }
    println!("slope compositions {}", show(r.slope_comps));
    println!("slope samples      {}", show(r.slope_samples));
    Ok(())
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let reference = config_reference();
    let mut cmd = Cli::command().after_long_help(reference.clone());
    for name in ["build", "worldgen", "run", "eval", "gradcheck", "fig1"] {
        let r = reference.clone();
        cmd = cmd.mut_subcommand(name, |c| c.after_long_help(r));
    }
    let cli = match cmd.try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.paths.output.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let ctx = Ctx { cfg, out };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(Error::Validation("--jobs must be positive".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Validation(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Build { dataset, taxonomy, ic } => cmd_build(&ctx, dataset, taxonomy, ic),
        Command::Worldgen => cmd_worldgen(&ctx),
        Command::Run {
            strategy,
            benchmark,
            embeddings,
        } => cmd_run(&ctx, strategy, benchmark, embeddings),
        Command::Eval { scores, step } => cmd_eval(&ctx, &scores, step),
        Command::Gradcheck { seeds } => cmd_gradcheck(seeds),
        Command::Fig1 => cmd_fig1(&ctx),
    })
}
