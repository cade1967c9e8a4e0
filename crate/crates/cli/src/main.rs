//! `fennec` command-line front end.
//!
//! Stage subcommands mirror the pipeline stages and read or write one
//! artifact each. `run` executes every stage from a config file. Flags
//! override values from `--config`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fennec_core::archi2vec::{load_graph_dir, ArchEmbeddings};
use fennec_core::data::{load_matrix, Manifest};
use fennec_core::eval::{leave_one_out_eval, EvalReport};
use fennec_core::fda::build_performance_matrix;
use fennec_core::io::write_atomic;
use fennec_core::merge::{fit_proxy_from_space, rank_models, Normalize, ProxyRegressor, RankingReport};
use fennec_core::meta::{fit_meta_from_matrix, MetaLayout, MetaModel};
use fennec_core::nmf::{factorize, NmfInit, TransferSpace};
use fennec_core::pipeline::{
    check_rank_artifacts, history_tasks, matrix_digest, run_with_config, save_matrix_with_digest, PipelineConfig,
    RunOptions, RunSummary,
};
use fennec_core::synth::{generate, SynthConfig};
use fennec_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "fennec", version, about = "Rank pre-trained models for a new task")]
struct Cli {
    /// Master seed; stage seeds are derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Skip stages whose artifacts carry the current config digest.
    #[arg(long, global = true)]
    resume: bool,
    /// Use artifacts whose digests disagree, with a warning.
    #[arg(long, global = true)]
    force: bool,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Pipeline config file (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the performance matrix from forward features.
    Fda(FdaArgs),
    /// Factorize the performance matrix into the transfer space.
    Factorize(FactorizeArgs),
    /// Embed and cluster architecture graphs.
    Archi2vec(Archi2vecArgs),
    /// Fit the meta-feature regression.
    TrainMeta(TrainMetaArgs),
    /// Fit the proxy regressor from task embeddings to task factors.
    TrainProxy(TrainProxyArgs),
    /// Rank every model for one task.
    Rank(RankArgs),
    /// Leave-one-task-out evaluation against ground truth.
    Eval(EvalArgs),
    /// Write a planted synthetic benchmark.
    SynthBench(SynthArgs),
    /// Run every stage from `--config`.
    Run,
}

#[derive(Args, Debug)]
struct FdaArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Stratified probe size per task; 0 scores every sample.
    #[arg(long)]
    probe_size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Task left out of the matrix; repeatable.
    #[arg(long = "exclude")]
    exclude: Vec<String>,
}

#[derive(Args, Debug)]
struct FactorizeArgs {
    #[arg(long)]
    matrix: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    alpha_m: Option<f64>,
    #[arg(long)]
    alpha_d: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    rel_tol: Option<f64>,
    #[arg(long, value_parser = parse_init)]
    init: Option<NmfInit>,
    #[arg(long)]
    restarts: Option<usize>,
}

#[derive(Args, Debug)]
struct Archi2vecArgs {
    #[arg(long)]
    graphs: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    wl: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainMetaArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    matrix: PathBuf,
    /// Architecture embeddings; omitted means counts only.
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long)]
    no_embedding: bool,
    #[arg(long)]
    no_clusters: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainProxyArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    space: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trees: Option<usize>,
}

#[derive(Args, Debug)]
struct RankArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    task: String,
    #[arg(long)]
    space: PathBuf,
    #[arg(long)]
    proxy_model: PathBuf,
    #[arg(long)]
    meta: PathBuf,
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_parser = parse_normalize)]
    normalize: Option<Normalize>,
    #[arg(long)]
    out: PathBuf,
    /// Rows printed to stdout.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    no_archi2vec: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 30)]
    models: usize,
    #[arg(long, default_value_t = 8)]
    tasks: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Ground-truth noise as a fraction of the largest accuracy.
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 16)]
    proxy_dim: usize,
    #[arg(long)]
    out: PathBuf,
}

fn parse_init(s: &str) -> std::result::Result<NmfInit, String> {
    match s {
        "seeded-uniform" => Ok(NmfInit::SeededUniform),
        "nndsvd-like" => Ok(NmfInit::NndsvdLike),
        other => Err(format!("unknown init `{other}` (seeded-uniform | nndsvd-like)")),
    }
}

fn parse_normalize(s: &str) -> std::result::Result<Normalize, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn base_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn manifest_path(flag: &Option<PathBuf>, cfg: &PipelineConfig) -> PathBuf {
    flag.clone().unwrap_or_else(|| cfg.manifest_path())
}

fn init_logging(level: u8) {
    let filter = match level {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(filter)
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
}

fn run_fda(args: &FdaArgs, mut cfg: PipelineConfig) -> Result<()> {
    if let Some(p) = args.probe_size {
        cfg.fda.probe_size = (p > 0).then_some(p);
    }
    if let Some(g) = args.gamma {
        cfg.fda.gamma = g;
    }
    if !args.exclude.is_empty() {
        cfg.targets = args.exclude.clone();
    }
    cfg.validate()?;
    let manifest = Manifest::load(&manifest_path(&args.manifest, &cfg))?;
    let history = history_tasks(&manifest, &cfg.targets);
    let p = build_performance_matrix(&manifest, &history, &manifest.model_ids(), &cfg.fda_config())?;
    save_matrix_with_digest(&p, &args.out, &cfg.offline_digest(&history))?;
    println!("wrote {} ({} models x {} tasks)", args.out.display(), p.nrows(), p.ncols());
    Ok(())
}

fn run_factorize(args: &FactorizeArgs, mut cfg: PipelineConfig) -> Result<()> {
    let n = &mut cfg.nmf;
    n.k = args.k.unwrap_or(n.k);
    n.alpha_m = args.alpha_m.unwrap_or(n.alpha_m);
    n.alpha_d = args.alpha_d.unwrap_or(n.alpha_d);
    n.max_iters = args.max_iters.unwrap_or(n.max_iters);
    n.rel_tol = args.rel_tol.unwrap_or(n.rel_tol);
    n.init = args.init.unwrap_or(n.init);
    n.restarts = args.restarts.unwrap_or(n.restarts);
    cfg.validate()?;
    let p = load_matrix(&args.matrix)?;
    let mut space = factorize(&p, &cfg.nmf_config(cfg.stage_seed("factorize")))?;
    space.info.config_digest = matrix_digest(&args.matrix)?;
    space.save(&args.out)?;
    let info = &space.info;
    println!(
        "wrote {} (k = {}, objective {:.6e} after {} iterations, converged: {})",
        args.out.display(),
        info.k,
        info.final_objective,
        info.iterations_run,
        info.converged
    );
    Ok(())
}

fn run_archi2vec(args: &Archi2vecArgs, mut cfg: PipelineConfig) -> Result<()> {
    let a = &mut cfg.archi2vec;
    a.dim = args.dim.unwrap_or(a.dim);
    a.wl_iterations = args.wl.unwrap_or(a.wl_iterations);
    a.epochs = args.epochs.unwrap_or(a.epochs);
    a.clusters = args.clusters.unwrap_or(a.clusters);
    cfg.validate()?;
    let graphs = load_graph_dir(&args.graphs)?;
    let arch = ArchEmbeddings::fit(&graphs, &cfg.embed_config(cfg.stage_seed("archi2vec")), cfg.archi2vec.clusters)?;
    arch.save(&args.out)?;
    println!("wrote {} ({} graphs, dim {})", args.out.display(), graphs.len(), cfg.archi2vec.dim);
    Ok(())
}

fn run_train_meta(args: &TrainMetaArgs, cfg: PipelineConfig) -> Result<()> {
    cfg.validate()?;
    let manifest = Manifest::load(&manifest_path(&args.manifest, &cfg))?;
    let p = load_matrix(&args.matrix)?;
    let arch = args.arch.as_deref().map(ArchEmbeddings::load).transpose()?;
    let layout = match &arch {
        Some(a) => MetaLayout::from_arch(
            a,
            cfg.archi2vec.use_embedding && !args.no_embedding,
            cfg.archi2vec.use_clusters && !args.no_clusters,
        ),
        None => MetaLayout::basic(),
    };
    let mut meta = fit_meta_from_matrix(&manifest, &layout, arch.as_ref(), &p)?;
    meta.config_digest = matrix_digest(&args.matrix)?;
    meta.save(&args.out)?;
    println!("wrote {} ({} features)", args.out.display(), layout.dim());
    Ok(())
}

fn run_train_proxy(args: &TrainProxyArgs, mut cfg: PipelineConfig) -> Result<()> {
    cfg.forest.num_trees = args.trees.unwrap_or(cfg.forest.num_trees);
    cfg.validate()?;
    let manifest = Manifest::load(&manifest_path(&args.manifest, &cfg))?;
    let space = TransferSpace::load(&args.space)?;
    let mut reg = fit_proxy_from_space(&manifest, &space, &cfg.forest_config(cfg.stage_seed("train-proxy")))?;
    reg.config_digest = space.info.config_digest.clone();
    reg.save(&args.out)?;
    println!("wrote {} ({} trees)", args.out.display(), cfg.forest.num_trees);
    Ok(())
}

fn print_report(report: &RankingReport, top: usize) {
    println!("{:>4}  {:<24} {:>10} {:>10} {:>10}", "rank", "model", "merged", "transfer", "meta");
    for e in report.entries.iter().take(top) {
        println!(
            "{:>4}  {:<24} {:>10.4} {:>10.4} {:>10.4}",
            e.rank, e.model_id, e.merged_score, e.trans_score, e.meta_score
        );
    }
}

fn run_rank(args: &RankArgs, force: bool, mut cfg: PipelineConfig) -> Result<()> {
    cfg.merge.alpha = args.alpha.unwrap_or(cfg.merge.alpha);
    cfg.merge.normalize = args.normalize.unwrap_or(cfg.merge.normalize);
    cfg.validate()?;
    let manifest = Manifest::load(&manifest_path(&args.manifest, &cfg))?;
    let space = TransferSpace::load(&args.space)?;
    let reg = ProxyRegressor::load(&args.proxy_model)?;
    let meta = MetaModel::load(&args.meta)?;
    let arch = args.arch.as_deref().map(ArchEmbeddings::load).transpose()?;
    check_rank_artifacts(&space, &reg, &meta, arch.as_ref(), None, force)?;
    let mut report = rank_models(&space, &reg, &meta, &manifest, arch.as_ref(), &args.task, &cfg.merge)?;
    report.config_digest = space.info.config_digest.clone();
    report.save(&args.out)?;
    print_report(&report, args.top);
    Ok(())
}

fn run_eval(args: &EvalArgs, mut cfg: PipelineConfig) -> Result<()> {
    cfg.eval.seeds = args.seeds.unwrap_or(cfg.eval.seeds);
    cfg.merge.alpha = args.alpha.unwrap_or(cfg.merge.alpha);
    if args.no_archi2vec {
        cfg.archi2vec.enabled = false;
    }
    cfg.validate()?;
    let manifest = Manifest::load(&manifest_path(&args.manifest, &cfg))?;
    let report = leave_one_out_eval(&manifest, &cfg.eval_config())?;
    write_atomic(&args.out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    print_eval(&report);
    Ok(())
}

fn print_eval(report: &EvalReport) {
    for s in &report.per_seed {
        println!("seed {:>20}  mean Pearson {:.4}", s.seed, s.mean_pearson);
    }
    println!(
        "mean Pearson {:.4} ± {:.4} over {} runs",
        report.mean_pearson,
        report.std_pearson,
        report.runs.len()
    );
    if !report.skipped.is_empty() {
        println!("skipped (incomplete ground truth): {}", report.skipped.join(", "));
    }
}

fn run_synth(args: &SynthArgs, seed: Option<u64>) -> Result<()> {
    let seed = seed.unwrap_or(0);
    let cfg = SynthConfig {
        models: args.models,
        tasks: args.tasks,
        k: args.k,
        noise: args.noise,
        proxy_dim: args.proxy_dim,
        seed,
        ..SynthConfig::default()
    };
    let bench = generate(&cfg)?;
    let config = bench.write(&args.out, seed)?;
    println!("wrote benchmark to {}; run it with `fennec run --config {}`", args.out.display(), config.display());
    Ok(())
}

fn print_summary(summary: &RunSummary, out: &Path) {
    for s in &summary.stages {
        let note = s.note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default();
        println!("{:<12} {:<8} {:>8.3}s{note}", s.stage, s.status, s.seconds);
    }
    println!("artifacts in {}", out.display());
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::SynthBench(args) = &cli.command {
        return run_synth(args, cli.seed);
    }
    let cfg = base_config(cli)?;
    log::debug!("effective config: {}", serde_json::to_string(&cfg)?);
    match &cli.command {
        Command::Fda(a) => run_fda(a, cfg),
        Command::Factorize(a) => run_factorize(a, cfg),
        Command::Archi2vec(a) => run_archi2vec(a, cfg),
        Command::TrainMeta(a) => run_train_meta(a, cfg),
        Command::TrainProxy(a) => run_train_proxy(a, cfg),
        Command::Rank(a) => run_rank(a, cli.force, cfg),
        Command::Eval(a) => run_eval(a, cfg),
        Command::Run => {
            if cli.config.is_none() {
                return Err(Error::invalid("config", "`run` needs --config"));
            }
            let opts = RunOptions {
                resume: cli.resume,
                force: cli.force,
            };
            let summary = run_with_config(&cfg, opts)?;
            print_summary(&summary, &cfg.out());
            Ok(())
        }
        Command::SynthBench(_) => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let file_verbosity = cli
        .config
        .as_deref()
        .and_then(|p| PipelineConfig::load(p).ok())
        .map_or(1, |c| c.verbosity);
    init_logging(file_verbosity.saturating_add(cli.verbose));
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
