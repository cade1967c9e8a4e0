//! Pipeline configuration and stage orchestration over on-disk artifacts.
//!
//! Stages run in dependency order: `fda → factorize → archi2vec →
//! train-meta → train-proxy → rank → eval`. Each stage derives its own seed
//! from the master seed, writes its artifacts atomically, and leaves a JSON
//! log under `logs/`. Offline artifacts record the digest of the offline
//! configuration that produced them, and ranking refuses to mix artifacts
//! with different digests.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::archi2vec::{ArchEmbeddings, EmbedConfig};
use crate::data::{load_matrix, Manifest, PerformanceMatrix};
use crate::error::{Error, Result};
use crate::eval::{leave_one_out_eval, load_manifest_graphs, EvalConfig, EvalReport};
use crate::fda::{build_performance_matrix, FdaConfig, DEFAULT_GAMMA, DEFAULT_PROBE_SIZE};
use crate::io::{derive_seed, read_text, sha256_hex, write_atomic};
use crate::merge::{fit_proxy_from_space, rank_models, ForestConfig, MergeConfig, ProxyRegressor, RankingReport};
use crate::meta::{fit_meta_from_matrix, MetaLayout, MetaModel};
use crate::nmf::{factorize, NmfConfig, NmfInit, TransferSpace};

pub const STAGES: [&str; 7] = ["fda", "factorize", "archi2vec", "train-meta", "train-proxy", "rank", "eval"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FdaSection {
    /// `null` scores every sample.
    pub probe_size: Option<usize>,
    pub gamma: f64,
}

impl Default for FdaSection {
    fn default() -> Self {
        FdaSection {
            probe_size: Some(DEFAULT_PROBE_SIZE),
            gamma: DEFAULT_GAMMA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmfSection {
    pub k: usize,
    pub alpha_m: f64,
    pub alpha_d: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub init: NmfInit,
    pub restarts: usize,
}

impl Default for NmfSection {
    fn default() -> Self {
        let d = NmfConfig::default();
        NmfSection {
            k: d.k,
            alpha_m: d.alpha_m,
            alpha_d: d.alpha_d,
            max_iters: d.max_iters,
            rel_tol: d.rel_tol,
            init: d.init,
            restarts: d.restarts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub enabled: bool,
    pub dim: usize,
    pub wl_iterations: usize,
    pub epochs: usize,
    pub negative: usize,
    pub learning_rate: f64,
    pub clusters: usize,
    pub use_embedding: bool,
    pub use_clusters: bool,
}

impl Default for ArchSection {
    fn default() -> Self {
        let e = EmbedConfig::default();
        ArchSection {
            enabled: true,
            dim: e.dim,
            wl_iterations: e.wl_iterations,
            epochs: e.epochs,
            negative: e.negative,
            learning_rate: e.learning_rate,
            clusters: 5,
            use_embedding: true,
            use_clusters: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestSection {
    pub num_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
}

impl Default for ForestSection {
    fn default() -> Self {
        let f = ForestConfig::default();
        ForestSection {
            num_trees: f.num_trees,
            max_depth: f.max_depth,
            min_leaf: f.min_leaf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub enabled: bool,
    pub seeds: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            enabled: true,
            seeds: 5,
        }
    }
}

/// Pipeline configuration file. Relative paths resolve against the
/// directory holding the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    /// Tasks ranked as new tasks; they never enter the performance matrix.
    pub targets: Vec<String>,
    pub seed: u64,
    pub fda: FdaSection,
    pub nmf: NmfSection,
    pub archi2vec: ArchSection,
    pub forest: ForestSection,
    pub merge: MergeConfig,
    pub eval: EvalSection,
    /// 0 warnings, 1 info, 2 debug.
    pub verbosity: u8,
    #[serde(skip)]
    pub base: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            manifest: PathBuf::from("manifest.json"),
            out_dir: PathBuf::from("out"),
            targets: Vec::new(),
            seed: 0,
            fda: FdaSection::default(),
            nmf: NmfSection::default(),
            archi2vec: ArchSection::default(),
            forest: ForestSection::default(),
            merge: MergeConfig::default(),
            eval: EvalSection::default(),
            verbosity: 1,
            base: PathBuf::new(),
        }
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::invalid(field, "must be at least 1"));
    }
    Ok(())
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = serde_json::from_str(&read_text(path)?)
            .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        cfg.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_atomic(path, &(serde_json::to_string_pretty(self)? + "\n"))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.fda.probe_size {
            positive("fda.probe_size", p)?;
        }
        if !(self.fda.gamma > 0.0 && self.fda.gamma.is_finite()) {
            return Err(Error::invalid("fda.gamma", format!("{} is not a positive number", self.fda.gamma)));
        }
        self.nmf_config(0).validate()?;
        let a = &self.archi2vec;
        if a.dim < 2 {
            return Err(Error::invalid("archi2vec.dim", "must be at least 2"));
        }
        positive("archi2vec.epochs", a.epochs)?;
        positive("archi2vec.negative", a.negative)?;
        positive("archi2vec.clusters", a.clusters)?;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return Err(Error::invalid("archi2vec.learning_rate", "must be positive"));
        }
        positive("forest.num_trees", self.forest.num_trees)?;
        positive("forest.max_depth", self.forest.max_depth)?;
        positive("forest.min_leaf", self.forest.min_leaf)?;
        self.merge.validate()?;
        positive("eval.seeds", self.eval.seeds)?;
        if self.verbosity > 2 {
            return Err(Error::invalid("verbosity", "must be 0, 1 or 2"));
        }
        Ok(())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.base.join(&self.manifest)
    }

    pub fn out(&self) -> PathBuf {
        self.base.join(&self.out_dir)
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn fda_config(&self) -> FdaConfig {
        FdaConfig {
            gamma: self.fda.gamma,
            probe_size: self.fda.probe_size,
            seed: self.stage_seed("fda"),
        }
    }

    pub fn nmf_config(&self, seed: u64) -> NmfConfig {
        NmfConfig {
            k: self.nmf.k,
            alpha_m: self.nmf.alpha_m,
            alpha_d: self.nmf.alpha_d,
            max_iters: self.nmf.max_iters,
            rel_tol: self.nmf.rel_tol,
            seed,
            init: self.nmf.init,
            restarts: self.nmf.restarts,
        }
    }

    pub fn embed_config(&self, seed: u64) -> EmbedConfig {
        EmbedConfig {
            dim: self.archi2vec.dim,
            wl_iterations: self.archi2vec.wl_iterations,
            epochs: self.archi2vec.epochs,
            negative: self.archi2vec.negative,
            learning_rate: self.archi2vec.learning_rate,
            seed,
            ..EmbedConfig::default()
        }
    }

    pub fn forest_config(&self, seed: u64) -> ForestConfig {
        ForestConfig {
            num_trees: self.forest.num_trees,
            max_depth: self.forest.max_depth,
            min_leaf: self.forest.min_leaf,
            seed,
            ..ForestConfig::default()
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            fda: self.fda_config(),
            nmf: self.nmf_config(0),
            archi2vec: self.archi2vec.enabled.then(|| self.embed_config(0)),
            num_clusters: self.archi2vec.clusters,
            use_embedding: self.archi2vec.use_embedding,
            use_clusters: self.archi2vec.use_clusters,
            forest: self.forest_config(0),
            merge: self.merge.clone(),
            seeds: EvalConfig::derived_seeds(self.seed, self.eval.seeds),
        }
    }

    /// Digest of everything that shapes the offline artifacts.
    pub fn offline_digest(&self, history: &[String]) -> String {
        let v = serde_json::json!({
            "seed": self.seed,
            "fda": self.fda,
            "nmf": self.nmf,
            "archi2vec": self.archi2vec,
            "forest": self.forest,
            "history": history,
        });
        sha256_hex(v.to_string().as_bytes())
    }
}

/// Tasks with forward features that are not ranking targets.
pub fn history_tasks(manifest: &Manifest, targets: &[String]) -> Vec<String> {
    manifest
        .tasks
        .iter()
        .filter(|t| !t.feature_files.is_empty() && !targets.contains(&t.task_id))
        .map(|t| t.task_id.clone())
        .collect()
}

const DIGEST_TAG: &str = "# config_digest: ";

pub fn save_matrix_with_digest(p: &PerformanceMatrix, path: &Path, digest: &str) -> Result<()> {
    p.validate()?;
    write_atomic(path, &format!("{DIGEST_TAG}{digest}\n{}", p.to_csv()))
}

/// The digest comment of a matrix file, if present.
pub fn matrix_digest(path: &Path) -> Result<Option<String>> {
    let text = read_text(path)?;
    Ok(text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.strip_prefix(DIGEST_TAG).map(|d| d.trim().to_string())))
}

/// Errors unless every present digest agrees (and equals `expected` when
/// given). With `force` a mismatch is only logged.
pub fn check_digests(artifacts: &[(&str, Option<&str>)], expected: Option<&str>, force: bool) -> Result<()> {
    let mut reference = expected.map(|e| ("config", e));
    for &(name, digest) in artifacts {
        let Some(d) = digest else { continue };
        match reference {
            None => reference = Some((name, d)),
            Some((rname, r)) if r != d => {
                let msg = format!("{name} has digest {} but {rname} has {}", short(d), short(r));
                if force {
                    log::warn!("{msg} (continuing because of --force)");
                } else {
                    return Err(Error::Digest(format!("{msg}; rerun the stale stages or pass --force")));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn short(d: &str) -> &str {
    &d[..12.min(d.len())]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    /// `ran`, `cached` or `skipped`.
    pub status: String,
    pub seconds: f64,
    pub seed: u64,
    pub config_digest: String,
    pub outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    pub resume: bool,
    pub force: bool,
}

/// Artifact locations under an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn matrix(&self) -> PathBuf {
        self.root.join("perf_matrix.csv")
    }
    pub fn space(&self) -> PathBuf {
        self.root.join("transfer_space")
    }
    pub fn arch(&self) -> PathBuf {
        self.root.join("arch_embeddings.csv")
    }
    pub fn arch_meta(&self) -> PathBuf {
        self.root.join("arch_embeddings.csv.meta.json")
    }
    pub fn meta(&self) -> PathBuf {
        self.root.join("meta_model.json")
    }
    pub fn proxy(&self) -> PathBuf {
        self.root.join("proxy_regressor.json")
    }
    pub fn report(&self, task: &str) -> PathBuf {
        self.root.join("report").join(format!("{task}.json"))
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval_report.json")
    }
    pub fn log(&self, stage: &str) -> PathBuf {
        self.root.join("logs").join(format!("{stage}.json"))
    }
}

fn remove_outputs(paths: &[PathBuf]) {
    for p in paths {
        let _ = if p.is_dir() {
            std::fs::remove_dir_all(p)
        } else {
            std::fs::remove_file(p)
        };
    }
}

/// Digest recorded in a stage's primary artifact, `None` when the artifact
/// is missing, unreadable, or was written with different merge settings.
fn recorded_digest(stage: &str, layout: &Layout, cfg: &PipelineConfig) -> Option<String> {
    match stage {
        "fda" => matrix_digest(&layout.matrix()).ok().flatten(),
        "factorize" => TransferSpace::load(&layout.space()).ok()?.info.config_digest,
        "archi2vec" => ArchEmbeddings::load(&layout.arch()).ok()?.info.config_digest,
        "train-meta" => MetaModel::load(&layout.meta()).ok()?.config_digest,
        "train-proxy" => ProxyRegressor::load(&layout.proxy()).ok()?.config_digest,
        "rank" => {
            let mut digests = Vec::new();
            for t in &cfg.targets {
                let r = RankingReport::load(&layout.report(t)).ok()?;
                if r.alpha != cfg.merge.alpha || r.normalize != cfg.merge.normalize {
                    return None;
                }
                digests.push(r.config_digest);
            }
            let first = digests.first()?.clone()?;
            digests.iter().all(|d| d.as_deref() == Some(&first)).then_some(first)
        }
        "eval" => {
            let r: EvalReport = serde_json::from_str(&read_text(&layout.eval()).ok()?).ok()?;
            if r.merge != cfg.merge {
                return None;
            }
            r.config_digest
        }
        _ => None,
    }
}

/// Loads the offline artifacts needed for ranking and checks that their
/// digests agree.
pub fn load_rank_artifacts(
    layout: &Layout,
    expected: Option<&str>,
    force: bool,
) -> Result<(TransferSpace, ProxyRegressor, MetaModel, Option<ArchEmbeddings>)> {
    let space = TransferSpace::load(&layout.space())?;
    let reg = ProxyRegressor::load(&layout.proxy())?;
    let meta = MetaModel::load(&layout.meta())?;
    let arch = if meta.layout.embedding_dim + meta.layout.num_clusters > 0 {
        Some(ArchEmbeddings::load(&layout.arch())?)
    } else {
        None
    };
    check_rank_artifacts(&space, &reg, &meta, arch.as_ref(), expected, force)?;
    Ok((space, reg, meta, arch))
}

/// Digest agreement across ranking inputs, plus a vocabulary check between
/// the meta model and the architecture embeddings it was trained on.
pub fn check_rank_artifacts(
    space: &TransferSpace,
    reg: &ProxyRegressor,
    meta: &MetaModel,
    arch: Option<&ArchEmbeddings>,
    expected: Option<&str>,
    force: bool,
) -> Result<()> {
    check_digests(
        &[
            ("transfer space", space.info.config_digest.as_deref()),
            ("proxy regressor", reg.config_digest.as_deref()),
            ("meta model", meta.config_digest.as_deref()),
            ("arch embeddings", arch.and_then(|a| a.info.config_digest.as_deref())),
        ],
        expected,
        force,
    )?;
    let needs_arch = meta.layout.embedding_dim + meta.layout.num_clusters > 0;
    match arch {
        None if needs_arch => Err(Error::invalid("arch", "meta model uses architecture features but no embeddings were given")),
        Some(a) if needs_arch && meta.layout.vocab_hash.as_deref() != Some(a.info.vocab_hash.as_str()) => {
            let msg = "meta model was trained on a different WL vocabulary";
            if !force {
                return Err(Error::Digest(msg.into()));
            }
            log::warn!("{msg} (continuing because of --force)");
            Ok(())
        }
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_digest: String,
    pub stages: Vec<StageLog>,
}

/// Runs every stage for a config file.
pub fn run_pipeline(config_path: &Path, opts: RunOptions) -> Result<RunSummary> {
    let cfg = PipelineConfig::load(config_path)?;
    run_with_config(&cfg, opts)
}

pub fn run_with_config(cfg: &PipelineConfig, opts: RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    let manifest = Manifest::load(&cfg.manifest_path())?;
    for t in &cfg.targets {
        if manifest.task(t).is_none() {
            return Err(Error::invalid("targets", format!("{t} not in manifest")));
        }
    }
    let history = history_tasks(&manifest, &cfg.targets);
    if history.is_empty() {
        return Err(Error::invalid("targets", "no historical tasks with features remain"));
    }
    let digest = cfg.offline_digest(&history);
    let layout = Layout { root: cfg.out() };
    write_atomic(
        &layout.root.join("config.json"),
        &(serde_json::to_string_pretty(&serde_json::json!({
            "config": cfg,
            "config_digest": digest,
        }))? + "\n"),
    )?;

    let models = manifest.model_ids();
    let mut logs = Vec::new();
    for stage in STAGES {
        let seed = cfg.stage_seed(stage);
        let outputs: Vec<PathBuf> = match stage {
            "fda" => vec![layout.matrix()],
            "factorize" => vec![layout.space()],
            "archi2vec" => vec![layout.arch(), layout.arch_meta()],
            "train-meta" => vec![layout.meta()],
            "train-proxy" => vec![layout.proxy()],
            "rank" => cfg.targets.iter().map(|t| layout.report(t)).collect(),
            _ => vec![layout.eval()],
        };
        let mut log = StageLog {
            stage: stage.to_string(),
            status: "ran".into(),
            seconds: 0.0,
            seed,
            config_digest: digest.clone(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
            note: None,
        };
        let skip = match stage {
            "archi2vec" if !cfg.archi2vec.enabled => Some("disabled in config"),
            "rank" if cfg.targets.is_empty() => Some("no targets"),
            "eval" if !cfg.eval.enabled => Some("disabled in config"),
            _ => None,
        };
        if let Some(note) = skip {
            log.status = "skipped".into();
            log.note = Some(note.into());
            log.outputs.clear();
        } else if opts.resume && recorded_digest(stage, &layout, cfg).as_deref() == Some(digest.as_str()) {
            log.status = "cached".into();
            log::info!("{stage}: cached");
        } else {
            let start = Instant::now();
            let result = run_stage(stage, cfg, &manifest, &history, &models, &layout, &digest, opts, seed);
            log.seconds = start.elapsed().as_secs_f64();
            match result {
                Ok(note) => {
                    if note.is_some() {
                        log.status = "skipped".into();
                        log.outputs.clear();
                    }
                    log.note = note;
                    log::info!("{stage}: {} in {:.3}s", log.status, log.seconds);
                }
                Err(e) => {
                    remove_outputs(&outputs);
                    return Err(Error::Stage {
                        stage: stage.to_string(),
                        source: Box::new(e),
                    });
                }
            }
        }
        write_atomic(&layout.log(stage), &(serde_json::to_string_pretty(&log)? + "\n"))?;
        logs.push(log);
    }
    Ok(RunSummary {
        config_digest: digest,
        stages: logs,
    })
}

/// Runs one stage; `Ok(Some(note))` means the stage had nothing to do.
#[allow(clippy::too_many_arguments)]
fn run_stage(
    stage: &str,
    cfg: &PipelineConfig,
    manifest: &Manifest,
    history: &[String],
    models: &[String],
    layout: &Layout,
    digest: &str,
    opts: RunOptions,
    seed: u64,
) -> Result<Option<String>> {
    match stage {
        "fda" => {
            let p = build_performance_matrix(manifest, history, models, &cfg.fda_config())?;
            save_matrix_with_digest(&p, &layout.matrix(), digest)?;
        }
        "factorize" => {
            let p = load_matrix(&layout.matrix())?;
            let mut space = factorize(&p, &cfg.nmf_config(seed))?;
            space.info.config_digest = Some(digest.to_string());
            space.save(&layout.space())?;
        }
        "archi2vec" => {
            let Some(graphs) = load_manifest_graphs(manifest)? else {
                remove_outputs(&[layout.arch(), layout.arch_meta()]);
                return Ok(Some("some models have no architecture graph".into()));
            };
            let mut arch = ArchEmbeddings::fit(&graphs, &cfg.embed_config(seed), cfg.archi2vec.clusters)?;
            arch.info.config_digest = Some(digest.to_string());
            arch.save(&layout.arch())?;
        }
        "train-meta" => {
            let p = load_matrix(&layout.matrix())?;
            let arch = if cfg.archi2vec.enabled && layout.arch().is_file() {
                Some(ArchEmbeddings::load(&layout.arch())?)
            } else {
                None
            };
            let meta_layout = match &arch {
                Some(a) => MetaLayout::from_arch(a, cfg.archi2vec.use_embedding, cfg.archi2vec.use_clusters),
                None => MetaLayout::basic(),
            };
            let mut meta = fit_meta_from_matrix(manifest, &meta_layout, arch.as_ref(), &p)?;
            meta.config_digest = Some(digest.to_string());
            meta.save(&layout.meta())?;
        }
        "train-proxy" => {
            let space = TransferSpace::load(&layout.space())?;
            let mut reg = fit_proxy_from_space(manifest, &space, &cfg.forest_config(seed))?;
            reg.config_digest = Some(digest.to_string());
            reg.save(&layout.proxy())?;
        }
        "rank" => {
            let (space, reg, meta, arch) = load_rank_artifacts(layout, Some(digest), opts.force)?;
            for t in &cfg.targets {
                let mut report = rank_models(&space, &reg, &meta, manifest, arch.as_ref(), t, &cfg.merge)?;
                report.config_digest = Some(digest.to_string());
                report.save(&layout.report(t))?;
            }
        }
        "eval" => {
            let mut report = leave_one_out_eval(manifest, &cfg.eval_config())?;
            report.config_digest = Some(digest.to_string());
            write_atomic(&layout.eval(), &(serde_json::to_string_pretty(&report)? + "\n"))?;
            log::info!(
                "eval: mean Pearson {:.4} ± {:.4} over {} runs",
                report.mean_pearson,
                report.std_pearson,
                report.runs.len()
            );
        }
        other => return Err(Error::invalid("stage", format!("unknown stage {other}"))),
    }
    Ok(None)
}
