//! Stage orchestration, output bookkeeping and the run manifest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sltraj::anomaly::{detect_cluster, mode_of_variation_data, window_profile, AnomalyReport, DetectConfig, WindowReport, Windows};
use sltraj::dataset::{build_dataset, load_covariates, load_records, InputFormat, SlDataset};
use sltraj::embed::{embed_dataset, Backend, DiskCache, EmbedFailure, Embedder, LiveBackend, PromptSpec};
use sltraj::export;
use sltraj::grid::EvalGrid;
use sltraj::mfpca::MfpcaModel;
use sltraj::profile::{profile_anomalies, MatchMode};
use sltraj::segment::{bootstrap_jaccard, choose_k, features_for, fit_stack, refit_members, trimmed_kmeans, ClusterFit, ClusterModel, RefitConfig, TrimConfig};
use sltraj::sim::{rank_tests, recall_and_hit_rates, run_study, ReplicatePipeline, SimConfig};
use sltraj::ufpca::UfpcaConfig;
use sltraj::{Error, Result};

use crate::config::{BackendKind, ProfileMode, RunConfig};
use crate::svg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Embed,
    Fit,
    Cluster,
    Detect,
    Windows,
    Profile,
    Simulate,
    ExportFeatures,
    PlotData,
    Run,
}

impl Target {
    fn depth(self) -> u8 {
        match self {
            Target::Embed => 1,
            Target::Fit => 2,
            Target::Cluster | Target::ExportFeatures => 3,
            Target::Detect | Target::Simulate => 4,
            Target::Windows | Target::PlotData | Target::Profile => 5,
            Target::Run => u8::MAX,
        }
    }

    fn emits(self, t: Target) -> bool {
        self == Target::Run || self == t
    }
}

/// Files are written as `<name>.partial` and renamed once the whole run
/// has succeeded.
pub struct Outputs {
    dir: PathBuf,
    pending: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), pending: Vec::new() })
    }

    fn partial(&self, rel: &str) -> PathBuf {
        self.dir.join(format!("{rel}.partial"))
    }

    pub fn write<F>(&mut self, rel: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let path = self.partial(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        self.pending.push(rel.to_string());
        Ok(())
    }

    pub fn commit(self) -> Result<Vec<OutputDigest>> {
        let mut rels = self.pending.clone();
        rels.sort();
        rels.dedup();
        let mut out = Vec::with_capacity(rels.len());
        for rel in rels {
            let fin = self.dir.join(&rel);
            fs::rename(self.partial(&rel), &fin)?;
            let bytes = fs::read(&fin)?;
            out.push(OutputDigest { path: rel, sha256: hex::encode(Sha256::digest(&bytes)), bytes: bytes.len() as u64 });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunSummary {
    pub n_subjects: usize,
    pub n_records: usize,
    pub p: usize,
    pub q: usize,
    pub grid: Option<(f64, f64, usize)>,
    pub embed_backend_calls: Option<usize>,
    pub embed_failures: Vec<EmbedFailure>,
    pub global_components: Option<usize>,
    pub k: Option<usize>,
    pub trimmed: Option<usize>,
    /// (cluster, reason), clusters 1-based.
    pub skipped_clusters: Vec<(usize, String)>,
    /// Confirmed subjects per cluster, clusters 1-based.
    pub confirmed: BTreeMap<usize, usize>,
    pub failed_replicates: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: Target,
    pub version: String,
    pub core_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub stages: Vec<StageTime>,
    pub outputs: Vec<OutputDigest>,
    pub summary: RunSummary,
}

impl Manifest {
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.outputs.iter().map(|o| (o.path.clone(), o.sha256.clone())).collect()
    }
}

/// Exit status for an error chain: 2 config, 3 data, 4 backend, 5 other.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::Data(_) | Error::Row { .. } | Error::NotIdentifiable(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_)) => 3,
        Some(Error::Embed { .. } | Error::Backend(_) | Error::Parse(_)) => 4,
        None => 5,
    }
}

struct Run<'a> {
    cfg: &'a RunConfig,
    target: Target,
    out: Outputs,
    stages: Vec<StageTime>,
    summary: RunSummary,
}

impl Run<'_> {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> anyhow::Result<T> {
        log::info!("stage {name}");
        let t0 = Instant::now();
        let r = f(self);
        self.stages.push(StageTime { stage: name.into(), seconds: t0.elapsed().as_secs_f64() });
        r.with_context(|| format!("stage '{name}' failed"))
    }
}

fn ufpca_config(cfg: &RunConfig) -> UfpcaConfig {
    UfpcaConfig {
        grid_size: cfg.fpca.grid_size,
        mean_bandwidth: cfg.fpca.mean_bandwidth,
        cov_bandwidth: cfg.fpca.cov_bandwidth,
        fve_threshold: cfg.fpca.fve,
        k_max: cfg.fpca.k_max,
    }
}

fn detect_config(cfg: &RunConfig) -> DetectConfig {
    DetectConfig {
        alpha1: cfg.detect.alpha1,
        alpha: cfg.detect.alpha,
        fve_threshold: cfg.detect.fve,
        multiplicity: cfg.detect.multiplicity,
        seed: cfg.seed,
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<SlDataset> {
    let path = cfg.input.records.as_ref().ok_or_else(|| Error::Config("no records file given".into()))?;
    let format: InputFormat = match &cfg.input.format {
        Some(f) => f.parse()?,
        None => match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => InputFormat::Csv,
            _ => InputFormat::Jsonl,
        },
    };
    let records = load_records(path, format, &cfg.input.schema)?;
    let covs = match &cfg.input.covariates {
        Some(p) => load_covariates(p)?,
        None => BTreeMap::new(),
    };
    build_dataset(records, &covs)
}

/// Grid spanning every observed timestamp.
pub fn data_grid(ds: &SlDataset, size: usize) -> Result<EvalGrid> {
    let (lo, hi) = ds
        .subjects
        .iter()
        .flat_map(|s| s.records.iter().map(|r| r.time))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
    if !(hi > lo) {
        return Err(Error::Data("all timestamps are equal; no time domain to fit".into()));
    }
    EvalGrid::new(lo, hi, size)
}

fn make_embedder(cfg: &RunConfig) -> Result<Embedder> {
    let spec = PromptSpec::by_name(&cfg.embed.spec)?;
    let backend = match cfg.embed.backend {
        BackendKind::Offline => Backend::Offline,
        BackendKind::Live => Backend::Live(Box::new(LiveBackend::new(cfg.embed.live.clone())?)),
    };
    let cache = cfg.embed.cache_dir.as_deref().map(DiskCache::open).transpose()?;
    Ok(Embedder::new(spec, backend, cache)?.with_rate_limit(cfg.embed.rate_limit))
}

fn write_jsonl(w: &mut impl Write, ds: &SlDataset) -> Result<()> {
    for r in sltraj::synthetic::to_raw_records(ds) {
        serde_json::to_writer(&mut *w, &r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn write_components(w: &mut impl Write, model: &MfpcaModel) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.write_record(["component", "eigenvalue", "cumulative_fve", "selected"])?;
    for (m, (v, f)) in model.eigenvalues.iter().zip(model.fve()).enumerate() {
        c.write_record([(m + 1).to_string(), export::fmt(*v), export::fmt(f), (m < model.m_selected).to_string()])?;
    }
    c.flush()?;
    Ok(())
}

fn safe_name(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Runs every stage `target` depends on and writes that target's outputs.
pub fn execute(cfg: &RunConfig, target: Target) -> anyhow::Result<Manifest> {
    cfg.validate()?;
    let mut run = Run { cfg, target, out: Outputs::new(&cfg.output_dir)?, stages: Vec::new(), summary: RunSummary::default() };
    let depth = target.depth();

    let mut ds = run.stage("load", |r| {
        let ds = load_dataset(r.cfg)?;
        r.summary.n_subjects = ds.n_subjects();
        r.summary.n_records = ds.n_records();
        Ok(ds)
    })?;

    if ds.needs_embedding() || target == Target::Embed {
        ds = run.stage("embed", |r| {
            let embedder = make_embedder(r.cfg)?;
            if ds.p != 0 && ds.p != embedder.spec.p() {
                return Err(Error::Data(format!("records carry p={} vectors but prompt spec '{}' has {} axes", ds.p, embedder.spec.name, embedder.spec.p())));
            }
            let (filled, failures) = if ds.needs_embedding() { embed_dataset(&ds, &embedder, r.cfg.embed.max_concurrency)? } else { (ds.clone(), Vec::new()) };
            r.summary.embed_backend_calls = Some(embedder.backend_calls());
            r.summary.embed_failures = failures;
            if r.target.emits(Target::Embed) {
                r.out.write("embedded.jsonl", |w| write_jsonl(w, &filled))?;
            }
            Ok(filled)
        })?;
    }
    run.summary.p = ds.p;
    run.summary.q = ds.q;
    if depth < 2 {
        return finish(run);
    }

    let ucfg = ufpca_config(cfg);
    let (grid, global) = run.stage("fit", |r| {
        if ds.p == 0 {
            return Err(Error::Data("no embedded values to fit".into()));
        }
        let grid = data_grid(&ds, ucfg.grid_size)?;
        r.summary.grid = Some((grid.t_min(), grid.t_max(), grid.len()));
        let all: Vec<usize> = (0..ds.n_subjects()).collect();
        let model = fit_stack(&ds, &all, &grid, &ucfg, r.cfg.fpca.mfpca_fve)?;
        r.summary.global_components = Some(model.m_selected);
        if r.target.emits(Target::Fit) {
            r.out.write("fpca_components.csv", |w| write_components(w, &model))?;
            let ids = ds.subject_ids();
            let none = vec![None; ids.len()];
            let empty = vec![Vec::new(); ids.len()];
            let scores = model.scores.columns(0, model.m_selected).into_owned();
            r.out.write("fpca_scores.csv", |w| export::write_features(w, &ids, &none, &empty, &scores))?;
        }
        Ok((grid, model))
    })?;
    if depth < 3 {
        return finish(run);
    }

    let fit: ClusterFit = run.stage("cluster", |r| {
        let seg = &r.cfg.segment;
        let features = features_for(&global, &ds)?;
        let base = TrimConfig { k: seg.k.unwrap_or(2), trim: seg.trim, restarts: seg.restarts, max_iter: seg.max_iter, seed: r.cfg.seed };
        let k = match seg.k {
            Some(k) => k,
            None => {
                let sel = choose_k(&features.whitened, &seg.k_range, &base)?;
                if r.target.emits(Target::Cluster) {
                    r.out.write("k_selection.csv", |w| {
                        let mut c = csv::Writer::from_writer(w);
                        c.write_record(["k", "silhouette"])?;
                        for (k, s) in &sel.silhouettes {
                            c.write_record([k.to_string(), export::fmt(*s)])?;
                        }
                        c.flush()?;
                        Ok(())
                    })?;
                }
                sel.best_k
            }
        };
        let tcfg = TrimConfig { k, ..base };
        let fit = trimmed_kmeans(&features.whitened, &tcfg)?;
        r.summary.k = Some(k);
        r.summary.trimmed = Some(fit.n_trimmed());
        let ids = ds.subject_ids();
        if r.target.emits(Target::Cluster) {
            r.out.write("assignments.csv", |w| export::write_assignments(w, &ids, &fit))?;
            if seg.bootstrap > 0 {
                let jac = bootstrap_jaccard(&features.whitened, &fit, &tcfg, seg.bootstrap, r.cfg.seed)?;
                r.out.write("stability.csv", |w| {
                    let mut c = csv::Writer::from_writer(w);
                    c.write_record(["cluster", "size", "jaccard"])?;
                    for (k, j) in jac.iter().enumerate() {
                        c.write_record([(k + 1).to_string(), fit.members(k).len().to_string(), export::fmt(*j)])?;
                    }
                    c.flush()?;
                    Ok(())
                })?;
            }
        }
        if r.target.emits(Target::ExportFeatures) {
            let covs: Vec<Vec<f64>> = ds.subjects.iter().map(|s| s.covariates.clone()).collect();
            let scores = global.scores.columns(0, global.m_selected).into_owned();
            r.out.write("features.csv", |w| export::write_features(w, &ids, &fit.assignments, &covs, &scores))?;
        }
        Ok(fit)
    })?;
    if depth < 4 {
        return finish(run);
    }

    let rcfg = RefitConfig { min_size: cfg.segment.min_cluster_size, mfpca_fve: cfg.fpca.mfpca_fve };
    let dcfg = detect_config(cfg);
    let ids = ds.subject_ids();
    let detected: Vec<(ClusterModel, AnomalyReport)> = run.stage("detect", |r| {
        let fits: Vec<(usize, Result<(ClusterModel, AnomalyReport)>)> = (0..fit.k)
            .into_par_iter()
            .map(|k| {
                let res = refit_members(&ds, k, fit.members(k), fit.trimmed_nearest(k), &grid, &ucfg, &rcfg).and_then(|cm| {
                    let rep = detect_cluster(&cm, &dcfg)?;
                    Ok((cm, rep))
                });
                (k, res)
            })
            .collect();
        let mut out = Vec::new();
        for (k, res) in fits {
            match res {
                Ok(pair) => out.push(pair),
                Err(Error::NotIdentifiable(msg)) => {
                    log::warn!("cluster {} skipped: {msg}", k + 1);
                    r.summary.skipped_clusters.push((k + 1, msg));
                }
                Err(e) => return Err(e),
            }
        }
        for (_, rep) in &out {
            r.summary.confirmed.insert(rep.cluster + 1, rep.confirmed().len());
            if r.target.emits(Target::Detect) {
                r.out.write(&format!("cluster{}_detections.csv", rep.cluster + 1), |w| export::write_detections(w, &ids, rep))?;
            }
        }
        Ok(out)
    })?;

    if target.emits(Target::Simulate) && (target == Target::Simulate || cfg.sim.replicates > 0) {
        run.stage("simulate", |r| {
            let s = &r.cfg.sim;
            let scfg = SimConfig { replicates: s.replicates, lambda: s.lambda, k_min: s.k_min, k_max: s.k_max, seed: r.cfg.seed, mode: s.mode };
            let pipe = ReplicatePipeline { ufpca: ucfg.clone(), refit: rcfg, detect: dcfg };
            let study = run_study(&ds, &detected, &grid, &scfg, &pipe)?;
            r.summary.failed_replicates = Some(study.failed.len());
            let (recall, detection) = recall_and_hit_rates(&study);
            let tests = rank_tests(&recall)?;
            r.out.write("sim_flags.csv", |w| export::write_sim_flags(w, &ids, &study))?;
            r.out.write("sim_recall.csv", |w| export::write_recall(w, &recall))?;
            r.out.write("sim_detection.csv", |w| export::write_detection_prob(w, &ids, &detection))?;
            r.out.write("sim_tests.csv", |w| export::write_tests(w, &tests))?;
            Ok(())
        })?;
    }
    if depth < 5 {
        return finish(run);
    }

    let windows = match &cfg.detect.window_bounds {
        Some(b) => Windows::explicit(b.clone()),
        None => Windows::equal(grid.t_min(), grid.t_max(), cfg.detect.windows),
    }
    .context("invalid window configuration")?;
    let wreports: Vec<WindowReport> = run.stage("windows", |r| {
        let reps: Vec<WindowReport> = detected
            .par_iter()
            .map(|(cm, rep)| window_profile(rep, &ds, &cm.model.mean_curves(), &grid, &windows, r.cfg.detect.window_alpha, r.cfg.detect.multiplicity))
            .collect();
        if r.target.emits(Target::Windows) {
            for ((_, rep), wr) in detected.iter().zip(&reps) {
                let c = rep.cluster + 1;
                r.out.write(&format!("cluster{c}_pvalues.csv"), |w| export::write_pvalue_table(w, &ids, rep, wr))?;
                r.out.write(&format!("cluster{c}_windows.csv"), |w| export::write_windows(w, &ids, wr))?;
            }
        }
        Ok(reps)
    })?;

    if target.emits(Target::PlotData) {
        run.stage("plot", |r| {
            for ((cm, rep), wr) in detected.iter().zip(&wreports) {
                for (i, comps) in rep.confirmed() {
                    let flagged = wr.flagged_windows(i);
                    for m in comps {
                        let bundle = mode_of_variation_data(cm, rep, i, m, &ids, &windows, &flagged)?;
                        let stem = format!("plots/cluster{}_{}_comp{}", rep.cluster + 1, safe_name(&ids[i]), m + 1);
                        r.out.write(&format!("{stem}.csv"), |w| export::write_plot_bundle(w, &bundle))?;
                        r.out.write(&format!("{stem}_windows.csv"), |w| export::write_plot_windows(w, &bundle))?;
                        if r.cfg.plot.svg {
                            let title = format!("cluster {} / {} / component {}", rep.cluster + 1, ids[i], m + 1);
                            r.out.write(&format!("{stem}.svg"), |w| Ok(w.write_all(svg::render(&bundle, &title).as_bytes())?))?;
                        }
                    }
                }
            }
            Ok(())
        })?;
    }

    if target.emits(Target::Profile) {
        run.stage("profile", |r| {
            let live;
            let mode = match r.cfg.profile.mode {
                ProfileMode::Lexical => MatchMode::Lexical,
                ProfileMode::Llm => {
                    live = LiveBackend::new(r.cfg.embed.live.clone())?;
                    MatchMode::Llm(&live)
                }
            };
            let prof = profile_anomalies(&wreports, &ds, &mode, r.cfg.profile.k, r.cfg.profile.per_cluster)?;
            r.out.write("profile_summary.csv", |w| export::write_profile_summary(w, &prof.summary))?;
            r.out.write("profile_records.csv", |w| export::write_profile_records(w, &prof.records))?;
            Ok(())
        })?;
    }

    finish(run)
}

fn finish(run: Run<'_>) -> anyhow::Result<Manifest> {
    let Run { cfg, target, out, stages, summary } = run;
    let dir = out.dir.clone();
    let outputs = out.commit().context("could not finalise outputs")?;
    let manifest = Manifest {
        command: target,
        version: env!("CARGO_PKG_VERSION").into(),
        core_version: sltraj::VERSION.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        config: cfg.clone(),
        stages,
        outputs,
        summary,
    };
    let tmp = dir.join("manifest.json.partial");
    fs::write(&tmp, serde_json::to_vec_pretty(&manifest)?).map_err(Error::from)?;
    fs::rename(&tmp, dir.join("manifest.json")).map_err(Error::from)?;
    Ok(manifest)
}

