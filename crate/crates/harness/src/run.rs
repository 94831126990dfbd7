//! Executes experiments with checkpointed per-replica records.

use bls_core::analysis::{
    check_band, check_submultiplicativity, continuity_sweep, dimension_report, fit_exponent, write_plot_csv,
    BandReport, ContinuityReport, DimensionReport, ExponentFit, SubmultReport,
};
use bls_core::cluster::{survey_replica, survey_rows};
use bls_core::cutpoints::{
    dimension_estimate, scan_cutbox_range, second_moment_check, CutBoxRecord, CutCountRow, CutScan, PairCountRow,
};
use bls_core::estimators::{
    cone_confinement_decay, estimate_p_splitting, run_replicas, separation_stats, EstimateRecord, EstimateSeries,
    ExperimentConfig, ReplicaRecord, TAG_REPLICA,
};
use bls_core::rng::stream_id;
use bls_core::stats::linear_fit;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::config::{Experiment, FitSpec, RunConfig};
use crate::error::{HarnessError, Result};
use crate::manifest::RunManifest;

pub const REPLICAS_FILE: &str = "replicas.jsonl";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: PathBuf,
    pub resume: bool,
    /// Worker threads; `None` uses the ambient pool.
    pub threads: Option<usize>,
    /// Stop after this many checkpoints, leaving the run resumable.
    pub max_chunks: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutReplica {
    pub replica: u64,
    pub attempts: u64,
    pub counts: Vec<CutCountRow>,
    pub pairs: Vec<PairCountRow>,
    pub records: Vec<CutBoxRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyReplica {
    pub replica: u64,
    pub ok: Vec<bool>,
}

/// Sufficient statistics of one replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ReplicaData {
    Estimate(ReplicaRecord),
    Cut(CutReplica),
    Survey(SurveyReplica),
}

impl ReplicaData {
    pub fn replica(&self) -> u64 {
        match self {
            ReplicaData::Estimate(r) => r.replica,
            ReplicaData::Cut(r) => r.replica,
            ReplicaData::Survey(r) => r.replica,
        }
    }

    fn loops_and_steps(&self) -> (u64, u64) {
        match self {
            ReplicaData::Estimate(r) => (r.loops, r.path_steps),
            _ => (0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub replicas: Vec<(u64, u64)>,
    /// How the random streams of this record are derived from the seed.
    pub streams: String,
    pub params: Value,
    pub result: Value,
}

pub fn replica_stream_id(replica: u64) -> u64 {
    stream_id(&[TAG_REPLICA, replica])
}

/// Errors if two replicas would share a random stream.
pub fn check_seed_collisions(ranges: &[(u64, u64)]) -> Result<()> {
    let mut seen = std::collections::HashMap::new();
    for &(a, b) in ranges {
        for rep in a..b {
            if let Some(other) = seen.insert(replica_stream_id(rep), rep) {
                return Err(HarnessError::Config(format!(
                    "seed collision: replicas {other} and {rep} share a stream"
                )));
            }
        }
    }
    Ok(())
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| HarnessError::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn compute_chunk(exp: &Experiment, range: std::ops::Range<u64>) -> Result<Vec<ReplicaData>> {
    Ok(match exp {
        Experiment::EstimateP(c) => estimate_chunk(c, range)?,
        Experiment::Continuity(f) | Experiment::Fit(f) => estimate_chunk(&f.estimate, range)?,
        Experiment::Cutscan(c) => {
            let scan = scan_cutbox_range(c, range.clone())?;
            range
                .zip(scan.attempts)
                .map(|(rep, attempts)| {
                    ReplicaData::Cut(CutReplica {
                        replica: rep,
                        attempts,
                        counts: scan.counts.iter().filter(|x| x.replica == rep).cloned().collect(),
                        pairs: scan.pairs.iter().filter(|x| x.replica == rep).cloned().collect(),
                        records: scan.records.iter().filter(|x| x.replica == rep).copied().collect(),
                    })
                })
                .collect()
        }
        Experiment::ClusterSurvey(s) => {
            let template = s.template();
            range
                .into_par_iter()
                .map(|rep| {
                    survey_replica(&s.alphas, s.diameter_bound, &template, s.h, rep)
                        .map(|ok| ReplicaData::Survey(SurveyReplica { replica: rep, ok }))
                })
                .collect::<bls_core::Result<_>>()?
        }
        _ => unreachable!("single-shot experiment"),
    })
}

fn estimate_chunk(c: &ExperimentConfig, range: std::ops::Range<u64>) -> Result<Vec<ReplicaData>> {
    Ok(run_replicas(c, range)?.into_iter().map(ReplicaData::Estimate).collect())
}

fn append_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| HarnessError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for it in items {
        serde_json::to_writer(&mut w, it).expect("record serializes");
        w.write_all(b"\n").map_err(|e| HarnessError::io(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Replica records in `dir`, skipping a torn final line.
pub fn read_replicas(dir: &Path) -> Result<Vec<ReplicaData>> {
    let p = dir.join(REPLICAS_FILE);
    if !p.exists() {
        return Ok(Vec::new());
    }
    let f = std::fs::File::open(&p).map_err(|e| HarnessError::io(&p, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| HarnessError::io(&p, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(d) => out.push(d),
            Err(_) => break,
        }
    }
    Ok(out)
}

fn write_replicas(dir: &Path, data: &[ReplicaData]) -> Result<()> {
    let p = dir.join(REPLICAS_FILE);
    let _ = std::fs::remove_file(&p);
    append_lines(&p, data)
}

pub fn read_config(dir: &Path) -> Result<RunConfig> {
    let p = dir.join(CONFIG_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Malformed {
        path: p.display().to_string(),
        reason: e.to_string(),
    })
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let p = dir.join(CONFIG_FILE);
    std::fs::write(&p, serde_json::to_string_pretty(cfg).expect("config serializes")).map_err(|e| HarnessError::io(&p, e))
}

/// Runs `cfg` into `opts.out`. A finished run with the same config is a
/// no-op; an unfinished one continues only with `resume`.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunManifest> {
    cfg.experiment.validate()?;
    let dir = &opts.out;
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let hash = cfg.hash();
    let exp = &cfg.experiment;
    let mut manifest = match RunManifest::load(dir)? {
        Some(m) if m.config_hash != hash => {
            return Err(HarnessError::Config(format!(
                "config hash mismatch with existing run in {}",
                dir.display()
            )))
        }
        Some(_) if !opts.resume => {
            return Err(HarnessError::Config(format!(
                "{} already holds a run; pass --resume to continue it",
                dir.display()
            )))
        }
        Some(m) => m,
        None => RunManifest::new(exp.name(), hash.clone(), exp.seed()),
    };
    let range = cfg.replica_range();
    let started = Instant::now();
    if exp.per_replica() {
        let requested = (range.start, range.end);
        if manifest.finished && manifest.completed.iter().any(|&(a, b)| a <= requested.0 && requested.1 <= b) {
            return Ok(manifest);
        }
        check_seed_collisions(&[requested])?;
        write_config(dir, cfg)?;
        let kept: Vec<ReplicaData> = read_replicas(dir)?
            .into_iter()
            .filter(|d| manifest.covers(d.replica()))
            .collect();
        write_replicas(dir, &kept)?;
        manifest.finished = false;
        let mut chunks = 0;
        let mut start = range.start;
        while start < range.end {
            let end = (start + cfg.checkpoint_every).min(range.end);
            if (start..end).all(|r| manifest.covers(r)) {
                start = end;
                continue;
            }
            if opts.max_chunks.is_some_and(|m| chunks >= m) {
                manifest.wall_seconds += started.elapsed().as_secs_f64();
                manifest.record_throughput();
                manifest.save(dir)?;
                return Ok(manifest);
            }
            let todo: Vec<u64> = (start..end).filter(|&r| !manifest.covers(r)).collect();
            let (a, b) = (todo[0], todo[todo.len() - 1] + 1);
            let data = with_pool(opts.threads, || compute_chunk(exp, a..b))??;
            for d in &data {
                let (l, s) = d.loops_and_steps();
                manifest.loops_sampled += l;
                manifest.path_steps += s;
            }
            append_lines(&dir.join(REPLICAS_FILE), &data)?;
            manifest.add_range((a, b));
            manifest.save(dir)?;
            chunks += 1;
            start = end;
        }
        let mut data: Vec<ReplicaData> = read_replicas(dir)?;
        data.sort_by_key(|d| d.replica());
        manifest.outputs = with_pool(opts.threads, || write_results(cfg, &manifest, &data, dir))??;
    } else {
        if manifest.finished {
            return Ok(manifest);
        }
        write_config(dir, cfg)?;
        let outcome = with_pool(opts.threads, || single_shot(cfg, &hash, dir))??;
        manifest.outputs = outcome.0;
        manifest.add_range((0, exp.replicas().max(1)));
        if let Some(msg) = outcome.1 {
            manifest.finished = true;
            manifest.wall_seconds += started.elapsed().as_secs_f64();
            manifest.save(dir)?;
            return Err(HarnessError::Validation(msg));
        }
    }
    manifest.finished = true;
    manifest.wall_seconds += started.elapsed().as_secs_f64();
    manifest.record_throughput();
    manifest.save(dir)?;
    Ok(manifest)
}

fn record(cfg: &RunConfig, hash: &str, ranges: &[(u64, u64)], result: Value) -> ResultRecord {
    let exp = &cfg.experiment;
    let streams = if exp.per_replica() {
        "replica i uses stream_id([0x7265706c, i]) under the master seed".to_string()
    } else {
        "streams derived from the master seed by the experiment's fixed tags".to_string()
    };
    ResultRecord {
        experiment: exp.name().into(),
        config_hash: hash.into(),
        seed: exp.seed(),
        replicas: ranges.to_vec(),
        streams,
        params: serde_json::to_value(exp).expect("config serializes"),
        result,
    }
}

fn write_jsonl_file(dir: &Path, name: &str, items: &[impl Serialize]) -> Result<String> {
    let p = dir.join(name);
    let _ = std::fs::remove_file(&p);
    append_lines(&p, items)?;
    Ok(name.to_string())
}

fn write_with(dir: &Path, name: &str, f: impl FnOnce(&mut Vec<u8>) -> bls_core::Result<()>) -> Result<String> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    let p = dir.join(name);
    std::fs::write(&p, buf).map_err(|e| HarnessError::io(&p, e))?;
    Ok(name.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitEntry {
    pub alpha: f64,
    pub k: usize,
    pub lambda: f64,
    pub fit: Option<ExponentFit>,
    pub error: Option<String>,
    pub band: Option<BandReport>,
    pub submultiplicativity: SubmultReport,
    pub dimension: Option<DimensionReport>,
}

/// Fits every `(alpha, k, lambda)` series of an estimate.
pub fn fit_series(spec: &FitSpec, series: &EstimateSeries) -> Vec<FitEntry> {
    let c = &spec.estimate;
    let mut out = Vec::new();
    for &alpha in &c.alphas {
        for &k in &c.ks {
            for &lambda in &c.lambdas {
                let s = series.select(alpha, k, lambda);
                let fit = fit_exponent(&s, &spec.window.window(c.seed));
                let (fit, error) = match fit {
                    Ok(f) => (Some(f), None),
                    Err(e) => (None, Some(e.to_string())),
                };
                out.push(FitEntry {
                    alpha,
                    k,
                    lambda,
                    band: fit.as_ref().map(|f| check_band(&s, f, spec.band_tol)),
                    dimension: fit
                        .as_ref()
                        .filter(|_| k == 1 && lambda == 1.0)
                        .map(dimension_report),
                    fit,
                    error,
                    submultiplicativity: check_submultiplicativity(&s),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityEntry {
    pub k: usize,
    pub lambda: f64,
    pub report: Option<ContinuityReport>,
    pub error: Option<String>,
    /// The sweep reports gaps without asserting a rate.
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutSummary {
    pub hit_fraction_slope: Option<f64>,
    pub dimension: Option<bls_core::cutpoints::DimensionEstimate>,
    pub dimension_error: Option<String>,
    pub f_to_k_slope: Option<f64>,
    pub second_moment: Option<bls_core::cutpoints::SecondMomentReport>,
    pub lost_cubes: u64,
}

/// Summary statistics of a cut-box scan.
pub fn summarize_cuts(scan: &CutScan, cfg: &bls_core::cutpoints::CutScanConfig, replicas: u64) -> CutSummary {
    let ns = &cfg.n_range;
    let per_n = |f: &dyn Fn(&CutCountRow) -> f64| -> Vec<f64> {
        ns.iter()
            .map(|&n| {
                let rows: Vec<&CutCountRow> = scan.counts.iter().filter(|c| c.n == n).collect();
                rows.iter().map(|c| f(c)).sum::<f64>() / rows.len().max(1) as f64
            })
            .collect()
    };
    let log_slope = |v: &[f64]| -> Option<f64> {
        let (x, y): (Vec<f64>, Vec<f64>) = ns
            .iter()
            .zip(v)
            .filter(|(_, &y)| y > 0.0)
            .map(|(&n, &y)| (n as f64, y.log2()))
            .unzip();
        linear_fit(&x, &y).map(|f| f.slope)
    };
    let hit = per_n(&|c| c.cubes_hit as f64 / c.cubes_total as f64);
    let k = per_n(&|c| c.k_count);
    let f = per_n(&|c| c.f_count);
    let ratio: Vec<f64> = k.iter().zip(&f).map(|(k, f)| if *k > 0.0 { f / k } else { 0.0 }).collect();
    let dim = dimension_estimate(&scan.k_matrix(ns), ns, 1000, cfg.seed);
    let second_moment = dim
        .as_ref()
        .ok()
        .map(|d| second_moment_check(&scan.pairs, replicas, cfg.j, 2.0 - d.dim_hat, 10.0, 5));
    CutSummary {
        hit_fraction_slope: log_slope(&hit),
        dimension_error: dim.as_ref().err().map(|e| e.to_string()),
        dimension: dim.ok(),
        f_to_k_slope: log_slope(&ratio),
        second_moment,
        lost_cubes: scan.counts.iter().map(|c| c.cubes_lost).sum(),
    }
}

pub fn assemble_cuts(data: &[ReplicaData]) -> CutScan {
    let mut scan = CutScan::default();
    for d in data {
        if let ReplicaData::Cut(c) = d {
            scan.counts.extend(c.counts.iter().cloned());
            scan.pairs.extend(c.pairs.iter().cloned());
            scan.records.extend(c.records.iter().copied());
            scan.attempts.push(c.attempts);
        }
    }
    scan
}

pub fn estimate_series(cfg: &ExperimentConfig, data: &[ReplicaData]) -> EstimateSeries {
    let recs: Vec<ReplicaRecord> = data
        .iter()
        .filter_map(|d| match d {
            ReplicaData::Estimate(r) => Some(r.clone()),
            _ => None,
        })
        .collect();
    EstimateSeries::from_records(cfg, &recs)
}

/// Writes the result files of a per-replica experiment from its sorted
/// replica records; returns the file names.
pub fn write_results(cfg: &RunConfig, manifest: &RunManifest, data: &[ReplicaData], dir: &Path) -> Result<Vec<String>> {
    let hash = &manifest.config_hash;
    let ranges = &manifest.completed;
    let n = data.len() as u64;
    let rec = |v: Value| record(cfg, hash, ranges, v);
    let mut outputs = vec![REPLICAS_FILE.to_string()];
    match &cfg.experiment {
        Experiment::EstimateP(c) => {
            let series = estimate_series(c, data);
            let lines: Vec<ResultRecord> = series.records.iter().map(|r| rec(json!(r))).collect();
            outputs.push(write_jsonl_file(dir, RESULTS_FILE, &lines)?);
            outputs.push(write_with(dir, "plot.csv", |w| write_plot_csv(&series.records, w))?);
        }
        Experiment::Fit(spec) => {
            let series = estimate_series(&spec.estimate, data);
            let lines: Vec<ResultRecord> = fit_series(spec, &series).into_iter().map(|e| rec(json!(e))).collect();
            outputs.push(write_jsonl_file(dir, RESULTS_FILE, &lines)?);
            outputs.push(write_jsonl_file(dir, "estimates.jsonl", &series.records)?);
            outputs.push(write_with(dir, "plot.csv", |w| write_plot_csv(&series.records, w))?);
        }
        Experiment::Continuity(spec) => {
            let series = estimate_series(&spec.estimate, data);
            let c = &spec.estimate;
            let mut lines = Vec::new();
            for &k in &c.ks {
                for &lambda in &c.lambdas {
                    let input: Vec<(f64, Vec<&EstimateRecord>)> =
                        c.alphas.iter().map(|&a| (a, series.select(a, k, lambda))).collect();
                    let r = continuity_sweep(&input, &spec.window.window(c.seed));
                    lines.push(rec(json!(ContinuityEntry {
                        k,
                        lambda,
                        error: r.as_ref().err().map(|e| e.to_string()),
                        report: r.ok(),
                        note: "gaps are reported without asserting a modulus of continuity".into(),
                    })));
                }
            }
            outputs.push(write_jsonl_file(dir, RESULTS_FILE, &lines)?);
            outputs.push(write_jsonl_file(dir, "estimates.jsonl", &series.records)?);
            outputs.push(write_with(dir, "plot.csv", |w| write_plot_csv(&series.records, w))?);
        }
        Experiment::Cutscan(c) => {
            let scan = assemble_cuts(data);
            let summary = summarize_cuts(&scan, c, n);
            outputs.push(write_jsonl_file(dir, RESULTS_FILE, &[rec(json!(summary))])?);
            outputs.push(write_with(dir, "cut_counts.csv", |w| scan.write_counts_csv(w))?);
            outputs.push(write_with(dir, "cut_pairs.csv", |w| scan.write_pairs_csv(w))?);
            outputs.push(write_with(dir, "cut_boxes.csv", |w| scan.write_records_csv(w))?);
        }
        Experiment::ClusterSurvey(s) => {
            let mut successes = vec![0u64; s.alphas.len()];
            for d in data {
                if let ReplicaData::Survey(r) = d {
                    for (c, ok) in successes.iter_mut().zip(&r.ok) {
                        *c += *ok as u64;
                    }
                }
            }
            let rows = survey_rows(&s.alphas, s.diameter_bound, &successes, n);
            let lines: Vec<ResultRecord> = rows.iter().map(|r| rec(json!(r))).collect();
            outputs.push(write_jsonl_file(dir, RESULTS_FILE, &lines)?);
        }
        _ => unreachable!("single-shot experiment"),
    }
    Ok(outputs)
}

/// Runs a single-shot experiment; the second value is a validation
/// failure message.
fn single_shot(cfg: &RunConfig, hash: &str, dir: &Path) -> Result<(Vec<String>, Option<String>)> {
    let ranges = [(0, cfg.experiment.replicas().max(1))];
    let rec = |v: Value| record(cfg, hash, &ranges, v);
    let mut failure = None;
    let lines = match &cfg.experiment {
        Experiment::Splitting(c) => {
            let r = estimate_p_splitting(c)?;
            vec![rec(json!({ "estimate": r.to_record(c), "detail": r }))]
        }
        Experiment::Separation(c) => vec![rec(json!(separation_stats(c)?))],
        Experiment::ConeDecay(c) => {
            let r = cone_confinement_decay(c)?;
            vec![rec(json!({ "report": r, "path_c1_c2": r.path_c1_c2(), "cluster_c1_c2": r.cluster_c1_c2() }))]
        }
        Experiment::Validate(v) => {
            let checks = crate::validate::run_checks(v.seed);
            let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            if !failed.is_empty() {
                failure = Some(format!("failed checks: {}", failed.join(", ")));
            }
            checks.iter().map(|c| rec(json!(c))).collect()
        }
        _ => unreachable!("per-replica experiment"),
    };
    Ok((vec![write_jsonl_file(dir, RESULTS_FILE, &lines)?], failure))
}
