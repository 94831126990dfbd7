use std::path::{Path, PathBuf};

use crate::error::{HarnessError, Result};
use crate::manifest::{normalize, overlap, RunManifest};
use crate::run::{check_seed_collisions, read_config, read_replicas, write_results, ReplicaData, REPLICAS_FILE};

/// Merges finished per-replica runs over disjoint replica ranges into
/// `out`. The result equals a single run over the union of the ranges.
pub fn merge(inputs: &[PathBuf], out: &Path) -> Result<RunManifest> {
    if inputs.is_empty() {
        return Err(HarnessError::Config("merge needs at least one run".into()));
    }
    let mut manifests = Vec::new();
    for dir in inputs {
        let m = RunManifest::load(dir)?
            .ok_or_else(|| HarnessError::Config(format!("{} has no manifest", dir.display())))?;
        if !m.finished {
            return Err(HarnessError::Config(format!("{} is unfinished; resume it first", dir.display())));
        }
        manifests.push(m);
    }
    let hash = manifests[0].config_hash.clone();
    if let Some((i, _)) = manifests.iter().enumerate().find(|(_, m)| m.config_hash != hash) {
        return Err(HarnessError::Config(format!(
            "config hash mismatch between {} and {}",
            inputs[0].display(),
            inputs[i].display()
        )));
    }
    let mut cfg = read_config(&inputs[0])?;
    if !cfg.experiment.per_replica() {
        return Err(HarnessError::Config(format!("{} runs are not mergeable", cfg.experiment.name())));
    }
    for i in 0..manifests.len() {
        for j in i + 1..manifests.len() {
            if let Some((a, b)) = overlap(&manifests[i].completed, &manifests[j].completed) {
                return Err(HarnessError::Config(format!(
                    "replica ranges overlap on {a}..{b} between {} and {}",
                    inputs[i].display(),
                    inputs[j].display()
                )));
            }
        }
    }
    let all: Vec<(u64, u64)> = manifests.iter().flat_map(|m| m.completed.iter().copied()).collect();
    check_seed_collisions(&all)?;
    let mut data: Vec<ReplicaData> = Vec::new();
    for (dir, m) in inputs.iter().zip(&manifests) {
        data.extend(read_replicas(dir)?.into_iter().filter(|d| m.covers(d.replica())));
    }
    data.sort_by_key(|d| d.replica());
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let mut merged = RunManifest::new(cfg.experiment.name(), hash, manifests[0].master_seed);
    merged.completed = normalize(&all);
    // The merged config describes the union as one contiguous run when it is.
    if let [(a, b)] = merged.completed[..] {
        cfg.first_replica = a;
        cfg.experiment.set_replicas(b - a);
    }
    let p = out.join(crate::run::CONFIG_FILE);
    std::fs::write(&p, serde_json::to_string_pretty(&cfg).expect("config serializes")).map_err(|e| HarnessError::io(&p, e))?;
    let rp = out.join(REPLICAS_FILE);
    let _ = std::fs::remove_file(&rp);
    {
        use std::io::Write;
        let f = std::fs::File::create(&rp).map_err(|e| HarnessError::io(&rp, e))?;
        let mut w = std::io::BufWriter::new(f);
        for d in &data {
            serde_json::to_writer(&mut w, d).expect("record serializes");
            w.write_all(b"\n").map_err(|e| HarnessError::io(&rp, e))?;
        }
        w.flush().map_err(|e| HarnessError::io(&rp, e))?;
    }
    merged.outputs = write_results(&cfg, &merged, &data, out)?;
    for m in &manifests {
        merged.wall_seconds += m.wall_seconds;
        merged.loops_sampled += m.loops_sampled;
        merged.path_steps += m.path_steps;
    }
    merged.record_throughput();
    merged.finished = true;
    merged.save(out)?;
    Ok(merged)
}
