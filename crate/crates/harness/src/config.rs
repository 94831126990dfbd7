//! Run configuration: one TOML file naming the experiment and every
//! modelling knob explicitly.

use bls_core::analysis::FitWindow;
use bls_core::cutpoints::CutScanConfig;
use bls_core::estimators::{ConeDecayConfig, ExperimentConfig, SeparationConfig, SplittingConfig};
use bls_core::geometry::{Ball, LocalScale};
use bls_core::soup::{RootRegion, SoupConfig};
use bls_core::RngStream;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::error::{HarnessError, Result};

fn default_checkpoint() -> u64 {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// First replica id of this run; split runs over disjoint ranges merge.
    #[serde(default)]
    pub first_replica: u64,
    /// Replicas per checkpoint.
    #[serde(default = "default_checkpoint")]
    pub checkpoint_every: u64,
    pub experiment: Experiment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    EstimateP(ExperimentConfig),
    Splitting(SplittingConfig),
    Separation(SeparationConfig),
    Cutscan(CutScanConfig),
    ConeDecay(ConeDecayConfig),
    ClusterSurvey(SurveySpec),
    Continuity(FitSpec),
    Fit(FitSpec),
    Validate(ValidateSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurveySpec {
    pub alphas: Vec<f64>,
    pub diameter_bound: f64,
    /// Soup window radius around the origin.
    pub window_radius: f64,
    pub delta: f64,
    pub h: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub min_loop_steps: usize,
    pub replicas: u64,
    pub seed: u64,
}

impl SurveySpec {
    pub fn template(&self) -> SoupConfig {
        SoupConfig {
            alpha: self.alphas.iter().copied().fold(0.0, f64::max),
            root_region: RootRegion::Ball(Ball::centered(self.window_radius)),
            t_min: self.t_min,
            t_max: self.t_max,
            scale: LocalScale::origin(),
            containment: Some(Ball::centered(self.window_radius)),
            exclusion: None,
            delta: self.delta,
            min_loop_steps: self.min_loop_steps,
            stream: RngStream::new(self.seed, 0x7375_7276),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub r_min: f64,
    /// Omitted for no upper limit.
    pub r_max: Option<f64>,
    pub min_avoiding: u64,
    pub bootstrap: usize,
}

impl WindowSpec {
    pub fn window(&self, seed: u64) -> FitWindow {
        FitWindow {
            r_min: self.r_min,
            r_max: self.r_max.unwrap_or(f64::INFINITY),
            min_avoiding: self.min_avoiding,
            bootstrap: self.bootstrap,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSpec {
    pub estimate: ExperimentConfig,
    pub window: WindowSpec,
    pub band_tol: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSpec {
    pub seed: u64,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::EstimateP(_) => "estimate-p",
            Experiment::Splitting(_) => "splitting",
            Experiment::Separation(_) => "separation",
            Experiment::Cutscan(_) => "cutscan",
            Experiment::ConeDecay(_) => "cone-decay",
            Experiment::ClusterSurvey(_) => "cluster-survey",
            Experiment::Continuity(_) => "continuity",
            Experiment::Fit(_) => "fit",
            Experiment::Validate(_) => "validate",
        }
    }

    /// Kinds whose replicas are independent, checkpointed and mergeable.
    pub fn per_replica(&self) -> bool {
        matches!(
            self,
            Experiment::EstimateP(_)
                | Experiment::Cutscan(_)
                | Experiment::ClusterSurvey(_)
                | Experiment::Continuity(_)
                | Experiment::Fit(_)
        )
    }

    pub fn seed(&self) -> u64 {
        match self {
            Experiment::EstimateP(c) => c.seed,
            Experiment::Splitting(c) => c.seed,
            Experiment::Separation(c) => c.seed,
            Experiment::Cutscan(c) => c.seed,
            Experiment::ConeDecay(c) => c.seed,
            Experiment::ClusterSurvey(c) => c.seed,
            Experiment::Continuity(c) | Experiment::Fit(c) => c.estimate.seed,
            Experiment::Validate(c) => c.seed,
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            Experiment::EstimateP(c) => c.seed = seed,
            Experiment::Splitting(c) => c.seed = seed,
            Experiment::Separation(c) => c.seed = seed,
            Experiment::Cutscan(c) => c.seed = seed,
            Experiment::ConeDecay(c) => c.seed = seed,
            Experiment::ClusterSurvey(c) => c.seed = seed,
            Experiment::Continuity(c) | Experiment::Fit(c) => c.estimate.seed = seed,
            Experiment::Validate(c) => c.seed = seed,
        }
    }

    /// Replicas (or runs, or samples) requested.
    pub fn replicas(&self) -> u64 {
        match self {
            Experiment::EstimateP(c) => c.outer_n,
            Experiment::Splitting(c) => c.runs,
            Experiment::Separation(c) => c.outer_n,
            Experiment::Cutscan(c) => c.replicas,
            Experiment::ConeDecay(c) => c.samples,
            Experiment::ClusterSurvey(c) => c.replicas,
            Experiment::Continuity(c) | Experiment::Fit(c) => c.estimate.outer_n,
            Experiment::Validate(_) => 0,
        }
    }

    pub fn set_replicas(&mut self, n: u64) {
        match self {
            Experiment::EstimateP(c) => c.outer_n = n,
            Experiment::Splitting(c) => c.runs = n,
            Experiment::Separation(c) => c.outer_n = n,
            Experiment::Cutscan(c) => c.replicas = n,
            Experiment::ConeDecay(c) => c.samples = n,
            Experiment::ClusterSurvey(c) => c.replicas = n,
            Experiment::Continuity(c) | Experiment::Fit(c) => c.estimate.outer_n = n,
            Experiment::Validate(_) => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = match self {
            Experiment::EstimateP(c) => c.validate(),
            Experiment::Splitting(c) => c.validate(),
            Experiment::Separation(c) => c.validate(),
            Experiment::Cutscan(c) => c.validate(),
            Experiment::ConeDecay(c) => c.validate(),
            Experiment::ClusterSurvey(c) => {
                if c.alphas.is_empty() || c.alphas.iter().any(|a| !(*a >= 0.0)) {
                    return Err(HarnessError::Config("survey alphas must be nonempty and >= 0".into()));
                }
                if !(c.diameter_bound > 0.0 && c.window_radius > 1.0) {
                    return Err(HarnessError::Config("need diameter_bound > 0 and window_radius > 1".into()));
                }
                c.template().validate()
            }
            Experiment::Continuity(c) | Experiment::Fit(c) => {
                if !(c.band_tol >= 1.0) {
                    return Err(HarnessError::Config("band_tol must be >= 1".into()));
                }
                if matches!(self, Experiment::Continuity(_)) && !c.estimate.alphas.contains(&0.0) {
                    return Err(HarnessError::Config("continuity needs alpha = 0 in alphas".into()));
                }
                c.estimate.validate()
            }
            Experiment::Validate(_) => Ok(()),
        };
        r.map_err(|e| HarnessError::Config(e.to_string()))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        if cfg.checkpoint_every == 0 {
            return Err(HarnessError::Config("checkpoint_every must be >= 1".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the experiment with its replica count cleared, so runs
    /// over different replica ranges of one experiment share a hash.
    pub fn hash(&self) -> String {
        let mut e = self.experiment.clone();
        if e.per_replica() {
            e.set_replicas(0);
        }
        let json = serde_json::to_vec(&e).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn replica_range(&self) -> std::ops::Range<u64> {
        self.first_replica..self.first_replica + self.experiment.replicas()
    }
}
