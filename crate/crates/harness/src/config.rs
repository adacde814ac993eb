//! Experiment configuration, read from TOML.
//!
//! ```toml
//! schema_version = 1
//! seeds = [0, 1, 2]
//!
//! [world]
//! dim = 2
//! s_true = 2
//! sigma_y = 1.0
//! input = { kind = "uniform_box", low = -1.0, high = 1.0 }
//! kernel = { family = "gaussian", params = { bandwidth = 1.0 }, p = 0.1 }
//!
//! [sweep]
//! n_tasks = [60]
//! n = [400]
//! n_target = [50]
//! lambda = [2e-4, "auto:regime", "auto:krr"]
//! s = [2]
//! ```
//!
//! `n` is the per-half sample count, so each source task holds `2n` samples.

use std::collections::BTreeSet;
use std::fmt;

use kmeta::rates::RegularityParams;
use kmeta::synthetic::{InputDist, WorldConfig};
use kmeta::KernelSpec;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// The configuration shipped as the default experiment.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub world: WorldSection,
    pub sweep: Sweep,
    #[serde(default)]
    pub target: TargetSection,
    #[serde(default)]
    pub regularity: RegularitySection,
    #[serde(default = "all_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
}

/// World parameters; the task count is the largest swept `N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    pub dim: usize,
    pub s_true: usize,
    pub kernel: KernelSpec<f64>,
    pub input: InputDist,
    pub sigma_y: f64,
    #[serde(default = "one")]
    pub coeff_scale: f64,
    #[serde(default = "one")]
    pub target_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub n_tasks: Vec<usize>,
    pub n: Vec<usize>,
    pub n_target: Vec<usize>,
    pub lambda: Vec<LambdaChoice>,
    pub s: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    #[serde(default = "default_tau")]
    pub tau: f64,
}

impl Default for TargetSection {
    fn default() -> Self {
        Self { tau: default_tau() }
    }
}

/// Source smoothness `r`, plus `(p, α)` overrides for the kernel metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularitySection {
    #[serde(default = "half")]
    pub r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl Default for RegularitySection {
    fn default() -> Self {
        Self { r: half(), p: None, alpha: None }
    }
}

/// Optional per-record measurements. Columns of metrics that are not
/// requested are left empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    SinTheta,
    ChatCn,
    ExcessRisk,
    Baselines,
    DavisKahan,
}

fn all_metrics() -> Vec<Metric> {
    vec![Metric::SinTheta, Metric::ChatCn, Metric::ExcessRisk, Metric::Baselines, Metric::DavisKahan]
}

fn default_mc() -> usize {
    4000
}

fn default_tau() -> f64 {
    kmeta::inference::MIN_TAU
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

/// Pretraining `λ`: a number, or a schedule resolved per `(n, N)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaChoice {
    Fixed(f64),
    /// The schedule of the regime `(n, N)` falls in.
    Regime,
    /// The single-task optimal order at `n`.
    Krr,
}

impl fmt::Display for LambdaChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LambdaChoice::Fixed(v) => write!(f, "{v:e}"),
            LambdaChoice::Regime => f.write_str("auto:regime"),
            LambdaChoice::Krr => f.write_str("auto:krr"),
        }
    }
}

impl Serialize for LambdaChoice {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            LambdaChoice::Fixed(v) => s.serialize_f64(*v),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for LambdaChoice {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(LambdaChoice::Fixed(v)),
            Raw::Int(v) => Ok(LambdaChoice::Fixed(v as f64)),
            Raw::Text(t) => match t.as_str() {
                "auto:regime" => Ok(LambdaChoice::Regime),
                "auto:krr" => Ok(LambdaChoice::Krr),
                other => Err(serde::de::Error::custom(format!(
                    "unknown lambda schedule {other:?}; use a number, \"auto:regime\" or \"auto:krr\""
                ))),
            },
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn default_config() -> Self {
        Self::from_toml(DEFAULT_CONFIG).expect("shipped config is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        let sw = &self.sweep;
        for (name, empty) in [
            ("n_tasks", sw.n_tasks.is_empty()),
            ("n", sw.n.is_empty()),
            ("n_target", sw.n_target.is_empty()),
            ("lambda", sw.lambda.is_empty()),
            ("s", sw.s.is_empty()),
        ] {
            if empty {
                return bad(format!("sweep axis {name} must not be empty"));
            }
        }
        if sw.n_tasks.iter().any(|&v| v < self.world.s_true) {
            return bad(format!("every N must be at least s_true = {}", self.world.s_true));
        }
        if sw.n.contains(&0) || sw.s.contains(&0) || sw.n_target.contains(&0) {
            return bad("n, s and n_target must be positive".into());
        }
        for l in &sw.lambda {
            if let LambdaChoice::Fixed(v) = l {
                if !(*v > 0.0) || !v.is_finite() {
                    return bad(format!("fixed lambda must be positive, got {v}"));
                }
            }
        }
        if !(self.target.tau >= kmeta::inference::MIN_TAU) {
            return bad(format!("tau must be >= {}", kmeta::inference::MIN_TAU));
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be positive".into());
        }
        let needs_regularity = self.metrics.contains(&Metric::Baselines)
            || sw.lambda.iter().any(|l| !matches!(l, LambdaChoice::Fixed(_)));
        if needs_regularity {
            self.regularity_params()?;
        }
        self.world_config(0)?;
        Ok(())
    }

    /// `(r, p, α)` from the config, falling back to the kernel's metadata.
    pub fn regularity_params(&self) -> Result<RegularityParams> {
        let meta = self.world.kernel.regularity();
        let p = self.regularity.p.or(meta.map(|m| m.p));
        let alpha = self.regularity.alpha.or(meta.map(|m| m.alpha)).or(p);
        match (p, alpha) {
            (Some(p), Some(alpha)) => Ok(RegularityParams::new(self.regularity.r, p, alpha)?),
            _ => Err(HarnessError::Config(
                "automatic lambda and the KRR baseline need p: set it on the kernel or under [regularity]".into(),
            )),
        }
    }

    pub fn max_tasks(&self) -> usize {
        self.sweep.n_tasks.iter().copied().max().unwrap_or(0)
    }

    /// World for one seed, holding as many tasks as the largest `N`.
    pub fn world_config(&self, seed: u64) -> Result<WorldConfig> {
        let w = &self.world;
        let config = WorldConfig {
            dim: w.dim,
            s_true: w.s_true,
            n_tasks: self.max_tasks().max(w.s_true),
            kernel: w.kernel.clone(),
            input: w.input,
            sigma_y: w.sigma_y,
            seed,
            coeff_scale: w.coeff_scale,
            target_scale: w.target_scale,
        };
        if config.dim == 0 || config.s_true == 0 {
            return Err(HarnessError::Config("world dim and s_true must be positive".into()));
        }
        Ok(config)
    }

    pub fn wants(&self, metric: Metric) -> bool {
        self.metrics.contains(&metric)
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_parses() {
        let c = ExperimentConfig::default_config();
        assert_eq!(c.schema_version, SCHEMA_VERSION);
        assert_eq!(c.seeds.len(), 20);
        assert_eq!(c.hash().len(), 16);
        let again = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.hash(), c.hash());
    }

    fn minimal(extra: &str, lambda: &str) -> String {
        format!(
            r#"
schema_version = 1
seeds = [1, 2]
{extra}
[world]
dim = 1
s_true = 1
sigma_y = 0.1
input = {{ kind = "uniform_box", low = -1.0, high = 1.0 }}
kernel = {{ family = "gaussian", params = {{ bandwidth = 0.5 }} }}

[sweep]
n_tasks = [3]
n = [5]
n_target = [4]
lambda = [{lambda}]
s = [1]
"#
        )
    }

    #[test]
    fn lambda_choices() {
        let c = ExperimentConfig::from_toml(&minimal("metrics = [\"sin_theta\"]", "0.01, 1")).unwrap();
        assert_eq!(c.sweep.lambda, vec![LambdaChoice::Fixed(0.01), LambdaChoice::Fixed(1.0)]);
        let text = minimal("metrics = [\"sin_theta\"]\n[regularity]\np = 0.2", "\"auto:regime\", \"auto:krr\"");
        let c = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(c.sweep.lambda, vec![LambdaChoice::Regime, LambdaChoice::Krr]);
        assert_eq!(c.regularity_params().unwrap(), RegularityParams::new(0.5, 0.2, 0.2).unwrap());
        assert!(ExperimentConfig::from_toml(&minimal("", "\"auto:other\"")).is_err());
        assert!(ExperimentConfig::from_toml(&minimal("", "-1.0")).is_err());
    }

    #[test]
    fn validation() {
        // Baselines are on by default and need p, which a Gaussian kernel lacks.
        assert!(ExperimentConfig::from_toml(&minimal("", "0.1")).is_err());
        assert!(ExperimentConfig::from_toml(&minimal("[regularity]\np = 0.1", "0.1")).is_ok());
        let ok = minimal("metrics = []", "0.1");
        assert!(ExperimentConfig::from_toml(&ok).is_ok());
        assert!(ExperimentConfig::from_toml(&ok.replace("schema_version = 1", "schema_version = 2")).is_err());
        assert!(ExperimentConfig::from_toml(&ok.replace("seeds = [1, 2]", "seeds = [1, 1]")).is_err());
        assert!(ExperimentConfig::from_toml(&ok.replace("seeds = [1, 2]", "seeds = []")).is_err());
        assert!(ExperimentConfig::from_toml(&ok.replace("n_target = [4]", "n_target = []")).is_err());
        assert!(ExperimentConfig::from_toml(&ok.replace("n_tasks = [3]", "n_tasks = [0]")).is_err());
        assert!(ExperimentConfig::from_toml(&ok.replace("dim = 1", "dim = 1\nbogus = 3")).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::from_toml(&minimal("metrics = []", "0.1")).unwrap();
        let b = ExperimentConfig::from_toml(&minimal("metrics = []", "0.2")).unwrap();
        assert_ne!(a.hash(), b.hash());
    }
}
