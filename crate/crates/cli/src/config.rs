use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use stoch_turnpike::instances::REFERENCE_HORIZONS;
use stoch_turnpike::{reference_problem, NoiseKind, ProblemSpec};

/// Problem given either as a path to a JSON problem file (relative to the
/// config file) or inline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemSource {
    Path(PathBuf),
    Inline(serde_json::Value),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: Option<ProblemSource>,
    pub horizons: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub etas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub mc_samples: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub emit_paths: bool,
    pub path_realizations: usize,
    pub probes: usize,
    pub restarts: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: None,
            horizons: REFERENCE_HORIZONS.to_vec(),
            epsilons: vec![1e-1, 1e-2, 1e-3],
            etas: vec![0.05],
            deltas: vec![0.0, 1.0],
            mc_samples: 10_000,
            seed: 0,
            output_dir: PathBuf::from("out"),
            emit_paths: true,
            path_realizations: 2,
            probes: 10_000,
            restarts: 8,
        }
    }
}

/// Configuration error, reported with exit code 1.
#[derive(Debug)]
pub struct ValidationError(pub String);

impl std::fmt::Display for ValidationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ValidationError {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ValidationError(msg.into()).into()
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, base))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let mut errs = Vec::new();
        if self.horizons.is_empty() {
            errs.push("horizons must be nonempty".to_string());
        }
        if self.horizons.windows(2).any(|w| w[0] >= w[1]) {
            errs.push("horizons must be strictly ascending".into());
        }
        if self.horizons.contains(&0) {
            errs.push("horizons must be positive".into());
        }
        if self.mc_samples == 0 {
            errs.push("mc_samples must be at least 1".into());
        }
        if self.epsilons.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            errs.push("epsilons must be positive".into());
        }
        if self.etas.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            errs.push("etas must lie in (0, 1]".into());
        }
        if self.deltas.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            errs.push("deltas must be nonnegative".into());
        }
        if self.restarts == 0 {
            errs.push("restarts must be at least 1".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(invalid(errs.join("; ")))
        }
    }

    /// Resolves the problem. `noise` selects the built-in instance's noise law
    /// and is rejected for user-supplied problems.
    pub fn problem(&self, base: &Path, noise: Option<NoiseKind>) -> anyhow::Result<ProblemSpec> {
        let spec = match (&self.problem, noise) {
            (None, noise) => reference_problem(noise.unwrap_or(NoiseKind::Gaussian)),
            (Some(_), Some(_)) => return Err(invalid("--noise only applies to the built-in instance")),
            (Some(ProblemSource::Path(p)), None) => {
                let path = base.join(p);
                let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                ProblemSpec::from_json(&text)?
            }
            (Some(ProblemSource::Inline(v)), None) => ProblemSpec::from_json_value(v.clone())?,
        };
        Ok(spec.validated()?)
    }
}

pub fn parse_noise(s: &str) -> Result<NoiseKind, String> {
    s.parse()
}

pub fn ensure_dir(dir: &Path) -> anyhow::Result<()> {
    if dir.exists() && !dir.is_dir() {
        bail!("{} exists and is not a directory", dir.display());
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}
