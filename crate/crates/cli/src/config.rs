//! Experiment configuration: a strict TOML schema and its translation into
//! core objects. Every failure here maps to exit status 2.

use std::path::Path;

use fraclab_core::grid::{
    partition_domain, sample_coefficient, CoefficientField, CoefficientSpec, DomainPartition, Grid, Region, Truncation,
};
use fraclab_core::nonlocal::Potential;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Read(#[from] std::io::Error),
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Optional; must match the experiment named on the command line.
    pub experiment: Option<String>,
    pub seed: Option<u64>,
    pub grid: Option<GridConfig>,
    pub operator: Option<OperatorConfig>,
    pub domain: Option<DomainConfig>,
    pub potentials: Option<PotentialsConfig>,
    #[serde(default)]
    pub parameters: Parameters,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
    #[serde(rename = "N")]
    pub points: usize,
    #[serde(rename = "Lbox")]
    pub half_extent: f64,
    #[serde(default = "default_bc")]
    pub bc: Boundary,
}

fn default_bc() -> Boundary {
    Boundary::Reflecting
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Boundary {
    Reflecting,
    Absorbing,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorConfig {
    pub s: f64,
    #[serde(default)]
    pub coefficient: CoefficientConfig,
}

/// `a(x) = 1 + amplitude·sin(frequency·x_d)` on each diagonal entry for `sine`.
#[derive(Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum CoefficientConfig {
    #[default]
    Identity,
    Constant {
        value: f64,
    },
    Sine {
        amplitude: f64,
        #[serde(default = "one")]
        frequency: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum RegionConfig {
    Ball { center: Vec<f64>, radius: f64 },
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

impl RegionConfig {
    fn to_region(&self) -> Region {
        match self {
            RegionConfig::Ball { center, radius } => Region::Ball { center: center.clone(), radius: *radius },
            RegionConfig::Box { lower, upper } => Region::Box { lower: lower.clone(), upper: upper.clone() },
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub omega: RegionConfig,
    pub o1: Option<RegionConfig>,
    pub o2: Option<RegionConfig>,
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PotentialConfig {
    Zero,
    Constant { value: f64 },
    /// `amplitude·(1 - |x - center|²/radius²)²₊`.
    Bump { amplitude: f64, center: Vec<f64>, radius: f64 },
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialsConfig {
    pub q1: Option<PotentialConfig>,
    pub q2: Option<PotentialConfig>,
}

/// Experiment-specific knobs; each experiment documents the ones it reads.
#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Parameters {
    pub trials: Option<usize>,
    pub layers: Option<usize>,
    pub height: Option<f64>,
    pub radii: Option<Vec<f64>>,
    pub alphas: Option<Vec<f64>>,
    pub alpha: Option<f64>,
    pub probes: Option<usize>,
    /// `"o1"` (default) or `"both"` for the Runge control set.
    pub controls: Option<String>,
    pub tolerance: Option<f64>,
    pub noise: Option<f64>,
    pub max_iter: Option<usize>,
    /// Generate reconstruction data on a grid refined by this factor (1 or 2).
    pub data_refinement: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }

    pub fn grid(&self) -> Result<Grid, ConfigError> {
        let Some(g) = &self.grid else { return invalid("missing [grid] block") };
        let truncation = match g.bc {
            Boundary::Reflecting => Truncation::Reflecting,
            Boundary::Absorbing => Truncation::Absorbing,
        };
        Grid::build(g.n, g.half_extent, g.points, truncation).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Same box and truncation with `2N - 1` points per axis.
    pub fn refined_grid(&self) -> Result<Grid, ConfigError> {
        let grid = self.grid()?;
        Grid::build(grid.dim(), grid.half_extent(), 2 * grid.points_per_axis() - 1, grid.truncation())
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn s(&self) -> Result<f64, ConfigError> {
        let Some(op) = &self.operator else { return invalid("missing [operator] block") };
        if !(op.s > 0.0 && op.s <= 1.0) {
            return invalid(format!("operator.s must lie in (0, 1], got {}", op.s));
        }
        Ok(op.s)
    }

    pub fn coefficient(&self, grid: &Grid) -> Result<CoefficientField, ConfigError> {
        let Some(op) = &self.operator else { return invalid("missing [operator] block") };
        let n = grid.dim();
        let spec = match op.coefficient.clone() {
            CoefficientConfig::Identity => CoefficientSpec::Identity,
            CoefficientConfig::Constant { value } => {
                CoefficientSpec::diagonal((0..n).map(|_| move |_: &[f64]| value).collect())
            }
            CoefficientConfig::Sine { amplitude, frequency } => CoefficientSpec::diagonal(
                (0..n).map(|d| move |x: &[f64]| 1.0 + amplitude * (frequency * x[d]).sin()).collect(),
            ),
        };
        sample_coefficient(grid, &spec).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn partition(&self, grid: &Grid) -> Result<DomainPartition, ConfigError> {
        let Some(d) = &self.domain else { return invalid("missing [domain] block") };
        let o1 = d.o1.as_ref().map(RegionConfig::to_region);
        let o2 = d.o2.as_ref().map(RegionConfig::to_region);
        partition_domain(grid, &d.omega.to_region(), o1.as_ref(), o2.as_ref())
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    fn potential_config(&self, which: usize) -> Option<&PotentialConfig> {
        let p = self.potentials.as_ref()?;
        if which == 1 { p.q1.as_ref() } else { p.q2.as_ref() }
    }

    /// Potential `q1` or `q2`; absent entries are the zero potential.
    pub fn potential(&self, which: usize, grid: &Grid, partition: &DomainPartition) -> Result<Potential, ConfigError> {
        match self.potential_config(which) {
            None | Some(PotentialConfig::Zero) => Ok(Potential::zero(partition)),
            Some(PotentialConfig::Constant { value }) => {
                if !value.is_finite() {
                    return invalid("potential value must be finite");
                }
                Ok(Potential::constant(partition, *value))
            }
            Some(PotentialConfig::Bump { amplitude, center, radius }) => {
                if center.len() != grid.dim() || !(*radius > 0.0) {
                    return invalid("bump center must match the grid dimension and radius must be positive");
                }
                let (a, c, r) = (*amplitude, center.clone(), *radius);
                Ok(Potential::from_fn(grid, partition, move |x| {
                    let d2: f64 = x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
                    a * (1.0 - d2 / (r * r)).max(0.0).powi(2)
                }))
            }
        }
    }

    pub fn potentials_equal(&self) -> bool {
        let norm = |p: Option<&PotentialConfig>| p.cloned().unwrap_or(PotentialConfig::Zero);
        norm(self.potential_config(1)) == norm(self.potential_config(2))
    }

    /// The seed from the command line, else from the config.
    pub fn require_seed(&self, cli: Option<u64>) -> Result<u64, ConfigError> {
        cli.or(self.seed).ok_or_else(|| ConfigError::Invalid("this experiment is randomized and needs a seed".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
        seed = 3
        [grid]
        n = 1
        N = 17
        Lbox = 2.0
        [operator]
        s = 0.5
        coefficient = { kind = "sine", amplitude = 0.3 }
        [domain]
        omega = { ball = { center = [0.0], radius = 0.5 } }
        o1 = { box = { lower = [0.75], upper = [1.75] } }
        [potentials]
        q1 = { kind = "bump", amplitude = 1.0, center = [0.0], radius = 0.5 }
    "#;

    #[test]
    fn parses_and_builds() {
        let cfg: ExperimentConfig = toml::from_str(BASE).unwrap();
        let grid = cfg.grid().unwrap();
        assert_eq!(grid.len(), 17);
        assert_eq!(cfg.s().unwrap(), 0.5);
        let part = cfg.partition(&grid).unwrap();
        assert!(!part.first_region().is_empty() && part.second_region().is_empty());
        let q1 = cfg.potential(1, &grid, &part).unwrap();
        assert!(q1.sup_norm() > 0.5);
        assert_eq!(cfg.potential(2, &grid, &part).unwrap().sup_norm(), 0.0);
        assert!(!cfg.potentials_equal());
        assert_eq!(cfg.require_seed(None).unwrap(), 3);
        assert_eq!(cfg.require_seed(Some(9)).unwrap(), 9);
    }

    #[test]
    fn rejects_unknown_keys_and_missing_s() {
        assert!(toml::from_str::<ExperimentConfig>(&BASE.replace("seed = 3", "seed = 3\ncolour = 1")).is_err());
        assert!(toml::from_str::<ExperimentConfig>(&BASE.replace("s = 0.5", "")).is_err());
        let bad: ExperimentConfig = toml::from_str(&BASE.replace("s = 0.5", "s = 1.5")).unwrap();
        assert!(bad.s().is_err());
        let no_grid: ExperimentConfig = toml::from_str("seed = 1").unwrap();
        assert!(no_grid.grid().is_err());
    }
}
