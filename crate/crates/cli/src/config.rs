//! Settings shared by every subcommand. Values come from command-line flags,
//! then from the TOML file named by `TARGETED_RISK_CONFIG`, then from
//! built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use targeted_risk::nuisance::{HazardMode, PropensityKind};
use targeted_risk::NormKind;

pub const CONFIG_ENV: &str = "TARGETED_RISK_CONFIG";

/// Keys accepted in the config file, named like the long flags.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub tau: Option<f64>,
    pub times: Option<Vec<f64>>,
    pub arm: Option<u8>,
    pub contrast: Option<bool>,
    pub causes: Option<String>,
    pub norm: Option<String>,
    pub dx0: Option<f64>,
    pub max_steps: Option<usize>,
    pub criterion: Option<f64>,
    pub baseline: Option<String>,
    pub hazard: Option<String>,
    pub propensity: Option<String>,
    pub level: Option<f64>,
    pub draws: Option<usize>,
    pub dgp: Option<String>,
    pub n: Option<usize>,
    pub reps: Option<usize>,
    pub grid_sizes: Option<Vec<usize>>,
    pub probes: Option<usize>,
    pub oracle_n: Option<usize>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

impl FileConfig {
    pub fn from_env() -> Result<Self> {
        match std::env::var_os(CONFIG_ENV) {
            Some(path) if !path.is_empty() => Self::load(Path::new(&path)),
            _ => Ok(Self::default()),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config file {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config file {}", path.display()))
    }
}

/// Comma-separated positive numbers, e.g. `0.5,1,1.5`.
pub fn parse_times(raw: &str) -> Result<Vec<f64>> {
    let times = split_list(raw)
        .map(|s| s.parse::<f64>().with_context(|| format!("`{s}` is not a time")))
        .collect::<Result<Vec<_>>>()?;
    if times.is_empty() {
        bail!("the list of times is empty");
    }
    if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        bail!("times must be positive, got {t}");
    }
    Ok(times)
}

/// Comma-separated positive integers.
pub fn parse_sizes(raw: &str) -> Result<Vec<usize>> {
    let sizes = split_list(raw)
        .map(|s| s.parse::<usize>().with_context(|| format!("`{s}` is not a grid size")))
        .collect::<Result<Vec<_>>>()?;
    validate_sizes(&sizes)?;
    Ok(sizes)
}

pub fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() {
        bail!("at least one grid size is required");
    }
    if sizes.contains(&0) {
        bail!("grid sizes must be positive");
    }
    if sizes.windows(2).any(|w| w[1] <= w[0]) {
        bail!("grid sizes must be strictly increasing");
    }
    Ok(())
}

pub fn parse_norm(raw: &str) -> Result<NormKind> {
    Ok(match raw {
        "identity" | "unweighted" => NormKind::Identity,
        "variance" | "variance-diagonal" => NormKind::VarianceDiagonal,
        "covariance" => NormKind::Covariance,
        other => bail!("unknown norm `{other}` (expected identity, variance or covariance)"),
    })
}

pub fn parse_hazard(raw: &str) -> Result<HazardMode> {
    Ok(match raw {
        "stratified" | "stratified-nonparametric" => HazardMode::StratifiedNonparametric,
        "pooled-logistic" | "logistic" => HazardMode::PooledLogistic,
        "cox" => HazardMode::Cox,
        other => bail!("unknown hazard model `{other}` (expected stratified, pooled-logistic or cox)"),
    })
}

pub fn parse_propensity(raw: &str) -> Result<PropensityKind> {
    Ok(match raw {
        "empirical" | "empirical-proportion" => PropensityKind::EmpiricalProportion,
        "logistic" => PropensityKind::Logistic,
        other => bail!("unknown propensity model `{other}` (expected empirical or logistic)"),
    })
}

/// `all` or a comma-separated list of 1-based cause codes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Causes {
    All,
    List(Vec<usize>),
}

impl Causes {
    pub fn parse(raw: &str) -> Result<Self> {
        if raw.trim().eq_ignore_ascii_case("all") {
            return Ok(Causes::All);
        }
        let mut list = split_list(raw)
            .map(|s| s.parse::<usize>().with_context(|| format!("`{s}` is not a cause code")))
            .collect::<Result<Vec<_>>>()?;
        if list.is_empty() || list.contains(&0) {
            bail!("causes must be `all` or a list of codes 1..=J");
        }
        list.sort_unstable();
        list.dedup();
        Ok(Causes::List(list))
    }

    pub fn resolve(&self, num_causes: usize) -> Result<Vec<usize>> {
        match self {
            Causes::All => Ok((1..=num_causes).collect()),
            Causes::List(list) => {
                if let Some(j) = list.iter().find(|&&j| j > num_causes) {
                    bail!("cause {j} requested but the data have {num_causes} cause(s)");
                }
                Ok(list.clone())
            }
        }
    }
}

fn split_list(raw: &str) -> impl Iterator<Item = &str> {
    raw.split(',').map(str::trim).filter(|s| !s.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_parse_and_validate() {
        assert_eq!(parse_times("0.5, 1,1.5").unwrap(), vec![0.5, 1.0, 1.5]);
        assert!(parse_times("").is_err());
        assert!(parse_times("1,-2").is_err());
        assert_eq!(parse_sizes("20,40").unwrap(), vec![20, 40]);
        assert!(parse_sizes("").is_err());
        assert!(parse_sizes("40,20").is_err());
    }

    #[test]
    fn causes_resolve_against_the_data() {
        assert_eq!(Causes::parse("all").unwrap().resolve(2).unwrap(), vec![1, 2]);
        assert_eq!(Causes::parse("2,1,2").unwrap().resolve(2).unwrap(), vec![1, 2]);
        assert!(Causes::parse("3").unwrap().resolve(2).is_err());
        assert!(Causes::parse("0").is_err());
    }

    #[test]
    fn model_names() {
        assert_eq!(parse_norm("variance").unwrap(), NormKind::VarianceDiagonal);
        assert_eq!(parse_hazard("cox").unwrap(), HazardMode::Cox);
        assert!(parse_propensity("probit").is_err());
    }

    #[test]
    fn config_file_rejects_unknown_keys() {
        assert!(toml::from_str::<FileConfig>("seed = 3\nnorm = \"covariance\"").is_ok());
        assert!(toml::from_str::<FileConfig>("sede = 3").is_err());
    }
}
