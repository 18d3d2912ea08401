use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mclt::{CovarianceStructure, StoppingRule};

use crate::ingest::MissingPolicy;

#[derive(Debug, Parser)]
#[command(name = "mclt", version, about = "Cluster binary data with mixtures of common-slope latent trait models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model and write model.json and diagnostics.json.
    Fit(FitArgs),
    /// Fit a grid of models, write grid.csv and the minimum-BIC model.
    Grid(GridArgs),
    /// Generate data from a model; writes data.csv, model.json and labels.csv.
    Simulate(SimulateArgs),
    /// Compare a fitted model with reference labels and/or a true model.
    Evaluate(EvaluateArgs),
    /// Write posterior coordinates and memberships to projection.csv.
    Project(ProjectArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Stop {
    Aitken,
    Param,
}

impl From<Stop> for StoppingRule {
    fn from(s: Stop) -> Self {
        match s {
            Stop::Aitken => StoppingRule::Aitken,
            Stop::Param => StoppingRule::ParameterStability,
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV of 0/1/NA responses with a header row.
    #[arg(long)]
    pub input: PathBuf,
    /// Fit the block-effect model using the `block` column.
    #[arg(long)]
    pub block: bool,
    #[arg(long, value_enum, default_value_t = MissingPolicy::Indicator)]
    pub missing: MissingPolicy,
}

#[derive(Debug, Args)]
pub struct FitControl {
    #[arg(long, default_value_t = 10)]
    pub starts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gauss-Hermite nodes per latent dimension.
    #[arg(long = "gh-nodes", default_value_t = 10)]
    pub gh_nodes: usize,
    #[arg(long, value_enum, default_value_t = Stop::Aitken)]
    pub stop: Stop,
    #[arg(long = "max-iter", default_value_t = 2000)]
    pub max_iter: usize,
    /// Hold the block loadings at zero.
    #[arg(long = "freeze-beta")]
    pub freeze_beta: bool,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long = "G")]
    pub groups: usize,
    #[arg(long = "d")]
    pub latent_dim: usize,
    #[arg(long, default_value = "VVV")]
    pub structure: CovarianceStructure,
    #[command(flatten)]
    pub control: FitControl,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Component counts: `3`, `1,2,4` or `1..5`.
    #[arg(long = "G")]
    pub groups: String,
    /// Latent dimensions, same syntax as --G.
    #[arg(long = "d")]
    pub latent_dim: String,
    /// Comma-separated structures or `all`.
    #[arg(long, default_value = "all")]
    pub structure: String,
    #[command(flatten)]
    pub control: FitControl,
    /// Reference labels (CSV, last column) for an ARI column.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// True model in model.json format; the built-in reference model if absent.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Observation count (flat models).
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    /// Number of blocks; switches to block simulation.
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Observations per block.
    #[arg(long = "per-block", default_value_t = 20)]
    pub per_block: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = MissingPolicy::Indicator)]
    pub missing: MissingPolicy,
    /// Reference labels (CSV, last column).
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// True model for aligned mean squared errors.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Allow any invertible gauge in the alignment, not only rotations.
    #[arg(long = "linear-gauge")]
    pub linear_gauge: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = MissingPolicy::Indicator)]
    pub missing: MissingPolicy,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `3`, `1,2,4`, `1..5` (inclusive) or mixtures like `1..3,6`.
pub fn parse_counts(text: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((lo, hi)) = part.split_once("..") {
            let lo: usize = lo.trim().parse().map_err(|_| format!("bad range '{part}'"))?;
            let hi: usize = hi.trim().parse().map_err(|_| format!("bad range '{part}'"))?;
            if lo > hi {
                return Err(format!("empty range '{part}'"));
            }
            out.extend(lo..=hi);
        } else {
            out.push(part.parse().map_err(|_| format!("bad count '{part}'"))?);
        }
    }
    if out.is_empty() {
        return Err(format!("no values in '{text}'"));
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

pub fn parse_structures(text: &str) -> Result<Vec<CovarianceStructure>, String> {
    if text.trim().eq_ignore_ascii_case("all") {
        return Ok(CovarianceStructure::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let s: CovarianceStructure = part.parse().map_err(|_| format!("unknown structure '{part}'"))?;
        if !out.contains(&s) {
            out.push(s);
        }
    }
    if out.is_empty() {
        return Err("no structures given".into());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_lists() {
        assert_eq!(parse_counts("3").unwrap(), vec![3]);
        assert_eq!(parse_counts("1..5").unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_counts("4, 1,2..3").unwrap(), vec![1, 2, 3, 4]);
        assert!(parse_counts("3..1").is_err());
        assert!(parse_counts("x").is_err());
        assert!(parse_counts("").is_err());
    }

    #[test]
    fn structure_lists() {
        assert_eq!(parse_structures("all").unwrap().len(), 14);
        assert_eq!(
            parse_structures("VVV,EII").unwrap(),
            vec![CovarianceStructure::VVV, CovarianceStructure::EII]
        );
        assert!(parse_structures("ABC").is_err());
    }
}
