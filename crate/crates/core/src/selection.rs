//! Model scoring, BIC grids and partition agreement.

use std::collections::HashMap;
use std::hash::Hash;

use num_rational::Ratio;
use rayon::prelude::*;

use crate::block::{fit_block, BlockOptions};
use crate::data::BinaryDataset;
use crate::error::{Error, Result};
use crate::model::{count_free_parameters, CovarianceStructure, ModelConfig};
use crate::quadrature::loglik_quadrature;
use crate::vem::{fit, FitOptions, FitResult};

/// `-2 l + k ln N`.
pub fn bic(loglik: f64, k: usize, n: usize) -> f64 {
    -2.0 * loglik + k as f64 * (n as f64).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelScore {
    pub loglik_variational: f64,
    pub loglik_quadrature: f64,
    pub k: usize,
    pub n: usize,
    pub bic: f64,
}

impl ModelScore {
    pub fn new(loglik_variational: f64, loglik_quadrature: f64, k: usize, n: usize) -> Self {
        Self {
            loglik_variational,
            loglik_quadrature,
            k,
            n,
            bic: bic(loglik_quadrature, k, n),
        }
    }
}

/// Scores a fitted model with the quadrature log-likelihood.
pub fn score_fit(fit: &FitResult<f64>, data: &BinaryDataset, gh_nodes: usize) -> Result<ModelScore> {
    let config = fit.model.config();
    let k = count_free_parameters(&config, data.n_items(), data.n_blocks());
    let lq = loglik_quadrature(&fit.model, data, gh_nodes)?;
    Ok(ModelScore::new(fit.loglik_variational, lq, k, data.n_rows()))
}

/// Counts of a pair of labelings; entry `(r, c)` is the number of
/// observations with the r-th distinct predicted label and the c-th distinct
/// reference label, each in order of first appearance sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassificationTable<A, B> {
    pub row_labels: Vec<A>,
    pub col_labels: Vec<B>,
    pub counts: Vec<Vec<u64>>,
}

pub fn classification_table<A, B>(predicted: &[A], reference: &[B]) -> Result<ClassificationTable<A, B>>
where
    A: Ord + Clone + Hash,
    B: Ord + Clone + Hash,
{
    if predicted.len() != reference.len() {
        return Err(Error::Dimension(format!(
            "{} predicted labels, {} reference labels",
            predicted.len(),
            reference.len()
        )));
    }
    let mut row_labels: Vec<A> = predicted.to_vec();
    row_labels.sort();
    row_labels.dedup();
    let mut col_labels: Vec<B> = reference.to_vec();
    col_labels.sort();
    col_labels.dedup();
    let rows: HashMap<&A, usize> = row_labels.iter().enumerate().map(|(i, a)| (a, i)).collect();
    let cols: HashMap<&B, usize> = col_labels.iter().enumerate().map(|(i, b)| (b, i)).collect();
    let mut counts = vec![vec![0u64; col_labels.len()]; row_labels.len()];
    for (a, b) in predicted.iter().zip(reference) {
        counts[rows[a]][cols[b]] += 1;
    }
    Ok(ClassificationTable {
        row_labels,
        col_labels,
        counts,
    })
}

fn choose2(n: u64) -> i128 {
    let n = n as i128;
    n * (n - 1) / 2
}

/// Adjusted Rand index as an exact rational.
pub fn adjusted_rand_index_exact<A, B>(a: &[A], b: &[B]) -> Result<Ratio<i128>>
where
    A: Ord + Clone + Hash,
    B: Ord + Clone + Hash,
{
    if a.len() < 2 {
        return Err(Error::Data("adjusted Rand index needs at least two observations".into()));
    }
    let table = classification_table(a, b)?;
    let total = choose2(a.len() as u64);
    let cells: i128 = table.counts.iter().flatten().map(|&c| choose2(c)).sum();
    let rows: i128 = table.counts.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: i128 = (0..table.col_labels.len())
        .map(|j| choose2(table.counts.iter().map(|r| r[j]).sum()))
        .sum();
    let numerator = 2 * total * cells - 2 * rows * cols;
    let denominator = total * (rows + cols) - 2 * rows * cols;
    if denominator == 0 {
        // both partitions trivial in the same way
        return Ok(Ratio::from_integer(if numerator == 0 { 1 } else { 0 }));
    }
    Ok(Ratio::new(numerator, denominator))
}

/// Adjusted Rand index; 1 for identical partitions up to relabeling.
pub fn adjusted_rand_index<A, B>(a: &[A], b: &[B]) -> Result<f64>
where
    A: Ord + Clone + Hash,
    B: Ord + Clone + Hash,
{
    let r = adjusted_rand_index_exact(a, b)?;
    Ok(*r.numer() as f64 / *r.denom() as f64)
}

/// One fitted configuration in a grid.
#[derive(Debug, Clone)]
pub struct GridRow {
    pub config: ModelConfig,
    pub seed: u64,
    pub outcome: std::result::Result<GridFit, String>,
}

#[derive(Debug, Clone)]
pub struct GridFit {
    pub fit: FitResult<f64>,
    pub score: ModelScore,
    pub ari: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    /// Index of the minimum-BIC row among successful fits.
    pub best: Option<usize>,
}

impl GridResult {
    pub fn best_fit(&self) -> Option<&GridFit> {
        self.best.and_then(|i| self.rows[i].outcome.as_ref().ok())
    }
}

#[derive(Debug, Clone)]
pub struct GridSpec {
    pub groups: Vec<usize>,
    pub latent_dims: Vec<usize>,
    pub structures: Vec<CovarianceStructure>,
    pub block_effect: bool,
    pub gh_nodes: usize,
    pub fit: FitOptions<f64>,
    pub block: BlockOptions<f64>,
    /// Run rows in parallel (starts within a row then run sequentially).
    pub parallel_rows: bool,
}

impl GridSpec {
    pub fn configs(&self) -> Vec<ModelConfig> {
        let mut out = Vec::new();
        for &g in &self.groups {
            for &d in &self.latent_dims {
                for &s in &self.structures {
                    out.push(ModelConfig::new(g, d, s).with_block_effect(self.block_effect));
                }
            }
        }
        out
    }
}

fn better(a: &GridFit, ca: &ModelConfig, b: &GridFit, cb: &ModelConfig) -> bool {
    let key = |f: &GridFit, c: &ModelConfig| (f.score.k, c.groups, c.latent_dim);
    match a.score.bic.partial_cmp(&b.score.bic) {
        Some(std::cmp::Ordering::Less) => true,
        Some(std::cmp::Ordering::Equal) => key(a, ca) < key(b, cb),
        _ => false,
    }
}

/// Fits every configuration with seed `master + row`, scores it, and picks
/// the minimum BIC (ties to smaller k, then G, then d).
pub fn run_grid(data: &BinaryDataset, spec: &GridSpec, reference: Option<&[usize]>) -> Result<GridResult> {
    let configs = spec.configs();
    if configs.is_empty() {
        return Err(Error::Config("model grid is empty".into()));
    }
    if let Some(r) = reference {
        if r.len() != data.n_rows() {
            return Err(Error::Dimension("reference labels do not match the data".into()));
        }
    }
    let job = |(row, config): (usize, ModelConfig)| {
        let seed = spec.fit.seed.wrapping_add(row as u64);
        let options = FitOptions {
            seed,
            parallel: spec.fit.parallel && !spec.parallel_rows,
            ..spec.fit.clone()
        };
        let outcome = (|| -> Result<GridFit> {
            let fitted = if config.block_effect {
                fit_block(data, &config, &options, &spec.block)?
            } else {
                fit(data, &config, &options)?
            };
            let score = score_fit(&fitted, data, spec.gh_nodes)?;
            let ari = match reference {
                Some(r) => Some(adjusted_rand_index(&fitted.projection.hard_label, r)?),
                None => None,
            };
            Ok(GridFit {
                fit: fitted,
                score,
                ari,
            })
        })()
        .map_err(|e| e.to_string());
        GridRow {
            config,
            seed,
            outcome,
        }
    };
    let indexed: Vec<(usize, ModelConfig)> = configs.into_iter().enumerate().collect();
    let rows: Vec<GridRow> = if spec.parallel_rows {
        indexed.into_par_iter().map(job).collect()
    } else {
        indexed.into_iter().map(job).collect()
    };
    let mut best: Option<usize> = None;
    for (i, row) in rows.iter().enumerate() {
        if let Ok(f) = &row.outcome {
            let replace = match best {
                None => true,
                Some(j) => better(f, &row.config, rows[j].outcome.as_ref().unwrap(), &rows[j].config),
            };
            if replace {
                best = Some(i);
            }
        }
    }
    Ok(GridResult { rows, best })
}
