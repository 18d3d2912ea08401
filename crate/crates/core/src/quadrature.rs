//! Gauss-Hermite evaluation of the exact marginal log-likelihood.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::data::BinaryDataset;
use crate::error::{Error, Result};
use crate::linalg::sym_sqrt;
use crate::model::MclmModel;
use crate::scalar::{log_logistic, log_sum_exp, Scalar};

pub const DEFAULT_NODES: usize = 10;
pub const MAX_RULE_SIZE: usize = 64;
pub const MAX_GRID_NODES: u128 = 1_000_000;
pub const MAX_DIM: usize = 6;

/// Probabilists' Gauss-Hermite rule: `Σ_i w_i f(x_i) ≈ E f(Z)`, `Z ~ N(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Orthonormal Hermite values `p_0..p_{n-1}` at `x` and the derivative of
/// `p_n`.
fn orthonormal_hermite(n: usize, x: f64) -> (Vec<f64>, f64, f64) {
    let mut p = Vec::with_capacity(n + 1);
    p.push(1.0);
    if n > 0 {
        p.push(x);
    }
    for k in 1..n {
        let next = (x * p[k] - (k as f64).sqrt() * p[k - 1]) / ((k + 1) as f64).sqrt();
        p.push(next);
    }
    let pn = p[n];
    let dpn = (n as f64).sqrt() * p[n - 1];
    p.truncate(n);
    (p, pn, dpn)
}

/// Nodes from the symmetric Jacobi matrix, polished by Newton steps on the
/// three-term recurrence; weights `1 / Σ_k p_k(x)²`.
pub fn hermite_rule(k: usize) -> Result<QuadratureRule> {
    if k == 0 {
        return Err(Error::Config("quadrature rule needs at least one node".into()));
    }
    if k > MAX_RULE_SIZE {
        return Err(Error::Config(format!(
            "{k} nodes per dimension exceeds the limit of {MAX_RULE_SIZE}"
        )));
    }
    let mut jacobi = DMatrix::zeros(k, k);
    for i in 1..k {
        let off = (i as f64).sqrt();
        jacobi[(i, i - 1)] = off;
        jacobi[(i - 1, i)] = off;
    }
    let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for x in nodes.iter_mut() {
        for _ in 0..4 {
            let (_, pn, dpn) = orthonormal_hermite(k, *x);
            if dpn == 0.0 {
                break;
            }
            *x -= pn / dpn;
        }
    }
    // exact symmetry about zero
    for i in 0..k / 2 {
        let a = 0.5 * (nodes[k - 1 - i] - nodes[i]);
        nodes[i] = -a;
        nodes[k - 1 - i] = a;
    }
    if k % 2 == 1 {
        nodes[k / 2] = 0.0;
    }
    let mut weights: Vec<f64> = nodes
        .iter()
        .map(|&x| {
            let (p, _, _) = orthonormal_hermite(k, x);
            1.0 / p.iter().map(|v| v * v).sum::<f64>()
        })
        .collect();
    for i in 0..k / 2 {
        let w = 0.5 * (weights[i] + weights[k - 1 - i]);
        weights[i] = w;
        weights[k - 1 - i] = w;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(QuadratureRule { nodes, weights })
}

/// A tensor grid over `dim` standard-normal coordinates.
struct Grid {
    points: Vec<Vec<f64>>,
    log_weights: Vec<f64>,
}

fn tensor_grid(rule: &QuadratureRule, dim: usize) -> Result<Grid> {
    let k = rule.nodes.len();
    let size = (k as u128).checked_pow(dim as u32).unwrap_or(u128::MAX);
    if size > MAX_GRID_NODES {
        return Err(Error::GridTooLarge {
            nodes: size,
            cap: MAX_GRID_NODES,
        });
    }
    let size = size as usize;
    let mut points = Vec::with_capacity(size);
    let mut log_weights = Vec::with_capacity(size);
    let mut index = vec![0usize; dim];
    for _ in 0..size {
        points.push(index.iter().map(|&i| rule.nodes[i]).collect());
        log_weights.push(index.iter().map(|&i| rule.weights[i].ln()).sum());
        for slot in index.iter_mut() {
            *slot += 1;
            if *slot < k {
                break;
            }
            *slot = 0;
        }
    }
    Ok(Grid {
        points,
        log_weights,
    })
}

/// Linear predictors `w_m'(μ + Σ^{1/2} τ)` at every grid point, stored
/// point-major for each (prior) group.
fn predictors(
    w: &DMatrix<f64>,
    mean: &DVector<f64>,
    root: &DMatrix<f64>,
    extra: Option<(&DVector<f64>, f64, f64)>,
    grid: &Grid,
    latent_dim: usize,
) -> Vec<f64> {
    let items = w.nrows();
    let mut out = Vec::with_capacity(grid.points.len() * items);
    let base = w * mean;
    let loading = w * root;
    for tau in &grid.points {
        for m in 0..items {
            let mut eta = base[m];
            for k in 0..latent_dim {
                eta += loading[(m, k)] * tau[k];
            }
            if let Some((beta, b, sd)) = extra {
                eta += beta[m] * (b + sd * tau[latent_dim]);
            }
            out.push(eta);
        }
    }
    out
}

fn row_log_density(x: &[u8], pred: &[f64], grid: &Grid) -> f64 {
    let items = x.len();
    let terms: Vec<f64> = grid
        .log_weights
        .iter()
        .enumerate()
        .map(|(p, &lw)| {
            let row = &pred[p * items..(p + 1) * items];
            lw + x
                .iter()
                .zip(row)
                .map(|(&v, &a)| if v == 1 { log_logistic(a) } else { log_logistic(-a) })
                .sum::<f64>()
        })
        .collect();
    log_sum_exp(&terms)
}

/// Per-observation `log p(x_n)` under `model` by tensor-product quadrature
/// with `k` nodes per latent coordinate.
pub fn row_loglik_quadrature<T: Scalar>(
    model: &MclmModel<T>,
    data: &BinaryDataset,
    k: usize,
) -> Result<Vec<f64>> {
    let model: MclmModel<f64> = model.cast();
    model.validate()?;
    if data.n_items() != model.n_items() {
        return Err(Error::Dimension(format!(
            "model has {} items, data has {}",
            model.n_items(),
            data.n_items()
        )));
    }
    let d = model.latent_dim();
    let dim = d + usize::from(model.block.is_some());
    if dim > MAX_DIM {
        return Err(Error::Config(format!(
            "quadrature supports at most {MAX_DIM} integration dimensions, got {dim}"
        )));
    }
    if k < 3 {
        return Err(Error::Config("use at least 3 quadrature nodes per dimension".into()));
    }
    let rule = hermite_rule(k)?;
    let grid = tensor_grid(&rule, dim).map_err(|e| match e {
        Error::GridTooLarge { nodes, cap } => Error::Config(format!(
            "quadrature grid of {nodes} nodes exceeds {cap}; reduce the nodes per dimension"
        )),
        other => other,
    })?;
    let roots: Vec<DMatrix<f64>> = model.sigma.iter().map(sym_sqrt).collect();
    let log_eta: Vec<f64> = model.eta.iter().map(|e| e.ln()).collect();
    let groups = model.groups();

    // predictor tables per (block, component)
    let tables: Vec<Vec<f64>> = match &model.block {
        None => (0..groups)
            .map(|g| predictors(&model.w, &model.mu[g], &roots[g], None, &grid, d))
            .collect(),
        Some(block) => {
            let blocks = data
                .block_of()
                .ok_or_else(|| Error::Data("block labels are required for the block model".into()))?;
            if blocks.iter().any(|&i| i >= block.n_blocks()) {
                return Err(Error::Data("data has more blocks than the model".into()));
            }
            (0..block.n_blocks())
                .flat_map(|i| (0..groups).map(move |g| (i, g)))
                .map(|(i, g)| {
                    predictors(
                        &model.w,
                        &model.mu[g],
                        &roots[g],
                        Some((&block.beta, block.b[i], block.sigma2[i].sqrt())),
                        &grid,
                        d,
                    )
                })
                .collect()
        }
    };
    let blocks = data.block_of();
    let has_block = model.block.is_some();
    let rows: Vec<f64> = (0..data.n_rows())
        .into_par_iter()
        .map(|n| {
            let offset = if has_block { blocks.unwrap()[n] * groups } else { 0 };
            let terms: Vec<f64> = (0..groups)
                .map(|g| log_eta[g] + row_log_density(data.row(n), &tables[offset + g], &grid))
                .collect();
            log_sum_exp(&terms)
        })
        .collect();
    Ok(rows)
}

/// `Σ_n log Σ_g η_g ∫ Π_m Bernoulli(x_nm | σ(w_m'y)) N(y; μ_g, Σ_g) dy`.
pub fn loglik_quadrature<T: Scalar>(model: &MclmModel<T>, data: &BinaryDataset, k: usize) -> Result<f64> {
    let rows = row_loglik_quadrature(model, data, k)?;
    Ok(pairwise_sum(&rows))
}

/// Summation with a fixed binary tree, independent of thread scheduling.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => pairwise_sum(&values[..n / 2]) + pairwise_sum(&values[n / 2..]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockParams, CovarianceStructure};

    fn moment(rule: &QuadratureRule, p: i32) -> f64 {
        rule.nodes.iter().zip(&rule.weights).map(|(x, w)| w * x.powi(p)).sum()
    }

    fn double_factorial(p: i32) -> f64 {
        (1..p).step_by(2).map(|v| v as f64).product()
    }

    #[test]
    fn small_rules() {
        let r = hermite_rule(1).unwrap();
        assert_eq!((r.nodes.as_slice(), r.weights.as_slice()), (&[0.0][..], &[1.0][..]));
        let r = hermite_rule(2).unwrap();
        assert!((r.nodes[0] + 1.0).abs() < 1e-15 && (r.nodes[1] - 1.0).abs() < 1e-15);
        assert!((r.weights[0] - 0.5).abs() < 1e-15);
        let r = hermite_rule(3).unwrap();
        let s3 = 3.0_f64.sqrt();
        assert!((r.nodes[0] + s3).abs() < 1e-14 && r.nodes[1] == 0.0);
        assert!((r.weights[0] - 1.0 / 6.0).abs() < 1e-14 && (r.weights[1] - 2.0 / 3.0).abs() < 1e-14);
        assert!((moment(&r, 4) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn exactness_up_to_degree_2k_minus_1() {
        for k in [4, 10, 20, 40, 64] {
            let r = hermite_rule(k).unwrap();
            assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..k {
                assert_eq!(r.nodes[i], -r.nodes[k - 1 - i]);
            }
            for p in 0..(2 * k as i32).min(24) {
                let exact = if p % 2 == 1 { 0.0 } else { double_factorial(p) };
                let got = moment(&r, p);
                let scale = double_factorial(p + p % 2);
                assert!((got - exact).abs() <= 1e-9 * scale, "k={k} p={p} {got} {exact}");
            }
        }
        assert!(hermite_rule(65).is_err());
        assert!(hermite_rule(0).is_err());
    }

    fn model(w: DMatrix<f64>, groups: usize) -> MclmModel<f64> {
        let d = w.ncols();
        MclmModel {
            w,
            eta: DVector::from_element(groups, 1.0 / groups as f64),
            mu: vec![DVector::from_element(d, 0.3); groups],
            sigma: vec![DMatrix::identity(d, d) * 1.5; groups],
            structure: CovarianceStructure::VVV,
            block: None,
        }
    }

    #[test]
    fn zero_slopes_give_coin_flips() {
        let data = BinaryDataset::from_rows(&[vec![1, 0, 1], vec![0, 0, 1]]).unwrap();
        let l = loglik_quadrature(&model(DMatrix::zeros(3, 2), 2), &data, 5).unwrap();
        assert!((l - 6.0 * 0.5_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn duplicated_component_is_invisible() {
        let data = BinaryDataset::from_rows(&[vec![1, 0, 1], vec![0, 1, 1], vec![1, 1, 1]]).unwrap();
        let w = DMatrix::from_row_slice(3, 1, &[0.8, -1.2, 0.4]);
        let one = loglik_quadrature(&model(w.clone(), 1), &data, 10).unwrap();
        let two = loglik_quadrature(&model(w, 2), &data, 10).unwrap();
        assert!((one - two).abs() < 1e-12);
    }

    #[test]
    fn inert_block_channel_matches_flat() {
        let data = BinaryDataset::from_rows(&[vec![1, 0], vec![0, 1]])
            .unwrap()
            .with_blocks(vec![0, 1])
            .unwrap();
        let flat = model(DMatrix::from_row_slice(2, 1, &[1.0, 0.5]), 1);
        let mut block = flat.clone();
        block.block = Some(BlockParams {
            beta: DVector::zeros(2),
            b: DVector::from_vec(vec![0.5, -1.0]),
            sigma2: DVector::from_vec(vec![1.0, 2.0]),
        });
        let a = loglik_quadrature(&flat, &data, 10).unwrap();
        let b = loglik_quadrature(&block, &data, 10).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn oversized_grid_is_rejected() {
        let data = BinaryDataset::from_rows(&[vec![1; 7]]).unwrap();
        let m = model(DMatrix::zeros(7, 7), 1);
        assert!(matches!(loglik_quadrature(&m, &data, 10), Err(Error::Config(_))));
        let m = model(DMatrix::zeros(7, 6), 1);
        assert!(matches!(loglik_quadrature(&m, &data, 20), Err(Error::Config(_))));
        assert!(matches!(loglik_quadrature(&model(DMatrix::zeros(7, 1), 1), &data, 2), Err(Error::Config(_))));
    }
}
