//! Synthetic data from the model and replicate studies against known truth.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::block::{fit_block, BlockOptions};
use crate::data::BinaryDataset;
use crate::error::{Error, Result};
use crate::linalg::sym_sqrt;
use crate::model::{BlockParams, CovarianceStructure, MclmModel};
use crate::scalar::logistic;
use crate::selection::adjusted_rand_index;
use crate::vem::{fit, FitOptions};

/// Slopes of the two-group reference configuration (20 items, d = 2).
pub const REFERENCE_SLOPES: [[f64; 2]; 20] = [
    [-1.0, -0.7],
    [-0.3, 1.0],
    [0.88, 0.0],
    [-0.7, 0.4],
    [0.6, -0.4],
    [-0.4, 0.0],
    [2.0, 0.4],
    [-0.5, -0.4],
    [-1.0, -0.7],
    [0.7, 0.5],
    [0.9, 0.6],
    [-0.4, 1.7],
    [0.9, 0.8],
    [1.5, 0.0],
    [1.6, 0.5],
    [-0.5, -0.7],
    [-0.5, -0.7],
    [-1.0, 0.6],
    [0.0, 2.8],
    [-1.5, -0.9],
];

/// Two equally weighted components with means (0, 1) and (3, 3), identity
/// covariances of the `λB_g` (EVI) family and the reference slopes.
pub fn reference_two_group_model() -> MclmModel<f64> {
    let w = DMatrix::from_fn(20, 2, |m, k| REFERENCE_SLOPES[m][k]);
    MclmModel {
        w,
        eta: DVector::from_vec(vec![0.5, 0.5]),
        mu: vec![DVector::from_vec(vec![0.0, 1.0]), DVector::from_vec(vec![3.0, 3.0])],
        sigma: vec![DMatrix::identity(2, 2); 2],
        structure: CovarianceStructure::EVI,
        block: None,
    }
}

/// The reference model with a block effect: `β_m = 1`, `σ_i² = 0.5` and
/// block means `b_i ~ N(0, 1)` drawn from `seed`.
pub fn reference_block_model(n_blocks: usize, seed: u64) -> MclmModel<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = reference_two_group_model();
    model.block = Some(BlockParams {
        beta: DVector::from_element(model.n_items(), 1.0),
        b: DVector::from_fn(n_blocks, |_, _| rng.sample::<f64, _>(StandardNormal)),
        sigma2: DVector::from_element(n_blocks, 0.5),
    });
    model
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSpec {
    pub true_model: MclmModel<f64>,
    /// Observation count for flat models; ignored when `blocks` is set.
    pub n: usize,
    /// `(I, J)`: blocks and observations per block.
    pub blocks: Option<(usize, usize)>,
    pub seed: u64,
}

impl SimulationSpec {
    pub fn flat(true_model: MclmModel<f64>, n: usize, seed: u64) -> Self {
        Self {
            true_model,
            n,
            blocks: None,
            seed,
        }
    }

    pub fn blocked(true_model: MclmModel<f64>, blocks: usize, per_block: usize, seed: u64) -> Self {
        Self {
            true_model,
            n: blocks * per_block,
            blocks: Some((blocks, per_block)),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        // empty components are allowed when generating
        let eta = &self.true_model.eta;
        if eta.iter().any(|&e| !(e >= 0.0)) || (eta.sum() - 1.0).abs() > 1e-6 {
            return Err(Error::Config("mixing weights must be nonnegative and sum to 1".into()));
        }
        let mut probe = self.true_model.clone();
        probe.eta = DVector::from_element(eta.len(), 1.0 / eta.len() as f64);
        probe.validate()?;
        match (self.blocks, &self.true_model.block) {
            (Some((i, j)), Some(b)) => {
                if i == 0 || j == 0 {
                    return Err(Error::Config("block layout must be non-empty".into()));
                }
                if i != b.n_blocks() {
                    return Err(Error::Config(format!(
                        "{i} blocks requested, model has {}",
                        b.n_blocks()
                    )));
                }
            }
            (None, None) if self.n > 0 => {}
            (None, None) => return Err(Error::Config("n must be positive".into())),
            _ => return Err(Error::Config("block layout and block parameters must come together".into())),
        }
        Ok(())
    }
}

/// Generated responses with the generating memberships (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct Simulated {
    pub data: BinaryDataset,
    pub labels: Vec<usize>,
}

/// Draws `z ~ Cat(η)`, `y ~ N(μ_z, Σ_z)`, optional `s ~ N(b_i, σ_i²)`, then
/// `x_m ~ Bernoulli(σ(w_m'y + β_m s))`.
pub fn generate(spec: &SimulationSpec) -> Result<Simulated> {
    spec.validate()?;
    let model = &spec.true_model;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weights = WeightedIndex::new(model.eta.iter().copied())
        .map_err(|e| Error::Config(format!("invalid mixing weights: {e}")))?;
    let roots: Vec<DMatrix<f64>> = model.sigma.iter().map(sym_sqrt).collect();
    let d = model.latent_dim();
    let n = spec.n;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut block_of = Vec::with_capacity(n);
    for r in 0..n {
        let g = weights.sample(&mut rng);
        let tau = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = &model.mu[g] + &roots[g] * tau;
        let mut eta = &model.w * y;
        if let (Some((_, per_block)), Some(b)) = (spec.blocks, &model.block) {
            let i = r / per_block;
            let s = b.b[i] + b.sigma2[i].sqrt() * rng.sample::<f64, _>(StandardNormal);
            eta += &b.beta * s;
            block_of.push(i);
        }
        rows.push(
            eta.iter()
                .map(|&a| u8::from(rng.random::<f64>() < logistic(a)))
                .collect::<Vec<u8>>(),
        );
        labels.push(g);
    }
    let mut data = BinaryDataset::from_rows(&rows)?;
    if spec.blocks.is_some() {
        data = data.with_blocks(block_of)?;
    }
    Ok(Simulated { data, labels })
}

/// Gauge family searched when aligning an estimate to the truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    Orthogonal,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aligned {
    pub model: MclmModel<f64>,
    /// Aligned component `k` is estimated component `permutation[k]`.
    pub permutation: Vec<usize>,
    /// The transform `T` applied as `y -> T y`.
    pub transform: DMatrix<f64>,
}

/// Procrustes fit of the slopes followed by the component permutation that
/// best matches the means.
pub fn align_estimates(
    estimate: &MclmModel<f64>,
    truth: &MclmModel<f64>,
    alignment: Alignment,
) -> Result<Aligned> {
    if estimate.groups() != truth.groups()
        || estimate.latent_dim() != truth.latent_dim()
        || estimate.n_items() != truth.n_items()
    {
        return Err(Error::Dimension("estimate and truth differ in G, d or M".into()));
    }
    let d = truth.latent_dim();
    let transform = match alignment {
        Alignment::Orthogonal => {
            let cross = estimate.w.transpose() * &truth.w;
            let svd = cross.svd(true, true);
            let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
            // W T' ≈ W_true with T' = U V'
            (u * v_t).transpose()
        }
        Alignment::Linear => {
            let pinv = estimate
                .w
                .clone()
                .pseudo_inverse(1e-12)
                .map_err(|e| Error::Config(e.to_string()))?;
            let t_inv = pinv * &truth.w;
            t_inv
                .try_inverse()
                .ok_or_else(|| Error::Config("slope matrix is rank deficient".into()))?
        }
    };
    debug_assert_eq!(transform.nrows(), d);
    let moved = estimate.gauge_transform(&transform)?;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(truth.groups()) {
        let cost: f64 = perm
            .iter()
            .enumerate()
            .map(|(k, &g)| (&moved.mu[g] - &truth.mu[k]).norm_squared())
            .sum();
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, perm));
        }
    }
    let permutation = best.map(|(_, p)| p).unwrap_or_default();
    Ok(Aligned {
        model: moved.permute_components(&permutation),
        permutation,
        transform,
    })
}

/// All permutations of `0..n` in lexicographic order.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut current: Vec<usize> = (0..n).collect();
    let mut out = vec![current.clone()];
    loop {
        let Some(i) = (1..n).rev().find(|&i| current[i - 1] < current[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| current[j] > current[i - 1]).unwrap();
        current.swap(i - 1, j);
        current[i..].reverse();
        out.push(current.clone());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Per-entry mean squared error of the aligned slopes.
    pub mse_w: DMatrix<f64>,
    /// G×d mean squared error of the aligned means.
    pub mse_mu: DMatrix<f64>,
    pub ari_mean: f64,
    pub ari_se: f64,
    pub ari: Vec<f64>,
    pub replicates: usize,
    pub failures: usize,
    pub alignment: Alignment,
}

struct ReplicateOutcome {
    sq_w: DMatrix<f64>,
    sq_mu: DMatrix<f64>,
    ari: f64,
}

fn one_replicate(
    spec: &SimulationSpec,
    data_seed: u64,
    options: &FitOptions<f64>,
    alignment: Alignment,
) -> Result<ReplicateOutcome> {
    let truth = &spec.true_model;
    let sim = generate(&SimulationSpec {
        seed: data_seed,
        ..spec.clone()
    })?;
    let mut config = truth.config();
    config.structure = truth.structure;
    let fitted = if truth.block.is_some() {
        fit_block(&sim.data, &config, options, &BlockOptions::default())?
    } else {
        fit(&sim.data, &config, options)?
    };
    let aligned = align_estimates(&fitted.model, truth, alignment)?;
    let sq_w = (&aligned.model.w - &truth.w).map(|v| v * v);
    let sq_mu = DMatrix::from_fn(truth.groups(), truth.latent_dim(), |g, k| {
        (aligned.model.mu[g][k] - truth.mu[g][k]).powi(2)
    });
    let ari = adjusted_rand_index(&fitted.projection.hard_label, &sim.labels)?;
    Ok(ReplicateOutcome { sq_w, sq_mu, ari })
}

/// Replicate `r` simulates with seed `spec.seed + r` and fits with
/// `options.seed + r`.
pub fn replicate_study(
    spec: &SimulationSpec,
    replicates: usize,
    options: &FitOptions<f64>,
    alignment: Alignment,
) -> Result<EvalReport> {
    let seeds: Vec<(u64, u64)> = (0..replicates as u64)
        .map(|r| (spec.seed.wrapping_add(r), options.seed.wrapping_add(r)))
        .collect();
    replicate_study_with_seeds(spec, &seeds, options, alignment)
}

/// Replicate study over explicit `(data seed, fit seed)` pairs.
pub fn replicate_study_with_seeds(
    spec: &SimulationSpec,
    seeds: &[(u64, u64)],
    options: &FitOptions<f64>,
    alignment: Alignment,
) -> Result<EvalReport> {
    if seeds.len() < 2 {
        return Err(Error::Config("a replicate study needs at least two replicates".into()));
    }
    spec.validate()?;
    let outcomes: Vec<Result<ReplicateOutcome>> = seeds
        .par_iter()
        .map(|&(data_seed, fit_seed)| {
            let opts = FitOptions {
                seed: fit_seed,
                parallel: false,
                ..options.clone()
            };
            one_replicate(spec, data_seed, &opts, alignment)
        })
        .collect();
    let ok: Vec<ReplicateOutcome> = outcomes.into_iter().filter_map(|o| o.ok()).collect();
    let failures = seeds.len() - ok.len();
    if ok.is_empty() {
        return Err(Error::AllStartsFailed("every replicate failed".into()));
    }
    let count = ok.len() as f64;
    let truth = &spec.true_model;
    let mut mse_w = DMatrix::zeros(truth.n_items(), truth.latent_dim());
    let mut mse_mu = DMatrix::zeros(truth.groups(), truth.latent_dim());
    for o in &ok {
        mse_w += &o.sq_w;
        mse_mu += &o.sq_mu;
    }
    mse_w /= count;
    mse_mu /= count;
    let ari: Vec<f64> = ok.iter().map(|o| o.ari).collect();
    let ari_mean = ari.iter().sum::<f64>() / count;
    let ari_se = if ok.len() > 1 {
        let var = ari.iter().map(|a| (a - ari_mean).powi(2)).sum::<f64>() / (count - 1.0);
        (var / count).sqrt()
    } else {
        0.0
    };
    Ok(EvalReport {
        mse_w,
        mse_mu,
        ari_mean,
        ari_se,
        ari,
        replicates: ok.len(),
        failures,
        alignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutations_enumerate_all() {
        assert_eq!(permutations(1), vec![vec![0]]);
        let p = permutations(3);
        assert_eq!(p.len(), 6);
        assert_eq!(p[1], vec![0, 2, 1]);
        assert_eq!(p[5], vec![2, 1, 0]);
    }

    #[test]
    fn degenerate_weights_give_one_label() {
        let mut m = reference_two_group_model();
        m.eta = DVector::from_vec(vec![1.0, 0.0]);
        let sim = generate(&SimulationSpec::flat(m, 200, 1)).unwrap();
        assert!(sim.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn zero_slopes_give_fair_coins() {
        let mut m = reference_two_group_model();
        m.w = DMatrix::zeros(20, 2);
        let n = 4000;
        let sim = generate(&SimulationSpec::flat(m, n, 9)).unwrap();
        let band = 3.0 * (0.25 / n as f64).sqrt();
        for p in sim.data.item_means() {
            assert!((p - 0.5).abs() < band, "{p}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SimulationSpec::flat(reference_two_group_model(), 50, 4);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn block_generation_layout() {
        let mut m = reference_two_group_model();
        m.block = Some(BlockParams {
            beta: DVector::from_element(20, 1.0),
            b: DVector::from_vec(vec![-2.0, 0.0, 2.0]),
            sigma2: DVector::from_element(3, 0.1),
        });
        let sim = generate(&SimulationSpec::blocked(m, 3, 5, 2)).unwrap();
        assert_eq!(sim.data.n_rows(), 15);
        assert_eq!(sim.data.block_of().unwrap(), &[0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn alignment_recovers_gauge_and_labels() {
        let truth = reference_two_group_model();
        let same = align_estimates(&truth, &truth, Alignment::Orthogonal).unwrap();
        assert!((&same.transform - DMatrix::identity(2, 2)).abs().max() < 1e-12);
        assert_eq!(same.permutation, vec![0, 1]);

        let flip = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 1.0]));
        let flipped = truth.gauge_transform(&flip).unwrap().permute_components(&[1, 0]);
        let back = align_estimates(&flipped, &truth, Alignment::Orthogonal).unwrap();
        assert_eq!(back.permutation, vec![1, 0]);
        assert!((&back.model.w - &truth.w).abs().max() < 1e-12);
        assert!((&back.model.mu[1] - &truth.mu[1]).abs().max() < 1e-12);

        let shear = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.0, 1.0]);
        let sheared = truth.gauge_transform(&shear).unwrap();
        let back = align_estimates(&sheared, &truth, Alignment::Linear).unwrap();
        assert!((&back.model.w - &truth.w).abs().max() < 1e-10);
        assert!((&back.model.sigma[0] - &truth.sigma[0]).abs().max() < 1e-10);
    }
}
