//! Block-effect variant: each observation carries a scalar block variate
//! `s ~ N(b_i, σ_i²)` entering the linear predictor through item loadings
//! `β_m`. The latent posterior is joint over `(y, s)` in `d + 1` dimensions,
//! with the slopes extended to `ŵ_m = (w_m, β_m)`.

use nalgebra::{DMatrix, DVector};

use crate::covariance::project_structure_from;
use crate::data::BinaryDataset;
use crate::error::{Error, Result};
use crate::model::{BlockParams, LatentProjection, MclmModel, ModelConfig};
use crate::scalar::Scalar;
use crate::vem::{
    canonical_frame, max_abs_diff_mat, max_abs_diff_vec, m_step_weights, posterior_for,
    random_start, refresh_posteriors, refresh_xi, responsibilities_with_loglik, run_starts,
    select_best, solve_slopes, standard_normal, start_rng, summarize, weighted_moments,
    ConvergenceMonitor, FitDiagnostics, FitOptions, FitResult, Posterior, PriorCache, SlopeCache,
    VariationalState, XI_INIT,
};

/// Lower limit for every block variance.
pub const SIGMA2_FLOOR: f64 = 1e-6;

/// Constraints specific to the block fitter.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BlockOptions<T: Scalar> {
    /// Hold every `β_m` at zero.
    pub freeze_beta: bool,
    /// Hold every `σ_i²` at this value.
    pub pin_sigma2: Option<T>,
}

/// Augmented prior and slopes for every (block, component) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState<T: Scalar> {
    /// M×(d+1) slopes with β as the last column.
    pub w_hat: DMatrix<T>,
    /// `(μ_g, b_i)` indexed `i * G + g`.
    pub mu_hat: Vec<DVector<T>>,
    /// `diag(Σ_g, σ_i²)` indexed `i * G + g`.
    pub sigma_hat: Vec<DMatrix<T>>,
    pub groups: usize,
    pub n_blocks: usize,
}

impl<T: Scalar> AugmentedState<T> {
    pub fn from_model(model: &MclmModel<T>) -> Result<Self> {
        let block = model
            .block
            .as_ref()
            .ok_or_else(|| Error::Config("model has no block parameters".into()))?;
        block.validate(model.n_items())?;
        let d = model.latent_dim();
        let groups = model.groups();
        let n_blocks = block.n_blocks();
        let mut w_hat = DMatrix::zeros(model.n_items(), d + 1);
        w_hat.view_mut((0, 0), (model.n_items(), d)).copy_from(&model.w);
        w_hat.set_column(d, &block.beta);
        let mut mu_hat = Vec::with_capacity(n_blocks * groups);
        let mut sigma_hat = Vec::with_capacity(n_blocks * groups);
        for i in 0..n_blocks {
            for g in 0..groups {
                let mut m = DVector::zeros(d + 1);
                m.rows_mut(0, d).copy_from(&model.mu[g]);
                m[d] = block.b[i];
                let mut s = DMatrix::zeros(d + 1, d + 1);
                s.view_mut((0, 0), (d, d)).copy_from(&model.sigma[g]);
                s[(d, d)] = block.sigma2[i];
                mu_hat.push(m);
                sigma_hat.push(s);
            }
        }
        Ok(Self {
            w_hat,
            mu_hat,
            sigma_hat,
            groups,
            n_blocks,
        })
    }

    fn priors(&self) -> Result<Vec<PriorCache<T>>> {
        self.mu_hat
            .iter()
            .zip(&self.sigma_hat)
            .enumerate()
            .map(|(k, (m, s))| PriorCache::new(m.clone(), s, k % self.groups))
            .collect()
    }
}

/// Joint posterior `(φ̂, υ̂)` of an observation in block `block` under every
/// component; `xi` is component-major (`g * M + m`).
pub fn block_variational_e_step<T: Scalar>(
    aug: &AugmentedState<T>,
    x: &[u8],
    xi: &[T],
    block: usize,
) -> Result<Vec<(DMatrix<T>, DVector<T>)>> {
    let items = aug.w_hat.nrows();
    if x.len() != items || xi.len() != items * aug.groups || block >= aug.n_blocks {
        return Err(Error::Dimension("response row, ξ or block index out of range".into()));
    }
    let slopes = SlopeCache::new(aug.w_hat.clone());
    let half_sum = slopes.half_sum(x);
    (0..aug.groups)
        .map(|g| {
            let k = block * aug.groups + g;
            let prior = PriorCache::new(aug.mu_hat[k].clone(), &aug.sigma_hat[k], g)?;
            let post = posterior_for(&prior, &slopes, &xi[g * items..(g + 1) * items], &half_sum, g)?;
            Ok((post.phi, post.upsilon))
        })
        .collect()
}

/// Output of the block M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockUpdate<T: Scalar> {
    pub w: DMatrix<T>,
    pub beta: DVector<T>,
    pub mu: Vec<DVector<T>>,
    pub sigma: Vec<DMatrix<T>>,
    pub b: DVector<T>,
    pub sigma2: DVector<T>,
    pub regularized: bool,
}

fn block_of<'a>(data: &'a BinaryDataset) -> Result<&'a [usize]> {
    data.block_of()
        .ok_or_else(|| Error::Data("block labels are required for the block model".into()))
}

/// Block means and variances from the s-coordinate of the joint posteriors.
fn block_moments<T: Scalar>(
    data: &BinaryDataset,
    z: &DMatrix<T>,
    phi: &[&DMatrix<T>],
    upsilon: &[&DVector<T>],
    include_mean_scatter: bool,
) -> Result<(DVector<T>, DVector<T>)> {
    let blocks = block_of(data)?;
    let n_blocks = data.n_blocks();
    let groups = z.ncols();
    let s = upsilon[0].len() - 1;
    let mut mass = vec![T::zero(); n_blocks];
    let mut b: DVector<T> = DVector::zeros(n_blocks);
    for n in 0..data.n_rows() {
        for g in 0..groups {
            let w = z[(n, g)];
            mass[blocks[n]] += w;
            b[blocks[n]] += w * upsilon[n * groups + g][s];
        }
    }
    for i in 0..n_blocks {
        if !(mass[i] > T::zero()) {
            return Err(Error::Data(format!("block {i} has no observations")));
        }
        b[i] /= mass[i];
    }
    let mut sigma2: DVector<T> = DVector::zeros(n_blocks);
    for n in 0..data.n_rows() {
        let i = blocks[n];
        for g in 0..groups {
            let k = n * groups + g;
            let mut v = phi[k][(s, s)];
            if include_mean_scatter {
                let dev = upsilon[k][s] - b[i];
                v += dev * dev;
            }
            sigma2[i] += z[(n, g)] * v;
        }
    }
    for i in 0..n_blocks {
        sigma2[i] = (sigma2[i] / mass[i]).max(T::lit(SIGMA2_FLOOR));
    }
    Ok((b, sigma2))
}

fn block_update<T: Scalar>(
    data: &BinaryDataset,
    z: &DMatrix<T>,
    xi: &[T],
    phi: &[&DMatrix<T>],
    upsilon: &[&DVector<T>],
    config: &ModelConfig,
    options: &FitOptions<T>,
    block_options: &BlockOptions<T>,
    warm: Option<&[DMatrix<T>]>,
) -> Result<BlockUpdate<T>> {
    let d = config.latent_dim;
    let w_hat = solve_slopes(data, z, xi, phi, upsilon, block_options.freeze_beta)?;
    let w = w_hat.columns(0, d).into_owned();
    let beta = w_hat.column(d).into_owned();

    let phi_y: Vec<DMatrix<T>> = phi.iter().map(|p| p.view((0, 0), (d, d)).into_owned()).collect();
    let ups_y: Vec<DVector<T>> = upsilon.iter().map(|u| u.rows(0, d).into_owned()).collect();
    let phi_y_ref: Vec<&DMatrix<T>> = phi_y.iter().collect();
    let ups_y_ref: Vec<&DVector<T>> = ups_y.iter().collect();
    let (mu, scatter) =
        weighted_moments(z, &phi_y_ref, &ups_y_ref, options.sigma_includes_mean_scatter)?;
    let projection = project_structure_from(&scatter, config.structure, warm)?;

    let (b, mut sigma2) =
        block_moments(data, z, phi, upsilon, options.sigma_includes_mean_scatter)?;
    if let Some(v) = block_options.pin_sigma2 {
        sigma2.fill(v);
    }
    Ok(BlockUpdate {
        w,
        beta,
        mu,
        sigma: projection.sigma,
        b,
        sigma2,
        regularized: projection.regularized,
    })
}

/// Block M-step from joint posteriors indexed `n * G + g`.
pub fn block_m_step<T: Scalar>(
    data: &BinaryDataset,
    z: &DMatrix<T>,
    xi: &[T],
    phi_hat: &[DMatrix<T>],
    upsilon_hat: &[DVector<T>],
    config: &ModelConfig,
    options: &FitOptions<T>,
    block_options: &BlockOptions<T>,
) -> Result<BlockUpdate<T>> {
    let expected = z.nrows() * z.ncols();
    if phi_hat.len() != expected || upsilon_hat.len() != expected {
        return Err(Error::Dimension("posterior arrays do not match N×G".into()));
    }
    if upsilon_hat.first().map(|u| u.len()) != Some(config.latent_dim + 1) {
        return Err(Error::Dimension("joint posteriors must have d + 1 coordinates".into()));
    }
    let phi: Vec<&DMatrix<T>> = phi_hat.iter().collect();
    let upsilon: Vec<&DVector<T>> = upsilon_hat.iter().collect();
    block_update(data, z, xi, &phi, &upsilon, config, options, block_options, None)
}

fn prior_index<'a>(blocks: &'a [usize], groups: usize) -> impl Fn(usize, usize) -> usize + 'a {
    move |n, g| blocks[n] * groups + g
}

fn refresh<T: Scalar>(
    data: &BinaryDataset,
    model: &MclmModel<T>,
    xi: &[T],
) -> Result<(SlopeCache<T>, Vec<PriorCache<T>>, Vec<Posterior<T>>, DMatrix<T>)> {
    let aug = AugmentedState::from_model(model)?;
    let slopes = SlopeCache::new(aug.w_hat.clone());
    let priors = aug.priors()?;
    let blocks = block_of(data)?;
    let (posts, lower) = refresh_posteriors(
        data,
        &slopes,
        &priors,
        prior_index(blocks, model.groups()),
        model.groups(),
        xi,
    )?;
    Ok((slopes, priors, posts, lower))
}

fn block_change<T: Scalar>(old: &MclmModel<T>, new: &MclmModel<T>) -> T {
    let mut change = max_abs_diff_mat(&old.w, &new.w).max(max_abs_diff_vec(&old.eta, &new.eta));
    for g in 0..old.groups() {
        change = change
            .max(max_abs_diff_vec(&old.mu[g], &new.mu[g]))
            .max(max_abs_diff_mat(&old.sigma[g], &new.sigma[g]));
    }
    if let (Some(a), Some(b)) = (&old.block, &new.block) {
        change = change
            .max(max_abs_diff_vec(&a.beta, &b.beta))
            .max(max_abs_diff_vec(&a.b, &b.b))
            .max(max_abs_diff_vec(&a.sigma2, &b.sigma2));
    }
    change
}

struct StartOutcome<T: Scalar> {
    model: MclmModel<T>,
    xi: Vec<T>,
    loglik: T,
    monitor: ConvergenceMonitor<T>,
    converged: bool,
    regularized: bool,
}

fn run_start<T: Scalar>(
    data: &BinaryDataset,
    config: &ModelConfig,
    options: &FitOptions<T>,
    block_options: &BlockOptions<T>,
    start: usize,
) -> Result<StartOutcome<T>> {
    let mut rng = start_rng(options.seed, start);
    let (mut model, z_init) = random_start::<T, _>(&mut rng, data.n_rows(), data.n_items(), config);
    let items = data.n_items();
    let n_blocks = data.n_blocks();
    let beta = DVector::from_fn(items, |_, _| standard_normal::<T, _>(&mut rng));
    let b = DVector::from_fn(n_blocks, |_, _| standard_normal::<T, _>(&mut rng));
    let sigma2 = DVector::from_fn(n_blocks, |_, _| standard_normal::<T, _>(&mut rng).abs().max(T::lit(0.1)));
    model.block = Some(BlockParams {
        beta: if block_options.freeze_beta { DVector::zeros(items) } else { beta },
        b,
        sigma2: match block_options.pin_sigma2 {
            Some(v) => DVector::from_element(n_blocks, v),
            None => sigma2,
        },
    });

    let groups = config.groups;
    let mut xi = vec![T::lit(XI_INIT); data.n_rows() * groups * items];
    let (mut slopes, _, mut posts, mut lower) = refresh(data, &model, &xi)?;

    let mut monitor = ConvergenceMonitor::new(options.stopping, options.tolerance);
    let mut regularized = false;
    let mut converged = false;
    let mut loglik = T::neg_inf();

    for iteration in 0..options.max_iterations {
        let z = if iteration == 0 {
            z_init.clone()
        } else {
            responsibilities_with_loglik(&model.eta, &lower)?.0
        };
        let eta = m_step_weights(&z);
        refresh_xi(&slopes, &posts, items, &mut xi);

        let phi: Vec<&DMatrix<T>> = posts.iter().map(|p| &p.phi).collect();
        let upsilon: Vec<&DVector<T>> = posts.iter().map(|p| &p.upsilon).collect();
        let update = block_update(
            data,
            &z,
            &xi,
            &phi,
            &upsilon,
            config,
            options,
            block_options,
            Some(&model.sigma),
        )?;
        regularized |= update.regularized;
        let next = MclmModel {
            w: update.w,
            eta,
            mu: update.mu,
            sigma: update.sigma,
            structure: config.structure,
            block: Some(BlockParams {
                beta: update.beta,
                b: update.b,
                sigma2: update.sigma2,
            }),
        };
        let change = block_change(&model, &next);
        model = next;

        let refreshed = refresh(data, &model, &xi)?;
        slopes = refreshed.0;
        posts = refreshed.2;
        lower = refreshed.3;
        let (_, norms) = responsibilities_with_loglik(&model.eta, &lower)?;
        loglik = norms.iter().fold(T::zero(), |a, &b| a + b);

        if monitor.push(loglik, change) {
            converged = true;
            break;
        }
    }
    Ok(StartOutcome {
        model,
        xi,
        loglik,
        monitor,
        converged,
        regularized,
    })
}

/// Fits the block-effect model; starts, selection and reporting follow
/// [`crate::vem::fit`].
pub fn fit_block<T: Scalar>(
    data: &BinaryDataset,
    config: &ModelConfig,
    options: &FitOptions<T>,
    block_options: &BlockOptions<T>,
) -> Result<FitResult<T>> {
    block_of(data)?;
    config.validate(data.n_items())?;
    if options.starts == 0 {
        return Err(Error::Config("at least one start is required".into()));
    }
    if let Some(v) = block_options.pin_sigma2 {
        if !(v > T::zero()) {
            return Err(Error::Config("pinned block variance must be positive".into()));
        }
    }
    let outcomes = run_starts::<T, _>(options.starts, options.parallel, |s| {
        run_start(data, config, options, block_options, s)
    });
    let (start_index, best, failed_starts) = select_best(outcomes, |o: &StartOutcome<T>| o.loglik)?;
    let model = if options.canonicalize {
        canonical_frame(&best.model)?.0
    } else {
        best.model.clone()
    };
    let (_, _, posts, lower) = refresh(data, &model, &best.xi)?;
    let loglik_variational = crate::vem::variational_loglik(&model.eta, &lower)?;
    let (projection, state) = summarize(&model, data.n_rows(), best.xi, posts, lower)?;
    let diagnostics = FitDiagnostics {
        iterations: best.monitor.loglik.len(),
        loglik_trace: best.monitor.loglik,
        aitken_trace: best.monitor.aitken,
        converged: best.converged,
        seed: options.seed,
        start_index,
        regularized: best.regularized,
        failed_starts,
    };
    Ok(FitResult {
        model,
        projection,
        diagnostics,
        loglik_variational,
        state,
    })
}

/// Block counterpart of [`crate::vem::project`].
pub fn project_block<T: Scalar>(
    model: &MclmModel<T>,
    data: &BinaryDataset,
) -> Result<(LatentProjection<T>, VariationalState<T>)> {
    block_of(data)?;
    if data.n_items() != model.n_items() {
        return Err(Error::Dimension(format!(
            "model has {} items, data has {}",
            model.n_items(),
            data.n_items()
        )));
    }
    let n_blocks = model.block.as_ref().map_or(0, |b| b.n_blocks());
    if data.n_blocks() > n_blocks {
        return Err(Error::Data(format!(
            "data has {} blocks, model has {}",
            data.n_blocks(),
            n_blocks
        )));
    }
    let items = data.n_items();
    let mut xi = vec![T::lit(XI_INIT); data.n_rows() * model.groups() * items];
    let (slopes, _, mut posts, mut lower) = refresh(data, model, &xi)?;
    for _ in 0..500 {
        let before = xi.clone();
        refresh_xi(&slopes, &posts, items, &mut xi);
        let r = refresh(data, model, &xi)?;
        posts = r.2;
        lower = r.3;
        let delta = before
            .iter()
            .zip(&xi)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()));
        if delta < T::lit(1e-10) {
            break;
        }
    }
    summarize(model, data.n_rows(), xi, posts, lower)
}
