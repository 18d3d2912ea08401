//! Variational EM for the flat (non-block) model.
//!
//! The logistic likelihood of each item is replaced by the quadratic lower
//! bound `σ(ξ) exp{(A - ξ)/2 + λ(ξ)(A² - ξ²)}`, which makes the latent
//! posterior Gaussian and the marginal bound `L(ξ)` available in closed form.
//! One outer iteration updates, in order: responsibilities and weights, the
//! expansion points ξ, the shared slopes, the component Gaussians, and then
//! re-evaluates the bound at the new parameters.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::covariance::{project_structure_from, ScatterSet};
use crate::data::BinaryDataset;
use crate::error::{Error, Result};
use crate::linalg::{quad_form, spd_inverse_logdet, symmetrize};
use crate::model::{CovarianceStructure, Factor, LatentProjection, MclmModel, ModelConfig};
use crate::scalar::{log_logistic, logistic, Scalar};

/// Initial value of every variational parameter ξ.
pub const XI_INIT: f64 = 20.0;
/// Effective component size below which a start is abandoned.
pub const COLLAPSE_THRESHOLD: f64 = 1e-6;

/// Convergence test applied after each outer iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoppingRule {
    /// Successive Aitken-accelerated log-likelihood estimates differ by at
    /// most the tolerance.
    Aitken,
    /// Largest absolute change over all parameters is below the tolerance.
    ParameterStability,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions<T: Scalar> {
    pub starts: usize,
    pub seed: u64,
    pub stopping: StoppingRule,
    pub tolerance: T,
    pub max_iterations: usize,
    /// Adds the spread of the posterior means around μ_g to the Σ_g update,
    /// making it the exact maximizer of the expected bound.
    pub sigma_includes_mean_scatter: bool,
    /// Report the slope matrix in the canonical frame.
    pub canonicalize: bool,
    /// Run independent starts on the rayon pool.
    pub parallel: bool,
}

impl<T: Scalar> Default for FitOptions<T> {
    fn default() -> Self {
        Self {
            starts: 10,
            seed: 0,
            stopping: StoppingRule::Aitken,
            tolerance: T::lit(0.01),
            max_iterations: 2000,
            sigma_includes_mean_scatter: true,
            canonicalize: true,
            parallel: true,
        }
    }
}

/// Per-start convergence record.
#[derive(Debug, Clone, PartialEq)]
pub struct FitDiagnostics<T: Scalar> {
    /// Variational log-likelihood after every outer iteration.
    pub loglik_trace: Vec<T>,
    /// Aitken-accelerated estimates, one per iteration from the third on.
    pub aitken_trace: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
    pub start_index: usize,
    /// Some covariance update hit the eigenvalue floor.
    pub regularized: bool,
    /// Starts that aborted, with the reason.
    pub failed_starts: Vec<(usize, String)>,
}

/// Variational parameters and Gaussian posteriors for every (n, g) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState<T: Scalar> {
    pub n_rows: usize,
    pub n_items: usize,
    pub groups: usize,
    /// ξ indexed `(n * G + g) * M + m`.
    pub xi: Vec<T>,
    /// Posterior covariances indexed `n * G + g`.
    pub phi: Vec<DMatrix<T>>,
    /// Posterior means indexed `n * G + g`.
    pub upsilon: Vec<DVector<T>>,
    /// N×G lower bounds `L(ξ_ng)`.
    pub lower: DMatrix<T>,
}

impl<T: Scalar> VariationalState<T> {
    #[inline]
    pub fn xi_slice(&self, n: usize, g: usize) -> &[T] {
        let start = (n * self.groups + g) * self.n_items;
        &self.xi[start..start + self.n_items]
    }

    #[inline]
    pub fn posterior(&self, n: usize, g: usize) -> (&DMatrix<T>, &DVector<T>) {
        let k = n * self.groups + g;
        (&self.phi[k], &self.upsilon[k])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<T: Scalar> {
    pub model: MclmModel<T>,
    pub projection: LatentProjection<T>,
    pub diagnostics: FitDiagnostics<T>,
    pub loglik_variational: T,
    pub state: VariationalState<T>,
}

// ---------------------------------------------------------------------------
// Scalar bound coefficients
// ---------------------------------------------------------------------------

/// `λ(ξ) = (1/2 - σ(ξ)) / (2ξ) = -tanh(ξ/2) / (4ξ)`, with the limit `-1/8`
/// at zero.
#[inline]
pub(crate) fn lambda_of<T: Scalar>(xi: T) -> T {
    let xi = xi.abs();
    if xi < T::lit(1e-4) {
        T::lit(-0.125) + xi * xi / T::lit(96.0)
    } else {
        -(xi * T::lit(0.5)).tanh() / (T::lit(4.0) * xi)
    }
}

/// Returns `(σ(ξ), λ(ξ))`.
pub fn jaakkola_coefficients<T: Scalar>(xi: T) -> Result<(T, T)> {
    if xi < T::zero() || !xi.is_finite() {
        return Err(Error::Config(format!("variational parameter must be >= 0, got {xi}")));
    }
    Ok((logistic(xi), lambda_of(xi)))
}

/// Per-item constant of the bound: `log σ(ξ) - ξ/2 - λ(ξ) ξ²`.
#[inline]
fn item_term<T: Scalar>(xi: T) -> T {
    log_logistic(xi) - xi * T::lit(0.5) - lambda_of(xi) * xi * xi
}

// ---------------------------------------------------------------------------
// Responsibilities and weights
// ---------------------------------------------------------------------------

/// Responsibilities `z_ng ∝ η_g exp(L_ng)` and the per-row log normalizers
/// `log Σ_g η_g exp(L_ng)`.
pub(crate) fn responsibilities_with_loglik<T: Scalar>(
    eta: &DVector<T>,
    lower: &DMatrix<T>,
) -> Result<(DMatrix<T>, Vec<T>)> {
    let (n_rows, groups) = lower.shape();
    if eta.len() != groups {
        return Err(Error::Dimension(format!(
            "{} weights for {} components",
            eta.len(),
            groups
        )));
    }
    let log_eta: Vec<T> = eta.iter().map(|&e| e.ln()).collect();
    let mut z = DMatrix::zeros(n_rows, groups);
    let mut norms = Vec::with_capacity(n_rows);
    let mut buf = vec![T::zero(); groups];
    for n in 0..n_rows {
        for g in 0..groups {
            buf[g] = log_eta[g] + lower[(n, g)];
        }
        let top = buf.iter().copied().fold(T::neg_inf(), |a, b| a.max(b));
        if !top.is_finite() {
            return Err(Error::DegenerateRow { observation: n });
        }
        let mut total = T::zero();
        for g in 0..groups {
            buf[g] = (buf[g] - top).exp();
            total += buf[g];
        }
        for g in 0..groups {
            z[(n, g)] = buf[g] / total;
        }
        norms.push(top + total.ln());
    }
    Ok((z, norms))
}

/// E-step for the component memberships.
pub fn e_step_responsibilities<T: Scalar>(eta: &DVector<T>, lower: &DMatrix<T>) -> Result<DMatrix<T>> {
    responsibilities_with_loglik(eta, lower).map(|(z, _)| z)
}

/// Mixing weights as column means of the responsibilities.
pub fn m_step_weights<T: Scalar>(z: &DMatrix<T>) -> DVector<T> {
    let n = T::of_usize(z.nrows());
    DVector::from_iterator(
        z.ncols(),
        (0..z.ncols()).map(|g| z.column(g).iter().fold(T::zero(), |a, &b| a + b) / n),
    )
}

// ---------------------------------------------------------------------------
// Posterior machinery shared with the block model
// ---------------------------------------------------------------------------

/// A Gaussian latent prior with the quantities the E-step needs.
#[derive(Debug, Clone)]
pub(crate) struct PriorCache<T: Scalar> {
    pub inv: DMatrix<T>,
    pub inv_mean: DVector<T>,
    pub logdet: T,
    /// `μ'Σ⁻¹μ`
    pub mahalanobis: T,
}

impl<T: Scalar> PriorCache<T> {
    pub fn new(mean: DVector<T>, cov: &DMatrix<T>, component: usize) -> Result<Self> {
        let (inv, logdet) =
            spd_inverse_logdet(cov).ok_or(Error::SingularCovariance { component })?;
        let inv_mean = &inv * &mean;
        let mahalanobis = mean.dot(&inv_mean);
        Ok(Self {
            inv,
            inv_mean,
            logdet,
            mahalanobis,
        })
    }
}

/// Gaussian variational posterior of one (observation, component) pair.
#[derive(Debug, Clone)]
pub(crate) struct Posterior<T: Scalar> {
    pub phi: DMatrix<T>,
    pub upsilon: DVector<T>,
    pub logdet_phi: T,
    /// `υ'φ⁻¹υ`
    pub quad: T,
}

/// Slope-derived quantities that do not depend on ξ.
pub(crate) struct SlopeCache<T: Scalar> {
    pub slopes: DMatrix<T>,
    pub outer: Vec<DMatrix<T>>,
}

impl<T: Scalar> SlopeCache<T> {
    pub fn new(slopes: DMatrix<T>) -> Self {
        let outer = (0..slopes.nrows())
            .map(|m| {
                let w = slopes.row(m).transpose();
                &w * w.transpose()
            })
            .collect();
        Self { slopes, outer }
    }

    pub fn dim(&self) -> usize {
        self.slopes.ncols()
    }

    /// `Σ_m (x_m - 1/2) w_m` for one response row.
    pub fn half_sum(&self, x: &[u8]) -> DVector<T> {
        let half = T::lit(0.5);
        let mut r = DVector::zeros(self.dim());
        for (m, &v) in x.iter().enumerate() {
            let c = T::of_usize(v as usize) - half;
            for k in 0..self.dim() {
                r[k] += c * self.slopes[(m, k)];
            }
        }
        r
    }
}

/// `φ⁻¹ = P⁻¹ - 2 Σ_m λ(ξ_m) w_m w_m'`, `υ = φ (P⁻¹ μ + Σ_m (x_m - ½) w_m)`.
pub(crate) fn posterior_for<T: Scalar>(
    prior: &PriorCache<T>,
    slopes: &SlopeCache<T>,
    xi: &[T],
    half_sum: &DVector<T>,
    component: usize,
) -> Result<Posterior<T>> {
    let mut precision = prior.inv.clone();
    let two = T::lit(2.0);
    for (m, outer) in slopes.outer.iter().enumerate() {
        let c = two * lambda_of(xi[m]);
        precision.zip_apply(outer, |p, o| *p -= c * o);
    }
    let (phi, neg_logdet) =
        spd_inverse_logdet(&precision).ok_or(Error::SingularCovariance { component })?;
    let rhs = &prior.inv_mean + half_sum;
    let upsilon = &phi * &rhs;
    let quad = upsilon.dot(&rhs);
    Ok(Posterior {
        phi,
        upsilon,
        logdet_phi: -neg_logdet,
        quad,
    })
}

/// Closed-form `L(ξ)` at a posterior consistent with `prior`.
pub(crate) fn bound_value<T: Scalar>(prior: &PriorCache<T>, post: &Posterior<T>, xi: &[T]) -> T {
    let items = xi.iter().fold(T::zero(), |a, &x| a + item_term(x));
    let half = T::lit(0.5);
    items - half * prior.mahalanobis + half * (post.logdet_phi - prior.logdet) + half * post.quad
}

/// New expansion point `ξ² = w'(φ + υυ')w`.
pub fn variational_m_step_xi<T: Scalar>(w_m: &DVector<T>, phi: &DMatrix<T>, upsilon: &DVector<T>) -> T {
    let proj = w_m.dot(upsilon);
    let sq = quad_form(phi, w_m) + proj * proj;
    sq.max(T::zero()).sqrt()
}

/// Runs the posterior update for every (n, g) and fills `lower`.
pub(crate) fn refresh_posteriors<T: Scalar, F>(
    data: &BinaryDataset,
    slopes: &SlopeCache<T>,
    priors: &[PriorCache<T>],
    prior_index: F,
    groups: usize,
    xi: &[T],
) -> Result<(Vec<Posterior<T>>, DMatrix<T>)>
where
    F: Fn(usize, usize) -> usize,
{
    let n_rows = data.n_rows();
    let items = data.n_items();
    let mut posts = Vec::with_capacity(n_rows * groups);
    let mut lower = DMatrix::zeros(n_rows, groups);
    for n in 0..n_rows {
        let half_sum = slopes.half_sum(data.row(n));
        for g in 0..groups {
            let prior = &priors[prior_index(n, g)];
            let start = (n * groups + g) * items;
            let xi_ng = &xi[start..start + items];
            let post = posterior_for(prior, slopes, xi_ng, &half_sum, g)?;
            lower[(n, g)] = bound_value(prior, &post, xi_ng);
            posts.push(post);
        }
    }
    Ok((posts, lower))
}

/// ξ update for all (n, m, g) from the current posteriors and slopes.
pub(crate) fn refresh_xi<T: Scalar>(
    slopes: &SlopeCache<T>,
    posts: &[Posterior<T>],
    n_items: usize,
    xi: &mut [T],
) {
    for (k, post) in posts.iter().enumerate() {
        for m in 0..n_items {
            let w = slopes.slopes.row(m).transpose();
            xi[k * n_items + m] = variational_m_step_xi(&w, &post.phi, &post.upsilon);
        }
    }
}

/// Joint slope solve. When `frozen_last` is set, the last latent
/// coordinate's loading is held at zero and only the leading block solved.
pub(crate) fn solve_slopes<T: Scalar>(
    data: &BinaryDataset,
    z: &DMatrix<T>,
    xi: &[T],
    phi: &[&DMatrix<T>],
    upsilon: &[&DVector<T>],
    frozen_last: bool,
) -> Result<DMatrix<T>> {
    let (n_rows, groups) = z.shape();
    let items = data.n_items();
    let dim = upsilon[0].len();
    let free = if frozen_last { dim - 1 } else { dim };

    // Second moments E[yy'] and responsibility-weighted means per row.
    let second: Vec<DMatrix<T>> = phi
        .iter()
        .zip(upsilon)
        .map(|(p, u)| *p + *u * u.transpose())
        .collect();
    let mut weighted_mean = Vec::with_capacity(n_rows);
    for n in 0..n_rows {
        let mut acc = DVector::zeros(dim);
        for g in 0..groups {
            acc += upsilon[n * groups + g] * z[(n, g)];
        }
        weighted_mean.push(acc);
    }

    let half = T::lit(0.5);
    let mut slopes = DMatrix::zeros(items, dim);
    for m in 0..items {
        let mut a = DMatrix::zeros(dim, dim);
        let mut b = DVector::zeros(dim);
        for n in 0..n_rows {
            for g in 0..groups {
                let k = n * groups + g;
                let c = T::lit(-2.0) * z[(n, g)] * lambda_of(xi[k * items + m]);
                a.zip_apply(&second[k], |p, s| *p += c * s);
            }
            let c = T::of_usize(data.get(n, m) as usize) - half;
            b.zip_apply(&weighted_mean[n], |p, u| *p += c * u);
        }
        let a_free = a.view((0, 0), (free, free)).into_owned();
        let b_free = b.rows(0, free).into_owned();
        let chol = a_free.cholesky().ok_or(Error::SingularSlopeSystem { item: m })?;
        let w = chol.solve(&b_free);
        for k in 0..free {
            slopes[(m, k)] = w[k];
        }
    }
    Ok(slopes)
}

/// Slope update `w_m = -[2 Σ z λ(ξ)(φ + υυ')]⁻¹ Σ z (x_m - ½) υ`.
///
/// `phi` and `upsilon` are indexed `n * G + g`; `xi` as in
/// [`VariationalState::xi`].
pub fn m_step_slopes<T: Scalar>(
    data: &BinaryDataset,
    z: &DMatrix<T>,
    xi: &[T],
    phi: &[DMatrix<T>],
    upsilon: &[DVector<T>],
) -> Result<DMatrix<T>> {
    let expected = z.nrows() * z.ncols();
    if phi.len() != expected || upsilon.len() != expected || xi.len() != expected * data.n_items() {
        return Err(Error::Dimension("posterior arrays do not match N×G".into()));
    }
    let phi: Vec<&DMatrix<T>> = phi.iter().collect();
    let upsilon: Vec<&DVector<T>> = upsilon.iter().collect();
    solve_slopes(data, z, xi, &phi, &upsilon, false)
}

/// Output of the Gaussian M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianUpdate<T: Scalar> {
    pub mu: Vec<DVector<T>>,
    pub sigma: Vec<DMatrix<T>>,
    pub regularized: bool,
}

/// Responsibility-weighted latent moments, the input of the Σ projection.
pub(crate) fn weighted_moments<T: Scalar>(
    z: &DMatrix<T>,
    phi: &[&DMatrix<T>],
    upsilon: &[&DVector<T>],
    include_mean_scatter: bool,
) -> Result<(Vec<DVector<T>>, ScatterSet<T>)> {
    let (n_rows, groups) = z.shape();
    let dim = upsilon[0].len();
    let mut mus = Vec::with_capacity(groups);
    let mut scatters = Vec::with_capacity(groups);
    let mut counts = Vec::with_capacity(groups);
    for g in 0..groups {
        let n_g = z.column(g).iter().fold(T::zero(), |a, &b| a + b);
        if !(n_g >= T::lit(COLLAPSE_THRESHOLD)) {
            return Err(Error::ComponentCollapse {
                component: g,
                size: n_g.as_f64(),
            });
        }
        let mut mu = DVector::zeros(dim);
        let mut s = DMatrix::zeros(dim, dim);
        for n in 0..n_rows {
            let k = n * groups + g;
            let w = z[(n, g)];
            mu.zip_apply(upsilon[k], |p, u| *p += w * u);
            s.zip_apply(phi[k], |p, f| *p += w * f);
        }
        mu /= n_g;
        if include_mean_scatter {
            for n in 0..n_rows {
                let diff = upsilon[n * groups + g] - &mu;
                s += &diff * diff.transpose() * z[(n, g)];
            }
        }
        s /= n_g;
        symmetrize(&mut s);
        mus.push(mu);
        scatters.push(s);
        counts.push(n_g);
    }
    Ok((mus, ScatterSet::new(scatters, counts)?))
}

/// Gaussian M-step: μ_g is the weighted mean of the posterior means and Σ_g
/// the structured projection of the weighted mean posterior covariance.
pub fn m_step_gaussians<T: Scalar>(
    z: &DMatrix<T>,
    phi: &[DMatrix<T>],
    upsilon: &[DVector<T>],
    structure: CovarianceStructure,
    include_mean_scatter: bool,
    warm: Option<&[DMatrix<T>]>,
) -> Result<GaussianUpdate<T>> {
    if phi.len() != z.nrows() * z.ncols() || upsilon.len() != phi.len() {
        return Err(Error::Dimension("posterior arrays do not match N×G".into()));
    }
    let phi: Vec<&DMatrix<T>> = phi.iter().collect();
    let upsilon: Vec<&DVector<T>> = upsilon.iter().collect();
    let (mu, scatter) = weighted_moments(z, &phi, &upsilon, include_mean_scatter)?;
    let projection = project_structure_from(&scatter, structure, warm)?;
    Ok(GaussianUpdate {
        mu,
        sigma: projection.sigma,
        regularized: projection.regularized,
    })
}

/// Posterior (φ, υ) of observation `x_n` under every component, with
/// `xi_n` laid out component-major (`g * M + m`).
pub fn variational_e_step<T: Scalar>(
    model: &MclmModel<T>,
    x_n: &[u8],
    xi_n: &[T],
) -> Result<Vec<(DMatrix<T>, DVector<T>)>> {
    let items = model.n_items();
    if x_n.len() != items || xi_n.len() != items * model.groups() {
        return Err(Error::Dimension("response row or ξ has the wrong length".into()));
    }
    let slopes = SlopeCache::new(model.w.clone());
    let half_sum = slopes.half_sum(x_n);
    (0..model.groups())
        .map(|g| {
            let prior = PriorCache::new(model.mu[g].clone(), &model.sigma[g], g)?;
            let post = posterior_for(&prior, &slopes, &xi_n[g * items..(g + 1) * items], &half_sum, g)?;
            Ok((post.phi, post.upsilon))
        })
        .collect()
}

/// The bound `L(ξ_ng)` evaluated exactly as its closed form reads, for
/// arbitrary (φ, υ):
/// `Σ_m[log σ(ξ) - ξ/2 - λ(ξ)ξ²] - μ'Σ⁻¹μ/2 + ½ log(|φ|/|Σ|) + υ'φ⁻¹υ/2`.
pub fn lower_bound<T: Scalar>(
    model: &MclmModel<T>,
    xi_ng: &[T],
    phi: &DMatrix<T>,
    upsilon: &DVector<T>,
    g: usize,
) -> Result<T> {
    if xi_ng.len() != model.n_items() || g >= model.groups() {
        return Err(Error::Dimension("ξ length or component index out of range".into()));
    }
    let prior = PriorCache::new(model.mu[g].clone(), &model.sigma[g], g)?;
    let (phi_inv, logdet_phi) =
        spd_inverse_logdet(phi).ok_or(Error::SingularCovariance { component: g })?;
    let post = Posterior {
        phi: phi.clone(),
        upsilon: upsilon.clone(),
        logdet_phi,
        quad: quad_form(&phi_inv, upsilon),
    };
    Ok(bound_value(&prior, &post, xi_ng))
}

// ---------------------------------------------------------------------------
// Fitting loop
// ---------------------------------------------------------------------------

/// Aitken acceleration over the last three log-likelihood values.
pub(crate) fn aitken_estimate<T: Scalar>(prev: T, cur: T, next: T) -> T {
    let denom = cur - prev;
    let step = next - cur;
    if denom.abs() <= T::machine_eps() * cur.abs().max(T::one()) {
        return next;
    }
    let a = step / denom;
    if (T::one() - a).abs() <= T::machine_eps() {
        return next;
    }
    cur + step / (T::one() - a)
}

/// Tracks log-likelihoods and decides convergence.
pub(crate) struct ConvergenceMonitor<T: Scalar> {
    rule: StoppingRule,
    tolerance: T,
    pub loglik: Vec<T>,
    pub aitken: Vec<T>,
}

impl<T: Scalar> ConvergenceMonitor<T> {
    pub fn new(rule: StoppingRule, tolerance: T) -> Self {
        Self {
            rule,
            tolerance,
            loglik: Vec::new(),
            aitken: Vec::new(),
        }
    }

    /// Records one iteration; `param_change` is the max absolute parameter
    /// change of that iteration.
    pub fn push(&mut self, loglik: T, param_change: T) -> bool {
        self.loglik.push(loglik);
        let len = self.loglik.len();
        if len >= 3 {
            let l = &self.loglik;
            self.aitken
                .push(aitken_estimate(l[len - 3], l[len - 2], l[len - 1]));
        }
        match self.rule {
            StoppingRule::ParameterStability => len >= 2 && param_change < self.tolerance,
            StoppingRule::Aitken => {
                let a = &self.aitken;
                a.len() >= 2 && (a[a.len() - 1] - a[a.len() - 2]).abs() <= self.tolerance
            }
        }
    }
}

pub(crate) fn max_abs_diff_mat<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    a.iter()
        .zip(b.iter())
        .fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs()))
}

pub(crate) fn max_abs_diff_vec<T: Scalar>(a: &DVector<T>, b: &DVector<T>) -> T {
    a.iter()
        .zip(b.iter())
        .fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs()))
}

fn parameter_change<T: Scalar>(old: &MclmModel<T>, new: &MclmModel<T>) -> T {
    let mut change = max_abs_diff_mat(&old.w, &new.w).max(max_abs_diff_vec(&old.eta, &new.eta));
    for g in 0..old.groups() {
        change = change
            .max(max_abs_diff_vec(&old.mu[g], &new.mu[g]))
            .max(max_abs_diff_mat(&old.sigma[g], &new.sigma[g]));
    }
    change
}

/// RNG for start `start` of a run seeded with `seed`.
pub(crate) fn start_rng(seed: u64, start: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(start as u64);
    rng
}

pub(crate) fn standard_normal<T: Scalar, R: Rng>(rng: &mut R) -> T {
    T::lit(rng.sample::<f64, _>(StandardNormal))
}

/// Random starting point: hard random memberships, standard-normal slopes
/// and means, identity covariances. Draw order is fixed so the block fitter
/// can reproduce the same flat initialization.
pub(crate) fn random_start<T: Scalar, R: Rng>(
    rng: &mut R,
    n_rows: usize,
    n_items: usize,
    config: &ModelConfig,
) -> (MclmModel<T>, DMatrix<T>) {
    let groups = config.groups;
    let d = config.latent_dim;
    let mut z = DMatrix::zeros(n_rows, groups);
    for n in 0..n_rows {
        z[(n, rng.random_range(0..groups))] = T::one();
    }
    let w = DMatrix::from_fn(n_items, d, |_, _| standard_normal(rng));
    let mu = (0..groups)
        .map(|_| DVector::from_fn(d, |_, _| standard_normal(rng)))
        .collect();
    let sigma = vec![DMatrix::identity(d, d); groups];
    let eta = m_step_weights(&z);
    let model = MclmModel {
        w,
        eta,
        mu,
        sigma,
        structure: config.structure,
        block: None,
    };
    (model, z)
}

struct StartOutcome<T: Scalar> {
    model: MclmModel<T>,
    xi: Vec<T>,
    loglik: T,
    monitor: ConvergenceMonitor<T>,
    converged: bool,
    regularized: bool,
}

fn flat_priors<T: Scalar>(model: &MclmModel<T>) -> Result<Vec<PriorCache<T>>> {
    (0..model.groups())
        .map(|g| PriorCache::new(model.mu[g].clone(), &model.sigma[g], g))
        .collect()
}

fn run_start<T: Scalar>(
    data: &BinaryDataset,
    config: &ModelConfig,
    options: &FitOptions<T>,
    start: usize,
) -> Result<StartOutcome<T>> {
    let mut rng = start_rng(options.seed, start);
    let (mut model, z_init) = random_start::<T, _>(&mut rng, data.n_rows(), data.n_items(), config);
    let groups = config.groups;
    let items = data.n_items();
    let mut xi = vec![T::lit(XI_INIT); data.n_rows() * groups * items];

    let mut slopes = SlopeCache::new(model.w.clone());
    let mut priors = flat_priors(&model)?;
    let (mut posts, mut lower) = refresh_posteriors(data, &slopes, &priors, |_, g| g, groups, &xi)?;

    let mut monitor = ConvergenceMonitor::new(options.stopping, options.tolerance);
    let mut regularized = false;
    let mut converged = false;
    let mut loglik = T::neg_inf();

    for iteration in 0..options.max_iterations {
        // Memberships: the random hard assignment seeds the first pass.
        let z = if iteration == 0 {
            z_init.clone()
        } else {
            e_step_responsibilities(&model.eta, &lower)?
        };
        let eta = m_step_weights(&z);

        refresh_xi(&slopes, &posts, items, &mut xi);

        let phi: Vec<&DMatrix<T>> = posts.iter().map(|p| &p.phi).collect();
        let upsilon: Vec<&DVector<T>> = posts.iter().map(|p| &p.upsilon).collect();
        let w = solve_slopes(data, &z, &xi, &phi, &upsilon, false)?;
        let (mu, scatter) =
            weighted_moments(&z, &phi, &upsilon, options.sigma_includes_mean_scatter)?;
        let projection = project_structure_from(&scatter, config.structure, Some(&model.sigma))?;
        regularized |= projection.regularized;

        let next = MclmModel {
            w,
            eta,
            mu,
            sigma: projection.sigma,
            structure: config.structure,
            block: None,
        };
        let change = parameter_change(&model, &next);
        model = next;

        slopes = SlopeCache::new(model.w.clone());
        priors = flat_priors(&model)?;
        let refreshed = refresh_posteriors(data, &slopes, &priors, |_, g| g, groups, &xi)?;
        posts = refreshed.0;
        lower = refreshed.1;
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

/// Reports `model` in the canonical frame: slope columns orthogonal (when
/// the structure is rotation-invariant), ordered by decreasing norm, each
/// column's largest-magnitude entry positive. Returns the transform `T`
/// applied as `y -> T y`.
pub fn canonical_frame<T: Scalar>(model: &MclmModel<T>) -> Result<(MclmModel<T>, DMatrix<T>)> {
    let d = model.latent_dim();
    let mut transform = DMatrix::identity(d, d);
    let rotation_free = model.structure.orientation() != Factor::Identity
        || model.structure.shape() == Factor::Identity;
    if rotation_free && d > 1 {
        let svd = model.w.clone().svd(false, true);
        if let Some(v_t) = svd.v_t {
            transform = v_t;
        }
    }
    let rotated = &model.w * transform.transpose();
    let norms: Vec<T> = (0..d).map(|k| rotated.column(k).norm()).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut signed_perm = DMatrix::zeros(d, d);
    for (new, &old) in order.iter().enumerate() {
        let col = rotated.column(old);
        let mut best = 0;
        for m in 1..col.len() {
            if col[m].abs() > col[best].abs() {
                best = m;
            }
        }
        signed_perm[(new, old)] = if col[best] < T::zero() { -T::one() } else { T::one() };
    }
    let total = &signed_perm * &transform;
    let out = model.gauge_transform(&total)?;
    Ok((out, total))
}

/// Posterior summaries under fixed parameters: ξ is iterated to its fixed
/// point before responsibilities and posterior means are reported.
pub fn project<T: Scalar>(model: &MclmModel<T>, data: &BinaryDataset) -> Result<(LatentProjection<T>, VariationalState<T>)> {
    if model.block.is_some() {
        return crate::block::project_block(model, data);
    }
    if data.n_items() != model.n_items() {
        return Err(Error::Dimension(format!(
            "model has {} items, data has {}",
            model.n_items(),
            data.n_items()
        )));
    }
    let groups = model.groups();
    let items = data.n_items();
    let slopes = SlopeCache::new(model.w.clone());
    let priors = flat_priors(model)?;
    let mut xi = vec![T::lit(XI_INIT); data.n_rows() * groups * items];
    let (mut posts, mut lower) = refresh_posteriors(data, &slopes, &priors, |_, g| g, groups, &xi)?;
    for _ in 0..500 {
        let before = xi.clone();
        refresh_xi(&slopes, &posts, items, &mut xi);
        let (p, l) = refresh_posteriors(data, &slopes, &priors, |_, g| g, groups, &xi)?;
        posts = p;
        lower = l;
        let delta = before
            .iter()
            .zip(&xi)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()));
        if delta < T::lit(1e-10) {
            break;
        }
    }
    Ok(summarize(model, data.n_rows(), xi, posts, lower)?)
}

pub(crate) fn summarize<T: Scalar>(
    model: &MclmModel<T>,
    n_rows: usize,
    xi: Vec<T>,
    posts: Vec<Posterior<T>>,
    lower: DMatrix<T>,
) -> Result<(LatentProjection<T>, VariationalState<T>)> {
    let groups = model.groups();
    let d = model.latent_dim();
    let z = e_step_responsibilities(&model.eta, &lower)?;
    let mut coords = DMatrix::zeros(n_rows, d);
    for n in 0..n_rows {
        for g in 0..groups {
            let u = &posts[n * groups + g].upsilon;
            for k in 0..d {
                coords[(n, k)] += z[(n, g)] * u[k];
            }
        }
    }
    let state = VariationalState {
        n_rows,
        n_items: model.n_items(),
        groups,
        xi,
        phi: posts.iter().map(|p| p.phi.clone()).collect(),
        upsilon: posts.into_iter().map(|p| p.upsilon).collect(),
        lower,
    };
    Ok((LatentProjection::new(coords, z), state))
}

/// Variational log-likelihood `Σ_n log Σ_g η_g exp(L_ng)`.
pub fn variational_loglik<T: Scalar>(eta: &DVector<T>, lower: &DMatrix<T>) -> Result<T> {
    let (_, norms) = responsibilities_with_loglik(eta, lower)?;
    Ok(norms.iter().fold(T::zero(), |a, &b| a + b))
}

/// Picks the best successful start: highest log-likelihood, ties to the
/// lowest start index.
pub(crate) fn select_best<T: Scalar, O>(
    outcomes: Vec<(usize, Result<O>)>,
    loglik_of: impl Fn(&O) -> T,
) -> Result<(usize, O, Vec<(usize, String)>)> {
    let mut failures = Vec::new();
    let mut best: Option<(usize, O)> = None;
    for (start, outcome) in outcomes {
        match outcome {
            Ok(o) => {
                let better = match &best {
                    None => true,
                    Some((_, b)) => loglik_of(&o) > loglik_of(b),
                };
                if better {
                    best = Some((start, o));
                }
            }
            Err(e) => failures.push((start, e.to_string())),
        }
    }
    match best {
        Some((start, o)) => Ok((start, o, failures)),
        None => Err(Error::AllStartsFailed(
            failures
                .iter()
                .map(|(s, e)| format!("start {s}: {e}"))
                .collect::<Vec<_>>()
                .join("; "),
        )),
    }
}

pub(crate) fn run_starts<T: Scalar, O: Send>(
    starts: usize,
    parallel: bool,
    job: impl Fn(usize) -> Result<O> + Sync,
) -> Vec<(usize, Result<O>)> {
    if parallel {
        (0..starts).into_par_iter().map(|s| (s, job(s))).collect()
    } else {
        (0..starts).map(|s| (s, job(s))).collect()
    }
}

/// Fits the flat model from `options.starts` random initializations and
/// keeps the start with the highest final variational log-likelihood.
pub fn fit<T: Scalar>(
    data: &BinaryDataset,
    config: &ModelConfig,
    options: &FitOptions<T>,
) -> Result<FitResult<T>> {
    if config.block_effect {
        return Err(Error::Config("block-effect models are fitted with block::fit_block".into()));
    }
    config.validate(data.n_items())?;
    if options.starts == 0 {
        return Err(Error::Config("at least one start is required".into()));
    }
    let outcomes = run_starts::<T, _>(options.starts, options.parallel, |s| {
        run_start(data, config, options, s)
    });
    let (start_index, best, failed_starts) = select_best(outcomes, |o: &StartOutcome<T>| o.loglik)?;

    let model = if options.canonicalize {
        canonical_frame(&best.model)?.0
    } else {
        best.model.clone()
    };
    // ξ is invariant under the gauge, so the final posteriors can be
    // recomputed directly in the reported frame.
    let slopes = SlopeCache::new(model.w.clone());
    let priors = flat_priors(&model)?;
    let (posts, lower) =
        refresh_posteriors(data, &slopes, &priors, |_, g| g, model.groups(), &best.xi)?;
    let loglik_variational = variational_loglik(&model.eta, &lower)?;
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
