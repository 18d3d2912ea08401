//! Constrained estimation of component covariances under the fourteen
//! eigen-decomposition structures `Σ_g = λ_g Q_g A_g Q_g'`.
//!
//! Every estimator maximizes
//! `Σ_g n_g [-log|Σ_g| - tr(S_g Σ_g⁻¹)]` subject to the structure, where
//! `S_g` is the per-component scatter and `n_g` its effective size.
//! EEE, VVV, EII, VII, EEI, VVI, EVI, EEV and EVV have closed forms; VEI,
//! VEE, VEV, EVE and VVE alternate between volume/shape and orientation
//! updates, each of which never lowers the criterion.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{floor_eigenvalues, sorted_eigen, spd_inverse_logdet, symmetrize};
use crate::model::CovarianceStructure;
use crate::scalar::Scalar;

/// Relative eigenvalue floor applied to incoming scatter matrices.
pub const EIGEN_FLOOR: f64 = 1e-8;
/// Iteration cap for the alternating estimators.
pub const MAX_INNER_ITERATIONS: usize = 100;
/// Relative criterion change at which the alternating estimators stop.
pub const INNER_TOLERANCE: f64 = 1e-8;

/// Per-component scatter matrices with their effective sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterSet<T: Scalar> {
    scatter: Vec<DMatrix<T>>,
    counts: Vec<T>,
}

impl<T: Scalar> ScatterSet<T> {
    pub fn new(scatter: Vec<DMatrix<T>>, counts: Vec<T>) -> Result<Self> {
        if scatter.is_empty() || scatter.len() != counts.len() {
            return Err(Error::Dimension(
                "scatter set needs one count per component".into(),
            ));
        }
        let d = scatter[0].nrows();
        for (g, s) in scatter.iter().enumerate() {
            if s.nrows() != d || s.ncols() != d || d == 0 {
                return Err(Error::Dimension(format!("scatter {g} is not {d}×{d}")));
            }
            let scale = s.abs().max().max(T::one());
            if (s - s.transpose()).abs().max() > T::lit(1e-10) * scale {
                return Err(Error::Config(format!("scatter {g} is not symmetric")));
            }
            if !(counts[g] > T::zero()) {
                return Err(Error::Config(format!("component {g} has non-positive size")));
            }
        }
        Ok(Self { scatter, counts })
    }

    pub fn groups(&self) -> usize {
        self.scatter.len()
    }

    pub fn dim(&self) -> usize {
        self.scatter[0].nrows()
    }

    pub fn scatter(&self) -> &[DMatrix<T>] {
        &self.scatter
    }

    pub fn counts(&self) -> &[T] {
        &self.counts
    }

    fn total(&self) -> T {
        self.counts.iter().fold(T::zero(), |a, &b| a + b)
    }

    /// `W_g = n_g S_g`.
    fn weighted(&self, g: usize) -> DMatrix<T> {
        &self.scatter[g] * self.counts[g]
    }

    fn pooled(&self) -> DMatrix<T> {
        let mut acc = DMatrix::zeros(self.dim(), self.dim());
        for g in 0..self.groups() {
            acc += self.weighted(g);
        }
        acc
    }
}

/// Output of [`project_structure`].
#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T: Scalar> {
    pub sigma: Vec<DMatrix<T>>,
    /// Set when a scatter matrix had to be lifted to the eigenvalue floor.
    pub regularized: bool,
    pub iterations: usize,
}

/// Volume, orientation and shape of a covariance matrix: `Σ = λ Q diag(a) Q'`
/// with `|diag(a)| = 1` and `a` decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition<T: Scalar> {
    pub volume: T,
    pub orientation: DMatrix<T>,
    pub shape: DVector<T>,
}

pub fn decompose<T: Scalar>(sigma: &DMatrix<T>) -> Decomposition<T> {
    let d = sigma.nrows();
    let (values, vectors) = sorted_eigen(sigma);
    let log_det = values.iter().fold(T::zero(), |a, &v| a + v.ln());
    let volume = (log_det / T::of_usize(d)).exp();
    Decomposition {
        volume,
        orientation: vectors,
        shape: values / volume,
    }
}

/// The structured Gaussian criterion `Σ_g n_g [-log|Σ_g| - tr(S_g Σ_g⁻¹)]`.
pub fn structured_criterion<T: Scalar>(scatter: &ScatterSet<T>, sigma: &[DMatrix<T>]) -> Result<T> {
    let mut total = T::zero();
    for (g, s) in sigma.iter().enumerate() {
        let (inv, logdet) =
            spd_inverse_logdet(s).ok_or(Error::SingularCovariance { component: g })?;
        let trace = (&scatter.scatter[g] * inv).trace();
        total += scatter.counts[g] * (-logdet - trace);
    }
    Ok(total)
}

/// Projects raw scatter matrices onto the given structure.
pub fn project_structure<T: Scalar>(
    scatter: &ScatterSet<T>,
    structure: CovarianceStructure,
) -> Result<Projection<T>> {
    project_structure_from(scatter, structure, None)
}

/// As [`project_structure`], starting the alternating estimators from
/// `warm` (a structure-feasible set, usually the previous iterate). The
/// result then never has a lower criterion than `warm`.
pub fn project_structure_from<T: Scalar>(
    scatter: &ScatterSet<T>,
    structure: CovarianceStructure,
    warm: Option<&[DMatrix<T>]>,
) -> Result<Projection<T>> {
    let mut regularized = false;
    let floored: Vec<DMatrix<T>> = scatter
        .scatter
        .iter()
        .map(|s| match floor_eigenvalues(s, T::lit(EIGEN_FLOOR)) {
            Some(f) => {
                regularized = true;
                f
            }
            None => s.clone(),
        })
        .collect();
    let work = if regularized {
        ScatterSet {
            scatter: floored,
            counts: scatter.counts.clone(),
        }
    } else {
        scatter.clone()
    };
    let warm = warm.filter(|w| w.len() == work.groups());

    use CovarianceStructure::*;
    let (sigma, iterations) = match structure {
        VVV => (work.scatter.clone(), 0),
        EEE => {
            let pooled = work.pooled() / work.total();
            (vec![pooled; work.groups()], 0)
        }
        EII => {
            let lambda = work.pooled().trace() / (work.total() * T::of_usize(work.dim()));
            (vec![scaled_identity(work.dim(), lambda); work.groups()], 0)
        }
        VII => {
            let d = T::of_usize(work.dim());
            let sigma = work
                .scatter
                .iter()
                .map(|s| scaled_identity(work.dim(), s.trace() / d))
                .collect();
            (sigma, 0)
        }
        EEI => {
            let diag = (work.pooled() / work.total()).diagonal();
            (vec![DMatrix::from_diagonal(&diag); work.groups()], 0)
        }
        VVI => {
            let sigma = work
                .scatter
                .iter()
                .map(|s| DMatrix::from_diagonal(&s.diagonal()))
                .collect();
            (sigma, 0)
        }
        EVI => (estimate_evi(&work), 0),
        EVV => (estimate_evv(&work), 0),
        EEV => (estimate_eev(&work), 0),
        VEI => estimate_vei(&work, warm),
        VEE => estimate_vee(&work, warm),
        VEV => estimate_vev(&work, warm),
        EVE => estimate_common_orientation(&work, warm, true),
        VVE => estimate_common_orientation(&work, warm, false),
    };

    let sigma = sigma
        .into_iter()
        .map(|mut s| {
            symmetrize(&mut s);
            s
        })
        .collect::<Vec<_>>();
    for (g, s) in sigma.iter().enumerate() {
        if s.clone().cholesky().is_none() {
            return Err(Error::SingularCovariance { component: g });
        }
    }
    Ok(Projection {
        sigma,
        regularized,
        iterations,
    })
}

fn scaled_identity<T: Scalar>(d: usize, lambda: T) -> DMatrix<T> {
    DMatrix::identity(d, d) * lambda
}

/// `|diag(m)|^{1/d}` computed in log space.
fn geometric_mean<T: Scalar>(values: impl Iterator<Item = T>, d: usize) -> T {
    let log_sum = values.fold(T::zero(), |a, v| a + v.ln());
    (log_sum / T::of_usize(d)).exp()
}

fn det_root<T: Scalar>(m: &DMatrix<T>) -> T {
    let (values, _) = sorted_eigen(m);
    geometric_mean(values.iter().copied(), m.nrows())
}

fn estimate_evi<T: Scalar>(s: &ScatterSet<T>) -> Vec<DMatrix<T>> {
    let d = s.dim();
    let mut lambda = T::zero();
    let mut shapes = Vec::with_capacity(s.groups());
    for g in 0..s.groups() {
        let diag = s.weighted(g).diagonal();
        let root = geometric_mean(diag.iter().copied(), d);
        lambda += root;
        shapes.push(diag / root);
    }
    lambda /= s.total();
    shapes
        .into_iter()
        .map(|b| DMatrix::from_diagonal(&(b * lambda)))
        .collect()
}

fn estimate_evv<T: Scalar>(s: &ScatterSet<T>) -> Vec<DMatrix<T>> {
    let mut lambda = T::zero();
    let mut shapes = Vec::with_capacity(s.groups());
    for g in 0..s.groups() {
        let w = s.weighted(g);
        let root = det_root(&w);
        lambda += root;
        shapes.push(w / root);
    }
    lambda /= s.total();
    shapes.into_iter().map(|c| c * lambda).collect()
}

fn estimate_eev<T: Scalar>(s: &ScatterSet<T>) -> Vec<DMatrix<T>> {
    let d = s.dim();
    let mut omega_sum = DVector::zeros(d);
    let mut orientations = Vec::with_capacity(s.groups());
    for g in 0..s.groups() {
        let (values, vectors) = sorted_eigen(&s.weighted(g));
        omega_sum += values;
        orientations.push(vectors);
    }
    let root = geometric_mean(omega_sum.iter().copied(), d);
    let shape = &omega_sum / root;
    let lambda = root / s.total();
    let core = DMatrix::from_diagonal(&(shape * lambda));
    orientations
        .into_iter()
        .map(|q| &q * &core * q.transpose())
        .collect()
}

fn relative_change<T: Scalar>(old: T, new: T) -> T {
    (new - old).abs() / new.abs().max(T::one())
}

/// Criterion evaluated from `W_g = n_g S_g` against a diagonalized
/// `Σ_g = Q_g diag(δ_g) Q_g'`. Cheaper than inverting full matrices.
fn diag_criterion<T: Scalar>(
    s: &ScatterSet<T>,
    rotated: &[DVector<T>],
    deltas: &[DVector<T>],
) -> T {
    let mut total = T::zero();
    for g in 0..s.groups() {
        let logdet = deltas[g].iter().fold(T::zero(), |a, &v| a + v.ln());
        let trace = rotated[g]
            .iter()
            .zip(deltas[g].iter())
            .fold(T::zero(), |a, (&w, &dl)| a + w / dl);
        total += -s.counts[g] * logdet - trace;
    }
    total
}

/// `Σ_g = λ_g B` with shared diagonal `B`, `|B| = 1`.
fn estimate_vei<T: Scalar>(
    s: &ScatterSet<T>,
    warm: Option<&[DMatrix<T>]>,
) -> (Vec<DMatrix<T>>, usize) {
    let d = s.dim();
    let groups = s.groups();
    let diags: Vec<DVector<T>> = (0..groups).map(|g| s.weighted(g).diagonal()).collect();
    let mut lambdas: Vec<T> = match warm {
        Some(w) => w.iter().map(|m| geometric_mean(m.diagonal().iter().copied(), d)).collect(),
        None => (0..groups)
            .map(|g| s.scatter[g].trace() / T::of_usize(d))
            .collect(),
    };
    let mut shape = DVector::from_element(d, T::one());
    let mut previous = None;
    let mut iterations = 0;
    while iterations < MAX_INNER_ITERATIONS {
        iterations += 1;
        let mut acc = DVector::zeros(d);
        for g in 0..groups {
            acc += &diags[g] / lambdas[g];
        }
        shape = &acc / geometric_mean(acc.iter().copied(), d);
        for g in 0..groups {
            let t = diags[g]
                .iter()
                .zip(shape.iter())
                .fold(T::zero(), |a, (&w, &b)| a + w / b);
            lambdas[g] = t / (s.counts[g] * T::of_usize(d));
        }
        let deltas: Vec<DVector<T>> = lambdas.iter().map(|&l| &shape * l).collect();
        let crit = diag_criterion(s, &diags, &deltas);
        if let Some(prev) = previous {
            if relative_change(prev, crit) < T::lit(INNER_TOLERANCE) {
                break;
            }
        }
        previous = Some(crit);
    }
    let sigma = lambdas
        .iter()
        .map(|&l| DMatrix::from_diagonal(&(&shape * l)))
        .collect();
    (sigma, iterations)
}

/// `Σ_g = λ_g C` with shared `C`, `|C| = 1`.
fn estimate_vee<T: Scalar>(
    s: &ScatterSet<T>,
    warm: Option<&[DMatrix<T>]>,
) -> (Vec<DMatrix<T>>, usize) {
    let d = s.dim();
    let groups = s.groups();
    let weighted: Vec<DMatrix<T>> = (0..groups).map(|g| s.weighted(g)).collect();
    let mut lambdas: Vec<T> = match warm {
        Some(w) => w.iter().map(det_root).collect(),
        None => (0..groups)
            .map(|g| s.scatter[g].trace() / T::of_usize(d))
            .collect(),
    };
    let mut shape = DMatrix::identity(d, d);
    let mut previous = None;
    let mut iterations = 0;
    while iterations < MAX_INNER_ITERATIONS {
        iterations += 1;
        let mut acc = DMatrix::zeros(d, d);
        for g in 0..groups {
            acc += &weighted[g] / lambdas[g];
        }
        shape = &acc / det_root(&acc);
        symmetrize(&mut shape);
        let (shape_inv, _) = match spd_inverse_logdet(&shape) {
            Some(v) => v,
            None => break,
        };
        for g in 0..groups {
            lambdas[g] = (&weighted[g] * &shape_inv).trace() / (s.counts[g] * T::of_usize(d));
        }
        // |C| = 1, so the criterion only needs volumes and traces.
        let crit = (0..groups).fold(T::zero(), |a, g| {
            a - s.counts[g] * T::of_usize(d) * (lambdas[g].ln() + T::one())
        });
        if let Some(prev) = previous {
            if relative_change(prev, crit) < T::lit(INNER_TOLERANCE) {
                break;
            }
        }
        previous = Some(crit);
    }
    let sigma = lambdas.iter().map(|&l| &shape * l).collect();
    (sigma, iterations)
}

/// `Σ_g = λ_g Q_g A Q_g'`: orientations are the eigenvectors of each
/// scatter; volumes and the shared shape alternate.
fn estimate_vev<T: Scalar>(
    s: &ScatterSet<T>,
    warm: Option<&[DMatrix<T>]>,
) -> (Vec<DMatrix<T>>, usize) {
    let d = s.dim();
    let groups = s.groups();
    let mut omegas = Vec::with_capacity(groups);
    let mut orientations = Vec::with_capacity(groups);
    for g in 0..groups {
        let (values, vectors) = sorted_eigen(&s.weighted(g));
        omegas.push(values);
        orientations.push(vectors);
    }
    let mut lambdas: Vec<T> = match warm {
        Some(w) => w.iter().map(det_root).collect(),
        None => (0..groups)
            .map(|g| s.scatter[g].trace() / T::of_usize(d))
            .collect(),
    };
    let mut shape = DVector::from_element(d, T::one());
    let mut previous = None;
    let mut iterations = 0;
    while iterations < MAX_INNER_ITERATIONS {
        iterations += 1;
        let mut acc = DVector::zeros(d);
        for g in 0..groups {
            acc += &omegas[g] / lambdas[g];
        }
        shape = &acc / geometric_mean(acc.iter().copied(), d);
        for g in 0..groups {
            let t = omegas[g]
                .iter()
                .zip(shape.iter())
                .fold(T::zero(), |a, (&w, &b)| a + w / b);
            lambdas[g] = t / (s.counts[g] * T::of_usize(d));
        }
        let deltas: Vec<DVector<T>> = lambdas.iter().map(|&l| &shape * l).collect();
        let crit = diag_criterion(s, &omegas, &deltas);
        if let Some(prev) = previous {
            if relative_change(prev, crit) < T::lit(INNER_TOLERANCE) {
                break;
            }
        }
        previous = Some(crit);
    }
    let sigma = (0..groups)
        .map(|g| {
            let core = DMatrix::from_diagonal(&(&shape * lambdas[g]));
            &orientations[g] * core * orientations[g].transpose()
        })
        .collect();
    (sigma, iterations)
}

/// Shared orientation with component-specific shapes: EVE (`equal_volume`)
/// and VVE. Alternates a closed-form diagonal update with a
/// majorize-minimize step on the orientation.
fn estimate_common_orientation<T: Scalar>(
    s: &ScatterSet<T>,
    warm: Option<&[DMatrix<T>]>,
    equal_volume: bool,
) -> (Vec<DMatrix<T>>, usize) {
    let d = s.dim();
    let groups = s.groups();
    let weighted: Vec<DMatrix<T>> = (0..groups).map(|g| s.weighted(g)).collect();
    let top_eigen: Vec<T> = weighted.iter().map(|w| sorted_eigen(w).0[0]).collect();

    let diagonal_update = |q: &DMatrix<T>| -> Vec<DVector<T>> {
        let rotated: Vec<DVector<T>> = weighted
            .iter()
            .map(|w| (q.transpose() * w * q).diagonal())
            .collect();
        if equal_volume {
            let mut lambda = T::zero();
            let mut shapes = Vec::with_capacity(groups);
            for r in &rotated {
                let root = geometric_mean(r.iter().copied(), d);
                lambda += root;
                shapes.push(r / root);
            }
            lambda /= s.total();
            shapes.into_iter().map(|a| a * lambda).collect()
        } else {
            rotated
                .iter()
                .zip(&s.counts)
                .map(|(r, &n)| r / n)
                .collect()
        }
    };
    let criterion = |q: &DMatrix<T>, deltas: &[DVector<T>]| -> T {
        let rotated: Vec<DVector<T>> = weighted
            .iter()
            .map(|w| (q.transpose() * w * q).diagonal())
            .collect();
        diag_criterion(s, &rotated, deltas)
    };

    let (mut q, mut deltas) = match warm {
        Some(w) => {
            let mut sum = DMatrix::zeros(d, d);
            for m in w {
                sum += m;
            }
            let q = sorted_eigen(&sum).1;
            let deltas = w.iter().map(|m| (q.transpose() * m * &q).diagonal()).collect();
            (q, deltas)
        }
        None => {
            let q = sorted_eigen(&s.pooled()).1;
            let deltas = diagonal_update(&q);
            (q, deltas)
        }
    };

    let mut previous = criterion(&q, &deltas);
    let mut iterations = 0;
    while iterations < MAX_INNER_ITERATIONS {
        iterations += 1;
        // Orientation: majorize Σ_g tr(W_g Q D_g Q'), D_g = diag(δ_g)⁻¹.
        let mut f = DMatrix::zeros(d, d);
        for g in 0..groups {
            let shifted = &weighted[g] - DMatrix::identity(d, d) * top_eigen[g];
            let inv_delta = deltas[g].map(|v| T::one() / v);
            f += shifted * &q * DMatrix::from_diagonal(&inv_delta);
        }
        let svd = f.svd(true, true);
        if let (Some(u), Some(v_t)) = (svd.u, svd.v_t) {
            q = -(u * v_t);
        }
        deltas = diagonal_update(&q);
        let crit = criterion(&q, &deltas);
        let done = relative_change(previous, crit) < T::lit(INNER_TOLERANCE);
        previous = crit;
        if done {
            break;
        }
    }
    let sigma = deltas
        .iter()
        .map(|dl| &q * DMatrix::from_diagonal(dl) * q.transpose())
        .collect();
    (sigma, iterations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use CovarianceStructure::*;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(v))
    }

    fn sample_set() -> ScatterSet<f64> {
        ScatterSet::new(
            vec![
                DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]),
                DMatrix::from_row_slice(2, 2, &[0.5, -0.2, -0.2, 3.0]),
            ],
            vec![12.0, 30.0],
        )
        .unwrap()
    }

    #[test]
    fn vvv_returns_input_bitwise() {
        let s = sample_set();
        let p = project_structure(&s, VVV).unwrap();
        assert_eq!(p.sigma, s.scatter().to_vec());
        assert!(!p.regularized);
    }

    #[test]
    fn vii_is_trace_average() {
        let s = ScatterSet::new(vec![diag(&[2.0, 4.0])], vec![10.0]).unwrap();
        let p = project_structure(&s, VII).unwrap();
        assert!((&p.sigma[0] - diag(&[3.0, 3.0])).abs().max() < 1e-14);
    }

    #[test]
    fn eee_pools_by_size() {
        let s = ScatterSet::new(vec![diag(&[1.0, 1.0]), diag(&[3.0, 3.0])], vec![10.0, 30.0]).unwrap();
        let p = project_structure(&s, EEE).unwrap();
        for m in &p.sigma {
            assert!((m - diag(&[2.5, 2.5])).abs().max() < 1e-14);
        }
        assert_eq!(p.sigma[0], p.sigma[1]);
    }

    #[test]
    fn singular_scatter_is_regularized() {
        let s = ScatterSet::new(vec![DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])], vec![5.0]).unwrap();
        let p = project_structure(&s, VVV).unwrap();
        assert!(p.regularized);
        assert!(p.sigma[0].clone().cholesky().is_some());
    }

    #[test]
    fn rejects_bad_scatter_sets() {
        assert!(ScatterSet::new(vec![diag(&[1.0])], vec![0.0]).is_err());
        assert!(ScatterSet::new(vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])], vec![1.0]).is_err());
        assert!(ScatterSet::<f64>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn every_structure_gives_spd_output() {
        let s = sample_set();
        for st in CovarianceStructure::ALL {
            let p = project_structure(&s, st).unwrap();
            for m in &p.sigma {
                assert!(m.clone().cholesky().is_some(), "{st}");
            }
        }
    }

    #[test]
    fn warm_start_never_lowers_criterion() {
        let s = sample_set();
        for st in [VEI, VEE, VEV, EVE, VVE] {
            let cold = project_structure(&s, st).unwrap();
            // Perturb the optimum inside the feasible set: scale all volumes.
            let warm: Vec<_> = cold.sigma.iter().map(|m| m * 1.7).collect();
            let warm_crit = structured_criterion(&s, &warm).unwrap();
            let out = project_structure_from(&s, st, Some(&warm)).unwrap();
            assert!(structured_criterion(&s, &out.sigma).unwrap() >= warm_crit - 1e-12, "{st}");
        }
    }

    #[test]
    fn decomposition_reconstructs() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0]);
        let dec = decompose(&m);
        let back = &dec.orientation * DMatrix::from_diagonal(&dec.shape) * dec.orientation.transpose() * dec.volume;
        assert!((back - &m).abs().max() < 1e-12);
        assert!((dec.shape.iter().product::<f64>() - 1.0).abs() < 1e-12);
        assert!(dec.shape[0] >= dec.shape[1]);
    }
}
