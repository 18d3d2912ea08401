//! Model types, response functions and free-parameter accounting.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::{logistic, Scalar};

/// Whether a covariance factor is shared (`Equal`), component-specific
/// (`Variable`) or fixed to the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    Equal,
    Variable,
    Identity,
}

/// The fourteen eigen-decomposition constraints on the component
/// covariances `Σ_g = λ_g Q_g A_g Q_g'`, in the conventional table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CovarianceStructure {
    EEE,
    VEE,
    EVE,
    VVE,
    EEV,
    VEV,
    EVV,
    VVV,
    EEI,
    VEI,
    EVI,
    VVI,
    EII,
    VII,
}

impl CovarianceStructure {
    pub const ALL: [CovarianceStructure; 14] = [
        Self::EEE,
        Self::VEE,
        Self::EVE,
        Self::VVE,
        Self::EEV,
        Self::VEV,
        Self::EVV,
        Self::VVV,
        Self::EEI,
        Self::VEI,
        Self::EVI,
        Self::VVI,
        Self::EII,
        Self::VII,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::EEE => "EEE",
            Self::VEE => "VEE",
            Self::EVE => "EVE",
            Self::VVE => "VVE",
            Self::EEV => "EEV",
            Self::VEV => "VEV",
            Self::EVV => "EVV",
            Self::VVV => "VVV",
            Self::EEI => "EEI",
            Self::VEI => "VEI",
            Self::EVI => "EVI",
            Self::VVI => "VVI",
            Self::EII => "EII",
            Self::VII => "VII",
        }
    }

    fn letter(c: u8) -> Factor {
        match c {
            b'E' => Factor::Equal,
            b'V' => Factor::Variable,
            _ => Factor::Identity,
        }
    }

    /// Volume factor λ: never the identity.
    pub fn volume(self) -> Factor {
        Self::letter(self.as_str().as_bytes()[0])
    }

    /// Shape factor A.
    pub fn shape(self) -> Factor {
        Self::letter(self.as_str().as_bytes()[1])
    }

    /// Orientation factor Q. `Identity` means axis-aligned.
    pub fn orientation(self) -> Factor {
        Self::letter(self.as_str().as_bytes()[2])
    }

    /// True when the constraint keeps Σ_g diagonal (orientation fixed to
    /// the coordinate axes) but not spherical.
    pub fn is_axis_aligned(self) -> bool {
        self.orientation() == Factor::Identity && self.shape() != Factor::Identity
    }

    /// Number of free covariance parameters, before the common terms.
    fn covariance_parameters(self, g: i64, d: i64) -> i64 {
        let full = d * (d + 1) / 2;
        match self {
            Self::EEE => full,
            Self::VEE => full + g - 1,
            Self::EVE => full + (g - 1) * (d - 1),
            Self::VVE => full + (g - 1) * d,
            Self::EEV => g * full - (g - 1) * d,
            Self::VEV => g * full - (g - 1) * (d - 1),
            Self::EVV => g * full - (g - 1),
            Self::VVV => g * full,
            Self::EEI => d,
            Self::VEI => g + d - 1,
            Self::EVI => g * d - g + 1,
            Self::VVI => g * d,
            Self::EII => 1,
            Self::VII => g,
        }
    }
}

impl fmt::Display for CovarianceStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CovarianceStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let upper = s.trim().to_ascii_uppercase();
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == upper)
            .ok_or_else(|| Error::Config(format!("unknown covariance structure '{s}'")))
    }
}

/// Dimensions and constraint of a model to be fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub groups: usize,
    pub latent_dim: usize,
    pub structure: CovarianceStructure,
    pub block_effect: bool,
}

impl ModelConfig {
    pub fn new(groups: usize, latent_dim: usize, structure: CovarianceStructure) -> Self {
        Self {
            groups,
            latent_dim,
            structure,
            block_effect: false,
        }
    }

    pub fn with_block_effect(mut self, on: bool) -> Self {
        self.block_effect = on;
        self
    }

    /// Checks the configuration against a dataset with `n_items` columns.
    pub fn validate(&self, n_items: usize) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::Config("G must be at least 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("d must be at least 1".into()));
        }
        if self.latent_dim > n_items {
            return Err(Error::Config(format!(
                "latent dimension {} exceeds item count {}",
                self.latent_dim, n_items
            )));
        }
        Ok(())
    }
}

/// Number of free parameters of a fitted model. `n_blocks` only matters
/// when `config.block_effect` is set; the block variant adds one loading per
/// item plus a mean and a variance per block.
pub fn count_free_parameters(config: &ModelConfig, n_items: usize, n_blocks: usize) -> usize {
    let g = config.groups as i64;
    let d = config.latent_dim as i64;
    let m = n_items as i64;
    let mut k = g - 1 + d * (m + g) + config.structure.covariance_parameters(g, d) - d * d;
    if config.block_effect {
        k += m + 2 * n_blocks as i64;
    }
    k.max(0) as usize
}

/// Block-effect hyperparameters: item loadings on the blocking variate and
/// the per-block Gaussian `s ~ N(b_i, σ_i²)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T: Scalar> {
    pub beta: DVector<T>,
    pub b: DVector<T>,
    pub sigma2: DVector<T>,
}

impl<T: Scalar> BlockParams<T> {
    pub fn n_blocks(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self, n_items: usize) -> Result<()> {
        if self.beta.len() != n_items {
            return Err(Error::Dimension(format!(
                "beta has {} entries, expected {}",
                self.beta.len(),
                n_items
            )));
        }
        if self.b.len() != self.sigma2.len() || self.b.is_empty() {
            return Err(Error::Dimension("block means and variances differ in length".into()));
        }
        if self.sigma2.iter().any(|&s| !(s > T::zero())) {
            return Err(Error::Config("block variances must be positive".into()));
        }
        Ok(())
    }
}

/// A mixture of common-slope latent trait models.
///
/// `w` is M×d and shared by all components; component `g` has latent prior
/// `N(mu[g], sigma[g])` and weight `eta[g]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MclmModel<T: Scalar> {
    pub w: DMatrix<T>,
    pub eta: DVector<T>,
    pub mu: Vec<DVector<T>>,
    pub sigma: Vec<DMatrix<T>>,
    pub structure: CovarianceStructure,
    pub block: Option<BlockParams<T>>,
}

impl<T: Scalar> MclmModel<T> {
    pub fn groups(&self) -> usize {
        self.eta.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_items(&self) -> usize {
        self.w.nrows()
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            groups: self.groups(),
            latent_dim: self.latent_dim(),
            structure: self.structure,
            block_effect: self.block.is_some(),
        }
    }

    /// Slope vector of item `m`.
    pub fn slope(&self, m: usize) -> DVector<T> {
        self.w.row(m).transpose()
    }

    /// Checks weights, dimensions and positive-definiteness.
    pub fn validate(&self) -> Result<()> {
        let g = self.groups();
        let d = self.latent_dim();
        if g == 0 || d == 0 || self.n_items() == 0 {
            return Err(Error::Dimension("empty model".into()));
        }
        if self.mu.len() != g || self.sigma.len() != g {
            return Err(Error::Dimension(format!(
                "expected {g} component means and covariances"
            )));
        }
        let total = self.eta.iter().fold(T::zero(), |a, &b| a + b);
        if (total - T::one()).abs() > T::lit(1e-6) || self.eta.iter().any(|&e| !(e > T::zero())) {
            return Err(Error::Config("mixing weights must be positive and sum to 1".into()));
        }
        for (k, (mu, sigma)) in self.mu.iter().zip(&self.sigma).enumerate() {
            if mu.len() != d || sigma.nrows() != d || sigma.ncols() != d {
                return Err(Error::Dimension(format!("component {k} has wrong dimension")));
            }
            let asym = (sigma - sigma.transpose()).abs().max();
            if asym > T::lit(1e-8) * sigma.abs().max().max(T::one()) {
                return Err(Error::Config(format!("covariance {k} is not symmetric")));
            }
            if sigma.clone().cholesky().is_none() {
                return Err(Error::SingularCovariance { component: k });
            }
        }
        if let Some(block) = &self.block {
            block.validate(self.n_items())?;
        }
        Ok(())
    }

    /// Converts to another float width.
    pub fn cast<U: Scalar>(&self) -> MclmModel<U> {
        let c = |x: &T| U::lit(x.as_f64());
        MclmModel {
            w: self.w.map(|x| c(&x)),
            eta: self.eta.map(|x| c(&x)),
            mu: self.mu.iter().map(|v| v.map(|x| c(&x))).collect(),
            sigma: self.sigma.iter().map(|s| s.map(|x| c(&x))).collect(),
            structure: self.structure,
            block: self.block.as_ref().map(|b| BlockParams {
                beta: b.beta.map(|x| c(&x)),
                b: b.b.map(|x| c(&x)),
                sigma2: b.sigma2.map(|x| c(&x)),
            }),
        }
    }

    /// Applies the gauge transform `y -> T y`: `W -> W T⁻¹`, `μ -> T μ`,
    /// `Σ -> T Σ T'`. The marginal likelihood is unchanged.
    pub fn gauge_transform(&self, t: &DMatrix<T>) -> Result<Self> {
        let d = self.latent_dim();
        if t.nrows() != d || t.ncols() != d {
            return Err(Error::Dimension("gauge transform must be d×d".into()));
        }
        let t_inv = t
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Config("gauge transform is singular".into()))?;
        let mut out = self.clone();
        out.w = &self.w * &t_inv;
        out.mu = self.mu.iter().map(|m| t * m).collect();
        out.sigma = self
            .sigma
            .iter()
            .map(|s| {
                let mut r = t * s * t.transpose();
                crate::linalg::symmetrize(&mut r);
                r
            })
            .collect();
        Ok(out)
    }

    /// Reorders components: new component `k` is old component `perm[k]`.
    pub fn permute_components(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        out.eta = DVector::from_iterator(perm.len(), perm.iter().map(|&k| self.eta[k]));
        out.mu = perm.iter().map(|&k| self.mu[k].clone()).collect();
        out.sigma = perm.iter().map(|&k| self.sigma[k].clone()).collect();
        out
    }
}

/// Posterior summaries of each observation under a fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentProjection<T: Scalar> {
    /// N×d responsibility-weighted posterior means of the latent trait.
    pub coords: DMatrix<T>,
    pub hard_label: Vec<usize>,
    /// N×G membership probabilities.
    pub responsibilities: DMatrix<T>,
}

impl<T: Scalar> LatentProjection<T> {
    pub fn new(coords: DMatrix<T>, responsibilities: DMatrix<T>) -> Self {
        let hard_label = hard_labels(&responsibilities);
        Self {
            coords,
            hard_label,
            responsibilities,
        }
    }
}

/// Row-wise argmax, ties going to the lowest component index.
pub fn hard_labels<T: Scalar>(z: &DMatrix<T>) -> Vec<usize> {
    (0..z.nrows())
        .map(|n| {
            let mut best = 0;
            for g in 1..z.ncols() {
                if z[(n, g)] > z[(n, best)] {
                    best = g;
                }
            }
            best
        })
        .collect()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y))
}

/// Probability of a positive response given slope `w_m` and latent
/// position `y`.
pub fn response_probability<T: Scalar>(w_m: &[T], y: &[T]) -> Result<T> {
    Ok(logistic(dot(w_m, y)?))
}

/// Positive-response probability of the median member of a component: the
/// response function at the component's latent mean.
pub fn median_response<T: Scalar>(w_m: &[T], mu_g: &[T]) -> Result<T> {
    response_probability(w_m, mu_g)
}

/// Median response averaged over blocks, each block shifting the linear
/// predictor by `beta_m * b_i`.
pub fn block_adjusted_median_response<T: Scalar>(
    w_m: &[T],
    mu_g: &[T],
    beta_m: T,
    b: &[T],
) -> Result<T> {
    if b.is_empty() {
        return Err(Error::Dimension("block list is empty".into()));
    }
    let base = dot(w_m, mu_g)?;
    let total = b
        .iter()
        .fold(T::zero(), |acc, &bi| acc + logistic(base + beta_m * bi));
    Ok(total / T::of_usize(b.len()))
}
