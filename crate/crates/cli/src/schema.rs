//! The `model.json` format.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use mclt::{BlockParams, CovarianceStructure, Model, Score};

use crate::fail::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockFile {
    pub beta: Vec<f64>,
    pub b: Vec<f64>,
    pub sigma2: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    #[serde(rename = "G")]
    pub groups: usize,
    pub d: usize,
    pub structure: String,
    pub eta: Vec<f64>,
    #[serde(rename = "W")]
    pub w: Vec<Vec<f64>>,
    pub mu: Vec<Vec<f64>>,
    #[serde(rename = "Sigma")]
    pub sigma: Vec<Vec<Vec<f64>>>,
    pub block: Option<BlockFile>,
    pub loglik_variational: Option<f64>,
    pub loglik_quadrature: Option<f64>,
    pub n_params: Option<usize>,
    pub bic: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<Vec<String>>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn matrix(rows: &[Vec<f64>], n: usize, d: usize, what: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != n || rows.iter().any(|r| r.len() != d) {
        return Err(CliError::data(format!("{what} must be {n}×{d}")));
    }
    Ok(DMatrix::from_fn(n, d, |r, c| rows[r][c]))
}

impl ModelFile {
    pub fn from_model(
        model: &Model,
        score: Option<&Score>,
        items: Option<&[String]>,
        block_ids: Option<&[String]>,
    ) -> Self {
        Self {
            groups: model.groups(),
            d: model.latent_dim(),
            structure: model.structure.to_string(),
            eta: model.eta.iter().copied().collect(),
            w: rows(&model.w),
            mu: model.mu.iter().map(|m| m.iter().copied().collect()).collect(),
            sigma: model.sigma.iter().map(rows).collect(),
            block: model.block.as_ref().map(|b| BlockFile {
                beta: b.beta.iter().copied().collect(),
                b: b.b.iter().copied().collect(),
                sigma2: b.sigma2.iter().copied().collect(),
                ids: block_ids.map(<[String]>::to_vec),
            }),
            loglik_variational: score.map(|s| s.loglik_variational),
            loglik_quadrature: score.map(|s| s.loglik_quadrature),
            n_params: score.map(|s| s.k),
            bic: score.map(|s| s.bic),
            items: items.map(<[String]>::to_vec),
        }
    }

    pub fn to_model(&self) -> Result<Model, CliError> {
        let structure: CovarianceStructure = self
            .structure
            .parse()
            .map_err(|_| CliError::data(format!("unknown structure '{}'", self.structure)))?;
        let m = self.w.len();
        let (g, d) = (self.groups, self.d);
        if self.eta.len() != g || self.mu.len() != g || self.sigma.len() != g {
            return Err(CliError::data(format!("model lists must have G = {g} entries")));
        }
        let w = matrix(&self.w, m, d, "W")?;
        let mu = self
            .mu
            .iter()
            .map(|v| {
                if v.len() == d {
                    Ok(DVector::from_column_slice(v))
                } else {
                    Err(CliError::data("mu entries must have length d"))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        let sigma = self
            .sigma
            .iter()
            .map(|s| matrix(s, d, d, "Sigma"))
            .collect::<Result<Vec<_>, _>>()?;
        let block = self.block.as_ref().map(|b| BlockParams {
            beta: DVector::from_column_slice(&b.beta),
            b: DVector::from_column_slice(&b.b),
            sigma2: DVector::from_column_slice(&b.sigma2),
        });
        let model = Model {
            w,
            eta: DVector::from_column_slice(&self.eta),
            mu,
            sigma,
            structure,
            block,
        };
        model.validate().map_err(|e| CliError::data(format!("invalid model: {e}")))?;
        Ok(model)
    }

    pub fn block_ids(&self) -> Option<Vec<String>> {
        let block = self.block.as_ref()?;
        Some(
            block
                .ids
                .clone()
                .unwrap_or_else(|| (1..=block.b.len()).map(|i| i.to_string()).collect()),
        )
    }

    pub fn has_missing_indicator(&self) -> bool {
        self.items
            .as_ref()
            .and_then(|i| i.last())
            .is_some_and(|name| name == crate::ingest::MISSING_COLUMN)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let mut model = mclt::simulate::reference_block_model(3, 5);
        model.mu[0][0] = 0.1 + 0.2;
        model.sigma[1][(0, 1)] = 1.0 / 3.0;
        model.sigma[1][(1, 0)] = 1.0 / 3.0;
        let score = Score::new(-1234.567_890_123_4, -1230.000_000_000_1, 77, 400);
        let file = ModelFile::from_model(&model, Some(&score), None, None);
        let text = serde_json::to_string_pretty(&file).unwrap();
        let back: ModelFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_model().unwrap(), model);
    }
}
