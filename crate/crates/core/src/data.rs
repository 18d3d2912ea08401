//! Binary response matrices with optional block membership.

use crate::error::{Error, Result};

/// An N×M matrix of 0/1 responses, optionally grouped into blocks of
/// repeated measurements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryDataset {
    responses: Vec<u8>,
    n_rows: usize,
    n_items: usize,
    block_of: Option<Vec<usize>>,
    n_blocks: usize,
    row_ids: Vec<String>,
    item_names: Vec<String>,
}

impl BinaryDataset {
    /// Builds a dataset from rows of 0/1 values. Row ids default to `1..=N`
    /// and item names to `x1..xM`.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n_rows = rows.len();
        if n_rows == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        let n_items = rows[0].len();
        if n_items == 0 {
            return Err(Error::Data("dataset has no items".into()));
        }
        let mut responses = Vec::with_capacity(n_rows * n_items);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n_items {
                return Err(Error::Data(format!(
                    "row {} has {} entries, expected {}",
                    r + 1,
                    row.len(),
                    n_items
                )));
            }
            for (c, &v) in row.iter().enumerate() {
                if v > 1 {
                    return Err(Error::Data(format!(
                        "non-binary value {v} at row {}, column {}",
                        r + 1,
                        c + 1
                    )));
                }
            }
            responses.extend_from_slice(row);
        }
        Ok(Self {
            responses,
            n_rows,
            n_items,
            block_of: None,
            n_blocks: 0,
            row_ids: (1..=n_rows).map(|i| i.to_string()).collect(),
            item_names: (1..=n_items).map(|i| format!("x{i}")).collect(),
        })
    }

    /// Attaches block membership. Labels are 0-based and must cover `0..I`
    /// with no gaps.
    pub fn with_blocks(self, block_of: Vec<usize>) -> Result<Self> {
        let n_blocks = block_of.iter().copied().max().map_or(0, |m| m + 1);
        let out = self.with_block_count(block_of, n_blocks)?;
        let mut seen = vec![false; n_blocks];
        for &b in out.block_of.as_deref().unwrap_or_default() {
            seen[b] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!("block {missing} has no rows")));
        }
        Ok(out)
    }

    /// Attaches block membership against a fixed block count; blocks
    /// without rows are allowed.
    pub fn with_block_count(mut self, block_of: Vec<usize>, n_blocks: usize) -> Result<Self> {
        if block_of.len() != self.n_rows {
            return Err(Error::Data(format!(
                "block labels cover {} rows, dataset has {}",
                block_of.len(),
                self.n_rows
            )));
        }
        if let Some(&b) = block_of.iter().find(|&&b| b >= n_blocks) {
            return Err(Error::Data(format!("block label {b} is out of range")));
        }
        self.block_of = Some(block_of);
        self.n_blocks = n_blocks;
        Ok(self)
    }

    pub fn with_row_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.n_rows {
            return Err(Error::Data("row id count does not match rows".into()));
        }
        self.row_ids = ids;
        Ok(self)
    }

    pub fn with_item_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_items {
            return Err(Error::Data("item name count does not match columns".into()));
        }
        self.item_names = names;
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    #[inline]
    pub fn row(&self, n: usize) -> &[u8] {
        &self.responses[n * self.n_items..(n + 1) * self.n_items]
    }

    #[inline]
    pub fn get(&self, n: usize, m: usize) -> u8 {
        self.responses[n * self.n_items + m]
    }

    pub fn block_of(&self) -> Option<&[usize]> {
        self.block_of.as_deref()
    }

    /// Number of distinct blocks (0 when no block labels are attached).
    pub fn n_blocks(&self) -> usize {
        self.n_blocks
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn item_names(&self) -> &[String] {
        &self.item_names
    }

    /// Fraction of ones per item.
    pub fn item_means(&self) -> Vec<f64> {
        let mut sums = vec![0usize; self.n_items];
        for n in 0..self.n_rows {
            for (m, &v) in self.row(n).iter().enumerate() {
                sums[m] += v as usize;
            }
        }
        sums.into_iter()
            .map(|s| s as f64 / self.n_rows as f64)
            .collect()
    }
}
