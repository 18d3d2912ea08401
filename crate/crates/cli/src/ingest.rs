//! CSV ingestion.
//!
//! The header names the items. Two column names are reserved: `block`
//! (block membership, any string) and `id` (row labels). Body cells are
//! `0`, `1` or the missing token `NA`.

use std::collections::HashMap;
use std::path::Path;

use clap::ValueEnum;
use mclt::BinaryDataset;

use crate::fail::CliError;

pub const BLOCK_COLUMN: &str = "block";
pub const ID_COLUMN: &str = "id";
pub const MISSING_COLUMN: &str = "missing";
const MISSING_TOKEN: &str = "NA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MissingPolicy {
    /// Remove rows with any missing cell.
    Drop,
    /// Zero the missing cells and append a `missing` indicator column.
    Indicator,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub data: BinaryDataset,
    /// Block ids in index order, when a block column is present.
    pub block_ids: Option<Vec<String>>,
    pub dropped_rows: usize,
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions<'a> {
    /// Add the indicator column even when nothing is missing.
    pub force_indicator: bool,
    /// Resolve block ids against this list instead of numbering them.
    pub known_blocks: Option<&'a [String]>,
}

pub fn ingest_csv(path: &Path, policy: MissingPolicy, options: &IngestOptions) -> Result<Ingested, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::data(format!("cannot read header of {}: {e}", path.display())))?
        .iter()
        .map(str::to_owned)
        .collect();
    let block_col = headers.iter().position(|h| h == BLOCK_COLUMN);
    let id_col = headers.iter().position(|h| h == ID_COLUMN);
    let item_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| Some(c) != block_col && Some(c) != id_col)
        .collect();
    if item_cols.is_empty() {
        return Err(CliError::data("input has no item columns"));
    }

    let mut rows: Vec<Vec<Option<u8>>> = Vec::new();
    let mut blocks: Vec<String> = Vec::new();
    let mut ids: Vec<String> = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let line = r + 2;
        let record = record.map_err(|e| CliError::data(format!("line {line}: {e}")))?;
        if record.len() != headers.len() {
            return Err(CliError::data(format!(
                "line {line}: {} fields, header has {}",
                record.len(),
                headers.len()
            )));
        }
        let mut row = Vec::with_capacity(item_cols.len());
        for &c in &item_cols {
            let cell = &record[c];
            row.push(match cell {
                "0" => Some(0),
                "1" => Some(1),
                MISSING_TOKEN => None,
                other => {
                    return Err(CliError::data(format!(
                        "line {line}, column '{}': value '{other}' is not 0, 1 or NA",
                        headers[c]
                    )))
                }
            });
        }
        rows.push(row);
        if let Some(c) = block_col {
            blocks.push(record[c].to_owned());
        }
        ids.push(match id_col {
            Some(c) => record[c].to_owned(),
            None => (r + 1).to_string(),
        });
    }
    if rows.is_empty() {
        return Err(CliError::data("input has no data rows"));
    }

    let mut names: Vec<String> = item_cols.iter().map(|&c| headers[c].clone()).collect();
    let any_missing = rows.iter().any(|r| r.iter().any(Option::is_none));
    let mut keep = vec![true; rows.len()];
    let mut dense: Vec<Vec<u8>> = Vec::with_capacity(rows.len());
    match policy {
        MissingPolicy::Drop => {
            for (k, row) in rows.iter().enumerate() {
                if row.iter().any(Option::is_none) {
                    keep[k] = false;
                } else {
                    dense.push(row.iter().map(|v| v.unwrap_or(0)).collect());
                }
            }
            if options.force_indicator {
                dense.iter_mut().for_each(|r| r.push(0));
                names.push(MISSING_COLUMN.into());
            }
        }
        MissingPolicy::Indicator => {
            let add = any_missing || options.force_indicator;
            for row in &rows {
                let mut out: Vec<u8> = row.iter().map(|v| v.unwrap_or(0)).collect();
                if add {
                    out.push(u8::from(row.iter().any(Option::is_none)));
                }
                dense.push(out);
            }
            if add {
                names.push(MISSING_COLUMN.into());
            }
        }
    }
    let dropped_rows = keep.iter().filter(|k| !**k).count();
    if dense.is_empty() {
        return Err(CliError::data("every row has a missing value"));
    }
    let ids: Vec<String> = ids.into_iter().zip(&keep).filter(|(_, k)| **k).map(|(i, _)| i).collect();
    let blocks: Vec<String> = blocks.into_iter().zip(&keep).filter(|(_, k)| **k).map(|(b, _)| b).collect();

    let mut data = BinaryDataset::from_rows(&dense)
        .and_then(|d| d.with_row_ids(ids))
        .and_then(|d| d.with_item_names(names))
        .map_err(CliError::from)?;
    let block_ids = if block_col.is_some() {
        match options.known_blocks {
            Some(known) => {
                let index: HashMap<&str, usize> =
                    known.iter().enumerate().map(|(i, b)| (b.as_str(), i)).collect();
                let labels = blocks
                    .iter()
                    .map(|b| {
                        index
                            .get(b.as_str())
                            .copied()
                            .ok_or_else(|| CliError::data(format!("block '{b}' is not in the model")))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                data = data.with_block_count(labels, known.len()).map_err(CliError::from)?;
                Some(known.to_vec())
            }
            None => {
                let mut order: Vec<String> = Vec::new();
                let mut index: HashMap<String, usize> = HashMap::new();
                let labels: Vec<usize> = blocks
                    .iter()
                    .map(|b| {
                        *index.entry(b.clone()).or_insert_with(|| {
                            order.push(b.clone());
                            order.len() - 1
                        })
                    })
                    .collect();
                data = data.with_blocks(labels).map_err(CliError::from)?;
                Some(order)
            }
        }
    } else {
        None
    };
    Ok(Ingested {
        data,
        block_ids,
        dropped_rows,
    })
}

/// Reads one label per row from the first column of a headed CSV.
pub fn read_labels(path: &Path) -> Result<Vec<String>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::data(format!("line {}: {e}", r + 2)))?;
        let label = record
            .get(record.len().saturating_sub(1))
            .ok_or_else(|| CliError::data(format!("line {}: empty record", r + 2)))?;
        out.push(label.to_owned());
    }
    Ok(out)
}
