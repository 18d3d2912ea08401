use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{json, Value};

use mclt::selection::{classification_table, run_grid, score_fit, GridSpec};
use mclt::simulate::{
    align_estimates, generate, reference_block_model, reference_two_group_model, Alignment,
    SimulationSpec,
};
use mclt::vem::FitDiagnostics;
use mclt::{
    adjusted_rand_index, fit, fit_block, project, BinaryDataset, BlockOptions, Fit, FitOptions,
    Model, ModelConfig,
};

use crate::args::{
    parse_counts, parse_structures, DataArgs, EvaluateArgs, FitArgs, FitControl, GridArgs,
    ProjectArgs, SimulateArgs,
};
use crate::fail::CliError;
use crate::ingest::{ingest_csv, read_labels, IngestOptions, Ingested, BLOCK_COLUMN, ID_COLUMN};
use crate::output::{num, prepare_dir, write_json, Table};
use crate::schema::ModelFile;

fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn fit_options(control: &FitControl) -> FitOptions {
    FitOptions {
        starts: control.starts,
        seed: control.seed,
        stopping: control.stop.into(),
        max_iterations: control.max_iter,
        ..FitOptions::default()
    }
}

fn block_options(control: &FitControl) -> BlockOptions<f64> {
    BlockOptions {
        freeze_beta: control.freeze_beta,
        ..BlockOptions::default()
    }
}

fn load_data(args: &DataArgs) -> Result<Ingested, CliError> {
    let ingested = ingest_csv(&args.input, args.missing, &IngestOptions::default())?;
    if args.block && ingested.block_ids.is_none() {
        return Err(CliError::data(format!(
            "--block needs a '{BLOCK_COLUMN}' column in {}",
            args.input.display()
        )));
    }
    Ok(ingested)
}

fn load_model(path: &Path) -> Result<ModelFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::data(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::data(format!("{} is not a model file: {e}", path.display())))
}

/// Reads data for an existing model, matching its item layout and blocks.
fn load_for_model(file: &ModelFile, input: &Path, args_missing: crate::ingest::MissingPolicy) -> Result<Ingested, CliError> {
    let known = file.block_ids();
    let options = IngestOptions {
        force_indicator: file.has_missing_indicator(),
        known_blocks: known.as_deref(),
    };
    let ingested = ingest_csv(input, args_missing, &options)?;
    if ingested.data.n_items() != file.w.len() {
        return Err(CliError::data(format!(
            "input has {} items, model has {}",
            ingested.data.n_items(),
            file.w.len()
        )));
    }
    if file.block.is_some() && ingested.block_ids.is_none() {
        return Err(CliError::data(format!("model has block effects; input needs a '{BLOCK_COLUMN}' column")));
    }
    Ok(ingested)
}

fn diagnostics_json(d: &FitDiagnostics<f64>, dropped_rows: usize) -> Value {
    json!({
        "timestamp": timestamp(),
        "iterations": d.iterations,
        "converged": d.converged,
        "seed": d.seed,
        "start_index": d.start_index,
        "regularized": d.regularized,
        "dropped_rows": dropped_rows,
        "loglik_trace": d.loglik_trace,
        "aitken_trace": d.aitken_trace,
        "failed_starts": d.failed_starts.iter().map(|(s, m)| json!({"start": s, "message": m})).collect::<Vec<_>>(),
    })
}

fn run_fit(data: &BinaryDataset, config: &ModelConfig, control: &FitControl) -> Result<Fit, CliError> {
    let options = fit_options(control);
    let fitted = if config.block_effect {
        fit_block(data, config, &options, &block_options(control))?
    } else {
        fit(data, config, &options)?
    };
    Ok(fitted)
}

pub fn fit_cmd(args: &FitArgs) -> Result<(), CliError> {
    let ingested = load_data(&args.data)?;
    let data = &ingested.data;
    let config = ModelConfig::new(args.groups, args.latent_dim, args.structure).with_block_effect(args.data.block);
    config.validate(data.n_items()).map_err(|e| CliError::usage(e.to_string()))?;
    let fitted = run_fit(data, &config, &args.control)?;
    let score = score_fit(&fitted, data, args.control.gh_nodes)?;
    prepare_dir(&args.out)?;
    let file = ModelFile::from_model(
        &fitted.model,
        Some(&score),
        Some(data.item_names()),
        ingested.block_ids.as_deref(),
    );
    write_json(&args.out.join("model.json"), &file)?;
    write_json(
        &args.out.join("diagnostics.json"),
        &diagnostics_json(&fitted.diagnostics, ingested.dropped_rows),
    )
}

pub fn grid_cmd(args: &GridArgs) -> Result<(), CliError> {
    let groups = parse_counts(&args.groups).map_err(CliError::usage)?;
    let latent_dims = parse_counts(&args.latent_dim).map_err(CliError::usage)?;
    let structures = parse_structures(&args.structure).map_err(CliError::usage)?;
    let ingested = load_data(&args.data)?;
    let data = &ingested.data;
    let reference = match &args.labels {
        Some(p) => {
            let labels = read_labels(p)?;
            if labels.len() != data.n_rows() {
                return Err(CliError::data(format!(
                    "{} labels for {} rows",
                    labels.len(),
                    data.n_rows()
                )));
            }
            let mut distinct = labels.clone();
            distinct.sort();
            distinct.dedup();
            Some(
                labels
                    .iter()
                    .map(|l| distinct.binary_search(l).unwrap())
                    .collect::<Vec<usize>>(),
            )
        }
        None => None,
    };
    let spec = GridSpec {
        groups,
        latent_dims,
        structures,
        block_effect: args.data.block,
        gh_nodes: args.control.gh_nodes,
        fit: fit_options(&args.control),
        block: block_options(&args.control),
        parallel_rows: true,
    };
    for config in spec.configs() {
        config.validate(data.n_items()).map_err(|e| CliError::usage(e.to_string()))?;
    }
    let result = run_grid(data, &spec, reference.as_deref())?;

    let mut header = vec!["G", "d", "structure", "loglik_var", "loglik_gh", "k", "BIC", "converged"];
    if reference.is_some() {
        header.push("ari");
    }
    let mut table = Table::new(&header)?;
    let mut rows_json = Vec::new();
    for row in &result.rows {
        let c = &row.config;
        let mut fields = vec![c.groups.to_string(), c.latent_dim.to_string(), c.structure.to_string()];
        match &row.outcome {
            Ok(f) => {
                fields.extend([
                    num(f.score.loglik_variational),
                    num(f.score.loglik_quadrature),
                    f.score.k.to_string(),
                    num(f.score.bic),
                    f.fit.diagnostics.converged.to_string(),
                ]);
                if let Some(a) = f.ari {
                    fields.push(num(a));
                }
                rows_json.push(json!({
                    "G": c.groups, "d": c.latent_dim, "structure": c.structure.to_string(),
                    "seed": row.seed, "iterations": f.fit.diagnostics.iterations,
                    "converged": f.fit.diagnostics.converged,
                    "failed_starts": f.fit.diagnostics.failed_starts.len(),
                }));
            }
            Err(message) => {
                fields.extend(["NA", "NA", "NA", "NA", "false"].map(String::from));
                if reference.is_some() {
                    fields.push("NA".into());
                }
                rows_json.push(json!({
                    "G": c.groups, "d": c.latent_dim, "structure": c.structure.to_string(),
                    "seed": row.seed, "error": message,
                }));
            }
        }
        table.row(&fields)?;
    }
    prepare_dir(&args.out)?;
    table.save(&args.out.join("grid.csv"))?;
    let Some(best) = result.best_fit() else {
        write_json(&args.out.join("diagnostics.json"), &json!({"timestamp": timestamp(), "rows": rows_json}))?;
        return Err(CliError::numerical("every configuration in the grid failed"));
    };
    let file = ModelFile::from_model(
        &best.fit.model,
        Some(&best.score),
        Some(data.item_names()),
        ingested.block_ids.as_deref(),
    );
    write_json(&args.out.join("model.json"), &file)?;
    let mut diag = diagnostics_json(&best.fit.diagnostics, ingested.dropped_rows);
    diag["rows"] = Value::Array(rows_json);
    diag["best_row"] = json!(result.best);
    write_json(&args.out.join("diagnostics.json"), &diag)
}

pub fn simulate_cmd(args: &SimulateArgs) -> Result<(), CliError> {
    let model = match &args.model {
        Some(p) => load_model(p)?.to_model()?,
        None => match args.blocks {
            Some(i) => reference_block_model(i, args.seed),
            None => reference_two_group_model(),
        },
    };
    let spec = match (args.blocks, &model.block) {
        (Some(i), Some(b)) => {
            if b.b.len() != i {
                return Err(CliError::usage(format!("model has {} blocks, --blocks is {i}", b.b.len())));
            }
            SimulationSpec::blocked(model.clone(), i, args.per_block, args.seed)
        }
        (None, None) => SimulationSpec::flat(model.clone(), args.n, args.seed),
        (Some(_), None) => return Err(CliError::usage("--blocks needs a model with block effects")),
        (None, Some(_)) => return Err(CliError::usage("a block model needs --blocks")),
    };
    let sim = generate(&spec)?;
    let m = model.n_items();
    let blocked = spec.blocks.is_some();
    let mut header = vec![ID_COLUMN.to_string()];
    if blocked {
        header.push(BLOCK_COLUMN.into());
    }
    let items: Vec<String> = (1..=m).map(|j| format!("x{j}")).collect();
    header.extend(items.iter().cloned());
    let mut data = Table::new(&header)?;
    let mut labels = Table::new([ID_COLUMN, "component"])?;
    for r in 0..sim.data.n_rows() {
        let id = (r + 1).to_string();
        let mut fields = vec![id.clone()];
        if let Some(b) = sim.data.block_of() {
            fields.push((b[r] + 1).to_string());
        }
        fields.extend(sim.data.row(r).iter().map(u8::to_string));
        data.row(&fields)?;
        labels.row([id, (sim.labels[r] + 1).to_string()])?;
    }
    prepare_dir(&args.out)?;
    data.save(&args.out.join("data.csv"))?;
    labels.save(&args.out.join("labels.csv"))?;
    let block_ids: Option<Vec<String>> =
        model.block.as_ref().map(|b| (1..=b.b.len()).map(|i| i.to_string()).collect());
    let file = ModelFile::from_model(&model, None, Some(&items), block_ids.as_deref());
    write_json(&args.out.join("model.json"), &file)
}

fn matrix_json(m: &nalgebra::DMatrix<f64>) -> Value {
    json!((0..m.nrows()).map(|r| m.row(r).iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>())
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<(), CliError> {
    let file = load_model(&args.model)?;
    let model = file.to_model()?;
    let ingested = load_for_model(&file, &args.input, args.missing)?;
    let (projection, _) = project(&model, &ingested.data)?;
    let predicted: Vec<usize> = projection.hard_label.iter().map(|g| g + 1).collect();
    let mut report = json!({
        "n": ingested.data.n_rows(),
        "dropped_rows": ingested.dropped_rows,
        "component_sizes": (0..model.groups())
            .map(|g| predicted.iter().filter(|&&p| p == g + 1).count())
            .collect::<Vec<_>>(),
    });
    if let Some(p) = &args.labels {
        let labels = read_labels(p)?;
        if labels.len() != predicted.len() {
            return Err(CliError::data(format!(
                "{} labels for {} rows",
                labels.len(),
                predicted.len()
            )));
        }
        let ari = adjusted_rand_index(&predicted, &labels)?;
        let table = classification_table(&predicted, &labels)?;
        report["ari"] = json!(ari);
        report["classification"] = json!({
            "predicted": table.row_labels,
            "reference": table.col_labels,
            "counts": table.counts,
        });
    }
    if let Some(p) = &args.truth {
        let truth: Model = load_model(p)?.to_model()?;
        let alignment = if args.linear_gauge {
            Alignment::Linear
        } else {
            Alignment::Orthogonal
        };
        let aligned = align_estimates(&model, &truth, alignment)?;
        let sq_w = (&aligned.model.w - &truth.w).map(|v| v * v);
        let sq_mu = nalgebra::DMatrix::from_fn(truth.groups(), truth.latent_dim(), |g, k| {
            (aligned.model.mu[g][k] - truth.mu[g][k]).powi(2)
        });
        report["alignment"] = json!(if args.linear_gauge { "linear" } else { "orthogonal" });
        report["permutation"] = json!(aligned.permutation.iter().map(|g| g + 1).collect::<Vec<_>>());
        report["mse_w"] = json!(sq_w.mean());
        report["mse_mu"] = json!(sq_mu.mean());
        report["sq_err_mu"] = matrix_json(&sq_mu);
    }
    prepare_dir(&args.out)?;
    write_json(&args.out.join("report.json"), &report)
}

pub fn project_cmd(args: &ProjectArgs) -> Result<(), CliError> {
    let file = load_model(&args.model)?;
    let model = file.to_model()?;
    let ingested = load_for_model(&file, &args.input, args.missing)?;
    let data = &ingested.data;
    let (projection, _) = project(&model, data)?;
    let d = model.latent_dim();
    let g = model.groups();
    let mut header = vec!["row_id".to_string()];
    header.extend((1..=d).map(|k| format!("y{k}")));
    header.extend((1..=g).map(|k| format!("p{k}")));
    header.push("hard_label".into());
    let mut table = Table::new(&header)?;
    for r in 0..data.n_rows() {
        let mut fields = vec![data.row_ids()[r].clone()];
        fields.extend(projection.coords.row(r).iter().map(|&v| num(v)));
        fields.extend(projection.responsibilities.row(r).iter().map(|&v| num(v)));
        fields.push((projection.hard_label[r] + 1).to_string());
        table.row(&fields)?;
    }
    prepare_dir(&args.out)?;
    table.save(&args.out.join("projection.csv"))
}
