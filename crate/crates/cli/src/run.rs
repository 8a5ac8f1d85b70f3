use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use sparsenas::bilevel::metrics_csv;
use sparsenas::supernet::{
    derive_architecture, export_arch_json, export_dot, export_heatmap_csv, export_supernet_json, parse_arch_json,
    parse_supernet_json, read_text, write_text,
};
use sparsenas::tasks::{nas_search, prepare, pruning_csv, pruning_experiment, retrain_derived};

use crate::config::RunConfig;
use crate::error::CliError;

pub const SNAPSHOT: &str = "config.toml";

fn write(out: &Path, name: &str, contents: &str, written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let path = out.join(name);
    write_text(&path, contents)?;
    written.push(path);
    Ok(())
}

fn snapshot(cfg: &RunConfig, written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    write(&cfg.out, SNAPSHOT, &cfg.to_toml()?, written)
}

fn read_input(path: &Path) -> Result<String, CliError> {
    read_text(path).map_err(|e| CliError::Config(e.to_string()))
}

/// Supernet search. Writes the full architecture weights, the derived cell
/// as DOT, a weight heatmap and the per-epoch metrics.
pub fn search(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    let dataset = cfg.dataset()?;
    snapshot(cfg, &mut written)?;
    let nas = cfg.nas();
    let (result, _, _) = nas_search(&nas, &dataset)?;
    info!(
        "search finished: val_acc {:.4}, {} of {} weights nonzero",
        result.final_val_acc(),
        result.arch.values().iter().filter(|v| **v != 0.0).count(),
        result.arch.len()
    );
    write(&cfg.out, "arch.json", &export_supernet_json(&cfg.cell, &result.arch), &mut written)?;
    write(&cfg.out, "heatmap.csv", &export_heatmap_csv(&result.arch, &cfg.cell), &mut written)?;
    write(&cfg.out, "metrics.csv", &metrics_csv(&result.log), &mut written)?;
    let derived = derive_architecture(&cfg.cell, &result.arch, nas.threshold)?;
    write(&cfg.out, "arch.dot", &export_dot(&derived), &mut written)?;
    Ok(written)
}

/// Penalised MLP training over the λ × optimizer × penalty grid.
pub fn prune(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    let dataset = cfg.dataset()?;
    snapshot(cfg, &mut written)?;
    let rows = pruning_experiment(&cfg.pruning(), &dataset)?;
    for r in rows.iter().filter(|r| !r.ok()) {
        warn!(
            "cell lambda={} optimizer={} penalty={} failed: {}",
            r.lambda,
            r.optimizer,
            r.penalty,
            r.failure.as_deref().unwrap_or("")
        );
    }
    write(&cfg.out, "pruning.csv", &pruning_csv(&rows), &mut written)?;
    Ok(written)
}

/// Derives a cell from saved architecture weights. No randomness involved.
pub fn derive(cfg: &RunConfig, weights: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    let (cell, arch) = parse_supernet_json(&read_input(weights)?, cfg.cell.feature_dim)
        .map_err(|e| CliError::Config(format!("{}: {e}", weights.display())))?;
    snapshot(cfg, &mut written)?;
    let derived = derive_architecture(&cell, &arch, cfg.derive.threshold)?;
    info!("kept {} of {} operations", derived.num_ops(), arch.len());
    write(&cfg.out, "derived.json", &export_arch_json(&derived), &mut written)?;
    write(&cfg.out, "derived.dot", &export_dot(&derived), &mut written)?;
    Ok(written)
}

#[derive(Serialize)]
struct RetrainReport {
    test_accuracy: f64,
    operations: usize,
    active_nodes: usize,
    train_rows: usize,
    test_rows: usize,
    epochs: usize,
    seed: u64,
}

/// Trains a derived cell from scratch on train + val and scores it on test.
pub fn retrain(cfg: &RunConfig, arch_path: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    let arch = parse_arch_json(&read_input(arch_path)?).map_err(|e| match e {
        sparsenas::Error::DegenerateArchitecture(_) => CliError::Degenerate(format!("{}: {e}", arch_path.display())),
        other => CliError::Config(format!("{}: {other}", arch_path.display())),
    })?;
    let dataset = cfg.dataset()?;
    snapshot(cfg, &mut written)?;
    let (data, splits) = prepare(&cfg.nas(), &dataset)?;
    let train = splits.train_and_val();
    let acc = retrain_derived(
        &arch,
        cfg.cell.feature_dim,
        cfg.cell.output,
        &data,
        &train,
        &splits.test,
        &cfg.retrain,
        cfg.seed,
    )?;
    info!("test accuracy {acc:.4}");
    let report = RetrainReport {
        test_accuracy: acc,
        operations: arch.num_ops(),
        active_nodes: arch.active_nodes.len(),
        train_rows: train.len(),
        test_rows: splits.test.len(),
        epochs: cfg.retrain.epochs,
        seed: cfg.seed,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Internal(e.to_string()))?;
    write(&cfg.out, "retrain.json", &json, &mut written)?;
    Ok(written)
}
