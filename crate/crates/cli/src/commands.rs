use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::Serialize;
use stum::checkpoint;
use stum::data::io::{write_edges_csv, write_flatbin};
use stum::data::{load_dataset, synth_generate, FrameSeries, LoadOptions};
use stum::eval::{self, EvalReport};
use stum::gradcheck;
use stum::model::{Stum, StumConfig};
use stum::trainer::{self, DataSplits, EpochRecord};
use stum::StumError;

use crate::config::RunConfig;

/// Loads the configured series (or generates the synthetic fixture) and
/// adopts its node and channel counts into the model configuration.
pub fn load_data(cfg: &mut RunConfig) -> Result<DataSplits> {
    let (series, graph) = match &cfg.data.path {
        Some(path) => {
            if !path.exists() {
                bail!("data file not found: {}", path.display());
            }
            if let Some(g) = &cfg.data.graph {
                if !g.exists() {
                    bail!("graph file not found: {}", g.display());
                }
            }
            let opts = LoadOptions {
                channels: cfg.data.channels,
                interval_minutes: cfg.data.interval_minutes,
                expected_nodes: cfg.data.expected_nodes,
                expected_frames: cfg.data.expected_frames,
            };
            load_dataset(path, cfg.data.graph.as_deref(), cfg.data.format, &opts)
                .with_context(|| format!("loading {}", path.display()))?
        }
        None => {
            let (series, graph) = synth_generate(&cfg.synth)?;
            (series, Some(graph))
        }
    };
    adopt_shape(&mut cfg.model, &series);
    if cfg.model.backbone.uses_adjacency() && graph.is_none() {
        return Err(StumError::MissingGraph).context("set data.graph to an edge list");
    }
    Ok(trainer::prepare(&series, graph)?)
}

fn adopt_shape(model: &mut StumConfig, series: &FrameSeries) {
    if model.num_nodes != series.nodes() || model.in_channels != series.channels() {
        log::info!(
            "model shape follows the data: {} nodes, {} channels",
            series.nodes(),
            series.channels()
        );
        model.num_nodes = series.nodes();
        model.in_channels = series.channels();
    }
}

fn print_report(title: &str, report: &EvalReport) {
    println!("{title} ({} windows)", report.windows);
    println!("{:>8} {:>12} {:>12} {:>10}", "horizon", "MAE", "RMSE", "MAPE%");
    for row in &report.rows {
        let m = row.metrics;
        println!(
            "{:>8} {:>12.4} {:>12.4} {:>10.3}",
            row.horizon,
            m.mae,
            m.rmse,
            100.0 * m.mape
        );
    }
}

fn progress(record: &EpochRecord, improved: bool) {
    eprintln!(
        "epoch {:>4}  train_mae {:>10.4}  val_mae {:>10.4}{}",
        record.epoch,
        record.train_mae,
        record.val_mae,
        if improved { "  *" } else { "" }
    );
}

pub fn train(mut cfg: RunConfig) -> Result<()> {
    let data = load_data(&mut cfg)?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    let out = cfg.out_dir.clone();
    cfg.write_resolved(&out)?;

    let model = Stum::new(cfg.model.clone())?;
    let report = model.param_report();
    eprintln!(
        "training: {} trainable, {} frozen parameters",
        report.trainable, report.frozen
    );
    let outcome = trainer::train_with_hook(model, &data, &cfg.train, &mut progress)?;
    outcome.history.write_csv(&out.join("history.csv"))?;
    checkpoint::save(&outcome.model, &out.join("checkpoint"), Some(outcome.best_val_mae))?;
    println!(
        "best val MAE {:.4} at epoch {} ({} steps)",
        outcome.best_val_mae, outcome.history.best_epoch, outcome.steps
    );
    let report = eval::export_artifacts(
        &outcome.model,
        &data.test,
        &data.stats,
        data.graph.as_ref(),
        &cfg.eval.horizons,
        &out,
    )?;
    print_report("test", &report);
    println!("artifacts written to {}", out.display());
    Ok(())
}

pub fn evaluate(mut cfg: RunConfig, checkpoint_base: Option<PathBuf>) -> Result<()> {
    let data = load_data(&mut cfg)?;
    let base = checkpoint_base.unwrap_or_else(|| cfg.out_dir.join("checkpoint"));
    let mut model = Stum::new(cfg.model.clone())?;
    checkpoint::load_into(&mut model, &base).with_context(|| format!("loading checkpoint {}", base.display()))?;

    let out = cfg.out_dir.clone();
    cfg.write_resolved(&out)?;
    let val = eval::evaluate(
        &model,
        &data.val,
        &data.stats,
        data.graph.as_ref(),
        &cfg.eval.horizons,
        cfg.eval.batch_size,
    )?;
    print_report("validation", &val);
    let test = eval::export_artifacts(
        &model,
        &data.test,
        &data.stats,
        data.graph.as_ref(),
        &cfg.eval.horizons,
        &out,
    )?;
    print_report("test", &test);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    /// Residual fusion blocks.
    Mlrf,
    /// Cells per block.
    Astuc,
    /// Embedding width.
    Embed,
}

impl AblationAxis {
    fn apply(self, model: &mut StumConfig, value: usize) {
        match self {
            AblationAxis::Mlrf => model.num_mlrf = value,
            AblationAxis::Astuc => model.astucs_per_block = value,
            AblationAxis::Embed => model.embed_dim = value,
        }
    }

    fn name(self) -> &'static str {
        match self {
            AblationAxis::Mlrf => "mlrf",
            AblationAxis::Astuc => "astuc",
            AblationAxis::Embed => "embed",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub value: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    pub trainable: usize,
    /// Training wall time per optimizer step, per-epoch validation included.
    pub step_seconds: f64,
}

pub fn ablation_csv(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let mut out = format!("{},mae,rmse,mape,trainable,step_seconds\n", axis.name());
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.value, r.mae, r.rmse, r.mape, r.trainable, r.step_seconds
        )
        .expect("string write");
    }
    out
}

/// Trains one model per value; each run lands in `out_dir/{axis}-{value}`.
pub fn ablate(mut cfg: RunConfig, axis: AblationAxis, values: &[usize]) -> Result<Vec<AblationRow>> {
    if values.is_empty() {
        bail!("ablate needs at least one value");
    }
    let mut values = values.to_vec();
    values.sort_unstable();
    values.dedup();
    let data = load_data(&mut cfg)?;
    let out = cfg.out_dir.clone();
    cfg.write_resolved(&out)?;

    let mut rows = Vec::with_capacity(values.len());
    for &value in &values {
        let mut run = cfg.clone();
        axis.apply(&mut run.model, value);
        run.model
            .validate()
            .with_context(|| format!("{}={value}", axis.name()))?;
        let dir = out.join(format!("{}-{value}", axis.name()));
        run.out_dir = dir.clone();
        run.write_resolved(&dir)?;
        eprintln!("{} = {value}", axis.name());

        let start = Instant::now();
        let outcome = trainer::train_with_hook(Stum::new(run.model.clone())?, &data, &run.train, &mut progress)?;
        let step_seconds = start.elapsed().as_secs_f64() / outcome.steps.max(1) as f64;
        outcome.history.write_csv(&dir.join("history.csv"))?;
        let report = eval::evaluate(
            &outcome.model,
            &data.test,
            &data.stats,
            data.graph.as_ref(),
            &run.eval.horizons,
            run.eval.batch_size,
        )?;
        eval::write_report(&report, &dir)?;
        let avg = report
            .rows
            .iter()
            .find(|r| r.horizon == "avg")
            .context("report has no average row")?
            .metrics;
        rows.push(AblationRow {
            value,
            mae: avg.mae,
            rmse: avg.rmse,
            mape: avg.mape,
            trainable: report.params.trainable,
            step_seconds,
        });
    }

    let csv = ablation_csv(axis, &rows);
    write(&out.join(format!("ablation-{}.csv", axis.name())), &csv)?;
    let json = serde_json::to_string_pretty(&rows).expect("rows serialize");
    write(&out.join(format!("ablation-{}.json", axis.name())), &json)?;
    println!(
        "{:>6} {:>10} {:>10} {:>8} {:>10} {:>10}",
        axis.name(),
        "MAE",
        "RMSE",
        "MAPE%",
        "params",
        "s/step"
    );
    for r in &rows {
        println!(
            "{:>6} {:>10.4} {:>10.4} {:>8.3} {:>10} {:>10.4}",
            r.value,
            r.mae,
            r.rmse,
            100.0 * r.mape,
            r.trainable,
            r.step_seconds
        );
    }
    Ok(rows)
}

pub fn bench(mut cfg: RunConfig) -> Result<()> {
    let data = load_data(&mut cfg)?;
    let out = cfg.out_dir.clone();
    cfg.write_resolved(&out)?;
    let counts = if cfg.bench.astucs.is_empty() {
        vec![cfg.model.astucs_per_block]
    } else {
        cfg.bench.astucs.clone()
    };
    let mut configs = Vec::new();
    for k in counts {
        let model = StumConfig {
            astucs_per_block: k,
            ..cfg.model.clone()
        };
        model.validate()?;
        if cfg.bench.full_rank {
            // Rank is clamped per layer, so this yields full rank everywhere.
            let widest = model
                .input_len
                .max(model.num_nodes)
                .max(model.embed_dim)
                .max(model.in_channels);
            let full = StumConfig {
                rank: Some(widest),
                ..model.clone()
            };
            configs.push((format!("k{k}"), model));
            configs.push((format!("k{k}-full-rank"), full));
        } else {
            configs.push((format!("k{k}"), model));
        }
    }
    let rows = eval::benchmark(&configs, &data, &cfg.train, cfg.bench.steps)?;
    let csv = eval::bench_csv(&rows);
    write(&out.join("bench.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Writes `synth.flatbin` (with its `synth.json` sidecar) and `edges.csv`.
pub fn synth(cfg: RunConfig) -> Result<()> {
    let (series, graph) = synth_generate(&cfg.synth)?;
    let out = &cfg.out_dir;
    cfg.write_resolved(out)?;
    let blob = out.join("synth.flatbin");
    write_flatbin(&series, &blob)?;
    write_edges_csv(&graph, &out.join("edges.csv"))?;
    println!(
        "wrote {} ({} frames, {} nodes, {} edges) and {}",
        blob.display(),
        series.frames(),
        series.nodes(),
        graph.edges().len(),
        out.join("edges.csv").display()
    );
    Ok(())
}

/// Prints every check and fails when any exceeds `tolerance`.
pub fn gradcheck(step: f64, tolerance: f64) -> Result<()> {
    let start = Instant::now();
    let results = gradcheck::full_suite(step)?;
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    let mut worst: f64 = 0.0;
    for r in &results {
        println!("{:<width$}  {:.3e}", r.name, r.max_rel_error);
        worst = worst.max(r.max_rel_error);
    }
    println!(
        "{} checks, max relative error {worst:.3e}, {:.1}s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if worst.is_nan() || worst >= tolerance {
        bail!("max relative error {worst:.3e} exceeds {tolerance:e}");
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
