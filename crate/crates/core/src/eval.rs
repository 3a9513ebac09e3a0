//! Forecast metrics, per-horizon evaluation, artifact export and step-time
//! benchmarks.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_windows, FrameSeries, NormStats, TrafficGraph};
use crate::error::{Result, StumError};
use crate::mlrf::ForwardMode;
use crate::model::{ParamReport, Stum, StumConfig};
use crate::tensor::{Tape, Tensor};
use crate::trainer::{self, Adam, DataSplits, TrainConfig};

pub const DEFAULT_MAPE_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Fraction, not percent.
    pub mape: f64,
}

/// MAE, RMSE and MAPE over the observed indices. `observed = None` means
/// every index; MAPE further drops entries with `|truth| < mape_eps`.
pub fn metrics(truth: &[f64], pred: &[f64], observed: Option<&[bool]>, mape_eps: f64) -> Result<Metrics> {
    if truth.len() != pred.len() || observed.is_some_and(|o| o.len() != truth.len()) {
        return Err(StumError::shape("metrics", &[truth.len()], &[pred.len()]));
    }
    let (mut n, mut abs, mut sq) = (0usize, 0.0, 0.0);
    let (mut n_pct, mut pct) = (0usize, 0.0);
    for i in 0..truth.len() {
        if observed.is_some_and(|o| !o[i]) {
            continue;
        }
        let e = pred[i] - truth[i];
        n += 1;
        abs += e.abs();
        sq += e * e;
        if truth[i].abs() >= mape_eps {
            n_pct += 1;
            pct += (e / truth[i]).abs();
        }
    }
    if n == 0 {
        return Err(StumError::EmptyObservationSet("metrics"));
    }
    if n_pct == 0 {
        return Err(StumError::EmptyObservationSet("mape"));
    }
    Ok(Metrics {
        mae: abs / n as f64,
        rmse: (sq / n as f64).sqrt(),
        mape: pct / n_pct as f64,
    })
}

/// `Σ |pred − truth|` in raw units for channel-minor normalized tensors.
pub fn denormalized_abs_error_sum(pred: &Tensor, truth: &Tensor, stats: &NormStats) -> f64 {
    let c = stats.channels();
    pred.data()
        .iter()
        .zip(truth.data())
        .enumerate()
        .map(|(i, (p, t))| (p - t).abs() * stats.std[i % c])
        .sum()
}

/// Denormalized forecasts for every window of a split, in chronological
/// order. Tensors are `W × h × N × C`.
#[derive(Clone, Debug)]
pub struct SplitPredictions {
    pub truth: Tensor,
    pub pred: Tensor,
    /// Absolute index of each window's last input frame.
    pub origins: Vec<usize>,
    /// Final hidden state averaged over windows and time steps, `N × d`.
    pub embeddings: Option<Tensor>,
}

pub fn predict_split(
    model: &Stum,
    series: &FrameSeries,
    stats: &NormStats,
    graph: Option<&TrafficGraph>,
    batch: usize,
) -> Result<SplitPredictions> {
    let cfg = model.config();
    let (s, h) = (cfg.input_len, cfg.horizon);
    let windows = make_windows(series, s, h, batch, None)?;
    let count = windows.window_count();
    let (n, c, d) = (series.nodes(), series.channels(), cfg.embed_dim);
    let (mut truth, mut pred, mut origins) = (Vec::new(), Vec::new(), Vec::with_capacity(count));
    let mut embed_sum = vec![0.0; n * d];
    let mut has_embed = false;
    for wb in windows {
        let mut tape = Tape::inference();
        let x = tape.constant(wb.inputs.clone());
        let out = model.forward(&mut tape, x, graph, &mut ForwardMode::inference())?;
        pred.extend(stats.invert_slice(tape.value(out.z).data()));
        truth.extend(stats.invert_slice(wb.targets.data()));
        origins.extend(&wb.origins);
        if let Some(hv) = out.hidden {
            has_embed = true;
            // hidden is B × s × N × d; accumulate per (node, feature).
            for (i, v) in tape.value(hv).data().iter().enumerate() {
                embed_sum[i % (n * d)] += v;
            }
        }
    }
    let shape = [count, h, n, c];
    let embeddings = has_embed.then(|| {
        let denom = (count * s) as f64;
        Tensor::new(&[n, d], embed_sum.iter().map(|v| v / denom).collect()).expect("embedding shape")
    });
    Ok(SplitPredictions {
        truth: Tensor::new(&shape, truth)?,
        pred: Tensor::new(&shape, pred)?,
        origins,
        embeddings,
    })
}

/// Denormalized MAE of the model over every window of a normalized split.
pub fn split_mae(
    model: &Stum,
    series: &FrameSeries,
    stats: &NormStats,
    graph: Option<&TrafficGraph>,
    batch: usize,
) -> Result<f64> {
    let p = predict_split(model, series, stats, graph, batch)?;
    Ok(metrics(p.truth.data(), p.pred.data(), None, 0.0)?.mae)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    /// 1-based horizon step, or `"avg"`.
    pub horizon: String,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<HorizonRow>,
    pub windows: usize,
    pub params: ParamReport,
    pub seconds: f64,
}

impl EvalReport {
    pub fn row(&self, horizon: &str) -> Option<&Metrics> {
        self.rows.iter().find(|r| r.horizon == horizon).map(|r| &r.metrics)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("horizon,mae,rmse,mape\n");
        for r in &self.rows {
            let m = r.metrics;
            writeln!(out, "{},{},{},{}", r.horizon, m.mae, m.rmse, m.mape).expect("string write");
        }
        out
    }
}

/// Metrics at each requested 1-based horizon step plus an `avg` row over
/// all `h` steps.
pub fn report_from(p: &SplitPredictions, horizons: &[usize], mape_eps: f64) -> Result<Vec<HorizonRow>> {
    let shape = p.truth.shape();
    let (w, h, per_step) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut rows = Vec::with_capacity(horizons.len() + 1);
    for &k in horizons {
        if k == 0 || k > h {
            return Err(StumError::Config(format!("horizon {k} outside 1..={h}")));
        }
        let mut truth = Vec::with_capacity(w * per_step);
        let mut pred = Vec::with_capacity(w * per_step);
        for win in 0..w {
            let at = (win * h + k - 1) * per_step;
            truth.extend_from_slice(&p.truth.data()[at..at + per_step]);
            pred.extend_from_slice(&p.pred.data()[at..at + per_step]);
        }
        rows.push(HorizonRow {
            horizon: k.to_string(),
            metrics: metrics(&truth, &pred, None, mape_eps)?,
        });
    }
    rows.push(HorizonRow {
        horizon: "avg".into(),
        metrics: metrics(p.truth.data(), p.pred.data(), None, mape_eps)?,
    });
    Ok(rows)
}

pub fn evaluate(
    model: &Stum,
    series: &FrameSeries,
    stats: &NormStats,
    graph: Option<&TrafficGraph>,
    horizons: &[usize],
    batch: usize,
) -> Result<EvalReport> {
    let start = Instant::now();
    let p = predict_split(model, series, stats, graph, batch)?;
    Ok(EvalReport {
        rows: report_from(&p, horizons, DEFAULT_MAPE_EPS)?,
        windows: p.origins.len(),
        params: model.param_report(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Writes `predictions.csv`, `embeddings.csv` (enhanced models only),
/// `report.json` and `report.csv` into `out_dir`.
pub fn export_artifacts(
    model: &Stum,
    series: &FrameSeries,
    stats: &NormStats,
    graph: Option<&TrafficGraph>,
    horizons: &[usize],
    out_dir: &Path,
) -> Result<EvalReport> {
    let start = Instant::now();
    fs::create_dir_all(out_dir).map_err(|e| StumError::io(out_dir, e))?;
    let p = predict_split(model, series, stats, graph, 64)?;
    let shape = p.truth.shape().to_vec();
    let (h, n, c) = (shape[1], shape[2], shape[3]);

    let mut csv = String::from(if c > 1 {
        "t,node,channel,horizon,truth,pred\n"
    } else {
        "t,node,horizon,truth,pred\n"
    });
    for (win, &origin) in p.origins.iter().enumerate() {
        for node in 0..n {
            for k in 0..h {
                for ch in 0..c {
                    let i = ((win * h + k) * n + node) * c + ch;
                    let (truth, pred) = (p.truth.data()[i], p.pred.data()[i]);
                    if c > 1 {
                        writeln!(csv, "{origin},{node},{ch},{},{truth},{pred}", k + 1)
                    } else {
                        writeln!(csv, "{origin},{node},{},{truth},{pred}", k + 1)
                    }
                    .expect("string write");
                }
            }
        }
    }
    write(&out_dir.join("predictions.csv"), csv.as_bytes())?;

    if let Some(e) = &p.embeddings {
        let d = e.shape()[1];
        let header: Vec<String> = (0..d).map(|j| format!("e{j}")).collect();
        let mut csv = format!("node,{}\n", header.join(","));
        for node in 0..n {
            let row: Vec<String> = e.data()[node * d..(node + 1) * d].iter().map(f64::to_string).collect();
            writeln!(csv, "{node},{}", row.join(",")).expect("string write");
        }
        write(&out_dir.join("embeddings.csv"), csv.as_bytes())?;
    }

    let report = EvalReport {
        rows: report_from(&p, horizons, DEFAULT_MAPE_EPS)?,
        windows: p.origins.len(),
        params: model.param_report(),
        seconds: start.elapsed().as_secs_f64(),
    };
    write_report(&report, out_dir)?;
    Ok(report)
}

pub fn write_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write(&out_dir.join("report.json"), json.as_bytes())?;
    write(&out_dir.join("report.csv"), report.to_csv().as_bytes())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| StumError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub trainable: usize,
    pub dense_equivalent: usize,
    pub median_step_seconds: f64,
    pub steps: usize,
}

/// Median wall-clock time of a full training step (forward, backward,
/// update) for each configuration.
pub fn benchmark(
    configs: &[(String, StumConfig)],
    data: &DataSplits,
    train: &TrainConfig,
    steps: usize,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(configs.len());
    for (label, cfg) in configs {
        let mut model = Stum::new(cfg.clone())?;
        let mut adam = Adam::new();
        let batches: Vec<_> = make_windows(
            &data.train,
            cfg.input_len,
            cfg.horizon,
            train.batch_size,
            Some(train.seed),
        )?
        .collect();
        let mut times = Vec::with_capacity(steps);
        for step in 0..steps {
            let batch = &batches[step % batches.len()];
            let start = Instant::now();
            trainer::train_step(&mut model, &mut adam, batch, data, train, step as u64)?;
            times.push(start.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        let report = model.param_report();
        rows.push(BenchRow {
            label: label.clone(),
            trainable: report.trainable,
            dense_equivalent: report.dense_equivalent,
            median_step_seconds: times.get(steps / 2).copied().unwrap_or(0.0),
            steps,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("label,trainable,dense_equivalent,median_step_seconds,steps\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.label, r.trainable, r.dense_equivalent, r.median_step_seconds, r.steps
        )
        .expect("string write");
    }
    out
}
