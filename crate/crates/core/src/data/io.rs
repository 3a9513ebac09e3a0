//! Dataset files.
//!
//! * `csv`: a flow table with one header row and `T` rows of `N·C` values
//!   (node-major, channel-minor columns).
//! * `flatbin`: raw little-endian `f32` values in t-major, node-middle,
//!   channel-minor order, with a JSON sidecar `{"T","N","C","interval_minutes"}`
//!   stored next to it under the same stem and a `.json` extension.
//! * Edges: CSV rows `u,v[,weight]`, optional header; weight defaults to 1.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Edge, FrameSeries, TrafficGraph};
use crate::error::{Result, StumError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Flatbin,
}

impl FromStr for DataFormat {
    type Err = StumError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DataFormat::Csv),
            "flatbin" => Ok(DataFormat::Flatbin),
            other => Err(StumError::Config(format!("unknown data format `{other}`"))),
        }
    }
}

impl fmt::Display for DataFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataFormat::Csv => "csv",
            DataFormat::Flatbin => "flatbin",
        })
    }
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Channels per node for CSV input (flatbin declares its own).
    pub channels: usize,
    /// Sampling interval for CSV input.
    pub interval_minutes: f64,
    pub expected_nodes: Option<usize>,
    pub expected_frames: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            channels: 1,
            interval_minutes: 5.0,
            expected_nodes: None,
            expected_frames: None,
        }
    }
}

/// Sidecar metadata of a flatbin blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatbinHeader {
    #[serde(rename = "T")]
    pub frames: usize,
    #[serde(rename = "N")]
    pub nodes: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    pub interval_minutes: f64,
}

pub fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| StumError::io(path, e))
}

fn parse_err(path: &Path, msg: impl Into<String>) -> StumError {
    StumError::Parse {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Loads a series and, when `graph_path` is given, its graph.
pub fn load_dataset(
    data_path: &Path,
    graph_path: Option<&Path>,
    format: DataFormat,
    opts: &LoadOptions,
) -> Result<(FrameSeries, Option<TrafficGraph>)> {
    let series = match format {
        DataFormat::Csv => read_flow_csv(data_path, opts.channels, opts.interval_minutes)?,
        DataFormat::Flatbin => read_flatbin(data_path)?,
    };
    if let Some(n) = opts.expected_nodes {
        if n != series.nodes() {
            return Err(StumError::DimensionMismatch(format!(
                "{} has {} nodes, expected {n}",
                data_path.display(),
                series.nodes()
            )));
        }
    }
    if let Some(t) = opts.expected_frames {
        if t != series.frames() {
            return Err(StumError::DimensionMismatch(format!(
                "{} has {} frames, expected {t}",
                data_path.display(),
                series.frames()
            )));
        }
    }
    let graph = graph_path.map(|p| read_edges_csv(p, series.nodes())).transpose()?;
    Ok((series, graph))
}

pub fn read_flow_csv(path: &Path, channels: usize, interval_minutes: f64) -> Result<FrameSeries> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| parse_err(path, "not UTF-8"))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| parse_err(path, "empty file"))?;
    let width = header.split(',').count();
    if channels == 0 || width % channels != 0 {
        return Err(parse_err(
            path,
            format!("{width} columns do not divide into {channels} channels"),
        ));
    }
    let mut values = Vec::new();
    let mut frames = 0;
    for (row, line) in lines.enumerate() {
        let before = values.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(path, format!("row {}: `{}` is not a number", row + 2, field.trim())))?;
            values.push(v);
        }
        if values.len() - before != width {
            return Err(parse_err(
                path,
                format!(
                    "row {} has {} fields, header has {width}",
                    row + 2,
                    values.len() - before
                ),
            ));
        }
        frames += 1;
    }
    FrameSeries::new(frames, width / channels, channels, values, interval_minutes)
}

pub fn read_flatbin(blob: &Path) -> Result<FrameSeries> {
    let side = sidecar_path(blob);
    let meta: FlatbinHeader = serde_json::from_slice(&read(&side)?).map_err(|e| parse_err(&side, e.to_string()))?;
    let bytes = read(blob)?;
    let expected = meta.frames * meta.nodes * meta.channels * 4;
    if bytes.len() != expected {
        return Err(parse_err(
            blob,
            format!("{} bytes, sidecar implies {expected}", bytes.len()),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    FrameSeries::new(meta.frames, meta.nodes, meta.channels, values, meta.interval_minutes)
}

/// Reads an edge list for a graph of `num_nodes` nodes.
pub fn read_edges_csv(path: &Path, num_nodes: usize) -> Result<TrafficGraph> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|_| parse_err(path, "not UTF-8"))?;
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if i == 0 && fields[0].parse::<usize>().is_err() {
            continue;
        }
        let bad = || parse_err(path, format!("line {}: expected `u,v[,weight]`", i + 1));
        if !(2..=3).contains(&fields.len()) {
            return Err(bad());
        }
        let from = fields[0].parse().map_err(|_| bad())?;
        let to = fields[1].parse().map_err(|_| bad())?;
        let weight = match fields.get(2) {
            Some(w) => w.parse().map_err(|_| bad())?,
            None => 1.0,
        };
        edges.push(Edge { from, to, weight });
    }
    TrafficGraph::new(num_nodes, edges)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| StumError::io(dir, e))?;
        }
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| StumError::io(path, e))
}

/// Writes the blob and its sidecar. Values are narrowed to `f32`.
pub fn write_flatbin(series: &FrameSeries, blob: &Path) -> Result<()> {
    let meta = FlatbinHeader {
        frames: series.frames(),
        nodes: series.nodes(),
        channels: series.channels(),
        interval_minutes: series.interval_minutes(),
    };
    let mut json = serde_json::to_vec_pretty(&meta).expect("header serializes");
    json.push(b'\n');
    write(&sidecar_path(blob), &json)?;
    let bytes: Vec<u8> = series.values().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    write(blob, &bytes)
}

pub fn write_flow_csv(series: &FrameSeries, path: &Path) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..series.nodes())
        .flat_map(|n| (0..series.channels()).map(move |c| format!("n{n}_c{c}")))
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for t in 0..series.frames() {
        let row: Vec<String> = series.frame(t).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write(path, out.as_bytes())
}

pub fn write_edges_csv(graph: &TrafficGraph, path: &Path) -> Result<()> {
    let mut out = String::from("from,to,weight\n");
    for e in graph.edges() {
        out.push_str(&format!("{},{},{}\n", e.from, e.to, e.weight));
    }
    write(path, out.as_bytes())
}
