//! Flat `section.key = value` run configuration.
//!
//! Values are read as JSON when they parse (`12`, `0.5`, `true`, `null`,
//! `[64, 64]`, `"text"`) and as bare strings otherwise, so enum variants can
//! be written unquoted: `model.backbone.kind = graphconv`. `#` starts a
//! comment. Every key must name a field of the default configuration; the
//! shorthand `model.backbone = graphconv` sets the backbone kind.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use stum::data::{DataFormat, SynthConfig};
use stum::model::StumConfig;
use stum::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    /// Series file; `None` generates the synthetic fixture from `synth`.
    pub path: Option<PathBuf>,
    /// Edge list; required by the graph-convolution backbone.
    pub graph: Option<PathBuf>,
    pub format: DataFormat,
    /// Channels per node for CSV input.
    pub channels: usize,
    pub interval_minutes: f64,
    pub expected_nodes: Option<usize>,
    pub expected_frames: Option<usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: None,
            graph: None,
            format: DataFormat::Flatbin,
            channels: 1,
            interval_minutes: 5.0,
            expected_nodes: None,
            expected_frames: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub horizons: Vec<usize>,
    pub batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            horizons: vec![3, 6, 12],
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSection {
    /// Timed steps per configuration.
    pub steps: usize,
    /// Cells per block to compare; empty benchmarks the configured model only.
    pub astucs: Vec<usize>,
    /// Adds a full-rank twin of every configuration.
    pub full_rank: bool,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            steps: 50,
            astucs: vec![8, 16],
            full_rank: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// When set, replaces both `model.seed` and `train.seed`.
    pub seed: Option<u64>,
    pub data: DataSection,
    pub synth: SynthConfig,
    pub model: StumConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn defaults() -> Self {
        RunConfig {
            out_dir: PathBuf::from("out"),
            ..RunConfig::default()
        }
    }

    /// Reads an optional config file, then applies `--set` overrides and
    /// `STUM_SEED`, in that order.
    pub fn resolve(file: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut tree = serde_json::to_value(RunConfig::defaults()).expect("config serializes");
        if let Some(path) = file {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = strip_comment(line).trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line
                    .split_once('=')
                    .with_context(|| format!("{}:{}: expected `key = value`", path.display(), lineno + 1))?;
                assign(&mut tree, key.trim(), value.trim())
                    .with_context(|| format!("{}:{}", path.display(), lineno + 1))?;
            }
        }
        for item in overrides {
            let (key, value) = item
                .split_once('=')
                .with_context(|| format!("--set {item:?}: expected key=value"))?;
            assign(&mut tree, key.trim(), value.trim()).with_context(|| format!("--set {item}"))?;
        }
        if let Some(seed) = env_seed {
            let seed: u64 = seed
                .trim()
                .parse()
                .with_context(|| format!("STUM_SEED={seed:?} is not an unsigned integer"))?;
            assign(&mut tree, "seed", &seed.to_string())?;
        }
        let mut cfg: RunConfig = serde_json::from_value(tree).context("invalid configuration")?;
        if let Some(seed) = cfg.seed {
            cfg.model.seed = seed;
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    /// The fully resolved configuration in the same flat format, readable
    /// back by `resolve`.
    pub fn to_flat(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &tree, &mut lines);
        let mut out = String::from("# resolved configuration\n");
        for (key, value) in lines {
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("resolved.cfg");
        fs::write(&path, self.to_flat()).with_context(|| format!("writing {}", path.display()))
    }
}

fn strip_comment(line: &str) -> &str {
    line.split_once('#').map_or(line, |(head, _)| head)
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn assign(tree: &mut Value, key: &str, raw: &str) -> Result<()> {
    let key = if key == "model.backbone" {
        "model.backbone.kind"
    } else {
        key
    };
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            bail!("unknown key `{key}`");
        };
        let Some(child) = map.get_mut(*part) else {
            bail!("unknown key `{key}`");
        };
        if i + 1 == parts.len() {
            if child.is_object() {
                bail!("`{key}` is a section, not a key");
            }
            *child = parse_value(raw);
            return Ok(());
        }
        node = child;
    }
    bail!("empty key")
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) => flatten_map(prefix, map, out),
        Value::String(s) if serde_json::from_str::<Value>(s).is_err() && s.trim() == s => {
            out.push((prefix.to_string(), s.clone()))
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn flatten_map(prefix: &str, map: &Map<String, Value>, out: &mut Vec<(String, String)>) {
    for (k, v) in map {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        flatten(&key, v, out);
    }
}
