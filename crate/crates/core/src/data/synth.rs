use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Edge, FrameSeries, TrafficGraph};
use crate::error::{Result, StumError};

/// Region-structured synthetic traffic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub nodes: usize,
    pub frames: usize,
    pub regions: usize,
    /// Frames per daily cycle.
    pub period: usize,
    /// Per-node noise std as a fraction of the region's amplitude.
    pub noise: f64,
    pub seed: u64,
    pub channels: usize,
    pub interval_minutes: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            nodes: 20,
            frames: 500,
            regions: 3,
            period: 288,
            noise: 0.05,
            seed: 1,
            channels: 1,
            interval_minutes: 5.0,
        }
    }
}

/// Fraction of a neighbouring region's lagged swing that leaks in.
const COUPLING: f64 = 0.2;
const COUPLING_LAG: usize = 3;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regions == 0 || self.regions > self.nodes {
            return Err(StumError::Config(format!(
                "synth.regions must be in 1..={} (nodes), got {}",
                self.nodes, self.regions
            )));
        }
        if self.frames == 0 || self.period == 0 || self.channels == 0 {
            return Err(StumError::Config(
                "synth frames, period and channels must be positive".into(),
            ));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(StumError::Config(format!(
                "synth.noise must be ≥ 0, got {}",
                self.noise
            )));
        }
        Ok(())
    }

    pub fn region_of(&self, node: usize) -> usize {
        node * self.regions / self.nodes
    }

    fn level(&self, r: usize) -> f64 {
        100.0 + 150.0 * r as f64
    }

    fn amplitude(&self, r: usize) -> f64 {
        40.0 + 20.0 * r as f64
    }

    /// Zero-mean daily swing of region `r` at (possibly negative) time `t`.
    fn swing(&self, r: usize, t: f64) -> f64 {
        let phase = 2.0 * PI * r as f64 / self.regions as f64;
        let w = 2.0 * PI * t / self.period as f64;
        self.amplitude(r) * ((w + phase).sin() + 0.3 * (2.0 * w + 2.0 * phase).sin())
    }

    fn region_signal(&self, r: usize, t: usize) -> f64 {
        let mut v = self.level(r) + self.swing(r, t as f64);
        let neighbours: Vec<usize> = [r.checked_sub(1), Some(r + 1)]
            .into_iter()
            .flatten()
            .filter(|&q| q < self.regions)
            .collect();
        if !neighbours.is_empty() {
            let lagged = t as f64 - COUPLING_LAG as f64;
            let leak: f64 = neighbours.iter().map(|&q| self.swing(q, lagged)).sum();
            v += COUPLING * leak / neighbours.len() as f64;
        }
        v
    }
}

/// Generates a series and its region-clustered graph; deterministic in the
/// seed.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(FrameSeries, TrafficGraph)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let (n, c) = (cfg.nodes, cfg.channels);
    let mut values = Vec::with_capacity(cfg.frames * n * c);
    for t in 0..cfg.frames {
        let signals: Vec<f64> = (0..cfg.regions).map(|r| cfg.region_signal(r, t)).collect();
        for node in 0..n {
            let r = cfg.region_of(node);
            for ch in 0..c {
                let level = cfg.level(r);
                let base = level + (signals[r] - level) / (1 + ch) as f64;
                let eps = if cfg.noise > 0.0 { unit.sample(&mut rng) } else { 0.0 };
                values.push(base + cfg.noise * cfg.amplitude(r) * eps);
            }
        }
    }
    let series = FrameSeries::new(cfg.frames, n, c, values, cfg.interval_minutes)?;
    Ok((series, region_graph(cfg)?))
}

fn region_graph(cfg: &SynthConfig) -> Result<TrafficGraph> {
    let mut edges = Vec::new();
    let mut link = |a: usize, b: usize| {
        edges.push(Edge {
            from: a,
            to: b,
            weight: 1.0,
        });
        edges.push(Edge {
            from: b,
            to: a,
            weight: 1.0,
        });
    };
    let members = |r: usize| (0..cfg.nodes).filter(move |&i| cfg.region_of(i) == r);
    for r in 0..cfg.regions {
        let m: Vec<usize> = members(r).collect();
        for (k, &a) in m.iter().enumerate() {
            for &b in m.iter().skip(k + 1).take(2) {
                link(a, b);
            }
        }
        if r + 1 < cfg.regions {
            let next = members(r + 1).next().expect("regions are non-empty");
            link(*m.last().expect("regions are non-empty"), next);
        }
    }
    TrafficGraph::new(cfg.nodes, edges)
}
