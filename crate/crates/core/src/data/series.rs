use serde::{Deserialize, Serialize};

use crate::error::{Result, StumError};

/// Graph signal over time: `T × N × C` values, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSeries {
    frames: usize,
    nodes: usize,
    channels: usize,
    values: Vec<f64>,
    interval_minutes: f64,
    /// Index of frame 0 within the series this one was cut from.
    start: usize,
}

impl FrameSeries {
    pub fn new(frames: usize, nodes: usize, channels: usize, values: Vec<f64>, interval_minutes: f64) -> Result<Self> {
        if frames * nodes * channels != values.len() || nodes == 0 || channels == 0 {
            return Err(StumError::DimensionMismatch(format!(
                "{} values for T={frames}, N={nodes}, C={channels}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(StumError::NonFiniteValue {
                frame: i / (nodes * channels),
                node: (i / channels) % nodes,
                channel: i % channels,
            });
        }
        Ok(FrameSeries {
            frames,
            nodes,
            channels,
            values,
            interval_minutes,
            start: 0,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn interval_minutes(&self) -> f64 {
        self.interval_minutes
    }

    /// Offset of this segment's first frame in the original series.
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, frame: usize, node: usize, channel: usize) -> f64 {
        self.values[(frame * self.nodes + node) * self.channels + channel]
    }

    /// Values of one frame, `N × C`.
    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.nodes * self.channels;
        &self.values[t * w..(t + 1) * w]
    }

    /// Frames `[from, to)` as a new series.
    pub fn slice(&self, from: usize, to: usize) -> FrameSeries {
        let w = self.nodes * self.channels;
        FrameSeries {
            frames: to - from,
            values: self.values[from * w..to * w].to_vec(),
            start: self.start + from,
            ..*self
        }
    }

    fn with_values(&self, values: Vec<f64>) -> FrameSeries {
        FrameSeries { values, ..*self }
    }

    /// Population standard deviation of every value.
    pub fn std_all(&self) -> f64 {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        (self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
}

/// Chronological train/validation/test segments.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: FrameSeries,
    pub val: FrameSeries,
    pub test: FrameSeries,
}

/// Segment lengths `⌊0.6T⌋`, `⌊0.2T⌋` and the remainder.
pub fn split_lengths(frames: usize) -> Result<(usize, usize, usize)> {
    if frames < 10 {
        return Err(StumError::SeriesTooShort { frames, required: 10 });
    }
    let train = frames * 6 / 10;
    let val = frames * 2 / 10;
    Ok((train, val, frames - train - val))
}

/// Splits along time into contiguous 6:2:2 segments.
pub fn split_622(series: &FrameSeries) -> Result<Splits> {
    let (train, val, _) = split_lengths(series.frames())?;
    Ok(Splits {
        train: series.slice(0, train),
        val: series.slice(train, train + val),
        test: series.slice(train + val, series.frames()),
    })
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels whose spread fell below the threshold; their std is 1.
    #[serde(default)]
    pub degenerate_channels: Vec<usize>,
}

const MIN_STD: f64 = 1e-8;

impl NormStats {
    /// Fits mean and population std per channel. A channel with
    /// std < 1e-8 is degenerate: its std is clamped to 1 and a warning logged.
    pub fn fit(train: &FrameSeries) -> NormStats {
        let c = train.channels();
        let count = (train.frames() * train.nodes()) as f64;
        let mut mean = vec![0.0; c];
        for (i, v) in train.values().iter().enumerate() {
            mean[i % c] += v;
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; c];
        for (i, v) in train.values().iter().enumerate() {
            var[i % c] += (v - mean[i % c]).powi(2);
        }
        let mut degenerate_channels = Vec::new();
        let std = var
            .iter()
            .enumerate()
            .map(|(ch, v)| {
                let s = (v / count).sqrt();
                if s < MIN_STD {
                    log::warn!("degenerate channel {ch}: std {s:e} < {MIN_STD:e}, clamped to 1");
                    degenerate_channels.push(ch);
                    1.0
                } else {
                    s
                }
            })
            .collect();
        NormStats {
            mean,
            std,
            degenerate_channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_value(&self, channel: usize, v: f64) -> f64 {
        (v - self.mean[channel]) / self.std[channel]
    }

    pub fn invert_value(&self, channel: usize, v: f64) -> f64 {
        v * self.std[channel] + self.mean[channel]
    }

    /// Normalizes values laid out channel-minor.
    pub fn apply_slice(&self, values: &[f64]) -> Vec<f64> {
        let c = self.channels();
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| self.apply_value(i % c, v))
            .collect()
    }

    pub fn invert_slice(&self, values: &[f64]) -> Vec<f64> {
        let c = self.channels();
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| self.invert_value(i % c, v))
            .collect()
    }

    pub fn apply(&self, series: &FrameSeries) -> FrameSeries {
        series.with_values(self.apply_slice(series.values()))
    }

    pub fn invert(&self, series: &FrameSeries) -> FrameSeries {
        series.with_values(self.invert_slice(series.values()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(frames: usize, nodes: usize, channels: usize, f: impl Fn(usize) -> f64) -> FrameSeries {
        let n = frames * nodes * channels;
        FrameSeries::new(frames, nodes, channels, (0..n).map(f).collect(), 5.0).unwrap()
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_lengths(100).unwrap(), (60, 20, 20));
        assert_eq!(split_lengths(16992).unwrap(), (10195, 3398, 3399));
        assert!(matches!(
            split_lengths(5),
            Err(StumError::SeriesTooShort { frames: 5, .. })
        ));
    }

    #[test]
    fn split_segments_are_ordered_and_cover() {
        let s = series(37, 2, 1, |i| i as f64);
        let sp = split_622(&s).unwrap();
        assert_eq!(sp.train.start(), 0);
        assert_eq!(sp.val.start(), sp.train.frames());
        assert_eq!(sp.test.start(), sp.train.frames() + sp.val.frames());
        assert_eq!(sp.train.frames() + sp.val.frames() + sp.test.frames(), 37);
        let mut joined = sp.train.values().to_vec();
        joined.extend(sp.val.values());
        joined.extend(sp.test.values());
        assert_eq!(joined, s.values());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let err = FrameSeries::new(2, 2, 1, vec![1.0, 2.0, f64::INFINITY, 0.0], 5.0).unwrap_err();
        assert!(matches!(
            err,
            StumError::NonFiniteValue {
                frame: 1,
                node: 0,
                channel: 0
            }
        ));
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let s = series(20, 3, 2, |i| if i % 2 == 0 { 4.0 } else { i as f64 });
        let stats = NormStats::fit(&s);
        assert_eq!(stats.degenerate_channels, vec![0]);
        assert_eq!(stats.std[0], 1.0);
        let z = stats.apply(&s);
        for (i, v) in z.values().iter().enumerate() {
            if i % 2 == 0 {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn mean_maps_to_zero() {
        let s = series(30, 4, 1, |i| (i as f64 * 0.37).sin() * 10.0 + 50.0);
        let stats = NormStats::fit(&s);
        assert_eq!(stats.apply_value(0, stats.mean[0]), 0.0);
    }

    proptest! {
        #[test]
        fn normalization_roundtrip(values in proptest::collection::vec(-1e3f64..1e3, 24)) {
            let s = FrameSeries::new(4, 3, 2, values, 5.0).unwrap();
            let stats = NormStats::fit(&s);
            let back = stats.invert(&stats.apply(&s));
            for (a, b) in back.values().iter().zip(s.values()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
