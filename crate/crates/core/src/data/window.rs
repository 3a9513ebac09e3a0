use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FrameSeries;
use crate::error::{Result, StumError};
use crate::tensor::Tensor;

/// A minibatch of input/target windows.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    /// `B × s × N × C`
    pub inputs: Tensor,
    /// `B × h × N × C`
    pub targets: Tensor,
    /// Absolute index of the last input frame of each sample.
    pub origins: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

/// Number of windows with `s` input and `h` target frames in `frames`.
pub fn window_count(frames: usize, s: usize, h: usize) -> Result<usize> {
    if s == 0 || h == 0 || frames < s + h {
        return Err(StumError::SeriesTooShort {
            frames,
            required: s + h,
        });
    }
    Ok(frames - s - h + 1)
}

/// Streams minibatches of sliding windows over one series segment.
pub struct Windows<'a> {
    series: &'a FrameSeries,
    input_len: usize,
    horizon: usize,
    batch: usize,
    /// Local indices of the last input frame, in emission order.
    order: Vec<usize>,
    cursor: usize,
}

/// Cuts `series` into windows of `s` inputs and `h` targets. The order is
/// chronological unless a shuffle seed is given; the final partial batch is
/// kept.
pub fn make_windows(
    series: &FrameSeries,
    s: usize,
    h: usize,
    batch: usize,
    shuffle_seed: Option<u64>,
) -> Result<Windows<'_>> {
    let count = window_count(series.frames(), s, h)?;
    if batch == 0 {
        return Err(StumError::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (s - 1..s - 1 + count).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(Windows {
        series,
        input_len: s,
        horizon: h,
        batch,
        order,
        cursor: 0,
    })
}

impl Windows<'_> {
    pub fn window_count(&self) -> usize {
        self.order.len()
    }

    pub fn batch_count(&self) -> usize {
        self.order.len().div_ceil(self.batch)
    }
}

impl Iterator for Windows<'_> {
    type Item = WindowBatch;

    fn next(&mut self) -> Option<WindowBatch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch).min(self.order.len());
        let picks = &self.order[self.cursor..end];
        self.cursor = end;

        let (s, h) = (self.input_len, self.horizon);
        let frame = self.series.nodes() * self.series.channels();
        let b = picks.len();
        let mut inputs = Vec::with_capacity(b * s * frame);
        let mut targets = Vec::with_capacity(b * h * frame);
        for &t in picks {
            for k in t + 1 - s..=t {
                inputs.extend_from_slice(self.series.frame(k));
            }
            for k in t + 1..=t + h {
                targets.extend_from_slice(self.series.frame(k));
            }
        }
        let (n, c) = (self.series.nodes(), self.series.channels());
        Some(WindowBatch {
            inputs: Tensor::from_parts(vec![b, s, n, c], inputs),
            targets: Tensor::from_parts(vec![b, h, n, c], targets),
            origins: picks.iter().map(|t| t + self.series.start()).collect(),
        })
    }
}
