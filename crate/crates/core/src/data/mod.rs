//! Dataset ingestion, splitting, normalization, windowing and synthetic data.

mod graph;
pub mod io;
mod series;
mod synth;
mod window;

pub use graph::{Edge, TrafficGraph};
pub use io::{load_dataset, DataFormat, LoadOptions};
pub use series::{split_622, split_lengths, FrameSeries, NormStats, Splits};
pub use synth::{synth_generate, SynthConfig};
pub use window::{make_windows, window_count, WindowBatch, Windows};
