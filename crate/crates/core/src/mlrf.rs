//! Multi-layer residual fusion: a normalized chain of alternating time and
//! space cells merged back into the residual stream.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::astuc::{memory_merge, update_space, update_time, AstucCell, CellAxis, Memory, MergeForm, UpdateForm};
use crate::error::{Result, StumError};
use crate::lowrank::LowRankConfig;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{NormVariant, Tape, Tensor, Var};

/// Everything a block needs to know about its interface and cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlrfConfig {
    pub seq_len: usize,
    pub nodes: usize,
    pub embed_dim: usize,
    /// Cells per block; must be even (time/space pairs).
    pub cells: usize,
    pub lowrank: LowRankConfig,
    pub update_form: UpdateForm,
    pub merge_form: MergeForm,
    pub cell_gate_init: f64,
    pub retain_init: f64,
    pub norm_variant: NormVariant,
    pub norm_eps: f64,
    pub dropout: f64,
}

impl Default for MlrfConfig {
    fn default() -> Self {
        MlrfConfig {
            seq_len: 12,
            nodes: 20,
            embed_dim: 16,
            cells: 8,
            lowrank: LowRankConfig::default(),
            update_form: UpdateForm::Gated,
            merge_form: MergeForm::Sum,
            cell_gate_init: 0.5,
            retain_init: 0.9,
            norm_variant: NormVariant::Rms,
            norm_eps: 1e-6,
            dropout: 0.1,
        }
    }
}

impl MlrfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.nodes == 0 || self.embed_dim == 0 {
            return Err(StumError::Config("block extents must be positive".into()));
        }
        if self.cells == 0 || !self.cells.is_multiple_of(2) {
            return Err(StumError::Config(format!(
                "cells per block must be a positive even number, got {}",
                self.cells
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(StumError::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Per-call switches for training-only behaviour.
#[derive(Debug)]
pub struct ForwardMode<'a> {
    /// Dropout masks are drawn from this stream; `None` means inference.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
}

impl ForwardMode<'_> {
    pub fn inference() -> Self {
        ForwardMode { dropout_rng: None }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }
}

impl<'a> ForwardMode<'a> {
    pub fn training(rng: &'a mut ChaCha8Rng) -> Self {
        ForwardMode { dropout_rng: Some(rng) }
    }
}

#[derive(Clone, Debug)]
pub struct MlrfBlock {
    index: usize,
    cells: Vec<AstucCell>,
    memory: Memory,
    norm_weight: ParamId,
    out_norm_weight: ParamId,
    norm_variant: NormVariant,
    norm_eps: f64,
    dropout: f64,
    shape: [usize; 3],
}

impl MlrfBlock {
    pub fn new(store: &mut ParamStore, index: usize, cfg: &MlrfConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let prefix = format!("mlrf.{index}");
        let mut cells = Vec::with_capacity(cfg.cells);
        for pair in 0..cfg.cells / 2 {
            for (axis, extent, tag) in [
                (CellAxis::Time, cfg.seq_len, "time"),
                (CellAxis::Space, cfg.nodes, "space"),
            ] {
                cells.push(AstucCell::new(
                    store,
                    &format!("{prefix}.{tag}{pair}"),
                    axis,
                    extent,
                    &cfg.lowrank,
                    cfg.update_form,
                    cfg.cell_gate_init,
                    rng,
                )?);
            }
        }
        let d = cfg.embed_dim;
        let memory = Memory::new(
            store,
            &format!("{prefix}.memory"),
            d,
            cfg.merge_form,
            cfg.retain_init,
            rng,
        )?;
        let norm_weight = store.add(format!("{prefix}.norm"), Tensor::ones(&[d]), true);
        let out_norm_weight = store.add(format!("{prefix}.out_norm"), Tensor::ones(&[d]), true);
        Ok(MlrfBlock {
            index,
            cells,
            memory,
            norm_weight,
            out_norm_weight,
            norm_variant: cfg.norm_variant,
            norm_eps: cfg.norm_eps,
            dropout: cfg.dropout,
            shape: [cfg.seq_len, cfg.nodes, d],
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn cells(&self) -> &[AstucCell] {
        &self.cells
    }

    pub fn cells_mut(&mut self) -> &mut [AstucCell] {
        &mut self.cells
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    pub fn memory_mut(&mut self) -> &mut Memory {
        &mut self.memory
    }

    pub fn norm_weight(&self) -> ParamId {
        self.norm_weight
    }

    pub fn out_norm_weight(&self) -> ParamId {
        self.out_norm_weight
    }

    pub fn dropout(&self) -> f64 {
        self.dropout
    }

    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(StumError::Config(format!("dropout must lie in [0, 1), got {rate}")));
        }
        self.dropout = rate;
        Ok(())
    }

    /// Returns `(H_out, ΔW_out)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_in: Var,
        mode: &mut ForwardMode<'_>,
    ) -> Result<(Var, Var)> {
        let shape = tape.shape(x_in);
        if shape.len() != 4 || shape[1..] != self.shape {
            let expected = [0, self.shape[0], self.shape[1], self.shape[2]];
            return Err(StumError::shape("MlrfBlock::forward", shape, &expected));
        }
        let w = tape.param(store, self.norm_weight);
        let x_hat = tape.rms_norm(x_in, w, self.norm_eps, self.norm_variant)?;

        let mut g_s: Option<Var> = None;
        let mut g_t: Option<Var> = None;
        for pair in self.cells.chunks(2) {
            let t = update_time(&pair[0], tape, store, x_hat, g_s)?;
            let s = update_space(&pair[1], tape, store, x_hat, Some(t))?;
            g_t = Some(t);
            g_s = Some(s);
        }
        let (g_t, g_s) = (g_t.expect("at least one pair"), g_s.expect("at least one pair"));
        let merged = memory_merge(&self.memory, tape, store, g_t, g_s)?;
        let wo = tape.param(store, self.out_norm_weight);
        let delta = tape.rms_norm(merged, wo, self.norm_eps, self.norm_variant)?;

        let carried = match mode.dropout_rng.as_deref_mut() {
            Some(rng) if self.dropout > 0.0 => {
                let mask = dropout_mask(tape.shape(delta), self.dropout, rng);
                let m = tape.constant(mask);
                tape.mul(delta, m)?
            }
            _ => delta,
        };
        let h_out = tape.add(x_in, carried)?;
        Ok((h_out, delta))
    }

    pub fn trainable_param_count(&self, store: &ParamStore) -> usize {
        let cells: usize = self.cells.iter().map(|c| c.trainable_param_count(store)).sum();
        cells + self.memory.trainable_param_count(store) + 2 * self.shape[2]
    }

    pub fn dense_equivalent_count(&self, store: &ParamStore) -> usize {
        let cells: usize = self.cells.iter().map(|c| c.dense_equivalent_count(store)).sum();
        cells + self.memory.trainable_param_count(store) + 2 * self.shape[2]
    }
}

/// Inverted dropout mask: kept entries are scaled by `1 / (1 − rate)`.
fn dropout_mask(shape: &[usize], rate: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let keep = 1.0 - rate;
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::new(shape, data).expect("mask matches its shape")
}

#[derive(Clone, Debug)]
pub struct MlrfStack {
    blocks: Vec<MlrfBlock>,
}

impl MlrfStack {
    pub fn new(store: &mut ParamStore, layers: usize, cfg: &MlrfConfig, rng: &mut impl Rng) -> Result<Self> {
        if layers == 0 {
            return Err(StumError::Config("the stack needs at least one block".into()));
        }
        let blocks = (0..layers)
            .map(|l| MlrfBlock::new(store, l, cfg, rng))
            .collect::<Result<_>>()?;
        Ok(MlrfStack { blocks })
    }

    pub fn blocks(&self) -> &[MlrfBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [MlrfBlock] {
        &mut self.blocks
    }

    /// Returns the last block's `(H, ΔW)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x0: Var,
        mode: &mut ForwardMode<'_>,
    ) -> Result<(Var, Var)> {
        let mut h = x0;
        let mut delta = x0;
        for block in &self.blocks {
            (h, delta) = block.forward(tape, store, h, mode)?;
        }
        Ok((h, delta))
    }

    pub fn trainable_param_count(&self, store: &ParamStore) -> usize {
        self.blocks.iter().map(|b| b.trainable_param_count(store)).sum()
    }

    pub fn dense_equivalent_count(&self, store: &ParamStore) -> usize {
        self.blocks.iter().map(|b| b.dense_equivalent_count(store)).sum()
    }
}

/// Convenience for seeding a dropout stream from a run seed and step.
pub fn dropout_stream(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}
