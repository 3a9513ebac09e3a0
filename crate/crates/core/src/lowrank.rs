//! Low-rank adaptive linear layer: a frozen base weight `W` plus a trainable
//! rank-`r` update `Δw = A·Bᵀ·scale` and a trainable bias.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StumError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Activation, Tape, Tensor, Var};

/// How the factor product is scaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleConvention {
    /// `r / (α + ε)`
    #[default]
    RankOverScale,
    /// `α / r`
    AlphaOverR,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowRankConfig {
    pub rank: usize,
    pub lora_scale: f64,
    pub eps: f64,
    pub convention: ScaleConvention,
    pub train_base_weight: bool,
}

impl Default for LowRankConfig {
    fn default() -> Self {
        LowRankConfig {
            rank: 4,
            lora_scale: 1.0,
            eps: 1e-8,
            convention: ScaleConvention::RankOverScale,
            train_base_weight: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LowRankLinear {
    in_dim: usize,
    out_dim: usize,
    rank: usize,
    scale: f64,
    train_base_weight: bool,
    weight: ParamId,
    /// `A: in × r` and `B: out × r`; absent when `r = 0`.
    factors: Option<(ParamId, ParamId)>,
    bias: ParamId,
}

impl LowRankLinear {
    /// Registers `{name}.weight`, `{name}.lora_a`, `{name}.lora_b` and
    /// `{name}.bias`. The rank is clamped to `min(in_dim, out_dim)`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        cfg: &LowRankConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(StumError::Config(format!("{name}: zero-sized layer")));
        }
        let rank = cfg.rank.min(in_dim).min(out_dim);
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut uniform = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("shape matches")
        };
        let w = uniform(&[in_dim, out_dim]);
        let a = (rank > 0).then(|| uniform(&[in_dim, rank]));
        let weight = store.add(format!("{name}.weight"), w, cfg.train_base_weight);
        let factors = a.map(|a| {
            (
                store.add(format!("{name}.lora_a"), a, true),
                store.add(format!("{name}.lora_b"), Tensor::zeros(&[out_dim, rank]), true),
            )
        });
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true);
        let scale = match cfg.convention {
            ScaleConvention::RankOverScale => rank as f64 / (cfg.lora_scale + cfg.eps),
            ScaleConvention::AlphaOverR if rank > 0 => cfg.lora_scale / rank as f64,
            ScaleConvention::AlphaOverR => 0.0,
        };
        Ok(LowRankLinear {
            in_dim,
            out_dim,
            rank,
            scale,
            train_base_weight: cfg.train_base_weight,
            weight,
            factors,
            bias,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn factor_a(&self) -> Option<ParamId> {
        self.factors.map(|f| f.0)
    }

    pub fn factor_b(&self) -> Option<ParamId> {
        self.factors.map(|f| f.1)
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    /// `Δw = A·Bᵀ·scale` recorded on the tape; `None` when `r = 0`.
    pub fn delta_weight(&self, tape: &mut Tape, store: &ParamStore) -> Result<Option<Var>> {
        let Some((a, b)) = self.factors else {
            return Ok(None);
        };
        let a = tape.param(store, a);
        let b = tape.param(store, b);
        let bt = tape.transpose(b)?;
        let ab = tape.matmul(a, bt)?;
        Ok(Some(tape.scale(ab, self.scale)))
    }

    /// Evaluates `Δw` without recording gradients.
    pub fn delta_weight_value(&self, store: &ParamStore) -> Tensor {
        let mut tape = Tape::inference();
        match self.delta_weight(&mut tape, store).expect("factor shapes are fixed") {
            Some(d) => tape.value(d).clone(),
            None => Tensor::zeros(&[self.in_dim, self.out_dim]),
        }
    }

    /// `W + Δw`
    pub fn effective_weight(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let w = tape.param(store, self.weight);
        match self.delta_weight(tape, store)? {
            Some(d) => tape.add(w, d),
            None => Ok(w),
        }
    }

    /// `σ(x·(W + Δw) + b)` over the last axis of `x`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, act: Activation) -> Result<Var> {
        let last = tape
            .shape(x)
            .len()
            .checked_sub(1)
            .ok_or_else(|| StumError::shape("LowRankLinear::forward", &[], &[self.in_dim]))?;
        self.forward_along(tape, store, x, last, act)
    }

    /// Applies the layer along `axis`, mixing positions of that extent.
    pub fn forward_along(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        axis: usize,
        act: Activation,
    ) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.get(axis) != Some(&self.in_dim) {
            return Err(StumError::shape("LowRankLinear", &shape, &[self.in_dim, self.out_dim]));
        }
        let last = axis + 1 == shape.len();
        let m = self.effective_weight(tape, store)?;
        let b = tape.param(store, self.bias);
        let y = if shape.len() == 1 {
            let row = tape.reshape(x, &[1, self.in_dim])?;
            let xm = tape.matmul(row, m)?;
            let xm = tape.reshape(xm, &[self.out_dim])?;
            tape.add(xm, b)?
        } else if last {
            let xm = tape.matmul(x, m)?;
            tape.add(xm, b)?
        } else {
            tape.axis_mix(x, m, Some(b), axis)?
        };
        tape.activation(act, y)
    }

    /// `r·(N_in + M_out) + M_out`, plus `N_in·M_out` if the base weight trains.
    pub fn trainable_param_count(&self) -> usize {
        let base = if self.train_base_weight {
            self.in_dim * self.out_dim
        } else {
            0
        };
        self.rank * (self.in_dim + self.out_dim) + self.out_dim + base
    }

    /// Trainable count of a dense layer of the same shape.
    pub fn dense_equivalent_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}
