//! Full model: backbone and low-rank enhancement branch blended by a
//! learned fusion gate, `Z = (1 − α)·z_b + α·z_t`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::astuc::{MergeForm, UpdateForm};
use crate::backbone::{Backbone, BackboneSpec, Dense};
use crate::data::TrafficGraph;
use crate::error::{Result, StumError};
use crate::gate::Gate;
use crate::lowrank::{LowRankConfig, LowRankLinear, ScaleConvention};
use crate::mlrf::{ForwardMode, MlrfConfig, MlrfStack};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::{Activation, NormVariant, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateShape {
    #[default]
    Scalar,
    PerChannel,
}

/// Nonlinearity applied to the final hidden state before the predictor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadActivation {
    #[default]
    Relu,
    /// Softmax over the embedding features.
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StumConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub num_nodes: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_mlrf: usize,
    pub astucs_per_block: usize,
    /// `None` picks `ceil(embed_dim / 4)`.
    pub rank: Option<usize>,
    pub lora_scale: f64,
    pub lora_eps: f64,
    pub lora_convention: ScaleConvention,
    pub train_base_weight: bool,
    pub cell_gate_init: f64,
    pub retain_init: f64,
    pub gate_init: f64,
    pub gate_shape: GateShape,
    pub head_activation: HeadActivation,
    pub norm_variant: NormVariant,
    pub norm_eps: f64,
    pub dropout: f64,
    pub update_form: UpdateForm,
    pub merge_form: MergeForm,
    pub backbone: BackboneSpec,
    /// `false` builds the bare backbone with no enhancement branch.
    pub enhance: bool,
    pub seed: u64,
}

impl Default for StumConfig {
    fn default() -> Self {
        StumConfig {
            input_len: 12,
            horizon: 12,
            num_nodes: 20,
            in_channels: 1,
            embed_dim: 16,
            num_mlrf: 4,
            astucs_per_block: 8,
            rank: None,
            lora_scale: 1.0,
            lora_eps: 1e-8,
            lora_convention: ScaleConvention::RankOverScale,
            train_base_weight: false,
            cell_gate_init: 0.5,
            retain_init: 0.9,
            gate_init: 0.5,
            gate_shape: GateShape::Scalar,
            head_activation: HeadActivation::Relu,
            norm_variant: NormVariant::Rms,
            norm_eps: 1e-6,
            dropout: 0.1,
            update_form: UpdateForm::Gated,
            merge_form: MergeForm::Sum,
            backbone: BackboneSpec::default(),
            enhance: true,
            seed: 0,
        }
    }
}

impl StumConfig {
    pub fn effective_rank(&self) -> usize {
        self.rank.unwrap_or_else(|| self.embed_dim.div_ceil(4).max(1))
    }

    pub fn lowrank(&self) -> LowRankConfig {
        LowRankConfig {
            rank: self.effective_rank(),
            lora_scale: self.lora_scale,
            eps: self.lora_eps,
            convention: self.lora_convention,
            train_base_weight: self.train_base_weight,
        }
    }

    pub fn mlrf(&self) -> MlrfConfig {
        MlrfConfig {
            seq_len: self.input_len,
            nodes: self.num_nodes,
            embed_dim: self.embed_dim,
            cells: self.astucs_per_block,
            lowrank: self.lowrank(),
            update_form: self.update_form,
            merge_form: self.merge_form,
            cell_gate_init: self.cell_gate_init,
            retain_init: self.retain_init,
            norm_variant: self.norm_variant,
            norm_eps: self.norm_eps,
            dropout: self.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("input_len", self.input_len),
            ("horizon", self.horizon),
            ("num_nodes", self.num_nodes),
            ("in_channels", self.in_channels),
            ("embed_dim", self.embed_dim),
            ("num_mlrf", self.num_mlrf),
            ("astucs_per_block", self.astucs_per_block),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(StumError::Config(format!("model.{name} must be at least 1")));
            }
        }
        if !self.astucs_per_block.is_multiple_of(2) {
            return Err(StumError::Config(format!(
                "model.astucs_per_block must be even, got {}",
                self.astucs_per_block
            )));
        }
        for (name, v) in [
            ("gate_init", self.gate_init),
            ("cell_gate_init", self.cell_gate_init),
            ("retain_init", self.retain_init),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(StumError::Config(format!("model.{name} must lie in (0, 1), got {v}")));
            }
        }
        if !(self.norm_eps >= 0.0 && self.lora_scale.is_finite()) {
            return Err(StumError::Config("norm_eps must be ≥ 0 and lora_scale finite".into()));
        }
        self.mlrf().validate()
    }
}

/// Backbone forecast and per-position embedding.
#[derive(Clone, Copy, Debug)]
pub struct DualFeatures {
    pub z_b: Var,
    /// `None` for the backbone-only model.
    pub embedded: Option<Var>,
}

/// Every intermediate the caller may want from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub z: Var,
    pub z_b: Var,
    pub z_t: Option<Var>,
    /// Final residual stream `H_L`, `B × s × N × d`.
    pub hidden: Option<Var>,
}

#[derive(Clone, Debug)]
struct Enhancer {
    extractor: LowRankLinear,
    stack: MlrfStack,
    head: Dense,
    fusion: Gate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub trainable: usize,
    pub frozen: usize,
    /// Trainable count per top-level module.
    pub per_module: BTreeMap<String, usize>,
    /// Trainable count if every low-rank map were a full dense layer.
    pub dense_equivalent: usize,
    pub mlrf_trainable: usize,
    pub mlrf_dense_equivalent: usize,
}

#[derive(Clone, Debug)]
pub struct Stum {
    cfg: StumConfig,
    params: ParamStore,
    backbone: Backbone,
    enhancer: Option<Enhancer>,
}

impl Stum {
    pub fn new(cfg: StumConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        let c_out = cfg.in_channels;
        let backbone = Backbone::new(
            &mut params,
            &cfg.backbone,
            cfg.input_len,
            cfg.in_channels,
            cfg.horizon,
            c_out,
            &mut rng,
        )?;
        let enhancer = if cfg.enhance {
            let extractor = LowRankLinear::new(
                &mut params,
                "extractor",
                cfg.in_channels,
                cfg.embed_dim,
                &cfg.lowrank(),
                &mut rng,
            )?;
            let stack = MlrfStack::new(&mut params, cfg.num_mlrf, &cfg.mlrf(), &mut rng)?;
            let head = Dense::new(
                &mut params,
                "head",
                cfg.input_len * cfg.embed_dim,
                cfg.horizon * c_out,
                &mut rng,
            );
            let gate_shape = match cfg.gate_shape {
                GateShape::Scalar => vec![1],
                GateShape::PerChannel => vec![c_out],
            };
            let fusion = Gate::new(
                &mut params,
                "fusion.alpha",
                &gate_shape,
                cfg.gate_init,
                ParamGroup::FusionGate,
            )?;
            Some(Enhancer {
                extractor,
                stack,
                head,
                fusion,
            })
        } else {
            None
        };
        Ok(Stum {
            cfg,
            params,
            backbone,
            enhancer,
        })
    }

    pub fn config(&self) -> &StumConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn extractor(&self) -> Option<&LowRankLinear> {
        self.enhancer.as_ref().map(|e| &e.extractor)
    }

    pub fn stack(&self) -> Option<&MlrfStack> {
        self.enhancer.as_ref().map(|e| &e.stack)
    }

    pub fn stack_mut(&mut self) -> Option<&mut MlrfStack> {
        self.enhancer.as_mut().map(|e| &mut e.stack)
    }

    pub fn head(&self) -> Option<&Dense> {
        self.enhancer.as_ref().map(|e| &e.head)
    }

    pub fn fusion_gate(&self) -> Option<&Gate> {
        self.enhancer.as_ref().map(|e| &e.fusion)
    }

    /// Pins α to a constant (or releases it with `None`).
    pub fn force_alpha(&mut self, alpha: Option<f64>) {
        if let Some(e) = &mut self.enhancer {
            e.fusion.force(alpha);
        }
    }

    /// All low-rank maps, extractor first.
    pub fn lowrank_layers(&self) -> Vec<&LowRankLinear> {
        let Some(e) = &self.enhancer else {
            return Vec::new();
        };
        let mut out = vec![&e.extractor];
        for block in e.stack.blocks() {
            out.extend(block.cells().iter().map(|c| c.map()));
        }
        out
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.cfg;
        if shape.len() != 4 || shape[1] != c.input_len || shape[2] != c.num_nodes || shape[3] != c.in_channels {
            let expected = [0, c.input_len, c.num_nodes, c.in_channels];
            return Err(StumError::shape("Stum::forward", shape, &expected));
        }
        Ok(())
    }

    /// `z_b = F_b(X)` and `X' = F_c(X)`.
    pub fn extract_dual(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        graph: Option<&TrafficGraph>,
    ) -> Result<DualFeatures> {
        self.check_input(tape.shape(x))?;
        let z_b = self.backbone.forward(tape, store, x, graph)?;
        let embedded = match &self.enhancer {
            Some(e) => Some(e.extractor.forward(tape, store, x, Activation::Identity)?),
            None => None,
        };
        Ok(DualFeatures { z_b, embedded })
    }

    /// `z_t = FC(σ(H_L))`, collapsing `s × d` to `h × c_out` per node.
    pub fn predict_head(&self, tape: &mut Tape, store: &ParamStore, hidden: Var) -> Result<Var> {
        let e = self.enhancer.as_ref().ok_or_else(no_enhancer)?;
        let shape = tape.shape(hidden).to_vec();
        let (s, d) = (self.cfg.input_len, self.cfg.embed_dim);
        if shape.len() != 4 || shape[1] != s || shape[3] != d {
            return Err(StumError::shape("predict_head", &shape, &[0, s, 0, d]));
        }
        let (b, n) = (shape[0], shape[2]);
        let act = match self.cfg.head_activation {
            HeadActivation::Relu => tape.relu(hidden)?,
            HeadActivation::Softmax => tape.softmax(hidden, 3)?,
        };
        let per_node = tape.permute(act, &[0, 2, 1, 3])?;
        let flat = tape.reshape(per_node, &[b, n, s * d])?;
        let out = e.head.forward(tape, store, flat, Activation::Identity)?;
        let out = tape.reshape(out, &[b, n, self.cfg.horizon, self.cfg.in_channels])?;
        tape.permute(out, &[0, 2, 1, 3])
    }

    /// `Z = (1 − α)·z_b + α·z_t`.
    pub fn fuse(&self, tape: &mut Tape, store: &ParamStore, z_b: Var, z_t: Var) -> Result<Var> {
        let e = self.enhancer.as_ref().ok_or_else(no_enhancer)?;
        if tape.shape(z_b) != tape.shape(z_t) {
            return Err(StumError::shape("fuse", tape.shape(z_b), tape.shape(z_t)));
        }
        let alpha = e.fusion.value(tape, store)?;
        tape.lerp(Some(z_b), z_t, alpha)
    }

    /// Forward pass against an explicit parameter store.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        graph: Option<&TrafficGraph>,
        mode: &mut ForwardMode<'_>,
    ) -> Result<ForwardVars> {
        let dual = self.extract_dual(tape, store, x, graph)?;
        let (Some(e), Some(embedded)) = (&self.enhancer, dual.embedded) else {
            return Ok(ForwardVars {
                z: dual.z_b,
                z_b: dual.z_b,
                z_t: None,
                hidden: None,
            });
        };
        let (hidden, _) = e.stack.forward(tape, store, embedded, mode)?;
        let z_t = self.predict_head(tape, store, hidden)?;
        let z = self.fuse(tape, store, dual.z_b, z_t)?;
        Ok(ForwardVars {
            z,
            z_b: dual.z_b,
            z_t: Some(z_t),
            hidden: Some(hidden),
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        graph: Option<&TrafficGraph>,
        mode: &mut ForwardMode<'_>,
    ) -> Result<ForwardVars> {
        self.forward_with(tape, &self.params, x, graph, mode)
    }

    /// Inference-mode prediction on the normalized scale.
    pub fn predict(&self, x: &Tensor, graph: Option<&TrafficGraph>) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, xv, graph, &mut ForwardMode::inference())?;
        Ok(tape.value(out.z).clone())
    }

    pub fn param_report(&self) -> ParamReport {
        let store = &self.params;
        let mut per_module = BTreeMap::new();
        for (_, p) in store.trainable() {
            let module = p.name().split('.').next().unwrap_or("").to_string();
            *per_module.entry(module).or_insert(0) += p.value().len();
        }
        let layers = self.lowrank_layers();
        let lowrank_trainable: usize = layers.iter().map(|l| l.trainable_param_count()).sum();
        let lowrank_dense: usize = layers.iter().map(|l| l.dense_equivalent_count()).sum();
        let trainable = store.trainable_count();
        let (mlrf_trainable, mlrf_dense_equivalent) = match self.stack() {
            Some(s) => (s.trainable_param_count(store), s.dense_equivalent_count(store)),
            None => (0, 0),
        };
        ParamReport {
            trainable,
            frozen: store.frozen_count(),
            per_module,
            dense_equivalent: trainable - lowrank_trainable + lowrank_dense,
            mlrf_trainable,
            mlrf_dense_equivalent,
        }
    }
}

fn no_enhancer() -> StumError {
    StumError::Config("model was built without the enhancement branch".into())
}
