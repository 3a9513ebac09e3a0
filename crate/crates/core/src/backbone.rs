//! Global feature extractors producing the backbone forecast `z_b`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::TrafficGraph;
use crate::error::{Result, StumError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Activation, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    #[default]
    Mlp,
    /// One normalized-adjacency aggregation before the MLP.
    #[serde(rename = "graphconv")]
    GraphConv,
}

impl FromStr for BackboneKind {
    type Err = StumError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(BackboneKind::Mlp),
            "graphconv" => Ok(BackboneKind::GraphConv),
            other => Err(StumError::Config(format!("unknown backbone kind {other:?}"))),
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Mlp => "mlp",
            BackboneKind::GraphConv => "graphconv",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub hidden: Vec<usize>,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            kind: BackboneKind::Mlp,
            hidden: vec![64, 64],
        }
    }
}

impl BackboneSpec {
    pub fn uses_adjacency(&self) -> bool {
        self.kind == BackboneKind::GraphConv
    }
}

/// Fully connected layer over the last axis, `x·W + b`.
#[derive(Clone, Debug)]
pub struct Dense {
    weight: ParamId,
    bias: ParamId,
    in_dim: usize,
    out_dim: usize,
}

impl Dense {
    /// Weights uniform in `±1/√in`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::new(&[in_dim, out_dim], w).expect("dense weight"),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true);
        Dense {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, act: Activation) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let xw = tape.matmul(x, w)?;
        let y = tape.add(xw, b)?;
        tape.activation(act, y)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    spec: BackboneSpec,
    layers: Vec<Dense>,
    input_len: usize,
    in_channels: usize,
    horizon: usize,
    out_channels: usize,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        spec: &BackboneSpec,
        input_len: usize,
        in_channels: usize,
        horizon: usize,
        out_channels: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if spec.hidden.contains(&0) {
            return Err(StumError::Config("backbone hidden sizes must be positive".into()));
        }
        let mut dims = vec![input_len * in_channels];
        dims.extend(&spec.hidden);
        dims.push(horizon * out_channels);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(store, &format!("backbone.fc{i}"), w[0], w[1], rng))
            .collect();
        Ok(Backbone {
            spec: spec.clone(),
            layers,
            input_len,
            in_channels,
            horizon,
            out_channels,
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    /// `X: B × s × N × C` to `z_b: B × h × N × c_out`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, graph: Option<&TrafficGraph>) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.input_len || shape[3] != self.in_channels {
            let expected = [0, self.input_len, 0, self.in_channels];
            return Err(StumError::shape("Backbone::forward", &shape, &expected));
        }
        let (b, n) = (shape[0], shape[2]);
        let x = match self.spec.kind {
            BackboneKind::Mlp => x,
            BackboneKind::GraphConv => {
                let graph = graph.ok_or(StumError::MissingGraph)?;
                if graph.num_nodes() != n {
                    return Err(StumError::DimensionMismatch(format!(
                        "graph has {} nodes, input has {n}",
                        graph.num_nodes()
                    )));
                }
                // out_i = Σ_k Â[i,k]·x_k, i.e. mixing with Âᵀ.
                let a_t = graph.normalized_with_self_loops().permute(&[1, 0])?;
                let m = tape.constant(a_t);
                tape.axis_mix(x, m, None, 2)?
            }
        };
        let per_node = tape.permute(x, &[0, 2, 1, 3])?;
        let mut hdn = tape.reshape(per_node, &[b, n, self.input_len * self.in_channels])?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let act = if i == last {
                Activation::Identity
            } else {
                Activation::Relu
            };
            hdn = layer.forward(tape, store, hdn, act)?;
        }
        let out = tape.reshape(hdn, &[b, n, self.horizon, self.out_channels])?;
        tape.permute(out, &[0, 2, 1, 3])
    }
}
