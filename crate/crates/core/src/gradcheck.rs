//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Edge, TrafficGraph};
use crate::error::Result;
use crate::mlrf::ForwardMode;
use crate::model::{Stum, StumConfig};
use crate::params::ParamStore;
use crate::tensor::{Activation, NormVariant, ReduceKind, Tape, Tensor, Var};
use crate::trainer::mae_loss;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / scale
}

fn eval_scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).item()
}

/// Max relative error between the tape gradient of the scalar `f(x)` and
/// central differences `(f(x + h·e) − f(x − h·e)) / 2h`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = eval_at(&f, &probe)?;
        probe.data_mut()[k] = orig - h;
        let minus = eval_at(&f, &probe)?;
        probe.data_mut()[k] = orig;
        worst = worst.max(rel_error(analytic.data()[k], (plus - minus) / (2.0 * h)));
    }
    Ok(worst)
}

fn eval_at<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let xv = tape.leaf(x.clone(), false);
    let out = f(&mut tape, xv)?;
    Ok(eval_scalar(&tape, out))
}

/// Per-parameter outcome of [`finite_diff_check_params`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

/// Checks the gradient of a scalar built from `store` with respect to every
/// trainable parameter. Parameter values are restored afterwards.
pub fn finite_diff_check_params<F>(store: &mut ParamStore, h: f64, f: F) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?;
    store.accumulate_grads(&tape);
    drop(tape);

    let ids: Vec<_> = store.trainable().map(|(id, _)| id).collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = store
            .get(id)
            .grad()
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        let mut worst = 0.0f64;
        for k in 0..analytic.len() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let plus = eval_params(&f, store)?;
            store.value_mut(id).data_mut()[k] = orig - h;
            let minus = eval_params(&f, store)?;
            store.value_mut(id).data_mut()[k] = orig;
            worst = worst.max(rel_error(analytic.data()[k], (plus - minus) / (2.0 * h)));
        }
        out.push(ParamCheck {
            name: store.get(id).name().to_string(),
            max_rel_error: worst,
            max_abs_grad: analytic.data().iter().fold(0.0, |m, v| m.max(v.abs())),
        });
    }
    store.zero_grads();
    Ok(out)
}

fn eval_params<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let out = f(&mut tape, store)?;
    Ok(eval_scalar(&tape, out))
}

/// Step used by the suite's central differences.
pub const SUITE_STEP: f64 = 1e-5;

/// One named entry of the gradient-check suite.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

type ScalarFn = dyn Fn(&mut Tape, Var) -> Result<Var>;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// Weighted sum so every output element carries a distinct cotangent.
fn probe(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = t.constant(random(t.shape(y), seed));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn constant(t: &mut Tape, shape: &[usize], seed: u64) -> Var {
    t.constant(random(shape, seed))
}

fn op_cases() -> Vec<(&'static str, Box<ScalarFn>, Tensor)> {
    vec![
        (
            "matmul_lhs",
            Box::new(|t, x| {
                let b = constant(t, &[3, 4], 2);
                let y = t.matmul(x, b)?;
                probe(t, y, 3)
            }),
            random(&[2, 2, 3], 1),
        ),
        (
            "matmul_rhs",
            Box::new(|t, x| {
                let a = constant(t, &[2, 5, 3], 4);
                let y = t.matmul(a, x)?;
                probe(t, y, 5)
            }),
            random(&[3, 4], 6),
        ),
        (
            "add_broadcast",
            Box::new(|t, x| {
                let a = constant(t, &[3, 4], 7);
                let y = t.add(a, x)?;
                probe(t, y, 8)
            }),
            random(&[4], 9),
        ),
        (
            "sub_broadcast",
            Box::new(|t, x| {
                let a = constant(t, &[3, 1], 10);
                let y = t.sub(a, x)?;
                probe(t, y, 11)
            }),
            random(&[2, 3, 4], 12),
        ),
        (
            "hadamard",
            Box::new(|t, x| {
                let y = t.mul(x, x)?;
                probe(t, y, 13)
            }),
            random(&[5], 14),
        ),
        (
            "hadamard_scalar",
            Box::new(|t, s| {
                let x = constant(t, &[3, 4], 72);
                let y = t.mul(x, s)?;
                probe(t, y, 73)
            }),
            random(&[1], 74),
        ),
        (
            "affine",
            Box::new(|t, x| {
                let y = t.affine(x, -1.7, 0.3);
                probe(t, y, 15)
            }),
            random(&[4], 16),
        ),
        (
            "relu",
            Box::new(|t, x| {
                let y = t.relu(x)?;
                probe(t, y, 17)
            }),
            random(&[6], 18),
        ),
        (
            "sigmoid",
            Box::new(|t, x| {
                let y = t.sigmoid(x)?;
                probe(t, y, 19)
            }),
            random(&[6], 20),
        ),
        (
            "softmax",
            Box::new(|t, x| {
                let y = t.softmax(x, 1)?;
                probe(t, y, 21)
            }),
            random(&[2, 4, 3], 22),
        ),
        (
            "rms_norm_x",
            Box::new(|t, x| {
                let w = constant(t, &[4], 23);
                let y = t.rms_norm(x, w, 1e-6, NormVariant::Rms)?;
                probe(t, y, 24)
            }),
            random(&[3, 4], 25),
        ),
        (
            "rms_norm_weight",
            Box::new(|t, w| {
                let x = constant(t, &[3, 4], 26);
                let y = t.rms_norm(x, w, 1e-6, NormVariant::Rms)?;
                probe(t, y, 27)
            }),
            random(&[4], 28),
        ),
        (
            "rms_norm_no_sqrt",
            Box::new(|t, x| {
                let w = constant(t, &[4], 29);
                let y = t.rms_norm(x, w, 1e-6, NormVariant::MeanSquare)?;
                probe(t, y, 30)
            }),
            random(&[3, 4], 31),
        ),
        (
            "reduce_sum_axis",
            Box::new(|t, x| {
                let y = t.reduce(ReduceKind::Sum, x, Some(0))?;
                probe(t, y, 75)
            }),
            random(&[2, 3, 2], 76),
        ),
        (
            "reduce_mean_axis",
            Box::new(|t, x| {
                let y = t.reduce(ReduceKind::Mean, x, Some(1))?;
                probe(t, y, 32)
            }),
            random(&[2, 3, 2], 33),
        ),
        ("abs_mean", Box::new(|t, x| Ok(t.abs_mean(x))), random(&[7], 34)),
        (
            "permute_reshape",
            Box::new(|t, x| {
                let p = t.permute(x, &[2, 0, 1])?;
                let r = t.reshape(p, &[4, 6])?;
                probe(t, r, 35)
            }),
            random(&[2, 3, 4], 36),
        ),
        (
            "axis_mix_x",
            Box::new(|t, x| {
                let m = constant(t, &[3, 2], 37);
                let b = constant(t, &[2], 38);
                let y = t.axis_mix(x, m, Some(b), 1)?;
                probe(t, y, 39)
            }),
            random(&[2, 3, 4], 40),
        ),
        (
            "axis_mix_matrix",
            Box::new(|t, m| {
                let x = constant(t, &[2, 3, 4], 41);
                let y = t.axis_mix(x, m, None, 1)?;
                probe(t, y, 42)
            }),
            random(&[3, 3], 43),
        ),
        (
            "axis_mix_bias",
            Box::new(|t, b| {
                let x = constant(t, &[2, 3, 4], 44);
                let m = constant(t, &[4, 4], 45);
                let y = t.axis_mix(x, m, Some(b), 2)?;
                probe(t, y, 46)
            }),
            random(&[4], 47),
        ),
        (
            "lerp_gate",
            Box::new(|t, g| {
                let p = constant(t, &[2, 3], 48);
                let n = constant(t, &[2, 3], 49);
                let y = t.lerp(Some(p), n, g)?;
                probe(t, y, 50)
            }),
            random(&[3], 51),
        ),
        (
            "lerp_inputs",
            Box::new(|t, x| {
                let g = t.constant(Tensor::scalar(0.3));
                let n = t.relu(x)?;
                let y = t.lerp(Some(x), n, g)?;
                probe(t, y, 52)
            }),
            random(&[2, 3], 53),
        ),
        (
            "mix_update_x",
            Box::new(|t, x| {
                let p = constant(t, &[2, 3, 4], 54);
                let m = constant(t, &[3, 3], 55);
                let b = constant(t, &[3], 56);
                let g = t.constant(Tensor::scalar(0.6));
                let y = t.mix_update(x, Some(p), m, Some(b), Some(g), 1, Activation::Relu)?;
                probe(t, y, 57)
            }),
            random(&[2, 3, 4], 58),
        ),
        (
            "mix_update_prev",
            Box::new(|t, p| {
                let x = constant(t, &[2, 3, 4], 59);
                let m = constant(t, &[4, 4], 60);
                let g = t.constant(Tensor::scalar(0.6));
                let y = t.mix_update(x, Some(p), m, None, Some(g), 2, Activation::Relu)?;
                probe(t, y, 61)
            }),
            random(&[2, 3, 4], 62),
        ),
        (
            "mix_update_matrix",
            Box::new(|t, m| {
                let x = constant(t, &[2, 3, 4], 63);
                let p = constant(t, &[2, 3, 4], 64);
                let y = t.mix_update(x, Some(p), m, None, None, 2, Activation::Relu)?;
                probe(t, y, 65)
            }),
            random(&[4, 4], 66),
        ),
        (
            "mix_update_bias",
            Box::new(|t, b| {
                let x = constant(t, &[2, 4, 3], 77);
                let m = constant(t, &[3, 3], 78);
                let y = t.mix_update(x, None, m, Some(b), None, 2, Activation::Identity)?;
                probe(t, y, 79)
            }),
            random(&[3], 80),
        ),
        (
            "mix_update_gate",
            Box::new(|t, g| {
                let x = constant(t, &[2, 3, 4], 67);
                let p = constant(t, &[2, 3, 4], 68);
                let m = constant(t, &[3, 3], 69);
                let b = constant(t, &[3], 70);
                let y = t.mix_update(x, Some(p), m, Some(b), Some(g), 1, Activation::Relu)?;
                probe(t, y, 71)
            }),
            Tensor::vector(&[0.4]),
        ),
    ]
}

/// Finite-difference check of every differentiable tape operation at fixed
/// random points.
pub fn op_suite(h: f64) -> Result<Vec<CheckResult>> {
    op_cases()
        .into_iter()
        .map(|(name, f, x)| {
            Ok(CheckResult {
                name: name.to_string(),
                max_rel_error: finite_diff_check(f, &x, h)?,
            })
        })
        .collect()
}

/// Configuration of the toy model used by [`model_check`].
pub fn toy_config() -> StumConfig {
    StumConfig {
        input_len: 3,
        horizon: 3,
        num_nodes: 4,
        in_channels: 1,
        embed_dim: 8,
        num_mlrf: 2,
        astucs_per_block: 4,
        seed: 5,
        ..StumConfig::default()
    }
}

/// Checks the MAE loss of a full model forward against central differences
/// for every trainable parameter. Parameters are first moved to a random
/// point (low-rank `B` factors start at zero, which would hide the `A`
/// gradients).
pub fn model_check(cfg: StumConfig, graph: Option<&TrafficGraph>, h: f64) -> Result<Vec<ParamCheck>> {
    let model = Stum::new(cfg.clone())?;
    let mut store = model.params().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let ids: Vec<_> = store.trainable().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    let shape = [2, cfg.input_len, cfg.num_nodes, cfg.in_channels];
    let x = random(&shape, cfg.seed + 1);
    let y = random(&[2, cfg.horizon, cfg.num_nodes, cfg.in_channels], cfg.seed + 2);
    finite_diff_check_params(&mut store, h, |tape, store| {
        let xv = tape.constant(x.clone());
        let out = model.forward_with(tape, store, xv, graph, &mut ForwardMode::inference())?;
        let yv = tape.constant(y.clone());
        mae_loss(tape, out.z, yv)
    })
}

/// A ring graph over `n` nodes with unit weights in both directions.
pub fn ring_graph(n: usize) -> TrafficGraph {
    let edges = (0..n)
        .flat_map(|i| {
            let j = (i + 1) % n;
            [
                Edge {
                    from: i,
                    to: j,
                    weight: 1.0,
                },
                Edge {
                    from: j,
                    to: i,
                    weight: 1.0,
                },
            ]
        })
        .collect();
    TrafficGraph::new(n, edges).expect("ring edges are in range")
}

/// Every tape operation plus the full model with both backbones; one entry
/// per operation and per model (worst parameter).
pub fn full_suite(h: f64) -> Result<Vec<CheckResult>> {
    let mut out = op_suite(h)?;
    let mlp = toy_config();
    let graphconv = StumConfig {
        backbone: crate::backbone::BackboneSpec {
            kind: crate::backbone::BackboneKind::GraphConv,
            ..mlp.backbone.clone()
        },
        ..mlp.clone()
    };
    let graph = ring_graph(mlp.num_nodes);
    for (name, cfg, g) in [
        ("stum_mlp_mae", mlp, None),
        ("stum_graphconv_mae", graphconv, Some(&graph)),
    ] {
        let checks = model_check(cfg, g, h)?;
        out.push(CheckResult {
            name: name.to_string(),
            max_rel_error: checks.iter().fold(0.0, |m, c| m.max(c.max_rel_error)),
        });
    }
    Ok(out)
}
