//! Adaptive spatio-temporal unitized cells.
//!
//! States are laid out `B × s × N × d`. A time cell mixes along the `s`
//! extent with its own low-rank map, a space cell along the `N` extent.
//! Each cell blends its fresh update with the state it received:
//!
//! ```text
//! G = g · relu(Mix(X + G_prev)) + (1 − g) · G_prev
//! ```
//!
//! and the memory merge folds the last temporal and spatial carriers into
//! the block's adaptive state, `ΔW = m ⊙ (G_t ⊕ G_s + b)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StumError};
use crate::gate::Gate;
use crate::lowrank::{LowRankConfig, LowRankLinear};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::{Activation, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellAxis {
    Time,
    Space,
}

impl CellAxis {
    /// Position of the mixed extent in a `B × s × N × d` state.
    pub fn dim(self) -> usize {
        match self {
            CellAxis::Time => 1,
            CellAxis::Space => 2,
        }
    }
}

/// How a cell combines its update with the incoming carrier.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateForm {
    /// Gated blend with the carried state.
    #[default]
    Gated,
    /// Fresh update only: `relu(Mix(X + G_prev))`.
    Plain,
}

/// Realization of the `⊕` joint operation in the memory merge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeForm {
    /// Elementwise sum.
    #[default]
    Sum,
    /// Concatenate along features, then project back to `d`.
    ConcatProject,
}

#[derive(Clone, Debug)]
pub struct AstucCell {
    axis: CellAxis,
    map: LowRankLinear,
    gate: Option<Gate>,
}

impl AstucCell {
    /// `extent` is the length of the mixed axis (`s` or `N`).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        axis: CellAxis,
        extent: usize,
        lowrank: &LowRankConfig,
        form: UpdateForm,
        gate_init: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let map = LowRankLinear::new(store, &format!("{name}.map"), extent, extent, lowrank, rng)?;
        let gate = match form {
            UpdateForm::Gated => Some(Gate::new(
                store,
                format!("{name}.gate"),
                &[1],
                gate_init,
                ParamGroup::Theta,
            )?),
            UpdateForm::Plain => None,
        };
        Ok(AstucCell { axis, map, gate })
    }

    pub fn axis(&self) -> CellAxis {
        self.axis
    }

    pub fn map(&self) -> &LowRankLinear {
        &self.map
    }

    pub fn gate(&self) -> Option<&Gate> {
        self.gate.as_ref()
    }

    pub fn gate_mut(&mut self) -> Option<&mut Gate> {
        self.gate.as_mut()
    }

    /// One update of this cell given input `x` and the carrier from the
    /// opposite axis. `prev = None` stands for a zero carrier.
    pub fn update(&self, tape: &mut Tape, store: &ParamStore, x: Var, prev: Option<Var>) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 4 {
            return Err(StumError::shape("AstucCell::update", shape, &[0, 0, 0, 0]));
        }
        if let Some(p) = prev {
            if tape.shape(p) != tape.shape(x) {
                return Err(StumError::shape("AstucCell::update", tape.shape(x), tape.shape(p)));
            }
        }
        let m = self.map.effective_weight(tape, store)?;
        let b = tape.param(store, self.map.bias());
        let gate = match &self.gate {
            Some(g) => Some(g.value(tape, store)?),
            None => None,
        };
        tape.mix_update(x, prev, m, Some(b), gate, self.axis.dim(), Activation::Relu)
    }

    pub fn trainable_param_count(&self, store: &ParamStore) -> usize {
        self.map.trainable_param_count() + self.gate.as_ref().map_or(0, |g| g.param_count(store))
    }

    pub fn dense_equivalent_count(&self, store: &ParamStore) -> usize {
        self.map.dense_equivalent_count() + self.gate.as_ref().map_or(0, |g| g.param_count(store))
    }
}

fn expect_axis(cell: &AstucCell, axis: CellAxis) -> Result<()> {
    if cell.axis != axis {
        return Err(StumError::Config(format!(
            "expected a {axis:?} cell, got {:?}",
            cell.axis
        )));
    }
    Ok(())
}

/// Temporal update: `G_t` from the input and the previous spatial carrier.
pub fn update_time(
    cell: &AstucCell,
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    g_s_prev: Option<Var>,
) -> Result<Var> {
    expect_axis(cell, CellAxis::Time)?;
    cell.update(tape, store, x, g_s_prev)
}

/// Spatial update: `G_s` from the input and the current temporal carrier.
pub fn update_space(cell: &AstucCell, tape: &mut Tape, store: &ParamStore, x: Var, g_t: Option<Var>) -> Result<Var> {
    expect_axis(cell, CellAxis::Space)?;
    cell.update(tape, store, x, g_t)
}

/// Learned retain/forget merge of the temporal and spatial carriers.
#[derive(Clone, Debug)]
pub struct Memory {
    retain: Gate,
    bias: ParamId,
    form: MergeForm,
    /// Halves of the concatenation projection, `d × d` each.
    projection: Option<(ParamId, ParamId)>,
}

impl Memory {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        form: MergeForm,
        retain_init: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let retain = Gate::new(store, format!("{name}.retain"), &[d], retain_init, ParamGroup::Theta)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d]), true);
        let projection = match form {
            MergeForm::Sum => None,
            MergeForm::ConcatProject => {
                let bound = 1.0 / ((2 * d) as f64).sqrt();
                let mut init = || {
                    Tensor::new(&[d, d], (0..d * d).map(|_| rng.gen_range(-bound..bound)).collect()).expect("square")
                };
                let t = init();
                let s = init();
                Some((
                    store.add(format!("{name}.proj_time"), t, true),
                    store.add(format!("{name}.proj_space"), s, true),
                ))
            }
        };
        Ok(Memory {
            retain,
            bias,
            form,
            projection,
        })
    }

    pub fn retain(&self) -> &Gate {
        &self.retain
    }

    pub fn retain_mut(&mut self) -> &mut Gate {
        &mut self.retain
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn form(&self) -> MergeForm {
        self.form
    }

    pub fn trainable_param_count(&self, store: &ParamStore) -> usize {
        let proj = self
            .projection
            .map_or(0, |(a, b)| store.value(a).len() + store.value(b).len());
        self.retain.param_count(store) + store.value(self.bias).len() + proj
    }
}

/// `ΔW = m ⊙ ((G_t ⊕ G_s) + b)`.
pub fn memory_merge(memory: &Memory, tape: &mut Tape, store: &ParamStore, g_t: Var, g_s: Var) -> Result<Var> {
    if tape.shape(g_t) != tape.shape(g_s) {
        return Err(StumError::shape("memory_merge", tape.shape(g_t), tape.shape(g_s)));
    }
    let joint = match memory.projection {
        None => tape.add(g_t, g_s)?,
        Some((pt, ps)) => {
            let wt = tape.param(store, pt);
            let ws = tape.param(store, ps);
            let a = tape.matmul(g_t, wt)?;
            let b = tape.matmul(g_s, ws)?;
            tape.add(a, b)?
        }
    };
    let bias = tape.param(store, memory.bias);
    let shifted = tape.add(joint, bias)?;
    let m = memory.retain.value(tape, store)?;
    tape.mul(m, shifted)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn cell(store: &mut ParamStore, axis: CellAxis, extent: usize) -> AstucCell {
        AstucCell::new(
            store,
            "c",
            axis,
            extent,
            &LowRankConfig::default(),
            UpdateForm::Gated,
            0.5,
            &mut rng(),
        )
        .unwrap()
    }

    fn run(c: &AstucCell, store: &ParamStore, x: &Tensor, prev: Option<&Tensor>) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let pv = prev.map(|p| tape.constant(p.clone()));
        let out = c.update(&mut tape, store, xv, pv).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn identity_map_with_open_gate_is_relu() {
        let mut store = ParamStore::new();
        let mut c = cell(&mut store, CellAxis::Time, 3);
        store.set(c.map().weight(), Tensor::eye(3)).unwrap();
        c.gate_mut().unwrap().force(Some(1.0));
        let x = random(&[2, 3, 4, 2], 1);
        let y = run(&c, &store, &x, None);
        assert_eq!(y, x.map(|v| v.max(0.0)));
    }

    #[test]
    fn closed_gate_returns_carrier() {
        let mut store = ParamStore::new();
        let mut c = cell(&mut store, CellAxis::Space, 4);
        c.gate_mut().unwrap().force(Some(0.0));
        let x = random(&[1, 2, 4, 3], 2);
        let prev = random(&[1, 2, 4, 3], 3);
        assert_eq!(run(&c, &store, &x, Some(&prev)), prev);
    }

    #[test]
    fn scalar_time_update_oracle() {
        // One node, s = 2, d = 1, hand-set map.
        let mut store = ParamStore::new();
        let c = cell(&mut store, CellAxis::Time, 2);
        store
            .set(c.map().weight(), Tensor::matrix(&[&[0.5, -1.0], &[2.0, 0.25]]).unwrap())
            .unwrap();
        store
            .set(
                c.map().factor_a().unwrap(),
                Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap(),
            )
            .unwrap();
        store
            .set(
                c.map().factor_b().unwrap(),
                Tensor::matrix(&[&[0.1, 0.0], &[0.0, 0.2]]).unwrap(),
            )
            .unwrap();
        store.set(c.map().bias(), Tensor::vector(&[0.3, -0.1])).unwrap();
        let g = 0.5;
        let scale = 2.0 / (1.0 + 1e-8);
        let m = [[0.5 + 0.1 * scale, -1.0], [2.0, 0.25 + 0.2 * scale]];
        let x = [0.4, -0.6];
        let prev = [0.2, 0.7];
        let u = [x[0] + prev[0], x[1] + prev[1]];
        let expect: Vec<f64> = (0..2)
            .map(|j| {
                let pre: f64 = u[0] * m[0][j] + u[1] * m[1][j] + [0.3, -0.1][j];
                g * pre.max(0.0) + (1.0 - g) * prev[j]
            })
            .collect();
        let y = run(
            &c,
            &store,
            &Tensor::new(&[1, 2, 1, 1], x.to_vec()).unwrap(),
            Some(&Tensor::new(&[1, 2, 1, 1], prev.to_vec()).unwrap()),
        );
        for j in 0..2 {
            assert!((y.data()[j] - expect[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn single_node_space_update() {
        let mut store = ParamStore::new();
        let c = cell(&mut store, CellAxis::Space, 1);
        store.set(c.map().weight(), Tensor::matrix(&[&[1.7]]).unwrap()).unwrap();
        store.set(c.map().bias(), Tensor::vector(&[-0.2])).unwrap();
        let x = random(&[2, 3, 1, 2], 4);
        let gt = random(&[2, 3, 1, 2], 5);
        let y = run(&c, &store, &x, Some(&gt));
        for i in 0..x.len() {
            let u = x.data()[i] + gt.data()[i];
            let expect = 0.5 * (1.7 * u - 0.2).max(0.0) + 0.5 * gt.data()[i];
            assert!((y.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn open_gate_zero_factors_identity_space() {
        let mut store = ParamStore::new();
        let mut c = cell(&mut store, CellAxis::Space, 3);
        store.set(c.map().weight(), Tensor::eye(3)).unwrap();
        c.gate_mut().unwrap().force(Some(1.0));
        let x = random(&[1, 2, 3, 2], 6);
        let gt = random(&[1, 2, 3, 2], 7);
        let y = run(&c, &store, &x, Some(&gt));
        let mut expect = x.clone();
        expect
            .data_mut()
            .iter_mut()
            .zip(gt.data())
            .for_each(|(a, b)| *a = (*a + b).max(0.0));
        assert_eq!(y, expect);
    }

    #[test]
    fn space_update_is_node_permutation_equivariant() {
        let n = 4;
        let perm = [2, 0, 3, 1];
        let mut store = ParamStore::new();
        let c = cell(&mut store, CellAxis::Space, n);
        store.set(c.map().factor_b().unwrap(), random(&[n, 4], 8)).unwrap();
        store.set(c.map().bias(), random(&[n], 9)).unwrap();
        let x = random(&[2, 3, n, 2], 10);
        let gt = random(&[2, 3, n, 2], 11);
        let y = run(&c, &store, &x, Some(&gt));

        // Relabel nodes: new node i is old node perm[i].
        let permute_nodes = |t: &Tensor| {
            let mut out = t.clone();
            let s = t.shape().to_vec();
            for b in 0..s[0] {
                for k in 0..s[1] {
                    for i in 0..n {
                        for f in 0..s[3] {
                            out.set(&[b, k, i, f], t.get(&[b, k, perm[i], f]));
                        }
                    }
                }
            }
            out
        };
        let permute_rows = |t: &Tensor| {
            let cols = t.shape()[1];
            let mut out = t.clone();
            for i in 0..n {
                for j in 0..cols {
                    out.set(&[i, j], t.get(&[perm[i], j]));
                }
            }
            out
        };
        let mut ps = store.clone();
        let w = store.value(c.map().weight());
        let mut pw = w.clone();
        for i in 0..n {
            for j in 0..n {
                pw.set(&[i, j], w.get(&[perm[i], perm[j]]));
            }
        }
        ps.set(c.map().weight(), pw).unwrap();
        ps.set(
            c.map().factor_a().unwrap(),
            permute_rows(store.value(c.map().factor_a().unwrap())),
        )
        .unwrap();
        ps.set(
            c.map().factor_b().unwrap(),
            permute_rows(store.value(c.map().factor_b().unwrap())),
        )
        .unwrap();
        let b = store.value(c.map().bias());
        ps.set(c.map().bias(), Tensor::vector(&perm.map(|p| b.data()[p])))
            .unwrap();

        let yp = run(&c, &ps, &permute_nodes(&x), Some(&permute_nodes(&gt)));
        assert!(yp.max_abs_diff(&permute_nodes(&y)) < 1e-14);
    }

    #[test]
    fn wrong_axis_and_shape_are_rejected() {
        let mut store = ParamStore::new();
        let c = cell(&mut store, CellAxis::Space, 3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 1]));
        assert!(update_time(&c, &mut tape, &store, x, None).is_err());
        let bad = tape.constant(Tensor::zeros(&[1, 2, 4, 1]));
        assert!(matches!(
            update_space(&c, &mut tape, &store, bad, None),
            Err(StumError::ShapeMismatch { .. })
        ));
    }

    fn merge(memory: &Memory, store: &ParamStore, gt: &Tensor, gs: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let a = tape.constant(gt.clone());
        let b = tape.constant(gs.clone());
        let out = memory_merge(memory, &mut tape, store, a, b).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn memory_merge_limits() {
        let mut store = ParamStore::new();
        let mut m = Memory::new(&mut store, "mem", 3, MergeForm::Sum, 0.9, &mut rng()).unwrap();
        let gt = random(&[1, 2, 2, 3], 12);
        let gs = random(&[1, 2, 2, 3], 13);

        m.retain_mut().force(Some(1.0));
        let mut sum = gt.clone();
        sum.data_mut().iter_mut().zip(gs.data()).for_each(|(a, b)| *a += b);
        assert_eq!(merge(&m, &store, &gt, &gs), sum);

        m.retain_mut().force(Some(0.0));
        store.set(m.bias(), Tensor::vector(&[1.0, 2.0, 3.0])).unwrap();
        assert!(merge(&m, &store, &gt, &gs).data().iter().all(|&v| v == 0.0));

        m.retain_mut().force(Some(0.5));
        store.set(m.bias(), Tensor::zeros(&[3])).unwrap();
        let ones = Tensor::ones(&[1, 2, 2, 3]);
        assert_eq!(merge(&m, &store, &ones, &ones), ones);
    }

    #[test]
    fn both_update_paths_receive_gradient() {
        let mut store = ParamStore::new();
        let mut r = rng();
        let lr = LowRankConfig {
            rank: 2,
            ..LowRankConfig::default()
        };
        let tc = AstucCell::new(&mut store, "t", CellAxis::Time, 3, &lr, UpdateForm::Gated, 0.5, &mut r).unwrap();
        let sc = AstucCell::new(&mut store, "s", CellAxis::Space, 4, &lr, UpdateForm::Gated, 0.5, &mut r).unwrap();
        let mem = Memory::new(&mut store, "m", 2, MergeForm::Sum, 0.9, &mut r).unwrap();
        for c in [&tc, &sc] {
            let b = c.map().factor_b().unwrap();
            let shape = store.value(b).shape().to_vec();
            store.set(b, random(&shape, 20 + shape[0] as u64)).unwrap();
        }
        let x = random(&[2, 3, 4, 2], 30);
        let f = |tape: &mut Tape, store: &ParamStore| {
            let xv = tape.constant(x.clone());
            let gt = update_time(&tc, tape, store, xv, None)?;
            let gs = update_space(&sc, tape, store, xv, Some(gt))?;
            let dw = memory_merge(&mem, tape, store, gt, gs)?;
            let w = tape.constant(random(&[2, 3, 4, 2], 31));
            let p = tape.mul(dw, w)?;
            Ok(tape.sum(p))
        };
        let checks = crate::gradcheck::finite_diff_check_params(&mut store, 1e-5, f).unwrap();
        for c in &checks {
            assert!(c.max_rel_error < 1e-4, "{}: {}", c.name, c.max_rel_error);
            if c.name.contains("lora_") {
                assert!(c.max_abs_grad > 0.0, "{} has zero gradient", c.name);
            }
        }
    }

    #[test]
    fn concat_project_merge_has_projection_params() {
        let mut store = ParamStore::new();
        let m = Memory::new(&mut store, "m", 4, MergeForm::ConcatProject, 0.9, &mut rng()).unwrap();
        assert_eq!(m.trainable_param_count(&store), 4 + 4 + 32);
        let gt = random(&[1, 1, 2, 4], 40);
        let out = merge(&m, &store, &gt, &gt);
        assert_eq!(out.shape(), &[1, 1, 2, 4]);
        assert!(out.all_finite());
    }
}
