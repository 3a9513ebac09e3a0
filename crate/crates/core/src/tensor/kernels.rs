use super::{numel, Tensor};
use crate::error::{Result, StumError};

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub(crate) fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(StumError::AxisOutOfRange { axis, rank });
    }
    Ok(())
}

pub(crate) fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(StumError::shape("permute", perm, &[rank]));
    }
    for &p in perm {
        check_axis(p, rank)?;
        if std::mem::replace(&mut seen[p], true) {
            return Err(StumError::shape("permute", perm, &[rank]));
        }
    }
    Ok(())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f(out_linear, src_offset)` for every element of an output of shape
/// `out_shape` whose source offset follows `src_strides`.
fn for_each_strided(out_shape: &[usize], src_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for lin in 0..n {
        f(lin, off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0; x.len()];
    let src = x.data();
    for_each_strided(&out_shape, &src_strides, |o, s| out[o] = src[s]);
    Tensor::from_parts(out_shape, out)
}

/// Scatters `g` (laid out like the permuted output) back to input layout.
pub(crate) fn permute_back(g: &Tensor, perm: &[usize], in_shape: &[usize]) -> Tensor {
    let mut inverse = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let t = permute(g, &inverse);
    debug_assert_eq!(t.shape(), in_shape);
    t
}

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(StumError::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// How one operand of a broadcasting op maps onto the output index space.
pub(crate) enum Bcast {
    Same,
    /// Operand shape is a suffix of the output shape (includes scalars).
    Tile(usize),
    Map(Vec<usize>),
}

impl Bcast {
    pub(crate) fn new(out_shape: &[usize], shape: &[usize]) -> Bcast {
        if shape == out_shape {
            return Bcast::Same;
        }
        let n = numel(shape);
        let trimmed: Vec<usize> = shape.iter().copied().skip_while(|&d| d == 1).collect();
        if n == 1 || out_shape.ends_with(&trimmed) {
            return Bcast::Tile(n);
        }
        let rank = out_shape.len();
        let own = strides(shape);
        let src_strides: Vec<usize> = (0..rank)
            .map(|i| {
                if i + shape.len() < rank {
                    0
                } else {
                    let j = i + shape.len() - rank;
                    if shape[j] == 1 {
                        0
                    } else {
                        own[j]
                    }
                }
            })
            .collect();
        let mut map = vec![0; numel(out_shape)];
        for_each_strided(out_shape, &src_strides, |o, s| map[o] = s);
        Bcast::Map(map)
    }

    #[inline]
    pub(crate) fn idx(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Tile(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }

    /// Operand indices for output positions `0..n`, in order.
    pub(crate) fn iter(&self, n: usize) -> BcastIter<'_> {
        BcastIter {
            map: self,
            i: 0,
            n,
            t: 0,
        }
    }
}

pub(crate) struct BcastIter<'a> {
    map: &'a Bcast,
    i: usize,
    n: usize,
    /// Position within the current tile; avoids a division per element.
    t: usize,
}

impl Iterator for BcastIter<'_> {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.i >= self.n {
            return None;
        }
        let i = self.i;
        self.i += 1;
        Some(match self.map {
            Bcast::Same => i,
            Bcast::Tile(k) => {
                let r = self.t;
                self.t += 1;
                if self.t == *k {
                    self.t = 0;
                }
                r
            }
            Bcast::Map(m) => m[i],
        })
    }
}

/// `f(a[ma(i)], b[mb(i)])` for every output position.
pub(crate) fn bcast_zip(
    n: usize,
    a: &[f64],
    ma: &Bcast,
    b: &[f64],
    mb: &Bcast,
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    match (ma, mb) {
        (Bcast::Same, Bcast::Same) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (Bcast::Same, Bcast::Tile(1)) => a.iter().map(|&x| f(x, b[0])).collect(),
        (Bcast::Tile(1), Bcast::Same) => b.iter().map(|&y| f(a[0], y)).collect(),
        (Bcast::Same, Bcast::Tile(k)) => {
            let mut out = Vec::with_capacity(n);
            for chunk in a.chunks_exact(*k) {
                out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        (Bcast::Tile(k), Bcast::Same) => {
            let mut out = Vec::with_capacity(n);
            for chunk in b.chunks_exact(*k) {
                out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
            out
        }
        _ => ma.iter(n).zip(mb.iter(n)).map(|(i, j)| f(a[i], b[j])).collect(),
    }
}

/// Sum with four interleaved partial sums, combined in a fixed order.
#[inline]
pub(crate) fn lane_sum(it: impl Iterator<Item = f64>) -> f64 {
    let mut acc = [0.0f64; 4];
    for (i, v) in it.enumerate() {
        acc[i & 3] += v;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// `(1 − g)·prev + g·next` with `g` tiled over the trailing positions; a
/// missing `prev` counts as zeros.
pub(crate) fn lerp(prev: Option<&[f64]>, next: &[f64], g: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(next.len());
    match (prev, g.len()) {
        (Some(p), 1) => {
            let (a, b) = (1.0 - g[0], g[0]);
            out.extend(p.iter().zip(next).map(|(&p, &v)| a * p + b * v));
        }
        (None, 1) => out.extend(next.iter().map(|&v| g[0] * v)),
        (Some(p), k) => {
            for (pc, nc) in p.chunks_exact(k).zip(next.chunks_exact(k)) {
                out.extend(pc.iter().zip(nc).zip(g).map(|((&p, &v), &gj)| (1.0 - gj) * p + gj * v));
            }
        }
        (None, k) => {
            for nc in next.chunks_exact(k) {
                out.extend(nc.iter().zip(g).map(|(&v, &gj)| gj * v));
            }
        }
    }
    out
}

/// `gp += (1 − g) · gd` for [`lerp`].
pub(crate) fn lerp_grad_prev(gd: &[f64], g: &[f64], gp: &mut [f64]) {
    if g.len() == 1 {
        return axpy(gp, 1.0 - g[0], gd);
    }
    for (pc, gc) in gp.chunks_exact_mut(g.len()).zip(gd.chunks_exact(g.len())) {
        for ((d, &gk), &gj) in pc.iter_mut().zip(gc).zip(g) {
            *d += gk * (1.0 - gj);
        }
    }
}

/// `gg[j] += Σ gd · (next − prev)` over positions using gate entry `j`.
pub(crate) fn lerp_grad_gate(gd: &[f64], next: &[f64], prev: &[f64], gg: &mut [f64]) {
    let k = gg.len();
    if k == 1 {
        gg[0] += lane_sum(gd.iter().zip(next.iter().zip(prev)).map(|(&gk, (&v, &p))| gk * (v - p)));
        return;
    }
    for ((gc, nc), pc) in gd.chunks_exact(k).zip(next.chunks_exact(k)).zip(prev.chunks_exact(k)) {
        for (((d, &gk), &v), &p) in gg.iter_mut().zip(gc).zip(nc).zip(pc) {
            *d += gk * (v - p);
        }
    }
}

/// `dst[map(i)] += scale · g[i]`.
pub(crate) fn bcast_acc(dst: &mut [f64], map: &Bcast, g: &[f64], scale: f64) {
    match map {
        Bcast::Same => axpy(dst, scale, g),
        Bcast::Tile(1) => dst[0] += scale * lane_sum(g.iter().copied()),
        Bcast::Tile(k) => {
            for chunk in g.chunks_exact(*k) {
                axpy(dst, scale, chunk);
            }
        }
        Bcast::Map(_) => {
            for (i, &gi) in map.iter(g.len()).zip(g) {
                dst[i] += scale * gi;
            }
        }
    }
}

/// `dst[dm(i)] += g[i] · other[om(i)]`.
pub(crate) fn bcast_mul_acc(dst: &mut [f64], dm: &Bcast, g: &[f64], other: &[f64], om: &Bcast) {
    match (dm, om) {
        (Bcast::Same, Bcast::Same) => {
            for ((d, &gi), &o) in dst.iter_mut().zip(g).zip(other) {
                *d += gi * o;
            }
        }
        (Bcast::Same, Bcast::Tile(1)) => axpy(dst, other[0], g),
        (Bcast::Tile(1), Bcast::Same) => dst[0] += lane_sum(g.iter().zip(other).map(|(&gi, &o)| gi * o)),
        (Bcast::Same, Bcast::Tile(k)) => {
            for (dc, gc) in dst.chunks_exact_mut(*k).zip(g.chunks_exact(*k)) {
                for ((d, &gi), &o) in dc.iter_mut().zip(gc).zip(other) {
                    *d += gi * o;
                }
            }
        }
        (Bcast::Tile(k), Bcast::Same) => {
            for (gc, oc) in g.chunks_exact(*k).zip(other.chunks_exact(*k)) {
                for ((d, &gi), &o) in dst.iter_mut().zip(gc).zip(oc) {
                    *d += gi * o;
                }
            }
        }
        _ => {
            let n = g.len();
            for ((i, j), &gi) in dm.iter(n).zip(om.iter(n)).zip(g) {
                dst[i] += gi * other[j];
            }
        }
    }
}

/// Batched matrix-multiply geometry with broadcast batch dimensions.
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub p: usize,
    pub q: usize,
    pub r: usize,
    /// (a offset, b offset, out offset) per output batch, in matrices.
    pub batches: Vec<(usize, usize, usize)>,
}

impl MatmulPlan {
    pub(crate) fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(StumError::shape("matmul", a, b));
        }
        let (p, q) = (a[a.len() - 2], a[a.len() - 1]);
        let (q2, r) = (b[b.len() - 2], b[b.len() - 1]);
        if q != q2 {
            return Err(StumError::shape("matmul", a, b));
        }
        let ab = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let batch_shape = broadcast_shape("matmul", ab, bb)?;
        let nb = numel(&batch_shape);
        let map_a = Bcast::new(&batch_shape, if ab.is_empty() { &[1] } else { ab });
        let map_b = Bcast::new(&batch_shape, if bb.is_empty() { &[1] } else { bb });
        let batches = (0..nb).map(|i| (map_a.idx(i), map_b.idx(i), i)).collect();
        let mut out_shape = batch_shape;
        out_shape.extend([p, r]);
        Ok(MatmulPlan {
            out_shape,
            p,
            q,
            r,
            batches,
        })
    }
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Register-blocked `c[R×C] += a[R×k] · b[k×C]`; the slices start at the
/// block origin.
#[inline(always)]
fn micro<const R: usize, const C: usize>(
    k: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
) {
    let mut acc = [[0.0f64; C]; R];
    for p in 0..k {
        let brow: &[f64; C] = b[p * ldb..][..C].try_into().expect("block row");
        for r in 0..R {
            let av = a[r * lda + p];
            for q in 0..C {
                acc[r][q] += av * brow[q];
            }
        }
    }
    for r in 0..R {
        let crow = &mut c[r * ldc..][..C];
        for q in 0..C {
            crow[q] += acc[r][q];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn micro_row<const R: usize>(
    n: usize,
    k: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
) {
    let mut j = 0;
    while j + 8 <= n {
        micro::<R, 8>(k, a, lda, &b[j..], ldb, &mut c[j..], ldc);
        j += 8;
    }
    if j + 4 <= n {
        micro::<R, 4>(k, a, lda, &b[j..], ldb, &mut c[j..], ldc);
        j += 4;
    }
    while j < n {
        micro::<R, 1>(k, a, lda, &b[j..], ldb, &mut c[j..], ldc);
        j += 1;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`, row-major with leading dimensions.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let mut i = 0;
    while i + 4 <= m {
        micro_row::<4>(n, k, &a[i * lda..], lda, b, ldb, &mut c[i * ldc..], ldc);
        i += 4;
    }
    while i < m {
        micro_row::<1>(n, k, &a[i * lda..], lda, b, ldb, &mut c[i * ldc..], ldc);
        i += 1;
    }
}

pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub(crate) fn matmul(plan: &MatmulPlan, a: &[f64], b: &[f64]) -> Vec<f64> {
    let (p, q, r) = (plan.p, plan.q, plan.r);
    let mut out = vec![0.0; numel(&plan.out_shape)];
    for &(ia, ib, io) in &plan.batches {
        let am = &a[ia * p * q..(ia + 1) * p * q];
        let bm = &b[ib * q * r..(ib + 1) * q * r];
        let om = &mut out[io * p * r..(io + 1) * p * r];
        gemm_acc(p, r, q, am, q, bm, r, om, r);
    }
    out
}

/// Accumulates dL/da = g·bᵀ and dL/db = aᵀ·g.
pub(crate) fn matmul_backward(
    plan: &MatmulPlan,
    a: &[f64],
    b: &[f64],
    g: &[f64],
    ga: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let (p, q, r) = (plan.p, plan.q, plan.r);
    if let Some(ga) = ga {
        for &(ia, ib, io) in &plan.batches {
            let bt = transpose(&b[ib * q * r..(ib + 1) * q * r], q, r);
            let gm = &g[io * p * r..(io + 1) * p * r];
            gemm_acc(p, q, r, gm, r, &bt, q, &mut ga[ia * p * q..(ia + 1) * p * q], q);
        }
    }
    if let Some(gb) = gb {
        for &(ia, ib, io) in &plan.batches {
            let at = transpose(&a[ia * p * q..(ia + 1) * p * q], p, q);
            let gm = &g[io * p * r..(io + 1) * p * r];
            gemm_acc(q, r, p, &at, p, gm, r, &mut gb[ib * q * r..(ib + 1) * q * r], r);
        }
    }
}

/// Mixes positions along the middle extent: `out[o, j, i] = bias[j] +
/// Σ_k x[o, k, i] · m[k, j]`.
pub(crate) fn axis_mix(
    x: &[f64],
    m: &[f64],
    bias: Option<&[f64]>,
    (outer, len_in, inner): (usize, usize, usize),
    len_out: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; outer * len_out * inner];
    if let Some(b) = bias {
        for (row, &bj) in out.chunks_exact_mut(inner).zip(b.iter().cycle()) {
            row.fill(bj);
        }
    }
    if inner == 1 {
        gemm_acc(outer, len_out, len_in, x, len_in, m, len_out, &mut out, len_out);
        return out;
    }
    let mt = transpose(m, len_in, len_out);
    for (xo, yo) in x
        .chunks_exact(len_in * inner)
        .zip(out.chunks_exact_mut(len_out * inner))
    {
        gemm_acc(len_out, inner, len_in, &mt, len_in, xo, inner, yo, inner);
    }
    out
}

/// Gradient of [`axis_mix`] with respect to `x`, accumulated into `gx`.
pub(crate) fn axis_mix_grad_x(
    g: &[f64],
    m: &[f64],
    (outer, len_in, inner): (usize, usize, usize),
    len_out: usize,
    gx: &mut [f64],
) {
    if inner == 1 {
        let mt = transpose(m, len_in, len_out);
        gemm_acc(outer, len_in, len_out, g, len_out, &mt, len_in, gx, len_in);
        return;
    }
    for (go, gxo) in g.chunks_exact(len_out * inner).zip(gx.chunks_exact_mut(len_in * inner)) {
        gemm_acc(len_in, inner, len_out, m, len_out, go, inner, gxo, inner);
    }
}

/// Gradient with respect to the mixing matrix: `gm[k, j] += Σ_{o,i}
/// x[o, k, i] · g[o, j, i]`.
pub(crate) fn axis_mix_grad_m(
    x: &[f64],
    g: &[f64],
    (outer, len_in, inner): (usize, usize, usize),
    len_out: usize,
    gm: &mut [f64],
) {
    if inner == 1 {
        let xt = transpose(x, outer, len_in);
        gemm_acc(len_in, len_out, outer, &xt, outer, g, len_out, gm, len_out);
        return;
    }
    for (xo, go) in x.chunks_exact(len_in * inner).zip(g.chunks_exact(len_out * inner)) {
        let gt = transpose(go, len_out, inner);
        gemm_acc(len_in, len_out, inner, xo, inner, &gt, len_out, gm, len_out);
    }
}

/// Bias gradient of [`axis_mix`]: `gb[j] += Σ_{o,i} g[o, j, i]`.
pub(crate) fn axis_mix_grad_bias(g: &[f64], len_out: usize, inner: usize, gb: &mut [f64]) {
    for (row, j) in g.chunks_exact(inner).zip((0..len_out).cycle()) {
        gb[j] += row.iter().sum::<f64>();
    }
}

/// Geometry and operands shared by the fused mixing update kernels.
pub(crate) struct MixUpdate<'a> {
    pub m: &'a [f64],
    pub bias: Option<&'a [f64]>,
    pub gate: Option<f64>,
    pub relu: bool,
    /// `(outer, len, inner)`; the mixing matrix is `len × len`.
    pub parts: (usize, usize, usize),
}

pub(crate) struct MixUpdateGrads {
    /// Gradient with respect to `x + prev`.
    pub pre: Vec<f64>,
    pub m: Vec<f64>,
    pub bias: Vec<f64>,
    pub gate: f64,
}

impl MixUpdate<'_> {
    /// Row blocks processed together: one outer index, or everything when
    /// the mixed axis is innermost.
    fn block(&self) -> usize {
        let (outer, len, inner) = self.parts;
        if inner == 1 {
            outer * len
        } else {
            len * inner
        }
    }

    /// `y += mix(pre)` for one block.
    fn mix_block(&self, mt: &[f64], pre: &[f64], y: &mut [f64]) {
        let (_, len, inner) = self.parts;
        if inner == 1 {
            gemm_acc(pre.len() / len, len, len, pre, len, self.m, len, y, len);
        } else {
            gemm_acc(len, inner, len, mt, len, pre, inner, y, inner);
        }
    }

    fn fill_bias(&self, y: &mut [f64]) {
        let (_, len, inner) = self.parts;
        if let Some(b) = self.bias {
            if inner == 1 {
                for row in y.chunks_exact_mut(len) {
                    row.copy_from_slice(b);
                }
            } else {
                for (row, &bj) in y.chunks_exact_mut(inner).zip(b) {
                    row.fill(bj);
                }
            }
        }
    }

    /// Returns `act(mix(x + prev) + bias)` and, when gated, the output
    /// `(1 − g)·prev + g·fresh`.
    pub(crate) fn forward(&self, x: &[f64], prev: Option<&[f64]>) -> (Vec<f64>, Option<Vec<f64>>) {
        let (_, len, _) = self.parts;
        let bs = self.block();
        let mt = transpose(self.m, len, len);
        let mut fresh = vec![0.0; x.len()];
        let mut out = self.gate.map(|_| vec![0.0; x.len()]);
        let mut pre = vec![0.0; bs];
        for (b, yb) in fresh.chunks_exact_mut(bs).enumerate() {
            let xb = &x[b * bs..(b + 1) * bs];
            let pb = prev.map(|p| &p[b * bs..(b + 1) * bs]);
            let input = match pb {
                Some(pb) => {
                    pre.iter_mut()
                        .zip(xb.iter().zip(pb))
                        .for_each(|(d, (&a, &c))| *d = a + c);
                    &pre[..]
                }
                None => xb,
            };
            self.fill_bias(yb);
            self.mix_block(&mt, input, yb);
            if self.relu {
                yb.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            if let (Some(g), Some(out)) = (self.gate, out.as_mut()) {
                let ob = &mut out[b * bs..(b + 1) * bs];
                match pb {
                    Some(pb) => {
                        let a = 1.0 - g;
                        ob.iter_mut()
                            .zip(pb.iter().zip(yb.iter()))
                            .for_each(|(o, (&p, &v))| *o = a * p + g * v);
                    }
                    None => ob.iter_mut().zip(yb.iter()).for_each(|(o, &v)| *o = g * v),
                }
            }
        }
        (fresh, out)
    }

    /// Gradients given the upstream gradient `gd` of the output. `buf` is
    /// any buffer of `x.len()` elements; it is overwritten and returned as
    /// the `pre` gradient.
    pub(crate) fn backward(
        &self,
        x: &[f64],
        prev: Option<&[f64]>,
        fresh: &[f64],
        gd: &[f64],
        buf: Vec<f64>,
    ) -> MixUpdateGrads {
        let (_, len, inner) = self.parts;
        let bs = self.block();
        assert_eq!(buf.len(), x.len(), "gradient buffer length");
        let mut grads = MixUpdateGrads {
            pre: buf,
            m: vec![0.0; len * len],
            bias: vec![0.0; len],
            gate: 0.0,
        };
        let mut pre = vec![0.0; bs];
        let mut gy = vec![0.0; bs];
        let mut gyt = vec![0.0; bs];
        let mut gate_parts = Vec::new();
        for (b, gpb) in grads.pre.chunks_exact_mut(bs).enumerate() {
            gpb.fill(0.0);
            let r = b * bs..(b + 1) * bs;
            let (xb, yb, gb) = (&x[r.clone()], &fresh[r.clone()], &gd[r.clone()]);
            let pb = prev.map(|p| &p[r.clone()]);
            if self.gate.is_some() {
                gate_parts.push(match pb {
                    Some(pb) => lane_sum(gb.iter().zip(yb.iter().zip(pb)).map(|(&g, (&v, &p))| g * (v - p))),
                    None => lane_sum(gb.iter().zip(yb).map(|(&g, &v)| g * v)),
                });
            }
            let scale = self.gate.unwrap_or(1.0);
            for ((d, &g), &v) in gy.iter_mut().zip(gb).zip(yb) {
                *d = if self.relu && v <= 0.0 { 0.0 } else { scale * g };
            }
            let input = match pb {
                Some(pb) => {
                    pre.iter_mut()
                        .zip(xb.iter().zip(pb))
                        .for_each(|(d, (&a, &c))| *d = a + c);
                    &pre[..]
                }
                None => xb,
            };
            if inner == 1 {
                let rows = bs / len;
                for gr in gy.chunks_exact(len) {
                    grads.bias.iter_mut().zip(gr).for_each(|(d, &g)| *d += g);
                }
                let it = transpose(input, rows, len);
                gemm_acc(len, len, rows, &it, rows, &gy, len, &mut grads.m, len);
                let mt = transpose(self.m, len, len);
                gemm_acc(rows, len, len, &gy, len, &mt, len, gpb, len);
            } else {
                for (j, row) in gy.chunks_exact(inner).enumerate() {
                    grads.bias[j] += row.iter().sum::<f64>();
                }
                for j in 0..len {
                    for i in 0..inner {
                        gyt[i * len + j] = gy[j * inner + i];
                    }
                }
                gemm_acc(len, len, inner, input, inner, &gyt, len, &mut grads.m, len);
                gemm_acc(len, inner, len, self.m, len, &gy, inner, gpb, inner);
            }
        }
        grads.gate = gate_parts.iter().sum();
        grads
    }
}

/// Row-wise RMS statistics: returns the per-row divisor applied to x.
pub(crate) fn rms_divisors(x: &[f64], d: usize, eps: f64, with_sqrt: bool) -> Vec<f64> {
    x.chunks_exact(d)
        .map(|row| {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64 + eps;
            if with_sqrt {
                ms.sqrt()
            } else {
                ms
            }
        })
        .collect()
}

pub(crate) fn softmax(x: &[f64], (outer, len, inner): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    out
}
