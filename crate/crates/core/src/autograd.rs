//! Tape-based reverse-mode differentiation over 2D tensors.
//!
//! A [`Tape`] records one forward evaluation. Each recorded op keeps what
//! its backward rule needs; [`Tape::backward`] walks the tape in reverse and
//! accumulates parameter gradients into a [`Grads`] buffer. The op set is
//! the minimum the denoiser needs, with attention, RoPE and im2col fused
//! into single nodes so their backward rules stay cheap.

use std::ops::Range;
use std::sync::Arc;

use crate::params::{Grads, ParamId, ParamSet};
use crate::tensor::{matmul, Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// A rectangular attention region: every query row in `q` attends over
/// exactly the key rows in `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnBlock {
    pub q: Range<usize>,
    pub k: Range<usize>,
}

/// Precomputed rotary phases: one `(cos, sin)` per token and rotated pair.
/// Pair `p` rotates head dims `2p` and `2p + 1`; dims past the last pair
/// pass through unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable<T> {
    pub tokens: usize,
    pub pairs: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn from_phases(tokens: usize, pairs: usize, phases: &[f64]) -> Self {
        assert_eq!(phases.len(), tokens * pairs);
        Self {
            tokens,
            pairs,
            cos: phases.iter().map(|p| T::from_f64(p.cos())).collect(),
            sin: phases.iter().map(|p| T::from_f64(p.sin())).collect(),
        }
    }
}

/// Geometry of a stride/padding convolution lowered to im2col. Input rows
/// are ordered `(frame, y, x)` with `channels` columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

enum Op<T> {
    Constant,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<T>,
    },
    Modulate {
        x: Var,
        shift: Var,
        scale: Var,
    },
    GatedAdd {
        x: Var,
        y: Var,
        gate: Var,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        src: Var,
        idx: Vec<usize>,
    },
    ScatterAddRows {
        x: Var,
        start: usize,
        y: Var,
    },
    Rope {
        x: Var,
        table: Arc<RopeTable<T>>,
        heads: usize,
        identity_rows: Range<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: Vec<AttnBlock>,
        probs: Vec<Vec<T>>,
    },
    Im2Col {
        x: Var,
        geom: ConvGeom,
    },
    MseMasked {
        pred: Var,
        target: Tensor<T>,
        mask: Vec<T>,
        denom: T,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// One recorded forward pass over a borrowed parameter set.
pub struct Tape<'p, T: Scalar> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter lookup by name; panics on unknown names, which are
    /// programming errors in model construction.
    pub fn param_named(&mut self, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(id)
    }

    /// `x * w + b` with `x: [n, in]`, `w: [in, out]`, `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut out = matmul(self.value(x), false, self.value(w), false);
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.shape(), (1, out.cols()), "bias shape");
            let bias = bias.data().to_vec();
            for r in 0..out.rows() {
                for (o, bv) in out.row_mut(r).iter_mut().zip(&bias) {
                    *o += *bv;
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `[1, cols]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row).data().to_vec();
        assert_eq!(r.len(), self.value(x).cols(), "add_row width");
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            for (o, v) in out.row_mut(i).iter_mut().zip(&r) {
                *o += *v;
            }
        }
        self.push(out, Op::AddRow { x, row }, &[x, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let mut out = self.value(x).clone();
        out.scale_inplace(s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&a| a / (T::ONE + (-a).exp()))
            .collect();
        let out = Tensor::from_vec(v.rows(), v.cols(), data);
        self.push(out, Op::Silu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let data = v
            .data()
            .iter()
            .map(|&z| half * z * (T::ONE + (c * (z + a * z * z * z)).tanh()))
            .collect();
        let out = Tensor::from_vec(v.rows(), v.cols(), data);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::from_f64(v.cols() as f64);
        let eps = T::from_f64(LN_EPS);
        let mut out = v.clone();
        let mut rstds = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / n;
            let rstd = T::ONE / (var + eps).sqrt();
            for a in row.iter_mut() {
                *a = (*a - mean) * rstd;
            }
            rstds.push(rstd);
        }
        self.push(out, Op::LayerNorm { x, rstd: rstds }, &[x])
    }

    /// `x * (1 + scale) + shift` with `[1, cols]` shift and scale rows.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var) -> Var {
        let sh = self.value(shift).data().to_vec();
        let sc = self.value(scale).data().to_vec();
        let mut out = self.value(x).clone();
        assert_eq!(sh.len(), out.cols());
        assert_eq!(sc.len(), out.cols());
        for r in 0..out.rows() {
            for ((o, a), b) in out.row_mut(r).iter_mut().zip(&sc).zip(&sh) {
                *o = *o * (T::ONE + *a) + *b;
            }
        }
        self.push(out, Op::Modulate { x, shift, scale }, &[x, shift, scale])
    }

    /// `x + y * gate` with a `[1, cols]` gate row.
    pub fn gated_add(&mut self, x: Var, y: Var, gate: Var) -> Var {
        let g = self.value(gate).data().to_vec();
        let vy = self.value(y);
        assert_eq!(vy.shape(), self.value(x).shape(), "gated_add shape");
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let yr = vy.row(r);
            for ((o, a), b) in out.row_mut(r).iter_mut().zip(yr).zip(&g) {
                *o += *a * *b;
            }
        }
        self.push(out, Op::GatedAdd { x, y, gate }, &[x, y, gate])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols(), cols, "concat_rows width");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Tensor::from_vec(rows, cols, data);
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.rows(), rows, "concat_cols height");
            for r in 0..rows {
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
            }
            off += v.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        assert!(start + len <= v.rows(), "slice_rows out of range");
        let c = v.cols();
        let out = Tensor::from_vec(len, c, v.data()[start * c..(start + len) * c].to_vec());
        self.push(out, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        assert!(start + len <= v.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(v.rows(), len);
        for r in 0..v.rows() {
            out.row_mut(r)
                .copy_from_slice(&v.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Var {
        let v = self.value(src);
        let c = v.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        let out = Tensor::from_vec(idx.len(), c, data);
        self.push(
            out,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            &[src],
        )
    }

    /// Copy of `x` with `y` added to rows `start..start + y.rows()`.
    pub fn scatter_add_rows(&mut self, x: Var, start: usize, y: Var) -> Var {
        let vy = self.value(y);
        let mut out = self.value(x).clone();
        assert_eq!(vy.cols(), out.cols());
        assert!(start + vy.rows() <= out.rows());
        for r in 0..vy.rows() {
            for (o, a) in out.row_mut(start + r).iter_mut().zip(vy.row(r)) {
                *o += *a;
            }
        }
        self.push(out, Op::ScatterAddRows { x, start, y }, &[x, y])
    }

    /// Rotary embedding applied per head. Rows in `identity_rows` (the
    /// text stream) are passed through unrotated; the table is indexed by
    /// absolute row.
    pub fn rope(
        &mut self,
        x: Var,
        table: Arc<RopeTable<T>>,
        heads: usize,
        identity_rows: Range<usize>,
    ) -> Var {
        let mut out = self.value(x).clone();
        rope_apply(&mut out, &table, heads, &identity_rows, false);
        self.push(
            out,
            Op::Rope {
                x,
                table,
                heads,
                identity_rows,
            },
            &[x],
        )
    }

    /// Multi-head scaled dot-product attention restricted to `blocks`.
    /// Query rows outside every block produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: Vec<AttnBlock>,
    ) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        assert_eq!(vk.cols(), d);
        assert_eq!(vv.cols(), d);
        assert_eq!(vk.rows(), vv.rows());
        assert_eq!(d % heads, 0, "width not divisible by heads");
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut out = Tensor::<T>::zeros(vq.rows(), d);
        let mut probs = Vec::with_capacity(blocks.len() * heads);
        for blk in &blocks {
            let (nq, nk) = (blk.q.len(), blk.k.len());
            assert!(blk.q.end <= vq.rows() && blk.k.end <= vk.rows());
            for h in 0..heads {
                let mut s = vec![T::ZERO; nq * nk];
                // SAFETY: views stay inside the validated row ranges.
                unsafe {
                    T::gemm_raw(
                        nq,
                        dh,
                        nk,
                        scale,
                        vq.data().as_ptr().add(blk.q.start * d + h * dh),
                        d as isize,
                        1,
                        vk.data().as_ptr().add(blk.k.start * d + h * dh),
                        1,
                        d as isize,
                        T::ZERO,
                        s.as_mut_ptr(),
                        nk as isize,
                        1,
                    );
                }
                for row in s.chunks_mut(nk.max(1)) {
                    softmax_inplace(row);
                }
                unsafe {
                    T::gemm_raw(
                        nq,
                        nk,
                        dh,
                        T::ONE,
                        s.as_ptr(),
                        nk as isize,
                        1,
                        vv.data().as_ptr().add(blk.k.start * d + h * dh),
                        d as isize,
                        1,
                        T::ONE,
                        out.data_mut().as_mut_ptr().add(blk.q.start * d + h * dh),
                        d as isize,
                        1,
                    );
                }
                probs.push(s);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            },
            &[q, k, v],
        )
    }

    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Var {
        let v = self.value(x);
        assert_eq!(
            v.rows(),
            geom.frames * geom.height * geom.width,
            "im2col rows"
        );
        assert_eq!(v.cols(), geom.channels, "im2col channels");
        let out = im2col_forward(v, &geom);
        self.push(out, Op::Im2Col { x, geom }, &[x])
    }

    /// Mean of `mask * (pred - target)^2` over the masked entries.
    pub fn mse_masked(&mut self, pred: Var, target: Tensor<T>, mask: Vec<T>) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "mse shape");
        assert_eq!(mask.len(), target.len(), "mse mask length");
        let denom: T = mask.iter().copied().sum();
        let mut acc = T::ZERO;
        for ((p, t), m) in vp.data().iter().zip(target.data()).zip(&mask) {
            let e = *p - *t;
            acc += *m * e * e;
        }
        let out = Tensor::from_vec(1, 1, vec![acc / denom]);
        self.push(
            out,
            Op::MseMasked {
                pred,
                target,
                mask,
                denom,
            },
            &[pred],
        )
    }

    /// Reverse sweep from the scalar `loss`, adding parameter gradients
    /// into `grads`.
    pub fn backward(mut self, loss: Var, grads: &mut Grads<T>) {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let n = self.nodes.len();
        let mut g: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        g[loss.0] = Some(Tensor::filled(1, 1, T::ONE));
        for i in (0..=loss.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Constant);
            self.backward_op(i, &op, dy, &mut g, grads);
            self.nodes[i].op = op;
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_op(
        &self,
        i: usize,
        op: &Op<T>,
        dy: Tensor<T>,
        g: &mut [Option<Tensor<T>>],
        grads: &mut Grads<T>,
    ) {
        match op {
            Op::Constant => {}
            Op::Param(id) => grads.tensors[id.0].add_assign(&dy),
            Op::Linear { x, w, b } => {
                if self.wants(*x) {
                    accumulate(g, *x, matmul(&dy, false, self.value(*w), true));
                }
                if self.wants(*w) {
                    accumulate(g, *w, matmul(self.value(*x), true, &dy, false));
                }
                if let Some(b) = b {
                    accumulate(g, *b, dy.col_sums());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*b) {
                    accumulate(g, *b, dy.clone());
                }
                if self.wants(*a) {
                    accumulate(g, *a, dy);
                }
            }
            Op::AddRow { x, row } => {
                if self.wants(*row) {
                    accumulate(g, *row, dy.col_sums());
                }
                if self.wants(*x) {
                    accumulate(g, *x, dy);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(g, *a, zip_map(&dy, vb, |d, y| d * y));
                }
                if self.wants(*b) {
                    accumulate(g, *b, zip_map(&dy, va, |d, x| d * x));
                }
            }
            Op::Scale(x, s) => {
                let mut d = dy;
                d.scale_inplace(*s);
                accumulate(g, *x, d);
            }
            Op::Silu(x) => {
                let d = zip_map(&dy, self.value(*x), |d, a| {
                    let s = T::ONE / (T::ONE + (-a).exp());
                    d * s * (T::ONE + a * (T::ONE - s))
                });
                accumulate(g, *x, d);
            }
            Op::Gelu(x) => {
                let c = T::from_f64(GELU_C);
                let a3 = T::from_f64(GELU_A);
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                let d = zip_map(&dy, self.value(*x), |d, z| {
                    let t = (c * (z + a3 * z * z * z)).tanh();
                    let dt = (T::ONE - t * t) * c * (T::ONE + three * a3 * z * z);
                    d * (half * (T::ONE + t) + half * z * dt)
                });
                accumulate(g, *x, d);
            }
            Op::LayerNorm { x, rstd } => {
                let y = self.nodes[i].value.as_ref().expect("value");
                let n = T::from_f64(y.cols() as f64);
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, dr) = (y.row(r), dy.row(r));
                    let mean_d = dr.iter().copied().sum::<T>() / n;
                    let mean_dy: T = dr.iter().zip(yr).map(|(a, b)| *a * *b).sum::<T>() / n;
                    for ((o, d), yv) in dx.row_mut(r).iter_mut().zip(dr).zip(yr) {
                        *o = rstd[r] * (*d - mean_d - *yv * mean_dy);
                    }
                }
                accumulate(g, *x, dx);
            }
            Op::Modulate { x, shift, scale } => {
                let vx = self.value(*x);
                let sc = self.value(*scale).data().to_vec();
                if self.wants(*scale) {
                    accumulate(g, *scale, zip_map(&dy, vx, |d, a| d * a).col_sums());
                }
                if self.wants(*shift) {
                    accumulate(g, *shift, dy.col_sums());
                }
                if self.wants(*x) {
                    let mut dx = dy;
                    for r in 0..dx.rows() {
                        for (o, s) in dx.row_mut(r).iter_mut().zip(&sc) {
                            *o *= T::ONE + *s;
                        }
                    }
                    accumulate(g, *x, dx);
                }
            }
            Op::GatedAdd { x, y, gate } => {
                let vy = self.value(*y);
                let gv = self.value(*gate).data().to_vec();
                if self.wants(*gate) {
                    accumulate(g, *gate, zip_map(&dy, vy, |d, a| d * a).col_sums());
                }
                if self.wants(*y) {
                    let mut d = dy.clone();
                    for r in 0..d.rows() {
                        for (o, s) in d.row_mut(r).iter_mut().zip(&gv) {
                            *o *= *s;
                        }
                    }
                    accumulate(g, *y, d);
                }
                if self.wants(*x) {
                    accumulate(g, *x, dy);
                }
            }
            Op::ConcatRows(parts) => {
                let c = dy.cols();
                let mut off = 0;
                for p in parts {
                    let r = self.value(*p).rows();
                    if self.wants(*p) {
                        let t = Tensor::from_vec(r, c, dy.data()[off * c..(off + r) * c].to_vec());
                        accumulate(g, *p, t);
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        let mut t = Tensor::zeros(dy.rows(), w);
                        for r in 0..dy.rows() {
                            t.row_mut(r).copy_from_slice(&dy.row(r)[off..off + w]);
                        }
                        accumulate(g, *p, t);
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let vx = self.value(*x);
                let mut t = Tensor::zeros(vx.rows(), vx.cols());
                let c = vx.cols();
                t.data_mut()[start * c..(start + dy.rows()) * c].copy_from_slice(dy.data());
                accumulate(g, *x, t);
            }
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let mut t = Tensor::zeros(vx.rows(), vx.cols());
                for r in 0..dy.rows() {
                    t.row_mut(r)[*start..start + dy.cols()].copy_from_slice(dy.row(r));
                }
                accumulate(g, *x, t);
            }
            Op::GatherRows { src, idx } => {
                let vs = self.value(*src);
                let mut t = Tensor::zeros(vs.rows(), vs.cols());
                for (r, &j) in idx.iter().enumerate() {
                    for (o, d) in t.row_mut(j).iter_mut().zip(dy.row(r)) {
                        *o += *d;
                    }
                }
                accumulate(g, *src, t);
            }
            Op::ScatterAddRows { x, start, y } => {
                if self.wants(*y) {
                    let ry = self.value(*y).rows();
                    let c = dy.cols();
                    let t =
                        Tensor::from_vec(ry, c, dy.data()[start * c..(start + ry) * c].to_vec());
                    accumulate(g, *y, t);
                }
                if self.wants(*x) {
                    accumulate(g, *x, dy);
                }
            }
            Op::Rope {
                x,
                table,
                heads,
                identity_rows,
            } => {
                let mut d = dy;
                rope_apply(&mut d, table, *heads, identity_rows, true);
                accumulate(g, *x, d);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                blocks,
                probs,
            } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *heads, blocks, probs, &dy);
                if self.wants(*q) {
                    accumulate(g, *q, dq);
                }
                if self.wants(*k) {
                    accumulate(g, *k, dk);
                }
                if self.wants(*v) {
                    accumulate(g, *v, dv);
                }
            }
            Op::Im2Col { x, geom } => {
                accumulate(g, *x, col2im(&dy, geom));
            }
            Op::MseMasked {
                pred,
                target,
                mask,
                denom,
            } => {
                let two = T::from_f64(2.0);
                let up = dy.data()[0] * two / *denom;
                let vp = self.value(*pred);
                let data = vp
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(mask)
                    .map(|((p, t), m)| up * *m * (*p - *t))
                    .collect();
                accumulate(g, *pred, Tensor::from_vec(vp.rows(), vp.cols(), data));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        blocks: &[AttnBlock],
        probs: &[Vec<T>],
        dy: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut dq = Tensor::<T>::zeros(vq.rows(), d);
        let mut dk = Tensor::<T>::zeros(vk.rows(), d);
        let mut dv = Tensor::<T>::zeros(vv.rows(), d);
        let mut pi = 0;
        for blk in blocks {
            let (nq, nk) = (blk.q.len(), blk.k.len());
            for h in 0..heads {
                let p = &probs[pi];
                pi += 1;
                let q_off = blk.q.start * d + h * dh;
                let k_off = blk.k.start * d + h * dh;
                let mut dp = vec![T::ZERO; nq * nk];
                // SAFETY: all views lie within the block ranges validated in
                // the forward pass; destination buffers are distinct.
                unsafe {
                    // dV += P^T dO
                    T::gemm_raw(
                        nk,
                        nq,
                        dh,
                        T::ONE,
                        p.as_ptr(),
                        1,
                        nk as isize,
                        dy.data().as_ptr().add(q_off),
                        d as isize,
                        1,
                        T::ONE,
                        dv.data_mut().as_mut_ptr().add(k_off),
                        d as isize,
                        1,
                    );
                    // dP = dO V^T
                    T::gemm_raw(
                        nq,
                        dh,
                        nk,
                        T::ONE,
                        dy.data().as_ptr().add(q_off),
                        d as isize,
                        1,
                        vv.data().as_ptr().add(k_off),
                        1,
                        d as isize,
                        T::ZERO,
                        dp.as_mut_ptr(),
                        nk as isize,
                        1,
                    );
                }
                for r in 0..nq {
                    let pr = &p[r * nk..(r + 1) * nk];
                    let dr = &mut dp[r * nk..(r + 1) * nk];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
                    for (dv_, pv) in dr.iter_mut().zip(pr) {
                        *dv_ = *pv * (*dv_ - dot) * scale;
                    }
                }
                unsafe {
                    // dQ += dS K
                    T::gemm_raw(
                        nq,
                        nk,
                        dh,
                        T::ONE,
                        dp.as_ptr(),
                        nk as isize,
                        1,
                        vk.data().as_ptr().add(k_off),
                        d as isize,
                        1,
                        T::ONE,
                        dq.data_mut().as_mut_ptr().add(q_off),
                        d as isize,
                        1,
                    );
                    // dK += dS^T Q
                    T::gemm_raw(
                        nk,
                        nq,
                        dh,
                        T::ONE,
                        dp.as_ptr(),
                        1,
                        nk as isize,
                        vq.data().as_ptr().add(q_off),
                        d as isize,
                        1,
                        T::ONE,
                        dk.data_mut().as_mut_ptr().add(k_off),
                        d as isize,
                        1,
                    );
                }
            }
        }
        (dq, dk, dv)
    }
}

fn accumulate<T: Scalar>(g: &mut [Option<Tensor<T>>], v: Var, t: Tensor<T>) {
    match &mut g[v.0] {
        Some(acc) => acc.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f(*x, *y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn softmax_inplace<T: Scalar>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let m = row.iter().copied().fold(row[0], |a, b| a.max(b));
    let mut s = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

fn rope_apply<T: Scalar>(
    x: &mut Tensor<T>,
    table: &RopeTable<T>,
    heads: usize,
    identity_rows: &Range<usize>,
    inverse: bool,
) {
    let d = x.cols();
    let dh = d / heads;
    assert!(2 * table.pairs <= dh, "rope pairs exceed head width");
    assert_eq!(table.tokens, x.rows(), "rope table rows");
    for r in 0..x.rows() {
        if identity_rows.contains(&r) {
            continue;
        }
        let cs = &table.cos[r * table.pairs..(r + 1) * table.pairs];
        let sn = &table.sin[r * table.pairs..(r + 1) * table.pairs];
        let row = x.row_mut(r);
        for h in 0..heads {
            let base = h * dh;
            for p in 0..table.pairs {
                let (c, mut s) = (cs[p], sn[p]);
                if inverse {
                    s = -s;
                }
                let a = row[base + 2 * p];
                let b = row[base + 2 * p + 1];
                row[base + 2 * p] = a * c - b * s;
                row[base + 2 * p + 1] = a * s + b * c;
            }
        }
    }
}

fn im2col_forward<T: Scalar>(x: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut out = Tensor::zeros(g.frames * ho * wo, g.patch_len());
    for f in 0..g.frames {
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = (f * ho + oy) * wo + ox;
                let dst = out.row_mut(orow);
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let irow = (f * g.height + iy as usize) * g.width + ix as usize;
                        let off = (ky * g.kernel + kx) * g.channels;
                        dst[off..off + g.channels].copy_from_slice(x.row(irow));
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Scalar>(dy: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut dx = Tensor::zeros(g.frames * g.height * g.width, g.channels);
    for f in 0..g.frames {
        for oy in 0..ho {
            for ox in 0..wo {
                let orow = (f * ho + oy) * wo + ox;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let irow = (f * g.height + iy as usize) * g.width + ix as usize;
                        let off = (ky * g.kernel + kx) * g.channels;
                        let src = &dy.row(orow)[off..off + g.channels];
                        for (o, s) in dx.row_mut(irow).iter_mut().zip(src) {
                            *o += *s;
                        }
                    }
                }
            }
        }
    }
    dx
}
