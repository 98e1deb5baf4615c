//! Dynamically recorded op tape with reverse-mode differentiation.
//!
//! Every operation appends a [`Node`] holding the forward value and enough
//! bookkeeping to replay the chain rule in reverse. Nodes are identified by
//! [`TensorId`] (an index into the tape), so the tape is topologically sorted
//! by construction. One tape lives for one forward/backward pass and is then
//! dropped; values are immutable once produced.
//!
//! Shape misuse is a programming error and panics. Non-finite values are
//! rejected after every op so a NaN is caught where it is born, not three
//! modules later.

use super::elem::{el, Elem};
use super::kernels;
use crate::geometry::Axis;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    AddScalar(TensorId, f64),
    MulScalar(TensorId, f64),
    Neg(TensorId),
    Abs(TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    Exp(TensorId),
    Ln(TensorId),
    Sqrt(TensorId),
    Sin(TensorId),
    Cos(TensorId),
    ClampMin(TensorId, f64),
    InverseSigmoid(TensorId, f64),
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    AddBias(TensorId, TensorId),
    Softmax(TensorId, usize),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    },
    UpsampleNearest2x(TensorId),
    BilinearSample {
        feat: TensorId,
        points: TensorId,
    },
    GatherRows(TensorId, Vec<usize>),
    GatherCols(TensorId, Vec<usize>),
    ConcatRows(Vec<TensorId>),
    ConcatCols(Vec<TensorId>),
    Reshape(TensorId),
    SumAll(TensorId),
    MeanAll(TensorId),
    RowSum(TensorId),
    MulBcastCol(TensorId, TensorId),
    SumRowGroups(TensorId, usize),
    CanonLines(TensorId, Vec<bool>),
}

#[derive(Debug)]
struct Node<E: Elem> {
    data: Vec<E>,
    shape: Vec<usize>,
    grad: Option<Vec<E>>,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph over elements of type `E`.
#[derive(Debug, Default)]
pub struct Tape<E: Elem> {
    nodes: Vec<Node<E>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Leaves and accessors ────────────────────────────────────────

    /// Record a leaf. `needs_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, data: Vec<E>, shape: &[usize], needs_grad: bool) -> TensorId {
        assert_eq!(
            data.len(),
            numel(shape),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value in leaf"
        );
        self.push(data, shape.to_vec(), Op::Leaf, needs_grad)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, data: Vec<E>, shape: &[usize]) -> TensorId {
        self.leaf(data, shape, false)
    }

    pub fn constant_f64(&mut self, data: &[f64], shape: &[usize]) -> TensorId {
        let conv: Vec<E> = data.iter().map(|&v| el(v)).collect();
        self.constant(conv, shape)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(vec![el(v)], &[1])
    }

    pub fn zeros(&mut self, shape: &[usize]) -> TensorId {
        self.constant(vec![E::ZERO; numel(shape)], shape)
    }

    pub fn data(&self, id: TensorId) -> &[E] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn needs_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> E {
        assert_eq!(self.nodes[id.0].data.len(), 1, "expected scalar tensor");
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, data: Vec<E>, shape: Vec<usize>, op: Op, needs_grad: bool) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, data: Vec<E>, shape: Vec<usize>, op: Op, inputs: &[TensorId]) -> TensorId {
        let needs = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        for (i, v) in data.iter().enumerate() {
            assert!(
                v.is_finite(),
                "non-finite value at index {i} produced by {op:?}"
            );
        }
        self.push(data, shape, op, needs)
    }

    fn rc(&self, id: TensorId) -> (usize, usize) {
        let s = &self.nodes[id.0].shape;
        assert_eq!(s.len(), 2, "expected 2-D tensor, got shape {s:?}");
        (s[0], s[1])
    }

    // ── Elementwise binary ──────────────────────────────────────────

    fn zip(&mut self, a: TensorId, b: TensorId, op: Op, f: impl Fn(E, E) -> E) -> TensorId {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "elementwise op shape mismatch"
        );
        let data: Vec<E> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_op(data, shape, op, &[a, b])
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let cv: E = el(c);
        let data: Vec<E> = self.nodes[a.0].data.iter().map(|&x| x + cv).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_op(data, shape, Op::AddScalar(a, c), &[a])
    }

    pub fn mul_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let cv: E = el(c);
        let data: Vec<E> = self.nodes[a.0].data.iter().map(|&x| x * cv).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_op(data, shape, Op::MulScalar(a, c), &[a])
    }

    // ── Elementwise unary ───────────────────────────────────────────

    fn map(&mut self, a: TensorId, op: Op, f: impl Fn(E) -> E) -> TensorId {
        let data: Vec<E> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push_op(data, shape, op, &[a])
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.map(a, Op::Neg(a), |x| -x)
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        self.map(a, Op::Abs(a), |x| x.abs())
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.map(a, Op::Relu(a), |x| x.max(E::ZERO))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.map(a, Op::Sigmoid(a), sigmoid_scalar)
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.map(a, Op::Exp(a), |x| x.exp())
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        self.map(a, Op::Ln(a), |x| x.ln())
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        self.map(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn sin(&mut self, a: TensorId) -> TensorId {
        self.map(a, Op::Sin(a), |x| x.sin())
    }

    pub fn cos(&mut self, a: TensorId) -> TensorId {
        self.map(a, Op::Cos(a), |x| x.cos())
    }

    pub fn clamp_min(&mut self, a: TensorId, lo: f64) -> TensorId {
        let lov: E = el(lo);
        self.map(a, Op::ClampMin(a, lo), |x| x.max(lov))
    }

    /// logit of the input clamped to [eps, 1-eps].
    pub fn inverse_sigmoid(&mut self, a: TensorId, eps: f64) -> TensorId {
        assert!(eps > 0.0, "inverse_sigmoid eps must be positive");
        let lo: E = el(eps);
        let hi: E = el(1.0 - eps);
        self.map(a, Op::InverseSigmoid(a, eps), |x| {
            let c = x.max(lo).min(hi);
            (c / (E::ONE - c)).ln()
        })
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, ka) = self.rc(a);
        let (kb, n) = self.rc(b);
        assert_eq!(ka, kb, "matmul inner dimensions disagree: {ka} vs {kb}");
        let mut out = vec![E::ZERO; m * n];
        kernels::mm_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, m, ka, n);
        self.push_op(out, vec![m, n], Op::Matmul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (r, c) = self.rc(a);
        let src = &self.nodes[a.0].data;
        let mut out = vec![E::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push_op(out, vec![c, r], Op::Transpose(a), &[a])
    }

    /// x[r,c] + bias[c] broadcast over rows.
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> TensorId {
        let (r, c) = self.rc(x);
        assert_eq!(self.nodes[b.0].shape, vec![c], "bias length mismatch");
        let xd = &self.nodes[x.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![E::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] + bd[j];
            }
        }
        self.push_op(out, vec![r, c], Op::AddBias(x, b), &[x, b])
    }

    // ── Normalization / attention pieces ────────────────────────────

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        assert!(axis < shape.len(), "softmax axis {axis} out of range for {shape:?}");
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = &self.nodes[x.0].data;
        let mut out = vec![E::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = src[at(0)];
                for j in 1..len {
                    mx = mx.max(src[at(j)]);
                }
                let mut sum = E::ZERO;
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / sum;
                }
            }
        }
        self.push_op(out, shape, Op::Softmax(x, axis), &[x])
    }

    /// Normalize over the last axis, then apply per-feature gain and bias.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: f64) -> TensorId {
        let shape = self.nodes[x.0].shape.clone();
        let cols = *shape.last().expect("layer_norm needs rank >= 1");
        assert_eq!(self.nodes[gain.0].shape, vec![cols], "gain length mismatch");
        assert_eq!(self.nodes[bias.0].shape, vec![cols], "bias length mismatch");
        let rows = numel(&shape) / cols;
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gain.0].data;
        let bd = &self.nodes[bias.0].data;
        let epsv: E = el(eps);
        let inv_cols = el::<E>(1.0 / cols as f64);
        let mut out = vec![E::ZERO; xd.len()];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<E>() * inv_cols;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<E>()
                * inv_cols;
            let inv_std = E::ONE / (var + epsv).sqrt();
            for j in 0..cols {
                out[r * cols + j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
        self.push_op(out, shape, Op::LayerNorm { x, gain, bias, eps }, &[x, gain, bias])
    }

    // ── Convolution / sampling ──────────────────────────────────────

    /// x[cin,h,w] * w[cout,cin,kh,kw] (+ b[cout]) with given stride and padding.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
    ) -> TensorId {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        assert_eq!(xs.len(), 3, "conv2d input must be [cin,h,w], got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be [cout,cin,kh,kw], got {ws:?}");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
        assert!(stride >= 1, "conv2d stride must be >= 1");
        let (cin, h, w_in) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = kernels::conv_out_size(h, kh, stride, pad);
        let ow = kernels::conv_out_size(w_in, kw, stride, pad);
        let cols = kernels::im2col(&self.nodes[x.0].data, cin, h, w_in, kh, kw, stride, pad);
        let ck = cin * kh * kw;
        let mut out = vec![E::ZERO; cout * oh * ow];
        kernels::mm_nn(&self.nodes[w.0].data, &cols, &mut out, cout, ck, oh * ow);
        if let Some(bid) = b {
            assert_eq!(self.nodes[bid.0].shape, vec![cout], "conv2d bias length mismatch");
            let bd = &self.nodes[bid.0].data;
            for co in 0..cout {
                let bv = bd[co];
                for v in &mut out[co * oh * ow..(co + 1) * oh * ow] {
                    *v += bv;
                }
            }
        }
        let mut inputs = vec![x, w];
        if let Some(bid) = b {
            inputs.push(bid);
        }
        self.push_op(
            out,
            vec![cout, oh, ow],
            Op::Conv2d { x, w, b, stride, pad },
            &inputs,
        )
    }

    pub fn upsample_nearest_2x(&mut self, x: TensorId) -> TensorId {
        let xs = self.nodes[x.0].shape.clone();
        assert_eq!(xs.len(), 3, "upsample input must be [c,h,w]");
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let src = &self.nodes[x.0].data;
        let mut out = vec![E::ZERO; c * 4 * h * w];
        let (oh, ow) = (2 * h, 2 * w);
        for ch in 0..c {
            for y in 0..oh {
                for x_ in 0..ow {
                    out[(ch * oh + y) * ow + x_] = src[(ch * h + y / 2) * w + x_ / 2];
                }
            }
        }
        self.push_op(out, vec![c, oh, ow], Op::UpsampleNearest2x(x), &[x])
    }

    /// Bilinear interpolation of feat[c,h,w] at points[n,2] given in
    /// normalized [0,1] coordinates (x, y). Out-of-range points clamp to the
    /// border. Returns [n,c]. An empty point list yields an empty result.
    pub fn bilinear_sample(&mut self, feat: TensorId, points: TensorId) -> TensorId {
        let fs = self.nodes[feat.0].shape.clone();
        let ps = self.nodes[points.0].shape.clone();
        assert_eq!(fs.len(), 3, "bilinear_sample feat must be [c,h,w]");
        assert_eq!(ps.len(), 2, "bilinear_sample points must be [n,2]");
        assert_eq!(ps[1], 2, "bilinear_sample points must be [n,2]");
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let n = ps[0];
        let fd = &self.nodes[feat.0].data;
        let pd = &self.nodes[points.0].data;
        let mut out = vec![E::ZERO; n * c];
        for i in 0..n {
            let (x0, x1, fx) = lattice_coords(pd[i * 2], w);
            let (y0, y1, fy) = lattice_coords(pd[i * 2 + 1], h);
            let w00 = (E::ONE - fy) * (E::ONE - fx);
            let w01 = (E::ONE - fy) * fx;
            let w10 = fy * (E::ONE - fx);
            let w11 = fy * fx;
            for ch in 0..c {
                let base = ch * h * w;
                out[i * c + ch] = w00 * fd[base + y0 * w + x0]
                    + w01 * fd[base + y0 * w + x1]
                    + w10 * fd[base + y1 * w + x0]
                    + w11 * fd[base + y1 * w + x1];
            }
        }
        self.push_op(out, vec![n, c], Op::BilinearSample { feat, points }, &[feat, points])
    }

    // ── Shape plumbing ──────────────────────────────────────────────

    pub fn gather_rows(&mut self, x: TensorId, idx: &[usize]) -> TensorId {
        let (r, c) = self.rc(x);
        assert!(idx.iter().all(|&i| i < r), "gather_rows index out of range");
        let src = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push_op(out, vec![idx.len(), c], Op::GatherRows(x, idx.to_vec()), &[x])
    }

    pub fn gather_cols(&mut self, x: TensorId, idx: &[usize]) -> TensorId {
        let (r, c) = self.rc(x);
        assert!(idx.iter().all(|&j| j < c), "gather_cols index out of range");
        let src = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            for &j in idx {
                out.push(src[i * c + j]);
            }
        }
        self.push_op(out, vec![r, idx.len()], Op::GatherCols(x, idx.to_vec()), &[x])
    }

    pub fn slice_cols(&mut self, x: TensorId, from: usize, to: usize) -> TensorId {
        let idx: Vec<usize> = (from..to).collect();
        self.gather_cols(x, &idx)
    }

    pub fn concat_rows(&mut self, xs: &[TensorId]) -> TensorId {
        assert!(!xs.is_empty(), "concat_rows needs at least one input");
        let (_, c) = self.rc(xs[0]);
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (r, cc) = self.rc(x);
            assert_eq!(cc, c, "concat_rows column mismatch");
            rows += r;
            out.extend_from_slice(&self.nodes[x.0].data);
        }
        self.push_op(out, vec![rows, c], Op::ConcatRows(xs.to_vec()), xs)
    }

    pub fn concat_cols(&mut self, xs: &[TensorId]) -> TensorId {
        assert!(!xs.is_empty(), "concat_cols needs at least one input");
        let (r, _) = self.rc(xs[0]);
        let widths: Vec<usize> = xs.iter().map(|&x| self.rc(x).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![E::ZERO; r * total];
        let mut off = 0;
        for (&x, &cw) in xs.iter().zip(&widths) {
            let (rr, _) = self.rc(x);
            assert_eq!(rr, r, "concat_cols row mismatch");
            let src = &self.nodes[x.0].data;
            for i in 0..r {
                out[i * total + off..i * total + off + cw]
                    .copy_from_slice(&src[i * cw..(i + 1) * cw]);
            }
            off += cw;
        }
        self.push_op(out, vec![r, total], Op::ConcatCols(xs.to_vec()), xs)
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> TensorId {
        assert_eq!(
            numel(shape),
            self.nodes[x.0].data.len(),
            "reshape element count mismatch"
        );
        let data = self.nodes[x.0].data.clone();
        self.push_op(data, shape.to_vec(), Op::Reshape(x), &[x])
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: E = self.nodes[x.0].data.iter().copied().sum();
        self.push_op(vec![s], vec![1], Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].data.len();
        assert!(n > 0, "mean of empty tensor");
        let s: E = self.nodes[x.0].data.iter().copied().sum();
        let m = s * el::<E>(1.0 / n as f64);
        self.push_op(vec![m], vec![1], Op::MeanAll(x), &[x])
    }

    /// [r,c] -> [r], summing each row.
    pub fn row_sum(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.rc(x);
        let src = &self.nodes[x.0].data;
        let out: Vec<E> = (0..r)
            .map(|i| src[i * c..(i + 1) * c].iter().copied().sum())
            .collect();
        self.push_op(out, vec![r], Op::RowSum(x), &[x])
    }

    /// x[r,c] scaled per-row by s (shape [r] or [r,1]).
    pub fn mul_bcast_col(&mut self, x: TensorId, s: TensorId) -> TensorId {
        let (r, c) = self.rc(x);
        let sn = &self.nodes[s.0];
        assert!(
            sn.shape == vec![r] || sn.shape == vec![r, 1],
            "mul_bcast_col scale must be [r] or [r,1]"
        );
        let xd = &self.nodes[x.0].data;
        let sd = &self.nodes[s.0].data;
        let mut out = vec![E::ZERO; r * c];
        for i in 0..r {
            let sv = sd[i];
            for j in 0..c {
                out[i * c + j] = xd[i * c + j] * sv;
            }
        }
        self.push_op(out, vec![r, c], Op::MulBcastCol(x, s), &[x, s])
    }

    /// Sum each consecutive run of `group` rows: [a*group, c] -> [a, c].
    pub fn sum_row_groups(&mut self, x: TensorId, group: usize) -> TensorId {
        let (r, c) = self.rc(x);
        assert!(group >= 1 && r % group == 0, "sum_row_groups: {r} rows not divisible by {group}");
        let a = r / group;
        let src = &self.nodes[x.0].data;
        let mut out = vec![E::ZERO; a * c];
        for i in 0..r {
            let dst = (i / group) * c;
            for j in 0..c {
                out[dst + j] += src[i * c + j];
            }
        }
        self.push_op(out, vec![a, c], Op::SumRowGroups(x, group), &[x])
    }

    /// Reorder each line [x1,y1,x2,y2] into canonical endpoint order:
    /// rows left-to-right (x1 <= x2), columns top-to-bottom (y1 <= y2).
    pub fn canon_lines(&mut self, x: TensorId, axis: Axis) -> TensorId {
        let (k, c) = self.rc(x);
        assert_eq!(c, 4, "canon_lines expects [k,4] lines");
        let src = &self.nodes[x.0].data;
        let mut out = vec![E::ZERO; k * 4];
        let mut swaps = vec![false; k];
        for i in 0..k {
            let row = &src[i * 4..i * 4 + 4];
            let swap = match axis {
                Axis::Row => row[0] > row[2],
                Axis::Col => row[1] > row[3],
            };
            swaps[i] = swap;
            if swap {
                out[i * 4..i * 4 + 4].copy_from_slice(&[row[2], row[3], row[0], row[1]]);
            } else {
                out[i * 4..i * 4 + 4].copy_from_slice(row);
            }
        }
        self.push_op(out, vec![k, 4], Op::CanonLines(x, swaps), &[x])
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates `grad` on every node that
    /// influences the loss and was marked as needing gradients.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(
            self.nodes[loss.0].data.len(),
            1,
            "backward requires a scalar loss"
        );
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<E>>> = vec![None; n];
        grads[loss.0] = Some(vec![E::ONE]);

        for i in (0..n).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i].grad = Some(g);
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<E>>], id: TensorId, delta: &[E]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a += *b;
                }
            }
            None => grads[id.0] = Some(delta.to_vec()),
        }
    }

    #[allow(clippy::needless_range_loop)]
    fn propagate(&self, i: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, a, g);
                self.acc(grads, b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, a, g);
                let neg: Vec<E> = g.iter().map(|&v| -v).collect();
                self.acc(grads, b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<E> = g
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(&gv, &bv)| gv * bv)
                    .collect();
                let db: Vec<E> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gv, &av)| gv * av)
                    .collect();
                self.acc(grads, a, &da);
                self.acc(grads, b, &db);
            }
            Op::Div(a, b) => {
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                let da: Vec<E> = g.iter().zip(bd).map(|(&gv, &bv)| gv / bv).collect();
                let db: Vec<E> = g
                    .iter()
                    .zip(ad.iter().zip(bd))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect();
                self.acc(grads, a, &da);
                self.acc(grads, b, &db);
            }
            Op::AddScalar(a, _) => self.acc(grads, a, g),
            Op::MulScalar(a, c) => {
                let cv: E = el(c);
                let da: Vec<E> = g.iter().map(|&v| v * cv).collect();
                self.acc(grads, a, &da);
            }
            Op::Neg(a) => {
                let da: Vec<E> = g.iter().map(|&v| -v).collect();
                self.acc(grads, a, &da);
            }
            Op::Abs(a) => {
                let da: Vec<E> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gv, &av)| {
                        if av > E::ZERO {
                            gv
                        } else if av < E::ZERO {
                            -gv
                        } else {
                            E::ZERO
                        }
                    })
                    .collect();
                self.acc(grads, a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<E> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gv, &av)| if av > E::ZERO { gv } else { E::ZERO })
                    .collect();
                self.acc(grads, a, &da);
            }
            Op::Sigmoid(a) => {
                let yd = &self.nodes[i].data;
                let da: Vec<E> = g
                    .iter()
                    .zip(yd)
                    .map(|(&gv, &y)| gv * y * (E::ONE - y))
                    .collect();
                self.acc(grads, a, &da);
            }
            Op::Exp(a) => {
                let yd = &self.nodes[i].data;
                let da: Vec<E> = g.iter().zip(yd).map(|(&gv, &y)| gv * y).collect();
                self.acc(grads, a, &da);
            }
            Op::Ln(a) => {
                let da: Vec<E> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gv, &av)| gv / av)
                    .collect();
                self.acc(grads, a, &da);
            }
            Op::Sqrt(a) => {
                let yd = &self.nodes[i].data;
                let half: E = el(0.5);
                let da: Vec<E> = g
                    .iter()
                    .zip(yd)
                    .map(|(&gv, &y)| gv * half / y)
                    .collect();
                self.acc(grads, a, &da);
            }
            Op::Sin(a) => {
                let da: Vec<E> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gv, &av)| gv * av.cos())
                    .collect();
                self.acc(grads, a, &da);
            }
            Op::Cos(a) => {
                let da: Vec<E> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gv, &av)| -gv * av.sin())
                    .collect();
                self.acc(grads, a, &da);
            }
            Op::ClampMin(a, lo) => {
                let lov: E = el(lo);
                let da: Vec<E> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gv, &av)| if av > lov { gv } else { E::ZERO })
                    .collect();
                self.acc(grads, a, &da);
            }
            Op::InverseSigmoid(a, eps) => {
                let lo: E = el(eps);
                let hi: E = el(1.0 - eps);
                let da: Vec<E> = g
                    .iter()
                    .zip(&self.nodes[a.0].data)
                    .map(|(&gv, &av)| {
                        if av > lo && av < hi {
                            gv / (av * (E::ONE - av))
                        } else {
                            E::ZERO
                        }
                    })
                    .collect();
                self.acc(grads, a, &da);
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.rc(a);
                let (_, n) = self.rc(b);
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![E::ZERO; m * k];
                    kernels::mm_nt(g, &self.nodes[b.0].data, &mut da, m, n, k);
                    self.acc(grads, a, &da);
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![E::ZERO; k * n];
                    kernels::mm_tn(&self.nodes[a.0].data, g, &mut db, k, m, n);
                    self.acc(grads, b, &db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.rc(a);
                let mut da = vec![E::ZERO; r * c];
                for i_ in 0..c {
                    for j in 0..r {
                        da[j * c + i_] = g[i_ * r + j];
                    }
                }
                self.acc(grads, a, &da);
            }
            Op::AddBias(x, b) => {
                self.acc(grads, x, g);
                if self.nodes[b.0].needs_grad {
                    let (r, c) = self.rc(x);
                    let mut db = vec![E::ZERO; c];
                    for i_ in 0..r {
                        for j in 0..c {
                            db[j] += g[i_ * c + j];
                        }
                    }
                    self.acc(grads, b, &db);
                }
            }
            Op::Softmax(x, axis) => {
                let shape = &self.nodes[i].shape;
                let len = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..axis].iter().product();
                let y = &self.nodes[i].data;
                let mut dx = vec![E::ZERO; y.len()];
                for o in 0..outer {
                    for i_ in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i_;
                        let mut dot = E::ZERO;
                        for j in 0..len {
                            dot += y[at(j)] * g[at(j)];
                        }
                        for j in 0..len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.acc(grads, x, &dx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                self.layer_norm_backward(i, x, gain, bias, eps, g, grads);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv2d_backward(x, w, b, stride, pad, g, grads);
            }
            Op::UpsampleNearest2x(x) => {
                let xs = &self.nodes[x.0].shape;
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![E::ZERO; c * h * w];
                let (oh, ow) = (2 * h, 2 * w);
                for ch in 0..c {
                    for y in 0..oh {
                        for x_ in 0..ow {
                            dx[(ch * h + y / 2) * w + x_ / 2] += g[(ch * oh + y) * ow + x_];
                        }
                    }
                }
                self.acc(grads, x, &dx);
            }
            Op::BilinearSample { feat, points } => {
                self.bilinear_backward(feat, points, g, grads);
            }
            Op::GatherRows(x, idx) => {
                let (r, c) = self.rc(x);
                let mut dx = vec![E::ZERO; r * c];
                for (o, &src_row) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[src_row * c + j] += g[o * c + j];
                    }
                }
                self.acc(grads, x, &dx);
            }
            Op::GatherCols(x, idx) => {
                let (r, c) = self.rc(x);
                let k = idx.len();
                let mut dx = vec![E::ZERO; r * c];
                for i_ in 0..r {
                    for (o, &src_col) in idx.iter().enumerate() {
                        dx[i_ * c + src_col] += g[i_ * k + o];
                    }
                }
                self.acc(grads, x, &dx);
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for x in xs {
                    let (r, c) = self.rc(x);
                    self.acc(grads, x, &g[off..off + r * c]);
                    off += r * c;
                }
            }
            Op::ConcatCols(xs) => {
                let total = self.nodes[i].shape[1];
                let rows = self.nodes[i].shape[0];
                let mut off = 0;
                for x in xs {
                    let (_, cw) = self.rc(x);
                    if self.nodes[x.0].needs_grad {
                        let mut dx = vec![E::ZERO; rows * cw];
                        for r_ in 0..rows {
                            dx[r_ * cw..(r_ + 1) * cw]
                                .copy_from_slice(&g[r_ * total + off..r_ * total + off + cw]);
                        }
                        self.acc(grads, x, &dx);
                    }
                    off += cw;
                }
            }
            Op::Reshape(x) => self.acc(grads, x, g),
            Op::SumAll(x) => {
                let n = self.nodes[x.0].data.len();
                let dx = vec![g[0]; n];
                self.acc(grads, x, &dx);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].data.len();
                let dv = g[0] * el::<E>(1.0 / n as f64);
                let dx = vec![dv; n];
                self.acc(grads, x, &dx);
            }
            Op::RowSum(x) => {
                let (r, c) = self.rc(x);
                let mut dx = vec![E::ZERO; r * c];
                for i_ in 0..r {
                    for j in 0..c {
                        dx[i_ * c + j] = g[i_];
                    }
                }
                self.acc(grads, x, &dx);
            }
            Op::MulBcastCol(x, s) => {
                let (r, c) = self.rc(x);
                let xd = &self.nodes[x.0].data;
                let sd = &self.nodes[s.0].data;
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![E::ZERO; r * c];
                    for i_ in 0..r {
                        for j in 0..c {
                            dx[i_ * c + j] = g[i_ * c + j] * sd[i_];
                        }
                    }
                    self.acc(grads, x, &dx);
                }
                if self.nodes[s.0].needs_grad {
                    let mut ds = vec![E::ZERO; r];
                    for i_ in 0..r {
                        for j in 0..c {
                            ds[i_] += g[i_ * c + j] * xd[i_ * c + j];
                        }
                    }
                    self.acc(grads, s, &ds);
                }
            }
            Op::SumRowGroups(x, group) => {
                let (r, c) = self.rc(x);
                let mut dx = vec![E::ZERO; r * c];
                for i_ in 0..r {
                    let src = (i_ / group) * c;
                    dx[i_ * c..(i_ + 1) * c].copy_from_slice(&g[src..src + c]);
                }
                self.acc(grads, x, &dx);
            }
            Op::CanonLines(x, swaps) => {
                let k = swaps.len();
                let mut dx = vec![E::ZERO; k * 4];
                for i_ in 0..k {
                    if swaps[i_] {
                        dx[i_ * 4] = g[i_ * 4 + 2];
                        dx[i_ * 4 + 1] = g[i_ * 4 + 3];
                        dx[i_ * 4 + 2] = g[i_ * 4];
                        dx[i_ * 4 + 3] = g[i_ * 4 + 1];
                    } else {
                        dx[i_ * 4..i_ * 4 + 4].copy_from_slice(&g[i_ * 4..i_ * 4 + 4]);
                    }
                }
                self.acc(grads, x, &dx);
            }
        }
    }

    fn layer_norm_backward(
        &self,
        out: usize,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
        g: &[E],
        grads: &mut [Option<Vec<E>>],
    ) {
        let shape = &self.nodes[out].shape;
        let cols = *shape.last().unwrap();
        let rows = numel(shape) / cols;
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gain.0].data;
        let epsv: E = el(eps);
        let inv_cols = el::<E>(1.0 / cols as f64);
        let mut dx = vec![E::ZERO; xd.len()];
        let mut dgain = vec![E::ZERO; cols];
        let mut dbias = vec![E::ZERO; cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let grow = &g[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<E>() * inv_cols;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<E>()
                * inv_cols;
            let inv_std = E::ONE / (var + epsv).sqrt();
            let mut sum_dy = E::ZERO;
            let mut sum_dyy = E::ZERO;
            for j in 0..cols {
                let yj = (row[j] - mean) * inv_std;
                let dyj = grow[j] * gd[j];
                sum_dy += dyj;
                sum_dyy += dyj * yj;
                dgain[j] += grow[j] * yj;
                dbias[j] += grow[j];
            }
            for j in 0..cols {
                let yj = (row[j] - mean) * inv_std;
                let dyj = grow[j] * gd[j];
                dx[r * cols + j] = inv_std * (dyj - inv_cols * sum_dy - yj * inv_cols * sum_dyy);
            }
        }
        self.acc(grads, x, &dx);
        self.acc(grads, gain, &dgain);
        self.acc(grads, bias, &dbias);
    }

    fn conv2d_backward(
        &self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        pad: usize,
        g: &[E],
        grads: &mut [Option<Vec<E>>],
    ) {
        let xs = &self.nodes[x.0].shape;
        let ws = &self.nodes[w.0].shape;
        let (cin, h, w_in) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = kernels::conv_out_size(h, kh, stride, pad);
        let ow = kernels::conv_out_size(w_in, kw, stride, pad);
        let ohw = oh * ow;
        let ck = cin * kh * kw;

        if self.nodes[w.0].needs_grad {
            let cols = kernels::im2col(&self.nodes[x.0].data, cin, h, w_in, kh, kw, stride, pad);
            let mut dw = vec![E::ZERO; cout * ck];
            kernels::mm_nt(g, &cols, &mut dw, cout, ohw, ck);
            self.acc(grads, w, &dw);
        }
        if self.nodes[x.0].needs_grad {
            let mut dcols = vec![E::ZERO; ck * ohw];
            kernels::mm_tn(&self.nodes[w.0].data, g, &mut dcols, ck, cout, ohw);
            let mut dx = vec![E::ZERO; cin * h * w_in];
            kernels::col2im_acc(&dcols, &mut dx, cin, h, w_in, kh, kw, stride, pad);
            self.acc(grads, x, &dx);
        }
        if let Some(bid) = b {
            if self.nodes[bid.0].needs_grad {
                let mut db = vec![E::ZERO; cout];
                for co in 0..cout {
                    db[co] = g[co * ohw..(co + 1) * ohw].iter().copied().sum();
                }
                self.acc(grads, bid, &db);
            }
        }
    }

    fn bilinear_backward(
        &self,
        feat: TensorId,
        points: TensorId,
        g: &[E],
        grads: &mut [Option<Vec<E>>],
    ) {
        let fs = &self.nodes[feat.0].shape;
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let n = self.nodes[points.0].shape[0];
        let fd = &self.nodes[feat.0].data;
        let pd = &self.nodes[points.0].data;
        let want_feat = self.nodes[feat.0].needs_grad;
        let want_pts = self.nodes[points.0].needs_grad;
        let mut dfeat = vec![E::ZERO; fd.len()];
        let mut dpts = vec![E::ZERO; n * 2];
        for i in 0..n {
            let px = pd[i * 2];
            let py = pd[i * 2 + 1];
            let (x0, x1, fx) = lattice_coords(px, w);
            let (y0, y1, fy) = lattice_coords(py, h);
            let w00 = (E::ONE - fy) * (E::ONE - fx);
            let w01 = (E::ONE - fy) * fx;
            let w10 = fy * (E::ONE - fx);
            let w11 = fy * fx;
            // The point gradient picks up the lattice scale; it is zero when
            // the point was clamped at the border.
            let sx = if px > E::ZERO && px < E::ONE {
                el::<E>((w - 1) as f64)
            } else {
                E::ZERO
            };
            let sy = if py > E::ZERO && py < E::ONE {
                el::<E>((h - 1) as f64)
            } else {
                E::ZERO
            };
            for ch in 0..c {
                let base = ch * h * w;
                let gv = g[i * c + ch];
                if want_feat {
                    dfeat[base + y0 * w + x0] += gv * w00;
                    dfeat[base + y0 * w + x1] += gv * w01;
                    dfeat[base + y1 * w + x0] += gv * w10;
                    dfeat[base + y1 * w + x1] += gv * w11;
                }
                if want_pts {
                    let f00 = fd[base + y0 * w + x0];
                    let f01 = fd[base + y0 * w + x1];
                    let f10 = fd[base + y1 * w + x0];
                    let f11 = fd[base + y1 * w + x1];
                    let dfx = (E::ONE - fy) * (f01 - f00) + fy * (f11 - f10);
                    let dfy = (E::ONE - fx) * (f10 - f00) + fx * (f11 - f01);
                    dpts[i * 2] += gv * dfx * sx;
                    dpts[i * 2 + 1] += gv * dfy * sy;
                }
            }
        }
        if want_feat {
            self.acc(grads, feat, &dfeat);
        }
        if want_pts {
            self.acc(grads, points, &dpts);
        }
    }
}

fn sigmoid_scalar<E: Elem>(x: E) -> E {
    if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}

/// Map a normalized coordinate onto a lattice of `size` nodes:
/// clamp to [0,1], scale by (size-1), split into neighbors and fraction.
fn lattice_coords<E: Elem>(v: E, size: usize) -> (usize, usize, E) {
    let clamped = v.max(E::ZERO).min(E::ONE);
    let scaled = clamped * el::<E>((size - 1) as f64);
    let lo = scaled.to_f64().floor() as usize;
    let lo = lo.min(size - 1);
    let hi = (lo + 1).min(size - 1);
    let frac = scaled - el::<E>(lo as f64);
    (lo, hi, frac)
}
