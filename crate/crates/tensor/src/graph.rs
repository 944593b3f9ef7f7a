//! Tape of differentiable ops.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the tape
//! is a valid topological order for backpropagation. Gradients are only
//! materialised for nodes that (transitively) depend on a leaf created with
//! `requires_grad`; the returned [`Gradients`] keeps leaf gradients only.

use crate::conv::{col2im, im2col, ConvGeometry};
use crate::gemm::matmul;
use crate::{Elem, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const NORM_FLOOR: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;
const IM2COL_BUDGET: usize = 1 << 22;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MulConst(Var, Tensor<T>),
    AddConst(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    SigmoidPair(Var),
    Softmax(Var),
    ClampLog(Var, T),
    Abs(Var),
    Square(Var),
    SumAll(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    TileRows(Var, usize),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Threshold {
        x: Var,
        beta: T,
    },
    MaskedMeanPool {
        x: Var,
        mask: Vec<T>,
        counts: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Elem> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not affect the root.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Elem> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn zip_map(&self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{what}: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, "add", |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, "sub", |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip_map(a, b, "mul", |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// `x + bias` with `bias` broadcast over every row of the trailing dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let vb = self.value(bias);
        let w = vx.last_dim();
        assert_eq!(vb.len(), w, "add_bias: bias width {} vs {}", vb.len(), w);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(w) {
            for (v, &b) in row.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push(out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Elementwise product with a constant tensor (masks, fixed weights).
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape(), c.shape(), "mul_const: shape mismatch");
        let data = vx.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push(out, Op::MulConst(x, c), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.shape(), c.shape(), "add_const: shape mismatch");
        let data = vx.data().iter().zip(c.data()).map(|(&a, &b)| a + b).collect();
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push(out, Op::AddConst(x), &[x])
    }

    /// Matrix product of `[m, k] @ [k, n]`, or batched `[B, m, k] @ [B, k, n]`.
    /// `ta`/`tb` read the stored operand transposed (`[k, m]` / `[n, k]`).
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), sb.len(), "matmul: rank mismatch {sa:?} vs {sb:?}");
        let (batch, ra, ca, rb, cb) = match sa.len() {
            2 => (1, sa[0], sa[1], sb[0], sb[1]),
            3 => {
                assert_eq!(sa[0], sb[0], "matmul: batch mismatch");
                (sa[0], sa[1], sa[2], sb[1], sb[2])
            }
            r => panic!("matmul: unsupported rank {r}"),
        };
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, k2, "matmul: inner dims {sa:?} (t={ta}) vs {sb:?} (t={tb})");
        let mut out = vec![T::zero(); batch * m * n];
        matmul(
            batch,
            m,
            k,
            n,
            self.value(a).data(),
            ta,
            m * k,
            self.value(b).data(),
            tb,
            k * n,
            &mut out,
            false,
        );
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let out = Tensor::from_parts(shape, out);
        self.push(
            out,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `x @ w + b` for `x` of shape `[.., in]`, `w` of shape `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let inner = *shape.last().expect("linear on scalar");
        let rows = shape.iter().product::<usize>() / inner.max(1);
        let flat = self.reshape(x, &[rows, inner]);
        let y = self.matmul(flat, w);
        let y = self.add_bias(y, b);
        let out_w = self.shape(w)[1];
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = out_w;
        self.reshape(y, &out_shape)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Expand logits `[.., K]` to per-label binary distributions `[.., K, 2]`
    /// holding `(1 - sigmoid(z), sigmoid(z))`.
    pub fn sigmoid_pair(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut data = Vec::with_capacity(vx.len() * 2);
        for &z in vx.data() {
            data.push(sigmoid(-z));
            data.push(sigmoid(z));
        }
        let mut shape = vx.shape().to_vec();
        shape.push(2);
        let out = Tensor::from_parts(shape, data);
        self.push(out, Op::SigmoidPair(x), &[x])
    }

    /// Softmax over the trailing dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let w = vx.last_dim();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(w) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push(out, Op::Softmax(x), &[x])
    }

    /// `ln(max(x, floor))`; gradient is zero where the clamp is active.
    pub fn clamp_log(&mut self, x: Var, floor: T) -> Var {
        let out = self.value(x).map(|v| v.max(floor).ln());
        self.push(out, Op::ClampLog(x, floor), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        self.push(out, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x);
        if v.shape() == shape {
            return x;
        }
        let out = v
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let out = permute_tensor(self.value(x), perm);
        self.push(out, Op::Permute(x, perm.to_vec()), &[x])
    }

    /// Repeat the whole tensor `k` times along the first axis.
    pub fn tile_rows(&mut self, x: Var, k: usize) -> Var {
        let v = self.value(x);
        let mut data = Vec::with_capacity(v.len() * k);
        for _ in 0..k {
            data.extend_from_slice(v.data());
        }
        let mut shape = v.shape().to_vec();
        shape[0] *= k;
        let out = Tensor::from_parts(shape, data);
        self.push(out, Op::TileRows(x, k), &[x])
    }

    /// Stride-1 convolution on NHWC input. `w` is `[k*k*C_in, C_out]`
    /// (rows ordered `ky, kx, c`), `b` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize, padding: usize) -> Var {
        let sx = self.shape(x).to_vec();
        assert_eq!(sx.len(), 4, "conv2d expects NHWC input");
        let sw = self.shape(w).to_vec();
        let geom = ConvGeometry {
            batch: sx[0],
            height: sx[1],
            width: sx[2],
            in_channels: sx[3],
            out_channels: sw[1],
            kernel,
            padding,
        };
        assert_eq!(sw[0], geom.patch_len(), "conv2d: weight rows vs patch length");
        assert_eq!(self.value(b).len(), geom.out_channels, "conv2d: bias width");
        assert!(sx[1] + 2 * padding >= kernel && sx[2] + 2 * padding >= kernel, "conv2d: kernel larger than input");
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let per_sample = oh * ow;
        let patch = geom.patch_len();
        let oc = geom.out_channels;
        let mut out = vec![T::zero(); geom.batch * per_sample * oc];
        let chunk = geom.chunk_samples(IM2COL_BUDGET);
        let mut cols = vec![T::zero(); chunk * per_sample * patch];
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut start = 0;
        while start < geom.batch {
            let count = chunk.min(geom.batch - start);
            im2col(xs, &geom, start, count, &mut cols);
            let rows = count * per_sample;
            matmul(
                1,
                rows,
                patch,
                oc,
                &cols[..rows * patch],
                false,
                0,
                ws,
                false,
                0,
                &mut out[start * per_sample * oc..(start + count) * per_sample * oc],
                false,
            );
            start += count;
        }
        let bias = self.value(b).data();
        for row in out.chunks_mut(oc) {
            for (v, &bb) in row.iter_mut().zip(bias) {
                *v += bb;
            }
        }
        let out = Tensor::from_parts(vec![geom.batch, oh, ow, oc], out);
        self.push(out, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    /// 2x2 max pooling with stride 2 on NHWC input (floor semantics).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.shape();
        assert_eq!(s.len(), 4, "max_pool2 expects NHWC input");
        let (bsz, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(bsz * oh * ow * c);
        let mut argmax = Vec::with_capacity(bsz * oh * ow * c);
        let d = v.data();
        for b in 0..bsz {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        let mut best_v = T::neg_infinity();
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                                if best == usize::MAX || d[idx] > best_v {
                                    best = idx;
                                    best_v = d[idx];
                                }
                            }
                        }
                        out.push(best_v);
                        argmax.push(best);
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![bsz, oh, ow, c], out);
        self.push(out, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// Gather rows of `table` (`[V, d]`) by id, producing `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let d = t.last_dim();
        let vocab = t.shape()[0];
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < vocab, "embedding id {id} out of range {vocab}");
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Layer normalisation over the trailing dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let w = vx.last_dim();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert!(g.len() == w && b.len() == w, "layer_norm: affine width");
        let eps = T::lit(LAYER_NORM_EPS);
        let wt = T::lit(w as f64);
        let mut out = Vec::with_capacity(vx.len());
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(vx.rows());
        for row in vx.data().chunks(w) {
            let mean = row.iter().copied().sum::<T>() / wt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wt;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * r;
                xhat.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), out);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Scale each trailing-dimension row to unit L2 norm; rows with
    /// (near-)zero norm map to zero with zero gradient.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let w = vx.last_dim();
        let floor = T::lit(NORM_FLOOR);
        let mut data = vx.data().to_vec();
        let mut norms = Vec::with_capacity(vx.rows());
        for row in data.chunks_mut(w) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(n);
            if n > floor {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                row.iter_mut().for_each(|v| *v = T::zero());
            }
        }
        let out = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push(out, Op::L2Normalize { x, norms }, &[x])
    }

    /// Keep entries `>= beta`, zero the rest. Gradient passes through kept entries.
    pub fn threshold(&mut self, x: Var, beta: T) -> Var {
        let out = self.value(x).map(|v| if v >= beta { v } else { T::zero() });
        self.push(out, Op::Threshold { x, beta }, &[x])
    }

    /// Mean over axis 1 of `[B, T, d]` restricted to positions where `mask` is 1.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &Tensor<T>) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert_eq!(s.len(), 3, "masked_mean_pool expects [B, T, d]");
        let (bsz, t, d) = (s[0], s[1], s[2]);
        assert_eq!(mask.shape(), &[bsz, t], "masked_mean_pool: mask shape");
        let mut out = vec![T::zero(); bsz * d];
        let mut counts = Vec::with_capacity(bsz);
        for b in 0..bsz {
            let mut cnt = T::zero();
            for ti in 0..t {
                let m = mask.data()[b * t + ti];
                if m == T::zero() {
                    continue;
                }
                cnt += m;
                let row = &vx.data()[(b * t + ti) * d..(b * t + ti + 1) * d];
                for (o, &v) in out[b * d..(b + 1) * d].iter_mut().zip(row) {
                    *o += m * v;
                }
            }
            let cnt = if cnt > T::zero() { cnt } else { T::one() };
            out[b * d..(b + 1) * d].iter_mut().for_each(|v| *v /= cnt);
            counts.push(cnt);
        }
        let out = Tensor::from_parts(vec![bsz, d], out);
        self.push(
            out,
            Op::MaskedMeanPool {
                x,
                mask: mask.data().to_vec(),
                counts,
            },
            &[x],
        )
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let n = self.nodes.len();
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::from_parts(
            self.value(root).shape().to_vec(),
            vec![T::one()],
        ));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.value(v).shape(), "gradient shape");
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, i: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.clone());
                }
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let ga = elementwise(&g, self.value(*b), |x, y| x * y);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = elementwise(&g, self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*b) {
                    let w = g.last_dim();
                    let mut gb = vec![T::zero(); w];
                    for row in g.data().chunks(w) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::from_parts(shape, gb));
                }
                self.accumulate(grads, *x, g);
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::MulConst(x, c) => {
                self.accumulate(grads, *x, elementwise(&g, c, |a, b| a * b));
            }
            Op::AddConst(x) => self.accumulate(grads, *x, g),
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            } => {
                let (batch, m, k, n, ta, tb) = (*batch, *m, *k, *n, *ta, *tb);
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let gd = g.data();
                if self.wants(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    if !ta {
                        matmul(batch, m, n, k, gd, false, m * n, vb, !tb, k * n, &mut ga, false);
                    } else {
                        matmul(batch, k, n, m, vb, tb, k * n, gd, true, m * n, &mut ga, false);
                    }
                    let shape = self.value(*a).shape().to_vec();
                    self.accumulate(grads, *a, Tensor::from_parts(shape, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    if !tb {
                        matmul(batch, k, m, n, va, !ta, m * k, gd, false, m * n, &mut gb, false);
                    } else {
                        matmul(batch, n, m, k, gd, true, m * n, va, ta, m * k, &mut gb, false);
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::from_parts(shape, gb));
                }
            }
            Op::Relu(x) => {
                let gx = elementwise(&g, self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = elementwise(&g, out, |gv, y| gv * y * (T::one() - y));
                self.accumulate(grads, *x, gx);
            }
            Op::SigmoidPair(x) => {
                let od = out.data();
                let gd = g.data();
                let data = (0..od.len() / 2)
                    .map(|j| {
                        let s = od[2 * j + 1];
                        s * (T::one() - s) * (gd[2 * j + 1] - gd[2 * j])
                    })
                    .collect();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_parts(shape, data));
            }
            Op::Softmax(x) => {
                let w = out.last_dim();
                let mut data = Vec::with_capacity(out.len());
                for (yr, gr) in out.data().chunks(w).zip(g.data().chunks(w)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                    data.extend(yr.iter().zip(gr).map(|(&y, &gv)| y * (gv - dot)));
                }
                self.accumulate(grads, *x, Tensor::from_parts(out.shape().to_vec(), data));
            }
            Op::ClampLog(x, floor) => {
                let floor = *floor;
                let gx = elementwise(&g, self.value(*x), |gv, xv| if xv > floor { gv / xv } else { T::zero() });
                self.accumulate(grads, *x, gx);
            }
            Op::Abs(x) => {
                let gx = elementwise(&g, self.value(*x), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Square(x) => {
                let two = T::lit(2.0);
                let gx = elementwise(&g, self.value(*x), |gv, xv| two * xv * gv);
                self.accumulate(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let s = g.item();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, s));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                let gx = g.reshape(&shape).expect("reshape grad");
                self.accumulate(grads, *x, gx);
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *x, permute_tensor(&g, &inv));
            }
            Op::TileRows(x, k) => {
                let shape = self.value(*x).shape().to_vec();
                let len = self.value(*x).len();
                let mut data = vec![T::zero(); len];
                for block in g.data().chunks(len).take(*k) {
                    for (a, &b) in data.iter_mut().zip(block) {
                        *a += b;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, data));
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, geom, &g, grads),
            Op::MaxPool2 { x, argmax } => {
                if self.wants(*x) {
                    let shape = self.value(*x).shape().to_vec();
                    let mut data = vec![T::zero(); self.value(*x).len()];
                    for (&idx, &gv) in argmax.iter().zip(g.data()) {
                        data[idx] += gv;
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(shape, data));
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let shape = self.value(*table).shape().to_vec();
                    let d = shape[1];
                    let mut data = vec![T::zero(); shape[0] * d];
                    for (row, &id) in g.data().chunks(d).zip(ids) {
                        for (a, &v) in data[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    self.accumulate(grads, *table, Tensor::from_parts(shape, data));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let w = g.last_dim();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = vec![T::zero(); w];
                    let mut gbeta = vec![T::zero(); w];
                    for (gr, xr) in g.data().chunks(w).zip(xhat.chunks(w)) {
                        for j in 0..w {
                            gg[j] += gr[j] * xr[j];
                            gbeta[j] += gr[j];
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::from_parts(vec![w], gg));
                    self.accumulate(grads, *beta, Tensor::from_parts(vec![w], gbeta));
                }
                if self.wants(*x) {
                    let wt = T::lit(w as f64);
                    let mut data = Vec::with_capacity(g.len());
                    for ((gr, xr), &r) in g.data().chunks(w).zip(xhat.chunks(w)).zip(rstd) {
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..w {
                            let d = gr[j] * gam[j];
                            sum_d += d;
                            sum_dx += d * xr[j];
                        }
                        for j in 0..w {
                            let d = gr[j] * gam[j];
                            data.push(r / wt * (wt * d - sum_d - xr[j] * sum_dx));
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), data));
                }
            }
            Op::L2Normalize { x, norms } => {
                let w = g.last_dim();
                let floor = T::lit(NORM_FLOOR);
                let mut data = Vec::with_capacity(g.len());
                for ((yr, gr), &nrm) in out.data().chunks(w).zip(g.data().chunks(w)).zip(norms) {
                    if nrm > floor {
                        let dot: T = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                        data.extend(yr.iter().zip(gr).map(|(&y, &gv)| (gv - y * dot) / nrm));
                    } else {
                        data.extend(std::iter::repeat_n(T::zero(), w));
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Threshold { x, beta } => {
                let beta = *beta;
                let gx = elementwise(&g, self.value(*x), |gv, xv| if xv >= beta { gv } else { T::zero() });
                self.accumulate(grads, *x, gx);
            }
            Op::MaskedMeanPool { x, mask, counts } => {
                let s = self.value(*x).shape().to_vec();
                let (bsz, t, d) = (s[0], s[1], s[2]);
                let mut data = vec![T::zero(); bsz * t * d];
                for b in 0..bsz {
                    let gr = &g.data()[b * d..(b + 1) * d];
                    for ti in 0..t {
                        let m = mask[b * t + ti];
                        if m == T::zero() {
                            continue;
                        }
                        let scale = m / counts[b];
                        for (o, &gv) in data[(b * t + ti) * d..(b * t + ti + 1) * d].iter_mut().zip(gr) {
                            *o = gv * scale;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(s, data));
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        geom: &ConvGeometry,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let oc = geom.out_channels;
        let patch = geom.patch_len();
        let per_sample = geom.positions_per_sample();
        let gd = g.data();
        if self.wants(b) {
            let mut gb = vec![T::zero(); oc];
            for row in gd.chunks(oc) {
                for (a, &v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
            self.accumulate(grads, b, Tensor::from_parts(vec![oc], gb));
        }
        let want_w = self.wants(w);
        let want_x = self.wants(x);
        if !want_w && !want_x {
            return;
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let chunk = geom.chunk_samples(IM2COL_BUDGET);
        let mut cols = vec![T::zero(); chunk * per_sample * patch];
        let mut gw = if want_w { vec![T::zero(); patch * oc] } else { Vec::new() };
        let mut gx = if want_x { vec![T::zero(); xs.len()] } else { Vec::new() };
        let mut start = 0;
        while start < geom.batch {
            let count = chunk.min(geom.batch - start);
            let rows = count * per_sample;
            let g_chunk = &gd[start * per_sample * oc..(start + count) * per_sample * oc];
            if want_w {
                im2col(xs, geom, start, count, &mut cols);
                // gw += cols^T @ g
                matmul(1, patch, rows, oc, &cols[..rows * patch], true, 0, g_chunk, false, 0, &mut gw, true);
            }
            if want_x {
                // dcols = g @ w^T
                let dcols = &mut cols[..rows * patch];
                matmul(1, rows, oc, patch, g_chunk, false, 0, ws, true, 0, dcols, false);
                col2im(dcols, geom, start, count, &mut gx);
            }
            start += count;
        }
        if want_w {
            self.accumulate(grads, w, Tensor::from_parts(vec![patch, oc], gw));
        }
        if want_x {
            let shape = self.value(x).shape().to_vec();
            self.accumulate(grads, x, Tensor::from_parts(shape, gx));
        }
    }
}

fn sigmoid<T: Elem>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn elementwise<T: Elem>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

pub(crate) fn permute_tensor<T: Elem>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = t.shape();
    let rank = shape.len();
    assert_eq!(perm.len(), rank, "permute: rank mismatch");
    let mut seen = vec![false; rank];
    for &p in perm {
        assert!(p < rank && !seen[p], "permute: invalid permutation {perm:?}");
        seen[p] = true;
    }
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.len();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let src = t.data();
    let inner_stride = strides.last().copied().unwrap_or(1);
    let inner_len = out_shape.last().copied().unwrap_or(1);
    if n == 0 {
        return Tensor::from_parts(out_shape, data);
    }
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(&i, &s)| i * s).sum();
        for j in 0..inner_len {
            data.push(src[base + j * inner_stride]);
        }
        // advance all but the last axis
        let mut axis = rank.saturating_sub(1);
        loop {
            if axis == 0 {
                return Tensor::from_parts(out_shape, data);
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}
