//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for its backward rule. Nodes are appended in evaluation order, so every
//! input of node `k` lives at an index `< k` and one reverse sweep suffices.

use crate::error::{Error, Result};
use crate::kernels::{self, AttnGeom, ConvGeom};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Relu(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Sum(Var),
    Mean(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample2x(Var),
    Resize(Var),
    Concat(Var, Var),
    Slice {
        x: Var,
        start: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        dims: [usize; 4],
    },
    Transpose(Var),
    Softmax(Var),
    ToHeads {
        x: Var,
        heads: usize,
    },
    FromHeads(Var),
    CrossAttention {
        q: Var,
        k: Var,
        v: Var,
        zeta: Var,
        geom: AttnGeom,
        stats: Vec<T>,
    },
    ChannelNorm {
        x: Var,
        rstd: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; only leaves keep one between sweeps.
    grad: Option<Vec<T>>,
}

/// Single-writer record of one forward evaluation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    leaf_grad_scale: T,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Rank {
            op,
            expected: a.len(),
            found: b.to_vec(),
        });
    }
    const AXES: [&str; 6] = ["axis0", "axis1", "axis2", "axis3", "axis4", "axis5"];
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        if x != y {
            return Err(Error::Dimension {
                op,
                axis: AXES.get(i).copied().unwrap_or("axis"),
                expected: x,
                found: y,
            });
        }
    }
    Ok(())
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grad_scale: T::one(),
        }
    }

    /// Test hook: multiplies every leaf gradient by `scale`. Used to plant a
    /// known gradient fault and confirm the verification suite catches it.
    #[doc(hidden)]
    pub fn set_leaf_grad_scale(&mut self, scale: T) {
        self.leaf_grad_scale = scale;
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
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradients.
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
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf, or `None` if none reached it yet.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of a leaf as a tensor (zeros when nothing reached it).
    pub fn grad_tensor(&self, v: Var) -> Tensor<T> {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, op, &[x])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + s, Op::AddScalar(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, Op::Square(x))
    }

    /// Square root; rejects negative inputs.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|v| *v < T::zero()) {
            return Err(Error::invalid("sqrt", "negative input"));
        }
        self.unary("sqrt", x, |v| v.sqrt(), Op::Sqrt(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, |v| v.abs(), Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        self.unary("clamp", x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(kernels::sum(self.value(x).data()));
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let value = Tensor::scalar(kernels::sum(t.data()) / T::of(t.len() as f64));
        self.push("mean", value, Op::Mean(x), &[x])
    }

    /// Zero-padded cross-correlation, `x: [B,Cin,H,W]`, `w: [Cout,Cin,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        self.conv2d_grouped(x, w, b, stride, pad, 1)
    }

    /// Grouped variant; `groups == Cin` gives a depthwise convolution with
    /// `w: [C,1,kh,kw]`.
    pub fn conv2d_grouped(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new("conv2d", self.shape(x), self.shape(w), stride, pad, groups)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(Error::Dimension {
                    op: "conv2d",
                    axis: "bias",
                    expected: geom.cout,
                    found: self.value(b).len(),
                });
            }
        }
        let data = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_parts(geom.out_shape(), data);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", value, Op::Conv { x, w, b, geom }, &inputs)
    }

    /// Nearest-neighbour 2x spatial upsampling of `[B,C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("upsample2x")?;
        let data = kernels::upsample2x_forward(self.value(x).data(), b * c, h, w);
        let value = Tensor::from_parts(vec![b, c, 2 * h, 2 * w], data);
        self.push("upsample2x", value, Op::Upsample2x(x), &[x])
    }

    /// Zero-pads (bottom/right) or crops (top-left window) to `h x w`.
    pub fn resize(&mut self, x: Var, h2: usize, w2: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("resize")?;
        let data = kernels::resize_planes(self.value(x).data(), b * c, h, w, h2, w2);
        let value = Tensor::from_parts(vec![b, c, h2, w2], data);
        self.push("resize", value, Op::Resize(x), &[x])
    }

    pub fn concat_channels(&mut self, a: Var, c: Var) -> Result<Var> {
        let (b1, c1, h1, w1) = self.value(a).dims4("concat_channels")?;
        let (b2, c2, h2, w2) = self.value(c).dims4("concat_channels")?;
        for (axis, e, f) in [("batch", b1, b2), ("height", h1, h2), ("width", w1, w2)] {
            if e != f {
                return Err(Error::Dimension {
                    op: "concat_channels",
                    axis,
                    expected: e,
                    found: f,
                });
            }
        }
        let (pa, pc) = (c1 * h1 * w1, c2 * h1 * w1);
        let mut data = Vec::with_capacity(b1 * (pa + pc));
        for bi in 0..b1 {
            data.extend_from_slice(&self.value(a).data()[bi * pa..][..pa]);
            data.extend_from_slice(&self.value(c).data()[bi * pc..][..pc]);
        }
        let value = Tensor::from_parts(vec![b1, c1 + c2, h1, w1], data);
        self.push("concat_channels", value, Op::Concat(a, c), &[a, c])
    }

    /// Channels `start..end` of `[B,C,H,W]`.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("slice_channels")?;
        if start > end || end > c {
            return Err(Error::Dimension {
                op: "slice_channels",
                axis: "channels",
                expected: c,
                found: end,
            });
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * (end - start) * hw);
        for bi in 0..b {
            data.extend_from_slice(
                &self.value(x).data()[(bi * c + start) * hw..(bi * c + end) * hw],
            );
        }
        let value = Tensor::from_parts(vec![b, end - start, h, w], data);
        self.push("slice_channels", value, Op::Slice { x, start }, &[x])
    }

    /// `[..., m, k] x [..., k, n] -> [..., m, n]` with equal leading extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() != sa.len() {
            return Err(Error::Rank {
                op: "matmul",
                expected: sa.len().max(2),
                found: sb.to_vec(),
            });
        }
        let r = sa.len();
        same_shape("matmul", &sa[..r - 2], &sb[..r - 2])?;
        let (m, k, k2, n) = (sa[r - 2], sa[r - 1], sb[r - 2], sb[r - 1]);
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                axis: "inner",
                expected: k,
                found: k2,
            });
        }
        let batch = sa[..r - 2].iter().product();
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let data =
            kernels::matmul_forward(self.value(a).data(), self.value(b).data(), batch, m, k, n);
        let value = Tensor::from_parts(shape, data);
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                dims: [batch, m, k, n],
            },
            &[a, b],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Rank {
                op: "transpose_last2",
                expected: 2,
                found: s,
            });
        }
        let r = s.len();
        let (m, n) = (s[r - 2], s[r - 1]);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        for (blk_in, blk_out) in src.chunks_exact(m * n).zip(data.chunks_exact_mut(m * n)) {
            for i in 0..m {
                for j in 0..n {
                    blk_out[j * m + i] = blk_in[i * n + j];
                }
            }
        }
        let mut shape = s;
        shape.swap(r - 2, r - 1);
        self.push(
            "transpose_last2",
            Tensor::from_parts(shape, data),
            Op::Transpose(x),
            &[x],
        )
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s
            .last()
            .ok_or_else(|| Error::invalid("softmax_lastdim", "scalar input"))?;
        if n == 0 {
            return Err(Error::invalid("softmax_lastdim", "empty last axis"));
        }
        let data = kernels::softmax_rows(self.value(x).data(), n);
        self.push(
            "softmax_lastdim",
            Tensor::from_parts(s, data),
            Op::Softmax(x),
            &[x],
        )
    }

    /// `[B,C,H,W] -> [B,heads,H*W,C/heads]`: tokens are spatial positions,
    /// heads split the channels.
    pub fn to_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("to_heads")?;
        if heads == 0 || c % heads != 0 {
            return Err(Error::invalid(
                "to_heads",
                format!("{c} channels not divisible by {heads} heads"),
            ));
        }
        let (n, d) = (h * w, c / heads);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        for bi in 0..b {
            for hd in 0..heads {
                for cc in 0..d {
                    let ch = hd * d + cc;
                    for t in 0..n {
                        data[((bi * heads + hd) * n + t) * d + cc] = src[(bi * c + ch) * n + t];
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![b, heads, n, d], data);
        self.push("to_heads", value, Op::ToHeads { x, heads }, &[x])
    }

    /// Inverse of [`Tape::to_heads`] for spatial extent `h x w`.
    pub fn from_heads(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [b, heads, n, d] = s[..] else {
            return Err(Error::Rank {
                op: "from_heads",
                expected: 4,
                found: s,
            });
        };
        if n != h * w {
            return Err(Error::Dimension {
                op: "from_heads",
                axis: "tokens",
                expected: h * w,
                found: n,
            });
        }
        let c = heads * d;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        for bi in 0..b {
            for hd in 0..heads {
                for cc in 0..d {
                    for t in 0..n {
                        data[(bi * c + hd * d + cc) * n + t] =
                            src[((bi * heads + hd) * n + t) * d + cc];
                    }
                }
            }
        }
        let value = Tensor::from_parts(vec![b, c, h, w], data);
        self.push("from_heads", value, Op::FromHeads(x), &[x])
    }

    /// Fused head-split attention `softmax(Q K^T * zeta_h) V` over spatial
    /// tokens of `[B,C,H,W]` activations; `zeta` has one entry per head.
    pub fn cross_attention(&mut self, q: Var, k: Var, v: Var, zeta: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(q).dims4("cross_attention")?;
        same_shape("cross_attention", self.shape(q), self.shape(k))?;
        same_shape("cross_attention", self.shape(q), self.shape(v))?;
        let heads = match self.shape(zeta) {
            [n] => *n,
            other => {
                return Err(Error::Rank {
                    op: "cross_attention",
                    expected: 1,
                    found: other.to_vec(),
                })
            }
        };
        if heads == 0 || c % heads != 0 {
            return Err(Error::Dimension {
                op: "cross_attention",
                axis: "heads",
                expected: c,
                found: heads,
            });
        }
        if c / heads > kernels::MAX_HEAD_DIM {
            return Err(Error::invalid(
                "cross_attention",
                format!(
                    "head dimension {} exceeds {}",
                    c / heads,
                    kernels::MAX_HEAD_DIM
                ),
            ));
        }
        let geom = AttnGeom {
            batch: b,
            channels: c,
            tokens: h * w,
            heads,
        };
        let (out, stats) = kernels::cross_attention_forward(
            &geom,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            self.value(zeta).data(),
        );
        let value = Tensor::from_parts(vec![b, c, h, w], out);
        self.push(
            "cross_attention",
            value,
            Op::CrossAttention {
                q,
                k,
                v,
                zeta,
                geom,
                stats,
            },
            &[q, k, v, zeta],
        )
    }

    /// Normalizes each spatial position across channels (no affine part).
    pub fn channel_norm(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4("channel_norm")?;
        let (out, rstd) =
            kernels::channel_norm_forward(self.value(x).data(), b, c, h * w, T::of(1e-5));
        self.push(
            "channel_norm",
            Tensor::from_parts(vec![b, c, h, w], out),
            Op::ChannelNorm { x, rstd },
            &[x],
        )
    }

    /// Propagates `d loss / d leaf` into every leaf that requires gradients.
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss of shape {:?} is not a scalar", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let s = self.leaf_grad_scale;
                let g = if s == T::one() {
                    g
                } else {
                    g.into_iter().map(|v| v * s).collect()
                };
                accumulate(&mut self.nodes[idx].grad, g);
                continue;
            }
            for (v, gv) in self.node_backward(idx, g) {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], gv);
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, idx: usize, g: Vec<T>) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let elementwise = |x: Var, f: &dyn Fn(T, T, T) -> T| -> Vec<T> {
            // f(input, output, upstream)
            val(x)
                .iter()
                .zip(node.value.data())
                .zip(&g)
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect()
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g)],
            Op::Sub(a, b) => {
                let neg = g.iter().map(|v| -*v).collect();
                vec![(*a, g), (*b, neg)]
            }
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b)).map(|(x, y)| *x * *y).collect();
                let gb = g.iter().zip(val(*a)).map(|(x, y)| *x * *y).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, s) => vec![(*x, g.iter().map(|v| *v * *s).collect())],
            Op::AddScalar(x) => vec![(*x, g)],
            Op::Square(x) => vec![(*x, elementwise(*x, &|xi, _, gi| gi * (xi + xi)))],
            Op::Sqrt(x) => vec![(
                *x,
                elementwise(*x, &|_, yi, gi| {
                    if yi > T::zero() {
                        gi / (yi + yi)
                    } else {
                        T::zero()
                    }
                }),
            )],
            Op::Abs(x) => vec![(
                *x,
                elementwise(*x, &|xi, _, gi| {
                    if xi > T::zero() {
                        gi
                    } else if xi < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                }),
            )],
            Op::Relu(x) => vec![(
                *x,
                elementwise(*x, &|xi, _, gi| if xi > T::zero() { gi } else { T::zero() }),
            )],
            Op::Clamp { x, lo, hi } => vec![(
                *x,
                elementwise(*x, &|xi, _, gi| {
                    if xi >= *lo && xi <= *hi {
                        gi
                    } else {
                        T::zero()
                    }
                }),
            )],
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
            Op::Mean(x) => {
                let n = val(*x).len();
                vec![(*x, vec![g[0] / T::of(n as f64); n])]
            }
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    val(*x),
                    val(*w),
                    &g,
                    rg(*x),
                    rg(*w),
                    b.is_some_and(rg),
                );
                let mut out = Vec::new();
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
                if let (Some(b), Some(db)) = (b, db) {
                    out.push((*b, db));
                }
                out
            }
            Op::Upsample2x(x) => {
                let (b, c, h, w) = self.nodes[x.0]
                    .value
                    .dims4("upsample2x")
                    .expect("rank checked at record time");
                vec![(*x, kernels::upsample2x_backward(&g, b * c, h, w))]
            }
            Op::Resize(x) => {
                let (b, c, h, w) = self.nodes[x.0]
                    .value
                    .dims4("resize")
                    .expect("rank checked at record time");
                let (_, _, h2, w2) = node
                    .value
                    .dims4("resize")
                    .expect("rank checked at record time");
                vec![(*x, kernels::resize_planes(&g, b * c, h2, w2, h, w))]
            }
            Op::Concat(a, c) => {
                let (bn, c1, h, w) = self.nodes[a.0]
                    .value
                    .dims4("concat")
                    .expect("rank checked at record time");
                let c2 = self.nodes[c.0].value.shape()[1];
                let (pa, pc) = (c1 * h * w, c2 * h * w);
                let mut ga = Vec::with_capacity(bn * pa);
                let mut gc = Vec::with_capacity(bn * pc);
                for blk in g.chunks_exact(pa + pc) {
                    ga.extend_from_slice(&blk[..pa]);
                    gc.extend_from_slice(&blk[pa..]);
                }
                vec![(*a, ga), (*c, gc)]
            }
            Op::Slice { x, start } => {
                let (b, c, h, w) = self.nodes[x.0]
                    .value
                    .dims4("slice")
                    .expect("rank checked at record time");
                let cs = node.value.shape()[1];
                let hw = h * w;
                let mut gx = vec![T::zero(); b * c * hw];
                for bi in 0..b {
                    gx[(bi * c + start) * hw..][..cs * hw]
                        .copy_from_slice(&g[bi * cs * hw..][..cs * hw]);
                }
                vec![(*x, gx)]
            }
            Op::MatMul {
                a,
                b,
                dims: [batch, m, k, n],
            } => {
                let (da, db) = kernels::matmul_backward(val(*a), val(*b), &g, *batch, *m, *k, *n);
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let r = s.len();
                let (m, n) = (s[r - 2], s[r - 1]);
                let mut gx = vec![T::zero(); g.len()];
                for (bi, bo) in g.chunks_exact(m * n).zip(gx.chunks_exact_mut(m * n)) {
                    for i in 0..m {
                        for j in 0..n {
                            bo[j * m + i] = bi[i * n + j];
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().expect("checked at record time");
                vec![(*x, kernels::softmax_rows_backward(node.value.data(), &g, n))]
            }
            Op::ToHeads { x, heads } => {
                let (b, c, h, w) = self.nodes[x.0]
                    .value
                    .dims4("to_heads")
                    .expect("rank checked at record time");
                let (n, d) = (h * w, c / heads);
                let mut gx = vec![T::zero(); g.len()];
                for bi in 0..b {
                    for hd in 0..*heads {
                        for cc in 0..d {
                            for t in 0..n {
                                gx[(bi * c + hd * d + cc) * n + t] =
                                    g[((bi * heads + hd) * n + t) * d + cc];
                            }
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::FromHeads(x) => {
                let s = self.nodes[x.0].value.shape();
                let (b, heads, n, d) = (s[0], s[1], s[2], s[3]);
                let c = heads * d;
                let mut gx = vec![T::zero(); g.len()];
                for bi in 0..b {
                    for hd in 0..heads {
                        for cc in 0..d {
                            for t in 0..n {
                                gx[((bi * heads + hd) * n + t) * d + cc] =
                                    g[(bi * c + hd * d + cc) * n + t];
                            }
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::CrossAttention {
                q,
                k,
                v,
                zeta,
                geom,
                stats,
            } => {
                let (dq, dk, dv, dz) = kernels::cross_attention_backward(
                    geom,
                    val(*q),
                    val(*k),
                    val(*v),
                    val(*zeta),
                    node.value.data(),
                    stats,
                    &g,
                );
                vec![(*q, dq), (*k, dk), (*v, dv), (*zeta, dz)]
            }
            Op::ChannelNorm { x, rstd } => {
                let (b, c, h, w) = node
                    .value
                    .dims4("channel_norm")
                    .expect("rank checked at record time");
                vec![(
                    *x,
                    kernels::channel_norm_backward(node.value.data(), rstd, &g, b, c, h * w),
                )]
            }
        }
    }
}
