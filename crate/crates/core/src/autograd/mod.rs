//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is built fresh for every forward pass. Each primitive pushes a
//! node holding its output value and whatever it needs for the backward pass;
//! [`Tape::backward`] then walks the record in reverse, which visits every node
//! only after all of its consumers.
//!
//! ```
//! use evidet::autograd::Tape;
//! use evidet::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::from_vec(vec![0.0]));
//! let y = tape.softplus(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 0.5);
//! ```

mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{finite_diff_check, GradCheck};

use rand::Rng;

use crate::error::{Error, Result};
use crate::special;
use crate::tensor::Tensor;
use kernels::ConvGeometry;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Affine {
        x: usize,
        scale: f64,
    },
    Sum(usize),
    SumAxis {
        x: usize,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    Mean(usize),
    Abs(usize),
    Sqrt(usize),
    Log(usize),
    Exp(usize),
    Clamp {
        x: usize,
        lo: f64,
        hi: f64,
    },
    Powf {
        x: usize,
        exponent: f64,
    },
    Relu(usize),
    LeakyRelu {
        x: usize,
        slope: f64,
    },
    Softplus(usize),
    Digamma(usize),
    Lgamma(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeometry,
        batch: usize,
        out_channels: usize,
        cols: Vec<f64>,
    },
    AddBias {
        x: usize,
        bias: usize,
        channels: usize,
        inner: usize,
    },
    MaxPool3 {
        x: usize,
        argmax: Vec<usize>,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Gather {
        x: usize,
        idx: Vec<usize>,
    },
    Reshape(usize),
    Concat(Vec<usize>),
    Narrow {
        x: usize,
        outer: usize,
        axis_len: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf; `None` if the leaf does not require grad or the
    /// root does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            shapes: vec![a.shape().to_vec(), b.shape().to_vec()],
        });
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut [f64] {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.all_finite() && inputs.iter().all(|&i| self.nodes[i].value.all_finite()) {
            return Err(Error::NumericDomain { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.val(a.0), self.val(b.0));
        same_shape(name, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(name, out, op, &[a.0, b.0])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.val(x.0).map(f);
        self.push(name, out, op, &[x.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary("neg", x, |v| -v, Op::Neg(x.0))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.unary("affine", x, |v| scale * v + shift, Op::Affine { x: x.0, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn add_scalar(&mut self, x: Var, shift: f64) -> Result<Var> {
        self.affine(x, 1.0, shift)
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.val(x.0).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.val(x.0).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "sum_axis",
                shapes: vec![shape, vec![axis]],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.val(x.0).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..axis_len {
                let src = &data[(o * axis_len + a) * inner..(o * axis_len + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let op = Op::SumAxis {
            x: x.0,
            outer,
            axis_len,
            inner,
        };
        self.push("sum_axis", Tensor::from_parts(out_shape, out), op, &[x.0])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.val(x.0);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x.0), &[x.0])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs(x.0))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary("sqrt", x, f64::sqrt, Op::Sqrt(x.0))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log(x.0))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x.0))
    }

    /// `max(x, floor)`; the gradient is zero wherever the floor is active.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.clamp(x, floor, f64::INFINITY)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", x, |v| v.max(lo).min(hi), Op::Clamp { x: x.0, lo, hi })
    }

    pub fn powf(&mut self, x: Var, exponent: f64) -> Result<Var> {
        self.unary("powf", x, |v| v.powf(exponent), Op::Powf { x: x.0, exponent })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(
            "leaky_relu",
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu { x: x.0, slope },
        )
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary("softplus", x, special::softplus, Op::Softplus(x.0))
    }

    pub fn digamma(&mut self, x: Var) -> Result<Var> {
        self.unary("digamma", x, special::digamma, Op::Digamma(x.0))
    }

    pub fn lgamma(&mut self, x: Var) -> Result<Var> {
        self.unary("lgamma", x, special::lgamma, Op::Lgamma(x.0))
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.val(a.0).shape(), self.val(b.0).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                shapes: vec![sa.to_vec(), sb.to_vec()],
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.val(a.0).data(), false, self.val(b.0).data(), false, &mut out, false);
        let op = Op::MatMul { a: a.0, b: b.0, m, k, n };
        self.push("matmul", Tensor::from_parts(vec![m, n], out), op, &[a.0, b.0])
    }

    /// 2-D convolution of `x: [B, C, H, W]` with `w: [Co, C, k, k]`, zero
    /// "same" padding of `k / 2` and the given stride. No bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.val(x.0).shape().to_vec(), self.val(w.0).shape().to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || sw[2] % 2 == 0 || stride == 0 {
            return Err(Error::Shape {
                op: "conv2d",
                shapes: vec![sx, sw],
            });
        }
        let batch = sx[0];
        let out_channels = sw[0];
        let geom = ConvGeometry {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel: sw[2],
            stride,
        };
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let in_plane = geom.channels * geom.height * geom.width;
        let keep_cols = !geom.is_pointwise() && self.nodes[w.0].requires_grad;
        let mut saved = if keep_cols { vec![0.0; batch * rows * cols_n] } else { Vec::new() };
        let mut scratch = if geom.is_pointwise() || keep_cols { Vec::new() } else { vec![0.0; rows * cols_n] };
        let mut out = vec![0.0; batch * out_channels * cols_n];
        let xd = self.val(x.0).data();
        let wd = self.val(w.0).data();
        for b in 0..batch {
            let image = &xd[b * in_plane..(b + 1) * in_plane];
            let cols: &[f64] = if geom.is_pointwise() {
                image
            } else if keep_cols {
                let dst = &mut saved[b * rows * cols_n..(b + 1) * rows * cols_n];
                kernels::im2col(&geom, image, dst);
                dst
            } else {
                kernels::im2col(&geom, image, &mut scratch);
                &scratch
            };
            let dst = &mut out[b * out_channels * cols_n..(b + 1) * out_channels * cols_n];
            kernels::gemm(out_channels, rows, cols_n, wd, false, cols, false, dst, false);
        }
        let shape = vec![batch, out_channels, geom.out_height(), geom.out_width()];
        let op = Op::Conv2d {
            x: x.0,
            w: w.0,
            geom,
            batch,
            out_channels,
            cols: saved,
        };
        self.push("conv2d", Tensor::from_parts(shape, out), op, &[x.0, w.0])
    }

    /// Adds `bias: [C]` along axis 1 of `x: [N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.val(x.0).shape(), self.val(bias.0).shape());
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(Error::Shape {
                op: "add_bias",
                shapes: vec![sx.to_vec(), sb.to_vec()],
            });
        }
        let channels = sx[1];
        let inner: usize = sx[2..].iter().product();
        let bd = self.val(bias.0).data();
        let mut data = self.val(x.0).data().to_vec();
        for block in data.chunks_mut(channels * inner) {
            for (plane, &b) in block.chunks_mut(inner).zip(bd) {
                plane.iter_mut().for_each(|v| *v += b);
            }
        }
        let out = Tensor::from_parts(sx.to_vec(), data);
        let op = Op::AddBias {
            x: x.0,
            bias: bias.0,
            channels,
            inner,
        };
        self.push("add_bias", out, op, &[x.0, bias.0])
    }

    /// 3×3 max filter with stride 1 over the last two axes; out-of-bounds
    /// neighbours are ignored. Ties resolve to the lowest flat index.
    pub fn max_pool3(&mut self, x: Var) -> Result<Var> {
        let shape = self.val(x.0).shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape {
                op: "max_pool3",
                shapes: vec![shape],
            });
        }
        let (out, argmax) = max_pool3_forward(self.val(x.0));
        self.push("max_pool3", out, Op::MaxPool3 { x: x.0, argmax }, &[x.0])
    }

    /// Inverted dropout: in train mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1 / (1 - p)`; in eval mode
    /// this is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::validation(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.val(x.0).len();
        // a 32-bit draw per element; p is resolved to 2^-32
        let cut = (p * 4294967296.0) as u64;
        let mask: Vec<f64> = (0..n)
            .map(|_| if u64::from(rng.next_u32()) < cut { 0.0 } else { keep })
            .collect();
        let v = self.val(x.0);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        self.push("dropout", out, Op::Dropout { x: x.0, mask }, &[x.0])
    }

    /// Picks elements by flat index into a 1-D tensor.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.val(x.0);
        if idx.is_empty() {
            return Err(Error::validation("gather with an empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.len()) {
            return Err(Error::Shape {
                op: "gather",
                shapes: vec![v.shape().to_vec(), vec![bad]],
            });
        }
        let data = idx.iter().map(|&i| v.data()[i]).collect();
        let out = Tensor::from_parts(vec![idx.len()], data);
        let op = Op::Gather {
            x: x.0,
            idx: idx.to_vec(),
        };
        self.push("gather", out, op, &[x.0])
    }

    /// Stacks tensors along axis 0; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::validation("concat of zero tensors"))?;
        let tail = self.val(first.0).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.val(p.0);
            if v.shape()[1..] != tail[..] {
                return Err(Error::Shape {
                    op: "concat",
                    shapes: parts.iter().map(|q| self.val(q.0).shape().to_vec()).collect(),
                });
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat", Tensor::from_parts(shape, data), Op::Concat(ids.clone()), &ids)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(x.0).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x.0), &[x.0])
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.val(x.0).shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Shape {
                op: "narrow",
                shapes: vec![shape, vec![axis, start, len]],
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.val(x.0).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let op = Op::Narrow {
            x: x.0,
            outer,
            axis_len,
            start,
            len,
            inner,
        };
        self.push("narrow", Tensor::from_parts(out_shape, data), op, &[x.0])
    }

    /// Reverse pass from a one-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.val(root.0);
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads: out });
        }
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    out[i] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                }
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        let elementwise = |grads: &mut [Option<Vec<f64>>], x: usize, f: &dyn Fn(usize) -> f64| {
            if self.wants(x) {
                let gx = accumulate(grads, x, g.len());
                for (j, d) in gx.iter_mut().enumerate() {
                    *d += g[j] * f(j);
                }
            }
        };
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                elementwise(grads, a, &|_| 1.0);
                elementwise(grads, b, &|_| 1.0);
            }
            Op::Sub(a, b) => {
                elementwise(grads, a, &|_| 1.0);
                elementwise(grads, b, &|_| -1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                elementwise(grads, a, &|j| vb[j]);
                elementwise(grads, b, &|j| va[j]);
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.val(a).data(), self.val(b).data());
                elementwise(grads, a, &|j| 1.0 / vb[j]);
                elementwise(grads, b, &|j| -va[j] / (vb[j] * vb[j]));
            }
            Op::Neg(x) => elementwise(grads, x, &|_| -1.0),
            Op::Affine { x, scale } => elementwise(grads, x, &|_| scale),
            Op::Sum(x) => {
                if self.wants(x) {
                    let gx = accumulate(grads, x, self.val(x).len());
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if self.wants(x) {
                    let n = self.val(x).len();
                    let gx = accumulate(grads, x, n);
                    let share = g[0] / n as f64;
                    gx.iter_mut().for_each(|d| *d += share);
                }
            }
            Op::SumAxis {
                x,
                outer,
                axis_len,
                inner,
            } => {
                if self.wants(x) {
                    let gx = accumulate(grads, x, outer * axis_len * inner);
                    for o in 0..outer {
                        for a in 0..axis_len {
                            let dst = &mut gx[(o * axis_len + a) * inner..(o * axis_len + a + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::Abs(x) => {
                let v = self.val(x).data();
                elementwise(grads, x, &|j| {
                    if v[j] > 0.0 {
                        1.0
                    } else if v[j] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
            }
            Op::Sqrt(x) => elementwise(grads, x, &|j| 0.5 / y[j]),
            Op::Log(x) => {
                let v = self.val(x).data();
                elementwise(grads, x, &|j| 1.0 / v[j]);
            }
            Op::Exp(x) => elementwise(grads, x, &|j| y[j]),
            Op::Clamp { x, lo, hi } => {
                let v = self.val(x).data();
                elementwise(grads, x, &|j| if v[j] > lo && v[j] < hi { 1.0 } else { 0.0 });
            }
            Op::Powf { x, exponent } => {
                let v = self.val(x).data();
                elementwise(grads, x, &|j| exponent * v[j].powf(exponent - 1.0));
            }
            Op::Relu(x) => {
                let v = self.val(x).data();
                elementwise(grads, x, &|j| if v[j] > 0.0 { 1.0 } else { 0.0 });
            }
            Op::LeakyRelu { x, slope } => {
                let v = self.val(x).data();
                elementwise(grads, x, &|j| if v[j] > 0.0 { 1.0 } else { slope });
            }
            Op::Softplus(x) => {
                let v = self.val(x).data();
                elementwise(grads, x, &|j| special::logistic(v[j]));
            }
            Op::Digamma(x) => {
                let v = self.val(x).data();
                elementwise(grads, x, &|j| special::trigamma(v[j]));
            }
            Op::Lgamma(x) => {
                let v = self.val(x).data();
                elementwise(grads, x, &|j| special::digamma(v[j]));
            }
            Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let ga = accumulate(grads, a, m * k);
                    kernels::gemm(m, n, k, g, false, self.val(b).data(), true, ga, true);
                }
                if self.wants(b) {
                    let gb = accumulate(grads, b, k * n);
                    kernels::gemm(k, m, n, self.val(a).data(), true, g, false, gb, true);
                }
            }
            Op::Conv2d {
                x,
                w,
                geom,
                batch,
                out_channels,
                ref cols,
            } => self.conv2d_backward(x, w, &geom, batch, out_channels, cols, g, grads),
            Op::AddBias {
                x,
                bias,
                channels,
                inner,
            } => {
                elementwise(grads, x, &|_| 1.0);
                if self.wants(bias) {
                    let gb = accumulate(grads, bias, channels);
                    for block in g.chunks(channels * inner) {
                        for (acc, plane) in gb.iter_mut().zip(block.chunks(inner)) {
                            *acc += plane.iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::MaxPool3 { x, ref argmax } => {
                if self.wants(x) {
                    let gx = accumulate(grads, x, self.val(x).len());
                    for (j, &src) in argmax.iter().enumerate() {
                        gx[src] += g[j];
                    }
                }
            }
            Op::Dropout { x, ref mask } => elementwise(grads, x, &|j| mask[j]),
            Op::Gather { x, ref idx } => {
                if self.wants(x) {
                    let gx = accumulate(grads, x, self.val(x).len());
                    for (j, &src) in idx.iter().enumerate() {
                        gx[src] += g[j];
                    }
                }
            }
            Op::Reshape(x) => elementwise(grads, x, &|_| 1.0),
            Op::Concat(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.val(p).len();
                    if self.wants(p) {
                        let gp = accumulate(grads, p, n);
                        for (d, s) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *d += s;
                        }
                    }
                    offset += n;
                }
            }
            Op::Narrow {
                x,
                outer,
                axis_len,
                start,
                len,
                inner,
            } => {
                if self.wants(x) {
                    let gx = accumulate(grads, x, outer * axis_len * inner);
                    for o in 0..outer {
                        let base = (o * axis_len + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in gx[base..base + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: usize,
        w: usize,
        geom: &ConvGeometry,
        batch: usize,
        out_channels: usize,
        cols: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let in_plane = geom.channels * geom.height * geom.width;
        let out_plane = out_channels * cols_n;
        let xd = self.val(x).data();
        let wd = self.val(w).data();
        if self.wants(w) {
            let gw = accumulate(grads, w, out_channels * rows);
            let mut scratch = Vec::new();
            for b in 0..batch {
                let gy = &g[b * out_plane..(b + 1) * out_plane];
                let cols_b: &[f64] = if geom.is_pointwise() {
                    &xd[b * in_plane..(b + 1) * in_plane]
                } else if !cols.is_empty() {
                    &cols[b * rows * cols_n..(b + 1) * rows * cols_n]
                } else {
                    scratch.resize(rows * cols_n, 0.0);
                    kernels::im2col(geom, &xd[b * in_plane..(b + 1) * in_plane], &mut scratch);
                    &scratch
                };
                kernels::gemm(out_channels, cols_n, rows, gy, false, cols_b, true, gw, true);
            }
        }
        if self.wants(x) {
            let gx = accumulate(grads, x, batch * in_plane);
            let mut dcols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; rows * cols_n] };
            for b in 0..batch {
                let gy = &g[b * out_plane..(b + 1) * out_plane];
                let gx_b = &mut gx[b * in_plane..(b + 1) * in_plane];
                if geom.is_pointwise() {
                    kernels::gemm(rows, out_channels, cols_n, wd, true, gy, false, gx_b, true);
                } else {
                    kernels::gemm(rows, out_channels, cols_n, wd, true, gy, false, &mut dcols, false);
                    kernels::col2im(geom, &dcols, gx_b);
                }
            }
        }
    }
}

/// Forward 3×3 max filter over the trailing two axes; returns the pooled
/// tensor and, per output element, the flat index of the winning input.
pub fn max_pool3_forward(x: &Tensor) -> (Tensor, Vec<usize>) {
    let shape = x.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = x.len() / (h * w);
    let data = x.data();
    let mut out = vec![0.0; x.len()];
    let mut argmax = vec![0; x.len()];
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let mut best = base + i * w + j;
                for ni in i.saturating_sub(1)..(i + 2).min(h) {
                    for nj in j.saturating_sub(1)..(j + 2).min(w) {
                        let idx = base + ni * w + nj;
                        if data[idx] > data[best] || (data[idx] == data[best] && idx < best) {
                            best = idx;
                        }
                    }
                }
                out[base + i * w + j] = data[best];
                argmax[base + i * w + j] = best;
            }
        }
    }
    (Tensor::from_parts(shape.to_vec(), out), argmax)
}
