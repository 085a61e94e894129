//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! append nodes; [`Tape::backward`] walks them in reverse. A tape is built per
//! training step (or per batch element) and dropped afterwards.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::params::{Bound, Params};
use crate::tensor::{strides, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { m: usize, k: usize, n: usize },
    BatchMatMul { batch: usize, m: usize, k: usize, n: usize },
    Linear { rows: usize, fin: usize, fout: usize, bias: bool },
    Conv2d { batch: usize, geom: ConvGeometry, out_ch: usize, bias: bool },
    Add { ia: Option<Vec<usize>>, ib: Option<Vec<usize>> },
    Sub { ia: Option<Vec<usize>>, ib: Option<Vec<usize>> },
    Mul { ia: Option<Vec<usize>>, ib: Option<Vec<usize>> },
    Scale(T),
    AddScalar,
    Neg,
    Log,
    Exp,
    Abs,
    Square,
    Sqrt,
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Softmax { cols: usize },
    LogSoftmax { cols: usize },
    LayerNorm { cols: usize, mean: Vec<T>, rstd: Vec<T> },
    Concat { outer: usize, inner: Vec<usize> },
    EmbedLookup { indices: Vec<usize>, dim: usize },
    Pick { indices: Vec<usize>, cols: usize },
    Select { mask: Vec<bool> },
    Upsample2x { planes: usize, h: usize, w: usize },
    Downsample2x { planes: usize, h: usize, w: usize },
    Reshape,
    Permute { src: Vec<usize> },
    Sum,
    Mean,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<Var>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or zeros shaped like its value when it did not
    /// influence the loss.
    pub fn wrt(&self, tape: &Tape<T>, var: Var) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape().to_vec()))
    }

    pub fn for_bound(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Tensor<T>> {
        bound.vars().iter().map(|&v| self.wrt(tape, v)).collect()
    }
}

pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, shape: &[usize], reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

fn last_dim(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape.last() {
        Some(&c) if c > 0 => Ok((shape.iter().product::<usize>() / c, c)),
        _ => Err(invalid(op, shape, "needs a non-empty last axis")),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Copies every tensor of `params` onto the tape as a leaf.
    pub fn bind(&mut self, params: &Params<T>, trainable: bool) -> Bound {
        let vars = params
            .tensors()
            .map(|t| self.leaf(t.clone(), trainable))
            .collect();
        Bound::new(vars)
    }

    /// Same value, cut from the graph (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: Vec<Var>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NumericFault { op: name });
        }
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            inputs: if requires_grad { inputs } else { Vec::new() },
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----- linear algebra -------------------------------------------------

    /// `[m,k] × [k,n] → [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new([m, n], out)?;
        self.push("matmul", value, Op::MatMul { m, k, n }, vec![a, b])
    }

    /// `[B,m,k] × [B,k,n] → [B,m,n]`
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            kernels::matmul_acc(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new([batch, m, n], out)?;
        self.push("batch_matmul", value, Op::BatchMatMul { batch, m, k, n }, vec![a, b])
    }

    /// `x[..., in] · w[in, out] + b[out]` over all leading axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (rows, fin) = last_dim("linear", &sx)?;
        if sw.len() != 2 || sw[0] != fin {
            return Err(shape_err("linear", &sx, &sw));
        }
        let fout = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(shape_err("linear", &sw, self.shape(b)));
            }
        }
        let mut out = vec![T::zero(); rows * fout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..rows {
                out[r * fout..(r + 1) * fout].copy_from_slice(bd);
            }
        }
        kernels::matmul_acc(self.value(x).data(), self.value(w).data(), &mut out, rows, fin, fout);
        let mut shape = sx;
        *shape.last_mut().unwrap() = fout;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", value, Op::Linear { rows, fin, fout, bias: b.is_some() }, inputs)
    }

    /// `x[N,C,H,W] ⋆ w[O,C,kh,kw] + b[O]` with square stride and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(shape_err("conv2d", &sx, &sw));
        }
        if stride == 0 {
            return Err(invalid("conv2d", &sx, "stride must be positive"));
        }
        let geom = ConvGeometry {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            padding,
        };
        if sx[2] + 2 * padding < sw[2] || sx[3] + 2 * padding < sw[3] {
            return Err(invalid("conv2d", &sx, format!("kernel {}x{} does not fit", sw[2], sw[3])));
        }
        let out_ch = sw[0];
        if let Some(b) = b {
            if self.shape(b) != [out_ch] {
                return Err(shape_err("conv2d", &sw, self.shape(b)));
            }
        }
        let batch = sx[0];
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let plane = oh * ow;
        let ckk = geom.col_rows();
        let in_size = geom.channels * geom.height * geom.width;
        let mut out = vec![T::zero(); batch * out_ch * plane];
        let mut cols = vec![T::zero(); ckk * plane];
        let (xd, wd) = (self.value(x).data(), self.value(w).data());
        let bias = b.map(|b| self.value(b).data());
        for n in 0..batch {
            kernels::im2col(&xd[n * in_size..(n + 1) * in_size], &geom, &mut cols);
            let o = &mut out[n * out_ch * plane..(n + 1) * out_ch * plane];
            if let Some(bd) = bias {
                for (c, &bv) in bd.iter().enumerate() {
                    o[c * plane..(c + 1) * plane].fill(bv);
                }
            }
            kernels::matmul_acc(wd, &cols, o, out_ch, ckk, plane);
        }
        let value = Tensor::new([batch, out_ch, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "conv2d",
            value,
            Op::Conv2d { batch, geom, out_ch, bias: b.is_some() },
            inputs,
        )
    }

    // ----- elementwise ----------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, Option<Vec<usize>>, Option<Vec<usize>>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if sa == sb {
            let data = ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
            return Ok((Tensor::new(sa, data)?, None, None));
        }
        let out = kernels::broadcast_shape(&sa, &sb).ok_or_else(|| shape_err(name, &sa, &sb))?;
        let ia = (sa != out).then(|| kernels::broadcast_index(&sa, &out));
        let ib = (sb != out).then(|| kernels::broadcast_index(&sb, &out));
        let n: usize = out.iter().product();
        let data = (0..n)
            .map(|i| {
                let x = ad[ia.as_ref().map_or(i, |m| m[i])];
                let y = bd[ib.as_ref().map_or(i, |m| m[i])];
                f(x, y)
            })
            .collect();
        Ok((Tensor::new(out, data)?, ia, ib))
    }

    /// Broadcasting `a + b`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, ia, ib) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add { ia, ib }, vec![a, b])
    }

    /// Broadcasting `a - b`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, ia, ib) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub { ia, ib }, vec![a, b])
    }

    /// Broadcasting `a ⊙ b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, ia, ib) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul { ia, ib }, vec![a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, value, op, vec![a])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("scale", a, Op::Scale(s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        self.unary("add_scalar", a, Op::AddScalar, |x| x + s)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, Op::Neg, |x| -x)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, Op::Log, |x| x.ln())
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, Op::Exp, |x| x.exp())
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, Op::Abs, |x| x.abs())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, Op::Square, |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, Op::Sqrt, |x| x.sqrt())
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu, |x| x.max(T::zero()))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, Op::Gelu, gelu_fwd)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid, sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, Op::Tanh, |x| x.tanh())
    }

    /// Elementwise `mask ? a : b`; the mask is a constant.
    pub fn select(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb || mask.len() != self.value(a).numel() {
            return Err(shape_err("select", sa, sb));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let data = mask
            .iter()
            .zip(ad.iter().zip(bd))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        let value = Tensor::new(sa.to_vec(), data)?;
        self.push("select", value, Op::Select { mask: mask.to_vec() }, vec![a, b])
    }

    // ----- normalisation --------------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (_, cols) = last_dim("softmax", &shape)?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(cols) {
            softmax_row(row);
        }
        let value = Tensor::new(shape, data)?;
        self.push("softmax", value, Op::Softmax { cols }, vec![a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (_, cols) = last_dim("log_softmax", &shape)?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let value = Tensor::new(shape, data)?;
        self.push("log_softmax", value, Op::LogSoftmax { cols }, vec![a])
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = last_dim("layer_norm", &shape)?;
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(shape_err("layer_norm", &shape, self.shape(gamma)));
        }
        let n = T::from_usize(cols).unwrap();
        let (xd, gd, bd) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); rows * cols];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + eps).sqrt();
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * rstd * gd[c] + bd[c];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm { cols, mean: means, rstd: rstds },
            vec![x, gamma, beta],
        )
    }

    // ----- structural -----------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return Err(TensorError::InvalidArgument("concat of zero tensors".into())),
        };
        if axis >= first.len() {
            return Err(invalid("concat", &first, format!("axis {axis} out of range")));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let trailing: usize = first[axis + 1..].iter().product();
        let inner: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * trailing).collect();
        let total: usize = out_shape.iter().product();
        let mut data = Vec::with_capacity(total);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&inner) {
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(out_shape, data)?;
        self.push("concat", value, Op::Concat { outer, inner }, parts.to_vec())
    }

    /// Gathers rows of `table[V, D]`; output is `[indices.len(), D]`.
    pub fn embed_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(invalid("embed_lookup", &st, "table must be 2-D"));
        }
        let (rows, dim) = (st[0], st[1]);
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { op: "embed_lookup", index: i, extent: rows });
            }
            data.extend_from_slice(&td[i * dim..(i + 1) * dim]);
        }
        let value = Tensor::new([indices.len(), dim], data)?;
        self.push(
            "embed_lookup",
            value,
            Op::EmbedLookup { indices: indices.to_vec(), dim },
            vec![table],
        )
    }

    /// `out[r] = x[r, indices[r]]` over the last axis.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (rows, cols) = last_dim("pick", &shape)?;
        if indices.len() != rows {
            return Err(shape_err("pick", &shape, &[indices.len()]));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(rows);
        for (r, &i) in indices.iter().enumerate() {
            if i >= cols {
                return Err(TensorError::IndexOutOfRange { op: "pick", index: i, extent: cols });
            }
            data.push(xd[r * cols + i]);
        }
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), data)?;
        self.push("pick", value, Op::Pick { indices: indices.to_vec(), cols }, vec![x])
    }

    /// Nearest-neighbour ×2 upsampling of the two trailing axes.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(invalid("upsample_nearest2x", &shape, "needs at least 2 axes"));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let planes = shape.iter().product::<usize>() / (h * w).max(1);
        let xd = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut data = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut data[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        let mut out_shape = shape;
        let n = out_shape.len();
        out_shape[n - 2] = oh;
        out_shape[n - 1] = ow;
        let value = Tensor::new(out_shape, data)?;
        self.push("upsample_nearest2x", value, Op::Upsample2x { planes, h, w }, vec![x])
    }

    /// Nearest-neighbour ×2 downsampling of the two trailing axes (keeps the
    /// top-left sample of each 2×2 block).
    pub fn downsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(invalid("downsample_nearest2x", &shape, "needs at least 2 axes"));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("downsample_nearest2x", &shape, "spatial extents must be even"));
        }
        let planes = shape.iter().product::<usize>() / (h * w).max(1);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut data = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            for y in 0..oh {
                for xx in 0..ow {
                    data[(p * oh + y) * ow + xx] = xd[(p * h + 2 * y) * w + 2 * xx];
                }
            }
        }
        let mut out_shape = shape;
        let n = out_shape.len();
        out_shape[n - 2] = oh;
        out_shape[n - 1] = ow;
        let value = Tensor::new(out_shape, data)?;
        self.push("downsample_nearest2x", value, Op::Downsample2x { planes, h, w }, vec![x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape, vec![x])
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", &shape, format!("bad permutation {perm:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let permuted: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total: usize = shape.iter().product();
        let mut src = Vec::with_capacity(total);
        let mut counter = vec![0usize; shape.len()];
        let mut cur = 0usize;
        for _ in 0..total {
            src.push(cur);
            for d in (0..out_shape.len()).rev() {
                counter[d] += 1;
                cur += permuted[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                cur -= permuted[d] * counter[d];
                counter[d] = 0;
            }
        }
        let xd = self.value(x).data();
        let data = src.iter().map(|&i| xd[i]).collect();
        let value = Tensor::new(out_shape, data)?;
        self.push("permute", value, Op::Permute { src }, vec![x])
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum, vec![x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(invalid("mean", self.shape(x), "empty tensor"));
        }
        let value = Tensor::scalar(self.value(x).sum() / T::from_usize(n).unwrap());
        self.push("mean", value, Op::Mean, vec![x])
    }

    // ----- backward -------------------------------------------------------

    /// Reverse pass from a single-element `loss`. Leaves that did not
    /// influence the loss get no entry (see [`Gradients::wrt`]).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !loss_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(loss_node.value.shape().to_vec()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            let input_grads = self.node_backward(node, &gy)?;
            for (&inp, g) in node.inputs.iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        // Only leaves keep their gradients.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(n.op, Op::Leaf) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node<T>, gy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let val = |i: usize| &self.nodes[node.inputs[i].0].value;
        let need = |i: usize| self.nodes[node.inputs[i].0].requires_grad;
        let g = gy.data();
        let like = |i: usize, data: Vec<T>| Tensor::new(val(i).shape().to_vec(), data);
        let elementwise = |f: &dyn Fn(usize) -> T| -> Result<Vec<Option<Tensor<T>>>> {
            let data = (0..g.len()).map(f).collect();
            Ok(vec![Some(like(0, data)?)])
        };
        match &node.op {
            Op::Leaf => Ok(vec![]),
            &Op::MatMul { m, k, n } => {
                let (a, b) = (val(0).data(), val(1).data());
                let ga = need(0).then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::matmul_nt_acc(g, b, &mut ga, m, n, k);
                    ga
                });
                let gb = need(1).then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::matmul_tn_acc(a, g, &mut gb, k, m, n);
                    gb
                });
                Ok(vec![ga.map(|d| like(0, d)).transpose()?, gb.map(|d| like(1, d)).transpose()?])
            }
            &Op::BatchMatMul { batch, m, k, n } => {
                let (a, b) = (val(0).data(), val(1).data());
                let mut ga = vec![T::zero(); batch * m * k];
                let mut gb = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    if need(0) {
                        kernels::matmul_nt_acc(gi, &b[i * k * n..(i + 1) * k * n], &mut ga[i * m * k..(i + 1) * m * k], m, n, k);
                    }
                    if need(1) {
                        kernels::matmul_tn_acc(&a[i * m * k..(i + 1) * m * k], gi, &mut gb[i * k * n..(i + 1) * k * n], k, m, n);
                    }
                }
                Ok(vec![Some(like(0, ga)?), Some(like(1, gb)?)])
            }
            &Op::Linear { rows, fin, fout, bias } => {
                let (x, w) = (val(0).data(), val(1).data());
                let mut out = Vec::with_capacity(3);
                out.push(if need(0) {
                    let mut gx = vec![T::zero(); rows * fin];
                    kernels::matmul_nt_acc(g, w, &mut gx, rows, fout, fin);
                    Some(like(0, gx)?)
                } else {
                    None
                });
                out.push(if need(1) {
                    let mut gw = vec![T::zero(); fin * fout];
                    kernels::matmul_tn_acc(x, g, &mut gw, fin, rows, fout);
                    Some(like(1, gw)?)
                } else {
                    None
                });
                if bias {
                    let mut gb = vec![T::zero(); fout];
                    for row in g.chunks(fout) {
                        for (a, &b) in gb.iter_mut().zip(row) {
                            *a = *a + b;
                        }
                    }
                    out.push(Some(like(2, gb)?));
                }
                Ok(out)
            }
            &Op::Conv2d { batch, geom, out_ch, bias } => {
                let (x, w) = (val(0).data(), val(1).data());
                let plane = geom.out_h() * geom.out_w();
                let ckk = geom.col_rows();
                let in_size = geom.channels * geom.height * geom.width;
                let mut gx = vec![T::zero(); batch * in_size];
                let mut gw = vec![T::zero(); out_ch * ckk];
                let mut cols = vec![T::zero(); ckk * plane];
                let mut gcols = vec![T::zero(); ckk * plane];
                for n in 0..batch {
                    let gn = &g[n * out_ch * plane..(n + 1) * out_ch * plane];
                    if need(1) {
                        kernels::im2col(&x[n * in_size..(n + 1) * in_size], &geom, &mut cols);
                        kernels::matmul_nt_acc(gn, &cols, &mut gw, out_ch, plane, ckk);
                    }
                    if need(0) {
                        gcols.fill(T::zero());
                        kernels::matmul_tn_acc(w, gn, &mut gcols, ckk, out_ch, plane);
                        kernels::col2im(&gcols, &geom, &mut gx[n * in_size..(n + 1) * in_size]);
                    }
                }
                let mut out = vec![need(0).then(|| like(0, gx)).transpose()?, need(1).then(|| like(1, gw)).transpose()?];
                if bias {
                    let mut gb = vec![T::zero(); out_ch];
                    for n in 0..batch {
                        for (c, acc) in gb.iter_mut().enumerate() {
                            let s: T = g[(n * out_ch + c) * plane..(n * out_ch + c + 1) * plane].iter().copied().sum();
                            *acc = *acc + s;
                        }
                    }
                    out.push(Some(like(2, gb)?));
                }
                Ok(out)
            }
            Op::Add { ia, ib } | Op::Sub { ia, ib } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
                let ga = reduce_broadcast(g, ia.as_deref(), val(0).numel(), |i| g[i]);
                let gb = reduce_broadcast(g, ib.as_deref(), val(1).numel(), |i| sign * g[i]);
                Ok(vec![Some(like(0, ga)?), Some(like(1, gb)?)])
            }
            Op::Mul { ia, ib } => {
                let (a, b) = (val(0).data(), val(1).data());
                let at = |i: usize| a[ia.as_ref().map_or(i, |m| m[i])];
                let bt = |i: usize| b[ib.as_ref().map_or(i, |m| m[i])];
                let ga = need(0).then(|| reduce_broadcast(g, ia.as_deref(), a.len(), |i| g[i] * bt(i)));
                let gb = need(1).then(|| reduce_broadcast(g, ib.as_deref(), b.len(), |i| g[i] * at(i)));
                Ok(vec![ga.map(|d| like(0, d)).transpose()?, gb.map(|d| like(1, d)).transpose()?])
            }
            &Op::Scale(s) => elementwise(&|i| g[i] * s),
            Op::AddScalar | Op::Reshape => Ok(vec![Some(like(0, g.to_vec())?)]),
            Op::Neg => elementwise(&|i| -g[i]),
            Op::Log => {
                let x = val(0).data();
                elementwise(&|i| g[i] / x[i])
            }
            Op::Exp => {
                let y = node.value.data();
                elementwise(&|i| g[i] * y[i])
            }
            Op::Abs => {
                let x = val(0).data();
                elementwise(&|i| g[i] * sign_of(x[i]))
            }
            Op::Square => {
                let x = val(0).data();
                let two = T::one() + T::one();
                elementwise(&|i| g[i] * two * x[i])
            }
            Op::Sqrt => {
                let y = node.value.data();
                let half = T::from_f64c(0.5);
                elementwise(&|i| g[i] * half / y[i])
            }
            Op::Relu => {
                let x = val(0).data();
                elementwise(&|i| if x[i] > T::zero() { g[i] } else { T::zero() })
            }
            Op::Gelu => {
                let x = val(0).data();
                elementwise(&|i| g[i] * gelu_grad(x[i]))
            }
            Op::Sigmoid => {
                let y = node.value.data();
                elementwise(&|i| g[i] * y[i] * (T::one() - y[i]))
            }
            Op::Tanh => {
                let y = node.value.data();
                elementwise(&|i| g[i] * (T::one() - y[i] * y[i]))
            }
            &Op::Softmax { cols } => {
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        out[c] = yr[c] * (gr[c] - dot);
                    }
                }
                Ok(vec![Some(like(0, gx)?)])
            }
            &Op::LogSoftmax { cols } => {
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                for ((gr, yr), out) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let total: T = gr.iter().copied().sum();
                    for c in 0..cols {
                        out[c] = gr[c] - yr[c].exp() * total;
                    }
                }
                Ok(vec![Some(like(0, gx)?)])
            }
            Op::LayerNorm { cols, mean, rstd } => {
                let cols = *cols;
                let (x, gamma) = (val(0).data(), val(1).data());
                let n = T::from_usize(cols).unwrap();
                let mut gx = vec![T::zero(); x.len()];
                let mut gg = vec![T::zero(); cols];
                let mut gb = vec![T::zero(); cols];
                for r in 0..x.len() / cols {
                    let xr = &x[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for c in 0..cols {
                        let xhat = (xr[c] - mu) * rs;
                        gg[c] = gg[c] + gr[c] * xhat;
                        gb[c] = gb[c] + gr[c];
                        let dxhat = gr[c] * gamma[c];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    }
                    for c in 0..cols {
                        let xhat = (xr[c] - mu) * rs;
                        let dxhat = gr[c] * gamma[c];
                        gx[r * cols + c] = rs * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
                Ok(vec![Some(like(0, gx)?), Some(like(1, gg)?), Some(like(2, gb)?)])
            }
            Op::Concat { outer, inner } => {
                let total: usize = inner.iter().sum();
                let mut out = Vec::with_capacity(inner.len());
                let mut offset = 0;
                for (i, &len) in inner.iter().enumerate() {
                    let mut part = Vec::with_capacity(outer * len);
                    for o in 0..*outer {
                        part.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                    }
                    offset += len;
                    out.push(Some(like(i, part)?));
                }
                Ok(out)
            }
            Op::EmbedLookup { indices, dim } => {
                let mut gt = vec![T::zero(); val(0).numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for d in 0..*dim {
                        gt[i * dim + d] = gt[i * dim + d] + g[r * dim + d];
                    }
                }
                Ok(vec![Some(like(0, gt)?)])
            }
            Op::Pick { indices, cols } => {
                let mut gx = vec![T::zero(); val(0).numel()];
                for (r, &i) in indices.iter().enumerate() {
                    gx[r * cols + i] = g[r];
                }
                Ok(vec![Some(like(0, gx)?)])
            }
            Op::Select { mask } => {
                let ga = mask.iter().zip(g).map(|(&m, &v)| if m { v } else { T::zero() }).collect();
                let gb = mask.iter().zip(g).map(|(&m, &v)| if m { T::zero() } else { v }).collect();
                Ok(vec![Some(like(0, ga)?), Some(like(1, gb)?)])
            }
            &Op::Upsample2x { planes, h, w } => {
                let (oh, ow) = (2 * h, 2 * w);
                let mut gx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for y in 0..oh {
                        for x in 0..ow {
                            let dst = p * h * w + (y / 2) * w + x / 2;
                            gx[dst] = gx[dst] + g[(p * oh + y) * ow + x];
                        }
                    }
                }
                Ok(vec![Some(like(0, gx)?)])
            }
            &Op::Downsample2x { planes, h, w } => {
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for y in 0..oh {
                        for x in 0..ow {
                            gx[(p * h + 2 * y) * w + 2 * x] = g[(p * oh + y) * ow + x];
                        }
                    }
                }
                Ok(vec![Some(like(0, gx)?)])
            }
            Op::Permute { src } => {
                let mut gx = vec![T::zero(); g.len()];
                for (o, &s) in src.iter().enumerate() {
                    gx[s] = g[o];
                }
                Ok(vec![Some(like(0, gx)?)])
            }
            Op::Sum => Ok(vec![Some(Tensor::full(val(0).shape().to_vec(), g[0]))]),
            Op::Mean => {
                let n = T::from_usize(val(0).numel()).unwrap();
                Ok(vec![Some(Tensor::full(val(0).shape().to_vec(), g[0] / n))])
            }
        }
    }
}

fn reduce_broadcast<T: Real>(g: &[T], map: Option<&[usize]>, n: usize, term: impl Fn(usize) -> T) -> Vec<T> {
    match map {
        None => (0..g.len()).map(term).collect(),
        Some(map) => {
            let mut out = vec![T::zero(); n];
            for (i, &s) in map.iter().enumerate() {
                out[s] = out[s] + term(i);
            }
            out
        }
    }
}

fn sign_of<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::from_f64c(GELU_C);
    let a = T::from_f64c(GELU_A);
    let half = T::from_f64c(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64c(GELU_C);
    let a = T::from_f64c(GELU_A);
    let half = T::from_f64c(0.5);
    let three = T::from_f64c(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::new([2, 1], vec![3.0, 4.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 4.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 2]));
        match tape.matmul(a, b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([4]));
        let s = tape.softmax(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.25; 4]);
    }

    #[test]
    fn sum_of_squares_grad() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(&tape, w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_grads() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let c = tape.constant(Tensor::scalar(5.0));
        let loss = tape.scale(c, 2.0).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(&tape, w).data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::zeros([2]));
        assert!(matches!(tape.backward(w), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn log_of_zero_is_numeric_fault() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param(Tensor::zeros([2]));
        assert!(matches!(tape.log(w), Err(TensorError::NumericFault { op: "log" })));
    }

    #[test]
    fn gradient_accumulates_over_fanout() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.mul(x, x).unwrap();
        let s = tape.add(a, b).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.wrt(&tape, x).data(), &[8.0]);
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 4], |i| i as f32));
        let p = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // out[k][i][j] = x[i][j][k]
        assert_eq!(tape.value(p).data()[6 + 3 + 2], (12 + 2 * 4 + 1) as f32);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }
}
