//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! Every primitive appends one node holding its output value. Nodes are
//! created after their inputs, so walking the record backwards is a reverse
//! topological order. Leaf gradients accumulate across `backward` calls until
//! [`Tape::zero_grads`].

use super::kernels::{self, Geom};
use super::{ConvSpec, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a training-mode batch norm, per channel.
#[derive(Clone, Debug)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance estimate.
    pub var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Gelu(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    TransposeLast2 { x: Var, batch: usize, rows: usize, cols: usize },
    Matmul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize },
    Softmax { x: Var, width: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Conv { x: Var, w: Var, b: Option<Var>, geom: Geom },
    ConvTranspose { x: Var, w: Var, b: Option<Var>, geom: Geom },
    Norm { x: Var, affine: Option<(Var, Var)>, xhat: Vec<T>, inv_std: Vec<T>, per_sample: bool, batch_stats: bool },
    Upsample { x: Var, factor: [usize; 3] },
    Warp { img: Var, flow: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

fn check_finite<T: Element>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn add_into<T: Element>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a = *a + c;
            }
        }
        None => *slot = Some(contribution),
    }
}

fn f64_of<T: Element>(v: T) -> f64 {
    v.to_f64().unwrap()
}

fn of_f64<T: Element>(v: f64) -> T {
    T::from_f64(v).unwrap()
}

/// Standard normal CDF and density, used by the exact GELU.
fn gauss_cdf_pdf<T: Element>(x: T) -> (T, T) {
    let half = of_f64::<T>(0.5);
    let cdf = half * (T::one() + (x * of_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * of_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    (cdf, pdf)
}

fn conv_out(op: &'static str, input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape(op, "stride must be at least 1"));
    }
    let padded = input + 2 * pad;
    if k > padded {
        return Err(Error::shape(
            op,
            format!("kernel extent {k} exceeds padded input extent {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Splits an image tensor shape into (batch, channels, [d, h, w]).
fn split_image(op: &'static str, shape: &[usize]) -> Result<(usize, usize, [usize; 3])> {
    match *shape {
        [n, c, h, w] => Ok((n, c, [1, h, w])),
        [n, c, d, h, w] => Ok((n, c, [d, h, w])),
        _ => Err(Error::shape(op, format!("expected [N,C,H,W] or [N,C,D,H,W], got {shape:?}"))),
    }
}

fn image_shape(n: usize, c: usize, sp: [usize; 3], rank: usize) -> Vec<usize> {
    if rank == 4 {
        vec![n, c, sp[1], sp[2]]
    } else {
        vec![n, c, sp[0], sp[1], sp[2]]
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        check_finite(name, value.data())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    /// Registers an input tensor. Gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", value.data())?;
        Ok(self.push(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("operand shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn map_unary(&mut self, name: &'static str, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push_op(name, value, op, &[x])
    }

    fn zip_binary(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push_op(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.map_unary("scale", x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.map_unary("add_scalar", x, Op::AddScalar(x), |v| v + c)
    }

    /// `max(0, x)`; the derivative at 0 is taken to be 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map_unary("relu", x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        self.map_unary("leaky_relu", x, Op::LeakyRelu(x, slope), |v| if v > T::zero() { v } else { v * slope })
    }

    /// Exact GELU, `x·Φ(x)` with the error-function CDF.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map_unary("gelu", x, Op::Gelu(x), |v| v * gauss_cdf_pdf(v).0)
    }

    /// `|x|`; the subgradient at 0 is taken to be 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map_unary("abs", x, Op::Abs(x), |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map_unary("square", x, Op::Square(x), |v| v * v)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| f64_of(v)).sum();
        self.push_op("sum", Tensor::scalar(of_f64(s)), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|&v| f64_of(v)).sum();
        let m = s / t.numel() as f64;
        self.push_op("mean", Tensor::scalar(of_f64(m)), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape).map_err(|_| {
            Error::shape("reshape", format!("cannot view {:?} as {:?}", self.shape(x), shape))
        })?;
        self.push_op("reshape", value, Op::Reshape(x), &[x])
    }

    /// Flattens all axes after `start` into one.
    pub fn flatten_from(&mut self, x: Var, start: usize) -> Result<Var> {
        let shape = self.shape(x);
        if start >= shape.len() {
            return Err(Error::shape("flatten", format!("axis {start} out of range for {shape:?}")));
        }
        let mut new_shape = shape[..start].to_vec();
        new_shape.push(shape[start..].iter().product());
        self.reshape(x, &new_shape)
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (batch, rows, cols) = match shape[..] {
            [r, c] => (1, r, c),
            [b, r, c] => (b, r, c),
            _ => return Err(Error::shape("transpose", format!("expected rank 2 or 3, got {shape:?}"))),
        };
        let data = transpose_data(self.value(x).data(), batch, rows, cols);
        let mut out_shape = shape.clone();
        let r = out_shape.len();
        out_shape.swap(r - 1, r - 2);
        self.push_op("transpose", Tensor::from_parts(out_shape, data), Op::TransposeLast2 { x, batch, rows, cols }, &[x])
    }

    /// Matrix product of `[M,K]·[K,N]`, or batched `[B,M,K]·[B,K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, k2, n, out_shape) = match (&sa[..], &sb[..]) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n, vec![*m, *n]),
            ([b1, m, k], [b2, k2, n]) if b1 == b2 => (*b1, *m, *k, *k2, *n, vec![*b1, *m, *n]),
            _ => return Err(Error::shape("matmul", format!("incompatible operands {sa:?} and {sb:?}"))),
        };
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dimensions disagree: {sa:?} · {sb:?}")));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            T::gemm(m, k, n, &va[bi * m * k..], k, 1, &vb[bi * k * n..], n, 1, T::zero(), &mut out[bi * m * n..], n, 1);
        }
        self.push_op("matmul", Tensor::from_parts(out_shape, out), Op::Matmul { a, b, batch, m, k, n }, &[a, b])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let width = *t.shape().last().ok_or_else(|| Error::shape("softmax", "scalar input has no axis"))?;
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(width) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let total: f64 = exps.iter().map(|&e| f64_of(e)).sum();
            let inv = of_f64::<T>(1.0 / total);
            out.extend(exps.into_iter().map(|e| e * inv));
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        self.push_op("softmax", value, Op::Softmax { x, width }, &[x])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::Empty("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i]) {
                return Err(Error::shape("concat", format!("{s:?} does not match {base:?} off axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push_op("concat", Tensor::from_parts(shape, out), Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// The sub-range `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("narrow", format!("range {start}..{} on axis {axis} of {shape:?}", start + len)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push_op("narrow", Tensor::from_parts(out_shape, out), Op::Narrow { x, axis, start }, &[x])
    }

    fn conv_geom(&self, op: &'static str, x: Var, w: Var, spec: ConvSpec) -> Result<(Geom, usize)> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, cin, input) = split_image(op, &xs)?;
        let (cout, wcin, kernel) = split_image(op, &ws)?;
        if ws.len() != xs.len() {
            return Err(Error::shape(op, format!("weight rank {} differs from input rank {}", ws.len(), xs.len())));
        }
        let groups = spec.groups;
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::shape(op, format!("{cin} input / {cout} output channels not divisible by {groups} groups")));
        }
        if wcin != cin / groups {
            return Err(Error::shape(op, format!("weight expects {wcin} channels per group, input provides {}", cin / groups)));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv_out(op, input[a], kernel[a], spec.stride[a], spec.padding[a])?;
        }
        let geom = Geom { n, cin, cout, groups, input, kernel, stride: spec.stride, pad: spec.padding, output };
        Ok((geom, xs.len()))
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(Error::shape(op, format!("bias shape {:?}, expected [{channels}]", self.shape(b))));
            }
        }
        Ok(())
    }

    /// Cross-correlation of `x[N,Cin,(D,)H,W]` with `w[Cout,Cin/groups,(kD,)kH,kW]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        check_finite("conv", self.value(x).data())?;
        let (geom, rank) = self.conv_geom("conv", x, w, spec)?;
        self.check_bias("conv", b, geom.cout)?;
        let out = kernels::conv_forward(&geom, self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let shape = image_shape(geom.n, geom.cout, geom.output, rank);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push_op("conv", Tensor::from_parts(shape, out), Op::Conv { x, w, b, geom }, &inputs)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, groups: usize) -> Result<Var> {
        if self.shape(x).len() != 4 {
            return Err(Error::shape("conv2d", format!("expected [N,C,H,W], got {:?}", self.shape(x))));
        }
        self.conv(x, w, b, ConvSpec::d2(stride, padding, groups))
    }

    /// Transposed convolution with weight `w[Cin, Cout, (kD,)kH, kW]`.
    /// Output extent per axis is `(in − 1)·stride − 2·padding + k + output_padding`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec, output_padding: [usize; 3]) -> Result<Var> {
        const OP: &str = "conv_transpose";
        check_finite(OP, self.value(x).data())?;
        if spec.groups != 1 {
            return Err(Error::InvalidArgument("grouped transposed convolution is not supported".into()));
        }
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, cin, input) = split_image(OP, &xs)?;
        let (wcin, cout, kernel) = split_image(OP, &ws)?;
        if ws.len() != xs.len() || wcin != cin {
            return Err(Error::shape(OP, format!("weight {ws:?} incompatible with input {xs:?}")));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            if spec.stride[a] == 0 {
                return Err(Error::shape(OP, "stride must be at least 1"));
            }
            if output_padding[a] >= spec.stride[a] {
                return Err(Error::shape(OP, format!("output_padding {} must be below stride {}", output_padding[a], spec.stride[a])));
            }
            let full = (input[a] - 1) * spec.stride[a] + kernel[a] + output_padding[a];
            if full <= 2 * spec.padding[a] {
                return Err(Error::shape(OP, format!("padding {} leaves no output on axis {a}", spec.padding[a])));
            }
            output[a] = full - 2 * spec.padding[a];
        }
        self.check_bias(OP, b, cout)?;
        // Adjoint geometry: a forward conv from the output grid back to the input grid.
        let geom = Geom { n, cin: cout, cout: cin, groups: 1, input: output, kernel, stride: spec.stride, pad: spec.padding, output: input };
        let mut out = kernels::conv_backward_data(&geom, self.value(x).data(), self.value(w).data());
        if let Some(b) = b {
            let bias = self.value(b).data();
            let size = geom.in_size();
            for ni in 0..n {
                for (c, &bv) in bias.iter().enumerate() {
                    for v in &mut out[(ni * cout + c) * size..][..size] {
                        *v = *v + bv;
                    }
                }
            }
        }
        let shape = image_shape(n, cout, output, xs.len());
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push_op(OP, Tensor::from_parts(shape, out), Op::ConvTranspose { x, w, b, geom }, &inputs)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize, output_padding: usize) -> Result<Var> {
        if self.shape(x).len() != 4 {
            return Err(Error::shape("conv_transpose2d", format!("expected [N,C,H,W], got {:?}", self.shape(x))));
        }
        self.conv_transpose(x, w, b, ConvSpec::d2(stride, padding, 1), [0, output_padding, output_padding])
    }

    fn norm_core(
        &mut self,
        op: &'static str,
        x: Var,
        affine: Option<(Var, Var)>,
        per_sample: bool,
        stats: Option<(&[T], &[T])>,
        eps: f64,
    ) -> Result<(Var, BatchNormStats<T>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::shape(op, format!("expected [N,C,...], got {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        if n * spatial == 0 {
            return Err(Error::Empty(format!("{op} over an empty batch")));
        }
        if let Some((g, b)) = affine {
            if self.shape(g) != [c] || self.shape(b) != [c] {
                return Err(Error::shape(op, format!("gamma/beta must have shape [{c}]")));
            }
        }
        let data = self.value(x).data();
        let groups = if per_sample { n * c } else { c };
        let mut mean = vec![0.0f64; groups];
        let mut var = vec![0.0f64; groups];
        let group_of = |ni: usize, ci: usize| if per_sample { ni * c + ci } else { ci };
        let count = if per_sample { spatial } else { n * spatial } as f64;
        match stats {
            Some((rm, rv)) => {
                for ci in 0..c {
                    mean[ci] = f64_of(rm[ci]);
                    var[ci] = f64_of(rv[ci]);
                }
            }
            None => {
                for ni in 0..n {
                    for ci in 0..c {
                        let s: f64 = data[(ni * c + ci) * spatial..][..spatial].iter().map(|&v| f64_of(v)).sum();
                        mean[group_of(ni, ci)] += s;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for ni in 0..n {
                    for ci in 0..c {
                        let g = group_of(ni, ci);
                        let s: f64 = data[(ni * c + ci) * spatial..][..spatial]
                            .iter()
                            .map(|&v| (f64_of(v) - mean[g]).powi(2))
                            .sum();
                        var[g] += s;
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| of_f64(1.0 / (v + eps).sqrt())).collect();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for ni in 0..n {
            for ci in 0..c {
                let g = group_of(ni, ci);
                let (m, is) = (of_f64::<T>(mean[g]), inv_std[g]);
                let (gamma, beta) = match affine {
                    Some((gv, bv)) => (self.value(gv).data()[ci], self.value(bv).data()[ci]),
                    None => (T::one(), T::zero()),
                };
                let off = (ni * c + ci) * spatial;
                for i in off..off + spatial {
                    let h = (data[i] - m) * is;
                    xhat[i] = h;
                    out[i] = h * gamma + beta;
                }
            }
        }
        let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let observed = BatchNormStats {
            mean: mean.iter().map(|&m| of_f64(m)).collect(),
            var: var.iter().map(|&v| of_f64(v * unbiased)).collect(),
        };
        let mut inputs = vec![x];
        if let Some((g, b)) = affine {
            inputs.extend([g, b]);
        }
        let value = Tensor::from_parts(xs, out);
        let node = Op::Norm { x, affine, xhat, inv_std, per_sample, batch_stats: stats.is_none() };
        Ok((self.push_op(op, value, node, &inputs)?, observed))
    }

    /// Batch norm with statistics over batch and spatial axes (training mode).
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchNormStats<T>)> {
        self.norm_core("batch_norm", x, Some((gamma, beta)), false, None, eps)
    }

    /// Batch norm with fixed running statistics (evaluation mode).
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let c = self.shape(x).get(1).copied().unwrap_or(0);
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", format!("running stats must have {c} entries")));
        }
        Ok(self.norm_core("batch_norm", x, Some((gamma, beta)), false, Some((mean, var)), eps)?.0)
    }

    /// Per-sample, per-channel normalization without learnable affine terms.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        Ok(self.norm_core("instance_norm", x, None, true, None, eps)?.0)
    }

    /// Nearest-neighbour upsampling of the trailing spatial axes by integer factors.
    pub fn upsample_nearest(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, sp) = split_image("upsample", &xs)?;
        if factor.contains(&0) || (xs.len() == 4 && factor[0] != 1) {
            return Err(Error::InvalidArgument(format!("invalid upsampling factor {factor:?}")));
        }
        let out_sp = [sp[0] * factor[0], sp[1] * factor[1], sp[2] * factor[2]];
        let src = self.value(x).data();
        let (isz, osz) = (sp.iter().product::<usize>(), out_sp.iter().product::<usize>());
        let mut out = Vec::with_capacity(n * c * osz);
        for nc in 0..n * c {
            let plane = &src[nc * isz..(nc + 1) * isz];
            for z in 0..out_sp[0] {
                for y in 0..out_sp[1] {
                    let row = &plane[((z / factor[0]) * sp[1] + y / factor[1]) * sp[2]..][..sp[2]];
                    out.extend((0..out_sp[2]).map(|xx| row[xx / factor[2]]));
                }
            }
        }
        let shape = image_shape(n, c, out_sp, xs.len());
        self.push_op("upsample", Tensor::from_parts(shape, out), Op::Upsample { x, factor }, &[x])
    }

    /// Resamples `img[N,C,D,H,W]` at `voxel + flow[N,3,D,H,W]` with trilinear
    /// interpolation, clamping sample coordinates to the volume edge.
    pub fn warp(&mut self, img: Var, flow: Var) -> Result<Var> {
        let is = self.shape(img).to_vec();
        let fs = self.shape(flow).to_vec();
        if is.len() != 5 || fs.len() != 5 || fs[1] != 3 || is[0] != fs[0] || is[2..] != fs[2..] {
            return Err(Error::shape("warp", format!("image {is:?} and flow {fs:?} grids do not match")));
        }
        let (n, c) = (is[0], is[1]);
        let ext = [is[2], is[3], is[4]];
        let vox: usize = ext.iter().product();
        let (iv, fv) = (self.value(img).data(), self.value(flow).data());
        let mut out = Vec::with_capacity(n * c * vox);
        for ni in 0..n {
            out.extend(kernels::warp_forward(&iv[ni * c * vox..][..c * vox], &fv[ni * 3 * vox..][..3 * vox], c, ext));
        }
        self.push_op("warp", Tensor::from_parts(is, out), Op::Warp { img, flow }, &[img, flow])
    }

    /// Populates leaf gradients with `d loss / d leaf`, adding to any
    /// gradients left by earlier calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got shape {:?}", self.shape(loss))));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let shape = self.nodes[i].value.shape().to_vec();
                let mut slot = self.grads[i].take().map(Tensor::into_data);
                add_into(&mut slot, g);
                self.grads[i] = slot.map(|d| Tensor::from_parts(shape, d));
                continue;
            }
            for (input, contribution) in self.node_backward(i, &g) {
                add_into(&mut adj[input.0], contribution);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn vals(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn node_backward(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::new();
        let mut emit = |v: Var, f: &dyn Fn() -> Vec<T>| {
            if self.wants(v) {
                out.push((v, f()));
            }
        };
        let ew = |x: Var, f: &dyn Fn(T, T) -> T| -> Vec<T> {
            self.vals(x).iter().zip(g).map(|(&xv, &gv)| f(xv, gv)).collect()
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                emit(*a, &|| g.to_vec());
                emit(*b, &|| g.to_vec());
            }
            Op::Sub(a, b) => {
                emit(*a, &|| g.to_vec());
                emit(*b, &|| g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                emit(*a, &|| ew(*b, &|bv, gv| bv * gv));
                emit(*b, &|| ew(*a, &|av, gv| av * gv));
            }
            Op::Scale(x, c) => emit(*x, &|| g.iter().map(|&v| v * *c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => emit(*x, &|| g.to_vec()),
            Op::Relu(x) => emit(*x, &|| ew(*x, &|xv, gv| if xv > T::zero() { gv } else { T::zero() })),
            Op::LeakyRelu(x, s) => emit(*x, &|| ew(*x, &|xv, gv| if xv > T::zero() { gv } else { gv * *s })),
            Op::Gelu(x) => emit(*x, &|| {
                ew(*x, &|xv, gv| {
                    let (cdf, pdf) = gauss_cdf_pdf(xv);
                    gv * (cdf + xv * pdf)
                })
            }),
            Op::Abs(x) => emit(*x, &|| {
                ew(*x, &|xv, gv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })
            }),
            Op::Square(x) => emit(*x, &|| ew(*x, &|xv, gv| (xv + xv) * gv)),
            Op::Sum(x) => emit(*x, &|| vec![g[0]; self.vals(*x).len()]),
            Op::Mean(x) => emit(*x, &|| {
                let n = self.vals(*x).len();
                vec![g[0] / T::from_usize(n).unwrap(); n]
            }),
            Op::TransposeLast2 { x, batch, rows, cols } => emit(*x, &|| transpose_data(g, *batch, *cols, *rows)),
            Op::Matmul { a, b, batch, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                emit(*a, &|| {
                    let bv = self.vals(*b);
                    let mut da = vec![T::zero(); batch * m * k];
                    for bi in 0..*batch {
                        T::gemm(m, n, k, &g[bi * m * n..], n, 1, &bv[bi * k * n..], 1, n, T::zero(), &mut da[bi * m * k..], k, 1);
                    }
                    da
                });
                emit(*b, &|| {
                    let av = self.vals(*a);
                    let mut db = vec![T::zero(); batch * k * n];
                    for bi in 0..*batch {
                        T::gemm(k, m, n, &av[bi * m * k..], 1, k, &g[bi * m * n..], n, 1, T::zero(), &mut db[bi * k * n..], n, 1);
                    }
                    db
                });
            }
            Op::Softmax { x, width } => emit(*x, &|| {
                let y = self.nodes[i].value.data();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(*width).zip(g.chunks(*width)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| f64_of(a) * f64_of(b)).sum();
                    let dot = of_f64::<T>(dot);
                    dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| yv * (gv - dot)));
                }
                dx
            }),
            Op::Concat { inputs, axis } => {
                let shape = self.nodes[i].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    emit(*v, &|| {
                        let mut d = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + offset..][..chunk]);
                        }
                        d
                    });
                    offset += chunk;
                }
            }
            Op::Narrow { x, axis, start } => emit(*x, &|| {
                let shape = self.shape(*x);
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let len = self.nodes[i].value.shape()[*axis];
                let mut d = vec![T::zero(); self.vals(*x).len()];
                for o in 0..outer {
                    let dst = (o * shape[*axis] + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..][..len * inner]);
                }
                d
            }),
            Op::Conv { x, w, b, geom } => {
                emit(*x, &|| kernels::conv_backward_data(geom, g, self.vals(*w)));
                emit(*w, &|| kernels::conv_backward_weight(geom, self.vals(*x), g));
                if let Some(b) = b {
                    emit(*b, &|| kernels::conv_backward_bias(geom, g));
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                emit(*x, &|| kernels::conv_forward(geom, g, self.vals(*w), None));
                emit(*w, &|| kernels::conv_backward_weight(geom, g, self.vals(*x)));
                if let Some(b) = b {
                    // The bias attaches to the adjoint geometry's input channels.
                    emit(*b, &|| {
                        let size = geom.in_size();
                        let mut db = vec![0.0f64; geom.cin];
                        for ni in 0..geom.n {
                            for (c, acc) in db.iter_mut().enumerate() {
                                *acc += g[(ni * geom.cin + c) * size..][..size].iter().map(|&v| f64_of(v)).sum::<f64>();
                            }
                        }
                        db.into_iter().map(of_f64).collect()
                    });
                }
            }
            Op::Norm { x, affine, xhat, inv_std, per_sample, batch_stats } => {
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let gamma_of = |ci: usize| affine.map_or(T::one(), |(gv, _)| self.vals(gv)[ci]);
                if let Some((gv, bv)) = affine {
                    emit(*gv, &|| {
                        let mut d = vec![0.0f64; c];
                        for ni in 0..n {
                            for (ci, acc) in d.iter_mut().enumerate() {
                                let off = (ni * c + ci) * spatial;
                                *acc += (off..off + spatial).map(|j| f64_of(g[j]) * f64_of(xhat[j])).sum::<f64>();
                            }
                        }
                        d.into_iter().map(of_f64).collect()
                    });
                    emit(*bv, &|| {
                        let mut d = vec![0.0f64; c];
                        for ni in 0..n {
                            for (ci, acc) in d.iter_mut().enumerate() {
                                *acc += g[(ni * c + ci) * spatial..][..spatial].iter().map(|&v| f64_of(v)).sum::<f64>();
                            }
                        }
                        d.into_iter().map(of_f64).collect()
                    });
                }
                emit(*x, &|| {
                    let mut dx = vec![T::zero(); g.len()];
                    if !batch_stats {
                        for ni in 0..n {
                            for ci in 0..c {
                                let s = gamma_of(ci) * inv_std[ci];
                                let off = (ni * c + ci) * spatial;
                                for j in off..off + spatial {
                                    dx[j] = g[j] * s;
                                }
                            }
                        }
                        return dx;
                    }
                    let groups = if *per_sample { n * c } else { c };
                    let group_of = |ni: usize, ci: usize| if *per_sample { ni * c + ci } else { ci };
                    let count = if *per_sample { spatial } else { n * spatial } as f64;
                    let mut sum_d = vec![0.0f64; groups];
                    let mut sum_dx = vec![0.0f64; groups];
                    for ni in 0..n {
                        for ci in 0..c {
                            let grp = group_of(ni, ci);
                            let gm = f64_of(gamma_of(ci));
                            let off = (ni * c + ci) * spatial;
                            for j in off..off + spatial {
                                let d = f64_of(g[j]) * gm;
                                sum_d[grp] += d;
                                sum_dx[grp] += d * f64_of(xhat[j]);
                            }
                        }
                    }
                    for ni in 0..n {
                        for ci in 0..c {
                            let grp = group_of(ni, ci);
                            let gm = f64_of(gamma_of(ci));
                            let is = f64_of(inv_std[grp]);
                            let (md, mdx) = (sum_d[grp] / count, sum_dx[grp] / count);
                            let off = (ni * c + ci) * spatial;
                            for j in off..off + spatial {
                                let d = f64_of(g[j]) * gm;
                                dx[j] = of_f64(is * (d - md - f64_of(xhat[j]) * mdx));
                            }
                        }
                    }
                    dx
                });
            }
            Op::Upsample { x, factor } => emit(*x, &|| {
                let xs = self.shape(*x);
                let (nc, sp) = (xs[0] * xs[1], split_image("upsample", xs).unwrap().2);
                let out_sp = [sp[0] * factor[0], sp[1] * factor[1], sp[2] * factor[2]];
                let (isz, osz) = (sp.iter().product::<usize>(), out_sp.iter().product::<usize>());
                let mut d = vec![T::zero(); nc * isz];
                for p in 0..nc {
                    for z in 0..out_sp[0] {
                        for y in 0..out_sp[1] {
                            let src = &g[p * osz + (z * out_sp[1] + y) * out_sp[2]..][..out_sp[2]];
                            let base = p * isz + ((z / factor[0]) * sp[1] + y / factor[1]) * sp[2];
                            for (xx, &v) in src.iter().enumerate() {
                                d[base + xx / factor[2]] = d[base + xx / factor[2]] + v;
                            }
                        }
                    }
                }
                d
            }),
            Op::Warp { img, flow } => {
                let is = self.shape(*img);
                let (n, c) = (is[0], is[1]);
                let ext = [is[2], is[3], is[4]];
                let vox: usize = ext.iter().product();
                let mut dimg = Vec::with_capacity(n * c * vox);
                let mut dflow = Vec::with_capacity(n * 3 * vox);
                for ni in 0..n {
                    let (di, df) = kernels::warp_backward(
                        &self.vals(*img)[ni * c * vox..][..c * vox],
                        &self.vals(*flow)[ni * 3 * vox..][..3 * vox],
                        &g[ni * c * vox..][..c * vox],
                        c,
                        ext,
                    );
                    dimg.extend(di);
                    dflow.extend(df);
                }
                emit(*img, &|| dimg.clone());
                emit(*flow, &|| dflow.clone());
            }
        }
        out
    }
}

fn transpose_data<T: Element>(src: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let (s, d) = (&src[b * rows * cols..][..rows * cols], &mut out[b * rows * cols..][..rows * cols]);
        for r in 0..rows {
            for c in 0..cols {
                d[c * rows + r] = s[r * cols + c];
            }
        }
    }
    out
}
