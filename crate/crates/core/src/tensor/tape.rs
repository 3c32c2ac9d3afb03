use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::{axis_extents, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const ACOS_LIMIT: f64 = 1.0 - 1e-7;

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Permute { x: Var, axes: Vec<usize> },
    IndexSelect { x: Var, indices: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Cos(Var),
    Sin(Var),
    AcosClamped(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ChannelShuffle { x: Var, groups: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, training: bool },
    Dropout { x: Var, mask: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T>(Vec<Option<Tensor<T>>>);

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.0.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Record of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    training: bool,
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Scalar> Tape<T> {
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            training,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input whose gradient can be read from [`Grads`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a parameter; its gradient flows back via [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    fn binary_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor {
            shape: va.shape().to_vec(),
            data,
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.nodes[x.0].value.map(f);
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let s = T::of(s);
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `(m, k) x (k, n) -> (m, n)`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng))
    }

    /// Adds a per-channel bias `b` of shape `(C)` along axis 1 of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() < 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(shape_err("add_bias", sx, sb));
        }
        let (outer, c, inner) = axis_extents(sx, 1);
        let mut out = self.value(x).clone();
        let bias = self.value(b).data();
        for o in 0..outer {
            for (ci, &bv) in bias.iter().enumerate().take(c) {
                let base = (o * c + ci) * inner;
                out.data[base..base + inner].iter_mut().for_each(|v| *v += bv);
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let ng = xs.iter().any(|&v| self.ng(v));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(xs.to_vec(), axis), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// `(N, ...) -> (N, prod(...))`
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::Shape("cannot flatten a scalar".into()));
        }
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::Shape(format!(
                "slice [{start}..{}] on axis {axis} out of range for {s:?}",
                start + len
            )));
        }
        let (outer, n, inner) = axis_extents(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Slice { x, axis, start }, ng))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let mut seen = vec![false; s.len()];
        if axes.len() != s.len() || axes.iter().any(|&a| a >= s.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Shape(format!("invalid permutation {axes:?} for {s:?}")));
        }
        let (shape, data) = kernels::permute(s, self.value(x).data(), axes);
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            ng,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::Shape(format!("transpose needs 2-D, got {:?}", self.shape(x))));
        }
        self.permute(x, &[1, 0])
    }

    /// Gathers entries along axis 0 (indices may repeat).
    pub fn index_select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::Shape("index_select on a scalar".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::Shape(format!("index {bad} out of range for {s:?}")));
        }
        let row: usize = s[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut shape = s;
        shape[0] = indices.len();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::IndexSelect {
                x,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.cos(), Op::Cos(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sin(), Op::Sin(x))
    }

    /// `acos` with its argument clamped to `[-1 + 1e-7, 1 - 1e-7]`.
    pub fn acos_clamped(&mut self, x: Var) -> Var {
        let lim = T::of(ACOS_LIMIT);
        self.unary(x, move |v| v.max(-lim).min(lim).acos(), Op::AcosClamped(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::of(t.numel().max(1) as f64);
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Shape(format!("sum axis {axis} out of range for {s:?}")));
        }
        let (outer, n, inner) = axis_extents(&s, axis);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::SumAxis { x, axis }, ng))
    }

    fn conv_nd(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
        groups: usize,
        spatial_dims: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let nd = spatial_dims + 2;
        if sx.len() != nd || sw.len() != nd {
            return Err(shape_err(&format!("conv{spatial_dims}d"), &sx, &sw));
        }
        if groups == 0 || sx[1] % groups != 0 || sw[0] % groups != 0 {
            return Err(Error::Shape(format!(
                "channels {} / outputs {} not divisible by groups {groups}",
                sx[1], sw[0]
            )));
        }
        if sw[1] * groups != sx[1] {
            return Err(shape_err("conv input channels vs kernel", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(shape_err("conv bias", self.shape(b), &[sw[0]]));
            }
        }
        let lift = |s: &[usize]| -> [usize; 3] {
            let mut out = [1; 3];
            out[3 - spatial_dims..].copy_from_slice(&s[2..]);
            out
        };
        let input = lift(&sx);
        let kernel = lift(&sw);
        let mut output = [1; 3];
        for d in 0..3 {
            let padded = input[d] + 2 * pad[d];
            if stride[d] == 0 || kernel[d] > padded {
                return Err(Error::Shape(format!(
                    "kernel {sw:?} larger than padded input {sx:?} (padding {pad:?})"
                )));
            }
            output[d] = (padded - kernel[d]) / stride[d] + 1;
        }
        let geom = ConvGeom {
            n: sx[0],
            c: sx[1],
            o: sw[0],
            groups,
            input,
            kernel,
            stride,
            pad,
            output,
        };
        let out = kernels::conv_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut shape = vec![sx[0], sw[0]];
        shape.extend_from_slice(&output[3 - spatial_dims..]);
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(&shape, out)?, Op::Conv { x, w, b, geom }, ng))
    }

    /// Cross-correlation of `(N, C, H, W)` with `(O, C/groups, kh, kw)`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        self.conv_nd(x, w, b, [1, stride, stride], [0, padding, padding], groups, 2)
    }

    /// Cross-correlation of `(N, C, D, H, W)` with `(O, C/groups, kd, kh, kw)`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
        groups: usize,
    ) -> Result<Var> {
        self.conv_nd(x, w, b, stride, padding, groups, 3)
    }

    /// Interleaves channel groups of `(N, C, ...)`.
    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || groups == 0 || s[1] % groups != 0 {
            return Err(Error::Shape(format!(
                "channel shuffle: {s:?} channels not divisible by {groups} groups"
            )));
        }
        let src = kernels::shuffle_sources(s[1], groups);
        let (outer, c, inner) = axis_extents(&s, 1);
        let data_in = self.value(x).data();
        let mut data = Vec::with_capacity(data_in.len());
        for o in 0..outer {
            for &sc in src.iter().take(c) {
                let base = (o * c + sc) * inner;
                data.extend_from_slice(&data_in[base..base + inner]);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(&s, data)?, Op::ChannelShuffle { x, groups }, ng))
    }

    /// Batch normalization over all axes but 1. In training mode batch
    /// statistics are used and the running estimates are updated in place.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &mut Tensor<T>,
        running_var: &mut Tensor<T>,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("batch norm needs (N, C, ...), got {s:?}")));
        }
        let c = s[1];
        for v in [gamma, beta] {
            if self.shape(v) != [c] {
                return Err(shape_err("batch norm affine", self.shape(v), &[c]));
            }
        }
        if running_mean.shape() != [c] || running_var.shape() != [c] {
            return Err(shape_err("batch norm running stats", running_mean.shape(), &[c]));
        }
        if self.training && s[0] < 2 {
            return Err(Error::Precondition(
                "batch norm in training mode needs a batch of at least 2".into(),
            ));
        }
        let (outer, _, inner) = axis_extents(&s, 1);
        let m = (outer * inner) as f64;
        let xd = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let eps_t = T::of(eps);
        let mut mean = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        if self.training {
            for ci in 0..c {
                let mut acc = 0.0f64;
                for o in 0..outer {
                    let base = (o * c + ci) * inner;
                    acc += xd[base..base + inner].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = acc / m;
                let mut var = 0.0f64;
                for o in 0..outer {
                    let base = (o * c + ci) * inner;
                    var += xd[base..base + inner]
                        .iter()
                        .map(|v| (v.as_f64() - mu).powi(2))
                        .sum::<f64>();
                }
                var /= m;
                mean[ci] = T::of(mu);
                inv_std[ci] = T::one() / (T::of(var) + eps_t).sqrt();
                let mom = T::of(momentum);
                let rm = &mut running_mean.data_mut()[ci];
                *rm = (T::one() - mom) * *rm + mom * T::of(mu);
                let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
                let rv = &mut running_var.data_mut()[ci];
                *rv = (T::one() - mom) * *rv + mom * T::of(unbiased);
            }
        } else {
            for ci in 0..c {
                mean[ci] = running_mean.data()[ci];
                inv_std[ci] = T::one() / (running_var.data()[ci] + eps_t).sqrt();
            }
        }
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for ci in 0..c {
                let base = (o * c + ci) * inner;
                for i in base..base + inner {
                    let h = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = g[ci] * h + bt[ci];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let training = self.training;
        Ok(self.push(
            Tensor::new(&s, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            ng,
        ))
    }

    /// Inverted dropout; the identity outside training mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Precondition(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let mut rng = crate::seed::rng(seed);
        let keep = T::of(1.0 / (1.0 - rate));
        let src = self.value(x);
        let mask: Vec<T> = (0..src.numel())
            .map(|_| if rng.gen::<f64>() >= rate { keep } else { T::zero() })
            .collect();
        let data = src.data().iter().zip(&mask).map(|(&v, &k)| v * k).collect();
        let out = Tensor::new(src.shape(), data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Dropout { x, mask }, ng))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads(grads))
    }

    /// Adds parameter gradients from `grads` into `store`.
    pub fn accumulate_param_grads(&self, grads: &Grads<T>, store: &mut ParamStore<T>) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.0[i]) {
                store.accumulate_grad(*id, g);
            }
        }
    }

    /// Convenience: backward then accumulate into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        self.accumulate_param_grads(&grads, store);
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().expect("just filled").data_mut());
    }

    fn elementwise(&self, x: Var, g: &Tensor<T>, f: impl Fn(usize, T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape(x).to_vec(),
            data: g.data().iter().enumerate().map(|(i, &gv)| f(i, gv)).collect(),
        }
    }

    fn backprop(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga = self.elementwise(*a, g, |k, gv| gv * vb[k]);
                let gb = self.elementwise(*b, g, |k, gv| gv * va[k]);
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::Scale(x, s) => self.acc(grads, *x, g.map(|v| v * *s)),
            Op::AddScalar(x) => self.acc(grads, *x, g.clone()),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.ng(*a) {
                    let vb = self.value(*b).data();
                    self.acc_with(grads, *a, |ga| kernels::gemm_nt(m, n, k, g.data(), vb, ga));
                }
                if self.ng(*b) {
                    let va = self.value(*a).data();
                    self.acc_with(grads, *b, |gb| kernels::gemm_tn(k, m, n, va, g.data(), gb));
                }
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g.clone());
                let (outer, c, inner) = axis_extents(g.shape(), 1);
                self.acc_with(grads, *b, |gb| {
                    for o in 0..outer {
                        for (ci, gbv) in gb.iter_mut().enumerate().take(c) {
                            let base = (o * c + ci) * inner;
                            *gbv += g.data()[base..base + inner].iter().copied().sum::<T>();
                        }
                    }
                });
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_extents(g.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.shape(v)[*axis];
                    self.acc_with(grads, v, |gv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for (d, &s) in gv[dst..dst + len * inner]
                                .iter_mut()
                                .zip(&g.data()[src..src + len * inner])
                            {
                                *d += s;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Reshape(x) => {
                let mut gx = g.clone();
                gx.shape = self.shape(*x).to_vec();
                self.acc(grads, *x, gx);
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_extents(self.shape(*x), *axis);
                let len = g.shape()[*axis];
                self.acc_with(grads, *x, |gx| {
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for (d, &s) in gx[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g.data()[src..src + len * inner])
                        {
                            *d += s;
                        }
                    }
                });
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (k, &a) in axes.iter().enumerate() {
                    inv[a] = k;
                }
                let (_, data) = kernels::permute(g.shape(), g.data(), &inv);
                self.acc(
                    grads,
                    *x,
                    Tensor {
                        shape: self.shape(*x).to_vec(),
                        data,
                    },
                );
            }
            Op::IndexSelect { x, indices } => {
                let row: usize = self.shape(*x)[1..].iter().product();
                self.acc_with(grads, *x, |gx| {
                    for (k, &r) in indices.iter().enumerate() {
                        for (d, &s) in gx[r * row..(r + 1) * row]
                            .iter_mut()
                            .zip(&g.data()[k * row..(k + 1) * row])
                        {
                            *d += s;
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let o = out.data();
                let gx = self.elementwise(*x, g, |k, gv| if o[k] > T::zero() { gv } else { T::zero() });
                self.acc(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let o = out.data();
                let gx = self.elementwise(*x, g, |k, gv| gv * o[k] * (T::one() - o[k]));
                self.acc(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let o = out.data();
                let gx = self.elementwise(*x, g, |k, gv| gv * (T::one() - o[k] * o[k]));
                self.acc(grads, *x, gx);
            }
            Op::Cos(x) => {
                let xv = self.value(*x).data();
                let gx = self.elementwise(*x, g, |k, gv| -gv * xv[k].sin());
                self.acc(grads, *x, gx);
            }
            Op::Sin(x) => {
                let xv = self.value(*x).data();
                let gx = self.elementwise(*x, g, |k, gv| gv * xv[k].cos());
                self.acc(grads, *x, gx);
            }
            Op::AcosClamped(x) => {
                let xv = self.value(*x).data();
                let lim = T::of(ACOS_LIMIT);
                let gx = self.elementwise(*x, g, |k, gv| {
                    let v = xv[k];
                    if v.abs() < lim {
                        -gv / (T::one() - v * v).sqrt()
                    } else {
                        T::zero()
                    }
                });
                self.acc(grads, *x, gx);
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let two = T::of(2.0);
                let gx = self.elementwise(*x, g, |k, gv| two * gv * xv[k]);
                self.acc(grads, *x, gx);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.acc(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1);
                let gv = g.item() / T::of(n as f64);
                self.acc(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::SumAxis { x, axis } => {
                let (outer, n, inner) = axis_extents(self.shape(*x), *axis);
                self.acc_with(grads, *x, |gx| {
                    for o in 0..outer {
                        for a in 0..n {
                            let base = (o * n + a) * inner;
                            for k in 0..inner {
                                gx[base + k] += g.data()[o * inner + k];
                            }
                        }
                    }
                });
            }
            Op::Conv { x, w, b, geom } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_x = self.ng(*x);
                let need_w = self.ng(*w);
                let need_b = b.is_some_and(|b| self.ng(b));
                let mut dx = need_x.then(|| vec![T::zero(); xv.len()]);
                let mut dw = need_w.then(|| vec![T::zero(); wv.len()]);
                let mut db = need_b.then(|| vec![T::zero(); geom.o]);
                kernels::conv_backward(
                    geom,
                    xv,
                    wv,
                    g.data(),
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, Tensor { shape: self.shape(*x).to_vec(), data: dx });
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, Tensor { shape: self.shape(*w).to_vec(), data: dw });
                }
                if let (Some(db), Some(b)) = (db, b) {
                    self.acc(grads, *b, Tensor { shape: vec![geom.o], data: db });
                }
            }
            Op::ChannelShuffle { x, groups } => {
                let s = self.shape(*x);
                let src = kernels::shuffle_sources(s[1], *groups);
                let (outer, c, inner) = axis_extents(s, 1);
                self.acc_with(grads, *x, |gx| {
                    for o in 0..outer {
                        for (dst_c, &src_c) in src.iter().enumerate() {
                            let from = (o * c + dst_c) * inner;
                            let to = (o * c + src_c) * inner;
                            for k in 0..inner {
                                gx[to + k] += g.data()[from + k];
                            }
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let s = self.shape(*x);
                let (outer, c, inner) = axis_extents(s, 1);
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut sum_dxhat = vec![T::zero(); c];
                let mut sum_dxhat_xhat = vec![T::zero(); c];
                for o in 0..outer {
                    for ci in 0..c {
                        let base = (o * c + ci) * inner;
                        for k in base..base + inner {
                            dgamma[ci] += gd[k] * xhat[k];
                            dbeta[ci] += gd[k];
                            let dxh = gd[k] * gam[ci];
                            sum_dxhat[ci] += dxh;
                            sum_dxhat_xhat[ci] += dxh * xhat[k];
                        }
                    }
                }
                if self.ng(*x) {
                    let m = T::of((outer * inner) as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for o in 0..outer {
                        for ci in 0..c {
                            let base = (o * c + ci) * inner;
                            for k in base..base + inner {
                                let dxh = gd[k] * gam[ci];
                                dx[k] = if *training {
                                    inv_std[ci] / m
                                        * (m * dxh - sum_dxhat[ci] - xhat[k] * sum_dxhat_xhat[ci])
                                } else {
                                    dxh * inv_std[ci]
                                };
                            }
                        }
                    }
                    self.acc(grads, *x, Tensor { shape: s.to_vec(), data: dx });
                }
                self.acc(grads, *gamma, Tensor { shape: vec![c], data: dgamma });
                self.acc(grads, *beta, Tensor { shape: vec![c], data: dbeta });
            }
            Op::Dropout { x, mask } => {
                let gx = self.elementwise(*x, g, |k, gv| gv * mask[k]);
                self.acc(grads, *x, gx);
            }
        }
    }
}
