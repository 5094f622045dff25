use super::conv::{col2im, im2col, ConvGeom};
use super::tensor::{gemm, Real, Tensor};
use crate::error::{Error, Result};
use crate::morphology::{check_shape, plane_operator_routed};
use crate::volume::{central_diff_axis, central_diff_axis_adjoint, Shape3};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary {
    Exp,
    Log(f64),
    Square,
    Abs,
    Relu,
    Sigmoid,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    Affine { x: Var, scale: T },
    Unary(Unary, Var),
    Sum(Var),
    Mean(Var),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<T> },
    ConvT { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Norm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Gather { x: Var, idx: Vec<u32>, per_sample: usize },
    Concat(Vec<Var>),
    CentralDiff { x: Var, axis: usize },
    SliceBatch { x: Var, start: usize },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batch norm, for the caller's
/// running-average update.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance estimate.
    pub var: Vec<T>,
}

/// Epsilon added to the variance in batch norm.
pub const NORM_EPS: f64 = 1e-5;

/// Tape of tensor operations with reverse-mode differentiation.
///
/// Leaves created with [`Graph::param`] receive gradients; leaves from
/// [`Graph::constant`] do not. `backward` accumulates into leaf gradients
/// across calls until [`Graph::zero_grad`].
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims5(shape: &[usize], op: &'static str) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(shape).map_err(|_| Error::shape(op, format!("expected (N, C, D, H, W), got {shape:?}")))
}

fn spatial(d: [usize; 5]) -> [usize; 3] {
    [d[2], d[3], d[4]]
}

fn add_into<T: Real>(acc: &mut [T], src: &[T]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a = *a + s;
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

impl<T: Real> Graph<T> {
    /// A recording graph for training and gradient checks.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), record: true }
    }

    /// A graph that keeps values only; nothing is saved for backward.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), record: false }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.record;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a parameter leaf, if any backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Stops gradient flow: a constant copy of `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = if sa == sb || sb.is_empty() {
            sa.to_vec()
        } else if sa.is_empty() {
            sb.to_vec()
        } else {
            return Err(Error::shape("binary", format!("{kind:?} of {sa:?} and {sb:?}")));
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n: usize = out_shape.iter().product();
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<T> =
            (0..n).map(|i| f(av[if av.len() == 1 { 0 } else { i }], bv[if bv.len() == 1 { 0 } else { i }])).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// `scale · x + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.affine(x, T::one(), s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::zero())
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let out = self.value(x).map(|v| match kind {
            Unary::Exp => v.exp(),
            Unary::Log(eps) => (v + T::lit(eps)).ln(),
            Unary::Square => v * v,
            Unary::Abs => v.abs(),
            Unary::Relu => v.max(T::zero()),
            Unary::Sigmoid => sigmoid(v),
        });
        let rg = self.rg(x);
        self.push(out, Op::Unary(kind, x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    /// `ln(x + eps)`.
    pub fn log(&mut self, x: Var, eps: f64) -> Var {
        self.unary(Unary::Log(eps), x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    /// Subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    /// Subgradient 0 at 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::from_usize(t.numel().max(1)).unwrap();
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    // ---- convolutions ------------------------------------------------------

    /// 3D convolution. `x` is `(N, Ci, D, H, W)`, `w` is `(Co, Ci, kd, kh, kw)`,
    /// optional `b` is `(Co)`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xd = dims5(self.shape(x), "conv3d")?;
        let wd = dims5(self.shape(w), "conv3d")?;
        if wd[1] != xd[1] || [wd[2], wd[3], wd[4]] != geom.kernel {
            return Err(Error::shape(
                "conv3d",
                format!("weight {wd:?} incompatible with input {xd:?} and kernel {:?}", geom.kernel),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [wd[0]] {
                return Err(Error::shape("conv3d", format!("bias {:?} for {} channels", self.shape(b), wd[0])));
            }
        }
        let (n, ci, co) = (xd[0], xd[1], wd[0]);
        let big = spatial(xd);
        let small = geom.conv_out(big)?;
        let p: usize = small.iter().product();
        let rows = ci * geom.kernel_volume();
        let in_vol = ci * big.iter().product::<usize>();
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let keep = rg && self.rg(w);
        let mut saved = if keep { vec![T::zero(); n * rows * p] } else { Vec::new() };
        let mut scratch = vec![T::zero(); rows * p];
        let mut out = vec![T::zero(); n * co * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            let cols = if keep { &mut saved[s * rows * p..(s + 1) * rows * p] } else { &mut scratch[..] };
            im2col(&xv[s * in_vol..(s + 1) * in_vol], ci, big, small, &geom, cols);
            gemm(co, rows, p, wv, false, cols, false, &mut out[s * co * p..(s + 1) * co * p], false);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (i, o) in out.iter_mut().enumerate() {
                *o = *o + bv[(i / p) % co];
            }
        }
        let t = Tensor::new(vec![n, co, small[0], small[1], small[2]], out)?;
        Ok(self.push(t, Op::Conv { x, w, b, geom, cols: saved }, rg))
    }

    /// 3D transposed convolution. `x` is `(N, Ci, D, H, W)`, `w` is
    /// `(Ci, Co, kd, kh, kw)`, optional `b` is `(Co)`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let xd = dims5(self.shape(x), "conv_transpose3d")?;
        let wd = dims5(self.shape(w), "conv_transpose3d")?;
        if wd[0] != xd[1] || [wd[2], wd[3], wd[4]] != geom.kernel {
            return Err(Error::shape(
                "conv_transpose3d",
                format!("weight {wd:?} incompatible with input {xd:?} and kernel {:?}", geom.kernel),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [wd[1]] {
                return Err(Error::shape(
                    "conv_transpose3d",
                    format!("bias {:?} for {} channels", self.shape(b), wd[1]),
                ));
            }
        }
        let (n, ci, co) = (xd[0], xd[1], wd[1]);
        let small = spatial(xd);
        let big = geom.transpose_out(small)?;
        let p: usize = small.iter().product();
        let out_vol = co * big.iter().product::<usize>();
        let rows = co * geom.kernel_volume();
        let mut cols = vec![T::zero(); rows * p];
        let mut out = vec![T::zero(); n * out_vol];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            gemm(rows, ci, p, wv, true, &xv[s * ci * p..(s + 1) * ci * p], false, &mut cols, false);
            col2im(&cols, co, big, small, &geom, &mut out[s * out_vol..(s + 1) * out_vol]);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            let vol = out_vol / co;
            for (i, o) in out.iter_mut().enumerate() {
                *o = *o + bv[(i / vol) % co];
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(vec![n, co, big[0], big[1], big[2]], out)?;
        Ok(self.push(t, Op::ConvT { x, w, b, geom }, rg))
    }

    // ---- normalization -----------------------------------------------------

    fn norm_check(&self, x: Var, gamma: Var, beta: Var) -> Result<[usize; 5]> {
        let d = dims5(self.shape(x), "batch_norm")?;
        if self.shape(gamma) != [d[1]] || self.shape(beta) != [d[1]] {
            return Err(Error::shape(
                "batch_norm",
                format!("affine {:?}/{:?} for {} channels", self.shape(gamma), self.shape(beta), d[1]),
            ));
        }
        Ok(d)
    }

    /// Channelwise batch norm with batch statistics. Requires `N ≥ 2`.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats<T>)> {
        let d = self.norm_check(x, gamma, beta)?;
        if d[0] < 2 {
            return Err(Error::shape("batch_norm", format!("batch statistics need N ≥ 2, got {:?}", d)));
        }
        let (n, c) = (d[0], d[1]);
        let vol = d[2] * d[3] * d[4];
        let m = T::from_usize(n * vol).unwrap();
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s = s + xv[(b * c + ch) * vol..(b * c + ch + 1) * vol].iter().copied().sum();
            }
            let mu = s / m;
            let mut q = T::zero();
            for b in 0..n {
                for &v in &xv[(b * c + ch) * vol..(b * c + ch + 1) * vol] {
                    q = q + (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = q / m;
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(NORM_EPS)).sqrt()).collect();
        let unbiased = var.iter().map(|&v| v * m / (m - T::one())).collect();
        let y = self.norm_apply(x, gamma, beta, &mean, inv_std, d, true)?;
        Ok((y, BatchStats { mean, var: unbiased }))
    }

    /// Channelwise batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let d = self.norm_check(x, gamma, beta)?;
        if mean.len() != d[1] || var.len() != d[1] {
            return Err(Error::shape("batch_norm", format!("running stats for {} channels", mean.len())));
        }
        let inv_std = var.iter().map(|&v| T::one() / (v + T::lit(NORM_EPS)).sqrt()).collect();
        self.norm_apply(x, gamma, beta, mean, inv_std, d, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: Vec<T>,
        d: [usize; 5],
        batch_stats: bool,
    ) -> Result<Var> {
        let (c, vol) = (d[1], d[2] * d[3] * d[4]);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let xhat: Vec<T> =
            xv.iter().enumerate().map(|(i, &v)| (v - mean[(i / vol) % c]) * inv_std[(i / vol) % c]).collect();
        let out = xhat.iter().enumerate().map(|(i, &h)| g[(i / vol) % c] * h + bt[(i / vol) % c]).collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let t = Tensor::new(d.to_vec(), out)?;
        let op = if rg && self.record { Op::Norm { x, gamma, beta, xhat, inv_std, batch_stats } } else { Op::Leaf };
        Ok(self.push(t, op, rg))
    }

    // ---- pooling and morphology --------------------------------------------

    fn gather(&mut self, x: Var, shape: Vec<usize>, values: Vec<T>, idx: Vec<u32>, per_sample: usize) -> Result<Var> {
        let rg = self.rg(x);
        let t = Tensor::new(shape, values)?;
        let idx = if rg && self.record { idx } else { Vec::new() };
        Ok(self.push(t, Op::Gather { x, idx, per_sample }, rg))
    }

    /// Max pooling with kernel 2 and stride 2. Spatial dims must be even.
    /// Ties route the gradient to the first voxel in raster order.
    pub fn max_pool3d(&mut self, x: Var) -> Result<Var> {
        let d = dims5(self.shape(x), "max_pool3d")?;
        if d[2] % 2 != 0 || d[3] % 2 != 0 || d[4] % 2 != 0 {
            return Err(Error::shape("max_pool3d", format!("spatial dims of {d:?} must be even")));
        }
        let (od, oh, ow) = (d[2] / 2, d[3] / 2, d[4] / 2);
        let vol = d[2] * d[3] * d[4];
        let xv = self.value(x).data();
        let mut vals = Vec::with_capacity(d[0] * d[1] * od * oh * ow);
        let mut idx = Vec::with_capacity(vals.capacity());
        for bc in 0..d[0] * d[1] {
            let base = bc * vol;
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = (T::neg_infinity(), 0usize);
                        let mut first = true;
                        for (dz, dy, dx) in (0..8).map(|k| (k >> 2, (k >> 1) & 1, k & 1)) {
                            let local = ((2 * z + dz) * d[3] + 2 * y + dy) * d[4] + 2 * xx + dx;
                            let v = xv[base + local];
                            if first || v > best.0 {
                                best = (v, local);
                                first = false;
                            }
                        }
                        vals.push(best.0);
                        idx.push((base + best.1) as u32);
                    }
                }
            }
        }
        self.gather(x, vec![d[0], d[1], od, oh, ow], vals, idx, 0)
    }

    fn masked_pool(&mut self, x: Var, sup_inf: bool) -> Result<Var> {
        let name = if sup_inf { "masked_pool_si" } else { "masked_pool_is" };
        let d = dims5(self.shape(x), name)?;
        if d[1] != 1 {
            return Err(Error::shape(name, format!("expected one channel, got {d:?}")));
        }
        let shape = Shape3::new(d[2], d[3], d[4]);
        check_shape(name, shape)?;
        let vol = shape.len();
        let xv = self.value(x).data();
        let mut vals = Vec::with_capacity(d[0] * vol);
        let mut idx = Vec::with_capacity(d[0] * vol);
        for s in 0..d[0] {
            let (v, r) = plane_operator_routed(&xv[s * vol..(s + 1) * vol], shape, sup_inf);
            vals.extend(v);
            idx.extend(r);
        }
        self.gather(x, d.to_vec(), vals, idx, vol)
    }

    /// Differentiable `SI` on `(N, 1, D, H, W)`; each output voxel's gradient
    /// goes to the single input voxel it selected.
    pub fn masked_pool_si(&mut self, x: Var) -> Result<Var> {
        self.masked_pool(x, true)
    }

    /// Differentiable `IS` on `(N, 1, D, H, W)`.
    pub fn masked_pool_is(&mut self, x: Var) -> Result<Var> {
        self.masked_pool(x, false)
    }

    /// `(SI ∘ IS)^mu`.
    pub fn curvature_smooth(&mut self, x: Var, mu: usize) -> Result<Var> {
        let mut cur = x;
        for _ in 0..mu {
            let i = self.masked_pool_is(cur)?;
            cur = self.masked_pool_si(i)?;
        }
        Ok(cur)
    }

    // ---- shape ops ---------------------------------------------------------

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let first = dims5(self.shape(parts[0]), "concat")?;
        let mut channels = 0;
        for &p in parts {
            let d = dims5(self.shape(p), "concat")?;
            if d[0] != first[0] || spatial(d) != spatial(first) {
                return Err(Error::shape("concat", format!("{d:?} vs {first:?}")));
            }
            channels += d[1];
        }
        let vol = first[2] * first[3] * first[4];
        let mut out = Vec::with_capacity(first[0] * channels * vol);
        for s in 0..first[0] {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[s * c * vol..(s + 1) * c * vol]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let t = Tensor::new(vec![first[0], channels, first[2], first[3], first[4]], out)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), rg))
    }

    /// Central difference along spatial axis `axis` (0 = z, 1 = y, 2 = x),
    /// one-sided at the borders. Every spatial dim must be ≥ 2.
    pub fn central_diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let d = dims5(self.shape(x), "central_diff")?;
        let sp = spatial(d);
        if axis > 2 || sp.iter().any(|&n| n < 2) {
            return Err(Error::shape("central_diff", format!("axis {axis} of {d:?}")));
        }
        let vol = sp.iter().product::<usize>();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        for chunk in xv.chunks(vol) {
            out.extend(central_diff_axis(chunk, sp, axis));
        }
        let rg = self.rg(x);
        let t = Tensor::new(d.to_vec(), out)?;
        Ok(self.push(t, Op::CentralDiff { x, axis }, rg))
    }

    /// `‖∇x‖₁ = |∂z x| + |∂y x| + |∂x x|`.
    pub fn gradient_magnitude_l1(&mut self, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for axis in 0..3 {
            let g = self.central_diff(x, axis)?;
            let a = self.abs(g);
            acc = Some(match acc {
                None => a,
                Some(s) => self.add(s, a)?,
            });
        }
        Ok(acc.expect("three axes"))
    }

    /// Samples `start..start+len` along the batch axis.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] || len == 0 {
            return Err(Error::shape("slice_batch", format!("{start}..{} of {shape:?}", start + len)));
        }
        let per: usize = shape[1..].iter().product();
        let data = self.value(x).data()[start * per..(start + len) * per].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::SliceBatch { x, start }, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar `root`. Gradients are added to the
    /// accumulated gradients of every reachable parameter leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.shape(root).is_empty() {
            return Err(Error::shape("backward", format!("root must be scalar, got {:?}", self.shape(root))));
        }
        if !self.record {
            return Err(Error::InvalidArgument("backward on an inference graph".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut self.nodes[i].grad;
                match slot {
                    Some(acc) => add_into(acc.data_mut(), gy.data()),
                    None => *slot = Some(gy),
                }
                continue;
            }
            self.node_backward(i, &gy, &mut grads)?;
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let y = &nodes[i].value;
        let g = gy.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = &mut grads[v.0];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(nodes[v.0].value.shape().to_vec()));
            }
            f(slot.as_mut().unwrap().data_mut());
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                let at = |k: usize| av[if av.len() == 1 { 0 } else { k }];
                let bt = |k: usize| bv[if bv.len() == 1 { 0 } else { k }];
                let da = |k: usize| match kind {
                    Binary::Add | Binary::Sub => g[k],
                    Binary::Mul => g[k] * bt(k),
                    Binary::Div => g[k] / bt(k),
                };
                let db = |k: usize| match kind {
                    Binary::Add => g[k],
                    Binary::Sub => -g[k],
                    Binary::Mul => g[k] * at(k),
                    Binary::Div => -g[k] * at(k) / (bt(k) * bt(k)),
                };
                acc(*a, &mut |ga| {
                    if ga.len() == 1 && g.len() != 1 {
                        ga[0] = ga[0] + (0..g.len()).map(da).sum::<T>();
                    } else {
                        for (k, v) in ga.iter_mut().enumerate() {
                            *v = *v + da(k);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    if gb.len() == 1 && g.len() != 1 {
                        gb[0] = gb[0] + (0..g.len()).map(db).sum::<T>();
                    } else {
                        for (k, v) in gb.iter_mut().enumerate() {
                            *v = *v + db(k);
                        }
                    }
                });
            }
            Op::Affine { x, scale } => acc(*x, &mut |gx| {
                for (v, &d) in gx.iter_mut().zip(g) {
                    *v = *v + *scale * d;
                }
            }),
            Op::Unary(kind, x) => {
                let xv = nodes[x.0].value.data();
                let yv = y.data();
                acc(*x, &mut |gx| {
                    for k in 0..gx.len() {
                        let d = match kind {
                            Unary::Exp => yv[k],
                            Unary::Log(eps) => T::one() / (xv[k] + T::lit(*eps)),
                            Unary::Square => T::lit(2.0) * xv[k],
                            Unary::Abs => {
                                if xv[k] > T::zero() {
                                    T::one()
                                } else if xv[k] < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Relu => {
                                if xv[k] > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Sigmoid => yv[k] * (T::one() - yv[k]),
                        };
                        gx[k] = gx[k] + g[k] * d;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for v in gx.iter_mut() {
                    *v = *v + g[0];
                }
            }),
            Op::Mean(x) => acc(*x, &mut |gx| {
                let s = g[0] / T::from_usize(gx.len().max(1)).unwrap();
                for v in gx.iter_mut() {
                    *v = *v + s;
                }
            }),
            Op::Conv { x, w, b, geom, cols } => {
                let xd = dims5(nodes[x.0].value.shape(), "conv3d")?;
                let yd = dims5(y.shape(), "conv3d")?;
                let (n, ci, co) = (xd[0], xd[1], yd[1]);
                let (big, small) = (spatial(xd), spatial(yd));
                let p: usize = small.iter().product();
                let rows = ci * geom.kernel_volume();
                let in_vol = ci * big.iter().product::<usize>();
                let wv = nodes[w.0].value.data();
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for (k, &d) in g.iter().enumerate() {
                            gb[(k / p) % co] = gb[(k / p) % co] + d;
                        }
                    });
                }
                acc(*w, &mut |gw| {
                    for s in 0..n {
                        let c = &cols[s * rows * p..(s + 1) * rows * p];
                        gemm(co, p, rows, &g[s * co * p..(s + 1) * co * p], false, c, true, gw, true);
                    }
                });
                let mut dcols = vec![T::zero(); rows * p];
                acc(*x, &mut |gx| {
                    for s in 0..n {
                        gemm(rows, co, p, wv, true, &g[s * co * p..(s + 1) * co * p], false, &mut dcols, false);
                        col2im(&dcols, ci, big, small, geom, &mut gx[s * in_vol..(s + 1) * in_vol]);
                    }
                });
            }
            Op::ConvT { x, w, b, geom } => {
                let xd = dims5(nodes[x.0].value.shape(), "conv_transpose3d")?;
                let yd = dims5(y.shape(), "conv_transpose3d")?;
                let (n, ci, co) = (xd[0], xd[1], yd[1]);
                let (small, big) = (spatial(xd), spatial(yd));
                let p: usize = small.iter().product();
                let rows = co * geom.kernel_volume();
                let out_vol = co * big.iter().product::<usize>();
                let xv = nodes[x.0].value.data();
                let wv = nodes[w.0].value.data();
                if let Some(b) = b {
                    let vol = out_vol / co;
                    acc(*b, &mut |gb| {
                        for (k, &d) in g.iter().enumerate() {
                            gb[(k / vol) % co] = gb[(k / vol) % co] + d;
                        }
                    });
                }
                let need_x = nodes[x.0].requires_grad;
                let need_w = nodes[w.0].requires_grad;
                let mut dcols = vec![T::zero(); n * rows * p];
                for s in 0..n {
                    im2col(
                        &g[s * out_vol..(s + 1) * out_vol],
                        co,
                        big,
                        small,
                        geom,
                        &mut dcols[s * rows * p..(s + 1) * rows * p],
                    );
                }
                if need_w {
                    acc(*w, &mut |gw| {
                        for s in 0..n {
                            let dc = &dcols[s * rows * p..(s + 1) * rows * p];
                            gemm(ci, p, rows, &xv[s * ci * p..(s + 1) * ci * p], false, dc, true, gw, true);
                        }
                    });
                }
                if need_x {
                    acc(*x, &mut |gx| {
                        for s in 0..n {
                            let dc = &dcols[s * rows * p..(s + 1) * rows * p];
                            gemm(ci, rows, p, wv, false, dc, false, &mut gx[s * ci * p..(s + 1) * ci * p], true);
                        }
                    });
                }
            }
            Op::Norm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let d = dims5(y.shape(), "batch_norm")?;
                let (c, vol) = (d[1], d[2] * d[3] * d[4]);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (k, (&dy, &h)) in g.iter().zip(xhat).enumerate() {
                    let ch = (k / vol) % c;
                    sum_g[ch] = sum_g[ch] + dy;
                    sum_gx[ch] = sum_gx[ch] + dy * h;
                }
                acc(*beta, &mut |gb| add_into(gb, &sum_g));
                acc(*gamma, &mut |gg| add_into(gg, &sum_gx));
                let gam = nodes[gamma.0].value.data();
                let m = T::from_usize(d[0] * vol).unwrap();
                acc(*x, &mut |gx| {
                    for (k, v) in gx.iter_mut().enumerate() {
                        let ch = (k / vol) % c;
                        let s = gam[ch] * inv_std[ch];
                        *v = *v
                            + if *batch_stats {
                                s * (g[k] - sum_g[ch] / m - xhat[k] * sum_gx[ch] / m)
                            } else {
                                s * g[k]
                            };
                    }
                });
            }
            Op::Gather { x, idx, per_sample } => acc(*x, &mut |gx| {
                for (k, (&d, &j)) in g.iter().zip(idx).enumerate() {
                    let j = j as usize + if *per_sample > 0 { (k / per_sample) * per_sample } else { 0 };
                    gx[j] = gx[j] + d;
                }
            }),
            Op::Concat(parts) => {
                let d = dims5(y.shape(), "concat")?;
                let vol = d[2] * d[3] * d[4];
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p.0].value.shape()[1];
                    acc(p, &mut |gp| {
                        for s in 0..d[0] {
                            let src = &g[(s * d[1] + offset) * vol..(s * d[1] + offset + c) * vol];
                            add_into(&mut gp[s * c * vol..(s + 1) * c * vol], src);
                        }
                    });
                    offset += c;
                }
            }
            Op::CentralDiff { x, axis } => {
                let d = dims5(y.shape(), "central_diff")?;
                let sp = spatial(d);
                let vol = sp.iter().product::<usize>();
                acc(*x, &mut |gx| {
                    for (gc, ac) in g.chunks(vol).zip(gx.chunks_mut(vol)) {
                        central_diff_axis_adjoint(gc, sp, *axis, ac);
                    }
                });
            }
            Op::SliceBatch { x, start } => {
                let per: usize = y.shape()[1..].iter().product();
                acc(*x, &mut |gx| add_into(&mut gx[start * per..start * per + g.len()], g));
            }
        }
        Ok(())
    }
}
