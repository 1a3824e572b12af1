use std::sync::Arc;

use super::kernels::{self, ConvDims, GroupNormSaved};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::operators::ProjectionOperator;
use crate::real::Real;

pub const SQRT_EPS: f64 = 1e-8;
pub const LOG_EPS: f64 = 1e-8;
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TvVariant {
    Anisotropic,
    Isotropic,
}

impl TvVariant {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "anisotropic" => Some(Self::Anisotropic),
            "isotropic" => Some(Self::Isotropic),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Anisotropic => "anisotropic",
            Self::Isotropic => "isotropic",
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    ConvT2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MaxPool2 {
        x: Var,
        arg: Vec<u32>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        saved: GroupNormSaved<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Softplus {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    Square {
        x: Var,
    },
    Sqrt {
        x: Var,
    },
    Log {
        x: Var,
        eps: T,
    },
    Scale {
        x: Var,
        c: T,
    },
    AddScalar {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    ReluProject {
        x: Var,
    },
    Project {
        x: Var,
        op: Arc<ProjectionOperator>,
    },
    Backproject {
        x: Var,
        op: Arc<ProjectionOperator>,
    },
    Tv {
        x: Var,
        h: usize,
        w: usize,
        variant: TvVariant,
        eps: T,
    },
    Reshape {
        x: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations for one forward pass and replays them backwards.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(context: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(context, a, b));
    }
    Ok(())
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn conv_dims(&self, context: &'static str, x: Var, w: Var, b: Option<Var>, transposed: bool) -> Result<ConvDims> {
        let (n, ci, h, wd) = self.value(x).nchw(context)?;
        let (w0, w1, kh, kw) = self.value(w).nchw(context)?;
        let (wci, co) = if transposed { (w0, w1) } else { (w1, w0) };
        if wci != ci || kh != kw || (transposed && kh != 2) || (!transposed && kh % 2 == 0) {
            return Err(Error::shape(context, &[co, ci, kh, kh], self.shape(w)));
        }
        if let Some(b) = b {
            same_shape(context, &[co], self.shape(b))?;
        }
        Ok(ConvDims {
            n,
            ci,
            co,
            h,
            w: wd,
            k: kh,
        })
    }

    /// Same-padded convolution, weights `[co, ci, k, k]` with odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let d = self.conv_dims("conv2d", x, w, b, false)?;
        let out = kernels::conv2d_forward(&d, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let t = Tensor::new(&[d.n, d.co, d.h, d.w], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(t, Op::Conv2d { x, w, b }, &ins))
    }

    /// Transposed convolution with stride 2, weights `[ci, co, 2, 2]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let d = self.conv_dims("conv_transpose2d", x, w, b, true)?;
        let out = kernels::conv_t2_forward(&d, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let t = Tensor::new(&[d.n, d.co, 2 * d.h, 2 * d.w], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(t, Op::ConvT2 { x, w, b }, &ins))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw("maxpool2")?;
        if h < 2 || w < 2 {
            return Err(Error::shape("maxpool2", &[n, c, 2, 2], self.shape(x)));
        }
        let (out, arg) = kernels::maxpool2_forward(self.data(x), n * c, h, w);
        let t = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        Ok(self.push(t, Op::MaxPool2 { x, arg }, &[x]))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw("group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "{groups} groups do not divide {c} channels"
            )));
        }
        same_shape("group_norm gain", &[c], self.shape(gamma))?;
        same_shape("group_norm shift", &[c], self.shape(beta))?;
        let (out, saved) = kernels::group_norm_forward(
            self.data(x),
            (n, c, h * w),
            groups,
            self.data(gamma),
            self.data(beta),
            GROUP_NORM_EPS,
        );
        let t = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                saved,
            },
            &[x, gamma, beta],
        ))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let t = Tensor::new(v.shape(), data).expect("shape preserved");
        self.push(t, op, &[x])
    }

    fn zip(&mut self, context: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        same_shape(context, self.shape(a), self.shape(b))?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        self.map(
            x,
            move |a| if a >= T::zero() { a } else { a * s },
            Op::LeakyRelu { x, slope: s },
        )
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.map(x, softplus, Op::Softplus { x })
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).nchw("concat_channels")?;
        let (nb, cb, hb, wb) = self.value(b).nchw("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape("concat_channels", &[n, cb, h, w], self.shape(b)));
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for s in 0..n {
            out.extend_from_slice(&self.data(a)[s * ca * hw..(s + 1) * ca * hw]);
            out.extend_from_slice(&self.data(b)[s * cb * hw..(s + 1) * cb * hw]);
        }
        let t = Tensor::new(&[n, ca + cb, h, w], out)?;
        Ok(self.push(t, Op::Concat { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |p, q| p + q, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |p, q| p - q, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |p, q| p * q, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |p, q| p / q, Op::Div { a, b })
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, |a| a * a, Op::Square { x })
    }

    /// `sqrt(x + 1e-8)`.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.sqrt_eps(x, SQRT_EPS)
    }

    /// `sqrt(x + eps)`.
    pub fn sqrt_eps(&mut self, x: Var, eps: f64) -> Var {
        let e = T::lit(eps);
        self.map(x, move |a| (a + e).sqrt(), Op::Sqrt { x })
    }

    /// `log(x + 1e-8)`.
    pub fn log(&mut self, x: Var) -> Var {
        self.log_eps(x, LOG_EPS)
    }

    /// `log(x + eps)`.
    pub fn log_eps(&mut self, x: Var, eps: f64) -> Var {
        let e = T::lit(eps);
        self.map(x, move |a| (a + e).ln(), Op::Log { x, eps: e })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.map(x, move |a| a * c, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        self.map(x, move |a| a + c, Op::AddScalar { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len().max(1) as f64);
        let s = self.data(x).iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    /// Projection onto the nonnegative orthant, `max(x, 0)`.
    pub fn relu_project(&mut self, x: Var) -> Var {
        self.map(x, |a| a.max(T::zero()), Op::ReluProject { x })
    }

    /// Forward projection `A x` of an image-sized tensor; output `[n_angles, n_detectors]`.
    pub fn project(&mut self, x: Var, op: &Arc<ProjectionOperator>) -> Result<Var> {
        op.grid().check_image(self.value(x).len(), "project")?;
        let g = op.geometry();
        let mut out = vec![T::zero(); g.sinogram_len()];
        op.forward_into(self.data(x), &mut out);
        let t = Tensor::new(&[g.n_angles(), g.n_detectors], out)?;
        Ok(self.push(t, Op::Project { x, op: op.clone() }, &[x]))
    }

    /// Backprojection `Aᵀ y`; output `[ny, nx]`.
    pub fn backproject(&mut self, x: Var, op: &Arc<ProjectionOperator>) -> Result<Var> {
        let g = op.geometry();
        if self.value(x).len() != g.sinogram_len() {
            return Err(Error::shape(
                "backproject",
                &[g.n_angles(), g.n_detectors],
                self.shape(x),
            ));
        }
        let grid = op.grid();
        let mut out = vec![T::zero(); grid.len()];
        op.adjoint_into(self.data(x), &mut out);
        let t = Tensor::new(&[grid.ny, grid.nx], out)?;
        Ok(self.push(t, Op::Backproject { x, op: op.clone() }, &[x]))
    }

    /// Total variation of an image whose trailing two dims are `(h, w)`.
    /// Forward differences, zero across the far edge. Isotropic: `Σ sqrt(dx²+dy²+eps²)`;
    /// anisotropic: `Σ |dx|+|dy|`, with `|d|` smoothed to `sqrt(d²+eps²)` when `eps > 0`.
    pub fn tv(&mut self, x: Var, variant: TvVariant, eps: f64) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() < 2 || shape[..shape.len() - 2].iter().product::<usize>() != 1 {
            return Err(Error::Rank {
                context: "tv",
                expected: 2,
                got: shape.to_vec(),
            });
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let e = T::lit(eps);
        let d = self.data(x);
        let mut total = T::zero();
        for i in 0..h {
            for j in 0..w {
                let (dx, dy) = tv_diffs(d, h, w, i, j);
                total += match variant {
                    TvVariant::Isotropic => (dx * dx + dy * dy + e * e).sqrt(),
                    TvVariant::Anisotropic => smooth_abs(dx, e) + smooth_abs(dy, e),
                };
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::Tv {
                x,
                h,
                w,
                variant,
                eps: e,
            },
            &[x],
        ))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::shape("reshape", shape, v.shape()));
        }
        let t = Tensor::new(shape, v.data().to_vec())?;
        Ok(self.push(t, Op::Reshape { x }, &[x]))
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward loss", &[1], self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        grads[loss.0] = Some(vec![T::one()]);
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.wants(v) {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        macro_rules! acc {
            ($v:expr) => {
                self.slot(grads, $v)
            };
        }
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b } => {
                let d = self.conv_dims("conv2d", *x, *w, *b, false).expect("checked in forward");
                let (xd, wd) = (self.data(*x), self.data(*w));
                let mut gx = self.wants(*x).then(|| vec![T::zero(); xd.len()]);
                let mut gw = self.wants(*w).then(|| vec![T::zero(); wd.len()]);
                let mut gb = b.filter(|b| self.wants(*b)).map(|_| vec![T::zero(); d.co]);
                kernels::conv2d_backward(&d, xd, wd, g, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                add_into(acc!(*x), gx.as_deref());
                add_into(acc!(*w), gw.as_deref());
                if let Some(b) = b {
                    add_into(acc!(*b), gb.as_deref());
                }
            }
            Op::ConvT2 { x, w, b } => {
                let d = self
                    .conv_dims("conv_transpose2d", *x, *w, *b, true)
                    .expect("checked in forward");
                let (xd, wd) = (self.data(*x), self.data(*w));
                let mut gx = self.wants(*x).then(|| vec![T::zero(); xd.len()]);
                let mut gw = self.wants(*w).then(|| vec![T::zero(); wd.len()]);
                let mut gb = b.filter(|b| self.wants(*b)).map(|_| vec![T::zero(); d.co]);
                kernels::conv_t2_backward(&d, xd, wd, g, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                add_into(acc!(*x), gx.as_deref());
                add_into(acc!(*w), gw.as_deref());
                if let Some(b) = b {
                    add_into(acc!(*b), gb.as_deref());
                }
            }
            Op::MaxPool2 { x, arg } => {
                if let Some(gx) = acc!(*x) {
                    for (&gv, &idx) in g.iter().zip(arg) {
                        gx[idx as usize] += gv;
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                saved,
            } => {
                let (n, c, h, w) = self.value(*x).nchw("group_norm").expect("checked in forward");
                let gam = self.data(*gamma);
                let mut gx = self.wants(*x).then(|| vec![T::zero(); n * c * h * w]);
                let mut gg = self.wants(*gamma).then(|| vec![T::zero(); c]);
                let mut gb = self.wants(*beta).then(|| vec![T::zero(); c]);
                kernels::group_norm_backward(
                    saved,
                    (n, c, h * w),
                    *groups,
                    gam,
                    g,
                    gx.as_deref_mut(),
                    gg.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                add_into(acc!(*x), gx.as_deref());
                add_into(acc!(*gamma), gg.as_deref());
                add_into(acc!(*beta), gb.as_deref());
            }
            Op::LeakyRelu { x, slope } => {
                if let Some(gx) = acc!(*x) {
                    for ((d, &gv), &a) in gx.iter_mut().zip(g).zip(self.data(*x)) {
                        *d += if a >= T::zero() { gv } else { gv * *slope };
                    }
                }
            }
            Op::Softplus { x } => {
                if let Some(gx) = acc!(*x) {
                    for ((d, &gv), &a) in gx.iter_mut().zip(g).zip(self.data(*x)) {
                        *d += gv * sigmoid(a);
                    }
                }
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).nchw("concat_channels").expect("checked");
                let cb = self.value(*b).nchw("concat_channels").expect("checked").1;
                let hw = h * w;
                let c = ca + cb;
                if let Some(ga) = acc!(*a) {
                    for s in 0..n {
                        add_slice(
                            &mut ga[s * ca * hw..(s + 1) * ca * hw],
                            &g[s * c * hw..(s * c + ca) * hw],
                        );
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for s in 0..n {
                        add_slice(
                            &mut gb[s * cb * hw..(s + 1) * cb * hw],
                            &g[(s * c + ca) * hw..(s + 1) * c * hw],
                        );
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = acc!(*a) {
                    add_slice(ga, g);
                }
                if let Some(gb) = acc!(*b) {
                    add_slice(gb, g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = acc!(*a) {
                    add_slice(ga, g);
                }
                if let Some(gb) = acc!(*b) {
                    gb.iter_mut().zip(g).for_each(|(d, &gv)| *d -= gv);
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if let Some(ga) = acc!(*a) {
                    for ((d, &gv), &q) in ga.iter_mut().zip(g).zip(bd) {
                        *d += gv * q;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for ((d, &gv), &p) in gb.iter_mut().zip(g).zip(ad) {
                        *d += gv * p;
                    }
                }
            }
            Op::Div { a, b } => {
                let bd = self.data(*b);
                if let Some(ga) = acc!(*a) {
                    for ((d, &gv), &q) in ga.iter_mut().zip(g).zip(bd) {
                        *d += gv / q;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for (((d, &gv), &q), &yv) in gb.iter_mut().zip(g).zip(bd).zip(y) {
                        *d -= gv * yv / q;
                    }
                }
            }
            Op::Square { x } => {
                if let Some(gx) = acc!(*x) {
                    let two = T::lit(2.0);
                    for ((d, &gv), &a) in gx.iter_mut().zip(g).zip(self.data(*x)) {
                        *d += two * a * gv;
                    }
                }
            }
            Op::Sqrt { x } => {
                if let Some(gx) = acc!(*x) {
                    let half = T::lit(0.5);
                    for ((d, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                        *d += half * gv / yv;
                    }
                }
            }
            Op::Log { x, eps } => {
                if let Some(gx) = acc!(*x) {
                    for ((d, &gv), &a) in gx.iter_mut().zip(g).zip(self.data(*x)) {
                        *d += gv / (a + *eps);
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().zip(g).for_each(|(d, &gv)| *d += gv * *c);
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                if let Some(gx) = acc!(*x) {
                    add_slice(gx, g);
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(gx) = acc!(*x) {
                    let s = g[0] / T::lit(gx.len().max(1) as f64);
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::ReluProject { x } => {
                if let Some(gx) = acc!(*x) {
                    for ((d, &gv), &a) in gx.iter_mut().zip(g).zip(self.data(*x)) {
                        if a > T::zero() {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Project { x, op } => {
                if let Some(gx) = acc!(*x) {
                    let mut tmp = vec![T::zero(); gx.len()];
                    op.adjoint_into(g, &mut tmp);
                    add_slice(gx, &tmp);
                }
            }
            Op::Backproject { x, op } => {
                if let Some(gx) = acc!(*x) {
                    let mut tmp = vec![T::zero(); gx.len()];
                    op.forward_into(g, &mut tmp);
                    add_slice(gx, &tmp);
                }
            }
            Op::Tv { x, h, w, variant, eps } => {
                if let Some(gx) = acc!(*x) {
                    tv_backward(self.data(*x), *h, *w, *variant, *eps, g[0], gx);
                }
            }
        }
    }
}

fn add_slice<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn add_into<T: Real>(dst: Option<&mut [T]>, src: Option<&[T]>) {
    if let (Some(d), Some(s)) = (dst, src) {
        add_slice(d, s);
    }
}

fn tv_diffs<T: Real>(d: &[T], h: usize, w: usize, i: usize, j: usize) -> (T, T) {
    let v = d[i * w + j];
    let dx = if j + 1 < w { d[i * w + j + 1] - v } else { T::zero() };
    let dy = if i + 1 < h { d[(i + 1) * w + j] - v } else { T::zero() };
    (dx, dy)
}

fn smooth_abs<T: Real>(d: T, eps: T) -> T {
    if eps > T::zero() {
        (d * d + eps * eps).sqrt()
    } else {
        d.abs()
    }
}

fn smooth_abs_grad<T: Real>(d: T, eps: T) -> T {
    if eps > T::zero() {
        d / (d * d + eps * eps).sqrt()
    } else if d > T::zero() {
        T::one()
    } else if d < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn tv_backward<T: Real>(d: &[T], h: usize, w: usize, variant: TvVariant, eps: T, g: T, gx: &mut [T]) {
    for i in 0..h {
        for j in 0..w {
            let (dx, dy) = tv_diffs(d, h, w, i, j);
            let (px, py) = match variant {
                TvVariant::Isotropic => {
                    let n = (dx * dx + dy * dy + eps * eps).sqrt();
                    if n > T::zero() {
                        (dx / n, dy / n)
                    } else {
                        (T::zero(), T::zero())
                    }
                }
                TvVariant::Anisotropic => (smooth_abs_grad(dx, eps), smooth_abs_grad(dy, eps)),
            };
            let (px, py) = (px * g, py * g);
            let c = i * w + j;
            if j + 1 < w {
                gx[c + 1] += px;
                gx[c] -= px;
            }
            if i + 1 < h {
                gx[c + w] += py;
                gx[c] -= py;
            }
        }
    }
}
