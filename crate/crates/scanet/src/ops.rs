//! Differentiable primitives. Each forward constructs a node carrying the
//! saved state its backward rule needs; `Op::backward` pushes adjoints into
//! inputs that require gradients.
//!
//! No implicit broadcasting: elementwise ops demand equal shapes, and the
//! two attention-gate products are explicit named ops.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::scalar::Scalar;
use crate::tensor::{Inner, Shape, Tensor};

/// BT.601 luma weights used when collapsing RGB before the gradient map.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub enum Op<T: Scalar> {
    Leaf,
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    AddScalar(Tensor<T>),
    MulScalar(Tensor<T>, T),
    Relu(Tensor<T>),
    Sigmoid(Tensor<T>),
    Sqrt(Tensor<T>),
    Abs(Tensor<T>),
    Sum(Tensor<T>),
    Mean(Tensor<T>),
    ConcatChannels(Tensor<T>, Tensor<T>),
    Conv2d {
        x: Tensor<T>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        geom: ConvGeometry,
    },
    GlobalAvgPool(Tensor<T>),
    ChannelAvg(Tensor<T>),
    ChannelMax { x: Tensor<T>, argmax: Vec<u32> },
    MulSpatialGate { x: Tensor<T>, gate: Tensor<T> },
    MulChannelGate { x: Tensor<T>, gate: Tensor<T> },
    Upsample2x(Tensor<T>),
    GradMap {
        x: Tensor<T>,
        ix: Vec<T>,
        iy: Vec<T>,
        mag: Vec<T>,
    },
}

impl<T: Scalar> Op<T> {
    pub(crate) fn visit_inputs(&self, f: &mut dyn FnMut(&Tensor<T>)) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatChannels(a, b) => {
                f(a);
                f(b);
            }
            Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Sqrt(a)
            | Op::Abs(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::GlobalAvgPool(a)
            | Op::ChannelAvg(a)
            | Op::Upsample2x(a) => f(a),
            Op::ChannelMax { x, .. } | Op::GradMap { x, .. } => f(x),
            Op::MulSpatialGate { x, gate } | Op::MulChannelGate { x, gate } => {
                f(x);
                f(gate);
            }
            Op::Conv2d { x, weight, bias, .. } => {
                f(x);
                f(weight);
                if let Some(b) = bias {
                    f(b);
                }
            }
        }
    }

    pub(crate) fn backward(&self, node: &Inner<T>, up: &[T]) {
        match self {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if a.requires_grad() {
                    a.accumulate_grad(up);
                }
                if b.requires_grad() {
                    b.accumulate_grad(up);
                }
            }
            Op::Sub(a, b) => {
                if a.requires_grad() {
                    a.accumulate_grad(up);
                }
                if b.requires_grad() {
                    let neg: Vec<T> = up.iter().map(|v| -*v).collect();
                    b.accumulate_grad(&neg);
                }
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let da: Vec<T> =
                        up.iter().zip(b.data()).map(|(u, bv)| *u * *bv).collect();
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let db: Vec<T> =
                        up.iter().zip(a.data()).map(|(u, av)| *u * *av).collect();
                    b.accumulate_grad(&db);
                }
            }
            Op::AddScalar(a) => {
                if a.requires_grad() {
                    a.accumulate_grad(up);
                }
            }
            Op::MulScalar(a, k) => {
                if a.requires_grad() {
                    let da: Vec<T> = up.iter().map(|u| *u * *k).collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::Relu(a) => {
                if a.requires_grad() {
                    let da: Vec<T> = up
                        .iter()
                        .zip(a.data())
                        .map(|(u, x)| if *x > T::zero() { *u } else { T::zero() })
                        .collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::Sigmoid(a) => {
                if a.requires_grad() {
                    let da: Vec<T> = up
                        .iter()
                        .zip(&node.data)
                        .map(|(u, y)| *u * *y * (T::one() - *y))
                        .collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::Sqrt(a) => {
                if a.requires_grad() {
                    let two = T::from_f64(2.0);
                    let da: Vec<T> = up
                        .iter()
                        .zip(&node.data)
                        .map(|(u, y)| {
                            if *y > T::zero() {
                                *u / (two * *y)
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::Abs(a) => {
                if a.requires_grad() {
                    let da: Vec<T> = up
                        .iter()
                        .zip(a.data())
                        .map(|(u, x)| {
                            if *x > T::zero() {
                                *u
                            } else if *x < T::zero() {
                                -*u
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    a.accumulate_grad(&da);
                }
            }
            Op::Sum(a) => {
                if a.requires_grad() {
                    a.accumulate_grad(&vec![up[0]; a.numel()]);
                }
            }
            Op::Mean(a) => {
                if a.requires_grad() {
                    let g = up[0] / T::from_f64(a.numel() as f64);
                    a.accumulate_grad(&vec![g; a.numel()]);
                }
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (a.shape(), b.shape());
                let plane = sa.h * sa.w;
                let (ca, cb) = (sa.c, sb.c);
                if a.requires_grad() {
                    let mut da = vec![T::zero(); a.numel()];
                    for n in 0..sa.n {
                        let src = &up[n * (ca + cb) * plane..n * (ca + cb) * plane + ca * plane];
                        da[n * ca * plane..(n + 1) * ca * plane].copy_from_slice(src);
                    }
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    let mut db = vec![T::zero(); b.numel()];
                    for n in 0..sb.n {
                        let start = n * (ca + cb) * plane + ca * plane;
                        db[n * cb * plane..(n + 1) * cb * plane]
                            .copy_from_slice(&up[start..start + cb * plane]);
                    }
                    b.accumulate_grad(&db);
                }
            }
            Op::Conv2d { x, weight, bias, geom } => {
                let batch = x.shape().n;
                if x.requires_grad() {
                    x.accumulate_grad(&kernels::conv_input_grad(up, weight.data(), batch, geom));
                }
                if weight.requires_grad() {
                    weight.accumulate_grad(&kernels::conv_weight_grad(
                        x.data(),
                        up,
                        batch,
                        geom,
                    ));
                }
                if let Some(b) = bias {
                    if b.requires_grad() {
                        b.accumulate_grad(&kernels::conv_bias_grad(up, batch, geom));
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                if a.requires_grad() {
                    let s = a.shape();
                    let plane = s.h * s.w;
                    let inv = T::one() / T::from_f64(plane as f64);
                    let mut da = vec![T::zero(); a.numel()];
                    for nc in 0..s.n * s.c {
                        let g = up[nc] * inv;
                        da[nc * plane..(nc + 1) * plane].fill(g);
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::ChannelAvg(a) => {
                if a.requires_grad() {
                    let s = a.shape();
                    let plane = s.h * s.w;
                    let inv = T::one() / T::from_f64(s.c as f64);
                    let mut da = vec![T::zero(); a.numel()];
                    for n in 0..s.n {
                        for c in 0..s.c {
                            for p in 0..plane {
                                da[(n * s.c + c) * plane + p] = up[n * plane + p] * inv;
                            }
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::ChannelMax { x, argmax } => {
                if x.requires_grad() {
                    let s = x.shape();
                    let plane = s.h * s.w;
                    let mut dx = vec![T::zero(); x.numel()];
                    for n in 0..s.n {
                        for p in 0..plane {
                            let c = argmax[n * plane + p] as usize;
                            dx[(n * s.c + c) * plane + p] = up[n * plane + p];
                        }
                    }
                    x.accumulate_grad(&dx);
                }
            }
            Op::MulSpatialGate { x, gate } => {
                let s = x.shape();
                let plane = s.h * s.w;
                if x.requires_grad() {
                    let mut dx = vec![T::zero(); x.numel()];
                    for n in 0..s.n {
                        let gsl = &gate.data()[n * plane..(n + 1) * plane];
                        for c in 0..s.c {
                            let base = (n * s.c + c) * plane;
                            for p in 0..plane {
                                dx[base + p] = up[base + p] * gsl[p];
                            }
                        }
                    }
                    x.accumulate_grad(&dx);
                }
                if gate.requires_grad() {
                    let mut dg = vec![T::zero(); gate.numel()];
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let base = (n * s.c + c) * plane;
                            for p in 0..plane {
                                dg[n * plane + p] =
                                    dg[n * plane + p] + up[base + p] * x.data()[base + p];
                            }
                        }
                    }
                    gate.accumulate_grad(&dg);
                }
            }
            Op::MulChannelGate { x, gate } => {
                let s = x.shape();
                let plane = s.h * s.w;
                if x.requires_grad() {
                    let mut dx = vec![T::zero(); x.numel()];
                    for nc in 0..s.n * s.c {
                        let g = gate.data()[nc];
                        for p in 0..plane {
                            dx[nc * plane + p] = up[nc * plane + p] * g;
                        }
                    }
                    x.accumulate_grad(&dx);
                }
                if gate.requires_grad() {
                    let mut dg = vec![T::zero(); gate.numel()];
                    for nc in 0..s.n * s.c {
                        let mut acc = T::zero();
                        for p in 0..plane {
                            acc = acc + up[nc * plane + p] * x.data()[nc * plane + p];
                        }
                        dg[nc] = acc;
                    }
                    gate.accumulate_grad(&dg);
                }
            }
            Op::Upsample2x(a) => {
                if a.requires_grad() {
                    let s = a.shape();
                    let (oh, ow) = (s.h * 2, s.w * 2);
                    let mut da = vec![T::zero(); a.numel()];
                    for nc in 0..s.n * s.c {
                        for i in 0..s.h {
                            for j in 0..s.w {
                                let mut acc = T::zero();
                                for di in 0..2 {
                                    for dj in 0..2 {
                                        acc = acc
                                            + up[(nc * oh + 2 * i + di) * ow + 2 * j + dj];
                                    }
                                }
                                da[(nc * s.h + i) * s.w + j] = acc;
                            }
                        }
                    }
                    a.accumulate_grad(&da);
                }
            }
            Op::GradMap { x, ix, iy, mag } => {
                if x.requires_grad() {
                    let s = x.shape();
                    let (h, w) = (s.h, s.w);
                    let plane = h * w;
                    let weights = luma_weights::<T>(s.c);
                    let mut dx = vec![T::zero(); x.numel()];
                    let mut dlum = vec![T::zero(); plane];
                    for n in 0..s.n {
                        dlum.fill(T::zero());
                        let base = n * plane;
                        for i in 0..h {
                            for j in 0..w {
                                let p = base + i * w + j;
                                let m = mag[p];
                                if m <= T::zero() {
                                    continue;
                                }
                                let u = up[p] / m;
                                let gi = u * ix[p];
                                let gj = u * iy[p];
                                let ip = (i + 1).min(h - 1);
                                let im = i.saturating_sub(1);
                                let jp = (j + 1).min(w - 1);
                                let jm = j.saturating_sub(1);
                                dlum[ip * w + j] = dlum[ip * w + j] + gi;
                                dlum[im * w + j] = dlum[im * w + j] - gi;
                                dlum[i * w + jp] = dlum[i * w + jp] + gj;
                                dlum[i * w + jm] = dlum[i * w + jm] - gj;
                            }
                        }
                        for (c, wc) in weights.iter().enumerate() {
                            let cbase = (n * s.c + c) * plane;
                            for p in 0..plane {
                                dx[cbase + p] = dlum[p] * *wc;
                            }
                        }
                    }
                    x.accumulate_grad(&dx);
                }
            }
        }
    }
}

fn luma_weights<T: Scalar>(channels: usize) -> Vec<T> {
    if channels == 3 {
        LUMA_WEIGHTS.iter().map(|w| T::from_f64(*w)).collect()
    } else {
        vec![T::from_f64(1.0 / channels as f64); channels]
    }
}

fn check_same_shape<T: Scalar>(
    ctx: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { ctx, left: a.shape(), right: b.shape() });
    }
    Ok(())
}

fn unary<T: Scalar>(
    a: &Tensor<T>,
    data: Vec<T>,
    shape: Shape,
    op: Op<T>,
) -> Tensor<T> {
    Tensor::from_op(shape, data, a.requires_grad(), op)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
    Ok(Tensor::from_op(
        a.shape(),
        data,
        a.requires_grad() || b.requires_grad(),
        Op::Add(a.clone(), b.clone()),
    ))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x - *y).collect();
    Ok(Tensor::from_op(
        a.shape(),
        data,
        a.requires_grad() || b.requires_grad(),
        Op::Sub(a.clone(), b.clone()),
    ))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
    Ok(Tensor::from_op(
        a.shape(),
        data,
        a.requires_grad() || b.requires_grad(),
        Op::Mul(a.clone(), b.clone()),
    ))
}

pub fn add_scalar<T: Scalar>(a: &Tensor<T>, k: T) -> Tensor<T> {
    let data = a.data().iter().map(|x| *x + k).collect();
    unary(a, data, a.shape(), Op::AddScalar(a.clone()))
}

pub fn mul_scalar<T: Scalar>(a: &Tensor<T>, k: T) -> Tensor<T> {
    let data = a.data().iter().map(|x| *x * k).collect();
    unary(a, data, a.shape(), Op::MulScalar(a.clone(), k))
}

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().map(|x| x.max(T::zero())).collect();
    unary(a, data, a.shape(), Op::Relu(a.clone()))
}

pub fn sigmoid<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .map(|x| T::one() / (T::one() + (-*x).exp()))
        .collect();
    unary(a, data, a.shape(), Op::Sigmoid(a.clone()))
}

pub fn sqrt<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().map(|x| x.sqrt()).collect();
    unary(a, data, a.shape(), Op::Sqrt(a.clone()))
}

pub fn abs<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().map(|x| x.abs()).collect();
    unary(a, data, a.shape(), Op::Abs(a.clone()))
}

pub fn sum<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let s: T = a.data().iter().copied().sum();
    unary(a, vec![s], Shape::scalar(), Op::Sum(a.clone()))
}

pub fn mean<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let s: T = a.data().iter().copied().sum();
    let m = s / T::from_f64(a.numel() as f64);
    unary(a, vec![m], Shape::scalar(), Op::Mean(a.clone()))
}

pub fn square<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    mul(a, a).expect("same tensor")
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(Error::ShapeMismatch { ctx: "concat_channels", left: sa, right: sb });
    }
    let shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let plane = sa.h * sa.w;
    let mut data = Vec::with_capacity(shape.numel());
    for n in 0..sa.n {
        data.extend_from_slice(&a.data()[n * sa.c * plane..(n + 1) * sa.c * plane]);
        data.extend_from_slice(&b.data()[n * sb.c * plane..(n + 1) * sb.c * plane]);
    }
    Ok(Tensor::from_op(
        shape,
        data,
        a.requires_grad() || b.requires_grad(),
        Op::ConcatChannels(a.clone(), b.clone()),
    ))
}

/// Grouped 2-D cross-correlation with zero padding.
/// weight is [out, in/groups, k, k]; bias, when present, is [1, out, 1, 1].
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = weight.shape();
    let (out_channels, kernel) = (ws.n, ws.h);
    if ws.h != ws.w {
        return Err(Error::InvalidConfig(format!("non-square kernel {}", ws)));
    }
    if out_channels % groups != 0 || xs.c % groups != 0 {
        return Err(Error::InvalidConfig(format!(
            "channels ({} in, {} out) not divisible by groups {}",
            xs.c, out_channels, groups
        )));
    }
    if ws.c != xs.c / groups {
        return Err(Error::ChannelMismatch {
            ctx: "conv2d",
            expected: ws.c * groups,
            got: xs.c,
        });
    }
    if xs.h + 2 * padding < kernel || xs.w + 2 * padding < kernel {
        return Err(Error::InvalidInput(format!(
            "conv2d: spatial dims {} too small for kernel {kernel} with padding {padding}",
            xs
        )));
    }
    if let Some(b) = bias {
        if b.numel() != out_channels {
            return Err(Error::ChannelMismatch {
                ctx: "conv2d bias",
                expected: out_channels,
                got: b.numel(),
            });
        }
    }
    let geom = ConvGeometry {
        in_channels: xs.c,
        out_channels,
        kernel,
        stride,
        padding,
        groups,
        in_h: xs.h,
        in_w: xs.w,
    };
    let (oh, ow) = geom.out_hw();
    let data = kernels::conv_forward(x.data(), weight.data(), bias.map(|b| b.data()), xs.n, &geom);
    let rg = x.requires_grad()
        || weight.requires_grad()
        || bias.map(|b| b.requires_grad()).unwrap_or(false);
    Ok(Tensor::from_op(
        Shape::new(xs.n, out_channels, oh, ow),
        data,
        rg,
        Op::Conv2d {
            x: x.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
            geom,
        },
    ))
}

/// conv2d with groups = channels: one k×k filter per channel.
pub fn depthwise_conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    conv2d(x, weight, bias, stride, padding, x.shape().c)
}

pub fn global_avg_pool<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let s = a.shape();
    let plane = s.h * s.w;
    let inv = T::one() / T::from_f64(plane as f64);
    let mut data = vec![T::zero(); s.n * s.c];
    for (nc, out) in data.iter_mut().enumerate() {
        let mut acc = T::zero();
        for v in &a.data()[nc * plane..(nc + 1) * plane] {
            acc = acc + *v;
        }
        *out = acc * inv;
    }
    unary(a, data, Shape::new(s.n, s.c, 1, 1), Op::GlobalAvgPool(a.clone()))
}

pub fn channel_avg<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let s = a.shape();
    let plane = s.h * s.w;
    let inv = T::one() / T::from_f64(s.c as f64);
    let mut data = vec![T::zero(); s.n * plane];
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * plane;
            for p in 0..plane {
                data[n * plane + p] = data[n * plane + p] + a.data()[base + p];
            }
        }
        for p in 0..plane {
            data[n * plane + p] = data[n * plane + p] * inv;
        }
    }
    unary(a, data, Shape::new(s.n, 1, s.h, s.w), Op::ChannelAvg(a.clone()))
}

/// Per-pixel max over channels; ties route the gradient to the lowest index.
pub fn channel_max<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let s = a.shape();
    let plane = s.h * s.w;
    let mut data = vec![T::zero(); s.n * plane];
    let mut argmax = vec![0u32; s.n * plane];
    for n in 0..s.n {
        for p in 0..plane {
            let mut best = a.data()[n * s.c * plane + p];
            let mut best_c = 0u32;
            for c in 1..s.c {
                let v = a.data()[(n * s.c + c) * plane + p];
                if v > best {
                    best = v;
                    best_c = c as u32;
                }
            }
            data[n * plane + p] = best;
            argmax[n * plane + p] = best_c;
        }
    }
    unary(
        a,
        data,
        Shape::new(s.n, 1, s.h, s.w),
        Op::ChannelMax { x: a.clone(), argmax },
    )
}

/// x[N,C,H,W] ⊙ gate[N,1,H,W], gate broadcast over channels.
pub fn mul_spatial_gate<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let (sx, sg) = (x.shape(), gate.shape());
    if sg.c != 1 || sg.n != sx.n || sg.h != sx.h || sg.w != sx.w {
        return Err(Error::ShapeMismatch { ctx: "mul_spatial_gate", left: sx, right: sg });
    }
    let plane = sx.h * sx.w;
    let mut data = vec![T::zero(); sx.numel()];
    for n in 0..sx.n {
        let gsl = &gate.data()[n * plane..(n + 1) * plane];
        for c in 0..sx.c {
            let base = (n * sx.c + c) * plane;
            for p in 0..plane {
                data[base + p] = x.data()[base + p] * gsl[p];
            }
        }
    }
    Ok(Tensor::from_op(
        sx,
        data,
        x.requires_grad() || gate.requires_grad(),
        Op::MulSpatialGate { x: x.clone(), gate: gate.clone() },
    ))
}

/// x[N,C,H,W] ⊙ gate[N,C,1,1], gate broadcast over space.
pub fn mul_channel_gate<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let (sx, sg) = (x.shape(), gate.shape());
    if sg.h != 1 || sg.w != 1 || sg.n != sx.n || sg.c != sx.c {
        return Err(Error::ShapeMismatch { ctx: "mul_channel_gate", left: sx, right: sg });
    }
    let plane = sx.h * sx.w;
    let mut data = vec![T::zero(); sx.numel()];
    for nc in 0..sx.n * sx.c {
        let g = gate.data()[nc];
        for p in 0..plane {
            data[nc * plane + p] = x.data()[nc * plane + p] * g;
        }
    }
    Ok(Tensor::from_op(
        sx,
        data,
        x.requires_grad() || gate.requires_grad(),
        Op::MulChannelGate { x: x.clone(), gate: gate.clone() },
    ))
}

/// Nearest-neighbor 2× upsampling.
pub fn upsample2x_nearest<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let s = a.shape();
    let (oh, ow) = (s.h * 2, s.w * 2);
    let mut data = vec![T::zero(); s.n * s.c * oh * ow];
    for nc in 0..s.n * s.c {
        for i in 0..s.h {
            for j in 0..s.w {
                let v = a.data()[(nc * s.h + i) * s.w + j];
                for di in 0..2 {
                    for dj in 0..2 {
                        data[(nc * oh + 2 * i + di) * ow + 2 * j + dj] = v;
                    }
                }
            }
        }
    }
    unary(a, data, Shape::new(s.n, s.c, oh, ow), Op::Upsample2x(a.clone()))
}

/// Per-pixel L2 magnitude of central differences of the luminance image,
/// with clamped-index (replicate) borders. Output is [N,1,H,W]; the op is
/// differentiable so gradient-space losses reach the input.
pub fn grad_map<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let s = a.shape();
    let (h, w) = (s.h, s.w);
    let plane = h * w;
    let weights = luma_weights::<T>(s.c);
    let mut ix = vec![T::zero(); s.n * plane];
    let mut iy = vec![T::zero(); s.n * plane];
    let mut mag = vec![T::zero(); s.n * plane];
    for n in 0..s.n {
        let base = n * plane;
        for i in 0..h {
            for j in 0..w {
                let ip = (i + 1).min(h - 1);
                let im = i.saturating_sub(1);
                let jp = (j + 1).min(w - 1);
                let jm = j.saturating_sub(1);
                // Channel difference first, weighting second: a constant
                // intensity offset cancels before any rounding happens.
                let mut di = T::zero();
                let mut dj = T::zero();
                for (c, wc) in weights.iter().enumerate() {
                    let pl = &a.data()[(n * s.c + c) * plane..(n * s.c + c + 1) * plane];
                    di = di + (pl[ip * w + j] - pl[im * w + j]) * *wc;
                    dj = dj + (pl[i * w + jp] - pl[i * w + jm]) * *wc;
                }
                let p = base + i * w + j;
                ix[p] = di;
                iy[p] = dj;
                mag[p] = (di * di + dj * dj).sqrt();
            }
        }
    }
    unary(
        a,
        mag.clone(),
        Shape::new(s.n, 1, h, w),
        Op::GradMap { x: a.clone(), ix, iy, mag },
    )
}

/// Inference-only clamp to [0,1]; not recorded on the tape.
pub fn clamp01<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(
        a.shape(),
        a.data()
            .iter()
            .map(|v| v.max(T::zero()).min(T::one()))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero_is_half() {
        let t = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        let y = sigmoid(&t);
        for v in y.data() {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn add_zero_is_identity() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, -2.0, 3.5, 0.0]);
        let z = Tensor::zeros(x.shape());
        let y = add(&x, &z).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn mean_of_squares_gradient() {
        // d/dx mean(x²) = x/2 at x=[1,2,3,4]
        let x = Tensor::<f64>::param(Shape::new(1, 1, 1, 4), vec![1.0, 2.0, 3.0, 4.0]);
        let loss = mean(&square(&x));
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.5, 1.0, 1.5, 2.0]);
    }

    #[test]
    fn linear_map_backward() {
        // loss = sum(w·x) → w.grad = x
        let w = Tensor::<f64>::param(Shape::new(1, 1, 1, 3), vec![2.0, -1.0, 0.5]);
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![3.0, 4.0, 5.0]);
        let loss = sum(&mul(&w, &x).unwrap());
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![3.0, 4.0, 5.0]);
    }

    #[test]
    fn reuse_accumulates_k_fold() {
        let x = Tensor::<f64>::param(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]);
        let one = sum(&x);
        let three = add(&add(&sum(&x), &sum(&x)).unwrap(), &sum(&x)).unwrap();
        one.backward().unwrap();
        let g1 = x.grad().unwrap();
        x.zero_grad();
        three.backward().unwrap();
        let g3 = x.grad().unwrap();
        for (a, b) in g1.iter().zip(&g3) {
            assert_eq!(*b, 3.0 * *a);
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let a = Tensor::<f32>::zeros(Shape::new(1, 2, 3, 3));
        let b = Tensor::<f32>::zeros(Shape::new(1, 2, 4, 4));
        let err = add(&a, &b).unwrap_err().to_string();
        assert!(err.contains("[1,2,3,3]") && err.contains("[1,2,4,4]"), "{err}");
    }

    #[test]
    fn channel_max_tie_routes_to_lowest_index() {
        let x = Tensor::<f64>::param(Shape::new(1, 2, 1, 1), vec![5.0, 5.0]);
        let loss = sum(&channel_max(&x));
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn channel_max_picks_maximum() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 3, 1, 1), vec![1.0, 5.0, 3.0]);
        assert_eq!(channel_max(&x).data(), &[5.0]);
    }

    #[test]
    fn upsample_nearest_layout() {
        let x = Tensor::<f64>::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let y = upsample2x_nearest(&x);
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn identity_1x1_conv() {
        // one-hot 1×1 kernels copy channels through
        let x = Tensor::<f64>::from_vec(
            Shape::new(1, 2, 2, 2),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        );
        let w = Tensor::from_vec(Shape::new(2, 2, 1, 1), vec![1.0, 0.0, 0.0, 1.0]);
        let y = conv2d(&x, &w, None, 1, 0, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn box_sum_interior_pixel() {
        let x = Tensor::<f64>::full(Shape::new(1, 1, 5, 5), 2.0);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = conv2d(&x, &w, None, 1, 1, 1).unwrap();
        let s = y.shape();
        assert_eq!((y.data()[s.idx(0, 0, 2, 2)] - 18.0).abs() < 1e-12, true);
    }

    #[test]
    fn depthwise_identity_kernels() {
        let x = Tensor::<f64>::from_vec(
            Shape::new(1, 2, 2, 2),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        );
        // 3×3 kernels with center 1
        let mut wdata = vec![0.0; 2 * 9];
        wdata[4] = 1.0;
        wdata[13] = 1.0;
        let w = Tensor::from_vec(Shape::new(2, 1, 3, 3), wdata);
        let y = depthwise_conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn grad_map_of_constant_is_zero() {
        let x = Tensor::<f64>::full(Shape::new(1, 3, 4, 4), 0.7);
        let g = grad_map(&x);
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grad_map_vertical_ramp_interior() {
        // I(i,j) = i → central difference 2 in rows, 0 in cols
        let h = 6;
        let data: Vec<f64> = (0..h).flat_map(|i| vec![i as f64; h]).collect();
        let x = Tensor::from_vec(Shape::new(1, 1, h, h), data);
        let g = grad_map(&x);
        let s = g.shape();
        for i in 1..h - 1 {
            for j in 0..h {
                assert!((g.data()[s.idx(0, 0, i, j)] - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_map_constant_offset_invariance() {
        // dyadic values keep the additions exact, so the invariance is bitwise
        let vals: Vec<f64> = (0..48).map(|i| ((i * 37 % 19) as f64) * 0.0625).collect();
        let x = Tensor::from_vec(Shape::new(1, 3, 4, 4), vals.clone());
        let y = Tensor::from_vec(Shape::new(1, 3, 4, 4), vals.iter().map(|v| v + 0.25).collect());
        assert_eq!(grad_map(&x).data(), grad_map(&y).data());
    }
}
