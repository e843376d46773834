//! Convolution compute kernels: im2col + gemm, direct col2im for the input
//! gradient. The parallel path splits over the batch dimension (disjoint
//! outputs, fixed per-element reduction order) so results are bitwise equal
//! to the sequential path.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn group_in(&self) -> usize {
        self.in_channels / self.groups
    }

    fn group_out(&self) -> usize {
        self.out_channels / self.groups
    }
}

/// Unfold one image's group slice into a [cin_g·k·k, oh·ow] patch matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, col: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let (h, w, k, s, p) = (g.in_h, g.in_w, g.kernel, g.stride, g.padding);
    let cin = x.len() / (h * w);
    debug_assert_eq!(col.len(), cin * k * k * oh * ow);
    let mut row = 0;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + kh) as isize - p as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * s + kw) as isize - p as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add a patch matrix back onto an image slice (adjoint of im2col).
fn col2im_add<T: Scalar>(col: &[T], g: &ConvGeometry, x: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let (h, w, k, s, p) = (g.in_h, g.in_w, g.kernel, g.stride, g.padding);
    let cin = x.len() / (h * w);
    let mut row = 0;
    for c in 0..cin {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for kh in 0..k {
            for kw in 0..k {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * s + kh) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * s + kw) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn forward_one<T: Scalar>(
    x_img: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
    col: &mut Vec<T>,
    out_img: &mut [T],
) {
    let (oh, ow) = g.out_hw();
    let l = oh * ow;
    let (cin_g, cout_g) = (g.group_in(), g.group_out());
    let kk = g.kernel * g.kernel;
    col.resize(cin_g * kk * l, T::zero());
    for grp in 0..g.groups {
        let xs = &x_img[grp * cin_g * g.in_h * g.in_w..(grp + 1) * cin_g * g.in_h * g.in_w];
        im2col(xs, g, col);
        let wg = &weight[grp * cout_g * cin_g * kk..(grp + 1) * cout_g * cin_g * kk];
        let og = &mut out_img[grp * cout_g * l..(grp + 1) * cout_g * l];
        T::gemm(cout_g, cin_g * kk, l, wg, col, og);
    }
    if let Some(b) = bias {
        for oc in 0..g.out_channels {
            let plane = &mut out_img[oc * l..(oc + 1) * l];
            for v in plane.iter_mut() {
                *v = *v + b[oc];
            }
        }
    }
}

pub fn conv_forward_seq<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    batch: usize,
    g: &ConvGeometry,
) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let in_sz = g.in_channels * g.in_h * g.in_w;
    let out_sz = g.out_channels * oh * ow;
    let mut out = vec![T::zero(); batch * out_sz];
    let mut col = Vec::new();
    for n in 0..batch {
        forward_one(
            &x[n * in_sz..(n + 1) * in_sz],
            weight,
            bias,
            g,
            &mut col,
            &mut out[n * out_sz..(n + 1) * out_sz],
        );
    }
    out
}

#[cfg(feature = "parallel")]
pub fn conv_forward_par<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    batch: usize,
    g: &ConvGeometry,
) -> Vec<T> {
    use rayon::prelude::*;
    let (oh, ow) = g.out_hw();
    let in_sz = g.in_channels * g.in_h * g.in_w;
    let out_sz = g.out_channels * oh * ow;
    let mut out = vec![T::zero(); batch * out_sz];
    out.par_chunks_mut(out_sz).enumerate().for_each(|(n, out_img)| {
        let mut col = Vec::new();
        forward_one(&x[n * in_sz..(n + 1) * in_sz], weight, bias, g, &mut col, out_img);
    });
    out
}

pub fn conv_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    batch: usize,
    g: &ConvGeometry,
) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        conv_forward_par(x, weight, bias, batch, g)
    }
    #[cfg(not(feature = "parallel"))]
    {
        conv_forward_seq(x, weight, bias, batch, g)
    }
}

fn input_grad_one<T: Scalar>(
    dy_img: &[T],
    weight: &[T],
    g: &ConvGeometry,
    dcol: &mut Vec<T>,
    dx_img: &mut [T],
) {
    let (oh, ow) = g.out_hw();
    let l = oh * ow;
    let (cin_g, cout_g) = (g.group_in(), g.group_out());
    let kk = g.kernel * g.kernel;
    dcol.resize(cin_g * kk * l, T::zero());
    for grp in 0..g.groups {
        let wg = &weight[grp * cout_g * cin_g * kk..(grp + 1) * cout_g * cin_g * kk];
        let dyg = &dy_img[grp * cout_g * l..(grp + 1) * cout_g * l];
        // dcol = Wᵀ · dY  ([cin_g·k², cout_g] × [cout_g, l])
        T::gemm_strided(
            cin_g * kk,
            cout_g,
            l,
            wg,
            1,
            (cin_g * kk) as isize,
            dyg,
            l as isize,
            1,
            dcol,
        );
        let dxs =
            &mut dx_img[grp * cin_g * g.in_h * g.in_w..(grp + 1) * cin_g * g.in_h * g.in_w];
        col2im_add(dcol, g, dxs);
    }
}

pub fn conv_input_grad_seq<T: Scalar>(
    dy: &[T],
    weight: &[T],
    batch: usize,
    g: &ConvGeometry,
) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let in_sz = g.in_channels * g.in_h * g.in_w;
    let out_sz = g.out_channels * oh * ow;
    let mut dx = vec![T::zero(); batch * in_sz];
    let mut dcol = Vec::new();
    for n in 0..batch {
        input_grad_one(
            &dy[n * out_sz..(n + 1) * out_sz],
            weight,
            g,
            &mut dcol,
            &mut dx[n * in_sz..(n + 1) * in_sz],
        );
    }
    dx
}

#[cfg(feature = "parallel")]
pub fn conv_input_grad_par<T: Scalar>(
    dy: &[T],
    weight: &[T],
    batch: usize,
    g: &ConvGeometry,
) -> Vec<T> {
    use rayon::prelude::*;
    let (oh, ow) = g.out_hw();
    let in_sz = g.in_channels * g.in_h * g.in_w;
    let out_sz = g.out_channels * oh * ow;
    let mut dx = vec![T::zero(); batch * in_sz];
    dx.par_chunks_mut(in_sz).enumerate().for_each(|(n, dx_img)| {
        let mut dcol = Vec::new();
        input_grad_one(&dy[n * out_sz..(n + 1) * out_sz], weight, g, &mut dcol, dx_img);
    });
    dx
}

pub fn conv_input_grad<T: Scalar>(
    dy: &[T],
    weight: &[T],
    batch: usize,
    g: &ConvGeometry,
) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        conv_input_grad_par(dy, weight, batch, g)
    }
    #[cfg(not(feature = "parallel"))]
    {
        conv_input_grad_seq(dy, weight, batch, g)
    }
}

fn weight_grad_one<T: Scalar>(
    x_img: &[T],
    dy_img: &[T],
    g: &ConvGeometry,
    col: &mut Vec<T>,
    dw_img: &mut [T],
) {
    let (oh, ow) = g.out_hw();
    let l = oh * ow;
    let (cin_g, cout_g) = (g.group_in(), g.group_out());
    let kk = g.kernel * g.kernel;
    col.resize(cin_g * kk * l, T::zero());
    for grp in 0..g.groups {
        let xs = &x_img[grp * cin_g * g.in_h * g.in_w..(grp + 1) * cin_g * g.in_h * g.in_w];
        im2col(xs, g, col);
        let dyg = &dy_img[grp * cout_g * l..(grp + 1) * cout_g * l];
        // dW = dY · colᵀ  ([cout_g, l] × [l, cin_g·k²])
        T::gemm_strided(
            cout_g,
            l,
            cin_g * kk,
            dyg,
            l as isize,
            1,
            col,
            1,
            l as isize,
            &mut dw_img[grp * cout_g * cin_g * kk..(grp + 1) * cout_g * cin_g * kk],
        );
    }
}

/// dW summed over the batch. Per-image partials are computed independently
/// (in parallel when enabled) and reduced in batch order, keeping the result
/// identical to the sequential path.
pub fn conv_weight_grad<T: Scalar>(
    x: &[T],
    dy: &[T],
    batch: usize,
    g: &ConvGeometry,
) -> Vec<T> {
    let partials = weight_grad_partials(x, dy, batch, g);
    reduce_partials(partials, g)
}

pub fn conv_weight_grad_seq<T: Scalar>(
    x: &[T],
    dy: &[T],
    batch: usize,
    g: &ConvGeometry,
) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let in_sz = g.in_channels * g.in_h * g.in_w;
    let out_sz = g.out_channels * oh * ow;
    let w_sz = g.out_channels * g.group_in() * g.kernel * g.kernel;
    let mut col = Vec::new();
    let partials: Vec<Vec<T>> = (0..batch)
        .map(|n| {
            let mut dw = vec![T::zero(); w_sz];
            weight_grad_one(
                &x[n * in_sz..(n + 1) * in_sz],
                &dy[n * out_sz..(n + 1) * out_sz],
                g,
                &mut col,
                &mut dw,
            );
            dw
        })
        .collect();
    reduce_partials(partials, g)
}

fn weight_grad_partials<T: Scalar>(
    x: &[T],
    dy: &[T],
    batch: usize,
    g: &ConvGeometry,
) -> Vec<Vec<T>> {
    let (oh, ow) = g.out_hw();
    let in_sz = g.in_channels * g.in_h * g.in_w;
    let out_sz = g.out_channels * oh * ow;
    let w_sz = g.out_channels * g.group_in() * g.kernel * g.kernel;
    let one = |n: usize| {
        let mut col = Vec::new();
        let mut dw = vec![T::zero(); w_sz];
        weight_grad_one(
            &x[n * in_sz..(n + 1) * in_sz],
            &dy[n * out_sz..(n + 1) * out_sz],
            g,
            &mut col,
            &mut dw,
        );
        dw
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..batch).into_par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..batch).map(one).collect()
    }
}

fn reduce_partials<T: Scalar>(partials: Vec<Vec<T>>, g: &ConvGeometry) -> Vec<T> {
    let w_sz = g.out_channels * g.group_in() * g.kernel * g.kernel;
    let mut dw = vec![T::zero(); w_sz];
    for p in partials {
        for (d, v) in dw.iter_mut().zip(&p) {
            *d = *d + *v;
        }
    }
    dw
}

pub fn conv_bias_grad<T: Scalar>(dy: &[T], batch: usize, g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let l = oh * ow;
    let mut db = vec![T::zero(); g.out_channels];
    for n in 0..batch {
        for oc in 0..g.out_channels {
            let plane = &dy[(n * g.out_channels + oc) * l..(n * g.out_channels + oc + 1) * l];
            let mut acc = T::zero();
            for v in plane {
                acc = acc + *v;
            }
            db[oc] = db[oc] + acc;
        }
    }
    db
}
