//! Forward and adjoint kernels shared by the tape ops and the plain API.

use rustfft::num_complex::Complex;

use crate::error::{ensure, Result};
use crate::scalar::{FftScalar, Scalar};
use crate::tensor::Tensor;

/// Mirror index about the edge row (edge row itself not duplicated).
/// A length-1 axis has no mirror partner, so it replicates.
#[inline]
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= len as isize {
        r = period - r;
    }
    r as usize
}

#[inline]
pub fn wrap_index(i: isize, len: usize) -> usize {
    i.rem_euclid(len as isize) as usize
}

pub fn check_pad(h: usize, w: usize, pad_h: usize, pad_w: usize) -> Result<()> {
    ensure!(h >= 1 && w >= 1, Precondition, "empty spatial dims {h}x{w}");
    ensure!(
        pad_h < h || h == 1,
        Precondition,
        "reflection pad {pad_h} needs at least {} rows, map has {h}",
        pad_h + 1
    );
    ensure!(
        pad_w <= w,
        Precondition,
        "circular pad {pad_w} exceeds width {w}"
    );
    Ok(())
}

pub fn spherical_pad<T: Scalar>(x: &Tensor<T>, pad_h: usize, pad_w: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    check_pad(h, w, pad_h, pad_w)?;
    let (hp, wp) = (h + 2 * pad_h, w + 2 * pad_w);
    let mut out = Vec::with_capacity(n * c * hp * wp);
    for plane in x.data().chunks_exact(h * w) {
        for yo in 0..hp {
            let ys = reflect_index(yo as isize - pad_h as isize, h);
            let row = &plane[ys * w..(ys + 1) * w];
            for xo in 0..wp {
                out.push(row[wrap_index(xo as isize - pad_w as isize, w)]);
            }
        }
    }
    Tensor::new([n, c, hp, wp], out)
}

/// Geometry of a spherically padded convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeom {
    pub fn same(kernel: usize, dilation: usize) -> Self {
        let p = dilation * (kernel / 2);
        Self {
            kernel,
            stride: 1,
            dilation,
            pad_h: p,
            pad_w: p,
        }
    }

    /// Strided conv whose output is `ceil(in / stride)` for odd kernels and
    /// `in / stride` for the k4/s2 discriminator convs.
    pub fn strided(kernel: usize, stride: usize) -> Self {
        let p = (kernel - 1) / 2;
        Self {
            kernel,
            stride,
            dilation: 1,
            pad_h: p,
            pad_w: p,
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        check_pad(h, w, self.pad_h, self.pad_w)?;
        let span = self.dilation * (self.kernel - 1) + 1;
        ensure!(
            h + 2 * self.pad_h >= span && w + 2 * self.pad_w >= span,
            Config,
            "kernel span {span} larger than padded input {}x{}",
            h + 2 * self.pad_h,
            w + 2 * self.pad_w
        );
        Ok((
            (h + 2 * self.pad_h - span) / self.stride + 1,
            (w + 2 * self.pad_w - span) / self.stride + 1,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }

    /// Source index within an input plane for every (tap, output pixel).
    fn gather_table(&self, h: usize, w: usize, ho: usize, wo: usize) -> Vec<u32> {
        let k = self.kernel;
        let mut table = Vec::with_capacity(k * k * ho * wo);
        for ki in 0..k {
            for kj in 0..k {
                for oy in 0..ho {
                    let yi = (oy * self.stride + ki * self.dilation) as isize - self.pad_h as isize;
                    let ys = reflect_index(yi, h);
                    for ox in 0..wo {
                        let xi =
                            (ox * self.stride + kj * self.dilation) as isize - self.pad_w as isize;
                        table.push((ys * w + wrap_index(xi, w)) as u32);
                    }
                }
            }
        }
        table
    }
}

fn im2col<T: Scalar>(plane_stack: &[T], cin: usize, hw: usize, table: &[u32], cols: &mut [T]) {
    let taps_len = table.len();
    for c in 0..cin {
        let src = &plane_stack[c * hw..(c + 1) * hw];
        let dst = &mut cols[c * taps_len..(c + 1) * taps_len];
        for (d, &t) in dst.iter_mut().zip(table) {
            *d = src[t as usize];
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], cin: usize, hw: usize, table: &[u32], grad: &mut [T]) {
    let taps_len = table.len();
    for c in 0..cin {
        let src = &cols[c * taps_len..(c + 1) * taps_len];
        let dst = &mut grad[c * hw..(c + 1) * hw];
        for (&g, &t) in src.iter().zip(table) {
            dst[t as usize] += g;
        }
    }
}

/// `y = W * x (+ b)` with `W: [cout, cin, k, k]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Result<Tensor<T>> {
    let [n, cin, h, w] = x.shape();
    let [cout, wcin, kh, kw] = weight.shape();
    ensure!(
        wcin == cin && kh == geom.kernel && kw == geom.kernel,
        Config,
        "conv weight {:?} incompatible with input channels {cin} / kernel {}",
        weight.shape(),
        geom.kernel
    );
    let (ho, wo) = geom.output_dims(h, w)?;
    let kk = geom.kernel * geom.kernel;
    let ckk = cin * kk;
    let p = ho * wo;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    let table = (!geom.is_pointwise()).then(|| geom.gather_table(h, w, ho, wo));
    let mut cols = vec![<T as Scalar>::zero(); if table.is_some() { ckk * p } else { 0 }];
    for b in 0..n {
        let xs = x.sample_data(b);
        let cols_ref: &[T] = match &table {
            Some(t) => {
                im2col(xs, cin, h * w, t, &mut cols);
                &cols
            }
            None => xs,
        };
        let ys = &mut out.data_mut()[b * cout * p..(b + 1) * cout * p];
        T::gemm(
            cout,
            ckk,
            p,
            <T as Scalar>::one(),
            weight.data(),
            ckk as isize,
            1,
            cols_ref,
            p as isize,
            1,
            <T as Scalar>::zero(),
            ys,
            p as isize,
            1,
        );
        if let Some(bias) = bias {
            for (co, row) in ys.chunks_exact_mut(p).enumerate() {
                let bv = bias.data()[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeom,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let [n, cin, h, w] = x.shape();
    let [cout, _, _, _] = weight.shape();
    let [_, _, ho, wo] = grad_out.shape();
    let kk = geom.kernel * geom.kernel;
    let ckk = cin * kk;
    let p = ho * wo;
    let table = (!geom.is_pointwise()).then(|| geom.gather_table(h, w, ho, wo));
    let mut cols = vec![<T as Scalar>::zero(); if table.is_some() { ckk * p } else { 0 }];
    let mut dcols = vec![<T as Scalar>::zero(); if need_input { ckk * p } else { 0 }];
    let mut gx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut gw = need_weight.then(|| Tensor::zeros(weight.shape()));
    let mut gb = need_bias.then(|| Tensor::zeros([1, cout, 1, 1]));
    for b in 0..n {
        let go = grad_out.sample_data(b);
        if let Some(gw) = gw.as_mut() {
            let xs = x.sample_data(b);
            let cols_ref: &[T] = match &table {
                Some(t) => {
                    im2col(xs, cin, h * w, t, &mut cols);
                    &cols
                }
                None => xs,
            };
            // gw += go [cout x p] * cols^T [p x ckk]
            T::gemm(
                cout,
                p,
                ckk,
                <T as Scalar>::one(),
                go,
                p as isize,
                1,
                cols_ref,
                1,
                p as isize,
                <T as Scalar>::one(),
                gw.data_mut(),
                ckk as isize,
                1,
            );
        }
        if let Some(gb) = gb.as_mut() {
            for (co, row) in go.chunks_exact(p).enumerate() {
                gb.data_mut()[co] += row.iter().fold(<T as Scalar>::zero(), |a, &v| a + v);
            }
        }
        if let Some(gx) = gx.as_mut() {
            let gxs = &mut gx.data_mut()[b * cin * h * w..(b + 1) * cin * h * w];
            match &table {
                Some(t) => {
                    // dcols = W^T [ckk x cout] * go [cout x p]
                    T::gemm(
                        ckk,
                        cout,
                        p,
                        <T as Scalar>::one(),
                        weight.data(),
                        1,
                        ckk as isize,
                        go,
                        p as isize,
                        1,
                        <T as Scalar>::zero(),
                        &mut dcols,
                        p as isize,
                        1,
                    );
                    col2im(&dcols, cin, h * w, t, gxs);
                }
                None => {
                    T::gemm(
                        ckk,
                        cout,
                        p,
                        <T as Scalar>::one(),
                        weight.data(),
                        1,
                        ckk as isize,
                        go,
                        p as isize,
                        1,
                        <T as Scalar>::zero(),
                        gxs,
                        p as isize,
                        1,
                    );
                }
            }
        }
    }
    (gx, gw, gb)
}

pub const NORM_EPS: f64 = 1e-5;

/// Normalization over channels at each spatial site; returns (output, normalized, rstd).
pub fn layer_norm_channels<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let [n, c, h, w] = x.shape();
    let p = h * w;
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut rstds = Vec::with_capacity(n * p);
    let inv_c = <T as Scalar>::from_f64(1.0 / c as f64);
    let eps = <T as Scalar>::from_f64(NORM_EPS);
    for b in 0..n {
        let xs = x.sample_data(b);
        let base = b * c * p;
        for s in 0..p {
            let mut mean = <T as Scalar>::zero();
            for ch in 0..c {
                mean += xs[ch * p + s];
            }
            mean *= inv_c;
            let mut var = <T as Scalar>::zero();
            for ch in 0..c {
                let d = xs[ch * p + s] - mean;
                var += d * d;
            }
            var *= inv_c;
            let rstd = <T as Scalar>::one() / (var + eps).sqrt();
            rstds.push(rstd);
            for ch in 0..c {
                let v = (xs[ch * p + s] - mean) * rstd;
                xhat.data_mut()[base + ch * p + s] = v;
                out.data_mut()[base + ch * p + s] = v * gain.data()[ch];
            }
        }
    }
    (out, xhat, rstds)
}

pub fn layer_norm_channels_backward<T: Scalar>(
    xhat: &Tensor<T>,
    rstds: &[T],
    gain: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = xhat.shape();
    let p = h * w;
    let mut gx = Tensor::zeros(xhat.shape());
    let mut gg = Tensor::zeros(gain.shape());
    let inv_c = <T as Scalar>::from_f64(1.0 / c as f64);
    for b in 0..n {
        let base = b * c * p;
        for s in 0..p {
            let rstd = rstds[b * p + s];
            let mut m1 = <T as Scalar>::zero();
            let mut m2 = <T as Scalar>::zero();
            for ch in 0..c {
                let i = base + ch * p + s;
                let go = grad_out.data()[i];
                let xh = xhat.data()[i];
                gg.data_mut()[ch] += go * xh;
                let d = go * gain.data()[ch];
                m1 += d;
                m2 += d * xh;
            }
            m1 *= inv_c;
            m2 *= inv_c;
            for ch in 0..c {
                let i = base + ch * p + s;
                let d = grad_out.data()[i] * gain.data()[ch];
                gx.data_mut()[i] = rstd * (d - m1 - xhat.data()[i] * m2);
            }
        }
    }
    (gx, gg)
}

/// Per-(sample, channel) normalization over the spatial plane, no affine.
pub fn instance_norm<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let p = x.plane();
    let inv_p = <T as Scalar>::from_f64(1.0 / p as f64);
    let eps = <T as Scalar>::from_f64(NORM_EPS);
    let mut out = Tensor::zeros(x.shape());
    let mut rstds = Vec::new();
    for (src, dst) in x
        .data()
        .chunks_exact(p)
        .zip(out.data_mut().chunks_exact_mut(p))
    {
        let mean = src.iter().fold(<T as Scalar>::zero(), |a, &v| a + v) * inv_p;
        let var = src
            .iter()
            .fold(<T as Scalar>::zero(), |a, &v| a + (v - mean) * (v - mean))
            * inv_p;
        let rstd = <T as Scalar>::one() / (var + eps).sqrt();
        rstds.push(rstd);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * rstd;
        }
    }
    (out, rstds)
}

pub fn instance_norm_backward<T: Scalar>(
    xhat: &Tensor<T>,
    rstds: &[T],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let p = xhat.plane();
    let inv_p = <T as Scalar>::from_f64(1.0 / p as f64);
    let mut gx = Tensor::zeros(xhat.shape());
    for (((xh, go), gxs), &rstd) in xhat
        .data()
        .chunks_exact(p)
        .zip(grad_out.data().chunks_exact(p))
        .zip(gx.data_mut().chunks_exact_mut(p))
        .zip(rstds)
    {
        let m1 = go.iter().fold(<T as Scalar>::zero(), |a, &v| a + v) * inv_p;
        let m2 = go
            .iter()
            .zip(xh)
            .fold(<T as Scalar>::zero(), |a, (&g, &x)| a + g * x)
            * inv_p;
        for ((d, &g), &x) in gxs.iter_mut().zip(go).zip(xh) {
            *d = rstd * (g - m1 - x * m2);
        }
    }
    gx
}

pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for plane in x.data().chunks_exact(h * w) {
        for y in 0..ho {
            let row = &plane[(y / factor) * w..(y / factor + 1) * w];
            for xo in 0..wo {
                out.push(row[xo / factor]);
            }
        }
    }
    Tensor::new([n, c, ho, wo], out).expect("upsample shape")
}

pub fn upsample_nearest_backward<T: Scalar>(g: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, c, ho, wo] = g.shape();
    let (h, w) = (ho / factor, wo / factor);
    let mut out = Tensor::zeros([n, c, h, w]);
    for (src, dst) in g
        .data()
        .chunks_exact(ho * wo)
        .zip(out.data_mut().chunks_exact_mut(h * w))
    {
        for y in 0..ho {
            for x in 0..wo {
                dst[(y / factor) * w + x / factor] += src[y * wo + x];
            }
        }
    }
    out
}

/// Spatial axis selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Height,
    Width,
}

impl Axis {
    pub fn len_of(self, shape: [usize; 4]) -> usize {
        match self {
            Axis::Height => shape[2],
            Axis::Width => shape[3],
        }
    }

    fn with_len(self, shape: [usize; 4], len: usize) -> [usize; 4] {
        let mut s = shape;
        match self {
            Axis::Height => s[2] = len,
            Axis::Width => s[3] = len,
        }
        s
    }
}

/// Visit every 1-D line along `axis` of a `[c, h, w]` block: yields (start, stride).
fn lines(axis: Axis, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let (count_outer, count_inner, outer_step, inner_step, stride) = match axis {
        Axis::Width => (c * h, 1, w, 0, 1),
        Axis::Height => (c, w, h * w, 1, w),
    };
    (0..count_outer)
        .flat_map(move |o| (0..count_inner).map(move |i| (o * outer_step + i * inner_step, stride)))
}

/// Orthonormal real FFT along `axis`; output stacks real parts in the first
/// `c` channels and imaginary parts in the next `c`.
pub fn rfft_axis<T: FftScalar>(x: &Tensor<T>, axis: Axis) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let len = axis.len_of(x.shape());
    let half = len / 2 + 1;
    let oshape = axis.with_len([n, 2 * c, h, w], half);
    let (oh, ow) = (oshape[2], oshape[3]);
    let plan = T::fft_plan(len, false);
    let scale = <T as Scalar>::from_f64(1.0 / (len as f64).sqrt());
    let mut out = Tensor::zeros(oshape);
    let mut buf = vec![Complex::new(<T as Scalar>::zero(), <T as Scalar>::zero()); len];
    let ostride_c = oh * ow;
    for b in 0..n {
        let xs = x.sample_data(b);
        let os = &mut out.data_mut()[b * 2 * c * oh * ow..(b + 1) * 2 * c * oh * ow];
        for ((start, stride), (ostart, ostride)) in lines(axis, c, h, w).zip(lines(axis, c, oh, ow)) {
            for (i, v) in buf.iter_mut().enumerate() {
                *v = Complex::new(xs[start + i * stride], <T as Scalar>::zero());
            }
            plan.process(&mut buf);
            for k in 0..half {
                os[ostart + k * ostride] = buf[k].re * scale;
                os[c * ostride_c + ostart + k * ostride] = buf[k].im * scale;
            }
        }
    }
    out
}

pub fn rfft_axis_backward<T: FftScalar>(g: &Tensor<T>, axis: Axis, len: usize) -> Tensor<T> {
    let [n, c2, gh, gw] = g.shape();
    let c = c2 / 2;
    let half = len / 2 + 1;
    let xshape = axis.with_len([n, c, gh, gw], len);
    let (h, w) = (xshape[2], xshape[3]);
    let plan = T::fft_plan(len, true);
    let scale = <T as Scalar>::from_f64(1.0 / (len as f64).sqrt());
    let mut out = Tensor::zeros(xshape);
    let mut buf = vec![Complex::new(<T as Scalar>::zero(), <T as Scalar>::zero()); len];
    let gstride_c = gh * gw;
    for b in 0..n {
        let gs = g.sample_data(b);
        let xs = &mut out.data_mut()[b * c * h * w..(b + 1) * c * h * w];
        for ((start, stride), (gstart, gstride)) in lines(axis, c, h, w).zip(lines(axis, c, gh, gw)) {
            buf.iter_mut().for_each(|v| *v = Complex::new(<T as Scalar>::zero(), <T as Scalar>::zero()));
            for k in 0..half {
                buf[k] = Complex::new(
                    gs[gstart + k * gstride],
                    gs[c * gstride_c + gstart + k * gstride],
                );
            }
            plan.process(&mut buf);
            for i in 0..len {
                xs[start + i * stride] = buf[i].re * scale;
            }
        }
    }
    out
}

/// Orthonormal inverse real FFT along `axis` producing `len` samples.
/// Imaginary parts of the DC and Nyquist bins are ignored.
pub fn irfft_axis<T: FftScalar>(y: &Tensor<T>, axis: Axis, len: usize) -> Tensor<T> {
    let [n, c2, yh, yw] = y.shape();
    let c = c2 / 2;
    let half = len / 2 + 1;
    debug_assert_eq!(axis.len_of(y.shape()), half);
    let oshape = axis.with_len([n, c, yh, yw], len);
    let (h, w) = (oshape[2], oshape[3]);
    let plan = T::fft_plan(len, true);
    let scale = <T as Scalar>::from_f64(1.0 / (len as f64).sqrt());
    let mut out = Tensor::zeros(oshape);
    let mut buf = vec![Complex::new(<T as Scalar>::zero(), <T as Scalar>::zero()); len];
    let ystride_c = yh * yw;
    for b in 0..n {
        let ys = y.sample_data(b);
        let os = &mut out.data_mut()[b * c * h * w..(b + 1) * c * h * w];
        for ((ystart, ystride), (start, stride)) in lines(axis, c, yh, yw).zip(lines(axis, c, h, w)) {
            let re = |k: usize| ys[ystart + k * ystride];
            let im = |k: usize| ys[c * ystride_c + ystart + k * ystride];
            buf[0] = Complex::new(re(0), <T as Scalar>::zero());
            for k in 1..half {
                if 2 * k == len {
                    buf[k] = Complex::new(re(k), <T as Scalar>::zero());
                } else {
                    buf[k] = Complex::new(re(k), im(k));
                    buf[len - k] = Complex::new(re(k), -im(k));
                }
            }
            plan.process(&mut buf);
            for i in 0..len {
                os[start + i * stride] = buf[i].re * scale;
            }
        }
    }
    out
}

pub fn irfft_axis_backward<T: FftScalar>(g: &Tensor<T>, axis: Axis) -> Tensor<T> {
    let [n, c, h, w] = g.shape();
    let len = axis.len_of(g.shape());
    let half = len / 2 + 1;
    let oshape = axis.with_len([n, 2 * c, h, w], half);
    let (oh, ow) = (oshape[2], oshape[3]);
    let plan = T::fft_plan(len, false);
    let scale = <T as Scalar>::from_f64(1.0 / (len as f64).sqrt());
    let two = <T as Scalar>::from_f64(2.0);
    let mut out = Tensor::zeros(oshape);
    let mut buf = vec![Complex::new(<T as Scalar>::zero(), <T as Scalar>::zero()); len];
    let ostride_c = oh * ow;
    for b in 0..n {
        let gs = g.sample_data(b);
        let os = &mut out.data_mut()[b * 2 * c * oh * ow..(b + 1) * 2 * c * oh * ow];
        for ((start, stride), (ostart, ostride)) in lines(axis, c, h, w).zip(lines(axis, c, oh, ow)) {
            for (i, v) in buf.iter_mut().enumerate() {
                *v = Complex::new(gs[start + i * stride], <T as Scalar>::zero());
            }
            plan.process(&mut buf);
            for k in 0..half {
                let edge = k == 0 || 2 * k == len;
                let f = if edge { scale } else { two * scale };
                os[ostart + k * ostride] = buf[k].re * f;
                os[c * ostride_c + ostart + k * ostride] = if edge { <T as Scalar>::zero() } else { buf[k].im * f };
            }
        }
    }
    out
}

/// Orthonormal complex FFT along `axis` on a stacked (re, im) tensor.
pub fn cfft_axis<T: FftScalar>(y: &Tensor<T>, axis: Axis, inverse: bool) -> Tensor<T> {
    let [n, c2, h, w] = y.shape();
    let c = c2 / 2;
    let len = axis.len_of(y.shape());
    let plan = T::fft_plan(len, inverse);
    let scale = <T as Scalar>::from_f64(1.0 / (len as f64).sqrt());
    let mut out = Tensor::zeros(y.shape());
    let mut buf = vec![Complex::new(<T as Scalar>::zero(), <T as Scalar>::zero()); len];
    let cs = h * w;
    for b in 0..n {
        let ys = y.sample_data(b);
        let os = &mut out.data_mut()[b * c2 * cs..(b + 1) * c2 * cs];
        for (start, stride) in lines(axis, c, h, w) {
            for (i, v) in buf.iter_mut().enumerate() {
                let o = start + i * stride;
                *v = Complex::new(ys[o], ys[c * cs + o]);
            }
            plan.process(&mut buf);
            for (i, v) in buf.iter().enumerate() {
                let o = start + i * stride;
                os[o] = v.re * scale;
                os[c * cs + o] = v.im * scale;
            }
        }
    }
    out
}

/// Row-stochastic overlap weights mapping `len` cells onto `out` cells.
fn area_weights(len: usize, out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = len as f64 / out as f64;
    (0..out)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < len {
                let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((i, overlap / scale));
                }
                i += 1;
            }
            taps
        })
        .collect()
}

/// Box-filter resampling where every output cell averages the input area it covers.
pub fn area_resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let wy = area_weights(h, out_h);
    let wx = area_weights(w, out_w);
    let mut rows = Tensor::zeros([n, c, out_h, w]);
    for b in 0..n {
        for ch in 0..c {
            for (oy, taps) in wy.iter().enumerate() {
                for xx in 0..w {
                    let mut acc = <T as Scalar>::zero();
                    for &(iy, k) in taps {
                        acc += x.at(b, ch, iy, xx) * <T as Scalar>::from_f64(k);
                    }
                    rows.set(b, ch, oy, xx, acc);
                }
            }
        }
    }
    Tensor::from_fn([n, c, out_h, out_w], |b, ch, y, ox| {
        let mut acc = <T as Scalar>::zero();
        for &(ix, k) in &wx[ox] {
            acc += rows.at(b, ch, y, ix) * <T as Scalar>::from_f64(k);
        }
        acc
    })
}
