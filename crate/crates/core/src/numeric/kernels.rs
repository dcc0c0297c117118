//! Forward and backward kernels over flat row-major buffers.
//!
//! All spatial operators work on a single `C x H x W` sample (batch size 1).

use crate::error::{Error, Result};

use super::array::{Element, NdArray};

#[inline]
fn f64_of<T: Element>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        let (c_in, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::shape(OP, format!("input must be C x H x W, got {input:?}"))),
        };
        let (c_out, kc, kh, kw) = match *kernel {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => {
                return Err(Error::shape(
                    OP,
                    format!("kernel must be C_out x C_in x k x k, got {kernel:?}"),
                ))
            }
        };
        if kc != c_in {
            return Err(Error::shape(
                OP,
                format!("kernel in_channels {kc} != input channels {c_in}"),
            ));
        }
        if kh != kw {
            return Err(Error::shape(OP, format!("kernel must be square, got {kh}x{kw}")));
        }
        if kh == 0 || stride == 0 {
            return Err(Error::invalid(OP, "kernel size and stride must be >= 1"));
        }
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < kh {
            return Err(Error::shape(
                OP,
                format!("height {h} with padding {pad} is smaller than kernel {kh}"),
            ));
        }
        if span_w < kh {
            return Err(Error::shape(
                OP,
                format!("width {w} with padding {pad} is smaller than kernel {kh}"),
            ));
        }
        Ok(ConvGeometry {
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            h_out: (span_h - kh) / stride + 1,
            w_out: (span_w - kh) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds receptive fields into a `(C_in k k) x (H' W')` matrix.
pub fn im2col<T: Element>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let p = g.positions();
    let mut cols = vec![T::zero(); g.rows() * p];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates column gradients back onto the input.
pub fn col2im<T: Element>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let p = g.positions();
    let mut dx = vec![T::zero(); g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Returns the output and the unfolded input (kept for the backward pass).
pub fn conv2d_forward<T: Element>(
    x: &[T],
    kernel: &[T],
    bias: &[T],
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>) {
    let p = g.positions();
    let rows = g.rows();
    let cols = im2col(x, g);
    let mut out = Vec::with_capacity(g.c_out * p);
    for &b in bias.iter().take(g.c_out) {
        out.extend(std::iter::repeat_n(b, p));
    }
    T::gemm(
        g.c_out,
        rows,
        p,
        T::one(),
        kernel,
        (rows as isize, 1),
        &cols,
        (p as isize, 1),
        T::one(),
        &mut out,
        (p as isize, 1),
    );
    (out, cols)
}

pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv2d_backward<T: Element>(
    grad_out: &[T],
    cols: &[T],
    kernel: &[T],
    g: &ConvGeometry,
    need_input: bool,
) -> ConvGrads<T> {
    let p = g.positions();
    let rows = g.rows();
    let mut dk = vec![T::zero(); g.c_out * rows];
    T::gemm(
        g.c_out,
        p,
        rows,
        T::one(),
        grad_out,
        (p as isize, 1),
        cols,
        (1, p as isize),
        T::zero(),
        &mut dk,
        (rows as isize, 1),
    );
    let db = grad_out
        .chunks_exact(p)
        .map(|row| T::from_f64_lossy(row.iter().map(|&v| f64_of(v)).sum()))
        .collect();
    let input = need_input.then(|| {
        let mut dcols = vec![T::zero(); rows * p];
        T::gemm(
            rows,
            g.c_out,
            p,
            T::one(),
            kernel,
            (1, rows as isize),
            grad_out,
            (p as isize, 1),
            T::zero(),
            &mut dcols,
            (p as isize, 1),
        );
        col2im(&dcols, g)
    });
    ConvGrads {
        input,
        kernel: dk,
        bias: db,
    }
}

/// Standard cross-correlation of a `C_in x H x W` input with a
/// `C_out x C_in x k x k` kernel.
pub fn conv2d<T: Element>(
    input: &NdArray<T>,
    kernel: &NdArray<T>,
    bias: &NdArray<T>,
    stride: usize,
    padding: usize,
) -> Result<NdArray<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if bias.len() != g.c_out {
        return Err(Error::shape(
            "conv2d",
            format!("bias length {} != out_channels {}", bias.len(), g.c_out),
        ));
    }
    let (out, _) = conv2d_forward(input.data(), kernel.data(), bias.data(), &g);
    NdArray::new(vec![g.c_out, g.h_out, g.w_out], out)
}

#[derive(Clone, Copy, Debug)]
pub struct PoolGeometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl PoolGeometry {
    pub fn new(input: &[usize], k: usize, stride: usize) -> Result<Self> {
        const OP: &str = "avg_pool2d";
        let (c, h, w) = match *input {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::shape(OP, format!("input must be C x H x W, got {input:?}"))),
        };
        if k == 0 || stride == 0 {
            return Err(Error::invalid(OP, "window and stride must be >= 1"));
        }
        if h < k || w < k {
            return Err(Error::shape(
                OP,
                format!("window {k} larger than input {h}x{w}"),
            ));
        }
        Ok(PoolGeometry {
            c,
            h,
            w,
            k,
            stride,
            h_out: (h - k) / stride + 1,
            w_out: (w - k) / stride + 1,
        })
    }
}

pub fn avg_pool_forward<T: Element>(x: &[T], g: &PoolGeometry) -> Vec<T> {
    let scale = 1.0 / (g.k * g.k) as f64;
    let mut out = Vec::with_capacity(g.c * g.h_out * g.w_out);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut acc = 0.0;
                for ky in 0..g.k {
                    let row = (oy * g.stride + ky) * g.w + ox * g.stride;
                    acc += plane[row..row + g.k].iter().map(|&v| f64_of(v)).sum::<f64>();
                }
                out.push(T::from_f64_lossy(acc * scale));
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Element>(grad_out: &[T], g: &PoolGeometry) -> Vec<T> {
    let scale = T::from_f64_lossy(1.0 / (g.k * g.k) as f64);
    let mut dx = vec![T::zero(); g.c * g.h * g.w];
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let go = grad_out[(c * g.h_out + oy) * g.w_out + ox] * scale;
                for ky in 0..g.k {
                    let row = (oy * g.stride + ky) * g.w + ox * g.stride;
                    for v in &mut plane[row..row + g.k] {
                        *v += go;
                    }
                }
            }
        }
    }
    dx
}

/// Window means with no padding.
pub fn avg_pool2d<T: Element>(input: &NdArray<T>, k: usize, stride: usize) -> Result<NdArray<T>> {
    let g = PoolGeometry::new(input.shape(), k, stride)?;
    NdArray::new(vec![g.c, g.h_out, g.w_out], avg_pool_forward(input.data(), &g))
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

pub struct InstanceNormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<f64>,
}

pub fn instance_norm_forward<T: Element>(
    x: &[T],
    (c, hw): (usize, usize),
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, InstanceNormCache<T>) {
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        let mean = plane.iter().map(|&v| f64_of(v)).sum::<f64>() / hw as f64;
        let var = plane
            .iter()
            .map(|&v| {
                let d = f64_of(v) - mean;
                d * d
            })
            .sum::<f64>()
            / hw as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        let (g, b) = (f64_of(gamma[ch]), f64_of(beta[ch]));
        for &v in plane {
            let n = (f64_of(v) - mean) * inv;
            xhat.push(T::from_f64_lossy(n));
            y.push(T::from_f64_lossy(g * n + b));
        }
    }
    (y, InstanceNormCache { xhat, inv_std })
}

pub struct InstanceNormGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn instance_norm_backward<T: Element>(
    grad_out: &[T],
    cache: &InstanceNormCache<T>,
    (c, hw): (usize, usize),
    gamma: &[T],
) -> InstanceNormGrads<T> {
    let mut dx = Vec::with_capacity(grad_out.len());
    let mut dgamma = Vec::with_capacity(c);
    let mut dbeta = Vec::with_capacity(c);
    let n = hw as f64;
    for ch in 0..c {
        let go = &grad_out[ch * hw..(ch + 1) * hw];
        let xh = &cache.xhat[ch * hw..(ch + 1) * hw];
        let sum_dy: f64 = go.iter().map(|&v| f64_of(v)).sum();
        let sum_dy_xhat: f64 = go.iter().zip(xh).map(|(&d, &x)| f64_of(d) * f64_of(x)).sum();
        dbeta.push(T::from_f64_lossy(sum_dy));
        dgamma.push(T::from_f64_lossy(sum_dy_xhat));
        let k = f64_of(gamma[ch]) * cache.inv_std[ch] / n;
        for (&d, &x) in go.iter().zip(xh) {
            dx.push(T::from_f64_lossy(
                k * (n * f64_of(d) - sum_dy - f64_of(x) * sum_dy_xhat),
            ));
        }
    }
    InstanceNormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

/// Per-channel standardization over the spatial plane followed by an affine map.
pub fn instance_norm<T: Element>(
    input: &NdArray<T>,
    gamma: &NdArray<T>,
    beta: &NdArray<T>,
    eps: f64,
) -> Result<NdArray<T>> {
    let (c, h, w) = input.dims3("instance_norm")?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "instance_norm",
            format!(
                "gamma/beta lengths {}/{} != channels {c}",
                gamma.len(),
                beta.len()
            ),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::invalid("instance_norm", "eps must be positive"));
    }
    let (y, _) = instance_norm_forward(input.data(), (c, h * w), gamma.data(), beta.data(), eps);
    NdArray::new(vec![c, h, w], y)
}

/// Source sample positions for one axis of an align-corners-false resize.
#[derive(Clone, Debug)]
pub struct AxisWeights {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisWeights {
    pub fn new(len_in: usize, len_out: usize) -> Self {
        let scale = len_in as f64 / len_out as f64;
        let mut lo = Vec::with_capacity(len_out);
        let mut hi = Vec::with_capacity(len_out);
        let mut frac = Vec::with_capacity(len_out);
        for d in 0..len_out {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len_in - 1);
            let i1 = (i0 + 1).min(len_in - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(if i1 == i0 { 0.0 } else { src - i0 as f64 });
        }
        AxisWeights { lo, hi, frac }
    }
}

/// Exact when both ends are equal, so constant maps survive resizing.
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

pub fn bilinear_forward<T: Element>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    ys: &AxisWeights,
    xs: &AxisWeights,
) -> Vec<T> {
    let (ho, wo) = (ys.lo.len(), xs.lo.len());
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1, fy) = (ys.lo[oy], ys.hi[oy], ys.frac[oy]);
            for ox in 0..wo {
                let (x0, x1, fx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
                let at = |y: usize, x: usize| f64_of(plane[y * w + x]);
                let top = lerp(at(y0, x0), at(y0, x1), fx);
                let bottom = lerp(at(y1, x0), at(y1, x1), fx);
                out.push(T::from_f64_lossy(lerp(top, bottom, fy)));
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Element>(
    grad_out: &[T],
    (c, h, w): (usize, usize, usize),
    ys: &AxisWeights,
    xs: &AxisWeights,
) -> Vec<T> {
    let (ho, wo) = (ys.lo.len(), xs.lo.len());
    let mut dx = vec![0.0f64; c * h * w];
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            let (y0, y1, fy) = (ys.lo[oy], ys.hi[oy], ys.frac[oy]);
            for ox in 0..wo {
                let (x0, x1, fx) = (xs.lo[ox], xs.hi[ox], xs.frac[ox]);
                let g = f64_of(grad_out[(ch * ho + oy) * wo + ox]);
                plane[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += g * (1.0 - fy) * fx;
                plane[y1 * w + x0] += g * fy * (1.0 - fx);
                plane[y1 * w + x1] += g * fy * fx;
            }
        }
    }
    dx.into_iter().map(T::from_f64_lossy).collect()
}

/// Align-corners-false bilinear interpolation of every channel plane.
pub fn bilinear_resize<T: Element>(
    input: &NdArray<T>,
    h_out: usize,
    w_out: usize,
) -> Result<NdArray<T>> {
    let (c, h, w) = input.dims3("bilinear_resize")?;
    if h_out == 0 || w_out == 0 {
        return Err(Error::invalid("bilinear_resize", "output size must be >= 1"));
    }
    if (h, w) == (h_out, w_out) {
        return Ok(input.clone());
    }
    let ys = AxisWeights::new(h, h_out);
    let xs = AxisWeights::new(w, w_out);
    NdArray::new(
        vec![c, h_out, w_out],
        bilinear_forward(input.data(), (c, h, w), &ys, &xs),
    )
}

/// Linear-interpolation quantile (sorted index `q (n - 1)`).
pub fn quantile<T: Element>(values: &[T], q: f64) -> Result<f64> {
    let mut scratch: Vec<f64> = values.iter().map(|&v| f64_of(v)).collect();
    quantile_in_place(&mut scratch, q)
}

/// As [`quantile`] but reorders `values` instead of copying.
pub fn quantile_in_place(values: &mut [f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("quantile"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid("quantile", format!("q = {q} outside [0, 1]")));
    }
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut v_lo, rest) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || rest.is_empty() {
        return Ok(v_lo);
    }
    let v_hi = rest.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(v_lo + frac * (v_hi - v_lo))
}
