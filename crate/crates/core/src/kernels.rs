//! Volumetric convolution kernels (im2col + GEMM) shared by the autodiff
//! graph. All buffers are per batch item: `[channels, H, W, T]` flattened.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::gemm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub dilation: [usize; 3],
}

impl ConvGeom {
    /// Cubic kernel `k` with "same" padding at stride 1.
    pub fn same(k: usize, dilation: usize) -> Self {
        let p = dilation * (k - 1) / 2;
        ConvGeom { kernel: [k; 3], stride: [1; 3], pad: [p; 3], dilation: [dilation; 3] }
    }

    /// 3x3x3 kernel, padding 1, stride 2 on every axis whose extent exceeds one.
    pub fn down(dims: [usize; 3]) -> Self {
        let mut g = ConvGeom::same(3, 1);
        for a in 0..3 {
            g.stride[a] = if dims[a] > 1 { 2 } else { 1 };
        }
        g
    }

    pub fn pointwise() -> Self {
        ConvGeom::same(1, 1)
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }

    pub fn out_dims(&self, d: [usize; 3]) -> Option<[usize; 3]> {
        let mut o = [0; 3];
        for a in 0..3 {
            let span = self.dilation[a] * (self.kernel[a] - 1) + 1;
            let padded = d[a] + 2 * self.pad[a];
            if padded < span {
                return None;
            }
            o[a] = (padded - span) / self.stride[a] + 1;
        }
        Some(o)
    }
}

/// Output positions `o` in `[lo, hi)` whose input coordinate
/// `o * stride + offset - pad` falls inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, stride: usize, offset: usize, pad: usize, len: usize) -> (usize, usize) {
    // i = o*s + offset - pad >= 0  <=>  o >= ceil((pad - offset) / s)
    let lo = if offset >= pad { 0 } else { (pad - offset).div_ceil(stride) };
    // i < len  <=>  o*s < len + pad - offset
    let lim = len + pad;
    let hi = if lim <= offset { 0 } else { (lim - offset).div_ceil(stride) };
    (lo.min(out_len), hi.min(out_len))
}

fn for_each_tap(cin: usize, dims: [usize; 3], g: &ConvGeom, od: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
    // f(col_index, input_index, len) over contiguous-in-output runs along T
    let [h, w, t] = dims;
    let [oh, ow, ot] = od;
    let k = g.kernel;
    let p_out = oh * ow * ot;
    for ci in 0..cin {
        let mut tap = 0;
        for kh in 0..k[0] {
            let offh = kh * g.dilation[0];
            let (h0, h1) = valid_range(oh, g.stride[0], offh, g.pad[0], h);
            for kw in 0..k[1] {
                let offw = kw * g.dilation[1];
                let (w0, w1) = valid_range(ow, g.stride[1], offw, g.pad[1], w);
                for kt in 0..k[2] {
                    let offt = kt * g.dilation[2];
                    let (t0, t1) = valid_range(ot, g.stride[2], offt, g.pad[2], t);
                    let row = (ci * g.taps() + tap) * p_out;
                    tap += 1;
                    if t0 >= t1 {
                        continue;
                    }
                    for o_h in h0..h1 {
                        let ih = o_h * g.stride[0] + offh - g.pad[0];
                        for o_w in w0..w1 {
                            let iw = o_w * g.stride[1] + offw - g.pad[1];
                            let it0 = t0 * g.stride[2] + offt - g.pad[2];
                            let col = row + (o_h * ow + o_w) * ot + t0;
                            let inp = ((ci * h + ih) * w + iw) * t + it0;
                            f(col, inp, t1 - t0);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn im2col(x: &[f64], cin: usize, dims: [usize; 3], g: &ConvGeom, od: [usize; 3]) -> Vec<f64> {
    let p_out = od.iter().product::<usize>();
    let mut col = vec![0.0; cin * g.taps() * p_out];
    let st = g.stride[2];
    for_each_tap(cin, dims, g, od, |c, i, n| {
        if st == 1 {
            col[c..c + n].copy_from_slice(&x[i..i + n]);
        } else {
            for j in 0..n {
                col[c + j] = x[i + j * st];
            }
        }
    });
    col
}

fn col2im_add(col: &[f64], dx: &mut [f64], cin: usize, dims: [usize; 3], g: &ConvGeom, od: [usize; 3]) {
    let st = g.stride[2];
    for_each_tap(cin, dims, g, od, |c, i, n| {
        for j in 0..n {
            dx[i + j * st] += col[c + j];
        }
    });
}

/// One batch item of a convolution. `w` is `[cout, cin, kh, kw, kt]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    cin: usize,
    cout: usize,
    dims: [usize; 3],
    g: &ConvGeom,
    out: &mut [f64],
) {
    let od = g.out_dims(dims).expect("conv geometry validated by caller");
    let p = od.iter().product::<usize>();
    let ck = cin * g.taps();
    if g.is_pointwise() {
        gemm(cout, ck, p, w, false, x, false, 0.0, out);
    } else {
        let col = im2col(x, cin, dims, g, od);
        gemm(cout, ck, p, w, false, &col, false, 0.0, out);
    }
    if let Some(b) = bias {
        for (co, &bv) in b.iter().enumerate() {
            for v in &mut out[co * p..(co + 1) * p] {
                *v += bv;
            }
        }
    }
}

/// Backward of [`conv_forward`] for one batch item; accumulates into the
/// supplied gradient buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    cin: usize,
    cout: usize,
    dims: [usize; 3],
    g: &ConvGeom,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let od = g.out_dims(dims).expect("conv geometry validated by caller");
    let p = od.iter().product::<usize>();
    let ck = cin * g.taps();
    let pointwise = g.is_pointwise();
    let col_owned;
    let col: &[f64] = if pointwise {
        x
    } else if dw.is_some() {
        col_owned = im2col(x, cin, dims, g, od);
        &col_owned
    } else {
        &[]
    };
    if let Some(dw) = dw {
        gemm(cout, p, ck, dout, false, col, true, 1.0, dw);
    }
    if let Some(db) = db {
        for (co, d) in db.iter_mut().enumerate() {
            *d += dout[co * p..(co + 1) * p].iter().sum::<f64>();
        }
    }
    if let Some(dx) = dx {
        if pointwise {
            gemm(ck, cout, p, w, true, dout, false, 1.0, dx);
        } else {
            let mut dcol = vec![0.0; ck * p];
            gemm(ck, cout, p, w, true, dout, false, 0.0, &mut dcol);
            col2im_add(&dcol, dx, cin, dims, g, od);
        }
    }
}

/// Per-axis upsampling factors of a stride-2 transposed convolution from
/// `dims` to `target`.
pub(crate) fn up_factors(dims: [usize; 3], target: [usize; 3]) -> Option<[usize; 3]> {
    let mut f = [1; 3];
    for a in 0..3 {
        f[a] = if target[a] == 2 * dims[a] {
            2
        } else if target[a] == dims[a] {
            1
        } else {
            return None;
        };
    }
    Some(f)
}

/// Transposed convolution with kernel == stride == `f` (per axis, 1 or 2).
/// `w` is `[cin, cout, 2, 2, 2]`; axes with factor 1 use the kernel's first tap.
#[allow(clippy::too_many_arguments)]
pub(crate) fn convt_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    cin: usize,
    cout: usize,
    dims: [usize; 3],
    f: [usize; 3],
    out: &mut [f64],
) {
    let p = dims.iter().product::<usize>();
    let mut cols = vec![0.0; cout * 8 * p];
    gemm(cout * 8, cin, p, w, true, x, false, 0.0, &mut cols);
    let od = [dims[0] * f[0], dims[1] * f[1], dims[2] * f[2]];
    let op = od.iter().product::<usize>();
    for co in 0..cout {
        let bv = bias.map_or(0.0, |b| b[co]);
        for a in 0..f[0] {
            for b in 0..f[1] {
                for c in 0..f[2] {
                    let row = (co * 8 + a * 4 + b * 2 + c) * p;
                    for h in 0..dims[0] {
                        for ww in 0..dims[1] {
                            for t in 0..dims[2] {
                                let o = ((h * f[0] + a) * od[1] + ww * f[1] + b) * od[2] + t * f[2] + c;
                                out[co * op + o] = cols[row + (h * dims[1] + ww) * dims[2] + t] + bv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn convt_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    cin: usize,
    cout: usize,
    dims: [usize; 3],
    f: [usize; 3],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let p = dims.iter().product::<usize>();
    let od = [dims[0] * f[0], dims[1] * f[1], dims[2] * f[2]];
    let op = od.iter().product::<usize>();
    let mut dcols = vec![0.0; cout * 8 * p];
    for co in 0..cout {
        for a in 0..f[0] {
            for b in 0..f[1] {
                for c in 0..f[2] {
                    let row = (co * 8 + a * 4 + b * 2 + c) * p;
                    for h in 0..dims[0] {
                        for ww in 0..dims[1] {
                            for t in 0..dims[2] {
                                let o = ((h * f[0] + a) * od[1] + ww * f[1] + b) * od[2] + t * f[2] + c;
                                dcols[row + (h * dims[1] + ww) * dims[2] + t] = dout[co * op + o];
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(db) = db {
        for (co, d) in db.iter_mut().enumerate() {
            *d += dout[co * op..(co + 1) * op].iter().sum::<f64>();
        }
    }
    if let Some(dw) = dw {
        // dW[cin, cout*8] += X[cin, p] * dcols^T
        gemm(cin, p, cout * 8, x, false, &dcols, true, 1.0, dw);
    }
    if let Some(dx) = dx {
        gemm(cin, cout * 8, p, w, false, &dcols, false, 1.0, dx);
    }
}
