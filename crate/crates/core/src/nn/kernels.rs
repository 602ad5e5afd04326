//! Dense kernels on row-major f32 buffers.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices, where
/// `op` optionally transposes. `a` is m×k after `op`, `b` is k×n.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m×k, k×n and m×n
    // row-major blocks whose lengths were checked.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn new(kernel: usize, stride: usize, pad: usize, dilation: usize) -> Self {
        ConvGeom { kernel, stride, pad, dilation }
    }

    /// Output length along one axis, or `None` when the kernel does not fit.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = len + 2 * self.pad;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Range of output positions `o` whose input index `o*stride - pad + off`
/// falls inside `0..len`.
#[inline]
fn valid_range(off: isize, stride: usize, pad: usize, len: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    let base = off - pad as isize;
    // smallest o with o*s + base >= 0
    let lo = if base >= 0 { 0 } else { ((-base) + s - 1) / s };
    // largest o with o*s + base <= len-1
    let hi = if base > len as isize - 1 { -1 } else { (len as isize - 1 - base) / s };
    let lo = lo.max(0) as usize;
    let hi = (hi + 1).clamp(0, out as isize) as usize;
    (lo.min(hi), hi)
}

/// Unfolds one sample `(c, h, w)` into a `(c*k*k) × (ho*wo)` block of a
/// matrix with row stride `ld`.
pub fn im2col(x: &[f32], c: usize, h: usize, w: usize, g: ConvGeom, col: &mut [f32], ld: usize) {
    let (ho, wo) = (g.out_len(h).unwrap(), g.out_len(w).unwrap());
    let k = g.kernel;
    let plane = ho * wo;
    debug_assert!(ld >= plane && col.len() >= (c * k * k - 1) * ld + plane);
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            let (oh_lo, oh_hi) = valid_range((ki * g.dilation) as isize, g.stride, g.pad, h, ho);
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * ld..row * ld + plane];
                let (ow_lo, ow_hi) = valid_range((kj * g.dilation) as isize, g.stride, g.pad, w, wo);
                for oh in 0..ho {
                    let line = &mut dst[oh * wo..(oh + 1) * wo];
                    if oh < oh_lo || oh >= oh_hi || ow_lo >= ow_hi {
                        line.fill(0.0);
                        continue;
                    }
                    let ih = oh * g.stride + ki * g.dilation - g.pad;
                    line[..ow_lo].fill(0.0);
                    line[ow_hi..].fill(0.0);
                    let iw0 = ow_lo * g.stride + kj * g.dilation - g.pad;
                    let srow = &src[ih * w..(ih + 1) * w];
                    if g.stride == 1 {
                        line[ow_lo..ow_hi].copy_from_slice(&srow[iw0..iw0 + (ow_hi - ow_lo)]);
                    } else {
                        for (i, v) in line[ow_lo..ow_hi].iter_mut().enumerate() {
                            *v = srow[iw0 + i * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `dx`.
pub fn col2im(col: &[f32], c: usize, h: usize, w: usize, g: ConvGeom, dx: &mut [f32], ld: usize) {
    let (ho, wo) = (g.out_len(h).unwrap(), g.out_len(w).unwrap());
    let k = g.kernel;
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            let (oh_lo, oh_hi) = valid_range((ki * g.dilation) as isize, g.stride, g.pad, h, ho);
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * ld..row * ld + plane];
                let (ow_lo, ow_hi) = valid_range((kj * g.dilation) as isize, g.stride, g.pad, w, wo);
                if ow_lo >= ow_hi {
                    continue;
                }
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + ki * g.dilation - g.pad;
                    let iw0 = ow_lo * g.stride + kj * g.dilation - g.pad;
                    let drow = &mut dst[ih * w..(ih + 1) * w];
                    let line = &src[oh * wo + ow_lo..oh * wo + ow_hi];
                    if g.stride == 1 {
                        for (d, &v) in drow[iw0..iw0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (i, &v) in line.iter().enumerate() {
                            drow[iw0 + i * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major dense matrix used for separable resampling.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Mat {
    /// Bilinear interpolation from `input` to `output` samples with
    /// half-pixel centers (no corner alignment).
    pub fn bilinear(input: usize, output: usize) -> Mat {
        let mut data = vec![0.0; output * input];
        let scale = input as f64 / output as f64;
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let t = (src - i0 as f64) as f32;
            data[o * input + i0] += 1.0 - t;
            data[o * input + i1] += t;
        }
        Mat { rows: output, cols: input, data }
    }

    /// Adaptive average pooling from `input` to `output` bins.
    pub fn adaptive_avg(input: usize, output: usize) -> Mat {
        let mut data = vec![0.0; output * input];
        for o in 0..output {
            let start = o * input / output;
            let end = ((o + 1) * input).div_ceil(output);
            let inv = 1.0 / (end - start) as f32;
            for i in start..end {
                data[o * input + i] = inv;
            }
        }
        Mat { rows: output, cols: input, data }
    }
}

/// `y = a_h · x · a_wᵀ` for one `(h, w)` plane; `tmp` holds `h × wo`.
pub fn resample_plane(x: &[f32], ah: &Mat, aw: &Mat, tmp: &mut [f32], y: &mut [f32]) {
    let (h, w) = (ah.cols, aw.cols);
    let (ho, wo) = (ah.rows, aw.rows);
    gemm(h, w, wo, x, false, &aw.data, true, tmp, 0.0);
    gemm(ho, h, wo, &ah.data, false, tmp, false, y, 0.0);
}

/// Adjoint of [`resample_plane`]: `dx += a_hᵀ · dy · a_w`.
pub fn resample_plane_backward(dy: &[f32], ah: &Mat, aw: &Mat, tmp: &mut [f32], dx: &mut [f32]) {
    let (h, w) = (ah.cols, aw.cols);
    let (ho, wo) = (ah.rows, aw.rows);
    // tmp (ho × w) = dy · a_w
    gemm(ho, wo, w, dy, false, &aw.data, false, tmp, 0.0);
    gemm(h, ho, w, &ah.data, true, tmp, false, dx, 1.0);
}
