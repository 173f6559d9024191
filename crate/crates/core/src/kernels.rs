//! Raw loops behind the differentiable ops. Everything here works on flat
//! row-major slices; shape checking happens in the tape layer.

/// Stride and zero padding of a 3D convolution, ordered (time, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    pub fn unit() -> Self {
        Self {
            stride: [1, 1, 1],
            padding: [0, 0, 0],
        }
    }

    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { stride, padding }
    }

    /// Output extent along one axis, `None` when the kernel does not fit.
    pub fn out_extent(&self, axis: usize, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding[axis];
        if kernel > padded || self.stride[axis] == 0 {
            return None;
        }
        Some((padded - kernel) / self.stride[axis] + 1)
    }
}

/// Output positions `o` along one axis for which `o * stride + k - pad`
/// lands inside `[0, len)`.
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    // largest o with o*stride + k - pad <= len - 1
    let hi = if len + pad > k {
        ((len - 1 + pad - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) struct ConvDims {
    pub cin: usize,
    pub cout: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub geom: ConvGeometry,
}

impl ConvDims {
    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Visits every (column-matrix row, output row) pair that touches valid
    /// input, handing the callback the column row, input row offset, output
    /// row offset and the valid output column range with its input column start.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let [it, ih, iw] = self.input;
        let [ot, oh, ow] = self.output;
        let [kt, kh, kw] = self.kernel;
        let [st, sh, sw] = self.geom.stride;
        let [pt, ph, pw] = self.geom.padding;
        let kvol = self.kernel_volume();
        for c in 0..self.cin {
            let in_base = c * self.in_plane();
            for a in 0..kt {
                let (t_lo, t_hi) = valid_range(ot, it, a, st, pt);
                for b in 0..kh {
                    let (h_lo, h_hi) = valid_range(oh, ih, b, sh, ph);
                    for d in 0..kw {
                        let (w_lo, w_hi) = valid_range(ow, iw, d, sw, pw);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let row = c * kvol + (a * kh + b) * kw + d;
                        let iw0 = w_lo * sw + d - pw;
                        for t in t_lo..t_hi {
                            let ti = t * st + a - pt;
                            for h in h_lo..h_hi {
                                let hi = h * sh + b - ph;
                                let in_row = in_base + (ti * ih + hi) * iw;
                                let out_row = (t * oh + h) * ow;
                                f(row, in_row + iw0, out_row + w_lo, w_hi - w_lo, sw);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Unfolds the input into a `[cin·kvol, out_plane]` column matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.out_plane();
        let mut cols = vec![0.0; self.cin * self.kernel_volume() * p];
        self.for_each_tap(|row, xi, oi, n, sw| {
            let dst = &mut cols[row * p + oi..row * p + oi + n];
            if sw == 1 {
                dst.copy_from_slice(&x[xi..xi + n]);
            } else {
                for (j, o) in dst.iter_mut().enumerate() {
                    *o = x[xi + j * sw];
                }
            }
        });
        cols
    }

    /// Adjoint of [`ConvDims::im2col`]: scatters columns back onto the input.
    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let p = self.out_plane();
        let mut x = vec![0.0; self.cin * self.in_plane()];
        self.for_each_tap(|row, xi, oi, n, sw| {
            let src = &cols[row * p + oi..row * p + oi + n];
            if sw == 1 {
                for (g, &v) in x[xi..xi + n].iter_mut().zip(src) {
                    *g += v;
                }
            } else {
                for (j, &v) in src.iter().enumerate() {
                    x[xi + j * sw] += v;
                }
            }
        });
        x
    }
}

pub(crate) fn conv3d_forward(x: &[f64], w: &[f64], dims: &ConvDims) -> Vec<f64> {
    let k = dims.cin * dims.kernel_volume();
    matmul(w, &dims.im2col(x), dims.cout, k, dims.out_plane())
}

pub(crate) fn conv3d_backward_input(grad_out: &[f64], w: &[f64], dims: &ConvDims) -> Vec<f64> {
    let k = dims.cin * dims.kernel_volume();
    let wt = transpose(w, dims.cout, k);
    dims.col2im(&matmul(&wt, grad_out, k, dims.cout, dims.out_plane()))
}

pub(crate) fn conv3d_backward_kernel(grad_out: &[f64], x: &[f64], dims: &ConvDims) -> Vec<f64> {
    let p = dims.out_plane();
    let cols = dims.im2col(x);
    let mut gw = Vec::with_capacity(dims.cout * dims.cin * dims.kernel_volume());
    for g in grad_out.chunks_exact(p) {
        gw.extend(cols.chunks_exact(p).map(|c| dot(g, c)));
    }
    gw
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `a[m×k] · b[k×p]`, i-k-j loop order.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * p];
    for i in 0..m {
        let row = &mut c[i * p..(i + 1) * p];
        for q in 0..k {
            let av = a[i * k + q];
            for (cv, &bv) in row.iter_mut().zip(&b[q * p..(q + 1) * p]) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Corner-aligned source coordinate taps for resampling `src` samples onto
/// `dst` samples: `(lower index, upper index, fraction)` per output sample.
pub(crate) fn linear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|i| {
            if src == dst {
                return (i, i, 0.0);
            }
            let pos = if dst > 1 {
                (i * (src - 1)) as f64 / (dst - 1) as f64
            } else {
                0.0
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Linear resampling of the middle axis of an `[outer, src, inner]` block.
pub(crate) fn lerp_axis(
    x: &[f64],
    outer: usize,
    inner: usize,
    taps: &[(usize, usize, f64)],
    src: usize,
) -> Vec<f64> {
    let dst = taps.len();
    let mut out = vec![0.0; outer * dst * inner];
    for o in 0..outer {
        for (i, &(lo, hi, f)) in taps.iter().enumerate() {
            let a = &x[(o * src + lo) * inner..][..inner];
            let b = &x[(o * src + hi) * inner..][..inner];
            let dstrow = &mut out[(o * dst + i) * inner..][..inner];
            for ((d, &av), &bv) in dstrow.iter_mut().zip(a).zip(b) {
                *d = av + f * (bv - av);
            }
        }
    }
    out
}

/// Adjoint of [`lerp_axis`].
pub(crate) fn lerp_axis_adjoint(
    g: &[f64],
    outer: usize,
    inner: usize,
    taps: &[(usize, usize, f64)],
    src: usize,
) -> Vec<f64> {
    let dst = taps.len();
    let mut gx = vec![0.0; outer * src * inner];
    for o in 0..outer {
        for (i, &(lo, hi, f)) in taps.iter().enumerate() {
            let grow = &g[(o * dst + i) * inner..][..inner];
            for (j, &gv) in grow.iter().enumerate() {
                gx[(o * src + lo) * inner + j] += (1.0 - f) * gv;
                gx[(o * src + hi) * inner + j] += f * gv;
            }
        }
    }
    gx
}
