//! Dense kernels shared by the graph operations.

/// Row-major `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is
/// `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slice lengths were checked against the logical extents
    // above and the strides describe exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds one `[C, H, W]` image into `[C*K*K, OH*OW]` columns.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    debug_assert_eq!(img.len(), g.channels * g.height * g.width);
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    if g.is_pointwise() {
        cols.copy_from_slice(img);
        return;
    }
    let k = g.kernel;
    let plane = g.height * g.width;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let src = &img[c * plane..(c + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    let drow = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if ih < 0 || ih >= g.height as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let srow = &src[ih as usize * g.width..(ih as usize + 1) * g.width];
                    for (ow, d) in drow.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        *d = if iw < 0 || iw >= g.width as isize {
                            0.0
                        } else {
                            srow[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `img`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    debug_assert_eq!(img.len(), g.channels * g.height * g.width);
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    if g.is_pointwise() {
        img.iter_mut().zip(cols).for_each(|(d, s)| *d += s);
        return;
    }
    let k = g.kernel;
    let plane = g.height * g.width;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let dst = &mut img[c * plane..(c + 1) * plane];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oh in 0..g.out_h {
                    let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                    if ih < 0 || ih >= g.height as isize {
                        continue;
                    }
                    let drow = &mut dst[ih as usize * g.width..(ih as usize + 1) * g.width];
                    let srow = &src[oh * g.out_w..(oh + 1) * g.out_w];
                    for (ow, s) in srow.iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.width as isize {
                            drow[iw as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Maps output pixel `(col, row)` to a source location
/// `(a*col + b*row + c, d*col + e*row + f)` in input pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineMap(pub [f64; 6]);

impl AffineMap {
    pub const IDENTITY: AffineMap = AffineMap([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn apply(&self, col: f64, row: f64) -> (f64, f64) {
        let m = &self.0;
        (m[0] * col + m[1] * row + m[2], m[3] * col + m[4] * row + m[5])
    }
}

/// One bilinear tap set: four source indices and weights.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

/// Bilinear taps with border replication for every output pixel.
pub(crate) fn bilinear_taps(
    map: &AffineMap,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<Taps> {
    let max_x = (in_w - 1) as f64;
    let max_y = (in_h - 1) as f64;
    let mut taps = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        for c in 0..out_w {
            let (sx, sy) = map.apply(c as f64, r as f64);
            let sx = sx.clamp(0.0, max_x);
            let sy = sy.clamp(0.0, max_y);
            let x0 = sx.floor();
            let y0 = sy.floor();
            let wx = sx - x0;
            let wy = sy - y0;
            let x0 = x0 as usize;
            let y0 = y0 as usize;
            let x1 = (x0 + 1).min(in_w - 1);
            let y1 = (y0 + 1).min(in_h - 1);
            taps.push(Taps {
                idx: [y0 * in_w + x0, y0 * in_w + x1, y1 * in_w + x0, y1 * in_w + x1],
                w: [
                    (1.0 - wx) * (1.0 - wy),
                    wx * (1.0 - wy),
                    (1.0 - wx) * wy,
                    wx * wy,
                ],
            });
        }
    }
    taps
}
