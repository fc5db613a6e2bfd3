//! GEMM wrappers and im2col/col2im used by the convolution op.

/// `c = alpha * op(a) * op(b) + beta * c` with row-major operands.
///
/// `a` is `m x k` after optional transpose, `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides describe
    // in-bounds row-major (or transposed) layouts of those slices.
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
pub struct ConvGeom {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad_h - self.k_h) / self.stride_h + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad_w - self.k_w) / self.stride_w + 1
    }

    pub fn fits(&self) -> bool {
        self.in_h + 2 * self.pad_h >= self.k_h
            && self.in_w + 2 * self.pad_w >= self.k_w
            && self.stride_h > 0
            && self.stride_w > 0
    }

    pub(crate) fn col_rows(&self) -> usize {
        self.in_ch * self.k_h * self.k_w
    }

    pub(crate) fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Whether the direct kernels beat im2col plus GEMM for `co` output
    /// channels.
    pub(crate) fn prefers_direct(&self, co: usize) -> bool {
        // measured: im2col wins once the channel product grows or the
        // inner loops become strided
        self.stride_w == 1 && self.in_ch * co <= 16 && !self.is_pointwise()
    }

    pub(crate) fn is_pointwise(&self) -> bool {
        self.k_h == 1
            && self.k_w == 1
            && self.stride_h == 1
            && self.stride_w == 1
            && self.pad_h == 0
            && self.pad_w == 0
    }
}


/// Unfolds one `[C, H, W]` image into `[C*kh*kw, oh*ow]` columns.
pub(crate) fn im2col(g: &ConvGeom, img: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.in_h * g.in_w;
    let mut row = 0;
    for c in 0..g.in_ch {
        let src = &img[c * plane..(c + 1) * plane];
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = (y * g.stride_h + ki) as isize - g.pad_h as isize;
                    let out_row = &mut dst[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (x, o) in out_row.iter_mut().enumerate() {
                        let ix = (x * g.stride_w + kj) as isize - g.pad_w as isize;
                        *o = if ix < 0 || ix >= g.in_w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into the image.
pub(crate) fn col2im_add(g: &ConvGeom, cols: &[f64], img: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.in_h * g.in_w;
    let mut row = 0;
    for c in 0..g.in_ch {
        let dst = &mut img[c * plane..(c + 1) * plane];
        for ki in 0..g.k_h {
            for kj in 0..g.k_w {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for y in 0..oh {
                    let iy = (y * g.stride_h + ki) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (x, v) in src[y * ow..(y + 1) * ow].iter().enumerate() {
                        let ix = (x * g.stride_w + kj) as isize - g.pad_w as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Output positions `o` in `0..out` whose input index `o * stride + k - pad`
/// lands inside `0..len`.
fn valid_range(out: usize, len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    // largest o with o * stride + k - pad <= len - 1
    let hi = if len + pad > k { ((len + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo, hi.max(lo))
}

/// Visits every kernel tap with the valid output rectangle and the input
/// offset of its first element. `f(ki, kj, ys, xs, iy0, ix0)`.
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, (usize, usize), (usize, usize), usize, usize)) {
    let (oh, ow) = (g.out_h(), g.out_w());
    for ki in 0..g.k_h {
        let ys = valid_range(oh, g.in_h, g.stride_h, ki, g.pad_h);
        if ys.0 == ys.1 {
            continue;
        }
        for kj in 0..g.k_w {
            let xs = valid_range(ow, g.in_w, g.stride_w, kj, g.pad_w);
            if xs.0 == xs.1 {
                continue;
            }
            let iy0 = ys.0 * g.stride_h + ki - g.pad_h;
            let ix0 = xs.0 * g.stride_w + kj - g.pad_w;
            f(ki, kj, ys, xs, iy0, ix0);
        }
    }
}

/// Direct convolution of one image, accumulating into `out` (`[co, oh, ow]`).
/// Cheaper than im2col when the channel counts are small, since nothing is
/// unfolded.
pub(crate) fn conv_direct(g: &ConvGeom, co: usize, w: &[f64], img: &[f64], out: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.in_h * g.in_w;
    let taps = g.k_h * g.k_w;
    for_each_tap(g, |ki, kj, ys, xs, iy0, ix0| {
        let n = xs.1 - xs.0;
        for c in 0..g.in_ch {
            let src = &img[c * plane..(c + 1) * plane];
            for o in 0..co {
                let wv = w[(o * g.in_ch + c) * taps + ki * g.k_w + kj];
                let dst = &mut out[o * oh * ow..(o + 1) * oh * ow];
                for (r, y) in (ys.0..ys.1).enumerate() {
                    let in_off = (iy0 + r * g.stride_h) * g.in_w + ix0;
                    let drow = &mut dst[y * ow + xs.0..y * ow + xs.1];
                    if g.stride_w == 1 {
                        for (d, s) in drow.iter_mut().zip(&src[in_off..in_off + n]) {
                            *d += wv * s;
                        }
                    } else {
                        for (i, d) in drow.iter_mut().enumerate() {
                            *d += wv * src[in_off + i * g.stride_w];
                        }
                    }
                }
            }
        }
    });
}

/// Kernel gradient of [`conv_direct`], accumulated into `dw`.
pub(crate) fn conv_direct_dw(g: &ConvGeom, co: usize, gout: &[f64], img: &[f64], dw: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.in_h * g.in_w;
    let taps = g.k_h * g.k_w;
    for_each_tap(g, |ki, kj, ys, xs, iy0, ix0| {
        let n = xs.1 - xs.0;
        for c in 0..g.in_ch {
            let src = &img[c * plane..(c + 1) * plane];
            for o in 0..co {
                let go = &gout[o * oh * ow..(o + 1) * oh * ow];
                let mut acc = 0.0;
                for (r, y) in (ys.0..ys.1).enumerate() {
                    let in_off = (iy0 + r * g.stride_h) * g.in_w + ix0;
                    let grow = &go[y * ow + xs.0..y * ow + xs.1];
                    if g.stride_w == 1 {
                        acc += grow.iter().zip(&src[in_off..in_off + n]).map(|(a, b)| a * b).sum::<f64>();
                    } else {
                        acc += grow
                            .iter()
                            .enumerate()
                            .map(|(i, a)| a * src[in_off + i * g.stride_w])
                            .sum::<f64>();
                    }
                }
                dw[(o * g.in_ch + c) * taps + ki * g.k_w + kj] += acc;
            }
        }
    });
}

/// Input gradient of [`conv_direct`], accumulated into `dimg`.
pub(crate) fn conv_direct_dx(g: &ConvGeom, co: usize, w: &[f64], gout: &[f64], dimg: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.in_h * g.in_w;
    let taps = g.k_h * g.k_w;
    for_each_tap(g, |ki, kj, ys, xs, iy0, ix0| {
        let n = xs.1 - xs.0;
        for c in 0..g.in_ch {
            let dst = &mut dimg[c * plane..(c + 1) * plane];
            for o in 0..co {
                let wv = w[(o * g.in_ch + c) * taps + ki * g.k_w + kj];
                let go = &gout[o * oh * ow..(o + 1) * oh * ow];
                for (r, y) in (ys.0..ys.1).enumerate() {
                    let in_off = (iy0 + r * g.stride_h) * g.in_w + ix0;
                    let grow = &go[y * ow + xs.0..y * ow + xs.1];
                    if g.stride_w == 1 {
                        for (d, s) in dst[in_off..in_off + n].iter_mut().zip(grow) {
                            *d += wv * s;
                        }
                    } else {
                        for (i, s) in grow.iter().enumerate() {
                            dst[in_off + i * g.stride_w] += wv * s;
                        }
                    }
                }
            }
        }
    });
}
