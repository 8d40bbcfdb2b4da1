//! Dense kernels behind the tape: matrix products and convolution lowering.

/// `c = a · b (+ c)` for row-major `a: m×k` and `b: k×n`; either operand may be
/// read transposed from its stored layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_transposed { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly m×k, k×n and m×n elements and the
    // strides above address them in bounds; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel convolution with "same" padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad() - self.kernel) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    /// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad`
    /// lies inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let ow = self.out_width();
        let shift = kx as isize - self.pad() as isize;
        let s = self.stride as isize;
        // smallest ox with ox·s + shift >= 0
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        // largest ox with ox·s + shift <= width - 1
        let last = (self.width as isize - 1 - shift).div_euclid(s);
        let hi = (last + 1).clamp(0, ow as isize);
        (lo.min(ow as isize) as usize, hi.max(lo.min(ow as isize)) as usize)
    }
}

/// Lowers one image `[C, H, W]` into columns `[C·k·k, Ho·Wo]`.
pub(crate) fn im2col(g: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let pad = g.pad() as isize;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let (lo, hi) = g.valid_cols(kx);
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    dst_row[..lo].fill(0.0);
                    dst_row[hi..].fill(0.0);
                    if lo < hi {
                        let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                        let first = (lo * g.stride + kx) - g.pad();
                        if g.stride == 1 {
                            dst_row[lo..hi].copy_from_slice(&src[first..first + (hi - lo)]);
                        } else {
                            for (d, s) in dst_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                                *d = *s;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let pad = g.pad() as isize;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let (lo, hi) = g.valid_cols(kx);
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.height as isize || lo >= hi {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let first = (lo * g.stride + kx) - g.pad();
                    let src_row = &src[oy * ow + lo..oy * ow + hi];
                    if g.stride == 1 {
                        for (d, s) in dst[first..first + (hi - lo)].iter_mut().zip(src_row) {
                            *d += s;
                        }
                    } else {
                        for (d, s) in dst[first..].iter_mut().step_by(g.stride).zip(src_row) {
                            *d += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_all_layouts() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeometry {
            channels: 2,
            height: 5,
            width: 6,
            kernel: 3,
            stride: 2,
        };
        let image: Vec<f64> = (0..60).map(|v| (v as f64 * 0.37).cos()).collect();
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        im2col(&g, &image, &mut cols);
        let probe: Vec<f64> = (0..cols.len()).map(|v| (v as f64 * 0.11).sin()).collect();
        let mut back = vec![0.0; image.len()];
        col2im(&g, &probe, &mut back);
        let lhs: f64 = cols.iter().zip(&probe).map(|(a, b)| a * b).sum();
        let rhs: f64 = image.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert_eq!((g.out_height(), g.out_width()), (3, 3));
    }

    #[test]
    fn im2col_matches_direct_indexing() {
        for (h, w, k, stride) in [(5, 6, 3, 1), (5, 6, 3, 2), (7, 4, 5, 2), (4, 4, 1, 2), (3, 8, 3, 2), (2, 2, 5, 1)] {
            let g = ConvGeometry {
                channels: 2,
                height: h,
                width: w,
                kernel: k,
                stride,
            };
            let image: Vec<f64> = (0..2 * h * w).map(|v| v as f64 + 1.0).collect();
            let mut cols = vec![f64::NAN; g.col_rows() * g.col_cols()];
            im2col(&g, &image, &mut cols);
            let (oh, ow, pad) = (g.out_height(), g.out_width(), g.pad() as isize);
            for c in 0..2 {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (c * k + ky) * k + kx;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let iy = (oy * stride) as isize + ky as isize - pad;
                                let ix = (ox * stride) as isize + kx as isize - pad;
                                let want = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    0.0
                                } else {
                                    image[c * h * w + iy as usize * w + ix as usize]
                                };
                                assert_eq!(cols[row * oh * ow + oy * ow + ox], want, "{h}x{w} k{k} s{stride}");
                            }
                        }
                    }
                }
            }
        }
    }
}
