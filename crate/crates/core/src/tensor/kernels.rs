//! Raw slice kernels behind the tape operations.

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds the input into a `[C*kh*kw, out_h*out_w]` patch matrix. Padded
/// taps are zero.
pub(crate) fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let p = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * p];
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Folds a patch-matrix gradient back onto the input layout (accumulating).
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let p = g.out_len();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[iy as usize * g.width + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

const CO_TILE: usize = 4;
const P_TILE: usize = 16;

/// `out[co, p] = bias[co] + sum_r kernel[co, r] * cols[r, p]`.
///
/// Each output accumulates its taps in ascending `r` order starting from the
/// bias, the same order as a direct nested-loop convolution, so the result
/// is bit-identical to it.
pub(crate) fn conv_forward(
    kernel: &[f64],
    bias: &[f64],
    cols: &[f64],
    c_out: usize,
    r_len: usize,
    p_len: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c_out * p_len];
    let mut co0 = 0;
    while co0 < c_out {
        let n_co = CO_TILE.min(c_out - co0);
        let mut p0 = 0;
        while p0 < p_len {
            let n_p = P_TILE.min(p_len - p0);
            if n_co == CO_TILE && n_p == P_TILE {
                let mut acc = [[0.0f64; P_TILE]; CO_TILE];
                for (j, row) in acc.iter_mut().enumerate() {
                    *row = [bias[co0 + j]; P_TILE];
                }
                for r in 0..r_len {
                    let c: &[f64; P_TILE] = cols[r * p_len + p0..r * p_len + p0 + P_TILE]
                        .try_into()
                        .unwrap();
                    for (j, row) in acc.iter_mut().enumerate() {
                        let k = kernel[(co0 + j) * r_len + r];
                        for l in 0..P_TILE {
                            row[l] += k * c[l];
                        }
                    }
                }
                for (j, row) in acc.iter().enumerate() {
                    out[(co0 + j) * p_len + p0..(co0 + j) * p_len + p0 + P_TILE]
                        .copy_from_slice(row);
                }
            } else {
                for j in 0..n_co {
                    let co = co0 + j;
                    for l in 0..n_p {
                        let p = p0 + l;
                        let mut acc = bias[co];
                        for r in 0..r_len {
                            acc += kernel[co * r_len + r] * cols[r * p_len + p];
                        }
                        out[co * p_len + p] = acc;
                    }
                }
            }
            p0 += P_TILE;
        }
        co0 += CO_TILE;
    }
    out
}

/// Row-major matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Views a row-major `[rows, cols]` buffer as its transpose.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }
}

/// `c = a·b + beta·c` with `a: m×k`, `b: k×n` and row-major `c: m×n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef, b: MatRef, beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let a_extent = if m > 0 && k > 0 {
        (m - 1) * a.row_stride + (k - 1) * a.col_stride + 1
    } else {
        0
    };
    let b_extent = if k > 0 && n > 0 {
        (k - 1) * b.row_stride + (n - 1) * b.col_stride + 1
    } else {
        0
    };
    assert!(a.data.len() >= a_extent && b.data.len() >= b_extent);
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the borrowed slices, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Source coordinate and blend weight for one output row/column under the
/// align-corners convention.
#[derive(Clone, Copy, Debug)]
pub(crate) struct LerpTap {
    pub lo: usize,
    pub hi: usize,
    pub weight: f64,
}

pub(crate) fn align_corners_taps(src: usize, dst: usize) -> Vec<LerpTap> {
    (0..dst)
        .map(|i| {
            if dst == 1 || src == 1 {
                return LerpTap {
                    lo: 0,
                    hi: 0,
                    weight: 0.0,
                };
            }
            let pos = (i * (src - 1)) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            LerpTap {
                lo,
                hi,
                weight: pos - lo as f64,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_hit_corners_exactly() {
        let taps = align_corners_taps(4, 13);
        assert_eq!(taps[0].lo, 0);
        assert_eq!(taps[0].weight, 0.0);
        assert_eq!(taps[12].lo, 3);
        assert_eq!(taps[12].weight, 0.0);
    }

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, MatRef::rows(&a, 3), MatRef::rows(&b, 4), 0.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|t| a[i * 3 + t] * b[t * 4 + j]).sum();
                assert!((c[i * 4 + j] - want).abs() < 1e-12);
            }
        }
        // transposed view of b (4x3 as 3x4^T)
        let bt: Vec<f64> = (0..12).map(|v| v as f64).collect(); // 4x3
        let mut c2 = vec![0.0; 8];
        gemm(2, 3, 4, MatRef::rows(&a, 3), MatRef::transposed(&bt, 3), 0.0, &mut c2);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|t| a[i * 3 + t] * bt[j * 3 + t]).sum();
                assert!((c2[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }
}
