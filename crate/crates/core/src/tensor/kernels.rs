//! Flat-buffer numeric kernels behind the tape operations.
//!
//! Everything here works on row-major `&[f64]` slices with explicit
//! dimensions and leading strides. The summation order of every kernel is
//! fixed, so results are bit-identical from run to run regardless of
//! blocking or thread count.

use std::sync::OnceLock;

/// Number of worker threads for the large GEMM paths. Read once from
/// `DEVGAN_THREADS`; defaults to 1.
pub fn kernel_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("DEVGAN_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}

/// Fused multiply-add where the hardware has it, plain ops elsewhere.
/// (`mul_add` without an FMA unit falls back to a slow libm call.)
#[inline(always)]
fn fma(a: f64, b: f64, acc: f64) -> f64 {
    #[cfg(target_feature = "fma")]
    {
        a.mul_add(b, acc)
    }
    #[cfg(not(target_feature = "fma"))]
    {
        acc + a * b
    }
}

/// C[m,n] += A[m,k] * B[k,n], all row-major and contiguous.
///
/// Row-parallel when the work is large enough and `DEVGAN_THREADS` > 1;
/// each output row is produced by exactly one thread with the same
/// per-element order as the serial path, so the split never changes bits.
pub fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let threads = kernel_threads();
    if threads > 1 && m >= 2 * threads && m * k * n >= 1 << 22 {
        let rows_per = m.div_ceil(threads);
        std::thread::scope(|scope| {
            for (chunk_idx, c_chunk) in c.chunks_mut(rows_per * n).enumerate() {
                let row0 = chunk_idx * rows_per;
                let rows = c_chunk.len() / n;
                let a_part = &a[row0 * k..(row0 + rows) * k];
                scope.spawn(move || gemm_nn_strided(a_part, k, b, n, c_chunk, n, rows, k, n));
            }
        });
    } else {
        gemm_nn_strided(a, k, b, n, c, n, m, k, n);
    }
}

/// C[m,n] += A[m,k] * B[k,n] with explicit leading strides, so operands
/// can be column blocks of wider matrices.
#[allow(clippy::too_many_arguments)]
pub fn gemm_nn_strided(
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    // 4 C rows per sweep of B keeps B traffic down; the per-element order
    // inside each row is identical to the single-row tail path.
    let mut i = 0;
    while i + 4 <= m {
        let a0 = &a[i * lda..i * lda + k];
        let a1 = &a[(i + 1) * lda..(i + 1) * lda + k];
        let a2 = &a[(i + 2) * lda..(i + 2) * lda + k];
        let a3 = &a[(i + 3) * lda..(i + 3) * lda + k];
        let (c01, c23) = c[i * ldc..(i + 3) * ldc + n].split_at_mut(2 * ldc);
        let (c0, c1) = c01.split_at_mut(ldc);
        let (c2, c3raw) = c23.split_at_mut(ldc);
        let c0 = &mut c0[..n];
        let c1 = &mut c1[..n];
        let c2 = &mut c2[..n];
        let c3 = &mut c3raw[..n];
        for kk in 0..k {
            let b_row = &b[kk * ldb..kk * ldb + n];
            let (v0, v1, v2, v3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
            for j in 0..n {
                let bj = b_row[j];
                c0[j] = fma(v0, bj, c0[j]);
                c1[j] = fma(v1, bj, c1[j]);
                c2[j] = fma(v2, bj, c2[j]);
                c3[j] = fma(v3, bj, c3[j]);
            }
        }
        i += 4;
    }
    while i < m {
        let a_row = &a[i * lda..i * lda + k];
        let c_row = &mut c[i * ldc..i * ldc + n];
        for kk in 0..k {
            let av = a_row[kk];
            let b_row = &b[kk * ldb..kk * ldb + n];
            for j in 0..n {
                c_row[j] = fma(av, b_row[j], c_row[j]);
            }
        }
        i += 1;
    }
}

/// dst[c,r] = src[r,c] for a row-major `rows x cols` matrix (leading
/// stride `lds` on the source rows).
pub fn transpose_strided(src: &[f64], lds: usize, rows: usize, cols: usize, dst: &mut [f64]) {
    debug_assert!(dst.len() >= rows * cols);
    for r in 0..rows {
        let s_row = &src[r * lds..r * lds + cols];
        for (col, &v) in s_row.iter().enumerate() {
            dst[col * rows + r] = v;
        }
    }
}

pub fn transpose(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    debug_assert_eq!(src.len(), rows * cols);
    transpose_strided(src, cols, rows, cols, dst);
}

/// Geometry of one 2-D convolution application.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels_in: usize,
    pub height_in: usize,
    pub width_in: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub height_out: usize,
    pub width_out: usize,
}

impl ConvGeom {
    /// Output extent of a strided convolution along one axis.
    pub fn conv_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if padded < kernel || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    /// Output extent of a transposed convolution along one axis.
    pub fn conv_transpose_extent(
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Option<usize> {
        let grown = (input - 1) * stride + kernel;
        grown.checked_sub(2 * pad).filter(|&e| e >= 1)
    }

    pub fn col_rows(&self) -> usize {
        self.channels_in * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.height_out * self.width_out
    }

    /// Output rows per blocked pass, sized so one col block stays around
    /// 2 MB and cache-resident.
    pub fn block_rows(&self) -> usize {
        let target_cols = (1 << 18) / self.col_rows().max(1); // ~2 MB of f64
        (target_cols / self.width_out.max(1)).clamp(1, self.height_out)
    }
}

/// Unfold output rows [oy0, oy1) of one sample `src[C,H,W]` into
/// `col[C*kh*kw, (oy1-oy0)*Wo]`.
#[allow(clippy::needless_range_loop)]
pub fn im2col_rows(src: &[f64], geom: &ConvGeom, oy0: usize, oy1: usize, col: &mut [f64]) {
    let (h, w) = (geom.height_in, geom.width_in);
    let wo = geom.width_out;
    let patch = (oy1 - oy0) * wo;
    col[..geom.col_rows() * patch].fill(0.0);
    for c in 0..geom.channels_in {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for kh in 0..geom.kernel_h {
            for kw in 0..geom.kernel_w {
                let row = (c * geom.kernel_h + kh) * geom.kernel_w + kw;
                let out_row = &mut col[row * patch..(row + 1) * patch];
                for oy in oy0..oy1 {
                    let iy = (oy * geom.stride + kh) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut out_row[(oy - oy0) * wo..(oy - oy0 + 1) * wo];
                    for ox in 0..wo {
                        let ix = (ox * geom.stride + kw) as isize - geom.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Fold `col[C*kh*kw, (oy1-oy0)*Wo]` (output rows [oy0, oy1)) back onto
/// `dst[C,H,W]`, accumulating where patches overlap. Exact adjoint of
/// [`im2col_rows`] over the same row range.
#[allow(clippy::needless_range_loop)]
pub fn col2im_rows_acc(col: &[f64], geom: &ConvGeom, oy0: usize, oy1: usize, dst: &mut [f64]) {
    let (h, w) = (geom.height_in, geom.width_in);
    let wo = geom.width_out;
    let patch = (oy1 - oy0) * wo;
    for c in 0..geom.channels_in {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for kh in 0..geom.kernel_h {
            for kw in 0..geom.kernel_w {
                let row = (c * geom.kernel_h + kh) * geom.kernel_w + kw;
                let col_row = &col[row * patch..(row + 1) * patch];
                for oy in oy0..oy1 {
                    let iy = (oy * geom.stride + kh) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &col_row[(oy - oy0) * wo..(oy - oy0 + 1) * wo];
                    for ox in 0..wo {
                        let ix = (ox * geom.stride + kw) as isize - geom.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Whole-sample im2col (tests and small shapes).
pub fn im2col(src: &[f64], geom: &ConvGeom, col: &mut [f64]) {
    im2col_rows(src, geom, 0, geom.height_out, col);
}

/// Whole-sample col2im (tests and small shapes).
pub fn col2im_acc(col: &[f64], geom: &ConvGeom, dst: &mut [f64]) {
    col2im_rows_acc(col, geom, 0, geom.height_out, dst);
}
