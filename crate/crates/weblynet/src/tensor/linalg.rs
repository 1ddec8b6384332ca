//! Raw row-major kernels behind the tape ops. No shape checking here;
//! callers validate before dispatching.
//!
//! Large products split across threads by output row. Every output
//! element is written by exactly one task using the same per-element
//! accumulation order as the sequential path, so results are
//! bit-identical regardless of thread count or scheduling.

use rayon::prelude::*;

/// Below this many multiply-adds a product stays on one thread.
const PAR_MIN_FLOPS: usize = 1 << 19;

fn gemm_nn_row(i: usize, k: usize, n: usize, a: &[f64], b: &[f64], c_row: &mut [f64]) {
    let a_row = &a[i * k..(i + 1) * k];
    let mut p = 0;
    // Four rows of B per pass keeps the C row in registers longer.
    while p + 4 <= k {
        let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
        let b0 = &b[p * n..][..n];
        let b1 = &b[(p + 1) * n..][..n];
        let b2 = &b[(p + 2) * n..][..n];
        let b3 = &b[(p + 3) * n..][..n];
        for j in 0..n {
            c_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        p += 4;
    }
    while p < k {
        let aip = a_row[p];
        let b_row = &b[p * n..(p + 1) * n];
        for (cj, bj) in c_row.iter_mut().zip(b_row) {
            *cj += aip * bj;
        }
        p += 1;
    }
}

/// C += A(m×k) · B(k×n)
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m >= 2 && m * k * n >= PAR_MIN_FLOPS {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, c_row)| gemm_nn_row(i, k, n, a, b, c_row));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            gemm_nn_row(i, k, n, a, b, c_row);
        }
    }
}

/// C += A(m×k) · Bᵀ where B is stored n×k.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (ap, bp) in a_row.iter().zip(b_row) {
                acc += ap * bp;
            }
            c[i * n + j] += acc;
        }
    }
}

fn gemm_tn_row(i: usize, m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c_row: &mut [f64]) {
    for p in 0..k {
        let api = a[p * m + i];
        if api == 0.0 {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (cj, bj) in c_row.iter_mut().zip(b_row) {
            *cj += api * bj;
        }
    }
}

/// C += Aᵀ · B where A is stored k×m and B is k×n.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m >= 2 && m * k * n >= PAR_MIN_FLOPS {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, c_row)| gemm_tn_row(i, m, k, n, a, b, c_row));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            gemm_tn_row(i, m, k, n, a, b, c_row);
        }
    }
}

/// Geometry of one conv2d application to a single image.
#[derive(Debug, Clone)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
    /// Kernel rows that ever overlap the (unpadded) input. Rows outside
    /// this set only see zero padding for every output position, so they
    /// are dropped from the im2col matrix entirely.
    pub active_rows: Vec<usize>,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Option<ConvGeom> {
        let (sh, sw) = stride;
        let (ph, pw) = pad;
        if sh == 0 || sw == 0 || kh == 0 || kw == 0 {
            return None;
        }
        if kh > h + 2 * ph || kw > w + 2 * pw {
            return None;
        }
        let out_h = (h + 2 * ph - kh) / sh + 1;
        let out_w = (w + 2 * pw - kw) / sw + 1;
        let active_rows: Vec<usize> = (0..kh)
            .filter(|&r| (0..out_h).any(|y| (y * sh + r) >= ph && (y * sh + r) < h + ph))
            .collect();
        Some(ConvGeom {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            out_h,
            out_w,
            active_rows,
        })
    }

    /// Rows of the im2col matrix (and of the gathered weight matrix).
    pub fn col_rows(&self) -> usize {
        self.c_in * self.active_rows.len() * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image (c×h×w) into a column block of a wider matrix.
///
/// Row r of the im2col matrix (layout `(c, active_row, kw)`) occupies
/// `cols[r*col_stride + col_base ..]` for `out_h·out_w` entries. Callers
/// batching several images into one matrix pass the combined width as
/// `col_stride` and the image's column offset as `col_base`. The target
/// region must be zeroed.
pub fn im2col(geom: &ConvGeom, x: &[f64], cols: &mut [f64], col_stride: usize, col_base: usize) {
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    for ci in 0..geom.c_in {
        let x_chan = &x[ci * geom.h * geom.w..(ci + 1) * geom.h * geom.w];
        for (ri, &r) in geom.active_rows.iter().enumerate() {
            for s in 0..geom.kw {
                let row =
                    ((ci * geom.active_rows.len() + ri) * geom.kw + s) * col_stride + col_base;
                for oy in 0..geom.out_h {
                    let iy = oy * sh + r;
                    if iy < ph || iy >= geom.h + ph {
                        continue;
                    }
                    let iy = iy - ph;
                    for ox in 0..geom.out_w {
                        let ix = ox * sw + s;
                        if ix < pw || ix >= geom.w + pw {
                            continue;
                        }
                        cols[row + oy * geom.out_w + ox] = x_chan[iy * geom.w + (ix - pw)];
                    }
                }
            }
        }
    }
}

/// Scatter-adds one image's column block (see [`im2col`]) back into
/// `dx` (c×h×w).
pub fn col2im_accumulate(
    geom: &ConvGeom,
    cols: &[f64],
    dx: &mut [f64],
    col_stride: usize,
    col_base: usize,
) {
    let (sh, sw) = geom.stride;
    let (ph, pw) = geom.pad;
    for ci in 0..geom.c_in {
        let dx_chan = &mut dx[ci * geom.h * geom.w..(ci + 1) * geom.h * geom.w];
        for (ri, &r) in geom.active_rows.iter().enumerate() {
            for s in 0..geom.kw {
                let row =
                    ((ci * geom.active_rows.len() + ri) * geom.kw + s) * col_stride + col_base;
                for oy in 0..geom.out_h {
                    let iy = oy * sh + r;
                    if iy < ph || iy >= geom.h + ph {
                        continue;
                    }
                    let iy = iy - ph;
                    for ox in 0..geom.out_w {
                        let ix = ox * sw + s;
                        if ix < pw || ix >= geom.w + pw {
                            continue;
                        }
                        dx_chan[iy * geom.w + (ix - pw)] += cols[row + oy * geom.out_w + ox];
                    }
                }
            }
        }
    }
}

/// Plain dense transpose: `dst` (n×m) from `src` (m×n).
pub fn transpose_into(m: usize, n: usize, src: &[f64], dst: &mut [f64]) {
    debug_assert_eq!(src.len(), m * n);
    debug_assert_eq!(dst.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            dst[j * m + i] = src[i * n + j];
        }
    }
}

/// Gathers the active kernel rows of a full weight tensor
/// (c_out×c_in×kh×kw) into a dense (c_out × col_rows) matrix.
pub fn gather_weights(geom: &ConvGeom, c_out: usize, w_full: &[f64], w_gathered: &mut [f64]) {
    let ar = geom.active_rows.len();
    debug_assert_eq!(w_gathered.len(), c_out * geom.col_rows());
    for co in 0..c_out {
        for ci in 0..geom.c_in {
            for (ri, &r) in geom.active_rows.iter().enumerate() {
                let src = ((co * geom.c_in + ci) * geom.kh + r) * geom.kw;
                let dst = (co * geom.c_in * ar + ci * ar + ri) * geom.kw;
                w_gathered[dst..dst + geom.kw].copy_from_slice(&w_full[src..src + geom.kw]);
            }
        }
    }
}

/// Scatter-adds a gathered-weight gradient back into full kernel layout.
pub fn scatter_weight_grad(geom: &ConvGeom, c_out: usize, dw_gathered: &[f64], dw_full: &mut [f64]) {
    let ar = geom.active_rows.len();
    for co in 0..c_out {
        for ci in 0..geom.c_in {
            for (ri, &r) in geom.active_rows.iter().enumerate() {
                let dst = ((co * geom.c_in + ci) * geom.kh + r) * geom.kw;
                let src = (co * geom.c_in * ar + ci * ar + ri) * geom.kw;
                for s in 0..geom.kw {
                    dw_full[dst + s] += dw_gathered[src + s];
                }
            }
        }
    }
}
