//! Inner loops shared by the tape ops. All matrices are row-major slices.

use crate::scalar::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn matmul_at_b_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let a_pi = a[p * m + i];
            if a_pi == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_pi * b_pj;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_a_bt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // Four partial sums let the compiler vectorize without reassociation.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut tail = T::zero();
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Geometry of a stride-1 grouped 2-d cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
    pub groups: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn cin_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// Rows of one group's column matrix.
    pub fn col_rows(&self) -> usize {
        self.cin_per_group() * self.k * self.k
    }

    /// Columns of one group's column matrix.
    pub fn col_cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unfolds group `g` of `x` into a `(cg·k·k) × (n·oh·ow)` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], geo: &ConvGeom, g: usize, cols: &mut [T]) {
    let cg = geo.cin_per_group();
    let (k, pad) = (geo.k, geo.pad as isize);
    let (h, w, oh, ow) = (geo.h, geo.w, geo.oh, geo.ow);
    let p = geo.col_cols();
    for ci in 0..cg {
        let c = g * cg + ci;
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for n in 0..geo.n {
                    let src = &x[(n * geo.c_in + c) * h * w..(n * geo.c_in + c + 1) * h * w];
                    for oy in 0..oh {
                        let iy = oy as isize + ky as isize - pad;
                        let out_row = &mut dst[(n * oh + oy) * ow..(n * oh + oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            out_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let in_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = ox as isize + kx as isize - pad;
                            *v = if ix < 0 || ix >= w as isize {
                                T::zero()
                            } else {
                                in_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto `dx`.
pub(crate) fn col2im_acc<T: Scalar>(cols: &[T], geo: &ConvGeom, g: usize, dx: &mut [T]) {
    let cg = geo.cin_per_group();
    let (k, pad) = (geo.k, geo.pad as isize);
    let (h, w, oh, ow) = (geo.h, geo.w, geo.oh, geo.ow);
    let p = geo.col_cols();
    for ci in 0..cg {
        let c = g * cg + ci;
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for n in 0..geo.n {
                    let base = (n * geo.c_in + c) * h * w;
                    for oy in 0..oh {
                        let iy = oy as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let col_row = &src[(n * oh + oy) * ow..(n * oh + oy + 1) * ow];
                        for (ox, &v) in col_row.iter().enumerate() {
                            let ix = ox as isize + kx as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                dx[base + iy as usize * w + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Grouped convolution forward. Returns the output (N×C_out×oh×ow) and the
/// per-group column matrices needed by the backward pass.
pub(crate) fn conv2d_forward<T: Scalar>(x: &[T], wt: &[T], geo: &ConvGeom) -> (Vec<T>, Vec<T>) {
    let (rows, p) = (geo.col_rows(), geo.col_cols());
    let cog = geo.cout_per_group();
    let ohw = geo.oh * geo.ow;
    let mut cols = vec![T::zero(); geo.groups * rows * p];
    let mut out = vec![T::zero(); geo.n * geo.c_out * ohw];
    let mut y = vec![T::zero(); cog * p];
    for g in 0..geo.groups {
        let cols_g = &mut cols[g * rows * p..(g + 1) * rows * p];
        im2col(x, geo, g, cols_g);
        y.iter_mut().for_each(|v| *v = T::zero());
        let w_g = &wt[g * cog * rows..(g + 1) * cog * rows];
        matmul_acc(w_g, cols_g, &mut y, cog, rows, p);
        for oc in 0..cog {
            let c = g * cog + oc;
            for n in 0..geo.n {
                let dst = &mut out[(n * geo.c_out + c) * ohw..(n * geo.c_out + c + 1) * ohw];
                dst.copy_from_slice(&y[oc * p + n * ohw..oc * p + (n + 1) * ohw]);
            }
        }
    }
    (out, cols)
}

/// Grouped convolution backward; accumulates into `dw` and, when given, `dx`.
pub(crate) fn conv2d_backward<T: Scalar>(
    dout: &[T],
    wt: &[T],
    cols: &[T],
    geo: &ConvGeom,
    dw: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    let (rows, p) = (geo.col_rows(), geo.col_cols());
    let cog = geo.cout_per_group();
    let ohw = geo.oh * geo.ow;
    let mut dy = vec![T::zero(); cog * p];
    let mut dcols = dx.as_ref().map(|_| vec![T::zero(); rows * p]);
    let mut dw = dw;
    let mut dx = dx;
    for g in 0..geo.groups {
        for oc in 0..cog {
            let c = g * cog + oc;
            for n in 0..geo.n {
                let src = &dout[(n * geo.c_out + c) * ohw..(n * geo.c_out + c + 1) * ohw];
                dy[oc * p + n * ohw..oc * p + (n + 1) * ohw].copy_from_slice(src);
            }
        }
        let cols_g = &cols[g * rows * p..(g + 1) * rows * p];
        if let Some(dw) = dw.as_deref_mut() {
            let dw_g = &mut dw[g * cog * rows..(g + 1) * cog * rows];
            matmul_a_bt_acc(&dy, cols_g, dw_g, cog, p, rows);
        }
        if let (Some(dx), Some(dcols)) = (dx.as_deref_mut(), dcols.as_mut()) {
            dcols.iter_mut().for_each(|v| *v = T::zero());
            let w_g = &wt[g * cog * rows..(g + 1) * cog * rows];
            matmul_at_b_acc(w_g, &dy, dcols, rows, cog, p);
            col2im_acc(dcols, geo, g, dx);
        }
    }
}
