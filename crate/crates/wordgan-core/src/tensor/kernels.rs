//! Raw f64 compute kernels: matrix products and the im2col/col2im pair
//! behind both convolution directions.
//!
//! Every kernel writes each output element exactly once with a fixed
//! summation order, so results are bitwise reproducible at any rayon
//! thread count.

use rayon::prelude::*;

/// Below this many multiply-adds a parallel split costs more than it saves.
/// Set high enough that per-sample matmuls nested inside a parallel batch
/// loop stay sequential.
const PAR_FLOP_THRESHOLD: usize = 1 << 19;

/// C[m,n] = A[m,k] * B[k,n], row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    let work = m * k * n;
    if work >= PAR_FLOP_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| matmul_row(&a[i * k..(i + 1) * k], b, n, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            matmul_row(&a[i * k..(i + 1) * k], b, n, row);
        }
    }
    out
}

#[inline]
fn matmul_row(arow: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    for (p, &av) in arow.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let brow = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(brow) {
            *o += av * bv;
        }
    }
}

/// C[m,n] = A[m,k] * B[n,k]^T. Materializing B^T costs O(n*k) moves and
/// lets the O(m*k*n) product run through the vector-friendly axpy kernel.
pub fn matmul_abt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        let brow = &b[j * k..(j + 1) * k];
        for (p, &v) in brow.iter().enumerate() {
            bt[p * n + j] = v;
        }
    }
    matmul(a, &bt, m, k, n)
}

/// C[k,n] = A[m,k]^T * B[m,n].
pub fn matmul_atb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![0.0; k * n];
    let row = |p: usize, orow: &mut [f64]| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && k > 1 {
        out.par_chunks_mut(n).enumerate().for_each(|(p, r)| row(p, r));
    } else {
        for (p, r) in out.chunks_mut(n).enumerate() {
            row(p, r);
        }
    }
    out
}

/// Spatial geometry of one convolution: `out = (in + 2*pad - kernel) / stride + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry for the forward direction; fails unless the output extent
    /// divides exactly.
    pub fn forward(
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Option<ConvGeom> {
        if stride == 0 || kh == 0 || kw == 0 {
            return None;
        }
        let span_h = (in_h + 2 * padding).checked_sub(kh)?;
        let span_w = (in_w + 2 * padding).checked_sub(kw)?;
        if span_h % stride != 0 || span_w % stride != 0 {
            return None;
        }
        Some(ConvGeom {
            in_h,
            in_w,
            kh,
            kw,
            stride,
            padding,
            out_h: span_h / stride + 1,
            out_w: span_w / stride + 1,
        })
    }

    /// Geometry whose *conv input* extent is the transposed-conv output:
    /// `out = (in - 1) * stride - 2*pad + kernel`.
    pub fn transposed(
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Option<ConvGeom> {
        if stride == 0 || in_h == 0 || in_w == 0 {
            return None;
        }
        let out_h = ((in_h - 1) * stride + kh).checked_sub(2 * padding)?;
        let out_w = ((in_w - 1) * stride + kw).checked_sub(2 * padding)?;
        if out_h == 0 || out_w == 0 {
            return None;
        }
        // Self-consistency: the forward direction of the produced extent must
        // land back on (in_h, in_w).
        Some(ConvGeom {
            in_h: out_h,
            in_w: out_w,
            kh,
            kw,
            stride,
            padding,
            out_h: in_h,
            out_w: in_w,
        })
    }
}

/// Unfold one image (C, in_h, in_w) into columns of shape
/// [C*kh*kw, out_h*out_w]; out-of-bounds taps read as zero padding.
pub fn im2col(img: &[f64], channels: usize, g: &ConvGeom) -> Vec<f64> {
    let cols_w = g.out_h * g.out_w;
    let mut cols = vec![0.0; channels * g.kh * g.kw * cols_w];
    for c in 0..channels {
        let plane = &img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = &mut cols[((c * g.kh + u) * g.kw + v) * cols_w..][..cols_w];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + u) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + v) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-add columns back into an image buffer.
pub fn col2im(cols: &[f64], channels: usize, g: &ConvGeom) -> Vec<f64> {
    let cols_w = g.out_h * g.out_w;
    debug_assert_eq!(cols.len(), channels * g.kh * g.kw * cols_w);
    let mut img = vec![0.0; channels * g.in_h * g.in_w];
    for c in 0..channels {
        let plane = &mut img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = &cols[((c * g.kh + u) * g.kw + v) * cols_w..][..cols_w];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + u) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let src = &row[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + v) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[ix as usize] += src[ox];
                        }
                    }
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let i2 = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&i2, &b, 2, 2, 2), b);
    }

    #[test]
    fn matmul_hand_values() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 + 0.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64) * 0.3 - 1.0).collect(); // 3x4 or 4x3
        // A(2x3) * B(4x3)^T = 2x4
        let bt: Vec<f64> = {
            let mut t = vec![0.0; 12];
            for r in 0..4 {
                for c in 0..3 {
                    t[c * 4 + r] = b[r * 3 + c];
                }
            }
            t
        };
        assert_eq!(matmul_abt(&a, &b, 2, 3, 4), matmul(&a, &bt, 2, 3, 4));
        // A(2x3)^T * B(2x4) = 3x4
        let b2: Vec<f64> = (0..8).map(|i| (i as f64) * 0.7).collect();
        let at: Vec<f64> = {
            let mut t = vec![0.0; 6];
            for r in 0..2 {
                for c in 0..3 {
                    t[c * 2 + r] = a[r * 3 + c];
                }
            }
            t
        };
        assert_eq!(matmul_atb(&a, &b2, 2, 3, 4), matmul(&at, &b2, 3, 2, 4));
    }

    #[test]
    fn geometry_rejects_inexact_division() {
        assert!(ConvGeom::forward(5, 5, 2, 2, 2, 0).is_none());
        let g = ConvGeom::forward(4, 4, 2, 2, 2, 0).unwrap();
        assert_eq!((g.out_h, g.out_w), (2, 2));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random-ish data.
        let g = ConvGeom::forward(5, 4, 3, 2, 1, 1).unwrap();
        let channels = 2;
        let x: Vec<f64> = (0..channels * 20).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols_len = channels * g.kh * g.kw * g.out_h * g.out_w;
        let c: Vec<f64> = (0..cols_len).map(|i| (i as f64 * 0.61).cos()).collect();
        let ax = im2col(&x, channels, &g);
        let aty = col2im(&c, channels, &g);
        let lhs: f64 = ax.iter().zip(&c).map(|(p, q)| p * q).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}
