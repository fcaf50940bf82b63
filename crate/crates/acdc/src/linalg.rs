//! Flat-buffer matrix kernels and convolution lowering (im2col / col2im).
//!
//! All routines are deterministic for a fixed input regardless of thread
//! count: parallelism is only ever over disjoint output rows or batch
//! elements, and the accumulation order within each row is fixed.

use crate::scalar::Scalar;
use rayon::prelude::*;

/// Work threshold (multiply count) above which matmuls parallelize over rows.
const PAR_THRESHOLD: usize = 1 << 18;

/// C[m,n] = A[m,k] · B[k,n].
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::ZERO; m * n];
    let row = |i: usize, out: &mut [T]| {
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in out.iter_mut().zip(brow) {
                *o += aik * *bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out)| row(i, out));
    } else {
        for (i, out) in c.chunks_mut(n).enumerate() {
            row(i, out);
        }
    }
    c
}

/// C[m,n] = A[m,k] · B[n,k]ᵀ.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![T::ZERO; m * n];
    let row = |i: usize, out: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in out.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (av, bv) in arow.iter().zip(brow) {
                acc += *av * *bv;
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out)| row(i, out));
    } else {
        for (i, out) in c.chunks_mut(n).enumerate() {
            row(i, out);
        }
    }
    c
}

/// C[m,n] = A[k,m]ᵀ · B[k,n].
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::ZERO; m * n];
    let row = |i: usize, out: &mut [T]| {
        for kk in 0..k {
            let aki = a[kk * m + i];
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, bv) in out.iter_mut().zip(brow) {
                *o += aki * *bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out)| row(i, out));
    } else {
        for (i, out) in c.chunks_mut(n).enumerate() {
            row(i, out);
        }
    }
    c
}

/// Output extent of a 1-d convolution: floor((h + 2·pad - l) / stride) + 1.
pub fn conv_out_dim(h: usize, pad: usize, l: usize, stride: usize) -> Option<usize> {
    let padded = h + 2 * pad;
    if l > padded || stride == 0 {
        return None;
    }
    Some((padded - l) / stride + 1)
}

/// Unfolds one image [cin, h, w] into a [cin·kh·kw, oh·ow] patch matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut cols = vec![T::ZERO; cin * kh * kw * oh * ow];
    let ncols = oh * ow;
    for ci in 0..cin {
        let xc = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let out = &mut cols[r * ncols..(r + 1) * ncols];
                for oi in 0..oh {
                    let yi = (oi * stride + ki) as isize - pad as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    let xrow = &xc[yi as usize * w..(yi as usize + 1) * w];
                    for oj in 0..ow {
                        let xj = (oj * stride + kj) as isize - pad as isize;
                        if xj >= 0 && xj < w as isize {
                            out[oi * ow + oj] = xrow[xj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds a patch-matrix gradient back onto the image, the adjoint of `im2col`.
/// Overlapping patches accumulate additively.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let mut x = vec![T::ZERO; cin * h * w];
    let ncols = oh * ow;
    for ci in 0..cin {
        let xc = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (ci * kh + ki) * kw + kj;
                let src = &cols[r * ncols..(r + 1) * ncols];
                for oi in 0..oh {
                    let yi = (oi * stride + ki) as isize - pad as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    let xrow = &mut xc[yi as usize * w..(yi as usize + 1) * w];
                    for oj in 0..ow {
                        let xj = (oj * stride + kj) as isize - pad as isize;
                        if xj >= 0 && xj < w as isize {
                            xrow[xj as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_oracle() {
        // [[1,2],[3,4]] · [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul::<f64>(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect(); // 3x4
        let b: Vec<f64> = (0..20).map(|v| v as f64 * 0.25 + 1.0).collect(); // 4x5
        let c = matmul(&a, &b, 3, 4, 5);
        // A·B == A·(Bᵀ)ᵀ
        let mut bt = vec![0.0; 20]; // 5x4
        for i in 0..4 {
            for j in 0..5 {
                bt[j * 4 + i] = b[i * 5 + j];
            }
        }
        assert_eq!(matmul_nt(&a, &bt, 3, 4, 5), c);
        let mut at = vec![0.0; 12]; // 4x3
        for i in 0..3 {
            for j in 0..4 {
                at[j * 3 + i] = a[i * 4 + j];
            }
        }
        assert_eq!(matmul_tn(&at, &b, 3, 4, 5), c);
    }

    #[test]
    fn out_dim_formula() {
        assert_eq!(conv_out_dim(8, 1, 3, 1), Some(8));
        assert_eq!(conv_out_dim(8, 0, 3, 1), Some(6));
        assert_eq!(conv_out_dim(8, 0, 3, 2), Some(3));
        assert_eq!(conv_out_dim(2, 0, 5, 1), None);
        assert_eq!(conv_out_dim(8, 0, 3, 0), None);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let (cin, h, w, kh, kw, stride, pad) = (2, 5, 4, 3, 3, 2, 1);
        let oh = conv_out_dim(h, pad, kh, stride).unwrap();
        let ow = conv_out_dim(w, pad, kw, stride).unwrap();
        let x: Vec<f64> = (0..cin * h * w).map(|v| (v as f64).sin()).collect();
        let y: Vec<f64> = (0..cin * kh * kw * oh * ow)
            .map(|v| (v as f64).cos())
            .collect();
        let fx = im2col(&x, cin, h, w, kh, kw, stride, pad, oh, ow);
        let fty = col2im(&y, cin, h, w, kh, kw, stride, pad, oh, ow);
        let lhs: f64 = fx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&fty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "lhs={lhs} rhs={rhs}");
    }
}
