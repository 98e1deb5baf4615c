//! Raw dense kernels shared by forward and backward passes.
//!
//! Loops are ordered so the innermost dimension walks contiguous memory and
//! autovectorizes; at desk scale this is the whole performance story.

use super::elem::Elem;

/// c[m,n] += a[m,k] * b[k,n]
pub fn mm_nn<E: Elem>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == E::ZERO {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T  (dot products of contiguous rows)
pub fn mm_nt<E: Elem>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::ZERO;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] += acc;
        }
    }
}

/// c[m,n] += a[k,m]^T * b[k,n]
pub fn mm_tn<E: Elem>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == E::ZERO {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// Output spatial size of a convolution along one dimension.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfold x[cin,h,w] into cols[cin*kh*kw, oh*ow] for matmul-based convolution.
#[allow(clippy::too_many_arguments)]
pub fn im2col<E: Elem>(
    x: &[E],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<E> {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let ohw = oh * ow;
    let mut cols = vec![E::ZERO; cin * kh * kw * ohw];
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let src = (ci * h + iy as usize) * w;
                    let dst = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        cols[dst + ox] = x[src + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add cols back into an image: the adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<E: Elem>(
    cols: &[E],
    dx: &mut [E],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(w, kw, stride, pad);
    let ohw = oh * ow;
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let dst = (ci * h + iy as usize) * w;
                    let src = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        dx[dst + ix as usize] += cols[src + ox];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_nn_small() {
        // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [1.0, 1.0];
        let mut c = [0.0; 2];
        mm_nn(&a, &b, &mut c, 2, 2, 1);
        assert_eq!(c, [3.0, 7.0]);
    }

    #[test]
    fn mm_variants_agree() {
        let m = 3;
        let k = 4;
        let n = 2;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.7 - 2.0).collect();
        let mut c0 = vec![0.0; m * n];
        mm_nn(&a, &b, &mut c0, m, k, n);

        // b transposed: bt[n,k]
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c1 = vec![0.0; m * n];
        mm_nt(&a, &bt, &mut c1, m, k, n);
        assert_eq!(c0, c1);

        // a transposed: at[k,m]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        mm_tn(&at, &b, &mut c2, m, k, n);
        assert_eq!(c0, c2);
    }

    #[test]
    fn im2col_roundtrip_identity_kernel() {
        // 1x1 kernel, stride 1, no pad: cols is just the image.
        let x: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64).collect();
        let cols = im2col(&x, 2, 3, 3, 1, 1, 1, 0);
        assert_eq!(cols, x);
        let mut dx = vec![0.0; x.len()];
        col2im_acc(&cols, &mut dx, 2, 3, 3, 1, 1, 1, 0);
        assert_eq!(dx, x);
    }
}
