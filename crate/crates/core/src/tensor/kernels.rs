//! Raw slice kernels behind the graph ops. Everything here is single-threaded
//! with a fixed summation order, so results are bit-reproducible.

use super::array::Real;

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip != T::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], crow);
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api != T::zero() {
                axpy(api, brow, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

/// Output length of a 1-D convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = len + 2 * pad;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Unfolds one `[c, len]` signal into `[c*kernel, out_len]` columns.
pub fn im2col<T: Real>(
    x: &[T],
    c: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    out_len: usize,
    cols: &mut [T],
) {
    for ci in 0..c {
        let xrow = &x[ci * len..(ci + 1) * len];
        for kk in 0..kernel {
            let row = &mut cols[(ci * kernel + kk) * out_len..(ci * kernel + kk + 1) * out_len];
            let off = (kk * dilation) as isize - pad as isize;
            if stride == 1 {
                for (o, r) in row.iter_mut().enumerate() {
                    let pos = o as isize + off;
                    *r = if pos >= 0 && (pos as usize) < len { xrow[pos as usize] } else { T::zero() };
                }
            } else {
                for (o, r) in row.iter_mut().enumerate() {
                    let pos = (o * stride) as isize + off;
                    *r = if pos >= 0 && (pos as usize) < len { xrow[pos as usize] } else { T::zero() };
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `x`.
pub fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    out_len: usize,
    x: &mut [T],
) {
    for ci in 0..c {
        let xrow = &mut x[ci * len..(ci + 1) * len];
        for kk in 0..kernel {
            let row = &cols[(ci * kernel + kk) * out_len..(ci * kernel + kk + 1) * out_len];
            let off = (kk * dilation) as isize - pad as isize;
            for (o, &r) in row.iter().enumerate() {
                let pos = (o * stride) as isize + off;
                if pos >= 0 && (pos as usize) < len {
                    xrow[pos as usize] += r;
                }
            }
        }
    }
}

/// Permutes axes of a row-major buffer.
pub fn permute<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let in_strides = super::array::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    for _ in 0..outer {
        let base: usize = idx[..rank - 1].iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        assert!(c.iter().zip(&naive).all(|(x, y)| (x - y).abs() < 1e-12));

        let (_, bt) = permute(&b, &[k, n], &[1, 0]);
        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c);
        assert!(c.iter().zip(&naive).all(|(x, y)| (x - y).abs() < 1e-12));

        let (_, at) = permute(&a, &[m, k], &[1, 0]);
        let mut c = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, &mut c);
        assert!(c.iter().zip(&naive).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn conv_lengths_of_audio_stages() {
        assert_eq!(conv_out_len(51_200, 15, 4, 1600, 1), Some(13_597));
        assert_eq!(conv_out_len(13_597, 15, 5, 0, 1), Some(2_717));
        assert_eq!(conv_out_len(2_717, 15, 6, 2, 1), Some(452));
        assert_eq!(conv_out_len(452, 15, 7, 2, 1), Some(64));
    }

    #[test]
    fn permute_3d() {
        let data: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let (s, p) = permute(&data, &[2, 3, 4], &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        // out[l, i, j] = in[i, j, l]
        assert_eq!(p[0 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 0]);
        assert_eq!(p[3 * 6 + 0 * 3 + 1], data[0 * 12 + 1 * 4 + 3]);
    }
}
