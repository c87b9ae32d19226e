//! Channel-major (`[c][h][w]`) tensor kernels with hand-written backward
//! passes. Square spatial dims throughout.

use crate::scalar::Scalar;

/// `[c * k * k][s * s]` patch matrix for a same-padded `k x k` convolution.
pub fn im2col<T: Scalar>(x: &[T], c: usize, s: usize, k: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let hw = s * s;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - r;
                let dx = kx as isize - r;
                for y in 0..s {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= s as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (s as isize - dx).min(s as isize) as usize;
                    if x0 >= x1 {
                        continue;
                    }
                    let src = &plane[sy as usize * s..][..s];
                    let dst = &mut row[y * s..][..s];
                    for xx in x0..x1 {
                        dst[xx] = src[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back and adds them to `dx`.
pub fn col2im_add<T: Scalar>(cols: &[T], c: usize, s: usize, k: usize, dx: &mut [T]) {
    let r = (k / 2) as isize;
    let hw = s * s;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                let dy = ky as isize - r;
                let ddx = kx as isize - r;
                for y in 0..s {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= s as isize {
                        continue;
                    }
                    let x0 = (-ddx).max(0) as usize;
                    let x1 = (s as isize - ddx).min(s as isize) as usize;
                    let src = &row[y * s..][..s];
                    let dst = &mut plane[sy as usize * s..][..s];
                    for xx in x0..x1 {
                        dst[(xx as isize + ddx) as usize] += src[xx];
                    }
                }
            }
        }
    }
}

/// Same-padded convolution: `y[co] = b[co] + sum W[co][ci,ky,kx] * patch`.
/// `w` is `[cout][cin * k * k]`; `b` may be empty (no bias).
pub fn conv_forward<T: Scalar>(x: &[T], cin: usize, s: usize, w: &[T], b: &[T], cout: usize, k: usize) -> Vec<T> {
    let hw = s * s;
    let kk = cin * k * k;
    let mut y = vec![T::zero(); cout * hw];
    if !b.is_empty() {
        for (co, plane) in y.chunks_mut(hw).enumerate() {
            plane.iter_mut().for_each(|v| *v = b[co]);
        }
    }
    let owned;
    let cols: &[T] = if k == 1 {
        x
    } else {
        owned = im2col(x, cin, s, k);
        &owned
    };
    T::gemm(cout, kk, hw, T::one(), w, kk as isize, 1, cols, hw as isize, 1, T::one(), &mut y, hw as isize, 1);
    y
}

/// Accumulates weight and bias gradients and, when `dx` is given, adds the
/// input gradient to it.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    x: &[T],
    cin: usize,
    s: usize,
    w: &[T],
    cout: usize,
    k: usize,
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
) {
    let hw = s * s;
    let kk = cin * k * k;
    if !db.is_empty() {
        for (co, plane) in dy.chunks(hw).enumerate() {
            db[co] += plane.iter().copied().sum::<T>();
        }
    }
    let owned;
    let cols: &[T] = if k == 1 {
        x
    } else {
        owned = im2col(x, cin, s, k);
        &owned
    };
    // dW[cout][kk] += dy[cout][hw] * cols^T
    T::gemm(cout, hw, kk, T::one(), dy, hw as isize, 1, cols, 1, hw as isize, T::one(), dw, kk as isize, 1);
    if let Some(dx) = dx {
        if k == 1 {
            T::gemm(kk, cout, hw, T::one(), w, 1, kk as isize, dy, hw as isize, 1, T::one(), dx, hw as isize, 1);
        } else {
            let mut dcols = vec![T::zero(); kk * hw];
            T::gemm(kk, cout, hw, T::one(), w, 1, kk as isize, dy, hw as isize, 1, T::zero(), &mut dcols, hw as isize, 1);
            col2im_add(&dcols, cin, s, k, dx);
        }
    }
}

pub fn relu_inplace<T: Scalar>(x: &mut [T]) {
    x.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

/// Zeroes `dy` wherever the ReLU output `y` was not positive.
pub fn relu_backward<T: Scalar>(y: &[T], dy: &mut [T]) {
    for (d, &v) in dy.iter_mut().zip(y) {
        if v <= T::zero() {
            *d = T::zero();
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// 2x2 max-pool with stride 2; returns the pooled tensor and the flat input
/// index of each maximum (first one on ties).
pub fn maxpool2<T: Scalar>(x: &[T], c: usize, s: usize) -> (Vec<T>, Vec<u32>) {
    let h = s / 2;
    let mut out = Vec::with_capacity(c * h * h);
    let mut idx = Vec::with_capacity(c * h * h);
    for ci in 0..c {
        let base = ci * s * s;
        for y in 0..h {
            for xx in 0..h {
                let mut best = base + 2 * y * s + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * y + dy) * s + 2 * xx + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

pub fn maxpool2_backward<T: Scalar>(dy: &[T], idx: &[u32], dx: &mut [T]) {
    for (&d, &i) in dy.iter().zip(idx) {
        dx[i as usize] += d;
    }
}

/// Nearest-neighbor 2x upsampling of a `c x s x s` tensor.
pub fn upsample2<T: Scalar>(x: &[T], c: usize, s: usize) -> Vec<T> {
    let o = 2 * s;
    let mut out = vec![T::zero(); c * o * o];
    for ci in 0..c {
        for y in 0..o {
            for xx in 0..o {
                out[(ci * o + y) * o + xx] = x[(ci * s + y / 2) * s + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dy: &[T], c: usize, s: usize) -> Vec<T> {
    let o = 2 * s;
    let mut dx = vec![T::zero(); c * s * s];
    for ci in 0..c {
        for y in 0..o {
            for xx in 0..o {
                dx[(ci * s + y / 2) * s + xx / 2] += dy[(ci * o + y) * o + xx];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], cin: usize, s: usize, w: &[f64], b: &[f64], cout: usize, k: usize) -> Vec<f64> {
        let r = (k / 2) as isize;
        let mut y = vec![0.0; cout * s * s];
        for co in 0..cout {
            for yy in 0..s as isize {
                for xx in 0..s as isize {
                    let mut acc = if b.is_empty() { 0.0 } else { b[co] };
                    for ci in 0..cin {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let (sy, sx) = (yy + ky - r, xx + kx - r);
                                if sy >= 0 && sx >= 0 && sy < s as isize && sx < s as isize {
                                    acc += w[co * cin * k * k + (ci * k + ky as usize) * k + kx as usize]
                                        * x[(ci * s + sy as usize) * s + sx as usize];
                                }
                            }
                        }
                    }
                    y[(co * s + yy as usize) * s + xx as usize] = acc;
                }
            }
        }
        y
    }

    fn vals(n: usize, seed: usize) -> Vec<f64> {
        (0..n).map(|i| (((i + seed) * 2654435761usize) % 1000) as f64 / 500.0 - 1.0).collect()
    }

    #[test]
    fn conv_matches_naive() {
        for k in [1, 3, 5] {
            let (cin, cout, s) = (3, 4, 6);
            let x = vals(cin * s * s, 1);
            let w = vals(cout * cin * k * k, 2);
            let b = vals(cout, 3);
            let got = conv_forward(&x, cin, s, &w, &b, cout, k);
            let want = naive_conv(&x, cin, s, &w, &b, cout, k);
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <dy, conv(x)> is linear in x and w; check both gradients against
        // directional derivatives
        let (cin, cout, s, k) = (2, 3, 5, 3);
        let x = vals(cin * s * s, 4);
        let w = vals(cout * cin * k * k, 5);
        let dy = vals(cout * s * s, 6);
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; cout];
        let mut dx = vec![0.0; x.len()];
        conv_backward(&x, cin, s, &w, cout, k, &dy, &mut dw, &mut db, Some(&mut dx));
        let f = |x: &[f64], w: &[f64], b: &[f64]| -> f64 {
            conv_forward(x, cin, s, w, b, cout, k).iter().zip(&dy).map(|(a, b)| a * b).sum()
        };
        let b0 = vec![0.0; cout];
        let vx = vals(x.len(), 7);
        let vw = vals(w.len(), 8);
        let lin_x = f(&vx, &w, &b0);
        assert!((lin_x - vx.iter().zip(&dx).map(|(a, b)| a * b).sum::<f64>()).abs() < 1e-10);
        let lin_w = f(&x, &vw, &b0);
        assert!((lin_w - vw.iter().zip(&dw).map(|(a, b)| a * b).sum::<f64>()).abs() < 1e-10);
        let ones = vec![1.0; cout];
        let lin_b = f(&vec![0.0; x.len()], &vec![0.0; w.len()], &ones);
        assert!((lin_b - db.iter().sum::<f64>()).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample() {
        let x = vec![1.0, 2.0, 5.0, 0.0, 3.0, 4.0, 1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 9.0, 2.0, 2.0];
        let (p, idx) = maxpool2(&x, 1, 4);
        assert_eq!(p, vec![4.0, 5.0, 9.0, 2.0]);
        assert_eq!(idx, vec![5, 2, 13, 10]);
        let u = upsample2(&p, 1, 2);
        assert_eq!(&u[..4], &[4.0, 4.0, 5.0, 5.0]);
        let d = upsample2_backward(&[1.0; 16], 1, 2);
        assert_eq!(d, vec![4.0; 4]);
        let mut dx = vec![0.0; 16];
        maxpool2_backward(&[1.0, 2.0, 3.0, 4.0], &idx, &mut dx);
        assert_eq!((dx[5], dx[2], dx[13], dx[10]), (1.0, 2.0, 3.0, 4.0));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(40.0f64), 1.0);
        assert_eq!(sigmoid(40.0f32), 1.0);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(-800.0f64).is_finite());
    }
}
