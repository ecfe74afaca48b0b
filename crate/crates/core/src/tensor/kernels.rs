//! Raw loops shared by forward and backward passes.

use super::Float;

/// Splits `shape` around `axis` into `(outer, n, inner)` extents.
pub(crate) fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Swaps axes `a1 < a2` of a row-major buffer.
pub(crate) fn swap_axes<F: Float>(src: &[F], shape: &[usize], a1: usize, a2: usize) -> Vec<F> {
    debug_assert!(a1 < a2);
    let p0: usize = shape[..a1].iter().product();
    let d1 = shape[a1];
    let p1: usize = shape[a1 + 1..a2].iter().product();
    let d2 = shape[a2];
    let p2: usize = shape[a2 + 1..].iter().product();
    let mut out = vec![F::zero(); src.len()];
    // source index: (((i0*d1 + i1)*p1 + j)*d2 + i2)*p2 + r
    // target index: (((i0*d2 + i2)*p1 + j)*d1 + i1)*p2 + r
    for i0 in 0..p0 {
        for i1 in 0..d1 {
            for j in 0..p1 {
                for i2 in 0..d2 {
                    let s = (((i0 * d1 + i1) * p1 + j) * d2 + i2) * p2;
                    let t = (((i0 * d2 + i2) * p1 + j) * d1 + i1) * p2;
                    out[t..t + p2].copy_from_slice(&src[s..s + p2]);
                }
            }
        }
    }
    out
}

/// Polynomial `exp` (Cephes `expf`), written so the loop vectorizes.
/// Relative error stays within a few ulp over the clamped range.
pub(crate) fn exp_f32(xs: &mut [f32]) {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const C1: f32 = 0.693_359_4;
    const C2: f32 = -2.121_944_4e-4;
    // adding 1.5 * 2^23 rounds to the nearest integer without a floor call
    const SHIFTER: f32 = 12_582_912.0;
    for x in xs {
        let v = x.clamp(-87.3, 88.7);
        let t = v * LOG2E + SHIFTER;
        let n = t - SHIFTER;
        let r = v - n * C1 - n * C2;
        let mut y = 1.987_569_1e-4_f32;
        y = y * r + 1.398_199_9e-3;
        y = y * r + 8.333_452e-3;
        y = y * r + 4.166_579_6e-2;
        y = y * r + 0.166_666_65;
        y = y * r + 0.5;
        y = y * r * r + r + 1.0;
        let bits = (t.to_bits() as i32 - SHIFTER.to_bits() as i32 + 127) << 23;
        *x = y * f32::from_bits(bits as u32);
    }
}

/// Softmax (or log-softmax) of each slice along the middle extent `n`.
pub(crate) fn softmax<F: Float>(x: &[F], outer: usize, n: usize, inner: usize, log: bool) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    if inner == 1 && n > 0 {
        for (src, dst) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let mx = src.iter().fold(F::neg_infinity(), |m, &v| if v > m { v } else { m });
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s - mx;
            }
            if log {
                let mut e = dst.to_vec();
                F::exp_slice(&mut e);
                let lse = e.iter().fold(F::zero(), |a, &b| a + b).ln();
                for d in dst.iter_mut() {
                    *d -= lse;
                }
            } else {
                F::exp_slice(dst);
                let inv = F::one() / dst.iter().fold(F::zero(), |a, &b| a + b);
                for d in dst.iter_mut() {
                    *d *= inv;
                }
            }
        }
        return out;
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mx = F::neg_infinity();
            for j in 0..n {
                mx = mx.max(x[base + j * inner]);
            }
            let mut sum = F::zero();
            for j in 0..n {
                let e = (x[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            if log {
                let lse = sum.ln();
                for j in 0..n {
                    out[base + j * inner] = x[base + j * inner] - mx - lse;
                }
            } else {
                let inv = F::one() / sum;
                for j in 0..n {
                    out[base + j * inner] *= inv;
                }
            }
        }
    }
    out
}

/// Per-channel mean and inverse standard deviation over `(outer, inner)`.
pub(crate) fn channel_stats<F: Float>(
    x: &[F],
    outer: usize,
    c: usize,
    inner: usize,
    eps: F,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let count = F::cst((outer * inner) as f64);
    let mut mean = vec![F::zero(); c];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for v in &x[base..base + inner] {
                mean[ch] += *v;
            }
        }
    }
    for m in &mut mean {
        *m = *m / count;
    }
    let mut var = vec![F::zero(); c];
    for o in 0..outer {
        for ch in 0..c {
            let base = (o * c + ch) * inner;
            for v in &x[base..base + inner] {
                let d = *v - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    for v in &mut var {
        *v = *v / count;
    }
    let rstd = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    (mean, var, rstd)
}

/// Unfolds `[b, cin, lin]` into `[b, lout, cin * k]` patches.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<F: Float>(
    x: &[F],
    b: usize,
    cin: usize,
    lin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
) -> Vec<F> {
    let width = cin * k;
    let mut cols = vec![F::zero(); b * lout * width];
    for bi in 0..b {
        for l in 0..lout {
            let row = (bi * lout + l) * width;
            for c in 0..cin {
                for j in 0..k {
                    let pos = (l * stride + j) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < lin {
                        cols[row + c * k + j] = x[(bi * cin + c) * lin + pos as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im<F: Float>(
    cols: &[F],
    b: usize,
    cin: usize,
    lin: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
) -> Vec<F> {
    let width = cin * k;
    let mut x = vec![F::zero(); b * cin * lin];
    for bi in 0..b {
        for l in 0..lout {
            let row = (bi * lout + l) * width;
            for c in 0..cin {
                for j in 0..k {
                    let pos = (l * stride + j) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < lin {
                        x[(bi * cin + c) * lin + pos as usize] += cols[row + c * k + j];
                    }
                }
            }
        }
    }
    x
}

#[inline]
pub(crate) fn add_into<F: Float>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_matches_std() {
        let mut xs: Vec<f32> = (-8000..=8000).map(|i| i as f32 * 0.01).collect();
        let want: Vec<f32> = xs.iter().map(|x| x.exp()).collect();
        exp_f32(&mut xs);
        for (a, b) in xs.iter().zip(&want) {
            assert!(((a - b) / b).abs() < 2e-7, "{a} vs {b}");
        }
        let mut edge = [-1000.0f32, 0.0, -87.0];
        exp_f32(&mut edge);
        assert!(edge[0] >= 0.0 && edge[0] < 1e-37);
        assert_eq!(edge[1], 1.0);
    }

    #[test]
    fn swap_axes_matches_index_formula() {
        let shape = [2, 3, 4, 5];
        let src: Vec<f64> = (0..120).map(|v| v as f64).collect();
        let out = swap_axes(&src, &shape, 1, 3);
        // out shape [2,5,4,3]
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    for d in 0..5 {
                        let s = ((a * 3 + b) * 4 + c) * 5 + d;
                        let t = ((a * 5 + d) * 4 + c) * 3 + b;
                        assert_eq!(out[t], src[s]);
                    }
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let (b, cin, lin, k, s, p) = (2, 3, 7, 3, 2, 1);
        let lout = (lin + 2 * p - k) / s + 1;
        let x: Vec<f64> = (0..b * cin * lin).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..b * lout * cin * k).map(|i| (i as f64 * 0.11).cos()).collect();
        let cx = im2col(&x, b, cin, lin, k, s, p, lout);
        let ay = col2im(&y, b, cin, lin, k, s, p, lout);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ay).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
