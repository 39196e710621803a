//! Row kernels shared by the differentiation tape and the cached inference
//! path, so that both compute bit-identical forward values.

use super::Scalar;

/// In-place, max-shifted softmax of one row.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    let inv = T::one() / total;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// In-place log-softmax of one row: `x - max - ln Σ exp(x - max)`.
pub fn log_softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let total: T = row.iter().map(|&x| (x - max).exp()).sum();
    let shift = max + total.ln();
    for x in row.iter_mut() {
        *x -= shift;
    }
}

/// RMS normalization of one row. Returns `1 / sqrt(mean(x²) + eps)`.
pub fn rmsnorm_row<T: Scalar>(x: &[T], gain: &[T], eps: T, out: &mut [T]) -> T {
    let n = T::from_f64(x.len() as f64);
    let ms = x.iter().map(|&v| v * v).sum::<T>() / n;
    let inv = T::one() / (ms + eps).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
    inv
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

/// Rotary frequency for pair index `i` of a head of width `head_dim`.
#[inline]
pub fn rope_inv_freq(i: usize, head_dim: usize, base: f64) -> f64 {
    base.powf(-(2.0 * i as f64) / head_dim as f64)
}

/// Rotates one row in place. The row holds `heads` contiguous heads; within
/// a head, component `i` is paired with `i + head_dim / 2`. `inverse` rotates
/// by the negated angle, which is the transpose used in the backward pass.
pub fn rope_row<T: Scalar>(row: &mut [T], position: usize, heads: usize, base: f64, inverse: bool) {
    if position == 0 {
        return;
    }
    let head_dim = row.len() / heads;
    let half = head_dim / 2;
    for h in 0..heads {
        let head = &mut row[h * head_dim..(h + 1) * head_dim];
        for i in 0..half {
            let angle = position as f64 * rope_inv_freq(i, head_dim, base);
            let (s, c) = angle.sin_cos();
            let (s, c) = (T::from_f64(if inverse { -s } else { s }), T::from_f64(c));
            let a = head[i];
            let b = head[i + half];
            head[i] = a * c - b * s;
            head[i + half] = a * s + b * c;
        }
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut r = [0.0f64; 4];
        softmax_row(&mut r);
        assert_eq!(r, [0.25; 4]);
    }

    #[test]
    fn rmsnorm_hand_value() {
        let mut out = [0.0f64; 2];
        rmsnorm_row(&[3.0, 4.0], &[1.0, 1.0], 1e-6, &mut out);
        let d = (12.5f64 + 1e-6).sqrt();
        assert!((out[0] - 3.0 / d).abs() < 1e-15);
        assert!((out[0] - 0.8485).abs() < 1e-4);
        assert!((out[1] - 1.1314).abs() < 1e-4);
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let orig = [0.3f64, -1.2, 0.7, 2.0, 0.1, 0.5, -0.4, 0.9];
        let mut r = orig;
        rope_row(&mut r, 17, 2, 10_000.0, false);
        assert_ne!(r, orig);
        rope_row(&mut r, 17, 2, 10_000.0, true);
        for (a, b) in r.iter().zip(orig) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_preserves_relative_dot_products() {
        // <R(p)q, R(p')k> depends only on p - p'.
        let q = [0.3f64, -1.2, 0.7, 2.0];
        let k = [1.1f64, 0.4, -0.6, 0.2];
        let dot = |pq: usize, pk: usize| {
            let (mut a, mut b) = (q, k);
            rope_row(&mut a, pq, 1, 10_000.0, false);
            rope_row(&mut b, pk, 1, 10_000.0, false);
            a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
        };
        assert!((dot(5, 2) - dot(13, 10)).abs() < 1e-12);
    }
}
