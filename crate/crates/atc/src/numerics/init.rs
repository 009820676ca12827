//! Weight initialization: orthogonal matrices via Householder QR.

use crate::rng::Rng;

/// Orthogonal `[rows, cols]` matrix (orthonormal rows if `rows <= cols`,
/// orthonormal columns otherwise), scaled by `gain`. Layers feeding a ReLU
/// use gain sqrt(2); biases start at zero.
pub fn orthogonal(rows: usize, cols: usize, gain: f32, rng: &mut Rng) -> Vec<f32> {
    let (m, n, transpose) = if rows >= cols { (rows, cols, false) } else { (cols, rows, true) };
    let mut a: Vec<f64> = (0..m * n).map(|_| rng.normal_f64()).collect();
    let q = thin_q(&mut a, m, n);
    let mut out = vec![0.0f32; rows * cols];
    if transpose {
        for i in 0..rows {
            for j in 0..cols {
                out[i * cols + j] = (q[j * n + i] * gain as f64) as f32;
            }
        }
    } else {
        for (o, v) in out.iter_mut().zip(&q) {
            *o = (*v * gain as f64) as f32;
        }
    }
    out
}

/// Thin Q factor of `a [m, n]` (m >= n) by Householder reflections, with the
/// sign convention that makes R's diagonal non-negative (unique Q for a
/// given input, which keeps runs reproducible).
fn thin_q(a: &mut [f64], m: usize, n: usize) -> Vec<f64> {
    debug_assert!(m >= n);
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        // Householder vector for column k below the diagonal
        let mut norm = 0.0f64;
        for i in k..m {
            norm += a[i * n + k] * a[i * n + k];
        }
        let norm = norm.sqrt();
        let mut v = vec![0.0f64; m];
        if norm > 0.0 {
            let alpha = if a[k * n + k] >= 0.0 { -norm } else { norm };
            for i in k..m {
                v[i] = a[i * n + k];
            }
            v[k] -= alpha;
            let vn: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if vn > 1e-300 {
                for x in v.iter_mut() {
                    *x /= vn;
                }
                // apply reflection to remaining columns
                for j in k..n {
                    let mut dot = 0.0f64;
                    for i in k..m {
                        dot += v[i] * a[i * n + j];
                    }
                    for i in k..m {
                        a[i * n + j] -= 2.0 * dot * v[i];
                    }
                }
            }
        }
        vs.push(v);
    }
    // sign fix: flip reflections where R's diagonal came out negative
    let flips: Vec<bool> = (0..n).map(|k| a[k * n + k] < 0.0).collect();
    // accumulate Q = H_0 H_1 ... H_{n-1} applied to thin identity
    let mut q = vec![0.0f64; m * n];
    for j in 0..n {
        q[j * n + j] = 1.0;
    }
    for k in (0..n).rev() {
        let v = &vs[k];
        for j in 0..n {
            let mut dot = 0.0f64;
            for i in k..m {
                dot += v[i] * q[i * n + j];
            }
            for i in k..m {
                q[i * n + j] -= 2.0 * dot * v[i];
            }
        }
    }
    for (k, flip) in flips.iter().enumerate() {
        if *flip {
            for i in 0..m {
                q[i * n + k] = -q[i * n + k];
            }
        }
    }
    q
}
