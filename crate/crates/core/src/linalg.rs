//! Small dense kernels for the logistic solver.

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Gram matrix `Z'Z` of a column-major `n × p` matrix, returned row-major
/// `p × p`. Rows are processed in blocks so the working set stays in cache.
pub(crate) fn gram(z: &[f64], n: usize, p: usize) -> Vec<f64> {
    const BLOCK: usize = 256;
    let mut g = vec![0.0; p * p];
    let mut start = 0;
    while start < n {
        let end = (start + BLOCK).min(n);
        for j in 0..p {
            let zj = &z[j * n + start..j * n + end];
            for k in 0..=j {
                let zk = &z[k * n + start..k * n + end];
                g[j * p + k] += dot(zj, zk);
            }
        }
        start = end;
    }
    for j in 0..p {
        for k in 0..j {
            g[k * p + j] = g[j * p + k];
        }
    }
    g
}

/// In-place Cholesky factorization of a row-major SPD matrix (lower factor).
/// Returns `false` on a non-positive pivot.
pub(crate) fn cholesky(a: &mut [f64], p: usize) -> bool {
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= a[j * p + k] * a[j * p + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * p + j] = d;
        for i in j + 1..p {
            let mut s = a[i * p + j];
            let (ri, rj) = (i * p, j * p);
            for k in 0..j {
                s -= a[ri + k] * a[rj + k];
            }
            a[i * p + j] = s / d;
        }
    }
    true
}

/// Solves `L L' x = b` given the lower factor from [`cholesky`].
pub(crate) fn cholesky_solve(l: &[f64], p: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..p {
        let mut s = y[i];
        for k in 0..i {
            s -= l[i * p + k] * y[k];
        }
        y[i] = s / l[i * p + i];
    }
    for i in (0..p).rev() {
        let mut s = y[i];
        for k in i + 1..p {
            s -= l[k * p + i] * y[k];
        }
        y[i] = s / l[i * p + i];
    }
    y
}
