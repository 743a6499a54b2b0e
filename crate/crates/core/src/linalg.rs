//! Small dense matrix helpers for the 2x2 / 3x3 tensors living at grid nodes.
//!
//! Matrices are row-major slices of length `d*d`; entry `(r, c)` sits at
//! `r*d + c`. Nothing here allocates.

#[inline]
pub fn det(m: &[f64], d: usize) -> f64 {
    match d {
        2 => m[0] * m[3] - m[1] * m[2],
        3 => {
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                + m[2] * (m[3] * m[7] - m[4] * m[6])
        }
        _ => unreachable!("dimension must be 2 or 3"),
    }
}

/// Cofactor matrix, `cof(F) = det(F) F^{-T}` for invertible `F`.
#[inline]
pub fn cofactor(m: &[f64], d: usize, out: &mut [f64]) {
    match d {
        2 => {
            out[0] = m[3];
            out[1] = -m[2];
            out[2] = -m[1];
            out[3] = m[0];
        }
        3 => {
            out[0] = m[4] * m[8] - m[5] * m[7];
            out[1] = m[5] * m[6] - m[3] * m[8];
            out[2] = m[3] * m[7] - m[4] * m[6];
            out[3] = m[2] * m[7] - m[1] * m[8];
            out[4] = m[0] * m[8] - m[2] * m[6];
            out[5] = m[1] * m[6] - m[0] * m[7];
            out[6] = m[1] * m[5] - m[2] * m[4];
            out[7] = m[2] * m[3] - m[0] * m[5];
            out[8] = m[0] * m[4] - m[1] * m[3];
        }
        _ => unreachable!("dimension must be 2 or 3"),
    }
}

/// Inverse via the adjugate. Caller guarantees `det != 0`.
#[inline]
pub fn inverse(m: &[f64], d: usize, out: &mut [f64]) -> f64 {
    let j = det(m, d);
    let mut cof = [0.0; 9];
    cofactor(m, d, &mut cof[..d * d]);
    for r in 0..d {
        for c in 0..d {
            out[r * d + c] = cof[c * d + r] / j;
        }
    }
    j
}

/// Solve `a x = b` in place for `nrhs` right-hand sides (`b` is `[row][rhs]`)
/// by Gaussian elimination with partial pivoting. Returns false if a pivot
/// falls below `tol` times the largest entry of `a`.
pub fn solve_small(a: &mut [f64], b: &mut [f64], n: usize, nrhs: usize, tol: f64) -> bool {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(scale > 0.0) {
        return false;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| a[x * n + col].abs().total_cmp(&a[y * n + col].abs())).unwrap_or(col);
        if a[piv * n + col].abs() <= tol * scale {
            return false;
        }
        if piv != col {
            for k in 0..n {
                a.swap(col * n + k, piv * n + k);
            }
            for k in 0..nrhs {
                b.swap(col * nrhs + k, piv * nrhs + k);
            }
        }
        for r in (col + 1)..n {
            let f = a[r * n + col] / a[col * n + col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
            for k in 0..nrhs {
                b[r * nrhs + k] -= f * b[col * nrhs + k];
            }
        }
    }
    for col in (0..n).rev() {
        for k in 0..nrhs {
            let mut v = b[col * nrhs + k];
            for j in (col + 1)..n {
                v -= a[col * n + j] * b[j * nrhs + k];
            }
            b[col * nrhs + k] = v / a[col * n + col];
        }
    }
    true
}

#[inline]
pub fn transpose(m: &[f64], d: usize, out: &mut [f64]) {
    for r in 0..d {
        for c in 0..d {
            out[c * d + r] = m[r * d + c];
        }
    }
}

/// `out = a * b`
#[inline]
pub fn matmul(a: &[f64], b: &[f64], d: usize, out: &mut [f64]) {
    for r in 0..d {
        for c in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[r * d + k] * b[k * d + c];
            }
            out[r * d + c] = s;
        }
    }
}

/// `out = a^T * b`
#[inline]
pub fn matmul_tn(a: &[f64], b: &[f64], d: usize, out: &mut [f64]) {
    for r in 0..d {
        for c in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[k * d + r] * b[k * d + c];
            }
            out[r * d + c] = s;
        }
    }
}

/// `out = a * b^T`
#[inline]
pub fn matmul_nt(a: &[f64], b: &[f64], d: usize, out: &mut [f64]) {
    for r in 0..d {
        for c in 0..d {
            let mut s = 0.0;
            for k in 0..d {
                s += a[r * d + k] * b[c * d + k];
            }
            out[r * d + c] = s;
        }
    }
}

#[inline]
pub fn matvec(m: &[f64], v: &[f64], d: usize, out: &mut [f64]) {
    for r in 0..d {
        let mut s = 0.0;
        for c in 0..d {
            s += m[r * d + c] * v[c];
        }
        out[r] = s;
    }
}

/// `out = m^T v`
#[inline]
pub fn matvec_t(m: &[f64], v: &[f64], d: usize, out: &mut [f64]) {
    for c in 0..d {
        let mut s = 0.0;
        for r in 0..d {
            s += m[r * d + c] * v[r];
        }
        out[c] = s;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Largest singular value of a small matrix (square root of the top
/// eigenvalue of `m^T m`, by power iteration on a 2x2/3x3 Gram matrix).
pub fn spectral_norm(m: &[f64], d: usize) -> f64 {
    let mut g = [0.0; 9];
    matmul_tn(m, m, d, &mut g[..d * d]);
    let mut v = [1.0, 0.7, 0.3];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut w = [0.0; 3];
        matvec(&g[..d * d], &v[..d], d, &mut w[..d]);
        let n = norm_sq(&w[..d]).sqrt();
        if n == 0.0 {
            return 0.0;
        }
        for k in 0..d {
            v[k] = w[k] / n;
        }
        if (n - lambda).abs() <= 1e-15 * n {
            lambda = n;
            break;
        }
        lambda = n;
    }
    lambda.sqrt()
}
