//! Allocation-free kernels for the small row-major matrices used in hot loops.

/// `out = a · b` with `a: m×k`, `b: k×n`.
#[inline]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for r in 0..m {
        for c in 0..n {
            let mut s = 0.0;
            for l in 0..k {
                s += a[r * k + l] * b[l * n + c];
            }
            out[r * n + c] = s;
        }
    }
}

/// `out = a · x` with `a: m×n`.
#[inline]
pub fn matvec(a: &[f64], x: &[f64], m: usize, n: usize, out: &mut [f64]) {
    for r in 0..m {
        let mut s = 0.0;
        for c in 0..n {
            s += a[r * n + c] * x[c];
        }
        out[r] = s;
    }
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n * n];
    for k in 0..n {
        v[k * n + k] = 1.0;
    }
    v
}

/// In-place lower Cholesky factor of an SPD matrix; `Err(pivot)` when a
/// non-positive pivot is met.
pub fn cholesky(a: &mut [f64], n: usize) -> Result<(), f64> {
    for j in 0..n {
        let mut s = a[j * n + j];
        for k in 0..j {
            s -= a[j * n + k] * a[j * n + k];
        }
        if !(s > 0.0) {
            return Err(s);
        }
        let l = s.sqrt();
        a[j * n + j] = l;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / l;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    Ok(())
}

/// Solves `L u = b` in place for lower-triangular `L`.
#[inline]
pub fn forward_subst(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `Lᵀ u = b` in place for lower-triangular `L`.
#[inline]
pub fn backward_subst_t(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// `out = L z` for lower-triangular `L`.
#[inline]
pub fn lower_matvec(l: &[f64], n: usize, z: &[f64], out: &mut [f64]) {
    for i in 0..n {
        let mut s = 0.0;
        for k in 0..=i {
            s += l[i * n + k] * z[k];
        }
        out[i] = s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_roundtrip() {
        let a = [4.0, 2.0, 0.4, 2.0, 5.0, 1.0, 0.4, 1.0, 3.0];
        let mut l = a;
        cholesky(&mut l, 3).unwrap();
        let mut lt = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                lt[i * 3 + j] = l[j * 3 + i];
            }
        }
        let mut back = [0.0; 9];
        matmul(&l, &lt, 3, 3, 3, &mut back);
        for k in 0..9 {
            assert!((back[k] - a[k]).abs() < 1e-14);
        }
        let mut b = [1.0, 2.0, 3.0];
        let mut y = [0.0; 3];
        forward_subst(&l, 3, &mut b);
        lower_matvec(&l, 3, &b, &mut y);
        assert!((y[2] - 3.0).abs() < 1e-14);
        // L Lᵀ u = e₁ reproduces the first column of A⁻¹.
        let mut u = [1.0, 0.0, 0.0];
        forward_subst(&l, 3, &mut u);
        backward_subst_t(&l, 3, &mut u);
        let mut au = [0.0; 3];
        matvec(&a, &u, 3, 3, &mut au);
        assert!((au[0] - 1.0).abs() < 1e-14 && au[1].abs() < 1e-14 && au[2].abs() < 1e-14);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let mut a = [1.0, 2.0, 2.0, 1.0];
        assert!(cholesky(&mut a, 2).is_err());
    }
}
