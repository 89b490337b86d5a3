//! Dense helpers for the tiny (n x n, n <= ~4) symmetric matrices that live
//! at every grid point: packed storage, Cholesky inversion with a condition
//! guard, and Jacobi eigenvalues. Hand-rolled so the per-point hot loops stay
//! allocation-free.

use crate::error::{Error, Result};

/// Packed index of the (i, j) component of a symmetric n x n matrix,
/// components ordered (0,0), (0,1), .., (0,n-1), (1,1), .. (row i <= col j).
#[inline]
pub fn pack(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * n - i * (i + 1) / 2 + j
}

/// Number of packed components.
#[inline]
pub fn sym_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Multiplicity of a packed component in full-index sums (1 on the
/// diagonal, 2 off it).
#[inline]
pub fn mult(n: usize, c: usize) -> f64 {
    let (i, j) = unpack_index(n, c);
    if i == j {
        1.0
    } else {
        2.0
    }
}

/// Inverse of [`pack`].
#[inline]
pub fn unpack_index(n: usize, mut c: usize) -> (usize, usize) {
    for i in 0..n {
        let row = n - i;
        if c < row {
            return (i, i + c);
        }
        c -= row;
    }
    unreachable!("packed index out of range")
}

/// Expand packed symmetric storage into a full row-major buffer.
pub fn unpack(n: usize, packed: &[f64], full: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            full[i * n + j] = packed[pack(n, i, j)];
        }
    }
}

/// Pack a full row-major symmetric matrix.
pub fn pack_full(n: usize, full: &[f64], packed: &mut [f64]) {
    for i in 0..n {
        for j in i..n {
            packed[pack(n, i, j)] = full[i * n + j];
        }
    }
}

/// In-place Cholesky factorization of a full row-major SPD matrix
/// (lower triangle holds L on success).
pub fn cholesky(n: usize, a: &mut [f64]) -> Result<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::Indefinite(format!(
                "Cholesky pivot {d:.3e} at row {j}"
            )));
        }
        let l = d.sqrt();
        a[j * n + j] = l;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / l;
        }
    }
    Ok(())
}

/// Solve L y = b, L^T x = y for a Cholesky factor stored in the lower
/// triangle of `l`; `b` is overwritten with the solution.
pub fn cholesky_solve(n: usize, l: &[f64], b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Invert a packed symmetric positive-definite matrix. Returns the packed
/// inverse, the determinant, and a cheap Frobenius condition estimate.
/// `scratch` must hold at least 2 n^2 entries.
pub fn invert_spd(
    n: usize,
    packed: &[f64],
    inv_packed: &mut [f64],
    scratch: &mut [f64],
) -> Result<(f64, f64)> {
    let (l, col) = scratch.split_at_mut(n * n);
    unpack(n, packed, l);
    cholesky(n, l)?;
    let mut det = 1.0;
    for i in 0..n {
        det *= l[i * n + i] * l[i * n + i];
    }
    for j in 0..n {
        let col = &mut col[..n];
        col.fill(0.0);
        col[j] = 1.0;
        cholesky_solve(n, l, col);
        for i in j..n {
            inv_packed[pack(n, i, j)] = col[i];
        }
    }
    let norm = |p: &[f64]| -> f64 {
        (0..sym_len(n))
            .map(|c| mult(n, c) * p[c] * p[c])
            .sum::<f64>()
            .sqrt()
    };
    let cond = norm(packed) * norm(inv_packed);
    Ok((det, cond))
}

/// Eigenvalues of a packed symmetric matrix by cyclic Jacobi rotation.
/// `scratch` must hold at least n^2 entries; eigenvalues come out ascending.
pub fn sym_eigenvalues(n: usize, packed: &[f64], out: &mut [f64], scratch: &mut [f64]) {
    let a = &mut scratch[..n * n];
    unpack(n, packed, a);
    for _sweep in 0..64 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() < 1e-15 * (1.0 + frob(n, a)) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    for i in 0..n {
        out[i] = a[i * n + i];
    }
    out[..n].sort_by(|x, y| x.partial_cmp(y).unwrap());
}

fn frob(n: usize, a: &[f64]) -> f64 {
    a[..n * n].iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Extreme generalized eigenvalues of the pencil (a, b) with b SPD:
/// the min/max lambda with det(a - lambda b) = 0. `scratch` needs 4 n^2 + n.
pub fn generalized_eig_bounds(
    n: usize,
    a_packed: &[f64],
    b_packed: &[f64],
    scratch: &mut [f64],
) -> Result<(f64, f64)> {
    let (l, rest) = scratch.split_at_mut(n * n);
    let (c, rest) = rest.split_at_mut(n * n);
    let (work, rest) = rest.split_at_mut(n * n);
    let (evals, _) = rest.split_at_mut(n);
    unpack(n, b_packed, l);
    cholesky(n, l)?;
    // c = inv(L) * A * inv(L)^T, formed column by column
    unpack(n, a_packed, c);
    // first: W = inv(L) * A  (solve L W = A column-wise)
    for j in 0..n {
        for i in 0..n {
            let mut s = c[i * n + j];
            for k in 0..i {
                s -= l[i * n + k] * work[k * n + j];
            }
            work[i * n + j] = s / l[i * n + i];
        }
    }
    // then: C = W * inv(L)^T  (solve C L^T = W row-wise => L C^T = W^T)
    for i in 0..n {
        for j in 0..n {
            let mut s = work[i * n + j];
            for k in 0..j {
                s -= l[j * n + k] * c[i * n + k];
            }
            c[i * n + j] = s / l[j * n + j];
        }
    }
    let mut packed_c = vec![0.0; sym_len(n)];
    // symmetrize against roundoff
    for i in 0..n {
        for j in i..n {
            packed_c[pack(n, i, j)] = 0.5 * (c[i * n + j] + c[j * n + i]);
        }
    }
    sym_eigenvalues(n, &packed_c, evals, work);
    Ok((evals[0], evals[n - 1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_roundtrip() {
        let n = 4;
        for i in 0..n {
            for j in i..n {
                let c = pack(n, i, j);
                assert_eq!(unpack_index(n, c), (i, j));
                assert_eq!(pack(n, j, i), c);
            }
        }
        assert_eq!(sym_len(3), 6);
    }

    #[test]
    fn invert_diag() {
        let n = 3;
        let a = [2.0, 0.0, 0.0, 4.0, 0.0, 8.0]; // diag(2,4,8) packed
        let mut inv = [0.0; 6];
        let mut scratch = [0.0; 18];
        let (det, cond) = invert_spd(n, &a, &mut inv, &mut scratch).unwrap();
        assert!((det - 64.0).abs() < 1e-12);
        assert!((inv[pack(3, 0, 0)] - 0.5).abs() < 1e-14);
        assert!((inv[pack(3, 2, 2)] - 0.125).abs() < 1e-14);
        assert!(cond > 1.0);
    }

    #[test]
    fn invert_full() {
        let n = 3;
        // SPD matrix
        let a = [4.0, 1.0, 0.5, 3.0, 0.2, 2.0];
        let mut inv = [0.0; 6];
        let mut scratch = [0.0; 18];
        invert_spd(n, &a, &mut inv, &mut scratch).unwrap();
        // check A * Ainv = I
        let mut fa = [0.0; 9];
        let mut fi = [0.0; 9];
        unpack(n, &a, &mut fa);
        unpack(n, &inv, &mut fi);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += fa[i * n + k] * fi[k * n + j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((s - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eigenvalues_known() {
        // diag(1, 2, 5) rotated is still spec {1,2,5}; test plain diagonal
        let a = [5.0, 0.0, 0.0, 1.0, 0.0, 2.0];
        let mut ev = [0.0; 3];
        let mut scratch = [0.0; 9];
        sym_eigenvalues(3, &a, &mut ev, &mut scratch);
        assert!((ev[0] - 1.0).abs() < 1e-12);
        assert!((ev[1] - 2.0).abs() < 1e-12);
        assert!((ev[2] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn generalized_bounds_identity() {
        let a = [2.0, 0.0, 0.0, 2.0, 0.0, 2.0];
        let b = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let mut scratch = vec![0.0; 4 * 9 + 3];
        let (lo, hi) = generalized_eig_bounds(3, &a, &b, &mut scratch).unwrap();
        assert!((lo - 2.0).abs() < 1e-12);
        assert!((hi - 2.0).abs() < 1e-12);
    }

    #[test]
    fn singular_matrix_rejected() {
        let a = [1.0, 1.0, 0.0, 1.0, 0.0, 1.0]; // rank-deficient 2x2 block
        let mut inv = [0.0; 6];
        let mut scratch = [0.0; 18];
        assert!(invert_spd(3, &a, &mut inv, &mut scratch).is_err());
    }
}
