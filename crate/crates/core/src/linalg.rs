//! Small dense linear algebra: 4×4 homogeneous matrices and a Cholesky
//! solver for the normal equations of the least-squares problems.

use std::ops::Mul;

use crate::scalar::Real;

/// Row-major 4×4 homogeneous matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat4<T> {
    pub m: [[T; 4]; 4],
}

impl<T: Real> Mat4<T> {
    pub fn identity() -> Self {
        let mut m = [[T::zero(); 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = T::one();
        }
        Mat4 { m }
    }

    pub fn zero() -> Self {
        Mat4 {
            m: [[T::zero(); 4]; 4],
        }
    }

    pub fn translation(t: [T; 3]) -> Self {
        let mut out = Self::identity();
        for (i, &ti) in t.iter().enumerate() {
            out.m[i][3] = ti;
        }
        out
    }

    /// Embeds a 3×3 linear map.
    pub fn from_linear(a: [[T; 3]; 3]) -> Self {
        let mut out = Self::identity();
        for i in 0..3 {
            for j in 0..3 {
                out.m[i][j] = a[i][j];
            }
        }
        out
    }

    pub fn linear(&self) -> [[T; 3]; 3] {
        let mut a = [[T::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                a[i][j] = self.m[i][j];
            }
        }
        a
    }

    pub fn translation_part(&self) -> [T; 3] {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    #[inline]
    pub fn apply(&self, p: [T; 3]) -> [T; 3] {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    pub fn determinant3(&self) -> T {
        det3(&self.linear())
    }

    /// Inverse of an affine matrix (bottom row `0 0 0 1`).
    pub fn inverse_affine(&self) -> Option<Self> {
        let a = self.linear();
        let inv = inverse3(&a)?;
        let t = self.translation_part();
        let mut out = Self::from_linear(inv);
        for i in 0..3 {
            out.m[i][3] = -(inv[i][0] * t[0] + inv[i][1] * t[1] + inv[i][2] * t[2]);
        }
        Some(out)
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        let mut d = T::zero();
        for i in 0..4 {
            for j in 0..4 {
                d = d.max((self.m[i][j] - other.m[i][j]).abs());
            }
        }
        d
    }

    pub fn cast<U: Real>(&self) -> Mat4<U> {
        let mut m = [[U::zero(); 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] = U::of(self.m[i][j].as_f64());
            }
        }
        Mat4 { m }
    }
}

impl<T: Real> Mul for Mat4<T> {
    type Output = Mat4<T>;

    fn mul(self, rhs: Mat4<T>) -> Mat4<T> {
        let mut out = Mat4::zero();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = T::zero();
                for k in 0..4 {
                    acc += self.m[i][k] * rhs.m[k][j];
                }
                out.m[i][j] = acc;
            }
        }
        out
    }
}

pub fn mul3<T: Real>(a: &[[T; 3]; 3], b: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn det3<T: Real>(a: &[[T; 3]; 3]) -> T {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn inverse3<T: Real>(a: &[[T; 3]; 3]) -> Option<[[T; 3]; 3]> {
    let det = det3(a);
    let scale = a
        .iter()
        .flat_map(|r| r.iter())
        .fold(T::zero(), |acc, v| acc.max(v.abs()));
    if !det.is_finite() || det.abs() <= T::epsilon() * scale * scale * scale {
        return None;
    }
    let inv_det = T::one() / det;
    let mut out = [[T::zero(); 3]; 3];
    out[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) * inv_det;
    out[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) * inv_det;
    out[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) * inv_det;
    out[1][0] = (a[1][2] * a[2][0] - a[1][0] * a[2][2]) * inv_det;
    out[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) * inv_det;
    out[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) * inv_det;
    out[2][0] = (a[1][0] * a[2][1] - a[1][1] * a[2][0]) * inv_det;
    out[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) * inv_det;
    out[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) * inv_det;
    Some(out)
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major, n×n).
///
/// Returns `None` when a pivot falls below `rel_tol` times the largest
/// diagonal entry, i.e. the system is numerically rank deficient.
pub fn cholesky_solve<T: Real>(a: &[T], b: &[T], n: usize, rel_tol: T) -> Option<Vec<T>> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    let max_diag = (0..n).fold(T::zero(), |acc, i| acc.max(a[i * n + i].abs()));
    if max_diag <= T::zero() || !max_diag.is_finite() {
        return None;
    }
    let mut l = vec![T::zero(); n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > rel_tol * max_diag) {
            return None;
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    let mut y = vec![T::zero(); n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Some(x)
}
