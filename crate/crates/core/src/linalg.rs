use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Solves `a x = b` in place by Gaussian elimination with partial pivoting.
/// `a` is row-major and is overwritten.
pub fn solve_dense<T: Scalar>(a: &mut [Vec<T>], b: &mut [T]) -> Result<()> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap_or(std::cmp::Ordering::Equal))
            .ok_or(Error::SingularMatrix)?;
        if !(a[pivot][col].abs() > T::epsilon() * T::of(1e-6)) {
            return Err(Error::SingularMatrix);
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == T::zero() {
                continue;
            }
            for c in col..n {
                let v = a[col][c];
                a[row][c] -= f * v;
            }
            let v = b[col];
            b[row] -= f * v;
        }
    }
    for row in (0..n).rev() {
        let mut s = b[row];
        for c in row + 1..n {
            s -= a[row][c] * b[c];
        }
        b[row] = s / a[row][row];
    }
    Ok(())
}
