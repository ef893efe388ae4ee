//! Dense row-major helpers for the small `d2 x d2` noise blocks.

use crate::{Error, Result, Scalar};

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
pub fn solve<S: Scalar>(a: &[S], n: usize, b: &[S]) -> Result<Vec<S>> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    let scale = m.iter().fold(S::zero(), |acc, v| acc.max(v.abs()));
    let tiny = scale * S::epsilon() * S::of_usize(n);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().partial_cmp(&m[j * n + col].abs()).unwrap())
            .unwrap();
        if m[pivot * n + col].abs() <= tiny {
            return Err(Error::Singular);
        }
        if pivot != col {
            for c in 0..n {
                m.swap(col * n + c, pivot * n + c);
            }
            x.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = m[row * n + col] / m[col * n + col];
            if f != S::zero() {
                for c in col..n {
                    let v = m[col * n + c];
                    m[row * n + c] -= f * v;
                }
                let v = x[col];
                x[row] -= f * v;
            }
        }
    }
    for row in (0..n).rev() {
        let mut acc = x[row];
        for c in row + 1..n {
            acc -= m[row * n + c] * x[c];
        }
        x[row] = acc / m[row * n + row];
    }
    Ok(x)
}

pub fn inverse<S: Scalar>(a: &[S], n: usize) -> Result<Vec<S>> {
    let mut inv = vec![S::zero(); n * n];
    let mut e = vec![S::zero(); n];
    for c in 0..n {
        e.iter_mut().for_each(|v| *v = S::zero());
        e[c] = S::one();
        let col = solve(a, n, &e)?;
        for r in 0..n {
            inv[r * n + c] = col[r];
        }
    }
    Ok(inv)
}

fn norm_1<S: Scalar>(a: &[S], n: usize) -> S {
    (0..n)
        .map(|c| (0..n).map(|r| a[r * n + c].abs()).sum::<S>())
        .fold(S::zero(), S::max)
}

/// Condition number in the induced 1-norm.
pub fn condition_number<S: Scalar>(a: &[S], n: usize) -> Result<S> {
    Ok(norm_1(a, n) * norm_1(&inverse(a, n)?, n))
}
