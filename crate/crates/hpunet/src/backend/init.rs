//! Weight initializers: orthogonal kernels and truncated-normal biases.

use super::rng::RngState;
use super::tensor::{Real, Tensor};
use super::BackendError;

/// Orthogonal initialization with the given gain.
///
/// The tensor is flattened to a matrix `M` of `shape[0]` rows by
/// `prod(shape[1..])` columns (kernels flatten to `Cout x Cin*k*k`). The thin
/// side of `M` is orthonormal scaled by `gain`: `M Mᵀ = gain² I` when rows
/// fit, `Mᵀ M = gain² I` otherwise. Computation runs in f64 and casts down.
pub fn init_orthogonal<F: Real>(
    shape: &[usize],
    gain: f64,
    rng: &mut RngState,
) -> Result<Tensor<F>, BackendError> {
    if shape.len() < 2 || shape.iter().any(|&e| e == 0) {
        return Err(BackendError::Invalid {
            op: "init_orthogonal",
            message: format!("shape {shape:?} is not flattenable to a non-empty matrix"),
        });
    }
    let rows = shape[0];
    let cols: usize = shape[1..].iter().product();
    // Build a tall Gaussian matrix, orthonormalize its columns, and lay the
    // result out so the requested thin side is orthonormal.
    let (m, n, transpose) = if rows <= cols {
        (cols, rows, true)
    } else {
        (rows, cols, false)
    };
    let mut a = vec![0.0f64; m * n];
    for v in a.iter_mut() {
        *v = rng.normal_f64();
    }
    let q = thin_q(&mut a, m, n);
    let mut data = vec![F::zero(); rows * cols];
    for r in 0..m {
        for c in 0..n {
            let v = gain * q[r * n + c];
            let (i, j) = if transpose { (c, r) } else { (r, c) };
            data[i * cols + j] = F::of(v);
        }
    }
    Tensor::from_vec(shape, data)
}

/// Householder QR returning the thin Q (`m x n`, orthonormal columns) of a
/// tall matrix (`m >= n`), with the sign fixed so R's diagonal is positive.
fn thin_q(a: &mut [f64], m: usize, n: usize) -> Vec<f64> {
    debug_assert!(m >= n);
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v = vec![0.0; m];
        let norm: f64 = (j..m).map(|r| a[r * n + j] * a[r * n + j]).sum::<f64>().sqrt();
        if norm == 0.0 {
            // Degenerate column (probability zero for Gaussian draws): use a
            // reflector that leaves the column span untouched.
            v[j] = 1.0;
            vs.push(v);
            continue;
        }
        let alpha = if a[j * n + j] >= 0.0 { -norm } else { norm };
        for r in j..m {
            v[r] = a[r * n + j];
        }
        v[j] -= alpha;
        let vnorm2: f64 = v[j..].iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            // Apply H = I - 2 v vᵀ / (vᵀv) to the remaining columns.
            for c in j..n {
                let dot: f64 = (j..m).map(|r| v[r] * a[r * n + c]).sum();
                let s = 2.0 * dot / vnorm2;
                for r in j..m {
                    a[r * n + c] -= s * v[r];
                }
            }
        }
        vs.push(v);
    }
    // Record diagonal signs of R before building Q.
    let signs: Vec<f64> = (0..n)
        .map(|j| if a[j * n + j] >= 0.0 { 1.0 } else { -1.0 })
        .collect();
    // Q = H_0 ... H_{n-1} applied to the first n columns of the identity.
    let mut q = vec![0.0; m * n];
    for j in 0..n {
        q[j * n + j] = 1.0;
    }
    for j in (0..n).rev() {
        let v = &vs[j];
        let vnorm2: f64 = v[j..].iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for c in 0..n {
            let dot: f64 = (j..m).map(|r| v[r] * q[r * n + c]).sum();
            let s = 2.0 * dot / vnorm2;
            for r in j..m {
                q[r * n + c] -= s * v[r];
            }
        }
    }
    for c in 0..n {
        if signs[c] < 0.0 {
            for r in 0..m {
                q[r * n + c] = -q[r * n + c];
            }
        }
    }
    q
}

/// Truncated normal: zero-mean draws with standard deviation `sigma`,
/// resampled until within `±2 sigma`.
pub fn init_truncnormal<F: Real>(shape: &[usize], sigma: f64, rng: &mut RngState) -> Tensor<F> {
    let mut data = vec![F::zero(); shape.iter().product()];
    for v in data.iter_mut() {
        loop {
            let draw = rng.normal_f64() * sigma;
            if draw.abs() <= 2.0 * sigma {
                *v = F::of(draw);
                break;
            }
        }
    }
    Tensor::from_vec(shape, data).expect("length matches by construction")
}
