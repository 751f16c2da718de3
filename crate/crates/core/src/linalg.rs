//! Symmetric eigensolvers.
//!
//! The dense path is Householder reduction to tridiagonal form followed by
//! implicit-shift QL iterations (the EISPACK `tred2`/`tql2` pair), O(n^3)
//! time and O(n^2) memory. Large sparse operators go through Lanczos.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Per-eigenvalue iteration cap for the QL sweep.
const MAX_QL_ITERS: usize = 60;

/// Ascending eigenvalues and the matching eigenvectors (one per column).
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// Every eigenvalue, ascending.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors of the first `eigenvectors.ncols()`
    /// eigenvalues.
    pub eigenvectors: Array2<f64>,
}

pub type LaplacianSpectrum = Spectrum;

/// Largest `|m_ij - m_ji|`.
pub fn asymmetry(m: ArrayView2<'_, f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((m[[i, j]] - m[[j, i]]).abs());
        }
    }
    worst
}

fn max_abs(m: ArrayView2<'_, f64>) -> f64 {
    m.iter().fold(0.0f64, |a, &v| a.max(v.abs()))
}

/// Full decomposition `m = V diag(values) V^T`, values ascending.
pub fn sym_eig_full(m: ArrayView2<'_, f64>) -> Result<Spectrum> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::input(format!(
            "matrix is {}x{}, not square",
            n,
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("matrix has non-finite entries"));
    }
    let asym = asymmetry(m);
    if asym > 1e-12 * max_abs(m).max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    if n == 0 {
        return Ok(Spectrum {
            eigenvalues: Vec::new(),
            eigenvectors: Array2::zeros((0, 0)),
        });
    }
    // v is row-major: v[k * n + j]
    let mut v: Vec<f64> = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            // use the lower triangle only
            v.push(if j <= i { m[[i, j]] } else { m[[j, i]] });
        }
    }
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(n, &mut v, &mut d, &mut e);

    // rows of z are eigenvector estimates
    let mut z = vec![0.0; n * n];
    for k in 0..n {
        for j in 0..n {
            z[j * n + k] = v[k * n + j];
        }
    }
    drop(v);
    ql_implicit(n, &mut d, &mut e, &mut z)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    let eigenvalues = order.iter().map(|&i| d[i]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (col, &i) in order.iter().enumerate() {
        let row = &z[i * n..(i + 1) * n];
        // sign convention: largest-magnitude component positive
        let pivot = row
            .iter()
            .fold(0.0f64, |a, &x| if x.abs() > a.abs() { x } else { a });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[[k, col]] = sign * row[k];
        }
    }
    Ok(Spectrum {
        eigenvalues,
        eigenvectors: vectors,
    })
}

/// The `r` smallest eigenpairs, each with residual `||Mv - lv|| <= tol *
/// ||M||_2`.
pub fn sym_eig(m: ArrayView2<'_, f64>, r: usize, tol: f64) -> Result<Spectrum> {
    let n = m.nrows();
    if r > n {
        return Err(Error::input(format!(
            "asked for {r} eigenpairs of a {n}x{n} matrix"
        )));
    }
    let full = sym_eig_full(m)?;
    let norm = full.eigenvalues.iter().fold(0.0f64, |a, &l| a.max(l.abs()));
    let vectors = full.eigenvectors.slice(ndarray::s![.., ..r]).to_owned();
    for j in 0..r {
        let col = vectors.column(j);
        let mv = m.dot(&col);
        let lambda = full.eigenvalues[j];
        let residual = mv
            .iter()
            .zip(col.iter())
            .map(|(a, b)| (a - lambda * b).powi(2))
            .sum::<f64>()
            .sqrt();
        let bound = tol * norm;
        if residual > bound && residual > f64::MIN_POSITIVE {
            return Err(Error::Residual {
                index: j,
                residual,
                bound,
            });
        }
    }
    Ok(Spectrum {
        eigenvalues: full.eigenvalues,
        eigenvectors: vectors,
    })
}

/// Householder tridiagonalization. On return `d` holds the diagonal, `e[1..]`
/// the sub-diagonal and `v` the accumulated orthogonal transform.
fn tridiagonalize(n: usize, v: &mut [f64], d: &mut [f64], e: &mut [f64]) {
    let at = |k: usize, j: usize| k * n + j;
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let scale: f64 = d[..i].iter().map(|x| x.abs()).sum();
        let mut h = 0.0;
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
                v[at(j, i)] = 0.0;
            }
        } else {
            for dk in d[..i].iter_mut() {
                *dk /= scale;
                h += *dk * *dk;
            }
            let f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            e[..i].iter_mut().for_each(|x| *x = 0.0);
            for j in 0..i {
                let f = d[j];
                v[at(j, i)] = f;
                let mut g = e[j] + v[at(j, j)] * f;
                for k in j + 1..i {
                    g += v[at(k, j)] * d[k];
                    e[k] += v[at(k, j)] * f;
                }
                e[j] = g;
            }
            let mut f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                let f = d[j];
                let g = e[j];
                for k in j..i {
                    v[at(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[at(k, i + 1)] * v[at(k, j)];
                }
                for k in 0..=i {
                    v[at(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = 0.0;
    }
    v[at(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

/// Implicit QL on the tridiagonal `(d, e)`; rotations applied to rows of `z`.
fn ql_implicit(n: usize, d: &mut [f64], e: &mut [f64], z: &mut [f64]) -> Result<()> {
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 && e[m].abs() > eps * tst1 {
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > MAX_QL_ITERS {
                    return Err(Error::NoConvergence(MAX_QL_ITERS));
                }
                let g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    let g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    let (lo, hi) = z.split_at_mut((i + 1) * n);
                    let zi = &mut lo[i * n..];
                    let zi1 = &mut hi[..n];
                    for (a, b) in zi.iter_mut().zip(zi1.iter_mut()) {
                        let t = *b;
                        *b = s * *a + c * t;
                        *a = c * *a - s * t;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// `(M + ridge I)^{-1/2}` for a symmetric positive semi-definite `M`.
/// Fails when an eigenvalue of the shifted matrix is not safely positive.
pub fn inv_sqrt_psd(m: ArrayView2<'_, f64>, ridge: f64, name: &'static str) -> Result<Array2<f64>> {
    let eig = sym_eig_full(m)?;
    let n = m.nrows();
    let top = eig.eigenvalues.last().copied().unwrap_or(0.0).abs();
    let floor = top * n as f64 * f64::EPSILON * 16.0;
    let mut out = Array2::zeros((n, n));
    for (j, &l) in eig.eigenvalues.iter().enumerate() {
        let shifted = l + ridge;
        if !(shifted > floor) || shifted <= 0.0 {
            return Err(Error::SingularCovariance(name));
        }
        let w = 1.0 / shifted.sqrt();
        let col = eig.eigenvectors.column(j);
        for a in 0..n {
            let ca = col[a] * w;
            for b in 0..n {
                out[[a, b]] += ca * col[b];
            }
        }
    }
    Ok(out)
}

/// Eigen-decomposition of the symmetric tridiagonal matrix with diagonal
/// `alpha` and off-diagonal `beta` (`beta[i]` couples `i` and `i + 1`).
/// Returns ascending values and, for each, its eigenvector.
pub fn tridiagonal_eig(alpha: &[f64], beta: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = alpha.len();
    if beta.len() + 1 < n {
        return Err(Error::input("off-diagonal too short"));
    }
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let mut d = alpha.to_vec();
    let mut e = vec![0.0; n];
    e[1..n].copy_from_slice(&beta[..n - 1]);
    let mut z = vec![0.0; n * n];
    for i in 0..n {
        z[i * n + i] = 1.0;
    }
    ql_implicit(n, &mut d, &mut e, &mut z)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| d[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| z[i * n..(i + 1) * n].to_vec())
        .collect();
    Ok((values, vectors))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The `r` smallest eigenpairs of a symmetric operator whose spectrum lies
/// in `[0, upper]`, by Lanczos with full reorthogonalization on
/// `upper * I - M`. `apply(x, y)` must set `y = M x`.
///
/// A multiple eigenvalue is only found as often as the Krylov space picks
/// it up; callers split block-diagonal operators first.
pub fn lanczos_smallest<F>(
    n: usize,
    apply: F,
    r: usize,
    upper: f64,
    tol: f64,
    seed: u64,
) -> Result<Spectrum>
where
    F: Fn(&[f64], &mut [f64]),
{
    use rand::{Rng, SeedableRng};
    if r == 0 || r > n {
        return Err(Error::input(format!(
            "asked for {r} eigenpairs of a {n}x{n} operator"
        )));
    }
    let max_dim = n.min((4 * r + 100).max(400));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut fresh = |basis: &[Vec<f64>]| -> Option<Vec<f64>> {
        for _ in 0..4 {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            for _ in 0..2 {
                for q in basis {
                    let c = dot(q, &v);
                    v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
                }
            }
            let norm = dot(&v, &v).sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|a| *a /= norm);
                return Some(v);
            }
        }
        None
    };
    let mut basis: Vec<Vec<f64>> = vec![fresh(&[]).expect("n >= 1")];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let mut w = vec![0.0; n];
    let mut ritz: Option<(Vec<f64>, Vec<Vec<f64>>)> = None;
    loop {
        let j = basis.len() - 1;
        apply(&basis[j], &mut w);
        // w = (upper I - M) q_j
        w.iter_mut()
            .zip(&basis[j])
            .for_each(|(a, q)| *a = upper * q - *a);
        alpha.push(dot(&basis[j], &w));
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &w);
                w.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        let b = dot(&w, &w).sqrt();
        let dim = basis.len();
        let breakdown = b <= 1e-10 * upper.max(1.0);
        let check = dim >= r && (dim % 10 == 0 || dim == max_dim || breakdown);
        if check {
            let (vals, vecs) = tridiagonal_eig(&alpha, &beta)?;
            let converged = (0..r).all(|i| {
                let idx = dim - 1 - i;
                (b * vecs[idx][dim - 1]).abs() <= tol * upper
            });
            if converged || dim == max_dim {
                ritz = Some((vals, vecs));
            }
        }
        if ritz.is_some() {
            break;
        }
        if breakdown {
            match fresh(&basis) {
                Some(v) => {
                    beta.push(0.0);
                    basis.push(v);
                }
                None => {
                    let (vals, vecs) = tridiagonal_eig(&alpha, &beta)?;
                    ritz = Some((vals, vecs));
                    break;
                }
            }
        } else {
            beta.push(b);
            basis.push(w.iter().map(|a| a / b).collect());
        }
    }
    let (vals, vecs) = ritz.expect("loop exits with Ritz pairs");
    let dim = vals.len();
    if dim < r {
        return Err(Error::NoConvergence(dim));
    }
    let mut eigenvalues = Vec::with_capacity(r);
    let mut eigenvectors = Array2::zeros((n, r));
    let mut mv = vec![0.0; n];
    for i in 0..r {
        let s = &vecs[dim - 1 - i];
        let mut y = vec![0.0; n];
        for (q, &c) in basis.iter().zip(s) {
            y.iter_mut().zip(q).for_each(|(a, b)| *a += c * b);
        }
        let norm = dot(&y, &y).sqrt();
        y.iter_mut().for_each(|a| *a /= norm);
        let pivot = y
            .iter()
            .fold(0.0f64, |a, &x| if x.abs() > a.abs() { x } else { a });
        if pivot < 0.0 {
            y.iter_mut().for_each(|a| *a = -*a);
        }
        let lambda = upper - vals[dim - 1 - i];
        apply(&y, &mut mv);
        let residual = mv
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - lambda * b).powi(2))
            .sum::<f64>()
            .sqrt();
        let bound = tol * upper;
        if residual > bound {
            return Err(Error::Residual {
                index: i,
                residual,
                bound,
            });
        }
        for (k, v) in y.into_iter().enumerate() {
            eigenvectors[[k, i]] = v;
        }
        eigenvalues.push(lambda);
    }
    Ok(Spectrum {
        eigenvalues,
        eigenvectors,
    })
}
