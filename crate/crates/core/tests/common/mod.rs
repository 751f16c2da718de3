//! Independent reference implementations used as test oracles. None of these
//! call into the library's numerical code.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_symmetric(n: usize, seed: u64) -> Mat {
    let mut r = rng(seed);
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let v: f64 = r.random_range(-1.0..1.0);
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    m
}

/// Cyclic Jacobi rotations until the off-diagonal mass vanishes. Returns
/// ascending eigenvalues and eigenvectors as columns of `v`.
pub fn jacobi_eigen(m: &Mat) -> (Vec<f64>, Mat) {
    let n = m.len();
    let mut a = m.clone();
    let mut v: Mat = (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i][i].total_cmp(&a[j][j]));
    let vals = order.iter().map(|&i| a[i][i]).collect();
    let vecs = (0..n)
        .map(|k| order.iter().map(|&i| v[k][i]).collect())
        .collect();
    (vals, vecs)
}

/// Largest singular value by power iteration on `m^T m`.
pub fn spectral_norm(m: &Mat) -> f64 {
    let n = m.len();
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    let mut est = 0.0;
    for _ in 0..500 {
        let y: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| m[i][j] * x[j]).sum())
            .collect();
        let z: Vec<f64> = (0..n)
            .map(|j| (0..n).map(|i| m[i][j] * y[i]).sum())
            .collect();
        let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        est = norm.sqrt();
        x = z.iter().map(|v| v / norm).collect();
    }
    est
}

/// A POI placed in local meters, so the oracle never needs a projection.
#[derive(Debug, Clone)]
pub struct LocalPoi {
    pub x: f64,
    pub y: f64,
    pub feature: &'static str,
}

/// Activity profile rows computed the slow, obvious way: count per cell,
/// grow a radius per cell until `h` POIs are reached, then sum tf-idf times
/// category share over the reached cells.
#[allow(clippy::too_many_arguments)]
pub fn brute_force_profiles(
    rows: usize,
    cols: usize,
    cell_m: f64,
    pois: &[LocalPoi],
    shares: &BTreeMap<&str, Vec<(usize, f64)>>,
    n_categories: usize,
    h: u64,
    step: f64,
    cap: f64,
) -> Mat {
    let n = rows * cols;
    let mut counts: Vec<BTreeMap<&str, u64>> = vec![BTreeMap::new(); n];
    for p in pois {
        if !shares.contains_key(p.feature) {
            continue;
        }
        let c = (p.x / cell_m).floor() as usize;
        let r = (p.y / cell_m).floor() as usize;
        *counts[r * cols + c].entry(p.feature).or_default() += 1;
    }
    let occupied = counts.iter().filter(|c| !c.is_empty()).count() as f64;
    let mut df: BTreeMap<&str, f64> = BTreeMap::new();
    for c in &counts {
        for f in c.keys() {
            *df.entry(f).or_default() += 1.0;
        }
    }
    let tfidf = |cell: usize, f: &str| -> f64 {
        let c = &counts[cell];
        let max = *c.values().max().unwrap() as f64;
        c[f] as f64 / max * (occupied / df[f]).ln()
    };
    let reached = |cell: usize, radius: f64| -> Vec<usize> {
        let (r0, c0) = (cell / cols, cell % cols);
        let cx = (c0 as f64 + 0.5) * cell_m;
        let cy = (r0 as f64 + 0.5) * cell_m;
        (0..n)
            .filter(|&m| {
                let (r, c) = (m / cols, m % cols);
                let x0 = c as f64 * cell_m;
                let y0 = r as f64 * cell_m;
                let dx = if cx < x0 {
                    x0 - cx
                } else if cx > x0 + cell_m {
                    cx - x0 - cell_m
                } else {
                    0.0
                };
                let dy = if cy < y0 {
                    y0 - cy
                } else if cy > y0 + cell_m {
                    cy - y0 - cell_m
                } else {
                    0.0
                };
                (dx * dx + dy * dy).sqrt() <= radius
            })
            .collect()
    };
    let total =
        |cells: &[usize]| -> u64 { cells.iter().map(|&m| counts[m].values().sum::<u64>()).sum() };
    (0..n)
        .map(|l| {
            let mut s = 0.0;
            let members = loop {
                let radius = (s * step).min(cap);
                let m = reached(l, radius);
                if total(&m) >= h || radius >= cap {
                    break m;
                }
                s += 1.0;
            };
            let mut row = vec![0.0; n_categories];
            for m in members {
                for f in counts[m].keys() {
                    let w = tfidf(m, f);
                    for &(c, share) in &shares[f] {
                        row[c] += w * share;
                    }
                }
            }
            row
        })
        .collect()
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn project(x: &[[f64; 2]], theta: f64) -> Vec<f64> {
    x.iter()
        .map(|r| r[0] * theta.cos() + r[1] * theta.sin())
        .collect()
}

/// First canonical correlation of two 2-column blocks: maximum of
/// `|corr(X u, Y v)|` over unit directions, by a coarse grid refined around
/// the best cell.
pub fn brute_force_cca_2x2(x: &[[f64; 2]], y: &[[f64; 2]]) -> f64 {
    let pi = std::f64::consts::PI;
    let mut best = (0.0, 0.0, -1.0);
    let steps = 360;
    for i in 0..steps {
        let a = pi * i as f64 / steps as f64;
        let xa = project(x, a);
        for j in 0..steps {
            let b = pi * j as f64 / steps as f64;
            let c = corr(&xa, &project(y, b)).abs();
            if c > best.2 {
                best = (a, b, c);
            }
        }
    }
    let mut width = pi / steps as f64;
    for _ in 0..30 {
        let (a0, b0, _) = best;
        for i in -4..=4 {
            for j in -4..=4 {
                let a = a0 + width * i as f64 / 4.0;
                let b = b0 + width * j as f64 / 4.0;
                let c = corr(&project(x, a), &project(y, b)).abs();
                if c > best.2 {
                    best = (a, b, c);
                }
            }
        }
        width /= 2.0;
    }
    best.2
}
