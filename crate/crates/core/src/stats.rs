//! Clustering tendency and cross-space correlation statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{inv_sqrt_psd, sym_eig_full};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HopkinsResult {
    pub h: f64,
    pub m: usize,
    pub seed: u64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Hopkins statistic `sum(w) / (sum(u) + sum(w))`.
///
/// `w` are nearest-neighbor distances of `m` sampled data points to the rest
/// of the data, `u` those of `m` uniform points drawn in the bounding box.
/// Clustered data gives values near 0, uniform data values near 0.5.
pub fn hopkins(data: ArrayView2<'_, f64>, m: usize, seed: u64) -> Result<HopkinsResult> {
    let n = data.nrows();
    let q = data.ncols();
    if n < 2 || q == 0 {
        return Err(Error::input(format!(
            "hopkins needs at least 2 points, have {n}"
        )));
    }
    if m == 0 || m > n {
        return Err(Error::input(format!(
            "hopkins sample size {m} must be in 1..={n}"
        )));
    }
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::input("hopkins data contains non-finite values"));
    }
    let rows: Vec<Vec<f64>> = data.rows().into_iter().map(|r| r.to_vec()).collect();
    let lo: Vec<f64> = (0..q)
        .map(|j| data.column(j).fold(f64::INFINITY, |a, &b| a.min(b)))
        .collect();
    let hi: Vec<f64> = (0..q)
        .map(|j| data.column(j).fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
        .collect();
    if lo.iter().zip(&hi).all(|(l, h)| h - l <= 0.0) {
        return Err(Error::input("hopkins bounding box is degenerate"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled = rand::seq::index::sample(&mut rng, n, m).into_vec();
    let uniform: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            lo.iter()
                .zip(&hi)
                .map(|(&l, &h)| if h > l { rng.random_range(l..h) } else { l })
                .collect()
        })
        .collect();

    let nn = |p: &[f64], skip: Option<usize>| -> f64 {
        rows.iter()
            .enumerate()
            .filter(|&(i, _)| Some(i) != skip)
            .map(|(_, r)| sq_dist(p, r))
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    };
    let w: f64 = par::map_slice(&sampled, |&i| nn(&rows[i], Some(i)))
        .iter()
        .sum();
    let u: f64 = par::map_slice(&uniform, |p| nn(p, None)).iter().sum();
    if !(u + w > 0.0) {
        return Err(Error::input("hopkins distances are all zero"));
    }
    Ok(HopkinsResult {
        h: w / (u + w),
        m,
        seed,
    })
}

/// Canonical correlations and the projections attaining them.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaResult {
    /// Non-increasing, within [0, 1].
    pub correlations: Vec<f64>,
    /// q1 x r coefficients for X.
    pub x_weights: Array2<f64>,
    /// q2 x r coefficients for Y.
    pub y_weights: Array2<f64>,
    /// Largest amount any correlation was clipped by.
    pub clipped: f64,
    pub n: usize,
}

/// Ridge added to a covariance block before whitening.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Ridge {
    /// `1e-6 * trace / q` per block.
    #[default]
    Auto,
    Fixed(f64),
}

impl Ridge {
    fn for_block(self, c: &Array2<f64>) -> f64 {
        match self {
            Ridge::Auto => 1e-6 * c.diag().sum() / c.nrows() as f64,
            Ridge::Fixed(r) => r,
        }
    }
}

fn centered(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    &x - &mean
}

fn numeric_rank(c: &Array2<f64>) -> Result<usize> {
    let e = sym_eig_full(c.view())?;
    let top = e.eigenvalues.last().copied().unwrap_or(0.0).max(0.0);
    let tol = top * 1e-10;
    Ok(e.eigenvalues.iter().filter(|&&l| l > tol).count())
}

pub fn cca(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, ridge: Ridge) -> Result<CcaResult> {
    let n = x.nrows();
    if y.nrows() != n {
        return Err(Error::input("cca blocks differ in row count"));
    }
    if n < 2 || x.ncols() == 0 || y.ncols() == 0 {
        return Err(Error::input(
            "cca needs at least 2 rows and 1 column per block",
        ));
    }
    if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
        return Err(Error::input("cca input contains non-finite values"));
    }
    let xc = centered(x);
    let yc = centered(y);
    let denom = (n - 1) as f64;
    let cxx = xc.t().dot(&xc) / denom;
    let cyy = yc.t().dot(&yc) / denom;
    let cxy = xc.t().dot(&yc) / denom;
    let wx = inv_sqrt_psd(cxx.view(), ridge.for_block(&cxx), "X")?;
    let wy = inv_sqrt_psd(cyy.view(), ridge.for_block(&cyy), "Y")?;
    let m = wx.dot(&cxy).dot(&wy);
    let r = numeric_rank(&cxx)?.min(numeric_rank(&cyy)?);

    let mmt = m.dot(&m.t());
    let mmt = (&mmt + &mmt.t()) * 0.5;
    let e = sym_eig_full(mmt.view())?;
    let q1 = m.nrows();
    let mut correlations = Vec::with_capacity(r);
    let mut clipped: f64 = 0.0;
    let mut u = Array2::zeros((q1, r));
    let mut v = Array2::zeros((m.ncols(), r));
    for j in 0..r {
        let col = q1 - 1 - j;
        let s = e.eigenvalues[col].max(0.0).sqrt();
        let uj = e.eigenvectors.column(col);
        u.column_mut(j).assign(&uj);
        if s > 1e-12 {
            let vj: Array1<f64> = m.t().dot(&uj) / s;
            v.column_mut(j).assign(&vj);
        }
        let c = s.clamp(0.0, 1.0);
        clipped = clipped.max((s - c).abs());
        correlations.push(c);
    }
    if clipped > 0.0 {
        log::debug!("canonical correlations clipped by up to {clipped:e}");
    }
    Ok(CcaResult {
        correlations,
        x_weights: wx.dot(&u),
        y_weights: wy.dot(&v),
        clipped,
        n,
    })
}

/// CCA within each cluster; clusters with too few rows are skipped.
pub fn cca_by_cluster(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    labels: &[usize],
    ridge: Ridge,
) -> Result<BTreeMap<usize, CcaResult>> {
    if labels.len() != x.nrows() {
        return Err(Error::input("label count does not match row count"));
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    let need = x.ncols().min(y.ncols()) + 1;
    let mut out = BTreeMap::new();
    for (l, rows) in groups {
        if rows.len() <= need {
            log::warn!(
                "cluster {l} has {} rows, skipping CCA (needs more than {need})",
                rows.len()
            );
            continue;
        }
        let xs = x.select(Axis(0), &rows);
        let ys = y.select(Axis(0), &rows);
        match cca(xs.view(), ys.view(), ridge) {
            Ok(res) => {
                out.insert(l, res);
            }
            Err(e) => log::warn!("cluster {l}: CCA failed: {e}"),
        }
    }
    Ok(out)
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    if a.len() < 2 {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn cluster_means(x: ArrayView2<'_, f64>, labels: &[usize], ids: &[usize]) -> Vec<Vec<f64>> {
    ids.iter()
        .map(|&id| {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == id).collect();
            x.select(Axis(0), &rows)
                .mean_axis(Axis(0))
                .unwrap()
                .to_vec()
        })
        .collect()
}

/// Pearson r between pairwise cluster-mean distances in two feature spaces.
pub fn distance_correlation(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<f64> {
    if a.nrows() != labels.len() || b.nrows() != labels.len() {
        return Err(Error::input("label count does not match row count"));
    }
    let ids: Vec<usize> = labels
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if ids.len() < 3 {
        return Err(Error::input(format!(
            "distance correlation needs at least 3 clusters, have {}",
            ids.len()
        )));
    }
    let ma = cluster_means(a, labels, &ids);
    let mb = cluster_means(b, labels, &ids);
    let mut da = Vec::new();
    let mut db = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            da.push(sq_dist(&ma[i], &ma[j]).sqrt());
            db.push(sq_dist(&mb[i], &mb[j]).sqrt());
        }
    }
    pearson(&da, &db).ok_or_else(|| Error::input("cluster-mean distances are constant"))
}

/// One line of the `statistic,scope,value,seed` report block.
#[derive(Debug, Clone, PartialEq)]
pub struct StatRow {
    pub statistic: String,
    pub scope: String,
    pub value: f64,
    pub seed: Option<u64>,
}

impl StatRow {
    pub fn new(
        statistic: impl Into<String>,
        scope: impl Into<String>,
        value: f64,
        seed: Option<u64>,
    ) -> Self {
        StatRow {
            statistic: statistic.into(),
            scope: scope.into(),
            value,
            seed,
        }
    }
}

pub fn write_stats_csv<W: Write>(rows: &[StatRow], mut out: W) -> Result<()> {
    writeln!(out, "statistic,scope,value,seed")?;
    for r in rows {
        let seed = r.seed.map(|s| s.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{}", r.statistic, r.scope, r.value, seed)?;
    }
    Ok(())
}

/// Report rows for a CCA result: one `cca_rho` row per coefficient.
pub fn cca_rows(scope: &str, res: &CcaResult) -> Vec<StatRow> {
    res.correlations
        .iter()
        .enumerate()
        .map(|(j, &r)| StatRow::new(format!("cca_rho_{}", j + 1), scope, r, None))
        .collect()
}
