//! Activity-profile matrix: POI counts per cell, adaptive aggregation
//! radius, tf-idf feature weights and category aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{CellId, GridSpec};
use crate::par;
use crate::poi::{Category, CategoryMapping, PoiRecord, N_CATEGORIES};

/// Occurrence counts `N(f, l)` of each feature in each cell.
#[derive(Debug, Clone, PartialEq)]
pub struct PoiCellCounts {
    n_cells: usize,
    features: Vec<String>,
    cells: Vec<BTreeMap<usize, u64>>,
    totals: Vec<u64>,
    /// POIs that fell outside the grid.
    pub dropped_outside: usize,
}

impl PoiCellCounts {
    /// Builds counts from `(cell, feature, count)` triples; repeated keys add.
    pub fn from_entries<'a>(
        n_cells: usize,
        entries: impl IntoIterator<Item = (CellId, &'a str, u64)>,
    ) -> Result<Self> {
        let entries: Vec<_> = entries.into_iter().collect();
        let mut features: Vec<String> = entries.iter().map(|(_, f, _)| f.to_string()).collect();
        features.sort();
        features.dedup();
        let mut cells = vec![BTreeMap::new(); n_cells];
        let mut totals = vec![0u64; n_cells];
        for (cell, f, n) in entries {
            if cell.0 >= n_cells {
                return Err(Error::CellOutOfRange {
                    index: cell.0,
                    n: n_cells,
                });
            }
            if n == 0 {
                continue;
            }
            let fi = features.binary_search_by(|x| x.as_str().cmp(f)).unwrap();
            *cells[cell.0].entry(fi).or_insert(0) += n;
            totals[cell.0] += n;
        }
        let mut counts = PoiCellCounts {
            n_cells,
            features,
            cells,
            totals,
            dropped_outside: 0,
        };
        counts.prune_features();
        Ok(counts)
    }

    /// Drops vocabulary entries with no occurrences.
    fn prune_features(&mut self) {
        let mut used = vec![false; self.features.len()];
        for cell in &self.cells {
            for &fi in cell.keys() {
                used[fi] = true;
            }
        }
        if used.iter().all(|&u| u) {
            return;
        }
        let mut remap = vec![usize::MAX; self.features.len()];
        let mut kept = Vec::new();
        for (i, f) in self.features.drain(..).enumerate() {
            if used[i] {
                remap[i] = kept.len();
                kept.push(f);
            }
        }
        self.features = kept;
        for cell in &mut self.cells {
            *cell = cell.iter().map(|(&fi, &n)| (remap[fi], n)).collect();
        }
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    /// Sorted feature vocabulary.
    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn feature_index(&self, feature: &str) -> Option<usize> {
        self.features
            .binary_search_by(|x| x.as_str().cmp(feature))
            .ok()
    }

    pub fn count(&self, cell: CellId, feature: &str) -> u64 {
        self.feature_index(feature)
            .and_then(|fi| self.cells.get(cell.0)?.get(&fi).copied())
            .unwrap_or(0)
    }

    /// `(feature index, count)` pairs of a cell in feature order.
    pub fn cell_counts(&self, cell: CellId) -> impl Iterator<Item = (usize, u64)> + '_ {
        self.cells[cell.0].iter().map(|(&f, &n)| (f, n))
    }

    pub fn total(&self, cell: CellId) -> u64 {
        self.totals[cell.0]
    }

    pub fn totals(&self) -> &[u64] {
        &self.totals
    }

    pub fn occupied_cells(&self) -> usize {
        self.totals.iter().filter(|&&t| t > 0).count()
    }

    /// Number of cells in which the feature occurs.
    pub fn document_frequency(&self, feature: usize) -> usize {
        self.cells
            .iter()
            .filter(|c| c.contains_key(&feature))
            .count()
    }

    /// Multiplies every count by `k`.
    pub fn scaled(&self, k: u64) -> Self {
        let mut out = self.clone();
        for cell in &mut out.cells {
            cell.values_mut().for_each(|n| *n *= k);
        }
        out.totals.iter_mut().for_each(|n| *n *= k);
        out
    }
}

/// Spatial join of POIs onto grid cells.
pub fn count_pois(grid: &GridSpec, pois: &[PoiRecord]) -> PoiCellCounts {
    let mut dropped = 0;
    let mut entries = Vec::with_capacity(pois.len());
    for p in pois {
        match grid.cell_of_point(p.lon, p.lat) {
            Some(c) => entries.push((c, p.feature.as_str(), 1)),
            None => dropped += 1,
        }
    }
    let mut counts =
        PoiCellCounts::from_entries(grid.n_cells(), entries).expect("cells come from the grid");
    counts.dropped_outside = dropped;
    counts
}

/// Which cells count as documents in the idf term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IdfCorpus {
    /// Only cells holding at least one POI.
    #[default]
    Occupied,
    /// Every grid cell.
    All,
}

impl FromStr for IdfCorpus {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "occupied" => Ok(IdfCorpus::Occupied),
            "all" => Ok(IdfCorpus::All),
            _ => Err(format!("idf corpus must be `occupied` or `all`, got `{s}`")),
        }
    }
}

impl fmt::Display for IdfCorpus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IdfCorpus::Occupied => "occupied",
            IdfCorpus::All => "all",
        })
    }
}

fn corpus_size(counts: &PoiCellCounts, corpus: IdfCorpus) -> usize {
    match corpus {
        IdfCorpus::Occupied => counts.occupied_cells(),
        IdfCorpus::All => counts.n_cells(),
    }
}

/// tf-idf weight of `feature` in `cell`: occurrences over the cell's
/// largest feature count, times `ln(|L| / df)`.
pub fn tf_idf(
    counts: &PoiCellCounts,
    feature: &str,
    cell: CellId,
    corpus: IdfCorpus,
) -> Result<f64> {
    if cell.0 >= counts.n_cells() {
        return Err(Error::CellOutOfRange {
            index: cell.0,
            n: counts.n_cells(),
        });
    }
    let fi = counts
        .feature_index(feature)
        .ok_or_else(|| Error::UnknownFeature(feature.to_string()))?;
    let max = counts
        .cell_counts(cell)
        .map(|(_, n)| n)
        .max()
        .ok_or(Error::EmptyCell(cell))?;
    let n = counts.cells[cell.0].get(&fi).copied().unwrap_or(0);
    let df = counts.document_frequency(fi);
    let tf = n as f64 / max as f64;
    Ok(tf * (corpus_size(counts, corpus) as f64 / df as f64).ln())
}

/// Per-cell `(feature index, weight)` lists for every occupied cell.
fn tf_idf_table(counts: &PoiCellCounts, corpus: IdfCorpus) -> Vec<Vec<(usize, f64)>> {
    let docs = corpus_size(counts, corpus) as f64;
    let mut df = vec![0usize; counts.features.len()];
    for cell in &counts.cells {
        for &fi in cell.keys() {
            df[fi] += 1;
        }
    }
    let idf: Vec<f64> = df.iter().map(|&d| (docs / d as f64).ln()).collect();
    par::map_range(counts.n_cells(), |l| {
        let cell = &counts.cells[l];
        let Some(max) = cell.values().copied().max() else {
            return Vec::new();
        };
        cell.iter()
            .map(|(&fi, &n)| (fi, n as f64 / max as f64 * idf[fi]))
            .collect()
    })
}

/// Per-cell aggregation radius and the cells it reaches.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationPlan {
    pub radius_m: Vec<f64>,
    pub members: Vec<Vec<CellId>>,
    /// POI total over the members.
    pub poi_total: Vec<u64>,
    /// Radius stopped at the cap before reaching the threshold.
    pub capped: Vec<bool>,
}

impl AggregationPlan {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Every cell aggregates only itself.
    pub fn identity(n_cells: usize) -> Self {
        AggregationPlan {
            radius_m: vec![0.0; n_cells],
            members: (0..n_cells).map(|i| vec![CellId(i)]).collect(),
            poi_total: vec![0; n_cells],
            capped: vec![false; n_cells],
        }
    }
}

/// Grows each cell's radius in steps of `radius_step_m` until the cells it
/// reaches hold at least `h` POIs, stopping at `radius_cap_m`.
pub fn plan_aggregation(
    grid: &GridSpec,
    counts: &PoiCellCounts,
    h: u64,
    radius_step_m: f64,
    radius_cap_m: f64,
) -> Result<AggregationPlan> {
    if h < 1 {
        return Err(Error::input("aggregation threshold h must be at least 1"));
    }
    if !(radius_step_m > 0.0) || !(radius_cap_m >= 0.0) {
        return Err(Error::input(
            "radius step must be positive and cap non-negative",
        ));
    }
    if counts.n_cells() != grid.n_cells() {
        return Err(Error::input("POI counts were built on a different grid"));
    }
    let totals = counts.totals();
    let per_cell = par::map_range(grid.n_cells(), |i| {
        let cell = CellId(i);
        let mut step = 0u64;
        loop {
            let radius = (step as f64 * radius_step_m).min(radius_cap_m);
            let members = grid.cells_within_radius(cell, radius).expect("valid cell");
            let total: u64 = members.iter().map(|m| totals[m.0]).sum();
            if total >= h {
                return (radius, members, total, false);
            }
            if radius >= radius_cap_m {
                return (radius, members, total, true);
            }
            step += 1;
        }
    });
    let mut plan = AggregationPlan {
        radius_m: Vec::with_capacity(per_cell.len()),
        members: Vec::with_capacity(per_cell.len()),
        poi_total: Vec::with_capacity(per_cell.len()),
        capped: Vec::with_capacity(per_cell.len()),
    };
    for (r, m, t, c) in per_cell {
        plan.radius_m.push(r);
        plan.members.push(m);
        plan.poi_total.push(t);
        plan.capped.push(c);
    }
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileFlag {
    Ok,
    /// The radius cap was hit below the threshold, but some weight exists.
    Capped,
    /// POIs were reached but every tf-idf weight is zero.
    ZeroWeight,
    /// No POIs within reach.
    Empty,
}

impl ProfileFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            ProfileFlag::Ok => "ok",
            ProfileFlag::Capped => "capped",
            ProfileFlag::ZeroWeight => "zero",
            ProfileFlag::Empty => "empty",
        }
    }

    /// Rows with a non-zero profile.
    pub fn usable(self) -> bool {
        matches!(self, ProfileFlag::Ok | ProfileFlag::Capped)
    }
}

impl FromStr for ProfileFlag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ok" => Ok(ProfileFlag::Ok),
            "capped" => Ok(ProfileFlag::Capped),
            "zero" => Ok(ProfileFlag::ZeroWeight),
            "empty" => Ok(ProfileFlag::Empty),
            _ => Err(format!("unknown profile flag `{s}`")),
        }
    }
}

/// Cells x activity categories weights, one row per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityProfileMatrix {
    pub values: Array2<f64>,
    pub flags: Vec<ProfileFlag>,
}

impl ActivityProfileMatrix {
    pub fn n_cells(&self) -> usize {
        self.flags.len()
    }

    pub fn usable_cells(&self) -> Vec<CellId> {
        self.flags
            .iter()
            .enumerate()
            .filter(|(_, f)| f.usable())
            .map(|(i, _)| CellId(i))
            .collect()
    }
}

/// `A[l][c]` = sum over member cells and features of tf-idf times the
/// feature's share in category `c`.
pub fn build_profiles(
    plan: &AggregationPlan,
    counts: &PoiCellCounts,
    mapping: &CategoryMapping,
    corpus: IdfCorpus,
) -> Result<ActivityProfileMatrix> {
    let n = counts.n_cells();
    if plan.len() != n {
        return Err(Error::input(
            "aggregation plan and counts disagree on cell count",
        ));
    }
    let table = tf_idf_table(counts, corpus);
    let shares: Vec<Vec<(usize, f64)>> = counts
        .features()
        .iter()
        .map(|f| {
            mapping
                .shares(f)
                .map(|s| s.iter().map(|(c, w)| (c.index(), *w)).collect())
                .unwrap_or_default()
        })
        .collect();
    let rows = par::map_range(n, |l| {
        let mut row = [0.0f64; N_CATEGORIES];
        let mut reached = 0u64;
        for m in &plan.members[l] {
            reached += counts.total(*m);
            for &(fi, w) in &table[m.0] {
                for &(c, s) in &shares[fi] {
                    row[c] += w * s;
                }
            }
        }
        let flag = if reached == 0 {
            ProfileFlag::Empty
        } else if row.iter().all(|&v| v == 0.0) {
            ProfileFlag::ZeroWeight
        } else if plan.capped[l] {
            ProfileFlag::Capped
        } else {
            ProfileFlag::Ok
        };
        (row, flag)
    });
    let mut values = Array2::zeros((n, N_CATEGORIES));
    let mut flags = Vec::with_capacity(n);
    for (l, (row, flag)) in rows.into_iter().enumerate() {
        for (c, v) in row.into_iter().enumerate() {
            values[[l, c]] = v;
        }
        flags.push(flag);
    }
    Ok(ActivityProfileMatrix { values, flags })
}

pub fn profile_csv_header() -> String {
    let mut h = String::from("cell_id");
    for c in Category::ALL {
        h.push(',');
        h.push_str(c.as_str());
    }
    h.push_str(",flags");
    h
}

pub fn write_profiles_csv<W: Write>(a: &ActivityProfileMatrix, mut out: W) -> Result<()> {
    writeln!(out, "{}", profile_csv_header())?;
    for (l, row) in a.values.rows().into_iter().enumerate() {
        write!(out, "{l}")?;
        for v in row {
            write!(out, ",{v}")?;
        }
        writeln!(out, ",{}", a.flags[l].as_str())?;
    }
    Ok(())
}

pub fn read_profiles_csv<R: Read>(stream: R) -> Result<ActivityProfileMatrix> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(stream);
    let mut records = rdr.records();
    let expected = profile_csv_header();
    let header = records
        .next()
        .transpose()
        .map_err(|e| Error::Row {
            row: 1,
            message: e.to_string(),
        })?
        .map(|h| h.iter().collect::<Vec<_>>().join(","))
        .unwrap_or_default();
    if header != expected {
        return Err(Error::Header {
            expected,
            found: header,
        });
    }
    let mut rows = Vec::new();
    let mut flags = Vec::new();
    for (i, rec) in records.enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Row {
            row,
            message: e.to_string(),
        })?;
        let err = |message: String| Error::Row { row, message };
        if rec.len() != N_CATEGORIES + 2 {
            return Err(err("wrong number of fields".into()));
        }
        if rec[0].parse::<usize>().ok() != Some(i) {
            return Err(err(format!("expected cell_id {i}, found `{}`", &rec[0])));
        }
        for c in 0..N_CATEGORIES {
            let v: f64 = rec[c + 1]
                .parse()
                .map_err(|_| err(format!("bad weight `{}`", &rec[c + 1])))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(err(format!("weight {v} must be finite and non-negative")));
            }
            rows.push(v);
        }
        flags.push(ProfileFlag::from_str(&rec[N_CATEGORIES + 1]).map_err(err)?);
    }
    let values = Array2::from_shape_vec((flags.len(), N_CATEGORIES), rows)
        .map_err(|e| Error::input(e.to_string()))?;
    Ok(ActivityProfileMatrix { values, flags })
}
