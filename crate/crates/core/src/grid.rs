//! Rectangular analysis grid over a city.
//!
//! Cells are indexed row-major from the south-west corner: `index = row *
//! n_cols + col`, rows growing north and columns growing east. Geographic
//! coordinates map to local meters with an equirectangular approximation
//! anchored at the grid origin.

use std::fmt;

use crate::error::{Error, Result};

/// Mean Earth radius in meters.
const EARTH_RADIUS_M: f64 = 6_371_008.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellId(pub usize);

impl CellId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Grid geometry: south-west origin, cell size in meters and cell counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub origin_lon: f64,
    pub origin_lat: f64,
    pub cell_width_m: f64,
    pub cell_height_m: f64,
    pub n_cols: usize,
    pub n_rows: usize,
}

impl Default for GridSpec {
    /// 100 x 100 cells of 235 m, anchored near the south-west corner of Milan.
    fn default() -> Self {
        GridSpec {
            origin_lon: 9.0114,
            origin_lat: 45.3569,
            cell_width_m: 235.0,
            cell_height_m: 235.0,
            n_cols: 100,
            n_rows: 100,
        }
    }
}

impl GridSpec {
    pub fn new(
        origin_lon: f64,
        origin_lat: f64,
        cell_width_m: f64,
        cell_height_m: f64,
        n_cols: usize,
        n_rows: usize,
    ) -> Result<Self> {
        let g = GridSpec {
            origin_lon,
            origin_lat,
            cell_width_m,
            cell_height_m,
            n_cols,
            n_rows,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cols == 0 || self.n_rows == 0 {
            return Err(Error::InvalidGrid(
                "grid needs at least one row and column".into(),
            ));
        }
        if !(self.cell_width_m > 0.0 && self.cell_height_m > 0.0)
            || !self.cell_width_m.is_finite()
            || !self.cell_height_m.is_finite()
        {
            return Err(Error::InvalidGrid(
                "cell dimensions must be positive".into(),
            ));
        }
        if !self.origin_lon.is_finite() || !(-90.0..90.0).contains(&self.origin_lat) {
            return Err(Error::InvalidGrid("origin must be a finite lon/lat".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.n_cols * self.n_rows
    }

    pub fn width_m(&self) -> f64 {
        self.cell_width_m * self.n_cols as f64
    }

    pub fn height_m(&self) -> f64 {
        self.cell_height_m * self.n_rows as f64
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<CellId> {
        (row < self.n_rows && col < self.n_cols).then(|| CellId(row * self.n_cols + col))
    }

    pub fn row_col(&self, cell: CellId) -> (usize, usize) {
        (cell.0 / self.n_cols, cell.0 % self.n_cols)
    }

    pub fn check(&self, cell: CellId) -> Result<()> {
        if cell.0 < self.n_cells() {
            Ok(())
        } else {
            Err(Error::CellOutOfRange {
                index: cell.0,
                n: self.n_cells(),
            })
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = CellId> {
        (0..self.n_cells()).map(CellId)
    }

    fn meters_per_deg_lat(&self) -> f64 {
        EARTH_RADIUS_M * std::f64::consts::PI / 180.0
    }

    fn meters_per_deg_lon(&self) -> f64 {
        self.meters_per_deg_lat() * self.origin_lat.to_radians().cos()
    }

    /// Local (east, north) offset in meters from the origin.
    pub fn to_local(&self, lon: f64, lat: f64) -> (f64, f64) {
        (
            (lon - self.origin_lon) * self.meters_per_deg_lon(),
            (lat - self.origin_lat) * self.meters_per_deg_lat(),
        )
    }

    pub fn to_geo(&self, x_m: f64, y_m: f64) -> (f64, f64) {
        (
            self.origin_lon + x_m / self.meters_per_deg_lon(),
            self.origin_lat + y_m / self.meters_per_deg_lat(),
        )
    }

    /// Cell containing a local point; lower edges inclusive, upper exclusive.
    pub fn cell_of_local(&self, x_m: f64, y_m: f64) -> Option<CellId> {
        if !(x_m >= 0.0 && y_m >= 0.0) {
            return None;
        }
        let col = (x_m / self.cell_width_m).floor();
        let row = (y_m / self.cell_height_m).floor();
        if col >= self.n_cols as f64 || row >= self.n_rows as f64 {
            return None;
        }
        self.cell(row as usize, col as usize)
    }

    pub fn cell_of_point(&self, lon: f64, lat: f64) -> Option<CellId> {
        let (x, y) = self.to_local(lon, lat);
        self.cell_of_local(x, y)
    }

    /// Local rectangle `(x0, y0, x1, y1)` of a cell.
    pub fn rect_local(&self, cell: CellId) -> (f64, f64, f64, f64) {
        let (r, c) = self.row_col(cell);
        let x0 = c as f64 * self.cell_width_m;
        let y0 = r as f64 * self.cell_height_m;
        (x0, y0, x0 + self.cell_width_m, y0 + self.cell_height_m)
    }

    pub fn centroid_local(&self, cell: CellId) -> Result<(f64, f64)> {
        self.check(cell)?;
        let (x0, y0, x1, y1) = self.rect_local(cell);
        Ok((0.5 * (x0 + x1), 0.5 * (y0 + y1)))
    }

    /// Geometric center of the cell as (lon, lat).
    pub fn centroid(&self, cell: CellId) -> Result<(f64, f64)> {
        let (x, y) = self.centroid_local(cell)?;
        Ok(self.to_geo(x, y))
    }

    /// Cells whose rectangle meets the closed disk of `radius_m` around the
    /// centroid of `cell`, in ascending index order.
    pub fn cells_within_radius(&self, cell: CellId, radius_m: f64) -> Result<Vec<CellId>> {
        let (cx, cy) = self.centroid_local(cell)?;
        if !(radius_m >= 0.0) {
            return Err(Error::input("radius must be non-negative"));
        }
        let (row, col) = self.row_col(cell);
        let span_c = (radius_m / self.cell_width_m).ceil() as usize + 1;
        let span_r = (radius_m / self.cell_height_m).ceil() as usize + 1;
        let r_lo = row.saturating_sub(span_r);
        let r_hi = (row + span_r).min(self.n_rows - 1);
        let c_lo = col.saturating_sub(span_c);
        let c_hi = (col + span_c).min(self.n_cols - 1);
        let r2 = radius_m * radius_m;
        let mut out = Vec::new();
        for r in r_lo..=r_hi {
            for c in c_lo..=c_hi {
                let id = CellId(r * self.n_cols + c);
                let (x0, y0, x1, y1) = self.rect_local(id);
                let dx = (x0 - cx).max(0.0).max(cx - x1);
                let dy = (y0 - cy).max(0.0).max(cy - y1);
                if dx * dx + dy * dy <= r2 {
                    out.push(id);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid3() -> GridSpec {
        GridSpec::new(9.19, 45.46, 100.0, 100.0, 3, 3).unwrap()
    }

    #[test]
    fn origin_is_first_cell() {
        let g = grid3();
        assert_eq!(g.cell_of_point(g.origin_lon, g.origin_lat), Some(CellId(0)));
    }

    #[test]
    fn shared_edge_goes_to_higher_cell() {
        let g = grid3();
        assert_eq!(g.cell_of_local(100.0, 50.0), Some(CellId(1)));
        assert_eq!(g.cell_of_local(50.0, 100.0), Some(CellId(3)));
        assert_eq!(g.cell_of_local(300.0, 50.0), None);
        assert_eq!(g.cell_of_local(-1e-9, 50.0), None);
    }

    #[test]
    fn local_point_row_two_col_one() {
        let g = grid3();
        assert_eq!(g.cell_of_local(150.0, 250.0), g.cell(2, 1));
        assert_eq!(g.cell_of_local(150.0, 250.0), Some(CellId(7)));
    }

    #[test]
    fn single_cell_centroid_is_half_size() {
        let g = GridSpec::new(9.0, 45.0, 80.0, 40.0, 1, 1).unwrap();
        let (x, y) = g.centroid_local(CellId(0)).unwrap();
        assert_eq!((x, y), (40.0, 20.0));
        let (lon, lat) = g.centroid(CellId(0)).unwrap();
        let (bx, by) = g.to_local(lon, lat);
        assert!((bx - 40.0).abs() < 1e-6 && (by - 20.0).abs() < 1e-6);
    }

    #[test]
    fn default_grid_first_centroid() {
        let g = GridSpec::default();
        let (lon, lat) = g.centroid(CellId(0)).unwrap();
        // 117.5 m converted with meters-per-degree at the origin latitude
        let m_lat = EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        let m_lon = m_lat * g.origin_lat.to_radians().cos();
        assert!((lon - (g.origin_lon + 117.5 / m_lon)).abs() < 1e-12);
        assert!((lat - (g.origin_lat + 117.5 / m_lat)).abs() < 1e-12);
    }

    #[test]
    fn horizontal_neighbors_share_latitude() {
        let g = GridSpec::default();
        let a = g.centroid(g.cell(7, 3).unwrap()).unwrap();
        let b = g.centroid(g.cell(7, 4).unwrap()).unwrap();
        assert_eq!(a.1 - b.1, 0.0);
    }

    #[test]
    fn centroid_rejects_bad_cell() {
        assert!(grid3().centroid(CellId(9)).is_err());
    }

    #[test]
    fn radius_zero_is_self() {
        let g = grid3();
        assert_eq!(
            g.cells_within_radius(CellId(4), 0.0).unwrap(),
            vec![CellId(4)]
        );
    }

    #[test]
    fn half_cell_plus_eps_reaches_edge_neighbors() {
        let g = grid3();
        let got = g.cells_within_radius(CellId(4), 50.0 + 1e-6).unwrap();
        assert_eq!(
            got,
            vec![CellId(1), CellId(3), CellId(4), CellId(5), CellId(7)]
        );
    }

    #[test]
    fn huge_radius_covers_grid() {
        let g = grid3();
        assert_eq!(g.cells_within_radius(CellId(0), 1e6).unwrap().len(), 9);
    }

    #[test]
    fn rejects_degenerate_grids() {
        assert!(GridSpec::new(0.0, 0.0, 0.0, 1.0, 1, 1).is_err());
        assert!(GridSpec::new(0.0, 0.0, 1.0, 1.0, 0, 1).is_err());
    }

    proptest! {
        #[test]
        fn centroid_round_trips(rows in 1usize..20, cols in 1usize..20, pick in 0usize..400) {
            let g = GridSpec::new(9.1, 45.4, 235.0, 190.0, cols, rows).unwrap();
            let c = CellId(pick % g.n_cells());
            let (lon, lat) = g.centroid(c).unwrap();
            prop_assert_eq!(g.cell_of_point(lon, lat), Some(c));
        }

        #[test]
        fn radius_is_monotone(pick in 0usize..64, r1 in 0.0f64..600.0, extra in 0.0f64..600.0) {
            let g = GridSpec::new(9.1, 45.4, 100.0, 80.0, 8, 8).unwrap();
            let c = CellId(pick);
            let small = g.cells_within_radius(c, r1).unwrap();
            let big = g.cells_within_radius(c, r1 + extra).unwrap();
            prop_assert!(small.contains(&c));
            prop_assert!(small.iter().all(|x| big.contains(x)));
        }

        #[test]
        fn points_land_in_exactly_one_cell(x in 0.0f64..300.0, y in 0.0f64..300.0) {
            let g = grid3();
            let hits = g.cells().filter(|&c| {
                let (x0, y0, x1, y1) = g.rect_local(c);
                x >= x0 && x < x1 && y >= y0 && y < y1
            }).count();
            prop_assert_eq!(hits, 1);
            let (x0, y0, x1, y1) = g.rect_local(g.cell_of_local(x, y).unwrap());
            prop_assert!(x >= x0 && x < x1 && y >= y0 && y < y1);
        }
    }
}
