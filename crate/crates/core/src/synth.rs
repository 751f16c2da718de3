//! Synthetic cities with planted area types.
//!
//! Cells are grouped into Voronoi patches, each patch gets an archetype, and
//! every archetype is a mix over the ten activity categories. POIs are drawn
//! from that mix through the category mapping, and the cell's daily
//! activity curve is the same mix applied to per-category slot signatures,
//! so profile similarity and timeline similarity share one source.

use std::io::{Read, Write};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::grid::{CellId, GridSpec};
use crate::par;
use crate::poi::{Category, CategoryMapping, PoiRecord, N_CATEGORIES};
use crate::spectral::cell_ring;
use crate::timeline::{CdrRecord, YearMonth, N_SLOTS, SLOT_STARTS};

/// Relative activity of each category per slot, in category order.
pub const SLOT_SIGNATURES: [[f64; N_SLOTS]; N_CATEGORIES] = [
    [0.2, 0.6, 0.6, 1.8, 0.8, 1.5, 2.5, 0.8],  // eating
    [0.05, 1.2, 1.1, 0.9, 0.9, 0.7, 0.3, 0.1], // educational
    [0.5, 0.2, 0.3, 0.6, 0.9, 1.9, 1.8, 1.3],  // entertainment
    [0.3, 1.2, 2.0, 1.6, 1.6, 0.9, 0.5, 0.3],  // health
    [0.1, 0.8, 0.8, 1.0, 1.3, 2.5, 1.4, 0.3],  // outdoor
    [1.0, 1.7, 0.6, 0.7, 0.6, 1.8, 2.3, 1.3],  // residential
    [0.1, 0.3, 1.0, 1.6, 1.7, 1.7, 1.5, 0.3],  // shopping
    [0.1, 1.1, 0.5, 0.5, 0.8, 2.5, 2.5, 0.6],  // sporting
    [0.5, 2.5, 1.2, 0.8, 1.0, 2.0, 0.8, 0.5],  // traveling
    [0.1, 1.4, 2.5, 2.5, 2.5, 0.8, 0.3, 0.1],  // working
];

/// Saturday/Sunday multiplier per category.
pub const WEEKEND_FACTORS: [f64; N_CATEGORIES] =
    [1.1, 0.2, 1.3, 0.5, 1.5, 1.2, 1.1, 1.4, 0.7, 0.25];

/// Share of a slot's activity per CDR channel: sms in/out, call in/out,
/// internet.
const CHANNEL_SHARES: [f64; 5] = [0.1, 0.1, 0.15, 0.15, 0.5];

#[derive(Debug, Clone, PartialEq)]
pub struct Archetype {
    pub name: String,
    /// Category mix; non-negative, sums to 1.
    pub mix: [f64; N_CATEGORIES],
    /// Land-use class this archetype reports as.
    pub landuse: String,
}

impl Archetype {
    pub fn new(name: &str, landuse: &str, weights: &[(Category, f64)]) -> Self {
        let mut mix = [0.0; N_CATEGORIES];
        for &(c, w) in weights {
            mix[c.index()] += w;
        }
        let total: f64 = mix.iter().sum();
        if total > 0.0 {
            mix.iter_mut().for_each(|m| *m /= total);
        }
        Archetype {
            name: name.to_string(),
            mix,
            landuse: landuse.to_string(),
        }
    }

    /// Expected activity per slot on a weekday or weekend day.
    pub fn template(&self, weekend: bool) -> [f64; N_SLOTS] {
        let mut t = [0.0; N_SLOTS];
        for (c, &m) in self.mix.iter().enumerate() {
            let f = if weekend { WEEKEND_FACTORS[c] } else { 1.0 };
            for (s, v) in t.iter_mut().enumerate() {
                *v += m * f * SLOT_SIGNATURES[c][s];
            }
        }
        t
    }
}

/// Six archetypes, coarsened pairwise into three land-use classes.
pub fn default_archetypes() -> Vec<Archetype> {
    use Category::*;
    vec![
        Archetype::new(
            "business",
            "commercial",
            &[
                (Working, 0.55),
                (Eating, 0.15),
                (Traveling, 0.15),
                (Shopping, 0.1),
                (Health, 0.05),
            ],
        ),
        Archetype::new(
            "residential",
            "residential",
            &[
                (Residential, 0.6),
                (Eating, 0.1),
                (Shopping, 0.1),
                (Educational, 0.1),
                (Health, 0.1),
            ],
        ),
        Archetype::new(
            "shopping",
            "commercial",
            &[
                (Shopping, 0.55),
                (Eating, 0.25),
                (Entertainment, 0.1),
                (Traveling, 0.1),
            ],
        ),
        Archetype::new(
            "nightlife",
            "recreation",
            &[
                (Entertainment, 0.5),
                (Eating, 0.35),
                (Shopping, 0.05),
                (Traveling, 0.1),
            ],
        ),
        Archetype::new(
            "campus",
            "residential",
            &[
                (Educational, 0.55),
                (Sporting, 0.15),
                (Eating, 0.1),
                (Outdoor, 0.1),
                (Residential, 0.1),
            ],
        ),
        Archetype::new(
            "parkland",
            "recreation",
            &[
                (Outdoor, 0.5),
                (Sporting, 0.3),
                (Traveling, 0.1),
                (Entertainment, 0.1),
            ],
        ),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct CityScenario {
    pub grid: GridSpec,
    pub archetypes: Vec<Archetype>,
    pub month: YearMonth,
    /// Local time minus UTC, in minutes.
    pub utc_offset_min: i32,
    /// Number of Voronoi patches archetypes are assigned to.
    pub n_patches: usize,
    /// Mean POIs per cell.
    pub poi_mean: f64,
    /// Weight of a random category mix blended into each cell's mix; zero
    /// also turns off Poisson sampling of counts.
    pub poi_noise: f64,
    /// Log-scale spread of per-cell activity volume.
    pub volume_sigma: f64,
    /// Log-scale spread of the multiplicative noise on each CDR value.
    pub timeline_noise: f64,
    /// Mean activity per slot for a cell of unit volume.
    pub base_volume: f64,
    pub seed: u64,
}

impl CityScenario {
    pub fn new(grid: GridSpec, seed: u64) -> Self {
        CityScenario {
            grid,
            archetypes: default_archetypes(),
            month: YearMonth {
                year: 2013,
                month: 11,
            },
            utc_offset_min: 60,
            n_patches: 24,
            poi_mean: 80.0,
            poi_noise: 0.1,
            volume_sigma: 0.5,
            timeline_noise: 0.1,
            base_volume: 200.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.archetypes.is_empty() {
            return Err(Error::input("scenario needs at least one archetype"));
        }
        for a in &self.archetypes {
            let total: f64 = a.mix.iter().sum();
            if a.mix.iter().any(|&m| !(m >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::input(format!(
                    "archetype `{}` mix must be non-negative and sum to 1",
                    a.name
                )));
            }
        }
        if self.n_patches < self.archetypes.len() || self.n_patches > self.grid.n_cells() {
            return Err(Error::input(format!(
                "n_patches = {} must be between {} archetypes and {} cells",
                self.n_patches,
                self.archetypes.len(),
                self.grid.n_cells()
            )));
        }
        let checks = [
            ("poi_mean", self.poi_mean, self.poi_mean > 0.0),
            (
                "poi_noise",
                self.poi_noise,
                (0.0..=1.0).contains(&self.poi_noise),
            ),
            ("volume_sigma", self.volume_sigma, self.volume_sigma >= 0.0),
            (
                "timeline_noise",
                self.timeline_noise,
                self.timeline_noise >= 0.0,
            ),
            ("base_volume", self.base_volume, self.base_volume > 0.0),
        ];
        for (name, v, ok) in checks {
            if !ok || !v.is_finite() {
                return Err(Error::input(format!(
                    "scenario {name} = {v} is out of range"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCity {
    pub pois: Vec<PoiRecord>,
    pub cdr: Vec<CdrRecord>,
    /// Planted archetype of every cell.
    pub truth: Vec<usize>,
    /// Activity volume multiplier of every cell.
    pub volumes: Vec<f64>,
}

const STREAM_PATCHES: u64 = 1;
const STREAM_POI: u64 = 2;
const STREAM_CDR: u64 = 3;

fn cell_rng(seed: u64, stream: u64, cell: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    r.set_stream(cell as u64);
    r
}

/// Planted archetype per cell: nearest patch center, patches cycling through
/// the archetypes in a shuffled order so each archetype appears.
pub fn assign_archetypes(s: &CityScenario) -> Vec<usize> {
    let mut rng = cell_rng(s.seed, STREAM_PATCHES, 0);
    let centers: Vec<(f64, f64)> = (0..s.n_patches)
        .map(|_| {
            (
                rng.random_range(0.0..s.grid.width_m()),
                rng.random_range(0.0..s.grid.height_m()),
            )
        })
        .collect();
    let k = s.archetypes.len();
    let mut kinds: Vec<usize> = (0..s.n_patches).map(|p| p % k).collect();
    rand::seq::SliceRandom::shuffle(kinds.as_mut_slice(), &mut rng);
    s.grid
        .cells()
        .map(|c| {
            let (x, y) = s.grid.centroid_local(c).expect("grid cell");
            let mut best = (0, f64::INFINITY);
            for (p, &(cx, cy)) in centers.iter().enumerate() {
                let d = (x - cx).powi(2) + (y - cy).powi(2);
                if d < best.1 {
                    best = (p, d);
                }
            }
            kinds[best.0]
        })
        .collect()
}

/// Expected POI count per mapped feature for a category mix of one cell.
fn feature_rates(
    mapping: &CategoryMapping,
    mix: &[f64; N_CATEGORIES],
    mean: f64,
) -> Vec<(String, f64)> {
    let mut rates: std::collections::BTreeMap<&str, f64> = std::collections::BTreeMap::new();
    for c in Category::ALL {
        let m = mix[c.index()];
        if m <= 0.0 {
            continue;
        }
        let feats = mapping.features_for(c);
        let total: f64 = feats.iter().map(|f| f.1).sum();
        for (f, share) in feats {
            *rates.entry(f).or_default() += mean * m * share / total;
        }
    }
    rates.into_iter().map(|(f, r)| (f.to_string(), r)).collect()
}

pub fn generate(s: &CityScenario, mapping: &CategoryMapping) -> Result<SyntheticCity> {
    s.validate()?;
    for c in Category::ALL {
        let used = s.archetypes.iter().any(|a| a.mix[c.index()] > 0.0);
        if used && mapping.features_for(c).is_empty() {
            return Err(Error::input(format!(
                "mapping has no feature for category `{c}`"
            )));
        }
    }
    let truth = assign_archetypes(s);
    let n = s.grid.n_cells();
    let days = s.month.days();
    let day0 = s
        .month
        .first_day()
        .and_hms_opt(0, 0, 0)
        .expect("midnight")
        .and_utc()
        .timestamp()
        / 60;
    let weekend: Vec<bool> = (0..days).map(|d| s.month.is_weekend(d)).collect();
    let vol_dist = Normal::new(0.0, s.volume_sigma).map_err(|e| Error::input(e.to_string()))?;
    let noise = Normal::new(-0.5 * s.timeline_noise.powi(2), s.timeline_noise)
        .map_err(|e| Error::input(e.to_string()))?;

    let per_cell = par::map_range(n, |i| -> Result<(Vec<PoiRecord>, Vec<CdrRecord>, f64)> {
        let a = &s.archetypes[truth[i]];
        let cell = CellId(i);

        let mut rng = cell_rng(s.seed, STREAM_POI, i);
        let mut mix = a.mix;
        if s.poi_noise > 0.0 {
            let r: Vec<f64> = (0..N_CATEGORIES).map(|_| rng.random::<f64>()).collect();
            let rt: f64 = r.iter().sum();
            for (m, v) in mix.iter_mut().zip(&r) {
                *m = (1.0 - s.poi_noise) * *m + s.poi_noise * v / rt;
            }
        }
        let (x0, y0, x1, y1) = s.grid.rect_local(cell);
        let mut pois = Vec::new();
        for (feature, rate) in feature_rates(mapping, &mix, s.poi_mean) {
            let count = if s.poi_noise > 0.0 {
                Poisson::new(rate)
                    .map(|p| p.sample(&mut rng) as u64)
                    .unwrap_or(0)
            } else {
                rate.round() as u64
            };
            for _ in 0..count {
                let x = rng.random_range(x0..x1);
                let y = rng.random_range(y0..y1);
                let (lon, lat) = s.grid.to_geo(x, y);
                pois.push(PoiRecord {
                    id: format!("s{i}-{}", pois.len()),
                    lon,
                    lat,
                    feature: feature.clone(),
                });
            }
        }

        let mut rng = cell_rng(s.seed, STREAM_CDR, i);
        let volume = vol_dist.sample(&mut rng).exp();
        let templates = [a.template(false), a.template(true)];
        let mut cdr = Vec::with_capacity(days * N_SLOTS);
        for (d, &we) in weekend.iter().enumerate() {
            for slot in 0..N_SLOTS {
                let expect = s.base_volume * volume * templates[usize::from(we)][slot];
                let v = expect * noise.sample(&mut rng).exp();
                let parts: Vec<f64> = CHANNEL_SHARES
                    .iter()
                    .map(|f| (v * f * 1000.0).round() / 1000.0)
                    .collect();
                let local = day0 + (d as i64) * 1440 + i64::from(SLOT_STARTS[slot]);
                cdr.push(CdrRecord {
                    cell,
                    timestamp: local - i64::from(s.utc_offset_min),
                    sms_in: parts[0],
                    sms_out: parts[1],
                    call_in: parts[2],
                    call_out: parts[3],
                    internet: parts[4],
                });
            }
        }
        Ok((pois, cdr, volume))
    });
    let mut city = SyntheticCity {
        pois: Vec::new(),
        cdr: Vec::with_capacity(n * days * N_SLOTS),
        truth,
        volumes: Vec::with_capacity(n),
    };
    for part in per_cell {
        let (p, c, v) = part?;
        city.pois.extend(p);
        city.cdr.extend(c);
        city.volumes.push(v);
    }
    Ok(city)
}

/// Noise-free CDR total implied by the scenario and drawn cell volumes.
pub fn expected_cdr_mass(s: &CityScenario, city: &SyntheticCity) -> f64 {
    let days = s.month.days();
    let mut total = 0.0;
    for (i, &a) in city.truth.iter().enumerate() {
        let arch = &s.archetypes[a];
        for d in 0..days {
            let t = arch.template(s.month.is_weekend(d));
            total += s.base_volume * city.volumes[i] * t.iter().sum::<f64>();
        }
    }
    total
}

/// Mean-day template of each archetype, as rows.
pub fn template_matrix(archetypes: &[Archetype]) -> Array2<f64> {
    Array2::from_shape_fn((archetypes.len(), N_SLOTS), |(a, s)| {
        archetypes[a].template(false)[s]
    })
}

pub const TRUTH_CSV_HEADER: &str = "cell_id,archetype,name,landuse";

pub fn write_truth_csv<W: Write>(
    truth: &[usize],
    archetypes: &[Archetype],
    mut out: W,
) -> Result<()> {
    writeln!(out, "{TRUTH_CSV_HEADER}")?;
    for (i, &a) in truth.iter().enumerate() {
        writeln!(
            out,
            "{i},{a},{},{}",
            archetypes[a].name, archetypes[a].landuse
        )?;
    }
    Ok(())
}

/// Reads planted archetype ids back; `n_cells` rows are expected.
pub fn read_truth_csv<R: Read>(stream: R, n_cells: usize) -> Result<Vec<usize>> {
    let mut rdr = csv::Reader::from_reader(stream);
    crate::timeline::check_header(rdr.headers(), TRUTH_CSV_HEADER)?;
    let mut truth = vec![None; n_cells];
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Row {
            row,
            message: e.to_string(),
        })?;
        let bad = || Error::Row {
            row,
            message: "malformed truth row".into(),
        };
        let cell: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let a: usize = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        if cell >= n_cells {
            return Err(Error::CellOutOfRange {
                index: cell,
                n: n_cells,
            });
        }
        truth[cell] = Some(a);
    }
    truth
        .into_iter()
        .enumerate()
        .map(|(i, t)| t.ok_or_else(|| Error::input(format!("truth file has no row for cell {i}"))))
        .collect()
}

/// One square polygon per cell tagged with the archetype's land-use class.
pub fn landuse_geojson(
    grid: &GridSpec,
    truth: &[usize],
    archetypes: &[Archetype],
) -> serde_json::Value {
    let features: Vec<serde_json::Value> = truth
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            serde_json::json!({
                "type": "Feature",
                "id": format!("cell{i}"),
                "properties": { "landuse": archetypes[a].landuse },
                "geometry": { "type": "Polygon", "coordinates": [cell_ring(grid, CellId(i))] },
            })
        })
        .collect();
    serde_json::json!({ "type": "FeatureCollection", "features": features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::{build_profiles, count_pois, plan_aggregation, IdfCorpus};

    fn small(seed: u64) -> CityScenario {
        let grid = GridSpec::new(9.0, 45.0, 235.0, 235.0, 6, 6).unwrap();
        let mut s = CityScenario::new(grid, seed);
        s.n_patches = 8;
        s.poi_mean = 30.0;
        s
    }

    #[test]
    fn archetype_mixes_sum_to_one() {
        for a in default_archetypes() {
            assert!((a.mix.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(a.template(false).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn same_seed_same_city() {
        let m = CategoryMapping::default();
        let a = generate(&small(3), &m).unwrap();
        let b = generate(&small(3), &m).unwrap();
        assert_eq!(a, b);
        let c = par::sequential(|| generate(&small(3), &m).unwrap());
        assert_eq!(a, c);
        assert_ne!(a, generate(&small(4), &m).unwrap());
    }

    #[test]
    fn planted_labels_are_valid() {
        let s = small(1);
        let t = assign_archetypes(&s);
        assert_eq!(t.len(), 36);
        assert!(t.iter().all(|&a| a < 6));
        let mut one = small(1);
        one.n_patches = 36;
        let kinds: std::collections::BTreeSet<usize> =
            assign_archetypes(&one).into_iter().collect();
        assert!(kinds.len() >= 5);
    }

    #[test]
    fn noiseless_disjoint_archetypes_give_two_profiles() {
        let grid = GridSpec::new(9.0, 45.0, 235.0, 235.0, 4, 4).unwrap();
        let mut s = CityScenario::new(grid, 5);
        s.archetypes = vec![
            Archetype::new("a", "x", &[(Category::Working, 1.0)]),
            Archetype::new(
                "b",
                "y",
                &[(Category::Sporting, 0.5), (Category::Outdoor, 0.5)],
            ),
        ];
        s.n_patches = 4;
        s.poi_noise = 0.0;
        let m = CategoryMapping::default();
        let city = generate(&s, &m).unwrap();
        let counts = count_pois(&s.grid, &city.pois);
        let plan = plan_aggregation(&s.grid, &counts, 50, 235.0, 2000.0).unwrap();
        let prof = build_profiles(&plan, &counts, &m, IdfCorpus::Occupied).unwrap();
        let mut rows: Vec<Vec<u64>> = prof
            .values
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 2);
    }

    #[test]
    fn cdr_mass_tracks_templates() {
        let m = CategoryMapping::default();
        let s = small(8);
        let city = generate(&s, &m).unwrap();
        let total: f64 = city.cdr.iter().map(CdrRecord::total).sum();
        let expect = expected_cdr_mass(&s, &city);
        assert!((total / expect - 1.0).abs() < 0.05);
        assert_eq!(city.cdr.len(), 36 * 30 * N_SLOTS);
    }

    #[test]
    fn truth_round_trip_and_landuse() {
        let s = small(2);
        let t = assign_archetypes(&s);
        let mut buf = Vec::new();
        write_truth_csv(&t, &s.archetypes, &mut buf).unwrap();
        assert_eq!(read_truth_csv(buf.as_slice(), 36).unwrap(), t);
        let gj = landuse_geojson(&s.grid, &t, &s.archetypes);
        let labels = crate::classify::landuse_labels(&s.grid, &gj).unwrap();
        for (l, &a) in labels.iter().zip(&t) {
            assert_eq!(l, &s.archetypes[a].landuse);
        }
    }
}
