//! Mobile-phone activity timelines: CDR ingestion, the cells x slots x days
//! tensor, per-cell z-score normalization and per-cell feature vectors.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use chrono::{Datelike, NaiveDate, NaiveDateTime, Weekday};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::grid::CellId;
use crate::par;

/// Number of daily time slots.
pub const N_SLOTS: usize = 8;

/// Slot start times in minutes after midnight; each slot runs to the next
/// start (the last to midnight).
pub const SLOT_STARTS: [u32; N_SLOTS] = [0, 420, 540, 660, 840, 1020, 1140, 1260];

/// Slot index of a local minute-of-day in `[0, 1440)`.
pub fn slot_of(minute_of_day: u32) -> usize {
    debug_assert!(minute_of_day < 1440);
    SLOT_STARTS
        .iter()
        .rposition(|&s| s <= minute_of_day)
        .unwrap_or(0)
}

pub fn slot_label(slot: usize) -> String {
    let start = SLOT_STARTS[slot];
    let end = SLOT_STARTS.get(slot + 1).copied().unwrap_or(1440);
    format!(
        "{:02}:{:02}-{:02}:{:02}",
        start / 60,
        start % 60,
        end / 60,
        end % 60
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        NaiveDate::from_ymd_opt(year, month, 1)
            .map(|_| YearMonth { year, month })
            .ok_or_else(|| Error::input(format!("invalid month {year}-{month}")))
    }

    pub fn first_day(&self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.year, self.month, 1).expect("validated month")
    }

    pub fn days(&self) -> usize {
        let first = self.first_day();
        let next = if self.month == 12 {
            NaiveDate::from_ymd_opt(self.year + 1, 1, 1)
        } else {
            NaiveDate::from_ymd_opt(self.year, self.month + 1, 1)
        }
        .unwrap();
        (next - first).num_days() as usize
    }

    /// Zero-based day index of `date` within this month.
    pub fn day_index(&self, date: NaiveDate) -> Option<usize> {
        (date.year() == self.year && date.month() == self.month).then(|| date.day0() as usize)
    }

    pub fn is_weekend(&self, day: usize) -> bool {
        let wd = (self.first_day() + chrono::Days::new(day as u64)).weekday();
        matches!(wd, Weekday::Sat | Weekday::Sun)
    }
}

/// One aggregated CDR row. `timestamp` is in minutes since the Unix epoch,
/// UTC.
#[derive(Debug, Clone, PartialEq)]
pub struct CdrRecord {
    pub cell: CellId,
    pub timestamp: i64,
    pub sms_in: f64,
    pub sms_out: f64,
    pub call_in: f64,
    pub call_out: f64,
    pub internet: f64,
}

impl CdrRecord {
    pub fn total(&self) -> f64 {
        self.sms_in + self.sms_out + self.call_in + self.call_out + self.internet
    }
}

pub const CDR_CSV_HEADER: [&str; 7] = [
    "cell_id",
    "timestamp",
    "sms_in",
    "sms_out",
    "call_in",
    "call_out",
    "internet",
];

const TS_FORMAT: &str = "%Y-%m-%dT%H:%M";

pub fn parse_timestamp(s: &str) -> Option<i64> {
    NaiveDateTime::parse_from_str(s.trim(), TS_FORMAT)
        .ok()
        .map(|t| t.and_utc().timestamp().div_euclid(60))
}

pub fn format_timestamp(epoch_minutes: i64) -> String {
    chrono::DateTime::from_timestamp(epoch_minutes * 60, 0)
        .expect("timestamp in range")
        .naive_utc()
        .format(TS_FORMAT)
        .to_string()
}

/// Reads the CDR CSV. Blank counts read as zero; row numbers are file lines.
pub fn parse_cdr_csv<R: Read>(stream: R) -> Result<Vec<CdrRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(stream);
    let mut records = rdr.records();
    let header = records.next().transpose().map_err(|e| Error::Row {
        row: 1,
        message: e.to_string(),
    })?;
    let found = header
        .as_ref()
        .map(|h| h.iter().map(str::trim).collect::<Vec<_>>());
    if found.as_deref() != Some(&CDR_CSV_HEADER[..]) {
        return Err(Error::Header {
            expected: CDR_CSV_HEADER.join(","),
            found: found.map(|f| f.join(",")).unwrap_or_default(),
        });
    }
    let mut out = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| Error::Row {
            row: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let err = |message: String| Error::Row { row, message };
        if rec.len() != CDR_CSV_HEADER.len() {
            return Err(err(format!("expected 7 fields, found {}", rec.len())));
        }
        let cell: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| err(format!("cell_id `{}` is not an index", &rec[0])))?;
        let timestamp = parse_timestamp(&rec[1])
            .ok_or_else(|| err(format!("timestamp `{}` is not YYYY-MM-DDTHH:MM", &rec[1])))?;
        let mut counts = [0.0f64; 5];
        for (i, v) in counts.iter_mut().enumerate() {
            let field = rec[i + 2].trim();
            if field.is_empty() {
                continue;
            }
            *v = field
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite() && *x >= 0.0)
                .ok_or_else(|| {
                    err(format!(
                        "{} `{field}` is not a non-negative number",
                        CDR_CSV_HEADER[i + 2]
                    ))
                })?;
        }
        out.push(CdrRecord {
            cell: CellId(cell),
            timestamp,
            sms_in: counts[0],
            sms_out: counts[1],
            call_in: counts[2],
            call_out: counts[3],
            internet: counts[4],
        });
    }
    Ok(out)
}

pub fn write_cdr_csv<W: Write>(records: &[CdrRecord], mut out: W) -> Result<()> {
    writeln!(out, "{}", CDR_CSV_HEADER.join(","))?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.cell,
            format_timestamp(r.timestamp),
            r.sms_in,
            r.sms_out,
            r.call_in,
            r.call_out,
            r.internet
        )?;
    }
    Ok(())
}

/// Activity totals per cell, slot and day.
#[derive(Debug, Clone, PartialEq)]
pub struct TimelineTensor {
    pub month: YearMonth,
    /// Shape `(cells, N_SLOTS, days)`.
    pub raw: Array3<f64>,
}

impl TimelineTensor {
    pub fn n_cells(&self) -> usize {
        self.raw.dim().0
    }

    pub fn days(&self) -> usize {
        self.raw.dim().2
    }
}

/// Local (day index, slot) of a UTC timestamp.
fn place(ts: i64, utc_offset_min: i32, month: YearMonth) -> Option<(usize, usize)> {
    let local = chrono::DateTime::from_timestamp((ts + utc_offset_min as i64) * 60, 0)?.naive_utc();
    let day = month.day_index(local.date())?;
    let minute = chrono::Timelike::hour(&local) * 60 + chrono::Timelike::minute(&local);
    Some((day, slot_of(minute)))
}

/// Sums each record's five channels into its (cell, slot, day) entry.
pub fn build_tensor(
    records: &[CdrRecord],
    n_cells: usize,
    month: YearMonth,
    utc_offset_min: i32,
) -> Result<TimelineTensor> {
    let days = month.days();
    let mut by_cell: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); n_cells];
    for (i, r) in records.iter().enumerate() {
        if r.cell.0 >= n_cells {
            return Err(Error::Record {
                row: i,
                message: format!("unknown cell id {}", r.cell),
            });
        }
        let (day, slot) =
            place(r.timestamp, utc_offset_min, month).ok_or_else(|| Error::Record {
                row: i,
                message: format!(
                    "{} lies outside {}-{:02}",
                    format_timestamp(r.timestamp),
                    month.year,
                    month.month
                ),
            })?;
        by_cell[r.cell.0].push((slot, day, r.total()));
    }
    let mut raw = Array3::<f64>::zeros((n_cells, N_SLOTS, days));
    let stride = N_SLOTS * days;
    par::for_each_chunk_mut(
        raw.as_slice_mut().expect("standard layout"),
        stride,
        |cell, block| {
            for &(slot, day, v) in &by_cell[cell] {
                block[slot * days + day] += v;
            }
        },
    );
    Ok(TimelineTensor { month, raw })
}

/// Per-cell z-scored timelines.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedTimeline {
    pub month: YearMonth,
    pub z: Array3<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Constant-activity cells; their `z` is zero.
    pub flagged: Vec<bool>,
}

impl NormalizedTimeline {
    pub fn n_cells(&self) -> usize {
        self.flagged.len()
    }

    pub fn usable_cells(&self) -> Vec<CellId> {
        (0..self.n_cells())
            .filter(|&i| !self.flagged[i])
            .map(CellId)
            .collect()
    }
}

/// `z = (raw - mu_i) / sigma_i` with per-cell mean and population standard
/// deviation over all slots and days.
pub fn zscore(t: &TimelineTensor) -> NormalizedTimeline {
    let (n, p, d) = t.raw.dim();
    let stride = p * d;
    let src = t.raw.as_slice().expect("standard layout");
    let mut z = Array3::<f64>::zeros((n, p, d));
    let stats = par::map_range(n, |i| {
        let v = &src[i * stride..(i + 1) * stride];
        let mu = v.iter().sum::<f64>() / stride as f64;
        let var = v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / stride as f64;
        let sigma = var.sqrt();
        let constant = !(sigma > 1e-12 * (1.0 + mu.abs()));
        (mu, sigma, constant)
    });
    par::for_each_chunk_mut(z.as_slice_mut().unwrap(), stride, |i, block| {
        let (mu, sigma, constant) = stats[i];
        if constant {
            return;
        }
        let v = &src[i * stride..(i + 1) * stride];
        for (o, x) in block.iter_mut().zip(v) {
            *o = (x - mu) / sigma;
        }
    });
    NormalizedTimeline {
        month: t.month,
        z,
        mu: stats.iter().map(|s| s.0).collect(),
        sigma: stats.iter().map(|s| s.1).collect(),
        flagged: stats.iter().map(|s| s.2).collect(),
    }
}

/// How per-cell feature vectors are built from a normalized timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureMode {
    /// Mean over days of each slot (8 features).
    #[default]
    MeanDay,
    /// Separate slot means over Mon-Fri and Sat-Sun (16 features).
    WeekdayWeekend,
}

impl FromStr for FeatureMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mean_day" => Ok(FeatureMode::MeanDay),
            "weekday_weekend" => Ok(FeatureMode::WeekdayWeekend),
            _ => Err(format!(
                "feature mode must be `mean_day` or `weekday_weekend`, got `{s}`"
            )),
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureMode::MeanDay => "mean_day",
            FeatureMode::WeekdayWeekend => "weekday_weekend",
        })
    }
}

impl FeatureMode {
    pub fn width(self) -> usize {
        match self {
            FeatureMode::MeanDay => N_SLOTS,
            FeatureMode::WeekdayWeekend => 2 * N_SLOTS,
        }
    }

    pub fn column_names(self) -> Vec<String> {
        match self {
            FeatureMode::MeanDay => (0..N_SLOTS).map(|j| format!("slot{j}")).collect(),
            FeatureMode::WeekdayWeekend => (0..N_SLOTS)
                .map(|j| format!("weekday_slot{j}"))
                .chain((0..N_SLOTS).map(|j| format!("weekend_slot{j}")))
                .collect(),
        }
    }
}

/// One feature row per cell (flagged cells give zero rows).
pub fn timeline_features(nt: &NormalizedTimeline, mode: FeatureMode) -> Array2<f64> {
    let (n, p, d) = nt.z.dim();
    let weekend: Vec<bool> = (0..d).map(|k| nt.month.is_weekend(k)).collect();
    let n_we = weekend.iter().filter(|&&w| w).count();
    let n_wd = d - n_we;
    let mut out = Array2::<f64>::zeros((n, mode.width()));
    for i in 0..n {
        for j in 0..p {
            let mut all = 0.0;
            let mut wd = 0.0;
            let mut we = 0.0;
            for k in 0..d {
                let v = nt.z[[i, j, k]];
                all += v;
                if weekend[k] {
                    we += v;
                } else {
                    wd += v;
                }
            }
            match mode {
                FeatureMode::MeanDay => out[[i, j]] = all / d as f64,
                FeatureMode::WeekdayWeekend => {
                    out[[i, j]] = if n_wd > 0 { wd / n_wd as f64 } else { 0.0 };
                    out[[i, p + j]] = if n_we > 0 { we / n_we as f64 } else { 0.0 };
                }
            }
        }
    }
    out
}

pub fn write_normalized_csv<W: Write>(nt: &NormalizedTimeline, mut out: W) -> Result<()> {
    writeln!(out, "cell_id,slot,day,z")?;
    let (n, p, d) = nt.z.dim();
    for i in 0..n {
        for j in 0..p {
            for k in 0..d {
                writeln!(out, "{i},{j},{k},{}", nt.z[[i, j, k]])?;
            }
        }
    }
    Ok(())
}

pub fn write_flags_csv<W: Write>(nt: &NormalizedTimeline, mut out: W) -> Result<()> {
    writeln!(out, "cell_id,mu,sigma,flag")?;
    for i in 0..nt.n_cells() {
        let flag = if nt.flagged[i] { "constant" } else { "ok" };
        writeln!(out, "{i},{},{},{flag}", nt.mu[i], nt.sigma[i])?;
    }
    Ok(())
}

/// Reads the two files written by [`write_normalized_csv`] and
/// [`write_flags_csv`].
pub fn read_normalized_csv<R1: Read, R2: Read>(
    z_csv: R1,
    flags_csv: R2,
    month: YearMonth,
) -> Result<NormalizedTimeline> {
    let mut mu = Vec::new();
    let mut sigma = Vec::new();
    let mut flagged = Vec::new();
    let mut rdr = csv::Reader::from_reader(flags_csv);
    check_header(rdr.headers(), "cell_id,mu,sigma,flag")?;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Row {
            row,
            message: e.to_string(),
        })?;
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Row {
                row,
                message: format!("bad number `{s}`"),
            })
        };
        if rec.len() != 4 || rec[0].parse::<usize>().ok() != Some(i) {
            return Err(Error::Row {
                row,
                message: "malformed flags row".into(),
            });
        }
        mu.push(num(&rec[1])?);
        sigma.push(num(&rec[2])?);
        flagged.push(&rec[3] == "constant");
    }
    let n = flagged.len();
    let d = month.days();
    let mut z = Array3::<f64>::zeros((n, N_SLOTS, d));
    let mut seen = 0usize;
    let mut rdr = csv::Reader::from_reader(z_csv);
    check_header(rdr.headers(), "cell_id,slot,day,z")?;
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Row {
            row,
            message: e.to_string(),
        })?;
        let bad = || Error::Row {
            row,
            message: "malformed timeline row".into(),
        };
        if rec.len() != 4 {
            return Err(bad());
        }
        let cell: usize = rec[0].parse().map_err(|_| bad())?;
        let slot: usize = rec[1].parse().map_err(|_| bad())?;
        let day: usize = rec[2].parse().map_err(|_| bad())?;
        let v: f64 = rec[3].parse().map_err(|_| bad())?;
        if cell >= n || slot >= N_SLOTS || day >= d {
            return Err(bad());
        }
        z[[cell, slot, day]] = v;
        seen += 1;
    }
    if seen != n * N_SLOTS * d {
        return Err(Error::input(format!(
            "timeline file has {seen} entries, expected {}",
            n * N_SLOTS * d
        )));
    }
    Ok(NormalizedTimeline {
        month,
        z,
        mu,
        sigma,
        flagged,
    })
}

pub(crate) fn check_header(
    found: std::result::Result<&csv::StringRecord, csv::Error>,
    expected: &str,
) -> Result<()> {
    let found = found
        .map(|h| h.iter().collect::<Vec<_>>().join(","))
        .map_err(|e| Error::Row {
            row: 1,
            message: e.to_string(),
        })?;
    if found != expected {
        return Err(Error::Header {
            expected: expected.into(),
            found,
        });
    }
    Ok(())
}
