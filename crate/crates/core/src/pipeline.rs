//! Command orchestration over persistent CSV/GeoJSON artifacts.
//!
//! Each command reads its prerequisites from the output directory, computes
//! everything in memory, and only then writes its files (temp file + rename).
//! A failing command therefore leaves no partial output behind. Every
//! successful run replaces that command's rows in `manifest.csv`; wall-clock
//! timings go to `timings.log`, which is the one file that differs between
//! otherwise identical runs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, Axis};
use sha2::{Digest, Sha256};

use crate::classify::{self, Dataset, EvalReport};
use crate::config::{ClassTarget, Config, ConfigError, LanduseDirection, ModelKind};
use crate::error::Error;
use crate::poi::{self, CategoryMapping};
use crate::profiles::{self, ActivityProfileMatrix};
use crate::spectral;
use crate::stats::{self, StatRow};
use crate::synth;
use crate::timeline;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("missing {}: run `{command}` first", artifact.display())]
    Prerequisite {
        command: &'static str,
        artifact: PathBuf,
    },

    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: Error },

    #[error("{command}: {source}")]
    Stage {
        command: &'static str,
        source: Error,
    },
}

impl PipelineError {
    /// 2 for configuration problems, 4 for numerical failures, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Prerequisite { .. } => 3,
            PipelineError::File { source, .. } | PipelineError::Stage { source, .. } => {
                if source.is_numeric() {
                    4
                } else {
                    3
                }
            }
        }
    }
}

pub type PResult<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Command {
    Synth,
    IngestPoi,
    Profiles,
    Cluster,
    Timelines,
    Hopkins,
    Cca,
    Classify,
    LanduseCompare,
    Report,
}

impl Command {
    /// Order in which a full run executes the commands.
    pub const ALL: [Command; 10] = [
        Command::Synth,
        Command::IngestPoi,
        Command::Profiles,
        Command::Cluster,
        Command::Timelines,
        Command::Hopkins,
        Command::Cca,
        Command::Classify,
        Command::LanduseCompare,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::IngestPoi => "ingest-poi",
            Command::Profiles => "profiles",
            Command::Cluster => "cluster",
            Command::Timelines => "timelines",
            Command::Hopkins => "hopkins",
            Command::Cca => "cca",
            Command::Classify => "classify",
            Command::LanduseCompare => "landuse-compare",
            Command::Report => "report",
        }
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown command `{s}`"))
    }
}

impl std::fmt::Display for Command {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const MANIFEST: &str = "manifest.csv";
pub const TIMINGS: &str = "timings.log";

/// Files a command produced, relative to the output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub command: Command,
    pub artifacts: Vec<String>,
    pub seconds: f64,
}

/// Files computed by a command, written only once the command succeeded.
#[derive(Default)]
struct Staged {
    files: Vec<(String, Vec<u8>)>,
}

impl Staged {
    fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    fn add_with(
        &mut self,
        cmd: Command,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> crate::Result<()>,
    ) -> PResult<()> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(stage(cmd))?;
        self.add(name, buf);
        Ok(())
    }
}

fn stage(command: Command) -> impl Fn(Error) -> PipelineError {
    move |source| PipelineError::Stage {
        command: command.name(),
        source,
    }
}

fn file_err(path: &Path) -> impl Fn(Error) -> PipelineError + '_ {
    move |source| PipelineError::File {
        path: path.to_path_buf(),
        source,
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |e| PipelineError::File {
        path: path.to_path_buf(),
        source: Error::Io(e),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes every staged file, or none of them.
fn commit(out: &Path, staged: &Staged) -> PResult<()> {
    let mut temps = Vec::new();
    let result = (|| {
        for (name, bytes) in &staged.files {
            let dest = out.join(name);
            if let Some(dir) = dest.parent() {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
            }
            let tmp = dest.with_file_name(format!(
                ".{}.partial",
                dest.file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or("artifact")
            ));
            fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
            temps.push((tmp, dest));
        }
        for (tmp, dest) in &temps {
            fs::rename(tmp, dest).map_err(io_err(dest))?;
        }
        Ok(())
    })();
    if result.is_err() {
        for (tmp, _) in &temps {
            let _ = fs::remove_file(tmp);
        }
    }
    result
}

/// Manifest rows: command, config hash, seed, artifact, sha256.
fn update_manifest(out: &Path, cmd: Command, cfg: &Config, staged: &Staged) -> PResult<()> {
    let path = out.join(MANIFEST);
    let mut rows: Vec<(usize, String, String)> = Vec::new();
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
            let c = line.split(',').next().unwrap_or("");
            match Command::from_str(c) {
                Ok(other) if other != cmd => {
                    let artifact = line.split(',').nth(3).unwrap_or("").to_string();
                    rows.push((other as usize, artifact, line.to_string()));
                }
                _ => {}
            }
        }
    }
    for (name, bytes) in &staged.files {
        let line = format!(
            "{},{},{},{},{}",
            cmd.name(),
            cfg.hash(),
            cfg.seed,
            name,
            sha256_hex(bytes)
        );
        rows.push((cmd as usize, name.clone(), line));
    }
    rows.sort();
    let mut text = String::from("command,config_hash,seed,artifact,sha256\n");
    for (_, _, line) in rows {
        text.push_str(&line);
        text.push('\n');
    }
    let mut staged = Staged::default();
    staged.add(MANIFEST, text.into_bytes());
    commit(out, &staged)
}

fn append_timing(out: &Path, cmd: Command, seconds: f64) -> PResult<()> {
    let path = out.join(TIMINGS);
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io_err(&path))?;
    writeln!(f, "{} {seconds:.3}s", cmd.name()).map_err(io_err(&path))
}

/// Runs one command against the config's output directory.
pub fn run(cmd: Command, cfg: &Config) -> PResult<RunSummary> {
    cfg.validate()?;
    let out = cfg.out_dir.as_path();
    fs::create_dir_all(out).map_err(io_err(out))?;
    let start = Instant::now();
    let staged = match cmd {
        Command::Synth => cmd_synth(cfg)?,
        Command::IngestPoi => cmd_ingest(cfg)?,
        Command::Profiles => cmd_profiles(cfg)?,
        Command::Cluster => cmd_cluster(cfg)?,
        Command::Timelines => cmd_timelines(cfg)?,
        Command::Hopkins => cmd_hopkins(cfg)?,
        Command::Cca => cmd_cca(cfg)?,
        Command::Classify => cmd_classify(cfg)?,
        Command::LanduseCompare => cmd_landuse(cfg)?,
        Command::Report => cmd_report(cfg)?,
    };
    commit(out, &staged)?;
    update_manifest(out, cmd, cfg, &staged)?;
    let seconds = start.elapsed().as_secs_f64();
    append_timing(out, cmd, seconds)?;
    log::info!(
        "{cmd}: wrote {} artifacts in {seconds:.2}s",
        staged.files.len()
    );
    Ok(RunSummary {
        command: cmd,
        artifacts: staged.files.into_iter().map(|(n, _)| n).collect(),
        seconds,
    })
}

/// Runs every command except `synth`, in pipeline order.
pub fn run_chain(cfg: &Config) -> PResult<Vec<RunSummary>> {
    Command::ALL[1..].iter().map(|&c| run(c, cfg)).collect()
}

// ---- artifact access -------------------------------------------------------

/// Opens an artifact produced by `producer`, or names that command.
fn open_artifact(cfg: &Config, name: &str, producer: Command) -> PResult<BufReader<fs::File>> {
    let path = cfg.out_dir.join(name);
    match fs::File::open(&path) {
        Ok(f) => Ok(BufReader::new(f)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(PipelineError::Prerequisite {
            command: producer.name(),
            artifact: path,
        }),
        Err(e) => Err(io_err(&path)(e)),
    }
}

fn read_artifact_text(cfg: &Config, name: &str, producer: Command) -> PResult<String> {
    let mut s = String::new();
    std::io::Read::read_to_string(&mut open_artifact(cfg, name, producer)?, &mut s)
        .map_err(io_err(&cfg.out_dir.join(name)))?;
    Ok(s)
}

fn optional_artifact_text(cfg: &Config, name: &str) -> Option<String> {
    fs::read_to_string(cfg.out_dir.join(name)).ok()
}

/// An explicit input path, or the matching file of a `synth` run.
fn input_path(cfg: &Config, explicit: &Option<PathBuf>, synth_name: &str) -> PResult<PathBuf> {
    match explicit {
        Some(p) if p.exists() => Ok(p.clone()),
        Some(p) => Err(ConfigError {
            line: None,
            message: format!("input file {} does not exist", p.display()),
        }
        .into()),
        None => {
            let p = cfg.out_dir.join("synth").join(synth_name);
            if p.exists() {
                Ok(p)
            } else {
                Err(PipelineError::Prerequisite {
                    command: Command::Synth.name(),
                    artifact: p,
                })
            }
        }
    }
}

fn open_input(path: &Path) -> PResult<BufReader<fs::File>> {
    Ok(BufReader::new(fs::File::open(path).map_err(io_err(path))?))
}

fn mapping(cfg: &Config) -> PResult<CategoryMapping> {
    match &cfg.input.mapping {
        None => Ok(CategoryMapping::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| ConfigError {
                line: None,
                message: format!("cannot read mapping {}: {e}", p.display()),
            })?;
            CategoryMapping::parse(&text).map_err(file_err(p))
        }
    }
}

fn load_profiles(cfg: &Config) -> PResult<ActivityProfileMatrix> {
    let a = profiles::read_profiles_csv(open_artifact(cfg, PROFILES, Command::Profiles)?)
        .map_err(file_err(&cfg.out_dir.join(PROFILES)))?;
    if a.n_cells() != cfg.grid.n_cells() {
        return Err(PipelineError::File {
            path: cfg.out_dir.join(PROFILES),
            source: Error::InvalidInput(format!(
                "{} rows but the grid has {} cells; rerun `profiles`",
                a.n_cells(),
                cfg.grid.n_cells()
            )),
        });
    }
    Ok(a)
}

fn load_clusters(cfg: &Config) -> PResult<Vec<Option<usize>>> {
    spectral::read_clusters_csv(
        open_artifact(cfg, CLUSTERS, Command::Cluster)?,
        cfg.grid.n_cells(),
    )
    .map_err(file_err(&cfg.out_dir.join(CLUSTERS)))
}

/// Timeline feature rows of unflagged cells.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub cells: Vec<usize>,
    pub columns: Vec<String>,
    pub x: Array2<f64>,
}

impl FeatureTable {
    fn row_of(&self) -> BTreeMap<usize, usize> {
        self.cells
            .iter()
            .enumerate()
            .map(|(r, &c)| (c, r))
            .collect()
    }
}

pub fn write_features_csv<W: std::io::Write>(t: &FeatureTable, mut out: W) -> crate::Result<()> {
    writeln!(out, "cell_id,{}", t.columns.join(","))?;
    for (r, c) in t.cells.iter().enumerate() {
        write!(out, "{c}")?;
        for v in t.x.row(r) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_features_csv<R: std::io::Read>(
    stream: R,
    n_cells: usize,
) -> crate::Result<FeatureTable> {
    let mut rdr = csv::Reader::from_reader(stream);
    let header = rdr.headers().map_err(|e| Error::Row {
        row: 1,
        message: e.to_string(),
    })?;
    if header.get(0) != Some("cell_id") || header.len() < 2 {
        return Err(Error::Header {
            expected: "cell_id,<feature columns>".into(),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let columns: Vec<String> = header.iter().skip(1).map(String::from).collect();
    let q = columns.len();
    let mut cells = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Row {
            row,
            message: e.to_string(),
        })?;
        let bad = || Error::Row {
            row,
            message: "malformed feature row".into(),
        };
        if rec.len() != q + 1 {
            return Err(bad());
        }
        let cell: usize = rec[0].parse().map_err(|_| bad())?;
        if cell >= n_cells {
            return Err(Error::CellOutOfRange {
                index: cell,
                n: n_cells,
            });
        }
        cells.push(cell);
        for v in rec.iter().skip(1) {
            values.push(v.parse::<f64>().map_err(|_| bad())?);
        }
    }
    let x = Array2::from_shape_vec((cells.len(), q), values)
        .map_err(|e| Error::input(e.to_string()))?;
    Ok(FeatureTable { cells, columns, x })
}

fn load_features(cfg: &Config) -> PResult<FeatureTable> {
    read_features_csv(
        open_artifact(cfg, FEATURES, Command::Timelines)?,
        cfg.grid.n_cells(),
    )
    .map_err(file_err(&cfg.out_dir.join(FEATURES)))
}

fn rows_of(x: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    x.select(Axis(0), rows)
}

fn cluster_names(k: usize) -> Vec<String> {
    (1..=k).map(|i| format!("S{i}")).collect()
}

/// Drops classes without members and renumbers the rest in order.
pub fn compact_labels(y: &[usize], names: &[String]) -> (Vec<usize>, Vec<String>) {
    let used: BTreeSet<usize> = y.iter().copied().collect();
    let remap: BTreeMap<usize, usize> = used.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    (
        y.iter().map(|c| remap[c]).collect(),
        used.iter().map(|&c| names[c].clone()).collect(),
    )
}

/// One-hot columns for label ids `0..k`.
pub fn one_hot_features(labels: &[usize], k: usize) -> Array2<f64> {
    Array2::from_shape_fn((labels.len(), k), |(i, j)| {
        f64::from(u8::from(labels[i] == j))
    })
}

// ---- artifact names --------------------------------------------------------

const POIS: &str = "pois.csv";
const INGEST_SUMMARY: &str = "ingest_summary.csv";
const PROFILES: &str = "profiles.csv";
const AGGREGATION: &str = "aggregation.csv";
const CLUSTERS: &str = "clusters.csv";
const SPECTRUM: &str = "spectrum.csv";
const CLUSTERS_GEOJSON: &str = "clusters.geojson";
const TIMELINES: &str = "timelines.csv";
const TIMELINE_FLAGS: &str = "timeline_flags.csv";
const FEATURES: &str = "timeline_features.csv";
const HOPKINS: &str = "hopkins.csv";
const CCA: &str = "cca.csv";
const CLASSIFY_SUMMARY: &str = "classify_summary.csv";
const CLASSIFY_TABLES: &str = "classify_tables.txt";
const LANDUSE_LABELS: &str = "landuse_labels.csv";
const LANDUSE_CROSSTAB: &str = "landuse_crosstab.csv";
const LANDUSE_COMPARE: &str = "landuse_compare.csv";
pub const REPORT: &str = "report.txt";

// ---- commands ----------------------------------------------------------------

fn cmd_synth(cfg: &Config) -> PResult<Staged> {
    let cmd = Command::Synth;
    let s = cfg.scenario();
    s.validate().map_err(|e| ConfigError {
        line: None,
        message: format!("synth: {e}"),
    })?;
    let map = mapping(cfg)?;
    let city = synth::generate(&s, &map).map_err(stage(cmd))?;
    let mut st = Staged::default();
    st.add_with(cmd, "synth/pois.csv", |b| poi::write_poi_csv(&city.pois, b))?;
    st.add_with(cmd, "synth/cdr.csv", |b| {
        timeline::write_cdr_csv(&city.cdr, b)
    })?;
    st.add_with(cmd, "synth/truth.csv", |b| {
        synth::write_truth_csv(&city.truth, &s.archetypes, b)
    })?;
    let lu = synth::landuse_geojson(&s.grid, &city.truth, &s.archetypes);
    st.add("synth/landuse.geojson", pretty_json(&lu));
    Ok(st)
}

fn pretty_json(v: &serde_json::Value) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("json values serialize");
    b.push(b'\n');
    b
}

fn cmd_ingest(cfg: &Config) -> PResult<Staged> {
    let cmd = Command::IngestPoi;
    let map = mapping(cfg)?;
    let (records, untagged, invalid) = match (&cfg.input.osm, &cfg.input.poi_csv) {
        (Some(_), Some(_)) => {
            return Err(ConfigError {
                line: None,
                message: "set only one of input.osm and input.poi_csv".into(),
            }
            .into())
        }
        (Some(_), None) => {
            let p = input_path(cfg, &cfg.input.osm, "")?;
            let parsed = poi::parse_osm_xml(open_input(&p)?).map_err(file_err(&p))?;
            (
                parsed.records,
                parsed.skipped_untagged,
                parsed.skipped_invalid,
            )
        }
        (None, _) => {
            let p = input_path(cfg, &cfg.input.poi_csv, "pois.csv")?;
            (
                poi::parse_poi_csv(open_input(&p)?).map_err(file_err(&p))?,
                0,
                0,
            )
        }
    };
    let relevant = poi::filter_relevant(&records, &map);
    let outside = relevant
        .iter()
        .filter(|p| cfg.grid.cell_of_point(p.lon, p.lat).is_none())
        .count();
    let mut st = Staged::default();
    st.add_with(cmd, POIS, |b| poi::write_poi_csv(&relevant, b))?;
    let summary = [
        ("parsed", records.len()),
        ("skipped_untagged", untagged),
        ("skipped_invalid", invalid),
        ("irrelevant", records.len() - relevant.len()),
        ("kept", relevant.len()),
        ("outside_grid", outside),
    ];
    let mut text = String::from("metric,value\n");
    for (k, v) in summary {
        let _ = writeln!(text, "{k},{v}");
    }
    st.add(INGEST_SUMMARY, text.into_bytes());
    Ok(st)
}

fn cmd_profiles(cfg: &Config) -> PResult<Staged> {
    let cmd = Command::Profiles;
    let map = mapping(cfg)?;
    let pois = poi::parse_poi_csv(open_artifact(cfg, POIS, Command::IngestPoi)?)
        .map_err(file_err(&cfg.out_dir.join(POIS)))?;
    let counts = profiles::count_pois(&cfg.grid, &pois);
    let plan = profiles::plan_aggregation(
        &cfg.grid,
        &counts,
        cfg.h,
        cfg.radius_step_m,
        cfg.radius_cap_m,
    )
    .map_err(stage(cmd))?;
    let a = profiles::build_profiles(&plan, &counts, &map, cfg.idf_corpus).map_err(stage(cmd))?;
    let mut st = Staged::default();
    st.add_with(cmd, PROFILES, |b| profiles::write_profiles_csv(&a, b))?;
    let mut text = String::from("cell_id,radius_m,members,poi_total,capped\n");
    for i in 0..plan.len() {
        let _ = writeln!(
            text,
            "{i},{},{},{},{}",
            plan.radius_m[i],
            plan.members[i].len(),
            plan.poi_total[i],
            plan.capped[i]
        );
    }
    st.add(AGGREGATION, text.into_bytes());
    Ok(st)
}

fn cmd_cluster(cfg: &Config) -> PResult<Staged> {
    let cmd = Command::Cluster;
    let a = load_profiles(cfg)?;
    let model = spectral::spectral_cluster(&a, &cfg.spectral_params()).map_err(stage(cmd))?;
    log::info!(
        "cluster: k = {} over {} cells",
        model.k,
        model.labeled().len()
    );
    let mut st = Staged::default();
    st.add_with(cmd, CLUSTERS, |b| spectral::write_clusters_csv(&model, b))?;
    st.add_with(cmd, SPECTRUM, |b| spectral::write_spectrum_csv(&model, b))?;
    st.add(
        CLUSTERS_GEOJSON,
        pretty_json(&spectral::clusters_geojson(&cfg.grid, &model)),
    );
    Ok(st)
}

fn cmd_timelines(cfg: &Config) -> PResult<Staged> {
    let cmd = Command::Timelines;
    let p = input_path(cfg, &cfg.input.cdr, "cdr.csv")?;
    let records = timeline::parse_cdr_csv(open_input(&p)?).map_err(file_err(&p))?;
    let t = timeline::build_tensor(&records, cfg.grid.n_cells(), cfg.month, cfg.utc_offset_min)
        .map_err(file_err(&p))?;
    let nt = timeline::zscore(&t);
    let all = timeline::timeline_features(&nt, cfg.features);
    let cells: Vec<usize> = nt.usable_cells().into_iter().map(|c| c.0).collect();
    let table = FeatureTable {
        x: rows_of(&all, &cells),
        cells,
        columns: cfg.features.column_names(),
    };
    let mut st = Staged::default();
    st.add_with(cmd, TIMELINES, |b| timeline::write_normalized_csv(&nt, b))?;
    st.add_with(cmd, TIMELINE_FLAGS, |b| timeline::write_flags_csv(&nt, b))?;
    st.add_with(cmd, FEATURES, |b| write_features_csv(&table, b))?;
    Ok(st)
}

fn hopkins_m(cfg: &Config, n: usize) -> usize {
    cfg.hopkins_m.unwrap_or((n / 10).max(1))
}

fn cmd_hopkins(cfg: &Config) -> PResult<Staged> {
    let cmd = Command::Hopkins;
    let a = load_profiles(cfg)?;
    let f = load_features(cfg)?;
    let usable: Vec<usize> = a.usable_cells().into_iter().map(|c| c.0).collect();
    let pa = rows_of(&a.values, &usable);
    let hp = stats::hopkins(pa.view(), hopkins_m(cfg, pa.nrows()), cfg.seed).map_err(stage(cmd))?;
    let ht =
        stats::hopkins(f.x.view(), hopkins_m(cfg, f.x.nrows()), cfg.seed).map_err(stage(cmd))?;
    let rows = vec![
        StatRow::new("hopkins", "profiles", hp.h, Some(hp.seed)),
        StatRow::new("hopkins", "timelines", ht.h, Some(ht.seed)),
        StatRow::new("hopkins_m", "profiles", hp.m as f64, None),
        StatRow::new("hopkins_m", "timelines", ht.m as f64, None),
    ];
    let mut st = Staged::default();
    st.add_with(cmd, HOPKINS, |b| stats::write_stats_csv(&rows, b))?;
    Ok(st)
}

/// Cells usable in both profiles and timelines and assigned to a cluster.
struct Joined {
    profile_rows: Array2<f64>,
    feature_rows: Array2<f64>,
    labels: Vec<usize>,
}

fn join(a: &ActivityProfileMatrix, f: &FeatureTable, clusters: &[Option<usize>]) -> Joined {
    let row_of = f.row_of();
    let mut cells = Vec::new();
    let mut frows = Vec::new();
    let mut labels = Vec::new();
    for (cell, l) in clusters.iter().enumerate() {
        if let (Some(l), Some(&r), true) = (l, row_of.get(&cell), a.flags[cell].usable()) {
            cells.push(cell);
            frows.push(r);
            labels.push(*l);
        }
    }
    Joined {
        profile_rows: rows_of(&a.values, &cells),
        feature_rows: rows_of(&f.x, &frows),
        labels,
    }
}

fn cmd_cca(cfg: &Config) -> PResult<Staged> {
    let cmd = Command::Cca;
    let a = load_profiles(cfg)?;
    let f = load_features(cfg)?;
    let clusters = load_clusters(cfg)?;
    let j = join(&a, &f, &clusters);
    let x = j.profile_rows.view();
    let y = j.feature_rows.view();
    let global = stats::cca(x, y, cfg.cca_ridge).map_err(stage(cmd))?;
    let mut rows = stats::cca_rows("all", &global);
    rows.push(StatRow::new("cca_n", "all", global.n as f64, None));
    for (c, res) in stats::cca_by_cluster(x, y, &j.labels, cfg.cca_ridge).map_err(stage(cmd))? {
        let scope = format!("S{}", c + 1);
        rows.extend(stats::cca_rows(&scope, &res));
        rows.push(StatRow::new("cca_n", scope, res.n as f64, None));
    }
    match stats::distance_correlation(x, y, &j.labels) {
        Ok(r) => rows.push(StatRow::new("distance_correlation", "all", r, None)),
        Err(e) if !e.is_numeric() => log::warn!("cca: distance correlation skipped: {e}"),
        Err(e) => return Err(stage(cmd)(e)),
    }
    let mut st = Staged::default();
    st.add_with(cmd, CCA, |b| stats::write_stats_csv(&rows, b))?;
    Ok(st)
}

/// Labels the classifiers predict for each feature row with a label.
fn class_labels(cfg: &Config, f: &FeatureTable) -> PResult<(Vec<usize>, Vec<usize>, Vec<String>)> {
    let per_cell: Vec<Option<usize>>;
    let names: Vec<String>;
    match cfg.target {
        ClassTarget::Clusters => {
            per_cell = load_clusters(cfg)?;
            let k = per_cell.iter().flatten().max().map_or(0, |m| m + 1);
            names = cluster_names(k);
        }
        ClassTarget::Truth => {
            let p = input_path(cfg, &cfg.input.truth, "truth.csv")?;
            let t =
                synth::read_truth_csv(open_input(&p)?, cfg.grid.n_cells()).map_err(file_err(&p))?;
            let archetypes = synth::default_archetypes();
            let k = t.iter().max().map_or(0, |m| m + 1);
            names = (0..k)
                .map(|a| {
                    archetypes
                        .get(a)
                        .map_or(format!("A{a}"), |x| x.name.clone())
                })
                .collect();
            per_cell = t.into_iter().map(Some).collect();
        }
    }
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (r, &cell) in f.cells.iter().enumerate() {
        if let Some(l) = per_cell[cell] {
            rows.push(r);
            y.push(l);
        }
    }
    let (y, names) = compact_labels(&y, &names);
    Ok((rows, y, names))
}

fn cmd_classify(cfg: &Config) -> PResult<Staged> {
    let cmd = Command::Classify;
    let f = load_features(cfg)?;
    let (rows, y, names) = class_labels(cfg, &f)?;
    if names.len() < 2 {
        return Err(stage(cmd)(Error::input(
            "need at least two classes to classify",
        )));
    }
    let data = Dataset::new(rows_of(&f.x, &rows), y, names.clone()).map_err(stage(cmd))?;
    let mut st = Staged::default();
    let mut reports: Vec<(ModelKind, String, EvalReport)> = Vec::new();
    for &kind in &cfg.models {
        let spec = cfg.model_spec(kind);
        let cv = classify::cross_validate(&data, &spec, cfg.folds, cfg.seed).map_err(stage(cmd))?;
        let r = classify::evaluate_cv(&data, &cv).map_err(stage(cmd))?;
        st.add_with(cmd, &format!("eval_{}.csv", kind.key()), |b| {
            classify::write_eval_csv(&r, &names, b)
        })?;
        st.add_with(cmd, &format!("roc_{}.csv", kind.key()), |b| {
            classify::write_roc_csv(&r, &names, b)
        })?;
        reports.push((kind, spec.name(), r));
    }
    let baseline = classify::baseline_random(&data, cfg.seed).map_err(stage(cmd))?;
    let mut summary =
        String::from("model,accuracy,cv_error,macro_precision,macro_recall,macro_f,n,classes\n");
    let all_rows = reports
        .iter()
        .map(|(k, _, r)| (k.key(), r))
        .chain(std::iter::once(("random_baseline", &baseline)));
    for (key, r) in all_rows {
        let (p, rc, fm) = r.macro_averages();
        let o = |v: Option<f64>| v.map_or("NA".to_string(), |v| v.to_string());
        let _ = writeln!(
            summary,
            "{key},{},{},{},{},{},{},{}",
            r.overall_acc,
            o(r.cv_error),
            o(p),
            o(rc),
            o(fm),
            r.n,
            names.len()
        );
    }
    st.add(CLASSIFY_SUMMARY, summary.into_bytes());

    let mut table_rows: Vec<(String, &EvalReport)> =
        reports.iter().map(|(_, n, r)| (n.clone(), r)).collect();
    table_rows.push(("Random baseline".into(), &baseline));
    let mut text = String::from("Predictive models, 10-fold CV over timeline features\n");
    if cfg.folds != 10 {
        text = format!(
            "Predictive models, {}-fold CV over timeline features\n",
            cfg.folds
        );
    }
    text.push_str(&classify::format_model_table(&table_rows));
    let _ = writeln!(
        text,
        "Uniform random guessing over {} classes: {:.2}%",
        names.len(),
        100.0 / names.len() as f64
    );
    let (_, primary_name, primary) = &reports[0];
    let _ = writeln!(
        text,
        "\nConfusion matrix and per-class metrics, {primary_name}"
    );
    text.push_str(&classify::format_confusion_table(primary, &names));
    st.add(CLASSIFY_TABLES, text.into_bytes());
    Ok(st)
}

/// Counts and row fractions of land-use classes against cluster labels.
pub fn landuse_crosstab(
    landuse: &[String],
    clusters: &[Option<usize>],
) -> Vec<(String, usize, usize, f64)> {
    let k = clusters.iter().flatten().max().map_or(0, |m| m + 1);
    let mut counts: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (lu, c) in landuse.iter().zip(clusters) {
        if let Some(c) = c {
            counts.entry(lu.as_str()).or_insert_with(|| vec![0; k])[*c] += 1;
        }
    }
    let mut rows = Vec::new();
    for (lu, row) in counts {
        let total: usize = row.iter().sum();
        for (c, &n) in row.iter().enumerate() {
            rows.push((lu.to_string(), c, n, n as f64 / total as f64));
        }
    }
    rows
}

/// Cross-validated accuracy of one model for features `x` and labels `y`.
pub fn cv_accuracy(
    cfg: &Config,
    kind: ModelKind,
    x: Array2<f64>,
    y: &[usize],
    names: &[String],
) -> crate::Result<(f64, f64)> {
    let (y, names) = compact_labels(y, names);
    let data = Dataset::new(x, y, names)?;
    let cv = classify::cross_validate(&data, &cfg.model_spec(kind), cfg.folds, cfg.seed)?;
    let r = classify::evaluate_cv(&data, &cv)?;
    Ok((r.overall_acc, cv.cv_error))
}

fn cmd_landuse(cfg: &Config) -> PResult<Staged> {
    let cmd = Command::LanduseCompare;
    let clusters = load_clusters(cfg)?;
    let f = load_features(cfg)?;
    let p = input_path(cfg, &cfg.input.landuse, "landuse.geojson")?;
    let text = fs::read_to_string(&p).map_err(io_err(&p))?;
    let gj: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| file_err(&p)(Error::Json(e)))?;
    let landuse = classify::landuse_labels(&cfg.grid, &gj).map_err(file_err(&p))?;

    let mut st = Staged::default();
    let mut lt = String::from("cell_id,landuse\n");
    for (i, l) in landuse.iter().enumerate() {
        let _ = writeln!(lt, "{i},{l}");
    }
    st.add(LANDUSE_LABELS, lt.into_bytes());
    let mut ct = String::from("landuse,cluster,count,fraction\n");
    for (lu, c, n, frac) in landuse_crosstab(&landuse, &clusters) {
        let _ = writeln!(ct, "{lu},S{},{n},{frac}", c + 1);
    }
    st.add(LANDUSE_CROSSTAB, ct.into_bytes());

    // Rows with a feature vector and a cluster label.
    let mut rows = Vec::new();
    let mut yc = Vec::new();
    let mut yl_names: Vec<String> = Vec::new();
    let mut yl = Vec::new();
    for (r, &cell) in f.cells.iter().enumerate() {
        if let Some(c) = clusters[cell] {
            rows.push(r);
            yc.push(c);
            let name = &landuse[cell];
            let id = yl_names.iter().position(|n| n == name).unwrap_or_else(|| {
                yl_names.push(name.clone());
                yl_names.len() - 1
            });
            yl.push(id);
        }
    }
    // Stable class ids: sort land-use names.
    let mut sorted = yl_names.clone();
    sorted.sort();
    let yl: Vec<usize> = yl
        .iter()
        .map(|&i| {
            sorted
                .iter()
                .position(|n| *n == yl_names[i])
                .expect("present")
        })
        .collect();
    let lu_names = sorted;
    let k = yc.iter().max().map_or(0, |m| m + 1);
    let c_names = cluster_names(k);
    let x = rows_of(&f.x, &rows);
    let kind = cfg.models[0];
    let mut out = String::from("direction,features,target,model,accuracy,cv_error,n,classes\n");
    let mut record =
        |dir: &str, feat: &str, target: &str, y: &[usize], names: &[String], x: Array2<f64>| {
            let classes = y.iter().collect::<BTreeSet<_>>().len();
            let (acc, err) = cv_accuracy(cfg, kind, x, y, names).map_err(stage(cmd))?;
            let _ = writeln!(
                out,
                "{dir},{feat},{target},{},{acc},{err},{},{classes}",
                kind.key(),
                y.len()
            );
            Ok::<(), PipelineError>(())
        };
    let dirs = cfg.landuse_direction;
    if matches!(
        dirs,
        LanduseDirection::TimelineToLabels | LanduseDirection::Both
    ) {
        record(
            "timeline_to_labels",
            "timeline",
            "area_type",
            &yc,
            &c_names,
            x.clone(),
        )?;
        if lu_names.len() >= 2 {
            record(
                "timeline_to_labels",
                "timeline",
                "landuse",
                &yl,
                &lu_names,
                x.clone(),
            )?;
        } else {
            log::warn!("landuse-compare: a single land-use class; nothing to predict");
        }
    }
    if matches!(
        dirs,
        LanduseDirection::LabelsToTimeline | LanduseDirection::Both
    ) {
        let km = spectral::kmeans(
            x.view(),
            k.max(2).min(x.nrows()),
            cfg.seed,
            cfg.kmeans_restarts,
        )
        .map_err(stage(cmd))?;
        let t_names = cluster_names(k.max(2))
            .into_iter()
            .map(|s| s.replace('S', "T"))
            .collect::<Vec<_>>();
        record(
            "labels_to_timeline",
            "area_type",
            "timeline_type",
            &km.labels,
            &t_names,
            one_hot_features(&yc, k),
        )?;
        record(
            "labels_to_timeline",
            "landuse",
            "timeline_type",
            &km.labels,
            &t_names,
            one_hot_features(&yl, lu_names.len()),
        )?;
    }
    st.add(LANDUSE_COMPARE, out.into_bytes());
    Ok(st)
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

fn cmd_report(cfg: &Config) -> PResult<Staged> {
    let tables = read_artifact_text(cfg, CLASSIFY_TABLES, Command::Classify)?;
    let summary = read_artifact_text(cfg, CLASSIFY_SUMMARY, Command::Classify)?;
    let mut s = String::new();
    let _ = writeln!(s, "Area typing report");
    let _ = writeln!(s, "config_hash {}", cfg.hash());
    let _ = writeln!(s, "seed {}", cfg.seed);
    let _ = writeln!(
        s,
        "grid {} x {} cells of {} m x {} m",
        cfg.grid.n_rows, cfg.grid.n_cols, cfg.grid.cell_width_m, cfg.grid.cell_height_m
    );
    if let Some(sp) = optional_artifact_text(cfg, SPECTRUM) {
        let _ = writeln!(s, "eigenvalues computed {}", csv_rows(&sp).len());
    }
    s.push('\n');
    s.push_str(&tables);

    let rows = csv_rows(&summary);
    let baseline = rows.iter().find(|r| r[0] == "random_baseline");
    let classes: usize = rows
        .first()
        .and_then(|r| r.get(7))
        .and_then(|v| v.parse().ok())
        .unwrap_or(0);
    if classes > 0 {
        let chance = 1.0 / classes as f64;
        let _ = writeln!(
            s,
            "\nAccuracy against the 1/k baseline ({:.2}%)",
            100.0 * chance
        );
        for r in rows.iter().filter(|r| r[0] != "random_baseline") {
            let acc: f64 = r[1].parse().unwrap_or(f64::NAN);
            let verdict = if acc > chance { "above" } else { "not above" };
            let _ = writeln!(
                s,
                "  {:<16} {:>7.2}%  {verdict} baseline ({:.2}x)",
                r[0],
                100.0 * acc,
                acc / chance
            );
        }
        if let Some(b) = baseline {
            let acc: f64 = b[1].parse().unwrap_or(f64::NAN);
            let _ = writeln!(s, "  {:<16} {:>7.2}%", "random draw", 100.0 * acc);
        }
    }

    if let Some(h) = optional_artifact_text(cfg, HOPKINS) {
        let _ = writeln!(
            s,
            "\nClustering tendency (Hopkins; near 0 = clustered, near 0.5 = uniform)"
        );
        for r in csv_rows(&h).iter().filter(|r| r[0] == "hopkins") {
            let _ = writeln!(
                s,
                "  {:<10} {:.4}",
                r[1],
                r[2].parse::<f64>().unwrap_or(f64::NAN)
            );
        }
    }
    if let Some(c) = optional_artifact_text(cfg, CCA) {
        let rows = csv_rows(&c);
        let _ = writeln!(s, "\nProfile / timeline association");
        for r in rows.iter().filter(|r| r[0] == "distance_correlation") {
            let _ = writeln!(
                s,
                "  distance correlation r = {:.4}",
                r[2].parse::<f64>().unwrap_or(f64::NAN)
            );
        }
        let mut scopes: Vec<&str> = Vec::new();
        for r in &rows {
            if r[0] == "cca_rho_1" && !scopes.contains(&r[1].as_str()) {
                scopes.push(&r[1]);
            }
        }
        for scope in scopes {
            let rho: Vec<String> = rows
                .iter()
                .filter(|r| r[1] == scope && r[0].starts_with("cca_rho_"))
                .map(|r| format!("{:.3}", r[2].parse::<f64>().unwrap_or(f64::NAN)))
                .collect();
            let _ = writeln!(s, "  CCA {scope:<4} rho = {}", rho.join(" "));
        }
    }
    if let Some(ct) = optional_artifact_text(cfg, LANDUSE_CROSSTAB) {
        let _ = writeln!(s, "\nLand-use classes against area types (largest share)");
        let mut best: BTreeMap<String, (f64, String)> = BTreeMap::new();
        for r in csv_rows(&ct) {
            let frac: f64 = r[3].parse().unwrap_or(0.0);
            let e = best.entry(r[0].clone()).or_insert((-1.0, String::new()));
            if frac > e.0 {
                *e = (frac, r[1].clone());
            }
        }
        for (lu, (frac, c)) in best {
            let _ = writeln!(s, "  {:.1}% of {lu} cells fall in {c}", 100.0 * frac);
        }
    }
    if let Some(lc) = optional_artifact_text(cfg, LANDUSE_COMPARE) {
        let _ = writeln!(s, "\nLand-use comparison ({})", cfg.models[0].key());
        for r in csv_rows(&lc) {
            let acc: f64 = r[4].parse().unwrap_or(f64::NAN);
            let _ = writeln!(
                s,
                "  {} -> {:<14} {:>7.2}%  ({} classes)",
                r[1],
                r[2],
                100.0 * acc,
                r[7]
            );
        }
    }
    let mut st = Staged::default();
    st.add(REPORT, s.into_bytes());
    Ok(st)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> Config {
        let mut c = Config::parse(
            "grid.rows = 8\ngrid.cols = 8\nsynth.patches = 8\nprofiles.h = 20\nclassify.rf_trees = 10\n\
             classify.folds = 3\nclassify.models = random_forest,knn\nlanduse.direction = both\n",
        )
        .unwrap();
        c.out_dir = dir.to_path_buf();
        c
    }

    #[test]
    fn command_names_roundtrip() {
        for c in Command::ALL {
            assert_eq!(c.name().parse::<Command>().unwrap(), c);
        }
        assert!("bogus".parse::<Command>().is_err());
    }

    #[test]
    fn missing_prerequisite_names_the_command() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let e = run(Command::Cluster, &cfg).unwrap_err();
        assert!(
            matches!(
                e,
                PipelineError::Prerequisite {
                    command: "profiles",
                    ..
                }
            ),
            "{e}"
        );
        assert_eq!(e.exit_code(), 3);
        assert!(!dir.path().join(CLUSTERS).exists());
        let e = run(Command::IngestPoi, &cfg).unwrap_err();
        assert!(e.to_string().contains("`synth`"), "{e}");
    }

    #[test]
    fn full_chain_on_tiny_city() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        run(Command::Synth, &cfg).unwrap();
        run_chain(&cfg).unwrap();
        let report = fs::read_to_string(dir.path().join(REPORT)).unwrap();
        assert!(report.contains("Random baseline"), "{report}");
        let manifest = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        assert!(manifest.starts_with("command,config_hash,seed,artifact,sha256\n"));
        for c in Command::ALL {
            assert!(
                manifest
                    .lines()
                    .any(|l| l.starts_with(&format!("{},", c.name()))),
                "{c}"
            );
        }
        // No temp files left over.
        assert!(fs::read_dir(dir.path()).unwrap().all(|e| !e
            .unwrap()
            .file_name()
            .to_string_lossy()
            .ends_with(".partial")));
    }

    #[test]
    fn compact_and_one_hot() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let (y, n) = compact_labels(&[2, 0, 2], &names);
        assert_eq!(y, vec![1, 0, 1]);
        assert_eq!(n, vec!["a".to_string(), "c".to_string()]);
        let x = one_hot_features(&[1, 0], 3);
        assert_eq!(x.row(0).to_vec(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn crosstab_fractions_sum_to_one_per_landuse() {
        let lu: Vec<String> = ["r", "r", "c", "c", "c"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let cl = vec![Some(0), Some(1), Some(1), Some(1), None];
        let t = landuse_crosstab(&lu, &cl);
        assert_eq!(t.len(), 4);
        assert_eq!(t[0], ("c".to_string(), 0, 0, 0.0));
        assert_eq!(t[1], ("c".to_string(), 1, 2, 1.0));
        assert_eq!(t[2].3 + t[3].3, 1.0);
    }
}
