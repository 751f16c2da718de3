//! Pipeline configuration: a flat `key = value` text file.
//!
//! Grammar: one assignment per line, `#` starts a comment, blank lines are
//! ignored, keys are case-sensitive and may appear at most once. Unknown keys
//! are rejected so typos fail loudly. `none` clears an optional value.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::classify::{ForestParams, ModelSpec, TreeParams};
use crate::grid::GridSpec;
use crate::profiles::IdfCorpus;
use crate::spectral::{SpectralParams, Symmetrize};
use crate::stats::Ridge;
use crate::synth::CityScenario;
use crate::timeline::{FeatureMode, YearMonth};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    /// 1-based line of the offending entry, when it came from a file.
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "config line {l}: {}", self.message),
            None => write!(f, "config: {}", self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn cfg_err(message: impl Into<String>) -> ConfigError {
    ConfigError {
        line: None,
        message: message.into(),
    }
}

/// Labels the classifiers are trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassTarget {
    /// Area types from `cluster`.
    Clusters,
    /// Planted archetypes of a synthetic city.
    Truth,
}

/// Which way `landuse-compare` runs the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LanduseDirection {
    /// Timeline features predict area types, and separately land-use labels.
    TimelineToLabels,
    /// One-hot area types, and separately land-use labels, predict timeline
    /// types.
    LabelsToTimeline,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    RandomForest,
    Knn,
    DecisionTree,
    Majority,
}

impl ModelKind {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "random_forest" => ModelKind::RandomForest,
            "knn" => ModelKind::Knn,
            "decision_tree" => ModelKind::DecisionTree,
            "majority" => ModelKind::Majority,
            _ => return None,
        })
    }

    pub fn key(self) -> &'static str {
        match self {
            ModelKind::RandomForest => "random_forest",
            ModelKind::Knn => "knn",
            ModelKind::DecisionTree => "decision_tree",
            ModelKind::Majority => "majority",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InputPaths {
    pub osm: Option<PathBuf>,
    pub poi_csv: Option<PathBuf>,
    pub cdr: Option<PathBuf>,
    pub mapping: Option<PathBuf>,
    pub landuse: Option<PathBuf>,
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub grid: GridSpec,
    pub input: InputPaths,
    pub h: u64,
    pub radius_step_m: f64,
    pub radius_cap_m: f64,
    pub idf_corpus: IdfCorpus,
    pub k_nn: usize,
    pub k_override: Option<usize>,
    pub k_max: usize,
    pub kmeans_restarts: usize,
    pub row_normalize: bool,
    pub symmetrize: Symmetrize,
    pub month: YearMonth,
    pub utc_offset_min: i32,
    pub features: FeatureMode,
    /// Sample size for Hopkins; `None` means a tenth of the points.
    pub hopkins_m: Option<usize>,
    pub cca_ridge: Ridge,
    pub models: Vec<ModelKind>,
    pub knn_k: usize,
    pub rf_trees: usize,
    pub rf_mtry: Option<usize>,
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub folds: usize,
    pub target: ClassTarget,
    pub landuse_direction: LanduseDirection,
    pub synth_patches: usize,
    pub synth_poi_mean: f64,
    pub synth_poi_noise: f64,
    pub synth_volume_sigma: f64,
    pub synth_timeline_noise: f64,
    pub synth_base_volume: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        let sp = SpectralParams::default();
        let fp = ForestParams::default();
        let sc = CityScenario::new(GridSpec::default(), 0);
        Config {
            grid: GridSpec::default(),
            input: InputPaths::default(),
            h: 50,
            radius_step_m: 235.0,
            radius_cap_m: 2350.0,
            idf_corpus: IdfCorpus::Occupied,
            k_nn: sp.k_nn,
            k_override: sp.k_override,
            k_max: sp.k_max,
            kmeans_restarts: sp.restarts,
            row_normalize: sp.row_normalize,
            symmetrize: sp.symmetrize,
            month: sc.month,
            utc_offset_min: sc.utc_offset_min,
            features: FeatureMode::MeanDay,
            hopkins_m: None,
            cca_ridge: Ridge::Auto,
            models: vec![ModelKind::RandomForest, ModelKind::Knn],
            knn_k: 5,
            rf_trees: fp.n_trees,
            rf_mtry: fp.mtry,
            max_depth: fp.tree.max_depth,
            min_leaf: fp.tree.min_leaf,
            folds: 10,
            target: ClassTarget::Clusters,
            landuse_direction: LanduseDirection::TimelineToLabels,
            synth_patches: sc.n_patches,
            synth_poi_mean: sc.poi_mean,
            synth_poi_noise: sc.poi_noise,
            synth_volume_sigma: sc.volume_sigma,
            synth_timeline_noise: sc.timeline_noise,
            synth_base_volume: sc.base_volume,
            seed: sp.seed,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Recognized model names without an implementation. Named here so a config
/// that asks for them gets a clearer error than an unknown name would.
const UNIMPLEMENTED_MODELS: [&str; 4] = ["lda", "qda", "naive_bayes", "svm"];

fn num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse()
        .map_err(|_| format!("`{v}` is not a valid number"))
}

fn opt_num<T: FromStr>(v: &str) -> Result<Option<T>, String> {
    if v == "none" || v == "auto" {
        Ok(None)
    } else {
        num(v).map(Some)
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean")),
    }
}

fn show_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("none".into(), T::to_string)
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map_or("none".into(), |p| p.display().to_string())
}

/// Every key the parser accepts, in canonical order.
pub const KEYS: &[&str] = &[
    "classify.folds",
    "classify.knn_k",
    "classify.max_depth",
    "classify.min_leaf",
    "classify.models",
    "classify.rf_mtry",
    "classify.rf_trees",
    "classify.target",
    "cluster.k_max",
    "cluster.k_nn",
    "cluster.k_override",
    "cluster.restarts",
    "cluster.row_normalize",
    "cluster.symmetrize",
    "grid.cell_height_m",
    "grid.cell_width_m",
    "grid.cols",
    "grid.origin_lat",
    "grid.origin_lon",
    "grid.rows",
    "input.cdr",
    "input.landuse",
    "input.mapping",
    "input.osm",
    "input.poi_csv",
    "input.truth",
    "landuse.direction",
    "output.dir",
    "profiles.h",
    "profiles.idf_corpus",
    "profiles.radius_cap_m",
    "profiles.radius_step_m",
    "seed",
    "stats.cca_ridge",
    "stats.hopkins_m",
    "synth.base_volume",
    "synth.patches",
    "synth.poi_mean",
    "synth.poi_noise",
    "synth.timeline_noise",
    "synth.volume_sigma",
    "timeline.features",
    "timeline.month",
    "timeline.utc_offset_min",
];

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |message: String| ConfigError {
                line: Some(i + 1),
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, found `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(at(format!("key `{k}` given twice")));
            }
            cfg.set(k, v).map_err(at)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        Config::parse(&text)
    }

    /// Assigns one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "grid.origin_lon" => self.grid.origin_lon = num(v)?,
            "grid.origin_lat" => self.grid.origin_lat = num(v)?,
            "grid.cell_width_m" => self.grid.cell_width_m = num(v)?,
            "grid.cell_height_m" => self.grid.cell_height_m = num(v)?,
            "grid.cols" => self.grid.n_cols = num(v)?,
            "grid.rows" => self.grid.n_rows = num(v)?,
            "input.osm" => self.input.osm = path(v),
            "input.poi_csv" => self.input.poi_csv = path(v),
            "input.cdr" => self.input.cdr = path(v),
            "input.mapping" => self.input.mapping = path(v),
            "input.landuse" => self.input.landuse = path(v),
            "input.truth" => self.input.truth = path(v),
            "profiles.h" => self.h = num(v)?,
            "profiles.radius_step_m" => self.radius_step_m = num(v)?,
            "profiles.radius_cap_m" => self.radius_cap_m = num(v)?,
            "profiles.idf_corpus" => self.idf_corpus = v.parse()?,
            "cluster.k_nn" => self.k_nn = num(v)?,
            "cluster.k_override" => self.k_override = opt_num(v)?,
            "cluster.k_max" => self.k_max = num(v)?,
            "cluster.restarts" => self.kmeans_restarts = num(v)?,
            "cluster.row_normalize" => self.row_normalize = boolean(v)?,
            "cluster.symmetrize" => self.symmetrize = v.parse()?,
            "timeline.month" => {
                let (y, m) = v
                    .split_once('-')
                    .ok_or_else(|| format!("month must look like 2013-11, got `{v}`"))?;
                self.month = YearMonth::new(num(y)?, num(m)?).map_err(|e| e.to_string())?;
            }
            "timeline.utc_offset_min" => self.utc_offset_min = num(v)?,
            "timeline.features" => self.features = v.parse()?,
            "stats.hopkins_m" => self.hopkins_m = opt_num(v)?,
            "stats.cca_ridge" => {
                self.cca_ridge = match opt_num::<f64>(v)? {
                    None => Ridge::Auto,
                    Some(r) => Ridge::Fixed(r),
                }
            }
            "classify.models" => {
                self.models = v
                    .split(',')
                    .map(|m| {
                        let m = m.trim();
                        ModelKind::parse(m).ok_or_else(|| {
                            if UNIMPLEMENTED_MODELS.contains(&m) {
                                format!("model `{m}` is not implemented; use random_forest, knn, decision_tree or majority")
                            } else {
                                format!("unknown model `{m}`; expected random_forest, knn, decision_tree or majority")
                            }
                        })
                    })
                    .collect::<Result<_, _>>()?
            }
            "classify.knn_k" => self.knn_k = num(v)?,
            "classify.rf_trees" => self.rf_trees = num(v)?,
            "classify.rf_mtry" => self.rf_mtry = opt_num(v)?,
            "classify.max_depth" => self.max_depth = opt_num(v)?,
            "classify.min_leaf" => self.min_leaf = num(v)?,
            "classify.folds" => self.folds = num(v)?,
            "classify.target" => {
                self.target = match v {
                    "clusters" => ClassTarget::Clusters,
                    "truth" => ClassTarget::Truth,
                    _ => return Err(format!("target must be `clusters` or `truth`, got `{v}`")),
                }
            }
            "landuse.direction" => {
                self.landuse_direction = match v {
                    "timeline_to_labels" => LanduseDirection::TimelineToLabels,
                    "labels_to_timeline" => LanduseDirection::LabelsToTimeline,
                    "both" => LanduseDirection::Both,
                    _ => {
                        return Err(format!(
                            "direction must be timeline_to_labels, labels_to_timeline or both, got `{v}`"
                        ))
                    }
                }
            }
            "synth.patches" => self.synth_patches = num(v)?,
            "synth.poi_mean" => self.synth_poi_mean = num(v)?,
            "synth.poi_noise" => self.synth_poi_noise = num(v)?,
            "synth.volume_sigma" => self.synth_volume_sigma = num(v)?,
            "synth.timeline_noise" => self.synth_timeline_noise = num(v)?,
            "synth.base_volume" => self.synth_base_volume = num(v)?,
            "seed" => self.seed = num(v)?,
            "output.dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let g = &self.grid;
        match key {
            "grid.origin_lon" => g.origin_lon.to_string(),
            "grid.origin_lat" => g.origin_lat.to_string(),
            "grid.cell_width_m" => g.cell_width_m.to_string(),
            "grid.cell_height_m" => g.cell_height_m.to_string(),
            "grid.cols" => g.n_cols.to_string(),
            "grid.rows" => g.n_rows.to_string(),
            "input.osm" => show_path(&self.input.osm),
            "input.poi_csv" => show_path(&self.input.poi_csv),
            "input.cdr" => show_path(&self.input.cdr),
            "input.mapping" => show_path(&self.input.mapping),
            "input.landuse" => show_path(&self.input.landuse),
            "input.truth" => show_path(&self.input.truth),
            "profiles.h" => self.h.to_string(),
            "profiles.radius_step_m" => self.radius_step_m.to_string(),
            "profiles.radius_cap_m" => self.radius_cap_m.to_string(),
            "profiles.idf_corpus" => match self.idf_corpus {
                IdfCorpus::Occupied => "occupied".into(),
                IdfCorpus::All => "all".into(),
            },
            "cluster.k_nn" => self.k_nn.to_string(),
            "cluster.k_override" => show_opt(&self.k_override),
            "cluster.k_max" => self.k_max.to_string(),
            "cluster.restarts" => self.kmeans_restarts.to_string(),
            "cluster.row_normalize" => self.row_normalize.to_string(),
            "cluster.symmetrize" => self.symmetrize.to_string(),
            "timeline.month" => format!("{}-{:02}", self.month.year, self.month.month),
            "timeline.utc_offset_min" => self.utc_offset_min.to_string(),
            "timeline.features" => match self.features {
                FeatureMode::MeanDay => "mean_day".into(),
                FeatureMode::WeekdayWeekend => "weekday_weekend".into(),
            },
            "stats.hopkins_m" => show_opt(&self.hopkins_m),
            "stats.cca_ridge" => match self.cca_ridge {
                Ridge::Auto => "auto".into(),
                Ridge::Fixed(r) => r.to_string(),
            },
            "classify.models" => self
                .models
                .iter()
                .map(|m| m.key())
                .collect::<Vec<_>>()
                .join(","),
            "classify.knn_k" => self.knn_k.to_string(),
            "classify.rf_trees" => self.rf_trees.to_string(),
            "classify.rf_mtry" => show_opt(&self.rf_mtry),
            "classify.max_depth" => show_opt(&self.max_depth),
            "classify.min_leaf" => self.min_leaf.to_string(),
            "classify.folds" => self.folds.to_string(),
            "classify.target" => match self.target {
                ClassTarget::Clusters => "clusters".into(),
                ClassTarget::Truth => "truth".into(),
            },
            "landuse.direction" => match self.landuse_direction {
                LanduseDirection::TimelineToLabels => "timeline_to_labels".into(),
                LanduseDirection::LabelsToTimeline => "labels_to_timeline".into(),
                LanduseDirection::Both => "both".into(),
            },
            "synth.patches" => self.synth_patches.to_string(),
            "synth.poi_mean" => self.synth_poi_mean.to_string(),
            "synth.poi_noise" => self.synth_poi_noise.to_string(),
            "synth.volume_sigma" => self.synth_volume_sigma.to_string(),
            "synth.timeline_noise" => self.synth_timeline_noise.to_string(),
            "synth.base_volume" => self.synth_base_volume.to_string(),
            "seed" => self.seed.to_string(),
            "output.dir" => self.out_dir.display().to_string(),
            _ => unreachable!("key list and getter out of sync: {key}"),
        }
    }

    /// Fully resolved config, one sorted `key = value` line per key. Parsing
    /// this text gives back an equal config.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    /// sha256 of the canonical text minus `output.dir`, so the same run
    /// written to two places hashes the same.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for line in self
            .canonical()
            .lines()
            .filter(|l| !l.starts_with("output.dir "))
        {
            h.update(line.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.grid.validate().map_err(|e| cfg_err(e.to_string()))?;
        let checks: [(bool, &str); 14] = [
            (self.h >= 1, "profiles.h must be at least 1"),
            (
                self.radius_step_m > 0.0 && self.radius_step_m.is_finite(),
                "profiles.radius_step_m must be positive",
            ),
            (
                self.radius_cap_m >= 0.0 && self.radius_cap_m.is_finite(),
                "profiles.radius_cap_m must be non-negative",
            ),
            (self.k_nn >= 1, "cluster.k_nn must be at least 1"),
            (self.k_max >= 2, "cluster.k_max must be at least 2"),
            (
                self.k_override.is_none_or(|k| k >= 2),
                "cluster.k_override must be at least 2",
            ),
            (
                self.kmeans_restarts >= 1,
                "cluster.restarts must be at least 1",
            ),
            (
                (-720..=840).contains(&self.utc_offset_min),
                "timeline.utc_offset_min out of range",
            ),
            (
                self.hopkins_m.is_none_or(|m| m >= 1),
                "stats.hopkins_m must be at least 1",
            ),
            (
                match self.cca_ridge {
                    Ridge::Fixed(r) => r >= 0.0 && r.is_finite(),
                    Ridge::Auto => true,
                },
                "stats.cca_ridge must be non-negative",
            ),
            (
                !self.models.is_empty(),
                "classify.models must name at least one model",
            ),
            (
                self.knn_k >= 1 && self.rf_trees >= 1,
                "classify.knn_k and rf_trees must be positive",
            ),
            (
                self.min_leaf >= 1 && self.rf_mtry.is_none_or(|m| m >= 1),
                "classify.min_leaf and rf_mtry must be positive",
            ),
            (self.folds >= 2, "classify.folds must be at least 2"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(cfg_err(msg));
            }
        }
        Ok(())
    }

    pub fn spectral_params(&self) -> SpectralParams {
        SpectralParams {
            k_nn: self.k_nn,
            k_override: self.k_override,
            k_max: self.k_max,
            seed: self.seed,
            restarts: self.kmeans_restarts,
            row_normalize: self.row_normalize,
            symmetrize: self.symmetrize,
        }
    }

    pub fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_depth: self.max_depth,
            min_leaf: self.min_leaf,
        }
    }

    pub fn model_spec(&self, kind: ModelKind) -> ModelSpec {
        match kind {
            ModelKind::RandomForest => ModelSpec::RandomForest(ForestParams {
                n_trees: self.rf_trees,
                tree: self.tree_params(),
                mtry: self.rf_mtry,
                bootstrap: true,
            }),
            ModelKind::Knn => ModelSpec::Knn { k: self.knn_k },
            ModelKind::DecisionTree => ModelSpec::DecisionTree(self.tree_params()),
            ModelKind::Majority => ModelSpec::Majority,
        }
    }

    /// Synthetic city described by the `grid.*`, `timeline.*` and `synth.*`
    /// keys. Checked only when `synth` runs.
    pub fn scenario(&self) -> CityScenario {
        let mut s = CityScenario::new(self.grid, self.seed);
        s.month = self.month;
        s.utc_offset_min = self.utc_offset_min;
        s.n_patches = self.synth_patches;
        s.poi_mean = self.synth_poi_mean;
        s.poi_noise = self.synth_poi_noise;
        s.volume_sigma = self.synth_volume_sigma;
        s.timeline_noise = self.synth_timeline_noise;
        s.base_volume = self.synth_base_volume;
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_canonical_text() {
        let c = Config::default();
        let back = Config::parse(&c.canonical()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn every_key_is_settable() {
        let c = Config::default();
        for k in KEYS {
            let mut d = Config::default();
            d.set(k, &c.get(k)).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let c = Config::parse(
            "# city\n\ngrid.rows = 20  # small\ngrid.cols=20\ncluster.k_override = 6\n",
        )
        .unwrap();
        assert_eq!((c.grid.n_rows, c.grid.n_cols), (20, 20));
        assert_eq!(c.k_override, Some(6));
        assert_ne!(c.hash(), Config::default().hash());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = Config::parse("seed = 1\ngrid.rowz = 3\n").unwrap_err();
        assert_eq!(e.line, Some(2));
        assert!(e.message.contains("grid.rowz"));
        assert_eq!(
            Config::parse("seed = 1\nseed = 2").unwrap_err().line,
            Some(2)
        );
        assert_eq!(Config::parse("seed 1").unwrap_err().line, Some(1));
        assert!(Config::parse("classify.folds = 1").is_err());
        let svm = Config::parse("classify.models = random_forest, svm").unwrap_err();
        assert!(svm.message.contains("not implemented"), "{}", svm.message);
        assert!(Config::parse("classify.models = forest")
            .unwrap_err()
            .message
            .contains("unknown model"));
        assert!(Config::parse("timeline.month = 2013-13").is_err());
    }

    #[test]
    fn output_dir_does_not_change_hash() {
        let a = Config::parse("output.dir = a").unwrap();
        let b = Config::parse("output.dir = b").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
