use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sltraj::anomaly::Multiplicity;
use sltraj::dataset::Schema;
use sltraj::embed::LiveConfig;
use sltraj::sim::SubsampleMode;
use sltraj::ufpca::Bandwidth;
use sltraj::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub records: Option<PathBuf>,
    /// `jsonl` or `csv`; guessed from the extension when absent.
    pub format: Option<String>,
    pub covariates: Option<PathBuf>,
    pub schema: Schema,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Offline,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    /// `plutchik`, `toxicity` or `custom:<path>`.
    pub spec: String,
    pub backend: BackendKind,
    pub cache_dir: Option<PathBuf>,
    pub max_concurrency: usize,
    pub rate_limit: Option<f64>,
    pub live: LiveConfig,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            spec: "plutchik".into(),
            backend: BackendKind::Offline,
            cache_dir: None,
            max_concurrency: 4,
            rate_limit: None,
            live: LiveConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpcaConfig {
    pub grid_size: usize,
    pub fve: f64,
    pub k_max: usize,
    pub mean_bandwidth: Bandwidth,
    pub cov_bandwidth: Option<f64>,
    pub mfpca_fve: f64,
}

impl Default for FpcaConfig {
    fn default() -> Self {
        Self {
            grid_size: 51,
            fve: 0.95,
            k_max: 10,
            mean_bandwidth: Bandwidth::Auto,
            cov_bandwidth: None,
            mfpca_fve: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmentConfig {
    /// Fixed K; when absent K is chosen from `k_range` by silhouette.
    pub k: Option<usize>,
    pub k_range: Vec<usize>,
    pub trim: f64,
    pub restarts: usize,
    pub max_iter: usize,
    pub bootstrap: usize,
    pub min_cluster_size: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            k: None,
            k_range: vec![2, 3, 4, 5, 6],
            trim: 0.05,
            restarts: 10,
            max_iter: 100,
            bootstrap: 0,
            min_cluster_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    pub alpha1: f64,
    pub alpha: f64,
    pub fve: f64,
    pub multiplicity: Multiplicity,
    pub window_alpha: f64,
    pub windows: usize,
    /// Explicit window boundaries; overrides `windows`.
    pub window_bounds: Option<Vec<f64>>,
}

impl Default for DetectSection {
    fn default() -> Self {
        Self {
            alpha1: 0.1,
            alpha: 0.05,
            fve: 0.95,
            multiplicity: Multiplicity::Bonferroni,
            window_alpha: 0.10,
            windows: 4,
            window_bounds: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProfileMode {
    #[default]
    Lexical,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub mode: ProfileMode,
    pub k: usize,
    pub per_cluster: bool,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self { mode: ProfileMode::Lexical, k: 5, per_cluster: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub replicates: usize,
    pub lambda: f64,
    pub k_min: usize,
    pub k_max: usize,
    pub mode: SubsampleMode,
}

impl Default for SimSection {
    fn default() -> Self {
        Self { replicates: 50, lambda: 10.0, k_min: 5, k_max: 15, mode: SubsampleMode::FittedCurves }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct PlotSection {
    pub svg: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputConfig,
    pub embed: EmbedConfig,
    pub fpca: FpcaConfig,
    pub segment: SegmentConfig,
    pub detect: DetectSection,
    pub profile: ProfileSection,
    pub sim: SimSection,
    pub plot: PlotSection,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: InputConfig::default(),
            embed: EmbedConfig::default(),
            fpca: FpcaConfig::default(),
            segment: SegmentConfig::default(),
            detect: DetectSection::default(),
            profile: ProfileSection::default(),
            sim: SimSection::default(),
            plot: PlotSection::default(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            threads: None,
        }
    }
}

impl RunConfig {
    /// Reads a `.toml` or `.json` file. Relative input paths are resolved
    /// against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: RunConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        };
        if let Some(dir) = path.parent() {
            let fix = |p: &mut Option<PathBuf>| {
                if let Some(x) = p {
                    if x.is_relative() {
                        *x = dir.join(&*x);
                    }
                }
            };
            fix(&mut cfg.input.records);
            fix(&mut cfg.input.covariates);
            fix(&mut cfg.embed.cache_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.detect;
        for (name, v) in [("alpha1", d.alpha1), ("alpha", d.alpha), ("window_alpha", d.window_alpha)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} = {v} not in (0, 1)")));
            }
        }
        if d.alpha1 <= d.alpha {
            return Err(Error::Config(format!("alpha1 ({}) must exceed alpha ({})", d.alpha1, d.alpha)));
        }
        if !(0.0..1.0).contains(&self.segment.trim) {
            return Err(Error::Config(format!("trim = {} not in [0, 1)", self.segment.trim)));
        }
        for (name, v) in [("fpca.fve", self.fpca.fve), ("fpca.mfpca_fve", self.fpca.mfpca_fve), ("detect.fve", d.fve)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} = {v} not in (0, 1]")));
            }
        }
        if d.window_bounds.is_none() && d.windows == 0 {
            return Err(Error::Config("detect.windows must be positive".into()));
        }
        if self.segment.k.is_some_and(|k| k < 1) || (self.segment.k.is_none() && self.segment.k_range.is_empty()) {
            return Err(Error::Config("segment.k must be positive, or k_range nonempty".into()));
        }
        if self.sim.k_min > self.sim.k_max || self.sim.k_min == 0 {
            return Err(Error::Config("sim.k_min must be in 1..=k_max".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
