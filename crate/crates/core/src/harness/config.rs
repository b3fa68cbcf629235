use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{SplitSpec, SpectrumSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    GenSweep,
    Stability,
    VerifyLemma,
    Bounds,
    ParseCheck,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::GenSweep => "gen-sweep",
            Mode::Stability => "stability",
            Mode::VerifyLemma => "verify-lemma",
            Mode::Bounds => "bounds",
            Mode::ParseCheck => "parse-check",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSource {
    Libsvm {
        path: PathBuf,
        #[serde(default)]
        dim: Option<usize>,
        #[serde(default)]
        split: SplitSpec,
    },
    Synthetic {
        d: usize,
        spectrum: SpectrumSpec,
        #[serde(default)]
        noise_std: f64,
        #[serde(default)]
        seed: u64,
        n_train: usize,
        /// Size of the held-out pool (test set and replacement samples).
        n_test: usize,
        /// Selects an independent draw from the same distribution.
        #[serde(default)]
        stream: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilityOptions {
    /// Number of replaced indices `i`.
    pub replacements: usize,
    pub index_seed: u64,
    /// Replace each `z_i` by itself; the estimate must come out exactly 0.
    pub identical_control: bool,
}

impl Default for StabilityOptions {
    fn default() -> Self {
        StabilityOptions { replacements: 20, index_seed: 0, identical_control: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LemmaOptions {
    pub d: usize,
    pub spectrum: SpectrumSpec,
    pub taus: Vec<usize>,
    /// Step sizes as multiples of `1 / (20 mu (tau + 1))`.
    pub eta_fractions: Vec<f64>,
    /// Horizon `T`; defaults to `10 ceil(t0) + 1000`.
    pub horizon: Option<usize>,
    /// Write one coefficient table per grid point.
    pub dump_tables: bool,
}

impl Default for LemmaOptions {
    fn default() -> Self {
        LemmaOptions {
            d: 16,
            spectrum: SpectrumSpec::Uniform { min: 0.01, max: 1.0 },
            taus: (0..=32).collect(),
            eta_fractions: vec![1.0, 0.5],
            horizon: None,
            dump_tables: false,
        }
    }
}

/// Declared constants that override the measured ones in `bounds` mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BoundOverrides {
    pub n: Option<usize>,
    pub mu: Option<f64>,
    pub lambda: Option<f64>,
    pub r: Option<f64>,
    pub sigma: Option<f64>,
    pub rho: Option<f64>,
    pub w0_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub source: Option<ProblemSource>,
    pub ridge: f64,
    pub delays: Vec<usize>,
    /// Use `RandomBounded { tau_bar: delay }` instead of fixed delays.
    pub random_delays: bool,
    pub delay_seed: u64,
    /// Step size; `None` picks `1 / (20 mu (max_delay + 1))`.
    pub eta: Option<f64>,
    pub iters: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Checkpoint stride; `None` means `iters / 100`.
    pub stride: Option<usize>,
    pub format: Format,
    pub spectral_tol: f64,
    pub spectral_max_iter: usize,
    pub stability: StabilityOptions,
    pub lemma: LemmaOptions,
    pub bounds: BoundOverrides,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::GenSweep,
            source: None,
            ridge: 0.0,
            delays: vec![1],
            random_delays: false,
            delay_seed: 0,
            eta: None,
            iters: 1000,
            batch_size: 1,
            seeds: vec![0],
            stride: None,
            format: Format::Csv,
            spectral_tol: 1e-10,
            spectral_max_iter: 20_000,
            stability: StabilityOptions::default(),
            lemma: LemmaOptions::default(),
            bounds: BoundOverrides::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a TOML config; relative data paths resolve against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_toml_str(&std::fs::read_to_string(path)?)?;
        if let Some(ProblemSource::Libsvm { path: data, .. }) = cfg.source.as_mut() {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut d = self.delays.clone();
        d.sort_unstable();
        d.dedup();
        if d.len() != self.delays.len() {
            return bad(format!("delays must be distinct: {:?}", self.delays));
        }
        if self.mode != Mode::VerifyLemma && self.delays.is_empty() {
            return bad("at least one delay is required".into());
        }
        if let Some(eta) = self.eta {
            if !(eta > 0.0 && eta.is_finite()) {
                return bad(format!("eta must be > 0, got {eta}"));
            }
        }
        if !(self.ridge >= 0.0) {
            return bad(format!("ridge must be >= 0, got {}", self.ridge));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.random_delays && self.delays.contains(&0) {
            return bad("random delay bounds must be >= 1".into());
        }
        Ok(())
    }

    /// Canonical text: compact JSON of the parsed config, so formatting and key
    /// order in the source file do not matter.
    pub fn canonical(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// First 8 bytes of SHA-256 over [`canonical`](Self::canonical), as hex.
    pub fn digest(&self) -> String {
        let h = Sha256::digest(self.canonical().as_bytes());
        h[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn max_delay(&self) -> usize {
        self.delays.iter().copied().max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
mode = "gen-sweep"
delays = [1, 4, 8]
iters = 500
seeds = [0, 1]

[source]
kind = "synthetic"
d = 5
n_train = 40
n_test = 20
noise_std = 0.1
seed = 3
spectrum = { kind = "uniform", min = 0.1, max = 1.0 }
"#;

    #[test]
    fn parses_toml() {
        let cfg = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        assert_eq!(cfg.delays, vec![1, 4, 8]);
        assert!(matches!(cfg.source, Some(ProblemSource::Synthetic { d: 5, .. })));
        assert_eq!(cfg.batch_size, 1);
        cfg.validate().unwrap();
    }

    #[test]
    fn digest_ignores_formatting() {
        let a = ExperimentConfig::from_toml_str(SAMPLE).unwrap();
        let reordered = SAMPLE.replace("iters = 500\n", "").replace("seeds = [0, 1]", "seeds = [0,1]\niters=500");
        let b = ExperimentConfig::from_toml_str(&reordered).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 16);
        let c = ExperimentConfig { iters: 501, ..a.clone() };
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml_str("bogus = 1").is_err());
        let dup = ExperimentConfig { delays: vec![1, 1], ..Default::default() };
        assert!(dup.validate().is_err());
        let none = ExperimentConfig { seeds: vec![], ..Default::default() };
        assert!(none.validate().is_err());
        let eta = ExperimentConfig { eta: Some(0.0), ..Default::default() };
        assert!(eta.validate().is_err());
    }
}
