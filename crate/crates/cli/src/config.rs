//! Declarative experiment configuration: a JSON object with sections
//! `{model, data, discovery, steering, analysis}`. Command-line flags
//! override config values; the merged effective config is embedded in
//! outputs via the manifest digest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use vicd_core::data::Placement;
use vicd_core::{Error, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelGenConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataGenConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discovery: Option<DiscoverySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steering: Option<SteeringSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<serde_json::Value>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!(
                "{}: line {}, column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        vicd_core::graph::digest_bytes(json.as_bytes())
    }
}

/// Which planted or random model to emit.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelGenConfig {
    SingleHead {
        classes: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_patches")]
        patches: usize,
        #[serde(default = "default_heads")]
        heads: usize,
        #[serde(default = "default_gain")]
        gain: f64,
        out: PathBuf,
    },
    MultiHead {
        classes: usize,
        #[serde(default = "default_dim")]
        dim: usize,
        #[serde(default = "default_patches")]
        patches: usize,
        #[serde(default = "default_heads")]
        heads: usize,
        gains: Vec<f64>,
        out: PathBuf,
    },
    TwoHop {
        classes: usize,
        #[serde(default)]
        stage_gain: Option<f64>,
        out: PathBuf,
    },
    Attack {
        classes: usize,
        target: usize,
        #[serde(default)]
        signal_gain: Option<f64>,
        #[serde(default)]
        attack_gain: Option<f64>,
        out: PathBuf,
    },
    Random {
        layers: usize,
        heads: usize,
        dim: usize,
        patches: usize,
        classes: usize,
        #[serde(default = "default_std")]
        std: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        linear: bool,
        out: PathBuf,
    },
}

fn default_dim() -> usize {
    16
}
fn default_patches() -> usize {
    17
}
fn default_heads() -> usize {
    4
}
fn default_gain() -> f64 {
    2.0
}
fn default_std() -> f64 {
    0.4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataGenConfig {
    #[serde(default = "default_data_kind")]
    pub kind: String,
    pub classes: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_patches")]
    pub patches: usize,
    #[serde(default = "default_pattern_gain")]
    pub pattern_gain: f64,
    #[serde(default = "default_bg_std")]
    pub background_std: f64,
    #[serde(default = "default_fg_fraction")]
    pub foreground_fraction: f64,
    #[serde(default)]
    pub noise_scale: f64,
    #[serde(default)]
    pub seed: u64,
    /// Generate one class only; absent means all classes concatenated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    #[serde(default = "default_n")]
    pub n: usize,
    /// Typographic settings, required when kind = "typographic".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<Placement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    pub out: PathBuf,
}

fn default_data_kind() -> String {
    "class".into()
}
fn default_pattern_gain() -> f64 {
    6.0
}
fn default_bg_std() -> f64 {
    1.0
}
fn default_fg_fraction() -> f64 {
    0.4
}
fn default_n() -> usize {
    vicd_core::data::DEFAULT_PAIRS_PER_CLASS
}

/// Defaults for `discover` flags.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DiscoverySection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_visited: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
}

/// Defaults for `steer` flags.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SteeringSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_grid: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction_pairs: Option<usize>,
}

/// Parse a comma list of floats or a `start:step:end` range (inclusive).
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Argument(format!(
                "bad grid '{s}', expected start:step:end"
            )));
        }
        let start: f64 = parts[0]
            .parse()
            .map_err(|_| Error::Argument(format!("bad grid start '{}'", parts[0])))?;
        let step: f64 = parts[1]
            .parse()
            .map_err(|_| Error::Argument(format!("bad grid step '{}'", parts[1])))?;
        let end: f64 = parts[2]
            .parse()
            .map_err(|_| Error::Argument(format!("bad grid end '{}'", parts[2])))?;
        if !(step > 0.0) || end < start {
            return Err(Error::Argument(format!("bad grid range '{s}'")));
        }
        let mut out = Vec::new();
        let mut k = 0usize;
        loop {
            let v = start + step * k as f64;
            if v > end + 1e-12 {
                break;
            }
            out.push(v);
            k += 1;
        }
        Ok(out)
    } else {
        s.split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Argument(format!("bad grid value '{t}'")))
            })
            .collect()
    }
}

pub fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Argument(format!("bad integer '{t}'")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_range_expansion() {
        let g = parse_grid("0.05:0.05:1.0").unwrap();
        assert_eq!(g.len(), 20);
        assert!((g[0] - 0.05).abs() < 1e-12);
        assert!((g[19] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_comma_list() {
        assert_eq!(parse_grid("0.1,0.5,1").unwrap(), vec![0.1, 0.5, 1.0]);
        assert!(parse_grid("a,b").is_err());
    }

    #[test]
    fn config_reports_line_and_column() {
        let dir = std::env::temp_dir().join(format!("cfg_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.json");
        std::fs::write(&path, "{\n  \"data\": {\n    \"classes\": oops\n").unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 3"), "{msg}");
        std::fs::remove_dir_all(&dir).ok();
    }
}
