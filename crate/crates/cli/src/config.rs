//! Run configuration: built-in preset, then the TOML config file, then flags.
//!
//! ```toml
//! preset = "vidstg"
//! workers = 8
//!
//! [tracker]
//! t_match = 100
//! k_match = 7
//! t_thresh = 0.1
//! match_floor = 0.2
//!
//! [aggregation]
//! t_agg = 32
//! mode = "weighted-mean"
//!
//! [eval]
//! geometry = "mask"
//! alphas = [0.25, 0.5, 0.75]
//! capsim = "cider"
//!
//! [generate]
//! endpoint = "https://generativelanguage.googleapis.com/v1beta"
//! adapter = "gemini"
//! model = "gemini-2.0-flash"
//! visual_mode = "boxes"
//! cue = "bbox"
//! max_inflight = 8
//! rate = 5.0
//! ```

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;

#[derive(Debug, Clone, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub preset: Option<String>,
    pub workers: Option<usize>,
    #[serde(default)]
    pub tracker: TrackerSection,
    #[serde(default)]
    pub aggregation: AggregationSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub generate: GenerateSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerSection {
    pub t_match: Option<usize>,
    pub k_match: Option<usize>,
    pub t_thresh: Option<f64>,
    pub match_floor: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationSection {
    pub t_agg: Option<usize>,
    pub mode: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub geometry: Option<String>,
    pub alphas: Option<Vec<f64>>,
    pub capsim: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub endpoint: Option<String>,
    pub adapter: Option<String>,
    pub model: Option<String>,
    pub visual_mode: Option<String>,
    pub cue: Option<String>,
    pub few_shot: Option<usize>,
    pub samples: Option<usize>,
    pub max_inflight: Option<usize>,
    pub rate: Option<f64>,
    pub timeout_secs: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))
            .map_err(Into::into)
    }
}

/// Parses a config-file string value with the same rules as the flag.
pub fn parse_value<T>(key: &str, value: Option<&String>) -> anyhow::Result<Option<T>>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    value
        .map(|v| v.parse::<T>().map_err(|e| ConfigError(format!("config key `{key}`: {e}")).into()))
        .transpose()
}

/// Last `Some` wins.
pub fn layer<T>(values: impl IntoIterator<Item = Option<T>>) -> Option<T> {
    values.into_iter().flatten().last()
}
