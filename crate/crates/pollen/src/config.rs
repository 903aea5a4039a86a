//! `key = value` configuration files.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use pollen_core::detect::DetectParams;

use crate::error::{Error, Result};

pub const KEYS: &[&str] = &[
    "detect.k",
    "detect.t_min",
    "detect.t_max",
    "detect.min_area",
    "detect.max_area",
    "detect.min_circularity",
    "embed.backend",
    "embed.weights",
    "embed.endpoint",
    "embed.dim",
    "embed.timeout",
    "calib.preset",
    "report.dir",
    "seed",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Backend {
    Mock,
    Vit,
    External,
}

impl FromStr for Backend {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mock" => Ok(Backend::Mock),
            "vit" => Ok(Backend::Vit),
            "external" => Ok(Backend::External),
            _ => Err(format!("unknown backend {s:?} (mock, vit or external)")),
        }
    }
}

/// Every field is optional; command-line flags win over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CliConfig {
    pub detect_k: Option<f64>,
    pub detect_t_min: Option<f64>,
    pub detect_t_max: Option<f64>,
    pub detect_min_area: Option<f64>,
    pub detect_max_area: Option<f64>,
    pub detect_min_circularity: Option<f64>,
    pub embed_backend: Option<Backend>,
    pub embed_weights: Option<PathBuf>,
    pub embed_endpoint: Option<String>,
    pub embed_dim: Option<usize>,
    pub embed_timeout: Option<Duration>,
    pub calib_preset: Option<String>,
    pub report_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut c = CliConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let indent = raw.len() - raw.trim_start().len();
            let err = |column: usize, message: String| Error::Parse { path: path.into(), line, column, message };
            let Some((k, v)) = trimmed.split_once('=') else {
                return Err(err(indent + 1, format!("expected key = value, found {trimmed:?}")));
            };
            let (key, value) = (k.trim(), v.trim());
            let vcol = indent + k.len() + 2 + (v.len() - v.trim_start().len());
            fn num<T: FromStr>(value: &str, key: &str) -> std::result::Result<T, String> {
                value.parse().map_err(|_| format!("{key}: cannot parse {value:?}"))
            }
            let set = |c: &mut CliConfig| -> std::result::Result<(), String> {
                match key {
                    "detect.k" => c.detect_k = Some(num(value, key)?),
                    "detect.t_min" => c.detect_t_min = Some(num(value, key)?),
                    "detect.t_max" => c.detect_t_max = Some(num(value, key)?),
                    "detect.min_area" => c.detect_min_area = Some(num(value, key)?),
                    "detect.max_area" => c.detect_max_area = Some(num(value, key)?),
                    "detect.min_circularity" => c.detect_min_circularity = Some(num(value, key)?),
                    "embed.backend" => c.embed_backend = Some(value.parse()?),
                    "embed.weights" => c.embed_weights = Some(value.into()),
                    "embed.endpoint" => c.embed_endpoint = Some(value.into()),
                    "embed.dim" => c.embed_dim = Some(num(value, key)?),
                    "embed.timeout" => {
                        let secs: f64 = num(value, key)?;
                        c.embed_timeout = Some(
                            Duration::try_from_secs_f64(secs).map_err(|_| format!("{key}: invalid duration {value:?}"))?,
                        );
                    }
                    "calib.preset" => c.calib_preset = Some(value.into()),
                    "report.dir" => c.report_dir = Some(value.into()),
                    "seed" => c.seed = Some(num(value, key)?),
                    _ => unreachable!(),
                }
                Ok(())
            };
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("{}:{line}: unknown key {key:?}", path.display())));
            }
            set(&mut c).map_err(|m| err(vcol, m))?;
        }
        Ok(c)
    }

    /// Overrides the fields of `p` that the file sets.
    pub fn apply_detect(&self, p: &mut DetectParams) {
        let pairs = [
            (self.detect_k, &mut p.k),
            (self.detect_t_min, &mut p.t_min),
            (self.detect_t_max, &mut p.t_max),
            (self.detect_min_area, &mut p.min_area),
            (self.detect_max_area, &mut p.max_area),
            (self.detect_min_circularity, &mut p.min_circularity),
        ];
        for (v, slot) in pairs {
            if let Some(v) = v {
                *slot = v;
            }
        }
    }
}
