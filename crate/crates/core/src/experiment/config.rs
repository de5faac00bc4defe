use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::coarse::{CoarseCacheConfig, ControlLatter};
use crate::error::{Error, Result};
use crate::fine::FineCacheConfig;
use crate::pipeline::PipelineConfig;

/// Which caching scheme a run uses. Serialized as `nocache`, `hgc` or
/// `uniform(<n>)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mode {
    NoCache,
    Uniform(usize),
    #[default]
    Hgc,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::NoCache => f.write_str("nocache"),
            Mode::Uniform(n) => write!(f, "uniform({n})"),
            Mode::Hgc => f.write_str("hgc"),
        }
    }
}

fn parse_call<'a>(s: &'a str, name: &str) -> Option<&'a str> {
    s.strip_prefix(name)?.strip_prefix('(')?.strip_suffix(')')
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "nocache" => Ok(Mode::NoCache),
            "hgc" => Ok(Mode::Hgc),
            other => parse_call(other, "uniform")
                .and_then(|n| n.trim().parse().ok())
                .map(Mode::Uniform)
                .ok_or_else(|| {
                    format!("unknown mode `{other}` (expected nocache, hgc or uniform(<n>))")
                }),
        }
    }
}

impl TryFrom<String> for Mode {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        m.to_string()
    }
}

/// How the control module's cached step is chosen: `calibrate` or `fixed(<step>)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TauCMode {
    #[default]
    Calibrate,
    Fixed(usize),
}

impl fmt::Display for TauCMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TauCMode::Calibrate => f.write_str("calibrate"),
            TauCMode::Fixed(v) => write!(f, "fixed({v})"),
        }
    }
}

impl FromStr for TauCMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "calibrate" => Ok(TauCMode::Calibrate),
            other => parse_call(other, "fixed")
                .and_then(|n| n.trim().parse().ok())
                .map(TauCMode::Fixed)
                .ok_or_else(|| {
                    format!("unknown tau_c_mode `{other}` (expected calibrate or fixed(<step>))")
                }),
        }
    }
}

impl TryFrom<String> for TauCMode {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<TauCMode> for String {
    fn from(m: TauCMode) -> String {
        m.to_string()
    }
}

/// Complete description of one experiment. Missing fields take the
/// defaults, which reproduce the reference operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub pipeline: PipelineConfig,
    pub coarse: CoarseCacheConfig,
    pub fine: FineCacheConfig,
    pub mode: Mode,
    pub control_latter: ControlLatter,
    pub tau_c_mode: TauCMode,
    /// Inclusive `[start, end]` steps during which control is injected.
    pub condition_window: Option<(usize, usize)>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineConfig::default(),
            coarse: CoarseCacheConfig::default(),
            fine: FineCacheConfig::default(),
            mode: Mode::default(),
            control_latter: ControlLatter::default(),
            tau_c_mode: TauCMode::default(),
            condition_window: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::validation(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Loads `path` (or the defaults), then applies `KEY=VALUE` overrides
    /// addressed by dotted paths such as `coarse.theta=0.9`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::validation("<root>", e.to_string()))?
            }
            None => serde_json::to_value(Self::default()).expect("config serializes"),
        };
        // fill in omitted sections so overrides can address them
        let defaults = serde_json::to_value(Self::default()).expect("config serializes");
        merge_missing(&mut value, &defaults);
        for item in overrides {
            apply_override(&mut value, item)?;
        }
        Self::from_json(&value.to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.coarse.validate()?;
        self.fine.validate(self.pipeline.t_generative)?;
        if let Mode::Uniform(0) = self.mode {
            return Err(Error::validation(
                "mode",
                "uniform interval must be at least 1",
            ));
        }
        if let TauCMode::Fixed(v) = self.tau_c_mode {
            let half = self.pipeline.t_control / 2;
            if v < 1 || v > half {
                return Err(Error::validation(
                    "tau_c_mode",
                    format!("fixed cached step {v} outside [1, {half}]"),
                ));
            }
        }
        if let Some((start, end)) = self.condition_window {
            validate_window(start, end, self.pipeline.t_generative)?;
        }
        Ok(())
    }

    /// Config snapshot for reports: everything except the output location.
    pub fn snapshot(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut v {
            map.remove("output_dir");
        }
        v
    }
}

pub(crate) fn validate_window(start: usize, end: usize, t: usize) -> Result<()> {
    if start < 1 || start > end || end > t {
        return Err(Error::validation(
            "condition_window",
            format!("window [{start}, {end}] must satisfy 1 <= start <= end <= {t}"),
        ));
    }
    Ok(())
}

fn merge_missing(target: &mut Value, defaults: &Value) {
    if let (Value::Object(t), Value::Object(d)) = (target, defaults) {
        for (k, dv) in d {
            match t.get_mut(k) {
                Some(tv) => merge_missing(tv, dv),
                None => {
                    t.insert(k.clone(), dv.clone());
                }
            }
        }
    }
}

/// Applies one `dotted.path=value` override. The value is parsed as JSON
/// when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::validation(item, "override must look like KEY=VALUE"))?;
    let key = key.trim();
    let parsed =
        serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cursor else {
            return Err(Error::validation(
                key,
                format!("`{}` is not a section", parts[..i].join(".")),
            ));
        };
        if !map.contains_key(*part) {
            return Err(Error::validation(key, "no such field"));
        }
        cursor = map.get_mut(*part).expect("checked");
    }
    *cursor = parsed;
    Ok(())
}
