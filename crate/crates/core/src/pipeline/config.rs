use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::DEFAULT_MAX_DT;
use crate::error::{Error, Result};
use crate::inpaint::InpaintConfig;
use crate::map::MapConfig;
use crate::seg;
use crate::vo::OdometryConfig;

/// Every tunable of a run; missing keys take their defaults, unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Timestamp association window, seconds.
    pub max_dt: f64,
    /// Bound of each inter-stage queue.
    pub queue_capacity: usize,
    pub tracking: seg::Config,
    pub odometry: OdometryConfig,
    pub map: MapConfig,
    pub inpaint: InpaintConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            max_dt: DEFAULT_MAX_DT,
            queue_capacity: 4,
            tracking: seg::Config::default(),
            odometry: OdometryConfig::default(),
            map: MapConfig::default(),
            inpaint: InpaintConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_dt > 0.0 && self.max_dt.is_finite()) {
            return Err(Error::Config("max_dt must be positive".into()));
        }
        if self.queue_capacity < 1 {
            return Err(Error::Config("queue_capacity must be at least 1".into()));
        }
        self.tracking.validate()?;
        self.odometry.validate()?;
        self.map.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_table(parse_table(text)?)
    }

    /// Reads `path` (or starts from the defaults) and applies `key.path=value`
    /// overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                parse_table(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

fn parse_table(text: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::Config(e.message().to_string()))
}

/// `a.b.c=value`; the value is read as a TOML literal, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}`: expected key=value")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{spec}`: empty key segment")));
    }
    let (last, path) = parts.split_last().expect("nonempty");
    let mut t = table;
    for p in path {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{spec}`: `{p}` is not a section")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Moving objects removed from odometry, all dynamic-class objects from the map.
    #[default]
    Masked,
    /// Tracker runs and logs, but nothing is masked.
    Baseline,
    /// Poses from the sequence's ground truth; masks applied to the map only.
    GtOdometry,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Masked => "masked",
            Mode::Baseline => "baseline",
            Mode::GtOdometry => "gt-odometry",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked" => Ok(Mode::Masked),
            "baseline" => Ok(Mode::Baseline),
            "gt-odometry" => Ok(Mode::GtOdometry),
            _ => Err(Error::Config(format!(
                "unknown mode `{s}` (masked, baseline, gt-odometry)"
            ))),
        }
    }
}

/// Where per-frame instances come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DetectionSource {
    Dir(PathBuf),
    /// Rendered on the fly from a scene spec.
    Synthetic(PathBuf),
}

impl FromStr for DetectionSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("synthetic:") {
            Some("") => Err(Error::Config("synthetic: needs a scene spec path".into())),
            Some(p) => Ok(DetectionSource::Synthetic(PathBuf::from(p))),
            None => Ok(DetectionSource::Dir(PathBuf::from(s))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub sequence: PathBuf,
    /// Defaults to `<sequence>/detections` when that directory exists.
    pub detections: Option<DetectionSource>,
    pub mode: Mode,
    pub config: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seed: u64,
    pub output: PathBuf,
}

impl RunManifest {
    pub fn new(sequence: impl Into<PathBuf>, output: impl Into<PathBuf>) -> Self {
        RunManifest {
            sequence: sequence.into(),
            detections: None,
            mode: Mode::Masked,
            config: None,
            overrides: Vec::new(),
            seed: 0,
            output: output.into(),
        }
    }

    pub fn load_config(&self) -> Result<PipelineConfig> {
        PipelineConfig::load(self.config.as_deref(), &self.overrides)
    }

    pub(super) fn resolve_detections(&self) -> Result<Option<DetectionSource>> {
        let src = match &self.detections {
            Some(s) => Some(s.clone()),
            None => {
                let d = self.sequence.join(crate::synth::DETECTIONS_DIR);
                d.is_dir().then_some(DetectionSource::Dir(d))
            }
        };
        match &src {
            Some(DetectionSource::Dir(d)) if !d.is_dir() => Err(Error::Config(format!(
                "detections directory {} does not exist",
                d.display()
            ))),
            Some(DetectionSource::Synthetic(p)) if !p.is_file() => {
                Err(Error::Config(format!("scene spec {} does not exist", p.display())))
            }
            None if self.mode == Mode::Masked => Err(Error::Config(
                "masked mode needs detections (none given and the sequence has no detections directory)".into(),
            )),
            _ => Ok(src),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_empty_file() {
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.tracking.score_threshold, 0.9);
        assert_eq!(c.tracking.max_tracked_objects, 5);
        assert_eq!(c.tracking.termination_frames, 10);
        assert_eq!(c.queue_capacity, 4);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(PipelineConfig::from_toml("bogus = 1"), Err(Error::Config(_))));
        assert!(PipelineConfig::from_toml("[tracking]\nscore = 0.5").is_err());
        assert!(PipelineConfig::from_toml("[tracking]\nscore_threshold = 1.5").is_err());
    }

    #[test]
    fn overrides_apply_in_order() {
        let o = vec![
            "tracking.score_threshold=0.5".to_string(),
            "inpaint.enabled=false".to_string(),
            "tracking.iou_rule=displacement".to_string(),
            "tracking.score_threshold=0.6".to_string(),
        ];
        let c = PipelineConfig::load(None, &o).unwrap();
        assert_eq!(c.tracking.score_threshold, 0.6);
        assert!(!c.inpaint.enabled);
        assert_eq!(c.tracking.iou_rule, seg::IouRule::Displacement);
        assert!(PipelineConfig::load(None, &["tracking".into()]).is_err());
        assert!(PipelineConfig::load(None, &["max_dt.x=1".into()]).is_err());
        assert!(PipelineConfig::load(None, &["odometry.nope=1".into()]).is_err());
    }

    #[test]
    fn parse_mode_and_source() {
        assert_eq!("gt-odometry".parse::<Mode>().unwrap(), Mode::GtOdometry);
        assert!("fast".parse::<Mode>().is_err());
        assert_eq!(
            "synthetic:a/b.toml".parse::<DetectionSource>().unwrap(),
            DetectionSource::Synthetic("a/b.toml".into())
        );
        assert_eq!(
            "dets".parse::<DetectionSource>().unwrap(),
            DetectionSource::Dir("dets".into())
        );
    }

    #[test]
    fn masked_mode_requires_detections() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new(dir.path(), dir.path().join("out"));
        assert!(matches!(m.resolve_detections(), Err(Error::Config(_))));
        let b = RunManifest {
            mode: Mode::Baseline,
            ..m.clone()
        };
        assert_eq!(b.resolve_detections().unwrap(), None);
        let missing = RunManifest {
            detections: Some(DetectionSource::Dir(dir.path().join("nope"))),
            ..b
        };
        assert!(missing.resolve_detections().is_err());
    }
}
