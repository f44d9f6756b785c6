//! Run configuration.
//!
//! A config file is a TOML tree layered over a named preset: the preset
//! supplies every value, the file overrides any subset of them.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use aris_core::detector::PlasticAsMetal;
use aris_core::sim::{calibrate_timing_noise, DetectorKind, FeederConfig, Latency, SimConfig, PHYSICAL_HIT_RATE};
use aris_core::{BeltCalibration, ConfusionModel, MaterialClass, PaddleLayout};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Published line geometry and detector statistics, perfect actuation.
    #[default]
    PaperDefaults,
    /// As above, with no feeder clearance and calibrated strike noise.
    Physical,
    /// The purity trial's 1.3 m/s belt.
    Trial13,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Self::PaperDefaults => "paper_defaults",
            Self::Physical => "physical",
            Self::Trial13 => "trial13",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub seed: u64,
    pub particles: u64,
    pub duration_ms: Option<f64>,
    pub feeder_to_fov_mm: f64,
    pub detector: DetectorKind,
    pub nms_confidence: f64,
    pub nms_iou: f64,
    pub target: MaterialClass,
    pub flick_offset_ms: f64,
    pub timing_noise_ms: f64,
    /// When set, `timing_noise_ms` is replaced by the value that gives this
    /// mean hit rate.
    pub strike_hit_rate: Option<f64>,
    pub corrupt_packet_rate: f64,
    pub feeder: FeederConfig,
    pub latency: Latency,
}

impl Default for SimSection {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            seed: d.seed,
            particles: d.particles,
            duration_ms: d.duration_ms,
            feeder_to_fov_mm: d.feeder_to_fov_mm,
            detector: d.detector,
            nms_confidence: d.nms_confidence,
            nms_iou: d.nms_iou,
            target: d.target,
            flick_offset_ms: d.flick_offset_ms,
            timing_noise_ms: d.timing_noise_ms,
            strike_hit_rate: None,
            corrupt_packet_rate: d.corrupt_packet_rate,
            feeder: d.feeder,
            latency: d.latency,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// TOML file holding a full `ConfusionModel`, relative to the config.
    pub file: Option<PathBuf>,
    pub plastic_as_metal: PlasticAsMetal,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { file: None, plastic_as_metal: PlasticAsMetal::StatedPercent }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WireSection {
    pub endpoint: String,
    pub tick_ms: u64,
}

impl Default for WireSection {
    fn default() -> Self {
        Self { endpoint: "127.0.0.1:50210".into(), tick_ms: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogSection {
    pub dir: PathBuf,
    pub operations: String,
    pub report: String,
    pub summary: String,
    pub breaches: String,
}

impl Default for LogSection {
    fn default() -> Self {
        Self {
            dir: "logs".into(),
            operations: "operations.csv".into(),
            report: "report.csv".into(),
            summary: "summary.txt".into(),
            breaches: "breaches.csv".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub calibration: BeltCalibration,
    pub layout: PaddleLayout,
    pub sim: SimSection,
    pub model: ModelSection,
    pub wire: WireSection,
    pub logs: LogSection,
    /// Directory relative paths are resolved against. Not serialized.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::PaperDefaults)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let mut c = Self {
            preset: p,
            calibration: BeltCalibration::default(),
            layout: PaddleLayout::default(),
            sim: SimSection::default(),
            model: ModelSection::default(),
            wire: WireSection::default(),
            logs: LogSection::default(),
            base_dir: PathBuf::from("."),
        };
        match p {
            Preset::PaperDefaults => {}
            Preset::Physical => {
                c.sim.feeder.clearance_mm = 0.0;
                c.sim.strike_hit_rate = Some(PHYSICAL_HIT_RATE);
            }
            Preset::Trial13 => c.calibration.belt_speed_mps = 1.3,
        }
        c
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        let preset = match table.get("preset") {
            Some(v) => Preset::deserialize(v.clone()).context("field `preset`")?,
            None => Preset::default(),
        };
        let mut base = toml::Table::try_from(Self::preset(preset)).context("serializing preset")?;
        merge(&mut base, table);
        let mut cfg: Self = base.try_into().context("invalid config")?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &dir).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn confusion_model(&self) -> Result<ConfusionModel> {
        match &self.model.file {
            None => Ok(ConfusionModel::published(self.model.plastic_as_metal)),
            Some(f) => {
                let path = self.resolve(f);
                let text = std::fs::read_to_string(&path)
                    .with_context(|| format!("field `model.file`: cannot read {}", path.display()))?;
                let m: ConfusionModel =
                    toml::from_str(&text).with_context(|| format!("field `model.file`: {}", path.display()))?;
                m.validate().with_context(|| format!("field `model.file`: {}", path.display()))?;
                Ok(m)
            }
        }
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let s = &self.sim;
        let mut c = SimConfig {
            seed: s.seed,
            particles: s.particles,
            duration_ms: s.duration_ms,
            calibration: self.calibration.clone(),
            layout: self.layout.clone(),
            feeder: s.feeder.clone(),
            feeder_to_fov_mm: s.feeder_to_fov_mm,
            detector: s.detector,
            model: self.confusion_model()?,
            nms_confidence: s.nms_confidence,
            nms_iou: s.nms_iou,
            target: s.target,
            flick_offset_ms: s.flick_offset_ms,
            timing_noise_ms: s.timing_noise_ms,
            latency: s.latency,
            corrupt_packet_rate: s.corrupt_packet_rate,
        };
        if let Some(rate) = s.strike_hit_rate {
            if !(rate > 0.0 && rate < 1.0) {
                bail!("field `sim.strike_hit_rate` must lie in (0, 1), got {rate}");
            }
            c.timing_noise_ms = calibrate_timing_noise(&c, rate);
        }
        c.validate().context("invalid config")?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim_config().map(|_| ())
    }

    pub fn log_dir(&self) -> PathBuf {
        self.resolve(&self.logs.dir)
    }
}
