//! Layered settings: built-in defaults, then a TOML file, then flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sfp_core::eval::{HomographyConfig, SynthConfig};
use sfp_core::extract::ExtractConfig;
use sfp_core::localize::LocalizerConfig;
use sfp_core::pyramid::{DescriptorMode, LevelPlan};

use crate::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Synthetic images used when no image directory is given.
    pub images: usize,
    pub size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { steps: 500, learning_rate: 1e-4, lambda: 1e-3, seed: 0, images: 4, size: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractSection {
    pub levels: Vec<u8>,
    pub tau: f64,
    pub nms_radius: usize,
    pub max_per_level: usize,
    pub interpolate: bool,
    pub mode: DescriptorMode,
}

impl Default for ExtractSection {
    fn default() -> Self {
        let d = ExtractConfig::default();
        ExtractSection {
            levels: d.levels,
            tau: d.tau,
            nms_radius: d.nms_radius,
            max_per_level: d.max_per_level,
            interpolate: d.interpolate,
            mode: d.mode,
        }
    }
}

impl ExtractSection {
    pub fn to_config(&self) -> ExtractConfig {
        ExtractConfig {
            levels: self.levels.clone(),
            tau: self.tau,
            nms_radius: self.nms_radius,
            max_per_level: self.max_per_level,
            interpolate: self.interpolate,
            mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapSection {
    /// Descriptor dimension per level, shallow first.
    pub dims: Vec<usize>,
    /// Levels kept in the map; empty keeps all.
    pub levels: Vec<u8>,
    pub mode: DescriptorMode,
    pub merge_radius: f64,
    pub min_similarity: f64,
    pub max_reprojection_px: f64,
}

impl Default for MapSection {
    fn default() -> Self {
        MapSection {
            dims: LevelPlan::default().dims(),
            levels: Vec::new(),
            mode: DescriptorMode::Full,
            merge_radius: 0.01,
            min_similarity: 0.5,
            max_reprojection_px: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmaSection {
    pub floor: f64,
    pub thresholds: Vec<f64>,
}

impl Default for MmaSection {
    fn default() -> Self {
        MmaSection { floor: 0.5, thresholds: sfp_core::eval::default_thresholds() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub train: TrainSection,
    pub extract: ExtractSection,
    pub map: MapSection,
    /// Localizer overrides; missing keys take the map's per-plan defaults.
    pub localize: toml::Table,
    pub synth: SynthConfig,
    pub homography: HomographyConfig,
    pub mma: MmaSection,
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub levels: Option<Vec<u8>>,
    pub mode: Option<DescriptorMode>,
    pub tau: Option<f64>,
    pub lambda: Option<f64>,
    pub top_k: Option<usize>,
}

impl Settings {
    pub fn load(path: Option<&Path>, flags: &Overrides) -> Result<Settings, Failure> {
        let mut s = match path {
            None => Settings::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {}", p.display(), e.message())))?
            }
        };
        s.localizer(&LevelPlan::default()).map_err(|e| Failure::Usage(format!("[localize]: {e}")))?;
        if let Some(seed) = flags.seed {
            s.train.seed = seed;
            s.synth.seed = seed;
            s.homography.seed = seed;
            s.localize.insert("seed".into(), toml::Value::Integer(seed as i64));
        }
        if let Some(levels) = &flags.levels {
            s.extract.levels = levels.clone();
            s.map.levels = levels.clone();
            s.localize.insert("levels".into(), toml::Value::Array(levels.iter().map(|&l| toml::Value::Integer(l as i64)).collect()));
        }
        if let Some(mode) = flags.mode {
            s.extract.mode = mode;
            s.map.mode = mode;
        }
        if let Some(tau) = flags.tau {
            s.extract.tau = tau;
        }
        if let Some(lambda) = flags.lambda {
            s.train.lambda = lambda;
        }
        if let Some(k) = flags.top_k {
            s.localize.insert("top_k".into(), toml::Value::Integer(k as i64));
        }
        if !(0.0..=1.0).contains(&s.extract.tau) {
            return Err(Failure::Usage(format!("tau {} outside [0, 1]", s.extract.tau)));
        }
        if !(s.train.lambda >= 0.0 && s.train.lambda.is_finite()) {
            return Err(Failure::Usage(format!("lambda {} must be finite and >= 0", s.train.lambda)));
        }
        Ok(s)
    }

    /// Per-plan localizer defaults with the configured keys laid over them.
    pub fn localizer(&self, plan: &LevelPlan) -> Result<LocalizerConfig, String> {
        let base = toml::Value::try_from(LocalizerConfig::for_plan(plan)).map_err(|e| e.to_string())?;
        let mut table = match base {
            toml::Value::Table(t) => t,
            _ => unreachable!("a struct serializes to a table"),
        };
        for (k, v) in &self.localize {
            table.insert(k.clone(), v.clone());
        }
        let config: LocalizerConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| e.message().to_string())?;
        Ok(config)
    }

    pub fn plan(&self) -> Result<LevelPlan, Failure> {
        LevelPlan::from_dims(&self.map.dims).map_err(|e| Failure::Usage(format!("[map] dims: {e}")))
    }
}
