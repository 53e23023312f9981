//! Run configuration: TOML/JSON files with `scene`, `detector`, `attack`,
//! and `eval` sections. Unknown keys are rejected; the resolved config is
//! echoed into every output directory and reloads identically.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::detector::{BevGrid, DetectorMeta};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::scene::SceneConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub channels: usize,
    /// Half-extent of the square BEV grid in meters.
    pub grid_range: f64,
    /// Cells per meter.
    pub resolution: f64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            channels: 32,
            grid_range: 20.0,
            resolution: 2.0,
            epochs: 20,
            lr: 1e-3,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn grid(&self) -> BevGrid {
        BevGrid {
            x_min: -self.grid_range,
            x_max: self.grid_range,
            y_min: -self.grid_range,
            y_max: self.grid_range,
            resolution: self.resolution,
            channels: self.channels,
        }
    }

    pub fn meta(&self, scene: &SceneConfig) -> DetectorMeta {
        DetectorMeta {
            grid: self.grid(),
            image_width: scene.image_width,
            image_height: scene.image_height,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub detector: DetectorConfig,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Load from TOML (default) or JSON (by extension). Unknown keys fail.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = if path.extension().map(|e| e == "json").unwrap_or(false) {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.attack.validate()?;
        self.detector.grid().validate()?;
        if self.scene.image_width % 4 != 0 || self.scene.image_height % 4 != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be divisible by 4",
                self.scene.image_width, self.scene.image_height
            )));
        }
        for t in &self.eval.thresholds {
            if !(0.0 < *t && *t < 1.0) {
                return Err(Error::Config(format!("eval threshold {t} outside (0,1)")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Write the resolved config next to a command's outputs.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.to_toml())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let toml_text = cfg.to_toml();
        let back: RunConfig = toml::from_str(&toml_text).unwrap();
        assert_eq!(toml_text, back.to_toml());
        // paper-stated defaults
        assert_eq!(cfg.attack.lr, 0.02);
        assert_eq!(cfg.attack.displacement_cap, 0.1);
        assert_eq!(cfg.attack.alpha, 1.0);
        assert_eq!(cfg.attack.beta, 1.0);
        assert_eq!(cfg.attack.epochs, 10);
        assert_eq!(cfg.attack.meshes_per_frame, 4);
        assert_eq!(cfg.attack.distance, 0.1);
        assert_eq!(cfg.eval.thresholds, vec![0.2, 0.3, 0.5, 0.7]);
        assert_eq!(cfg.scene.image_width, 704);
        assert_eq!(cfg.scene.image_height, 256);
        assert_eq!(cfg.detector.grid().nx(), 80);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[attack]\nlr = 0.02\nbogus_key = 1\n").unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn load_applies_file_values_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[attack]\nlr = 0.05\n[scene]\nimage_width = 176\nimage_height = 64\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.attack.lr, 0.05);
        assert_eq!(cfg.attack.epochs, 10); // untouched default
        assert_eq!(cfg.scene.image_width, 176);
    }
}
