//! Job configuration: one TOML file with a `version` key, a `[train]` table and one
//! `[[constraints]]` entry per target image.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Spanned;
use umbra_core::geometry::{ProjectionConstraint, Vec3};
use umbra_core::reconstruct::{DEFAULT_RESOLUTION, MIN_RESOLUTION};
use umbra_core::TrainConfig;

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_resolution() -> usize {
    DEFAULT_RESOLUTION
}

fn default_threshold() -> f64 {
    0.5
}

fn default_distance() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSpec {
    /// Target image, relative to the config file.
    pub image: PathBuf,
    pub light: [f64; 3],
    pub screen: [f64; 3],
    /// Distance from the scene origin to the screen plane.
    #[serde(default = "default_distance")]
    pub distance: f64,
}

impl ConstraintSpec {
    pub fn light(&self) -> Vec3 {
        self.light.into()
    }

    pub fn screen(&self) -> Vec3 {
        self.screen.into()
    }

    /// The projection constraint for an image of the given size.
    pub fn constraint(&self, width: usize, height: usize) -> ProjectionConstraint {
        ProjectionConstraint::new(self.light(), self.screen(), self.distance, width, height)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    pub version: u32,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Nodes per axis of the reconstruction grid.
    #[serde(default = "default_resolution")]
    pub grid_resolution: usize,
    /// Gray level (as a fraction of white) below which a pixel is shadow.
    #[serde(default = "default_threshold")]
    pub image_threshold: f64,
    #[serde(default)]
    pub train: TrainConfig,
    pub constraints: Vec<Spanned<ConstraintSpec>>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn unit(v: [f64; 3], what: &str, at: &str) -> Result<[f64; 3], CliError> {
    let p = Vec3::from(v);
    let n = p.norm();
    if !(n.is_finite() && n > 1e-12) {
        return Err(CliError::Validation(format!("{at}: {what} must be a finite non-zero vector")));
    }
    Ok((p / n).to_array())
}

impl JobConfig {
    /// Parse and validate. Light and screen vectors come back normalized.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: JobConfig = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Validation(format!(
                "config: unsupported version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        if cfg.constraints.is_empty() {
            return Err(CliError::Validation("config: at least one [[constraints]] entry is required".into()));
        }
        if cfg.grid_resolution < MIN_RESOLUTION {
            return Err(CliError::Validation(format!(
                "config: grid_resolution must be at least {MIN_RESOLUTION}"
            )));
        }
        if !(cfg.image_threshold > 0.0 && cfg.image_threshold <= 1.0) {
            return Err(CliError::Validation("config: image_threshold must lie in (0, 1]".into()));
        }
        for (i, spanned) in cfg.constraints.iter_mut().enumerate() {
            let at = format!("line {}: constraint {i}", line_of(text, spanned.span().start));
            let spec = spanned.get_mut();
            spec.light = unit(spec.light, "light", &at)?;
            spec.screen = unit(spec.screen, "screen", &at)?;
            if !(spec.distance.is_finite() && spec.distance > 0.0) {
                return Err(CliError::Validation(format!("{at}: distance must be positive")));
            }
            let dot = spec.light().dot(spec.screen());
            if !(dot < 0.0) {
                return Err(CliError::Validation(format!(
                    "{at}: light does not face the screen (<l, s> = {dot:.4})"
                )));
            }
        }
        cfg.train
            .validate()
            .map_err(|e| CliError::Validation(format!("config [train]: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn specs(&self) -> impl Iterator<Item = &ConstraintSpec> {
        self.constraints.iter().map(|s| s.get_ref())
    }
}
