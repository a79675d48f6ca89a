use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, OccupancyField};
use crate::error::{Error, Result};
use crate::geometry::ProjectionConstraint;

pub const CHECKPOINT_FORMAT: &str = "umbra-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training or reproduce renders: the field, the
/// (possibly optimized) constraints, the epoch counter and the optimizer moments.
///
/// Stored as a single JSON document. Floats use shortest round-trip formatting, so
/// `save(load(file))` reproduces the file byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub epoch: usize,
    pub field: OccupancyField,
    pub constraints: Vec<ProjectionConstraint>,
    pub adam_field: AdamState,
    pub adam_lights: AdamState,
    pub adam_screens: AdamState,
}

impl Checkpoint {
    pub fn new(
        epoch: usize,
        field: OccupancyField,
        constraints: Vec<ProjectionConstraint>,
        adam_field: AdamState,
        adam_lights: AdamState,
        adam_screens: AdamState,
    ) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_owned(),
            version: CHECKPOINT_VERSION,
            epoch,
            field,
            constraints,
            adam_field,
            adam_lights,
            adam_screens,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(bytes)?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let expected = self.field.params.shape.param_count();
        if self.field.params.data.len() != expected || self.adam_field.len() != expected {
            return Err(Error::Checkpoint(format!(
                "parameter count {} / adam {} does not match shape ({expected})",
                self.field.params.data.len(),
                self.adam_field.len()
            )));
        }
        if self.field.params.shape.input != self.field.encoding.dim() {
            return Err(Error::Checkpoint("input width does not match encoding".into()));
        }
        let n = 3 * self.constraints.len();
        if self.adam_lights.len() != n || self.adam_screens.len() != n {
            return Err(Error::Checkpoint("direction optimizer state does not match constraint count".into()));
        }
        Ok(())
    }
}
