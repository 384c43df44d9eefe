use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{build_model, GpModel, KernelParams};
use crate::error::{Error, Result};

/// On-disk form of a [`GpModel`]: the factorization is rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpModelFile {
    pub input_dim: usize,
    pub kernel: KernelParams,
    pub jitter: f64,
    /// One entry per observation.
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl From<&GpModel> for GpModelFile {
    fn from(m: &GpModel) -> Self {
        Self {
            input_dim: m.input_dim(),
            kernel: m.kernel().clone(),
            jitter: m.jitter(),
            inputs: m.inputs().column_iter().map(|c| c.iter().copied().collect()).collect(),
            targets: m.targets().iter().copied().collect(),
        }
    }
}

impl GpModelFile {
    pub fn into_model(self) -> Result<GpModel> {
        if self.inputs.iter().any(|p| p.len() != self.input_dim) {
            return Err(Error::DimensionMismatch("stored input has wrong length".into()));
        }
        let inputs = DMatrix::from_fn(self.input_dim, self.inputs.len(), |d, j| self.inputs[j][d]);
        let model = build_model(inputs, DVector::from_vec(self.targets), self.kernel)?;
        if model.jitter() != self.jitter {
            return Err(Error::Domain(format!(
                "stored jitter {:e} differs from rebuilt factorization jitter {:e}",
                self.jitter,
                model.jitter()
            )));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Parse {
            location: format!("line {} column {}", e.line(), e.column()),
            message: e.to_string(),
        })
    }
}

pub fn save_model(model: &GpModel, path: &Path) -> Result<()> {
    std::fs::write(path, GpModelFile::from(model).to_json()?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<GpModel> {
    GpModelFile::from_json(&std::fs::read_to_string(path)?)?.into_model()
}
