//! Checkpoint persistence: every parameter tensor, the config, optimizer
//! state, and the step counter, serialized as JSON. `f64` values survive
//! the JSON round trip bit-for-bit (shortest-round-trip printing), so a
//! reloaded model reproduces forward passes exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{DtError, Result};
use crate::model::DtModel;
use crate::nn::Adam;

/// Serde adapter for `Vec<Array2<f64>>` as `(rows, cols, flat)` triples.
pub mod array_list_serde {
    use ndarray::Array2;
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(arrays: &[Array2<f64>], s: S) -> Result<S::Ok, S::Error> {
        let encoded: Vec<(usize, usize, Vec<f64>)> = arrays
            .iter()
            .map(|a| (a.nrows(), a.ncols(), a.iter().copied().collect()))
            .collect();
        encoded.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Array2<f64>>, D::Error> {
        let encoded: Vec<(usize, usize, Vec<f64>)> = Vec::deserialize(d)?;
        encoded
            .into_iter()
            .map(|(r, c, data)| {
                Array2::from_shape_vec((r, c), data)
                    .map_err(|e| D::Error::custom(format!("bad array shape: {e}")))
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// On-disk training state.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub step: usize,
    /// Data-order RNG state: the base seed; batch order at any step is a
    /// pure function of `(seed, step)`.
    pub data_seed: u64,
    params: Vec<NamedArray>,
    optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn capture(model: &DtModel, optimizer: Option<&Adam>, step: usize) -> Self {
        let params = model
            .store
            .iter()
            .map(|(name, a)| NamedArray {
                name: name.to_string(),
                rows: a.nrows(),
                cols: a.ncols(),
                data: a.iter().copied().collect(),
            })
            .collect();
        Self {
            config: model.config.clone(),
            step,
            data_seed: model.config.seed,
            params,
            optimizer: optimizer.cloned(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(file, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }

    /// Rebuild the model and restore every tensor by name.
    pub fn restore(&self) -> Result<(DtModel, Option<Adam>, usize)> {
        let mut model = DtModel::new(self.config.clone())?;
        if model.store.len() != self.params.len() {
            return Err(DtError::Checkpoint(format!(
                "parameter count mismatch: model has {}, checkpoint has {}",
                model.store.len(),
                self.params.len()
            )));
        }
        for (i, saved) in self.params.iter().enumerate() {
            let id = crate::nn::ParamId(i);
            if model.store.name(id) != saved.name {
                return Err(DtError::Checkpoint(format!(
                    "parameter {} name mismatch: {} vs {}",
                    i,
                    model.store.name(id),
                    saved.name
                )));
            }
            let current = model.store.get(id);
            if current.dim() != (saved.rows, saved.cols) {
                return Err(DtError::Checkpoint(format!(
                    "parameter {} shape mismatch",
                    saved.name
                )));
            }
            let restored =
                ndarray::Array2::from_shape_vec((saved.rows, saved.cols), saved.data.clone())
                    .map_err(|e| DtError::Checkpoint(e.to_string()))?;
            *model.store.get_mut(id) = restored;
        }
        Ok((model, self.optimizer.clone(), self.step))
    }
}
