//! Self-describing JSON parameter container. Values round-trip exactly
//! (shortest-representation float encoding), so a reloaded network computes
//! bit-identical outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::Params;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn capture(net: &mut dyn Params, seed: u64, config_hash: &str) -> Self {
        let mut tensors = Vec::new();
        net.visit("", &mut |name, p, _, shape| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: shape.to_vec(),
                data: p.to_vec(),
            });
        });
        Checkpoint {
            seed,
            config_hash: config_hash.to_string(),
            tensors,
        }
    }

    /// Restores parameters into `net`. Every tensor must match by name and
    /// shape; missing or extra tensors are errors.
    pub fn restore(&self, net: &mut dyn Params) -> Result<()> {
        let by_name: std::collections::BTreeMap<&str, &TensorEntry> = self
            .tensors
            .iter()
            .map(|t| (t.name.as_str(), t))
            .collect();
        if by_name.len() != self.tensors.len() {
            return Err(Error::Checkpoint("duplicate tensor names in checkpoint".into()));
        }
        let mut used = std::collections::BTreeSet::new();
        let mut err: Option<Error> = None;
        net.visit("", &mut |name, p, _, shape| {
            if err.is_some() {
                return;
            }
            match by_name.get(name) {
                None => {
                    err = Some(Error::Checkpoint(format!("checkpoint missing tensor {name}")));
                }
                Some(entry) => {
                    if entry.shape != shape || entry.data.len() != p.len() {
                        err = Some(Error::Checkpoint(format!(
                            "tensor {name}: shape {:?} in checkpoint, {:?} in network",
                            entry.shape, shape
                        )));
                        return;
                    }
                    p.copy_from_slice(&entry.data);
                    used.insert(name.to_string());
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if used.len() != self.tensors.len() {
            let extra: Vec<&str> = self
                .tensors
                .iter()
                .map(|t| t.name.as_str())
                .filter(|n| !used.contains(*n))
                .collect();
            return Err(Error::Checkpoint(format!(
                "checkpoint has tensors the network does not: {}",
                extra.join(", ")
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
    }
}
