//! Parameter checkpoints: a directory with `manifest.json` plus one raw
//! little-endian `.f32` array per named parameter.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GtpError, Result};
use crate::io;
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub seed: u64,
    /// Model-specific configuration echo.
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

/// Objects whose learnable state is an ordered list of named tensors.
pub trait NamedParams {
    fn named(&self) -> Vec<(String, &Tensor)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.named_mut().into_iter().map(|(_, t)| t).collect()
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Overwrites every parameter from `values`, checking names and shapes.
    fn assign(&mut self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, slot) in self.named_mut() {
            let v = values
                .get(&name)
                .ok_or_else(|| GtpError::invalid(format!("checkpoint lacks parameter {name}")))?;
            if v.shape() != slot.shape() {
                return Err(GtpError::Shape {
                    op: "checkpoint",
                    left: slot.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            *slot = v.clone();
        }
        Ok(())
    }
}

pub fn save(dir: &Path, kind: &str, seed: u64, config: serde_json::Value, params: &dyn NamedParams) -> Result<()> {
    io::create_dir(dir)?;
    let mut entries = Vec::new();
    for (name, t) in params.named() {
        let file = format!("{name}.f32");
        io::write_f32(&dir.join(&file), t.data())?;
        entries.push(ParamEntry {
            name,
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        seed,
        config,
        params: entries,
    };
    io::write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load(dir: &Path, kind: &str) -> Result<(CheckpointManifest, BTreeMap<String, Tensor>)> {
    let manifest: CheckpointManifest = io::read_json(&dir.join("manifest.json"))?;
    if manifest.kind != kind {
        return Err(GtpError::validation(dir, format!("checkpoint kind is {}, expected {kind}", manifest.kind)));
    }
    let mut values = BTreeMap::new();
    for e in &manifest.params {
        let path = dir.join(&e.file);
        let data = io::read_f32(&path)?;
        let t = Tensor::new(e.shape.clone(), data).map_err(|err| GtpError::validation(&path, err.to_string()))?;
        if !t.is_finite() {
            return Err(GtpError::validation(&path, "non-finite parameter values"));
        }
        values.insert(e.name.clone(), t);
    }
    Ok((manifest, values))
}
