use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Graph, Tensor};
use crate::error::{Error, Result};

pub const PARAM_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which learning rate a parameter trains under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Decoder,
}

#[derive(Clone, Debug, PartialEq)]
struct Param {
    name: String,
    group: ParamGroup,
    value: Tensor,
    grad: Tensor,
}

/// Every learnable array of a model, addressable by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

#[derive(Serialize, Deserialize)]
struct ParamFile {
    format_version: u32,
    params: BTreeMap<String, ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param {
            grad: Tensor::zeros(value.shape()),
            name: name.clone(),
            group,
            value,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn set_group(&mut self, id: ParamId, group: ParamGroup) {
        self.params[id.0].group = group;
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].grad
    }

    /// Number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds the leaf gradients of every parameter used in `graph`.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for &(id, var) in graph.param_vars() {
            if let Some(g) = graph.grad_slice(var) {
                for (acc, d) in self.params[id.0].grad.data_mut().iter_mut().zip(g) {
                    *acc += d;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ParamFile {
            format_version: PARAM_FORMAT_VERSION,
            params: self
                .params
                .iter()
                .map(|p| {
                    (
                        p.name.clone(),
                        ParamEntry {
                            shape: p.value.shape().to_vec(),
                            data: p.value.data().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_string(&file).map_err(|e| Error::Config(e.to_string()))
    }

    /// Overwrites every parameter from a serialized map. The map must name
    /// exactly the parameters of `self`, with matching shapes.
    pub fn load_json(&mut self, json: &str, path: &Path) -> Result<()> {
        let file: ParamFile =
            serde_json::from_str(json).map_err(|e| Error::format(path, e.to_string()))?;
        if file.format_version != PARAM_FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!(
                    "unsupported parameter format version {} (expected {PARAM_FORMAT_VERSION})",
                    file.format_version
                ),
            ));
        }
        if file.params.len() != self.params.len() {
            return Err(Error::format(
                path,
                format!(
                    "file holds {} parameters, model expects {}",
                    file.params.len(),
                    self.params.len()
                ),
            ));
        }
        for p in &mut self.params {
            let entry = file
                .params
                .get(&p.name)
                .ok_or_else(|| Error::format(path, format!("missing parameter `{}`", p.name)))?;
            if entry.shape != p.value.shape() {
                return Err(Error::format(
                    path,
                    format!(
                        "parameter `{}` has shape {:?}, model expects {:?}",
                        p.name,
                        entry.shape,
                        p.value.shape()
                    ),
                ));
            }
            p.value = Tensor::new(entry.shape.clone(), entry.data.clone())
                .map_err(|e| Error::format(path, format!("parameter `{}`: {e}", p.name)))?;
        }
        Ok(())
    }
}
