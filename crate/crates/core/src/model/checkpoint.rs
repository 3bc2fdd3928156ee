use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureConfig, Model, VocabSizes};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::ParamStore;

const MODEL_FILE: &str = "model.json";
const PARAMS_FILE: &str = "params.json";
const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    config: ArchitectureConfig,
    sizes: VocabSizes,
}

/// A model with its parameter values and vocabularies, stored as a
/// directory of JSON files.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub params: ParamStore,
    pub vocab: Vocabulary,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        io::write_json(
            &dir.join(MODEL_FILE),
            &ModelFile {
                format_version: MODEL_FORMAT_VERSION,
                config: self.model.config.clone(),
                sizes: self.model.sizes,
            },
        )?;
        self.vocab.save(dir)?;
        io::write_atomic(&dir.join(PARAMS_FILE), self.params.to_json()?.as_bytes())
    }

    /// Rebuilds the model from its config and checks every stored array
    /// against the expected names and shapes.
    pub fn load(dir: &Path) -> Result<Self> {
        let model_path = dir.join(MODEL_FILE);
        let file: ModelFile = io::read_json(&model_path)?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::format(
                &model_path,
                format!("unsupported format_version {}", file.format_version),
            ));
        }
        let vocab = Vocabulary::load(dir)?;
        if VocabSizes::of(&vocab) != file.sizes {
            return Err(Error::format(
                &model_path,
                format!("vocabulary sizes {:?} disagree with the vocabulary files", file.sizes),
            ));
        }
        let (model, mut params) = Model::new(&file.config, file.sizes, 0)?;
        let params_path = dir.join(PARAMS_FILE);
        let text = std::fs::read_to_string(&params_path).map_err(|e| Error::io(&params_path, e))?;
        params.load_json(&text, &params_path)?;
        Ok(Checkpoint { model, params, vocab })
    }
}
