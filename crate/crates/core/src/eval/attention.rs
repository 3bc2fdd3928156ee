use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{make_batch, Instance, Sentence, Vocabulary, UNK};
use crate::error::{Error, Result};
use crate::fusion::{FusionStrategy, Stream};
use crate::io;
use crate::model::{Checkpoint, DecodeMode, Dropout, Model};
use crate::tensor::{Graph, ParamStore};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Teacher-forced attention for one sentence: `S×S` matrices (decoder step
/// by source position) per stream and for the fused distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub architecture: String,
    pub strategy: Option<FusionStrategy>,
    pub weights: [Option<f64>; 3],
    pub tokens: Vec<String>,
    pub unk_positions: Vec<usize>,
    pub target_position: Option<usize>,
    pub streams: Vec<(Stream, Vec<Vec<f64>>)>,
    pub fused: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub architecture: String,
    pub strategy: Option<FusionStrategy>,
    /// Whether the per-stream files hold normalized distributions (point-wise
    /// fusion and single-stream models) or raw energies.
    pub stream_values: String,
    pub weights: BTreeMap<String, f64>,
    pub tokens: Vec<String>,
    /// Positions replaced by `<unk>`.
    pub unk_positions: Vec<usize>,
    pub target_position: Option<usize>,
    pub steps: usize,
    pub source_length: usize,
    pub files: BTreeMap<String, String>,
}

fn sentence_instance(sentence: &Sentence, vocab: &Vocabulary) -> Instance {
    let source: Vec<usize> = sentence.tokens.iter().map(|t| vocab.words.index_or_unk(&t.surface)).collect();
    let mut target = source.clone();
    let target_position = sentence.targets().next();
    let (mut lemma, mut gold, mut pos_tag) = (String::new(), String::new(), crate::data::PosTag::Other);
    if let Some(t) = target_position {
        let tok = &sentence.tokens[t];
        gold = tok.sense_form().expect("target has a sense");
        target[t] = vocab.output.index_or_unk(&gold);
        lemma = tok.lemma.clone();
        pos_tag = tok.pos;
    }
    Instance {
        sentence_id: sentence.id,
        sentence_position: target_position.unwrap_or(0),
        tokens: sentence.tokens.iter().map(|t| t.surface.clone()).collect(),
        pos: sentence.tokens.iter().map(|t| vocab.pos_index(t.pos)).collect(),
        source,
        target,
        target_position: target_position.unwrap_or(0),
        lemma,
        gold,
        pos_tag,
    }
}

pub fn attention_matrices(
    model: &Model,
    params: &ParamStore,
    vocab: &Vocabulary,
    sentence: &Sentence,
) -> Result<AttentionDump> {
    if sentence.tokens.is_empty() {
        return Err(Error::Usage("cannot dump attention for an empty sentence".into()));
    }
    let inst = sentence_instance(sentence, vocab);
    let batch = make_batch(&[&inst])?;
    let mut g = Graph::new();
    let out = model.forward(&mut g, params, &batch, DecodeMode::TeacherForced, &mut Dropout::off(), true)?;
    let s = inst.len();
    let bundles = &out.attention[..s];
    let row = |t: &crate::tensor::Tensor| t.row(0).to_vec();
    let streams = model
        .config
        .streams()
        .iter()
        .map(|&st| {
            let m = bundles.iter().map(|b| row(b.stream(st).expect("stream recorded"))).collect();
            (st, m)
        })
        .collect();
    Ok(AttentionDump {
        architecture: model.architecture().name().to_string(),
        strategy: model.config.effective_fusion(),
        weights: model.fusion_weights(params),
        unk_positions: inst.source.iter().enumerate().filter(|(_, &i)| i == UNK).map(|(p, _)| p).collect(),
        target_position: sentence.targets().next(),
        tokens: inst.tokens,
        streams,
        fused: bundles.iter().map(|b| row(&b.fused)).collect(),
    })
}

fn write_matrix(path: &Path, tokens: &[String], m: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["step".to_string(), "token".to_string()];
    header.extend(tokens.iter().cloned());
    let to_err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(&header).map_err(to_err)?;
    for (j, r) in m.iter().enumerate() {
        let mut rec = vec![j.to_string(), tokens[j].clone()];
        rec.extend(r.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(to_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    io::write_atomic(path, &bytes)
}

impl AttentionDump {
    /// Writes `attn_<stream>.csv`, `attn_fused.csv` and the manifest.
    pub fn write(&self, dir: &Path) -> Result<DumpManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = BTreeMap::new();
        for (st, m) in &self.streams {
            let name = format!("attn_{st}.csv");
            write_matrix(&dir.join(&name), &self.tokens, m)?;
            files.insert(st.to_string(), name);
        }
        write_matrix(&dir.join("attn_fused.csv"), &self.tokens, &self.fused)?;
        files.insert("fused".into(), "attn_fused.csv".into());
        let weights = self
            .weights
            .iter()
            .enumerate()
            .filter_map(|(i, w)| w.map(|w| (format!("w{}", i + 1), w)))
            .collect();
        let distributions = matches!(self.strategy, None | Some(FusionStrategy::Pointwise));
        let manifest = DumpManifest {
            architecture: self.architecture.clone(),
            strategy: self.strategy,
            stream_values: if distributions { "distribution" } else { "energy" }.into(),
            weights,
            tokens: self.tokens.clone(),
            unk_positions: self.unk_positions.clone(),
            target_position: self.target_position,
            steps: self.fused.len(),
            source_length: self.tokens.len(),
            files,
        };
        io::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }
}

pub fn dump_attention(checkpoint: &Checkpoint, sentence: &Sentence, out_dir: &Path) -> Result<DumpManifest> {
    attention_matrices(&checkpoint.model, &checkpoint.params, &checkpoint.vocab, sentence)?.write(out_dir)
}
