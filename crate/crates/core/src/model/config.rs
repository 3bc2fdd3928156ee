use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionInit, FusionStrategy, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "seq2seq")]
    Seq2Seq,
    #[serde(rename = "seq2seq+conv")]
    Seq2SeqConv,
    #[serde(rename = "seq2seq+pos-pointwise")]
    Seq2SeqPosPointwise,
    #[serde(rename = "seq2seq+pos-weighted")]
    Seq2SeqPosWeighted,
    #[serde(rename = "seq2seq+conv+pos-weighted")]
    Seq2SeqConvPosWeighted,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Architecture::Seq2Seq,
        Architecture::Seq2SeqConv,
        Architecture::Seq2SeqPosPointwise,
        Architecture::Seq2SeqPosWeighted,
        Architecture::Seq2SeqConvPosWeighted,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Seq2Seq => "seq2seq",
            Architecture::Seq2SeqConv => "seq2seq+conv",
            Architecture::Seq2SeqPosPointwise => "seq2seq+pos-pointwise",
            Architecture::Seq2SeqPosWeighted => "seq2seq+pos-weighted",
            Architecture::Seq2SeqConvPosWeighted => "seq2seq+conv+pos-weighted",
        }
    }

    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Architecture::Seq2Seq => "Seq2Seq",
            Architecture::Seq2SeqConv => "Seq2Seq + conv (bigrams)",
            Architecture::Seq2SeqPosPointwise => "Seq2Seq + POS (point-wise multiply)",
            Architecture::Seq2SeqPosWeighted => "Seq2Seq + POS (weighting)",
            Architecture::Seq2SeqConvPosWeighted => "Seq2Seq + conv + POS (weighting)",
        }
    }

    /// Feature streams fed to the encoder. The first one initializes the
    /// decoder.
    pub fn streams(self) -> &'static [Stream] {
        match self {
            Architecture::Seq2Seq => &[Stream::Word],
            Architecture::Seq2SeqConv => &[Stream::Bigram],
            Architecture::Seq2SeqPosPointwise | Architecture::Seq2SeqPosWeighted => &[Stream::Word, Stream::Pos],
            Architecture::Seq2SeqConvPosWeighted => &[Stream::Word, Stream::Pos, Stream::Bigram],
        }
    }

    pub fn default_fusion(self) -> Option<FusionStrategy> {
        match self {
            Architecture::Seq2Seq | Architecture::Seq2SeqConv => None,
            Architecture::Seq2SeqPosPointwise => Some(FusionStrategy::Pointwise),
            Architecture::Seq2SeqPosWeighted | Architecture::Seq2SeqConvPosWeighted => {
                Some(FusionStrategy::ScalarWeighted)
            }
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!("unknown architecture `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    #[default]
    Dot,
    General,
    Concat,
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(ScorerKind::Dot),
            "general" | "linear" => Ok(ScorerKind::General),
            "concat" => Ok(ScorerKind::Concat),
            _ => Err(Error::Config(format!("unknown attention scorer `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub architecture: Architecture,
    /// Overrides the architecture's own fusion strategy.
    pub fusion: Option<FusionStrategy>,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub bidirectional: bool,
    pub scorer: ScorerKind,
    /// Width of the concat scorer's hidden layer; defaults to `hidden_dim`.
    pub concat_dim: Option<usize>,
    pub fusion_init: FusionInit,
    /// One sigmoid gate per attention vector instead of per element.
    pub local_gate_per_vector: bool,
    /// Draw every weight except the fusion scalars from
    /// `uniform(-init_range, init_range)` instead of the per-layer defaults.
    pub init_range: Option<f64>,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            architecture: Architecture::Seq2SeqConvPosWeighted,
            fusion: None,
            embed_dim: 100,
            hidden_dim: 100,
            encoder_layers: 2,
            decoder_layers: 2,
            bidirectional: true,
            scorer: ScorerKind::Dot,
            concat_dim: None,
            fusion_init: FusionInit::default(),
            local_gate_per_vector: false,
            init_range: None,
        }
    }
}

impl ArchitectureConfig {
    /// The tiny configuration used by the gradient checks.
    pub fn micro(architecture: Architecture) -> Self {
        ArchitectureConfig {
            architecture,
            embed_dim: 4,
            hidden_dim: 5,
            ..Default::default()
        }
    }

    pub fn streams(&self) -> &'static [Stream] {
        self.architecture.streams()
    }

    /// The strategy actually used, `None` for single-stream architectures.
    pub fn effective_fusion(&self) -> Option<FusionStrategy> {
        if self.streams().len() < 2 {
            return None;
        }
        self.fusion.or(self.architecture.default_fusion())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if let Some(r) = self.init_range {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::Config("init_range must be positive".into()));
            }
        }
        if self.concat_dim == Some(0) {
            return Err(Error::Config("concat_dim must be positive".into()));
        }
        if self.effective_fusion() == Some(FusionStrategy::Pointwise) && self.streams() != [Stream::Word, Stream::Pos] {
            return Err(Error::Config(format!(
                "point-wise fusion needs exactly the word and POS streams; `{}` has {}",
                self.architecture,
                self.streams().len()
            )));
        }
        match self.fusion_init {
            FusionInit::Constant { value } if !value.is_finite() => {
                Err(Error::Config("fusion_init value must be finite".into()))
            }
            FusionInit::Uniform { bound } if !(bound.is_finite() && bound > 0.0) => {
                Err(Error::Config("fusion_init bound must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}
