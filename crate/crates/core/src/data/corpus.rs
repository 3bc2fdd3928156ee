use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coarse part-of-speech classes used for features and for per-class
/// reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosTag {
    Nn,
    Vb,
    Adj,
    Adv,
    Other,
}

impl PosTag {
    pub const ALL: [PosTag; 5] = [PosTag::Nn, PosTag::Vb, PosTag::Adj, PosTag::Adv, PosTag::Other];

    pub fn name(self) -> &'static str {
        match self {
            PosTag::Nn => "nn",
            PosTag::Vb => "vb",
            PosTag::Adj => "adj",
            PosTag::Adv => "adv",
            PosTag::Other => "other",
        }
    }

    /// Open-class tags; only these may carry a sense key.
    pub fn is_content(self) -> bool {
        self != PosTag::Other
    }

    /// Maps the tag spellings seen in common tagsets onto the coarse classes.
    fn lookup(s: &str) -> Option<PosTag> {
        let lower = s.to_ascii_lowercase();
        Some(match lower.as_str() {
            "nn" | "noun" | "n" | "nns" | "nnp" | "nnps" | "propn" => PosTag::Nn,
            "vb" | "verb" | "v" | "vbd" | "vbg" | "vbn" | "vbp" | "vbz" => PosTag::Vb,
            "adj" | "a" | "jj" | "jjr" | "jjs" => PosTag::Adj,
            "adv" | "r" | "rb" | "rbr" | "rbs" => PosTag::Adv,
            "other" | "x" => PosTag::Other,
            _ => return None,
        })
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PosTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PosTag::lookup(s).ok_or_else(|| Error::Config(format!("unknown POS tag `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub lemma: String,
    pub pos: PosTag,
    pub sense: Option<String>,
}

impl Token {
    pub fn new(surface: &str, lemma: &str, pos: PosTag, sense: Option<&str>) -> Self {
        Token {
            surface: surface.to_string(),
            lemma: lemma.to_string(),
            pos,
            sense: sense.map(str::to_string),
        }
    }

    /// The `lemma%sensekey` output token, for sense-tagged tokens.
    pub fn sense_form(&self) -> Option<String> {
        self.sense.as_ref().map(|s| sense_form(&self.lemma, s))
    }
}

pub fn sense_form(lemma: &str, sense: &str) -> String {
    format!("{lemma}%{sense}")
}

/// Splits a `lemma%sensekey` token. Returns `None` for plain tokens.
pub fn split_sense_form(token: &str) -> Option<(&str, &str)> {
    let (lemma, sense) = token.split_once('%')?;
    (!lemma.is_empty() && !sense.is_empty()).then_some((lemma, sense))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub id: usize,
    pub doc: Option<String>,
    pub tokens: Vec<Token>,
    pub split: Option<Split>,
}

impl Sentence {
    /// Positions of the sense-tagged tokens.
    pub fn targets(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.sense.is_some())
            .map(|(i, _)| i)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenseCorpus {
    pub sentences: Vec<Sentence>,
}

/// Something odd but recoverable in a corpus file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParseWarning {
    pub line: usize,
    pub message: String,
}

impl SenseCorpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sentence> {
        self.sentences.iter().filter(move |s| s.split == Some(split))
    }

    /// A corpus holding copies of the given sentences, renumbered from 0.
    pub fn subset<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> SenseCorpus {
        SenseCorpus {
            sentences: sentences
                .into_iter()
                .enumerate()
                .map(|(id, s)| Sentence { id, ..s.clone() })
                .collect(),
        }
    }

    /// Serializes back to the tab-separated corpus format.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let mut doc: Option<&str> = None;
        for (i, s) in self.sentences.iter().enumerate() {
            if s.doc.as_deref() != doc {
                if let Some(d) = s.doc.as_deref() {
                    if i > 0 {
                        out.push('\n');
                    }
                    let _ = writeln!(out, "# doc: {d}");
                }
                doc = s.doc.as_deref();
            } else if i > 0 {
                out.push('\n');
            }
            for t in &s.tokens {
                let _ = write!(out, "{}\t{}\t{}", t.surface, t.lemma, t.pos);
                if let Some(sense) = &t.sense {
                    let _ = write!(out, "\t{sense}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_tsv().as_bytes())
    }
}

/// Reads a corpus file. See [`parse_corpus`] for the format.
pub fn read_corpus(path: &Path) -> Result<(SenseCorpus, Vec<ParseWarning>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, &path.display().to_string())
}

/// Parses the tab-separated corpus format: one token per line as
/// `surface<TAB>lemma<TAB>pos[<TAB>sensekey]`, sentences separated by blank
/// lines, `#` starting a comment. A `# doc: NAME` comment starts a new
/// document.
///
/// Unknown POS tags become `other` and produce a warning. Lines with too few
/// or too many columns, and sense keys on non-content tokens, are errors.
pub fn parse_corpus(text: &str, source: &str) -> Result<(SenseCorpus, Vec<ParseWarning>)> {
    let mut corpus = SenseCorpus::default();
    let mut warnings = Vec::new();
    let mut current: Vec<Token> = Vec::new();
    let mut doc: Option<String> = None;
    let err = |line: usize, msg: String| Error::Parse {
        path: source.to_string(),
        line,
        msg,
    };

    let flush = |corpus: &mut SenseCorpus, current: &mut Vec<Token>, doc: &Option<String>| {
        if !current.is_empty() {
            corpus.sentences.push(Sentence {
                id: corpus.sentences.len(),
                doc: doc.clone(),
                tokens: std::mem::take(current),
                split: None,
            });
        }
    };

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut corpus, &mut current, &doc);
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(name) = comment.trim().strip_prefix("doc:") {
                flush(&mut corpus, &mut current, &doc);
                doc = Some(name.trim().to_string());
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 {
            return Err(err(
                lineno,
                format!(
                    "expected at least 3 tab-separated columns (surface, lemma, pos), found {}",
                    cols.len()
                ),
            ));
        }
        if cols.len() > 4 {
            return Err(err(lineno, format!("expected at most 4 columns, found {}", cols.len())));
        }
        let (surface, lemma) = (cols[0].trim(), cols[1].trim());
        if surface.is_empty() || lemma.is_empty() {
            return Err(err(lineno, "empty surface form or lemma".into()));
        }
        let pos = match PosTag::lookup(cols[2].trim()) {
            Some(p) => p,
            None => {
                let message = format!("unknown POS tag `{}`, using `other`", cols[2].trim());
                log::warn!("{source}:{lineno}: {message}");
                warnings.push(ParseWarning { line: lineno, message });
                PosTag::Other
            }
        };
        let sense = cols.get(3).map(|s| s.trim()).filter(|s| !s.is_empty());
        if let Some(key) = sense {
            if !pos.is_content() {
                return Err(err(
                    lineno,
                    format!("sense key `{key}` attached to non-content token `{surface}` ({pos})"),
                ));
            }
        }
        current.push(Token::new(surface, lemma, pos, sense));
    }
    flush(&mut corpus, &mut current, &doc);
    Ok((corpus, warnings))
}
