use std::collections::HashMap;
use std::path::Path;

use super::corpus::{PosTag, SenseCorpus};
use crate::error::{Error, Result};
use crate::io;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<s>", "<eos>", "<pad>", "<unk>"];

/// A bijection between tokens and indices, with the four special tokens at
/// indices 0 to 3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s);
        }
        v
    }
}

impl Vocab {
    /// Adds `token` if absent and returns its index.
    pub fn push(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn index_or_unk(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn from_tokens(tokens: Vec<String>, path: &Path) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::format(path, "vocabulary must start with <s>, <eos>, <pad>, <unk>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::format(path, format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, &self.tokens)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tokens(io::read_json(path)?, path)
    }
}

/// Source-word, POS and output vocabularies of one model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    pub words: Vocab,
    pub pos: Vocab,
    /// Source words plus every `lemma%sensekey` form seen in training.
    pub output: Vocab,
}

const WORDS_FILE: &str = "vocab.words.json";
const POS_FILE: &str = "vocab.pos.json";
const OUTPUT_FILE: &str = "vocab.output.json";

impl Vocabulary {
    pub fn pos_index(&self, tag: PosTag) -> usize {
        self.pos.get(tag.name()).expect("every POS tag is in the POS vocabulary")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.words.save(&dir.join(WORDS_FILE))?;
        self.pos.save(&dir.join(POS_FILE))?;
        self.output.save(&dir.join(OUTPUT_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let v = Vocabulary {
            words: Vocab::load(&dir.join(WORDS_FILE))?,
            pos: Vocab::load(&dir.join(POS_FILE))?,
            output: Vocab::load(&dir.join(OUTPUT_FILE))?,
        };
        for tag in PosTag::ALL {
            if v.pos.get(tag.name()).is_none() {
                return Err(Error::format(dir.join(POS_FILE), format!("missing POS tag `{tag}`")));
            }
        }
        Ok(v)
    }
}

/// Builds vocabularies from training sentences. Surface forms seen fewer than
/// `min_count` times map to `<unk>`; every observed sense form enters the
/// output vocabulary regardless of its count.
///
/// Entries after the specials are ordered by descending frequency, ties
/// broken lexicographically, so the result does not depend on sentence
/// order.
pub fn build_vocab(corpus: &SenseCorpus, min_count: usize) -> Vocabulary {
    let mut word_counts: HashMap<&str, usize> = HashMap::new();
    let mut sense_counts: HashMap<String, usize> = HashMap::new();
    for s in &corpus.sentences {
        for t in &s.tokens {
            *word_counts.entry(t.surface.as_str()).or_default() += 1;
            if let Some(form) = t.sense_form() {
                *sense_counts.entry(form).or_default() += 1;
            }
        }
    }
    fn ordered(mut v: Vec<(&str, usize)>) -> Vec<(&str, usize)> {
        v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        v
    }
    let words_sorted = ordered(
        word_counts
            .iter()
            .filter(|(_, &c)| c >= min_count.max(1))
            .map(|(w, &c)| (*w, c))
            .collect(),
    );
    let mut words = Vocab::default();
    for (w, _) in &words_sorted {
        words.push(w);
    }
    let mut output = words.clone();
    for (f, _) in ordered(sense_counts.iter().map(|(f, &c)| (f.as_str(), c)).collect()) {
        output.push(f);
    }
    let mut pos = Vocab::default();
    for tag in PosTag::ALL {
        pos.push(tag.name());
    }
    Vocabulary { words, pos, output }
}
