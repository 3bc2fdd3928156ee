use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{SenseCorpus, Vocabulary};
use crate::error::{Error, Result};
use crate::io;

pub const INVENTORY_FILE: &str = "inventory.json";

/// Candidate senses of one lemma, most frequent first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LemmaSenses {
    /// Output-vocabulary indices.
    pub senses: Vec<usize>,
    /// Training counts, aligned with `senses`.
    pub counts: Vec<usize>,
}

/// Which output tokens are senses of which lemma, learned from training
/// data.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenseInventory {
    lemmas: BTreeMap<String, LemmaSenses>,
}

impl SenseInventory {
    pub fn build(train: &SenseCorpus, vocab: &Vocabulary) -> Self {
        let mut counts: BTreeMap<String, BTreeMap<usize, usize>> = BTreeMap::new();
        for s in &train.sentences {
            for t in &s.tokens {
                let Some(form) = t.sense_form() else { continue };
                if let Some(ix) = vocab.output.get(&form) {
                    *counts.entry(t.lemma.clone()).or_default().entry(ix).or_default() += 1;
                }
            }
        }
        let lemmas = counts
            .into_iter()
            .map(|(lemma, by_sense)| {
                let mut v: Vec<(usize, usize)> = by_sense.into_iter().collect();
                v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                let (senses, counts) = v.into_iter().unzip();
                (lemma, LemmaSenses { senses, counts })
            })
            .collect();
        SenseInventory { lemmas }
    }

    pub fn len(&self) -> usize {
        self.lemmas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lemmas.is_empty()
    }

    pub fn candidates(&self, lemma: &str) -> Option<&[usize]> {
        self.lemmas.get(lemma).map(|l| l.senses.as_slice())
    }

    pub fn most_frequent(&self, lemma: &str) -> Option<usize> {
        self.candidates(lemma).and_then(|c| c.first().copied())
    }

    pub fn lemmas(&self) -> impl Iterator<Item = (&str, &LemmaSenses)> {
        self.lemmas.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        io::write_json(&dir.join(INVENTORY_FILE), self)
    }

    /// Loads and checks every index against the output vocabulary size.
    pub fn load(dir: &Path, output_size: usize) -> Result<Self> {
        let path = dir.join(INVENTORY_FILE);
        let inv: SenseInventory = io::read_json(&path)?;
        for (lemma, l) in &inv.lemmas {
            if l.senses.is_empty() || l.senses.len() != l.counts.len() {
                return Err(Error::format(&path, format!("malformed entry for `{lemma}`")));
            }
            if let Some(&bad) = l.senses.iter().find(|&&i| i >= output_size) {
                return Err(Error::format(
                    &path,
                    format!("sense index {bad} of `{lemma}` exceeds output vocabulary size {output_size}"),
                ));
            }
        }
        Ok(inv)
    }
}

/// Candidates sorted by descending probability under a softmax restricted
/// to them. Ties keep inventory order.
pub fn rank_senses(log_probs: &[f64], candidates: &[usize]) -> Vec<(usize, f64)> {
    let scores: Vec<f64> = candidates.iter().map(|&c| log_probs[c]).collect();
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let mut ranked: Vec<(usize, f64)> = candidates
        .iter()
        .zip(&scores)
        .map(|(&c, &s)| (c, (s - max).exp() / z))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, parse_corpus};

    #[test]
    fn single_sense_wins_regardless_of_logits() {
        assert_eq!(rank_senses(&[0.0, -50.0, 3.0], &[1])[0], (1, 1.0));
    }

    #[test]
    fn two_senses_follow_logits() {
        let r = rank_senses(&[-2.0, -1.0, -0.5], &[0, 2]);
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![2, 0]);
    }

    #[test]
    fn built_from_training_counts() {
        let text = "bank\tbank\tnn\ta\n\nbank\tbank\tnn\tb\n\nbank\tbank\tnn\tb\n";
        let c = parse_corpus(text, "t").unwrap().0;
        let v = build_vocab(&c, 1);
        let inv = SenseInventory::build(&c, &v);
        let b = v.output.get("bank%b").unwrap();
        assert_eq!(inv.most_frequent("bank"), Some(b));
        assert_eq!(inv.candidates("bank").unwrap().len(), 2);
        assert_eq!(inv.candidates("river"), None);
        let dir = tempfile::tempdir().unwrap();
        inv.save(dir.path()).unwrap();
        assert_eq!(SenseInventory::load(dir.path(), v.output.len()).unwrap(), inv);
        assert!(SenseInventory::load(dir.path(), 3).is_err());
    }
}
