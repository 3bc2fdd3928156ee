use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{SenseCorpus, Split};
use crate::error::{Error, Result};
use crate::io;

pub const DEFAULT_RATIOS: [f64; 3] = [0.8, 0.1, 0.1];

/// Sentence ids assigned to each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    /// Tags the sentences of `corpus` according to the manifest.
    pub fn apply(&self, corpus: &mut SenseCorpus) -> Result<()> {
        let mut tag = vec![None; corpus.len()];
        for (ids, split) in [(&self.train, Split::Train), (&self.dev, Split::Dev), (&self.test, Split::Test)] {
            for &id in ids {
                let slot = tag
                    .get_mut(id)
                    .ok_or_else(|| Error::Config(format!("split manifest names sentence {id}, corpus has {}", corpus.len())))?;
                if slot.is_some() {
                    return Err(Error::Config(format!("sentence {id} is in two splits")));
                }
                *slot = Some(split);
            }
        }
        for (s, t) in corpus.sentences.iter_mut().zip(tag) {
            s.split = t;
        }
        Ok(())
    }
}

/// Randomly assigns whole sentences to train/dev/test. Sentence `id`s are
/// expected to be their corpus positions.
pub fn split_corpus(corpus: &mut SenseCorpus, ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || ratios.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    let n = corpus.len();
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((ratios[0] / total) * n as f64).round() as usize;
    let n_dev = (((ratios[1] / total) * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let sorted = |v: &[usize]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        v
    };
    let manifest = SplitManifest {
        seed,
        ratios,
        train: sorted(&ids[..n_train]),
        dev: sorted(&ids[n_train..n_train + n_dev]),
        test: sorted(&ids[n_train + n_dev..]),
    };
    manifest.apply(corpus)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::{PosTag, Sentence, Token};

    fn corpus(n: usize) -> SenseCorpus {
        SenseCorpus {
            sentences: (0..n)
                .map(|id| Sentence {
                    id,
                    doc: None,
                    tokens: vec![Token::new("w", "w", PosTag::Other, None)],
                    split: None,
                })
                .collect(),
        }
    }

    #[test]
    fn sizes_follow_ratios() {
        let mut c = corpus(50);
        let m = split_corpus(&mut c, DEFAULT_RATIOS, 1).unwrap();
        assert_eq!((m.train.len(), m.dev.len(), m.test.len()), (40, 5, 5));
        assert_eq!(c.split(Split::Dev).count(), 5);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = corpus(20);
        let m = split_corpus(&mut c, DEFAULT_RATIOS, 9).unwrap();
        m.save(&dir.path().join("split.json")).unwrap();
        let loaded = SplitManifest::load(&dir.path().join("split.json")).unwrap();
        assert_eq!(loaded, m);
        let mut fresh = corpus(20);
        loaded.apply(&mut fresh).unwrap();
        assert_eq!(fresh, c);
    }

    #[test]
    fn rejects_overlap() {
        let m = SplitManifest {
            seed: 0,
            ratios: DEFAULT_RATIOS,
            train: vec![0, 1],
            dev: vec![1],
            test: vec![],
        };
        assert!(m.apply(&mut corpus(3)).is_err());
    }
}
