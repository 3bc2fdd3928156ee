//! Generator for a toy disambiguation corpus in which the sense of one
//! ambiguous noun is decided by a single nearby cue word.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{PosTag, SenseCorpus, Sentence, Split, Token};

pub const AMBIGUOUS: &str = "bank";
/// Sloping land beside water.
pub const SENSE_SHORE: &str = "1:17:01::";
/// Financial institution.
pub const SENSE_MONEY: &str = "1:14:00::";
pub const SHORE_CUES: [&str; 3] = ["river", "shore", "fishing"];
pub const MONEY_CUES: [&str; 3] = ["money", "loan", "deposit"];

const FILLER: [(PosTag, &[&str]); 5] = [
    (PosTag::Nn, &["man", "woman", "city", "house", "road", "day", "car", "school", "garden", "street"]),
    (PosTag::Vb, &["saw", "walked", "found", "liked", "visited", "left"]),
    (PosTag::Adj, &["old", "big", "quiet", "green", "small"]),
    (PosTag::Adv, &["often", "slowly", "really", "never"]),
    (PosTag::Other, &["the", "a", "of", "to", "and", "near", "with"]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// Sentences tagged train, dev and test.
    pub counts: [usize; 3],
    pub min_len: usize,
    pub max_len: usize,
    pub max_cue_distance: usize,
    /// How many of the cue words of each sense are used, 1 to 3.
    pub cues_per_sense: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            seed: 0,
            counts: [50, 0, 10],
            min_len: 8,
            max_len: 12,
            max_cue_distance: 3,
            cues_per_sense: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub corpus: SenseCorpus,
    /// Position of the ambiguous word in each sentence.
    pub targets: Vec<usize>,
    /// Position of the cue word in each sentence.
    pub cues: Vec<usize>,
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticCorpus {
    assert!(cfg.min_len >= 2 && cfg.min_len <= cfg.max_len, "bad sentence length range");
    assert!(cfg.max_cue_distance >= 1);
    assert!((1..=SHORE_CUES.len()).contains(&cfg.cues_per_sense), "cues_per_sense out of range");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let splits = [Split::Train, Split::Dev, Split::Test];
    let mut out = SyntheticCorpus {
        corpus: SenseCorpus::default(),
        targets: Vec::new(),
        cues: Vec::new(),
    };
    for (split, &count) in splits.iter().zip(&cfg.counts) {
        for _ in 0..count {
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let target = rng.random_range(0..len);
            let offsets: Vec<isize> = (-(cfg.max_cue_distance as isize)..=cfg.max_cue_distance as isize)
                .filter(|&d| d != 0 && (0..len as isize).contains(&(target as isize + d)))
                .collect();
            let cue = (target as isize + offsets.choose(&mut rng).unwrap()) as usize;
            let (sense, cues) = if rng.random_bool(0.5) {
                (SENSE_SHORE, &SHORE_CUES)
            } else {
                (SENSE_MONEY, &MONEY_CUES)
            };
            let cue_word = *cues[..cfg.cues_per_sense].choose(&mut rng).unwrap();
            let tokens = (0..len)
                .map(|i| {
                    if i == target {
                        Token::new(AMBIGUOUS, AMBIGUOUS, PosTag::Nn, Some(sense))
                    } else if i == cue {
                        Token::new(cue_word, cue_word, PosTag::Nn, None)
                    } else {
                        let (tag, words) = FILLER.choose(&mut rng).unwrap();
                        let w = *words.choose(&mut rng).unwrap();
                        Token::new(w, w, *tag, None)
                    }
                })
                .collect();
            out.corpus.sentences.push(Sentence {
                id: out.corpus.len(),
                doc: None,
                tokens,
                split: Some(*split),
            });
            out.targets.push(target);
            out.cues.push(cue);
        }
    }
    out
}

/// The sense decided by a cue word, if it is one.
pub fn cue_sense(word: &str) -> Option<&'static str> {
    if SHORE_CUES.contains(&word) {
        Some(SENSE_SHORE)
    } else if MONEY_CUES.contains(&word) {
        Some(SENSE_MONEY)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_sentence_is_decided_by_its_cue() {
        let s = generate(&SyntheticConfig::default());
        assert_eq!(s.corpus.len(), 60);
        assert_eq!(s.corpus.split(Split::Test).count(), 10);
        assert_eq!(s.corpus.split(Split::Dev).count(), 0);
        for ((sent, &t), &c) in s.corpus.sentences.iter().zip(&s.targets).zip(&s.cues) {
            assert_eq!(sent.targets().collect::<Vec<_>>(), vec![t]);
            assert!(t.abs_diff(c) <= 3 && t != c);
            let cues: Vec<_> = sent.tokens.iter().filter(|k| cue_sense(&k.surface).is_some()).collect();
            assert_eq!(cues.len(), 1);
            assert_eq!(cue_sense(&sent.tokens[c].surface), sent.tokens[t].sense.as_deref());
        }
    }

    #[test]
    fn seeded() {
        let a = generate(&SyntheticConfig::default());
        assert_eq!(a, generate(&SyntheticConfig::default()));
        let b = generate(&SyntheticConfig {
            seed: 1,
            ..Default::default()
        });
        assert_ne!(a, b);
    }
}
