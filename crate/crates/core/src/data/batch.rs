use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{PosTag, SenseCorpus, Sentence};
use super::vocab::{Vocabulary, EOS, PAD, UNK};
use crate::error::{Error, Result};

/// How much of a sentence around its target word the model sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum ContextWindow {
    /// Up to `each_side` tokens left and right of the target.
    AroundTarget { each_side: usize },
    /// At most `max` tokens, positioned so the target is included.
    MaxLength { max: usize },
}

impl Default for ContextWindow {
    fn default() -> Self {
        ContextWindow::AroundTarget { each_side: 25 }
    }
}

/// Token range kept for a sentence of `len` tokens whose target sits at
/// `target`.
pub fn window_bounds(len: usize, target: usize, window: ContextWindow) -> Range<usize> {
    assert!(target < len, "target {target} outside sentence of length {len}");
    match window {
        ContextWindow::AroundTarget { each_side } => {
            target.saturating_sub(each_side)..(target + each_side + 1).min(len)
        }
        ContextWindow::MaxLength { max } => {
            let max = max.max(1);
            if len <= max {
                return 0..len;
            }
            let start = target.saturating_sub(max / 2).min(len - max);
            start..start + max
        }
    }
}

/// One training or evaluation sequence: a windowed sentence with a single
/// sense-tagged target.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub sentence_id: usize,
    /// Position of the target in the original sentence.
    pub sentence_position: usize,
    pub tokens: Vec<String>,
    pub source: Vec<usize>,
    pub pos: Vec<usize>,
    /// Output-vocabulary indices; equals `source` except at the target.
    pub target: Vec<usize>,
    /// Position of the target inside the window.
    pub target_position: usize,
    pub lemma: String,
    pub gold: String,
    pub pos_tag: PosTag,
}

impl Instance {
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Whether the gold sense form is in the output vocabulary.
    pub fn gold_known(&self) -> bool {
        self.target[self.target_position] != UNK
    }
}

/// Builds one instance per sense-tagged token of `sentence`.
pub fn sentence_instances(
    sentence: &Sentence,
    vocab: &Vocabulary,
    window: ContextWindow,
) -> Vec<Instance> {
    sentence
        .targets()
        .map(|t| {
            let range = window_bounds(sentence.tokens.len(), t, window);
            let toks = &sentence.tokens[range.clone()];
            let source: Vec<usize> = toks.iter().map(|k| vocab.words.index_or_unk(&k.surface)).collect();
            let pos = toks.iter().map(|k| vocab.pos_index(k.pos)).collect();
            let target_position = t - range.start;
            let mut target = source.clone();
            let tok = &sentence.tokens[t];
            let gold = tok.sense_form().expect("targets carry a sense");
            target[target_position] = vocab.output.index_or_unk(&gold);
            Instance {
                sentence_id: sentence.id,
                sentence_position: t,
                tokens: toks.iter().map(|k| k.surface.clone()).collect(),
                source,
                pos,
                target,
                target_position,
                lemma: tok.lemma.clone(),
                gold,
                pos_tag: tok.pos,
            }
        })
        .collect()
}

pub fn corpus_instances(corpus: &SenseCorpus, vocab: &Vocabulary, window: ContextWindow) -> Vec<Instance> {
    corpus
        .sentences
        .iter()
        .flat_map(|s| sentence_instances(s, vocab, window))
        .collect()
}

/// Padded index matrices for a group of instances, rows sorted by
/// descending length.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    /// Longest source length S.
    pub seq_len: usize,
    /// `[B×S]`, padded with `<pad>`.
    pub source: Vec<usize>,
    /// `[B×S]`.
    pub pos: Vec<usize>,
    /// `[B×(S+1)]`: target tokens, then `<eos>`, then `<pad>`.
    pub target: Vec<usize>,
    pub lengths: Vec<usize>,
    pub target_positions: Vec<usize>,
    /// `[B×S]`, true on real tokens.
    pub mask: Vec<bool>,
    /// `[B×(S+1)]`, true on real target tokens and `<eos>`.
    pub target_mask: Vec<bool>,
    /// Index of each row's instance in the slice given to [`make_batch`].
    pub order: Vec<usize>,
}

impl Batch {
    pub fn target_steps(&self) -> usize {
        self.seq_len + 1
    }
}

pub fn make_batch(instances: &[&Instance]) -> Result<Batch> {
    if instances.is_empty() {
        return Err(Error::Usage("cannot build a batch from zero sentences".into()));
    }
    if let Some(i) = instances.iter().find(|i| i.is_empty()) {
        return Err(Error::Usage(format!("sentence {} is empty", i.sentence_id)));
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| instances[b].len().cmp(&instances[a].len()));
    let b = instances.len();
    let s = instances[order[0]].len();
    let mut batch = Batch {
        size: b,
        seq_len: s,
        source: vec![PAD; b * s],
        pos: vec![PAD; b * s],
        target: vec![PAD; b * (s + 1)],
        lengths: Vec::with_capacity(b),
        target_positions: Vec::with_capacity(b),
        mask: vec![false; b * s],
        target_mask: vec![false; b * (s + 1)],
        order: order.clone(),
    };
    for (row, &k) in order.iter().enumerate() {
        let inst = instances[k];
        let n = inst.len();
        batch.source[row * s..row * s + n].copy_from_slice(&inst.source);
        batch.pos[row * s..row * s + n].copy_from_slice(&inst.pos);
        batch.mask[row * s..row * s + n].fill(true);
        let t = row * (s + 1);
        batch.target[t..t + n].copy_from_slice(&inst.target);
        batch.target[t + n] = EOS;
        batch.target_mask[t..t + n + 1].fill(true);
        batch.lengths.push(n);
        batch.target_positions.push(inst.target_position);
    }
    Ok(batch)
}

/// Splits instance indices into groups of `batch_size`, shuffled when a
/// seed is given.
pub fn batch_indices(n: usize, batch_size: usize, shuffle: Option<u64>) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn make_batches(instances: &[Instance], batch_size: usize, shuffle: Option<u64>) -> Result<Vec<Batch>> {
    batch_indices(instances.len(), batch_size, shuffle)
        .into_iter()
        .map(|group| {
            let refs: Vec<&Instance> = group.iter().map(|&i| &instances[i]).collect();
            let mut batch = make_batch(&refs)?;
            for o in &mut batch.order {
                *o = group[*o];
            }
            Ok(batch)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::parse_corpus;
    use crate::data::vocab::build_vocab;

    fn corpus() -> SenseCorpus {
        let text = "the\tthe\tother\nbank\tbank\tnn\t1:14:00::\nlends\tlend\tvb\n\n\
                    we\twe\tother\nfished\tfish\tvb\tx\nby\tby\tother\nthe\tthe\tother\nbank\tbank\tnn\t1:17:01::\n";
        parse_corpus(text, "t").unwrap().0
    }

    #[test]
    fn window_arithmetic() {
        let w = ContextWindow::default();
        assert_eq!(window_bounds(60, 40, w), 15..60);
        assert_eq!(window_bounds(10, 3, w), 0..10);
        assert_eq!(window_bounds(100, 50, w), 25..76);
        let m = ContextWindow::MaxLength { max: 50 };
        assert_eq!(window_bounds(60, 40, m), 10..60);
        assert_eq!(window_bounds(60, 5, m), 0..50);
    }

    #[test]
    fn one_instance_per_target() {
        let c = corpus();
        let v = build_vocab(&c, 1);
        let inst = corpus_instances(&c, &v, ContextWindow::default());
        assert_eq!(inst.len(), 3);
        assert_eq!(inst[1].target_position, 1);
        assert_eq!(inst[2].target_position, 4);
        for i in &inst {
            for j in 0..i.len() {
                if j != i.target_position {
                    assert_eq!(i.source[j], i.target[j]);
                }
            }
            assert_eq!(v.output.token(i.target[i.target_position]), Some(i.gold.as_str()));
        }
    }

    #[test]
    fn single_sentence_has_no_padding() {
        let c = corpus();
        let v = build_vocab(&c, 1);
        let inst = corpus_instances(&c, &v, ContextWindow::default());
        let b = make_batch(&[&inst[0]]).unwrap();
        assert_eq!(b.seq_len, 3);
        assert!(b.mask.iter().all(|&m| m));
        assert_eq!(b.target[3], EOS);
    }

    #[test]
    fn shorter_rows_are_padded_and_sorted_last() {
        let c = corpus();
        let v = build_vocab(&c, 1);
        let inst = corpus_instances(&c, &v, ContextWindow::default());
        let b = make_batch(&[&inst[0], &inst[2]]).unwrap();
        assert_eq!(b.seq_len, 5);
        assert_eq!(b.lengths, vec![5, 3]);
        assert_eq!(b.order, vec![1, 0]);
        assert_eq!(b.mask[5..].iter().filter(|&&m| !m).count(), 2);
        assert_eq!(&b.source[8..10], &[PAD, PAD]);
        assert_eq!(&b.target[6..12], &[inst[0].target[0], inst[0].target[1], inst[0].target[2], EOS, PAD, PAD]);
        assert_eq!(b.target_mask[6..12], [true, true, true, true, false, false]);
    }

    #[test]
    fn empty_batch_is_usage_error() {
        assert!(matches!(make_batch(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn shuffled_batching_is_deterministic() {
        assert_eq!(batch_indices(10, 3, Some(4)), batch_indices(10, 3, Some(4)));
        assert_ne!(batch_indices(10, 10, Some(4)), batch_indices(10, 10, None));
        let all: usize = batch_indices(10, 3, Some(4)).iter().map(Vec::len).sum();
        assert_eq!(all, 10);
    }
}
