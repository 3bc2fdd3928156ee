//! Candidate ranking, F1 reports and attention export.

mod attention;
mod inventory;
mod report;

pub use attention::{attention_matrices, dump_attention, AttentionDump, DumpManifest, MANIFEST_FILE};
pub use inventory::{rank_senses, LemmaSenses, SenseInventory, INVENTORY_FILE};
pub use report::{score_f1, ClassScore, EvalReport, Prediction, REPORT_CLASSES};

use serde::{Deserialize, Serialize};

use crate::data::{corpus_instances, make_batches, ContextWindow, SenseCorpus, Vocabulary, UNK};
use crate::error::Result;
use crate::model::{DecodeMode, Dropout, Model};
use crate::tensor::{Graph, ParamStore};

/// What to do when the model cannot rank a target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backoff {
    /// Leave it unattempted.
    #[default]
    None,
    /// Predict the lemma's most frequent training sense when the target word
    /// itself is out of vocabulary.
    MostFrequent,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub window: ContextWindow,
    pub batch_size: usize,
    pub backoff: Backoff,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            window: ContextWindow::default(),
            batch_size: 32,
            backoff: Backoff::None,
        }
    }
}

/// Ranks the candidate senses of every sense-tagged token of `corpus`.
/// Predictions come back ordered by sentence and position.
pub fn predict(
    model: &Model,
    params: &ParamStore,
    vocab: &Vocabulary,
    inventory: &SenseInventory,
    corpus: &SenseCorpus,
    opts: &EvalOptions,
) -> Result<Vec<Prediction>> {
    let instances = corpus_instances(corpus, vocab, opts.window);
    let mut out = Vec::with_capacity(instances.len());
    if instances.is_empty() {
        return Ok(out);
    }
    let v = vocab.output.len();
    for batch in make_batches(&instances, opts.batch_size, None)? {
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, params, &batch, DecodeMode::TeacherForced, &mut Dropout::off(), false)?;
        let lp = g.value(fwd.log_probs).data();
        let t = fwd.steps;
        for (row, &k) in batch.order.iter().enumerate() {
            let inst = &instances[k];
            let at = (row * t + inst.target_position) * v;
            let gold_index = vocab.output.get(&inst.gold);
            let (predicted, gold_rank) = match inventory.candidates(&inst.lemma) {
                None => (None, None),
                Some(_) if opts.backoff == Backoff::MostFrequent && inst.source[inst.target_position] == UNK => {
                    let mfs = inventory.most_frequent(&inst.lemma);
                    (mfs, None)
                }
                Some(cands) => {
                    let ranked = rank_senses(&lp[at..at + v], cands);
                    let rank = gold_index.and_then(|gi| ranked.iter().position(|r| r.0 == gi)).map(|r| r + 1);
                    (Some(ranked[0].0), rank)
                }
            };
            out.push(Prediction {
                sentence_id: inst.sentence_id,
                position: inst.sentence_position,
                lemma: inst.lemma.clone(),
                pos: inst.pos_tag,
                gold: inst.gold.clone(),
                predicted: predicted.map(|i| vocab.output.token(i).expect("candidate in vocabulary").to_string()),
                gold_rank,
            });
        }
    }
    out.sort_by_key(|p| (p.sentence_id, p.position));
    Ok(out)
}

/// [`predict`] followed by [`score_f1`].
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    params: &ParamStore,
    vocab: &Vocabulary,
    inventory: &SenseInventory,
    corpus: &SenseCorpus,
    opts: &EvalOptions,
    train_name: &str,
    test_name: &str,
) -> Result<EvalReport> {
    let preds = predict(model, params, vocab, inventory, corpus, opts)?;
    score_f1(&preds, model.architecture().label(), train_name, test_name)
}
