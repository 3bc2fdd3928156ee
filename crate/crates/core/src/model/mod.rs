//! The encoder-decoder architectures.

mod checkpoint;
pub mod config;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use config::{Architecture, ArchitectureConfig, ScorerKind};
pub use layers::{
    attend, convolve_bigrams, decode_step, embed_sequence, encode_stream, project_output, score_attention,
    DecoderHead, Dropout, GruCell, GruLayer, Scorer,
};

use crate::data::{Batch, Vocabulary, BOS, EOS};
use crate::error::{Error, Result};
use crate::fusion::{fuse, AttentionBundle, FusionInit, FusionStrategy, FusionWeights, Stream, StreamScores};
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSizes {
    pub words: usize,
    pub pos: usize,
    pub output: usize,
}

impl VocabSizes {
    pub fn of(vocab: &Vocabulary) -> Self {
        VocabSizes {
            words: vocab.words.len(),
            pos: vocab.pos.len(),
            output: vocab.output.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Feeds the gold previous token; runs `S + 1` steps.
    TeacherForced,
    /// Feeds the previous prediction until every row emits `<eos>` or
    /// `max_steps` (default `S + 1`) is reached.
    Greedy { max_steps: Option<usize> },
}

pub struct ForwardOutput {
    /// `[B×T×V_out]` log-probabilities.
    pub log_probs: Var,
    pub steps: usize,
    /// One bundle per decoder step when recording was requested.
    pub attention: Vec<AttentionBundle>,
    /// `[B×T]` greedy predictions.
    pub predictions: Option<Vec<usize>>,
}

/// Parameter handles of one architecture instance. The values live in a
/// [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ArchitectureConfig,
    pub sizes: VocabSizes,
    pub embed_word: ParamId,
    pub embed_pos: Option<ParamId>,
    pub embed_output: ParamId,
    pub conv: Option<ParamId>,
    /// Shared by every stream.
    pub encoder: Vec<GruLayer>,
    pub decoder: Vec<GruCell>,
    pub scorers: Vec<(Stream, Scorer)>,
    pub fusion: Option<FusionWeights>,
    pub head: DecoderHead,
}

impl Model {
    /// Registers freshly initialized parameters for `config`.
    pub fn new(config: &ArchitectureConfig, sizes: VocabSizes, seed: u64) -> Result<(Model, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (e, h) = (config.embed_dim, config.hidden_dim);
        let streams = config.streams();
        let enc = ParamGroup::Encoder;
        let dec = ParamGroup::Decoder;

        let embed_word = params.insert("embed.word", enc, layers::normal(&mut rng, &[sizes.words, e]))?;
        let embed_pos = if streams.contains(&Stream::Pos) {
            Some(params.insert("embed.pos", enc, layers::normal(&mut rng, &[sizes.pos, e]))?)
        } else {
            None
        };
        let conv = if streams.contains(&Stream::Bigram) {
            Some(params.insert("conv.kernel", enc, layers::uniform(&mut rng, &[2, e], 1.0 / 2f64.sqrt()))?)
        } else {
            None
        };
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for l in 0..config.encoder_layers {
            let input = if l == 0 { e } else { h };
            let forward = GruCell::register(&mut params, &format!("encoder.l{l}.fwd"), enc, input, h, &mut rng)?;
            let backward = if config.bidirectional {
                Some(GruCell::register(&mut params, &format!("encoder.l{l}.bwd"), enc, input, h, &mut rng)?)
            } else {
                None
            };
            encoder.push(GruLayer { forward, backward });
        }

        let embed_output = params.insert("embed.output", dec, layers::normal(&mut rng, &[sizes.output, e]))?;
        let mut decoder = Vec::with_capacity(config.decoder_layers);
        for l in 0..config.decoder_layers {
            let input = if l == 0 { e } else { h };
            decoder.push(GruCell::register(&mut params, &format!("decoder.l{l}"), dec, input, h, &mut rng)?);
        }
        let concat_dim = config.concat_dim.unwrap_or(h);
        let mut scorers = Vec::with_capacity(streams.len());
        for &s in streams {
            let scorer = Scorer::register(config.scorer, &mut params, &format!("attn.{s}"), h, concat_dim, &mut rng)?;
            scorers.push((s, scorer));
        }
        let fusion = if config.effective_fusion() == Some(FusionStrategy::ScalarWeighted) {
            let mut slots = Vec::new();
            for &s in streams {
                let w = match config.fusion_init {
                    FusionInit::Constant { value } => value,
                    FusionInit::Uniform { bound } => {
                        use rand::Rng;
                        rng.random_range(-bound..=bound)
                    }
                };
                slots.push((s, params.insert(FusionWeights::param_name(s), dec, Tensor::vector(vec![w]))?));
            }
            Some(FusionWeights::new(slots))
        } else {
            None
        };
        let head = DecoderHead::register(&mut params, h, sizes.output, &mut rng)?;
        if let Some(r) = config.init_range {
            let fusion_ids: Vec<ParamId> = fusion.iter().flat_map(|f| f.streams().filter_map(|s| f.param(s))).collect();
            let ids: Vec<ParamId> = params.ids().filter(|id| !fusion_ids.contains(id)).collect();
            for id in ids {
                let shape = params.value(id).shape().to_vec();
                *params.value_mut(id) = layers::uniform(&mut rng, &shape, r);
            }
        }
        Ok((
            Model {
                config: config.clone(),
                sizes,
                embed_word,
                embed_pos,
                embed_output,
                conv,
                encoder,
                decoder,
                scorers,
                fusion,
                head,
            },
            params,
        ))
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    /// Current `(w1, w2, w3)`; `None` where the architecture has no weight.
    pub fn fusion_weights(&self, params: &ParamStore) -> [Option<f64>; 3] {
        self.fusion.as_ref().map(|f| f.values(params)).unwrap_or([None; 3])
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        batch: &Batch,
        mode: DecodeMode,
        dropout: &mut Dropout,
        record_attention: bool,
    ) -> Result<ForwardOutput> {
        let (b, s) = (batch.size, batch.seq_len);
        let mask = if batch.mask.iter().all(|&m| m) { None } else { Some(batch.mask.as_slice()) };

        // Word embeddings with <s> prepended; the word stream drops the
        // first column and the bigram stream convolves over all of it.
        let mut padded = Vec::with_capacity(b * (s + 1));
        for row in 0..b {
            padded.push(BOS);
            padded.extend_from_slice(&batch.source[row * s..(row + 1) * s]);
        }
        let word_table = g.param(params, self.embed_word);
        let emb = embed_sequence(g, word_table, &padded, b, s + 1)?;
        let emb = dropout.apply(g, emb)?;

        let mut encoded = Vec::with_capacity(self.scorers.len());
        for &(stream, ref scorer) in &self.scorers {
            let x = match stream {
                Stream::Word => g.slice(emb, 1, 1, s)?,
                Stream::Pos => {
                    let id = self.embed_pos.expect("POS stream has a table");
                    let table = g.param(params, id);
                    let x = embed_sequence(g, table, &batch.pos, b, s)?;
                    dropout.apply(g, x)?
                }
                Stream::Bigram => {
                    let k = g.param(params, self.conv.expect("bigram stream has a kernel"));
                    convolve_bigrams(g, emb, k)?
                }
            };
            let (out, fin) = encode_stream(g, params, &self.encoder, x, mask, dropout)?;
            let keys = scorer.keys(g, params, out)?;
            encoded.push((stream, scorer, out, fin, keys));
        }
        let h_enc = encoded[0].3;
        let mut context_source = encoded[0].2;
        for e in &encoded[1..] {
            context_source = g.add(context_source, e.2)?;
        }

        let out_table = g.param(params, self.embed_output);
        let (steps, teacher) = match mode {
            DecodeMode::TeacherForced => {
                let t = s + 1;
                let mut inputs = Vec::with_capacity(b * t);
                for row in 0..b {
                    inputs.push(BOS);
                    inputs.extend_from_slice(&batch.target[row * t..row * t + s]);
                }
                let x = embed_sequence(g, out_table, &inputs, b, t)?;
                (t, Some(dropout.apply(g, x)?))
            }
            DecodeMode::Greedy { max_steps } => (max_steps.unwrap_or(s + 1), None),
        };
        if steps == 0 {
            return Err(Error::Usage("decoding needs at least one step".into()));
        }

        let strategy = self.config.effective_fusion();
        let mut state = vec![h_enc; self.decoder.len()];
        let mut prev = vec![BOS; b];
        let mut finished = vec![false; b];
        let mut predictions = Vec::new();
        let mut step_log_probs = Vec::with_capacity(steps);
        let mut attention = Vec::new();
        for j in 0..steps {
            let mut x = match teacher {
                Some(all) => g.select(all, 1, j)?,
                None => {
                    let x = g.gather(out_table, &prev, &[b])?;
                    dropout.apply(g, x)?
                }
            };
            for (k, cell) in self.decoder.iter().enumerate() {
                state[k] = cell.step(g, params, x, state[k])?;
                x = if k + 1 < self.decoder.len() { dropout.apply(g, state[k])? } else { state[k] };
            }
            let query = x;
            let mut energies = Vec::with_capacity(encoded.len());
            for (stream, scorer, _, _, keys) in &encoded {
                energies.push((*stream, scorer.energies(g, params, *keys, query)?));
            }
            let (fused, pre) = match strategy {
                None => {
                    let e = energies[0].1;
                    let a = match mask {
                        Some(m) => g.masked_softmax(e, 1, m)?,
                        None => g.softmax(e, 1)?,
                    };
                    (a, energies.clone())
                }
                Some(strategy) => fuse(
                    g,
                    strategy,
                    &StreamScores { streams: &energies, mask },
                    self.fusion.as_ref().map(|f| (f, params)),
                    self.config.local_gate_per_vector,
                )?,
            };
            let context = attend(g, fused, context_source)?;
            let lp = project_output(g, params, &self.head, query, context)?;
            step_log_probs.push(lp);
            if record_attention {
                attention.push(AttentionBundle {
                    step: j,
                    strategy,
                    streams: pre.iter().map(|(st, v)| (*st, g.value(*v).clone())).collect(),
                    fused: g.value(fused).clone(),
                });
            }
            if teacher.is_none() {
                let v = self.sizes.output;
                let lpv = g.value(lp).data();
                for row in 0..b {
                    let r = &lpv[row * v..(row + 1) * v];
                    prev[row] = argmax(r);
                    finished[row] |= prev[row] == EOS;
                }
                predictions.push(prev.clone());
                if finished.iter().all(|&f| f) {
                    break;
                }
            }
        }
        let t = step_log_probs.len();
        let log_probs = g.stack(&step_log_probs, 1)?;
        let predictions = (teacher.is_none()).then(|| {
            let mut flat = vec![0; b * t];
            for (j, p) in predictions.iter().enumerate() {
                for row in 0..b {
                    flat[row * t + j] = p[row];
                }
            }
            flat
        });
        Ok(ForwardOutput {
            log_probs,
            steps: t,
            attention,
            predictions,
        })
    }
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
