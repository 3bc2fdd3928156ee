//! Fusing per-feature attention vectors into one distribution over source
//! positions.
//!
//! Each active feature stream (words, POS tags, bigrams) scores the encoder
//! positions against the decoder state. The combiners below turn those
//! per-stream vectors into the single distribution that weights the context:
//!
//! * [`combine_pointwise`]: `softmax(A_w ⊙ A_p)` over two already normalized
//!   distributions.
//! * [`combine_weighted`]: `softmax(Σ wᵢ Aᵢ)` with learned scalars `wᵢ`.
//! * [`combine_local_gate`]: `softmax(Σ sigmoid(Aᵢ) ⊙ Aᵢ)`.
//! * [`combine_global_gate`]: a softmax across streams at every position,
//!   the per-position maximum of that, then a softmax across positions.
//!
//! Every combiner takes an optional mask over `[B×S]`; masked positions get
//! exactly zero probability.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// A feature stream that gets its own attention vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Word,
    Pos,
    Bigram,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Word, Stream::Pos, Stream::Bigram];

    pub fn name(self) -> &'static str {
        match self {
            Stream::Word => "word",
            Stream::Pos => "pos",
            Stream::Bigram => "bigram",
        }
    }

    /// Position of this stream's scalar in `(w1, w2, w3)`.
    pub fn weight_slot(self) -> usize {
        match self {
            Stream::Word => 0,
            Stream::Pos => 1,
            Stream::Bigram => 2,
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    Pointwise,
    ScalarWeighted,
    LocalGate,
    GlobalGate,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::Pointwise,
        FusionStrategy::ScalarWeighted,
        FusionStrategy::LocalGate,
        FusionStrategy::GlobalGate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Pointwise => "pointwise",
            FusionStrategy::ScalarWeighted => "scalar-weighted",
            FusionStrategy::LocalGate => "local-gate",
            FusionStrategy::GlobalGate => "global-gate",
        }
    }

    /// Whether the per-stream inputs are softmax-normalized before fusion.
    /// Only the point-wise product consumes distributions; the others take
    /// raw attention energies and end in their own softmax.
    pub fn takes_distributions(self) -> bool {
        self == FusionStrategy::Pointwise
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion strategy `{s}`")))
    }
}

/// How the learned stream scalars start out.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum FusionInit {
    /// Every scalar starts at the same constant.
    Constant { value: f64 },
    /// Independent draws from `uniform(-bound, bound)`.
    Uniform { bound: f64 },
}

impl Default for FusionInit {
    fn default() -> Self {
        FusionInit::Constant { value: 1.0 }
    }
}

/// The learned scalars `(w1, w2, w3)` of the weighted combiner, one per
/// active stream.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    slots: Vec<(Stream, ParamId)>,
}

impl FusionWeights {
    pub(crate) fn new(slots: Vec<(Stream, ParamId)>) -> Self {
        FusionWeights { slots }
    }

    pub fn param_name(stream: Stream) -> String {
        format!("fusion.w{}", stream.weight_slot() + 1)
    }

    pub fn param(&self, stream: Stream) -> Option<ParamId> {
        self.slots.iter().find(|(s, _)| *s == stream).map(|(_, id)| *id)
    }

    pub fn streams(&self) -> impl Iterator<Item = Stream> + '_ {
        self.slots.iter().map(|(s, _)| *s)
    }

    /// `(w1, w2, w3)`, `None` for streams the architecture does not use.
    pub fn values(&self, params: &ParamStore) -> [Option<f64>; 3] {
        let mut out = [None; 3];
        for &(s, id) in &self.slots {
            out[s.weight_slot()] = params.value(id).item();
        }
        out
    }
}

/// Attention at one decoder step: the per-stream vectors as they entered
/// fusion and the fused distribution, each `[B×S]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionBundle {
    pub step: usize,
    /// `None` when a single stream makes fusion a plain softmax.
    pub strategy: Option<FusionStrategy>,
    pub streams: Vec<(Stream, Tensor)>,
    pub fused: Tensor,
}

impl AttentionBundle {
    pub fn stream(&self, s: Stream) -> Option<&Tensor> {
        self.streams.iter().find(|(k, _)| *k == s).map(|(_, t)| t)
    }
}

fn check_same(g: &Graph, vars: &[Var], op: &'static str) -> Result<()> {
    let first = g.shape(vars[0]);
    if first.len() != 2 {
        return Err(Error::shape(op, format!("attention vectors must be [B×S], got {first:?}")));
    }
    for &v in &vars[1..] {
        if g.shape(v) != first {
            return Err(Error::Dimension {
                op,
                lhs: first.to_vec(),
                rhs: g.shape(v).to_vec(),
            });
        }
    }
    Ok(())
}

fn softmax_positions(g: &mut Graph, x: Var, mask: Option<&[bool]>) -> Result<Var> {
    match mask {
        Some(m) => g.masked_softmax(x, 1, m),
        None => g.softmax(x, 1),
    }
}

/// `softmax(A_w ⊙ A_p)`; both inputs are distributions over positions.
pub fn combine_pointwise(g: &mut Graph, a_w: Var, a_p: Var, mask: Option<&[bool]>) -> Result<Var> {
    check_same(g, &[a_w, a_p], "combine_pointwise")?;
    let prod = g.mul(a_w, a_p)?;
    softmax_positions(g, prod, mask)
}

/// `softmax(Σ wᵢ Aᵢ)` over the streams present; each weight is a one-element
/// node so its gradient flows back to the scalar.
pub fn combine_weighted(g: &mut Graph, terms: &[(Var, Var)], mask: Option<&[bool]>) -> Result<Var> {
    if terms.is_empty() {
        return Err(Error::Config("weighted fusion needs at least one stream".into()));
    }
    let vecs: Vec<Var> = terms.iter().map(|t| t.0).collect();
    check_same(g, &vecs, "combine_weighted")?;
    let mut acc: Option<Var> = None;
    for &(a, w) in terms {
        if g.value(w).len() != 1 {
            return Err(Error::shape("combine_weighted", "fusion weights must be scalars"));
        }
        let term = g.mul(a, w)?;
        acc = Some(match acc {
            None => term,
            Some(s) => g.add(s, term)?,
        });
    }
    softmax_positions(g, acc.expect("non-empty"), mask)
}

/// `softmax(Σ sigmoid(Aᵢ) ⊙ Aᵢ)`.
///
/// With `per_vector` the gate is one scalar per stream and batch row,
/// `sigmoid(mean(Aᵢ))` over the unmasked positions, instead of an
/// elementwise gate.
pub fn combine_local_gate(g: &mut Graph, streams: &[Var], per_vector: bool, mask: Option<&[bool]>) -> Result<Var> {
    if streams.is_empty() {
        return Err(Error::Config("local gating needs at least one stream".into()));
    }
    check_same(g, streams, "combine_local_gate")?;
    let shape = g.shape(streams[0]).to_vec();
    let (batch, len) = (shape[0], shape[1]);
    let mut acc: Option<Var> = None;
    for &a in streams {
        let gate = if per_vector {
            let mask_t = Tensor::new(
                shape.clone(),
                match mask {
                    Some(m) => m.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect(),
                    None => vec![1.0; batch * len],
                },
            )?;
            let inv_len: Vec<f64> = mask_t
                .data()
                .chunks(len)
                .map(|row| 1.0 / row.iter().sum::<f64>().max(1.0))
                .collect();
            let m = g.constant(mask_t);
            let masked = g.mul(a, m)?;
            let total = g.sum_axis(masked, 1)?;
            let inv = g.constant(Tensor::vector(inv_len));
            let mean = g.mul(total, inv)?;
            let mean = g.reshape(mean, &[batch, 1])?;
            g.sigmoid(mean)
        } else {
            g.sigmoid(a)
        };
        let term = g.mul(gate, a)?;
        acc = Some(match acc {
            None => term,
            Some(s) => g.add(s, term)?,
        });
    }
    softmax_positions(g, acc.expect("non-empty"), mask)
}

/// Stack the streams into `[B×k×S]`, normalize each position across the `k`
/// streams, keep the per-position maximum and normalize across positions.
pub fn combine_global_gate(g: &mut Graph, streams: &[Var], mask: Option<&[bool]>) -> Result<Var> {
    if streams.is_empty() {
        return Err(Error::Config("global gating needs at least one stream".into()));
    }
    check_same(g, streams, "combine_global_gate")?;
    let stacked = g.stack(streams, 1)?;
    let columns = g.softmax(stacked, 1)?;
    let best = g.max_axis(columns, 1)?;
    softmax_positions(g, best, mask)
}

/// Per-stream attention energies at one decoder step, before fusion.
pub struct StreamScores<'a> {
    pub streams: &'a [(Stream, Var)],
    pub mask: Option<&'a [bool]>,
}

/// Dispatches to the combiner for `strategy` and returns the fused
/// distribution together with the vectors that entered it (distributions for
/// the point-wise product, raw energies otherwise).
pub fn fuse(
    g: &mut Graph,
    strategy: FusionStrategy,
    scores: &StreamScores<'_>,
    weights: Option<(&FusionWeights, &ParamStore)>,
    local_gate_per_vector: bool,
) -> Result<(Var, Vec<(Stream, Var)>)> {
    let streams = scores.streams;
    if streams.is_empty() {
        return Err(Error::Config("fusion needs at least one attention stream".into()));
    }
    match strategy {
        FusionStrategy::Pointwise => {
            let [(s1, e1), (s2, e2)] = streams else {
                return Err(Error::Config(format!(
                    "point-wise fusion needs exactly two streams, got {}",
                    streams.len()
                )));
            };
            let a1 = softmax_positions(g, *e1, scores.mask)?;
            let a2 = softmax_positions(g, *e2, scores.mask)?;
            let fused = combine_pointwise(g, a1, a2, scores.mask)?;
            Ok((fused, vec![(*s1, a1), (*s2, a2)]))
        }
        FusionStrategy::ScalarWeighted => {
            let (fw, params) = weights
                .ok_or_else(|| Error::Config("scalar-weighted fusion needs fusion weights".into()))?;
            let mut terms = Vec::with_capacity(streams.len());
            for &(s, e) in streams {
                let id = fw
                    .param(s)
                    .ok_or_else(|| Error::Config(format!("no fusion weight registered for stream `{s}`")))?;
                terms.push((e, g.param(params, id)));
            }
            let fused = combine_weighted(g, &terms, scores.mask)?;
            Ok((fused, streams.to_vec()))
        }
        FusionStrategy::LocalGate => {
            let vars: Vec<Var> = streams.iter().map(|s| s.1).collect();
            let fused = combine_local_gate(g, &vars, local_gate_per_vector, scores.mask)?;
            Ok((fused, streams.to_vec()))
        }
        FusionStrategy::GlobalGate => {
            let vars: Vec<Var> = streams.iter().map(|s| s.1).collect();
            let fused = combine_global_gate(g, &vars, scores.mask)?;
            Ok((fused, streams.to_vec()))
        }
    }
}

/// Value-level convenience around [`fuse`]: fuses plain `[B×S]` tensors with
/// fixed weights `(w1, w2, w3)`.
pub fn fuse_values(
    strategy: FusionStrategy,
    streams: &[(Stream, Tensor)],
    weights: [f64; 3],
    mask: Option<&[bool]>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut params = ParamStore::new();
    let mut slots = Vec::new();
    for &(s, _) in streams {
        let id = params.insert(
            FusionWeights::param_name(s),
            crate::tensor::ParamGroup::Decoder,
            Tensor::vector(vec![weights[s.weight_slot()]]),
        )?;
        slots.push((s, id));
    }
    let fw = FusionWeights::new(slots);
    let vars: Vec<(Stream, Var)> = streams.iter().map(|(s, t)| (*s, g.constant(t.clone()))).collect();
    let (fused, _) = fuse(
        &mut g,
        strategy,
        &StreamScores { streams: &vars, mask },
        Some((&fw, &params)),
        false,
    )?;
    Ok(g.value(fused).clone())
}
