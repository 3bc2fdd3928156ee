use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::ScorerKind;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};

pub(crate) fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

pub(crate) fn normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Inverted dropout with its own seeded generator. `Dropout::off()` passes
/// values through untouched.
#[derive(Clone, Debug)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn off() -> Self {
        Dropout::new(0.0, 0)
    }

    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = g.shape(x).to_vec();
        let n = shape.iter().product();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = g.constant(Tensor::new(shape, mask)?);
        g.mul(x, m)
    }
}

/// Row lookup: `[B×S]` indices into a `[V×E]` table give `[B×S×E]`.
pub fn embed_sequence(g: &mut Graph, table: Var, tokens: &[usize], batch: usize, seq: usize) -> Result<Var> {
    g.gather(table, tokens, &[batch, seq])
}

/// Depthwise width-2 convolution over an `[B×(S+1)×E]` sequence that already
/// starts with the `<s>` embedding: `out_i = E_i ⊙ K_0 + E_{i+1} ⊙ K_1`.
pub fn convolve_bigrams(g: &mut Graph, emb: Var, kernel: Var) -> Result<Var> {
    let es = g.shape(emb).to_vec();
    let ks = g.shape(kernel).to_vec();
    if es.len() != 3 || es[1] < 2 || ks != [2, es[2]] {
        return Err(Error::Dimension {
            op: "convolve_bigrams",
            lhs: es,
            rhs: ks,
        });
    }
    let s = es[1] - 1;
    let left = g.slice(emb, 1, 0, s)?;
    let right = g.slice(emb, 1, 1, s)?;
    let k0 = g.slice(kernel, 0, 0, 1)?;
    let k1 = g.slice(kernel, 0, 1, 1)?;
    let a = g.mul(left, k0)?;
    let b = g.mul(right, k1)?;
    g.add(a, b)
}

/// Parameters of one GRU cell, gates stacked as `[r | z | n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn register(
        params: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let b = 1.0 / (hidden_dim as f64).sqrt();
        let h3 = 3 * hidden_dim;
        Ok(GruCell {
            w_ih: params.insert(format!("{prefix}.w_ih"), group, uniform(rng, &[input_dim, h3], b))?,
            w_hh: params.insert(format!("{prefix}.w_hh"), group, uniform(rng, &[hidden_dim, h3], b))?,
            b_ih: params.insert(format!("{prefix}.b_ih"), group, uniform(rng, &[h3], b))?,
            b_hh: params.insert(format!("{prefix}.b_hh"), group, uniform(rng, &[h3], b))?,
            input_dim,
            hidden_dim,
        })
    }

    /// `x·W_ih + b_ih` for `[B×in]` or `[B×S×in]` inputs.
    pub fn project_input(&self, g: &mut Graph, params: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(params, self.w_ih);
        let b = g.param(params, self.b_ih);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }

    /// One step given the projected input `gi` (`[B×3H]`).
    pub fn step_projected(&self, g: &mut Graph, params: &ParamStore, gi: Var, h: Var) -> Result<Var> {
        let hd = self.hidden_dim;
        let w = g.param(params, self.w_hh);
        let b = g.param(params, self.b_hh);
        let hw = g.matmul(h, w)?;
        let gh = g.add(hw, b)?;
        let gi_rz = g.slice(gi, 1, 0, 2 * hd)?;
        let gh_rz = g.slice(gh, 1, 0, 2 * hd)?;
        let rz = g.add(gi_rz, gh_rz)?;
        let rz = g.sigmoid(rz);
        let r = g.slice(rz, 1, 0, hd)?;
        let z = g.slice(rz, 1, hd, hd)?;
        let gi_n = g.slice(gi, 1, 2 * hd, hd)?;
        let gh_n = g.slice(gh, 1, 2 * hd, hd)?;
        let rn = g.mul(r, gh_n)?;
        let n = g.add(gi_n, rn)?;
        let n = g.tanh(n);
        let d = g.sub(h, n)?;
        let zd = g.mul(z, d)?;
        g.add(n, zd)
    }

    /// `h' = GRU(x, h)` for `[B×in]` input and `[B×H]` state.
    pub fn step(&self, g: &mut Graph, params: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let (xs, hs) = (g.shape(x).to_vec(), g.shape(h).to_vec());
        if xs.len() != 2 || hs.len() != 2 || xs[1] != self.input_dim || hs != [xs[0], self.hidden_dim] {
            return Err(Error::Dimension {
                op: "gru_step",
                lhs: xs,
                rhs: hs,
            });
        }
        let gi = self.project_input(g, params, x)?;
        self.step_projected(g, params, gi, h)
    }

    /// Runs over a `[B×S×in]` sequence from a zero state. `masks[t]` is a
    /// `[B×1]` 0/1 constant; where it is 0 the state is carried unchanged.
    fn run(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        x: Var,
        masks: Option<&[Var]>,
        reverse: bool,
    ) -> Result<(Var, Var)> {
        let (b, s) = (g.shape(x)[0], g.shape(x)[1]);
        let gi_all = self.project_input(g, params, x)?;
        let mut h = g.constant(Tensor::zeros(&[b, self.hidden_dim]));
        let mut outputs = vec![h; s];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..s).rev())
        } else {
            Box::new(0..s)
        };
        for t in order {
            let gi = g.select(gi_all, 1, t)?;
            let h_new = self.step_projected(g, params, gi, h)?;
            h = match masks {
                Some(m) => {
                    let d = g.sub(h_new, h)?;
                    let md = g.mul(d, m[t])?;
                    g.add(h, md)?
                }
                None => h_new,
            };
            outputs[t] = h;
        }
        Ok((g.stack(&outputs, 1)?, h))
    }
}

/// One encoder layer; `backward` is present in bidirectional mode.
#[derive(Clone, Debug, PartialEq)]
pub struct GruLayer {
    pub forward: GruCell,
    pub backward: Option<GruCell>,
}

/// Runs a (possibly bidirectional, stacked) GRU over `[B×S×E]`. Returns the
/// top layer's outputs `[B×S×H]` and final state `[B×H]`; in bidirectional
/// mode both are sums over the two directions.
pub fn encode_stream(
    g: &mut Graph,
    params: &ParamStore,
    layers: &[GruLayer],
    x: Var,
    mask: Option<&[bool]>,
    dropout: &mut Dropout,
) -> Result<(Var, Var)> {
    let xs = g.shape(x).to_vec();
    let first = layers.first().ok_or_else(|| Error::Config("encoder has no layers".into()))?;
    if xs.len() != 3 || xs[2] != first.forward.input_dim {
        return Err(Error::Dimension {
            op: "encode_stream",
            lhs: xs,
            rhs: vec![first.forward.input_dim],
        });
    }
    let (b, s) = (xs[0], xs[1]);
    let masks = match mask {
        Some(m) if m.iter().any(|&v| !v) => {
            if m.len() != b * s {
                return Err(Error::shape("encode_stream", format!("mask of {} for [{b}×{s}]", m.len())));
            }
            Some(
                (0..s)
                    .map(|t| {
                        let col = (0..b).map(|i| if m[i * s + t] { 1.0 } else { 0.0 }).collect();
                        g.constant(Tensor::new(vec![b, 1], col).expect("column shape"))
                    })
                    .collect::<Vec<_>>(),
            )
        }
        _ => None,
    };
    let mut input = x;
    let mut last = None;
    for layer in layers {
        let (mut out, mut fin) = layer.forward.run(g, params, input, masks.as_deref(), false)?;
        if let Some(bwd) = &layer.backward {
            let (ob, fb) = bwd.run(g, params, input, masks.as_deref(), true)?;
            out = g.add(out, ob)?;
            fin = g.add(fin, fb)?;
        }
        input = dropout.apply(g, out)?;
        last = Some(fin);
    }
    Ok((input, last.expect("at least one layer")))
}

/// A single decoder GRU step, `h̃_t = GRU(y_{t-1}, h̃_{t-1})`.
pub fn decode_step(g: &mut Graph, params: &ParamStore, cell: &GruCell, prev_emb: Var, h_prev: Var) -> Result<Var> {
    cell.step(g, params, prev_emb, h_prev)
}

/// Attention energy function and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Scorer {
    Dot,
    /// `h̃ᵀ W O_i`, `W` is `[H×H]`.
    General { w: ParamId },
    /// `vᵀ tanh(W [h̃; O_i])`, `W` is `[2H×H_c]`, `v` is `[H_c×1]`.
    Concat { w: ParamId, v: ParamId, hidden: usize },
}

impl Scorer {
    pub fn register(
        kind: ScorerKind,
        params: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        concat_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(match kind {
            ScorerKind::Dot => Scorer::Dot,
            ScorerKind::General => {
                let b = 1.0 / (hidden as f64).sqrt();
                Scorer::General {
                    w: params.insert(format!("{prefix}.w"), ParamGroup::Decoder, uniform(rng, &[hidden, hidden], b))?,
                }
            }
            ScorerKind::Concat => {
                let bw = 1.0 / ((2 * hidden) as f64).sqrt();
                let bv = 1.0 / (concat_dim as f64).sqrt();
                Scorer::Concat {
                    w: params.insert(
                        format!("{prefix}.w"),
                        ParamGroup::Decoder,
                        uniform(rng, &[2 * hidden, concat_dim], bw),
                    )?,
                    v: params.insert(format!("{prefix}.v"), ParamGroup::Decoder, uniform(rng, &[concat_dim, 1], bv))?,
                    hidden,
                }
            }
        })
    }

    /// Per-sequence work that does not depend on the decoder state.
    pub fn keys(&self, g: &mut Graph, params: &ParamStore, outputs: Var) -> Result<Var> {
        match self {
            Scorer::Dot | Scorer::General { .. } => Ok(outputs),
            Scorer::Concat { w, hidden, .. } => {
                let w = g.param(params, *w);
                let w_o = g.slice(w, 0, *hidden, *hidden)?;
                g.matmul(outputs, w_o)
            }
        }
    }

    /// Raw energies `[B×S]` for query `[B×H]` against prepared `keys`.
    pub fn energies(&self, g: &mut Graph, params: &ParamStore, keys: Var, query: Var) -> Result<Var> {
        let ks = g.shape(keys).to_vec();
        let qs = g.shape(query).to_vec();
        if ks.len() != 3 || qs.len() != 2 || qs[0] != ks[0] {
            return Err(Error::Dimension {
                op: "score_attention",
                lhs: ks,
                rhs: qs,
            });
        }
        let (b, s) = (ks[0], ks[1]);
        let q = match self {
            Scorer::Dot => query,
            Scorer::General { w } => {
                let w = g.param(params, *w);
                g.matmul(query, w)?
            }
            Scorer::Concat { w, v, hidden } => {
                let w = g.param(params, *w);
                let w_h = g.slice(w, 0, 0, *hidden)?;
                let qh = g.matmul(query, w_h)?;
                let hc = g.shape(qh)[1];
                let qh = g.reshape(qh, &[b, 1, hc])?;
                let sum = g.add(keys, qh)?;
                let act = g.tanh(sum);
                let v = g.param(params, *v);
                let e = g.matmul(act, v)?;
                return g.reshape(e, &[b, s]);
            }
        };
        let qd = g.shape(q)[1];
        if qd != ks[2] {
            return Err(Error::Dimension {
                op: "score_attention",
                lhs: ks,
                rhs: g.shape(q).to_vec(),
            });
        }
        let q = g.reshape(q, &[b, qd, 1])?;
        let e = g.matmul(keys, q)?;
        g.reshape(e, &[b, s])
    }
}

/// Raw attention energies of `h̃` (`[B×H]`) over encoder outputs `O`
/// (`[B×S×H]`).
pub fn score_attention(g: &mut Graph, params: &ParamStore, scorer: &Scorer, outputs: Var, query: Var) -> Result<Var> {
    let keys = scorer.keys(g, params, outputs)?;
    scorer.energies(g, params, keys, query)
}

/// `C = A·O` for attention `[B×S]` and outputs `[B×S×H]`, giving `[B×H]`.
pub fn attend(g: &mut Graph, attention: Var, outputs: Var) -> Result<Var> {
    let s = g.shape(attention).to_vec();
    let a = g.reshape(attention, &[s[0], 1, s[1]])?;
    let c = g.matmul(a, outputs)?;
    let h = g.shape(c)[2];
    g.reshape(c, &[s[0], h])
}

/// Output projection `[h̃; C] → log-softmax` over the output vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderHead {
    pub w: ParamId,
    pub b: ParamId,
}

impl DecoderHead {
    pub fn register(params: &mut ParamStore, hidden: usize, vocab: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / ((2 * hidden) as f64).sqrt();
        Ok(DecoderHead {
            w: params.insert("head.w", ParamGroup::Decoder, uniform(rng, &[2 * hidden, vocab], bound))?,
            b: params.insert("head.b", ParamGroup::Decoder, uniform(rng, &[vocab], bound))?,
        })
    }
}

/// Log-probabilities `[B×V]` from decoder state and context, both `[B×H]`.
pub fn project_output(g: &mut Graph, params: &ParamStore, head: &DecoderHead, state: Var, context: Var) -> Result<Var> {
    let x = g.concat(&[state, context], 1)?;
    let w = g.param(params, head.w);
    let b = g.param(params, head.b);
    let y = g.matmul(x, w)?;
    let y = g.add(y, b)?;
    g.log_softmax(y, 1)
}
