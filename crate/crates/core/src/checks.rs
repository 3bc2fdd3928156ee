//! Finite-difference gradient checks over every differentiable operation and
//! every architecture, on small random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{make_batch, Instance, PosTag};
use crate::error::Result;
use crate::fusion::{combine_global_gate, combine_local_gate, combine_pointwise, combine_weighted};
use crate::model::{
    attend, convolve_bigrams, decode_step, embed_sequence, encode_stream, project_output, score_attention,
    Architecture, ArchitectureConfig, DecodeMode, DecoderHead, Dropout, GruCell, GruLayer, Model, Scorer, ScorerKind,
    VocabSizes,
};
use crate::tensor::{grad_check, GradCheckConfig, GradReport, Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::training::{compute_loss, loss_mask, LossKind};

/// Vocabulary sizes of the micro configuration.
pub const MICRO_SIZES: VocabSizes = VocabSizes {
    words: 12,
    pos: 12,
    output: 12,
};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub report: GradReport,
}

fn random(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect()).expect("shape")
}

fn check_config(seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        max_coords_per_param: Some(40),
        seed,
        ..Default::default()
    }
}

/// Checks `sum(W ⊙ f(params))` for a fixed random `W`, so every output
/// coordinate contributes with its own weight.
fn weighted<F>(name: &str, params: &ParamStore, seed: u64, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let probe = f(&mut g, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&mut rng, g.shape(probe), 1.0);
    let report = grad_check(
        params,
        |g, p| {
            let y = f(g, p)?;
            let wv = g.constant(w.clone());
            let prod = g.mul(y, wv)?;
            Ok(g.sum(prod))
        },
        &check_config(seed),
    )?;
    Ok(CheckResult {
        name: name.to_string(),
        report,
    })
}

fn store(rng: &mut impl Rng, inputs: &[(&str, &[usize])]) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    for (name, shape) in inputs {
        s.insert(*name, ParamGroup::Encoder, random(rng, shape, 2.0))?;
    }
    Ok(s)
}

fn vars(g: &mut Graph, p: &ParamStore) -> Vec<Var> {
    p.ids().map(|id| g.param(p, id)).collect()
}

/// One check per primitive and per model building block.
pub fn operation_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    macro_rules! op {
        ($name:expr, [$($input:expr),*], |$g:ident, $v:ident| $body:expr) => {{
            let p = store(&mut rng, &[$($input),*])?;
            out.push(weighted($name, &p, seed, |$g, p| {
                let $v = vars($g, p);
                $body
            })?);
        }};
    }
    let mask = [true, true, true, false, true, true, true, true];

    op!("matmul", [("a", &[2, 3, 4]), ("b", &[4, 5])], |g, v| g.matmul(v[0], v[1]));
    op!("matmul batched", [("a", &[2, 3, 4]), ("b", &[2, 4, 2])], |g, v| g.matmul(v[0], v[1]));
    op!("add broadcast", [("a", &[2, 3, 4]), ("b", &[4])], |g, v| g.add(v[0], v[1]));
    op!("sub", [("a", &[3, 4]), ("b", &[3, 1])], |g, v| g.sub(v[0], v[1]));
    op!("mul", [("a", &[2, 3, 4]), ("b", &[3, 4])], |g, v| g.mul(v[0], v[1]));
    op!("scale", [("a", &[3, 4])], |g, v| Ok(g.scale(v[0], -1.7)));
    op!("sigmoid", [("a", &[3, 4])], |g, v| Ok(g.sigmoid(v[0])));
    op!("tanh", [("a", &[3, 4])], |g, v| Ok(g.tanh(v[0])));
    op!("softmax", [("a", &[2, 3, 4])], |g, v| g.softmax(v[0], 1));
    op!("masked softmax", [("a", &[2, 4])], |g, v| g.masked_softmax(v[0], 1, &mask));
    op!("log softmax", [("a", &[3, 5])], |g, v| g.log_softmax(v[0], 1));
    op!("concat", [("a", &[2, 3]), ("b", &[2, 2])], |g, v| g.concat(&[v[0], v[1]], 1));
    op!("stack", [("a", &[2, 3]), ("b", &[2, 3])], |g, v| g.stack(&[v[0], v[1]], 1));
    op!("select", [("a", &[2, 3, 4])], |g, v| g.select(v[0], 1, 2));
    op!("slice", [("a", &[2, 5, 3])], |g, v| g.slice(v[0], 1, 1, 3));
    op!("reshape", [("a", &[2, 6])], |g, v| g.reshape(v[0], &[3, 4]));
    op!("sum", [("a", &[2, 3])], |g, v| Ok(g.sum(v[0])));
    op!("sum axis", [("a", &[2, 3, 4])], |g, v| g.sum_axis(v[0], 2));
    op!("max axis", [("a", &[2, 3, 4])], |g, v| g.max_axis(v[0], 1));
    op!("gather", [("table", &[6, 3])], |g, v| g.gather(v[0], &[0, 5, 2, 2, 4, 1], &[2, 3]));
    op!("pick", [("a", &[3, 5])], |g, v| g.pick(v[0], &[4, 0, 2]));
    op!("shared input", [("a", &[3, 3])], |g, v| {
        let t = g.tanh(v[0]);
        let m = g.matmul(v[0], t)?;
        g.add(m, v[0])
    });

    op!("embed sequence", [("table", &[7, 4])], |g, v| embed_sequence(g, v[0], &[1, 6, 6, 0, 3, 2], 2, 3));
    op!("convolve bigrams", [("emb", &[2, 5, 3]), ("kernel", &[2, 3])], |g, v| convolve_bigrams(g, v[0], v[1]));
    op!("attend", [("a", &[2, 4]), ("o", &[2, 4, 3])], |g, v| {
        let a = g.softmax(v[0], 1)?;
        attend(g, a, v[1])
    });
    op!("combine pointwise", [("aw", &[2, 5]), ("ap", &[2, 5])], |g, v| {
        let a = g.softmax(v[0], 1)?;
        let b = g.softmax(v[1], 1)?;
        combine_pointwise(g, a, b, None)
    });
    op!("combine weighted", [("aw", &[2, 4]), ("ap", &[2, 4]), ("ab", &[2, 4]), ("w1", &[1]), ("w2", &[1]), ("w3", &[1])], |g, v| {
        combine_weighted(g, &[(v[0], v[3]), (v[1], v[4]), (v[2], v[5])], Some(&mask))
    });
    op!("combine local gate", [("a1", &[2, 4]), ("a2", &[2, 4]), ("a3", &[2, 4])], |g, v| {
        combine_local_gate(g, &v, false, None)
    });
    op!("combine local gate per vector", [("a1", &[2, 4]), ("a2", &[2, 4])], |g, v| {
        combine_local_gate(g, &v, true, Some(&mask))
    });
    op!("combine global gate", [("a1", &[2, 4]), ("a2", &[2, 4]), ("a3", &[2, 4])], |g, v| {
        combine_global_gate(g, &v, None)
    });

    // Building blocks with registered parameters.
    {
        let mut p = store(&mut rng, &[("x", &[2, 3]), ("h", &[2, 4])])?;
        let cell = GruCell::register(&mut p, "gru", ParamGroup::Encoder, 3, 4, &mut rng)?;
        out.push(weighted("gru step", &p, seed, |g, p| {
            let v = vars(g, p);
            decode_step(g, p, &cell, v[0], v[1])
        })?);
    }
    {
        let mut p = store(&mut rng, &[("x", &[2, 3, 3])])?;
        let layers = vec![
            GruLayer {
                forward: GruCell::register(&mut p, "l0.fwd", ParamGroup::Encoder, 3, 4, &mut rng)?,
                backward: Some(GruCell::register(&mut p, "l0.bwd", ParamGroup::Encoder, 3, 4, &mut rng)?),
            },
            GruLayer {
                forward: GruCell::register(&mut p, "l1.fwd", ParamGroup::Encoder, 4, 4, &mut rng)?,
                backward: None,
            },
        ];
        let pad = [true, true, true, true, true, false];
        out.push(weighted("encode stream", &p, seed, |g, p| {
            let x = g.param(p, p.id("x").expect("x"));
            let (o, f) = encode_stream(g, p, &layers, x, Some(&pad), &mut Dropout::off())?;
            let f = g.reshape(f, &[2, 1, 4])?;
            g.concat(&[o, f], 1)
        })?);
    }
    for kind in [ScorerKind::Dot, ScorerKind::General, ScorerKind::Concat] {
        let mut p = store(&mut rng, &[("o", &[2, 3, 4]), ("q", &[2, 4])])?;
        let scorer = Scorer::register(kind, &mut p, "attn", 4, 3, &mut rng)?;
        out.push(weighted(&format!("score attention {kind:?}").to_lowercase(), &p, seed, |g, p| {
            let o = g.param(p, p.id("o").expect("o"));
            let q = g.param(p, p.id("q").expect("q"));
            score_attention(g, p, &scorer, o, q)
        })?);
    }
    {
        let mut p = store(&mut rng, &[("h", &[2, 3]), ("c", &[2, 3])])?;
        let head = DecoderHead::register(&mut p, 3, 5, &mut rng)?;
        out.push(weighted("project output", &p, seed, |g, p| {
            let h = g.param(p, p.id("h").expect("h"));
            let c = g.param(p, p.id("c").expect("c"));
            project_output(g, p, &head, h, c)
        })?);
    }
    {
        let p = store(&mut rng, &[("logp", &[2, 3, 4])])?;
        let targets = [0, 3, 1, 2, 2, 0];
        let keep = [true, true, false, true, false, true];
        let report = grad_check(
            &p,
            |g, p| {
                let x = g.param(p, p.ids().next().expect("one input"));
                let lp = g.log_softmax(x, 2)?;
                compute_loss(g, lp, &targets, &keep)
            },
            &check_config(seed),
        )?;
        out.push(CheckResult {
            name: "masked loss".into(),
            report,
        });
    }
    Ok(out)
}

fn micro_instance(source: &[usize], target_position: usize, sense: usize) -> Instance {
    let mut target = source.to_vec();
    target[target_position] = sense;
    Instance {
        sentence_id: 0,
        sentence_position: target_position,
        tokens: source.iter().map(|s| s.to_string()).collect(),
        source: source.to_vec(),
        pos: source.iter().map(|s| 4 + s % 5).collect(),
        target,
        target_position,
        lemma: "w".into(),
        gold: "w%1".into(),
        pos_tag: PosTag::Nn,
    }
}

/// Whole-model check of the sequence loss on a two-sentence batch
/// (lengths 4 and 3) with the sizes of [`MICRO_SIZES`].
pub fn model_check(config: &ArchitectureConfig, seed: u64) -> Result<GradReport> {
    let a = micro_instance(&[4, 5, 6, 7], 1, 10);
    let b = micro_instance(&[8, 9, 5], 2, 11);
    let batch = make_batch(&[&a, &b])?;
    let mask = loss_mask(&batch, LossKind::Sequence);
    let (model, params) = Model::new(config, MICRO_SIZES, seed)?;
    grad_check(
        &params,
        |g, p| {
            let out = model.forward(g, p, &batch, DecodeMode::TeacherForced, &mut Dropout::off(), false)?;
            compute_loss(g, out.log_probs, &batch.target, &mask)
        },
        &check_config(seed),
    )
}

/// The five architectures on the micro configuration (E=4, H=5).
pub fn architecture_checks(seed: u64) -> Result<Vec<CheckResult>> {
    Architecture::ALL
        .into_iter()
        .map(|a| {
            Ok(CheckResult {
                name: a.name().to_string(),
                report: model_check(&ArchitectureConfig::micro(a), seed)?,
            })
        })
        .collect()
}
