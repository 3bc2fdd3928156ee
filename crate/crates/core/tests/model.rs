use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wsdattn::data::{build_vocab, corpus_instances, make_batch, read_corpus, ContextWindow, Instance, PosTag, PAD};
use wsdattn::model::{
    convolve_bigrams, decode_step, embed_sequence, encode_stream, project_output, score_attention, Architecture,
    ArchitectureConfig, DecodeMode, DecoderHead, Dropout, GruCell, GruLayer, Model, Scorer, ScorerKind, VocabSizes,
};
use wsdattn::tensor::{Graph, ParamGroup, ParamStore, Tensor};
use wsdattn::training::{compute_loss, loss_mask, sgd_step, LossKind};
use wsdattn::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn wave(shape: &[usize], phase: f64) -> Tensor {
    let n: usize = shape.iter().product();
    t(shape, &(0..n).map(|i| (i as f64 * 0.71 + phase).sin()).collect::<Vec<_>>())
}

fn instance(source: &[usize], target_position: usize, sense: usize) -> Instance {
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

const MICRO: VocabSizes = VocabSizes {
    words: 12,
    pos: 12,
    output: 12,
};

#[test]
fn embedding_lookup_is_a_row_copy() {
    let table = wave(&[6, 3], 0.0);
    let mut g = Graph::new();
    let tv = g.leaf(table.clone());
    let out = embed_sequence(&mut g, tv, &[PAD, 4, PAD, 1], 2, 2).unwrap();
    let v = g.value(out).clone();
    assert_eq!(v.shape(), &[2, 2, 3]);
    assert_eq!(v.data()[0..3], v.data()[6..9]);

    let onehot = {
        let mut d = vec![0.0; 4 * 6];
        for (r, &i) in [PAD, 4, PAD, 1].iter().enumerate() {
            d[r * 6 + i] = 1.0;
        }
        g.constant(t(&[4, 6], &d))
    };
    let prod = g.matmul(onehot, tv).unwrap();
    assert_eq!(g.value(prod).data(), v.data());

    let s = g.sum(out);
    g.backward(s).unwrap();
    let grad = g.grad(tv).unwrap();
    for row in 0..6 {
        let expected = match row {
            PAD => 2.0,
            1 | 4 => 1.0,
            _ => 0.0,
        };
        assert!(grad.row(row).iter().all(|&x| x == expected), "row {row}: {:?}", grad.row(row));
    }
}

#[test]
fn out_of_range_token_names_its_position() {
    let mut g = Graph::new();
    let tv = g.leaf(wave(&[5, 2], 0.0));
    match embed_sequence(&mut g, tv, &[1, 2, 3, 9], 2, 2) {
        Err(Error::Vocabulary { index, size, position }) => {
            assert_eq!((index, size, position), (9, 5, vec![1, 1]));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn bigram_kernels() {
    let emb = wave(&[1, 4, 2], 0.3);
    let mut g = Graph::new();
    let e = g.constant(emb.clone());
    let ones = g.constant(Tensor::full(&[2, 2], 1.0));
    let sum = convolve_bigrams(&mut g, e, ones).unwrap();
    for i in 0..3 {
        for d in 0..2 {
            assert_eq!(g.value(sum).get(&[0, i, d]), emb.get(&[0, i, d]) + emb.get(&[0, i + 1, d]));
        }
    }
    let sel = g.constant(t(&[2, 2], &[0.0, 0.0, 1.0, 1.0]));
    let picked = convolve_bigrams(&mut g, e, sel).unwrap();
    assert_eq!(g.value(picked).data(), &emb.data()[2..]);

    let short = g.constant(wave(&[1, 1, 2], 0.0));
    assert!(matches!(convolve_bigrams(&mut g, short, ones), Err(Error::Dimension { .. })));
    let bad_kernel = g.constant(Tensor::full(&[3, 2], 1.0));
    assert!(matches!(convolve_bigrams(&mut g, e, bad_kernel), Err(Error::Dimension { .. })));
}

fn bidirectional_layer(params: &mut ParamStore, input: usize, hidden: usize, seed: u64) -> Vec<GruLayer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![GruLayer {
        forward: GruCell::register(params, "fwd", ParamGroup::Encoder, input, hidden, &mut rng).unwrap(),
        backward: Some(GruCell::register(params, "bwd", ParamGroup::Encoder, input, hidden, &mut rng).unwrap()),
    }]
}

#[test]
fn gru_origin_is_a_fixed_point() {
    let mut params = ParamStore::new();
    let layers = bidirectional_layer(&mut params, 3, 4, 1);
    let ids: Vec<_> = params.ids().filter(|&id| params.name(id).contains(".b_")).collect();
    for id in ids {
        params.value_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 5, 3]));
    let (out, fin) = encode_stream(&mut g, &params, &layers, x, None, &mut Dropout::off()).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    assert!(g.value(fin).data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_step_output_is_the_final_state() {
    let mut params = ParamStore::new();
    let layers = bidirectional_layer(&mut params, 3, 4, 2);
    let mut g = Graph::new();
    let x = g.constant(wave(&[2, 1, 3], 0.5));
    let (out, fin) = encode_stream(&mut g, &params, &layers, x, None, &mut Dropout::off()).unwrap();
    assert_eq!(g.value(out).data(), g.value(fin).data());
}

#[test]
fn shared_encoder_gradients_add_up() {
    let mut params = ParamStore::new();
    let layers = bidirectional_layer(&mut params, 3, 4, 3);
    let (x1, x2) = (wave(&[2, 4, 3], 0.1), wave(&[2, 4, 3], 1.7));
    let w = wave(&[2, 4, 4], 2.9);
    let grads = |inputs: &[&Tensor]| {
        let mut p = params.clone();
        let mut g = Graph::new();
        let wv = g.constant(w.clone());
        let mut total = None;
        for x in inputs {
            let xv = g.constant((*x).clone());
            let (o, _) = encode_stream(&mut g, &p, &layers, xv, None, &mut Dropout::off()).unwrap();
            let y = g.mul(o, wv).unwrap();
            let s = g.sum(y);
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s).unwrap(),
            });
        }
        g.backward(total.unwrap()).unwrap();
        p.accumulate_grads(&g);
        p.ids().map(|id| p.grad(id).clone()).collect::<Vec<_>>()
    };
    let both = grads(&[&x1, &x2]);
    let (a, b) = (grads(&[&x1]), grads(&[&x2]));
    for ((s, a), b) in both.iter().zip(&a).zip(&b) {
        let sum: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        for (u, v) in s.data().iter().zip(&sum) {
            assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }
}

#[test]
fn dot_scores_and_identity_general() {
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let general = Scorer::register(ScorerKind::General, &mut params, "attn", 3, 3, &mut rng).unwrap();
    let id = params.id("attn.w").unwrap();
    *params.value_mut(id) = t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    let eye = t(&[1, 3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let mut g = Graph::new();
    let o = g.constant(eye);
    let q = g.constant(t(&[1, 3], &[0.0, 1.0, 0.0]));
    let e = score_attention(&mut g, &params, &Scorer::Dot, o, q).unwrap();
    assert_eq!(g.value(e).data(), &[0.0, 1.0, 0.0]);

    let zero = g.constant(Tensor::zeros(&[1, 3]));
    let e0 = score_attention(&mut g, &params, &Scorer::Dot, o, zero).unwrap();
    let a0 = g.softmax(e0, 1).unwrap();
    assert!(g.value(a0).data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));

    let outs = g.constant(wave(&[2, 4, 3], 0.2));
    let query = g.constant(wave(&[2, 3], 1.1));
    let d = score_attention(&mut g, &params, &Scorer::Dot, outs, query).unwrap();
    let l = score_attention(&mut g, &params, &general, outs, query).unwrap();
    assert!(g.value(d).max_abs_diff(g.value(l)) < 1e-15);
}

#[test]
fn gru_step_matches_hand_evaluation() {
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cell = GruCell::register(&mut params, "dec", ParamGroup::Decoder, 2, 2, &mut rng).unwrap();
    let get = |name: &str| params.value(params.id(name).unwrap()).clone();
    let (w_ih, w_hh, b_ih, b_hh) = (get("dec.w_ih"), get("dec.w_hh"), get("dec.b_ih"), get("dec.b_hh"));
    let (x, h) = ([0.4, -0.9], [0.25, 0.6]);

    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let lin = |w: &Tensor, b: &Tensor, v: &[f64; 2], col: usize| b.data()[col] + v[0] * w.get(&[0, col]) + v[1] * w.get(&[1, col]);
    let mut expected = [0.0; 2];
    for k in 0..2 {
        let r = sig(lin(&w_ih, &b_ih, &x, k) + lin(&w_hh, &b_hh, &h, k));
        let z = sig(lin(&w_ih, &b_ih, &x, 2 + k) + lin(&w_hh, &b_hh, &h, 2 + k));
        let n = (lin(&w_ih, &b_ih, &x, 4 + k) + r * lin(&w_hh, &b_hh, &h, 4 + k)).tanh();
        expected[k] = (1.0 - z) * n + z * h[k];
    }

    let mut g = Graph::new();
    let xv = g.constant(t(&[1, 2], &x));
    let hv = g.constant(t(&[1, 2], &h));
    let a = decode_step(&mut g, &params, &cell, xv, hv).unwrap();
    let b = decode_step(&mut g, &params, &cell, xv, hv).unwrap();
    assert_eq!(g.value(a), g.value(b));
    for k in 0..2 {
        assert!((g.value(a).data()[k] - expected[k]).abs() < 1e-14);
    }

    let mut zeroed = params.clone();
    let ids: Vec<_> = zeroed.ids().collect();
    for id in ids {
        zeroed.value_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let xv = g.constant(t(&[1, 2], &x));
    let h0 = g.constant(Tensor::zeros(&[1, 2]));
    let z = decode_step(&mut g, &zeroed, &cell, xv, h0).unwrap();
    assert!(g.value(z).data().iter().all(|&v| v == 0.0));
}

#[test]
fn output_head_is_a_log_distribution() {
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let head = DecoderHead::register(&mut params, 2, 3, &mut rng).unwrap();
    let (h, c) = ([0.5, -1.0, 2.0, 0.1], [1.5, 0.3, -0.2, 0.8]);
    let mut g = Graph::new();
    let hv = g.constant(t(&[2, 2], &h));
    let cv = g.constant(t(&[2, 2], &c));
    let lp = project_output(&mut g, &params, &head, hv, cv).unwrap();
    let lp = g.value(lp).clone();
    let w = params.value(head.w).clone();
    let b = params.value(head.b).clone();
    for r in 0..2 {
        let lse = lp.row(r).iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!(lse.abs() < 1e-9);
        let input = [h[2 * r], h[2 * r + 1], c[2 * r], c[2 * r + 1]];
        let scores: Vec<f64> = (0..3).map(|k| b.data()[k] + (0..4).map(|i| input[i] * w.get(&[i, k])).sum::<f64>()).collect();
        let best = (0..3).fold(0, |m, k| if scores[k] > scores[m] { k } else { m });
        let got = (0..3).fold(0, |m, k| if lp.row(r)[k] > lp.row(r)[m] { k } else { m });
        assert_eq!(got, best);
    }

    let mut zero = params.clone();
    zero.value_mut(head.w).data_mut().fill(0.0);
    zero.value_mut(head.b).data_mut().fill(0.0);
    let mut g = Graph::new();
    let hv = g.constant(t(&[2, 2], &h));
    let cv = g.constant(t(&[2, 2], &c));
    let lp = project_output(&mut g, &zero, &head, hv, cv).unwrap();
    assert!(g.value(lp).data().iter().all(|&v| (v + 3f64.ln()).abs() < 1e-15));
}

#[test]
fn teacher_forcing_covers_every_token_and_eos() {
    let a = instance(&[4, 5, 6, 7], 1, 10);
    let b = instance(&[8, 9, 5], 2, 11);
    let batch = make_batch(&[&a, &b]).unwrap();
    for arch in Architecture::ALL {
        let (model, params) = Model::new(&ArchitectureConfig::micro(arch), MICRO, 5).unwrap();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &params, &batch, DecodeMode::TeacherForced, &mut Dropout::off(), true).unwrap();
        assert_eq!(out.steps, 5);
        assert_eq!(g.shape(out.log_probs), &[2, 5, 12]);
        assert_eq!(out.attention.len(), 5);
        for bundle in &out.attention {
            for r in 0..2 {
                let row = bundle.fused.row(r);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6 && row.iter().all(|&p| p >= 0.0));
            }
            assert_eq!(bundle.fused.row(1)[3], 0.0, "padding gets no attention");
            let streams: Vec<_> = bundle.streams.iter().map(|s| s.0).collect();
            assert_eq!(streams, model.config.streams());
        }
    }
}

#[test]
fn padding_gets_no_gradient() {
    let a = instance(&[4, 5, 6, 7], 1, 10);
    let b = instance(&[8, 9], 0, 11);
    let batch = make_batch(&[&a, &b]).unwrap();
    let mask = loss_mask(&batch, LossKind::Sequence);
    for arch in Architecture::ALL {
        let (model, mut params) = Model::new(&ArchitectureConfig::micro(arch), MICRO, 6).unwrap();
        let mut g = Graph::new();
        let out = model.forward(&mut g, &params, &batch, DecodeMode::TeacherForced, &mut Dropout::off(), false).unwrap();
        let loss = compute_loss(&mut g, out.log_probs, &batch.target, &mask).unwrap();
        g.backward(loss).unwrap();
        params.accumulate_grads(&g);
        for table in ["embed.word", "embed.pos", "embed.output"] {
            if let Some(id) = params.id(table) {
                assert!(params.grad(id).row(PAD).iter().all(|&v| v == 0.0), "{arch}: {table}");
                assert!(params.grad(id).row(4).iter().any(|&v| v != 0.0) || table == "embed.output");
            }
        }
    }
}

#[test]
fn sgd_reduces_the_loss_on_the_toy_corpus() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/toy.tsv");
    let (corpus, _) = read_corpus(std::path::Path::new(path)).unwrap();
    assert_eq!(corpus.len(), 5);
    let vocab = build_vocab(&corpus, 1);
    let instances = corpus_instances(&corpus, &vocab, ContextWindow::default());
    let refs: Vec<&Instance> = instances.iter().collect();
    let batch = make_batch(&refs).unwrap();
    let mask = loss_mask(&batch, LossKind::Sequence);
    let config = ArchitectureConfig {
        architecture: Architecture::Seq2SeqConvPosWeighted,
        embed_dim: 16,
        hidden_dim: 16,
        ..Default::default()
    };
    let (model, mut params) = Model::new(&config, VocabSizes::of(&vocab), 0).unwrap();
    let mut losses = Vec::new();
    for _ in 0..50 {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &params, &batch, DecodeMode::TeacherForced, &mut Dropout::off(), false).unwrap();
        let loss = compute_loss(&mut g, out.log_probs, &batch.target, &mask).unwrap();
        losses.push(g.value(loss).item().unwrap());
        g.backward(loss).unwrap();
        params.accumulate_grads(&g);
        sgd_step(&mut params, 0.05, 5.0);
    }
    assert!(losses[49] < 0.8 * losses[0], "{losses:?}");
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn greedy_decoding_stops_at_the_step_limit() {
    let a = instance(&[4, 5, 6], 1, 10);
    let batch = make_batch(&[&a]).unwrap();
    let (model, params) = Model::new(&ArchitectureConfig::micro(Architecture::Seq2SeqConv), MICRO, 8).unwrap();
    let mut g = Graph::new();
    let out = model
        .forward(&mut g, &params, &batch, DecodeMode::Greedy { max_steps: Some(2) }, &mut Dropout::off(), false)
        .unwrap();
    let preds = out.predictions.unwrap();
    assert!(out.steps <= 2 && preds.len() == out.steps);
    assert!(preds.iter().all(|&p| p < 12));
}
