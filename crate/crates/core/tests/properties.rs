use proptest::prelude::*;
use wsdattn::data::{make_batch, Instance, PosTag, EOS, PAD};
use wsdattn::eval::{rank_senses, score_f1, Prediction};
use wsdattn::fusion::{combine_global_gate, combine_pointwise, fuse_values, FusionStrategy, Stream};
use wsdattn::model::convolve_bigrams;
use wsdattn::tensor::{softmax, Graph, ParamGroup, ParamStore, Tensor};
use wsdattn::training::{clip_gradients, grad_norm};

fn row(v: &[f64]) -> Tensor {
    Tensor::new(vec![1, v.len()], v.to_vec()).unwrap()
}

fn is_distribution(t: &Tensor, tol: f64) -> bool {
    let s: f64 = t.data().iter().sum();
    (s - 1.0).abs() <= tol && t.data().iter().all(|&p| p >= 0.0)
}

fn streams_for(strategy: FusionStrategy, vecs: &[Vec<f64>]) -> Vec<(Stream, Tensor)> {
    let n = if strategy == FusionStrategy::Pointwise { 2 } else { 3 };
    Stream::ALL.iter().zip(vecs).take(n).map(|(s, v)| (*s, row(v))).collect()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |b, i| if v[i] > v[b] { i } else { b })
}

fn strategy() -> impl Strategy<Value = FusionStrategy> {
    prop::sample::select(FusionStrategy::ALL.to_vec())
}

/// Three stream vectors of a common length.
fn three_streams(bound: f64) -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..9).prop_flat_map(move |s| prop::collection::vec(prop::collection::vec(-bound..bound, s), 3))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-500.0f64..500.0, 1..20)) {
        let p = softmax(&row(&v), 1).unwrap();
        prop_assert!(is_distribution(&p, 1e-9));
    }

    #[test]
    fn softmax_is_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
        let a = softmax(&row(&v), 1).unwrap();
        let b = softmax(&row(&v).map(|x| x + c), 1).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn fusion_outputs_are_distributions(
        s in strategy(),
        vecs in three_streams(10.0),
        w in prop::array::uniform3(-3.0f64..3.0),
    ) {
        let fused = fuse_values(s, &streams_for(s, &vecs), w, None).unwrap();
        prop_assert!(is_distribution(&fused, 1e-6), "{s}: {fused:?}");
    }

    #[test]
    fn fusion_is_permutation_equivariant(
        s in strategy(),
        vecs in three_streams(5.0),
        w in prop::array::uniform3(-3.0f64..3.0),
        seed in any::<u64>(),
    ) {
        use rand::{seq::SliceRandom, SeedableRng};
        let len = vecs[0].len();
        let mut perm: Vec<usize> = (0..len).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let permuted: Vec<Vec<f64>> = vecs.iter().map(|v| perm.iter().map(|&i| v[i]).collect()).collect();
        let a = fuse_values(s, &streams_for(s, &vecs), w, None).unwrap();
        let b = fuse_values(s, &streams_for(s, &permuted), w, None).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert!((b.data()[k] - a.data()[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn pointwise_is_commutative(vecs in three_streams(10.0)) {
        let mut g = Graph::new();
        let a = g.constant(softmax(&row(&vecs[0]), 1).unwrap());
        let b = g.constant(softmax(&row(&vecs[1]), 1).unwrap());
        let ab = combine_pointwise(&mut g, a, b, None).unwrap();
        let ba = combine_pointwise(&mut g, b, a, None).unwrap();
        prop_assert_eq!(g.value(ab), g.value(ba));
    }

    #[test]
    fn pointwise_reinforces_a_shared_peak(
        vecs in three_streams(2.0),
        peak in any::<prop::sample::Index>(),
        margin in 0.1f64..3.0,
    ) {
        let i = peak.index(vecs[0].len());
        let peaked: Vec<Vec<f64>> = vecs[..2]
            .iter()
            .map(|v| {
                let mut v = v.clone();
                v[i] = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + margin;
                v
            })
            .collect();
        let fused = fuse_values(FusionStrategy::Pointwise, &streams_for(FusionStrategy::Pointwise, &peaked), [0.0; 3], None).unwrap();
        prop_assert_eq!(argmax(fused.data()), i);
    }

    #[test]
    fn weighted_argmax_ignores_a_common_shift(
        vecs in three_streams(5.0),
        w in prop::array::uniform3(-3.0f64..3.0),
        c in -20.0f64..20.0,
    ) {
        let s = FusionStrategy::ScalarWeighted;
        let shifted: Vec<Vec<f64>> = vecs.iter().map(|v| v.iter().map(|x| x + c).collect()).collect();
        let a = fuse_values(s, &streams_for(s, &vecs), w, None).unwrap();
        let b = fuse_values(s, &streams_for(s, &shifted), w, None).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-9);
        prop_assert_eq!(argmax(a.data()), argmax(b.data()));
    }

    #[test]
    fn bigrams_match_brute_force(b in 1usize..3, s in 1usize..6, e in 1usize..5, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let emb: Vec<f64> = (0..b * (s + 1) * e).map(|_| rng.random_range(-3.0..3.0)).collect();
        let k: Vec<f64> = (0..2 * e).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut g = Graph::new();
        let ev = g.constant(Tensor::new(vec![b, s + 1, e], emb.clone()).unwrap());
        let kv = g.constant(Tensor::new(vec![2, e], k.clone()).unwrap());
        let out = convolve_bigrams(&mut g, ev, kv).unwrap();
        let out = g.value(out).clone();
        prop_assert_eq!(out.shape(), &[b, s, e]);
        for bi in 0..b {
            for i in 0..s {
                for d in 0..e {
                    let mut expected = 0.0;
                    for j in 0..2 {
                        expected += emb[(bi * (s + 1) + i + j) * e + d] * k[j * e + d];
                    }
                    prop_assert!((out.get(&[bi, i, d]) - expected).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn bigram_row_depends_on_two_inputs_only(s in 2usize..7, r in any::<prop::sample::Index>(), delta in 0.5f64..5.0) {
        let e = 3;
        let base: Vec<f64> = (0..(s + 1) * e).map(|i| (i as f64 * 0.37).sin()).collect();
        let kernel = Tensor::new(vec![2, e], vec![0.4, -1.1, 0.9, 1.3, 0.2, -0.8]).unwrap();
        let r = r.index(s + 1);
        let mut moved = base.clone();
        moved[r * e..(r + 1) * e].iter_mut().for_each(|v| *v += delta);
        let run = |data: Vec<f64>| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![1, s + 1, e], data).unwrap());
            let k = g.constant(kernel.clone());
            let y = convolve_bigrams(&mut g, x, k).unwrap();
            g.value(y).clone()
        };
        let (a, b) = (run(base), run(moved));
        for i in 0..s {
            let same = (0..e).all(|d| a.get(&[0, i, d]) == b.get(&[0, i, d]));
            prop_assert_eq!(same, i != r && i + 1 != r, "row {} after moving {}", i, r);
        }
    }

    #[test]
    fn clipping_keeps_direction(
        grads in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 1..6), 1..4),
        max_norm in 0.1f64..50.0,
    ) {
        let mut p = ParamStore::new();
        for (i, g) in grads.iter().enumerate() {
            let id = p.insert(format!("p{i}"), ParamGroup::Encoder, Tensor::zeros(&[g.len()])).unwrap();
            p.grad_mut(id).data_mut().copy_from_slice(g);
        }
        let before: Vec<f64> = grads.concat();
        let norm = grad_norm(&p);
        let scale = clip_gradients(&mut p, max_norm).unwrap();
        let after: Vec<f64> = p.ids().flat_map(|id| p.grad(id).data().to_vec()).collect();
        prop_assert!(grad_norm(&p) <= max_norm * (1.0 + 1e-12) || norm <= max_norm);
        prop_assert!((scale - (max_norm / norm).min(1.0)).abs() <= 1e-12 || norm == 0.0);
        let dot: f64 = before.iter().zip(&after).map(|(a, b)| a * b).sum();
        let nb = before.iter().map(|v| v * v).sum::<f64>().sqrt();
        let na = after.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nb > 0.0 {
            prop_assert!((dot / (nb * na) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn batches_copy_source_into_target(
        rows in prop::collection::vec(prop::collection::vec(4usize..30, 1..9), 1..6),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 6),
    ) {
        let instances: Vec<Instance> = rows
            .iter()
            .zip(&picks)
            .enumerate()
            .map(|(k, (src, pick))| {
                let t = pick.index(src.len());
                let mut target = src.clone();
                target[t] = 100 + k;
                Instance {
                    sentence_id: k,
                    sentence_position: t,
                    tokens: src.iter().map(|s| s.to_string()).collect(),
                    source: src.clone(),
                    pos: vec![4; src.len()],
                    target,
                    target_position: t,
                    lemma: "w".into(),
                    gold: "w%1".into(),
                    pos_tag: PosTag::Nn,
                }
            })
            .collect();
        let refs: Vec<&Instance> = instances.iter().collect();
        let batch = make_batch(&refs).unwrap();
        prop_assert_eq!(&batch, &make_batch(&refs).unwrap());
        let (s, t) = (batch.seq_len, batch.target_steps());
        prop_assert!(batch.lengths.windows(2).all(|w| w[0] >= w[1]));
        for r in 0..batch.size {
            let n = batch.lengths[r];
            for j in 0..t {
                let tgt = batch.target[r * t + j];
                if j < n && j != batch.target_positions[r] {
                    prop_assert_eq!(tgt, batch.source[r * s + j]);
                } else if j == n {
                    prop_assert_eq!(tgt, EOS);
                } else if j > n {
                    prop_assert_eq!(tgt, PAD);
                }
                if j < s {
                    prop_assert_eq!(batch.mask[r * s + j], j < n);
                    if j >= n {
                        prop_assert_eq!(batch.source[r * s + j], PAD);
                    }
                }
            }
        }
    }

    #[test]
    fn ranking_is_a_sorted_restricted_softmax(
        logits in prop::collection::vec(-10.0f64..10.0, 8),
        candidates in prop::sample::subsequence((0usize..8).collect::<Vec<_>>(), 1..=5),
    ) {
        let ranked = rank_senses(&logits, &candidates);
        let z: f64 = candidates.iter().map(|&c| logits[c].exp()).sum();
        let mut brute: Vec<(usize, f64)> = candidates.iter().map(|&c| (c, logits[c].exp() / z)).collect();
        brute.sort_by(|a, b| b.1.total_cmp(&a.1));
        prop_assert_eq!(ranked.len(), brute.len());
        for (r, b) in ranked.iter().zip(&brute) {
            prop_assert!(candidates.contains(&r.0));
            prop_assert!((r.1 - b.1).abs() <= 1e-12);
        }
        prop_assert!(ranked.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn report_ignores_instance_order(
        outcomes in prop::collection::vec((0usize..5, 0usize..3), 1..30),
        seed in any::<u64>(),
    ) {
        use rand::{seq::SliceRandom, SeedableRng};
        let preds: Vec<Prediction> = outcomes
            .iter()
            .enumerate()
            .map(|(i, &(tag, outcome))| Prediction {
                sentence_id: i,
                position: 0,
                lemma: "w".into(),
                pos: PosTag::ALL[tag],
                gold: "w%1".into(),
                predicted: match outcome {
                    0 => None,
                    1 => Some("w%1".into()),
                    _ => Some("w%2".into()),
                },
                gold_rank: None,
            })
            .collect();
        let mut shuffled = preds.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = score_f1(&preds, "m", "a", "b").unwrap();
        let b = score_f1(&shuffled, "m", "a", "b").unwrap();
        prop_assert_eq!(&a.classes, &b.classes);
        let per_class: usize = a.classes[..4].iter().map(|c| c.correct).sum();
        let other = preds.iter().filter(|p| p.pos == PosTag::Other && p.correct()).count();
        prop_assert_eq!(per_class + other, a.overall().correct);
        if preds.iter().all(|p| p.predicted.is_some()) {
            let o = a.overall();
            prop_assert!((o.precision - o.recall).abs() < 1e-15 && (o.f1 - o.recall).abs() < 1e-12);
        }
    }
}

#[test]
fn global_gate_top_three_are_the_hot_positions() {
    for s in 3..=5 {
        for i in 0..s {
            for j in 0..s {
                for k in 0..s {
                    if i == j || j == k || i == k {
                        continue;
                    }
                    let hot = |p: usize| row(&(0..s).map(|q| if q == p { 1.0 } else { 0.0 }).collect::<Vec<_>>());
                    let mut g = Graph::new();
                    let streams = [g.constant(hot(i)), g.constant(hot(j)), g.constant(hot(k))];
                    let fused = combine_global_gate(&mut g, &streams, None).unwrap();
                    let v = g.value(fused).data().to_vec();
                    let mut order: Vec<usize> = (0..s).collect();
                    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
                    let mut top = order[..3].to_vec();
                    top.sort();
                    let mut expected = vec![i, j, k];
                    expected.sort();
                    assert_eq!(top, expected, "S={s} hot at {i},{j},{k}: {v:?}");
                    if s > 3 {
                        assert!(v[order[2]] > v[order[3]]);
                    }
                }
            }
        }
    }
}

#[test]
fn scalar_weighted_single_stream_is_plain_softmax() {
    let v = [0.3, -1.0, 2.5, 0.0];
    let fused = fuse_values(FusionStrategy::ScalarWeighted, &[(Stream::Word, row(&v))], [1.0, 0.0, 0.0], None).unwrap();
    assert!(fused.max_abs_diff(&softmax(&row(&v), 1).unwrap()) <= 1e-15);
}
