use std::path::Path;

use wsdattn::data::synthetic::{generate, SyntheticConfig};
use wsdattn::data::{corpus_instances, make_batch, read_corpus, ContextWindow, Instance, SenseCorpus, Split};
use wsdattn::eval::{evaluate, EvalOptions};
use wsdattn::model::{Architecture, ArchitectureConfig, Checkpoint, DecodeMode, Dropout, Model, VocabSizes};
use wsdattn::fusion::FusionInit;
use wsdattn::tensor::{Graph, ParamGroup};
use wsdattn::training::{
    compute_loss, loss_mask, synthetic_setup, train, LossKind, Optimizer, OptimizerKind, TrainConfig,
};

fn toy() -> SenseCorpus {
    let path = Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/toy.tsv"));
    let (mut corpus, warnings) = read_corpus(path).unwrap();
    assert!(warnings.is_empty());
    for s in &mut corpus.sentences {
        s.split = Some(Split::Train);
    }
    corpus
}

fn toy_setup() -> (ArchitectureConfig, TrainConfig) {
    let arch = ArchitectureConfig {
        architecture: Architecture::Seq2Seq,
        embed_dim: 16,
        hidden_dim: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        ..Default::default()
    };
    let cfg = TrainConfig {
        epochs: 300,
        dropout: 0.0,
        optimizer: OptimizerKind::Adam,
        batch_size: 5,
        ..Default::default()
    };
    (arch, cfg)
}

#[test]
fn toy_corpus_is_memorized() {
    let corpus = toy();
    let (arch, cfg) = toy_setup();
    let out = train(&corpus, &arch, &cfg).unwrap();
    let ck = &out.checkpoint;
    let report = evaluate(&ck.model, &ck.params, &ck.vocab, &out.inventory, &corpus, &EvalOptions::default(), "toy", "toy").unwrap();
    assert_eq!(report.overall().correct, 5);
    assert_eq!(report.overall().f1, 1.0);

    let losses: Vec<f64> = out.log.epochs.iter().map(|r| r.loss).collect();
    assert_eq!(losses.len(), 300);
    for start in 20..losses.len() - 50 {
        let window = &losses[start..start + 50];
        let rises = window.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(window[49] <= window[0], "loss rose over epochs {start}..{}", start + 50);
        assert!(rises as f64 <= 0.05 * 50.0 || window.iter().all(|&l| l <= 1.05 * window[0]), "epoch {start}: {rises} rises");
    }
}

#[test]
fn same_seed_same_run() {
    let data = generate(&SyntheticConfig::default());
    let (arch, mut cfg) = synthetic_setup(Architecture::Seq2SeqConvPosWeighted);
    cfg.epochs = 5;
    let a = train(&data.corpus, &arch, &cfg).unwrap();
    let b = train(&data.corpus, &arch, &cfg).unwrap();
    assert_eq!(a.log.without_timing(), b.log.without_timing());
    assert_eq!(a.checkpoint, b.checkpoint);
    for (x, y) in a.checkpoint.params.ids().zip(b.checkpoint.params.ids()) {
        let (x, y) = (a.checkpoint.params.value(x).data(), b.checkpoint.params.value(y).data());
        assert!(x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    cfg.seed = 1;
    let c = train(&data.corpus, &arch, &cfg).unwrap();
    assert_ne!(a.log.without_timing(), c.log.without_timing());
}

#[test]
fn checkpoint_reload_reproduces_logits() {
    let corpus = toy();
    let (arch, mut cfg) = toy_setup();
    cfg.epochs = 3;
    let out = train(&corpus, &arch, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.save(dir.path()).unwrap();
    let loaded = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(loaded, out.checkpoint);

    let instances = corpus_instances(&corpus, &loaded.vocab, ContextWindow::default());
    let refs: Vec<&Instance> = instances.iter().collect();
    let batch = make_batch(&refs).unwrap();
    let logits = |ck: &Checkpoint| {
        let mut g = Graph::new();
        let out = ck.model.forward(&mut g, &ck.params, &batch, DecodeMode::TeacherForced, &mut Dropout::off(), false).unwrap();
        g.value(out.log_probs).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(logits(&loaded), logits(&out.checkpoint));
}

#[test]
fn unit_ratio_ignores_group_labels() {
    let corpus = toy();
    let (arch, _) = toy_setup();
    let vocab = wsdattn::data::build_vocab(&corpus, 1);
    let instances = corpus_instances(&corpus, &vocab, ContextWindow::default());
    let refs: Vec<&Instance> = instances.iter().collect();
    let batch = make_batch(&refs).unwrap();
    let mask = loss_mask(&batch, LossKind::Sequence);
    let (model, params) = Model::new(&arch, VocabSizes::of(&vocab), 3).unwrap();

    let mut flipped = params.clone();
    let ids: Vec<_> = flipped.ids().collect();
    for id in ids {
        let g = match flipped.group(id) {
            ParamGroup::Encoder => ParamGroup::Decoder,
            ParamGroup::Decoder => ParamGroup::Encoder,
        };
        flipped.set_group(id, g);
    }

    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let run = |mut p: wsdattn::tensor::ParamStore| {
            let mut opt = Optimizer::new(kind, &p);
            for _ in 0..5 {
                let mut g = Graph::new();
                let out = model.forward(&mut g, &p, &batch, DecodeMode::TeacherForced, &mut Dropout::off(), false).unwrap();
                let loss = compute_loss(&mut g, out.log_probs, &batch.target, &mask).unwrap();
                g.backward(loss).unwrap();
                p.accumulate_grads(&g);
                opt.step(&mut p, 0.05, 1.0);
            }
            p.ids().flat_map(|id| p.value(id).data().to_vec()).map(f64::to_bits).collect::<Vec<_>>()
        };
        assert_eq!(run(params.clone()), run(flipped.clone()), "{kind:?}");
    }
}

#[test]
fn fusion_trajectory_starts_at_the_configured_init() {
    let data = generate(&SyntheticConfig::default());
    let (mut arch, mut cfg) = synthetic_setup(Architecture::Seq2SeqConvPosWeighted);
    cfg.epochs = 2;
    let out = train(&data.corpus, &arch, &cfg).unwrap();
    assert_eq!(out.log.initial_weights, [Some(1.0); 3]);
    assert_eq!(out.log.epochs.len(), 2);
    assert!(out.log.epochs.iter().all(|r| r.weights.iter().all(Option::is_some)));

    arch.fusion_init = FusionInit::Uniform { bound: 0.1 };
    let out = train(&data.corpus, &arch, &cfg).unwrap();
    assert!(out.log.initial_weights.iter().all(|w| w.unwrap().abs() <= 0.1));

    let (plain, _) = synthetic_setup(Architecture::Seq2SeqConv);
    let out = train(&data.corpus, &plain, &cfg).unwrap();
    assert_eq!(out.log.initial_weights, [None; 3]);
    assert!(out.log.epochs.iter().all(|r| r.weights == [None; 3]));
}

#[test]
fn no_sense_tags_is_a_usage_error() {
    let mut corpus = toy();
    for s in &mut corpus.sentences {
        s.split = Some(Split::Test);
    }
    let (arch, cfg) = toy_setup();
    assert!(train(&corpus, &arch, &cfg).is_err());
}
