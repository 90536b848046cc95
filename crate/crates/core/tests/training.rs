use std::collections::BTreeMap;

use codesearch_core::corpus::{build_dataset, build_vocab, EncodedRecord, IngestReport, SeqLengths};
use codesearch_core::model::{Model, ModelConfig, Variant};
use codesearch_core::synthetic::{generate, SyntheticSpec};
use codesearch_core::tensor::{AdamConfig, Gradients, ParamGroup};
use codesearch_core::trainer::{train, TrainConfig};

fn corpus(n: usize, seed: u64) -> (Vec<EncodedRecord>, ModelConfig) {
    let records = generate(&SyntheticSpec::lexical(n, seed));
    let vocabs = build_vocab(&records, 1, None);
    let lengths = SeqLengths {
        desc: 6,
        name: 3,
        api: 4,
        tokens: 10,
    };
    let ds = build_dataset(&records, &vocabs, lengths, &mut IngestReport::default());
    let config = ModelConfig {
        dim: 16,
        hidden: 12,
        lengths,
        ..ModelConfig::new(vocabs.code.len(), vocabs.desc.len())
    };
    (ds.records, config)
}

#[test]
fn initial_loss_is_near_chance() {
    let (records, config) = corpus(40, 1);
    for variant in Variant::ALL {
        let model = Model::<f32>::init(ModelConfig { variant, ..config }, 5).unwrap();
        let mut total = 0.0;
        for (i, r) in records.iter().enumerate() {
            total += model.loss(&r.desc, &r.code, 1).unwrap();
            total += model.loss(&r.desc, &records[(i + 1) % records.len()].code, 0).unwrap();
        }
        let mean = total / (2 * records.len()) as f64;
        assert!((0.5..=0.9).contains(&mean), "{variant}: initial loss {mean}");
    }
}

#[test]
fn every_parameter_group_receives_gradient() {
    let (records, config) = corpus(10, 2);
    let model = Model::<f32>::init(config, 3).unwrap();
    let mut grads = Gradients::zeros_like(model.params());
    for (i, r) in records.iter().enumerate() {
        model.loss_and_grad(&r.desc, &r.code, 1, None, &mut grads).unwrap();
        let other = &records[(i + 3) % records.len()].code;
        model.loss_and_grad(&r.desc, other, 0, None, &mut grads).unwrap();
    }
    let mut norms: BTreeMap<ParamGroup, f64> = BTreeMap::new();
    for id in model.params().ids() {
        let sq: f64 = grads.get(id).iter().map(|g| (*g as f64).powi(2)).sum();
        assert!(sq > 0.0, "{} has zero gradient", model.params().name(id));
        *norms.entry(model.params().group(id)).or_default() += sq;
    }
    assert_eq!(norms.len(), 4);
}

fn train_with_threads(threads: usize) -> Vec<u32> {
    let (records, config) = corpus(30, 4);
    let tc = TrainConfig {
        batch_size: 16,
        epochs: 2,
        seed: 9,
        adam: AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        },
        val_fraction: 0.1,
        ..TrainConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let out = pool
        .install(|| train(&records, Model::init(config, 9).unwrap(), &tc, |_| {}))
        .unwrap();
    let mut bits: Vec<u32> = out.last.params().ids().flat_map(|id| {
        out.last.params().get(id).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    }).collect();
    bits.extend(out.curve.iter().map(|p| (p.loss as f32).to_bits()));
    bits
}

#[test]
fn training_is_bitwise_identical_across_thread_counts() {
    let one = train_with_threads(1);
    assert_eq!(one, train_with_threads(3));
    assert_eq!(one, train_with_threads(1));
}

#[test]
fn training_lowers_the_loss() {
    let (records, config) = corpus(40, 6);
    let tc = TrainConfig {
        batch_size: 32,
        epochs: 100,
        dropout: 0.0,
        adam: AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        val_fraction: 0.0,
        ..TrainConfig::default()
    };
    let out = train(&records, Model::init(config, 1).unwrap(), &tc, |_| {}).unwrap();
    let first = out.curve[0].loss;
    let last = out.curve.last().unwrap().loss;
    assert!(last < 0.5 * first, "loss went from {first} to {last}");
    assert_eq!(out.best_val_mrr, None);
    assert_eq!(out.best_epoch, 100);
}
