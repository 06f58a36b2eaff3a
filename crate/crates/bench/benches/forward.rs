use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use muse_core::data::generate;
use muse_core::kb::retrieve;
use muse_core::train::loss_and_gradients;
use muse_core::{
    infer, Adapter, KnowledgeBase, ModelKind, Network, RetrievalStrategy, SyntheticSpec, TrainConfig,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup() -> (muse_core::SyntheticData, Network) {
    let data = generate(&SyntheticSpec { bags_per_class: 5, ..SyntheticSpec::default() }).unwrap();
    let arch = TrainConfig::default().architecture(ModelKind::Muse, 64, 2);
    let semantics = data.class_embeddings.mapv(f64::from);
    let net = Network::init(arch, &mut ChaCha8Rng::seed_from_u64(0), Some(&semantics)).unwrap();
    (data, net)
}

fn forward(c: &mut Criterion) {
    let (data, net) = setup();
    let bag = &data.bags[0];
    c.bench_function("prior, d=64, default bag", |b| b.iter(|| net.represent(black_box(bag)).unwrap()));
    c.bench_function("inference, d=64, default bag", |b| b.iter(|| infer(black_box(bag), &net).unwrap()));
    for kind in [ModelKind::Mean, ModelKind::AttnMil, ModelKind::BmTi] {
        let arch = TrainConfig::default().architecture(kind, 64, 2);
        let base = Network::init(arch, &mut ChaCha8Rng::seed_from_u64(0), None).unwrap();
        c.bench_function(&format!("inference, {kind}"), |b| b.iter(|| base.logits(black_box(bag)).unwrap()));
    }
}

fn retrieval(c: &mut Criterion) {
    let (data, net) = setup();
    let kb = KnowledgeBase::from_synthetic(&data).unwrap();
    let prior = net.represent(&data.bags[0]).unwrap();
    let adapter = Adapter::identity(64);
    for strategy in [RetrievalStrategy::Cosine, RetrievalStrategy::L2] {
        c.bench_function(&format!("retrieve m=20 of 300, {strategy:?}"), |b| {
            b.iter(|| retrieve(prior.view(), &kb, 0, 20, strategy, &adapter, 7).unwrap())
        });
    }
}

fn training_step(c: &mut Criterion) {
    let (data, net) = setup();
    let bag = &data.bags[0];
    let text = data.banks[bag.label].row(0).mapv(f64::from);
    c.bench_function("loss and gradients, plain view", |b| {
        b.iter(|| loss_and_gradients(&net, black_box(bag), None, 0.1).unwrap())
    });
    c.bench_function("loss and gradients, text view", |b| {
        b.iter(|| loss_and_gradients(&net, black_box(bag), Some(&text), 0.1).unwrap())
    });
}

criterion_group!(benches, forward, retrieval, training_step);
criterion_main!(benches);
