use catart::art::{self, ArtInputs, ArtMode, ArtModel, TableScorer};
use catart::bprmf::{self, EmbeddingTable};
use catart::cat::{self, CatModel, CatOptions};
use catart::dataset::{Split, TripletSampler};
use catart::eval;
use catart_bench::{item_tables, models, store, user_tables, DIM};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn stage1(c: &mut Criterion) {
    let store = store(2000, 500);
    let model = &models(&store)[0];
    let sampler = TripletSampler::new(&store, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = sampler.sample(&store, 1024, &mut rng);
    c.bench_function("bpr_batch_grad/1024", |b| {
        b.iter(|| bprmf::batch_loss_and_grad(model, &batch, 0.0))
    });
}

fn stage2(c: &mut Criterion) {
    let store = store(2000, 500);
    let users = user_tables(&models(&store));
    let refs: Vec<&EmbeddingTable> = users.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = CatModel::new((0..store.n_domains()).collect(), DIM, CatOptions::default(), &mut rng).unwrap();
    let clean: Vec<_> = (0..256).map(|u| model.input(&refs, u).unwrap()).collect();
    let masked: Vec<_> = clean.iter().map(|x| model.mask(x, 1, &mut rng).unwrap()).collect();
    c.bench_function("cat_loss_and_grad/N=256", |b| b.iter(|| cat::cat_loss(&model, &clean, &masked).unwrap()));
}

fn stage3(c: &mut Criterion) {
    let store = store(2000, 500);
    let m = models(&store);
    let (users, items) = (user_tables(&m), item_tables(&m));
    let global = users[0].clone();
    let inputs = ArtInputs {
        users: &users,
        items: &items,
        global: &global,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = ArtModel::new(0, store.n_domains(), DIM, ArtMode::Attention, &mut rng).unwrap();
    let batch = TripletSampler::new(&store, 0).unwrap().sample(&store, 1024, &mut rng);
    c.bench_function("fused_bpr_grad/1024", |b| {
        b.iter(|| art::fused_bpr_loss(&model, &inputs, &batch).unwrap())
    });
    c.bench_function("fused_table/2000", |b| b.iter(|| model.fused_table(&inputs).unwrap()));
}

fn evaluation(c: &mut Criterion) {
    let store = store(2000, 500);
    let m = models(&store);
    c.bench_function("evaluate_all_ranking/5x500", |b| {
        b.iter_batched(
            || TableScorer {
                users: m.iter().map(|x| &x.users).collect(),
                items: m.iter().map(|x| &x.items).collect(),
            },
            |scorer| eval::evaluate(&store, Split::Test, &[10, 20], &scorer, "bench", 0),
            BatchSize::SmallInput,
        )
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = stage1, stage2, stage3, evaluation
}
criterion_main!(benches);
