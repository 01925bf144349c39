//! Shared fixtures for the benchmarks.

use catart::bprmf::{DomainMfModel, EmbeddingTable};
use catart::dataset::{InteractionStore, SplitRatios};
use catart::synth::{self, WorldSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DIM: usize = 64;

/// A `correlated-5` world shrunk to `n_users` users and `n_items` items per domain.
pub fn store(n_users: usize, n_items: usize) -> InteractionStore {
    let mut spec: WorldSpec = synth::make_scenario("correlated-5", 7).expect("preset");
    spec.n_users = n_users;
    for d in &mut spec.domains {
        d.n_items = n_items;
    }
    synth::generate(&spec)
        .expect("world")
        .store(SplitRatios::default(), 11)
        .expect("split")
}

/// Randomly initialized per-domain models (training quality is irrelevant here).
pub fn models(store: &InteractionStore) -> Vec<DomainMfModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    (0..store.n_domains())
        .map(|d| DomainMfModel::init(store, d, DIM, 0.1, &mut rng))
        .collect()
}

pub fn user_tables(models: &[DomainMfModel]) -> Vec<EmbeddingTable> {
    models.iter().map(|m| m.users.clone()).collect()
}

pub fn item_tables(models: &[DomainMfModel]) -> Vec<EmbeddingTable> {
    models.iter().map(|m| m.items.clone()).collect()
}
