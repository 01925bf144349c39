//! Single-domain matrix factorization trained with the BPR loss.
//!
//! A user's preference for an item is the inner product of their embeddings.
//! Training minimizes the mean over sampled triplets of
//! `-ln σ(score(u, pos) - score(u, neg))`, keeping the parameters with the
//! best validation Recall@10.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{debug, info};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Reader, Writer};
use crate::dataset::{BprTriplet, InteractionStore, Split, TripletSampler};
use crate::error::{Error, Result};
use crate::eval::{self, Scorer};
use crate::nn::{self, dot, Algorithm, DenseMatrix, OptimizerState, ParamSet};

pub const DEFAULT_DIM: usize = 64;

const TABLE_MAGIC: &[u8; 8] = b"CATEMBED";

/// Dense per-entity vectors with one spare row after the last entity.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    n_entities: usize,
    data: DenseMatrix,
}

impl EmbeddingTable {
    pub fn zeros(n_entities: usize, dim: usize) -> Self {
        Self {
            n_entities,
            data: DenseMatrix::zeros(n_entities + 1, dim),
        }
    }

    /// Entries uniform in `[-scale, scale]`; the spare row stays zero.
    pub fn uniform<R: Rng + ?Sized>(n_entities: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(n_entities, dim);
        if scale > 0.0 {
            let dist = Uniform::new_inclusive(-scale, scale).expect("positive scale");
            for v in &mut t.data.as_mut_slice()[..n_entities * dim] {
                *v = dist.sample(rng);
            }
        }
        t
    }

    /// Wraps an `(n_entities + 1) × dim` matrix.
    pub fn from_matrix(n_entities: usize, data: DenseMatrix) -> Result<Self> {
        if data.rows() != n_entities + 1 {
            return Err(Error::shape(format!(
                "table for {n_entities} entities needs {} rows, got {}",
                n_entities + 1,
                data.rows()
            )));
        }
        if !data.is_finite() {
            return Err(Error::Numeric("embedding table has non-finite entries".into()));
        }
        Ok(Self { n_entities, data })
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.data
    }

    #[inline]
    pub fn row(&self, id: u32) -> &[f64] {
        self.data.row(id as usize)
    }

    #[inline]
    pub fn row_mut(&mut self, id: u32) -> &mut [f64] {
        self.data.row_mut(id as usize)
    }

    pub fn checked_row(&self, id: u32) -> Result<&[f64]> {
        if id as usize >= self.n_entities {
            return Err(Error::Index(format!("id {id} not below {}", self.n_entities)));
        }
        Ok(self.row(id))
    }

    /// `{magic, version, n_entities, dim, (n_entities + 1) · dim f64}`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(TABLE_MAGIC);
        w.u64(self.n_entities as u64);
        w.u64(self.dim() as u64);
        w.f64s(self.data.as_slice());
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, TABLE_MAGIC, origin)?;
        let n = r.len()?;
        let dim = r.len()?;
        let data = r.f64s((n + 1) * dim)?;
        r.finish()?;
        Self::from_matrix(n, DenseMatrix::from_vec(n + 1, dim, data)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }

    /// One line per entity: `id<TAB>v0<TAB>v1…`; the spare row is omitted.
    pub fn export_tsv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for id in 0..self.n_entities {
            write!(w, "{id}")?;
            for v in self.data.row(id) {
                write!(w, "\t{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

impl ParamSet for EmbeddingTable {
    fn segments(&self) -> Vec<&[f64]> {
        vec![self.data.as_slice()]
    }

    fn segments_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.data.as_mut_slice()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainMfModel {
    pub domain: usize,
    pub users: EmbeddingTable,
    pub items: EmbeddingTable,
}

impl DomainMfModel {
    pub fn new(domain: usize, users: EmbeddingTable, items: EmbeddingTable) -> Result<Self> {
        if users.dim() != items.dim() {
            return Err(Error::shape(format!(
                "user dim {} differs from item dim {}",
                users.dim(),
                items.dim()
            )));
        }
        Ok(Self { domain, users, items })
    }

    pub fn init<R: Rng + ?Sized>(store: &InteractionStore, domain: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        let users = EmbeddingTable::uniform(store.n_users(), dim, scale, rng);
        let items = EmbeddingTable::uniform(store.n_items(domain), dim, scale, rng);
        Self { domain, users, items }
    }

    pub fn dim(&self) -> usize {
        self.users.dim()
    }

    fn zeros_like(&self) -> Self {
        Self {
            domain: self.domain,
            users: EmbeddingTable::zeros(self.users.n_entities(), self.dim()),
            items: EmbeddingTable::zeros(self.items.n_entities(), self.dim()),
        }
    }
}

impl ParamSet for DomainMfModel {
    fn segments(&self) -> Vec<&[f64]> {
        vec![self.users.data.as_slice(), self.items.data.as_slice()]
    }

    fn segments_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.users.data.as_mut_slice(), self.items.data.as_mut_slice()]
    }
}

pub fn score(model: &DomainMfModel, user: u32, item: u32) -> Result<f64> {
    Ok(dot(model.users.checked_row(user)?, model.items.checked_row(item)?))
}

/// `-ln σ(pos - neg)`, evaluated as `softplus(neg - pos)`.
#[inline]
pub fn bpr_loss(score_pos: f64, score_neg: f64) -> f64 {
    nn::softplus(score_neg - score_pos)
}

/// Mean BPR loss over `batch` plus `weight_decay / 2 · ‖row‖²` for every
/// row a triplet touches, with the gradient for every embedding.
pub fn batch_loss_and_grad(model: &DomainMfModel, batch: &[BprTriplet], weight_decay: f64) -> (f64, DomainMfModel) {
    let mut grads = model.zeros_like();
    let loss = accumulate_batch(model, batch, weight_decay, &mut grads);
    (loss, grads)
}

fn accumulate_batch(model: &DomainMfModel, batch: &[BprTriplet], weight_decay: f64, grads: &mut DomainMfModel) -> f64 {
    let inv = 1.0 / batch.len().max(1) as f64;
    let dim = model.dim();
    let mut loss = 0.0;
    let mut diff = vec![0.0; dim];
    for t in batch {
        let u = model.users.row(t.user);
        let ip = model.items.row(t.pos);
        let ineg = model.items.row(t.neg);
        let x = dot(u, ip) - dot(u, ineg);
        loss += nn::softplus(-x) * inv;
        // d/dx softplus(-x) = -σ(-x)
        let g = -nn::sigmoid(-x) * inv;
        for k in 0..dim {
            diff[k] = ip[k] - ineg[k];
        }
        nn::axpy(g, &diff, grads.users.row_mut(t.user));
        nn::axpy(g, u, grads.items.row_mut(t.pos));
        nn::axpy(-g, u, grads.items.row_mut(t.neg));
        if weight_decay > 0.0 {
            let c = weight_decay * inv;
            loss += 0.5 * c * (dot(u, u) + dot(ip, ip) + dot(ineg, ineg));
            nn::axpy(c, u, grads.users.row_mut(t.user));
            nn::axpy(c, ip, grads.items.row_mut(t.pos));
            nn::axpy(c, ineg, grads.items.row_mut(t.neg));
        }
    }
    loss
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfConfig {
    pub dim: usize,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: String,
    pub init_scale: f64,
    pub weight_decay: f64,
}

impl Default for MfConfig {
    fn default() -> Self {
        Self {
            dim: DEFAULT_DIM,
            epochs: 50,
            patience: 5,
            batch_size: 1024,
            lr: 0.01,
            optimizer: "adam".into(),
            init_scale: 0.01,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_recall: f64,
}

#[derive(Debug, Clone)]
pub struct MfTrainOutput {
    pub model: DomainMfModel,
    pub curve: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Scores items with raw per-domain MF embeddings.
pub struct MfScorer<'a> {
    models: Vec<&'a DomainMfModel>,
}

impl<'a> MfScorer<'a> {
    pub fn new(models: &'a [DomainMfModel]) -> Self {
        Self {
            models: models.iter().collect(),
        }
    }

    /// Scorer for a single domain model, addressed by its own domain id.
    pub fn single(model: &'a DomainMfModel) -> SingleMfScorer<'a> {
        SingleMfScorer(model)
    }
}

pub struct SingleMfScorer<'a>(&'a DomainMfModel);

pub(crate) fn score_all_items(user_vec: &[f64], items: &EmbeddingTable, out: &mut [f64]) {
    for (j, o) in out.iter_mut().enumerate() {
        *o = dot(user_vec, items.row(j as u32));
    }
}

impl Scorer for MfScorer<'_> {
    fn score_items(&self, domain: usize, user: u32, out: &mut [f64]) {
        let m = self.models[domain];
        score_all_items(m.users.row(user), &m.items, out);
    }
}

impl Scorer for SingleMfScorer<'_> {
    fn score_items(&self, domain: usize, user: u32, out: &mut [f64]) {
        debug_assert_eq!(domain, self.0.domain);
        score_all_items(self.0.users.row(user), &self.0.items, out);
    }
}

/// Validation Recall@10 of a single-domain model.
pub fn validation_recall(model: &DomainMfModel, store: &InteractionStore) -> f64 {
    let m = eval::evaluate_domain(store, model.domain, Split::Valid, &[10], &MfScorer::single(model));
    m.at[&10].recall
}

/// Trains `model` on its domain's train split with early stopping on
/// validation Recall@10. Zero epochs return the model unchanged.
pub fn train_domain<R: Rng + ?Sized>(
    mut model: DomainMfModel,
    store: &InteractionStore,
    config: &MfConfig,
    rng: &mut R,
) -> Result<MfTrainOutput> {
    let domain = model.domain;
    if config.epochs == 0 {
        return Ok(MfTrainOutput {
            model,
            curve: Vec::new(),
            best_epoch: 0,
        });
    }
    if config.batch_size == 0 {
        return Err(Error::config("stage-1 batch size must be positive"));
    }
    let sampler = TripletSampler::new(store, domain)?;
    let n_train = store.domain(domain).n_interactions(Split::Train);
    let n_batches = n_train.div_ceil(config.batch_size);
    let mut opt = OptimizerState::new(Algorithm::parse(&config.optimizer)?, config.lr, &model);
    let mut grads = model.zeros_like();
    let has_valid = !store.users_with(domain, Split::Valid).is_empty();

    let mut best = model.clone();
    let mut best_recall = if has_valid { validation_recall(&model, store) } else { 0.0 };
    let mut best_epoch = 0;
    let mut curve = Vec::with_capacity(config.epochs);
    let mut stale = 0;
    for epoch in 1..=config.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..n_batches {
            let batch = sampler.sample(store, config.batch_size, rng);
            grads.users.data.fill(0.0);
            grads.items.data.fill(0.0);
            let loss = accumulate_batch(&model, &batch, config.weight_decay, &mut grads);
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    stage: "stage1",
                    epoch,
                    detail: format!("domain {domain}: batch loss {loss}"),
                });
            }
            opt.step(&mut model, &grads).map_err(|e| Error::Diverged {
                stage: "stage1",
                epoch,
                detail: format!("domain {domain}: {e}"),
            })?;
            epoch_loss += loss / n_batches as f64;
        }
        let val_recall = if has_valid { validation_recall(&model, store) } else { 0.0 };
        debug!("stage1 domain {domain} epoch {epoch}: loss {epoch_loss:.5} val R@10 {val_recall:.4}");
        curve.push(EpochLog {
            epoch,
            loss: epoch_loss,
            val_recall,
        });
        if !has_valid || val_recall > best_recall {
            best_recall = val_recall;
            best = model.clone();
            best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    info!("stage1 domain {domain}: best epoch {best_epoch}, val R@10 {best_recall:.4}");
    Ok(MfTrainOutput {
        model: best,
        curve,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split, RawDomain, RawInteractions, SplitRatios};
    use crate::nn::gradcheck::{grad_check, FD_STEP};
    use crate::seed;
    use proptest::prelude::*;

    fn table_from(rows: &[Vec<f64>]) -> EmbeddingTable {
        let dim = rows[0].len();
        let mut all = rows.to_vec();
        all.push(vec![0.0; dim]);
        EmbeddingTable::from_matrix(rows.len(), DenseMatrix::from_rows(&all).unwrap()).unwrap()
    }

    #[test]
    fn score_of_ones_is_dim() {
        let m = DomainMfModel::new(0, table_from(&[vec![1.0; 64]]), table_from(&[vec![1.0; 64]])).unwrap();
        assert_eq!(score(&m, 0, 0).unwrap(), 64.0);
    }

    #[test]
    fn score_of_orthogonal_vectors_is_zero() {
        let m = DomainMfModel::new(0, table_from(&[vec![1.0, 0.0]]), table_from(&[vec![0.0, 1.0]])).unwrap();
        assert_eq!(score(&m, 0, 0).unwrap(), 0.0);
    }

    #[test]
    fn score_matches_elementwise_sum() {
        let mut rng = seed::rng(5);
        let users = EmbeddingTable::uniform(3, 16, 1.0, &mut rng);
        let items = EmbeddingTable::uniform(4, 16, 1.0, &mut rng);
        let m = DomainMfModel::new(0, users, items).unwrap();
        let mut want = 0.0;
        for k in 0..16 {
            want += m.users.matrix().get(2, k) * m.items.matrix().get(3, k);
        }
        assert!((score(&m, 2, 3).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn score_rejects_out_of_range_ids() {
        let m = DomainMfModel::new(0, table_from(&[vec![1.0]]), table_from(&[vec![1.0]])).unwrap();
        assert!(matches!(score(&m, 1, 0), Err(Error::Index(_))));
        assert!(matches!(score(&m, 0, 1), Err(Error::Index(_))));
    }

    #[test]
    fn bpr_loss_reference_values() {
        assert!((bpr_loss(0.3, 0.3) - std::f64::consts::LN_2).abs() < 1e-15);
        // softplus(-1000) = ln(1 + e^-1000) ≈ e^-1000, far below f64 resolution of 0
        assert!(bpr_loss(1000.0, 0.0) < 1e-300);
        // softplus(1000) = 1000 + ln(1 + e^-1000) = 1000 to double precision
        assert_eq!(bpr_loss(0.0, 1000.0), 1000.0);
    }

    proptest! {
        #[test]
        fn bpr_loss_positive_and_decreasing(a in -30.0f64..30.0, b in -30.0f64..30.0, d in 0.01f64..5.0) {
            prop_assert!(bpr_loss(a, b) > 0.0);
            prop_assert!(bpr_loss(a + d, b) < bpr_loss(a, b));
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seed::rng(17);
        let model = DomainMfModel::new(
            0,
            EmbeddingTable::uniform(3, 5, 0.8, &mut rng),
            EmbeddingTable::uniform(4, 5, 0.8, &mut rng),
        )
        .unwrap();
        let batch = vec![
            BprTriplet { user: 0, pos: 1, neg: 2, domain: 0 },
            BprTriplet { user: 1, pos: 0, neg: 3, domain: 0 },
            BprTriplet { user: 2, pos: 3, neg: 1, domain: 0 },
            BprTriplet { user: 0, pos: 1, neg: 0, domain: 0 },
        ];
        for wd in [0.0, 0.1] {
            let (_, grads) = batch_loss_and_grad(&model, &batch, wd);
            let report = grad_check(|m: &DomainMfModel| batch_loss_and_grad(m, &batch, wd).0, &model, &grads, FD_STEP);
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn table_checkpoint_roundtrip_and_layout() {
        let mut rng = seed::rng(2);
        let t = EmbeddingTable::uniform(3, 2, 1.0, &mut rng);
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..8], b"CATEMBED");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(bytes[20..28].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 28 + 4 * 2 * 8);
        let back = EmbeddingTable::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, t);
        assert!(EmbeddingTable::from_bytes(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }

    fn block_world() -> InteractionStore {
        // users 0..40 like items 0..20, users 40..80 like items 20..40
        let mut pairs = Vec::new();
        for u in 0..80u32 {
            let base = if u < 40 { 0 } else { 20 };
            for i in 0..20 {
                pairs.push((u, base + i));
            }
        }
        let raw = RawInteractions {
            n_users: 80,
            domains: vec![RawDomain {
                name: "blocks".into(),
                n_items: 40,
                pairs,
            }],
        };
        split(&raw, SplitRatios::default(), 3).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let store = block_world();
        let mut rng = seed::rng(1);
        let init = DomainMfModel::init(&store, 0, 8, 0.01, &mut rng);
        let cfg = MfConfig { epochs: 0, ..MfConfig::default() };
        let out = train_domain(init.clone(), &store, &cfg, &mut rng).unwrap();
        assert_eq!(out.model, init);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn block_world_is_learned_and_replayable() {
        let store = block_world();
        let cfg = MfConfig {
            dim: 8,
            batch_size: 64,
            lr: 0.05,
            ..MfConfig::default()
        };
        let run = || {
            let mut rng = seed::rng(10);
            let init = DomainMfModel::init(&store, 0, cfg.dim, cfg.init_scale, &mut rng);
            train_domain(init, &store, &cfg, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model, b.model);
        let test = eval::evaluate_domain(&store, 0, Split::Test, &[10], &MfScorer::single(&a.model));
        assert!(test.at[&10].recall >= 0.9, "recall {}", test.at[&10].recall);
    }
}
