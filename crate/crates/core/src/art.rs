//! Stage 3: per-target-domain representation transfer.
//!
//! For target domain `d`, every other domain's user embedding passes through
//! its own adapter MLP. The target embedding attends over the adapted
//! vectors (single head, no projections, `K = V`), and the fused user vector
//!
//! ```text
//! h = e^d + ind(e) + Σ_s softmax(e^d · a_s / √m)_s a_s
//! ```
//!
//! replaces `e^d` in the BPR score. Adapter and `ind` output layers start at
//! zero, so an untrained model scores exactly like the stage-1 baseline.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bprmf::{score_all_items, EmbeddingTable};
use crate::checkpoint::{Reader, Writer};
use crate::dataset::{BprTriplet, InteractionStore, Split, TripletSampler};
use crate::error::{Error, Result};
use crate::eval::{self, Scorer};
use crate::nn::{self, dot, Algorithm, DenseMatrix, GradientBuffer, MlpParams, OptimizerState, ParamSet, Tape};

const MAGIC: &[u8; 8] = b"CATARTMD";

/// How adapted source embeddings are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArtMode {
    /// Scaled dot-product attention with the target embedding as query.
    Attention,
    /// Unweighted mean of the adapted sources.
    Mean,
    /// No source transfer: `h = e^d + ind(e)`.
    GlobalOnly,
}

impl ArtMode {
    fn code(self) -> u8 {
        match self {
            Self::Attention => 0,
            Self::Mean => 1,
            Self::GlobalOnly => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Self::Attention),
            1 => Some(Self::Mean),
            2 => Some(Self::GlobalOnly),
            _ => None,
        }
    }
}

/// Frozen upstream state shared by all stage-3 models.
#[derive(Debug, Clone, Copy)]
pub struct ArtInputs<'a> {
    /// Stage-1 user tables, indexed by domain id.
    pub users: &'a [EmbeddingTable],
    /// Stage-1 item tables, indexed by domain id.
    pub items: &'a [EmbeddingTable],
    /// Global embeddings from the frozen stage-2 encoder.
    pub global: &'a EmbeddingTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArtModel {
    pub target: usize,
    /// Source domain ids, ascending; `adapters[s]` belongs to `sources[s]`.
    pub sources: Vec<usize>,
    pub adapters: Vec<MlpParams>,
    pub ind: MlpParams,
    pub mode: ArtMode,
    /// Fine-tuned copy of the target's item table, present only when items
    /// are trained.
    pub items: Option<EmbeddingTable>,
}

#[derive(Debug, Clone)]
pub struct ArtGrads {
    pub adapters: Vec<GradientBuffer>,
    pub ind: GradientBuffer,
    pub items: Option<EmbeddingTable>,
}

impl ParamSet for ArtModel {
    fn segments(&self) -> Vec<&[f64]> {
        let mut s: Vec<&[f64]> = self.adapters.iter().flat_map(|a| a.segments()).collect();
        s.extend(self.ind.segments());
        if let Some(t) = &self.items {
            s.extend(t.segments());
        }
        s
    }

    fn segments_mut(&mut self) -> Vec<&mut [f64]> {
        let mut s: Vec<&mut [f64]> = self.adapters.iter_mut().flat_map(|a| a.segments_mut()).collect();
        s.extend(self.ind.segments_mut());
        if let Some(t) = &mut self.items {
            s.extend(t.segments_mut());
        }
        s
    }
}

impl ParamSet for ArtGrads {
    fn segments(&self) -> Vec<&[f64]> {
        let mut s: Vec<&[f64]> = self.adapters.iter().flat_map(|a| a.segments()).collect();
        s.extend(self.ind.segments());
        if let Some(t) = &self.items {
            s.extend(t.segments());
        }
        s
    }

    fn segments_mut(&mut self) -> Vec<&mut [f64]> {
        let mut s: Vec<&mut [f64]> = self.adapters.iter_mut().flat_map(|a| a.segments_mut()).collect();
        s.extend(self.ind.segments_mut());
        if let Some(t) = &mut self.items {
            s.extend(t.segments_mut());
        }
        s
    }
}

impl ArtGrads {
    pub fn zeros_like(model: &ArtModel) -> Self {
        Self {
            adapters: model.adapters.iter().map(GradientBuffer::zeros_like).collect(),
            ind: GradientBuffer::zeros_like(&model.ind),
            items: model
                .items
                .as_ref()
                .map(|t| EmbeddingTable::zeros(t.n_entities(), t.dim())),
        }
    }

    pub fn zero(&mut self) {
        for s in self.segments_mut() {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// `h = e^d + ind(e) + e^a`, with the parts kept for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedUserEmbedding {
    pub h: Vec<f64>,
    pub domain: Vec<f64>,
    pub adapted_global: Vec<f64>,
    pub transferred: Vec<f64>,
}

struct BatchCache {
    q: DenseMatrix,
    values: Vec<DenseMatrix>,
    weights: DenseMatrix,
    adapter_tapes: Vec<Tape>,
    ind_tape: Tape,
}

fn gather(table: &EmbeddingTable, users: &[u32]) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(users.len(), table.dim());
    for (r, &u) in users.iter().enumerate() {
        m.row_mut(r).copy_from_slice(table.row(u));
    }
    m
}

impl ArtModel {
    /// Adapters and `ind` are `[m, m, m]` MLPs with zeroed output layers.
    pub fn new<R: Rng + ?Sized>(target: usize, n_domains: usize, dim: usize, mode: ArtMode, rng: &mut R) -> Result<Self> {
        if target >= n_domains {
            return Err(Error::Index(format!("target {target} not below {n_domains}")));
        }
        let sources: Vec<usize> = (0..n_domains).filter(|&d| d != target).collect();
        if sources.is_empty() {
            return Err(Error::config("transfer needs at least one source domain"));
        }
        let mut adapters = Vec::with_capacity(sources.len());
        for _ in &sources {
            let mut a = MlpParams::new(&[dim, dim, dim], rng)?;
            a.zero_output_layer();
            adapters.push(a);
        }
        let mut ind = MlpParams::new(&[dim, dim, dim], rng)?;
        ind.zero_output_layer();
        Ok(Self {
            target,
            sources,
            adapters,
            ind,
            mode,
            items: None,
        })
    }

    /// Trains a private copy of the target's item table from here on.
    pub fn unfreeze_items(&mut self, items: &EmbeddingTable) {
        self.items = Some(items.clone());
    }

    pub fn dim(&self) -> usize {
        self.ind.input_dim()
    }

    pub fn item_table<'a>(&'a self, inputs: &ArtInputs<'a>) -> &'a EmbeddingTable {
        self.items.as_ref().unwrap_or(&inputs.items[self.target])
    }

    /// Adapted sources `a_s`, attention weights and `Σ w_s a_s` for a single
    /// user. `sources[s]` is the raw embedding of `self.sources[s]`.
    pub fn attend(&self, query: &[f64], sources: &[&[f64]]) -> Result<(Vec<f64>, Vec<f64>)> {
        if sources.is_empty() {
            return Err(Error::config("attention needs at least one source"));
        }
        if sources.len() != self.adapters.len() {
            return Err(Error::shape(format!(
                "{} source embeddings for {} adapters",
                sources.len(),
                self.adapters.len()
            )));
        }
        let m = self.dim();
        if query.len() != m || sources.iter().any(|s| s.len() != m) {
            return Err(Error::shape(format!("attention inputs must have length {m}")));
        }
        let values = sources
            .iter()
            .zip(&self.adapters)
            .map(|(s, a)| Ok(a.infer(&DenseMatrix::from_vec(1, m, s.to_vec())?)?.into_vec()))
            .collect::<Result<Vec<_>>>()?;
        let weights = self.weights_for(query, values.iter().map(Vec::as_slice));
        let mut out = vec![0.0; m];
        for (w, v) in weights.iter().zip(&values) {
            nn::axpy(*w, v, &mut out);
        }
        Ok((out, weights))
    }

    fn weights_for<'v>(&self, query: &[f64], values: impl Iterator<Item = &'v [f64]>) -> Vec<f64> {
        let scale = 1.0 / (self.dim() as f64).sqrt();
        let mut w: Vec<f64> = values.map(|v| dot(query, v) * scale).collect();
        match self.mode {
            ArtMode::Attention => nn::softmax_inplace(&mut w),
            ArtMode::Mean => {
                let u = 1.0 / w.len() as f64;
                w.iter_mut().for_each(|x| *x = u);
            }
            ArtMode::GlobalOnly => w.iter_mut().for_each(|x| *x = 0.0),
        }
        w
    }

    pub fn fuse(&self, domain: &[f64], global: &[f64], transferred: &[f64]) -> Result<FusedUserEmbedding> {
        let m = self.dim();
        if domain.len() != m || global.len() != m || transferred.len() != m {
            return Err(Error::shape(format!("fusion inputs must have length {m}")));
        }
        let adapted_global = self.ind.infer(&DenseMatrix::from_vec(1, m, global.to_vec())?)?.into_vec();
        let h = (0..m).map(|k| domain[k] + adapted_global[k] + transferred[k]).collect();
        Ok(FusedUserEmbedding {
            h,
            domain: domain.to_vec(),
            adapted_global,
            transferred: transferred.to_vec(),
        })
    }

    /// Full single-user path through attention and fusion.
    pub fn fused_user(&self, inputs: &ArtInputs<'_>, user: u32) -> Result<(FusedUserEmbedding, Vec<f64>)> {
        let query = inputs.users[self.target].checked_row(user)?;
        let srcs = self
            .sources
            .iter()
            .map(|&s| inputs.users[s].checked_row(user))
            .collect::<Result<Vec<_>>>()?;
        let (ea, w) = match self.mode {
            ArtMode::GlobalOnly => (vec![0.0; self.dim()], vec![0.0; self.sources.len()]),
            _ => self.attend(query, &srcs)?,
        };
        let fused = self.fuse(query, inputs.global.checked_row(user)?, &ea)?;
        Ok((fused, w))
    }

    fn forward_batch(&self, inputs: &ArtInputs<'_>, users: &[u32]) -> Result<(DenseMatrix, BatchCache)> {
        let q = gather(&inputs.users[self.target], users);
        let mut values = Vec::with_capacity(self.sources.len());
        let mut adapter_tapes = Vec::with_capacity(self.sources.len());
        if self.mode != ArtMode::GlobalOnly {
            for (&s, a) in self.sources.iter().zip(&self.adapters) {
                let (v, tape) = a.forward(&gather(&inputs.users[s], users))?;
                values.push(v);
                adapter_tapes.push(tape);
            }
        }
        let (gi, ind_tape) = self.ind.forward(&gather(inputs.global, users))?;
        let mut h = q.clone();
        nn::axpy(1.0, gi.as_slice(), h.as_mut_slice());
        let n_src = self.sources.len();
        let mut weights = DenseMatrix::zeros(users.len(), n_src);
        if self.mode != ArtMode::GlobalOnly {
            for r in 0..users.len() {
                let w = self.weights_for(q.row(r), values.iter().map(|v| v.row(r)));
                for (s, ws) in w.iter().enumerate() {
                    nn::axpy(*ws, values[s].row(r), h.row_mut(r));
                }
                weights.row_mut(r).copy_from_slice(&w);
            }
        }
        Ok((
            h,
            BatchCache {
                q,
                values,
                weights,
                adapter_tapes,
                ind_tape,
            },
        ))
    }

    fn backward_batch(&self, cache: BatchCache, dh: &DenseMatrix, grads: &mut ArtGrads) -> Result<()> {
        self.ind.backward_into(cache.ind_tape, dh, &mut grads.ind)?;
        if self.mode == ArtMode::GlobalOnly {
            return Ok(());
        }
        let (b, m) = dh.shape();
        let n_src = self.sources.len();
        let scale = 1.0 / (m as f64).sqrt();
        let mut dv: Vec<DenseMatrix> = (0..n_src).map(|_| DenseMatrix::zeros(b, m)).collect();
        let mut dw = vec![0.0; n_src];
        for r in 0..b {
            let w = cache.weights.row(r);
            let g = dh.row(r);
            for s in 0..n_src {
                nn::axpy(w[s], g, dv[s].row_mut(r));
            }
            if self.mode == ArtMode::Attention {
                for s in 0..n_src {
                    dw[s] = dot(g, cache.values[s].row(r));
                }
                let mean: f64 = (0..n_src).map(|s| w[s] * dw[s]).sum();
                for s in 0..n_src {
                    let dlogit = w[s] * (dw[s] - mean);
                    nn::axpy(dlogit * scale, cache.q.row(r), dv[s].row_mut(r));
                }
            }
        }
        for ((a, tape), (g, d)) in self
            .adapters
            .iter()
            .zip(cache.adapter_tapes)
            .zip(grads.adapters.iter_mut().zip(&dv))
        {
            a.backward_into(tape, d, g)?;
        }
        Ok(())
    }

    /// Fused user vectors for every user.
    pub fn fused_table(&self, inputs: &ArtInputs<'_>) -> Result<EmbeddingTable> {
        let n_users = inputs.users[self.target].n_entities();
        let mut out = DenseMatrix::zeros(n_users + 1, self.dim());
        const CHUNK: u32 = 1024;
        let mut start = 0u32;
        while (start as usize) < n_users {
            let end = (start + CHUNK).min(n_users as u32);
            let users: Vec<u32> = (start..end).collect();
            let (h, _) = self.forward_batch(inputs, &users)?;
            for r in 0..h.rows() {
                out.row_mut(start as usize + r).copy_from_slice(h.row(r));
            }
            start = end;
        }
        EmbeddingTable::from_matrix(n_users, out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC);
        w.u64(self.target as u64);
        w.u64(self.dim() as u64);
        w.u8(self.mode.code());
        w.usizes(&self.sources);
        w.mlp(&self.ind);
        for a in &self.adapters {
            w.mlp(a);
        }
        match &self.items {
            Some(t) => {
                w.u8(1);
                w.u64(t.n_entities() as u64);
                w.f64s(t.matrix().as_slice());
            }
            None => w.u8(0),
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, MAGIC, origin)?;
        let target = r.len()?;
        let dim = r.len()?;
        let code = r.u8()?;
        let mode = ArtMode::from_code(code).ok_or_else(|| r.err(format!("unknown mode {code}")))?;
        let sources = r.usizes()?;
        let ind = r.mlp()?;
        let adapters = (0..sources.len()).map(|_| r.mlp()).collect::<Result<Vec<_>>>()?;
        let items = match r.u8()? {
            0 => None,
            _ => {
                let n = r.len()?;
                let data = r.f64s((n + 1) * dim)?;
                Some(EmbeddingTable::from_matrix(n, DenseMatrix::from_vec(n + 1, dim, data)?)?)
            }
        };
        r.finish()?;
        let sizes = [dim, dim, dim];
        if ind.layer_sizes() != sizes || adapters.iter().any(|a| a.layer_sizes() != sizes) {
            return Err(Error::Checkpoint {
                path: origin.to_owned(),
                msg: "adapter sizes inconsistent with dimension".into(),
            });
        }
        Ok(Self {
            target,
            sources,
            adapters,
            ind,
            mode,
            items,
        })
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
}

#[inline]
pub fn score_fused(h: &[f64], item: &[f64]) -> f64 {
    dot(h, item)
}

/// Mean BPR loss over `batch` with fused user vectors, and its gradient
/// with respect to every trainable parameter of `model`.
pub fn fused_bpr_loss(model: &ArtModel, inputs: &ArtInputs<'_>, batch: &[BprTriplet]) -> Result<(f64, ArtGrads)> {
    let mut grads = ArtGrads::zeros_like(model);
    let loss = fused_bpr_into(model, inputs, batch, &mut grads)?;
    Ok((loss, grads))
}

fn fused_bpr_into(model: &ArtModel, inputs: &ArtInputs<'_>, batch: &[BprTriplet], grads: &mut ArtGrads) -> Result<f64> {
    let users: Vec<u32> = batch.iter().map(|t| t.user).collect();
    let (h, cache) = model.forward_batch(inputs, &users)?;
    let items = model.item_table(inputs);
    let inv = 1.0 / batch.len().max(1) as f64;
    let mut dh = DenseMatrix::zeros(h.rows(), h.cols());
    let mut loss = 0.0;
    for (r, t) in batch.iter().enumerate() {
        let (ip, ineg) = (items.row(t.pos), items.row(t.neg));
        let x = score_fused(h.row(r), ip) - score_fused(h.row(r), ineg);
        loss += nn::softplus(-x) * inv;
        let g = -nn::sigmoid(-x) * inv;
        let d = dh.row_mut(r);
        for k in 0..d.len() {
            d[k] = g * (ip[k] - ineg[k]);
        }
        if let Some(gi) = grads.items.as_mut() {
            nn::axpy(g, h.row(r), gi.row_mut(t.pos));
            nn::axpy(-g, h.row(r), gi.row_mut(t.neg));
        }
    }
    model.backward_batch(cache, &dh, grads)?;
    Ok(loss)
}

/// Ranks items with precomputed per-domain user and item tables.
pub struct TableScorer<'a> {
    pub users: Vec<&'a EmbeddingTable>,
    pub items: Vec<&'a EmbeddingTable>,
}

impl Scorer for TableScorer<'_> {
    fn score_items(&self, domain: usize, user: u32, out: &mut [f64]) {
        score_all_items(self.users[domain].row(user), self.items[domain], out);
    }
}

fn validation_recall(model: &ArtModel, inputs: &ArtInputs<'_>, store: &InteractionStore) -> Result<f64> {
    let fused = model.fused_table(inputs)?;
    let mut users: Vec<&EmbeddingTable> = inputs.users.iter().collect();
    let mut items: Vec<&EmbeddingTable> = inputs.items.iter().collect();
    users[model.target] = &fused;
    items[model.target] = model.item_table(inputs);
    let scorer = TableScorer { users, items };
    let m = eval::evaluate_domain(store, model.target, Split::Valid, &[10], &scorer);
    Ok(m.at[&10].recall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: String,
    pub unfreeze_items: bool,
}

impl Default for ArtConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            patience: 5,
            batch_size: 1024,
            lr: 1e-3,
            optimizer: "adam".into(),
            unfreeze_items: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArtTrainOutput {
    pub model: ArtModel,
    pub curve: Vec<crate::bprmf::EpochLog>,
    pub best_epoch: usize,
}

/// BPR fine-tuning of adapters and `ind` on the target domain. The
/// untrained model's validation Recall@10 is the bar to beat; it is kept
/// unless a later epoch strictly improves on it.
pub fn train_art<R: Rng + ?Sized>(
    mut model: ArtModel,
    inputs: &ArtInputs<'_>,
    store: &InteractionStore,
    config: &ArtConfig,
    rng: &mut R,
) -> Result<ArtTrainOutput> {
    let d = model.target;
    if config.unfreeze_items && model.items.is_none() {
        model.unfreeze_items(&inputs.items[d]);
    }
    if config.epochs == 0 {
        return Ok(ArtTrainOutput {
            model,
            curve: Vec::new(),
            best_epoch: 0,
        });
    }
    if config.batch_size == 0 {
        return Err(Error::config("stage-3 batch size must be positive"));
    }
    let sampler = TripletSampler::new(store, d)?;
    let n_batches = store.domain(d).n_interactions(Split::Train).div_ceil(config.batch_size);
    let mut opt = OptimizerState::new(Algorithm::parse(&config.optimizer)?, config.lr, &model);
    let mut grads = ArtGrads::zeros_like(&model);
    let has_valid = !store.users_with(d, Split::Valid).is_empty();

    let mut best = model.clone();
    let mut best_recall = if has_valid { validation_recall(&model, inputs, store)? } else { 0.0 };
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut curve = Vec::new();
    for epoch in 1..=config.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..n_batches {
            let batch = sampler.sample(store, config.batch_size, rng);
            grads.zero();
            let loss = fused_bpr_into(&model, inputs, &batch, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    stage: "stage3",
                    epoch,
                    detail: format!("domain {d}: batch loss {loss}"),
                });
            }
            opt.step(&mut model, &grads).map_err(|e| Error::Diverged {
                stage: "stage3",
                epoch,
                detail: format!("domain {d}: {e}"),
            })?;
            epoch_loss += loss / n_batches as f64;
        }
        let val_recall = if has_valid { validation_recall(&model, inputs, store)? } else { 0.0 };
        debug!("stage3 domain {d} epoch {epoch}: loss {epoch_loss:.5} val R@10 {val_recall:.4}");
        curve.push(crate::bprmf::EpochLog {
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
    info!("stage3 domain {d}: best epoch {best_epoch}, val R@10 {best_recall:.4}");
    Ok(ArtTrainOutput {
        model: best,
        curve,
        best_epoch,
    })
}

/// Mean attention weight per source domain over `users`, in
/// `model.sources` order.
pub fn report_attention(model: &ArtModel, inputs: &ArtInputs<'_>, users: &[u32]) -> Result<Vec<f64>> {
    if model.mode == ArtMode::GlobalOnly {
        return Err(Error::config("a global-only model has no attention weights"));
    }
    let mut mean = vec![0.0; model.sources.len()];
    if users.is_empty() {
        return Ok(mean);
    }
    for chunk in users.chunks(1024) {
        let (_, cache) = model.forward_batch(inputs, chunk)?;
        for r in 0..chunk.len() {
            nn::axpy(1.0, cache.weights.row(r), &mut mean);
        }
    }
    mean.iter_mut().for_each(|v| *v /= users.len() as f64);
    Ok(mean)
}

/// Rows are target domains, columns source domains, `-` on the diagonal.
/// `(target, sources, mean weights)` for one trained model.
pub type AttentionRow = (usize, Vec<usize>, Vec<f64>);

pub fn attention_matrix_tsv(names: &[String], rows: &[AttentionRow]) -> String {
    let n = names.len();
    let mut grid = vec![vec![None; n]; n];
    for (t, sources, weights) in rows {
        for (s, w) in sources.iter().zip(weights) {
            grid[*t][*s] = Some(*w);
        }
    }
    let mut out = String::from("target");
    for name in names {
        let _ = write!(out, "\t{name}");
    }
    out.push('\n');
    for (t, row) in grid.iter().enumerate() {
        out.push_str(&names[t]);
        for (s, cell) in row.iter().enumerate() {
            match cell {
                _ if s == t => out.push_str("\t-"),
                Some(w) => {
                    let _ = write!(out, "\t{w:.6}");
                }
                None => out.push_str("\tNA"),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{grad_check, FD_STEP};
    use crate::seed;
    use proptest::prelude::*;

    fn identity_mlp(m: usize) -> MlpParams {
        // PReLU slope 1 makes the hidden layer linear
        let mut mlp = MlpParams::zeros(&[m, m, m]).unwrap();
        for k in 0..2 {
            let l = mlp.layer_mut(k);
            l.weight = DenseMatrix::identity(m);
            if let Some(s) = &mut l.prelu {
                s.iter_mut().for_each(|v| *v = 1.0);
            }
        }
        mlp
    }

    fn toy(seed_: u64, n: usize, n_users: usize, m: usize) -> (Vec<EmbeddingTable>, Vec<EmbeddingTable>, EmbeddingTable) {
        let mut rng = seed::rng(seed_);
        let users = (0..n).map(|_| EmbeddingTable::uniform(n_users, m, 1.0, &mut rng)).collect();
        let items = (0..n).map(|_| EmbeddingTable::uniform(6, m, 1.0, &mut rng)).collect();
        let global = EmbeddingTable::uniform(n_users, m, 1.0, &mut rng);
        (users, items, global)
    }

    #[test]
    fn singleton_source_gets_full_weight() {
        let mut rng = seed::rng(1);
        let mut model = ArtModel::new(0, 2, 4, ArtMode::Attention, &mut rng).unwrap();
        model.adapters[0] = identity_mlp(4);
        let (ea, w) = model.attend(&[1.0, 2.0, 0.0, 0.0], &[&[0.5, 0.5, 0.5, 0.5]]).unwrap();
        assert_eq!(w, vec![1.0]);
        assert_eq!(ea, vec![0.5; 4]);
    }

    #[test]
    fn identical_sources_split_evenly() {
        let mut rng = seed::rng(1);
        let model = ArtModel::new(0, 3, 4, ArtMode::Attention, &mut rng).unwrap();
        let s = [0.2, -0.1, 0.3, 0.0];
        let (_, w) = model.attend(&[1.0, 0.0, 0.0, 0.0], &[&s, &s]).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);
    }

    #[test]
    fn hand_computed_weights() {
        let mut rng = seed::rng(1);
        let mut model = ArtModel::new(0, 3, 4, ArtMode::Attention, &mut rng).unwrap();
        model.adapters = vec![identity_mlp(4), identity_mlp(4)];
        let q = [1.0, 1.0, 0.0, 0.0];
        // a = q (logit ‖q‖²/2 = 1), b ⟂ q (logit 0)
        let (_, w) = model.attend(&q, &[&q, &[0.0, 0.0, 3.0, 0.0]]).unwrap();
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn attend_without_sources_is_config_error() {
        let mut rng = seed::rng(1);
        let model = ArtModel::new(0, 2, 4, ArtMode::Attention, &mut rng).unwrap();
        assert!(matches!(model.attend(&[0.0; 4], &[]), Err(Error::Config(_))));
        assert!(matches!(ArtModel::new(0, 1, 4, ArtMode::Attention, &mut rng), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn weights_are_a_permutation_equivariant_distribution(
            vals in proptest::collection::vec(-2.0f64..2.0, 4 * 5),
            seed_ in 0u64..1000,
        ) {
            let mut rng = seed::rng(seed_);
            let mut model = ArtModel::new(0, 4, 4, ArtMode::Attention, &mut rng).unwrap();
            for a in &mut model.adapters {
                *a = MlpParams::new(&[4, 4, 4], &mut rng).unwrap();
            }
            let q = &vals[..4];
            let s: Vec<&[f64]> = vals[4..16].chunks(4).collect();
            let (_, w) = model.attend(q, &s).unwrap();
            prop_assert!(w.iter().all(|x| *x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // rotate sources together with their adapters
            let mut rotated = model.clone();
            rotated.adapters.rotate_left(1);
            let s2 = vec![s[1], s[2], s[0]];
            let (_, w2) = rotated.attend(q, &s2).unwrap();
            for k in 0..3 {
                prop_assert!((w2[k] - w[(k + 1) % 3]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_cases() {
        let mut rng = seed::rng(4);
        let model = ArtModel::new(0, 3, 3, ArtMode::Attention, &mut rng).unwrap();
        let e = [0.1, -0.2, 0.3];
        let f = model.fuse(&e, &[1.0, 1.0, 1.0], &[0.0; 3]).unwrap();
        assert_eq!(f.h, e.to_vec());

        let mut model = model;
        model.ind = MlpParams::new(&[3, 3, 3], &mut rng).unwrap();
        let v = [0.5, -1.0, 2.0];
        let f = model.fuse(&v, &v, &v).unwrap();
        let ind = model.ind.infer(&DenseMatrix::from_vec(1, 3, v.to_vec()).unwrap()).unwrap();
        for k in 0..3 {
            assert!((f.h[k] - (v[k] + ind.get(0, k) + v[k])).abs() < 1e-15);
            assert_eq!(f.h[k], f.domain[k] + f.adapted_global[k] + f.transferred[k]);
        }
        assert!(matches!(model.fuse(&v, &v, &[0.0; 2]), Err(Error::Shape(_))));
    }

    #[test]
    fn score_fused_mirrors_dot() {
        assert_eq!(score_fused(&[1.0; 64], &[1.0; 64]), 64.0);
        assert_eq!(score_fused(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        let (a, b) = ([0.3, -1.5, 2.0], [1.1, 0.4, -0.7]);
        assert!((score_fused(&a, &b) - (0.33 - 0.6 - 1.4)).abs() < 1e-15);
    }

    #[test]
    fn untrained_model_scores_like_stage_one() {
        let (users, items, global) = toy(3, 3, 5, 4);
        let inputs = ArtInputs {
            users: &users,
            items: &items,
            global: &global,
        };
        for mode in [ArtMode::Attention, ArtMode::Mean, ArtMode::GlobalOnly] {
            let model = ArtModel::new(1, 3, 4, mode, &mut seed::rng(9)).unwrap();
            let fused = model.fused_table(&inputs).unwrap();
            assert_eq!(fused.matrix().as_slice(), users[1].matrix().as_slice());
        }
    }

    fn randomized(mode: ArtMode, unfreeze: Option<&EmbeddingTable>) -> ArtModel {
        let mut rng = seed::rng(31);
        let mut model = ArtModel::new(0, 3, 4, mode, &mut rng).unwrap();
        for a in &mut model.adapters {
            *a = MlpParams::new(&[4, 4, 4], &mut rng).unwrap();
        }
        model.ind = MlpParams::new(&[4, 4, 4], &mut rng).unwrap();
        if let Some(t) = unfreeze {
            model.unfreeze_items(t);
        }
        model
    }

    #[test]
    fn fused_loss_gradient_matches_finite_differences() {
        let (users, items, global) = toy(5, 3, 4, 4);
        let inputs = ArtInputs {
            users: &users,
            items: &items,
            global: &global,
        };
        let batch: Vec<BprTriplet> = (0..4)
            .map(|u| BprTriplet {
                user: u,
                pos: u,
                neg: 5 - u,
                domain: 0,
            })
            .collect();
        for (mode, unfreeze) in [
            (ArtMode::Attention, false),
            (ArtMode::Attention, true),
            (ArtMode::Mean, false),
            (ArtMode::GlobalOnly, false),
        ] {
            let model = randomized(mode, unfreeze.then_some(&items[0]));
            let (_, grads) = fused_bpr_loss(&model, &inputs, &batch).unwrap();
            let report = grad_check(
                |p: &ArtModel| fused_bpr_loss(p, &inputs, &batch).unwrap().0,
                &model,
                &grads,
                FD_STEP,
            );
            assert!(report.max_rel_error < 1e-4, "{mode:?}: {report:?}");
        }
    }

    #[test]
    fn batch_path_matches_single_user_path() {
        let (users, items, global) = toy(6, 4, 5, 4);
        let inputs = ArtInputs {
            users: &users,
            items: &items,
            global: &global,
        };
        let mut model = ArtModel::new(2, 4, 4, ArtMode::Attention, &mut seed::rng(2)).unwrap();
        for a in &mut model.adapters {
            *a = MlpParams::new(&[4, 4, 4], &mut seed::rng(3)).unwrap();
        }
        let table = model.fused_table(&inputs).unwrap();
        for u in 0..5 {
            let (f, _) = model.fused_user(&inputs, u).unwrap();
            for k in 0..4 {
                assert!((f.h[k] - table.row(u)[k]).abs() < 1e-12);
            }
        }
        let w = report_attention(&model, &inputs, &[0, 1, 2, 3, 4]).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let (_, items, _) = toy(1, 3, 2, 4);
        for unfreeze in [false, true] {
            let model = randomized(ArtMode::Mean, unfreeze.then_some(&items[0]));
            let bytes = model.to_bytes();
            assert_eq!(ArtModel::from_bytes(&bytes, Path::new("mem")).unwrap(), model);
        }
    }

    #[test]
    fn matrix_tsv_layout() {
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let tsv = attention_matrix_tsv(&names, &[(0, vec![1, 2], vec![0.25, 0.75])]);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines[0], "target\ta\tb\tc");
        assert_eq!(lines[1], "a\t-\t0.250000\t0.750000");
        assert_eq!(lines[2], "b\tNA\t-\tNA");
    }
}
