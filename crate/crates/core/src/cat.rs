//! Stage 2: a contrastive masked autoencoder over concatenated per-domain
//! user embeddings.
//!
//! Each user's frozen domain embeddings are concatenated in `domain_order`
//! and encoded to one `m`-dimensional global embedding. Training mixes three
//! terms: plain reconstruction, reconstruction from an input with one or
//! more domain slots replaced by a trainable mask vector, and an in-batch
//! bidirectional contrastive loss between the clean and masked encodings.

use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bprmf::EmbeddingTable;
use crate::checkpoint::{Reader, Writer};
use crate::dataset::shuffle;
use crate::error::{Error, Result};
use crate::nn::{self, dot, norm, Algorithm, DenseMatrix, GradientBuffer, MlpParams, OptimizerState, ParamSet};

const MAGIC: &[u8; 8] = b"CATMODEL";

pub const DEFAULT_TAU: f64 = 0.1;
pub const DEFAULT_ALPHA: f64 = 0.4;

/// Switches that select variants of the loss and the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CatOptions {
    /// One mask vector per domain slot instead of a single shared one.
    pub per_domain_mask: bool,
    /// Squared residual norms in both reconstruction terms.
    pub squared_norm: bool,
    /// Drop the positive pair from the contrastive denominators.
    pub exclude_positive: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CatModel {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    /// One vector, or one per slot with `per_domain_mask`.
    pub masks: Vec<Vec<f64>>,
    pub tau: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub domain_order: Vec<usize>,
    pub options: CatOptions,
}

/// Gradient with the same layout as [`CatModel`]'s trainable state.
#[derive(Debug, Clone)]
pub struct CatGrads {
    pub encoder: GradientBuffer,
    pub decoder: GradientBuffer,
    pub masks: Vec<Vec<f64>>,
}

impl ParamSet for CatModel {
    fn segments(&self) -> Vec<&[f64]> {
        let mut s = self.encoder.segments();
        s.extend(self.decoder.segments());
        s.extend(self.masks.iter().map(Vec::as_slice));
        s
    }

    fn segments_mut(&mut self) -> Vec<&mut [f64]> {
        let mut s = self.encoder.segments_mut();
        s.extend(self.decoder.segments_mut());
        s.extend(self.masks.iter_mut().map(Vec::as_mut_slice));
        s
    }
}

impl ParamSet for CatGrads {
    fn segments(&self) -> Vec<&[f64]> {
        let mut s = self.encoder.segments();
        s.extend(self.decoder.segments());
        s.extend(self.masks.iter().map(Vec::as_slice));
        s
    }

    fn segments_mut(&mut self) -> Vec<&mut [f64]> {
        let mut s = self.encoder.segments_mut();
        s.extend(self.decoder.segments_mut());
        s.extend(self.masks.iter_mut().map(Vec::as_mut_slice));
        s
    }
}

impl CatGrads {
    pub fn zeros_like(model: &CatModel) -> Self {
        Self {
            encoder: GradientBuffer::zeros_like(&model.encoder),
            decoder: GradientBuffer::zeros_like(&model.decoder),
            masks: model.masks.iter().map(|v| vec![0.0; v.len()]).collect(),
        }
    }
}

/// A user's concatenated input with the set of masked slots.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatUserInput {
    pub user: u32,
    pub vector: Vec<f64>,
    /// Masked slot positions within `domain_order`, ascending.
    pub mask_set: Vec<usize>,
}

impl CatModel {
    /// Encoder `[n·m, 5m, 3m, m]`, decoder `[m, 3m, 5m, n·m]`, zero mask.
    pub fn new<R: Rng + ?Sized>(domain_order: Vec<usize>, dim: usize, options: CatOptions, rng: &mut R) -> Result<Self> {
        let n = domain_order.len();
        if n < 2 {
            return Err(Error::config(format!("CAT needs at least two domains, got {n}")));
        }
        if dim == 0 {
            return Err(Error::config("embedding dimension must be positive"));
        }
        let encoder = MlpParams::new(&[n * dim, 5 * dim, 3 * dim, dim], rng)?;
        let decoder = MlpParams::new(&[dim, 3 * dim, 5 * dim, n * dim], rng)?;
        let n_masks = if options.per_domain_mask { n } else { 1 };
        Ok(Self {
            encoder,
            decoder,
            masks: vec![vec![0.0; dim]; n_masks],
            tau: DEFAULT_TAU,
            alpha1: DEFAULT_ALPHA,
            alpha2: DEFAULT_ALPHA,
            domain_order,
            options,
        })
    }

    pub fn with_weights(mut self, tau: f64, alpha1: f64, alpha2: f64) -> Result<Self> {
        check_weights(tau, alpha1, alpha2)?;
        self.tau = tau;
        self.alpha1 = alpha1;
        self.alpha2 = alpha2;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn n_domains(&self) -> usize {
        self.domain_order.len()
    }

    pub fn mask_vector(&self, slot: usize) -> &[f64] {
        if self.options.per_domain_mask {
            &self.masks[slot]
        } else {
            &self.masks[0]
        }
    }

    fn mask_index(&self, slot: usize) -> usize {
        if self.options.per_domain_mask {
            slot
        } else {
            0
        }
    }

    /// Concatenates `user`'s rows from `tables` (indexed by domain id) in
    /// `domain_order`.
    pub fn input(&self, tables: &[&EmbeddingTable], user: u32) -> Result<ConcatUserInput> {
        let m = self.dim();
        let mut vector = Vec::with_capacity(self.n_domains() * m);
        for &d in &self.domain_order {
            let t = tables
                .get(d)
                .ok_or_else(|| Error::Index(format!("no user table for domain {d}")))?;
            if t.dim() != m {
                return Err(Error::shape(format!("domain {d} table has dim {}, model expects {m}", t.dim())));
            }
            vector.extend_from_slice(t.checked_row(user)?);
        }
        Ok(ConcatUserInput {
            user,
            vector,
            mask_set: Vec::new(),
        })
    }

    /// Replaces `k` distinct uniformly chosen slots with the mask vector.
    /// Already-masked slots are not chosen again.
    pub fn mask<R: Rng + ?Sized>(&self, input: &ConcatUserInput, k: usize, rng: &mut R) -> Result<ConcatUserInput> {
        let n = self.n_domains();
        if k >= n {
            return Err(Error::config(format!("cannot mask {k} of {n} domains")));
        }
        let mut out = input.clone();
        let free: Vec<usize> = (0..n).filter(|s| !input.mask_set.contains(s)).collect();
        if k > free.len() {
            return Err(Error::config(format!("only {} unmasked slots left, asked for {k}", free.len())));
        }
        let m = self.dim();
        for pick in index::sample(rng, free.len(), k) {
            let slot = free[pick];
            out.vector[slot * m..(slot + 1) * m].copy_from_slice(self.mask_vector(slot));
            out.mask_set.push(slot);
        }
        out.mask_set.sort_unstable();
        Ok(out)
    }

    pub fn encode(&self, input: &ConcatUserInput) -> Result<Vec<f64>> {
        let x = DenseMatrix::from_vec(1, input.vector.len(), input.vector.clone())
            .map_err(|_| Error::shape("input contains non-finite values"))?;
        if x.cols() != self.encoder.input_dim() {
            return Err(Error::shape(format!(
                "input length {} != n·m = {}",
                x.cols(),
                self.encoder.input_dim()
            )));
        }
        Ok(self.encoder.infer(&x)?.into_vec())
    }

    pub fn decode(&self, global: &[f64]) -> Result<Vec<f64>> {
        if global.len() != self.dim() {
            return Err(Error::shape(format!("global embedding length {} != m = {}", global.len(), self.dim())));
        }
        let x = DenseMatrix::from_vec(1, global.len(), global.to_vec())?;
        Ok(self.decoder.infer(&x)?.into_vec())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC);
        w.u64(self.dim() as u64);
        w.usizes(&self.domain_order);
        w.f64(self.tau);
        w.f64(self.alpha1);
        w.f64(self.alpha2);
        w.u8(self.options.per_domain_mask as u8);
        w.u8(self.options.squared_norm as u8);
        w.u8(self.options.exclude_positive as u8);
        w.mlp(&self.encoder);
        w.mlp(&self.decoder);
        w.u64(self.masks.len() as u64);
        for v in &self.masks {
            w.f64s(v);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, MAGIC, origin)?;
        let dim = r.len()?;
        let domain_order = r.usizes()?;
        let tau = r.f64()?;
        let alpha1 = r.f64()?;
        let alpha2 = r.f64()?;
        let options = CatOptions {
            per_domain_mask: r.u8()? != 0,
            squared_norm: r.u8()? != 0,
            exclude_positive: r.u8()? != 0,
        };
        let encoder = r.mlp()?;
        let decoder = r.mlp()?;
        let n_masks = r.len()?;
        let masks = (0..n_masks).map(|_| r.f64s(dim)).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let n = domain_order.len();
        let want_masks = if options.per_domain_mask { n } else { 1 };
        if encoder.layer_sizes() != [n * dim, 5 * dim, 3 * dim, dim]
            || decoder.layer_sizes() != [dim, 3 * dim, 5 * dim, n * dim]
            || n_masks != want_masks
        {
            return Err(Error::Checkpoint {
                path: origin.to_owned(),
                msg: "layer sizes inconsistent with domain count and dimension".into(),
            });
        }
        check_weights(tau, alpha1, alpha2)?;
        Ok(Self {
            encoder,
            decoder,
            masks,
            tau,
            alpha1,
            alpha2,
            domain_order,
            options,
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

fn check_weights(tau: f64, alpha1: f64, alpha2: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config(format!("tau must be positive, got {tau}")));
    }
    if !(alpha1 >= 0.0 && alpha2 >= 0.0 && alpha1 + alpha2 <= 1.0 + 1e-12) {
        return Err(Error::config(format!(
            "need alpha1, alpha2 ≥ 0 and alpha1 + alpha2 ≤ 1, got {alpha1}, {alpha2}"
        )));
    }
    Ok(())
}

/// Mean over users of the summed per-slot residual norms. Each row of
/// `original` and `reconstructed` holds one user's concatenated slots.
pub fn reconstruction_loss(original: &DenseMatrix, reconstructed: &DenseMatrix, dim: usize, squared: bool) -> f64 {
    recon_term(original, reconstructed, dim, squared, None)
}

/// Loss value and, when `grad` is given, `∂loss/∂reconstructed` scaled by
/// `weight` added into it.
fn recon_term(
    original: &DenseMatrix,
    reconstructed: &DenseMatrix,
    dim: usize,
    squared: bool,
    grad: Option<(&mut DenseMatrix, f64)>,
) -> f64 {
    debug_assert_eq!(original.shape(), reconstructed.shape());
    let rows = original.rows();
    let inv = 1.0 / rows.max(1) as f64;
    let mut total = 0.0;
    let mut residual = vec![0.0; dim];
    let mut grad = grad;
    for r in 0..rows {
        let (o, x) = (original.row(r), reconstructed.row(r));
        for (s, (os, xs)) in o.chunks_exact(dim).zip(x.chunks_exact(dim)).enumerate() {
            for k in 0..dim {
                residual[k] = xs[k] - os[k];
            }
            let sq = dot(&residual, &residual);
            let (value, scale) = if squared {
                (sq, 2.0)
            } else {
                let n = sq.sqrt();
                // subgradient 0 at an exact reconstruction
                (n, if n > 0.0 { 1.0 / n } else { 0.0 })
            };
            total += value;
            if let Some((g, w)) = grad.as_mut() {
                let c = *w * inv * scale;
                let row = &mut g.row_mut(r)[s * dim..(s + 1) * dim];
                nn::axpy(c, &residual, row);
            }
        }
    }
    total * inv
}

/// `decode(encode(masked))` compared against the unmasked slots.
pub fn masked_reconstruction_loss(model: &CatModel, masked: &[ConcatUserInput], original: &[ConcatUserInput]) -> Result<f64> {
    let x = stack(masked, model.encoder.input_dim())?;
    let target = stack(original, model.encoder.input_dim())?;
    let recon = model.decoder.infer(&model.encoder.infer(&x)?)?;
    Ok(reconstruction_loss(&target, &recon, model.dim(), model.options.squared_norm))
}

fn stack(inputs: &[ConcatUserInput], width: usize) -> Result<DenseMatrix> {
    let mut data = Vec::with_capacity(inputs.len() * width);
    for inp in inputs {
        if inp.vector.len() != width {
            return Err(Error::shape(format!("input length {} != {width}", inp.vector.len())));
        }
        data.extend_from_slice(&inp.vector);
    }
    DenseMatrix::from_vec(inputs.len(), width, data)
}

/// In-batch bidirectional contrastive loss, summed over the batch.
///
/// Row `i` of `clean` and `masked` is user `i`'s pair. `users` labels rows
/// in error messages.
pub fn contrastive_loss(clean: &DenseMatrix, masked: &DenseMatrix, tau: f64, exclude_positive: bool, users: &[u32]) -> Result<f64> {
    Ok(contrastive_term(clean, masked, tau, exclude_positive, users, false)?.loss)
}

struct ContrastiveOut {
    loss: f64,
    retrieval: f64,
    d_clean: Option<DenseMatrix>,
    d_masked: Option<DenseMatrix>,
}

fn unit_rows(x: &DenseMatrix, users: &[u32]) -> Result<(DenseMatrix, Vec<f64>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let n = norm(x.row(r));
        if !(n > 0.0 && n.is_finite()) {
            let user = users.get(r).copied().unwrap_or(r as u32);
            return Err(Error::Numeric(format!("embedding of user {user} has norm {n}; cosine undefined")));
        }
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Softmax over one row of logits, optionally excluding `skip` from the
/// normalizer. Returns (−log p_target, probabilities).
fn neg_log_softmax(logits: &[f64], target: usize, skip: Option<usize>, probs: &mut [f64]) -> f64 {
    let max = logits
        .iter()
        .enumerate()
        .filter(|(k, _)| Some(*k) != skip)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (k, (&l, p)) in logits.iter().zip(probs.iter_mut()).enumerate() {
        *p = if Some(k) == skip { 0.0 } else { (l - max).exp() };
        z += *p;
    }
    probs.iter_mut().for_each(|p| *p /= z);
    -(logits[target] - max - z.ln())
}

fn contrastive_term(
    clean: &DenseMatrix,
    masked: &DenseMatrix,
    tau: f64,
    exclude_positive: bool,
    users: &[u32],
    want_grad: bool,
) -> Result<ContrastiveOut> {
    let b = clean.rows();
    if b < 2 || masked.rows() != b {
        return Err(Error::shape(format!("contrastive batch needs N ≥ 2 matched pairs, got {b}")));
    }
    let (a, na) = unit_rows(clean, users)?;
    let (p, np) = unit_rows(masked, users)?;
    // sim[i][k] = φ(e_i, *e_k) / τ
    let mut sim = DenseMatrix::zeros(b, b);
    nn::gemm(1.0 / tau, &a, false, &p, true, 0.0, &mut sim);

    let mut loss = 0.0;
    let mut hits = 0usize;
    let mut g = DenseMatrix::zeros(b, b);
    let mut probs = vec![0.0; b];
    let mut col = vec![0.0; b];
    for i in 0..b {
        let row = sim.row(i);
        let best = (0..b).fold(0, |acc, k| if row[k] > row[acc] { k } else { acc });
        hits += (best == i) as usize;
    }
    for i in 0..b {
        // e_i against every *e_k
        let skip = exclude_positive.then_some(i);
        loss += {
            let row = sim.row(i).to_vec();
            let l = neg_log_softmax(&row, i, skip, &mut probs);
            if want_grad {
                let gr = g.row_mut(i);
                for k in 0..b {
                    gr[k] += probs[k];
                }
                gr[i] -= 1.0;
            }
            l
        };
        // *e_i against every e_k: column i of sim
        for k in 0..b {
            col[k] = sim.get(k, i);
        }
        loss += neg_log_softmax(&col, i, skip, &mut probs);
        if want_grad {
            for k in 0..b {
                let v = g.get(k, i) + probs[k];
                g.set(k, i, v);
            }
            let v = g.get(i, i) - 1.0;
            g.set(i, i, v);
        }
    }
    let retrieval = hits as f64 / b as f64;
    if !want_grad {
        return Ok(ContrastiveOut {
            loss,
            retrieval,
            d_clean: None,
            d_masked: None,
        });
    }
    // ∂/∂â = G P̂ / τ, ∂/∂p̂ = Gᵀ Â / τ, then project out the radial part.
    let mut da = DenseMatrix::zeros(b, clean.cols());
    nn::gemm(1.0 / tau, &g, false, &p, false, 0.0, &mut da);
    let mut dp = DenseMatrix::zeros(b, clean.cols());
    nn::gemm(1.0 / tau, &g, true, &a, false, 0.0, &mut dp);
    unnormalize_grad(&mut da, &a, &na);
    unnormalize_grad(&mut dp, &p, &np);
    Ok(ContrastiveOut {
        loss,
        retrieval,
        d_clean: Some(da),
        d_masked: Some(dp),
    })
}

fn unnormalize_grad(d: &mut DenseMatrix, unit: &DenseMatrix, norms: &[f64]) {
    for r in 0..d.rows() {
        let u = unit.row(r);
        let c = dot(d.row(r), u);
        let n = norms[r];
        for (dv, uv) in d.row_mut(r).iter_mut().zip(u) {
            *dv = (*dv - c * uv) / n;
        }
    }
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CatLossParts {
    pub total: f64,
    pub rec: f64,
    pub masked_rec: f64,
    pub contrastive: f64,
    pub retrieval_accuracy: f64,
}

/// Weighted stage-2 loss for a batch and its gradient with respect to every
/// trainable parameter. Inputs are never differentiated.
pub fn cat_loss(model: &CatModel, clean: &[ConcatUserInput], masked: &[ConcatUserInput]) -> Result<(CatLossParts, CatGrads)> {
    let mut grads = CatGrads::zeros_like(model);
    let parts = cat_loss_into(model, clean, masked, &mut grads)?;
    Ok((parts, grads))
}

fn cat_loss_into(
    model: &CatModel,
    clean: &[ConcatUserInput],
    masked: &[ConcatUserInput],
    grads: &mut CatGrads,
) -> Result<CatLossParts> {
    if clean.len() != masked.len() || clean.iter().zip(masked).any(|(a, b)| a.user != b.user) {
        return Err(Error::shape("clean and masked batches must pair the same users"));
    }
    let width = model.encoder.input_dim();
    let m = model.dim();
    let users: Vec<u32> = clean.iter().map(|c| c.user).collect();
    let x = stack(clean, width)?;
    let xm = stack(masked, width)?;
    let (w1, w2) = (model.alpha1, model.alpha2);
    let w3 = 1.0 - w1 - w2;
    let sq = model.options.squared_norm;

    let (e, tape_e) = model.encoder.forward(&x)?;
    let (r, tape_d) = model.decoder.forward(&e)?;
    let (em, tape_em) = model.encoder.forward(&xm)?;
    let (rm, tape_dm) = model.decoder.forward(&em)?;

    let mut dr = DenseMatrix::zeros(r.rows(), r.cols());
    let rec = recon_term(&x, &r, m, sq, Some((&mut dr, w1)));
    let mut drm = DenseMatrix::zeros(rm.rows(), rm.cols());
    let masked_rec = recon_term(&x, &rm, m, sq, Some((&mut drm, w2)));
    let con = if clean.len() >= 2 {
        Some(contrastive_term(&e, &em, model.tau, model.options.exclude_positive, &users, w3 != 0.0)?)
    } else {
        None
    };
    let contrastive = con.as_ref().map_or(0.0, |c| c.loss);
    let total = w1 * rec + w2 * masked_rec + w3 * contrastive;
    if !total.is_finite() {
        return Err(Error::Numeric(format!("stage-2 loss is {total}")));
    }

    let mut de = model.decoder.backward_into(tape_d, &dr, &mut grads.decoder)?;
    let mut dem = model.decoder.backward_into(tape_dm, &drm, &mut grads.decoder)?;
    if let Some(c) = &con {
        if let (Some(da), Some(dp)) = (&c.d_clean, &c.d_masked) {
            nn::axpy(w3, da.as_slice(), de.as_mut_slice());
            nn::axpy(w3, dp.as_slice(), dem.as_mut_slice());
        }
    }
    model.encoder.backward_into(tape_e, &de, &mut grads.encoder)?;
    let dxm = model.encoder.backward_into(tape_em, &dem, &mut grads.encoder)?;
    for (row, inp) in masked.iter().enumerate() {
        for &slot in &inp.mask_set {
            let mi = model.mask_index(slot);
            nn::axpy(1.0, &dxm.row(row)[slot * m..(slot + 1) * m], &mut grads.masks[mi]);
        }
    }
    Ok(CatLossParts {
        total,
        rec,
        masked_rec,
        contrastive,
        retrieval_accuracy: con.map_or(0.0, |c| c.retrieval),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: String,
    pub tau: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub k_masked: usize,
    pub options: CatOptions,
}

impl Default for CatConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4096,
            lr: 1e-3,
            optimizer: "adam".into(),
            tau: DEFAULT_TAU,
            alpha1: DEFAULT_ALPHA,
            alpha2: DEFAULT_ALPHA,
            k_masked: 1,
            options: CatOptions::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CatEpochLog {
    pub epoch: usize,
    pub rec: f64,
    pub masked_rec: f64,
    pub contrastive: f64,
    pub total: f64,
    pub retrieval_accuracy: f64,
}

/// Minibatch training over all users. Batches are shuffled each epoch; a
/// trailing batch of a single user is dropped because the contrastive term
/// needs at least two.
pub fn train_cat<R: Rng + ?Sized>(
    mut model: CatModel,
    tables: &[&EmbeddingTable],
    config: &CatConfig,
    rng: &mut R,
) -> Result<(CatModel, Vec<CatEpochLog>)> {
    let mut curve = Vec::with_capacity(config.epochs);
    if config.epochs == 0 {
        return Ok((model, curve));
    }
    if config.batch_size < 2 {
        return Err(Error::config("stage-2 batch size must be at least 2"));
    }
    let n_users = tables
        .get(model.domain_order[0])
        .ok_or_else(|| Error::Index("missing user table".into()))?
        .n_entities();
    let inputs = (0..n_users as u32)
        .map(|u| model.input(tables, u))
        .collect::<Result<Vec<_>>>()?;
    let mut opt = OptimizerState::new(Algorithm::parse(&config.optimizer)?, config.lr, &model);
    let mut grads = CatGrads::zeros_like(&model);
    let mut order: Vec<usize> = (0..n_users).collect();
    for epoch in 1..=config.epochs {
        shuffle(&mut order, rng);
        let mut sums = [0.0; 5];
        let mut n_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let clean: Vec<ConcatUserInput> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let masked = clean
                .iter()
                .map(|c| model.mask(c, config.k_masked, rng))
                .collect::<Result<Vec<_>>>()?;
            grads.zero();
            let parts = cat_loss_into(&model, &clean, &masked, &mut grads).map_err(|e| Error::Diverged {
                stage: "stage2",
                epoch,
                detail: e.to_string(),
            })?;
            opt.step(&mut model, &grads).map_err(|e| Error::Diverged {
                stage: "stage2",
                epoch,
                detail: e.to_string(),
            })?;
            for (s, v) in sums.iter_mut().zip([
                parts.rec,
                parts.masked_rec,
                parts.contrastive,
                parts.total,
                parts.retrieval_accuracy,
            ]) {
                *s += v;
            }
            n_batches += 1;
        }
        let k = n_batches.max(1) as f64;
        let log = CatEpochLog {
            epoch,
            rec: sums[0] / k,
            masked_rec: sums[1] / k,
            contrastive: sums[2] / k,
            total: sums[3] / k,
            retrieval_accuracy: sums[4] / k,
        };
        debug!(
            "stage2 epoch {epoch}: rec {:.4} masked {:.4} contrastive {:.4} retrieval {:.3}",
            log.rec, log.masked_rec, log.contrastive, log.retrieval_accuracy
        );
        curve.push(log);
    }
    if let Some(last) = curve.last() {
        info!(
            "stage2 done: total {:.4}, retrieval accuracy {:.3}",
            last.total, last.retrieval_accuracy
        );
    }
    Ok((model, curve))
}

impl CatGrads {
    pub fn zero(&mut self) {
        for s in self.segments_mut() {
            s.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Encodes every user's unmasked input into a user-indexed table.
pub fn global_embeddings(model: &CatModel, tables: &[&EmbeddingTable]) -> Result<EmbeddingTable> {
    let n_users = tables
        .get(model.domain_order[0])
        .ok_or_else(|| Error::Index("missing user table".into()))?
        .n_entities();
    let m = model.dim();
    let mut out = DenseMatrix::zeros(n_users + 1, m);
    const CHUNK: usize = 1024;
    for start in (0..n_users).step_by(CHUNK) {
        let end = (start + CHUNK).min(n_users);
        let batch = (start as u32..end as u32)
            .map(|u| model.input(tables, u))
            .collect::<Result<Vec<_>>>()?;
        let e = model.encoder.infer(&stack(&batch, model.encoder.input_dim())?)?;
        for r in 0..e.rows() {
            out.row_mut(start + r).copy_from_slice(e.row(r));
        }
    }
    EmbeddingTable::from_matrix(n_users, out)
}

/// Mean cosine between the reconstruction of `slot` with that slot masked
/// and the true embedding, over `users`.
pub fn masked_slot_cosine(model: &CatModel, tables: &[&EmbeddingTable], users: &[u32], slot: usize) -> Result<f64> {
    if slot >= model.n_domains() {
        return Err(Error::Index(format!("slot {slot} out of {}", model.n_domains())));
    }
    let m = model.dim();
    let mut total = 0.0;
    for &u in users {
        let mut inp = model.input(tables, u)?;
        let truth = inp.vector[slot * m..(slot + 1) * m].to_vec();
        inp.vector[slot * m..(slot + 1) * m].copy_from_slice(model.mask_vector(slot));
        inp.mask_set = vec![slot];
        let rec = model.decode(&model.encode(&inp)?)?;
        total += nn::cosine(&rec[slot * m..(slot + 1) * m], &truth);
    }
    Ok(total / users.len().max(1) as f64)
}
