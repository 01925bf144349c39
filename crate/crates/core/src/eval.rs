//! All-ranking evaluation with Precision@K, Recall@K and NDCG@K.
//!
//! Every item of a domain is scored for each evaluated user. Items the user
//! already holds in earlier splits are removed from the candidate list: for
//! test evaluation both train and validation positives are excluded, for
//! validation only train positives. Ties are broken by ascending item id.
//! Only users with at least one target item in a domain are averaged.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{InteractionStore, Split};
use crate::error::{Error, Result};

pub const DEFAULT_KS: [usize; 2] = [10, 20];

/// Anything that can score every item of a domain for one user.
pub trait Scorer {
    fn score_items(&self, domain: usize, user: u32, out: &mut [f64]);
}

#[inline]
fn rank_order(scores: &[f64], a: u32, b: u32) -> Ordering {
    scores[b as usize]
        .partial_cmp(&scores[a as usize])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

fn excluded(exclude: &[&[u32]], item: u32) -> bool {
    exclude.iter().any(|l| l.binary_search(&item).is_ok())
}

/// Full ranking of all non-excluded items, best first. Each exclusion list
/// must be sorted ascending.
pub fn rank_all(scores: &[f64], exclude: &[&[u32]]) -> Vec<u32> {
    let mut items: Vec<u32> = (0..scores.len() as u32).filter(|&i| !excluded(exclude, i)).collect();
    items.sort_by(|&a, &b| rank_order(scores, a, b));
    items
}

/// The first `k` entries of [`rank_all`], without sorting the tail.
pub fn top_k(scores: &[f64], exclude: &[&[u32]], k: usize) -> Vec<u32> {
    let mut items: Vec<u32> = (0..scores.len() as u32).filter(|&i| !excluded(exclude, i)).collect();
    if k < items.len() {
        items.select_nth_unstable_by(k, |&a, &b| rank_order(scores, a, b));
        items.truncate(k);
    }
    items.sort_by(|&a, &b| rank_order(scores, a, b));
    items
}

fn hits_in_top<'a>(ranked: &'a [u32], test: &'a [u32], k: usize) -> impl Iterator<Item = usize> + 'a {
    ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(move |(_, i)| test.binary_search(i).is_ok())
        .map(|(p, _)| p)
}

/// `(hits / K, hits / |test|)`; `test` must be sorted and non-empty.
pub fn precision_recall_at_k(ranked: &[u32], test: &[u32], k: usize) -> (f64, f64) {
    assert!(k >= 1, "K must be at least 1");
    let hits = hits_in_top(ranked, test, k).count() as f64;
    (hits / k as f64, hits / test.len() as f64)
}

/// Binary-relevance NDCG; `test` must be sorted and non-empty.
pub fn ndcg_at_k(ranked: &[u32], test: &[u32], k: usize) -> f64 {
    assert!(k >= 1, "K must be at least 1");
    let dcg: f64 = hits_in_top(ranked, test, k).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    let idcg: f64 = (0..k.min(test.len())).map(|p| 1.0 / ((p + 2) as f64).log2()).sum();
    dcg / idcg
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricKind {
    Precision,
    Recall,
    Ndcg,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Precision, MetricKind::Recall, MetricKind::Ndcg];

    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::Precision => "precision",
            MetricKind::Recall => "recall",
            MetricKind::Ndcg => "ndcg",
        }
    }
}

impl Metrics {
    pub fn get(&self, kind: MetricKind) -> f64 {
        match kind {
            MetricKind::Precision => self.precision,
            MetricKind::Recall => self.recall,
            MetricKind::Ndcg => self.ndcg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain: usize,
    pub name: String,
    pub n_users: usize,
    pub at: BTreeMap<usize, Metrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub seed: u64,
    pub domains: Vec<DomainMetrics>,
}

impl MetricReport {
    pub fn metric(&self, domain: usize, k: usize, kind: MetricKind) -> Option<f64> {
        self.domains
            .iter()
            .find(|d| d.domain == domain)
            .and_then(|d| d.at.get(&k))
            .map(|m| m.get(kind))
    }

    /// One row per (domain, K): `model seed domain name k precision recall ndcg users`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("model\tseed\tdomain\tname\tk\tprecision\trecall\tndcg\tusers\n");
        for d in &self.domains {
            for (k, m) in &d.at {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{k}\t{:.6}\t{:.6}\t{:.6}\t{}",
                    self.model, self.seed, d.domain, d.name, m.precision, m.recall, m.ndcg, d.n_users
                );
            }
        }
        out
    }
}

/// Running sums for one domain, mergeable across user shards.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricAccumulator {
    pub n_users: usize,
    sums: BTreeMap<usize, Metrics>,
}

impl MetricAccumulator {
    pub fn new(ks: &[usize]) -> Self {
        Self {
            n_users: 0,
            sums: ks.iter().map(|&k| (k, Metrics::default())).collect(),
        }
    }

    pub fn add_user(&mut self, ranked: &[u32], test: &[u32]) {
        self.n_users += 1;
        for (&k, m) in self.sums.iter_mut() {
            let (p, r) = precision_recall_at_k(ranked, test, k);
            m.precision += p;
            m.recall += r;
            m.ndcg += ndcg_at_k(ranked, test, k);
        }
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        self.n_users += other.n_users;
        for (k, m) in self.sums.iter_mut() {
            if let Some(o) = other.sums.get(k) {
                m.precision += o.precision;
                m.recall += o.recall;
                m.ndcg += o.ndcg;
            }
        }
    }

    pub fn means(&self) -> BTreeMap<usize, Metrics> {
        let n = self.n_users.max(1) as f64;
        self.sums
            .iter()
            .map(|(&k, m)| {
                (
                    k,
                    Metrics {
                        precision: m.precision / n,
                        recall: m.recall / n,
                        ndcg: m.ndcg / n,
                    },
                )
            })
            .collect()
    }
}

/// Evaluates one domain against `target` (validation or test).
pub fn evaluate_domain<S: Scorer + ?Sized>(
    store: &InteractionStore,
    domain: usize,
    target: Split,
    ks: &[usize],
    scorer: &S,
) -> DomainMetrics {
    let max_k = ks.iter().copied().max().unwrap_or(1);
    let mut acc = MetricAccumulator::new(ks);
    let mut scores = vec![0.0; store.n_items(domain)];
    for user in store.users_with(domain, target) {
        scorer.score_items(domain, user, &mut scores);
        let train = store.items(domain, Split::Train, user);
        let valid = store.items(domain, Split::Valid, user);
        let exclude: &[&[u32]] = match target {
            Split::Test => &[train, valid],
            _ => &[train],
        };
        let ranked = top_k(&scores, exclude, max_k);
        acc.add_user(&ranked, store.items(domain, target, user));
    }
    DomainMetrics {
        domain,
        name: store.domain(domain).name.clone(),
        n_users: acc.n_users,
        at: acc.means(),
    }
}

pub fn evaluate<S: Scorer + ?Sized>(
    store: &InteractionStore,
    target: Split,
    ks: &[usize],
    scorer: &S,
    model: &str,
    seed: u64,
) -> MetricReport {
    MetricReport {
        model: model.to_owned(),
        seed,
        domains: (0..store.n_domains())
            .map(|d| evaluate_domain(store, d, target, ks, scorer))
            .collect(),
    }
}

/// One metric cell where a candidate falls below the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferFlag {
    pub domain: usize,
    pub k: usize,
    pub metric: MetricKind,
    pub candidate: f64,
    pub baseline: f64,
}

/// Flags every (domain, K, metric) cell with `candidate < baseline - epsilon`.
pub fn negative_transfer_report(
    candidate: &MetricReport,
    baseline: &MetricReport,
    epsilon: f64,
) -> Result<Vec<TransferFlag>> {
    let coverage = |r: &MetricReport| -> Vec<(usize, Vec<usize>)> {
        r.domains.iter().map(|d| (d.domain, d.at.keys().copied().collect())).collect()
    };
    if coverage(candidate) != coverage(baseline) {
        return Err(Error::config("reports cover different domains or cutoffs"));
    }
    let mut flags = Vec::new();
    for (c, b) in candidate.domains.iter().zip(&baseline.domains) {
        for ((&k, cm), bm) in c.at.iter().zip(b.at.values()) {
            for kind in MetricKind::ALL {
                if cm.get(kind) < bm.get(kind) - epsilon {
                    flags.push(TransferFlag {
                        domain: c.domain,
                        k,
                        metric: kind,
                        candidate: cm.get(kind),
                        baseline: bm.get(kind),
                    });
                }
            }
        }
    }
    Ok(flags)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateCell {
    pub mean: f64,
    pub std: f64,
}

/// Metrics of one model aggregated over repeated seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub model: String,
    pub seeds: Vec<u64>,
    /// `(domain, name, k) -> [precision, recall, ndcg]`
    pub cells: Vec<(usize, String, usize, [AggregateCell; 3])>,
}

impl AggregateReport {
    pub fn from_runs(runs: &[MetricReport]) -> Result<Self> {
        let first = runs.first().ok_or_else(|| Error::config("no runs to aggregate"))?;
        let mut cells = Vec::new();
        for d in &first.domains {
            for &k in d.at.keys() {
                let mut out: Vec<AggregateCell> = Vec::with_capacity(3);
                for kind in MetricKind::ALL {
                    let vals = runs
                        .iter()
                        .map(|r| {
                            r.metric(d.domain, k, kind)
                                .ok_or_else(|| Error::config("runs cover different domains or cutoffs"))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let (mean, std) = mean_std(&vals);
                    out.push(AggregateCell { mean, std });
                }
                let arr: [AggregateCell; 3] = out.try_into().expect("three metrics");
                cells.push((d.domain, d.name.clone(), k, arr));
            }
        }
        Ok(Self {
            model: first.model.clone(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            cells,
        })
    }

    pub fn mean(&self, domain: usize, k: usize, kind: MetricKind) -> Option<f64> {
        let idx = MetricKind::ALL.iter().position(|m| *m == kind)?;
        self.cells
            .iter()
            .find(|c| c.0 == domain && c.2 == k)
            .map(|c| c.3[idx].mean)
    }

    /// Table layout in percent: one row per domain, columns
    /// `Precision@K… Recall@K… NDCG@K…` as `mean±std`.
    pub fn to_table(&self) -> String {
        let ks: Vec<usize> = {
            let mut ks: Vec<usize> = self.cells.iter().map(|c| c.2).collect();
            ks.sort_unstable();
            ks.dedup();
            ks
        };
        let mut out = format!("{} (seeds: {:?}), values in %\n", self.model, self.seeds);
        let _ = write!(out, "{:<16}", "domain");
        for kind in MetricKind::ALL {
            for k in &ks {
                let _ = write!(out, "{:>16}", format!("{}@{k}", kind.name()));
            }
        }
        out.push('\n');
        let mut domains: Vec<(usize, &str)> = self.cells.iter().map(|c| (c.0, c.1.as_str())).collect();
        domains.dedup();
        for (d, name) in domains {
            let _ = write!(out, "{:<16}", name);
            for (mi, _) in MetricKind::ALL.iter().enumerate() {
                for k in &ks {
                    let cell = self.cells.iter().find(|c| c.0 == d && c.2 == *k).map(|c| &c.3[mi]);
                    let text = cell.map_or_else(
                        || "-".to_owned(),
                        |c| format!("{:.2}±{:.2}", 100.0 * c.mean, 100.0 * c.std),
                    );
                    let _ = write!(out, "{text:>16}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("model\tdomain\tname\tk\tmetric\tmean\tstd\n");
        for (d, name, k, cells) in &self.cells {
            for (kind, c) in MetricKind::ALL.iter().zip(cells) {
                let _ = writeln!(out, "{}\t{d}\t{name}\t{k}\t{}\t{:.6}\t{:.6}", self.model, kind.name(), c.mean, c.std);
            }
        }
        out
    }
}
