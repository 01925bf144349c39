//! Synthetic multi-domain implicit-feedback worlds.
//!
//! Users carry standard-normal latent factors, split into independent
//! groups. Domain `d` reads one group through a linear map `M_d`, draws item
//! factors `v`, and records an interaction wherever
//! `σ(uᵀ M_d v / √k + noise · ε)` clears a threshold. The threshold is the
//! exact quantile of that domain's scores that yields the target density.
//!
//! Every user is given their single best item in each domain, so all users
//! overlap across all domains; the quantile is taken over the rest.
//!
//! A `PerUser` map draws a fresh random vector for every user in place of
//! `M_d u`, so the domain is internally consistent but carries no
//! information about any other domain.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{split, InteractionStore, RawDomain, RawInteractions, SplitRatios};
use crate::error::{Error, Result};
use crate::nn::{self, DenseMatrix};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DomainMap {
    /// `M = I`: the group's latent factors as they are.
    Identity,
    /// A random Gaussian mix of the group's factors, fixed per domain.
    Mix,
    /// A fresh user vector per user, independent of everything else.
    PerUser,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub n_items: usize,
    pub density: f64,
    pub noise: f64,
    pub map: DomainMap,
    /// Which latent group the map reads.
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_users: usize,
    pub latent_dim: usize,
    pub n_groups: usize,
    pub domains: Vec<DomainSpec>,
    pub seed: u64,
}

pub const SCENARIOS: [&str; 4] = ["correlated-5", "one-noise-domain", "sparse-target", "unrelated-pair"];

pub const DESK_USERS: usize = 2000;
pub const DESK_ITEMS: usize = 500;

impl WorldSpec {
    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.len() < 3 {
            return Err(Error::config(format!("need at least 3 domains, got {}", self.domains.len())));
        }
        if self.n_users == 0 || self.latent_dim == 0 || self.n_groups == 0 {
            return Err(Error::config("users, latent_dim and n_groups must be positive"));
        }
        for d in &self.domains {
            if !(d.density > 0.0 && d.density <= 1.0) {
                return Err(Error::config(format!("domain {}: density {} outside (0, 1]", d.name, d.density)));
            }
            if d.n_items == 0 {
                return Err(Error::config(format!("domain {} has no items", d.name)));
            }
            if !(d.noise >= 0.0 && d.noise.is_finite()) {
                return Err(Error::config(format!("domain {}: noise must be ≥ 0", d.name)));
            }
            if d.group >= self.n_groups {
                return Err(Error::config(format!("domain {}: group {} ≥ {}", d.name, d.group, self.n_groups)));
            }
        }
        Ok(())
    }

    /// One latent group, `Identity` maps, no noise, density 0.5: users and
    /// items fall into two sign blocks and users like (almost exactly) the
    /// items in their own block.
    pub fn separable(n_users: usize, n_domains: usize, n_items: usize, seed: u64) -> Self {
        Self {
            n_users,
            latent_dim: 1,
            n_groups: 1,
            domains: (0..n_domains)
                .map(|d| DomainSpec {
                    name: format!("d{d}"),
                    n_items,
                    density: 0.5,
                    noise: 0.0,
                    map: DomainMap::Identity,
                    group: 0,
                })
                .collect(),
            seed,
        }
    }
}

/// Scenario presets at desk scale (2,000 users, 5 domains, 500 items each):
///
/// - `correlated-5`: every domain mixes the same 16-dim latent, mild noise.
/// - `one-noise-domain`: as above for domains 0–3; domain 4 is `PerUser`.
/// - `sparse-target`: `correlated-5` at density 0.05, except domain 4 at
///   0.005.
/// - `unrelated-pair`: domains 0–2 share one latent group, domains 3–4 a
///   second, independent one.
pub fn make_scenario(name: &str, seed: u64) -> Result<WorldSpec> {
    const DIM: usize = 16;
    const DENSITY: f64 = 0.02;
    const NOISE: f64 = 0.5;
    // one tenth of this must still leave users with held-out items
    const SPARSE_BASE: f64 = 0.05;
    let domain = |d: usize, map, group| DomainSpec {
        name: format!("d{d}"),
        n_items: DESK_ITEMS,
        density: DENSITY,
        noise: NOISE,
        map,
        group,
    };
    let (groups, domains) = match name {
        "correlated-5" => (1, (0..5).map(|d| domain(d, DomainMap::Mix, 0)).collect::<Vec<_>>()),
        "one-noise-domain" => (
            1,
            (0..5)
                .map(|d| {
                    if d == 4 {
                        DomainSpec {
                            name: "noise".into(),
                            ..domain(d, DomainMap::PerUser, 0)
                        }
                    } else {
                        domain(d, DomainMap::Mix, 0)
                    }
                })
                .collect(),
        ),
        "sparse-target" => (
            1,
            (0..5)
                .map(|d| {
                    let mut s = domain(d, DomainMap::Mix, 0);
                    s.density = SPARSE_BASE;
                    if d == 4 {
                        s.density /= 10.0;
                        s.name = "sparse".into();
                    }
                    s
                })
                .collect(),
        ),
        "unrelated-pair" => (2, (0..5).map(|d| domain(d, DomainMap::Mix, (d >= 3) as usize)).collect()),
        other => {
            return Err(Error::config(format!(
                "unknown scenario `{other}` (expected one of {})",
                SCENARIOS.join(", ")
            )))
        }
    };
    Ok(WorldSpec {
        n_users: DESK_USERS,
        latent_dim: DIM,
        n_groups: groups,
        domains,
        seed,
    })
}

/// Latent factors and thresholds behind a generated world.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// `n_users × (latent_dim · n_groups)`.
    pub users: DenseMatrix,
    /// Effective per-domain user vectors `M_d u` (or the per-user draw).
    pub domain_users: Vec<DenseMatrix>,
    pub items: Vec<DenseMatrix>,
    /// Threshold on `σ(score)` per domain.
    pub thresholds: Vec<f64>,
    pub densities: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub raw: RawInteractions,
    pub truth: GroundTruth,
}

fn normal_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = scale * rng.sample::<f64, _>(StandardNormal);
    }
    m
}

/// Deterministic in `spec`. Each domain draws from its own derived stream.
pub fn generate(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let k = spec.latent_dim;
    let n = spec.n_users;
    let users = normal_matrix(n, k * spec.n_groups, 1.0, &mut seed::derived_rng(spec.seed, "synth-users", 0));
    let mut domains = Vec::with_capacity(spec.n_domains());
    let mut truth = GroundTruth {
        users,
        domain_users: Vec::new(),
        items: Vec::new(),
        thresholds: Vec::new(),
        densities: Vec::new(),
    };
    for (d, ds) in spec.domains.iter().enumerate() {
        let mut rng = seed::derived_rng(spec.seed, "synth-domain", d as u64);
        let group = DenseMatrix::from_vec(
            n,
            k,
            (0..n)
                .flat_map(|u| truth.users.row(u)[ds.group * k..(ds.group + 1) * k].to_vec())
                .collect(),
        )?;
        let du = match ds.map {
            DomainMap::Identity => group,
            DomainMap::Mix => {
                // entries N(0, 1/k) keep each mixed factor at unit variance
                let map = normal_matrix(k, k, 1.0 / (k as f64).sqrt(), &mut rng);
                group.matmul(&map)?
            }
            DomainMap::PerUser => normal_matrix(n, k, 1.0, &mut rng),
        };
        let items = normal_matrix(ds.n_items, k, 1.0, &mut rng);
        let mut scores = DenseMatrix::zeros(n, ds.n_items);
        nn::gemm(1.0 / (k as f64).sqrt(), &du, false, &items, true, 0.0, &mut scores);
        if ds.noise > 0.0 {
            for s in scores.as_mut_slice() {
                *s += ds.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let total = n * ds.n_items;
        let want = (ds.density * total as f64).round() as usize;
        if want < n {
            return Err(Error::Generation(format!(
                "domain {}: density {} gives {want} interactions, fewer than one per user",
                ds.name, ds.density
            )));
        }
        // every user keeps their best item; the cut fills the remainder
        let mut ranked = scores.clone();
        for u in 0..n {
            let row = ranked.row_mut(u);
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            row[best] = f64::INFINITY;
        }
        let mut sorted = ranked.as_slice().to_vec();
        let (_, cut, _) = sorted.select_nth_unstable_by(want - 1, |a, b| b.total_cmp(a));
        let cut = *cut;
        let mut pairs = Vec::with_capacity(want);
        for u in 0..n {
            for (i, s) in ranked.row(u).iter().enumerate() {
                if *s >= cut {
                    pairs.push((u as u32, i as u32));
                }
            }
        }
        let realized = pairs.len() as f64 / total as f64;
        if (realized - ds.density).abs() > 0.1 * ds.density {
            return Err(Error::Generation(format!(
                "domain {}: ties put realized density {realized} outside ±10% of {}",
                ds.name, ds.density
            )));
        }
        truth.thresholds.push(nn::sigmoid(cut));
        truth.densities.push(realized);
        truth.domain_users.push(du);
        truth.items.push(items);
        domains.push(RawDomain {
            name: ds.name.clone(),
            n_items: ds.n_items,
            pairs,
        });
    }
    Ok(World {
        spec: spec.clone(),
        raw: RawInteractions { n_users: n, domains },
        truth,
    })
}

#[derive(Serialize)]
struct TruthManifest<'a> {
    spec: &'a WorldSpec,
    thresholds: &'a [f64],
    densities: &'a [f64],
    files: Vec<String>,
}

impl World {
    pub fn store(&self, ratios: SplitRatios, split_seed: u64) -> Result<InteractionStore> {
        split(&self.raw, ratios, split_seed)
    }

    /// Writes one `user<TAB>item` file per domain, `truth.json`, and the
    /// user latent factors as `user_latent.tsv`.
    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut files = Vec::new();
        for d in &self.raw.domains {
            let path = dir.join(format!("{}.tsv", d.name));
            let mut w = BufWriter::new(fs::File::create(&path)?);
            for (u, i) in &d.pairs {
                writeln!(w, "u{u}\ti{i}")?;
            }
            w.flush()?;
            files.push(path);
        }
        let manifest = TruthManifest {
            spec: &self.spec,
            thresholds: &self.truth.thresholds,
            densities: &self.truth.densities,
            files: files
                .iter()
                .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
                .collect(),
        };
        fs::write(dir.join("truth.json"), serde_json::to_string_pretty(&manifest)?)?;
        let mut w = BufWriter::new(fs::File::create(dir.join("user_latent.tsv"))?);
        for u in 0..self.truth.users.rows() {
            let row: Vec<String> = self.truth.users.row(u).iter().map(|v| v.to_string()).collect();
            writeln!(w, "u{u}\t{}", row.join("\t"))?;
        }
        w.flush()?;
        Ok(files)
    }
}
