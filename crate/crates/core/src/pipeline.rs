//! End-to-end orchestration: configuration, the three training stages,
//! ablation variants, reports and the experiment manifest.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! config.txt                         resolved key = value configuration
//! manifest.json                      hashes of every checkpoint, seeds, timing
//! data/                              vocabularies (file input only)
//! run-<r>/split.tsv                  split manifest of run r
//! run-<r>/stage1/{users,items}-<d>.emb
//! run-<r>/stage2/<variant>/{cat.bin,global.emb,curve.tsv}
//! run-<r>/stage3/<ablation>/art-<d>.bin, curve-<d>.tsv, attention.tsv
//! run-<r>/reports/<ablation>.{json,tsv}
//! aggregate/<ablation>.{tsv,txt}, aggregate/negative_transfer.tsv
//! ```
//!
//! Seeds: the world seed is `derive(master, "world", 0)`; run `r` uses
//! `run = derive(master, "run", r)`, and each component draws from
//! `derived_rng(run, label, index)` with labels `split`, `stage1` (index =
//! domain), `stage2` and `stage3` (index = domain).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::art::{self, ArtConfig, ArtInputs, ArtMode, ArtModel, TableScorer};
use crate::bprmf::{self, DomainMfModel, EmbeddingTable, MfConfig, MfScorer};
use crate::cat::{self, CatConfig, CatModel};
use crate::checkpoint;
use crate::dataset::{split, Corpus, Format, InteractionStore, RawInteractions, Split, SplitRatios};
use crate::error::{Error, Result};
use crate::eval::{self, AggregateReport, MetricKind, MetricReport, TransferFlag, DEFAULT_KS};
use crate::seed;
use crate::synth;

/// The incremental model variants compared in ablation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// Stage 1 only.
    Smf,
    /// Global embedding from a plain autoencoder (`α₁ = 1, α₂ = 0`).
    Autoencoder,
    /// Global embedding from the full stage-2 loss, no transfer attention.
    Contrastive,
    /// The full model.
    Art,
    /// The full model with attention replaced by a plain mean.
    NoAttention,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Smf,
        Ablation::Autoencoder,
        Ablation::Contrastive,
        Ablation::Art,
        Ablation::NoAttention,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "smf" => Ok(Self::Smf),
            "+autoencoder" | "autoencoder" => Ok(Self::Autoencoder),
            "+contrastive" | "contrastive" => Ok(Self::Contrastive),
            "+art" | "art" | "full" => Ok(Self::Art),
            "-attention" | "no-attention" => Ok(Self::NoAttention),
            other => Err(Error::config(format!(
                "unknown ablation `{other}` (expected smf, +autoencoder, +contrastive, +art or -attention)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Smf => "smf",
            Self::Autoencoder => "+autoencoder",
            Self::Contrastive => "+contrastive",
            Self::Art => "+art",
            Self::NoAttention => "-attention",
        }
    }

    /// File-system friendly name.
    pub fn slug(&self) -> &'static str {
        match self {
            Self::Smf => "smf",
            Self::Autoencoder => "autoencoder",
            Self::Contrastive => "contrastive",
            Self::Art => "art",
            Self::NoAttention => "no-attention",
        }
    }

    /// Which stage-2 model the variant builds on.
    pub fn stage2_variant(&self) -> Option<Stage2Variant> {
        match self {
            Self::Smf => None,
            Self::Autoencoder => Some(Stage2Variant::Autoencoder),
            _ => Some(Stage2Variant::Full),
        }
    }

    pub fn art_mode(&self) -> Option<ArtMode> {
        match self {
            Self::Smf => None,
            Self::Autoencoder | Self::Contrastive => Some(ArtMode::GlobalOnly),
            Self::Art => Some(ArtMode::Attention),
            Self::NoAttention => Some(ArtMode::Mean),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage2Variant {
    /// Configured loss weights.
    Full,
    /// Reconstruction only.
    Autoencoder,
}

impl Stage2Variant {
    pub fn slug(&self) -> &'static str {
        match self {
            Self::Full => "cat",
            Self::Autoencoder => "autoencoder",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub scenario: String,
    /// Per-domain interaction files; when non-empty they replace `scenario`.
    pub data: Vec<PathBuf>,
    pub format: Option<Format>,
    pub per_user_cap: Option<usize>,
    pub synth_users: Option<usize>,
    pub synth_items: Option<usize>,
    pub synth_density: Option<f64>,
    pub synth_noise: Option<f64>,
    pub stage1: MfConfig,
    pub stage2: CatConfig,
    pub stage3: ArtConfig,
    pub ablations: Vec<Ablation>,
    pub seeds: usize,
    pub master_seed: u64,
    pub epsilon: f64,
    pub ks: Vec<usize>,
    pub split: SplitRatios,
    pub out_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            scenario: "correlated-5".into(),
            data: Vec::new(),
            format: None,
            per_user_cap: None,
            synth_users: None,
            synth_items: None,
            synth_density: None,
            synth_noise: None,
            stage1: MfConfig::default(),
            stage2: CatConfig::default(),
            stage3: ArtConfig::default(),
            ablations: vec![Ablation::Art],
            seeds: 3,
            master_seed: 0,
            epsilon: 0.0,
            ks: DEFAULT_KS.to_vec(),
            split: SplitRatios::default(),
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Every configuration key with a one-line description, in file order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("scenario", "synthetic scenario when no data files are given"),
    ("data", "comma-separated per-domain interaction files"),
    ("format", "input format: tsv or csv (default: from extension)"),
    ("per_user_cap", "keep at most this many items per user and domain"),
    ("synth_users", "override the scenario's user count"),
    ("synth_items", "override the scenario's items per domain"),
    ("synth_density", "override every domain's density"),
    ("synth_noise", "override every domain's noise level"),
    ("dim", "embedding dimension m"),
    ("optimizer", "adam or sgd, for all stages"),
    ("stage1_epochs", "stage-1 maximum epochs"),
    ("stage1_lr", "stage-1 learning rate"),
    ("stage1_batch", "stage-1 triplets per step"),
    ("stage1_patience", "stage-1 early-stopping patience"),
    ("stage1_init_scale", "stage-1 uniform init half-width"),
    ("stage1_weight_decay", "stage-1 L2 weight on touched rows"),
    ("stage2_epochs", "stage-2 epochs"),
    ("stage2_lr", "stage-2 learning rate"),
    ("stage2_batch", "stage-2 minibatch size N"),
    ("tau", "contrastive temperature"),
    ("alpha1", "weight of the reconstruction loss"),
    ("alpha2", "weight of the masked reconstruction loss"),
    ("k_masked", "domains masked per user"),
    ("per_domain_mask", "one mask vector per domain"),
    ("squared_norm", "squared residual norms in reconstruction"),
    ("exclude_positive", "drop the positive from contrastive denominators"),
    ("stage3_epochs", "stage-3 maximum epochs"),
    ("stage3_lr", "stage-3 learning rate"),
    ("stage3_batch", "stage-3 triplets per step"),
    ("stage3_patience", "stage-3 early-stopping patience"),
    ("unfreeze_items", "fine-tune item embeddings in stage 3"),
    ("ablation", "comma-separated: smf, +autoencoder, +contrastive, +art, -attention, or all"),
    ("seeds", "number of repeated runs"),
    ("master_seed", "seed every random component derives from"),
    ("epsilon", "tolerance for negative-transfer flags (0 flags any decrease)"),
    ("ks", "comma-separated cutoffs K"),
    ("split", "train,valid,test ratios"),
    ("out_dir", "artifact directory"),
];

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("`{key}`: expected a boolean, got `{v}`"))),
    }
}

fn opt_str<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(String::new, ToString::to_string)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let empty = v.is_empty();
        match key {
            "scenario" => self.scenario = v.to_owned(),
            "data" => self.data = v.split(',').filter(|s| !s.trim().is_empty()).map(|s| s.trim().into()).collect(),
            "format" => self.format = if empty { None } else { Some(Format::parse(v)?) },
            "per_user_cap" => self.per_user_cap = if empty { None } else { Some(parse_num(key, v)?) },
            "synth_users" => self.synth_users = if empty { None } else { Some(parse_num(key, v)?) },
            "synth_items" => self.synth_items = if empty { None } else { Some(parse_num(key, v)?) },
            "synth_density" => self.synth_density = if empty { None } else { Some(parse_num(key, v)?) },
            "synth_noise" => self.synth_noise = if empty { None } else { Some(parse_num(key, v)?) },
            "dim" => self.stage1.dim = parse_num(key, v)?,
            "optimizer" => {
                crate::nn::Algorithm::parse(v)?;
                self.stage1.optimizer = v.to_owned();
                self.stage2.optimizer = v.to_owned();
                self.stage3.optimizer = v.to_owned();
            }
            "stage1_epochs" => self.stage1.epochs = parse_num(key, v)?,
            "stage1_lr" => self.stage1.lr = parse_num(key, v)?,
            "stage1_batch" => self.stage1.batch_size = parse_num(key, v)?,
            "stage1_patience" => self.stage1.patience = parse_num(key, v)?,
            "stage1_init_scale" => self.stage1.init_scale = parse_num(key, v)?,
            "stage1_weight_decay" => self.stage1.weight_decay = parse_num(key, v)?,
            "stage2_epochs" => self.stage2.epochs = parse_num(key, v)?,
            "stage2_lr" => self.stage2.lr = parse_num(key, v)?,
            "stage2_batch" => self.stage2.batch_size = parse_num(key, v)?,
            "tau" => self.stage2.tau = parse_num(key, v)?,
            "alpha1" => self.stage2.alpha1 = parse_num(key, v)?,
            "alpha2" => self.stage2.alpha2 = parse_num(key, v)?,
            "k_masked" => self.stage2.k_masked = parse_num(key, v)?,
            "per_domain_mask" => self.stage2.options.per_domain_mask = parse_bool(key, v)?,
            "squared_norm" => self.stage2.options.squared_norm = parse_bool(key, v)?,
            "exclude_positive" => self.stage2.options.exclude_positive = parse_bool(key, v)?,
            "stage3_epochs" => self.stage3.epochs = parse_num(key, v)?,
            "stage3_lr" => self.stage3.lr = parse_num(key, v)?,
            "stage3_batch" => self.stage3.batch_size = parse_num(key, v)?,
            "stage3_patience" => self.stage3.patience = parse_num(key, v)?,
            "unfreeze_items" => self.stage3.unfreeze_items = parse_bool(key, v)?,
            "ablation" => {
                self.ablations = if v == "all" {
                    Ablation::ALL.to_vec()
                } else {
                    v.split(',').map(Ablation::parse).collect::<Result<_>>()?
                };
                self.ablations.sort();
                self.ablations.dedup();
            }
            "seeds" => self.seeds = parse_num(key, v)?,
            "master_seed" => self.master_seed = parse_num(key, v)?,
            "epsilon" => self.epsilon = parse_num(key, v)?,
            "ks" => self.ks = v.split(',').map(|k| parse_num(key, k)).collect::<Result<_>>()?,
            "split" => {
                let r: Vec<f64> = v.split(',').map(|k| parse_num(key, k)).collect::<Result<_>>()?;
                if r.len() != 3 {
                    return Err(Error::config("`split` needs three ratios"));
                }
                self.split = SplitRatios {
                    train: r[0],
                    valid: r[1],
                    test: r[2],
                };
            }
            "out_dir" => self.out_dir = v.into(),
            other => return Err(Error::config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "scenario" => self.scenario.clone(),
            "data" => self.data.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(","),
            "format" => self
                .format
                .map_or_else(String::new, |f| if f == Format::Csv { "csv" } else { "tsv" }.to_owned()),
            "per_user_cap" => opt_str(&self.per_user_cap),
            "synth_users" => opt_str(&self.synth_users),
            "synth_items" => opt_str(&self.synth_items),
            "synth_density" => opt_str(&self.synth_density),
            "synth_noise" => opt_str(&self.synth_noise),
            "dim" => self.stage1.dim.to_string(),
            "optimizer" => self.stage1.optimizer.clone(),
            "stage1_epochs" => self.stage1.epochs.to_string(),
            "stage1_lr" => self.stage1.lr.to_string(),
            "stage1_batch" => self.stage1.batch_size.to_string(),
            "stage1_patience" => self.stage1.patience.to_string(),
            "stage1_init_scale" => self.stage1.init_scale.to_string(),
            "stage1_weight_decay" => self.stage1.weight_decay.to_string(),
            "stage2_epochs" => self.stage2.epochs.to_string(),
            "stage2_lr" => self.stage2.lr.to_string(),
            "stage2_batch" => self.stage2.batch_size.to_string(),
            "tau" => self.stage2.tau.to_string(),
            "alpha1" => self.stage2.alpha1.to_string(),
            "alpha2" => self.stage2.alpha2.to_string(),
            "k_masked" => self.stage2.k_masked.to_string(),
            "per_domain_mask" => self.stage2.options.per_domain_mask.to_string(),
            "squared_norm" => self.stage2.options.squared_norm.to_string(),
            "exclude_positive" => self.stage2.options.exclude_positive.to_string(),
            "stage3_epochs" => self.stage3.epochs.to_string(),
            "stage3_lr" => self.stage3.lr.to_string(),
            "stage3_batch" => self.stage3.batch_size.to_string(),
            "stage3_patience" => self.stage3.patience.to_string(),
            "unfreeze_items" => self.stage3.unfreeze_items.to_string(),
            "ablation" => self.ablations.iter().map(Ablation::name).collect::<Vec<_>>().join(","),
            "seeds" => self.seeds.to_string(),
            "master_seed" => self.master_seed.to_string(),
            "epsilon" => self.epsilon.to_string(),
            "ks" => join(&self.ks),
            "split" => join(&[self.split.train, self.split.valid, self.split.test]),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_owned(),
                line: n + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(k.trim(), v).map_err(|e| Error::Parse {
                path: origin.to_owned(),
                line: n + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        self.apply_text(&fs::read_to_string(path)?, path)
    }

    /// Every key in file order, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, _) in CONFIG_KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).unwrap_or_default());
        }
        out
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        CONFIG_KEYS
            .iter()
            .map(|(k, _)| (k.to_string(), self.get(k).unwrap_or_default()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.is_empty() && !synth::SCENARIOS.contains(&self.scenario.as_str()) {
            synth::make_scenario(&self.scenario, 0)?;
        }
        if self.stage1.dim == 0 {
            return Err(Error::config("dim must be positive"));
        }
        if self.seeds == 0 {
            return Err(Error::config("seeds must be at least 1"));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::config("ks must be positive cutoffs"));
        }
        if !self.ks.contains(&10) {
            return Err(Error::config("ks must include 10 (early stopping uses Recall@10)"));
        }
        let c = &self.stage2;
        if c.tau.is_nan() || c.tau <= 0.0 || c.alpha1 < 0.0 || c.alpha2 < 0.0 || c.alpha1 + c.alpha2 > 1.0 + 1e-12 {
            return Err(Error::config(format!(
                "need tau > 0, alpha1, alpha2 ≥ 0, alpha1 + alpha2 ≤ 1 (got {}, {}, {})",
                c.tau, c.alpha1, c.alpha2
            )));
        }
        if c.k_masked == 0 {
            return Err(Error::config("k_masked must be at least 1"));
        }
        self.split.validate()?;
        Ok(())
    }

    pub fn world_seed(&self) -> u64 {
        seed::derive(self.master_seed, "world", 0)
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        seed::derive(self.master_seed, "run", run as u64)
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.seeds).map(|r| self.run_seed(r)).collect()
    }

    fn cat_config(&self, variant: Stage2Variant) -> CatConfig {
        let mut c = self.stage2.clone();
        if variant == Stage2Variant::Autoencoder {
            c.alpha1 = 1.0;
            c.alpha2 = 0.0;
        }
        c
    }
}

/// Paths of every artifact.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn run(&self, r: usize) -> PathBuf {
        self.root.join(format!("run-{r}"))
    }

    pub fn split(&self, r: usize) -> PathBuf {
        self.run(r).join("split.tsv")
    }

    pub fn users(&self, r: usize, d: usize) -> PathBuf {
        self.run(r).join("stage1").join(format!("users-{d}.emb"))
    }

    pub fn items(&self, r: usize, d: usize) -> PathBuf {
        self.run(r).join("stage1").join(format!("items-{d}.emb"))
    }

    pub fn stage2(&self, r: usize, v: Stage2Variant) -> PathBuf {
        self.run(r).join("stage2").join(v.slug())
    }

    pub fn cat(&self, r: usize, v: Stage2Variant) -> PathBuf {
        self.stage2(r, v).join("cat.bin")
    }

    pub fn global(&self, r: usize, v: Stage2Variant) -> PathBuf {
        self.stage2(r, v).join("global.emb")
    }

    pub fn stage3(&self, r: usize, a: Ablation) -> PathBuf {
        self.run(r).join("stage3").join(a.slug())
    }

    pub fn art(&self, r: usize, a: Ablation, d: usize) -> PathBuf {
        self.stage3(r, a).join(format!("art-{d}.bin"))
    }

    pub fn report(&self, r: usize, a: Ablation) -> PathBuf {
        self.run(r).join("reports").join(format!("{}.json", a.slug()))
    }

    pub fn aggregate(&self) -> PathBuf {
        self.root.join("aggregate")
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Pipeline(format!("{what} missing: {} (run the earlier stage first)", path.display())));
    }
    Ok(())
}

fn hash_all(paths: &[PathBuf]) -> Result<Vec<String>> {
    paths.iter().map(|p| checkpoint::file_hash(p)).collect()
}

fn check_unchanged(paths: &[PathBuf], before: &[String]) -> Result<()> {
    for (p, h) in paths.iter().zip(before) {
        if &checkpoint::file_hash(p)? != h {
            return Err(Error::Pipeline(format!("upstream checkpoint {} was modified", p.display())));
        }
    }
    Ok(())
}

/// Raw interactions for the configured input.
pub fn load_raw(config: &PipelineConfig) -> Result<RawInteractions> {
    if !config.data.is_empty() {
        let corpus = Corpus::load(&config.data, config.format, config.per_user_cap)?;
        corpus.save_vocabularies(&config.out_dir.join("data"))?;
        return Ok(corpus.raw);
    }
    Ok(generate_world(config)?.raw)
}

/// The configured synthetic world, with overrides applied.
pub fn generate_world(config: &PipelineConfig) -> Result<synth::World> {
    let mut spec = synth::make_scenario(&config.scenario, config.world_seed())?;
    if let Some(u) = config.synth_users {
        spec.n_users = u;
    }
    for d in &mut spec.domains {
        if let Some(i) = config.synth_items {
            d.n_items = i;
        }
        if let Some(x) = config.synth_density {
            d.density = x;
        }
        if let Some(x) = config.synth_noise {
            d.noise = x;
        }
    }
    synth::generate(&spec)
}

pub struct StageOneTables {
    pub users: Vec<EmbeddingTable>,
    pub items: Vec<EmbeddingTable>,
}

fn stage1_paths(layout: &Layout, r: usize, n: usize) -> Vec<PathBuf> {
    (0..n).flat_map(|d| [layout.users(r, d), layout.items(r, d)]).collect()
}

fn load_stage1(layout: &Layout, r: usize, n: usize) -> Result<StageOneTables> {
    let mut users = Vec::with_capacity(n);
    let mut items = Vec::with_capacity(n);
    for d in 0..n {
        require(&layout.users(r, d), "stage-1 checkpoint")?;
        require(&layout.items(r, d), "stage-1 checkpoint")?;
        users.push(EmbeddingTable::load(&layout.users(r, d))?);
        items.push(EmbeddingTable::load(&layout.items(r, d))?);
    }
    Ok(StageOneTables { users, items })
}

pub fn load_store(layout: &Layout, r: usize) -> Result<InteractionStore> {
    require(&layout.split(r), "stage-1 split manifest")?;
    InteractionStore::load(&layout.split(r))
}

fn write_curve(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn save_report(layout: &Layout, r: usize, a: Ablation, report: &MetricReport) -> Result<()> {
    let path = layout.report(r, a);
    fs::create_dir_all(path.parent().expect("report dir"))?;
    fs::write(&path, serde_json::to_string_pretty(report)?)?;
    fs::write(path.with_extension("tsv"), report.to_tsv())?;
    Ok(())
}

pub fn load_report(layout: &Layout, r: usize, a: Ablation) -> Result<MetricReport> {
    let path = layout.report(r, a);
    require(&path, "report")?;
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Splits the data for every run and trains one MF model per domain.
/// Writes the SMF test report of each run.
pub fn run_stage1(config: &PipelineConfig) -> Result<Vec<MetricReport>> {
    config.validate()?;
    let layout = Layout::new(&config.out_dir);
    fs::create_dir_all(&layout.root)?;
    fs::write(layout.root.join("config.txt"), config.to_text())?;
    let raw = load_raw(config)?;
    let mut reports = Vec::with_capacity(config.seeds);
    for r in 0..config.seeds {
        let run_seed = config.run_seed(r);
        let store = split(&raw, config.split, seed::derive(run_seed, "split", 0))?;
        fs::create_dir_all(layout.run(r).join("stage1"))?;
        store.save(&layout.split(r))?;
        let mut models = Vec::with_capacity(store.n_domains());
        for d in 0..store.n_domains() {
            let mut rng = seed::derived_rng(run_seed, "stage1", d as u64);
            let init = DomainMfModel::init(&store, d, config.stage1.dim, config.stage1.init_scale, &mut rng);
            let out = bprmf::train_domain(init, &store, &config.stage1, &mut rng)?;
            out.model.users.save(&layout.users(r, d))?;
            out.model.items.save(&layout.items(r, d))?;
            write_curve(
                &layout.run(r).join("stage1").join(format!("curve-{d}.tsv")),
                "epoch\tloss\tval_recall@10",
                out.curve
                    .iter()
                    .map(|e| format!("{}\t{:.6}\t{:.6}", e.epoch, e.loss, e.val_recall)),
            )?;
            models.push(out.model);
        }
        let report = eval::evaluate(&store, Split::Test, &config.ks, &MfScorer::new(&models), Ablation::Smf.name(), run_seed);
        save_report(&layout, r, Ablation::Smf, &report)?;
        info!("run {r}: stage 1 done");
        reports.push(report);
    }
    Ok(reports)
}

/// Trains the stage-2 model of `variant` for every run.
pub fn run_stage2(config: &PipelineConfig, variant: Stage2Variant) -> Result<()> {
    config.validate()?;
    let layout = Layout::new(&config.out_dir);
    let cat_cfg = config.cat_config(variant);
    for r in 0..config.seeds {
        let store = load_store(&layout, r)?;
        let n = store.n_domains();
        let upstream = stage1_paths(&layout, r, n);
        let tables = load_stage1(&layout, r, n)?;
        let before = hash_all(&upstream)?;
        let refs: Vec<&EmbeddingTable> = tables.users.iter().collect();
        let mut rng = seed::derived_rng(config.run_seed(r), "stage2", 0);
        let model = CatModel::new((0..n).collect(), config.stage1.dim, cat_cfg.options, &mut rng)?.with_weights(
            cat_cfg.tau,
            cat_cfg.alpha1,
            cat_cfg.alpha2,
        )?;
        let (model, curve) = cat::train_cat(model, &refs, &cat_cfg, &mut rng)?;
        let global = cat::global_embeddings(&model, &refs)?;
        let dir = layout.stage2(r, variant);
        fs::create_dir_all(&dir)?;
        model.save(&layout.cat(r, variant))?;
        global.save(&layout.global(r, variant))?;
        write_curve(
            &dir.join("curve.tsv"),
            "epoch\trec\tmasked_rec\tcontrastive\ttotal\tretrieval_accuracy",
            curve.iter().map(|c| {
                format!(
                    "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}",
                    c.epoch, c.rec, c.masked_rec, c.contrastive, c.total, c.retrieval_accuracy
                )
            }),
        )?;
        check_unchanged(&upstream, &before)?;
        info!("run {r}: stage 2 ({}) done", variant.slug());
    }
    Ok(())
}

/// Everything stage 3 and evaluation read for one run.
pub struct RunState {
    pub store: InteractionStore,
    pub stage1: StageOneTables,
    pub global: Option<EmbeddingTable>,
}

impl RunState {
    pub fn inputs(&self) -> Option<ArtInputs<'_>> {
        self.global.as_ref().map(|g| ArtInputs {
            users: &self.stage1.users,
            items: &self.stage1.items,
            global: g,
        })
    }
}

pub fn load_run(layout: &Layout, r: usize, ablation: Ablation) -> Result<RunState> {
    let store = load_store(layout, r)?;
    let stage1 = load_stage1(layout, r, store.n_domains())?;
    let global = match ablation.stage2_variant() {
        Some(v) => {
            require(&layout.cat(r, v), "stage-2 checkpoint")?;
            require(&layout.global(r, v), "stage-2 global embeddings")?;
            Some(EmbeddingTable::load(&layout.global(r, v))?)
        }
        None => None,
    };
    Ok(RunState { store, stage1, global })
}

fn test_report(state: &RunState, models: &[ArtModel], ks: &[usize], name: &str, seed: u64) -> Result<MetricReport> {
    let inputs = state.inputs().ok_or_else(|| Error::Pipeline("stage-3 evaluation without stage 2".into()))?;
    let fused = models.iter().map(|m| m.fused_table(&inputs)).collect::<Result<Vec<_>>>()?;
    let scorer = TableScorer {
        users: fused.iter().collect(),
        items: models.iter().map(|m| m.item_table(&inputs)).collect(),
    };
    Ok(eval::evaluate(&state.store, Split::Test, ks, &scorer, name, seed))
}

fn smf_report(state: &RunState, ks: &[usize], seed: u64) -> MetricReport {
    let scorer = TableScorer {
        users: state.stage1.users.iter().collect(),
        items: state.stage1.items.iter().collect(),
    };
    eval::evaluate(&state.store, Split::Test, ks, &scorer, Ablation::Smf.name(), seed)
}

/// Mean attention weight of every (target, source) pair over the target's
/// test users, as `(target, sources, weights)` rows.
pub fn attention_rows(state: &RunState, models: &[ArtModel]) -> Result<Vec<art::AttentionRow>> {
    let inputs = state.inputs().ok_or_else(|| Error::Pipeline("attention report without stage 2".into()))?;
    models
        .iter()
        .map(|m| {
            let users = state.store.users_with(m.target, Split::Test);
            Ok((m.target, m.sources.clone(), art::report_attention(m, &inputs, &users)?))
        })
        .collect()
}

/// Trains stage 3 for `ablation` in every run and writes test reports.
/// `smf` only re-evaluates the stage-1 models.
pub fn run_stage3(config: &PipelineConfig, ablation: Ablation) -> Result<Vec<MetricReport>> {
    config.validate()?;
    let layout = Layout::new(&config.out_dir);
    let mut reports = Vec::with_capacity(config.seeds);
    for r in 0..config.seeds {
        let run_seed = config.run_seed(r);
        let state = load_run(&layout, r, ablation)?;
        let Some(mode) = ablation.art_mode() else {
            let report = smf_report(&state, &config.ks, run_seed);
            save_report(&layout, r, ablation, &report)?;
            reports.push(report);
            continue;
        };
        let variant = ablation.stage2_variant().expect("transfer variants build on stage 2");
        let n = state.store.n_domains();
        let mut upstream = stage1_paths(&layout, r, n);
        upstream.push(layout.cat(r, variant));
        upstream.push(layout.global(r, variant));
        let before = hash_all(&upstream)?;
        let inputs = state.inputs().expect("stage-2 state loaded");
        let dir = layout.stage3(r, ablation);
        fs::create_dir_all(&dir)?;
        let mut models = Vec::with_capacity(n);
        for d in 0..n {
            let mut rng = seed::derived_rng(run_seed, "stage3", d as u64);
            let init = ArtModel::new(d, n, config.stage1.dim, mode, &mut rng)?;
            let out = art::train_art(init, &inputs, &state.store, &config.stage3, &mut rng)?;
            out.model.save(&layout.art(r, ablation, d))?;
            write_curve(
                &dir.join(format!("curve-{d}.tsv")),
                "epoch\tloss\tval_recall@10",
                out.curve
                    .iter()
                    .map(|e| format!("{}\t{:.6}\t{:.6}", e.epoch, e.loss, e.val_recall)),
            )?;
            models.push(out.model);
        }
        if mode != ArtMode::GlobalOnly {
            let names: Vec<String> = state.store.domains().iter().map(|d| d.name.clone()).collect();
            fs::write(dir.join("attention.tsv"), art::attention_matrix_tsv(&names, &attention_rows(&state, &models)?))?;
        }
        let report = test_report(&state, &models, &config.ks, ablation.name(), run_seed)?;
        save_report(&layout, r, ablation, &report)?;
        check_unchanged(&upstream, &before)?;
        info!("run {r}: stage 3 ({}) done", ablation.name());
        reports.push(report);
    }
    Ok(reports)
}

pub fn load_art_models(layout: &Layout, r: usize, ablation: Ablation, n: usize) -> Result<Vec<ArtModel>> {
    (0..n)
        .map(|d| {
            let p = layout.art(r, ablation, d);
            require(&p, "stage-3 checkpoint")?;
            ArtModel::load(&p)
        })
        .collect()
}

/// Recomputes the test report of one run from its checkpoints.
pub fn evaluate_run(config: &PipelineConfig, r: usize, ablation: Ablation) -> Result<MetricReport> {
    let layout = Layout::new(&config.out_dir);
    let state = load_run(&layout, r, ablation)?;
    let seed = config.run_seed(r);
    match ablation.art_mode() {
        None => Ok(smf_report(&state, &config.ks, seed)),
        Some(_) => {
            let models = load_art_models(&layout, r, ablation, state.store.n_domains())?;
            test_report(&state, &models, &config.ks, ablation.name(), seed)
        }
    }
}

/// Flags of one candidate run against the SMF run of the same seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunFlags {
    pub ablation: Ablation,
    pub run: usize,
    pub flags: Vec<TransferFlag>,
}

/// Aggregates and flags over all runs of the configured ablations; writes
/// everything under `aggregate/`.
pub fn aggregate(config: &PipelineConfig) -> Result<(Vec<AggregateReport>, Vec<RunFlags>)> {
    let layout = Layout::new(&config.out_dir);
    let dir = layout.aggregate();
    fs::create_dir_all(&dir)?;
    let mut ablations = vec![Ablation::Smf];
    ablations.extend(config.ablations.iter().copied().filter(|a| *a != Ablation::Smf));
    let mut aggregates = Vec::new();
    let mut all_flags = Vec::new();
    let mut flag_tsv = String::from("ablation\trun\tdomain\tname\tk\tmetric\tsmf\tcandidate\n");
    let mut table = String::new();
    for a in ablations {
        let runs = (0..config.seeds).map(|r| load_report(&layout, r, a)).collect::<Result<Vec<_>>>()?;
        let agg = AggregateReport::from_runs(&runs)?;
        fs::write(dir.join(format!("{}.tsv", a.slug())), agg.to_tsv())?;
        table.push_str(&agg.to_table());
        table.push('\n');
        aggregates.push(agg);
        if a == Ablation::Smf {
            continue;
        }
        for (r, run) in runs.iter().enumerate() {
            let base = load_report(&layout, r, Ablation::Smf)?;
            let flags = eval::negative_transfer_report(run, &base, config.epsilon)?;
            for f in &flags {
                let name = &run.domains.iter().find(|d| d.domain == f.domain).expect("domain").name;
                let _ = writeln!(
                    flag_tsv,
                    "{}\t{r}\t{}\t{name}\t{}\t{}\t{:.6}\t{:.6}",
                    a.name(),
                    f.domain,
                    f.k,
                    f.metric.name(),
                    f.baseline,
                    f.candidate
                );
            }
            all_flags.push(RunFlags {
                ablation: a,
                run: r,
                flags,
            });
        }
    }
    fs::write(dir.join("negative_transfer.tsv"), flag_tsv)?;
    fs::write(dir.join("table.txt"), table)?;
    Ok((aggregates, all_flags))
}

/// NDCG@10 flags only, the headline negative-transfer measure.
pub fn ndcg10_flags(flags: &[TransferFlag]) -> Vec<&TransferFlag> {
    flags
        .iter()
        .filter(|f| f.k == 10 && f.metric == MetricKind::Ndcg)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub version: String,
    pub checkpoint_format: u32,
    pub config: BTreeMap<String, String>,
    pub world_seed: Option<u64>,
    pub run_seeds: Vec<u64>,
    /// Path relative to the output directory → SHA-256 of its bytes.
    pub checkpoints: BTreeMap<String, String>,
    pub wall_time_secs: f64,
}

fn collect_checkpoints(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect_checkpoints(root, &p, out)?;
        } else if matches!(p.extension().and_then(|x| x.to_str()), Some("emb" | "bin"))
            || p.file_name().is_some_and(|n| n == "split.tsv")
        {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.insert(rel, checkpoint::file_hash(&p)?);
        }
    }
    Ok(())
}

/// Hashes every checkpoint under the output directory and writes
/// `manifest.json`.
pub fn write_manifest(config: &PipelineConfig, wall_time_secs: f64) -> Result<ExperimentManifest> {
    let layout = Layout::new(&config.out_dir);
    let mut checkpoints = BTreeMap::new();
    collect_checkpoints(&layout.root, &layout.root, &mut checkpoints)?;
    let mut cfg = config.to_map();
    // the location is not part of the experiment
    cfg.remove("out_dir");
    let manifest = ExperimentManifest {
        version: env!("CARGO_PKG_VERSION").to_owned(),
        checkpoint_format: checkpoint::FORMAT_VERSION,
        config: cfg,
        world_seed: config.data.is_empty().then(|| config.world_seed()),
        run_seeds: config.run_seeds(),
        checkpoints,
        wall_time_secs,
    };
    fs::write(layout.manifest(), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Stage-2 variants the configured ablations need, in training order.
pub fn stage2_variants(config: &PipelineConfig) -> Vec<Stage2Variant> {
    let mut v: Vec<Stage2Variant> = config.ablations.iter().filter_map(|a| a.stage2_variant()).collect();
    v.sort();
    v.dedup();
    v
}

/// All three stages for every run and configured ablation, then
/// aggregation, flags and the manifest.
pub fn run_all(config: &PipelineConfig) -> Result<ExperimentManifest> {
    let start = Instant::now();
    run_stage1(config)?;
    for v in stage2_variants(config) {
        run_stage2(config, v)?;
    }
    for &a in &config.ablations {
        if a != Ablation::Smf {
            run_stage3(config, a)?;
        }
    }
    aggregate(config)?;
    write_manifest(config, start.elapsed().as_secs_f64())
}
