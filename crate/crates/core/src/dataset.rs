//! Interaction ingestion, per-user random splits and BPR triplet sampling.
//!
//! Users are global across domains; item ids are dense per domain. Ingest
//! maps external string ids to dense integers in first-occurrence order.
//!
//! During training, items a user holds in the validation or test split of a
//! domain are still eligible as negatives; only train positives are
//! excluded.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// Fields separated by tabs or runs of spaces.
    Tsv,
    Csv,
}

impl Format {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsv" => Ok(Format::Tsv),
            "csv" => Ok(Format::Csv),
            other => Err(Error::config(format!("unknown input format `{other}` (expected tsv or csv)"))),
        }
    }

    /// Picks the format from a file extension, defaulting to tsv.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Tsv,
        }
    }

    fn fields<'a>(&self, line: &'a str) -> Vec<&'a str> {
        match self {
            Format::Tsv => line.split_whitespace().collect(),
            Format::Csv => line.split(',').map(str::trim).collect(),
        }
    }
}

/// Bidirectional map between external string ids and dense integer ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    names: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_insert(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Writes `external_id<TAB>int_id` lines in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for (id, name) in self.names.iter().enumerate() {
            writeln!(w, "{name}\t{id}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut vocab = Vocabulary::new();
        let reader = BufReader::new(fs::File::open(path)?);
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |msg: &str| Error::Parse {
                path: path.to_owned(),
                line: lineno + 1,
                msg: msg.to_owned(),
            };
            let (name, id) = line.rsplit_once('\t').ok_or_else(|| parse_err("expected name<TAB>id"))?;
            let id: u32 = id.trim().parse().map_err(|_| parse_err("id is not an integer"))?;
            if id as usize != vocab.len() {
                return Err(parse_err("ids must be dense and in order"));
            }
            vocab.get_or_insert(name);
        }
        Ok(vocab)
    }
}

/// Reads one domain file and returns deduplicated `(user, item)` pairs in
/// first-occurrence order.
///
/// `per_user_cap`, when set, keeps only each user's first `cap` distinct
/// items.
pub fn load_domain(
    path: &Path,
    format: Format,
    users: &mut Vocabulary,
    items: &mut Vocabulary,
    per_user_cap: Option<usize>,
) -> Result<Vec<(u32, u32)>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut seen = HashSet::new();
    let mut per_user: HashMap<u32, usize> = HashMap::new();
    let mut pairs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields = format.fields(&line);
        if fields.len() < 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: lineno + 1,
                msg: format!("expected `user{0}item`, got {line:?}", match format {
                    Format::Tsv => "<TAB>",
                    Format::Csv => ",",
                }),
            });
        }
        let u = users.get_or_insert(fields[0]);
        let i = items.get_or_insert(fields[1]);
        if !seen.insert((u, i)) {
            continue;
        }
        if let Some(cap) = per_user_cap {
            let n = per_user.entry(u).or_default();
            if *n >= cap {
                continue;
            }
            *n += 1;
        }
        pairs.push((u, i));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawDomain {
    pub name: String,
    pub n_items: usize,
    pub pairs: Vec<(u32, u32)>,
}

/// Unsplit interactions for all domains over a shared user id space.
#[derive(Debug, Clone, PartialEq)]
pub struct RawInteractions {
    pub n_users: usize,
    pub domains: Vec<RawDomain>,
}

/// Raw interactions plus the vocabularies that produced them.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub raw: RawInteractions,
    pub users: Vocabulary,
    pub items: Vec<Vocabulary>,
}

impl Corpus {
    /// Loads one file per domain; domain names come from file stems.
    pub fn load(paths: &[impl AsRef<Path>], format: Option<Format>, per_user_cap: Option<usize>) -> Result<Self> {
        let mut users = Vocabulary::new();
        let mut items = Vec::with_capacity(paths.len());
        let mut domains = Vec::with_capacity(paths.len());
        for path in paths {
            let path = path.as_ref();
            let fmt = format.unwrap_or_else(|| Format::from_path(path));
            let mut vocab = Vocabulary::new();
            let pairs = load_domain(path, fmt, &mut users, &mut vocab, per_user_cap)?;
            domains.push(RawDomain {
                name: path
                    .file_stem()
                    .map_or_else(|| format!("domain{}", domains.len()), |s| s.to_string_lossy().into_owned()),
                n_items: vocab.len(),
                pairs,
            });
            items.push(vocab);
        }
        Ok(Self {
            raw: RawInteractions {
                n_users: users.len(),
                domains,
            },
            users,
            items,
        })
    }

    /// Writes `users.vocab` and `items.<d>.vocab` into `dir`.
    pub fn save_vocabularies(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.users.save(&dir.join("users.vocab"))?;
        for (d, v) in self.items.iter().enumerate() {
            v.save(&dir.join(format!("items.{d}.vocab")))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            valid: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.valid, self.test];
        if all.iter().any(|r| !(0.0..=1.0).contains(r)) || ((all.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("split ratios {all:?} must be in [0,1] and sum to 1")));
        }
        Ok(())
    }

    /// `(train, valid, test)` counts for a user holding `n` items in a
    /// domain. Users with fewer than three items keep everything in train;
    /// otherwise valid and test are rounded and train takes the remainder.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        if n < 3 {
            return (n, 0, 0);
        }
        let valid = (n as f64 * self.valid).round() as usize;
        let test = (n as f64 * self.test).round() as usize;
        let test = test.min(n - valid.min(n));
        let valid = valid.min(n - test);
        (n - valid - test, valid, test)
    }
}

/// Per-domain split lists; every per-user list is sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplits {
    pub name: String,
    pub n_items: usize,
    pub train: Vec<Vec<u32>>,
    pub valid: Vec<Vec<u32>>,
    pub test: Vec<Vec<u32>>,
}

impl DomainSplits {
    pub fn get(&self, split: Split) -> &[Vec<u32>] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn n_interactions(&self, split: Split) -> usize {
        self.get(split).iter().map(Vec::len).sum()
    }
}

/// Immutable train/valid/test interactions for every domain.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionStore {
    n_users: usize,
    domains: Vec<DomainSplits>,
}

impl InteractionStore {
    /// Validates invariants and builds a store.
    pub fn new(n_users: usize, domains: Vec<DomainSplits>) -> Result<Self> {
        let mut has_train = vec![false; n_users];
        for (d, dom) in domains.iter().enumerate() {
            for split in [Split::Train, Split::Valid, Split::Test] {
                let lists = dom.get(split);
                if lists.len() != n_users {
                    return Err(Error::shape(format!("domain {d} {split}: {} user lists for {n_users} users", lists.len())));
                }
                for list in lists {
                    if list.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(Error::config(format!("domain {d} {split}: item lists must be strictly ascending")));
                    }
                    if list.iter().any(|&i| i as usize >= dom.n_items) {
                        return Err(Error::Index(format!("domain {d} {split}: item id out of range")));
                    }
                }
            }
            for u in 0..n_users {
                let t = &dom.train[u];
                if !t.is_empty() {
                    has_train[u] = true;
                }
                let v = &dom.valid[u];
                let s = &dom.test[u];
                if v.iter().any(|i| t.binary_search(i).is_ok())
                    || s.iter().any(|i| t.binary_search(i).is_ok() || v.binary_search(i).is_ok())
                {
                    return Err(Error::config(format!("domain {d}, user {u}: a pair appears in two splits")));
                }
            }
        }
        if let Some(u) = has_train.iter().position(|h| !h) {
            return Err(Error::config(format!("user {u} has no train interaction in any domain")));
        }
        Ok(Self { n_users, domains })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn domain(&self, d: usize) -> &DomainSplits {
        &self.domains[d]
    }

    pub fn domains(&self) -> &[DomainSplits] {
        &self.domains
    }

    pub fn n_items(&self, d: usize) -> usize {
        self.domains[d].n_items
    }

    pub fn items(&self, d: usize, split: Split, user: u32) -> &[u32] {
        &self.domains[d].get(split)[user as usize]
    }

    pub fn train(&self, d: usize, user: u32) -> &[u32] {
        self.items(d, Split::Train, user)
    }

    pub fn is_train_positive(&self, d: usize, user: u32, item: u32) -> bool {
        self.train(d, user).binary_search(&item).is_ok()
    }

    /// Users holding at least one item of `split` in domain `d`.
    pub fn users_with(&self, d: usize, split: Split) -> Vec<u32> {
        self.domains[d]
            .get(split)
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.is_empty())
            .map(|(u, _)| u as u32)
            .collect()
    }

    /// Fraction of the user × item matrix observed in any split.
    pub fn density(&self, d: usize) -> f64 {
        let dom = &self.domains[d];
        let total: usize = [Split::Train, Split::Valid, Split::Test]
            .iter()
            .map(|s| dom.n_interactions(*s))
            .sum();
        total as f64 / (self.n_users * dom.n_items) as f64
    }

    /// Writes the split manifest: `#users`, `#domain` header lines followed
    /// by `domain<TAB>user<TAB>item<TAB>split` rows.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "#users\t{}", self.n_users)?;
        for (d, dom) in self.domains.iter().enumerate() {
            writeln!(w, "#domain\t{d}\t{}\t{}", dom.n_items, dom.name)?;
        }
        for (d, dom) in self.domains.iter().enumerate() {
            for split in [Split::Train, Split::Valid, Split::Test] {
                for (u, items) in dom.get(split).iter().enumerate() {
                    for i in items {
                        writeln!(w, "{d}\t{u}\t{i}\t{split}")?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut n_users = None;
        let mut domains: Vec<DomainSplits> = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            let err = |msg: &str| Error::Parse {
                path: path.to_owned(),
                line: lineno + 1,
                msg: msg.to_owned(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            let num = |s: &str| s.parse::<usize>().map_err(|_| err("expected an integer"));
            match f.first().copied() {
                Some("#users") if f.len() == 2 => n_users = Some(num(f[1])?),
                Some("#domain") if f.len() == 4 => {
                    let n = n_users.ok_or_else(|| err("#users must come first"))?;
                    if num(f[1])? != domains.len() {
                        return Err(err("domains must be listed in order"));
                    }
                    domains.push(DomainSplits {
                        name: f[3].to_owned(),
                        n_items: num(f[2])?,
                        train: vec![Vec::new(); n],
                        valid: vec![Vec::new(); n],
                        test: vec![Vec::new(); n],
                    });
                }
                Some(s) if s.starts_with('#') => return Err(err("unknown header line")),
                None | Some("") => {}
                Some(_) if f.len() == 4 => {
                    let d = num(f[0])?;
                    let u = num(f[1])?;
                    let i = num(f[2])? as u32;
                    let dom = domains.get_mut(d).ok_or_else(|| err("unknown domain"))?;
                    if u >= dom.train.len() {
                        return Err(err("user id out of range"));
                    }
                    match f[3] {
                        "train" => dom.train[u].push(i),
                        "valid" => dom.valid[u].push(i),
                        "test" => dom.test[u].push(i),
                        _ => return Err(err("split must be train, valid or test")),
                    }
                }
                Some(_) => return Err(err("expected domain<TAB>user<TAB>item<TAB>split")),
            }
        }
        let n_users = n_users.ok_or_else(|| Error::Parse {
            path: path.to_owned(),
            line: 0,
            msg: "missing #users header".into(),
        })?;
        for dom in &mut domains {
            for lists in [&mut dom.train, &mut dom.valid, &mut dom.test] {
                lists.iter_mut().for_each(|l| l.sort_unstable());
            }
        }
        InteractionStore::new(n_users, domains)
    }
}

/// In-place Fisher–Yates: for `i` from `len-1` down to 1, swap `i` with a
/// uniform `j ∈ [0, i]`.
pub fn shuffle<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Randomly partitions each user's items in each domain.
///
/// For user `u` in domain `d` the items are sorted ascending, shuffled with
/// [`shuffle`] driven by `seed::derived_rng(seed, "split", d * n_users + u)`,
/// and the shuffled sequence is cut into train, valid and test according to
/// [`SplitRatios::counts`].
pub fn split(raw: &RawInteractions, ratios: SplitRatios, seed: u64) -> Result<InteractionStore> {
    ratios.validate()?;
    let n_users = raw.n_users;
    let mut domains = Vec::with_capacity(raw.domains.len());
    for (d, dom) in raw.domains.iter().enumerate() {
        let mut per_user: Vec<Vec<u32>> = vec![Vec::new(); n_users];
        for &(u, i) in &dom.pairs {
            if u as usize >= n_users || i as usize >= dom.n_items {
                return Err(Error::Index(format!("domain {d}: pair ({u}, {i}) out of range")));
            }
            per_user[u as usize].push(i);
        }
        let mut out = DomainSplits {
            name: dom.name.clone(),
            n_items: dom.n_items,
            train: Vec::with_capacity(n_users),
            valid: Vec::with_capacity(n_users),
            test: Vec::with_capacity(n_users),
        };
        for (u, mut items) in per_user.into_iter().enumerate() {
            items.sort_unstable();
            items.dedup();
            let mut rng = seed::derived_rng(seed, "split", (d * n_users + u) as u64);
            shuffle(&mut items, &mut rng);
            let (n_train, n_valid, _) = ratios.counts(items.len());
            let mut train = items[..n_train].to_vec();
            let mut valid = items[n_train..n_train + n_valid].to_vec();
            let mut test = items[n_train + n_valid..].to_vec();
            train.sort_unstable();
            valid.sort_unstable();
            test.sort_unstable();
            out.train.push(train);
            out.valid.push(valid);
            out.test.push(test);
        }
        domains.push(out);
    }
    InteractionStore::new(n_users, domains)
}

/// One BPR training example: `pos` is a train positive of `user` in
/// `domain`, `neg` is not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BprTriplet {
    pub user: u32,
    pub pos: u32,
    pub neg: u32,
    pub domain: usize,
}

/// Samples BPR triplets for one domain.
///
/// Users are drawn uniformly among those with at least one train item,
/// positives uniformly from the user's train items and negatives uniformly
/// from the remaining items by rejection. Users who own every item of the
/// domain have no valid negative and are skipped with a warning.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    domain: usize,
    n_items: usize,
    users: Vec<u32>,
}

impl TripletSampler {
    pub fn new(store: &InteractionStore, domain: usize) -> Result<Self> {
        if domain >= store.n_domains() {
            return Err(Error::Index(format!("domain {domain} of {}", store.n_domains())));
        }
        let n_items = store.n_items(domain);
        let mut users = Vec::new();
        let mut saturated = 0usize;
        for u in store.users_with(domain, Split::Train) {
            if store.train(domain, u).len() >= n_items {
                saturated += 1;
            } else {
                users.push(u);
            }
        }
        if saturated > 0 {
            warn!("domain {domain}: skipping {saturated} user(s) who interacted with every item");
        }
        if users.is_empty() {
            return Err(Error::config(format!("domain {domain} has no train interactions to sample from")));
        }
        Ok(Self { domain, n_items, users })
    }

    pub fn users(&self) -> &[u32] {
        &self.users
    }

    pub fn sample<R: Rng + ?Sized>(&self, store: &InteractionStore, batch_size: usize, rng: &mut R) -> Vec<BprTriplet> {
        (0..batch_size)
            .map(|_| {
                let user = self.users[rng.random_range(0..self.users.len())];
                let train = store.train(self.domain, user);
                let pos = train[rng.random_range(0..train.len())];
                let neg = loop {
                    let cand = rng.random_range(0..self.n_items) as u32;
                    if train.binary_search(&cand).is_err() {
                        break cand;
                    }
                };
                BprTriplet {
                    user,
                    pos,
                    neg,
                    domain: self.domain,
                }
            })
            .collect()
    }
}

pub fn sample_batch<R: Rng + ?Sized>(
    store: &InteractionStore,
    domain: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<BprTriplet>> {
    Ok(TripletSampler::new(store, domain)?.sample(store, batch_size, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn duplicate_lines_are_dropped() {
        let f = write_tmp("u1 i1\nu1 i1\n");
        let (mut u, mut i) = (Vocabulary::new(), Vocabulary::new());
        let pairs = load_domain(f.path(), Format::Tsv, &mut u, &mut i, None).unwrap();
        assert_eq!(pairs, vec![(0, 0)]);
    }

    #[test]
    fn empty_file_is_empty() {
        let f = write_tmp("");
        let (mut u, mut i) = (Vocabulary::new(), Vocabulary::new());
        assert!(load_domain(f.path(), Format::Tsv, &mut u, &mut i, None).unwrap().is_empty());
    }

    #[test]
    fn ids_follow_first_occurrence() {
        let f = write_tmp("bob\tx\talpha\nann\ty\nbob\ty\n");
        let (mut u, mut i) = (Vocabulary::new(), Vocabulary::new());
        let pairs = load_domain(f.path(), Format::Tsv, &mut u, &mut i, None).unwrap();
        // bob=0, ann=1; x=0, y=1
        assert_eq!(pairs, vec![(0, 0), (1, 1), (0, 1)]);
        assert_eq!(u.name(0), Some("bob"));
        assert_eq!(u.name(1), Some("ann"));
        assert_eq!(i.get("y"), Some(1));
    }

    #[test]
    fn csv_and_cap() {
        let f = write_tmp("a,1\na,2\na,3\nb,1\n");
        let (mut u, mut i) = (Vocabulary::new(), Vocabulary::new());
        let pairs = load_domain(f.path(), Format::Csv, &mut u, &mut i, Some(2)).unwrap();
        assert_eq!(pairs, vec![(0, 0), (0, 1), (1, 0)]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_tmp("u1\ti1\nlonely\n");
        let (mut u, mut i) = (Vocabulary::new(), Vocabulary::new());
        match load_domain(f.path(), Format::Tsv, &mut u, &mut i, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_format_is_config_error() {
        assert!(matches!(Format::parse("parquet"), Err(Error::Config(_))));
    }

    #[test]
    fn vocabulary_roundtrip() {
        let mut v = Vocabulary::new();
        for name in ["z", "a", "m"] {
            v.get_or_insert(name);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.vocab");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }

    fn one_user(n: usize) -> RawInteractions {
        RawInteractions {
            n_users: 1,
            domains: vec![RawDomain {
                name: "d".into(),
                n_items: n.max(1),
                pairs: (0..n as u32).map(|i| (0, i)).collect(),
            }],
        }
    }

    #[test]
    fn ten_items_split_seven_one_two() {
        let s = split(&one_user(10), SplitRatios::default(), 5).unwrap();
        let d = s.domain(0);
        assert_eq!((d.train[0].len(), d.valid[0].len(), d.test[0].len()), (7, 1, 2));
    }

    #[test]
    fn single_item_goes_to_train() {
        let s = split(&one_user(1), SplitRatios::default(), 5).unwrap();
        let d = s.domain(0);
        assert_eq!((d.train[0].len(), d.valid[0].len(), d.test[0].len()), (1, 0, 0));
    }

    #[test]
    fn nine_items_membership_matches_replayed_shuffle() {
        let seed = 2024;
        let s = split(&one_user(9), SplitRatios::default(), seed).unwrap();
        // Independent replay of the documented procedure.
        let mut items: Vec<u32> = (0..9).collect();
        let mut rng = crate::seed::derived_rng(seed, "split", 0);
        for i in (1..items.len()).rev() {
            let j = rng.random_range(0..=i);
            items.swap(i, j);
        }
        // 9 items: valid = round(0.9) = 1, test = round(1.8) = 2, train = 6
        let mut train = items[..6].to_vec();
        let mut valid = items[6..7].to_vec();
        let mut test = items[7..].to_vec();
        train.sort();
        valid.sort();
        test.sort();
        let d = s.domain(0);
        assert_eq!(d.train[0], train);
        assert_eq!(d.valid[0], valid);
        assert_eq!(d.test[0], test);
    }

    #[test]
    fn bad_ratios_rejected() {
        let r = SplitRatios {
            train: 0.5,
            valid: 0.1,
            test: 0.1,
        };
        assert!(split(&one_user(4), r, 0).is_err());
    }

    #[test]
    fn split_manifest_roundtrip() {
        let raw = RawInteractions {
            n_users: 3,
            domains: vec![
                RawDomain {
                    name: "apps".into(),
                    n_items: 6,
                    pairs: vec![(0, 1), (0, 2), (0, 3), (0, 5), (1, 0), (2, 4)],
                },
                RawDomain {
                    name: "video".into(),
                    n_items: 2,
                    pairs: vec![(1, 1)],
                },
            ],
        };
        let store = split(&raw, SplitRatios::default(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("split.tsv");
        store.save(&p).unwrap();
        assert_eq!(InteractionStore::load(&p).unwrap(), store);
    }

    #[test]
    fn forced_negative() {
        let raw = RawInteractions {
            n_users: 1,
            domains: vec![RawDomain {
                name: "d".into(),
                n_items: 2,
                pairs: vec![(0, 0)],
            }],
        };
        let store = split(&raw, SplitRatios::default(), 0).unwrap();
        let mut rng = crate::seed::rng(1);
        let batch = sample_batch(&store, 0, 50, &mut rng).unwrap();
        assert!(batch.iter().all(|t| t.pos == 0 && t.neg == 1 && t.user == 0));
        assert!(sample_batch(&store, 0, 0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn saturated_user_skipped() {
        let raw = RawInteractions {
            n_users: 2,
            domains: vec![RawDomain {
                name: "d".into(),
                n_items: 2,
                pairs: vec![(0, 0), (0, 1), (1, 0)],
            }],
        };
        let store = split(&raw, SplitRatios::default(), 0).unwrap();
        let sampler = TripletSampler::new(&store, 0).unwrap();
        assert_eq!(sampler.users(), &[1]);
    }

    fn chi_square_p(counts: &[u64]) -> f64 {
        let total: u64 = counts.iter().sum();
        let expected = total as f64 / counts.len() as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        1.0 - ChiSquared::new((counts.len() - 1) as f64).unwrap().cdf(stat)
    }

    #[test]
    fn negatives_and_users_are_uniform() {
        // fewer than three items each, so everything lands in train
        let raw = RawInteractions {
            n_users: 3,
            domains: vec![RawDomain {
                name: "d".into(),
                n_items: 5,
                pairs: vec![(0, 0), (1, 2), (2, 4), (2, 3)],
            }],
        };
        let store = split(&raw, SplitRatios::default(), 0).unwrap();
        let sampler = TripletSampler::new(&store, 0).unwrap();
        let mut rng = crate::seed::rng(99);
        let draws = sampler.sample(&store, 100_000, &mut rng);
        let mut neg0 = vec![0u64; 5];
        let mut users = vec![0u64; 3];
        for t in &draws {
            assert!(!store.is_train_positive(0, t.user, t.neg));
            assert!(store.is_train_positive(0, t.user, t.pos));
            users[t.user as usize] += 1;
            if t.user == 0 {
                neg0[t.neg as usize] += 1;
            }
        }
        assert_eq!(neg0[0], 0);
        assert!(chi_square_p(&neg0[1..]) > 0.01);
        assert!(chi_square_p(&users) > 0.01);
    }

    proptest! {
        #[test]
        fn splits_partition_the_input(
            n_items in 1usize..30,
            raw_pairs in prop::collection::vec((0u32..6, 0u32..30), 1..80),
            seed in any::<u64>(),
        ) {
            let mut pairs: Vec<(u32, u32)> = raw_pairs.into_iter().map(|(u, i)| (u, i % n_items as u32)).collect();
            pairs.sort_unstable();
            pairs.dedup();
            // compact users so each appears at least once
            let mut ids: Vec<u32> = pairs.iter().map(|p| p.0).collect();
            ids.dedup();
            let pairs: Vec<(u32, u32)> = pairs.iter().map(|&(u, i)| (ids.binary_search(&u).unwrap() as u32, i)).collect();
            let raw = RawInteractions {
                n_users: ids.len(),
                domains: vec![RawDomain { name: "d".into(), n_items, pairs: pairs.clone() }],
            };
            let store = split(&raw, SplitRatios::default(), seed).unwrap();
            let again = split(&raw, SplitRatios::default(), seed).unwrap();
            prop_assert_eq!(&store, &again);
            let d = store.domain(0);
            let mut union = Vec::new();
            for u in 0..ids.len() {
                for s in [&d.train[u], &d.valid[u], &d.test[u]] {
                    union.extend(s.iter().map(|&i| (u as u32, i)));
                }
            }
            union.sort_unstable();
            prop_assert_eq!(union, pairs);
        }
    }
}
