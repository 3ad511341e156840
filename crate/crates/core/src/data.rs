//! Edge-file ingestion, dense ID remapping, leave-one-out splitting, fake-edge
//! injection and degree stratification.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    Interaction,
    Social,
}

/// Deduplicated user-item records, in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InteractionTable {
    pub edges: Vec<(String, String)>,
    pub malformed: usize,
}

/// Deduplicated, symmetrized user-user records. Every tie is stored in both
/// directions; self-loops are dropped.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SocialTable {
    pub edges: Vec<(String, String)>,
    pub malformed: usize,
    pub self_loops: usize,
}

impl SocialTable {
    /// Number of undirected ties.
    pub fn num_ties(&self) -> usize {
        self.edges.len() / 2
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EdgeTable {
    Interaction(InteractionTable),
    Social(SocialTable),
}

/// Splits a line into at most the first two id tokens. Returns `None` for
/// blank and `#` comment lines, `Some(Err(()))` for malformed ones.
fn parse_pair(line: &str) -> Option<Result<(&str, &str), ()>> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return None;
    }
    let mut tokens = line
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty());
    match (tokens.next(), tokens.next()) {
        (Some(a), Some(b)) => Some(Ok((a, b))),
        _ => Some(Err(())),
    }
}

impl InteractionTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table = Self::parse(&text);
        if table.malformed > 0 {
            log::warn!("{}: skipped {} malformed lines", path.display(), table.malformed);
        }
        Ok(table)
    }

    /// `<user> <item> [rating] [timestamp]` per line; extra columns are ignored.
    pub fn parse(text: &str) -> Self {
        let mut seen = HashSet::new();
        let mut table = InteractionTable::default();
        for line in text.lines() {
            match parse_pair(line) {
                None => {}
                Some(Err(())) => table.malformed += 1,
                Some(Ok((u, v))) => {
                    let key = (u.to_owned(), v.to_owned());
                    if seen.insert(key.clone()) {
                        table.edges.push(key);
                    }
                }
            }
        }
        table
    }
}

impl SocialTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table = Self::parse(&text);
        if table.malformed > 0 {
            log::warn!("{}: skipped {} malformed lines", path.display(), table.malformed);
        }
        Ok(table)
    }

    pub fn parse(text: &str) -> Self {
        let mut seen = HashSet::new();
        let mut table = SocialTable::default();
        for line in text.lines() {
            match parse_pair(line) {
                None => {}
                Some(Err(())) => table.malformed += 1,
                Some(Ok((a, b))) if a == b => table.self_loops += 1,
                Some(Ok((a, b))) => {
                    let (a, b) = (a.to_owned(), b.to_owned());
                    if seen.insert((a.clone(), b.clone())) {
                        seen.insert((b.clone(), a.clone()));
                        table.edges.push((a.clone(), b.clone()));
                        table.edges.push((b, a));
                    }
                }
            }
        }
        table
    }
}

pub fn load_edges(path: impl AsRef<Path>, kind: EdgeKind) -> Result<EdgeTable> {
    Ok(match kind {
        EdgeKind::Interaction => EdgeTable::Interaction(InteractionTable::load(path)?),
        EdgeKind::Social => EdgeTable::Social(SocialTable::load(path)?),
    })
}

/// Sorted adjacency lists in compressed layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Adjacency {
    pub fn from_edges(num_sources: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut lists = vec![Vec::new(); num_sources];
        for (s, t) in edges {
            lists[s].push(t);
        }
        let mut offsets = Vec::with_capacity(num_sources + 1);
        let mut targets = Vec::new();
        offsets.push(0);
        for mut list in lists {
            list.sort_unstable();
            list.dedup();
            targets.extend(list);
            offsets.push(targets.len());
        }
        Self { offsets, targets }
    }

    #[inline]
    pub fn num_sources(&self) -> usize {
        self.offsets.len() - 1
    }

    #[inline]
    pub fn neighbors(&self, s: usize) -> &[usize] {
        &self.targets[self.offsets[s]..self.offsets[s + 1]]
    }

    #[inline]
    pub fn degree(&self, s: usize) -> usize {
        self.offsets[s + 1] - self.offsets[s]
    }

    #[inline]
    pub fn contains(&self, s: usize, t: usize) -> bool {
        self.neighbors(s).binary_search(&t).is_ok()
    }

    pub fn num_edges(&self) -> usize {
        self.targets.len()
    }
}

/// Interaction and social edges over dense indices with leave-one-out splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub num_users: usize,
    pub num_items: usize,
    /// Dense index → external id.
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    /// Sorted `(user, item)` pairs.
    pub train: Vec<(usize, usize)>,
    /// At most one held-out item per user, sorted by user.
    pub val: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    /// Sorted, symmetric `(user, user)` records.
    pub social: Vec<(usize, usize)>,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub social_ties: usize,
    pub density: f64,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "users={} items={} interactions={} social_ties={} density={:.4}%",
            self.users,
            self.items,
            self.interactions,
            self.social_ties,
            self.density * 100.0
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Validation,
    Test,
}

impl Dataset {
    pub fn stats(&self) -> DatasetStats {
        let interactions = self.train.len() + self.val.len() + self.test.len();
        DatasetStats {
            users: self.num_users,
            items: self.num_items,
            interactions,
            social_ties: self.social.len() / 2,
            density: interactions as f64 / (self.num_users as f64 * self.num_items as f64),
        }
    }

    pub fn held_out(&self, split: Split) -> &[(usize, usize)] {
        match split {
            Split::Validation => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn train_adjacency(&self) -> Adjacency {
        Adjacency::from_edges(self.num_users, self.train.iter().copied())
    }

    /// Items seen by each user in any split.
    pub fn known_adjacency(&self) -> Adjacency {
        Adjacency::from_edges(
            self.num_users,
            self.train.iter().chain(&self.val).chain(&self.test).copied(),
        )
    }

    pub fn social_adjacency(&self) -> Adjacency {
        Adjacency::from_edges(self.num_users, self.social.iter().copied())
    }

    /// Per-user train interaction count.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_users];
        for &(u, _) in &self.train {
            deg[u] += 1;
        }
        deg
    }

    /// Writes `meta`, `train.txt`, `val.txt`, `test.txt`, `social.txt`, plus
    /// `users.txt` / `items.txt` id maps.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stats = self.stats();
        let meta = format!(
            "num_users={}\nnum_items={}\nseed={}\ndensity={}\ntrain={}\nval={}\ntest={}\nsocial={}\n",
            self.num_users,
            self.num_items,
            self.seed,
            stats.density,
            self.train.len(),
            self.val.len(),
            self.test.len(),
            self.social.len()
        );
        write_file(&dir.join("meta"), meta.as_bytes())?;
        write_pairs(&dir.join("train.txt"), &self.train)?;
        write_pairs(&dir.join("val.txt"), &self.val)?;
        write_pairs(&dir.join("test.txt"), &self.test)?;
        write_pairs(&dir.join("social.txt"), &self.social)?;
        write_file(&dir.join("users.txt"), (self.user_ids.join("\n") + "\n").as_bytes())?;
        write_file(&dir.join("items.txt"), (self.item_ids.join("\n") + "\n").as_bytes())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta");
        let meta = read_key_values(&meta_path)?;
        let get = |key: &str| -> Result<&str> {
            meta.get(key).map(String::as_str).ok_or_else(|| Error::Format {
                what: "dataset meta",
                path: meta_path.clone(),
                detail: format!("missing `{key}`"),
            })
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|_| Error::Format {
                what: "dataset meta",
                path: meta_path.clone(),
                detail: format!("bad `{key}`"),
            })
        };
        let num_users = parse_usize("num_users")?;
        let num_items = parse_usize("num_items")?;
        let seed = get("seed")?.parse().map_err(|_| Error::Format {
            what: "dataset meta",
            path: meta_path.clone(),
            detail: "bad `seed`".into(),
        })?;
        let read_ids = |name: &str, n: usize| -> Result<Vec<String>> {
            let path = dir.join(name);
            match fs::read_to_string(&path) {
                Ok(text) => Ok(text.lines().map(str::to_owned).collect()),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok((0..n).map(|i| i.to_string()).collect()),
                Err(e) => Err(Error::io(path, e)),
            }
        };
        let ds = Dataset {
            num_users,
            num_items,
            user_ids: read_ids("users.txt", num_users)?,
            item_ids: read_ids("items.txt", num_items)?,
            train: read_pairs(&dir.join("train.txt"), num_users, num_items)?,
            val: read_pairs(&dir.join("val.txt"), num_users, num_items)?,
            test: read_pairs(&dir.join("test.txt"), num_users, num_items)?,
            social: read_pairs(&dir.join("social.txt"), num_users, num_users)?,
            seed,
        };
        Ok(ds)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_pairs(path: &Path, pairs: &[(usize, usize)]) -> Result<()> {
    let mut out = Vec::with_capacity(pairs.len() * 12);
    for &(a, b) in pairs {
        writeln!(out, "{a} {b}").expect("write to Vec");
    }
    write_file(path, &out)
}

fn read_pairs(path: &Path, rows: usize, cols: usize) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let Some(parsed) = parse_pair(line) else {
            continue;
        };
        let bad = || Error::Format {
            what: "index pair",
            path: path.to_owned(),
            detail: format!("line {}", lineno + 1),
        };
        let (a, b) = parsed.map_err(|_| bad())?;
        let a: usize = a.parse().map_err(|_| bad())?;
        let b: usize = b.parse().map_err(|_| bad())?;
        if a >= rows || b >= cols {
            return Err(bad());
        }
        pairs.push((a, b));
    }
    Ok(pairs)
}

pub(crate) fn read_key_values(path: &Path) -> Result<HashMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_key_values(&text).map_err(|detail| Error::Format {
        what: "key=value file",
        path: path.to_owned(),
        detail,
    })
}

pub fn parse_key_values(text: &str) -> std::result::Result<HashMap<String, String>, String> {
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", lineno + 1))?;
        map.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    Ok(map)
}

/// Remaps ids densely (first-seen order, interaction users first, then
/// social-only users) and holds out one test and one validation item per
/// eligible user.
///
/// Users with three or more interactions give one item to test and one to
/// validation; users with two give one to test only; single-interaction users
/// stay fully in train.
pub fn build_dataset(inter: &InteractionTable, soc: &SocialTable, split_seed: u64) -> Result<Dataset> {
    if inter.edges.is_empty() {
        return Err(Error::EmptyInteractions);
    }
    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut item_index: HashMap<&str, usize> = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut pairs = Vec::with_capacity(inter.edges.len());
    for (u, v) in &inter.edges {
        let ui = *user_index.entry(u.as_str()).or_insert_with(|| {
            user_ids.push(u.clone());
            user_ids.len() - 1
        });
        let vi = *item_index.entry(v.as_str()).or_insert_with(|| {
            item_ids.push(v.clone());
            item_ids.len() - 1
        });
        pairs.push((ui, vi));
    }
    let mut social = Vec::with_capacity(soc.edges.len());
    for (a, b) in &soc.edges {
        let ai = *user_index.entry(a.as_str()).or_insert_with(|| {
            user_ids.push(a.clone());
            user_ids.len() - 1
        });
        let bi = *user_index.entry(b.as_str()).or_insert_with(|| {
            user_ids.push(b.clone());
            user_ids.len() - 1
        });
        social.push((ai, bi));
    }
    social.sort_unstable();
    social.dedup();

    let num_users = user_ids.len();
    let num_items = item_ids.len();
    let mut per_user = vec![Vec::new(); num_users];
    for (u, v) in pairs {
        per_user[u].push(v);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (u, items) in per_user.iter_mut().enumerate() {
        items.sort_unstable();
        let n = items.len();
        if n >= 2 {
            let t = rng.gen_range(0..n);
            test.push((u, items.swap_remove(t)));
        }
        if n >= 3 {
            let k = rng.gen_range(0..items.len());
            val.push((u, items.swap_remove(k)));
        }
        train.extend(items.iter().map(|&v| (u, v)));
    }
    train.sort_unstable();

    Ok(Dataset {
        num_users,
        num_items,
        user_ids,
        item_ids,
        train,
        val,
        test,
        social,
        seed: split_seed,
    })
}

/// Adds `⌊ratio·|train|⌋` uniformly drawn user-item pairs that appear in no
/// split. Validation and test are untouched.
pub fn inject_noise(ds: &Dataset, ratio: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::NoiseRatio(ratio));
    }
    let count = (ratio * ds.train.len() as f64).floor() as usize;
    if count == 0 {
        return Ok(ds.clone());
    }
    let mut taken: HashSet<(usize, usize)> = ds.train.iter().chain(&ds.val).chain(&ds.test).copied().collect();
    let total = ds.num_users * ds.num_items;
    let available = total - taken.len();
    if count > available {
        return Err(Error::NoiseCapacity {
            requested: count,
            available,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut added = Vec::with_capacity(count);
    if count * 4 <= available {
        while added.len() < count {
            let pair = (rng.gen_range(0..ds.num_users), rng.gen_range(0..ds.num_items));
            if taken.insert(pair) {
                added.push(pair);
            }
        }
    } else {
        let mut free: Vec<(usize, usize)> = (0..ds.num_users)
            .flat_map(|u| (0..ds.num_items).map(move |v| (u, v)))
            .filter(|p| !taken.contains(p))
            .collect();
        let (chosen, _) = free.partial_shuffle(&mut rng, count);
        added.extend_from_slice(chosen);
    }

    let mut out = ds.clone();
    out.train.extend(added);
    out.train.sort_unstable();
    Ok(out)
}

/// Half-open degree interval `[lo, hi)`; `hi = None` is unbounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DegreeInterval {
    pub lo: usize,
    pub hi: Option<usize>,
}

impl DegreeInterval {
    pub fn contains(&self, degree: usize) -> bool {
        degree >= self.lo && self.hi.is_none_or(|hi| degree < hi)
    }
}

impl fmt::Display for DegreeInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.hi {
            Some(hi) => write!(f, "[{},{})", self.lo, hi),
            None => write!(f, "[{},inf)", self.lo),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DegreeStrata {
    pub boundaries: Vec<DegreeInterval>,
    /// User index → stratum index into `boundaries`.
    pub assignment: Vec<usize>,
}

/// `[0,5)`, `[5,10)`, `[10,15)`, `[15,∞)`.
pub fn default_boundaries() -> Vec<DegreeInterval> {
    vec![
        DegreeInterval { lo: 0, hi: Some(5) },
        DegreeInterval { lo: 5, hi: Some(10) },
        DegreeInterval { lo: 10, hi: Some(15) },
        DegreeInterval { lo: 15, hi: None },
    ]
}

/// Parses `0,5,10,15` into `[0,5) [5,10) [10,15) [15,∞)`.
pub fn parse_boundaries(text: &str) -> Result<Vec<DegreeInterval>> {
    let cuts = text
        .split(',')
        .map(|t| t.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Strata(format!("{text:?}: {e}")))?;
    let mut out: Vec<DegreeInterval> = cuts
        .windows(2)
        .map(|w| DegreeInterval {
            lo: w[0],
            hi: Some(w[1]),
        })
        .collect();
    if let Some(&last) = cuts.last() {
        out.push(DegreeInterval { lo: last, hi: None });
    }
    validate_boundaries(&out)?;
    Ok(out)
}

fn validate_boundaries(boundaries: &[DegreeInterval]) -> Result<()> {
    let first = boundaries.first().ok_or_else(|| Error::Strata("no intervals".into()))?;
    if first.lo != 0 {
        return Err(Error::Strata(format!("first interval starts at {}, not 0", first.lo)));
    }
    for pair in boundaries.windows(2) {
        match pair[0].hi {
            None => return Err(Error::Strata(format!("{} is unbounded but not last", pair[0]))),
            Some(hi) if hi <= pair[0].lo => return Err(Error::Strata(format!("{} is empty", pair[0]))),
            Some(hi) if hi < pair[1].lo => {
                return Err(Error::Strata(format!("gap between {} and {}", pair[0], pair[1])))
            }
            Some(hi) if hi > pair[1].lo => return Err(Error::Strata(format!("{} overlaps {}", pair[0], pair[1]))),
            Some(_) => {}
        }
    }
    if boundaries.last().and_then(|b| b.hi).is_some() {
        return Err(Error::Strata("last interval must be unbounded".into()));
    }
    Ok(())
}

/// Assigns each user to the interval containing its train degree.
pub fn stratify_by_degree(ds: &Dataset, boundaries: &[DegreeInterval]) -> Result<DegreeStrata> {
    validate_boundaries(boundaries)?;
    let assignment = ds
        .degrees()
        .into_iter()
        .map(|deg| {
            boundaries
                .iter()
                .position(|b| b.contains(deg))
                .expect("validated intervals cover every degree")
        })
        .collect();
    Ok(DegreeStrata {
        boundaries: boundaries.to_vec(),
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(lines: &str) -> InteractionTable {
        InteractionTable::parse(lines)
    }

    #[test]
    fn duplicate_interactions_are_dropped() {
        let t = table("u1 i1\nu1 i1\nu2 i3\n");
        assert_eq!(t.edges.len(), 2);
        assert_eq!(t.malformed, 0);
    }

    #[test]
    fn social_ties_are_symmetrized() {
        let s = SocialTable::parse("u1 u2\n");
        assert_eq!(s.edges, vec![("u1".into(), "u2".into()), ("u2".into(), "u1".into())]);
        assert_eq!(s.num_ties(), 1);
        let s = SocialTable::parse("u1 u2\nu2 u1\nu3 u3\n");
        assert_eq!(s.edges.len(), 2);
        assert_eq!(s.self_loops, 1);
    }

    #[test]
    fn parser_skips_comments_and_counts_malformed() {
        let t = table("# header\nu1,i1,5,1234\n\nlonely\nu2\ti2 4.0\n");
        assert_eq!(t.edges, vec![("u1".into(), "i1".into()), ("u2".into(), "i2".into())]);
        assert_eq!(t.malformed, 1);
    }

    #[test]
    fn load_missing_file_is_fatal() {
        let err = load_edges("/nonexistent/edges.txt", EdgeKind::Social).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn empty_interactions_rejected() {
        let err = build_dataset(&InteractionTable::default(), &SocialTable::default(), 0).unwrap_err();
        assert!(matches!(err, Error::EmptyInteractions));
    }

    #[test]
    fn leave_one_out_eligibility() {
        let inter = table("a x\na y\na z\nb x\nb y\nc x\n");
        let ds = build_dataset(&inter, &SocialTable::default(), 7).unwrap();
        let (a, b, c) = (0, 1, 2);
        let train_of = |u| ds.train.iter().filter(|e| e.0 == u).count();
        assert_eq!(train_of(a), 1);
        assert!(ds.val.iter().any(|e| e.0 == a) && ds.test.iter().any(|e| e.0 == a));
        assert_eq!(train_of(b), 1);
        assert!(ds.test.iter().any(|e| e.0 == b) && !ds.val.iter().any(|e| e.0 == b));
        assert_eq!(train_of(c), 1);
        assert!(!ds.test.iter().any(|e| e.0 == c) && !ds.val.iter().any(|e| e.0 == c));

        let mut all: Vec<_> = ds.train.iter().chain(&ds.val).chain(&ds.test).copied().collect();
        all.sort_unstable();
        let before = all.len();
        all.dedup();
        assert_eq!(before, all.len());
        assert_eq!(all.len(), 6);
    }

    #[test]
    fn social_only_users_are_retained() {
        let inter = table("a x\n");
        let soc = SocialTable::parse("a ghost\n");
        let ds = build_dataset(&inter, &soc, 0).unwrap();
        assert_eq!(ds.num_users, 2);
        assert_eq!(ds.user_ids, vec!["a", "ghost"]);
        assert_eq!(ds.social, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn noise_ratio_zero_is_identity() {
        let inter = table("a x\na y\nb y\n");
        let ds = build_dataset(&inter, &SocialTable::default(), 1).unwrap();
        assert_eq!(inject_noise(&ds, 0.0, 3).unwrap(), ds);
        assert!(matches!(inject_noise(&ds, 1.5, 3), Err(Error::NoiseRatio(_))));
        assert!(matches!(inject_noise(&ds, -0.1, 3), Err(Error::NoiseRatio(_))));
    }

    #[test]
    fn noise_capacity_is_checked() {
        // 2 users x 2 items, 3 edges taken; one free slot.
        let inter = table("a x\na y\nb x\n");
        let ds = build_dataset(&inter, &SocialTable::default(), 1).unwrap();
        assert_eq!(ds.train.len(), 2);
        let noisy = inject_noise(&ds, 0.5, 0).unwrap();
        assert_eq!(noisy.train.len(), 3);
        assert!(noisy.train.contains(&(1, 1)));
    }

    #[test]
    fn strata_defaults_and_validation() {
        let b = default_boundaries();
        assert_eq!(b[0].to_string(), "[0,5)");
        assert!(b[0].contains(0));
        assert!(b[2].contains(12));
        assert!(b[3].contains(1_000_000));
        assert_eq!(parse_boundaries("0,5,10,15").unwrap(), b);

        let gap = vec![
            DegreeInterval { lo: 0, hi: Some(5) },
            DegreeInterval { lo: 6, hi: None },
        ];
        assert!(matches!(validate_boundaries(&gap), Err(Error::Strata(_))));
        let overlap = vec![
            DegreeInterval { lo: 0, hi: Some(5) },
            DegreeInterval { lo: 4, hi: None },
        ];
        assert!(matches!(validate_boundaries(&overlap), Err(Error::Strata(_))));
        assert!(parse_boundaries("1,5").is_err());
        assert!(parse_boundaries("0,5,5").is_err());
    }

    #[test]
    fn stratify_uses_train_degree() {
        let mut lines = String::new();
        for i in 0..14 {
            lines.push_str(&format!("heavy i{i}\n"));
        }
        lines.push_str("light i0\n");
        let ds = build_dataset(&table(&lines), &SocialTable::parse("light loner\n"), 0).unwrap();
        let strata = stratify_by_degree(&ds, &default_boundaries()).unwrap();
        // heavy keeps 12 train items after val/test holdout.
        assert_eq!(ds.degrees(), vec![12, 1, 0]);
        assert_eq!(strata.assignment, vec![2, 0, 0]);
    }

    #[test]
    fn save_load_roundtrip() {
        let inter = table("a x\na y\na z\nb x\nb z\nc y\n");
        let soc = SocialTable::parse("a b\nc d\n");
        let ds = build_dataset(&inter, &soc, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
    }
}
