//! Leave-one-out ranking evaluation against sampled negatives.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Adjacency, Dataset, DegreeStrata, Split};
use crate::matrix::dot;
use crate::model::ModelState;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub num_negatives: usize,
    pub cutoffs: Vec<usize>,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            num_negatives: 99,
            cutoffs: vec![5, 10, 20],
            seed: 0,
        }
    }
}

/// 0-based rank of the held-out item among `negatives`. A negative outranks
/// the held-out item when it scores higher, or scores equal and has a
/// smaller item index.
pub fn rank_against(held_out: (usize, f64), negatives: &[(usize, f64)]) -> usize {
    let (item, score) = held_out;
    negatives
        .iter()
        .filter(|&&(n, s)| s > score || (s == score && n < item))
        .count()
}

#[inline]
pub fn hit_at(rank: usize, cutoff: usize) -> f64 {
    if rank < cutoff {
        1.0
    } else {
        0.0
    }
}

/// `1 / log2(rank + 2)` inside the cutoff, zero outside.
#[inline]
pub fn ndcg_at(rank: usize, cutoff: usize) -> f64 {
    if rank < cutoff {
        1.0 / ((rank + 2) as f64).log2()
    } else {
        0.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub users: usize,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize], cutoffs: &[usize]) -> Self {
        let n = ranks.len() as f64;
        let mean = |f: &dyn Fn(usize) -> f64| {
            if ranks.is_empty() {
                0.0
            } else {
                ranks.iter().map(|&r| f(r)).sum::<f64>() / n
            }
        };
        Self {
            users: ranks.len(),
            hr: cutoffs.iter().map(|&c| (c, mean(&|r| hit_at(r, c)))).collect(),
            ndcg: cutoffs.iter().map(|&c| (c, mean(&|r| ndcg_at(r, c)))).collect(),
        }
    }

    pub fn hr_at(&self, cutoff: usize) -> f64 {
        self.hr.get(&cutoff).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, cutoff: usize) -> f64 {
        self.ndcg.get(&cutoff).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub cutoffs: Vec<usize>,
    pub overall: Metrics,
    /// Keyed by interval label, e.g. `[5,10)`. Empty strata are absent.
    pub per_stratum: BTreeMap<String, Metrics>,
    pub metadata: BTreeMap<String, String>,
    /// `(user, rank)` for each evaluated user, ascending by user.
    pub ranks: Vec<(usize, usize)>,
    pub skipped: usize,
}

impl EvalReport {
    pub fn hr_at(&self, cutoff: usize) -> f64 {
        self.overall.hr_at(cutoff)
    }

    pub fn ndcg_at(&self, cutoff: usize) -> f64 {
        self.overall.ndcg_at(cutoff)
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_owned(), value.to_string());
        self
    }

    /// `metric cutoff stratum value` rows; the overall stratum is `all`.
    pub fn to_rows(&self) -> String {
        let mut out = String::new();
        let mut emit = |stratum: &str, m: &Metrics| {
            for &c in &self.cutoffs {
                let _ = writeln!(out, "hr {c} {stratum} {}", m.hr_at(c));
                let _ = writeln!(out, "ndcg {c} {stratum} {}", m.ndcg_at(c));
            }
        };
        emit("all", &self.overall);
        for (label, m) in &self.per_stratum {
            emit(label, m);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "# {k}: {v}");
        }
        let _ = write!(out, "{:<12} {:>7}", "stratum", "users");
        for c in &self.cutoffs {
            let _ = write!(out, " {:>9} {:>9}", format!("HR@{c}"), format!("NDCG@{c}"));
        }
        out.push('\n');
        let mut line = |label: &str, m: &Metrics| {
            let _ = write!(out, "{:<12} {:>7}", label, m.users);
            for &c in &self.cutoffs {
                let _ = write!(out, " {:>9.4} {:>9.4}", m.hr_at(c), m.ndcg_at(c));
            }
            out.push('\n');
        };
        line("all", &self.overall);
        for (label, m) in &self.per_stratum {
            line(label, m);
        }
        if self.skipped > 0 {
            let _ = writeln!(out, "# skipped users: {}", self.skipped);
        }
        out
    }
}

fn user_seed(seed: u64, user: usize) -> u64 {
    // splitmix64 finalizer over (seed, user)
    let mut z = seed ^ (user as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Draws `count` distinct items outside `known[user]`, or `None` if there are
/// not enough candidates.
fn sample_negatives(known: &Adjacency, num_items: usize, user: usize, count: usize, seed: u64) -> Option<Vec<usize>> {
    let seen = known.neighbors(user);
    let free = num_items - seen.len();
    if free < count {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(user_seed(seed, user));
    if count * 3 <= free {
        let mut picked = HashSet::with_capacity(count);
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let v = rng.gen_range(0..num_items);
            if seen.binary_search(&v).is_err() && picked.insert(v) {
                out.push(v);
            }
        }
        Some(out)
    } else {
        let mut pool: Vec<usize> = (0..num_items).filter(|v| seen.binary_search(v).is_err()).collect();
        let (chosen, _) = pool.partial_shuffle(&mut rng, count);
        Some(chosen.to_vec())
    }
}

/// Ranks each held-out item of `split` against sampled negatives by the
/// interaction-view score. `ms` must be encoded.
pub fn evaluate(ms: &ModelState, ds: &Dataset, split: Split, opts: &EvalOptions) -> EvalReport {
    let known = ds.known_adjacency();
    let held = ds.held_out(split);
    let results: Vec<Option<(usize, usize)>> = held
        .par_iter()
        .map(|&(u, v)| {
            let negs = sample_negatives(&known, ds.num_items, u, opts.num_negatives, opts.seed)?;
            let q = ms.user_query(u);
            let pos = dot(&q, ms.item_row(v));
            let scored: Vec<(usize, f64)> = negs.iter().map(|&n| (n, dot(&q, ms.item_row(n)))).collect();
            Some((u, rank_against((v, pos), &scored)))
        })
        .collect();
    let skipped = results.iter().filter(|r| r.is_none()).count();
    if skipped > 0 {
        log::warn!(
            "evaluation skipped {skipped} users lacking {} negative candidates",
            opts.num_negatives
        );
    }
    let ranks: Vec<(usize, usize)> = results.into_iter().flatten().collect();
    let only: Vec<usize> = ranks.iter().map(|r| r.1).collect();
    EvalReport {
        cutoffs: opts.cutoffs.clone(),
        overall: Metrics::from_ranks(&only, &opts.cutoffs),
        per_stratum: BTreeMap::new(),
        metadata: BTreeMap::from([("split".to_owned(), format!("{split:?}").to_lowercase())]),
        ranks,
        skipped,
    }
}

/// Groups an existing report's per-user ranks by stratum.
pub fn stratify_report(report: &mut EvalReport, strata: &DegreeStrata) {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(u, rank) in &report.ranks {
        groups.entry(strata.assignment[u]).or_default().push(rank);
    }
    report.per_stratum = groups
        .into_iter()
        .map(|(s, ranks)| {
            (
                strata.boundaries[s].to_string(),
                Metrics::from_ranks(&ranks, &report.cutoffs),
            )
        })
        .collect();
}

pub fn evaluate_stratified(
    ms: &ModelState,
    ds: &Dataset,
    strata: &DegreeStrata,
    split: Split,
    opts: &EvalOptions,
) -> EvalReport {
    let mut report = evaluate(ms, ds, split, opts);
    stratify_report(&mut report, strata);
    report
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelevanceRow {
    pub user: usize,
    pub other: usize,
    /// Learned interaction-view relevance.
    pub z: f64,
    /// Social-view similarity.
    pub z_hat: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelevanceWeightExport {
    /// Ascending by `z`.
    pub rows: Vec<RelevanceRow>,
}

impl RelevanceWeightExport {
    pub fn to_text(&self, ds: &Dataset) -> String {
        let mut out = String::from("# user other z z_hat\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{} {} {:.6} {:.6}",
                ds.user_ids[r.user], ds.user_ids[r.other], r.z, r.z_hat
            );
        }
        out
    }

    pub fn mean_z(&self, mut keep: impl FnMut(&RelevanceRow) -> bool) -> Option<f64> {
        let picked: Vec<f64> = self.rows.iter().filter(|r| keep(r)).map(|r| r.z).collect();
        (!picked.is_empty()).then(|| picked.iter().sum::<f64>() / picked.len() as f64)
    }
}

/// `z` and `ẑ` for each undirected social tie (all, or a seeded sample).
pub fn export_relevance_weights(
    ms: &ModelState,
    ds: &Dataset,
    sample: Option<usize>,
    seed: u64,
) -> RelevanceWeightExport {
    let mut ties: Vec<(usize, usize)> = ds.social.iter().copied().filter(|(a, b)| a < b).collect();
    if let Some(k) = sample {
        if k < ties.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (chosen, _) = ties.partial_shuffle(&mut rng, k);
            let mut chosen = chosen.to_vec();
            chosen.sort_unstable();
            ties = chosen;
        }
    }
    let mut rows: Vec<RelevanceRow> = ties
        .into_iter()
        .map(|(a, b)| RelevanceRow {
            user: a,
            other: b,
            z: ms.interaction_similarity(a, b),
            z_hat: ms.social_similarity(a, b),
        })
        .collect();
    rows.sort_by(|x, y| x.z.total_cmp(&y.z));
    RelevanceWeightExport { rows }
}
