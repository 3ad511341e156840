//! Planted-cluster fixtures: users and items belong to taste clusters, and a
//! controlled fraction of social ties cross clusters.

use std::fmt::Write as _;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{build_dataset, Dataset, InteractionTable, SocialTable};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedConfig {
    pub num_users: usize,
    pub num_items: usize,
    pub clusters: usize,
    /// Interactions drawn per user before deduplication.
    pub interactions_per_user: usize,
    /// Probability an interaction falls in the user's own cluster.
    pub in_cluster: f64,
    /// In-cluster items are drawn with weight `1 / (rank + 1)^skew`; 0 is
    /// uniform.
    pub popularity_skew: f64,
    /// Ties initiated per user.
    pub ties_per_user: usize,
    /// Fraction of each user's initiated ties that go to another cluster.
    pub cross_ties: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            num_users: 300,
            num_items: 400,
            clusters: 2,
            interactions_per_user: 8,
            in_cluster: 0.95,
            popularity_skew: 1.0,
            ties_per_user: 10,
            cross_ties: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlantedDataset {
    pub dataset: Dataset,
    /// Dense user index → cluster.
    pub user_cluster: Vec<usize>,
    pub interactions: String,
    pub social: String,
}

impl PlantedDataset {
    pub fn is_cross(&self, a: usize, b: usize) -> bool {
        self.user_cluster[a] != self.user_cluster[b]
    }

    /// Fraction of undirected ties joining different clusters.
    pub fn cross_fraction(&self) -> f64 {
        let ties: Vec<_> = self.dataset.social.iter().filter(|(a, b)| a < b).collect();
        let cross = ties.iter().filter(|(a, b)| self.is_cross(*a, *b)).count();
        cross as f64 / ties.len().max(1) as f64
    }
}

/// User `u` and item `v` belong to cluster `u % clusters` and `v % clusters`.
pub fn planted_clusters(cfg: &PlantedConfig, split_seed: u64) -> Result<PlantedDataset> {
    assert!(cfg.clusters >= 1 && cfg.num_items >= cfg.clusters && cfg.num_users >= cfg.clusters);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cluster_items: Vec<Vec<usize>> = (0..cfg.clusters)
        .map(|c| (c..cfg.num_items).step_by(cfg.clusters).collect())
        .collect();
    let cluster_users: Vec<Vec<usize>> = (0..cfg.clusters)
        .map(|c| (c..cfg.num_users).step_by(cfg.clusters).collect())
        .collect();

    let popularity: Vec<WeightedIndex<f64>> = cluster_items
        .iter()
        .map(|items| {
            WeightedIndex::new((0..items.len()).map(|r| (r as f64 + 1.0).powf(-cfg.popularity_skew)))
                .expect("positive weights")
        })
        .collect();

    let mut interactions = String::new();
    for u in 0..cfg.num_users {
        let own = u % cfg.clusters;
        for _ in 0..cfg.interactions_per_user {
            let v = if rng.gen_bool(cfg.in_cluster) {
                cluster_items[own][popularity[own].sample(&mut rng)]
            } else {
                rng.gen_range(0..cfg.num_items)
            };
            let _ = writeln!(interactions, "u{u} i{v}");
        }
    }

    let cross_per_user = (cfg.ties_per_user as f64 * cfg.cross_ties).round() as usize;
    let mut social = String::new();
    for u in 0..cfg.num_users {
        let own = u % cfg.clusters;
        for t in 0..cfg.ties_per_user {
            let pool = if t < cross_per_user && cfg.clusters > 1 {
                let other = (own + rng.gen_range(1..cfg.clusters)) % cfg.clusters;
                &cluster_users[other]
            } else {
                &cluster_users[own]
            };
            let f = *pool.choose(&mut rng).expect("nonempty cluster");
            if f != u {
                let _ = writeln!(social, "u{u} u{f}");
            }
        }
    }

    let dataset = build_dataset(
        &InteractionTable::parse(&interactions),
        &SocialTable::parse(&social),
        split_seed,
    )?;
    let user_cluster = dataset
        .user_ids
        .iter()
        .map(|id| id[1..].parse::<usize>().expect("generated id") % cfg.clusters)
        .collect();
    Ok(PlantedDataset {
        dataset,
        user_cluster,
        interactions,
        social,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_fraction_is_near_target() {
        let p = planted_clusters(&PlantedConfig::default(), 0).unwrap();
        let f = p.cross_fraction();
        assert!((f - 0.5).abs() < 0.05, "cross fraction {f}");
        assert_eq!(p.dataset.num_users, 300);
    }

    #[test]
    fn deterministic() {
        let cfg = PlantedConfig {
            seed: 4,
            ..PlantedConfig::default()
        };
        let a = planted_clusters(&cfg, 1).unwrap();
        let b = planted_clusters(&cfg, 1).unwrap();
        assert_eq!(a.dataset, b.dataset);
    }
}
