use dslrec::data::{build_dataset, parse_boundaries, stratify_by_degree, InteractionTable, SocialTable, Split};
use dslrec::eval::{evaluate, evaluate_stratified, export_relevance_weights, EvalOptions, Metrics};
use dslrec::model::{init_model, ModelState, ProjectionParams};
use dslrec::objective::Graphs;
use dslrec::synthetic::{planted_clusters, PlantedConfig};

/// Every user interacts with exactly three items, so each one has the same
/// number of unseen items and all of them can serve as negatives.
fn uniform_dataset() -> dslrec::data::Dataset {
    let mut text = String::new();
    for u in 0..25 {
        for k in 0..3 {
            text.push_str(&format!("u{u} i{}\n", (u * 7 + k * 5) % 40));
        }
    }
    let mut social = String::new();
    for u in 0..25 {
        social.push_str(&format!("u{u} u{}\n", (u + 1) % 25));
    }
    build_dataset(&InteractionTable::parse(&text), &SocialTable::parse(&social), 1).unwrap()
}

fn encoded(ds: &dslrec::data::Dataset, seed: u64) -> ModelState {
    let g = Graphs::from_dataset(ds);
    let mut ms = init_model(ds.num_users, ds.num_items, 8, seed);
    ms.encode(&g.interaction, &g.social, 2).unwrap();
    ms
}

#[test]
fn exhaustive_negatives_match_full_sort() {
    let ds = uniform_dataset();
    let ms = encoded(&ds, 3);
    let opts = EvalOptions {
        num_negatives: ds.num_items - 3,
        cutoffs: vec![1, 5, 10],
        seed: 0,
    };
    let report = evaluate(&ms, &ds, Split::Test, &opts);
    assert_eq!(report.skipped, 0);
    let mut expected = Vec::new();
    for &(u, v) in &ds.test {
        let known: Vec<usize> = ds
            .train
            .iter()
            .chain(&ds.val)
            .chain(&ds.test)
            .filter(|p| p.0 == u)
            .map(|p| p.1)
            .collect();
        let score = |i: usize| ms.predict_interaction(u, i).unwrap();
        let mut order: Vec<usize> = (0..ds.num_items).filter(|&i| i == v || !known.contains(&i)).collect();
        order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
        expected.push((u, order.iter().position(|&i| i == v).unwrap()));
    }
    expected.sort();
    assert_eq!(report.ranks, expected);
    let ranks: Vec<usize> = expected.iter().map(|r| r.1).collect();
    assert_eq!(report.overall, Metrics::from_ranks(&ranks, &[1, 5, 10]));
}

#[test]
fn no_negatives_means_every_hit() {
    let ds = uniform_dataset();
    let ms = encoded(&ds, 0);
    let report = evaluate(
        &ms,
        &ds,
        Split::Test,
        &EvalOptions {
            num_negatives: 0,
            ..EvalOptions::default()
        },
    );
    for c in [5, 10, 20] {
        assert_eq!(report.hr_at(c), 1.0);
        assert_eq!(report.ndcg_at(c), 1.0);
    }
}

#[test]
fn too_few_candidates_are_skipped() {
    let ds = uniform_dataset();
    let ms = encoded(&ds, 0);
    let report = evaluate(
        &ms,
        &ds,
        Split::Test,
        &EvalOptions {
            num_negatives: 99,
            ..EvalOptions::default()
        },
    );
    assert_eq!(report.skipped, ds.test.len());
    assert_eq!(report.overall.users, 0);
}

#[test]
fn strata_recombine_to_overall() {
    let ds = planted_clusters(&PlantedConfig::default(), 0).unwrap().dataset;
    let ms = encoded(&ds, 1);
    let opts = EvalOptions::default();
    let strata = stratify_by_degree(&ds, &parse_boundaries("0,3,6,9").unwrap()).unwrap();
    let report = evaluate_stratified(&ms, &ds, &strata, Split::Test, &opts);
    let users: usize = report.per_stratum.values().map(|m| m.users).sum();
    assert_eq!(users, report.overall.users);
    for c in [5, 10, 20] {
        let hr: f64 = report
            .per_stratum
            .values()
            .map(|m| m.hr_at(c) * m.users as f64)
            .sum::<f64>()
            / users as f64;
        let ndcg: f64 = report
            .per_stratum
            .values()
            .map(|m| m.ndcg_at(c) * m.users as f64)
            .sum::<f64>()
            / users as f64;
        assert!((hr - report.hr_at(c)).abs() < 1e-12);
        assert!((ndcg - report.ndcg_at(c)).abs() < 1e-12);
    }

    let single = stratify_by_degree(&ds, &parse_boundaries("0").unwrap()).unwrap();
    let one = evaluate_stratified(&ms, &ds, &single, Split::Test, &opts);
    assert_eq!(one.per_stratum.len(), 1);
    assert_eq!(one.per_stratum.values().next().unwrap(), &one.overall);
}

#[test]
fn zero_projection_exports_one_half() {
    let ds = planted_clusters(
        &PlantedConfig {
            num_users: 40,
            num_items: 50,
            ..PlantedConfig::default()
        },
        0,
    )
    .unwrap()
    .dataset;
    let mut ms = encoded(&ds, 2);
    ms.proj = ProjectionParams::zeros(8);
    let all = export_relevance_weights(&ms, &ds, None, 0);
    assert_eq!(all.rows.len(), ds.social.len() / 2);
    assert!(all.rows.iter().all(|r| r.z == 0.5 && r.user < r.other));
    let some = export_relevance_weights(&ms, &ds, Some(5), 3);
    assert_eq!(some.rows.len(), 5);
    assert_eq!(some, export_relevance_weights(&ms, &ds, Some(5), 3));
    assert_eq!(some.to_text(&ds).lines().count(), 6);
}
