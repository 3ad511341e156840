use dslrec::graph::NormalizedGraph;
use dslrec::model::{init_model, Aggregation, ModelState};
use dslrec::objective::Graphs;
use dslrec::oracle::{dense_forward, random_dataset};
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn init_draws_embeddings_then_projection_in_row_major_order() {
    let ms = init_model(1, 1, 2, 42);
    let dist = Uniform::new(-1.0 / 2f64.sqrt(), 1.0 / 2f64.sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let draws: Vec<f64> = (0..2 + 2 + 8 + 2).map(|_| dist.sample(&mut rng)).collect();
    assert_eq!(ms.user_emb.as_slice(), &draws[0..2]);
    assert_eq!(ms.item_emb.as_slice(), &draws[2..4]);
    assert_eq!(ms.proj.t.as_slice(), &draws[4..12]);
    assert_eq!(ms.proj.w, &draws[12..14]);
    assert_eq!(ms.proj.c, vec![0.0, 0.0]);
}

#[test]
fn init_range_shrinks_with_dimension() {
    let ms = init_model(30, 40, 64, 0);
    for m in [&ms.user_emb, &ms.item_emb, &ms.proj.t] {
        assert!(m.as_slice().iter().all(|v| v.abs() <= 0.125));
    }
}

fn encoded(seed: u64, layers: usize, agg: Aggregation) -> (dslrec::data::Dataset, ModelState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = random_dataset(&mut rng, 9, 11, 0.3, 0.3);
    let g = Graphs::from_dataset(&ds);
    let mut ms = init_model(9, 11, 4, seed);
    ms.aggregation = agg;
    ms.encode(&g.interaction, &g.social, layers).unwrap();
    (ds, ms)
}

#[test]
fn three_layer_encoding_matches_dense_forward() {
    for agg in [Aggregation::Sum, Aggregation::Mean] {
        for seed in 0..5 {
            let (ds, ms) = encoded(seed, 3, agg);
            let (r, s) = dense_forward(&ds, &ms.user_emb, &ms.item_emb, 3, agg).unwrap();
            assert!(ms.agg_r.max_abs_diff(&r) <= 1e-10);
            assert!(ms.agg_s.max_abs_diff(&s) <= 1e-10);
        }
    }
}

/// Straight-line relevance: `sigm(Σ_k w_k·lrelu(Σ_j T_kj a_j + Σ_j T_k,d+j b_j + a_k + b_k + c_k))`.
fn scalar_relevance(ms: &ModelState, i: usize, j: usize) -> f64 {
    let d = ms.dim();
    let mut logit = 0.0;
    for k in 0..d {
        let mut h = ms.agg_r[(i, k)] + ms.agg_r[(j, k)] + ms.proj.c[k];
        for m in 0..d {
            h += ms.proj.t[(k, m)] * ms.agg_r[(i, m)] + ms.proj.t[(k, d + m)] * ms.agg_r[(j, m)];
        }
        logit += ms.proj.w[k] * if h > 0.0 { h } else { 0.01 * h };
    }
    1.0 / (1.0 + (-logit).exp())
}

#[test]
fn similarities_match_scalar_oracles() {
    let (_, mut ms) = encoded(7, 2, Aggregation::Sum);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    ms.proj.c.iter_mut().for_each(|c| *c = rng.gen_range(-0.5..0.5));
    for _ in 0..50 {
        let (i, j) = (rng.gen_range(0..9), rng.gen_range(0..9));
        assert!((ms.interaction_similarity(i, j) - scalar_relevance(&ms, i, j)).abs() <= 1e-12);
        let social: f64 = (0..4).map(|k| ms.agg_s[(i, k)] * ms.agg_s[(j, k)]).sum();
        assert!((ms.predict_social(i, j).unwrap() - social).abs() <= 1e-12);
        let v = rng.gen_range(0..11);
        for fuse in [false, true] {
            ms.fuse_social = fuse;
            let score: f64 = (0..4)
                .map(|k| (ms.agg_r[(i, k)] + if fuse { ms.agg_s[(i, k)] } else { 0.0 }) * ms.agg_r[(9 + v, k)])
                .sum();
            assert!((ms.predict_interaction(i, v).unwrap() - score).abs() <= 1e-12);
        }
    }
    assert!(ms.predict_interaction(9, 0).is_err());
    assert!(ms.predict_social(0, 9).is_err());
}

#[test]
fn checkpoint_restores_scores() {
    let (ds, ms) = encoded(3, 2, Aggregation::Mean);
    let dir = tempfile::tempdir().unwrap();
    ms.save(dir.path(), 2, "dim=4\n").unwrap();
    let (mut back, layers) = ModelState::load(dir.path()).unwrap();
    assert_eq!(layers, 2);
    let g = Graphs::from_dataset(&ds);
    back.encode(&g.interaction, &g.social, layers).unwrap();
    assert_eq!(back.agg_r, ms.agg_r);
    assert_eq!(back.aggregation, Aggregation::Mean);
}

#[test]
fn encode_rejects_foreign_graph() {
    let (_, mut ms) = encoded(0, 1, Aggregation::Sum);
    let g = NormalizedGraph::interaction(2, 2, &[(0, 0)]);
    let s = NormalizedGraph::social(2, &[]);
    assert!(ms.encode(&g, &s, 1).is_err());
}
