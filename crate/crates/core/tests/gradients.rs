//! Analytic gradients against central finite differences.

use dslrec::matrix::Matrix;
use dslrec::model::init_model;
use dslrec::objective::ssl_hinge_term;
use dslrec::objective::{loss_and_gradients, AggGrads, Batch, Graphs, TrainConfig, Variant};
use dslrec::oracle::{random_dataset, GradientCase};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-5;

#[test]
fn every_variant_and_depth_matches_finite_differences() {
    let mut worst = 0.0f64;
    for seed in 0..24u64 {
        let variant = Variant::ALL[seed as usize % 4];
        let layers = (seed as usize / 4) % 3;
        let case = GradientCase::random(seed, variant, layers);
        for (name, err) in case.check(STEP).unwrap() {
            worst = worst.max(err);
            assert!(err <= TOL, "seed {seed} {variant} L={layers}: {name} rel err {err:e}");
        }
    }
    eprintln!("worst relative error {worst:e}");
}

#[test]
fn social_side_alignment_gradient_is_weighted_neighbor_sum() {
    // Holding z fixed, ∂L_ssl/∂ē_i^{(s)} = −Σ_{active i'} z_{i,i'}·ē_{i'}^{(s)}.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ds = random_dataset(&mut rng, 6, 5, 0.4, 0.5);
    let graphs = Graphs::from_dataset(&ds);
    let mut ms = init_model(6, 5, 4, 1);
    ms.encode(&graphs.interaction, &graphs.social, 2).unwrap();
    let pairs: Vec<(usize, usize)> = (0..12).map(|_| (rng.gen_range(0..6), rng.gen_range(0..6))).collect();
    let mut acc = AggGrads::zeros_like(&ms);
    ssl_hinge_term(&ms, &pairs, 1.0, Some(&mut acc));

    let mut expected = Matrix::zeros(6, 4);
    for &(i, j) in &pairs {
        let z = ms.interaction_similarity(i, j);
        if z * ms.social_similarity(i, j) >= 1.0 {
            continue;
        }
        for k in 0..4 {
            expected[(i, k)] -= z * ms.agg_s[(j, k)];
            expected[(j, k)] -= z * ms.agg_s[(i, k)];
        }
    }
    assert!(acc.agg_s.max_abs_diff(&expected) < 1e-14);
}

#[test]
fn projection_parameters_receive_gradient() {
    let case = GradientCase::random(3, Variant::Full, 1);
    let (_, g) = loss_and_gradients(&case.batch, &case.model, &case.config, &case.graphs).unwrap();
    assert!(!case.batch.ssl.is_empty());
    assert!(g.w.iter().any(|&x| x != 0.0));
    assert!(g.t.as_slice().iter().any(|&x| x != 0.0));
}

#[test]
fn loss_halves_within_two_hundred_adam_steps() {
    use dslrec::objective::{joint_loss, Adam};
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ds = random_dataset(&mut rng, 8, 8, 0.35, 0.4);
    let graphs = Graphs::from_dataset(&ds);
    let cfg = TrainConfig {
        dim: 8,
        layers: 2,
        lambda1: 0.1,
        lambda2: 0.1,
        lambda3: 1e-4,
        ..TrainConfig::default()
    };
    let adj = ds.train_adjacency();
    let mut batch = Batch::default();
    for &(u, p) in &ds.train {
        if let Some(n) = (0..8).find(|&n| !adj.contains(u, n)) {
            batch.rec.push((u, p, n));
        }
    }
    batch.ssl = (0..8).map(|i| (i, (i + 3) % 8)).collect();
    let mut ms = init_model(8, 8, 8, 2);
    let mut adam = Adam::new(&ms);
    ms.encode(&graphs.interaction, &graphs.social, 2).unwrap();
    let start = joint_loss(&batch, &ms, &cfg).unwrap().total;
    for _ in 0..200 {
        let (_, g) = loss_and_gradients(&batch, &ms, &cfg, &graphs).unwrap();
        adam.step(&mut ms, &g, 1e-2);
        ms.encode(&graphs.interaction, &graphs.social, 2).unwrap();
    }
    let end = joint_loss(&batch, &ms, &cfg).unwrap().total;
    assert!(end <= 0.5 * start, "{start} -> {end}");
}
