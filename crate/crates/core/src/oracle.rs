//! Dense reference computations and finite differences for checking the
//! sparse pipeline and the analytic gradients on small instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{init_model, Aggregation, ModelState};
use crate::objective::{
    joint_loss, loss_and_gradients, param_slices_mut, Batch, GradientSet, Graphs, TrainConfig, Variant,
};

/// Largest node count the dense reference accepts.
pub const DENSE_CAP: usize = 256;

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for k in 0..a.cols() {
            let x = a[(i, k)];
            if x == 0.0 {
                continue;
            }
            for j in 0..b.cols() {
                out[(i, j)] += x * b[(k, j)];
            }
        }
    }
    out
}

fn identity(n: usize) -> Matrix {
    Matrix::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
}

/// `D^{-1/2} A D^{-1/2}` built from explicit dense matrices, with
/// `0^{-1/2}` taken as 0.
pub fn dense_normalized(adjacency: &Matrix) -> Matrix {
    let n = adjacency.rows();
    let inv_sqrt = Matrix::from_fn(n, n, |r, c| {
        if r != c {
            return 0.0;
        }
        let deg: f64 = adjacency.row(r).iter().sum();
        if deg > 0.0 {
            1.0 / deg.sqrt()
        } else {
            0.0
        }
    });
    matmul(&matmul(&inv_sqrt, adjacency), &inv_sqrt)
}

/// Bipartite block adjacency `[[0, R], [Rᵀ, 0]]` over train edges.
pub fn dense_interaction_adjacency(ds: &Dataset) -> Matrix {
    let n = ds.num_users + ds.num_items;
    let mut a = Matrix::zeros(n, n);
    for &(u, v) in &ds.train {
        a[(u, ds.num_users + v)] = 1.0;
        a[(ds.num_users + v, u)] = 1.0;
    }
    a
}

pub fn dense_social_adjacency(ds: &Dataset) -> Matrix {
    let mut s = Matrix::zeros(ds.num_users, ds.num_users);
    for &(a, b) in &ds.social {
        s[(a, b)] = 1.0;
    }
    s
}

/// `w·Σ_{l=0}^{L} (𝓛 + I)^l · X` via explicit matrix powers.
pub fn dense_aggregate(laplacian: &Matrix, x: &Matrix, layers: usize, aggregation: Aggregation) -> Matrix {
    let n = laplacian.rows();
    let mut step = laplacian.clone();
    step.add_assign(&identity(n));
    let mut power = identity(n);
    let mut sum = Matrix::zeros(n, n);
    for _ in 0..=layers {
        sum.add_assign(&power);
        power = matmul(&step, &power);
    }
    let mut out = matmul(&sum, x);
    out.scale(aggregation.weight(layers));
    out
}

/// Aggregated interaction-view and social-view embeddings, computed densely.
pub fn dense_forward(
    ds: &Dataset,
    user_emb: &Matrix,
    item_emb: &Matrix,
    layers: usize,
    aggregation: Aggregation,
) -> Result<(Matrix, Matrix)> {
    let nodes = ds.num_users + ds.num_items;
    if nodes > DENSE_CAP {
        return Err(Error::OracleCap { cap: DENSE_CAP, nodes });
    }
    let lr = dense_normalized(&dense_interaction_adjacency(ds));
    let ls = dense_normalized(&dense_social_adjacency(ds));
    let agg_r = dense_aggregate(&lr, &Matrix::vstack(user_emb, item_emb), layers, aggregation);
    let agg_s = dense_aggregate(&ls, user_emb, layers, aggregation);
    Ok((agg_r, agg_s))
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` per coordinate.
pub fn finite_difference(mut f: impl FnMut(&[f64]) -> f64, params: &[f64], step: f64) -> Result<Vec<f64>> {
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        let orig = theta[k];
        theta[k] = orig + step;
        let up = f(&theta);
        theta[k] = orig - step;
        let down = f(&theta);
        theta[k] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite-difference probe"));
        }
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// Numeric gradient of [`joint_loss`] w.r.t. every trainable parameter,
/// re-encoding at each probe.
pub fn objective_finite_difference(
    batch: &Batch,
    ms: &ModelState,
    cfg: &TrainConfig,
    graphs: &Graphs,
    step: f64,
) -> Result<GradientSet> {
    let mut out = GradientSet::zeros_like(ms);
    let mut probe = ms.clone();
    probe.retain_layers = false;
    for tensor in 0..5 {
        let base = param_slices_mut(&mut probe)[tensor].to_vec();
        let numeric = finite_difference(
            |theta| {
                param_slices_mut(&mut probe)[tensor].copy_from_slice(theta);
                probe
                    .encode(&graphs.interaction, &graphs.social, cfg.layers)
                    .and_then(|_| joint_loss(batch, &probe, cfg))
                    .map_or(f64::NAN, |l| l.total)
            },
            &base,
            step,
        )?;
        param_slices_mut(&mut probe)[tensor].copy_from_slice(&base);
        out.slices_mut()[tensor].copy_from_slice(&numeric);
    }
    Ok(out)
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for [`relative_error`] in gradient checks.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// A random small dataset with train and social edges but no held-out items.
pub fn random_dataset(rng: &mut impl Rng, num_users: usize, num_items: usize, edge_p: f64, tie_p: f64) -> Dataset {
    let mut train = Vec::new();
    for u in 0..num_users {
        for v in 0..num_items {
            if rng.gen_bool(edge_p) {
                train.push((u, v));
            }
        }
    }
    let mut social = Vec::new();
    for a in 0..num_users {
        for b in a + 1..num_users {
            if rng.gen_bool(tie_p) {
                social.push((a, b));
                social.push((b, a));
            }
        }
    }
    social.sort_unstable();
    Dataset {
        num_users,
        num_items,
        user_ids: (0..num_users).map(|i| format!("u{i}")).collect(),
        item_ids: (0..num_items).map(|i| format!("i{i}")).collect(),
        train,
        val: Vec::new(),
        test: Vec::new(),
        social,
        seed: 0,
    }
}

/// One randomized gradient-check instance.
#[derive(Clone, Debug)]
pub struct GradientCase {
    pub dataset: Dataset,
    pub graphs: Graphs,
    pub model: ModelState,
    pub config: TrainConfig,
    pub batch: Batch,
}

impl GradientCase {
    /// Up to 8 users and 8 items, `layers` propagation steps, unit-scale loss
    /// weights. Alignment pairs sitting on a hinge or LeakyReLU kink are
    /// dropped.
    pub fn random(seed: u64, variant: Variant, layers: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let num_users = rng.gen_range(3..=8);
        let num_items = rng.gen_range(2..=8);
        let dataset = random_dataset(&mut rng, num_users, num_items, 0.4, 0.4);
        let graphs = Graphs::from_dataset(&dataset);
        let d = rng.gen_range(2..=5);
        let config = TrainConfig {
            dim: d,
            layers,
            lambda1: rng.gen_range(0.2..1.0),
            lambda2: rng.gen_range(0.2..1.0),
            lambda3: rng.gen_range(0.001..0.05),
            aggregation: if rng.gen_bool(0.5) {
                Aggregation::Sum
            } else {
                Aggregation::Mean
            },
            variant,
            temperature: rng.gen_range(0.2..1.0),
            ..TrainConfig::default()
        };
        let mut model = init_model(num_users, num_items, d, rng.gen());
        model.aggregation = config.aggregation;
        model.fuse_social = variant.fuses_social();
        // Larger embeddings push some alignment pairs past the hinge.
        let scale = if rng.gen_bool(0.5) { 1.0 } else { 4.0 };
        model.user_emb.scale(scale);
        model.item_emb.scale(scale);
        model.proj.c.iter_mut().for_each(|c| *c = rng.gen_range(-0.3..0.3));
        model
            .encode(&graphs.interaction, &graphs.social, layers)
            .expect("graphs built from the same dataset");

        let b = 6;
        let mut batch = Batch::default();
        for _ in 0..b {
            batch.rec.push((
                rng.gen_range(0..num_users),
                rng.gen_range(0..num_items),
                rng.gen_range(0..num_items),
            ));
            batch.soc.push((
                rng.gen_range(0..num_users),
                rng.gen_range(0..num_users),
                rng.gen_range(0..num_users),
            ));
            batch
                .ssl
                .push((rng.gen_range(0..num_users), rng.gen_range(0..num_users)));
        }
        batch.ssl.retain(|&(i, i2)| {
            let trace = model.proj.forward(model.agg_r.row(i), model.agg_r.row(i2));
            let product = trace.z * model.social_similarity(i, i2);
            (product - 1.0).abs() >= 1e-3 && trace.pre.iter().all(|h| h.abs() >= 1e-4)
        });
        Self {
            dataset,
            graphs,
            model,
            config,
            batch,
        }
    }

    /// Largest relative error per tensor between analytic and numeric
    /// gradients.
    pub fn check(&self, step: f64) -> Result<Vec<(&'static str, f64)>> {
        let (_, analytic) = loss_and_gradients(&self.batch, &self.model, &self.config, &self.graphs)?;
        let numeric = objective_finite_difference(&self.batch, &self.model, &self.config, &self.graphs, step)?;
        Ok(analytic
            .slices()
            .iter()
            .zip(numeric.slices())
            .map(|((name, a), (_, n))| {
                let worst = a
                    .iter()
                    .zip(n)
                    .map(|(&x, &y)| relative_error(x, y, REL_ERR_FLOOR))
                    .fold(0.0, f64::max);
                (*name, worst)
            })
            .collect())
    }
}

/// Maximum elementwise gap between the sparse encoder and the dense
/// reference on a random graph with at most `max_nodes` nodes.
pub fn forward_gap(seed: u64, max_nodes: usize, layers: usize, aggregation: Aggregation) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_users = rng.gen_range(1..max_nodes);
    let num_items = rng.gen_range(1..=max_nodes - num_users);
    let (edge_p, tie_p) = (rng.gen_range(0.0..0.5), rng.gen_range(0.0..0.5));
    let ds = random_dataset(&mut rng, num_users, num_items, edge_p, tie_p);
    let graphs = Graphs::from_dataset(&ds);
    let mut ms = init_model(num_users, num_items, rng.gen_range(1..=6), rng.gen());
    ms.aggregation = aggregation;
    ms.encode(&graphs.interaction, &graphs.social, layers)?;
    let (agg_r, agg_s) = dense_forward(&ds, &ms.user_emb, &ms.item_emb, layers, aggregation)?;
    Ok(ms.agg_r.max_abs_diff(&agg_r).max(ms.agg_s.max_abs_diff(&agg_s)))
}

/// Worst tensor of one [`GradientCase`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientCheck {
    pub seed: u64,
    pub variant: Variant,
    pub layers: usize,
    pub tensor: &'static str,
    pub error: f64,
}

/// Runs `count` gradient cases cycling through every variant and depths
/// 0..=2.
pub fn gradient_suite(count: u64, step: f64) -> Result<Vec<GradientCheck>> {
    (0..count)
        .map(|seed| {
            let variant = Variant::ALL[seed as usize % Variant::ALL.len()];
            let layers = (seed as usize / Variant::ALL.len()) % 3;
            let (tensor, error) = GradientCase::random(seed, variant, layers)
                .check(step)?
                .into_iter()
                .fold(("", 0.0), |acc, t| if t.1 >= acc.1 { t } else { acc });
            Ok(GradientCheck {
                seed,
                variant,
                layers,
                tensor,
                error,
            })
        })
        .collect()
}

/// Largest [`forward_gap`] over `count` seeds, cycling depths 0..=3 and both
/// aggregations.
pub fn forward_suite(count: u64, max_nodes: usize) -> Result<f64> {
    (0..count).try_fold(0.0f64, |worst, seed| {
        let aggregation = if seed % 2 == 0 {
            Aggregation::Sum
        } else {
            Aggregation::Mean
        };
        Ok(worst.max(forward_gap(seed, max_nodes, (seed as usize / 2) % 4, aggregation)?))
    })
}
