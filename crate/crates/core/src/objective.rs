//! Training tuples, the multi-task loss, its analytic gradient, and Adam.
//!
//! The encoder is linear: `Ē = M·E₀` with `M = w·Σ_l (L + I)^l`. Because the
//! normalized adjacency is symmetric, so is `M`, and the gradient w.r.t. the
//! input embeddings is obtained by running the same aggregation over the
//! gradient w.r.t. the aggregated embeddings.

use std::fmt;

use rand::Rng;

use crate::data::{Adjacency, Dataset};
use crate::error::{Error, Result};
use crate::graph::NormalizedGraph;
use crate::matrix::{axpy, dot, Matrix};
use crate::model::{aggregate_layers, leaky_relu_grad, sigmoid, Aggregation, ModelState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Variant {
    #[default]
    Full,
    /// No cross-view alignment term.
    DslD,
    /// No social BPR or alignment; social embeddings are added to the user
    /// query at prediction time.
    DslS,
    /// Alignment replaced by in-batch InfoNCE between the two views.
    DslC,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::DslD, Variant::DslS, Variant::DslC];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::DslD => "dsl_d",
            Variant::DslS => "dsl_s",
            Variant::DslC => "dsl_c",
        }
    }

    pub fn fuses_social(self) -> bool {
        self == Variant::DslS
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s || v.name().replace('_', "-") == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// All hyperparameters of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub layers: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Social BPR weight.
    pub lambda1: f64,
    /// Alignment (or InfoNCE) weight.
    pub lambda2: f64,
    /// Embedding L2 weight.
    pub lambda3: f64,
    pub epochs: usize,
    pub patience: usize,
    pub aggregation: Aggregation,
    pub variant: Variant,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            layers: 2,
            lr: 1e-3,
            lr_decay: 0.96,
            batch_size: 2048,
            lambda1: 1e-1,
            lambda2: 1e-5,
            lambda3: 1e-6,
            epochs: 100,
            patience: 10,
            aggregation: Aggregation::Sum,
            variant: Variant::Full,
            temperature: 0.1,
            seed: 2023,
        }
    }
}

impl TrainConfig {
    // Negated comparisons so NaN settings are rejected too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 {
            return bad("dim must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        Ok(())
    }

    /// Loss weights after applying the variant: `(λ1, λ2)`.
    pub fn effective_weights(&self) -> (f64, f64) {
        match self.variant {
            Variant::Full | Variant::DslC => (self.lambda1, self.lambda2),
            Variant::DslD => (self.lambda1, 0.0),
            Variant::DslS => (0.0, 0.0),
        }
    }

    /// Sets one field from its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "dim" | "d" => self.dim = num(key, value)?,
            "layers" | "L" => self.layers = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_decay" | "decay" => self.lr_decay = num(key, value)?,
            "batch_size" | "batch" => self.batch_size = num(key, value)?,
            "lambda1" => self.lambda1 = num(key, value)?,
            "lambda2" => self.lambda2 = num(key, value)?,
            "lambda3" => self.lambda3 = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "agg" | "aggregation" => self.aggregation = value.parse()?,
            "variant" => self.variant = value.parse()?,
            "temperature" | "tau" => self.temperature = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// `key=value` lines accepted by [`TrainConfig::set`].
    pub fn echo(&self) -> String {
        format!(
            "dim={}\nlayers={}\nlr={}\nlr_decay={}\nbatch_size={}\nlambda1={}\nlambda2={}\nlambda3={}\n\
             epochs={}\npatience={}\naggregation={}\nvariant={}\ntemperature={}\nseed={}\nleaky_slope={}\n",
            self.dim,
            self.layers,
            self.lr,
            self.lr_decay,
            self.batch_size,
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.epochs,
            self.patience,
            self.aggregation,
            self.variant,
            self.temperature,
            self.seed,
            crate::model::LEAKY_SLOPE,
        )
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// Both normalized views.
#[derive(Clone, Debug)]
pub struct Graphs {
    pub interaction: NormalizedGraph,
    pub social: NormalizedGraph,
}

impl Graphs {
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self {
            interaction: crate::graph::build_interaction_laplacian(ds),
            social: crate::graph::build_social_laplacian(ds),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    /// `(user, positive item, negative item)`
    pub rec: Vec<(usize, usize, usize)>,
    /// `(user, tied user, untied user)`
    pub soc: Vec<(usize, usize, usize)>,
    /// Independently drawn user pairs for alignment.
    pub ssl: Vec<(usize, usize)>,
}

/// Precomputed adjacency for drawing batches.
#[derive(Clone, Debug)]
pub struct Sampler {
    num_users: usize,
    num_items: usize,
    items: Adjacency,
    ties: Adjacency,
    rec_users: Vec<usize>,
    soc_users: Vec<usize>,
}

impl Sampler {
    /// Fails if a user with train items has interacted with every item.
    /// Users tied to everyone are left out of social anchors.
    pub fn new(ds: &Dataset) -> Result<Self> {
        let items = ds.train_adjacency();
        let ties = ds.social_adjacency();
        let rec_users: Vec<usize> = (0..ds.num_users).filter(|&u| items.degree(u) > 0).collect();
        if let Some(&u) = rec_users.iter().find(|&&u| items.degree(u) >= ds.num_items) {
            return Err(Error::NoNegatives(u));
        }
        let soc_users = (0..ds.num_users)
            .filter(|&u| ties.degree(u) > 0 && ties.degree(u) + 1 < ds.num_users)
            .collect();
        Ok(Self {
            num_users: ds.num_users,
            num_items: ds.num_items,
            items,
            ties,
            rec_users,
            soc_users,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Batch {
        let mut batch = Batch::default();
        if !self.rec_users.is_empty() {
            batch.rec.reserve(batch_size);
            for _ in 0..batch_size {
                let u = self.rec_users[rng.gen_range(0..self.rec_users.len())];
                let pos = self.items.neighbors(u);
                let p = pos[rng.gen_range(0..pos.len())];
                let n = loop {
                    let n = rng.gen_range(0..self.num_items);
                    if !self.items.contains(u, n) {
                        break n;
                    }
                };
                batch.rec.push((u, p, n));
            }
        }
        if !self.soc_users.is_empty() {
            batch.soc.reserve(batch_size);
            for _ in 0..batch_size {
                let i = self.soc_users[rng.gen_range(0..self.soc_users.len())];
                let tied = self.ties.neighbors(i);
                let p = tied[rng.gen_range(0..tied.len())];
                let n = loop {
                    let n = rng.gen_range(0..self.num_users);
                    if n != i && !self.ties.contains(i, n) {
                        break n;
                    }
                };
                batch.soc.push((i, p, n));
            }
        }
        batch.ssl = (0..batch_size)
            .map(|_| (rng.gen_range(0..self.num_users), rng.gen_range(0..self.num_users)))
            .collect();
        batch
    }
}

pub fn sample_batch<R: Rng + ?Sized>(ds: &Dataset, batch_size: usize, rng: &mut R) -> Result<Batch> {
    Ok(Sampler::new(ds)?.sample(batch_size, rng))
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `Σ −ln sigm(pos − neg)`
pub fn bpr_loss(pos: &[f64], neg: &[f64]) -> f64 {
    assert_eq!(pos.len(), neg.len(), "bpr_loss length mismatch");
    pos.iter().zip(neg).map(|(p, n)| softplus(n - p)).sum()
}

/// `Σ max(0, 1 − z·ẑ)`
pub fn ssl_hinge_loss(z: &[f64], z_hat: &[f64]) -> f64 {
    assert_eq!(z.len(), z_hat.len(), "ssl_hinge_loss length mismatch");
    z.iter().zip(z_hat).map(|(a, b)| (1.0 - a * b).max(0.0)).sum()
}

/// Mean InfoNCE over anchors with in-batch negatives, on cosine similarity.
/// Row `k` of `positive` is the positive for row `k` of `anchor`.
pub fn infonce_loss(anchor: &Matrix, positive: &Matrix, temperature: f64) -> Result<f64> {
    Ok(infonce_with_grad(anchor, positive, temperature, false)?.0)
}

type InfoNceOut = (f64, Option<(Matrix, Matrix)>);

pub(crate) fn infonce_with_grad(
    anchor: &Matrix,
    positive: &Matrix,
    temperature: f64,
    want_grad: bool,
) -> Result<InfoNceOut> {
    if anchor.rows() != positive.rows() || anchor.cols() != positive.cols() {
        return Err(Error::Dimension("infonce: anchor/positive shape mismatch".into()));
    }
    let n = anchor.rows();
    if n == 0 {
        return Ok((0.0, want_grad.then(|| (anchor.clone(), positive.clone()))));
    }
    let normalize = |m: &Matrix| -> Result<(Matrix, Vec<f64>)> {
        let mut out = m.clone();
        let mut norms = Vec::with_capacity(m.rows());
        for r in 0..m.rows() {
            let norm = dot(m.row(r), m.row(r)).sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNorm(r));
            }
            out.row_mut(r).iter_mut().for_each(|x| *x /= norm);
            norms.push(norm);
        }
        Ok((out, norms))
    };
    let (a, a_norm) = normalize(anchor)?;
    let (p, p_norm) = normalize(positive)?;

    let mut loss = 0.0;
    let mut coef = Matrix::zeros(n, n);
    for k in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| dot(a.row(k), p.row(j)) / temperature).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        loss += max + sum.ln() - logits[k];
        if want_grad {
            for j in 0..n {
                let softmax = (logits[j] - max).exp() / sum;
                coef[(k, j)] = (softmax - if j == k { 1.0 } else { 0.0 }) / (temperature * n as f64);
            }
        }
    }
    loss /= n as f64;
    if !want_grad {
        return Ok((loss, None));
    }

    // d/dâ_k = Σ_j coef_kj p̂_j ; d/dp̂_j = Σ_k coef_kj â_k ; then through x/‖x‖.
    let d = anchor.cols();
    let mut ga = Matrix::zeros(n, d);
    let mut gp = Matrix::zeros(n, d);
    for k in 0..n {
        for j in 0..n {
            let c = coef[(k, j)];
            axpy(c, p.row(j), ga.row_mut(k));
            axpy(c, a.row(k), gp.row_mut(j));
        }
    }
    let unnormalize = |g: &mut Matrix, unit: &Matrix, norms: &[f64]| {
        for (r, norm) in norms.iter().enumerate() {
            let proj = dot(g.row(r), unit.row(r));
            let row = g.row_mut(r);
            for (x, u) in row.iter_mut().zip(unit.row(r)) {
                *x = (*x - proj * u) / norm;
            }
        }
    };
    unnormalize(&mut ga, &a, &a_norm);
    unnormalize(&mut gp, &p, &p_norm);
    Ok((loss, Some((ga, gp))))
}

/// Unweighted loss components and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub soc: f64,
    /// Hinge alignment loss, or InfoNCE for [`Variant::DslC`].
    pub ssl: f64,
    /// `‖E_u‖² + ‖E_v‖²`
    pub reg: f64,
    pub total: f64,
}

impl fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "total={:.6} rec={:.6} soc={:.6} ssl={:.6} reg={:.6}",
            self.total, self.rec, self.soc, self.ssl, self.reg
        )
    }
}

/// Gradients shaped like the trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub user_emb: Matrix,
    pub item_emb: Matrix,
    pub t: Matrix,
    pub w: Vec<f64>,
    pub c: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(ms: &ModelState) -> Self {
        let d = ms.dim();
        Self {
            user_emb: Matrix::zeros(ms.num_users(), d),
            item_emb: Matrix::zeros(ms.num_items(), d),
            t: Matrix::zeros(d, 2 * d),
            w: vec![0.0; d],
            c: vec![0.0; d],
        }
    }

    /// Tensors in parameter order: `E_u`, `E_v`, `T`, `w`, `c`.
    pub fn slices(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("E_u", self.user_emb.as_slice()),
            ("E_v", self.item_emb.as_slice()),
            ("T", self.t.as_slice()),
            ("w", &self.w),
            ("c", &self.c),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 5] {
        [
            self.user_emb.as_mut_slice(),
            self.item_emb.as_mut_slice(),
            self.t.as_mut_slice(),
            &mut self.w,
            &mut self.c,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|(_, s)| s.iter().all(|x| x.is_finite()))
    }
}

/// Trainable parameter tensors in [`GradientSet::slices`] order.
pub fn param_slices_mut(ms: &mut ModelState) -> [&mut [f64]; 5] {
    [
        ms.user_emb.as_mut_slice(),
        ms.item_emb.as_mut_slice(),
        ms.proj.t.as_mut_slice(),
        &mut ms.proj.w,
        &mut ms.proj.c,
    ]
}

/// Gradient accumulators w.r.t. the aggregated embeddings and projection.
#[derive(Clone, Debug)]
pub struct AggGrads {
    pub agg_r: Matrix,
    pub agg_s: Matrix,
    pub t: Matrix,
    pub w: Vec<f64>,
    pub c: Vec<f64>,
    pub social_touched: bool,
}

impl AggGrads {
    pub fn zeros_like(ms: &ModelState) -> Self {
        let d = ms.dim();
        Self {
            agg_r: Matrix::zeros(ms.agg_r.rows(), d),
            agg_s: Matrix::zeros(ms.agg_s.rows(), d),
            t: Matrix::zeros(d, 2 * d),
            w: vec![0.0; d],
            c: vec![0.0; d],
            social_touched: false,
        }
    }
}

/// Scores `(pos, neg)` of the recommendation triples under `ms`.
fn rec_term(ms: &ModelState, triples: &[(usize, usize, usize)], acc: Option<&mut AggGrads>) -> f64 {
    let users = ms.num_users();
    let mut loss = 0.0;
    let mut acc = acc;
    for &(u, p, n) in triples {
        let q = ms.user_query(u);
        let ep = ms.item_row(p);
        let en = ms.item_row(n);
        let x = dot(&q, ep) - dot(&q, en);
        loss += softplus(-x);
        if let Some(acc) = acc.as_deref_mut() {
            let dx = -sigmoid(-x);
            let diff: Vec<f64> = ep.iter().zip(en).map(|(a, b)| a - b).collect();
            axpy(dx, &diff, acc.agg_r.row_mut(u));
            if ms.fuse_social {
                axpy(dx, &diff, acc.agg_s.row_mut(u));
                acc.social_touched = true;
            }
            axpy(dx, &q, acc.agg_r.row_mut(users + p));
            axpy(-dx, &q, acc.agg_r.row_mut(users + n));
        }
    }
    loss
}

fn soc_term(ms: &ModelState, triples: &[(usize, usize, usize)], scale: f64, acc: Option<&mut AggGrads>) -> f64 {
    let s = &ms.agg_s;
    let mut loss = 0.0;
    let mut acc = acc;
    for &(i, p, n) in triples {
        let x = dot(s.row(i), s.row(p)) - dot(s.row(i), s.row(n));
        loss += softplus(-x);
        if let Some(acc) = acc.as_deref_mut() {
            let dx = -sigmoid(-x) * scale;
            let diff: Vec<f64> = s.row(p).iter().zip(s.row(n)).map(|(a, b)| a - b).collect();
            axpy(dx, &diff, acc.agg_s.row_mut(i));
            axpy(dx, s.row(i), acc.agg_s.row_mut(p));
            axpy(-dx, s.row(i), acc.agg_s.row_mut(n));
            acc.social_touched = true;
        }
    }
    loss
}

/// Hinge alignment loss over `pairs` and, when `acc` is given, its gradient
/// scaled by `scale`. Gradient flows into both the learned relevance `z`
/// (interaction view and projection) and the social similarity `ẑ`.
pub fn ssl_hinge_term(ms: &ModelState, pairs: &[(usize, usize)], scale: f64, acc: Option<&mut AggGrads>) -> f64 {
    let d = ms.dim();
    let mut loss = 0.0;
    let mut acc = acc;
    for &(i, i2) in pairs {
        let a = ms.agg_r.row(i);
        let b = ms.agg_r.row(i2);
        let trace = ms.proj.forward(a, b);
        let z = trace.z;
        let z_hat = ms.social_similarity(i, i2);
        let margin = 1.0 - z * z_hat;
        if margin <= 0.0 {
            continue;
        }
        loss += margin;
        let Some(acc) = acc.as_deref_mut() else {
            continue;
        };
        // ẑ side: ∂/∂ē_i^{(s)} = −z·ē_{i'}^{(s)}
        let dz_hat = -z * scale;
        let (si, si2) = (ms.agg_s.row(i).to_vec(), ms.agg_s.row(i2).to_vec());
        axpy(dz_hat, &si2, acc.agg_s.row_mut(i));
        axpy(dz_hat, &si, acc.agg_s.row_mut(i2));
        acc.social_touched = true;

        // z side through sigm(wᵀ·LeakyReLU(h)).
        let dlogit = -z_hat * scale * z * (1.0 - z);
        if dlogit == 0.0 {
            continue;
        }
        axpy(dlogit, &trace.act, &mut acc.w);
        let dh: Vec<f64> = (0..d)
            .map(|k| dlogit * ms.proj.w[k] * leaky_relu_grad(trace.pre[k]))
            .collect();
        axpy(1.0, &dh, &mut acc.c);
        let mut da = dh.clone();
        let mut db = dh.clone();
        for (k, &g) in dh.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = ms.proj.t.row(k);
            axpy(g, &row[..d], &mut da);
            axpy(g, &row[d..], &mut db);
            let trow = acc.t.row_mut(k);
            axpy(g, a, &mut trow[..d]);
            axpy(g, b, &mut trow[d..]);
        }
        axpy(1.0, &da, acc.agg_r.row_mut(i));
        axpy(1.0, &db, acc.agg_r.row_mut(i2));
    }
    loss
}

/// Distinct users of the alignment pairs, ascending.
pub fn infonce_users(pairs: &[(usize, usize)]) -> Vec<usize> {
    let mut users: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    users.sort_unstable();
    users.dedup();
    users
}

/// InfoNCE between interaction-view and social-view rows of `users`.
pub fn infonce_term(
    ms: &ModelState,
    users: &[usize],
    temperature: f64,
    scale: f64,
    acc: Option<&mut AggGrads>,
) -> Result<f64> {
    let d = ms.dim();
    let anchor = Matrix::from_fn(users.len(), d, |r, c| ms.agg_r[(users[r], c)]);
    let positive = Matrix::from_fn(users.len(), d, |r, c| ms.agg_s[(users[r], c)]);
    let (loss, grads) = infonce_with_grad(&anchor, &positive, temperature, acc.is_some())?;
    if let (Some(acc), Some((ga, gp))) = (acc, grads) {
        for (r, &u) in users.iter().enumerate() {
            axpy(scale, ga.row(r), acc.agg_r.row_mut(u));
            axpy(scale, gp.row(r), acc.agg_s.row_mut(u));
        }
        acc.social_touched = true;
    }
    Ok(loss)
}

fn evaluate(
    batch: &Batch,
    ms: &ModelState,
    cfg: &TrainConfig,
    mut acc: Option<&mut AggGrads>,
) -> Result<LossBreakdown> {
    let (lambda1, lambda2) = cfg.effective_weights();
    let rec = rec_term(ms, &batch.rec, acc.as_deref_mut());
    let soc = if lambda1 > 0.0 {
        soc_term(ms, &batch.soc, lambda1, acc.as_deref_mut())
    } else {
        0.0
    };
    let ssl = if lambda2 > 0.0 {
        match cfg.variant {
            Variant::DslC => infonce_term(ms, &infonce_users(&batch.ssl), cfg.temperature, lambda2, acc)?,
            _ => ssl_hinge_term(ms, &batch.ssl, lambda2, acc),
        }
    } else {
        0.0
    };
    let reg = ms.user_emb.frobenius_sq() + ms.item_emb.frobenius_sq();
    for (name, v) in [("rec", rec), ("soc", soc), ("ssl", ssl), ("reg", reg)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name));
        }
    }
    Ok(LossBreakdown {
        rec,
        soc,
        ssl,
        reg,
        total: rec + lambda1 * soc + lambda2 * ssl + cfg.lambda3 * reg,
    })
}

/// `L_rec + λ1·L_soc + λ2·L_ssl + λ3·(‖E_u‖² + ‖E_v‖²)` on an encoded state.
pub fn joint_loss(batch: &Batch, ms: &ModelState, cfg: &TrainConfig) -> Result<LossBreakdown> {
    evaluate(batch, ms, cfg, None)
}

/// Loss and exact gradient w.r.t. every trainable parameter. `ms` must have
/// been encoded with `cfg.layers` on `graphs`.
pub fn loss_and_gradients(
    batch: &Batch,
    ms: &ModelState,
    cfg: &TrainConfig,
    graphs: &Graphs,
) -> Result<(LossBreakdown, GradientSet)> {
    let mut acc = AggGrads::zeros_like(ms);
    let loss = evaluate(batch, ms, cfg, Some(&mut acc))?;
    let grads = backpropagate(ms, cfg, graphs, acc)?;
    Ok((loss, grads))
}

pub fn compute_gradients(batch: &Batch, ms: &ModelState, cfg: &TrainConfig, graphs: &Graphs) -> Result<GradientSet> {
    Ok(loss_and_gradients(batch, ms, cfg, graphs)?.1)
}

/// Pushes aggregated-embedding gradients back through both encoders and adds
/// the L2 term.
pub fn backpropagate(ms: &ModelState, cfg: &TrainConfig, graphs: &Graphs, acc: AggGrads) -> Result<GradientSet> {
    let users = ms.num_users();
    let weight = ms.aggregation.weight(cfg.layers);
    let through_r = aggregate_layers(&graphs.interaction, acc.agg_r, cfg.layers, weight, None)?;
    let mut user_emb = through_r.slice_rows(0, users);
    let mut item_emb = through_r.slice_rows(users, through_r.rows());
    if acc.social_touched {
        let through_s = aggregate_layers(&graphs.social, acc.agg_s, cfg.layers, weight, None)?;
        user_emb.add_assign(&through_s);
    }
    if cfg.lambda3 > 0.0 {
        user_emb.axpy(2.0 * cfg.lambda3, &ms.user_emb);
        item_emb.axpy(2.0 * cfg.lambda3, &ms.item_emb);
    }
    Ok(GradientSet {
        user_emb,
        item_emb,
        t: acc.t,
        w: acc.w,
        c: acc.c,
    })
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update; `step` is 1-based.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64) {
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for k in 0..param.len() {
        let g = grad[k];
        m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g;
        v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[k] / bc1;
        let v_hat = v[k] / bc2;
        param[k] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// First and second moment buffers for every parameter tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    m: GradientSet,
    v: GradientSet,
    step: u64,
}

impl Adam {
    pub fn new(ms: &ModelState) -> Self {
        Self {
            m: GradientSet::zeros_like(ms),
            v: GradientSet::zeros_like(ms),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, ms: &mut ModelState, grads: &GradientSet, lr: f64) {
        self.step += 1;
        let step = self.step;
        let params = param_slices_mut(ms);
        let ms_ = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((p, (_, g)), m), v) in params.into_iter().zip(grads.slices()).zip(ms_).zip(vs) {
            adam_update(p, g, m, v, step, lr);
        }
    }
}

pub fn adam_step(ms: &mut ModelState, grads: &GradientSet, adam: &mut Adam, lr: f64) {
    adam.step(ms, grads, lr);
}

/// Running loss totals over an epoch.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossMeter {
    sum: LossBreakdown,
    count: usize,
}

impl LossMeter {
    pub fn add(&mut self, l: &LossBreakdown) {
        self.sum.rec += l.rec;
        self.sum.soc += l.soc;
        self.sum.ssl += l.ssl;
        self.sum.reg += l.reg;
        self.sum.total += l.total;
        self.count += 1;
    }

    pub fn mean(&self) -> LossBreakdown {
        let n = self.count.max(1) as f64;
        LossBreakdown {
            rec: self.sum.rec / n,
            soc: self.sum.soc / n,
            ssl: self.sum.ssl / n,
            reg: self.sum.reg / n,
            total: self.sum.total / n,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, InteractionTable, SocialTable};
    use crate::model::init_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bpr_equal_scores_is_ln2() {
        let l = bpr_loss(&[0.3, -1.0], &[0.3, -1.0]);
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bpr_large_margin_is_stable() {
        let l = bpr_loss(&[40.0], &[0.0]);
        assert!((0.0..1e-17).contains(&l));
        let l = bpr_loss(&[0.0], &[800.0]);
        assert!((l - 800.0).abs() < 1e-12);
    }

    #[test]
    fn hinge_cases() {
        assert_eq!(ssl_hinge_loss(&[1.0], &[1.0]), 0.0);
        assert_eq!(ssl_hinge_loss(&[0.5], &[0.0]), 1.0);
        assert_eq!(ssl_hinge_loss(&[0.8], &[2.0]), 0.0);
    }

    #[test]
    fn infonce_closed_form() {
        let anchor = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let l = infonce_loss(&anchor, &anchor, 1.0).unwrap();
        let e = std::f64::consts::E;
        let expected = -(e / (e + 1.0)).ln();
        assert!((l - expected).abs() < 1e-14);
        assert!((expected - 0.3133).abs() < 1e-4);

        let one = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let other = Matrix::from_vec(1, 3, vec![-3.0, 0.5, 1.0]);
        assert!(infonce_loss(&one, &other, 0.1).unwrap().abs() < 1e-15);

        let zero = Matrix::zeros(2, 2);
        assert!(matches!(infonce_loss(&zero, &anchor, 1.0), Err(Error::ZeroNorm(0))));
    }

    #[test]
    fn config_validation_and_roundtrip() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let mut back = TrainConfig {
            dim: 1,
            ..TrainConfig::default()
        };
        for line in cfg.echo().lines() {
            let (k, v) = line.split_once('=').unwrap();
            if k != "leaky_slope" {
                back.set(k, v).unwrap();
            }
        }
        assert_eq!(back, cfg);
        for bad in [
            TrainConfig {
                lr_decay: 0.0,
                ..cfg.clone()
            },
            TrainConfig {
                lr_decay: 1.5,
                ..cfg.clone()
            },
            TrainConfig {
                lambda2: -1.0,
                ..cfg.clone()
            },
            TrainConfig {
                batch_size: 0,
                ..cfg.clone()
            },
            TrainConfig {
                temperature: 0.0,
                ..cfg.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
        assert!(cfg.clone().set("nope", "1").is_err());
        assert_eq!("dsl-c".parse::<Variant>().unwrap(), Variant::DslC);
    }

    fn tiny() -> Dataset {
        let inter = InteractionTable::parse("a x\n");
        let mut ds = build_dataset(&inter, &SocialTable::default(), 0).unwrap();
        ds.num_items = 2;
        ds.item_ids.push("y".into());
        ds
    }

    #[test]
    fn negative_is_the_other_item() {
        let ds = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&ds, 16, &mut rng).unwrap();
        assert!(batch.rec.iter().all(|&t| t == (0, 0, 1)));
        assert!(batch.soc.is_empty());
        assert_eq!(batch.ssl.len(), 16);
    }

    #[test]
    fn saturated_user_is_fatal() {
        let inter = InteractionTable::parse("a x\na y\nb x\n");
        let mut ds = build_dataset(&inter, &SocialTable::default(), 0).unwrap();
        ds.train = vec![(0, 0), (0, 1), (1, 0)];
        assert!(matches!(Sampler::new(&ds), Err(Error::NoNegatives(0))));
    }

    #[test]
    fn batch_lists_have_requested_length() {
        let inter = InteractionTable::parse("a x\nb y\nc z\nc x\n");
        let soc = SocialTable::parse("a b\n");
        let ds = build_dataset(&inter, &soc, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = sample_batch(&ds, 4, &mut rng).unwrap();
        assert_eq!((b.rec.len(), b.soc.len(), b.ssl.len()), (4, 4, 4));
        let adj = ds.social_adjacency();
        for &(i, p, n) in &b.soc {
            assert!(adj.contains(i, p) && !adj.contains(i, n) && n != i);
        }
    }

    fn encoded(i: usize, j: usize, d: usize, seed: u64) -> (ModelState, Graphs, TrainConfig) {
        let mut ms = init_model(i, j, d, seed);
        let graphs = Graphs {
            interaction: NormalizedGraph::interaction(i, j, &[]),
            social: NormalizedGraph::social(i, &[]),
        };
        let cfg = TrainConfig {
            layers: 0,
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..TrainConfig::default()
        };
        ms.encode(&graphs.interaction, &graphs.social, 0).unwrap();
        (ms, graphs, cfg)
    }

    #[test]
    fn empty_batch_zero_weights_zero_gradient() {
        let (ms, graphs, cfg) = encoded(3, 3, 4, 0);
        let g = compute_gradients(&Batch::default(), &ms, &cfg, &graphs).unwrap();
        assert!(g.slices().iter().all(|(_, s)| s.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn single_triple_hand_gradient() {
        let (ms, graphs, cfg) = encoded(1, 2, 3, 4);
        let batch = Batch {
            rec: vec![(0, 0, 1)],
            ..Batch::default()
        };
        let g = compute_gradients(&batch, &ms, &cfg, &graphs).unwrap();
        let (eu, ep, en) = (ms.user_emb.row(0), ms.item_emb.row(0), ms.item_emb.row(1));
        let x = dot(eu, ep) - dot(eu, en);
        for k in 0..3 {
            let expected = -sigmoid(-x) * (ep[k] - en[k]);
            assert!((g.user_emb[(0, k)] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_weights_total_is_rec() {
        let (ms, _, cfg) = encoded(3, 3, 4, 1);
        let batch = Batch {
            rec: vec![(0, 1, 2), (2, 0, 1)],
            soc: vec![(0, 1, 2)],
            ssl: vec![(0, 1)],
        };
        let l = joint_loss(&batch, &ms, &cfg).unwrap();
        assert_eq!(l.total, l.rec);
    }

    #[test]
    fn hinge_inactive_pairs_have_no_gradient() {
        let (mut ms, graphs, mut cfg) = encoded(2, 1, 2, 0);
        cfg.lambda2 = 1.0;
        ms.user_emb = Matrix::from_vec(2, 2, vec![3.0, 0.0, 3.0, 0.0]);
        ms.encode(&graphs.interaction, &graphs.social, 0).unwrap();
        // ẑ = 9 and z ≥ ~0.3 for any projection at this scale.
        let batch = Batch {
            ssl: vec![(0, 1)],
            ..Batch::default()
        };
        assert!(ms.interaction_similarity(0, 1) * ms.social_similarity(0, 1) > 1.0);
        let g = compute_gradients(&batch, &ms, &cfg, &graphs).unwrap();
        assert!(g.slices().iter().all(|(_, s)| s.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut ms = init_model(2, 2, 3, 0);
        let before = ms.clone();
        let mut adam = Adam::new(&ms);
        let g = GradientSet::zeros_like(&ms);
        for _ in 0..5 {
            adam_step(&mut ms, &g, &mut adam, 1e-2);
        }
        assert_eq!(ms, before);
        assert_eq!(adam.steps(), 5);
    }

    #[test]
    fn adam_constant_gradient_moves_by_lr() {
        let (mut p, mut m, mut v) = (vec![0.0, 0.0], vec![0.0; 2], vec![0.0; 2]);
        let g = [2.5, -0.01];
        let lr = 1e-3;
        for step in 1..=2000 {
            let before = p.clone();
            adam_update(&mut p, &g, &mut m, &mut v, step, lr);
            if step > 1000 {
                assert!((before[0] - p[0] - lr).abs() < 1e-6);
                assert!((p[1] - before[1] - lr).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert!((cfg.lr_at(2) - 1e-3 * 0.96 * 0.96).abs() < 1e-18);
    }

    #[test]
    fn variant_weights() {
        let cfg = TrainConfig::default();
        let with = |variant| TrainConfig { variant, ..cfg.clone() }.effective_weights();
        assert_eq!(with(Variant::Full), (0.1, 1e-5));
        assert_eq!(with(Variant::DslD), (0.1, 0.0));
        assert_eq!(with(Variant::DslS), (0.0, 0.0));
        assert_eq!(with(Variant::DslC), (0.1, 1e-5));
    }
}
