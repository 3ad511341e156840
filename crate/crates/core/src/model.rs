//! Trainable parameters, the dual-view encoder, the learned cross-view
//! similarity, and prediction scores.

use std::fs;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::read_key_values;
use crate::error::{Error, Result};
use crate::graph::{propagate, NormalizedGraph};
use crate::matrix::{dot, Matrix};

/// Negative slope of the LeakyReLU inside the similarity projection.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    /// `Σ_l E^{(l)}`
    #[default]
    Sum,
    /// `Σ_l E^{(l)} / (L + 1)`
    Mean,
}

impl Aggregation {
    pub fn weight(self, layers: usize) -> f64 {
        match self {
            Aggregation::Sum => 1.0,
            Aggregation::Mean => 1.0 / (layers + 1) as f64,
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "mean" => Ok(Aggregation::Mean),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Aggregation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Aggregation::Sum => "sum",
            Aggregation::Mean => "mean",
        })
    }
}

/// Parameters of `z = sigm(wᵀ·LeakyReLU(T·[a; b] + a + b + c))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    /// `d × 2d`
    pub t: Matrix,
    pub w: Vec<f64>,
    pub c: Vec<f64>,
}

impl ProjectionParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            t: Matrix::zeros(d, 2 * d),
            w: vec![0.0; d],
            c: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    /// Evaluates the projection, keeping intermediates for backprop.
    pub fn forward(&self, a: &[f64], b: &[f64]) -> ProjectionTrace {
        let d = self.dim();
        let mut pre = vec![0.0; d];
        let mut act = vec![0.0; d];
        for k in 0..d {
            let row = self.t.row(k);
            let h = dot(&row[..d], a) + dot(&row[d..], b) + a[k] + b[k] + self.c[k];
            pre[k] = h;
            act[k] = leaky_relu(h);
        }
        let logit = dot(&self.w, &act);
        ProjectionTrace {
            pre,
            act,
            z: sigmoid(logit),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProjectionTrace {
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    pub z: f64,
}

#[inline]
pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

#[inline]
pub fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-layer encoder outputs `E^{(0..=L)}` for each view.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCache {
    pub interaction: Vec<Matrix>,
    pub social: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub user_emb: Matrix,
    pub item_emb: Matrix,
    pub proj: ProjectionParams,
    pub aggregation: Aggregation,
    /// Add the social-view user embedding to the interaction-view one when
    /// scoring items.
    pub fuse_social: bool,
    /// Keep per-layer outputs in `layer_cache` during [`ModelState::encode`].
    pub retain_layers: bool,
    pub layer_cache: LayerCache,
    /// `(I + J) × d`; item rows start at `I`.
    pub agg_r: Matrix,
    /// `I × d`
    pub agg_s: Matrix,
}

/// Uniform `(-1/√d, 1/√d)` embeddings and projection weights, zero bias.
pub fn init_model(num_users: usize, num_items: usize, d: usize, seed: u64) -> ModelState {
    assert!(d > 0, "embedding dimension must be positive");
    let scale = 1.0 / (d as f64).sqrt();
    let dist = Uniform::new(-scale, scale);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows, cols| Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng));
    let user_emb = draw(num_users, d);
    let item_emb = draw(num_items, d);
    let t = draw(d, 2 * d);
    let w = draw(1, d).into_vec();
    ModelState {
        user_emb,
        item_emb,
        proj: ProjectionParams { t, w, c: vec![0.0; d] },
        aggregation: Aggregation::Sum,
        fuse_social: false,
        retain_layers: true,
        layer_cache: LayerCache::default(),
        agg_r: Matrix::zeros(num_users + num_items, d),
        agg_s: Matrix::zeros(num_users, d),
    }
}

/// `Σ_{l=0}^{L} w·(L+I)^l x`, optionally recording each layer.
pub(crate) fn aggregate_layers(
    g: &NormalizedGraph,
    x: Matrix,
    layers: usize,
    weight: f64,
    mut record: Option<&mut Vec<Matrix>>,
) -> Result<Matrix> {
    let mut acc = x.clone();
    let mut cur = x;
    for _ in 0..layers {
        let next = propagate(g, &cur)?;
        acc.add_assign(&next);
        if let Some(cache) = record.as_deref_mut() {
            cache.push(std::mem::replace(&mut cur, next));
        } else {
            cur = next;
        }
    }
    if let Some(cache) = record {
        cache.push(cur);
    }
    if weight != 1.0 {
        acc.scale(weight);
    }
    Ok(acc)
}

impl ModelState {
    pub fn num_users(&self) -> usize {
        self.user_emb.rows()
    }

    pub fn num_items(&self) -> usize {
        self.item_emb.rows()
    }

    pub fn dim(&self) -> usize {
        self.user_emb.cols()
    }

    /// Runs both encoders for `layers` propagation steps and aggregates.
    pub fn encode(&mut self, g_r: &NormalizedGraph, g_s: &NormalizedGraph, layers: usize) -> Result<()> {
        let (i, j) = (self.num_users(), self.num_items());
        if g_r.dim() != i + j || g_s.dim() != i {
            return Err(Error::Dimension(format!(
                "encode: graphs of size ({}, {}) for {} users and {} items",
                g_r.dim(),
                g_s.dim(),
                i,
                j
            )));
        }
        let weight = self.aggregation.weight(layers);
        let mut cache = LayerCache::default();
        let keep = self.retain_layers;
        self.agg_r = aggregate_layers(
            g_r,
            Matrix::vstack(&self.user_emb, &self.item_emb),
            layers,
            weight,
            keep.then_some(&mut cache.interaction),
        )?;
        self.agg_s = aggregate_layers(
            g_s,
            self.user_emb.clone(),
            layers,
            weight,
            keep.then_some(&mut cache.social),
        )?;
        self.layer_cache = cache;
        Ok(())
    }

    fn check_user(&self, u: usize) -> Result<()> {
        if u >= self.num_users() {
            return Err(Error::IndexOutOfRange {
                what: "users",
                index: u,
                len: self.num_users(),
            });
        }
        Ok(())
    }

    fn check_item(&self, v: usize) -> Result<()> {
        if v >= self.num_items() {
            return Err(Error::IndexOutOfRange {
                what: "items",
                index: v,
                len: self.num_items(),
            });
        }
        Ok(())
    }

    /// Learned interaction-view relevance `z ∈ (0, 1)` for a user pair.
    pub fn interaction_similarity(&self, i: usize, i2: usize) -> f64 {
        self.proj.forward(self.agg_r.row(i), self.agg_r.row(i2)).z
    }

    /// `⟨ē_i^{(s)}, ē_{i'}^{(s)}⟩`
    pub fn social_similarity(&self, i: usize, i2: usize) -> f64 {
        dot(self.agg_s.row(i), self.agg_s.row(i2))
    }

    /// User row used for item scoring: interaction view, plus social view
    /// when fused.
    pub fn user_query(&self, u: usize) -> Vec<f64> {
        let mut q = self.agg_r.row(u).to_vec();
        if self.fuse_social {
            for (a, b) in q.iter_mut().zip(self.agg_s.row(u)) {
                *a += b;
            }
        }
        q
    }

    pub fn item_row(&self, v: usize) -> &[f64] {
        self.agg_r.row(self.num_users() + v)
    }

    pub fn predict_interaction(&self, u: usize, v: usize) -> Result<f64> {
        self.check_user(u)?;
        self.check_item(v)?;
        Ok(dot(&self.user_query(u), self.item_row(v)))
    }

    pub fn predict_social(&self, i: usize, i2: usize) -> Result<f64> {
        self.check_user(i)?;
        self.check_user(i2)?;
        Ok(self.social_similarity(i, i2))
    }

    pub fn is_finite(&self) -> bool {
        self.user_emb.is_finite()
            && self.item_emb.is_finite()
            && self.proj.t.is_finite()
            && self.proj.w.iter().chain(&self.proj.c).all(|x| x.is_finite())
    }

    /// Writes `shape`, raw little-endian `f64` arrays and a config echo.
    pub fn save(&self, dir: impl AsRef<Path>, layers: usize, config_echo: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let shape = format!(
            "num_users={}\nnum_items={}\ndim={}\nlayers={}\naggregation={}\nfuse_social={}\n",
            self.num_users(),
            self.num_items(),
            self.dim(),
            layers,
            self.aggregation,
            self.fuse_social
        );
        let put = |name: &str, bytes: &[u8]| {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::io(path, e))
        };
        put("shape", shape.as_bytes())?;
        put("E_u", &to_le_bytes(self.user_emb.as_slice()))?;
        put("E_v", &to_le_bytes(self.item_emb.as_slice()))?;
        put("T", &to_le_bytes(self.proj.t.as_slice()))?;
        put("w", &to_le_bytes(&self.proj.w))?;
        put("c", &to_le_bytes(&self.proj.c))?;
        put("config", config_echo.as_bytes())?;
        Ok(())
    }

    /// Loads a checkpoint; returns the state (not yet encoded) and its layer
    /// count.
    pub fn load(dir: impl AsRef<Path>) -> Result<(ModelState, usize)> {
        let dir = dir.as_ref();
        let shape_path = dir.join("shape");
        let shape = read_key_values(&shape_path)?;
        let bad = |detail: String| Error::Format {
            what: "checkpoint",
            path: shape_path.clone(),
            detail,
        };
        let num = |key: &str| -> Result<usize> {
            shape
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("missing or bad `{key}`")))
        };
        let (i, j, d, layers) = (num("num_users")?, num("num_items")?, num("dim")?, num("layers")?);
        let aggregation = shape
            .get("aggregation")
            .map(|s| s.parse())
            .transpose()?
            .unwrap_or_default();
        let fuse_social = shape.get("fuse_social").is_some_and(|s| s == "true");
        let read = |name: &str, len: usize| -> Result<Vec<f64>> {
            let path = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != len * 8 {
                return Err(Error::Format {
                    what: "checkpoint array",
                    path,
                    detail: format!("expected {} values, found {} bytes", len, bytes.len()),
                });
            }
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect())
        };
        let ms = ModelState {
            user_emb: Matrix::from_vec(i, d, read("E_u", i * d)?),
            item_emb: Matrix::from_vec(j, d, read("E_v", j * d)?),
            proj: ProjectionParams {
                t: Matrix::from_vec(d, 2 * d, read("T", 2 * d * d)?),
                w: read("w", d)?,
                c: read("c", d)?,
            },
            aggregation,
            fuse_social,
            retain_layers: true,
            layer_cache: LayerCache::default(),
            agg_r: Matrix::zeros(i + j, d),
            agg_s: Matrix::zeros(i, d),
        };
        Ok((ms, layers))
    }
}

fn to_le_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_graphs(i: usize, j: usize) -> (NormalizedGraph, NormalizedGraph) {
        (NormalizedGraph::interaction(i, j, &[]), NormalizedGraph::social(i, &[]))
    }

    #[test]
    fn init_respects_scale_and_seed() {
        let a = init_model(5, 7, 64, 3);
        let b = init_model(5, 7, 64, 3);
        assert_eq!(a, b);
        let all = a
            .user_emb
            .as_slice()
            .iter()
            .chain(a.item_emb.as_slice())
            .chain(a.proj.t.as_slice())
            .chain(&a.proj.w);
        assert!(all.into_iter().all(|x| x.abs() <= 0.125));
        assert!(a.proj.c.iter().all(|&x| x == 0.0));
        assert_ne!(init_model(5, 7, 64, 4), a);
    }

    #[test]
    fn zero_layers_aggregate_is_stacked_input() {
        let mut ms = init_model(3, 4, 8, 1);
        let (gr, gs) = empty_graphs(3, 4);
        ms.encode(&gr, &gs, 0).unwrap();
        assert_eq!(ms.agg_r, Matrix::vstack(&ms.user_emb, &ms.item_emb));
        assert_eq!(ms.agg_s, ms.user_emb);
        assert_eq!(ms.layer_cache.interaction.len(), 1);
    }

    #[test]
    fn one_layer_single_edge() {
        let mut ms = init_model(1, 1, 4, 9);
        let gr = NormalizedGraph::interaction(1, 1, &[(0, 0)]);
        let gs = NormalizedGraph::social(1, &[]);
        ms.encode(&gr, &gs, 1).unwrap();
        let eu = ms.user_emb.row(0);
        let ev = ms.item_emb.row(0);
        for k in 0..4 {
            assert!((ms.agg_r[(0, k)] - (2.0 * eu[k] + ev[k])).abs() < 1e-15);
        }
        assert_eq!(ms.layer_cache.interaction.len(), 2);
        assert_eq!(ms.layer_cache.social.len(), 2);
    }

    #[test]
    fn encode_rejects_mismatched_graphs() {
        let mut ms = init_model(3, 4, 2, 0);
        let (gr, _) = empty_graphs(3, 5);
        let gs = NormalizedGraph::social(3, &[]);
        assert!(matches!(ms.encode(&gr, &gs, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_projection_gives_half() {
        let mut ms = init_model(4, 2, 3, 5);
        ms.proj = ProjectionParams::zeros(3);
        let (gr, gs) = empty_graphs(4, 2);
        ms.encode(&gr, &gs, 0).unwrap();
        assert_eq!(ms.interaction_similarity(0, 3), 0.5);
        assert_eq!(ms.interaction_similarity(2, 2), 0.5);
    }

    #[test]
    fn scores_and_errors() {
        let mut ms = init_model(2, 2, 3, 5);
        ms.user_emb.fill(0.0);
        ms.item_emb.fill(0.0);
        let (gr, gs) = empty_graphs(2, 2);
        ms.encode(&gr, &gs, 1).unwrap();
        assert_eq!(ms.predict_interaction(1, 1).unwrap(), 0.0);
        assert!(matches!(
            ms.predict_interaction(2, 0),
            Err(Error::IndexOutOfRange { what: "users", .. })
        ));
        assert!(matches!(
            ms.predict_interaction(0, 2),
            Err(Error::IndexOutOfRange { what: "items", .. })
        ));

        let mut ms = init_model(1, 1, 3, 2);
        ms.item_emb = ms.user_emb.clone();
        ms.encode(&gr_of(1, 1), &NormalizedGraph::social(1, &[]), 0).unwrap();
        let norm = ms.user_emb.frobenius_sq();
        assert!((ms.predict_interaction(0, 0).unwrap() - norm).abs() < 1e-15);
        assert!((ms.social_similarity(0, 0) - norm).abs() < 1e-15);
    }

    fn gr_of(i: usize, j: usize) -> NormalizedGraph {
        NormalizedGraph::interaction(i, j, &[])
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut ms = init_model(3, 2, 4, 8);
        ms.fuse_social = true;
        ms.aggregation = Aggregation::Mean;
        let dir = tempfile::tempdir().unwrap();
        ms.save(dir.path(), 2, "lr=0.001\n").unwrap();
        let (back, layers) = ModelState::load(dir.path()).unwrap();
        assert_eq!(layers, 2);
        assert_eq!(back, ms);
        assert_eq!(fs::metadata(dir.path().join("T")).unwrap().len(), 4 * 8 * 8);
    }
}
