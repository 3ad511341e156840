//! Symmetric-normalized adjacency for both views and the `(L + I)·E`
//! propagation step.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::{axpy, Matrix};

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicate coordinates are not
    /// merged; callers pass unique coordinates.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut offsets = vec![0; rows + 1];
        for &(r, c, _) in &triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) out of range");
            offsets[r + 1] += 1;
        }
        for r in 0..rows {
            offsets[r + 1] += offsets[r];
        }
        let indices = triplets.iter().map(|t| t.1).collect();
        let values = triplets.iter().map(|t| t.2).collect();
        Self {
            rows,
            cols,
            offsets,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let range = self.offsets[r]..self.offsets[r + 1];
        (&self.indices[range.clone()], &self.values[range])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, vals) = self.row(r);
        idx.binary_search(&c).map_or(0.0, |k| vals[k])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| {
            let (idx, vals) = self.row(r);
            idx.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    pub fn transpose(&self) -> SparseMatrix {
        SparseMatrix::from_triplets(self.cols, self.rows, self.iter().map(|(r, c, v)| (c, r, v)).collect())
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for (r, c, v) in self.iter() {
            m[(r, c)] = v;
        }
        m
    }

    /// Sorted, in-range column indices and finite values.
    pub fn is_well_formed(&self) -> bool {
        self.offsets.len() == self.rows + 1
            && (0..self.rows).all(|r| {
                let (idx, _) = self.row(r);
                idx.windows(2).all(|w| w[0] < w[1]) && idx.iter().all(|&c| c < self.cols)
            })
            && self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Interaction,
    Social,
}

/// `D^{-1/2} A D^{-1/2}` for one view. The identity self-loop is applied by
/// [`propagate`], not stored.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedGraph {
    pub laplacian: SparseMatrix,
    pub view: View,
}

fn normalized(n: usize, edges: &[(usize, usize)]) -> SparseMatrix {
    let mut degree = vec![0usize; n];
    for &(a, _) in edges {
        degree[a] += 1;
    }
    let triplets = edges
        .iter()
        .map(|&(a, b)| (a, b, 1.0 / ((degree[a] * degree[b]) as f64).sqrt()))
        .collect();
    SparseMatrix::from_triplets(n, n, triplets)
}

impl NormalizedGraph {
    /// Bipartite graph over `num_users + num_items` nodes; items are offset by
    /// `num_users`.
    pub fn interaction(num_users: usize, num_items: usize, edges: &[(usize, usize)]) -> Self {
        let mut sym = Vec::with_capacity(edges.len() * 2);
        for &(u, v) in edges {
            sym.push((u, num_users + v));
            sym.push((num_users + v, u));
        }
        Self {
            laplacian: normalized(num_users + num_items, &sym),
            view: View::Interaction,
        }
    }

    /// `edges` must already hold both directions of every tie.
    pub fn social(num_users: usize, edges: &[(usize, usize)]) -> Self {
        Self {
            laplacian: normalized(num_users, edges),
            view: View::Social,
        }
    }

    pub fn dim(&self) -> usize {
        self.laplacian.rows()
    }
}

/// Interaction-view Laplacian from train edges only.
pub fn build_interaction_laplacian(ds: &Dataset) -> NormalizedGraph {
    NormalizedGraph::interaction(ds.num_users, ds.num_items, &ds.train)
}

pub fn build_social_laplacian(ds: &Dataset) -> NormalizedGraph {
    NormalizedGraph::social(ds.num_users, &ds.social)
}

/// Returns `L·E + E`.
pub fn propagate(g: &NormalizedGraph, e: &Matrix) -> Result<Matrix> {
    if e.rows() != g.dim() {
        return Err(Error::Dimension(format!(
            "propagate: {} embedding rows for a {}-node graph",
            e.rows(),
            g.dim()
        )));
    }
    let d = e.cols();
    let mut out = e.clone();
    if d == 0 {
        return Ok(out);
    }
    out.as_mut_slice().par_chunks_mut(d).enumerate().for_each(|(r, dst)| {
        let (idx, vals) = g.laplacian.row(r);
        for (&c, &w) in idx.iter().zip(vals) {
            axpy(w, e.row(c), dst);
        }
    });
    Ok(out)
}
