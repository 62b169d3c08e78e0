//! Read-only views of a sample's token matrix.
//!
//! Tokens are either stored densely (`n x d`) or as indices into an
//! orthonormal basis. In the basis form token `j` is the unit vector
//! `e_{ids[j]}` of whatever coordinate system the weights live in, so inner
//! products reduce to lookups and gradient contributions to single-coordinate
//! updates.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1};

#[derive(Debug, Clone, Copy)]
pub enum Tokens<'a> {
    Dense(ArrayView2<'a, f64>),
    Basis { ids: &'a [u32], dim: usize },
}

impl<'a> Tokens<'a> {
    pub fn dense(view: ArrayView2<'a, f64>) -> Self {
        Tokens::Dense(view)
    }

    pub fn basis(ids: &'a [u32], dim: usize) -> Self {
        Tokens::Basis { ids, dim }
    }

    pub fn len(&self) -> usize {
        match self {
            Tokens::Dense(x) => x.nrows(),
            Tokens::Basis { ids, .. } => ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            Tokens::Dense(x) => x.ncols(),
            Tokens::Basis { dim, .. } => *dim,
        }
    }

    /// `<w, x^(j)>`
    #[inline]
    pub fn dot(&self, j: usize, w: ArrayView1<'_, f64>) -> f64 {
        match self {
            Tokens::Dense(x) => x.row(j).dot(&w),
            Tokens::Basis { ids, .. } => w[ids[j] as usize],
        }
    }

    /// `out += alpha * x^(j)`
    #[inline]
    pub fn axpy(&self, j: usize, alpha: f64, mut out: ArrayViewMut1<'_, f64>) {
        match self {
            Tokens::Dense(x) => out.scaled_add(alpha, &x.row(j)),
            Tokens::Basis { ids, .. } => out[ids[j] as usize] += alpha,
        }
    }

    pub fn token(&self, j: usize) -> Array1<f64> {
        match self {
            Tokens::Dense(x) => x.row(j).to_owned(),
            Tokens::Basis { ids, dim } => {
                let mut v = Array1::zeros(*dim);
                v[ids[j] as usize] = 1.0;
                v
            }
        }
    }

    pub fn to_dense(&self) -> Array2<f64> {
        match self {
            Tokens::Dense(x) => x.to_owned(),
            Tokens::Basis { ids, dim } => {
                let mut m = Array2::zeros((ids.len(), *dim));
                for (j, &id) in ids.iter().enumerate() {
                    m[[j, id as usize]] = 1.0;
                }
                m
            }
        }
    }
}
