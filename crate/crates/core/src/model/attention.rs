//! Attention primitives on plain matrices and the sinusoidal position table.

use std::sync::{Arc, RwLock};

use ndarray::Array2;

use crate::autograd::masked_softmax;
use crate::error::{Error, Result};

fn check_qkv(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Result<()> {
    if q.ncols() != k.ncols() {
        return Err(Error::shape("attention Q/K width", q.ncols(), k.ncols()));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::shape("attention K/V rows", k.nrows(), v.nrows()));
    }
    if q.ncols() == 0 {
        return Err(Error::shape("attention key dim", "> 0", 0));
    }
    Ok(())
}

/// `softmax(Q Kᵀ / sqrt(d_k))` with `mask[[i, j]] == false` hiding key `j` from query `i`.
pub fn attention_weights(
    q: &Array2<f64>,
    k: &Array2<f64>,
    mask: Option<&Array2<bool>>,
) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() {
        return Err(Error::shape("attention Q/K width", q.ncols(), k.ncols()));
    }
    let scores = q.dot(&k.t()) / (q.ncols() as f64).sqrt();
    masked_softmax(&scores, mask)
}

/// Single-head scaled dot-product attention.
pub fn scaled_dot_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    mask: Option<&Array2<bool>>,
) -> Result<Array2<f64>> {
    check_qkv(q, k, v)?;
    Ok(attention_weights(q, k, mask)?.dot(v))
}

/// Expands a per-key validity vector to a `(num_queries × keys)` mask;
/// `None` when every key is visible.
pub fn key_padding_mask(num_queries: usize, valid: &[bool]) -> Option<Array2<bool>> {
    if valid.iter().all(|v| *v) {
        return None;
    }
    Some(Array2::from_shape_fn(
        (num_queries, valid.len()),
        |(_, j)| valid[j],
    ))
}

/// Fixed sinusoidal table:
/// `pe[pos][2i] = sin(pos / 10000^(2i/d))`, `pe[pos][2i+1] = cos(pos / 10000^(2i/d))`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    table: Array2<f64>,
}

impl PositionalEncoding {
    pub fn new(max_positions: usize, dim: usize) -> Self {
        let table = Array2::from_shape_fn((max_positions, dim), |(pos, c)| {
            let i2 = (c - c % 2) as f64;
            let angle = pos as f64 / 10000f64.powf(i2 / dim as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        });
        Self { table }
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    pub fn max_positions(&self) -> usize {
        self.table.nrows()
    }
}

/// Grow-only shared table, so concurrent forward passes reuse one allocation.
#[derive(Debug)]
pub(crate) struct PositionCache {
    dim: usize,
    table: RwLock<Arc<PositionalEncoding>>,
}

impl PositionCache {
    pub fn new(dim: usize, initial: usize) -> Self {
        Self {
            dim,
            table: RwLock::new(Arc::new(PositionalEncoding::new(initial, dim))),
        }
    }

    /// Rows `start..start + count` of the table.
    pub fn rows(&self, start: usize, count: usize) -> Array2<f64> {
        let needed = start + count;
        let current = self.table.read().expect("position cache poisoned").clone();
        let table = if current.max_positions() >= needed {
            current
        } else {
            let grown = Arc::new(PositionalEncoding::new(
                needed.next_power_of_two(),
                self.dim,
            ));
            *self.table.write().expect("position cache poisoned") = grown.clone();
            grown
        };
        table
            .table()
            .slice(ndarray::s![start..needed, ..])
            .to_owned()
    }
}
