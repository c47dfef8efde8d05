//! Cosine similarity between vectorized gradient matrices.
//!
//! Within a layer only the dimensionally aligned pairs are compared: Q with
//! O and K with V. Across layers each projection is compared with itself at
//! the next layer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::gradient::{GradientBundle, Projection};
use crate::matrix::{Matrix, MatrixError};

/// Cosine value with a flag for a zero-norm operand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

/// `<vec(a), vec(b)> / (|vec(a)| |vec(b)|)`, or 0 (flagged) when either norm is zero.
pub fn vectorized_cosine(a: &Matrix, b: &Matrix) -> Result<Cosine, MatrixError> {
    if a.shape() != b.shape() {
        return Err(MatrixError::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    // sqrt(na) * sqrt(nb) keeps the product symmetric in (a, b)
    let value = (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0);
    Ok(Cosine {
        value,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SameLayer {
    pub qo: Cosine,
    pub kv: Cosine,
}

/// Q–O and K–V cosines for every layer.
pub fn same_layer_similarities(bundle: &GradientBundle) -> Result<Vec<SameLayer>, MatrixError> {
    (0..bundle.num_layers())
        .map(|i| {
            Ok(SameLayer {
                qo: vectorized_cosine(bundle.get(i, Projection::Q), bundle.get(i, Projection::O))?,
                kv: vectorized_cosine(bundle.get(i, Projection::K), bundle.get(i, Projection::V))?,
            })
        })
        .collect()
}

/// For each projection, `cos(G_i, G_{i+1})` for `i` in `0..N-1`.
pub fn adjacent_layer_similarities(
    bundle: &GradientBundle,
) -> Result<BTreeMap<Projection, Vec<Cosine>>, MatrixError> {
    let n = bundle.num_layers();
    let mut out = BTreeMap::new();
    for p in Projection::ALL {
        let seq = (0..n.saturating_sub(1))
            .map(|i| vectorized_cosine(bundle.get(i, p), bundle.get(i + 1, p)))
            .collect::<Result<Vec<_>, _>>()?;
        out.insert(p, seq);
    }
    Ok(out)
}

/// Per-layer similarity record for one sample. `adjacent` is empty for the
/// last layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilaritySummary {
    pub layer: usize,
    pub qo_same_layer: f64,
    pub kv_same_layer: f64,
    pub adjacent: BTreeMap<Projection, f64>,
    pub degenerate: bool,
}

pub fn summarize_similarities(
    bundle: &GradientBundle,
) -> Result<Vec<SimilaritySummary>, MatrixError> {
    let same = same_layer_similarities(bundle)?;
    let adjacent = adjacent_layer_similarities(bundle)?;
    Ok(same
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut degenerate = s.qo.degenerate || s.kv.degenerate;
            let adj: BTreeMap<Projection, f64> = adjacent
                .iter()
                .filter_map(|(p, seq)| {
                    seq.get(i).map(|c| {
                        degenerate |= c.degenerate;
                        (*p, c.value)
                    })
                })
                .collect();
            SimilaritySummary {
                layer: i,
                qo_same_layer: s.qo.value,
                kv_same_layer: s.kv.value,
                adjacent: adj,
                degenerate,
            }
        })
        .collect())
}
