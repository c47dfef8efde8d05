//! SVD-based gradient metrics: nuclear norm, effective rank and the plain
//! elementwise statistics reported next to them.

use serde::{Deserialize, Serialize};

use crate::gradient::Projection;
use crate::matrix::Matrix;
use crate::svd::{svd, SvdError};

/// Sum of singular values.
pub fn nuclear_norm(sigma: &[f64]) -> f64 {
    sigma.iter().sum()
}

/// Effective rank with a flag for the all-zero spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveRank {
    pub value: f64,
    /// Set when the spectrum sums to zero; `value` is then 0.
    pub degenerate: bool,
}

/// `exp` of the Shannon entropy of the normalized singular values.
///
/// Zero entries contribute nothing (`0 ln 0 = 0`). An all-zero spectrum
/// returns 0 with the degenerate flag set.
pub fn effective_rank(sigma: &[f64]) -> EffectiveRank {
    let total: f64 = sigma.iter().sum();
    if total <= 0.0 {
        return EffectiveRank {
            value: 0.0,
            degenerate: true,
        };
    }
    let entropy: f64 = sigma
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    EffectiveRank {
        value: entropy.exp(),
        degenerate: false,
    }
}

/// Frobenius norm and entrywise mean / max / min.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatrixStats {
    pub frobenius: f64,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
}

pub fn matrix_stats(g: &Matrix) -> MatrixStats {
    let data = g.as_slice();
    let mut sum = 0.0;
    let mut sq = 0.0;
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    for &x in data {
        sum += x;
        sq += x * x;
        max = max.max(x);
        min = min.min(x);
    }
    MatrixStats {
        frobenius: sq.sqrt(),
        mean: sum / data.len() as f64,
        max,
        min,
    }
}

/// Everything measured on one `(layer, projection)` gradient matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub layer: usize,
    pub projection: Projection,
    pub nuclear_norm: f64,
    pub effective_rank: f64,
    pub degenerate: bool,
    pub frobenius: f64,
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    pub singular_values: Vec<f64>,
}

pub fn summarize(
    g: &Matrix,
    layer: usize,
    projection: Projection,
) -> Result<SpectralSummary, SvdError> {
    let sigma = svd(g)?.sigma;
    let er = effective_rank(&sigma);
    let stats = matrix_stats(g);
    Ok(SpectralSummary {
        layer,
        projection,
        nuclear_norm: nuclear_norm(&sigma),
        effective_rank: er.value,
        degenerate: er.degenerate,
        frobenius: stats.frobenius,
        mean: stats.mean,
        max: stats.max,
        min: stats.min,
        singular_values: sigma,
    })
}
