//! Per-sample attention projection gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

/// One of the four attention projections of a decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    /// Wire tag used by the GRDS container.
    pub fn code(self) -> u8 {
        match self {
            Projection::Q => 0,
            Projection::K => 1,
            Projection::V => 2,
            Projection::O => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn index(self) -> usize {
        self.code() as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Projection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "q" => Ok(Projection::Q),
            "k" => Ok(Projection::K),
            "v" => Ok(Projection::V),
            "o" => Ok(Projection::O),
            other => Err(format!("unknown projection '{other}'")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BundleError {
    #[error("loss must be finite and non-negative, got {0}")]
    BadLoss(f64),
    #[error("bundle must have at least one layer")]
    NoLayers,
    #[error("layer {layer} projection {projection}: shape {got:?} differs from layer 0 shape {expected:?}")]
    InconsistentShape {
        layer: usize,
        projection: Projection,
        expected: (usize, usize),
        got: (usize, usize),
    },
}

/// The Q/K/V/O gradients of every layer for a single sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub sample_id: String,
    pub loss: f64,
    layers: Vec<[Matrix; 4]>,
}

impl GradientBundle {
    /// Each layer holds its matrices in `[Q, K, V, O]` order. Every
    /// projection must keep one shape across layers.
    pub fn new(
        sample_id: impl Into<String>,
        loss: f64,
        layers: Vec<[Matrix; 4]>,
    ) -> Result<Self, BundleError> {
        if !loss.is_finite() || loss < 0.0 {
            return Err(BundleError::BadLoss(loss));
        }
        let first = layers.first().ok_or(BundleError::NoLayers)?;
        let shapes: Vec<(usize, usize)> = first.iter().map(Matrix::shape).collect();
        for (layer, mats) in layers.iter().enumerate() {
            for (p, m) in Projection::ALL.iter().zip(mats) {
                if m.shape() != shapes[p.index()] {
                    return Err(BundleError::InconsistentShape {
                        layer,
                        projection: *p,
                        expected: shapes[p.index()],
                        got: m.shape(),
                    });
                }
            }
        }
        Ok(Self {
            sample_id: sample_id.into(),
            loss,
            layers,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn get(&self, layer: usize, projection: Projection) -> &Matrix {
        &self.layers[layer][projection.index()]
    }

    pub fn layer(&self, layer: usize) -> &[Matrix; 4] {
        &self.layers[layer]
    }

    pub fn layers(&self) -> &[[Matrix; 4]] {
        &self.layers
    }

    pub fn shape_of(&self, projection: Projection) -> (usize, usize) {
        self.layers[0][projection.index()].shape()
    }

    /// Iterates `(layer, projection, matrix)` in layer-major, Q/K/V/O order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, Projection, &Matrix)> {
        self.layers.iter().enumerate().flat_map(|(i, mats)| {
            Projection::ALL
                .iter()
                .zip(mats.iter())
                .map(move |(p, m)| (i, *p, m))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_codes_round_trip() {
        for p in Projection::ALL {
            assert_eq!(Projection::from_code(p.code()), Some(p));
            assert_eq!(p.as_str().parse::<Projection>().unwrap(), p);
        }
        assert_eq!(Projection::from_code(4), None);
    }

    #[test]
    fn bundle_validation() {
        let m = || Matrix::zeros(2, 2);
        assert!(GradientBundle::new("a", 0.5, vec![[m(), m(), m(), m()]]).is_ok());
        assert_eq!(
            GradientBundle::new("a", -1.0, vec![[m(), m(), m(), m()]]).unwrap_err(),
            BundleError::BadLoss(-1.0)
        );
        assert_eq!(
            GradientBundle::new("a", 0.0, vec![]).unwrap_err(),
            BundleError::NoLayers
        );
        let bad = GradientBundle::new(
            "a",
            0.0,
            vec![[m(), m(), m(), m()], [m(), Matrix::zeros(2, 3), m(), m()]],
        );
        assert!(matches!(
            bad,
            Err(BundleError::InconsistentShape { layer: 1, .. })
        ));
    }
}
