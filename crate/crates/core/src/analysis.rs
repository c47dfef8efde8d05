//! Corpus-level aggregation: per-sample summaries, High/Low/Gap tables,
//! per-layer curves and run-to-run differences.
//!
//! Values are reduced in a fixed order. Per-layer metric, then the sum (or
//! mean, for similarities) over layers per sample, then the mean over
//! samples taken in ascending `sample_id` order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradient::{GradientBundle, Projection};
use crate::matrix::MatrixError;
use crate::similarity::{summarize_similarities, SimilaritySummary};
use crate::spectral::{summarize, SpectralSummary};
use crate::svd::SvdError;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("sample {sample_id}: {source}")]
    Spectral { sample_id: String, source: SvdError },
    #[error("sample {sample_id}: {source}")]
    Similarity {
        sample_id: String,
        source: MatrixError,
    },
    #[error("sample {0} appears more than once")]
    DuplicateSample(String),
    #[error("sample {sample_id} has {found} layers, expected {expected}")]
    LayerCountMismatch {
        sample_id: String,
        expected: usize,
        found: usize,
    },
    #[error("sample {0} is not in the corpus")]
    MissingSample(String),
    #[error("{0} subset is empty")]
    EmptySubset(&'static str),
    #[error("rows do not line up; only in A: {only_in_a:?}; only in B: {only_in_b:?}")]
    KeyMismatch {
        only_in_a: Vec<String>,
        only_in_b: Vec<String>,
    },
    #[error("duplicate row {0}")]
    DuplicateKey(String),
    #[error("line {line}: {message}")]
    Format { line: u64, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl AnalysisError {
    /// True for failures of the numerical kernels rather than of the input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            AnalysisError::Spectral { .. } | AnalysisError::Similarity { .. }
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    NuclearNorm,
    EffectiveRank,
    SameLayer,
    AdjacentLayer,
}

impl Statistic {
    pub const ALL: [Statistic; 4] = [
        Statistic::NuclearNorm,
        Statistic::EffectiveRank,
        Statistic::SameLayer,
        Statistic::AdjacentLayer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Statistic::NuclearNorm => "nuclear_norm",
            Statistic::EffectiveRank => "effective_rank",
            Statistic::SameLayer => "same_layer",
            Statistic::AdjacentLayer => "adjacent_layer",
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Statistic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown statistic '{s}'"))
    }
}

/// All measurements of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSummary {
    pub sample_id: String,
    pub loss: f64,
    /// Layer-major, `Q, K, V, O` within a layer.
    pub spectral: Vec<SpectralSummary>,
    pub similarity: Vec<SimilaritySummary>,
}

impl SampleSummary {
    pub fn num_layers(&self) -> usize {
        self.similarity.len()
    }

    pub fn spectral_at(&self, layer: usize, projection: Projection) -> &SpectralSummary {
        &self.spectral[layer * 4 + projection.index()]
    }

    /// The per-layer value behind `statistic`, or `None` where it is not
    /// defined. Same-layer similarity is reported under `q` for the Q–O pair
    /// and under `k` for the K–V pair; adjacent similarity has no value at
    /// the last layer.
    pub fn layer_value(
        &self,
        layer: usize,
        projection: Projection,
        statistic: Statistic,
    ) -> Option<f64> {
        match statistic {
            Statistic::NuclearNorm => Some(self.spectral_at(layer, projection).nuclear_norm),
            Statistic::EffectiveRank => Some(self.spectral_at(layer, projection).effective_rank),
            Statistic::SameLayer => {
                let s = &self.similarity[layer];
                match projection {
                    Projection::Q => Some(s.qo_same_layer),
                    Projection::K => Some(s.kv_same_layer),
                    _ => None,
                }
            }
            Statistic::AdjacentLayer => self.similarity[layer].adjacent.get(&projection).copied(),
        }
    }

    /// The per-sample scalar that enters a table: layer sum for the spectral
    /// statistics, mean over defined layers for similarities.
    pub fn sample_value(&self, projection: Projection, statistic: Statistic) -> Option<f64> {
        match statistic {
            Statistic::NuclearNorm | Statistic::EffectiveRank => {
                layer_sum(self, projection, statistic)
            }
            Statistic::SameLayer | Statistic::AdjacentLayer => {
                let values: Vec<f64> = (0..self.num_layers())
                    .filter_map(|l| self.layer_value(l, projection, statistic))
                    .collect();
                if values.is_empty() {
                    None
                } else {
                    Some(values.iter().sum::<f64>() / values.len() as f64)
                }
            }
        }
    }
}

/// Sum over layers of a spectral statistic; `None` for similarities.
pub fn layer_sum(
    sample: &SampleSummary,
    projection: Projection,
    statistic: Statistic,
) -> Option<f64> {
    match statistic {
        Statistic::NuclearNorm | Statistic::EffectiveRank => Some(
            (0..sample.num_layers())
                .map(|l| {
                    sample
                        .layer_value(l, projection, statistic)
                        .expect("spectral value")
                })
                .sum(),
        ),
        _ => None,
    }
}

pub fn summarize_sample(bundle: &GradientBundle) -> Result<SampleSummary, AnalysisError> {
    let spectral = bundle
        .iter()
        .map(|(layer, p, g)| summarize(g, layer, p))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|source| AnalysisError::Spectral {
            sample_id: bundle.sample_id.clone(),
            source,
        })?;
    let similarity =
        summarize_similarities(bundle).map_err(|source| AnalysisError::Similarity {
            sample_id: bundle.sample_id.clone(),
            source,
        })?;
    Ok(SampleSummary {
        sample_id: bundle.sample_id.clone(),
        loss: bundle.loss,
        spectral,
        similarity,
    })
}

/// Per-sample summaries keyed by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorpusSummary {
    pub num_layers: usize,
    pub samples: BTreeMap<String, SampleSummary>,
}

impl CorpusSummary {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn all(&self) -> Vec<&SampleSummary> {
        self.samples.values().collect()
    }

    /// Samples with the given ids, in ascending id order.
    pub fn subset<'a>(
        &self,
        ids: impl IntoIterator<Item = &'a str>,
    ) -> Result<Vec<&SampleSummary>, AnalysisError> {
        let ids: BTreeSet<&str> = ids.into_iter().collect();
        ids.into_iter()
            .map(|id| {
                self.samples
                    .get(id)
                    .ok_or_else(|| AnalysisError::MissingSample(id.to_string()))
            })
            .collect()
    }
}

/// Summarizes every bundle in parallel. The first failing sample in input
/// order is reported.
pub fn summarize_corpus(bundles: &[GradientBundle]) -> Result<CorpusSummary, AnalysisError> {
    let Some(first) = bundles.first() else {
        return Ok(CorpusSummary::default());
    };
    let num_layers = first.num_layers();
    if let Some(b) = bundles.iter().find(|b| b.num_layers() != num_layers) {
        return Err(AnalysisError::LayerCountMismatch {
            sample_id: b.sample_id.clone(),
            expected: num_layers,
            found: b.num_layers(),
        });
    }
    let results: Vec<Result<SampleSummary, AnalysisError>> =
        bundles.par_iter().map(summarize_sample).collect();
    let mut samples = BTreeMap::new();
    for r in results {
        let s = r?;
        let id = s.sample_id.clone();
        if samples.insert(id.clone(), s).is_some() {
            return Err(AnalysisError::DuplicateSample(id));
        }
    }
    Ok(CorpusSummary {
        num_layers,
        samples,
    })
}

/// Mean of the per-sample scalar over `samples`, or `None` if the statistic
/// is undefined for this projection.
pub fn subset_mean(
    samples: &[&SampleSummary],
    projection: Projection,
    statistic: Statistic,
) -> Option<f64> {
    let mut sorted: Vec<&&SampleSummary> = samples.iter().collect();
    sorted.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    let mut total = 0.0;
    for s in sorted {
        total += s.sample_value(projection, statistic)?;
    }
    Some(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub metric: String,
    pub projection: Projection,
    pub statistic: Statistic,
    pub high: f64,
    pub low: f64,
    pub gap: f64,
}

impl AggregateRow {
    /// The only place a gap is computed.
    pub fn new(
        dataset: impl Into<String>,
        metric: impl Into<String>,
        projection: Projection,
        statistic: Statistic,
        high: f64,
        low: f64,
    ) -> Self {
        Self {
            dataset: dataset.into(),
            metric: metric.into(),
            projection,
            statistic,
            high,
            low,
            gap: high - low,
        }
    }
}

impl fmt::Display for AggregateRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {}: high {:.1} low {:.1} gap {:.1}",
            self.dataset,
            self.metric,
            self.projection,
            self.statistic,
            self.high,
            self.low,
            self.gap
        )
    }
}

/// One row per `(projection, statistic)` that is defined for both subsets.
pub fn gap_table(
    dataset: &str,
    metric: &str,
    high: &[&SampleSummary],
    low: &[&SampleSummary],
) -> Result<Vec<AggregateRow>, AnalysisError> {
    if high.is_empty() {
        return Err(AnalysisError::EmptySubset("high"));
    }
    if low.is_empty() {
        return Err(AnalysisError::EmptySubset("low"));
    }
    let mut rows = Vec::new();
    for projection in Projection::ALL {
        for statistic in Statistic::ALL {
            if let (Some(h), Some(l)) = (
                subset_mean(high, projection, statistic),
                subset_mean(low, projection, statistic),
            ) {
                rows.push(AggregateRow::new(
                    dataset, metric, projection, statistic, h, l,
                ));
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub projection: Projection,
    pub statistic: Statistic,
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub stddev: Vec<f64>,
}

/// Mean and spread across samples at every layer for the statistics that
/// exist at every layer (spectral for all projections, same-layer for `q`
/// and `k`).
pub fn layer_curves(corpus: &CorpusSummary) -> Vec<LayerCurve> {
    let samples = corpus.all();
    if samples.is_empty() {
        return Vec::new();
    }
    let n = samples.len() as f64;
    let mut out = Vec::new();
    for projection in Projection::ALL {
        for statistic in [
            Statistic::NuclearNorm,
            Statistic::EffectiveRank,
            Statistic::SameLayer,
        ] {
            if samples[0].layer_value(0, projection, statistic).is_none() {
                continue;
            }
            let mut mean = Vec::with_capacity(corpus.num_layers);
            let mut stddev = Vec::with_capacity(corpus.num_layers);
            for layer in 0..corpus.num_layers {
                let values: Vec<f64> = samples
                    .iter()
                    .map(|s| {
                        s.layer_value(layer, projection, statistic)
                            .expect("defined at every layer")
                    })
                    .collect();
                let m = values.iter().sum::<f64>() / n;
                let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
                mean.push(m);
                stddev.push(var.sqrt());
            }
            out.push(LayerCurve {
                projection,
                statistic,
                mean,
                stddev,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowDiff {
    pub metric: String,
    pub projection: Projection,
    pub statistic: Statistic,
    pub a: f64,
    pub b: f64,
    /// `a - b`.
    pub difference: f64,
}

impl RowDiff {
    pub fn new(
        metric: impl Into<String>,
        projection: Projection,
        statistic: Statistic,
        a: f64,
        b: f64,
    ) -> Self {
        Self {
            metric: metric.into(),
            projection,
            statistic,
            a,
            b,
            difference: a - b,
        }
    }
}

fn row_key(r: &AggregateRow) -> (String, Projection, Statistic) {
    (r.metric.clone(), r.projection, r.statistic)
}

fn key_label(k: &(String, Projection, Statistic)) -> String {
    format!("{}/{}/{}", k.0, k.1, k.2)
}

/// Aligns two tables on `(metric, projection, statistic)` and subtracts the
/// `high` column of B from that of A. For a run analyzed without subset
/// labels `high` is the corpus mean.
pub fn compare_runs(a: &[AggregateRow], b: &[AggregateRow]) -> Result<Vec<RowDiff>, AnalysisError> {
    let index = |rows: &[AggregateRow]| -> Result<BTreeMap<_, f64>, AnalysisError> {
        let mut m = BTreeMap::new();
        for r in rows {
            let k = row_key(r);
            if m.insert(k.clone(), r.high).is_some() {
                return Err(AnalysisError::DuplicateKey(key_label(&k)));
            }
        }
        Ok(m)
    };
    let ma = index(a)?;
    let mb = index(b)?;
    let only_in_a: Vec<String> = ma
        .keys()
        .filter(|k| !mb.contains_key(*k))
        .map(key_label)
        .collect();
    let only_in_b: Vec<String> = mb
        .keys()
        .filter(|k| !ma.contains_key(*k))
        .map(key_label)
        .collect();
    if !only_in_a.is_empty() || !only_in_b.is_empty() {
        return Err(AnalysisError::KeyMismatch {
            only_in_a,
            only_in_b,
        });
    }
    Ok(ma
        .into_iter()
        .map(|((metric, projection, statistic), va)| {
            RowDiff::new(
                metric.clone(),
                projection,
                statistic,
                va,
                mb[&(metric, projection, statistic)],
            )
        })
        .collect())
}

pub const TABLE_HEADER: [&str; 7] = [
    "dataset",
    "metric",
    "projection",
    "statistic",
    "high",
    "low",
    "gap",
];
pub const CURVE_HEADER: [&str; 5] = ["projection", "statistic", "layer", "mean", "stddev"];
pub const DIFF_HEADER: [&str; 6] = ["metric", "projection", "statistic", "a", "b", "difference"];

fn csv_writer(path: &Path) -> Result<csv::Writer<File>, AnalysisError> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(File::create(path)?))
}

fn csv_err(e: csv::Error) -> AnalysisError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => AnalysisError::Io(io),
        kind => AnalysisError::Format {
            line,
            message: format!("{kind:?}"),
        },
    }
}

fn finish(w: csv::Writer<File>) -> Result<(), AnalysisError> {
    let mut file = w
        .into_inner()
        .map_err(|e| AnalysisError::Io(e.into_error()))?;
    file.flush()?;
    Ok(())
}

/// Full-precision table CSV.
pub fn write_table_csv(path: impl AsRef<Path>, rows: &[AggregateRow]) -> Result<(), AnalysisError> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(TABLE_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.dataset.clone(),
            r.metric.clone(),
            r.projection.to_string(),
            r.statistic.to_string(),
            r.high.to_string(),
            r.low.to_string(),
            r.gap.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

pub fn read_table_csv(path: impl AsRef<Path>) -> Result<Vec<AggregateRow>, AnalysisError> {
    let mut r = csv::Reader::from_reader(File::open(path)?);
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != TABLE_HEADER {
        return Err(AnalysisError::Format {
            line: 1,
            message: format!("expected header '{}'", TABLE_HEADER.join(",")),
        });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| AnalysisError::Format { line, message };
        let num = |i: usize| -> Result<f64, AnalysisError> {
            rec[i]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("'{}' is not a finite number", &rec[i])))
        };
        let projection: Projection = rec[2].parse().map_err(bad)?;
        let statistic: Statistic = rec[3].parse().map_err(bad)?;
        let (high, low, gap) = (num(4)?, num(5)?, num(6)?);
        let row = AggregateRow::new(&rec[0], &rec[1], projection, statistic, high, low);
        if row.gap.to_bits() != gap.to_bits() {
            return Err(bad(format!("gap {gap} is not high - low")));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_curves_csv(
    path: impl AsRef<Path>,
    curves: &[LayerCurve],
) -> Result<(), AnalysisError> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(CURVE_HEADER).map_err(csv_err)?;
    for c in curves {
        for (layer, (m, s)) in c.mean.iter().zip(&c.stddev).enumerate() {
            w.write_record([
                c.projection.to_string(),
                c.statistic.to_string(),
                layer.to_string(),
                m.to_string(),
                s.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    finish(w)
}

pub fn write_diff_csv(path: impl AsRef<Path>, diffs: &[RowDiff]) -> Result<(), AnalysisError> {
    let mut w = csv_writer(path.as_ref())?;
    w.write_record(DIFF_HEADER).map_err(csv_err)?;
    for d in diffs {
        w.write_record([
            d.metric.clone(),
            d.projection.to_string(),
            d.statistic.to_string(),
            d.a.to_string(),
            d.b.to_string(),
            d.difference.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn identity_bundle(id: &str, d: usize, layers: usize) -> GradientBundle {
        let m = || Matrix::identity(d);
        GradientBundle::new(id, 1.0, (0..layers).map(|_| [m(), m(), m(), m()]).collect()).unwrap()
    }

    #[test]
    fn identity_bundle_nuclear_norm() {
        let c = summarize_corpus(&[identity_bundle("a", 3, 1)]).unwrap();
        let s = &c.samples["a"];
        for p in Projection::ALL {
            assert!((s.spectral_at(0, p).nuclear_norm - 3.0).abs() < 1e-12);
        }
        let c = summarize_corpus(&[identity_bundle("a", 3, 2)]).unwrap();
        let s = &c.samples["a"];
        assert!((layer_sum(s, Projection::V, Statistic::NuclearNorm).unwrap() - 6.0).abs() < 1e-12);
        assert_eq!(layer_sum(s, Projection::V, Statistic::SameLayer), None);
        assert_eq!(
            s.sample_value(Projection::Q, Statistic::SameLayer),
            Some(1.0)
        );
        assert_eq!(s.sample_value(Projection::O, Statistic::SameLayer), None);
    }

    #[test]
    fn duplicate_and_mismatched_samples() {
        assert!(matches!(
            summarize_corpus(&[identity_bundle("a", 2, 1), identity_bundle("a", 2, 1)]),
            Err(AnalysisError::DuplicateSample(_))
        ));
        assert!(matches!(
            summarize_corpus(&[identity_bundle("a", 2, 1), identity_bundle("b", 2, 2)]),
            Err(AnalysisError::LayerCountMismatch { .. })
        ));
    }

    #[test]
    fn identical_subsets_have_zero_gap() {
        let c =
            summarize_corpus(&[identity_bundle("a", 2, 2), identity_bundle("b", 2, 2)]).unwrap();
        let all = c.all();
        let rows = gap_table("toy", "all", &all, &all).unwrap();
        // 4 projections x 2 spectral + 2 same-layer + 4 adjacent
        assert_eq!(rows.len(), 14);
        assert!(rows.iter().all(|r| r.gap == 0.0));
        assert!(matches!(
            gap_table("toy", "all", &[], &all),
            Err(AnalysisError::EmptySubset("high"))
        ));
    }

    #[test]
    fn display_uses_one_decimal() {
        let r = AggregateRow::new("d", "ifd", Projection::K, Statistic::NuclearNorm, 1.3, 6.1);
        assert_eq!(
            r.to_string(),
            "d ifd k nuclear_norm: high 1.3 low 6.1 gap -4.8"
        );
    }

    #[test]
    fn compare_key_mismatch() {
        let a = vec![AggregateRow::new(
            "d",
            "m",
            Projection::Q,
            Statistic::NuclearNorm,
            1.0,
            1.0,
        )];
        let b = vec![AggregateRow::new(
            "d",
            "m",
            Projection::K,
            Statistic::NuclearNorm,
            1.0,
            1.0,
        )];
        match compare_runs(&a, &b) {
            Err(AnalysisError::KeyMismatch {
                only_in_a,
                only_in_b,
            }) => {
                assert_eq!(only_in_a, vec!["m/q/nuclear_norm"]);
                assert_eq!(only_in_b, vec!["m/k/nuclear_norm"]);
            }
            other => panic!("{other:?}"),
        }
        let d = compare_runs(&a, &a).unwrap();
        assert_eq!(d[0].difference, 0.0);
    }

    #[test]
    fn table_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![
            AggregateRow::new(
                "d",
                "ifd",
                Projection::K,
                Statistic::EffectiveRank,
                88.5,
                14.2,
            ),
            AggregateRow::new(
                "d,x",
                "ifd",
                Projection::O,
                Statistic::SameLayer,
                0.1,
                1.0 / 3.0,
            ),
        ];
        write_table_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("dataset,metric,projection,statistic,high,low,gap\n"));
        assert_eq!(read_table_csv(&path).unwrap(), rows);
    }
}
