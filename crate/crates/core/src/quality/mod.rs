//! Data-quality scores and the high/low split they induce.

mod scorer;

pub use scorer::{
    build_user_prompt, parse_difficulty, parse_instag, score_batch, BatchOutcome, ChatRequest,
    ChatTransport, ExternalScorer, HttpTransport, ScoreFailure, ScorerConfig, SYSTEM_PROMPT,
    TOKEN_ENV,
};

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{forward_loss, ModelError, ModelParams, TokenSequence};

/// Partition size used when none is given.
pub const DEFAULT_K: usize = 200;

/// Unconditional losses below this make the IFD ratio meaningless.
pub const IFD_MIN_DENOMINATOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QualityMetric {
    Ifd,
    InsTag,
    Difficulty,
    Reward,
    Custom,
}

impl QualityMetric {
    pub const ALL: [QualityMetric; 5] = [
        QualityMetric::Ifd,
        QualityMetric::InsTag,
        QualityMetric::Difficulty,
        QualityMetric::Reward,
        QualityMetric::Custom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QualityMetric::Ifd => "ifd",
            QualityMetric::InsTag => "instag",
            QualityMetric::Difficulty => "difficulty",
            QualityMetric::Reward => "reward",
            QualityMetric::Custom => "custom",
        }
    }
}

impl fmt::Display for QualityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QualityMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == lower)
            .ok_or_else(|| {
                format!("unknown metric '{s}' (expected ifd, instag, difficulty, reward or custom)")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub sample_id: String,
    pub metric: QualityMetric,
    pub value: f64,
}

impl QualityScore {
    pub fn new(sample_id: impl Into<String>, metric: QualityMetric, value: f64) -> Self {
        Self {
            sample_id: sample_id.into(),
            metric,
            value,
        }
    }
}

#[derive(Debug, Error)]
pub enum QualityError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("unconditional response loss {loss} is below {IFD_MIN_DENOMINATOR}")]
    DegenerateDenominator { loss: f64 },
    #[error("need at least {needed} scores for k = {k}, have {available}")]
    InsufficientSamples {
        k: usize,
        needed: usize,
        available: usize,
    },
    #[error("k must be positive")]
    ZeroK,
    #[error("duplicate score for sample {sample_id} under metric {metric}")]
    DuplicateId {
        sample_id: String,
        metric: QualityMetric,
    },
    #[error("sample {sample_id}: score {value} is not finite")]
    NonFiniteScore { sample_id: String, value: f64 },
    #[error("score set mixes metrics {0} and {1}")]
    MixedMetrics(QualityMetric, QualityMetric),
    #[error("line {line}: {message}")]
    Format { line: u64, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("could not parse scorer output: {0}")]
    Parse(String),
}

/// How the two response losses are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IfdMode {
    /// `L(y | x) / L(y)`.
    #[default]
    LossRatio,
    /// `exp(L(y | x)) / exp(L(y))`, the perplexity ratio.
    PerplexityRatio,
}

/// Instruction-following difficulty: the mean response loss with the
/// instruction divided by the mean response loss without it.
pub fn ifd_score(params: &ModelParams, sample: &TokenSequence) -> Result<f64, QualityError> {
    ifd_score_with(params, sample, IfdMode::LossRatio)
}

pub fn ifd_score_with(
    params: &ModelParams,
    sample: &TokenSequence,
    mode: IfdMode,
) -> Result<f64, QualityError> {
    let conditional = forward_loss(params, sample)?;
    let unconditional = forward_loss(params, &sample.without_instruction())?;
    if unconditional < IFD_MIN_DENOMINATOR {
        return Err(QualityError::DegenerateDenominator {
            loss: unconditional,
        });
    }
    Ok(match mode {
        IfdMode::LossRatio => conditional / unconditional,
        IfdMode::PerplexityRatio => (conditional - unconditional).exp(),
    })
}

/// Rejects non-finite values and repeated `(sample_id, metric)` pairs.
pub fn validate_scores(scores: &[QualityScore]) -> Result<(), QualityError> {
    let mut seen = BTreeSet::new();
    for s in scores {
        if !s.value.is_finite() {
            return Err(QualityError::NonFiniteScore {
                sample_id: s.sample_id.clone(),
                value: s.value,
            });
        }
        if !seen.insert((s.sample_id.as_str(), s.metric)) {
            return Err(QualityError::DuplicateId {
                sample_id: s.sample_id.clone(),
                metric: s.metric,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionResult {
    pub metric: QualityMetric,
    pub k: usize,
    /// Highest score first.
    pub high_ids: Vec<String>,
    /// Lowest score first.
    pub low_ids: Vec<String>,
}

/// Top-k and bottom-k samples of one metric.
///
/// Scores are placed in a single total order: value descending, then
/// sample id ascending. `high_ids` is the first `k` of that order and
/// `low_ids` the last `k`, listed lowest value first (ties again by
/// ascending id).
pub fn partition_by_score(
    scores: &[QualityScore],
    k: usize,
) -> Result<PartitionResult, QualityError> {
    if k == 0 {
        return Err(QualityError::ZeroK);
    }
    let needed = k.saturating_mul(2);
    if needed > scores.len() {
        return Err(QualityError::InsufficientSamples {
            k,
            needed,
            available: scores.len(),
        });
    }
    let metric = scores[0].metric;
    if let Some(other) = scores.iter().find(|s| s.metric != metric) {
        return Err(QualityError::MixedMetrics(metric, other.metric));
    }
    validate_scores(scores)?;

    let mut order: Vec<&QualityScore> = scores.iter().collect();
    order.sort_by(|a, b| {
        b.value
            .total_cmp(&a.value)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    let high_ids = order[..k].iter().map(|s| s.sample_id.clone()).collect();
    let mut low: Vec<&QualityScore> = order[order.len() - k..].to_vec();
    low.sort_by(|a, b| {
        a.value
            .total_cmp(&b.value)
            .then_with(|| a.sample_id.cmp(&b.sample_id))
    });
    let low_ids = low.iter().map(|s| s.sample_id.clone()).collect();
    Ok(PartitionResult {
        metric,
        k,
        high_ids,
        low_ids,
    })
}

/// Loads rows of `metric` from a `sample_id,metric,value` CSV. Rows for
/// other metrics are skipped but still count toward duplicate detection.
pub fn ingest_scores(
    path: impl AsRef<Path>,
    metric: QualityMetric,
) -> Result<Vec<QualityScore>, QualityError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(File::open(path)?);
    let header_line = 1;
    let headers = reader.headers().map_err(|e| csv_error(e, header_line))?;
    if headers.iter().collect::<Vec<_>>() != ["sample_id", "metric", "value"] {
        return Err(QualityError::Format {
            line: header_line,
            message: format!(
                "expected header 'sample_id,metric,value', found '{}'",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(e, 0))?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| QualityError::Format { line, message };
        let id = &record[0];
        if id.is_empty() {
            return Err(bad("empty sample_id".into()));
        }
        let row_metric: QualityMetric = record[1].parse().map_err(bad)?;
        let value: f64 = record[2]
            .trim()
            .parse()
            .map_err(|_| bad(format!("value '{}' is not a number", &record[2])))?;
        if !value.is_finite() {
            return Err(bad(format!("value '{}' is not finite", &record[2])));
        }
        if !seen.insert((id.to_string(), row_metric)) {
            return Err(QualityError::DuplicateId {
                sample_id: id.to_string(),
                metric: row_metric,
            });
        }
        if row_metric == metric {
            out.push(QualityScore::new(id, row_metric, value));
        }
    }
    Ok(out)
}

fn csv_error(e: csv::Error, fallback_line: u64) -> QualityError {
    let line = e.position().map_or(fallback_line, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => QualityError::Io(io),
        kind => QualityError::Format {
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Writes scores with the ingest header; values use the shortest decimal
/// form that reads back to the same f64.
pub fn write_scores(path: impl AsRef<Path>, scores: &[QualityScore]) -> Result<(), QualityError> {
    validate_scores(scores)?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_error(e, 0))?;
    w.write_record(["sample_id", "metric", "value"])
        .map_err(|e| csv_error(e, 0))?;
    for s in scores {
        w.write_record([
            s.sample_id.as_str(),
            s.metric.as_str(),
            &s.value.to_string(),
        ])
        .map_err(|e| csv_error(e, 0))?;
    }
    w.flush()?;
    Ok(())
}
