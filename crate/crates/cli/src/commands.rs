use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use gradspect::analysis::{
    compare_runs, gap_table, layer_curves, read_table_csv, summarize_corpus, write_curves_csv,
    write_diff_csv, write_table_csv, AggregateRow, AnalysisError, CorpusSummary,
};
use gradspect::model::{
    backward_gradients, fit, synth_corpus, CorpusMode, FitConfig, ModelConfig, ModelError,
    ModelParams, TOY_VOCAB,
};
use gradspect::quality::{
    ifd_score, ingest_scores, partition_by_score, score_batch, write_scores, ExternalScorer,
    HttpTransport, QualityError, QualityMetric, QualityScore, ScorerConfig,
};
use gradspect::store::{
    cross_check, read_grds, read_manifest, write_grds_tagged, write_manifest, Manifest,
    ManifestEntry, StoreError, Subset,
};
use rayon::prelude::*;
use serde::Deserialize;

use crate::{AnalyzeArgs, CompareArgs, DumpToyArgs, PartitionArgs, ScoreArgs};

/// Prints a line to stdout; a closed pipe is not an error.
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_PROTOCOL: u8 = 4;
pub const EXIT_MISMATCH: u8 = 5;
pub const EXIT_USAGE: u8 = 64;

pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }

    fn context(mut self, what: impl std::fmt::Display) -> Self {
        self.error = self.error.context(what.to_string());
        self
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn store_err(e: StoreError) -> CliError {
    CliError::new(EXIT_INPUT, e)
}

fn model_err(e: ModelError) -> CliError {
    let code = match e {
        ModelError::NonFiniteParams => EXIT_NUMERIC,
        _ => EXIT_INPUT,
    };
    CliError::new(code, e)
}

fn analysis_err(e: AnalysisError) -> CliError {
    let code = if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        match e {
            AnalysisError::MissingSample(_) | AnalysisError::KeyMismatch { .. } => EXIT_MISMATCH,
            _ => EXIT_INPUT,
        }
    };
    CliError::new(code, e)
}

fn quality_err(e: QualityError) -> CliError {
    let code = match e {
        QualityError::InsufficientSamples { .. } | QualityError::ZeroK => EXIT_PROTOCOL,
        QualityError::DegenerateDenominator { .. }
        | QualityError::Model(ModelError::NonFiniteParams) => EXIT_NUMERIC,
        QualityError::Transport(_) | QualityError::Parse(_) => EXIT_PROTOCOL,
        _ => EXIT_INPUT,
    };
    CliError::new(code, e)
}

fn require_input(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::new(
            EXIT_INPUT,
            anyhow!("input file {} does not exist", path.display()),
        ))
    }
}

/// Creates parent directories and refuses to replace existing files unless
/// `force` is set.
fn prepare_outputs(paths: &[PathBuf], force: bool) -> Result<()> {
    for p in paths {
        if p.exists() && !force {
            return Err(CliError::new(
                EXIT_INPUT,
                anyhow!("{} already exists (use --force to overwrite)", p.display()),
            ));
        }
    }
    for p in paths {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| {
                CliError::new(EXIT_INPUT, e).context(format!("creating {}", parent.display()))
            })?;
        }
    }
    Ok(())
}

pub fn dump_toy(args: &DumpToyArgs) -> Result<()> {
    let mut modes: Vec<CorpusMode> = Vec::new();
    for m in &args.mode {
        let mode: CorpusMode = m
            .parse()
            .map_err(|e: String| CliError::new(EXIT_USAGE, anyhow!(e)))?;
        if modes.contains(&mode) {
            return Err(CliError::new(
                EXIT_USAGE,
                anyhow!("mode {mode} given twice"),
            ));
        }
        modes.push(mode);
    }
    let outputs: Vec<PathBuf> = modes
        .iter()
        .flat_map(|m| {
            ["grds", "manifest.json", "scores.csv"].map(|ext| args.out.join(format!("{m}.{ext}")))
        })
        .collect();
    prepare_outputs(&outputs, args.output.force)?;

    let config =
        ModelConfig::new(args.layers, args.dim, args.heads, TOY_VOCAB).with_seed(args.seed);
    let init = ModelParams::init(config).map_err(model_err)?;
    let fit_corpus = synth_corpus(args.seed, args.fit_count, CorpusMode::Clean);
    let report = fit(
        &init,
        &fit_corpus,
        FitConfig {
            steps: args.fit_steps,
            learning_rate: args.learning_rate,
        },
    )
    .map_err(model_err)?;
    if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
        say!(
            "fit: {} steps, loss {first:.4} -> {last:.4}",
            args.fit_steps
        );
    }
    let params = report.params;
    let held_out_seed = args.seed.wrapping_add(1);

    for mode in modes {
        let corpus = synth_corpus(held_out_seed, args.count, mode);
        let ids: Vec<String> = (0..corpus.len())
            .map(|i| format!("{mode}-{i:05}"))
            .collect();
        let per_sample: Vec<_> = corpus
            .par_iter()
            .zip(&ids)
            .map(|(s, id)| {
                let bundle = backward_gradients(&params, s, id).map_err(model_err)?;
                let ifd = ifd_score(&params, s).map_err(quality_err)?;
                Ok((bundle, ifd))
            })
            .collect::<Result<Vec<_>>>()?;

        let grds = args.out.join(format!("{mode}.grds"));
        let bundles: Vec<_> = per_sample.iter().map(|(b, _)| b.clone()).collect();
        if bundles.is_empty() {
            return Err(CliError::new(
                EXIT_USAGE,
                anyhow!("--count must be positive"),
            ));
        }
        let bytes = write_grds_tagged(&grds, &bundles, args.dtype, &config.tag(), Some(&params))
            .map_err(|e| store_err(e).context(format!("writing {}", grds.display())))?;

        let manifest: Manifest = bundles
            .iter()
            .map(|b| {
                (
                    b.sample_id.clone(),
                    ManifestEntry {
                        dataset: mode.to_string(),
                        subset: Subset::None,
                        metric: "none".into(),
                        loss: b.loss,
                    },
                )
            })
            .collect();
        write_manifest(&manifest, args.out.join(format!("{mode}.manifest.json")))
            .map_err(store_err)?;

        let scores: Vec<QualityScore> = per_sample
            .iter()
            .map(|(b, ifd)| QualityScore::new(b.sample_id.clone(), QualityMetric::Ifd, *ifd))
            .collect();
        write_scores(args.out.join(format!("{mode}.scores.csv")), &scores).map_err(quality_err)?;
        say!(
            "{mode}: {} samples, {bytes} bytes -> {}",
            bundles.len(),
            grds.display()
        );
    }
    Ok(())
}

fn summarize_file(path: &Path) -> Result<(CorpusSummary, Vec<String>)> {
    require_input(path)?;
    let file =
        read_grds(path).map_err(|e| store_err(e).context(format!("reading {}", path.display())))?;
    let ids = file.samples.iter().map(|b| b.sample_id.clone()).collect();
    let summary = summarize_corpus(&file.samples)
        .map_err(|e| analysis_err(e).context(format!("analyzing {}", path.display())))?;
    Ok((summary, ids))
}

pub fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let table_path = args.out.join("table.csv");
    let curves_path = args.out.join("curves.csv");
    require_input(&args.input)?;
    if let Some(m) = &args.manifest {
        require_input(m)?;
    }
    if let Some(b) = &args.baseline {
        require_input(b)?;
    }
    prepare_outputs(
        &[table_path.clone(), curves_path.clone()],
        args.output.force,
    )?;

    let dataset = args.dataset.clone().unwrap_or_else(|| {
        args.input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let (corpus, ids) = summarize_file(&args.input)?;
    if corpus.is_empty() {
        return Err(CliError::new(
            EXIT_INPUT,
            anyhow!("{} holds no samples", args.input.display()),
        ));
    }

    let rows: Vec<AggregateRow> = if let Some(manifest_path) = &args.manifest {
        let manifest = read_manifest(manifest_path)
            .map_err(|e| store_err(e).context(format!("reading {}", manifest_path.display())))?;
        let check = cross_check(&manifest, ids.iter().map(String::as_str));
        if !check.is_consistent() {
            return Err(CliError::new(
                EXIT_MISMATCH,
                anyhow!(
                    "manifest and GRDS disagree: missing from GRDS {:?}, missing from manifest {:?}, duplicated {:?}",
                    check.missing_from_grds,
                    check.missing_from_manifest,
                    check.duplicated_in_grds
                ),
            ));
        }
        labeled_rows(&dataset, &corpus, &manifest, args.metric.as_deref())?
    } else if let Some(baseline) = &args.baseline {
        let (low, _) = summarize_file(baseline)?;
        gap_table(&dataset, "all", &corpus.all(), &low.all()).map_err(analysis_err)?
    } else {
        let all = corpus.all();
        gap_table(&dataset, "all", &all, &all).map_err(analysis_err)?
    };

    write_table_csv(&table_path, &rows).map_err(analysis_err)?;
    write_curves_csv(&curves_path, &layer_curves(&corpus)).map_err(analysis_err)?;
    for r in &rows {
        say!("{r}");
    }
    Ok(())
}

fn labeled_rows(
    dataset: &str,
    corpus: &CorpusSummary,
    manifest: &Manifest,
    only_metric: Option<&str>,
) -> Result<Vec<AggregateRow>> {
    let mut groups: BTreeMap<&str, (Vec<&str>, Vec<&str>)> = BTreeMap::new();
    for (id, entry) in manifest {
        if only_metric.is_some_and(|m| m != entry.metric) {
            continue;
        }
        let g = groups.entry(entry.metric.as_str()).or_default();
        match entry.subset {
            Subset::High => g.0.push(id),
            Subset::Low => g.1.push(id),
            Subset::None => {}
        }
    }
    groups.retain(|_, (h, l)| !h.is_empty() || !l.is_empty());
    if groups.is_empty() {
        return Err(CliError::new(
            EXIT_INPUT,
            anyhow!("manifest has no high/low labels"),
        ));
    }
    let mut rows = Vec::new();
    for (metric, (high, low)) in groups {
        let high = corpus.subset(high).map_err(analysis_err)?;
        let low = corpus.subset(low).map_err(analysis_err)?;
        rows.extend(
            gap_table(dataset, metric, &high, &low)
                .map_err(|e| analysis_err(e).context(format!("metric {metric}")))?,
        );
    }
    Ok(rows)
}

pub fn partition(args: &PartitionArgs) -> Result<()> {
    require_input(&args.input)?;
    require_input(&args.manifest)?;
    prepare_outputs(std::slice::from_ref(&args.out), args.output.force)?;
    let scores = ingest_scores(&args.input, args.metric)
        .map_err(|e| quality_err(e).context(format!("reading {}", args.input.display())))?;
    let mut manifest = read_manifest(&args.manifest).map_err(store_err)?;
    let unknown: Vec<&str> = scores
        .iter()
        .map(|s| s.sample_id.as_str())
        .filter(|id| !manifest.contains_key(*id))
        .collect();
    if !unknown.is_empty() {
        return Err(CliError::new(
            EXIT_MISMATCH,
            anyhow!("scored samples missing from the manifest: {unknown:?}"),
        ));
    }
    let result = partition_by_score(&scores, args.k).map_err(quality_err)?;
    for entry in manifest.values_mut() {
        entry.subset = Subset::None;
        entry.metric = args.metric.to_string();
    }
    for id in &result.high_ids {
        manifest.get_mut(id).expect("checked above").subset = Subset::High;
    }
    for id in &result.low_ids {
        manifest.get_mut(id).expect("checked above").subset = Subset::Low;
    }
    write_manifest(&manifest, &args.out).map_err(store_err)?;
    let min = scores.iter().map(|s| s.value).fold(f64::INFINITY, f64::min);
    let max = scores
        .iter()
        .map(|s| s.value)
        .fold(f64::NEG_INFINITY, f64::max);
    say!(
        "{}: {} scored, {} high, {} low, scores in [{min}, {max}]",
        args.metric,
        scores.len(),
        result.high_ids.len(),
        result.low_ids.len()
    );
    Ok(())
}

pub fn compare(args: &CompareArgs) -> Result<()> {
    require_input(&args.input)?;
    require_input(&args.against)?;
    prepare_outputs(std::slice::from_ref(&args.out), args.output.force)?;
    let a = read_table_csv(&args.input)
        .map_err(|e| analysis_err(e).context(format!("reading {}", args.input.display())))?;
    let b = read_table_csv(&args.against)
        .map_err(|e| analysis_err(e).context(format!("reading {}", args.against.display())))?;
    let diffs = compare_runs(&a, &b).map_err(analysis_err)?;
    write_diff_csv(&args.out, &diffs).map_err(analysis_err)?;
    for d in &diffs {
        say!(
            "{} {} {}: {:.1} vs {:.1}, difference {:.1}",
            d.metric,
            d.projection,
            d.statistic,
            d.a,
            d.b,
            d.difference
        );
    }
    Ok(())
}

#[derive(Deserialize)]
struct JsonlSample {
    id: String,
    instruction: String,
    #[allow(dead_code)]
    response: String,
}

pub fn score(args: &ScoreArgs) -> Result<()> {
    if !matches!(
        args.metric,
        QualityMetric::InsTag | QualityMetric::Difficulty
    ) {
        return Err(CliError::new(
            EXIT_USAGE,
            anyhow!(
                "metric {} is not scored externally (use instag or difficulty)",
                args.metric
            ),
        ));
    }
    require_input(&args.input)?;
    prepare_outputs(std::slice::from_ref(&args.out), args.output.force)?;
    let file = fs::File::open(&args.input).map_err(|e| CliError::new(EXIT_INPUT, e))?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::new(EXIT_INPUT, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: JsonlSample = serde_json::from_str(&line).map_err(|e| {
            CliError::new(EXIT_INPUT, e).context(format!("{} line {}", args.input.display(), i + 1))
        })?;
        items.push((s.id, s.instruction));
    }

    let mut config = ScorerConfig::new(&args.scorer_url, &args.scorer_model);
    config.concurrency = args.concurrency.max(1);
    let scorer = ExternalScorer::new(HttpTransport::new(&config), config);
    let outcome = score_batch(&scorer, &items, args.metric);
    for f in &outcome.failures {
        eprintln!("warning: sample {}: {}", f.sample_id, f.error);
    }
    if outcome.scores.is_empty() && !items.is_empty() {
        return Err(CliError::new(
            EXIT_PROTOCOL,
            anyhow!("no sample could be scored"),
        ));
    }
    write_scores(&args.out, &outcome.scores).map_err(quality_err)?;
    say!(
        "{}: {} scored, {} failed",
        args.metric,
        outcome.scores.len(),
        outcome.failures.len()
    );
    Ok(())
}
