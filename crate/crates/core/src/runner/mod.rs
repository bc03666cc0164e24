//! Experiment orchestration behind the CLI subcommands.
//!
//! Every command reads an [`ExperimentConfig`], processes records in a
//! bounded worker pool, and writes its outputs in record order so identical
//! inputs give identical files.

pub mod config;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotations::{load_annotations, strata, AnnotationError, AnnotationRecord, Split, Stratum};
use crate::baselines::{
    predict_clip_direct, predict_majority, predict_random, BaselineError, BaselineKind, LabelFrequencyTable,
    BASELINE_K,
};
use crate::caption::{assemble_caption, AblationMask, CaptionComponents, CaptionError, Narrator};
use crate::embed::{BBox, EmbedError, EmbeddingSource, EmbeddingStore, HttpEmbeddingSource, MockSource, DEFAULT_LOGIT_SCALE};
use crate::llm::{
    build_prompt, complete_with_retry, CompletionRequest, HttpTransport, LabelScanner, LlmError, MockLlm,
    ResponseCache, RetryPolicy, Transport,
};
use crate::metrics::{
    bootstrap_se, emit_report, evaluate_with_se, mean_average_precision, stratified_evaluate, Metric, MetricsError,
    MetricsReport, PredictionRecord, ReportFormat,
};
use crate::taxonomy::{CardinalityPolicy, LabelSet, TaxonomyError, VocabularyCategory, VocabularySet};

pub use config::{ConfigOverrides, ExperimentConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("transport error: {0}")]
    Transport(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Data(_) => 3,
            RunError::Transport(_) => 4,
        }
    }

    fn with_message(&self, message: String) -> RunError {
        match self {
            RunError::Config(_) => RunError::Config(message),
            RunError::Data(_) => RunError::Data(message),
            RunError::Transport(_) => RunError::Transport(message),
        }
    }
}

impl From<AnnotationError> for RunError {
    fn from(e: AnnotationError) -> Self {
        RunError::Data(e.to_string())
    }
}

impl From<TaxonomyError> for RunError {
    fn from(e: TaxonomyError) -> Self {
        RunError::Data(e.to_string())
    }
}

impl From<EmbedError> for RunError {
    fn from(e: EmbedError) -> Self {
        match e {
            EmbedError::Service(_) => RunError::Transport(e.to_string()),
            other => RunError::Data(other.to_string()),
        }
    }
}

impl From<CaptionError> for RunError {
    fn from(e: CaptionError) -> Self {
        match e {
            CaptionError::Embed(inner) => inner.into(),
            CaptionError::Scoring(inner) => RunError::Data(inner.to_string()),
            CaptionError::Config(m) => RunError::Config(m),
        }
    }
}

impl From<LlmError> for RunError {
    fn from(e: LlmError) -> Self {
        match e {
            LlmError::Config(m) => RunError::Config(m),
            LlmError::Transport(_) | LlmError::Protocol(_) => RunError::Transport(e.to_string()),
            LlmError::Cache(_) => RunError::Data(e.to_string()),
        }
    }
}

impl From<MetricsError> for RunError {
    fn from(e: MetricsError) -> Self {
        RunError::Data(e.to_string())
    }
}

impl From<BaselineError> for RunError {
    fn from(e: BaselineError) -> Self {
        match e {
            BaselineError::Embed(inner) => inner.into(),
            other => RunError::Data(other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> RunError {
    RunError::Data(format!("{}: {e}", path.display()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Loaded inputs shared by all records of a run.
pub struct RunContext {
    pub config: ExperimentConfig,
    pub vocabs: VocabularySet,
    pub records: Vec<AnnotationRecord>,
    /// Parallel to `records`; counted over the whole dataset before subsampling.
    pub strata: Vec<Stratum>,
    /// Positions of `records` in the dataset file.
    pub dataset_indices: Vec<usize>,
    pub dataset_digest: String,
    source: Option<Box<dyn EmbeddingSource>>,
    pub store_digest: Option<String>,
}

impl RunContext {
    pub fn load(config: ExperimentConfig, need_source: bool) -> Result<Self, RunError> {
        let vocabs = match &config.vocab_dir {
            Some(dir) => VocabularySet::load_dir(dir, CardinalityPolicy::Strict)?,
            None => VocabularySet::bundled(),
        };
        let dataset = config.require_dataset()?.to_path_buf();
        let bytes = std::fs::read(&dataset).map_err(|e| io_error(&dataset, e))?;
        let all = load_annotations(&dataset)?;
        if all.is_empty() {
            return Err(RunError::Data(format!("{}: no usable records", dataset.display())));
        }
        let all_strata = strata(&all);
        let mut indices: Vec<usize> = (0..all.len()).collect();
        if let Some(n) = config.subsample {
            if n < all.len() {
                indices.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
                indices.truncate(n);
                indices.sort_unstable();
            }
        }
        let records = indices.iter().map(|&i| all[i].clone()).collect();
        let strata = indices.iter().map(|&i| all_strata[i]).collect();
        let (source, store_digest) = if need_source {
            let (s, d) = open_source(&config)?;
            (Some(s), Some(d))
        } else {
            (None, None)
        };
        Ok(RunContext {
            config,
            vocabs,
            records,
            strata,
            dataset_indices: indices,
            dataset_digest: sha256_hex(&bytes),
            source,
            store_digest,
        })
    }

    pub fn source(&self) -> Result<&dyn EmbeddingSource, RunError> {
        self.source
            .as_deref()
            .ok_or_else(|| RunError::Config("--store is required".into()))
    }

    fn pool(&self) -> Result<rayon::ThreadPool, RunError> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.jobs)
            .build()
            .map_err(|e| RunError::Config(format!("worker pool: {e}")))
    }

    /// Runs `f` on every record in the pool. Fails with every record error
    /// listed, in record order.
    fn map_records<T: Send>(
        &self,
        f: impl Fn(usize, &AnnotationRecord) -> Result<T, RunError> + Sync + Send,
    ) -> Result<Vec<T>, RunError> {
        let results: Vec<Result<T, RunError>> = self
            .pool()?
            .install(|| self.records.par_iter().enumerate().map(|(i, r)| f(i, r)).collect());
        let mut rows = Vec::with_capacity(results.len());
        let mut failures: Vec<(usize, RunError)> = Vec::new();
        for (i, r) in results.into_iter().enumerate() {
            match r {
                Ok(row) => rows.push(row),
                Err(e) => failures.push((i, e)),
            }
        }
        match failures.first() {
            None => Ok(rows),
            Some((_, first)) => {
                let lines: Vec<String> = failures
                    .iter()
                    .map(|(i, e)| {
                        format!(
                            "record {} ({}): {}",
                            self.dataset_indices[*i], self.records[*i].image_id, e
                        )
                    })
                    .collect();
                Err(first.with_message(format!(
                    "{} of {} records failed\n{}",
                    failures.len(),
                    self.records.len(),
                    lines.join("\n")
                )))
            }
        }
    }

    fn vocab_digests(&self) -> BTreeMap<String, String> {
        VocabularyCategory::ALL
            .iter()
            .map(|&c| {
                (
                    c.as_str().to_string(),
                    sha256_hex(self.vocabs.get(c).to_file_string().as_bytes()),
                )
            })
            .collect()
    }
}

/// Embedding source named by `config.store`, with a digest identifying it.
pub fn open_source(config: &ExperimentConfig) -> Result<(Box<dyn EmbeddingSource>, String), RunError> {
    let store = config.require_store()?;
    if store == config::MOCK {
        let source = MockSource {
            seed: config.seed,
            dim: config.mock_dim,
            logit_scale: DEFAULT_LOGIT_SCALE,
        };
        return Ok((Box::new(source), format!("mock:seed={}:dim={}", config.seed, config.mock_dim)));
    }
    if config::is_url(store) {
        let source = HttpEmbeddingSource::new(store, DEFAULT_LOGIT_SCALE);
        return Ok((Box::new(source), format!("service:{store}")));
    }
    let path = Path::new(store);
    let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
    let parsed = EmbeddingStore::from_bytes(&bytes)
        .map_err(|e| RunError::Data(format!("{}: {e}", path.display())))?;
    Ok((Box::new(parsed), sha256_hex(&bytes)))
}

/// `mock` or an HTTP transport with the key from the environment.
pub fn make_transport(config: &ExperimentConfig) -> Box<dyn Transport> {
    if config.endpoint == config::MOCK {
        Box::new(MockLlm::new())
    } else {
        let key = std::env::var(crate::llm::transport::LLM_KEY_ENV).ok().filter(|k| !k.is_empty());
        Box::new(HttpTransport::new(config.endpoint.clone(), key))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRow {
    pub index: usize,
    pub image_id: String,
    pub bbox: BBox,
    pub stratum: Stratum,
    pub mask: AblationMask,
    pub caption: String,
    pub components: CaptionComponents,
}

/// One line of `predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub index: usize,
    pub image_id: String,
    pub bbox: BBox,
    pub stratum: Stratum,
    #[serde(default)]
    pub caption: Option<String>,
    #[serde(default)]
    pub prompt_digest: Option<String>,
    #[serde(default)]
    pub raw_response: Option<String>,
    pub parsed_labels: LabelSet,
    #[serde(default)]
    pub unmatched_fragments: Vec<String>,
    #[serde(default)]
    pub empty_response: bool,
    pub truth: LabelSet,
    /// Per-label scores in canonical order, when the predictor has them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl PredictionRow {
    pub fn to_record(&self) -> PredictionRecord {
        PredictionRecord {
            truth: self.truth,
            predicted: self.parsed_labels,
            scores: self.scores.clone(),
            stratum: Some(self.stratum),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmStats {
    pub requests: usize,
    pub cache_hits: usize,
    pub network_attempts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_digest: String,
    pub config: ExperimentConfig,
    pub vocabulary_digests: BTreeMap<String, String>,
    pub store_digest: Option<String>,
    pub dataset_digest: String,
    pub records: usize,
    pub llm: Option<LlmStats>,
    pub started_at_unix: f64,
    pub finished_at_unix: f64,
}

fn config_digest(config: &ExperimentConfig) -> String {
    sha256_hex(serde_json::to_string(config).expect("config serializes").as_bytes())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RunError> {
    let file = std::fs::File::create(path).map_err(|e| io_error(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).expect("row serializes");
        writeln!(out, "{line}").map_err(|e| io_error(path, e))?;
    }
    out.flush().map_err(|e| io_error(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    std::fs::write(path, bytes).map_err(|e| io_error(path, e))
}

fn prepare_out(out: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    let log = out.join(ERROR_LOG);
    if log.exists() {
        std::fs::remove_file(&log).map_err(|e| io_error(&log, e))?;
    }
    Ok(())
}

pub const ERROR_LOG: &str = "errors.log";

/// Writes `errors.log` under `out` describing `error`.
pub fn write_error_log(out: &Path, error: &RunError) {
    if std::fs::create_dir_all(out).is_ok() {
        let text = format!("{error}\n");
        if let Err(e) = std::fs::write(out.join(ERROR_LOG), text) {
            log::error!("cannot write error log: {e}");
        }
    }
}

fn logged<T>(config: &ExperimentConfig, result: Result<T, RunError>) -> Result<T, RunError> {
    if let Err(e) = &result {
        write_error_log(&config.out, e);
    }
    result
}

struct Started {
    at: f64,
    command: &'static str,
}

fn write_manifest(ctx: &RunContext, started: Started, llm: Option<LlmStats>) -> Result<RunManifest, RunError> {
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: started.command.to_string(),
        config_digest: config_digest(&ctx.config),
        config: ctx.config.clone(),
        vocabulary_digests: ctx.vocab_digests(),
        store_digest: ctx.store_digest.clone(),
        dataset_digest: ctx.dataset_digest.clone(),
        records: ctx.records.len(),
        llm,
        started_at_unix: started.at,
        finished_at_unix: unix_now(),
    };
    let path = ctx.config.out.join("manifest.json");
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    write_file(&path, &bytes)?;
    Ok(manifest)
}

fn captions_for(
    ctx: &RunContext,
    narrator: &Narrator<'_>,
    mask: AblationMask,
    i: usize,
    r: &AnnotationRecord,
) -> Result<CaptionRow, RunError> {
    let components = narrator.describe(&r.crop(), &r.full())?;
    let caption = assemble_caption(&components, mask, mask.gender_mode())?;
    Ok(CaptionRow {
        index: ctx.dataset_indices[i],
        image_id: r.image_id.clone(),
        bbox: r.bbox,
        stratum: ctx.strata[i],
        mask,
        caption: caption.text,
        components,
    })
}

/// Captions for every record under `mask`.
pub fn caption_rows(ctx: &RunContext, mask: AblationMask) -> Result<Vec<CaptionRow>, RunError> {
    let narrator = Narrator::new(ctx.source()?, &ctx.vocabs, ctx.config.rule)?;
    ctx.map_records(|i, r| captions_for(ctx, &narrator, mask, i, r))
}

/// Captions → prompts → LLM → parsed labels.
pub fn prediction_rows(
    ctx: &RunContext,
    mask: AblationMask,
    transport: &dyn Transport,
) -> Result<(Vec<PredictionRow>, LlmStats), RunError> {
    let cfg = &ctx.config;
    let variant = cfg.variant;
    let narrator = if variant.uses_caption() {
        Some(Narrator::new(ctx.source()?, &ctx.vocabs, cfg.rule)?)
    } else {
        None
    };
    let cache = match &cfg.cache_dir {
        Some(dir) => Some(ResponseCache::open(dir).map_err(|e| io_error(dir, e))?),
        None => None,
    };
    let policy = RetryPolicy {
        max_retries: cfg.max_retries,
        ..RetryPolicy::default()
    };
    let scanner = LabelScanner::default();
    let rows = ctx.map_records(|i, r| {
        let caption = match &narrator {
            Some(n) => Some(captions_for(ctx, n, mask, i, r)?.caption),
            None => None,
        };
        let prompt = build_prompt(caption.as_deref(), variant)?;
        let mut request = CompletionRequest::new(cfg.model.clone(), variant, prompt);
        if variant.uses_image() {
            request = request.with_image(r.image_path.clone());
        }
        if let Some(t) = cfg.temperature {
            request.params.temperature = t;
        }
        if let Some(m) = cfg.max_tokens {
            request.params.max_tokens = m;
        }
        let completion = complete_with_retry(&request, transport, cache.as_ref(), &policy)?;
        let parsed = scanner.parse(&completion.text);
        let row = PredictionRow {
            index: ctx.dataset_indices[i],
            image_id: r.image_id.clone(),
            bbox: r.bbox,
            stratum: ctx.strata[i],
            caption,
            prompt_digest: Some(request.digest()),
            raw_response: Some(completion.text),
            parsed_labels: parsed.labels,
            unmatched_fragments: parsed.unmatched_fragments,
            empty_response: parsed.empty_response,
            truth: r.combined(),
            scores: None,
        };
        Ok((row, completion.cached, completion.attempts))
    })?;
    let mut stats = LlmStats::default();
    let mut out = Vec::with_capacity(rows.len());
    for (row, cached, attempts) in rows {
        stats.requests += 1;
        stats.cache_hits += usize::from(cached);
        stats.network_attempts += attempts as usize;
        out.push(row);
    }
    Ok((out, stats))
}

/// Label frequencies for the frequency-based baselines: the configured
/// reference file, else the validation records of the dataset, else the
/// whole dataset.
pub fn reference_frequencies(ctx: &RunContext) -> Result<LabelFrequencyTable, RunError> {
    if let Some(path) = &ctx.config.frequency_dataset {
        return Ok(LabelFrequencyTable::from_records(&load_annotations(path)?)?);
    }
    let val: Vec<AnnotationRecord> = ctx.records.iter().filter(|r| r.split == Split::Val).cloned().collect();
    if !val.is_empty() {
        return Ok(LabelFrequencyTable::from_records(&val)?);
    }
    log::warn!("no validation records and no frequency_dataset; counting labels over the evaluated records");
    Ok(LabelFrequencyTable::from_records(&ctx.records)?)
}

pub fn baseline_rows(ctx: &RunContext, kind: BaselineKind) -> Result<Vec<PredictionRow>, RunError> {
    let freq = match kind {
        BaselineKind::Rand6Weighted | BaselineKind::Majority => Some(reference_frequencies(ctx)?),
        _ => None,
    };
    let majority = match (&freq, kind) {
        (Some(f), BaselineKind::Majority) => Some(predict_majority(f)?),
        _ => None,
    };
    let seed = ctx.config.seed;
    ctx.map_records(|i, r| {
        let index = ctx.dataset_indices[i];
        let (labels, scores) = match kind {
            BaselineKind::Rand6 => (predict_random(seed, index as u64, false, None)?, None),
            BaselineKind::Rand6Weighted => (predict_random(seed, index as u64, true, freq.as_ref())?, None),
            BaselineKind::Majority => (majority.expect("computed above"), None),
            BaselineKind::ClipDirect => {
                let p = predict_clip_direct(ctx.source()?, &r.full(), &ctx.vocabs.emotions, BASELINE_K)?;
                (p.labels, Some(p.scores))
            }
        };
        Ok(PredictionRow {
            index,
            image_id: r.image_id.clone(),
            bbox: r.bbox,
            stratum: ctx.strata[i],
            caption: None,
            prompt_digest: None,
            raw_response: None,
            parsed_labels: labels,
            unmatched_fragments: Vec::new(),
            empty_response: labels.is_empty(),
            truth: r.combined(),
            scores,
        })
    })
}

/// Overall report (with bootstrap SE and, when scores exist, mAP) followed
/// by one row per person-count stratum.
pub fn report_rows(
    name: &str,
    records: &[PredictionRecord],
    resamples: usize,
    seed: u64,
) -> Result<Vec<(String, MetricsReport)>, RunError> {
    let mut overall = evaluate_with_se(records, resamples, seed)?;
    if records.iter().all(|r| r.scores.is_some()) {
        overall.mean_average_precision = Some(mean_average_precision(records)?);
    }
    let mut rows = vec![(name.to_string(), overall)];
    if records.iter().all(|r| r.stratum.is_some()) {
        for (stratum, rep) in stratified_evaluate(records)? {
            rows.push((format!("{name} [people {stratum}]"), rep));
        }
    }
    Ok(rows)
}

fn write_reports(out: &Path, stem: &str, rows: &[(String, MetricsReport)]) -> Result<(), RunError> {
    write_file(&out.join(format!("{stem}.json")), &emit_report(rows, ReportFormat::Structured))?;
    write_file(&out.join(format!("{stem}.txt")), &emit_report(rows, ReportFormat::Table))
}

fn started(command: &'static str) -> Started {
    Started { at: unix_now(), command }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub out: PathBuf,
    pub rows: Vec<PredictionRow>,
    pub reports: Vec<(String, MetricsReport)>,
    pub manifest: RunManifest,
}

/// `caption`: writes `captions.jsonl`.
pub fn run_captions(config: &ExperimentConfig) -> Result<Vec<CaptionRow>, RunError> {
    logged(config, (|| {
        let start = started("caption");
        prepare_out(&config.out)?;
        let ctx = RunContext::load(config.clone(), true)?;
        let rows = caption_rows(&ctx, config.mask)?;
        write_jsonl(&config.out.join("captions.jsonl"), &rows)?;
        write_manifest(&ctx, start, None)?;
        Ok(rows)
    })())
}

fn run_name(config: &ExperimentConfig) -> String {
    format!("{}:{}", config.model, config.variant)
}

/// `predict` with an explicit transport.
pub fn run_predict_with(config: &ExperimentConfig, transport: &dyn Transport) -> Result<RunOutput, RunError> {
    logged(config, (|| {
        let start = started("predict");
        prepare_out(&config.out)?;
        let ctx = RunContext::load(config.clone(), config.variant.uses_caption())?;
        let (rows, stats) = prediction_rows(&ctx, config.mask, transport)?;
        write_jsonl(&config.out.join("predictions.jsonl"), &rows)?;
        let records: Vec<PredictionRecord> = rows.iter().map(PredictionRow::to_record).collect();
        let reports = report_rows(&run_name(config), &records, config.resamples, config.seed)?;
        write_reports(&config.out, "report", &reports)?;
        let manifest = write_manifest(&ctx, start, Some(stats))?;
        Ok(RunOutput {
            out: config.out.clone(),
            rows,
            reports,
            manifest,
        })
    })())
}

/// `predict`: captions → LLM → labels → metrics.
pub fn run_predict(config: &ExperimentConfig) -> Result<RunOutput, RunError> {
    let transport = make_transport(config);
    run_predict_with(config, transport.as_ref())
}

/// `baseline`: one of the reference predictors.
pub fn run_baseline(config: &ExperimentConfig) -> Result<RunOutput, RunError> {
    logged(config, (|| {
        let kind = config
            .baseline
            .ok_or_else(|| RunError::Config("--baseline is required".into()))?;
        let start = started("baseline");
        prepare_out(&config.out)?;
        let ctx = RunContext::load(config.clone(), kind == BaselineKind::ClipDirect)?;
        let rows = baseline_rows(&ctx, kind)?;
        write_jsonl(&config.out.join("predictions.jsonl"), &rows)?;
        let records: Vec<PredictionRecord> = rows.iter().map(PredictionRow::to_record).collect();
        let reports = report_rows(kind.as_str(), &records, config.resamples, config.seed)?;
        write_reports(&config.out, "report", &reports)?;
        let manifest = write_manifest(&ctx, start, None)?;
        Ok(RunOutput {
            out: config.out.clone(),
            rows,
            reports,
            manifest,
        })
    })())
}

pub fn load_prediction_rows(path: &Path) -> Result<Vec<PredictionRow>, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| RunError::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// `evaluate` / `strata`: reports from an existing predictions file.
pub fn run_evaluate(config: &ExperimentConfig, stem: &str) -> Result<Vec<(String, MetricsReport)>, RunError> {
    logged(config, (|| {
        let path = config
            .predictions
            .as_deref()
            .ok_or_else(|| RunError::Config("--predictions is required".into()))?;
        prepare_out(&config.out)?;
        let rows = load_prediction_rows(path)?;
        let records: Vec<PredictionRecord> = rows.iter().map(PredictionRow::to_record).collect();
        let name = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "predictions".into());
        let reports = report_rows(&name, &records, config.resamples, config.seed)?;
        write_reports(&config.out, stem, &reports)?;
        Ok(reports)
    })())
}

/// `strata`: per-stratum table, from `--predictions` when given or from a
/// fresh `predict` run.
pub fn run_strata(config: &ExperimentConfig) -> Result<Vec<(String, MetricsReport)>, RunError> {
    if config.predictions.is_some() {
        return run_evaluate(config, "strata");
    }
    let out = run_predict(config)?;
    logged(config, (|| {
        write_reports(&config.out, "strata", &out.reports)?;
        Ok(out.reports)
    })())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mask: AblationMask,
    pub f1: f64,
    /// F1 minus the F1 of the first (full) row.
    pub diff: f64,
    /// Bootstrap SE of F1.
    pub se: f64,
    pub report: MetricsReport,
}

pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let width = rows.iter().map(|r| r.mask.to_string().len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<width$}  {:>7}  {:>7}  {:>6}\n", "Mask", "F1", "Diff", "SE");
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>7.2}  {:>7.2}  {:>6.2}\n",
            r.mask.to_string(),
            r.f1,
            r.diff,
            r.se
        ));
    }
    out
}

/// `ablate` with an explicit transport. The first mask must be `full`.
pub fn run_ablation_with(config: &ExperimentConfig, transport: &dyn Transport) -> Result<Vec<AblationRow>, RunError> {
    logged(config, (|| {
        if config.masks.first() != Some(&AblationMask::FULL) {
            return Err(RunError::Config("the first ablation mask must be \"full\"".into()));
        }
        if config.variant.uses_image() {
            return Err(RunError::Config(format!("variant {} has no caption to ablate", config.variant)));
        }
        let start = started("ablate");
        prepare_out(&config.out)?;
        let ctx = RunContext::load(config.clone(), true)?;
        let dir = config.out.join("ablation");
        std::fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        let mut rows: Vec<AblationRow> = Vec::new();
        let mut total = LlmStats::default();
        for (m, mask) in config.masks.iter().enumerate() {
            let (preds, stats) = prediction_rows(&ctx, *mask, transport)?;
            total.requests += stats.requests;
            total.cache_hits += stats.cache_hits;
            total.network_attempts += stats.network_attempts;
            write_jsonl(&dir.join(format!("{m:02}_{mask}.jsonl")), &preds)?;
            let records: Vec<PredictionRecord> = preds.iter().map(PredictionRow::to_record).collect();
            let report = crate::metrics::evaluate(&records)?;
            let se = bootstrap_se(&records, Metric::F1, config.resamples, config.seed)?;
            let base = rows.first().map_or(report.f1, |r| r.f1);
            rows.push(AblationRow {
                mask: *mask,
                f1: report.f1,
                diff: report.f1 - base,
                se,
                report,
            });
        }
        let mut json = serde_json::to_vec_pretty(&rows).expect("rows serialize");
        json.push(b'\n');
        write_file(&config.out.join("ablation.json"), &json)?;
        write_file(&config.out.join("ablation.txt"), format_ablation_table(&rows).as_bytes())?;
        write_manifest(&ctx, start, Some(total))?;
        Ok(rows)
    })())
}

pub fn run_ablation(config: &ExperimentConfig) -> Result<Vec<AblationRow>, RunError> {
    let transport = make_transport(config);
    run_ablation_with(config, transport.as_ref())
}

/// `synth`: writes the rigged fixture into `config.out`.
pub fn run_synth(config: &ExperimentConfig, images: usize, persons: usize) -> Result<PathBuf, RunError> {
    logged(config, (|| {
        if images == 0 || persons == 0 {
            return Err(RunError::Config("images and persons must be positive".into()));
        }
        let fixture = crate::annotations::synth_fixture(config.seed, images, persons);
        fixture
            .write_dir(&config.out)
            .map_err(|e| io_error(&config.out, e))?;
        Ok(config.out.clone())
    })())
}
