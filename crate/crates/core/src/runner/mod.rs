// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end runs: evaluation, error ablation, oracle estimation, MRD and
//! hidden-state similarity, each persisted under one run directory.
//!
//! Stages produce their files in memory; the runner writes them atomically
//! and records their digests in `manifest.json`. A stage whose input digest
//! and outputs match the previous manifest is not executed again.

pub mod config;
pub mod manifest;
pub mod report;
mod svg;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::backend::{
    Backend, FinishReason, GenerationParams, HttpBackend, MockBackend, MockScript, RelevanceTarget,
    TraceCache,
};
use crate::corpus::{Direction, DirectionKind, LangCode, ParallelCorpus, ParallelSample};
use crate::digest::{sha256_hex, write_atomic};
use crate::error::{Error, Result};
use crate::error_ablation::{
    compute_error_report, judge_agreement, ConstantJudge, ErrorConfig, ErrorInput, ErrorRecord,
    ErrorReport, HttpJudge, JudgeCache, JudgeClient, JudgeOutcome, JudgeTransport,
    LanguageDetector, NullDetector, OfflineJudge,
};
use crate::mechanism::{curve_stats, part_mrd, pool_part, similarity};
use crate::oracle::{estimate_oracle, oracle_accuracy, segment_context, OracleOutcome};
use crate::prompting::{
    align_part_spans, render_prompt, Part, PartTokenSpans, PromptTemplate, RenderedPrompt,
    TemplateId,
};
use crate::scoring::{
    aggregate_direction, categorize_sample, cross_lingual_ratio, extract_answer, score_answer,
    stable_mean, Category, CategoryThresholds, DirectionSummary,
};

pub use config::{RunConfig, Stage, TemplateChoice};
pub use manifest::{RunManifest, StageRecord, StageStatus};
pub use report::{format_ratio, render_report, ReportOutcome};

use config::{BackendKind, DetectorKind, JudgeConfig, JudgeKind};
use manifest::outputs_intact;

pub const SCORES_FILE: &str = "scores.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RATIOS_FILE: &str = "ratios.csv";
pub const CATEGORIES_FILE: &str = "categories.jsonl";
pub const TEMPLATE_FILE: &str = "template_choice.json";
pub const ERROR_RECORDS_FILE: &str = "errors/records.jsonl";
pub const ERROR_REPORT_FILE: &str = "errors/report.csv";
pub const ERROR_REPORT2_FILE: &str = "errors/report.judge2.csv";
pub const AGREEMENT_FILE: &str = "errors/agreement.csv";
pub const ORACLE_ACCURACY_FILE: &str = "oracle/accuracy.csv";
pub const MRD_FILE: &str = "mechanism/mrd.csv";
pub const CURVE_STATS_FILE: &str = "mechanism/curve_stats.csv";

/// Parts whose hidden-state similarity is tracked.
pub const SIM_PARTS: [Part; 3] = [Part::Question, Part::LastInputToken, Part::Context];

/// One generated and scored answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub sample_id: String,
    pub direction: Direction,
    pub template: TemplateId,
    pub prompt_digest: String,
    pub raw_output: String,
    pub extracted_answer: String,
    pub finish_reason: FinishReason,
    pub f1: f64,
    pub em: bool,
    pub best_reference_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub sample_id: String,
    pub category: Category,
    pub per_direction_f1: BTreeMap<Direction, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TemplateSelection {
    chosen: TemplateId,
    mean_f1: BTreeMap<TemplateId, f64>,
    n: usize,
    input_digest: String,
}

/// Files and notes produced by one stage.
#[derive(Debug, Default)]
struct StageOutput {
    files: BTreeMap<String, Vec<u8>>,
    notes: Vec<String>,
}

impl StageOutput {
    fn file(&mut self, rel: &str, data: impl Into<Vec<u8>>) {
        self.files.insert(rel.to_string(), data.into());
    }

    fn note(&mut self, note: String) {
        warn!("{note}");
        self.notes.push(note);
    }
}

/// Build the backend a config asks for.
pub fn build_backend(config: &RunConfig) -> Result<Box<dyn Backend>> {
    match config.backend_kind {
        BackendKind::Mock if config.backend_target.is_empty() => {
            Ok(Box::new(MockBackend::new(MockScript::new(4, 8))?))
        }
        BackendKind::Mock => {
            let path = Path::new(&config.backend_target);
            let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok(Box::new(MockBackend::from_json(&raw)?))
        }
        BackendKind::Http => Ok(Box::new(HttpBackend::connect(
            &config.backend_target,
            Duration::from_secs(config.backend_timeout_secs),
        )?)),
    }
}

fn build_judge(config: &RunConfig, judge: &JudgeConfig) -> Result<JudgeClient> {
    let transport: Box<dyn JudgeTransport> = match judge.kind {
        JudgeKind::Http => Box::new(HttpJudge::new(
            &judge.endpoint,
            &judge.model,
            judge.auth_env.as_deref(),
            Duration::from_secs(config.judge_timeout_secs),
        )?),
        JudgeKind::Constant => Box::new(ConstantJudge {
            model: judge.model.clone(),
            reply: judge.constant_reply.clone(),
        }),
        JudgeKind::Offline => Box::new(OfflineJudge {
            model: judge.model.clone(),
        }),
    };
    let cache = JudgeCache::open(&config.judge_cache_dir)?;
    let client = JudgeClient::new(transport, cache);
    Ok(match judge.kind {
        JudgeKind::Offline => client.with_retries(0, Duration::ZERO),
        _ => client.with_retries(
            config.judge_max_retries,
            Duration::from_millis(config.judge_backoff_ms),
        ),
    })
}

fn build_detector(config: &RunConfig, languages: &[LangCode]) -> Result<Box<dyn LanguageDetector>> {
    match config.detector {
        DetectorKind::None => Ok(Box::new(NullDetector)),
        #[cfg(feature = "lingua")]
        DetectorKind::Lingua => Ok(Box::new(crate::error_ablation::LinguaDetector::new(
            languages,
        )?)),
        #[cfg(not(feature = "lingua"))]
        DetectorKind::Lingua => {
            let _ = languages;
            Err(Error::Config(
                "this build has no Lingua detector; set `detector.kind = none`".into(),
            ))
        }
    }
}

/// Map `f` over `items` with up to `workers` threads, keeping input order.
fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, items.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                out.lock().expect("parallel results")[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .expect("parallel results")
        .into_iter()
        .map(|r| r.expect("every item mapped"))
        .collect()
}

fn to_jsonl<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::json("jsonl record", e))?;
        out.push(b'\n');
    }
    Ok(out)
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path.display().to_string(), e)))
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

struct Runner<'a> {
    config: &'a RunConfig,
    backend: &'a dyn Backend,
    corpus: ParallelCorpus,
    demos: Vec<ParallelSample>,
    tests: Vec<ParallelSample>,
    directions: Vec<Direction>,
    traces: TraceCache,
    workers: usize,
}

impl<'a> Runner<'a> {
    fn new(config: &'a RunConfig, backend: &'a dyn Backend) -> Result<Self> {
        let corpus = ParallelCorpus::load(
            &config.corpus_path,
            &config.corpus_name,
            config.languages.as_deref(),
        )?;
        let directions = match &config.directions {
            Some(ds) => ds.clone(),
            None => all_directions(&corpus.languages),
        };
        for d in &directions {
            corpus.check_direction(d)?;
        }
        let first = directions
            .first()
            .ok_or_else(|| Error::Config("no directions to evaluate".into()))?;
        let demos: Vec<ParallelSample> =
            crate::corpus::select_demonstrations(&corpus, first, config.shots, config.seed)?
                .into_iter()
                .cloned()
                .collect();
        let ids: BTreeSet<&str> = demos.iter().map(|d| d.id.as_str()).collect();
        let tests = corpus.test_samples(&ids).into_iter().cloned().collect();
        Ok(Runner {
            config,
            backend,
            demos,
            tests,
            directions,
            traces: TraceCache::new(&config.traces_dir),
            workers: backend.descriptor().max_concurrency.max(1),
            corpus,
        })
    }

    fn prompt(
        &self,
        template: TemplateId,
        sample: &ParallelSample,
        direction: &Direction,
    ) -> Result<RenderedPrompt> {
        let demos: Vec<&ParallelSample> = self.demos.iter().collect();
        let plain = render_prompt(
            &PromptTemplate::builtin(template),
            &demos,
            sample,
            direction,
        )?;
        let wrap = self.backend.chat_wrap(&plain.text)?;
        plain.rewrap(&wrap.text, wrap.user_offset)
    }

    fn sample(&self, id: &str) -> Result<&ParallelSample> {
        self.tests.iter().find(|s| s.id == id).ok_or_else(|| {
            Error::InvalidArgument(format!("sample `{id}` is not a test item of this run"))
        })
    }

    fn evaluate_one(
        &self,
        template: TemplateId,
        sample: &ParallelSample,
        direction: &Direction,
    ) -> Result<EvaluationRecord> {
        let prompt = self.prompt(template, sample, direction)?;
        let params = GenerationParams {
            max_new_tokens: self.config.max_new_tokens,
            temperature: 0.0,
        };
        let out = self.backend.generate(&prompt.text, &params)?;
        let extracted = extract_answer(&out.text);
        let refs = sample.entry(&direction.context_lang)?.answer_texts();
        let score = score_answer(&extracted, &refs)?;
        Ok(EvaluationRecord {
            sample_id: sample.id.clone(),
            direction: direction.clone(),
            template,
            prompt_digest: sha256_hex(&prompt.text),
            raw_output: out.text,
            extracted_answer: extracted,
            finish_reason: out.finish_reason,
            f1: score.f1,
            em: score.em,
            best_reference_index: score.best_reference_index,
        })
    }

    /// Evaluate `jobs`, skipping context overflows with a note.
    fn evaluate_many(
        &self,
        template: TemplateId,
        jobs: &[(&ParallelSample, &Direction)],
        out: &mut StageOutput,
    ) -> Result<Vec<EvaluationRecord>> {
        let results = parallel_map(jobs, self.workers, |(s, d)| {
            self.evaluate_one(template, s, d)
        });
        let mut records = Vec::new();
        for ((s, d), r) in jobs.iter().zip(results) {
            match r {
                Ok(rec) => records.push(rec),
                Err(Error::ContextOverflow { tokens, limit }) => out.note(format!(
                    "{d} {}: prompt of {tokens} tokens exceeds {limit}; skipped",
                    s.id
                )),
                Err(e) => return Err(e),
            }
        }
        Ok(records)
    }

    fn template_digest(&self) -> String {
        let keys: String = self
            .config
            .values
            .iter()
            .filter(|(k, _)| {
                ["corpus.languages", "shots", "seed", "template", "backend."]
                    .iter()
                    .any(|p| k.starts_with(p))
            })
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let backend =
            serde_json::to_string(self.backend.descriptor()).expect("descriptor serializes");
        sha256_hex(format!("{keys}{}\n{backend}", self.corpus.digest()))
    }

    /// The template to use, choosing between v1 and v2 on an en-en slice
    /// when configured as `auto`. Ties go to v1.
    fn resolve_template(&self, out: &mut StageOutput) -> Result<TemplateId> {
        if let TemplateChoice::Fixed(id) = self.config.template {
            return Ok(id);
        }
        let digest = self.template_digest();
        let path = self.config.run_dir.join(TEMPLATE_FILE);
        if let Ok(raw) = fs::read(&path) {
            if let Ok(sel) = serde_json::from_slice::<TemplateSelection>(&raw) {
                if sel.input_digest == digest {
                    out.file(TEMPLATE_FILE, raw);
                    return Ok(sel.chosen);
                }
            }
        }
        let slice: Vec<&ParallelSample> = self.tests.iter().take(self.config.auto_slice).collect();
        let en_en = Direction::en_en();
        let jobs: Vec<(&ParallelSample, &Direction)> = slice.iter().map(|s| (*s, &en_en)).collect();
        let mut mean_f1 = BTreeMap::new();
        let mut n = 0;
        for id in [TemplateId::V1, TemplateId::V2] {
            let recs = self.evaluate_many(id, &jobs, out)?;
            n = recs.len();
            mean_f1.insert(id, stable_mean(recs.iter().map(|r| r.f1)).unwrap_or(0.0));
        }
        let chosen = if mean_f1[&TemplateId::V2] > mean_f1[&TemplateId::V1] {
            TemplateId::V2
        } else {
            TemplateId::V1
        };
        info!("template auto-selection picked {chosen}");
        let sel = TemplateSelection {
            chosen,
            mean_f1,
            n,
            input_digest: digest,
        };
        let raw = serde_json::to_vec_pretty(&sel).map_err(|e| Error::json("template choice", e))?;
        write_atomic(&path, &raw)?;
        out.file(TEMPLATE_FILE, raw);
        Ok(chosen)
    }

    fn categorization_directions(&self) -> Vec<Direction> {
        self.directions
            .iter()
            .filter(|d| match d.kind() {
                DirectionKind::EnEn | DirectionKind::EnX => true,
                DirectionKind::XX => self.config.include_xx,
            })
            .cloned()
            .collect()
    }

    fn stage_evaluate(&self) -> Result<StageOutput> {
        let mut out = StageOutput::default();
        let template = self.resolve_template(&mut out)?;
        let jobs: Vec<(&ParallelSample, &Direction)> = self
            .directions
            .iter()
            .flat_map(|d| self.tests.iter().map(move |s| (s, d)))
            .collect();
        let records = self.evaluate_many(template, &jobs, &mut out)?;
        out.file(SCORES_FILE, to_jsonl(&records)?);

        let mut summaries = BTreeMap::new();
        let mut csv = String::from("direction,kind,n,mean_f1,mean_em\n");
        for d in &self.directions {
            let scores: Vec<_> = records
                .iter()
                .filter(|r| &r.direction == d)
                .map(|r| crate::scoring::AnswerScore {
                    f1: r.f1,
                    em: r.em,
                    pred_normalized: Vec::new(),
                    best_reference_index: r.best_reference_index,
                })
                .collect();
            if scores.is_empty() {
                out.note(format!("{d}: no scored samples"));
                continue;
            }
            let s: DirectionSummary = aggregate_direction(d, &scores)?;
            let kind = match d.kind() {
                DirectionKind::EnEn => "en-en",
                DirectionKind::EnX => "en-x",
                DirectionKind::XX => "x-x",
            };
            writeln!(
                csv,
                "{d},{kind},{},{},{}",
                s.n, s.mean_f1_x100, s.mean_em_x100
            )
            .expect("string write");
            summaries.insert(d.clone(), s);
        }
        out.file(SUMMARY_FILE, csv);

        match cross_lingual_ratio(&summaries) {
            Ok(r) => out.file(
                RATIOS_FILE,
                format!(
                    "en_en,mean_en_x,mean_x_x,en_x_over_en_en,x_x_over_en_en\n{},{},{},{},{}\n",
                    r.en_en,
                    opt(r.mean_en_x),
                    opt(r.mean_x_x),
                    opt(r.en_x_over_en_en),
                    opt(r.x_x_over_en_en)
                ),
            ),
            Err(e) => out.note(format!("ratios not computed: {e}")),
        }

        let cat_dirs = self.categorization_directions();
        let mut per_sample: BTreeMap<&str, BTreeMap<Direction, f64>> = BTreeMap::new();
        for r in &records {
            per_sample
                .entry(&r.sample_id)
                .or_default()
                .insert(r.direction.clone(), r.f1);
        }
        let thresholds = CategoryThresholds {
            balanced: self.config.balanced_threshold,
            margin: self.config.margin_threshold,
        };
        let mut categories = Vec::new();
        if cat_dirs.contains(&Direction::en_en()) {
            for s in &self.tests {
                let Some(f1s) = per_sample.get(s.id.as_str()) else {
                    continue;
                };
                if !cat_dirs.iter().all(|d| f1s.contains_key(d)) {
                    continue;
                }
                let c = categorize_sample(f1s, &cat_dirs, thresholds)?;
                categories.push(CategoryRecord {
                    sample_id: s.id.clone(),
                    category: c.category,
                    per_direction_f1: c.per_direction_f1,
                });
            }
        } else {
            out.note(
                "categorization needs en-en among the directions; no categories written".into(),
            );
        }
        out.file(CATEGORIES_FILE, to_jsonl(&categories)?);
        Ok(out)
    }

    fn stage_errors(&self) -> Result<StageOutput> {
        let mut out = StageOutput::default();
        let records: Vec<EvaluationRecord> = read_jsonl(&self.config.run_dir.join(SCORES_FILE))?;
        let detector = build_detector(self.config, &self.corpus.languages)?;
        let judge = build_judge(self.config, &self.config.judge)?;
        let items = self.judge_items(&records)?;
        let outcomes = judge.classify_all(&items, self.config.judge_concurrency);
        let asked = records
            .iter()
            .filter(|r| !r.extracted_answer.trim().is_empty())
            .count();
        let down = outcomes
            .iter()
            .filter(|o| **o == JudgeOutcome::Unavailable)
            .count();
        if asked > 0 && down == asked {
            return Err(Error::Judge(format!(
                "judge `{}` was unavailable for every answer",
                judge.model_id()
            )));
        }
        let (recs, reports) = self.error_reports(&records, &outcomes, detector.as_ref())?;
        out.file(ERROR_RECORDS_FILE, to_jsonl(&recs)?);
        out.file(ERROR_REPORT_FILE, error_report_csv(&reports));
        if down > 0 {
            out.note(format!("{down} answers excluded: judge unavailable"));
        }

        if let Some(j2) = &self.config.judge2 {
            let judge2 = build_judge(self.config, j2)?;
            let outcomes2 = judge2.classify_all(&items, self.config.judge_concurrency);
            let (recs2, reports2) = self.error_reports(&records, &outcomes2, detector.as_ref())?;
            out.file(ERROR_REPORT2_FILE, error_report_csv(&reports2));
            let mut csv = String::from("direction,agreement\n");
            for d in &self.directions {
                let a: Vec<ErrorRecord> =
                    recs.iter().filter(|r| &r.direction == d).cloned().collect();
                let b: Vec<ErrorRecord> = recs2
                    .iter()
                    .filter(|r| &r.direction == d)
                    .cloned()
                    .collect();
                writeln!(csv, "{d},{}", opt(judge_agreement(&a, &b))).expect("string write");
            }
            writeln!(csv, "all,{}", opt(judge_agreement(&recs, &recs2))).expect("string write");
            out.file(AGREEMENT_FILE, csv);
        }
        Ok(out)
    }

    fn judge_items(&self, records: &[EvaluationRecord]) -> Result<Vec<(String, String)>> {
        records
            .iter()
            .map(|r| {
                let q = self
                    .sample(&r.sample_id)?
                    .entry(&r.direction.question_lang)?
                    .question
                    .clone();
                Ok((q, r.extracted_answer.clone()))
            })
            .collect()
    }

    fn error_reports(
        &self,
        records: &[EvaluationRecord],
        outcomes: &[JudgeOutcome],
        detector: &dyn LanguageDetector,
    ) -> Result<(Vec<ErrorRecord>, Vec<ErrorReport>)> {
        let cfg = ErrorConfig {
            correct_threshold: self.config.correct_f1,
            denominator: self.config.denominator,
        };
        let mut all_records = Vec::new();
        let mut reports = Vec::new();
        for d in &self.directions {
            let mut inputs = Vec::new();
            let mut scores = BTreeMap::new();
            for (r, o) in records
                .iter()
                .zip(outcomes)
                .filter(|(r, _)| &r.direction == d)
            {
                let reference = self.sample(&r.sample_id)?.entry(&d.context_lang)?.answers[0]
                    .text
                    .clone();
                inputs.push(ErrorInput {
                    sample_id: r.sample_id.clone(),
                    direction: d.clone(),
                    extracted_answer: r.extracted_answer.clone(),
                    detected_lang: detector.detect(&r.extracted_answer),
                    reference_lang: detector.detect(&reference),
                    judge: *o,
                });
                scores.insert(
                    r.sample_id.clone(),
                    crate::scoring::AnswerScore {
                        f1: r.f1,
                        em: r.em,
                        pred_normalized: Vec::new(),
                        best_reference_index: r.best_reference_index,
                    },
                );
            }
            if inputs.is_empty() {
                continue;
            }
            let (recs, report) = compute_error_report(d, &inputs, &scores, cfg)?;
            all_records.extend(recs);
            reports.push(report);
        }
        Ok((all_records, reports))
    }

    fn oracle_one(
        &self,
        template: TemplateId,
        sample: &ParallelSample,
        direction: &Direction,
        mode: crate::oracle::OracleMode,
    ) -> Result<OracleOutcome> {
        let prompt = self.prompt(template, sample, direction)?;
        let entry = sample.entry(&direction.context_lang)?;
        let (start, _) = entry.first_answer_byte_range().ok_or_else(|| {
            Error::InvalidArgument(format!("sample `{}` has no answer", sample.id))
        })?;
        let seg = segment_context(&entry.context, start, self.config.granularity)?;
        let gold = entry.answers[0].text.clone();
        let target = match mode {
            crate::oracle::OracleMode::Step => gold,
            crate::oracle::OracleMode::Sequence => {
                let params = GenerationParams {
                    max_new_tokens: self.config.max_new_tokens,
                    temperature: 0.0,
                };
                let answer = extract_answer(&self.backend.generate(&prompt.text, &params)?.text);
                if answer.trim().is_empty() {
                    gold
                } else {
                    answer
                }
            }
        };
        estimate_oracle(self.backend, &prompt, &seg, mode, &target)
    }

    fn stage_oracle(&self) -> Result<StageOutput> {
        let mut out = StageOutput::default();
        let template = self.resolve_template(&mut out)?;
        out.files.remove(TEMPLATE_FILE);
        let directions = self
            .config
            .oracle_directions
            .clone()
            .unwrap_or_else(|| self.directions.clone());
        for d in &directions {
            self.corpus.check_direction(d)?;
        }
        let granularity = match self.config.granularity {
            crate::oracle::Granularity::Sentence => "sentence".to_string(),
            crate::oracle::Granularity::Span { window } => format!("span{window}"),
        };
        let mut csv = String::from("direction,mode,granularity,n,accuracy\n");
        for d in &directions {
            for mode in &self.config.oracle_modes {
                let results = parallel_map(&self.tests, self.workers, |s| {
                    self.oracle_one(template, s, d, *mode)
                });
                let mut outcomes = Vec::new();
                for (s, r) in self.tests.iter().zip(results) {
                    match r {
                        Ok(o) => outcomes.push(o),
                        Err(Error::ContextOverflow { tokens, limit }) => out.note(format!(
                            "oracle {d} {}: {tokens} tokens exceed {limit}; skipped",
                            s.id
                        )),
                        Err(e) => return Err(e),
                    }
                }
                out.file(
                    &format!("oracle/{d}.{}.jsonl", mode.name()),
                    to_jsonl(&outcomes)?,
                );
                match oracle_accuracy(&outcomes) {
                    Ok(acc) => writeln!(
                        csv,
                        "{d},{},{granularity},{},{acc}",
                        mode.name(),
                        outcomes.len()
                    )
                    .expect("string write"),
                    Err(_) => out.note(format!("oracle {d} {}: no samples", mode.name())),
                }
            }
        }
        out.file(ORACLE_ACCURACY_FILE, csv);
        Ok(out)
    }

    fn categories(&self) -> Result<Vec<CategoryRecord>> {
        read_jsonl(&self.config.run_dir.join(CATEGORIES_FILE))
    }

    fn template_used(&self) -> Result<TemplateId> {
        let records: Vec<EvaluationRecord> = read_jsonl(&self.config.run_dir.join(SCORES_FILE))?;
        Ok(records.first().map_or(TemplateId::V1, |r| r.template))
    }

    /// Part token spans of a prompt under the backend's tokenizer.
    fn token_spans(&self, prompt: &RenderedPrompt) -> Result<PartTokenSpans> {
        let offsets: Vec<(usize, usize)> = self
            .backend
            .tokenize_with_offsets(&prompt.text)?
            .iter()
            .map(|t| (t.char_start, t.char_end))
            .collect();
        align_part_spans(prompt, &offsets)
    }

    fn analysis_directions(&self) -> Vec<Direction> {
        self.directions
            .iter()
            .filter(|d| matches!(d.kind(), DirectionKind::EnEn | DirectionKind::EnX))
            .cloned()
            .collect()
    }

    fn stage_mrd(&self) -> Result<StageOutput> {
        let mut out = StageOutput::default();
        self.backend.require_relevance()?;
        let template = self.template_used()?;
        let categories = self.categories()?;
        let parts = [
            Part::TaskDescription,
            Part::Demonstrations,
            Part::Context,
            Part::Question,
            Part::LastInputToken,
        ];
        let mut csv = String::from("category,direction,part,mean_mrd,n,undefined\n");
        for category in [Category::Balanced, Category::EnSuperior] {
            let ids: Vec<&str> = categories
                .iter()
                .filter(|c| c.category == category)
                .map(|c| c.sample_id.as_str())
                .collect();
            if ids.is_empty() {
                out.note(format!(
                    "no {} samples; MRD skipped for them",
                    category.name()
                ));
                continue;
            }
            for d in self.analysis_directions() {
                let per_sample = parallel_map(
                    &ids,
                    self.workers,
                    |id| -> Result<Vec<(Part, Option<usize>)>> {
                        let prompt = self.prompt(template, self.sample(id)?, &d)?;
                        let artifact = format!("relevance.{d}.{}", &sha256_hex(&prompt.text)[..12]);
                        let m = self.traces.relevance(
                            self.backend,
                            id,
                            &artifact,
                            &prompt.text,
                            RelevanceTarget::FirstAnswerToken,
                        )?;
                        let spans = self.token_spans(&prompt)?;
                        if spans.num_tokens != m.num_tokens() {
                            return Err(Error::Trace(format!(
                                "relevance for `{id}` covers {} tokens, tokenizer gives {}",
                                m.num_tokens(),
                                spans.num_tokens
                            )));
                        }
                        let mut row = Vec::new();
                        for part in parts {
                            let tokens = spans.tokens(part);
                            if tokens.is_empty() {
                                continue;
                            }
                            match part_mrd(
                                &m,
                                &tokens,
                                self.config.mrd_threshold,
                                self.config.normalization,
                            ) {
                                Ok(p) => row.push((part, Some(p.mrd))),
                                Err(Error::UndefinedMrd) => row.push((part, None)),
                                Err(e) => return Err(e),
                            }
                        }
                        Ok(row)
                    },
                );
                let mut by_part: BTreeMap<Part, (Vec<f64>, usize)> = BTreeMap::new();
                for row in per_sample {
                    for (part, mrd) in row? {
                        let entry = by_part.entry(part).or_default();
                        match mrd {
                            Some(m) => entry.0.push(m as f64),
                            None => entry.1 += 1,
                        }
                    }
                }
                for (part, (values, undefined)) in by_part {
                    let mean = stable_mean(values.iter().copied());
                    writeln!(
                        csv,
                        "{},{d},{part},{},{},{undefined}",
                        category.name(),
                        opt(mean),
                        values.len()
                    )
                    .expect("string write");
                }
            }
        }
        out.file(MRD_FILE, csv);
        Ok(out)
    }

    /// Pooled vectors per part and layer for one prompt.
    fn pooled(
        &self,
        id: &str,
        template: TemplateId,
        d: &Direction,
    ) -> Result<BTreeMap<Part, Vec<Vec<f64>>>> {
        let prompt = self.prompt(template, self.sample(id)?, d)?;
        let artifact = format!("hidden.{d}.{}", &sha256_hex(&prompt.text)[..12]);
        let trace = self
            .traces
            .hidden(self.backend, id, &artifact, &prompt.text)?;
        let spans = self.token_spans(&prompt)?;
        if spans.num_tokens != trace.num_tokens() {
            return Err(Error::Trace(format!(
                "hidden states for `{id}` cover {} tokens, tokenizer gives {}",
                trace.num_tokens(),
                spans.num_tokens
            )));
        }
        let mut out = BTreeMap::new();
        for part in SIM_PARTS {
            let tokens = spans.tokens(part);
            if tokens.is_empty() {
                continue;
            }
            let layers = (0..trace.num_layers())
                .map(|l| pool_part(&trace, l, &tokens, self.config.pooling))
                .collect::<Result<Vec<_>>>()?;
            out.insert(part, layers);
        }
        Ok(out)
    }

    fn stage_hidden_sim(&self) -> Result<StageOutput> {
        let mut out = StageOutput::default();
        self.backend.require_hidden()?;
        let template = self.template_used()?;
        let categories = self.categories()?;
        let en_en = Direction::en_en();
        if !self.directions.contains(&en_en) {
            return Err(Error::Config(
                "hidden-state similarity needs the en-en direction".into(),
            ));
        }
        let foreign: Vec<Direction> = self
            .directions
            .iter()
            .filter(|d| d.kind() == DirectionKind::EnX)
            .cloned()
            .collect();
        let mut stats = String::from(
            "category,part,lang,peak_rel_depth,peak_value,late_decline,plateau_start_rel_depth\n",
        );
        let mut series_csv: BTreeMap<(Part, String), String> = BTreeMap::new();
        for category in [Category::Balanced, Category::EnSuperior] {
            let ids: Vec<&str> = categories
                .iter()
                .filter(|c| c.category == category)
                .map(|c| c.sample_id.as_str())
                .collect();
            if ids.len() < 2 {
                out.note(format!(
                    "fewer than two {} samples; similarity skipped for them",
                    category.name()
                ));
                continue;
            }
            let english = parallel_map(&ids, self.workers, |id| self.pooled(id, template, &en_en))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            for d in &foreign {
                let lang = d.question_lang.to_string();
                let other = parallel_map(&ids, self.workers, |id| self.pooled(id, template, d))
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
                for part in SIM_PARTS {
                    let (Some(e0), Some(_)) = (english[0].get(&part), other[0].get(&part)) else {
                        continue;
                    };
                    let layers = e0.len();
                    let mut series = Vec::with_capacity(layers);
                    for l in 0..layers {
                        let es: Vec<Vec<f64>> =
                            english.iter().map(|p| p[&part][l].clone()).collect();
                        let xs: Vec<Vec<f64>> = other.iter().map(|p| p[&part][l].clone()).collect();
                        match similarity(&es, &xs) {
                            Ok(s) => series.push(s),
                            Err(e) => {
                                out.note(format!(
                                    "{} {part} {lang} layer {l}: {e}",
                                    category.name()
                                ));
                                break;
                            }
                        }
                    }
                    if series.len() != layers {
                        continue;
                    }
                    let csv = series_csv
                        .entry((part, lang.clone()))
                        .or_insert_with(|| String::from("category,layer,rel_depth,s\n"));
                    for (l, s) in series.iter().enumerate() {
                        let depth = l as f64 / (layers - 1) as f64;
                        writeln!(csv, "{},{l},{depth},{s}", category.name()).expect("string write");
                    }
                    match curve_stats(&series, self.config.curve) {
                        Ok(c) => writeln!(
                            stats,
                            "{},{part},{lang},{},{},{},{}",
                            category.name(),
                            c.peak_rel_depth,
                            c.peak_value,
                            c.late_decline,
                            opt(c.plateau_start_rel_depth)
                        )
                        .expect("string write"),
                        Err(e) => out.note(format!("{} {part} {lang}: {e}", category.name())),
                    }
                }
            }
        }
        for ((part, lang), csv) in series_csv {
            out.file(&format!("mechanism/sim_{part}_{lang}.csv"), csv);
        }
        out.file(CURVE_STATS_FILE, stats);
        Ok(out)
    }

    fn execute(&self, stage: Stage) -> Result<StageOutput> {
        match stage {
            Stage::Evaluate => self.stage_evaluate(),
            Stage::Errors => self.stage_errors(),
            Stage::Oracle => self.stage_oracle(),
            Stage::Mrd => self.stage_mrd(),
            Stage::HiddenSim => self.stage_hidden_sim(),
        }
    }
}

fn error_report_csv(reports: &[ErrorReport]) -> String {
    let mut csv = String::from(
        "direction,n,language,generation,blank,gibberish,refusal,content,correct,judge_unavailable,denominator\n",
    );
    for r in reports {
        let denominator = match r.denominator {
            crate::error_ablation::Denominator::All => "all",
            crate::error_ablation::Denominator::WrongOnly => "wrong_only",
        };
        writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{},{},{denominator}",
            r.direction,
            r.n,
            r.language_rate,
            r.generation_rate,
            r.blank_rate,
            r.gibberish_rate,
            r.refusal_rate,
            r.content_rate,
            r.correct_rate,
            r.judge_unavailable
        )
        .expect("string write");
    }
    csv
}

/// en-en, then en-x and x-x for every other language.
pub fn all_directions(languages: &[LangCode]) -> Vec<Direction> {
    let mut out = vec![Direction::en_en()];
    for l in languages.iter().filter(|l| !l.is_english()) {
        out.push(Direction::en_x(l));
    }
    for l in languages.iter().filter(|l| !l.is_english()) {
        out.push(Direction::x_x(l));
    }
    out
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Run every enabled stage with the backend the config names.
pub fn run(config: &RunConfig) -> Result<RunManifest> {
    let backend = build_backend(config)?;
    run_with_backend(config, backend.as_ref())
}

/// Run every enabled stage against `backend`.
pub fn run_with_backend(config: &RunConfig, backend: &dyn Backend) -> Result<RunManifest> {
    let started = unix_now();
    fs::create_dir_all(&config.run_dir).map_err(|e| Error::io(&config.run_dir, e))?;
    let runner = Runner::new(config, backend)?;
    let previous = RunManifest::load(&config.run_dir)?;
    write_atomic(
        &config.run_dir.join("config.snapshot"),
        config.snapshot().as_bytes(),
    )?;
    let backend_json =
        serde_json::to_string(backend.descriptor()).map_err(|e| Error::json("descriptor", e))?;
    let corpus_digest = runner.corpus.digest();

    let mut stages: BTreeMap<Stage, StageRecord> = BTreeMap::new();
    for stage in Stage::ALL {
        let prev = previous.as_ref().and_then(|m| m.stages.get(&stage));
        if !config.stages.contains(&stage) {
            // Keep earlier results that downstream stages may still read.
            if let Some(p) =
                prev.filter(|p| p.is_completed() && outputs_intact(&config.run_dir, &p.outputs))
            {
                stages.insert(stage, p.clone());
            }
            continue;
        }
        let mut upstream_text = String::new();
        let mut blocked = None;
        for up in stage.upstream() {
            match stages.get(up) {
                Some(r) if r.is_completed() => {
                    for (f, d) in &r.outputs {
                        writeln!(upstream_text, "{f}={d}").expect("string write");
                    }
                }
                _ => blocked = Some(*up),
            }
        }
        let input_digest = sha256_hex(format!(
            "{stage}\n{}{corpus_digest}\n{backend_json}\n{upstream_text}",
            config.stage_snapshot(stage)
        ));
        if let Some(up) = blocked {
            stages.insert(
                stage,
                StageRecord {
                    status: StageStatus::Skipped {
                        reason: format!("upstream stage {up} did not complete"),
                    },
                    input_digest,
                    outputs: BTreeMap::new(),
                    reused: false,
                    notes: Vec::new(),
                },
            );
            continue;
        }
        if let Some(p) = prev {
            if p.is_completed()
                && p.input_digest == input_digest
                && outputs_intact(&config.run_dir, &p.outputs)
            {
                info!("stage {stage}: inputs unchanged, keeping previous outputs");
                let mut kept = p.clone();
                kept.reused = true;
                stages.insert(stage, kept);
                continue;
            }
        }
        info!("stage {stage}: running");
        let record = match runner.execute(stage) {
            Ok(output) => {
                let mut outputs = BTreeMap::new();
                let mut failure = None;
                for (rel, data) in &output.files {
                    if let Err(e) = write_atomic(&config.run_dir.join(rel), data) {
                        failure = Some(e.to_string());
                        break;
                    }
                    outputs.insert(rel.clone(), sha256_hex(data));
                }
                StageRecord {
                    status: match failure {
                        None => StageStatus::Completed,
                        Some(error) => StageStatus::Failed { error },
                    },
                    input_digest,
                    outputs,
                    reused: false,
                    notes: output.notes,
                }
            }
            Err(e) => {
                warn!("stage {stage} failed: {e}");
                StageRecord {
                    status: StageStatus::Failed {
                        error: e.to_string(),
                    },
                    input_digest,
                    outputs: BTreeMap::new(),
                    reused: false,
                    notes: Vec::new(),
                }
            }
        };
        stages.insert(stage, record);
    }

    let files = stages
        .values()
        .flat_map(|r| r.outputs.iter().map(|(k, v)| (k.clone(), v.clone())))
        .collect();
    let manifest = RunManifest {
        config_snapshot: config.snapshot(),
        corpus_digest,
        backend: Some(backend.descriptor().clone()),
        stages,
        files,
        started_unix: started,
        finished_unix: unix_now(),
    };
    manifest.save(&config.run_dir)?;
    Ok(manifest)
}

/// Load and validate a corpus, returning a one-line description.
pub fn validate_corpus(dir: &Path, name: &str, languages: Option<&[LangCode]>) -> Result<String> {
    let corpus = ParallelCorpus::load(dir, name, languages)?;
    corpus.validate()?;
    let langs: Vec<&str> = corpus.languages.iter().map(LangCode::as_str).collect();
    Ok(format!(
        "{}: {} samples in {} languages ({}), digest {}",
        corpus.name,
        corpus.len(),
        langs.len(),
        langs.join(", "),
        corpus.digest()
    ))
}
