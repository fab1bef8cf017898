// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flat `key = value` run configuration.
//!
//! One setting per line, `#` starts a comment, lists are comma-separated.
//! Relative paths in a config file resolve against the file's directory;
//! relative paths given as overrides resolve against the working directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Direction, LangCode};
use crate::error::{Error, Result};
use crate::error_ablation::Denominator;
use crate::mechanism::{CurveConfig, Normalization, Pooling};
use crate::oracle::{Granularity, OracleMode};
use crate::prompting::TemplateId;

/// Every accepted key with its default (`None` means required).
pub const KEYS: &[(&str, Option<&str>)] = &[
    ("corpus.path", None),
    ("corpus.name", None),
    ("corpus.languages", Some("")),
    ("directions", Some("all")),
    ("shots", Some("2")),
    ("template", Some("auto")),
    ("template.auto_slice", Some("50")),
    ("seed", Some("0")),
    ("backend.kind", Some("mock")),
    ("backend.model_path_or_endpoint", Some("")),
    ("backend.max_new_tokens", Some("64")),
    ("backend.timeout_secs", Some("120")),
    ("judge.kind", Some("offline")),
    ("judge.endpoint", Some("")),
    ("judge.model", Some("judge")),
    ("judge.auth_env", Some("")),
    ("judge.max_retries", Some("3")),
    ("judge.backoff_ms", Some("500")),
    ("judge.concurrency", Some("4")),
    ("judge.constant_reply", Some("0")),
    ("judge.timeout_secs", Some("60")),
    ("judge.cache_dir", Some("")),
    ("judge2.kind", Some("none")),
    ("judge2.endpoint", Some("")),
    ("judge2.model", Some("judge2")),
    ("judge2.auth_env", Some("")),
    ("judge2.constant_reply", Some("0")),
    ("detector.kind", Some("lingua")),
    ("thresholds.mrd", Some("0.95")),
    ("thresholds.balanced", Some("0.5")),
    ("thresholds.margin", Some("0.5")),
    ("thresholds.correct_f1", Some("0.5")),
    ("errors.denominator", Some("all")),
    ("categorize.include_xx", Some("false")),
    ("oracle.granularity", Some("sentence")),
    ("oracle.span_window", Some("32")),
    ("oracle.mode", Some("both")),
    ("oracle.directions", Some("")),
    ("mechanism.pooling", Some("mean")),
    ("mechanism.normalization", Some("abs")),
    ("mechanism.tail_fraction", Some("0.2")),
    ("mechanism.plateau_band", Some("0.05")),
    ("stages", Some("evaluate,errors,oracle,mrd,hidden_sim")),
    ("run.dir", Some("run")),
    ("traces.dir", Some("")),
];

const PATH_KEYS: &[&str] = &[
    "corpus.path",
    "backend.model_path_or_endpoint",
    "judge.cache_dir",
    "run.dir",
    "traces.dir",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Evaluate,
    Errors,
    Oracle,
    Mrd,
    HiddenSim,
}

impl Stage {
    pub const ALL: [Stage; 5] = [
        Stage::Evaluate,
        Stage::Errors,
        Stage::Oracle,
        Stage::Mrd,
        Stage::HiddenSim,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Evaluate => "evaluate",
            Stage::Errors => "errors",
            Stage::Oracle => "oracle",
            Stage::Mrd => "mrd",
            Stage::HiddenSim => "hidden_sim",
        }
    }

    /// Stages whose outputs this stage reads.
    pub fn upstream(&self) -> &'static [Stage] {
        match self {
            Stage::Evaluate | Stage::Oracle => &[],
            Stage::Errors | Stage::Mrd | Stage::HiddenSim => &[Stage::Evaluate],
        }
    }

    /// Config key prefixes that affect this stage's outputs.
    pub fn key_prefixes(&self) -> &'static [&'static str] {
        match self {
            Stage::Evaluate => &[
                "corpus.",
                "directions",
                "shots",
                "template",
                "seed",
                "backend.",
                "thresholds.balanced",
                "thresholds.margin",
                "categorize.",
            ],
            Stage::Errors => &["judge", "detector.", "thresholds.correct_f1", "errors."],
            Stage::Oracle => &[
                "corpus.",
                "directions",
                "shots",
                "template",
                "seed",
                "backend.",
                "oracle.",
            ],
            Stage::Mrd => &["backend.", "thresholds.mrd", "mechanism.normalization"],
            Stage::HiddenSim => &[
                "backend.",
                "mechanism.pooling",
                "mechanism.tail_fraction",
                "mechanism.plateau_band",
            ],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateChoice {
    Fixed(TemplateId),
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    Http,
    Constant,
    Offline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub kind: JudgeKind,
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: Option<String>,
    pub constant_reply: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Lingua,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus_path: PathBuf,
    pub corpus_name: String,
    pub languages: Option<Vec<LangCode>>,
    /// `None` means every direction the corpus supports.
    pub directions: Option<Vec<Direction>>,
    pub shots: usize,
    pub template: TemplateChoice,
    pub auto_slice: usize,
    pub seed: u64,
    pub backend_kind: BackendKind,
    pub backend_target: String,
    pub max_new_tokens: usize,
    pub backend_timeout_secs: u64,
    pub judge: JudgeConfig,
    pub judge2: Option<JudgeConfig>,
    pub judge_max_retries: usize,
    pub judge_backoff_ms: u64,
    pub judge_concurrency: usize,
    pub judge_timeout_secs: u64,
    pub judge_cache_dir: PathBuf,
    pub detector: DetectorKind,
    pub mrd_threshold: f64,
    pub balanced_threshold: f64,
    pub margin_threshold: f64,
    pub correct_f1: f64,
    pub denominator: Denominator,
    pub include_xx: bool,
    pub granularity: Granularity,
    pub oracle_modes: Vec<OracleMode>,
    pub oracle_directions: Option<Vec<Direction>>,
    pub pooling: Pooling,
    pub normalization: Normalization,
    pub curve: CurveConfig,
    pub stages: BTreeSet<Stage>,
    pub run_dir: PathBuf,
    pub traces_dir: PathBuf,
    /// Effective value of every key, defaults included.
    pub values: BTreeMap<String, String>,
}

fn is_known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

/// Parse `key = value` lines.
pub fn parse_pairs(raw: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
}

fn fraction(key: &str, v: &str) -> Result<f64> {
    let x: f64 = parse(key, v)?;
    if x > 0.0 && x <= 1.0 {
        Ok(x)
    } else {
        Err(Error::Config(format!("`{key}` must be in (0, 1], got {v}")))
    }
}

fn list(v: &str) -> Vec<&str> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

fn directions(key: &str, v: &str) -> Result<Option<Vec<Direction>>> {
    if v.is_empty() || v == "all" {
        return Ok(None);
    }
    let ds = list(v)
        .into_iter()
        .map(Direction::from_str)
        .collect::<Result<Vec<_>>>()?;
    if ds.is_empty() {
        return Err(Error::Config(format!("`{key}` lists no directions")));
    }
    Ok(Some(ds))
}

fn judge_config(values: &BTreeMap<String, String>, prefix: &str) -> Result<Option<JudgeConfig>> {
    let get = |k: &str| values[&format!("{prefix}.{k}")].clone();
    let kind = match get("kind").as_str() {
        "http" => JudgeKind::Http,
        "constant" => JudgeKind::Constant,
        "offline" => JudgeKind::Offline,
        "none" if prefix == "judge2" => return Ok(None),
        other => {
            return Err(Error::Config(format!(
                "`{prefix}.kind` has invalid value `{other}`"
            )))
        }
    };
    if kind == JudgeKind::Http && get("endpoint").is_empty() {
        return Err(Error::Config(format!(
            "`{prefix}.endpoint` is required for an http judge"
        )));
    }
    let auth = get("auth_env");
    Ok(Some(JudgeConfig {
        kind,
        endpoint: get("endpoint"),
        model: get("model"),
        auth_env: (!auth.is_empty()).then_some(auth),
        constant_reply: get("constant_reply"),
    }))
}

impl RunConfig {
    /// Load a config file and apply `overrides` on top.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut pairs: Vec<(String, String)> = parse_pairs(&raw)?
            .into_iter()
            .map(|(k, v)| {
                if PATH_KEYS.contains(&k.as_str())
                    && !v.is_empty()
                    && Path::new(&v).is_relative()
                    && !v.contains("://")
                {
                    let joined = base.join(&v).display().to_string();
                    (k, joined)
                } else {
                    (k, v)
                }
            })
            .collect();
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    /// Build from explicit pairs; later pairs win.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (k, v) in pairs {
            if !is_known(k) {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
            values.insert(k.clone(), v.clone());
        }
        for (k, default) in KEYS {
            if !values.contains_key(*k) {
                match default {
                    Some(d) => {
                        values.insert(k.to_string(), d.to_string());
                    }
                    None => return Err(Error::Config(format!("missing required key `{k}`"))),
                }
            }
        }
        let v = |k: &str| values[k].as_str();

        let languages = match list(v("corpus.languages")) {
            l if l.is_empty() => None,
            l => Some(
                l.into_iter()
                    .map(LangCode::new)
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let shots: usize = parse("shots", v("shots"))?;
        if shots != 0 && shots != 2 {
            return Err(Error::Config(format!(
                "`shots` must be 0 or 2, got {shots}"
            )));
        }
        let template =
            match v("template") {
                "auto" => TemplateChoice::Auto,
                other => TemplateChoice::Fixed(other.parse().map_err(|_| {
                    Error::Config(format!("`template` has invalid value `{other}`"))
                })?),
            };
        let backend_kind = match v("backend.kind") {
            "mock" => BackendKind::Mock,
            "http" => BackendKind::Http,
            other => {
                return Err(Error::Config(format!(
                    "`backend.kind` has invalid value `{other}`"
                )))
            }
        };
        if backend_kind == BackendKind::Http && v("backend.model_path_or_endpoint").is_empty() {
            return Err(Error::Config(
                "`backend.model_path_or_endpoint` is required for an http backend".into(),
            ));
        }
        let detector = match v("detector.kind") {
            "lingua" => DetectorKind::Lingua,
            "none" => DetectorKind::None,
            other => {
                return Err(Error::Config(format!(
                    "`detector.kind` has invalid value `{other}`"
                )))
            }
        };
        let denominator = match v("errors.denominator") {
            "all" => Denominator::All,
            "wrong_only" => Denominator::WrongOnly,
            other => {
                return Err(Error::Config(format!(
                    "`errors.denominator` has invalid value `{other}`"
                )))
            }
        };
        let granularity = match v("oracle.granularity") {
            "sentence" => Granularity::Sentence,
            "span" => {
                let window: usize = parse("oracle.span_window", v("oracle.span_window"))?;
                if window == 0 {
                    return Err(Error::Config(
                        "`oracle.span_window` must be positive".into(),
                    ));
                }
                Granularity::Span { window }
            }
            other => {
                return Err(Error::Config(format!(
                    "`oracle.granularity` has invalid value `{other}`"
                )))
            }
        };
        let oracle_modes = match v("oracle.mode") {
            "step" => vec![OracleMode::Step],
            "sequence" => vec![OracleMode::Sequence],
            "both" => vec![OracleMode::Step, OracleMode::Sequence],
            other => {
                return Err(Error::Config(format!(
                    "`oracle.mode` has invalid value `{other}`"
                )))
            }
        };
        let pooling = match v("mechanism.pooling") {
            "mean" => Pooling::Mean,
            "max" => Pooling::Max,
            "first" => Pooling::First,
            other => {
                return Err(Error::Config(format!(
                    "`mechanism.pooling` has invalid value `{other}`"
                )))
            }
        };
        let normalization = match v("mechanism.normalization") {
            "abs" => Normalization::Abs,
            "per_layer" => Normalization::PerLayer,
            other => {
                return Err(Error::Config(format!(
                    "`mechanism.normalization` has invalid value `{other}`"
                )))
            }
        };
        let stages = list(v("stages"))
            .into_iter()
            .map(Stage::from_str)
            .collect::<Result<BTreeSet<_>>>()?;
        let run_dir = PathBuf::from(v("run.dir"));
        let traces_dir = match v("traces.dir") {
            "" => run_dir.join("traces"),
            t => PathBuf::from(t),
        };
        let judge_cache_dir = match v("judge.cache_dir") {
            "" => run_dir.join("judge"),
            t => PathBuf::from(t),
        };
        let include_xx = match v("categorize.include_xx") {
            "true" => true,
            "false" => false,
            other => {
                return Err(Error::Config(format!(
                    "`categorize.include_xx` has invalid value `{other}`"
                )))
            }
        };
        let judge_concurrency: usize = parse("judge.concurrency", v("judge.concurrency"))?;
        let auto_slice: usize = parse("template.auto_slice", v("template.auto_slice"))?;
        if judge_concurrency == 0 || auto_slice == 0 {
            return Err(Error::Config(
                "`judge.concurrency` and `template.auto_slice` must be positive".into(),
            ));
        }

        Ok(RunConfig {
            corpus_path: PathBuf::from(v("corpus.path")),
            corpus_name: v("corpus.name").to_string(),
            languages,
            directions: directions("directions", v("directions"))?,
            shots,
            template,
            auto_slice,
            seed: parse("seed", v("seed"))?,
            backend_kind,
            backend_target: v("backend.model_path_or_endpoint").to_string(),
            max_new_tokens: parse("backend.max_new_tokens", v("backend.max_new_tokens"))?,
            backend_timeout_secs: parse("backend.timeout_secs", v("backend.timeout_secs"))?,
            judge: judge_config(&values, "judge")?.expect("primary judge"),
            judge2: judge_config(&values, "judge2")?,
            judge_max_retries: parse("judge.max_retries", v("judge.max_retries"))?,
            judge_backoff_ms: parse("judge.backoff_ms", v("judge.backoff_ms"))?,
            judge_concurrency,
            judge_timeout_secs: parse("judge.timeout_secs", v("judge.timeout_secs"))?,
            judge_cache_dir,
            detector,
            mrd_threshold: fraction("thresholds.mrd", v("thresholds.mrd"))?,
            balanced_threshold: fraction("thresholds.balanced", v("thresholds.balanced"))?,
            margin_threshold: fraction("thresholds.margin", v("thresholds.margin"))?,
            correct_f1: fraction("thresholds.correct_f1", v("thresholds.correct_f1"))?,
            denominator,
            include_xx,
            granularity,
            oracle_modes,
            oracle_directions: directions("oracle.directions", v("oracle.directions"))?,
            pooling,
            normalization,
            curve: CurveConfig {
                tail_fraction: fraction("mechanism.tail_fraction", v("mechanism.tail_fraction"))?,
                plateau_band: fraction("mechanism.plateau_band", v("mechanism.plateau_band"))?,
            },
            stages,
            run_dir,
            traces_dir,
            values,
        })
    }

    /// Canonical `key = value` text of every effective setting.
    pub fn snapshot(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Canonical text of the settings that affect `stage`.
    pub fn stage_snapshot(&self, stage: Stage) -> String {
        self.values
            .iter()
            .filter(|(k, _)| stage.key_prefixes().iter().any(|p| k.starts_with(p)))
            .filter(|(k, _)| {
                !PATH_KEYS.contains(&k.as_str()) || *k == "backend.model_path_or_endpoint"
            })
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(p: &[(&str, &str)]) -> Vec<(String, String)> {
        p.iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn defaults_and_required_keys() {
        assert!(RunConfig::from_pairs(&pairs(&[("corpus.path", "c")])).is_err());
        let c = RunConfig::from_pairs(&pairs(&[("corpus.path", "c"), ("corpus.name", "xquad")]))
            .unwrap();
        assert_eq!(c.shots, 2);
        assert_eq!(c.template, TemplateChoice::Auto);
        assert_eq!(c.mrd_threshold, 0.95);
        assert_eq!(c.stages.len(), 5);
        assert_eq!(c.traces_dir, PathBuf::from("run/traces"));
        assert!(c.snapshot().contains("thresholds.mrd = 0.95\n"));
    }

    #[test]
    fn rejects_bad_values() {
        let base = [("corpus.path", "c"), ("corpus.name", "x")];
        for bad in [
            ("thresholds.mrd", "1.5"),
            ("thresholds.balanced", "0"),
            ("shots", "3"),
            ("stages", "evaluate,train"),
            ("directions", "de-fr"),
            ("nonsense", "1"),
            ("backend.kind", "http"),
        ] {
            let mut p = pairs(&base);
            p.push((bad.0.into(), bad.1.into()));
            assert!(RunConfig::from_pairs(&p).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn file_with_comments_and_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        fs::write(&path, "# demo\ncorpus.path = data\ncorpus.name = xquad # inline\n\ndirections = en-en, en-de\n").unwrap();
        let c = RunConfig::load(&path, &pairs(&[("shots", "0")])).unwrap();
        assert_eq!(c.corpus_path, dir.path().join("data"));
        assert_eq!(c.shots, 0);
        assert_eq!(c.directions.unwrap().len(), 2);
    }

    #[test]
    fn stage_snapshot_ignores_unrelated_keys() {
        let a =
            RunConfig::from_pairs(&pairs(&[("corpus.path", "c"), ("corpus.name", "x")])).unwrap();
        let b = RunConfig::from_pairs(&pairs(&[
            ("corpus.path", "c"),
            ("corpus.name", "x"),
            ("judge.model", "other"),
        ]))
        .unwrap();
        assert_eq!(
            a.stage_snapshot(Stage::Evaluate),
            b.stage_snapshot(Stage::Evaluate)
        );
        assert_ne!(
            a.stage_snapshot(Stage::Errors),
            b.stage_snapshot(Stage::Errors)
        );
    }
}
