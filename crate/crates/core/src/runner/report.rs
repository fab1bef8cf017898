// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tables and figures rendered from a run directory into `report/`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::svg::{bar_chart, line_chart, LineSeries};
use super::{
    CURVE_STATS_FILE, ERROR_REPORT_FILE, MRD_FILE, ORACLE_ACCURACY_FILE, RATIOS_FILE, SUMMARY_FILE,
};
use crate::digest::write_atomic;
use crate::error::{Error, Result};

pub const REPORT_DIR: &str = "report";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportOutcome {
    pub files: Vec<PathBuf>,
    pub notes: Vec<String>,
}

/// Two-decimal ratio as shown in tables; `None` when the denominator is 0.
pub fn format_ratio(numerator: f64, denominator: f64) -> Option<String> {
    (denominator != 0.0).then(|| format!("{:.2}", numerator / denominator))
}

type Row = BTreeMap<String, String>;

fn read_csv(path: &Path) -> Result<Option<Vec<Row>>> {
    let raw = match fs::read_to_string(path) {
        Ok(r) => r,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut lines = raw.lines();
    let Some(head) = lines.next() else {
        return Ok(Some(Vec::new()));
    };
    let cols: Vec<&str> = head.split(',').collect();
    Ok(Some(
        lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                cols.iter()
                    .map(|c| c.to_string())
                    .zip(l.split(',').map(str::to_string))
                    .collect()
            })
            .collect(),
    ))
}

fn num(row: &Row, col: &str) -> Option<f64> {
    row.get(col).and_then(|v| v.parse().ok())
}

fn fmt2(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

fn mean(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn is_en_x(direction: &str) -> bool {
    direction.starts_with("en-") && direction != "en-en"
}

struct Report {
    dir: PathBuf,
    files: Vec<PathBuf>,
    notes: Vec<String>,
}

impl Report {
    fn write(&mut self, name: &str, data: &str) -> Result<()> {
        let path = self.dir.join(name);
        write_atomic(&path, data.as_bytes())?;
        self.files.push(path);
        Ok(())
    }

    fn missing(&mut self, what: &str, file: &str) {
        self.notes.push(format!("{what} skipped: {file} not found"));
    }
}

/// Render every table and figure whose inputs exist; missing inputs are
/// listed in `report/notes.txt`.
pub fn render_report(run_dir: &Path) -> Result<ReportOutcome> {
    let mut r = Report {
        dir: run_dir.join(REPORT_DIR),
        files: Vec::new(),
        notes: Vec::new(),
    };
    fs::create_dir_all(&r.dir).map_err(|e| Error::io(&r.dir, e))?;

    let summary = read_csv(&run_dir.join(SUMMARY_FILE))?;
    let ratios = read_csv(&run_dir.join(RATIOS_FILE))?;
    let errors = read_csv(&run_dir.join(ERROR_REPORT_FILE))?;

    match &summary {
        Some(rows) => {
            let mut csv = String::from("direction,n,f1,em\n");
            for row in rows {
                writeln!(
                    csv,
                    "{},{},{},{}",
                    row["direction"],
                    row["n"],
                    fmt2(num(row, "mean_f1")),
                    fmt2(num(row, "mean_em"))
                )
                .expect("string write");
            }
            r.write("directions.csv", &csv)?;
        }
        None => r.missing("direction table", SUMMARY_FILE),
    }

    match ratios.as_ref().and_then(|rows| rows.first()) {
        Some(row) => {
            let en_en = num(row, "en_en").unwrap_or(0.0);
            let ratio = |col: &str| {
                num(row, col)
                    .and_then(|m| format_ratio(m, en_en))
                    .unwrap_or_default()
            };
            let (mut lang, mut gen, mut en_gen) = (Vec::new(), Vec::new(), None);
            for e in errors.iter().flatten() {
                if is_en_x(&e["direction"]) {
                    lang.extend(num(e, "language"));
                    gen.extend(num(e, "generation"));
                } else if e["direction"] == "en-en" {
                    en_gen = num(e, "generation");
                }
            }
            if errors.is_none() {
                r.missing("error columns of the main table", ERROR_REPORT_FILE);
            }
            let csv = format!(
                "en_en,mean_en_x,mean_x_x,en_x_over_en_en,x_x_over_en_en,mean_language_error,mean_generation_error,en_en_generation_error\n{},{},{},{},{},{},{},{}\n",
                fmt2(Some(en_en)),
                fmt2(num(row, "mean_en_x")),
                fmt2(num(row, "mean_x_x")),
                ratio("mean_en_x"),
                ratio("mean_x_x"),
                fmt2(mean(&lang)),
                fmt2(mean(&gen)),
                fmt2(en_gen),
            );
            r.write("table1.csv", &csv)?;
        }
        None => r.missing("main table", RATIOS_FILE),
    }

    match &errors {
        Some(rows) => {
            let cols = [
                "language",
                "generation",
                "blank",
                "gibberish",
                "refusal",
                "content",
                "correct",
            ];
            let mut csv = format!("direction,n,{},judge_unavailable\n", cols.join(","));
            for row in rows {
                let vals: Vec<String> = cols.iter().map(|c| fmt2(num(row, c))).collect();
                writeln!(
                    csv,
                    "{},{},{},{}",
                    row["direction"],
                    row["n"],
                    vals.join(","),
                    row["judge_unavailable"]
                )
                .expect("string write");
            }
            r.write("errors.csv", &csv)?;
            r.notes.push(
                "content and correct are split by per-sample F1 against the correctness threshold; \
                 this split is an operational choice of this toolkit"
                    .into(),
            );
        }
        None => r.missing("error table", ERROR_REPORT_FILE),
    }

    match read_csv(&run_dir.join(ORACLE_ACCURACY_FILE))? {
        Some(rows) => {
            let mut csv = String::from("direction,mode,granularity,n,accuracy\n");
            for row in &rows {
                writeln!(
                    csv,
                    "{},{},{},{},{}",
                    row["direction"],
                    row["mode"],
                    row["granularity"],
                    row["n"],
                    fmt2(num(row, "accuracy"))
                )
                .expect("string write");
            }
            r.write("oracle.csv", &csv)?;
        }
        None => r.missing("oracle table", ORACLE_ACCURACY_FILE),
    }

    match read_csv(&run_dir.join(MRD_FILE))? {
        Some(rows) => mrd_outputs(&mut r, &rows)?,
        None => r.missing("MRD table and figures", MRD_FILE),
    }

    similarity_figures(&mut r, run_dir)?;

    let mut notes = String::new();
    for n in &r.notes {
        writeln!(notes, "{n}").expect("string write");
    }
    r.write("notes.txt", &notes)?;
    Ok(ReportOutcome {
        files: r.files,
        notes: r.notes,
    })
}

/// Directions, parts and (direction, part) → mean MRD of one category.
type MrdGrid = (Vec<String>, Vec<String>, BTreeMap<(String, String), f64>);

fn mrd_outputs(r: &mut Report, rows: &[Row]) -> Result<()> {
    let mut csv = String::from("category,direction,part,mean_mrd,n\n");
    let mut by_cat: BTreeMap<&str, MrdGrid> = BTreeMap::new();
    for row in rows {
        writeln!(
            csv,
            "{},{},{},{},{}",
            row["category"],
            row["direction"],
            row["part"],
            fmt2(num(row, "mean_mrd")),
            row["n"]
        )
        .expect("string write");
        let entry = by_cat.entry(row["category"].as_str()).or_default();
        if !entry.0.contains(&row["direction"]) {
            entry.0.push(row["direction"].clone());
        }
        if !entry.1.contains(&row["part"]) {
            entry.1.push(row["part"].clone());
        }
        if let Some(v) = num(row, "mean_mrd") {
            entry
                .2
                .insert((row["direction"].clone(), row["part"].clone()), v);
        }
    }
    r.write("mrd.csv", &csv)?;
    r.notes
        .push("relevance is rectified by absolute value before the MRD percentile".into());
    for (cat, (dirs, parts, values)) in by_cat {
        let grid: Vec<Vec<Option<f64>>> = dirs
            .iter()
            .map(|d| {
                parts
                    .iter()
                    .map(|p| values.get(&(d.clone(), p.clone())).copied())
                    .collect()
            })
            .collect();
        let svg = bar_chart(
            &format!("Mean part MRD ({cat})"),
            "MRD (layer)",
            &dirs,
            &parts,
            &grid,
        );
        r.write(&format!("mrd_{cat}.svg"), &svg)?;
    }
    Ok(())
}

fn similarity_figures(r: &mut Report, run_dir: &Path) -> Result<()> {
    let dir = run_dir.join("mechanism");
    let mut files: Vec<(String, String, PathBuf)> = Vec::new();
    if let Ok(entries) = fs::read_dir(&dir) {
        for e in entries.flatten() {
            let name = e.file_name().to_string_lossy().to_string();
            let Some(stem) = name
                .strip_prefix("sim_")
                .and_then(|s| s.strip_suffix(".csv"))
            else {
                continue;
            };
            let Some((part, lang)) = stem.rsplit_once('_') else {
                continue;
            };
            files.push((part.to_string(), lang.to_string(), e.path()));
        }
    }
    if files.is_empty() {
        r.missing("similarity figures", "mechanism/sim_<part>_<lang>.csv");
        return Ok(());
    }
    files.sort();
    let mut figures: BTreeMap<(String, String), Vec<LineSeries>> = BTreeMap::new();
    for (part, lang, path) in files {
        let rows = read_csv(&path)?.unwrap_or_default();
        let mut by_cat: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for row in &rows {
            if let (Some(x), Some(y)) = (num(row, "rel_depth"), num(row, "s")) {
                by_cat
                    .entry(row["category"].clone())
                    .or_default()
                    .push((x, y));
            }
        }
        for (cat, points) in by_cat {
            figures
                .entry((cat, part.clone()))
                .or_default()
                .push(LineSeries {
                    label: lang.clone(),
                    points,
                });
        }
    }
    for ((cat, part), series) in figures {
        let svg = line_chart(
            &format!("{part} similarity to English ({cat})"),
            "relative depth",
            "S",
            &series,
        );
        r.write(&format!("sim_{cat}_{part}.svg"), &svg)?;
    }
    if !run_dir.join(CURVE_STATS_FILE).is_file() {
        r.missing("curve statistics", CURVE_STATS_FILE);
    }
    Ok(())
}
