//! End-to-end evaluation: prompt, query, parse, score, report.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{read_pairs_jsonl, PairsFileError};
use crate::gateway::{EndpointConfig, Gateway, GatewayError};
use crate::metrics::{dataset_report, MetricsError, OutcomeError, OutcomeMode, PairOutcome};
use crate::model::EvalReport;
use crate::parser::{extract_confidence_score, parse_rationale};
use crate::prompt::{build_prompt, PromptKind};

/// Scoring policy stated at the top of every structured report.
pub const SCORING_POLICY: &str = "unparseable responses and failed requests are kept in the \
denominator and score 0 for accuracy and consistency";

fn default_parallelism() -> usize {
    4
}

fn default_kind() -> PromptKind {
    PromptKind::Cave
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    #[serde(default = "default_kind")]
    pub prompt_kind: PromptKind,
    pub endpoint: EndpointConfig,
    pub test_set: PathBuf,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Defaults to the test-set file stem.
    #[serde(default)]
    pub dataset_tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridModel {
    pub label: String,
    pub endpoint: EndpointConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTestSet {
    pub label: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(default = "default_kind")]
    pub prompt_kind: PromptKind,
    pub models: Vec<GridModel>,
    pub test_sets: Vec<GridTestSet>,
    /// Leave cell (i, i) unevaluated, rendered as `---`.
    #[serde(default)]
    pub skip_diagonal: bool,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("test set {path}: {source}")]
    TestSet {
        path: String,
        source: PairsFileError,
    },
    #[error("endpoint error: {0}")]
    Gateway(#[from] GatewayError),
    #[error("metrics error: {0}")]
    Metrics(#[from] MetricsError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config file {path}: {detail}")]
    ConfigFile { path: String, detail: String },
}

pub fn load_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::ConfigFile {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    toml::from_str(&text).map_err(|e| HarnessError::ConfigFile {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

impl RunSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.parallelism == 0 {
            return Err(HarnessError::Config("parallelism must be >= 1".into()));
        }
        if !self.test_set.is_file() {
            return Err(HarnessError::Config(format!(
                "test set {} does not exist",
                self.test_set.display()
            )));
        }
        self.endpoint.validate()?;
        Ok(())
    }

    fn tag(&self) -> String {
        self.dataset_tag.clone().unwrap_or_else(|| {
            self.test_set
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut seen = HashSet::new();
        for label in self.models.iter().map(|m| &m.label) {
            if !seen.insert(label) {
                return Err(HarnessError::Config(format!(
                    "duplicate model label {label:?}"
                )));
            }
        }
        let mut seen = HashSet::new();
        for label in self.test_sets.iter().map(|t| &t.label) {
            if !seen.insert(label) {
                return Err(HarnessError::Config(format!(
                    "duplicate test-set label {label:?}"
                )));
            }
        }
        if self.parallelism == 0 {
            return Err(HarnessError::Config("parallelism must be >= 1".into()));
        }
        Ok(())
    }
}

/// Evaluates one test set with one response per pair. When `output_dir`
/// is set, `report.jsonl` and `report.txt` are written there.
pub async fn run_eval(spec: &RunSpec) -> Result<EvalReport, HarnessError> {
    spec.validate()?;
    let pairs = read_pairs_jsonl(&spec.test_set).map_err(|source| HarnessError::TestSet {
        path: spec.test_set.display().to_string(),
        source,
    })?;
    if pairs.is_empty() {
        return Err(HarnessError::Config(format!(
            "test set {} is empty",
            spec.test_set.display()
        )));
    }
    let mut endpoint = spec.endpoint.clone();
    endpoint.n_responses = 1;
    let gateway = Gateway::new(endpoint)?;
    let prompts: Vec<_> = pairs
        .iter()
        .map(|p| build_prompt(spec.prompt_kind, p))
        .collect();

    let mut results = HashMap::with_capacity(pairs.len());
    let mut stream = std::pin::pin!(gateway.complete_batch(&prompts, spec.parallelism));
    while let Some((pair_id, result)) = stream.next().await {
        if let Err(e) = &result {
            if e.is_fatal() {
                return Err(HarnessError::Gateway(e.clone()));
            }
            log::warn!("pair {pair_id}: {e}");
        }
        results.insert(pair_id, result);
    }

    let mode = if spec.prompt_kind.is_structured() {
        OutcomeMode::Rationale
    } else {
        OutcomeMode::ScoreThreshold
    };
    let outcomes: Vec<PairOutcome> = pairs
        .iter()
        .map(|pair| {
            let result = results
                .remove(&pair.pair_id)
                .expect("every prompt yields one result");
            match result {
                Ok(responses) => {
                    let text = &responses[0].text;
                    match mode {
                        OutcomeMode::Rationale => PairOutcome::from_rationale(
                            &pair.pair_id,
                            pair.gold,
                            parse_rationale(text, &pair.pair_id)
                                .as_ref()
                                .map_err(Clone::clone),
                        ),
                        OutcomeMode::ScoreThreshold => PairOutcome::from_confidence(
                            &pair.pair_id,
                            pair.gold,
                            extract_confidence_score(text),
                        ),
                    }
                }
                Err(e) => PairOutcome::failed(
                    &pair.pair_id,
                    pair.gold,
                    mode,
                    OutcomeError::Request(e.to_string()),
                ),
            }
        })
        .collect();

    let mut report = dataset_report(&outcomes, &spec.tag())?;
    report.run_spec = serde_json::to_value(spec).ok();
    if let Some(dir) = &spec.output_dir {
        write_report(&report, dir)?;
    }
    Ok(report)
}

pub fn write_report(report: &EvalReport, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("report.jsonl"),
        render_report(report, ReportFormat::StructuredFile),
    )?;
    fs::write(
        dir.join("report.txt"),
        render_report(report, ReportFormat::PlainTable),
    )?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    PlainTable,
    StructuredFile,
}

/// Rounds a non-negative value half-up at `places` decimals after shifting
/// the decimal point `shift` places right. Works on the shortest decimal
/// representation of `value`, so `0.005` rounds to `0.01`.
fn round_half_up(value: f64, shift: usize, places: usize) -> String {
    let text = format!("{}", value.abs());
    let (int_part, frac_part) = text.split_once('.').unwrap_or((&text, ""));
    let mut frac: String = frac_part.to_string();
    while frac.len() < shift + places + 1 {
        frac.push('0');
    }
    let whole = format!("{int_part}{}", &frac[..shift]);
    let kept = &frac[shift..shift + places];
    let next = frac.as_bytes()[shift + places];
    let mut n: u128 = format!("{whole}{kept}").parse().unwrap_or(0);
    if next >= b'5' {
        n += 1;
    }
    let digits = format!("{n:0>width$}", width = places + 1);
    let sign = if value < 0.0 && n != 0 { "-" } else { "" };
    if places == 0 {
        format!("{sign}{digits}")
    } else {
        let (i, f) = digits.split_at(digits.len() - places);
        format!("{sign}{i}.{f}")
    }
}

/// Accuracy as a percentage with one decimal: 0.757 -> "75.7".
pub fn format_accuracy(accuracy: f64) -> String {
    round_half_up(accuracy, 2, 1)
}

/// Consistency with two decimals, `-` when not applicable.
pub fn format_consistency(consistency: Option<f64>) -> String {
    consistency
        .map(|c| round_half_up(c, 0, 2))
        .unwrap_or_else(|| "-".to_string())
}

#[derive(Serialize)]
struct ReportHeader<'a> {
    dataset_tag: &'a str,
    scoring_policy: &'a str,
    run_spec: &'a Option<serde_json::Value>,
}

#[derive(Serialize)]
struct ReportSummary<'a> {
    dataset_tag: &'a str,
    n_total: usize,
    n_parse_failures: usize,
    n_request_failures: usize,
    accuracy: f64,
    mean_consistency: Option<f64>,
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::StructuredFile => {
            let mut out = String::new();
            let header = ReportHeader {
                dataset_tag: &report.dataset_tag,
                scoring_policy: SCORING_POLICY,
                run_spec: &report.run_spec,
            };
            out.push_str(&serde_json::json!({ "header": header }).to_string());
            out.push('\n');
            for detail in &report.per_pair {
                out.push_str(&serde_json::to_string(detail).expect("serializable"));
                out.push('\n');
            }
            let summary = ReportSummary {
                dataset_tag: &report.dataset_tag,
                n_total: report.n_total,
                n_parse_failures: report.n_parse_failures,
                n_request_failures: report.n_request_failures,
                accuracy: report.accuracy,
                mean_consistency: report.mean_consistency,
            };
            out.push_str(&serde_json::json!({ "summary": summary }).to_string());
            out.push('\n');
            out
        }
        ReportFormat::PlainTable => {
            let rows = [
                ["Dataset".to_string(), report.dataset_tag.clone()],
                ["Pairs".to_string(), report.n_total.to_string()],
                [
                    "Parse failures".to_string(),
                    report.n_parse_failures.to_string(),
                ],
                [
                    "Request failures".to_string(),
                    report.n_request_failures.to_string(),
                ],
                ["Acc.".to_string(), format_accuracy(report.accuracy)],
                [
                    "Cons.".to_string(),
                    format_consistency(report.mean_consistency),
                ],
            ];
            let width = rows.iter().map(|r| r[0].len()).max().unwrap_or(0);
            let mut out = format!("# {SCORING_POLICY}\n");
            for [k, v] in rows {
                let _ = writeln!(out, "{k:<width$}  {v}");
            }
            out
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GridCell {
    Skipped,
    Evaluated {
        accuracy: f64,
        consistency: Option<f64>,
        n_total: usize,
        n_parse_failures: usize,
    },
    Error(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// `cells[row][col]`.
    pub cells: Vec<Vec<GridCell>>,
}

impl GridResult {
    pub fn cell(&self, row: &str, col: &str) -> Option<&GridCell> {
        let r = self.row_labels.iter().position(|l| l == row)?;
        let c = self.col_labels.iter().position(|l| l == col)?;
        Some(&self.cells[r][c])
    }
}

/// The [`RunSpec`] used for grid cell (`row`, `col`).
pub fn cell_spec(spec: &GridSpec, row: usize, col: usize) -> RunSpec {
    let model = &spec.models[row];
    let test = &spec.test_sets[col];
    RunSpec {
        prompt_kind: spec.prompt_kind,
        endpoint: model.endpoint.clone(),
        test_set: test.path.clone(),
        output_dir: spec
            .output_dir
            .as_ref()
            .map(|d| d.join(format!("{}__{}", model.label, test.label))),
        parallelism: spec.parallelism,
        dataset_tag: Some(test.label.clone()),
    }
}

/// Evaluates every (model, test set) cell. Failing cells are recorded as
/// errors and the grid still completes.
pub async fn ood_grid(spec: &GridSpec) -> Result<GridResult, HarnessError> {
    spec.validate()?;
    let mut cells = Vec::with_capacity(spec.models.len());
    for row in 0..spec.models.len() {
        let mut line = Vec::with_capacity(spec.test_sets.len());
        for col in 0..spec.test_sets.len() {
            if spec.skip_diagonal && row == col {
                line.push(GridCell::Skipped);
                continue;
            }
            let cell = match run_eval(&cell_spec(spec, row, col)).await {
                Ok(r) => GridCell::Evaluated {
                    accuracy: r.accuracy,
                    consistency: r.mean_consistency,
                    n_total: r.n_total,
                    n_parse_failures: r.n_parse_failures,
                },
                Err(e) => {
                    log::error!(
                        "grid cell {} x {}: {e}",
                        spec.models[row].label,
                        spec.test_sets[col].label
                    );
                    GridCell::Error(e.to_string())
                }
            };
            line.push(cell);
        }
        cells.push(line);
    }
    let result = GridResult {
        row_labels: spec.models.iter().map(|m| m.label.clone()).collect(),
        col_labels: spec.test_sets.iter().map(|t| t.label.clone()).collect(),
        cells,
    };
    if let Some(dir) = &spec.output_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("grid.txt"), render_grid(&result))?;
        fs::write(
            dir.join("grid.json"),
            serde_json::to_string_pretty(&result).expect("serializable"),
        )?;
    }
    Ok(result)
}

/// Rows are models (train sets), columns test sets, each with an Acc. and
/// a Cons. sub-column.
pub fn render_grid(grid: &GridResult) -> String {
    let mut table: Vec<Vec<String>> = Vec::new();
    let mut top = vec!["Test →".to_string()];
    let mut sub = vec!["Train ↓".to_string()];
    for label in &grid.col_labels {
        top.push(label.clone());
        top.push(String::new());
        sub.push("Acc.".into());
        sub.push("Cons.".into());
    }
    table.push(top);
    table.push(sub);
    for (label, row) in grid.row_labels.iter().zip(&grid.cells) {
        let mut line = vec![label.clone()];
        for cell in row {
            let (a, c) = match cell {
                GridCell::Skipped => ("---".to_string(), "---".to_string()),
                GridCell::Evaluated {
                    accuracy,
                    consistency,
                    ..
                } => (format_accuracy(*accuracy), format_consistency(*consistency)),
                GridCell::Error(_) => ("ERR".to_string(), "ERR".to_string()),
            };
            line.push(a);
            line.push(c);
        }
        table.push(line);
    }
    let ncols = table.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..ncols)
        .map(|c| {
            table
                .iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in &table {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let pad = widths[i] - s.chars().count();
                format!("{s}{}", " ".repeat(pad))
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}
