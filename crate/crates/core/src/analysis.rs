//! Metrics over trial records: success rates, recovery relative to the
//! direct scenario, absolute-drop summaries over model groups, pivot-token
//! detection, and correction-style classification.
//!
//! Rates are kept at full precision internally and rounded to one decimal
//! only for display, so derived statistics never accumulate rounding drift.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::assets;
use crate::datasets::DatasetId;
use crate::grading::Verdict;
use crate::scenarios::{ScenarioKind, TrialRecord, TrialStatus};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum AnalysisError {
    #[error("records mix groups: expected ({0}, {1}, {2})")]
    MixedGroup(String, DatasetId, ScenarioKind),
    #[error("no records supplied")]
    Empty,
    #[error("correction labels apply to perturbed scenarios, not {0}")]
    NotApplicable(ScenarioKind),
    #[error("record has no verdict")]
    MissingVerdict,
}

/// Counts and derived rate for one (model, dataset, scenario) cell.
///
/// `graded` counts only ok trials; absent responses and other failures are
/// excluded from the denominator and reported as coverage instead.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuccessRates {
    pub model: String,
    pub dataset: DatasetId,
    pub scenario: ScenarioKind,
    pub correct: u64,
    pub graded: u64,
    pub total_trials: u64,
}

impl SuccessRates {
    /// Success rate in percent, full precision. Undefined when nothing was
    /// graded.
    pub fn rate(&self) -> Option<f64> {
        (self.graded > 0).then(|| 100.0 * self.correct as f64 / self.graded as f64)
    }

    /// Share of recorded trials that produced a graded outcome.
    pub fn coverage(&self) -> f64 {
        if self.total_trials == 0 {
            0.0
        } else {
            self.graded as f64 / self.total_trials as f64
        }
    }

    /// Rate rounded to one decimal, as displayed.
    pub fn display_rate(&self) -> Option<String> {
        self.rate().map(|r| format!("{r:.1}"))
    }
}

/// Compute the success rate of records sharing one (model, dataset,
/// scenario) cell.
pub fn success_rate(records: &[TrialRecord]) -> Result<SuccessRates, AnalysisError> {
    let first = records.first().ok_or(AnalysisError::Empty)?;
    let key = (first.model.clone(), first.dataset, first.scenario);
    let mut cell = SuccessRates {
        model: key.0.clone(),
        dataset: key.1,
        scenario: key.2,
        correct: 0,
        graded: 0,
        total_trials: 0,
    };
    for record in records {
        if record.model != key.0 || record.dataset != key.1 || record.scenario != key.2 {
            return Err(AnalysisError::MixedGroup(key.0, key.1, key.2));
        }
        cell.total_trials += 1;
        if record.status == TrialStatus::Ok {
            cell.graded += 1;
            if record.verdict == Some(Verdict::Correct) {
                cell.correct += 1;
            }
        }
    }
    Ok(cell)
}

/// Group records by (model, dataset, scenario) and compute every cell,
/// sorted by that key.
pub fn summarize(records: &[TrialRecord]) -> Vec<SuccessRates> {
    let mut groups: BTreeMap<(String, DatasetId, ScenarioKind), Vec<&TrialRecord>> = BTreeMap::new();
    for record in records {
        groups
            .entry((record.model.clone(), record.dataset, record.scenario))
            .or_default()
            .push(record);
    }
    groups
        .into_values()
        .map(|group| {
            let owned: Vec<TrialRecord> = group.into_iter().cloned().collect();
            success_rate(&owned).expect("grouped records share a key")
        })
        .collect()
}

/// Perturbed rate as a percentage of the direct rate; 100 means performance
/// equivalent to the unperturbed scenario. Undefined when direct is zero.
pub fn relative_recovery_rate(direct: f64, perturbed: f64) -> Option<f64> {
    (direct > 0.0).then(|| 100.0 * perturbed / direct)
}

/// Direct/on/off rates for one model on one dataset, with relative recovery
/// and absolute drops, all in percentage points of full precision.
#[derive(Debug, Clone, Serialize)]
pub struct RecoverySummary {
    pub model: String,
    pub dataset: DatasetId,
    pub direct: Option<f64>,
    pub on_policy: Option<f64>,
    pub off_policy: Option<f64>,
    pub on_policy_relative: Option<f64>,
    pub off_policy_relative: Option<f64>,
    pub on_policy_drop: Option<f64>,
    pub off_policy_drop: Option<f64>,
}

pub fn recovery_summaries(cells: &[SuccessRates]) -> Vec<RecoverySummary> {
    let mut by_pair: BTreeMap<(String, DatasetId), [Option<f64>; 3]> = BTreeMap::new();
    for cell in cells {
        let slot = match cell.scenario {
            ScenarioKind::Direct => 0,
            ScenarioKind::OnPolicy => 1,
            ScenarioKind::OffPolicy => 2,
        };
        by_pair.entry((cell.model.clone(), cell.dataset)).or_default()[slot] = cell.rate();
    }
    by_pair
        .into_iter()
        .map(|((model, dataset), [direct, on, off])| RecoverySummary {
            model,
            dataset,
            direct,
            on_policy: on,
            off_policy: off,
            on_policy_relative: direct.zip(on).and_then(|(d, p)| relative_recovery_rate(d, p)),
            off_policy_relative: direct.zip(off).and_then(|(d, p)| relative_recovery_rate(d, p)),
            on_policy_drop: direct.zip(on).map(|(d, p)| d - p),
            off_policy_drop: direct.zip(off).map(|(d, p)| d - p),
        })
        .collect()
}

/// A named model group for drop summaries, e.g. a parameter-size class.
#[derive(Debug, Clone)]
pub struct DropGroup {
    pub name: String,
    pub models: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DropSummary {
    pub group: String,
    pub dataset: DatasetId,
    pub scenario: ScenarioKind,
    /// Unweighted mean over member models of (direct - perturbed), in
    /// percentage points.
    pub mean_drop: Option<f64>,
    pub included: Vec<String>,
    /// Members lacking a direct or perturbed rate; excluded from the mean.
    pub flagged_missing: Vec<String>,
}

/// Mean absolute drop per group for one dataset and perturbed scenario.
/// Models listed in `exclusions` are dropped from every group; a member
/// missing either rate is flagged rather than silently skipped.
pub fn absolute_drop_summary(
    cells: &[SuccessRates],
    dataset: DatasetId,
    scenario: ScenarioKind,
    groups: &[DropGroup],
    exclusions: &[String],
) -> Vec<DropSummary> {
    let mut direct: BTreeMap<&str, f64> = BTreeMap::new();
    let mut perturbed: BTreeMap<&str, f64> = BTreeMap::new();
    for cell in cells.iter().filter(|c| c.dataset == dataset) {
        if let Some(rate) = cell.rate() {
            if cell.scenario == ScenarioKind::Direct {
                direct.insert(&cell.model, rate);
            } else if cell.scenario == scenario {
                perturbed.insert(&cell.model, rate);
            }
        }
    }
    groups
        .iter()
        .map(|group| {
            let mut drops = Vec::new();
            let mut included = Vec::new();
            let mut flagged = Vec::new();
            for model in &group.models {
                if exclusions.contains(model) {
                    continue;
                }
                match (direct.get(model.as_str()), perturbed.get(model.as_str())) {
                    (Some(d), Some(p)) => {
                        drops.push(d - p);
                        included.push(model.clone());
                    }
                    _ => flagged.push(model.clone()),
                }
            }
            DropSummary {
                group: group.name.clone(),
                dataset,
                scenario,
                mean_drop: (!drops.is_empty())
                    .then(|| drops.iter().sum::<f64>() / drops.len() as f64),
                included,
                flagged_missing: flagged,
            }
        })
        .collect()
}

/// The default pivot/acknowledgment marker list, from the embedded data
/// file. The paper names examples, not a closed set; the file is the
/// configurable convention.
pub fn default_pivot_lexicon() -> Vec<String> {
    assets::PIVOT_MARKERS
        .lines()
        .map(str::trim_end)
        .filter(|line| !line.is_empty() && !line.starts_with('#'))
        .map(String::from)
        .collect()
}

/// Find marker occurrences with their character offsets, in order.
///
/// Matching is case-sensitive at sentence starts and case-insensitive
/// elsewhere, with word boundaries on alphanumeric marker edges.
pub fn detect_pivot_tokens(completion: &str, lexicon: &[String]) -> Vec<(String, usize)> {
    let lower = completion.to_lowercase();
    let mut hits: Vec<(String, usize)> = Vec::new();
    for marker in lexicon {
        if marker.is_empty() {
            continue;
        }
        let marker_lower = marker.to_lowercase();
        let mut from = 0;
        while let Some(at) = lower[from..].find(&marker_lower) {
            let start = from + at;
            let end = start + marker.len();
            from = start + 1;
            if !marker_bounded(completion, start, end, marker) {
                continue;
            }
            let actual = &completion[start..end];
            let matches = if at_sentence_start(completion, start) {
                actual == marker
            } else {
                true
            };
            if matches {
                hits.push((marker.clone(), start));
            }
        }
    }
    hits.sort_by_key(|(_, offset)| *offset);
    hits
}

fn at_sentence_start(text: &str, offset: usize) -> bool {
    let head = text[..offset].trim_end();
    match head.chars().next_back() {
        None => true,
        Some(c) => matches!(c, '.' | '!' | '?' | '\n'),
    }
}

fn marker_bounded(text: &str, start: usize, end: usize, marker: &str) -> bool {
    let first_alnum = marker.chars().next().is_some_and(|c| c.is_alphanumeric());
    let last_alnum = marker.chars().next_back().is_some_and(|c| c.is_alphanumeric());
    let before_ok = !first_alnum
        || start == 0
        || !text[..start].chars().next_back().is_some_and(|c| c.is_alphanumeric());
    let after_ok = !last_alnum
        || end == text.len()
        || !text[end..].chars().next().is_some_and(|c| c.is_alphanumeric());
    before_ok && after_ok
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionLabel {
    ExplicitCorrection,
    ImplicitCorrection,
    NotRecovered,
}

/// Label the correction style of one perturbed trial.
///
/// Incorrect trials are NotRecovered regardless of markers; correct trials
/// are Explicit when the completion (not the stub) carries a marker, and
/// Implicit otherwise.
pub fn classify_correction(
    record: &TrialRecord,
    lexicon: &[String],
) -> Result<CorrectionLabel, AnalysisError> {
    if !record.scenario.is_perturbed() {
        return Err(AnalysisError::NotApplicable(record.scenario));
    }
    let verdict = record.verdict.ok_or(AnalysisError::MissingVerdict)?;
    Ok(match verdict {
        Verdict::Incorrect => CorrectionLabel::NotRecovered,
        Verdict::Correct => {
            if detect_pivot_tokens(&record.completion, lexicon).is_empty() {
                CorrectionLabel::ImplicitCorrection
            } else {
                CorrectionLabel::ExplicitCorrection
            }
        }
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LabelCounts {
    pub explicit: usize,
    pub implicit: usize,
    pub not_recovered: usize,
    /// Records without a verdict or from the direct scenario.
    pub skipped: usize,
}

pub fn label_counts(records: &[TrialRecord], lexicon: &[String]) -> LabelCounts {
    let mut counts = LabelCounts::default();
    for record in records {
        match classify_correction(record, lexicon) {
            Ok(CorrectionLabel::ExplicitCorrection) => counts.explicit += 1,
            Ok(CorrectionLabel::ImplicitCorrection) => counts.implicit += 1,
            Ok(CorrectionLabel::NotRecovered) => counts.not_recovered += 1,
            Err(_) => counts.skipped += 1,
        }
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format '{other}'")),
        }
    }
}

/// Render the success-rate cells to a document.
///
/// Markdown shows one Direct/Off/On grid per dataset with one-decimal rates
/// and per-cell coverage footnotes; CSV and JSON carry full precision and
/// raw counts.
pub fn emit_report(cells: &[SuccessRates], format: ReportFormat) -> String {
    match format {
        ReportFormat::Markdown => markdown_report(cells),
        ReportFormat::Csv => csv_report(cells),
        ReportFormat::Json => json_report(cells),
    }
}

fn cell_lookup<'a>(
    cells: &'a [SuccessRates],
) -> BTreeMap<(&'a str, DatasetId, ScenarioKind), &'a SuccessRates> {
    cells.iter().map(|c| ((c.model.as_str(), c.dataset, c.scenario), c)).collect()
}

fn markdown_report(cells: &[SuccessRates]) -> String {
    let lookup = cell_lookup(cells);
    let datasets: BTreeSet<DatasetId> = cells.iter().map(|c| c.dataset).collect();
    let models: BTreeSet<&str> = cells.iter().map(|c| c.model.as_str()).collect();
    let mut out = String::from("# Success rates\n");
    let scenario_columns =
        [ScenarioKind::Direct, ScenarioKind::OffPolicy, ScenarioKind::OnPolicy];
    for dataset in datasets {
        let mut footnotes: Vec<String> = Vec::new();
        out.push_str(&format!("\n## {dataset}\n\n"));
        out.push_str("| Model | Direct | Off | On |\n|---|---|---|---|\n");
        for model in &models {
            let mut row = format!("| {model} |");
            for scenario in scenario_columns {
                match lookup.get(&(*model, dataset, scenario)) {
                    Some(cell) => {
                        let rate = cell.display_rate().unwrap_or_else(|| "—".into());
                        if cell.graded < cell.total_trials {
                            footnotes.push(format!(
                                "[^{}]: {model} {dataset} {scenario}: {} of {} trials graded",
                                footnotes.len() + 1,
                                cell.graded,
                                cell.total_trials,
                            ));
                            row.push_str(&format!(" {rate}[^{}] |", footnotes.len()));
                        } else {
                            row.push_str(&format!(" {rate} |"));
                        }
                    }
                    None => row.push_str(" — |"),
                }
            }
            out.push_str(&row);
            out.push('\n');
        }
        for footnote in footnotes {
            out.push('\n');
            out.push_str(&footnote);
        }
        out.push('\n');
    }
    out
}

fn csv_report(cells: &[SuccessRates]) -> String {
    let mut out = String::from("model,dataset,scenario,c,N,rate\n");
    for cell in cells {
        let rate = cell.rate().map(|r| r.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            csv_field(&cell.model),
            cell.dataset,
            cell.scenario,
            cell.correct,
            cell.graded,
            rate,
        ));
    }
    out
}

fn csv_field(raw: &str) -> String {
    if raw.contains([',', '"', '\n']) {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw.to_string()
    }
}

fn json_report(cells: &[SuccessRates]) -> String {
    #[derive(Serialize)]
    struct JsonCell {
        c: u64,
        n: u64,
        total_trials: u64,
        rate: Option<f64>,
        coverage: f64,
    }
    let mut tree: BTreeMap<String, BTreeMap<String, BTreeMap<String, JsonCell>>> = BTreeMap::new();
    for cell in cells {
        tree.entry(cell.model.clone())
            .or_default()
            .entry(cell.dataset.to_string())
            .or_default()
            .insert(
                cell.scenario.to_string(),
                JsonCell {
                    c: cell.correct,
                    n: cell.graded,
                    total_trials: cell.total_trials,
                    rate: cell.rate(),
                    coverage: cell.coverage(),
                },
            );
    }
    serde_json::to_string_pretty(&tree).expect("report serializes")
}
