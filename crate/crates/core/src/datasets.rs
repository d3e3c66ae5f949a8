//! Benchmark dataset loading, normalization, and subsetting.
//!
//! All datasets are stored in one normal form: UTF-8, one JSON record per
//! line with fields `id`, `question`, `answer`, and optional `template_id`.
//! Import converters accept each dataset's published distribution format and
//! emit that normal form, so the loader itself stays a single parser.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Which benchmark a problem belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetId {
    Gsm8k,
    GsmSymbolic,
    /// GSM8K filtered to the problems a GSM-Symbolic sample was derived
    /// from. Always derived via [`derive_matched_subset`], never loaded
    /// directly from disk as an independent corpus.
    Gsm8kMatched,
    Math500,
}

impl DatasetId {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetId::Gsm8k => "gsm8k",
            DatasetId::GsmSymbolic => "gsm-symbolic",
            DatasetId::Gsm8kMatched => "gsm8k-matched",
            DatasetId::Math500 => "math500",
        }
    }

    /// Test-split size of the published benchmark, where fixed.
    pub fn documented_size(&self) -> Option<usize> {
        match self {
            DatasetId::Gsm8k => Some(1319),
            DatasetId::Math500 => Some(500),
            DatasetId::GsmSymbolic | DatasetId::Gsm8kMatched => Some(100),
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gsm8k" => Ok(DatasetId::Gsm8k),
            "gsm-symbolic" | "gsm_symbolic" => Ok(DatasetId::GsmSymbolic),
            "gsm8k-matched" | "gsm8k_matched" => Ok(DatasetId::Gsm8kMatched),
            "math500" | "math-500" => Ok(DatasetId::Math500),
            other => Err(format!("unknown dataset kind '{other}'")),
        }
    }
}

/// One benchmark item, rendered into prompts as `{problem}` / `{answer}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub dataset: DatasetId,
    /// For GSM-Symbolic variants, the id of the GSM8K problem the variant's
    /// template was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
}

/// On-disk record line. Dataset identity comes from the load call, not the
/// file, so normalized files stay interchangeable between corpora.
#[derive(Debug, Serialize, Deserialize)]
struct ProblemLine {
    id: String,
    question: String,
    answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    template_id: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("dataset file not found: {0}")]
    MissingFile(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset file {path} contains no records")]
    EmptyDataset { path: String },
    #[error("{path}:{line}: malformed record: {message}")]
    MalformedLine {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: duplicate problem id '{id}'")]
    DuplicateId {
        path: String,
        line: usize,
        id: String,
    },
    #[error("gsm8k-matched is derived from gsm8k and gsm-symbolic, not loaded from disk")]
    DerivedDataset,
    #[error("template id '{0}' has no matching GSM8K problem")]
    UnknownTemplate(String),
}

/// Load a normalized dataset file, tagging every problem with `kind`.
pub fn load_dataset(path: &Path, kind: DatasetId) -> Result<Vec<Problem>, DatasetError> {
    if kind == DatasetId::Gsm8kMatched {
        return Err(DatasetError::DerivedDataset);
    }
    if !path.exists() {
        return Err(DatasetError::MissingFile(path.display().to_string()));
    }
    let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let display = path.display().to_string();

    let mut problems = Vec::new();
    let mut seen = HashSet::new();
    for (index, line) in text.lines().enumerate() {
        let line_no = index + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ProblemLine =
            serde_json::from_str(line).map_err(|e| DatasetError::MalformedLine {
                path: display.clone(),
                line: line_no,
                message: e.to_string(),
            })?;
        for (field, value) in [
            ("id", &parsed.id),
            ("question", &parsed.question),
            ("answer", &parsed.answer),
        ] {
            if value.trim().is_empty() {
                return Err(DatasetError::MalformedLine {
                    path: display.clone(),
                    line: line_no,
                    message: format!("field '{field}' is empty"),
                });
            }
        }
        if !seen.insert(parsed.id.clone()) {
            return Err(DatasetError::DuplicateId {
                path: display.clone(),
                line: line_no,
                id: parsed.id,
            });
        }
        problems.push(Problem {
            id: parsed.id,
            question: parsed.question,
            answer: parsed.answer,
            dataset: kind,
            template_id: parsed.template_id,
        });
    }
    if problems.is_empty() {
        return Err(DatasetError::EmptyDataset { path: display });
    }
    Ok(problems)
}

/// Write problems in the normal form accepted by [`load_dataset`].
pub fn write_normalized(problems: &[Problem], path: &Path) -> Result<(), DatasetError> {
    let mut out = String::new();
    for problem in problems {
        let line = ProblemLine {
            id: problem.id.clone(),
            question: problem.question.clone(),
            answer: problem.answer.clone(),
            template_id: problem.template_id.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("problem serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Select the GSM8K problems a GSM-Symbolic sample was derived from.
///
/// Output follows the order of the symbolic list, keeps one entry per
/// distinct template id, and retags problems as [`DatasetId::Gsm8kMatched`].
pub fn derive_matched_subset(
    gsm8k: &[Problem],
    symbolic: &[Problem],
) -> Result<Vec<Problem>, DatasetError> {
    let by_id: std::collections::HashMap<&str, &Problem> =
        gsm8k.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut taken = HashSet::new();
    let mut matched = Vec::new();
    for variant in symbolic {
        let template = variant
            .template_id
            .as_deref()
            .ok_or_else(|| DatasetError::UnknownTemplate(format!("<missing on {}>", variant.id)))?;
        if !taken.insert(template.to_string()) {
            continue;
        }
        let source = by_id
            .get(template)
            .ok_or_else(|| DatasetError::UnknownTemplate(template.to_string()))?;
        let mut problem = (*source).clone();
        problem.dataset = DatasetId::Gsm8kMatched;
        matched.push(problem);
    }
    Ok(matched)
}

/// Import converters from each dataset's published distribution format.
pub mod import {
    use super::*;

    #[derive(Deserialize)]
    struct Gsm8kUpstream {
        question: String,
        answer: String,
    }

    /// GSM8K test split: `{"question", "answer"}` JSONL where the answer
    /// text ends with `#### <final answer>`. Ids are assigned positionally
    /// as `gsm8k_0001`..; the final answer after `####` becomes the stored
    /// answer.
    pub fn gsm8k(text: &str) -> Result<Vec<Problem>, DatasetError> {
        let mut problems = Vec::new();
        for (index, line) in jsonl_records(text) {
            let raw: Gsm8kUpstream = parse_line::<Gsm8kUpstream>("gsm8k", index, line)?;
            problems.push(Problem {
                id: format!("gsm8k_{:04}", problems.len() + 1),
                question: raw.question.trim().to_string(),
                answer: final_answer(&raw.answer),
                dataset: DatasetId::Gsm8k,
                template_id: None,
            });
        }
        Ok(problems)
    }

    #[derive(Deserialize)]
    struct SymbolicUpstream {
        question: String,
        answer: String,
        #[serde(default)]
        id: Option<u64>,
        #[serde(default)]
        instance: Option<u64>,
        #[serde(default)]
        original_id: Option<u64>,
    }

    /// GSM-Symbolic sample: `{"id", "instance", "question", "answer"}`
    /// JSONL. `original_id` (falling back to `id`) is taken as the 0-based
    /// index of the source problem in the GSM8K test split and linked as
    /// `template_id = gsm8k_<index+1>`.
    pub fn gsm_symbolic(text: &str) -> Result<Vec<Problem>, DatasetError> {
        let mut problems = Vec::new();
        for (index, line) in jsonl_records(text) {
            let raw: SymbolicUpstream = parse_line::<SymbolicUpstream>("gsm-symbolic", index, line)?;
            let template_index = raw.original_id.or(raw.id).ok_or_else(|| {
                DatasetError::MalformedLine {
                    path: "gsm-symbolic".into(),
                    line: index,
                    message: "record has neither 'original_id' nor 'id'".into(),
                }
            })?;
            let instance = raw.instance.unwrap_or(0);
            problems.push(Problem {
                id: format!("gsmsym_{template_index:04}_{instance:02}"),
                question: raw.question.trim().to_string(),
                answer: final_answer(&raw.answer),
                dataset: DatasetId::GsmSymbolic,
                template_id: Some(format!("gsm8k_{:04}", template_index + 1)),
            });
        }
        Ok(problems)
    }

    #[derive(Deserialize)]
    struct MathUpstream {
        problem: String,
        answer: String,
        #[serde(default)]
        unique_id: Option<String>,
    }

    /// MATH-500: `{"problem", "answer", "unique_id", ...}` JSONL. The
    /// answer is already the canonical final-answer string.
    pub fn math500(text: &str) -> Result<Vec<Problem>, DatasetError> {
        let mut problems = Vec::new();
        for (index, line) in jsonl_records(text) {
            let raw: MathUpstream = parse_line::<MathUpstream>("math500", index, line)?;
            let id = raw
                .unique_id
                .map(|u| u.replace('/', "_").trim_end_matches(".json").to_string())
                .unwrap_or_else(|| format!("math500_{:03}", problems.len() + 1));
            problems.push(Problem {
                id,
                question: raw.problem.trim().to_string(),
                answer: raw.answer.trim().to_string(),
                dataset: DatasetId::Math500,
                template_id: None,
            });
        }
        Ok(problems)
    }

    fn jsonl_records(text: &str) -> impl Iterator<Item = (usize, &str)> {
        text.lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty())
    }

    fn parse_line<T: serde::de::DeserializeOwned>(
        what: &str,
        line: usize,
        text: &str,
    ) -> Result<T, DatasetError> {
        serde_json::from_str(text).map_err(|e| DatasetError::MalformedLine {
            path: what.into(),
            line,
            message: e.to_string(),
        })
    }

    /// GSM-style answers end with `#### <value>`; everything after the last
    /// marker is the final answer. Answers without the marker pass through.
    fn final_answer(answer: &str) -> String {
        match answer.rsplit_once("####") {
            Some((_, tail)) => tail.trim().to_string(),
            None => answer.trim().to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(file, "{line}").unwrap();
        }
        file.flush().unwrap();
        file
    }

    fn problem(id: &str, dataset: DatasetId, template: Option<&str>) -> Problem {
        Problem {
            id: id.into(),
            question: format!("question for {id}"),
            answer: "42".into(),
            dataset,
            template_id: template.map(String::from),
        }
    }

    #[test]
    fn loads_normalized_records() {
        let file = write_temp(&[
            r#"{"id":"gsm8k_0001","question":"Q1","answer":"1"}"#,
            r#"{"id":"gsm8k_0002","question":"Q2","answer":"2"}"#,
        ]);
        let problems = load_dataset(file.path(), DatasetId::Gsm8k).unwrap();
        assert_eq!(problems.len(), 2);
        assert_eq!(problems[0].id, "gsm8k_0001");
        assert_eq!(problems[0].dataset, DatasetId::Gsm8k);
    }

    #[test]
    fn empty_file_is_an_error() {
        let file = write_temp(&[]);
        let err = load_dataset(file.path(), DatasetId::Gsm8k).unwrap_err();
        assert!(matches!(err, DatasetError::EmptyDataset { .. }));
    }

    #[test]
    fn missing_file_is_an_error() {
        let err = load_dataset(Path::new("/nonexistent/data.jsonl"), DatasetId::Gsm8k).unwrap_err();
        assert!(matches!(err, DatasetError::MissingFile(_)));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let file = write_temp(&[
            r#"{"id":"a","question":"Q","answer":"1"}"#,
            r#"{"id":"b","question":"#,
        ]);
        let err = load_dataset(file.path(), DatasetId::Gsm8k).unwrap_err();
        match err {
            DatasetError::MalformedLine { line, .. } => assert_eq!(line, 2),
            other => panic!("expected MalformedLine, got {other:?}"),
        }
    }

    #[test]
    fn empty_question_reports_line_number() {
        let file = write_temp(&[r#"{"id":"a","question":"  ","answer":"1"}"#]);
        let err = load_dataset(file.path(), DatasetId::Gsm8k).unwrap_err();
        assert!(matches!(err, DatasetError::MalformedLine { line: 1, .. }));
    }

    #[test]
    fn duplicate_id_is_an_error() {
        let file = write_temp(&[
            r#"{"id":"a","question":"Q1","answer":"1"}"#,
            r#"{"id":"a","question":"Q2","answer":"2"}"#,
        ]);
        let err = load_dataset(file.path(), DatasetId::Gsm8k).unwrap_err();
        match err {
            DatasetError::DuplicateId { id, line, .. } => {
                assert_eq!(id, "a");
                assert_eq!(line, 2);
            }
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn matched_is_never_loaded_directly() {
        let file = write_temp(&[r#"{"id":"a","question":"Q","answer":"1"}"#]);
        let err = load_dataset(file.path(), DatasetId::Gsm8kMatched).unwrap_err();
        assert!(matches!(err, DatasetError::DerivedDataset));
    }

    #[test]
    fn load_serialize_load_is_identity() {
        let file = write_temp(&[
            r#"{"id":"a","question":"Q1","answer":"1","template_id":"t"}"#,
            r#"{"id":"b","question":"Q2","answer":"2"}"#,
        ]);
        let first = load_dataset(file.path(), DatasetId::GsmSymbolic).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_normalized(&first, out.path()).unwrap();
        let second = load_dataset(out.path(), DatasetId::GsmSymbolic).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn matched_subset_follows_symbolic_order() {
        let gsm8k: Vec<Problem> = (1..=5)
            .map(|n| problem(&format!("gsm8k_{n:04}"), DatasetId::Gsm8k, None))
            .collect();
        let symbolic = vec![
            problem("gsmsym_0003_00", DatasetId::GsmSymbolic, Some("gsm8k_0003")),
            problem("gsmsym_0001_00", DatasetId::GsmSymbolic, Some("gsm8k_0001")),
        ];
        let matched = derive_matched_subset(&gsm8k, &symbolic).unwrap();
        assert_eq!(matched.len(), 2);
        assert_eq!(matched[0].id, "gsm8k_0003");
        assert_eq!(matched[1].id, "gsm8k_0001");
        assert!(matched.iter().all(|p| p.dataset == DatasetId::Gsm8kMatched));
    }

    #[test]
    fn matched_subset_of_empty_symbolic_is_empty() {
        let gsm8k = vec![problem("gsm8k_0001", DatasetId::Gsm8k, None)];
        let matched = derive_matched_subset(&gsm8k, &[]).unwrap();
        assert!(matched.is_empty());
    }

    #[test]
    fn unknown_template_names_the_id() {
        let gsm8k = vec![problem("gsm8k_0001", DatasetId::Gsm8k, None)];
        let symbolic = vec![problem("gsmsym_x", DatasetId::GsmSymbolic, Some("gsm_x"))];
        let err = derive_matched_subset(&gsm8k, &symbolic).unwrap_err();
        match err {
            DatasetError::UnknownTemplate(id) => assert_eq!(id, "gsm_x"),
            other => panic!("expected UnknownTemplate, got {other:?}"),
        }
    }

    #[test]
    fn matched_subset_dedupes_template_ids() {
        let gsm8k = vec![
            problem("gsm8k_0001", DatasetId::Gsm8k, None),
            problem("gsm8k_0002", DatasetId::Gsm8k, None),
        ];
        let symbolic = vec![
            problem("v1", DatasetId::GsmSymbolic, Some("gsm8k_0001")),
            problem("v2", DatasetId::GsmSymbolic, Some("gsm8k_0001")),
            problem("v3", DatasetId::GsmSymbolic, Some("gsm8k_0002")),
        ];
        let matched = derive_matched_subset(&gsm8k, &symbolic).unwrap();
        let distinct: HashSet<_> = symbolic.iter().filter_map(|p| p.template_id.clone()).collect();
        assert_eq!(matched.len(), distinct.len());
    }

    #[test]
    fn imports_gsm8k_upstream_format() {
        let text = concat!(
            r#"{"question":"How many?","answer":"Work it out.\n#### 12"}"#,
            "\n",
            r#"{"question":"And now?","answer":"More work. #### 7"}"#,
            "\n",
        );
        let problems = import::gsm8k(text).unwrap();
        assert_eq!(problems.len(), 2);
        assert_eq!(problems[0].id, "gsm8k_0001");
        assert_eq!(problems[0].answer, "12");
        assert_eq!(problems[1].answer, "7");
    }

    #[test]
    fn imports_gsm_symbolic_with_template_links() {
        let text = concat!(
            r##"{"id":2,"instance":5,"question":"Variant Q","answer":"#### 9"}"##,
            "\n",
        );
        let problems = import::gsm_symbolic(text).unwrap();
        assert_eq!(problems[0].id, "gsmsym_0002_05");
        assert_eq!(problems[0].template_id.as_deref(), Some("gsm8k_0003"));
        assert_eq!(problems[0].answer, "9");
    }

    #[test]
    fn imports_math500_with_unique_ids() {
        let text = concat!(
            r#"{"problem":"Find x.","answer":"3/4","unique_id":"test/algebra/123.json"}"#,
            "\n",
        );
        let problems = import::math500(text).unwrap();
        assert_eq!(problems[0].id, "test_algebra_123");
        assert_eq!(problems[0].answer, "3/4");
        assert_eq!(problems[0].dataset, DatasetId::Math500);
    }
}
