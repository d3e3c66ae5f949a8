//! Durable, append-only persistence of trials and run manifests.
//!
//! A run lives in one directory: `manifest.json` (written before any trial,
//! immutable thereafter) plus `records.jsonl` with one trial per line. Line
//! format and field names are the interchange contract, versioned through
//! `schema_version`. Full prompt/response texts are stored, not just
//! verdicts: correction classification and qualitative review both need the
//! raw text.
//!
//! Single writer, many readers: the orchestrator owns the writer, readers
//! always see a consistent prefix. A torn final line (crash mid-append) is
//! tolerated on load and quarantined by [`RunStore::integrity_check`].

use std::collections::HashSet;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::assets;
use crate::config::RunConfig;
use crate::datasets::Problem;
use crate::scenarios::{ScenarioKind, TrialRecord};

pub const SCHEMA_VERSION: u32 = 1;

const MANIFEST_FILE: &str = "manifest.json";
const RECORDS_FILE: &str = "records.jsonl";
const QUARANTINE_FILE: &str = "records.quarantine";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateHashes {
    pub solve: String,
    pub perturb: String,
    pub verify: String,
}

impl TemplateHashes {
    /// Hashes of the templates compiled into this binary.
    pub fn current() -> Self {
        Self {
            solve: assets::sha256_hex(assets::SOLVE_TEMPLATE.as_bytes()),
            perturb: assets::sha256_hex(assets::PERTURB_TEMPLATE.as_bytes()),
            verify: assets::sha256_hex(assets::VERIFY_TEMPLATE.as_bytes()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub config: RunConfig,
    /// Content hash of the dataset file(s) the run was configured with.
    pub dataset_fingerprint: String,
    pub template_hashes: TemplateHashes,
}

impl RunManifest {
    pub fn new(config: RunConfig, dataset_fingerprint: String) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            run_id: config.run_id.clone(),
            created_at: Utc::now(),
            config,
            dataset_fingerprint,
            template_hashes: TemplateHashes::current(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("run '{0}' already exists")]
    RunExists(String),
    #[error("no manifest for run '{0}'")]
    MissingManifest(String),
    #[error("manifest for run '{run_id}' is unreadable: {message}")]
    BadManifest { run_id: String, message: String },
    #[error("run id mismatch: store is '{store}', record is '{record}'")]
    RunIdMismatch { store: String, record: String },
    #[error("duplicate trial for ({problem_id}, {scenario})")]
    DuplicateTrial { problem_id: String, scenario: ScenarioKind },
    #[error("existing manifest for run '{0}' was created from a different configuration")]
    ConfigMismatch(String),
    #[error("corrupt record at {path}:{line}: {message}")]
    CorruptLine { path: String, line: usize, message: String },
    #[error("store i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io { path: path.display().to_string(), source }
}

/// Where finished trials land. The trait exists so tests can interpose
/// fault injection between the orchestrator and the real store.
pub trait TrialSink: Sync {
    fn append(&self, record: &TrialRecord) -> Result<(), StoreError>;
}

pub struct RunStore {
    dir: PathBuf,
    manifest: RunManifest,
    state: Mutex<WriterState>,
}

struct WriterState {
    file: File,
    keys: HashSet<(String, ScenarioKind)>,
}

impl RunStore {
    /// Create a fresh run directory, writing the manifest before anything
    /// else. Fails if the run already exists.
    pub fn create(root: &Path, manifest: RunManifest) -> Result<Self, StoreError> {
        let dir = root.join(&manifest.run_id);
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            return Err(StoreError::RunExists(manifest.run_id.clone()));
        }
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let tmp = dir.join(".manifest.tmp");
        let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&tmp, body).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, &manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(RECORDS_FILE))
            .map_err(|e| io_err(&dir.join(RECORDS_FILE), e))?;
        Ok(Self {
            dir,
            manifest,
            state: Mutex::new(WriterState { file, keys: HashSet::new() }),
        })
    }

    /// Open an existing run, scanning its records to rebuild the key set.
    pub fn open(root: &Path, run_id: &str) -> Result<Self, StoreError> {
        let dir = root.join(run_id);
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(StoreError::MissingManifest(run_id.to_string()));
        }
        let manifest_text =
            fs::read_to_string(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
        let manifest: RunManifest =
            serde_json::from_str(&manifest_text).map_err(|e| StoreError::BadManifest {
                run_id: run_id.to_string(),
                message: e.to_string(),
            })?;
        let records_path = dir.join(RECORDS_FILE);
        let keys = match load_lines(&records_path)? {
            Some(scan) => scan.records.iter().map(TrialRecord::key).collect(),
            None => HashSet::new(),
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&records_path)
            .map_err(|e| io_err(&records_path, e))?;
        Ok(Self { dir, manifest, state: Mutex::new(WriterState { file, keys }) })
    }

    /// Open the run if it exists (verifying the stored config snapshot
    /// matches), create it otherwise.
    pub fn open_or_create(root: &Path, manifest: RunManifest) -> Result<Self, StoreError> {
        let manifest_path = root.join(&manifest.run_id).join(MANIFEST_FILE);
        if manifest_path.exists() {
            let store = Self::open(root, &manifest.run_id)?;
            let stored = serde_json::to_value(&store.manifest.config).expect("config serializes");
            let offered = serde_json::to_value(&manifest.config).expect("config serializes");
            if stored != offered {
                return Err(StoreError::ConfigMismatch(manifest.run_id));
            }
            Ok(store)
        } else {
            Self::create(root, manifest)
        }
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn run_id(&self) -> &str {
        &self.manifest.run_id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Durably append one trial. Duplicate (problem, scenario) keys are
    /// rejected; the manifest was written at construction, so every record
    /// is preceded by one.
    pub fn append_record(&self, record: &TrialRecord) -> Result<(), StoreError> {
        if record.run_id != self.manifest.run_id {
            return Err(StoreError::RunIdMismatch {
                store: self.manifest.run_id.clone(),
                record: record.run_id.clone(),
            });
        }
        let line = serde_json::to_string(record).expect("trial record serializes");
        let mut state = self.state.lock().expect("store writer poisoned");
        if !state.keys.insert(record.key()) {
            return Err(StoreError::DuplicateTrial {
                problem_id: record.problem_id.clone(),
                scenario: record.scenario,
            });
        }
        let path = self.dir.join(RECORDS_FILE);
        let write = (|| {
            state.file.write_all(line.as_bytes())?;
            state.file.write_all(b"\n")?;
            state.file.flush()?;
            state.file.sync_data()
        })();
        if let Err(e) = write {
            state.keys.remove(&record.key());
            return Err(io_err(&path, e));
        }
        Ok(())
    }

    /// All parseable records. A torn final line is skipped so the valid
    /// prefix stays loadable; a corrupt line anywhere else is an error.
    pub fn load_records(&self) -> Result<Vec<TrialRecord>, StoreError> {
        Ok(load_lines(&self.dir.join(RECORDS_FILE))?
            .map(|scan| scan.records)
            .unwrap_or_default())
    }

    /// Problems with no recorded trial for this run's scenario, input order
    /// preserved.
    pub fn pending_trials(&self, problems: &[Problem]) -> Vec<String> {
        let state = self.state.lock().expect("store writer poisoned");
        let scenario = self.manifest.config.scenario;
        problems
            .iter()
            .filter(|p| !state.keys.contains(&(p.id.clone(), scenario)))
            .map(|p| p.id.clone())
            .collect()
    }

    pub fn recorded_keys(&self) -> HashSet<(String, ScenarioKind)> {
        self.state.lock().expect("store writer poisoned").keys.clone()
    }

    /// Run ids under a store root, sorted.
    pub fn list_runs(root: &Path) -> Result<Vec<String>, StoreError> {
        let mut runs = Vec::new();
        let entries = fs::read_dir(root).map_err(|e| io_err(root, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| io_err(root, e))?;
            if entry.path().join(MANIFEST_FILE).exists() {
                runs.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        runs.sort();
        Ok(runs)
    }

    /// Verify one run directory: every line parses, keys are unique, and
    /// the manifest's fingerprints still match. A torn final line is moved
    /// to `records.quarantine` so the remaining prefix is clean.
    pub fn integrity_check(root: &Path, run_id: &str) -> Result<IntegrityReport, StoreError> {
        let dir = root.join(run_id);
        let mut report = IntegrityReport {
            run_id: run_id.to_string(),
            records_ok: 0,
            quarantined_lines: 0,
            issues: Vec::new(),
        };

        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(StoreError::MissingManifest(run_id.to_string()));
        }
        let manifest: Option<RunManifest> = fs::read_to_string(&manifest_path)
            .map_err(|e| io_err(&manifest_path, e))
            .and_then(|text| {
                serde_json::from_str(&text).map_err(|e| StoreError::BadManifest {
                    run_id: run_id.to_string(),
                    message: e.to_string(),
                })
            })
            .map(Some)
            .unwrap_or_else(|e| {
                report.issues.push(IntegrityIssue::ManifestUnreadable { message: e.to_string() });
                None
            });

        let records_path = dir.join(RECORDS_FILE);
        if records_path.exists() {
            let text = fs::read_to_string(&records_path).map_err(|e| io_err(&records_path, e))?;
            let lines: Vec<&str> = text.lines().collect();
            let mut keys = HashSet::new();
            let mut keep: Vec<&str> = Vec::with_capacity(lines.len());
            for (index, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<TrialRecord>(line) {
                    Ok(record) => {
                        if !keys.insert(record.key()) {
                            report.issues.push(IntegrityIssue::DuplicateKey {
                                line: index + 1,
                                problem_id: record.problem_id.clone(),
                                scenario: record.scenario,
                            });
                        }
                        report.records_ok += 1;
                        keep.push(line);
                    }
                    Err(e) if index + 1 == lines.len() => {
                        // Torn tail from an interrupted append: quarantine it.
                        let quarantine = dir.join(QUARANTINE_FILE);
                        let mut qf = OpenOptions::new()
                            .create(true)
                            .append(true)
                            .open(&quarantine)
                            .map_err(|e| io_err(&quarantine, e))?;
                        qf.write_all(line.as_bytes()).map_err(|e| io_err(&quarantine, e))?;
                        qf.write_all(b"\n").map_err(|e| io_err(&quarantine, e))?;
                        let mut rewritten = keep.join("\n");
                        if !rewritten.is_empty() {
                            rewritten.push('\n');
                        }
                        fs::write(&records_path, rewritten).map_err(|e| io_err(&records_path, e))?;
                        report.quarantined_lines += 1;
                        log::warn!("run {run_id}: quarantined torn final record line: {e}");
                    }
                    Err(e) => {
                        report.issues.push(IntegrityIssue::CorruptLine {
                            line: index + 1,
                            message: e.to_string(),
                        });
                        keep.push(line);
                    }
                }
            }
        }

        if let Some(manifest) = manifest {
            let current = TemplateHashes::current();
            for (name, stored, live) in [
                ("solve", &manifest.template_hashes.solve, &current.solve),
                ("perturb", &manifest.template_hashes.perturb, &current.perturb),
                ("verify", &manifest.template_hashes.verify, &current.verify),
            ] {
                if stored != live {
                    report
                        .issues
                        .push(IntegrityIssue::TemplateHashMismatch { template: name.to_string() });
                }
            }
            let dataset_path = &manifest.config.dataset.path;
            if dataset_path.exists() {
                let fingerprint = dataset_fingerprint(
                    dataset_path,
                    manifest.config.dataset.symbolic_path.as_deref(),
                )?;
                if fingerprint != manifest.dataset_fingerprint {
                    report.issues.push(IntegrityIssue::DatasetFingerprintMismatch);
                }
            } else {
                report.issues.push(IntegrityIssue::DatasetFileMissing {
                    path: dataset_path.display().to_string(),
                });
            }
        }

        Ok(report)
    }
}

impl TrialSink for RunStore {
    fn append(&self, record: &TrialRecord) -> Result<(), StoreError> {
        self.append_record(record)
    }
}

/// Hash the dataset file (and the symbolic file for derived datasets).
pub fn dataset_fingerprint(path: &Path, symbolic: Option<&Path>) -> Result<String, StoreError> {
    let mut bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if let Some(symbolic) = symbolic {
        bytes.extend_from_slice(fs::read(symbolic).map_err(|e| io_err(symbolic, e))?.as_slice());
    }
    Ok(assets::sha256_hex(&bytes))
}

struct RecordScan {
    records: Vec<TrialRecord>,
}

/// Parse a records file; `None` when absent. The final line is allowed to
/// be torn, everything else must parse.
fn load_lines(path: &Path) -> Result<Option<RecordScan>, StoreError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::with_capacity(lines.len());
    for (index, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TrialRecord>(line) {
            Ok(record) => records.push(record),
            Err(e) if index + 1 == lines.len() => {
                log::warn!("{}: skipping torn final line: {e}", path.display());
            }
            Err(e) => {
                return Err(StoreError::CorruptLine {
                    path: path.display().to_string(),
                    line: index + 1,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok(Some(RecordScan { records }))
}

#[derive(Debug, Clone, Serialize)]
pub struct IntegrityReport {
    pub run_id: String,
    pub records_ok: usize,
    pub quarantined_lines: usize,
    pub issues: Vec<IntegrityIssue>,
}

impl IntegrityReport {
    pub fn is_clean(&self) -> bool {
        self.issues.is_empty() && self.quarantined_lines == 0
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntegrityIssue {
    ManifestUnreadable { message: String },
    CorruptLine { line: usize, message: String },
    DuplicateKey { line: usize, problem_id: String, scenario: ScenarioKind },
    TemplateHashMismatch { template: String },
    DatasetFingerprintMismatch,
    DatasetFileMissing { path: String },
}
