//! Durable experiment records: one JSON document per experiment, written
//! atomically, plus the scheduler history.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::monocle::History;
use crate::orchestrator::Experiment;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub schema_version: u32,
    #[serde(flatten)]
    pub experiment: Experiment,
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub experiments: Vec<Experiment>,
    pub history: Option<History>,
    /// Files moved aside because they could not be read.
    pub quarantined: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct RecordStore {
    root: PathBuf,
}

impl RecordStore {
    pub fn open(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("experiments"))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn experiment_path(&self, id: &str) -> PathBuf {
        self.root.join("experiments").join(format!("{id}.json"))
    }

    fn write_atomic(&self, path: &Path, bytes: &[u8]) -> std::io::Result<()> {
        let dir = path.parent().unwrap_or(&self.root);
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }

    pub fn save(&self, experiment: &Experiment) -> std::io::Result<()> {
        let record = ExperimentRecord {
            schema_version: SCHEMA_VERSION,
            experiment: experiment.clone(),
        };
        let bytes = serde_json::to_vec_pretty(&record)?;
        self.write_atomic(&self.experiment_path(experiment.id.as_str()), &bytes)
    }

    pub fn save_history(&self, history: &History) -> std::io::Result<()> {
        self.write_atomic(
            &self.root.join("history.json"),
            &serde_json::to_vec_pretty(history)?,
        )
    }

    fn quarantine(&self, path: &Path) -> std::io::Result<PathBuf> {
        let dir = self.root.join("quarantine");
        fs::create_dir_all(&dir)?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "record".into());
        let mut target = dir.join(&name);
        let mut n = 1;
        while target.exists() {
            target = dir.join(format!("{name}.{n}"));
            n += 1;
        }
        fs::rename(path, &target)?;
        Ok(target)
    }

    /// Reads every record; unreadable ones are quarantined with a warning.
    pub fn load(&self) -> std::io::Result<LoadReport> {
        let mut report = LoadReport::default();
        let mut paths: Vec<PathBuf> = fs::read_dir(self.root.join("experiments"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let parsed = fs::read(&path)
                .map_err(|e| e.to_string())
                .and_then(|b| {
                    serde_json::from_slice::<ExperimentRecord>(&b).map_err(|e| e.to_string())
                })
                .and_then(|r| {
                    if r.schema_version != SCHEMA_VERSION {
                        Err(format!("unsupported schema_version {}", r.schema_version))
                    } else {
                        Ok(r)
                    }
                });
            match parsed {
                Ok(r) => report.experiments.push(r.experiment),
                Err(reason) => {
                    let moved = self.quarantine(&path)?;
                    log::warn!("quarantined {} ({reason})", moved.display());
                    report.quarantined.push(moved);
                }
            }
        }
        let history = self.root.join("history.json");
        if history.exists() {
            match fs::read(&history)
                .map_err(|e| e.to_string())
                .and_then(|b| serde_json::from_slice(&b).map_err(|e| e.to_string()))
            {
                Ok(h) => report.history = Some(h),
                Err(reason) => {
                    let moved = self.quarantine(&history)?;
                    log::warn!("quarantined {} ({reason})", moved.display());
                    report.quarantined.push(moved);
                }
            }
        }
        Ok(report)
    }
}
