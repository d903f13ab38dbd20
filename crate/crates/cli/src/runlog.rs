//! Line-delimited JSON run log and the work-dir lock.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const LOG_FILE: &str = "pipeline.log.jsonl";
pub const LOCK_FILE: &str = ".lock";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Info,
    Warn,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub ts_ms: u64,
    pub level: Level,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    pub event: String,
    pub message: String,
    #[serde(skip_serializing_if = "Value::is_null", default)]
    pub data: Value,
}

/// Appends records to the log file once one is attached, and to stderr
/// before that. Remembers whether an error record went out.
#[derive(Default)]
pub struct RunLog {
    file: Option<File>,
    errored: bool,
    quiet: bool,
}

impl RunLog {
    pub fn new(quiet: bool) -> Self {
        Self {
            quiet,
            ..Self::default()
        }
    }

    pub fn attach(&mut self, work_dir: &Path) -> Result<()> {
        let path = work_dir.join(LOG_FILE);
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("opening log {}", path.display()))?;
        self.file = Some(f);
        Ok(())
    }

    pub fn errored(&self) -> bool {
        self.errored
    }

    pub fn emit(&mut self, level: Level, stage: Option<&str>, event: &str, message: impl Into<String>, data: Value) {
        let rec = LogRecord {
            ts_ms: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64),
            level,
            stage: stage.map(str::to_string),
            event: event.to_string(),
            message: message.into(),
            data,
        };
        if level == Level::Error {
            self.errored = true;
            eprintln!("error: {}", rec.message);
        }
        let line = serde_json::to_string(&rec).expect("log record serializes");
        match &mut self.file {
            // a failing log write must not mask the run's own outcome
            Some(f) => {
                let _ = writeln!(f, "{line}");
            }
            None if !self.quiet || level == Level::Error => eprintln!("{line}"),
            None => {}
        }
    }

    pub fn info(&mut self, stage: Option<&str>, event: &str, message: impl Into<String>, data: Value) {
        self.emit(Level::Info, stage, event, message, data);
    }

    pub fn error(&mut self, stage: Option<&str>, message: impl Into<String>) {
        self.emit(Level::Error, stage, "error", message, Value::Null);
    }
}

/// Exclusive hold on a work dir, released on drop.
pub struct WorkDirLock {
    path: PathBuf,
}

impl WorkDirLock {
    pub fn acquire(work_dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(work_dir).with_context(|| format!("creating work dir {}", work_dir.display()))?;
        let path = work_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = write!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let holder = std::fs::read_to_string(&path).unwrap_or_default();
                bail!(
                    "work dir {} is locked by process {} (delete {} if that run is gone)",
                    work_dir.display(),
                    holder.trim(),
                    path.display()
                )
            }
            Err(e) => Err(e).with_context(|| format!("creating lock {}", path.display())),
        }
    }
}

impl Drop for WorkDirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
