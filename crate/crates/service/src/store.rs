use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::http::StatusCode;
use thiserror::Error;

use seqex_core::experiment::Experiment;
use seqex_core::policies::PolicyKind;
use seqex_core::session::{load_dir, SessionError, SessionRecord};

use crate::error::ApiError;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("session '{id}' was run under experiment seed {found}, the server uses {expected}")]
    ExperimentMismatch { id: String, expected: u64, found: u64 },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// All live sessions. Each record has its own lock, so one session's
/// requests run one at a time while different sessions proceed in parallel.
#[derive(Debug)]
pub struct SessionStore {
    exp: Arc<Experiment>,
    log_dir: Option<PathBuf>,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionRecord>>>>,
}

impl SessionStore {
    /// Open a store, replaying every session logged under `log_dir`.
    pub fn open(exp: Experiment, log_dir: Option<PathBuf>) -> Result<Self, StoreError> {
        let mut sessions = HashMap::new();
        if let Some(dir) = &log_dir {
            std::fs::create_dir_all(dir)?;
            for record in load_dir(dir)? {
                if record.experiment_seed != exp.seed {
                    return Err(StoreError::ExperimentMismatch {
                        id: record.session_id,
                        expected: exp.seed,
                        found: record.experiment_seed,
                    });
                }
                sessions.insert(record.session_id.clone(), Arc::new(Mutex::new(record)));
            }
        }
        Ok(Self {
            exp: Arc::new(exp),
            log_dir,
            sessions: RwLock::new(sessions),
        })
    }

    pub fn experiment(&self) -> &Experiment {
        &self.exp
    }

    pub fn log_dir(&self) -> Option<&Path> {
        self.log_dir.as_deref()
    }

    fn persist(&self, record: &mut SessionRecord) -> Result<(), ApiError> {
        let Some(dir) = &self.log_dir else {
            return Ok(());
        };
        record
            .persist(dir.join(format!("{}.jsonl", record.session_id)))
            .map_err(|e| {
                tracing::error!(session = %record.session_id, "persist failed: {e}");
                ApiError::from(e)
            })
    }

    pub fn create(&self, policy: PolicyKind, seed: u64) -> Result<SessionRecord, ApiError> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let mut record = SessionRecord::start(id.clone(), policy, seed, &self.exp);
        self.persist(&mut record)?;
        let snapshot = record.clone();
        self.sessions
            .write()
            .expect("store lock")
            .insert(id, Arc::new(Mutex::new(record)));
        Ok(snapshot)
    }

    /// Run `f` with exclusive access to one session, then append whatever
    /// events it produced to the log.
    pub fn with_session<R>(
        &self,
        id: &str,
        f: impl FnOnce(&mut SessionRecord, &Experiment) -> Result<R, ApiError>,
    ) -> Result<R, ApiError> {
        let cell = self
            .sessions
            .read()
            .expect("store lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::unknown_session(id))?;
        let mut record = cell.lock().expect("session lock");
        let out = f(&mut record, &self.exp);
        if !record.unpersisted().is_empty() {
            self.persist(&mut record)?;
        }
        out
    }

    /// A consistent copy of every session.
    pub fn snapshot(&self) -> Vec<SessionRecord> {
        let cells: Vec<_> = self.sessions.read().expect("store lock").values().cloned().collect();
        let mut out: Vec<SessionRecord> = cells.iter().map(|c| c.lock().expect("session lock").clone()).collect();
        out.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        out
    }

    pub fn no_complete_sessions() -> ApiError {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "no_complete_sessions",
            "no session has completed yet",
        )
    }
}
