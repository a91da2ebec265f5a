//! One participant's run: a baseline task set, then five iterations of
//! explanation, satisfaction and task set.
//!
//! A record is the fold of its events. Live calls build an event, and the same
//! `apply` used by log replay validates it and then mutates, so a rejected call
//! leaves the record untouched and `load(persist(s)) == s`.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blackbox::Possibility;
use crate::dataset::InstanceId;
use crate::experiment::Experiment;
use crate::explainers::{ExplainerKind, Explanation};
use crate::mental_model::{
    score_satisfaction, score_simulatability, update_state, Guess, LocalScores, MentalModelError, MentalModelState,
    SatisfactionResponse, SimulatabilityResponse,
};
use crate::policies::{select, PolicyConfig, PolicyError, PolicyKind};

pub const EXPERIMENTAL_ITERATIONS: u8 = 5;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("cannot {operation} while {phase}")]
    WrongPhase { operation: &'static str, phase: Phase },
    #[error("no explanation has been issued for iteration {0}")]
    ExplanationNotIssued(u8),
    #[error("an explanation was already issued for iteration {0}")]
    ExplanationAlreadyIssued(u8),
    #[error("explanation {0} is not in the catalog")]
    UnknownExplanation(u32),
    #[error("event belongs to session '{found}', not '{expected}'")]
    SessionMismatch { expected: String, found: String },
    #[error("event sequence {found} out of order (expected {expected})")]
    OutOfOrder { expected: u64, found: u64 },
    #[error("corrupt session log at byte {offset}: {reason}")]
    CorruptLog { offset: u64, reason: String },
    #[error("no session '{0}' in log")]
    UnknownSession(String),
    #[error(transparent)]
    Scoring(#[from] MentalModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", content = "t", rename_all = "snake_case")]
pub enum Phase {
    AwaitingBaseline,
    AwaitingIteration(u8),
    Complete,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::AwaitingBaseline => "awaiting_baseline",
            Phase::AwaitingIteration(_) => "awaiting_iteration",
            Phase::Complete => "complete",
        }
    }

    pub fn iteration(self) -> Option<u8> {
        match self {
            Phase::AwaitingIteration(t) => Some(t),
            _ => None,
        }
    }

    fn after(t: u8) -> Phase {
        if t >= EXPERIMENTAL_ITERATIONS {
            Phase::Complete
        } else {
            Phase::AwaitingIteration(t + 1)
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::AwaitingIteration(t) => write!(f, "awaiting_iteration({t})"),
            p => f.write_str(p.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    /// Negative-class example first.
    pub example_images: [InstanceId; 2],
    pub locals: Option<LocalScores>,
}

impl Baseline {
    pub fn resultant(&self) -> Option<u8> {
        self.locals.map(|l| l.resultant())
    }
}

/// The explanation chosen for the current iteration, fixed until it is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuedExplanation {
    pub t: u8,
    pub explanation_id: u32,
    pub kind: ExplainerKind,
    pub possibility: Possibility,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: u8,
    pub shown_explanation_id: u32,
    pub kind: ExplainerKind,
    pub possibility: Possibility,
    pub satisfaction: f64,
    pub satisfaction_items: Vec<u8>,
    pub locals: LocalScores,
    pub reward: u8,
    pub relative_reward: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event_type", content = "payload", rename_all = "snake_case")]
pub enum SessionEvent {
    SessionStarted {
        policy: PolicyKind,
        seed: u64,
        experiment_seed: u64,
        preset: String,
        fallback_dataset: bool,
        example_images: [InstanceId; 2],
        task_image_ids: Vec<InstanceId>,
    },
    BaselineScored {
        guesses: Vec<Guess>,
        locals: LocalScores,
    },
    ExplanationIssued(IssuedExplanation),
    IterationScored {
        t: u8,
        satisfaction_items: Vec<u8>,
        guesses: Vec<Guess>,
        locals: LocalScores,
    },
}

/// One line of the session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventEnvelope {
    pub session_id: String,
    pub seq: u64,
    #[serde(flatten)]
    pub event: SessionEvent,
    /// Unix milliseconds.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecord {
    pub session_id: String,
    pub policy: PolicyKind,
    pub seed: u64,
    pub experiment_seed: u64,
    pub phase: Phase,
    pub baseline: Baseline,
    pub iterations: Vec<IterationRecord>,
    pub state: MentalModelState,
    pub pending: Option<IssuedExplanation>,
    pub events: Vec<EventEnvelope>,
    persisted: usize,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl SessionRecord {
    /// Start a session against `exp`. The example images and task come from the
    /// experiment, so sessions with the same experiment seed see the same ones.
    pub fn start(session_id: impl Into<String>, policy: PolicyKind, seed: u64, exp: &Experiment) -> SessionRecord {
        let session_id = session_id.into();
        let started = SessionEvent::SessionStarted {
            policy,
            seed,
            experiment_seed: exp.seed,
            preset: exp.preset.name().to_string(),
            fallback_dataset: exp.preset.is_fallback(),
            example_images: exp.baseline_examples,
            task_image_ids: exp.task.image_ids(),
        };
        let envelope = EventEnvelope {
            session_id,
            seq: 0,
            event: started,
            timestamp: now_ms(),
        };
        Self::from_first(envelope).expect("a start event always founds a session")
    }

    fn from_first(envelope: EventEnvelope) -> Result<SessionRecord, SessionError> {
        if envelope.seq != 0 {
            return Err(SessionError::OutOfOrder {
                expected: 0,
                found: envelope.seq,
            });
        }
        let SessionEvent::SessionStarted {
            policy,
            seed,
            experiment_seed,
            example_images,
            ..
        } = &envelope.event
        else {
            return Err(SessionError::WrongPhase {
                operation: "record events before the session starts",
                phase: Phase::AwaitingBaseline,
            });
        };
        Ok(SessionRecord {
            session_id: envelope.session_id.clone(),
            policy: *policy,
            seed: *seed,
            experiment_seed: *experiment_seed,
            phase: Phase::AwaitingBaseline,
            baseline: Baseline {
                example_images: *example_images,
                locals: None,
            },
            iterations: Vec::new(),
            state: MentalModelState::default(),
            pending: None,
            events: vec![envelope],
            persisted: 0,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.phase == Phase::Complete
    }

    pub fn unpersisted(&self) -> &[EventEnvelope] {
        &self.events[self.persisted..]
    }

    fn wrong_phase(&self, operation: &'static str) -> SessionError {
        SessionError::WrongPhase {
            operation,
            phase: self.phase,
        }
    }

    /// Validate `event` against the current record, then fold it in.
    fn apply(&mut self, event: SessionEvent, timestamp: u64) -> Result<(), SessionError> {
        match &event {
            SessionEvent::SessionStarted { .. } => return Err(self.wrong_phase("start again")),
            SessionEvent::BaselineScored { locals, .. } => {
                if self.phase != Phase::AwaitingBaseline {
                    return Err(self.wrong_phase("submit the baseline"));
                }
                self.state = update_state(&self.state, None, None, *locals)?;
                self.baseline.locals = Some(*locals);
                self.phase = Phase::AwaitingIteration(1);
            }
            SessionEvent::ExplanationIssued(issued) => {
                let t = self
                    .phase
                    .iteration()
                    .ok_or_else(|| self.wrong_phase("issue an explanation"))?;
                if issued.t != t {
                    return Err(self.wrong_phase("issue an explanation for another iteration"));
                }
                if self.pending.is_some() {
                    return Err(SessionError::ExplanationAlreadyIssued(t));
                }
                self.pending = Some(*issued);
            }
            SessionEvent::IterationScored {
                t: event_t,
                satisfaction_items,
                locals,
                ..
            } => {
                let t = self
                    .phase
                    .iteration()
                    .ok_or_else(|| self.wrong_phase("submit an iteration"))?;
                if *event_t != t {
                    return Err(self.wrong_phase("submit another iteration"));
                }
                let issued = self.pending.ok_or(SessionError::ExplanationNotIssued(t))?;
                let satisfaction = score_satisfaction(&SatisfactionResponse {
                    items: satisfaction_items.clone(),
                })?;
                let base = self
                    .baseline
                    .resultant()
                    .ok_or_else(|| self.wrong_phase("submit an iteration"))?;
                let state = update_state(&self.state, Some(issued.kind), Some(satisfaction), *locals)?;
                let reward = locals.resultant();
                self.iterations.push(IterationRecord {
                    t,
                    shown_explanation_id: issued.explanation_id,
                    kind: issued.kind,
                    possibility: issued.possibility,
                    satisfaction,
                    satisfaction_items: satisfaction_items.clone(),
                    locals: *locals,
                    reward,
                    relative_reward: i32::from(reward) - i32::from(base),
                });
                self.state = state;
                self.pending = None;
                self.phase = Phase::after(t);
            }
        }
        self.events.push(EventEnvelope {
            session_id: self.session_id.clone(),
            seq: self.events.len() as u64,
            event,
            timestamp,
        });
        Ok(())
    }

    fn replay(&mut self, envelope: EventEnvelope) -> Result<(), SessionError> {
        if envelope.session_id != self.session_id {
            return Err(SessionError::SessionMismatch {
                expected: self.session_id.clone(),
                found: envelope.session_id,
            });
        }
        let expected = self.events.len() as u64;
        if envelope.seq != expected {
            return Err(SessionError::OutOfOrder {
                expected,
                found: envelope.seq,
            });
        }
        self.apply(envelope.event, envelope.timestamp)
    }

    pub fn submit_baseline(&mut self, exp: &Experiment, response: &SimulatabilityResponse) -> Result<(), SessionError> {
        if self.phase != Phase::AwaitingBaseline {
            return Err(self.wrong_phase("submit the baseline"));
        }
        let locals = score_simulatability(&exp.task, response)?;
        self.apply(
            SessionEvent::BaselineScored {
                guesses: response.guesses.clone(),
                locals,
            },
            now_ms(),
        )
    }

    /// The explanation for the current iteration. The first call per
    /// iteration runs the policy; later calls return the same explanation.
    pub fn current_explanation<'e>(&mut self, exp: &'e Experiment) -> Result<&'e Explanation, SessionError> {
        let t = self
            .phase
            .iteration()
            .ok_or_else(|| self.wrong_phase("show an explanation"))?;
        if let Some(issued) = self.pending {
            return exp
                .catalog
                .by_id(issued.explanation_id)
                .ok_or(SessionError::UnknownExplanation(issued.explanation_id));
        }
        let mut rng = policy_rng(&exp.policy_config, self.seed, t);
        let chosen = select(self.policy, &self.state, &exp.catalog, &exp.policy_config, &mut rng)?;
        self.apply(
            SessionEvent::ExplanationIssued(IssuedExplanation {
                t,
                explanation_id: chosen.explanation_id,
                kind: chosen.kind,
                possibility: chosen.possibility,
            }),
            now_ms(),
        )?;
        Ok(chosen)
    }

    pub fn submit_iteration(
        &mut self,
        exp: &Experiment,
        satisfaction: &SatisfactionResponse,
        response: &SimulatabilityResponse,
    ) -> Result<(), SessionError> {
        let t = self
            .phase
            .iteration()
            .ok_or_else(|| self.wrong_phase("submit an iteration"))?;
        if self.pending.is_none() {
            return Err(SessionError::ExplanationNotIssued(t));
        }
        score_satisfaction(satisfaction)?;
        let locals = score_simulatability(&exp.task, response)?;
        self.apply(
            SessionEvent::IterationScored {
                t,
                satisfaction_items: satisfaction.items.clone(),
                guesses: response.guesses.clone(),
                locals,
            },
            now_ms(),
        )
    }

    /// Append events not yet written to `path` as JSON lines.
    pub fn persist(&mut self, path: impl AsRef<Path>) -> Result<(), SessionError> {
        let pending = self.unpersisted();
        if pending.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for e in pending {
            serde_json::to_writer(&mut buf, e).map_err(io::Error::from)?;
            buf.push(b'\n');
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        file.write_all(&buf)?;
        file.flush()?;
        self.persisted = self.events.len();
        Ok(())
    }

    /// Rebuild one session from a log that may hold several.
    pub fn load(path: impl AsRef<Path>, session_id: &str) -> Result<SessionRecord, SessionError> {
        load_all(path)?
            .into_iter()
            .find(|r| r.session_id == session_id)
            .ok_or_else(|| SessionError::UnknownSession(session_id.to_string()))
    }
}

/// Per-iteration policy stream, derived from the policy seed and the session
/// seed so sessions never share draws.
pub fn policy_rng(config: &PolicyConfig, session_seed: u64, t: u8) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&config.seed.to_le_bytes());
    key[8..16].copy_from_slice(&session_seed.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(u64::from(t));
    rng
}

/// Every session in a log, in order of first appearance.
pub fn load_all(path: impl AsRef<Path>) -> Result<Vec<SessionRecord>, SessionError> {
    let bytes = fs::read(path)?;
    let mut records: Vec<SessionRecord> = Vec::new();
    let mut offset = 0u64;
    for line in bytes.split_inclusive(|&b| b == b'\n') {
        let here = offset;
        offset += line.len() as u64;
        let corrupt = |reason: String| SessionError::CorruptLog { offset: here, reason };
        let body = line.strip_suffix(b"\n").unwrap_or(line);
        if body.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let envelope: EventEnvelope = serde_json::from_slice(body).map_err(|e| corrupt(e.to_string()))?;
        match records.iter_mut().find(|r| r.session_id == envelope.session_id) {
            Some(record) => record.replay(envelope).map_err(|e| corrupt(e.to_string()))?,
            None => records.push(SessionRecord::from_first(envelope).map_err(|e| corrupt(e.to_string()))?),
        }
    }
    for r in &mut records {
        r.persisted = r.events.len();
    }
    Ok(records)
}

/// Every session in every `*.jsonl` file of `dir`, files in name order.
pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<SessionRecord>, SessionError> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        out.extend(load_all(p)?);
    }
    Ok(out)
}
