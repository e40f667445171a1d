//! Inference sessions with a managed window and background retrieval.
//!
//! The live context never grows past its generation budget: when a turn
//! would overflow it, the oldest region is compressed into the database as
//! one chunk. Retrieval runs either inline or through a [`Scheduler`], whose
//! results are merged only at token boundaries.

use std::collections::VecDeque;
use std::fmt;
use std::sync::mpsc::{self, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use hmem_autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::compressor::build_hierarchy;
use crate::error::{Error, Result};
use crate::memstore::HierDatabase;
use crate::model::Transformer;
use crate::retriever::{format_trace, retrieve_from_db, RetrievalConfig, RetrievedPrefix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriggerMode {
    /// Retrieve before every generation turn.
    Always,
    /// Retrieve when CALL_RETRIEVAL is emitted.
    Token,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub window_size: usize,
    /// Slots reserved for the retrieved soft prefix; the rest hold live tokens.
    pub retrieval_slots: usize,
    pub k: usize,
    pub retrieval: RetrievalConfig,
    pub trigger: TriggerMode,
    pub max_new_tokens: usize,
}

impl SessionConfig {
    pub fn generation_slots(&self) -> usize {
        self.window_size - self.retrieval_slots
    }

    pub fn validate(&self, model: &Transformer) -> Result<()> {
        self.retrieval.validate()?;
        if self.k < 2 {
            return Err(Error::Config("compression factor must be at least 2".into()));
        }
        if self.window_size > model.config().max_positions {
            return Err(Error::Config(format!(
                "window of {} exceeds the model's {} positions",
                self.window_size,
                model.config().max_positions
            )));
        }
        if self.retrieval_slots < self.retrieval.num_ret_tokens {
            return Err(Error::Config(format!(
                "{} retrieval slots cannot hold {} retrieval embeddings",
                self.retrieval_slots, self.retrieval.num_ret_tokens
            )));
        }
        // Eviction needs room for at least one kept token plus the turn's output.
        if self.generation_slots() < self.max_new_tokens + 2 {
            return Err(Error::Config(format!(
                "{} generation slots leave no room for {} new tokens",
                self.generation_slots(),
                self.max_new_tokens
            )));
        }
        Ok(())
    }
}

/// One scripted user turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub tokens: Vec<u32>,
    /// Generation step at which CALL_RETRIEVAL is injected in place of the
    /// model's token. Learned emission also triggers in token mode.
    #[serde(default)]
    pub trigger_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    Input { tokens: Vec<u32> },
    Evicted { chunk_id: u64, tokens: Vec<u32> },
    RetrievalStarted { step: usize },
    RetrievalCoalesced { step: usize },
    RetrievalSkipped { step: usize, reason: String },
    PrefixMerged { step: usize, rows: usize, trace: String },
    Token { step: usize, id: u32 },
}

impl fmt::Display for SessionEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Input { tokens } => write!(f, "input {tokens:?}"),
            Self::Evicted { chunk_id, tokens } => {
                write!(f, "evict chunk {chunk_id} ({} tokens)", tokens.len())
            }
            Self::RetrievalStarted { step } => write!(f, "[{step}] retrieval started"),
            Self::RetrievalCoalesced { step } => write!(f, "[{step}] retrieval coalesced"),
            Self::RetrievalSkipped { step, reason } => {
                write!(f, "[{step}] retrieval skipped: {reason}")
            }
            Self::PrefixMerged { step, rows, trace } => {
                write!(f, "[{step}] merged {rows}-row prefix\n{}", trace.trim_end())
            }
            Self::Token { step, id } => write!(f, "[{step}] token {id}"),
        }
    }
}

/// Immutable inputs of one retrieval.
#[derive(Clone)]
pub struct RetrievalJob {
    pub model: Arc<Transformer>,
    pub db: Arc<HierDatabase>,
    pub context: Vec<u32>,
    pub config: RetrievalConfig,
}

impl RetrievalJob {
    pub fn run(&self) -> Result<RetrievedPrefix> {
        retrieve_from_db(&self.model, &self.db, &self.context, &self.config)
    }
}

/// Runs retrieval jobs off the generation path.
///
/// `poll` is called once per token boundary and hands back a finished
/// result at most once.
pub trait Scheduler {
    fn submit(&mut self, job: RetrievalJob);
    fn poll(&mut self) -> Option<Result<RetrievedPrefix>>;
}

/// Completes every job before `submit` returns.
#[derive(Default)]
pub struct ImmediateScheduler {
    done: Option<Result<RetrievedPrefix>>,
}

impl Scheduler for ImmediateScheduler {
    fn submit(&mut self, job: RetrievalJob) {
        self.done = Some(job.run());
    }

    fn poll(&mut self) -> Option<Result<RetrievedPrefix>> {
        self.done.take()
    }
}

/// Releases each result after a fixed number of token boundaries.
pub struct DelayedScheduler {
    delay: usize,
    queue: VecDeque<(usize, Result<RetrievedPrefix>)>,
}

impl DelayedScheduler {
    pub fn new(delay: usize) -> Self {
        Self {
            delay,
            queue: VecDeque::new(),
        }
    }
}

impl Scheduler for DelayedScheduler {
    fn submit(&mut self, job: RetrievalJob) {
        self.queue.push_back((self.delay, job.run()));
    }

    fn poll(&mut self) -> Option<Result<RetrievedPrefix>> {
        let (wait, _) = self.queue.front_mut()?;
        if *wait > 0 {
            *wait -= 1;
            return None;
        }
        self.queue.pop_front().map(|(_, r)| r)
    }
}

/// Runs each job on a background thread.
#[derive(Default)]
pub struct ThreadScheduler {
    running: Option<(JoinHandle<()>, Receiver<Result<RetrievedPrefix>>)>,
}

impl Scheduler for ThreadScheduler {
    fn submit(&mut self, job: RetrievalJob) {
        let (tx, rx) = mpsc::channel();
        let handle = std::thread::spawn(move || {
            // The receiver only disappears if the session was dropped.
            let _ = tx.send(job.run());
        });
        self.running = Some((handle, rx));
    }

    fn poll(&mut self) -> Option<Result<RetrievedPrefix>> {
        let result = self.running.as_ref()?.1.try_recv().ok()?;
        if let Some((handle, _)) = self.running.take() {
            let _ = handle.join();
        }
        Some(result)
    }
}

/// Mutable state of one session.
pub struct SessionState {
    pub config: SessionConfig,
    pub live: Vec<u32>,
    pub db: Arc<HierDatabase>,
    pub prefix: Option<Tensor>,
    pub pending: bool,
}

pub struct Session {
    model: Arc<Transformer>,
    state: SessionState,
    scheduler: Option<Box<dyn Scheduler>>,
    transcript: Vec<SessionEvent>,
    step: usize,
}

impl Session {
    /// With no scheduler, retrieval blocks generation.
    pub fn new(
        model: Arc<Transformer>,
        db: HierDatabase,
        config: SessionConfig,
        scheduler: Option<Box<dyn Scheduler>>,
    ) -> Result<Self> {
        config.validate(&model)?;
        db.check_fingerprint(model.fingerprint()?)?;
        if db.k() != config.k {
            return Err(Error::ConfigMismatch {
                field: "k",
                expected: config.k as u64,
                actual: db.k() as u64,
            });
        }
        Ok(Self {
            model,
            state: SessionState {
                config,
                live: Vec::new(),
                db: Arc::new(db),
                prefix: None,
                pending: false,
            },
            scheduler,
            transcript: Vec::new(),
            step: 0,
        })
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn transcript(&self) -> &[SessionEvent] {
        &self.transcript
    }

    pub fn into_parts(self) -> (Vec<SessionEvent>, HierDatabase) {
        let db = Arc::try_unwrap(self.state.db).unwrap_or_else(|db| (*db).clone());
        (self.transcript, db)
    }

    /// Feeds one turn and generates a reply; returns the generated tokens.
    pub fn turn(&mut self, turn: &Turn) -> Result<Vec<u32>> {
        let vocab = self.model.config().vocab_size;
        if let Some(&t) = turn.tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Config(format!("input token {t} is outside the vocabulary")));
        }
        self.transcript.push(SessionEvent::Input {
            tokens: turn.tokens.clone(),
        });
        self.state.live.extend_from_slice(&turn.tokens);
        self.make_room()?;

        if self.state.config.trigger == TriggerMode::Always {
            self.trigger()?;
        }
        let ids = self.model.config().clone();
        let mut out = Vec::new();
        for i in 0..self.state.config.max_new_tokens {
            self.boundary()?;
            let token = if turn.trigger_at == Some(i) {
                ids.call_retrieval_id
            } else {
                self.next_token()?
            };
            self.transcript.push(SessionEvent::Token {
                step: self.step,
                id: token,
            });
            self.step += 1;
            self.state.live.push(token);
            out.push(token);
            if token == ids.call_retrieval_id && self.state.config.trigger == TriggerMode::Token {
                self.trigger()?;
            }
            if token == ids.eos_id {
                break;
            }
        }
        self.boundary()?;
        Ok(out)
    }

    /// Runs all turns, then drains any retrieval still in flight.
    pub fn run(&mut self, turns: &[Turn]) -> Result<()> {
        for t in turns {
            self.turn(t)?;
        }
        self.finish()
    }

    /// Waits for a pending retrieval and merges it.
    pub fn finish(&mut self) -> Result<()> {
        while self.state.pending {
            self.boundary()?;
            if self.state.pending {
                std::thread::yield_now();
            }
        }
        Ok(())
    }

    /// Evicts the oldest region as one chunk if the turn could overflow.
    fn make_room(&mut self) -> Result<()> {
        let cfg = &self.state.config;
        let budget = cfg.generation_slots();
        let projected = self.state.live.len() + cfg.max_new_tokens;
        if projected <= budget {
            return Ok(());
        }
        let count = (budget / 2).max(projected - budget);
        let max = self.model.config().max_positions;
        if count > max {
            return Err(Error::WindowOverflow { needed: count, max });
        }
        let evicted: Vec<u32> = self.state.live.drain(..count).collect();
        let hierarchy = build_hierarchy(&self.model, &evicted, cfg.k)?;
        let chunk_id = Arc::make_mut(&mut self.state.db).put_chunk(hierarchy)?;
        self.transcript.push(SessionEvent::Evicted {
            chunk_id,
            tokens: evicted,
        });
        Ok(())
    }

    fn trigger(&mut self) -> Result<()> {
        let step = self.step;
        if self.state.pending {
            self.transcript.push(SessionEvent::RetrievalCoalesced { step });
            return Ok(());
        }
        let reason = if self.state.db.is_empty() {
            Some("empty database")
        } else if self.state.live.is_empty() {
            Some("empty context")
        } else {
            None
        };
        if let Some(reason) = reason {
            self.transcript.push(SessionEvent::RetrievalSkipped {
                step,
                reason: reason.into(),
            });
            return Ok(());
        }
        self.transcript.push(SessionEvent::RetrievalStarted { step });
        let job = RetrievalJob {
            model: Arc::clone(&self.model),
            db: Arc::clone(&self.state.db),
            context: self.state.live.clone(),
            config: self.state.config.retrieval.clone(),
        };
        match &mut self.scheduler {
            Some(s) => {
                s.submit(job);
                self.state.pending = true;
            }
            None => self.merge(job.run()?),
        }
        Ok(())
    }

    /// Token boundary: the only place a background result enters the state.
    fn boundary(&mut self) -> Result<()> {
        if !self.state.pending {
            return Ok(());
        }
        if let Some(result) = self.scheduler.as_mut().and_then(|s| s.poll()) {
            self.state.pending = false;
            self.merge(result?);
        }
        Ok(())
    }

    fn merge(&mut self, r: RetrievedPrefix) {
        let trace = r
            .traces
            .iter()
            .enumerate()
            .map(|(i, t)| format!("ret {i}\n{}", format_trace(t)))
            .collect::<String>();
        self.transcript.push(SessionEvent::PrefixMerged {
            step: self.step,
            rows: r.prefix.shape()[0],
            trace,
        });
        self.state.prefix = Some(r.prefix);
    }

    fn next_token(&self) -> Result<u32> {
        crate::model::next_token(&self.model, &self.state.live, self.state.prefix.as_ref())
    }
}

/// Formats a transcript one event per line.
pub fn format_transcript(events: &[SessionEvent]) -> String {
    events.iter().map(|e| format!("{e}\n")).collect()
}
