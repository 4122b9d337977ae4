//! Simulated crowd workers and annotators.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::LogicalForm;
use crate::grammar::GeneratorGrammar;
use crate::routing::Terminal;
use crate::scoring::Band;
use crate::vision::SegMask;
use crate::world::{Dims, Pos};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkerMode {
    Honest,
    Lazy,
    Adversarial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerProfile {
    pub id: String,
    pub mode: WorkerMode,
    pub mark_precision: f64,
    pub mark_recall: f64,
    pub annotation_error_rate: f64,
    /// Chance an adversarial worker sends garbage instead of a real command.
    #[serde(default = "default_garbage")]
    pub garbage_rate: f64,
    pub seed: u64,
}

fn default_garbage() -> f64 {
    0.5
}

impl WorkerProfile {
    pub fn honest(id: impl Into<String>, seed: u64) -> Self {
        WorkerProfile {
            id: id.into(),
            mode: WorkerMode::Honest,
            mark_precision: 0.89,
            mark_recall: 0.43,
            annotation_error_rate: 0.0,
            garbage_rate: 0.0,
            seed,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.mark_precision, self.mark_recall, self.annotation_error_rate, self.garbage_rate]
            .iter()
            .all(|p| (0.0..=1.0).contains(p))
            && self.mark_precision > 0.0
    }
}

/// A command with the ground truth only the simulator knows.
#[derive(Clone, Debug, PartialEq)]
pub struct Draft {
    pub text: String,
    /// `None` for text no logical form describes.
    pub truth: Option<LogicalForm>,
}

const GARBAGE: &[&str] = &[
    "let's play chess",
    "asdf qwer",
    "hello are you a robot",
    "lol",
    "what is the meaning of life",
    "sing me a song",
    "zzz zzz zzz",
    "i like turtles",
];

/// Worker state for one run: the profile plus its random stream and the
/// false-mark credit that realizes the configured precision.
#[derive(Clone, Debug)]
pub struct Worker {
    pub profile: WorkerProfile,
    rng: ChaCha8Rng,
    credit: f64,
    lazy_command: Option<Draft>,
}

impl Worker {
    pub fn new(profile: WorkerProfile) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(profile.seed);
        Worker { profile, rng, credit: 0.0, lazy_command: None }
    }

    /// Independent stream for one session, so sessions can run in any order.
    pub fn fork(&self, stream: u64) -> Worker {
        let mut w = self.clone();
        w.rng = ChaCha8Rng::seed_from_u64(self.profile.seed);
        w.rng.set_stream(stream);
        w
    }

    pub fn next_command(&mut self, grammar: &GeneratorGrammar, iteration: u32) -> Draft {
        match self.profile.mode {
            WorkerMode::Honest => {
                let pair = grammar.sample(iteration, &mut self.rng);
                Draft { text: pair.text, truth: Some(pair.lf) }
            }
            WorkerMode::Lazy => {
                if self.lazy_command.is_none() {
                    let pair = grammar.sample(0, &mut self.rng);
                    self.lazy_command = Some(Draft { text: pair.text, truth: Some(pair.lf) });
                }
                self.lazy_command.clone().expect("set above")
            }
            WorkerMode::Adversarial => {
                if self.rng.random_bool(self.profile.garbage_rate) {
                    Draft { text: GARBAGE.choose(&mut self.rng).expect("non-empty").to_string(), truth: None }
                } else {
                    let pair = grammar.sample(iteration, &mut self.rng);
                    Draft { text: pair.text, truth: Some(pair.lf) }
                }
            }
        }
    }

    /// The terminal this worker's answers reach, given the true one. Honest
    /// workers catch a true NLU error with probability `mark_recall`; every
    /// true mark earns `(1 - p) / p` credit, and a whole credit is spent
    /// marking a non-NLU command as NLU, so marks are true at rate `p`.
    pub fn mark(&mut self, truth: Terminal) -> Terminal {
        match self.profile.mode {
            WorkerMode::Lazy => Terminal::NoError,
            WorkerMode::Adversarial => *Terminal::ALL.choose(&mut self.rng).expect("non-empty"),
            WorkerMode::Honest => {
                let p = self.profile.mark_precision;
                if truth == Terminal::NluError {
                    if self.rng.random_bool(self.profile.mark_recall) {
                        self.credit += (1.0 - p) / p;
                        Terminal::NluError
                    } else {
                        Terminal::NoError
                    }
                } else if self.credit >= 1.0 {
                    self.credit -= 1.0;
                    Terminal::NluError
                } else {
                    truth
                }
            }
        }
    }

    /// Routing answers leading to [`Worker::mark`]'s terminal.
    pub fn mark_feedback(&mut self, truth: Terminal) -> Vec<bool> {
        self.mark(truth).answers()
    }

    pub fn qualifies(&mut self, adversarial_fail_rate: f64) -> bool {
        match self.profile.mode {
            WorkerMode::Adversarial => !self.rng.random_bool(adversarial_fail_rate),
            _ => true,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnnotateError {
    #[error("command cannot be annotated")]
    CannotAnnotate,
}

/// An annotator writing ground truth, wrong at `error_rate`.
#[derive(Clone, Debug)]
pub struct Annotator {
    pub error_rate: f64,
    rng: ChaCha8Rng,
}

impl Annotator {
    pub fn new(error_rate: f64, seed: u64) -> Self {
        Annotator { error_rate, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn oracle() -> Self {
        Annotator::new(0.0, 0)
    }

    /// The true form, or another template's form when the annotator errs.
    pub fn annotate_nlu(&mut self, draft: &Draft, grammar: &GeneratorGrammar) -> Result<LogicalForm, AnnotateError> {
        let truth = draft.truth.clone().ok_or(AnnotateError::CannotAnnotate)?;
        if self.error_rate > 0.0 && self.rng.random_bool(self.error_rate) {
            for _ in 0..16 {
                let other = grammar.sample(u32::MAX, &mut self.rng).lf;
                if other != truth {
                    return Ok(other);
                }
            }
        }
        Ok(truth)
    }

    /// The true mask, or a perturbed copy when the annotator errs.
    pub fn annotate_vision(&mut self, truth: &SegMask, dims: Dims) -> SegMask {
        if self.error_rate == 0.0 || !self.rng.random_bool(self.error_rate) {
            return truth.clone();
        }
        let mut out = truth.clone();
        let drop: Vec<Pos> = out.iter().copied().filter(|_| self.rng.random_bool(0.5)).collect();
        for p in drop {
            out.0.remove(&p);
        }
        for _ in 0..truth.len().max(1) {
            let p = Pos::new(self.rng.random_range(0..dims.width), self.rng.random_range(0..dims.height), self.rng.random_range(0..dims.length));
            out.0.insert(p);
        }
        if out == *truth {
            out.0.insert(Pos::new(0, 0, 0));
        }
        out
    }
}

/// Worker pool with blacklist bookkeeping.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerRegistry {
    pub entries: BTreeMap<String, WorkerEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkerEntry {
    pub profile: WorkerProfile,
    pub qualified: bool,
    pub blacklisted: bool,
    pub consecutive_red: usize,
}

pub const BLACKLIST_AFTER: usize = 3;

impl WorkerRegistry {
    pub fn add(&mut self, profile: WorkerProfile, qualified: bool) {
        self.entries.insert(profile.id.clone(), WorkerEntry { profile, qualified, blacklisted: false, consecutive_red: 0 });
    }

    pub fn may_start(&self, id: &str) -> bool {
        self.entries.get(id).is_some_and(|e| e.qualified && !e.blacklisted)
    }

    /// Count red sessions in a row; `k` of them blacklists the worker.
    pub fn blacklist_update(&mut self, id: &str, band: Band, k: usize) {
        if let Some(e) = self.entries.get_mut(id) {
            if band == Band::Red {
                e.consecutive_red += 1;
            } else {
                e.consecutive_red = 0;
            }
            if e.consecutive_red >= k {
                e.blacklisted = true;
            }
        }
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.values().map(|e| serde_json::to_string(e).expect("entry serializes") + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let mut reg = WorkerRegistry::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let e: WorkerEntry = serde_json::from_str(line)?;
            reg.entries.insert(e.profile.id.clone(), e);
        }
        Ok(reg)
    }
}

/// Parse a workers file: one profile per line.
pub fn parse_profiles(text: &str) -> Result<Vec<WorkerProfile>, serde_json::Error> {
    text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}
