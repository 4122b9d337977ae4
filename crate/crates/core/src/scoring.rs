//! Session quality score (the stoplight), bonus and submission gating.

use serde::{Deserialize, Serialize};

use crate::dsl::tokenize;
use crate::edit::levenshtein;

/// Token-level Levenshtein distance between two commands.
pub fn word_edit_distance(a: &str, b: &str) -> usize {
    levenshtein(&tokenize(a), &tokenize(b))
}

/// Mean distance over unordered pairs; 0 for fewer than two commands.
pub fn diversity(commands: &[String]) -> f64 {
    let toks: Vec<Vec<String>> = commands.iter().map(|c| tokenize(c)).collect();
    let (mut sum, mut pairs) = (0usize, 0usize);
    for i in 0..toks.len() {
        for j in i + 1..toks.len() {
            sum += levenshtein(&toks[i], &toks[j]);
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        sum as f64 / pairs as f64
    }
}

/// Mean distance from `command` to every earlier command; 0 with no history.
pub fn creativity(command: &str, history: &[String]) -> f64 {
    if history.is_empty() {
        return 0.0;
    }
    let c = tokenize(command);
    let sum: usize = history.iter().map(|h| levenshtein(&c, &tokenize(h))).sum();
    sum as f64 / history.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Red,
    Yellow,
    Green,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    /// Weights for (command count, diversity, creativity).
    pub weights: [f64; 3],
    pub targets: [f64; 3],
    pub green: f64,
    pub yellow: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig { weights: [0.5, 0.25, 0.25], targets: [10.0, 4.0, 4.0], green: 7.0, yellow: 4.0 }
    }
}

impl ScoreConfig {
    pub fn band(&self, score: f64) -> Band {
        if score >= self.green {
            Band::Green
        } else if score >= self.yellow {
            Band::Yellow
        } else {
            Band::Red
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionScore {
    pub n_commands: usize,
    pub diversity: f64,
    pub creativity: f64,
    pub score: f64,
    pub band: Band,
}

/// Weighted average of saturating log ratios, scaled to 0..=10.
pub fn stoplight(n_commands: usize, diversity: f64, creativity: f64, config: &ScoreConfig) -> SessionScore {
    let xs = [n_commands as f64, diversity, creativity];
    let mut total = 0.0;
    for i in 0..3 {
        let t = config.targets[i];
        let part = if t <= 0.0 { 1.0 } else { ((1.0 + xs[i].max(0.0)).ln() / (1.0 + t).ln()).min(1.0) };
        total += config.weights[i] * part;
    }
    let score = (10.0 * total).clamp(0.0, 10.0);
    SessionScore { n_commands, diversity, creativity, score, band: config.band(score) }
}

/// Score a session from its commands and the per-command creativity values
/// computed when each was issued.
pub fn score_session(commands: &[String], creativities: &[f64], config: &ScoreConfig) -> SessionScore {
    let c = if creativities.is_empty() { 0.0 } else { creativities.iter().sum::<f64>() / creativities.len() as f64 };
    stoplight(commands.len(), diversity(commands), c, config)
}

pub fn bonus(score: f64, base_pay: f64, per_point: f64) -> f64 {
    base_pay + per_point * score.clamp(0.0, 10.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub min_seconds: u64,
    pub min_commands: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig { min_seconds: 300, min_commands: 5 }
    }
}

/// Gate outcome. Only `allowed` may be shown to the worker.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateDecision {
    pub allowed: bool,
    pub reasons: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerGateView {
    pub allowed: bool,
}

impl GateDecision {
    pub fn worker_view(&self) -> WorkerGateView {
        WorkerGateView { allowed: self.allowed }
    }
}

pub fn submission_gate(elapsed_seconds: u64, n_commands: usize, config: &GateConfig) -> GateDecision {
    let mut reasons = Vec::new();
    if elapsed_seconds < config.min_seconds {
        reasons.push(format!("elapsed {elapsed_seconds}s < {}s", config.min_seconds));
    }
    if n_commands < config.min_commands {
        reasons.push(format!("{n_commands} commands < {}", config.min_commands));
    }
    GateDecision { allowed: reasons.is_empty(), reasons }
}
