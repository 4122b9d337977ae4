//! Exemplar-retrieval semantic parser.
//!
//! Parsing finds the stored exemplar nearest to the input under normalized
//! word-level Levenshtein distance and re-aligns its spans onto the input.
//! Each exemplar's distance is divided by its weight, so up-weighted
//! (re-biased) exemplars win ties and near-ties. Remaining ties go to the
//! heavier exemplar, then to the earliest inserted.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{self, LogicalForm, Span};
use crate::edit;
use crate::par::Exec;

#[derive(Debug, Error)]
pub enum ParseError {
    #[error("the parser has no exemplars")]
    EmptyModel,
    #[error("empty command")]
    EmptyText,
    #[error("invalid training pair {text:?}: {reason}")]
    InvalidPair { text: String, reason: String },
    #[error("bad exemplar record: {0}")]
    BadRecord(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A command text with its ground-truth logical form. Spans index message 0.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub text: String,
    pub lf: LogicalForm,
}

impl Pair {
    pub fn new(text: impl Into<String>, lf: LogicalForm) -> Self {
        Pair { text: text.into(), lf }
    }

    pub fn tokens(&self) -> Vec<String> {
        dsl::tokenize(&self.text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exemplar {
    pub tokens: Vec<String>,
    pub lf: LogicalForm,
    pub tranche_id: u32,
    pub weight: f64,
    ids: Vec<u32>,
    canonical: String,
}

/// Line-delimited persistence record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExemplarRecord {
    pub text: String,
    /// Canonical LF text.
    pub lf: String,
    pub tranche_id: u32,
}

impl ExemplarRecord {
    pub fn from_pair(pair: &Pair, tranche_id: u32) -> Self {
        ExemplarRecord { text: pair.text.clone(), lf: pair.lf.canonical(), tranche_id }
    }

    pub fn to_pair(&self) -> Result<Pair, crate::dsl::DslError> {
        Ok(Pair::new(self.text.clone(), LogicalForm::from_canonical(&self.lf)?))
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParserModel {
    exemplars: Vec<Exemplar>,
    vocab: HashMap<String, u32>,
    index: HashMap<Vec<u32>, usize>,
    pub k: usize,
    pub rebias_factor: f64,
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    score: f64,
    weight: f64,
    index: usize,
}

impl Candidate {
    fn cmp(&self, other: &Candidate) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then(other.weight.total_cmp(&self.weight))
            .then(self.index.cmp(&other.index))
    }
}

impl ParserModel {
    pub fn new() -> Self {
        ParserModel { k: 1, rebias_factor: 1.0, ..Default::default() }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k.max(1);
        self
    }

    pub fn len(&self) -> usize {
        self.exemplars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exemplars.is_empty()
    }

    pub fn exemplars(&self) -> &[Exemplar] {
        &self.exemplars
    }

    fn intern(&mut self, tokens: &[String]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| {
                let next = self.vocab.len() as u32;
                *self.vocab.entry(t.clone()).or_insert(next)
            })
            .collect()
    }

    /// Unknown tokens get ids no exemplar uses; distinct unknown words stay distinct.
    fn lookup(&self, tokens: &[String]) -> Vec<u32> {
        let mut unknown: HashMap<&str, u32> = HashMap::new();
        tokens
            .iter()
            .map(|t| match self.vocab.get(t) {
                Some(&id) => id,
                None => {
                    let next = u32::MAX - unknown.len() as u32;
                    *unknown.entry(t.as_str()).or_insert(next)
                }
            })
            .collect()
    }

    /// Append pairs as exemplars of `tranche_id` with weight 1. A pair whose
    /// tokens and LF both match an existing exemplar is skipped; a pair whose
    /// tokens match but LF differs replaces that exemplar's annotation.
    pub fn train(mut self, pairs: &[Pair], tranche_id: u32) -> Result<Self, ParseError> {
        for pair in pairs {
            let tokens = pair.tokens();
            let violations = dsl::validate_against(&pair.lf, std::slice::from_ref(&tokens));
            if tokens.is_empty() || !violations.is_empty() {
                let reason = if tokens.is_empty() {
                    "empty text".to_string()
                } else {
                    violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")
                };
                return Err(ParseError::InvalidPair { text: pair.text.clone(), reason });
            }
            let ids = self.intern(&tokens);
            let canonical = pair.lf.canonical();
            if let Some(&at) = self.index.get(&ids) {
                let ex = &mut self.exemplars[at];
                if ex.canonical != canonical {
                    ex.lf = pair.lf.clone();
                    ex.canonical = canonical;
                    ex.tranche_id = tranche_id;
                    ex.weight = if tranche_id == 0 { self.rebias_factor } else { 1.0 };
                }
                continue;
            }
            self.index.insert(ids.clone(), self.exemplars.len());
            self.exemplars.push(Exemplar { tokens, lf: pair.lf.clone(), tranche_id, weight: 1.0, ids, canonical });
        }
        Ok(self)
    }

    /// Multiply tranche-0 weights by `factor` (≥ 1).
    pub fn rebias(mut self, factor: f64) -> Self {
        assert!(factor >= 1.0, "rebias factor must be at least 1");
        for ex in self.exemplars.iter_mut().filter(|e| e.tranche_id == 0) {
            ex.weight *= factor;
        }
        self.rebias_factor *= factor;
        self
    }

    fn ranked(&self, query: &[u32]) -> Vec<Candidate> {
        let k = self.k.max(1);
        let mut best: Vec<Candidate> = Vec::with_capacity(k + 1);
        for (index, ex) in self.exemplars.iter().enumerate() {
            let m = query.len().max(ex.ids.len());
            let denom = m as f64 * ex.weight;
            if best.len() == k {
                let worst = best[k - 1].score;
                // Length difference is a lower bound on the edit distance.
                let bound = query.len().abs_diff(ex.ids.len()) as f64 / denom;
                if bound > worst {
                    continue;
                }
            }
            let score = if m == 0 { 0.0 } else { edit::levenshtein(query, &ex.ids) as f64 / denom };
            let cand = Candidate { score, weight: ex.weight, index };
            let pos = best.partition_point(|b| b.cmp(&cand) == Ordering::Less);
            if pos < k {
                best.insert(pos, cand);
                best.truncate(k);
            }
        }
        best
    }

    /// Index of the exemplar that `parse` would retrieve.
    pub fn nearest(&self, tokens: &[String]) -> Option<usize> {
        self.ranked(&self.lookup(tokens)).first().map(|c| c.index)
    }

    pub fn parse(&self, text: &str, chat_index: u32) -> Result<LogicalForm, ParseError> {
        self.parse_tokens(&dsl::tokenize(text), chat_index)
    }

    pub fn parse_tokens(&self, tokens: &[String], chat_index: u32) -> Result<LogicalForm, ParseError> {
        if self.exemplars.is_empty() {
            return Err(ParseError::EmptyModel);
        }
        if tokens.is_empty() {
            return Err(ParseError::EmptyText);
        }
        let ranked = self.ranked(&self.lookup(tokens));
        let realigned: Vec<(LogicalForm, String)> = ranked
            .iter()
            .map(|c| {
                let ex = &self.exemplars[c.index];
                let mut lf = realign_spans(&ex.lf, &ex.tokens, tokens);
                lf.visit_spans_mut(|s| s.text_index = chat_index);
                let key = lf.canonical();
                (lf, key)
            })
            .collect();
        // Majority vote among the k nearest; ties go to the better-ranked form.
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for (_, key) in &realigned {
            *counts.entry(key.as_str()).or_default() += 1;
        }
        let top = realigned
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| counts[a.1.as_str()].cmp(&counts[b.1.as_str()]).then(j.cmp(i)))
            .map(|(i, _)| i)
            .expect("at least one candidate");
        Ok(realigned[top].0.clone())
    }

    /// Fraction of pairs whose parse canonicalizes to the ground truth.
    /// An empty dataset scores 1.0.
    pub fn evaluate(&self, dataset: &[Pair], exec: Exec) -> f64 {
        if dataset.is_empty() {
            return 1.0;
        }
        let hits = exec.map(dataset, |pair| match self.parse(&pair.text, 0) {
            Ok(lf) => usize::from(lf.canonical() == pair.lf.canonical()),
            Err(_) => 0,
        });
        hits.iter().sum::<usize>() as f64 / dataset.len() as f64
    }

    pub fn save(&self, mut w: impl Write) -> Result<(), ParseError> {
        for ex in &self.exemplars {
            let rec = ExemplarRecord { text: ex.tokens.join(" "), lf: ex.canonical.clone(), tranche_id: ex.tranche_id };
            serde_json::to_writer(&mut w, &rec).map_err(|e| ParseError::BadRecord(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Rebuild from saved records; weights start at 1.
    pub fn load(r: impl BufRead) -> Result<Self, ParseError> {
        let mut model = ParserModel::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ExemplarRecord = serde_json::from_str(&line).map_err(|e| ParseError::BadRecord(e.to_string()))?;
            let lf = LogicalForm::from_canonical(&rec.lf).map_err(|e| ParseError::BadRecord(e.to_string()))?;
            model = model.train(&[Pair::new(rec.text, lf)], rec.tranche_id)?;
        }
        Ok(model)
    }
}

/// Move each span of `lf` from `src` onto `dst`. An exact occurrence of the
/// span's words in `dst` wins (the one nearest where an optimal alignment
/// maps the span, then the earliest); otherwise the `dst` window
/// with the smallest edit distance to those words, preferring windows close
/// to where an optimal alignment maps the span, then earlier windows.
pub fn realign_spans(lf: &LogicalForm, src: &[String], dst: &[String]) -> LogicalForm {
    let mut out = lf.clone();
    if dst.is_empty() {
        return out;
    }
    let map = if src.is_empty() { Vec::new() } else { edit::alignment_map(src, dst) };
    out.visit_spans_mut(|span| {
        let Some(words) = span.slice(src) else { return };
        let text_index = span.text_index;
        let (ms, me) = (map[span.start as usize], map[span.end as usize]);
        let exact = find_windows(dst, words).min_by_key(|&s| (s.abs_diff(ms) + (s + words.len() - 1).abs_diff(me), s));
        *span = match exact {
            Some(start) => Span::new(text_index, start as u32, (start + words.len() - 1) as u32),
            None => {
                let (s, e) = closest_window(dst, words, ms, me);
                Span::new(text_index, s as u32, e as u32)
            }
        };
    });
    out
}

fn find_windows<'a>(hay: &'a [String], needle: &'a [String]) -> impl Iterator<Item = usize> + 'a {
    let n = if needle.is_empty() || needle.len() > hay.len() { 0 } else { hay.len() - needle.len() + 1 };
    (0..n).filter(move |&s| hay[s..s + needle.len()] == *needle)
}

/// Minimum-edit-distance window of `hay` with respect to `needle`.
pub fn closest_window(hay: &[String], needle: &[String], hint_start: usize, hint_end: usize) -> (usize, usize) {
    let mut best = (usize::MAX, usize::MAX, 0usize, 0usize);
    for s in 0..hay.len() {
        for e in s..hay.len() {
            let d = edit::levenshtein(&hay[s..=e], needle);
            let off = s.abs_diff(hint_start) + e.abs_diff(hint_end);
            if (d, off) < (best.0, best.1) {
                best = (d, off, s, e);
            }
        }
    }
    (best.2, best.3)
}
