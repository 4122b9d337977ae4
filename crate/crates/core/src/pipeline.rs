//! The human-in-the-loop pipeline: deduplication, annotation queues, the
//! tranche registry, funnel statistics, and the iterate-retrain loop with
//! its evaluation matrix.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{self, LogicalForm};
use crate::grammar::GeneratorGrammar;
use crate::par::Exec;
use crate::parser::{ExemplarRecord, Pair, ParseError, ParserModel};
use crate::routing::Terminal;
use crate::session::{session_world, CommandRecord, Session, SessionConfig};
use crate::vision::{is_correct, SceneObject, SegMask, SegModel, VisionExample, VisionRecord};
use crate::worker::{Annotator, Draft, Worker, WorkerProfile};
use crate::world::{SnapshotError, WorldSnapshot};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("registry: {0}")]
    Registry(String),
    #[error("bad record: {0}")]
    Record(String),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
}

/// Lowercase, trim, collapse internal whitespace.
pub fn normalize(text: &str) -> String {
    text.split_whitespace().map(|w| w.to_lowercase()).collect::<Vec<_>>().join(" ")
}

/// Normalized keys seen so far.
#[derive(Clone, Debug, Default)]
pub struct Deduper {
    seen: HashSet<String>,
}

impl Deduper {
    /// True the first time a normalized text is offered.
    pub fn admit(&mut self, text: &str) -> bool {
        self.seen.insert(normalize(text))
    }

    pub fn len(&self) -> usize {
        self.seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seen.is_empty()
    }
}

/// First occurrence of each normalized text, minus records the annotator
/// judged invalid. Records without a verdict are kept.
pub fn dedup_and_filter(records: &[CommandRecord]) -> Vec<CommandRecord> {
    let mut d = Deduper::default();
    records.iter().filter(|r| d.admit(&r.text) && r.valid != Some(false)).cloned().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Default for Split<T> {
    fn default() -> Self {
        Split { train: Vec::new(), valid: Vec::new(), test: Vec::new() }
    }
}

impl<T> Split<T> {
    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.train.len(), self.valid.len(), self.test.len()]
    }
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.7, 0.15, 0.15];

/// Seeded shuffle, then train and valid take the floor of their share and
/// test takes the remainder.
pub fn split_tranche<T>(mut items: Vec<T>, ratios: [f64; 3], seed: u64) -> Split<T> {
    assert!((ratios.iter().sum::<f64>() - 1.0).abs() < 1e-9, "ratios must sum to 1");
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = items.len();
    // The epsilon keeps 90 * 0.7 from flooring to 62.
    let floor = |r: f64| (n as f64 * r + 1e-9).floor() as usize;
    let n_train = floor(ratios[0]).min(n);
    let n_valid = floor(ratios[1]).min(n - n_train);
    let test = items.split_off(n_train + n_valid);
    let valid = items.split_off(n_train);
    Split { train: items, valid, test }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub n: u32,
    pub seed: u64,
    pub nlu: [usize; 3],
    pub vision: [usize; 3],
    /// Logical commit time: the registry's commit counter.
    pub committed_at: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tranche {
    pub n: u32,
    pub seed: u64,
    pub nlu: Split<Pair>,
    pub vision: Split<VisionExample>,
}

impl Tranche {
    pub fn empty(n: u32, seed: u64) -> Self {
        Tranche { n, seed, nlu: Split::default(), vision: Split::default() }
    }
}

const SPLITS: [&str; 3] = ["train", "valid", "test"];

fn tranche_dir(root: &Path, n: u32) -> PathBuf {
    root.join(format!("tranche_{n:04}"))
}

/// Write one JSON value per line.
pub fn write_lines<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<(), PipelineError> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| PipelineError::Record(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let mut out = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Record(e.to_string()))?);
        }
    }
    Ok(out)
}

/// Tranches 0..N, append-only. With a root directory every commit is
/// written as `tranche_NNNN/` holding `nlu_{train,valid,test}.jsonl`,
/// `vision_{train,valid,test}.jsonl` and `manifest.json`.
#[derive(Clone, Debug, Default)]
pub struct DatasetRegistry {
    tranches: Vec<Tranche>,
    manifests: Vec<Manifest>,
    root: Option<PathBuf>,
}

impl DatasetRegistry {
    pub fn in_memory() -> Self {
        DatasetRegistry::default()
    }

    /// An empty registry persisting under `root`.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        if tranche_dir(&root, 0).exists() {
            return Err(PipelineError::Registry(format!("{} already holds a registry", root.display())));
        }
        Ok(DatasetRegistry { root: Some(root), ..Default::default() })
    }

    /// Read every committed tranche under `root`.
    pub fn load(root: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        let root = root.into();
        let mut reg = DatasetRegistry { root: Some(root.clone()), ..Default::default() };
        for n in 0.. {
            let dir = tranche_dir(&root, n);
            if !dir.exists() {
                break;
            }
            let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)
                .map_err(|e| PipelineError::Record(e.to_string()))?;
            let mut t = Tranche::empty(n, manifest.seed);
            for (i, name) in SPLITS.iter().enumerate() {
                let nlu: Vec<ExemplarRecord> = read_lines(&dir.join(format!("nlu_{name}.jsonl")))?;
                let nlu = nlu.iter().map(|r| r.to_pair().map_err(|e| PipelineError::Record(e.to_string()))).collect::<Result<Vec<_>, _>>()?;
                let vision: Vec<VisionRecord> = read_lines(&dir.join(format!("vision_{name}.jsonl")))?;
                let vision = vision.iter().map(|r| r.to_example()).collect::<Result<Vec<_>, _>>()?;
                match i {
                    0 => (t.nlu.train, t.vision.train) = (nlu, vision),
                    1 => (t.nlu.valid, t.vision.valid) = (nlu, vision),
                    _ => (t.nlu.test, t.vision.test) = (nlu, vision),
                }
            }
            reg.tranches.push(t);
            reg.manifests.push(manifest);
        }
        Ok(reg)
    }

    pub fn len(&self) -> usize {
        self.tranches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tranches.is_empty()
    }

    pub fn tranche(&self, n: u32) -> Option<&Tranche> {
        self.tranches.get(n as usize)
    }

    pub fn manifest(&self, n: u32) -> Option<&Manifest> {
        self.manifests.get(n as usize)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    /// Append tranche `n`; it must be the next one. On disk the tranche is
    /// written to a scratch directory and renamed into place, so a failed
    /// commit leaves no tranche behind.
    pub fn commit(&mut self, tranche: Tranche) -> Result<&Manifest, PipelineError> {
        if tranche.n as usize != self.tranches.len() {
            return Err(PipelineError::Registry(format!("expected tranche {}, got {}", self.tranches.len(), tranche.n)));
        }
        let manifest = Manifest {
            n: tranche.n,
            seed: tranche.seed,
            nlu: tranche.nlu.counts(),
            vision: tranche.vision.counts(),
            committed_at: self.manifests.len() as u64,
        };
        if let Some(root) = &self.root {
            let dir = tranche_dir(root, tranche.n);
            if dir.exists() {
                return Err(PipelineError::Registry(format!("{} already exists", dir.display())));
            }
            let tmp = root.join(format!(".tranche_{:04}.tmp", tranche.n));
            if tmp.exists() {
                fs::remove_dir_all(&tmp)?;
            }
            fs::create_dir_all(&tmp)?;
            let nlu = [&tranche.nlu.train, &tranche.nlu.valid, &tranche.nlu.test];
            let vision = [&tranche.vision.train, &tranche.vision.valid, &tranche.vision.test];
            for (i, name) in SPLITS.iter().enumerate() {
                write_lines(&tmp.join(format!("nlu_{name}.jsonl")), nlu[i].iter().map(|p| ExemplarRecord::from_pair(p, tranche.n)))?;
                write_lines(&tmp.join(format!("vision_{name}.jsonl")), vision[i].iter().map(|v| v.to_record()))?;
            }
            let text = serde_json::to_string_pretty(&manifest).map_err(|e| PipelineError::Record(e.to_string()))?;
            fs::write(tmp.join("manifest.json"), text + "\n")?;
            fs::rename(&tmp, &dir)?;
        }
        self.tranches.push(tranche);
        self.manifests.push(manifest);
        Ok(self.manifests.last().expect("just pushed"))
    }

    fn union<T: Clone>(&self, n: u32, pick: impl Fn(&Tranche) -> &Vec<T>) -> Vec<T> {
        self.tranches.iter().take(n as usize + 1).flat_map(|t| pick(t).iter().cloned()).collect()
    }

    /// Union of the train splits of tranches 0..=n.
    pub fn r(&self, n: u32) -> Vec<Pair> {
        self.union(n, |t| &t.nlu.train)
    }

    pub fn v(&self, n: u32) -> Vec<Pair> {
        self.union(n, |t| &t.nlu.valid)
    }

    pub fn t(&self, n: u32) -> Vec<Pair> {
        self.union(n, |t| &t.nlu.test)
    }

    pub fn vision_r(&self, n: u32) -> Vec<VisionExample> {
        self.union(n, |t| &t.vision.train)
    }

    pub fn vision_t(&self, n: u32) -> Vec<VisionExample> {
        self.union(n, |t| &t.vision.test)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Nlu,
    Vision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "lowercase")]
pub enum Annotation {
    Nlu(LogicalForm),
    Vision(SegMask),
}

/// A command waiting for (or holding) a ground-truth annotation. With full
/// annotation, commands that were never marked are queued as well.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub task_id: u64,
    pub kind: ErrorKind,
    pub text: String,
    pub parse: Option<LogicalForm>,
    pub snapshot: Option<WorldSnapshot>,
    pub annotation: Option<Annotation>,
    pub annotated: bool,
    /// Index of the originating command in the loop's record list.
    #[serde(skip)]
    pub record: Option<usize>,
    /// What a simulated annotator knows.
    #[serde(skip)]
    pub truth: Option<Annotation>,
}

impl ErrorRecord {
    pub fn nlu(text: impl Into<String>, parse: Option<LogicalForm>) -> Self {
        ErrorRecord { task_id: 0, kind: ErrorKind::Nlu, text: text.into(), parse, snapshot: None, annotation: None, annotated: false, record: None, truth: None }
    }

    pub fn vision(text: impl Into<String>, snapshot: WorldSnapshot) -> Self {
        ErrorRecord {
            task_id: 0,
            kind: ErrorKind::Vision,
            text: text.into(),
            parse: None,
            snapshot: Some(snapshot),
            annotation: None,
            annotated: false,
            record: None,
            truth: None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnnotationError {
    #[error("no open annotation task {0}")]
    UnknownTask(u64),
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
}

/// Anything that can write ground truth for a queued record. `None` means
/// the command cannot be annotated (it is invalid).
pub trait Annotate {
    fn annotate(&mut self, record: &ErrorRecord) -> Option<Annotation>;
}

/// A simulated annotator reading the hidden truth.
pub struct SimAnnotator<'a> {
    pub annotator: Annotator,
    pub grammar: &'a GeneratorGrammar,
}

impl Annotate for SimAnnotator<'_> {
    fn annotate(&mut self, record: &ErrorRecord) -> Option<Annotation> {
        match &record.truth {
            Some(Annotation::Nlu(lf)) => {
                let draft = Draft { text: record.text.clone(), truth: Some(lf.clone()) };
                self.annotator.annotate_nlu(&draft, self.grammar).ok().map(Annotation::Nlu)
            }
            Some(Annotation::Vision(mask)) => {
                let dims = record.snapshot.as_ref()?.dims;
                Some(Annotation::Vision(self.annotator.annotate_vision(mask, dims)))
            }
            None => None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct AnnotationQueue {
    next_id: u64,
    open: BTreeMap<u64, ErrorRecord>,
    pub done: Vec<ErrorRecord>,
}

/// Check an annotation against the record it answers.
pub fn validate_annotation(record: &ErrorRecord, annotation: &Annotation) -> Result<(), AnnotationError> {
    match (record.kind, annotation) {
        (ErrorKind::Nlu, Annotation::Nlu(lf)) => {
            let violations = dsl::validate_against(lf, &[dsl::tokenize(&record.text)]);
            if violations.is_empty() {
                Ok(())
            } else {
                Err(AnnotationError::InvalidAnnotation(violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ")))
            }
        }
        (ErrorKind::Vision, Annotation::Vision(mask)) => {
            let snap = record.snapshot.as_ref().ok_or_else(|| AnnotationError::InvalidAnnotation("no world snapshot".into()))?;
            match mask.iter().find(|p| !snap.dims.contains(**p)) {
                Some(p) => Err(AnnotationError::InvalidAnnotation(format!("voxel {p:?} out of bounds"))),
                None => Ok(()),
            }
        }
        _ => Err(AnnotationError::InvalidAnnotation("annotation type does not match the record".into())),
    }
}

impl AnnotationQueue {
    pub fn push(&mut self, mut record: ErrorRecord) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        record.task_id = id;
        self.open.insert(id, record);
        id
    }

    pub fn open_len(&self) -> usize {
        self.open.len()
    }

    pub fn open_tasks(&self) -> impl Iterator<Item = &ErrorRecord> {
        self.open.values()
    }

    pub fn get(&self, id: u64) -> Option<&ErrorRecord> {
        self.open.get(&id)
    }

    fn close(&mut self, id: u64, annotation: Option<Annotation>) -> &ErrorRecord {
        let mut rec = self.open.remove(&id).expect("caller checked");
        rec.annotation = annotation;
        rec.annotated = true;
        self.done.push(rec);
        self.done.last().expect("just pushed")
    }

    /// Commit a human annotation for an open task.
    pub fn submit(&mut self, id: u64, annotation: Annotation) -> Result<&ErrorRecord, AnnotationError> {
        let rec = self.open.get(&id).ok_or(AnnotationError::UnknownTask(id))?;
        validate_annotation(rec, &annotation)?;
        Ok(self.close(id, Some(annotation)))
    }
}

/// Annotate up to `budget` open tasks, oldest first. Returns the indices
/// into `queue.done` of the newly closed records; the rest stay queued.
pub fn annotate_queue(queue: &mut AnnotationQueue, annotator: &mut dyn Annotate, budget: usize) -> Vec<usize> {
    let ids: Vec<u64> = queue.open.keys().copied().take(budget).collect();
    let mut closed = Vec::with_capacity(ids.len());
    for id in ids {
        let ann = annotator.annotate(&queue.open[&id]);
        let ann = ann.filter(|a| validate_annotation(&queue.open[&id], a).is_ok());
        queue.close(id, ann);
        closed.push(queue.done.len() - 1);
    }
    closed
}

/// Nested counts from all commands down to confirmed NLU errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunnelStats {
    pub all: u64,
    pub dedup_valid: u64,
    pub marked_agent_errors: u64,
    pub marked_nlu: u64,
    pub marked_nlu_annotated: u64,
    pub marked_true_nlu: u64,
    pub all_known_nlu: u64,
    /// Absent when nothing marked was annotated.
    pub precision: Option<f64>,
    /// Recall among commands that have an annotation.
    pub recall_estimate: Option<f64>,
}

fn ratio(a: u64, b: u64) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

impl FunnelStats {
    pub fn from_counts(c: [u64; 7]) -> Self {
        FunnelStats {
            all: c[0],
            dedup_valid: c[1],
            marked_agent_errors: c[2],
            marked_nlu: c[3],
            marked_nlu_annotated: c[4],
            marked_true_nlu: c[5],
            all_known_nlu: c[6],
            precision: ratio(c[5], c[4]),
            recall_estimate: ratio(c[5], c[6]),
        }
    }

    pub fn counts(&self) -> [u64; 7] {
        [self.all, self.dedup_valid, self.marked_agent_errors, self.marked_nlu, self.marked_nlu_annotated, self.marked_true_nlu, self.all_known_nlu]
    }

    /// Counts down the chain never increase.
    pub fn is_nested(&self) -> bool {
        let c = self.counts();
        c[1] <= c[0] && c[2] <= c[1] && c[3] <= c[2] && c[4] <= c[3] && c[5] <= c[4] && c[6] <= c[1] && c[5] <= c[6]
    }
}

fn differs(annotation: &LogicalForm, parse: Option<&LogicalForm>) -> bool {
    parse.is_none_or(|p| p.canonical() != annotation.canonical())
}

/// Funnel over routed command records. An NLU error is known when the
/// annotation differs from the agent's parse.
pub fn funnel_stats(records: &[CommandRecord]) -> FunnelStats {
    let unique = dedup_and_filter(records);
    let mut c = [0u64; 7];
    c[0] = records.len() as u64;
    c[1] = unique.len() as u64;
    for r in &unique {
        let known = r.annotation.as_ref().is_some_and(|a| differs(a, r.parse.as_ref()));
        c[6] += u64::from(known);
        if !r.terminal.is_some_and(Terminal::is_error) {
            continue;
        }
        c[2] += 1;
        if r.terminal == Some(Terminal::NluError) {
            c[3] += 1;
            if r.annotation.is_some() {
                c[4] += 1;
                c[5] += u64::from(known);
            }
        }
    }
    FunnelStats::from_counts(c)
}

/// Recall over every true NLU error, which only a simulator can count.
pub fn true_recall(marked_true: u64, true_nlu_errors: u64) -> Option<f64> {
    ratio(marked_true, true_nlu_errors)
}

/// The terminal an ideal worker would reach.
pub fn truth_terminal(truth: Option<&LogicalForm>, parse: Option<&LogicalForm>, vision_wrong: bool, failed: bool) -> Terminal {
    match truth {
        None => Terminal::NluError,
        Some(t) if differs(t, parse) => Terminal::NluError,
        Some(_) if vision_wrong => Terminal::VisionError,
        Some(_) if failed => Terminal::OtherError,
        Some(_) => Terminal::NoError,
    }
}

/// Scene objects a description names by shape or color, restricted to the
/// blocks still standing in `snapshot`.
pub fn vision_truth(text: &str, objects: &[SceneObject], snapshot: &WorldSnapshot) -> SegMask {
    let tokens = dsl::tokenize(text);
    let Ok(world) = snapshot.to_world() else {
        return SegMask::new();
    };
    let grid = world.grid;
    let mut mask = SegMask::new();
    for obj in objects {
        let kind = obj.kind().name();
        let color = grid.palette().color_of(obj.color()).unwrap_or("");
        if tokens.iter().any(|t| t == kind || t == color) {
            mask.0.extend(obj.mask.iter().copied().filter(|p| grid.get(*p) == obj.color()));
        }
    }
    mask
}

pub fn vision_accuracy(model: &SegModel, data: &[VisionExample], exec: Exec) -> f64 {
    if data.is_empty() {
        return 1.0;
    }
    let hits = exec.map(data, |ex| match model.predict_mask(&ex.grid, &ex.text) {
        Ok(m) => usize::from(is_correct(&m, &ex.mask)),
        Err(_) => 0,
    });
    hits.iter().sum::<usize>() as f64 / data.len() as f64
}

fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a << 32 | (b & 0xffff_ffff));
    rng.random()
}

#[derive(Clone, Debug)]
pub struct LoopConfig {
    pub sessions: usize,
    pub commands_per_session: usize,
    pub seed: u64,
    /// Deploy the latest re-biased model from this iteration on.
    pub redeploy_from: Option<u32>,
    pub rebias_factor: f64,
    pub ratios: [f64; 3],
    /// Grammar draws forming the bootstrap tranche.
    pub tranche0_size: usize,
    /// Annotate every new command, not only marked NLU errors.
    pub annotate_all: bool,
    /// Annotations per iteration; `None` is unlimited.
    pub annotation_budget: Option<usize>,
    pub annotator_error_rate: f64,
    /// First iteration whose vision errors are collected.
    pub vision_from: u32,
    pub session: SessionConfig,
    pub exec: Exec,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            sessions: 30,
            commands_per_session: 12,
            seed: 7,
            redeploy_from: None,
            rebias_factor: 2.0,
            ratios: DEFAULT_RATIOS,
            tranche0_size: 1500,
            annotate_all: true,
            annotation_budget: None,
            annotator_error_rate: 0.0,
            vision_from: 11,
            session: SessionConfig::default(),
            exec: Exec::default(),
        }
    }
}

/// Default worker pool: `n` honest workers.
pub fn honest_pool(n: usize, seed: u64) -> Vec<WorkerProfile> {
    (0..n).map(|i| WorkerProfile::honest(format!("w{i:02}"), derive_seed(seed, 1, i as u64))).collect()
}

#[derive(Clone, Debug)]
pub struct IterationModels {
    pub episode: Arc<ParserModel>,
    pub rebiased: Arc<ParserModel>,
}

pub struct LoopState {
    pub grammar: GeneratorGrammar,
    pub workers: Vec<Worker>,
    pub registry: DatasetRegistry,
    pub baseline: Arc<ParserModel>,
    pub deployed: Arc<ParserModel>,
    pub deployed_id: String,
    pub segmenter: Option<Arc<SegModel>>,
    pub records: Vec<CommandRecord>,
    pub queue: AnnotationQueue,
    /// `models[n]` holds the models trained after iteration n; entry 0 is the baseline.
    pub models: Vec<IterationModels>,
    pub true_nlu_errors: u64,
    /// Texts already issued in a session.
    dedup: Deduper,
    /// Texts already in some tranche.
    dataset: Deduper,
    history: Vec<String>,
    annotator: Annotator,
    session_objects: BTreeMap<usize, Vec<SceneObject>>,
}

impl LoopState {
    /// Tranche 0 from the iteration-0 grammar, and the baseline trained on R_0.
    pub fn bootstrap(config: &LoopConfig, workers: Vec<WorkerProfile>, mut registry: DatasetRegistry) -> Result<Self, PipelineError> {
        let grammar = GeneratorGrammar::default();
        let mut dataset = Deduper::default();
        let pairs: Vec<Pair> = grammar.generate(config.tranche0_size, 0, config.seed).into_iter().filter(|p| dataset.admit(&p.text)).collect();
        let seed0 = derive_seed(config.seed, 2, 0);
        let nlu = split_tranche(pairs, config.ratios, seed0);
        registry.commit(Tranche { n: 0, seed: seed0, nlu, vision: Split::default() })?;
        let baseline = Arc::new(ParserModel::new().train(&registry.r(0), 0)?);
        let rebiased = Arc::new((*baseline).clone().rebias(config.rebias_factor));
        Ok(LoopState {
            grammar,
            workers: workers.into_iter().map(Worker::new).collect(),
            registry,
            deployed: baseline.clone(),
            deployed_id: "baseline".into(),
            models: vec![IterationModels { episode: baseline.clone(), rebiased }],
            baseline,
            segmenter: None,
            records: Vec::new(),
            queue: AnnotationQueue::default(),
            true_nlu_errors: 0,
            dedup: Deduper::default(),
            dataset,
            history: Vec::new(),
            annotator: Annotator::new(config.annotator_error_rate, derive_seed(config.seed, 3, 0)),
            session_objects: BTreeMap::new(),
        })
    }

    pub fn iteration(&self) -> u32 {
        self.registry.len() as u32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub iteration: u32,
    pub model: String,
    pub testset: String,
    pub task: String,
    pub size: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: u32,
    pub deployed: String,
    pub commands: usize,
    pub tranche_nlu: [usize; 3],
    pub tranche_vision: [usize; 3],
    pub rows: Vec<ReportRow>,
    pub funnel: FunnelStats,
    pub true_nlu_errors: u64,
}

impl IterationReport {
    pub fn accuracy(&self, model: &str, testset: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.model == model && r.testset == testset && r.task == "nlu").map(|r| r.accuracy)
    }
}

fn row(iteration: u32, model: &str, testset: &str, task: &str, size: usize, accuracy: f64) -> ReportRow {
    ReportRow { iteration, model: model.into(), testset: testset.into(), task: task.into(), size, accuracy }
}

/// Accuracy of the three models on T_0 and T_n (NLU), plus the deployed
/// segmenter on the vision test sets when both exist.
pub fn eval_matrix(registry: &DatasetRegistry, n: u32, models: [(&str, &ParserModel); 3], segmenter: Option<&SegModel>, exec: Exec) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    let sets = [("T_0", registry.t(0)), ("T_n", registry.t(n))];
    for (name, model) in models {
        for (set, data) in &sets {
            rows.push(row(n, name, set, "nlu", data.len(), model.evaluate(data, exec)));
        }
    }
    if let Some(seg) = segmenter {
        for (set, data) in [("T_0", registry.vision_t(0)), ("T_n", registry.vision_t(n))] {
            if !data.is_empty() {
                rows.push(row(n, "deployed", set, "vision", data.len(), vision_accuracy(seg, &data, exec)));
            }
        }
    }
    rows
}

/// Every iteration's models on the final test union.
pub fn eval_t_all(state: &LoopState, exec: Exec) -> Vec<ReportRow> {
    let last = state.iteration().saturating_sub(1);
    let data = state.registry.t(last);
    let mut rows = vec![row(0, "baseline", "T_all", "nlu", data.len(), state.baseline.evaluate(&data, exec))];
    for (n, m) in state.models.iter().enumerate().skip(1) {
        rows.push(row(n as u32, "episode", "T_all", "nlu", data.len(), m.episode.evaluate(&data, exec)));
        rows.push(row(n as u32, "rebiased", "T_all", "nlu", data.len(), m.rebiased.evaluate(&data, exec)));
    }
    rows
}

struct SessionOutput {
    records: Vec<CommandRecord>,
    truths: Vec<Option<LogicalForm>>,
    vision_truths: Vec<Vec<SegMask>>,
    objects: Vec<SceneObject>,
}

fn run_session(config: &LoopConfig, state: &mut LoopState, n: u32, s: usize, history: &Arc<Vec<String>>) -> SessionOutput {
    let wi = s % state.workers.len();
    let worker = &mut state.workers[wi];
    let (world, objects) = session_world(derive_seed(config.seed, 4 + n as u64, s as u64));
    let mut session = Session::new(
        format!("it{n:02}-s{s:03}"),
        worker.profile.id.clone(),
        n,
        world,
        state.deployed.clone(),
        state.segmenter.clone(),
        history.clone(),
        config.session.clone(),
    );
    let mut truths = Vec::new();
    let mut vision_truths = Vec::new();
    for _ in 0..config.commands_per_session {
        let draft = worker.next_command(&state.grammar, n);
        if session.submit_command(&draft.text).is_err() {
            continue;
        }
        session.run_to_completion();
        let rec = session.current().expect("a command awaits routing");
        let masks: Vec<SegMask> = rec.vision_uses.iter().map(|u| vision_truth(&u.text, &objects, &u.snapshot)).collect();
        let vision_wrong = rec.vision_uses.iter().zip(&masks).any(|(u, t)| !is_correct(&u.mask, t));
        let truth = truth_terminal(draft.truth.as_ref(), rec.parse.as_ref(), vision_wrong, rec.failed);
        if truth == Terminal::NluError && draft.truth.is_some() {
            state.true_nlu_errors += 1;
        }
        for answer in worker.mark_feedback(truth) {
            session.answer_routing(answer).expect("answers follow the tree");
        }
        truths.push(draft.truth);
        vision_truths.push(masks);
    }
    SessionOutput { records: std::mem::take(&mut session.records), truths, vision_truths, objects }
}

/// One loop iteration: sessions, routing, dedup, annotation, tranche
/// commit, retraining, evaluation, and (optionally) redeployment for the
/// next iteration. Nothing reaches the registry unless every stage
/// succeeds.
pub fn run_iteration(config: &LoopConfig, state: &mut LoopState) -> Result<IterationReport, PipelineError> {
    let n = state.iteration();
    if let Some(from) = config.redeploy_from {
        if n >= from && n >= 1 {
            state.deployed = state.models[n as usize - 1].rebiased.clone();
            state.deployed_id = format!("rebiased-{}", n - 1);
        }
    }
    let history = Arc::new(state.history.clone());
    let first = state.records.len();
    let mut truths = Vec::new();
    for s in 0..config.sessions {
        let out = run_session(config, state, n, s, &history);
        let base = state.records.len();
        for (i, (rec, truth)) in out.records.into_iter().zip(out.truths).enumerate() {
            let idx = base + i;
            let unique = state.dedup.admit(&rec.text);
            if unique && (config.annotate_all || rec.terminal == Some(Terminal::NluError)) {
                let mut e = ErrorRecord::nlu(rec.text.clone(), rec.parse.clone());
                e.record = Some(idx);
                e.truth = truth.clone().map(Annotation::Nlu);
                state.queue.push(e);
            }
            if unique && n >= config.vision_from && rec.terminal == Some(Terminal::VisionError) {
                for (u, mask) in rec.vision_uses.iter().zip(&out.vision_truths[i]) {
                    let mut e = ErrorRecord::vision(u.text.clone(), u.snapshot.clone());
                    e.record = Some(idx);
                    e.truth = Some(Annotation::Vision(mask.clone()));
                    state.queue.push(e);
                }
            }
            truths.push(truth);
            state.records.push(rec);
        }
        state.session_objects.insert(s, out.objects);
    }
    let commands = state.records.len() - first;

    let budget = config.annotation_budget.unwrap_or(usize::MAX);
    let mut sim = SimAnnotator { annotator: state.annotator.clone(), grammar: &state.grammar };
    let closed = annotate_queue(&mut state.queue, &mut sim, budget);
    state.annotator = sim.annotator;
    let mut pairs = Vec::new();
    let mut vision = Vec::new();
    for &d in &closed {
        let e = &state.queue.done[d];
        let rec = e.record.map(|i| &mut state.records[i]);
        match (&e.annotation, rec) {
            (Some(Annotation::Nlu(lf)), rec) => {
                if let Some(r) = rec {
                    r.valid = Some(true);
                    r.annotation = Some(lf.clone());
                }
                if state.dataset.admit(&e.text) {
                    pairs.push(Pair::new(e.text.clone(), lf.clone()));
                }
            }
            (Some(Annotation::Vision(mask)), _) => {
                let world = e.snapshot.as_ref().expect("vision records carry snapshots").to_world()?;
                vision.push(VisionExample { grid: world.grid, text: e.text.clone(), mask: mask.clone(), tranche_id: n });
            }
            (None, Some(r)) if e.kind == ErrorKind::Nlu => r.valid = Some(false),
            _ => {}
        }
    }

    let seed = derive_seed(config.seed, 2, n as u64);
    let tranche = Tranche {
        n,
        seed,
        nlu: split_tranche(pairs, config.ratios, seed),
        vision: split_tranche(vision, config.ratios, seed ^ 1),
    };
    let prev = state.models.last().expect("baseline present").episode.clone();
    let episode = Arc::new((*prev).clone().train(&tranche.nlu.train, n)?);
    let rebiased = Arc::new((*episode).clone().rebias(config.rebias_factor));
    let tranche_nlu = tranche.nlu.counts();
    let tranche_vision = tranche.vision.counts();
    let empty = tranche.nlu.is_empty() && tranche.vision.is_empty();
    state.registry.commit(tranche)?;
    state.models.push(IterationModels { episode: episode.clone(), rebiased: rebiased.clone() });
    state.history.extend(state.records[first..].iter().map(|r| r.text.clone()));

    let rows = if empty {
        Vec::new()
    } else {
        let models = [("baseline", &*state.baseline), ("episode", &*episode), ("rebiased", &*rebiased)];
        eval_matrix(&state.registry, n, models, state.segmenter.as_deref(), config.exec)
    };
    Ok(IterationReport {
        iteration: n,
        deployed: state.deployed_id.clone(),
        commands,
        tranche_nlu,
        tranche_vision,
        rows,
        funnel: funnel_stats(&state.records),
        true_nlu_errors: state.true_nlu_errors,
    })
}

pub const REPORT_HEADER: &str = "iteration\tmodel\ttestset\ttask\tsize\taccuracy";

pub fn report_tsv(rows: &[ReportRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{}\t{}\t{}\t{}\t{}\t{:.6}\n", r.iteration, r.model, r.testset, r.task, r.size, r.accuracy));
    }
    out
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

pub fn funnel_tsv(reports: &[IterationReport]) -> String {
    let mut out = String::from(
        "iteration\tdeployed\tall\tdedup_valid\tmarked_agent_errors\tmarked_nlu\tmarked_nlu_annotated\tmarked_true_nlu\tall_known_nlu\tprecision\trecall_estimate\ttrue_recall\n",
    );
    for r in reports {
        let f = &r.funnel;
        let c = f.counts();
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.iteration,
            r.deployed,
            c[0],
            c[1],
            c[2],
            c[3],
            c[4],
            c[5],
            c[6],
            opt(f.precision),
            opt(f.recall_estimate),
            opt(true_recall(f.marked_true_nlu, r.true_nlu_errors)),
        ));
    }
    out
}

/// Everything `run-loop` leaves behind.
pub struct LoopOutcome {
    pub reports: Vec<IterationReport>,
    pub t_all: Vec<ReportRow>,
    pub state: LoopState,
}

/// Bootstrap, run `iterations` iterations, and (with `out`) write the
/// registry, `report.tsv`, `funnel.tsv` and model checkpoints under it.
pub fn run_loop(config: &LoopConfig, workers: Vec<WorkerProfile>, iterations: u32, out: Option<&Path>) -> Result<LoopOutcome, PipelineError> {
    let registry = match out {
        Some(dir) => DatasetRegistry::create(dir.join("registry"))?,
        None => DatasetRegistry::in_memory(),
    };
    let mut state = LoopState::bootstrap(config, workers, registry)?;
    let mut reports = Vec::new();
    for _ in 0..iterations {
        reports.push(run_iteration(config, &mut state)?);
    }
    let t_all = if iterations > 0 { eval_t_all(&state, config.exec) } else { Vec::new() };
    if let Some(dir) = out {
        let mut rows: Vec<ReportRow> = reports.iter().flat_map(|r| r.rows.iter().cloned()).collect();
        rows.extend(t_all.iter().cloned());
        fs::write(dir.join("report.tsv"), report_tsv(&rows))?;
        fs::write(dir.join("funnel.tsv"), funnel_tsv(&reports))?;
        let models = dir.join("models");
        fs::create_dir_all(&models)?;
        let mut w = fs::File::create(models.join("baseline.jsonl"))?;
        state.baseline.save(&mut w)?;
        for (n, m) in state.models.iter().enumerate().skip(1) {
            let mut w = fs::File::create(models.join(format!("episode_{n:04}.jsonl")))?;
            m.episode.save(&mut w)?;
        }
        let mut w = fs::File::create(dir.join("records.jsonl"))?;
        for r in &state.records {
            serde_json::to_writer(&mut w, r).map_err(|e| PipelineError::Record(e.to_string()))?;
            w.write_all(b"\n")?;
        }
    }
    Ok(LoopOutcome { reports, t_all, state })
}
