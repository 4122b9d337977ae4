//! Heuristic perception and the agent's memory of objects, chats and tags.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{tokenize, AnswerType, DialogueType, Filters, LogicalForm, Predicate};
use crate::vision::{SegMask, ShapeKind};
use crate::world::{BlockId, Pos, VoxelGrid};

pub type NodeId = u64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MemoryError {
    #[error("empty mask")]
    EmptyMask,
    #[error("no referent")]
    NoReferent,
    #[error("logical form is not a {0:?}")]
    WrongDialogue(DialogueType),
    #[error("{0}")]
    Span(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Object,
    Chat,
    Player,
    #[serde(rename = "self")]
    Agent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub tags: BTreeSet<(String, String)>,
    pub voxels: SegMask,
    pub created_tick: u64,
}

impl MemoryNode {
    pub fn has_tag(&self, pred: &str, value: &str) -> bool {
        self.tags.contains(&(pred.to_string(), value.to_string()))
    }

    pub fn values<'a>(&'a self, pred: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.tags.iter().filter(move |(p, _)| p == pred).map(|(_, v)| v.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Player,
    Agent,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatRecord {
    pub index: usize,
    pub speaker: Speaker,
    pub text: String,
    pub tick: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    TwentySix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionConfig {
    pub connectivity: Connectivity,
    /// Minimum occupied fraction for a layer to count as ground.
    pub ground_fill: f64,
    /// Overlap (intersection over the larger mask) that keeps a node's id.
    pub match_overlap: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        PerceptionConfig { connectivity: Connectivity::Six, ground_fill: 0.9, match_overlap: 0.5 }
    }
}

fn neighbors(p: Pos, conn: Connectivity) -> Vec<Pos> {
    let mut out = Vec::new();
    for dx in -1..=1 {
        for dy in -1..=1 {
            for dz in -1..=1 {
                let n = dx * dx + dy * dy + dz * dz;
                if n == 0 || (conn == Connectivity::Six && n != 1) {
                    continue;
                }
                out.push(p.offset(dx, dy, dz));
            }
        }
    }
    out
}

/// Connected components of non-air voxels outside `ground`, ordered by
/// their smallest position.
pub fn detect_components(grid: &VoxelGrid, ground: &SegMask, conn: Connectivity) -> Vec<SegMask> {
    let solid: BTreeSet<Pos> = grid.blocks().map(|(p, _)| p).filter(|p| !ground.contains(p)).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    // BTreeSet iteration is sorted, so each component is discovered from its minimum.
    for &start in &solid {
        if !seen.insert(start) {
            continue;
        }
        let mut comp = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            for q in neighbors(p, conn) {
                if solid.contains(&q) && seen.insert(q) {
                    comp.insert(q);
                    queue.push_back(q);
                }
            }
        }
        out.push(SegMask(comp));
    }
    out
}

/// Every block in the run of layers, starting at the lowest occupied one,
/// whose occupancy is at least `fill`.
pub fn detect_ground(grid: &VoxelGrid, fill: f64) -> SegMask {
    let dims = grid.dims();
    let area = (dims.width * dims.length) as f64;
    let mut per_layer: BTreeMap<i32, Vec<Pos>> = BTreeMap::new();
    for (p, _) in grid.blocks() {
        per_layer.entry(p.y).or_default().push(p);
    }
    let mut out = BTreeSet::new();
    let Some(&lowest) = per_layer.keys().next() else { return SegMask::default() };
    let mut y = lowest;
    while let Some(layer) = per_layer.get(&y) {
        if (layer.len() as f64) < fill * area {
            break;
        }
        out.extend(layer.iter().copied());
        y += 1;
    }
    SegMask(out)
}

/// Color tag of the most common block in `mask`; ties go to the lower id.
pub fn color_of(grid: &VoxelGrid, mask: &SegMask) -> Result<String, MemoryError> {
    let mut counts: BTreeMap<BlockId, usize> = BTreeMap::new();
    for p in mask.iter() {
        let b = grid.get(*p);
        if !b.is_air() {
            *counts.entry(b).or_default() += 1;
        }
    }
    let best = counts.iter().fold(None, |best: Option<(BlockId, usize)>, (&b, &n)| match best {
        Some((_, m)) if m >= n => best,
        _ => Some((b, n)),
    });
    let (id, _) = best.ok_or(MemoryError::EmptyMask)?;
    Ok(grid.palette().color_of(id).unwrap_or("unknown").to_string())
}

/// Synonym classes for object names; the shape kinds plus a few aliases.
pub fn canonical_name(word: &str) -> String {
    match word {
        "box" => "cube".into(),
        "ball" => "sphere".into(),
        "moat" | "hole" | "trench" | "pit" | "ditch" | "tunnel" => "hole".into(),
        w => ShapeKind::from_name(w).map(|k| k.name().to_string()).unwrap_or_else(|| w.to_string()),
    }
}

pub const PERCEIVED_TAG: &str = "object";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PerceiveReport {
    pub inserted: usize,
    pub updated: usize,
    pub retired: usize,
}

impl PerceiveReport {
    pub fn mutations(&self) -> usize {
        self.inserted + self.updated + self.retired
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Memory {
    nodes: BTreeMap<NodeId, MemoryNode>,
    next_id: NodeId,
    chats: Vec<ChatRecord>,
    #[serde(skip)]
    ground: SegMask,
}

impl Memory {
    pub fn new() -> Self {
        Memory::default()
    }

    pub fn node(&self, id: NodeId) -> Option<&MemoryNode> {
        self.nodes.get(&id)
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut MemoryNode> {
        self.nodes.get_mut(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &MemoryNode> {
        self.nodes.values()
    }

    pub fn objects(&self) -> impl Iterator<Item = &MemoryNode> {
        self.nodes.values().filter(|n| n.kind == NodeKind::Object)
    }

    pub fn ground(&self) -> &SegMask {
        &self.ground
    }

    pub fn insert(&mut self, kind: NodeKind, tags: BTreeSet<(String, String)>, voxels: SegMask, tick: u64) -> NodeId {
        let id = self.next_id;
        self.next_id += 1;
        self.nodes.insert(id, MemoryNode { id, kind, tags, voxels, created_tick: tick });
        id
    }

    pub fn tag(&mut self, id: NodeId, pred: &str, value: &str) -> bool {
        match self.nodes.get_mut(&id) {
            Some(n) => n.tags.insert((pred.to_string(), value.to_string())),
            None => false,
        }
    }

    pub fn chats(&self) -> &[ChatRecord] {
        &self.chats
    }

    pub fn add_chat(&mut self, speaker: Speaker, text: &str, tick: u64) -> usize {
        let index = self.chats.len();
        self.chats.push(ChatRecord { index, speaker, text: text.to_string(), tick });
        index
    }

    /// Tokenized chat history, the context that spans index into.
    pub fn chat_tokens(&self) -> Vec<Vec<String>> {
        self.chats.iter().map(|c| tokenize(&c.text)).collect()
    }

    /// Object node whose voxels contain `p`.
    pub fn object_at(&self, p: Pos) -> Option<NodeId> {
        self.objects().find(|n| n.voxels.contains(&p)).map(|n| n.id)
    }

    /// Recompute ground and components; insert, update or retire object nodes.
    pub fn perceive(&mut self, grid: &VoxelGrid, config: &PerceptionConfig, tick: u64) -> PerceiveReport {
        self.ground = detect_ground(grid, config.ground_fill);
        let comps = detect_components(grid, &self.ground, config.connectivity);
        let mut report = PerceiveReport::default();
        let mut unmatched: BTreeSet<NodeId> = self.objects().map(|n| n.id).collect();
        for comp in comps {
            let best = unmatched
                .iter()
                .map(|&id| {
                    let old = &self.nodes[&id].voxels;
                    let inter = comp.iter().filter(|p| old.contains(p)).count();
                    (inter as f64 / old.len().max(comp.len()) as f64, id)
                })
                .filter(|&(overlap, _)| overlap >= config.match_overlap)
                .fold(None, |best: Option<(f64, NodeId)>, c| match best {
                    Some(b) if b.0 >= c.0 => Some(b),
                    _ => Some(c),
                });
            let color = color_of(grid, &comp).unwrap_or_default();
            match best {
                Some((_, id)) => {
                    unmatched.remove(&id);
                    let node = self.nodes.get_mut(&id).expect("matched node exists");
                    let stale: Vec<_> = node.tags.iter().filter(|(p, v)| p == "has_colour" && *v != color).cloned().collect();
                    let changed = node.voxels != comp || !stale.is_empty() || !node.has_tag("has_colour", &color);
                    if changed {
                        for t in stale {
                            node.tags.remove(&t);
                        }
                        node.tags.insert(("has_colour".into(), color));
                        node.voxels = comp;
                        report.updated += 1;
                    }
                }
                None => {
                    let tags = BTreeSet::from([("has_colour".to_string(), color), ("has_tag".to_string(), PERCEIVED_TAG.to_string())]);
                    self.insert(NodeKind::Object, tags, comp, tick);
                    report.inserted += 1;
                }
            }
        }
        for id in unmatched {
            self.nodes.remove(&id);
            report.retired += 1;
        }
        report
    }

    /// Object nodes satisfying every (predicate, value) conjunct, by id.
    pub fn query(&self, conjuncts: &[(Predicate, String)]) -> Vec<NodeId> {
        self.objects().filter(|n| conjuncts.iter().all(|(p, v)| matches(n, *p, v))).map(|n| n.id).collect()
    }

    /// Resolve filter spans against the chat history.
    pub fn resolve_filters(&self, filters: &Filters) -> Result<Vec<(Predicate, String)>, MemoryError> {
        let history = self.chat_tokens();
        filters
            .conjuncts()
            .iter()
            .map(|c| {
                crate::dsl::resolve_span(c.obj_text, &history).map(|v| (c.pred_text, v)).map_err(|e| MemoryError::Span(e.to_string()))
            })
            .collect()
    }

    fn referent(&self, lf: &LogicalForm, gaze: Option<Pos>) -> Result<NodeId, MemoryError> {
        match &lf.filters {
            Some(f) => self.query(&self.resolve_filters(f)?).into_iter().next().ok_or(MemoryError::NoReferent),
            None => gaze.and_then(|p| self.object_at(p)).ok_or(MemoryError::NoReferent),
        }
    }

    /// Attach the LF's tag to the referent (filters, else the speaker's gaze).
    pub fn put_memory(&mut self, lf: &LogicalForm, gaze: Option<Pos>) -> Result<NodeId, MemoryError> {
        if lf.dialogue_type != DialogueType::PutMemory {
            return Err(MemoryError::WrongDialogue(DialogueType::PutMemory));
        }
        let upsert = lf.upsert.as_ref().ok_or(MemoryError::NoReferent)?;
        let value = crate::dsl::resolve_span(upsert.obj_text, &self.chat_tokens()).map_err(|e| MemoryError::Span(e.to_string()))?;
        let id = self.referent(lf, gaze)?;
        self.tag(id, upsert.pred_text.as_str(), &value);
        Ok(id)
    }

    /// Name or count answer for a GET_MEMORY form.
    pub fn get_memory(&self, lf: &LogicalForm, gaze: Option<Pos>) -> Result<String, MemoryError> {
        if lf.dialogue_type != DialogueType::GetMemory {
            return Err(MemoryError::WrongDialogue(DialogueType::GetMemory));
        }
        match lf.answer_type {
            Some(AnswerType::Count) => {
                let conjuncts = match &lf.filters {
                    Some(f) => self.resolve_filters(f)?,
                    None => Vec::new(),
                };
                Ok(self.query(&conjuncts).len().to_string())
            }
            _ => {
                let node = &self.nodes[&self.referent(lf, gaze)?];
                if let Some(name) = node.values("has_name").next() {
                    return Ok(name.to_string());
                }
                let color = node.values("has_colour").next().unwrap_or("");
                Ok(format!("{color} {PERCEIVED_TAG}").trim().to_string())
            }
        }
    }

    /// Canonical text dump for debugging and session snapshots.
    pub fn dump(&self) -> String {
        serde_json::to_string(&self.nodes.values().collect::<Vec<_>>()).expect("memory serializes")
    }
}

fn matches(node: &MemoryNode, pred: Predicate, value: &str) -> bool {
    match pred {
        Predicate::HasName => {
            let want = canonical_name(value);
            node.values("has_name").any(|v| v == value || canonical_name(v) == want)
        }
        Predicate::HasColour => node.has_tag("has_colour", value),
        Predicate::HasTag => node.has_tag("has_tag", value),
    }
}
