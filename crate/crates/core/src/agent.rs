//! Controller and task executor.
//!
//! A parsed logical form is turned into concrete [`Task`]s against the
//! current memory and world, then executed one atomic step per tick. Every
//! block change a task makes is appended to its `delta_log`, so a finished
//! task can be undone by reverting that log.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::{Action, ActionType, DialogueType, Direction, Filters, Location, LogicalForm, Predicate};
use crate::memory::{canonical_name, detect_components, Memory, MemoryError, NodeId, PerceptionConfig, Speaker};
use crate::vision::{SegMask, SegModel, Shape};
use crate::world::{
    look_target, point_at, BlockId, Palette, PointEvent, Pos, Pose, Region, Step, World, WorldDelta, WorldSnapshot,
    DEFAULT_LOOK_RANGE, DEFAULT_POINT_TICKS,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InterpretError {
    #[error("unknown schematic {0:?}")]
    UnknownSchematic(String),
    #[error("no referent")]
    NoReferent,
    #[error("no free voxel")]
    NoFreeVoxel,
    #[error("unsupported task")]
    Unsupported,
    #[error("no pending clarification")]
    NoPendingClarification,
    #[error("not a command")]
    NotACommand,
    #[error("{0}")]
    Span(String),
}

impl From<MemoryError> for InterpretError {
    fn from(e: MemoryError) -> Self {
        match e {
            MemoryError::Span(s) => InterpretError::Span(s),
            _ => InterpretError::NoReferent,
        }
    }
}

impl InterpretError {
    /// What the agent says when this error surfaces.
    pub fn chat(&self) -> String {
        match self {
            InterpretError::UnknownSchematic(name) => format!("I don't know how to build a {name}"),
            InterpretError::NoReferent | InterpretError::Span(_) => "I don't know what you are referring to".into(),
            InterpretError::NoFreeVoxel => "I can't find room for that".into(),
            InterpretError::Unsupported => "Sorry, I can't do that yet".into(),
            InterpretError::NoPendingClarification => "I didn't ask anything".into(),
            InterpretError::NotACommand => "I don't understand".into(),
        }
    }
}

/// Shape for a schematic word at the default size (about 3 voxels across).
pub fn schematic_shape(word: &str) -> Option<Shape> {
    Some(match word {
        "cube" | "box" | "house" => Shape::Cube { side: 3 },
        "rectanguloid" | "hut" => Shape::Rectanguloid { width: 3, height: 2, length: 2 },
        "sphere" | "ball" => Shape::Sphere { radius: 1 },
        "pyramid" => Shape::Pyramid { height: 2 },
        "dome" => Shape::Dome { radius: 1 },
        "arch" | "bridge" => Shape::Arch { half_span: 1 },
        "square" => Shape::Square { side: 3 },
        "rectangle" | "wall" => Shape::Rectangle { width: 3, height: 2 },
        "circle" => Shape::Circle { radius: 1 },
        "triangle" => Shape::Triangle { height: 2 },
        "tower" | "column" => Shape::Rectanguloid { width: 1, height: 4, length: 1 },
        "fence" => Shape::Rectangle { width: 3, height: 1 },
        _ => return None,
    })
}

/// Marker block color for each mob.
pub fn mob_color(mob: &str) -> &'static str {
    match mob {
        "pig" => "pink",
        "cow" => "black",
        "sheep" => "white",
        "chicken" => "yellow",
        "horse" => "tan",
        "rabbit" => "silver",
        "wolf" => "gray",
        "llama" => "orange",
        _ => "magenta",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Queued,
    Running,
    Finished,
    Failed,
    Stopped,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskParams {
    Move { dest: Pos },
    /// Blocks in placement order (bottom-up, then x, then z).
    Build { blocks: Vec<(Pos, BlockId)>, name: String },
    /// Voxels in removal order (top-down).
    Destroy { targets: Vec<Pos> },
    Dig { targets: Vec<Pos>, name: String },
    Fill { targets: Vec<Pos>, block: BlockId },
    Dance,
    Spawn { pos: Pos, block: BlockId, name: String },
    Get { node: NodeId, dest: Pos },
    Point { region: Region },
    Undo,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub params: TaskParams,
    pub status: TaskStatus,
    /// Atomic steps completed.
    pub progress: usize,
    pub delta_log: WorldDelta,
}

impl Task {
    pub fn new(params: TaskParams) -> Self {
        Task { params, status: TaskStatus::Queued, progress: 0, delta_log: WorldDelta::default() }
    }

    pub fn name(&self) -> &'static str {
        match self.params {
            TaskParams::Move { .. } => "move",
            TaskParams::Build { .. } => "build",
            TaskParams::Destroy { .. } => "destroy",
            TaskParams::Dig { .. } => "dig",
            TaskParams::Fill { .. } => "fill",
            TaskParams::Dance => "dance",
            TaskParams::Spawn { .. } => "spawn",
            TaskParams::Get { .. } => "get",
            TaskParams::Point { .. } => "point",
            TaskParams::Undo => "undo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clarification {
    pub question: String,
    pub candidates: Vec<NodeId>,
    pub current: usize,
    pub pointed: Region,
    /// The action waiting on the answer, and the ones after it.
    pub actions: Vec<Action>,
}

/// Where a location resolves to: a point approached from `dir`, or the ring
/// of columns around a footprint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LocTarget {
    Point { pos: Pos, dir: (i32, i32, i32) },
    Ring(Vec<Pos>),
}

/// Horizontal unit axis closest to the speaker's `angle` (degrees).
fn axis_of(angle: f64) -> (i32, i32, i32) {
    let (s, c) = angle.to_radians().sin_cos();
    if c.abs() >= s.abs() {
        (c.signum() as i32, 0, 0)
    } else {
        (0, 0, s.signum() as i32)
    }
}

/// Resolve a relative direction against a referent (a non-empty voxel set)
/// in the speaker's frame.
pub fn resolve_location(dir: Direction, referent: &[Pos], speaker: &Pose, grid: &crate::world::VoxelGrid) -> Result<LocTarget, InterpretError> {
    let region = Region::bounding(referent).ok_or(InterpretError::NoReferent)?;
    let (min, max) = (region.min, region.max);
    let center = Pos::new((min.x + max.x).div_euclid(2), min.y, (min.z + max.z).div_euclid(2));
    let side = |axis: (i32, i32, i32)| {
        let pos = match axis {
            (1, _, _) => Pos::new(max.x + 1, min.y, center.z),
            (-1, _, _) => Pos::new(min.x - 1, min.y, center.z),
            (_, _, 1) => Pos::new(center.x, min.y, max.z + 1),
            _ => Pos::new(center.x, min.y, min.z - 1),
        };
        LocTarget::Point { pos, dir: axis }
    };
    let neg = |(a, b, c): (i32, i32, i32)| (-a, -b, -c);
    Ok(match dir {
        Direction::Left => side(axis_of(speaker.yaw + 90.0)),
        Direction::Right => side(axis_of(speaker.yaw - 90.0)),
        // The front of an object faces the speaker.
        Direction::Front => side(neg(axis_of(speaker.yaw))),
        Direction::Back => side(axis_of(speaker.yaw)),
        Direction::Up => LocTarget::Point { pos: Pos::new(center.x, max.y + 1, center.z), dir: (0, 1, 0) },
        Direction::Down => LocTarget::Point { pos: Pos::new(center.x, min.y - 1, center.z), dir: (0, -1, 0) },
        Direction::Exact => LocTarget::Point { pos: referent.iter().copied().min().expect("non-empty"), dir: (0, 1, 0) },
        Direction::Near => {
            let set: BTreeSet<Pos> = referent.iter().copied().collect();
            let sp = speaker.pos();
            let mut best: Option<(u32, Pos, (i32, i32, i32))> = None;
            for p in &set {
                for step in Step::ALL {
                    let q = step.apply(*p);
                    if set.contains(&q) || !grid.in_bounds(q) || !grid.is_air(q) {
                        continue;
                    }
                    let cand = (q.manhattan(sp), q, step.offset());
                    if best.is_none_or(|b| (cand.0, cand.1) < (b.0, b.1)) {
                        best = Some(cand);
                    }
                }
            }
            let (_, pos, dir) = best.ok_or(InterpretError::NoFreeVoxel)?;
            LocTarget::Point { pos, dir }
        }
        Direction::Around => {
            let footprint: BTreeSet<(i32, i32)> = referent.iter().map(|p| (p.x, p.z)).collect();
            let mut ring = BTreeSet::new();
            for &(x, z) in &footprint {
                for dx in -1..=1 {
                    for dz in -1..=1 {
                        if !footprint.contains(&(x + dx, z + dz)) {
                            ring.insert(Pos::new(x + dx, min.y, z + dz));
                        }
                    }
                }
            }
            LocTarget::Ring(ring.into_iter().collect())
        }
    })
}

/// Translate shape voxels so they sit against `target` from direction `dir`:
/// the bottom rests on `target.y` (the top, going down), the near face
/// touches `target` along a horizontal `dir`, other axes are centered.
pub fn place_against(voxels: &[Pos], target: Pos, dir: (i32, i32, i32)) -> Vec<Pos> {
    let Some(b) = Region::bounding(voxels) else { return Vec::new() };
    let along = |lo: i32, hi: i32, t: i32, d: i32| match d {
        1 => t - lo,
        -1 => t - hi,
        _ => t - (lo + hi).div_euclid(2),
    };
    let dx = along(b.min.x, b.max.x, target.x, dir.0);
    let dz = along(b.min.z, b.max.z, target.z, dir.2);
    let dy = if dir.1 < 0 { target.y - b.max.y } else { target.y - b.min.y };
    let mut out: Vec<Pos> = voxels.iter().map(|p| p.offset(dx, dy, dz)).collect();
    out.sort_by_key(|p| (p.y, p.x, p.z));
    out
}

/// A referent resolved by memory or by the segmenter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Referent {
    pub node: NodeId,
    pub voxels: Vec<Pos>,
    pub via_vision: bool,
}

/// One use of the segmenter, kept for error reporting.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionUse {
    pub text: String,
    pub snapshot: WorldSnapshot,
    pub mask: SegMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AgentEvent {
    Delta { delta: WorldDelta },
    Pose { agent: Pose },
    Chat { speaker: Speaker, text: String },
    Point { event: PointEvent },
}

enum Resolved {
    Tasks(Vec<Task>),
    Ask(Clarification),
}

#[derive(Clone, Debug)]
pub struct AgentConfig {
    pub perception: PerceptionConfig,
    /// Ticks allowed per command before the remaining work is abandoned.
    pub max_ticks: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig { perception: PerceptionConfig::default(), max_ticks: 400 }
    }
}

const DANCE: [Step; 8] = [Step::PosX, Step::PosZ, Step::NegX, Step::NegZ, Step::PosY, Step::NegY, Step::NegX, Step::PosX];

#[derive(Clone, Debug)]
pub struct Agent {
    pub world: World,
    pub memory: Memory,
    pub queue: VecDeque<Task>,
    pub stopped: Option<Task>,
    /// Most recent task that changed the grid, finished or not; UNDO reverts it.
    pub undoable: Option<Task>,
    pub pending: Option<Clarification>,
    /// Dug holes, newest last, for later fills.
    pub holes: Vec<Vec<Pos>>,
    pub tick: u64,
    pub config: AgentConfig,
    pub segmenter: Option<Arc<SegModel>>,
    pub vision_uses: Vec<VisionUse>,
    /// Commands or tasks that ended in an error chat.
    pub failures: u64,
    events: Vec<AgentEvent>,
}

impl Agent {
    pub fn new(world: World, config: AgentConfig, segmenter: Option<Arc<SegModel>>) -> Self {
        let mut agent = Agent {
            world,
            memory: Memory::new(),
            queue: VecDeque::new(),
            stopped: None,
            undoable: None,
            pending: None,
            holes: Vec::new(),
            tick: 0,
            config,
            segmenter,
            vision_uses: Vec::new(),
            failures: 0,
            events: Vec::new(),
        };
        agent.perceive();
        agent
    }

    pub fn perceive(&mut self) {
        self.memory.perceive(&self.world.grid, &self.config.perception, self.tick);
    }

    /// Events emitted since the last drain.
    pub fn drain_events(&mut self) -> Vec<AgentEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn say(&mut self, text: impl Into<String>) {
        let text = text.into();
        self.memory.add_chat(Speaker::Agent, &text, self.tick);
        self.events.push(AgentEvent::Chat { speaker: Speaker::Agent, text });
    }

    fn fail(&mut self, text: impl Into<String>) {
        self.failures += 1;
        self.say(text);
    }

    /// Record a player chat; returns its index for span resolution.
    pub fn hear(&mut self, text: &str) -> u32 {
        self.events.push(AgentEvent::Chat { speaker: Speaker::Player, text: text.to_string() });
        self.memory.add_chat(Speaker::Player, text, self.tick) as u32
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    fn gaze(&self) -> Option<Pos> {
        look_target(&self.world.player, &self.world.grid, DEFAULT_LOOK_RANGE)
    }

    fn ground_top(&self) -> i32 {
        self.memory.ground().iter().map(|p| p.y).max().unwrap_or(-1)
    }

    fn free(&self, p: Pos) -> bool {
        self.world.grid.in_bounds(p) && self.world.grid.is_air(p)
    }

    /// Handle a parsed form: memory questions and statements are answered
    /// at once, STOP and RESUME act immediately, other actions are queued.
    pub fn handle(&mut self, lf: &LogicalForm) {
        self.perceive();
        match lf.dialogue_type {
            DialogueType::GetMemory => match self.memory.get_memory(lf, self.gaze()) {
                Ok(answer) => self.say(answer),
                Err(_) => self.fail("I don't know"),
            },
            DialogueType::PutMemory => match self.memory.put_memory(lf, self.gaze()) {
                Ok(_) => self.say("OK"),
                Err(e) => self.fail(InterpretError::from(e).chat()),
            },
            DialogueType::HumanGiveCommand => {
                let actions = lf.actions().to_vec();
                self.run_actions(actions);
            }
        }
    }

    fn run_actions(&mut self, actions: Vec<Action>) {
        for (i, action) in actions.iter().enumerate() {
            match action.action_type {
                ActionType::Stop => {
                    self.stop();
                    continue;
                }
                ActionType::Resume => {
                    self.resume();
                    continue;
                }
                _ => {}
            }
            match self.interpret_action(action, None) {
                Ok(Resolved::Tasks(tasks)) => self.queue.extend(tasks),
                Ok(Resolved::Ask(mut c)) => {
                    c.actions = actions[i..].to_vec();
                    self.ask(c);
                    return;
                }
                Err(e) => {
                    self.fail(e.chat());
                    return;
                }
            }
        }
    }

    fn ask(&mut self, c: Clarification) {
        let first = c.candidates[c.current];
        self.point_at_node(first);
        self.say(c.question.clone());
        self.pending = Some(c);
    }

    fn point_at_node(&mut self, id: NodeId) {
        if let Some(node) = self.memory.node(id) {
            if let Some(r) = Region::bounding(node.voxels.iter()) {
                if let Ok(ev) = point_at(self.world.grid.dims(), r.min, r.max, DEFAULT_POINT_TICKS) {
                    self.events.push(AgentEvent::Point { event: ev });
                }
            }
        }
    }

    /// Yes picks the pointed candidate; no points at the next one.
    pub fn answer_clarification(&mut self, yes: bool) -> Result<(), InterpretError> {
        let mut c = self.pending.take().ok_or(InterpretError::NoPendingClarification)?;
        if yes {
            let chosen = c.candidates[c.current];
            let (first, rest) = c.actions.split_first().expect("clarification holds its action");
            match self.interpret_action(first, Some(chosen)) {
                Ok(Resolved::Tasks(tasks)) => {
                    self.queue.extend(tasks);
                    self.run_actions(rest.to_vec());
                }
                Ok(Resolved::Ask(_)) => unreachable!("a chosen referent is never ambiguous"),
                Err(e) => self.fail(e.chat()),
            }
            return Ok(());
        }
        c.current += 1;
        if c.current >= c.candidates.len() {
            self.fail(InterpretError::NoReferent.chat());
            return Ok(());
        }
        let next = c.candidates[c.current];
        c.pointed = Region::bounding(self.memory.node(next).expect("candidate exists").voxels.iter()).expect("non-empty");
        self.ask(c);
        Ok(())
    }

    pub fn stop(&mut self) {
        if let Some(mut head) = self.queue.pop_front() {
            head.status = TaskStatus::Stopped;
            if !head.delta_log.is_empty() && !matches!(head.params, TaskParams::Undo) {
                self.undoable = Some(head.clone());
            }
            self.stopped = Some(head);
        }
        self.queue.clear();
    }

    pub fn resume(&mut self) {
        match self.stopped.take() {
            Some(mut t) => {
                t.status = TaskStatus::Queued;
                self.queue.push_front(t);
            }
            None => self.fail("There is nothing to resume"),
        }
    }

    /// Resolve reference filters: memory first, then the segmenter.
    pub fn resolve_reference(&mut self, filters: &Filters, at: Option<Pos>) -> Result<Result<Referent, Vec<NodeId>>, InterpretError> {
        let conjuncts = self.memory.resolve_filters(filters)?;
        let mut hits = self.memory.query(&conjuncts);
        if let Some(p) = at {
            let near: Vec<NodeId> = hits.iter().copied().filter(|&id| self.memory.node(id).is_some_and(|n| n.voxels.contains(&p))).collect();
            if !near.is_empty() {
                hits = near;
            }
        }
        match hits.len() {
            0 => self.vision_fallback(&conjuncts).map(Ok),
            1 => {
                let node = self.memory.node(hits[0]).expect("query returns live ids");
                Ok(Ok(Referent { node: node.id, voxels: node.voxels.iter().copied().collect(), via_vision: false }))
            }
            _ => Ok(Err(hits)),
        }
    }

    fn vision_fallback(&mut self, conjuncts: &[(Predicate, String)]) -> Result<Referent, InterpretError> {
        let Some(model) = self.segmenter.clone() else { return Err(InterpretError::NoReferent) };
        let colors = conjuncts.iter().filter(|(p, _)| *p == Predicate::HasColour).map(|(_, v)| v.as_str());
        let names = conjuncts.iter().filter(|(p, _)| *p == Predicate::HasName).map(|(_, v)| v.as_str());
        let text = colors.chain(names).collect::<Vec<_>>().join(" ");
        let mask = model.predict_mask(&self.world.grid, &text).map_err(|_| InterpretError::NoReferent)?;
        self.vision_uses.push(VisionUse { text, snapshot: self.world.snapshot(), mask: mask.clone() });
        let comps = detect_components(&self.world.grid, self.memory.ground(), self.config.perception.connectivity);
        let best = comps
            .iter()
            .map(|c| (c.iter().filter(|p| mask.contains(p)).count(), c))
            .filter(|(n, _)| *n > 0)
            .fold(None, |best: Option<(usize, &SegMask)>, c| match best {
                Some(b) if b.0 >= c.0 => Some(b),
                _ => Some(c),
            });
        let (_, comp) = best.ok_or(InterpretError::NoReferent)?;
        let voxels: Vec<Pos> = comp.iter().copied().filter(|p| mask.contains(p)).collect();
        // The component is normally already a perceived node; name it.
        let id = match self.memory.object_at(voxels[0]) {
            Some(id) => id,
            None => self.memory.insert(crate::memory::NodeKind::Object, BTreeSet::new(), voxels.iter().copied().collect(), self.tick),
        };
        for (p, v) in conjuncts {
            if *p == Predicate::HasName {
                self.memory.tag(id, "has_name", v);
            }
        }
        Ok(Referent { node: id, voxels, via_vision: true })
    }

    fn referent_for(&mut self, action: &Action, chosen: Option<NodeId>, filters: &Filters, at: Option<Pos>) -> Result<Result<Referent, Clarification>, InterpretError> {
        if let Some(id) = chosen {
            let node = self.memory.node(id).ok_or(InterpretError::NoReferent)?;
            return Ok(Ok(Referent { node: id, voxels: node.voxels.iter().copied().collect(), via_vision: false }));
        }
        match self.resolve_reference(filters, at)? {
            Ok(r) => Ok(Ok(r)),
            Err(ids) => {
                let pointed = Region::bounding(self.memory.node(ids[0]).expect("live").voxels.iter()).expect("non-empty");
                Ok(Err(Clarification {
                    question: "Do you mean this one?".into(),
                    candidates: ids,
                    current: 0,
                    pointed,
                    actions: vec![action.clone()],
                }))
            }
        }
    }

    /// The action's (location, referent) pair. Referents come from the
    /// location's reference object, or the action's own for DESTROY and GET.
    fn locate(&mut self, action: &Action, chosen: Option<NodeId>) -> Result<Result<Option<(LocTarget, Option<Referent>)>, Clarification>, InterpretError> {
        let Some(Location { relative_direction: dir, reference_object }) = &action.location else { return Ok(Ok(None)) };
        let speaker = self.world.player;
        match reference_object {
            Some(r) => {
                let referent = match self.referent_for(action, chosen, &r.filters, None)? {
                    Ok(x) => x,
                    Err(c) => return Ok(Err(c)),
                };
                let loc = resolve_location(*dir, &referent.voxels, &speaker, &self.world.grid)?;
                Ok(Ok(Some((loc, Some(referent)))))
            }
            None => {
                let loc = match dir {
                    Direction::Exact => {
                        let p = self.gaze().unwrap_or(speaker.pos());
                        LocTarget::Point { pos: p, dir: (0, 1, 0) }
                    }
                    _ => resolve_location(*dir, &[self.world.agent.pos()], &speaker, &self.world.grid)?,
                };
                Ok(Ok(Some((loc, None))))
            }
        }
    }

    fn default_front(&self) -> LocTarget {
        let axis = axis_of(self.world.agent.yaw);
        let a = self.world.agent.pos();
        LocTarget::Point { pos: Pos::new(a.x + 2 * axis.0, self.ground_top() + 1, a.z + 2 * axis.2), dir: axis }
    }

    fn first_value(&self, filters: Option<&Filters>, pred: Predicate) -> Result<Option<String>, InterpretError> {
        let Some(f) = filters else { return Ok(None) };
        Ok(self.memory.resolve_filters(f)?.into_iter().find(|(p, _)| *p == pred).map(|(_, v)| v))
    }

    fn block_for_color(&self, color: Option<&str>, default: BlockId) -> BlockId {
        color.and_then(|c| self.world.grid.palette().by_color(c)).unwrap_or(default)
    }

    /// Lift a target out of solid cells to the first air cell above.
    fn surface(&self, mut p: Pos) -> Pos {
        while self.world.grid.in_bounds(p) && !self.world.grid.is_air(p) {
            p = p.offset(0, 1, 0);
        }
        p
    }

    fn fits(&self, cells: &[Pos]) -> bool {
        let (a, b) = (self.world.agent.pos(), self.world.player.pos());
        !cells.is_empty() && cells.iter().all(|&p| self.free(p) && p != a && p != b)
    }

    fn interpret_action(&mut self, action: &Action, chosen: Option<NodeId>) -> Result<Resolved, InterpretError> {
        use ActionType as A;
        let schematic = action.schematic.as_ref().map(|s| &s.filters);
        let located = match self.locate(action, chosen)? {
            Ok(l) => l,
            Err(c) => return Ok(Resolved::Ask(c)),
        };
        let one = |p: TaskParams| Ok(Resolved::Tasks(vec![Task::new(p)]));
        match action.action_type {
            A::Stop | A::Resume => Ok(Resolved::Tasks(Vec::new())),
            A::Undo => one(TaskParams::Undo),
            A::Freebuild => Err(InterpretError::Unsupported),
            A::Dance => one(TaskParams::Dance),
            A::Build => {
                let word = self.first_value(schematic, Predicate::HasName)?.ok_or(InterpretError::UnknownSchematic(String::new()))?;
                let shape = schematic_shape(&word).ok_or_else(|| InterpretError::UnknownSchematic(word.clone()))?;
                let color = self.first_value(schematic, Predicate::HasColour)?;
                let block = self.block_for_color(color.as_deref(), self.world.grid.palette().by_color("gray").unwrap_or(BlockId(1)));
                let (pos, dir) = match located.map(|(l, _)| l).unwrap_or_else(|| self.default_front()) {
                    LocTarget::Point { pos, dir } if dir == (0, 1, 0) && action.location.as_ref().is_some_and(|l| l.reference_object.is_none()) => {
                        (self.surface(pos), dir)
                    }
                    LocTarget::Point { pos, dir } => (pos, dir),
                    LocTarget::Ring(_) => return Err(InterpretError::NoFreeVoxel),
                };
                let shape_cells = crate::vision::shapes::shape_voxels(&shape, Pos::new(0, 0, 0));
                // Slide away from the anchor until the shape fits.
                for k in 0..4 {
                    let shift = if dir.1 == 0 { (dir.0 * k, 0, dir.2 * k) } else { (0, dir.1 * k, 0) };
                    let cells = place_against(&shape_cells, pos.offset(shift.0, shift.1, shift.2), dir);
                    if self.fits(&cells) {
                        let blocks = cells.into_iter().map(|p| (p, block)).collect();
                        return one(TaskParams::Build { blocks, name: canonical_name(&word) });
                    }
                }
                Err(InterpretError::NoFreeVoxel)
            }
            A::Destroy => {
                let filters = &action.reference_object.as_ref().ok_or(InterpretError::NoReferent)?.filters;
                let at = match &located {
                    Some((LocTarget::Point { pos, .. }, None)) => Some(*pos),
                    _ => None,
                };
                let referent = match self.referent_for(action, chosen, filters, at)? {
                    Ok(r) => r,
                    Err(c) => return Ok(Resolved::Ask(c)),
                };
                let mut targets = referent.voxels;
                targets.sort_by_key(|p| (std::cmp::Reverse(p.y), p.x, p.z));
                one(TaskParams::Destroy { targets })
            }
            A::Get => {
                let filters = &action.reference_object.as_ref().ok_or(InterpretError::NoReferent)?.filters;
                let referent = match self.referent_for(action, chosen, filters, None)? {
                    Ok(r) => r,
                    Err(c) => return Ok(Resolved::Ask(c)),
                };
                let dest = match resolve_location(Direction::Near, &referent.voxels, &self.world.agent, &self.world.grid)? {
                    LocTarget::Point { pos, .. } => pos,
                    LocTarget::Ring(_) => unreachable!(),
                };
                one(TaskParams::Get { node: referent.node, dest })
            }
            A::Move => {
                let dest = match located {
                    None => return Err(InterpretError::NoReferent),
                    Some((LocTarget::Point { pos, .. }, _)) => pos,
                    Some((LocTarget::Ring(r), _)) => r[0],
                };
                let dest = if action.location.as_ref().is_some_and(|l| l.relative_direction == Direction::Exact && l.reference_object.is_none()) {
                    self.nearest_free(self.world.player.pos())?
                } else {
                    self.nearest_free(dest)?
                };
                one(TaskParams::Move { dest })
            }
            A::Dig => {
                let word = self.first_value(schematic, Predicate::HasName)?.unwrap_or_else(|| "hole".into());
                let top = self.ground_top();
                let columns: Vec<(i32, i32)> = match located.map(|(l, _)| l).unwrap_or_else(|| self.default_front()) {
                    LocTarget::Ring(ring) => ring.iter().map(|p| (p.x, p.z)).collect(),
                    LocTarget::Point { pos, dir } => {
                        let c = if dir.1 == 0 { pos.offset(dir.0, 0, dir.2) } else { pos };
                        (-1..=1).flat_map(|dx| (-1..=1).map(move |dz| (c.x + dx, c.z + dz))).collect()
                    }
                };
                let ground = self.memory.ground();
                let targets: Vec<Pos> = columns.into_iter().map(|(x, z)| Pos::new(x, top, z)).filter(|p| ground.contains(p)).collect();
                if targets.is_empty() {
                    return Err(InterpretError::NoFreeVoxel);
                }
                one(TaskParams::Dig { targets, name: canonical_name(&word) })
            }
            A::Fill => {
                let hole = self.holes.iter().rev().find(|h| h.iter().any(|&p| self.free(p))).ok_or(InterpretError::NoReferent)?;
                let targets: Vec<Pos> = hole.iter().copied().filter(|&p| self.free(p)).collect();
                let color = self.first_value(schematic, Predicate::HasColour)?;
                let block = self.block_for_color(color.as_deref(), Palette::GROUND);
                one(TaskParams::Fill { targets, block })
            }
            A::Spawn => {
                let mob = self.first_value(schematic, Predicate::HasName)?.unwrap_or_else(|| "pig".into());
                let block = self.block_for_color(Some(mob_color(&mob)), BlockId(1));
                let pos = match located.map(|(l, _)| l).unwrap_or_else(|| self.default_front()) {
                    LocTarget::Point { pos, .. } => self.nearest_free(self.surface(pos))?,
                    LocTarget::Ring(r) => self.nearest_free(r[0])?,
                };
                one(TaskParams::Spawn { pos, block, name: mob })
            }
        }
    }

    /// Closest in-bounds air cell to `p` that is not the player's cell.
    fn nearest_free(&self, p: Pos) -> Result<Pos, InterpretError> {
        let grid = &self.world.grid;
        let start = Pos::new(
            p.x.clamp(0, grid.dims().width - 1),
            p.y.clamp(0, grid.dims().height - 1),
            p.z.clamp(0, grid.dims().length - 1),
        );
        let player = self.world.player.pos();
        let mut seen = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(q) = queue.pop_front() {
            if grid.is_air(q) && q != player {
                return Ok(q);
            }
            for step in Step::ALL {
                let n = step.apply(q);
                if grid.in_bounds(n) && seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        Err(InterpretError::NoFreeVoxel)
    }

    /// First step of a shortest path through air from the agent to `dest`.
    fn next_step(&self, dest: Pos) -> Option<Option<Step>> {
        let from = self.world.agent.pos();
        if from == dest {
            return Some(None);
        }
        let grid = &self.world.grid;
        let mut first: BTreeMap<Pos, Step> = BTreeMap::new();
        let mut queue = VecDeque::from([from]);
        let mut seen = BTreeSet::from([from]);
        while let Some(p) = queue.pop_front() {
            for step in Step::ALL {
                let q = step.apply(p);
                if !grid.in_bounds(q) || !grid.is_air(q) || !seen.insert(q) {
                    continue;
                }
                let s = if p == from { step } else { first[&p] };
                if q == dest {
                    return Some(Some(s));
                }
                first.insert(q, s);
                queue.push_back(q);
            }
        }
        None
    }

    fn apply(&mut self, task: &mut Task, delta: WorldDelta) {
        task.delta_log.extend(delta.clone());
        self.events.push(AgentEvent::Delta { delta });
    }

    fn step_toward(&mut self, dest: Pos) -> Result<bool, String> {
        match self.next_step(dest) {
            None => Err("I can't get there".into()),
            Some(None) => Ok(true),
            Some(Some(step)) => {
                let pose = crate::world::step_agent(&self.world.agent, &self.world.grid, step).map_err(|e| e.to_string())?;
                self.world.agent = pose;
                self.events.push(AgentEvent::Pose { agent: pose });
                Ok(self.world.agent.pos() == dest)
            }
        }
    }

    /// Advance the head task by one atomic step.
    pub fn tick(&mut self) {
        self.tick += 1;
        let Some(mut task) = self.queue.pop_front() else { return };
        task.status = TaskStatus::Running;
        let outcome = self.step(&mut task);
        match outcome {
            Ok(false) => self.queue.push_front(task),
            Ok(true) => {
                task.status = TaskStatus::Finished;
                self.perceive();
                self.on_finish(&task);
                if !matches!(task.params, TaskParams::Undo) {
                    self.undoable = Some(task);
                }
            }
            Err(msg) => {
                task.status = TaskStatus::Failed;
                self.perceive();
                self.fail(msg);
                // Partial edits of a failed task are what UNDO should remove.
                if !task.delta_log.is_empty() && !matches!(task.params, TaskParams::Undo) {
                    self.undoable = Some(task);
                }
            }
        }
    }

    fn on_finish(&mut self, task: &Task) {
        match &task.params {
            TaskParams::Build { blocks, name } => {
                if let Some(id) = blocks.first().and_then(|(p, _)| self.memory.object_at(*p)) {
                    self.memory.tag(id, "has_name", name);
                }
            }
            TaskParams::Spawn { pos, name, .. } => {
                if let Some(id) = self.memory.object_at(*pos) {
                    self.memory.tag(id, "has_name", name);
                }
            }
            TaskParams::Dig { targets, .. } => self.holes.push(targets.clone()),
            TaskParams::Get { node, .. } => {
                self.memory.tag(*node, "has_tag", "carried");
            }
            _ => {}
        }
    }

    /// Ok(true) when the task is done after this step.
    fn step(&mut self, task: &mut Task) -> Result<bool, String> {
        let i = task.progress;
        task.progress += 1;
        match task.params.clone() {
            TaskParams::Move { dest } => {
                task.progress = i;
                self.step_toward(dest)
            }
            TaskParams::Get { node, dest } => {
                task.progress = i;
                if self.memory.node(node).is_none() {
                    return Err("It's gone".into());
                }
                self.step_toward(dest)
            }
            TaskParams::Build { blocks, .. } => {
                let (p, b) = blocks[i];
                if self.world.grid.get(p) != b {
                    if p == self.world.agent.pos() {
                        return Err("I'm in the way".into());
                    }
                    let d = self.world.grid.place_block(p, b).map_err(|e| e.to_string())?;
                    self.apply(task, d);
                }
                Ok(task.progress == blocks.len())
            }
            TaskParams::Destroy { targets } | TaskParams::Dig { targets, .. } => {
                let p = targets[i];
                if !self.world.grid.is_air(p) {
                    let d = self.world.grid.destroy_block(p).map_err(|e| e.to_string())?;
                    self.apply(task, d);
                }
                Ok(task.progress == targets.len())
            }
            TaskParams::Fill { targets, block } => {
                let p = targets[i];
                if self.world.grid.is_air(p) && p != self.world.agent.pos() {
                    let d = self.world.grid.place_block(p, block).map_err(|e| e.to_string())?;
                    self.apply(task, d);
                }
                Ok(task.progress == targets.len())
            }
            TaskParams::Spawn { pos, block, .. } => {
                let d = self.world.grid.place_block(pos, block).map_err(|e| e.to_string())?;
                self.apply(task, d);
                Ok(true)
            }
            TaskParams::Dance => {
                if let Ok(pose) = crate::world::step_agent(&self.world.agent, &self.world.grid, DANCE[i]) {
                    self.world.agent = pose;
                    self.events.push(AgentEvent::Pose { agent: pose });
                }
                Ok(task.progress == DANCE.len())
            }
            TaskParams::Point { region } => {
                let ev = point_at(self.world.grid.dims(), region.min, region.max, DEFAULT_POINT_TICKS).map_err(|e| e.to_string())?;
                self.events.push(AgentEvent::Point { event: ev });
                Ok(true)
            }
            TaskParams::Undo => {
                let Some(last) = self.undoable.take() else { return Err("There is nothing to undo".into()) };
                self.world.grid.revert_delta(&last.delta_log).map_err(|e| e.to_string())?;
                // A stopped task whose edits are gone must not resume on top of them.
                if self.stopped.as_ref().is_some_and(|t| t.delta_log == last.delta_log) {
                    self.stopped = None;
                }
                let mut inverse = WorldDelta::default();
                for e in last.delta_log.entries.iter().rev() {
                    inverse.extend(WorldDelta::single(e.pos, e.after, e.before));
                }
                task.delta_log = inverse.clone();
                self.events.push(AgentEvent::Delta { delta: inverse });
                Ok(true)
            }
        }
    }

    /// Tick until the queue drains or `max_ticks` pass; returns ticks used.
    pub fn run(&mut self) -> usize {
        let mut n = 0;
        while !self.queue.is_empty() && n < self.config.max_ticks {
            self.tick();
            n += 1;
        }
        if !self.queue.is_empty() {
            self.stop();
            self.fail("I ran out of time");
        }
        n
    }
}
