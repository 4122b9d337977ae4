//! One worker's interaction with an agent: the command cycle, its status
//! messages, error routing, and the live score.
//!
//! Time is supplied by the caller, so the same state machine drives both
//! simulated sessions and the HTTP service.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentConfig, AgentEvent, VisionUse};
use crate::dsl::LogicalForm;
use crate::parser::ParserModel;
use crate::routing::{routing_next, Question, RoutingState, Terminal};
use crate::scoring::{bonus, creativity, score_session, submission_gate, GateConfig, GateDecision, ScoreConfig, SessionScore};
use crate::vision::{gen_scene, SceneConfig, SceneObject, SegModel};
use crate::world::{Dims, Pos, Pose, World, WorldSnapshot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Idle,
    Sending,
    Received,
    Thinking,
    Doing,
}

impl Phase {
    pub fn message(self) -> &'static str {
        match self {
            Phase::Idle => "",
            Phase::Sending => "sending command",
            Phase::Received => "command received",
            Phase::Thinking => "assistant thinking",
            Phase::Doing => "assistant is doing the task",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEvent {
    Snapshot { world: WorldSnapshot },
    Status { phase: Phase, message: String },
    StatusClear { phase: Phase },
    Agent { event: AgentEvent },
    Routing { question: Question, text: String },
    Routed { terminal: Terminal },
    Score { score: SessionScore, bonus: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequenced {
    pub seq: u64,
    #[serde(flatten)]
    pub event: SessionEvent,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SessionError {
    #[error("a routing question is pending")]
    RoutingPending,
    #[error("empty command")]
    EmptyCommand,
    #[error("no routing question is pending")]
    NoPendingRouting,
}

/// One issued command and how it was routed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub session_id: String,
    pub worker_id: String,
    pub iteration: u32,
    pub text: String,
    /// Parse with spans pointing at chat 0, comparable across sessions.
    pub parse: Option<LogicalForm>,
    pub outcome: String,
    pub terminal: Option<Terminal>,
    /// Annotator verdict; unknown until annotation.
    pub valid: Option<bool>,
    pub annotation: Option<LogicalForm>,
    #[serde(skip)]
    pub vision_uses: Vec<VisionUse>,
    #[serde(skip)]
    pub failed: bool,
}

#[derive(Clone, Debug)]
pub struct SessionConfig {
    pub agent: AgentConfig,
    pub score: ScoreConfig,
    pub gate: GateConfig,
    pub base_pay: f64,
    pub per_point: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig { agent: AgentConfig::default(), score: ScoreConfig::default(), gate: GateConfig::default(), base_pay: 3.0, per_point: 0.5 }
    }
}

/// World size for interactive sessions.
pub const SESSION_DIMS: Dims = Dims::new(16, 8, 16);

/// Seeded session world: flat ground with 1 to 3 shapes, the agent in one
/// corner and the player in the opposite one looking at the first shape.
pub fn session_world(seed: u64) -> (World, Vec<SceneObject>) {
    let config = SceneConfig { dims: SESSION_DIMS, ..SceneConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = loop {
        if let Ok(s) = gen_scene(&config, rng.random()) {
            break s;
        }
    };
    let grid = scene.grid;
    let free = |p: Pos| grid.is_air(p);
    let corner = |x: i32, z: i32| {
        (0..SESSION_DIMS.height).map(|y| Pos::new(x, y, z)).find(|&p| free(p)).unwrap_or(Pos::new(x, SESSION_DIMS.height - 1, z))
    };
    let agent = Pose::new(corner(1, 1), 0.0, 45.0);
    let mut player = Pose::new(corner(SESSION_DIMS.width - 2, SESSION_DIMS.length - 2), 0.0, 225.0);
    if let Some(obj) = scene.objects.first() {
        let target = *obj.mask.iter().next().expect("objects are non-empty");
        player.face(target);
        let dy = (target.y - player.y) as f64;
        let flat = (((target.x - player.x).pow(2) + (target.z - player.z).pow(2)) as f64).sqrt();
        let yaw = player.yaw;
        player.set_angles(dy.atan2(flat).to_degrees(), yaw);
    }
    (World::new(grid, agent, player), scene.objects)
}

pub struct Session {
    pub id: String,
    pub worker_id: String,
    pub iteration: u32,
    pub agent: Agent,
    parser: Arc<ParserModel>,
    config: SessionConfig,
    phase: Phase,
    routing: Option<RoutingState>,
    current: Option<CommandRecord>,
    pub records: Vec<CommandRecord>,
    commands: Vec<String>,
    creativities: Vec<f64>,
    history: Arc<Vec<String>>,
    events: Vec<Sequenced>,
    next_seq: u64,
    pub score: SessionScore,
}

fn rebase(mut lf: LogicalForm) -> LogicalForm {
    lf.visit_spans_mut(|s| s.text_index = 0);
    lf
}

impl Session {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        worker_id: impl Into<String>,
        iteration: u32,
        world: World,
        parser: Arc<ParserModel>,
        segmenter: Option<Arc<SegModel>>,
        history: Arc<Vec<String>>,
        config: SessionConfig,
    ) -> Self {
        let agent = Agent::new(world, config.agent.clone(), segmenter);
        let score = score_session(&[], &[], &config.score);
        let mut s = Session {
            id: id.into(),
            worker_id: worker_id.into(),
            iteration,
            agent,
            parser,
            config,
            phase: Phase::Idle,
            routing: None,
            current: None,
            records: Vec::new(),
            commands: Vec::new(),
            creativities: Vec::new(),
            history,
            events: Vec::new(),
            next_seq: 0,
            score,
        };
        let world = s.agent.world.snapshot();
        s.emit(SessionEvent::Snapshot { world });
        s
    }

    fn emit(&mut self, event: SessionEvent) {
        self.events.push(Sequenced { seq: self.next_seq, event });
        self.next_seq += 1;
    }

    fn forward_agent_events(&mut self) {
        for event in self.agent.drain_events() {
            self.emit(SessionEvent::Agent { event });
        }
    }

    fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
        self.emit(SessionEvent::Status { phase, message: phase.message().to_string() });
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn routing(&self) -> Option<RoutingState> {
        self.routing
    }

    pub fn events(&self) -> &[Sequenced] {
        &self.events
    }

    pub fn events_since(&self, seq: u64) -> &[Sequenced] {
        let start = self.events.partition_point(|e| e.seq < seq);
        &self.events[start..]
    }

    /// Start a command: status messages, parse, interpretation. Tasks then
    /// run through [`Session::advance`]. A bare "stop" while a task runs is
    /// passed straight to the agent; "yes"/"no" answer a pending
    /// clarification.
    pub fn submit_command(&mut self, text: &str) -> Result<(), SessionError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(SessionError::EmptyCommand);
        }
        if self.phase == Phase::Doing && text.eq_ignore_ascii_case("stop") {
            self.agent.hear(text);
            self.agent.stop();
            self.forward_agent_events();
            return Ok(());
        }
        if self.routing.is_some() || self.phase != Phase::Idle {
            return Err(SessionError::RoutingPending);
        }
        self.set_phase(Phase::Sending);
        let chat_index = self.agent.hear(text);
        self.forward_agent_events();
        self.set_phase(Phase::Received);
        self.set_phase(Phase::Thinking);
        let before_failures = self.agent.failures;
        let before_vision = self.agent.vision_uses.len();
        let lower = text.to_ascii_lowercase();
        let parse = if self.agent.pending.is_some() && (lower == "yes" || lower == "no") {
            let _ = self.agent.answer_clarification(lower == "yes");
            None
        } else {
            match self.parser.parse(text, chat_index) {
                Ok(lf) => {
                    self.agent.handle(&lf);
                    Some(lf)
                }
                Err(_) => {
                    self.agent.failures += 1;
                    self.agent.say("I don't understand");
                    None
                }
            }
        };
        self.forward_agent_events();
        self.emit(SessionEvent::StatusClear { phase: Phase::Thinking });
        self.set_phase(Phase::Doing);
        self.commands.push(text.to_string());
        let c = creativity(text, &self.history);
        self.creativities.push(c);
        self.current = Some(CommandRecord {
            session_id: self.id.clone(),
            worker_id: self.worker_id.clone(),
            iteration: self.iteration,
            text: text.to_string(),
            parse: parse.map(rebase),
            outcome: String::new(),
            terminal: None,
            valid: None,
            annotation: None,
            vision_uses: Vec::new(),
            failed: false,
        });
        // Failures and vision calls so far belong to this command.
        if let Some(rec) = self.current.as_mut() {
            rec.failed = self.agent.failures > before_failures;
            rec.vision_uses = self.agent.vision_uses[before_vision..].to_vec();
        }
        if self.agent.is_idle() {
            self.finish_doing();
        }
        Ok(())
    }

    /// Clear the "received" message; the service calls this on a timer.
    pub fn clear_received(&mut self) {
        self.emit(SessionEvent::StatusClear { phase: Phase::Received });
    }

    /// Run up to `ticks` agent ticks of the current command.
    pub fn advance(&mut self, ticks: usize) {
        if self.phase != Phase::Doing {
            return;
        }
        let before_failures = self.agent.failures;
        let before_vision = self.agent.vision_uses.len();
        for _ in 0..ticks {
            if self.agent.is_idle() {
                break;
            }
            self.agent.tick();
        }
        self.forward_agent_events();
        if let Some(rec) = self.current.as_mut() {
            rec.failed |= self.agent.failures > before_failures;
            rec.vision_uses.extend(self.agent.vision_uses[before_vision..].iter().cloned());
        }
        if self.agent.is_idle() {
            self.finish_doing();
        }
    }

    /// Run the current command to completion (bounded by the agent's tick budget).
    pub fn run_to_completion(&mut self) {
        let budget = self.config.agent.max_ticks;
        self.advance(budget);
        if self.phase == Phase::Doing {
            let before = self.agent.failures;
            self.agent.stop();
            self.agent.failures += 1;
            self.agent.say("I ran out of time");
            if let Some(rec) = self.current.as_mut() {
                rec.failed |= self.agent.failures > before;
            }
            self.forward_agent_events();
            self.finish_doing();
        }
    }

    fn finish_doing(&mut self) {
        self.emit(SessionEvent::StatusClear { phase: Phase::Doing });
        self.phase = Phase::Idle;
        if let Some(rec) = self.current.as_mut() {
            rec.outcome = self.agent.memory.chats().last().map(|c| c.text.clone()).unwrap_or_default();
        }
        self.routing = Some(RoutingState::Asking(Question::DidWhatAsked));
        let q = Question::DidWhatAsked;
        self.emit(SessionEvent::Routing { question: q, text: q.text().to_string() });
    }

    /// Answer the pending routing question.
    pub fn answer_routing(&mut self, yes: bool) -> Result<RoutingState, SessionError> {
        let state = self.routing.ok_or(SessionError::NoPendingRouting)?;
        let next = routing_next(state, yes).map_err(|_| SessionError::NoPendingRouting)?;
        match next {
            RoutingState::Asking(q) => {
                self.routing = Some(next);
                self.emit(SessionEvent::Routing { question: q, text: q.text().to_string() });
            }
            RoutingState::Done(terminal) => {
                self.routing = None;
                let mut rec = self.current.take().expect("routing implies a current command");
                rec.terminal = Some(terminal);
                self.records.push(rec);
                self.emit(SessionEvent::Routed { terminal });
                self.score = score_session(&self.commands, &self.creativities, &self.config.score);
                let b = bonus(self.score.score, self.config.base_pay, self.config.per_point);
                let score = self.score.clone();
                self.emit(SessionEvent::Score { score, bonus: b });
            }
        }
        Ok(next)
    }

    /// The command awaiting routing, if any.
    pub fn current(&self) -> Option<&CommandRecord> {
        self.current.as_ref()
    }

    pub fn gate(&self, elapsed_seconds: u64) -> GateDecision {
        submission_gate(elapsed_seconds, self.records.len(), &self.config.gate)
    }

    pub fn bonus(&self) -> f64 {
        bonus(self.score.score, self.config.base_pay, self.config.per_point)
    }

    pub fn commands(&self) -> &[String] {
        &self.commands
    }
}
