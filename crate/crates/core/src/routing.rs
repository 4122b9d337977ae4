//! Forced-choice error routing, one question at a time.
//!
//! The tree is reconstructed from prose: "did it do what you asked?", then
//! "did it understand?", then "did it identify the objects?".

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Question {
    DidWhatAsked,
    Understood,
    IdentifiedObjects,
}

impl Question {
    pub fn text(self) -> &'static str {
        match self {
            Question::DidWhatAsked => "did the assistant correctly do what you asked?",
            Question::Understood => "did the assistant understand your command?",
            Question::IdentifiedObjects => "did the assistant correctly identify the objects you referred to?",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    NoError,
    NluError,
    VisionError,
    OtherError,
}

impl Terminal {
    pub const ALL: [Terminal; 4] = [Terminal::NoError, Terminal::NluError, Terminal::VisionError, Terminal::OtherError];

    pub fn is_error(self) -> bool {
        self != Terminal::NoError
    }

    /// The answers that lead to this terminal.
    pub fn answers(self) -> Vec<bool> {
        match self {
            Terminal::NoError => vec![true],
            Terminal::NluError => vec![false, false],
            Terminal::VisionError => vec![false, true, false],
            Terminal::OtherError => vec![false, true, true],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "value", rename_all = "snake_case")]
pub enum RoutingState {
    Asking(Question),
    Done(Terminal),
}

impl Default for RoutingState {
    fn default() -> Self {
        RoutingState::Asking(Question::DidWhatAsked)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("routing already reached {0:?}")]
pub struct AlreadyTerminal(pub Terminal);

pub fn routing_next(state: RoutingState, yes: bool) -> Result<RoutingState, AlreadyTerminal> {
    use Question as Q;
    Ok(match state {
        RoutingState::Done(t) => return Err(AlreadyTerminal(t)),
        RoutingState::Asking(Q::DidWhatAsked) if yes => RoutingState::Done(Terminal::NoError),
        RoutingState::Asking(Q::DidWhatAsked) => RoutingState::Asking(Q::Understood),
        RoutingState::Asking(Q::Understood) if yes => RoutingState::Asking(Q::IdentifiedObjects),
        RoutingState::Asking(Q::Understood) => RoutingState::Done(Terminal::NluError),
        RoutingState::Asking(Q::IdentifiedObjects) if yes => RoutingState::Done(Terminal::OtherError),
        RoutingState::Asking(Q::IdentifiedObjects) => RoutingState::Done(Terminal::VisionError),
    })
}

/// Walk the tree with a sequence of answers.
pub fn route(answers: &[bool]) -> Result<RoutingState, AlreadyTerminal> {
    answers.iter().try_fold(RoutingState::default(), |s, &a| routing_next(s, a))
}
