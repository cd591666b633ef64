//! Wire types. Every payload carries `schema_version`.

use qfrog_core::env::{Action, FrogStatus, GridState, Observation, Outcome, GRID};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Hotseat,
    HumanVsAgent,
    AgentDemo,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Hotseat, Mode::HumanVsAgent, Mode::AgentDemo];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Hotseat => "hotseat",
            Mode::HumanVsAgent => "human-vs-agent",
            Mode::AgentDemo => "agent-demo",
        }
    }

    pub fn needs_policy(self) -> bool {
        self != Mode::Hotseat
    }

    /// Whether frog `i` is driven by the loaded policy.
    pub fn agent_controls(self, frog: usize) -> bool {
        match self {
            Mode::Hotseat => false,
            Mode::HumanVsAgent => frog == 1,
            Mode::AgentDemo => true,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode {s:?}; expected one of hotseat, human-vs-agent, agent-demo"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Empty,
    Car,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub kind: CellKind,
    /// Signed cells per tick; 0 for empty cells.
    pub velocity: i8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Controller {
    Human,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrogView {
    /// "A" or "B".
    pub id: String,
    pub row: u8,
    pub col: u8,
    pub status: FrogStatus,
    pub controller: Controller,
    pub last_reward: f32,
    pub cumulative_reward: f32,
    /// An action is stored and waiting for the tick to resolve.
    pub pending: bool,
}

/// Full board plus HUD data. The board is the observation without loss:
/// [`StateMessage::observation`] rebuilds it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub schema_version: u32,
    pub session_id: String,
    pub mode: Mode,
    pub episode: u32,
    pub seed: u64,
    pub tick: u32,
    pub max_steps: u32,
    /// `cells[row][col]`, row 0 is the goal.
    pub cells: Vec<Vec<Cell>>,
    pub frogs: Vec<FrogView>,
    pub outcome: Outcome,
    pub done: bool,
}

pub const FROG_IDS: [&str; 2] = ["A", "B"];

impl StateMessage {
    pub fn cells_from(state: &GridState) -> Vec<Vec<Cell>> {
        let mut cells = vec![
            vec![
                Cell {
                    kind: CellKind::Empty,
                    velocity: 0
                };
                GRID
            ];
            GRID
        ];
        for car in &state.cars {
            cells[usize::from(car.row)][usize::from(car.col)] = Cell {
                kind: CellKind::Car,
                velocity: car.velocity,
            };
        }
        cells
    }

    /// Rebuilds the network observation from the message alone.
    pub fn observation(&self) -> Observation {
        let mut obs = [0i8; 3 * GRID * GRID];
        let at = |ch: usize, r: usize, c: usize| ch * GRID * GRID + r * GRID + c;
        for (r, row) in self.cells.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                if cell.kind == CellKind::Car {
                    obs[at(1, r, c)] = 1;
                    obs[at(2, r, c)] = cell.velocity;
                }
            }
        }
        // B first so A wins a shared cell, matching the encoder
        for (i, f) in self.frogs.iter().enumerate().rev() {
            if f.status != FrogStatus::Dead {
                obs[at(0, usize::from(f.row), usize::from(f.col))] = i as i8 + 1;
            }
        }
        Observation::from_cells(obs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub schema_version: u32,
    pub session_id: String,
    pub state: StateMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub schema_version: u32,
    /// True when this submission completed the barrier and a tick ran.
    pub resolved: bool,
    /// Frog ids still owing an action for the current tick.
    pub waiting_for: Vec<String>,
    pub state: StateMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hint {
    pub schema_version: u32,
    pub frog: String,
    pub action: Action,
    /// Q-values or logits behind the suggestion, indexed by action code.
    pub scores: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub schema_version: u32,
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

/// JSON Schema for [`StateMessage`] at [`SCHEMA_VERSION`].
pub fn state_schema() -> Value {
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "$id": format!("qfrog/state-message/v{SCHEMA_VERSION}"),
        "title": "StateMessage",
        "type": "object",
        "additionalProperties": false,
        "required": ["schema_version", "session_id", "mode", "episode", "seed", "tick", "max_steps",
                     "cells", "frogs", "outcome", "done"],
        "properties": {
            "schema_version": { "const": SCHEMA_VERSION },
            "session_id": { "type": "string" },
            "mode": { "enum": ["hotseat", "human-vs-agent", "agent-demo"] },
            "episode": { "type": "integer", "minimum": 0 },
            "seed": { "type": "integer", "minimum": 0 },
            "tick": { "type": "integer", "minimum": 0 },
            "max_steps": { "type": "integer", "minimum": 1 },
            "cells": {
                "type": "array", "minItems": GRID, "maxItems": GRID,
                "items": {
                    "type": "array", "minItems": GRID, "maxItems": GRID,
                    "items": {
                        "type": "object",
                        "additionalProperties": false,
                        "required": ["kind", "velocity"],
                        "properties": {
                            "kind": { "enum": ["empty", "car"] },
                            "velocity": { "type": "integer", "minimum": -3, "maximum": 3 }
                        }
                    }
                }
            },
            "frogs": {
                "type": "array", "minItems": 1, "maxItems": 2,
                "items": {
                    "type": "object",
                    "additionalProperties": false,
                    "required": ["id", "row", "col", "status", "controller", "last_reward",
                                 "cumulative_reward", "pending"],
                    "properties": {
                        "id": { "enum": ["A", "B"] },
                        "row": { "type": "integer", "minimum": 0, "maximum": GRID - 1 },
                        "col": { "type": "integer", "minimum": 0, "maximum": GRID - 1 },
                        "status": { "enum": ["active", "finished", "dead"] },
                        "controller": { "enum": ["human", "agent"] },
                        "last_reward": { "type": "number" },
                        "cumulative_reward": { "type": "number" },
                        "pending": { "type": "boolean" }
                    }
                }
            },
            "outcome": { "enum": ["NONE", "SUCCESS", "COLLISION", "TIMEOUT"] },
            "done": { "type": "boolean" }
        }
    })
}
