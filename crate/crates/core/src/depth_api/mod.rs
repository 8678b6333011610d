//! Depth tool calls embedded in model text.
//!
//! A model asks for depth by writing `Depth(x, y)` for a pixel or
//! `Depth(x1, y1, x2, y2)` for an inclusive region. Each call is answered
//! from the session's depth map and fed back; a model output without calls
//! is the final answer.

mod server;
mod wire;

pub use server::{DepthServer, DepthStore, RunningServer, ServerConfig};
pub use wire::{read_frame, write_frame, Client, Request, Response, ResponseKind, MAX_FRAME_LEN};

use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::depth_codec::{DepthMap, MISSING_DEPTH};
use crate::object_depth::{self, BoundingBox, ObjectDepthError, ObjectMask};

pub const DEFAULT_MAX_TURNS: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CallTarget {
    Point { x: u32, y: u32 },
    Region { x1: u32, y1: u32, x2: u32, y2: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ToolCall {
    pub target: CallTarget,
    /// Byte range of the call in the source text.
    pub span: (usize, usize),
}

impl ToolCall {
    /// The call as written back in responses, e.g. `Depth(3,4)`.
    pub fn label(&self) -> String {
        match self.target {
            CallTarget::Point { x, y } => format!("Depth({x},{y})"),
            CallTarget::Region { x1, y1, x2, y2 } => format!("Depth({x1},{y1},{x2},{y2})"),
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, b: u8) -> bool {
        self.skip_ws();
        if self.bytes.get(self.pos) == Some(&b) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn int(&mut self) -> Option<u32> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return None;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

// Parses the argument list after "Depth(" starting at `pos`; returns the
// target and the index just past ')'.
fn parse_args(bytes: &[u8], pos: usize) -> Option<(CallTarget, usize)> {
    let mut c = Cursor { bytes, pos };
    let mut args = [0u32; 4];
    let mut n = 0;
    loop {
        if n == 4 {
            return None;
        }
        args[n] = c.int()?;
        n += 1;
        if c.eat(b')') {
            break;
        }
        if !c.eat(b',') {
            return None;
        }
    }
    let target = match n {
        2 => CallTarget::Point {
            x: args[0],
            y: args[1],
        },
        4 if args[0] <= args[2] && args[1] <= args[3] => CallTarget::Region {
            x1: args[0],
            y1: args[1],
            x2: args[2],
            y2: args[3],
        },
        _ => return None,
    };
    Some((target, c.pos))
}

/// Finds every well-formed call in textual order. Never fails: near misses
/// such as `Depth(a, b)`, three arguments or an inverted region are skipped.
pub fn parse_tool_calls(text: &str) -> Vec<ToolCall> {
    const OPEN: &str = "Depth(";
    let bytes = text.as_bytes();
    let mut calls = Vec::new();
    let mut from = 0;
    while let Some(off) = text[from..].find(OPEN) {
        let start = from + off;
        match parse_args(bytes, start + OPEN.len()) {
            Some((target, end)) => {
                calls.push(ToolCall {
                    target,
                    span: (start, end),
                });
                from = end;
            }
            None => from = start + 1,
        }
    }
    calls
}

/// Response text for one call. The formats are training targets and must
/// stay byte-stable:
///
/// * `Depth(x,y)=<d>mm`
/// * `Depth(x1,y1,x2,y2)=min <a>mm, max <b>mm, mean <c>mm, center <e>mm`
/// * `<call>=error:out_of_bounds` / `<call>=error:no_depth`
pub fn answer_call(call: &ToolCall, map: &DepthMap) -> String {
    let label = call.label();
    let value = match call.target {
        CallTarget::Point { x, y } => {
            match object_depth::depth_at_point(map, x as usize, y as usize) {
                Ok(MISSING_DEPTH) => Err(ObjectDepthError::NoValidDepth),
                Ok(d) => Ok(format!("{d}mm")),
                Err(e) => Err(e),
            }
        }
        CallTarget::Region { x1, y1, x2, y2 } => {
            let bbox = BoundingBox::new(x1 as usize, y1 as usize, x2 as usize, y2 as usize);
            ObjectMask::from_bbox(map.height(), map.width(), &bbox)
                .and_then(|mask| object_depth::describe_object(map, &mask))
                .map(|d| {
                    format!(
                        "min {}mm, max {}mm, mean {}mm, center {}mm",
                        d.min_mm, d.max_mm, d.mean_mm, d.center_mm
                    )
                })
        }
    };
    match value {
        Ok(v) => format!("{label}={v}"),
        Err(ObjectDepthError::NoValidDepth) => format!("{label}=error:no_depth"),
        Err(_) => format!("{label}=error:out_of_bounds"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DialogError {
    #[error("session {0} is closed")]
    SessionClosed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "from", content = "text", rename_all = "snake_case")]
pub enum Turn {
    Model(String),
    Api(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    /// Answers to every call in the model output, newline-joined.
    ToolResponse(String),
    /// The model output, unchanged; the session is now closed.
    Final(String),
}

/// One ask-answer loop over a single depth map.
#[derive(Debug, Clone)]
pub struct DialogState {
    session_id: String,
    map: Arc<DepthMap>,
    turns: u32,
    max_turns: u32,
    transcript: Vec<Turn>,
    closed: bool,
}

impl DialogState {
    pub fn new(session_id: impl Into<String>, map: Arc<DepthMap>, max_turns: u32) -> Self {
        Self {
            session_id: session_id.into(),
            map,
            turns: 0,
            max_turns,
            transcript: Vec::new(),
            closed: false,
        }
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn turns(&self) -> u32 {
        self.turns
    }

    pub fn max_turns(&self) -> u32 {
        self.max_turns
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn transcript(&self) -> &[Turn] {
        &self.transcript
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    /// Answers the calls in `model_output`, or finishes the session when
    /// there are none or the turn budget is spent.
    pub fn step(&mut self, model_output: &str) -> Result<StepOutcome, DialogError> {
        if self.closed {
            return Err(DialogError::SessionClosed(self.session_id.clone()));
        }
        self.transcript.push(Turn::Model(model_output.to_owned()));
        let calls = parse_tool_calls(model_output);
        if calls.is_empty() || self.turns >= self.max_turns {
            self.closed = true;
            return Ok(StepOutcome::Final(model_output.to_owned()));
        }
        let answers: Vec<String> = calls.iter().map(|c| answer_call(c, &self.map)).collect();
        let text = answers.join("\n");
        self.turns += 1;
        self.transcript.push(Turn::Api(text.clone()));
        Ok(StepOutcome::ToolResponse(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(x: u32, y: u32) -> CallTarget {
        CallTarget::Point { x, y }
    }

    fn targets(text: &str) -> Vec<CallTarget> {
        parse_tool_calls(text).into_iter().map(|c| c.target).collect()
    }

    #[test]
    fn parse_examples() {
        let calls = parse_tool_calls("I need Depth(12, 34) here");
        assert_eq!(calls.len(), 1);
        assert_eq!(calls[0].target, point(12, 34));
        assert_eq!(calls[0].span, (7, 20));
        assert!(targets("no calls here").is_empty());
        assert_eq!(
            targets("Depth(1,2) then Depth(3,4,5,6)"),
            vec![
                point(1, 2),
                CallTarget::Region {
                    x1: 3,
                    y1: 4,
                    x2: 5,
                    y2: 6
                }
            ]
        );
    }

    #[test]
    fn near_misses_are_ignored() {
        assert!(targets("Depth(a,b)").is_empty());
        assert!(targets("Depth(1,2,3)").is_empty());
        assert!(targets("Depth(1,2").is_empty());
        assert!(targets("depth(1,2)").is_empty());
        assert!(targets("Depth(-1,2)").is_empty());
        assert!(targets("Depth(1,2,3,4,5)").is_empty());
        assert!(targets("Depth(5,0,2,3)").is_empty());
        assert!(targets("Depth(99999999999,1)").is_empty());
        assert_eq!(targets("Depth(Depth(7,8))"), vec![point(7, 8)]);
        assert_eq!(targets(" Depth (1,2) Depth( 3 ,\n4 )"), vec![point(3, 4)]);
    }

    fn one(v: u32) -> DepthMap {
        DepthMap::new(1, 1, vec![v]).unwrap()
    }

    fn call(text: &str) -> ToolCall {
        parse_tool_calls(text)[0]
    }

    #[test]
    fn answers() {
        assert_eq!(answer_call(&call("Depth(0,0)"), &one(777)), "Depth(0,0)=777mm");
        assert_eq!(
            answer_call(&call("Depth(5, 5)"), &one(777)),
            "Depth(5,5)=error:out_of_bounds"
        );
        assert_eq!(answer_call(&call("Depth(0,0)"), &one(0)), "Depth(0,0)=error:no_depth");

        let field = DepthMap::filled(4, 4, 500).unwrap();
        assert_eq!(
            answer_call(&call("Depth(0, 1, 2, 3)"), &field),
            "Depth(0,1,2,3)=min 500mm, max 500mm, mean 500mm, center 500mm"
        );
        assert_eq!(
            answer_call(&call("Depth(0,0,4,1)"), &field),
            "Depth(0,0,4,1)=error:out_of_bounds"
        );
        let holes = DepthMap::new(2, 2, vec![0; 4]).unwrap();
        assert_eq!(
            answer_call(&call("Depth(0,0,1,1)"), &holes),
            "Depth(0,0,1,1)=error:no_depth"
        );
    }

    #[test]
    fn dialog_state_machine() {
        let map = Arc::new(one(777));
        let mut s = DialogState::new("s1", map.clone(), 2);
        assert_eq!(
            s.step("Depth(0,0)").unwrap(),
            StepOutcome::ToolResponse("Depth(0,0)=777mm".into())
        );
        assert_eq!(s.turns(), 1);
        assert_eq!(
            s.step("Depth(0,0) and Depth(1,0)").unwrap(),
            StepOutcome::ToolResponse("Depth(0,0)=777mm\nDepth(1,0)=error:out_of_bounds".into())
        );
        assert_eq!(s.turns(), 2);
        // Budget exhausted: forced to finish.
        assert_eq!(
            s.step("Depth(0,0)").unwrap(),
            StepOutcome::Final("Depth(0,0)".into())
        );
        assert!(s.is_closed());
        assert_eq!(s.step("x"), Err(DialogError::SessionClosed("s1".into())));
        assert_eq!(s.transcript().len(), 5);

        let mut t = DialogState::new("s2", map, 4);
        assert_eq!(
            t.step("It is 0.8m away.").unwrap(),
            StepOutcome::Final("It is 0.8m away.".into())
        );
        assert_eq!(t.turns(), 0);
    }

    #[test]
    fn zero_turn_budget_finishes_immediately() {
        let mut s = DialogState::new("s", Arc::new(one(1)), 0);
        assert!(matches!(s.step("Depth(0,0)").unwrap(), StepOutcome::Final(_)));
    }
}
