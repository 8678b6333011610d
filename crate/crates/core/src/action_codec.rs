//! 7-DoF delta-pose actions: continuous units, the 101-point grid and the
//! `<v1, ..., v7>` text models read and write.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DIMS: usize = 7;
/// Grid steps per unit; values are `k / 100` for `k` in `0..=100`.
pub const STEPS: u8 = 100;

const LATTICE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActionError {
    #[error("calibration for {dim}: lo {lo} must be below hi {hi}")]
    BadCalibration { dim: &'static str, lo: f64, hi: f64 },
    #[error("value {value} at position {position} is not on the 0.01 grid in [0, 1]")]
    OffLattice { position: usize, value: f64 },
    #[error("no <...> action group found")]
    NoGroup,
    #[error("found {0} <...> groups, expected exactly one")]
    MultipleGroups(usize),
    #[error("expected {DIMS} values, found {0}")]
    Arity(usize),
    #[error("token {token:?} at position {position} is not a decimal number")]
    NotNumeric { position: usize, token: String },
}

pub const DIM_NAMES: [&str; DIMS] = ["dx", "dy", "dz", "droll", "dpitch", "dyaw", "gripper"];

/// Per-frame end-effector delta plus gripper closure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionVector {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub droll: f64,
    pub dpitch: f64,
    pub dyaw: f64,
    pub gripper: f64,
}

impl ActionVector {
    pub fn to_array(&self) -> [f64; DIMS] {
        [
            self.dx,
            self.dy,
            self.dz,
            self.droll,
            self.dpitch,
            self.dyaw,
            self.gripper,
        ]
    }

    pub fn from_array(a: [f64; DIMS]) -> Self {
        Self {
            dx: a[0],
            dy: a[1],
            dz: a[2],
            droll: a[3],
            dpitch: a[4],
            dyaw: a[5],
            gripper: a[6],
        }
    }
}

/// Physical `[lo, hi]` bounds of the six delta components. The gripper is
/// always `[0, 1]`.
///
/// File form: `{"dx": [lo, hi], "dy": ..., "dyaw": [lo, hi]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRanges {
    pub dx: [f64; 2],
    pub dy: [f64; 2],
    pub dz: [f64; 2],
    pub droll: [f64; 2],
    pub dpitch: [f64; 2],
    pub dyaw: [f64; 2],
}

impl Default for CalibrationRanges {
    /// Placeholder tabletop ranges: ±5 cm translation and ±0.2 rad rotation
    /// per frame. Real robots should ship their own file.
    fn default() -> Self {
        const T: [f64; 2] = [-0.05, 0.05];
        const R: [f64; 2] = [-0.2, 0.2];
        Self {
            dx: T,
            dy: T,
            dz: T,
            droll: R,
            dpitch: R,
            dyaw: R,
        }
    }
}

impl CalibrationRanges {
    pub fn validate(&self) -> Result<(), ActionError> {
        for (i, [lo, hi]) in self.ranges().into_iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(ActionError::BadCalibration {
                    dim: DIM_NAMES[i],
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }

    /// All seven ranges, gripper last.
    pub fn ranges(&self) -> [[f64; 2]; DIMS] {
        [
            self.dx,
            self.dy,
            self.dz,
            self.droll,
            self.dpitch,
            self.dyaw,
            [0.0, 1.0],
        ]
    }
}

/// Seven grid indices `k` with value `k / 100`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionGrid([u8; DIMS]);

impl ActionGrid {
    pub fn from_steps(steps: [u8; DIMS]) -> Result<Self, ActionError> {
        match steps.iter().position(|&k| k > STEPS) {
            Some(i) => Err(ActionError::OffLattice {
                position: i + 1,
                value: f64::from(steps[i]) / 100.0,
            }),
            None => Ok(Self(steps)),
        }
    }

    /// Snaps each value to the lattice if it lies within 1e-9 of a point.
    pub fn from_values(values: [f64; DIMS]) -> Result<Self, ActionError> {
        let mut steps = [0u8; DIMS];
        for (i, &v) in values.iter().enumerate() {
            steps[i] = snap(v).ok_or(ActionError::OffLattice {
                position: i + 1,
                value: v,
            })?;
        }
        Ok(Self(steps))
    }

    pub fn steps(&self) -> [u8; DIMS] {
        self.0
    }

    pub fn values(&self) -> [f64; DIMS] {
        self.0.map(|k| f64::from(k) / 100.0)
    }
}

fn snap(v: f64) -> Option<u8> {
    if !v.is_finite() {
        return None;
    }
    let k = (v * 100.0).round();
    if !(0.0..=100.0).contains(&k) || (v - k / 100.0).abs() > LATTICE_TOLERANCE {
        return None;
    }
    Some(k as u8)
}

/// Grid index for a fraction in `[0, 1]`, rounding halves up.
fn to_step(t: f64) -> u8 {
    // The epsilon absorbs representation error such as 0.625 * 100 = 62.4999...
    (t * 100.0 + 0.5 + 1e-9).floor().clamp(0.0, 100.0) as u8
}

/// Result of [`quantize`]: the grid and which dimensions were clamped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quantized {
    pub grid: ActionGrid,
    pub clamped: [bool; DIMS],
}

impl Quantized {
    pub fn any_clamped(&self) -> bool {
        self.clamped.iter().any(|&c| c)
    }
}

pub fn quantize(action: &ActionVector, cal: &CalibrationRanges) -> Result<Quantized, ActionError> {
    cal.validate()?;
    let mut steps = [0u8; DIMS];
    let mut clamped = [false; DIMS];
    for (i, (v, [lo, hi])) in action.to_array().into_iter().zip(cal.ranges()).enumerate() {
        let t = if v.is_nan() { 0.0 } else { (v - lo) / (hi - lo) };
        clamped[i] = v.is_nan() || !(0.0..=1.0).contains(&t);
        steps[i] = to_step(t.clamp(0.0, 1.0));
    }
    Ok(Quantized {
        grid: ActionGrid(steps),
        clamped,
    })
}

pub fn dequantize(grid: &ActionGrid, cal: &CalibrationRanges) -> Result<ActionVector, ActionError> {
    cal.validate()?;
    let mut out = [0.0; DIMS];
    for (i, (g, [lo, hi])) in grid.values().into_iter().zip(cal.ranges()).enumerate() {
        out[i] = lo + g * (hi - lo);
    }
    Ok(ActionVector::from_array(out))
}

fn render(k: u8) -> String {
    match k {
        0 => "0".to_owned(),
        STEPS => "1".to_owned(),
        k => format!("0.{k:02}"),
    }
}

/// `<0.17, 0.51, 0.44, 0.62, 0.83, 0.07, 1>`
pub fn format_action_text(grid: &ActionGrid) -> String {
    let parts: Vec<String> = grid.0.iter().map(|&k| render(k)).collect();
    format!("<{}>", parts.join(", "))
}

impl fmt::Display for ActionGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_action_text(self))
    }
}

/// Extracts the single `<...>` group from model text and parses it.
pub fn parse_action_text(text: &str) -> Result<ActionGrid, ActionError> {
    let mut groups = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('<') {
        let after = &rest[open + 1..];
        match after.find('>') {
            Some(close) => {
                // A nested '<' restarts the group at the innermost opener.
                let inner = &after[..close];
                let inner = inner.rsplit('<').next().unwrap_or(inner);
                groups.push(inner);
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    let body = match groups.as_slice() {
        [] => return Err(ActionError::NoGroup),
        [one] => *one,
        many => return Err(ActionError::MultipleGroups(many.len())),
    };
    let tokens: Vec<&str> = body.split(',').map(str::trim).collect();
    if tokens.len() != DIMS {
        return Err(ActionError::Arity(tokens.len()));
    }
    let mut values = [0.0; DIMS];
    for (i, tok) in tokens.iter().enumerate() {
        values[i] = parse_decimal(tok).ok_or_else(|| ActionError::NotNumeric {
            position: i + 1,
            token: (*tok).to_owned(),
        })?;
    }
    ActionGrid::from_values(values)
}

// Plain decimals only: digits with at most one '.', no sign or exponent.
fn parse_decimal(tok: &str) -> Option<f64> {
    let ok = !tok.is_empty()
        && tok.bytes().any(|b| b.is_ascii_digit())
        && tok.bytes().all(|b| b.is_ascii_digit() || b == b'.')
        && tok.bytes().filter(|&b| b == b'.').count() <= 1;
    if ok {
        tok.parse().ok()
    } else {
        None
    }
}

impl FromStr for ActionGrid {
    type Err = ActionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_action_text(s)
    }
}
