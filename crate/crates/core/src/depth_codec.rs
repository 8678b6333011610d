//! Lossless metric depth storage.
//!
//! Depth is carried as integer millimeters in `0..=131071` (17 bits). Two
//! persisted forms exist:
//!
//! * a logical `uint24` value, which is the millimeter count itself, and
//! * a three-channel `uint8` pixel whose channels hold 7, 5 and 5 bits with
//!   units of 2^10, 2^5 and 2^0 millimeters, each shifted into the high bits
//!   of its byte (`c0 = q0 << 1`, `c1 = q1 << 3`, `c2 = q2 << 3`).
//!
//! A stored value of `0` means "no depth". Inputs above the representable
//! range are clamped and reported as saturated rather than wrapped.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, Execution};

/// Largest representable depth, 131.071 m.
pub const MAX_DEPTH_MM: u32 = (1 << 17) - 1;

/// Sentinel stored for pixels without a depth reading.
pub const MISSING_DEPTH: u32 = 0;

const COARSE_UNIT: u32 = 1 << 10;
const MID_UNIT: u32 = 1 << 5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("negative depth {0} mm")]
    NegativeDepth(i64),
    #[error("depth is not a finite number")]
    NonFinite,
    #[error("channel {channel} value {value} is not a valid encoding ({reason})")]
    InvalidChannel {
        channel: usize,
        value: u8,
        reason: &'static str,
    },
    #[error("pixel ({x}, {y}): {source}")]
    AtPixel {
        x: usize,
        y: usize,
        #[source]
        source: Box<CodecError>,
    },
    #[error("invalid dimensions {height}x{width}")]
    BadDimensions { height: usize, width: usize },
    #[error("expected {expected} pixels, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("depth {value} mm at pixel ({x}, {y}) exceeds {MAX_DEPTH_MM} mm")]
    OutOfRange { x: usize, y: usize, value: u32 },
    #[error("relative depth {0} is outside [0, 1]")]
    RelativeOutOfRange(f64),
    #[error("invalid relative depth range: d_min={d_min}, d_max={d_max}")]
    InvalidRange { d_min: f64, d_max: f64 },
}

impl CodecError {
    fn at(self, x: usize, y: usize) -> Self {
        CodecError::AtPixel {
            x,
            y,
            source: Box::new(self),
        }
    }
}

/// An encoded value plus whether the input had to be clamped to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encoded<T> {
    pub value: T,
    pub saturated: bool,
}

fn clamp_mm(depth_mm: i64) -> Result<(u32, bool), CodecError> {
    if depth_mm < 0 {
        return Err(CodecError::NegativeDepth(depth_mm));
    }
    if depth_mm > MAX_DEPTH_MM as i64 {
        Ok((MAX_DEPTH_MM, true))
    } else {
        Ok((depth_mm as u32, false))
    }
}

/// Rounds a real-valued millimeter reading to the nearest integer, ties away
/// from zero.
pub fn round_mm(depth_mm: f64) -> Result<i64, CodecError> {
    if !depth_mm.is_finite() {
        return Err(CodecError::NonFinite);
    }
    let rounded = depth_mm.round();
    if rounded < 0.0 {
        return Err(CodecError::NegativeDepth(rounded as i64));
    }
    // Anything past i64 range is saturated downstream anyway.
    Ok(rounded.min(i64::MAX as f64) as i64)
}

/// Splits a depth into its three channel bytes.
pub fn encode_three_channel(depth_mm: i64) -> Result<Encoded<[u8; 3]>, CodecError> {
    let (d, saturated) = clamp_mm(depth_mm)?;
    Ok(Encoded {
        value: pack(d),
        saturated,
    })
}

#[inline]
fn pack(d: u32) -> [u8; 3] {
    let c0 = (d / COARSE_UNIT) * 2;
    let c1 = ((d / MID_UNIT) % 32) * 8;
    let c2 = (d % MID_UNIT) * 8;
    [c0 as u8, c1 as u8, c2 as u8]
}

fn check_channels(px: [u8; 3]) -> Result<(), CodecError> {
    let [c0, c1, c2] = px;
    if c0 % 2 != 0 {
        return Err(CodecError::InvalidChannel {
            channel: 0,
            value: c0,
            reason: "c0 must be even",
        });
    }
    for (channel, value) in [(1, c1), (2, c2)] {
        if value % 8 != 0 {
            return Err(CodecError::InvalidChannel {
                channel,
                value,
                reason: "must be a multiple of 8",
            });
        }
    }
    Ok(())
}

/// Inverse of [`encode_three_channel`].
pub fn decode_three_channel(px: [u8; 3]) -> Result<u32, CodecError> {
    check_channels(px)?;
    Ok(unpack(px))
}

#[inline]
fn unpack(px: [u8; 3]) -> u32 {
    let [c0, c1, c2] = px.map(u32::from);
    (c0 / 2) * COARSE_UNIT + (c1 / 8) * MID_UNIT + c2 / 8
}

/// The single-channel form stores millimeters directly.
pub fn encode_u24(depth_mm: i64) -> Result<Encoded<u32>, CodecError> {
    let (value, saturated) = clamp_mm(depth_mm)?;
    Ok(Encoded { value, saturated })
}

/// Dense per-pixel metric depth in millimeters, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<u32>,
}

fn check_dims(height: usize, width: usize, len: usize) -> Result<(), CodecError> {
    if height == 0 || width == 0 {
        return Err(CodecError::BadDimensions { height, width });
    }
    let expected = height
        .checked_mul(width)
        .ok_or(CodecError::BadDimensions { height, width })?;
    if expected != len {
        return Err(CodecError::LengthMismatch {
            expected,
            actual: len,
        });
    }
    Ok(())
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<u32>) -> Result<Self, CodecError> {
        check_dims(height, width, values.len())?;
        if let Some(i) = values.iter().position(|&v| v > MAX_DEPTH_MM) {
            return Err(CodecError::OutOfRange {
                x: i % width,
                y: i / width,
                value: values[i],
            });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Builds a map from real-valued millimeters (e.g. a metric depth
    /// estimator's output). Returns the map and the number of clamped pixels.
    pub fn from_metric_mm(
        height: usize,
        width: usize,
        values: &[f64],
    ) -> Result<(Self, usize), CodecError> {
        check_dims(height, width, values.len())?;
        let mut saturated = 0;
        let mut out = Vec::with_capacity(values.len());
        for (i, &v) in values.iter().enumerate() {
            let enc = round_mm(v)
                .and_then(encode_u24)
                .map_err(|e| e.at(i % width, i / width))?;
            saturated += usize::from(enc.saturated);
            out.push(enc.value);
        }
        Ok((
            Self {
                height,
                width,
                values: out,
            },
            saturated,
        ))
    }

    pub fn filled(height: usize, width: usize, depth_mm: u32) -> Result<Self, CodecError> {
        Self::new(height, width, vec![depth_mm; height.saturating_mul(width)])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    /// Raw stored value at column `x`, row `y`.
    pub fn get(&self, x: usize, y: usize) -> Option<u32> {
        (x < self.width && y < self.height).then(|| self.values[y * self.width + x])
    }
}

/// Three-channel 8-bit image holding an encoded [`DepthMap`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedDepthImage {
    height: usize,
    width: usize,
    pixels: Vec<[u8; 3]>,
}

impl EncodedDepthImage {
    /// Wraps raw pixels without checking channel structure; see
    /// [`validate_encoded`].
    pub fn new(height: usize, width: usize, pixels: Vec<[u8; 3]>) -> Result<Self, CodecError> {
        check_dims(height, width, pixels.len())?;
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    pub fn to_rgb_bytes(&self) -> Vec<u8> {
        self.pixels.iter().flatten().copied().collect()
    }
}

pub fn encode_map(map: &DepthMap) -> EncodedDepthImage {
    encode_map_with(map, Execution::default())
}

/// Pixelwise encoding. `DepthMap` values are already in range, so this
/// cannot fail or saturate.
pub fn encode_map_with(map: &DepthMap, exec: Execution) -> EncodedDepthImage {
    let pixels = par::map_slice(exec, &map.values, |&d| pack(d));
    EncodedDepthImage {
        height: map.height,
        width: map.width,
        pixels,
    }
}

pub fn decode_map(img: &EncodedDepthImage) -> Result<DepthMap, CodecError> {
    decode_map_with(img, Execution::default())
}

pub fn decode_map_with(img: &EncodedDepthImage, exec: Execution) -> Result<DepthMap, CodecError> {
    let width = img.width;
    // Validate with a bit test up front so the unpack loop is infallible.
    if let Some(i) = img.pixels.iter().position(|px| (px[0] & 1) | (px[1] & 7) | (px[2] & 7) != 0) {
        let err = decode_three_channel(img.pixels[i]).expect_err("invalid pixel");
        return Err(err.at(i % width, i / width));
    }
    let values = par::map_slice(exec, &img.pixels, |&px| unpack(px));
    Ok(DepthMap {
        height: img.height,
        width,
        values,
    })
}

/// One pixel failing the channel structure.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChannelViolation {
    pub x: usize,
    pub y: usize,
    pub channel: usize,
    pub value: u8,
    pub reason: &'static str,
}

/// Lists every channel violation in row-major order. An empty report means
/// the image decodes.
pub fn validate_encoded(img: &EncodedDepthImage) -> Vec<ChannelViolation> {
    let mut report = Vec::new();
    for (i, px) in img.pixels.iter().enumerate() {
        let (x, y) = (i % img.width, i / img.width);
        if px[0] % 2 != 0 {
            report.push(ChannelViolation {
                x,
                y,
                channel: 0,
                value: px[0],
                reason: "c0 must be even",
            });
        }
        for (c, &v) in px.iter().enumerate().skip(1) {
            if v % 8 != 0 {
                report.push(ChannelViolation {
                    x,
                    y,
                    channel: c,
                    value: v,
                    reason: "must be a multiple of 8",
                });
            }
        }
    }
    report
}

/// Scene depth range used to turn normalized inverse depth into metric depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeDepthParams {
    d_min: f64,
    d_max: f64,
}

impl RelativeDepthParams {
    pub fn new(d_min: f64, d_max: f64) -> Result<Self, CodecError> {
        if !(d_min.is_finite() && d_max.is_finite() && d_min > 0.0 && d_max > d_min) {
            return Err(CodecError::InvalidRange { d_min, d_max });
        }
        Ok(Self { d_min, d_max })
    }

    pub fn d_min(&self) -> f64 {
        self.d_min
    }

    pub fn d_max(&self) -> f64 {
        self.d_max
    }
}

/// Maps relative inverse depth `d_r` (1 = nearest, 0 = farthest) to metric
/// depth in the units of `params`.
///
/// `d = 1 / (A * d_r + B)` with `A = 1/d_min - 1/d_max` and `B = 1/d_max`.
/// Taking `1/d_r` directly is wrong: it does not preserve ratios between
/// depths unless `d_max` is infinite.
pub fn relative_to_metric(d_r: f64, params: RelativeDepthParams) -> Result<f64, CodecError> {
    if !(0.0..=1.0).contains(&d_r) {
        return Err(CodecError::RelativeOutOfRange(d_r));
    }
    let a = 1.0 / params.d_min - 1.0 / params.d_max;
    let b = 1.0 / params.d_max;
    Ok((1.0 / (a * d_r + b)).clamp(params.d_min, params.d_max))
}

/// Converts a whole relative depth map into a [`DepthMap`], rounding to
/// millimeters. Returns the map and the number of saturated pixels.
pub fn relative_map_to_metric(
    height: usize,
    width: usize,
    relative: &[f64],
    params: RelativeDepthParams,
) -> Result<(DepthMap, usize), CodecError> {
    check_dims(height, width, relative.len())?;
    let metric = relative
        .iter()
        .enumerate()
        .map(|(i, &r)| relative_to_metric(r, params).map_err(|e| e.at(i % width, i / width)))
        .collect::<Result<Vec<_>, _>>()?;
    DepthMap::from_metric_mm(height, width, &metric)
}
