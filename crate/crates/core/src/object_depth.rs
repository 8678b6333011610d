//! Object depth description: 5th/95th percentile, mean and center depth over
//! a mask, with a bounding-box-center fallback when no reliable mask exists.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth_codec::{DepthMap, MISSING_DEPTH};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObjectDepthError {
    #[error("point ({x}, {y}) is outside the {width}x{height} map")]
    OutOfBounds {
        x: usize,
        y: usize,
        width: usize,
        height: usize,
    },
    #[error("mask is empty")]
    EmptyMask,
    #[error("no member pixel has a valid depth")]
    NoValidDepth,
    #[error("mask is {mask_height}x{mask_width} but the depth map is {height}x{width}")]
    DimensionMismatch {
        mask_height: usize,
        mask_width: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid bounding box [{x_min}, {y_min}, {x_max}, {y_max}] for a {width}x{height} image")]
    InvalidBox {
        x_min: usize,
        y_min: usize,
        x_max: usize,
        y_max: usize,
        width: usize,
        height: usize,
    },
}

/// Inclusive pixel box; `x` is the column, `y` the row.
///
/// Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl From<[usize; 4]> for BoundingBox {
    fn from([x_min, y_min, x_max, y_max]: [usize; 4]) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }
}

impl From<BoundingBox> for [usize; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<(), ObjectDepthError> {
        if self.x_min <= self.x_max
            && self.y_min <= self.y_max
            && self.x_max < width
            && self.y_max < height
        {
            Ok(())
        } else {
            Err(ObjectDepthError::InvalidBox {
                x_min: self.x_min,
                y_min: self.y_min,
                x_max: self.x_max,
                y_max: self.y_max,
                width,
                height,
            })
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    /// Floor of the midpoint on each axis.
    pub fn center(&self) -> (usize, usize) {
        ((self.x_min + self.x_max) / 2, (self.y_min + self.y_max) / 2)
    }
}

/// Per-pixel membership, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectMask {
    height: usize,
    width: usize,
    members: Vec<bool>,
}

impl ObjectMask {
    pub fn new(height: usize, width: usize, members: Vec<bool>) -> Result<Self, ObjectDepthError> {
        if members.len() != height * width || height == 0 || width == 0 {
            return Err(ObjectDepthError::DimensionMismatch {
                mask_height: height,
                mask_width: width,
                height: members.len() / width.max(1),
                width,
            });
        }
        Ok(Self {
            height,
            width,
            members,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            members: vec![true; height * width],
        }
    }

    /// Mask selecting exactly the pixels of `bbox`.
    pub fn from_bbox(height: usize, width: usize, bbox: &BoundingBox) -> Result<Self, ObjectDepthError> {
        bbox.validate(width, height)?;
        let members = (0..height * width)
            .map(|i| bbox.contains(i % width, i / width))
            .collect();
        Ok(Self {
            height,
            width,
            members,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height && self.members[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    /// Member pixels as `(x, y)` in row-major order.
    pub fn iter_members(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.members
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(move |(i, _)| (i % w, i / w))
    }

    fn check_matches(&self, map: &DepthMap) -> Result<(), ObjectDepthError> {
        if self.height != map.height() || self.width != map.width() {
            return Err(ObjectDepthError::DimensionMismatch {
                mask_height: self.height,
                mask_width: self.width,
                height: map.height(),
                width: map.width(),
            });
        }
        Ok(())
    }
}

/// Intersects a mask with a box so segmentation output never leaks past the
/// annotated box.
pub fn clamp_mask_to_bbox(mask: &ObjectMask, bbox: &BoundingBox) -> Result<ObjectMask, ObjectDepthError> {
    bbox.validate(mask.width, mask.height)?;
    let w = mask.width;
    let members: Vec<bool> = mask
        .members
        .iter()
        .enumerate()
        .map(|(i, &m)| m && bbox.contains(i % w, i / w))
        .collect();
    if !members.iter().any(|&m| m) {
        return Err(ObjectDepthError::EmptyMask);
    }
    Ok(ObjectMask {
        height: mask.height,
        width: w,
        members,
    })
}

/// Four-value depth summary of an object, integer millimeters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthDescriptor {
    /// 5th percentile.
    pub min_mm: u32,
    /// 95th percentile.
    pub max_mm: u32,
    pub mean_mm: u32,
    pub center_mm: u32,
}

/// 1-indexed nearest rank `ceil(p/100 * n)`, at least 1.
pub fn nearest_rank(p: u32, n: usize) -> usize {
    let r = (p as usize * n).div_ceil(100);
    r.clamp(1, n)
}

pub fn describe_object(map: &DepthMap, mask: &ObjectMask) -> Result<DepthDescriptor, ObjectDepthError> {
    mask.check_matches(map)?;
    if mask.count() == 0 {
        return Err(ObjectDepthError::EmptyMask);
    }
    let samples: Vec<(usize, usize, u32)> = mask
        .iter_members()
        .filter_map(|(x, y)| {
            let d = map.values()[y * map.width() + x];
            (d != MISSING_DEPTH).then_some((x, y, d))
        })
        .collect();
    describe_samples(&samples).ok_or(ObjectDepthError::NoValidDepth)
}

/// Descriptor over `(x, y, depth)` samples with nonzero depth. `None` when
/// there are no samples.
pub(crate) fn describe_samples(samples: &[(usize, usize, u32)]) -> Option<DepthDescriptor> {
    let n = samples.len();
    if n == 0 {
        return None;
    }
    let mut depths: Vec<u32> = samples.iter().map(|s| s.2).collect();
    depths.sort_unstable();
    let min_mm = depths[nearest_rank(5, n) - 1];
    let max_mm = depths[nearest_rank(95, n) - 1];

    let sum: u64 = depths.iter().map(|&d| u64::from(d)).sum();
    let n64 = n as u64;
    let mean_mm = ((2 * sum + n64) / (2 * n64)) as u32;

    // Squared distance to the centroid scaled by n^2 keeps this in integers.
    let (sx, sy) = samples.iter().fold((0i128, 0i128), |(sx, sy), &(x, y, _)| {
        (sx + x as i128, sy + y as i128)
    });
    let n128 = n as i128;
    let dist = |&(x, y, _): &(usize, usize, u32)| {
        let dx = x as i128 * n128 - sx;
        let dy = y as i128 * n128 - sy;
        dx * dx + dy * dy
    };
    // Samples arrive row-major; keep the first on ties.
    let center = samples
        .iter()
        .min_by(|a, b| {
            dist(a)
                .cmp(&dist(b))
                .then_with(|| (a.1, a.0).cmp(&(b.1, b.0)))
        })
        .expect("non-empty");

    Some(DepthDescriptor {
        min_mm,
        max_mm,
        mean_mm,
        center_mm: center.2,
    })
}

/// Raw stored value; `0` ([`MISSING_DEPTH`]) signals no reading.
pub fn depth_at_point(map: &DepthMap, x: usize, y: usize) -> Result<u32, ObjectDepthError> {
    map.get(x, y).ok_or(ObjectDepthError::OutOfBounds {
        x,
        y,
        width: map.width(),
        height: map.height(),
    })
}

/// Depth at the floor-midpoint of the box.
pub fn describe_bbox_center(map: &DepthMap, bbox: &BoundingBox) -> Result<u32, ObjectDepthError> {
    bbox.validate(map.width(), map.height())?;
    let (x, y) = bbox.center();
    match depth_at_point(map, x, y)? {
        MISSING_DEPTH => Err(ObjectDepthError::NoValidDepth),
        d => Ok(d),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proximity {
    Closer,
    Further,
    Tie,
}

impl Proximity {
    pub fn flip(self) -> Self {
        match self {
            Proximity::Closer => Proximity::Further,
            Proximity::Further => Proximity::Closer,
            Proximity::Tie => Proximity::Tie,
        }
    }
}

/// Something whose depth can be compared: a point reading or an object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthOperand {
    Point(u32),
    Object(DepthDescriptor),
}

impl DepthOperand {
    /// Objects resolve to their center depth.
    pub fn resolve(&self) -> u32 {
        match self {
            DepthOperand::Point(d) => *d,
            DepthOperand::Object(desc) => desc.center_mm,
        }
    }
}

impl From<u32> for DepthOperand {
    fn from(d: u32) -> Self {
        DepthOperand::Point(d)
    }
}

impl From<DepthDescriptor> for DepthOperand {
    fn from(d: DepthDescriptor) -> Self {
        DepthOperand::Object(d)
    }
}

/// Is `a` closer to the camera than `b`? Differences up to `tie_threshold_mm`
/// count as a tie.
pub fn compare_proximity(
    a: impl Into<DepthOperand>,
    b: impl Into<DepthOperand>,
    tie_threshold_mm: u32,
) -> Result<Proximity, ObjectDepthError> {
    let (a, b) = (a.into().resolve(), b.into().resolve());
    if a == MISSING_DEPTH || b == MISSING_DEPTH {
        return Err(ObjectDepthError::NoValidDepth);
    }
    Ok(if a.abs_diff(b) <= tie_threshold_mm {
        Proximity::Tie
    } else if a < b {
        Proximity::Closer
    } else {
        Proximity::Further
    })
}
