//! Closed-form voxel shapes used to bootstrap segmentation data.
//!
//! Solid shapes (cube, rectanguloid, sphere) are placed around their center.
//! Shapes that stand on the ground (pyramid, dome, arch and the flat shapes)
//! use `center.y` as their bottom layer. Flat shapes are one voxel thick and
//! stand upright in the xy plane at `center.z`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{BlockId, Dims, Pos};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Cube,
    Rectanguloid,
    Sphere,
    Pyramid,
    Square,
    Rectangle,
    Circle,
    Triangle,
    Dome,
    Arch,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 10] = [
        ShapeKind::Cube,
        ShapeKind::Rectanguloid,
        ShapeKind::Sphere,
        ShapeKind::Pyramid,
        ShapeKind::Square,
        ShapeKind::Rectangle,
        ShapeKind::Circle,
        ShapeKind::Triangle,
        ShapeKind::Dome,
        ShapeKind::Arch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Cube => "cube",
            ShapeKind::Rectanguloid => "rectanguloid",
            ShapeKind::Sphere => "sphere",
            ShapeKind::Pyramid => "pyramid",
            ShapeKind::Square => "square",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Dome => "dome",
            ShapeKind::Arch => "arch",
        }
    }

    pub fn from_name(name: &str) -> Option<ShapeKind> {
        ShapeKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Size parameters per kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Cube { side: u32 },
    Rectanguloid { width: u32, height: u32, length: u32 },
    /// Radius 0 is the single center voxel.
    Sphere { radius: u32 },
    Pyramid { height: u32 },
    Square { side: u32 },
    Rectangle { width: u32, height: u32 },
    Circle { radius: u32 },
    Triangle { height: u32 },
    Dome { radius: u32 },
    /// Two legs `half_span` away from the center, `half_span + 1` tall,
    /// joined by a lintel row on top.
    Arch { half_span: u32 },
}

impl Shape {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Cube { .. } => ShapeKind::Cube,
            Shape::Rectanguloid { .. } => ShapeKind::Rectanguloid,
            Shape::Sphere { .. } => ShapeKind::Sphere,
            Shape::Pyramid { .. } => ShapeKind::Pyramid,
            Shape::Square { .. } => ShapeKind::Square,
            Shape::Rectangle { .. } => ShapeKind::Rectangle,
            Shape::Circle { .. } => ShapeKind::Circle,
            Shape::Triangle { .. } => ShapeKind::Triangle,
            Shape::Dome { .. } => ShapeKind::Dome,
            Shape::Arch { .. } => ShapeKind::Arch,
        }
    }

    fn sizes_valid(&self) -> bool {
        match *self {
            Shape::Sphere { .. } => true,
            Shape::Cube { side: a } | Shape::Square { side: a } => a >= 1,
            Shape::Rectanguloid { width, height, length } => width >= 1 && height >= 1 && length >= 1,
            Shape::Rectangle { width, height } => width >= 1 && height >= 1,
            Shape::Pyramid { height: a }
            | Shape::Triangle { height: a }
            | Shape::Circle { radius: a }
            | Shape::Dome { radius: a }
            | Shape::Arch { half_span: a } => a >= 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub shape: Shape,
    pub center: Pos,
    pub material: BlockId,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ShapeError {
    #[error("{0:?} does not fit the grid")]
    DoesNotFit(ShapeSpec),
    #[error("invalid size parameters {0:?}")]
    BadSize(Shape),
}

fn span(center: i32, extent: u32) -> std::ops::Range<i32> {
    let lo = center - extent as i32 / 2;
    lo..lo + extent as i32
}

fn sym(center: i32, half: u32) -> std::ops::RangeInclusive<i32> {
    center - half as i32..=center + half as i32
}

/// Voxels of the shape, sorted by position.
pub fn shape_voxels(shape: &Shape, c: Pos) -> Vec<Pos> {
    let mut out = Vec::new();
    match *shape {
        Shape::Cube { side } => {
            for x in span(c.x, side) {
                for y in span(c.y, side) {
                    for z in span(c.z, side) {
                        out.push(Pos::new(x, y, z));
                    }
                }
            }
        }
        Shape::Rectanguloid { width, height, length } => {
            for x in span(c.x, width) {
                for y in span(c.y, height) {
                    for z in span(c.z, length) {
                        out.push(Pos::new(x, y, z));
                    }
                }
            }
        }
        Shape::Sphere { radius } => {
            let r2 = (radius * radius) as i32;
            for x in sym(c.x, radius) {
                for y in sym(c.y, radius) {
                    for z in sym(c.z, radius) {
                        let (dx, dy, dz) = (x - c.x, y - c.y, z - c.z);
                        if dx * dx + dy * dy + dz * dz <= r2 {
                            out.push(Pos::new(x, y, z));
                        }
                    }
                }
            }
        }
        Shape::Pyramid { height } => {
            for k in 0..height {
                let half = height - 1 - k;
                for x in sym(c.x, half) {
                    for z in sym(c.z, half) {
                        out.push(Pos::new(x, c.y + k as i32, z));
                    }
                }
            }
        }
        Shape::Square { side } => {
            for x in span(c.x, side) {
                for y in c.y..c.y + side as i32 {
                    out.push(Pos::new(x, y, c.z));
                }
            }
        }
        Shape::Rectangle { width, height } => {
            for x in span(c.x, width) {
                for y in c.y..c.y + height as i32 {
                    out.push(Pos::new(x, y, c.z));
                }
            }
        }
        Shape::Circle { radius } => {
            let r2 = (radius * radius) as i32;
            let cy = c.y + radius as i32;
            for x in sym(c.x, radius) {
                for y in sym(cy, radius) {
                    let (dx, dy) = (x - c.x, y - cy);
                    if dx * dx + dy * dy <= r2 {
                        out.push(Pos::new(x, y, c.z));
                    }
                }
            }
        }
        Shape::Triangle { height } => {
            for k in 0..height {
                for x in sym(c.x, height - 1 - k) {
                    out.push(Pos::new(x, c.y + k as i32, c.z));
                }
            }
        }
        Shape::Dome { radius } => {
            let r2 = (radius * radius) as i32;
            for x in sym(c.x, radius) {
                for y in c.y..=c.y + radius as i32 {
                    for z in sym(c.z, radius) {
                        let (dx, dy, dz) = (x - c.x, y - c.y, z - c.z);
                        if dx * dx + dy * dy + dz * dz <= r2 {
                            out.push(Pos::new(x, y, z));
                        }
                    }
                }
            }
        }
        Shape::Arch { half_span } => {
            let s = half_span as i32;
            for y in c.y..=c.y + s {
                out.push(Pos::new(c.x - s, y, c.z));
                out.push(Pos::new(c.x + s, y, c.z));
            }
            for x in c.x - s..=c.x + s {
                out.push(Pos::new(x, c.y + s + 1, c.z));
            }
        }
    }
    out.sort();
    out
}

/// Voxels of `spec`, checked against `dims`.
pub fn gen_shape(spec: &ShapeSpec, dims: Dims) -> Result<Vec<Pos>, ShapeError> {
    if !spec.shape.sizes_valid() {
        return Err(ShapeError::BadSize(spec.shape));
    }
    let voxels = shape_voxels(&spec.shape, spec.center);
    if voxels.iter().all(|p| dims.contains(*p)) {
        Ok(voxels)
    } else {
        Err(ShapeError::DoesNotFit(*spec))
    }
}
