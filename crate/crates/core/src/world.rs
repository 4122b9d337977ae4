//! Deterministic voxel world: blocks, poses, reversible mutations, pointing
//! and gaze raycasting.
//!
//! Axis convention: `y` is vertical. A pose with yaw 0 faces `+x`; yaw grows
//! counterclockwise when viewed from above, so yaw 90 faces `+z` and the
//! speaker's left-hand side is `yaw + 90`. Positive pitch looks up.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Block type index into the palette. `0` is air and is never stored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub u8);

impl BlockId {
    pub const AIR: BlockId = BlockId(0);

    pub fn is_air(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub name: String,
    pub color: String,
}

/// Material table. Entry `i` describes `BlockId(i + 1)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Palette {
    entries: Vec<PaletteEntry>,
}

const DEFAULT_PALETTE: [(&str, &str); 16] = [
    ("white_wool", "white"),
    ("gold", "yellow"),
    ("red_wool", "red"),
    ("blue_wool", "blue"),
    ("green_wool", "green"),
    ("orange_wool", "orange"),
    ("purple_wool", "purple"),
    ("pink_wool", "pink"),
    ("cyan_wool", "cyan"),
    ("lime_wool", "lime"),
    ("stone", "gray"),
    ("obsidian", "black"),
    ("dirt", "brown"),
    ("magenta_wool", "magenta"),
    ("iron", "silver"),
    ("sandstone", "tan"),
];

impl Default for Palette {
    fn default() -> Self {
        Palette {
            entries: DEFAULT_PALETTE
                .iter()
                .map(|(name, color)| PaletteEntry {
                    name: (*name).to_string(),
                    color: (*color).to_string(),
                })
                .collect(),
        }
    }
}

impl Palette {
    /// Block used for the ground slab of generated worlds.
    pub const GROUND: BlockId = BlockId(13);

    pub fn new(entries: Vec<PaletteEntry>) -> Self {
        Palette { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: BlockId) -> bool {
        !id.is_air() && (id.0 as usize) <= self.entries.len()
    }

    pub fn get(&self, id: BlockId) -> Option<&PaletteEntry> {
        if id.is_air() {
            return None;
        }
        self.entries.get(id.0 as usize - 1)
    }

    pub fn color_of(&self, id: BlockId) -> Option<&str> {
        self.get(id).map(|e| e.color.as_str())
    }

    /// First block whose color tag equals `color`.
    pub fn by_color(&self, color: &str) -> Option<BlockId> {
        self.entries
            .iter()
            .position(|e| e.color == color)
            .map(|i| BlockId(i as u8 + 1))
    }

    pub fn ids(&self) -> impl Iterator<Item = BlockId> + '_ {
        (1..=self.entries.len()).map(|i| BlockId(i as u8))
    }

    pub fn colors(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.color.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Pos {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Pos { x, y, z }
    }

    pub fn offset(self, dx: i32, dy: i32, dz: i32) -> Pos {
        Pos::new(self.x + dx, self.y + dy, self.z + dz)
    }

    pub fn manhattan(self, other: Pos) -> u32 {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y) + self.z.abs_diff(other.z)
    }

    pub fn as_array(self) -> [i32; 3] {
        [self.x, self.y, self.z]
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.x, self.y, self.z)
    }
}

/// Grid extent: `width` along x, `height` along y, `length` along z.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub width: i32,
    pub height: i32,
    pub length: i32,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { width: 64, height: 48, length: 64 }
    }
}

impl Dims {
    pub const fn new(width: i32, height: i32, length: i32) -> Self {
        Dims { width, height, length }
    }

    pub fn contains(&self, p: Pos) -> bool {
        (0..self.width).contains(&p.x) && (0..self.height).contains(&p.y) && (0..self.length).contains(&p.z)
    }

    pub fn volume(&self) -> usize {
        (self.width as usize) * (self.height as usize) * (self.length as usize)
    }

    /// Row-major index with x slowest and z fastest.
    pub fn index(&self, p: Pos) -> usize {
        ((p.x as usize * self.height as usize) + p.y as usize) * self.length as usize + p.z as usize
    }

    pub fn pos_of(&self, index: usize) -> Pos {
        let l = self.length as usize;
        let h = self.height as usize;
        Pos::new((index / (l * h)) as i32, ((index / l) % h) as i32, (index % l) as i32)
    }

    pub fn positions(&self) -> impl Iterator<Item = Pos> + '_ {
        (0..self.volume()).map(|i| self.pos_of(i))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum WorldError {
    #[error("position {0} is outside the world")]
    OutOfBounds(Pos),
    #[error("position {0} is already occupied")]
    Occupied(Pos),
    #[error("there is no block at {0}")]
    NothingThere(Pos),
    #[error("the way to {0} is blocked")]
    Blocked(Pos),
    #[error("cannot place air")]
    PlaceAir,
    #[error("block id {0} is not in the palette")]
    UnknownBlock(BlockId),
    #[error("stale delta at {pos}: expected {expected}, found {found}")]
    StaleDelta { pos: Pos, expected: BlockId, found: BlockId },
}

pub type Result<T, E = WorldError> = std::result::Result<T, E>;

/// Sparse block storage. Air is implicit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VoxelGrid {
    dims: Dims,
    cells: BTreeMap<Pos, BlockId>,
    palette: Palette,
}

impl VoxelGrid {
    pub fn new(dims: Dims) -> Self {
        Self::with_palette(dims, Palette::default())
    }

    pub fn with_palette(dims: Dims, palette: Palette) -> Self {
        VoxelGrid { dims, cells: BTreeMap::new(), palette }
    }

    /// Grid whose bottom layer is completely filled with `block`.
    pub fn flat(dims: Dims, block: BlockId) -> Self {
        let mut grid = Self::new(dims);
        for x in 0..dims.width {
            for z in 0..dims.length {
                grid.cells.insert(Pos::new(x, 0, z), block);
            }
        }
        grid
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    pub fn in_bounds(&self, p: Pos) -> bool {
        self.dims.contains(p)
    }

    pub fn get(&self, p: Pos) -> BlockId {
        self.cells.get(&p).copied().unwrap_or(BlockId::AIR)
    }

    pub fn is_air(&self, p: Pos) -> bool {
        !self.cells.contains_key(&p)
    }

    /// Non-air cells in position order.
    pub fn blocks(&self) -> impl Iterator<Item = (Pos, BlockId)> + '_ {
        self.cells.iter().map(|(p, b)| (*p, *b))
    }

    pub fn block_count(&self) -> usize {
        self.cells.len()
    }

    fn check_bounds(&self, p: Pos) -> Result<()> {
        if self.in_bounds(p) {
            Ok(())
        } else {
            Err(WorldError::OutOfBounds(p))
        }
    }

    fn set_raw(&mut self, p: Pos, id: BlockId) {
        if id.is_air() {
            self.cells.remove(&p);
        } else {
            self.cells.insert(p, id);
        }
    }

    pub fn place_block(&mut self, pos: Pos, id: BlockId) -> Result<WorldDelta> {
        self.check_bounds(pos)?;
        if id.is_air() {
            return Err(WorldError::PlaceAir);
        }
        if !self.palette.contains(id) {
            return Err(WorldError::UnknownBlock(id));
        }
        if !self.is_air(pos) {
            return Err(WorldError::Occupied(pos));
        }
        self.set_raw(pos, id);
        Ok(WorldDelta::single(pos, BlockId::AIR, id))
    }

    pub fn destroy_block(&mut self, pos: Pos) -> Result<WorldDelta> {
        self.check_bounds(pos)?;
        let before = self.get(pos);
        if before.is_air() {
            return Err(WorldError::NothingThere(pos));
        }
        self.set_raw(pos, BlockId::AIR);
        Ok(WorldDelta::single(pos, before, BlockId::AIR))
    }

    /// Apply every entry in order. Nothing is changed when any entry is stale.
    pub fn apply_delta(&mut self, delta: &WorldDelta) -> Result<()> {
        self.check_delta(delta.entries.iter(), |e| (e.before, e.after))?;
        for e in &delta.entries {
            self.set_raw(e.pos, e.after);
        }
        Ok(())
    }

    /// Undo every entry in reverse order. Nothing is changed when any entry is stale.
    pub fn revert_delta(&mut self, delta: &WorldDelta) -> Result<()> {
        self.check_delta(delta.entries.iter().rev(), |e| (e.after, e.before))?;
        for e in delta.entries.iter().rev() {
            self.set_raw(e.pos, e.before);
        }
        Ok(())
    }

    // Simulates the sequence on a scratch overlay so a failure leaves the grid untouched.
    fn check_delta<'a>(
        &self,
        entries: impl Iterator<Item = &'a DeltaEntry>,
        expect_then_set: impl Fn(&DeltaEntry) -> (BlockId, BlockId),
    ) -> Result<()> {
        let mut overlay: BTreeMap<Pos, BlockId> = BTreeMap::new();
        for e in entries {
            self.check_bounds(e.pos)?;
            let (expected, next) = expect_then_set(e);
            let found = overlay.get(&e.pos).copied().unwrap_or_else(|| self.get(e.pos));
            if found != expected {
                return Err(WorldError::StaleDelta { pos: e.pos, expected, found });
            }
            if !next.is_air() && !self.palette.contains(next) {
                return Err(WorldError::UnknownBlock(next));
            }
            overlay.insert(e.pos, next);
        }
        Ok(())
    }

    /// Canonical text encoding of the block content (used for bit-identical comparisons).
    pub fn canonical_blocks(&self) -> String {
        let blocks: Vec<[i32; 4]> =
            self.blocks().map(|(p, b)| [p.x, p.y, p.z, b.0 as i32]).collect();
        serde_json::to_string(&blocks).expect("block list serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeltaEntry {
    pub pos: Pos,
    pub before: BlockId,
    pub after: BlockId,
}

/// Ordered, reversible record of cell changes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorldDelta {
    pub entries: Vec<DeltaEntry>,
}

impl WorldDelta {
    pub fn single(pos: Pos, before: BlockId, after: BlockId) -> Self {
        WorldDelta { entries: vec![DeltaEntry { pos, before, after }] }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn extend(&mut self, other: WorldDelta) {
        self.entries.extend(other.entries);
    }
}

/// Unit steps along the six axis directions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Step {
    PosX,
    NegX,
    PosY,
    NegY,
    PosZ,
    NegZ,
}

impl Step {
    pub const ALL: [Step; 6] = [Step::PosX, Step::NegX, Step::PosY, Step::NegY, Step::PosZ, Step::NegZ];

    pub fn offset(self) -> (i32, i32, i32) {
        match self {
            Step::PosX => (1, 0, 0),
            Step::NegX => (-1, 0, 0),
            Step::PosY => (0, 1, 0),
            Step::NegY => (0, -1, 0),
            Step::PosZ => (0, 0, 1),
            Step::NegZ => (0, 0, -1),
        }
    }

    pub fn between(from: Pos, to: Pos) -> Option<Step> {
        let d = (to.x - from.x, to.y - from.y, to.z - from.z);
        Step::ALL.into_iter().find(|s| s.offset() == d)
    }

    pub fn apply(self, p: Pos) -> Pos {
        let (dx, dy, dz) = self.offset();
        p.offset(dx, dy, dz)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: i32,
    pub y: i32,
    pub z: i32,
    pub pitch: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn new(pos: Pos, pitch: f64, yaw: f64) -> Self {
        let mut pose = Pose { x: pos.x, y: pos.y, z: pos.z, pitch: 0.0, yaw: 0.0 };
        pose.set_angles(pitch, yaw);
        pose
    }

    pub fn pos(&self) -> Pos {
        Pos::new(self.x, self.y, self.z)
    }

    /// Clamp pitch to [-90, 90] and wrap yaw into [0, 360).
    pub fn set_angles(&mut self, pitch: f64, yaw: f64) {
        self.pitch = pitch.clamp(-90.0, 90.0);
        let wrapped = yaw.rem_euclid(360.0);
        self.yaw = if wrapped >= 360.0 { 0.0 } else { wrapped };
    }

    /// Unit gaze vector.
    pub fn direction(&self) -> [f64; 3] {
        let (p, y) = (self.pitch.to_radians(), self.yaw.to_radians());
        [p.cos() * y.cos(), p.sin(), p.cos() * y.sin()]
    }

    /// Turn to face `target` horizontally.
    pub fn face(&mut self, target: Pos) {
        let dx = (target.x - self.x) as f64;
        let dz = (target.z - self.z) as f64;
        if dx != 0.0 || dz != 0.0 {
            let pitch = self.pitch;
            self.set_angles(pitch, dz.atan2(dx).to_degrees());
        }
    }
}

/// Advance a pose one voxel. Angles are untouched.
pub fn step_agent(pose: &Pose, grid: &VoxelGrid, step: Step) -> Result<Pose> {
    let target = step.apply(pose.pos());
    if !grid.in_bounds(target) {
        return Err(WorldError::OutOfBounds(target));
    }
    if !grid.is_air(target) {
        return Err(WorldError::Blocked(target));
    }
    Ok(Pose { x: target.x, y: target.y, z: target.z, ..*pose })
}

/// Inclusive axis-aligned box. Construction normalizes the corners.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Region {
    pub min: Pos,
    pub max: Pos,
}

impl Region {
    pub fn new(a: Pos, b: Pos) -> Self {
        Region {
            min: Pos::new(a.x.min(b.x), a.y.min(b.y), a.z.min(b.z)),
            max: Pos::new(a.x.max(b.x), a.y.max(b.y), a.z.max(b.z)),
        }
    }

    pub fn single(p: Pos) -> Self {
        Region { min: p, max: p }
    }

    /// Bounding box of a set of positions.
    pub fn bounding<'a>(positions: impl IntoIterator<Item = &'a Pos>) -> Option<Region> {
        let mut it = positions.into_iter();
        let first = *it.next()?;
        Some(it.fold(Region::single(first), |r, p| Region::new(
            Pos::new(r.min.x.min(p.x), r.min.y.min(p.y), r.min.z.min(p.z)),
            Pos::new(r.max.x.max(p.x), r.max.y.max(p.y), r.max.z.max(p.z)),
        )))
    }

    pub fn contains(&self, p: Pos) -> bool {
        (self.min.x..=self.max.x).contains(&p.x)
            && (self.min.y..=self.max.y).contains(&p.y)
            && (self.min.z..=self.max.z).contains(&p.z)
    }

    pub fn positions(&self) -> impl Iterator<Item = Pos> + '_ {
        (self.min.x..=self.max.x).flat_map(move |x| {
            (self.min.y..=self.max.y)
                .flat_map(move |y| (self.min.z..=self.max.z).map(move |z| Pos::new(x, y, z)))
        })
    }

    pub fn volume(&self) -> usize {
        ((self.max.x - self.min.x + 1) * (self.max.y - self.min.y + 1) * (self.max.z - self.min.z + 1)) as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointEvent {
    pub region: Region,
    pub duration_ticks: u32,
}

pub const DEFAULT_POINT_TICKS: u32 = 2;

/// Validate a region (corners in any order) and build the flash event.
pub fn point_at(dims: Dims, a: Pos, b: Pos, duration_ticks: u32) -> Result<PointEvent> {
    for p in [a, b] {
        if !dims.contains(p) {
            return Err(WorldError::OutOfBounds(p));
        }
    }
    Ok(PointEvent { region: Region::new(a, b), duration_ticks })
}

pub const DEFAULT_LOOK_RANGE: f64 = 32.0;

/// First non-air voxel hit by the gaze ray starting at the center of the
/// pose's voxel, or `None` within `max_range`. The starting voxel is skipped.
pub fn look_target(pose: &Pose, grid: &VoxelGrid, max_range: f64) -> Option<Pos> {
    let dir = pose.direction();
    let origin = [pose.x as f64 + 0.5, pose.y as f64 + 0.5, pose.z as f64 + 0.5];
    let mut cell = [pose.x, pose.y, pose.z];
    let mut step = [0i32; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        if dir[a] > 1e-12 {
            step[a] = 1;
            t_max[a] = ((cell[a] + 1) as f64 - origin[a]) / dir[a];
            t_delta[a] = 1.0 / dir[a];
        } else if dir[a] < -1e-12 {
            step[a] = -1;
            t_max[a] = (cell[a] as f64 - origin[a]) / dir[a];
            t_delta[a] = -1.0 / dir[a];
        }
    }
    loop {
        let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        let t = t_max[axis];
        if !t.is_finite() || t > max_range {
            return None;
        }
        cell[axis] += step[axis];
        t_max[axis] += t_delta[axis];
        let p = Pos::new(cell[0], cell[1], cell[2]);
        if !grid.in_bounds(p) {
            // The ray only moves away once it has left the box along a stepping axis.
            let leaving = (0..3).any(|a| {
                let c = cell[a];
                let hi = [grid.dims.width, grid.dims.height, grid.dims.length][a];
                (c < 0 && step[a] <= 0) || (c >= hi && step[a] >= 0)
            });
            if leaving {
                return None;
            }
            continue;
        }
        if !grid.is_air(p) {
            return Some(p);
        }
    }
}

/// World state shared by an agent and one human player.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub grid: VoxelGrid,
    pub agent: Pose,
    pub player: Pose,
}

impl World {
    pub fn new(grid: VoxelGrid, agent: Pose, player: Pose) -> Self {
        World { grid, agent, player }
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        WorldSnapshot {
            dims: self.grid.dims(),
            palette: self.grid.palette().clone(),
            blocks: self.grid.blocks().map(|(p, b)| [p.x, p.y, p.z, b.0 as i32]).collect(),
            agent_pose: self.agent,
            player_pose: self.player,
        }
    }
}

/// Canonical document form of a world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSnapshot {
    pub dims: Dims,
    pub palette: Palette,
    pub blocks: Vec<[i32; 4]>,
    pub agent_pose: Pose,
    pub player_pose: Pose,
}

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("malformed snapshot: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid snapshot: {0}")]
    Invalid(#[from] WorldError),
}

impl WorldSnapshot {
    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("snapshot serializes")
    }

    pub fn from_text(text: &str) -> Result<Self, SnapshotError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_world(&self) -> Result<World, SnapshotError> {
        let mut grid = VoxelGrid::with_palette(self.dims, self.palette.clone());
        for &[x, y, z, id] in &self.blocks {
            let id = u8::try_from(id).map_err(|_| WorldError::UnknownBlock(BlockId(0)))?;
            grid.place_block(Pos::new(x, y, z), BlockId(id))?;
        }
        Ok(World { grid, agent: self.agent_pose, player: self.player_pose })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> VoxelGrid {
        VoxelGrid::new(Dims::new(8, 6, 8))
    }

    #[test]
    fn place_records_single_entry() {
        let mut g = small();
        let d = g.place_block(Pos::new(1, 1, 1), BlockId(3)).unwrap();
        assert_eq!(d.entries, vec![DeltaEntry { pos: Pos::new(1, 1, 1), before: BlockId(0), after: BlockId(3) }]);
        assert_eq!(g.place_block(Pos::new(1, 1, 1), BlockId(2)), Err(WorldError::Occupied(Pos::new(1, 1, 1))));
        assert_eq!(g.place_block(Pos::new(8, 0, 0), BlockId(2)), Err(WorldError::OutOfBounds(Pos::new(8, 0, 0))));
        assert_eq!(g.place_block(Pos::new(0, 0, 0), BlockId(0)), Err(WorldError::PlaceAir));
        assert_eq!(g.place_block(Pos::new(0, 0, 0), BlockId(17)), Err(WorldError::UnknownBlock(BlockId(17))));
    }

    #[test]
    fn destroy_inverts_place() {
        let mut g = small();
        let original = g.clone();
        g.place_block(Pos::new(1, 1, 1), BlockId(3)).unwrap();
        let d = g.destroy_block(Pos::new(1, 1, 1)).unwrap();
        assert_eq!(d.entries[0], DeltaEntry { pos: Pos::new(1, 1, 1), before: BlockId(3), after: BlockId(0) });
        assert_eq!(g, original);
        assert_eq!(g.destroy_block(Pos::new(1, 1, 1)), Err(WorldError::NothingThere(Pos::new(1, 1, 1))));
        g.place_block(Pos::new(1, 1, 1), BlockId(3)).unwrap();
        g.destroy_block(Pos::new(1, 1, 1)).unwrap();
        assert_eq!(g, original);
    }

    #[test]
    fn step_rules() {
        let mut g = small();
        let pose = Pose::new(Pos::new(0, 1, 0), 10.0, 45.0);
        let moved = step_agent(&pose, &g, Step::PosX).unwrap();
        assert_eq!(moved.pos(), Pos::new(1, 1, 0));
        assert_eq!((moved.pitch, moved.yaw), (10.0, 45.0));
        assert_eq!(step_agent(&pose, &g, Step::NegX), Err(WorldError::OutOfBounds(Pos::new(-1, 1, 0))));
        g.place_block(Pos::new(1, 1, 0), BlockId(1)).unwrap();
        assert_eq!(step_agent(&pose, &g, Step::PosX), Err(WorldError::Blocked(Pos::new(1, 1, 0))));
    }

    #[test]
    fn stale_delta_leaves_grid_untouched() {
        let mut g = small();
        let mut d = g.place_block(Pos::new(2, 2, 2), BlockId(4)).unwrap();
        d.extend(g.place_block(Pos::new(3, 2, 2), BlockId(4)).unwrap());
        let snapshot = g.clone();
        assert!(matches!(g.apply_delta(&d), Err(WorldError::StaleDelta { .. })));
        assert_eq!(g, snapshot);
        g.revert_delta(&d).unwrap();
        assert_eq!(g.block_count(), 0);
        g.apply_delta(&d).unwrap();
        assert_eq!(g, snapshot);
    }

    #[test]
    fn delta_touching_one_cell_twice() {
        let mut g = small();
        let p = Pos::new(1, 1, 1);
        let mut d = g.place_block(p, BlockId(2)).unwrap();
        d.extend(g.destroy_block(p).unwrap());
        d.extend(g.place_block(p, BlockId(5)).unwrap());
        let end = g.clone();
        g.revert_delta(&d).unwrap();
        assert!(g.is_air(p));
        g.apply_delta(&d).unwrap();
        assert_eq!(g, end);
    }

    #[test]
    fn random_delta_round_trip_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = VoxelGrid::flat(Dims::new(10, 6, 10), Palette::GROUND);
        let initial = g.canonical_blocks();
        let mut delta = WorldDelta::default();
        while delta.len() < 100 {
            let p = Pos::new(rng.random_range(0..10), rng.random_range(0..6), rng.random_range(0..10));
            let step = if g.is_air(p) {
                g.place_block(p, BlockId(rng.random_range(1..=16)))
            } else {
                g.destroy_block(p)
            };
            delta.extend(step.unwrap());
        }
        let end = g.canonical_blocks();
        g.revert_delta(&delta).unwrap();
        assert_eq!(g.canonical_blocks(), initial);
        g.apply_delta(&delta).unwrap();
        assert_eq!(g.canonical_blocks(), end);
    }

    #[test]
    fn point_normalizes_corners() {
        let dims = Dims::new(8, 6, 8);
        let e = point_at(dims, Pos::new(0, 0, 0), Pos::new(1, 1, 1), DEFAULT_POINT_TICKS).unwrap();
        assert_eq!(e.region, Region { min: Pos::new(0, 0, 0), max: Pos::new(1, 1, 1) });
        assert_eq!(e.duration_ticks, 2);
        let single = point_at(dims, Pos::new(3, 3, 3), Pos::new(3, 3, 3), 2).unwrap();
        assert_eq!(single.region.volume(), 1);
        let inverted = point_at(dims, Pos::new(5, 1, 0), Pos::new(2, 4, 3), 2).unwrap();
        assert_eq!(inverted.region, Region { min: Pos::new(2, 1, 0), max: Pos::new(5, 4, 3) });
        assert!(point_at(dims, Pos::new(0, 0, 0), Pos::new(8, 0, 0), 2).is_err());
    }

    #[test]
    fn look_target_cases() {
        let mut g = small();
        let pose = Pose::new(Pos::new(0, 1, 0), 0.0, 0.0);
        assert_eq!(look_target(&pose, &g, DEFAULT_LOOK_RANGE), None);
        g.place_block(Pos::new(3, 1, 0), BlockId(1)).unwrap();
        assert_eq!(look_target(&pose, &g, DEFAULT_LOOK_RANGE), Some(Pos::new(3, 1, 0)));
        assert_eq!(look_target(&pose, &g, 2.0), None);
        let behind = Pose::new(Pos::new(4, 1, 0), 0.0, 0.0);
        assert_eq!(look_target(&behind, &g, DEFAULT_LOOK_RANGE), None);
        let down = Pose::new(Pos::new(3, 4, 0), -90.0, 0.0);
        assert_eq!(look_target(&down, &g, DEFAULT_LOOK_RANGE), Some(Pos::new(3, 1, 0)));
    }

    #[test]
    fn yaw_convention() {
        let left = Pose::new(Pos::new(0, 0, 0), 0.0, 90.0).direction();
        assert!((left[2] - 1.0).abs() < 1e-12 && left[0].abs() < 1e-12);
        let wrapped = Pose::new(Pos::new(0, 0, 0), 120.0, -90.0);
        assert_eq!((wrapped.pitch, wrapped.yaw), (90.0, 270.0));
    }

    #[test]
    fn snapshot_round_trip() {
        let mut g = VoxelGrid::flat(Dims::new(4, 3, 4), Palette::GROUND);
        g.place_block(Pos::new(1, 1, 1), BlockId(2)).unwrap();
        let w = World::new(g, Pose::new(Pos::new(0, 1, 0), 0.0, 0.0), Pose::new(Pos::new(3, 1, 3), -10.0, 180.0));
        let text = w.snapshot().to_text();
        let back = WorldSnapshot::from_text(&text).unwrap().to_world().unwrap();
        assert_eq!(back, w);
        assert_eq!(back.snapshot().to_text(), text);
        assert!(text.starts_with("{\"dims\""));
    }
}
