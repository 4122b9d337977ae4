//! Text-conditioned voxel segmentation: bootstrap data and the model.

pub mod model;
pub mod scene;
pub mod shapes;
pub mod text;
pub mod train;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::world::{Pose, Pos, VoxelGrid, World, WorldSnapshot};

pub use model::{SegConfig, SegModel};
pub use scene::{describe, gen_negative, gen_scene, Scene, SceneConfig, SceneObject};
pub use shapes::{gen_shape, Shape, ShapeKind, ShapeSpec};
pub use train::{train_seg, Optimizer, TrainConfig};

/// A set of voxel positions, possibly empty.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegMask(pub BTreeSet<Pos>);

impl SegMask {
    pub fn new() -> Self {
        SegMask::default()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, p: &Pos) -> bool {
        self.0.contains(p)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Pos> {
        self.0.iter()
    }
}

impl FromIterator<Pos> for SegMask {
    fn from_iter<I: IntoIterator<Item = Pos>>(iter: I) -> Self {
        SegMask(iter.into_iter().collect())
    }
}

/// |a ∩ b| / |a ∪ b|; two empty masks score 1.
pub fn iou(a: &SegMask, b: &SegMask) -> f64 {
    let inter = a.0.intersection(&b.0).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// A positive counts as correct at IoU ≥ 0.5; a negative when the
/// prediction is empty.
pub fn is_correct(predicted: &SegMask, truth: &SegMask) -> bool {
    if truth.is_empty() {
        predicted.is_empty()
    } else {
        iou(predicted, truth) >= 0.5
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisionExample {
    pub grid: VoxelGrid,
    pub text: String,
    pub mask: SegMask,
    pub tranche_id: u32,
}

impl VisionExample {
    /// Mask inside the non-air cells of the grid (or empty).
    pub fn is_valid(&self) -> bool {
        self.mask.iter().all(|p| self.grid.in_bounds(*p) && !self.grid.is_air(*p))
    }

    pub fn to_record(&self) -> VisionRecord {
        let pose = Pose::new(Pos::new(0, 0, 0), 0.0, 0.0);
        VisionRecord {
            world: World::new(self.grid.clone(), pose, pose).snapshot(),
            text: self.text.clone(),
            mask: self.mask.clone(),
            tranche_id: self.tranche_id,
        }
    }
}

/// Line-delimited persistence form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionRecord {
    pub world: WorldSnapshot,
    pub text: String,
    pub mask: SegMask,
    pub tranche_id: u32,
}

impl VisionRecord {
    pub fn to_example(&self) -> Result<VisionExample, crate::world::SnapshotError> {
        Ok(VisionExample {
            grid: self.world.to_world()?.grid,
            text: self.text.clone(),
            mask: self.mask.clone(),
            tranche_id: self.tranche_id,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(n: i32) -> SegMask {
        (0..n).map(|i| Pos::new(i, 0, 0)).collect()
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&mask(3), &mask(3)), 1.0);
        assert_eq!(iou(&SegMask::new(), &SegMask::new()), 1.0);
        let far: SegMask = (10..12).map(|i| Pos::new(i, 0, 0)).collect();
        assert_eq!(iou(&mask(3), &far), 0.0);
        assert_eq!(iou(&mask(4), &mask(8)), 0.5);
    }

    #[test]
    fn correctness_rule() {
        assert!(is_correct(&SegMask::new(), &SegMask::new()));
        assert!(!is_correct(&mask(1), &SegMask::new()));
        assert!(is_correct(&mask(4), &mask(8)));
        assert!(!is_correct(&mask(3), &mask(8)));
    }
}
