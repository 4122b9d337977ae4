//! Random scenes of 1 to 3 shapes on a flat ground, with descriptions.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::shapes::{shape_voxels, Shape, ShapeKind, ShapeSpec};
use super::{SegMask, VisionExample};
use crate::world::{BlockId, Dims, Palette, Pos, VoxelGrid};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SceneError {
    #[error("could not place {0} objects without overlap")]
    PlacementFailed(usize),
    #[error("every kind or every color is already present in the scene")]
    NoAbsentKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub dims: Dims,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Keep a one-voxel gap around every object.
    pub halo: bool,
    pub placement_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { dims: Dims::new(12, 8, 12), min_objects: 1, max_objects: 3, halo: true, placement_retries: 100 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub spec: ShapeSpec,
    pub mask: SegMask,
}

impl SceneObject {
    pub fn kind(&self) -> ShapeKind {
        self.spec.shape.kind()
    }

    pub fn color(&self) -> BlockId {
        self.spec.material
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub grid: VoxelGrid,
    pub objects: Vec<SceneObject>,
}

/// Sizes small enough that three objects fit a 12×8×12 grid.
pub fn random_shape(kind: ShapeKind, rng: &mut impl Rng) -> Shape {
    match kind {
        ShapeKind::Cube => Shape::Cube { side: rng.random_range(2..=3) },
        ShapeKind::Rectanguloid => loop {
            let (width, height, length) = (rng.random_range(2..=4), rng.random_range(2..=4), rng.random_range(2..=4));
            if !(width == height && height == length) {
                break Shape::Rectanguloid { width, height, length };
            }
        },
        ShapeKind::Sphere => Shape::Sphere { radius: rng.random_range(1..=2) },
        ShapeKind::Pyramid => Shape::Pyramid { height: rng.random_range(2..=3) },
        ShapeKind::Square => Shape::Square { side: rng.random_range(2..=3) },
        ShapeKind::Rectangle => loop {
            let (width, height) = (rng.random_range(2..=4), rng.random_range(2..=4));
            if width != height {
                break Shape::Rectangle { width, height };
            }
        },
        ShapeKind::Circle => Shape::Circle { radius: rng.random_range(1..=2) },
        ShapeKind::Triangle => Shape::Triangle { height: rng.random_range(2..=3) },
        ShapeKind::Dome => Shape::Dome { radius: rng.random_range(2..=3) },
        ShapeKind::Arch => Shape::Arch { half_span: rng.random_range(1..=2) },
    }
}

/// Colors available for objects: everything except the ground block.
pub fn object_colors(palette: &Palette) -> Vec<BlockId> {
    palette.ids().filter(|&id| id != Palette::GROUND).collect()
}

fn try_place(
    shape: Shape,
    material: BlockId,
    dims: Dims,
    occupied: &BTreeSet<Pos>,
    halo: bool,
    rng: &mut impl Rng,
) -> Option<SceneObject> {
    let origin = Pos::new(0, 0, 0);
    let local = shape_voxels(&shape, origin);
    let min = |f: fn(&Pos) -> i32| local.iter().map(f).min().unwrap();
    let max = |f: fn(&Pos) -> i32| local.iter().map(f).max().unwrap();
    let (x0, y0, z0) = (min(|p| p.x), min(|p| p.y), min(|p| p.z));
    let (ex, ey, ez) = (max(|p| p.x) - x0 + 1, max(|p| p.y) - y0 + 1, max(|p| p.z) - z0 + 1);
    // Ground occupies y = 0.
    if ex > dims.width || ez > dims.length || ey + 1 > dims.height {
        return None;
    }
    let tx = rng.random_range(0..=dims.width - ex) - x0;
    let tz = rng.random_range(0..=dims.length - ez) - z0;
    let ty = 1 - y0;
    let voxels: Vec<Pos> = local.iter().map(|p| p.offset(tx, ty, tz)).collect();
    let clash = voxels.iter().any(|p| {
        if halo {
            (-1..=1).any(|dx| (-1..=1).any(|dy| (-1..=1).any(|dz| occupied.contains(&p.offset(dx, dy, dz)))))
        } else {
            occupied.contains(p)
        }
    });
    if clash {
        return None;
    }
    Some(SceneObject {
        spec: ShapeSpec { shape, center: origin.offset(tx, ty, tz), material },
        mask: voxels.into_iter().collect(),
    })
}

pub fn gen_scene_rng(config: &SceneConfig, rng: &mut impl Rng) -> Result<Scene, SceneError> {
    let palette = Palette::default();
    let n = rng.random_range(config.min_objects..=config.max_objects);
    let mut kinds = ShapeKind::ALL.to_vec();
    kinds.shuffle(rng);
    let mut colors = object_colors(&palette);
    colors.shuffle(rng);
    let mut occupied = BTreeSet::new();
    let mut objects = Vec::new();
    for (&kind, &color) in kinds.iter().zip(&colors).take(n) {
        let placed = (0..config.placement_retries).find_map(|_| {
            let shape = random_shape(kind, rng);
            try_place(shape, color, config.dims, &occupied, config.halo, rng)
        });
        let obj = placed.ok_or(SceneError::PlacementFailed(n))?;
        occupied.extend(obj.mask.iter().copied());
        objects.push(obj);
    }
    let mut grid = VoxelGrid::flat(config.dims, Palette::GROUND);
    for obj in &objects {
        for p in obj.mask.iter() {
            grid.place_block(*p, obj.color()).expect("placement checked");
        }
    }
    Ok(Scene { grid, objects })
}

pub fn gen_scene(config: &SceneConfig, seed: u64) -> Result<Scene, SceneError> {
    gen_scene_rng(config, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// The three description forms for an object.
pub fn description_forms(kind: ShapeKind, color: &str) -> [String; 3] {
    [kind.name().to_string(), format!("{color} {kind}"), format!("the {color} thing")]
}

/// One description form chosen uniformly.
pub fn describe(kind: ShapeKind, color: &str, rng: &mut impl Rng) -> String {
    let forms = description_forms(kind, color);
    forms[rng.random_range(0..3)].clone()
}

fn color_name(id: BlockId) -> String {
    Palette::default().color_of(id).unwrap_or("unknown").to_string()
}

/// "color kind" naming a kind and a color that are both absent from the scene.
pub fn gen_negative(scene: &Scene, rng: &mut impl Rng) -> Result<VisionExample, SceneError> {
    let kinds: Vec<ShapeKind> =
        ShapeKind::ALL.into_iter().filter(|k| scene.objects.iter().all(|o| o.kind() != *k)).collect();
    let colors: Vec<BlockId> = object_colors(&Palette::default())
        .into_iter()
        .filter(|c| scene.objects.iter().all(|o| o.color() != *c))
        .collect();
    let (Some(kind), Some(color)) = (kinds.choose(rng), colors.choose(rng)) else {
        return Err(SceneError::NoAbsentKind);
    };
    Ok(VisionExample {
        grid: scene.grid.clone(),
        text: format!("{} {}", color_name(*color), kind),
        mask: SegMask::new(),
        tranche_id: 0,
    })
}

/// One object of the scene with a uniformly chosen description.
pub fn gen_positive(scene: &Scene, rng: &mut impl Rng) -> VisionExample {
    let obj = scene.objects.choose(rng).expect("scene has objects");
    VisionExample {
        grid: scene.grid.clone(),
        text: describe(obj.kind(), &color_name(obj.color()), rng),
        mask: obj.mask.clone(),
        tranche_id: 0,
    }
}

/// Training examples for one scene: every object under all three
/// description forms, plus `negatives` absent-object queries.
pub fn scene_examples(scene: &Scene, negatives: usize, rng: &mut impl Rng) -> Vec<VisionExample> {
    let mut out = Vec::new();
    for obj in &scene.objects {
        for text in description_forms(obj.kind(), &color_name(obj.color())) {
            out.push(VisionExample { grid: scene.grid.clone(), text, mask: obj.mask.clone(), tranche_id: 0 });
        }
    }
    for _ in 0..negatives {
        if let Ok(neg) = gen_negative(scene, rng) {
            out.push(neg);
        }
    }
    out
}

/// The rule-based seed dataset: `n_scenes` scenes expanded by [`scene_examples`].
pub fn bootstrap(config: &SceneConfig, n_scenes: usize, seed: u64) -> Vec<VisionExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut made = 0;
    while made < n_scenes {
        if let Ok(scene) = gen_scene_rng(config, &mut rng) {
            out.extend(scene_examples(&scene, 3, &mut rng));
            made += 1;
        }
    }
    out
}

/// Held-out evaluation set: `n` positives and `n` negatives from fresh scenes.
pub fn held_out(config: &SceneConfig, n: usize, seed: u64) -> (Vec<VisionExample>, Vec<VisionExample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    while pos.len() < n || neg.len() < n {
        let Ok(scene) = gen_scene_rng(config, &mut rng) else { continue };
        if pos.len() < n {
            pos.push(gen_positive(&scene, &mut rng));
        }
        if neg.len() < n {
            if let Ok(e) = gen_negative(&scene, &mut rng) {
                neg.push(e);
            }
        }
    }
    (pos, neg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_seeded_and_disjoint() {
        let config = SceneConfig::default();
        let a = gen_scene(&config, 5).unwrap();
        assert_eq!(a, gen_scene(&config, 5).unwrap());
        for seed in 0..200 {
            let s = gen_scene(&config, seed).unwrap();
            assert!((1..=3).contains(&s.objects.len()));
            for (i, a) in s.objects.iter().enumerate() {
                for b in &s.objects[i + 1..] {
                    assert!(a.mask.0.is_disjoint(&b.mask.0));
                    assert_ne!(a.kind(), b.kind());
                    assert_ne!(a.color(), b.color());
                }
                assert!(a.mask.iter().all(|p| s.grid.get(*p) == a.color()));
            }
        }
    }

    #[test]
    fn describe_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let forms = description_forms(ShapeKind::Cube, "yellow");
        assert_eq!(forms, ["cube".to_string(), "yellow cube".into(), "the yellow thing".into()]);
        for _ in 0..20 {
            assert!(forms.contains(&describe(ShapeKind::Cube, "yellow", &mut rng)));
        }
    }

    #[test]
    fn negatives_name_absent_things() {
        let config = SceneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..100 {
            let s = gen_scene(&config, seed).unwrap();
            let neg = gen_negative(&s, &mut rng).unwrap();
            assert!(neg.mask.is_empty());
            let words: Vec<&str> = neg.text.split(' ').collect();
            assert!(s.objects.iter().all(|o| o.kind().name() != words[1] && color_name(o.color()) != words[0]));
        }
    }
}
