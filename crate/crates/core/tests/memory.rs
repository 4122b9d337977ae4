use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use craftloop::dsl::Predicate;
use craftloop::memory::{detect_components, detect_ground, Connectivity, Memory, PerceptionConfig};
use craftloop::vision::SegMask;
use craftloop::world::{BlockId, Dims, Palette, Pos, VoxelGrid};

const DIMS: Dims = Dims::new(7, 5, 7);

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        if self.0[i] != i {
            let r = self.find(self.0[i]);
            self.0[i] = r;
        }
        self.0[i]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a != b {
            self.0[a.max(b)] = a.min(b);
        }
    }
}

/// Components by union-find over every pair of solid voxels within the
/// connectivity's squared-distance bound.
fn oracle(solid: &[Pos], max_d2: i32) -> BTreeSet<BTreeSet<Pos>> {
    let mut uf = UnionFind((0..solid.len()).collect());
    for i in 0..solid.len() {
        for j in i + 1..solid.len() {
            let (a, b) = (solid[i], solid[j]);
            let (dx, dy, dz) = (a.x - b.x, a.y - b.y, a.z - b.z);
            let cheb = dx.abs().max(dy.abs()).max(dz.abs());
            if cheb == 1 && dx * dx + dy * dy + dz * dz <= max_d2 {
                uf.union(i, j);
            }
        }
    }
    let mut groups: BTreeMap<usize, BTreeSet<Pos>> = BTreeMap::new();
    for (i, p) in solid.iter().enumerate() {
        let r = uf.find(i);
        groups.entry(r).or_default().insert(*p);
    }
    groups.into_values().collect()
}

fn scatter(seed: u64, density: f64) -> VoxelGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = VoxelGrid::flat(DIMS, Palette::GROUND);
    for p in DIMS.positions().collect::<Vec<_>>() {
        if p.y > 0 && rng.random_bool(density) {
            grid.place_block(p, BlockId(rng.random_range(1..=8))).unwrap();
        }
    }
    grid
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn components_match_union_find(seed in any::<u64>(), density in 0.05f64..0.4) {
        let grid = scatter(seed, density);
        let ground = detect_ground(&grid, 0.9);
        prop_assert!(ground.iter().all(|p| p.y == 0));
        let solid: Vec<Pos> = grid.blocks().map(|(p, _)| p).filter(|p| p.y > 0).collect();
        for (conn, d2) in [(Connectivity::Six, 1), (Connectivity::TwentySix, 3)] {
            let got: BTreeSet<BTreeSet<Pos>> = detect_components(&grid, &ground, conn).into_iter().map(|m| m.0).collect();
            prop_assert_eq!(got, oracle(&solid, d2));
        }
    }
}

#[test]
fn diagonal_blocks_join_only_under_26_connectivity() {
    let mut grid = VoxelGrid::flat(DIMS, Palette::GROUND);
    grid.place_block(Pos::new(2, 1, 2), BlockId(3)).unwrap();
    grid.place_block(Pos::new(3, 2, 3), BlockId(3)).unwrap();
    let ground = detect_ground(&grid, 0.9);
    assert_eq!(detect_components(&grid, &ground, Connectivity::Six).len(), 2);
    assert_eq!(detect_components(&grid, &ground, Connectivity::TwentySix).len(), 1);
}

#[test]
fn perceived_objects_are_queryable_by_color() {
    let palette = Palette::default();
    let red = palette.by_color("red").unwrap();
    let blue = palette.by_color("blue").unwrap();
    let mut grid = VoxelGrid::flat(DIMS, Palette::GROUND);
    for y in 1..3 {
        grid.place_block(Pos::new(1, y, 1), red).unwrap();
        grid.place_block(Pos::new(5, y, 5), blue).unwrap();
    }
    let mut memory = Memory::new();
    memory.perceive(&grid, &PerceptionConfig::default(), 0);
    let reds = memory.query(&[(Predicate::HasColour, "red".into())]);
    assert_eq!(reds.len(), 1);
    let node = memory.node(reds[0]).unwrap();
    assert_eq!(node.voxels, SegMask([Pos::new(1, 1, 1), Pos::new(1, 2, 1)].into_iter().collect()));
    assert!(memory.query(&[(Predicate::HasColour, "green".into())]).is_empty());
}
