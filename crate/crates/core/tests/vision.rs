mod common;

use std::collections::{BTreeSet, VecDeque};

use craftloop::vision::model::{Geometry, Target};
use craftloop::vision::shapes::shape_voxels;
use craftloop::vision::train::{train_seg, Optimizer, TrainConfig};
use craftloop::vision::{iou, SegConfig, SegMask, SegModel, Shape, ShapeKind, VisionExample};
use craftloop::world::{Dims, Pos};

use common::{max_gradient_error, small_scene, target};

// Lattice points in a closed ball / disk of integer radius r = 0..5.
const BALL: [usize; 6] = [1, 7, 33, 123, 257, 515];
const DISK: [usize; 6] = [1, 5, 13, 29, 49, 81];

fn isqrt(n: i64) -> i64 {
    let mut r = (n as f64).sqrt() as i64;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

/// Ball lattice count by summing chord lengths instead of testing points.
fn ball_by_chords(r: i64) -> usize {
    let mut n = 0;
    for dx in -r..=r {
        for dy in -r..=r {
            let rest = r * r - dx * dx - dy * dy;
            if rest >= 0 {
                n += 2 * isqrt(rest) + 1;
            }
        }
    }
    n as usize
}

fn connected(voxels: &[Pos]) -> bool {
    let set: BTreeSet<Pos> = voxels.iter().copied().collect();
    let Some(&start) = voxels.first() else { return false };
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(p) = queue.pop_front() {
        for (dx, dy, dz) in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)] {
            let q = p.offset(dx, dy, dz);
            if set.contains(&q) && seen.insert(q) {
                queue.push_back(q);
            }
        }
    }
    seen.len() == set.len()
}

fn extent(voxels: &[Pos]) -> [i32; 3] {
    let mut out = [0; 3];
    for (axis, slot) in out.iter_mut().enumerate() {
        let vals = voxels.iter().map(|p| p.as_array()[axis]);
        *slot = vals.clone().max().unwrap() - vals.min().unwrap() + 1;
    }
    out
}

#[test]
fn sphere_counts_match_lattice_oracles() {
    for r in 0..=5u32 {
        let v = shape_voxels(&Shape::Sphere { radius: r }, Pos::new(10, 10, 10));
        assert_eq!(v.len(), BALL[r as usize], "r={r}");
        assert_eq!(v.len(), ball_by_chords(r as i64), "r={r}");
        assert_eq!(extent(&v), [2 * r as i32 + 1; 3]);
    }
}

#[test]
fn every_kind_matches_closed_form_at_three_sizes() {
    let c = Pos::new(10, 10, 10);
    for a in [1u32, 2, 4] {
        let ai = a as usize;
        let cases: Vec<(Shape, usize, [i32; 3])> = vec![
            (Shape::Cube { side: a }, ai.pow(3), [a as i32; 3]),
            (Shape::Rectanguloid { width: a, height: a + 1, length: a + 2 }, ai * (ai + 1) * (ai + 2), [a as i32, a as i32 + 1, a as i32 + 2]),
            (Shape::Sphere { radius: a }, BALL[ai], [2 * a as i32 + 1; 3]),
            (Shape::Pyramid { height: a }, ai * (2 * ai - 1) * (2 * ai + 1) / 3, [2 * a as i32 - 1, a as i32, 2 * a as i32 - 1]),
            (Shape::Square { side: a }, ai * ai, [a as i32, a as i32, 1]),
            (Shape::Rectangle { width: a + 1, height: a }, (ai + 1) * ai, [a as i32 + 1, a as i32, 1]),
            (Shape::Circle { radius: a }, DISK[ai], [2 * a as i32 + 1, 2 * a as i32 + 1, 1]),
            (Shape::Triangle { height: a }, ai * ai, [2 * a as i32 - 1, a as i32, 1]),
            (Shape::Dome { radius: a }, (BALL[ai] + DISK[ai]) / 2, [2 * a as i32 + 1, a as i32 + 1, 2 * a as i32 + 1]),
            (Shape::Arch { half_span: a }, 4 * ai + 3, [2 * a as i32 + 1, a as i32 + 2, 1]),
        ];
        let kinds: BTreeSet<ShapeKind> = cases.iter().map(|(s, _, _)| s.kind()).collect();
        assert_eq!(kinds.len(), ShapeKind::ALL.len());
        for (shape, count, ext) in cases {
            let v = shape_voxels(&shape, c);
            assert_eq!(v.len(), count, "{shape:?}");
            assert_eq!(extent(&v), ext, "{shape:?}");
            assert!(connected(&v), "{shape:?}");
            let unique: BTreeSet<Pos> = v.iter().copied().collect();
            assert_eq!(unique.len(), v.len(), "{shape:?}");
        }
    }
}

#[test]
fn unit_sphere_is_seven_voxels() {
    let c = Pos::new(3, 3, 3);
    let v = shape_voxels(&Shape::Sphere { radius: 1 }, c);
    let expected: BTreeSet<Pos> = [(0, 0, 0), (1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
        .into_iter()
        .map(|(x, y, z)| c.offset(x, y, z))
        .collect();
    assert_eq!(v.into_iter().collect::<BTreeSet<_>>(), expected);
}

#[test]
fn backprop_matches_finite_differences() {
    let dims = Dims::new(6, 6, 6);
    let (grid, cube, column) = small_scene(dims);
    let config = SegConfig { hidden: 4, layers: 2, hash_dim: 16, ..SegConfig::default() };
    let model = SegModel::init(config, 11);
    let enc = model.encode(&grid).unwrap();
    let targets: Vec<Target> = vec![
        target(&enc, "the red cube", &cube, 16),
        target(&enc, "blue column", &column, 16),
        target(&enc, "green sphere", &[], 16),
    ];
    let worst = max_gradient_error(&model, &grid, &targets, 1e-6);
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn three_layer_gradient_also_checks() {
    let dims = Dims::new(5, 4, 5);
    let (grid, cube, _) = small_scene(dims);
    let config = SegConfig { hidden: 3, layers: 3, hash_dim: 8, ..SegConfig::default() };
    let model = SegModel::init(config, 5);
    let enc = model.encode(&grid).unwrap();
    let targets = vec![target(&enc, "red cube", &cube, 8)];
    // Gradients reaching the first layer through two others are ~1e-6, where
    // central-difference cancellation noise is ~1e-10.
    let worst = max_gradient_error(&model, &grid, &targets, 1e-5);
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

#[test]
fn restricted_rows_do_not_change_the_loss_per_row() {
    let dims = Dims::new(6, 6, 6);
    let (grid, cube, _) = small_scene(dims);
    let model = SegModel::init(SegConfig { hidden: 5, hash_dim: 16, ..SegConfig::default() }, 2);
    let geom = Geometry::new(dims);
    let enc = model.encode(&grid).unwrap();
    let full = target(&enc, "red cube", &cube, 16);
    let total = model.loss_and_grad(&geom, &enc, &enc.solid, std::slice::from_ref(&full), 10.0, 1.0, None);
    let mut parts = 0.0;
    for (k, &row) in enc.solid.iter().enumerate() {
        let t = Target { bag: full.bag.clone(), y: vec![full.y[k]] };
        parts += model.loss_and_grad(&geom, &enc, &[row], &[t], 10.0, 1.0, None);
    }
    assert!((total - parts).abs() < 1e-9 * total.abs().max(1.0));
}

#[test]
fn single_example_overfits_to_perfect_iou() {
    let dims = Dims::new(8, 8, 8);
    let (grid, cube, _) = small_scene(dims);
    let truth: SegMask = cube.iter().copied().collect();
    let ex = VisionExample { grid: grid.clone(), text: "red cube".into(), mask: truth.clone(), tranche_id: 0 };
    let model = SegModel::init(SegConfig::default(), 1);
    let config = TrainConfig { epochs: 2000, lr: 0.01, optimizer: Optimizer::Adam { batch_scenes: 1 }, augment: false, ..TrainConfig::default() };
    let (model, report) = train_seg(model, &[ex], &config);
    assert_eq!(report.losses.len(), 2000);
    let predicted = model.predict_mask(&grid, "red cube").unwrap();
    assert_eq!(iou(&predicted, &truth), 1.0);
}

#[test]
fn gradient_descent_never_raises_the_loss() {
    let dims = Dims::new(6, 5, 6);
    let (grid, cube, column) = small_scene(dims);
    let exs = vec![
        VisionExample { grid: grid.clone(), text: "red cube".into(), mask: cube.iter().copied().collect(), tranche_id: 0 },
        VisionExample { grid: grid.clone(), text: "blue column".into(), mask: column.iter().copied().collect(), tranche_id: 0 },
    ];
    let model = SegModel::init(SegConfig { hidden: 6, ..SegConfig::default() }, 9);
    let config = TrainConfig { epochs: 40, lr: 0.5, optimizer: Optimizer::Gd, augment: false, ..TrainConfig::default() };
    let (_, report) = train_seg(model, &exs, &config);
    assert!(!report.losses.is_empty());
    for w in report.losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-9, "{w:?}");
    }
}

#[test]
fn training_on_nothing_is_identity() {
    let model = SegModel::init(SegConfig::default(), 4);
    let (after, report) = train_seg(model.clone(), &[], &TrainConfig::default());
    assert_eq!(after, model);
    assert!(report.losses.is_empty());
}
