#![allow(dead_code)]

use craftloop::vision::model::{Encoded, Geometry, SegModel, Target};
use craftloop::vision::text::bag_of_tokens;
use craftloop::world::{Dims, Palette, Pos, VoxelGrid};

/// A small scene with ground, a 2x2x2 red cube and a blue column.
pub fn small_scene(dims: Dims) -> (VoxelGrid, Vec<Pos>, Vec<Pos>) {
    let mut grid = VoxelGrid::flat(dims, Palette::GROUND);
    let palette = Palette::default();
    let red = palette.by_color("red").unwrap();
    let blue = palette.by_color("blue").unwrap();
    let mut cube = Vec::new();
    for x in 1..3 {
        for y in 1..3 {
            for z in 1..3 {
                let p = Pos::new(x, y, z);
                grid.place_block(p, red).unwrap();
                cube.push(p);
            }
        }
    }
    let mut column = Vec::new();
    for y in 1..4 {
        let p = Pos::new(dims.width - 2, y, dims.length - 2);
        grid.place_block(p, blue).unwrap();
        column.push(p);
    }
    (grid, cube, column)
}

pub fn target(enc: &Encoded, text: &str, mask: &[Pos], hash_dim: usize) -> Target {
    let y = enc.solid.iter().map(|&i| if mask.contains(&enc.dims.pos_of(i)) { 1.0 } else { 0.0 }).collect();
    Target { bag: bag_of_tokens(text, hash_dim), y }
}

/// Largest relative disagreement between the analytic gradient and central
/// differences, over every parameter. Denominators are floored at `floor`.
pub fn max_gradient_error(model: &SegModel, grid: &VoxelGrid, targets: &[Target], floor: f64) -> f64 {
    let geom = Geometry::new(grid.dims());
    let enc = model.encode(grid).unwrap();
    let rows: Vec<usize> = (0..enc.dims.volume()).filter(|&i| enc.ids[i] != 0).collect();
    let mut analytic = vec![0.0; model.n_params()];
    model.loss_and_grad(&geom, &enc, &rows, targets, 3.0, 1.0, Some(&mut analytic));
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for i in 0..model.n_params() {
        let t = probe.theta[i];
        probe.theta[i] = t + h;
        let up = probe.loss_and_grad(&geom, &enc, &rows, targets, 3.0, 1.0, None);
        probe.theta[i] = t - h;
        let down = probe.loss_and_grad(&geom, &enc, &rows, targets, 3.0, 1.0, None);
        probe.theta[i] = t;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    worst
}

