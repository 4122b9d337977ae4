//! Training loop for [`SegModel`].
//!
//! Examples that share a grid are trained together so the convolution runs
//! once per scene. The loss is positive-weighted BCE averaged over (query,
//! solid voxel) terms; air voxels are never part of a mask and are skipped.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{Encoded, Geometry, SegModel, Target};
use super::text::bag_of_tokens;
use super::VisionExample;
use crate::dsl::tokenize;
use crate::par::Exec;
use crate::world::{Dims, Palette, Pos};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    /// Full-batch gradient descent; a step that would raise the loss is
    /// retried at half the learning rate.
    Gd,
    Adam { batch_scenes: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub pos_weight: f64,
    /// Random color permutation, quarter turns about y, and x mirroring,
    /// drawn per scene per epoch.
    pub augment: bool,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            lr: 0.003,
            optimizer: Optimizer::Adam { batch_scenes: 10 },
            pos_weight: 10.0,
            augment: true,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean loss per epoch (for gradient descent, the loss after the epoch's step).
    pub losses: Vec<f64>,
}

/// Examples grouped by grid.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub enc: Encoded,
    pub queries: Vec<(String, Vec<bool>)>,
}

pub fn group_scenes(model: &SegModel, examples: &[VisionExample]) -> Vec<SceneData> {
    let mut out: Vec<SceneData> = Vec::new();
    let mut last: Option<&VisionExample> = None;
    for ex in examples {
        let Ok(enc) = model.encode(&ex.grid) else { continue };
        let mut bitmap = vec![false; enc.dims.volume()];
        for p in ex.mask.iter() {
            if enc.dims.contains(*p) {
                bitmap[enc.dims.index(*p)] = true;
            }
        }
        match (last, out.last_mut()) {
            (Some(prev), Some(scene)) if prev.grid == ex.grid => scene.queries.push((ex.text.clone(), bitmap)),
            _ => out.push(SceneData { enc, queries: vec![(ex.text.clone(), bitmap)] }),
        }
        last = Some(ex);
    }
    out
}

/// Symmetry of the xz plane plus a permutation of object colors.
struct Augment {
    quarter_turns: u8,
    mirror: bool,
    perm: Vec<u8>,
}

impl Augment {
    fn identity(n_ids: usize) -> Self {
        Augment { quarter_turns: 0, mirror: false, perm: (0..n_ids as u8).collect() }
    }

    fn random(dims: Dims, n_ids: usize, rng: &mut impl Rng) -> Self {
        let square = dims.width == dims.length;
        let quarter_turns = if square { rng.random_range(0..4) } else { 2 * rng.random_range(0..2) };
        let mirror = rng.random_bool(0.5);
        let palette = Palette::default();
        let movable: Vec<u8> = (1..n_ids as u8).filter(|&i| i != Palette::GROUND.0 && palette.color_of(crate::world::BlockId(i)).is_some()).collect();
        let mut shuffled = movable.clone();
        shuffled.shuffle(rng);
        let mut perm: Vec<u8> = (0..n_ids as u8).collect();
        for (a, b) in movable.iter().zip(&shuffled) {
            perm[*a as usize] = *b;
        }
        Augment { quarter_turns, mirror, perm }
    }

    fn map_pos(&self, dims: Dims, p: Pos) -> Pos {
        let (w, l) = (dims.width, dims.length);
        let mut q = p;
        for _ in 0..self.quarter_turns {
            // Only reached with w == l, or twice (a half turn) otherwise.
            q = if w == l { Pos::new(l - 1 - q.z, q.y, q.x) } else { q };
        }
        if self.quarter_turns == 2 && w != l {
            q = Pos::new(w - 1 - p.x, p.y, l - 1 - p.z);
        }
        if self.mirror {
            q = Pos::new(w - 1 - q.x, q.y, q.z);
        }
        q
    }

    fn map_text(&self, text: &str) -> String {
        let palette = Palette::default();
        tokenize(text)
            .into_iter()
            .map(|tok| match palette.by_color(&tok) {
                Some(id) if (id.0 as usize) < self.perm.len() => {
                    let to = crate::world::BlockId(self.perm[id.0 as usize]);
                    palette.color_of(to).unwrap_or(&tok).to_string()
                }
                _ => tok,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn apply(&self, scene: &SceneData, hash_dim: usize) -> (Encoded, Vec<Target>) {
        let dims = scene.enc.dims;
        let v = dims.volume();
        let mut index = vec![0usize; v];
        for (i, slot) in index.iter_mut().enumerate() {
            *slot = dims.index(self.map_pos(dims, dims.pos_of(i)));
        }
        let mut ids = vec![0u8; v];
        for (i, &b) in scene.enc.ids.iter().enumerate() {
            ids[index[i]] = self.perm[b as usize];
        }
        let enc = Encoded::from_ids(dims, ids);
        let targets = scene
            .queries
            .iter()
            .map(|(text, bitmap)| {
                let mut moved = vec![false; v];
                for (i, &m) in bitmap.iter().enumerate() {
                    moved[index[i]] = m;
                }
                let y = enc.solid.iter().map(|&s| if moved[s] { 1.0 } else { 0.0 }).collect();
                Target { bag: bag_of_tokens(&self.map_text(text), hash_dim), y }
            })
            .collect();
        (enc, targets)
    }
}

fn prepared(model: &SegModel, scenes: &[SceneData], augment: bool, rng: &mut impl Rng) -> Vec<(Encoded, Vec<Target>)> {
    let n_ids = model.config.block_ids;
    scenes
        .iter()
        .map(|s| {
            let aug = if augment { Augment::random(s.enc.dims, n_ids, rng) } else { Augment::identity(n_ids) };
            aug.apply(s, model.config.hash_dim)
        })
        .collect()
}

fn terms(batch: &[(Encoded, Vec<Target>)]) -> usize {
    batch.iter().map(|(e, t)| e.solid.len() * t.len()).sum()
}

/// Mean loss over `batch` and, when `with_grad`, its gradient.
fn batch_loss(model: &SegModel, geoms: &GeomCache, batch: &[(Encoded, Vec<Target>)], pos_weight: f64, exec: Exec, with_grad: bool) -> (f64, Vec<f64>) {
    let n = terms(batch).max(1);
    let scale = 1.0 / n as f64;
    let mut grad = vec![0.0; if with_grad { model.n_params() } else { 0 }];
    let mut loss = 0.0;
    // Bounded chunks keep per-scene gradient buffers from piling up.
    for chunk in batch.chunks(8) {
        let parts = exec.map(chunk, |(enc, targets)| {
            let geom = geoms.get(enc.dims);
            if with_grad {
                let mut g = vec![0.0; model.n_params()];
                let l = model.loss_and_grad(&geom, enc, &enc.solid, targets, pos_weight, scale, Some(&mut g));
                (l, g)
            } else {
                (model.loss_and_grad(&geom, enc, &enc.solid, targets, pos_weight, scale, None), Vec::new())
            }
        });
        for (l, g) in parts {
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
    }
    (loss, grad)
}

/// Geometry tables are shared by every scene of the same dims.
struct GeomCache {
    geoms: Vec<std::sync::Arc<Geometry>>,
}

impl GeomCache {
    fn new(scenes: &[SceneData]) -> Self {
        let mut geoms: Vec<std::sync::Arc<Geometry>> = Vec::new();
        for s in scenes {
            if !geoms.iter().any(|g| g.dims == s.enc.dims) {
                geoms.push(std::sync::Arc::new(Geometry::new(s.enc.dims)));
            }
        }
        GeomCache { geoms }
    }

    fn get(&self, dims: Dims) -> std::sync::Arc<Geometry> {
        self.geoms.iter().find(|g| g.dims == dims).cloned().unwrap_or_else(|| std::sync::Arc::new(Geometry::new(dims)))
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

pub fn train_seg(model: SegModel, examples: &[VisionExample], config: &TrainConfig) -> (SegModel, TrainReport) {
    let scenes = group_scenes(&model, examples);
    train_scenes(model, &scenes, config)
}

pub fn train_scenes(mut model: SegModel, scenes: &[SceneData], config: &TrainConfig) -> (SegModel, TrainReport) {
    let mut report = TrainReport::default();
    if scenes.is_empty() {
        return (model, report);
    }
    let geoms = GeomCache::new(scenes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    match config.optimizer {
        Optimizer::Gd => {
            let batch = prepared(&model, scenes, false, &mut rng);
            let mut lr = config.lr;
            let (mut loss, mut grad) = batch_loss(&model, &geoms, &batch, config.pos_weight, config.exec, true);
            for _ in 0..config.epochs {
                let mut accepted = false;
                for _ in 0..40 {
                    let mut trial = model.clone();
                    for (t, g) in trial.theta.iter_mut().zip(&grad) {
                        *t -= lr * g;
                    }
                    let (l, _) = batch_loss(&trial, &geoms, &batch, config.pos_weight, config.exec, false);
                    if l <= loss {
                        model = trial;
                        accepted = true;
                        break;
                    }
                    lr *= 0.5;
                }
                if !accepted {
                    break;
                }
                (loss, grad) = batch_loss(&model, &geoms, &batch, config.pos_weight, config.exec, true);
                report.losses.push(loss);
            }
        }
        Optimizer::Adam { batch_scenes } => {
            let mut adam = Adam::new(model.n_params());
            let mut order: Vec<usize> = (0..scenes.len()).collect();
            for _ in 0..config.epochs {
                order.shuffle(&mut rng);
                let shuffled: Vec<SceneData> = order.iter().map(|&i| scenes[i].clone()).collect();
                let data = prepared(&model, &shuffled, config.augment, &mut rng);
                let (mut total, mut count) = (0.0, 0usize);
                for batch in data.chunks(batch_scenes.max(1)) {
                    let (loss, grad) = batch_loss(&model, &geoms, batch, config.pos_weight, config.exec, true);
                    let n = terms(batch);
                    total += loss * n as f64;
                    count += n;
                    adam.step(&mut model.theta, &grad, config.lr);
                }
                report.losses.push(total / count.max(1) as f64);
            }
        }
    }
    (model, report)
}

/// Mean loss of `model` on `examples` without augmentation.
pub fn mean_loss(model: &SegModel, examples: &[VisionExample], pos_weight: f64) -> f64 {
    let scenes = group_scenes(model, examples);
    let geoms = GeomCache::new(&scenes);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = prepared(model, &scenes, false, &mut rng);
    batch_loss(model, &geoms, &batch, pos_weight, Exec::Sequential, false).0
}
