//! Voxel-text segmentation network.
//!
//! Block ids are one-hot encoded (air included) with an extra occupancy
//! channel, then passed through `layers` 3D convolutions (kernel 5,
//! padding 2, ReLU). The text's hashed bag of tokens is projected to the
//! hidden width and L2-normalized; each voxel's probability is the sigmoid of
//! its feature vector's inner product with that text vector.
//!
//! All parameters live in one flat vector. Layer `l` stores its weights as
//! `[c_out][tap][c_in]` followed by `c_out` biases; the text projection
//! `[hidden][hash_dim]` comes last. Taps enumerate offsets `(dx, dy, dz)` in
//! `-2..=2` with `dx` slowest.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::text::bag_of_tokens;
use super::SegMask;
use crate::world::{Dims, VoxelGrid};

pub const KERNEL: usize = 5;
pub const TAPS: usize = KERNEL * KERNEL * KERNEL;
const PAD: i32 = (KERNEL as i32 - 1) / 2;
const NONE: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VisionError {
    #[error("grid dims {found:?} do not match the model's {expected:?}")]
    DimMismatch { expected: Dims, found: Dims },
    #[error("block id {0} is outside the model's input channels")]
    UnknownBlock(u8),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    pub hidden: usize,
    pub layers: usize,
    pub hash_dim: usize,
    /// Voxels with probability strictly above this are in the mask.
    pub threshold: f64,
    /// Number of block ids including air; input channels are this plus one
    /// occupancy channel.
    pub block_ids: usize,
    /// When set, inputs must have exactly these dims.
    pub dims: Option<Dims>,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig { hidden: 24, layers: 2, hash_dim: 64, threshold: 0.8, block_ids: 17, dims: None }
    }
}

impl SegConfig {
    pub fn in_channels(&self) -> usize {
        self.block_ids + 1
    }

    fn layer_io(&self, l: usize) -> (usize, usize) {
        (if l == 0 { self.in_channels() } else { self.hidden }, self.hidden)
    }

    /// (weight offset, bias offset) for each layer, and the projection offset.
    fn offsets(&self) -> (Vec<(usize, usize)>, usize) {
        let mut at = 0;
        let mut out = Vec::with_capacity(self.layers);
        for l in 0..self.layers {
            let (ci, co) = self.layer_io(l);
            out.push((at, at + co * TAPS * ci));
            at += co * TAPS * ci + co;
        }
        (out, at)
    }

    pub fn n_params(&self) -> usize {
        let (_, proj) = self.offsets();
        proj + self.hidden * self.hash_dim
    }
}

/// Per-dims neighbor table: `nbr[v * TAPS + k]` is the voxel at tap `k`
/// from `v`, or `NONE` outside the grid.
#[derive(Clone, Debug)]
pub struct Geometry {
    pub dims: Dims,
    nbr: Vec<u32>,
}

impl Geometry {
    pub fn new(dims: Dims) -> Self {
        let v = dims.volume();
        let mut nbr = vec![NONE; v * TAPS];
        for i in 0..v {
            let p = dims.pos_of(i);
            for k in 0..TAPS {
                let (dx, dy, dz) = tap_offset(k);
                let q = p.offset(dx, dy, dz);
                if dims.contains(q) {
                    nbr[i * TAPS + k] = dims.index(q) as u32;
                }
            }
        }
        Geometry { dims, nbr }
    }

    pub fn volume(&self) -> usize {
        self.dims.volume()
    }

    #[inline]
    fn taps(&self, v: usize) -> &[u32] {
        &self.nbr[v * TAPS..(v + 1) * TAPS]
    }
}

pub fn tap_offset(k: usize) -> (i32, i32, i32) {
    let n = KERNEL;
    ((k / (n * n)) as i32 - PAD, ((k / n) % n) as i32 - PAD, (k % n) as i32 - PAD)
}

/// Dense block ids of a grid plus the indices of its solid voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub dims: Dims,
    pub ids: Vec<u8>,
    pub solid: Vec<usize>,
}

impl Encoded {
    pub fn from_ids(dims: Dims, ids: Vec<u8>) -> Self {
        let solid = ids.iter().enumerate().filter(|(_, &b)| b != 0).map(|(i, _)| i).collect();
        Encoded { dims, ids, solid }
    }
}

/// What the backward pass needs from the forward pass.
struct Trace {
    /// Pre-activations per layer, `[rows][hidden]`.
    z: Vec<Vec<f64>>,
    /// Post-ReLU activations per layer.
    a: Vec<Vec<f64>>,
    /// im2col matrices of layers after the first.
    cols: Vec<Vec<f64>>,
}

/// One query against a scene: hashed text and per-row 0/1 labels.
#[derive(Clone, Debug)]
pub struct Target {
    pub bag: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegModel {
    pub config: SegConfig,
    pub theta: Vec<f64>,
}

unsafe fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Binary cross-entropy on a logit, numerically stable.
fn bce(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

impl SegModel {
    pub fn zeros(config: SegConfig) -> Self {
        let n = config.n_params();
        SegModel { config, theta: vec![0.0; n] }
    }

    /// Uniform ±1/√fan_in initialization.
    pub fn init(config: SegConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = SegModel::zeros(config);
        let (layers, proj) = model.config.offsets();
        for (l, &(w, b)) in layers.iter().enumerate() {
            let (ci, co) = model.config.layer_io(l);
            let bound = 1.0 / ((ci * TAPS) as f64).sqrt();
            for x in &mut model.theta[w..b + co] {
                *x = rng.random_range(-bound..bound);
            }
        }
        let bound = 1.0 / (model.config.hash_dim as f64).sqrt();
        for x in &mut model.theta[proj..] {
            *x = rng.random_range(-bound..bound);
        }
        model
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn encode(&self, grid: &VoxelGrid) -> Result<Encoded, VisionError> {
        let dims = grid.dims();
        if let Some(expected) = self.config.dims {
            if expected != dims {
                return Err(VisionError::DimMismatch { expected, found: dims });
            }
        }
        let mut ids = vec![0u8; dims.volume()];
        for (p, b) in grid.blocks() {
            if b.0 as usize >= self.config.block_ids {
                return Err(VisionError::UnknownBlock(b.0));
            }
            ids[dims.index(p)] = b.0;
        }
        Ok(Encoded::from_ids(dims, ids))
    }

    /// Unit text vector (zero when the text has no content tokens), with
    /// the pre-normalization vector and its norm.
    fn text_vector(&self, bag: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let (_, proj) = self.config.offsets();
        let d = self.config.hash_dim;
        let p = &self.theta[proj..];
        let t: Vec<f64> = (0..self.config.hidden)
            .map(|c| p[c * d..(c + 1) * d].iter().zip(bag).map(|(w, x)| w * x).sum())
            .collect();
        let norm = t.iter().map(|x| x * x).sum::<f64>().sqrt();
        let u = if norm > 0.0 { t.iter().map(|x| x / norm).collect() } else { vec![0.0; t.len()] };
        (u, t, norm)
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        self.text_vector(&bag_of_tokens(text, self.config.hash_dim)).0
    }

    fn first_layer(&self, geom: &Geometry, enc: &Encoded) -> Vec<f64> {
        let (ci, co) = self.config.layer_io(0);
        let (offs, _) = self.config.offsets();
        let (w, b) = offs[0];
        // Transpose to [c_in][tap][c_out] so each tap adds one contiguous row.
        let mut wt = vec![0.0; ci * TAPS * co];
        for o in 0..co {
            for k in 0..TAPS {
                for i in 0..ci {
                    wt[(i * TAPS + k) * co + o] = self.theta[w + (o * TAPS + k) * ci + i];
                }
            }
        }
        let occ = ci - 1;
        let bias = &self.theta[b..b + co];
        let v = geom.volume();
        let mut z = vec![0.0; v * co];
        for (vi, row) in z.chunks_exact_mut(co).enumerate() {
            row.copy_from_slice(bias);
            for (k, &u) in geom.taps(vi).iter().enumerate() {
                if u == NONE {
                    continue;
                }
                let id = enc.ids[u as usize] as usize;
                let base = (id * TAPS + k) * co;
                for (r, x) in row.iter_mut().zip(&wt[base..base + co]) {
                    *r += x;
                }
                if id != 0 {
                    let base = (occ * TAPS + k) * co;
                    for (r, x) in row.iter_mut().zip(&wt[base..base + co]) {
                        *r += x;
                    }
                }
            }
        }
        z
    }

    fn im2col(geom: &Geometry, a: &[f64], c_in: usize, rows: &[usize]) -> Vec<f64> {
        let j = TAPS * c_in;
        let mut col = vec![0.0; rows.len() * j];
        for (r, &v) in rows.iter().enumerate() {
            let out = &mut col[r * j..(r + 1) * j];
            for (k, &u) in geom.taps(v).iter().enumerate() {
                if u != NONE {
                    let u = u as usize;
                    out[k * c_in..(k + 1) * c_in].copy_from_slice(&a[u * c_in..(u + 1) * c_in]);
                }
            }
        }
        col
    }

    fn col2im(geom: &Geometry, dcol: &[f64], c_in: usize, rows: &[usize], da: &mut [f64]) {
        let j = TAPS * c_in;
        for (r, &v) in rows.iter().enumerate() {
            let src = &dcol[r * j..(r + 1) * j];
            for (k, &u) in geom.taps(v).iter().enumerate() {
                if u != NONE {
                    let u = u as usize;
                    for (d, s) in da[u * c_in..(u + 1) * c_in].iter_mut().zip(&src[k * c_in..(k + 1) * c_in]) {
                        *d += s;
                    }
                }
            }
        }
    }

    /// Runs every layer; the last one only at `rows`. Returns the final
    /// features `[rows][hidden]` and the trace.
    fn forward_trace(&self, geom: &Geometry, enc: &Encoded, rows: &[usize]) -> (Vec<f64>, Trace) {
        let h = self.config.hidden;
        let (offs, _) = self.config.offsets();
        let all: Vec<usize> = (0..geom.volume()).collect();
        let mut trace = Trace { z: Vec::new(), a: Vec::new(), cols: Vec::new() };
        let z1 = self.first_layer(geom, enc);
        let a1: Vec<f64> = z1.iter().map(|x| x.max(0.0)).collect();
        trace.z.push(z1);
        trace.a.push(a1);
        for (l, &(w, b)) in offs.iter().enumerate().skip(1) {
            let (ci, co) = self.config.layer_io(l);
            let out_rows: &[usize] = if l + 1 == self.config.layers { rows } else { &all };
            let col = Self::im2col(geom, &trace.a[l - 1], ci, out_rows);
            let j = TAPS * ci;
            let mut z = vec![0.0; out_rows.len() * co];
            if !out_rows.is_empty() {
                // SAFETY: slice lengths match the stated strides and sizes.
                unsafe {
                    gemm(out_rows.len(), j, co, &col, (j as isize, 1), &self.theta[w..b], (1, j as isize), 0.0, &mut z, (co as isize, 1));
                }
            }
            let bias = &self.theta[b..b + co];
            for row in z.chunks_exact_mut(co) {
                for (r, bb) in row.iter_mut().zip(bias) {
                    *r += bb;
                }
            }
            trace.a.push(z.iter().map(|x| x.max(0.0)).collect());
            trace.z.push(z);
            trace.cols.push(col);
        }
        let last = trace.a.last().expect("at least one layer");
        let feats = if self.config.layers == 1 {
            rows.iter().flat_map(|&v| last[v * h..(v + 1) * h].iter().copied()).collect()
        } else {
            last.clone()
        };
        (feats, trace)
    }

    /// Final-layer features at `rows`.
    pub fn features(&self, geom: &Geometry, enc: &Encoded, rows: &[usize]) -> Vec<f64> {
        self.forward_trace(geom, enc, rows).0
    }

    /// Probabilities for every voxel in `Dims::index` order.
    pub fn forward(&self, grid: &VoxelGrid, text: &str) -> Result<Vec<f64>, VisionError> {
        let enc = self.encode(grid)?;
        let geom = Geometry::new(enc.dims);
        let rows: Vec<usize> = (0..geom.volume()).collect();
        let feats = self.features(&geom, &enc, &rows);
        let u = self.embed_text(text);
        let h = self.config.hidden;
        Ok(feats.chunks_exact(h).map(|f| sigmoid(f.iter().zip(&u).map(|(a, b)| a * b).sum())).collect())
    }

    /// Solid voxels whose probability is strictly above the threshold, for
    /// each text.
    pub fn predict_masks(&self, grid: &VoxelGrid, texts: &[&str]) -> Result<Vec<SegMask>, VisionError> {
        let enc = self.encode(grid)?;
        let geom = Geometry::new(enc.dims);
        Ok(self.predict_encoded(&geom, &enc, texts))
    }

    pub fn predict_encoded(&self, geom: &Geometry, enc: &Encoded, texts: &[&str]) -> Vec<SegMask> {
        let feats = self.features(geom, enc, &enc.solid);
        let h = self.config.hidden;
        texts
            .iter()
            .map(|text| {
                let u = self.embed_text(text);
                enc.solid
                    .iter()
                    .zip(feats.chunks_exact(h))
                    .filter(|(_, f)| sigmoid(f.iter().zip(&u).map(|(a, b)| a * b).sum()) > self.config.threshold)
                    .map(|(&v, _)| enc.dims.pos_of(v))
                    .collect()
            })
            .collect()
    }

    pub fn predict_mask(&self, grid: &VoxelGrid, text: &str) -> Result<SegMask, VisionError> {
        Ok(self.predict_masks(grid, &[text])?.remove(0))
    }

    /// Weighted BCE over `rows` for every target, times `scale`. When
    /// `grad` is given, the gradient of the returned value is added to it.
    pub fn loss_and_grad(
        &self,
        geom: &Geometry,
        enc: &Encoded,
        rows: &[usize],
        targets: &[Target],
        pos_weight: f64,
        scale: f64,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let h = self.config.hidden;
        let (feats, trace) = self.forward_trace(geom, enc, rows);
        let n = rows.len();
        let mut loss = 0.0;
        let mut dfeat = vec![0.0; n * h];
        let mut dproj = vec![0.0; h * self.config.hash_dim];
        let want_grad = grad.is_some();
        for t in targets {
            let (u, _, norm) = self.text_vector(&t.bag);
            let mut du = vec![0.0; h];
            for (r, f) in feats.chunks_exact(h).enumerate() {
                let z: f64 = f.iter().zip(&u).map(|(a, b)| a * b).sum();
                let y = t.y[r];
                let w = if y > 0.5 { pos_weight } else { 1.0 };
                loss += scale * w * bce(z, y);
                if want_grad {
                    let dz = scale * w * (sigmoid(z) - y);
                    for c in 0..h {
                        dfeat[r * h + c] += dz * u[c];
                        du[c] += dz * f[c];
                    }
                }
            }
            if want_grad && norm > 0.0 {
                let dot: f64 = u.iter().zip(&du).map(|(a, b)| a * b).sum();
                let d = self.config.hash_dim;
                for c in 0..h {
                    let dt = (du[c] - u[c] * dot) / norm;
                    for (k, x) in t.bag.iter().enumerate() {
                        dproj[c * d + k] += dt * x;
                    }
                }
            }
        }
        if let Some(grad) = grad {
            self.backward(geom, enc, rows, &trace, dfeat, grad);
            let (_, proj) = self.config.offsets();
            for (g, d) in grad[proj..].iter_mut().zip(&dproj) {
                *g += d;
            }
        }
        loss
    }

    fn backward(&self, geom: &Geometry, enc: &Encoded, rows: &[usize], trace: &Trace, dfeat: Vec<f64>, grad: &mut [f64]) {
        let h = self.config.hidden;
        let layers = self.config.layers;
        let (offs, _) = self.config.offsets();
        let all: Vec<usize> = (0..geom.volume()).collect();
        // Gradient w.r.t. the last layer's activations, at that layer's rows.
        let mut da = if layers == 1 {
            let mut full = vec![0.0; geom.volume() * h];
            for (r, &v) in rows.iter().enumerate() {
                for c in 0..h {
                    full[v * h + c] += dfeat[r * h + c];
                }
            }
            full
        } else {
            dfeat
        };
        for l in (1..layers).rev() {
            let (ci, co) = self.config.layer_io(l);
            let (w, b) = offs[l];
            let out_rows: &[usize] = if l + 1 == layers { rows } else { &all };
            let m = out_rows.len();
            let z = &trace.z[l];
            let dz: Vec<f64> = da.iter().zip(z).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect();
            for row in dz.chunks_exact(co) {
                for (g, d) in grad[b..b + co].iter_mut().zip(row) {
                    *g += d;
                }
            }
            let j = TAPS * ci;
            let col = &trace.cols[l - 1];
            let mut dcol = vec![0.0; m * j];
            if m > 0 {
                // SAFETY: slice lengths match the stated strides and sizes.
                unsafe {
                    gemm(co, m, j, &dz, (1, co as isize), col, (j as isize, 1), 1.0, &mut grad[w..b], (j as isize, 1));
                    gemm(m, co, j, &dz, (co as isize, 1), &self.theta[w..b], (j as isize, 1), 0.0, &mut dcol, (j as isize, 1));
                }
            }
            let mut da_prev = vec![0.0; geom.volume() * ci];
            Self::col2im(geom, &dcol, ci, out_rows, &mut da_prev);
            da = da_prev;
        }
        let (ci, co) = self.config.layer_io(0);
        let (w, b) = offs[0];
        let occ = ci - 1;
        let mut gwt = vec![0.0; ci * TAPS * co];
        let z = &trace.z[0];
        for (vi, (grow, zrow)) in da.chunks_exact(co).zip(z.chunks_exact(co)).enumerate() {
            let dz: Vec<f64> = grow.iter().zip(zrow).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect();
            if dz.iter().all(|x| *x == 0.0) {
                continue;
            }
            for (g, d) in grad[b..b + co].iter_mut().zip(&dz) {
                *g += d;
            }
            for (k, &u) in geom.taps(vi).iter().enumerate() {
                if u == NONE {
                    continue;
                }
                let id = enc.ids[u as usize] as usize;
                let base = (id * TAPS + k) * co;
                for (g, d) in gwt[base..base + co].iter_mut().zip(&dz) {
                    *g += d;
                }
                if id != 0 {
                    let base = (occ * TAPS + k) * co;
                    for (g, d) in gwt[base..base + co].iter_mut().zip(&dz) {
                        *g += d;
                    }
                }
            }
        }
        for o in 0..co {
            for k in 0..TAPS {
                for i in 0..ci {
                    grad[w + (o * TAPS + k) * ci + i] += gwt[(i * TAPS + k) * co + o];
                }
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
