//! Hand-crafted ground and aerial descriptors, linear embedding heads, and head checkpoints.

use crate::bevlift::{BevFeatureMap, FeatureImage};
use crate::simworld::AerialMap;
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const GROUND_STRIDE: usize = 4;
pub const GROUND_CHANNELS: usize = 8;
pub const AERIAL_DIM: usize = 44;
pub const EMBED_DIM: usize = 128;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BEVLOCHD";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate embedding: pre-normalization vector has zero norm")]
    Degenerate,
    #[error("checkpoint {file}: {reason}")]
    Checkpoint { file: String, reason: String },
}

/// Backbone slot: maps an RGB image to a strided feature image.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn stride(&self) -> usize;
    fn channels(&self) -> usize;
    fn extract(&self, img: &RgbImage) -> FeatureImage;
}

/// Per 4×4 cell: mean RGB, mean gradient magnitude, 4-bin magnitude-weighted orientation histogram.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundExtractor;

impl FeatureExtractor for GroundExtractor {
    fn name(&self) -> &str {
        "handcrafted-ground-v1"
    }
    fn stride(&self) -> usize {
        GROUND_STRIDE
    }
    fn channels(&self) -> usize {
        GROUND_CHANNELS
    }
    fn extract(&self, img: &RgbImage) -> FeatureImage {
        ground_features(img.width() as usize, img.height() as usize, img.as_raw())
    }
}

pub(crate) fn gray_of(raw: &[u8], i: usize) -> f64 {
    (raw[3 * i] as f64 + raw[3 * i + 1] as f64 + raw[3 * i + 2] as f64) / (3.0 * 255.0)
}

/// Unsigned orientation in [0, π) mapped to the nearest of `bins` bin centers (bin 0 = horizontal gradient).
pub(crate) fn orientation_bin(gx: f64, gy: f64, bins: usize) -> usize {
    let theta = gy.atan2(gx).rem_euclid(PI);
    ((theta / (PI / bins as f64)).round() as usize) % bins
}

/// Validate a raw interleaved buffer before extraction.
pub fn extract_ground_features_raw(width: usize, height: usize, channels: usize, data: &[u8]) -> Result<FeatureImage, FeatureError> {
    if channels != 3 {
        return Err(FeatureError::Shape(format!("expected a 3-channel image, got {channels} channels")));
    }
    if data.len() != width * height * 3 {
        return Err(FeatureError::Shape(format!("buffer of {} bytes does not match {width}x{height}x3", data.len())));
    }
    Ok(ground_features(width, height, data))
}

pub fn extract_ground_features(img: &RgbImage) -> FeatureImage {
    GroundExtractor.extract(img)
}

fn ground_features(w: usize, h: usize, raw: &[u8]) -> FeatureImage {
    let s = GROUND_STRIDE;
    let (fw, fh) = (w / s, h / s);
    let gray: Vec<f64> = (0..w * h).map(|i| gray_of(raw, i)).collect();
    let mut out = FeatureImage::zeros(fw, fh, GROUND_CHANNELS);
    let norm = (s * s) as f64;
    for cv in 0..fh {
        for cu in 0..fw {
            let cell = out.pixel_mut(cu, cv);
            for v in cv * s..(cv + 1) * s {
                for u in cu * s..(cu + 1) * s {
                    let i = v * w + u;
                    for ch in 0..3 {
                        cell[ch] += raw[3 * i + ch] as f64 / 255.0;
                    }
                    let gx = (gray[v * w + (u + 1).min(w - 1)] - gray[v * w + u.saturating_sub(1)]) / 2.0;
                    let gy = (gray[(v + 1).min(h - 1) * w + u] - gray[v.saturating_sub(1) * w + u]) / 2.0;
                    let mag = (gx * gx + gy * gy).sqrt();
                    if mag > 0.0 {
                        cell[3] += mag;
                        cell[4 + orientation_bin(gx, gy, 4)] += mag;
                    }
                }
            }
            for x in cell.iter_mut() {
                *x /= norm;
            }
        }
    }
    out
}

/// 44-vector: 2×2 block mean RGB (12), 8-bin per-channel color histogram (24), 8-bin edge histogram (8).
pub fn extract_aerial_features(patch: &RgbImage) -> Result<Vec<f64>, FeatureError> {
    let (w, h) = patch.dimensions();
    if w != h {
        return Err(FeatureError::Shape(format!("aerial patch must be square, got {w}x{h}")));
    }
    if w < 3 {
        return Err(FeatureError::Shape(format!("aerial patch too small: {w}x{h}")));
    }
    Ok(aerial_features_raw(w as usize, patch.as_raw()))
}

pub(crate) fn aerial_features_raw(n: usize, raw: &[u8]) -> Vec<f64> {
    let mut f = vec![0.0; AERIAL_DIM];
    let half = n / 2;
    let bounds = [(0, half), (half, n)];
    for (bi, &(r0, r1)) in bounds.iter().enumerate() {
        for (bj, &(c0, c1)) in bounds.iter().enumerate() {
            let base = (bi * 2 + bj) * 3;
            for r in r0..r1 {
                for c in c0..c1 {
                    for ch in 0..3 {
                        f[base + ch] += raw[3 * (r * n + c) + ch] as f64;
                    }
                }
            }
            let cnt = ((r1 - r0) * (c1 - c0)) as f64 * 255.0;
            for ch in 0..3 {
                f[base + ch] /= cnt;
            }
        }
    }
    let total = (n * n) as f64;
    for i in 0..n * n {
        for ch in 0..3 {
            f[12 + ch * 8 + (raw[3 * i + ch] / 32) as usize] += 1.0 / total;
        }
    }
    let interior = ((n - 2) * (n - 2)) as f64;
    for r in 1..n - 1 {
        for c in 1..n - 1 {
            let gx = (gray_of(raw, r * n + c + 1) - gray_of(raw, r * n + c - 1)) / 2.0;
            let gy = (gray_of(raw, (r + 1) * n + c) - gray_of(raw, (r - 1) * n + c)) / 2.0;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag > 0.0 {
                f[36 + orientation_bin(gx, gy, 8)] += mag / interior;
            }
        }
    }
    f
}

/// Side of a coarse map cell and of a fine robot-aligned patch, in pixels.
pub const CELL_PX: u32 = 32;

/// Map-aligned cell `(cell_col, cell_row)` of side `cell_px`, `None` if it leaves the raster.
pub fn map_cell_patch(map: &AerialMap, cell_col: i64, cell_row: i64, cell_px: u32) -> Option<RgbImage> {
    let (c0, r0) = (cell_col * cell_px as i64, cell_row * cell_px as i64);
    if c0 < 0 || r0 < 0 || c0 + cell_px as i64 > map.width() as i64 || r0 + cell_px as i64 > map.height() as i64 {
        return None;
    }
    Some(image::imageops::crop_imm(&map.raster, c0 as u32, r0 as u32, cell_px, cell_px).to_image())
}

/// Aerial descriptors of every map-aligned cell, row-major over the global cell lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFeatures {
    pub cols: usize,
    pub rows: usize,
    pub cell_px: u32,
    pub feats: Vec<Vec<f64>>,
}

impl CellFeatures {
    /// Describe all whole cells of the raster; a partial border strip is ignored.
    pub fn compute(map: &AerialMap, cell_px: u32) -> Self {
        let cols = (map.width() / cell_px) as usize;
        let rows = (map.height() / cell_px) as usize;
        let mut feats = Vec::with_capacity(cols * rows);
        for r in 0..rows {
            for c in 0..cols {
                let patch = map_cell_patch(map, c as i64, r as i64, cell_px).expect("cell inside raster");
                feats.push(aerial_features_raw(cell_px as usize, patch.as_raw()));
            }
        }
        Self { cols, rows, cell_px, feats }
    }

    pub fn index(&self, col: usize, row: usize) -> usize {
        row * self.cols + col
    }

    /// Cell containing world `(x, y)`, `None` outside the lattice.
    pub fn cell_of(&self, map: &AerialMap, x: f64, y: f64) -> Option<(usize, usize)> {
        let (pc, pr) = map.world_to_pixel(x, y);
        // pixel centers sit on integer coordinates, so pixel k spans [k − 0.5, k + 0.5)
        let (c, r) = (((pc + 0.5) / self.cell_px as f64).floor(), ((pr + 0.5) / self.cell_px as f64).floor());
        if c < 0.0 || r < 0.0 || c >= self.cols as f64 || r >= self.rows as f64 {
            return None;
        }
        Some((c as usize, r as usize))
    }

    /// World position of a cell's center.
    pub fn cell_center(&self, map: &AerialMap, col: usize, row: usize) -> (f64, f64) {
        let h = self.cell_px as f64 / 2.0 - 0.5;
        map.pixel_to_world(col as f64 * self.cell_px as f64 + h, row as f64 * self.cell_px as f64 + h)
    }

    /// Top-left cell of the `n`×`n` crop around `(col, row)`: spans `[c − n/2, c + n/2 − 1]`, shifted to stay on the lattice.
    /// `None` if the lattice is smaller than the crop.
    pub fn crop_origin(&self, col: usize, row: usize, n: usize) -> Option<(usize, usize)> {
        if self.cols < n || self.rows < n {
            return None;
        }
        let c0 = (col as i64 - (n / 2) as i64).clamp(0, (self.cols - n) as i64) as usize;
        let r0 = (row as i64 - (n / 2) as i64).clamp(0, (self.rows - n) as i64) as usize;
        Some((c0, r0))
    }
}

/// Offset of patch pixel `(row, col)` from the patch center in robot coordinates `(forward, left)`.
/// Row 0 is the far-forward edge and column 0 the leftmost edge.
pub fn patch_offset(row: u32, col: u32, size_px: u32, res: f64) -> (f64, f64) {
    let h = size_px as f64 / 2.0 - 0.5;
    ((h - row as f64) * res, (h - col as f64) * res)
}

/// Square robot-aligned patch centered at world `(x, y)` for heading `yaw`, nearest-neighbor sampled.
/// `None` if any sample falls outside the raster.
pub fn robot_aligned_patch(map: &AerialMap, x: f64, y: f64, yaw: f64, size_px: u32) -> Option<RgbImage> {
    let (s, c) = yaw.sin_cos();
    let mut out = RgbImage::new(size_px, size_px);
    for r in 0..size_px {
        for col in 0..size_px {
            let (f, l) = patch_offset(r, col, size_px, map.resolution);
            let (wx, wy) = (x + f * c - l * s, y + f * s + l * c);
            let (pc, pr) = map.world_to_pixel(wx, wy);
            let (pc, pr) = (pc.round(), pr.round());
            if pc < 0.0 || pr < 0.0 || pc >= map.width() as f64 || pr >= map.height() as f64 {
                return None;
            }
            out.put_pixel(col, r, *map.raster.get_pixel(pc as u32, pr as u32));
        }
    }
    Some(out)
}

/// BEV encoder: per channel (spatial mean, spatial max), interleaved.
pub fn pool_bev(bev: &BevFeatureMap) -> Vec<f64> {
    let c = bev.channels;
    let n = (bev.nx * bev.ny) as f64;
    let mut out = vec![0.0; 2 * c];
    for ch in 0..c {
        out[2 * ch + 1] = f64::NEG_INFINITY;
    }
    for cell in bev.data.chunks_exact(c) {
        for ch in 0..c {
            out[2 * ch] += cell[ch];
            out[2 * ch + 1] = out[2 * ch + 1].max(cell[ch]);
        }
    }
    for ch in 0..c {
        out[2 * ch] /= n;
    }
    out
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    /// Normalize an arbitrary non-zero vector.
    pub fn from_raw(v: Vec<f64>) -> Result<Self, FeatureError> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(FeatureError::Degenerate);
        }
        Ok(Embedding(v.into_iter().map(|x| x / n).collect()))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn neg(&self) -> Embedding {
        Embedding(self.0.iter().map(|x| -x).collect())
    }
}

/// Dot product; equals 1 − cosine distance for unit vectors.
pub fn correlation(a: &Embedding, b: &Embedding) -> f64 {
    debug_assert_eq!(a.dim(), b.dim());
    a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum()
}

/// Linear layer `z = Wᵀf + b` followed by L2 normalization. `weights[i·D + j]` is W(i, j).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingHead {
    pub d_in: usize,
    pub d: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Cached forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct EmbedTrace {
    pub input: Vec<f64>,
    pub z_norm: f64,
    pub out: Embedding,
}

impl EmbeddingHead {
    /// Uniform in [−1/√D_in, 1/√D_in] for weights and bias.
    pub fn init(d_in: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = 1.0 / (d_in as f64).sqrt();
        let weights = (0..d_in * d).map(|_| rng.random_range(-a..=a)).collect();
        let bias = (0..d).map(|_| rng.random_range(-a..=a)).collect();
        Self { d_in, d, weights, bias }
    }

    pub fn zeros(d_in: usize, d: usize) -> Self {
        Self { d_in, d, weights: vec![0.0; d_in * d], bias: vec![0.0; d] }
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|x| x.is_finite())
    }

    pub fn linear(&self, f: &[f64]) -> Result<Vec<f64>, FeatureError> {
        if f.len() != self.d_in {
            return Err(FeatureError::Shape(format!("head expects {} inputs, got {}", self.d_in, f.len())));
        }
        let mut z = self.bias.clone();
        for (i, &fi) in f.iter().enumerate() {
            if fi == 0.0 {
                continue;
            }
            let row = &self.weights[i * self.d..(i + 1) * self.d];
            for (zj, wij) in z.iter_mut().zip(row) {
                *zj += wij * fi;
            }
        }
        Ok(z)
    }

    pub fn forward(&self, f: &[f64]) -> Result<EmbedTrace, FeatureError> {
        let z = self.linear(f)?;
        let z_norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(z_norm > 0.0 && z_norm.is_finite()) {
            return Err(FeatureError::Degenerate);
        }
        Ok(EmbedTrace { input: f.to_vec(), z_norm, out: Embedding(z.into_iter().map(|x| x / z_norm).collect()) })
    }

    /// Accumulate ∂L/∂W and ∂L/∂b into `grad` (same layout as weights, then bias) given ∂L/∂e.
    pub fn backward(&self, trace: &EmbedTrace, d_out: &[f64], grad: &mut [f64]) {
        let e = &trace.out.0;
        let proj: f64 = e.iter().zip(d_out).map(|(a, b)| a * b).sum();
        // ∂L/∂z = (I − e eᵀ) ∂L/∂e / ‖z‖
        let gz: Vec<f64> = e.iter().zip(d_out).map(|(ej, gj)| (gj - ej * proj) / trace.z_norm).collect();
        let (gw, gb) = grad.split_at_mut(self.weights.len());
        for (i, &fi) in trace.input.iter().enumerate() {
            if fi == 0.0 {
                continue;
            }
            for (g, gzj) in gw[i * self.d..(i + 1) * self.d].iter_mut().zip(&gz) {
                *g += fi * gzj;
            }
        }
        for (g, gzj) in gb.iter_mut().zip(&gz) {
            *g += gzj;
        }
    }

    pub fn apply_step(&mut self, grad: &[f64], lr: f64) {
        let (gw, gb) = grad.split_at(self.weights.len());
        for (w, g) in self.weights.iter_mut().zip(gw) {
            *w -= lr * g;
        }
        for (b, g) in self.bias.iter_mut().zip(gb) {
            *b -= lr * g;
        }
    }

    pub fn params(&self) -> Vec<f64> {
        self.weights.iter().chain(&self.bias).copied().collect()
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let nw = self.weights.len();
        self.weights.copy_from_slice(&p[..nw]);
        self.bias.copy_from_slice(&p[nw..]);
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.d_in as u32).to_le_bytes())?;
        w.write_all(&(self.d as u32).to_le_bytes())?;
        for x in self.weights.iter().chain(&self.bias) {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, String> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| format!("truncated header: {e}"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let mut u = [0u8; 4];
        r.read_exact(&mut u).map_err(|e| e.to_string())?;
        let d_in = u32::from_le_bytes(u) as usize;
        r.read_exact(&mut u).map_err(|e| e.to_string())?;
        let d = u32::from_le_bytes(u) as usize;
        if d_in == 0 || d == 0 || d_in * d > 1 << 28 {
            return Err(format!("implausible dimensions {d_in}x{d}"));
        }
        let mut buf = vec![0u8; 8 * (d_in * d + d)];
        r.read_exact(&mut buf).map_err(|e| format!("truncated parameters: {e}"))?;
        let vals: Vec<f64> = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let head = Self { d_in, d, weights: vals[..d_in * d].to_vec(), bias: vals[d_in * d..].to_vec() };
        if !head.is_finite() {
            return Err("non-finite parameters".into());
        }
        Ok(head)
    }

    pub fn save(&self, path: &Path) -> Result<(), FeatureError> {
        let err = |e: std::io::Error| FeatureError::Checkpoint { file: path.display().to_string(), reason: e.to_string() };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(err)?);
        self.write_to(&mut f).map_err(err)?;
        f.flush().map_err(err)
    }

    pub fn load(path: &Path) -> Result<Self, FeatureError> {
        let file = path.display().to_string();
        let f = std::fs::File::open(path).map_err(|e| FeatureError::Checkpoint { file: file.clone(), reason: e.to_string() })?;
        Self::read_from(&mut std::io::BufReader::new(f)).map_err(|reason| FeatureError::Checkpoint { file, reason })
    }
}

pub fn embed(features: &[f64], head: &EmbeddingHead) -> Result<Embedding, FeatureError> {
    Ok(head.forward(features)?.out)
}

pub fn embed_ground(bev: &BevFeatureMap, head: &EmbeddingHead) -> Result<Embedding, FeatureError> {
    if bev.is_all_zero() {
        return Err(FeatureError::Degenerate);
    }
    embed(&pool_bev(bev), head)
}

/// The three heads used at inference: ground, coarse aerial and fine aerial.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads {
    pub ground: EmbeddingHead,
    pub coarse: EmbeddingHead,
    pub fine: EmbeddingHead,
}

impl Heads {
    pub fn init(ground_dim: usize, seed: u64) -> Self {
        Self {
            ground: EmbeddingHead::init(ground_dim, EMBED_DIM, seed),
            coarse: EmbeddingHead::init(AERIAL_DIM, EMBED_DIM, seed.wrapping_add(1)),
            fine: EmbeddingHead::init(AERIAL_DIM, EMBED_DIM, seed.wrapping_add(2)),
        }
    }

    pub const FILES: [&'static str; 3] = ["head_ground.bin", "head_coarse.bin", "head_fine.bin"];

    pub fn save(&self, dir: &Path) -> Result<(), FeatureError> {
        std::fs::create_dir_all(dir).map_err(|e| FeatureError::Checkpoint { file: dir.display().to_string(), reason: e.to_string() })?;
        self.ground.save(&dir.join(Self::FILES[0]))?;
        self.coarse.save(&dir.join(Self::FILES[1]))?;
        self.fine.save(&dir.join(Self::FILES[2]))
    }

    pub fn load(dir: &Path) -> Result<Self, FeatureError> {
        let heads = Self {
            ground: EmbeddingHead::load(&dir.join(Self::FILES[0]))?,
            coarse: EmbeddingHead::load(&dir.join(Self::FILES[1]))?,
            fine: EmbeddingHead::load(&dir.join(Self::FILES[2]))?,
        };
        if heads.ground.d != heads.coarse.d || heads.coarse.d != heads.fine.d {
            return Err(FeatureError::Checkpoint { file: dir.display().to_string(), reason: "heads disagree on embedding size".into() });
        }
        if heads.coarse.d_in != AERIAL_DIM || heads.fine.d_in != AERIAL_DIM {
            return Err(FeatureError::Checkpoint { file: dir.display().to_string(), reason: format!("aerial heads must take {AERIAL_DIM} inputs") });
        }
        Ok(heads)
    }
}
