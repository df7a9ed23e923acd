//! Coarse-to-fine registration against the aerial map: cell ranking, scan-matched correlation
//! volumes, top-k fusion, the multi-orientation gate and the correlation-weighted covariance.

use crate::features::{
    aerial_features_raw, correlation, embed, gray_of, orientation_bin, robot_aligned_patch, CellFeatures, Embedding, EmbeddingHead,
    FeatureError, Heads, AERIAL_DIM, CELL_PX,
};
use crate::geom::{normalize_angle, PoseSE2};
use crate::simworld::AerialMap;
use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("empty set: {0}")]
    EmptySet(&'static str),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {file}: {reason}")]
    Io { file: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatcherConfig {
    pub crop_cells: usize,
    pub top_k: usize,
    /// Scan window half-extent `G/2`, meters.
    pub scan_half_m: f64,
    pub stride_m: f64,
    pub theta_range_deg: f64,
    pub theta_step_deg: f64,
    /// Offsets at or beyond this magnitude count as gate negatives.
    pub gate_min_offset_deg: f64,
    pub gate_ratio: f64,
    pub top_share: f64,
    pub top_n: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            crop_cells: 12,
            top_k: 10,
            scan_half_m: 16.0,
            stride_m: 1.0,
            theta_range_deg: 20.0,
            theta_step_deg: 5.0,
            gate_min_offset_deg: 10.0,
            gate_ratio: 1.05,
            top_share: 0.7,
            top_n: 3,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<(), MatchError> {
        if self.crop_cells == 0 || self.top_k == 0 || self.top_n == 0 {
            return Err(MatchError::Config("crop_cells, top_k and top_n must be positive".into()));
        }
        if !(self.stride_m > 0.0 && self.scan_half_m >= 0.0 && self.theta_step_deg > 0.0 && self.theta_range_deg >= 0.0) {
            return Err(MatchError::Config("scan extents and steps must be positive".into()));
        }
        if !(self.top_share > 0.0 && self.top_share <= 1.0) || !(self.gate_ratio > 0.0) {
            return Err(MatchError::Config("top_share must lie in (0, 1] and gate_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Scan points per axis: inclusive bounds.
    pub fn scan_points(&self) -> usize {
        2 * (self.scan_half_m / self.stride_m + 1e-9).floor() as usize + 1
    }

    /// Gate offsets in degrees, symmetric around 0.
    pub fn gate_offsets_deg(&self) -> Vec<f64> {
        let m = (self.theta_range_deg / self.theta_step_deg + 1e-9).floor() as i64;
        (-m..=m).map(|k| k as f64 * self.theta_step_deg).collect()
    }
}

/// Coarse cell descriptors and their embeddings under the current coarse head.
#[derive(Debug, Clone)]
pub struct AerialIndex {
    pub map: AerialMap,
    pub cells: CellFeatures,
    pub coarse: Vec<Embedding>,
}

impl AerialIndex {
    pub fn new(map: &AerialMap, coarse_head: &EmbeddingHead) -> Result<Self, MatchError> {
        Self::from_cells(map, CellFeatures::compute(map, CELL_PX), coarse_head)
    }

    pub fn from_cells(map: &AerialMap, cells: CellFeatures, coarse_head: &EmbeddingHead) -> Result<Self, MatchError> {
        let coarse = cells.feats.iter().map(|f| embed(f, coarse_head)).collect::<Result<_, _>>()?;
        Ok(Self { map: map.clone(), cells, coarse })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedCell {
    pub col: usize,
    pub row: usize,
    pub corr: f64,
}

/// The crop's cells ranked by correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseGrid {
    /// Top-left lattice cell of the crop.
    pub origin: (usize, usize),
    pub n: usize,
    /// True if the crop had to be shifted to stay on the map.
    pub clamped: bool,
    pub ranked: Vec<RankedCell>,
}

impl CoarseGrid {
    /// 1-based rank of a lattice cell, `None` if it is outside the crop.
    pub fn rank_of(&self, cell: (usize, usize)) -> Option<usize> {
        self.ranked.iter().position(|c| (c.col, c.row) == cell).map(|p| p + 1)
    }
}

/// Rank by correlation descending; ties by squared distance (in cells) to the crop center, then row-major index.
pub fn rank_cells(origin: (usize, usize), n: usize, corr: impl Fn(usize, usize) -> f64) -> Vec<RankedCell> {
    let mut cells: Vec<(RankedCell, f64, usize)> = Vec::with_capacity(n * n);
    let mid = n as f64 / 2.0 - 0.5;
    for r in 0..n {
        for c in 0..n {
            let (col, row) = (origin.0 + c, origin.1 + r);
            let d2 = (c as f64 - mid).powi(2) + (r as f64 - mid).powi(2);
            cells.push((RankedCell { col, row, corr: corr(col, row) }, d2, r * n + c));
        }
    }
    cells.sort_by(|a, b| b.0.corr.total_cmp(&a.0.corr).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    cells.into_iter().map(|c| c.0).collect()
}

/// Embed and rank the `crop_cells`² lattice cells around world `center`.
pub fn tile_and_rank(index: &AerialIndex, center: (f64, f64), e_g: &Embedding, cfg: &MatcherConfig) -> Result<CoarseGrid, MatchError> {
    let cells = &index.cells;
    let n = cfg.crop_cells;
    if cells.cols < n || cells.rows < n {
        return Err(MatchError::OutOfBounds(format!("map lattice {}x{} is smaller than the {n}x{n} crop", cells.cols, cells.rows)));
    }
    let (pc, pr) = index.map.world_to_pixel(center.0, center.1);
    let cell = cells.cell_px as f64;
    let (cc, cr) = (((pc + 0.5) / cell).floor() as i64, ((pr + 0.5) / cell).floor() as i64);
    let (c0, r0) = (cc - (n / 2) as i64, cr - (n / 2) as i64);
    let n_i = n as i64;
    if c0 + n_i <= 0 || r0 + n_i <= 0 || c0 >= cells.cols as i64 || r0 >= cells.rows as i64 {
        return Err(MatchError::OutOfBounds(format!("crop around ({:.1}, {:.1}) lies entirely outside the map", center.0, center.1)));
    }
    let cc0 = c0.clamp(0, (cells.cols - n) as i64) as usize;
    let cr0 = r0.clamp(0, (cells.rows - n) as i64) as usize;
    let clamped = cc0 as i64 != c0 || cr0 as i64 != r0;
    let ranked = rank_cells((cc0, cr0), n, |c, r| correlation(e_g, &index.coarse[cells.index(c, r)]));
    Ok(CoarseGrid { origin: (cc0, cr0), n, clamped, ranked })
}

/// True iff the gt cell is among the first `k` ranked cells.
pub fn recall_at_k(grid: &CoarseGrid, gt_cell: (usize, usize), k: usize) -> bool {
    grid.rank_of(gt_cell).is_some_and(|r| r <= k)
}

/// Correlation values on a regular lattice; `value(ix, iy)` sits at `origin + ix·axes[0] + iy·axes[1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationVolume {
    pub origin: [f64; 2],
    pub axes: [[f64; 2]; 2],
    pub nx: usize,
    pub ny: usize,
    /// Heading of the patches, radians.
    pub theta: f64,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl CorrelationVolume {
    pub fn new(origin: [f64; 2], axes: [[f64; 2]; 2], nx: usize, ny: usize, theta: f64) -> Self {
        Self { origin, axes, nx, ny, theta, values: vec![0.0; nx * ny], valid: vec![false; nx * ny] }
    }

    /// World-aligned lattice of spacing `stride` centered at `center`.
    pub fn world_aligned(center: [f64; 2], stride: f64, n: usize, theta: f64) -> Self {
        let h = (n as f64 - 1.0) / 2.0 * stride;
        Self::new([center[0] - h, center[1] - h], [[stride, 0.0], [0.0, stride]], n, n, theta)
    }

    pub fn idx(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn position(&self, ix: usize, iy: usize) -> [f64; 2] {
        let (a, b) = (self.axes[0], self.axes[1]);
        [self.origin[0] + ix as f64 * a[0] + iy as f64 * b[0], self.origin[1] + ix as f64 * a[1] + iy as f64 * b[1]]
    }

    /// Lattice coordinates (fractional) of a world point.
    pub fn lattice_coords(&self, p: [f64; 2]) -> (f64, f64) {
        let m = Matrix2::new(self.axes[0][0], self.axes[1][0], self.axes[0][1], self.axes[1][1]);
        let inv = m.try_inverse().expect("non-degenerate lattice axes");
        let v = inv * Vector2::new(p[0] - self.origin[0], p[1] - self.origin[1]);
        (v.x, v.y)
    }

    /// Nearest valid lattice value to world point `p`, `None` outside the lattice or at an invalid cell.
    pub fn sample_nearest(&self, p: [f64; 2]) -> Option<f64> {
        let (u, v) = self.lattice_coords(p);
        let (iu, iv) = (u.round(), v.round());
        if iu < 0.0 || iv < 0.0 || iu >= self.nx as f64 || iv >= self.ny as f64 {
            return None;
        }
        let i = self.idx(iu as usize, iv as usize);
        self.valid[i].then_some(self.values[i])
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// First valid maximum in lattice order.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, (&v, &ok)) in self.values.iter().zip(&self.valid).enumerate() {
            if ok && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| (i % self.nx, i / self.nx))
    }

    /// Rows (x_m, y_m, theta_deg, corr) of every valid cell.
    pub fn csv_rows(&self) -> Vec<[f64; 4]> {
        let mut out = Vec::new();
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let i = self.idx(ix, iy);
                if self.valid[i] {
                    let p = self.position(ix, iy);
                    out.push([p[0], p[1], self.theta.to_degrees(), self.values[i]]);
                }
            }
        }
        out
    }
}

/// Write volumes as CSV (x_m, y_m, theta_deg, corr).
pub fn write_volume_csv(path: &Path, volumes: &[&CorrelationVolume]) -> Result<(), MatchError> {
    let err = |e: csv::Error| MatchError::Io { file: path.display().to_string(), reason: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["x_m", "y_m", "theta_deg", "corr"]).map_err(err)?;
    for v in volumes {
        for r in v.csv_rows() {
            w.write_record(r.iter().map(|x| x.to_string())).map_err(err)?;
        }
    }
    w.flush().map_err(|e| MatchError::Io { file: path.display().to_string(), reason: e.to_string() })
}

/// Lattice for a scan at heading `theta` around `center`: axes are the robot's forward and left directions.
pub fn scan_lattice(center: [f64; 2], theta: f64, cfg: &MatcherConfig) -> CorrelationVolume {
    let n = cfg.scan_points();
    let m = (n - 1) as f64 / 2.0;
    let (s, c) = theta.sin_cos();
    let fwd = [cfg.stride_m * c, cfg.stride_m * s];
    let left = [-cfg.stride_m * s, cfg.stride_m * c];
    let origin = [center[0] - m * (fwd[0] + left[0]), center[1] - m * (fwd[1] + left[1])];
    CorrelationVolume::new(origin, [fwd, left], n, n, theta)
}

fn patch_corr(map: &AerialMap, p: [f64; 2], theta: f64, e_g: &Embedding, head: &EmbeddingHead) -> Result<Option<f64>, MatchError> {
    match robot_aligned_patch(map, p[0], p[1], theta, CELL_PX) {
        None => Ok(None),
        Some(patch) => Ok(Some(correlation(e_g, &embed(&aerial_features_raw(CELL_PX as usize, patch.as_raw()), head)?))),
    }
}

/// Reference scan: one robot-aligned patch per lattice point.
pub fn scan_correlate_direct(
    map: &AerialMap,
    center: [f64; 2],
    e_g: &Embedding,
    theta: f64,
    head: &EmbeddingHead,
    cfg: &MatcherConfig,
) -> Result<CorrelationVolume, MatchError> {
    let mut vol = scan_lattice(center, theta, cfg);
    for iy in 0..vol.ny {
        for ix in 0..vol.nx {
            if let Some(v) = patch_corr(map, vol.position(ix, iy), theta, e_g, head)? {
                let i = vol.idx(ix, iy);
                vol.values[i] = v;
                vol.valid[i] = true;
            }
        }
    }
    Ok(vol)
}

/// Scan correlation at heading `theta` around `center`.
///
/// When the stride is a whole number of map pixels every patch is a window of one pre-rotated raster,
/// so descriptors come from summed-area tables; otherwise falls back to [`scan_correlate_direct`].
pub fn scan_correlate(
    map: &AerialMap,
    center: [f64; 2],
    e_g: &Embedding,
    theta: f64,
    head: &EmbeddingHead,
    cfg: &MatcherConfig,
) -> Result<CorrelationVolume, MatchError> {
    let ratio = cfg.stride_m / map.resolution;
    if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
        return scan_correlate_direct(map, center, e_g, theta, head, cfg);
    }
    if head.d_in != AERIAL_DIM {
        return Err(FeatureError::Shape(format!("fine head expects {} inputs, descriptors have {AERIAL_DIM}", head.d_in)).into());
    }
    let s_px = ratio.round() as usize;
    let mut vol = scan_lattice(center, theta, cfg);
    let n = vol.nx;
    let tables = RotatedTables::build(map, center, theta, n, s_px);
    let p = CELL_PX as usize;
    let mut f = vec![0.0; AERIAL_DIM];
    for iy in 0..n {
        for ix in 0..n {
            // forward offset index ix, left offset index iy; raster rows run backward, columns rightward
            let (a0, b0) = ((n - 1 - ix) * s_px, (n - 1 - iy) * s_px);
            if tables.outside.sum(a0, b0, p, p) > 0 {
                continue;
            }
            tables.descriptor(a0, b0, &mut f);
            let e = embed(&f, head)?;
            let i = vol.idx(ix, iy);
            vol.values[i] = correlation(e_g, &e);
            vol.valid[i] = true;
        }
    }
    Ok(vol)
}

/// Summed-area table over an `h`×`w` grid of integer counts.
struct Sat {
    w: usize,
    data: Vec<u32>,
}

impl Sat {
    fn new(h: usize, w: usize, value: impl Fn(usize, usize) -> u32) -> Self {
        let mut data = vec![0u32; (h + 1) * (w + 1)];
        for r in 0..h {
            let mut row = 0u32;
            for c in 0..w {
                row += value(r, c);
                data[(r + 1) * (w + 1) + c + 1] = data[r * (w + 1) + c + 1] + row;
            }
        }
        Self { w, data }
    }

    fn sum(&self, r0: usize, c0: usize, h: usize, w: usize) -> u32 {
        let s = self.w + 1;
        let (r1, c1) = (r0 + h, c0 + w);
        self.data[r1 * s + c1] + self.data[r0 * s + c0] - self.data[r0 * s + c1] - self.data[r1 * s + c0]
    }
}

/// Float summed-area table.
struct SatF {
    w: usize,
    data: Vec<f64>,
}

impl SatF {
    fn new(h: usize, w: usize, value: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; (h + 1) * (w + 1)];
        for r in 0..h {
            let mut row = 0.0;
            for c in 0..w {
                row += value(r, c);
                data[(r + 1) * (w + 1) + c + 1] = data[r * (w + 1) + c + 1] + row;
            }
        }
        Self { w, data }
    }

    fn sum(&self, r0: usize, c0: usize, h: usize, w: usize) -> f64 {
        let s = self.w + 1;
        let (r1, c1) = (r0 + h, c0 + w);
        self.data[r1 * s + c1] + self.data[r0 * s + c0] - self.data[r0 * s + c1] - self.data[r1 * s + c0]
    }
}

/// Pre-rotated raster around a scan center and the tables the descriptor needs.
struct RotatedTables {
    outside: Sat,
    rgb: [Sat; 3],
    hist: Vec<Sat>,
    edge: Vec<SatF>,
}

impl RotatedTables {
    fn build(map: &AerialMap, center: [f64; 2], theta: f64, n: usize, s_px: usize) -> Self {
        let p = CELL_PX as usize;
        let side = (n - 1) * s_px + p;
        let res = map.resolution;
        let (sn, cs) = theta.sin_cos();
        // raster (a, b) sits at forward f0 − a·res, left f0 − b·res from the center
        let f0 = ((n - 1) * s_px) as f64 / 2.0 * res + (p as f64 / 2.0 - 0.5) * res;
        let mut raw = vec![0u8; side * side * 3];
        let mut out = vec![false; side * side];
        let (w, h) = (map.width() as f64, map.height() as f64);
        for a in 0..side {
            for b in 0..side {
                let (f, l) = (f0 - a as f64 * res, f0 - b as f64 * res);
                let (wx, wy) = (center[0] + f * cs - l * sn, center[1] + f * sn + l * cs);
                let (pc, pr) = map.world_to_pixel(wx, wy);
                let (pc, pr) = (pc.round(), pr.round());
                let i = a * side + b;
                if pc < 0.0 || pr < 0.0 || pc >= w || pr >= h {
                    out[i] = true;
                } else {
                    raw[3 * i..3 * i + 3].copy_from_slice(&map.raster.get_pixel(pc as u32, pr as u32).0);
                }
            }
        }
        let outside = Sat::new(side, side, |a, b| out[a * side + b] as u32);
        let rgb = [0, 1, 2].map(|ch| Sat::new(side, side, |a, b| raw[3 * (a * side + b) + ch] as u32));
        let hist = (0..24)
            .map(|k| {
                let (ch, bin) = (k / 8, (k % 8) as u8);
                Sat::new(side, side, |a, b| (raw[3 * (a * side + b) + ch] / 32 == bin) as u32)
            })
            .collect();
        let mut mag = vec![0.0; side * side];
        let mut bin = vec![usize::MAX; side * side];
        for a in 1..side.saturating_sub(1) {
            for b in 1..side - 1 {
                let gx = (gray_of(&raw, a * side + b + 1) - gray_of(&raw, a * side + b - 1)) / 2.0;
                let gy = (gray_of(&raw, (a + 1) * side + b) - gray_of(&raw, (a - 1) * side + b)) / 2.0;
                let m = (gx * gx + gy * gy).sqrt();
                if m > 0.0 {
                    mag[a * side + b] = m;
                    bin[a * side + b] = orientation_bin(gx, gy, 8);
                }
            }
        }
        let edge = (0..8).map(|k| SatF::new(side, side, |a, b| if bin[a * side + b] == k { mag[a * side + b] } else { 0.0 })).collect();
        Self { outside, rgb, hist, edge }
    }

    /// Descriptor of the patch whose top-left raster pixel is `(a0, b0)`; matches `aerial_features_raw`.
    fn descriptor(&self, a0: usize, b0: usize, f: &mut [f64]) {
        let p = CELL_PX as usize;
        let half = p / 2;
        let bounds = [(0, half), (half, p)];
        for (bi, &(r0, r1)) in bounds.iter().enumerate() {
            for (bj, &(c0, c1)) in bounds.iter().enumerate() {
                let cnt = ((r1 - r0) * (c1 - c0)) as f64 * 255.0;
                for ch in 0..3 {
                    f[(bi * 2 + bj) * 3 + ch] = self.rgb[ch].sum(a0 + r0, b0 + c0, r1 - r0, c1 - c0) as f64 / cnt;
                }
            }
        }
        let total = (p * p) as f64;
        for (k, t) in self.hist.iter().enumerate() {
            f[12 + k] = t.sum(a0, b0, p, p) as f64 / total;
        }
        let interior = ((p - 2) * (p - 2)) as f64;
        for (k, t) in self.edge.iter().enumerate() {
            f[36 + k] = t.sum(a0 + 1, b0 + 1, p - 2, p - 2) / interior;
        }
    }
}

/// Rank weights: the first `top_n` share `top_share` equally, the rest share the remainder equally.
/// With `k ≤ top_n` every volume gets `1/k`.
pub fn fusion_weights(k: usize, top_n: usize, top_share: f64) -> Vec<f64> {
    if k <= top_n {
        return vec![1.0 / k as f64; k];
    }
    let rest = (1.0 - top_share) / (k - top_n) as f64;
    (0..k).map(|i| if i < top_n { top_share / top_n as f64 } else { rest }).collect()
}

/// Weighted sum of rank-ordered volumes on a world-aligned lattice covering the union of their footprints.
/// Each volume contributes its nearest valid lattice value; lattice points no volume covers are invalid.
pub fn fuse_topk(volumes: &[CorrelationVolume], cfg: &MatcherConfig) -> Result<CorrelationVolume, MatchError> {
    let first = volumes.first().ok_or(MatchError::EmptySet("no volumes to fuse"))?;
    let weights = fusion_weights(volumes.len(), cfg.top_n, cfg.top_share);
    let stride = first.axes[0][0].hypot(first.axes[0][1]);
    // anchor the fused lattice on the first volume's center so rank-1 keeps its own lattice when world-aligned
    let c0 = first.position(0, 0);
    let c1 = first.position(first.nx - 1, first.ny - 1);
    let anchor = [(c0[0] + c1[0]) / 2.0, (c0[1] + c1[1]) / 2.0];
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for v in volumes {
        for (ix, iy) in [(0, 0), (v.nx - 1, 0), (0, v.ny - 1), (v.nx - 1, v.ny - 1)] {
            let p = v.position(ix, iy);
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
    }
    let i_lo = [((lo[0] - anchor[0]) / stride).floor(), ((lo[1] - anchor[1]) / stride).floor()];
    let i_hi = [((hi[0] - anchor[0]) / stride).ceil(), ((hi[1] - anchor[1]) / stride).ceil()];
    let nx = (i_hi[0] - i_lo[0]) as usize + 1;
    let ny = (i_hi[1] - i_lo[1]) as usize + 1;
    let origin = [anchor[0] + i_lo[0] * stride, anchor[1] + i_lo[1] * stride];
    let mut out = CorrelationVolume::new(origin, [[stride, 0.0], [0.0, stride]], nx, ny, first.theta);
    for iy in 0..ny {
        for ix in 0..nx {
            let p = out.position(ix, iy);
            let mut acc = 0.0;
            let mut hit = false;
            for (v, w) in volumes.iter().zip(&weights) {
                if let Some(val) = v.sample_nearest(p) {
                    acc += w * val;
                    hit = true;
                }
            }
            let i = out.idx(ix, iy);
            out.values[i] = acc;
            out.valid[i] = hit;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateProfile {
    pub offsets_deg: Vec<f64>,
    /// `None` where the patch leaves the map.
    pub corr: Vec<Option<f64>>,
}

/// Gate rule on a profile: corr(0) must be positive and at least `gate_ratio` times the best
/// correlation at offsets of magnitude ≥ `gate_min_offset_deg` (floored at 0).
pub fn gate_decision(profile: &GateProfile, cfg: &MatcherConfig) -> bool {
    let Some(zero) = profile.offsets_deg.iter().position(|&o| o.abs() < 1e-9) else {
        return false;
    };
    let Some(c0) = profile.corr[zero] else {
        return false;
    };
    let off = profile
        .offsets_deg
        .iter()
        .zip(&profile.corr)
        .filter(|(o, _)| o.abs() >= cfg.gate_min_offset_deg - 1e-9)
        .filter_map(|(_, c)| *c)
        .fold(0.0f64, f64::max);
    c0 > 0.0 && c0 >= cfg.gate_ratio * off
}

/// Correlation at the candidate for each gate offset around `theta_est`.
pub fn gate_profile(map: &AerialMap, candidate: [f64; 2], e_g: &Embedding, theta_est: f64, head: &EmbeddingHead, cfg: &MatcherConfig) -> Result<GateProfile, MatchError> {
    let offsets_deg = cfg.gate_offsets_deg();
    let corr = offsets_deg
        .iter()
        .map(|o| patch_corr(map, candidate, normalize_angle(theta_est + o.to_radians()), e_g, head))
        .collect::<Result<_, _>>()?;
    Ok(GateProfile { offsets_deg, corr })
}

pub fn orientation_gate(map: &AerialMap, candidate: [f64; 2], e_g: &Embedding, theta_est: f64, head: &EmbeddingHead, cfg: &MatcherConfig) -> Result<bool, MatchError> {
    Ok(gate_decision(&gate_profile(map, candidate, e_g, theta_est, head, cfg)?, cfg))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationEstimate {
    pub mean: [f64; 2],
    pub yaw: f64,
    /// Row-major 2×2, m².
    pub cov: [[f64; 2]; 2],
    pub accepted: bool,
}

impl RegistrationEstimate {
    pub fn cov_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.cov[0][0], self.cov[0][1], self.cov[1][0], self.cov[1][1])
    }

    pub fn cov_trace(&self) -> f64 {
        self.cov[0][0] + self.cov[1][1]
    }
}

/// Min-shifted normalized weights over valid cells; uniform when all values are equal.
pub fn cell_probabilities(vol: &CorrelationVolume) -> Vec<f64> {
    let min = vol.values.iter().zip(&vol.valid).filter(|(_, &ok)| ok).map(|(&v, _)| v).fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = vol.values.iter().zip(&vol.valid).map(|(&v, &ok)| if ok { v - min } else { 0.0 }).collect();
    let total: f64 = shifted.iter().sum();
    if total > 0.0 {
        shifted.iter().map(|s| s / total).collect()
    } else {
        let n = vol.n_valid() as f64;
        vol.valid.iter().map(|&ok| if ok { 1.0 / n } else { 0.0 }).collect()
    }
}

/// Mean at the argmax cell; covariance = Σ pᵢ (xᵢ − μ)(xᵢ − μ)ᵀ over valid cells.
pub fn estimate_covariance(vol: &CorrelationVolume) -> Result<RegistrationEstimate, MatchError> {
    let (ax, ay) = vol.argmax().ok_or(MatchError::EmptySet("no valid cells in the correlation volume"))?;
    let mu = vol.position(ax, ay);
    let p = cell_probabilities(vol);
    let mut cov = [[0.0; 2]; 2];
    for iy in 0..vol.ny {
        for ix in 0..vol.nx {
            let w = p[vol.idx(ix, iy)];
            if w == 0.0 {
                continue;
            }
            let x = vol.position(ix, iy);
            let d = [x[0] - mu[0], x[1] - mu[1]];
            cov[0][0] += w * d[0] * d[0];
            cov[0][1] += w * d[0] * d[1];
            cov[1][1] += w * d[1] * d[1];
        }
    }
    cov[1][0] = cov[0][1];
    Ok(RegistrationEstimate { mean: mu, yaw: vol.theta, cov, accepted: false })
}

/// Everything `register` computed, for diagnostics.
#[derive(Debug, Clone)]
pub struct RegistrationTrace {
    pub grid: CoarseGrid,
    pub volumes: Vec<CorrelationVolume>,
    pub fused: CorrelationVolume,
    pub gate: GateProfile,
    pub estimate: RegistrationEstimate,
}

/// Rank cells around the prior, scan the top-k at the prior heading, fuse, gate and estimate Σ_r.
pub fn register(index: &AerialIndex, e_g: &Embedding, prior: &PoseSE2, heads: &Heads, cfg: &MatcherConfig) -> Result<RegistrationEstimate, MatchError> {
    Ok(register_traced(index, e_g, prior, heads, cfg)?.estimate)
}

pub fn register_traced(index: &AerialIndex, e_g: &Embedding, prior: &PoseSE2, heads: &Heads, cfg: &MatcherConfig) -> Result<RegistrationTrace, MatchError> {
    cfg.validate()?;
    let grid = tile_and_rank(index, (prior.x, prior.y), e_g, cfg)?;
    let volumes = grid
        .ranked
        .iter()
        .take(cfg.top_k)
        .map(|c| {
            let (x, y) = index.cells.cell_center(&index.map, c.col, c.row);
            scan_correlate(&index.map, [x, y], e_g, prior.yaw, &heads.fine, cfg)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let fused = fuse_topk(&volumes, cfg)?;
    let mut estimate = estimate_covariance(&fused)?;
    let gate = gate_profile(&index.map, estimate.mean, e_g, prior.yaw, &heads.fine, cfg)?;
    estimate.accepted = gate_decision(&gate, cfg);
    let best = gate
        .offsets_deg
        .iter()
        .zip(&gate.corr)
        .filter_map(|(o, c)| c.map(|c| (o, c)))
        .fold(None::<(f64, f64)>, |acc, (o, c)| if acc.is_none_or(|(_, b)| c > b) { Some((*o, c)) } else { acc });
    estimate.yaw = normalize_angle(prior.yaw + best.map_or(0.0, |b| b.0.to_radians()));
    Ok(RegistrationTrace { grid, volumes, fused, gate, estimate })
}

#[cfg(test)]
mod tests;
