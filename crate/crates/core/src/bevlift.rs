//! Lifting per-pixel features into a voxel grid around the robot, pillar reduction to a BEV map,
//! and odometry-warped temporal stacking.
//!
//! Grid frame: x forward, y left, z up, robot base at the horizontal center. Cell `(ix, iy)`
//! covers `x ∈ [ix·Vx − Nx·Vx/2, (ix+1)·Vx − Nx·Vx/2)`, likewise for y; z starts at `z_min`.

use crate::geom::{Intrinsics, PoseSE2, PoseSE3};
use crate::simworld::DepthImage;
use nalgebra::Vector3;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BevError {
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub voxel: [f64; 3],
    pub extent: [f64; 3],
    /// Height of the bottom face of the grid relative to the robot base.
    pub z_min: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { voxel: [0.3, 0.3, 3.0], extent: [32.0, 32.0, 16.0], z_min: -2.0 }
    }
}

impl GridSpec {
    pub fn cells(&self) -> [usize; 3] {
        // the epsilon keeps exact multiples (e.g. 0.9 / 0.3) from flooring one short
        std::array::from_fn(|i| (self.extent[i] / self.voxel[i] + 1e-9).floor() as usize)
    }

    pub fn n_voxels(&self) -> usize {
        let [nx, ny, nz] = self.cells();
        nx * ny * nz
    }

    pub fn half_extent(&self) -> [f64; 2] {
        let [nx, ny, _] = self.cells();
        [nx as f64 * self.voxel[0] / 2.0, ny as f64 * self.voxel[1] / 2.0]
    }

    /// Voxel containing a grid-frame point, `None` outside.
    pub fn voxel_index(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let [nx, ny, nz] = self.cells();
        let [hx, hy] = self.half_extent();
        let fx = ((p.x + hx) / self.voxel[0]).floor();
        let fy = ((p.y + hy) / self.voxel[1]).floor();
        let fz = ((p.z - self.z_min) / self.voxel[2]).floor();
        if !(fx >= 0.0 && fy >= 0.0 && fz >= 0.0) || fx >= nx as f64 || fy >= ny as f64 || fz >= nz as f64 {
            return None;
        }
        Some([fx as usize, fy as usize, fz as usize])
    }

    /// Pillar-major flat index: voxels of one (ix, iy) pillar are contiguous.
    pub fn flat(&self, [ix, iy, iz]: [usize; 3]) -> usize {
        let [_, ny, nz] = self.cells();
        (ix * ny + iy) * nz + iz
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> [f64; 2] {
        let [hx, hy] = self.half_extent();
        [(ix as f64 + 0.5) * self.voxel[0] - hx, (iy as f64 + 0.5) * self.voxel[1] - hy]
    }
}

/// Dense H×W×C feature image, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureImage {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn pixel(&self, u: usize, v: usize) -> &[f64] {
        let i = (v * self.width + u) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, u: usize, v: usize) -> &mut [f64] {
        let i = (v * self.width + u) * self.channels;
        &mut self.data[i..i + self.channels]
    }
}

/// Voxel accumulator. Keeps the raw deposit list (for the segment reduction) alongside dense sums.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume {
    pub spec: GridSpec,
    pub channels: usize,
    pub sum: Vec<f64>,
    pub count: Vec<u32>,
    deposit_index: Vec<usize>,
    deposit_feat: Vec<f64>,
}

impl FeatureVolume {
    pub fn new(spec: GridSpec, channels: usize) -> Self {
        let n = spec.n_voxels();
        Self { spec, channels, sum: vec![0.0; n * channels], count: vec![0; n], deposit_index: Vec::new(), deposit_feat: Vec::new() }
    }

    pub fn deposit(&mut self, voxel: [usize; 3], feat: &[f64]) {
        assert_eq!(feat.len(), self.channels);
        let flat = self.spec.flat(voxel);
        for (s, f) in self.sum[flat * self.channels..(flat + 1) * self.channels].iter_mut().zip(feat) {
            *s += f;
        }
        self.count[flat] += 1;
        self.deposit_index.push(flat);
        self.deposit_feat.extend_from_slice(feat);
    }

    pub fn total_count(&self) -> usize {
        self.deposit_index.len()
    }
}

/// Robot-centered BEV grid, `data[(ix·ny + iy)·C + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureMap {
    pub nx: usize,
    pub ny: usize,
    pub channels: usize,
    pub cell: [f64; 2],
    pub data: Vec<f64>,
}

impl BevFeatureMap {
    pub fn zeros(nx: usize, ny: usize, channels: usize, cell: [f64; 2]) -> Self {
        Self { nx, ny, channels, cell, data: vec![0.0; nx * ny * channels] }
    }

    pub fn for_spec(spec: &GridSpec, channels: usize) -> Self {
        let [nx, ny, _] = spec.cells();
        Self::zeros(nx, ny, channels, [spec.voxel[0], spec.voxel[1]])
    }

    pub fn at(&self, ix: usize, iy: usize) -> &[f64] {
        let i = (ix * self.ny + iy) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn at_mut(&mut self, ix: usize, iy: usize) -> &mut [f64] {
        let i = (ix * self.ny + iy) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    fn index_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let fx = ((x + self.nx as f64 * self.cell[0] / 2.0) / self.cell[0]).floor();
        let fy = ((y + self.ny as f64 * self.cell[1] / 2.0) / self.cell[1]).floor();
        if fx >= 0.0 && fy >= 0.0 && fx < self.nx as f64 && fy < self.ny as f64 {
            Some((fx as usize, fy as usize))
        } else {
            None
        }
    }

    fn center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            (ix as f64 + 0.5) * self.cell[0] - self.nx as f64 * self.cell[0] / 2.0,
            (iy as f64 + 0.5) * self.cell[1] - self.ny as f64 * self.cell[1] / 2.0,
        ]
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

/// Deposit every valid-depth pixel's feature into the voxel holding `T_grid_cam · Π⁻¹(u, v, z)`.
///
/// `depth` and `k` must describe the feature image's pixel lattice (stride already applied).
pub fn lift_frame(
    depth: &DepthImage,
    k: &Intrinsics,
    feat: &FeatureImage,
    t_grid_cam: &PoseSE3,
    spec: &GridSpec,
) -> Result<FeatureVolume, BevError> {
    let (w, h) = (depth.width as usize, depth.height as usize);
    if (w, h) != (feat.width, feat.height) || (k.width as usize, k.height as usize) != (w, h) {
        return Err(BevError::Shape(format!(
            "depth {}x{}, features {}x{}, intrinsics {}x{}",
            w, h, feat.width, feat.height, k.width, k.height
        )));
    }
    let mut vol = FeatureVolume::new(*spec, feat.channels);
    for v in 0..h {
        for u in 0..w {
            let d = depth.get(u as u32, v as u32) as f64;
            if !(d > 0.0 && d.is_finite()) {
                continue;
            }
            let Ok(p_cam) = k.unproject(u as f64, v as f64, d) else { continue };
            let p = t_grid_cam.transform_point(&p_cam);
            if let Some(vox) = spec.voxel_index(&p) {
                vol.deposit(vox, feat.pixel(u, v));
            }
        }
    }
    Ok(vol)
}

/// Per-voxel mean by prefix sums over deposits sorted by voxel, then channelwise pillar max.
pub fn reduce_volume(vol: &FeatureVolume) -> BevFeatureMap {
    let c = vol.channels;
    let [nx, ny, nz] = vol.spec.cells();
    let mut order: Vec<usize> = (0..vol.deposit_index.len()).collect();
    order.sort_by_key(|&i| vol.deposit_index[i]);

    // prefix[j] = sum of the first j sorted deposits
    let n = order.len();
    let mut prefix = vec![0.0; (n + 1) * c];
    for (j, &i) in order.iter().enumerate() {
        for ch in 0..c {
            prefix[(j + 1) * c + ch] = prefix[j * c + ch] + vol.deposit_feat[i * c + ch];
        }
    }

    let mut mean = vec![0.0; nx * ny * nz * c];
    let mut start = 0;
    while start < n {
        let idx = vol.deposit_index[order[start]];
        let mut end = start + 1;
        while end < n && vol.deposit_index[order[end]] == idx {
            end += 1;
        }
        let cnt = (end - start) as f64;
        for ch in 0..c {
            mean[idx * c + ch] = (prefix[end * c + ch] - prefix[start * c + ch]) / cnt;
        }
        start = end;
    }

    let mut bev = BevFeatureMap::for_spec(&vol.spec, c);
    for ix in 0..nx {
        for iy in 0..ny {
            let base = (ix * ny + iy) * nz;
            let out = bev.at_mut(ix, iy);
            for ch in 0..c {
                out[ch] = (0..nz).map(|iz| mean[(base + iz) * c + ch]).fold(f64::NEG_INFINITY, f64::max);
            }
        }
    }
    bev
}

/// Resample `bev`, expressed in frame k, into the reference frame given `T_odom = ref⁻¹ ∘ pose_k`.
pub fn warp_bev(bev: &BevFeatureMap, t_odom: &PoseSE3) -> BevFeatureMap {
    warp_bev_se2(bev, &t_odom.to_se2())
}

pub fn warp_bev_se2(bev: &BevFeatureMap, t_odom: &PoseSE2) -> BevFeatureMap {
    if *t_odom == PoseSE2::identity() {
        return bev.clone();
    }
    let inv = t_odom.inverse();
    let mut out = BevFeatureMap::zeros(bev.nx, bev.ny, bev.channels, bev.cell);
    for ix in 0..bev.nx {
        for iy in 0..bev.ny {
            let [x, y] = bev.center(ix, iy);
            let src = inv.transform_point(nalgebra::Vector2::new(x, y));
            if let Some((sx, sy)) = bev.index_of(src.x, src.y) {
                out.at_mut(ix, iy).copy_from_slice(bev.at(sx, sy));
            }
        }
    }
    out
}

/// Channelwise concatenation of each map warped into the reference frame, in time order.
pub fn aggregate_temporal(bevs: &[BevFeatureMap], odoms: &[PoseSE3]) -> Result<BevFeatureMap, BevError> {
    let se2: Vec<PoseSE2> = odoms.iter().map(|t| t.to_se2()).collect();
    aggregate_temporal_se2(bevs, &se2)
}

pub fn aggregate_temporal_se2(bevs: &[BevFeatureMap], odoms: &[PoseSE2]) -> Result<BevFeatureMap, BevError> {
    if bevs.len() != odoms.len() || bevs.is_empty() {
        return Err(BevError::Shape(format!("{} maps but {} odometry poses", bevs.len(), odoms.len())));
    }
    let first = &bevs[0];
    if bevs.iter().any(|b| b.nx != first.nx || b.ny != first.ny || b.channels != first.channels) {
        return Err(BevError::Shape("maps in a batch must share grid and channel count".into()));
    }
    let c = first.channels;
    let b = bevs.len();
    let mut out = BevFeatureMap::zeros(first.nx, first.ny, c * b, first.cell);
    for (k, (bev, odom)) in bevs.iter().zip(odoms).enumerate() {
        let warped = warp_bev_se2(bev, odom);
        for ix in 0..first.nx {
            for iy in 0..first.ny {
                out.at_mut(ix, iy)[k * c..(k + 1) * c].copy_from_slice(warped.at(ix, iy));
            }
        }
    }
    Ok(out)
}

/// Extract ground features, lift the (strided) depth with them and reduce to one frame's BEV map.
pub fn frame_bev(
    frame: &crate::simworld::CameraFrame,
    extractor: &dyn crate::features::FeatureExtractor,
    t_grid_cam: &PoseSE3,
    spec: &GridSpec,
) -> Result<BevFeatureMap, BevError> {
    let stride = extractor.stride();
    let feat = extractor.extract(&frame.rgb);
    let depth = frame.depth.strided(stride as u32);
    let k = frame.intrinsics.strided(stride as u32);
    let vol = lift_frame(&depth, &k, &feat, t_grid_cam, spec)?;
    Ok(reduce_volume(&vol))
}

/// Sliding window of the last `batch` per-frame BEV maps with their odometry poses.
#[derive(Debug, Clone)]
pub struct BevHistory {
    pub batch: usize,
    frames: std::collections::VecDeque<(BevFeatureMap, PoseSE2)>,
}

impl BevHistory {
    pub fn new(batch: usize) -> Self {
        assert!(batch >= 1);
        Self { batch, frames: std::collections::VecDeque::with_capacity(batch) }
    }

    pub fn push(&mut self, bev: BevFeatureMap, odom_pose: PoseSE2) {
        if self.frames.len() == self.batch {
            self.frames.pop_front();
        }
        self.frames.push_back((bev, odom_pose));
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Stack the window relative to the newest pose; a short window repeats its earliest frame.
    pub fn aggregate(&self) -> Option<BevFeatureMap> {
        let reference = self.frames.back()?.1;
        let pad = self.batch - self.frames.len();
        let first = self.frames.front()?;
        let items: Vec<&(BevFeatureMap, PoseSE2)> = std::iter::repeat(first).take(pad).chain(self.frames.iter()).collect();
        let bevs: Vec<BevFeatureMap> = items.iter().map(|(b, _)| b.clone()).collect();
        let odoms: Vec<PoseSE2> = items.iter().map(|(_, p)| reference.between(p)).collect();
        aggregate_temporal_se2(&bevs, &odoms).ok()
    }
}
