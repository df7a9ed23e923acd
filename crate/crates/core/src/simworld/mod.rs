//! Procedural off-road world, ground-camera simulation and the on-disk dataset format.
//!
//! The generated [`World`] keeps two rasters: the aerial [`AerialMap`] (with
//! shadow patches) and a shadow-free albedo that ground frames are rendered
//! from, so aerial shadows never appear in the ground imagery.

mod dataset;
mod render;
mod trajectory;
mod world;

pub use dataset::{
    depth_to_mm, frame_paths, load_dataset, load_dataset_scaled, mm_to_depth, render_dataset, save_dataset, Calibration, Dataset, SimMeta,
    NED_AXES,
};
pub use render::{render_frame, CameraFrame, DepthImage, RenderConfig};
pub use trajectory::{dead_reckon, simulate_trajectory, simulate_trajectory_with, GpsReading, TrajectoryConfig, TrajectorySample};
pub use world::{generate_world, generate_world_with, Heightfield, ShadowPatch, Trail, World, WorldConfig};

use image::RgbImage;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config error: {0}")]
    Config(String),
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    #[error("format error in {file}: {reason}")]
    Format { file: String, reason: String },
    #[error("io error on {file}: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
}

impl SimError {
    pub(crate) fn format(file: impl Into<String>, reason: impl Into<String>) -> Self {
        SimError::Format { file: file.into(), reason: reason.into() }
    }
}

/// Orthorectified aerial raster with a known ground resolution.
///
/// `origin` is the world position of the center of pixel (0, 0). With
/// `north_up` the row index grows toward −y (south), otherwise toward +y.
#[derive(Debug, Clone, PartialEq)]
pub struct AerialMap {
    pub raster: RgbImage,
    pub resolution: f64,
    pub origin: [f64; 2],
    pub north_up: bool,
}

impl AerialMap {
    pub fn width(&self) -> u32 {
        self.raster.width()
    }

    pub fn height(&self) -> u32 {
        self.raster.height()
    }

    /// Continuous pixel coordinates `(col, row)` of a world point.
    pub fn world_to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let col = (x - self.origin[0]) / self.resolution;
        let row = if self.north_up {
            (self.origin[1] - y) / self.resolution
        } else {
            (y - self.origin[1]) / self.resolution
        };
        (col, row)
    }

    pub fn pixel_to_world(&self, col: f64, row: f64) -> (f64, f64) {
        let x = self.origin[0] + col * self.resolution;
        let y = if self.north_up {
            self.origin[1] - row * self.resolution
        } else {
            self.origin[1] + row * self.resolution
        };
        (x, y)
    }

    /// World-frame direction of the pixel column and row axes.
    pub fn axes(&self) -> ([f64; 2], [f64; 2]) {
        let r = self.resolution;
        if self.north_up {
            ([r, 0.0], [0.0, -r])
        } else {
            ([r, 0.0], [0.0, r])
        }
    }

    pub fn contains_pixel(&self, col: f64, row: f64) -> bool {
        col >= 0.0 && row >= 0.0 && col <= (self.width() - 1) as f64 && row <= (self.height() - 1) as f64
    }

    pub fn contains_world(&self, x: f64, y: f64) -> bool {
        let (c, r) = self.world_to_pixel(x, y);
        self.contains_pixel(c, r)
    }

    /// Bilinear RGB sample (0..255 scale) at continuous pixel coordinates.
    pub fn sample(&self, col: f64, row: f64) -> Option<[f64; 3]> {
        sample_rgb(&self.raster, col, row)
    }

    pub fn sample_world(&self, x: f64, y: f64) -> Option<[f64; 3]> {
        let (c, r) = self.world_to_pixel(x, y);
        self.sample(c, r)
    }

    /// Side length of the covered area in meters.
    pub fn extent_m(&self) -> (f64, f64) {
        (self.width() as f64 * self.resolution, self.height() as f64 * self.resolution)
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Bilinear sample of an RGB raster; `None` outside `[0, w−1] × [0, h−1]`.
pub(crate) fn sample_rgb(img: &RgbImage, col: f64, row: f64) -> Option<[f64; 3]> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if !(col >= 0.0 && row >= 0.0 && col <= (w - 1) as f64 && row <= (h - 1) as f64) {
        return None;
    }
    let c0 = (col.floor() as usize).min(w.saturating_sub(2));
    let r0 = (row.floor() as usize).min(h.saturating_sub(2));
    let tc = col - c0 as f64;
    let tr = row - r0 as f64;
    let raw = img.as_raw();
    let idx = |c: usize, r: usize| (r * w + c) * 3;
    let (c1, r1) = ((c0 + 1).min(w - 1), (r0 + 1).min(h - 1));
    let mut out = [0.0; 3];
    for (ch, o) in out.iter_mut().enumerate() {
        let p00 = raw[idx(c0, r0) + ch] as f64;
        let p10 = raw[idx(c1, r0) + ch] as f64;
        let p01 = raw[idx(c0, r1) + ch] as f64;
        let p11 = raw[idx(c1, r1) + ch] as f64;
        *o = lerp(lerp(p00, p10, tc), lerp(p01, p11, tc), tr);
    }
    Some(out)
}
