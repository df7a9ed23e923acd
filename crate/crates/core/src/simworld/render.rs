use super::{sample_rgb, SimError, World};
use crate::geom::{Intrinsics, PoseSE3};
use image::{Rgb, RgbImage};
use nalgebra::Vector3;

/// Metric depth along the optical axis; 0 marks an invalid pixel (sky, out of range).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0.0; (width * height) as usize] }
    }

    pub fn get(&self, u: u32, v: u32) -> f32 {
        self.data[(v * self.width + u) as usize]
    }

    pub fn set(&mut self, u: u32, v: u32, d: f32) {
        self.data[(v * self.width + u) as usize] = d;
    }

    /// Keep pixel `(stride*i + stride/2, stride*j + stride/2)` of every block.
    pub fn strided(&self, stride: u32) -> DepthImage {
        let (w, h) = (self.width / stride, self.height / stride);
        let mut out = DepthImage::new(w, h);
        for v in 0..h {
            for u in 0..w {
                out.set(u, v, self.get(u * stride + stride / 2, v * stride + stride / 2));
            }
        }
        out
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|&&d| d > 0.0).count()
    }
}

/// One timestamped RGB-D sample from the ground camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub t: f64,
    pub rgb: RgbImage,
    pub depth: DepthImage,
    pub intrinsics: Intrinsics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderConfig {
    pub max_range_m: f64,
    pub step_m: f64,
    pub bisect_iters: usize,
    pub sky: [u8; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { max_range_m: 60.0, step_m: 0.35, bisect_iters: 12, sky: [170, 200, 235] }
    }
}

/// Raycast the heightfield from camera pose `cam` (camera-to-world, optical axes).
pub fn render_frame(world: &World, cam: &PoseSE3, k: &Intrinsics) -> Result<CameraFrame, SimError> {
    render_frame_with(world, cam, k, &RenderConfig::default())
}

pub fn render_frame_with(world: &World, cam: &PoseSE3, k: &Intrinsics, cfg: &RenderConfig) -> Result<CameraFrame, SimError> {
    let o = cam.translation;
    let map = &world.map;
    let ground = world
        .height_at_world(o.x, o.y)
        .ok_or_else(|| SimError::OutOfBounds(format!("camera at ({:.2}, {:.2}) is outside the map", o.x, o.y)))?;
    if o.z <= ground {
        return Err(SimError::OutOfBounds(format!("camera height {:.2} m is below the terrain ({:.2} m)", o.z, ground)));
    }
    let mut rgb = RgbImage::from_pixel(k.width, k.height, Rgb(cfg.sky));
    let mut depth = DepthImage::new(k.width, k.height);
    let height_at = |p: &Vector3<f64>| {
        let (c, r) = map.world_to_pixel(p.x, p.y);
        world.heightfield.sample(c, r)
    };
    for v in 0..k.height {
        for u in 0..k.width {
            let d_cam = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            let d_w = cam.rotation * d_cam;
            let dz = cfg.step_m / d_w.norm();
            let z_max = cfg.max_range_m;
            let mut z_prev = 0.0;
            let mut z = dz.min(z_max);
            let mut hit = None;
            while z <= z_max {
                let p = o + d_w * z;
                match height_at(&p) {
                    None => break,
                    Some(h) if p.z <= h => {
                        let (mut lo, mut hi) = (z_prev, z);
                        for _ in 0..cfg.bisect_iters {
                            let mid = 0.5 * (lo + hi);
                            let q = o + d_w * mid;
                            match height_at(&q) {
                                Some(hq) if q.z <= hq => hi = mid,
                                _ => lo = mid,
                            }
                        }
                        hit = Some(hi);
                        break;
                    }
                    Some(_) => {}
                }
                z_prev = z;
                z += dz;
            }
            if let Some(zh) = hit {
                let p = o + d_w * zh;
                let (c, r) = map.world_to_pixel(p.x, p.y);
                if let Some(col) = sample_rgb(&world.albedo, c, r) {
                    rgb.put_pixel(u, v, Rgb(col.map(|x| x.round().clamp(0.0, 255.0) as u8)));
                    depth.set(u, v, zh as f32);
                }
            }
        }
    }
    Ok(CameraFrame { t: 0.0, rgb, depth, intrinsics: *k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::{generate_world_with, WorldConfig};
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn flat_world() -> World {
        let cfg = WorldConfig { seed: 4, size_px: 256, hill_amplitude_m: 0.0, canopy_per_km2: 0.0, ..WorldConfig::default() };
        generate_world_with(&cfg).unwrap()
    }

    #[test]
    fn looking_down_from_ten_meters() {
        let w = flat_world();
        let k = Intrinsics::new(40.0, 40.0, 32.0, 24.0, 64, 48).unwrap();
        // optical z → world −z, optical x → world +x, optical y → world −y
        let rot = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let cam = PoseSE3::new(rot, Vector3::new(128.0, 128.0, 10.0));
        let f = render_frame(&w, &cam, &k).unwrap();
        assert!((f.depth.get(32, 24) - 10.0).abs() < 0.01);
    }

    #[test]
    fn horizontal_camera_sees_sky_above_horizon() {
        let w = flat_world();
        let k = Intrinsics::new(40.0, 40.0, 32.0, 24.0, 64, 48).unwrap();
        let cam = PoseSE3::from_se2(&crate::geom::PoseSE2::new(128.0, 128.0, 0.3), 0.0)
            .compose(&crate::geom::grid_from_ned())
            .compose(&crate::geom::forward_camera_ned(1.6, 0.0));
        let f = render_frame(&w, &cam, &k).unwrap();
        for v in 0..24 {
            for u in 0..64 {
                assert_eq!(f.depth.get(u, v), 0.0);
            }
        }
        assert!(f.depth.valid_count() > 0);
    }

    #[test]
    fn rejects_camera_outside_or_below() {
        let w = flat_world();
        let k = Intrinsics::new(40.0, 40.0, 32.0, 24.0, 64, 48).unwrap();
        let out = PoseSE3::new(Matrix3::identity(), Vector3::new(-50.0, 10.0, 5.0));
        assert!(matches!(render_frame(&w, &out, &k), Err(SimError::OutOfBounds(_))));
        let below = PoseSE3::new(Matrix3::identity(), Vector3::new(100.0, 100.0, -20.0));
        assert!(render_frame(&w, &below, &k).is_err());
    }

    #[test]
    fn color_matches_fine_step_oracle() {
        let w = crate::simworld::generate_world(5, 256, 1.0).unwrap();
        let k = Intrinsics::new(40.0, 40.0, 32.0, 24.0, 64, 48).unwrap();
        let traj = crate::simworld::simulate_trajectory(&w, 2, 10, 10.0).unwrap();
        let body = traj[5].pose_gt;
        let cam = body.compose(&crate::geom::grid_from_ned()).compose(&crate::geom::forward_camera_ned(1.6, 0.25));
        let f = render_frame(&w, &cam, &k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut checked = 0;
        while checked < 10 {
            let u = rng.random_range(0..64u32);
            let v = rng.random_range(24..48u32);
            let d = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            let dw = cam.rotation * d;
            // independent oracle: 2 cm steps, no bisection
            let mut z = 0.0;
            let mut hit = None;
            while z < 60.0 {
                z += 0.02 / dw.norm();
                let p = cam.translation + dw * z;
                let Some(h) = w.height_at_world(p.x, p.y) else { break };
                if p.z <= h {
                    hit = Some(z);
                    break;
                }
            }
            let Some(zo) = hit else { continue };
            let rendered = f.depth.get(u, v) as f64;
            // skip grazing pixels where the two marchers may pick different surfaces
            if (rendered - zo).abs() > 0.05 {
                continue;
            }
            let p = cam.translation + dw * zo;
            let (c, r) = w.map.world_to_pixel(p.x, p.y);
            let oracle = crate::simworld::sample_rgb(&w.albedo, c, r).unwrap();
            let got = f.rgb.get_pixel(u, v).0;
            for ch in 0..3 {
                assert!((got[ch] as f64 - oracle[ch]).abs() <= 3.0, "pixel ({u},{v}) ch {ch}: {} vs {}", got[ch], oracle[ch]);
            }
            checked += 1;
        }
    }

    #[test]
    fn depth_reprojects_onto_surface() {
        let w = crate::simworld::generate_world(6, 256, 1.0).unwrap();
        let k = Intrinsics::new(40.0, 40.0, 32.0, 24.0, 64, 48).unwrap();
        let traj = crate::simworld::simulate_trajectory(&w, 3, 10, 10.0).unwrap();
        let cam = traj[3].pose_gt.compose(&crate::geom::grid_from_ned()).compose(&crate::geom::forward_camera_ned(1.6, 0.25));
        let f = render_frame(&w, &cam, &k).unwrap();
        for v in 0..48 {
            for u in 0..64 {
                let d = f.depth.get(u, v) as f64;
                if d <= 0.0 {
                    continue;
                }
                let p = cam.transform_point(&k.unproject(u as f64, v as f64, d).unwrap());
                let h = w.height_at_world(p.x, p.y).unwrap();
                assert!((p.z - h).abs() < 0.3, "pixel ({u},{v}) off surface by {}", p.z - h);
            }
        }
    }
}
