use super::{AerialMap, SimError};
use image::{Rgb, RgbImage};
use noise::{Fbm, MultiFractal, NoiseFn, Perlin};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;

pub const MIN_WORLD_PX: u32 = 256;

/// Knobs of the procedural generator. Distances are in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub size_px: u32,
    pub resolution: f64,
    pub n_loops: usize,
    pub trail_width_m: f64,
    /// Canopy placement attempts per square kilometer.
    pub canopy_per_km2: f64,
    pub n_shadows: usize,
    /// Fraction of shadow patches centered on a trail point.
    pub shadow_on_trail: f64,
    pub shadow_strength: f64,
    pub shadow_radius_m: (f64, f64),
    pub hill_amplitude_m: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            size_px: 512,
            resolution: 1.0,
            n_loops: 4,
            trail_width_m: 4.0,
            canopy_per_km2: 9000.0,
            n_shadows: 6,
            shadow_on_trail: 0.5,
            shadow_strength: 0.55,
            shadow_radius_m: (8.0, 18.0),
            hill_amplitude_m: 5.0,
        }
    }
}

/// Heights in meters on the aerial map pixel lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Heightfield {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl Heightfield {
    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width as usize + col]
    }

    /// Bilinear height at continuous pixel coordinates, `None` outside the lattice.
    pub fn sample(&self, col: f64, row: f64) -> Option<f64> {
        let (w, h) = (self.width as usize, self.height as usize);
        if !(col >= 0.0 && row >= 0.0 && col <= (w - 1) as f64 && row <= (h - 1) as f64) {
            return None;
        }
        let c0 = (col.floor() as usize).min(w - 2);
        let r0 = (row.floor() as usize).min(h - 2);
        let tc = col - c0 as f64;
        let tr = row - r0 as f64;
        let a = self.at(c0, r0);
        let b = self.at(c0 + 1, r0);
        let c = self.at(c0, r0 + 1);
        let d = self.at(c0 + 1, r0 + 1);
        let top = a + tc * (b - a);
        let bot = c + tc * (d - c);
        Some(top + tr * (bot - top))
    }
}

/// Trail centerline in world meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Trail {
    pub points: Vec<[f64; 2]>,
    pub closed: bool,
}

impl Trail {
    pub fn length(&self) -> f64 {
        let mut l: f64 = self.points.windows(2).map(|w| dist(w[0], w[1])).sum();
        if self.closed && self.points.len() > 1 {
            l += dist(self.points[self.points.len() - 1], self.points[0]);
        }
        l
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowPatch {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    pub angle: f64,
    pub strength: f64,
}

impl ShadowPatch {
    /// Darkening weight in [0, 1] at a world point (soft elliptical edge).
    pub fn weight(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        let u = (c * dx + s * dy) / self.semi_axes[0];
        let v = (-s * dx + c * dy) / self.semi_axes[1];
        let r = (u * u + v * v).sqrt();
        1.0 - smoothstep(0.8, 1.0, r)
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    /// Aerial view, including shadow patches.
    pub map: AerialMap,
    /// Shadow-free ground albedo on the same lattice; ground frames sample this.
    pub albedo: RgbImage,
    pub heightfield: Heightfield,
    pub trails: Vec<Trail>,
    pub shadows: Vec<ShadowPatch>,
    /// Per-pixel flag: pixel lies on a trail ribbon.
    pub trail_mask: Vec<bool>,
}

impl World {
    pub fn height_at_world(&self, x: f64, y: f64) -> Option<f64> {
        let (c, r) = self.map.world_to_pixel(x, y);
        self.heightfield.sample(c, r)
    }

    pub fn trail_pixel_fraction(&self) -> f64 {
        self.trail_mask.iter().filter(|&&m| m).count() as f64 / self.trail_mask.len() as f64
    }

    /// Whether any shadow patch darkens the aerial map at this world point.
    pub fn shadow_weight(&self, x: f64, y: f64) -> f64 {
        self.shadows.iter().map(|s| s.weight(x, y)).fold(0.0, f64::max)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]), a[2] + t * (b[2] - a[2])]
}

fn fbm(seed: u32, octaves: usize) -> Fbm<Perlin> {
    Fbm::<Perlin>::new(seed).set_octaves(octaves)
}

/// Generate a world with default knobs for the given seed, size and resolution.
pub fn generate_world(seed: u64, size_px: u32, resolution: f64) -> Result<World, SimError> {
    generate_world_with(&WorldConfig { seed, size_px, resolution, ..WorldConfig::default() })
}

pub fn generate_world_with(cfg: &WorldConfig) -> Result<World, SimError> {
    if cfg.size_px < MIN_WORLD_PX {
        return Err(SimError::Config(format!("world size {} px is below the {} px minimum", cfg.size_px, MIN_WORLD_PX)));
    }
    if !(cfg.resolution > 0.0 && cfg.resolution.is_finite()) {
        return Err(SimError::Config(format!("resolution must be positive, got {}", cfg.resolution)));
    }
    if cfg.n_loops == 0 {
        return Err(SimError::Config("at least one trail loop is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.size_px as usize;
    let res = cfg.resolution;
    let side = n as f64 * res;
    let map_geom = AerialMap {
        raster: RgbImage::new(1, 1),
        resolution: res,
        origin: [0.0, (n - 1) as f64 * res],
        north_up: true,
    };

    let moisture = fbm(rng.random(), 4);
    let soil = fbm(rng.random(), 3);
    let rock = fbm(rng.random(), 3);
    let forest = fbm(rng.random(), 3);
    let hills = fbm(rng.random(), 3);
    let cover = fbm(rng.random(), 2);
    let trail_tint = fbm(rng.random(), 2);
    let species = fbm(rng.random(), 2);
    let texture = Perlin::new(rng.random());

    let trails = make_trails(cfg, &mut rng, side);

    // distance to the nearest trail centerline, capped
    const DIST_CAP: f64 = 16.0;
    let mut trail_dist = vec![DIST_CAP; n * n];
    for trail in &trails {
        let m = trail.points.len();
        let segs = if trail.closed { m } else { m - 1 };
        for s in 0..segs {
            let a = trail.points[s];
            let b = trail.points[(s + 1) % m];
            let (ca, ra) = map_geom.world_to_pixel(a[0], a[1]);
            let (cb, rb) = map_geom.world_to_pixel(b[0], b[1]);
            let pad = DIST_CAP / res;
            let c_lo = (ca.min(cb) - pad).floor().max(0.0) as usize;
            let c_hi = ((ca.max(cb) + pad).ceil() as usize).min(n - 1);
            let r_lo = (ra.min(rb) - pad).floor().max(0.0) as usize;
            let r_hi = ((ra.max(rb) + pad).ceil() as usize).min(n - 1);
            for r in r_lo..=r_hi {
                for c in c_lo..=c_hi {
                    let (x, y) = map_geom.pixel_to_world(c as f64, r as f64);
                    let d = point_segment_distance([x, y], a, b);
                    let slot = &mut trail_dist[r * n + c];
                    if d < *slot {
                        *slot = d;
                    }
                }
            }
        }
    }
    let half_w = cfg.trail_width_m / 2.0;
    let trail_mask: Vec<bool> = trail_dist.iter().map(|&d| d <= half_w).collect();

    // canopy blobs: dome heights and per-blob tint
    let mut canopy_h = vec![0.0f64; n * n];
    let mut canopy_tint = vec![[0.0f64; 3]; n * n];
    let attempts = (cfg.canopy_per_km2 * side * side / 1.0e6).round() as usize;
    for _ in 0..attempts {
        let x = rng.random_range(0.0..side);
        let y = rng.random_range(0.0..side);
        let radius = rng.random_range(2.5..6.5);
        let height = rng.random_range(5.0..11.0);
        // species mix is regional; individual crowns jitter around it
        let conifer = [28.0, 62.0, 48.0];
        let broadleaf = [70.0, 104.0, 30.0];
        let sp = smoothstep(-0.3, 0.3, species.get([x / 60.0, y / 60.0]));
        let jitter = rng.random_range(0.9..1.1);
        let tint = mix(conifer, broadleaf, sp).map(|v| v * jitter);
        let keep: f64 = rng.random();
        let density = smoothstep(-0.25, 0.45, forest.get([x / 70.0, y / 70.0]));
        if keep > density {
            continue;
        }
        let (cc, rc) = map_geom.world_to_pixel(x, y);
        let rp = radius / res;
        let c_lo = (cc - rp).floor().max(0.0) as usize;
        let c_hi = ((cc + rp).ceil().max(0.0) as usize).min(n - 1);
        let r_lo = (rc - rp).floor().max(0.0) as usize;
        let r_hi = ((rc + rp).ceil().max(0.0) as usize).min(n - 1);
        for r in r_lo..=r_hi {
            for c in c_lo..=c_hi {
                let (px, py) = map_geom.pixel_to_world(c as f64, r as f64);
                let d = dist([px, py], [x, y]);
                if d >= radius {
                    continue;
                }
                let i = r * n + c;
                // keep trails and a 1.5 m shoulder open
                let clearance = smoothstep(half_w + 0.5, half_w + 2.5, trail_dist[i]);
                let h = height * (1.0 - (d / radius).powi(2)).sqrt() * clearance;
                if h > canopy_h[i] {
                    canopy_h[i] = h;
                    canopy_tint[i] = tint;
                }
            }
        }
    }

    let green = [92.0, 128.0, 52.0];
    let dry = [160.0, 144.0, 84.0];
    let dirt = [98.0, 74.0, 50.0];
    let stone = [132.0, 128.0, 120.0];
    let trail_col = [184.0, 160.0, 118.0];
    let heather = [128.0, 82.0, 112.0];
    let sand = [206.0, 190.0, 142.0];
    let gravel = [150.0, 150.0, 160.0];

    let mut albedo = RgbImage::new(n as u32, n as u32);
    let mut heights = vec![0.0f64; n * n];
    for r in 0..n {
        for c in 0..n {
            let (x, y) = map_geom.pixel_to_world(c as f64, r as f64);
            let i = r * n + c;
            let m = moisture.get([x / 90.0, y / 90.0]);
            let d = soil.get([x / 55.0, y / 55.0]);
            let s = rock.get([x / 35.0, y / 35.0]);
            let fine = texture.get([x / 3.0, y / 3.0]);
            let mut col = mix(green, dry, smoothstep(-0.4, 0.4, m));
            col = mix(col, dirt, 0.65 * smoothstep(0.05, 0.55, d));
            col = mix(col, stone, 0.7 * smoothstep(0.2, 0.65, s));
            let k = cover.get([x / 60.0, y / 60.0]);
            col = mix(col, heather, 0.6 * smoothstep(0.1, 0.4, k));
            col = mix(col, sand, 0.6 * smoothstep(0.1, 0.4, -k));
            let tex = 1.0 + 0.08 * fine;
            col = [col[0] * tex, col[1] * tex, col[2] * tex];
            let trail_t = 1.0 - smoothstep(half_w - 0.5, half_w + 0.5, trail_dist[i]);
            let base = mix(mix(trail_col, gravel, smoothstep(-0.3, 0.3, trail_tint.get([x / 60.0, y / 60.0]))), dirt, 0.5 * smoothstep(0.0, 0.5, d));
            let tcol = base.map(|v| v * (1.0 + 0.05 * fine));
            col = mix(col, tcol, trail_t);
            let ch = canopy_h[i];
            if ch > 0.3 {
                let shade = 0.75 + 0.35 * (ch / 11.0).min(1.0);
                let t = canopy_tint[i];
                col = [t[0] * shade, t[1] * shade, t[2] * shade];
            }
            albedo.put_pixel(c as u32, r as u32, Rgb(col.map(|v| v.round().clamp(0.0, 255.0) as u8)));
            heights[i] = cfg.hill_amplitude_m * hills.get([x / 180.0, y / 180.0]) + ch;
        }
    }

    let shadows = make_shadows(cfg, &mut rng, &trails, side);
    let mut raster = albedo.clone();
    if !shadows.is_empty() {
        for r in 0..n {
            for c in 0..n {
                let (x, y) = map_geom.pixel_to_world(c as f64, r as f64);
                let w = shadows.iter().map(|s| s.weight(x, y) * s.strength).fold(0.0, f64::max);
                if w > 0.0 {
                    let p = raster.get_pixel_mut(c as u32, r as u32);
                    for v in p.0.iter_mut() {
                        *v = ((*v as f64) * (1.0 - w)).round() as u8;
                    }
                }
            }
        }
    }

    Ok(World {
        config: cfg.clone(),
        map: AerialMap { raster, ..map_geom },
        albedo,
        heightfield: Heightfield { width: n as u32, height: n as u32, data: heights },
        trails,
        shadows,
        trail_mask,
    })
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 { (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0) } else { 0.0 };
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

/// Closed loops: perturbed ellipses with low-order radial harmonics and random orientation.
fn make_trails(cfg: &WorldConfig, rng: &mut ChaCha8Rng, side: f64) -> Vec<Trail> {
    let margin = 0.06 * side;
    (0..cfg.n_loops)
        .map(|_| {
            let cx = rng.random_range(0.42 * side..0.58 * side);
            let cy = rng.random_range(0.42 * side..0.58 * side);
            let semi_major = rng.random_range(0.28 * side..0.38 * side);
            let semi_minor = rng.random_range(0.1 * side..0.2 * side);
            let psi = rng.random_range(0.0..TAU);
            let harmonics: Vec<(f64, f64)> = (2..=4)
                .map(|k| (rng.random_range(0.0..0.2) / k as f64, rng.random_range(0.0..TAU)))
                .collect();
            let n_pts = (TAU * semi_major * 1.3).ceil() as usize;
            let points = (0..n_pts)
                .map(|i| {
                    let phi = TAU * i as f64 / n_pts as f64;
                    let mut r = 1.0;
                    for (k, (a, p)) in harmonics.iter().enumerate() {
                        r += a * ((k + 2) as f64 * phi + p).cos();
                    }
                    let (u, v) = (semi_major * r * phi.cos(), semi_minor * r * phi.sin());
                    let x = (cx + u * psi.cos() - v * psi.sin()).clamp(margin, side - margin);
                    let y = (cy + u * psi.sin() + v * psi.cos()).clamp(margin, side - margin);
                    [x, y]
                })
                .collect();
            Trail { points, closed: true }
        })
        .collect()
}

fn make_shadows(cfg: &WorldConfig, rng: &mut ChaCha8Rng, trails: &[Trail], side: f64) -> Vec<ShadowPatch> {
    (0..cfg.n_shadows)
        .map(|_| {
            let on_trail = rng.random::<f64>() < cfg.shadow_on_trail;
            let center = if on_trail {
                let t = &trails[rng.random_range(0..trails.len())];
                t.points[rng.random_range(0..t.points.len())]
            } else {
                [rng.random_range(0.0..side), rng.random_range(0.0..side)]
            };
            let a = rng.random_range(cfg.shadow_radius_m.0..cfg.shadow_radius_m.1);
            let b = a * rng.random_range(0.5..1.0);
            ShadowPatch { center, semi_axes: [a, b], angle: rng.random_range(0.0..TAU), strength: cfg.shadow_strength }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_small_worlds() {
        assert!(matches!(generate_world(1, 128, 1.0), Err(SimError::Config(_))));
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let a = generate_world(3, 256, 1.0).unwrap();
        let b = generate_world(3, 256, 1.0).unwrap();
        assert_eq!(a.map.raster.as_raw(), b.map.raster.as_raw());
        assert_eq!(a.heightfield, b.heightfield);
        let c = generate_world(4, 256, 1.0).unwrap();
        assert_ne!(a.map.raster.as_raw(), c.map.raster.as_raw());
    }

    #[test]
    fn covers_expected_extent() {
        let w = generate_world(1, 512, 1.0).unwrap();
        assert_eq!(w.map.extent_m(), (512.0, 512.0));
        assert!(w.heightfield.data.iter().all(|h| h.is_finite()));
        for t in &w.trails {
            assert!(t.points.iter().all(|p| w.map.contains_world(p[0], p[1])));
        }
    }

    #[test]
    fn shadows_only_in_aerial_raster() {
        let cfg = WorldConfig { seed: 9, size_px: 256, n_shadows: 4, shadow_on_trail: 1.0, ..WorldConfig::default() };
        let w = generate_world_with(&cfg).unwrap();
        let s = &w.shadows[0];
        let (c, r) = w.map.world_to_pixel(s.center[0], s.center[1]);
        let (c, r) = (c.round() as u32, r.round() as u32);
        let aerial = w.map.raster.get_pixel(c, r).0;
        let ground = w.albedo.get_pixel(c, r).0;
        assert!(aerial.iter().zip(ground.iter()).all(|(a, g)| a < g || *g == 0));
    }
}
