use super::{SimError, Trail, World};
use crate::geom::{PoseSE2, PoseSE3};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::f64::consts::TAU;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryConfig {
    pub speed_mps: f64,
    /// Relative speed modulation amplitude.
    pub speed_jitter: f64,
    pub sigma_trans_m: f64,
    pub sigma_yaw_rad: f64,
    pub gps_sigma_m: f64,
    /// Probability that a GPS reading is flagged invalid.
    pub gps_dropout: f64,
    /// Trail to follow; `None` picks one at random.
    pub trail: Option<usize>,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            speed_mps: 5.0,
            speed_jitter: 0.15,
            sigma_trans_m: 0.05,
            sigma_yaw_rad: 0.2f64.to_radians(),
            gps_sigma_m: 1.0,
            gps_dropout: 0.0,
            trail: None,
        }
    }
}

impl TrajectoryConfig {
    pub fn noiseless() -> Self {
        Self { sigma_trans_m: 0.0, sigma_yaw_rad: 0.0, gps_sigma_m: 0.0, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsReading {
    pub x: f64,
    pub y: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    /// Robot base pose in the world frame.
    pub pose_gt: PoseSE3,
    pub gps: GpsReading,
    /// Noisy relative odometry from the previous sample (identity for the first).
    pub vo_rel: PoseSE2,
}

/// Arc-length parametrized trail centerline.
struct TrailPath<'a> {
    trail: &'a Trail,
    cum: Vec<f64>,
    total: f64,
}

impl<'a> TrailPath<'a> {
    fn new(trail: &'a Trail) -> Self {
        let pts = &trail.points;
        let mut cum = Vec::with_capacity(pts.len() + 1);
        cum.push(0.0);
        let n_seg = if trail.closed { pts.len() } else { pts.len() - 1 };
        for i in 0..n_seg {
            let a = pts[i];
            let b = pts[(i + 1) % pts.len()];
            let l = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            cum.push(cum[i] + l);
        }
        let total = *cum.last().unwrap();
        Self { trail, cum, total }
    }

    fn wrap(&self, s: f64) -> f64 {
        if self.trail.closed {
            s.rem_euclid(self.total)
        } else {
            // ping-pong along open trails
            let p = s.rem_euclid(2.0 * self.total);
            if p > self.total {
                2.0 * self.total - p
            } else {
                p
            }
        }
    }

    fn point(&self, s: f64) -> [f64; 2] {
        let s = self.wrap(s);
        let i = match self.cum.binary_search_by(|c| c.partial_cmp(&s).unwrap()) {
            Ok(i) => i.min(self.cum.len() - 2),
            Err(i) => i - 1,
        };
        let pts = &self.trail.points;
        let a = pts[i];
        let b = pts[(i + 1) % pts.len()];
        let len = self.cum[i + 1] - self.cum[i];
        let t = if len > 0.0 { (s - self.cum[i]) / len } else { 0.0 };
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    }
}

pub fn simulate_trajectory(world: &World, seed: u64, n_frames: usize, rate_hz: f64) -> Result<Vec<TrajectorySample>, SimError> {
    simulate_trajectory_with(world, seed, n_frames, rate_hz, &TrajectoryConfig::default())
}

/// Drive along a trail at roughly constant speed, emitting ground truth, noisy GPS and noisy VO.
pub fn simulate_trajectory_with(
    world: &World,
    seed: u64,
    n_frames: usize,
    rate_hz: f64,
    cfg: &TrajectoryConfig,
) -> Result<Vec<TrajectorySample>, SimError> {
    if n_frames <= 1 {
        return Err(SimError::Config(format!("trajectory needs at least 2 frames, got {n_frames}")));
    }
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(SimError::Config(format!("rate must be positive, got {rate_hz}")));
    }
    if world.trails.is_empty() {
        return Err(SimError::Config("world has no trails to follow".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trail_idx = match cfg.trail {
        Some(i) if i < world.trails.len() => i,
        Some(i) => return Err(SimError::Config(format!("trail {i} does not exist"))),
        None => rng.random_range(0..world.trails.len()),
    };
    let path = TrailPath::new(&world.trails[trail_idx]);
    let s0 = rng.random_range(0.0..path.total);
    let dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let phase = rng.random_range(0.0..TAU);
    let period = 20.0;
    let omega = TAU / period;
    let arc = |t: f64| {
        let v = cfg.speed_mps;
        s0 + dir * (v * t - v * cfg.speed_jitter / omega * ((omega * t + phase).cos() - phase.cos()))
    };

    // small positive sigma keeps Normal::new valid; zero sigma is handled by skipping the draw
    let unit = Normal::new(0.0, 1.0).unwrap();
    let draw = |sigma: f64, rng: &mut ChaCha8Rng| if sigma > 0.0 { sigma * unit.sample(rng) } else { 0.0 };

    let mut out: Vec<TrajectorySample> = Vec::with_capacity(n_frames);
    let mut prev: Option<PoseSE2> = None;
    for k in 0..n_frames {
        let t = k as f64 / rate_hz;
        let s = arc(t);
        let p = path.point(s);
        let ahead = path.point(s + 2.0 * dir);
        let behind = path.point(s - 2.0 * dir);
        let yaw = (ahead[1] - behind[1]).atan2(ahead[0] - behind[0]);
        let z = world
            .height_at_world(p[0], p[1])
            .ok_or_else(|| SimError::OutOfBounds(format!("trajectory point ({:.1}, {:.1}) left the map", p[0], p[1])))?;
        let pose2 = PoseSE2::new(p[0], p[1], yaw);
        let pose_gt = PoseSE3::from_ypr(Vector3::new(p[0], p[1], z), pose2.yaw, 0.0, 0.0);
        let vo_rel = match prev {
            None => PoseSE2::identity(),
            Some(q) => {
                let rel = q.between(&pose2);
                PoseSE2::new(
                    rel.x + draw(cfg.sigma_trans_m, &mut rng),
                    rel.y + draw(cfg.sigma_trans_m, &mut rng),
                    rel.yaw + draw(cfg.sigma_yaw_rad, &mut rng),
                )
            }
        };
        let gps = GpsReading {
            x: p[0] + draw(cfg.gps_sigma_m, &mut rng),
            y: p[1] + draw(cfg.gps_sigma_m, &mut rng),
            valid: rng.random::<f64>() >= cfg.gps_dropout,
        };
        out.push(TrajectorySample { t, pose_gt, gps, vo_rel });
        prev = Some(pose2);
    }
    Ok(out)
}

/// Dead-reckon a VO chain from an initial pose.
pub fn dead_reckon(start: PoseSE2, samples: &[TrajectorySample]) -> Vec<PoseSE2> {
    let mut cur = start;
    samples
        .iter()
        .enumerate()
        .map(|(k, s)| {
            if k > 0 {
                cur = cur.compose(&s.vo_rel);
            }
            cur
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simworld::generate_world;

    #[test]
    fn frame_count_validation() {
        let w = generate_world(1, 256, 1.0).unwrap();
        assert!(simulate_trajectory(&w, 1, 1, 10.0).is_err());
        assert!(simulate_trajectory(&w, 1, 0, 10.0).is_err());
    }

    #[test]
    fn timestamps_span() {
        let w = generate_world(1, 256, 1.0).unwrap();
        let traj = simulate_trajectory(&w, 1, 100, 10.0).unwrap();
        assert!((traj.last().unwrap().t - traj[0].t - 9.9).abs() < 1e-12);
        assert!(traj.windows(2).all(|p| p[1].t > p[0].t));
    }

    #[test]
    fn noiseless_vo_reproduces_ground_truth() {
        let w = generate_world(2, 256, 1.0).unwrap();
        let traj = simulate_trajectory_with(&w, 5, 300, 10.0, &TrajectoryConfig::noiseless()).unwrap();
        let start = traj[0].pose_gt.to_se2();
        let dr = dead_reckon(start, &traj);
        for (p, s) in dr.iter().zip(&traj) {
            let gt = s.pose_gt.to_se2();
            assert!((p.x - gt.x).abs() < 1e-9 && (p.y - gt.y).abs() < 1e-9);
            assert!(crate::geom::angle_diff(p.yaw, gt.yaw).abs() < 1e-9);
        }
    }

    #[test]
    fn yaw_is_smooth() {
        let w = generate_world(2, 512, 1.0).unwrap();
        let traj = simulate_trajectory(&w, 8, 400, 10.0).unwrap();
        for p in traj.windows(2) {
            let d = crate::geom::angle_diff(p[1].pose_gt.yaw(), p[0].pose_gt.yaw()).abs();
            assert!(d < 5f64.to_radians(), "yaw jump {d}");
        }
    }
}
