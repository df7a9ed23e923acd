//! Dataset directory layout:
//!
//! ```text
//! map.png            8-bit RGB aerial raster
//! map_meta           resolution_m_per_px, origin_x_m, origin_y_m, north_up
//! calib              fx, fy, cx, cy, width, height, T_ned_cam (12 floats, row-major [R|t])
//! sim_meta           optional: generator seed and noise parameters
//! frames/%06d_rgb.png
//! frames/%06d_depth.png   16-bit, millimeters, 0 = invalid
//! poses_gt.csv       t,x,y,z,yaw,pitch,roll
//! gps.csv            t,x,y,valid
//! vo.csv             t,dx,dy,dyaw
//! ```
//!
//! Key-value files use `key = value` lines.

use super::{AerialMap, CameraFrame, DepthImage, GpsReading, SimError, TrajectorySample};
use crate::geom::{grid_from_ned, Intrinsics, PoseSE2, PoseSE3};
use image::{imageops, ImageBuffer, Luma};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const NED_AXES: &str = "x-north y-east z-down";

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub intrinsics: Intrinsics,
    /// Camera (optical frame) pose in the NED-style body frame.
    pub t_ned_cam: PoseSE3,
}

impl Default for Calibration {
    /// 128×96 forward camera, 1.6 m above the base, pitched down 12°.
    fn default() -> Self {
        Self {
            intrinsics: Intrinsics::new(56.0, 56.0, 63.5, 47.5, 128, 96).expect("valid default intrinsics"),
            t_ned_cam: crate::geom::forward_camera_ned(1.6, 12f64.to_radians()),
        }
    }
}

impl Calibration {
    /// Camera pose in the grid/body frame (x fwd, y left, z up).
    pub fn t_body_cam(&self) -> PoseSE3 {
        grid_from_ned().compose(&self.t_ned_cam)
    }
}

/// Generator provenance, stored next to the data so noise levels are known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMeta {
    pub seed: u64,
    pub rate_hz: f64,
    pub sigma_trans_m: f64,
    pub sigma_yaw_rad: f64,
    pub gps_sigma_m: f64,
    pub speed_mps: f64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub map: AerialMap,
    pub calib: Calibration,
    pub frames: Vec<CameraFrame>,
    pub samples: Vec<TrajectorySample>,
    pub meta: Option<SimMeta>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Check internal consistency: counts, synchronization and image sizes.
    pub fn validate(&self) -> Result<(), SimError> {
        if self.frames.len() != self.samples.len() {
            return Err(SimError::format(
                "frames",
                format!("{} frames but {} trajectory samples", self.frames.len(), self.samples.len()),
            ));
        }
        for w in self.samples.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(SimError::format("poses_gt.csv", format!("timestamps not strictly increasing at t={}", w[1].t)));
            }
        }
        let k = &self.calib.intrinsics;
        for (i, (f, s)) in self.frames.iter().zip(&self.samples).enumerate() {
            if f.rgb.width() != k.width || f.rgb.height() != k.height {
                return Err(SimError::format(
                    format!("frames/{i:06}_rgb.png"),
                    format!("size {}x{} differs from calib {}x{}", f.rgb.width(), f.rgb.height(), k.width, k.height),
                ));
            }
            if f.depth.width != k.width || f.depth.height != k.height {
                return Err(SimError::format(format!("frames/{i:06}_depth.png"), "depth size differs from calib"));
            }
            if (f.t - s.t).abs() > 1e-9 {
                return Err(SimError::format(format!("frames/{i:06}_rgb.png"), "frame time out of sync with poses"));
            }
        }
        Ok(())
    }
}

/// Render one camera frame per trajectory sample; camera pose = body ∘ T_grid_ned ∘ T_ned_cam.
pub fn render_dataset(
    world: &super::World,
    samples: Vec<TrajectorySample>,
    calib: Calibration,
    meta: Option<SimMeta>,
) -> Result<Dataset, SimError> {
    let t_body_cam = calib.t_body_cam();
    let frames = samples
        .iter()
        .map(|s| {
            let cam = s.pose_gt.compose(&t_body_cam);
            super::render_frame(world, &cam, &calib.intrinsics).map(|f| CameraFrame { t: s.t, ..f })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { map: world.map.clone(), calib, frames, samples, meta })
}

#[derive(Serialize, Deserialize)]
struct PoseRow {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    yaw: f64,
    pitch: f64,
    roll: f64,
}

#[derive(Serialize, Deserialize)]
struct GpsRow {
    t: f64,
    x: f64,
    y: f64,
    valid: u8,
}

#[derive(Serialize, Deserialize)]
struct VoRow {
    t: f64,
    dx: f64,
    dy: f64,
    dyaw: f64,
}

#[derive(Serialize, Deserialize)]
struct MapMeta {
    resolution_m_per_px: f64,
    origin_x_m: f64,
    origin_y_m: f64,
    north_up: bool,
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct CalibFile {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
    ned_axes: String,
    T_ned_cam: Vec<f64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io { file: path.display().to_string(), source }
}

fn rel(dir: &Path, path: &Path) -> String {
    path.strip_prefix(dir).unwrap_or(path).display().to_string()
}

pub fn frame_paths(dir: &Path, i: usize) -> (PathBuf, PathBuf) {
    let frames = dir.join("frames");
    (frames.join(format!("{i:06}_rgb.png")), frames.join(format!("{i:06}_depth.png")))
}

fn write_csv<T: Serialize>(dir: &Path, name: &str, rows: impl IntoIterator<Item = T>) -> Result<(), SimError> {
    let path = dir.join(name);
    let mut w = csv::Writer::from_path(&path).map_err(|e| SimError::format(name, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| SimError::format(name, e.to_string()))?;
    }
    w.flush().map_err(io_err(&path))
}

fn read_csv<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<Vec<T>, SimError> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(SimError::format(name, "file missing"));
    }
    let mut r = csv::Reader::from_path(&path).map_err(|e| SimError::format(name, e.to_string()))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| SimError::format(name, format!("row {}: {e}", i + 1))))
        .collect()
}

fn read_kv<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<T, SimError> {
    let path = dir.join(name);
    let text = fs::read_to_string(&path).map_err(|e| SimError::format(name, format!("cannot read: {e}")))?;
    toml::from_str(&text).map_err(|e| SimError::format(name, e.to_string()))
}

fn write_kv<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), SimError> {
    let path = dir.join(name);
    let text = toml::to_string(value).map_err(|e| SimError::format(name, e.to_string()))?;
    fs::write(&path, text).map_err(io_err(&path))
}

/// Depth in meters → 16-bit millimeters (0 = invalid; values past 65.535 m are invalid).
pub fn depth_to_mm(d: f32) -> u16 {
    if !(d > 0.0) {
        return 0;
    }
    let mm = (d as f64 * 1000.0).round();
    if mm > u16::MAX as f64 {
        0
    } else {
        mm as u16
    }
}

pub fn mm_to_depth(mm: u16) -> f32 {
    (mm as f64 / 1000.0) as f32
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<(), SimError> {
    ds.validate()?;
    fs::create_dir_all(dir.join("frames")).map_err(io_err(dir))?;
    let map_path = dir.join("map.png");
    ds.map.raster.save(&map_path).map_err(|e| SimError::format("map.png", e.to_string()))?;
    write_kv(
        dir,
        "map_meta",
        &MapMeta {
            resolution_m_per_px: ds.map.resolution,
            origin_x_m: ds.map.origin[0],
            origin_y_m: ds.map.origin[1],
            north_up: ds.map.north_up,
        },
    )?;
    let k = ds.calib.intrinsics;
    let r = ds.calib.t_ned_cam.rotation;
    let t = ds.calib.t_ned_cam.translation;
    let mut t_ned_cam = Vec::with_capacity(12);
    for row in 0..3 {
        for col in 0..3 {
            t_ned_cam.push(r[(row, col)]);
        }
        t_ned_cam.push(t[row]);
    }
    write_kv(
        dir,
        "calib",
        &CalibFile { fx: k.fx, fy: k.fy, cx: k.cx, cy: k.cy, width: k.width, height: k.height, ned_axes: NED_AXES.into(), T_ned_cam: t_ned_cam },
    )?;
    if let Some(meta) = &ds.meta {
        write_kv(dir, "sim_meta", meta)?;
    }
    for (i, f) in ds.frames.iter().enumerate() {
        let (rgb_path, depth_path) = frame_paths(dir, i);
        f.rgb.save(&rgb_path).map_err(|e| SimError::format(rel(dir, &rgb_path), e.to_string()))?;
        let mm: Vec<u16> = f.depth.data.iter().map(|&d| depth_to_mm(d)).collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(f.depth.width, f.depth.height, mm).expect("depth buffer size");
        img.save(&depth_path).map_err(|e| SimError::format(rel(dir, &depth_path), e.to_string()))?;
    }
    write_csv(
        dir,
        "poses_gt.csv",
        ds.samples.iter().map(|s| {
            let (yaw, pitch, roll) = s.pose_gt.ypr();
            let p = s.pose_gt.translation;
            PoseRow { t: s.t, x: p.x, y: p.y, z: p.z, yaw, pitch, roll }
        }),
    )?;
    write_csv(dir, "gps.csv", ds.samples.iter().map(|s| GpsRow { t: s.t, x: s.gps.x, y: s.gps.y, valid: s.gps.valid as u8 }))?;
    write_csv(dir, "vo.csv", ds.samples.iter().map(|s| VoRow { t: s.t, dx: s.vo_rel.x, dy: s.vo_rel.y, dyaw: s.vo_rel.yaw }))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, SimError> {
    load_dataset_scaled(dir, 1.0)
}

/// Load a dataset, resizing RGB and depth by `scale` and rescaling the intrinsics to match.
pub fn load_dataset_scaled(dir: &Path, scale: f64) -> Result<Dataset, SimError> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(SimError::Config(format!("image scale must be in (0, 1], got {scale}")));
    }
    if !dir.is_dir() {
        return Err(SimError::format(dir.display().to_string(), "dataset directory does not exist"));
    }
    let raster = image::open(dir.join("map.png")).map_err(|e| SimError::format("map.png", e.to_string()))?.to_rgb8();
    let meta: MapMeta = read_kv(dir, "map_meta")?;
    if !(meta.resolution_m_per_px > 0.0) {
        return Err(SimError::format("map_meta", "resolution_m_per_px must be positive"));
    }
    let map = AerialMap { raster, resolution: meta.resolution_m_per_px, origin: [meta.origin_x_m, meta.origin_y_m], north_up: meta.north_up };

    let cf: CalibFile = read_kv(dir, "calib")?;
    if cf.T_ned_cam.len() != 12 {
        return Err(SimError::format("calib", format!("T_ned_cam needs 12 values, found {}", cf.T_ned_cam.len())));
    }
    let m = &cf.T_ned_cam;
    let t_ned_cam = PoseSE3::new(
        Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
        Vector3::new(m[3], m[7], m[11]),
    );
    if !t_ned_cam.is_valid(1e-6) {
        return Err(SimError::format("calib", "T_ned_cam rotation is not orthonormal"));
    }
    let native = Intrinsics::new(cf.fx, cf.fy, cf.cx, cf.cy, cf.width, cf.height).map_err(|e| SimError::format("calib", e.to_string()))?;
    let intrinsics = if scale == 1.0 { native } else { native.scaled(scale) };
    let sim_meta = if dir.join("sim_meta").exists() { Some(read_kv::<SimMeta>(dir, "sim_meta")?) } else { None };

    let poses: Vec<PoseRow> = read_csv(dir, "poses_gt.csv")?;
    let gps: Vec<GpsRow> = read_csv(dir, "gps.csv")?;
    let vo: Vec<VoRow> = read_csv(dir, "vo.csv")?;
    if gps.len() != poses.len() || vo.len() != poses.len() {
        return Err(SimError::format(
            "gps.csv",
            format!("row counts differ: poses_gt.csv {}, gps.csv {}, vo.csv {}", poses.len(), gps.len(), vo.len()),
        ));
    }
    for (name, ts) in [
        ("poses_gt.csv", poses.iter().map(|r| r.t).collect::<Vec<_>>()),
        ("gps.csv", gps.iter().map(|r| r.t).collect()),
        ("vo.csv", vo.iter().map(|r| r.t).collect()),
    ] {
        if let Some(i) = ts.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(SimError::format(name, format!("timestamps not strictly increasing at row {}", i + 2)));
        }
        if let Some(i) = ts.iter().zip(&poses).position(|(t, p)| (t - p.t).abs() > 1e-9) {
            return Err(SimError::format(name, format!("row {} is not synchronized with poses_gt.csv", i + 1)));
        }
    }

    let mut samples = Vec::with_capacity(poses.len());
    let mut frames = Vec::with_capacity(poses.len());
    for (i, ((p, g), v)) in poses.iter().zip(&gps).zip(&vo).enumerate() {
        samples.push(TrajectorySample {
            t: p.t,
            pose_gt: PoseSE3::from_ypr(Vector3::new(p.x, p.y, p.z), p.yaw, p.pitch, p.roll),
            gps: GpsReading { x: g.x, y: g.y, valid: g.valid != 0 },
            vo_rel: PoseSE2::new(v.dx, v.dy, v.dyaw),
        });
        let (rgb_path, depth_path) = frame_paths(dir, i);
        let rgb = image::open(&rgb_path).map_err(|e| SimError::format(rel(dir, &rgb_path), e.to_string()))?.to_rgb8();
        let depth_img = image::open(&depth_path).map_err(|e| SimError::format(rel(dir, &depth_path), e.to_string()))?;
        let depth16 = match depth_img {
            image::DynamicImage::ImageLuma16(d) => d,
            _ => return Err(SimError::format(rel(dir, &depth_path), "depth must be 16-bit grayscale")),
        };
        if rgb.dimensions() != (native.width, native.height) {
            return Err(SimError::format(rel(dir, &rgb_path), format!("size {:?} differs from calib", rgb.dimensions())));
        }
        if depth16.dimensions() != (native.width, native.height) {
            return Err(SimError::format(rel(dir, &depth_path), format!("size {:?} differs from calib", depth16.dimensions())));
        }
        let (rgb, depth16) = if scale == 1.0 {
            (rgb, depth16)
        } else {
            (
                imageops::resize(&rgb, intrinsics.width, intrinsics.height, imageops::FilterType::Triangle),
                imageops::resize(&depth16, intrinsics.width, intrinsics.height, imageops::FilterType::Nearest),
            )
        };
        let depth = DepthImage { width: depth16.width(), height: depth16.height(), data: depth16.as_raw().iter().map(|&mm| mm_to_depth(mm)).collect() };
        frames.push(CameraFrame { t: p.t, rgb, depth, intrinsics });
    }
    let extra = dir.join("frames").join(format!("{:06}_rgb.png", poses.len()));
    if extra.exists() {
        return Err(SimError::format(rel(dir, &extra), "more frames on disk than rows in poses_gt.csv"));
    }
    let ds = Dataset { map, calib: Calibration { intrinsics, t_ned_cam }, frames, samples, meta: sim_meta };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_quantization_contract() {
        assert_eq!(depth_to_mm(12.345), 12345);
        assert!((mm_to_depth(12345) as f64 - 12.345).abs() < 1e-6);
        assert_eq!(depth_to_mm(0.0), 0);
        assert_eq!(depth_to_mm(70.0), 0);
        assert_eq!(depth_to_mm(f32::NAN), 0);
    }

    fn small_dataset(n: usize) -> Dataset {
        let world = crate::simworld::generate_world(3, 256, 1.0).unwrap();
        let samples = crate::simworld::simulate_trajectory(&world, 4, n, 10.0).unwrap();
        let calib = Calibration {
            intrinsics: Intrinsics::new(30.0, 30.0, 24.0, 18.0, 48, 36).unwrap(),
            t_ned_cam: crate::geom::forward_camera_ned(1.6, 0.25),
        };
        let meta = SimMeta { seed: 4, rate_hz: 10.0, sigma_trans_m: 0.05, sigma_yaw_rad: 0.2f64.to_radians(), gps_sigma_m: 1.0, speed_mps: 5.0 };
        render_dataset(&world, samples, calib, Some(meta)).unwrap()
    }

    #[test]
    fn round_trip_preserves_poses_rgb_and_depth() {
        let ds = small_dataset(4);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back.meta, ds.meta);
        assert_eq!(back.map.raster, ds.map.raster);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert!((a.pose_gt.translation - b.pose_gt.translation).norm() < 1e-9);
            assert!((a.pose_gt.rotation - b.pose_gt.rotation).norm() < 1e-9);
            assert_eq!(a.gps, b.gps);
            assert!((a.vo_rel.x - b.vo_rel.x).abs() < 1e-12);
        }
        for (a, b) in ds.frames.iter().zip(&back.frames) {
            assert_eq!(a.rgb, b.rgb);
            for (x, y) in a.depth.data.iter().zip(&b.depth.data) {
                assert!((x - y).abs() <= 0.0005 + 1e-6);
            }
        }
        assert!((back.calib.t_ned_cam.rotation - ds.calib.t_ned_cam.rotation).norm() < 1e-12);
    }

    #[test]
    fn halved_scale_halves_intrinsics() {
        let ds = small_dataset(2);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let half = load_dataset_scaled(dir.path(), 0.5).unwrap();
        let (k0, k1) = (ds.calib.intrinsics, half.calib.intrinsics);
        assert_eq!((k1.fx, k1.fy, k1.cx, k1.cy), (k0.fx / 2.0, k0.fy / 2.0, k0.cx / 2.0, k0.cy / 2.0));
        assert_eq!((k1.width, k1.height), (24, 18));
        assert_eq!(half.frames[0].rgb.dimensions(), (24, 18));
        assert_eq!((half.frames[0].depth.width, half.frames[0].depth.height), (24, 18));
    }

    #[test]
    fn errors_name_the_offending_file() {
        let ds = small_dataset(3);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        fs::remove_file(dir.path().join("frames/000001_depth.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("000001_depth.png"), "{err}");

        save_dataset(dir.path(), &ds).unwrap();
        let gps = fs::read_to_string(dir.path().join("gps.csv")).unwrap();
        let mut lines: Vec<&str> = gps.lines().collect();
        lines.swap(1, 2);
        fs::write(dir.path().join("gps.csv"), lines.join("\n")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("gps.csv"), "{err}");

        save_dataset(dir.path(), &ds).unwrap();
        fs::write(dir.path().join("calib"), "fx = 1.0\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("calib"), "{err}");
    }
}
