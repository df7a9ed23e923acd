//! Generate a small dataset, write it to disk, read it back and check it survived the round trip.

use bevloc::pipeline::cli::generate;
use bevloc::pipeline::PipelineConfig;
use bevloc::simworld::{load_dataset, save_dataset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = PipelineConfig { seed: 7, ..PipelineConfig::default() };
    cfg.sim.size_px = 256;
    cfg.sim.n_frames = 20;
    let ds = generate(&cfg)?;
    let dir = std::env::temp_dir().join("bevloc_dataset_io");
    save_dataset(&dir, &ds)?;
    let back = load_dataset(&dir)?;
    back.validate()?;
    let max_dx = ds.samples.iter().zip(&back.samples).map(|(a, b)| (a.pose_gt.to_se2().x - b.pose_gt.to_se2().x).abs()).fold(0.0, f64::max);
    println!("wrote {} frames to {}", ds.len(), dir.display());
    println!("map {}x{} px at {} m/px", back.map.width(), back.map.height(), back.map.resolution);
    println!("max gt x difference after reload: {max_dx:.3e} m");
    println!("rgb identical: {}", ds.frames.iter().zip(&back.frames).all(|(a, b)| a.rgb == b.rgb));
    Ok(())
}
