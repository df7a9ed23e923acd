//! Lift a few rendered frames into BEV feature maps and aggregate them along VO.

use bevloc::bevlift::{frame_bev, BevHistory, GridSpec};
use bevloc::features::{pool_bev, GroundExtractor};
use bevloc::geom::PoseSE2;
use bevloc::pipeline::cli::generate;
use bevloc::pipeline::PipelineConfig;
use bevloc::simworld::dead_reckon;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = PipelineConfig { seed: 2, ..PipelineConfig::default() };
    cfg.sim.size_px = 256;
    cfg.sim.n_frames = 6;
    let ds = generate(&cfg)?;
    let spec = GridSpec::default();
    let t_grid_cam = ds.calib.t_body_cam();
    let odom = dead_reckon(PoseSE2::identity(), &ds.samples);
    let mut hist = BevHistory::new(6);
    for (k, frame) in ds.frames.iter().enumerate() {
        let bev = frame_bev(frame, &GroundExtractor, &t_grid_cam, &spec)?;
        let occupied = (0..bev.nx * bev.ny).filter(|&i| bev.data[i * bev.channels..(i + 1) * bev.channels].iter().any(|&v| v != 0.0)).count();
        println!("frame {k}: {}x{} cells, {occupied} occupied", bev.nx, bev.ny);
        hist.push(bev, odom[k]);
    }
    let agg = hist.aggregate().expect("history is non-empty");
    let pooled = pool_bev(&agg);
    println!("aggregate: {} channels, pooled descriptor of {} values", agg.channels, pooled.len());
    Ok(())
}
