//! Register one frame against the aerial map and show the coarse ranking, gate profile and estimate.

use bevloc::features::Heads;
use bevloc::matcher::{register_traced, AerialIndex};
use bevloc::pipeline::cli::generate;
use bevloc::pipeline::{ground_embeddings, PipelineConfig};
use bevloc::simworld::dead_reckon;
use bevloc::geom::PoseSE2;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = PipelineConfig { seed: 4, ..PipelineConfig::default() };
    cfg.sim.n_frames = 12;
    let ds = generate(&cfg)?;
    let heads = Heads::init(cfg.ground_dim(), 3);
    let k = ds.len() - 1;
    let e_g = ground_embeddings(&ds, &heads, &cfg)?[k].clone().ok_or("empty BEV")?;
    let index = AerialIndex::new(&ds.map, &heads.coarse)?;
    let s0 = &ds.samples[0];
    let prior = dead_reckon(PoseSE2::new(s0.gps.x, s0.gps.y, s0.pose_gt.to_se2().yaw), &ds.samples)[k];
    let t = register_traced(&index, &e_g, &prior, &heads, &cfg.matcher)?;
    let gt = ds.samples[k].pose_gt.to_se2();
    println!("prior ({:.1}, {:.1}), ground truth ({:.1}, {:.1})", prior.x, prior.y, gt.x, gt.y);
    for (i, c) in t.grid.ranked.iter().take(5).enumerate() {
        println!("rank {}: cell ({}, {}) corr {:.3}", i + 1, c.col, c.row, c.corr);
    }
    for (o, c) in t.gate.offsets_deg.iter().zip(&t.gate.corr) {
        println!("gate {o:+5.1} deg: {c:?}");
    }
    let e = t.estimate;
    println!("estimate ({:.1}, {:.1}) yaw {:.1} deg, cov trace {:.1}, accepted {}", e.mean[0], e.mean[1], e.yaw.to_degrees(), e.cov_trace(), e.accepted);
    Ok(())
}
