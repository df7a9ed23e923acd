//! Train the ground, coarse and fine heads on a short drive and write the checkpoints.
//! Usage: train_heads [out_dir]

use bevloc::contrast::loss_curve_csv;
use bevloc::pipeline::cli::{generate, train_heads};
use bevloc::pipeline::PipelineConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("bevloc_heads"));
    let mut cfg = PipelineConfig { seed: 1, ..PipelineConfig::default() };
    cfg.sim.n_frames = 400;
    cfg.train.epochs = 10;
    let ds = generate(&cfg)?;
    let (heads, curve) = train_heads(&[ds], &cfg)?;
    print!("{}", loss_curve_csv(&curve));
    heads.save(&out)?;
    println!("checkpoints written to {}", out.display());
    Ok(())
}
