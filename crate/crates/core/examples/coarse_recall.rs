//! Coarse recall R@1..R@10 on a held-out trail, before and after training.

use bevloc::features::Heads;
use bevloc::pipeline::cli::{generate, train_heads};
use bevloc::pipeline::{metric_recall, PipelineConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = PipelineConfig { seed: 1, ..PipelineConfig::default() };
    cfg.sim.n_frames = 800;
    cfg.sim.trail = Some(0);
    cfg.train.epochs = 20;
    let train_ds = generate(&cfg)?;
    let mut test_cfg = cfg.clone();
    test_cfg.sim.trail = Some(2);
    test_cfg.sim.n_frames = 300;
    let test_ds = generate(&test_cfg)?;

    let untrained = Heads::init(cfg.ground_dim(), cfg.seed);
    let (trained, _) = train_heads(&[train_ds], &cfg)?;
    for (name, heads) in [("untrained", &untrained), ("trained", &trained)] {
        let (curve, ranks) = metric_recall(&test_ds, heads, &cfg)?;
        let row: Vec<String> = curve.iter().map(|r| format!("{:.3}", r)).collect();
        println!("{name:>9} over {} queries: {}", ranks.len(), row.join(" "));
    }
    println!("chance R@1 = {:.4}", 1.0 / 144.0);
    Ok(())
}
