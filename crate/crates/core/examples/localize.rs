//! Full semi-open-loop runs with registrations disabled, from ground-truth oracles and from the matcher.

use bevloc::features::Heads;
use bevloc::pipeline::cli::generate;
use bevloc::pipeline::{run, PipelineConfig, RegistrationMode};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = PipelineConfig { seed: 6, ..PipelineConfig::default() };
    cfg.sim.n_frames = 300;
    let ds = generate(&cfg)?;
    let heads = Heads::init(cfg.ground_dim(), 1);
    for mode in [RegistrationMode::Disabled, RegistrationMode::Oracle, RegistrationMode::Matcher] {
        cfg.pipeline.registration = mode;
        let r = run(&ds, &heads, &cfg)?.report;
        println!(
            "{mode:?}: {} attempts, {} accepted, RPE {:.3} m (VO {:.3} m), rmse_match {:?}",
            r.registration_attempts, r.accepted, r.rpe, r.vo_rpe, r.rmse_match
        );
    }
    Ok(())
}
