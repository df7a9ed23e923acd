//! Fuse a drifting odometry chain with sparse absolute fixes and compare against dead reckoning.

use bevloc::geom::PoseSE2;
use bevloc::posegraph::{default_prior_cov, Factor, LmConfig, PoseGraph};
use nalgebra::{Matrix2, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (st, sy) = (0.05, 0.2f64.to_radians());
    let nt = Normal::new(0.0, st)?;
    let ny = Normal::new(0.0, sy)?;
    let step = PoseSE2::new(0.5, 0.0, 0.01);
    let mut gt = vec![PoseSE2::identity()];
    let mut odo = vec![PoseSE2::identity()];
    let mut graph = PoseGraph::new();
    graph.add_node(gt[0]);
    graph.add_factor(Factor::prior(0, gt[0], default_prior_cov())?)?;
    let vo_cov = Matrix3::from_diagonal(&Vector3::new(st * st, st * st, sy * sy));
    for k in 1..200 {
        gt.push(gt[k - 1].compose(&step));
        let meas = step.compose(&PoseSE2::new(nt.sample(&mut rng), nt.sample(&mut rng), ny.sample(&mut rng)));
        odo.push(odo[k - 1].compose(&meas));
        graph.add_node(odo[k]);
        graph.add_factor(Factor::between(k - 1, k, meas, vo_cov)?)?;
        if k % 20 == 0 {
            graph.add_factor(Factor::registration(k, [gt[k].x, gt[k].y], Matrix2::identity() * 0.25)?)?;
        }
    }
    let report = graph.solve(&LmConfig::default())?;
    let ate = |p: &[PoseSE2]| (p.iter().zip(&gt).map(|(a, b)| (a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sum::<f64>() / p.len() as f64).sqrt();
    println!("LM: {} iterations, cost {:.2} -> {:.2} ({:?})", report.iterations, report.initial_cost, report.final_cost, report.termination);
    println!("dead-reckoning ATE {:.2} m, fused ATE {:.2} m", ate(&odo), ate(&graph.nodes));
    let cov = graph.marginal_covariances()?;
    println!("marginal sigma_x at nodes 10, 20, 30: {:.3} {:.3} {:.3}", cov[10][(0, 0)].sqrt(), cov[20][(0, 0)].sqrt(), cov[30][(0, 0)].sqrt());
    Ok(())
}
