//! Scratch pilot for timing a two-region fit (not part of the suite).

use mixmra::covariance::CovarianceParams;
use mixmra::geometry::{PartitionMode, PartitionTree, Rect};
use mixmra::model::MixtureHyper;
use mixmra::sampler::{run_chain, ChainConfig};
use mixmra::simulate::{simulate_sim2, SimSpec};

#[test]
#[ignore]
fn pilot_sim2_timing() {
    let spec = SimSpec::sim2(1);
    let data = simulate_sim2(&spec).unwrap();
    let train = data.subset(&data.train_indices());
    let tree = PartitionTree::build(
        Rect::unit_square(),
        3,
        4,
        16,
        PartitionMode::RectangularGrid,
        0,
    )
    .unwrap();
    let theta = CovarianceParams::new(1.0, 0.1, 1.0).unwrap();
    let mut cfg = ChainConfig::new(10_000, 5_000, 42, theta);
    cfg.estimate_theta = true;
    cfg.thin = 5;
    let start = std::time::Instant::now();
    let out = run_chain(&train, &tree, cfg, MixtureHyper::default()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    println!("10000 iterations in {elapsed:.1}s -> {:.1} ms/iter", 1000.0 * elapsed / 10000.0);
    println!("final L = {}", out.final_shrink);
    for e in &out.shrink_trajectory {
        println!(
            "  iter {}: window mean Z_M = {:.3}, L {} -> {}",
            e.iteration, e.window_mean, e.before, e.after
        );
    }
    for (k, v) in &out.post_burn_accept {
        println!("  accept[{k}] = {:.3} ({} proposals)", v.rate(), v.proposals);
    }
    // level-3 E[Z] by half
    let mut left = (0.0, 0usize);
    let mut right = (0.0, 0usize);
    for (nid, nm) in out.nodes.iter().enumerate() {
        if nm.level != 3 {
            continue;
        }
        let e_z: f64 = out
            .draws
            .iter()
            .map(|d| d.indicators[nid] as f64)
            .sum::<f64>()
            / out.draws.len() as f64;
        let cx = tree.nodes[nid].rect.unwrap();
        if 0.5 * (cx.x0 + cx.x1) < 0.5 {
            left = (left.0 + e_z, left.1 + 1);
        } else {
            right = (right.0 + e_z, right.1 + 1);
        }
    }
    println!(
        "E[Z_3] left (phi=1.0 half) = {:.3}, right (phi=0.01 half) = {:.3}",
        left.0 / left.1 as f64,
        right.0 / right.1 as f64
    );
    let mean_sigma2 = out.draws.iter().map(|d| d.sigma2).sum::<f64>() / out.draws.len() as f64;
    let mean_phi = out.draws.iter().map(|d| d.phi).sum::<f64>() / out.draws.len() as f64;
    let mean_nu = out.draws.iter().map(|d| d.nu).sum::<f64>() / out.draws.len() as f64;
    let mean_tau2 = out.draws.iter().map(|d| d.tau2).sum::<f64>() / out.draws.len() as f64;
    println!("posterior means: sigma2 {mean_sigma2:.3}, phi {mean_phi:.4}, nu {mean_nu:.3}, tau2 {mean_tau2:.4}");
}
