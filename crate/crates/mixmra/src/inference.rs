//! Posterior summarization, region classification, prediction, and scoring.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::basis::BasisSystem;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::PartitionTree;
use crate::sampler::ChainOutput;

/// Mean, spread, and central 95% interval of one scalar's draws.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScalarSummary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

/// Type-7 (linear interpolation) empirical quantile; `sorted` ascending.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn summarize_scalar(values: &[f64]) -> ScalarSummary {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ScalarSummary {
        mean,
        sd: var.sqrt(),
        q025: quantile_sorted(&sorted, 0.025),
        q975: quantile_sorted(&sorted, 0.975),
    }
}

/// Per-parameter posterior summaries and per-node inclusion probabilities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub n_draws: usize,
    pub beta: Vec<ScalarSummary>,
    pub tau2: ScalarSummary,
    pub rho: ScalarSummary,
    pub sigma2: ScalarSummary,
    pub phi: ScalarSummary,
    pub nu: ScalarSummary,
    /// Stacked per-weight summaries in `eta.m.j.h` order.
    pub weights: Vec<ScalarSummary>,
    /// `E[Z_{m,j} | y]` per node (global node order).
    pub indicator_mean: Vec<f64>,
}

pub fn summarize(chain: &ChainOutput) -> Result<PosteriorSummary> {
    if chain.draws.len() < 2 {
        return Err(Error::Config(
            "summaries need at least two stored draws".into(),
        ));
    }
    let n_draws = chain.draws.len();
    let series = |f: &dyn Fn(usize) -> f64| (0..n_draws).map(f).collect::<Vec<f64>>();
    let beta = (0..chain.n_beta)
        .map(|k| summarize_scalar(&series(&|d| chain.draws[d].beta[k])))
        .collect();
    let n_weights = chain.draws[0].weights.len();
    let weights = (0..n_weights)
        .map(|w| summarize_scalar(&series(&|d| chain.draws[d].weights[w])))
        .collect();
    let n_nodes = chain.draws[0].indicators.len();
    let indicator_mean = (0..n_nodes)
        .map(|z| {
            chain
                .draws
                .iter()
                .map(|d| d.indicators[z] as f64)
                .sum::<f64>()
                / n_draws as f64
        })
        .collect();
    Ok(PosteriorSummary {
        n_draws,
        beta,
        tau2: summarize_scalar(&series(&|d| chain.draws[d].tau2)),
        rho: summarize_scalar(&series(&|d| chain.draws[d].rho)),
        sigma2: summarize_scalar(&series(&|d| chain.draws[d].sigma2)),
        phi: summarize_scalar(&series(&|d| chain.draws[d].phi)),
        nu: summarize_scalar(&series(&|d| chain.draws[d].nu)),
        weights,
        indicator_mean,
    })
}

/// One labeled knot: node coordinates, knot position, and region label
/// (1 = shrunk / slow decay, 2 = active / fast decay).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KnotLabel {
    pub level: usize,
    /// 1-based node index within the level.
    pub node_index: usize,
    /// 1-based knot index within the node.
    pub knot_index: usize,
    pub x: f64,
    pub y: f64,
    /// Posterior quantity behind the label (`E[Z|y]` for the median
    /// probability model, `|E[eta|y]|` for the weight-threshold baseline).
    pub score: f64,
    pub label: u8,
}

/// Per-node and per-knot binary region labels at one level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionLabeling {
    pub level: usize,
    /// Per node at this level: `(1-based node index, E[Z|y] or score, label)`.
    pub node_labels: Vec<(usize, f64, u8)>,
    pub knots: Vec<KnotLabel>,
}

/// Median-probability-model classification at a level: a node (and all its
/// knots) belongs to region 1 iff `E[Z_{m,j} | y] < 0.5`; ties go to
/// region 2.
pub fn classify_regions(
    summary: &PosteriorSummary,
    tree: &PartitionTree,
    level: usize,
) -> Result<RegionLabeling> {
    if level > tree.levels {
        return Err(Error::Config(format!(
            "classification level {level} exceeds tree depth {}",
            tree.levels
        )));
    }
    let mut node_labels = Vec::new();
    let mut knots = Vec::new();
    for nid in tree.level_range(level) {
        let node = &tree.nodes[nid];
        let e_z = summary.indicator_mean[nid];
        let label = if e_z < 0.5 { 1 } else { 2 };
        node_labels.push((node.index_in_level + 1, e_z, label));
        for (h, k) in node.knots.iter().enumerate() {
            knots.push(KnotLabel {
                level,
                node_index: node.index_in_level + 1,
                knot_index: h + 1,
                x: k.x,
                y: k.y,
                score: e_z,
                label,
            });
        }
    }
    Ok(RegionLabeling {
        level,
        node_labels,
        knots,
    })
}

/// Per-knot weight-threshold baseline: a knot belongs to region 1 iff the
/// absolute posterior mean of its weight is below `t`.
pub fn classify_knots_by_weight(
    summary: &PosteriorSummary,
    chain: &ChainOutput,
    tree: &PartitionTree,
    level: usize,
    threshold: f64,
) -> Result<RegionLabeling> {
    if !(threshold > 0.0) {
        return Err(Error::Config("threshold must be positive".into()));
    }
    if level > tree.levels {
        return Err(Error::Config(format!(
            "classification level {level} exceeds tree depth {}",
            tree.levels
        )));
    }
    let mut knots = Vec::new();
    for (nid, nm) in chain.nodes.iter().enumerate() {
        if nm.level != level {
            continue;
        }
        let node = &tree.nodes[nid];
        for (h, k) in node.knots.iter().enumerate() {
            let w = summary.weights[nm.offset + h].mean.abs();
            knots.push(KnotLabel {
                level,
                node_index: nm.index + 1,
                knot_index: h + 1,
                x: k.x,
                y: k.y,
                score: w,
                label: if w < threshold { 1 } else { 2 },
            });
        }
    }
    Ok(RegionLabeling {
        level,
        node_labels: Vec::new(),
        knots,
    })
}

/// Knot-level confusion counts against truth labels (1 or 2).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// `counts[c][t]`: classified as region `c+1`, truly region `t+1`.
    pub counts: [[usize; 2]; 2],
    /// Percent of truly region-1 and region-2 knots classified correctly.
    pub pct_correct: [f64; 2],
}

pub fn confusion_matrix(labeling: &RegionLabeling, truth: &[u8]) -> Result<ConfusionMatrix> {
    if truth.len() != labeling.knots.len() {
        return Err(Error::Config(format!(
            "truth has {} entries for {} labeled knots",
            truth.len(),
            labeling.knots.len()
        )));
    }
    let mut counts = [[0usize; 2]; 2];
    for (k, &t) in labeling.knots.iter().zip(truth) {
        if !(1..=2).contains(&k.label) || !(1..=2).contains(&t) {
            return Err(Error::Config("labels must be 1 or 2".into()));
        }
        counts[(k.label - 1) as usize][(t - 1) as usize] += 1;
    }
    let mut pct_correct = [f64::NAN; 2];
    for t in 0..2 {
        let total = counts[0][t] + counts[1][t];
        if total > 0 {
            pct_correct[t] = 100.0 * counts[t][t] as f64 / total as f64;
        }
    }
    Ok(ConfusionMatrix {
        counts,
        pct_correct,
    })
}

/// Posterior predictive mean and standard deviation at one location.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub sd: f64,
}

/// Posterior predictive summaries at new locations, integrating over the
/// stored draws. Basis rows come from `system` (rebuild it at the posterior
/// mean of `theta` when the covariance was estimated). With `include_noise`
/// a fresh `N(0, tau2)` draw enters each sample path.
pub fn predict(
    chain: &ChainOutput,
    system: &BasisSystem,
    tree: &PartitionTree,
    new_data: &Dataset,
    include_noise: bool,
    noise_seed: u64,
) -> Result<Vec<Prediction>> {
    if chain.draws.is_empty() {
        return Err(Error::Config("prediction needs stored draws".into()));
    }
    if new_data.covariates.len() + 1 != chain.n_beta {
        return Err(Error::Config(format!(
            "prediction data has {} mean columns, the chain used {}",
            new_data.covariates.len() + 1,
            chain.n_beta
        )));
    }
    let x = new_data.design_matrix();
    let rows: Vec<Vec<(usize, Vec<f64>)>> = {
        let locs = &new_data.locations;
        let eval = |s| -> Result<Vec<(usize, Vec<f64>)>> {
            Ok(system
                .evaluate_path(tree, s)?
                .into_iter()
                .map(|(nid, row)| (nid, row.transpose().as_slice().to_vec()))
                .collect())
        };
        #[cfg(feature = "parallel")]
        {
            locs.par_iter().map(eval).collect::<Result<Vec<_>>>()?
        }
        #[cfg(not(feature = "parallel"))]
        {
            locs.iter().map(eval).collect::<Result<Vec<_>>>()?
        }
    };

    let offsets: Vec<usize> = chain.nodes.iter().map(|nm| nm.offset).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(noise_seed);
    let mut out = Vec::with_capacity(new_data.n());
    for (i, basis_rows) in rows.iter().enumerate() {
        let mut samples = Vec::with_capacity(chain.draws.len());
        for draw in &chain.draws {
            let mut v = 0.0;
            for k in 0..chain.n_beta {
                v += x[(i, k)] * draw.beta[k];
            }
            for (nid, row) in basis_rows {
                let off = offsets[*nid];
                for (h, b) in row.iter().enumerate() {
                    v += b * draw.weights[off + h];
                }
            }
            if include_noise {
                v += draw.tau2.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            samples.push(v);
        }
        let s = summarize_scalar(&samples);
        out.push(Prediction {
            mean: s.mean,
            sd: s.sd,
        });
    }
    Ok(out)
}

/// Mean squared and mean absolute predictive error.
pub fn score(pred: &[f64], actual: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != actual.len() {
        return Err(Error::Config(format!(
            "score length mismatch: {} predictions vs {} actuals",
            pred.len(),
            actual.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Config("score needs at least one pair".into()));
    }
    let n = pred.len() as f64;
    let mut mspe = 0.0;
    let mut mape = 0.0;
    for (p, a) in pred.iter().zip(actual) {
        mspe += (p - a) * (p - a) / n;
        mape += (p - a).abs() / n;
    }
    Ok((mspe, mape))
}

/// Coverage and error metrics of the stacked weights against known truth,
/// stratified by whether the true weight is zero. Relative metrics divide
/// by `|truth|`, so they are reported for the nonzero stratum only.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WeightRecovery {
    pub n: usize,
    /// Share of 95% credible intervals containing the truth (a point
    /// interval containing the point counts as covered).
    pub coverage: f64,
    pub mae: f64,
    pub mse: f64,
    pub bias: f64,
    pub mean_indicator: f64,
    pub relative_mae: Option<f64>,
    pub relative_bias: Option<f64>,
    pub relative_mse: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoverageReport {
    pub all: WeightRecovery,
    pub zero: Option<WeightRecovery>,
    pub nonzero: Option<WeightRecovery>,
}

pub fn coverage(chain: &ChainOutput, truth: &[f64]) -> Result<CoverageReport> {
    let summary = summarize(chain)?;
    if truth.len() != summary.weights.len() {
        return Err(Error::Config(format!(
            "truth has {} weights, the chain stores {}",
            truth.len(),
            summary.weights.len()
        )));
    }
    // per-weight indicator mean: the node's E[Z|y] repeated over its block
    let mut z_of_weight = vec![0.0; truth.len()];
    for (nid, nm) in chain.nodes.iter().enumerate() {
        for h in 0..nm.r {
            z_of_weight[nm.offset + h] = summary.indicator_mean[nid];
        }
    }
    let strata = |keep: &dyn Fn(f64) -> bool, relative: bool| -> Option<WeightRecovery> {
        let idx: Vec<usize> = (0..truth.len()).filter(|&i| keep(truth[i])).collect();
        if idx.is_empty() {
            return None;
        }
        let n = idx.len() as f64;
        let mut covered = 0.0;
        let mut mae = 0.0;
        let mut mse = 0.0;
        let mut bias = 0.0;
        let mut zbar = 0.0;
        let (mut rmae, mut rbias, mut rmse) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let s = &summary.weights[i];
            if truth[i] >= s.q025 && truth[i] <= s.q975 {
                covered += 1.0;
            }
            let err = s.mean - truth[i];
            mae += err.abs() / n;
            mse += err * err / n;
            bias += err / n;
            zbar += z_of_weight[i] / n;
            if relative {
                rmae += (err / truth[i]).abs() / n;
                rbias += err / truth[i] / n;
                rmse += (err / truth[i]).powi(2) / n;
            }
        }
        Some(WeightRecovery {
            n: idx.len(),
            coverage: covered / n,
            mae,
            mse,
            bias,
            mean_indicator: zbar,
            relative_mae: relative.then_some(rmae),
            relative_bias: relative.then_some(rbias),
            relative_mse: relative.then_some(rmse),
        })
    };
    Ok(CoverageReport {
        all: strata(&|_| true, false).expect("nonempty weights"),
        zero: strata(&|t| t == 0.0, false),
        nonzero: strata(&|t| t != 0.0, true),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::CovarianceParams;
    use crate::sampler::{NodeMeta, StoredDraw};
    use std::collections::BTreeMap;

    fn synthetic_chain(draws: Vec<StoredDraw>, nodes: Vec<NodeMeta>, n_beta: usize) -> ChainOutput {
        ChainOutput {
            draws,
            adaptation: Vec::new(),
            shrink_trajectory: Vec::new(),
            post_burn_accept: BTreeMap::new(),
            jitter_events: Vec::new(),
            heredity_violations: 0,
            warnings: Vec::new(),
            elapsed_seconds: 0.0,
            nodes,
            n_beta,
            final_shrink: 100.0,
        }
    }

    fn scalar_draw(beta: f64, w: f64, z: u8) -> StoredDraw {
        StoredDraw {
            beta: vec![beta],
            weights: vec![w],
            indicators: vec![z],
            tau2: 0.1,
            rho: 0.5,
            sigma2: 1.0,
            phi: 0.1,
            nu: 1.0,
            shrink: 100.0,
        }
    }

    fn one_node_meta() -> Vec<NodeMeta> {
        vec![NodeMeta {
            level: 0,
            index: 0,
            r: 1,
            offset: 0,
        }]
    }

    #[test]
    fn summarize_degenerate_and_half_split() {
        let draws = vec![scalar_draw(2.0, 1.0, 0), scalar_draw(2.0, 1.0, 1)];
        let out = synthetic_chain(draws, one_node_meta(), 1);
        let s = summarize(&out).unwrap();
        assert_eq!(s.beta[0].sd, 0.0);
        assert_eq!(s.beta[0].q025, s.beta[0].q975);
        assert_eq!(s.indicator_mean[0], 0.5);
    }

    #[test]
    fn summarize_matches_sampling_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(42);
        let n = 40_000;
        let draws: Vec<StoredDraw> = (0..n)
            .map(|_| {
                let v: f64 = rng.sample(rand_distr::StandardNormal);
                scalar_draw(3.0 + 2.0 * v, v, 1)
            })
            .collect();
        let out = synthetic_chain(draws, one_node_meta(), 1);
        let s = summarize(&out).unwrap();
        assert!((s.beta[0].mean - 3.0).abs() < 0.05);
        assert!((s.beta[0].sd - 2.0).abs() < 0.05);
        // N(3, 4): 2.5% and 97.5% quantiles at 3 -/+ 1.96*2
        assert!((s.beta[0].q025 - (3.0 - 3.92)).abs() < 0.1);
        assert!((s.beta[0].q975 - (3.0 + 3.92)).abs() < 0.1);
    }

    #[test]
    fn classification_threshold_and_ties() {
        let tree = crate::geometry::PartitionTree::build(
            crate::geometry::Rect::unit_square(),
            0,
            4,
            2,
            crate::geometry::PartitionMode::RectangularGrid,
            0,
        )
        .unwrap();
        let mk = |e_z: f64| PosteriorSummary {
            n_draws: 10,
            beta: vec![],
            tau2: summarize_scalar(&[0.1, 0.1]),
            rho: summarize_scalar(&[0.5, 0.5]),
            sigma2: summarize_scalar(&[1.0, 1.0]),
            phi: summarize_scalar(&[0.1, 0.1]),
            nu: summarize_scalar(&[1.0, 1.0]),
            weights: vec![],
            indicator_mean: vec![e_z],
        };
        let lab = classify_regions(&mk(0.49), &tree, 0).unwrap();
        assert!(lab.knots.iter().all(|k| k.label == 1));
        let lab = classify_regions(&mk(0.51), &tree, 0).unwrap();
        assert!(lab.knots.iter().all(|k| k.label == 2));
        // tie at exactly 0.5 goes to region 2
        let lab = classify_regions(&mk(0.5), &tree, 0).unwrap();
        assert!(lab.knots.iter().all(|k| k.label == 2));
    }

    #[test]
    fn confusion_counts_and_degenerate_labelings() {
        let knot = |label| KnotLabel {
            level: 1,
            node_index: 1,
            knot_index: 1,
            x: 0.0,
            y: 0.0,
            score: 0.0,
            label,
        };
        let lab = RegionLabeling {
            level: 1,
            node_labels: vec![],
            knots: vec![knot(1), knot(1), knot(2), knot(2)],
        };
        // perfect labeling
        let cm = confusion_matrix(&lab, &[1, 1, 2, 2]).unwrap();
        assert_eq!(cm.counts, [[2, 0], [0, 2]]);
        assert_eq!(cm.pct_correct, [100.0, 100.0]);
        let total: usize = cm.counts.iter().flatten().sum();
        assert_eq!(total, 4);
        // all-one-region labeling leaves a zero column
        let all1 = RegionLabeling {
            level: 1,
            node_labels: vec![],
            knots: vec![knot(1), knot(1), knot(1), knot(1)],
        };
        let cm = confusion_matrix(&all1, &[1, 1, 2, 2]).unwrap();
        assert_eq!(cm.counts[1], [0, 0]);
        assert_eq!(cm.pct_correct[1], 0.0);
    }

    #[test]
    fn weight_threshold_classification_degenerate_cases() {
        let tree = crate::geometry::PartitionTree::build(
            crate::geometry::Rect::unit_square(),
            0,
            4,
            2,
            crate::geometry::PartitionMode::RectangularGrid,
            0,
        )
        .unwrap();
        let draws = vec![
            StoredDraw {
                beta: vec![0.0],
                weights: vec![0.0, 0.0],
                indicators: vec![1],
                tau2: 0.1,
                rho: 0.5,
                sigma2: 1.0,
                phi: 0.1,
                nu: 1.0,
                shrink: 100.0,
            };
            3
        ];
        let nodes = vec![NodeMeta {
            level: 0,
            index: 0,
            r: 2,
            offset: 0,
        }];
        let out = synthetic_chain(draws, nodes, 1);
        let summary = summarize(&out).unwrap();
        // all weights zero: everything region 1, for any threshold
        for t in [0.1, 1.0, 1e12] {
            let lab = classify_knots_by_weight(&summary, &out, &tree, 0, t).unwrap();
            assert!(lab.knots.iter().all(|k| k.label == 1));
        }
        assert!(classify_knots_by_weight(&summary, &out, &tree, 0, 0.0).is_err());
    }

    #[test]
    fn score_examples_and_brute_force() {
        assert_eq!(score(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        let (mspe, mape) = score(&[2.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!((mspe, mape), (1.0, 1.0));
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        let p: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let a: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let (mspe, mape) = score(&p, &a).unwrap();
        let mut bs = 0.0;
        let mut ba = 0.0;
        for i in 0..50 {
            bs += (p[i] - a[i]).powi(2);
            ba += (p[i] - a[i]).abs();
        }
        assert!((mspe - bs / 50.0).abs() < 1e-12);
        assert!((mape - ba / 50.0).abs() < 1e-12);
        assert!(score(&p, &a[..10]).is_err());
    }

    #[test]
    fn coverage_degenerate_and_nominal() {
        // degenerate chain exactly at the truth: the point interval contains it
        let draws = vec![scalar_draw(0.0, 0.7, 1); 5];
        let out = synthetic_chain(draws, one_node_meta(), 1);
        let rep = coverage(&out, &[0.7]).unwrap();
        assert_eq!(rep.all.coverage, 1.0);
        assert!(rep.zero.is_none());
        // known-normal chain vs fixed truth: coverage near nominal
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(9);
        let n_weights = 400;
        let n_draws = 2000;
        let truths: Vec<f64> = (0..n_weights).map(|_| rng.random::<f64>() + 0.5).collect();
        // posterior centers scatter around the truth with the same sd the
        // chain draws use, so nominal coverage applies
        let centers: Vec<f64> = truths
            .iter()
            .map(|t| t + rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let mut draws = Vec::with_capacity(n_draws);
        for _ in 0..n_draws {
            let weights: Vec<f64> = centers
                .iter()
                .map(|c| c + rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            draws.push(StoredDraw {
                beta: vec![0.0],
                weights,
                indicators: vec![1],
                tau2: 0.1,
                rho: 0.5,
                sigma2: 1.0,
                phi: 0.1,
                nu: 1.0,
                shrink: 100.0,
            });
        }
        let nodes = vec![NodeMeta {
            level: 0,
            index: 0,
            r: n_weights,
            offset: 0,
        }];
        let out = synthetic_chain(draws, nodes, 1);
        let rep = coverage(&out, &truths).unwrap();
        assert!(
            (rep.all.coverage - 0.95).abs() < 0.03,
            "coverage {}",
            rep.all.coverage
        );
        assert!(rep.nonzero.unwrap().relative_mae.is_some());
    }

    #[test]
    fn predict_linearity_and_variance_decomposition() {
        use crate::basis::{BasisScaffold, BasisSystem};
        use crate::geometry::{Location, PartitionMode, Rect};
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let locs: Vec<Location> = (0..30)
            .map(|_| Location::new(rng.random(), rng.random()))
            .collect();
        let tree = crate::geometry::PartitionTree::build(
            Rect::unit_square(),
            1,
            4,
            4,
            PartitionMode::RectangularGrid,
            0,
        )
        .unwrap();
        let params = CovarianceParams::new(1.0, 0.2, 1.0).unwrap();
        let scaffold = BasisScaffold::new(&tree, &locs).unwrap();
        let system = BasisSystem::build(&tree, &scaffold, &params).unwrap();
        let total = scaffold.total_weights;
        let nodes: Vec<NodeMeta> = tree
            .nodes
            .iter()
            .enumerate()
            .map(|(nid, node)| NodeMeta {
                level: node.level,
                index: node.index_in_level,
                r: node.knots.len(),
                offset: scaffold.weight_offset[nid],
            })
            .collect();
        let tau2 = 0.3;
        let mut draws = Vec::new();
        for _ in 0..3000 {
            let weights: Vec<f64> = (0..total)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            draws.push(StoredDraw {
                beta: vec![1.0],
                weights,
                indicators: vec![1; tree.num_nodes()],
                tau2,
                rho: 0.5,
                sigma2: 1.0,
                phi: 0.2,
                nu: 1.0,
                shrink: 100.0,
            });
        }
        let out = synthetic_chain(draws.clone(), nodes.clone(), 1);
        let new_data = Dataset {
            locations: vec![Location::new(0.3, 0.3), Location::new(0.8, 0.6)],
            response: vec![0.0, 0.0],
            ..Dataset::default()
        };
        let base = predict(&out, &system, &tree, &new_data, false, 7).unwrap();

        // doubling all weight draws doubles the de-trended prediction
        let mut doubled = draws.clone();
        for d in &mut doubled {
            for w in &mut d.weights {
                *w *= 2.0;
            }
        }
        let out2 = synthetic_chain(doubled, nodes, 1);
        let twice = predict(&out2, &system, &tree, &new_data, false, 7).unwrap();
        for (a, b) in base.iter().zip(&twice) {
            assert!(((b.mean - 1.0) - 2.0 * (a.mean - 1.0)).abs() < 1e-10);
        }

        // noise widens the predictive sd by about E[tau2]
        let noisy = predict(&out, &system, &tree, &new_data, true, 7).unwrap();
        for (a, b) in base.iter().zip(&noisy) {
            assert!(b.sd >= a.sd);
            let gap = b.sd * b.sd - a.sd * a.sd;
            assert!((gap - tau2).abs() < 0.1 * tau2.max(0.05), "gap {gap}");
        }
    }
}
