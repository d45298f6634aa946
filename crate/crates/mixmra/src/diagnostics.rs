//! Exploratory and convergence tooling: empirical semi-variograms,
//! per-region stationary maximum-likelihood refits, and the Geweke
//! convergence diagnostic.

use nalgebra::{Cholesky, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::JITTER_LADDER;
use crate::covariance::{cov_matrix_sym, CovarianceParams};
use crate::error::{Error, Result};
use crate::geometry::Location;

/// One distance bin of the classical (Matheron) semi-variogram estimator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct VariogramBin {
    pub lower: f64,
    pub upper: f64,
    /// Average pair distance in the bin (NaN-free only when `count > 0`).
    pub mean_dist: f64,
    /// `gamma-hat = sum (y_i - y_k)^2 / (2 N)`; `None` for an empty bin.
    pub semivariance: Option<f64>,
    pub count: usize,
}

/// Equal-width bin edges from zero to `max_dist`.
pub fn variogram_bins(max_dist: f64, n_bins: usize) -> Vec<f64> {
    (0..=n_bins)
        .map(|i| max_dist * i as f64 / n_bins as f64)
        .collect()
}

/// Default edges: 15 equal-width bins up to half the point-cloud diameter.
pub fn default_variogram_bins(locations: &[Location]) -> Vec<f64> {
    let mut max_d: f64 = 0.0;
    for i in 0..locations.len() {
        for j in (i + 1)..locations.len() {
            max_d = max_d.max(locations[i].dist(&locations[j]));
        }
    }
    variogram_bins(0.5 * max_d, 15)
}

/// Classical empirical semi-variogram over the given increasing bin edges.
/// Pairs at distances beyond the last edge are ignored.
pub fn empirical_semivariogram(
    locations: &[Location],
    values: &[f64],
    edges: &[f64],
) -> Result<Vec<VariogramBin>> {
    if locations.len() < 2 || locations.len() != values.len() {
        return Err(Error::Config(
            "variogram needs at least two points with matching values".into(),
        ));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("bin edges must be increasing".into()));
    }
    let nb = edges.len() - 1;
    let mut sums = vec![0.0; nb];
    let mut dists = vec![0.0; nb];
    let mut counts = vec![0usize; nb];
    for i in 0..locations.len() {
        for j in (i + 1)..locations.len() {
            let d = locations[i].dist(&locations[j]);
            if d < edges[0] || d >= edges[nb] {
                continue;
            }
            // edges are sorted; a linear scan over <= 15 bins is fine
            let mut b = 0;
            while d >= edges[b + 1] {
                b += 1;
            }
            let diff = values[i] - values[j];
            sums[b] += diff * diff;
            dists[b] += d;
            counts[b] += 1;
        }
    }
    Ok((0..nb)
        .map(|b| VariogramBin {
            lower: edges[b],
            upper: edges[b + 1],
            mean_dist: if counts[b] > 0 {
                dists[b] / counts[b] as f64
            } else {
                0.5 * (edges[b] + edges[b + 1])
            },
            semivariance: (counts[b] > 0).then(|| sums[b] / (2.0 * counts[b] as f64)),
            count: counts[b],
        })
        .collect())
}

/// Maximum-likelihood estimates of a stationary Matern-plus-nugget model on
/// one subset of the data.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StationaryFit {
    pub sigma2: f64,
    pub phi: f64,
    pub nu: f64,
    pub tau2: f64,
    pub log_lik: f64,
    pub converged: bool,
    /// The profile likelihood is flat in `phi` (range unidentified).
    pub flat_phi: bool,
}

fn gaussian_log_lik(locs: &[Location], centered: &DVector<f64>, p: &CovarianceParams, tau2: f64) -> f64 {
    let n = locs.len();
    let mut c = cov_matrix_sym(locs, p);
    for i in 0..n {
        c[(i, i)] += tau2;
    }
    let mut chol = None;
    for &eps in &JITTER_LADDER {
        let mut cj = c.clone();
        for i in 0..n {
            cj[(i, i)] += eps * p.sigma2;
        }
        if let Some(f) = Cholesky::new(cj) {
            chol = Some(f);
            break;
        }
    }
    let Some(chol) = chol else {
        return f64::NEG_INFINITY;
    };
    let ln_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let alpha = chol.solve(centered);
    -0.5 * (n as f64) * (2.0 * std::f64::consts::PI).ln() - 0.5 * ln_det
        - 0.5 * centered.dot(&alpha)
}

/// Nelder-Mead maximization over unconstrained transforms of the positive
/// parameters. Returns (argmax, max, converged).
fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    start: &[f64],
    step: f64,
    max_iter: usize,
    tol: f64,
) -> (Vec<f64>, f64, bool) {
    let d = start.len();
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for i in 0..d {
        let mut v = start.to_vec();
        v[i] += step;
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();
    let mut converged = false;
    for _ in 0..max_iter {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap());
        let best = order[0];
        let worst = order[d];
        let second_worst = order[d - 1];
        if (values[best] - values[worst]).abs() < tol {
            converged = true;
            break;
        }
        let mut centroid = vec![0.0; d];
        for &i in order.iter().take(d) {
            for k in 0..d {
                centroid[k] += simplex[i][k] / d as f64;
            }
        }
        let mix = |a: f64| -> Vec<f64> {
            (0..d)
                .map(|k| centroid[k] + a * (simplex[worst][k] - centroid[k]))
                .collect()
        };
        let reflected = mix(-1.0);
        let fr = f(&reflected);
        if fr > values[best] {
            let expanded = mix(-2.0);
            let fe = f(&expanded);
            if fe > fr {
                simplex[worst] = expanded;
                values[worst] = fe;
            } else {
                simplex[worst] = reflected;
                values[worst] = fr;
            }
        } else if fr > values[second_worst] {
            simplex[worst] = reflected;
            values[worst] = fr;
        } else {
            let contracted = mix(0.5);
            let fc = f(&contracted);
            if fc > values[worst] {
                simplex[worst] = contracted;
                values[worst] = fc;
            } else {
                // shrink toward the best vertex
                let best_v = simplex[best].clone();
                for i in 0..=d {
                    if i == best {
                        continue;
                    }
                    for k in 0..d {
                        simplex[i][k] = best_v[k] + 0.5 * (simplex[i][k] - best_v[k]);
                    }
                    values[i] = f(&simplex[i]);
                }
            }
        }
    }
    let mut best = 0;
    for i in 1..=d {
        if values[i] > values[best] {
            best = i;
        }
    }
    (simplex[best].clone(), values[best], converged)
}

/// Fit `(sigma2, phi, tau2)` (and `nu` unless fixed) by numerical maximum
/// likelihood with a constant mean. Non-convergence is flagged, not fatal.
pub fn fit_stationary_region(
    locations: &[Location],
    values: &[f64],
    fixed_nu: Option<f64>,
) -> Result<StationaryFit> {
    let n = locations.len();
    if n < 30 {
        return Err(Error::Config(format!(
            "stationary refit needs at least 30 points, got {n}"
        )));
    }
    if n != values.len() {
        return Err(Error::Config("locations/values length mismatch".into()));
    }
    if n > 2000 {
        return Err(Error::Config(
            "stationary refit is dense; subset to at most 2000 points".into(),
        ));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let centered = DVector::from_iterator(n, values.iter().map(|v| v - mean));
    let var = centered.norm_squared() / (n as f64 - 1.0);

    // optimize on log(sigma2), log(phi), log(tau2) [, logit(nu / nu_max)]
    let nu_max = 2.0;
    let unpack = |v: &[f64]| -> (CovarianceParams, f64) {
        let sigma2 = v[0].exp();
        let phi = v[1].exp();
        let tau2 = v[2].exp();
        let nu = match fixed_nu {
            Some(nu) => nu,
            None => nu_max / (1.0 + (-v[3]).exp()),
        };
        (
            CovarianceParams {
                sigma2,
                phi,
                nu: nu.clamp(1e-3, nu_max),
            },
            tau2,
        )
    };
    let mut objective = |v: &[f64]| -> f64 {
        if v.iter().any(|x| x.abs() > 25.0) {
            return f64::NEG_INFINITY;
        }
        let (p, tau2) = unpack(v);
        gaussian_log_lik(locations, &centered, &p, tau2)
    };
    let mut start = vec![(0.8 * var).max(1e-6).ln(), (0.2f64).ln(), (0.2 * var).max(1e-6).ln()];
    if fixed_nu.is_none() {
        start.push(0.0); // nu = 1
    }
    let (argmax, log_lik, converged) = nelder_mead(&mut objective, &start, 0.7, 400, 1e-7);
    let (p, tau2) = unpack(&argmax);

    // curvature probe: a flat profile in phi signals an unidentified range
    let here = objective(&argmax);
    let mut probe = argmax.clone();
    probe[1] = argmax[1] + (1.2f64).ln();
    let up = objective(&probe);
    probe[1] = argmax[1] - (1.2f64).ln();
    let down = objective(&probe);
    let flat_phi = (here - up).abs() < 0.05 && (here - down).abs() < 0.05;

    Ok(StationaryFit {
        sigma2: p.sigma2,
        phi: p.phi,
        nu: p.nu,
        tau2,
        log_lik,
        converged,
        flat_phi,
    })
}

/// Geweke convergence z-score comparing the means of the first `frac_a` and
/// last `frac_b` segments of a chain, with segment variances estimated by
/// non-overlapping batch means. A constant chain scores 0 by convention.
pub fn geweke(draws: &[f64], frac_a: f64, frac_b: f64) -> Result<f64> {
    if draws.len() < 100 {
        return Err(Error::Config(format!(
            "Geweke diagnostic needs at least 100 draws, got {}",
            draws.len()
        )));
    }
    if !(frac_a > 0.0 && frac_b > 0.0 && frac_a + frac_b <= 1.0) {
        return Err(Error::Config(
            "segment fractions must be positive and sum to at most 1".into(),
        ));
    }
    let n = draws.len();
    let a = &draws[..((frac_a * n as f64).floor() as usize).max(2)];
    let b = &draws[n - ((frac_b * n as f64).floor() as usize).max(2)..];
    let batch_se2 = |seg: &[f64]| -> f64 {
        let nb = 20.min(seg.len() / 5).max(2);
        let len = seg.len() / nb;
        let means: Vec<f64> = (0..nb)
            .map(|k| seg[k * len..(k + 1) * len].iter().sum::<f64>() / len as f64)
            .collect();
        let grand = means.iter().sum::<f64>() / nb as f64;
        let var_means =
            means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>() / (nb as f64 - 1.0);
        var_means / nb as f64
    };
    let mean = |seg: &[f64]| seg.iter().sum::<f64>() / seg.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let se2 = batch_se2(a) + batch_se2(b);
    if se2 == 0.0 {
        return Ok(0.0);
    }
    Ok((ma - mb) / se2.sqrt())
}
