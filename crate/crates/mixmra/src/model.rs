//! The hierarchical mixture model: hyperparameters, latent indicators with
//! the strong heredity constraint, and the density evaluations used by the
//! sampler.
//!
//! Each node's weight block gets the two-component prior
//! `eta ~ Z N(0, K) + (1 - Z) N(0, K / L)` with a large shrink factor `L`.
//! Indicators follow `Z_{m,j} | Z_parent = 1 ~ Bernoulli(rho^m)` and are
//! forced to zero when the parent is zero, so a child block can only be
//! active inside an active parent. The root is always active.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::geometry::PartitionTree;

/// Hyperparameters of the mixture model priors.
///
/// Defaults: `Beta(1, 1)` on `rho`, `IG(2, 1)` on `tau2` and `sigma2`
/// (weakly informative with finite mean), `Gamma(0.001, 0.001)` on `phi`,
/// `Uniform(0, 2)` on `nu`, and a mean-zero normal with variance 1e6 on the
/// constant mean. Covariate coefficients take a flat prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureHyper {
    pub alpha_rho: f64,
    pub beta_rho: f64,
    pub alpha_tau2: f64,
    pub beta_tau2: f64,
    pub alpha_sigma2: f64,
    pub beta_sigma2: f64,
    pub alpha_phi: f64,
    pub beta_phi: f64,
    /// Upper end of the uniform prior on the smoothness.
    pub nu_max: f64,
    /// Prior variance of the mean-zero normal on the intercept when no
    /// covariates enter the mean; covariate coefficients are flat.
    pub mean_prior_var: f64,
}

impl Default for MixtureHyper {
    fn default() -> Self {
        MixtureHyper {
            alpha_rho: 1.0,
            beta_rho: 1.0,
            alpha_tau2: 2.0,
            beta_tau2: 1.0,
            alpha_sigma2: 2.0,
            beta_sigma2: 1.0,
            alpha_phi: 0.001,
            beta_phi: 0.001,
            nu_max: 2.0,
            mean_prior_var: 1e6,
        }
    }
}

impl MixtureHyper {
    pub fn validate(&self) -> Result<()> {
        let shapes = [
            self.alpha_rho,
            self.beta_rho,
            self.alpha_tau2,
            self.beta_tau2,
            self.alpha_sigma2,
            self.beta_sigma2,
            self.alpha_phi,
            self.beta_phi,
            self.nu_max,
            self.mean_prior_var,
        ];
        if shapes.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(
                "all prior shape/rate hyperparameters must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

/// Binary inclusion indicators `Z_{m,j}`, one per tree node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentIndicators {
    /// Indexed by global node id.
    pub active: Vec<bool>,
}

impl LatentIndicators {
    /// Everything active; trivially satisfies heredity.
    pub fn all_active(n_nodes: usize) -> Self {
        LatentIndicators {
            active: vec![true; n_nodes],
        }
    }

    pub fn is_active(&self, node_id: usize) -> bool {
        self.active[node_id]
    }

    /// Check the strong heredity constraint: an active node requires an
    /// active parent, and the root is always active.
    pub fn check_heredity(&self, tree: &PartitionTree) -> Result<()> {
        if !self.active[0] {
            return Err(Error::Heredity { level: 0, index: 0 });
        }
        for (id, node) in tree.nodes.iter().enumerate() {
            if let Some(parent) = node.parent {
                if self.active[id] && !self.active[parent] {
                    return Err(Error::Heredity {
                        level: node.level,
                        index: node.index_in_level,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Basis-function weight blocks, one `r`-vector per node.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsState {
    /// Indexed by global node id.
    pub blocks: Vec<DVector<f64>>,
}

impl WeightsState {
    pub fn zeros(tree: &PartitionTree) -> Self {
        WeightsState {
            blocks: tree
                .nodes
                .iter()
                .map(|n| DVector::zeros(n.knots.len()))
                .collect(),
        }
    }
}

/// `p_m = rho^m`, the probability that a level-`m` block with an active
/// parent is itself active.
pub fn level_inclusion_prob(rho: f64, level: usize) -> f64 {
    debug_assert!(rho > 0.0 && rho < 1.0);
    rho.powi(level as i32)
}

/// Log density of a weight block under its mixture component.
///
/// The prior covariance enters through the lower Cholesky factor of its
/// inverse (`prec_chol * prec_chol' = K^{-1}`) and `log_det_prec =
/// ln det K^{-1}`. With `active = false` the covariance is `K / shrink`.
pub fn log_prior_weights(
    eta: &DVector<f64>,
    prec_chol: &DMatrix<f64>,
    log_det_prec: f64,
    active: bool,
    shrink: f64,
) -> f64 {
    let r = eta.len() as f64;
    let q = prec_chol.tr_mul(eta).norm_squared(); // eta' K^{-1} eta
    if active {
        -0.5 * r * (2.0 * std::f64::consts::PI).ln() + 0.5 * log_det_prec - 0.5 * q
    } else {
        -0.5 * r * (2.0 * std::f64::consts::PI).ln()
            + 0.5 * (log_det_prec + r * shrink.ln())
            - 0.5 * shrink * q
    }
}

/// Log probability of an indicator configuration given `rho`.
///
/// Nodes with active parents contribute `Bernoulli(rho^m)` log mass; nodes
/// below an inactive parent are forced to zero and contribute `log 1`. The
/// root contributes nothing (`p_0 = 1`).
pub fn log_indicator_prior(tree: &PartitionTree, z: &LatentIndicators, rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Domain(format!("rho must be in (0,1), got {rho}")));
    }
    z.check_heredity(tree)?;
    let mut total = 0.0;
    for (id, node) in tree.nodes.iter().enumerate() {
        let Some(parent) = node.parent else { continue };
        if !z.active[parent] {
            continue; // degenerate mass at zero
        }
        let p = level_inclusion_prob(rho, node.level);
        total += if z.active[id] { p.ln() } else { (-p).ln_1p() };
    }
    Ok(total)
}

/// Log density of `InverseGamma(shape, rate)` at `x`
/// (`pdf = rate^shape / Gamma(shape) * x^(-shape-1) * exp(-rate / x)`).
pub fn log_inv_gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

/// Log density of `Gamma(shape, rate)` at `x`.
pub fn log_gamma_pdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

/// Log density of `Beta(a, b)` at `x`.
pub fn log_beta_pdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return f64::NEG_INFINITY;
    }
    ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PartitionMode, Rect};

    fn small_tree(levels: usize, fanout: usize) -> PartitionTree {
        PartitionTree::build(
            Rect::unit_square(),
            levels,
            fanout,
            1,
            PartitionMode::RectangularGrid,
            0,
        )
        .unwrap()
    }

    fn chol_of_prec(k: f64) -> (DMatrix<f64>, f64) {
        // scalar K with precision 1/k
        let prec = 1.0 / k;
        (DMatrix::from_element(1, 1, prec.sqrt()), prec.ln())
    }

    #[test]
    fn inclusion_probabilities() {
        assert_eq!(level_inclusion_prob(0.7, 0), 1.0);
        assert!((level_inclusion_prob(0.5, 3) - 0.125).abs() < 1e-15);
        let mut last = 2.0;
        for m in 0..5 {
            let p = level_inclusion_prob(0.9, m);
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn weight_prior_at_zero_is_normalizer() {
        let (l, logdet) = chol_of_prec(2.0);
        let eta = DVector::zeros(1);
        let got = log_prior_weights(&eta, &l, logdet, true, 100.0);
        let expect = -0.5 * (2.0 * std::f64::consts::PI).ln() + 0.5 * logdet;
        assert!((got - expect).abs() < 1e-14);
    }

    #[test]
    fn shrink_ratio_matches_scalar_oracle() {
        // r = 1, K = 1, shrink = 100, eta = 0.3
        let (l, logdet) = chol_of_prec(1.0);
        let eta = DVector::from_element(1, 0.3);
        let active = log_prior_weights(&eta, &l, logdet, true, 100.0);
        let inactive = log_prior_weights(&eta, &l, logdet, false, 100.0);
        // scalar normal pdfs: N(0.3; 0, 1) and N(0.3; 0, 1/100)
        let pdf =
            |x: f64, var: f64| -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * x * x / var;
        assert!((active - pdf(0.3, 1.0)).abs() < 1e-12);
        assert!((inactive - pdf(0.3, 0.01)).abs() < 1e-12);
        // algebraic identity used by the indicator update:
        // N0/N1 = L^{r/2} exp(-(L-1)/2 eta' K^{-1} eta)
        let expect = 0.5 * 100f64.ln() - 0.5 * 99.0 * 0.09;
        assert!(((inactive - active) - expect).abs() < 1e-12);
    }

    #[test]
    fn mixture_components_coincide_as_shrink_to_one() {
        let (l, logdet) = chol_of_prec(0.7);
        let eta = DVector::from_element(1, 1.3);
        let a = log_prior_weights(&eta, &l, logdet, true, 1.0 + 1e-9);
        let b = log_prior_weights(&eta, &l, logdet, false, 1.0 + 1e-9);
        assert!((a - b).abs() < 1e-8);
    }

    #[test]
    fn weight_prior_maximized_at_zero() {
        let (l, logdet) = chol_of_prec(1.5);
        let at_zero = log_prior_weights(&DVector::zeros(1), &l, logdet, true, 10.0);
        for &v in &[-2.0, -0.5, 0.1, 1.0, 3.0] {
            let other = log_prior_weights(&DVector::from_element(1, v), &l, logdet, true, 10.0);
            assert!(other < at_zero);
        }
    }

    #[test]
    fn indicator_prior_all_active() {
        let tree = small_tree(1, 4);
        let z = LatentIndicators::all_active(tree.num_nodes());
        let rho = 0.63;
        let got = log_indicator_prior(&tree, &z, rho).unwrap();
        assert!((got - 4.0 * rho.ln()).abs() < 1e-14);
    }

    #[test]
    fn inactive_subtree_contributes_nothing() {
        let tree = small_tree(2, 2);
        let mut z = LatentIndicators::all_active(tree.num_nodes());
        // deactivate one level-1 node and its children
        let off = tree.node_id(1, 0);
        z.active[off] = false;
        for &c in &tree.nodes[off].children {
            z.active[c] = false;
        }
        let rho = 0.4;
        let got = log_indicator_prior(&tree, &z, rho).unwrap();
        // level 1: one active (ln rho), one inactive (ln(1-rho));
        // level 2: only the active node's two children, both active (2 ln rho^2)
        let expect = rho.ln() + (1.0 - rho).ln() + 2.0 * (rho * rho).ln();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn heredity_violation_is_an_error() {
        let tree = small_tree(2, 2);
        let mut z = LatentIndicators::all_active(tree.num_nodes());
        let off = tree.node_id(1, 1);
        z.active[off] = false; // children of `off` stay active: violation
        assert!(log_indicator_prior(&tree, &z, 0.5).is_err());
    }

    #[test]
    fn heredity_prior_is_proper_by_enumeration() {
        // brute-force enumeration over all valid configurations
        for (levels, fanout) in [(1usize, 2usize), (2, 2)] {
            let tree = small_tree(levels, fanout);
            let n = tree.num_nodes();
            for &rho in &[0.1, 0.5, 0.93] {
                let mut total = 0.0;
                for mask in 0u32..(1 << (n - 1)) {
                    let mut z = LatentIndicators::all_active(n);
                    for id in 1..n {
                        z.active[id] = (mask >> (id - 1)) & 1 == 1;
                    }
                    if z.check_heredity(&tree).is_err() {
                        continue;
                    }
                    total += log_indicator_prior(&tree, &z, rho).unwrap().exp();
                }
                assert!((total - 1.0).abs() < 1e-12, "sum {total} at rho={rho}");
            }
        }
    }

    #[test]
    fn default_hyper_is_valid() {
        MixtureHyper::default().validate().unwrap();
        let mut bad = MixtureHyper::default();
        bad.alpha_tau2 = 0.0;
        assert!(bad.validate().is_err());
    }
}
