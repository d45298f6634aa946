//! Seeded synthetic-data generators for the two simulation studies.
//!
//! Study 1 draws data from the basis expansion itself on a generation tree,
//! with the weight blocks of nodes inside two opposite quadrants set to zero
//! (levels 1 and deeper; the level-0 block stays active). Study 2 glues two
//! independent stationary fields with different ranges at `x = 0.5` and
//! marks a random training subset.

use nalgebra::{Cholesky, DVector};
use rand::SeedableRng;
use rand::{seq::index::sample, Rng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisScaffold, BasisSystem, JITTER_LADDER};
use crate::covariance::{cov_matrix_sym, CovarianceParams};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{Location, PartitionMode, PartitionTree, Rect};
use crate::model::WeightsState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimStudy {
    /// Basis-expansion generator with zeroed weight quadrants.
    MraWeights,
    /// Two stationary halves with fast/slow correlation decay.
    TwoRegion,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SimSpec {
    pub study: SimStudy,
    pub n: usize,
    /// Size of the random training subset (two-region study).
    pub train: usize,
    pub sigma2: f64,
    /// Range of the generator (weights study).
    pub phi: f64,
    pub nu: f64,
    /// Ranges of the left (`x < 0.5`) and right halves (two-region study).
    pub phi_left: f64,
    pub phi_right: f64,
    pub tau2: f64,
    /// Generation tree shape (weights study).
    pub levels: usize,
    pub fanout: usize,
    pub knots: usize,
    /// Apply the zero-weight quadrant mask (weights study).
    pub zero_mask: bool,
    pub seed: u64,
}

impl SimSpec {
    /// Weights-recovery study defaults: 756 locations, generation tree
    /// `(M, J, r) = (3, 4, 9)`, `theta = (1, 0.1, 1.0)`, `tau2 = 0.05`.
    pub fn sim1(seed: u64) -> Self {
        SimSpec {
            study: SimStudy::MraWeights,
            n: 756,
            train: 756,
            sigma2: 1.0,
            phi: 0.1,
            nu: 1.0,
            phi_left: 1.0,
            phi_right: 0.01,
            tau2: 0.05,
            levels: 3,
            fanout: 4,
            knots: 9,
            zero_mask: true,
            seed,
        }
    }

    /// Two-region study defaults: 1012 locations, 756 of them training,
    /// `sigma2 = 1`, `nu = 1`, ranges 1.0 (left) and 0.01 (right),
    /// `tau2 = 0.05`.
    pub fn sim2(seed: u64) -> Self {
        SimSpec {
            study: SimStudy::TwoRegion,
            n: 1012,
            train: 756,
            sigma2: 1.0,
            phi: 0.1,
            nu: 1.0,
            phi_left: 1.0,
            phi_right: 0.01,
            tau2: 0.05,
            levels: 3,
            fanout: 4,
            knots: 9,
            zero_mask: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        if self.train > self.n {
            return Err(Error::Config("train subset larger than n".into()));
        }
        for (name, v) in [
            ("sigma2", self.sigma2),
            ("phi", self.phi),
            ("nu", self.nu),
            ("phi_left", self.phi_left),
            ("phi_right", self.phi_right),
            ("tau2", self.tau2),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Generator output for the weights study: the data plus the exact truth.
#[derive(Debug, Clone)]
pub struct Sim1Output {
    pub data: Dataset,
    pub tree: PartitionTree,
    pub true_weights: WeightsState,
    /// Per node: whether its weight block was forced to zero.
    pub masked: Vec<bool>,
}

fn uniform_locations(rng: &mut ChaCha20Rng, n: usize) -> Vec<Location> {
    (0..n)
        .map(|_| Location::new(rng.random(), rng.random()))
        .collect()
}

fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Nodes whose subregion lies inside the upper-right or lower-left quadrant
/// of the domain, at levels 1 and deeper.
pub fn quadrant_mask(tree: &PartitionTree) -> Vec<bool> {
    let d = tree.domain;
    let (cx, cy) = (0.5 * (d.x0 + d.x1), 0.5 * (d.y0 + d.y1));
    tree.nodes
        .iter()
        .map(|node| {
            if node.level == 0 {
                return false;
            }
            let r = node.rect.expect("weights study uses rectangular trees");
            let upper_right = r.x0 >= cx && r.y0 >= cy;
            let lower_left = r.x1 <= cx && r.y1 <= cy;
            upper_right || lower_left
        })
        .collect()
}

/// Generate the weights-recovery study: data from the basis expansion with
/// masked blocks set to zero. Returns the data and the generating truth.
pub fn simulate_sim1(spec: &SimSpec) -> Result<Sim1Output> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let locations = uniform_locations(&mut rng, spec.n);
    let tree = PartitionTree::build(
        Rect::unit_square(),
        spec.levels,
        spec.fanout,
        spec.knots,
        PartitionMode::RectangularGrid,
        spec.seed,
    )?;
    let params = CovarianceParams::new(spec.sigma2, spec.phi, spec.nu)?;
    let scaffold = BasisScaffold::new(&tree, &locations)?;
    let system = BasisSystem::build(&tree, &scaffold, &params)?;

    let masked = if spec.zero_mask {
        quadrant_mask(&tree)
    } else {
        vec![false; tree.num_nodes()]
    };

    let mut weights = WeightsState::zeros(&tree);
    let mut signal = DVector::<f64>::zeros(spec.n);
    for (nid, nb) in system.nodes.iter().enumerate() {
        let r = nb.prior_prec.nrows();
        if masked[nid] || r == 0 {
            continue;
        }
        // eta ~ N(0, K): solve L' eta = z with L L' = K^{-1}
        let z = DVector::from_fn(r, |_, _| standard_normal(&mut rng));
        let eta = nb
            .prec_chol
            .tr_solve_lower_triangular(&z)
            .expect("positive diagonal after factorization");
        let contrib = &nb.basis * &eta;
        for (row, &gi) in scaffold.obs_in_node[nid].iter().enumerate() {
            signal[gi] += contrib[row];
        }
        weights.blocks[nid] = eta;
    }

    let sd = spec.tau2.sqrt();
    let response: Vec<f64> = (0..spec.n)
        .map(|i| signal[i] + sd * standard_normal(&mut rng))
        .collect();

    Ok(Sim1Output {
        data: Dataset {
            locations,
            response,
            covariates: Vec::new(),
            region: None,
            train: None,
        },
        tree,
        true_weights: weights,
        masked,
    })
}

fn dense_gp_draw(
    rng: &mut ChaCha20Rng,
    locs: &[Location],
    params: &CovarianceParams,
) -> Result<DVector<f64>> {
    let n = locs.len();
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let base = cov_matrix_sym(locs, params);
    let mut chol = None;
    for &eps in &JITTER_LADDER {
        let mut c = base.clone();
        for i in 0..n {
            c[(i, i)] += eps * params.sigma2;
        }
        if let Some(f) = Cholesky::new(c) {
            chol = Some(f);
            break;
        }
    }
    let chol = chol.ok_or(Error::Factorization {
        level: 0,
        index: 0,
        max_jitter: *JITTER_LADDER.last().unwrap(),
    })?;
    let z = DVector::from_fn(n, |_, _| standard_normal(rng));
    Ok(chol.l() * z)
}

/// Generate the two-region study: independent mean-zero fields on the two
/// halves of the unit square, Gaussian noise, and a random training subset.
/// Truth labels: region 1 for `x < 0.5` (slow decay), region 2 otherwise.
pub fn simulate_sim2(spec: &SimSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let locations = uniform_locations(&mut rng, spec.n);
    let left_idx: Vec<usize> = (0..spec.n).filter(|&i| locations[i].x < 0.5).collect();
    let right_idx: Vec<usize> = (0..spec.n).filter(|&i| locations[i].x >= 0.5).collect();

    let left_params = CovarianceParams::new(spec.sigma2, spec.phi_left, spec.nu)?;
    let right_params = CovarianceParams::new(spec.sigma2, spec.phi_right, spec.nu)?;
    let left_locs: Vec<Location> = left_idx.iter().map(|&i| locations[i]).collect();
    let right_locs: Vec<Location> = right_idx.iter().map(|&i| locations[i]).collect();
    let w_left = dense_gp_draw(&mut rng, &left_locs, &left_params)?;
    let w_right = dense_gp_draw(&mut rng, &right_locs, &right_params)?;

    let mut signal = vec![0.0; spec.n];
    for (k, &i) in left_idx.iter().enumerate() {
        signal[i] = w_left[k];
    }
    for (k, &i) in right_idx.iter().enumerate() {
        signal[i] = w_right[k];
    }

    let sd = spec.tau2.sqrt();
    let response: Vec<f64> = signal
        .iter()
        .map(|w| w + sd * standard_normal(&mut rng))
        .collect();

    let mut train = vec![false; spec.n];
    for i in sample(&mut rng, spec.n, spec.train) {
        train[i] = true;
    }

    let region: Vec<u8> = locations
        .iter()
        .map(|s| if s.x < 0.5 { 1 } else { 2 })
        .collect();

    Ok(Dataset {
        locations,
        response,
        covariates: Vec::new(),
        region: Some(region),
        train: Some(train),
    })
}
