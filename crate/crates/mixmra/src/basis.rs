//! Recursive predictive-process basis construction.
//!
//! Starting from the full covariance kernel, each level conditions the
//! remainder process on the knots of the current subregion and passes the
//! Schur-complement remainder to its children, with remainders independent
//! across same-level subregions. For node `P` at level `m` with ancestor
//! knot sets `Q_0, ..., Q_m` (`Q_m` the node's own knots):
//!
//! ```text
//! v_0 = C
//! b_P(s)   = v_m(s, Q_m)                      for s inside the node's region
//! K_P^{-1} = v_m(Q_m, Q_m)
//! v_{m+1}(s1, s2) = v_m(s1, s2) - b_P(s1)' K_P b_P(s2)   (same region)
//!                 = 0                                     (different regions)
//! ```
//!
//! The recursion is materialized through cached knot cross-covariances, never
//! by forming dense `n x n` objects (except in the testing utility
//! [`BasisSystem::implied_covariance`]). Weight blocks are a priori
//! independent across nodes with `eta_P ~ N(0, K_P)`.

use nalgebra::{Cholesky, DMatrix, DVector, RowDVector};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::covariance::{matern, CovarianceParams, MaternKernel};
use crate::error::{Error, Result};
use crate::geometry::{Location, PartitionTree};

/// Jitter ladder added to the diagonal of `v_m(Q, Q)` (scaled by `sigma2`)
/// before factorization; the recursion subtracts nearly equal quantities at
/// deep levels.
pub const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Distance caches and bookkeeping shared by all basis builds over one
/// (tree, locations) pair. Rebuilding the basis at new covariance parameters
/// reuses the scaffold, so no coordinate geometry is redone.
#[derive(Debug, Clone)]
pub struct BasisScaffold {
    pub n_obs: usize,
    /// Per node: sorted indices of the observations inside the node's region.
    pub obs_in_node: Vec<Vec<usize>>,
    /// Per node: position of each of its observations within the parent's
    /// observation list.
    rows_in_parent: Vec<Vec<usize>>,
    /// Per node: distances from in-region observations to the node's knots.
    dist_obs_knots: Vec<DMatrix<f64>>,
    /// Per node and ancestor level `l = 0..=level`: distances from the node's
    /// knots to the ancestor's knots (the last entry is knot-to-knot within
    /// the node).
    dist_knot_anc: Vec<Vec<DMatrix<f64>>>,
    /// Per node: ancestor path from the root down to the node itself.
    pub ancestors: Vec<Vec<usize>>,
    /// Stacked offset of each node's weight block.
    pub weight_offset: Vec<usize>,
    pub total_weights: usize,
}

impl BasisScaffold {
    pub fn new(tree: &PartitionTree, locations: &[Location]) -> Result<Self> {
        let assignment = tree.assign_regions(locations)?;
        let n_nodes = tree.num_nodes();
        let mut obs_in_node: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
        for (i, path) in assignment.paths.iter().enumerate() {
            for &nid in path {
                obs_in_node[nid].push(i);
            }
        }

        let mut rows_in_parent = vec![Vec::new(); n_nodes];
        for nid in 0..n_nodes {
            if let Some(pid) = tree.nodes[nid].parent {
                rows_in_parent[nid] = obs_in_node[nid]
                    .iter()
                    .map(|gi| obs_in_node[pid].binary_search(gi).expect("child obs in parent"))
                    .collect();
            }
        }

        let ancestors: Vec<Vec<usize>> = (0..n_nodes).map(|id| tree.ancestor_path(id)).collect();

        let mut dist_obs_knots = Vec::with_capacity(n_nodes);
        let mut dist_knot_anc = Vec::with_capacity(n_nodes);
        for nid in 0..n_nodes {
            let knots = &tree.nodes[nid].knots;
            let obs = &obs_in_node[nid];
            dist_obs_knots.push(DMatrix::from_fn(obs.len(), knots.len(), |i, j| {
                locations[obs[i]].dist(&knots[j])
            }));
            let per_anc = ancestors[nid]
                .iter()
                .map(|&aid| {
                    let aknots = &tree.nodes[aid].knots;
                    DMatrix::from_fn(knots.len(), aknots.len(), |i, j| {
                        knots[i].dist(&aknots[j])
                    })
                })
                .collect();
            dist_knot_anc.push(per_anc);
        }

        let mut weight_offset = Vec::with_capacity(n_nodes);
        let mut total = 0usize;
        for nid in 0..n_nodes {
            weight_offset.push(total);
            total += tree.nodes[nid].knots.len();
        }

        Ok(BasisScaffold {
            n_obs: locations.len(),
            obs_in_node,
            rows_in_parent,
            dist_obs_knots,
            dist_knot_anc,
            ancestors,
            weight_offset,
            total_weights: total,
        })
    }
}

/// Per-node pieces of the built basis.
#[derive(Debug, Clone)]
pub struct NodeBasis {
    /// `B_P`: basis functions evaluated at the in-region observations
    /// (rows follow `scaffold.obs_in_node`).
    pub basis: DMatrix<f64>,
    /// Jittered `K_P^{-1} = v_m(Q_P, Q_P)`.
    pub prior_prec: DMatrix<f64>,
    /// Lower Cholesky factor `L` with `L L' = K_P^{-1}`.
    pub prec_chol: DMatrix<f64>,
    /// `ln det K_P^{-1}`.
    pub log_det_prec: f64,
    /// `U_P[k] = K_{anc(k)} v_k(Q_{anc(k)}, Q_P)` for `k < level`; these carry
    /// the recursion to descendants and to off-grid evaluation points.
    pub cross_solve: Vec<DMatrix<f64>>,
    /// Cached `B_P' B_P`.
    pub btb: DMatrix<f64>,
    /// Jitter rung actually used (multiplied by `sigma2` on the diagonal).
    pub jitter: f64,
}

/// The basis matrices and weight-prior factorizations for every node.
#[derive(Debug, Clone)]
pub struct BasisSystem {
    pub params: CovarianceParams,
    pub nodes: Vec<NodeBasis>,
    /// Nodes that needed more than the first jitter rung: `(node id, eps)`.
    pub jitter_events: Vec<(usize, f64)>,
}

fn cho_solve(l: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let y = l
        .solve_lower_triangular(rhs)
        .expect("triangular solve after successful factorization");
    l.tr_solve_lower_triangular(&y)
        .expect("triangular solve after successful factorization")
}

fn cho_solve_vec(l: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let y = l
        .solve_lower_triangular(rhs)
        .expect("triangular solve after successful factorization");
    l.tr_solve_lower_triangular(&y)
        .expect("triangular solve after successful factorization")
}

fn chol_with_jitter(
    mut m: DMatrix<f64>,
    sigma2: f64,
    level: usize,
    index: usize,
) -> Result<(DMatrix<f64>, f64)> {
    // symmetrize accumulated product round-off before factorizing
    let r = m.nrows();
    for i in 0..r {
        for j in (i + 1)..r {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    for &eps in &JITTER_LADDER {
        let mut jittered = m.clone();
        for i in 0..r {
            jittered[(i, i)] += eps * sigma2;
        }
        if let Some(chol) = Cholesky::new(jittered) {
            return Ok((chol.unpack(), eps));
        }
    }
    Err(Error::Factorization {
        level,
        index,
        max_jitter: *JITTER_LADDER.last().unwrap(),
    })
}

struct BuiltNode {
    node: NodeBasis,
    /// `v_l(S_P, Q_{anc l})` for `l = 0..=level`; consumed by the children.
    d_list: Vec<DMatrix<f64>>,
}

fn build_node(
    id: usize,
    tree: &PartitionTree,
    scaffold: &BasisScaffold,
    params: &CovarianceParams,
    done: &[Option<BuiltNode>],
) -> Result<BuiltNode> {
    let level = tree.nodes[id].level;
    let anc = &scaffold.ancestors[id];
    let mk = MaternKernel::new(params);
    let kernel = |d: &DMatrix<f64>| d.map(|x| mk.eval(x));

    // Knot-side recursion: V_P[l] = v_l(Q_P, Q_anc(l)) and the solved
    // cross terms U_P[l].
    let mut v_list: Vec<DMatrix<f64>> = Vec::with_capacity(level);
    let mut u_list: Vec<DMatrix<f64>> = Vec::with_capacity(level);
    for l in 0..level {
        let mut c = kernel(&scaffold.dist_knot_anc[id][l]);
        let anc_l = done[anc[l]].as_ref().expect("ancestor built");
        for k in 0..l {
            c -= &v_list[k] * &anc_l.node.cross_solve[k];
        }
        let u = cho_solve(&anc_l.node.prec_chol, &c.transpose());
        v_list.push(c);
        u_list.push(u);
    }

    // Prior precision K^{-1} = v_m(Q_P, Q_P).
    let mut prec = kernel(&scaffold.dist_knot_anc[id][level]);
    for k in 0..level {
        prec -= &v_list[k] * &u_list[k];
    }
    let (prec_chol, jitter) =
        chol_with_jitter(prec, params.sigma2, level, tree.nodes[id].index_in_level)?;
    let mut prior_prec = &prec_chol * prec_chol.transpose();
    // keep the stored precision exactly symmetric
    for i in 0..prior_prec.nrows() {
        for j in (i + 1)..prior_prec.nrows() {
            prior_prec[(j, i)] = prior_prec[(i, j)];
        }
    }
    let log_det_prec = 2.0 * prec_chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();

    // Observation-side recursion: D_P[l] rows come straight from the parent,
    // only the own-level block needs fresh kernel values.
    let mut d_list: Vec<DMatrix<f64>> = Vec::with_capacity(level + 1);
    if let Some(pid) = tree.nodes[id].parent {
        let parent = done[pid].as_ref().expect("parent built");
        let rows = &scaffold.rows_in_parent[id];
        for l in 0..level {
            d_list.push(parent.d_list[l].select_rows(rows.iter()));
        }
    }
    let mut basis = kernel(&scaffold.dist_obs_knots[id]);
    for k in 0..level {
        basis -= &d_list[k] * &u_list[k];
    }
    let btb = basis.transpose() * &basis;
    d_list.push(basis.clone());

    Ok(BuiltNode {
        node: NodeBasis {
            basis,
            prior_prec,
            prec_chol,
            log_det_prec,
            cross_solve: u_list,
            btb,
            jitter,
        },
        d_list,
    })
}

impl BasisSystem {
    /// Build basis matrices and weight-prior factorizations for all nodes.
    /// Same-level sibling nodes are processed concurrently; the result is
    /// identical to the sequential order.
    pub fn build(
        tree: &PartitionTree,
        scaffold: &BasisScaffold,
        params: &CovarianceParams,
    ) -> Result<Self> {
        let n_nodes = tree.num_nodes();
        let mut done: Vec<Option<BuiltNode>> = (0..n_nodes).map(|_| None).collect();
        for m in 0..=tree.levels {
            let ids: Vec<usize> = tree.level_range(m).collect();
            #[cfg(feature = "parallel")]
            let built: Vec<(usize, Result<BuiltNode>)> = {
                let done_ref = &done;
                ids.par_iter()
                    .map(|&id| (id, build_node(id, tree, scaffold, params, done_ref)))
                    .collect()
            };
            #[cfg(not(feature = "parallel"))]
            let built: Vec<(usize, Result<BuiltNode>)> = ids
                .iter()
                .map(|&id| (id, build_node(id, tree, scaffold, params, &done)))
                .collect();
            for (id, b) in built {
                done[id] = Some(b?);
            }
        }
        let mut jitter_events = Vec::new();
        let nodes: Vec<NodeBasis> = done
            .into_iter()
            .enumerate()
            .map(|(id, b)| {
                let b = b.unwrap();
                if b.node.jitter > JITTER_LADDER[0] {
                    jitter_events.push((id, b.node.jitter));
                }
                b.node
            })
            .collect();
        Ok(BasisSystem {
            params: *params,
            nodes,
            jitter_events,
        })
    }

    /// Exact rescaling of the system to a new marginal variance. All basis
    /// and prior blocks scale by known powers of `c = new / old`, so no
    /// kernel evaluations are needed.
    pub fn rescaled(&self, new_sigma2: f64) -> Self {
        let c = new_sigma2 / self.params.sigma2;
        let sqrt_c = c.sqrt();
        let nodes = self
            .nodes
            .iter()
            .map(|nb| NodeBasis {
                basis: &nb.basis * c,
                prior_prec: &nb.prior_prec * c,
                prec_chol: &nb.prec_chol * sqrt_c,
                log_det_prec: nb.log_det_prec + nb.prior_prec.nrows() as f64 * c.ln(),
                cross_solve: nb.cross_solve.clone(),
                btb: &nb.btb * (c * c),
                jitter: nb.jitter,
            })
            .collect();
        BasisSystem {
            params: CovarianceParams {
                sigma2: new_sigma2,
                ..self.params
            },
            nodes,
            jitter_events: self.jitter_events.clone(),
        }
    }

    /// Basis row at an arbitrary location, as `(node id, values)` blocks for
    /// the nodes along the location's region path. Blocks for all other
    /// nodes are zero.
    pub fn evaluate_path(
        &self,
        tree: &PartitionTree,
        s: &Location,
    ) -> Result<Vec<(usize, RowDVector<f64>)>> {
        let path = tree.locate(s)?;
        let mut rows: Vec<(usize, RowDVector<f64>)> = Vec::with_capacity(path.len());
        let mk = MaternKernel::new(&self.params);
        for (l, &nid) in path.iter().enumerate() {
            let knots = &tree.nodes[nid].knots;
            let mut c =
                RowDVector::from_fn(knots.len(), |_, j| mk.eval(s.dist(&knots[j])));
            for k in 0..l {
                c -= &rows[k].1 * &self.nodes[nid].cross_solve[k];
            }
            rows.push((nid, c));
        }
        Ok(rows)
    }

    /// Dense stacked basis row over all `(node, knot)` weights; entries are
    /// zero for nodes whose region excludes `s`.
    pub fn evaluate(
        &self,
        tree: &PartitionTree,
        scaffold: &BasisScaffold,
        s: &Location,
    ) -> Result<Vec<f64>> {
        let mut row = vec![0.0; scaffold.total_weights];
        for (nid, values) in self.evaluate_path(tree, s)? {
            let off = scaffold.weight_offset[nid];
            row[off..off + values.len()].copy_from_slice(values.transpose().as_slice());
        }
        Ok(row)
    }

    /// Remainder kernel `v_m(s1, s2)`: zero when the two points fall in
    /// different level-`m` regions, otherwise the Schur-complement remainder
    /// after conditioning on the knots of levels `0..m`.
    pub fn remainder_cov(
        &self,
        tree: &PartitionTree,
        s1: &Location,
        s2: &Location,
        m: usize,
    ) -> Result<f64> {
        debug_assert!(m <= tree.levels + 1);
        let p1 = tree.locate(s1)?;
        let p2 = tree.locate(s2)?;
        // different regions at resolution m (beyond the last level the
        // level-M partition applies)
        if m > 0 && p1[m.min(tree.levels)] != p2[m.min(tree.levels)] {
            return Ok(0.0);
        }
        let r1 = self.evaluate_path(tree, s1)?;
        let r2 = self.evaluate_path(tree, s2)?;
        let mut v = matern(s1.dist(s2), &self.params);
        for l in 0..m {
            let nid = r1[l].0;
            let w2 = cho_solve_vec(&self.nodes[nid].prec_chol, &r2[l].1.transpose());
            v -= (&r1[l].1 * &w2)[(0, 0)];
        }
        Ok(v)
    }

    /// Covariance matrix of the basis expansion at the observation
    /// locations, `sum_P B_P K_P B_P'`. Testing utility; materializes an
    /// `n x n` matrix.
    pub fn implied_covariance(&self, scaffold: &BasisScaffold) -> DMatrix<f64> {
        let n = scaffold.n_obs;
        let mut out = DMatrix::<f64>::zeros(n, n);
        for (nid, nb) in self.nodes.iter().enumerate() {
            if nb.basis.nrows() == 0 || nb.basis.ncols() == 0 {
                continue;
            }
            let w = cho_solve(&nb.prec_chol, &nb.basis.transpose());
            let block = &nb.basis * w;
            let obs = &scaffold.obs_in_node[nid];
            for (bi, &gi) in obs.iter().enumerate() {
                for (bj, &gj) in obs.iter().enumerate() {
                    out[(gi, gj)] += block[(bi, bj)];
                }
            }
        }
        out
    }

    /// `K_P x` through the stored factorization.
    pub fn apply_prior_cov(&self, nid: usize, x: &DVector<f64>) -> DVector<f64> {
        cho_solve_vec(&self.nodes[nid].prec_chol, x)
    }

    pub fn total_weights(&self) -> usize {
        self.nodes.iter().map(|n| n.prior_prec.nrows()).sum()
    }
}
