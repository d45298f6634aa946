//! Spatial domain, recursive partition tree, knot placement, and region
//! assignment.
//!
//! The domain is a rectangle that is recursively split into `J` subregions
//! per node for `M` levels. Every node carries `r` knots. Two partition modes
//! are supported: an equidistant rectangular grid, and a nested Voronoi
//! tessellation where each node's subregion is the union of the complete
//! Voronoi polygons of its seeds within the parent subregion.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in the two-dimensional coordinate plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Location {
    pub x: f64,
    pub y: f64,
}

impl Location {
    pub fn new(x: f64, y: f64) -> Self {
        Location { x, y }
    }

    /// Euclidean distance.
    pub fn dist(&self, other: &Location) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Axis-aligned rectangle `[x0, x1] x [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Rect { x0, y0, x1, y1 }
    }

    /// The unit square `[0,1]^2`.
    pub fn unit_square() -> Self {
        Rect::new(0.0, 0.0, 1.0, 1.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Closed containment test, used for the outer domain boundary.
    pub fn contains(&self, s: &Location) -> bool {
        s.x >= self.x0 && s.x <= self.x1 && s.y >= self.y0 && s.y <= self.y1
    }

    pub fn diameter(&self) -> f64 {
        self.width().hypot(self.height())
    }
}

/// How subregions and knots are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionMode {
    RectangularGrid,
    Voronoi,
}

/// One node of the partition tree.
///
/// Nodes are stored in breadth-first order (level 0 first, nodes within a
/// level ordered by `index_in_level`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeNode {
    /// Resolution level, 0 at the root.
    pub level: usize,
    /// 0-based index among the `J^level` nodes of this level.
    pub index_in_level: usize,
    /// Global id of the parent node, `None` for the root.
    pub parent: Option<usize>,
    /// Global ids of the children, empty at the final level.
    pub children: Vec<usize>,
    /// Bounding rectangle (rectangular mode only).
    pub rect: Option<Rect>,
    /// Seeds defining the subregion in Voronoi mode. In rectangular mode this
    /// is empty; in Voronoi mode it equals `knots` unless observation leaves
    /// replaced the knots.
    pub seeds: Vec<Location>,
    /// The node's knots.
    pub knots: Vec<Location>,
}

/// The recursive `(M, J, r)` domain decomposition with knots per node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionTree {
    pub domain: Rect,
    /// Number of levels beyond level 0.
    pub levels: usize,
    /// Children per node.
    pub fanout: usize,
    /// Knots per node (level-M nodes may deviate when observation locations
    /// are used as final-level knots).
    pub knots_per_node: usize,
    pub mode: PartitionMode,
    pub seed: u64,
    pub nodes: Vec<TreeNode>,
    level_offsets: Vec<usize>,
}

/// Per-location, per-level node ids, consistent with the tree nesting.
#[derive(Debug, Clone)]
pub struct RegionAssignment {
    /// `paths[i][m]` is the global id of the level-`m` node containing
    /// location `i`.
    pub paths: Vec<Vec<usize>>,
}

fn grid_split(fanout: usize) -> Result<(usize, usize)> {
    match fanout {
        2 => Ok((2, 1)),
        4 => Ok((2, 2)),
        9 => Ok((3, 3)),
        j => Err(Error::Config(format!(
            "fanout J={j} admits no rectangular grid split (supported: 2, 4, 9)"
        ))),
    }
}

/// Split `r` into a `gx x gy` grid with `gx >= gy` and `gx * gy = r`.
fn knot_grid(r: usize) -> (usize, usize) {
    let mut gy = (r as f64).sqrt().floor() as usize;
    while gy > 1 && r % gy != 0 {
        gy -= 1;
    }
    (r / gy.max(1), gy.max(1))
}

/// Equidistant knots strictly inside `rect`, centered in a `gx x gy` grid.
fn grid_knots(rect: &Rect, r: usize) -> Vec<Location> {
    let (gx, gy) = knot_grid(r);
    let mut knots = Vec::with_capacity(r);
    for iy in 0..gy {
        for ix in 0..gx {
            knots.push(Location::new(
                rect.x0 + (ix as f64 + 0.5) * rect.width() / gx as f64,
                rect.y0 + (iy as f64 + 0.5) * rect.height() / gy as f64,
            ));
        }
    }
    knots
}

impl PartitionTree {
    /// Build the tree with grid or Voronoi knots.
    ///
    /// In rectangular mode the `J` children of a node tile its rectangle and
    /// knots sit on an equidistant grid inside each subregion. In Voronoi
    /// mode seeds are drawn uniformly inside the parent subregion with the
    /// given RNG seed and each child's subregion is the union of the complete
    /// Voronoi polygons of its `r` seeds among the `J*r` seeds of the parent.
    pub fn build(
        domain: Rect,
        levels: usize,
        fanout: usize,
        knots_per_node: usize,
        mode: PartitionMode,
        seed: u64,
    ) -> Result<Self> {
        Self::build_inner(domain, levels, fanout, knots_per_node, mode, seed, None)
    }

    /// Like [`PartitionTree::build`], but level-`M` knots are replaced by the
    /// observation locations falling inside each final-level subregion, so
    /// the final-level knot count varies per node.
    pub fn build_with_observation_leaves(
        domain: Rect,
        levels: usize,
        fanout: usize,
        knots_per_node: usize,
        mode: PartitionMode,
        seed: u64,
        observations: &[Location],
    ) -> Result<Self> {
        Self::build_inner(
            domain,
            levels,
            fanout,
            knots_per_node,
            mode,
            seed,
            Some(observations),
        )
    }

    fn build_inner(
        domain: Rect,
        levels: usize,
        fanout: usize,
        knots_per_node: usize,
        mode: PartitionMode,
        seed: u64,
        observation_leaves: Option<&[Location]>,
    ) -> Result<Self> {
        if !(domain.width() > 0.0 && domain.height() > 0.0) {
            return Err(Error::Config("degenerate (zero-area) domain".into()));
        }
        if knots_per_node == 0 {
            return Err(Error::Config("knots per node must be >= 1".into()));
        }
        if levels > 0 && fanout < 2 {
            return Err(Error::Config("fanout J must be >= 2 when M >= 1".into()));
        }
        if mode == PartitionMode::RectangularGrid && levels > 0 {
            grid_split(fanout)?;
        }
        if let Some(obs) = observation_leaves {
            for s in obs {
                if !domain.contains(s) {
                    return Err(Error::OutsideDomain { x: s.x, y: s.y });
                }
            }
        }

        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut nodes: Vec<TreeNode> = Vec::new();
        let mut level_offsets = vec![0usize];

        // Level 0 covers the whole domain.
        let root = match mode {
            PartitionMode::RectangularGrid => TreeNode {
                level: 0,
                index_in_level: 0,
                parent: None,
                children: Vec::new(),
                rect: Some(domain),
                seeds: Vec::new(),
                knots: grid_knots(&domain, knots_per_node),
            },
            PartitionMode::Voronoi => {
                let seeds = draw_uniform(&mut rng, &domain, knots_per_node);
                TreeNode {
                    level: 0,
                    index_in_level: 0,
                    parent: None,
                    children: Vec::new(),
                    rect: Some(domain),
                    seeds: seeds.clone(),
                    knots: seeds,
                }
            }
        };
        nodes.push(root);

        for m in 1..=levels {
            level_offsets.push(nodes.len());
            let parent_ids: Vec<usize> = (level_offsets[m - 1]..level_offsets[m]).collect();
            for &pid in &parent_ids {
                match mode {
                    PartitionMode::RectangularGrid => {
                        let prect = nodes[pid].rect.unwrap();
                        let (jx, jy) = grid_split(fanout)?;
                        let (cw, ch) = (prect.width() / jx as f64, prect.height() / jy as f64);
                        for row in 0..jy {
                            for col in 0..jx {
                                let rect = Rect::new(
                                    prect.x0 + col as f64 * cw,
                                    prect.y0 + row as f64 * ch,
                                    prect.x0 + (col + 1) as f64 * cw,
                                    prect.y0 + (row + 1) as f64 * ch,
                                );
                                let id = nodes.len();
                                let idx = nodes[pid].index_in_level * fanout + row * jx + col;
                                nodes[pid].children.push(id);
                                nodes.push(TreeNode {
                                    level: m,
                                    index_in_level: idx,
                                    parent: Some(pid),
                                    children: Vec::new(),
                                    rect: Some(rect),
                                    seeds: Vec::new(),
                                    knots: grid_knots(&rect, knots_per_node),
                                });
                            }
                        }
                    }
                    PartitionMode::Voronoi => {
                        // Seeds drawn uniformly inside the parent subregion by
                        // rejection from the domain rectangle.
                        let seeds = draw_uniform_in_node(&mut rng, &nodes, &level_offsets, pid, fanout * knots_per_node);
                        for c in 0..fanout {
                            let id = nodes.len();
                            let idx = nodes[pid].index_in_level * fanout + c;
                            let own: Vec<Location> =
                                seeds[c * knots_per_node..(c + 1) * knots_per_node].to_vec();
                            nodes[pid].children.push(id);
                            nodes.push(TreeNode {
                                level: m,
                                index_in_level: idx,
                                parent: Some(pid),
                                children: Vec::new(),
                                rect: None,
                                seeds: own.clone(),
                                knots: own,
                            });
                        }
                    }
                }
            }
        }

        let mut tree = PartitionTree {
            domain,
            levels,
            fanout,
            knots_per_node,
            mode,
            seed,
            nodes,
            level_offsets,
        };

        if let Some(obs) = observation_leaves {
            // Replace final-level knots by the observations inside each leaf.
            let mut per_leaf: Vec<Vec<Location>> = vec![Vec::new(); tree.nodes.len()];
            for s in obs {
                let path = tree.locate(s)?;
                per_leaf[path[levels]].push(*s);
            }
            for id in tree.level_range(levels) {
                tree.nodes[id].knots = std::mem::take(&mut per_leaf[id]);
            }
        }

        Ok(tree)
    }

    /// Global ids of the nodes at level `m`.
    pub fn level_range(&self, m: usize) -> std::ops::Range<usize> {
        let start = self.level_offsets[m];
        let end = if m + 1 < self.level_offsets.len() {
            self.level_offsets[m + 1]
        } else {
            self.nodes.len()
        };
        start..end
    }

    pub fn node_id(&self, level: usize, index_in_level: usize) -> usize {
        self.level_offsets[level] + index_in_level
    }

    pub fn node(&self, level: usize, index_in_level: usize) -> &TreeNode {
        &self.nodes[self.node_id(level, index_in_level)]
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Ancestor path of a node, from the root down to the node itself.
    pub fn ancestor_path(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Node ids containing `s`, one per level from 0 to `M`.
    ///
    /// Rectangular subregions are half-open (closed on the low edge, open on
    /// the high edge) with the domain's top and right edges closed, so the
    /// assignment is a function. Voronoi membership descends to the nearest
    /// seed among the seeds of the current node's children.
    pub fn locate(&self, s: &Location) -> Result<Vec<usize>> {
        if !s.is_finite() || !self.domain.contains(s) {
            return Err(Error::OutsideDomain { x: s.x, y: s.y });
        }
        let mut path = Vec::with_capacity(self.levels + 1);
        let mut cur = 0usize;
        path.push(cur);
        for _m in 1..=self.levels {
            let node = &self.nodes[cur];
            cur = match self.mode {
                PartitionMode::RectangularGrid => {
                    let rect = node.rect.unwrap();
                    let (jx, jy) = grid_split(self.fanout)?;
                    let col = (((s.x - rect.x0) / rect.width() * jx as f64).floor() as usize)
                        .min(jx - 1);
                    let row = (((s.y - rect.y0) / rect.height() * jy as f64).floor() as usize)
                        .min(jy - 1);
                    node.children[row * jx + col]
                }
                PartitionMode::Voronoi => {
                    let mut best = node.children[0];
                    let mut best_d = f64::INFINITY;
                    for &cid in &node.children {
                        for seed in &self.nodes[cid].seeds {
                            let d = s.dist(seed);
                            if d < best_d {
                                best_d = d;
                                best = cid;
                            }
                        }
                    }
                    best
                }
            };
            path.push(cur);
        }
        Ok(path)
    }

    /// Assign every location to its nested sequence of subregions.
    pub fn assign_regions(&self, locations: &[Location]) -> Result<RegionAssignment> {
        let paths = locations
            .iter()
            .map(|s| self.locate(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(RegionAssignment { paths })
    }

    /// Serialize the tree (ids, geometry, knots, seeds) to a JSON string.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn draw_uniform(rng: &mut ChaCha20Rng, rect: &Rect, n: usize) -> Vec<Location> {
    (0..n)
        .map(|_| {
            Location::new(
                rect.x0 + rng.random::<f64>() * rect.width(),
                rect.y0 + rng.random::<f64>() * rect.height(),
            )
        })
        .collect()
}

/// Rejection-sample `n` points uniformly inside the subregion of node `pid`,
/// using the partially built node table.
fn draw_uniform_in_node(
    rng: &mut ChaCha20Rng,
    nodes: &[TreeNode],
    level_offsets: &[usize],
    pid: usize,
    n: usize,
) -> Vec<Location> {
    let domain = nodes[0].rect.unwrap();
    let target_level = nodes[pid].level;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = Location::new(
            domain.x0 + rng.random::<f64>() * domain.width(),
            domain.y0 + rng.random::<f64>() * domain.height(),
        );
        // Descend the already-built levels by nearest seed.
        let mut cur = 0usize;
        for m in 1..=target_level {
            let _ = m;
            let node = &nodes[cur];
            let mut best = node.children[0];
            let mut best_d = f64::INFINITY;
            for &cid in &node.children {
                for seed in &nodes[cid].seeds {
                    let d = s.dist(seed);
                    if d < best_d {
                        best_d = d;
                        best = cid;
                    }
                }
            }
            cur = best;
        }
        let _ = level_offsets;
        if cur == pid {
            out.push(s);
        }
    }
    out
}
