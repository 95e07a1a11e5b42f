//! Navigation graph over terrain cells and A* planning with a stochastic
//! edge cost.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::terrain::TerrainGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    pub w_xy: f64,
    pub w_z: f64,
    pub c_min: f64,
    pub c_max: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            w_xy: 1.0,
            w_z: 0.15,
            c_min: 0.0,
            c_max: 0.5,
        }
    }
}

impl CostParams {
    pub fn deterministic(self) -> Self {
        Self {
            c_min: 0.0,
            c_max: 0.0,
            ..self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavParams {
    pub max_walk_dh: f64,
    pub jump_radius: f64,
    /// Allowed landing height minus take-off height.
    pub jump_dh: [f64; 2],
    /// A cell with a 4-neighbor lower by more than this is a cliff cell.
    pub cliff_drop: f64,
    /// Height above both tops of the chord checked against walls.
    pub jump_clearance: f64,
    pub cost: CostParams,
}

impl Default for NavParams {
    fn default() -> Self {
        Self {
            max_walk_dh: 2.1,
            jump_radius: 2.4,
            jump_dh: [-2.1, 1.0],
            cliff_drop: 1.0,
            jump_clearance: 1.2,
            cost: CostParams::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NavNode {
    pub cell: [usize; 2],
    pub pos: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Walk,
    Jump,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NavEdge {
    pub from: usize,
    pub to: usize,
    pub kind: EdgeKind,
}

#[derive(Debug, Clone)]
pub struct NavGraph {
    pub rows: usize,
    pub cols: usize,
    pub nodes: Vec<NavNode>,
    pub edges: Vec<NavEdge>,
    /// Outgoing edge indices per node.
    pub outgoing: Vec<Vec<usize>>,
    pub params: NavParams,
}

impl NavGraph {
    pub fn node_id(&self, cell: [usize; 2]) -> Option<usize> {
        (cell[0] < self.rows && cell[1] < self.cols).then(|| cell[0] * self.cols + cell[1])
    }

    pub fn find_edge(&self, from: usize, to: usize) -> Option<&NavEdge> {
        self.outgoing
            .get(from)?
            .iter()
            .map(|&e| &self.edges[e])
            .find(|e| e.to == to)
    }

    pub fn jump_edges(&self) -> impl Iterator<Item = &NavEdge> {
        self.edges.iter().filter(|e| e.kind == EdgeKind::Jump)
    }
}

/// Closed segment against closed axis-aligned box, slab method.
pub fn line_box_intersect(
    a: [f64; 3],
    b: [f64; 3],
    center: [f64; 3],
    half_extents: [f64; 3],
) -> bool {
    const EPS: f64 = 1e-9;
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for k in 0..3 {
        let lo = center[k] - half_extents[k] - EPS;
        let hi = center[k] + half_extents[k] + EPS;
        let d = b[k] - a[k];
        if d == 0.0 {
            if a[k] < lo || a[k] > hi {
                return false;
            }
            continue;
        }
        let (mut ta, mut tb) = ((lo - a[k]) / d, (hi - a[k]) / d);
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
        if t0 > t1 {
            return false;
        }
    }
    true
}

fn is_cliff(terrain: &TerrainGrid, i: usize, j: usize, drop: f64) -> bool {
    let h = terrain.height(i, j);
    neighbors4(terrain.rows, terrain.cols, i, j).any(|(a, b)| h - terrain.height(a, b) > drop)
}

fn neighbors4(
    rows: usize,
    cols: usize,
    i: usize,
    j: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let cand = [
        (i.wrapping_sub(1), j),
        (i + 1, j),
        (i, j.wrapping_sub(1)),
        (i, j + 1),
    ];
    cand.into_iter().filter(move |&(a, b)| a < rows && b < cols)
}

/// Cells strictly between two cells whose centers the horizontal chord passes over.
fn cells_under_chord(terrain: &TerrainGrid, a: [usize; 2], b: [usize; 2]) -> Vec<(usize, usize)> {
    let pa = terrain.cell_center(a[0], a[1]);
    let pb = terrain.cell_center(b[0], b[1]);
    let len = (pb[0] - pa[0]).hypot(pb[1] - pa[1]);
    let steps = (4.0 * len / terrain.dx.min(terrain.dy)).ceil() as usize;
    let mut out = Vec::new();
    for s in 1..steps {
        let t = s as f64 / steps as f64;
        let c = terrain.nearest_cell(pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1]));
        if [c.0, c.1] != a && [c.0, c.1] != b && !out.contains(&c) {
            out.push(c);
        }
    }
    out
}

fn jump_blocked(terrain: &TerrainGrid, a: [usize; 2], b: [usize; 2], clearance: f64) -> bool {
    let (ha, hb) = (terrain.height(a[0], a[1]), terrain.height(b[0], b[1]));
    let ca = terrain.cell_center(a[0], a[1]);
    let cb = terrain.cell_center(b[0], b[1]);
    let p = [ca[0], ca[1], ha + clearance];
    let q = [cb[0], cb[1], hb + clearance];
    let bottom = terrain.min_height() - 1.0;
    let (xlo, xhi) = (ca[0].min(cb[0]) - terrain.dx, ca[0].max(cb[0]) + terrain.dx);
    let (ylo, yhi) = (ca[1].min(cb[1]) - terrain.dy, ca[1].max(cb[1]) + terrain.dy);
    let top_min = ha.max(hb);
    for i in 0..terrain.rows {
        for j in 0..terrain.cols {
            let h = terrain.height(i, j);
            if h <= top_min {
                continue;
            }
            let [x, y] = terrain.cell_center(i, j);
            if x < xlo || x > xhi || y < ylo || y > yhi {
                continue;
            }
            let center = [x, y, 0.5 * (h + bottom)];
            let half = [0.5 * terrain.dx, 0.5 * terrain.dy, 0.5 * (h - bottom)];
            if line_box_intersect(p, q, center, half) {
                return true;
            }
        }
    }
    false
}

/// Walk edges join 4-adjacent cells within `max_walk_dh`. Jump edges join
/// cliff cells within `jump_radius` and the `jump_dh` window whose chord
/// passes over a gap (a cell lower than both ends by more than `cliff_drop`)
/// and clears every wall.
pub fn build_graph(terrain: &TerrainGrid, params: &NavParams) -> Result<NavGraph> {
    terrain.validate()?;
    let (rows, cols) = (terrain.rows, terrain.cols);
    let nodes: Vec<NavNode> = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (i, j)))
        .map(|(i, j)| {
            let [x, y] = terrain.cell_center(i, j);
            NavNode {
                cell: [i, j],
                pos: [x, y, terrain.height(i, j)],
            }
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let h = terrain.height(i, j);
            for (a, b) in neighbors4(rows, cols, i, j) {
                if (terrain.height(a, b) - h).abs() <= params.max_walk_dh {
                    edges.push(NavEdge {
                        from: i * cols + j,
                        to: a * cols + b,
                        kind: EdgeKind::Walk,
                    });
                }
            }
        }
    }
    let cliff: Vec<bool> = (0..rows * cols)
        .map(|k| is_cliff(terrain, k / cols, k % cols, params.cliff_drop))
        .collect();
    let ri = (params.jump_radius / terrain.dx).floor() as usize;
    let rj = (params.jump_radius / terrain.dy).floor() as usize;
    for i in 0..rows {
        for j in 0..cols {
            if !cliff[i * cols + j] {
                continue;
            }
            let h = terrain.height(i, j);
            for a in i.saturating_sub(ri)..=(i + ri).min(rows - 1) {
                for b in j.saturating_sub(rj)..=(j + rj).min(cols - 1) {
                    if !cliff[a * cols + b] || (a, b) == (i, j) {
                        continue;
                    }
                    if a.abs_diff(i) + b.abs_diff(j) == 1 {
                        continue;
                    }
                    let (pa, pb) = (nodes[i * cols + j].pos, nodes[a * cols + b].pos);
                    if (pa[0] - pb[0]).hypot(pa[1] - pb[1]) > params.jump_radius {
                        continue;
                    }
                    let dh = pb[2] - h;
                    if dh < params.jump_dh[0] || dh > params.jump_dh[1] {
                        continue;
                    }
                    let floor = h.min(pb[2]) - params.cliff_drop;
                    let gap = cells_under_chord(terrain, [i, j], [a, b])
                        .iter()
                        .any(|&(x, y)| terrain.height(x, y) < floor);
                    if !gap || jump_blocked(terrain, [i, j], [a, b], params.jump_clearance) {
                        continue;
                    }
                    edges.push(NavEdge {
                        from: i * cols + j,
                        to: a * cols + b,
                        kind: EdgeKind::Jump,
                    });
                }
            }
        }
    }
    let mut outgoing = vec![Vec::new(); nodes.len()];
    for (k, e) in edges.iter().enumerate() {
        outgoing[e.from].push(k);
    }
    Ok(NavGraph {
        rows,
        cols,
        nodes,
        edges,
        outgoing,
        params: *params,
    })
}

/// Deterministic part of the edge cost.
pub fn edge_cost_base(x1: [f64; 3], x2: [f64; 3], cost: &CostParams) -> f64 {
    cost.w_xy * ((x1[0] - x2[0]).powi(2) + (x1[1] - x2[1]).powi(2))
        + cost.w_z * (x1[2] - x2[2]).powi(2)
}

pub fn sample_noise(cost: &CostParams, rng: &mut impl Rng) -> f64 {
    if cost.c_max > cost.c_min {
        rng.gen_range(cost.c_min..cost.c_max)
    } else {
        cost.c_min
    }
}

pub fn edge_cost(x1: [f64; 3], x2: [f64; 3], cost: &CostParams, rng: &mut impl Rng) -> f64 {
    edge_cost_base(x1, x2, cost) + sample_noise(cost, rng)
}

/// Full edge costs for one query: every edge gets one noise draw, in edge order.
pub fn sampled_edge_costs(graph: &NavGraph, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cost = &graph.params.cost;
    graph
        .edges
        .iter()
        .map(|e| {
            edge_cost(
                graph.nodes[e.from].pos,
                graph.nodes[e.to].pos,
                cost,
                &mut rng,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathResult {
    pub waypoints: Vec<NavNode>,
    pub kinds: Vec<EdgeKind>,
    pub total_cost: f64,
    pub rng_seed: u64,
}

impl PathResult {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn end(&self) -> [f64; 3] {
        self.waypoints.last().map_or([0.0; 3], |n| n.pos)
    }
}

#[derive(PartialEq)]
struct Open {
    f: f64,
    g: f64,
    node: usize,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| self.g.total_cmp(&other.g))
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Lower bound on the remaining cost: every edge moves at least the smaller
/// cell spacing horizontally, so its squared length is at least that spacing
/// times its length.
fn heuristic(graph: &NavGraph, a: usize, b: usize, step_min: f64) -> f64 {
    let (p, q) = (graph.nodes[a].pos, graph.nodes[b].pos);
    graph.params.cost.w_xy * step_min * (p[0] - q[0]).hypot(p[1] - q[1])
}

/// A* over the graph with per-edge noise drawn once from `seed`.
pub fn astar_plan(
    graph: &NavGraph,
    start: [usize; 2],
    goal: [usize; 2],
    seed: u64,
) -> Result<PathResult> {
    let bad = |c: [usize; 2]| {
        Error::OutOfBounds(format!("cell {c:?} outside {}x{}", graph.rows, graph.cols))
    };
    let s = graph.node_id(start).ok_or_else(|| bad(start))?;
    let t = graph.node_id(goal).ok_or_else(|| bad(goal))?;
    let costs = sampled_edge_costs(graph, seed);
    let step_min = graph
        .edges
        .iter()
        .map(|e| {
            let (p, q) = (graph.nodes[e.from].pos, graph.nodes[e.to].pos);
            (p[0] - q[0]).hypot(p[1] - q[1])
        })
        .fold(f64::INFINITY, f64::min);
    let step_min = if step_min.is_finite() { step_min } else { 0.0 };

    let n = graph.nodes.len();
    let mut g = vec![f64::INFINITY; n];
    let mut came: Vec<Option<usize>> = vec![None; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    g[s] = 0.0;
    open.push(Open {
        f: heuristic(graph, s, t, step_min),
        g: 0.0,
        node: s,
    });
    while let Some(Open { g: gc, node, .. }) = open.pop() {
        if closed[node] || gc > g[node] {
            continue;
        }
        if node == t {
            break;
        }
        closed[node] = true;
        for &e in &graph.outgoing[node] {
            let to = graph.edges[e].to;
            let cand = gc + costs[e];
            if cand < g[to] {
                g[to] = cand;
                came[to] = Some(e);
                open.push(Open {
                    f: cand + heuristic(graph, to, t, step_min),
                    g: cand,
                    node: to,
                });
            }
        }
    }
    if !g[t].is_finite() {
        return Err(Error::NoPath { start, goal });
    }
    let mut nodes = vec![t];
    let mut kinds = Vec::new();
    let mut cur = t;
    while let Some(e) = came[cur] {
        kinds.push(graph.edges[e].kind);
        cur = graph.edges[e].from;
        nodes.push(cur);
    }
    nodes.reverse();
    kinds.reverse();
    Ok(PathResult {
        waypoints: nodes.into_iter().map(|k| graph.nodes[k]).collect(),
        kinds,
        total_cost: g[t],
        rng_seed: seed,
    })
}

/// Start and goal cells near opposite borders along the row axis.
pub fn border_endpoints(graph: &NavGraph, rng: &mut impl Rng) -> ([usize; 2], [usize; 2]) {
    let band = (graph.rows / 8).max(1);
    let start = [rng.gen_range(0..band), rng.gen_range(0..graph.cols)];
    let goal = [
        graph.rows - 1 - rng.gen_range(0..band),
        rng.gen_range(0..graph.cols),
    ];
    (start, goal)
}
