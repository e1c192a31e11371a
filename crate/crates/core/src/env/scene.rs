use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EnvError;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub n_nodes: usize,
    /// Side of the square floor area, in meters.
    pub area_side: f64,
    pub connect_radius: f64,
    pub n_landmarks: usize,
    /// Minimum distance between two placed nodes.
    pub min_separation: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self { n_nodes: 30, area_side: 10.0, connect_radius: 2.2, n_landmarks: 16, min_separation: 0.8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneNode {
    pub id: usize,
    pub pos: [f64; 2],
    pub landmark: usize,
}

/// Connected navigation graph with Euclidean edge weights and a precomputed
/// all-pairs geodesic table. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    pub scene_id: u64,
    pub n_landmarks: usize,
    nodes: Vec<SceneNode>,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    geodesic: Vec<f64>,
}

#[derive(Clone, Copy, PartialEq)]
struct Frontier {
    dist: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on distance, ties broken by lower node id
        other.dist.total_cmp(&self.dist).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Bearing from `a` to `b` in `[0, 2π)`, counter-clockwise from +x.
pub fn bearing(a: [f64; 2], b: [f64; 2]) -> f64 {
    (b[1] - a[1]).atan2(b[0] - a[0]).rem_euclid(TAU)
}

impl SceneGraph {
    /// Builds a scene from explicit nodes and undirected edges, validating
    /// ids, landmarks, and connectivity.
    pub fn from_parts(
        scene_id: u64,
        n_landmarks: usize,
        nodes: Vec<SceneNode>,
        edges: Vec<(usize, usize)>,
    ) -> Result<Self, EnvError> {
        let n = nodes.len();
        if n == 0 {
            return Err(EnvError::Invalid("scene has no nodes".into()));
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.id != i {
                return Err(EnvError::Invalid(format!("node at index {i} has id {}", node.id)));
            }
            if node.landmark >= n_landmarks {
                return Err(EnvError::Invalid(format!("node {i} landmark {} ≥ {n_landmarks}", node.landmark)));
            }
        }
        let mut adjacency = vec![Vec::new(); n];
        let mut canon = Vec::with_capacity(edges.len());
        for &(u, v) in &edges {
            if u >= n || v >= n || u == v {
                return Err(EnvError::Invalid(format!("bad edge ({u}, {v})")));
            }
            let (a, b) = if u < v { (u, v) } else { (v, u) };
            if adjacency[a].contains(&b) {
                continue;
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
            canon.push((a, b));
        }
        adjacency.iter_mut().for_each(|a| a.sort_unstable());
        canon.sort_unstable();
        let mut scene = Self { scene_id, n_landmarks, nodes, edges: canon, adjacency, geodesic: Vec::new() };
        let mut table = vec![f64::INFINITY; n * n];
        for src in 0..n {
            let (dist, _) = scene.dijkstra(src);
            table[src * n..(src + 1) * n].copy_from_slice(&dist);
        }
        // summation order differs per source; mirror the upper triangle
        for u in 0..n {
            for v in u + 1..n {
                table[v * n + u] = table[u * n + v];
            }
        }
        if table.iter().any(|d| d.is_infinite()) {
            return Err(EnvError::Invalid("scene graph is not connected".into()));
        }
        scene.geodesic = table;
        Ok(scene)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[SceneNode] {
        &self.nodes
    }

    pub fn node(&self, id: usize) -> &SceneNode {
        &self.nodes[id]
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Neighbors sorted by node id.
    pub fn neighbors(&self, id: usize) -> &[usize] {
        &self.adjacency[id]
    }

    pub fn degree(&self, id: usize) -> usize {
        self.adjacency[id].len()
    }

    pub fn are_adjacent(&self, u: usize, v: usize) -> bool {
        self.adjacency[u].binary_search(&v).is_ok()
    }

    pub fn edge_length(&self, u: usize, v: usize) -> f64 {
        distance(self.nodes[u].pos, self.nodes[v].pos)
    }

    pub fn bearing(&self, from: usize, to: usize) -> f64 {
        bearing(self.nodes[from].pos, self.nodes[to].pos)
    }

    pub fn geodesic(&self, u: usize, v: usize) -> f64 {
        self.geodesic[u * self.nodes.len() + v]
    }

    /// Sum of edge lengths along a walk. Errors if consecutive nodes are not adjacent.
    pub fn walk_length(&self, walk: &[usize]) -> Result<f64, EnvError> {
        let mut total = 0.0;
        for w in walk.windows(2) {
            if !self.are_adjacent(w[0], w[1]) {
                return Err(EnvError::InvalidPath(format!("{} and {} are not adjacent", w[0], w[1])));
            }
            total += self.edge_length(w[0], w[1]);
        }
        Ok(total)
    }

    fn dijkstra(&self, src: usize) -> (Vec<f64>, Vec<Option<usize>>) {
        let n = self.nodes.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![None; n];
        let mut heap = BinaryHeap::new();
        dist[src] = 0.0;
        heap.push(Frontier { dist: 0.0, node: src });
        while let Some(Frontier { dist: d, node }) = heap.pop() {
            if d > dist[node] {
                continue;
            }
            for &nb in &self.adjacency[node] {
                let nd = d + self.edge_length(node, nb);
                if nd < dist[nb] {
                    dist[nb] = nd;
                    prev[nb] = Some(node);
                    heap.push(Frontier { dist: nd, node: nb });
                }
            }
        }
        (dist, prev)
    }

    /// Dijkstra-optimal node sequence from `u` to `v` and its length in meters.
    pub fn shortest_path(&self, u: usize, v: usize) -> (Vec<usize>, f64) {
        let (dist, prev) = self.dijkstra(u);
        let mut path = vec![v];
        let mut cur = v;
        while let Some(p) = prev[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        debug_assert_eq!(path[0], u);
        (path, dist[v])
    }
}

/// Samples a connected random geometric graph.
///
/// Nodes are placed uniformly (with a minimum separation) and joined when
/// closer than `connect_radius`; remaining components are then bridged by
/// repeatedly adding the shortest edge between two different components.
pub fn generate_scene(seed: u64, params: &SceneParams) -> Result<SceneGraph, EnvError> {
    const PLACEMENT_TRIES: usize = 200;
    if params.n_nodes < 2 {
        return Err(EnvError::Generation(format!("need at least 2 nodes, got {}", params.n_nodes)));
    }
    if params.n_landmarks == 0 || !(params.area_side > 0.0) || !(params.connect_radius > 0.0) {
        return Err(EnvError::Generation(format!("invalid scene parameters {params:?}")));
    }
    let mut rng = seed::rng(seed);
    let mut positions: Vec<[f64; 2]> = Vec::with_capacity(params.n_nodes);
    let mut rejected = 0usize;
    while positions.len() < params.n_nodes {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let p = [rng.gen_range(0.0..params.area_side), rng.gen_range(0.0..params.area_side)];
            if positions.iter().all(|q| distance(p, *q) >= params.min_separation) {
                positions.push(p);
                placed = true;
                break;
            }
            rejected += 1;
        }
        if !placed {
            return Err(EnvError::Generation(format!(
                "could not place node {} of {} with separation {} in a {}m square after {} rejections",
                positions.len(),
                params.n_nodes,
                params.min_separation,
                params.area_side,
                rejected
            )));
        }
    }
    let nodes: Vec<SceneNode> = positions
        .iter()
        .enumerate()
        .map(|(id, &pos)| SceneNode { id, pos, landmark: rng.gen_range(0..params.n_landmarks) })
        .collect();

    let n = nodes.len();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if distance(positions[u], positions[v]) <= params.connect_radius {
                edges.push((u, v));
            }
        }
    }
    // union-find over current edges, then bridge nearest components
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut c = x;
        while p[c] != r {
            let next = p[c];
            p[c] = r;
            c = next;
        }
        r
    }
    for &(u, v) in &edges {
        let (a, b) = (find(&mut parent, u), find(&mut parent, v));
        if a != b {
            parent[a] = b;
        }
    }
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for u in 0..n {
            for v in u + 1..n {
                if find(&mut parent, u) == find(&mut parent, v) {
                    continue;
                }
                let d = distance(positions[u], positions[v]);
                if best.map_or(true, |(bd, _, _)| d < bd) {
                    best = Some((d, u, v));
                }
            }
        }
        match best {
            Some((_, u, v)) => {
                edges.push((u, v));
                let (a, b) = (find(&mut parent, u), find(&mut parent, v));
                parent[a] = b;
            }
            None => break,
        }
    }
    SceneGraph::from_parts(seed, params.n_landmarks, nodes, edges)
}
