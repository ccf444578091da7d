//! Road-network partitioning: snake clustering followed by symmetric
//! nonnegative matrix factorization of the snake similarity.

use std::collections::VecDeque;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lti::format_float;

/// Roads with time-averaged densities and undirected connectivity.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadGraph {
    densities: Vec<f64>,
    adjacency: Vec<Vec<usize>>,
}

impl RoadGraph {
    pub fn new(densities: Vec<f64>, edges: &[(usize, usize)]) -> Result<Self> {
        let n = densities.len();
        if let Some(i) = densities.iter().position(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::arg(format!("road {i} has invalid density {}", densities[i])));
        }
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::arg(format!("edge ({a}, {b}) references a road outside 0..{n}")));
            }
            if a == b {
                continue;
            }
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
            adj.dedup();
        }
        Ok(Self { densities, adjacency })
    }

    pub fn len(&self) -> usize {
        self.densities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.densities.is_empty()
    }

    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    pub fn neighbors_of(&self, road: usize) -> &[usize] {
        &self.adjacency[road]
    }

    /// Roads adjacent to `set` but not in it, in increasing id order.
    pub fn neighbors(&self, set: &[usize]) -> Vec<usize> {
        let mut inside = vec![false; self.len()];
        for &r in set {
            inside[r] = true;
        }
        let mut out: Vec<usize> =
            set.iter().flat_map(|&r| self.adjacency[r].iter().copied()).filter(|&s| !inside[s]).collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.len()).flat_map(|a| self.adjacency[a].iter().filter(move |&&b| a < b).map(move |&b| (a, b))).collect()
    }

    /// Connected components of the subgraph induced by roads with
    /// `member[r]`, each sorted, ordered by smallest id.
    pub fn components(&self, member: &[bool]) -> Vec<Vec<usize>> {
        let mut seen = vec![false; self.len()];
        let mut out = Vec::new();
        for start in 0..self.len() {
            if !member[start] || seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(r) = queue.pop_front() {
                for &s in &self.adjacency[r] {
                    if member[s] && !seen[s] {
                        seen[s] = true;
                        comp.push(s);
                        queue.push_back(s);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.components(&vec![true; self.len()]).len() <= 1
    }
}

/// Population variance of the densities of `roads`.
pub fn density_variance(graph: &RoadGraph, roads: &[usize]) -> f64 {
    if roads.is_empty() {
        return 0.0;
    }
    let k = roads.len() as f64;
    let mean = roads.iter().map(|&r| graph.densities[r]).sum::<f64>() / k;
    roads.iter().map(|&r| (graph.densities[r] - mean).powi(2)).sum::<f64>() / k
}

/// One snake per seed road.
#[derive(Debug, Clone, PartialEq)]
pub struct SnakeSet {
    pub snakes: Vec<Vec<usize>>,
    /// Seeds whose component was exhausted before reaching the full length.
    pub diagnostics: Vec<String>,
}

fn grow_snake(graph: &RoadGraph, seed: usize, m: usize) -> Vec<usize> {
    let mut snake = vec![seed];
    let (mut sum, mut sq) = (graph.densities[seed], graph.densities[seed].powi(2));
    while snake.len() < m {
        let mut best: Option<(f64, usize)> = None;
        let k = snake.len() as f64 + 1.0;
        for s in graph.neighbors(&snake) {
            let d = graph.densities[s];
            let mean = (sum + d) / k;
            let var = ((sq + d * d) / k - mean * mean).max(0.0);
            // candidates arrive in increasing id, so strict comparison keeps the lowest id
            if best.map_or(true, |(v, _)| var < v) {
                best = Some((var, s));
            }
        }
        let Some((_, s)) = best else { break };
        snake.push(s);
        sum += graph.densities[s];
        sq += graph.densities[s].powi(2);
    }
    snake
}

/// Grows a snake of length `m` from every road, appending at each step the
/// neighbouring road that minimizes the density variance of the snake.
pub fn run_snakes(graph: &RoadGraph, m: usize) -> Result<SnakeSet> {
    let n = graph.len();
    if m == 0 || m > n {
        return Err(Error::arg(format!("snake length {m} must lie in 1..={n}")));
    }
    let snakes: Vec<Vec<usize>> = (0..n).into_par_iter().map(|x| grow_snake(graph, x, m)).collect();
    let diagnostics = snakes
        .iter()
        .enumerate()
        .filter(|(_, s)| s.len() < m)
        .map(|(x, s)| format!("snake from road {x} stopped at length {} (component exhausted)", s.len()))
        .collect();
    Ok(SnakeSet { snakes, diagnostics })
}

/// `W[i, j] = sum_k phi^(n - k) |prefix_k(S_i) ∩ prefix_k(S_j)|` for
/// `k = 1..=m`, symmetrized.
pub fn compute_similarity(snakes: &SnakeSet, phi: f64, m: usize) -> Result<DMatrix<f64>> {
    if !(phi > 0.0 && phi < 1.0) {
        return Err(Error::arg(format!("decay {phi} must lie in (0, 1)")));
    }
    let n = snakes.snakes.len();
    // position of each road in each snake, usize::MAX when absent
    let pos: Vec<Vec<usize>> = snakes
        .snakes
        .iter()
        .map(|s| {
            let mut p = vec![usize::MAX; n];
            for (k, &r) in s.iter().enumerate() {
                p[r] = k;
            }
            p
        })
        .collect();
    let weights: Vec<f64> = (1..=m).map(|k| phi.powi((n as i32) - k as i32)).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    // a road counts in prefix k once both snakes have reached it
                    let mut added = vec![0usize; m + 1];
                    for &r in snakes.snakes[i].iter().take(m) {
                        let (a, b) = (pos[i][r], pos[j][r]);
                        if b != usize::MAX && b < m {
                            added[a.max(b) + 1] += 1;
                        }
                    }
                    let mut count = 0usize;
                    let mut w = 0.0;
                    for k in 1..=m {
                        count += added[k];
                        w += weights[k - 1] * count as f64;
                    }
                    w
                })
                .collect()
        })
        .collect();
    let w = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
    Ok((&w + w.transpose()) * 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// `D^{-1/2} W D^{-1/2}`.
    Symmetric,
    /// `D^{-1/2} W D^{1/2}`, as literally written in the original algorithm.
    Asymmetric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymNmfOptions {
    pub clusters: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub normalization: Normalization,
}

impl SymNmfOptions {
    pub fn new(clusters: usize, seed: u64) -> Self {
        Self { clusters, seed, max_iter: 500, tol: 1e-7, normalization: Normalization::Symmetric }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymNmfResult {
    pub h: DMatrix<f64>,
    pub assignment: Vec<usize>,
    /// `||W_hat - H H'||_F^2` at the start and after every update.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

pub fn normalize(w: &DMatrix<f64>, normalization: Normalization) -> DMatrix<f64> {
    let n = w.nrows();
    let d: Vec<f64> = (0..n).map(|i| w.row(i).sum()).collect();
    let inv = |x: f64| if x > 0.0 { 1.0 / x.sqrt() } else { 0.0 };
    DMatrix::from_fn(n, n, |i, j| {
        let right = match normalization {
            Normalization::Symmetric => inv(d[j]),
            Normalization::Asymmetric => d[j].sqrt(),
        };
        inv(d[i]) * w[(i, j)] * right
    })
}

fn residual(w: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
    (w - h * h.transpose()).norm_squared()
}

/// Index of the largest entry of each row; ties go to the lowest column.
fn argmax_rows(h: &DMatrix<f64>) -> Vec<usize> {
    (0..h.nrows())
        .map(|i| {
            let mut best = 0;
            for j in 1..h.ncols() {
                if h[(i, j)] > h[(i, best)] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Factorizes the normalized similarity as `H H'` with `H >= 0` by damped
/// multiplicative updates and assigns each road to its largest factor.
pub fn symnmf(w: &DMatrix<f64>, opts: &SymNmfOptions) -> Result<SymNmfResult> {
    let n = w.nrows();
    if w.ncols() != n {
        return Err(Error::dim("similarity must be square"));
    }
    if opts.clusters == 0 || opts.clusters > n {
        return Err(Error::arg(format!("cluster count {} must lie in 1..={n}", opts.clusters)));
    }
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::arg("similarity must be finite and nonnegative"));
    }
    let k = opts.clusters;
    let what = normalize(w, opts.normalization);
    if k == 1 {
        let h = DMatrix::from_element(n, 1, 1.0);
        let obj = residual(&what, &h);
        return Ok(SymNmfResult { h, assignment: vec![0; n], objective: vec![obj], iterations: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let scale = 2.0 * (what.mean().max(0.0) / k as f64).sqrt();
    let mut h = DMatrix::from_fn(n, k, |_, _| rng.gen::<f64>() * scale);
    let mut trace = vec![residual(&what, &h)];
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        let wh = &what * &h;
        let hhh = &h * (h.transpose() * &h);
        for i in 0..n {
            for j in 0..k {
                let den = hhh[(i, j)];
                if den > 0.0 {
                    h[(i, j)] *= 0.5 + 0.5 * wh[(i, j)] / den;
                }
            }
        }
        iterations += 1;
        let f = residual(&what, &h);
        let prev = *trace.last().expect("trace starts non-empty");
        trace.push(f);
        if (prev - f).abs() <= opts.tol * prev.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(SymNmfResult { assignment: argmax_rows(&h), h, objective: trace, iterations })
}

/// Reassigns every fragment of a region that is not its largest connected
/// piece to the adjacent region sharing the most edges with it. Returns the
/// number of roads moved.
pub fn repair_connectivity(graph: &RoadGraph, assignment: &mut [usize]) -> usize {
    let mut moved = 0;
    let regions = assignment.iter().copied().max().map_or(0, |m| m + 1);
    // each pass moves at least one fragment, so the loop terminates
    for _ in 0..graph.len() {
        let mut changed = false;
        for region in 0..regions {
            let member: Vec<bool> = assignment.iter().map(|&a| a == region).collect();
            let comps = graph.components(&member);
            if comps.len() <= 1 {
                continue;
            }
            let keep = comps
                .iter()
                .enumerate()
                .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
                .map(|(i, _)| i)
                .expect("at least two components");
            for (ci, comp) in comps.iter().enumerate() {
                if ci == keep {
                    continue;
                }
                let mut links = vec![0usize; regions];
                for &r in comp {
                    for &s in graph.neighbors_of(r) {
                        if assignment[s] != region {
                            links[assignment[s]] += 1;
                        }
                    }
                }
                let target = (0..regions).filter(|&g| links[g] > 0).max_by(|&a, &b| links[a].cmp(&links[b]).then(b.cmp(&a)));
                if let Some(t) = target {
                    for &r in comp {
                        assignment[r] = t;
                    }
                    moved += comp.len();
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    moved
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub assignment: Vec<usize>,
    pub snakes: SnakeSet,
    pub similarity: DMatrix<f64>,
    pub factorization: SymNmfResult,
    pub repaired_roads: usize,
}

/// Runs snakes of length `m`, builds the similarity with decay `phi` and
/// clusters it into `opts.clusters` connected regions.
pub fn partition(graph: &RoadGraph, m: usize, phi: f64, opts: &SymNmfOptions) -> Result<Partition> {
    if opts.clusters > graph.len() {
        return Err(Error::arg(format!("{} regions requested for {} roads", opts.clusters, graph.len())));
    }
    let snakes = run_snakes(graph, m)?;
    for d in &snakes.diagnostics {
        log::warn!("{d}");
    }
    let similarity = compute_similarity(&snakes, phi, m)?;
    let factorization = symnmf(&similarity, opts)?;
    let mut assignment = factorization.assignment.clone();
    let repaired_roads = repair_connectivity(graph, &mut assignment);
    Ok(Partition { assignment, snakes, similarity, factorization, repaired_roads })
}

/// Sum over regions of squared deviations from the region mean density.
pub fn within_region_sse(graph: &RoadGraph, assignment: &[usize]) -> f64 {
    let regions = assignment.iter().copied().max().map_or(0, |m| m + 1);
    (0..regions)
        .map(|g| {
            let roads: Vec<usize> = (0..graph.len()).filter(|&r| assignment[r] == g).collect();
            density_variance(graph, &roads) * roads.len() as f64
        })
        .sum()
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, col: usize, line: usize) -> Result<T> {
    rec.get(col)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::Parse { line, msg: format!("column {} is not a valid number", col + 1) })
}

/// Reads `road_id,density` rows (ids `0..n` in any order) and
/// `road_a,road_b` edges.
pub fn read_graph<R1: Read, R2: Read>(roads: R1, edges: R2) -> Result<RoadGraph> {
    let mut rdr = csv::Reader::from_reader(roads);
    let mut pairs: Vec<(usize, f64)> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        pairs.push((parse_field(&rec, 0, k + 2)?, parse_field(&rec, 1, k + 2)?));
    }
    let n = pairs.len();
    let mut densities = vec![f64::NAN; n];
    for (k, &(id, d)) in pairs.iter().enumerate() {
        if id >= n || !densities[id].is_nan() {
            return Err(Error::Parse { line: k + 2, msg: format!("road ids must be a permutation of 0..{n}") });
        }
        densities[id] = d;
    }
    let mut rdr = csv::Reader::from_reader(edges);
    let mut list = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let (a, b): (usize, usize) = (parse_field(&rec, 0, k + 2)?, parse_field(&rec, 1, k + 2)?);
        if a >= n || b >= n {
            return Err(Error::Parse { line: k + 2, msg: format!("edge references unknown road ({a}, {b})") });
        }
        list.push((a, b));
    }
    RoadGraph::new(densities, &list).map_err(|e| Error::config(e.to_string()))
}

pub fn write_graph<W1: Write, W2: Write>(graph: &RoadGraph, roads: W1, edges: W2) -> Result<()> {
    let mut w = csv::Writer::from_writer(roads);
    w.write_record(["road_id", "density"])?;
    for (i, d) in graph.densities.iter().enumerate() {
        w.write_record([i.to_string(), format_float(*d)])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(edges);
    w.write_record(["road_a", "road_b"])?;
    for (a, b) in graph.edges() {
        w.write_record([a.to_string(), b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_assignment<W: Write>(assignment: &[usize], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["road_id", "region"])?;
    for (i, g) in assignment.iter().enumerate() {
        w.write_record([i.to_string(), g.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
