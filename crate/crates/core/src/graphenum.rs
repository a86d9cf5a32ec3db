//! Counting admissible deadlock configurations.
//!
//! A system deadlock induces an undirected graph on the robots whose edges
//! are the active pair constraints. Such graphs are connected, labeled, and
//! must be realizable in the plane with every edge at exactly `Ds` and every
//! non-edge strictly longer than `Ds`.

use nalgebra::{DMatrix, DVector};
use num_bigint::{BigInt, BigUint};
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vec2::Vec2;

/// Largest vertex count for exhaustive enumeration.
pub const MAX_ENUMERATE: usize = 6;

/// Largest vertex count accepted by [`count_admissible`].
pub const MAX_ADMISSIBLE: usize = 4;

/// Undirected simple graph on vertices `0..n`, edges sorted with `u < v`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledGraph {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
}

/// Unordered pairs of `0..n` in lexicographic order; bit `k` of a mask
/// selects `pair_list(n)[k]`.
pub fn pair_list(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect()
}

impl LabeledGraph {
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut out = Vec::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::InvalidParams(format!("self-loop on vertex {a}")));
            }
            if a >= n || b >= n {
                return Err(Error::InvalidParams(format!("edge ({a}, {b}) outside 0..{n}")));
            }
            out.push((a.min(b), a.max(b)));
        }
        out.sort_unstable();
        out.dedup();
        Ok(Self { n, edges: out })
    }

    pub fn from_mask(n: usize, mask: u64) -> Self {
        let edges = pair_list(n)
            .into_iter()
            .enumerate()
            .filter(|(k, _)| mask >> k & 1 == 1)
            .map(|(_, e)| e)
            .collect();
        Self { n, edges }
    }

    pub fn mask(&self) -> u64 {
        let pairs = pair_list(self.n);
        self.edges
            .iter()
            .map(|e| 1u64 << pairs.iter().position(|p| p == e).expect("edge in range"))
            .fold(0, |m, b| m | b)
    }

    pub fn complete(n: usize) -> Self {
        Self { n, edges: pair_list(n) }
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.binary_search(&(u.min(v), u.max(v))).is_ok()
    }

    pub fn degree(&self, u: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == u || b == u).count()
    }

    pub fn max_degree(&self) -> usize {
        (0..self.n).map(|u| self.degree(u)).max().unwrap_or(0)
    }

    /// Depth-first reachability from vertex 0.
    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return false;
        }
        let mut adj = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &w in &adj[u] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

impl std::fmt::Display for LabeledGraph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.edges.iter().map(|(a, b)| format!("{}-{}", a + 1, b + 1)).collect();
        write!(f, "{{{}}}", parts.join(","))
    }
}

fn choose2(n: usize) -> u32 {
    (n * n.saturating_sub(1) / 2) as u32
}

fn binomial(n: usize, k: usize) -> BigInt {
    let mut c = BigInt::one();
    for i in 0..k {
        c = c * (n - i) / (i + 1);
    }
    c
}

/// `2^C(n, 2)`, the number of labeled graphs on `n` vertices.
pub fn upper_bound(n: usize) -> BigUint {
    BigUint::one() << choose2(n)
}

/// Number of connected labeled graphs on `n >= 1` vertices:
/// `d_n = 2^C(n,2) - (1/n) sum_{k=1}^{n-1} k C(n,k) 2^C(n-k,2) d_k`.
pub fn connected_count(n: usize) -> Result<BigUint> {
    if n == 0 {
        return Err(Error::OutOfRange("vertex count must be >= 1".into()));
    }
    let mut d: Vec<BigInt> = vec![BigInt::zero()];
    for m in 1..=n {
        let mut sum = BigInt::zero();
        for (k, dk) in d.iter().enumerate().take(m).skip(1) {
            sum += BigInt::from(k) * binomial(m, k) * (BigInt::one() << choose2(m - k)) * dk;
        }
        let total = BigInt::one() << choose2(m);
        d.push(total - sum / BigInt::from(m));
    }
    Ok(d[n].to_biguint().expect("count is nonnegative"))
}

/// `(n + 1)(n - 1)! / 2` for `n >= 3`, and 1 below.
pub fn lower_bound(n: usize) -> BigUint {
    if n < 3 {
        return BigUint::one();
    }
    let fact: BigUint = (1..n).map(BigUint::from).product();
    BigUint::from(n + 1) * fact / 2u32
}

/// All connected labeled graphs on `n` vertices, ordered by edge mask.
pub fn enumerate_connected(n: usize) -> Result<Vec<LabeledGraph>> {
    if n == 0 || n > MAX_ENUMERATE {
        return Err(Error::OutOfRange(format!("exhaustive enumeration needs 1 <= n <= {MAX_ENUMERATE}, got {n}")));
    }
    Ok((0..1u64 << choose2(n))
        .map(|m| LabeledGraph::from_mask(n, m))
        .filter(LabeledGraph::is_connected)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingResult {
    pub feasible: bool,
    pub positions: Option<Vec<Vec2>>,
    /// Largest edge-length error or non-edge shortfall below `Ds + margin`
    /// of the best attempt.
    pub max_violation: f64,
    /// 1-based index of the successful attempt.
    pub attempts_used: usize,
}

/// Search settings for [`embed_graph_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub ds: f64,
    pub attempts: usize,
    /// Acceptance bound on `max_violation` (m).
    pub tol: f64,
    /// Required non-edge excess over `Ds` (m).
    pub margin: f64,
    pub max_iters: usize,
}

impl EmbedConfig {
    pub fn new(ds: f64, attempts: usize, tol: f64) -> Self {
        Self { ds, attempts, tol, margin: 1e-3 * ds, max_iters: 200 }
    }
}

/// Post-hoc check of a candidate embedding against the exact invariants.
pub fn embedding_violation(g: &LabeledGraph, pos: &[Vec2], ds: f64, margin: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for (u, v) in pair_list(g.n) {
        let d = (pos[u] - pos[v]).norm();
        let viol = if g.has_edge(u, v) { (d - ds).abs() } else { (ds + margin - d).max(0.0) };
        worst = worst.max(viol);
    }
    worst
}

pub fn embed_graph(g: &LabeledGraph, ds: f64, attempts: usize, tol: f64) -> Result<EmbeddingResult> {
    embed_graph_with(g, &EmbedConfig::new(ds, attempts, tol))
}

/// Penalized least-squares search for a unit-`Ds` embedding.
///
/// Residuals are `||p_u - p_v|| - Ds` on edges and the hinge
/// `max(0, Ds + 2 margin - ||p_u - p_v||)` on non-edges; the doubled margin
/// leaves slack for the `Ds + margin` acceptance test. Each attempt runs
/// Levenberg-Marquardt from a seeded random layout.
pub fn embed_graph_with(g: &LabeledGraph, cfg: &EmbedConfig) -> Result<EmbeddingResult> {
    if !g.is_connected() {
        return Err(Error::InvalidParams(format!("graph {g} is not connected")));
    }
    if !(cfg.ds > 0.0 && cfg.tol > 0.0 && cfg.margin >= 0.0) {
        return Err(Error::InvalidParams("embedding needs Ds > 0, tol > 0, margin >= 0".into()));
    }
    if g.n == 1 {
        return Ok(EmbeddingResult { feasible: true, positions: Some(vec![Vec2::ZERO]), max_violation: 0.0, attempts_used: 1 });
    }
    let mut best = f64::INFINITY;
    for attempt in 0..cfg.attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(graph_seed(g));
        rng.set_stream(attempt as u64);
        let spread = cfg.ds * g.n as f64;
        let init: Vec<Vec2> =
            (0..g.n).map(|_| Vec2::new(rng.gen_range(-spread..spread), rng.gen_range(-spread..spread))).collect();
        let pos = levenberg_marquardt(g, init, cfg);
        let viol = embedding_violation(g, &pos, cfg.ds, cfg.margin);
        if viol <= cfg.tol {
            return Ok(EmbeddingResult { feasible: true, positions: Some(pos), max_violation: viol, attempts_used: attempt + 1 });
        }
        best = best.min(viol);
    }
    Ok(EmbeddingResult { feasible: false, positions: None, max_violation: best, attempts_used: cfg.attempts })
}

/// Deterministic per-graph seed; the attempt index selects the stream.
fn graph_seed(g: &LabeledGraph) -> u64 {
    let mut z = ((g.n as u64) << 56) ^ g.mask();
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn residuals(g: &LabeledGraph, x: &DVector<f64>, cfg: &EmbedConfig) -> (DVector<f64>, DMatrix<f64>) {
    let pairs = pair_list(g.n);
    let mut r = DVector::zeros(pairs.len());
    let mut jac = DMatrix::zeros(pairs.len(), 2 * g.n);
    let hinge = cfg.ds + 2.0 * cfg.margin;
    for (k, &(u, v)) in pairs.iter().enumerate() {
        let d = Vec2::new(x[2 * u] - x[2 * v], x[2 * u + 1] - x[2 * v + 1]);
        let len = d.norm().max(1e-12);
        let dir = d / len;
        let (val, sign) = if g.has_edge(u, v) {
            (len - cfg.ds, 1.0)
        } else if len < hinge {
            (hinge - len, -1.0)
        } else {
            continue;
        };
        r[k] = val;
        jac[(k, 2 * u)] = sign * dir.x;
        jac[(k, 2 * u + 1)] = sign * dir.y;
        jac[(k, 2 * v)] = -sign * dir.x;
        jac[(k, 2 * v + 1)] = -sign * dir.y;
    }
    (r, jac)
}

fn levenberg_marquardt(g: &LabeledGraph, init: Vec<Vec2>, cfg: &EmbedConfig) -> Vec<Vec2> {
    let mut x = DVector::from_iterator(2 * g.n, init.iter().flat_map(|p| [p.x, p.y]));
    let (mut r, mut jac) = residuals(g, &x, cfg);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    for _ in 0..cfg.max_iters {
        if cost.sqrt() < 1e-3 * cfg.tol {
            break;
        }
        let jt = jac.transpose();
        let mut lhs = &jt * &jac;
        for d in 0..lhs.nrows() {
            lhs[(d, d)] += lambda * (1.0 + lhs[(d, d)]);
        }
        let rhs = -(&jt * &r);
        let Some(step) = lhs.cholesky().map(|c| c.solve(&rhs)) else {
            lambda *= 10.0;
            continue;
        };
        let trial = &x + &step;
        let (rt, jt_new) = residuals(g, &trial, cfg);
        let trial_cost = rt.norm_squared();
        if trial_cost < cost {
            x = trial;
            r = rt;
            jac = jt_new;
            cost = trial_cost;
            lambda = (lambda * 0.3).max(1e-12);
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    (0..g.n).map(|u| Vec2::new(x[2 * u], x[2 * u + 1])).collect()
}

/// Embedding verdict for one connected graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphVerdict {
    pub graph: LabeledGraph,
    pub max_degree: usize,
    pub embedding: EmbeddingResult,
}

/// Embeds every connected labeled graph on `n <= 4` vertices, in parallel.
pub fn admissible_census(n: usize, cfg: &EmbedConfig) -> Result<Vec<GraphVerdict>> {
    if n == 0 || n > MAX_ADMISSIBLE {
        return Err(Error::OutOfRange(format!("admissible count needs 1 <= n <= {MAX_ADMISSIBLE}, got {n}")));
    }
    enumerate_connected(n)?
        .into_par_iter()
        .map(|graph| {
            let embedding = embed_graph_with(&graph, cfg)?;
            Ok(GraphVerdict { max_degree: graph.max_degree(), graph, embedding })
        })
        .collect()
}

pub fn count_admissible(n: usize, ds: f64, attempts: usize) -> Result<usize> {
    let cfg = EmbedConfig::new(ds, attempts, 1e-9 * ds);
    Ok(admissible_census(n, &cfg)?.iter().filter(|v| v.embedding.feasible).count())
}

/// One line of the enumeration table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CensusRow {
    pub n: usize,
    pub upper: String,
    pub connected: String,
    pub admissible: usize,
    pub lower: String,
}

pub fn census_table(n_max: usize, ds: f64, attempts: usize) -> Result<Vec<CensusRow>> {
    (1..=n_max)
        .map(|n| {
            Ok(CensusRow {
                n,
                upper: upper_bound(n).to_string(),
                connected: connected_count(n)?.to_string(),
                admissible: count_admissible(n, ds, attempts)?,
                lower: lower_bound(n).to_string(),
            })
        })
        .collect()
}

/// `d_n` as `u64` when it fits.
pub fn connected_count_u64(n: usize) -> Option<u64> {
    connected_count(n).ok()?.to_u64()
}
