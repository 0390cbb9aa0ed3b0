//! Loopy sum-product belief propagation on a factor subset.
//!
//! Runs a synchronous (flooding) schedule with optional damping and returns
//! per-variable beliefs plus per-factor feature expectations. Messages live
//! in normalized linear space; factor computations go through log space so
//! arbitrarily large weights cannot overflow. BP is exact on acyclic
//! subsets; on loopy ones non-convergence is reported via a flag, never an
//! error, and the last beliefs are returned.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::exact::ExactMoments;
use crate::graph::{FactorGraph, FactorId, FactorSubset, GraphError};

#[derive(Debug, Error)]
pub enum BpError {
    #[error("tolerance must be positive, got {0}")]
    TolNotPositive(f64),
    #[error("damping must lie in [0,1), got {0}")]
    DampingOutOfRange(f64),
    #[error("factor {0} was part of the inferred subset; its expectation is already in factor_mu")]
    SolvedFactor(FactorId),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Belief propagation settings; the schedule is always flooding.
#[derive(Clone, Copy, Debug)]
pub struct BpConfig {
    /// Maximum number of full message sweeps.
    pub max_iters: usize,
    /// Convergence threshold on the max absolute belief change.
    pub tol: f64,
    /// Fraction of the old factor-to-variable message retained, in `[0,1)`.
    pub damping: f64,
}

impl Default for BpConfig {
    fn default() -> Self {
        BpConfig {
            max_iters: 50,
            tol: 1e-6,
            damping: 0.0,
        }
    }
}

impl BpConfig {
    fn validate(&self) -> Result<(), BpError> {
        if !(self.tol > 0.0) {
            return Err(BpError::TolNotPositive(self.tol));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(BpError::DampingOutOfRange(self.damping));
        }
        Ok(())
    }
}

/// Marginals produced by one inference run.
#[derive(Clone, Debug)]
pub struct MarginalEstimate {
    /// Per-variable probability of value 1.
    pub var_beliefs: Vec<f64>,
    /// Feature expectation per solved factor.
    pub factor_mu: BTreeMap<FactorId, f64>,
    pub converged: bool,
    pub iterations: usize,
    pub wall_time: Duration,
}

impl MarginalEstimate {
    /// Uniform beliefs over `num_vars` variables, no solved factors.
    pub fn uniform(num_vars: usize) -> Self {
        MarginalEstimate {
            var_beliefs: vec![0.5; num_vars],
            factor_mu: BTreeMap::new(),
            converged: true,
            iterations: 0,
            wall_time: Duration::ZERO,
        }
    }

    /// Wraps exact moments as an estimate; carries expectations for every
    /// factor of the graph, so no candidate needs re-estimation.
    pub fn from_exact(moments: &ExactMoments) -> Self {
        MarginalEstimate {
            var_beliefs: moments.var_marginals.clone(),
            factor_mu: moments
                .mu
                .iter()
                .enumerate()
                .map(|(i, &mu)| (FactorId(i), mu))
                .collect(),
            converged: true,
            iterations: 0,
            wall_time: Duration::ZERO,
        }
    }
}

/// One factor node of the message-passing graph.
struct Node {
    id: FactorId,
    weight: f64,
    table: Vec<bool>,
    scope: Vec<usize>,
    f2v: Vec<[f64; 2]>,
    v2f: Vec<[f64; 2]>,
}

fn normalized(m: [f64; 2]) -> [f64; 2] {
    let sum = m[0] + m[1];
    if sum > 0.0 && sum.is_finite() {
        [m[0] / sum, m[1] / sum]
    } else {
        [0.5, 0.5]
    }
}

fn logsumexp<I: IntoIterator<Item = f64>>(terms: I) -> f64 {
    let collected: Vec<f64> = terms.into_iter().collect();
    let max = collected.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + collected.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Sends all variable-to-factor messages and returns current beliefs.
fn update_v2f(nodes: &mut [Node], var_adj: &[Vec<(usize, usize)>]) -> Vec<f64> {
    let mut beliefs = vec![0.5; var_adj.len()];
    for (v, adj) in var_adj.iter().enumerate() {
        let deg = adj.len();
        if deg == 0 {
            continue;
        }
        // Products of incoming messages without division, renormalized at
        // every step so long chains cannot underflow.
        let mut prefix = vec![[1.0, 1.0]; deg + 1];
        for (t, &(e, pos)) in adj.iter().enumerate() {
            let m = nodes[e].f2v[pos];
            prefix[t + 1] = normalized([prefix[t][0] * m[0], prefix[t][1] * m[1]]);
        }
        let mut suffix = vec![[1.0, 1.0]; deg + 1];
        for (t, &(e, pos)) in adj.iter().enumerate().rev() {
            let m = nodes[e].f2v[pos];
            suffix[t] = normalized([suffix[t + 1][0] * m[0], suffix[t + 1][1] * m[1]]);
        }
        for (t, &(e, pos)) in adj.iter().enumerate() {
            let out = normalized([
                prefix[t][0] * suffix[t + 1][0],
                prefix[t][1] * suffix[t + 1][1],
            ]);
            nodes[e].v2f[pos] = out;
        }
        beliefs[v] = normalized(prefix[deg])[1];
    }
    beliefs
}

/// Sends all factor-to-variable messages with damping.
fn update_f2v(nodes: &mut [Node], damping: f64) {
    for node in nodes.iter_mut() {
        let k = node.scope.len();
        let ln_in: Vec<[f64; 2]> = node.v2f.iter().map(|m| [m[0].ln(), m[1].ln()]).collect();
        for t in 0..k {
            let mut slot = [f64::NEG_INFINITY; 2];
            for (local, &active) in node.table.iter().enumerate() {
                let mut term = if active { node.weight } else { 0.0 };
                for j in 0..k {
                    if j != t {
                        term += ln_in[j][local >> j & 1];
                    }
                }
                let b = local >> t & 1;
                // Streaming two-term logsumexp per slot.
                let (hi, lo) = if slot[b] >= term {
                    (slot[b], term)
                } else {
                    (term, slot[b])
                };
                slot[b] = if hi == f64::NEG_INFINITY {
                    hi
                } else {
                    hi + (lo - hi).exp().ln_1p()
                };
            }
            let shift = slot[0].max(slot[1]);
            let fresh = if shift == f64::NEG_INFINITY {
                [0.5, 0.5]
            } else {
                normalized([(slot[0] - shift).exp(), (slot[1] - shift).exp()])
            };
            let old = node.f2v[t];
            node.f2v[t] = normalized([
                damping * old[0] + (1.0 - damping) * fresh[0],
                damping * old[1] + (1.0 - damping) * fresh[1],
            ]);
        }
    }
}

/// Feature expectation from the factor belief `b(y) ∝ Ψ(y)·Π msgs`.
fn node_mu(node: &Node) -> f64 {
    let ln_in: Vec<[f64; 2]> = node.v2f.iter().map(|m| [m[0].ln(), m[1].ln()]).collect();
    let term = |local: usize| {
        let mut t = if node.table[local] { node.weight } else { 0.0 };
        for (j, ln_m) in ln_in.iter().enumerate() {
            t += ln_m[local >> j & 1];
        }
        t
    };
    let all = logsumexp((0..node.table.len()).map(term));
    let active = logsumexp((0..node.table.len()).filter(|&l| node.table[l]).map(term));
    if all == f64::NEG_INFINITY {
        return 0.0;
    }
    (active - all).exp().clamp(0.0, 1.0)
}

/// Runs loopy BP on the given factor subset. An empty subset yields uniform
/// beliefs immediately; non-convergence is reported via the flag.
pub fn run_bp(
    graph: &FactorGraph,
    subset: &FactorSubset,
    config: &BpConfig,
) -> Result<MarginalEstimate, BpError> {
    let start = Instant::now();
    config.validate()?;
    graph.validate_subset(subset)?;

    let mut nodes: Vec<Node> = subset
        .iter()
        .map(|id| {
            let f = &graph.factors()[id.0];
            let k = f.feature.arity();
            Node {
                id,
                weight: f.weight,
                table: f.feature.table().to_vec(),
                scope: f.feature.scope().iter().map(|v| v.0).collect(),
                f2v: vec![[0.5, 0.5]; k],
                v2f: vec![[0.5, 0.5]; k],
            }
        })
        .collect();

    let mut var_adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); graph.num_vars()];
    for (e, node) in nodes.iter().enumerate() {
        for (pos, &v) in node.scope.iter().enumerate() {
            var_adj[v].push((e, pos));
        }
    }

    let mut beliefs = vec![0.5; graph.num_vars()];
    let mut converged = nodes.is_empty();
    let mut iterations = 0;
    if !converged {
        update_v2f(&mut nodes, &var_adj);
    }
    while iterations < config.max_iters && !converged {
        update_f2v(&mut nodes, config.damping);
        let fresh = update_v2f(&mut nodes, &var_adj);
        iterations += 1;
        let delta = beliefs
            .iter()
            .zip(&fresh)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        beliefs = fresh;
        converged = delta < config.tol;
    }

    let factor_mu = nodes.iter().map(|n| (n.id, node_mu(n))).collect();

    Ok(MarginalEstimate {
        var_beliefs: beliefs,
        factor_mu,
        converged,
        iterations,
        wall_time: start.elapsed(),
    })
}

/// Expectation of an unseen factor's feature, treating its scope variables
/// as independent with the estimate's beliefs. Exact when the inferred
/// subset induces a product distribution (a unary-only seed). Factors whose
/// expectation the estimate already carries are rejected.
pub fn candidate_mu(
    graph: &FactorGraph,
    estimate: &MarginalEstimate,
    factor_id: FactorId,
) -> Result<f64, BpError> {
    if estimate.factor_mu.contains_key(&factor_id) {
        return Err(BpError::SolvedFactor(factor_id));
    }
    let feature = &graph.factor(factor_id)?.feature;
    let beliefs: Vec<f64> = feature
        .scope()
        .iter()
        .map(|v| estimate.var_beliefs[v.0])
        .collect();
    let mut total = 0.0;
    for local in 0..feature.table().len() {
        if feature.value_at(local) {
            let mut p = 1.0;
            for (j, &b) in beliefs.iter().enumerate() {
                p *= if local >> j & 1 == 1 { b } else { 1.0 - b };
            }
            total += p;
        }
    }
    Ok(total.clamp(0.0, 1.0))
}
