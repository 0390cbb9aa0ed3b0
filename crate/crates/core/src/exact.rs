//! Brute-force enumeration oracle for small graphs.
//!
//! Enumerates all `2^n` assignments to compute exact partition functions,
//! feature expectations, product expectations, covariances, and KL
//! divergences between sub-models. Everything accumulates in log space with
//! max-shift normalization, so weights up to ~700 in magnitude are safe.
//! Capped at [`ENUMERATION_CAP`] variables.

use thiserror::Error;

use crate::graph::{FactorGraph, FactorId, FactorSubset, GraphError};

/// Largest variable count the oracle will enumerate (~4M states).
pub const ENUMERATION_CAP: usize = 22;

#[derive(Debug, Error)]
pub enum ExactError {
    #[error("graph has {num_vars} variables, enumeration cap is {cap}")]
    CapExceeded { num_vars: usize, cap: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Exact moments of the distribution induced by one factor subset.
#[derive(Clone, Debug)]
pub struct ExactMoments {
    /// Log partition function of the subset's distribution.
    pub log_z: f64,
    /// Feature expectation of every factor in the graph (also those outside
    /// the subset), indexed by factor id; each in `[0,1]`.
    pub mu: Vec<f64>,
    /// Per-variable probability of value 1.
    pub var_marginals: Vec<f64>,
}

impl ExactMoments {
    pub fn mu(&self, id: FactorId) -> f64 {
        self.mu[id.0]
    }
}

/// Factor data laid out for fast per-state evaluation.
struct Prepared {
    weight: f64,
    scope: Vec<u32>,
    table: Vec<bool>,
}

impl Prepared {
    fn active(&self, mask: u64) -> bool {
        let mut idx = 0usize;
        for (j, &v) in self.scope.iter().enumerate() {
            idx |= ((mask >> v & 1) as usize) << j;
        }
        self.table[idx]
    }
}

fn check_cap(graph: &FactorGraph) -> Result<(), ExactError> {
    if graph.num_vars() > ENUMERATION_CAP {
        return Err(ExactError::CapExceeded {
            num_vars: graph.num_vars(),
            cap: ENUMERATION_CAP,
        });
    }
    Ok(())
}

fn prepare(graph: &FactorGraph, subset: &FactorSubset) -> Result<Vec<Prepared>, GraphError> {
    graph.validate_subset(subset)?;
    Ok(subset
        .iter()
        .map(|id| {
            let f = &graph.factors()[id.0];
            Prepared {
                weight: f.weight,
                scope: f.feature.scope().iter().map(|v| v.0 as u32).collect(),
                table: f.feature.table().to_vec(),
            }
        })
        .collect())
}

fn score(prepared: &[Prepared], mask: u64) -> f64 {
    let mut s = 0.0;
    for p in prepared {
        if p.active(mask) {
            s += p.weight;
        }
    }
    s
}

fn max_score(prepared: &[Prepared], num_states: u64) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for mask in 0..num_states {
        m = m.max(score(prepared, mask));
    }
    m
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Exact `log Z`, all feature expectations, and variable marginals under the
/// distribution induced by `subset`.
pub fn exact_moments(
    graph: &FactorGraph,
    subset: &FactorSubset,
) -> Result<ExactMoments, ExactError> {
    check_cap(graph)?;
    let dist = prepare(graph, subset)?;
    let all = prepare(graph, &graph.all_factors())?;
    let n = graph.num_vars();
    let num_states = 1u64 << n;

    let shift = max_score(&dist, num_states);
    let mut denom = 0.0;
    let mut factor_num = vec![0.0; all.len()];
    let mut var_num = vec![0.0; n];
    for mask in 0..num_states {
        let w = (score(&dist, mask) - shift).exp();
        denom += w;
        for (i, p) in all.iter().enumerate() {
            if p.active(mask) {
                factor_num[i] += w;
            }
        }
        for (v, num) in var_num.iter_mut().enumerate() {
            if mask >> v & 1 == 1 {
                *num += w;
            }
        }
    }

    Ok(ExactMoments {
        log_z: shift + denom.ln(),
        mu: factor_num.into_iter().map(|x| clamp01(x / denom)).collect(),
        var_marginals: var_num.into_iter().map(|x| clamp01(x / denom)).collect(),
    })
}

/// `log E_Z[Ψ_X]`: log expected product of the `target` factors' potentials
/// under the distribution induced by `dist`.
pub fn log_product_expectation(
    graph: &FactorGraph,
    dist: &FactorSubset,
    target: &FactorSubset,
) -> Result<f64, ExactError> {
    check_cap(graph)?;
    let d = prepare(graph, dist)?;
    let t = prepare(graph, target)?;
    let num_states = 1u64 << graph.num_vars();

    // log Σ_y exp(s_Z + s_X) − log Σ_y exp(s_Z), sharing one pass per sum.
    let mut shift_joint = f64::NEG_INFINITY;
    let mut shift_dist = f64::NEG_INFINITY;
    for mask in 0..num_states {
        let sd = score(&d, mask);
        shift_joint = shift_joint.max(sd + score(&t, mask));
        shift_dist = shift_dist.max(sd);
    }
    let mut joint = 0.0;
    let mut base = 0.0;
    for mask in 0..num_states {
        let sd = score(&d, mask);
        joint += (sd + score(&t, mask) - shift_joint).exp();
        base += (sd - shift_dist).exp();
    }
    Ok(shift_joint + joint.ln() - (shift_dist + base.ln()))
}

/// `E_Z[Ψ_X]` in linear space; may overflow for very large weights, see
/// [`log_product_expectation`].
pub fn product_expectation(
    graph: &FactorGraph,
    dist: &FactorSubset,
    target: &FactorSubset,
) -> Result<f64, ExactError> {
    Ok(log_product_expectation(graph, dist, target)?.exp())
}

/// Covariance under the `dist` distribution between the two factor-set
/// potentials: `Cov_Z(Ψ_X, Ψ_Y)`, or `Cov_Z(log Ψ_X, Ψ_Y)` when
/// `log_first` is set.
pub fn covariance(
    graph: &FactorGraph,
    dist: &FactorSubset,
    x: &FactorSubset,
    y: &FactorSubset,
    log_first: bool,
) -> Result<f64, ExactError> {
    check_cap(graph)?;
    let d = prepare(graph, dist)?;
    let px = prepare(graph, x)?;
    let py = prepare(graph, y)?;
    let num_states = 1u64 << graph.num_vars();

    let shift_dist = max_score(&d, num_states);
    let mut z = 0.0;
    for mask in 0..num_states {
        z += (score(&d, mask) - shift_dist).exp();
    }
    let log_z = shift_dist + z.ln();

    // E[A·Ψ_Y] and the single expectations, probabilities taken as
    // exp(s_Z − log Z) with Ψ_Y folded into the exponent for stability.
    let mut shift_y = f64::NEG_INFINITY;
    for mask in 0..num_states {
        shift_y = shift_y.max(score(&d, mask) + score(&py, mask));
    }
    let mut e_ab = 0.0;
    let mut e_b = 0.0;
    for mask in 0..num_states {
        let w = (score(&d, mask) + score(&py, mask) - shift_y).exp();
        e_b += w;
        let a = score(&px, mask);
        e_ab += if log_first { w * a } else { w * a.exp() };
    }
    let scale = (shift_y - log_z).exp();
    let e_ab = e_ab * scale;
    let e_b = e_b * scale;

    let e_a = if log_first {
        let mut acc = 0.0;
        for mask in 0..num_states {
            acc += (score(&d, mask) - log_z).exp() * score(&px, mask);
        }
        acc
    } else {
        product_expectation(graph, dist, x)?
    };

    Ok(e_ab - e_a * e_b)
}

/// `D(p_H || p_F)` between the distributions induced by two factor subsets,
/// via `log Z_F − log Z_H + Σ_{i∈H\F} θ_i μ_i^H − Σ_{i∈F\H} θ_i μ_i^H`.
pub fn exact_kl(
    graph: &FactorGraph,
    subset_h: &FactorSubset,
    subset_f: &FactorSubset,
) -> Result<f64, ExactError> {
    let moments_h = exact_moments(graph, subset_h)?;

    let d_f = prepare(graph, subset_f)?;
    let num_states = 1u64 << graph.num_vars();
    let shift = max_score(&d_f, num_states);
    let mut zf = 0.0;
    for mask in 0..num_states {
        zf += (score(&d_f, mask) - shift).exp();
    }
    let log_z_f = shift + zf.ln();

    let mut cross = 0.0;
    for id in subset_h.difference(subset_f).iter() {
        cross += graph.factors()[id.0].weight * moments_h.mu(id);
    }
    for id in subset_f.difference(subset_h).iter() {
        cross -= graph.factors()[id.0].weight * moments_h.mu(id);
    }
    Ok(log_z_f - moments_h.log_z + cross)
}

/// `E_G[φ_x · Ψ_N] / E_G[Ψ_N]`: the expectation of feature `x` after
/// reweighting the `base` distribution by the added factors' potentials.
/// Equals `exact_moments(base ∪ added).mu[x]`.
pub fn reweighted_expectation(
    graph: &FactorGraph,
    base: &FactorSubset,
    added: &FactorSubset,
    x: FactorId,
) -> Result<f64, ExactError> {
    check_cap(graph)?;
    graph.factor(x)?;
    let d = prepare(graph, base)?;
    let a = prepare(graph, added)?;
    let fx = prepare(graph, &FactorSubset::from_ids([x.0]))?;
    let num_states = 1u64 << graph.num_vars();

    let mut shift = f64::NEG_INFINITY;
    for mask in 0..num_states {
        shift = shift.max(score(&d, mask) + score(&a, mask));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for mask in 0..num_states {
        let w = (score(&d, mask) + score(&a, mask) - shift).exp();
        den += w;
        if fx[0].active(mask) {
            num += w;
        }
    }
    Ok(clamp01(num / den))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Assignment, Factor, Feature, VariableId};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn unary(v: usize, theta: f64) -> Factor {
        Factor::new(theta, Feature::unary_identity(VariableId(v))).unwrap()
    }

    fn random_graph(rng: &mut StdRng, max_vars: usize, max_factors: usize) -> FactorGraph {
        let n = rng.gen_range(1..=max_vars);
        let m = rng.gen_range(1..=max_factors);
        let mut factors = Vec::with_capacity(m);
        for _ in 0..m {
            let arity = rng.gen_range(1..=3.min(n));
            let mut scope = Vec::new();
            while scope.len() < arity {
                let v = VariableId(rng.gen_range(0..n));
                if !scope.contains(&v) {
                    scope.push(v);
                }
            }
            let table = (0..1usize << arity).map(|_| rng.gen_bool(0.5)).collect();
            let theta = rng.gen_range(-3.0..3.0);
            factors.push(Factor::new(theta, Feature::new(scope, table).unwrap()).unwrap());
        }
        FactorGraph::new(n, factors, Some(FactorSubset::empty())).unwrap()
    }

    fn random_subset(rng: &mut StdRng, graph: &FactorGraph, p: f64) -> FactorSubset {
        (0..graph.num_factors())
            .filter(|_| rng.gen_bool(p))
            .map(FactorId)
            .collect()
    }

    /// State-wise KL sum, the slow reference for `exact_kl`.
    fn statewise_kl(graph: &FactorGraph, h: &FactorSubset, f: &FactorSubset) -> f64 {
        let n = graph.num_vars();
        let scores = |s: &FactorSubset| -> Vec<f64> {
            (0..1u64 << n)
                .map(|m| {
                    graph
                        .unnormalized_log_score(s, &Assignment::from_bits(m, n))
                        .unwrap()
                })
                .collect()
        };
        let log_probs = |raw: Vec<f64>| -> Vec<f64> {
            let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = raw.iter().map(|s| (s - max).exp()).sum();
            let log_z = max + z.ln();
            raw.into_iter().map(|s| s - log_z).collect()
        };
        let lp_h = log_probs(scores(h));
        let lp_f = log_probs(scores(f));
        lp_h.iter()
            .zip(&lp_f)
            .map(|(&a, &b)| a.exp() * (a - b))
            .sum()
    }

    #[test]
    fn empty_subset_is_uniform() {
        let g = FactorGraph::new(3, vec![unary(0, 1.0)], Some(FactorSubset::empty())).unwrap();
        let m = exact_moments(&g, &FactorSubset::empty()).unwrap();
        assert!((m.log_z - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
        for &p in &m.var_marginals {
            assert!((p - 0.5).abs() < 1e-12);
        }
        assert!((m.mu(FactorId(0)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_unary_ln2() {
        let g = FactorGraph::new(1, vec![unary(0, std::f64::consts::LN_2)], None).unwrap();
        let m = exact_moments(&g, &g.all_factors()).unwrap();
        assert!((m.mu(FactorId(0)) - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.log_z - 3.0f64.ln()).abs() < 1e-12);
        assert!((m.var_marginals[0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn product_expectation_empty_target_is_one() {
        let mut rng = StdRng::seed_from_u64(3);
        let g = random_graph(&mut rng, 6, 8);
        let z = random_subset(&mut rng, &g, 0.5);
        let pe = product_expectation(&g, &z, &FactorSubset::empty()).unwrap();
        assert!((pe - 1.0).abs() < 1e-12);
    }

    #[test]
    fn product_expectation_single_factor_formula() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..30 {
            let g = random_graph(&mut rng, 6, 8);
            let z = random_subset(&mut rng, &g, 0.5);
            let m = exact_moments(&g, &z).unwrap();
            for i in 0..g.num_factors() {
                let id = FactorId(i);
                let theta = g.factor(id).unwrap().weight;
                let mu = m.mu(id);
                let expected = 1.0 - mu + mu * theta.exp();
                let pe = product_expectation(&g, &z, &FactorSubset::from_ids([i])).unwrap();
                assert!((pe - expected).abs() < 1e-10 * expected.max(1.0));
            }
        }
    }

    #[test]
    fn product_expectation_is_partition_ratio() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..40 {
            let g = random_graph(&mut rng, 8, 10);
            let base = random_subset(&mut rng, &g, 0.5);
            let added = g.all_factors().difference(&base);
            let lhs = log_product_expectation(&g, &base, &added).unwrap();
            let log_z_base = exact_moments(&g, &base).unwrap().log_z;
            let log_z_all = exact_moments(&g, &g.all_factors()).unwrap().log_z;
            assert!((lhs + log_z_base - log_z_all).abs() < 1e-10 * log_z_all.abs().max(1.0));
        }
    }

    #[test]
    fn covariance_disjoint_under_factorized_dist_is_zero() {
        let factors = vec![unary(0, 0.8), unary(1, -0.4), unary(0, 1.5), unary(1, 2.0)];
        let g = FactorGraph::new(2, factors, None).unwrap();
        let z = FactorSubset::from_ids([0, 1]);
        let c = covariance(
            &g,
            &z,
            &FactorSubset::from_ids([2]),
            &FactorSubset::from_ids([3]),
            false,
        )
        .unwrap();
        assert!(c.abs() < 1e-12);
    }

    #[test]
    fn covariance_self_is_two_point_variance() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..30 {
            let g = random_graph(&mut rng, 6, 8);
            let z = random_subset(&mut rng, &g, 0.5);
            let m = exact_moments(&g, &z).unwrap();
            let i = rng.gen_range(0..g.num_factors());
            let s = FactorSubset::from_ids([i]);
            let theta = g.factor(FactorId(i)).unwrap().weight;
            let mu = m.mu(FactorId(i));
            let expected = mu * (1.0 - mu) * (theta.exp() - 1.0).powi(2);
            let c = covariance(&g, &z, &s, &s, false).unwrap();
            assert!(
                (c - expected).abs() < 1e-9 * expected.max(1.0),
                "{c} vs {expected}"
            );
        }
    }

    #[test]
    fn covariance_with_empty_side_is_zero() {
        let mut rng = StdRng::seed_from_u64(13);
        let g = random_graph(&mut rng, 5, 6);
        let z = random_subset(&mut rng, &g, 0.5);
        let x = FactorSubset::from_ids([0]);
        let c = covariance(&g, &z, &x, &FactorSubset::empty(), false).unwrap();
        assert!(c.abs() < 1e-12);
        let c_log = covariance(&g, &z, &FactorSubset::empty(), &x, true).unwrap();
        assert!(c_log.abs() < 1e-12);
    }

    #[test]
    fn log_first_covariance_matches_direct_sum() {
        let mut rng = StdRng::seed_from_u64(17);
        for _ in 0..20 {
            let g = random_graph(&mut rng, 6, 8);
            let z = random_subset(&mut rng, &g, 0.4);
            let x = random_subset(&mut rng, &g, 0.3);
            let y = random_subset(&mut rng, &g, 0.3);
            let c = covariance(&g, &z, &x, &y, true).unwrap();

            let n = g.num_vars();
            let mut probs = Vec::new();
            for mask in 0..1u64 << n {
                let y_assign = Assignment::from_bits(mask, n);
                probs.push(g.unnormalized_log_score(&z, &y_assign).unwrap());
            }
            let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let zsum: f64 = probs.iter().map(|s| (s - max).exp()).sum();
            let mut e_ab = 0.0;
            let mut e_a = 0.0;
            let mut e_b = 0.0;
            for mask in 0..1u64 << n {
                let y_assign = Assignment::from_bits(mask, n);
                let p = (probs[mask as usize] - max).exp() / zsum;
                let a = g.unnormalized_log_score(&x, &y_assign).unwrap();
                let b = g.unnormalized_log_score(&y, &y_assign).unwrap().exp();
                e_ab += p * a * b;
                e_a += p * a;
                e_b += p * b;
            }
            let expected = e_ab - e_a * e_b;
            assert!(
                (c - expected).abs() < 1e-9 * expected.abs().max(1.0),
                "{c} vs {expected}"
            );
        }
    }

    #[test]
    fn kl_of_identical_subsets_is_zero() {
        let mut rng = StdRng::seed_from_u64(19);
        let g = random_graph(&mut rng, 6, 8);
        let s = random_subset(&mut rng, &g, 0.5);
        assert!(exact_kl(&g, &s, &s).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_uniform_to_ln2_unary() {
        let g = FactorGraph::new(1, vec![unary(0, std::f64::consts::LN_2)], None).unwrap();
        let d = exact_kl(&g, &FactorSubset::empty(), &g.all_factors()).unwrap();
        assert!((d - 0.05889151782819173).abs() < 1e-12, "{d}");
    }

    #[test]
    fn kl_matches_statewise_sum() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..50 {
            let g = random_graph(&mut rng, 7, 9);
            let h = random_subset(&mut rng, &g, 0.5);
            let f = random_subset(&mut rng, &g, 0.5);
            let fast = exact_kl(&g, &h, &f).unwrap();
            let slow = statewise_kl(&g, &h, &f);
            assert!(
                (fast - slow).abs() < 1e-10 * slow.abs().max(1.0),
                "{fast} vs {slow}"
            );
            if h.is_subset_of(&f) {
                assert!(fast >= -1e-12);
            }
        }
    }

    #[test]
    fn kl_nonnegative_on_nested_subsets() {
        let mut rng = StdRng::seed_from_u64(29);
        for _ in 0..50 {
            let g = random_graph(&mut rng, 6, 8);
            let h = random_subset(&mut rng, &g, 0.4);
            let extra = g.all_factors().difference(&h);
            let f = h.union(&extra);
            assert!(exact_kl(&g, &h, &f).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn reweighted_expectation_matches_direct_moments() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..40 {
            let g = random_graph(&mut rng, 6, 8);
            let base = random_subset(&mut rng, &g, 0.4);
            let added = random_subset(&mut rng, &g, 0.4).difference(&base);
            let joint = exact_moments(&g, &base.union(&added)).unwrap();
            for i in 0..g.num_factors() {
                let r = reweighted_expectation(&g, &base, &added, FactorId(i)).unwrap();
                assert!((r - joint.mu(FactorId(i))).abs() < 1e-12, "factor {i}");
            }
        }
    }

    #[test]
    fn reweighted_expectation_empty_added_is_base_mu() {
        let mut rng = StdRng::seed_from_u64(37);
        let g = random_graph(&mut rng, 6, 8);
        let base = random_subset(&mut rng, &g, 0.5);
        let m = exact_moments(&g, &base).unwrap();
        for i in 0..g.num_factors() {
            let r = reweighted_expectation(&g, &base, &FactorSubset::empty(), FactorId(i)).unwrap();
            assert!((r - m.mu(FactorId(i))).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_weight_drives_expectation_to_one() {
        let g = FactorGraph::new(1, vec![unary(0, 30.0)], None).unwrap();
        let s = FactorSubset::from_ids([0]);
        let r = reweighted_expectation(&g, &FactorSubset::empty(), &s, FactorId(0)).unwrap();
        assert!((r - 1.0).abs() < 1e-9);
    }

    #[test]
    fn extreme_weights_stay_finite() {
        let g = FactorGraph::new(2, vec![unary(0, 600.0), unary(1, -600.0)], None).unwrap();
        let m = exact_moments(&g, &g.all_factors()).unwrap();
        assert!(m.log_z.is_finite());
        assert!((m.mu(FactorId(0)) - 1.0).abs() < 1e-12);
        assert!(m.mu(FactorId(1)).abs() < 1e-12);
        let lpe = log_product_expectation(&g, &FactorSubset::empty(), &g.all_factors()).unwrap();
        assert!(lpe.is_finite());
    }

    #[test]
    fn cap_is_enforced() {
        let g = FactorGraph::new(23, vec![unary(0, 1.0)], None).unwrap();
        assert!(matches!(
            exact_moments(&g, &g.all_factors()),
            Err(ExactError::CapExceeded {
                num_vars: 23,
                cap: ENUMERATION_CAP
            })
        ));
    }
}
