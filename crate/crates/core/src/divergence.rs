//! KL-divergence bookkeeping for factor pruning.
//!
//! The central quantity is the *gain* of a factor: the exact KL divergence
//! between a proxy distribution and the proxy plus that one factor, a
//! closed form in the factor's expectation `μ` and weight `θ`. Summing the
//! gains of excluded factors approximates the divergence between the pruned
//! and full models as if factors were independent; [`decompose`] makes that
//! approximation exact by adding two correlation terms, and [`first_moment_bound`]
//! turns first moments alone into a certified upper bound with an explicit
//! worst-case witness distribution.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::bp::{candidate_mu, BpError, MarginalEstimate};
use crate::exact::{exact_kl, exact_moments, log_product_expectation, ExactError};
use crate::graph::{FactorGraph, FactorId, FactorSubset, GraphError};

#[derive(Debug, Error)]
pub enum DivergenceError {
    #[error("feature expectation {0} outside [0,1]")]
    MuOutOfRange(f64),
    #[error("weight {0} is not finite")]
    NonFiniteWeight(f64),
    #[error("got {means} means but {thetas} weights")]
    LengthMismatch { means: usize, thetas: usize },
    #[error("factor {0} is not a candidate")]
    NotACandidate(FactorId),
    #[error("kept subset must contain the proxy subset")]
    NotNested,
    #[error(transparent)]
    Exact(#[from] ExactError),
    #[error(transparent)]
    Bp(#[from] BpError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// `log(1 − μ + μ·e^θ)`, the log expected potential of a binary feature
/// with expectation `μ`, stable for any weight magnitude.
fn log_mean_potential(mu: f64, theta: f64) -> f64 {
    if theta <= 0.0 {
        (mu * theta.exp_m1()).ln_1p()
    } else {
        theta + ((1.0 - mu) * (-theta).exp_m1()).ln_1p()
    }
}

/// KL divergence added by dropping one factor with feature expectation `mu`
/// and weight `theta` from an otherwise unchanged model:
/// `log(1 − μ + μ·e^θ) − μ·θ`. Always ≥ 0.
pub fn gain(mu: f64, theta: f64) -> Result<f64, DivergenceError> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(DivergenceError::MuOutOfRange(mu));
    }
    if !theta.is_finite() {
        return Err(DivergenceError::NonFiniteWeight(theta));
    }
    let g = log_mean_potential(mu, theta) - mu * theta;
    Ok(g.max(0.0))
}

/// Gains of every candidate factor, keyed by factor id.
#[derive(Clone, Debug)]
pub struct GainTable {
    entries: BTreeMap<FactorId, f64>,
    /// The estimate the gains were computed from.
    pub source: MarginalEstimate,
}

impl GainTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: FactorId) -> Option<f64> {
        self.entries.get(&id).copied()
    }

    /// Entries in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (FactorId, f64)> + '_ {
        self.entries.iter().map(|(&id, &g)| (id, g))
    }

    pub fn total(&self) -> f64 {
        self.entries.values().sum()
    }

    /// Builds a table directly from (id, gain) pairs; for tests and
    /// synthetic selection studies.
    pub fn from_entries<I: IntoIterator<Item = (FactorId, f64)>>(entries: I) -> Self {
        GainTable {
            entries: entries.into_iter().collect(),
            source: MarginalEstimate::uniform(0),
        }
    }

    /// Sum of gains of the candidates left out by `selected`: the predicted
    /// divergence between the pruned and full models under the independence
    /// approximation. Errors if `selected` strays outside the candidates.
    pub fn predicted_divergence(&self, selected: &FactorSubset) -> Result<f64, DivergenceError> {
        for id in selected.iter() {
            if !self.entries.contains_key(&id) {
                return Err(DivergenceError::NotACandidate(id));
            }
        }
        // + 0.0 turns the empty sum's -0.0 into +0.0.
        Ok(self
            .entries
            .iter()
            .filter(|(id, _)| !selected.contains(**id))
            .map(|(_, &g)| g)
            .sum::<f64>()
            + 0.0)
    }
}

/// Scores every candidate factor against the seed estimate. Uses the
/// estimate's stored expectation when available (exact engines provide one
/// for every factor), otherwise the product-of-beliefs approximation.
pub fn score_candidates(
    graph: &FactorGraph,
    seed_estimate: &MarginalEstimate,
) -> Result<GainTable, DivergenceError> {
    let mut entries = BTreeMap::new();
    for id in graph.candidates().iter() {
        let mu = match seed_estimate.factor_mu.get(&id) {
            Some(&mu) => mu,
            None => candidate_mu(graph, seed_estimate, id)?,
        };
        entries.insert(id, gain(mu, graph.factor(id)?.weight)?);
    }
    Ok(GainTable {
        entries,
        source: seed_estimate.clone(),
    })
}

/// Exact breakdown of the divergence between the kept and full models.
///
/// For proxy `G`, kept `H = G ∪ N`, and removed `R`, the identity
/// `per_factor_sum + s_term + i_term = exact_kl` holds, where
/// `per_factor_sum` is the sum of gains of the removed factors under `G`.
#[derive(Clone, Debug)]
pub struct DecompositionReport {
    /// Σ over removed factors of their gain under the proxy.
    pub per_factor_sum: f64,
    /// Error from correlation between the added and removed potentials:
    /// `log(Cov_G(Ψ_N,Ψ_R)/(E_G[Ψ_N]·E_G[Ψ_R]) + 1) − Cov_G(logΨ_R,Ψ_N)/E_G[Ψ_N]`.
    pub s_term: f64,
    /// Error from correlation among the removed potentials:
    /// `log(E_G[Ψ_R] / Π_i E_G[Ψ_i])`.
    pub i_term: f64,
    /// `D(p_H ‖ p_F)` from the enumeration oracle.
    pub exact_kl: f64,
    /// `E_G[Ψ_N·Ψ_R] / (E_G[Ψ_N]·E_G[Ψ_R])`; 1 when kept and removed
    /// potentials are uncorrelated under the proxy.
    pub alpha: f64,
    /// `Cov_G(log Ψ_R, Ψ_N)`.
    pub beta: f64,
    /// `E_G[Ψ_R] / Π_i E_G[Ψ_i]`; 1 when removed potentials are mutually
    /// uncorrelated under the proxy.
    pub eta: f64,
}

impl DecompositionReport {
    /// Defect of the identity; zero up to floating-point error.
    pub fn identity_residual(&self) -> f64 {
        self.per_factor_sum + self.s_term + self.i_term - self.exact_kl
    }
}

/// Exact decomposition of `D(p_H ‖ p_full)` for nested subsets
/// `proxy ⊆ kept`; enumeration-backed, so subject to the variable cap.
pub fn decompose(
    graph: &FactorGraph,
    proxy: &FactorSubset,
    kept: &FactorSubset,
) -> Result<DecompositionReport, DivergenceError> {
    graph.validate_subset(kept)?;
    if !proxy.is_subset_of(kept) {
        return Err(DivergenceError::NotNested);
    }
    let full = graph.all_factors();
    let added = kept.difference(proxy);
    let removed = full.difference(kept);

    let moments_proxy = exact_moments(graph, proxy)?;
    let moments_kept = exact_moments(graph, kept)?;

    let mut per_factor_sum = 0.0;
    let mut log_mean_product = 0.0;
    let mut reweight_shift = 0.0;
    for id in removed.iter() {
        let theta = graph.factor(id)?.weight;
        let mu = moments_proxy.mu(id);
        per_factor_sum += gain(mu, theta)?;
        log_mean_product += log_mean_potential(mu, theta);
        reweight_shift += theta * (moments_kept.mu(id) - mu);
    }

    let lpe_added = log_product_expectation(graph, proxy, &added)?;
    let lpe_removed = log_product_expectation(graph, proxy, &removed)?;
    let lpe_joint = log_product_expectation(graph, proxy, &added.union(&removed))?;

    let log_alpha = lpe_joint - lpe_added - lpe_removed;
    let i_term = lpe_removed - log_mean_product;

    Ok(DecompositionReport {
        per_factor_sum,
        s_term: log_alpha - reweight_shift,
        i_term,
        exact_kl: exact_kl(graph, kept, &full)?,
        alpha: log_alpha.exp(),
        beta: reweight_shift * lpe_added.exp(),
        eta: i_term.exp(),
    })
}

/// Upper bounds on the divergence cost of removing a set of factors, from
/// their first moments alone.
#[derive(Clone, Debug)]
pub struct BoundReport {
    /// Bound ignoring all interaction between the removed features.
    pub loose: f64,
    /// Bound after the worst-case correction; `tight ≤ loose`, with
    /// equality impossible unless both are zero-width cases.
    pub tight: f64,
    /// The flip-normalized means in ascending order.
    pub sorted_means: Vec<f64>,
    /// Number of removed factors.
    pub num_remaining: usize,
}

/// Flip-normalizes (negative weights become positive by complementing the
/// feature) and returns (mu, theta, flipped) triples.
fn normalize_signs(
    means: &[f64],
    thetas: &[f64],
) -> Result<Vec<(f64, f64, bool)>, DivergenceError> {
    if means.len() != thetas.len() {
        return Err(DivergenceError::LengthMismatch {
            means: means.len(),
            thetas: thetas.len(),
        });
    }
    means
        .iter()
        .zip(thetas)
        .map(|(&mu, &theta)| {
            if !(0.0..=1.0).contains(&mu) {
                return Err(DivergenceError::MuOutOfRange(mu));
            }
            if !theta.is_finite() {
                return Err(DivergenceError::NonFiniteWeight(theta));
            }
            Ok(if theta < 0.0 {
                (1.0 - mu, -theta, true)
            } else {
                (mu, theta, false)
            })
        })
        .collect()
}

/// Indices `0..n` ordered by the normalized means ascending (stable).
fn mean_order(normalized: &[(f64, f64, bool)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..normalized.len()).collect();
    order.sort_by(|&a, &b| normalized[a].0.total_cmp(&normalized[b].0));
    order
}

/// First-moment upper bounds on `D(p_kept ‖ p_full)` given the means of the
/// removed factors' features under the kept model and their weights.
/// Negative weights are first normalized away by a feature flip, which
/// leaves the divergence unchanged.
pub fn first_moment_bound(means: &[f64], thetas: &[f64]) -> Result<BoundReport, DivergenceError> {
    let normalized = normalize_signs(means, thetas)?;
    let order = mean_order(&normalized);

    let loose: f64 = normalized
        .iter()
        .map(|&(mu, theta, _)| theta * (1.0 - mu))
        .sum::<f64>()
        + 0.0;

    // log Σ_j (μ'_{j+1} − μ'_j)·e^{−Σ_{k≤j} θ'_k} over the gaps of the
    // sorted means padded with 0 and 1; always ≤ 0 since the gaps sum to 1.
    let mut terms = Vec::with_capacity(order.len() + 1);
    let mut prev = 0.0;
    let mut weight_sum = 0.0;
    for &idx in &order {
        let (mu, theta, _) = normalized[idx];
        let gap = mu - prev;
        if gap > 0.0 {
            terms.push(gap.ln() - weight_sum);
        }
        weight_sum += theta;
        prev = mu;
    }
    if 1.0 - prev > 0.0 {
        terms.push((1.0 - prev).ln() - weight_sum);
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_correction = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();

    Ok(BoundReport {
        loose,
        tight: loose + log_correction,
        sorted_means: order.iter().map(|&i| normalized[i].0).collect(),
        num_remaining: order.len(),
    })
}

/// One outcome of the worst-case joint distribution over removed features:
/// which features are active (in input order) and with what probability.
#[derive(Clone, Debug, PartialEq)]
pub struct WitnessAtom {
    pub active: Vec<bool>,
    pub probability: f64,
}

/// The nested joint distribution achieving [`first_moment_bound`]'s tight value:
/// sorting the flip-normalized means ascending, atom `j` activates exactly
/// the features above position `j` with probability `μ'_{j+1} − μ'_j`.
/// Atoms are returned for all `j = 0..=L`, zero-probability ones included;
/// their marginals reproduce the input means exactly.
pub fn nested_witness(means: &[f64], thetas: &[f64]) -> Result<Vec<WitnessAtom>, DivergenceError> {
    let normalized = normalize_signs(means, thetas)?;
    let order = mean_order(&normalized);
    let n = order.len();

    let mut atoms = Vec::with_capacity(n + 1);
    for j in 0..=n {
        let lo = if j == 0 {
            0.0
        } else {
            normalized[order[j - 1]].0
        };
        let hi = if j == n { 1.0 } else { normalized[order[j]].0 };
        let mut active = vec![false; n];
        for &idx in &order[j..] {
            active[idx] = true;
        }
        for (a, &(_, _, flipped)) in active.iter_mut().zip(&normalized) {
            *a ^= flipped;
        }
        atoms.push(WitnessAtom {
            active,
            probability: (hi - lo).max(0.0),
        });
    }
    Ok(atoms)
}

/// `log E[Ψ] − E[log Ψ]` of a removed-factor set under an explicit joint
/// distribution over its feature patterns; with the [`nested_witness`]
/// atoms this equals the tight bound.
pub fn witness_divergence(atoms: &[WitnessAtom], thetas: &[f64]) -> Result<f64, DivergenceError> {
    let mut log_terms = Vec::new();
    let mut mean_log = 0.0;
    for atom in atoms {
        if atom.active.len() != thetas.len() {
            return Err(DivergenceError::LengthMismatch {
                means: atom.active.len(),
                thetas: thetas.len(),
            });
        }
        let log_potential: f64 = atom
            .active
            .iter()
            .zip(thetas)
            .filter(|(&a, _)| a)
            .map(|(_, &t)| t)
            .sum();
        mean_log += atom.probability * log_potential;
        if atom.probability > 0.0 {
            log_terms.push(atom.probability.ln() + log_potential);
        }
    }
    let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_mean = max + log_terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    Ok(log_mean - mean_log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bp::{run_bp, BpConfig};
    use crate::graph::{Factor, Feature, VariableId};
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

    #[test]
    fn gain_basic_values() {
        assert_eq!(gain(0.5, 0.0).unwrap(), 0.0);
        assert_eq!(gain(1.0, 2.0).unwrap(), 0.0);
        assert_eq!(gain(0.0, -3.0).unwrap(), 0.0);
        let g = gain(0.5, std::f64::consts::LN_2).unwrap();
        assert!((g - 0.05889151782819173).abs() < 1e-15);
    }

    #[test]
    fn gain_rejects_bad_inputs() {
        assert!(matches!(
            gain(-0.1, 1.0),
            Err(DivergenceError::MuOutOfRange(_))
        ));
        assert!(matches!(
            gain(1.1, 1.0),
            Err(DivergenceError::MuOutOfRange(_))
        ));
        assert!(matches!(
            gain(f64::NAN, 1.0),
            Err(DivergenceError::MuOutOfRange(_))
        ));
        assert!(matches!(
            gain(0.5, f64::INFINITY),
            Err(DivergenceError::NonFiniteWeight(_))
        ));
    }

    #[test]
    fn gain_nonnegative_on_grid() {
        let mut rng = StdRng::seed_from_u64(61);
        for _ in 0..2000 {
            let mu = rng.gen_range(0.0..=1.0);
            let theta = rng.gen_range(-30.0..30.0);
            assert!(gain(mu, theta).unwrap() >= 0.0, "mu={mu} theta={theta}");
        }
        for theta in [-700.0, -1.0, 0.0, 1.0, 700.0] {
            for mu in [0.0, 1e-12, 0.5, 1.0 - 1e-12, 1.0] {
                let g = gain(mu, theta).unwrap();
                assert!(g.is_finite() && g >= 0.0, "mu={mu} theta={theta} g={g}");
            }
        }
    }

    #[test]
    fn gain_is_flip_invariant() {
        let mut rng = StdRng::seed_from_u64(67);
        for _ in 0..500 {
            let mu = rng.gen_range(0.0..=1.0);
            let theta = rng.gen_range(-5.0..5.0);
            let a = gain(mu, theta).unwrap();
            let b = gain(1.0 - mu, -theta).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gain_matches_exact_single_factor_kl() {
        let mut rng = StdRng::seed_from_u64(71);
        for _ in 0..40 {
            let graph = random_graph(&mut rng, 7, 8);
            let proxy: FactorSubset = (0..graph.num_factors())
                .filter(|_| rng.gen_bool(0.4))
                .map(FactorId)
                .collect();
            let outside: Vec<FactorId> = graph.all_factors().difference(&proxy).iter().collect();
            if outside.is_empty() {
                continue;
            }
            let id = outside[rng.gen_range(0..outside.len())];
            let mu = exact_moments(&graph, &proxy).unwrap().mu(id);
            let theta = graph.factor(id).unwrap().weight;
            let with = proxy.union(&FactorSubset::from_ids([id.0]));
            let kl = exact_kl(&graph, &proxy, &with).unwrap();
            let g = gain(mu, theta).unwrap();
            assert!((g - kl).abs() < 1e-10, "gain {g} vs kl {kl}");
        }
    }

    #[test]
    fn score_candidates_uses_stored_expectations() {
        let g = FactorGraph::new(
            2,
            vec![
                unary(0, 0.4),
                unary(1, -0.2),
                Factor::new(
                    1.0,
                    Feature::equality(VariableId(0), VariableId(1)).unwrap(),
                )
                .unwrap(),
            ],
            None,
        )
        .unwrap();
        let moments = exact_moments(&g, g.seed()).unwrap();
        let table = score_candidates(&g, &MarginalEstimate::from_exact(&moments)).unwrap();
        assert_eq!(table.len(), 1);
        let expected = gain(moments.mu(FactorId(2)), 1.0).unwrap();
        assert!((table.get(FactorId(2)).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn score_candidates_falls_back_to_belief_products() {
        let g = FactorGraph::new(
            2,
            vec![
                unary(0, 0.0),
                unary(1, 0.0),
                Factor::new(
                    1.0,
                    Feature::equality(VariableId(0), VariableId(1)).unwrap(),
                )
                .unwrap(),
            ],
            None,
        )
        .unwrap();
        let est = run_bp(&g, g.seed(), &BpConfig::default()).unwrap();
        let table = score_candidates(&g, &est).unwrap();
        let expected = gain(0.5, 1.0).unwrap();
        assert!((table.get(FactorId(2)).unwrap() - expected).abs() < 1e-12);
        assert!((table.total() - expected).abs() < 1e-12);
    }

    #[test]
    fn no_candidates_gives_empty_table() {
        let g = FactorGraph::new(1, vec![unary(0, 1.0)], None).unwrap();
        let est = run_bp(&g, g.seed(), &BpConfig::default()).unwrap();
        let table = score_candidates(&g, &est).unwrap();
        assert!(table.is_empty());
        assert_eq!(
            table.predicted_divergence(&FactorSubset::empty()).unwrap(),
            0.0
        );
    }

    #[test]
    fn predicted_divergence_sums_excluded_gains() {
        let table =
            GainTable::from_entries([(FactorId(3), 0.1), (FactorId(5), 0.2), (FactorId(9), 0.5)]);
        assert!((table.predicted_divergence(&FactorSubset::empty()).unwrap() - 0.8).abs() < 1e-15);
        let all = FactorSubset::from_ids([3, 5, 9]);
        assert_eq!(table.predicted_divergence(&all).unwrap(), 0.0);
        let partial = FactorSubset::from_ids([3, 9]);
        assert!((table.predicted_divergence(&partial).unwrap() - 0.2).abs() < 1e-15);
        assert!(matches!(
            table.predicted_divergence(&FactorSubset::from_ids([4])),
            Err(DivergenceError::NotACandidate(_))
        ));
    }

    #[test]
    fn decompose_identity_on_random_nested_subsets() {
        let mut rng = StdRng::seed_from_u64(73);
        for _ in 0..60 {
            let graph = random_graph(&mut rng, 8, 10);
            let proxy: FactorSubset = (0..graph.num_factors())
                .filter(|_| rng.gen_bool(0.3))
                .map(FactorId)
                .collect();
            let kept = proxy.union(
                &(0..graph.num_factors())
                    .filter(|_| rng.gen_bool(0.3))
                    .map(FactorId)
                    .collect(),
            );
            let report = decompose(&graph, &proxy, &kept).unwrap();
            assert!(
                report.identity_residual().abs() < 1e-9,
                "residual {}",
                report.identity_residual()
            );
            assert!(report.alpha > 0.0 && report.eta > 0.0);
        }
    }

    #[test]
    fn decompose_trivial_when_nothing_removed() {
        let mut rng = StdRng::seed_from_u64(79);
        let graph = random_graph(&mut rng, 6, 6);
        let all = graph.all_factors();
        let proxy: FactorSubset = (0..graph.num_factors())
            .filter(|_| rng.gen_bool(0.5))
            .map(FactorId)
            .collect();
        let report = decompose(&graph, &proxy, &all).unwrap();
        assert!(report.per_factor_sum.abs() < 1e-12);
        assert!(report.s_term.abs() < 1e-12);
        assert!(report.i_term.abs() < 1e-12);
        assert!(report.exact_kl.abs() < 1e-12);
    }

    #[test]
    fn decompose_exact_under_independence() {
        // Unary-only proxy, removed factors on disjoint variables, nothing
        // added: both error terms vanish.
        let factors = vec![
            unary(0, 0.7),
            unary(1, -0.3),
            unary(2, 1.1),
            unary(0, 1.4),
            unary(1, -0.9),
            Factor::new(
                0.8,
                Feature::new(vec![VariableId(2)], vec![true, false]).unwrap(),
            )
            .unwrap(),
        ];
        let graph = FactorGraph::new(3, factors, Some(FactorSubset::from_ids([0, 1, 2]))).unwrap();
        let proxy = FactorSubset::from_ids([0, 1, 2]);
        let report = decompose(&graph, &proxy, &proxy).unwrap();
        assert!(report.s_term.abs() < 1e-12, "s = {}", report.s_term);
        assert!(report.i_term.abs() < 1e-12, "i = {}", report.i_term);
        assert!((report.per_factor_sum - report.exact_kl).abs() < 1e-10);
    }

    #[test]
    fn decompose_beta_matches_covariance_oracle() {
        use crate::exact::covariance;
        let mut rng = StdRng::seed_from_u64(83);
        for _ in 0..20 {
            let graph = random_graph(&mut rng, 6, 8);
            let proxy: FactorSubset = (0..graph.num_factors())
                .filter(|_| rng.gen_bool(0.3))
                .map(FactorId)
                .collect();
            let kept = proxy.union(
                &(0..graph.num_factors())
                    .filter(|_| rng.gen_bool(0.3))
                    .map(FactorId)
                    .collect(),
            );
            let added = kept.difference(&proxy);
            let removed = graph.all_factors().difference(&kept);
            let report = decompose(&graph, &proxy, &kept).unwrap();
            let oracle = covariance(&graph, &proxy, &removed, &added, true).unwrap();
            assert!(
                (report.beta - oracle).abs() < 1e-9 * oracle.abs().max(1.0),
                "{} vs {oracle}",
                report.beta
            );
        }
    }

    #[test]
    fn decompose_rejects_non_nested_subsets() {
        let mut rng = StdRng::seed_from_u64(89);
        let graph = random_graph(&mut rng, 4, 4);
        let proxy = graph.all_factors();
        let kept = FactorSubset::empty();
        if graph.num_factors() > 0 {
            assert!(matches!(
                decompose(&graph, &proxy, &kept),
                Err(DivergenceError::NotNested)
            ));
        }
    }

    #[test]
    fn bound_trivial_cases() {
        let r = first_moment_bound(&[1.0], &[2.0]).unwrap();
        assert!(r.tight.abs() < 1e-12);
        let r = first_moment_bound(&[0.3, 0.7], &[0.0, 0.0]).unwrap();
        assert!(r.tight.abs() < 1e-12 && r.loose.abs() < 1e-12);
    }

    #[test]
    fn bound_single_factor_equals_gain() {
        let mut rng = StdRng::seed_from_u64(97);
        for _ in 0..200 {
            let mu = rng.gen_range(0.0..=1.0);
            let theta = rng.gen_range(-4.0..4.0);
            let r = first_moment_bound(&[mu], &[theta]).unwrap();
            let g = gain(mu, theta).unwrap();
            assert!((r.tight - g).abs() < 1e-12, "mu={mu} theta={theta}");
            assert!(r.tight <= r.loose + 1e-12);
        }
    }

    #[test]
    fn bound_tight_below_loose_and_sorted() {
        let mut rng = StdRng::seed_from_u64(101);
        for _ in 0..200 {
            let n = rng.gen_range(1..=8);
            let means: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let thetas: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let r = first_moment_bound(&means, &thetas).unwrap();
            assert!(r.tight <= r.loose + 1e-12);
            assert!(r.num_remaining == n);
            for w in r.sorted_means.windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }

    #[test]
    fn witness_atoms_match_worked_example() {
        let atoms = nested_witness(&[0.3, 0.6], &[std::f64::consts::LN_2; 2]).unwrap();
        assert_eq!(atoms.len(), 3);
        assert_eq!(atoms[0].active, vec![true, true]);
        assert!((atoms[0].probability - 0.3).abs() < 1e-12);
        assert_eq!(atoms[1].active, vec![false, true]);
        assert!((atoms[1].probability - 0.3).abs() < 1e-12);
        assert_eq!(atoms[2].active, vec![false, false]);
        assert!((atoms[2].probability - 0.4).abs() < 1e-12);
    }

    #[test]
    fn witness_two_point_case() {
        let atoms = nested_witness(&[0.3], &[1.0]).unwrap();
        assert_eq!(atoms.len(), 2);
        assert_eq!(atoms[0].active, vec![true]);
        assert!((atoms[0].probability - 0.3).abs() < 1e-12);
        assert_eq!(atoms[1].active, vec![false]);
        assert!((atoms[1].probability - 0.7).abs() < 1e-12);
    }

    #[test]
    fn witness_marginals_reproduce_means() {
        let mut rng = StdRng::seed_from_u64(103);
        for _ in 0..100 {
            let n = rng.gen_range(1..=6);
            let means: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let thetas: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let atoms = nested_witness(&means, &thetas).unwrap();
            let prob_sum: f64 = atoms.iter().map(|a| a.probability).sum();
            assert!((prob_sum - 1.0).abs() < 1e-12);
            for i in 0..n {
                let marginal: f64 = atoms
                    .iter()
                    .filter(|a| a.active[i])
                    .map(|a| a.probability)
                    .sum();
                assert!((marginal - means[i]).abs() < 1e-9, "mean {i}");
            }
        }
    }

    #[test]
    fn witness_divergence_achieves_tight_bound() {
        let mut rng = StdRng::seed_from_u64(107);
        for _ in 0..300 {
            let n = rng.gen_range(1..=4);
            let means: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let thetas: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let bound = first_moment_bound(&means, &thetas).unwrap();
            let atoms = nested_witness(&means, &thetas).unwrap();
            let d = witness_divergence(&atoms, &thetas).unwrap();
            assert!(
                (d - bound.tight).abs() < 1e-9,
                "witness {d} vs tight {}",
                bound.tight
            );
        }
    }

    #[test]
    fn bound_dominates_exact_divergence() {
        let mut rng = StdRng::seed_from_u64(109);
        for _ in 0..40 {
            let graph = random_graph(&mut rng, 7, 8);
            let kept: FactorSubset = (0..graph.num_factors())
                .filter(|_| rng.gen_bool(0.5))
                .map(FactorId)
                .collect();
            let removed = graph.all_factors().difference(&kept);
            if removed.is_empty() {
                continue;
            }
            let moments = exact_moments(&graph, &kept).unwrap();
            let means: Vec<f64> = removed.iter().map(|id| moments.mu(id)).collect();
            let thetas: Vec<f64> = removed
                .iter()
                .map(|id| graph.factor(id).unwrap().weight)
                .collect();
            let bound = first_moment_bound(&means, &thetas).unwrap();
            let kl = exact_kl(&graph, &kept, &graph.all_factors()).unwrap();
            assert!(bound.tight >= kl - 1e-9, "tight {} < kl {kl}", bound.tight);
        }
    }

    #[test]
    fn flip_normalization_preserves_bound_and_divergence() {
        let mut rng = StdRng::seed_from_u64(113);
        for _ in 0..30 {
            let graph = random_graph(&mut rng, 6, 7);
            let flip_id = rng.gen_range(0..graph.num_factors());
            let mut factors = graph.factors().to_vec();
            let theta = factors[flip_id].weight;
            factors[flip_id] =
                Factor::new(-theta, factors[flip_id].feature.complemented()).unwrap();
            let flipped =
                FactorGraph::new(graph.num_vars(), factors, Some(graph.seed().clone())).unwrap();

            let kept: FactorSubset = (0..graph.num_factors())
                .filter(|_| rng.gen_bool(0.5))
                .map(FactorId)
                .collect();
            let all = graph.all_factors();
            let kl_a = exact_kl(&graph, &kept, &all).unwrap();
            let kl_b = exact_kl(&flipped, &kept, &all).unwrap();
            assert!((kl_a - kl_b).abs() < 1e-10, "{kl_a} vs {kl_b}");

            let removed = all.difference(&kept);
            if removed.is_empty() {
                continue;
            }
            let bounds: Vec<BoundReport> = [&graph, &flipped]
                .iter()
                .map(|g| {
                    let moments = exact_moments(g, &kept).unwrap();
                    let means: Vec<f64> = removed.iter().map(|id| moments.mu(id)).collect();
                    let thetas: Vec<f64> = removed
                        .iter()
                        .map(|id| g.factor(id).unwrap().weight)
                        .collect();
                    first_moment_bound(&means, &thetas).unwrap()
                })
                .collect();
            assert!((bounds[0].tight - bounds[1].tight).abs() < 1e-10);
        }
    }
}
