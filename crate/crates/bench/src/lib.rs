//! Deterministic fixtures shared by the benchmark targets.

use prunebp::ising::{build_ising_graph, generate_instance};
use prunebp::{Factor, FactorGraph, FactorId, Feature, GainTable, IsingConfig, VariableId};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Gain table over candidate ids `0..n` with gains uniform in `(0, 1]`.
pub fn random_gains(n: usize, seed: u64) -> GainTable {
    let mut rng = StdRng::seed_from_u64(seed);
    GainTable::from_entries((0..n).map(|id| (FactorId(id), 1.0 - rng.gen::<f64>())))
}

/// Grid Markov network built from one noisy binary image. Unaries form the
/// seed; the equality edges are the pruning candidates.
pub fn grid_graph(side: usize, seed: u64) -> FactorGraph {
    let config = IsingConfig {
        grid_side: side,
        rng_seed: seed,
        instances: 1,
        ..IsingConfig::default()
    };
    let image = generate_instance(&config, 0).expect("valid grid config");
    build_ising_graph(&image, config.alpha, config.edge_weight).expect("valid grid graph")
}

/// Random pairwise network small enough for exhaustive enumeration: a unary
/// per variable plus `num_pairs` random equality edges. The unaries are the
/// seed.
pub fn small_random_graph(num_vars: usize, num_pairs: usize, seed: u64) -> FactorGraph {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut factors = Vec::with_capacity(num_vars + num_pairs);
    for v in 0..num_vars {
        let theta = rng.gen_range(-1.0..=1.0);
        let feature = Feature::unary_identity(VariableId(v));
        factors.push(Factor::new(theta, feature).expect("finite weight"));
    }
    for _ in 0..num_pairs {
        let a = rng.gen_range(0..num_vars);
        let mut b = rng.gen_range(0..num_vars - 1);
        if b >= a {
            b += 1;
        }
        let theta = rng.gen_range(-2.0..=2.0);
        let feature = Feature::equality(VariableId(a), VariableId(b)).expect("distinct scope");
        factors.push(Factor::new(theta, feature).expect("finite weight"));
    }
    FactorGraph::new(num_vars, factors, None).expect("valid graph")
}
