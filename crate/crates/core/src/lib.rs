//! Approximate marginal inference in binary Markov networks by pruning
//! low-value factors before running belief propagation.
//!
//! The model is `p(y) ∝ Π_i exp(θ_i · φ_i(y))` over binary variables, with
//! each feature `φ_i` a 0/1 truth table on a small scope. Starting from a
//! cheap *seed* subgraph, every remaining factor is scored by the exact
//! KL divergence its removal would cost if factors were independent, and a
//! selection scheme keeps a high-value subset:
//!
//! * minimize subset size subject to a divergence budget,
//! * minimize divergence subject to a size budget, or
//! * minimize size plus divergence (a per-factor threshold, no sort).
//!
//! Inference then runs only on the kept factors. Small graphs can be solved
//! exactly by enumeration, which also certifies the divergence bookkeeping.

pub mod bp;
pub mod divergence;
pub mod exact;
pub mod graph;
pub mod ising;
pub mod pruning;

pub use bp::{BpConfig, MarginalEstimate};
pub use divergence::{BoundReport, DecompositionReport, GainTable, WitnessAtom};
pub use exact::ExactMoments;
pub use graph::{Assignment, Factor, FactorGraph, FactorId, FactorSubset, Feature, VariableId};
pub use ising::{Calibration, ExperimentRecord, IsingConfig, NoisyImage, Pattern, SweepOutcome};
pub use pruning::{Engine, PruneSelection, PrunedInferenceResult, Scheme, SchemeFamily};
