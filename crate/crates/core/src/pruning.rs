//! Factor selection schemes and the prune-then-infer pipeline.
//!
//! Given gains for every candidate factor, a [`Scheme`] picks the subset to
//! keep: the fewest factors subject to a divergence budget, the most
//! valuable factors subject to a size budget, or everything above a
//! per-factor threshold. The third needs no ordering of candidates at all,
//! which the `_counting` variants make checkable. [`ignorant_inference`]
//! wires the full pipeline: infer on the seed, score, select, infer again
//! on the kept subgraph.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::bp::{run_bp, BpConfig, BpError, MarginalEstimate};
use crate::divergence::{score_candidates, DivergenceError, GainTable};
use crate::exact::{exact_moments, ExactError};
use crate::graph::{FactorGraph, FactorId, FactorSubset, GraphError};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("graph has an empty seed subset; candidate scoring needs a proxy")]
    EmptySeed,
    #[error("factor budget {budget} is below the seed size {seed_size}")]
    BudgetBelowSeed { budget: usize, seed_size: usize },
    #[error(transparent)]
    Bp(#[from] BpError),
    #[error(transparent)]
    Exact(#[from] ExactError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// A selection objective with its parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scheme {
    /// Keep as few candidates as possible while the excluded gains sum to
    /// at most `epsilon`.
    MinSize { epsilon: f64 },
    /// Keep the highest-gain candidates up to `budget` total factors,
    /// seed factors included in the count.
    MinDivergence { budget: usize },
    /// Keep every candidate whose gain is at least `gamma`.
    MinJoint { gamma: f64 },
}

impl Scheme {
    pub fn family(&self) -> SchemeFamily {
        match self {
            Scheme::MinSize { .. } => SchemeFamily::MinSize,
            Scheme::MinDivergence { .. } => SchemeFamily::MinDivergence,
            Scheme::MinJoint { .. } => SchemeFamily::MinJoint,
        }
    }

    /// The scheme parameter as a plain number (the budget for
    /// [`Scheme::MinDivergence`]).
    pub fn param(&self) -> f64 {
        match *self {
            Scheme::MinSize { epsilon } => epsilon,
            Scheme::MinDivergence { budget } => budget as f64,
            Scheme::MinJoint { gamma } => gamma,
        }
    }

    /// Applies the scheme to a gain table.
    pub fn select(&self, gains: &GainTable, seed_size: usize) -> Result<FactorSubset, PruneError> {
        match *self {
            Scheme::MinSize { epsilon } => Ok(pick_min_size(gains, epsilon)),
            Scheme::MinDivergence { budget } => pick_min_divergence(gains, budget, seed_size),
            Scheme::MinJoint { gamma } => Ok(pick_min_joint(gains, gamma)),
        }
    }
}

/// Scheme kind without its parameter; the CLI-facing name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchemeFamily {
    MinSize,
    MinDivergence,
    MinJoint,
}

impl fmt::Display for SchemeFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchemeFamily::MinSize => "min-size",
            SchemeFamily::MinDivergence => "min-div",
            SchemeFamily::MinJoint => "min-joint",
        })
    }
}

impl FromStr for SchemeFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "min-size" => Ok(SchemeFamily::MinSize),
            "min-div" => Ok(SchemeFamily::MinDivergence),
            "min-joint" => Ok(SchemeFamily::MinJoint),
            other => Err(format!(
                "unknown scheme `{other}`, expected min-size, min-div, or min-joint"
            )),
        }
    }
}

/// Keeps the fewest candidates such that the gains of everything discarded
/// sum to at most `epsilon`: candidates are taken in ascending gain order
/// (ties by id) and discarded while the running sum stays within budget;
/// the first one that would overshoot is kept, along with all later ones.
pub fn pick_min_size(gains: &GainTable, epsilon: f64) -> FactorSubset {
    pick_min_size_counting(gains, epsilon).0
}

/// [`pick_min_size`] plus the number of inter-candidate order comparisons.
pub fn pick_min_size_counting(gains: &GainTable, epsilon: f64) -> (FactorSubset, u64) {
    assert!(
        epsilon >= 0.0,
        "divergence budget must be non-negative, got {epsilon}"
    );
    let comparisons = Cell::new(0u64);
    let mut items: Vec<(f64, FactorId)> = gains.iter().map(|(id, g)| (g, id)).collect();
    items.sort_unstable_by(|a, b| {
        comparisons.set(comparisons.get() + 1);
        a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
    });

    let mut selected = FactorSubset::empty();
    let mut discarded = 0.0;
    let mut discarding = true;
    for &(g, id) in &items {
        if discarding && discarded + g <= epsilon {
            discarded += g;
        } else {
            discarding = false;
            selected.insert(id);
        }
    }
    (selected, comparisons.get())
}

/// Keeps the `budget − seed_size` highest-gain candidates (ties by id,
/// fewer if candidates run out), minimizing the predicted divergence under
/// a total factor-count budget that includes the seed.
pub fn pick_min_divergence(
    gains: &GainTable,
    budget: usize,
    seed_size: usize,
) -> Result<FactorSubset, PruneError> {
    pick_min_divergence_counting(gains, budget, seed_size).map(|(s, _)| s)
}

/// [`pick_min_divergence`] plus the comparison count.
pub fn pick_min_divergence_counting(
    gains: &GainTable,
    budget: usize,
    seed_size: usize,
) -> Result<(FactorSubset, u64), PruneError> {
    if budget < seed_size {
        return Err(PruneError::BudgetBelowSeed { budget, seed_size });
    }
    let take = (budget - seed_size).min(gains.len());
    let comparisons = Cell::new(0u64);
    let mut items: Vec<(f64, FactorId)> = gains.iter().map(|(id, g)| (g, id)).collect();
    items.sort_unstable_by(|a, b| {
        comparisons.set(comparisons.get() + 1);
        b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
    });
    let selected = items[..take].iter().map(|&(_, id)| id).collect();
    Ok((selected, comparisons.get()))
}

/// Keeps every candidate with gain at least `gamma`, the minimizer of
/// (number kept)·γ + (excluded gain sum). A single linear scan; no
/// candidate is ever compared against another.
pub fn pick_min_joint(gains: &GainTable, gamma: f64) -> FactorSubset {
    pick_min_joint_counting(gains, gamma).0
}

/// [`pick_min_joint`] plus the comparison count, which is zero by
/// construction: each gain is compared to the threshold only.
pub fn pick_min_joint_counting(gains: &GainTable, gamma: f64) -> (FactorSubset, u64) {
    assert!(
        gamma >= 0.0,
        "gain threshold must be non-negative, got {gamma}"
    );
    let selected = gains
        .iter()
        .filter(|&(_, g)| g >= gamma)
        .map(|(id, _)| id)
        .collect();
    (selected, 0)
}

/// How inference is carried out within the pipeline.
#[derive(Clone, Copy, Debug)]
pub enum Engine {
    Bp(BpConfig),
    Exact,
}

/// Runs the engine on one factor subset.
pub fn infer_subset(
    graph: &FactorGraph,
    subset: &FactorSubset,
    engine: &Engine,
) -> Result<MarginalEstimate, PruneError> {
    match engine {
        Engine::Bp(config) => Ok(run_bp(graph, subset, config)?),
        Engine::Exact => {
            let start = Instant::now();
            let moments = exact_moments(graph, subset)?;
            let mut estimate = MarginalEstimate::from_exact(&moments);
            estimate.wall_time = start.elapsed();
            Ok(estimate)
        }
    }
}

/// The factors a scheme chose to add to the seed.
#[derive(Clone, Debug)]
pub struct PruneSelection {
    pub selected: FactorSubset,
    /// Sum of gains of the excluded candidates.
    pub predicted_d1: f64,
    pub gains_used: GainTable,
    pub scheme: Scheme,
}

/// Wall time of each pipeline stage; scoring includes selection.
#[derive(Clone, Copy, Debug, Default)]
pub struct PipelineTimings {
    pub seed: Duration,
    pub score: Duration,
    pub final_infer: Duration,
}

/// Everything produced by one prune-then-infer run.
#[derive(Clone, Debug)]
pub struct PrunedInferenceResult {
    pub selection: PruneSelection,
    pub seed_estimate: MarginalEstimate,
    pub final_estimate: MarginalEstimate,
    pub timings: PipelineTimings,
    /// Selected candidates over total candidates; 1 when there is nothing
    /// to select from (an unprunable graph is served whole).
    pub size_fraction: f64,
}

/// Infers on the seed, scores and selects candidates, then infers on the
/// seed plus selection. When the selection is empty the second inference is
/// skipped and the seed estimate is reused.
pub fn ignorant_inference(
    graph: &FactorGraph,
    scheme: Scheme,
    engine: &Engine,
) -> Result<PrunedInferenceResult, PruneError> {
    let seed = graph.seed();
    if seed.is_empty() {
        return Err(PruneError::EmptySeed);
    }

    let seed_estimate = infer_subset(graph, seed, engine)?;
    let seed_time = seed_estimate.wall_time;

    let score_start = Instant::now();
    let gains = score_candidates(graph, &seed_estimate)?;
    let selected = scheme.select(&gains, seed.len())?;
    let predicted_d1 = gains.predicted_divergence(&selected)?;
    let score_time = score_start.elapsed();

    let (final_estimate, final_time) = if selected.is_empty() {
        (seed_estimate.clone(), Duration::ZERO)
    } else {
        let estimate = infer_subset(graph, &seed.union(&selected), engine)?;
        let time = estimate.wall_time;
        (estimate, time)
    };

    let n_candidates = gains.len();
    let size_fraction = if n_candidates == 0 {
        1.0
    } else {
        selected.len() as f64 / n_candidates as f64
    };

    Ok(PrunedInferenceResult {
        selection: PruneSelection {
            selected,
            predicted_d1,
            gains_used: gains,
            scheme,
        },
        seed_estimate,
        final_estimate,
        timings: PipelineTimings {
            seed: seed_time,
            score: score_time,
            final_infer: final_time,
        },
        size_fraction,
    })
}
