//! Grid-structured denoising benchmark.
//!
//! Generates noisy binary images, builds an Ising-style factor graph per
//! image (unary observation factors as the seed, equality factors on the
//! 4-neighborhood as candidates), calibrates each selection scheme to a
//! target size fraction at a reference unary confidence `α`, then sweeps
//! `α` and records size, error, timing, and decode-accuracy metrics per
//! value.

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::bp::{run_bp, BpConfig, BpError, MarginalEstimate};
use crate::divergence::{score_candidates, DivergenceError, GainTable};
use crate::graph::{Factor, FactorGraph, FactorSubset, Feature, GraphError, VariableId};
use crate::pruning::{ignorant_inference, infer_subset, Engine, PruneError, Scheme, SchemeFamily};

#[derive(Debug, Error)]
pub enum IsingError {
    #[error("grid side must be at least 2, got {0}")]
    GridTooSmall(usize),
    #[error("noise sigma must be non-negative, got {0}")]
    NegativeNoise(f64),
    #[error("{name} must be finite, got {value}")]
    NonFinite { name: &'static str, value: f64 },
    #[error("sweep needs at least one instance")]
    NoInstances,
    #[error("calibration alpha {0} is not among the sweep alphas")]
    CalibrationAlphaNotInSweep(f64),
    #[error("estimates cover {a} and {b} variables")]
    SizeMismatch { a: usize, b: usize },
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Bp(#[from] BpError),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Clean-image shape used by the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    /// Left half 0, right half 1.
    Halves,
    /// Centered square of 1s on a 0 background.
    Square,
    /// Horizontal stripes of height `side/4` (at least 1 row).
    Stripes,
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pattern::Halves => "halves",
            Pattern::Square => "square",
            Pattern::Stripes => "stripes",
        })
    }
}

impl FromStr for Pattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "halves" => Ok(Pattern::Halves),
            "square" => Ok(Pattern::Square),
            "stripes" => Ok(Pattern::Stripes),
            other => Err(format!(
                "unknown pattern `{other}`, expected halves, square, or stripes"
            )),
        }
    }
}

/// Benchmark settings shared by all instances of one sweep.
#[derive(Clone, Copy, Debug)]
pub struct IsingConfig {
    pub grid_side: usize,
    /// Unary confidence: observation weight is `alpha · x_i`.
    pub alpha: f64,
    pub edge_weight: f64,
    pub noise_sigma: f64,
    pub pattern: Pattern,
    pub rng_seed: u64,
    pub instances: usize,
}

impl Default for IsingConfig {
    fn default() -> Self {
        IsingConfig {
            grid_side: 32,
            alpha: 5.0,
            edge_weight: 1.0,
            noise_sigma: 1.0,
            pattern: Pattern::Square,
            rng_seed: 42,
            instances: 10,
        }
    }
}

impl IsingConfig {
    pub fn validate(&self) -> Result<(), IsingError> {
        if self.grid_side < 2 {
            return Err(IsingError::GridTooSmall(self.grid_side));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(IsingError::NegativeNoise(self.noise_sigma));
        }
        for (name, value) in [("alpha", self.alpha), ("edge_weight", self.edge_weight)] {
            if !value.is_finite() {
                return Err(IsingError::NonFinite { name, value });
            }
        }
        Ok(())
    }
}

/// One noisy observation of a clean binary image, row-major.
#[derive(Clone, Debug)]
pub struct NoisyImage {
    pub side: usize,
    pub clean: Vec<bool>,
    /// `(2·clean − 1) + gaussian noise`, then shifted to mean zero.
    pub observed: Vec<f64>,
}

fn clean_pixel(pattern: Pattern, side: usize, row: usize, col: usize) -> bool {
    match pattern {
        Pattern::Halves => col >= side / 2,
        Pattern::Square => {
            let lo = side / 4;
            let hi = lo + side / 2;
            (lo..hi).contains(&row) && (lo..hi).contains(&col)
        }
        Pattern::Stripes => {
            let h = (side / 4).max(1);
            (row / h) % 2 == 1
        }
    }
}

/// Deterministically generates instance `index` of a config: the pattern
/// image plus Gaussian noise on its ±1 encoding, mean-centered.
pub fn generate_instance(config: &IsingConfig, index: usize) -> Result<NoisyImage, IsingError> {
    config.validate()?;
    let side = config.grid_side;
    let n = side * side;
    let clean: Vec<bool> = (0..n)
        .map(|i| clean_pixel(config.pattern, side, i / side, i % side))
        .collect();

    let mut rng =
        StdRng::seed_from_u64(config.rng_seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut observed: Vec<f64> = clean.iter().map(|&c| if c { 1.0 } else { -1.0 }).collect();
    if config.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
        for x in observed.iter_mut() {
            *x += noise.sample(&mut rng);
        }
    }
    let mean = observed.iter().sum::<f64>() / n as f64;
    for x in observed.iter_mut() {
        *x -= mean;
    }
    Ok(NoisyImage {
        side,
        clean,
        observed,
    })
}

/// Builds the grid model for one image: a unary identity-feature factor per
/// pixel with weight `alpha · x_i` (the seed), and an equality factor per
/// 4-neighborhood edge with weight `w` (the candidates). Edges are emitted
/// row-major, right neighbor before down neighbor.
pub fn build_ising_graph(
    image: &NoisyImage,
    alpha: f64,
    w: f64,
) -> Result<FactorGraph, IsingError> {
    let side = image.side;
    let n = side * side;
    let mut factors = Vec::with_capacity(3 * n);
    for v in 0..n {
        factors.push(Factor::new(
            alpha * image.observed[v],
            Feature::unary_identity(VariableId(v)),
        )?);
    }
    for r in 0..side {
        for c in 0..side {
            let v = r * side + c;
            if c + 1 < side {
                factors.push(Factor::new(
                    w,
                    Feature::equality(VariableId(v), VariableId(v + 1))?,
                )?);
            }
            if r + 1 < side {
                factors.push(Factor::new(
                    w,
                    Feature::equality(VariableId(v), VariableId(v + side))?,
                )?);
            }
        }
    }
    Ok(FactorGraph::new(
        n,
        factors,
        Some(FactorSubset::from_ids(0..n)),
    )?)
}

/// A scheme parameter fitted to a size-fraction target.
#[derive(Clone, Copy, Debug)]
pub struct Calibration {
    pub scheme: Scheme,
    /// Mean size fraction the parameter actually achieves at the
    /// reference confidence.
    pub achieved_fraction: f64,
    /// Whether the achieved fraction is within ±0.02 of the target.
    pub within_tol: bool,
}

const CALIBRATION_TOL: f64 = 0.02;

/// Gains of each image's candidates at one confidence level.
fn gain_tables(
    images: &[NoisyImage],
    alpha: f64,
    w: f64,
    engine: &Engine,
) -> Result<Vec<GainTable>, IsingError> {
    images
        .par_iter()
        .map(|image| {
            let graph = build_ising_graph(image, alpha, w)?;
            let seed_estimate = infer_subset(&graph, graph.seed(), engine)?;
            Ok(score_candidates(&graph, &seed_estimate)?)
        })
        .collect()
}

/// Selected-count evaluators over pre-sorted gains, mirroring the pick
/// functions exactly but O(log n) per probe.
struct SortedGains {
    ascending: Vec<f64>,
    prefix: Vec<f64>,
}

impl SortedGains {
    fn new(table: &GainTable) -> Self {
        let mut ascending: Vec<f64> = table.iter().map(|(_, g)| g).collect();
        ascending.sort_unstable_by(f64::total_cmp);
        let mut prefix = Vec::with_capacity(ascending.len() + 1);
        prefix.push(0.0);
        for &g in &ascending {
            prefix.push(prefix.last().unwrap() + g);
        }
        SortedGains { ascending, prefix }
    }

    fn selected_min_size(&self, epsilon: f64) -> usize {
        let discarded = self.prefix.partition_point(|&s| s <= epsilon) - 1;
        self.ascending.len() - discarded
    }

    fn selected_min_joint(&self, gamma: f64) -> usize {
        self.ascending.len() - self.ascending.partition_point(|&g| g < gamma)
    }
}

/// Tunes the scheme parameter so the mean size fraction over the images
/// hits `target_fraction` at confidence `alpha`. The count budget is set
/// directly; threshold parameters are bisected. A miss beyond ±0.02 is
/// reported via `within_tol`, not an error.
pub fn calibrate_scheme(
    images: &[NoisyImage],
    alpha: f64,
    w: f64,
    family: SchemeFamily,
    target_fraction: f64,
    engine: &Engine,
) -> Result<Calibration, IsingError> {
    if images.is_empty() {
        return Err(IsingError::NoInstances);
    }
    let tables = gain_tables(images, alpha, w, engine)?;
    let n_candidates = tables[0].len();
    let seed_size = images[0].side * images[0].side;

    if family == SchemeFamily::MinDivergence {
        let added = (target_fraction * n_candidates as f64).round() as usize;
        let added = added.min(n_candidates);
        let achieved = added as f64 / n_candidates as f64;
        return Ok(Calibration {
            scheme: Scheme::MinDivergence {
                budget: seed_size + added,
            },
            achieved_fraction: achieved,
            within_tol: (achieved - target_fraction).abs() <= CALIBRATION_TOL,
        });
    }

    let sorted: Vec<SortedGains> = tables.iter().map(SortedGains::new).collect();
    let fraction = |param: f64| -> f64 {
        let total: usize = sorted
            .iter()
            .map(|s| match family {
                SchemeFamily::MinSize => s.selected_min_size(param),
                SchemeFamily::MinJoint => s.selected_min_joint(param),
                SchemeFamily::MinDivergence => unreachable!(),
            })
            .sum();
        total as f64 / (sorted.len() * n_candidates) as f64
    };

    let mut lo = 0.0;
    let mut hi = match family {
        SchemeFamily::MinSize => {
            sorted
                .iter()
                .map(|s| *s.prefix.last().unwrap())
                .fold(0.0, f64::max)
                + 1.0
        }
        _ => {
            sorted
                .iter()
                .filter_map(|s| s.ascending.last().copied())
                .fold(0.0, f64::max)
                * 1.001
                + 1e-9
        }
    };
    let mut best = (lo, fraction(lo));
    let consider = |param: f64, frac: f64, best: &mut (f64, f64)| {
        if (frac - target_fraction).abs() < (best.1 - target_fraction).abs() {
            *best = (param, frac);
        }
    };
    consider(hi, fraction(hi), &mut best);
    // The fraction is non-increasing in the parameter; keep
    // fraction(lo) ≥ target > fraction(hi) while the bracket holds.
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let f = fraction(mid);
        consider(mid, f, &mut best);
        if f >= target_fraction {
            lo = mid;
        } else {
            hi = mid;
        }
    }

    let scheme = match family {
        SchemeFamily::MinSize => Scheme::MinSize { epsilon: best.0 },
        SchemeFamily::MinJoint => Scheme::MinJoint { gamma: best.0 },
        SchemeFamily::MinDivergence => unreachable!(),
    };
    Ok(Calibration {
        scheme,
        achieved_fraction: best.1,
        within_tol: (best.1 - target_fraction).abs() <= CALIBRATION_TOL,
    })
}

/// Absolute belief differences between two estimates: `(max, mean)` over
/// variables.
pub fn marginal_error(
    estimate: &MarginalEstimate,
    reference: &MarginalEstimate,
) -> Result<(f64, f64), IsingError> {
    if estimate.var_beliefs.len() != reference.var_beliefs.len() {
        return Err(IsingError::SizeMismatch {
            a: estimate.var_beliefs.len(),
            b: reference.var_beliefs.len(),
        });
    }
    let mut max = 0.0f64;
    let mut sum = 0.0;
    for (a, b) in estimate.var_beliefs.iter().zip(&reference.var_beliefs) {
        let d = (a - b).abs();
        max = max.max(d);
        sum += d;
    }
    Ok((max, sum / estimate.var_beliefs.len() as f64))
}

/// Marginal-maximizing value per variable; ties at 0.5 decode to 1.
pub fn posterior_decode(estimate: &MarginalEstimate) -> Vec<bool> {
    estimate.var_beliefs.iter().map(|&b| b >= 0.5).collect()
}

/// Fraction of pixels matching the clean image.
pub fn pixel_accuracy(decoded: &[bool], clean: &[bool]) -> Result<f64, IsingError> {
    if decoded.len() != clean.len() {
        return Err(IsingError::SizeMismatch {
            a: decoded.len(),
            b: clean.len(),
        });
    }
    let matches = decoded.iter().zip(clean).filter(|(a, b)| a == b).count();
    Ok(matches as f64 / decoded.len() as f64)
}

/// Per-confidence aggregate of one scheme's behavior, averaged over
/// instances.
#[derive(Clone, Debug)]
pub struct ExperimentRecord {
    pub alpha: f64,
    pub scheme: SchemeFamily,
    /// The calibrated scheme parameter (total factor budget for the
    /// count-bounded scheme).
    pub param: f64,
    pub n_candidates: f64,
    pub n_added: f64,
    pub size_fraction: f64,
    pub seed_time: f64,
    pub score_time: f64,
    pub final_time: f64,
    pub full_time: f64,
    /// Total full-graph time over total pipeline time.
    pub speedup: f64,
    /// Largest belief difference vs full-graph inference.
    pub max_marg_err: f64,
    pub mean_marg_err: f64,
    pub pixel_acc_pruned: f64,
    pub pixel_acc_full: f64,
    pub predicted_d1: f64,
    /// True only if every instance's pruned run converged.
    pub converged_pruned: bool,
    pub converged_full: bool,
}

pub const CSV_HEADER: &str = "alpha,scheme,param,n_candidates,n_added,size_fraction,seed_time,\
score_time,final_time,full_time,speedup,max_marg_err,mean_marg_err,pixel_acc_pruned,\
pixel_acc_full,predicted_d1,converged_pruned,converged_full";

fn fmt_float(x: f64, full_precision: bool) -> String {
    if full_precision {
        format!("{x}")
    } else {
        format!("{x:.6e}")
    }
}

impl ExperimentRecord {
    /// One CSV row matching [`CSV_HEADER`]; compact form keeps 7
    /// significant digits, full form round-trips exactly.
    pub fn to_csv_row(&self, full_precision: bool) -> String {
        let f = |x: f64| fmt_float(x, full_precision);
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            f(self.alpha),
            self.scheme,
            f(self.param),
            f(self.n_candidates),
            f(self.n_added),
            f(self.size_fraction),
            f(self.seed_time),
            f(self.score_time),
            f(self.final_time),
            f(self.full_time),
            f(self.speedup),
            f(self.max_marg_err),
            f(self.mean_marg_err),
            f(self.pixel_acc_pruned),
            f(self.pixel_acc_full),
            f(self.predicted_d1),
            self.converged_pruned,
            self.converged_full,
        )
    }
}

/// A full sweep's records plus how well calibration hit its target.
#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub records: Vec<ExperimentRecord>,
    pub calibration: Calibration,
}

struct InstanceOutcome {
    n_added: f64,
    size_fraction: f64,
    seed_time: Duration,
    score_time: Duration,
    final_time: Duration,
    full_time: Duration,
    max_err: f64,
    mean_err: f64,
    acc_pruned: f64,
    acc_full: f64,
    predicted_d1: f64,
    converged_pruned: bool,
    converged_full: bool,
}

fn run_instance(
    image: &NoisyImage,
    alpha: f64,
    w: f64,
    scheme: Scheme,
    bp: &BpConfig,
) -> Result<InstanceOutcome, IsingError> {
    let graph = build_ising_graph(image, alpha, w)?;
    let result = ignorant_inference(&graph, scheme, &Engine::Bp(*bp))?;
    let full = run_bp(&graph, &graph.all_factors(), bp)?;
    let (max_err, mean_err) = marginal_error(&result.final_estimate, &full)?;
    let acc_pruned = pixel_accuracy(&posterior_decode(&result.final_estimate), &image.clean)?;
    let acc_full = pixel_accuracy(&posterior_decode(&full), &image.clean)?;
    Ok(InstanceOutcome {
        n_added: result.selection.selected.len() as f64,
        size_fraction: result.size_fraction,
        seed_time: result.timings.seed,
        score_time: result.timings.score,
        final_time: result.timings.final_infer,
        full_time: full.wall_time,
        max_err,
        mean_err,
        acc_pruned,
        acc_full,
        predicted_d1: result.selection.predicted_d1,
        converged_pruned: result.final_estimate.converged,
        converged_full: full.converged,
    })
}

/// Calibrates the scheme at `calibrate_at` to `target_fraction`, then runs
/// every confidence in `alphas` over the config's instances, returning one
/// averaged record per confidence. Instances run concurrently.
pub fn run_sweep(
    config: &IsingConfig,
    alphas: &[f64],
    family: SchemeFamily,
    calibrate_at: f64,
    target_fraction: f64,
    bp: &BpConfig,
) -> Result<SweepOutcome, IsingError> {
    config.validate()?;
    if config.instances == 0 {
        return Err(IsingError::NoInstances);
    }
    if !alphas.iter().any(|&a| a == calibrate_at) {
        return Err(IsingError::CalibrationAlphaNotInSweep(calibrate_at));
    }

    let images: Vec<NoisyImage> = (0..config.instances)
        .map(|i| generate_instance(config, i))
        .collect::<Result<_, _>>()?;
    let calibration = calibrate_scheme(
        &images,
        calibrate_at,
        config.edge_weight,
        family,
        target_fraction,
        &Engine::Bp(*bp),
    )?;

    let n_candidates = 2 * config.grid_side * (config.grid_side - 1);
    let mut records = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let outcomes: Vec<InstanceOutcome> = images
            .par_iter()
            .map(|image| run_instance(image, alpha, config.edge_weight, calibration.scheme, bp))
            .collect::<Result<_, _>>()?;

        let k = outcomes.len() as f64;
        let mean = |f: &dyn Fn(&InstanceOutcome) -> f64| outcomes.iter().map(f).sum::<f64>() / k;
        let total = |f: &dyn Fn(&InstanceOutcome) -> Duration| {
            outcomes.iter().map(f).sum::<Duration>().as_secs_f64()
        };
        let pipeline_total = total(&|o| o.seed_time + o.score_time + o.final_time);
        records.push(ExperimentRecord {
            alpha,
            scheme: family,
            param: calibration.scheme.param(),
            n_candidates: n_candidates as f64,
            n_added: mean(&|o| o.n_added),
            size_fraction: mean(&|o| o.size_fraction),
            seed_time: total(&|o| o.seed_time) / k,
            score_time: total(&|o| o.score_time) / k,
            final_time: total(&|o| o.final_time) / k,
            full_time: total(&|o| o.full_time) / k,
            speedup: total(&|o| o.full_time) / pipeline_total,
            max_marg_err: mean(&|o| o.max_err),
            mean_marg_err: mean(&|o| o.mean_err),
            pixel_acc_pruned: mean(&|o| o.acc_pruned),
            pixel_acc_full: mean(&|o| o.acc_full),
            predicted_d1: mean(&|o| o.predicted_d1),
            converged_pruned: outcomes.iter().all(|o| o.converged_pruned),
            converged_full: outcomes.iter().all(|o| o.converged_full),
        });
    }
    Ok(SweepOutcome {
        records,
        calibration,
    })
}
