//! Command-line front end for the factor-pruning inference library.
//!
//! Exit codes: 0 success, 1 usage error, 2 unreadable or malformed input
//! file, 3 graph too large for exact enumeration.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use prunebp::bp::run_bp;
use prunebp::divergence::{first_moment_bound, nested_witness, witness_divergence};
use prunebp::exact::{exact_kl, exact_moments, ExactError};
use prunebp::graph::{parse_graph, FactorGraph, FactorSubset};
use prunebp::ising::{run_sweep, IsingConfig, IsingError, Pattern, CSV_HEADER};
use prunebp::pruning::{ignorant_inference, Engine, PruneError, Scheme, SchemeFamily};
use prunebp::{BpConfig, MarginalEstimate};

const FORMAT_HELP: &str = "\
GRAPH FORMAT (fgv1):
  line 1:            fgv1
  line 2:            vars N
  then per factor:   factor <weight> <arity> <v_1> ... <v_k> <table>
  optional final:    seed unary          (default: all single-variable factors)
                     seed list <id> ...  (explicit factor ids, 0-based in file order)
  '#' starts a comment; blank lines are ignored.
  <table> is a string of 2^k characters from {0,1}; its j-th character is the
  feature value for the assignment where bit i of j is the value of scope
  variable v_{i+1} (v_1 is the least significant bit). Example: a two-variable
  equality feature on variables 0 and 1 is `factor 1.0 2 0 1 1001`.

SCHEMES (prune --scheme is implied by which parameter is given):
  --epsilon E   keep as few candidates as possible while the gains of the
                discarded ones sum to at most E        (min-size)
  --budget M    keep the top candidates by gain until the model holds M
                factors in total; the seed counts toward M   (min-div)
  --gamma G     keep every candidate whose gain is at least G (min-joint)";

#[derive(Parser)]
#[command(
    name = "prunebp",
    version,
    about = "Approximate marginals in binary Markov networks by pruning low-value factors",
    after_help = FORMAT_HELP
)]
struct Cli {
    /// Write rows to this file instead of stdout
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Numeric output precision: compact (7 significant digits) or full
    /// (shortest exact round-trip)
    #[arg(long, global = true, value_enum, default_value_t = Precision::Compact)]
    precision: Precision,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Precision {
    Compact,
    Full,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum EngineArg {
    Bp,
    Exact,
}

#[derive(Args, Clone, Copy)]
struct BpFlags {
    /// Message-passing sweep limit
    #[arg(long, default_value_t = 50)]
    max_iters: usize,

    /// Convergence threshold on the largest belief change
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,

    /// Fraction of the old message kept at each update, in [0, 1)
    #[arg(long, default_value_t = 0.0)]
    damping: f64,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct SchemeParam {
    /// Largest total gain the discarded candidates may carry (min-size)
    #[arg(long)]
    epsilon: Option<f64>,

    /// Total factor budget, counting the seed (min-div)
    #[arg(long)]
    budget: Option<usize>,

    /// Gain threshold; candidates scoring at least this are kept (min-joint)
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run inference on the whole graph and print per-variable marginals
    /// and per-factor feature moments
    Infer {
        /// Path to an fgv1 graph file
        #[arg(long)]
        graph: PathBuf,

        #[arg(long, value_enum, default_value_t = EngineArg::Bp)]
        engine: EngineArg,

        #[command(flatten)]
        bp: BpFlags,
    },

    /// Score candidates against the seed, select a subset, infer on it,
    /// and print selection statistics
    Prune {
        /// Path to an fgv1 graph file
        #[arg(long)]
        graph: PathBuf,

        #[arg(long, value_enum, default_value_t = EngineArg::Bp)]
        engine: EngineArg,

        #[command(flatten)]
        scheme: SchemeParam,

        #[command(flatten)]
        bp: BpFlags,
    },

    /// Exactly evaluate the divergence bounds for keeping a subset of a
    /// small graph: loose and tight upper bounds, the exact divergence,
    /// and the divergence of the bound's witness distribution
    Bound {
        /// Path to an fgv1 graph file
        #[arg(long)]
        graph: PathBuf,

        /// Comma-separated factor ids to keep (default: the seed)
        #[arg(long, value_delimiter = ',')]
        subset: Option<Vec<usize>>,
    },

    /// Grid denoising sweep: calibrate a scheme to a target size fraction,
    /// sweep unary confidence levels, and print one averaged CSV row each
    Ising {
        /// Grid side length
        #[arg(long, default_value_t = 32)]
        size: usize,

        /// Confidence levels to sweep, comma separated
        #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 3.0, 5.0, 8.0])]
        alphas: Vec<f64>,

        #[arg(long, default_value_t = 1.0)]
        noise_sigma: f64,

        #[arg(long, default_value_t = 10)]
        instances: usize,

        /// Clean image shape: halves, square, or stripes
        #[arg(long, default_value = "square", value_parser = Pattern::from_str)]
        pattern: Pattern,

        /// Selection scheme: min-size, min-div, or min-joint
        #[arg(long, default_value = "min-joint", value_parser = SchemeFamily::from_str)]
        scheme: SchemeFamily,

        /// Confidence level the scheme parameter is calibrated at; must be
        /// one of the sweep values
        #[arg(long, default_value_t = 5.0)]
        calibrate_at: f64,

        /// Size fraction the calibration aims for
        #[arg(long, default_value_t = 0.5)]
        target_fraction: f64,

        #[arg(long, default_value_t = 42)]
        seed: u64,

        #[arg(long, default_value_t = 1.0)]
        edge_weight: f64,

        /// Worker threads for instance-level parallelism (default: all cores)
        #[arg(long)]
        jobs: Option<usize>,

        #[command(flatten)]
        bp: BpFlags,
    },
}

enum CliError {
    Usage(String),
    Input(String),
    Cap(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Input(_) => 2,
            CliError::Cap(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Input(m) | CliError::Cap(m) => m,
        }
    }
}

fn map_exact(e: ExactError) -> CliError {
    match e {
        ExactError::CapExceeded { .. } => CliError::Cap(e.to_string()),
        _ => CliError::Input(e.to_string()),
    }
}

fn map_prune(e: PruneError) -> CliError {
    match e {
        PruneError::Exact(ExactError::CapExceeded { .. }) => CliError::Cap(e.to_string()),
        PruneError::BudgetBelowSeed { .. } => CliError::Usage(e.to_string()),
        _ => CliError::Input(e.to_string()),
    }
}

fn map_ising(e: IsingError) -> CliError {
    match e {
        IsingError::Prune(PruneError::Exact(ExactError::CapExceeded { .. })) => {
            CliError::Cap(e.to_string())
        }
        IsingError::GridTooSmall(_)
        | IsingError::NegativeNoise(_)
        | IsingError::NonFinite { .. }
        | IsingError::NoInstances
        | IsingError::CalibrationAlphaNotInSweep(_) => CliError::Usage(e.to_string()),
        _ => CliError::Input(e.to_string()),
    }
}

fn read_graph(path: &PathBuf) -> Result<FactorGraph, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    parse_graph(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn bp_config(flags: &BpFlags) -> Result<BpConfig, CliError> {
    if !(flags.tol > 0.0) {
        return Err(CliError::Usage(format!(
            "--tol must be positive, got {}",
            flags.tol
        )));
    }
    if !(0.0..1.0).contains(&flags.damping) {
        return Err(CliError::Usage(format!(
            "--damping must be in [0, 1), got {}",
            flags.damping
        )));
    }
    Ok(BpConfig {
        max_iters: flags.max_iters,
        tol: flags.tol,
        damping: flags.damping,
    })
}

fn fmt_value(x: f64, precision: Precision) -> String {
    match precision {
        Precision::Full => format!("{x}"),
        Precision::Compact => format!("{x:.6e}"),
    }
}

/// Feature moments of the factors left out by `kept`, under the exact
/// distribution of `kept`, paired with their weights.
fn removed_means(
    graph: &FactorGraph,
    kept: &FactorSubset,
) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let moments = exact_moments(graph, kept).map_err(map_exact)?;
    let removed = graph.all_factors().difference(kept);
    let means: Vec<f64> = removed.iter().map(|id| moments.mu(id)).collect();
    let thetas: Vec<f64> = removed
        .iter()
        .map(|id| graph.factor(id).map(|f| f.weight))
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Input(e.to_string()))?;
    Ok((means, thetas))
}

fn cmd_infer(
    graph: &PathBuf,
    engine: EngineArg,
    bp: &BpFlags,
    precision: Precision,
) -> Result<String, CliError> {
    let graph = read_graph(graph)?;
    let estimate = match engine {
        EngineArg::Bp => {
            let config = bp_config(bp)?;
            run_bp(&graph, &graph.all_factors(), &config)
                .map_err(|e| CliError::Input(e.to_string()))?
        }
        EngineArg::Exact => MarginalEstimate::from_exact(
            &exact_moments(&graph, &graph.all_factors()).map_err(map_exact)?,
        ),
    };

    let mut out = String::from("kind,id,value\n");
    for (v, belief) in estimate.var_beliefs.iter().enumerate() {
        out.push_str(&format!("var,{v},{}\n", fmt_value(*belief, precision)));
    }
    for (id, mu) in &estimate.factor_mu {
        out.push_str(&format!("factor,{id},{}\n", fmt_value(*mu, precision)));
    }
    Ok(out)
}

fn cmd_prune(
    graph: &PathBuf,
    engine_arg: EngineArg,
    scheme_param: &SchemeParam,
    bp: &BpFlags,
    precision: Precision,
) -> Result<String, CliError> {
    let graph = read_graph(graph)?;
    let scheme = match (
        scheme_param.epsilon,
        scheme_param.budget,
        scheme_param.gamma,
    ) {
        (Some(epsilon), None, None) if epsilon >= 0.0 => Scheme::MinSize { epsilon },
        (Some(epsilon), None, None) => {
            return Err(CliError::Usage(format!(
                "--epsilon must be non-negative, got {epsilon}"
            )))
        }
        (None, Some(budget), None) => Scheme::MinDivergence { budget },
        (None, None, Some(gamma)) if gamma >= 0.0 => Scheme::MinJoint { gamma },
        (None, None, Some(gamma)) => {
            return Err(CliError::Usage(format!(
                "--gamma must be non-negative, got {gamma}"
            )))
        }
        _ => unreachable!("clap enforces exactly one scheme parameter"),
    };
    let engine = match engine_arg {
        EngineArg::Bp => Engine::Bp(bp_config(bp)?),
        EngineArg::Exact => Engine::Exact,
    };

    let result = ignorant_inference(&graph, scheme, &engine).map_err(map_prune)?;

    let exact_fields = if engine_arg == EngineArg::Exact {
        let kept = graph.seed().union(&result.selection.selected);
        let (means, thetas) = removed_means(&graph, &kept)?;
        let kl = exact_kl(&graph, &kept, &graph.all_factors()).map_err(map_exact)?;
        if means.is_empty() {
            (
                fmt_value(kl, precision),
                fmt_value(0.0, precision),
                fmt_value(0.0, precision),
            )
        } else {
            let bound =
                first_moment_bound(&means, &thetas).map_err(|e| CliError::Input(e.to_string()))?;
            (
                fmt_value(kl, precision),
                fmt_value(bound.loose, precision),
                fmt_value(bound.tight, precision),
            )
        }
    } else {
        (String::new(), String::new(), String::new())
    };

    let f = |x: f64| fmt_value(x, precision);
    let mut out = String::from(
        "scheme,param,engine,n_candidates,n_added,size_fraction,predicted_d1,\
         seed_time,score_time,final_time,exact_kl,loose_bound,tight_bound\n",
    );
    out.push_str(&format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        scheme.family(),
        f(scheme.param()),
        match engine_arg {
            EngineArg::Bp => "bp",
            EngineArg::Exact => "exact",
        },
        graph.candidates().len(),
        result.selection.selected.len(),
        f(result.size_fraction),
        f(result.selection.predicted_d1),
        f(result.timings.seed.as_secs_f64()),
        f(result.timings.score.as_secs_f64()),
        f(result.timings.final_infer.as_secs_f64()),
        exact_fields.0,
        exact_fields.1,
        exact_fields.2,
    ));
    Ok(out)
}

fn cmd_bound(
    graph: &PathBuf,
    subset: &Option<Vec<usize>>,
    precision: Precision,
) -> Result<String, CliError> {
    let graph = read_graph(graph)?;
    let kept = match subset {
        None => graph.seed().clone(),
        Some(ids) => {
            for &id in ids {
                if id >= graph.num_factors() {
                    return Err(CliError::Usage(format!(
                        "--subset id {id} is out of range; the graph has {} factors",
                        graph.num_factors()
                    )));
                }
            }
            FactorSubset::from_ids(ids.iter().copied())
        }
    };

    let (means, thetas) = removed_means(&graph, &kept)?;
    let kl = exact_kl(&graph, &kept, &graph.all_factors()).map_err(map_exact)?;
    let (loose, tight, witness) = if means.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        let bound =
            first_moment_bound(&means, &thetas).map_err(|e| CliError::Input(e.to_string()))?;
        let atoms = nested_witness(&means, &thetas).map_err(|e| CliError::Input(e.to_string()))?;
        let witness =
            witness_divergence(&atoms, &thetas).map_err(|e| CliError::Input(e.to_string()))?;
        (bound.loose, bound.tight, witness)
    };

    let f = |x: f64| fmt_value(x, precision);
    Ok(format!(
        "metric,value\nloose,{}\ntight,{}\nexact_kl,{}\nwitness_divergence,{}\n",
        f(loose),
        f(tight),
        f(kl),
        f(witness)
    ))
}

#[allow(clippy::too_many_arguments)]
fn cmd_ising(
    size: usize,
    alphas: &[f64],
    noise_sigma: f64,
    instances: usize,
    pattern: Pattern,
    scheme: SchemeFamily,
    calibrate_at: f64,
    target_fraction: f64,
    seed: u64,
    edge_weight: f64,
    jobs: Option<usize>,
    bp: &BpFlags,
    precision: Precision,
) -> Result<String, CliError> {
    if alphas.is_empty() {
        return Err(CliError::Usage(
            "--alphas needs at least one value".to_string(),
        ));
    }
    if !(0.0..=1.0).contains(&target_fraction) {
        return Err(CliError::Usage(format!(
            "--target-fraction must be in [0, 1], got {target_fraction}"
        )));
    }
    let config = IsingConfig {
        grid_side: size,
        alpha: calibrate_at,
        edge_weight,
        noise_sigma,
        pattern,
        rng_seed: seed,
        instances,
    };
    let bp = bp_config(bp)?;

    let sweep = || run_sweep(&config, alphas, scheme, calibrate_at, target_fraction, &bp);
    let outcome = match jobs {
        None => sweep(),
        Some(0) => return Err(CliError::Usage("--jobs must be at least 1".to_string())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Input(e.to_string()))?
            .install(sweep),
    }
    .map_err(map_ising)?;

    eprintln!(
        "calibrated {} to parameter {} (achieved fraction {:.4}, target {target_fraction}{})",
        scheme,
        outcome.calibration.scheme.param(),
        outcome.calibration.achieved_fraction,
        if outcome.calibration.within_tol {
            ""
        } else {
            "; MISSED tolerance"
        }
    );

    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for record in &outcome.records {
        out.push_str(&record.to_csv_row(precision == Precision::Full));
        out.push('\n');
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let precision = cli.precision;
    let output = match &cli.command {
        Command::Infer { graph, engine, bp } => cmd_infer(graph, *engine, bp, precision)?,
        Command::Prune {
            graph,
            engine,
            scheme,
            bp,
        } => cmd_prune(graph, *engine, scheme, bp, precision)?,
        Command::Bound { graph, subset } => cmd_bound(graph, subset, precision)?,
        Command::Ising {
            size,
            alphas,
            noise_sigma,
            instances,
            pattern,
            scheme,
            calibrate_at,
            target_fraction,
            seed,
            edge_weight,
            jobs,
            bp,
        } => cmd_ising(
            *size,
            alphas,
            *noise_sigma,
            *instances,
            *pattern,
            *scheme,
            *calibrate_at,
            *target_fraction,
            *seed,
            *edge_weight,
            *jobs,
            bp,
            precision,
        )?,
    };

    match &cli.out {
        None => print!("{output}"),
        Some(path) => fs::write(path, output)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
