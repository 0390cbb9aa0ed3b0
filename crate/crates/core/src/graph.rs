//! Binary Markov networks with weighted binary-feature factors.
//!
//! A [`FactorGraph`] holds `num_vars` binary variables and a list of
//! [`Factor`]s. Each factor contributes `exp(weight · feature(y))` to the
//! unnormalized score of an assignment `y`, where the feature is a 0/1
//! truth table over a small variable scope. A designated *seed* subset of
//! factors (by default all unary ones) acts as the cheap proxy graph that
//! candidate factors are scored against.
//!
//! # The `fgv1` text format
//!
//! ASCII, `#` starts a comment, blank lines are ignored:
//!
//! ```text
//! fgv1
//! vars <N>
//! factor <theta> <k> <v_1> ... <v_k> <table>
//! seed unary            # or: seed list <id> <id> ...
//! ```
//!
//! Factor ids are assigned 0-based in file order. `<table>` is a string of
//! `2^k` characters from `{0,1}`; the entry for a local assignment sits at
//! index `Σ_j y_{v_j}·2^(j-1)` with `v_1` least significant. When the
//! `seed` line is absent the seed defaults to all arity-1 factors.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

/// Largest supported feature arity; keeps truth tables small.
pub const MAX_ARITY: usize = 20;

/// Index of a binary variable within its graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VariableId(pub usize);

/// Index of a factor within its graph (dense, 0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FactorId(pub usize);

impl fmt::Display for VariableId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for FactorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("feature scope is empty")]
    EmptyScope,
    #[error("feature arity {arity} exceeds maximum {max}")]
    ArityTooLarge { arity: usize, max: usize },
    #[error("duplicate variable {0} in feature scope")]
    DuplicateScopeVariable(VariableId),
    #[error("feature table has {got} entries, expected {expected}")]
    TableLength { expected: usize, got: usize },
    #[error("variable {var} out of range for graph with {num_vars} variables")]
    VariableOutOfRange { var: VariableId, num_vars: usize },
    #[error("factor weight {0} is not finite")]
    NonFiniteWeight(f64),
    #[error("graph must contain at least one factor")]
    NoFactors,
    #[error("unknown factor id {0}")]
    UnknownFactor(FactorId),
    #[error("assignment has {got} values, graph has {expected} variables")]
    AssignmentLength { expected: usize, got: usize },
}

/// A parse failure in the `fgv1` format, pointing at the offending line.
#[derive(Debug, Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

impl ParseError {
    fn new(line: usize, message: impl Into<String>) -> Self {
        ParseError {
            line,
            message: message.into(),
        }
    }
}

/// A 0/1 feature over an ordered scope of variables.
///
/// The truth table has one entry per local assignment; the entry for local
/// values `(y_1, ..., y_k)` over `scope` sits at index `Σ_j y_j · 2^(j-1)`
/// (first scope variable least significant).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Feature {
    scope: Vec<VariableId>,
    table: Vec<bool>,
}

impl Feature {
    pub fn new(scope: Vec<VariableId>, table: Vec<bool>) -> Result<Self, GraphError> {
        if scope.is_empty() {
            return Err(GraphError::EmptyScope);
        }
        if scope.len() > MAX_ARITY {
            return Err(GraphError::ArityTooLarge {
                arity: scope.len(),
                max: MAX_ARITY,
            });
        }
        let expected = 1usize << scope.len();
        if table.len() != expected {
            return Err(GraphError::TableLength {
                expected,
                got: table.len(),
            });
        }
        let mut seen = BTreeSet::new();
        for &v in &scope {
            if !seen.insert(v) {
                return Err(GraphError::DuplicateScopeVariable(v));
            }
        }
        Ok(Feature { scope, table })
    }

    /// The identity feature `φ(y) = y_v` on a single variable.
    pub fn unary_identity(v: VariableId) -> Self {
        Feature {
            scope: vec![v],
            table: vec![false, true],
        }
    }

    /// The equality feature `φ(y) = [y_a = y_b]`.
    pub fn equality(a: VariableId, b: VariableId) -> Result<Self, GraphError> {
        Feature::new(vec![a, b], vec![true, false, false, true])
    }

    pub fn arity(&self) -> usize {
        self.scope.len()
    }

    pub fn scope(&self) -> &[VariableId] {
        &self.scope
    }

    pub fn table(&self) -> &[bool] {
        &self.table
    }

    /// Table lookup for a local assignment index.
    pub fn value_at(&self, local_index: usize) -> bool {
        self.table[local_index]
    }

    /// Table index of the scope restriction of a full assignment.
    pub fn local_index(&self, y: &Assignment) -> usize {
        let mut idx = 0usize;
        for (j, &v) in self.scope.iter().enumerate() {
            if y.get(v) {
                idx |= 1 << j;
            }
        }
        idx
    }

    /// Evaluates the feature on a full assignment.
    pub fn value(&self, y: &Assignment) -> bool {
        self.table[self.local_index(y)]
    }

    /// The complement feature `1 - φ`; flipping the table and negating the
    /// weight shifts every log score by the weight, leaving the normalized
    /// distribution unchanged.
    pub fn complemented(&self) -> Feature {
        Feature {
            scope: self.scope.clone(),
            table: self.table.iter().map(|b| !b).collect(),
        }
    }
}

/// A weighted binary-feature factor `exp(weight · feature(y))`.
///
/// Its id is its position in the owning graph's factor list.
#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    pub weight: f64,
    pub feature: Feature,
}

impl Factor {
    pub fn new(weight: f64, feature: Feature) -> Result<Self, GraphError> {
        if !weight.is_finite() {
            return Err(GraphError::NonFiniteWeight(weight));
        }
        Ok(Factor { weight, feature })
    }
}

/// A full assignment of all variables in a graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    values: Vec<bool>,
}

impl Assignment {
    pub fn new(values: Vec<bool>) -> Self {
        Assignment { values }
    }

    /// Assignment from the low `num_vars` bits of a mask (variable `i` reads
    /// bit `i`).
    pub fn from_bits(mask: u64, num_vars: usize) -> Self {
        Assignment {
            values: (0..num_vars).map(|i| mask >> i & 1 == 1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, v: VariableId) -> bool {
        self.values[v.0]
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }
}

/// A set of factor ids within one graph.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FactorSubset {
    ids: BTreeSet<FactorId>,
}

impl FactorSubset {
    pub fn empty() -> Self {
        FactorSubset::default()
    }

    pub fn from_ids<I: IntoIterator<Item = usize>>(ids: I) -> Self {
        FactorSubset {
            ids: ids.into_iter().map(FactorId).collect(),
        }
    }

    pub fn insert(&mut self, id: FactorId) -> bool {
        self.ids.insert(id)
    }

    pub fn contains(&self, id: FactorId) -> bool {
        self.ids.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = FactorId> + '_ {
        self.ids.iter().copied()
    }

    pub fn union(&self, other: &FactorSubset) -> FactorSubset {
        FactorSubset {
            ids: self.ids.union(&other.ids).copied().collect(),
        }
    }

    pub fn difference(&self, other: &FactorSubset) -> FactorSubset {
        FactorSubset {
            ids: self.ids.difference(&other.ids).copied().collect(),
        }
    }

    pub fn is_subset_of(&self, other: &FactorSubset) -> bool {
        self.ids.is_subset(&other.ids)
    }
}

impl FromIterator<FactorId> for FactorSubset {
    fn from_iter<T: IntoIterator<Item = FactorId>>(iter: T) -> Self {
        FactorSubset {
            ids: iter.into_iter().collect(),
        }
    }
}

/// An immutable binary Markov network plus its seed/candidate partition.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorGraph {
    num_vars: usize,
    factors: Vec<Factor>,
    seed: FactorSubset,
}

impl FactorGraph {
    /// Builds a graph; `seed = None` defaults to the set of all arity-1
    /// factors.
    pub fn new(
        num_vars: usize,
        factors: Vec<Factor>,
        seed: Option<FactorSubset>,
    ) -> Result<Self, GraphError> {
        if factors.is_empty() {
            return Err(GraphError::NoFactors);
        }
        for factor in &factors {
            for &v in factor.feature.scope() {
                if v.0 >= num_vars {
                    return Err(GraphError::VariableOutOfRange { var: v, num_vars });
                }
            }
            if !factor.weight.is_finite() {
                return Err(GraphError::NonFiniteWeight(factor.weight));
            }
        }
        let seed = match seed {
            Some(s) => {
                for id in s.iter() {
                    if id.0 >= factors.len() {
                        return Err(GraphError::UnknownFactor(id));
                    }
                }
                s
            }
            None => factors
                .iter()
                .enumerate()
                .filter(|(_, f)| f.feature.arity() == 1)
                .map(|(i, _)| FactorId(i))
                .collect(),
        };
        Ok(FactorGraph {
            num_vars,
            factors,
            seed,
        })
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn factor(&self, id: FactorId) -> Result<&Factor, GraphError> {
        self.factors.get(id.0).ok_or(GraphError::UnknownFactor(id))
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    /// The seed (proxy) subset.
    pub fn seed(&self) -> &FactorSubset {
        &self.seed
    }

    /// All factor ids.
    pub fn all_factors(&self) -> FactorSubset {
        FactorSubset::from_ids(0..self.factors.len())
    }

    /// Factor ids outside the seed, i.e. the candidates for selection.
    pub fn candidates(&self) -> FactorSubset {
        self.all_factors().difference(&self.seed)
    }

    pub fn validate_subset(&self, subset: &FactorSubset) -> Result<(), GraphError> {
        for id in subset.iter() {
            if id.0 >= self.factors.len() {
                return Err(GraphError::UnknownFactor(id));
            }
        }
        Ok(())
    }

    fn check_assignment(&self, y: &Assignment) -> Result<(), GraphError> {
        if y.len() != self.num_vars {
            return Err(GraphError::AssignmentLength {
                expected: self.num_vars,
                got: y.len(),
            });
        }
        Ok(())
    }

    /// Evaluates factor `id`'s feature on `y`.
    pub fn feature_value(&self, id: FactorId, y: &Assignment) -> Result<bool, GraphError> {
        self.check_assignment(y)?;
        Ok(self.factor(id)?.feature.value(y))
    }

    /// `weight · feature(y)` for factor `id`.
    pub fn log_potential(&self, id: FactorId, y: &Assignment) -> Result<f64, GraphError> {
        self.check_assignment(y)?;
        let factor = self.factor(id)?;
        Ok(if factor.feature.value(y) {
            factor.weight
        } else {
            0.0
        })
    }

    /// Sum of log potentials over a factor subset; the log of the
    /// unnormalized score of `y` under that sub-model.
    pub fn unnormalized_log_score(
        &self,
        subset: &FactorSubset,
        y: &Assignment,
    ) -> Result<f64, GraphError> {
        self.check_assignment(y)?;
        self.validate_subset(subset)?;
        let mut total = 0.0;
        for id in subset.iter() {
            let factor = &self.factors[id.0];
            if factor.feature.value(y) {
                total += factor.weight;
            }
        }
        Ok(total)
    }
}

/// Parses the `fgv1` text format.
pub fn parse_graph(text: &str) -> Result<FactorGraph, ParseError> {
    // (line number, significant content)
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, raw)| {
            let stripped = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            (i + 1, stripped.trim())
        })
        .filter(|(_, s)| !s.is_empty())
        .collect();

    let mut cursor = lines.iter();

    let (header_line, header) = cursor
        .next()
        .ok_or_else(|| ParseError::new(1, "empty input, expected `fgv1` header"))?;
    if *header != "fgv1" {
        return Err(ParseError::new(
            *header_line,
            format!("expected `fgv1` header, found `{header}`"),
        ));
    }

    let (vars_line, vars_decl) = cursor
        .next()
        .ok_or_else(|| ParseError::new(*header_line, "missing `vars <N>` line"))?;
    let num_vars = match vars_decl.split_whitespace().collect::<Vec<_>>()[..] {
        ["vars", n] => n
            .parse::<usize>()
            .map_err(|_| ParseError::new(*vars_line, format!("invalid variable count `{n}`")))?,
        _ => return Err(ParseError::new(*vars_line, "expected `vars <N>`")),
    };

    let mut factors = Vec::new();
    let mut seed: Option<FactorSubset> = None;

    for (line, content) in cursor {
        let tokens: Vec<&str> = content.split_whitespace().collect();
        match tokens[0] {
            "factor" => {
                if seed.is_some() {
                    return Err(ParseError::new(*line, "factor line after seed line"));
                }
                if tokens.len() < 4 {
                    return Err(ParseError::new(
                        *line,
                        "expected `factor <theta> <k> <v_1> ... <v_k> <table>`",
                    ));
                }
                let theta = tokens[1].parse::<f64>().map_err(|_| {
                    ParseError::new(*line, format!("invalid weight `{}`", tokens[1]))
                })?;
                let arity = tokens[2].parse::<usize>().map_err(|_| {
                    ParseError::new(*line, format!("invalid arity `{}`", tokens[2]))
                })?;
                if arity == 0 || arity > MAX_ARITY {
                    return Err(ParseError::new(
                        *line,
                        format!("arity {arity} out of range"),
                    ));
                }
                if tokens.len() != 4 + arity {
                    return Err(ParseError::new(
                        *line,
                        format!("expected {arity} scope variables followed by a table"),
                    ));
                }
                let mut scope = Vec::with_capacity(arity);
                for tok in &tokens[3..3 + arity] {
                    let v = tok.parse::<usize>().map_err(|_| {
                        ParseError::new(*line, format!("invalid variable index `{tok}`"))
                    })?;
                    if v >= num_vars {
                        return Err(ParseError::new(
                            *line,
                            format!("variable {v} out of range (graph has {num_vars} variables)"),
                        ));
                    }
                    scope.push(VariableId(v));
                }
                let table_str = tokens[3 + arity];
                if table_str.len() != 1 << arity {
                    return Err(ParseError::new(
                        *line,
                        format!(
                            "table `{table_str}` has {} entries, arity {arity} requires {}",
                            table_str.len(),
                            1 << arity
                        ),
                    ));
                }
                let mut table = Vec::with_capacity(1 << arity);
                for c in table_str.chars() {
                    match c {
                        '0' => table.push(false),
                        '1' => table.push(true),
                        _ => {
                            return Err(ParseError::new(
                                *line,
                                format!("invalid table character `{c}`"),
                            ))
                        }
                    }
                }
                let feature = Feature::new(scope, table)
                    .map_err(|e| ParseError::new(*line, e.to_string()))?;
                let factor = Factor::new(theta, feature)
                    .map_err(|e| ParseError::new(*line, e.to_string()))?;
                factors.push(factor);
            }
            "seed" => {
                if seed.is_some() {
                    return Err(ParseError::new(*line, "duplicate seed line"));
                }
                match tokens.get(1) {
                    Some(&"unary") => {
                        if tokens.len() != 2 {
                            return Err(ParseError::new(
                                *line,
                                "unexpected tokens after `seed unary`",
                            ));
                        }
                        seed = Some(
                            factors
                                .iter()
                                .enumerate()
                                .filter(|(_, f)| f.feature.arity() == 1)
                                .map(|(i, _)| FactorId(i))
                                .collect(),
                        );
                    }
                    Some(&"list") => {
                        let mut ids = FactorSubset::empty();
                        for tok in &tokens[2..] {
                            let id = tok.parse::<usize>().map_err(|_| {
                                ParseError::new(*line, format!("invalid seed factor id `{tok}`"))
                            })?;
                            if id >= factors.len() {
                                return Err(ParseError::new(
                                    *line,
                                    format!(
                                        "seed factor id {id} out of range ({} factors)",
                                        factors.len()
                                    ),
                                ));
                            }
                            if !ids.insert(FactorId(id)) {
                                return Err(ParseError::new(
                                    *line,
                                    format!("duplicate seed factor id {id}"),
                                ));
                            }
                        }
                        seed = Some(ids);
                    }
                    _ => {
                        return Err(ParseError::new(
                            *line,
                            "expected `seed unary` or `seed list ...`",
                        ))
                    }
                }
            }
            other => {
                return Err(ParseError::new(
                    *line,
                    format!("unknown directive `{other}`"),
                ));
            }
        }
    }

    FactorGraph::new(num_vars, factors, seed)
        .map_err(|e| ParseError::new(text.lines().count().max(1), e.to_string()))
}

/// Serializes a graph in the `fgv1` format; `parse_graph` of the output
/// reproduces the graph exactly (weights print in shortest round-trip form).
pub fn serialize_graph(graph: &FactorGraph) -> String {
    let mut out = String::new();
    out.push_str("fgv1\n");
    out.push_str(&format!("vars {}\n", graph.num_vars()));
    for factor in graph.factors() {
        let scope = factor
            .feature
            .scope()
            .iter()
            .map(|v| v.0.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let table: String = factor
            .feature
            .table()
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect();
        out.push_str(&format!(
            "factor {} {} {} {}\n",
            factor.weight,
            factor.feature.arity(),
            scope,
            table
        ));
    }
    let seed_ids = graph
        .seed()
        .iter()
        .map(|id| id.0.to_string())
        .collect::<Vec<_>>()
        .join(" ");
    if seed_ids.is_empty() {
        out.push_str("seed list\n");
    } else {
        out.push_str(&format!("seed list {seed_ids}\n"));
    }
    out
}
