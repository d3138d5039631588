//! Ground factored-MDP instances for SysAdmin, Game of Life and Navigation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::rng::RngStream;

pub const DEFAULT_HORIZON: usize = 40;
pub const DEFAULT_DISCOUNT: f64 = 0.99;

/// SysAdmin dynamics constants used by the generator.
pub const SYSADMIN_DEFAULTS: [(&str, f64); 3] = [("a", 0.45), ("b", 0.5), ("d", 0.1)];
pub const GAME_OF_LIFE_NOISE: f64 = 0.1;
pub const SYSADMIN_EDGE_PROB: f64 = 0.3;

/// Navigation static channels.
pub const NAV_GOAL_CHANNEL: usize = 0;
pub const NAV_DROWN_CHANNEL: usize = 1;
pub const NAV_ACTIONS: [&str; 4] = ["up", "down", "left", "right"];

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum DomainError {
    #[error("adjacency not symmetric at ({0},{1})")]
    AsymmetricAdjacency(usize, usize),
    #[error("adjacency has a self loop at node {0}")]
    SelfLoop(usize),
    #[error("adjacency entry ({0},{1}) is not 0 or 1")]
    NonBinaryAdjacency(usize, usize),
    #[error("{field}: expected length {expected}, found {found}")]
    LengthMismatch {
        field: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("constants: missing `{0}`")]
    MissingConstant(String),
    #[error("constants: `{0}` is not used by this domain")]
    UnknownConstant(String),
    #[error("{field}: probability {value} outside [0,1]")]
    ProbabilityOutOfRange { field: String, value: f64 },
    #[error("unknown domain kind `{0}`")]
    UnknownDomain(String),
    #[error("num_vars must be at least {min}, got {found}")]
    TooFewVars { min: usize, found: usize },
    #[error("{0} is not rows x cols with rows, cols >= 2")]
    InvalidGridSize(usize),
    #[error("grid: {rows}x{cols} does not match num_vars {n}")]
    GridMismatch { rows: usize, cols: usize, n: usize },
    #[error("grid: navigation instances need grid dimensions")]
    MissingGrid,
    #[error("horizon must be positive")]
    ZeroHorizon,
    #[error("discount {0} outside (0,1]")]
    DiscountOutOfRange(f64),
    #[error("node_features: {0}")]
    NodeFeatures(String),
    #[error("initial_state: {0}")]
    InitialState(String),
    #[error("state bit {0} is not 0 or 1")]
    NonBinaryState(u8),
    #[error("experiment: {0}")]
    NotEquiSized(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DomainKind {
    SysAdmin,
    GameOfLife,
    Navigation,
}

impl DomainKind {
    pub const ALL: [DomainKind; 3] = [DomainKind::SysAdmin, DomainKind::GameOfLife, DomainKind::Navigation];

    pub fn name(self) -> &'static str {
        match self {
            DomainKind::SysAdmin => "sysadmin",
            DomainKind::GameOfLife => "game_of_life",
            DomainKind::Navigation => "navigation",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, DomainError> {
        match name {
            "sysadmin" => Ok(DomainKind::SysAdmin),
            "game_of_life" | "gameoflife" => Ok(DomainKind::GameOfLife),
            "navigation" => Ok(DomainKind::Navigation),
            other => Err(DomainError::UnknownDomain(other.to_string())),
        }
    }

    /// Number of static per-node channels.
    pub fn static_channels(self) -> usize {
        match self {
            DomainKind::Navigation => 2,
            _ => 0,
        }
    }

    pub fn num_actions(self, num_vars: usize) -> usize {
        match self {
            DomainKind::Navigation => NAV_ACTIONS.len(),
            _ => num_vars + 1,
        }
    }

    /// Names of the dynamics constants, and whether each is a probability.
    pub fn constant_names(self) -> &'static [&'static str] {
        match self {
            DomainKind::SysAdmin => &["a", "b", "d"],
            DomainKind::GameOfLife => &["p_noise"],
            DomainKind::Navigation => &[],
        }
    }

    /// State-fluent name for variable `i`, as written in instance files.
    pub fn fluent_name(self, i: usize) -> String {
        match self {
            DomainKind::SysAdmin => format!("on(c{i})"),
            DomainKind::GameOfLife => format!("alive(x{i})"),
            DomainKind::Navigation => format!("robot-at(x{i})"),
        }
    }

    pub fn action_labels(self, num_vars: usize) -> Vec<String> {
        match self {
            DomainKind::SysAdmin => (0..num_vars)
                .map(|i| format!("reboot(c{i})"))
                .chain(core::iter::once("noop".to_string()))
                .collect(),
            DomainKind::GameOfLife => (0..num_vars)
                .map(|i| format!("set-alive(x{i})"))
                .chain(core::iter::once("noop".to_string()))
                .collect(),
            DomainKind::Navigation => NAV_ACTIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl fmt::Display for DomainKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Bit vector over an instance's state variables.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct State(Vec<u8>);

impl State {
    pub fn from_bits(bits: &[u8]) -> Result<Self, DomainError> {
        if let Some(&b) = bits.iter().find(|&&b| b > 1) {
            return Err(DomainError::NonBinaryState(b));
        }
        Ok(State(bits.to_vec()))
    }

    pub fn zeros(n: usize) -> Self {
        State(vec![0; n])
    }

    pub fn ones(n: usize) -> Self {
        State(vec![1; n])
    }

    /// One-hot state with bit `i` set.
    pub fn one_hot(n: usize, i: usize) -> Self {
        let mut s = Self::zeros(n);
        s.0[i] = 1;
        s
    }

    /// Decodes the little-endian integer `index` into `n` bits.
    pub fn from_index(n: usize, index: u64) -> Self {
        State((0..n).map(|i| ((index >> i) & 1) as u8).collect())
    }

    pub fn to_index(&self) -> u64 {
        self.0
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &b)| acc | ((b as u64) << i))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i] == 1
    }

    pub fn set(&mut self, i: usize, on: bool) {
        self.0[i] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }

    /// Index of the single set bit, when exactly one is set.
    pub fn one_hot_index(&self) -> Option<usize> {
        let mut found = None;
        for (i, &b) in self.0.iter().enumerate() {
            if b == 1 {
                if found.is_some() {
                    return None;
                }
                found = Some(i);
            }
        }
        found
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| b as f64).collect()
    }
}

/// One ground problem instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceSpec {
    pub domain: DomainKind,
    pub instance_id: String,
    pub num_vars: usize,
    /// Grid dimensions (rows, cols) for grid domains.
    pub grid: Option<(usize, usize)>,
    /// Row-major n×n 0/1 matrix.
    pub adjacency: Vec<u8>,
    /// Row-major n×F_s matrix.
    pub node_features: Vec<f64>,
    pub feature_channels: usize,
    pub actions: Vec<String>,
    pub constants: BTreeMap<String, f64>,
    pub initial_state: State,
    pub horizon: usize,
    pub discount: f64,
}

/// Non-fatal findings from validation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub warnings: Vec<String>,
}

impl InstanceSpec {
    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.num_vars + j] == 1
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_vars).filter(move |&j| self.adjacent(j, i))
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors(i).count()
    }

    pub fn num_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn constant(&self, name: &str) -> f64 {
        self.constants.get(name).copied().unwrap_or(0.0)
    }

    pub fn node_feature(&self, node: usize, channel: usize) -> f64 {
        self.node_features[node * self.feature_channels + channel]
    }

    /// Index of the noop action for SysAdmin and Game of Life.
    pub fn noop_action(&self) -> Option<usize> {
        match self.domain {
            DomainKind::Navigation => None,
            _ => Some(self.num_vars),
        }
    }

    /// Navigation goal cell.
    pub fn goal_cell(&self) -> Option<usize> {
        if self.domain != DomainKind::Navigation {
            return None;
        }
        (0..self.num_vars).find(|&i| self.node_feature(i, NAV_GOAL_CHANNEL) > 0.5)
    }

    /// Undirected edges `(u, v)` with `u < v` in lexicographic order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.num_vars;
        let mut out = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if self.adjacent(u, v) {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Checks every instance invariant. Idempotent; never mutates.
    pub fn validate(&self) -> Result<ValidationReport, DomainError> {
        let n = self.num_vars;
        let mut report = ValidationReport::default();
        if n == 0 {
            return Err(DomainError::TooFewVars { min: 1, found: 0 });
        }
        if self.adjacency.len() != n * n {
            return Err(DomainError::LengthMismatch {
                field: "adjacency",
                expected: n * n,
                found: self.adjacency.len(),
            });
        }
        for i in 0..n {
            for j in 0..n {
                let v = self.adjacency[i * n + j];
                if v > 1 {
                    return Err(DomainError::NonBinaryAdjacency(i, j));
                }
                if i == j && v != 0 {
                    return Err(DomainError::SelfLoop(i));
                }
                if v != self.adjacency[j * n + i] {
                    return Err(DomainError::AsymmetricAdjacency(i, j));
                }
            }
        }
        if self.feature_channels != self.domain.static_channels() {
            return Err(DomainError::NodeFeatures(format!(
                "{} expects {} channels, found {}",
                self.domain,
                self.domain.static_channels(),
                self.feature_channels
            )));
        }
        if self.node_features.len() != n * self.feature_channels {
            return Err(DomainError::LengthMismatch {
                field: "node_features",
                expected: n * self.feature_channels,
                found: self.node_features.len(),
            });
        }
        if self.initial_state.len() != n {
            return Err(DomainError::LengthMismatch {
                field: "initial_state",
                expected: n,
                found: self.initial_state.len(),
            });
        }
        let expected_actions = self.domain.action_labels(n);
        if self.actions != expected_actions {
            return Err(DomainError::LengthMismatch {
                field: "actions",
                expected: expected_actions.len(),
                found: self.actions.len(),
            });
        }
        if self.horizon == 0 {
            return Err(DomainError::ZeroHorizon);
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(DomainError::DiscountOutOfRange(self.discount));
        }

        let names = self.domain.constant_names();
        for name in names {
            let value = *self
                .constants
                .get(*name)
                .ok_or_else(|| DomainError::MissingConstant(name.to_string()))?;
            check_probability(&format!("constants.{name}"), value)?;
        }
        if let Some(extra) = self.constants.keys().find(|k| !names.contains(&k.as_str())) {
            return Err(DomainError::UnknownConstant(extra.clone()));
        }

        if let Some((rows, cols)) = self.grid {
            if rows * cols != n {
                return Err(DomainError::GridMismatch { rows, cols, n });
            }
        }

        match self.domain {
            DomainKind::SysAdmin => {
                let (a, b) = (self.constant("a"), self.constant("b"));
                if a + b > 1.0 {
                    report.warnings.push(format!(
                        "constants: a + b = {} exceeds 1; on-probabilities are clamped to [0,1]",
                        a + b
                    ));
                }
            }
            DomainKind::GameOfLife => {}
            DomainKind::Navigation => {
                if self.grid.is_none() {
                    return Err(DomainError::MissingGrid);
                }
                let mut goals = 0;
                for i in 0..n {
                    let g = self.node_feature(i, NAV_GOAL_CHANNEL);
                    if g != 0.0 && g != 1.0 {
                        return Err(DomainError::NodeFeatures(format!(
                            "is-goal flag of node {i} is {g}, expected 0 or 1"
                        )));
                    }
                    goals += (g == 1.0) as usize;
                    check_probability(
                        &format!("node_features[{i}].drown"),
                        self.node_feature(i, NAV_DROWN_CHANNEL),
                    )?;
                }
                if goals != 1 {
                    return Err(DomainError::NodeFeatures(format!(
                        "navigation needs exactly one goal cell, found {goals}"
                    )));
                }
                if self.initial_state.one_hot_index().is_none() {
                    return Err(DomainError::InitialState(
                        "navigation start must set exactly one robot-at bit".to_string(),
                    ));
                }
            }
        }
        Ok(report)
    }
}

fn check_probability(field: &str, value: f64) -> Result<(), DomainError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(DomainError::ProbabilityOutOfRange {
            field: field.to_string(),
            value,
        })
    }
}

/// N source instances and one target, all of one domain and one size.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSet {
    pub sources: Vec<InstanceSpec>,
    pub target: InstanceSpec,
}

impl ExperimentSet {
    pub fn new(sources: Vec<InstanceSpec>, target: InstanceSpec) -> Result<Self, DomainError> {
        check_equi_sized(sources.iter().chain(core::iter::once(&target)))?;
        Ok(Self { sources, target })
    }
}

/// Checks that all instances share domain, size and action count and have distinct ids.
pub fn check_equi_sized<'a>(instances: impl IntoIterator<Item = &'a InstanceSpec>) -> Result<(), DomainError> {
    let all: Vec<&InstanceSpec> = instances.into_iter().collect();
    let Some(first) = all.first() else {
        return Err(DomainError::NotEquiSized("no instances".to_string()));
    };
    for spec in &all {
        if spec.domain != first.domain {
            return Err(DomainError::NotEquiSized(format!(
                "`{}` is {} but `{}` is {}",
                spec.instance_id, spec.domain, first.instance_id, first.domain
            )));
        }
        if spec.num_vars != first.num_vars || spec.num_actions() != first.num_actions() {
            return Err(DomainError::NotEquiSized(format!(
                "`{}` has {} vars / {} actions, `{}` has {} / {}",
                spec.instance_id,
                spec.num_vars,
                spec.num_actions(),
                first.instance_id,
                first.num_vars,
                first.num_actions()
            )));
        }
        if spec.feature_channels != first.feature_channels {
            return Err(DomainError::NotEquiSized(format!(
                "`{}` has a different number of node feature channels",
                spec.instance_id
            )));
        }
    }
    for (i, a) in all.iter().enumerate() {
        if all[i + 1..].iter().any(|b| b.instance_id == a.instance_id) {
            return Err(DomainError::NotEquiSized(format!(
                "duplicate instance id `{}`",
                a.instance_id
            )));
        }
    }
    Ok(())
}

/// Grid factorization closest to square, rows <= cols, both at least 2.
pub fn grid_shape(n: usize) -> Result<(usize, usize), DomainError> {
    let mut best = None;
    let mut r = 2;
    while r * r <= n {
        if n % r == 0 {
            best = Some((r, n / r));
        }
        r += 1;
    }
    best.ok_or(DomainError::InvalidGridSize(n))
}

fn quantize(x: f64) -> f64 {
    libm::round(x * 1e6) / 1e6
}

/// Builds a spec from parts, filling in action labels, then validates it.
#[allow(clippy::too_many_arguments)]
pub fn build_instance(
    domain: DomainKind,
    instance_id: String,
    num_vars: usize,
    grid: Option<(usize, usize)>,
    adjacency: Vec<u8>,
    node_features: Vec<f64>,
    constants: BTreeMap<String, f64>,
    initial_state: State,
    horizon: usize,
    discount: f64,
) -> Result<InstanceSpec, DomainError> {
    let spec = InstanceSpec {
        domain,
        instance_id,
        num_vars,
        grid,
        adjacency,
        node_features,
        feature_channels: domain.static_channels(),
        actions: domain.action_labels(num_vars),
        constants,
        initial_state,
        horizon,
        discount,
    };
    spec.validate()?;
    Ok(spec)
}

/// Random instance of the given domain and size; a pure function of its arguments.
pub fn generate_instance(domain: DomainKind, num_vars: usize, seed: u64) -> Result<InstanceSpec, DomainError> {
    if num_vars < 2 {
        return Err(DomainError::TooFewVars {
            min: 2,
            found: num_vars,
        });
    }
    let mut rng = RngStream::new(seed).split_named(domain.name());
    let n = num_vars;
    let id = format!("{}-n{}-s{}", domain.name(), n, seed);
    match domain {
        DomainKind::SysAdmin => {
            let adjacency = loop {
                let mut adj = vec![0u8; n * n];
                for u in 0..n {
                    for v in (u + 1)..n {
                        if rng.bernoulli(SYSADMIN_EDGE_PROB) {
                            adj[u * n + v] = 1;
                            adj[v * n + u] = 1;
                        }
                    }
                }
                if is_connected(&adj, n) {
                    break adj;
                }
            };
            let constants = SYSADMIN_DEFAULTS.iter().map(|&(k, v)| (k.to_string(), v)).collect();
            build_instance(
                domain,
                id,
                n,
                None,
                adjacency,
                Vec::new(),
                constants,
                State::ones(n),
                DEFAULT_HORIZON,
                DEFAULT_DISCOUNT,
            )
        }
        DomainKind::GameOfLife => {
            let (rows, cols) = grid_shape(n)?;
            let adjacency = grid_adjacency(rows, cols, true);
            let bits: Vec<u8> = (0..n).map(|_| rng.bernoulli(0.5) as u8).collect();
            let mut constants = BTreeMap::new();
            constants.insert("p_noise".to_string(), GAME_OF_LIFE_NOISE);
            build_instance(
                domain,
                id,
                n,
                Some((rows, cols)),
                adjacency,
                Vec::new(),
                constants,
                State(bits),
                DEFAULT_HORIZON,
                DEFAULT_DISCOUNT,
            )
        }
        DomainKind::Navigation => {
            let (rows, cols) = grid_shape(n)?;
            let adjacency = grid_adjacency(rows, cols, false);
            let goal = rng.below(cols);
            let start = (rows - 1) * cols + rng.below(cols);
            let mut features = vec![0.0; n * 2];
            features[goal * 2 + NAV_GOAL_CHANNEL] = 1.0;
            // river: every row strictly between the goal row and the start row
            for r in 1..rows.saturating_sub(1) {
                for c in 0..cols {
                    features[(r * cols + c) * 2 + NAV_DROWN_CHANNEL] = quantize(rng.uniform_range(0.0, 0.25));
                }
            }
            build_instance(
                domain,
                id,
                n,
                Some((rows, cols)),
                adjacency,
                features,
                BTreeMap::new(),
                State::one_hot(n, start),
                DEFAULT_HORIZON,
                DEFAULT_DISCOUNT,
            )
        }
    }
}

/// `count` generated instances with seeds `seed, seed+1, ...`.
pub fn generate_instances(
    domain: DomainKind,
    num_vars: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<InstanceSpec>, DomainError> {
    (0..count as u64)
        .map(|k| generate_instance(domain, num_vars, seed.wrapping_add(k)))
        .collect()
}

/// 4- or 8-neighborhood adjacency of a rows×cols grid (row-major cells).
pub fn grid_adjacency(rows: usize, cols: usize, moore: bool) -> Vec<u8> {
    let n = rows * cols;
    let mut adj = vec![0u8; n * n];
    for r in 0..rows as isize {
        for c in 0..cols as isize {
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if (dr == 0 && dc == 0) || (!moore && dr != 0 && dc != 0) {
                        continue;
                    }
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= rows as isize || cc >= cols as isize {
                        continue;
                    }
                    let u = (r as usize) * cols + c as usize;
                    let v = (rr as usize) * cols + cc as usize;
                    adj[u * n + v] = 1;
                }
            }
        }
    }
    adj
}

fn is_connected(adj: &[u8], n: usize) -> bool {
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for v in 0..n {
            if adj[u * n + v] == 1 && !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen.into_iter().all(|s| s)
}
