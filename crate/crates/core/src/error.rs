use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is singular at original index {index}")]
    Singular { index: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("parameter `{name}` must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("cable of zero length cannot be built as a ladder; use a direct branch")]
    DegenerateCable,
    #[error("invalid magnetization curve: {0}")]
    InvalidCurve(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate element name `{0}`")]
    DuplicateElement(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("time step must be positive, got {0}")]
    InvalidTimeStep(f64),
    #[error("floating subnetwork, no path to ground from nodes {nodes:?}")]
    FloatingNodes { nodes: Vec<String> },
    #[error("nodal matrix is singular at node `{node}`")]
    Singular { node: String },
    #[error("numerical divergence at node `{node}` at t = {time} s")]
    Divergence { node: String, time: f64 },
    #[error("event targets unknown element `{0}`")]
    UnknownTarget(String),
    #[error("event `{kind}` cannot be applied to element `{target}`")]
    IncompatibleEvent { kind: String, target: String },
    #[error("events are not sorted by time")]
    UnsortedEvents,
    #[error("probe references unknown {0}")]
    UnknownProbe(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScanError {
    #[error("no steady state reached within {horizon} s")]
    NoSteadyState { horizon: f64 },
    #[error("window [{start}, {end}] s lies outside the record [{record_start}, {record_end}] s")]
    WindowOutOfRange {
        start: f64,
        end: f64,
        record_start: f64,
        record_end: f64,
    },
    #[error("requested frequency {0} Hz lies outside the source grid")]
    Extrapolation(f64),
    #[error("element `{0}` is not a linear passive element")]
    UnsupportedElement(String),
    #[error("admittance matrix singular at {frequency} Hz (node `{node}`)")]
    Singular { frequency: f64, node: String },
    #[error("invalid scan plan: {0}")]
    InvalidPlan(String),
    #[error("unknown bus `{0}`")]
    UnknownBus(String),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("analysis window of {length} s is shorter than two fundamental cycles")]
    WindowTooShort { length: f64 },
    #[error("analysis window [{start}, {end}] s lies outside the record")]
    WindowOutOfRange { start: f64, end: f64 },
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
    #[error("record too short to observe decay at {0} Hz")]
    RecordTooShort(f64),
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid value for `{key}`: {reason}")]
    Semantic { key: String, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Crate-wide error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Scan(#[from] ScanError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
