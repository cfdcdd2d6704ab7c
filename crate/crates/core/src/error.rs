use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("non-finite pre-activation")]
    NonFinitePreActivation,
    #[error("membrane overflow at layer {layer}, t={t}")]
    MembraneOverflow { layer: usize, t: usize },
    #[error("shape mismatch at layer {layer}: got {got}, expected {expected}")]
    ShapeMismatch {
        layer: usize,
        got: String,
        expected: String,
    },
    #[error("leak out of [0,1) at layer {layer}, neuron {neuron}: {value}")]
    LeakOutOfRange {
        layer: usize,
        neuron: usize,
        value: f64,
    },
    #[error("scale must be positive (layer {layer}, neuron {neuron}: {value})")]
    NonPositiveScale {
        layer: usize,
        neuron: usize,
        value: f64,
    },
    #[error("not a DAG")]
    NotADag,
    #[error("degenerate hidden node {node}: zero incoming norm")]
    DegenerateNode { node: usize },
    #[error("degenerate neuron (layer {layer}, neuron {neuron}): zero block norm")]
    DegenerateNeuron { layer: usize, neuron: usize },
    #[error("no witnesses")]
    EmptyWitnessStore,
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("exact enumeration out of budget: {0}")]
    EnumerationBudget(String),
    #[error("divergence (check step size)")]
    SolverDivergence,
    #[error("label out of domain: {0}")]
    LabelDomain(String),
    #[error("gradient overflow")]
    GradientOverflow,
    #[error("missing prerequisite checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("autoregressive mode requires carry task")]
    AutoregressiveNeedsCarry,
    #[error("corrupt IDX file: {0}")]
    CorruptIdx(String),
    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },
    #[error("invalid artifact {path}: {message}")]
    Artifact { path: String, message: String },
    #[error("certification failure: gap {gap} exceeds tolerance {tol}")]
    CertificationFailure { gap: f64, tol: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
