use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("modal block {index} is not Hurwitz (decay = {decay})")]
    NotHurwitz { index: usize, decay: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("polynomial coefficient table overflow ({monomials} monomials x {outputs} outputs)")]
    CoefficientOverflow { monomials: usize, outputs: usize },

    #[error("non-resonance check failed: {0}")]
    Resonance(String),

    #[error("simulation diverged at t = {time}: {detail}")]
    Divergence { time: f64, detail: String },

    #[error("rank-deficient regression in degree block {degree} of {map}")]
    RankDeficient { map: &'static str, degree: usize },

    #[error("tube state must be nonnegative (s = {s}, delta = {delta})")]
    NegativeTube { s: f64, delta: f64 },

    #[error("tube dynamics are unstable: {0}")]
    UnstableTube(String),

    #[error("terminal set rejected: {0}")]
    TerminalInfeasible(String),

    #[error("disturbance magnitude {magnitude} gives |d| up to {implied} > d_bar = {d_bar}")]
    DisturbanceBound { magnitude: f64, implied: f64, d_bar: f64 },

    #[error("optimal control problem infeasible at t = 0 with no previous solution")]
    InitialInfeasible,

    #[error("tube constant fit failed: {0}")]
    FitInfeasible(String),

    #[error("steady state solve failed: {0}")]
    SteadyState(String),

    #[error("convex solver: {0}")]
    Solver(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{module}: {source}")]
    Stage {
        module: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, module: &'static str) -> Self {
        Error::Stage { module, source: Box::new(self) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
