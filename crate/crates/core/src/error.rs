use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    /// `mode` is 1-based; `None` when the colliding eigenvalue lies beyond the computed modes.
    #[error(
        "resonance: theta = {theta} is within {margin:.3e} of {} (eps_res = {eps_res:.3e})",
        describe_mode(*.mode, *.lambda)
    )]
    Resonance {
        mode: Option<usize>,
        theta: f64,
        lambda: f64,
        margin: f64,
        eps_res: f64,
    },

    #[error("insufficient modes: {0}")]
    InsufficientModes(String),

    #[error("eigensolver did not converge after {iterations} iterations (worst relative residual {residual:.3e})")]
    EigenNonConvergence { iterations: usize, residual: f64 },

    #[error("singular system: {0}")]
    Singular(String),

    #[error(
        "(Lambda_N, F_N) is not controllable at eigenvalue {eigenvalue} (modes {modes:?}): \
         sigma_min = {sigma_min:.3e} <= rank_tol = {rank_tol:.3e}"
    )]
    Uncontrollable {
        modes: Vec<usize>,
        eigenvalue: f64,
        sigma_min: f64,
        rank_tol: f64,
    },

    #[error(
        "degenerate boundary traces for modes {modes:?}: smallest Gram singular value \
         {sigma_min:.3e} < sing_tol = {sing_tol:.3e}"
    )]
    DegenerateTrace {
        modes: Vec<usize>,
        sigma_min: f64,
        sing_tol: f64,
    },

    #[error("riccati solve failed: {0}")]
    Riccati(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn describe_mode(mode: Option<usize>, lambda: f64) -> String {
    match mode {
        Some(j) => format!("lambda_{j} = {lambda}"),
        None => format!("an eigenvalue beyond the computed modes (estimate {lambda})"),
    }
}

impl Error {
    /// CLI exit code: 2 config error, 3 resonance violation, 4 numerical failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::InvalidGrid(_)
            | Error::LengthMismatch { .. }
            | Error::InsufficientModes(_)
            | Error::Config(_)
            | Error::Io(_) => 2,
            Error::Resonance { .. } => 3,
            Error::EigenNonConvergence { .. }
            | Error::Singular(_)
            | Error::Uncontrollable { .. }
            | Error::DegenerateTrace { .. }
            | Error::Riccati(_)
            | Error::Numerical(_)
            | Error::Csv(_) => 4,
        }
    }
}
