use crate::gmrf::Model;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed graph input: self-loops, unknown vertices, duplicate labels.
    #[error("structural error: {0}")]
    Structure(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A value outside its physical domain (negative or non-finite density).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("model was trained on graph {model} but the supplied graph is {graph}")]
    Incompatible { model: String, graph: String },

    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("network generation failed: {0}")]
    Generation(String),

    /// Gradient ascent ran out of steps; `best` holds the last accepted parameters.
    #[error("learning did not converge after {steps} steps (gradient norm {grad_norm:.3e})")]
    NonConvergence {
        steps: usize,
        grad_norm: f64,
        best: Box<Model>,
    },

    /// The training data carry no fluctuation, so the likelihood has no finite
    /// maximizer in eta. `best` holds parameters at the eta cap, which still
    /// encode the data mean exactly.
    #[error("degenerate training data: eta diverges (ln eta reached {ln_eta:.1}); snapshots show no variation")]
    DegenerateData { ln_eta: f64, best: Box<Model> },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad user input rather than by a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Structure(_)
                | Error::InvalidParameter(_)
                | Error::Domain(_)
                | Error::Shape { .. }
                | Error::Format(_)
        )
    }
}

pub(crate) fn ensure_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Shape {
            what,
            expected,
            actual,
        })
    }
}
