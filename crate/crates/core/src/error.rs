use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("softmax mask row {row} has no visible entries")]
    DegenerateMask { row: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value in {context} at coordinate {index}")]
    NonFinite { context: String, index: usize },

    #[error("training aborted: non-finite gradient for parameter `{param}`")]
    TrainingAbort { param: String },

    #[error("timestep {t} outside schedule range [1, {max}]")]
    Schedule { t: usize, max: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("state error: {0}")]
    State(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("integrity failure: {0}")]
    Integrity(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
