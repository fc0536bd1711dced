use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A required column is missing or the schema is inconsistent with the file.
    #[error("schema error: {0}")]
    Schema(String),

    /// A cell could not be mapped to the value domain its column requires.
    #[error("value error: {0}")]
    Value(String),

    /// The input holds no usable rows, or rows disagree in shape.
    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("size error: {0}")]
    Size(String),

    /// A fairness group has (estimated) mass too small to weight by.
    #[error("degenerate group {group}: {detail}")]
    DegenerateGroup { group: u8, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(
        "training diverged at iteration {iteration} (gradient norm {norm:.3e}); \
         retry with a smaller initial learning rate"
    )]
    Divergence { iteration: usize, norm: f64 },

    #[error("training failed at mu = {mu}: {source}")]
    AtMu {
        mu: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the input data or by training, as opposed to
    /// configuration mistakes. The CLI maps these to a distinct exit status.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_))
    }
}
