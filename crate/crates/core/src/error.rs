use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("array shape {shape:?} needs {expected} values, got {actual}")]
    BadArrayLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("gate vector has {actual} entries, graph has {expected} edges")]
    GateLength { expected: usize, actual: usize },
    #[error("discovery loss became non-finite at step {step}")]
    DiscoveryDiverged { step: usize },
    #[error("discovery run {run} failed: {source}")]
    RunFailed {
        run: usize,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
    #[error("requested {requested} examples but only {available} distinct ones exist")]
    NotEnoughCombinations { requested: usize, available: usize },
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("enumeration needs {required} evaluations, budget is {budget}")]
    BudgetExceeded { required: u128, budget: u128 },
    #[error("reference logits have no unique argmax")]
    NonUniqueArgmax,
    #[error("{0}")]
    Contract(String),
}
