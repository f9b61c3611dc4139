//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

use crate::tasks::ParseError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // -- world --
    #[error("{path}:{line}: malformed world file: {reason}")]
    MalformedWorldFile {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("unsupported world file version {found:?} (expected {expected:?})")]
    WorldVersion { expected: String, found: String },
    #[error("no cities left after population filter")]
    EmptyWorld,
    #[error("{cities} cities exceed the id space of {space}")]
    IdSpaceExhausted { cities: usize, space: usize },
    #[error("id {id} already present in world")]
    IdCollision { id: u16 },
    #[error("operation requires assigned city ids")]
    UnassignedIds,

    // -- tasks --
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),
    #[error("{task} expects {expected} cities, got {got}")]
    Arity {
        task: &'static str,
        expected: &'static str,
        got: usize,
    },
    #[error("answer {answer} is not valid for task {task}")]
    AnswerKind { task: &'static str, answer: String },

    // -- tokenizer --
    #[error("character {ch:?} at index {index} is not in the vocabulary")]
    OutOfVocab { ch: char, index: usize },
    #[error("invalid token id {id}")]
    InvalidTokenId { id: u32 },
    #[error("PAD token inside content at index {index}")]
    PadInContent { index: usize },

    // -- datagen --
    #[error("sampling failed for {what} after {attempts} attempts")]
    SamplingFailed { what: String, attempts: u64 },
    #[error("dataset spec invalid: {0}")]
    DatasetSpec(String),

    // -- model / trainer --
    #[error("invalid model config: {0}")]
    ModelConfig(String),
    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("batch contains no unmasked targets")]
    AllPadBatch,
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("training diverged (non-finite loss) at step {step}")]
    Divergence { step: u64 },
    #[error("capture layer {layer} out of range 1..={layers}")]
    LayerOutOfRange { layer: usize, layers: usize },

    // -- eval / repr --
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("degenerate baselines for {task}: atlantis={atlantis}, standard={standard}")]
    DegenerateBaselines {
        task: String,
        atlantis: f64,
        standard: f64,
    },
    #[error("representation matrices misaligned: {0}")]
    Misaligned(String),
    #[error("shape error: {0}")]
    Shape(String),

    // -- cli / pipeline --
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact {0} (run the upstream subcommand first)")]
    MissingArtifact(PathBuf),
    #[error("stale pipeline: {stage} was built with config {found}, current config is {expected}")]
    StaleArtifact {
        stage: String,
        expected: String,
        found: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code class: 1 = user error (inputs/config), 2 = internal.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::MalformedWorldFile { .. }
            | Error::WorldVersion { .. }
            | Error::EmptyWorld
            | Error::Config(_)
            | Error::DatasetSpec(_)
            | Error::MissingArtifact(_)
            | Error::StaleArtifact { .. }
            | Error::OutOfVocab { .. } => 1,
            _ => 2,
        }
    }
}
