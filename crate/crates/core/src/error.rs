use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown token id {0}")]
    UnknownTokenId(usize),
    #[error("unknown region tag {0:?}")]
    UnknownRegionTag(String),
    #[error("malformed knowledge file at line {line}: {msg}")]
    KnowledgeFormat { line: usize, msg: String },
    #[error("region topics missing from the general set: {0:?}")]
    TopicsNotInGeneral(Vec<String>),
    #[error("general topics covered by no region subset: {0:?}")]
    TopicsNotInAnyRegion(Vec<String>),
    #[error("duplicate topic {0:?}")]
    DuplicateTopic(String),
    #[error("empty topic set")]
    EmptyTopicSet,
    #[error("missing image file {}", .0.display())]
    MissingImage(PathBuf),
    #[error("image {}: {msg}", .path.display())]
    Image { path: PathBuf, msg: String },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("prefix length {len} exceeds max_len {max_len}")]
    PrefixTooLong { len: usize, max_len: usize },
    #[error("loss mask selects no positions (all-PAD batch)")]
    AllPad,
    #[error("contrastive loss needs negatives (batch size {0})")]
    NeedNegatives(usize),
    #[error("checkpoint has no alignment heads")]
    NoAlignmentHeads,
    #[error("checkpoint format mismatch: expected tag {expected:?}, found {found:?}")]
    CheckpointVersion { expected: String, found: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("non-finite loss at step {step}: gen={gen_loss} ctr={}", ctr_loss.map_or("n/a".to_string(), |c| c.to_string()))]
    NonFiniteLoss { step: usize, gen_loss: f64, ctr_loss: Option<f64> },
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
