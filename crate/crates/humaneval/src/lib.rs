//! Human evaluation: blinded Likert and A/B sessions, a durable annotation
//! log, agreement statistics and the HTTP service annotators talk to.

pub mod server;
pub mod service;
pub mod session;
pub mod stats;
pub mod store;

pub use server::{serve, HumanEvalServer, ServerConfig};
pub use service::{Ack, EvalService, Submission};
pub use session::{create_session, Aspect, EvalItem, Mode, Session, Task, TaskView};
pub use stats::{ab_results, agreement, kappa, AbTable, AgreementStats, KappaMethod, Ratings};
pub use store::{AnnotationLog, AnnotationRecord, Fault, Preference};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HumanEvalError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("invalid: {0}")]
    Invalid(String),
    #[error("unknown task '{0}'")]
    UnknownTask(String),
    #[error("task '{0}' already answered")]
    Duplicate(String),
    #[error("score {score} for {aspect} outside 1..=5")]
    ScoreRange { aspect: Aspect, score: u8 },
    #[error("no A/B annotations for {0}")]
    EmptyPairing(String),
    #[error("insufficient overlap: {0}")]
    InsufficientOverlap(String),
    #[error("kappa undefined: chance agreement is 1 but observed agreement is not")]
    DegenerateKappa,
    #[error("session '{0}' already exists")]
    DuplicateSession(String),
    #[error("unknown session '{0}'")]
    UnknownSession(String),
    #[error("injected fault after write")]
    Injected,
}
