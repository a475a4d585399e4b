//! Simulated multi-rank process group.
//!
//! Rank 0 is the aggregator, ranks `1..=N` are encoders. Workers never
//! share mutable state: each rank owns its state and talks to the others
//! through per-rank mailboxes keyed by `(source, tag)`.
//!
//! A workload is a list of *phases*. Every collective is split across a
//! phase boundary: its send half runs in one phase and its receive half in
//! the next, so the same phase list is valid under both schedulers:
//!
//! * [`SchedulerKind::Sequential`] runs phase `p` for ranks `0..=N` in
//!   order on the calling thread; a receive whose message is absent fails
//!   immediately.
//! * [`SchedulerKind::Threaded`] runs one thread per rank; receives block
//!   until the message arrives or the group timeout expires.
//!
//! Reductions fold contributions in the order fixed by a
//! [`ReductionPlan`], never in arrival order, which makes results
//! scheduler independent.

mod collectives;
mod group;
mod mailbox;
mod plan;
mod wire;

pub use group::{PhaseFn, ProcessGroup, Rank, Role, SchedulerKind, DEFAULT_TIMEOUT};
pub use mailbox::Endpoint;
pub use plan::{ReduceOp, ReductionMode, ReductionPlan};
pub use wire::{Phase, Tag, TensorMsg};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FabricError {
    #[error("a process group needs at least one encoder rank")]
    ZeroEncoders,
    #[error("rank {rank}: no message with tag {tag} from rank(s) {missing:?}")]
    MissingMessages {
        rank: Rank,
        tag: Tag,
        missing: Vec<Rank>,
    },
    #[error("rank {rank}: expected tag {expected} from rank {src}, found {found:?}")]
    TagMismatch {
        rank: Rank,
        src: Rank,
        expected: Tag,
        found: Vec<Tag>,
    },
    #[error("{op}: inconsistent shape from rank {rank}: {detail}")]
    ShapeInconsistency {
        op: &'static str,
        rank: Rank,
        detail: String,
    },
    #[error("scatter: expected {expected} chunks, got {got}")]
    ChunkCount { expected: usize, got: usize },
    #[error("{op}: rank {rank} is not a member of the participating group")]
    NotMember { op: &'static str, rank: Rank },
    #[error("rank {0} is outside the process group")]
    InvalidRank(Rank),
    #[error("reduction plan {order:?} is not a permutation of {subset:?}")]
    InvalidPlan { order: Vec<Rank>, subset: Vec<Rank> },
    #[error("expected {expected} rank states, got {got}")]
    StateCount { expected: usize, got: usize },
    #[error("rank {rank}: {count} message(s) were never received")]
    Unconsumed { rank: Rank, count: usize },
    #[error("aborted because another rank failed")]
    Aborted,
    #[error("wire format: {0}")]
    Wire(String),
}
