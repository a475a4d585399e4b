use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::{FabricError, Rank, Role, Tag, TensorMsg};
use crate::autodiff::Tensor;

type Queues = HashMap<(Rank, Tag), VecDeque<TensorMsg>>;

#[derive(Default)]
struct Mailbox {
    queues: Mutex<Queues>,
    ready: Condvar,
}

/// State shared by the endpoints of one scheduler run.
pub(crate) struct Fabric {
    mailboxes: Vec<Mailbox>,
    aborted: AtomicBool,
    /// `None`: sequential scheduling, receives never wait.
    wait: Option<Duration>,
}

fn lock(m: &Mutex<Queues>) -> MutexGuard<'_, Queues> {
    // a panicking rank poisons nothing we cannot keep using
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Fabric {
    pub(crate) fn new(world_size: usize, wait: Option<Duration>) -> Self {
        Self {
            mailboxes: (0..world_size).map(|_| Mailbox::default()).collect(),
            aborted: AtomicBool::new(false),
            wait,
        }
    }

    pub(crate) fn abort(&self) {
        self.aborted.store(true, Ordering::SeqCst);
        for mb in &self.mailboxes {
            let _guard = lock(&mb.queues);
            mb.ready.notify_all();
        }
    }

    pub(crate) fn is_aborted(&self) -> bool {
        self.aborted.load(Ordering::SeqCst)
    }

    /// Messages left in each rank's mailbox.
    pub(crate) fn unconsumed(&self) -> Vec<(Rank, usize)> {
        self.mailboxes
            .iter()
            .enumerate()
            .map(|(r, mb)| (r, lock(&mb.queues).values().map(VecDeque::len).sum()))
            .filter(|&(_, n)| n > 0)
            .collect()
    }
}

/// A rank's handle onto the fabric for the duration of one run.
pub struct Endpoint<'f> {
    pub(crate) rank: Rank,
    pub(crate) n_encoders: usize,
    pub(crate) fabric: &'f Fabric,
}

impl Endpoint<'_> {
    pub fn rank(&self) -> Rank {
        self.rank
    }

    pub fn role(&self) -> Role {
        if self.rank == 0 {
            Role::Aggregator
        } else {
            Role::Encoder
        }
    }

    pub fn n_encoders(&self) -> usize {
        self.n_encoders
    }

    pub fn world_size(&self) -> usize {
        self.n_encoders + 1
    }

    pub fn encoder_ranks(&self) -> Vec<Rank> {
        (1..=self.n_encoders).collect()
    }

    pub fn send(&self, dst: Rank, tag: Tag, payload: Tensor) -> Result<(), FabricError> {
        let mb = self
            .fabric
            .mailboxes
            .get(dst)
            .ok_or(FabricError::InvalidRank(dst))?;
        let msg = TensorMsg {
            src: self.rank,
            dst,
            tag,
            payload,
        };
        lock(&mb.queues)
            .entry((self.rank, tag))
            .or_default()
            .push_back(msg);
        mb.ready.notify_all();
        Ok(())
    }

    pub fn recv(&self, src: Rank, tag: Tag) -> Result<Tensor, FabricError> {
        Ok(self.recv_many(&[src], tag)?.pop().expect("one message"))
    }

    /// Receives one message with `tag` from every rank in `srcs`, returned in
    /// `srcs` order. Either all messages are taken or none are.
    pub fn recv_many(&self, srcs: &[Rank], tag: Tag) -> Result<Vec<Tensor>, FabricError> {
        if let Some(&bad) = srcs.iter().find(|&&s| s >= self.world_size()) {
            return Err(FabricError::InvalidRank(bad));
        }
        let mb = &self.fabric.mailboxes[self.rank];
        let deadline = self.fabric.wait.map(|w| Instant::now() + w);
        let mut queues = lock(&mb.queues);
        loop {
            let missing: Vec<Rank> = srcs
                .iter()
                .copied()
                .filter(|&s| queues.get(&(s, tag)).is_none_or(VecDeque::is_empty))
                .collect();
            if missing.is_empty() {
                return Ok(srcs
                    .iter()
                    .map(|&s| {
                        let q = queues.get_mut(&(s, tag)).expect("present");
                        let msg = q.pop_front().expect("nonempty");
                        if q.is_empty() {
                            queues.remove(&(s, tag));
                        }
                        msg.payload
                    })
                    .collect());
            }
            if self.fabric.is_aborted() {
                return Err(FabricError::Aborted);
            }
            let remaining = deadline.and_then(|d| d.checked_duration_since(Instant::now()));
            match remaining {
                Some(left) if !left.is_zero() => {
                    let slice = left.min(Duration::from_millis(25));
                    queues = mb
                        .ready
                        .wait_timeout(queues, slice)
                        .unwrap_or_else(|e| e.into_inner())
                        .0;
                }
                _ => return Err(self.explain_missing(&queues, &missing, tag)),
            }
        }
    }

    fn explain_missing(&self, queues: &Queues, missing: &[Rank], tag: Tag) -> FabricError {
        for &src in missing {
            let mut found: Vec<Tag> = queues
                .iter()
                .filter(|((s, _), q)| *s == src && !q.is_empty())
                .map(|((_, t), _)| *t)
                .collect();
            if !found.is_empty() {
                found.sort();
                return FabricError::TagMismatch {
                    rank: self.rank,
                    src,
                    expected: tag,
                    found,
                };
            }
        }
        FabricError::MissingMessages {
            rank: self.rank,
            tag,
            missing: missing.to_vec(),
        }
    }
}
