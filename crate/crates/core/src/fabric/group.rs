use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::mailbox::{Endpoint, Fabric};
use super::FabricError;

pub type Rank = usize;

/// Default per-collective timeout in threaded mode.
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Aggregator,
    Encoder,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    /// Single-threaded round-robin over ranks, phase by phase.
    #[default]
    Sequential,
    /// One OS thread per rank with blocking receives.
    Threaded,
}

/// One phase of a rank program.
pub type PhaseFn<'a, S, E> = dyn Fn(&mut S, &Endpoint<'_>) -> Result<(), E> + Sync + 'a;

/// `N + 1` simulated workers: rank 0 aggregates, ranks `1..=N` encode.
#[derive(Clone, Debug)]
pub struct ProcessGroup {
    n_encoders: usize,
    scheduler: SchedulerKind,
    timeout: Duration,
}

impl ProcessGroup {
    /// Creates a group with `n_encoders` encoder ranks plus the aggregator.
    pub fn spawn(n_encoders: usize, scheduler: SchedulerKind) -> Result<Self, FabricError> {
        if n_encoders == 0 {
            return Err(FabricError::ZeroEncoders);
        }
        Ok(Self {
            n_encoders,
            scheduler,
            timeout: DEFAULT_TIMEOUT,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_scheduler(mut self, scheduler: SchedulerKind) -> Self {
        self.scheduler = scheduler;
        self
    }

    pub fn n_encoders(&self) -> usize {
        self.n_encoders
    }

    pub fn world_size(&self) -> usize {
        self.n_encoders + 1
    }

    pub fn scheduler(&self) -> SchedulerKind {
        self.scheduler
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    pub fn role(&self, rank: super::Rank) -> Result<Role, FabricError> {
        match rank {
            0 => Ok(Role::Aggregator),
            r if r <= self.n_encoders => Ok(Role::Encoder),
            r => Err(FabricError::InvalidRank(r)),
        }
    }

    /// Ranks `1..=N`.
    pub fn encoder_ranks(&self) -> Vec<Rank> {
        (1..=self.n_encoders).collect()
    }

    /// Executes `phases` on every rank. `states[r]` is owned by rank `r` for
    /// the whole run. The run fails if any rank fails or if any message is
    /// left unreceived at the end; the error reported is the one raised
    /// first.
    pub fn run<S, E>(&self, states: &mut [S], phases: &[&PhaseFn<'_, S, E>]) -> Result<(), E>
    where
        S: Send,
        E: From<FabricError> + Send,
    {
        if states.len() != self.world_size() {
            return Err(FabricError::StateCount {
                expected: self.world_size(),
                got: states.len(),
            }
            .into());
        }
        let wait = match self.scheduler {
            SchedulerKind::Sequential => None,
            SchedulerKind::Threaded => Some(self.timeout),
        };
        let fabric = Fabric::new(self.world_size(), wait);
        let endpoint = |rank| Endpoint {
            rank,
            n_encoders: self.n_encoders,
            fabric: &fabric,
        };

        match self.scheduler {
            SchedulerKind::Sequential => {
                for phase in phases {
                    for (rank, state) in states.iter_mut().enumerate() {
                        phase(state, &endpoint(rank))?;
                    }
                }
            }
            SchedulerKind::Threaded => {
                let first_failure: Mutex<Option<Rank>> = Mutex::new(None);
                let results: Vec<Result<(), E>> = std::thread::scope(|scope| {
                    let handles: Vec<_> = states
                        .iter_mut()
                        .enumerate()
                        .map(|(rank, state)| {
                            let ep = endpoint(rank);
                            let fabric = &fabric;
                            let first_failure = &first_failure;
                            scope.spawn(move || {
                                for phase in phases {
                                    if fabric.is_aborted() {
                                        return Err(FabricError::Aborted.into());
                                    }
                                    if let Err(e) = phase(state, &ep) {
                                        let mut first = first_failure.lock().unwrap_or_else(|p| p.into_inner());
                                        if first.is_none() && !fabric.is_aborted() {
                                            *first = Some(rank);
                                        }
                                        drop(first);
                                        fabric.abort();
                                        return Err(e);
                                    }
                                }
                                Ok(())
                            })
                        })
                        .collect();
                    handles
                        .into_iter()
                        .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                        .collect()
                });
                let first = first_failure.into_inner().unwrap_or_else(|p| p.into_inner());
                let mut results = results;
                if let Some(rank) = first {
                    return results.swap_remove(rank);
                }
                for r in results {
                    r?;
                }
            }
        }

        if let Some(&(rank, count)) = fabric.unconsumed().first() {
            return Err(FabricError::Unconsumed { rank, count }.into());
        }
        Ok(())
    }
}
