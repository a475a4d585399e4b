//! Collective operations.
//!
//! Each collective has a send half and a receive half on [`Endpoint`]; a
//! phase list places them in consecutive phases. [`ProcessGroup`] also
//! offers one-shot versions that run both halves on a fresh fabric.

use super::{
    Endpoint, FabricError, Phase, ProcessGroup, Rank, ReduceOp, ReductionPlan, Role, Tag,
};
use crate::autodiff::Tensor;

fn require_member(op: &'static str, rank: Rank, subset: &[Rank]) -> Result<(), FabricError> {
    if subset.contains(&rank) {
        Ok(())
    } else {
        Err(FabricError::NotMember { op, rank })
    }
}

impl Endpoint<'_> {
    /// Encoder rank → rank 0.
    pub fn gather_send(&self, tag: Tag, part: Tensor) -> Result<(), FabricError> {
        if self.role() != Role::Encoder {
            return Err(FabricError::NotMember {
                op: "gather_send",
                rank: self.rank,
            });
        }
        self.send(0, tag, part)
    }

    /// At rank 0: one part per encoder rank, in ascending rank order. Parts
    /// must be matrices with equal column counts.
    pub fn gather_recv(&self, tag: Tag) -> Result<Vec<Tensor>, FabricError> {
        if self.role() != Role::Aggregator {
            return Err(FabricError::NotMember {
                op: "gather_recv",
                rank: self.rank,
            });
        }
        let parts = self.recv_many(&self.encoder_ranks(), tag)?;
        let cols = parts[0].cols();
        for (i, p) in parts.iter().enumerate() {
            if p.rank() != 2 || p.cols() != cols {
                return Err(FabricError::ShapeInconsistency {
                    op: "gather",
                    rank: i + 1,
                    detail: format!("shape {:?}, expected {cols} columns", p.shape()),
                });
            }
        }
        Ok(parts)
    }

    /// At rank 0: chunk `i` goes to rank `i + 1`.
    pub fn scatter_send(&self, tag: Tag, chunks: Vec<Tensor>) -> Result<(), FabricError> {
        if self.role() != Role::Aggregator {
            return Err(FabricError::NotMember {
                op: "scatter_send",
                rank: self.rank,
            });
        }
        if chunks.len() != self.n_encoders {
            return Err(FabricError::ChunkCount {
                expected: self.n_encoders,
                got: chunks.len(),
            });
        }
        for (i, chunk) in chunks.into_iter().enumerate() {
            self.send(i + 1, tag, chunk)?;
        }
        Ok(())
    }

    pub fn scatter_recv(&self, tag: Tag) -> Result<Tensor, FabricError> {
        if self.role() != Role::Encoder {
            return Err(FabricError::NotMember {
                op: "scatter_recv",
                rank: self.rank,
            });
        }
        self.recv(0, tag)
    }

    /// Sends this rank's contribution to every other member of `subset`.
    pub fn all_reduce_send(&self, subset: &[Rank], tag: Tag, x: &Tensor) -> Result<(), FabricError> {
        require_member("all_reduce", self.rank, subset)?;
        for &peer in subset.iter().filter(|&&r| r != self.rank) {
            self.send(peer, tag, x.clone())?;
        }
        Ok(())
    }

    /// Receives the other members' contributions and folds all of them,
    /// including `own`, in plan order. Every member computes the same fold
    /// over the same values, so results are bitwise identical across ranks.
    pub fn all_reduce_recv(
        &self,
        subset: &[Rank],
        tag: Tag,
        own: &Tensor,
        plan: &ReductionPlan,
        op: ReduceOp,
    ) -> Result<Tensor, FabricError> {
        require_member("all_reduce", self.rank, subset)?;
        plan.validate(subset)?;
        let peers: Vec<Rank> = subset.iter().copied().filter(|&r| r != self.rank).collect();
        let received = self.recv_many(&peers, tag)?;
        let lookup = |r: Rank| -> &Tensor {
            if r == self.rank {
                own
            } else {
                &received[peers.iter().position(|&p| p == r).expect("peer")]
            }
        };
        plan.fold(op, lookup)
    }

    pub fn broadcast_send(&self, subset: &[Rank], tag: Tag, x: &Tensor) -> Result<(), FabricError> {
        require_member("broadcast", self.rank, subset)?;
        for &peer in subset.iter().filter(|&&r| r != self.rank) {
            self.send(peer, tag, x.clone())?;
        }
        Ok(())
    }

    pub fn broadcast_recv(&self, subset: &[Rank], src: Rank, tag: Tag) -> Result<Tensor, FabricError> {
        require_member("broadcast", self.rank, subset)?;
        require_member("broadcast", src, subset)?;
        self.recv(src, tag)
    }

    pub fn barrier_send(&self, tag: Tag) -> Result<(), FabricError> {
        for peer in (0..self.world_size()).filter(|&r| r != self.rank) {
            self.send(peer, tag, Tensor::zeros(&[0]))?;
        }
        Ok(())
    }

    pub fn barrier_recv(&self, tag: Tag) -> Result<(), FabricError> {
        let peers: Vec<Rank> = (0..self.world_size()).filter(|&r| r != self.rank).collect();
        self.recv_many(&peers, tag).map(|_| ())
    }
}

#[derive(Default)]
struct Slot {
    input: Option<Tensor>,
    output: Option<Tensor>,
    outputs: Vec<Tensor>,
}

fn slots(n: usize) -> Vec<Slot> {
    (0..n).map(|_| Slot::default()).collect()
}

const ONE_SHOT: fn(Phase) -> Tag = |phase| Tag::new(0, 0, phase);

impl ProcessGroup {
    /// `parts[i]` is contributed by rank `i + 1`; returns what rank 0 holds.
    pub fn gather(&self, parts: Vec<Tensor>) -> Result<Vec<Tensor>, FabricError> {
        if parts.len() != self.n_encoders() {
            return Err(FabricError::StateCount {
                expected: self.n_encoders(),
                got: parts.len(),
            });
        }
        let mut states = slots(self.world_size());
        for (i, p) in parts.into_iter().enumerate() {
            states[i + 1].input = Some(p);
        }
        let tag = ONE_SHOT(Phase::Features);
        let send = |s: &mut Slot, ep: &Endpoint<'_>| match s.input.take() {
            Some(p) => ep.gather_send(tag, p),
            None => Ok(()),
        };
        let recv = |s: &mut Slot, ep: &Endpoint<'_>| {
            if ep.rank() == 0 {
                s.outputs = ep.gather_recv(tag)?;
            }
            Ok(())
        };
        self.run::<_, FabricError>(&mut states, &[&send, &recv])?;
        Ok(std::mem::take(&mut states[0].outputs))
    }

    /// Rank 0 holds `chunks`; returns what ranks `1..=N` receive, in order.
    pub fn scatter(&self, chunks: Vec<Tensor>) -> Result<Vec<Tensor>, FabricError> {
        let tag = ONE_SHOT(Phase::FeatureGrads);
        let mut states = slots(self.world_size());
        states[0].outputs = chunks;
        let send = |s: &mut Slot, ep: &Endpoint<'_>| {
            if ep.rank() == 0 {
                ep.scatter_send(tag, std::mem::take(&mut s.outputs))?;
            }
            Ok(())
        };
        let recv = |s: &mut Slot, ep: &Endpoint<'_>| {
            if ep.rank() != 0 {
                s.output = Some(ep.scatter_recv(tag)?);
            }
            Ok(())
        };
        self.run::<_, FabricError>(&mut states, &[&send, &recv])?;
        Ok(states
            .into_iter()
            .skip(1)
            .map(|s| s.output.expect("scattered"))
            .collect())
    }

    /// `inputs[i]` belongs to `subset[i]`; returns each member's result in
    /// the same order.
    pub fn all_reduce(
        &self,
        subset: &[Rank],
        inputs: Vec<Tensor>,
        plan: &ReductionPlan,
        op: ReduceOp,
    ) -> Result<Vec<Tensor>, FabricError> {
        if inputs.len() != subset.len() {
            return Err(FabricError::StateCount {
                expected: subset.len(),
                got: inputs.len(),
            });
        }
        for &r in subset {
            self.role(r)?;
        }
        plan.validate(subset)?;
        let tag = ONE_SHOT(Phase::GradSync);
        let mut states = slots(self.world_size());
        for (&r, x) in subset.iter().zip(inputs) {
            states[r].input = Some(x);
        }
        let send = |s: &mut Slot, ep: &Endpoint<'_>| match &s.input {
            Some(x) => ep.all_reduce_send(subset, tag, x),
            None => Ok(()),
        };
        let recv = |s: &mut Slot, ep: &Endpoint<'_>| {
            if let Some(x) = &s.input {
                s.output = Some(ep.all_reduce_recv(subset, tag, x, plan, op)?);
            }
            Ok(())
        };
        self.run::<_, FabricError>(&mut states, &[&send, &recv])?;
        Ok(subset
            .iter()
            .map(|&r| states[r].output.take().expect("reduced"))
            .collect())
    }

    pub fn all_reduce_mean(
        &self,
        subset: &[Rank],
        inputs: Vec<Tensor>,
        plan: &ReductionPlan,
    ) -> Result<Vec<Tensor>, FabricError> {
        self.all_reduce(subset, inputs, plan, ReduceOp::Mean)
    }

    /// Copies `value` from `src` to every member of `subset`; returns each
    /// member's copy in `subset` order.
    pub fn broadcast(&self, subset: &[Rank], src: Rank, value: Tensor) -> Result<Vec<Tensor>, FabricError> {
        require_member("broadcast", src, subset)?;
        for &r in subset {
            self.role(r)?;
        }
        let tag = ONE_SHOT(Phase::Broadcast);
        let mut states = slots(self.world_size());
        states[src].input = Some(value);
        let send = |s: &mut Slot, ep: &Endpoint<'_>| match &s.input {
            Some(x) => ep.broadcast_send(subset, tag, x),
            None => Ok(()),
        };
        let recv = |s: &mut Slot, ep: &Endpoint<'_>| {
            if ep.rank() == src {
                s.output = s.input.take();
            } else if subset.contains(&ep.rank()) {
                s.output = Some(ep.broadcast_recv(subset, src, tag)?);
            }
            Ok(())
        };
        self.run::<_, FabricError>(&mut states, &[&send, &recv])?;
        Ok(subset
            .iter()
            .map(|&r| states[r].output.take().expect("broadcast"))
            .collect())
    }

    pub fn barrier(&self) -> Result<(), FabricError> {
        let tag = ONE_SHOT(Phase::Barrier);
        let mut states = slots(self.world_size());
        let send = |_: &mut Slot, ep: &Endpoint<'_>| ep.barrier_send(tag);
        let recv = |_: &mut Slot, ep: &Endpoint<'_>| ep.barrier_recv(tag);
        self.run::<_, FabricError>(&mut states, &[&send, &recv])
    }
}

#[cfg(test)]
mod tests {
    use super::super::SchedulerKind;
    use super::*;
    use std::time::Duration;

    fn groups(n: usize) -> [ProcessGroup; 2] {
        [
            ProcessGroup::spawn(n, SchedulerKind::Sequential).unwrap(),
            ProcessGroup::spawn(n, SchedulerKind::Threaded).unwrap(),
        ]
    }

    fn mat(rows: usize, cols: usize, start: f64) -> Tensor {
        Tensor::new(&[rows, cols], (0..rows * cols).map(|i| start + i as f64).collect()).unwrap()
    }

    #[test]
    fn spawn_sizes() {
        let g = ProcessGroup::spawn(5, SchedulerKind::Sequential).unwrap();
        assert_eq!(g.world_size(), 6);
        assert_eq!(g.encoder_ranks(), vec![1, 2, 3, 4, 5]);
        assert_eq!(g.role(0).unwrap(), Role::Aggregator);
        assert_eq!(g.role(5).unwrap(), Role::Encoder);
        assert!(g.role(6).is_err());
        assert_eq!(ProcessGroup::spawn(1, SchedulerKind::Sequential).unwrap().world_size(), 2);
        assert_eq!(
            ProcessGroup::spawn(0, SchedulerKind::Sequential).unwrap_err(),
            FabricError::ZeroEncoders
        );
    }

    #[test]
    fn gather_examples() {
        for g in groups(2) {
            let (a, b) = (mat(2, 3, 0.0), mat(2, 3, 10.0));
            assert_eq!(g.gather(vec![a.clone(), b.clone()]).unwrap(), vec![a, b]);
        }
        for g in groups(1) {
            let a = mat(4, 2, 1.0);
            assert_eq!(g.gather(vec![a.clone()]).unwrap(), vec![a]);
        }
        for g in groups(3) {
            let err = g
                .gather(vec![mat(2, 3, 0.0), mat(2, 3, 0.0), mat(2, 4, 0.0)])
                .unwrap_err();
            assert!(
                matches!(err, FabricError::ShapeInconsistency { rank: 3, .. }),
                "{err:?}"
            );
        }
    }

    #[test]
    fn scatter_examples() {
        for g in groups(2) {
            let (g1, g2) = (mat(2, 2, 0.0), mat(3, 2, 5.0));
            assert_eq!(g.scatter(vec![g1.clone(), g2.clone()]).unwrap(), vec![g1, g2]);
            let parts = vec![mat(1, 2, 0.0), mat(2, 2, 9.0)];
            let round_trip = g.scatter(g.gather(parts.clone()).unwrap()).unwrap();
            assert_eq!(round_trip, parts);
            let err = g.scatter(vec![mat(1, 1, 0.0); 3]).unwrap_err();
            assert_eq!(err, FabricError::ChunkCount { expected: 2, got: 3 });
        }
    }

    #[test]
    fn all_reduce_examples() {
        for g in groups(2) {
            let plan = ReductionPlan::ascending(&[1, 2]);
            let out = g
                .all_reduce_mean(
                    &[1, 2],
                    vec![Tensor::vector(vec![1.0, 3.0]), Tensor::vector(vec![3.0, 5.0])],
                    &plan,
                )
                .unwrap();
            assert_eq!(out, vec![Tensor::vector(vec![2.0, 4.0]); 2]);

            let x = Tensor::vector(vec![0.1, -7.25]);
            let out = g.all_reduce_mean(&[1, 2], vec![x.clone(), x.clone()], &plan).unwrap();
            assert!(out.iter().all(|t| t.bitwise_eq(&x)));

            let err = g
                .all_reduce_mean(&[1, 2], vec![Tensor::zeros(&[2]), Tensor::zeros(&[3])], &plan)
                .unwrap_err();
            assert!(matches!(err, FabricError::ShapeInconsistency { .. }));
        }
    }

    #[test]
    fn non_member_cannot_join_all_reduce() {
        let g = ProcessGroup::spawn(2, SchedulerKind::Sequential).unwrap();
        let mut states = vec![(); 3];
        let tag = Tag::new(0, 0, Phase::GradSync);
        let phase = |_: &mut (), ep: &Endpoint<'_>| {
            if ep.rank() == 0 {
                ep.all_reduce_send(&[1, 2], tag, &Tensor::scalar(1.0))?;
            }
            Ok(())
        };
        let err = g.run::<_, FabricError>(&mut states, &[&phase]).unwrap_err();
        assert_eq!(err, FabricError::NotMember { op: "all_reduce", rank: 0 });
    }

    #[test]
    fn broadcast_examples() {
        for g in groups(4) {
            let p = mat(3, 2, -1.5);
            let copies = g.broadcast(&[1, 2, 3, 4], 1, p.clone()).unwrap();
            assert!(copies.iter().all(|c| c.bitwise_eq(&p)));
            let solo = g.broadcast(&[3], 3, p.clone()).unwrap();
            assert_eq!(solo, vec![p.clone()]);
            assert!(matches!(
                g.broadcast(&[1, 2], 3, p),
                Err(FabricError::NotMember { .. })
            ));
        }
    }

    #[test]
    fn barrier_completes_and_names_absent_rank() {
        for g in groups(3) {
            g.barrier().unwrap();
        }
        for g in groups(3) {
            let g = g.with_timeout(Duration::from_millis(200));
            let tag = Tag::new(0, 1, Phase::Barrier);
            let mut states = vec![(); 4];
            let send = |_: &mut (), ep: &Endpoint<'_>| {
                if ep.rank() != 2 {
                    ep.barrier_send(tag)?;
                }
                Ok(())
            };
            let recv = |_: &mut (), ep: &Endpoint<'_>| {
                if ep.rank() != 2 {
                    ep.barrier_recv(tag)?;
                }
                Ok(())
            };
            let err = g.run::<_, FabricError>(&mut states, &[&send, &recv]).unwrap_err();
            match err {
                FabricError::MissingMessages { missing, .. } => assert_eq!(missing, vec![2]),
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn repeated_barriers_pair_fifo_by_tag() {
        for g in groups(2) {
            let mut states = vec![0u32; 3];
            let t1 = Tag::new(0, 1, Phase::Barrier);
            let t2 = Tag::new(0, 2, Phase::Barrier);
            let send = |_: &mut u32, ep: &Endpoint<'_>| {
                ep.barrier_send(t1)?;
                ep.barrier_send(t2)?;
                ep.barrier_send(t1)
            };
            let recv = |n: &mut u32, ep: &Endpoint<'_>| {
                ep.barrier_recv(t1)?;
                ep.barrier_recv(t2)?;
                ep.barrier_recv(t1)?;
                *n += 1;
                Ok(())
            };
            g.run::<_, FabricError>(&mut states, &[&send, &recv]).unwrap();
            assert_eq!(states, vec![1, 1, 1]);
        }
    }

    #[test]
    fn skipped_phase_is_a_tag_mismatch() {
        let g = ProcessGroup::spawn(1, SchedulerKind::Sequential).unwrap();
        let mut states = vec![(); 2];
        let send = |_: &mut (), ep: &Endpoint<'_>| {
            if ep.rank() == 1 {
                ep.send(0, Tag::new(0, 7, Phase::FeatureGrads), Tensor::scalar(1.0))?;
            }
            Ok(())
        };
        let recv = |_: &mut (), ep: &Endpoint<'_>| {
            if ep.rank() == 0 {
                ep.recv(1, Tag::new(0, 7, Phase::Features))?;
            }
            Ok(())
        };
        let err = g.run::<_, FabricError>(&mut states, &[&send, &recv]).unwrap_err();
        assert!(matches!(err, FabricError::TagMismatch { src: 1, .. }), "{err:?}");
    }

    #[test]
    fn unreceived_messages_fail_the_run() {
        for g in groups(1) {
            let mut states = vec![(); 2];
            let send = |_: &mut (), ep: &Endpoint<'_>| {
                if ep.rank() == 1 {
                    ep.send(0, Tag::new(0, 0, Phase::User(1)), Tensor::scalar(0.0))?;
                }
                Ok(())
            };
            let err = g.run::<_, FabricError>(&mut states, &[&send]).unwrap_err();
            assert_eq!(err, FabricError::Unconsumed { rank: 0, count: 1 });
        }
    }

    #[test]
    fn failure_on_one_rank_fails_the_whole_threaded_run_quickly() {
        let g = ProcessGroup::spawn(3, SchedulerKind::Threaded).unwrap();
        let mut states = vec![(); 4];
        let tag = Tag::new(0, 0, Phase::User(9));
        let phase = |_: &mut (), ep: &Endpoint<'_>| {
            if ep.rank() == 2 {
                return Err(FabricError::InvalidRank(99));
            }
            ep.recv(2, tag).map(|_| ())
        };
        let start = std::time::Instant::now();
        let err = g.run::<_, FabricError>(&mut states, &[&phase]).unwrap_err();
        assert_eq!(err, FabricError::InvalidRank(99));
        assert!(start.elapsed() < Duration::from_secs(5));
    }
}
