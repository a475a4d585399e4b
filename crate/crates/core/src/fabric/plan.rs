use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{FabricError, Rank};
use crate::autodiff::{Precision, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

/// How reduction order is chosen for each step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReductionMode {
    /// Ascending rank order, every step.
    #[default]
    Deterministic,
    /// A seeded non-identity permutation, redrawn every step.
    Drift,
}

/// Order and accumulator width of an all-reduce.
///
/// Contributions are combined as a left fold, `((x_a + x_b) + x_c) + ...`,
/// in `order`, regardless of the order messages arrive in.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReductionPlan {
    pub order: Vec<Rank>,
    pub precision: Precision,
}

impl ReductionPlan {
    pub fn ascending(subset: &[Rank]) -> Self {
        let mut order = subset.to_vec();
        order.sort_unstable();
        Self {
            order,
            precision: Precision::F64,
        }
    }

    /// A uniformly drawn permutation of `subset` other than ascending order
    /// (when `subset` has more than one member).
    pub fn permuted(subset: &[Rank], rng: &mut impl Rng) -> Self {
        let ascending = Self::ascending(subset);
        let mut order = ascending.order.clone();
        if order.len() > 1 {
            while order == ascending.order {
                order.shuffle(rng);
            }
        }
        Self {
            order,
            precision: Precision::F64,
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn validate(&self, subset: &[Rank]) -> Result<(), FabricError> {
        let mut a = self.order.clone();
        let mut b = subset.to_vec();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return Err(FabricError::InvalidPlan {
                order: self.order.clone(),
                subset: subset.to_vec(),
            });
        }
        Ok(())
    }

    /// Folds `value_of(rank)` over the plan order. All contributions must
    /// share a shape.
    pub fn fold<'t>(
        &self,
        op: ReduceOp,
        value_of: impl Fn(Rank) -> &'t Tensor,
    ) -> Result<Tensor, FabricError> {
        let p = self.precision;
        let first = value_of(self.order[0]);
        let mut acc = p.round_tensor(first.clone());
        for &r in &self.order[1..] {
            let x = value_of(r);
            if x.shape() != acc.shape() {
                return Err(FabricError::ShapeInconsistency {
                    op: "all_reduce",
                    rank: r,
                    detail: format!("{:?} vs {:?}", x.shape(), first.shape()),
                });
            }
            for (a, v) in acc.data_mut().iter_mut().zip(x.data()) {
                *a = p.round(*a + p.round(*v));
            }
        }
        if op == ReduceOp::Mean {
            let n = self.order.len() as f64;
            for a in acc.data_mut() {
                *a = p.round(*a / n);
            }
        }
        Ok(acc)
    }
}
