//! Synchronous negotiation round: the access point collects the joint
//! bandwidth request, scores it with the shared global reward and, once
//! negotiation ends, packs the requests into the data channel.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::sim::{ActionSpace, NUM_ACTIONS};

/// One request per device, in device-index order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointAction {
    requests: Vec<usize>,
}

impl JointAction {
    /// Checks every request against the matching device's action space.
    pub fn new(requests: Vec<usize>, spaces: &[ActionSpace]) -> Result<Self> {
        if requests.len() != spaces.len() {
            return Err(Error::Shape(format!(
                "{} requests for {} devices",
                requests.len(),
                spaces.len()
            )));
        }
        for (&r, space) in requests.iter().zip(spaces) {
            if !space.contains(r) {
                return Err(Error::InvalidAction {
                    action: r,
                    max: space.hi(),
                });
            }
        }
        Ok(Self { requests })
    }

    /// Builds a joint action without per-device bounds; every entry must
    /// still lie in the global index set.
    pub fn unchecked(requests: Vec<usize>) -> Self {
        debug_assert!(requests.iter().all(|&r| r < NUM_ACTIONS));
        Self { requests }
    }

    pub fn requests(&self) -> &[usize] {
        &self.requests
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn total(&self) -> usize {
        self.requests.iter().sum()
    }
}

/// A device's local view: one-hot of its own previous request, all-zero
/// before it has acted.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Observation {
    prev_action: Option<usize>,
}

impl Observation {
    pub fn initial() -> Self {
        Self { prev_action: None }
    }

    pub fn from_action(action: usize) -> Self {
        assert!(action < NUM_ACTIONS, "action {action} out of range");
        Self {
            prev_action: Some(action),
        }
    }

    pub fn prev_action(&self) -> Option<usize> {
        self.prev_action
    }

    pub fn one_hot(&self) -> [f64; NUM_ACTIONS] {
        let mut v = [0.0; NUM_ACTIONS];
        if let Some(a) = self.prev_action {
            v[a] = 1.0;
        }
        v
    }

    /// Writes the one-hot encoding into the first `NUM_ACTIONS` slots of `out`.
    pub fn write_into(&self, out: &mut [f64]) {
        out[..NUM_ACTIONS].copy_from_slice(&self.one_hot());
    }
}

/// Contiguous subchannel ranges handed out by the access point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    assignment: Vec<Range<usize>>,
}

impl Allocation {
    pub fn range(&self, device: usize) -> Range<usize> {
        self.assignment[device].clone()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.assignment
    }

    pub fn total_assigned(&self) -> usize {
        self.assignment.iter().map(|r| r.len()).sum()
    }
}

/// Outcome of the final channel division.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AllocationOutcome {
    Allocated(Allocation),
    /// The requests exceed the channel; nothing is allocated.
    Infeasible {
        requested: usize,
        capacity: usize,
    },
}

/// Shared reward: `-(1 - S/C)` when `S <= C`, `-1` otherwise.
pub fn global_reward(requests: &JointAction, n_channels: usize) -> f64 {
    reward_for_total(requests.total(), n_channels)
}

pub fn reward_for_total(total: usize, n_channels: usize) -> f64 {
    if total <= n_channels {
        -(1.0 - total as f64 / n_channels as f64)
    } else {
        -1.0
    }
}

/// Result of one synchronous round.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub observations: Vec<Observation>,
}

/// Scores a complete joint action. Every device receives the same reward and
/// observes its own request.
pub fn step(requests: &JointAction, n_channels: usize) -> StepOutcome {
    StepOutcome {
        reward: global_reward(requests, n_channels),
        observations: requests
            .requests()
            .iter()
            .map(|&a| Observation::from_action(a))
            .collect(),
    }
}

/// Packs requests into consecutive ranges in device order starting at
/// subchannel 0, or reports the round infeasible.
pub fn allocate_channels(requests: &JointAction, n_channels: usize) -> AllocationOutcome {
    let requested = requests.total();
    if requested > n_channels {
        return AllocationOutcome::Infeasible {
            requested,
            capacity: n_channels,
        };
    }
    let mut next = 0;
    let assignment = requests
        .requests()
        .iter()
        .map(|&r| {
            let range = next..next + r;
            next += r;
            range
        })
        .collect();
    AllocationOutcome::Allocated(Allocation { assignment })
}

/// Channel utilization of a round: `(S/C, true)` if feasible, else `(0, false)`.
pub fn utilization(requests: &JointAction, n_channels: usize) -> (f64, bool) {
    utilization_for_total(requests.total(), n_channels)
}

pub fn utilization_for_total(total: usize, n_channels: usize) -> (f64, bool) {
    if total <= n_channels {
        (total as f64 / n_channels as f64, true)
    } else {
        (0.0, false)
    }
}
