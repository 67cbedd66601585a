//! Mean-field view of a device's neighbors: the empirical distribution of
//! their requests and its exponentially smoothed iterate.

use crate::error::{Error, Result};
use crate::sim::NUM_ACTIONS;

/// Distribution over the global action indices `{0, .., 9}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanAction {
    probs: [f64; NUM_ACTIONS],
}

impl MeanAction {
    /// Uniform distribution; the value for a device without neighbors and the
    /// initial smoothed iterate.
    pub fn uniform() -> Self {
        Self {
            probs: [1.0 / NUM_ACTIONS as f64; NUM_ACTIONS],
        }
    }

    pub fn one_hot(action: usize) -> Result<Self> {
        check_action(action)?;
        let mut probs = [0.0; NUM_ACTIONS];
        probs[action] = 1.0;
        Ok(Self { probs })
    }

    /// Accepts any non-negative vector summing to one within `1e-9`.
    pub fn from_probs(probs: [f64; NUM_ACTIONS]) -> Result<Self> {
        let m = Self { probs };
        if !m.is_on_simplex(1e-9) {
            return Err(Error::InvalidCall(format!("{probs:?} is not a distribution")));
        }
        Ok(m)
    }

    pub fn probs(&self) -> &[f64; NUM_ACTIONS] {
        &self.probs
    }

    pub fn is_on_simplex(&self, tol: f64) -> bool {
        self.probs.iter().all(|&p| p >= 0.0 && p.is_finite()) && (self.probs.iter().sum::<f64>() - 1.0).abs() <= tol
    }

    /// Expected request `sum_i i * p_i`, in subchannels.
    pub fn mean_request(&self) -> f64 {
        mean_requested_bandwidth(self)
    }
}

impl Default for MeanAction {
    fn default() -> Self {
        Self::uniform()
    }
}

fn check_action(action: usize) -> Result<()> {
    if action >= NUM_ACTIONS {
        return Err(Error::InvalidAction {
            action,
            max: NUM_ACTIONS - 1,
        });
    }
    Ok(())
}

/// Mean of the one-hot encodings of `neighbor_actions`; uniform when empty.
pub fn empirical_mean_action(neighbor_actions: &[usize]) -> Result<MeanAction> {
    if neighbor_actions.is_empty() {
        return Ok(MeanAction::uniform());
    }
    let mut counts = [0usize; NUM_ACTIONS];
    for &a in neighbor_actions {
        check_action(a)?;
        counts[a] += 1;
    }
    let n = neighbor_actions.len() as f64;
    Ok(MeanAction {
        probs: counts.map(|c| c as f64 / n),
    })
}

/// `alpha * prev + (1 - alpha) * observed`, elementwise.
pub fn soft_update_mean(prev: &MeanAction, observed: &MeanAction, alpha: f64) -> Result<MeanAction> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("smoothing {alpha} not in [0, 1)")));
    }
    if alpha == 0.0 {
        return Ok(*observed);
    }
    let mut probs = [0.0; NUM_ACTIONS];
    for (p, (a, b)) in probs.iter_mut().zip(prev.probs.iter().zip(&observed.probs)) {
        *p = alpha * a + (1.0 - alpha) * b;
    }
    Ok(MeanAction { probs })
}

pub fn mean_requested_bandwidth(m: &MeanAction) -> f64 {
    m.probs.iter().enumerate().map(|(i, p)| i as f64 * p).sum()
}
