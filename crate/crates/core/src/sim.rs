//! Foundational types shared by every other module: device identities,
//! per-device action spaces, the neighbor topology and the run configuration.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Size of the global action index set `{0, .., 9}`.
pub const NUM_ACTIONS: usize = 10;

/// Largest subchannel count any device may request.
pub const MAX_ACTION: usize = NUM_ACTIONS - 1;

/// Index of a device in `0..N`, stable for the whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeviceId(pub usize);

impl DeviceId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Inclusive range `lo..=hi` of subchannel counts a device may request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    lo: usize,
    hi: usize,
}

impl ActionSpace {
    pub fn new(lo: usize, hi: usize) -> Result<Self> {
        if lo > hi || hi > MAX_ACTION {
            return Err(Error::InvalidConfig(format!(
                "action space [{lo}, {hi}] must satisfy lo <= hi <= {MAX_ACTION}"
            )));
        }
        Ok(Self { lo, hi })
    }

    /// The homogeneous space `{0, .., 9}`.
    pub const fn full() -> Self {
        Self { lo: 0, hi: MAX_ACTION }
    }

    pub fn lo(&self) -> usize {
        self.lo
    }

    pub fn hi(&self) -> usize {
        self.hi
    }

    /// Number of admissible actions `|A|`.
    pub fn len(&self) -> usize {
        self.hi - self.lo + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, action: usize) -> bool {
        (self.lo..=self.hi).contains(&action)
    }

    pub fn actions(&self) -> std::ops::RangeInclusive<usize> {
        self.lo..=self.hi
    }
}

impl Default for ActionSpace {
    fn default() -> Self {
        Self::full()
    }
}

/// Per-device neighbor sets `N(j)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    adjacency: Vec<Vec<DeviceId>>,
}

impl NeighborGraph {
    pub fn n_devices(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, device: DeviceId) -> &[DeviceId] {
        &self.adjacency[device.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (DeviceId, &[DeviceId])> {
        self.adjacency
            .iter()
            .enumerate()
            .map(|(j, ns)| (DeviceId(j), ns.as_slice()))
    }
}

/// Builds the cyclic ring topology: device `j` observes the `ceil(k/2)` devices
/// above it and the `floor(k/2)` devices below it, indices taken modulo `N`.
///
/// The seed is accepted for interface stability; the ring is fully determined
/// by `(n, k)`.
pub fn build_neighbor_graph(n: usize, k: usize, _seed: u64) -> Result<NeighborGraph> {
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one device".into()));
    }
    if k >= n {
        return Err(Error::InvalidConfig(format!(
            "neighbor count {k} must be below device count {n}"
        )));
    }
    let up = k.div_ceil(2);
    let down = k / 2;
    let adjacency = (0..n)
        .map(|j| {
            let mut ns: Vec<DeviceId> = (1..=up)
                .map(|d| (j + d) % n)
                .chain((1..=down).map(|d| (j + n - d) % n))
                .map(DeviceId)
                .collect();
            ns.sort_unstable();
            ns
        })
        .collect();
    Ok(NeighborGraph { adjacency })
}

/// How per-device action spaces are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ActionMode {
    /// Every device may request `0..=9`.
    #[default]
    Full,
    /// `lo` uniform in `{0,1,2}`, `hi` uniform in `{lo+3, .., 9}`.
    Heterogeneous,
}

pub fn sample_action_spaces(n: usize, mode: ActionMode, seed: u64) -> Vec<ActionSpace> {
    match mode {
        ActionMode::Full => vec![ActionSpace::full(); n],
        ActionMode::Heterogeneous => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xAC71_0E5B_ACE5_0000);
            (0..n)
                .map(|_| {
                    let lo = rng.gen_range(0..=2);
                    let hi = rng.gen_range(lo + 3..=MAX_ACTION);
                    ActionSpace { lo, hi }
                })
                .collect()
        }
    }
}

/// Learning algorithm driving every agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Algorithm {
    /// Mean-field Q-learning: the network sees the neighbors' mean action.
    #[default]
    #[serde(alias = "mf")]
    MeanField,
    /// Independent deep Q-learning baseline.
    #[serde(rename = "IDQL", alias = "idql")]
    Idql,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Algorithm::MeanField => f.write_str("MeanField"),
            Algorithm::Idql => f.write_str("IDQL"),
        }
    }
}

/// Every run parameter. Deserialized from JSON with these exact field names;
/// unknown keys are rejected and omitted keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_devices: usize,
    pub n_channels: usize,
    pub n_neighbors: usize,
    /// Mean-action smoothing factor, in `[0, 1)`.
    pub smoothing: f64,
    /// Reward discount, in `(0, 1)`. The default is deliberately small: the
    /// shared reward depends on the current round only, and bootstrapping
    /// through the noisy next-round estimate mostly adds variance.
    pub discount: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Adam step size. The default is small because the reward gap between
    /// adjacent requests is only `1 / n_channels`; larger steps leave
    /// optimizer jitter in the Q-values that swamps that gap.
    pub learning_rate: f64,
    /// Polyak rate for target networks, in `(0, 1]`.
    pub target_rate: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub iterations: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub action_mode: ActionMode,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_devices: 60,
            n_channels: 500,
            n_neighbors: 10,
            smoothing: 0.5,
            discount: 0.01,
            epsilon_start: 0.9,
            epsilon_end: 0.0,
            learning_rate: 3e-5,
            target_rate: 0.01,
            batch_size: 32,
            buffer_capacity: 1000,
            iterations: 5000,
            seed: 1,
            algorithm: Algorithm::MeanField,
            action_mode: ActionMode::Full,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_devices < 1 {
            return fail("n_devices must be >= 1".into());
        }
        if self.n_channels < 1 {
            return fail("n_channels must be >= 1".into());
        }
        if self.n_neighbors >= self.n_devices {
            return fail(format!(
                "n_neighbors ({}) must be at most n_devices - 1 ({})",
                self.n_neighbors,
                self.n_devices - 1
            ));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return fail(format!("smoothing {} not in [0, 1)", self.smoothing));
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return fail(format!("discount {} not in (0, 1)", self.discount));
        }
        for (name, eps) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&eps) {
                return fail(format!("{name} {eps} not in [0, 1]"));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.target_rate > 0.0 && self.target_rate <= 1.0) {
            return fail(format!("target_rate {} not in (0, 1]", self.target_rate));
        }
        if self.batch_size < 1 {
            return fail("batch_size must be >= 1".into());
        }
        if self.buffer_capacity < self.batch_size {
            return fail(format!(
                "buffer_capacity ({}) must hold at least one batch ({})",
                self.buffer_capacity, self.batch_size
            ));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let config: SimConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ring_small() {
        let g = build_neighbor_graph(5, 2, 0).unwrap();
        assert_eq!(g.neighbors(DeviceId(0)), &[DeviceId(1), DeviceId(4)]);
        assert_eq!(g.neighbors(DeviceId(2)), &[DeviceId(1), DeviceId(3)]);
    }

    #[test]
    fn ring_odd_k_goes_up_first() {
        let g = build_neighbor_graph(7, 3, 0).unwrap();
        assert_eq!(g.neighbors(DeviceId(0)), &[DeviceId(1), DeviceId(2), DeviceId(6)]);
    }

    #[test]
    fn ring_no_neighbors() {
        let g = build_neighbor_graph(5, 0, 0).unwrap();
        assert!(g.iter().all(|(_, ns)| ns.is_empty()));
    }

    #[test]
    fn ring_complete() {
        let g = build_neighbor_graph(300, 299, 0).unwrap();
        for (j, ns) in g.iter() {
            assert_eq!(ns.len(), 299);
            assert!(!ns.contains(&j));
        }
    }

    #[test]
    fn ring_rejects_k_at_least_n() {
        assert!(matches!(build_neighbor_graph(5, 5, 0), Err(Error::InvalidConfig(_))));
        assert!(build_neighbor_graph(0, 0, 0).is_err());
    }

    #[test]
    fn full_spaces() {
        let spaces = sample_action_spaces(3, ActionMode::Full, 42);
        assert_eq!(spaces, vec![ActionSpace::new(0, 9).unwrap(); 3]);
        let spaces = sample_action_spaces(1000, ActionMode::Full, 0);
        assert_eq!(spaces.len(), 1000);
        assert!(spaces.iter().all(|s| s.len() == 10));
    }

    #[test]
    fn heterogeneous_single() {
        for seed in 0..50 {
            let s = sample_action_spaces(1, ActionMode::Heterogeneous, seed)[0];
            assert!(s.lo() <= 2);
            assert!(s.hi() - s.lo() >= 3);
            assert!(s.hi() <= 9);
        }
    }

    #[test]
    fn heterogeneous_is_seeded() {
        let a = sample_action_spaces(64, ActionMode::Heterogeneous, 3);
        let b = sample_action_spaces(64, ActionMode::Heterogeneous, 3);
        let c = sample_action_spaces(64, ActionMode::Heterogeneous, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn action_space_rejects_bad_bounds() {
        assert!(ActionSpace::new(4, 3).is_err());
        assert!(ActionSpace::new(0, 10).is_err());
    }

    #[test]
    fn config_json_roundtrip_and_unknown_keys() {
        let cfg = SimConfig {
            algorithm: Algorithm::Idql,
            ..SimConfig::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"IDQL\""));
        assert_eq!(SimConfig::from_json_str(&text).unwrap(), cfg);

        let err = SimConfig::from_json_str(r#"{"n_devices": 5, "bogus": 1}"#);
        assert!(err.is_err());

        let partial = SimConfig::from_json_str(r#"{"n_devices": 5, "n_neighbors": 2}"#).unwrap();
        assert_eq!(partial.n_devices, 5);
        assert_eq!(partial.n_channels, 500);
    }

    #[test]
    fn config_validation() {
        let ok = SimConfig::default();
        assert!(ok.validate().is_ok());
        let bad = [
            SimConfig {
                n_devices: 0,
                n_neighbors: 0,
                ..ok.clone()
            },
            SimConfig {
                n_channels: 0,
                ..ok.clone()
            },
            SimConfig {
                n_neighbors: 60,
                ..ok.clone()
            },
            SimConfig {
                smoothing: 1.0,
                ..ok.clone()
            },
            SimConfig {
                discount: 1.0,
                ..ok.clone()
            },
            SimConfig {
                target_rate: 0.0,
                ..ok.clone()
            },
            SimConfig {
                epsilon_start: 1.5,
                ..ok.clone()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))), "{cfg:?}");
        }
    }

    proptest! {
        #[test]
        fn ring_is_regular_and_deterministic(n in 1usize..60, k_frac in 0.0f64..1.0) {
            let k = ((n as f64) * k_frac) as usize;
            let k = k.min(n - 1);
            let g = build_neighbor_graph(n, k, 0).unwrap();
            prop_assert_eq!(&g, &build_neighbor_graph(n, k, 99).unwrap());
            for (j, ns) in g.iter() {
                prop_assert_eq!(ns.len(), k);
                prop_assert!(!ns.contains(&j));
                prop_assert!(ns.iter().all(|i| i.0 < n));
            }
        }

        #[test]
        fn ring_is_symmetric_for_even_k(n in 1usize..60, half in 0usize..30) {
            let k = (2 * half).min(n - 1);
            // odd k is only symmetric when the ring is complete
            prop_assume!(k % 2 == 0 || k == n - 1);
            let g = build_neighbor_graph(n, k, 0).unwrap();
            for (j, ns) in g.iter() {
                for &i in ns {
                    prop_assert!(g.neighbors(i).contains(&j));
                }
            }
        }

        #[test]
        fn sampled_spaces_are_bounded(n in 1usize..200, seed: u64) {
            for s in sample_action_spaces(n, ActionMode::Heterogeneous, seed) {
                prop_assert!(s.lo() <= s.hi() && s.hi() <= MAX_ACTION);
            }
        }
    }
}
