//! Per-device learners: annealed epsilon-greedy acting, a FIFO replay buffer,
//! clipped double-Q targets and the training step that ties them together.
//!
//! Both algorithms share the same machinery. A mean-field agent feeds its
//! network `observation ++ smoothed neighbor mean` (20 inputs); an IDQL agent
//! feeds the observation alone (10 inputs).
//!
//! Agent networks run in single precision ([`Scalar`]); rewards, targets and
//! losses are accumulated in `f64`.

use std::collections::VecDeque;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::meanfield::{soft_update_mean, MeanAction};
use crate::nn::{BatchActivations, Gradients, OptimizerState, QNetworkPair, Real, HIDDEN};
use crate::sim::{ActionSpace, Algorithm, DeviceId, NUM_ACTIONS};

/// One stored transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Experience {
    pub obs: Observation,
    /// Smoothed neighbor mean after folding in the neighbors' requests of
    /// this round.
    pub mean: MeanAction,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Observation,
    /// Smoothed neighbor mean one round later; the successor input.
    pub next_mean: MeanAction,
}

/// Bounded FIFO of experiences.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<Experience>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer needs a positive capacity");
        Self {
            items: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn push(&mut self, exp: Experience) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(exp);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&Experience> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.items.iter()
    }

    /// `batch_size` distinct experiences drawn uniformly, or `None` when the
    /// buffer holds fewer.
    pub fn sample<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Option<Vec<Experience>> {
        if batch_size == 0 || self.items.len() < batch_size {
            return None;
        }
        Some(
            index::sample(rng, self.items.len(), batch_size)
                .into_iter()
                .map(|i| self.items[i])
                .collect(),
        )
    }
}

/// Scalar type of every agent network.
pub type Scalar = f64;

/// Width of the network input for `variant`.
pub fn input_dim(variant: Algorithm) -> usize {
    match variant {
        Algorithm::MeanField => 2 * NUM_ACTIONS,
        Algorithm::Idql => NUM_ACTIONS,
    }
}

/// Layer widths of every Q-network used by `variant`.
pub fn network_dims(variant: Algorithm) -> [usize; 4] {
    [input_dim(variant), HIDDEN, HIDDEN, NUM_ACTIONS]
}

/// Appends the network input for `(obs, mean)` to `out`.
pub fn push_input(variant: Algorithm, obs: &Observation, mean: &MeanAction, out: &mut Vec<Scalar>) {
    out.extend(obs.one_hot().iter().map(|&x| Scalar::cast(x)));
    if variant == Algorithm::MeanField {
        out.extend(mean.probs().iter().map(|&p| Scalar::cast(p)));
    }
}

/// Lowest-index argmax of `q` restricted to `space`.
pub fn greedy_action<T: PartialOrd>(q: &[T], space: ActionSpace) -> usize {
    let mut best = space.lo();
    for a in space.actions() {
        if q[a] > q[best] {
            best = a;
        }
    }
    best
}

/// Annealed epsilon-greedy distribution over the global action indices:
/// `1 - eps + eps/|A|` on the valid argmax, `eps/|A|` on other valid
/// actions, zero outside the space.
pub fn policy_probs(q: &[f64], epsilon: f64, space: ActionSpace) -> [f64; NUM_ACTIONS] {
    let mut probs = [0.0; NUM_ACTIONS];
    let share = epsilon / space.len() as f64;
    for a in space.actions() {
        probs[a] = share;
    }
    probs[greedy_action(q, space)] += 1.0 - epsilon;
    probs
}

/// Categorical draw from `probs`.
pub fn sample_action<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (a, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = a;
            if u < acc {
                return a;
            }
        }
    }
    // Rounding left the cumulative sum just short of `u`.
    last
}

/// Components of a clipped double-Q target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdTarget {
    /// `reward + gamma * bootstrap`.
    pub value: f64,
    /// Greedy next action chosen by the first evaluation network.
    pub next_action: usize,
    pub target_1: f64,
    pub target_2: f64,
    /// `min(target_1, target_2)`.
    pub bootstrap: f64,
}

/// Full breakdown of [`td_target`].
pub fn td_target_detail(
    exp: &Experience,
    nets: &QNetworkPair<Scalar>,
    gamma: f64,
    variant: Algorithm,
    space: ActionSpace,
) -> Result<TdTarget> {
    let mut input = Vec::with_capacity(input_dim(variant));
    push_input(variant, &exp.next_obs, &exp.next_mean, &mut input);
    let next_action = greedy_action(&nets.eval_1.forward(&input)?, space);
    let target_1 = nets.target_1.forward(&input)?[next_action].into_f64();
    let target_2 = nets.target_2.forward(&input)?[next_action].into_f64();
    let bootstrap = target_1.min(target_2);
    Ok(TdTarget {
        value: exp.reward + gamma * bootstrap,
        next_action,
        target_1,
        target_2,
        bootstrap,
    })
}

/// `reward + gamma * min(Q'_1(s', a*), Q'_2(s', a*))` with `a*` the greedy
/// valid action of the first evaluation network at the next input.
pub fn td_target(
    exp: &Experience,
    nets: &QNetworkPair<Scalar>,
    gamma: f64,
    variant: Algorithm,
    space: ActionSpace,
) -> Result<f64> {
    td_target_detail(exp, nets, gamma, variant, space).map(|t| t.value)
}

/// Batch loss and the gradients of both evaluation networks.
#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub loss: f64,
    pub grads_1: Gradients<Scalar>,
    pub grads_2: Gradients<Scalar>,
}

/// Reusable buffers for [`loss_and_grads_with`].
#[derive(Debug, Default, Clone)]
pub struct TrainScratch {
    inputs: Vec<Scalar>,
    next_inputs: Vec<Scalar>,
    targets: Vec<f64>,
    d_out: Vec<Scalar>,
    acts: BatchActivations<Scalar>,
}

/// `mean_b sum_i (y_b - Q_i(s_b)[a_b])^2` with `y_b` held constant.
pub fn loss_and_grads(batch: &[Experience], agent: &Agent, gamma: f64) -> Result<LossAndGrads> {
    let mut grads_1 = agent.nets.eval_1.zero_gradients();
    let mut grads_2 = agent.nets.eval_2.zero_gradients();
    let loss = loss_and_grads_with(
        batch,
        &agent.nets,
        agent.variant,
        agent.space,
        gamma,
        &mut TrainScratch::default(),
        &mut grads_1,
        &mut grads_2,
    )?;
    Ok(LossAndGrads { loss, grads_1, grads_2 })
}

/// Allocation-reusing form of [`loss_and_grads`]; overwrites both gradient
/// buffers and returns the loss.
#[allow(clippy::too_many_arguments)]
pub fn loss_and_grads_with(
    batch: &[Experience],
    nets: &QNetworkPair<Scalar>,
    variant: Algorithm,
    space: ActionSpace,
    gamma: f64,
    scratch: &mut TrainScratch,
    grads_1: &mut Gradients<Scalar>,
    grads_2: &mut Gradients<Scalar>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidCall("loss over an empty batch".into()));
    }
    let n = batch.len();
    let TrainScratch {
        inputs,
        next_inputs,
        targets,
        d_out,
        acts,
    } = scratch;

    inputs.clear();
    next_inputs.clear();
    for exp in batch {
        push_input(variant, &exp.obs, &exp.mean, inputs);
        push_input(variant, &exp.next_obs, &exp.next_mean, next_inputs);
    }

    // Targets: greedy next action from eval_1, clipped by the two target nets.
    targets.clear();
    nets.eval_1.forward_batch(next_inputs, n, acts)?;
    let next_actions: Vec<usize> = (0..n).map(|b| greedy_action(acts.output(b), space)).collect();
    targets.extend(batch.iter().map(|e| e.reward));
    nets.target_1.forward_batch(next_inputs, n, acts)?;
    let boot_1: Vec<f64> = (0..n).map(|b| acts.output(b)[next_actions[b]].into_f64()).collect();
    nets.target_2.forward_batch(next_inputs, n, acts)?;
    for (b, y) in targets.iter_mut().enumerate() {
        *y += gamma * boot_1[b].min(acts.output(b)[next_actions[b]].into_f64());
    }

    let mut loss = 0.0;
    let scale = 2.0 / n as f64;
    for (net, grads) in [(&nets.eval_1, grads_1), (&nets.eval_2, grads_2)] {
        net.forward_batch(inputs, n, acts)?;
        d_out.clear();
        d_out.resize(n * NUM_ACTIONS, 0.0);
        for (b, exp) in batch.iter().enumerate() {
            let err = targets[b] - acts.output(b)[exp.action].into_f64();
            loss += err * err;
            d_out[b * NUM_ACTIONS + exp.action] = Scalar::cast(-scale * err);
        }
        grads.fill_zero();
        net.backward_batch(acts, d_out, grads)?;
    }
    Ok(loss / n as f64)
}

/// Mixes a run seed with a device index and stream tag (splitmix64 finalizer).
pub fn derive_seed(seed: u64, device: usize, stream: u64) -> u64 {
    let mut z = seed ^ (device as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_EVAL_1: u64 = 1;
const STREAM_EVAL_2: u64 = 2;
const STREAM_AGENT: u64 = 3;

/// Hyperparameters an agent needs at construction time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentParams {
    pub variant: Algorithm,
    pub learning_rate: f64,
    pub buffer_capacity: usize,
    pub seed: u64,
}

/// A round whose successor input is not known yet.
#[derive(Debug, Clone, Copy)]
struct Pending {
    obs: Observation,
    mean: MeanAction,
    action: usize,
    reward: f64,
}

/// One learning device.
#[derive(Debug, Clone)]
pub struct Agent {
    pub id: DeviceId,
    pub space: ActionSpace,
    pub variant: Algorithm,
    pub nets: QNetworkPair<Scalar>,
    pub buffer: ReplayBuffer,
    /// Smoothed neighbor mean the next action conditions on.
    pub mean_iterate: MeanAction,
    pub obs: Observation,
    /// Last round's transition, completed once the following round's mean is known.
    pending: Option<Pending>,
    opt_1: OptimizerState<Scalar>,
    opt_2: OptimizerState<Scalar>,
    rng: ChaCha8Rng,
    scratch: TrainScratch,
    grads_1: Gradients<Scalar>,
    grads_2: Gradients<Scalar>,
    input: Vec<Scalar>,
}

impl Agent {
    /// Networks and the agent's random stream are seeded from
    /// `(params.seed, id)`, so agents are independent of construction order.
    pub fn new(id: DeviceId, space: ActionSpace, params: AgentParams) -> Result<Self> {
        let dims = network_dims(params.variant);
        let nets = QNetworkPair::new(
            &dims,
            derive_seed(params.seed, id.0, STREAM_EVAL_1),
            derive_seed(params.seed, id.0, STREAM_EVAL_2),
        )?;
        Ok(Self {
            id,
            space,
            variant: params.variant,
            opt_1: OptimizerState::new(&nets.eval_1, params.learning_rate),
            opt_2: OptimizerState::new(&nets.eval_2, params.learning_rate),
            grads_1: nets.eval_1.zero_gradients(),
            grads_2: nets.eval_2.zero_gradients(),
            nets,
            buffer: ReplayBuffer::new(params.buffer_capacity),
            mean_iterate: MeanAction::uniform(),
            obs: Observation::initial(),
            pending: None,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(params.seed, id.0, STREAM_AGENT)),
            scratch: TrainScratch::default(),
            input: Vec::with_capacity(2 * NUM_ACTIONS),
        })
    }

    /// Elementwise minimum of the two evaluation networks at the current input.
    pub fn q_values(&mut self) -> Result<[f64; NUM_ACTIONS]> {
        self.input.clear();
        push_input(self.variant, &self.obs, &self.mean_iterate, &mut self.input);
        let q1 = self.nets.eval_1.forward(&self.input)?;
        let q2 = self.nets.eval_2.forward(&self.input)?;
        let mut q = [0.0; NUM_ACTIONS];
        for (a, v) in q.iter_mut().enumerate() {
            *v = q1[a].min(q2[a]).into_f64();
        }
        Ok(q)
    }

    /// Action distribution at exploration rate `epsilon`.
    pub fn action_probs(&mut self, epsilon: f64) -> Result<[f64; NUM_ACTIONS]> {
        let q = self.q_values()?;
        Ok(policy_probs(&q, epsilon, self.space))
    }

    /// Samples this round's request.
    pub fn act(&mut self, epsilon: f64) -> Result<usize> {
        let probs = self.action_probs(epsilon)?;
        Ok(sample_action(&probs, &mut self.rng))
    }

    /// Closes a round: smooths the observed neighbor mean into the iterate
    /// and advances the observation.
    ///
    /// The stored transition pairs this round's request with the iterate
    /// that already includes the neighbors' requests of the same round, so
    /// the value estimate can attribute reward to what the neighbors did.
    /// Its successor input needs the next round's iterate, so each
    /// transition enters the buffer one round late.
    pub fn record_round(&mut self, action: usize, reward: f64, observed_mean: &MeanAction, alpha: f64) -> Result<()> {
        let mean = soft_update_mean(&self.mean_iterate, observed_mean, alpha)?;
        if let Some(prev) = self.pending.take() {
            self.buffer.push(Experience {
                obs: prev.obs,
                mean: prev.mean,
                action: prev.action,
                reward: prev.reward,
                next_obs: self.obs,
                next_mean: mean,
            });
        }
        self.pending = Some(Pending {
            obs: self.obs,
            mean,
            action,
            reward,
        });
        self.obs = Observation::from_action(action);
        self.mean_iterate = mean;
        Ok(())
    }

    /// One optimizer step on both evaluation networks from a uniformly
    /// sampled batch, followed by Polyak updates of both targets. Returns
    /// `None` without touching anything when the buffer is smaller than a
    /// batch.
    pub fn train_step(&mut self, gamma: f64, tau: f64, batch_size: usize) -> Result<Option<f64>> {
        let Some(batch) = self.buffer.sample(batch_size, &mut self.rng) else {
            return Ok(None);
        };
        let loss = loss_and_grads_with(
            &batch,
            &self.nets,
            self.variant,
            self.space,
            gamma,
            &mut self.scratch,
            &mut self.grads_1,
            &mut self.grads_2,
        )?;
        if !loss.is_finite() {
            return Err(Error::InvalidCall(format!("non-finite loss {loss}")));
        }
        self.opt_1.apply(&mut self.nets.eval_1, &self.grads_1)?;
        self.opt_2.apply(&mut self.nets.eval_2, &self.grads_2)?;
        self.nets.soft_update_targets(tau)?;
        if !self.nets.is_finite() {
            return Err(Error::InvalidCall("non-finite network parameters".into()));
        }
        Ok(Some(loss))
    }
}
