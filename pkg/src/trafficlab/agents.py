"""The signal controllers: deep Q-learning, advantage actor-critic, clipped
surrogate policy optimization, curvature-preconditioned actor-critic, and a
fixed-time baseline, all behind one act/update interface.

Policy nets emit two logits (keep, switch); critics emit one value. A
tabular Q-learner is kept alongside the neural variant so the update rule
can be checked against exact dynamic programming on tiny problems.
"""

from __future__ import annotations

import json
import math
import struct
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np

from trafficlab.env import PHASE_TIME_SLOT
from trafficlab.nn import (
    AdamOptimizer,
    CheckpointError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    DivergenceError,
    Gradients,
    KfacStats,
    Mlp,
    make_optimizer,
)

ALGORITHMS = ("dql", "a2c", "ppo", "acktr", "fixed_time")

_AGENT_MAGIC = b"TLAG"
_AGENT_FORMAT_VERSION = 1

N_ACTIONS = 2


class ObservationShapeError(ValueError):
    """Observation length does not match what the agent was built for."""


class AlgorithmMismatchError(CheckpointError):
    """Checkpoint holds a different algorithm than the caller expected."""


@dataclass
class AgentConfig:
    """Hyperparameters for every controller; unused fields are ignored by
    algorithms that do not need them."""

    algorithm: str = "ppo"
    gamma: float = 0.95
    actor_lr: float = 3e-4
    critic_lr: float = 1e-3
    q_lr: float = 5e-4
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    exploration_fraction: float = 0.2
    train_steps_budget: int = 100_000
    clip_epsilon: float = 0.2
    rollout_length: int = 256
    ppo_epochs: int = 4
    ppo_minibatch: int = 64
    critic_epochs: int = 1
    center_advantages: bool = False
    # uniform mixing into training-time action sampling; decays linearly
    # from the init value to the final one over exploration_fraction of the
    # training budget (same shape as the q-learning epsilon schedule)
    explore_floor: float = 0.0
    explore_floor_init: float | None = None
    replay_capacity: int = 50_000
    batch_size: int = 64
    warmup: int = 1_000
    target_sync_period: int = 500
    fixed_time_green: float = 30.0
    entropy_coef: float = 0.01
    hidden_sizes: list[int] = field(default_factory=lambda: [64, 64])
    optimizer: str = "adam"
    kfac_damping: float = 1e-2
    kfac_decay: float = 0.95
    kfac_augment_bias: bool = False
    trust_region_radius: float = 1.0
    # curvature-metric step budget: the applied step is scaled so that
    # approximately step^T F step <= 2 * kl_budget (None disables)
    kl_budget: float | None = None
    phase_time_scale: float = 60.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        for name in ("actor_lr", "critic_lr", "q_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.rollout_length <= 0 or self.batch_size <= 0:
            raise ValueError("rollout_length and batch_size must be positive")


@dataclass(slots=True)
class Transition:
    obs: np.ndarray
    action: int
    reward: float
    next_obs: np.ndarray
    done: bool
    log_prob: float | None = None


def compute_advantage(r_t: float, v_next: float, v_now: float,
                      gamma: float, done: bool) -> float:
    """One-step advantage: r + gamma * V(s') - V(s), no bootstrap at done."""
    return r_t + (0.0 if done else gamma * v_next) - v_now


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _stack(transitions: list[Transition]):
    obs = np.stack([t.obs for t in transitions])
    actions = np.array([t.action for t in transitions], dtype=np.intp)
    rewards = np.array([t.reward for t in transitions])
    next_obs = np.stack([t.next_obs for t in transitions])
    dones = np.array([1.0 if t.done else 0.0 for t in transitions])
    return obs, actions, rewards, next_obs, dones


class Agent:
    """Common act/update surface. ``needs_rollout`` tells a driver how many
    transitions to hand to update() at a time (0 = never updates)."""

    needs_rollout = 0

    def __init__(self, config: AgentConfig, obs_dim: int):
        self.config = config
        self.obs_dim = obs_dim
        self.train_steps = 0
        self.last_logprob: float | None = None
        self._rng = np.random.default_rng(config.seed)
        scale = np.ones(obs_dim)
        if obs_dim > PHASE_TIME_SLOT:
            scale[PHASE_TIME_SLOT] = 1.0 / config.phase_time_scale
        self._obs_scale = scale

    @property
    def algorithm(self) -> str:
        return self.config.algorithm

    def _check_obs(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape != (self.obs_dim,):
            raise ObservationShapeError(
                f"expected observation of length {self.obs_dim}, got {obs.shape}")
        return obs

    def _scaled(self, obs: np.ndarray) -> np.ndarray:
        return obs * self._obs_scale

    def act(self, obs, explore: bool = False) -> int:
        raise NotImplementedError

    def update(self, transitions: list[Transition]) -> dict[str, float]:
        return {}

    # -- persistence hooks ---------------------------------------------------

    def _nets(self) -> dict[str, Mlp]:
        return {}

    def _optimizers(self) -> dict:
        return {}

    def _extra_state(self) -> dict:
        return {}

    def _load_extra_state(self, state: dict) -> None:
        pass

    def save(self, path) -> None:
        save_agent(self, path)


class FixedTimeAgent(Agent):
    """Non-adaptive baseline: request a switch whenever the current phase
    has lasted the configured green time."""

    needs_rollout = 0

    def act(self, obs, explore: bool = False) -> int:
        obs = self._check_obs(obs)
        return 1 if obs[PHASE_TIME_SLOT] >= self.config.fixed_time_green else 0


class _ReplayBuffer:
    """Fixed-capacity ring with O(1) random access."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self._items: list[Transition] = []
        self._cursor = 0

    def __len__(self) -> int:
        return len(self._items)

    def add(self, item: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._cursor] = item
            self._cursor = (self._cursor + 1) % self.capacity

    def sample(self, rng: np.random.Generator, n: int) -> list[Transition]:
        idx = rng.integers(0, len(self._items), size=n)
        return [self._items[i] for i in idx]


class DqlAgent(Agent):
    """Deep Q-learning with a replay buffer and a periodically synced
    target net. Epsilon decays linearly over the first fraction of the
    training budget, then holds."""

    needs_rollout = 1

    def __init__(self, config: AgentConfig, obs_dim: int):
        super().__init__(config, obs_dim)
        sizes = [obs_dim] + list(config.hidden_sizes) + [N_ACTIONS]
        acts = ["tanh"] * len(config.hidden_sizes) + ["identity"]
        self.q_net = Mlp.create(sizes, acts, seed=config.seed)
        self.target_net = self.q_net.clone()
        self.optimizer = make_optimizer(config.optimizer, self.q_net)
        self.replay = _ReplayBuffer(config.replay_capacity)
        self.updates = 0

    def epsilon(self) -> float:
        cfg = self.config
        horizon = max(1, int(cfg.train_steps_budget * cfg.exploration_fraction))
        frac = min(1.0, self.train_steps / horizon)
        return cfg.epsilon_start + frac * (cfg.epsilon_end - cfg.epsilon_start)

    def act(self, obs, explore: bool = False) -> int:
        obs = self._check_obs(obs)
        if explore and self._rng.random() < self.epsilon():
            return int(self._rng.integers(N_ACTIONS))
        q = self.q_net(self._scaled(obs))
        return int(np.argmax(q))

    def update(self, transitions: list[Transition]) -> dict[str, float]:
        for t in transitions:
            self.replay.add(t)
        self.train_steps += len(transitions)
        if len(self.replay) < max(self.config.warmup, self.config.batch_size):
            return {}
        batch = self.replay.sample(self._rng, self.config.batch_size)
        loss = self.train_on_batch(batch)
        return {"loss": loss, "epsilon": self.epsilon()}

    def train_on_batch(self, batch: list[Transition]) -> float:
        """One regression step of Q(s,a) toward r + gamma * max Q_target(s')."""
        if not batch:
            raise ValueError("batch must be non-empty")
        cfg = self.config
        obs, actions, rewards, next_obs, dones = _stack(batch)
        obs = obs * self._obs_scale
        next_obs = next_obs * self._obs_scale
        next_q = self.target_net(next_obs)
        targets = rewards + cfg.gamma * (1.0 - dones) * next_q.max(axis=1)
        q, cache = self.q_net.forward(obs)
        picked = q[np.arange(len(batch)), actions]
        td = picked - targets
        loss = float(np.mean(td * td))
        if not np.isfinite(loss):
            raise DivergenceError("q-learning loss became non-finite")
        dout = np.zeros_like(q)
        dout[np.arange(len(batch)), actions] = 2.0 * td / len(batch)
        grads = self.q_net.backward(cache, dout)
        self.optimizer.step(self.q_net, grads.scaled(-1.0), cfg.q_lr)
        self.updates += 1
        if self.updates % cfg.target_sync_period == 0:
            self.target_net = self.q_net.clone()
        return loss

    def _nets(self) -> dict[str, Mlp]:
        return {"q": self.q_net, "target": self.target_net}

    def _optimizers(self) -> dict:
        return {"q": self.optimizer}

    def _extra_state(self) -> dict:
        return {"train_steps": self.train_steps, "updates": self.updates}

    def _load_extra_state(self, state: dict) -> None:
        self.train_steps = state["train_steps"]
        self.updates = state["updates"]


class TabularQ:
    """Exact tabular Q-learning update, used as the reference specialization
    of the neural learner on small finite problems."""

    def __init__(self, n_actions: int, gamma: float):
        self.n_actions = n_actions
        self.gamma = gamma
        self.q: dict = defaultdict(float)

    def value(self, state, action) -> float:
        return self.q[(state, action)]

    def best_value(self, state) -> float:
        return max(self.q[(state, a)] for a in range(self.n_actions))

    def best_action(self, state) -> int:
        values = [self.q[(state, a)] for a in range(self.n_actions)]
        return int(np.argmax(values))

    def update(self, state, action, reward, next_state, alpha: float,
               done: bool = False) -> float:
        bootstrap = 0.0 if done else self.gamma * self.best_value(next_state)
        key = (state, action)
        self.q[key] += alpha * (reward + bootstrap - self.q[key])
        return self.q[key]


class _ActorCriticAgent(Agent):
    """Shared machinery: softmax policy over two logits plus a value net."""

    def __init__(self, config: AgentConfig, obs_dim: int):
        super().__init__(config, obs_dim)
        hidden = list(config.hidden_sizes)
        acts = ["tanh"] * len(hidden) + ["identity"]
        self.actor = Mlp.create([obs_dim] + hidden + [N_ACTIONS], acts,
                                seed=config.seed)
        self.critic = Mlp.create([obs_dim] + hidden + [1], acts,
                                 seed=config.seed + 1)

    @property
    def needs_rollout(self) -> int:
        return self.config.rollout_length

    def exploration_floor(self) -> float:
        cfg = self.config
        floor = cfg.explore_floor
        init = cfg.explore_floor_init
        if init is None or init <= floor:
            return floor
        horizon = max(1, int(cfg.train_steps_budget * cfg.exploration_fraction))
        frac = min(1.0, self.train_steps / horizon)
        return init + frac * (floor - init)

    def act(self, obs, explore: bool = False) -> int:
        obs = self._check_obs(obs)
        logits = self.actor(self._scaled(obs))
        logp = _log_softmax(logits)
        if explore:
            # a uniform floor keeps rare actions sampled even once the
            # policy has become confident
            floor = self.exploration_floor()
            if floor and self._rng.random() < floor:
                action = int(self._rng.integers(N_ACTIONS))
            else:
                action = 0 if self._rng.random() < np.exp(logp[0]) else 1
        else:
            action = int(np.argmax(logits))
        self.last_logprob = float(logp[action])
        return action

    def policy(self, obs) -> np.ndarray:
        """Action distribution at one observation."""
        obs = self._check_obs(obs)
        return np.exp(_log_softmax(self.actor(self._scaled(obs))))

    def _targets_and_advantages(self, transitions: list[Transition]):
        cfg = self.config
        obs, actions, rewards, next_obs, dones = _stack(transitions)
        obs = obs * self._obs_scale
        next_obs = next_obs * self._obs_scale
        v_now = self.critic(obs).ravel()
        v_next = self.critic(next_obs).ravel()
        targets = rewards + cfg.gamma * (1.0 - dones) * v_next
        advantages = targets - v_now
        if cfg.center_advantages and len(advantages) > 1:
            # batch-mean baseline: keeps the estimator unbiased while
            # removing the shared offset that otherwise swamps the
            # state-conditional signal
            advantages = advantages - advantages.mean()
        return obs, actions, targets, advantages

    def _actor_surrogate_grad(self, logp, pi, actions, coeff, batch_size):
        """d/d logits of mean(coeff * log pi(a)) plus the entropy bonus."""
        onehot = np.zeros_like(pi)
        onehot[np.arange(len(actions)), actions] = 1.0
        grad = coeff[:, None] * (onehot - pi)
        if self.config.entropy_coef:
            entropy = -(pi * logp).sum(axis=1, keepdims=True)
            grad += self.config.entropy_coef * (-pi * (logp + entropy))
        return grad / batch_size

    def _critic_step(self, obs, targets) -> float:
        """Descend the squared error toward fixed targets; repeated
        ``critic_epochs`` times so the value scale can be reached within a
        desk-scale update budget."""
        loss = 0.0
        for _ in range(max(1, self.config.critic_epochs)):
            v, cache = self.critic.forward(obs)
            resid = v.ravel() - targets
            loss = float(np.mean(resid * resid))
            if not np.isfinite(loss):
                raise DivergenceError("critic loss became non-finite")
            grads = self.critic.backward(cache,
                                         (2.0 * resid / len(targets))[:, None])
            self.critic_optimizer.step(self.critic, grads.scaled(-1.0),
                                       self.config.critic_lr)
        return loss

    def _nets(self) -> dict[str, Mlp]:
        return {"actor": self.actor, "critic": self.critic}

    def _optimizers(self) -> dict:
        return {"actor": self.actor_optimizer, "critic": self.critic_optimizer}

    def _extra_state(self) -> dict:
        return {"train_steps": self.train_steps}

    def _load_extra_state(self, state: dict) -> None:
        self.train_steps = state["train_steps"]


class A2cAgent(_ActorCriticAgent):
    """One-step advantage actor-critic: the actor ascends
    mean(log pi(a|s) * A), the critic regresses onto bootstrapped targets."""

    def __init__(self, config: AgentConfig, obs_dim: int):
        super().__init__(config, obs_dim)
        self.actor_optimizer = make_optimizer(config.optimizer, self.actor)
        self.critic_optimizer = make_optimizer(config.optimizer, self.critic)

    def update(self, transitions: list[Transition]) -> dict[str, float]:
        self.train_steps += len(transitions)
        obs, actions, targets, advantages = self._targets_and_advantages(transitions)
        logits, cache = self.actor.forward(obs)
        logp = _log_softmax(logits)
        pi = np.exp(logp)
        taken = logp[np.arange(len(actions)), actions]
        surrogate = float(np.mean(taken * advantages))
        if not np.isfinite(surrogate):
            raise DivergenceError("actor surrogate became non-finite")
        dlogits = self._actor_surrogate_grad(logp, pi, actions, advantages,
                                             len(transitions))
        grads = self.actor.backward(cache, dlogits)
        self.actor_optimizer.step(self.actor, grads, self.config.actor_lr)
        critic_loss = self._critic_step(obs, targets)
        return {"actor_loss": -surrogate, "critic_loss": critic_loss,
                "entropy": float(np.mean(-(pi * logp).sum(axis=1)))}


class PpoAgent(_ActorCriticAgent):
    """Clipped-ratio surrogate over several epochs of minibatches.

    Per-step objective: min(ratio * A, clip(ratio, 1-eps, 1+eps) * A) with
    ratio = pi_new(a|s) / pi_old(a|s); the ratio gradient is dropped
    wherever the clipped branch is the active minimum.
    """

    def __init__(self, config: AgentConfig, obs_dim: int):
        super().__init__(config, obs_dim)
        self.actor_optimizer = make_optimizer(config.optimizer, self.actor)
        self.critic_optimizer = make_optimizer(config.optimizer, self.critic)

    def update(self, transitions: list[Transition]) -> dict[str, float]:
        cfg = self.config
        self.train_steps += len(transitions)
        obs, actions, targets, advantages = self._targets_and_advantages(transitions)
        if all(t.log_prob is not None for t in transitions):
            old_logp = np.array([t.log_prob for t in transitions])
        else:  # rollout collected without recording; the policy is unchanged
            logits = self.actor(obs)
            old_logp = _log_softmax(logits)[np.arange(len(actions)), actions]
        n = len(transitions)
        last_actor_loss = 0.0
        last_critic_loss = 0.0
        for _ in range(cfg.ppo_epochs):
            perm = self._rng.permutation(n)
            for start in range(0, n, cfg.ppo_minibatch):
                mb = perm[start:start + cfg.ppo_minibatch]
                logits, cache = self.actor.forward(obs[mb])
                logp = _log_softmax(logits)
                pi = np.exp(logp)
                taken = logp[np.arange(len(mb)), actions[mb]]
                ratio = np.exp(taken - old_logp[mb])
                adv = advantages[mb]
                unclipped = ratio * adv
                clipped = np.clip(ratio, 1.0 - cfg.clip_epsilon,
                                  1.0 + cfg.clip_epsilon) * adv
                objective = float(np.mean(np.minimum(unclipped, clipped)))
                if not np.isfinite(objective):
                    raise DivergenceError("clipped surrogate became non-finite")
                # ratio gradient only where the unclipped branch is active
                coeff = np.where(unclipped <= clipped, adv * ratio, 0.0)
                dlogits = self._actor_surrogate_grad(logp, pi, actions[mb],
                                                     coeff, len(mb))
                grads = self.actor.backward(cache, dlogits)
                self.actor_optimizer.step(self.actor, grads, cfg.actor_lr)
                last_actor_loss = -objective
                last_critic_loss = self._critic_step(obs[mb], targets[mb])
        return {"actor_loss": last_actor_loss, "critic_loss": last_critic_loss}


class AcktrAgent(_ActorCriticAgent):
    """Actor-critic with per-layer Kronecker-factored curvature: gradients
    are preconditioned by the running factor inverses and the applied step
    is capped to a maximum parameter-space norm."""

    def __init__(self, config: AgentConfig, obs_dim: int):
        super().__init__(config, obs_dim)
        self.actor_optimizer = make_optimizer("sgd", self.actor)
        self.critic_optimizer = make_optimizer("sgd", self.critic)
        self.actor_stats = KfacStats(self.actor, damping=config.kfac_damping,
                                     decay=config.kfac_decay,
                                     augment_bias=config.kfac_augment_bias)
        self.critic_stats = KfacStats(self.critic, damping=config.kfac_damping,
                                      decay=config.kfac_decay,
                                      augment_bias=config.kfac_augment_bias)

    def _capped(self, direction: Gradients, learning_rate: float) -> Gradients:
        radius = self.config.trust_region_radius
        if radius is None or not np.isfinite(radius):
            return direction
        step_norm = learning_rate * direction.norm()
        if step_norm > radius:
            if radius == 0.0:
                return direction.scaled(0.0)
            return direction.scaled(radius / step_norm)
        return direction

    def _kl_scaled(self, grads: Gradients, nat: Gradients,
                   learning_rate: float) -> Gradients:
        """Shrink the preconditioned step so its curvature-metric length
        stays within the configured budget: eta^2 g^T F^-1 g <= 2 delta.

        g^T F^-1 g is just the inner product of the raw gradient with the
        preconditioned direction, so no extra curvature products are
        needed. Saturated directions (tiny Fisher) would otherwise blow up
        under the inverse."""
        delta = self.config.kl_budget
        if delta is None or delta <= 0:
            return nat
        quad = 0.0
        for gw, gb, nw, nb in zip(grads.dw, grads.db, nat.dw, nat.db):
            quad += float(np.sum(gw * nw)) + float(np.sum(gb * nb))
        if quad <= 0:
            return nat
        scale = min(1.0, math.sqrt(2.0 * delta / quad) / learning_rate)
        return nat.scaled(scale)

    def update(self, transitions: list[Transition]) -> dict[str, float]:
        cfg = self.config
        self.train_steps += len(transitions)
        obs, actions, targets, advantages = self._targets_and_advantages(transitions)
        n = len(transitions)

        logits, cache = self.actor.forward(obs)
        logp = _log_softmax(logits)
        pi = np.exp(logp)
        onehot = np.zeros_like(pi)
        onehot[np.arange(n), actions] = 1.0
        # curvature pass: per-sample score-function gradients, unscaled
        self.actor.backward(cache, onehot - pi)
        self.actor_stats.update(cache.inputs, cache.pre_grads)
        taken = logp[np.arange(n), actions]
        surrogate = float(np.mean(taken * advantages))
        if not np.isfinite(surrogate):
            raise DivergenceError("actor surrogate became non-finite")
        dlogits = self._actor_surrogate_grad(logp, pi, actions, advantages, n)
        grads = self.actor.backward(cache, dlogits)
        direction = self.actor_stats.precondition(grads)
        direction = self._kl_scaled(grads, direction, cfg.actor_lr)
        direction = self._capped(direction, cfg.actor_lr)
        self.actor_optimizer.step(self.actor, direction, cfg.actor_lr)

        critic_loss = 0.0
        for inner in range(max(1, cfg.critic_epochs)):
            v, vcache = self.critic.forward(obs)
            resid = v.ravel() - targets
            critic_loss = float(np.mean(resid * resid))
            if not np.isfinite(critic_loss):
                raise DivergenceError("critic loss became non-finite")
            if inner == 0:  # refresh curvature once per rollout
                self.critic.backward(vcache, resid[:, None])
                self.critic_stats.update(vcache.inputs, vcache.pre_grads)
            cgrads = self.critic.backward(vcache, (2.0 * resid / n)[:, None])
            cdir = self.critic_stats.precondition(cgrads)
            cdir = self._kl_scaled(cgrads, cdir, cfg.critic_lr).scaled(-1.0)
            cdir = self._capped(cdir, cfg.critic_lr)
            self.critic_optimizer.step(self.critic, cdir, cfg.critic_lr)
        return {"actor_loss": -surrogate, "critic_loss": critic_loss}

    def _optimizers(self) -> dict:
        return {"actor": self.actor_optimizer, "critic": self.critic_optimizer,
                "actor_stats": self.actor_stats, "critic_stats": self.critic_stats}


# Spec-shaped functional entry points over the class methods.

def dql_update(agent: DqlAgent, batch: list[Transition]) -> float:
    return agent.train_on_batch(batch)


def a2c_update(agent: A2cAgent, rollout: list[Transition]):
    losses = agent.update(rollout)
    return losses["actor_loss"], losses["critic_loss"]


def ppo_update(agent: PpoAgent, rollout: list[Transition]):
    losses = agent.update(rollout)
    return losses["actor_loss"], losses["critic_loss"]


def acktr_update(agent: AcktrAgent, rollout: list[Transition]):
    losses = agent.update(rollout)
    return losses["actor_loss"], losses["critic_loss"]


_AGENT_CLASSES = {
    "dql": DqlAgent,
    "a2c": A2cAgent,
    "ppo": PpoAgent,
    "acktr": AcktrAgent,
    "fixed_time": FixedTimeAgent,
}


def make_agent(config: AgentConfig, obs_dim: int) -> Agent:
    return _AGENT_CLASSES[config.algorithm](config, obs_dim)


# ---------------------------------------------------------------------------
# agent checkpoints: agent header + network blocks + optimizer state blocks
# ---------------------------------------------------------------------------

def agent_to_bytes(agent: Agent) -> bytes:
    nets = agent._nets()
    optimizers = agent._optimizers() if hasattr(agent, "_optimizers") else {}
    opt_meta = {}
    opt_payload = b""
    for name, opt in optimizers.items():
        arrays = opt.state_arrays()
        opt_meta[name] = {
            "meta": opt.state_meta(),
            "array_sizes": [int(a.size) for a in arrays],
            "array_shapes": [list(a.shape) for a in arrays],
        }
        for arr in arrays:
            opt_payload += arr.astype("<f8").tobytes()
    header = json.dumps({
        "format_version": _AGENT_FORMAT_VERSION,
        "algorithm": agent.algorithm,
        "obs_dim": agent.obs_dim,
        "config": asdict(agent.config),
        "nets": list(nets.keys()),
        "optimizers": opt_meta,
        "extra_state": agent._extra_state(),
        "rng_state": _rng_state_to_json(agent._rng),
    }).encode("utf-8")
    blob = _AGENT_MAGIC + struct.pack("<II", _AGENT_FORMAT_VERSION, len(header))
    blob += header
    for net in nets.values():
        blob += net.to_bytes()
    blob += opt_payload
    return blob


def _rng_state_to_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def agent_from_bytes(blob: bytes, expected_algorithm: str | None = None) -> Agent:
    prefix = len(_AGENT_MAGIC) + 8
    if len(blob) < prefix:
        raise CheckpointTruncatedError("agent header cut short")
    if blob[:len(_AGENT_MAGIC)] != _AGENT_MAGIC:
        raise CheckpointFormatError("bad agent checkpoint magic bytes")
    version, header_len = struct.unpack_from("<II", blob, len(_AGENT_MAGIC))
    if version != _AGENT_FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported agent format version {version}")
    if len(blob) < prefix + header_len:
        raise CheckpointTruncatedError("agent header cut short")
    try:
        header = json.loads(blob[prefix:prefix + header_len].decode("utf-8"))
        algorithm = header["algorithm"]
        config = AgentConfig(**header["config"])
        obs_dim = header["obs_dim"]
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable agent header: {exc}") from exc
    if expected_algorithm is not None and algorithm != expected_algorithm:
        raise AlgorithmMismatchError(
            f"checkpoint holds {algorithm!r}, expected {expected_algorithm!r}")
    agent = make_agent(config, obs_dim)
    offset = prefix + header_len
    nets = agent._nets()
    if list(nets.keys()) != header["nets"]:
        raise CheckpointFormatError("checkpoint net list does not match algorithm")
    for name in header["nets"]:
        net, offset = Mlp._parse(blob, offset)
        target = nets[name]
        if net.sizes != target.sizes or net.activations != target.activations:
            raise CheckpointError(
                f"net {name!r} shape mismatch: checkpoint {net.sizes} vs "
                f"agent {target.sizes}")
        target.set_flat(net.flatten())
        target.seed = net.seed
    for name, meta in header["optimizers"].items():
        opt = agent._optimizers()[name]
        arrays = []
        for shape in meta["array_shapes"]:
            count = int(np.prod(shape)) if shape else 1
            stop = offset + count * 8
            if len(blob) < stop:
                raise CheckpointTruncatedError("optimizer state cut short")
            arrays.append(np.frombuffer(blob[offset:stop], dtype="<f8")
                          .reshape(shape).astype(np.float64))
            offset = stop
        opt.load_state_arrays(arrays)
        if isinstance(opt, AdamOptimizer):
            opt.t = meta["meta"].get("t", 0)
    if offset != len(blob):
        raise CheckpointFormatError("trailing bytes after agent checkpoint")
    agent._load_extra_state(header["extra_state"])
    agent._rng.bit_generator.state = header["rng_state"]
    return agent


def save_agent(agent: Agent, path) -> None:
    with open(path, "wb") as fh:
        fh.write(agent_to_bytes(agent))


def load_agent(path, expected_algorithm: str | None = None) -> Agent:
    with open(path, "rb") as fh:
        return agent_from_bytes(fh.read(), expected_algorithm)
