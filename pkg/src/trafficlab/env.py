"""Step/reset control environment wrapped around the intersection simulator.

The observation is the compact state vector: per-approach detected-vehicle
counts (normalized by lane capacity), per-approach distance to the nearest
detected vehicle (normalized by lane length, 1.0 when none), the raw phase
timer in seconds, an amber indicator, the integer phase index, and an
optional time-of-day fraction. Only detected vehicles influence any slot.

Rewards are the negative normalized speed deficits: the full variant sums
over every vehicle on an approach, the partial variant only over detected
ones, which is all a controller could measure in the field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from trafficlab.sim import (
    APPROACHES,
    Command,
    Metrics,
    Phase,
    SimConfig,
    SimState,
    kinematics_step,
    metrics_snapshot,
    signal_step,
    spawn_step,
)

# Slot layout of the observation vector.
N_COUNT_SLOTS = 4
N_DISTANCE_SLOTS = 4
PHASE_TIME_SLOT = 8
AMBER_SLOT = 9
PHASE_SLOT = 10
TIME_OF_DAY_SLOT = 11
BASE_OBSERVATION_SIZE = 11

Action = Command  # keep (0) / switch (1)


class RewardMode(Enum):
    FULL = "full"
    PARTIAL = "partial"


class EpisodeDoneError(RuntimeError):
    """Raised when step() is called on a finished episode."""


@dataclass
class RewardBreakdown:
    """Full and partial rewards plus the per-class speed deficits behind them."""

    full: float
    partial: float
    detected_deficit: float
    undetected_deficit: float

    def for_mode(self, mode: RewardMode) -> float:
        return self.partial if mode is RewardMode.PARTIAL else self.full


@dataclass
class EnvConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    reward_mode: RewardMode = RewardMode.PARTIAL
    episode_length: float = 3600.0
    include_time_of_day: bool = False
    day_length: float = 86_400.0

    def __post_init__(self) -> None:
        if self.episode_length <= 0:
            raise ValueError("episode_length must be positive")
        steps = self.episode_length / self.sim.time_step
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("episode_length must be a multiple of time_step")

    @property
    def lane_capacity(self) -> int:
        return self.sim.lane_capacity

    @property
    def observation_size(self) -> int:
        return BASE_OBSERVATION_SIZE + (1 if self.include_time_of_day else 0)


def build_observation(state: SimState, config: EnvConfig) -> np.ndarray:
    """Compact state vector; undetected vehicles are invisible to it."""
    sim = config.sim
    capacity = config.lane_capacity
    obs = np.ones(config.observation_size)
    for i, approach in enumerate(APPROACHES):
        count = 0
        nearest = None
        for veh in state.lanes[approach]:
            if veh.detected:
                count += 1
                if nearest is None:  # lanes are ordered front to back
                    nearest = veh.position
        obs[i] = min(count / capacity, 1.0)
        obs[N_COUNT_SLOTS + i] = 1.0 if nearest is None else min(nearest / sim.lane_length, 1.0)
    obs[PHASE_TIME_SLOT] = state.signal.phase_elapsed
    obs[AMBER_SLOT] = 1.0 if state.signal.in_amber else 0.0
    obs[PHASE_SLOT] = float(int(state.signal.phase))
    if config.include_time_of_day:
        obs[TIME_OF_DAY_SLOT] = (state.clock % config.day_length) / config.day_length
    return obs


def compute_reward(state: SimState) -> RewardBreakdown:
    """Negative normalized speed deficit, split by detection class.

    Each vehicle contributes (vmax - v) / vmax; the partial reward sums
    only detected contributions, so partial >= full always.
    """
    detected = 0.0
    undetected = 0.0
    for veh in state.iter_vehicles():
        deficit = (veh.vmax - veh.speed) / veh.vmax
        if veh.detected:
            detected += deficit
        else:
            undetected += deficit
    return RewardBreakdown(
        full=-(detected + undetected),
        partial=-detected,
        detected_deficit=detected,
        undetected_deficit=undetected,
    )


class TrafficSignalEnv:
    """Keep/switch control environment over one simulated intersection.

    One instance is single-threaded; build one per worker for parallel
    rollouts. ``reset(seed=...)`` reproduces an episode exactly; ``reset()``
    draws the next episode seed from a master stream so training sees
    varied but reproducible episodes.
    """

    def __init__(self, config: EnvConfig, seed: int | None = None):
        self.config = config
        self._master = np.random.default_rng(
            config.sim.rng_seed if seed is None else seed)
        self._state: SimState | None = None
        self._done = True

    @property
    def observation_size(self) -> int:
        return self.config.observation_size

    @property
    def state(self) -> SimState:
        if self._state is None:
            raise RuntimeError("reset() must be called before accessing state")
        return self._state

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is None:
            seed = int(self._master.integers(0, 2**63))
        self._state = SimState.initial(self.config.sim, seed=seed)
        self._done = False
        return build_observation(self._state, self.config)

    def set_detection_rate(self, rate: float) -> None:
        """Adjust the detection probability applied to future spawns."""
        if not 0.0 <= rate <= 1.0:
            raise ValueError("detection rate must lie in [0, 1]")
        self.config.sim.detection_rate = rate

    def step(self, action) -> tuple[np.ndarray, float, bool, dict]:
        """Apply the signal command, advance the world one step, reward the
        post-step state. Raises EpisodeDoneError past the episode end."""
        if self._state is None or self._done:
            raise EpisodeDoneError("episode is finished; call reset() first")
        sim_cfg = self.config.sim
        state = self._state
        signal_step(state, Command(int(action)), sim_cfg)
        spawn_step(state, sim_cfg)
        kinematics_step(state, sim_cfg)
        breakdown = compute_reward(state)
        reward = breakdown.for_mode(self.config.reward_mode)
        self._done = state.clock >= self.config.episode_length - 1e-9
        info = {
            "reward_breakdown": breakdown,
            "metrics": metrics_snapshot(state, sim_cfg),
        }
        obs = build_observation(state, self.config)
        return obs, reward, self._done, info

    @property
    def done(self) -> bool:
        return self._done
