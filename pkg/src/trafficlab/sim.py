"""Microscopic simulation of a four-approach, single-lane signalized intersection.

Vehicles arrive per approach by Poisson draws, follow their leader under a
hard safe-stopping rule, and are tagged at spawn as detected or undetected
with a configurable probability. The two-phase signal (plus amber
transitions) is driven externally through keep/switch commands, one per
time step.

All step functions mutate the given :class:`SimState` in place and return
it, so a driver can chain them. A state is strictly single-threaded but
cheap to create, so parallel experiments simply use one state each.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np


class Axis(IntEnum):
    NS = 0
    EW = 1


class Approach(IntEnum):
    """One incoming road of the intersection."""

    NORTH = 0
    SOUTH = 1
    EAST = 2
    WEST = 3

    @property
    def axis(self) -> Axis:
        return Axis.NS if self in (Approach.NORTH, Approach.SOUTH) else Axis.EW


APPROACHES = (Approach.NORTH, Approach.SOUTH, Approach.EAST, Approach.WEST)


class Phase(IntEnum):
    NS_GREEN = 0
    EW_GREEN = 1

    @property
    def served_axis(self) -> Axis:
        return Axis.NS if self is Phase.NS_GREEN else Axis.EW

    @property
    def opposite(self) -> "Phase":
        return Phase.EW_GREEN if self is Phase.NS_GREEN else Phase.NS_GREEN


class Command(IntEnum):
    """Signal command: hold the current phase or start a phase change."""

    KEEP = 0
    SWITCH = 1


PRESET_ARRIVAL_RATES = {"sparse": 0.02, "medium": 0.10, "dense": 0.25}


@dataclass
class SimConfig:
    """Physical and stochastic knobs of the intersection model.

    Distances in meters, times in seconds, speeds in m/s. ``arrival_rate``
    is vehicles per second per approach; ``detection_rate`` is the
    probability that a spawning vehicle is observable by the controller.
    """

    lane_length: float = 150.0
    vmax_default: float = 13.89
    accel: float = 2.0
    decel: float = 4.5
    vehicle_length: float = 5.0
    min_gap: float = 2.5
    amber_duration: float = 4.0
    min_green: float = 5.0
    time_step: float = 1.0
    arrival_rate: float = 0.10
    detection_rate: float = 1.0
    wait_speed_threshold: float = 0.1
    rng_seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        positive = (
            "lane_length", "vmax_default", "accel", "decel", "vehicle_length",
            "min_gap", "amber_duration", "min_green", "time_step",
            "wait_speed_threshold",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.arrival_rate < 0:
            raise ValueError("arrival_rate must be non-negative")
        if not 0.0 <= self.detection_rate <= 1.0:
            raise ValueError("detection_rate must lie in [0, 1]")

    @property
    def lane_capacity(self) -> int:
        """Vehicles that fit on one approach when fully queued."""
        return int(self.lane_length // (self.vehicle_length + self.min_gap))


def scenario_preset(name: str, **overrides) -> SimConfig:
    """Build a SimConfig for one of the named flow presets.

    Presets differ only in ``arrival_rate``; geometry and dynamics are
    shared. Extra keyword overrides are applied on top.
    """
    try:
        rate = PRESET_ARRIVAL_RATES[name]
    except KeyError:
        raise ValueError(
            f"unknown scenario preset {name!r}; expected one of "
            f"{sorted(PRESET_ARRIVAL_RATES)}"
        ) from None
    return SimConfig(arrival_rate=rate, **overrides)


@dataclass(slots=True)
class Vehicle:
    """One car on an approach.

    ``position`` is meters from the front bumper to the stop line and only
    decreases; ``detected`` is fixed at spawn; ``cumulative_wait`` counts
    seconds spent below the configured wait speed threshold.
    """

    id: int
    approach: Approach
    position: float
    speed: float
    vmax: float
    detected: bool
    spawn_time: float
    cumulative_wait: float = 0.0


@dataclass(slots=True)
class SignalState:
    phase: Phase = Phase.NS_GREEN
    in_amber: bool = False
    phase_elapsed: float = 0.0
    amber_elapsed: float = 0.0

    def axis_has_green(self, axis: Axis) -> bool:
        return not self.in_amber and self.phase.served_axis is axis


@dataclass
class Metrics:
    """Per-class waiting-time snapshot over exited vehicles.

    Means are ``None`` while the corresponding class has no exits yet.
    Queue lengths count vehicles currently below the wait speed threshold.
    """

    wait_all: float | None
    wait_detected: float | None
    wait_undetected: float | None
    exited_all: int
    exited_detected: int
    exited_undetected: int
    queue_lengths: dict[Approach, int]


@dataclass
class SimState:
    """Complete mutable state of one simulation instance."""

    clock: float
    signal: SignalState
    lanes: dict[Approach, list[Vehicle]]
    pending: dict[Approach, int]
    spawned_count: int
    spawned_detected_count: int
    exited_count: int
    exited_wait_detected: float
    exited_n_detected: int
    exited_wait_undetected: float
    exited_n_undetected: int
    next_vehicle_id: int
    rng: np.random.Generator

    @classmethod
    def initial(cls, config: SimConfig, seed: int | None = None) -> "SimState":
        """Empty intersection at clock 0, NS green, fresh RNG stream."""
        return cls(
            clock=0.0,
            signal=SignalState(),
            lanes={a: [] for a in APPROACHES},
            pending={a: 0 for a in APPROACHES},
            spawned_count=0,
            spawned_detected_count=0,
            exited_count=0,
            exited_wait_detected=0.0,
            exited_n_detected=0,
            exited_wait_undetected=0.0,
            exited_n_undetected=0,
            next_vehicle_id=0,
            rng=np.random.default_rng(config.rng_seed if seed is None else seed),
        )

    def vehicle_count(self) -> int:
        return sum(len(lane) for lane in self.lanes.values())

    def iter_vehicles(self):
        for approach in APPROACHES:
            yield from self.lanes[approach]

    @property
    def vehicles(self) -> dict[int, Vehicle]:
        """Id-keyed view of all vehicles currently on an approach."""
        return {v.id: v for v in self.iter_vehicles()}


def _braking_limited_speed(distance: float, decel: float, dt: float) -> float:
    """Fastest speed drivable for one step that still allows a full stop
    within ``distance`` afterwards at ``decel``."""
    if distance <= 0.0:
        return 0.0
    return -decel * dt + math.sqrt(decel * decel * dt * dt + 2.0 * decel * distance)


def spawn_step(state: SimState, config: SimConfig) -> SimState:
    """Draw Poisson arrivals per approach and insert them at the lane entrance.

    Arrivals blocked by a vehicle too close to the entrance stay queued
    (never dropped) and retry next step. The detected flag is drawn at the
    moment a vehicle actually enters, so a detection rate changed between
    steps applies to everything spawned afterwards.
    """
    rng = state.rng
    lam = config.arrival_rate * config.time_step
    entry_margin = config.vehicle_length + config.min_gap
    for approach in APPROACHES:
        arrivals = state.pending[approach] + int(rng.poisson(lam))
        lane = state.lanes[approach]
        while arrivals > 0:
            if lane:
                rear = lane[-1]
                if config.lane_length - rear.position < entry_margin:
                    break  # entrance occupied; retry next step
                headroom = config.lane_length - rear.position - entry_margin
                speed = min(config.vmax_default,
                            _braking_limited_speed(headroom, config.decel, config.time_step))
            else:
                speed = config.vmax_default
            detected = rng.random() < config.detection_rate
            lane.append(Vehicle(
                id=state.next_vehicle_id,
                approach=approach,
                position=config.lane_length,
                speed=speed,
                vmax=config.vmax_default,
                detected=detected,
                spawn_time=state.clock,
            ))
            state.next_vehicle_id += 1
            state.spawned_count += 1
            if detected:
                state.spawned_detected_count += 1
            arrivals -= 1
        state.pending[approach] = arrivals
    return state


def kinematics_step(state: SimState, config: SimConfig) -> SimState:
    """Advance every vehicle by one time step and advance the clock.

    Front-to-back per lane: each vehicle accelerates toward its own vmax,
    capped by the speed that still lets it stop before its obstacle (the
    leader's rear plus the minimum gap, or the stop line when its axis does
    not have green). A vehicle whose new position crosses the stop line
    exits and its waiting time is booked into the per-class accumulators.
    """
    dt = config.time_step
    accel = config.accel
    decel = config.decel
    spacing = config.vehicle_length + config.min_gap
    threshold = config.wait_speed_threshold
    for approach in APPROACHES:
        lane = state.lanes[approach]
        if not lane:
            continue
        green = state.signal.axis_has_green(approach.axis)
        survivors: list[Vehicle] = []
        leader_new_pos: float | None = None
        for veh in lane:
            budget = math.inf
            if leader_new_pos is not None:
                budget = veh.position - (leader_new_pos + spacing)
            if not green:
                budget = min(budget, veh.position)
            new_speed = min(veh.vmax, veh.speed + accel * dt)
            if budget != math.inf:
                if budget < 0.0:
                    budget = 0.0
                new_speed = min(new_speed, _braking_limited_speed(budget, decel, dt))
            new_pos = veh.position - new_speed * dt
            if new_pos < veh.position - budget:
                new_pos = veh.position - budget  # float-noise guard
            veh.speed = new_speed
            leader_new_pos = new_pos
            if new_pos < 0.0:
                state.exited_count += 1
                if veh.detected:
                    state.exited_wait_detected += veh.cumulative_wait
                    state.exited_n_detected += 1
                else:
                    state.exited_wait_undetected += veh.cumulative_wait
                    state.exited_n_undetected += 1
            else:
                veh.position = new_pos
                if new_speed < threshold:
                    veh.cumulative_wait += dt
                survivors.append(veh)
        state.lanes[approach] = survivors
    state.clock += dt
    return state


def signal_step(state: SimState, command: Command, config: SimConfig) -> SimState:
    """Drive the two-phase signal machine by one step.

    Amber ignores commands and auto-completes into the opposite green.
    A switch command is honored only once the green has lasted min_green;
    otherwise the phase simply ages.
    """
    sig = state.signal
    dt = config.time_step
    if sig.in_amber:
        sig.amber_elapsed += dt
        sig.phase_elapsed += dt
        if sig.amber_elapsed >= config.amber_duration:
            sig.phase = sig.phase.opposite
            sig.in_amber = False
            sig.amber_elapsed = 0.0
            sig.phase_elapsed = 0.0
    elif command == Command.SWITCH and sig.phase_elapsed >= config.min_green:
        sig.in_amber = True
        sig.amber_elapsed = 0.0
    else:
        sig.phase_elapsed += dt
    return state


def metrics_snapshot(state: SimState, config: SimConfig) -> Metrics:
    """Mean waiting time per detection class over exited vehicles, plus
    current per-approach queue lengths."""
    n_det = state.exited_n_detected
    n_undet = state.exited_n_undetected
    n_all = n_det + n_undet
    wait_det = state.exited_wait_detected / n_det if n_det else None
    wait_undet = state.exited_wait_undetected / n_undet if n_undet else None
    wait_all = (
        (state.exited_wait_detected + state.exited_wait_undetected) / n_all
        if n_all else None
    )
    queues = {
        a: sum(1 for v in state.lanes[a] if v.speed < config.wait_speed_threshold)
        for a in APPROACHES
    }
    return Metrics(
        wait_all=wait_all,
        wait_detected=wait_det,
        wait_undetected=wait_undet,
        exited_all=n_all,
        exited_detected=n_det,
        exited_undetected=n_undet,
        queue_lengths=queues,
    )
