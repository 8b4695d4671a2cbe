"""Deployment-phase machinery: run a pre-trained controller in one long,
never-reset episode while the vehicle detection rate drifts along a
piecewise-linear schedule, updating the agent online from partial rewards
and watching the waiting-time series for catastrophic updates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import median

from trafficlab.agents import Agent, Transition
from trafficlab.env import EnvConfig, RewardMode, TrafficSignalEnv
from trafficlab.nn import DivergenceError


@dataclass
class DetectionSchedule:
    """Piecewise-linear detection rate over simulated seconds, clamped to
    the endpoint rates outside the breakpoint span."""

    breakpoints: list[tuple[float, float]]

    def __post_init__(self) -> None:
        if not self.breakpoints:
            raise ValueError("schedule needs at least one breakpoint")
        times = [t for t, _ in self.breakpoints]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("breakpoint times must be strictly increasing")
        if any(not 0.0 <= r <= 1.0 for _, r in self.breakpoints):
            raise ValueError("rates must lie in [0, 1]")

    @classmethod
    def ramp(cls, t_start: float, r_start: float,
             t_end: float, r_end: float) -> "DetectionSchedule":
        return cls([(t_start, r_start), (t_end, r_end)])

    def rate_at(self, t: float) -> float:
        pts = self.breakpoints
        if t <= pts[0][0]:
            return pts[0][1]
        if t >= pts[-1][0]:
            return pts[-1][1]
        for (t0, r0), (t1, r1) in zip(pts, pts[1:]):
            if t0 <= t <= t1:
                return r0 + (r1 - r0) * (t - t0) / (t1 - t0)
        raise AssertionError("unreachable")  # pragma: no cover


def detection_rate_at(schedule: DetectionSchedule, t: float) -> float:
    return schedule.rate_at(t)


@dataclass
class DeploymentConfig:
    schedule: DetectionSchedule
    total_steps: int = 200_000
    update_period: int | None = 256  # None: pure evaluation, no updates
    instability_window: int = 2_000
    instability_threshold: float = 3.0
    instability_history: int = 8  # timeline points behind the rolling median

    def __post_init__(self) -> None:
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        if self.instability_threshold <= 1.0:
            raise ValueError("instability_threshold must exceed 1")
        if self.instability_window <= 0:
            raise ValueError("instability_window must be positive")


@dataclass
class TimelinePoint:
    step: int
    detection_rate: float
    wait_all: float | None
    wait_detected: float | None
    wait_undetected: float | None
    instability: bool = False


@dataclass
class DeploymentResult:
    timeline: list[TimelinePoint]
    instability_flags: int = 0
    failure_step: int | None = None
    failure_message: str | None = None
    spawned_total: int = 0
    spawned_detected: int = 0

    @property
    def aborted(self) -> bool:
        return self.failure_step is not None


def detect_instability(values: list[float | None], threshold: float,
                       history: int = 8) -> list[bool]:
    """Flag points whose waiting time exceeds threshold times the rolling
    median of the preceding points (up to ``history`` of them).

    ``None`` entries (windows with no exits) are never flagged and do not
    enter the median history. The first point has no history and cannot
    be flagged.
    """
    flags = []
    seen: list[float] = []
    for value in values:
        if value is None:
            flags.append(False)
            continue
        if not seen:
            flags.append(False)
        else:
            baseline = median(seen[-history:])
            flags.append(baseline > 0 and value > threshold * baseline)
        seen.append(value)
    return flags


class _WindowAccumulator:
    """Per-window waiting-time means out of the sim's cumulative counters.

    A window's mean covers vehicles that exited during the window plus the
    accrued waits of vehicles still on the road at the boundary; a
    controller that starves an approach therefore shows a spike instead of
    quietly dropping those vehicles from the average.
    """

    def __init__(self, state):
        self._snap = self._take(state)

    @staticmethod
    def _take(state):
        return (state.exited_wait_detected, state.exited_n_detected,
                state.exited_wait_undetected, state.exited_n_undetected)

    def window_means(self, state):
        wd, nd, wu, nu = self._take(state)
        dw, dn = wd - self._snap[0], nd - self._snap[1]
        uw, un = wu - self._snap[2], nu - self._snap[3]
        self._snap = (wd, nd, wu, nu)
        for veh in state.iter_vehicles():
            if veh.detected:
                dw += veh.cumulative_wait
                dn += 1
            else:
                uw += veh.cumulative_wait
                un += 1
        wait_det = dw / dn if dn else None
        wait_undet = uw / un if un else None
        wait_all = (dw + uw) / (dn + un) if dn + un else None
        return wait_all, wait_det, wait_undet


def run_deployment(agent: Agent, env_config: EnvConfig,
                   deploy: DeploymentConfig, seed: int = 0) -> DeploymentResult:
    """Deploy a trained agent under a drifting detection rate.

    The intersection is never reset after the start. Every spawning
    vehicle's detected flag is drawn at the schedule's current rate. The
    agent is updated online every ``update_period`` steps from the
    transitions gathered since the previous update, rewarded with the
    partial (detected-only) signal. A timeline point is recorded at every
    ``instability_window`` boundary; a non-finite training loss aborts the
    run and returns the timeline gathered so far.
    """
    sim_cfg = env_config.sim
    horizon = (deploy.total_steps + 1) * sim_cfg.time_step
    run_cfg = EnvConfig(
        sim=sim_cfg,
        reward_mode=RewardMode.PARTIAL,
        episode_length=max(horizon, sim_cfg.time_step),
        include_time_of_day=env_config.include_time_of_day,
        day_length=env_config.day_length,
    )
    env = TrafficSignalEnv(run_cfg, seed=seed)
    obs = env.reset(seed=seed)
    timeline: list[TimelinePoint] = []
    window = _WindowAccumulator(env.state)
    pending: list[Transition] = []
    failure_step = None
    failure_message = None
    updates_enabled = (deploy.update_period is not None
                       and deploy.update_period > 0
                       and agent.needs_rollout > 0)
    for step in range(1, deploy.total_steps + 1):
        env.set_detection_rate(deploy.schedule.rate_at(env.state.clock))
        action = agent.act(obs, explore=True)
        next_obs, reward, _, _ = env.step(action)
        if updates_enabled:
            pending.append(Transition(obs, action, reward, next_obs, False,
                                      log_prob=agent.last_logprob))
            if len(pending) >= deploy.update_period:
                try:
                    agent.update(pending)
                except DivergenceError as exc:
                    failure_step = step
                    failure_message = str(exc)
                pending = []
        obs = next_obs
        if step % deploy.instability_window == 0 or failure_step is not None:
            wait_all, wait_det, wait_undet = window.window_means(env.state)
            timeline.append(TimelinePoint(
                step=step,
                detection_rate=deploy.schedule.rate_at(env.state.clock),
                wait_all=wait_all,
                wait_detected=wait_det,
                wait_undetected=wait_undet,
            ))
        if failure_step is not None:
            break
    flags = detect_instability([p.wait_all for p in timeline],
                               deploy.instability_threshold,
                               deploy.instability_history)
    for point, flag in zip(timeline, flags):
        point.instability = flag
    return DeploymentResult(
        timeline=timeline,
        instability_flags=sum(flags),
        failure_step=failure_step,
        failure_message=failure_message,
        spawned_total=env.state.spawned_count,
        spawned_detected=env.state.spawned_detected_count,
    )
