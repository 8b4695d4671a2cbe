"""Experiment orchestration: training runs over the (algorithm, detection
rate, seed) grid, detection-rate sweeps, deployment/adaptation runs,
single-checkpoint evaluation, and CSV/SVG report emission.

Each grid cell is self-contained and seeded, so cells can run in any
order or in a worker pool; outputs are sorted by cell key before writing,
which keeps every CSV byte-reproducible.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from trafficlab.adapt import DeploymentConfig, DeploymentResult, run_deployment
from trafficlab.agents import (
    Agent,
    AgentConfig,
    ObservationShapeError,
    Transition,
    load_agent,
    make_agent,
    save_agent,
)
from trafficlab.charts import Series, write_chart
from trafficlab.config import ExperimentSpec
from trafficlab.env import EnvConfig, RewardMode, TrafficSignalEnv
from trafficlab.nn import DivergenceError
from trafficlab.sim import scenario_preset

SWEEP_HEADER = ["algorithm", "scenario", "detection_rate", "seed",
                "wait_all", "wait_detected", "wait_undetected", "episodes"]
TIMELINE_HEADER = ["step", "detection_rate", "wait_all", "wait_detected",
                   "wait_undetected", "instability_flag"]
CURVE_HEADER = ["episode", "end_step", "return", "mean_wait"]

# Hyperparameters that train reliably at desk scale for each controller;
# the [agent] config section and CLI overrides layer on top. The policy
# methods share the exploration floor and batch-mean advantage baseline
# that keep the switch action sampled and the shared reward offset out of
# the gradient; without them the policies fall into a never-switch basin.
_ALGO_DEFAULTS: dict[str, dict] = {
    "ppo": dict(actor_lr=3e-4, critic_lr=1e-3, rollout_length=256,
                ppo_epochs=4, ppo_minibatch=64, clip_epsilon=0.2,
                entropy_coef=0.01, gamma=0.95,
                explore_floor=0.05, center_advantages=True),
    "a2c": dict(actor_lr=1e-2, critic_lr=5e-3, rollout_length=256,
                critic_epochs=10, entropy_coef=0.01, gamma=0.95,
                explore_floor=0.05, center_advantages=True),
    "acktr": dict(actor_lr=0.25, critic_lr=0.1, rollout_length=256,
                  critic_epochs=10, entropy_coef=0.02, gamma=0.95,
                  explore_floor=0.05, center_advantages=True,
                  kfac_damping=1e-2, kfac_decay=0.99,
                  trust_region_radius=1.0, kl_budget=1e-2),
    "dql": dict(q_lr=5e-4, gamma=0.95, batch_size=64, warmup=1000,
                target_sync_period=500),
    "fixed_time": dict(fixed_time_green=30.0),
}

# Training budget each algorithm needs to escape the never-switch basin
# reliably across seeds (measured, not guessed).
TRAIN_STEPS_BY_ALGORITHM = {"ppo": 100_000, "dql": 100_000,
                            "a2c": 250_000, "acktr": 250_000,
                            "fixed_time": 0}


def default_agent_config(algorithm: str, seed: int = 0,
                         train_steps_budget: int = 100_000,
                         overrides: dict | None = None) -> AgentConfig:
    kwargs = dict(_ALGO_DEFAULTS.get(algorithm, {}))
    kwargs.update(overrides or {})
    kwargs["algorithm"] = algorithm
    kwargs["seed"] = seed
    kwargs.setdefault("train_steps_budget", train_steps_budget)
    return AgentConfig(**kwargs)


def build_env_config(scenario: str, detection_rate: float, seed: int,
                     episode_length: float = 3600.0,
                     include_time_of_day: bool = False) -> EnvConfig:
    sim = scenario_preset(scenario, detection_rate=detection_rate,
                          rng_seed=seed)
    return EnvConfig(sim=sim, reward_mode=RewardMode.PARTIAL,
                     episode_length=episode_length,
                     include_time_of_day=include_time_of_day)


def checkpoint_name(algorithm: str, scenario: str, rate: float,
                    seed: int) -> str:
    return f"{algorithm}_{scenario}_r{rate:.2f}_s{seed}.ckpt"


# ---------------------------------------------------------------------------
# training and evaluation drivers
# ---------------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    episode: int
    end_step: int
    episode_return: float
    mean_wait: float | None


def train_agent(agent: Agent, env: TrafficSignalEnv,
                total_steps: int) -> list[EpisodeRecord]:
    """Drive the env for total_steps, feeding the agent its rollouts.

    Returns one record per completed episode. Agents that never update
    (fixed-time) skip the loop entirely.
    """
    records: list[EpisodeRecord] = []
    if total_steps <= 0 or agent.needs_rollout == 0:
        return records
    obs = env.reset()
    pending: list[Transition] = []
    ep_return = 0.0
    ep_index = 0
    for step in range(1, total_steps + 1):
        action = agent.act(obs, explore=True)
        next_obs, reward, done, info = env.step(action)
        pending.append(Transition(obs, action, reward, next_obs, done,
                                  log_prob=agent.last_logprob))
        ep_return += reward
        if len(pending) >= agent.needs_rollout:
            agent.update(pending)
            pending = []
        if done:
            metrics = info["metrics"]
            records.append(EpisodeRecord(ep_index, step, ep_return,
                                         metrics.wait_all))
            ep_index += 1
            ep_return = 0.0
            obs = env.reset()
        else:
            obs = next_obs
    return records


@dataclass
class EvalStats:
    """Greedy-policy evaluation aggregates over N fresh episodes."""

    episodes: int
    mean_return: float
    wait_all: float | None
    wait_detected: float | None
    wait_undetected: float | None
    wait_all_std: float | None
    exited_all: int
    exited_detected: int
    exited_undetected: int
    mean_queue: float

    def to_json_dict(self) -> dict:
        return dict(self.__dict__)


def evaluate_agent(agent: Agent, env_config: EnvConfig, episodes: int,
                   seed: int = 0) -> EvalStats:
    env = TrafficSignalEnv(env_config, seed=seed)
    if agent.obs_dim != env.observation_size:
        raise ObservationShapeError(
            f"checkpoint expects observations of length {agent.obs_dim}, "
            f"environment emits {env.observation_size}")
    wait_det = 0.0
    n_det = 0
    wait_undet = 0.0
    n_undet = 0
    returns = []
    per_episode_wait = []
    queue_total = 0.0
    queue_samples = 0
    for _ in range(episodes):
        obs = env.reset()
        done = False
        ep_return = 0.0
        while not done:
            obs, reward, done, info = env.step(agent.act(obs, explore=False))
            ep_return += reward
            queue_total += sum(info["metrics"].queue_lengths.values())
            queue_samples += 1
        state = env.state
        # census over every vehicle that entered: exited vehicles carry
        # their final waits, vehicles still on the road their accrued ones,
        # so a starved approach cannot hide from the average
        ep_det = state.exited_wait_detected
        ep_n_det = state.exited_n_detected
        ep_undet = state.exited_wait_undetected
        ep_n_undet = state.exited_n_undetected
        for veh in state.iter_vehicles():
            if veh.detected:
                ep_det += veh.cumulative_wait
                ep_n_det += 1
            else:
                ep_undet += veh.cumulative_wait
                ep_n_undet += 1
        wait_det += ep_det
        n_det += ep_n_det
        wait_undet += ep_undet
        n_undet += ep_n_undet
        returns.append(ep_return)
        n_ep = ep_n_det + ep_n_undet
        per_episode_wait.append((ep_det + ep_undet) / n_ep if n_ep else None)
    n_all = n_det + n_undet
    waits = [w for w in per_episode_wait if w is not None]
    return EvalStats(
        episodes=episodes,
        mean_return=float(np.mean(returns)),
        wait_all=(wait_det + wait_undet) / n_all if n_all else None,
        wait_detected=wait_det / n_det if n_det else None,
        wait_undetected=wait_undet / n_undet if n_undet else None,
        wait_all_std=float(np.std(waits)) if len(waits) > 1 else None,
        exited_all=n_all,
        exited_detected=n_det,
        exited_undetected=n_undet,
        mean_queue=queue_total / queue_samples if queue_samples else 0.0,
    )


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        raise ValueError(f"{path} is empty, expected at least a header")
    return rows[0], rows[1:]


def _opt_float(text: str) -> float | None:
    return None if text == "" else float(text)


@dataclass
class SweepRecord:
    """One sweep cell: per-class mean waits of a trained controller
    evaluated at its detection rate."""

    algorithm: str
    scenario: str
    detection_rate: float
    seed: int
    wait_all: float | None
    wait_detected: float | None
    wait_undetected: float | None
    episodes: int

    def row(self) -> list:
        return [self.algorithm, self.scenario, self.detection_rate, self.seed,
                self.wait_all, self.wait_detected, self.wait_undetected,
                self.episodes]

    @classmethod
    def from_row(cls, row: list[str]) -> "SweepRecord":
        return cls(
            algorithm=row[0], scenario=row[1], detection_rate=float(row[2]),
            seed=int(row[3]), wait_all=_opt_float(row[4]),
            wait_detected=_opt_float(row[5]), wait_undetected=_opt_float(row[6]),
            episodes=int(row[7]),
        )


def write_sweep_csv(path, records: list[SweepRecord]) -> None:
    emit_csv(path, SWEEP_HEADER, [r.row() for r in records])


def read_sweep_csv(path) -> list[SweepRecord]:
    header, rows = read_csv(path)
    if header != SWEEP_HEADER:
        raise ValueError(f"unexpected sweep CSV header {header}")
    return [SweepRecord.from_row(r) for r in rows]


def write_timeline_csv(path, result: DeploymentResult) -> None:
    rows = [[p.step, p.detection_rate, p.wait_all, p.wait_detected,
             p.wait_undetected, p.instability] for p in result.timeline]
    emit_csv(path, TIMELINE_HEADER, rows)


def read_timeline_csv(path) -> list[dict]:
    header, rows = read_csv(path)
    if header != TIMELINE_HEADER:
        raise ValueError(f"unexpected timeline CSV header {header}")
    return [dict(
        step=int(r[0]), detection_rate=float(r[1]), wait_all=_opt_float(r[2]),
        wait_detected=_opt_float(r[3]), wait_undetected=_opt_float(r[4]),
        instability_flag=r[5] == "1",
    ) for r in rows]


def write_curve_csv(path, records: list[EpisodeRecord]) -> None:
    rows = [[r.episode, r.end_step, r.episode_return, r.mean_wait]
            for r in records]
    emit_csv(path, CURVE_HEADER, rows)


# ---------------------------------------------------------------------------
# command: train
# ---------------------------------------------------------------------------

@dataclass
class CellResult:
    algorithm: str
    rate: float
    seed: int
    checkpoint: str | None = None
    error: str | None = None

    @property
    def key(self):
        return (self.algorithm, self.rate, self.seed)


def _train_cell(spec: ExperimentSpec, agent_overrides: dict,
                cell: tuple[str, float, int]) -> CellResult:
    algorithm, rate, seed = cell
    out_dir = spec.out_dir
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    curve_dir = os.path.join(out_dir, "curves")
    os.makedirs(ckpt_dir, exist_ok=True)
    os.makedirs(curve_dir, exist_ok=True)
    name = checkpoint_name(algorithm, spec.scenario, rate, seed)
    ckpt_path = os.path.join(ckpt_dir, name)
    try:
        agent_cfg = default_agent_config(
            algorithm, seed=seed, train_steps_budget=spec.train_steps,
            overrides=agent_overrides)
        env_cfg = build_env_config(spec.scenario, rate, seed,
                                   episode_length=spec.episode_length)
        agent = make_agent(agent_cfg, env_cfg.observation_size)
        env = TrafficSignalEnv(env_cfg, seed=seed)
        curve = train_agent(agent, env, spec.train_steps)
        save_agent(agent, ckpt_path)
        write_curve_csv(os.path.join(
            curve_dir, f"train_{name[:-5]}.csv"), curve)
        return CellResult(algorithm, rate, seed, checkpoint=ckpt_path)
    except DivergenceError as exc:
        return CellResult(algorithm, rate, seed, error=f"diverged: {exc}")


def _run_cells(worker, args_list: list, workers: int) -> list:
    if workers <= 1 or len(args_list) <= 1:
        return [worker(*args) for args in args_list]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(worker, *args) for args in args_list]
        return [f.result() for f in futures]


def cmd_train(spec: ExperimentSpec,
              agent_overrides: dict | None = None) -> list[CellResult]:
    """Train one agent per grid cell; divergent cells are recorded and the
    rest continue."""
    cells = list(spec.cells())
    args = [(spec, agent_overrides or {}, cell) for cell in cells]
    results = _run_cells(_train_cell, args, spec.workers)
    return sorted(results, key=lambda r: (r.algorithm, r.rate, r.seed))


# ---------------------------------------------------------------------------
# command: sweep
# ---------------------------------------------------------------------------

def _sweep_cell(spec: ExperimentSpec, agent_overrides: dict,
                cell: tuple[str, float, int]) -> tuple[SweepRecord | None,
                                                       CellResult]:
    algorithm, rate, seed = cell
    name = checkpoint_name(algorithm, spec.scenario, rate, seed)
    ckpt_path = os.path.join(spec.out_dir, "checkpoints", name)
    if not os.path.exists(ckpt_path):
        if spec.train_missing:
            trained = _train_cell(spec, agent_overrides, cell)
            if trained.error:
                return None, trained
        else:
            return None, CellResult(algorithm, rate, seed,
                                    error=f"missing checkpoint {ckpt_path}")
    try:
        agent = load_agent(ckpt_path, expected_algorithm=algorithm)
        env_cfg = build_env_config(spec.scenario, rate, seed + 10_000,
                                   episode_length=spec.episode_length)
        stats = evaluate_agent(agent, env_cfg, spec.eval_episodes,
                               seed=seed + 10_000)
        record = SweepRecord(
            algorithm=algorithm, scenario=spec.scenario, detection_rate=rate,
            seed=seed, wait_all=stats.wait_all,
            wait_detected=stats.wait_detected,
            wait_undetected=stats.wait_undetected, episodes=stats.episodes)
        return record, CellResult(algorithm, rate, seed, checkpoint=ckpt_path)
    except (OSError, ValueError, RuntimeError) as exc:
        return None, CellResult(algorithm, rate, seed, error=str(exc))


def cmd_sweep(spec: ExperimentSpec,
              agent_overrides: dict | None = None
              ) -> tuple[list[SweepRecord], list[CellResult]]:
    """Evaluate each trained cell at its detection rate; emit the sweep CSV,
    a cross-seed summary, and one waiting-time chart per algorithm."""
    cells = list(spec.cells())
    args = [(spec, agent_overrides or {}, cell) for cell in cells]
    outcomes = _run_cells(_sweep_cell, args, spec.workers)
    pairs = sorted(zip(cells, outcomes), key=lambda p: p[0])
    records = [rec for _, (rec, _) in pairs if rec is not None]
    results = [res for _, (_, res) in pairs]
    os.makedirs(spec.out_dir, exist_ok=True)
    write_sweep_csv(os.path.join(spec.out_dir, "sweep.csv"), records)
    _write_sweep_summary(spec, records)
    _write_sweep_charts(spec, records)
    return records, results


def _write_sweep_summary(spec: ExperimentSpec,
                         records: list[SweepRecord]) -> None:
    header = ["algorithm", "scenario", "detection_rate", "wait_all_mean",
              "wait_all_std", "seeds"]
    groups: dict[tuple, list[SweepRecord]] = {}
    for rec in records:
        groups.setdefault((rec.algorithm, rec.scenario, rec.detection_rate),
                          []).append(rec)
    rows = []
    for key in sorted(groups):
        values = [r.wait_all for r in groups[key] if r.wait_all is not None]
        rows.append([
            key[0], key[1], key[2],
            float(np.mean(values)) if values else None,
            float(np.std(values)) if len(values) > 1 else None,
            len(groups[key]),
        ])
    emit_csv(os.path.join(spec.out_dir, "sweep_summary.csv"), header, rows)


def _write_sweep_charts(spec: ExperimentSpec,
                        records: list[SweepRecord]) -> None:
    for algorithm in spec.algorithms:
        recs = [r for r in records if r.algorithm == algorithm]
        if not recs:
            continue
        series = []
        for label, attr in (("all", "wait_all"), ("detected", "wait_detected"),
                            ("undetected", "wait_undetected")):
            xs, ys = [], []
            for rate in sorted({r.detection_rate for r in recs}):
                values = [getattr(r, attr) for r in recs
                          if r.detection_rate == rate
                          and getattr(r, attr) is not None]
                if values:
                    xs.append(rate)
                    ys.append(float(np.mean(values)))
            if xs:
                series.append(Series(label=label, xs=xs, ys=ys))
        if series:
            write_chart(
                os.path.join(spec.out_dir,
                             f"sweep_{algorithm}_{spec.scenario}.svg"),
                series,
                title=f"{algorithm} on {spec.scenario}",
                x_label="detection rate",
                y_label="mean waiting time (s)")


# ---------------------------------------------------------------------------
# command: adapt
# ---------------------------------------------------------------------------

@dataclass
class AdaptRunResult:
    algorithm: str
    seed: int
    timeline_csv: str | None
    instability_flags: int
    aborted: bool
    error: str | None = None


def _adapt_cell(spec: ExperimentSpec, deploy: DeploymentConfig,
                start_rate: float,
                cell: tuple[str, int]) -> AdaptRunResult:
    algorithm, seed = cell
    name = checkpoint_name(algorithm, spec.scenario, start_rate, seed)
    ckpt_path = os.path.join(spec.out_dir, "checkpoints", name)
    try:
        agent = load_agent(ckpt_path, expected_algorithm=algorithm)
        env_cfg = build_env_config(spec.scenario, start_rate, seed,
                                   episode_length=spec.episode_length)
        result = run_deployment(agent, env_cfg, deploy, seed=seed + 50_000)
        csv_path = os.path.join(spec.out_dir,
                                f"timeline_{algorithm}_s{seed}.csv")
        write_timeline_csv(csv_path, result)
        return AdaptRunResult(
            algorithm=algorithm, seed=seed, timeline_csv=csv_path,
            instability_flags=result.instability_flags,
            aborted=result.aborted,
            error=result.failure_message if result.aborted else None)
    except (OSError, ValueError, RuntimeError) as exc:
        return AdaptRunResult(algorithm=algorithm, seed=seed,
                              timeline_csv=None, instability_flags=0,
                              aborted=True, error=str(exc))


def cmd_adapt(spec: ExperimentSpec, deploy: DeploymentConfig
              ) -> list[AdaptRunResult]:
    """Deploy each pre-trained agent on the drifting-detection schedule;
    emit per-run timelines, an instability summary, and a comparison chart."""
    start_rate = deploy.schedule.breakpoints[0][1]
    cells = [(algo, seed) for algo in spec.algorithms for seed in spec.seeds]
    args = [(spec, deploy, start_rate, cell) for cell in cells]
    os.makedirs(spec.out_dir, exist_ok=True)
    results = _run_cells(_adapt_cell, args, spec.workers)
    results.sort(key=lambda r: (r.algorithm, r.seed))
    emit_csv(os.path.join(spec.out_dir, "adapt_summary.csv"),
             ["algorithm", "seed", "instability_flags", "aborted", "error"],
             [[r.algorithm, r.seed, r.instability_flags, r.aborted,
               r.error or ""] for r in results])
    _write_adapt_chart(spec, results)
    return results


def _write_adapt_chart(spec: ExperimentSpec,
                       results: list[AdaptRunResult]) -> None:
    series = []
    for algorithm in spec.algorithms:
        per_step: dict[int, list[float]] = {}
        for res in results:
            if res.algorithm != algorithm or res.timeline_csv is None:
                continue
            for row in read_timeline_csv(res.timeline_csv):
                if row["wait_all"] is not None:
                    per_step.setdefault(row["step"], []).append(row["wait_all"])
        if per_step:
            xs = sorted(per_step)
            series.append(Series(
                label=algorithm, xs=[float(x) for x in xs],
                ys=[float(np.mean(per_step[x])) for x in xs]))
    if series:
        write_chart(os.path.join(spec.out_dir, f"adapt_{spec.scenario}.svg"),
                    series, title=f"deployment on {spec.scenario}",
                    x_label="step", y_label="mean waiting time (s)")


# ---------------------------------------------------------------------------
# command: eval
# ---------------------------------------------------------------------------

def cmd_eval(checkpoint: str, scenario: str, detection_rate: float,
             episodes: int, seed: int = 0, episode_length: float = 3600.0,
             include_time_of_day: bool = False,
             out_path: str | None = None) -> EvalStats:
    """Greedy evaluation of one checkpoint; raises ObservationShapeError if
    the checkpoint and environment disagree on the observation layout."""
    agent = load_agent(checkpoint)
    env_cfg = build_env_config(scenario, detection_rate, seed,
                               episode_length=episode_length,
                               include_time_of_day=include_time_of_day)
    stats = evaluate_agent(agent, env_cfg, episodes, seed=seed)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            json.dump({"checkpoint": checkpoint, "scenario": scenario,
                       "detection_rate": detection_rate, "seed": seed,
                       **stats.to_json_dict()}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return stats
