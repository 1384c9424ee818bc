"""Seeded training runs, checkpoints, evaluation and the exact-metric verification suite."""

from __future__ import annotations

import csv
import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from .bisim import bisim_fixed_point, pseudometric_violations, verify_value_bounds
from .checkpoint import load_arrays, mlp_arrays, mlp_from_arrays, mlp_meta, save_arrays
from .config import RunConfig
from .env import Collector, DistractedEnv, ReplayBuffer, collect
from .evaluation import (DegenerateClusteringError, ch_index, cluster_reward_coherence,
                         nearest_prototype_assign)
from .mdp import random_mdp
from .trainer import CbmState, StepRecord, train_step

METRICS_HEADER = ["step", "L_CBM", "L_P", "code_entropy", "usage_min", "usage_max"]
EVAL_HEADER = ["step", "ch", "n_clusters", "median_return_spread"]
EVAL_SEED_OFFSET = 1_000_000


def metrics_row(record: StepRecord) -> list:
    return [record.step, repr(float(record.loss_cbm)), repr(float(record.loss_dyn)),
            repr(float(record.code_entropy)), record.usage_min, record.usage_max]


@dataclass
class RunSetup:
    env: DistractedEnv
    buffer: ReplayBuffer
    collector: Collector
    eval_buffer: ReplayBuffer
    state: CbmState
    batch_rng: np.random.Generator


def setup_run(config: RunConfig, seed: int | None = None) -> RunSetup:
    """Environment, warm-up data, held-out evaluation data and initial learner."""
    seed = config.run.seed if seed is None else seed
    ecfg = config.env
    env = DistractedEnv(ecfg, seed)
    buffer = ReplayBuffer(config.run.buffer_capacity, ecfg.stacked_obs_dim, ecfg.physical_dim)
    collector = Collector(env, buffer, seed)
    collector.run(config.run.warmup_steps)
    eval_seed = EVAL_SEED_OFFSET + seed
    eval_buffer = collect(DistractedEnv(ecfg, eval_seed),
                          ReplayBuffer(max(config.run.eval_samples, 1), ecfg.stacked_obs_dim,
                                       ecfg.physical_dim),
                          config.run.eval_samples, eval_seed)
    n = buffer.size
    if n == 0:
        # no data yet: prototypes start on the unit sphere with neutral rewards
        cbm = dataclasses.replace(config.cbm_config(seed), prototype_init="sphere")
        state = CbmState(cbm, ecfg.stacked_obs_dim, ecfg.n_actions, np.array([0.5]))
    else:
        state = CbmState(config.cbm_config(seed), ecfg.stacked_obs_dim, ecfg.n_actions,
                         buffer.rewards[:n], buffer.obs[:n])
    return RunSetup(env, buffer, collector, eval_buffer, state,
                    np.random.default_rng([seed, 4]))


@dataclass
class EvalResult:
    ch: float
    n_clusters: int
    median_return_spread: float
    assignment: np.ndarray
    latents: np.ndarray


def evaluate(encoder, prototypes, buffer: ReplayBuffer) -> EvalResult:
    """CH index of the buffer's physical states grouped by nearest prototype."""
    n = buffer.size
    latents = np.asarray(encoder(buffer.obs[:n]), dtype=np.float64)
    assignment = nearest_prototype_assign(latents, prototypes)
    report = ch_index(buffer.physical[:n], assignment)
    coherence = cluster_reward_coherence(buffer.returns[:n], assignment)
    return EvalResult(report.ch, report.k, coherence.median_spread, assignment, latents)


def state_arrays(state: CbmState) -> tuple[dict, dict]:
    arrays = {**mlp_arrays("encoder", state.encoder), **mlp_arrays("dynamics", state.dynamics),
              "prototypes/vectors": state.prototypes.vectors,
              "prototypes/rewards": state.prototypes.rewards}
    for i, a in enumerate(state.optimizer.state_arrays()):
        arrays[f"optimizer/{i}"] = a
    meta = {"step": state.step, "encoder": mlp_meta(state.encoder),
            "dynamics": mlp_meta(state.dynamics), "optimizer_t": state.optimizer.t,
            "config": dataclasses.asdict(state.config)}
    return arrays, meta


def save_checkpoint(path, state: CbmState) -> None:
    arrays, meta = state_arrays(state)
    save_arrays(path, arrays, meta)


@dataclass
class Checkpoint:
    step: int
    encoder: object
    dynamics: object
    prototypes: np.ndarray
    proto_rewards: np.ndarray
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    arrays, meta = load_arrays(path)
    if "encoder" not in meta or "prototypes/vectors" not in arrays:
        raise ValueError(f"{path}: not a learner checkpoint")
    return Checkpoint(int(meta["step"]), mlp_from_arrays("encoder", arrays, meta["encoder"]),
                      mlp_from_arrays("dynamics", arrays, meta["dynamics"]),
                      arrays["prototypes/vectors"], arrays["prototypes/rewards"], meta)


def save_buffer(path, buffer: ReplayBuffer) -> None:
    save_arrays(path, buffer.to_arrays(), buffer.meta())


def load_buffer(path) -> ReplayBuffer:
    arrays, meta = load_arrays(path)
    return ReplayBuffer.from_arrays(arrays, meta)


@dataclass
class RunSummary:
    seed: int
    objective: str
    steps: int
    ch_initial: float
    ch_final: float
    ch_history: list


def _eval_row(step, result: EvalResult):
    return [step, repr(float(result.ch)), result.n_clusters,
            repr(float(result.median_return_spread))]


def train(config: RunConfig, out_dir=None, seed: int | None = None,
          objective: str | None = None) -> RunSummary:
    """Collect-and-train loop; writes metrics, evaluations and checkpoints into ``out_dir``.

    One environment step is collected per training step after the warm-up.
    Without ``out_dir`` nothing is written.
    """
    seed = config.run.seed if seed is None else seed
    if objective is not None:
        config = dataclasses.replace(config, cbm=dataclasses.replace(config.cbm,
                                                                     objective=objective))
    config.validate()
    run = config.run
    setup = setup_run(config, seed)
    state = setup.state
    writers = []
    if out_dir is not None:
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        eval_fh = open(os.path.join(out_dir, "eval.csv"), "w", newline="")
        writers = [csv.writer(metrics_fh), csv.writer(eval_fh)]
        writers[0].writerow(METRICS_HEADER)
        writers[1].writerow(EVAL_HEADER)
        save_buffer(os.path.join(out_dir, "eval_buffer.ckpt"), setup.eval_buffer)

    history = []

    def checkpoint(step):
        if run.eval_samples > 0:
            try:
                result = evaluate(state.encoder, state.prototypes.vectors, setup.eval_buffer)
            except DegenerateClusteringError:
                result = EvalResult(float("nan"), 1, float("nan"), None, None)
            history.append((step, result.ch))
            if writers:
                writers[1].writerow(_eval_row(step, result))
        if writers:
            save_checkpoint(os.path.join(ckpt_dir, f"step_{step:07d}.ckpt"), state)

    try:
        checkpoint(0)
        for step in range(1, run.total_steps + 1):
            setup.collector.step()
            record = train_step(state, setup.buffer.sample(state.config.batch_size,
                                                           setup.batch_rng))
            if writers:
                writers[0].writerow(metrics_row(record))
            if step % run.eval_interval == 0 or step == run.total_steps:
                checkpoint(step)
        if writers:
            setup.collector.flush()
            save_buffer(os.path.join(out_dir, "buffer.ckpt"), setup.buffer)
    finally:
        if writers:
            metrics_fh.close()
            eval_fh.close()
    ch = [c for _, c in history]
    return RunSummary(seed, state.config.objective, run.total_steps,
                      ch[0] if ch else float("nan"), ch[-1] if ch else float("nan"), history)


# -- exact-metric verification ------------------------------------------------

VERIFY_HEADER = ["index", "seed", "n_states", "n_actions", "c", "gamma", "epsilon", "iterations",
                 "n_pairs", "n_triples", "pair_violations", "triple_violations",
                 "metric_violations", "max_pair_ratio"]


@dataclass
class VerifyRow:
    index: int
    seed: int
    n_states: int
    n_actions: int
    c: float
    gamma: float
    epsilon: float
    iterations: int
    n_pairs: int
    n_triples: int
    pair_violations: int
    triple_violations: int
    metric_violations: int
    max_pair_ratio: float

    def as_csv(self) -> list:
        return [repr(v) if isinstance(v, float) else v for v in dataclasses.astuple(self)]

    @property
    def violations(self) -> int:
        return self.pair_violations + self.triple_violations + self.metric_violations


def verify_suite(n_mdps: int = 100, max_states: int = 8, max_actions: int = 3,
                 c_values=(0.5, 0.9), seed: int = 0, tol: float = 1e-8) -> list:
    """Random MDPs checked against the metric axioms and both value bounds, with gamma = c.

    Sizes are drawn uniformly from [2, max_states] x [1, max_actions]; c cycles
    through ``c_values``; epsilon is the median off-diagonal distance.
    """
    if max_states < 2 or max_actions < 1:
        raise ValueError("need max_states >= 2 and max_actions >= 1")
    rng = np.random.default_rng([seed, 21])
    rows = []
    for index in range(n_mdps):
        n = int(rng.integers(2, max_states + 1))
        a = int(rng.integers(1, max_actions + 1))
        mdp_seed = int(rng.integers(2**31))
        c = float(c_values[index % len(c_values)])
        mdp = random_mdp(mdp_seed, n, a, discount=c)
        metric = bisim_fixed_point(mdp, c)
        off = metric.dist[np.triu_indices(n, 1)]
        epsilon = float(np.median(off)) if np.median(off) > 0 else 1.0
        report = verify_value_bounds(mdp, metric, c, epsilon, tol=tol)
        axioms = pseudometric_violations(metric.dist, tol)
        rows.append(VerifyRow(index, mdp_seed, n, a, c, c, epsilon, metric.iterations,
                              report.n_pairs, report.n_triples, len(report.pair_violations),
                              len(report.triple_violations), sum(axioms.values()),
                              float(report.max_pair_ratio)))
    return rows


def write_verify_report(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(VERIFY_HEADER)
        for row in rows:
            writer.writerow(row.as_csv())
