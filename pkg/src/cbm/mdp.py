"""Finite MDPs: representation, value iteration, random instances, text I/O."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

FORMAT_TAG = "finite-mdp/1"


@dataclass(frozen=True)
class FiniteMdp:
    """Tabular MDP with deterministic action-dependent rewards.

    Attributes:
        transition: array of shape (n_states, n_actions, n_states); entry
            [s, a, s'] is P(s' | s, a).
        reward: array of shape (n_states, n_actions) with values in [0, 1].
        discount: discount factor in [0, 1).
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float

    def __post_init__(self):
        transition = np.array(self.transition, dtype=np.float64)
        reward = np.array(self.reward, dtype=np.float64)
        if reward.ndim == 1:
            reward = reward[:, None]
        if transition.ndim != 3 or transition.shape[0] != transition.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {transition.shape}")
        if reward.shape != transition.shape[:2]:
            raise ValueError(
                f"reward shape {reward.shape} does not match transition {transition.shape[:2]}")
        if not np.all(np.isfinite(transition)) or np.any(transition < 0):
            raise ValueError("transition probabilities must be finite and nonnegative")
        if np.max(np.abs(transition.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("transition rows must sum to 1 within 1e-12")
        if not np.all(np.isfinite(reward)) or reward.min() < 0.0 or reward.max() > 1.0:
            raise ValueError("rewards must lie in [0, 1]")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        transition.flags.writeable = False
        reward.flags.writeable = False
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def permuted(self, perm) -> FiniteMdp:
        """Relabel states so that new state ``i`` is old state ``perm[i]``."""
        perm = np.asarray(perm)
        return FiniteMdp(self.transition[perm][:, :, perm], self.reward[perm], self.discount)

    def with_discount(self, discount: float) -> FiniteMdp:
        return FiniteMdp(self.transition, self.reward, discount)


@dataclass
class ValueFunction:
    values: np.ndarray
    iterations: int = 0
    # sup-norm change between successive iterates
    deltas: list = field(default_factory=list)


def bellman_backup(mdp: FiniteMdp, values: np.ndarray) -> np.ndarray:
    q = mdp.reward + mdp.discount * mdp.transition @ values
    return q.max(axis=1)


def value_iteration(mdp: FiniteMdp, tol: float = 1e-10, max_iter: int = 100_000) -> ValueFunction:
    """Optimal state values by value iteration from V_0 = 0.

    Iteration stops once the sup-norm change drops to tol * (1 - gamma) / gamma,
    which bounds the Bellman residual of the returned values by ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    gamma = mdp.discount
    values = np.zeros(mdp.n_states)
    if gamma == 0.0:
        values = bellman_backup(mdp, values)
        return ValueFunction(values, 1, [float(np.max(np.abs(values)))])
    threshold = tol * (1.0 - gamma) / gamma
    deltas = []
    for it in range(1, max_iter + 1):
        new = bellman_backup(mdp, values)
        if not np.all(np.isfinite(new)):
            raise FloatingPointError("non-finite value encountered; malformed MDP")
        delta = float(np.max(np.abs(new - values)))
        deltas.append(delta)
        values = new
        if delta <= threshold:
            return ValueFunction(values, it, deltas)
    raise RuntimeError(f"value iteration did not converge in {max_iter} iterations")


def random_mdp(seed: int, n_states: int, n_actions: int, discount: float = 0.9) -> FiniteMdp:
    """Dense random MDP: normalized uniform transition rows, uniform rewards."""
    if n_states < 1 or n_actions < 1:
        raise ValueError("n_states and n_actions must be >= 1")
    rng = np.random.default_rng(seed)
    raw = rng.uniform(size=(n_states, n_actions, n_states))
    transition = raw / raw.sum(axis=2, keepdims=True)
    reward = rng.uniform(size=(n_states, n_actions))
    return FiniteMdp(transition, reward, discount)


def dumps_mdp(mdp: FiniteMdp) -> str:
    lines = [
        f"format = {FORMAT_TAG}",
        f"n_states = {mdp.n_states}",
        f"n_actions = {mdp.n_actions}",
        f"discount = {mdp.discount!r}",
        "",
        "# reward[s][a]: one row per state",
        "[reward]",
    ]
    lines += [" ".join(repr(float(x)) for x in row) for row in mdp.reward]
    for a in range(mdp.n_actions):
        lines += ["", f"# P(s' | s, a={a}): one row per source state", f"[transition {a}]"]
        lines += [" ".join(repr(float(x)) for x in row) for row in mdp.transition[:, a, :]]
    return "\n".join(lines) + "\n"


def loads_mdp(text: str) -> FiniteMdp:
    header = {}
    blocks: dict[str, list[list[float]]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            blocks[current] = []
        elif current is None:
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            header[key] = value
        else:
            blocks[current].append([float(tok) for tok in line.split()])
    if header.get("format") != FORMAT_TAG:
        raise ValueError(f"unsupported MDP format {header.get('format')!r}")
    n_states = int(header["n_states"])
    n_actions = int(header["n_actions"])
    reward = np.array(blocks["reward"], dtype=np.float64).reshape(n_states, n_actions)
    transition = np.empty((n_states, n_actions, n_states))
    for a in range(n_actions):
        transition[:, a, :] = np.array(blocks[f"transition {a}"]).reshape(n_states, n_states)
    return FiniteMdp(transition, reward, float(header["discount"]))


def save_mdp(mdp: FiniteMdp, path: str | os.PathLike) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_mdp(mdp))


def load_mdp(path: str | os.PathLike) -> FiniteMdp:
    with open(path) as fh:
        return loads_mdp(fh.read())
