"""Clustering with bisimulation metrics: the representation-learning step.

Per training step, with a sampled batch {o_i, a_i, r_i, o'_i}:

1. encode o and o' into latents Z and Z';
2. predicted assignments P = softmax_k(cos(z_i, c_k) / tau);
3. prototype transitions C' from the latent dynamics model;
4. approximate bisimulation distances D[k, i] = |r_i - r_k^c| + ||z'_i - c'_k||,
   with z' and c' unit-normalized under the default cosine transition metric;
5. target codes Q by Sinkhorn on -D;
6. prototype rewards r^c by EMA of the code-weighted batch reward;
7. one optimizer step on L_CBM + L_P, with Q held constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .env import TransitionBatch
from .nn import Adam, Mlp, Sgd, relu_pattern
from .sinkhorn import code_entropy, codes_from_distances

OBJECTIVES = ("cbm", "dynamics_only")


@dataclass
class CbmConfig:
    n_prototypes: int = 128
    batch_size: int = 128
    latent_dim: int = 50
    hidden_dim: int = 256
    encoder_hidden_layers: int = 1
    dynamics_hidden_layers: int = 2
    temperature: float = 0.1
    reward_ema: float = 0.01
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 3
    learning_rate: float = 5e-4
    optimizer: str = "adam"
    seed: int = 0
    reward_weight: float = 1.0
    transition_weight: float = 1.0
    normalize_prototypes: bool = False
    objective: str = "cbm"
    prototype_init: str = "latent"
    transition_metric: str = "cosine"
    dtype: str = "float32"

    def validate(self):
        for name in ("n_prototypes", "batch_size", "latent_dim", "hidden_dim", "sinkhorn_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be >= 1")
        for name in ("encoder_hidden_layers", "dynamics_hidden_layers"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name}: must be >= 0")
        for name in ("temperature", "sinkhorn_epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name}: must be positive")
        if not 0.0 <= self.reward_ema <= 1.0:
            raise ValueError("reward_ema: must lie in [0, 1]")
        if self.learning_rate < 0:
            raise ValueError("learning_rate: must be nonnegative")
        if self.reward_weight < 0 or self.transition_weight < 0:
            raise ValueError("reward_weight/transition_weight: must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer: unknown optimizer {self.optimizer!r}")
        if self.prototype_init not in ("latent", "sphere"):
            raise ValueError(f"prototype_init: unknown scheme {self.prototype_init!r}")
        if self.transition_metric not in ("cosine", "euclidean"):
            raise ValueError(f"transition_metric: unknown metric {self.transition_metric!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype: must be float32 or float64, got {self.dtype!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective: must be one of {OBJECTIVES}")


@dataclass
class PrototypeSet:
    vectors: np.ndarray      # K x d
    rewards: np.ndarray      # K, each in [0, 1]

    @property
    def n(self) -> int:
        return self.vectors.shape[0]


def _log_softmax(logits, axis):
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _unit_rows(x, what):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError(f"zero-norm {what}: normalization undefined")
    return x / norms, norms


def _normalization_backward(unit, norms, grad_unit):
    # d(x/|x|) = (g - u (u . g)) / |x|
    return (grad_unit - unit * np.sum(unit * grad_unit, axis=1, keepdims=True)) / norms


def predict_assignments(latents, prototypes, temperature: float) -> np.ndarray:
    """K x B predicted assignments: column i is softmax_k(cos(z_i, c_k) / temperature)."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z, _ = _unit_rows(np.atleast_2d(latents), "latent")
    c, _ = _unit_rows(np.atleast_2d(prototypes), "prototype")
    if z.shape[1] != c.shape[1]:
        raise ValueError(f"latent dim {z.shape[1]} != prototype dim {c.shape[1]}")
    logits = c @ z.T / temperature
    return np.exp(_log_softmax(logits, axis=0))


def cbm_loss(predicted, codes) -> float:
    """Batch-mean cross entropy -sum_k q_ki log p_ki."""
    predicted = np.asarray(predicted)
    codes = np.asarray(codes)
    if predicted.shape != codes.shape:
        raise ValueError("predicted and target assignments differ in shape")
    if np.any(predicted <= 0):
        raise ValueError("predicted assignments must be strictly positive")
    return float(-np.sum(codes * np.log(predicted)) / predicted.shape[1])


def cbm_loss_and_grads(latents, prototypes, codes, temperature):
    """L_CBM with gradients w.r.t. latents (B x d) and prototypes (K x d)."""
    z, z_norm = _unit_rows(latents, "latent")
    c, c_norm = _unit_rows(prototypes, "prototype")
    b = z.shape[0]
    logits = c @ z.T / temperature
    log_p = _log_softmax(logits, axis=0)
    loss = float(-np.sum(codes * log_p) / b)
    # reduces to (P - Q) / B when code columns sum to one
    grad_logits = (np.exp(log_p) * codes.sum(axis=0, keepdims=True) - codes) / b
    grad_c = grad_logits @ z / temperature
    grad_z = grad_logits.T @ c / temperature
    return (loss,
            _normalization_backward(z, z_norm, grad_z),
            _normalization_backward(c, c_norm, grad_c))


def cpc_dynamics_loss(predictions, targets, temperature: float) -> float:
    return cpc_loss_and_grads(predictions, targets, temperature)[0]


def cpc_loss_and_grads(predictions, targets, temperature):
    """One-step InfoNCE with cosine similarity and in-batch negatives.

    Loss is mean_i -log softmax_k(f(zhat_i, z'_k) / tau)[i]; returns
    ``(loss, grad_predictions, grad_targets)``.
    """
    a, a_norm = _unit_rows(np.atleast_2d(predictions), "prediction")
    t, t_norm = _unit_rows(np.atleast_2d(targets), "target")
    b = a.shape[0]
    logits = a @ t.T / temperature
    log_soft = _log_softmax(logits, axis=1)
    loss = float(-np.trace(log_soft) / b)
    grad_logits = (np.exp(log_soft) - np.eye(b)) / b
    grad_a = grad_logits @ t / temperature
    grad_t = grad_logits.T @ a / temperature
    return (loss,
            _normalization_backward(a, a_norm, grad_a),
            _normalization_backward(t, t_norm, grad_t))


def prototype_reward_estimate(codes, rewards, row_tol: float | None = None) -> np.ndarray:
    """Code-weighted average batch reward per prototype.

    With exact equipartition the weights (K/B) q_kj sum to one over j. Codes
    from a fixed number of Sinkhorn rounds only approximately satisfy the row
    marginal, so each row is normalized by its actual mass, which keeps every
    estimate a convex combination of batch rewards. Rows without mass yield NaN.

    Args:
        codes: K x B code matrix with unit column sums.
        rewards: length-B batch rewards in [0, 1].
        row_tol: if set, reject codes whose row sums deviate from B/K by more.
    """
    codes = np.asarray(codes, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    k, b = codes.shape
    if rewards.shape != (b,):
        raise ValueError(f"expected {b} rewards, got shape {rewards.shape}")
    if np.any(codes < 0) or np.max(np.abs(codes.sum(axis=0) - 1.0)) > 1e-6:
        raise ValueError("codes violate the column marginal")
    row_mass = codes.sum(axis=1)
    if row_tol is not None and np.max(np.abs(row_mass - b / k)) > row_tol:
        raise ValueError("codes violate the row marginal")
    with np.errstate(invalid="ignore", divide="ignore"):
        est = (codes @ rewards) / row_mass
    est[row_mass <= 0] = np.nan
    return np.clip(est, 0.0, 1.0)


def prototype_reward_update(rewards, estimates, beta: float) -> np.ndarray:
    """EMA r <- beta * r_hat + (1 - beta) * r; NaN estimates leave r unchanged."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    rewards = np.asarray(rewards, dtype=np.float64)
    estimates = np.asarray(estimates, dtype=np.float64)
    updated = np.where(np.isnan(estimates), rewards, beta * estimates + (1.0 - beta) * rewards)
    return np.clip(updated, 0.0, 1.0)


def one_hot(actions, n_actions):
    actions = np.asarray(actions, dtype=np.int64)
    out = np.zeros((len(actions), n_actions))
    out[np.arange(len(actions)), actions] = 1.0
    return out


def prototype_transitions(prototypes, dynamics: Mlp, actions, n_actions: int) -> np.ndarray:
    """Latent successors c'_k = P(c_k, a_k) for one action index per prototype."""
    prototypes = np.atleast_2d(prototypes)
    actions = np.asarray(actions)
    if len(actions) != len(prototypes):
        raise ValueError("need exactly one action per prototype")
    inputs = np.concatenate([prototypes, one_hot(actions, n_actions)], axis=1)
    return dynamics(inputs)


def bisim_distance_matrix(next_latents, rewards, proto_rewards, proto_next,
                          reward_weight=1.0, transition_weight=1.0,
                          normalized=False) -> np.ndarray:
    """K x B approximate distances |r_i - r_k^c| + ||z'_i - c'_k||.

    With ``normalized`` both latent sets are scaled to unit norm first, so the
    transition term is the chordal (cosine) distance in [0, 2].
    """
    z = np.atleast_2d(np.asarray(next_latents, dtype=np.float64))
    c = np.atleast_2d(np.asarray(proto_next, dtype=np.float64))
    r = np.asarray(rewards, dtype=np.float64)
    rc = np.asarray(proto_rewards, dtype=np.float64)
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(c))):
        raise ValueError("non-finite latents")
    if z.shape[1] != c.shape[1] or len(r) != len(z) or len(rc) != len(c):
        raise ValueError("shape mismatch between latents, rewards and prototypes")
    if normalized:
        z, _ = _unit_rows(z, "latent")
        c, _ = _unit_rows(c, "prototype successor")
    sq = (np.sum(c * c, axis=1)[:, None] + np.sum(z * z, axis=1)[None, :] - 2.0 * c @ z.T)
    transition = np.sqrt(np.maximum(sq, 0.0))
    reward = np.abs(rc[:, None] - r[None, :])
    return reward_weight * reward + transition_weight * transition


class CbmState:
    """All learnable state: encoder, dynamics model, prototypes, optimizer."""

    def __init__(self, config: CbmConfig, obs_dim: int, n_actions: int, initial_rewards,
                 initial_obs=None):
        """
        Args:
            initial_rewards: replay rewards; each prototype reward starts as one draw.
            initial_obs: replay observations aligned with ``initial_rewards``;
                required when ``config.prototype_init == "latent"``, where each
                prototype starts at the encoding of the drawn observation.
        """
        config.validate()
        self.config = config
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        rng = np.random.default_rng([config.seed, 11])
        d, h = config.latent_dim, config.hidden_dim
        self.encoder = Mlp([obs_dim] + [h] * config.encoder_hidden_layers + [d], rng,
                           normalize=True, tanh_output=True, dtype=config.dtype)
        self.dynamics = Mlp([d + n_actions] + [h] * config.dynamics_hidden_layers + [d], rng,
                            normalize=False, tanh_output=True, dtype=config.dtype)
        vectors = rng.normal(size=(config.n_prototypes, d))
        vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
        initial_rewards = np.asarray(initial_rewards, dtype=np.float64)
        picks = rng.choice(len(initial_rewards), size=config.n_prototypes,
                           replace=len(initial_rewards) < config.n_prototypes)
        if config.prototype_init == "latent":
            if initial_obs is None or len(initial_obs) != len(initial_rewards):
                raise ValueError("prototype_init: 'latent' needs observations aligned with rewards")
            vectors = self.encoder(np.asarray(initial_obs, dtype=np.float64)[picks])
        self.prototypes = PrototypeSet(vectors.astype(config.dtype), initial_rewards[picks].copy())
        self.action_rng = np.random.default_rng([config.seed, 12])
        self.step = 0
        self.optimizer = self._make_optimizer()

    def _make_optimizer(self):
        cls = Adam if self.config.optimizer == "adam" else Sgd
        return cls(self.params, lr=self.config.learning_rate)

    @property
    def params(self) -> list:
        return self.encoder.params + [self.prototypes.vectors] + self.dynamics.params

    @property
    def param_names(self) -> list:
        return ([f"encoder/{n}" for n in self.encoder.param_names] + ["prototypes"]
                + [f"dynamics/{n}" for n in self.dynamics.param_names])

    def encode(self, obs):
        return self.encoder(obs)

    def mark_updated(self):
        self.encoder.mark_updated()
        self.dynamics.mark_updated()


@dataclass
class StepRecord:
    step: int
    loss_cbm: float
    loss_dyn: float
    code_entropy: float
    usage: np.ndarray = field(repr=False)

    @property
    def usage_min(self) -> int:
        return int(self.usage.min())

    @property
    def usage_max(self) -> int:
        return int(self.usage.max())


def compute_codes(state: CbmState, batch: TransitionBatch, next_latents=None, actions=None):
    """Target codes, distance matrix and prototype successors for a batch."""
    cfg = state.config
    if next_latents is None:
        next_latents = state.encode(batch.next_obs)
    if actions is None:
        actions = state.action_rng.integers(state.n_actions, size=cfg.n_prototypes)
    proto_next = prototype_transitions(state.prototypes.vectors, state.dynamics, actions,
                                       state.n_actions)
    dist = bisim_distance_matrix(next_latents, batch.rewards, state.prototypes.rewards,
                                 proto_next, cfg.reward_weight, cfg.transition_weight,
                                 normalized=cfg.transition_metric == "cosine")
    codes = codes_from_distances(dist, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters)
    return codes, dist, proto_next


def encode_pair(state: CbmState, batch: TransitionBatch):
    """One encoder pass over ``[o; o']``; returns ``(latents, cache)`` with 2B rows."""
    return state.encoder.forward(np.concatenate([batch.obs, batch.next_obs], axis=0))


def losses_and_grads(state: CbmState, batch: TransitionBatch, codes, objective=None,
                     encoded=None, term: str = "total"):
    """(L_CBM, L_P, selected loss, grads aligned with state.params) with codes held constant.

    Args:
        objective: "cbm" trains on L_CBM + L_P, "dynamics_only" on L_P alone.
        encoded: optional output of :func:`encode_pair` to reuse.
        term: which loss the gradients belong to: "total" (the objective's
            training loss), "cbm" (L_CBM alone) or "dyn" (L_P alone).
    """
    cfg = state.config
    objective = objective or cfg.objective
    if term == "total":
        use_cbm, use_dyn = objective == "cbm", True
    elif term in ("cbm", "dyn"):
        use_cbm, use_dyn = term == "cbm", term == "dyn"
    else:
        raise ValueError(f"unknown loss term {term!r}")
    latents, enc_cache = encoded or encode_pair(state, batch)
    b = len(batch)
    z, zn = latents[:b], latents[b:]
    dyn_in = np.concatenate([z, one_hot(batch.actions, state.n_actions)], axis=1)
    zhat, dyn_cache = state.dynamics.forward(dyn_in)

    loss_dyn, g_zhat, g_zn = cpc_loss_and_grads(zhat, zn, cfg.temperature)
    if use_dyn:
        dyn_grads, g_dyn_in = state.dynamics.backward(dyn_cache, g_zhat)
        g_z = g_dyn_in[:, :cfg.latent_dim]
    else:
        dyn_grads = [np.zeros_like(p) for p in state.dynamics.params]
        g_z, g_zn = np.zeros_like(z), np.zeros_like(zn)

    if use_cbm:
        loss_cbm, g_z_cbm, g_c = cbm_loss_and_grads(z, state.prototypes.vectors, codes,
                                                    cfg.temperature)
        g_z = g_z + g_z_cbm
    else:
        loss_cbm = cbm_loss(predict_assignments(z, state.prototypes.vectors, cfg.temperature),
                            codes)
        g_c = np.zeros_like(state.prototypes.vectors)

    enc_grads, _ = state.encoder.backward(enc_cache, np.concatenate([g_z, g_zn], axis=0),
                                          input_grad=False)
    selected = (loss_cbm if use_cbm else 0.0) + (loss_dyn if use_dyn else 0.0)
    return loss_cbm, loss_dyn, selected, enc_grads + [g_c] + dyn_grads


def activation_pattern(state: CbmState, batch: TransitionBatch) -> np.ndarray:
    """ReLU pattern of every network evaluation inside :func:`losses_and_grads`."""
    latents = state.encoder(np.concatenate([batch.obs, batch.next_obs], axis=0))
    dyn_in = np.concatenate([latents[:len(batch)], one_hot(batch.actions, state.n_actions)],
                            axis=1)
    return np.concatenate([
        relu_pattern(state.encoder, np.concatenate([batch.obs, batch.next_obs], axis=0)),
        relu_pattern(state.dynamics, dyn_in)])


def train_step(state: CbmState, batch: TransitionBatch) -> StepRecord:
    """One CBM update on ``batch``; mutates ``state`` and returns step metrics."""
    cfg = state.config
    if len(batch) < 1:
        raise ValueError("empty batch")
    encoded = encode_pair(state, batch)
    codes, _, _ = compute_codes(state, batch, next_latents=encoded[0][len(batch):])
    estimates = prototype_reward_estimate(codes, batch.rewards)
    state.prototypes.rewards = prototype_reward_update(state.prototypes.rewards, estimates,
                                                       cfg.reward_ema)
    loss_cbm, loss_dyn, _, grads = losses_and_grads(state, batch, codes, encoded=encoded)
    state.optimizer.step(grads)
    if cfg.normalize_prototypes:
        vecs = state.prototypes.vectors
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    state.mark_updated()
    state.step += 1
    usage = np.bincount(np.argmax(codes, axis=0), minlength=cfg.n_prototypes)
    return StepRecord(state.step, loss_cbm, loss_dyn, code_entropy(codes), usage)
