"""Fully connected networks with hand-derived reverse-mode gradients.

Layers are ``y = x @ W + b``. Hidden layers use ReLU; the output layer is
optionally standardized per sample (zero mean, unit variance, no affine) and
then passed through tanh.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NORM_EPS = 1e-5


@dataclass
class ForwardCache:
    owner: int
    version: int
    inputs: list = field(default_factory=list)     # input to each layer
    pre: list = field(default_factory=list)        # pre-activation of each layer
    normed: np.ndarray | None = None
    inv_std: np.ndarray | None = None
    output: np.ndarray | None = None


class Mlp:
    """Multilayer perceptron over row-batched inputs.

    Args:
        sizes: layer widths from input to output, e.g. ``[24, 256, 50]``.
        rng: generator for the uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init.
        normalize: standardize the output pre-activation per sample.
        tanh_output: squash the output with tanh.
        dtype: floating type of parameters and activations.
    """

    def __init__(self, sizes, rng=None, normalize=False, tanh_output=True, dtype=np.float64):
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ValueError(f"invalid layer sizes {sizes}")
        self.sizes = [int(s) for s in sizes]
        self.normalize = bool(normalize)
        self.tanh_output = bool(tanh_output)
        self.dtype = np.dtype(dtype)
        self.version = 0
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            if rng is None:
                self.weights.append(np.zeros((fan_in, fan_out), dtype=self.dtype))
                self.biases.append(np.zeros(fan_out, dtype=self.dtype))
            else:
                bound = 1.0 / np.sqrt(fan_in)
                self.weights.append(
                    rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(self.dtype))
                self.biases.append(rng.uniform(-bound, bound, size=fan_out).astype(self.dtype))

    @property
    def params(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @property
    def param_names(self) -> list:
        names = []
        for i in range(len(self.weights)):
            names += [f"W{i}", f"b{i}"]
        return names

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def mark_updated(self):
        """Invalidate caches from earlier forward passes."""
        self.version += 1

    def copy(self) -> Mlp:
        clone = Mlp(self.sizes, None, self.normalize, self.tanh_output, self.dtype)
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone

    def forward(self, x):
        """Return ``(output, cache)`` for a batch ``x`` of shape (N, in_dim) or (in_dim,)."""
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input dim {self.in_dim}, got shape {x.shape}")
        cache = ForwardCache(id(self), self.version)
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            cache.inputs.append(h)
            pre = h @ w + b
            cache.pre.append(pre)
            h = np.maximum(pre, 0.0) if i < last else pre
        if self.normalize:
            mean = h.mean(axis=1, keepdims=True)
            centered = h - mean
            inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=1, keepdims=True) + NORM_EPS)
            h = centered * inv_std
            cache.normed, cache.inv_std = h, inv_std
        if self.tanh_output:
            h = np.tanh(h)
        cache.output = h
        return (h[0] if single else h), cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache: ForwardCache, grad_out, input_grad=True):
        """Gradients of a downstream scalar given its gradient w.r.t. the output.

        Returns:
            ``(grads, grad_input)`` where ``grads`` matches ``self.params``;
            ``grad_input`` is None when ``input_grad`` is false.
        """
        if cache.owner != id(self):
            raise ValueError("cache was produced by a different network")
        if cache.version != self.version:
            raise ValueError("stale cache: parameters changed since the forward pass")
        g = np.asarray(grad_out, dtype=self.dtype)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != cache.output.shape:
            raise ValueError(f"output gradient shape {g.shape} != {cache.output.shape}")
        if self.tanh_output:
            g = g * (1.0 - cache.output ** 2)
        if self.normalize:
            xhat, inv_std = cache.normed, cache.inv_std
            g = inv_std * (g - g.mean(axis=1, keepdims=True)
                           - xhat * (g * xhat).mean(axis=1, keepdims=True))
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (cache.pre[i] > 0)
            grads[2 * i] = cache.inputs[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0 or input_grad:
                g = g @ self.weights[i].T
        return grads, (g if input_grad else None)


class Adam:
    """Adam over a list of arrays updated in place.

    Moments are kept in flat buffers so one step costs a handful of vector ops.
    """

    def __init__(self, params, lr=5e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        sizes = [p.size for p in self.params]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        total = int(self._offsets[-1])
        dtype = np.result_type(*self.params) if self.params else np.float64
        self._m = np.zeros(total, dtype=dtype)
        self._v = np.zeros(total, dtype=dtype)
        self._work = np.empty(total, dtype=dtype)

    def _views(self, flat):
        return [flat[a:b].reshape(p.shape)
                for p, a, b in zip(self.params, self._offsets[:-1], self._offsets[1:])]

    @property
    def m(self) -> list:
        return self._views(self._m)

    @property
    def v(self) -> list:
        return self._views(self._v)

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        g = np.concatenate([np.ravel(x) for x in grads]).astype(self._m.dtype, copy=False)
        m, v, work = self._m, self._v, self._work
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        np.square(g, out=g)
        g *= 1.0 - self.beta2
        v += g
        np.multiply(v, 1.0 / c2, out=work)
        np.sqrt(work, out=work)
        work += self.eps
        np.divide(m, work, out=work)
        work *= self.lr / c1
        for p, update in zip(self.params, self._views(work)):
            p -= update

    def state_arrays(self):
        return self.m + self.v

    def load_state_arrays(self, arrays, t):
        n = len(self.params)
        for dst, src in zip(self.m + self.v, arrays[:2 * n]):
            dst[...] = src
        self.t = int(t)


class Sgd:
    """Plain gradient descent; deterministic and memoryless."""

    def __init__(self, params, lr=1e-2):
        self.params = list(params)
        self.lr = lr
        self.t = 0

    def step(self, grads):
        self.t += 1
        for p, g in zip(self.params, grads):
            p -= self.lr * g

    def state_arrays(self):
        return []

    def load_state_arrays(self, arrays, t):
        self.t = int(t)


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_tensor: dict = field(default_factory=dict)
    n_checked: int = 0
    n_kinks: int = 0    # entries skipped because the stencil crossed a ReLU kink

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic, numeric, floor=1e-5):
    """Elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def relu_pattern(mlp: Mlp, x) -> np.ndarray:
    """Flat boolean pattern of active hidden units for inputs ``x``."""
    cache = mlp.forward(x)[1]
    return np.concatenate([(pre > 0).ravel() for pre in cache.pre[:-1]] or [np.zeros(0, bool)])


def gradient_check(params, loss_fn, grads, tolerance=1e-4, step=1e-5, max_entries=None,
                   rng=None, names=None, floor=1e-5, pattern_fn=None) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    Args:
        params: arrays perturbed in place (restored afterwards).
        loss_fn: pure scalar function of the current parameter values.
        grads: analytic gradients at the current values, aligned with ``params``.
        tolerance: pass threshold on the max relative error.
        step: finite-difference step.
        max_entries: if set, check at most this many randomly chosen entries
            per tensor (``rng`` picks them); otherwise every entry.
        floor: denominator floor of the relative error, for entries whose
            true gradient is below finite-difference resolution.
        pattern_fn: optional callable returning the piecewise-linear activation
            pattern; an entry whose stencil changes the pattern is not
            differentiable there, so it is counted in ``n_kinks`` and skipped.
    """
    grads = [np.array(g, copy=True) for g in grads]
    names = names or [f"param{i}" for i in range(len(params))]
    report = GradCheckReport(0.0, tolerance)
    for name, p, g in zip(names, params, grads):
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng if rng is not None else np.random.default_rng(0)
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        smooth = np.ones(len(idx), dtype=bool)
        base = pattern_fn() if pattern_fn is not None else None
        for n, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + step
            plus = loss_fn()
            if pattern_fn is not None:
                smooth[n] = np.array_equal(pattern_fn(), base)
            flat[k] = orig - step
            minus = loss_fn()
            if pattern_fn is not None and smooth[n]:
                smooth[n] = np.array_equal(pattern_fn(), base)
            flat[k] = orig
            numeric[n] = (plus - minus) / (2.0 * step)
        kept = idx[smooth]
        err = (float(np.max(relative_error(g.reshape(-1)[kept], numeric[smooth], floor)))
               if len(kept) else 0.0)
        report.per_tensor[name] = err
        report.max_rel_error = max(report.max_rel_error, err)
        report.n_checked += len(kept)
        report.n_kinks += int(len(idx) - len(kept))
    return report
