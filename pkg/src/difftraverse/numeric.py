"""Numeric substrate: counter-based random streams, parameter stores,
hand-written layer gradients, Adam and a finite-difference gradient check.

Tensors are plain ``float64`` numpy arrays; 32-bit precision is only used
when writing files.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

_TWO_PI = 2.0 * np.pi
_U53 = 1.0 / 9007199254740992.0  # 2**-53
_MASK64 = (1 << 64) - 1


class NumericError(ValueError):
    pass


def ensure_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{what} contains non-finite values")
    return x


def _check_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise NumericError(f"shape must be non-empty with positive dims, got {shape}")
    return shape


@dataclass
class RngStream:
    """Counter-based random stream.

    Draw ``k`` of the stream is a pure function of ``(seed, stream_id, k)``:
    it consumes words ``2k`` and ``2k+1`` of the Philox4x64 keystream keyed by
    ``(seed, stream_id)``. ``counter`` is the number of draws already taken.
    """

    seed: int
    stream_id: int
    counter: int = 0

    def _words(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        start = 2 * self.counter
        block, offset = divmod(start, 4)
        bitgen = np.random.Philox(
            key=np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64),
            counter=np.array([block & _MASK64, block >> 64, 0, 0], dtype=np.uint64),
        )
        raw = bitgen.random_raw(offset + 2 * n)[offset:]
        self.counter += n
        return raw[0::2], raw[1::2]

    def normal(self, shape) -> np.ndarray:
        shape = _check_shape(shape)
        n = int(np.prod(shape))
        w0, w1 = self._words(n)
        u1 = ((w0 >> np.uint64(11)).astype(np.float64) + 0.5) * _U53
        u2 = (w1 >> np.uint64(11)).astype(np.float64) * _U53
        return (np.sqrt(-2.0 * np.log(u1)) * np.cos(_TWO_PI * u2)).reshape(shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform draws in ``[low, high)``."""
        shape = _check_shape(shape)
        w0, _ = self._words(int(np.prod(shape)))
        u = (w0 >> np.uint64(11)).astype(np.float64) * _U53
        return (low + (high - low) * u).reshape(shape)

    def integers(self, high: int, shape) -> np.ndarray:
        """Integers in ``[0, high)``."""
        u = self.uniform(shape)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def copy(self) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.counter)


def make_rng(seed: int, stream_id: int = 0) -> RngStream:
    if seed < 0 or stream_id < 0 or seed > _MASK64 or stream_id > _MASK64:
        raise NumericError("seed and stream_id must be unsigned 64-bit integers")
    return RngStream(int(seed), int(stream_id), 0)


def sample_standard_normal(rng: RngStream, shape) -> np.ndarray:
    return rng.normal(shape)


# --------------------------------------------------------------------------
# parameters


@dataclass
class ParamStore:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.asarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self.params.items():
            out.add(k, v.copy())
        return out

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def equal(self, other: "ParamStore") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self.params[k], other.params[k]) for k in self.params
        )


def glorot(rng: RngStream, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal((fan_in, fan_out)) * np.sqrt(2.0 / (fan_in + fan_out))


# --------------------------------------------------------------------------
# layers: each forward returns what its backward needs


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w + b


def linear_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Returns ``(dx, dw, db)`` for ``y = x @ w + b``."""
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def silu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    s = sigmoid(x)
    return dout * (s * (1.0 + x * (1.0 - s)))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


def binary_cross_entropy_logits(logits: np.ndarray, targets: np.ndarray):
    """Mean over the batch (summed over columns) and gradient."""
    n = logits.shape[0]
    loss = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    return float(loss.sum() / n), (sigmoid(logits) - targets) / n


def mse(pred: np.ndarray, target: np.ndarray):
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def sinusoidal_features(u: np.ndarray, dim: int, max_freq: float = 1000.0) -> np.ndarray:
    """Sin/cos features of a scalar in [0, 1]; ``dim`` must be even."""
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(max_freq), half))
    ang = np.asarray(u, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# --------------------------------------------------------------------------


class Adam:
    def __init__(self, store: ParamStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise NumericError("learning rate must be positive")
        self.store = store
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.params.items()}
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.store.params.items():
            g = self.store.grads[k]
            m, v = self.m[k], self.v[k]
            tmp = np.multiply(g, 1.0 - self.beta1)
            m *= self.beta1
            m += tmp
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - self.beta2
            v *= self.beta2
            v += tmp
            np.multiply(v, 1.0 / c2, out=tmp)
            np.sqrt(tmp, out=tmp)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= lr / c1
            p -= tmp


def check_gradients(
    loss_fn: Callable[[ParamStore], float],
    store: ParamStore,
    epsilon: float = 1e-5,
    coords_per_param: int | None = None,
    rng: RngStream | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``loss_fn(store)`` must return the loss and leave reverse-mode gradients in
    ``store.grads``. With ``coords_per_param`` set, only that many randomly
    chosen coordinates of each parameter are differenced.

    The error for one coordinate is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, floor)``.
    A central difference carries roughly ``1e-16 * |loss| / epsilon`` of rounding
    noise, so gradients much smaller than ``floor`` are judged on absolute error.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise NumericError("epsilon must lie in [1e-7, 1e-3]")
    loss = loss_fn(store)
    if not np.isfinite(loss):
        raise NumericError("loss is not finite")
    analytic = {k: g.copy() for k, g in store.grads.items()}
    rng = rng or make_rng(0, 0xC4EC)
    worst = 0.0
    for name, p in store.params.items():
        flat = p.reshape(-1)
        if coords_per_param is None or coords_per_param >= flat.size:
            idx: Iterable[int] = range(flat.size)
        else:
            idx = np.unique(rng.integers(flat.size, coords_per_param))
        g_ad = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            lp = loss_fn(store)
            flat[i] = orig - epsilon
            lm = loss_fn(store)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError(f"non-finite loss while perturbing {name}[{i}]")
            g_fd = (lp - lm) / (2.0 * epsilon)
            denom = max(abs(g_ad[i]), abs(g_fd), floor)
            worst = max(worst, abs(g_ad[i] - g_fd) / denom)
    loss_fn(store)  # leave grads consistent with unperturbed params
    return worst
