"""Hot numeric kernels: causal attention forward/backward and the fused AdamW
update.

Each kernel exists twice: a pure-NumPy implementation and a Numba ``@njit``
version that exploits causality (only the lower triangle of the score matrix
is ever touched). The active backend is chosen at import time from the
``SEQFORGET_KERNELS`` environment variable (``numba`` or ``numpy``); default
is numba when importable. ``set_backend`` switches at runtime, which the
benchmark and the cross-backend tests rely on.

Within one backend results are deterministic; across backends they agree to
float rounding, not bitwise.
"""

import math
import os

import numpy as np

from .errors import ConfigError

try:
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False
    prange = range

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap if not args else wrap(*args)


# ---------------------------------------------------------------------------
# NumPy implementations
# ---------------------------------------------------------------------------


def _attention_forward_numpy(q, k, v):
    """q, k, v: (B, H, T, D). Returns (out, weights) with weights (B, H, T, T)."""
    d = q.shape[-1]
    scores = (q @ np.swapaxes(k, -1, -2)) / np.asarray(math.sqrt(d), dtype=q.dtype)
    t = q.shape[-2]
    mask = np.triu(np.full((t, t), -np.inf, dtype=q.dtype), k=1)
    scores = scores + mask
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = weights @ v
    return out, weights


def _attention_backward_numpy(dout, q, k, v, weights):
    """Backward of _attention_forward_numpy. Returns (dq, dk, dv)."""
    d = q.shape[-1]
    inv_scale = np.asarray(1.0 / math.sqrt(d), dtype=q.dtype)
    dweights = dout @ np.swapaxes(v, -1, -2)
    # softmax rows: masked positions have weight 0, so they get zero dscore
    dscores = weights * (dweights - (weights * dweights).sum(axis=-1, keepdims=True))
    dscores *= inv_scale
    dq = dscores @ k
    dk = np.swapaxes(dscores, -1, -2) @ q
    dv = np.swapaxes(weights, -1, -2) @ dout
    return dq, dk, dv


def _adamw_update_numpy(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, t):
    """One decoupled-weight-decay Adam step, in place on param/m/v."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    if weight_decay != 0.0:
        param -= lr * weight_decay * param
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# Numba implementations
# ---------------------------------------------------------------------------


@njit(cache=True, parallel=True)
def _attention_forward_numba(q, k, v):
    # parallel over independent (batch, head) slices; every output element
    # is produced by exactly one iteration, so results stay bitwise stable
    # for any thread count
    b, h, t, d = q.shape
    inv_scale = 1.0 / math.sqrt(d)
    out = np.zeros_like(q)
    weights = np.zeros((b, h, t, t), dtype=q.dtype)
    for bh in prange(b * h):
        bi = bh // h
        hi = bh % h
        for ti in range(t):
            # scores over j <= ti only; the rest stays zero weight
            row_max = -np.inf
            for j in range(ti + 1):
                s = 0.0
                for di in range(d):
                    s += q[bi, hi, ti, di] * k[bi, hi, j, di]
                s *= inv_scale
                weights[bi, hi, ti, j] = s
                if s > row_max:
                    row_max = s
            norm = 0.0
            for j in range(ti + 1):
                w = math.exp(weights[bi, hi, ti, j] - row_max)
                weights[bi, hi, ti, j] = w
                norm += w
            for j in range(ti + 1):
                weights[bi, hi, ti, j] /= norm
            for j in range(ti + 1):
                w = weights[bi, hi, ti, j]
                for di in range(d):
                    out[bi, hi, ti, di] += w * v[bi, hi, j, di]
    return out, weights


@njit(cache=True, parallel=True)
def _attention_backward_numba(dout, q, k, v, weights):
    # dk/dv accumulate over ti, but only within one (batch, head) slice,
    # so the prange split keeps the accumulation order sequential
    b, h, t, d = q.shape
    inv_scale = 1.0 / math.sqrt(d)
    dq = np.zeros_like(q)
    dk = np.zeros_like(k)
    dv = np.zeros_like(v)
    for bh in prange(b * h):
        bi = bh // h
        hi = bh % h
        dw_row = np.zeros(t, dtype=q.dtype)
        for ti in range(t):
            dot = 0.0
            for j in range(ti + 1):
                s = 0.0
                for di in range(d):
                    s += dout[bi, hi, ti, di] * v[bi, hi, j, di]
                dw_row[j] = s
                dot += weights[bi, hi, ti, j] * s
            for j in range(ti + 1):
                ds = weights[bi, hi, ti, j] * (dw_row[j] - dot) * inv_scale
                for di in range(d):
                    dq[bi, hi, ti, di] += ds * k[bi, hi, j, di]
                    dk[bi, hi, j, di] += ds * q[bi, hi, ti, di]
                    dv[bi, hi, j, di] += weights[bi, hi, ti, j] * dout[bi, hi, ti, di]
    return dq, dk, dv


@njit(cache=True, parallel=True)
def _adamw_update_numba(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, t):
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    p = param.ravel()
    g = grad.ravel()
    mf = m.ravel()
    vf = v.ravel()
    for i in prange(p.size):
        mf[i] = beta1 * mf[i] + (1.0 - beta1) * g[i]
        vf[i] = beta2 * vf[i] + (1.0 - beta2) * g[i] * g[i]
        m_hat = mf[i] / bc1
        v_hat = vf[i] / bc2
        if weight_decay != 0.0:
            p[i] -= lr * weight_decay * p[i]
        p[i] -= lr * m_hat / (math.sqrt(v_hat) + eps)


_BACKENDS = {
    "numpy": {
        "attention_forward": _attention_forward_numpy,
        "attention_backward": _attention_backward_numpy,
        "adamw_update": _adamw_update_numpy,
    },
}
if HAS_NUMBA:
    _BACKENDS["numba"] = {
        "attention_forward": _attention_forward_numba,
        "attention_backward": _attention_backward_numba,
        "adamw_update": _adamw_update_numba,
    }

_active_name = os.environ.get("SEQFORGET_KERNELS", "numba" if HAS_NUMBA else "numpy")
if _active_name not in _BACKENDS:
    raise ConfigError(
        f"SEQFORGET_KERNELS={_active_name!r} not available; choose from {sorted(_BACKENDS)}"
    )
_active = _BACKENDS[_active_name]


def backend_name() -> str:
    return _active_name


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def set_backend(name: str) -> None:
    """Switch the kernel backend ('numpy' or 'numba') for this process."""
    global _active_name, _active
    if name not in _BACKENDS:
        raise ConfigError(f"unknown kernel backend {name!r}; choose from {sorted(_BACKENDS)}")
    _active_name = name
    _active = _BACKENDS[name]


def attention_forward(q, k, v):
    return _active["attention_forward"](q, k, v)


def attention_backward(dout, q, k, v, weights):
    return _active["attention_backward"](dout, q, k, v, weights)


def adamw_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, t):
    _active["adamw_update"](param, grad, m, v, lr, beta1, beta2, eps, weight_decay, t)
