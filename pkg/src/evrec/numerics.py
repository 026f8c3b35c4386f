"""Special functions and a small differentiable-layer kit.

Everything here is plain numpy with hand-written backward passes. Layer
parameters live in flat ``dict[str, np.ndarray]`` mappings so that gradients,
momentum buffers and checkpoints can share the same keys.

Shapes follow the row-major batch convention: inputs are (N, in), weights
are (out, in), outputs are (N, out).
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .errors import DomainError, SchemaVersionError, ShapeMismatch

# ---------------------------------------------------------------------------
# special functions
# ---------------------------------------------------------------------------

_LANCZOS_G = 7.0
_LANCZOS = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _check_positive(x, name):
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise DomainError(f"{name} requires x > 0")
    return arr


def _lgamma_lanczos(x):
    # valid for x >= 0.5
    z = x - 1.0
    acc = np.full_like(z, _LANCZOS[0])
    for i in range(1, 9):
        acc = acc + _LANCZOS[i] / (z + i)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(acc)


def lgamma(x):
    """log Gamma(x) for x > 0 (Lanczos, g=7, reflection below 1/2)."""
    arr = _check_positive(x, "lgamma")
    out = np.empty_like(arr)
    small = arr < 0.5
    out[~small] = _lgamma_lanczos(arr[~small])
    xs = arr[small]
    out[small] = np.log(np.pi / np.sin(np.pi * xs)) - _lgamma_lanczos(1.0 - xs)
    return out if out.ndim else float(out)


# Bernoulli coefficients B_2n / (2n) for the asymptotic digamma series
_DIGAMMA_SERIES = (1 / 12, -1 / 120, 1 / 252, -1 / 240, 1 / 132, -691 / 32760, 1 / 12)
# B_2n for the trigamma series
_TRIGAMMA_SERIES = (1 / 6, -1 / 30, 1 / 42, -1 / 30, 5 / 66, -691 / 2730, 7 / 6)
_LIFT = 6.0


def digamma(x):
    """psi(x) for x > 0: recurrence up to x >= 6, then asymptotic series."""
    arr = _check_positive(x, "digamma").copy()
    acc = np.zeros_like(arr)
    while True:
        low = arr < _LIFT
        if not np.any(low):
            break
        acc[low] -= 1.0 / arr[low]
        arr[low] += 1.0
    inv2 = 1.0 / (arr * arr)
    series = np.zeros_like(arr)
    p = inv2.copy()
    for c in _DIGAMMA_SERIES:
        series += c * p
        p = p * inv2
    out = acc + np.log(arr) - 0.5 / arr - series
    return out if out.ndim else float(out)


def trigamma(x):
    """psi'(x) for x > 0, same lift-then-series scheme as :func:`digamma`."""
    arr = _check_positive(x, "trigamma").copy()
    acc = np.zeros_like(arr)
    while True:
        low = arr < _LIFT
        if not np.any(low):
            break
        acc[low] += 1.0 / (arr[low] * arr[low])
        arr[low] += 1.0
    inv = 1.0 / arr
    inv2 = inv * inv
    series = np.zeros_like(arr)
    p = inv2 * inv
    for c in _TRIGAMMA_SERIES:
        series += c * p
        p = p * inv2
    out = acc + inv + 0.5 * inv2 + series
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

EVIDENCE_CLAMP = 10.0


def _check_2d(x, name):
    if x.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {x.shape}")


def affine_forward(x, W, b):
    _check_2d(x, "x")
    if W.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeMismatch(f"affine shapes x{x.shape} W{W.shape} b{b.shape}")
    return x @ W.T + b


def affine_backward(dy, x, W):
    """Returns (dx, dW, db)."""
    if dy.shape != (x.shape[0], W.shape[0]):
        raise ShapeMismatch(f"upstream gradient {dy.shape} vs ({x.shape[0]}, {W.shape[0]})")
    return dy @ W, dy.T @ x, dy.sum(axis=0)


def sigmoid(z):
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activation_forward(z, kind="exp"):
    """Elementwise nonlinearity.

    ``exp``, ``softplus``, ``relu`` and ``sigmoid`` are the non-negative
    evidence activations; the exponential clamps its input to [-10, 10]. ``tanh`` is the hidden-layer
    choice.
    """
    z = np.asarray(z, dtype=float)
    if kind == "exp":
        return np.exp(np.clip(z, -EVIDENCE_CLAMP, EVIDENCE_CLAMP))
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "softplus":
        return np.logaddexp(0.0, z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "identity":
        return z.copy()
    raise ValueError(f"unknown activation {kind!r}")


def activation_backward(dy, z, y, kind="exp"):
    """Gradient w.r.t. the pre-activation ``z`` given output ``y``."""
    if dy.shape != z.shape:
        raise ShapeMismatch(f"gradient {dy.shape} vs input {z.shape}")
    if kind == "exp":
        inside = (z > -EVIDENCE_CLAMP) & (z < EVIDENCE_CLAMP)
        return dy * y * inside
    if kind == "sigmoid":
        return dy * y * (1.0 - y)
    if kind == "softplus":
        return dy * sigmoid(z)
    if kind == "relu":
        return dy * (z > 0)
    if kind == "tanh":
        return dy * (1.0 - y * y)
    if kind == "identity":
        return dy.copy()
    raise ValueError(f"unknown activation {kind!r}")


def gru_init(rng, n_in, n_hidden, scale=None):
    scale = scale if scale is not None else 1.0 / math.sqrt(n_hidden)
    return {
        "W": rng.uniform(-scale, scale, size=(3 * n_hidden, n_in)),
        "U": rng.uniform(-scale, scale, size=(3 * n_hidden, n_hidden)),
        "b": np.zeros(3 * n_hidden),
    }


def gru_cell_forward(x, h, W, U, b):
    """One step of a gated recurrent cell.

    Gate rows in W/U/b are stacked as [reset, update, candidate]:

        r  = sigmoid(W_r x + U_r h + b_r)
        z  = sigmoid(W_z x + U_z h + b_z)
        n  = tanh(W_n x + U_n (r * h) + b_n)
        h' = (1 - z) * n + z * h

    Returns the new hidden state and a cache for the backward pass.
    """
    _check_2d(x, "x")
    _check_2d(h, "h")
    H = h.shape[1]
    if W.shape != (3 * H, x.shape[1]) or U.shape != (3 * H, H) or b.shape != (3 * H,):
        raise ShapeMismatch(f"gru shapes x{x.shape} h{h.shape} W{W.shape} U{U.shape} b{b.shape}")
    gx = x @ W.T + b
    r = sigmoid(gx[:, :H] + h @ U[:H].T)
    z = sigmoid(gx[:, H:2 * H] + h @ U[H:2 * H].T)
    rh = r * h
    n = np.tanh(gx[:, 2 * H:] + rh @ U[2 * H:].T)
    h_new = (1.0 - z) * n + z * h
    return h_new, (x, h, r, z, n, rh)


def gru_cell_backward(dh_new, cache, W, U):
    """Returns (dx, dh, dW, dU, db) for one step."""
    x, h, r, z, n, rh = cache
    H = h.shape[1]
    if dh_new.shape != h.shape:
        raise ShapeMismatch(f"gradient {dh_new.shape} vs hidden {h.shape}")
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    dan = dn * (1.0 - n * n)
    dU_n = dan.T @ rh
    drh = dan @ U[2 * H:]
    dr = drh * h
    dh += drh * r
    daz = dz * z * (1.0 - z)
    dar = dr * r * (1.0 - r)
    dU_r = dar.T @ h
    dU_z = daz.T @ h
    dh += dar @ U[:H] + daz @ U[H:2 * H]
    dg = np.concatenate([dar, daz, dan], axis=1)
    dW = dg.T @ x
    db = dg.sum(axis=0)
    dx = dg @ W
    dU = np.concatenate([dU_r, dU_z, dU_n], axis=0)
    return dx, dh, dW, dU, db


def softmax_logprob(logits):
    """Row-wise log-softmax."""
    z = np.asarray(logits, dtype=float)
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def softmax_logprob_backward(dlogp, logp):
    """Gradient w.r.t. logits given upstream gradient on log-probabilities."""
    p = np.exp(logp)
    return dlogp - p * dlogp.sum(axis=-1, keepdims=True)


ROW_BLOCK = 64


def row_blocks(fn, *arrays, block=ROW_BLOCK):
    """Apply a row-wise ``fn`` over zero-padded blocks of a fixed row count.

    BLAS picks kernels by matrix shape, so the same row can come out a few
    ulps different inside batches of different sizes. Feeding every call
    the same shape makes each row's result independent of how the batch
    was split. ``fn`` may return an array or a tuple of arrays.
    """
    n = arrays[0].shape[0]
    m = max(block, -(-n // block) * block)
    padded = []
    for a in arrays:
        pa = np.zeros((m,) + a.shape[1:], dtype=float)
        pa[:n] = a
        padded.append(pa)
    outs = [fn(*(pa[i:i + block] for pa in padded)) for i in range(0, m, block)]
    if isinstance(outs[0], tuple):
        return tuple(np.concatenate(parts)[:n] for parts in zip(*outs))
    return np.concatenate(outs)[:n]


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

FD_STEP = 1e-4


def numeric_grad(f: Callable[[], float], param: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. ``param``, perturbed in place."""
    g = np.zeros_like(param, dtype=float)
    flat = param.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def finite_diff_check(f, params, analytic, step: float = FD_STEP) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``params`` is an array or a mapping of named arrays; ``f`` is a
    zero-argument callable that reads them (they are perturbed in place and
    restored). The error for each named array is
    ``||analytic - numeric|| / max(1e-8, ||numeric||)`` and the worst one
    is returned.
    """
    if isinstance(params, np.ndarray):
        params, analytic = {"p": params}, {"p": analytic}
    worst = 0.0
    for name, p in params.items():
        num = numeric_grad(f, p, step)
        ana = np.asarray(analytic[name], dtype=float)
        if ana.shape != num.shape:
            raise ShapeMismatch(f"{name}: analytic {ana.shape} vs numeric {num.shape}")
        err = np.linalg.norm(ana - num) / max(1e-8, np.linalg.norm(num))
        worst = max(worst, float(err))
    return worst


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

def clip_grad_norm(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place so the global norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


def momentum_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float):
    for k in sorted(params):
        v = velocity.setdefault(k, np.zeros_like(params[k]))
        v *= momentum
        v -= lr * grads[k]
        params[k] += v


def checksum(params: Mapping[str, np.ndarray]) -> str:
    import hashlib

    h = hashlib.sha256()
    for k in sorted(params):
        a = np.ascontiguousarray(params[k], dtype=np.float64)
        h.update(k.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_FORMAT = "evrec-arrays"
CKPT_VERSION = 1


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None):
    """Write named arrays as versioned JSON.

    Layout::

        {"format": "evrec-arrays", "version": 1, "meta": {...},
         "arrays": {name: {"shape": [...], "data": [flat row-major floats]}}}

    Floats are written with ``repr`` precision, so a round trip is exact.
    """
    doc = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "meta": dict(meta or {}),
        "arrays": {
            k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=float).ravel().tolist()}
            for k, v in sorted(arrays.items())
        },
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)


def load_arrays(path):
    """Inverse of :func:`save_arrays`; returns (arrays, meta)."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CKPT_FORMAT:
        raise SchemaVersionError(f"{path}: not an {CKPT_FORMAT} file")
    if doc.get("version") != CKPT_VERSION:
        raise SchemaVersionError(f"{path}: unsupported version {doc.get('version')}")
    arrays = {}
    for k, rec in doc["arrays"].items():
        a = np.asarray(rec["data"], dtype=float)
        arrays[k] = a.reshape(rec["shape"])
    return arrays, doc.get("meta", {})
