"""Central finite-difference checks for tape gradients (float64)."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, no_grad, precision


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-4 * max|n|).

    The floor keeps entries whose true gradient is ~0 from dominating through
    finite-difference round-off.
    """
    a, n = np.ravel(analytic), np.ravel(numeric)
    floor = max(1e-4 * float(np.max(np.abs(n))) if n.size else 0.0, 1e-12)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den))


def numeric_gradient(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], which: int, eps: float,
                     indices=None) -> np.ndarray:
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[which]
    flat_idx = range(x.size) if indices is None else indices
    out = np.zeros(len(flat_idx))
    with no_grad():
        for j, i in enumerate(flat_idx):
            idx = np.unravel_index(i, x.shape)
            orig = x[idx]
            x[idx] = orig + eps
            fp = float(fn(*[Tensor(a, dtype=np.float64) for a in base]).data)
            x[idx] = orig - eps
            fm = float(fn(*[Tensor(a, dtype=np.float64) for a in base]).data)
            x[idx] = orig
            out[j] = (fp - fm) / (2 * eps)
    return out


def analytic_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    with precision(np.float64):
        ts = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
        with Tape() as tape:
            out = fn(*ts)
        grads = backward(tape, out)
    return [grads[t].data if t in grads else np.zeros_like(t.data) for t in ts]


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], eps: float = 1e-6,
                    max_entries: int | None = None, seed: int = 0, global_floor: bool = False) -> float:
    """Worst relative error over all inputs of ``fn`` (which must return a scalar Tensor).

    ``max_entries`` samples that many coordinates per input instead of all.
    With ``global_floor`` the sample always includes each input's largest
    analytic partial and the denominator floor is 1e-4 of the largest numeric
    partial over every input, so partials far below the loss's finite-difference
    resolution are judged on the network's gradient scale.
    """
    rng = np.random.default_rng(seed)
    pairs = []
    for k, a in enumerate(analytic_gradients(fn, arrays)):
        size = np.asarray(arrays[k]).size
        idx = None
        if max_entries is not None and size > max_entries:
            idx = rng.choice(size, max_entries, replace=False)
            if global_floor:
                idx = np.union1d(idx, [int(np.argmax(np.abs(a)))])
            idx = np.sort(idx)
        num = numeric_gradient(fn, arrays, k, eps, idx)
        pairs.append((a.ravel() if idx is None else a.ravel()[idx], num))
    if not global_floor:
        return max((relative_error(a, n) for a, n in pairs), default=0.0)
    scale = max(float(np.max(np.abs(n))) for _, n in pairs if n.size)
    floor = max(1e-4 * scale, 1e-12)
    worst = 0.0
    for a, n in pairs:
        den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / den)))
    return worst


def check_directional(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], directions: int = 6,
                      eps: float = 1e-6, seed: int = 0) -> float:
    """Compare <grad, v> with a central difference along random unit directions v.

    Suited to whole networks, where single-coordinate differences drown in
    round-off for the many near-zero partials.
    """
    rng = np.random.default_rng(seed)
    grads = analytic_gradients(fn, arrays)
    base = [np.array(a, dtype=np.float64) for a in arrays]
    worst = 0.0
    with no_grad():
        for _ in range(directions):
            vs = [rng.standard_normal(a.shape) for a in base]
            norm = np.sqrt(sum(float(np.sum(v * v)) for v in vs))
            vs = [v / norm for v in vs]
            plus = float(fn(*[Tensor(a + eps * v, dtype=np.float64) for a, v in zip(base, vs)]).data)
            minus = float(fn(*[Tensor(a - eps * v, dtype=np.float64) for a, v in zip(base, vs)]).data)
            num = (plus - minus) / (2 * eps)
            ana = sum(float(np.sum(g * v)) for g, v in zip(grads, vs))
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-12))
    return worst

