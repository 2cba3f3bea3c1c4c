"""Central finite-difference checks for taped gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import NumericInstabilityError
from .ops import forward_primitive
from .tensor import Tape, Tensor


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|, 1e-8) over elements."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(fn: Callable[[], Tensor], wrt: Sequence[Tensor], epsilon: float = 1e-5,
                    max_elements: Optional[int] = None, rng=None) -> float:
    """Compare d fn() / d wrt against central differences.

    ``fn`` must rebuild its graph from the current ``.data`` of ``wrt`` on every
    call and return a scalar.  With ``max_elements`` set, a random subset of
    element positions per tensor is probed.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    for t in wrt:
        t.grad = None
    with Tape() as tape:
        out = fn()
    tape.backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]
    for a in analytic:
        if not np.all(np.isfinite(a)):
            raise NumericInstabilityError("analytic gradient is not finite")

    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for t, a in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.empty(len(idx))
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = fn().item()
            flat[i] = orig - epsilon
            fm = fn().item()
            flat[i] = orig
            numeric[k] = (fp - fm) / (2 * epsilon)
        if not np.all(np.isfinite(numeric)):
            raise NumericInstabilityError("numeric gradient is not finite")
        worst = max(worst, relative_error(a.reshape(-1)[idx], numeric))
    return worst


def finite_difference_check(kind: str, inputs: Sequence, epsilon: float = 1e-5,
                            attrs: Optional[dict] = None, seed: int = 0,
                            wrt: Optional[Sequence[int]] = None) -> float:
    """Max relative gradient error of one primitive.

    The primitive's output is contracted with a fixed random projection so the
    scalar objective exercises every output element.  ``wrt`` lists the input
    positions to differentiate (default: every floating input).
    """
    attrs = dict(attrs or {})
    tensors = [None if x is None else Tensor(np.array(x, dtype=np.float64), requires_grad=True)
               for x in inputs]
    if wrt is None:
        wrt = [i for i, t in enumerate(tensors) if t is not None]
    for i, t in enumerate(tensors):
        if t is not None:
            t.requires_grad = i in wrt
    probe = forward_primitive(kind, tensors, **_copy_attrs(attrs))
    # keyed apart from a caller that draws inputs from default_rng(seed)
    proj = Tensor(np.random.default_rng([seed, 7919]).standard_normal(probe.shape))

    def objective():
        out = forward_primitive(kind, tensors, **_copy_attrs(attrs))
        return forward_primitive("sum", (forward_primitive("mul", (out, proj)),))

    return check_gradients(objective, [tensors[i] for i in wrt], epsilon)


def _copy_attrs(attrs):
    # running statistics are mutated by batchnorm; keep probes side-effect free
    return {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in attrs.items()}
