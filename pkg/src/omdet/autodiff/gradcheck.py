"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from omdet.autodiff.tensor import Tape, Tensor, precision
from omdet.errors import NumericError, UsageError


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); ``floor`` keeps round-off on zero gradients from reading as 100%."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _scalar(value: Tensor) -> float:
    if value.size != 1:
        raise UsageError(f"gradient_check needs a scalar function, got shape {value.shape}")
    out = float(value.data.reshape(()))
    if not np.isfinite(out):
        raise NumericError("function value is not finite at the check point")
    return out


def gradient_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5) -> float:
    """Max relative error between the taped gradient of ``f`` and central differences.

    Runs entirely in float64 regardless of the ambient precision.
    """
    analytic, numeric, _ = gradient_pair(f, point, eps)
    return float(relative_error(analytic, numeric).max()) if analytic.size else 0.0


def gradient_pair(f: Callable[[Tensor], Tensor], point, eps: float = 1e-5):
    """(analytic, central-difference, f(point)) in float64."""
    if eps <= 0:
        raise UsageError("eps must be positive")
    with precision("float64"):
        base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
        x = Tensor(base, requires_grad=True)
        with Tape() as tape:
            y = f(x)
        _scalar(y)
        analytic = tape.backward(y)[x]
        numeric = np.empty_like(base)
        flat = base.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f(Tensor(base)))
            flat[i] = orig - eps
            fm = _scalar(f(Tensor(base)))
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2 * eps)
        value = _scalar(f(Tensor(base)))
    return analytic, numeric, value


def gradient_check_params(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-6,
    coords_per_param: int | None = 8,
    rng: np.random.Generator | None = None,
    floor: float = 1e-8,
) -> dict[str, float]:
    """Check d f()/d p for named parameter tensors that ``f`` closes over.

    ``f`` must already be float64 end to end. At most ``coords_per_param``
    coordinates are probed per tensor (all of them when ``None``). Returns the
    max relative error per parameter name.
    """
    rng = rng or np.random.default_rng(0)
    for name, p in params.items():
        if p.dtype != np.float64:
            raise UsageError(f"parameter {name} is {p.dtype}; gradient checks run in float64")
    with Tape() as tape:
        y = f()
    _scalar(y)
    grads = tape.backward(y)
    report = {}
    for name, p in params.items():
        analytic = grads[p].reshape(-1)
        flat = p.data.reshape(-1)
        if coords_per_param is None or coords_per_param >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=coords_per_param, replace=False)
        errs = []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(f())
            flat[i] = orig - eps
            fm = _scalar(f())
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            errs.append(relative_error(np.array(analytic[i]), np.array(num), floor))
        report[name] = float(np.max(errs)) if errs else 0.0
    return report
