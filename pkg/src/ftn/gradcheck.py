"""Central-difference gradient oracle and the analytic-vs-numeric comparison."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ParameterError
from .tensor import Tensor, backward, zero_grads

DEFAULT_STEP = 1e-3


def _scalar(value) -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = DEFAULT_STEP,
                     indices: Sequence[int] | None = None) -> np.ndarray:
    """Central differences ``(f(x + h e) - f(x - h e)) / 2h``.

    With ``indices`` (flat positions into ``x``) only those coordinates are
    probed and a 1-D array is returned; otherwise the full gradient.
    ``x.data`` is perturbed in place and restored before returning.
    """
    if h <= 0:
        raise ParameterError(f"finite-difference step must be positive, got {h}")
    original = x.data
    flat_idx = range(original.size) if indices is None else indices
    out = np.empty(len(flat_idx), dtype=np.float64)
    try:
        for n, i in enumerate(flat_idx):
            probe = original.copy()
            flat = probe.reshape(-1)
            base = flat[i]
            flat[i] = base + h
            x.data = probe
            plus = _scalar(f(x))
            flat[i] = base - h
            minus = _scalar(f(x))
            out[n] = (plus - minus) / (2.0 * h)
    finally:
        x.data = original
    return out.reshape(original.shape) if indices is None else out


def relative_error(analytic, numeric) -> np.ndarray:
    """``|a - n| / max(|a|, |n|)``, defined as 0 where both vanish."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(n))
    diff = np.abs(a - n)
    return np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), 0.0)


@dataclass
class GradcheckReport:
    names: list[str] = field(default_factory=list)
    indices: list[int] = field(default_factory=list)
    analytic: np.ndarray = field(default_factory=lambda: np.zeros(0))
    numeric: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def rel_errors(self) -> np.ndarray:
        return relative_error(self.analytic, self.numeric)

    @property
    def max_rel_error(self) -> float:
        errs = self.rel_errors
        return float(errs.max()) if errs.size else 0.0

    @property
    def n_checked(self) -> int:
        return len(self.indices)

    @property
    def n_nonzero(self) -> int:
        """Coordinates where either gradient is nonzero (the rest pass trivially)."""
        return int(((self.analytic != 0) | (self.numeric != 0)).sum())


def check_parameters(loss_fn: Callable[[], Tensor], named_params: Sequence[tuple[str, Tensor]],
                     n_samples: int, rng: np.random.Generator,
                     h: float = DEFAULT_STEP) -> GradcheckReport:
    """Compare backward() with central differences on sampled parameter entries.

    Coordinates are drawn uniformly over the concatenation of all parameters.
    """
    params = [p for _, p in named_params]
    zero_grads(params)
    backward(loss_fn())
    sizes = np.array([p.size for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    order = rng.permutation(int(offsets[-1]))

    report = GradcheckReport()
    analytic, numeric = [], []
    for flat in order[:n_samples]:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = int(flat - offsets[k])
        name, p = named_params[k]
        a = float(p.grad.reshape(-1)[idx]) if p.grad is not None else 0.0
        n = finite_diff_grad(lambda _: loss_fn(), p, h, [idx])[0]
        report.names.append(name)
        report.indices.append(idx)
        analytic.append(a)
        numeric.append(n)
    report.analytic = np.asarray(analytic)
    report.numeric = np.asarray(numeric)
    return report
