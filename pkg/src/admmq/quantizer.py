"""Binary/ternary level sets and Euclidean projection onto them.

A layer quantized with scaling factor ``alpha`` may only hold the values
``{-alpha, alpha}`` (binary) or ``{-alpha, 0, alpha}`` (ternary).
:func:`project_optimal` finds the scaling factor and level assignment
that are jointly closest to a weight tensor in Frobenius norm.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import QuantizationError

BINARY = "binary"
TERNARY = "ternary"
EXCLUDED = "excluded"
MODES = (BINARY, TERNARY, EXCLUDED)
LEVEL_COUNTS = {BINARY: 2, TERNARY: 3}
BITS_PER_WEIGHT = {BINARY: 1, TERNARY: 2}


def _check_mode(mode):
    if mode not in (BINARY, TERNARY):
        raise QuantizationError(f"cannot project onto mode {mode!r}")


def levels(mode: str, alpha: float) -> np.ndarray:
    _check_mode(mode)
    if mode == BINARY:
        return np.array([-alpha, alpha])
    return np.array([-alpha, 0.0, alpha])


@dataclass(frozen=True)
class QuantizedLayer:
    values: np.ndarray
    alpha: float
    mode: str


@dataclass
class LayerScheme:
    mode: str = BINARY
    alpha: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise QuantizationError(f"unknown quantization mode {self.mode!r}")
        if self.alpha is not None and self.mode != EXCLUDED and not self.alpha > 0:
            raise QuantizationError(f"alpha must be positive, got {self.alpha}")

    @property
    def num_levels(self) -> int | None:
        return LEVEL_COUNTS.get(self.mode)

    @property
    def quantized(self) -> bool:
        return self.mode != EXCLUDED


@dataclass
class QuantScheme:
    """Per-layer mode and scaling factor, keyed by weight tensor name."""

    layers: dict[str, LayerScheme] = field(default_factory=dict)

    @classmethod
    def uniform(cls, weight_names, mode=BINARY, excluded=()) -> "QuantScheme":
        excluded = set(excluded)
        unknown = excluded - set(weight_names) - {n.split(".")[0] for n in weight_names}
        if unknown:
            raise QuantizationError(f"excluded layers not in model: {sorted(unknown)}")
        return cls(
            {
                name: LayerScheme(EXCLUDED if (name in excluded or name.split(".")[0] in excluded) else mode)
                for name in weight_names
            }
        )

    @classmethod
    def for_model(cls, model, mode=BINARY, excluded=()) -> "QuantScheme":
        scheme = cls.uniform(model.weight_names(), mode, excluded)
        scheme.init_alphas(model)
        return scheme

    def init_alphas(self, model) -> None:
        for name, entry in self.layers.items():
            if entry.quantized:
                entry.alpha = init_alpha(model.get(name))

    def quantized_names(self) -> list[str]:
        return [n for n, e in self.layers.items() if e.quantized]

    def __getitem__(self, name) -> LayerScheme:
        return self.layers[name]

    def to_dict(self) -> dict:
        return {n: {"mode": e.mode, "alpha": e.alpha} for n, e in self.layers.items()}

    @classmethod
    def from_dict(cls, d) -> "QuantScheme":
        return cls({n: LayerScheme(v["mode"], v.get("alpha")) for n, v in d.items()})

    def bits(self) -> int:
        """Most bits any quantized layer needs per weight (0 when nothing is quantized)."""
        return max((BITS_PER_WEIGHT[e.mode] for e in self.layers.values() if e.quantized), default=0)


def _mean_abs(a) -> float:
    # exact when every magnitude is equal, so level sets re-project bitwise
    m = np.abs(a)
    if m.size and m.max() == m.min():
        return float(m.flat[0])
    return float(np.mean(m))


def init_alpha(weights) -> float:
    """Mean absolute weight value."""
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise QuantizationError("cannot initialize alpha from an empty tensor")
    alpha = _mean_abs(w)
    if not alpha > 0:
        raise QuantizationError("all-zero weight tensor gives alpha = 0")
    return alpha


def project_fixed_alpha(weights, mode, alpha) -> QuantizedLayer:
    """Elementwise nearest level for a fixed ``alpha``.

    Ties resolve toward the smaller magnitude (ternary: 0) and, for the
    binary tie at exactly zero, toward ``+alpha``.
    """
    _check_mode(mode)
    if not alpha > 0:
        raise QuantizationError(f"alpha must be positive, got {alpha}")
    values = _kernels.project_levels(weights, alpha, mode == TERNARY)
    return QuantizedLayer(values, float(alpha), mode)


def projection_objective(weights, q: QuantizedLayer) -> float:
    return float(np.sum((np.asarray(weights, dtype=np.float64) - q.values) ** 2))


def _fit_alpha(w, values):
    """Closed-form best alpha for a fixed sign pattern: mean |w| over nonzero levels."""
    return _mean_abs(w[values != 0.0])


def alternating_projection(weights, mode, max_iter=100):
    """Alternate nearest-level assignment and closed-form alpha until the
    assignment stops changing.  Returns the layer and the objective after
    every assignment step."""
    _check_mode(mode)
    w = np.asarray(weights, dtype=np.float64)
    alpha = init_alpha(w)
    q = project_fixed_alpha(w, mode, alpha)
    history = [projection_objective(w, q)]
    for _ in range(max_iter):
        if not np.any(q.values):
            # every entry fell into the zero bin; keep the largest one so alpha stays defined
            values = np.zeros_like(w)
            e = np.unravel_index(np.argmax(np.abs(w)), w.shape)
            values[e] = 1.0
        else:
            values = q.values
        alpha = _fit_alpha(w, values)
        q_new = project_fixed_alpha(w, mode, alpha)
        history.append(projection_objective(w, q_new))
        if np.array_equal(np.sign(q_new.values), np.sign(q.values)):
            q = q_new
            break
        q = q_new
    return q, history


def _best_ternary_alpha(w):
    """Exact joint optimum for ternary levels.

    For a fixed support of size k the best alpha is the mean magnitude on the
    support, leaving objective ``sum(w**2) - S_k**2 / k``; the best support of
    each size is the k largest magnitudes.
    """
    mags = np.sort(np.abs(w).ravel())[::-1]
    sums = np.cumsum(mags)
    k = int(np.argmax(sums**2 / np.arange(1, mags.size + 1)))
    return float(sums[k] / (k + 1))


def project_optimal(weights, mode) -> QuantizedLayer:
    """Jointly closest (alpha, levels) to ``weights``.

    Runs :func:`alternating_projection`; for ternary levels the fixed point
    can be local, so the exact sorted-prefix optimum replaces it when it is
    strictly better.
    """
    q, history = alternating_projection(weights, mode)
    if mode == TERNARY:
        w = np.asarray(weights, dtype=np.float64)
        exact = project_fixed_alpha(w, mode, _best_ternary_alpha(w))
        if np.any(exact.values):
            exact = project_fixed_alpha(w, mode, _fit_alpha(w, exact.values))
            if projection_objective(w, exact) < history[-1]:
                return exact
    return q


def is_feasible(values, mode, alpha) -> bool:
    """True iff every entry is exactly one of the mode's levels."""
    if mode == EXCLUDED:
        return True
    v = np.asarray(values)
    if alpha is None or not alpha > 0:
        return False
    ok = (v == alpha) | (v == -alpha)
    if mode == TERNARY:
        ok |= v == 0.0
    return bool(np.all(ok))
