"""ADMM weight quantization.

The constrained problem "minimize loss(W) with every quantized W_i on its
level set" is split with an auxiliary copy Q_i and a scaled dual U_i:

* W-update: a few epochs of SGD/Adam on
  ``loss(W) + sum_i rho_i / 2 * ||W_i - Q_i + U_i||_F^2``
* Q-update: ``Q_i = project_optimal(W_i + U_i)``
* U-update: ``U_i += W_i - Q_i``

with ``rho`` raised on a geometric schedule.  After the last iteration the
weights are replaced by Q (hard projection), so the returned model is
exactly feasible.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import threading
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .errors import ConfigError, DivergenceError, ShapeError
from .quantizer import EXCLUDED, QuantizedLayer, QuantScheme, is_feasible, project_optimal

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RhoSchedule:
    rho_initial: float = 1e-3
    growth_factor: float = 10.0
    period: int = 3
    rho_max: float = 1e-1

    def __post_init__(self):
        if not (self.rho_initial > 0 and self.rho_max > 0):
            raise ConfigError("rho_initial and rho_max must be positive")
        if not self.growth_factor >= 1:
            raise ConfigError("growth_factor must be >= 1")
        if self.period < 1:
            raise ConfigError("period must be >= 1")

    def __call__(self, k: int) -> float:
        return min(self.rho_initial * self.growth_factor ** (k // self.period), self.rho_max)


@dataclass(frozen=True)
class AdmmConfig:
    epochs_per_w_update: int = 3
    max_admm_iterations: int = 30
    tol: float = 1e-3
    rho: RhoSchedule = field(default_factory=RhoSchedule)
    optimizer: str = "adam"
    lr: float = 1e-3
    batch_size: int = 64
    excluded: tuple[str, ...] = ()
    rescale_dual: bool = True
    lr_decay: float = 1.0

    def __post_init__(self):
        if self.epochs_per_w_update < 1 or self.max_admm_iterations < 1 or self.batch_size < 1:
            raise ConfigError("epoch, iteration and batch counts must be >= 1")
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must be in (0, 1]")

    def lr_at(self, k: int) -> float:
        return self.lr * self.lr_decay**k


@dataclass
class LayerState:
    Q: QuantizedLayer
    U: np.ndarray
    rho: float


@dataclass
class AdmmState:
    layers: dict[str, LayerState]
    k: int = 0

    def names(self):
        return list(self.layers)


# ---------------------------------------------------------------------------
# trace
# ---------------------------------------------------------------------------

TRACE_COLUMNS = ("k", "layer", "rho", "residual", "train_loss", "val_accuracy")
SUMMARY = "*"


class Trace:
    """Append-only record of an ADMM run; appends are serialized by a lock."""

    def __init__(self):
        self.rows: list[dict] = []
        self._lock = threading.Lock()

    def append(self, **row) -> None:
        with self._lock:
            self.rows.append({c: row.get(c) for c in TRACE_COLUMNS})

    def extend(self, other: "Trace") -> None:
        with self._lock:
            self.rows.extend(other.rows)

    def summaries(self) -> list[dict]:
        return [r for r in self.rows if r["layer"] == SUMMARY]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: ("" if v is None else _fmt(v)) for k, v in row.items()})
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def read_trace(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# state and the three updates
# ---------------------------------------------------------------------------


def init_state(model, scheme: QuantScheme, rho: float) -> AdmmState:
    """Q from the optimal projection of the current weights, U = 0."""
    layers = {}
    for name in scheme.quantized_names():
        w = model.get(name)
        layers[name] = LayerState(project_optimal(w, scheme[name].mode), np.zeros_like(w), rho)
    return AdmmState(layers)


def _check(model, state):
    for name, ls in state.layers.items():
        w = model.get(name)
        if w.shape != ls.Q.values.shape or w.shape != ls.U.shape:
            raise ShapeError(f"{name}: W {w.shape}, Q {ls.Q.values.shape}, U {ls.U.shape} differ")


def penalty(model, state: AdmmState) -> float:
    total = 0.0
    for name, ls in state.layers.items():
        d = model.get(name) - ls.Q.values + ls.U
        total += 0.5 * ls.rho * float(np.sum(d * d))
    return total


def penalty_grad(model, state: AdmmState) -> dict[str, np.ndarray]:
    return {name: ls.rho * (model.get(name) - ls.Q.values + ls.U) for name, ls in state.layers.items()}


def augmented_loss_and_grad(model, state: AdmmState, batch: nn.Batch):
    _check(model, state)
    value, grads = model.loss_and_grad(batch.inputs, batch.labels)
    for name, ls in state.layers.items():
        if ls.rho != 0.0:
            grads[name] = grads[name] + ls.rho * (model.get(name) - ls.Q.values + ls.U)
    return value + penalty(model, state), grads


def augmented_loss(model, state: AdmmState, batch: nn.Batch) -> float:
    _check(model, state)
    return model.loss(batch.inputs, batch.labels) + penalty(model, state)


def augmented_grad(model, state: AdmmState, batch: nn.Batch) -> dict[str, np.ndarray]:
    return augmented_loss_and_grad(model, state, batch)[1]


def make_optimizer(config: AdmmConfig) -> nn.OptimizerState:
    return nn.OptimizerState(config.optimizer, config.lr)


def w_update(model, state, dataset, config: AdmmConfig, rng, opt=None) -> list[float]:
    """Approximate proximal step: ``epochs_per_w_update`` epochs on the
    augmented loss.  Updates ``model`` in place; returns per-epoch mean loss."""
    opt = opt if opt is not None else make_optimizer(config)
    losses = []
    for epoch in range(config.epochs_per_w_update):
        try:
            value = nn.train_epoch(
                model, dataset, opt, config.batch_size, rng, lambda b: augmented_loss_and_grad(model, state, b)
            )
        except DivergenceError as exc:
            raise DivergenceError(f"ADMM iteration {state.k}: {exc}") from None
        log.debug("k=%d epoch=%d augmented loss %.6f", state.k, epoch, value)
        losses.append(value)
    return losses


def q_update(model, state: AdmmState, scheme: QuantScheme) -> AdmmState:
    for name, ls in state.layers.items():
        ls.Q = project_optimal(model.get(name) + ls.U, scheme[name].mode)
    return state


def u_update(model, state: AdmmState) -> AdmmState:
    for name, ls in state.layers.items():
        ls.U = ls.U + (model.get(name) - ls.Q.values)
    state.k += 1
    return state


def residuals(model, state: AdmmState) -> dict[str, float]:
    """Relative Frobenius gap ||W - Q|| / ||W|| per quantized layer."""
    out = {}
    for name, ls in state.layers.items():
        w = model.get(name)
        gap = float(np.linalg.norm(w - ls.Q.values))
        norm = float(np.linalg.norm(w))
        out[name] = gap / norm if norm > 0 else gap
    return out


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


@dataclass
class AdmmResult:
    model: object
    scheme: QuantScheme
    state: AdmmState
    trace: Trace
    iterations: int
    converged: bool
    budget_exhausted: bool
    final_residuals: dict[str, float]


def hard_project(model, state: AdmmState) -> None:
    for name, ls in state.layers.items():
        model.set(name, ls.Q.values)


def run_admm(
    model,
    scheme: QuantScheme,
    dataset,
    config: AdmmConfig,
    val=None,
    seed=0,
    rho_offset: int = 0,
    evaluate=None,
) -> AdmmResult:
    """Quantize a copy of ``model`` with ADMM and return it hard-projected.

    Iterates until every layer's relative residual is below ``config.tol``
    or ``max_admm_iterations`` is spent; the latter is reported through
    ``budget_exhausted`` rather than raised.  ``rho_offset`` shifts the
    schedule index so a continuation can resume where a previous run's
    penalty left off.
    """
    model = model.copy()
    scheme = QuantScheme.from_dict(scheme.to_dict())
    for name in config.excluded:
        for full in list(scheme.layers):
            if full == name or full.split(".")[0] == name:
                scheme.layers[full].mode = EXCLUDED
    if evaluate is None:
        evaluate = nn.evaluate
    rng = np.random.default_rng(seed)
    opt = make_optimizer(config)
    state = init_state(model, scheme, config.rho(rho_offset))
    trace = Trace()

    res = residuals(model, state)
    converged = max(res.values(), default=0.0) < config.tol
    while not converged and state.k < config.max_admm_iterations:
        rho = config.rho(state.k + rho_offset)
        for ls in state.layers.values():
            if config.rescale_dual and rho != ls.rho:
                # scaled dual is multiplier / rho; keep the multiplier fixed across a rho change
                ls.U = ls.U * (ls.rho / rho)
            ls.rho = rho
        opt.lr = config.lr_at(state.k)
        losses = w_update(model, state, dataset, config, rng, opt)
        q_update(model, state, scheme)
        u_update(model, state)
        res = residuals(model, state)
        acc = evaluate(model, val) if val is not None else math.nan
        for name, r in res.items():
            trace.append(k=state.k, layer=name, rho=rho, residual=r, train_loss=losses[-1], val_accuracy=acc)
        worst = max(res.values(), default=0.0)
        trace.append(k=state.k, layer=SUMMARY, rho=rho, residual=worst, train_loss=losses[-1], val_accuracy=acc)
        log.info("admm k=%d rho=%.3g loss=%.5f max residual=%.3e val=%.4f", state.k, rho, losses[-1], worst, acc)
        converged = worst < config.tol

    final = residuals(model, state)
    hard_project(model, state)
    for name, ls in state.layers.items():
        scheme.layers[name].alpha = ls.Q.alpha
        assert is_feasible(model.get(name), ls.Q.mode, ls.Q.alpha)
    return AdmmResult(
        model=model,
        scheme=scheme,
        state=state,
        trace=trace,
        iterations=state.k,
        converged=converged,
        budget_exhausted=not converged,
        final_residuals=final,
    )
