"""Multi-step quantization: repeated ADMM passes with best-result carry-forward.

Each step re-opens the current best quantized model for training (its
quantized values become the starting weights) and runs ADMM again,
possibly with a different level set.  A candidate replaces the incumbent
when it uses fewer bits per weight, or the same number of bits and a
strictly higher validation accuracy; ties keep the incumbent.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .admm import AdmmConfig, Trace, init_state, residuals, run_admm
from .errors import ConfigError, QuantizationError
from .quantizer import BINARY, MODES, TERNARY, QuantScheme, is_feasible

log = logging.getLogger(__name__)


def derive_seed(master_seed: int, step: int) -> int:
    """Independent, reproducible stream per step."""
    return int(np.random.SeedSequence([int(master_seed), int(step)]).generate_state(1)[0])


def default_stages(target: str, num_steps: int) -> list[str]:
    """Binary targets start with one ternary step; everything else repeats the target."""
    if target == BINARY and num_steps > 1:
        return [TERNARY] + [BINARY] * (num_steps - 1)
    return [target] * num_steps


@dataclass
class ProgressiveConfig:
    num_steps: int = 3
    admm: AdmmConfig | list = field(default_factory=AdmmConfig)
    stages: list[str] | None = None
    target: str = BINARY
    excluded: tuple[str, ...] = ()
    reset_rho: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ConfigError("num_steps must be >= 1")
        if isinstance(self.admm, list) and len(self.admm) != self.num_steps:
            raise ConfigError(f"{len(self.admm)} per-step ADMM configs for {self.num_steps} steps")
        if self.stages is None:
            self.stages = default_stages(self.target, self.num_steps)
        if len(self.stages) != self.num_steps:
            raise ConfigError(f"{len(self.stages)} stages for {self.num_steps} steps")
        for s in self.stages:
            if s not in MODES or s == "excluded":
                raise ConfigError(f"stage mode must be binary or ternary, got {s!r}")

    def step_admm(self, step: int) -> AdmmConfig:
        return self.admm[step] if isinstance(self.admm, list) else self.admm


@dataclass
class StepRecord:
    step: int
    mode: str
    accuracy: float
    accepted: bool
    bits: int
    iterations: int
    converged: bool
    budget_exhausted: bool
    initial_residuals: dict
    final_residuals: dict
    seed: int
    config: dict

    def to_dict(self):
        return asdict(self)


@dataclass
class ProgressiveState:
    step: int = 0
    best_model: object = None
    best_scheme: QuantScheme | None = None
    best_accuracy: float = -np.inf
    best_bits: int | None = None
    history: list[StepRecord] = field(default_factory=list)
    best_so_far: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "best_accuracy": self.best_accuracy,
            "best_bits": self.best_bits,
            "best_so_far": list(self.best_so_far),
            "history": [r.to_dict() for r in self.history],
        }


def _feasible(model, scheme: QuantScheme) -> bool:
    return all(is_feasible(model.get(n), e.mode, e.alpha) for n, e in scheme.layers.items() if e.quantized)


def compare_and_select(state: ProgressiveState, candidate, scheme: QuantScheme, accuracy: float, record=None):
    """Fold one candidate into ``state``; returns whether it became the new best."""
    if not _feasible(candidate, scheme):
        raise QuantizationError("candidate model is not feasible under its quantization scheme")
    bits = scheme.bits()
    accept = (
        state.best_model is None
        or bits < state.best_bits
        or (bits == state.best_bits and accuracy > state.best_accuracy)
    )
    if accept:
        state.best_model = candidate
        state.best_scheme = scheme
        state.best_accuracy = float(accuracy)
        state.best_bits = bits
    if record is not None:
        record.accepted = accept
        state.history.append(record)
    state.best_so_far.append(state.best_accuracy)
    state.step += 1
    return accept


def run_step(state: ProgressiveState, model, config: ProgressiveConfig, train, val, evaluate=None, rho_offset=0):
    """One ADMM quantization pass from ``model``; returns (record, candidate, scheme, trace)."""
    evaluate = evaluate or nn.evaluate
    step = state.step
    mode = config.stages[step]
    cfg = config.step_admm(step)
    scheme = QuantScheme.for_model(model, mode, config.excluded)
    seed = derive_seed(config.seed, step)
    initial = residuals(model, init_state(model, scheme, cfg.rho(rho_offset)))
    result = run_admm(model, scheme, train, cfg, val=val, seed=seed, rho_offset=rho_offset, evaluate=evaluate)
    accuracy = evaluate(result.model, val)
    record = StepRecord(
        step=step,
        mode=mode,
        accuracy=float(accuracy),
        accepted=False,
        bits=result.scheme.bits(),
        iterations=result.iterations,
        converged=result.converged,
        budget_exhausted=result.budget_exhausted,
        initial_residuals=initial,
        final_residuals=result.final_residuals,
        seed=seed,
        config=_config_snapshot(cfg),
    )
    return record, result.model, result.scheme, result.trace


def _config_snapshot(cfg: AdmmConfig) -> dict:
    d = asdict(cfg)
    d["excluded"] = list(cfg.excluded)
    return d


def run_progressive(pretrained, config: ProgressiveConfig, train, val, evaluate=None):
    """Full outer loop.  Returns ``(best_model, state, trace)``."""
    evaluate = evaluate or nn.evaluate
    state = ProgressiveState()
    trace = Trace()
    start = pretrained
    offset = 0
    for step in range(config.num_steps):
        rho_offset = 0 if config.reset_rho else offset
        record, candidate, scheme, step_trace = run_step(
            state, start, config, train, val, evaluate, rho_offset=rho_offset
        )
        offset += record.iterations
        trace.extend(step_trace)
        accepted = compare_and_select(state, candidate, scheme, record.accuracy, record)
        trace.append(
            k=record.iterations,
            layer=f"step{step}",
            rho=config.step_admm(step).rho(rho_offset + max(record.iterations - 1, 0)),
            residual=max(record.final_residuals.values(), default=0.0),
            train_loss=None,
            val_accuracy=record.accuracy,
        )
        log.info(
            "step %d (%s): val %.4f %s; best %.4f",
            step,
            record.mode,
            record.accuracy,
            "accepted" if accepted else "rejected",
            state.best_accuracy,
        )
        start = state.best_model
    return state.best_model, state, trace
