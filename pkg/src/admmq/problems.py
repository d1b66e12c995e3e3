"""Quadratic objectives with the same surface as :class:`admmq.nn.Model`.

They let the ADMM loop run on problems whose constrained optimum can be
found by enumeration.
"""
from __future__ import annotations

import copy
import itertools

import numpy as np

from .data import Dataset


class QuadraticObjective:
    """``f(w) = 0.5 * w^T A w - b^T w + c`` over one weight vector named ``"w.weight"``.

    ``A`` must be symmetric positive semidefinite.  The batch arguments of
    :meth:`loss_and_grad` are ignored: every step sees the full objective.
    """

    name = "w.weight"

    def __init__(self, A, b, c=0.0, w0=None):
        self.A = np.asarray(A, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.c = float(c)
        n = self.b.size
        if self.A.shape != (n, n):
            raise ValueError(f"A must be {n}x{n}, got {self.A.shape}")
        self.w = np.zeros(n) if w0 is None else np.array(w0, dtype=np.float64)

    @classmethod
    def least_squares(cls, X, y, w0=None) -> "QuadraticObjective":
        """``0.5 * ||X w - y||^2``."""
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return cls(X.T @ X, X.T @ y, 0.5 * float(y @ y), w0)

    @property
    def N(self):
        return 1

    def weight_names(self):
        return [self.name]

    def parameters(self):
        return {self.name: self.w}

    def get(self, name):
        return self.w

    def set(self, name, value):
        self.w[...] = value

    def copy(self):
        return copy.deepcopy(self)

    def value(self, w=None) -> float:
        w = self.w if w is None else np.asarray(w, dtype=np.float64)
        return float(0.5 * w @ self.A @ w - self.b @ w + self.c)

    def loss(self, inputs=None, labels=None) -> float:
        return self.value()

    def loss_and_grad(self, inputs=None, labels=None):
        return self.value(), {self.name: self.A @ self.w - self.b}

    def minimizer(self) -> np.ndarray:
        return np.linalg.lstsq(self.A, self.b, rcond=None)[0]

    def lipschitz(self) -> float:
        return float(np.linalg.eigvalsh(self.A)[-1])

    def proximal_minimizer(self, rho, target) -> np.ndarray:
        """argmin f(w) + rho/2 ||w - target||^2 = (A + rho I)^-1 (b + rho target)."""
        n = self.b.size
        return np.linalg.solve(self.A + rho * np.eye(n), self.b + rho * np.asarray(target))

    def best_binary(self):
        """Exhaustive optimum over sign patterns with the loss-optimal alpha.

        For a sign vector s, f(alpha s) is a parabola in alpha minimized at
        alpha = b.s / s.A.s (clamped to stay positive).  Returns
        ``(objective, alpha, signs)``.
        """
        n = self.b.size
        best = (np.inf, None, None)
        for bits in itertools.product((1.0, -1.0), repeat=n - 1):
            s = np.array((1.0,) + bits)  # s and -s give the same objective
            curv = s @ self.A @ s
            lin = self.b @ s
            if lin < 0:
                s, lin = -s, -lin
            alpha = lin / curv if curv > 0 else 0.0
            if alpha <= 0:
                continue
            val = self.value(alpha * s)
            if val < best[0]:
                best = (val, alpha, s)
        return best


def single_batch() -> Dataset:
    """A one-row dataset so that one training epoch is one optimizer step."""
    return Dataset(np.zeros((1, 1)), np.zeros(1, dtype=np.int64))


def planted_least_squares(n_weights, seed, n_samples=None, noise=0.3):
    """Seeded ``0.5 ||X w - y||^2`` with y generated from a random binary vector.

    The starting point is the unconstrained least-squares solution, playing
    the role of a pretrained model.
    """
    rng = np.random.default_rng(seed)
    m = n_samples or 2 * n_weights
    X = rng.standard_normal((m, n_weights))
    alpha = rng.uniform(0.5, 2.0)
    signs = rng.choice([-1.0, 1.0], size=n_weights)
    y = X @ (alpha * signs) + noise * rng.standard_normal(m)
    problem = QuadraticObjective.least_squares(X, y)
    problem.w[...] = problem.minimizer()
    return problem
