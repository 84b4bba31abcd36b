"""Registry of closed-form regression targets with declared regularity.

Each target carries a Hölder exponent in (0, 1], a Hölder constant valid
on its stated domain, and a sup bound R. The sup bound is spot-checked on
10^4 samples when the target is registered.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import BoundViolationError, ParameterError

__all__ = ["HolderTarget", "make_target", "registry_names"]


@dataclass(frozen=True)
class HolderTarget:
    """Named closed-form target with declared Hölder data."""

    name: str
    d: int
    holder_exponent: float
    holder_const: float
    sup_bound: float
    params: dict = field(default_factory=dict)
    _fn: Callable[[np.ndarray], np.ndarray] = field(repr=False, default=None)

    def __post_init__(self):
        if not (0.0 < self.holder_exponent <= 1.0):
            raise ParameterError("Hölder exponent must lie in (0, 1]")
        if self.holder_const <= 0 or self.sup_bound <= 0:
            raise ParameterError("Hölder constant and sup bound must be positive")
        probe = np.random.default_rng(0).uniform(0.0, 1.0, size=(10_000, self.d))
        vals = self._fn(probe)
        if not np.all(np.isfinite(vals)):
            raise BoundViolationError(f"{self.name}: non-finite values on the cube")
        worst = float(np.max(np.abs(vals)))
        if worst > self.sup_bound * (1 + 1e-9):
            raise BoundViolationError(
                f"{self.name}: |f| reaches {worst:.6g} > declared bound {self.sup_bound}"
            )

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        """Evaluate on a batch of points, shape (P, d) or (d,)."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        if X.shape[1] != self.d:
            raise ParameterError(f"{self.name} expects {self.d}-dimensional input")
        out = self._fn(X)
        return float(out[0]) if single else out


def _linear(w, b):
    w = np.asarray(w, dtype=float)

    def fn(X):
        return X @ w + b

    return fn


def _product_of_sines(amplitude, freq):
    def fn(X):
        return amplitude * np.prod(np.sin(np.pi * freq * X), axis=1)

    return fn


def _gaussian_bump(amplitude, center, width):
    center = np.asarray(center, dtype=float)

    def fn(X):
        sq = np.sum((X - center) ** 2, axis=1)
        return amplitude * np.exp(-sq / (2.0 * width**2))

    return fn


def _radial(amplitude, center):
    center = np.asarray(center, dtype=float)

    def fn(X):
        sq = np.sum((X - center) ** 2, axis=1)
        return amplitude / (1.0 + sq)

    return fn


def _polynomial(coeffs):
    # coeffs: list of (coefficient, multi-index tuple)
    terms = [(float(c), np.asarray(m, dtype=int)) for c, m in coeffs]

    def fn(X):
        out = np.zeros(X.shape[0])
        for c, m in terms:
            out += c * np.prod(X ** m[None, :], axis=1)
        return out

    return fn


def make_target(name: str, d: int, **params) -> HolderTarget:
    """Build a registry target on [0,1]^d.

    Known names: linear, product_of_sines, gaussian_bump, radial,
    polynomial. Hölder constants are analytic gradient bounds on the cube
    (exponent 1 throughout; rougher exponents may be declared explicitly
    via ``beta``).
    """
    beta = params.pop("beta", 1.0)
    if name == "linear":
        w = np.asarray(params.get("w", np.full(d, 0.5 / max(d, 1))), dtype=float)
        b = float(params.get("b", 0.25))
        hf = float(np.linalg.norm(w)) or 1e-9
        R = float(np.sum(np.abs(w)) + abs(b)) or 1e-9
        return HolderTarget(name, d, beta, hf, R, {"w": w.tolist(), "b": b}, _linear(w, b))
    if name == "product_of_sines":
        a = float(params.get("amplitude", 0.9))
        k = float(params.get("freq", 1.0))
        hf = abs(a) * np.pi * k * np.sqrt(d)
        return HolderTarget(
            name, d, beta, hf, abs(a), {"amplitude": a, "freq": k}, _product_of_sines(a, k)
        )
    if name == "gaussian_bump":
        a = float(params.get("amplitude", 1.0))
        c = np.asarray(params.get("center", np.full(d, 0.5)), dtype=float)
        s = float(params.get("width", 0.35))
        hf = abs(a) / s * np.exp(-0.5)
        return HolderTarget(
            name, d, beta, hf, abs(a),
            {"amplitude": a, "center": c.tolist(), "width": s}, _gaussian_bump(a, c, s),
        )
    if name == "radial":
        a = float(params.get("amplitude", 0.8))
        c = np.asarray(params.get("center", np.full(d, 0.2)), dtype=float)
        # |d/ds a/(1+s^2)| maximized at s = 1/sqrt(3): (3 sqrt(3)/8) a
        hf = abs(a) * 3.0 * np.sqrt(3.0) / 8.0
        return HolderTarget(
            name, d, beta, hf, abs(a), {"amplitude": a, "center": c.tolist()}, _radial(a, c)
        )
    if name == "polynomial":
        coeffs = params.get("coeffs")
        if not coeffs:
            raise ParameterError("polynomial target needs coeffs=[(c, multi_index), ...]")
        fn = _polynomial(coeffs)
        # crude but safe gradient bound on the cube
        hf = sum(abs(c) * max(1, int(np.sum(m))) * np.sqrt(d) for c, m in coeffs) or 1e-9
        R = sum(abs(c) for c, _ in coeffs) or 1e-9
        return HolderTarget(name, d, beta, hf, R, {"coeffs": [[c, list(m)] for c, m in coeffs]}, fn)
    raise ParameterError(f"unknown target {name!r}; known: {registry_names()}")


def registry_names() -> list[str]:
    return ["linear", "product_of_sines", "gaussian_bump", "radial", "polynomial"]
