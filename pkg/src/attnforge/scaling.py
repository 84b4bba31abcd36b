"""Scaling-exponent prediction, power-law fitting, and capacity bounds.

The two exponents tie the intrinsic data dimension d and regularity beta
to observable power laws: squared generalization error ~ n^(-alpha_D)
with alpha_D = 2 beta / (2 beta + d), and squared approximation error
~ size^(-alpha_N) with alpha_N = 2 beta / d. Either exponent determines
the other without knowing d: alpha_D = alpha_N / (alpha_N + 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ParameterError

__all__ = [
    "ExponentPrediction",
    "ScalingFit",
    "ArchParams",
    "predict_exponents",
    "convert_exponents",
    "fit_power_law",
    "log_covering_number",
    "generalization_rate_curve",
    "predicted_architecture",
]


@dataclass(frozen=True)
class ExponentPrediction:
    alpha_D: float
    alpha_N: float
    d: float
    beta: float


@dataclass(frozen=True)
class ScalingFit:
    exponent: float
    coefficient: float
    offset: float
    residual_rms: float
    n_points: int


@dataclass(frozen=True)
class ArchParams:
    """Architecture tuple consumed by the covering-number calculator."""

    L_T: int
    L_ff: int
    w_ff: int
    l: int
    d_embd: int
    m: int
    kappa: float
    M: float
    R: float
    D: int
    delta: float = 1.0

    def __post_init__(self):
        ints = (self.L_T, self.L_ff, self.w_ff, self.l, self.d_embd, self.m, self.D)
        if any(v <= 0 for v in ints):
            raise ParameterError("architecture counts must be positive integers")
        if self.kappa <= 0 or self.M <= 0 or self.R <= 0:
            raise ParameterError("kappa, M and R must be positive")
        if not (0.0 < self.delta <= 1.0):
            raise ParameterError("delta must lie in (0, 1]")


def predict_exponents(d: float, beta: float = 1.0) -> ExponentPrediction:
    """alpha_D = 2 beta/(2 beta + d), alpha_N = 2 beta/d."""
    if d <= 0 or not (0.0 < beta <= 1.0):
        raise ParameterError("need d > 0 and beta in (0, 1]")
    return ExponentPrediction(
        alpha_D=2.0 * beta / (2.0 * beta + d),
        alpha_N=2.0 * beta / d,
        d=float(d),
        beta=float(beta),
    )


def convert_exponents(known: str, value: float) -> float:
    """Convert between the data and model exponents without estimating d.

    ``known='alpha_N'`` returns alpha_D = alpha_N/(alpha_N + 1);
    ``known='alpha_D'`` returns alpha_N = alpha_D/(1 - alpha_D).
    """
    if value <= 0:
        raise DomainError("exponent must be positive")
    if known == "alpha_N":
        return value / (value + 1.0)
    if known == "alpha_D":
        if value >= 1.0:
            raise DomainError("alpha_D must be below 1 for the conversion")
        return value / (1.0 - value)
    raise ParameterError("known must be 'alpha_N' or 'alpha_D'")


def _plain_fit(log_n: np.ndarray, log_loss: np.ndarray) -> tuple[float, float, float]:
    slope, intercept = np.polyfit(log_n, log_loss, 1)
    resid = log_loss - (slope * log_n + intercept)
    rms = float(np.sqrt(np.mean(resid**2)))
    return float(-slope), float(math.exp(intercept)), rms


def fit_power_law(points, mode: str = "plain") -> ScalingFit:
    """Fit loss ~ B n^(-alpha) (plain) or loss ~ B n^(-alpha) + E (offset).

    Plain mode is ordinary least squares on (ln n, ln loss). Offset mode
    grid-searches the irreducible loss E over 64 values in
    [0, 0.99 min(loss)], refitting the shifted losses and keeping the E
    with the smallest residual RMS.
    """
    pts = [(float(n), float(y)) for n, y in points]
    if len(pts) < 3:
        raise ParameterError("need at least 3 points")
    n = np.array([p[0] for p in pts])
    loss = np.array([p[1] for p in pts])
    if np.any(n <= 0) or np.any(loss <= 0):
        raise DomainError("sizes and losses must be positive")
    if np.any(np.diff(n) <= 0):
        raise ParameterError("sizes must be strictly increasing")
    log_n = np.log(n)
    if mode == "plain":
        alpha, coeff, rms = _plain_fit(log_n, np.log(loss))
        return ScalingFit(alpha, coeff, 0.0, rms, len(pts))
    if mode != "offset":
        raise ParameterError("mode must be 'plain' or 'offset'")
    best = None
    for E in np.linspace(0.0, 0.99 * float(np.min(loss)), 64):
        shifted = loss - E
        if np.any(shifted <= 0):
            continue
        alpha, coeff, rms = _plain_fit(log_n, np.log(shifted))
        if best is None or rms < best[3]:
            best = (alpha, coeff, float(E), rms)
    if best is None:
        raise DomainError("offset search exhausted: shifted losses nonpositive")
    return ScalingFit(best[0], best[1], best[2], best[3], len(pts))


def log_covering_number(params: ArchParams) -> float:
    """Natural log of the sup-norm covering number of the net class.

    log N(delta) = P * [ (L_T^2+1) ln 2 + ln L_ff + 3 L_T ln M
                       + 18 L_T^2 ln d_embd + 18 L_T^2 L_ff ln w_ff
                       + 6 L_T^2 L_ff ln kappa + L_T^2 ln m + L_T^2 ln l
                       - ln delta ]
    with parameter count P = 4 d_embd^2 w_ff^2 D (m + L_ff) L_T.
    """
    p = params
    P = 4.0 * p.d_embd**2 * p.w_ff**2 * p.D * (p.m + p.L_ff) * p.L_T
    L2 = float(p.L_T) ** 2
    bracket = (
        (L2 + 1.0) * math.log(2.0)
        + math.log(p.L_ff)
        + 3.0 * p.L_T * math.log(p.M)
        + 18.0 * L2 * math.log(p.d_embd)
        + 18.0 * L2 * p.L_ff * math.log(p.w_ff)
        + 6.0 * L2 * p.L_ff * math.log(p.kappa)
        + L2 * math.log(p.m)
        + L2 * math.log(p.l)
        - math.log(p.delta)
    )
    return P * bracket


def covering_slope_in_log_delta(params: ArchParams) -> float:
    """d(log N)/d(-ln delta): exactly the parameter count P."""
    p = params
    return 4.0 * p.d_embd**2 * p.w_ff**2 * p.D * (p.m + p.L_ff) * p.L_T


def generalization_rate_curve(d: float, beta: float, D: float, n_values) -> list[tuple[float, float]]:
    """Rate shape D d^2 n^(-2 beta/(2 beta + d)); a bound shape, not a
    calibrated loss (hidden constants and log factors are not modeled)."""
    if d <= 0 or beta <= 0 or D <= 0:
        raise ParameterError("d, beta and D must be positive")
    expo = 2.0 * beta / (2.0 * beta + d)
    return [(float(n), float(D * d**2 * float(n) ** (-expo))) for n in n_values]


def predicted_architecture(
    d: int,
    beta: float = 1.0,
    epsilon: float | None = None,
    n: float | None = None,
    holder_const: float = 1.0,
    sup_bound: float = 1.0,
    mode: str | None = None,
) -> tuple[ArchParams, dict]:
    """Concrete architecture table for the cube synthesizer at a given
    accuracy (approximation mode) or sample size (estimation mode).

    Returns the parameter tuple plus the asymptotic driver expressions.
    """
    from .blocks import one_minus_cos_step
    from .cube import choose_N, cube_token_count, _next_pow2

    if mode is None:
        mode = "approximation" if epsilon is not None else "estimation"
    if mode == "approximation":
        if epsilon is None:
            raise ParameterError("approximation mode needs epsilon")
        N = choose_N(epsilon, d, holder_const, beta)
        drivers = {
            "grid_resolution": N,
            "width_driver": f"O(d * eps^(-d/beta)) = O(d * {epsilon} ** (-{d}/{beta}))",
            "width_driver_value": d * epsilon ** (-d / beta),
        }
    elif mode == "estimation":
        if n is None:
            raise ParameterError("estimation mode needs n")
        driver = float(n) ** (d / (2.0 * beta + d))
        N = max(2, int(math.ceil(driver)) + 1)
        drivers = {
            "grid_resolution": N,
            "grid_driver": f"n^(d/(2 beta + d)) = {n} ** ({d}/{2 * beta + d})",
            "grid_driver_value": driver,
        }
    else:
        raise ParameterError("mode must be 'approximation' or 'estimation'")

    d_pad = _next_pow2(d)
    l = cube_token_count(d, N)
    m = max(N * d, N**d * d_pad, 4 * N**d, 2 * N**d + 2)
    R = max(sup_bound, 1.0)
    kappa = 2.0 * 5**4 * R**2 * R**2 / one_minus_cos_step(l) + 1.0
    params = ArchParams(
        L_T=int(math.log2(d_pad)) + 4,
        L_ff=2,
        w_ff=7,
        l=l,
        d_embd=5,
        m=m,
        kappa=kappa,
        M=R,
        R=R,
        D=d,
        delta=1.0,
    )
    drivers["depth"] = f"log2(d_pad) + 4 = {params.L_T}"
    drivers["token_count"] = l
    return params, drivers
