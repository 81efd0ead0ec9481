"""Closed-form bounds on the distance exponent and the fractal dimension d_gamma.

All irrational constants are computed from library square roots at double
precision so that the algebraic identities at xi = 1/sqrt(6) hold to
round-off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from .errors import (
    BracketFailureError,
    DomainError,
    ExcludedPointError,
    InconsistentLambdaError,
    OutsideSubcriticalError,
)

XI_BRANCH = 1.0 / math.sqrt(6.0)
SLOPE_2D = math.sqrt(2.5) - 1.0 / math.sqrt(6.0)
OFFSET_2D = (math.sqrt(15.0) - 2.0) / 6.0


def _check_xi(xi: float) -> None:
    if not xi >= 0:
        raise DomainError(f"xi must be >= 0, got {xi}")


def _linear_branch(xi: float) -> float:
    return SLOPE_2D * xi - OFFSET_2D


def _quadratic_branch(xi: float) -> float:
    return 0.25 - 0.5 * xi * xi


def rho_lower_2d(xi: float) -> float:
    """Best known lower bound on lambda(2, xi)."""
    _check_xi(xi)
    if xi <= XI_BRANCH:
        return max(_linear_branch(xi), 0.0)
    return max(_quadratic_branch(xi), 0.0)


def rho_upper_2d(xi: float) -> float:
    """Best known upper bound on lambda(2, xi)."""
    _check_xi(xi)
    if xi <= XI_BRANCH:
        return min(_quadratic_branch(xi), math.sqrt(2.0) * xi)
    return min(_linear_branch(xi), 1.0)


def upper_highdim(d: int, xi: float) -> float:
    """xi sqrt(2d - 2), the counting upper bound for d >= 3."""
    return xi * math.sqrt(2 * d - 2)


@dataclass
class BoundReport:
    d: int
    param: float
    lower: float
    upper: float
    param_name: str = "xi"
    provenance: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "d": self.d,
            self.param_name: self.param,
            "lower": self.lower,
            "upper": self.upper,
            "provenance": dict(self.provenance),
            "notes": list(self.notes),
        }


def lambda_bounds(d: int, xi: float) -> BoundReport:
    if d < 2 or int(d) != d:
        raise DomainError(f"d must be an integer >= 2, got {d}")
    _check_xi(xi)
    lower = rho_lower_2d(xi)
    lower_src = "rho_lower_2d (2D bounds)" if d == 2 else "rho_lower_2d via dimension monotonicity"
    if d == 2:
        upper, upper_src = rho_upper_2d(xi), "rho_upper_2d (2D bounds)"
    else:
        upper, upper_src = upper_highdim(d, xi), "xi*sqrt(2d-2) (thick-point counting)"
    return BoundReport(d, xi, lower, upper, provenance={"lower": lower_src, "upper": upper_src})


def highdim_lower(A: float, xi: float) -> float:
    """A xi - 1/A: a lower bound on lambda(d, xi) valid only for d >= C(A), C unknown."""
    if not A > 0:
        raise DomainError(f"A must be positive, got {A}")
    _check_xi(xi)
    return A * xi - 1.0 / A


HIGHDIM_CAVEAT = "valid only for d >= C(A); C(A) is not explicit, so this cannot be checked against data"


def q_hat(lam: float, xi: float) -> float:
    """(1 - lambda) / xi."""
    if xi == 0:
        raise ExcludedPointError("q_hat is undefined at xi = 0")
    if xi < 0:
        raise DomainError("xi must be positive")
    return (1.0 - lam) / xi


# ---------------------------------------------------------------------------
# Exponent functions


class LambdaFunction:
    """A map xi -> lambda, continuous on the queried range.

    Built from a closed form, or from (xi, lambda) knots with linear
    interpolation.
    """

    def __init__(self, func: Callable[[float], float], label: str = "lambda", domain: tuple[float, float] = (0.0, math.inf)):
        self._func = func
        self.label = label
        self.domain = domain

    def __call__(self, xi: float) -> float:
        lo, hi = self.domain
        if not lo <= xi <= hi:
            raise DomainError(f"{self.label} is defined on [{lo}, {hi}], queried at {xi}")
        return float(self._func(xi))

    def __repr__(self):
        return f"LambdaFunction({self.label})"

    @classmethod
    def constant(cls, value: float) -> "LambdaFunction":
        return cls(lambda xi: value, label=f"const({value})")

    @classmethod
    def linear(cls, slope: float, intercept: float = 0.0) -> "LambdaFunction":
        return cls(lambda xi: intercept + slope * xi, label=f"{intercept}+{slope}*xi")

    @classmethod
    def lower_bound(cls, d: int) -> "LambdaFunction":
        return cls(rho_lower_2d, label=f"lower_bound(d={d})")

    @classmethod
    def upper_bound(cls, d: int) -> "LambdaFunction":
        if d == 2:
            return cls(rho_upper_2d, label="upper_bound(d=2)")
        return cls(lambda xi: upper_highdim(d, xi), label=f"upper_bound(d={d})")

    @classmethod
    def from_table(cls, xi: Sequence[float], lam: Sequence[float], d: int | None = None, label: str = "table") -> "LambdaFunction":
        """Linear interpolation through knots.

        With ``d`` given, values are clamped into the proven bracket
        [lower_bound, upper_bound] for that dimension, the knot (0, 0) is
        added when missing, and the function extends flat past the last knot
        so that it is defined on all of [0, inf).
        """
        xs = np.asarray(xi, dtype=np.float64)
        ys = np.asarray(lam, dtype=np.float64)
        order = np.argsort(xs)
        xs, ys = xs[order], ys[order]
        if xs.size < 2:
            raise ValueError("need at least two knots")
        if d is not None and xs[0] > 0:
            xs, ys = np.concatenate([[0.0], xs]), np.concatenate([[0.0], ys])

        def interp(x):
            y = float(np.interp(x, xs, ys))
            if d is not None:
                y = min(max(y, rho_lower_2d(x)), lambda_bounds(d, x).upper)
            return y

        domain = (0.0, math.inf) if d is not None else (float(xs[0]), float(xs[-1]))
        return cls(interp, label=label, domain=domain)


# ---------------------------------------------------------------------------
# Fractal dimension


@dataclass
class DimensionSolution:
    gamma: float
    d: int
    d_gamma: float
    residual: float

    @property
    def xi(self) -> float:
        return self.gamma / self.d_gamma

    @property
    def Q(self) -> float:
        return self.d / self.gamma + self.gamma / 2

    def as_dict(self) -> dict:
        return {"gamma": self.gamma, "d": self.d, "d_gamma": self.d_gamma, "xi": self.xi, "Q": self.Q, "residual": self.residual}


def _check_gamma(d: int, gamma: float) -> None:
    if d < 2:
        raise DomainError("d must be >= 2")
    if not 0 < gamma < math.sqrt(2 * d):
        raise DomainError(f"gamma must lie in (0, sqrt(2d)) = (0, {math.sqrt(2 * d):.6f}), got {gamma}")


def solve_d_gamma(gamma: float, d: int, lam: Callable[[float], float], tol: float = 1e-9) -> DimensionSolution:
    """Unique m with lam(gamma/m) = 1 - (gamma/m) Q, Q = d/gamma + gamma/2.

    Bisection on [d, d + gamma^2/2 + gamma sqrt(2d - 2) + 1]; the upper end
    is widened once if the bracket shows no sign change.
    """
    _check_gamma(d, gamma)
    Q = d / gamma + gamma / 2

    def F(m):
        xi = gamma / m
        return lam(xi) - 1.0 + xi * Q

    lo = float(d)
    hi = d + gamma**2 / 2 + gamma * math.sqrt(2 * d - 2) + 1.0
    f_lo, f_hi = F(lo), F(hi)
    if f_lo * f_hi > 0:
        hi = 2 * hi
        f_hi = F(hi)
    if f_lo * f_hi > 0:
        raise InconsistentLambdaError(f"no sign change of lambda(xi) - 1 + xi Q on [{lo}, {hi}] for gamma={gamma}")
    if f_lo == 0:
        m = lo
    elif f_hi == 0:
        m = hi
    else:
        m = optimize.bisect(F, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=400)
    residual = abs(F(m))
    if residual > tol:
        raise InconsistentLambdaError(f"bisection ended with residual {residual:.3e} > {tol:.1e}")
    return DimensionSolution(gamma=gamma, d=d, d_gamma=m, residual=residual)


def d_gamma_bounds(d: int, gamma: float) -> BoundReport:
    """Bracket on d_gamma implied by the bounds on lambda(d, .)."""
    if d < 3:
        raise DomainError("d_gamma bounds are stated for d >= 3")
    _check_gamma(d, gamma)
    base = d + gamma**2 / 2
    refined = 6.0 / (math.sqrt(15.0) + 4.0) * (base + SLOPE_2D * gamma)
    lower = max(base, refined)
    upper = base + gamma * math.sqrt(2 * d - 2)
    src = "d + gamma^2/2 (lambda >= 0)" if base >= refined else "6/(sqrt15+4)(...) (lower linear branch)"
    return BoundReport(d, gamma, lower, upper, param_name="gamma", provenance={"lower": src, "upper": "lambda <= xi sqrt(2d-2)"})


def d_gamma_from_qhat(qh: float, xi: float, d: int) -> float:
    """d_gamma = gamma / xi where gamma = Q_hat - sqrt(Q_hat^2 - 2d) solves Q(gamma) = Q_hat."""
    disc = qh * qh - 2 * d
    if disc <= 0:
        raise OutsideSubcriticalError(f"Q_hat={qh:.6f} <= sqrt(2d)")
    return (qh - math.sqrt(disc)) / xi


def d_gamma_derivative_check(lam: Callable[[float], float], d: int, xi_grid: Sequence[float], near_critical: float = 1e-3) -> dict:
    """Evaluate d(d_gamma)/d(xi) from Q_hat and compare with solver differences.

    At each interior grid point the two-factor expression
    -(1/xi^2)(Q - sqrt(Q^2 - 2d))(1 + xi Q' / sqrt(Q^2 - 2d)) is evaluated
    with a central-difference Q', checked for positivity, and compared
    with the central difference of d_gamma obtained from
    :func:`solve_d_gamma` at gamma = Q - sqrt(Q^2 - 2d).
    """
    xs = np.asarray(xi_grid, dtype=np.float64)
    if xs.size < 3:
        raise ValueError("need at least three grid points")
    qh = np.array([q_hat(lam(x), x) for x in xs])
    if np.any(qh <= math.sqrt(2 * d)):
        bad = xs[qh <= math.sqrt(2 * d)]
        raise OutsideSubcriticalError(f"Q_hat <= sqrt(2d) at xi = {bad.tolist()}")
    solved = []
    for x, q in zip(xs, qh):
        gamma = q - math.sqrt(q * q - 2 * d)
        solved.append(solve_d_gamma(gamma, d, lam).d_gamma)
    solved = np.array(solved)
    rows = []
    for i in range(1, xs.size - 1):
        x, q = xs[i], qh[i]
        q_prime = (qh[i + 1] - qh[i - 1]) / (xs[i + 1] - xs[i - 1])
        root = math.sqrt(q * q - 2 * d)
        factor = 1 + x * q_prime / root
        formula = -(q - root) * factor / (x * x)
        direct = (solved[i + 1] - solved[i - 1]) / (xs[i + 1] - xs[i - 1])
        rows.append(
            {
                "xi": float(x),
                "q_hat": float(q),
                "q_hat_prime": float(q_prime),
                "factor": float(factor),
                "derivative_formula": float(formula),
                "derivative_direct": float(direct),
                "positive": bool(formula > 0),
                "near_critical": bool(root < near_critical * q),
            }
        )
    return {
        "d": d,
        "rows": rows,
        "all_positive": all(r["positive"] for r in rows),
        "max_abs_disagreement": max(abs(r["derivative_formula"] - r["derivative_direct"]) for r in rows),
    }


def xi_critical(d: int, lam: Callable[[float], float], xi_max: float = 10.0) -> float:
    """Solve Q_hat(xi) = sqrt(2d) by bisection on (0, xi_max]."""
    target = math.sqrt(2 * d)

    def G(x):
        return q_hat(lam(x), x) - target

    lo = 1e-12
    grid = np.linspace(lo, xi_max, 2001)
    values = np.array([G(x) for x in grid])
    sign_change = np.nonzero(np.sign(values[:-1]) != np.sign(values[1:]))[0]
    if values[0] <= 0 or sign_change.size == 0:
        raise BracketFailureError(f"Q_hat does not cross sqrt(2d) on (0, {xi_max}] for {lam!r}")
    i = int(sign_change[0])
    return float(optimize.bisect(G, grid[i], grid[i + 1], xtol=1e-15, maxiter=400))


def xi_c_bracket(d: int, lam_lower: Callable[[float], float], lam_upper: Callable[[float], float]) -> tuple[float, float]:
    """[xi_c from the upper exponent function, xi_c from the lower one]."""
    return xi_critical(d, lam_upper), xi_critical(d, lam_lower)


# ---------------------------------------------------------------------------
# Figure tables


def lambda_figure_table(d: int, xi_max: float | None = None, step: float = 1e-3) -> np.ndarray:
    """Rows (xi, lower, upper) of the lambda(d, .) bounds."""
    if xi_max is None:
        xi_max = 1.0 if d == 2 else 0.8
    xs = np.round(np.arange(0.0, xi_max + step / 2, step), 12)
    return np.array([(x, rho_lower_2d(x), lambda_bounds(d, x).upper) for x in xs])


def dgamma_figure_table(d: int, step: float = 1e-3) -> np.ndarray:
    """Rows (gamma, lower, upper) of the d_gamma bracket on (0, sqrt(2d))."""
    top = math.sqrt(2 * d)
    gs = np.round(np.arange(step, top, step), 12)
    gs = gs[gs < top]
    rows = []
    for g in gs:
        rep = d_gamma_bounds(d, g)
        rows.append((g, rep.lower, rep.upper))
    return np.array(rows)
