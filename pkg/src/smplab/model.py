"""Controlled jump-diffusion model data: time grid, jump measure, coefficients, control laws.

Coefficient maps follow a single calling convention: ``b(t, x, u)``,
``sigma(t, x, u)``, ``f(t, x, u)`` and their partials take a scalar time
``t`` plus numpy arrays (or scalars) ``x`` and ``u`` of a common broadcast
shape and return an array of that shape; ``gamma(t, x, u, zeta)`` and its
partials additionally take one scalar jump size ``zeta``; ``g(x)`` and
``g_x(x)`` take the terminal state only.  All maps must be pure functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import EmptyProbeSet, NonFiniteEvaluation

# Lower margin for 1 + dgamma/dx: the closed forms divide by it and take
# its log, so the jump-size bound gamma >= -1 is strengthened to a strict
# positive distance from the singularity.
DELTA_SING = 1e-6

# Relative step used by the finite-difference cross-check of user partials.
_FD_STEP = 1e-5
_FD_RTOL = 1e-4


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with N steps and N+1 nodes."""

    horizon: float
    n_steps: int

    def __post_init__(self):
        if not (math.isfinite(self.horizon) and self.horizon > 0.0):
            raise ValueError(f"horizon must be finite and positive, got {self.horizon}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 2:
            raise ValueError(f"n_steps must be an integer >= 2, got {self.n_steps}")
        # N * dt must reproduce T up to a few ulps.
        if abs(self.n_steps * self.dt - self.horizon) > 8 * math.ulp(self.horizon):
            raise ValueError("n_steps * dt does not reproduce the horizon")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    def times(self) -> np.ndarray:
        """Node times t_0 = 0, ..., t_N = T."""
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def step_of(self, t: float) -> int:
        """Index i of the step interval [t_i, t_{i+1}) containing t.

        t = T maps to the last step (left-limit convention).  A tolerance of
        1e-9 * dt absorbs float rounding of grid-aligned times.
        """
        if not 0.0 <= t <= self.horizon:
            raise ValueError(f"time {t} outside [0, {self.horizon}]")
        i = int(np.searchsorted(self.times(), t + 1e-9 * self.dt, side="right")) - 1
        return min(max(i, 0), self.n_steps - 1)

    def window_steps(self, start: float, length: float) -> np.ndarray:
        """Boolean mask over steps whose interval meets [start, start+length).

        Realizes the spike window on the grid: step i is selected iff
        t_i < start + length and t_{i+1} > start, with a 1e-9 * dt tolerance
        so that grid-aligned windows select exactly the expected steps.
        """
        tol = 1e-9 * self.dt
        times = self.times()
        return (times[:-1] < start + length - tol) & (times[1:] > start + tol)


@dataclass(frozen=True)
class LevyMeasure:
    """Finite-atom jump measure: a list of (jump size, intensity) pairs."""

    atoms: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        for zeta, lam in self.atoms:
            if not (math.isfinite(zeta) and zeta != 0.0):
                raise ValueError(f"jump size must be finite and nonzero, got {zeta}")
            if not (math.isfinite(lam) and lam >= 0.0):
                raise ValueError(f"intensity must be finite and >= 0, got {lam}")

    @classmethod
    def empty(cls) -> "LevyMeasure":
        return cls(())

    @classmethod
    def from_pairs(cls, pairs) -> "LevyMeasure":
        return cls(tuple((float(z), float(l)) for z, l in pairs))

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def zetas(self) -> np.ndarray:
        return np.array([z for z, _ in self.atoms], dtype=float)

    @property
    def intensities(self) -> np.ndarray:
        return np.array([l for _, l in self.atoms], dtype=float)

    @property
    def second_moment(self) -> float:
        """sum of intensity * zeta**2 over atoms."""
        return float(sum(l * z * z for z, l in self.atoms))

    def atom_index(self, zeta: float) -> int:
        for k, (z, _) in enumerate(self.atoms):
            if np.isclose(z, zeta, rtol=1e-12, atol=0.0):
                return k
        raise ValueError(f"jump size {zeta} is not an atom of this measure")


CoeffMap = Callable[..., np.ndarray]


@dataclass(frozen=True)
class ControlledCoefficients:
    """Evaluation maps of the controlled system and their partials.

    Partials are user-supplied; ``validate_coefficients`` cross-checks them
    against central finite differences on a probe set.
    """

    b: CoeffMap
    sigma: CoeffMap
    gamma: CoeffMap
    f: CoeffMap
    g: CoeffMap
    b_x: CoeffMap
    b_u: CoeffMap
    sigma_x: CoeffMap
    sigma_u: CoeffMap
    gamma_x: CoeffMap
    gamma_u: CoeffMap
    f_x: CoeffMap
    f_u: CoeffMap
    g_x: CoeffMap
    control_set: tuple[float, float] = (-math.inf, math.inf)

    def clamp(self, u):
        lo, hi = self.control_set
        return np.clip(u, lo, hi)


class ControlLaw:
    """A control process; emitted values are clamped to ``bounds``."""

    def __init__(self, bounds: tuple[float, float] = (-math.inf, math.inf)):
        self.bounds = (float(bounds[0]), float(bounds[1]))

    def control_at(self, step: int, t: float, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _clip(self, u, x):
        lo, hi = self.bounds
        return np.clip(np.broadcast_to(np.asarray(u, dtype=float), np.shape(x)), lo, hi)


class OpenLoopLaw(ControlLaw):
    """Per-step control values, constant on [t_i, t_{i+1}).

    ``values`` has shape (N,) shared by all paths or (n_paths, N).
    """

    def __init__(self, values: np.ndarray, bounds=(-math.inf, math.inf)):
        super().__init__(bounds)
        values = np.asarray(values, dtype=float)
        if values.ndim not in (1, 2):
            raise ValueError("open-loop values must be 1- or 2-dimensional")
        self.values = values

    @property
    def n_steps(self) -> int:
        return self.values.shape[-1]

    def control_at(self, step, t, x):
        if self.values.ndim == 1:
            u = self.values[step]
        else:
            u = self.values[:, step]
        return self._clip(u, x)


class FeedbackLaw(ControlLaw):
    """Markovian feedback u = fn(t, x)."""

    def __init__(self, fn: Callable[[float, np.ndarray], np.ndarray], bounds=(-math.inf, math.inf)):
        super().__init__(bounds)
        self.fn = fn

    def control_at(self, step, t, x):
        return self._clip(self.fn(t, np.asarray(x, dtype=float)), x)


class SpikedLaw(ControlLaw):
    """Base law overridden by a fixed value on a window of steps."""

    def __init__(self, base: ControlLaw, window: np.ndarray, spike_values):
        super().__init__(base.bounds)
        self.base = base
        self.window = np.asarray(window, dtype=bool)
        self.spike_values = spike_values

    def control_at(self, step, t, x):
        if self.window[step]:
            return self._clip(self.spike_values, x)
        return self.base.control_at(step, t, x)


@dataclass
class ValidationReport:
    """Outcome of the finite-difference cross-check of supplied partials."""

    discrepancies: dict = field(default_factory=dict)
    max_discrepancy: float = 0.0
    min_one_plus_gamma_x: float = math.inf
    lipschitz_x: float = 0.0
    passed: bool = False


def _central_difference(fn, args, index, h):
    lo = list(args)
    hi = list(args)
    lo[index] = args[index] - h
    hi[index] = args[index] + h
    with np.errstate(all="ignore"):
        return (fn(*hi) - fn(*lo)) / (2.0 * h)


def _check_finite(name, value):
    if not np.all(np.isfinite(value)):
        raise NonFiniteEvaluation(f"{name} returned a non-finite value")


def validate_coefficients(coeffs: ControlledCoefficients, probe) -> ValidationReport:
    """Cross-check supplied partials against central differences on a probe set.

    Parameters
    ----------
    coeffs : ControlledCoefficients
    probe : list of (t, x, u, zeta) tuples; every u must lie in the control set.

    Returns
    -------
    ValidationReport with the worst normalized discrepancy
    |fd - partial| / max(1, |partial|) per partial, the minimum of
    1 + gamma_x over probes, and an empirical Lipschitz-in-x estimate from
    probe pairs.  ``passed`` requires max discrepancy < 1e-4 and
    min(1 + gamma_x) >= DELTA_SING.
    """
    probe = list(probe)
    if not probe:
        raise EmptyProbeSet("validation requires at least one probe point")
    lo, hi = coeffs.control_set
    for t, x, u, zeta in probe:
        if not lo <= u <= hi:
            raise ValueError(f"probe control {u} outside control set {coeffs.control_set}")

    report = ValidationReport()

    checks = [
        ("b_x", coeffs.b, coeffs.b_x, 1, 3),
        ("b_u", coeffs.b, coeffs.b_u, 2, 3),
        ("sigma_x", coeffs.sigma, coeffs.sigma_x, 1, 3),
        ("sigma_u", coeffs.sigma, coeffs.sigma_u, 2, 3),
        ("gamma_x", coeffs.gamma, coeffs.gamma_x, 1, 4),
        ("gamma_u", coeffs.gamma, coeffs.gamma_u, 2, 4),
        ("f_x", coeffs.f, coeffs.f_x, 1, 3),
        ("f_u", coeffs.f, coeffs.f_u, 2, 3),
    ]
    min_gx = math.inf
    for name, fn, partial, index, arity in checks:
        worst = 0.0
        for t, x, u, zeta in probe:
            args = (t, x, u, zeta)[:arity]
            exact = np.asarray(partial(*args), dtype=float)
            _check_finite(name, exact)
            h = _FD_STEP * max(1.0, abs(args[index]))
            fd = _central_difference(fn, args, index, h)
            _check_finite(name + " (finite difference)", fd)
            worst = max(worst, float(abs(fd - exact) / max(1.0, abs(exact))))
        report.discrepancies[name] = worst

    worst = 0.0
    for t, x, u, zeta in probe:
        exact = np.asarray(coeffs.g_x(x), dtype=float)
        _check_finite("g_x", exact)
        h = _FD_STEP * max(1.0, abs(x))
        fd = (coeffs.g(x + h) - coeffs.g(x - h)) / (2.0 * h)
        _check_finite("g_x (finite difference)", fd)
        worst = max(worst, float(abs(fd - exact) / max(1.0, abs(exact))))
        min_gx = min(min_gx, 1.0 + float(coeffs.gamma_x(t, x, u, zeta)))
    report.discrepancies["g_x"] = worst

    # Empirical Lipschitz-in-x constant over probe pairs, aggregating drift,
    # diffusion and jump coefficients the way the model regularity bound does.
    lip_sq = 0.0
    for i in range(len(probe)):
        for j in range(i + 1, len(probe)):
            t, xi, u, zeta = probe[i]
            xj = probe[j][1]
            dx_sq = (xi - xj) ** 2
            if dx_sq == 0.0:
                continue
            db = float(coeffs.b(t, xi, u) - coeffs.b(t, xj, u))
            ds = float(coeffs.sigma(t, xi, u) - coeffs.sigma(t, xj, u))
            dg = float(coeffs.gamma(t, xi, u, zeta) - coeffs.gamma(t, xj, u, zeta))
            lip_sq = max(lip_sq, (db * db + ds * ds + dg * dg) / dx_sq)

    report.max_discrepancy = max(report.discrepancies.values())
    report.min_one_plus_gamma_x = min_gx
    report.lipschitz_x = math.sqrt(lip_sq)
    report.passed = report.max_discrepancy < _FD_RTOL and min_gx >= DELTA_SING
    return report


def build_lq_coefficients(sigma: float, levy: LevyMeasure, gamma_map: Callable[[float], float]) -> ControlledCoefficients:
    """Linear-quadratic model: dX = u dt + sigma dB + jumps, cost -u^2/2, payoff -x^2/2.

    The control set is [0, inf); the jump coefficient depends on the jump
    size only.
    """
    sigma = float(sigma)
    if not math.isfinite(sigma):
        raise ValueError("sigma must be finite")
    for zeta in levy.zetas:
        if not math.isfinite(float(gamma_map(zeta))):
            raise ValueError(f"gamma_map not finite at atom {zeta}")

    def like(value, x, u):
        shape = np.broadcast(np.asarray(x), np.asarray(u)).shape
        return np.broadcast_to(np.asarray(value, dtype=float), shape)

    return ControlledCoefficients(
        b=lambda t, x, u: like(u, x, u),
        sigma=lambda t, x, u: like(sigma, x, u),
        gamma=lambda t, x, u, zeta: like(float(gamma_map(zeta)), x, u),
        f=lambda t, x, u: like(-0.5 * np.asarray(u, dtype=float) ** 2, x, u),
        g=lambda x: -0.5 * np.asarray(x, dtype=float) ** 2,
        b_x=lambda t, x, u: like(0.0, x, u),
        b_u=lambda t, x, u: like(1.0, x, u),
        sigma_x=lambda t, x, u: like(0.0, x, u),
        sigma_u=lambda t, x, u: like(0.0, x, u),
        gamma_x=lambda t, x, u, zeta: like(0.0, x, u),
        gamma_u=lambda t, x, u, zeta: like(0.0, x, u),
        f_x=lambda t, x, u: like(0.0, x, u),
        f_u=lambda t, x, u: like(-np.asarray(u, dtype=float), x, u),
        g_x=lambda x: -np.asarray(x, dtype=float),
        control_set=(0.0, math.inf),
    )
