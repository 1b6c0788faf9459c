"""Desk-scale stochastic gradient calculus on a closed family of functionals.

The family is generated by constants, Brownian integrals of deterministic
step integrands, compensated-jump integrals of step-in-time/per-atom
integrands, and smooth compositions.  Differentiation follows two rules:

* Brownian direction at time t: the derivative of an integral picks out the
  integrand value at t; compositions differentiate by the chain rule
  sum_i dPhi/dx_i(F) * D_t F_i.
* Jump direction at (t, zeta): the derivative of a jump integral picks out
  the integrand at (t, zeta); compositions differentiate by the difference
  rule Phi(F + D F) - Phi(F).

Conditional expectations given the time-t filtration are computed exactly
when the derivative tree is deterministic and by polynomial least squares
on the time-t driving state otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .errors import InsufficientPaths, JumpDependentFunctional, NonAdaptedIntegrand, UnsupportedNode
from .model import LevyMeasure, TimeGrid
from .simulate import NoiseBundle, perturbed_after, sample_noise

# --------------------------------------------------------------------------
# Smooth maps


@dataclass(frozen=True, eq=False)
class SmoothMap:
    """A C^1 map R^m -> R carrying its gradient (and optionally its Hessian).

    ``fn`` and each gradient component act on a list of m equally shaped
    arrays and return one array of that shape.  ``hess`` is only needed to
    differentiate a Brownian chain-rule derivative a second time.
    """

    fn: Callable[[list[np.ndarray]], np.ndarray]
    grad: Callable[[list[np.ndarray]], list[np.ndarray]] | None
    hess: Callable[[list[np.ndarray]], list[list[np.ndarray]]] | None = None
    name: str = "phi"
    arity: int = 1


def square_map() -> SmoothMap:
    return SmoothMap(
        fn=lambda a: a[0] ** 2,
        grad=lambda a: [2.0 * a[0]],
        hess=lambda a: [[np.full_like(a[0], 2.0)]],
        name="square",
        arity=1,
    )


def affine_map(constant: float, weights: tuple[float, ...]) -> SmoothMap:
    w = tuple(float(c) for c in weights)

    def fn(a):
        out = np.full_like(a[0], float(constant))
        for wi, ai in zip(w, a):
            out = out + wi * ai
        return out

    return SmoothMap(
        fn=fn,
        grad=lambda a: [np.full_like(a[0], wi) for wi in w],
        hess=lambda a: [[np.zeros_like(a[0]) for _ in w] for _ in w],
        name="affine",
        arity=len(w),
    )


def product_map() -> SmoothMap:
    return SmoothMap(
        fn=lambda a: a[0] * a[1],
        grad=lambda a: [a[1], a[0]],
        hess=lambda a: [
            [np.zeros_like(a[0]), np.ones_like(a[0])],
            [np.ones_like(a[0]), np.zeros_like(a[0])],
        ],
        name="product",
        arity=2,
    )


def polynomial_map(coeffs: tuple[float, ...]) -> SmoothMap:
    """One-variable polynomial sum_k coeffs[k] x^k."""
    c = np.asarray(coeffs, dtype=float)
    d1 = np.polynomial.polynomial.polyder(c)
    d2 = np.polynomial.polynomial.polyder(c, 2)
    return SmoothMap(
        fn=lambda a: np.polynomial.polynomial.polyval(a[0], c),
        grad=lambda a: [np.polynomial.polynomial.polyval(a[0], d1)],
        hess=lambda a: [[np.polynomial.polynomial.polyval(a[0], d2)]],
        name="polynomial",
        arity=1,
    )


def _chain_sum_map(phi: SmoothMap) -> SmoothMap:
    """Map (x, y) -> sum_i dPhi/dx_i(x) y_i over doubled arguments."""
    if phi.grad is None:
        raise UnsupportedNode(f"map {phi.name!r} carries no gradient")
    m = phi.arity

    def fn(a):
        xs, ys = a[:m], a[m:]
        grads = phi.grad(xs)
        out = np.zeros_like(a[0])
        for gi, yi in zip(grads, ys):
            out = out + gi * yi
        return out

    grad = None
    if phi.hess is not None:

        def grad(a):
            xs, ys = a[:m], a[m:]
            H = phi.hess(xs)
            gx = [sum(H[i][j] * ys[i] for i in range(m)) for j in range(m)]
            return gx + list(phi.grad(xs))

    return SmoothMap(fn=fn, grad=grad, name=f"d({phi.name})", arity=2 * m)


def _difference_map(phi: SmoothMap) -> SmoothMap:
    """Map (x, y) -> Phi(x + y) - Phi(x) over doubled arguments."""
    m = phi.arity

    def fn(a):
        xs, ys = a[:m], a[m:]
        shifted = [x + y for x, y in zip(xs, ys)]
        return phi.fn(shifted) - phi.fn(xs)

    grad = None
    if phi.grad is not None:

        def grad(a):
            xs, ys = a[:m], a[m:]
            shifted = [x + y for x, y in zip(xs, ys)]
            gs = phi.grad(shifted)
            g0 = phi.grad(xs)
            return [gs[i] - g0[i] for i in range(m)] + list(gs)

    return SmoothMap(fn=fn, grad=grad, name=f"jump-d({phi.name})", arity=2 * m)


# --------------------------------------------------------------------------
# Functional trees


@dataclass(frozen=True, eq=False)
class Constant:
    value: float


@dataclass(frozen=True, eq=False)
class BMIntegral:
    """int_0^T h(t) dB(t) with h a deterministic step function on the grid."""

    grid: TimeGrid
    values: np.ndarray  # (N,), value of h on [t_i, t_{i+1})

    def __post_init__(self):
        values = np.ascontiguousarray(np.asarray(self.values, dtype=float))
        if values.shape != (self.grid.n_steps,):
            raise ValueError("integrand must carry one value per grid step")
        if not np.all(np.isfinite(values)):
            raise ValueError("integrand values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class JumpIntegral:
    """int_0^T int psi(t, zeta) compensated-N(dt, dzeta), psi a step function over atoms."""

    grid: TimeGrid
    levy: LevyMeasure
    values: np.ndarray  # (N, K), value of psi(t_i, zeta_k)

    def __post_init__(self):
        values = np.ascontiguousarray(np.asarray(self.values, dtype=float))
        if values.shape != (self.grid.n_steps, self.levy.n_atoms):
            raise ValueError("integrand must carry one value per (step, atom)")
        if not np.all(np.isfinite(values)):
            raise ValueError("integrand values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)


@dataclass(frozen=True, eq=False)
class Compose:
    phi: SmoothMap
    children: tuple["WienerFunctional", ...]

    def __post_init__(self):
        if len(self.children) != self.phi.arity:
            raise ValueError(f"map {self.phi.name!r} takes {self.phi.arity} arguments")


WienerFunctional = Union[Constant, BMIntegral, JumpIntegral, Compose]


@dataclass(frozen=True)
class Brownian:
    """Differentiation direction along the Brownian driver at time t."""

    t: float


@dataclass(frozen=True)
class Jump:
    """Differentiation direction along the jump driver at (t, zeta)."""

    t: float
    zeta: float


def constant(value: float) -> Constant:
    return Constant(float(value))


def bm_integral(grid: TimeGrid, values) -> BMIntegral:
    values = np.asarray(values, dtype=float)
    if values.ndim == 0:
        values = np.full(grid.n_steps, float(values))
    return BMIntegral(grid, values)


def jump_integral(grid: TimeGrid, levy: LevyMeasure, values) -> JumpIntegral:
    values = np.asarray(values, dtype=float)
    if values.ndim == 0:
        values = np.full((grid.n_steps, levy.n_atoms), float(values))
    elif values.ndim == 1 and values.shape[0] == levy.n_atoms:
        values = np.tile(values, (grid.n_steps, 1))
    return JumpIntegral(grid, levy, values)


def tree_grid(F: WienerFunctional) -> TimeGrid | None:
    """The common grid of the stochastic leaves, or None for deterministic trees."""
    if isinstance(F, (BMIntegral, JumpIntegral)):
        return F.grid
    if isinstance(F, Compose):
        grids = [g for g in (tree_grid(c) for c in F.children) if g is not None]
        for g in grids[1:]:
            if g is not grids[0] and (g.horizon != grids[0].horizon or g.n_steps != grids[0].n_steps):
                raise ValueError("children live on different grids")
        return grids[0] if grids else None
    return None


def is_deterministic(F: WienerFunctional) -> bool:
    if isinstance(F, Constant):
        return True
    if isinstance(F, Compose):
        return all(is_deterministic(c) for c in F.children)
    return False


def has_jump_nodes(F: WienerFunctional) -> bool:
    if isinstance(F, JumpIntegral):
        return True
    if isinstance(F, Compose):
        return any(has_jump_nodes(c) for c in F.children)
    return False


def evaluate(F: WienerFunctional, bundle: NoiseBundle, _memo: dict | None = None) -> np.ndarray:
    """Pathwise value of the functional on a noise bundle, shape (n_paths,).

    ``_memo`` (keyed by node identity, valid for one bundle) lets callers
    that evaluate many derivative trees sharing subtrees reuse leaf values.
    Entries pin the node object so recycled ids cannot alias.
    """
    if _memo is not None:
        hit = _memo.get(id(F))
        if hit is not None and hit[0] is F:
            return hit[1]
    if isinstance(F, Constant):
        out = np.full(bundle.n_paths, F.value)
    elif isinstance(F, BMIntegral):
        if F.values.shape[0] != bundle.grid.n_steps:
            raise ValueError("functional grid does not match the bundle grid")
        out = bundle.dB @ F.values
    elif isinstance(F, JumpIntegral):
        if F.values.shape != (bundle.grid.n_steps, bundle.levy.n_atoms):
            raise ValueError("functional grid/atoms do not match the bundle")
        if not np.allclose(F.levy.zetas, bundle.levy.zetas):
            raise ValueError("functional atoms do not match the bundle atoms")
        out = np.einsum("pik,ik->p", bundle.compensated_counts(), F.values)
    elif isinstance(F, Compose):
        out = F.phi.fn([evaluate(c, bundle, _memo) for c in F.children])
    else:
        raise UnsupportedNode(f"cannot evaluate node {type(F).__name__}")
    if _memo is not None:
        _memo[id(F)] = (F, out)
    return out


def hm_derivative(F: WienerFunctional, direction: Brownian | Jump) -> WienerFunctional:
    """Stochastic gradient of F in the given direction, as a new tree.

    An adapted tree (all integrands supported on [0, s]) differentiates to
    zero in any direction with t > s, because the picked-out integrand value
    vanishes there.
    """
    grid = tree_grid(F)
    if grid is None:
        return Constant(0.0)
    if not 0.0 <= direction.t <= grid.horizon:
        raise ValueError(f"direction time {direction.t} outside [0, {grid.horizon}]")
    i = grid.step_of(direction.t)

    if isinstance(direction, Brownian):
        if isinstance(F, Constant):
            return Constant(0.0)
        if isinstance(F, BMIntegral):
            return Constant(float(F.values[i]))
        if isinstance(F, JumpIntegral):
            return Constant(0.0)
        if isinstance(F, Compose):
            d_children = tuple(hm_derivative(c, direction) for c in F.children)
            if all(isinstance(d, Constant) and d.value == 0.0 for d in d_children):
                return Constant(0.0)
            return Compose(_chain_sum_map(F.phi), F.children + d_children)
    else:
        if isinstance(F, Constant):
            return Constant(0.0)
        if isinstance(F, BMIntegral):
            return Constant(0.0)
        if isinstance(F, JumpIntegral):
            k = F.levy.atom_index(direction.zeta)
            return Constant(float(F.values[i, k]))
        if isinstance(F, Compose):
            d_children = tuple(hm_derivative(c, direction) for c in F.children)
            if all(isinstance(d, Constant) and d.value == 0.0 for d in d_children):
                return Constant(0.0)
            return Compose(_difference_map(F.phi), F.children + d_children)
    raise UnsupportedNode(f"no differentiation rule for node {type(F).__name__}")


# --------------------------------------------------------------------------
# Conditional expectation by polynomial least squares


@dataclass(frozen=True)
class PolynomialBasis:
    """Monomials of total degree <= degree in the feature columns."""

    degree: int = 3

    def exponents(self, n_features: int) -> list[tuple[int, ...]]:
        """Deterministic ordering of all exponent tuples with total degree <= degree."""

        def extend(prefix, remaining):
            if len(prefix) == n_features:
                return [tuple(prefix)]
            out = []
            for p in range(remaining + 1):
                out.extend(extend(prefix + [p], remaining - p))
            return out

        return extend([], self.degree)

    def design(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        if features.ndim == 1:
            features = features[:, None]
        n, d = features.shape
        # cumulative powers per feature, built once
        pows = []
        for c in range(d):
            col_pows = [np.ones(n)]
            for _ in range(self.degree):
                col_pows.append(col_pows[-1] * features[:, c])
            pows.append(col_pows)
        exps = self.exponents(d)
        A = np.empty((n, len(exps)))
        for j, exp in enumerate(exps):
            term = None
            for c, p in enumerate(exp):
                if p:
                    term = pows[c][p] if term is None else term * pows[c][p]
            A[:, j] = 1.0 if term is None else term
        return A

    def dimension(self, n_features: int) -> int:
        return math.comb(n_features + self.degree, self.degree)


@dataclass
class ConditionalFit:
    """Fitted polynomial conditional expectation, reusable out of sample."""

    basis: PolynomialBasis
    coeffs: np.ndarray
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    rank_deficient: bool = False
    fitted: np.ndarray | None = None  # values on the training sample

    def __call__(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        if features.ndim == 1:
            features = features[:, None]
        z = (features - self.feature_mean) / self.feature_scale
        return self.basis.design(z) @ self.coeffs


def fit_conditional(values: np.ndarray, features: np.ndarray, basis: PolynomialBasis | None = None) -> ConditionalFit:
    """Least-squares fit of values against polynomial features of the state.

    Features are standardized internally; a trace-scaled ridge refit
    (lambda = 1e-8 tr(A'A)/m) replaces the plain solve when the design is
    rank-deficient.
    """
    basis = basis or PolynomialBasis()
    values = np.asarray(values, dtype=float)
    features = np.asarray(features, dtype=float)
    if features.ndim == 1:
        features = features[:, None]
    n = values.shape[0]
    dim = basis.dimension(features.shape[1])
    if n < dim + 10:
        raise InsufficientPaths(f"{n} paths for a {dim}-dimensional basis (need >= {dim + 10})")
    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale[scale == 0.0] = 1.0
    A = basis.design((features - mean) / scale)
    # Normal equations on the standardized design; the tiny Gram solve is far
    # cheaper than a tall-matrix SVD at these path counts.
    gram = A.T @ A
    rhs = A.T @ values
    rank = np.linalg.matrix_rank(gram, hermitian=True)
    deficient = bool(rank < A.shape[1])
    if deficient:
        lam = 1e-8 * np.trace(gram) / A.shape[1]
        coeffs = np.linalg.solve(gram + lam * np.eye(A.shape[1]), rhs)
    else:
        coeffs = np.linalg.solve(gram, rhs)
    return ConditionalFit(
        basis=basis,
        coeffs=coeffs,
        feature_mean=mean,
        feature_scale=scale,
        rank_deficient=deficient,
        fitted=A @ coeffs,
    )


def project_conditional(values: np.ndarray, features: np.ndarray, basis: PolynomialBasis | None = None) -> np.ndarray:
    """Per-path estimate of E[values | state at t] on the fitting sample."""
    return fit_conditional(values, features, basis).fitted


def _state_features(bundle: NoiseBundle, node: int) -> np.ndarray:
    """Driving-state features at a grid node: Brownian value, plus the
    compensated jump value whenever the model carries atoms."""
    if not bundle.levy.n_atoms:
        return bundle.brownian()[:, node]
    out = np.empty((bundle.n_paths, 2))
    out[:, 0] = bundle.brownian()[:, node]
    out[:, 1] = bundle.compensated_jump_path()[:, node]
    return out


def conditional_derivative(
    F: WienerFunctional,
    bundle: NoiseBundle,
    step: int,
    direction_kind: str,
    atom: int | None = None,
    basis: PolynomialBasis | None = None,
    _memo: dict | None = None,
) -> np.ndarray:
    """Per-path E[D F | F_{t_i}] for the direction anchored at node t_i.

    Deterministic derivative trees are used exactly; stochastic ones are
    projected onto polynomial features of the time-t_i driving state.
    """
    t = bundle.grid.times()[step]
    if direction_kind == "brownian":
        d = hm_derivative(F, Brownian(t))
    elif direction_kind == "jump":
        d = hm_derivative(F, Jump(t, float(bundle.levy.zetas[atom])))
    else:
        raise ValueError(f"unknown direction kind {direction_kind!r}")
    vals = evaluate(d, bundle, _memo)
    if is_deterministic(d):
        return vals
    return project_conditional(vals, _state_features(bundle, step), basis)


# --------------------------------------------------------------------------
# Duality and martingale reconstruction


@dataclass
class DualityReport:
    """Two Monte Carlo sides of a duality identity plus the pass verdict."""

    lhs: float
    rhs: float
    se_lhs: float
    se_rhs: float
    n_paths: int
    seed: int
    mode: str
    verdict: bool = field(init=False)

    def __post_init__(self):
        self.verdict = bool(abs(self.lhs - self.rhs) <= 3.0 * (self.se_lhs + self.se_rhs))

    def to_dict(self) -> dict:
        return {
            "lhs": self.lhs,
            "rhs": self.rhs,
            "se_lhs": self.se_lhs,
            "se_rhs": self.se_rhs,
            "n_paths": self.n_paths,
            "seed": self.seed,
            "mode": self.mode,
            "verdict": self.verdict,
        }


def _mean_se(values: np.ndarray) -> tuple[float, float]:
    n = values.shape[0]
    return float(values.mean()), float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0


def _probe_adapted(integrand, bundle: NoiseBundle, reference: np.ndarray) -> None:
    """Raise unless the integrand is unchanged on the past when the future is perturbed.

    The value on [t_i, t_{i+1}) may only use increments before step i, so
    perturbing every increment from step i on must leave values at steps
    <= i untouched.
    """
    n_steps = bundle.grid.n_steps
    for i in sorted({0, n_steps // 2, n_steps - 1}):
        probe = np.asarray(integrand(perturbed_after(bundle, i - 1)), dtype=float)
        if not np.array_equal(probe[:, : i + 1], reference[:, : i + 1]):
            raise NonAdaptedIntegrand(f"integrand value at or before step {i} depends on increments from step {i} on")


def check_duality(
    F: WienerFunctional,
    integrand,
    mode: str,
    levy: LevyMeasure,
    n_paths: int,
    seed: int,
    grid: TimeGrid | None = None,
    basis: PolynomialBasis | None = None,
) -> DualityReport:
    """Monte Carlo comparison of E[F * int phi dDriver] with the dual side
    E[int E[D F | F_t] phi d(t x measure)].

    ``integrand`` maps a noise bundle to adapted step values: shape
    (n_paths, N) in Brownian mode, (n_paths, N, K) in jump mode.  Adaptedness
    is enforced by a dependence probe on perturbed bundles.  The grid is
    taken from the functional tree unless F is deterministic.
    """
    if mode not in ("brownian", "jump"):
        raise ValueError(f"mode must be 'brownian' or 'jump', got {mode!r}")
    grid = grid or tree_grid(F)
    if grid is None:
        raise ValueError("a deterministic functional needs an explicit grid")
    bundle = sample_noise(grid, levy, n_paths, seed)
    dt = grid.dt
    n_steps = grid.n_steps

    phi = np.asarray(integrand(bundle), dtype=float)
    if mode == "brownian":
        if phi.shape != (n_paths, n_steps):
            raise ValueError(f"Brownian integrand must have shape (n_paths, N), got {phi.shape}")
    else:
        if levy.n_atoms == 0:
            raise ValueError("jump-mode duality needs at least one atom")
        if phi.shape != (n_paths, n_steps, levy.n_atoms):
            raise ValueError(f"jump integrand must have shape (n_paths, N, K), got {phi.shape}")
    _probe_adapted(integrand, bundle, phi)

    memo: dict = {}
    f_vals = evaluate(F, bundle, memo)
    if mode == "brownian":
        stoch = (phi * bundle.dB).sum(axis=1)
        lhs_vals = f_vals * stoch
        rhs_vals = np.zeros(n_paths)
        for i in range(n_steps):
            cond = conditional_derivative(F, bundle, i, "brownian", basis=basis, _memo=memo)
            rhs_vals += cond * phi[:, i] * dt
    else:
        stoch = (phi * bundle.compensated_counts()).sum(axis=(1, 2))
        lhs_vals = f_vals * stoch
        rhs_vals = np.zeros(n_paths)
        lam = levy.intensities
        for i in range(n_steps):
            for k in range(levy.n_atoms):
                cond = conditional_derivative(F, bundle, i, "jump", atom=k, basis=basis, _memo=memo)
                rhs_vals += cond * phi[:, i, k] * lam[k] * dt

    lhs, se_lhs = _mean_se(lhs_vals)
    rhs, se_rhs = _mean_se(rhs_vals)
    return DualityReport(lhs=lhs, rhs=rhs, se_lhs=se_lhs, se_rhs=se_rhs, n_paths=n_paths, seed=seed, mode=mode)


@dataclass
class ClarkOconeReport:
    """Martingale-representation reconstruction diagnostics."""

    l2_error: float
    mean_value: float
    n_paths: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "l2_error": self.l2_error,
            "mean_value": self.mean_value,
            "n_paths": self.n_paths,
            "seed": self.seed,
        }


def clark_ocone_reconstruct(
    F: WienerFunctional,
    n_paths: int,
    seed: int,
    grid: TimeGrid | None = None,
    basis: PolynomialBasis | None = None,
    return_paths: bool = False,
):
    """Rebuild F as mean(F) + sum_i E[D_{t_i} F | F_{t_i}] dB_i per path.

    Covers the Brownian filtration only; trees containing jump integrals are
    rejected.  Reported error is the squared-L2 ratio E[(F - Fhat)^2]/E[F^2].
    The grid is taken from the functional tree unless F is deterministic.
    """
    if has_jump_nodes(F):
        raise JumpDependentFunctional("reconstruction is defined for Brownian functionals only")
    grid = grid or tree_grid(F)
    if grid is None:
        raise ValueError("a deterministic functional needs an explicit grid")
    bundle = sample_noise(grid, LevyMeasure.empty(), n_paths, seed)
    memo: dict = {}
    f_vals = evaluate(F, bundle, memo)
    recon = np.full(n_paths, f_vals.mean())
    for i in range(grid.n_steps):
        cond = conditional_derivative(F, bundle, i, "brownian", basis=basis, _memo=memo)
        recon += cond * bundle.dB[:, i]
    denom = float(np.mean(f_vals**2))
    err = float(np.mean((f_vals - recon) ** 2) / denom) if denom > 0.0 else 0.0
    report = ClarkOconeReport(l2_error=err, mean_value=float(f_vals.mean()), n_paths=n_paths, seed=seed)
    if return_paths:
        return report, f_vals, recon, bundle
    return report
