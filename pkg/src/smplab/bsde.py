"""Linear adjoint BSDE solvers and martingale-coefficient extraction.

Sign convention: a backward equation dp(t) = -h(t) dt + q(t) dB(t)
+ int r(t, zeta) compensated-N(dt, dzeta) with generator h discretizes to
p(t_i) = E[p(t_{i+1}) + h(t_i) dt | F_{t_i}].  The adjoint equation of the
control problem has generator h = dH/dx.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractionFailure
from .malliavin import PolynomialBasis, fit_conditional, project_conditional
from .simulate import NoiseBundle, PathBundle, gamma_process

# Atoms whose expected step count falls below this are reported as r = 0
# rather than divided out.
UNIDENTIFIABLE_RATE = 1e-10


@dataclass(frozen=True, eq=False)
class AdjointTriple:
    """Grid-indexed adjoint solution: p on nodes, (q, r) on step intervals."""

    grid: object
    p: np.ndarray  # (n_paths, N+1)
    q: np.ndarray  # (n_paths, N)
    r: np.ndarray  # (n_paths, N, K)
    unidentifiable_atoms: tuple[int, ...] = ()

    @property
    def n_paths(self) -> int:
        return self.p.shape[0]


def relative_l2_dtP(a: np.ndarray, b: np.ndarray, dt: float) -> float:
    """Relative L2(dt x P) distance ||a - b|| / ||b|| over (path, step) arrays."""
    num = math.sqrt(float(np.mean(np.sum((a - b) ** 2, axis=1) * dt)))
    den = math.sqrt(float(np.mean(np.sum(b**2, axis=1) * dt)))
    return num / den if den > 0.0 else num


def l2_dtP_norm(a: np.ndarray, dt: float) -> float:
    return math.sqrt(float(np.mean(np.sum(a**2, axis=1) * dt)))


def extract_qr(
    p: np.ndarray,
    noise: NoiseBundle,
    features: np.ndarray | None = None,
    basis: PolynomialBasis | None = None,
) -> tuple[np.ndarray, np.ndarray, tuple[int, ...]]:
    """Martingale coefficients of an adapted process by conditional regression.

    q(t_i) and r(t_i, zeta_k) are the fitted conditional expectations of
    (p(t_{i+1}) - p(t_i)) dB_i / dt and
    (p(t_{i+1}) - p(t_i)) (dN_k - lam_k dt) / (lam_k dt)
    against polynomial features of the time-t_i state; this is the grid
    surrogate for the right limits E[D_t p(t+) | F_t] identifying (q, r).

    ``features`` holds the regression state per node, shape (n_paths, N+1)
    or (n_paths, N+1, d); by default the driving noise state is used.
    Atoms with lam_k dt below 1e-10 are unidentifiable and yield r = 0.
    """
    grid, levy = noise.grid, noise.levy
    n_paths, n_steps = p.shape[0], grid.n_steps
    if p.shape != (n_paths, n_steps + 1):
        raise ValueError("p must hold one value per path and grid node")
    dt = grid.dt
    if features is None:
        cols = [noise.brownian()]
        if levy.n_atoms:
            cols.append(noise.compensated_jump_path())
        features = np.stack(cols, axis=2)
    features = np.asarray(features, dtype=float)

    comp = noise.compensated_counts() if levy.n_atoms else None
    lam = levy.intensities
    q = np.empty((n_paths, n_steps))
    r = np.zeros((n_paths, n_steps, levy.n_atoms))
    dead = set()
    d_p = p[:, 1:] - p[:, :-1]
    for i in range(n_steps):
        feats = features[:, i]
        q[:, i] = project_conditional(d_p[:, i] * noise.dB[:, i] / dt, feats, basis)
        for k in range(levy.n_atoms):
            rate = lam[k] * dt
            if rate < UNIDENTIFIABLE_RATE:
                dead.add(k)
                continue
            r[:, i, k] = project_conditional(d_p[:, i] * comp[:, i, k] / rate, feats, basis)
    return q, r, tuple(sorted(dead))


def solve_linear_explicit(
    f_x: np.ndarray,
    b_x: np.ndarray,
    sigma_x: np.ndarray,
    gamma_x: np.ndarray,
    terminal: np.ndarray,
    forward: PathBundle,
    basis: PolynomialBasis | None = None,
) -> AdjointTriple:
    """Adjoint solution by the weighted conditional-expectation formula.

    With Gamma the first-variation weight of the driver partials,
    p(t_i) = E[Gamma(T)/Gamma(t_i) terminal
              + sum_{j>=i} Gamma(t_j)/Gamma(t_i) f_x(t_j) dt | F_{t_i}],
    the conditional expectation realized by regression on X(t_i).  (q, r)
    are filled by ``extract_qr`` on the same state features.
    """
    noise = forward.noise
    grid = noise.grid
    n_paths, n_steps = forward.n_paths, grid.n_steps
    dt = grid.dt
    terminal = np.asarray(terminal, dtype=float)

    gam = gamma_process(b_x, sigma_x, gamma_x, noise)
    p = np.empty((n_paths, n_steps + 1))
    p[:, n_steps] = terminal
    f_x = np.broadcast_to(np.asarray(f_x, dtype=float), (n_paths, n_steps))
    tail = gam[:, n_steps] * terminal
    for i in range(n_steps - 1, -1, -1):
        tail = tail + gam[:, i] * f_x[:, i] * dt
        p[:, i] = project_conditional(tail / gam[:, i], forward.X[:, i], basis)
    q, r, dead = extract_qr(p, noise, features=forward.X, basis=basis)
    return AdjointTriple(grid=grid, p=p, q=q, r=r, unidentifiable_atoms=dead)


def solve_regression(
    driver,
    terminal,
    forward: PathBundle,
    basis: PolynomialBasis | None = None,
    max_iters: int = 50,
    tol: float = 1e-8,
) -> AdjointTriple:
    """Backward least-squares scheme with a one-step implicit generator.

    p(t_i) = E[p(t_{i+1}) | F_{t_i}] + driver(t_i, X_i, p_i, q_i, r_i) dt,
    the implicit p_i resolved by fixed-point iteration (the driver argument
    is the previous iterate), capped at ``max_iters`` with tolerance ``tol``.
    ``driver`` is the generator h of dp = -h dt + q dB + r dN-compensated and
    must be Lipschitz in (p, q, r) with dt * Lip < 1; ``terminal`` maps the
    final state to p(T).
    """
    noise = forward.noise
    grid, levy = noise.grid, noise.levy
    n_paths, n_steps = forward.n_paths, grid.n_steps
    dt = grid.dt
    times = grid.times()
    lam = levy.intensities
    comp = noise.compensated_counts() if levy.n_atoms else None

    p = np.empty((n_paths, n_steps + 1))
    q = np.empty((n_paths, n_steps))
    r = np.zeros((n_paths, n_steps, levy.n_atoms))
    dead = set()
    p[:, n_steps] = np.asarray(terminal(forward.X[:, n_steps]), dtype=float)

    for i in range(n_steps - 1, -1, -1):
        feats = forward.X[:, i]
        cond = fit_conditional(p[:, i + 1], feats, basis).fitted
        mart = p[:, i + 1] - cond
        q[:, i] = project_conditional(mart * noise.dB[:, i] / dt, feats, basis)
        for k in range(levy.n_atoms):
            rate = lam[k] * dt
            if rate < UNIDENTIFIABLE_RATE:
                dead.add(k)
                continue
            r[:, i, k] = project_conditional(mart * comp[:, i, k] / rate, feats, basis)

        p_i = cond
        prev_res = math.inf
        for _ in range(max_iters):
            h = np.asarray(driver(times[i], forward.X[:, i], p_i, q[:, i], r[:, i]), dtype=float)
            p_new = cond + h * dt
            res = float(np.max(np.abs(p_new - p_i)))
            p_i = p_new
            if res < tol:
                break
            if res >= prev_res:
                raise ContractionFailure(f"fixed-point residual stalled at {res:.3e} on step {i}")
            prev_res = res
        else:
            raise ContractionFailure(f"no convergence in {max_iters} iterations on step {i}")
        p[:, i] = p_i
    return AdjointTriple(grid=grid, p=p, q=q, r=r, unidentifiable_atoms=tuple(sorted(dead)))


def dump_adjoint_csv(triple: AdjointTriple, path, max_paths: int | None = None) -> None:
    """Rows (path_id, step, t, p, q, r_atom0, ...); the terminal node row
    reports p only."""
    grid = triple.grid
    times = grid.times()
    n_steps = grid.n_steps
    n_atoms = triple.r.shape[2]
    n_paths = triple.n_paths if max_paths is None else min(max_paths, triple.n_paths)

    def fmt(v) -> str:
        return format(float(v), ".17g")

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path_id", "step", "t", "p", "q"] + [f"r_atom{k}" for k in range(n_atoms)])
        for j in range(n_paths):
            for i in range(n_steps):
                row = [j, i, fmt(times[i]), fmt(triple.p[j, i]), fmt(triple.q[j, i])]
                row += [fmt(triple.r[j, i, k]) for k in range(n_atoms)]
                writer.writerow(row)
            writer.writerow([j, n_steps, fmt(times[-1]), fmt(triple.p[j, -1]), ""] + [""] * n_atoms)
