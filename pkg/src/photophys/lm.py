"""Damped Gauss-Newton (Levenberg-Marquardt) for small dense problems."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LMOutcome:
    x: np.ndarray
    cost: float  # 0.5 * sum(r**2) of the weighted residual
    jac: np.ndarray
    residual: np.ndarray
    n_iterations: int
    converged: bool
    gradient_cosine: float
    message: str


def gradient_cosine(J, r, active=None) -> float:
    """Largest |cos| between the residual and a free Jacobian column.

    Zero at an exact stationary point; scale-free, so one tolerance works for
    any data units. Columns flagged in `active` (parameters held at a bound
    by a gradient pointing outward) are ignored.
    """
    rn = np.linalg.norm(r)
    if rn == 0.0:
        return 0.0
    cn = np.linalg.norm(J, axis=0)
    g = np.abs(J.T @ r)
    if active is not None:
        g = np.where(active, 0.0, g)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(cn > 0, g / (cn * rn), 0.0)
    return float(c.max()) if c.size else 0.0


def levenberg_marquardt(
    fun,
    x0,
    lower=None,
    max_iter: int = 200,
    xtol: float = 1e-8,
    gtol: float = 1e-6,
    lam0: float = 1e-3,
    r_scale: float | None = None,
) -> LMOutcome:
    """Minimise ``0.5 * ||r(x)||**2``.

    `fun(x)` returns ``(r, J)``, the residual vector and its Jacobian.
    Parameters with a finite entry in `lower` are projected onto their bound
    after every step. Iteration stops when the relative step falls below
    `xtol` or after `max_iter` iterations; the fit counts as converged only
    if the gradient cosine is also below `gtol` at the final point, or if
    the residual has shrunk to round-off relative to `r_scale` (default: the
    initial residual norm), where the cosine carries no information.
    """
    x = np.array(x0, dtype=float)
    lo = None if lower is None else np.asarray(lower, dtype=float)
    if lo is not None:
        x = np.maximum(x, lo)
    r, J = fun(x)
    cost = 0.5 * float(r @ r)
    if r_scale is None:
        r_scale = float(np.sqrt(2.0 * cost))
    lam = lam0
    message = "maximum iterations reached"
    stopped = False
    it = 0
    for it in range(1, max_iter + 1):
        JtJ = J.T @ J
        g = J.T @ r
        d = np.diag(JtJ).copy()
        d[d == 0] = 1.0
        # parameters pinned at their bound by an outward gradient stay put
        free = np.ones(x.size, bool) if lo is None else ~((x <= lo) & (g > 0))
        if not free.any():
            message = "all parameters at bounds"
            stopped = True
            break
        Jf = JtJ[np.ix_(free, free)]
        improved = False
        while lam < 1e16:
            A = Jf + lam * np.diag(d[free])
            try:
                step = np.zeros_like(x)
                step[free] = -np.linalg.solve(A, g[free])
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = x + step
            if lo is not None:
                x_new = np.maximum(x_new, lo)
            r_new, J_new = fun(x_new)
            cost_new = 0.5 * float(r_new @ r_new)
            if np.isfinite(cost_new) and cost_new <= cost:
                improved = True
                break
            lam *= 10.0
        if not improved:
            message = "no further decrease possible"
            stopped = True
            break
        dx = x_new - x
        x, r, J, cost = x_new, r_new, J_new, cost_new
        lam = max(lam / 10.0, 1e-12)
        if np.all(np.abs(dx) <= xtol * (np.abs(x) + xtol)):
            message = "relative step below xtol"
            stopped = True
            break
    active = None
    if lo is not None:
        active = (x <= lo) & (J.T @ r > 0)
    gc = gradient_cosine(J, r, active)
    # an exact fit has nothing left to explain
    exact = np.sqrt(2.0 * cost) <= 1e-10 * r_scale
    converged = bool(stopped and (gc <= gtol or exact))
    return LMOutcome(x, cost, J, r, it, converged, gc, message)


def covariance(J, scale: float = 1.0):
    """``scale * (J^T J)^-1`` via pseudo-inverse (tolerates rank deficiency)."""
    return scale * np.linalg.pinv(J.T @ J)
