"""Levenberg-Marquardt least squares with multiplicative damping control."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["LMResult", "levenberg_marquardt", "forward_jacobian"]

#: residual norms this far below the starting one are treated as exact fits
PRECISION_FLOOR = 1e-8


@dataclass
class LMResult:
    x: np.ndarray
    residual: np.ndarray
    jacobian: np.ndarray
    covariance: np.ndarray  # (J^T J)^-1, not scaled by the residual variance
    residual_norm: float
    iterations: int
    converged: bool
    message: str
    history: list = field(default_factory=list)

    @property
    def n_residuals(self) -> int:
        return len(self.residual)


def forward_jacobian(fun, x, r0=None, rel_step=1e-6, lower=None, upper=None):
    """Forward differences with step ``rel_step * max(|x_j|, 1)``.

    Steps that would leave the box are taken backwards instead.
    """
    x = np.asarray(x, dtype=float)
    r0 = fun(x) if r0 is None else r0
    jac = np.empty((len(r0), len(x)))
    for j in range(len(x)):
        h = rel_step * max(abs(x[j]), 1.0)
        if upper is not None and x[j] + h > upper[j]:
            h = -h
        xp = x.copy()
        xp[j] += h
        jac[:, j] = (fun(xp) - r0) / h
    return jac


def _reflect(x, lower, upper):
    x = x.copy()
    for j in range(len(x)):
        lo, hi = lower[j], upper[j]
        if np.isfinite(lo) and np.isfinite(hi):
            span = hi - lo
            y = np.mod(x[j] - lo, 2.0 * span)
            x[j] = lo + (y if y <= span else 2.0 * span - y)
        else:
            # a one-sided bound is a floor or ceiling the solution may sit on
            x[j] = min(max(x[j], lo), hi)
    return x


def levenberg_marquardt(residual_fn, x0, bounds=None, *, lam0=1e-3, nu=10.0,
                        xtol=1e-8, ftol=1e-10, gtol=1e-14, max_iter=200,
                        rel_step=1e-6, jacobian=None) -> LMResult:
    """Minimise ``||residual_fn(x)||^2``.

    The step solves ``(J^T J + lam * D) dx = -J^T r`` with ``D`` the
    diagonal of ``J^T J`` (floored so singular directions stay damped).
    ``lam`` is divided by ``nu`` after an accepted step and multiplied by
    ``nu`` after a rejected one.  Proposed points are reflected back into
    two-sided ``bounds = (lower, upper)`` and clipped onto one-sided ones.
    Stops on relative parameter change below ``xtol``, relative cost change
    below ``ftol``, a residual norm ``PRECISION_FLOOR`` times the starting
    one, or ``max_iter`` Jacobian evaluations; failure to converge is
    reported, never raised.
    """
    x = np.asarray(x0, dtype=float).copy()
    p = len(x)
    if bounds is None:
        lower, upper = np.full(p, -np.inf), np.full(p, np.inf)
    else:
        lower = np.broadcast_to(np.asarray(bounds[0], dtype=float), (p,))
        upper = np.broadcast_to(np.asarray(bounds[1], dtype=float), (p,))
    x = _reflect(x, lower, upper)
    jac_fn = jacobian or (lambda xx, rr: forward_jacobian(
        residual_fn, xx, rr, rel_step, lower, upper))

    r = np.asarray(residual_fn(x), dtype=float)
    if not np.all(np.isfinite(r)):
        raise ValueError("residual function is not finite at the initial point")
    cost = float(r @ r)
    lam = lam0
    converged = False
    message = "maximum iterations reached"
    history = [cost]
    iterations = 0
    jac = jac_fn(x, r)

    while iterations < max_iter:
        iterations += 1
        grad = jac.T @ r
        jtj = jac.T @ jac
        if cost == 0.0 or np.max(np.abs(grad)) <= gtol * max(1.0, cost):
            converged, message = True, "gradient vanished"
            break
        diag = np.diag(jtj).copy()
        diag = np.maximum(diag, 1e-12 * max(float(diag.max()), 1e-300))

        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(jtj + lam * np.diag(diag), -grad)
            except np.linalg.LinAlgError:
                lam *= nu
                continue
            x_new = _reflect(x + step, lower, upper)
            try:
                r_new = np.asarray(residual_fn(x_new), dtype=float)
            except (ArithmeticError, ValueError):
                # trial point outside the model's domain: treat as rejected
                r_new = np.full_like(r, np.inf)
            cost_new = float(r_new @ r_new) if np.all(np.isfinite(r_new)) else np.inf
            if cost_new < cost:
                accepted = True
                lam = max(lam / nu, 1e-15)
                break
            lam *= nu
        if not accepted:
            converged, message = True, "no further decrease possible"
            break

        dx = x_new - x
        dcost = cost - cost_new
        x, r, cost = x_new, r_new, cost_new
        history.append(cost)
        jac = jac_fn(x, r)
        if np.linalg.norm(dx) <= xtol * (np.linalg.norm(x) + xtol):
            converged, message = True, "relative parameter change below xtol"
            break
        if dcost <= ftol * cost_new:
            converged, message = True, "relative cost change below ftol"
            break
        if cost_new <= PRECISION_FLOOR**2 * history[0]:
            converged, message = True, "residual at numerical precision"
            break

    jtj = jac.T @ jac
    if not np.all(np.isfinite(jtj)):
        cov = np.full((p, p), np.nan)
    else:
        try:
            cov = np.linalg.inv(jtj)
            if not np.all(np.isfinite(cov)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            cov = np.linalg.pinv(jtj)
    return LMResult(x, r, jac, cov, float(np.sqrt(cost)), iterations, converged,
                    message, history)
