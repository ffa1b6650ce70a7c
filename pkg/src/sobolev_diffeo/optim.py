"""Preconditioned descent with Armijo backtracking.

Both solvers in the package minimize smooth objectives of a velocity array.
The objective callback may raise :class:`DegenerateFlowError`; such trial
points are rejected and the step is halved.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .flow import DegenerateFlowError

log = logging.getLogger(__name__)


@dataclass
class DescentResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    trace: list = field(default_factory=list)
    rejected: int = 0
    message: str = ""


def minimize(fun_grad, x0, precond=None, method="gd", max_iter=500, ftol=1e-12, gtol=1e-10,
             armijo=1e-4, memory=10, min_step=1e-14) -> DescentResult:
    """Minimize ``fun_grad(x) -> (F, dF/dx)``.

    ``precond`` maps a Euclidean gradient to the search metric's gradient
    (for the velocity problems this is ``K`` rescaled by the quadrature
    weights).  ``method="gd"`` is preconditioned steepest descent, ``"lbfgs"``
    uses the preconditioner as initial inverse Hessian.

    The trace holds the objective after every accepted step and is
    nonincreasing by construction.
    """
    P = precond if precond is not None else (lambda g: g)
    x = np.array(x0, dtype=float)
    F, g = fun_grad(x)
    trace = [F]
    hist = deque(maxlen=memory)
    step = 1.0
    rejected = 0
    message = "max_iter"
    it = 0
    for it in range(1, max_iter + 1):
        pg = P(g)
        gnorm2 = float(np.sum(g * pg))
        if gnorm2 <= gtol**2:
            message = "gtol"
            it -= 1
            break
        if method == "lbfgs" and hist:
            d = -_two_loop(g, hist, P)
            slope = float(np.sum(g * d))
            if slope >= 0:
                hist.clear()
                d, slope = -pg, -gnorm2
            alpha = 1.0
        else:
            d, slope = -pg, -gnorm2
            alpha = min(1.0, 2.0 * step) if method == "gd" else 1.0
        accepted = False
        while alpha >= min_step:
            x_new = x + alpha * d
            try:
                F_new, g_new = fun_grad(x_new)
            except DegenerateFlowError:
                rejected += 1
                alpha *= 0.5
                continue
            if np.isfinite(F_new) and F_new <= F + armijo * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            message = "line search failed"
            it -= 1
            break
        s_vec = x_new - x
        y_vec = g_new - g
        if method == "lbfgs":
            sy = float(np.sum(s_vec * y_vec))
            if sy > 1e-14 * np.sqrt(np.sum(s_vec**2) * np.sum(y_vec**2)):
                hist.append((s_vec, y_vec, 1.0 / sy))
        decrease = F - F_new
        x, F, g, step = x_new, F_new, g_new, alpha
        trace.append(F)
        if decrease <= ftol * max(abs(F), 1e-300):
            message = "ftol"
            break
    log.debug("descent stopped after %d iterations: %s (F=%.6g)", it, message, F)
    return DescentResult(x=x, fun=F, grad=g, iterations=it, trace=trace, rejected=rejected, message=message)


def _two_loop(g, hist, P):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(hist):
        a = rho * float(np.sum(s * q))
        alphas.append(a)
        q -= a * y
    s, y, _ = hist[-1]
    Py = P(y)
    gamma = float(np.sum(s * y)) / float(np.sum(y * Py))
    r = gamma * P(q)
    for (s, y, rho), a in zip(hist, reversed(alphas)):
        b = rho * float(np.sum(y * r))
        r += s * (a - b)
    return r
