"""Continuous-time flows whose discretizations are the splitting methods.

Two flows are simulated by explicit Euler stepping:

* the proximal-point flow ``dx/dt = J_{lam*(B+C)}(x) - x`` for the
  two-operator inclusion (``A`` is ignored), and
* the Douglas-Rachford flow ``x = J_{lam*A}(z)``,
  ``y = J_{lam*(B+C)}(2x - z)``, ``dz/dt = y - x`` for the full triple.

Equilibria of either flow are exactly the fixed points of the corresponding
splitting dynamics.  Higher-order integrators are deliberately out of scope:
the discrete methods these flows explain are first order.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .operators import (AffineOperator, BilinearCoupling, OperatorError,
                        ZeroOperator, as_vector)


class InnerSolveError(OperatorError):
    """The iterative evaluation of J_{lam*(B+C)} did not converge.

    Carries the last fixed-point residual and, when raised from a flow
    simulation, the time stamp of the failing step.
    """

    def __init__(self, message, residual, t=None):
        super().__init__(message)
        self.residual = residual
        self.t = t


class AlignmentError(OperatorError):
    """Flow and trace samples cannot be aligned."""


@dataclass
class FlowTrajectory:
    """Euler trajectory: ``states[j]`` approximates the flow at ``times[j]``."""

    times: np.ndarray
    states: np.ndarray
    h_ode: float
    lam: float
    inner_tol: float

    @property
    def terminal(self):
        return self.states[-1]


def _linear_parts(op):
    """(M, b) of an affine-representable operator, or None."""
    if isinstance(op, ZeroOperator):
        return np.zeros((op.dim, op.dim)), np.zeros(op.dim)
    if isinstance(op, AffineOperator):
        return op.M, op.b
    if isinstance(op, BilinearCoupling):
        M = np.zeros((op.dim, op.dim))
        M[:op.n, op.n:] = op.K.T
        M[op.n:, :op.n] = -op.K
        b = np.zeros(op.dim)
        b[op.n:] = op.c
        return M, b
    return None


class _SumResolvent:
    """Evaluator for ``J_{lam*(B+C)}``, direct where possible.

    When both ``B`` and ``C`` are affine-representable the resolvent is one
    cached dense solve.  Otherwise it is computed iteratively with the
    forward-reflected-backward method applied to the shifted inclusion
    ``0 in (lam*B + I - w)(u) + lam*C(u)``, whose forward part is strongly
    monotone with modulus one and Lipschitz with constant ``lam*L + 1``; the
    iteration needs no cocoercivity and converges linearly.  Stops at
    fixed-point residual ``|J_{lam*C}(w - lam*B(u)) - u| <= inner_tol``.
    """

    def __init__(self, problem, lam, inner_tol=1e-10, max_inner=100000):
        if lam <= 0:
            raise OperatorError("lam must be positive")
        self.problem = problem
        self.lam = lam
        self.inner_tol = inner_tol
        self.max_inner = max_inner
        pb = _linear_parts(problem.B)
        pc = _linear_parts(problem.C)
        if pb is not None and pc is not None:
            Msum = pb[0] + pc[0]
            self._bsum = pb[1] + pc[1]
            self._lu = lu_factor(np.eye(problem.dim) + lam * Msum)
        else:
            self._lu = None
            L = problem.B.lipschitz or 0.0
            self._tau = 0.9 / (2.0 * (lam * L + 1.0))

    def __call__(self, w):
        lam = self.lam
        if self._lu is not None:
            return lu_solve(self._lu, w - lam * self._bsum, check_finite=False)
        B, C = self.problem.B, self.problem.C
        tau = self._tau

        def F(u):
            return lam * B.forward(u) + u - w

        u = C.resolve(lam, w)          # exact answer for B = 0
        f_prev = F(u)
        f = f_prev
        for _ in range(self.max_inner):
            resid = np.linalg.norm(C.resolve(lam, w - lam * B.forward(u)) - u)
            if resid <= self.inner_tol:
                return u
            u = C.resolve(tau * lam, u - tau * (2.0 * f - f_prev))
            f_prev, f = f, F(u)
        resid = float(np.linalg.norm(
            C.resolve(lam, w - lam * B.forward(u)) - u))
        raise InnerSolveError(
            f"inner solver stalled at residual {resid:.3e} "
            f"(tol {self.inner_tol:g})", residual=resid)


def resolvent_sum(problem, lam, w, inner_tol=1e-10, max_inner=100000):
    """Evaluate ``u = J_{lam*(B+C)}(w)``, i.e. ``0 in lam*(B+C)(u) + u - w``.

    Affine problems use one direct linear solve; otherwise an inner
    fixed-point iteration is run to ``inner_tol`` (see :class:`_SumResolvent`).
    """
    w = as_vector(w, problem.dim, "w")
    return _SumResolvent(problem, lam, inner_tol, max_inner)(w)


def _euler(rhs, v0, h_ode, T):
    if not 0.0 < h_ode <= 1.0:
        raise OperatorError("h_ode must lie in (0, 1]")
    if T <= 0:
        raise OperatorError("T must be positive")
    n = int(round(T / h_ode))
    states = np.empty((n + 1, v0.shape[0]))
    states[0] = v0
    v = v0
    for j in range(n):
        try:
            v = v + h_ode * rhs(v)
        except InnerSolveError as exc:
            raise InnerSolveError(
                f"{exc} at t={j * h_ode:g}", residual=exc.residual,
                t=j * h_ode)
        if not np.all(np.isfinite(v)):
            raise OperatorError(f"flow state non-finite at t={(j + 1) * h_ode:g}")
        states[j + 1] = v
    return np.arange(n + 1) * h_ode, states


def simulate_ppa(problem, lam, h_ode, T, x0, inner_tol=1e-10):
    """Explicit Euler on the proximal-point flow of ``B + C``.

    x_{j+1} = x_j + h_ode * (J_{lam*(B+C)}(x_j) - x_j).  ``A`` plays no role;
    with ``h_ode = 1`` one step is exactly a proximal-point iteration.
    """
    x0 = as_vector(x0, problem.dim, "x0")
    rs = _SumResolvent(problem, lam, inner_tol)
    times, states = _euler(lambda x: rs(x) - x, x0, h_ode, T)
    return FlowTrajectory(times=times, states=states, h_ode=h_ode, lam=lam,
                          inner_tol=inner_tol)


def simulate_dr_flow(problem, lam, h_ode, T, z0, inner_tol=1e-10):
    """Explicit Euler on the Douglas-Rachford flow of the full triple.

    Each step evaluates one resolvent of ``A`` and one ``J_{lam*(B+C)}``:
    z_{j+1} = z_j + h_ode * (J_{lam*(B+C)}(2 J_{lam*A}(z_j) - z_j)
                             - J_{lam*A}(z_j)).
    """
    z0 = as_vector(z0, problem.dim, "z0")
    problem.A.prepare(lam)
    rs = _SumResolvent(problem, lam, inner_tol)

    def rhs(z):
        x = problem.A.resolve(lam, z)
        return rs(2.0 * x - z) - x

    times, states = _euler(rhs, z0, h_ode, T)
    return FlowTrajectory(times=times, states=states, h_ode=h_ode, lam=lam,
                          inner_tol=inner_tol)


def discretization_gap(flow, trace, stride):
    """Distances between flow samples and discrete iterates.

    Iterate ``k`` is aligned with flow time ``t = k`` (the discretizations
    behind the methods take unit time steps).  Returns ``(ks, gaps)`` where
    ``gaps[i] = |x_flow(ks[i]) - x_{ks[i]}|``; purely diagnostic, no
    convergence claim attached.
    """
    if trace.xs is None:
        raise AlignmentError("trace lacks iterate history; "
                             "rerun with record_history=True")
    if stride < 1:
        raise AlignmentError("stride must be a positive integer")
    n_iters = len(trace.xs) - 1
    if stride > n_iters:
        raise AlignmentError(
            f"stride {stride} exceeds trace length {n_iters}")
    if flow.states.shape[1] != trace.xs[0].shape[0]:
        raise AlignmentError("flow and trace dimensions differ")
    t_max = flow.times[-1]
    ks, gaps = [], []
    for k in range(0, n_iters + 1, stride):
        if k > t_max + 1e-9:
            break
        j = int(round(k / flow.h_ode))
        ks.append(k)
        gaps.append(float(np.linalg.norm(flow.states[j] - trace.xs[k])))
    return np.array(ks, dtype=int), np.array(gaps)
