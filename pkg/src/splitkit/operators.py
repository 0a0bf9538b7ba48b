"""Maximal monotone operators with exact resolvents and forward oracles.

Every operator acts on a fixed-dimension real coordinate space with the
standard inner product.  An operator advertises two capabilities:

* ``has_forward``  -- pointwise evaluation ``F(v)`` (single-valued operators),
* ``has_resolvent`` -- evaluation of ``(I + lam*T)^{-1}(v)`` for ``lam > 0``.

Operators are immutable after construction and all oracle evaluations are
pure functions, so instances can be shared freely across concurrent runs.
"""

import numpy as np
from scipy.linalg import cho_factor, cho_solve, lu_factor, lu_solve


class OperatorError(Exception):
    """Base class for operator construction and evaluation errors."""


class CapabilityError(OperatorError):
    """An oracle was requested that the operator does not provide."""


class DimensionMismatchError(OperatorError):
    """Operands act on different dimensions."""


class NotMonotoneError(OperatorError):
    """Construction data violates monotonicity."""


class InvalidBoxError(OperatorError):
    """Box bounds with some lo[i] > hi[i]."""


class PowerIterationError(OperatorError):
    """Power iteration failed to converge; carries the last estimate."""

    def __init__(self, message, estimate):
        super().__init__(message)
        self.estimate = estimate


# Tolerances used by construction-time validation.
MONOTONE_EIG_TOL = 1e-10
BILINEAR_NORM_TOL = 1e-8


def as_vector(v, dim=None, name="v"):
    """Coerce to a finite 1-D float64 array, optionally checking length."""
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise DimensionMismatchError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise OperatorError(f"{name} contains non-finite entries")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionMismatchError(
            f"{name} has dim {arr.shape[0]}, expected {dim}")
    return arr


def soft_threshold(w, lam, v):
    """Componentwise shrinkage ``sign(v)*max(|v| - lam*w, 0)``.

    This is the resolvent of ``lam * w * subdifferential(l1-norm)``; it is
    nonexpansive and reduces to the identity when ``w == 0``.
    """
    if w < 0:
        raise OperatorError("l1 weight must be nonnegative")
    if lam <= 0:
        raise OperatorError("lam must be positive")
    v = as_vector(v)
    return np.sign(v) * np.maximum(np.abs(v) - lam * w, 0.0)


def box_project(lo, hi, v):
    """Clamp ``v`` componentwise to ``[lo, hi]``; idempotent."""
    v = as_vector(v)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), v.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=float), v.shape)
    if np.any(lo > hi):
        raise InvalidBoxError("box has lo[i] > hi[i]")
    return np.minimum(np.maximum(v, lo), hi)


def operator_norm(K, tol=1e-8, max_iters=10000):
    """Largest singular value of ``K`` by power iteration on ``K'K``.

    Returns an estimate within ``tol`` relative error.  The start vector is
    drawn from a fixed counter-based generator so the result is reproducible.

    Raises
    ------
    PowerIterationError
        If the residual criterion is not met within ``max_iters``; the
        exception carries the last estimate.
    """
    K = np.asarray(K, dtype=float)
    if K.ndim != 2:
        raise OperatorError("K must be a matrix")
    if tol <= 0:
        raise OperatorError("tol must be positive")
    if not np.any(K):
        raise OperatorError("K must be nonzero")
    n = K.shape[1]
    rng = np.random.Generator(np.random.Philox(0x5EED))
    v = rng.uniform(-1.0, 1.0, size=n)
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iters):
        w = K.T @ (K @ v)
        rho = float(v @ w)                      # Rayleigh quotient for K'K
        resid = np.linalg.norm(w - rho * v)
        nw = np.linalg.norm(w)
        if nw == 0.0:                           # v in the null space; restart
            v = rng.uniform(-1.0, 1.0, size=n)
            v /= np.linalg.norm(v)
            continue
        v = w / nw
        sigma = np.sqrt(rho) if rho > 0 else 0.0
        # |rho - sigma_max^2| <= resid, so the relative error of sigma is
        # about resid / (2 rho); stop well inside the requested tolerance.
        if rho > 0 and resid <= 0.5 * tol * rho:
            return sigma
    raise PowerIterationError(
        f"power iteration did not reach tol={tol} in {max_iters} iterations",
        estimate=sigma)


def lipschitz_check(op, trials, seed):
    """Max of ``|F(u)-F(v)| / |u-v|`` over seeded random pairs.

    A valid Lipschitz declaration ``L`` satisfies
    ``lipschitz_check(op, ...) <= L * (1 + 1e-10)``.
    """
    if not op.has_forward:
        raise CapabilityError("operator has no forward oracle")
    if trials < 1:
        raise OperatorError("trials must be >= 1")
    rng = np.random.Generator(np.random.Philox(seed))
    worst = 0.0
    for _ in range(trials):
        u = rng.uniform(-1.0, 1.0, size=op.dim)
        v = rng.uniform(-1.0, 1.0, size=op.dim)
        duv = np.linalg.norm(u - v)
        if duv == 0.0:
            continue
        ratio = np.linalg.norm(op.forward(u) - op.forward(v)) / duv
        worst = max(worst, ratio)
    return worst


def forward_eval(op, v):
    """Evaluate the single-valued operator at ``v``; deterministic."""
    return op.forward(as_vector(v, op.dim))


def resolvent(op, lam, v):
    """Evaluate ``(I + lam*op)^{-1}(v)`` for ``lam > 0``."""
    if lam <= 0:
        raise OperatorError("lam must be positive")
    return op.resolve(lam, as_vector(v, op.dim))


class MonotoneOperator:
    """Common base: capability flags plus forward/resolvent dispatch."""

    kind = "abstract"
    has_forward = False
    has_resolvent = False
    single_valued = False
    lipschitz = None

    def __init__(self, dim):
        if dim < 1:
            raise OperatorError("dim must be a positive integer")
        self.dim = int(dim)

    def forward(self, v):
        raise CapabilityError(f"{self.kind} operator has no forward oracle")

    def resolve(self, lam, v):
        raise CapabilityError(f"{self.kind} operator has no resolvent")

    def prepare(self, lam):
        """Populate any factorization cache for stepsize ``lam``."""

    def __repr__(self):
        return f"<{type(self).__name__} kind={self.kind} dim={self.dim}>"


class ZeroOperator(MonotoneOperator):
    """The zero map; its resolvent is the identity."""

    kind = "zero"
    has_forward = True
    has_resolvent = True
    single_valued = True
    lipschitz = 0.0

    def forward(self, v):
        return np.zeros(self.dim)

    def resolve(self, lam, v):
        return as_vector(v, self.dim)


class AffineOperator(MonotoneOperator):
    """``F(v) = M v + b`` with positive-semidefinite symmetric part.

    Monotonicity is validated eagerly at construction by an eigenvalue test
    on the symmetric part.  Resolvents solve ``(I + lam*M) u = v - lam*b``
    with a dense LU factorization cached per stepsize (``lam`` is constant
    within a run, so each factorization happens once).
    """

    kind = "affine"
    has_forward = True
    has_resolvent = True
    single_valued = True

    def __init__(self, M, b=None, validate=True):
        M = np.asarray(M, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise OperatorError("M must be square")
        super().__init__(M.shape[0])
        self.M = M
        self.b = np.zeros(self.dim) if b is None else as_vector(b, self.dim, "b")
        if validate:
            sym = 0.5 * (M + M.T)
            lo = np.linalg.eigvalsh(sym)[0]
            scale = max(1.0, float(np.linalg.norm(sym, 2))) if self.dim > 1 else 1.0
            if lo < -MONOTONE_EIG_TOL * scale:
                raise NotMonotoneError(
                    f"symmetric part has eigenvalue {lo:.3e} < 0")
        self.lipschitz = float(np.linalg.norm(M, 2)) if np.any(M) else 0.0
        self._lu = {}

    def forward(self, v):
        return self.M @ as_vector(v, self.dim) + self.b

    def prepare(self, lam):
        if lam not in self._lu:
            try:
                self._lu[lam] = lu_factor(np.eye(self.dim) + lam * self.M)
            except np.linalg.LinAlgError as exc:  # pragma: no cover
                raise NotMonotoneError(f"(I + lam*M) is singular: {exc}")

    def resolve(self, lam, v):
        self.prepare(lam)
        v = as_vector(v, self.dim)
        u = lu_solve(self._lu[lam], v - lam * self.b, check_finite=False)
        if not np.all(np.isfinite(u)):
            raise NotMonotoneError("affine resolvent produced non-finite values")
        return u


class ScaledL1(MonotoneOperator):
    """Subdifferential of ``w * l1-norm``; resolvent is soft thresholding."""

    kind = "l1_scaled"
    has_resolvent = True

    def __init__(self, dim, weight):
        if weight < 0:
            raise OperatorError("l1 weight must be nonnegative")
        super().__init__(dim)
        self.weight = float(weight)

    def resolve(self, lam, v):
        return soft_threshold(self.weight, lam, as_vector(v, self.dim))


class BoxNormalCone(MonotoneOperator):
    """Normal cone of ``[lo, hi]``; resolvent is the box projection."""

    kind = "box_normal_cone"
    has_resolvent = True

    def __init__(self, lo, hi):
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        if lo.shape != hi.shape:
            raise DimensionMismatchError("lo and hi must have equal shapes")
        if np.any(lo > hi):
            raise InvalidBoxError("box has lo[i] > hi[i]")
        super().__init__(lo.shape[0])
        self.lo = lo
        self.hi = hi

    def resolve(self, lam, v):
        return box_project(self.lo, self.hi, as_vector(v, self.dim))


class BilinearCoupling(MonotoneOperator):
    """Skew coupling of a bilinear saddle term on ``(x, y)`` blocks.

    For the pairing ``<K x - c, y>`` the operator is
    ``B(x, y) = (K' y, -(K x) + c)``, which is monotone (skew linear part)
    and Lipschitz with constant ``|K|`` computed by power iteration at
    construction.  Only ``K`` is stored; ``K'`` is applied on the fly.
    The resolvent is evaluated by block elimination with a Cholesky
    factorization of ``I + lam^2 K'K`` cached per stepsize.
    """

    kind = "bilinear_coupling"
    has_forward = True
    has_resolvent = True
    single_valued = True

    def __init__(self, K, c=None):
        K = np.asarray(K, dtype=float)
        if K.ndim != 2:
            raise OperatorError("K must be a matrix")
        self.m, self.n = K.shape
        super().__init__(self.m + self.n)
        self.K = K
        self.c = np.zeros(self.m) if c is None else as_vector(c, self.m, "c")
        self.lipschitz = (operator_norm(K, tol=BILINEAR_NORM_TOL)
                          if np.any(K) else 0.0)
        self._cho = {}

    def forward(self, v):
        v = as_vector(v, self.dim)
        x, y = v[:self.n], v[self.n:]
        return np.concatenate([self.K.T @ y, -(self.K @ x) + self.c])

    def prepare(self, lam):
        if lam not in self._cho:
            self._cho[lam] = cho_factor(
                np.eye(self.n) + (lam * lam) * (self.K.T @ self.K))

    def resolve(self, lam, v):
        # Solve (I + lam*M) u = v - lam*(0, c) with M = [[0, K'], [-K, 0]]:
        # eliminating the y block leaves (I + lam^2 K'K) u_x = w_x - lam*K' w_y.
        self.prepare(lam)
        v = as_vector(v, self.dim)
        wx, wy = v[:self.n], v[self.n:] - lam * self.c
        ux = cho_solve(self._cho[lam], wx - lam * (self.K.T @ wy),
                       check_finite=False)
        uy = wy + lam * (self.K @ ux)
        return np.concatenate([ux, uy])


class CustomOperator(MonotoneOperator):
    """Operator defined by user-supplied oracles.

    Parameters
    ----------
    dim : int
        Ambient dimension.
    forward : callable, optional
        Map ``v -> F(v)``; providing it declares the operator single-valued.
    resolvent : callable, optional
        Map ``(lam, v) -> (I + lam*T)^{-1}(v)``.
    lipschitz : float, optional
        Declared Lipschitz constant of ``forward``.
    """

    kind = "custom"

    def __init__(self, dim, forward=None, resolvent=None, lipschitz=None):
        super().__init__(dim)
        if forward is None and resolvent is None:
            raise OperatorError("custom operator needs at least one oracle")
        self._forward = forward
        self._resolvent = resolvent
        self.has_forward = forward is not None
        self.has_resolvent = resolvent is not None
        self.single_valued = forward is not None
        if lipschitz is not None and lipschitz < 0:
            raise OperatorError("lipschitz must be nonnegative")
        self.lipschitz = lipschitz

    def forward(self, v):
        if self._forward is None:
            raise CapabilityError("custom operator has no forward oracle")
        return as_vector(self._forward(as_vector(v, self.dim)), self.dim, "F(v)")

    def resolve(self, lam, v):
        if self._resolvent is None:
            raise CapabilityError("custom operator has no resolvent")
        return as_vector(self._resolvent(lam, as_vector(v, self.dim)),
                         self.dim, "J(v)")


class ProblemTriple:
    """The data of the inclusion ``0 in (A + B + C)(x)``.

    ``A`` and ``C`` must be resolvent-capable, ``B`` must be single-valued
    with a declared Lipschitz constant.  ``x_star`` optionally carries a
    known solution and ``z_star`` a matching shadow point for the stepsize
    ``lam_ref`` (i.e. ``x_star = resolvent(A, lam_ref, z_star)``).
    """

    def __init__(self, A, B, C, x_star=None, z_star=None, lam_ref=None):
        if not (A.dim == B.dim == C.dim):
            raise DimensionMismatchError(
                f"operator dims differ: {A.dim}, {B.dim}, {C.dim}")
        if not A.has_resolvent:
            raise CapabilityError("A must be resolvent-capable")
        if not C.has_resolvent:
            raise CapabilityError("C must be resolvent-capable")
        if not B.has_forward:
            raise CapabilityError("B must have a forward oracle")
        if B.lipschitz is None:
            raise OperatorError("B must declare a Lipschitz constant")
        self.A, self.B, self.C = A, B, C
        self.dim = A.dim
        self.x_star = None if x_star is None else as_vector(x_star, self.dim)
        self.z_star = None if z_star is None else as_vector(z_star, self.dim)
        self.lam_ref = lam_ref
        if self.x_star is not None and all(
                op.has_forward for op in (A, B, C)):
            r = A.forward(self.x_star) + B.forward(self.x_star) \
                + C.forward(self.x_star)
            bound = 1e-8 * (1.0 + np.linalg.norm(self.x_star))
            if np.linalg.norm(r) > bound:
                raise OperatorError(
                    f"x_star residual {np.linalg.norm(r):.3e} exceeds {bound:.3e}")
        if self.z_star is not None:
            if lam_ref is None or lam_ref <= 0:
                raise OperatorError("z_star requires a positive lam_ref")
            if self.x_star is not None:
                xs = A.resolve(lam_ref, self.z_star)
                if np.linalg.norm(xs - self.x_star) > 1e-8 * (
                        1.0 + np.linalg.norm(self.x_star)):
                    raise OperatorError("z_star inconsistent with x_star")

    def prepare(self, *lams):
        """Prefactor the resolvent caches of A and C for the given stepsizes."""
        for lam in lams:
            self.A.prepare(lam)
            self.C.prepare(lam)

    def __repr__(self):
        return (f"<ProblemTriple dim={self.dim} A={self.A.kind} "
                f"B={self.B.kind} C={self.C.kind}>")
