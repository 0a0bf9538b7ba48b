"""Reproducible test instances with ground truth where computable.

Randomness comes from a counter-based generator (Philox) keyed on the
instance seed, so equal parameters give bit-identical instances on every
platform.  Affine instances carry an exact solution from a direct linear
solve; saddle instances are built around a strictly complementary
primal-dual pair, but solvers are validated against cross-method agreement
and the fixed-point residual, not against stored coordinates.
"""

import io
from dataclasses import dataclass

import numpy as np

from .operators import (AffineOperator, BilinearCoupling, CustomOperator,
                        OperatorError, ProblemTriple, box_project,
                        operator_norm, soft_threshold)

#: Skew fraction mixed into the monotone parts M_A and M_C.
SMALL_SKEW = 0.1


class SingularProblemError(OperatorError):
    """The summed affine system is numerically singular."""


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


def _psd_part(rng, dim):
    """Symmetric PSD matrix: symmetrized uniform entries, negative spectrum clipped."""
    G = rng.uniform(-1.0, 1.0, size=(dim, dim))
    S = 0.5 * (G + G.T)
    w, V = np.linalg.eigh(S)
    return (V * np.maximum(w, 0.0)) @ V.T


def _skew_part(rng, dim):
    G = rng.uniform(-1.0, 1.0, size=(dim, dim))
    return 0.5 * (G - G.T)


@dataclass
class AffineInstance:
    """A triple of monotone affine maps with a directly solvable zero."""

    M_A: np.ndarray
    M_B: np.ndarray
    M_C: np.ndarray
    b_A: np.ndarray
    b_B: np.ndarray
    b_C: np.ndarray
    L: float
    x_star: np.ndarray
    seed: int
    dim: int
    skew_fraction: float
    shift: float = 0.0

    def triple(self):
        """Assemble the ProblemTriple (operators validated at construction)."""
        return ProblemTriple(
            A=AffineOperator(self.M_A, self.b_A),
            B=AffineOperator(self.M_B, self.b_B),
            C=AffineOperator(self.M_C, self.b_C),
            x_star=self.x_star)


def solve_affine_direct(inst):
    """Ground-truth zero of the summed affine map by dense solve.

    Solves ``(M_A + M_B + M_C) x = -(b_A + b_B + b_C)`` with one step of
    iterative refinement, and checks the residual against
    ``1e-12 * (1 + |b|)``.

    Raises
    ------
    SingularProblemError
        If the solve fails or the residual check cannot be met.
    """
    M = inst.M_A + inst.M_B + inst.M_C
    b = inst.b_A + inst.b_B + inst.b_C
    try:
        x = np.linalg.solve(M, -b)
        x = x + np.linalg.solve(M, -(b + M @ x))   # one refinement step
    except np.linalg.LinAlgError as exc:
        raise SingularProblemError(f"summed system is singular: {exc}")
    resid = np.linalg.norm(M @ x + b)
    bound = 1e-12 * (1.0 + np.linalg.norm(b))
    if not np.isfinite(resid) or resid > bound:
        raise SingularProblemError(
            f"direct solve residual {resid:.3e} exceeds {bound:.3e}")
    return x


def make_affine_instance(dim, seed, skew_fraction):
    """Random monotone affine instance, deterministic in ``seed``.

    ``M_B = skew_fraction * S + (1 - skew_fraction) * P`` with ``S`` random
    skew and ``P`` random PSD; ``M_A`` and ``M_C`` use the same mix at skew
    fraction :data:`SMALL_SKEW`.  Large ``skew_fraction`` makes ``B``
    non-cocoercive, the regime the reflected methods are built for.  If the
    summed system is singular, a small diagonal shift is added to ``M_A``
    (recorded in the instance) and the solve is retried.
    """
    if dim < 1:
        raise OperatorError("dim must be a positive integer")
    if not 0.0 <= skew_fraction <= 1.0:
        raise OperatorError("skew_fraction must lie in [0, 1]")
    rng = _rng(seed)

    def mix(frac):
        skew = _skew_part(rng, dim)
        psd = _psd_part(rng, dim)
        return frac * skew + (1.0 - frac) * psd

    M_A = mix(SMALL_SKEW)
    M_B = mix(skew_fraction)
    M_C = mix(SMALL_SKEW)
    b_A = rng.uniform(-1.0, 1.0, size=dim)
    b_B = rng.uniform(-1.0, 1.0, size=dim)
    b_C = rng.uniform(-1.0, 1.0, size=dim)

    inst = AffineInstance(
        M_A=M_A, M_B=M_B, M_C=M_C, b_A=b_A, b_B=b_B, b_C=b_C,
        L=float(np.linalg.norm(M_B, 2)), x_star=np.zeros(dim),
        seed=seed, dim=dim, skew_fraction=skew_fraction)

    shift = 0.0
    for _ in range(60):
        try:
            inst.x_star = solve_affine_direct(inst)
            inst.shift = shift
            return inst
        except SingularProblemError:
            shift = 1e-8 if shift == 0.0 else 2.0 * shift
            inst.M_A = M_A + shift * np.eye(dim)
    raise SingularProblemError(
        f"could not regularize instance (dim={dim}, seed={seed})")


@dataclass
class SaddleInstance:
    """Box-constrained l1 saddle problem with bilinear coupling.

    Encodes  min_x  alpha*|x|_1 + i_{[-R,R]^n}(x) + max_{|y|_inf<=1} <Kx - c, y>
    split as A = (alpha*l1 subdifferential, normal cone of [-1,1]^m),
    B = bilinear coupling of (K, c), C = (normal cone of [-R,R]^n, 0).
    """

    K: np.ndarray
    c: np.ndarray
    alpha: float
    radius: float
    m: int
    n: int
    seed: int
    L: float

    def triple(self):
        n, m, alpha, R = self.n, self.m, self.alpha, self.radius

        def resolve_A(lam, v):
            return np.concatenate([
                soft_threshold(alpha, lam, v[:n]) if alpha > 0 else v[:n],
                box_project(-1.0, 1.0, v[n:])])

        def resolve_C(lam, v):
            return np.concatenate([box_project(-R, R, v[:n]), v[n:]])

        A = CustomOperator(n + m, resolvent=resolve_A)
        C = CustomOperator(n + m, resolvent=resolve_C)
        B = BilinearCoupling(self.K, self.c)
        return ProblemTriple(A=A, B=B, C=C)


def make_saddle_instance(m, n, seed, alpha, radius):
    """Saddle instance whose optimum is strictly complementary.

    ``K`` gets singular values on ``[L/2, L] = [0.5, 1]`` (well conditioned,
    so the bilinear rotation modes are damped at a usable rate), and ``c``
    is chosen so that a planted pair is optimal: every dual coordinate sits
    strictly at a corner of its box and every nonzero primal coordinate at
    ``+-radius`` with a sign margin.  The instance itself stores only
    ``(K, c, alpha, radius)``; no solution coordinates are kept, ground
    truth is established by cross-method agreement.
    """
    if m < 1 or n < 1:
        raise OperatorError("m and n must be positive integers")
    if alpha < 0:
        raise OperatorError("alpha must be nonnegative")
    if radius <= 0:
        raise OperatorError("radius must be positive")
    rng = _rng(seed)
    r = min(m, n)
    U, _ = np.linalg.qr(rng.uniform(-1.0, 1.0, size=(m, r)))
    V, _ = np.linalg.qr(rng.uniform(-1.0, 1.0, size=(n, r)))
    K = (U * np.linspace(0.5, 1.0, r)) @ V.T

    y_plant = np.where(rng.uniform(-1.0, 1.0, size=m) >= 0.0, 1.0, -1.0)
    g = K.T @ y_plant
    x_plant = np.where(np.abs(g) > alpha, -np.sign(g) * radius, 0.0)
    c = K @ x_plant - (0.5 * radius) * y_plant

    return SaddleInstance(
        K=K, c=c, alpha=float(alpha), radius=float(radius),
        m=m, n=n, seed=seed, L=operator_norm(K, tol=1e-8))


# ---------------------------------------------------------------------------
# Serialization: plain text, matrices row-major after a metadata header.
# Floats use 17 significant digits, which round-trips IEEE doubles exactly.

_FMT = "%.17g"


def _write_matrix(out, name, M):
    out.write(f"matrix {name} {M.shape[0]} {M.shape[1]}\n")
    for row in M:
        out.write(" ".join(_FMT % v for v in row) + "\n")


def _write_vector(out, name, v):
    out.write(f"vector {name} {v.shape[0]}\n")
    out.write(" ".join(_FMT % x for x in v) + "\n")


def save_instance(inst, path):
    """Write an instance to ``path`` in the replayable text format."""
    out = io.StringIO()
    out.write("splitkit-instance v1\n")
    if isinstance(inst, AffineInstance):
        out.write("kind affine\n")
        out.write(f"dim {inst.dim}\n")
        out.write(f"seed {inst.seed}\n")
        out.write(f"skew_fraction {_FMT % inst.skew_fraction}\n")
        out.write(f"shift {_FMT % inst.shift}\n")
        for name in ("M_A", "M_B", "M_C"):
            _write_matrix(out, name, getattr(inst, name))
        for name in ("b_A", "b_B", "b_C", "x_star"):
            _write_vector(out, name, getattr(inst, name))
    elif isinstance(inst, SaddleInstance):
        out.write("kind saddle\n")
        out.write(f"m {inst.m}\n")
        out.write(f"n {inst.n}\n")
        out.write(f"seed {inst.seed}\n")
        out.write(f"alpha {_FMT % inst.alpha}\n")
        out.write(f"radius {_FMT % inst.radius}\n")
        _write_matrix(out, "K", inst.K)
        _write_vector(out, "c", inst.c)
    else:
        raise OperatorError(f"cannot serialize {type(inst).__name__}")
    out.write("end\n")
    with open(path, "w", newline="\n") as fh:
        fh.write(out.getvalue())


class _Reader:
    def __init__(self, lines):
        self.lines = lines
        self.pos = 0

    def next(self):
        if self.pos >= len(self.lines):
            raise OperatorError("unexpected end of instance file")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def scalar(self, key, conv=float):
        parts = self.next().split()
        if len(parts) != 2 or parts[0] != key:
            raise OperatorError(f"expected '{key} <value>' at line {self.pos}")
        return conv(parts[1])

    def matrix(self, name):
        head = self.next().split()
        if head[:2] != ["matrix", name]:
            raise OperatorError(f"expected matrix {name} at line {self.pos}")
        rows, cols = int(head[2]), int(head[3])
        M = np.empty((rows, cols))
        for i in range(rows):
            row = np.array(self.next().split(), dtype=float)
            if row.shape[0] != cols:
                raise OperatorError(f"bad row length in matrix {name}")
            M[i] = row
        return M

    def vector(self, name):
        head = self.next().split()
        if head[:2] != ["vector", name]:
            raise OperatorError(f"expected vector {name} at line {self.pos}")
        v = np.array(self.next().split(), dtype=float)
        if v.shape[0] != int(head[2]):
            raise OperatorError(f"bad length in vector {name}")
        return v


def load_instance(path):
    """Read back an instance written by :func:`save_instance`."""
    with open(path) as fh:
        rd = _Reader(fh.read().splitlines())
    if rd.next() != "splitkit-instance v1":
        raise OperatorError(f"{path} is not a splitkit instance file")
    kind = rd.next().split()
    if kind[0] != "kind":
        raise OperatorError("missing kind line")
    if kind[1] == "affine":
        dim = rd.scalar("dim", int)
        seed = rd.scalar("seed", int)
        skew = rd.scalar("skew_fraction")
        shift = rd.scalar("shift")
        M_A = rd.matrix("M_A")
        M_B = rd.matrix("M_B")
        M_C = rd.matrix("M_C")
        b_A = rd.vector("b_A")
        b_B = rd.vector("b_B")
        b_C = rd.vector("b_C")
        x_star = rd.vector("x_star")
        return AffineInstance(
            M_A=M_A, M_B=M_B, M_C=M_C, b_A=b_A, b_B=b_B, b_C=b_C,
            L=float(np.linalg.norm(M_B, 2)), x_star=x_star, seed=seed,
            dim=dim, skew_fraction=skew, shift=shift)
    if kind[1] == "saddle":
        m = rd.scalar("m", int)
        n = rd.scalar("n", int)
        seed = rd.scalar("seed", int)
        alpha = rd.scalar("alpha")
        radius = rd.scalar("radius")
        K = rd.matrix("K")
        c = rd.vector("c")
        return SaddleInstance(K=K, c=c, alpha=alpha, radius=radius,
                              m=m, n=n, seed=seed,
                              L=operator_norm(K, tol=1e-8))
    raise OperatorError(f"unknown instance kind {kind[1]!r}")
