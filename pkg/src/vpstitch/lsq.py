"""Deterministic sparse linear least squares with equality constraints.

Problems are assembled row by row as (index, coefficient) pairs. The
solve goes through the normal equations; equality constraints enter a
KKT system with Lagrange multipliers. One fixed factorization path
keeps results bit-stable across runs.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SingularSystem


class SparseLsqProblem:
    """min ||A x - b||^2 subject to C x = d, assembled incrementally."""

    def __init__(self, n_unknowns: int):
        if n_unknowns <= 0:
            raise ValueError("n_unknowns must be positive")
        self.n = n_unknowns
        self._rows: list[int] = []
        self._cols: list[int] = []
        self._vals: list[float] = []
        self._rhs: list[float] = []
        self._crows: list[int] = []
        self._ccols: list[int] = []
        self._cvals: list[float] = []
        self._crhs: list[float] = []

    @property
    def n_rows(self) -> int:
        return len(self._rhs)

    @property
    def n_constraints(self) -> int:
        return len(self._crhs)

    def add_row(self, coeffs, rhs: float, weight: float = 1.0) -> None:
        """Add a residual row sqrt(weight) * (sum c_k x_k - rhs)."""
        if weight < 0:
            raise ValueError("weight must be non-negative")
        w = float(np.sqrt(weight))
        r = len(self._rhs)
        for idx, c in coeffs:
            if not 0 <= idx < self.n:
                raise IndexError("unknown index out of range")
            self._rows.append(r)
            self._cols.append(int(idx))
            self._vals.append(w * float(c))
        self._rhs.append(w * float(rhs))

    def add_constraint(self, coeffs, rhs: float) -> None:
        """Add an equality constraint sum c_k x_k = rhs."""
        r = len(self._crhs)
        for idx, c in coeffs:
            if not 0 <= idx < self.n:
                raise IndexError("unknown index out of range")
            self._crows.append(r)
            self._ccols.append(int(idx))
            self._cvals.append(float(c))
        self._crhs.append(float(rhs))

    def matrices(self):
        a = sp.csr_matrix(
            (self._vals, (self._rows, self._cols)),
            shape=(len(self._rhs), self.n),
        )
        b = np.array(self._rhs, dtype=float)
        c = sp.csr_matrix(
            (self._cvals, (self._crows, self._ccols)),
            shape=(len(self._crhs), self.n),
        )
        d = np.array(self._crhs, dtype=float)
        return a, b, c, d

    def energy(self, x: np.ndarray) -> float:
        """Weighted squared residual ||A x - b||^2 at a candidate point."""
        a, b, _, _ = self.matrices()
        r = a @ np.asarray(x, dtype=float) - b
        return float(r @ r)


def solve_lsq(problem: SparseLsqProblem) -> np.ndarray:
    """Solve the assembled problem; raises SingularSystem on rank deficiency."""
    a, b, c, d = problem.matrices()
    n, k = problem.n, problem.n_constraints
    ata = (a.T @ a).tocsc()
    atb = a.T @ b
    if k == 0:
        kkt = ata
        rhs = atb
    else:
        ct = c.T.tocsc()
        zero = sp.csc_matrix((k, k))
        kkt = sp.bmat([[ata, ct], [c, zero]], format="csc")
        rhs = np.concatenate([atb, d])
    try:
        lu = spla.splu(kkt, permc_spec="COLAMD")
        x = lu.solve(rhs)
    except RuntimeError as exc:
        raise SingularSystem(str(exc)) from exc
    if not np.all(np.isfinite(x)):
        raise SingularSystem("factorization produced non-finite values")
    residual = kkt @ x - rhs
    scale = max(1.0, float(np.abs(rhs).max(initial=0.0)), float(np.abs(x).max()))
    if float(np.abs(residual).max(initial=0.0)) > 1e-6 * scale:
        raise SingularSystem("KKT system is rank-deficient beyond tolerance")
    return np.asarray(x[:n], dtype=float)


def kkt_residual(problem: SparseLsqProblem, x: np.ndarray) -> float:
    """Max-norm KKT residual of a candidate solution (optimality check).

    For the unconstrained part this is ||A^T(Ax - b)|| restricted to the
    feasible manifold; with constraints the gradient need only vanish on
    the null space of C, so the projected gradient and the constraint
    violation are both measured.
    """
    a, b, c, d = problem.matrices()
    grad = a.T @ (a @ x - b)
    if problem.n_constraints == 0:
        return float(np.abs(grad).max(initial=0.0))
    cd = c.toarray()
    viol = float(np.abs(cd @ x - d).max(initial=0.0))
    # project the gradient onto null(C)
    q, _ = np.linalg.qr(cd.T)
    proj = grad - q @ (q.T @ grad)
    return max(viol, float(np.abs(proj).max(initial=0.0)))
