"""Dense linear algebra and finite-difference helpers shared by the solvers."""

import numpy as np

PIVOT_TOL = 1e-12


class SingularMatrix(ArithmeticError):
    pass


class DimensionMismatch(ValueError):
    pass


class NonFiniteEvaluation(ArithmeticError):
    pass


class LUFactorization:
    """LU factorization with partial (row) pivoting, ``P A = L U``.

    ``L`` is unit lower triangular and stored together with ``U`` in one
    array. The factorization is reusable for both ``A x = b`` and
    ``A^T y = c`` solves, which is what the adjoint sensitivities need.
    """

    def __init__(self, a):
        a = np.array(a, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatch(f"expected a square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("matrix has non-finite entries")
        n = a.shape[0]
        perm = np.arange(n)
        for k in range(n):
            p = k + int(np.argmax(np.abs(a[k:, k])))
            if abs(a[p, k]) < PIVOT_TOL:
                raise SingularMatrix(f"pivot {abs(a[p, k]):.3e} below {PIVOT_TOL:g} at column {k}")
            if p != k:
                a[[k, p]] = a[[p, k]]
                perm[[k, p]] = perm[[p, k]]
            a[k + 1:, k] /= a[k, k]
            a[k + 1:, k + 1:] -= np.outer(a[k + 1:, k], a[k, k + 1:])
        self._lu = a
        self.perm = perm
        self.n = n

    @property
    def L(self):
        return np.tril(self._lu, -1) + np.eye(self.n)

    @property
    def U(self):
        return np.triu(self._lu)

    @property
    def P(self):
        return np.eye(self.n)[self.perm]

    def _check(self, b):
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise DimensionMismatch(f"matrix is {self.n}x{self.n}, right-hand side has {b.shape[0]} rows")
        return b

    def solve(self, b):
        b = self._check(b)
        y = b[self.perm].copy()
        lu = self._lu
        for i in range(1, self.n):
            y[i] -= lu[i, :i] @ y[:i]
        for i in range(self.n - 1, -1, -1):
            y[i] = (y[i] - lu[i, i + 1:] @ y[i + 1:]) / lu[i, i]
        return y

    def solve_transpose(self, c):
        """Solve ``A^T y = c`` using ``A^T = U^T L^T P``."""
        c = self._check(c)
        lu = self._lu
        w = c.copy()
        for i in range(self.n):
            w[i] = (w[i] - lu[:i, i] @ w[:i]) / lu[i, i]
        for i in range(self.n - 2, -1, -1):
            w[i] -= lu[i + 1:, i] @ w[i + 1:]
        y = np.empty_like(w)
        y[self.perm] = w
        return y


def lu_factor(a):
    return LUFactorization(a)


def lu_solve(a, b):
    """Solve ``a x = b`` by partial-pivoting LU."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] != b.shape[0]:
        raise DimensionMismatch(f"cannot solve {a.shape} system with right-hand side {b.shape}")
    return LUFactorization(a).solve(b)


def _fd_steps(x, h):
    return h * np.maximum(1.0, np.abs(x))


def fd_jacobian(f, x, h=1e-5):
    """Central-difference Jacobian of a vector function.

    The step for coordinate ``j`` is ``h * max(1, |x_j|)``.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    steps = _fd_steps(x, h)
    cols = []
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[j] += steps[j]
        xm[j] -= steps[j]
        fp = np.atleast_1d(np.asarray(f(xp), dtype=float))
        fm = np.atleast_1d(np.asarray(f(xm), dtype=float))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise NonFiniteEvaluation(f"non-finite value while perturbing coordinate {j}")
        cols.append((fp - fm) / (2.0 * steps[j]))
    if not cols:
        f0 = np.atleast_1d(np.asarray(f(x), dtype=float))
        return np.zeros((f0.size, 0))
    return np.column_stack(cols)


def fd_hessian(f, x, h=1e-4):
    """Second differences of a scalar function.

    Diagonal entries use ``(f(x+h) - 2 f(x) + f(x-h)) / h^2``; off-diagonal
    entries use the four-point mixed difference.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    steps = _fd_steps(x, h)

    def ev(dx):
        v = float(f(x + dx))
        if not np.isfinite(v):
            raise NonFiniteEvaluation("non-finite value in second difference")
        return v

    f0 = ev(np.zeros(n))
    out = np.zeros((n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = steps[i]
        out[i, i] = (ev(ei) - 2.0 * f0 + ev(-ei)) / steps[i] ** 2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = steps[j]
            v = (ev(ei + ej) - ev(ei - ej) - ev(ej - ei) + ev(-ei - ej)) / (4.0 * steps[i] * steps[j])
            out[i, j] = out[j, i] = v
    return out


def rel_error(a, b):
    """Max-norm error of ``a`` against reference ``b``, relative to ``max(1, |b|_inf)``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))
