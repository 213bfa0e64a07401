"""Small dense linear algebra, ODE stepping, differencing and seeded RNG streams.

Everything here works on tiny problems (a handful of unknowns), so the
algorithms favour being exactly checkable over asymptotic speed.
"""

import zlib

import numpy as np

PIVOT_TOL = 1e-12
SYMMETRY_TOL = 1e-12


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when elimination meets a pivot below tolerance."""


class DivergenceError(ArithmeticError):
    """Raised when an integrator stage produces non-finite values."""


def lu_solve(A, b):
    """Solve A x = b by Gaussian elimination with partial pivoting.

    Inputs:
    Square matrix, A: numpy array (n, n)
    Right hand side, b: numpy array (n,)

    Outputs:
    Solution, x: numpy array (n,)
    """
    A = np.array(A, dtype=float)
    x = np.array(b, dtype=float).reshape(-1)
    n = A.shape[0]
    if A.ndim != 2 or A.shape[1] != n or x.shape[0] != n:
        raise ValueError(f"shape mismatch: A {A.shape}, b {x.shape}")

    for col in range(n):
        piv = col + int(np.argmax(np.abs(A[col:, col])))
        if abs(A[piv, col]) < PIVOT_TOL:
            raise SingularMatrixError(f"pivot {A[piv, col]:.3e} in column {col}")
        if piv != col:
            A[[col, piv]] = A[[piv, col]]
            x[[col, piv]] = x[[piv, col]]
        factors = A[col + 1:, col] / A[col, col]
        A[col + 1:, col:] -= np.outer(factors, A[col, col:])
        x[col + 1:] -= factors * x[col]

    for row in range(n - 1, -1, -1):
        x[row] = (x[row] - A[row, row + 1:] @ x[row + 1:]) / A[row, row]
    return x


def solve_ctle(A_cl, Q):
    """Solve the continuous-time Lyapunov equation A^T P + P A = -Q.

    The equation is vectorized into (I kron A^T + A^T kron I) vec(P) = -vec(Q)
    and solved with lu_solve; the result is symmetrized. A singular system
    means A_cl is not Hurwitz (or has eigenvalue pairs summing to zero).
    """
    A_cl = np.asarray(A_cl, dtype=float)
    Q = np.asarray(Q, dtype=float)
    n = A_cl.shape[0]
    I = np.identity(n)
    # column-major vec: vec(A^T P) = (I kron A^T) vec(P), vec(P A) = (A^T kron I) vec(P)
    L = np.kron(I, A_cl.T) + np.kron(A_cl.T, I)
    vec_P = lu_solve(L, -Q.reshape(-1, order="F"))
    P = vec_P.reshape((n, n), order="F")
    return (P + P.T) / 2


def jacobi_eigenvalues(S, tol=1e-12, max_sweeps=100):
    """All eigenvalues of a symmetric matrix by cyclic Jacobi rotations."""
    S = np.array(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {S.shape}")
    if np.max(np.abs(S - S.T), initial=0.0) > SYMMETRY_TOL:
        raise ValueError("matrix is not symmetric")
    n = S.shape[0]
    tol = tol * max(1.0, float(np.linalg.norm(S)))

    def off(M):
        return np.sqrt(np.sum((M - np.diag(np.diag(M))) ** 2))

    for _ in range(max_sweeps):
        if off(S) <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if S[p, q] == 0.0:
                    continue
                theta = (S[q, q] - S[p, p]) / (2 * S[p, q])
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 1 / (2 * theta)  # theta^2 would overflow
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta ** 2 + 1))
                c = 1 / np.sqrt(t ** 2 + 1)
                s = t * c
                J = np.identity(n)
                J[p, p] = J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                S = J.T @ S @ J
                S[p, q] = S[q, p] = 0.0
    else:
        raise RuntimeError("Jacobi iteration did not converge")
    return np.sort(np.diag(S))


def sym_eig_bounds(S):
    """Return (lambda_min, lambda_max) of a symmetric matrix."""
    eigs = jacobi_eigenvalues(S)
    return float(eigs[0]), float(eigs[-1])


def is_positive_definite(S):
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return False
    return True


def rk4_step(f, x, t, h):
    """One classical Runge-Kutta step of x' = f(x, t)."""
    if not h > 0:
        raise ValueError(f"step must be positive, got {h}")
    k1 = f(x, t)
    k2 = f(x + h / 2 * k1, t + h / 2)
    k3 = f(x + h / 2 * k2, t + h / 2)
    k4 = f(x + h * k3, t + h)
    for k in (k1, k2, k3, k4):
        if not np.all(np.isfinite(k)):
            raise DivergenceError(f"non-finite stage value at t={t:.6g}")
    return x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def central_difference(samples, dt):
    """Differentiate a uniformly sampled series.

    Interior points use the centred quotient, the two endpoints one-sided
    first-order quotients. Output has the same length as the input.
    """
    v = np.asarray(samples, dtype=float)
    if v.ndim != 1 or len(v) < 3:
        raise ValueError("need at least 3 samples")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    out = np.empty_like(v)
    out[1:-1] = (v[2:] - v[:-2]) / (2 * dt)
    out[0] = (v[1] - v[0]) / dt
    out[-1] = (v[-1] - v[-2]) / dt
    return out


class RngStream:
    """Seeded random stream that can be split into independent labeled children.

    Backed by numpy's counter-based Philox bit generator. A child stream is a
    pure function of the parent seed and the label path, so the order in which
    children are created does not matter.
    """

    def __init__(self, seed, _path=()):
        seed = int(seed)
        if not 0 <= seed < 2 ** 64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.path = tuple(_path)
        seq = np.random.SeedSequence(entropy=seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def split(self, label):
        key = zlib.crc32(str(label).encode("utf-8"))
        return RngStream(self.seed, self.path + (key,))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"
