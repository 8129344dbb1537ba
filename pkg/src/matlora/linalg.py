"""Dense linear algebra kernels for small float64 matrices.

Everything here is sized for matrices up to a few hundred rows, favors
robustness over asymptotics, and is written so the exponential's computation
graph can be differentiated exactly (see `expm_graph` / `expm_vjp`, used by
the model's reverse-mode gradients).

Matrices are plain 2-D float64 numpy arrays. Public operations validate
shapes and reject non-finite entries on the way in and out.
"""

from __future__ import annotations

import math

import numpy as np

from matlora.errors import DimensionError

# Fixed truncation order of the Taylor series on the scaled matrix. With the
# scaled 1-norm <= 1/2 the remainder is ~2e-20, far below the 1e-10 contract.
_EXPM_TERMS = 16

_JACOBI_SWEEPS = 60
_JACOBI_TOL = 1e-14


def check_matrix(m, name: str = "matrix") -> np.ndarray:
    """Coerce to a 2-D float64 array; reject empty or non-finite input."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got ndim={a.ndim}")
    if a.shape[0] == 0 or a.shape[1] == 0:
        raise DimensionError(f"{name} must be non-empty, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DimensionError(f"{name} contains non-finite entries")
    return a


def _check_finite_out(a: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise DimensionError(f"{op} produced non-finite entries")
    return a


def matmul(a, b) -> np.ndarray:
    a = check_matrix(a, "a")
    b = check_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions differ ({a.shape} @ {b.shape})"
        )
    return _check_finite_out(a @ b, "matmul")


def frobenius_norm(m) -> float:
    m = check_matrix(m)
    return float(np.sqrt(np.sum(m * m)))


def frobenius_inner(a, b) -> float:
    """trace(a^T b), the Frobenius inner product."""
    a = check_matrix(a, "a")
    b = check_matrix(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"frobenius_inner: shapes differ ({a.shape} vs {b.shape})")
    return float(np.sum(a * b))


def qr_thin(m) -> tuple[np.ndarray, np.ndarray]:
    """Thin Householder QR with nonnegative R diagonal.

    Q is (rows x cols) with orthonormal columns, R is (cols x cols) upper
    triangular, Q @ R == m up to rounding. Columns that are linearly
    dependent on earlier ones leave a (near-)zero R diagonal entry.
    """
    m = check_matrix(m)
    rows, cols = m.shape
    if rows < cols:
        raise DimensionError(f"qr_thin needs rows >= cols, got {m.shape}")
    a = m.copy()
    reflectors: list[tuple[int, np.ndarray]] = []
    for j in range(cols):
        x = a[j:, j]
        norm_x = np.linalg.norm(x)
        if norm_x <= 1e-300:
            continue
        v = x.copy()
        v[0] += math.copysign(norm_x, x[0]) if x[0] != 0 else norm_x
        v /= np.linalg.norm(v)
        a[j:, j:] -= 2.0 * np.outer(v, v @ a[j:, j:])
        reflectors.append((j, v))
    r = np.triu(a[:cols, :cols])
    q = np.zeros((rows, cols))
    q[:cols, :cols] = np.eye(cols)
    for j, v in reversed(reflectors):
        q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])
    # Flip signs so the R diagonal is nonnegative.
    for j in range(cols):
        if r[j, j] < 0:
            r[j, :] = -r[j, :]
            q[:, j] = -q[:, j]
    return _check_finite_out(q, "qr_thin"), r


def _pivoted_orthonormal_basis(m: np.ndarray, tol_abs: float) -> np.ndarray:
    """Orthonormal basis of col(m) via greedy column-pivoted Householder QR.

    Returns a (rows x rank) matrix whose columns span the columns of m whose
    pivoted R diagonal exceeds tol_abs. Pivoting is what makes the diagonal
    criterion rank-revealing; unpivoted QR can hide a nonzero column space
    behind a zero leading diagonal entry.
    """
    rows, cols = m.shape
    a = m.copy()
    perm = list(range(cols))
    reflectors: list[tuple[int, np.ndarray]] = []
    rank = 0
    for j in range(min(rows, cols)):
        col_norms = np.sqrt(np.sum(a[j:, j:] ** 2, axis=0))
        p = int(np.argmax(col_norms))
        if col_norms[p] <= tol_abs:
            break
        if p != 0:
            a[:, [j, j + p]] = a[:, [j + p, j]]
            perm[j], perm[j + p] = perm[j + p], perm[j]
        x = a[j:, j]
        norm_x = np.linalg.norm(x)
        v = x.copy()
        v[0] += math.copysign(norm_x, x[0]) if x[0] != 0 else norm_x
        v /= np.linalg.norm(v)
        a[j:, j:] -= 2.0 * np.outer(v, v @ a[j:, j:])
        reflectors.append((j, v))
        rank += 1
    q = np.zeros((rows, rank))
    q[:rank, :rank] = np.eye(rank)
    for j, v in reversed(reflectors):
        q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])
    return q


def column_projector(m, rank_tol: float = 1e-10) -> np.ndarray:
    """Orthogonal projector onto col(m).

    rank_tol is relative to the Frobenius norm of m; columns whose pivoted R
    diagonal falls below rank_tol * ||m||_F are treated as dependent. The
    all-zero matrix maps to the zero projector.
    """
    m = check_matrix(m)
    scale = frobenius_norm(m)
    if scale == 0.0:
        return np.zeros((m.shape[0], m.shape[0]))
    q = _pivoted_orthonormal_basis(m, rank_tol * scale)
    if q.shape[1] == 0:
        return np.zeros((m.shape[0], m.shape[0]))
    p = q @ q.T
    return _check_finite_out(0.5 * (p + p.T), "column_projector")


def expm_graph(m) -> tuple[np.ndarray, tuple]:
    """Matrix exponential, returning the result and its computation cache.

    Scaling and squaring: s = max(0, ceil(log2(||m||_1)) + 1) halvings bring
    the 1-norm below 1/2, a fixed-order truncated Taylor series evaluates
    exp on the scaled matrix, then s squarings undo the scaling. The cache
    holds every intermediate needed by `expm_vjp`.
    """
    m = check_matrix(m)
    n, n2 = m.shape
    if n != n2:
        raise DimensionError(f"expm needs a square matrix, got {m.shape}")
    norm1 = float(np.max(np.sum(np.abs(m), axis=0)))
    if norm1 == 0.0:
        s = 0
    else:
        s = max(0, int(math.ceil(math.log2(norm1))) + 1)
    a = m / (2.0**s)
    terms = [np.eye(n)]
    series = np.eye(n)
    for k in range(1, _EXPM_TERMS + 1):
        terms.append(terms[-1] @ a / k)
        series = series + terms[-1]
    squares = [series]
    for _ in range(s):
        squares.append(squares[-1] @ squares[-1])
    out = squares[-1]
    return _check_finite_out(out, "expm"), (a, terms, squares, s)


def expm(m) -> np.ndarray:
    return expm_graph(m)[0]


def expm_vjp(cache: tuple, d_out: np.ndarray) -> np.ndarray:
    """Gradient of sum(d_out * expm(m)) w.r.t. m, through the graph itself.

    Reverses the squarings (d of X @ X is g @ X^T + X^T @ g) and then the
    term recurrence T_k = T_{k-1} @ a / k. Exact for the computed function.
    """
    a, terms, squares, s = cache
    g = d_out
    for i in range(s - 1, -1, -1):
        e = squares[i]
        g = g @ e.T + e.T @ g
    d_series = g
    g_term = d_series.copy()
    g_a = np.zeros_like(a)
    for k in range(_EXPM_TERMS, 0, -1):
        g_a += terms[k - 1].T @ g_term / k
        g_term = g_term @ a.T / k + d_series
    return g_a / (2.0**s)


def svd_thin(m) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD via one-sided Jacobi on the side with fewer columns.

    Returns (u, s, v) with u (rows x k), s (k,) nonincreasing and
    nonnegative, v (cols x k), k = min(rows, cols), and
    u @ diag(s) @ v.T == m up to rounding. Jacobi rotations on column pairs
    drive the Gram matrix to diagonal; robustness over speed at this scale.
    """
    m = check_matrix(m)
    rows, cols = m.shape
    transposed = rows < cols
    x = (m.T if transposed else m).copy()
    n = x.shape[1]
    v = np.eye(n)
    for _ in range(_JACOBI_SWEEPS):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                xp = x[:, p]
                xq = x[:, q]
                alpha = float(xp @ xp)
                beta = float(xq @ xq)
                gamma = float(xp @ xq)
                if abs(gamma) <= _JACOBI_TOL * math.sqrt(alpha * beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                sn = c * t
                new_p = c * xp - sn * xq
                new_q = sn * xp + c * xq
                x[:, p] = new_p
                x[:, q] = new_q
                vp = v[:, p].copy()
                v[:, p] = c * vp - sn * v[:, q]
                v[:, q] = sn * vp + c * v[:, q]
        if not rotated:
            break
    sigmas = np.sqrt(np.sum(x * x, axis=0))
    order = np.argsort(-sigmas, kind="stable")
    sigmas = sigmas[order]
    x = x[:, order]
    v = v[:, order]
    u = np.zeros_like(x)
    cutoff = sigmas[0] * 1e-300 if sigmas[0] > 0 else 0.0
    deficient = []
    for j in range(n):
        if sigmas[j] > cutoff and sigmas[j] > 0:
            u[:, j] = x[:, j] / sigmas[j]
        else:
            sigmas[j] = 0.0
            deficient.append(j)
    if deficient:
        _complete_orthonormal(u, deficient)
    if transposed:
        u, v = v, u
    return u, sigmas, v


def _complete_orthonormal(u: np.ndarray, empty_cols: list[int]) -> None:
    """Fill the listed columns of u with vectors orthonormal to the rest."""
    dim = u.shape[0]
    filled = [j for j in range(u.shape[1]) if j not in empty_cols]
    basis = [u[:, j] for j in filled]
    for j in empty_cols:
        for i in range(dim):
            cand = np.zeros(dim)
            cand[i] = 1.0
            for _ in range(2):
                for b in basis:
                    cand -= (b @ cand) * b
            norm = np.linalg.norm(cand)
            if norm > 1e-8:
                u[:, j] = cand / norm
                basis.append(u[:, j])
                break


def spectral_norm(m) -> float:
    """Largest singular value via power iteration on the smaller Gram matrix."""
    m = check_matrix(m)
    if not np.any(m):
        return 0.0
    gram = m.T @ m if m.shape[0] >= m.shape[1] else m @ m.T
    n = gram.shape[0]
    # Deterministic start with a mild ramp so symmetric cases still converge.
    vec = 1.0 + np.linspace(0.0, 0.5, n)
    vec /= np.linalg.norm(vec)
    lam = 0.0
    for _ in range(1000):
        w = gram @ vec
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            # Start vector sits in the null space; restart off-axis.
            vec = np.zeros(n)
            vec[int(np.argmax(np.abs(np.diag(gram))))] = 1.0
            w = gram @ vec
            norm_w = np.linalg.norm(w)
            if norm_w == 0.0:
                return 0.0
        vec = w / norm_w
        new_lam = float(vec @ (gram @ vec))
        if abs(new_lam - lam) <= 1e-13 * max(new_lam, 1e-300):
            lam = new_lam
            break
        lam = new_lam
    return math.sqrt(max(lam, 0.0))


def numerical_rank(m, rank_tol: float = 1e-10) -> int:
    """Count of singular values above rank_tol * ||m||_F."""
    m = check_matrix(m)
    scale = frobenius_norm(m)
    if scale == 0.0:
        return 0
    _, sigmas, _ = svd_thin(m)
    return int(np.sum(sigmas > rank_tol * scale))


def pinv(m, rank_tol: float = 1e-12) -> np.ndarray:
    """Moore-Penrose pseudoinverse via svd_thin."""
    m = check_matrix(m)
    u, s, v = svd_thin(m)
    cutoff = (s[0] if s.size else 0.0) * rank_tol
    inv_s = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
    return (v * inv_s) @ u.T
