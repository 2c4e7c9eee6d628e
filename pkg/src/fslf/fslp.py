"""Feature-sensitive reconstruction prior.

A target feature vector ``y`` (three concatenated segments) is rebuilt from
candidate atlas columns ``A`` under per-segment weights ``alpha / sqrt(n_j)``.
The weights and the reconstruction coefficients are found by alternating a
weighted least-squares step and a closed-form simplex QP step.

The tracked objective is ``0.5 * |W_alpha (y - A beta)|^2 + 0.5 * lam * |alpha|^2``,
which is exactly ``0.5 * alpha^T Lambda alpha`` with
``Lambda_jj = sum(f_j^2) / n_j + lam``; the alpha step minimises this form
in closed form, so every half-step is a descent step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import ConfigError, DegenerateDataError, NumericError

SEGMENT_LENGTHS = (125, 125, 18)
LAMBDA_FLOOR = 1e-8
SIMPLEX_TOL = 1e-9


@dataclass(frozen=True)
class FslpProblem:
    y: np.ndarray
    A: np.ndarray  # (len(y), m), one column per candidate
    labels: np.ndarray  # (m,) 1 = foreground, 0 = background
    segment_lengths: tuple[int, ...] = SEGMENT_LENGTHS
    lam: float | None = None  # None: adaptive, from the residual at uniform alpha

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64).ravel()
        A = np.asarray(self.A, dtype=np.float64)
        if A.ndim == 1:
            A = A[:, None]
        labels = np.asarray(self.labels).ravel()
        if A.shape[1] == 0:
            raise DegenerateDataError("no candidate columns")
        if A.shape[0] != y.size or sum(self.segment_lengths) != y.size:
            raise ConfigError(f"row count {A.shape[0]} / y length {y.size} do not match "
                              f"segments {self.segment_lengths}")
        if labels.size != A.shape[1]:
            raise ConfigError("one label per column is required")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "segment_lengths", tuple(int(n) for n in self.segment_lengths))

    @property
    def m(self) -> int:
        return self.A.shape[1]


@dataclass
class FslpSolution:
    alpha: np.ndarray
    beta: np.ndarray
    f: np.ndarray
    lam: float
    e_F: float = np.nan
    e_B: float = np.nan
    objective_trace: list = field(default_factory=list)
    n_iters: int = 0


def _row_weights(alpha, segment_lengths) -> np.ndarray:
    return np.repeat(np.asarray(alpha, dtype=np.float64) / np.sqrt(segment_lengths),
                     segment_lengths)


def _check_simplex(alpha) -> np.ndarray:
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < -SIMPLEX_TOL) or abs(alpha.sum() - 1.0) > SIMPLEX_TOL:
        raise ConfigError(f"alpha {alpha} is not on the probability simplex")
    return alpha


def apply_weight(alpha, segment_lengths, v) -> np.ndarray:
    """Action of the diagonal feature-sensitive matrix on ``v``."""
    alpha = _check_simplex(alpha)
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != sum(segment_lengths):
        raise ConfigError("vector length does not match segment lengths")
    w = _row_weights(alpha, segment_lengths)
    return w * v if v.ndim == 1 else w[:, None] * v


def segment_mean_squares(f, segment_lengths) -> np.ndarray:
    """``sum(f_j**2) / n_j`` for each segment."""
    f = np.asarray(f, dtype=np.float64)
    cuts = np.cumsum(segment_lengths)[:-1]
    return np.array([np.dot(s, s) / n for s, n in zip(np.split(f, cuts), segment_lengths)])


def adaptive_lambda(f, segment_lengths=SEGMENT_LENGTHS) -> float:
    return max(float(segment_mean_squares(f, segment_lengths).mean()), LAMBDA_FLOOR)


def lambda_matrix_diag(f, segment_lengths, lam) -> np.ndarray:
    return segment_mean_squares(f, segment_lengths) + lam


def objective(problem: FslpProblem, alpha, beta, lam: float) -> float:
    f = problem.y - problem.A @ beta
    wf = _row_weights(alpha, problem.segment_lengths) * f
    return 0.5 * float(wf @ wf) + 0.5 * lam * float(np.dot(alpha, alpha))


def compress(problem: FslpProblem):
    """Per-segment thin QR factors ``(R_j, Q_j^T y_j)``.

    Row scaling acts blockwise, so the weighted problem stacked from these
    factors has the same minimisers as the full one with fewer rows.
    """
    out = []
    lo = 0
    for n in problem.segment_lengths:
        q, r = np.linalg.qr(problem.A[lo:lo + n])
        out.append((r, q.T @ problem.y[lo:lo + n]))
        lo += n
    return out


def solve_beta(problem: FslpProblem, alpha, factors=None) -> np.ndarray:
    """Minimum-norm minimiser of ``|W_alpha (y - A beta)|^2``.

    Uses a complete orthogonal factorisation (QR with column pivoting), so
    rank-deficient candidate sets get the minimum-norm solution. ``factors``
    from :func:`compress` shrink the system without changing the answer.
    """
    alpha = _check_simplex(alpha)
    if factors is None:
        w = _row_weights(alpha, problem.segment_lengths)
        M, rhs = w[:, None] * problem.A, w * problem.y
    else:
        scale = alpha / np.sqrt(problem.segment_lengths)
        M = np.vstack([s * r for s, (r, _) in zip(scale, factors)])
        rhs = np.concatenate([s * qy for s, (_, qy) in zip(scale, factors)])
    beta, *_ = linalg.lstsq(M, rhs, lapack_driver="gelsy", check_finite=False)
    return beta


def solve_alpha_diag(diag) -> np.ndarray:
    """Minimiser of ``0.5 a^T diag(d) a`` over the simplex, for positive ``d``."""
    diag = np.asarray(diag, dtype=np.float64)
    if np.any(~np.isfinite(diag)) or np.any(diag <= 0):
        raise NumericError(f"Lambda must be positive definite, got diagonal {diag}")
    inv = 1.0 / diag
    return inv / inv.sum()


def solve_alpha(problem: FslpProblem, beta, lam: float | None = None) -> np.ndarray:
    f = problem.y - problem.A @ beta
    if lam is None:
        lam = problem.lam if problem.lam is not None else adaptive_lambda(f, problem.segment_lengths)
    return solve_alpha_diag(lambda_matrix_diag(f, problem.segment_lengths, lam))


def alternate(problem: FslpProblem, alpha0=None, max_iters: int = 10,
              tol: float = 1e-4) -> FslpSolution:
    """Alternate the beta and alpha steps until alpha moves less than ``tol``
    (max-norm) or ``max_iters`` alpha updates have been made.

    ``objective_trace[0]`` is the objective at ``(alpha0, beta(alpha0))``;
    each later entry follows one alpha update.
    """
    if max_iters < 1:
        raise ConfigError("max_iters must be at least 1")
    k = len(problem.segment_lengths)
    alpha = np.full(k, 1.0 / k) if alpha0 is None else _check_simplex(alpha0)
    factors = compress(problem)
    starts = np.cumsum((0,) + problem.segment_lengths[:-1])
    sizes = np.asarray(problem.segment_lengths, dtype=np.float64)

    def mean_squares(beta):
        f = problem.y - problem.A @ beta
        return np.add.reduceat(f * f, starts) / sizes

    beta = solve_beta(problem, alpha, factors)
    ms = mean_squares(beta)
    lam = problem.lam if problem.lam is not None else max(float(ms.mean()), LAMBDA_FLOOR)
    if lam <= 0:
        raise NumericError("lambda must be positive")
    # |W_alpha f|^2 = sum(alpha_j^2 * ms_j), so the objective reuses ms
    trace = [0.5 * float(np.dot(alpha * alpha, ms + lam))]
    n_iters = 0
    for n_iters in range(1, max_iters + 1):
        new_alpha = solve_alpha_diag(ms + lam)
        trace.append(0.5 * float(np.dot(new_alpha * new_alpha, ms + lam)))
        moved = np.max(np.abs(new_alpha - alpha))
        alpha = new_alpha
        if moved < tol or n_iters == max_iters:
            break
        beta = solve_beta(problem, alpha, factors)
        ms = mean_squares(beta)
    f = problem.y - problem.A @ beta
    sol = FslpSolution(alpha, beta, f, lam, objective_trace=trace, n_iters=n_iters)
    sol.e_F, sol.e_B = reconstruction_errors(sol, problem)
    return sol


def reconstruction_errors(solution: FslpSolution, problem: FslpProblem):
    """Weighted residuals when only foreground (resp. background) weights are kept."""
    w = _row_weights(solution.alpha, problem.segment_lengths)
    fg = problem.labels == 1
    out = []
    for mask in (fg, ~fg):
        r = w * (problem.y - problem.A @ np.where(mask, solution.beta, 0.0))
        out.append(float(r @ r))
    return tuple(out)


# --------------------------------------------------------------------------
# second-order probe of the scalar reduction

@dataclass(frozen=True)
class NonConvexityProbe:
    f_star: float
    eta: float
    lam: float
    H: np.ndarray
    eigenvalues: tuple[float, float]

    @property
    def has_negative_eigenvalue(self) -> bool:
        return min(self.eigenvalues) < 0


def nonconvexity_probe(f_star: float, eta: float, lam: float) -> NonConvexityProbe:
    """Hessian of ``E = eta^2 f^2 + lam eta^2`` in ``(eta, f)`` and its
    eigenvalues from the characteristic polynomial."""
    if not 0.0 <= eta * eta <= 1.0:
        raise ConfigError("eta^2 must lie in [0, 1]")
    H = np.array([[2 * f_star ** 2 + 2 * lam, 4 * f_star * eta],
                  [4 * f_star * eta, 2 * eta ** 2]])
    mid = f_star ** 2 + eta ** 2 + lam
    disc = mid ** 2 - (4 * lam * eta ** 2 - 12 * f_star ** 2 * eta ** 2)
    root = np.sqrt(max(disc, 0.0))
    return NonConvexityProbe(f_star, eta, lam, H, (mid + root, mid - root))
