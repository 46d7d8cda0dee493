"""Robust weighted total least squares for structured errors-in-variables models.

The model is

    P = (Phi^T kron I_m) (h + B (a - e_a)) + e_p,
    e_p ~ (0, s0^2 Q_p),  e_a ~ (0, s0^2 Q_a),

so the coefficient matrix ``A = ivec(h + B a)`` may contain repeated or fixed
entries while only the independent random variables ``a`` carry errors.  The
solver alternates a linearised Gauss-Helmert update with residual prediction
and, optionally, IGG-III reweighting of the observation cofactors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import IllConditionedError, InvalidInputError

__all__ = [
    "EivProblem",
    "SolverOptions",
    "RwtlsSolution",
    "ivec",
    "vec",
    "build_coefficient_matrix",
    "igg3_weights",
    "robust_reweight",
    "objective",
    "solve",
    "RobustWeightedTLS",
]

# Robust weights below this are clamped so Q_p stays finite (rejection).
_WEIGHT_FLOOR = 1e-8
_DESCENT_SLACK = 1e-12
_MAX_HALVINGS = 40


def vec(mat):
    """Column-major vectorisation."""
    return np.asarray(mat, dtype=float).reshape(-1, order="F")


def ivec(v, m, n):
    """Reshape an ``m*n`` vector column-major into an ``m x n`` matrix."""
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size != m * n:
        raise InvalidInputError(f"ivec: vector of length {v.size} cannot form {m}x{n}")
    return v.reshape((m, n), order="F")


def _check_spd(q, name):
    try:
        la.cho_factor(q, lower=True)
    except la.LinAlgError as exc:
        raise InvalidInputError(f"{name} is not positive definite") from exc


@dataclass
class EivProblem:
    """Structured errors-in-variables system.

    ``b_mat`` may be a dense array or any ``scipy.sparse`` matrix; selection
    matrices for large problems are best passed sparse.
    """

    p: np.ndarray
    h: np.ndarray
    b_mat: object
    a: np.ndarray
    q_p: np.ndarray
    q_a: np.ndarray
    n: int

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(-1)
        self.h = np.asarray(self.h, dtype=float).reshape(-1)
        self.a = np.asarray(self.a, dtype=float).reshape(-1)
        self.q_p = np.atleast_2d(np.asarray(self.q_p, dtype=float))
        self.q_a = np.atleast_2d(np.asarray(self.q_a, dtype=float))
        if sp.issparse(self.b_mat):
            self.b_mat = sp.csr_matrix(self.b_mat, dtype=float)
        else:
            self.b_mat = np.atleast_2d(np.asarray(self.b_mat, dtype=float))
        m, n, k = self.m, int(self.n), self.a.size
        self.n = n
        if self.h.size != m * n:
            raise InvalidInputError(f"h has length {self.h.size}, expected m*n = {m * n}")
        if self.b_mat.shape != (m * n, k):
            raise InvalidInputError(f"B has shape {self.b_mat.shape}, expected {(m * n, k)}")
        if self.q_p.shape != (m, m) or self.q_a.shape != (k, k):
            raise InvalidInputError("cofactor matrices have inconsistent shapes")
        if m <= n:
            raise InvalidInputError(f"system is not redundant: m={m} <= n={n}")
        for arr, name in ((self.p, "P"), (self.h, "h"), (self.a, "a")):
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"{name} must be finite")
        for q, name in ((self.q_p, "Q_p"), (self.q_a, "Q_a")):
            if not np.allclose(q, q.T, rtol=1e-12, atol=0.0):
                raise InvalidInputError(f"{name} must be symmetric")
            _check_spd(q, name)

    @property
    def m(self):
        return self.p.size

    @property
    def k(self):
        return self.a.size

    def selection_product(self, phi):
        """``(Phi^T kron I_m) B`` computed blockwise without the Kronecker product."""
        m = self.m
        g = None
        for col, coef in enumerate(phi):
            if coef == 0.0:
                continue
            block = self.b_mat[col * m:(col + 1) * m, :] * coef
            g = block if g is None else g + block
        if g is None:
            g = sp.csr_matrix((m, self.k)) if sp.issparse(self.b_mat) else np.zeros((m, self.k))
        return g

    def coefficient_error_matrix(self, e_a):
        return ivec(self.b_mat @ e_a, self.m, self.n)

    def with_fixed_coefficients(self):
        """Copy with ``A`` frozen at its observed value and ``B = 0``."""
        if sp.issparse(self.b_mat):
            zero = sp.csr_matrix(self.b_mat.shape)
        else:
            zero = np.zeros_like(self.b_mat)
        return EivProblem(
            p=self.p.copy(),
            h=self.h + np.asarray(self.b_mat @ self.a).reshape(-1),
            b_mat=zero,
            a=self.a.copy(),
            q_p=self.q_p.copy(),
            q_a=self.q_a.copy(),
            n=self.n,
        )


def build_coefficient_matrix(prob):
    """``A = ivec(h + B a)``."""
    return ivec(prob.h + np.asarray(prob.b_mat @ prob.a).reshape(-1), prob.m, prob.n)


@dataclass
class SolverOptions:
    eps0: float = 1e-10
    max_iterations: int = 50
    robust: bool = False
    k0: float = 1.5
    k1: float = 2.5

    def __post_init__(self):
        if not self.eps0 > 0:
            raise InvalidInputError("eps0 must be positive")
        if self.max_iterations < 1:
            raise InvalidInputError("max_iterations must be at least 1")
        if not 0 < self.k0 < self.k1:
            raise InvalidInputError("IGG-III constants must satisfy 0 < k0 < k1")


@dataclass
class RwtlsSolution:
    phi_hat: np.ndarray
    e_p_hat: np.ndarray
    e_a_hat: np.ndarray
    iterations: int
    converged: bool
    final_step_norm: float
    weight_diag: np.ndarray
    objective_history: list = field(default_factory=list)
    cofactor: np.ndarray = None
    sigma0_sq: float = float("nan")
    multipliers: np.ndarray = None
    scale_degenerate: bool = False


def igg3_weights(u, k0=1.5, k1=2.5):
    """Three-segment IGG-III weights of standardized residuals ``u``."""
    au = np.abs(np.asarray(u, dtype=float))
    w = np.ones_like(au)
    mid = (au > k0) & (au <= k1)
    w[mid] = (k0 / au[mid]) * ((k1 - au[mid]) / (k1 - k0)) ** 2
    w[au > k1] = 0.0
    return w


def robust_reweight(std_residuals, k0=1.5, k1=2.5, return_flag=False, center=False):
    """IGG-III weights with a MAD scale estimate.

    The residuals are rescaled by ``1.4826 * MAD`` before the weight function
    is applied.  With ``center=True`` they are also shifted by their median
    first, so a common offset (e.g. an intercept pulled by an outlier) does
    not push every residual past ``k1``.  A zero MAD leaves every weight at 1;
    the ``return_flag`` output (or a RuntimeWarning) reports that case.
    """
    r = np.asarray(std_residuals, dtype=float).reshape(-1)
    if not np.all(np.isfinite(r)):
        raise InvalidInputError("residuals must be finite")
    med = np.median(r)
    mad = np.median(np.abs(r - med))
    if mad == 0.0:
        if not return_flag:
            warnings.warn("zero MAD: robust weights left at 1", RuntimeWarning, stacklevel=2)
        w = np.ones_like(r)
        return (w, True) if return_flag else w
    u = (r - med) if center else r
    w = igg3_weights(u / (1.4826 * mad), k0, k1)
    return (w, False) if return_flag else w


def _cofactor_c(prob, phi, q_p):
    g = prob.selection_product(phi)
    gq = np.asarray(g @ prob.q_a)
    q_c = q_p + np.asarray(g @ gq.T)
    return 0.5 * (q_c + q_c.T), g


def _factor(q_c, iteration):
    try:
        return la.cho_factor(q_c, lower=True, check_finite=False)
    except la.LinAlgError as exc:
        raise IllConditionedError(
            f"Q_c is not positive definite at iteration {iteration}", iteration=iteration
        ) from exc


def objective(prob, phi, q_p=None):
    """Constrained WTLS objective ``w^T Q_c(phi)^-1 w`` with ``w = P - A phi``.

    This equals the minimum of ``e_p^T Q_p^-1 e_p + e_a^T Q_a^-1 e_a`` over the
    residuals that satisfy the model exactly at ``phi``.
    """
    q_p = prob.q_p if q_p is None else q_p
    a_mat = build_coefficient_matrix(prob)
    w = prob.p - a_mat @ phi
    q_c, _ = _cofactor_c(prob, np.asarray(phi, dtype=float), q_p)
    c = _factor(q_c, 0)
    return float(w @ la.cho_solve(c, w, check_finite=False))


def _weighted_ls(a_mat, p, q_p):
    c = _factor(q_p, 0)
    qa = la.cho_solve(c, a_mat, check_finite=False)
    normal = a_mat.T @ qa
    return np.linalg.solve(normal, qa.T @ p)


def _reweighted_qp(q_p, weights):
    s = 1.0 / np.sqrt(np.maximum(weights, _WEIGHT_FLOOR))
    return q_p * np.outer(s, s)


def solve(prob, opts=None):
    """Iterative (robust) weighted TLS solution of ``prob``.

    Starts from weighted least squares ignoring coefficient errors and stops
    when the parameter update norm drops below ``opts.eps0``.  Reaching
    ``max_iterations`` returns a solution flagged ``converged=False``.

    Raises
    ------
    IllConditionedError
        ``Q_c`` fails its Cholesky factorization.
    """
    opts = SolverOptions() if opts is None else opts
    m, n = prob.m, prob.n
    a_mat = build_coefficient_matrix(prob)
    phi = _weighted_ls(a_mat, prob.p, prob.q_p)
    weights = np.ones(m)
    q_p = prob.q_p
    degenerate = False
    history = []
    converged = False
    step_norm = np.inf
    cached = None  # (phi, q_c factor, g) valid for the current q_p

    for it in range(1, opts.max_iterations + 1):
        w = prob.p - a_mat @ phi
        if opts.robust:
            q_c0, _ = _cofactor_c(prob, phi, prob.q_p)
            std = w / np.sqrt(np.diag(q_c0))
            weights, flag = robust_reweight(std, opts.k0, opts.k1, return_flag=True,
                                           center=True)
            degenerate = degenerate or flag
            q_p = _reweighted_qp(prob.q_p, weights)
            cached = None
        if cached is None:
            q_c, g = _cofactor_c(prob, phi, q_p)
            c = _factor(q_c, it)
        else:
            _, c, g = cached
        qw = la.cho_solve(c, w, check_finite=False)
        f_cur = float(w @ qw)
        history.append(f_cur)

        # residual predictions at the current iterate define the expansion point
        e_a = -prob.q_a @ np.asarray(g.T @ qw).reshape(-1)
        a_i = a_mat - prob.coefficient_error_matrix(e_a)
        qai = la.cho_solve(c, a_i, check_finite=False)
        normal = a_i.T @ qai
        try:
            delta = np.linalg.solve(normal, qai.T @ w)
        except np.linalg.LinAlgError as exc:
            raise IllConditionedError(
                f"normal matrix singular at iteration {it}", iteration=it
            ) from exc

        # Step-halving safeguard; the full step is taken in regular cases.
        t = 1.0
        for _ in range(_MAX_HALVINGS):
            cand = phi + t * delta
            w_new = prob.p - a_mat @ cand
            q_c_new, g_new = _cofactor_c(prob, cand, q_p)
            c_new = _factor(q_c_new, it)
            f_new = float(w_new @ la.cho_solve(c_new, w_new, check_finite=False))
            if f_new <= f_cur + _DESCENT_SLACK * max(1.0, abs(f_cur)):
                break
            t *= 0.5
        else:
            # no descent along the update: stop without claiming convergence
            cached = (phi, c, g)
            step_norm = float(np.linalg.norm(delta))
            break

        step = t * delta
        phi = cand
        cached = (phi, c_new, g_new)
        step_norm = float(np.linalg.norm(step))
        if step_norm < opts.eps0:
            converged = True
            break

    # Final residual predictions and precision at the accepted estimate.
    w = prob.p - a_mat @ phi
    _, c, g = cached
    kvec = la.cho_solve(c, w, check_finite=False)
    f_final = float(w @ kvec)
    history.append(f_final)
    e_p = q_p @ kvec
    e_a = -prob.q_a @ np.asarray(g.T @ kvec).reshape(-1)
    a_i = a_mat - prob.coefficient_error_matrix(e_a)
    qai = la.cho_solve(c, a_i, check_finite=False)
    cofactor = np.linalg.inv(a_i.T @ qai)
    return RwtlsSolution(
        phi_hat=phi,
        e_p_hat=e_p,
        e_a_hat=e_a,
        iterations=it,
        converged=converged,
        final_step_norm=step_norm,
        weight_diag=weights,
        objective_history=history,
        cofactor=0.5 * (cofactor + cofactor.T),
        sigma0_sq=f_final / (m - n),
        multipliers=kvec,
        scale_degenerate=degenerate,
    )


class RobustWeightedTLS(BaseEstimator):
    """Estimator wrapper around :func:`solve`.

    Parameters
    ----------
    robust : bool, default=True
        Apply IGG-III reweighting of the observation cofactors.
    structured : bool, default=True
        If False the coefficient matrix is treated as error free (``B = 0``),
        which reduces the fit to weighted least squares.
    eps0, max_iterations, k0, k1
        See :class:`SolverOptions`.

    Attributes
    ----------
    coef_ : ndarray of shape (n,)
    solution_ : RwtlsSolution
    """

    def __init__(self, robust=True, structured=True, eps0=1e-10, max_iterations=50,
                 k0=1.5, k1=2.5):
        self.robust = robust
        self.structured = structured
        self.eps0 = eps0
        self.max_iterations = max_iterations
        self.k0 = k0
        self.k1 = k1

    def fit(self, problem, y=None):
        if not isinstance(problem, EivProblem):
            raise InvalidInputError("fit expects an EivProblem")
        if not self.structured:
            problem = problem.with_fixed_coefficients()
        opts = SolverOptions(self.eps0, self.max_iterations, self.robust, self.k0, self.k1)
        self.solution_ = solve(problem, opts)
        self.coef_ = self.solution_.phi_hat
        self.n_iter_ = self.solution_.iterations
        return self

    def predict(self, a_mat):
        check_is_fitted(self, "coef_")
        a_mat = np.atleast_2d(np.asarray(a_mat, dtype=float))
        if a_mat.shape[1] != self.coef_.size:
            raise InvalidInputError(
                f"expected {self.coef_.size} columns, got {a_mat.shape[1]}"
            )
        return a_mat @ self.coef_
