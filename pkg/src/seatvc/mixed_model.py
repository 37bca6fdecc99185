"""Penalized least squares as a linear mixed model, with REML smoothing.

The model is

    y = X b + sum_k Z_k u_k + e,   u_k ~ N(0, s2_k I),   e ~ N(0, s2 I)

and the penalty for block k is lam_k = s2 / s2_k. For fixed penalties the
coefficients minimize ||y - Xb - Zu||^2 + sum_k lam_k ||u_k||^2, obtained
from the augmented normal equations C [b; u] = W'y with

    C = [[X'X, X'Z], [Z'X, Z'Z + Lambda]].

With s2 profiled out, minus twice the restricted log likelihood is

    (n-p) log(rss/(n-p)) + (n-p)(1 + log 2 pi) + log|C| - sum_k H_k log lam_k

where rss is the penalized residual sum of squares. This equals the usual
log|V| + log|X'V^-1 X| + y'Py form (no -log|X'X| term) and is evaluated
entirely from cross-products.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy import optimize

logger = logging.getLogger(__name__)

LOG10_LAMBDA_BOUNDS = (-8.0, 12.0)
REL_TOL = 1e-9
MAX_ITER = 200
PARAM_COUNT_CONVENTION = "fixed-effect columns + variance components (incl. residual)"


class MixedModelError(RuntimeError):
    pass


class RankDeficientError(MixedModelError):
    pass


class SingularSystemError(MixedModelError):
    def __init__(self, msg, block=None):
        super().__init__(msg)
        self.block = block


class ConvergenceError(MixedModelError):
    def __init__(self, msg, grad_norm=None):
        super().__init__(msg)
        self.grad_norm = grad_norm


@dataclass
class PenalizedDesign:
    fixed_matrix: np.ndarray
    random_blocks: list
    response: np.ndarray
    block_names: list = None

    def __post_init__(self):
        self.fixed_matrix = np.atleast_2d(np.asarray(self.fixed_matrix, dtype=float))
        self.response = np.asarray(self.response, dtype=float).ravel()
        self.random_blocks = [np.asarray(Z, dtype=float).reshape(len(self.response), -1)
                              if np.asarray(Z).size else np.empty((len(self.response), 0))
                              for Z in self.random_blocks]
        n = self.response.size
        if self.fixed_matrix.shape[0] != n:
            raise ValueError("fixed_matrix and response have different row counts")
        for k, Z in enumerate(self.random_blocks):
            if Z.shape[0] != n:
                raise ValueError(f"random block {k} has {Z.shape[0]} rows, expected {n}")
        if self.block_names is None:
            self.block_names = [f"block{k}" for k in range(len(self.random_blocks))]
        if len(self.block_names) != len(self.random_blocks):
            raise ValueError("one name per random block required")
        if not np.all(np.isfinite(self.fixed_matrix)) or not np.all(np.isfinite(self.response)):
            raise ValueError("design contains non-finite values")

    @property
    def n(self) -> int:
        return self.response.size

    @property
    def p(self) -> int:
        return self.fixed_matrix.shape[1]

    @property
    def block_sizes(self) -> list:
        return [Z.shape[1] for Z in self.random_blocks]

    def full_matrix(self) -> np.ndarray:
        return np.hstack([self.fixed_matrix, *self.random_blocks])

    def check_rank(self):
        X = self.fixed_matrix
        if X.shape[1] == 0:
            return
        rank = np.linalg.matrix_rank(X)
        if rank < X.shape[1]:
            raise RankDeficientError(
                f"fixed block is rank deficient (rank {rank} < {X.shape[1]} columns)"
            )


@dataclass
class FittedMixedModel:
    fixed_coefficients: np.ndarray
    random_coefficients: list
    lambdas: np.ndarray
    residual_variance: float
    block_variances: np.ndarray
    neg2_res_log_likelihood: float
    aic: float
    bic: float
    effective_param_count: int
    n_obs: int
    covariance: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    block_names: list
    boundary_flags: list = field(default_factory=list)
    converged: bool = True
    n_iter: int = 0
    objective_trace: list = field(default_factory=list)
    param_count_convention: str = PARAM_COUNT_CONVENTION

    @property
    def coefficients(self) -> np.ndarray:
        return np.concatenate([self.fixed_coefficients, *self.random_coefficients])


class _System:
    """Cross-products of a design, reused across penalty evaluations."""

    def __init__(self, design: PenalizedDesign):
        self.design = design
        self.W = design.full_matrix()
        self.y = design.response
        self.WtW = self.W.T @ self.W
        self.Wty = self.W.T @ self.y
        self.n, self.p = design.n, design.p
        self.sizes = design.block_sizes
        offsets = np.cumsum([self.p] + self.sizes)
        self.slices = [slice(a, b) for a, b in zip(offsets[:-1], offsets[1:])]

    def penalty_diag(self, lambdas) -> np.ndarray:
        d = np.zeros(self.W.shape[1])
        for sl, lam in zip(self.slices, lambdas):
            d[sl] = lam
        return d

    def factor(self, lambdas):
        C = self.WtW + np.diag(self.penalty_diag(lambdas))
        try:
            return sla.cho_factor(C, lower=True, check_finite=False), C
        except np.linalg.LinAlgError:
            raise SingularSystemError(
                f"augmented system is singular at {self._offending_block(C)}",
                block=self._offending_block(C),
            ) from None

    def _offending_block(self, C) -> str:
        edges = [self.p] + [sl.stop for sl in self.slices]
        names = ["fixed block"] + list(self.design.block_names)
        for end, name in zip(edges, names):
            if end == 0:
                continue
            try:
                np.linalg.cholesky(C[:end, :end])
            except np.linalg.LinAlgError:
                return name
        return "unknown block"

    def solve(self, lambdas):
        cf, C = self.factor(lambdas)
        coef = sla.cho_solve(cf, self.Wty, check_finite=False)
        return coef, cf, C

    def evaluate(self, lambdas, need_grad: bool = False):
        """Return (neg2 REML, coef, rss, cho factor, gradient wrt log10 lambda)."""
        lambdas = np.asarray(lambdas, dtype=float)
        coef, cf, _ = self.solve(lambdas)
        resid = self.y - self.W @ coef
        pen = sum(lam * coef[sl] @ coef[sl] for sl, lam in zip(self.slices, lambdas))
        rss = resid @ resid + pen
        # noiseless designs: keep the log finite
        rss = max(rss, (1e-15 * np.linalg.norm(self.y)) ** 2, 1e-300)
        dof = self.n - self.p
        logdet_c = 2.0 * np.sum(np.log(np.diag(cf[0])))
        logdet_pen = sum(h * np.log(lam) for h, lam in zip(self.sizes, lambdas))
        neg2 = dof * np.log(rss / dof) + dof * (1.0 + np.log(2 * np.pi)) + logdet_c - logdet_pen
        grad = None
        if need_grad:
            Cinv = sla.cho_solve(cf, np.eye(len(coef)), check_finite=False)
            grad = np.empty(len(lambdas))
            for k, (sl, lam, h) in enumerate(zip(self.slices, lambdas, self.sizes)):
                d_lam = dof * (coef[sl] @ coef[sl]) / rss + np.trace(Cinv[sl, sl]) - h / lam
                grad[k] = d_lam * lam * np.log(10.0)
        return neg2, coef, rss, cf, grad


def fit_penalized_fixed_lambda(design: PenalizedDesign, lambdas) -> tuple:
    """Penalized least squares at fixed penalties.

    Returns ``(fixed_coefficients, [random_coefficients per block])``.
    """
    lambdas = np.atleast_1d(np.asarray(lambdas, dtype=float))
    if len(lambdas) != len(design.random_blocks):
        raise ValueError("one penalty per random block required")
    if np.any(~np.isfinite(lambdas)) or np.any(lambdas <= 0):
        raise ValueError("penalties must be finite and positive")
    design.check_rank()
    system = _System(design)
    coef, _, _ = system.solve(lambdas)
    return coef[: system.p], [coef[sl] for sl in system.slices]


def neg2_reml(design: PenalizedDesign, lambdas) -> float:
    """Minus twice the restricted log likelihood at the given penalties."""
    return float(_System(design).evaluate(np.atleast_1d(lambdas))[0])


def fit_metrics(model, n: int = None) -> dict:
    n = model.n_obs if n is None else n
    neg2 = model.neg2_res_log_likelihood
    k = model.effective_param_count
    return {
        "neg2_res_log_likelihood": float(neg2),
        "aic": float(neg2 + 2.0 * k),
        "bic": float(neg2 + k * np.log(n)),
    }


def _assemble(system: _System, lambdas, neg2, coef, rss, cf, **extra) -> FittedMixedModel:
    design = system.design
    dof = system.n - system.p
    sigma2 = rss / dof
    lambdas = np.asarray(lambdas, dtype=float)
    cov = sigma2 * sla.cho_solve(cf, np.eye(len(coef)), check_finite=False)
    fitted = system.W @ coef
    k = system.p + len(lambdas) + 1
    model = FittedMixedModel(
        fixed_coefficients=coef[: system.p],
        random_coefficients=[coef[sl] for sl in system.slices],
        lambdas=lambdas,
        residual_variance=float(sigma2),
        block_variances=sigma2 / lambdas if len(lambdas) else np.empty(0),
        neg2_res_log_likelihood=float(neg2),
        aic=0.0,
        bic=0.0,
        effective_param_count=k,
        n_obs=system.n,
        covariance=cov,
        fitted=fitted,
        residuals=system.y - fitted,
        block_names=list(design.block_names),
        **extra,
    )
    stats = fit_metrics(model)
    model.aic, model.bic = stats["aic"], stats["bic"]
    return model


def fit_at_lambdas(design: PenalizedDesign, lambdas) -> FittedMixedModel:
    """Fit with penalties held fixed; statistics are evaluated at those penalties."""
    design.check_rank()
    system = _System(design)
    lambdas = np.atleast_1d(np.asarray(lambdas, dtype=float))
    if len(lambdas) != len(design.random_blocks):
        raise ValueError("one penalty per random block required")
    neg2, coef, rss, cf, _ = system.evaluate(lambdas)
    return _assemble(system, lambdas, neg2, coef, rss, cf)


def _coordinate_golden(system, rho, lo, hi, trace):
    """Cyclic bounded scalar searches on each log10 penalty."""
    f_prev = system.evaluate(10.0 ** rho)[0]
    for sweep in range(MAX_ITER):
        for k in range(len(rho)):
            def f1(r, k=k):
                trial = rho.copy()
                trial[k] = r
                return system.evaluate(10.0 ** trial)[0]

            res = optimize.minimize_scalar(f1, bounds=(lo, hi), method="bounded",
                                           options={"xatol": 1e-6})
            if res.fun <= f_prev:
                rho[k] = res.x
                f_prev = res.fun
        trace.append(float(f_prev))
        if len(trace) > 1 and abs(trace[-2] - trace[-1]) <= REL_TOL * max(abs(trace[-1]), 1.0):
            return rho, True, sweep + 1
    return rho, False, MAX_ITER


def fit_reml(design: PenalizedDesign) -> FittedMixedModel:
    """Choose one penalty per random block by restricted maximum likelihood.

    The search runs over log10 penalties in [-8, 12] with L-BFGS-B using the
    analytic gradient, started from the best common penalty on a coarse
    scan. If L-BFGS-B stops without convergence, cyclic bounded scalar
    searches take over.
    """
    n_blocks = len(design.random_blocks)
    if design.n <= design.p + n_blocks:
        raise MixedModelError(
            f"need n > p + blocks ({design.n} <= {design.p} + {n_blocks})"
        )
    design.check_rank()
    system = _System(design)
    if n_blocks == 0:
        neg2, coef, rss, cf, _ = system.evaluate(np.empty(0))
        return _assemble(system, [], neg2, coef, rss, cf, objective_trace=[float(neg2)])

    lo, hi = LOG10_LAMBDA_BOUNDS
    scan = np.linspace(lo, hi, 21)
    scores = []
    for r in scan:
        try:
            scores.append(system.evaluate(np.full(n_blocks, 10.0 ** r))[0])
        except SingularSystemError:
            scores.append(np.inf)
    rho0 = np.full(n_blocks, scan[int(np.argmin(scores))])

    trace = [float(system.evaluate(10.0 ** rho0)[0])]

    def objective(rho):
        neg2, _, _, _, grad = system.evaluate(10.0 ** rho, need_grad=True)
        return neg2, grad

    def record(xk):
        trace.append(float(system.evaluate(10.0 ** xk)[0]))

    res = optimize.minimize(
        objective, rho0, jac=True, method="L-BFGS-B",
        bounds=[(lo, hi)] * n_blocks, callback=record,
        options={"maxiter": MAX_ITER, "ftol": REL_TOL, "gtol": 1e-7},
    )
    rho, converged, n_iter = np.clip(res.x, lo, hi), bool(res.success), int(res.nit)
    if not converged:
        logger.debug("L-BFGS-B stopped (%s); switching to coordinate search", res.message)
        rho, converged, extra_iter = _coordinate_golden(system, rho.copy(), lo, hi, trace)
        n_iter += extra_iter
    lambdas = 10.0 ** rho
    neg2, coef, rss, cf, grad = system.evaluate(lambdas, need_grad=True)
    if not converged:
        raise ConvergenceError(
            f"REML did not converge in {MAX_ITER} iterations; "
            f"final gradient norm {np.linalg.norm(grad):.3g}",
            grad_norm=float(np.linalg.norm(grad)),
        )
    flags = [
        f"{name}: variance at lower boundary" if r >= hi - 1e-6 else
        f"{name}: penalty at lower bound" if r <= lo + 1e-6 else ""
        for name, r in zip(design.block_names, rho)
    ]
    return _assemble(system, lambdas, neg2, coef, rss, cf,
                     boundary_flags=[f for f in flags if f], converged=True,
                     n_iter=n_iter, objective_trace=trace)
