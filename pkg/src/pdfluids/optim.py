"""Proximal-splitting optimizers over velocity fields.

All solvers minimize f(z) + g(z) where g is the indicator of the
divergence-free set (its proximal operator is the pressure projection) and
f is supplied as a proximal operator.  The first-order primal-dual
iteration is the workhorse; ADMM and iterated orthogonal projection are
provided for comparison and share the same projection and stopping
machinery so their convergence logs are comparable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .fields import VelocityField
from .pressure import DivergenceProjector


class ProxOperator:
    """Callable prox contract: (sigma, v) -> argmin_x f(x) + sigma/2 ||x-v||^2."""

    is_orthogonal_projection = False

    def __call__(self, sigma: float, v: VelocityField) -> VelocityField:
        raise NotImplementedError


class IdentityProx(ProxOperator):
    """Prox of f == 0 (and the orthogonal projection onto the whole space)."""

    is_orthogonal_projection = True

    def __call__(self, sigma: float, v: VelocityField) -> VelocityField:
        return v.copy()


@dataclass
class PdParams:
    """Step sizes and stopping control of the primal-dual iteration."""

    tau: float
    sigma: float
    theta: float = 0.3
    max_iters: int = 300
    eps_abs: float = 1e-3
    eps_rel: float = 1e-3
    adaptive: bool = False
    gamma_accel: float = 200.0
    krylov: bool = False

    def __post_init__(self):
        if self.tau <= 0 or self.sigma <= 0:
            raise ValueError("tau and sigma must be positive")
        if not (0 < self.theta <= 1):
            raise ValueError("theta must be in (0, 1]")


@dataclass
class AdaptiveParams:
    """Defaults of the accelerated parameter schedule."""

    gamma_accel: float = 200.0
    tau0: float = 150.0

    @property
    def sigma0(self) -> float:
        return 1.0 / self.tau0

    def to_pd_params(self, **kwargs) -> PdParams:
        return PdParams(tau=self.tau0, sigma=self.sigma0, theta=1.0,
                        adaptive=True, gamma_accel=self.gamma_accel, **kwargs)


@dataclass
class AdmmParams:
    rho: float
    max_iters: int = 2000
    eps_abs: float = 1e-3
    eps_rel: float = 1e-3

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")


@dataclass
class ConvergenceLog:
    """Per-iteration residuals and solver effort of one optimizer run."""

    method: str = ""
    iterations: list[int] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)
    epsilons: list[float] = field(default_factory=list)
    eps_cg: list[float] = field(default_factory=list)
    cg_iters: list[int] = field(default_factory=list)
    objectives: list[float] = field(default_factory=list)
    converged: bool = False

    def record(self, iteration: int, residual: float, epsilon: float,
               eps_cg: float, cg_iters: int, objective: float | None = None):
        self.iterations.append(iteration)
        self.residuals.append(residual)
        self.epsilons.append(epsilon)
        self.eps_cg.append(eps_cg)
        self.cg_iters.append(cg_iters)
        if objective is not None:
            self.objectives.append(objective)

    def __len__(self):
        return len(self.iterations)

    @property
    def total_cg_iters(self) -> int:
        return int(sum(self.cg_iters))

    @property
    def final_residual(self) -> float:
        return self.residuals[-1] if self.residuals else math.inf


def stop_check(z_new: VelocityField, z_old: VelocityField, eps_abs: float,
               eps_rel: float) -> tuple[bool, float, float]:
    """Iterate-change stopping rule.

    residual = ||z_new - z_old||_2, threshold
    eps = sqrt(n_dof) * eps_abs + eps_rel * ||z_new||_2 with n_dof the number
    of velocity degrees of freedom.
    """
    residual = (z_new - z_old).norm()
    eps = math.sqrt(z_new.n_dof) * eps_abs + eps_rel * z_new.norm()
    return residual <= eps, residual, eps


def moreau_transform(prox_f: ProxOperator, sigma: float, v: VelocityField) -> VelocityField:
    """Prox of the convex conjugate, prox_{f*,1/sigma}(v) = v - sigma*prox_{f,sigma}(v/sigma)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return v - sigma * prox_f(sigma, v * (1.0 / sigma))


def adaptive_pd_update(tau: float, sigma: float, theta_prev: float,
                       gamma_accel: float) -> tuple[float, float, float]:
    """Accelerated step-size schedule.

    theta' = 1/sqrt(1 + 2*tau*gamma), tau' = tau*theta', sigma' = sigma/theta';
    theta_prev is accepted for signature symmetry but the update is closed
    form and does not use it.
    """
    theta = 1.0 / math.sqrt(1.0 + 2.0 * tau * gamma_accel)
    return tau * theta, sigma / theta, theta


def krylov_accelerate(z_k: VelocityField, z_km1: VelocityField | None, error_fn,
                      eps_km1: float | None) -> tuple[VelocityField, float]:
    """One secant-style correction of an alternating-projection iterate.

    eps_k = error_fn(z_k); for k > 1 the candidate
    z_tmp = z_k - (eps_k/eps_{k-1}) (z_k - z_{k-1}) replaces z_k only when it
    has a strictly smaller error.  Returns (iterate, eps_k); eps_{k-1} = 0
    skips the correction.
    """
    eps_k = float(error_fn(z_k))
    if z_km1 is None or eps_km1 is None or eps_km1 == 0.0 or eps_k == 0.0:
        return z_k, eps_k
    ratio = eps_k / eps_km1
    z_tmp = z_k - ratio * (z_k - z_km1)
    if float(error_fn(z_tmp)) < eps_k:
        return z_tmp, eps_k
    return z_k, eps_k


def _guard_extensions(prox_f: ProxOperator, params: PdParams):
    if (params.adaptive or params.krylov) and not prox_f.is_orthogonal_projection:
        raise ValueError("adaptive parameters and Krylov correction are only "
                         "supported for orthogonal-projection prox operators")


def pd_solve(prox_f: ProxOperator, projector: DivergenceProjector, params: PdParams,
             z0: VelocityField, log: ConvergenceLog, on_z_update=None,
             krylov_error=None, iterate_callback=None) -> VelocityField:
    """First-order primal-dual iteration with K = identity.

    Per iteration:
      x <- x + sigma*y - sigma*prox_f(sigma, x/sigma + y)
      z <- project(z - tau*x)           (adaptive CG accuracy)
      y <- z + theta*(z - z_old)
    and stop once ||z - z_old|| falls below the stop threshold with the CG
    tolerance already at its final accuracy.  Starts from x = 0, y = z0.
    Returns the last z; non-convergence is flagged on the log.
    """
    _guard_extensions(prox_f, params)
    log.method = log.method or "pd"
    z = z0.copy()
    x = VelocityField.zeros(z.dims)
    y = z0.copy()
    tau, sigma, theta = params.tau, params.sigma, params.theta
    use_krylov = params.krylov
    if use_krylov and krylov_error is None:
        krylov_error = lambda f: (f - prox_f(1.0, f)).norm()
    z_km1 = None
    eps_km1 = None
    for k in range(1, params.max_iters + 1):
        x = x + sigma * y - sigma * prox_f(sigma, x * (1.0 / sigma) + y)
        z_old = z
        z, cg_iters, eps_cg = projector.project(z_old - tau * x)
        if on_z_update is not None:
            on_z_update(z)
        if use_krylov:
            z, eps_km1 = krylov_accelerate(z, z_km1, krylov_error, eps_km1)
            z_km1 = z
        if params.adaptive:
            tau, sigma, theta = adaptive_pd_update(tau, sigma, theta,
                                                   params.gamma_accel)
        y = z + theta * (z - z_old)
        stop, residual, eps = stop_check(z, z_old, params.eps_abs, params.eps_rel)
        projector.adapt(residual, eps)
        log.record(k, residual, eps, eps_cg, cg_iters)
        if iterate_callback is not None:
            iterate_callback(z)
        # the returned iterate must come from a final-accuracy projection
        if stop and eps_cg <= projector.final_accuracy:
            log.converged = True
            break
    return z


def admm_solve(prox_f: ProxOperator, projector: DivergenceProjector,
               params: AdmmParams, z0: VelocityField, log: ConvergenceLog,
               on_z_update=None, iterate_callback=None) -> VelocityField:
    """Alternating direction method of multipliers with scaled dual y0 = 0.

      x <- prox_f(rho, z - y);  z <- project(x + y);  y <- y + x - z
    """
    log.method = log.method or "admm"
    z = z0.copy()
    y = VelocityField.zeros(z.dims)
    for k in range(1, params.max_iters + 1):
        x = prox_f(params.rho, z - y)
        z_old = z
        z, cg_iters, eps_cg = projector.project(x + y)
        if on_z_update is not None:
            on_z_update(z)
        y = y + x - z
        stop, residual, eps = stop_check(z, z_old, params.eps_abs, params.eps_rel)
        projector.adapt(residual, eps)
        log.record(k, residual, eps, eps_cg, cg_iters)
        if iterate_callback is not None:
            iterate_callback(z)
        # the returned iterate must come from a final-accuracy projection
        if stop and eps_cg <= projector.final_accuracy:
            log.converged = True
            break
    return z


def iop_solve(prox_f: ProxOperator, projector: DivergenceProjector,
              z0: VelocityField, log: ConvergenceLog, krylov: bool = False,
              eps_abs: float = 1e-3, eps_rel: float = 1e-3,
              max_iters: int = 500, krylov_error=None) -> VelocityField:
    """Iterated orthogonal projection: alternate prox_f and the projection.

    Valid only when prox_f is an orthogonal projection; optionally applies
    the Krylov correction each iteration.
    """
    if not prox_f.is_orthogonal_projection:
        raise ValueError("iop_solve requires an orthogonal-projection prox operator")
    log.method = log.method or "iop"
    z = z0.copy()
    if krylov and krylov_error is None:
        krylov_error = lambda f: (f - prox_f(1.0, f)).norm()
    z_km1 = None
    eps_km1 = None
    for k in range(1, max_iters + 1):
        x = prox_f(1.0, z)
        z_old = z
        z, cg_iters, eps_cg = projector.project(x)
        if krylov:
            z, eps_km1 = krylov_accelerate(z, z_km1, krylov_error, eps_km1)
            z_km1 = z
        stop, residual, eps = stop_check(z, z_old, eps_abs, eps_rel)
        projector.adapt(residual, eps)
        log.record(k, residual, eps, eps_cg, cg_iters)
        # the returned iterate must come from a final-accuracy projection
        if stop and eps_cg <= projector.final_accuracy:
            log.converged = True
            break
    return z
