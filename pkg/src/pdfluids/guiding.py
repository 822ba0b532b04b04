"""The fluid-guiding objective and its proximal operators.

The guided velocity x minimizes

    f(x) = ||B (x - u_target)||^2 + ||W (x - u_current)||^2

subject to zero divergence, where B is the obstacle-aware Gaussian blur and
W a diagonal matrix of per-face guiding weights (cell weights averaged onto
faces, larger entries meaning weaker guiding).  f is quadratic,
f(x) = 1/2 x^T A x + b^T x + c with A = 2(B^T B + W^2), so its prox is a
linear solve; the production path approximates the inverse of
M = A + sigma*I through one Sherman-Morrison-Woodbury step around the
diagonal part, with q = 2 B^T B (u_target - u_current) - sigma*u_current
precomputed once per time step.

Faces adjacent to SOLID cells carry no objective terms; every operator
passes them through unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .blur import blur_obstacle_aware
from .fields import (CellFlags, ScalarField, VelocityField,
                     cell_to_face_average, face_valid_mask)
from .optim import (AdmmParams, ConvergenceLog, PdParams, ProxOperator,
                    admm_solve, iop_solve, pd_solve)
from .pressure import BcTable, CgConfig, DivergenceProjector


@dataclass
class GuidingConfig:
    """Everything the guiding objective needs for one time step."""

    flags: CellFlags
    weights: ScalarField          # W, > 0 everywhere
    radius: ScalarField           # blur radii, >= 0 and 0 at SOLID
    u_target: VelocityField
    u_current: VelocityField
    blend_ratio: float = 0.5      # naive linear blend only
    use_b_squared: bool = False   # approximate B^T B by B B

    def __post_init__(self):
        if (self.weights.values <= 0).any():
            raise ValueError("guiding weights must be positive everywhere")
        if (self.radius.values < 0).any():
            raise ValueError("blur radius must be non-negative")
        if (self.radius.values[self.flags.solid] != 0).any():
            raise ValueError("blur radius must be zero at SOLID cells")
        if not (0.0 <= self.blend_ratio <= 1.0):
            raise ValueError("blend_ratio must lie in [0, 1]")

    @property
    def w_bar(self) -> float:
        """Mean guiding weight over fluid cells."""
        fluid = self.flags.fluid
        if not fluid.any():
            raise ValueError("no fluid cells")
        return float(self.weights.values[fluid].mean())

    def with_current(self, u_current: VelocityField) -> "GuidingConfig":
        return replace(self, u_current=u_current)


def split_scalar_field(dims, flags, left: float, right: float,
                       zero_at_solid: bool = False) -> ScalarField:
    """Cell field taking one value on the left half of the domain and
    another on the right (the split-domain test configuration)."""
    vals = np.where(np.arange(dims.nx)[:, None, None] < dims.nx // 2,
                    float(left), float(right))
    vals = np.broadcast_to(vals, dims.shape).copy()
    if zero_at_solid:
        vals[flags.solid] = 0.0
    return ScalarField(dims, vals)


class GuidingQuadratic:
    """Matrix-free quadratic form of the guiding objective.

    Provides A, b, c, the shifted system M = A + sigma*I, the precomputable
    q and diagonal-inverse factors, and the stacked least-squares operator.
    """

    def __init__(self, cfg: GuidingConfig):
        self.cfg = cfg
        d = cfg.flags.dims
        self.dims = d
        self.valid = {a: face_valid_mask(cfg.flags, a) for a in d.axes}
        self.w2 = {a: np.square(cell_to_face_average(cfg.weights, a))
                   for a in d.axes}

    # -- masking helpers ----------------------------------------------------
    def mask(self, vel: VelocityField) -> VelocityField:
        out = vel.copy()
        for a, arr in out.components():
            arr[~self.valid[a]] = 0.0
        return out

    def _wsq(self, vel: VelocityField) -> VelocityField:
        out = vel.copy()
        for a, arr in out.components():
            arr *= self.w2[a]
            arr[~self.valid[a]] = 0.0
        return out

    # -- operators ----------------------------------------------------------
    def apply_B(self, vel: VelocityField) -> VelocityField:
        return blur_obstacle_aware(vel, self.cfg.radius, self.cfg.flags)

    def apply_Bt(self, vel: VelocityField) -> VelocityField:
        if self.cfg.use_b_squared:
            return self.apply_B(vel)
        return blur_obstacle_aware(vel, self.cfg.radius, self.cfg.flags,
                                   transpose=True)

    def apply_BtB(self, vel: VelocityField) -> VelocityField:
        return self.mask(self.apply_Bt(self.apply_B(self.mask(vel))))

    def apply_A(self, vel: VelocityField) -> VelocityField:
        return 2.0 * (self.apply_BtB(vel) + self._wsq(vel))

    def b(self) -> VelocityField:
        return -2.0 * (self.apply_BtB(self.cfg.u_target)
                       + self._wsq(self.cfg.u_current))

    def c(self) -> float:
        ut, uc = self.cfg.u_target, self.cfg.u_current
        return ut.dot(self.apply_BtB(ut)) + uc.dot(self._wsq(uc))

    def apply_M(self, sigma: float, vel: VelocityField) -> VelocityField:
        masked = self.mask(vel)
        return self.apply_A(masked) + sigma * masked

    # -- prox precomputation -------------------------------------------------
    def q(self, sigma: float) -> VelocityField:
        return 2.0 * self.apply_BtB(self.cfg.u_target - self.cfg.u_current) \
            - sigma * self.mask(self.cfg.u_current)

    def gamma_diag(self, sigma: float) -> dict[int, np.ndarray]:
        """Per-face entries of (2 W^2 + sigma I)^-1."""
        return {a: 1.0 / (2.0 * self.w2[a] + sigma) for a in self.dims.axes}


@dataclass
class GuidingPrecompute:
    """Per-time-step cache for the approximate prox (q and the diagonal inverse)."""

    sigma: float
    q: VelocityField
    gamma: dict[int, np.ndarray]

    @classmethod
    def build(cls, quad: GuidingQuadratic, sigma: float) -> "GuidingPrecompute":
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        return cls(sigma, quad.q(sigma), quad.gamma_diag(sigma))


def prox_f_guiding(sigma: float, v: VelocityField, cfg: GuidingConfig,
                   precomputed: GuidingPrecompute | None = None,
                   quad: GuidingQuadratic | None = None) -> VelocityField:
    """Approximate guiding prox via the SMW inverse of M = A + sigma*I.

        x = u_current + gamma (sigma v + q) - 2 B^T B gamma^2 (sigma v + q)

    with gamma = (2 W^2 + sigma I)^-1 diagonal.  Faces outside the objective
    pass v through.
    """
    quad = quad if quad is not None else GuidingQuadratic(cfg)
    pre = precomputed if precomputed is not None else GuidingPrecompute.build(quad, sigma)
    if not math.isclose(pre.sigma, sigma):
        pre = GuidingPrecompute.build(quad, sigma)
    s = sigma * quad.mask(v) + pre.q
    g1 = s.copy()
    g2 = s.copy()
    for a, arr in g1.components():
        arr *= pre.gamma[a]
    for a, arr in g2.components():
        arr *= np.square(pre.gamma[a])
    out = quad.mask(cfg.u_current) + g1 - 2.0 * quad.apply_BtB(g2)
    for a, arr in out.components():
        inv = ~quad.valid[a]
        arr[inv] = v.component(a)[inv]
    return out


def prox_f_guiding_exact(sigma: float, v: VelocityField, cfg: GuidingConfig,
                         tol: float = 1e-10, max_iters: int = 4000,
                         quad: GuidingQuadratic | None = None) -> VelocityField:
    """Exact guiding prox: solve (A + sigma I) x = sigma v - b by CG.

    Reference path for the SMW approximation and for oracle comparisons.
    """
    quad = quad if quad is not None else GuidingQuadratic(cfg)
    rhs = sigma * quad.mask(v) - quad.b()
    x = _cg_velocity(lambda f: quad.apply_M(sigma, f), rhs, tol, max_iters)
    for a, arr in x.components():
        inv = ~quad.valid[a]
        arr[inv] = v.component(a)[inv]
    return x


def _cg_velocity(apply_op, rhs: VelocityField, tol: float, max_iters: int,
                 counter: list | None = None) -> VelocityField:
    """Plain CG over velocity fields for SPD operators."""
    x = VelocityField.zeros(rhs.dims)
    r = rhs.copy()
    bnorm = rhs.norm()
    if bnorm == 0.0:
        return x
    d = r.copy()
    rr = r.dot(r)
    for it in range(1, max_iters + 1):
        ad = apply_op(d)
        dad = d.dot(ad)
        if dad <= 0:
            break
        alpha = rr / dad
        x = x + alpha * d
        r = r - alpha * ad
        rr_new = r.dot(r)
        if counter is not None:
            counter.append(1)
        if math.sqrt(rr_new) <= tol * bnorm:
            return x
        d = r + (rr_new / rr) * d
        rr = rr_new
    raise RuntimeError(f"guiding CG did not converge in {max_iters} iterations "
                       f"(relative residual {math.sqrt(rr) / bnorm:.3e})")


def guiding_objective(x: VelocityField, cfg: GuidingConfig,
                      quad: GuidingQuadratic | None = None) -> float:
    """Value of ||B(x - u_target)||^2 + ||W(x - u_current)||^2 over the
    faces that carry objective terms (those not adjacent to SOLID)."""
    quad = quad if quad is not None else GuidingQuadratic(cfg)
    bt = quad.apply_B(quad.mask(x - cfg.u_target))
    total = 0.0
    for a, arr in bt.components():
        total += float(np.sum(np.square(arr[quad.valid[a]])))
    diff = x - cfg.u_current
    for a, arr in diff.components():
        total += float(np.sum(quad.w2[a][quad.valid[a]]
                              * np.square(arr[quad.valid[a]])))
    return total


class GuidingProx(ProxOperator):
    """SMW-approximate prox with the per-step precompute cached."""

    def __init__(self, cfg: GuidingConfig, sigma: float | None = None):
        self.cfg = cfg
        self.quad = GuidingQuadratic(cfg)
        self._pre = GuidingPrecompute.build(self.quad, sigma) if sigma else None

    def __call__(self, sigma, v):
        if self._pre is None or not math.isclose(self._pre.sigma, sigma):
            self._pre = GuidingPrecompute.build(self.quad, sigma)
        return prox_f_guiding(sigma, v, self.cfg, self._pre, self.quad)


class GuidingProxExact(ProxOperator):
    """CG-exact prox, used for oracle-grade solves."""

    def __init__(self, cfg: GuidingConfig, tol: float = 1e-10):
        self.cfg = cfg
        self.quad = GuidingQuadratic(cfg)
        self.tol = tol

    def __call__(self, sigma, v):
        return prox_f_guiding_exact(sigma, v, self.cfg, tol=self.tol, quad=self.quad)


class GuidingMinimizerProjection(ProxOperator):
    """Constant map onto the unconstrained minimizer of the objective.

    This is the orthogonal projection onto {argmin f} (a single point since
    W > 0 makes f strictly convex); it is what a naive alternating-projection
    treatment of guiding uses, and it generally does not reach the
    divergence-constrained minimizer.
    """

    is_orthogonal_projection = True

    def __init__(self, cfg: GuidingConfig, tol: float = 1e-10):
        self.cfg = cfg
        self.quad = GuidingQuadratic(cfg)
        rhs = -1.0 * self.quad.b()
        self._minimizer = _cg_velocity(self.quad.apply_A, rhs, tol, 4000)

    def __call__(self, sigma, v):
        out = self._minimizer.copy()
        for a, arr in out.components():
            inv = ~self.quad.valid[a]
            arr[inv] = v.component(a)[inv]
        return out


def default_guiding_params(w_bar: float) -> tuple[PdParams, AdmmParams]:
    """Step sizes tuned against the mean guiding weight.

    tau = 0.58 / w_bar, sigma = 2.44 / tau, theta = 0.3 for the primal-dual
    iteration, rho = 1.4 * w_bar^2 for ADMM.
    """
    if w_bar <= 0:
        raise ValueError("mean guiding weight must be positive")
    tau = 0.58 / w_bar
    return (PdParams(tau=tau, sigma=2.44 / tau, theta=0.3),
            AdmmParams(rho=1.4 * w_bar * w_bar))


def blend_linear(u_current: VelocityField, u_target: VelocityField,
                 ratio: float) -> VelocityField:
    """Naive baseline: r*u_current + (1-r)*u_target (caller projects)."""
    if not (0.0 <= ratio <= 1.0):
        raise ValueError("blend ratio must lie in [0, 1]")
    return ratio * u_current + (1.0 - ratio) * u_target


def blend_detail_preserving(u_current: VelocityField, u_target: VelocityField,
                            radius: ScalarField, flags: CellFlags) -> VelocityField:
    """Naive baseline keeping small scales: u_current - B u_current + u_target."""
    return u_current - blur_obstacle_aware(u_current, radius, flags) + u_target


def direct_least_squares(cfg: GuidingConfig, flags: CellFlags, tol: float = 1e-8,
                         max_iters: int = 200000,
                         log: ConvergenceLog | None = None) -> VelocityField:
    """Comparison baseline: solve the stacked system [A; D] x = [-b; 0] in the
    least-squares sense with CG on the normal equations.

    D is the divergence operator restricted to the objective faces (fixed
    faces contribute nothing).  Divergence of the result is only as small as
    the least-squares balance allows.
    """
    from .fields import divergence
    quad = GuidingQuadratic(cfg)
    d = flags.dims
    fluid = flags.fluid

    def apply_D(vel: VelocityField) -> np.ndarray:
        return divergence(quad.mask(vel), flags).values

    def apply_Dt(cellvals: np.ndarray) -> VelocityField:
        out = VelocityField.zeros(d)
        src = np.where(fluid, cellvals, 0.0) / d.h
        for axis in d.axes:
            arr = out.component(axis)
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[axis] = slice(None, -1)
            hi[axis] = slice(1, None)
            arr[tuple(hi)] += src
            arr[tuple(lo)] -= src
        return quad.mask(out)

    def normal_op(vel: VelocityField) -> VelocityField:
        return quad.apply_A(quad.apply_A(vel)) + apply_Dt(apply_D(vel))

    rhs = quad.apply_A(-1.0 * quad.b())
    counter: list = []
    x = _cg_velocity(normal_op, rhs, tol, max_iters, counter=counter)
    if log is not None:
        log.method = "direct-lsq"
        log.record(1, 0.0, tol, tol, len(counter))
        log.converged = True
    for a, arr in x.components():
        inv = ~quad.valid[a]
        arr[inv] = cfg.u_current.component(a)[inv]
    return x


def guide_step(u_current: VelocityField, cfg: GuidingConfig, method: str = "pd",
               flags: CellFlags | None = None,
               pd_params: PdParams | None = None,
               admm_params: AdmmParams | None = None,
               cg: CgConfig | None = None,
               log: ConvergenceLog | None = None,
               exact_prox: bool = False) -> VelocityField:
    """One guided projection: replace the plain pressure projection with a
    proximal solve of the guiding objective under the divergence constraint.

    method "pd" (default) or "admm" for production, "iop" only to
    demonstrate how alternating projections mishandle guiding, "direct" for
    the stacked least-squares baseline.
    """
    cfg = cfg.with_current(u_current)
    flags = flags if flags is not None else cfg.flags
    log = log if log is not None else ConvergenceLog()
    if method == "direct":
        return direct_least_squares(cfg, flags, log=log)
    bc = BcTable.from_flags(flags)
    projector = DivergenceProjector(flags, bc, cg)
    pd_default, admm_default = default_guiding_params(cfg.w_bar)
    if method == "pd":
        params = pd_params if pd_params is not None else pd_default
        prox = GuidingProxExact(cfg) if exact_prox else GuidingProx(cfg, params.sigma)
        return pd_solve(prox, projector, params, u_current, log)
    if method == "admm":
        params = admm_params if admm_params is not None else admm_default
        prox = GuidingProxExact(cfg) if exact_prox else GuidingProx(cfg, params.rho)
        return admm_solve(prox, projector, params, u_current, log)
    if method == "iop":
        proj_f = GuidingMinimizerProjection(cfg)
        return iop_solve(proj_f, projector, u_current, log)
    raise ValueError(f"unknown guiding method {method!r}")
