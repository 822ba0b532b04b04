"""Scene builders and time-stepping drivers.

Smoke scenes advance an Eulerian density/velocity pair with buoyancy,
semi-Lagrangian advection and a (possibly guided) pressure stage.  Liquid
scenes carry marker particles with a PIC/FLIP transfer around the pressure
stage, which is selectable between a regular no-penetration projection and
the separating-wall solvers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fields import (CellFlags, CellType, GridDims, ScalarField, VelocityField,
                     _interp_component, advect_semi_lagrangian,
                     cell_to_face_average, divergence, face_valid_mask,
                     fluid_adjacent_face_mask)
from .guiding import GuidingConfig, guide_step, split_scalar_field
from .optim import AdmmParams, ConvergenceLog, PdParams
from .pressure import BcTable, CgConfig, project
from .separating import (BcState, solve_separating_accelerated,
                         solve_separating_standard)

CFL_LIMIT = 5.0

SCENE_NAMES = ("circular", "star", "plume", "tornado", "dam", "hydrostatic",
               "obstacle-box", "divergent")

BC_MODES = ("regular", "separating-standard", "separating-accelerated")


@dataclass
class SceneSpec:
    """Parameterization of the built-in scenes."""

    name: str
    nx: int = 64
    ny: int = 64
    nz: int = 1
    h: float | None = None          # defaults to 1/nx
    dt: float | None = None
    seed: int = 0
    # guiding controls (split left/right domain halves)
    w_left: float = 1.0
    w_right: float = 1.0
    radius_left: float = 1.0
    radius_right: float = 1.0
    blend_ratio: float = 0.5
    # scene-specific shape parameters
    omega: float = 1.0              # target angular speed
    star_lobes: int = 5
    star_amp: float = 0.5
    updraft: float = 0.1            # tornado vertical component
    fill_fraction: float = 0.3      # dam width fraction
    fill_height: float = 0.8        # dam / hydrostatic column height fraction
    obstacle: tuple | None = None   # fractional (x0, y0, x1, y1) box
    emitter: tuple | None = None    # fractional (x0, y0, x1, y1) box
    gravity: float = 9.81
    buoyancy: float = 4.0
    particles_per_cell: int | None = None

    def __post_init__(self):
        if self.name not in SCENE_NAMES:
            raise ValueError(f"unknown scene {self.name!r}; "
                             f"expected one of {SCENE_NAMES}")
        if self.h is None:
            self.h = 1.0 / self.nx
        if self.dt is None:
            self.dt = 0.05 if self.name not in ("dam", "hydrostatic") else 0.01
        if self.particles_per_cell is None:
            self.particles_per_cell = 4 if self.nz == 1 else 8

    @property
    def dims(self) -> GridDims:
        return GridDims(self.nx, self.ny, self.nz, self.h)

    @property
    def is_liquid(self) -> bool:
        return self.name in ("dam", "hydrostatic")


@dataclass
class SceneState:
    """Everything a running scene carries between frames."""

    spec: SceneSpec
    flags: CellFlags
    solid_mask: np.ndarray          # static obstacles, never changes
    vel: VelocityField
    density: ScalarField | None = None
    particles_pos: np.ndarray | None = None   # (N, 3) meters
    particles_vel: np.ndarray | None = None   # (N, 3)
    frame: int = 0
    last_log: ConvergenceLog | None = None

    @property
    def dt(self) -> float:
        return self.spec.dt

    def copy(self) -> "SceneState":
        return SceneState(
            spec=self.spec, flags=self.flags.copy(),
            solid_mask=self.solid_mask.copy(), vel=self.vel.copy(),
            density=self.density.copy() if self.density is not None else None,
            particles_pos=None if self.particles_pos is None else self.particles_pos.copy(),
            particles_vel=None if self.particles_vel is None else self.particles_vel.copy(),
            frame=self.frame)


def _fractional_box(dims: GridDims, box) -> tuple[slice, slice, slice]:
    x0, y0, x1, y1 = box
    return (slice(int(x0 * dims.nx), max(int(x1 * dims.nx), int(x0 * dims.nx) + 1)),
            slice(int(y0 * dims.ny), max(int(y1 * dims.ny), int(y0 * dims.ny) + 1)),
            slice(None))


def _zero_solid_faces(vel: VelocityField, flags: CellFlags):
    for axis, arr in vel.components():
        arr[~face_valid_mask(flags, axis)] = 0.0


def _circular_target(dims: GridDims, flags: CellFlags, omega: float,
                     modulation=None) -> VelocityField:
    """Counterclockwise rotation about the domain center, zero on faces next
    to solids; optionally scaled by an angular modulation function."""
    from .fields import face_centers
    cx = 0.5 * dims.nx * dims.h
    cy = 0.5 * dims.ny * dims.h
    u_t = VelocityField.zeros(dims)
    X, Y, _ = face_centers(dims, 0)
    u_t.u[...] = -omega * (Y - cy)
    if modulation is not None:
        u_t.u *= modulation(X - cx, Y - cy)
    X, Y, _ = face_centers(dims, 1)
    u_t.v[...] = omega * (X - cx)
    if modulation is not None:
        u_t.v *= modulation(X - cx, Y - cy)
    _zero_solid_faces(u_t, flags)
    return u_t


def _radial_target(dims: GridDims, flags: CellFlags, rate: float) -> VelocityField:
    """Purely divergent outflow from the center (guiding stress test)."""
    from .fields import face_centers
    cx = 0.5 * dims.nx * dims.h
    cy = 0.5 * dims.ny * dims.h
    u_t = VelocityField.zeros(dims)
    X, Y, _ = face_centers(dims, 0)
    u_t.u[...] = rate * (X - cx)
    X, Y, _ = face_centers(dims, 1)
    u_t.v[...] = rate * (Y - cy)
    _zero_solid_faces(u_t, flags)
    return u_t


def _tornado_target(dims: GridDims, flags: CellFlags, omega: float,
                    updraft: float) -> VelocityField:
    """Swirl around the vertical (y) axis with a small upward component."""
    from .fields import face_centers
    cx = 0.5 * dims.nx * dims.h
    cz = 0.5 * dims.nz * dims.h
    u_t = VelocityField.zeros(dims)
    X, _, Z = face_centers(dims, 0)
    u_t.u[...] = -omega * (Z - cz)
    X, _, Z = face_centers(dims, 1)
    u_t.v[...] = updraft
    X, _, Z = face_centers(dims, 2)
    u_t.w[...] = omega * (X - cx)
    _zero_solid_faces(u_t, flags)
    return u_t


def _seed_particles(flags: CellFlags, fluid_mask: np.ndarray, per_cell: int,
                    rng) -> np.ndarray:
    d = flags.dims
    cells = np.argwhere(fluid_mask)
    n_side = max(int(round(math.sqrt(per_cell))), 1) if d.is_2d else \
        max(int(round(per_cell ** (1.0 / 3.0))), 1)
    offs = (np.arange(n_side) + 0.5) / n_side
    if d.is_2d:
        ox, oy = np.meshgrid(offs, offs, indexing="ij")
        offsets = np.stack([ox.ravel(), oy.ravel(),
                            np.full(ox.size, 0.5)], axis=1)
    else:
        ox, oy, oz = np.meshgrid(offs, offs, offs, indexing="ij")
        offsets = np.stack([ox.ravel(), oy.ravel(), oz.ravel()], axis=1)
    base = cells[:, None, :] + offsets[None, :, :]
    pos = base.reshape(-1, 3) * d.h
    jitter = rng.uniform(-0.2, 0.2, size=pos.shape) * (d.h / n_side)
    if d.is_2d:
        jitter[:, 2] = 0.0
    return pos + jitter


def build_scene(spec: SceneSpec):
    """Deterministic initial state, plus a guiding configuration for the
    scenes that define a target velocity."""
    d = spec.dims
    rng = np.random.default_rng(spec.seed)
    flags = CellFlags.closed_box(d)
    if spec.obstacle is not None:
        flags.values[_fractional_box(d, spec.obstacle)] = CellType.SOLID
    solid_mask = flags.solid.copy()
    state = SceneState(spec=spec, flags=flags, solid_mask=solid_mask,
                       vel=VelocityField.zeros(d))
    cfg = None

    if spec.is_liquid:
        fluid = np.zeros(d.shape, dtype=bool)
        if spec.name == "dam":
            ncols = max(int((d.nx - 2) * spec.fill_fraction), 1)
            nrows = max(int((d.ny - 2) * spec.fill_height), 1)
            fluid[1:1 + ncols, 1:1 + nrows, :] = True
        else:  # hydrostatic: full-width resting column
            nrows = max(int((d.ny - 2) * spec.fill_height), 1)
            fluid[1:-1, 1:1 + nrows, :] = True
        fluid &= ~solid_mask
        state.particles_pos = _seed_particles(flags, fluid, spec.particles_per_cell, rng)
        state.particles_vel = np.zeros_like(state.particles_pos)
        state.flags = flags_from_particles(state)
        return state, None

    # smoke scenes
    state.density = ScalarField.zeros(d)
    if spec.emitter is not None:
        state.density.values[_fractional_box(d, spec.emitter)] = 1.0
    else:
        cx, cy = int(0.5 * d.nx), int(0.22 * d.ny)
        r = max(d.nx // 12, 2)
        X, Y, Z = np.meshgrid(np.arange(d.nx), np.arange(d.ny),
                              np.arange(d.nz), indexing="ij")
        blob = (X - cx) ** 2 + (Y - cy) ** 2 <= r * r
        state.density.values[blob & ~solid_mask] = 1.0

    weights = split_scalar_field(d, flags, spec.w_left, spec.w_right)
    radius = split_scalar_field(d, flags, spec.radius_left, spec.radius_right,
                                zero_at_solid=True)
    if spec.name == "circular":
        u_t = _circular_target(d, flags, spec.omega)
    elif spec.name == "star":
        k, a = spec.star_lobes, spec.star_amp

        def modulation(dx, dy):
            theta = np.arctan2(dy, dx)
            return 1.0 + a * np.cos(k * theta)

        u_t = _circular_target(d, flags, spec.omega, modulation)
    elif spec.name == "tornado":
        u_t = _tornado_target(d, flags, spec.omega, spec.updraft)
    elif spec.name == "divergent":
        u_t = _radial_target(d, flags, spec.omega)
    elif spec.name in ("plume", "obstacle-box"):
        u_t = None
    else:  # pragma: no cover
        raise ValueError(spec.name)

    if u_t is not None:
        cfg = GuidingConfig(flags=flags, weights=weights, radius=radius,
                            u_target=u_t, u_current=state.vel.copy(),
                            blend_ratio=spec.blend_ratio)
    return state, cfg


# ---------------------------------------------------------------------------
# smoke stepping

def _cfl_dt(vel: VelocityField, dt: float, h: float) -> float:
    """Clamp the step so no sample moves more than CFL_LIMIT cells."""
    vmax = vel.max_abs()
    if vmax * dt / h > CFL_LIMIT:
        return CFL_LIMIT * h / vmax
    return dt


def add_buoyancy(state: SceneState):
    """f = beta * density * y-hat applied to y-faces next to fluid."""
    beta = state.spec.buoyancy
    dens_face = cell_to_face_average(state.density, 1)
    m = fluid_adjacent_face_mask(state.flags, 1)
    state.vel.v[m] += state.dt * beta * dens_face[m]


def smoke_step(state: SceneState, cfg: GuidingConfig | None = None,
               method: str = "pd", pd_params: PdParams | None = None,
               admm_params: AdmmParams | None = None,
               cg: CgConfig | None = None,
               exact_prox: bool = False) -> SceneState:
    """One smoke frame: buoyancy, advection, then the guided projection (or a
    plain one when no guiding configuration is given)."""
    spec = state.spec
    if state.density is None:
        raise ValueError("smoke_step needs a smoke scene")
    if spec.emitter is not None:
        state.density.values[_fractional_box(state.flags.dims, spec.emitter)] = 1.0
    add_buoyancy(state)
    _zero_solid_faces(state.vel, state.flags)
    dt = _cfl_dt(state.vel, state.dt, spec.h)
    vel_adv = advect_semi_lagrangian(state.vel, state.vel, dt, state.flags)
    state.density = advect_semi_lagrangian(state.density, state.vel, dt, state.flags)
    np.maximum(state.density.values, 0.0, out=state.density.values)
    u_c = vel_adv
    log = ConvergenceLog()
    if cfg is None:
        bc = BcTable.from_flags(state.flags)
        eps = cg.eps_final if cg is not None else 1e-5
        state.vel = project(u_c, state.flags, bc, eps)
    else:
        state.vel = guide_step(u_c, cfg, method=method, pd_params=pd_params,
                               admm_params=admm_params, cg=cg, log=log,
                               exact_prox=exact_prox)
    state.last_log = log
    state.frame += 1
    return state


def angular_momentum(state: SceneState) -> float:
    """z component of sum(r x u) over fluid cells, about the domain center."""
    d = state.flags.dims
    uc = 0.5 * (state.vel.u[:-1, :, :] + state.vel.u[1:, :, :])
    vc = 0.5 * (state.vel.v[:, :-1, :] + state.vel.v[:, 1:, :])
    X, Y, _ = np.meshgrid((np.arange(d.nx) + 0.5) * d.h,
                          (np.arange(d.ny) + 0.5) * d.h,
                          (np.arange(d.nz) + 0.5) * d.h, indexing="ij")
    rx = X - 0.5 * d.nx * d.h
    ry = Y - 0.5 * d.ny * d.h
    lz = rx * vc - ry * uc
    return float(lz[state.flags.fluid].sum())


# ---------------------------------------------------------------------------
# liquid stepping (PIC/FLIP)

FLIP_BLEND = 0.95


def flags_from_particles(state: SceneState) -> CellFlags:
    d = state.spec.dims
    vals = np.full(d.shape, CellType.EMPTY, dtype=np.uint8)
    vals[state.solid_mask] = CellType.SOLID
    idx = np.floor(state.particles_pos / d.h).astype(np.intp)
    for a in range(3):
        np.clip(idx[:, a], 0, d.shape[a] - 1, out=idx[:, a])
    occupied = np.zeros(d.shape, dtype=bool)
    occupied[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    vals[occupied & ~state.solid_mask] = CellType.FLUID
    return CellFlags(d, vals)


def _component_grid_coords(pos: np.ndarray, axis: int, dims: GridDims):
    g = []
    for a in range(3):
        off = 0.0 if a == axis else 0.5
        g.append(pos[:, a] / dims.h - off)
    return g


def particles_to_grid(state: SceneState) -> VelocityField:
    """Bilinear scatter of particle velocities onto the staggered grid."""
    d = state.spec.dims
    vel = VelocityField.zeros(d)
    for axis, arr in vel.components():
        gx, gy, gz = _component_grid_coords(state.particles_pos, axis, d)
        acc = np.zeros(arr.shape)
        wsum = np.zeros(arr.shape)
        gs = [np.clip(g, 0.0, arr.shape[a] - 1.0)
              for a, g in enumerate((gx, gy, gz))]
        i0 = [np.floor(g).astype(np.intp) for g in gs]
        fr = [g - i for g, i in zip(gs, i0)]
        i1 = [np.minimum(i + 1, arr.shape[a] - 1) for a, i in enumerate(i0)]
        pv = state.particles_vel[:, axis]
        taps_z = ((i0[2], 1 - fr[2]), (i1[2], fr[2])) if not d.is_2d else \
            ((np.zeros_like(i0[0]), 1.0),)
        for ax_, wx in ((i0[0], 1 - fr[0]), (i1[0], fr[0])):
            for ay_, wy in ((i0[1], 1 - fr[1]), (i1[1], fr[1])):
                for az_, wz in taps_z:
                    w = wx * wy * wz
                    np.add.at(acc, (ax_, ay_, az_), w * pv)
                    np.add.at(wsum, (ax_, ay_, az_), w)
        nz = wsum > 0
        arr[nz] = acc[nz] / wsum[nz]
    return vel


def sample_at_particles(vel: VelocityField, pos: np.ndarray) -> np.ndarray:
    out = np.zeros_like(pos)
    for axis, arr in vel.components():
        out[:, axis] = _interp_component(arr, axis, vel.dims,
                                         pos[:, 0], pos[:, 1], pos[:, 2])
    return out


def extrapolate_velocity(vel: VelocityField, flags: CellFlags,
                         layers: int = 2) -> VelocityField:
    """Spread face values into the empty region by averaging valid
    neighbours, `layers` cells deep; wall faces are left alone."""
    out = vel.copy()
    for axis, arr in out.components():
        known = fluid_adjacent_face_mask(flags, axis)
        frozen = ~face_valid_mask(flags, axis)
        known = known | frozen
        for _ in range(layers):
            acc = np.zeros(arr.shape)
            cnt = np.zeros(arr.shape)
            for a in vel.dims.axes:
                for s in (1, -1):
                    dst = [slice(None)] * 3
                    src = [slice(None)] * 3
                    if s > 0:
                        dst[a] = slice(1, None)
                        src[a] = slice(None, -1)
                    else:
                        dst[a] = slice(None, -1)
                        src[a] = slice(1, None)
                    dst, src = tuple(dst), tuple(src)
                    acc[dst] += np.where(known[src], arr[src], 0.0)
                    cnt[dst] += known[src]
            grow = (~known) & (cnt > 0) & ~frozen
            arr[grow] = acc[grow] / cnt[grow]
            known = known | grow
    return out


def _clamp_particles(state: SceneState, pos: np.ndarray,
                     vel: np.ndarray | None = None) -> np.ndarray:
    """Keep particles inside the open interior; revert moves that ended
    inside interior obstacles.  When a particle hits the wall box its
    wall-ward velocity component is cancelled (otherwise the FLIP memory
    keeps pressing it against the wall for many frames)."""
    d = state.spec.dims
    h = d.h
    eps = 1e-4 * h
    lo = [h + eps, h + eps, eps if d.is_2d else h + eps]
    hi = [(d.nx - 1) * h - eps, (d.ny - 1) * h - eps,
          d.nz * h - eps if d.is_2d else (d.nz - 1) * h - eps]
    for a in range(3):
        if vel is not None:
            hit_lo = pos[:, a] < lo[a]
            hit_hi = pos[:, a] > hi[a]
            vel[hit_lo, a] = np.maximum(vel[hit_lo, a], 0.0)
            vel[hit_hi, a] = np.minimum(vel[hit_hi, a], 0.0)
        np.clip(pos[:, a], lo[a], hi[a], out=pos[:, a])
    idx = np.floor(pos / h).astype(np.intp)
    for a in range(3):
        np.clip(idx[:, a], 0, d.shape[a] - 1, out=idx[:, a])
    stuck = state.solid_mask[idx[:, 0], idx[:, 1], idx[:, 2]]
    if stuck.any():
        pos[stuck] = state.particles_pos[stuck]
    return pos


def liquid_begin_step(state: SceneState):
    """Particle transfer, flag update and gravity; returns the intermediate
    grid velocity and the pre-force copy used for the FLIP delta."""
    state.flags = flags_from_particles(state)
    vel = particles_to_grid(state)
    # transfer taps can spill momentum onto faces with no fluid neighbour
    # (inside walls, into the air); those DOFs carry no meaning and stay zero
    for axis, arr in vel.components():
        arr[~fluid_adjacent_face_mask(state.flags, axis)] = 0.0
    vel_old = vel.copy()
    m = fluid_adjacent_face_mask(state.flags, 1)
    vel.v[m] -= state.spec.gravity * state.dt
    return vel, vel_old


def liquid_pressure_solve(vel: VelocityField, flags: CellFlags, mode: str,
                          cg: CgConfig | None = None,
                          bc_params: PdParams | None = None,
                          state: BcState | None = None,
                          log: ConvergenceLog | None = None) -> VelocityField:
    """Pressure stage of a liquid step under the selected wall treatment."""
    if mode not in BC_MODES:
        raise ValueError(f"unknown bc mode {mode!r}; expected one of {BC_MODES}")
    cg = cg if cg is not None else CgConfig()
    log = log if log is not None else ConvergenceLog()
    if mode == "regular":
        out = vel.copy()
        _zero_solid_faces(out, flags)
        bc = BcTable.from_flags(flags)
        from .pressure import PoissonSystem
        system = PoissonSystem(flags, bc)
        div = divergence(out, flags)
        b = system.prepare_rhs(-div.values)
        p, iters = system.cg(b, cg.eps_final, cg.max_cg_iters,
                             inf_tol=10.0 * cg.eps_final)
        from .pressure import subtract_gradient
        out = subtract_gradient(out, ScalarField(flags.dims, p), flags, bc)
        log.method = "regular"
        log.record(1, 0.0, 0.0, cg.eps_final, iters)
        log.converged = True
        return out
    if mode == "separating-standard":
        return solve_separating_standard(vel, flags, params=bc_params,
                                         state=state, cg=cg, log=log)
    return solve_separating_accelerated(vel, flags, eps_cg=cg.eps_final,
                                        state=state, log=log)


def liquid_finish_step(state: SceneState, vel_new: VelocityField,
                       vel_old: VelocityField):
    """FLIP/PIC particle update, velocity extrapolation and advection."""
    d = state.spec.dims
    vel_ext = extrapolate_velocity(vel_new, state.flags)
    # extrapolate the pre-force field the same way so the FLIP delta near the
    # surface measures physical acceleration, not the extrapolation pattern
    old_ext = extrapolate_velocity(vel_old, state.flags)
    pic = sample_at_particles(vel_ext, state.particles_pos)
    delta = sample_at_particles(vel_ext - old_ext, state.particles_pos)
    flip = state.particles_vel + delta
    state.particles_vel = FLIP_BLEND * flip + (1.0 - FLIP_BLEND) * pic
    dt = _cfl_dt(vel_ext, state.dt, d.h)
    mid = state.particles_pos + 0.5 * dt * sample_at_particles(vel_ext, state.particles_pos)
    mid = _clamp_particles(state, mid.copy())
    pos = state.particles_pos + dt * sample_at_particles(vel_ext, mid)
    state.particles_pos = _clamp_particles(state, pos, state.particles_vel)
    state.vel = vel_new
    state.frame += 1


def liquid_step(state: SceneState, mode: str = "regular",
                cg: CgConfig | None = None,
                bc_params: PdParams | None = None,
                bc_state: BcState | None = None) -> SceneState:
    """One liquid frame under the selected boundary treatment."""
    if state.particles_pos is None:
        raise ValueError("liquid_step needs a particle scene")
    vel, vel_old = liquid_begin_step(state)
    log = ConvergenceLog()
    vel_new = liquid_pressure_solve(vel, state.flags, mode, cg=cg,
                                    bc_params=bc_params, state=bc_state, log=log)
    state.last_log = log
    liquid_finish_step(state, vel_new, vel_old)
    return state


def ceiling_contact_cells(flags: CellFlags) -> int:
    """FLUID cells in the row right below the top solid ring."""
    return int(flags.fluid[:, -2, :].sum())


def upsampled_target(coarse_vel: VelocityField, factor: int, fine_spec: SceneSpec,
                     state: SceneState) -> GuidingConfig:
    """Guiding configuration whose target is a refined coarse velocity.

    The workflow behind resimulation: run a coarse scene saving velocities,
    then guide a fine run toward the upsampled frames.
    """
    from .fields import upsample
    u_t = upsample(coarse_vel, factor)
    if u_t.dims.shape != state.flags.dims.shape:
        raise ValueError(f"upsampled target {u_t.dims.shape} does not match "
                         f"the fine grid {state.flags.dims.shape}")
    _zero_solid_faces(u_t, state.flags)
    d = state.flags.dims
    weights = split_scalar_field(d, state.flags, fine_spec.w_left, fine_spec.w_right)
    radius = split_scalar_field(d, state.flags, fine_spec.radius_left,
                                fine_spec.radius_right, zero_at_solid=True)
    return GuidingConfig(flags=state.flags, weights=weights, radius=radius,
                         u_target=u_t, u_current=state.vel.copy(),
                         blend_ratio=fine_spec.blend_ratio)
