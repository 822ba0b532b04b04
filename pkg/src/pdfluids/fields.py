"""Staggered-grid containers and the discrete operators built on them.

Velocity lives on cell faces (MAC layout), scalars at cell centers.  All
arrays are float64 and indexed (i, j, k) with i along x; a grid with nz=1
is the 2D configuration and runs through the same code paths with the
z direction inactive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np


class CellType(IntEnum):
    FLUID = 0
    SOLID = 1
    EMPTY = 2


@dataclass(frozen=True)
class GridDims:
    """Cell counts and the uniform cell width h (meters)."""

    nx: int
    ny: int
    nz: int = 1
    h: float = 1.0

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"grid needs nx, ny >= 4, got {self.nx}x{self.ny}")
        if self.nz < 1:
            raise ValueError("nz must be >= 1")
        if not self.h > 0:
            raise ValueError("cell width h must be positive")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def cell_count(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def is_2d(self) -> bool:
        return self.nz == 1

    @property
    def axes(self) -> tuple[int, ...]:
        """Active axes: (0, 1) in 2D, (0, 1, 2) in 3D."""
        return (0, 1) if self.nz == 1 else (0, 1, 2)

    def face_shape(self, axis: int) -> tuple[int, int, int]:
        s = list(self.shape)
        s[axis] += 1
        return tuple(s)


def _check_dims(a, b):
    if a.dims != b.dims:
        raise ValueError(f"dimension mismatch: {a.dims} vs {b.dims}")


class CellFlags:
    """Per-cell FLUID/SOLID/EMPTY tags."""

    def __init__(self, dims: GridDims, values: np.ndarray):
        values = np.asarray(values, dtype=np.uint8)
        if values.shape != dims.shape:
            raise ValueError("flag array shape does not match dims")
        if not np.isin(values, (CellType.FLUID, CellType.SOLID, CellType.EMPTY)).all():
            raise ValueError("flags must be FLUID, SOLID or EMPTY")
        self.dims = dims
        self.values = values

    @classmethod
    def open_box(cls, dims: GridDims) -> "CellFlags":
        """All cells FLUID (scene overrides the solid boundary ring)."""
        return cls(dims, np.full(dims.shape, CellType.FLUID, dtype=np.uint8))

    @classmethod
    def closed_box(cls, dims: GridDims) -> "CellFlags":
        """FLUID interior with a SOLID ring on every domain wall."""
        v = np.full(dims.shape, CellType.FLUID, dtype=np.uint8)
        v[0, :, :] = v[-1, :, :] = CellType.SOLID
        v[:, 0, :] = v[:, -1, :] = CellType.SOLID
        if not dims.is_2d:
            v[:, :, 0] = v[:, :, -1] = CellType.SOLID
        return cls(dims, v)

    def copy(self) -> "CellFlags":
        return CellFlags(self.dims, self.values.copy())

    @property
    def fluid(self) -> np.ndarray:
        return self.values == CellType.FLUID

    @property
    def solid(self) -> np.ndarray:
        return self.values == CellType.SOLID

    @property
    def empty(self) -> np.ndarray:
        return self.values == CellType.EMPTY

    def __eq__(self, other):
        return isinstance(other, CellFlags) and self.dims == other.dims and \
            np.array_equal(self.values, other.values)


class ScalarField:
    """Cell-centered scalar field (pressure, smoke density, weights, radii)."""

    def __init__(self, dims: GridDims, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != dims.shape:
            raise ValueError("scalar array shape does not match dims")
        self.dims = dims
        self.values = values

    @classmethod
    def zeros(cls, dims: GridDims) -> "ScalarField":
        return cls(dims, np.zeros(dims.shape))

    @classmethod
    def full(cls, dims: GridDims, value: float) -> "ScalarField":
        return cls(dims, np.full(dims.shape, float(value)))

    def copy(self) -> "ScalarField":
        return ScalarField(self.dims, self.values.copy())

    def validate_finite(self):
        if not np.isfinite(self.values).all():
            raise ValueError("scalar field contains non-finite values")

    def norm(self) -> float:
        return float(np.linalg.norm(self.values.ravel()))


class VelocityField:
    """Face-centered velocity: u on x-faces, v on y-faces, w on z-faces.

    The z-face array is always allocated (length nx*ny*(nz+1)); with nz=1 it
    is inactive and stays zero.
    """

    def __init__(self, dims: GridDims, u: np.ndarray, v: np.ndarray, w: np.ndarray):
        self.dims = dims
        self.u = np.asarray(u, dtype=np.float64)
        self.v = np.asarray(v, dtype=np.float64)
        self.w = np.asarray(w, dtype=np.float64)
        for axis, arr in enumerate((self.u, self.v, self.w)):
            if arr.shape != dims.face_shape(axis):
                raise ValueError(f"face array {axis} has shape {arr.shape}, "
                                 f"expected {dims.face_shape(axis)}")

    @classmethod
    def zeros(cls, dims: GridDims) -> "VelocityField":
        return cls(dims, np.zeros(dims.face_shape(0)), np.zeros(dims.face_shape(1)),
                   np.zeros(dims.face_shape(2)))

    def copy(self) -> "VelocityField":
        return VelocityField(self.dims, self.u.copy(), self.v.copy(), self.w.copy())

    def component(self, axis: int) -> np.ndarray:
        return (self.u, self.v, self.w)[axis]

    def components(self):
        """(axis, face array) pairs for the active axes."""
        return [(a, self.component(a)) for a in self.dims.axes]

    @property
    def n_dof(self) -> int:
        """Total velocity degrees of freedom (active-axis face samples)."""
        return sum(arr.size for _, arr in self.components())

    def validate_finite(self):
        for _, arr in self.components():
            if not np.isfinite(arr).all():
                raise ValueError("velocity field contains non-finite values")

    def as_flat(self) -> np.ndarray:
        """Active components concatenated into one vector (x block first)."""
        return np.concatenate([arr.ravel() for _, arr in self.components()])

    def set_flat(self, vec: np.ndarray):
        off = 0
        for _, arr in self.components():
            arr.ravel()[:] = vec[off:off + arr.size]
            off += arr.size
        if off != vec.size:
            raise ValueError("flat vector length does not match field")

    def dot(self, other: "VelocityField") -> float:
        _check_dims(self, other)
        return float(sum(np.vdot(a, other.component(ax)) for ax, a in self.components()))

    def norm(self) -> float:
        return math.sqrt(max(self.dot(self), 0.0))

    def max_abs(self) -> float:
        return max(float(np.abs(arr).max()) for _, arr in self.components())

    def __add__(self, other):
        _check_dims(self, other)
        return VelocityField(self.dims, self.u + other.u, self.v + other.v, self.w + other.w)

    def __sub__(self, other):
        _check_dims(self, other)
        return VelocityField(self.dims, self.u - other.u, self.v - other.v, self.w - other.w)

    def __mul__(self, s):
        s = float(s)
        return VelocityField(self.dims, self.u * s, self.v * s, self.w * s)

    __rmul__ = __mul__


# ---------------------------------------------------------------------------
# geometry helpers

def cell_centers(dims: GridDims):
    """Physical (X, Y, Z) coordinate arrays of cell centers, shape dims.shape."""
    h = dims.h
    x = (np.arange(dims.nx) + 0.5) * h
    y = (np.arange(dims.ny) + 0.5) * h
    z = (np.arange(dims.nz) + 0.5) * h
    return np.meshgrid(x, y, z, indexing="ij")

def face_centers(dims: GridDims, axis: int):
    """Physical coordinate arrays of face centers for one velocity component."""
    h = dims.h
    coords = []
    for a, n in enumerate(dims.shape):
        if a == axis:
            coords.append(np.arange(n + 1) * h)
        else:
            coords.append((np.arange(n) + 0.5) * h)
    return np.meshgrid(*coords, indexing="ij")


def cell_to_face_average(scalar: ScalarField, axis: int) -> np.ndarray:
    """Sample a cell-centered field onto the faces of one axis.

    Interior faces average the two adjacent cells; faces on the domain
    boundary copy the single neighbouring cell.
    """
    c = scalar.values
    out = np.empty(scalar.dims.face_shape(axis))
    inner = [slice(None)] * 3
    lo = [slice(None)] * 3
    hi = [slice(None)] * 3
    inner[axis] = slice(1, -1)
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    out[tuple(inner)] = 0.5 * (c[tuple(lo)] + c[tuple(hi)])
    first = [slice(None)] * 3
    last = [slice(None)] * 3
    first[axis] = 0
    last[axis] = -1
    cfirst = [slice(None)] * 3
    clast = [slice(None)] * 3
    cfirst[axis] = 0
    clast[axis] = -1
    out[tuple(first)] = c[tuple(cfirst)]
    out[tuple(last)] = c[tuple(clast)]
    return out


def face_valid_mask(flags: CellFlags, axis: int) -> np.ndarray:
    """Faces not adjacent to any SOLID cell (boundary faces use their one cell)."""
    ns = flags.values != CellType.SOLID
    out = np.empty(flags.dims.face_shape(axis), dtype=bool)
    inner = [slice(None)] * 3
    lo = [slice(None)] * 3
    hi = [slice(None)] * 3
    inner[axis] = slice(1, -1)
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    out[tuple(inner)] = ns[tuple(lo)] & ns[tuple(hi)]
    first = [slice(None)] * 3
    last = [slice(None)] * 3
    first[axis] = 0
    last[axis] = -1
    cfirst = [slice(None)] * 3
    clast = [slice(None)] * 3
    cfirst[axis] = 0
    clast[axis] = -1
    out[tuple(first)] = ns[tuple(cfirst)]
    out[tuple(last)] = ns[tuple(clast)]
    return out


def fluid_adjacent_face_mask(flags: CellFlags, axis: int) -> np.ndarray:
    """Faces with at least one FLUID neighbour."""
    fl = flags.fluid
    out = np.zeros(flags.dims.face_shape(axis), dtype=bool)
    lo = [slice(None)] * 3
    hi = [slice(None)] * 3
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    out[tuple(lo)] |= fl
    out[tuple(hi)] |= fl
    return out


# ---------------------------------------------------------------------------
# divergence

def divergence(vel: VelocityField, flags: CellFlags) -> ScalarField:
    """MAC central divergence at FLUID cells, zero at SOLID/EMPTY."""
    _check_dims(vel, flags)
    d = vel.dims
    div = (vel.u[1:, :, :] - vel.u[:-1, :, :]
           + vel.v[:, 1:, :] - vel.v[:, :-1, :])
    if not d.is_2d:
        div = div + vel.w[:, :, 1:] - vel.w[:, :, :-1]
    div = div / d.h
    out = np.where(flags.fluid, div, 0.0)
    return ScalarField(d, out)


# ---------------------------------------------------------------------------
# interpolation and sampling

def _interp_component(arr: np.ndarray, axis: int, dims: GridDims, px, py, pz):
    """Clamped multilinear interpolation of one face array at physical points."""
    h = dims.h
    gs = []
    for a, p in enumerate((px, py, pz)):
        off = 0.0 if a == axis else 0.5
        g = np.asarray(p, dtype=np.float64) / h - off
        g = np.clip(g, 0.0, arr.shape[a] - 1.0)
        gs.append(g)
    i0 = [np.floor(g).astype(np.intp) for g in gs]
    fr = [g - i for g, i in zip(gs, i0)]
    i1 = [np.minimum(i + 1, arr.shape[a] - 1) for a, i in enumerate(i0)]
    if dims.is_2d:
        k = np.zeros_like(i0[0])
        c00 = arr[i0[0], i0[1], k]
        c10 = arr[i1[0], i0[1], k]
        c01 = arr[i0[0], i1[1], k]
        c11 = arr[i1[0], i1[1], k]
        return ((c00 * (1 - fr[0]) + c10 * fr[0]) * (1 - fr[1])
                + (c01 * (1 - fr[0]) + c11 * fr[0]) * fr[1])
    out = 0.0
    for dx, wx in ((i0[0], 1 - fr[0]), (i1[0], fr[0])):
        for dy, wy in ((i0[1], 1 - fr[1]), (i1[1], fr[1])):
            for dz, wz in ((i0[2], 1 - fr[2]), (i1[2], fr[2])):
                out = out + arr[dx, dy, dz] * (wx * wy * wz)
    return out


def sample_velocity(vel: VelocityField, point) -> np.ndarray:
    """Velocity vector at a physical point (clamped to the domain)."""
    p = np.zeros(3)
    p[:len(point)] = point
    out = np.zeros(3)
    for axis, arr in vel.components():
        out[axis] = _interp_component(arr, axis, vel.dims, p[0], p[1], p[2])
    return out


def _sample_component_at(vel: VelocityField, axis: int, px, py, pz):
    return _interp_component(vel.component(axis), axis, vel.dims, px, py, pz)


def _backtrace_rk2(vel: VelocityField, px, py, pz, dt: float):
    """Midpoint backtrace through vel; end points clamped into the domain box."""
    d = vel.dims
    lim = (d.nx * d.h, d.ny * d.h, d.nz * d.h)

    def clamp(x, y, z):
        return (np.clip(x, 0.0, lim[0]), np.clip(y, 0.0, lim[1]), np.clip(z, 0.0, lim[2]))

    k1 = [_sample_component_at(vel, a, px, py, pz) for a in range(3)] \
        if not d.is_2d else [_sample_component_at(vel, 0, px, py, pz),
                             _sample_component_at(vel, 1, px, py, pz), 0.0]
    mx, my, mz = clamp(px - 0.5 * dt * k1[0], py - 0.5 * dt * k1[1], pz - 0.5 * dt * k1[2])
    k2 = [_sample_component_at(vel, a, mx, my, mz) for a in range(3)] \
        if not d.is_2d else [_sample_component_at(vel, 0, mx, my, mz),
                             _sample_component_at(vel, 1, mx, my, mz), 0.0]
    return clamp(px - dt * k2[0], py - dt * k2[1], pz - dt * k2[2])


def _gather_scalar_masked(scalar: ScalarField, flags: CellFlags, px, py, pz):
    """Multilinear gather of cell values with SOLID taps dropped and the
    remaining weights renormalized.  Weight sum 0 reports NaN (caller keeps
    the original value there)."""
    d = scalar.dims
    h = d.h
    vals = scalar.values
    notsolid = (flags.values != CellType.SOLID).astype(np.float64)
    gs = []
    for a, p in enumerate((px, py, pz)):
        g = np.asarray(p, dtype=np.float64) / h - 0.5
        g = np.clip(g, 0.0, d.shape[a] - 1.0)
        gs.append(g)
    i0 = [np.floor(g).astype(np.intp) for g in gs]
    fr = [g - i for g, i in zip(gs, i0)]
    i1 = [np.minimum(i + 1, d.shape[a] - 1) for a, i in enumerate(i0)]
    num = 0.0
    den = 0.0
    zaxis = ((i0[2], 1 - fr[2]), (i1[2], fr[2])) if not d.is_2d else \
        ((np.zeros_like(i0[0]), 1.0),)
    for dx, wx in ((i0[0], 1 - fr[0]), (i1[0], fr[0])):
        for dy, wy in ((i0[1], 1 - fr[1]), (i1[1], fr[1])):
            for dz, wz in zaxis:
                w = wx * wy * wz * notsolid[dx, dy, dz]
                num = num + vals[dx, dy, dz] * w
                den = den + w
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


def advect_semi_lagrangian(field, vel: VelocityField, dt: float, flags: CellFlags):
    """Second-order semi-Lagrangian advection of a scalar or velocity field.

    Sample locations are traced backward with an RK2 midpoint step; SOLID
    cells (and faces adjacent to SOLID) keep their values, and scalar
    interpolation never reads SOLID cell values.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    _check_dims(field, vel)
    if isinstance(field, ScalarField):
        X, Y, Z = cell_centers(field.dims)
        bx, by, bz = _backtrace_rk2(vel, X, Y, Z, dt)
        gathered = _gather_scalar_masked(field, flags, bx, by, bz)
        out = field.values.copy()
        target = flags.values != CellType.SOLID
        ok = target & np.isfinite(gathered)
        out[ok] = gathered[ok]
        return ScalarField(field.dims, out)
    if isinstance(field, VelocityField):
        res = field.copy()
        for axis, arr in field.components():
            X, Y, Z = face_centers(field.dims, axis)
            bx, by, bz = _backtrace_rk2(vel, X, Y, Z, dt)
            sampled = _interp_component(arr, axis, field.dims, bx, by, bz)
            valid = face_valid_mask(flags, axis)
            dst = res.component(axis)
            dst[valid] = sampled[valid]
        return res
    raise TypeError(f"cannot advect {type(field).__name__}")


# ---------------------------------------------------------------------------
# resampling

def upsample(vel: VelocityField, factor: int) -> VelocityField:
    """Refine a velocity field by an integer factor.

    The fine grid covers the same physical domain (h scales by 1/factor) and
    fine face values interpolate the coarse component fields, so velocity
    magnitudes are preserved.  An inactive z axis stays inactive.
    """
    if int(factor) != factor or factor < 1:
        raise ValueError("upsample factor must be a positive integer")
    factor = int(factor)
    if factor == 1:
        return vel.copy()
    d = vel.dims
    nz = d.nz if d.is_2d else d.nz * factor
    fine = GridDims(d.nx * factor, d.ny * factor, nz, d.h / factor)
    out = VelocityField.zeros(fine)
    for axis in fine.axes:
        X, Y, Z = face_centers(fine, axis)
        out.component(axis)[...] = _interp_component(
            vel.component(axis), axis, d, X, Y, Z)
    return out
