"""Free-space Poisson fields on uniform 3-d grids.

The potential convention is Delta Psi = epsilon * rho, i.e.

    grad Psi(x) = epsilon * sum_j w_j (x - y_j) / (4 pi (|x - y_j|^2 + s^2)^{3/2})

with Plummer softening length s. epsilon = +1 is the repulsive
(electrostatic) sign, epsilon = -1 the attractive (gravitational) one.
The grid solver convolves cell masses with the same kernel using
zero-padded (domain-doubled) FFTs, so boundaries are free-space.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import EscapeError, OutOfDomainError, SingularityError

FOUR_PI = 4.0 * np.pi


class TruncationWarning(UserWarning):
    """Density support touches the box boundary; truncation error unbounded."""


# --------------------------------------------------------------------------
# grid geometry


@dataclass(frozen=True)
class GridSpec:
    """Uniform Cartesian grid of cell centers.

    The box spans [center - edge/2, center + edge/2] per axis with ``dims``
    cells; grid values live at cell centers lo + (i + 1/2) h.
    """

    center: tuple
    edge: tuple
    dims: tuple

    def __post_init__(self):
        center = tuple(float(c) for c in np.atleast_1d(self.center))
        edge = np.atleast_1d(self.edge)
        if edge.size == 1:
            edge = np.repeat(edge, 3)
        edge = tuple(float(e) for e in edge)
        dims = np.atleast_1d(self.dims)
        if dims.size == 1:
            dims = np.repeat(dims, 3)
        dims = tuple(int(n) for n in dims)
        if len(center) != 3 or len(edge) != 3 or len(dims) != 3:
            raise ValueError("GridSpec is 3-d: center, edge, dims must have length 3")
        if any(e <= 0 for e in edge) or any(n < 2 for n in dims):
            raise ValueError("edge lengths must be positive and dims >= 2")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "edge", edge)
        object.__setattr__(self, "dims", dims)

    @property
    def h(self):
        return np.asarray(self.edge) / np.asarray(self.dims)

    @property
    def lo(self):
        return np.asarray(self.center) - 0.5 * np.asarray(self.edge)

    @property
    def hi(self):
        return np.asarray(self.center) + 0.5 * np.asarray(self.edge)

    @property
    def cell_volume(self):
        return float(np.prod(self.h))

    def axis_centers(self, axis):
        return self.lo[axis] + (np.arange(self.dims[axis]) + 0.5) * self.h[axis]

    def points(self):
        """Cell-center coordinates, shape dims + (3,)."""
        ax = [self.axis_centers(a) for a in range(3)]
        g = np.meshgrid(*ax, indexing="ij")
        return np.stack(g, axis=-1)

    def refine(self, factor=2):
        return GridSpec(self.center, self.edge, tuple(n * factor for n in self.dims))

    def same_geometry(self, other):
        return (
            self.dims == other.dims
            and np.allclose(self.center, other.center, rtol=0, atol=1e-12)
            and np.allclose(self.edge, other.edge, rtol=0, atol=1e-12)
        )


@dataclass(frozen=True)
class GridDensity:
    """Deposited density rho on a GridSpec (values per cell, mass/volume)."""

    spec: GridSpec
    values: np.ndarray
    epsilon_sign: int = 1

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.shape != self.spec.dims:
            raise ValueError(f"values shape {values.shape} != dims {self.spec.dims}")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("density values must be finite and nonnegative")
        if self.epsilon_sign not in (1, -1):
            raise ValueError("epsilon_sign must be +1 or -1")
        object.__setattr__(self, "values", values)

    @property
    def mass(self):
        return float(self.values.sum()) * self.spec.cell_volume

    @property
    def sup_norm(self):
        return float(self.values.max(initial=0.0))


@dataclass(frozen=True)
class GridField:
    """Vector field grad Psi sampled at cell centers, trilinear interpolation."""

    spec: GridSpec
    values: np.ndarray  # dims + (3,)

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        if values.shape != self.spec.dims + (3,):
            raise ValueError(f"field shape {values.shape} != dims + (3,)")
        object.__setattr__(self, "values", values)

    def interpolate(self, points):
        """Trilinear interpolation at arbitrary points inside the box."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        idx, frac, outside = _cic_coords(points, self.spec)
        if outside.size:
            raise OutOfDomainError(points[outside].tolist())
        out = np.zeros((points.shape[0], 3))
        for cx in (0, 1):
            wx = (1.0 - frac[:, 0]) if cx == 0 else frac[:, 0]
            for cy in (0, 1):
                wy = (1.0 - frac[:, 1]) if cy == 0 else frac[:, 1]
                for cz in (0, 1):
                    wz = (1.0 - frac[:, 2]) if cz == 0 else frac[:, 2]
                    out += (wx * wy * wz)[:, None] * self.values[
                        idx[:, 0] + cx, idx[:, 1] + cy, idx[:, 2] + cz
                    ]
        return out

    @property
    def l2_norm(self):
        return float(np.sqrt(np.sum(self.values**2) * self.spec.cell_volume))


@dataclass(frozen=True)
class SofteningSpec:
    """Plummer softening |x-y|^2 -> |x-y|^2 + length^2; 0 is the exact kernel."""

    length: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.length) or self.length < 0:
            raise ValueError("softening length must be finite and >= 0")


# --------------------------------------------------------------------------
# cloud-in-cell deposition


def _cic_coords(points, spec):
    """Lower corner index, fractional offset and out-of-box rows for CIC."""
    dims = np.asarray(spec.dims)
    u = (points - spec.lo) / spec.h - 0.5
    outside = np.nonzero(
        np.any((u < -1e-12) | (u > dims - 1 + 1e-12), axis=1)
    )[0]
    i0 = np.clip(np.floor(u).astype(np.int64), 0, dims - 2)
    frac = np.clip(u - i0, 0.0, 1.0)
    return i0, frac, outside


def deposit_cic(points, weights, spec, label=""):
    """Cloud-in-cell deposit of a weighted point set onto a GridSpec.

    Mass is conserved exactly (partition of unity); a point exactly at a
    cell center deposits its full weight into that cell. Points outside
    the cell-center lattice raise EscapeError with the offending indices.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64)
    idx, frac, outside = _cic_coords(points, spec)
    if outside.size:
        raise EscapeError(outside.tolist(), label=label)
    values = np.zeros(spec.dims)
    for cx in (0, 1):
        wx = (1.0 - frac[:, 0]) if cx == 0 else frac[:, 0]
        for cy in (0, 1):
            wy = (1.0 - frac[:, 1]) if cy == 0 else frac[:, 1]
            for cz in (0, 1):
                wz = (1.0 - frac[:, 2]) if cz == 0 else frac[:, 2]
                np.add.at(
                    values,
                    (idx[:, 0] + cx, idx[:, 1] + cy, idx[:, 2] + cz),
                    weights * wx * wy * wz,
                )
    values /= spec.cell_volume
    return values


# --------------------------------------------------------------------------
# direct-sum solver


def solve_field_direct(
    points, weights, targets, softening=SofteningSpec(0.0), epsilon_sign=1, block=2048
):
    """Exact pairwise grad Psi at target points (no mesh error).

    Summation order is fixed (source order), so results are deterministic.
    With zero softening a target sitting exactly on a source raises
    SingularityError.
    """
    if isinstance(softening, (int, float)):
        softening = SofteningSpec(float(softening))
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64)
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if not (np.all(np.isfinite(points)) and np.all(np.isfinite(targets))):
        raise ValueError("non-finite source or target coordinates")
    s2 = softening.length**2
    out = np.empty((targets.shape[0], 3))
    for a in range(0, targets.shape[0], block):
        t = targets[a : a + block]
        diff = t[:, None, :] - points[None, :, :]
        r2 = np.einsum("ijk,ijk->ij", diff, diff) + s2
        if s2 == 0.0:
            sing = r2 == 0.0
            if np.any(sing):
                raise SingularityError(
                    f"{int(sing.sum())} target(s) coincide with unsoftened sources"
                )
        inv = weights / (FOUR_PI * r2 * np.sqrt(r2))
        # the j == i term of a self-field has zero numerator, so softened
        # self-interaction vanishes automatically
        out[a : a + block] = epsilon_sign * np.einsum("ij,ijk->ik", inv, diff)
    return out


# --------------------------------------------------------------------------
# grid solver (Hockney domain doubling)

_KERNEL_CACHE = {}


def _kernel_fft(spec, softening_length):
    key = (spec.dims, tuple(spec.h.tolist()), float(softening_length))
    hit = _KERNEL_CACHE.get(key)
    if hit is not None:
        return hit
    pad = tuple(2 * n for n in spec.dims)
    coords = []
    for a in range(3):
        k = np.arange(pad[a])
        c = np.where(k <= spec.dims[a], k, k - pad[a]).astype(np.float64)
        c[spec.dims[a]] = 0.0  # ambiguous +-n offset never reaches the cropped region
        coords.append(c * spec.h[a])
    rx, ry, rz = np.meshgrid(*coords, indexing="ij", sparse=True)
    r2 = rx**2 + ry**2 + rz**2 + softening_length**2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = FOUR_PI * r2 * np.sqrt(r2)
        kern = [np.where(denom > 0, rc / denom, 0.0) for rc in (rx + 0 * r2, ry + 0 * r2, rz + 0 * r2)]
    kfft = [np.fft.rfftn(k) for k in kern]
    _KERNEL_CACHE[key] = kfft
    return kfft


def solve_field_grid(rho: GridDensity, softening=None) -> GridField:
    """grad Psi from a grid density via zero-padded kernel convolution.

    Default softening is half the smallest cell size, matching the
    deposition scale. Free-space boundaries; if the density support
    touches the outer cell layer a TruncationWarning is issued.
    """
    spec = rho.spec
    if softening is None:
        softening = 0.5 * float(np.min(spec.h))
    elif isinstance(softening, SofteningSpec):
        softening = softening.length
    if _support_touches_boundary(rho.values):
        warnings.warn(
            "density support touches the box boundary; free-space truncation "
            "error is uncontrolled",
            TruncationWarning,
            stacklevel=2,
        )
    mass = rho.values * spec.cell_volume
    pad = tuple(2 * n for n in spec.dims)
    mf = np.fft.rfftn(mass, s=pad, axes=(0, 1, 2))
    kfft = _kernel_fft(spec, softening)
    nx, ny, nz = spec.dims
    comps = [
        np.fft.irfftn(mf * kf, s=pad, axes=(0, 1, 2))[:nx, :ny, :nz] for kf in kfft
    ]
    values = rho.epsilon_sign * np.stack(comps, axis=-1)
    return GridField(spec, values)


def _support_touches_boundary(values):
    return bool(
        values[0].any() or values[-1].any()
        or values[:, 0].any() or values[:, -1].any()
        or values[:, :, 0].any() or values[:, :, -1].any()
    )


def field_l2_diff(f1: GridField, f2: GridField) -> float:
    """L2 norm over the box of the field difference, (sum |d|^2 h^3)^{1/2}."""
    if not f1.spec.same_geometry(f2.spec):
        raise ValueError("field grids have different geometry")
    d = f1.values - f2.values
    return float(np.sqrt(np.sum(d * d) * f1.spec.cell_volume))


# --------------------------------------------------------------------------
# log-Lipschitz modulus


@dataclass(frozen=True)
class LoglipReport:
    constant: float
    pair: tuple
    separations: np.ndarray = field(repr=False, default=None)
    ratios: np.ndarray = field(repr=False, default=None)


def loglip_modulus(
    evaluate,
    region_lo,
    region_hi,
    s_min,
    s_max=0.5,
    n_separations=16,
    pairs_per_separation=32,
    seed=0,
):
    """Empirical sup of |F(x)-F(y)| / (|x-y| log(1/|x-y|)) over sampled pairs.

    Separations are log-spaced in [s_min, s_max] (s_max <= 1/2 so the log
    factor stays positive); base points are seeded uniform draws inside the
    region, shrunk so both ends of each pair stay inside.
    """
    region_lo = np.asarray(region_lo, dtype=np.float64)
    region_hi = np.asarray(region_hi, dtype=np.float64)
    if not 0 < s_min < s_max <= 0.5:
        raise ValueError("need 0 < s_min < s_max <= 1/2")
    if np.any(region_hi - region_lo <= 2 * s_max):
        raise ValueError("region too small for the requested separations")
    rng = np.random.default_rng(seed)
    seps = np.geomspace(s_min, s_max, n_separations)
    best = -1.0
    best_pair = None
    all_ratios = np.empty((n_separations, pairs_per_separation))
    for i, s in enumerate(seps):
        x = rng.uniform(region_lo + s_max, region_hi - s_max, size=(pairs_per_separation, 3))
        d = rng.normal(size=(pairs_per_separation, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        y = x + s * d
        num = np.linalg.norm(evaluate(x) - evaluate(y), axis=1)
        ratios = num / (s * np.log(1.0 / s))
        all_ratios[i] = ratios
        j = int(np.argmax(ratios))
        if ratios[j] > best:
            best = float(ratios[j])
            best_pair = (x[j].copy(), y[j].copy())
    if best_pair is None:
        raise ValueError("no valid sample pairs")
    return LoglipReport(best, best_pair, seps, all_ratios)


# --------------------------------------------------------------------------
# grid I/O: flat little-endian float64 binary + JSON sidecar, CSV slices


def save_grid(obj, basepath):
    """Write <basepath>.bin (little-endian float64, C order) and <basepath>.json."""
    basepath = str(basepath)
    if isinstance(obj, GridDensity):
        kind, comps, extra = "density", 1, {"epsilon_sign": obj.epsilon_sign}
    elif isinstance(obj, GridField):
        kind, comps, extra = "field", 3, {}
    else:
        raise TypeError("save_grid expects GridDensity or GridField")
    sidecar = {
        "kind": kind,
        "dims": list(obj.spec.dims),
        "box_center": list(obj.spec.center),
        "box_edge": list(obj.spec.edge),
        "h": obj.spec.h.tolist(),
        "components": comps,
        **extra,
    }
    obj.values.astype("<f8").tofile(basepath + ".bin")
    with open(basepath + ".json", "w") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_grid(basepath):
    basepath = str(basepath)
    with open(basepath + ".json") as fh:
        side = json.load(fh)
    spec = GridSpec(tuple(side["box_center"]), tuple(side["box_edge"]), tuple(side["dims"]))
    raw = np.fromfile(basepath + ".bin", dtype="<f8")
    if side["kind"] == "density":
        return GridDensity(spec, raw.reshape(spec.dims), side["epsilon_sign"])
    return GridField(spec, raw.reshape(spec.dims + (3,)))


def export_slice(obj, axis, index, path):
    """CSV export of one grid slice (density scalar or field components)."""
    vals = np.take(obj.values, index, axis=axis)
    if vals.ndim == 2:
        np.savetxt(path, vals, delimiter=",", fmt="%.17g")
    else:
        flat = vals.reshape(-1, vals.shape[-1])
        np.savetxt(path, flat, delimiter=",", fmt="%.17g")
