"""Characteristic flow of the Vlasov-Poisson system.

Particles follow dX/dt = xi, dxi/dt = grad Psi(t, X) with a kick-drift-kick
leapfrog; the field is refreshed from a cloud-in-cell deposit after each
drift (grid mode), from softened direct summation (direct mode), or held
at zero / frozen for control runs. Twin runs advance two flows from the
identical initial sample.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fields
from .errors import DivergenceError, EscapeError, VptwinError
from .fields import GridDensity, GridSpec, SofteningSpec, deposit_cic
from .transport import WeightedCloud


@dataclass
class ParticleEnsemble:
    """Weighted phase-space point cloud representing f(t)."""

    x: np.ndarray  # (N, 3) positions
    v: np.ndarray  # (N, 3) velocities
    w: np.ndarray  # (N,) weights
    t: float = 0.0
    epsilon_sign: int = 1

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.v = np.ascontiguousarray(self.v, dtype=np.float64)
        self.w = np.ascontiguousarray(self.w, dtype=np.float64)
        if self.x.shape != self.v.shape or self.x.shape[0] != self.w.shape[0]:
            raise ValueError("inconsistent ensemble array shapes")
        if np.any(self.w <= 0):
            raise ValueError("weights must be strictly positive")

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def total_mass(self):
        return float(self.w.sum())

    def copy(self):
        return ParticleEnsemble(
            self.x.copy(), self.v.copy(), self.w.copy(), self.t, self.epsilon_sign
        )

    def position_cloud(self) -> WeightedCloud:
        return WeightedCloud(self.x, self.w)

    def phase_cloud(self) -> WeightedCloud:
        return WeightedCloud(np.hstack([self.x, self.v]), self.w)


def deposit(ensemble: ParticleEnsemble, spec: GridSpec, label="") -> GridDensity:
    """CIC deposit of the ensemble; realizes the position push-forward of f0."""
    values = deposit_cic(ensemble.x, ensemble.w, spec, label=label)
    return GridDensity(spec, values, ensemble.epsilon_sign)


# --------------------------------------------------------------------------
# field evaluators (acceleration sources)


class ZeroFieldEvaluator:
    """Free streaming: grad Psi identically zero."""

    kind = "none"

    def refresh(self, ensemble):
        pass

    def accel(self, points):
        return np.zeros((np.atleast_2d(points).shape[0], 3))


class FrozenFieldEvaluator:
    """Fixed external field from a callable points -> (n, 3) values."""

    kind = "frozen"

    def __init__(self, fn):
        self.fn = fn

    def refresh(self, ensemble):
        pass

    def accel(self, points):
        return np.asarray(self.fn(np.atleast_2d(points)), dtype=np.float64)


class GridFieldEvaluator:
    """Deposit -> free-space grid solve -> trilinear force interpolation."""

    kind = "grid"

    def __init__(self, spec: GridSpec, softening=None, label=""):
        self.spec = spec
        if softening is None:
            softening = 0.5 * float(np.min(spec.h))
        elif isinstance(softening, SofteningSpec):
            softening = softening.length
        self.softening = float(softening)
        self.label = label
        self.density = None
        self.field = None

    def refresh(self, ensemble):
        self.density = deposit(ensemble, self.spec, label=self.label)
        self.field = fields.solve_field_grid(self.density, softening=self.softening)

    def accel(self, points):
        return self.field.interpolate(points)

    @property
    def sup_rho(self):
        return self.density.sup_norm if self.density is not None else 0.0


class DirectSumEvaluator:
    """Softened pairwise summation over the ensemble itself (no mesh)."""

    kind = "direct"

    def __init__(self, softening, diagnostics_spec: GridSpec | None = None, label=""):
        if isinstance(softening, SofteningSpec):
            softening = softening.length
        if softening <= 0:
            raise ValueError("direct self-field needs positive softening")
        self.softening = float(softening)
        self.diagnostics_spec = diagnostics_spec
        self.label = label
        self._sources = None
        self._weights = None
        self._epsilon = 1
        self.density = None

    def refresh(self, ensemble):
        self._sources = ensemble.x.copy()
        self._weights = ensemble.w
        self._epsilon = ensemble.epsilon_sign
        if self.diagnostics_spec is not None:
            self.density = deposit(ensemble, self.diagnostics_spec, label=self.label)

    def accel(self, points):
        return fields.solve_field_direct(
            self._sources,
            self._weights,
            points,
            softening=SofteningSpec(self.softening),
            epsilon_sign=self._epsilon,
        )

    @property
    def sup_rho(self):
        return self.density.sup_norm if self.density is not None else 0.0


# --------------------------------------------------------------------------
# leapfrog stepping


@dataclass
class FlowState:
    """One flow: ensemble + field evaluator + cached acceleration."""

    ensemble: ParticleEnsemble
    evaluator: object
    dt: float
    step_count: int = 0
    label: str = ""
    _accel: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.dt == 0:
            raise ValueError("dt must be nonzero")
        self.evaluator.refresh(self.ensemble)
        self._accel = self.evaluator.accel(self.ensemble.x)


def step_leapfrog(state: FlowState) -> FlowState:
    """One kick-drift-kick step; refreshes the field after the drift.

    Time-reversible: with a frozen (or zero) field, negating dt undoes the
    step exactly up to round-off. Raises DivergenceError on non-finite
    coordinates and propagates EscapeError from the deposit.
    """
    ens = state.ensemble
    dt = state.dt
    v_half = ens.v + 0.5 * dt * state._accel
    ens.x += dt * v_half
    ens.t += dt
    try:
        state.evaluator.refresh(ens)
    except EscapeError as err:
        raise EscapeError(err.indices, label=state.label or err.label) from err
    accel = state.evaluator.accel(ens.x)
    ens.v = v_half + 0.5 * dt * accel
    state._accel = accel
    state.step_count += 1
    if not (np.all(np.isfinite(ens.x)) and np.all(np.isfinite(ens.v))):
        raise DivergenceError(state.step_count, label=state.label)
    return state


def reverse_dt(state: FlowState):
    """Flip the integration direction in place (for reversibility tests)."""
    state.dt = -state.dt


def suggest_dt(grid_field: fields.GridField, cap: float) -> float:
    """Stability rule dt <= 0.1 / sqrt(max field gradient), hard-capped.

    The gradient is estimated by one-sided grid differences; the rule keeps
    the fastest local oscillation resolved by ~60 steps.
    """
    vals = grid_field.values
    h = grid_field.spec.h
    gmax = 0.0
    for a in range(3):
        d = np.diff(vals, axis=a) / h[a]
        if d.size:
            gmax = max(gmax, float(np.abs(d).max()))
    if gmax <= 0:
        return cap
    return min(cap, 0.1 / np.sqrt(gmax))


# --------------------------------------------------------------------------
# twin runs


class TwinError(VptwinError):
    """Failure inside one branch of a twin run, labeled A or B."""

    def __init__(self, branch, cause):
        self.branch = branch
        self.cause = cause
        super().__init__(f"twin branch {branch} failed: {cause}")


def run_twin(
    sample: ParticleEnsemble,
    evaluator_a,
    evaluator_b,
    dt: float,
    n_steps: int,
    observer=None,
    perturb_b=None,
):
    """Advance two flows from the identical particle sample.

    perturb_b, if given, mutates branch B's copy of the sample at t = 0
    (e.g. a velocity shift). observer(step, flow_a, flow_b) is called after
    initialization (step 0) and after every step. Identical evaluators and
    no perturbation give bitwise-identical trajectories.
    """
    ens_a = sample.copy()
    ens_b = sample.copy()
    if perturb_b is not None:
        perturb_b(ens_b)
    try:
        flow_a = FlowState(ens_a, evaluator_a, dt, label="A")
    except VptwinError as err:
        raise TwinError("A", err) from err
    try:
        flow_b = FlowState(ens_b, evaluator_b, dt, label="B")
    except VptwinError as err:
        raise TwinError("B", err) from err
    if observer is not None:
        observer(0, flow_a, flow_b)
    for k in range(1, n_steps + 1):
        try:
            step_leapfrog(flow_a)
        except VptwinError as err:
            raise TwinError("A", err) from err
        try:
            step_leapfrog(flow_b)
        except VptwinError as err:
            raise TwinError("B", err) from err
        if observer is not None:
            observer(k, flow_a, flow_b)
    return flow_a, flow_b


# --------------------------------------------------------------------------
# monokinetic mode


def monokinetic_init(
    density_cloud: WeightedCloud, velocity, epsilon_sign=1
) -> ParticleEnsemble:
    """Ensemble whose empirical f is rho(x) delta(xi - v(x)).

    velocity is either a callable x -> v(x) or an (N, 3) array; an array
    assigning different velocities to identical positions is rejected
    (v must be single-valued on the support).
    """
    x = density_cloud.points
    if x.shape[1] != 3:
        raise ValueError("monokinetic density cloud must be spatial (d = 3)")
    if callable(velocity):
        v = np.asarray(velocity(x), dtype=np.float64)
    else:
        v = np.ascontiguousarray(velocity, dtype=np.float64)
        _, inv = np.unique(x, axis=0, return_inverse=True)
        for g in range(inv.max() + 1):
            rows = np.nonzero(inv == g)[0]
            if rows.size > 1 and not np.allclose(v[rows], v[rows[0]], rtol=0, atol=1e-12):
                raise ValueError("velocity spec is multivalued on coincident positions")
    if v.shape != x.shape:
        raise ValueError("velocity array shape must match positions")
    return ParticleEnsemble(x.copy(), v, density_cloud.weights.copy(), 0.0, epsilon_sign)


def cell_velocity_dispersion(ensemble: ParticleEnsemble, spec: GridSpec) -> float:
    """Max over cells of the mass-weighted velocity standard deviation.

    Nearest-grid-point binning; a cold (monokinetic) flow stays near zero
    until particle crossing, when cells pick up both streams.
    """
    dims = np.asarray(spec.dims)
    u = np.clip(np.rint((ensemble.x - spec.lo) / spec.h - 0.5).astype(np.int64), 0, dims - 1)
    flat = np.ravel_multi_index((u[:, 0], u[:, 1], u[:, 2]), spec.dims)
    ncell = int(np.prod(spec.dims))
    msum = np.bincount(flat, weights=ensemble.w, minlength=ncell)
    occupied = msum > 0
    var = np.zeros(ncell)
    for c in range(3):
        s1 = np.bincount(flat, weights=ensemble.w * ensemble.v[:, c], minlength=ncell)
        s2 = np.bincount(flat, weights=ensemble.w * ensemble.v[:, c] ** 2, minlength=ncell)
        mean = np.where(occupied, s1 / np.where(occupied, msum, 1.0), 0.0)
        var += np.where(occupied, s2 / np.where(occupied, msum, 1.0) - mean**2, 0.0)
    return float(np.sqrt(np.clip(var, 0.0, None).max(initial=0.0)))


class CrossingDetector:
    """Reports the first time cold-flow particle crossing is seen.

    Crossing is flagged when the max per-cell velocity dispersion exceeds
    threshold_factor times the current rms speed. Heuristic: it reports,
    it does not stop the run.
    """

    def __init__(self, spec: GridSpec, threshold_factor=0.3):
        self.spec = spec
        self.threshold_factor = threshold_factor
        self.crossing_time = None
        self._first = True
        self._disabled = False

    def observe(self, ensemble: ParticleEnsemble):
        if self._disabled or self.crossing_time is not None:
            return
        disp = cell_velocity_dispersion(ensemble, self.spec)
        rms = float(np.sqrt(np.sum(ensemble.w * np.sum(ensemble.v**2, axis=1)) / ensemble.total_mass))
        triggered = rms > 0 and disp > self.threshold_factor * rms
        if self._first:
            self._first = False
            if triggered:
                # already dispersed at start: not a cold flow, nothing to report
                self._disabled = True
            return
        if triggered:
            self.crossing_time = ensemble.t


# --------------------------------------------------------------------------
# conserved-quantity monitors


def kinetic_energy(ensemble: ParticleEnsemble) -> float:
    return 0.5 * float(np.sum(ensemble.w * np.sum(ensemble.v**2, axis=1)))


def potential_energy_direct(ensemble: ParticleEnsemble, softening) -> float:
    """Pairwise softened interaction energy consistent with DirectSumEvaluator.

    U = (eps/2) sum_{i != j} w_i w_j / (4 pi sqrt(r_ij^2 + s^2)); the total
    H = kinetic + U is conserved by the softened direct-sum dynamics.
    """
    if isinstance(softening, SofteningSpec):
        softening = softening.length
    x = ensemble.x
    w = ensemble.w
    diff = x[:, None, :] - x[None, :, :]
    r2 = np.einsum("ijk,ijk->ij", diff, diff) + softening**2
    inv = 1.0 / (fields.FOUR_PI * np.sqrt(r2))
    np.fill_diagonal(inv, 0.0)
    return 0.5 * ensemble.epsilon_sign * float(w @ inv @ w)


def momentum(ensemble: ParticleEnsemble):
    return (ensemble.w[:, None] * ensemble.v).sum(axis=0)
