"""Numerical certification of the twin-stability inequality chain.

Checks, per recorded step of a twin run:
  - Q(t) = 1/2 sum_i w_i |Xi_1,i - Xi_2,i|^2 and its measured dQ/dt,
  - the field-stability estimate  ||grad Psi_1 - grad Psi_2||_L2
      <= max(sup rho_1, sup rho_2)^(1/2) * W2(rho_1, rho_2),
  - the feasible-plan bounds  W2_rho^2 <= S <= 2Q and W2_phase^2 <= 2Q,
  - the differential inequality  dQ/dt <= Q + sqrt(Q (T1 + T2)),
  - a fitted envelope  dQ/dt <= C Q (1 + log(1/Q))  and its closed-form
    solution  y(t) = exp(1 - (1 - log Q0) e^{-Ct}),  the uniqueness
    witness (y -> 0 pointwise as Q0 -> 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields as dc_fields

import numpy as np
from scipy.integrate import solve_ivp

from .errors import CheckFailure
from .fields import GridDensity, field_l2_diff, solve_field_grid
from .transport import WeightedCloud, w2_exact

E = math.e


# --------------------------------------------------------------------------
# per-step ledger


@dataclass
class StabilityRecord:
    """One row of the twin-run ledger. None marks quantities not measured
    at that step (exact-OT columns are filled on a subsampled stride)."""

    step: int
    t: float
    Q: float
    dQdt: float = None
    T1: float = 0.0
    T2: float = 0.0
    S: float = 0.0  # sum w |X1 - X2|^2 (position gap)
    max_gap: float = 0.0  # max_i |Xi1_i - Xi2_i| (phase space)
    sup_rho1: float = None
    sup_rho2: float = None
    W2_rho: float = None
    W2_phase: float = None
    Q_sub: float = None  # Q restricted to the OT subsample (same indices)
    S_sub: float = None
    field_l2_diff: float = None
    prop31_rhs: float = None
    loglip_C: float = None


RECORD_COLUMNS = [f.name for f in dc_fields(StabilityRecord)]


# --------------------------------------------------------------------------
# elementary functionals


def _check_aligned(ens_a, ens_b):
    if ens_a.n != ens_b.n or not np.array_equal(ens_a.w, ens_b.w):
        raise ValueError("twin ensembles are not index-aligned on the shared sample")


def compute_Q(ens_a, ens_b) -> float:
    """Half the weighted squared phase-space gap between the twin flows."""
    _check_aligned(ens_a, ens_b)
    dx = ens_a.x - ens_b.x
    dv = ens_a.v - ens_b.v
    return 0.5 * float(
        np.sum(ens_a.w * (np.einsum("ij,ij->i", dx, dx) + np.einsum("ij,ij->i", dv, dv)))
    )


def compute_T1_T2(ens_a, ens_b, field_a, field_b):
    """T1 = sum w |F_B(X_A) - F_B(X_B)|^2, T2 = sum w |F_B(X_A) - F_A(X_A)|^2.

    field_a / field_b are callables points -> (n, 3) evaluating the two
    solutions' force fields (grad Psi_1, grad Psi_2).
    """
    _check_aligned(ens_a, ens_b)
    fb_at_a = np.asarray(field_b(ens_a.x))
    fb_at_b = np.asarray(field_b(ens_b.x))
    fa_at_a = np.asarray(field_a(ens_a.x))
    d1 = fb_at_a - fb_at_b
    d2 = fb_at_a - fa_at_a
    t1 = float(np.sum(ens_a.w * np.einsum("ij,ij->i", d1, d1)))
    t2 = float(np.sum(ens_a.w * np.einsum("ij,ij->i", d2, d2)))
    return t1, t2


# --------------------------------------------------------------------------
# field stability check


@dataclass(frozen=True)
class Prop31Report:
    lhs: float
    rhs: float
    ratio: float
    passed: bool
    tolerance: float


def check_prop31(
    rho1: GridDensity,
    rho2: GridDensity,
    cloud1: WeightedCloud,
    cloud2: WeightedCloud,
    tolerance: float = 0.05,
    zero_tol: float = 1e-12,
) -> Prop31Report:
    """Field-difference L2 norm vs sup-norm-weighted Wasserstein distance.

    lhs = ||grad Psi_1 - grad Psi_2||_L2 over the box, rhs =
    max(sup rho)^{1/2} W2(cloud1, cloud2); passes iff lhs <= (1 + tol) rhs.
    rhs = 0 with lhs above zero_tol flags an inconsistency.
    """
    if not rho1.spec.same_geometry(rho2.spec):
        raise ValueError("densities must share a common grid")
    lhs = field_l2_diff(solve_field_grid(rho1), solve_field_grid(rho2))
    w2, _ = w2_exact(cloud1, cloud2)
    rhs = math.sqrt(max(rho1.sup_norm, rho2.sup_norm)) * w2
    if rhs == 0.0:
        if lhs > zero_tol:
            raise CheckFailure(
                f"identical densities (W2 = 0) but field difference {lhs:.3e}"
            )
        return Prop31Report(lhs, rhs, 0.0, True, tolerance)
    ratio = lhs / rhs
    return Prop31Report(lhs, rhs, ratio, ratio <= 1.0 + tolerance, tolerance)


@dataclass(frozen=True)
class LemmaW2Report:
    lhs: float
    rhs: float
    slack: float
    passed: bool


def check_lemma_w2(ens_a, ens_b, tol=1e-9) -> LemmaW2Report:
    """W2 of the position clouds never exceeds the paired position gap.

    The index pairing is itself a feasible plan, so the exact inequality
    lhs <= rhs holds up to solver round-off.
    """
    _check_aligned(ens_a, ens_b)
    lhs, _ = w2_exact(ens_a.position_cloud(), ens_b.position_cloud())
    dx = ens_a.x - ens_b.x
    rhs = math.sqrt(float(np.sum(ens_a.w * np.einsum("ij,ij->i", dx, dx))))
    return LemmaW2Report(lhs, rhs, rhs - lhs, lhs <= rhs + tol)


# --------------------------------------------------------------------------
# finite differences and the Gronwall chain


def fill_dQdt(records):
    """Centered-difference dQ/dt (one-sided at the ends), in place."""
    if len(records) < 2:
        return records
    t = np.array([r.t for r in records])
    q = np.array([r.Q for r in records])
    dq = np.gradient(q, t)
    for r, v in zip(records, dq):
        r.dQdt = float(v)
    return records


def _fd_tolerance(t, q):
    """Centered-difference error bound 2 dt^2 * |Q'''| with Q''' from the series."""
    dt = t[1] - t[0]
    if len(q) >= 5:
        d3 = np.abs(np.gradient(np.gradient(np.gradient(q, t), t), t))
        # local window max smooths the noisy triple difference
        k = 2
        est = np.array([d3[max(0, i - k) : i + k + 1].max() for i in range(len(q))])
    else:
        est = np.zeros_like(q)
    floor = 1e-14 * max(np.abs(q).max(initial=0.0), 1e-300)
    return 2.0 * dt**2 * est + floor


@dataclass
class GronwallReport:
    n_steps: int
    n_checked: int
    n_satisfied: int
    fraction_satisfied: float
    window: tuple  # (t_start, t_end) where max_gap <= 1/e, or None
    C_T1: float  # smallest C with T1 <= (C/4) S log^2 S on the window
    C_final: float  # smallest C with dQ/dt <= C Q (1 + log(1/Q))
    per_step_ok: list
    skipped_steps: list


def check_gronwall(records, spacing_rtol=1e-9) -> GronwallReport:
    """Verify dQ/dt <= Q + sqrt(Q (T1 + T2)) + FD tolerance per step and fit
    the empirical envelope constants on the small-gap window.

    Requires uniformly spaced records. Steps with Q = 0 are skipped and
    listed. The validity window is where the max particle gap stays <= 1/e
    (the smallness regime of the concavity step); constants are fitted there.
    """
    if len(records) < 3:
        raise ValueError("need at least 3 uniformly spaced records")
    t = np.array([r.t for r in records])
    dts = np.diff(t)
    if np.any(np.abs(dts - dts[0]) > spacing_rtol * abs(dts[0])):
        raise ValueError("records are not uniformly spaced in time")
    fill_dQdt(records)
    q = np.array([r.Q for r in records])
    tol = _fd_tolerance(t, q)
    per_ok = []
    skipped = []
    n_sat = 0
    n_checked = 0
    for i, r in enumerate(records):
        if r.Q <= 0.0:
            skipped.append(r.step)
            per_ok.append(None)
            continue
        bound = r.Q + math.sqrt(r.Q * (r.T1 + r.T2)) + tol[i]
        ok = r.dQdt <= bound
        per_ok.append(ok)
        n_checked += 1
        n_sat += ok
    gaps = np.array([r.max_gap for r in records])
    in_window = gaps <= 1.0 / E
    window = None
    if np.any(in_window):
        idx = np.nonzero(in_window)[0]
        window = (float(t[idx[0]]), float(t[idx[-1]]))
    c_t1 = 0.0
    c_final = 0.0
    for i, r in enumerate(records):
        if not in_window[i] or r.Q <= 0.0:
            continue
        if 0.0 < r.S < 1.0 / E:
            denom = r.S * math.log(r.S) ** 2
            if denom > 0:
                c_t1 = max(c_t1, 4.0 * r.T1 / denom)
        if r.Q <= 1.0 / E and r.dQdt is not None and r.dQdt > 0:
            c_final = max(c_final, r.dQdt / (r.Q * (1.0 + math.log(1.0 / r.Q))))
    frac = n_sat / n_checked if n_checked else 1.0
    return GronwallReport(
        len(records), n_checked, n_sat, frac, window, c_t1, c_final, per_ok, skipped
    )


# --------------------------------------------------------------------------
# Osgood envelope


@dataclass(frozen=True)
class OsgoodEnvelope:
    """Closed-form solution of y' = C y (1 + log(1/y)) from y(0) = Q0.

    For 0 < Q0 <= e:  y(t) = exp(1 - (1 - log Q0) e^{-Ct});  Q0 = e is the
    fixed point. Q0 = 0 gives the identically-zero solution (uniqueness).
    """

    C: float
    Q0: float

    def __post_init__(self):
        if self.C < 0:
            raise ValueError("C must be nonnegative")
        if self.Q0 < 0:
            raise ValueError("Q0 must be nonnegative")

    def __call__(self, t):
        return osgood_envelope(self.C, self.Q0, t)


def osgood_envelope(C, Q0, t):
    """Evaluate the Osgood comparison solution at times t.

    Uses the closed form for Q0 <= e; above the fixed point the closed
    form branch is invalid and a high-accuracy numerical integration is
    used instead (with a notice via the returned values only).
    """
    t = np.asarray(t, dtype=np.float64)
    if Q0 == 0.0:
        return np.zeros_like(t)
    if Q0 <= E:
        return np.exp(1.0 - (1.0 - math.log(Q0)) * np.exp(-C * t))
    return _osgood_numeric(C, Q0, t)


def _osgood_numeric(C, Q0, t):
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    order = np.argsort(t)
    ts = t[order]
    sol = solve_ivp(
        lambda _, y: C * y * (1.0 + np.log(1.0 / np.maximum(y, 1e-300))),
        (0.0, max(float(ts[-1]), 1e-30)),
        [Q0],
        t_eval=ts,
        rtol=1e-10,
        atol=1e-14,
        method="RK45",
    )
    res = np.empty_like(ts)
    res[order] = sol.y[0]
    return float(res[0]) if scalar else res


@dataclass
class OsgoodContainReport:
    C: float
    Q0: float
    t0: float
    n_checked: int
    n_contained: int
    passed: bool
    max_excess: float  # max over steps of Q / y - 1


def osgood_contain(records, C, rtol=1e-9) -> OsgoodContainReport:
    """Check measured Q(t) <= y(t) for the envelope anchored at the first
    positive-Q record. Comparison-principle containment: if the fitted C
    dominates dQ/dt / (Q (1 + log 1/Q)) pointwise, Q stays under y."""
    pos = [r for r in records if r.Q > 0.0]
    if not pos:
        return OsgoodContainReport(C, 0.0, 0.0, 0, 0, True, 0.0)
    t0 = pos[0].t
    q0 = pos[0].Q
    env = OsgoodEnvelope(C, q0)
    n_ok = 0
    max_excess = -np.inf
    for r in pos:
        y = float(env(r.t - t0))
        excess = r.Q / y - 1.0
        max_excess = max(max_excess, excess)
        n_ok += excess <= rtol
    return OsgoodContainReport(C, q0, t0, len(pos), n_ok, n_ok == len(pos), max_excess)


# --------------------------------------------------------------------------
# vanishing-perturbation uniqueness witness


@dataclass
class VanishingPerturbationReport:
    deltas: list
    sup_Q: list
    monotone: bool
    decay_ratio: float  # sup_Q at the smallest delta over sup_Q at the largest
    passed: bool


def vanishing_perturbation_study(
    run, deltas, decay_fraction=0.5
) -> VanishingPerturbationReport:
    """sup_t Q(t) per perturbation magnitude; passes iff nonincreasing in
    delta and the smallest delta lands below decay_fraction of the largest.

    ``run`` maps a perturbation magnitude to a list of StabilityRecords.
    """
    deltas = sorted(float(d) for d in deltas)
    if len(deltas) < 2 or (deltas[0] > 0 and deltas[-1] / deltas[0] < 2.0):
        raise ValueError("need a sweep of >= 2 deltas spanning at least a factor 2")
    sup_q = []
    for d in deltas:
        records = run(d)
        sup_q.append(max((r.Q for r in records), default=0.0))
    diffs = np.diff(sup_q)
    monotone = bool(np.all(diffs >= -1e-15 * max(sup_q)))
    ratio = sup_q[0] / sup_q[-1] if sup_q[-1] > 0 else 0.0
    return VanishingPerturbationReport(
        deltas, sup_q, monotone, ratio, monotone and ratio <= decay_fraction
    )


# --------------------------------------------------------------------------
# whole-run certification


@dataclass
class CertificationResult:
    verdicts: dict  # check name -> bool (or None if not applicable)
    gronwall: GronwallReport
    containment: OsgoodContainReport
    prop31_max_ratio: float
    lemma_max_w2rho_excess: float
    remark_max_w2phase_excess: float
    summary_lines: list
    passed: bool


def certify_records(
    records,
    prop31_tolerance=0.05,
    ineq_tol=1e-9,
    gronwall_min_fraction=0.99,
) -> CertificationResult:
    """Run the full inequality-chain certification over a record series.

    The feasible-plan checks (W2_rho^2 <= 2Q, W2_phase^2 <= 2Q) compare the
    exact-OT columns against Q and S restricted to the same subsample, so
    they are exact inequalities up to solver round-off.
    """
    verdicts = {}
    lines = []

    ot_rows = [r for r in records if r.W2_rho is not None]
    prop_ratio = 0.0
    lemma_excess = -np.inf
    remark_excess = -np.inf
    for r in ot_rows:
        q2 = 2.0 * r.Q_sub if r.Q_sub is not None else 2.0 * r.Q
        s = r.S_sub if r.S_sub is not None else r.S
        lemma_excess = max(lemma_excess, r.W2_rho**2 - s, r.W2_rho**2 - q2)
        if r.W2_phase is not None:
            remark_excess = max(remark_excess, r.W2_phase**2 - q2)
        if r.prop31_rhs is not None and r.field_l2_diff is not None:
            if r.prop31_rhs > 0:
                prop_ratio = max(prop_ratio, r.field_l2_diff / r.prop31_rhs)
            elif r.field_l2_diff > 1e-12:
                prop_ratio = np.inf
    if ot_rows:
        verdicts["lemma_w2"] = bool(lemma_excess <= ineq_tol)
        verdicts["remark_phase"] = bool(remark_excess <= ineq_tol)
        verdicts["prop31"] = bool(prop_ratio <= 1.0 + prop31_tolerance)
        lines.append(
            f"lemma_w2: W2_rho^2 - 2Q max excess {lemma_excess:.3e} "
            f"-> {'PASS' if verdicts['lemma_w2'] else 'FAIL'}"
        )
        lines.append(
            f"remark_phase: W2_phase^2 - 2Q max excess {remark_excess:.3e} "
            f"-> {'PASS' if verdicts['remark_phase'] else 'FAIL'}"
        )
        lines.append(
            f"prop31: max ratio {prop_ratio:.4f} (tol 1 + {prop31_tolerance}) "
            f"-> {'PASS' if verdicts['prop31'] else 'FAIL'}"
        )
    else:
        verdicts["lemma_w2"] = verdicts["remark_phase"] = verdicts["prop31"] = None
        lines.append("no exact-OT rows recorded; transport checks skipped")

    gron = check_gronwall(records)
    verdicts["gronwall"] = bool(gron.fraction_satisfied >= gronwall_min_fraction)
    lines.append(
        f"gronwall: dQ/dt <= Q + sqrt(Q(T1+T2)) at "
        f"{gron.n_satisfied}/{gron.n_checked} checked steps "
        f"({100 * gron.fraction_satisfied:.1f}%, need >= {100 * gronwall_min_fraction:.0f}%) "
        f"-> {'PASS' if verdicts['gronwall'] else 'FAIL'}"
    )
    lines.append(
        f"fitted constants: C_T1 = {gron.C_T1:.4g}, C_final = {gron.C_final:.4g}; "
        f"small-gap window = {gron.window}"
    )

    contain = osgood_contain(records, max(gron.C_final, 1e-12))
    verdicts["osgood_containment"] = contain.passed
    lines.append(
        f"osgood: Q(t) <= envelope(C = {contain.C:.4g}, Q0 = {contain.Q0:.3e}) at "
        f"{contain.n_contained}/{contain.n_checked} steps "
        f"-> {'PASS' if contain.passed else 'FAIL'}"
    )

    all_q_zero = all(r.Q == 0.0 for r in records)
    if all_q_zero:
        lines.append("identical twins (Q = 0 throughout): chain trivially satisfied")

    applicable = [v for v in verdicts.values() if v is not None]
    passed = all(applicable)
    lines.append(f"overall: {'PASS' if passed else 'FAIL'}")
    return CertificationResult(
        verdicts,
        gron,
        contain,
        prop_ratio,
        lemma_excess if ot_rows else 0.0,
        remark_excess if ot_rows else 0.0,
        lines,
        passed,
    )
