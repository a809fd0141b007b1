"""Scenario configuration, twin-run orchestration, and file emission.

Config files are plain "key = value" text ('#' comments allowed); unknown
keys are rejected with their line number. Every run is fully determined
by config + seed: CSV/byte output contains no timestamps, and all hot
loops use fixed numpy summation orders, so reruns are byte-identical
independent of thread count.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, fields as dc_fields, replace

import numpy as np

from . import certify, dynamics, fields, scenarios, transport
from .certify import RECORD_COLUMNS, StabilityRecord
from .errors import ConfigError

# --------------------------------------------------------------------------
# configuration schema


def _parse_vec3(s):
    parts = [float(p) for p in str(s).replace(",", " ").split()]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise ValueError("expected 1 or 3 numbers")
    return tuple(parts)


def _parse_softening(s):
    s = str(s).strip()
    if s == "auto":
        return "auto"
    v = float(s)
    if v < 0:
        raise ValueError("softening must be >= 0 or 'auto'")
    return v


@dataclass
class ScenarioConfig:
    scenario: str = "gaussian-blob"
    dim: int = 3
    epsilon: int = 1
    n_particles: int = 4096
    grid_dims: int = 32
    box_center: tuple = (0.0, 0.0, 0.0)
    box_edge: float = 8.0
    dt: float = 0.02
    t_final: float = 2.0
    softening: object = "auto"  # 'auto' -> h/2
    seed: int = 1
    field_mode: str = "grid"  # grid | direct | none
    twin_kind: str = "none"  # none | velocity-shift | resolution | softening
    twin_delta: float = 0.0
    twin_grid_dims_b: int = 64
    ot_stride: int = 10  # 0 disables exact-OT columns
    ot_subsample: int = 512
    snapshot_stride: int = 0  # 0 -> endpoints only
    crossing_threshold: float = 0.3
    sup_rho_ceiling: float = 0.0  # 0 disables the bounded-density flag
    prop31_tol: float = 0.05
    geodesic_tol: float = 0.10
    sigma_x: float = 0.6
    sigma_v: float = 0.3
    ball_radius: float = 1.0
    blob_separation: float = 2.0
    hubble_rate: float = 0.3
    beam_speed: float = 1.0
    approach_speed: float = 0.0

    def validate(self):
        if self.scenario not in scenarios.SCENARIO_NAMES:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.dim != 3:
            raise ConfigError("only dim = 3 is supported")
        if self.epsilon not in (1, -1):
            raise ConfigError("epsilon must be 1 or -1")
        if self.n_particles < 2:
            raise ConfigError("n_particles must be >= 2")
        if self.dt <= 0 or self.t_final <= 0 or not self.dt < self.t_final:
            raise ConfigError("need 0 < dt < t_final")
        if self.field_mode not in ("grid", "direct", "none"):
            raise ConfigError("field_mode must be grid, direct or none")
        if self.twin_kind not in ("none", "velocity-shift", "resolution", "softening"):
            raise ConfigError(f"unknown twin_kind {self.twin_kind!r}")
        for name in ("prop31_tol", "geodesic_tol", "crossing_threshold"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.ot_stride < 0 or self.ot_subsample < 1:
            raise ConfigError("ot_stride must be >= 0 and ot_subsample >= 1")
        return self

    @property
    def grid_spec(self):
        return fields.GridSpec(self.box_center, self.box_edge, self.grid_dims)

    @property
    def n_steps(self):
        return int(round(self.t_final / self.dt))

    def softening_length(self, spec):
        if self.softening == "auto":
            return 0.5 * float(np.min(spec.h))
        return float(self.softening)


_SCHEMA = {
    "scenario": str,
    "dim": int,
    "epsilon": int,
    "n_particles": int,
    "grid_dims": int,
    "box_center": _parse_vec3,
    "box_edge": float,
    "dt": float,
    "t_final": float,
    "softening": _parse_softening,
    "seed": int,
    "field_mode": str,
    "twin_kind": str,
    "twin_delta": float,
    "twin_grid_dims_b": int,
    "ot_stride": int,
    "ot_subsample": int,
    "snapshot_stride": int,
    "crossing_threshold": float,
    "sup_rho_ceiling": float,
    "prop31_tol": float,
    "geodesic_tol": float,
    "sigma_x": float,
    "sigma_v": float,
    "ball_radius": float,
    "blob_separation": float,
    "hubble_rate": float,
    "beam_speed": float,
    "approach_speed": float,
}


def parse_config(text: str) -> ScenarioConfig:
    """Parse key = value config text; unknown keys raise with line numbers."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = _SCHEMA[key](val)
        except (ValueError, TypeError) as err:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {err}") from err
    return ScenarioConfig(**values).validate()


def load_config(path) -> ScenarioConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return parse_config(text)


def serialize_config(cfg: ScenarioConfig) -> str:
    """Canonical text form; parse(serialize(cfg)) == cfg."""
    lines = []
    for f in dc_fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = " ".join(f"{c:.17g}" for c in v)
        elif isinstance(v, float):
            v = f"{v:.17g}"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# record CSV (column order is a frozen compatibility contract)


def _fmt(v):
    if v is None:
        return ""
    return f"{v:.17g}" if isinstance(v, float) else str(v)


def write_records(path, records):
    for r in records:
        for col in RECORD_COLUMNS:
            v = getattr(r, col)
            if v is not None and not np.isfinite(v):
                raise ValueError(f"non-finite value in column {col} at step {r.step}")
    with open(path, "w") as fh:
        fh.write(",".join(RECORD_COLUMNS) + "\n")
        for r in records:
            fh.write(",".join(_fmt(getattr(r, col)) for col in RECORD_COLUMNS) + "\n")


def read_records(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header != RECORD_COLUMNS:
            raise ValueError(f"{path}: unexpected record columns {header}")
        records = []
        for line in fh:
            cells = line.rstrip("\n").split(",")
            kwargs = {}
            for col, cell in zip(header, cells):
                if cell == "":
                    kwargs[col] = None
                elif col == "step":
                    kwargs[col] = int(cell)
                else:
                    kwargs[col] = float(cell)
            records.append(StabilityRecord(**kwargs))
    return records


# --------------------------------------------------------------------------
# evaluators and twin observer


def _make_evaluator(cfg, label, variant_b=False):
    spec = cfg.grid_spec
    mode = cfg.field_mode
    softening = cfg.softening_length(spec)
    if variant_b and cfg.twin_kind == "resolution":
        spec = fields.GridSpec(cfg.box_center, cfg.box_edge, cfg.twin_grid_dims_b)
        softening = cfg.softening_length(spec)
    if variant_b and cfg.twin_kind == "softening":
        softening = cfg.twin_delta
    if mode == "none":
        return dynamics.ZeroFieldEvaluator()
    if mode == "direct":
        return dynamics.DirectSumEvaluator(softening, diagnostics_spec=spec, label=label)
    return dynamics.GridFieldEvaluator(spec, softening=softening, label=label)


def _perturbation(cfg):
    if cfg.twin_kind == "velocity-shift":
        shift = np.array([cfg.twin_delta, 0.0, 0.0])

        def perturb(ens):
            ens.v += shift

        return perturb
    return None


@dataclass
class TwinResult:
    config: ScenarioConfig
    records: list
    snapshots: dict  # step -> (ensemble A copy, ensemble B copy)
    crossing_time_a: float
    crossing_time_b: float
    sup_rho_flagged: bool


class _TwinObserver:
    """Assembles one StabilityRecord per step; exact-OT extras on a stride."""

    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.spec = cfg.grid_spec  # common diagnostics grid
        self.records = []
        self.snapshots = {}
        self.sup_rho_flagged = False
        self.crossing_a = dynamics.CrossingDetector(self.spec, cfg.crossing_threshold)
        self.crossing_b = dynamics.CrossingDetector(self.spec, cfg.crossing_threshold)
        n = cfg.n_particles
        m = min(cfg.ot_subsample, n)
        self.sub_idx = np.linspace(0, n - 1, m).astype(np.int64)
        self.sub_scale = n / m  # keeps the subsample total mass equal to M

    def __call__(self, step, flow_a, flow_b):
        cfg = self.cfg
        ens_a, ens_b = flow_a.ensemble, flow_b.ensemble
        dx = ens_a.x - ens_b.x
        dv = ens_a.v - ens_b.v
        w = ens_a.w
        gap2 = np.einsum("ij,ij->i", dx, dx) + np.einsum("ij,ij->i", dv, dv)
        s = float(np.sum(w * np.einsum("ij,ij->i", dx, dx)))
        q = 0.5 * float(np.sum(w * gap2))
        rec = StabilityRecord(
            step=step,
            t=ens_a.t,
            Q=q,
            S=s,
            max_gap=float(np.sqrt(gap2.max(initial=0.0))),
        )

        rho_a = dynamics.deposit(ens_a, self.spec, label="A")
        rho_b = dynamics.deposit(ens_b, self.spec, label="B")
        rec.sup_rho1 = rho_a.sup_norm
        rec.sup_rho2 = rho_b.sup_norm
        if cfg.sup_rho_ceiling > 0 and max(rec.sup_rho1, rec.sup_rho2) > cfg.sup_rho_ceiling:
            self.sup_rho_flagged = True

        if cfg.field_mode != "none":
            rec.T1, rec.T2 = certify.compute_T1_T2(
                ens_a, ens_b, flow_a.evaluator.accel, flow_b.evaluator.accel
            )

        stride = cfg.ot_stride
        if stride > 0 and (step % stride == 0 or step == cfg.n_steps):
            self._stride_extras(rec, ens_a, ens_b, rho_a, rho_b)

        self.crossing_a.observe(ens_a)
        self.crossing_b.observe(ens_b)
        if cfg.snapshot_stride > 0 and step % cfg.snapshot_stride == 0:
            self.snapshots[step] = (ens_a.copy(), ens_b.copy())
        self.records.append(rec)

    def _stride_extras(self, rec, ens_a, ens_b, rho_a, rho_b):
        idx, scale = self.sub_idx, self.sub_scale
        w_sub = ens_a.w[idx] * scale
        dx = ens_a.x[idx] - ens_b.x[idx]
        dv = ens_a.v[idx] - ens_b.v[idx]
        rec.S_sub = float(np.sum(w_sub * np.einsum("ij,ij->i", dx, dx)))
        rec.Q_sub = 0.5 * (
            rec.S_sub + float(np.sum(w_sub * np.einsum("ij,ij->i", dv, dv)))
        )
        pos_a = transport.WeightedCloud(ens_a.x[idx], w_sub)
        pos_b = transport.WeightedCloud(ens_b.x[idx], w_sub)
        rec.W2_rho, _ = transport.w2_exact(pos_a, pos_b)
        ph_a = transport.WeightedCloud(np.hstack([ens_a.x[idx], ens_a.v[idx]]), w_sub)
        ph_b = transport.WeightedCloud(np.hstack([ens_b.x[idx], ens_b.v[idx]]), w_sub)
        rec.W2_phase, _ = transport.w2_exact(ph_a, ph_b)

        field_a = fields.solve_field_grid(rho_a)
        field_b = fields.solve_field_grid(rho_b)
        rec.field_l2_diff = fields.field_l2_diff(field_a, field_b)
        rec.prop31_rhs = math.sqrt(max(rec.sup_rho1, rec.sup_rho2)) * rec.W2_rho

        h_min = float(np.min(self.spec.h))
        try:
            # trilinear interpolation is only defined on the cell-center hull
            rep = fields.loglip_modulus(
                field_a.interpolate,
                self.spec.lo + 0.5 * self.spec.h,
                self.spec.hi - 0.5 * self.spec.h,
                s_min=h_min,
                seed=self.cfg.seed,
            )
            rec.loglip_C = rep.constant
        except ValueError:
            rec.loglip_C = None


def run_twin_config(cfg: ScenarioConfig) -> TwinResult:
    """Sample f0, build both twin variants, run, and post-process dQ/dt."""
    cfg.validate()
    sample = scenarios.sample_initial(cfg)
    eval_a = _make_evaluator(cfg, "A")
    eval_b = _make_evaluator(cfg, "B", variant_b=True)
    obs = _TwinObserver(cfg)
    dynamics.run_twin(
        sample,
        eval_a,
        eval_b,
        cfg.dt,
        cfg.n_steps,
        observer=obs,
        perturb_b=_perturbation(cfg),
    )
    certify.fill_dQdt(obs.records)
    return TwinResult(
        cfg,
        obs.records,
        obs.snapshots,
        obs.crossing_a.crossing_time,
        obs.crossing_b.crossing_time,
        obs.sup_rho_flagged,
    )


# --------------------------------------------------------------------------
# single-flow simulation


@dataclass
class SimResult:
    config: ScenarioConfig
    ensemble: dynamics.ParticleEnsemble
    snapshots: dict
    crossing_time: float


def run_simulation(cfg: ScenarioConfig) -> SimResult:
    cfg.validate()
    ens = scenarios.sample_initial(cfg)
    evaluator = _make_evaluator(cfg, "")
    flow = dynamics.FlowState(ens, evaluator, cfg.dt)
    crossing = dynamics.CrossingDetector(cfg.grid_spec, cfg.crossing_threshold)
    snapshots = {0: ens.copy()}
    crossing.observe(ens)
    for k in range(1, cfg.n_steps + 1):
        dynamics.step_leapfrog(flow)
        crossing.observe(ens)
        if cfg.snapshot_stride > 0 and k % cfg.snapshot_stride == 0:
            snapshots[k] = ens.copy()
    snapshots[cfg.n_steps] = ens.copy()
    return SimResult(cfg, ens, snapshots, crossing.crossing_time)


# --------------------------------------------------------------------------
# output files and manifest


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(outdir, cfg, filenames):
    entries = []
    for name in sorted(filenames):
        p = os.path.join(outdir, name)
        entries.append({"name": name, "sha256": _sha256(p), "bytes": os.path.getsize(p)})
    manifest = {"config": serialize_config(cfg), "files": entries}
    path = os.path.join(outdir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


def _save_snapshot(outdir, tag, step, ens, written):
    name = f"snapshot_{tag}{step:06d}.txt"
    transport.save_cloud(ens.phase_cloud(), os.path.join(outdir, name))
    written.append(name)


def emit_simulation(cfg: ScenarioConfig, outdir) -> str:
    """cli simulate: snapshots plus final density/field dumps + manifest."""
    os.makedirs(outdir, exist_ok=True)
    result = run_simulation(cfg)
    written = ["config.txt"]
    with open(os.path.join(outdir, "config.txt"), "w") as fh:
        fh.write(serialize_config(cfg))
    for step in sorted(result.snapshots):
        _save_snapshot(outdir, "", step, result.snapshots[step], written)
    spec = cfg.grid_spec
    rho = dynamics.deposit(result.ensemble, spec)
    fields.save_grid(rho, os.path.join(outdir, "density_final"))
    written += ["density_final.bin", "density_final.json"]
    if cfg.field_mode != "none":
        grid_field = fields.solve_field_grid(rho, softening=cfg.softening_length(spec))
        fields.save_grid(grid_field, os.path.join(outdir, "field_final"))
        written += ["field_final.bin", "field_final.json"]
    return write_manifest(outdir, cfg, written)


def emit_twin(cfg: ScenarioConfig, outdir) -> str:
    """cli twin: paired snapshots + the StabilityRecord CSV + manifest."""
    os.makedirs(outdir, exist_ok=True)
    result = run_twin_config(cfg)
    written = ["config.txt", "records.csv"]
    with open(os.path.join(outdir, "config.txt"), "w") as fh:
        fh.write(serialize_config(cfg))
    write_records(os.path.join(outdir, "records.csv"), result.records)
    for step in sorted(result.snapshots):
        ens_a, ens_b = result.snapshots[step]
        _save_snapshot(outdir, "a_", step, ens_a, written)
        _save_snapshot(outdir, "b_", step, ens_b, written)
    notes = {
        "crossing_time_a": result.crossing_time_a,
        "crossing_time_b": result.crossing_time_b,
        "sup_rho_flagged": result.sup_rho_flagged,
    }
    with open(os.path.join(outdir, "run_notes.json"), "w") as fh:
        json.dump(notes, fh, sort_keys=True, indent=1)
        fh.write("\n")
    written.append("run_notes.json")
    return write_manifest(outdir, cfg, written)


def emit_certification(records, outdir, prop31_tol=0.05, fit_constants=True):
    """cli certify: certification CSV (records + flags) and summary text."""
    os.makedirs(outdir, exist_ok=True)
    result = certify.certify_records(records, prop31_tolerance=prop31_tol)
    cert_path = os.path.join(outdir, "certification.csv")
    env = certify.OsgoodEnvelope(max(result.gronwall.C_final, 1e-12), max(result.containment.Q0, 0.0))
    with open(cert_path, "w") as fh:
        fh.write(",".join(RECORD_COLUMNS + ["gronwall_ok", "envelope"]) + "\n")
        for r, ok in zip(records, result.gronwall.per_step_ok):
            y = ""
            if result.containment.Q0 > 0:
                y = _fmt(float(env(r.t - result.containment.t0)))
            fh.write(
                ",".join(_fmt(getattr(r, col)) for col in RECORD_COLUMNS)
                + f",{'' if ok is None else int(ok)},{y}\n"
            )
    summary_path = os.path.join(outdir, "summary.txt")
    with open(summary_path, "w") as fh:
        for line in result.summary_lines:
            fh.write(line + "\n")
    return result, cert_path, summary_path


def emit_report(manifest_path, outdir):
    """cli report: consolidated text report + plot-ready CSV tables."""
    os.makedirs(outdir, exist_ok=True)
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    srcdir = os.path.dirname(os.path.abspath(manifest_path))
    lines = ["consolidated run report", "", "config:", manifest["config"], "files:"]
    for entry in manifest["files"]:
        lines.append(f"  {entry['name']}  {entry['bytes']} B  sha256 {entry['sha256']}")
    rec_path = os.path.join(srcdir, "records.csv")
    if os.path.exists(rec_path):
        records = read_records(rec_path)
        result = certify.certify_records(records)
        lines += ["", "certification:"] + ["  " + ln for ln in result.summary_lines]
        table = os.path.join(outdir, "q_table.csv")
        with open(table, "w") as fh:
            fh.write("t,Q,T1,T2,W2_rho,W2_phase\n")
            for r in records:
                fh.write(
                    ",".join(
                        _fmt(v) for v in (r.t, r.Q, r.T1, r.T2, r.W2_rho, r.W2_phase)
                    )
                    + "\n"
                )
    report_path = os.path.join(outdir, "report.txt")
    with open(report_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return report_path


def with_overrides(cfg: ScenarioConfig, **kwargs) -> ScenarioConfig:
    return replace(cfg, **kwargs).validate()
