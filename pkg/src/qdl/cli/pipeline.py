"""Scenario orchestration: equilibrium, QDL run, Radau reference, comparison, artifacts."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..analysis import (DeviationReport, FilterSpec, butterworth_sos, deviation_report, filtfilt,
                        resample_zoh)
from ..devices.microgrid import build_system, copy_params, flat_start, get_param, set_param
from ..devices.params import MicrogridParams
from ..engine import Disturbance, EngineConfig, QdlSystem, RunResult, SchedulingError
from ..engine import run as run_engine
from ..reference import (DenseSystem, EquilibriumError, RadauConfig, StepFailure, Trajectory,
                         build_dense_system, integrate, solve_equilibrium, spectrum)
from .config import ConfigError, ScenarioConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_TRUNCATED = 4

# failures that are reported as a solver stage error rather than a crash
SOLVER_ERRORS = (EquilibriumError, StepFailure, SchedulingError, np.linalg.LinAlgError,
                 ArithmeticError)


class StageFailure(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.message = message


# ===== manifest =====


@dataclass
class RunManifest:
    command: str
    scenario: str
    config_hash: str
    config: dict
    solver: dict = field(default_factory=dict)
    quanta: dict = field(default_factory=dict)
    initial_state: dict = field(default_factory=dict)
    events: dict = field(default_factory=dict)
    truncated: bool = False
    t_stop: float | None = None
    stages: dict = field(default_factory=dict)
    error: dict | None = None
    artifacts: list = field(default_factory=list)
    # excluded from the hash; everything else must be reproducible
    wall_time: dict = field(default_factory=dict)

    def content(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("wall_time")
        return d

    def hash(self) -> str:
        blob = json.dumps(self.content(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def header(self) -> list[str]:
        return [f"scenario={self.scenario}", f"config_hash={self.config_hash}",
                f"manifest_hash={self.hash()}"]

    def write(self, path) -> None:
        d = dataclasses.asdict(self)
        d["manifest_hash"] = self.hash()
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")

    @property
    def exit_code(self) -> int:
        if self.error is not None:
            return EXIT_CONFIG if self.error.get("stage") == "config" else EXIT_SOLVER
        return EXIT_TRUNCATED if self.truncated else EXIT_OK


# ===== preparation =====


@dataclass
class Prepared:
    params: MicrogridParams
    system: QdlSystem
    dense: DenseSystem
    x_eq: np.ndarray
    residual: float
    snapped: bool
    # (time, spec, parameters after the step), in time order
    phases: list[tuple[float, object, MicrogridParams]]

    @property
    def labels(self) -> list[str]:
        return self.system.labels


def prepare(cfg: ScenarioConfig) -> Prepared:
    """Resolve parameters and solve the pre-disturbance equilibrium."""
    p = cfg.build_params()
    flat = build_system(p, flat_start(p))
    unknown = sorted(set(cfg.quanta) - set(flat.labels))
    if unknown:
        raise ConfigError(f"quantum override for unknown atom(s): {', '.join(unknown)}")
    unknown = sorted(set(cfg.output.plot_states) - set(flat.labels))
    if unknown:
        raise ConfigError(f"output.plot_states names unknown atom(s): {', '.join(unknown)}")
    dense = build_dense_system(flat)
    s = cfg.solver
    try:
        x = solve_equilibrium(dense, np.array(flat.x0), tol=s.equilibrium_tol,
                              max_iter=s.equilibrium_max_iter,
                              quanta=flat.dq if s.snap_equilibrium else None,
                              snap_tol=s.snap_tol)
    except EquilibriumError as exc:
        raise StageFailure("equilibrium", str(exc)) from None
    res = float(np.max(np.abs(dense.f(0.0, x))))
    system = build_system(p, dict(zip(flat.labels, x.tolist())))
    phases = []
    cur = p
    for d in cfg.disturbances:
        nxt = copy_params(cur)
        set_param(nxt, d.param, d.new_value(float(get_param(cur, d.param))))
        phases.append((d.at, d, nxt))
        cur = nxt
    return Prepared(p, system, dense, x, res, s.snap_equilibrium, phases)


def choose_grid(prep: Prepared, cfg: ScenarioConfig) -> dict:
    """Reference step: ``step_factor / |lambda_max|`` over every phase, put on a
    uniform grid that contains each disturbance time when possible."""
    lam = 0.0
    for sys in [prep.dense] + [build_dense_system(build_system(pp)) for _, _, pp in prep.phases]:
        lam = max(lam, float(np.max(np.abs(spectrum(sys, prep.x_eq)))))
    h_max = cfg.solver.step if cfg.solver.step > 0.0 else cfg.solver.step_factor / lam
    T = cfg.horizon
    n0 = max(1, math.ceil(T / h_max - 1e-9))
    steps = n0
    times = [d.at for d in cfg.disturbances]
    for n in range(n0, n0 + 10_000):
        if all(abs(t * n / T - round(t * n / T)) < 1e-9 for t in times):
            steps = n
            break
    h = T / steps
    off = max((abs(t / h - round(t / h)) * h for t in times), default=0.0)
    return {"h": h, "steps": steps, "lambda_max": lam, "h_max": h_max,
            "rule": "fixed" if cfg.solver.step > 0.0 else f"{cfg.solver.step_factor}/|lambda_max|",
            "disturbance_grid_offset": off}


# ===== stages =====


def _engine_disturbances(prep: Prepared) -> list[Disturbance]:
    out = []
    for t, spec, pp in prep.phases:
        def apply(pp=pp):
            return dict(enumerate(build_system(pp).closures))
        out.append(Disturbance(t, apply, spec.label or spec.param))
    return out


def run_qdl(prep: Prepared, cfg: ScenarioConfig, h: float) -> RunResult:
    ec = EngineConfig(t_end=cfg.horizon, event_cap=cfg.solver.event_cap, record="events",
                      sample_dt=h, snap_initial=prep.snapped)
    return run_engine(prep.system, ec, _engine_disturbances(prep))


def run_reference(prep: Prepared, cfg: ScenarioConfig, h: float) -> Trajectory:
    s = cfg.solver
    rc = RadauConfig(h, newton_tol=s.newton_tol, max_newton=s.max_newton, jac_every=s.jac_every)
    switches = [(t, build_dense_system(build_system(pp))) for t, _, pp in prep.phases]
    return integrate(prep.dense, prep.x_eq, 0.0, cfg.horizon, rc, switches)


def qdl_on_grid(res: RunResult, grid: np.ndarray) -> np.ndarray:
    """Zero-order hold of every atom's output onto ``grid`` (rows = samples)."""
    t = np.frombuffer(res.log.t, dtype=float)
    a = np.frombuffer(res.log.atom, dtype=np.int64)
    q = np.frombuffer(res.log.q, dtype=float)
    out = np.empty((grid.size, len(res.labels)))
    for j in range(len(res.labels)):
        m = a == j
        out[:, j] = resample_zoh(t[m], q[m], grid, initial=res.q0[j]).values
    return out


def counts_on_grid(res: RunResult, n_rows: int) -> np.ndarray:
    c = np.array(res.grid_count, dtype=float).reshape(-1, len(res.labels))
    if c.shape[0] < n_rows:
        pad = np.tile(np.array(res.updates, dtype=float), (n_rows - c.shape[0], 1))
        c = np.vstack([c, pad])
    return c[:n_rows]


@dataclass
class Comparison:
    unfiltered: DeviationReport
    filtered: DeviationReport | None
    filter_note: str
    qdl: np.ndarray
    qdl_filtered: np.ndarray | None


def compare(labels: Sequence[str], grid: np.ndarray, ref: np.ndarray, qdl: np.ndarray,
            updates: Sequence[int], horizon: float, cutoff_hz: float,
            order: int = 6) -> Comparison:
    rep = deviation_report(labels, ref, qdl, updates, horizon, title="QDL vs reference")
    filt, fq, note = None, None, "disabled"
    if cutoff_hz > 0.0:
        fs = 1.0 / float(np.mean(np.diff(grid)))
        if cutoff_hz >= fs / 2.0:
            note = f"skipped: cutoff {cutoff_hz} Hz is not below Nyquist {fs / 2.0:.6g} Hz"
        elif grid.size <= 3 * order:
            note = "skipped: series too short for the padding"
        else:
            spec = FilterSpec(cutoff_hz, fs, order)
            fq = filtfilt(butterworth_sos(spec), qdl, 3 * order)
            filt = deviation_report(labels, ref, fq, updates, horizon,
                                    title=f"QDL (zero-phase low-pass {cutoff_hz:g} Hz) vs reference")
            note = f"order {order}, cutoff {cutoff_hz:g} Hz, sample rate {fs:.9g} Hz"
    return Comparison(rep, filt, note, qdl, fq)


# ===== artifact writers =====


def write_matrix_csv(path, grid, labels, data, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write(",".join(["t", *labels]) + "\n")
        for t, row in zip(grid.tolist(), data.tolist()):
            fh.write(",".join([repr(t), *map(repr, row)]) + "\n")


def write_plot_data(path, grid, ref, qdl, cum, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("t,ref,qdl,cumulative_updates\n")
        fh.write("".join(f"{t!r},{r!r},{q!r},{int(c)}\n"
                         for t, r, q, c in zip(grid.tolist(), ref.tolist(), qdl.tolist(),
                                               cum.tolist())))


def read_matrix_csv(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Inverse of write_matrix_csv / Trajectory.write_csv: (labels, t, rows)."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    if not rows or rows[0][0] != "t":
        raise ValueError(f"{path}: expected a header row starting with 't'")
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(rows[0]))
    return rows[0][1:], data[:, 0], data[:, 1:]


# ===== orchestration =====


def _event_summary(res: RunResult) -> dict:
    return {
        "internal": int(sum(res.n_internal)),
        "external": int(sum(res.n_external)),
        "total": int(res.total_updates),
        "logged": len(res.log),
        "per_atom": {lab: [int(i), int(e)]
                     for lab, i, e in zip(res.labels, res.n_internal, res.n_external)},
    }


def execute(cfg: ScenarioConfig, command: str = "run", out_dir=None) -> RunManifest:
    """Run the stages for ``command`` ("run", "qdl" or "reference") and write artifacts."""
    if command not in ("run", "qdl", "reference"):
        raise ValueError(f"unknown command {command!r}")
    out = Path(out_dir or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    man = RunManifest(command, cfg.name, cfg.hash(), cfg.canonical())
    writers = []
    try:
        _stages(cfg, command, man, writers)
    except StageFailure as exc:
        man.error = {"stage": exc.stage, "message": exc.message}
    except ConfigError as exc:
        man.error = {"stage": "config", "message": str(exc)}
    # the manifest hash is final only now, so artifacts are written last
    header = man.header()
    for name, fn in writers:
        fn(out / name, header)
    man.write(out / "manifest.json")
    return man


def _timed(man: RunManifest, stage: str, fn, *args):
    t0 = time.perf_counter()
    try:
        result = fn(*args)
    except StageFailure:
        man.stages[stage] = "failed"
        raise
    except SOLVER_ERRORS as exc:
        man.stages[stage] = "failed"
        raise StageFailure(stage, f"{type(exc).__name__}: {exc}") from None
    finally:
        man.wall_time[stage] = time.perf_counter() - t0
    man.stages[stage] = "ok"
    return result


def _stages(cfg: ScenarioConfig, command: str, man: RunManifest, writers: list) -> None:
    prep = _timed(man, "equilibrium", prepare, cfg)
    labels = prep.labels
    man.quanta = dict(zip(labels, prep.system.dq))
    man.initial_state = dict(zip(labels, prep.x_eq.tolist()))
    grid_info = _timed(man, "step_selection", choose_grid, prep, cfg)
    h = grid_info["h"]
    s = cfg.solver
    man.solver = {
        "h": h, "steps": grid_info["steps"], "h_rule": grid_info["rule"],
        "lambda_max": grid_info["lambda_max"],
        "disturbance_grid_offset": grid_info["disturbance_grid_offset"],
        "newton_tol": s.newton_tol, "max_newton": s.max_newton, "jac_every": s.jac_every,
        "equilibrium_tol": s.equilibrium_tol, "equilibrium_residual": prep.residual,
        "snap_equilibrium": s.snap_equilibrium, "event_cap": s.event_cap,
    }

    res = None
    if command in ("run", "qdl"):
        res = _timed(man, "qdl", run_qdl, prep, cfg, h)
        man.events = _event_summary(res)
        man.truncated = res.truncated
        man.t_stop = res.t_stop
        man.artifacts.append("events.csv")
        if cfg.output.event_log:
            writers.append(("events.csv", res.log.write_csv))
        else:
            man.artifacts.pop()
        if res.truncated:
            # the horizon was not reached; nothing downstream is comparable
            for st in ("reference", "analysis"):
                if command == "run":
                    man.stages[st] = "skipped (truncated)"
            return

    traj = None
    if command in ("run", "reference"):
        traj = _timed(man, "reference", run_reference, prep, cfg, h)
        man.artifacts.append("reference.csv")
        writers.append(("reference.csv", traj.write_csv))

    if command != "run":
        return

    grid = traj.t
    qg = qdl_on_grid(res, grid)
    cum = counts_on_grid(res, grid.size)
    cmp = _timed(man, "analysis", compare, labels, grid, traj.x, qg, res.updates, cfg.horizon,
                 cfg.output.cutoff_hz, cfg.output.filter_order)
    man.stages["filter"] = cmp.filter_note
    man.artifacts += ["qdl_resampled.csv", "deviation.csv", "summary.txt"]
    writers.append(("qdl_resampled.csv",
                    lambda p, hd: write_matrix_csv(p, grid, labels, qg, hd)))
    writers.append(("deviation.csv", cmp.unfiltered.write_csv))
    text = cmp.unfiltered.summary()
    if cmp.filtered is not None:
        man.artifacts.append("deviation_filtered.csv")
        writers.append(("deviation_filtered.csv", cmp.filtered.write_csv))
        text += "\n\n" + cmp.filtered.summary()
    writers.append(("summary.txt", lambda p, hd: Path(p).write_text(
        "".join(f"# {x}\n" for x in hd) + text + "\n")))
    for lab in cfg.output.plot_states or tuple(labels):
        j = labels.index(lab)
        name = f"plot/{lab}.csv"
        man.artifacts.append(name)
        writers.append((name, lambda p, hd, j=j: (
            p.parent.mkdir(exist_ok=True),
            write_plot_data(p, grid, traj.x[:, j], qg[:, j], cum[:, j], hd))))
