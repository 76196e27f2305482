"""Dense reference path: state-space export, equilibrium and fixed-step Radau IIA.

The dense derivative calls the very same closures the event engine uses, so
the oracle and the quantized run can only differ in how they integrate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .engine import QdlSystem

SQ6 = math.sqrt(6.0)


class EquilibriumError(RuntimeError):
    def __init__(self, message: str, history: Sequence[float]):
        super().__init__(f"{message}; residual history: {', '.join(f'{r:.3e}' for r in history)}")
        self.history = list(history)


class SnapResidualError(EquilibriumError):
    """Snapping the equilibrium to the quantum grid left too large a residual."""


class StepFailure(RuntimeError):
    def __init__(self, t: float, message: str):
        super().__init__(f"Radau step at t = {t:.9g} failed: {message}")
        self.t = t


@dataclass
class DenseSystem:
    labels: list[str]
    f: Callable[[float, np.ndarray], np.ndarray]
    jac: Callable[[float, np.ndarray], np.ndarray] | None = None

    @property
    def n(self) -> int:
        return len(self.labels)

    def jacobian(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.jac is not None:
            return np.asarray(self.jac(t, x), dtype=float)
        return fd_jacobian(self.f, t, x)


def build_dense_system(system: QdlSystem) -> DenseSystem:
    """Flatten the atom closures into f(t, x) with a finite-difference Jacobian."""
    fns = [c.fn for c in system.closures]
    n = len(fns)
    readers: list[list[int]] = [[] for _ in range(n)]
    for k, c in enumerate(system.closures):
        for i in set(c.deps):
            readers[i].append(k)

    def f(t, x):
        v = x.tolist() if isinstance(x, np.ndarray) else list(x)
        return np.array([fn(v) for fn in fns])

    def jac(t, x):
        # same central differences as fd_jacobian, skipping rows that cannot change
        v = [float(a) for a in x]
        J = np.zeros((n, n))
        for i in range(n):
            h = max(1e-6, 1e-6 * abs(v[i]))
            xi = v[i]
            v[i] = xi + h
            up = [fns[k](v) for k in readers[i]]
            v[i] = xi - h
            dn = [fns[k](v) for k in readers[i]]
            v[i] = xi
            for k, a, b in zip(readers[i], up, dn):
                J[k, i] = (a - b) / (2.0 * h)
        return J

    return DenseSystem(list(system.labels), f, jac)


def linear_system(A, b=None, labels=None) -> DenseSystem:
    """x' = A x + b with its exact Jacobian; handy for tests and examples."""
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    b = np.zeros(n) if b is None else np.asarray(b, dtype=float)
    return DenseSystem(labels or [f"x{i}" for i in range(n)],
                       lambda t, x: A @ x + b, lambda t, x: A)


def fd_jacobian(f, t: float, x: np.ndarray) -> np.ndarray:
    """Central differences with step max(1e-6, 1e-6 |x_i|) per column."""
    x = np.asarray(x, dtype=float)
    n = x.size
    J = np.empty((n, n))
    for i in range(n):
        h = max(1e-6, 1e-6 * abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        J[:, i] = (f(t, xp) - f(t, xm)) / (2.0 * h)
    return J


def spectrum(sys: DenseSystem, x: np.ndarray, t: float = 0.0) -> np.ndarray:
    return np.linalg.eigvals(sys.jacobian(t, np.asarray(x, dtype=float)))


# ===== equilibrium =====


def solve_equilibrium(sys: DenseSystem, guess, tol: float = 1e-9, max_iter: int = 100,
                      quanta: Sequence[float] | None = None, snap_tol: float = 1e-6) -> np.ndarray:
    """Damped Newton on f(x) = 0, optionally snapped to the quantum grid afterwards."""
    x = np.array(guess, dtype=float)
    r = sys.f(0.0, x)
    res = float(np.max(np.abs(r))) if r.size else 0.0
    history = [res]
    it = 0
    while res > tol:
        if it >= max_iter:
            raise EquilibriumError(f"Newton did not converge in {max_iter} iterations", history)
        it += 1
        J = sys.jacobian(0.0, x)
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(J, -r, rcond=None)[0]
        alpha = 1.0
        while True:
            xn = x + alpha * step
            rn = sys.f(0.0, xn)
            resn = float(np.max(np.abs(rn)))
            # near the rounding floor residuals wander; keep taking full steps there
            if resn < res or resn <= 100.0 * tol or alpha < 1e-4:
                break
            alpha *= 0.5
        if not np.all(np.isfinite(rn)):
            raise EquilibriumError("Newton iterate left the finite range", history)
        x, r, res = xn, rn, resn
        history.append(res)
    if quanta is not None:
        dq = np.asarray(quanta, dtype=float)
        x = np.round(x / dq) * dq
        res = float(np.max(np.abs(sys.f(0.0, x))))
        history.append(res)
        if res > snap_tol:
            raise SnapResidualError(f"residual {res:.3e} after snapping exceeds {snap_tol:g}", history)
    return x


# ===== Radau IIA (3 stages, order 5) =====


def radau_tableau() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(A, b, c) of the 3-stage Radau IIA method."""
    c = np.array([(4.0 - SQ6) / 10.0, (4.0 + SQ6) / 10.0, 1.0])
    A = np.array([
        [(88.0 - 7.0 * SQ6) / 360.0, (296.0 - 169.0 * SQ6) / 1800.0, (-2.0 + 3.0 * SQ6) / 225.0],
        [(296.0 + 169.0 * SQ6) / 1800.0, (88.0 + 7.0 * SQ6) / 360.0, (-2.0 - 3.0 * SQ6) / 225.0],
        [(16.0 - SQ6) / 36.0, (16.0 + SQ6) / 36.0, 1.0 / 9.0],
    ])
    return A, A[2].copy(), c


@dataclass(frozen=True)
class RadauConfig:
    h: float
    newton_tol: float = 1e-10
    max_newton: int = 10
    # refresh the frozen Jacobian every this many steps (1 = every step)
    jac_every: int = 1

    def __post_init__(self):
        if not self.h > 0.0:
            raise ValueError("step size must be positive")
        if not self.newton_tol > 0.0:
            raise ValueError("Newton tolerance must be positive")
        if self.max_newton < 1 or self.jac_every < 1:
            raise ValueError("max_newton and jac_every must be at least 1")


_A, _B, _C = radau_tableau()
# collocation polynomial through (0, 0), (c_i, Z_i) evaluated at 1 + c_j, for warm starts
_EXTRAP = None


def _extrapolation_matrix() -> np.ndarray:
    nodes = np.concatenate([[0.0], _C])
    V = np.vander(nodes, 4, increasing=True)
    target = np.vander(1.0 + _C, 4, increasing=True)
    # value at target = target @ inv(V) @ [0, Z1, Z2, Z3]; subtract the new base Z3
    W = target @ np.linalg.inv(V)
    return W[:, 1:]


class _Stepper:
    def __init__(self, sys: DenseSystem, cfg: RadauConfig):
        self.sys = sys
        self.cfg = cfg
        self.n = sys.n
        self.lu = None
        self.age = 0
        self.z_prev: np.ndarray | None = None
        self.ext = _extrapolation_matrix()
        self.AI = np.kron(_A, np.eye(self.n))

    def _factor(self, t, x):
        J = self.sys.jacobian(t, x)
        h = self.cfg.h
        M = np.eye(3 * self.n) - h * np.kron(_A, J)
        self.lu = lu_factor(M)
        self.age = 0

    def _newton(self, t, x, z):
        n, h, cfg = self.n, self.cfg.h, self.cfg
        f = self.sys.f
        scale = 1.0 + np.abs(np.tile(x, 3))
        prev = None
        for _ in range(cfg.max_newton):
            F = np.concatenate([f(t + _C[i] * h, x + z[i * n:(i + 1) * n]) for i in range(3)])
            g = -z + h * (self.AI @ F)
            dz = lu_solve(self.lu, g)
            z = z + dz
            nrm = float(np.max(np.abs(dz) / scale))
            if not math.isfinite(nrm):
                return None
            if nrm <= cfg.newton_tol:
                return z
            if prev is not None:
                theta = nrm / prev
                if theta >= 1.0:
                    return None
                if theta / (1.0 - theta) * nrm <= cfg.newton_tol:
                    return z
            prev = nrm
        return None

    def step(self, t: float, x: np.ndarray) -> np.ndarray:
        n = self.n
        if self.lu is None or self.age >= self.cfg.jac_every:
            self._factor(t, x)
        if self.z_prev is not None:
            zp = self.z_prev.reshape(3, n)
            z0 = (self.ext @ zp - zp[2]).reshape(-1)
        else:
            z0 = np.zeros(3 * n)
        z = self._newton(t, x, z0)
        if z is None:
            # retry from a cold start, with a fresh Jacobian if the old one was stale
            if self.age > 0:
                self._factor(t, x)
            z = self._newton(t, x, np.zeros(3 * n))
        if z is None:
            raise StepFailure(t, "simplified Newton iteration did not converge")
        self.age += 1
        self.z_prev = z
        # stiffly accurate: the last stage is the step result
        return x + z[2 * n:]


def radau_step(sys: DenseSystem, t: float, x, cfg: RadauConfig) -> np.ndarray:
    """One Radau IIA step with the Jacobian frozen at (t, x)."""
    st = _Stepper(sys, RadauConfig(cfg.h, cfg.newton_tol, cfg.max_newton, 1))
    return st.step(t, np.asarray(x, dtype=float))


@dataclass
class Trajectory:
    labels: list[str]
    t: np.ndarray
    x: np.ndarray
    h: float = 0.0
    info: dict = field(default_factory=dict)

    def column(self, label: str) -> np.ndarray:
        return self.x[:, self.labels.index(label)]

    def write_csv(self, path, header_lines: Sequence[str] = ()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + list(self.labels))
            for t, row in zip(self.t, self.x):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def choose_step(sys: DenseSystem, x, factor: float = 0.1) -> float:
    """Step no larger than factor / |lambda_max| of the Jacobian at x."""
    lam = np.max(np.abs(spectrum(sys, x)))
    if lam == 0.0:
        raise ValueError("Jacobian spectrum is identically zero; give the step explicitly")
    return factor / lam


def integrate(sys: DenseSystem, x0, t0: float, t_end: float, cfg: RadauConfig,
              switches: Sequence[tuple[float, DenseSystem]] = ()) -> Trajectory:
    """Fixed-step march; ``switches`` replace the right-hand side at given grid times."""
    span = t_end - t0
    if span <= 0.0:
        raise ValueError("t_end must exceed t0")
    steps = max(1, int(round(span / cfg.h)))
    h = span / steps
    cfg = RadauConfig(h, cfg.newton_tol, cfg.max_newton, cfg.jac_every)
    x = np.array(x0, dtype=float)
    ts = t0 + h * np.arange(steps + 1)
    out = np.empty((steps + 1, x.size))
    out[0] = x
    pending = sorted(switches, key=lambda s: s[0])
    k_sw = 0
    stepper = _Stepper(sys, cfg)
    for k in range(steps):
        t = ts[k]
        while k_sw < len(pending) and pending[k_sw][0] <= t + 0.5 * h:
            stepper = _Stepper(pending[k_sw][1], cfg)
            k_sw += 1
        x = stepper.step(t, x)
        out[k + 1] = x
    return Trajectory(list(sys.labels), ts, out, h)
