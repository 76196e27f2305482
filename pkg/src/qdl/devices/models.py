"""Device rate laws and their expansion into network elements.

Machines use the d/q axes of the synchronous-machine rotor, which is also the
network frame.  The generator follows the generator current convention
(stator current positive out of the machine); the induction motor follows the
motor convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

from ..lim import GROUND, LimBranch, LimNode, NetlistGraph, StateEquation, Term
from .params import (CableParams, ExciterParams, GovernorParams, InductionMachineParams,
                     RectifierParams, RLLoadParams, SyncMachineParams)

_S0 = 2.0 * math.sqrt(3.0 * math.sqrt(3.0) / (2.0 * math.pi))
# |S| below this is treated as a singular coupling
_S_MIN = 1e-12


class SingularCouplingError(ValueError):
    """The rectifier switching function vanishes where it is divided by."""


class DuplicateAttachmentError(ValueError):
    """A device name was expanded twice into the same netlist."""


class MissingBusError(KeyError):
    """A device was attached to a bus that does not exist."""


@dataclass(frozen=True)
class DqValue:
    d: float
    q: float

    def __post_init__(self):
        if not (math.isfinite(self.d) and math.isfinite(self.q)):
            raise ValueError("dq components must be finite")

    @property
    def magnitude(self) -> float:
        return math.hypot(self.d, self.q)


# ===== rectifier =====


def switching_functions(phi: float) -> tuple[float, float]:
    """(S_d, S_q) of the averaged transformer-rectifier."""
    return _S0 * math.cos(phi), -_S0 * math.sin(phi)


def rectifier_coupling(phi: float, i_dc: float, v_d: float, v_q: float,
                       form: str = "printed") -> tuple[float, float, float]:
    """ac-side currents (i_gd, i_gq) and dc-side source voltage v_g."""
    s_d, s_q = switching_functions(phi)
    i_gd = s_d * i_dc
    i_gq = s_q * i_dc
    if form == "printed":
        if abs(s_d) < _S_MIN or abs(s_q) < _S_MIN:
            raise SingularCouplingError(f"switching function vanishes at phi = {phi}")
        v_g = v_q / s_q + v_d / s_d
    elif form == "product":
        v_g = s_q * v_q + s_d * v_d
    else:
        raise ValueError(f"unknown v_g form {form!r}")
    return i_gd, i_gq, v_g


def _vg_coefficients(p: RectifierParams) -> tuple[float, float]:
    s_d, s_q = switching_functions(p.phi)
    if p.vg_form == "product":
        return s_d, s_q
    if abs(s_d) < _S_MIN or abs(s_q) < _S_MIN:
        raise SingularCouplingError(f"switching function vanishes at phi = {p.phi}")
    return 1.0 / s_d, 1.0 / s_q


# ===== synchronous machine =====


class SyncMachineConstants(NamedTuple):
    L_q: float
    L_d: float
    k_q: float
    c_kd: float
    c_fd: float


def sync_machine_constants(p: SyncMachineParams) -> SyncMachineConstants:
    L_q = p.L_ls + p.L_mq * p.L_lkq / (p.L_lkq + p.L_mq)
    L_d = p.L_ls + (p.L_md * p.L_lfd * p.L_lkd) / (
        p.L_md * p.L_lfd + p.L_md * p.L_lkd + p.L_lfd * p.L_lkd)
    k_q = p.L_mq / (p.L_mq + p.L_lkq)
    den = 1.0 + p.L_md / p.L_lfd + p.L_md / p.L_lkd
    return SyncMachineConstants(L_q, L_d, k_q, p.L_md / p.L_lkd / den, p.L_md / p.L_lfd / den)


class SyncMachineRates(NamedTuple):
    psi_q: float
    psi_d: float
    dpsi_kq: float
    dpsi_kd: float
    dpsi_fd: float
    di_qs: float
    di_ds: float
    T_e: float
    dw_r: float


def sync_machine_rates(p: SyncMachineParams, i_qs: float, i_ds: float, psi_kq: float,
                       psi_kd: float, psi_fd: float, w_r: float, v_qs: float = 0.0,
                       v_ds: float = 0.0, v_fd: float = 0.0, T_m: float = 0.0) -> SyncMachineRates:
    """All machine derivatives for given terminal voltages, field voltage and shaft torque."""
    L_q, L_d, k_q, c_kd, c_fd = sync_machine_constants(p)
    psi_q = k_q * psi_kq
    psi_d = c_kd * psi_kd + c_fd * psi_fd
    psi_mq = psi_q - (L_q - p.L_ls) * i_qs
    psi_md = psi_d - (L_d - p.L_ls) * i_ds
    dkq = p.r_kq / p.L_lkq * (psi_mq - psi_kq)
    dkd = p.r_kd / p.L_lkd * (psi_md - psi_kd)
    dfd = v_fd + p.r_fd / p.L_lfd * (psi_md - psi_fd)
    psi_qs = psi_q - L_q * i_qs
    psi_ds = psi_d - L_d * i_ds
    di_qs = (-v_qs - p.r_s * i_qs + w_r * psi_ds + k_q * dkq) / L_q
    di_ds = (-v_ds - p.r_s * i_ds - w_r * psi_qs + c_kd * dkd + c_fd * dfd) / L_d
    T_e = 1.5 * p.P * (psi_ds * i_qs - psi_qs * i_ds)
    return SyncMachineRates(psi_q, psi_d, dkq, dkd, dfd, di_qs, di_ds, T_e, (T_m - T_e) / p.J)


def governor_torque(p: GovernorParams, w_r: float, theta_r: float) -> tuple[float, float]:
    """(T_m, dtheta_r/dt) of the PI turbine-governor."""
    delta = p.w_s - w_r
    return p.K_p * delta + p.K_i * theta_r, delta


# ===== exciter =====


class ExciterRates(NamedTuple):
    dx1: float
    dx2: float
    dx3: float
    dvfd: float
    v_t: float
    v_fd: float


def terminal_voltage_pu(p: ExciterParams, v_qs: float, v_ds: float) -> float:
    return math.sqrt(v_qs * v_qs + v_ds * v_ds) / p.V_base_LL


def field_voltage_base(p: SyncMachineParams, w_s: float, v_base: float) -> float:
    """Field voltage that holds rated open-circuit terminal voltage at speed w_s."""
    return p.r_fd * v_base / (w_s * p.L_md)


def exciter_rates(p: ExciterParams, v_qs: float, v_ds: float, x1: float, x2: float,
                  x3: float, vfd: float, vfd_base: float = 1.0) -> ExciterRates:
    """AC8B derivatives driven by the voltage error V_ref - v_t; v_fd returned in volts."""
    v_t = terminal_voltage_pu(p, v_qs, v_ds)
    err = p.V_ref - v_t
    dx1 = err - x1 / p.T_dr
    dx2 = x1
    dx3 = ((p.K_ir - p.K_dr / p.T_dr ** 2) * x1 + (p.K_ir / p.T_dr) * x2 - x3 / p.T_a
           + (p.K_dr / p.T_dr + p.K_pr) * err)
    dvfd = p.K_a / (p.T_a * p.T_e) * x3 - (p.K_e / p.T_e) * vfd
    return ExciterRates(dx1, dx2, dx3, dvfd, v_t, vfd * vfd_base)


# ===== induction machine =====


class InductionMachineRates(NamedTuple):
    di_qs: float
    di_ds: float
    di_qr: float
    di_dr: float
    T_e: float
    dw_r: float


def induction_fluxes(p: InductionMachineParams, i_qs, i_ds, i_qr, i_dr):
    psi_qs = p.L_ls * i_qs + p.L_m * (i_qs + i_qr)
    psi_ds = p.L_ls * i_ds + p.L_m * (i_ds + i_dr)
    psi_qr = p.L_lr * i_qr + p.L_m * (i_qr + i_qs)
    psi_dr = p.L_lr * i_dr + p.L_m * (i_dr + i_ds)
    return psi_qs, psi_ds, psi_qr, psi_dr


def induction_machine_rates(p: InductionMachineParams, i_qs: float, i_ds: float, i_qr: float,
                            i_dr: float, w_r: float, v_qs: float, v_ds: float) -> InductionMachineRates:
    """Current derivatives from the four voltage equations with a shorted rotor."""
    psi_qs, psi_ds, psi_qr, psi_dr = induction_fluxes(p, i_qs, i_ds, i_qr, i_dr)
    slip = p.w_s - w_r
    r_qs = v_qs - p.R_s * i_qs - p.w_s * psi_ds
    r_ds = v_ds - p.R_s * i_ds + p.w_s * psi_qs
    r_qr = -p.R_r * i_qr - slip * psi_dr
    r_dr = -p.R_r * i_dr + slip * psi_qr
    l_ss = p.L_ls + p.L_m
    l_rr = p.L_lr + p.L_m
    det = l_ss * l_rr - p.L_m ** 2
    di_qs = (l_rr * r_qs - p.L_m * r_qr) / det
    di_qr = (l_ss * r_qr - p.L_m * r_qs) / det
    di_ds = (l_rr * r_ds - p.L_m * r_dr) / det
    di_dr = (l_ss * r_dr - p.L_m * r_ds) / det
    T_e = 0.75 * p.P * (psi_ds * i_qs - psi_qs * i_ds)
    dw = p.P / (2.0 * p.J) * (T_e - p.T_b * (w_r / p.w_s) ** 3)
    return InductionMachineRates(di_qs, di_ds, di_qr, di_dr, T_e, dw)


# ===== expansion into network elements =====


@dataclass
class BusShunt:
    C: float = 0.0
    G: float = 0.0
    # latency-only capacitance: slows the node but injects no reactive current
    C_lat: float = 0.0


def _claim(net: NetlistGraph, name: str) -> None:
    prefix = name + "."
    if any(n.startswith(prefix) for n in net.atom_names()):
        raise DuplicateAttachmentError(f"device {name!r} is already in the netlist")


def _require_bus(buses, *names) -> None:
    for b in names:
        if b not in buses:
            raise MissingBusError(f"bus {b!r} does not exist")


def bus_node_names(bus: str) -> tuple[str, str]:
    return f"{bus}.vd", f"{bus}.vq"


def expand_bus(net: NetlistGraph, bus: str, shunt: BusShunt, w: float,
               v0: tuple[float, float] = (0.0, 0.0), dq: float = 1e-3) -> None:
    """Two node atoms with the rotating-frame shunt (G + jwC) plus latency capacitance."""
    nd, nq = bus_node_names(bus)
    c = shunt.C + shunt.C_lat
    if not c > 0.0:
        raise ValueError(f"bus {bus!r} has no capacitance to provide voltage latency")
    net.add(LimNode(nd, C=c, G=shunt.G, vccs=[(nq, w * shunt.C)], v0=v0[0], dq=dq),
            LimNode(nq, C=c, G=shunt.G, vccs=[(nd, -w * shunt.C)], v0=v0[1], dq=dq))


def expand_cable(net: NetlistGraph, name: str, p: CableParams, bus1: str, bus2: str,
                 shunts: dict[str, BusShunt], dq: float = 1e-2) -> None:
    """Series (R + jwL) branch pair; the C/2 and G/2 halves go to the bus shunts."""
    _claim(net, name)
    _require_bus(shunts, bus1, bus2)
    d1, q1 = bus_node_names(bus1)
    d2, q2 = bus_node_names(bus2)
    wl = p.w * p.L
    net.add(LimBranch(f"{name}.id", d1, d2, L=p.L, R=p.R, ccvs=[(f"{name}.iq", wl)], dq=dq),
            LimBranch(f"{name}.iq", q1, q2, L=p.L, R=p.R, ccvs=[(f"{name}.id", -wl)], dq=dq))
    for b in (bus1, bus2):
        shunts[b].C += p.C / 2.0
        shunts[b].G += p.G / 2.0


def expand_rl_load(net: NetlistGraph, name: str, p: RLLoadParams, bus: str,
                   buses, dq: float = 1e-2) -> None:
    """Series RL to ground; the admittance scale divides R and L."""
    _claim(net, name)
    _require_bus(buses, bus)
    nd, nq = bus_node_names(bus)
    L = p.L / p.admittance_scale
    R = p.R / p.admittance_scale
    wl = p.w * L
    net.add(LimBranch(f"{name}.id", nd, GROUND, L=L, R=R, ccvs=[(f"{name}.iq", wl)], dq=dq),
            LimBranch(f"{name}.iq", nq, GROUND, L=L, R=R, ccvs=[(f"{name}.id", -wl)], dq=dq))


def expand_rectifier(net: NetlistGraph, name: str, p: RectifierParams, bus: str, buses,
                     dq_i: float = 1e-2, dq_v: float = 1e-3, i0: float = 0.0,
                     v0: float = 0.0) -> None:
    """dc branch driven by v_g, dc node with the resistive load, ac injections S * i_dc."""
    _claim(net, name)
    _require_bus(buses, bus)
    nd, nq = bus_node_names(bus)
    k_d, k_q = _vg_coefficients(p)
    s_d, s_q = switching_functions(p.phi)
    idc, vdc = f"{name}.idc", f"{name}.vdc"
    net.add(LimBranch(idc, GROUND, vdc, L=p.L_dc, R=p.R_dc, vcvs=[(nd, k_d), (nq, k_q)],
                      i0=i0, dq=dq_i),
            LimNode(vdc, C=p.C_dc, G=p.G_load, v0=v0, dq=dq_v))
    net.node(nd).ccics.append((idc, -s_d))
    net.node(nq).ccics.append((idc, -s_q))


def expand_sync_machine(net: NetlistGraph, name: str, p: SyncMachineParams, gov: GovernorParams,
                        bus: str, buses, vfd_ref: str, vfd_scale: float,
                        dq: dict[str, float], x0: dict[str, float] | None = None) -> None:
    """Stator branch pair, three rotor flux states, speed node and governor angle.

    ``vfd_ref`` names the atom that supplies the per-unit field voltage, scaled
    by ``vfd_scale`` volts per unit.
    """
    _claim(net, name)
    _require_bus(buses, bus)
    x0 = x0 or {}
    nd, nq = bus_node_names(bus)
    L_q, L_d, k_q, c_kd, c_fd = sync_machine_constants(p)
    iqs, ids = f"{name}.iqs", f"{name}.ids"
    kq, kd, fd = f"{name}.psi_kq", f"{name}.psi_kd", f"{name}.psi_fd"
    wr, th = f"{name}.wr", f"{name}.theta"
    a_kq = p.r_kq / p.L_lkq
    a_kd = p.r_kd / p.L_lkd
    a_fd = p.r_fd / p.L_lfd
    lmq = L_q - p.L_ls
    lmd = L_d - p.L_ls

    def build_eq(ix):
        i_qs, i_ds, j_kq, j_kd, j_fd, j_wr = ix[iqs], ix[ids], ix[kq], ix[kd], ix[fd], ix[wr]

        def e_q(q):
            psi_q = k_q * q[j_kq]
            dkq = a_kq * (psi_q - lmq * q[i_qs] - q[j_kq])
            return q[j_wr] * (c_kd * q[j_kd] + c_fd * q[j_fd] - L_d * q[i_ds]) + k_q * dkq
        return e_q

    def build_ed(ix):
        i_qs, i_ds, j_kq, j_kd, j_fd, j_wr = ix[iqs], ix[ids], ix[kq], ix[kd], ix[fd], ix[wr]
        j_vfd = ix[vfd_ref]

        def e_d(q):
            psi_md = c_kd * q[j_kd] + c_fd * q[j_fd] - lmd * q[i_ds]
            dkd = a_kd * (psi_md - q[j_kd])
            dfd = vfd_scale * q[j_vfd] + a_fd * (psi_md - q[j_fd])
            return -q[j_wr] * (k_q * q[j_kq] - L_q * q[i_qs]) + c_kd * dkd + c_fd * dfd
        return e_d

    def build_te(ix):
        i_qs, i_ds, j_kq, j_kd, j_fd = ix[iqs], ix[ids], ix[kq], ix[kd], ix[fd]
        kt = 1.5 * p.P

        def neg_te(q):
            a = q[i_qs]
            b = q[i_ds]
            psi_ds = c_kd * q[j_kd] + c_fd * q[j_fd] - L_d * b
            psi_qs = k_q * q[j_kq] - L_q * a
            return -kt * (psi_ds * a - psi_qs * b)
        return neg_te

    net.add(
        LimBranch(iqs, GROUND, nq, L=L_q, R=p.r_s,
                  extra=Term((iqs, ids, kq, kd, fd, wr), build_eq),
                  i0=x0.get(iqs, 0.0), dq=dq["A"]),
        LimBranch(ids, GROUND, nd, L=L_d, R=p.r_s,
                  extra=Term((iqs, ids, kq, kd, fd, wr, vfd_ref), build_ed),
                  i0=x0.get(ids, 0.0), dq=dq["A"]),
        StateEquation.linear(kq, 0.0, [(kq, a_kq * (k_q - 1.0)), (iqs, -a_kq * lmq)],
                             x0=x0.get(kq, 0.0), dq=dq["Wb"], units="Wb"),
        StateEquation.linear(kd, 0.0, [(kd, a_kd * (c_kd - 1.0)), (fd, a_kd * c_fd),
                                       (ids, -a_kd * lmd)],
                             x0=x0.get(kd, 0.0), dq=dq["Wb"], units="Wb"),
        StateEquation.linear(fd, 0.0, [(fd, a_fd * (c_fd - 1.0)), (kd, a_fd * c_kd),
                                       (ids, -a_fd * lmd), (vfd_ref, vfd_scale)],
                             x0=x0.get(fd, 0.0), dq=dq["Wb"], units="Wb"),
        # J dw/dt = T_m - T_e with T_m = K_p (w_s - w) + K_i theta
        LimNode(wr, C=p.J, G=gov.K_p, H=gov.K_p * gov.w_s, ccics=[(th, gov.K_i)],
                extra=Term((iqs, ids, kq, kd, fd), build_te),
                v0=x0.get(wr, gov.w_s), dq=dq["rad/s"], units="rad/s"),
        StateEquation.linear(th, gov.w_s, [(wr, -1.0)], x0=x0.get(th, 0.0),
                             dq=dq["rad"], units="rad"),
    )


def expand_exciter(net: NetlistGraph, name: str, p: ExciterParams, bus: str, buses,
                   dq: float = 1e-5, x0: dict[str, float] | None = None) -> str:
    """Four AC8B states regulating the magnitude of ``bus``; returns the v_fd atom name."""
    _claim(net, name)
    _require_bus(buses, bus)
    x0 = x0 or {}
    nd, nq = bus_node_names(bus)
    x1, x2, x3, vfd = (f"{name}.{s}" for s in ("x1", "x2", "x3", "vfd"))
    inv_v = 1.0 / p.V_base_LL
    vref = p.V_ref

    def err_term(gain):
        def build(ix):
            jd, jq = ix[nd], ix[nq]
            sqrt = math.sqrt

            def err(q):
                a = q[jd]
                b = q[jq]
                return gain * (vref - sqrt(a * a + b * b) * inv_v)
            return err
        return Term((nd, nq), build)

    g3 = p.K_dr / p.T_dr + p.K_pr
    net.add(
        StateEquation.linear(x1, 0.0, [(x1, -1.0 / p.T_dr)], extra=err_term(1.0),
                             x0=x0.get(x1, 0.0), dq=dq, units="pu"),
        StateEquation.linear(x2, 0.0, [(x1, 1.0)], x0=x0.get(x2, 0.0), dq=dq, units="pu"),
        StateEquation.linear(x3, 0.0, [(x1, p.K_ir - p.K_dr / p.T_dr ** 2),
                                       (x2, p.K_ir / p.T_dr), (x3, -1.0 / p.T_a)],
                             extra=err_term(g3), x0=x0.get(x3, 0.0), dq=dq, units="pu"),
        StateEquation.linear(vfd, 0.0, [(x3, p.K_a / (p.T_a * p.T_e)), (vfd, -p.K_e / p.T_e)],
                             x0=x0.get(vfd, 0.0), dq=dq, units="pu"),
    )
    return vfd


def expand_induction_machine(net: NetlistGraph, name: str, p: InductionMachineParams, bus: str,
                             buses, dq: dict[str, float], x0: dict[str, float] | None = None) -> None:
    """Four current states from the inverted inductance matrix plus rotor speed."""
    _claim(net, name)
    _require_bus(buses, bus)
    x0 = x0 or {}
    nd, nq = bus_node_names(bus)
    iqs, ids, iqr, idr, wr = (f"{name}.{s}" for s in ("iqs", "ids", "iqr", "idr", "wr"))
    l_ss = p.L_ls + p.L_m
    l_rr = p.L_lr + p.L_m
    lm = p.L_m
    det = l_ss * l_rr - lm * lm
    ws = p.w_s
    Rs, Rr = p.R_s, p.R_r
    reads = (iqs, ids, iqr, idr, wr, nd, nq)

    # (coefficient on stator rhs, coefficient on rotor rhs) for each row
    rows = {iqs: ("q", l_rr / det, -lm / det), iqr: ("q", -lm / det, l_ss / det),
            ids: ("d", l_rr / det, -lm / det), idr: ("d", -lm / det, l_ss / det)}

    def make(atom):
        axis, cs, cr = rows[atom]

        def build(ix):
            a_qs, a_ds, a_qr, a_dr, a_wr, a_vd, a_vq = (ix[r] for r in reads)
            if axis == "q":
                def f(q):
                    i_qs = q[a_qs]
                    i_qr = q[a_qr]
                    psi_ds = l_ss * q[a_ds] + lm * q[a_dr]
                    psi_dr = l_rr * q[a_dr] + lm * q[a_ds]
                    r_s = q[a_vq] - Rs * i_qs - ws * psi_ds
                    r_r = -Rr * i_qr - (ws - q[a_wr]) * psi_dr
                    return cs * r_s + cr * r_r
            else:
                def f(q):
                    i_ds = q[a_ds]
                    i_dr = q[a_dr]
                    psi_qs = l_ss * q[a_qs] + lm * q[a_qr]
                    psi_qr = l_rr * q[a_qr] + lm * q[a_qs]
                    r_s = q[a_vd] - Rs * i_ds + ws * psi_qs
                    r_r = -Rr * i_dr + (ws - q[a_wr]) * psi_qr
                    return cs * r_s + cr * r_r
            return f
        return build

    def build_w(ix):
        a_qs, a_ds, a_qr, a_dr, a_wr = (ix[r] for r in reads[:5])
        kt = 0.75 * p.P
        g = p.P / (2.0 * p.J)
        tb = p.T_b

        def f(q):
            # psi_ds*i_qs - psi_qs*i_ds reduces to L_m (i_dr i_qs - i_qr i_ds)
            te = kt * lm * (q[a_dr] * q[a_qs] - q[a_qr] * q[a_ds])
            r = q[a_wr] / ws
            return g * (te - tb * r * r * r)
        return f

    for atom in (iqs, ids, iqr, idr):
        net.add(StateEquation(atom, reads, make(atom), x0=x0.get(atom, 0.0), dq=dq["A"],
                              units="A"))
    net.add(StateEquation(wr, reads[:5], build_w, x0=x0.get(wr, ws), dq=dq["rad/s"],
                          units="rad/s"))
    net.node(nq).ccics.append((iqs, -1.0))
    net.node(nd).ccics.append((ids, -1.0))
