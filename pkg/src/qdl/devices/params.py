"""Parameter records for the bundled microgrid devices.

Values are a self-consistent default set for a small 4160 V, 60 Hz system.
dq quantities are scaled so that |v_dq| equals the line-line RMS voltage.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

OMEGA_S = 2.0 * math.pi * 60.0
V_BASE_LL = 4160.0


@dataclass
class CableParams:
    R: float = 0.8
    L: float = 4.0e-3
    C: float = 40.0e-6
    G: float = 0.0
    w: float = OMEGA_S

    def __post_init__(self):
        if not (self.L > 0.0 and self.C > 0.0):
            raise ValueError("cable L and C must be positive")


@dataclass
class RLLoadParams:
    R: float = 200.0
    L: float = 0.24
    w: float = OMEGA_S
    # multiplies the load admittance; 1.2 raises active power by 20 %
    admittance_scale: float = 1.0

    def __post_init__(self):
        if not (self.R >= 0.0 and self.L > 0.0 and self.admittance_scale > 0.0):
            raise ValueError("RL load needs R >= 0, L > 0 and a positive admittance scale")


@dataclass
class RectifierParams:
    phi: float = -math.pi / 4.0
    L_dc: float = 5.0e-3
    R_dc: float = 0.5
    C_dc: float = 1.0e-3
    G_load: float = 1.0 / 21.0
    # "printed" uses v_g = v_q/S_q + v_d/S_d, "product" uses S_q v_q + S_d v_d
    vg_form: str = "printed"

    def __post_init__(self):
        if not (self.L_dc > 0.0 and self.C_dc > 0.0 and self.R_dc >= 0.0 and self.G_load >= 0.0):
            raise ValueError("rectifier dc side needs L, C > 0 and R, G >= 0")
        if self.vg_form not in ("printed", "product"):
            raise ValueError(f"unknown v_g form {self.vg_form!r}")


@dataclass
class SyncMachineParams:
    r_s: float = 0.02
    L_ls: float = 1.6e-3
    L_mq: float = 16.0e-3
    L_md: float = 16.0e-3
    r_kq: float = 0.04
    L_lkq: float = 0.32e-3
    r_kd: float = 0.04
    L_lkd: float = 0.32e-3
    r_fd: float = 0.16
    L_lfd: float = 1.2e-3
    P: int = 4
    J: float = 4000.0
    V_base_LL: float = V_BASE_LL

    def __post_init__(self):
        for k in ("L_ls", "L_mq", "L_md", "L_lkq", "L_lkd", "L_lfd", "J"):
            if not getattr(self, k) > 0.0:
                raise ValueError(f"synchronous machine {k} must be positive")
        if self.P <= 0 or self.P % 2:
            raise ValueError("pole count must be a positive even number")


@dataclass
class GovernorParams:
    K_p: float = 3000.0
    K_i: float = 25000.0
    w_s: float = OMEGA_S

    def __post_init__(self):
        if not self.w_s > 0.0:
            raise ValueError("synchronous speed must be positive")


@dataclass
class ExciterParams:
    K_pr: float = 2.0
    K_ir: float = 0.8
    K_dr: float = 1.0e-3
    T_dr: float = 0.01
    # v_fd is v_fd,pu times V_base_LL, so K_a carries the field-voltage base ratio
    K_a: float = 0.0265
    T_a: float = 0.01
    K_e: float = 1.0
    T_e: float = 1.0
    V_ref: float = 1.0
    V_base_LL: float = V_BASE_LL

    def __post_init__(self):
        for k in ("T_dr", "T_a", "T_e"):
            if not getattr(self, k) > 0.0:
                raise ValueError(f"exciter {k} must be positive")


@dataclass
class InductionMachineParams:
    R_s: float = 0.3
    R_r: float = 0.25
    L_ls: float = 6.0e-3
    L_lr: float = 6.0e-3
    L_m: float = 0.35
    P: int = 4
    J: float = 5.0
    T_b: float = 2650.0
    w_s: float = OMEGA_S

    def __post_init__(self):
        det = (self.L_ls + self.L_m) * (self.L_lr + self.L_m) - self.L_m ** 2
        if not det > 0.0:
            raise ValueError("induction machine inductance matrix is singular")
        if not self.J > 0.0:
            raise ValueError("induction machine inertia must be positive")


@dataclass
class BusParams:
    # latency capacitance added to every bus; acts on d/dt only, so it leaves
    # the steady state untouched (the cable halves carry the physical jwC)
    C_lat: float = 1.0e-2
    G: float = 0.0

    def __post_init__(self):
        if not (self.C_lat >= 0.0 and self.G >= 0.0):
            raise ValueError("bus latency capacitance and conductance must be non-negative")


@dataclass
class QuantaParams:
    voltage: float = 1.0e-3
    current: float = 1.0e-2
    speed: float = 1.0e-4
    flux: float = 1.0e-4
    angle: float = 1.0e-4
    per_unit: float = 1.0e-5
    overrides: dict[str, float] = field(default_factory=dict)

    def for_unit(self, units: str) -> float:
        return {"V": self.voltage, "A": self.current, "rad/s": self.speed,
                "Wb": self.flux, "rad": self.angle, "pu": self.per_unit}[units]


@dataclass
class MicrogridParams:
    sm: SyncMachineParams = field(default_factory=SyncMachineParams)
    gov: GovernorParams = field(default_factory=GovernorParams)
    avr: ExciterParams = field(default_factory=ExciterParams)
    im: InductionMachineParams = field(default_factory=InductionMachineParams)
    rl: RLLoadParams = field(default_factory=RLLoadParams)
    tr: RectifierParams = field(default_factory=RectifierParams)
    cable12: CableParams = field(default_factory=CableParams)
    cable13: CableParams = field(default_factory=CableParams)
    cable23: CableParams = field(default_factory=CableParams)
    bus: BusParams = field(default_factory=BusParams)
    quanta: QuantaParams = field(default_factory=QuantaParams)
