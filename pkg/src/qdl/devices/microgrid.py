"""The bundled three-bus microgrid.

bus1: synchronous generator with governor and AC8B exciter
bus2: induction motor
bus3: series RL load and transformer-rectifier feeding a resistor
Cables join 1-2, 1-3 and 2-3.
"""

from __future__ import annotations

import copy
import dataclasses
from typing import Any, Mapping

from ..engine import QdlSystem
from ..lim import NetlistGraph, assemble
from .models import (BusShunt, expand_bus, expand_cable, expand_exciter,
                     expand_induction_machine, expand_rectifier, expand_rl_load,
                     expand_sync_machine)
from .params import MicrogridParams

BUSES = ("bus1", "bus2", "bus3")
CABLES = (("cable12", "bus1", "bus2"), ("cable13", "bus1", "bus3"), ("cable23", "bus2", "bus3"))


def build_netlist(p: MicrogridParams, x0: Mapping[str, float] | None = None) -> NetlistGraph:
    x0 = dict(x0 or {})
    qp = p.quanta
    dq = {u: qp.for_unit(u) for u in ("V", "A", "rad/s", "Wb", "rad", "pu")}
    net = NetlistGraph()

    shunts = {b: BusShunt(0.0, p.bus.G, p.bus.C_lat) for b in BUSES}
    # shunt capacitance must be known before the bus nodes are created
    cable_net = NetlistGraph()
    for name, b1, b2 in CABLES:
        expand_cable(cable_net, name, getattr(p, name), b1, b2, shunts, dq=dq["A"])
    for b in BUSES:
        expand_bus(net, b, shunts[b], p.cable12.w,
                   v0=(x0.get(f"{b}.vd", 0.0), x0.get(f"{b}.vq", 0.0)), dq=dq["V"])
    for br in cable_net.branches:
        br.i0 = x0.get(br.name, 0.0)
        net.add(br)

    vfd = expand_exciter(net, "avr", p.avr, "bus1", shunts, dq=dq["pu"], x0=x0)
    expand_sync_machine(net, "sm", p.sm, p.gov, "bus1", shunts, vfd_ref=vfd,
                        vfd_scale=p.avr.V_base_LL,
                        dq=dq, x0=x0)
    expand_induction_machine(net, "im", p.im, "bus2", shunts, dq=dq, x0=x0)
    expand_rl_load(net, "rl", p.rl, "bus3", shunts, dq=dq["A"])
    expand_rectifier(net, "tr", p.tr, "bus3", shunts, dq_i=dq["A"], dq_v=dq["V"],
                     i0=x0.get("tr.idc", 0.0), v0=x0.get("tr.vdc", 0.0))
    for br in net.branches:
        if br.name in x0:
            br.i0 = x0[br.name]
    for el in net.nodes + net.states:
        if el.name in qp.overrides:
            el.dq = qp.overrides[el.name]
    for br in net.branches:
        if br.name in qp.overrides:
            br.dq = qp.overrides[br.name]
    return net


def build_system(p: MicrogridParams, x0: Mapping[str, float] | None = None) -> QdlSystem:
    return assemble(build_netlist(p, x0))


def flat_start(p: MicrogridParams) -> dict[str, float]:
    """Rated q-axis voltage on every bus, synchronous speeds, zero currents."""
    guess = {}
    for b in BUSES:
        guess[f"{b}.vq"] = p.avr.V_base_LL * p.avr.V_ref
    guess["sm.wr"] = p.gov.w_s
    guess["im.wr"] = p.im.w_s
    # field flux that produces rated open-circuit voltage
    guess["sm.psi_fd"] = p.avr.V_base_LL / p.gov.w_s
    guess["sm.psi_kd"] = p.avr.V_base_LL / p.gov.w_s
    return guess


# ===== parameter paths =====


def get_param(p: MicrogridParams, path: str) -> Any:
    obj: Any = p
    for part in path.split("."):
        if isinstance(obj, dict):
            if part not in obj:
                raise KeyError(path)
            obj = obj[part]
        elif dataclasses.is_dataclass(obj) and part in {f.name for f in dataclasses.fields(obj)}:
            obj = getattr(obj, part)
        else:
            raise KeyError(path)
    return obj


def set_param(p: MicrogridParams, path: str, value: Any) -> None:
    head, _, leaf = path.rpartition(".")
    parent = get_param(p, head) if head else p
    if isinstance(parent, dict):
        parent[leaf] = value
        return
    if not dataclasses.is_dataclass(parent) or leaf not in {f.name for f in dataclasses.fields(parent)}:
        raise KeyError(path)
    setattr(parent, leaf, value)
    # re-run range checks
    if hasattr(parent, "__post_init__"):
        parent.__post_init__()


def copy_params(p: MicrogridParams) -> MicrogridParams:
    return copy.deepcopy(p)
