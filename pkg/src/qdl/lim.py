"""Latency-insertion network elements and netlist assembly.

Nodes carry a capacitance (voltage latency), branches an inductance (current
latency).  Dependent sources are kept as sparse (reference, coefficient)
lists.  Assembly turns every node and branch into one atom whose derivative
is generated as straight-line Python code over the shared output vector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .engine import DerivativeClosure, QdlSystem

GROUND = "0"

# factory receiving the name -> atom id map and returning f(q) -> float
Builder = Callable[[Mapping[str, int]], Callable[[list], float]]


class NetlistError(ValueError):
    """Base class for netlist validation failures."""


class DanglingPortError(NetlistError):
    """A branch endpoint does not name any node."""


class UnresolvedReferenceError(NetlistError):
    """A dependent source refers to an unknown variable."""


class ParallelVoltageSourceError(NetlistError):
    """Two ideal voltage sources impose the same node."""


class SeriesCurrentSourceError(NetlistError):
    """Two ideal current branches meet at a node with nothing else attached."""


@dataclass(frozen=True)
class Term:
    """Nonlinear dependent source evaluated by a device-supplied builder."""

    reads: tuple[str, ...]
    build: Builder


@dataclass
class LimNode:
    name: str
    C: float
    G: float = 0.0
    H: float = 0.0
    vccs: list[tuple[str, float]] = field(default_factory=list)
    ccics: list[tuple[str, float]] = field(default_factory=list)
    extra: Term | None = None
    v0: float = 0.0
    dq: float = 1e-3
    units: str = "V"

    def __post_init__(self):
        if not self.C > 0.0:
            raise ValueError(f"node {self.name}: C must be positive")


@dataclass
class LimBranch:
    name: str
    i: str
    j: str
    L: float
    R: float = 0.0
    e: float = 0.0
    vcvs: list[tuple[str, float]] = field(default_factory=list)
    ccvs: list[tuple[str, float]] = field(default_factory=list)
    extra: Term | None = None
    i0: float = 0.0
    dq: float = 1e-2
    units: str = "A"

    def __post_init__(self):
        if not self.L > 0.0:
            raise ValueError(f"branch {self.name}: L must be positive")
        if self.i == self.j:
            raise ValueError(f"branch {self.name}: endpoints must differ")


@dataclass
class IdealSource:
    """Externally controlled voltage node or current branch (no atom)."""

    name: str
    kind: str
    value: float
    node: str = ""
    i: str = ""
    j: str = ""

    def __post_init__(self):
        if self.kind not in ("voltage", "current"):
            raise ValueError(f"source {self.name}: kind must be 'voltage' or 'current'")
        if self.kind == "voltage" and not self.node:
            raise ValueError(f"source {self.name}: voltage source needs a node")
        if self.kind == "current" and (not self.i or not self.j or self.i == self.j):
            raise ValueError(f"source {self.name}: current source needs two distinct endpoints")


@dataclass
class StateEquation:
    """Plain ODE atom for states that are not node voltages or branch currents."""

    name: str
    reads: tuple[str, ...]
    build: Builder
    x0: float = 0.0
    dq: float = 1e-3
    units: str = ""

    @classmethod
    def linear(cls, name: str, const: float, coeffs: Sequence[tuple[str, float]],
               extra: Term | None = None, **kw) -> "StateEquation":
        """dx/dt = const + sum(c * ref) (+ extra)."""
        coeffs = list(coeffs)
        reads = tuple(_live(coeffs)) + (extra.reads if extra else ())

        def build(index):
            lin = [(_ref_code(index, r, {}), c) for r, c in coeffs]
            return _compile(_sum_code(const, lin), extra, index, 1.0)
        return cls(name, reads, build, **kw)


@dataclass
class NetlistGraph:
    nodes: list[LimNode] = field(default_factory=list)
    branches: list[LimBranch] = field(default_factory=list)
    sources: list[IdealSource] = field(default_factory=list)
    states: list[StateEquation] = field(default_factory=list)

    def add(self, *elements) -> None:
        for el in elements:
            if isinstance(el, LimNode):
                self.nodes.append(el)
            elif isinstance(el, LimBranch):
                self.branches.append(el)
            elif isinstance(el, IdealSource):
                self.sources.append(el)
            elif isinstance(el, StateEquation):
                self.states.append(el)
            else:
                raise TypeError(f"cannot add {type(el).__name__} to a netlist")

    def node(self, name: str) -> LimNode:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def branch(self, name: str) -> LimBranch:
        for b in self.branches:
            if b.name == name:
                return b
        raise KeyError(name)

    def atom_names(self) -> list[str]:
        return ([n.name for n in self.nodes] + [b.name for b in self.branches]
                + [s.name for s in self.states])

    def voltage_sources(self) -> dict[str, float]:
        return {s.node: s.value for s in self.sources if s.kind == "voltage"}

    def incidence(self) -> dict[str, list[tuple[str, int]]]:
        """node -> [(branch, sign)], sign +1 where the branch current enters the node."""
        inc: dict[str, list[tuple[str, int]]] = {n.name: [] for n in self.nodes}
        for s in self.sources:
            if s.kind == "voltage":
                inc.setdefault(s.node, [])
        for b in self.branches:
            for node, sign in ((b.i, -1), (b.j, +1)):
                if node != GROUND:
                    inc.setdefault(node, []).append((b.name, sign))
        for s in self.sources:
            if s.kind == "current":
                for node, sign in ((s.i, -1), (s.j, +1)):
                    if node != GROUND:
                        inc.setdefault(node, []).append((s.name, sign))
        return inc

    def validate(self) -> None:
        names = self.atom_names() + [s.name for s in self.sources]
        seen = set()
        for n in names:
            if n == GROUND:
                raise NetlistError(f"{GROUND!r} is reserved for ground")
            if n in seen:
                raise NetlistError(f"duplicate element name {n!r}")
            seen.add(n)

        node_names = {n.name for n in self.nodes}
        vnodes: dict[str, str] = {}
        for s in self.sources:
            if s.kind != "voltage":
                continue
            if s.node in vnodes or s.node in node_names:
                raise ParallelVoltageSourceError(
                    f"ideal voltage source {s.name} is in parallel with "
                    f"{vnodes.get(s.node, s.node)} at node {s.node}")
            vnodes[s.node] = s.name
        ports = node_names | set(vnodes) | {GROUND}

        for b in self.branches:
            for end in (b.i, b.j):
                if end not in ports:
                    raise DanglingPortError(f"branch {b.name} endpoint {end!r} is not a node")
        for s in self.sources:
            if s.kind == "current":
                for end in (s.i, s.j):
                    if end not in ports:
                        raise DanglingPortError(f"current source {s.name} endpoint {end!r} is not a node")

        isrc = {s.name for s in self.sources if s.kind == "current"}
        for node, elems in self.incidence().items():
            if node == GROUND:
                continue
            cur = [e for e, _ in elems if e in isrc]
            if len(cur) >= 2 and len(cur) == len(elems):
                raise SeriesCurrentSourceError(
                    f"ideal current branches {', '.join(cur)} are in series at node {node}")

        known = set(self.atom_names()) | set(vnodes) | isrc
        for el, refs in self._references():
            for r in refs:
                if r not in known:
                    raise UnresolvedReferenceError(f"{el} refers to unknown variable {r!r}")

    def _references(self):
        for n in self.nodes:
            refs = [r for r, _ in n.vccs] + [r for r, _ in n.ccics]
            yield n.name, refs + list(n.extra.reads if n.extra else ())
        for b in self.branches:
            refs = [r for r, _ in b.vcvs] + [r for r, _ in b.ccvs]
            yield b.name, refs + list(b.extra.reads if b.extra else ())
        for s in self.states:
            yield s.name, list(s.reads)


# ===== scalar rate laws =====


def node_rate(node: LimNode, v_i: float, controlling: Mapping[str, float],
              injected: Sequence[float] = ()) -> float:
    """dv/dt of a node; injected branch currents are positive into the node."""
    s = node.H - node.G * v_i
    for k, b in node.vccs:
        s += b * _lookup(controlling, k, node.name)
    for p, c in node.ccics:
        s += c * _lookup(controlling, p, node.name)
    for i in injected:
        s += i
    return s / node.C


def branch_rate(branch: LimBranch, i_ij: float, v_i: float, v_j: float,
                controlling: Mapping[str, float]) -> float:
    """di/dt of a branch carrying ``i_ij`` from node i to node j."""
    s = v_i - v_j - branch.R * i_ij + branch.e
    for k, t in branch.vcvs:
        s += t * _lookup(controlling, k, branch.name)
    for p, z in branch.ccvs:
        s += z * _lookup(controlling, p, branch.name)
    return s / branch.L


def _lookup(values: Mapping[str, float], key: str, owner: str) -> float:
    try:
        return values[key]
    except KeyError:
        raise UnresolvedReferenceError(f"{owner}: no value for {key!r}") from None


# ===== code generation =====


def _ref_code(index: Mapping[str, int], ref: str, fixed: Mapping[str, float]) -> str:
    if ref == GROUND:
        return "0.0"
    if ref in fixed:
        return repr(float(fixed[ref]))
    return f"q[{index[ref]}]"


def _sum_code(const: float, lin: Sequence[tuple[str, float]]) -> str:
    # unit coefficients and a zero constant are dropped; both are exact in IEEE arithmetic
    parts = [repr(float(const))] if const != 0.0 else []
    for code, c in lin:
        if c == 0.0 or code == "0.0":
            continue
        if c == 1.0:
            parts.append(code)
        elif c == -1.0:
            parts.append(f"-{code}")
        else:
            parts.append(f"{c!r}*{code}")
    return " + ".join(parts) if parts else "0.0"


def _compile(body: str, extra: Term | None, index: Mapping[str, int], denom: float):
    env: dict = {}
    if extra is not None:
        env["_x"] = extra.build(index)
        body = f"{body} + _x(q)"
    if denom != 1.0:
        body = f"({body}) / {denom!r}"
    return eval(f"lambda q: {body}", env)


def _live(pairs) -> list[str]:
    # zero coefficients generate no code, so they are not dependencies either
    return [r for r, c in pairs if c != 0.0]


def _deps(index: Mapping[str, int], refs) -> tuple[int, ...]:
    return tuple(sorted({index[r] for r in refs if r in index}))


def assemble(net: NetlistGraph) -> QdlSystem:
    """Validate the netlist and build one atom per node, branch and state equation."""
    net.validate()
    names = net.atom_names()
    index = {n: k for k, n in enumerate(names)}
    fixed = net.voltage_sources()
    isrc = {s.name: s.value for s in net.sources if s.kind == "current"}
    fixed_all = {**fixed, **isrc}
    inc = net.incidence()

    labels, x0, dq, units, closures = [], [], [], [], []

    for n in net.nodes:
        lin = [(_ref_code(index, n.name, fixed_all), -n.G)]
        lin += [(_ref_code(index, k, fixed_all), b) for k, b in n.vccs]
        lin += [(_ref_code(index, p, fixed_all), c) for p, c in n.ccics]
        lin += [(_ref_code(index, br, fixed_all), float(sign)) for br, sign in inc[n.name]]
        fn = _compile(_sum_code(n.H, lin), n.extra, index, n.C)
        refs = ([n.name] + _live(n.vccs) + _live(n.ccics)
                + [br for br, _ in inc[n.name]] + list(n.extra.reads if n.extra else ()))
        closures.append(DerivativeClosure(fn, _deps(index, refs)))
        labels.append(n.name)
        x0.append(n.v0)
        dq.append(n.dq)
        units.append(n.units)

    for b in net.branches:
        lin = [(_ref_code(index, b.i, fixed_all), 1.0), (_ref_code(index, b.j, fixed_all), -1.0),
               (_ref_code(index, b.name, fixed_all), -b.R)]
        lin += [(_ref_code(index, k, fixed_all), t) for k, t in b.vcvs]
        lin += [(_ref_code(index, p, fixed_all), z) for p, z in b.ccvs]
        fn = _compile(_sum_code(b.e, lin), b.extra, index, b.L)
        refs = ([b.name, b.i, b.j] + _live(b.vcvs) + _live(b.ccvs)
                + list(b.extra.reads if b.extra else ()))
        closures.append(DerivativeClosure(fn, _deps(index, refs)))
        labels.append(b.name)
        x0.append(b.i0)
        dq.append(b.dq)
        units.append(b.units)

    for s in net.states:
        fn = s.build(index)
        closures.append(DerivativeClosure(fn, _deps(index, (s.name,) + tuple(s.reads))))
        labels.append(s.name)
        x0.append(s.x0)
        dq.append(s.dq)
        units.append(s.units)

    return QdlSystem(labels, x0, dq, closures, units)
