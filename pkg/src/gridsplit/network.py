"""Case data model, MATPOWER/JSON parsing, and nodal admittance assembly.

All quantities held by :class:`NetworkCase` are per-unit on ``base_mva``
(angles in radians). Input documents carry MATPOWER units (MW, MVAr, MVA,
degrees) and are converted once, at parse time.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class CaseSyntaxError(ValueError):
    """Malformed case document. ``line`` is 1-based (0 when unknown)."""

    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


class CaseValidationError(ValueError):
    """A parsed case violates a structural invariant."""


@dataclass(frozen=True)
class Bus:
    id: int
    p_load: float = 0.0
    q_load: float = 0.0
    v_min: float = 0.9
    v_max: float = 1.1
    shunt_g: float = 0.0
    shunt_b: float = 0.0
    is_reference: bool = False
    bus_type: int = 1
    v_mag: float = 1.0
    v_ang: float = 0.0
    base_kv: float = 0.0


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    series_r: float
    series_x: float
    charging_b: float = 0.0
    tap_ratio: float = 1.0
    phase_shift: float = 0.0
    s_max: float = 0.0  # 0 means unlimited

    @property
    def impedance(self) -> complex:
        return complex(self.series_r, self.series_x)


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    q_min: float
    q_max: float
    cost_a: float = 0.0  # $/MW^2h
    cost_b: float = 0.0  # $/MWh
    cost_c: float = 0.0  # $/h
    p_gen: float = 0.0
    q_gen: float = 0.0
    v_set: float = 1.0


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        validate(self)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_branch(self) -> int:
        return len(self.branches)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @cached_property
    def bus_ids(self) -> np.ndarray:
        return np.array([b.id for b in self.buses], dtype=int)

    @cached_property
    def reference_index(self) -> int:
        return next(k for k, b in enumerate(self.buses) if b.is_reference)

    @cached_property
    def branch_from(self) -> np.ndarray:
        return np.array([self.bus_index[br.from_bus] for br in self.branches], dtype=int)

    @cached_property
    def branch_to(self) -> np.ndarray:
        return np.array([self.bus_index[br.to_bus] for br in self.branches], dtype=int)

    @cached_property
    def gen_bus(self) -> np.ndarray:
        return np.array([self.bus_index[g.bus] for g in self.generators], dtype=int)

    @cached_property
    def load(self) -> np.ndarray:
        """Complex per-bus load in p.u."""
        return np.array([complex(b.p_load, b.q_load) for b in self.buses])

    def gen_array(self, attr: str) -> np.ndarray:
        return np.array([getattr(g, attr) for g in self.generators], dtype=float)

    def bus_array(self, attr: str) -> np.ndarray:
        return np.array([getattr(b, attr) for b in self.buses], dtype=float)

    def mva_to_pu(self, mva: float) -> float:
        return mva / self.base_mva


def validate(case: NetworkCase) -> None:
    if not case.base_mva > 0:
        raise CaseValidationError(f"base_mva must be > 0, got {case.base_mva}")
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseValidationError("bus ids must be unique")
    refs = [b.id for b in case.buses if b.is_reference]
    if len(refs) != 1:
        raise CaseValidationError(f"exactly one reference bus required, found {len(refs)}")
    known = set(ids)
    for b in case.buses:
        if not 0 < b.v_min <= b.v_max:
            raise CaseValidationError(f"bus {b.id}: need 0 < v_min <= v_max")
    for k, br in enumerate(case.branches):
        if br.from_bus not in known or br.to_bus not in known:
            raise CaseValidationError(f"branch {k}: endpoint refers to unknown bus")
        if br.series_r**2 + br.series_x**2 <= 0:
            raise CaseValidationError(f"branch {k}: zero series impedance")
        if not br.tap_ratio > 0:
            raise CaseValidationError(f"branch {k}: tap_ratio must be > 0")
    for k, g in enumerate(case.generators):
        if g.bus not in known:
            raise CaseValidationError(f"generator {k}: refers to unknown bus {g.bus}")
        if g.p_min > g.p_max or g.q_min > g.q_max:
            raise CaseValidationError(f"generator {k}: inverted limits")
        if g.cost_a < 0:
            raise CaseValidationError(f"generator {k}: cost_a must be >= 0")


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    # MATPOWER data never contains quoted '%' characters outside of names.
    in_quote = False
    for k, ch in enumerate(line):
        if ch == "'":
            in_quote = not in_quote
        elif ch == "%" and not in_quote:
            return line[:k]
    return line


def _read_matrices(text: str) -> tuple[dict[str, float], dict[str, tuple[list[list[float]], int]]]:
    scalars: dict[str, float] = {}
    matrices: dict[str, tuple[list[list[float]], int]] = {}
    name = None
    rows: list[list[float]] = []
    row: list[float] = []
    start = 0
    skip_cell = False

    def consume(body: str, lineno: int) -> bool:
        """Feed matrix body text; True when the closing bracket is seen."""
        nonlocal row
        done = False
        if "]" in body:
            body, tail = body.split("]", 1)
            if tail.strip() not in ("", ";"):
                raise CaseSyntaxError(f"unexpected text after ']': {tail.strip()!r}", lineno)
            done = True
        for chunk_k, chunk in enumerate(body.split(";")):
            if chunk_k > 0:
                if row:
                    rows.append(row)
                row = []
            for tok in chunk.replace(",", " ").split():
                try:
                    row.append(float(tok))
                except ValueError:
                    raise CaseSyntaxError(f"bad number {tok!r} in mpc.{name}", lineno) from None
        if row and (done or not body.strip().endswith("...")):
            rows.append(row)
            row = []
        return done

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if skip_cell:
            if "}" in line:
                skip_cell = False
            continue
        if name is not None:
            if consume(line, lineno):
                matrices[name] = (rows, start)
                name = None
            continue
        if not line or line.startswith("function") or line.startswith("end"):
            continue
        m = _ASSIGN.match(line)
        if m is None:
            raise CaseSyntaxError(f"unrecognised statement {line!r}", lineno)
        key, rhs = m.group(1), m.group(2).strip()
        if rhs.startswith("["):
            name, rows, row, start = key, [], [], lineno
            if consume(rhs[1:], lineno):
                matrices[name] = (rows, start)
                name = None
        elif rhs.startswith("{"):
            skip_cell = "}" not in rhs
        elif rhs.startswith("'"):
            continue
        else:
            try:
                scalars[key] = float(rhs.rstrip(";").strip())
            except ValueError:
                raise CaseSyntaxError(f"bad scalar for mpc.{key}: {rhs!r}", lineno) from None
    if name is not None:
        raise CaseSyntaxError(f"unterminated matrix mpc.{name}", start)
    for key, (mat, lineno) in matrices.items():
        widths = {len(r) for r in mat}
        if len(widths) > 1:
            raise CaseSyntaxError(f"ragged rows in mpc.{key}", lineno)
    return scalars, matrices


def _costs_from_gencost(row: list[float], lineno: int, k: int) -> tuple[float, float, float]:
    model = int(row[0])
    if model != 2:
        raise CaseValidationError(
            f"gencost row {k + 1}: only polynomial (model 2) costs are supported, "
            f"piecewise-linear cost at line {lineno} rejected"
        )
    n = int(row[3])
    coeffs = row[4 : 4 + n]
    if n > 3 or len(coeffs) != n:
        raise CaseValidationError(f"gencost row {k + 1}: only quadratic or lower polynomials supported")
    a, b, c = ([0.0] * (3 - n) + list(coeffs))
    return a, b, c


def _case_from_matpower(text: str, name: str) -> NetworkCase:
    scalars, mats = _read_matrices(text)
    for key in ("bus", "gen", "branch", "gencost"):
        if key not in mats:
            raise CaseSyntaxError(f"missing mpc.{key}")
    if "baseMVA" not in scalars:
        raise CaseSyntaxError("missing mpc.baseMVA")
    base = scalars["baseMVA"]
    bus_rows, _ = mats["bus"]
    gen_rows, _ = mats["gen"]
    br_rows, _ = mats["branch"]
    cost_rows, cost_line = mats["gencost"]
    for key, minimum in (("bus", 13), ("gen", 10), ("branch", 11)):
        if mats[key][0] and len(mats[key][0][0]) < minimum:
            raise CaseSyntaxError(f"mpc.{key} needs at least {minimum} columns", mats[key][1])
    if len(cost_rows) != len(gen_rows):
        raise CaseValidationError("gencost must have exactly one row per generator (no reactive costs)")

    buses = [
        Bus(
            id=int(r[0]),
            bus_type=int(r[1]),
            p_load=r[2] / base,
            q_load=r[3] / base,
            shunt_g=r[4] / base,
            shunt_b=r[5] / base,
            v_mag=r[7],
            v_ang=math.radians(r[8]),
            base_kv=r[9],
            v_max=r[11],
            v_min=r[12],
            is_reference=int(r[1]) == 3,
        )
        for r in bus_rows
    ]
    gens = []
    for k, (r, c) in enumerate(zip(gen_rows, cost_rows)):
        if r[7] <= 0:
            continue
        a, b, cc = _costs_from_gencost(c, cost_line + k, k)
        gens.append(
            Generator(
                bus=int(r[0]),
                p_gen=r[1] / base,
                q_gen=r[2] / base,
                q_max=r[3] / base,
                q_min=r[4] / base,
                v_set=r[5],
                p_max=r[8] / base,
                p_min=r[9] / base,
                cost_a=a,
                cost_b=b,
                cost_c=cc,
            )
        )
    branches = [
        Branch(
            from_bus=int(r[0]),
            to_bus=int(r[1]),
            series_r=r[2],
            series_x=r[3],
            charging_b=r[4],
            s_max=r[5] / base,
            tap_ratio=r[8] if r[8] != 0 else 1.0,
            phase_shift=math.radians(r[9]),
        )
        for r in br_rows
        if r[10] > 0
    ]
    return NetworkCase(base, buses, branches, gens, name=name)


def _case_from_json(text: str, name: str) -> NetworkCase:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseSyntaxError(exc.msg, exc.lineno) from None
    try:
        base = float(doc["base_mva"])
        buses = [
            Bus(
                id=int(b["id"]),
                p_load=b.get("p_load_mw", 0.0) / base,
                q_load=b.get("q_load_mvar", 0.0) / base,
                shunt_g=b.get("shunt_g_mw", 0.0) / base,
                shunt_b=b.get("shunt_b_mvar", 0.0) / base,
                v_min=b.get("v_min", 0.9),
                v_max=b.get("v_max", 1.1),
                is_reference=bool(b.get("is_reference", False)),
                bus_type=int(b.get("bus_type", 3 if b.get("is_reference") else 1)),
                v_mag=b.get("v_mag", 1.0),
                v_ang=math.radians(b.get("v_ang_deg", 0.0)),
                base_kv=b.get("base_kv", 0.0),
            )
            for b in doc["buses"]
        ]
        branches = [
            Branch(
                from_bus=int(br["from_bus"]),
                to_bus=int(br["to_bus"]),
                series_r=br["r"],
                series_x=br["x"],
                charging_b=br.get("b", 0.0),
                tap_ratio=br.get("tap_ratio", 1.0) or 1.0,
                phase_shift=math.radians(br.get("phase_shift_deg", 0.0)),
                s_max=br.get("rate_a_mva", 0.0) / base,
            )
            for br in doc["branches"]
        ]
        gens = []
        for g in doc["generators"]:
            if "cost" in g and g["cost"].get("model", "polynomial") != "polynomial":
                raise CaseValidationError("only polynomial generator costs are supported")
            cost = g.get("cost", {})
            gens.append(
                Generator(
                    bus=int(g["bus"]),
                    p_min=g["p_min_mw"] / base,
                    p_max=g["p_max_mw"] / base,
                    q_min=g["q_min_mvar"] / base,
                    q_max=g["q_max_mvar"] / base,
                    cost_a=cost.get("a", 0.0),
                    cost_b=cost.get("b", 0.0),
                    cost_c=cost.get("c", 0.0),
                    p_gen=g.get("p_mw", 0.0) / base,
                    q_gen=g.get("q_mvar", 0.0) / base,
                    v_set=g.get("v_set", 1.0),
                )
            )
    except KeyError as exc:
        raise CaseSyntaxError(f"missing required field {exc.args[0]!r}") from None
    return NetworkCase(base, buses, branches, gens, name=name)


def parse_case(text: str, format: str = "matpower-m", name: str = "") -> NetworkCase:
    """Parse a case document.

    ``format`` is ``"matpower-m"`` (the ``mpc.*`` matrix subset of MATPOWER
    version 2 files) or ``"json"``. Out-of-service generators and branches are
    dropped.
    """
    if format in ("matpower-m", "m", "matpower"):
        return _case_from_matpower(text, name)
    if format == "json":
        return _case_from_json(text, name)
    raise ValueError(f"unknown case format {format!r}")


def load_case(path: str | Path) -> NetworkCase:
    """Read a ``.m`` or ``.json`` case file, or a bundled case by name (e.g. ``case14``)."""
    p = Path(path)
    if not p.exists():
        bundled = Path(__file__).parent / "data" / f"{p.stem}.m"
        if p.suffix in ("", ".m") and bundled.exists():
            p = bundled
        else:
            raise FileNotFoundError(path)
    fmt = "json" if p.suffix == ".json" else "matpower-m"
    return parse_case(p.read_text(), fmt, name=p.stem)


def _num(v: float) -> str:
    return repr(float(v))


def to_matpower(case: NetworkCase) -> str:
    """Serialise back to a MATPOWER ``.m`` document (polynomial costs)."""
    base = case.base_mva
    out = [f"function mpc = {case.name or 'case'}", "mpc.version = '2';", f"mpc.baseMVA = {_num(base)};", "mpc.bus = ["]
    for b in case.buses:
        btype = 3 if b.is_reference else (b.bus_type if b.bus_type != 3 else 2)
        vals = [b.p_load * base, b.q_load * base, b.shunt_g * base, b.shunt_b * base]
        out.append(
            f"\t{b.id}\t{btype}\t" + "\t".join(map(_num, vals))
            + f"\t1\t{_num(b.v_mag)}\t{_num(math.degrees(b.v_ang))}\t{_num(b.base_kv)}\t1\t{_num(b.v_max)}\t{_num(b.v_min)};"
        )
    out += ["];", "mpc.gen = ["]
    for g in case.generators:
        vals = [g.p_gen * base, g.q_gen * base, g.q_max * base, g.q_min * base, g.v_set, base, 1, g.p_max * base, g.p_min * base]
        out.append(f"\t{g.bus}\t" + "\t".join(map(_num, vals)) + ";")
    out += ["];", "mpc.branch = ["]
    for br in case.branches:
        vals = [br.series_r, br.series_x, br.charging_b, br.s_max * base, 0, 0, br.tap_ratio, math.degrees(br.phase_shift), 1, -360, 360]
        out.append(f"\t{br.from_bus}\t{br.to_bus}\t" + "\t".join(map(_num, vals)) + ";")
    out += ["];", "mpc.gencost = ["]
    for g in case.generators:
        out.append(f"\t2\t0\t0\t3\t{_num(g.cost_a)}\t{_num(g.cost_b)}\t{_num(g.cost_c)};")
    out += ["];", ""]
    return "\n".join(out)


def to_json(case: NetworkCase) -> str:
    """Serialise to the JSON case schema (MATPOWER units)."""
    base = case.base_mva
    doc = {
        "base_mva": base,
        "buses": [
            {
                "id": b.id,
                "p_load_mw": b.p_load * base,
                "q_load_mvar": b.q_load * base,
                "shunt_g_mw": b.shunt_g * base,
                "shunt_b_mvar": b.shunt_b * base,
                "v_min": b.v_min,
                "v_max": b.v_max,
                "is_reference": b.is_reference,
                "bus_type": b.bus_type,
                "v_mag": b.v_mag,
                "v_ang_deg": math.degrees(b.v_ang),
                "base_kv": b.base_kv,
            }
            for b in case.buses
        ],
        "branches": [
            {
                "from_bus": br.from_bus,
                "to_bus": br.to_bus,
                "r": br.series_r,
                "x": br.series_x,
                "b": br.charging_b,
                "tap_ratio": br.tap_ratio,
                "phase_shift_deg": math.degrees(br.phase_shift),
                "rate_a_mva": br.s_max * base,
            }
            for br in case.branches
        ],
        "generators": [
            {
                "bus": g.bus,
                "p_min_mw": g.p_min * base,
                "p_max_mw": g.p_max * base,
                "q_min_mvar": g.q_min * base,
                "q_max_mvar": g.q_max * base,
                "p_mw": g.p_gen * base,
                "q_mvar": g.q_gen * base,
                "v_set": g.v_set,
                "cost": {"model": "polynomial", "a": g.cost_a, "b": g.cost_b, "c": g.cost_c},
            }
            for g in case.generators
        ],
    }
    return json.dumps(doc, indent=1)


# ---------------------------------------------------------------------------
# Admittance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdmittanceMatrix:
    """Nodal admittance plus the per-branch two-port coefficients.

    ``Yf``/``Yt`` map bus voltages to the current injected at the from/to end
    of each branch; ``Cf``/``Ct`` are the branch-bus incidence matrices.
    """

    Y: sp.csr_matrix
    Yf: sp.csr_matrix
    Yt: sp.csr_matrix
    Cf: sp.csr_matrix
    Ct: sp.csr_matrix
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray
    shunt: np.ndarray = field(repr=False)

    def dense(self) -> np.ndarray:
        return self.Y.toarray()


def branch_coefficients(br: Branch) -> tuple[complex, complex, complex, complex]:
    """Pi-model two-port entries (yff, yft, ytf, ytt) of a single branch."""
    ys = 1.0 / complex(br.series_r, br.series_x)
    tap = br.tap_ratio * complex(math.cos(br.phase_shift), math.sin(br.phase_shift))
    ytt = ys + 0.5j * br.charging_b
    yff = ytt / (tap * tap.conjugate())
    yft = -ys / tap.conjugate()
    ytf = -ys / tap
    return yff, yft, ytf, ytt


def build_admittance(case: NetworkCase) -> AdmittanceMatrix:
    n, m = case.n_bus, case.n_branch
    coeffs = np.array([branch_coefficients(br) for br in case.branches], dtype=complex).reshape(m, 4)
    yff, yft, ytf, ytt = coeffs.T
    f, t = case.branch_from, case.branch_to
    rows = np.arange(m)
    Cf = sp.csr_matrix((np.ones(m), (rows, f)), shape=(m, n))
    Ct = sp.csr_matrix((np.ones(m), (rows, t)), shape=(m, n))
    Yf = sp.csr_matrix((np.r_[yff, yft], (np.r_[rows, rows], np.r_[f, t])), shape=(m, n))
    Yt = sp.csr_matrix((np.r_[ytf, ytt], (np.r_[rows, rows], np.r_[f, t])), shape=(m, n))
    shunt = case.bus_array("shunt_g") + 1j * case.bus_array("shunt_b")
    Y = (Cf.T @ Yf + Ct.T @ Yt + sp.diags(shunt)).tocsr()
    Y.sum_duplicates()
    return AdmittanceMatrix(Y, Yf, Yt, Cf, Ct, yff, yft, ytf, ytt, shunt)


def adjacency(case: NetworkCase) -> dict[int, set[int]]:
    """Neighbour sets keyed by bus id (self loops excluded)."""
    nbrs: dict[int, set[int]] = {b.id: set() for b in case.buses}
    for br in case.branches:
        if br.from_bus != br.to_bus:
            nbrs[br.from_bus].add(br.to_bus)
            nbrs[br.to_bus].add(br.from_bus)
    return nbrs
