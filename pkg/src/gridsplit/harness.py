"""Experiment runner: centralized reference, partitioning, distributed solve, reports."""

from __future__ import annotations

import configparser
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .acopf import KktJacobian, OpfOptions, OpfSolution, kkt_jacobian, solve_centralized_opf
from .admm import AdmmOptions, run_admm
from .network import AdmittanceMatrix, NetworkCase, build_admittance, load_case
from .partitioning import (
    Partition,
    PartitionQuality,
    affinity_matrix,
    electrical_distance_partition,
    partition_quality,
    read_partition,
    spectral_partition,
    write_partition,
)

log = logging.getLogger(__name__)

METHODS = ("sp", "ep", "file")


class ExperimentError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, reason: str):
        self.stage = stage
        super().__init__(f"{stage}: {reason}")


def compute_gap(dist_objective: float, cent_objective: float) -> float:
    """Relative objective difference in percent, positive when the distributed cost is higher."""
    if cent_objective is None or not np.isfinite(cent_objective):
        raise ExperimentError("centralized", "no centralized objective available")
    if cent_objective <= 0:
        raise ValueError("centralized objective must be positive")
    return 100.0 * (dist_objective - cent_objective) / cent_objective


def read_line_limit_file(case: NetworkCase, path: str | Path) -> np.ndarray:
    """Branch indices listed in ``path`` as ``from_bus to_bus`` pairs, one per line.

    Every in-service branch joining the pair (either orientation) is limited.
    """
    pairs = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'from_bus to_bus'")
        pairs.append((int(parts[0]), int(parts[1])))
    found = []
    for a, b in pairs:
        hits = [k for k, br in enumerate(case.branches) if {br.from_bus, br.to_bus} == {a, b}]
        if not hits:
            raise ValueError(f"{path}: no branch between buses {a} and {b}")
        found.extend(hits)
    return np.unique(np.asarray(found, dtype=int))


def resolve_line_limits(case: NetworkCase, mode: str | Sequence[int]):
    """``none``/``all`` pass through; any other string is a branch-list file."""
    if isinstance(mode, str) and mode not in ("none", "all"):
        return [int(k) for k in read_line_limit_file(case, mode)]
    return mode


@dataclass
class ExperimentConfig:
    case: str
    method: str = "sp"
    regions: list[int] = field(default_factory=lambda: [2])
    partition_file: Optional[str] = None
    trials: int = 30
    seed: int = 0
    line_limits: str = "none"
    admm: AdmmOptions = field(default_factory=AdmmOptions)
    out_dir: str = "results"

    def __post_init__(self):
        if isinstance(self.regions, int):
            self.regions = [self.regions]
        self.regions = [int(k) for k in self.regions]
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not self.regions or min(self.regions) < 1:
            raise ValueError("every region count must be >= 1")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.method == "file":
            if not self.partition_file:
                raise ValueError("method 'file' needs partition_file")
            if not Path(self.partition_file).is_file():
                raise FileNotFoundError(self.partition_file)
        if isinstance(self.line_limits, str) and self.line_limits not in ("none", "all"):
            if not Path(self.line_limits).is_file():
                raise FileNotFoundError(self.line_limits)
        if not Path(self.case).is_file() and not _is_bundled(self.case):
            raise FileNotFoundError(self.case)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "ExperimentConfig":
        """Read an ``[experiment]`` section (and optional ``[admm]``) from an INI file.

        Relative paths are resolved against the config file's directory.
        """
        path = Path(path)
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        if not cp.has_section("experiment"):
            raise ValueError(f"{path}: missing [experiment] section")
        ex = cp["experiment"]
        base = path.parent

        def rel(p: str | None) -> str | None:
            if p is None or _is_bundled(p) or p in ("none", "all") or Path(p).is_absolute():
                return p
            return str(base / p)

        kw = dict(
            case=rel(ex.get("case")),
            method=ex.get("method", "sp"),
            regions=_int_list(ex.get("regions", "2")),
            partition_file=rel(ex.get("partition")),
            trials=ex.getint("trials", 30),
            seed=ex.getint("seed", 0),
            line_limits=rel(ex.get("line_limits", "none")),
            out_dir=rel(ex.get("out", "results")),
        )
        if kw["case"] is None:
            raise ValueError(f"{path}: [experiment] needs 'case'")
        admm_kw = {}
        if cp.has_section("admm"):
            types = {f.name: f.type for f in fields(AdmmOptions)}
            for key, val in cp["admm"].items():
                name = key.replace("-", "_")
                if name not in types:
                    raise ValueError(f"{path}: unknown [admm] option {key!r}")
                admm_kw[name] = _coerce(val, AdmmOptions.__dataclass_fields__[name].default)
        admm_over = overrides.pop("admm", {}) or {}
        admm_kw.update(admm_over)
        kw.update({k: v for k, v in overrides.items() if v is not None})
        kw["admm"] = AdmmOptions(**admm_kw)
        return cls(**kw)


def _is_bundled(name: str) -> bool:
    return (Path(__file__).parent / "data" / f"{name}.m").is_file()


def _int_list(text: str) -> list[int]:
    out: list[int] = []
    for part in text.replace(",", " ").split():
        if ".." in part:
            lo, rest = part.split("..")
            hi, _, step = rest.partition(":")
            out.extend(range(int(lo), int(hi) + 1, int(step or 1)))
        else:
            out.append(int(part))
    return out


def _coerce(val: str, default):
    if isinstance(default, bool):
        return val.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(float(val))
    if isinstance(default, float):
        return float(val)
    return val


@dataclass
class ExperimentReport:
    case: str
    method: str
    regions: int
    converged: bool
    iterations: int
    est_parallel_time: float
    gap_percent: Optional[float]
    centralized_objective: Optional[float]
    distributed_objective: Optional[float]
    quality: Optional[dict]
    trace_path: Optional[str]
    partition_path: Optional[str]
    status: str = ""
    failed_stage: Optional[str] = None
    error: Optional[str] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


@dataclass
class Reference:
    """Everything shared by the runs of one sweep: case, centralized optimum, H."""

    case: NetworkCase
    adm: AdmittanceMatrix
    line_limits: object
    solution: Optional[OpfSolution] = None
    H: Optional[KktJacobian] = None
    affinity: Optional[np.ndarray] = None
    error: Optional[ExperimentError] = None


def prepare_reference(config: ExperimentConfig, need_affinity: bool | None = None) -> Reference:
    try:
        case = load_case(config.case)
        adm = build_admittance(case)
        limits = resolve_line_limits(case, config.line_limits)
    except Exception as exc:
        raise ExperimentError("parse", str(exc)) from exc
    ref = Reference(case, adm, limits)
    try:
        ref.solution = solve_centralized_opf(case, OpfOptions(line_limits=limits), adm)
    except Exception as exc:
        ref.error = ExperimentError("centralized", str(exc))
        return ref
    if need_affinity if need_affinity is not None else config.method == "sp":
        try:
            ref.H = kkt_jacobian(case, ref.solution)
            ref.affinity = affinity_matrix(ref.H, adm)
        except Exception as exc:
            ref.error = ExperimentError("affinity", str(exc))
    return ref


def make_partition(config: ExperimentConfig, ref: Reference, K: int) -> tuple[Partition, PartitionQuality | None]:
    case = ref.case
    if config.method == "file":
        part = read_partition(config.partition_file, case)
        return part, None
    if config.method == "ep":
        return electrical_distance_partition(case, K, seed=config.seed), None
    if ref.affinity is None:
        raise ExperimentError("affinity", str(ref.error) if ref.error else "affinity unavailable")
    return spectral_partition(ref.affinity, K, config.trials, config.seed, case.bus_ids)


def run_experiment(
    config: ExperimentConfig, K: int | None = None, reference: Reference | None = None, out_dir: str | Path | None = None
) -> ExperimentReport:
    """One partition-then-solve run; writes trace.csv, partition.txt and summary.json.

    Stage failures are reported rather than raised, except a bad case file.
    """
    K = config.regions[0] if K is None else K
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ref = reference or prepare_reference(config)
    case = ref.case
    report = ExperimentReport(
        case=case.name or str(config.case),
        method=config.method,
        regions=K,
        converged=False,
        iterations=0,
        est_parallel_time=0.0,
        gap_percent=None,
        centralized_objective=ref.solution.objective if ref.solution else None,
        distributed_objective=None,
        quality=None,
        trace_path=None,
        partition_path=None,
        status="failed",
    )

    stage = "partition"
    try:
        part, sp_quality = make_partition(config, ref, K)
        report.regions = part.K
        part_path = out / "partition.txt"
        write_partition(part, part_path)
        report.partition_path = str(part_path)
        q = partition_quality(case, part, ref.H)
        if sp_quality is not None:
            q.distortion, q.trial = sp_quality.distortion, sp_quality.trial
        report.quality = {
            "sizes": part.sizes().tolist(),
            "max_region_size": q.max_region_size,
            "tie_lines": q.tie_line_count,
            "connected": q.connected,
            "boundary_score": q.boundary_score,
            "distortion": q.distortion,
            "trial": q.trial,
            "unreachable": list(q.unreachable),
        }

        stage = "admm"
        opts = replace(config.admm, line_limits=ref.line_limits)
        t0 = time.perf_counter()
        res = run_admm(case, part, opts, ref.adm)
        log.info("K=%d: %s after %d iterations (%.1f s)", part.K, res.status, res.iterations, time.perf_counter() - t0)
        trace_path = out / "trace.csv"
        res.trace.write_csv(trace_path)
        report.trace_path = str(trace_path)
        report.converged = res.converged
        report.iterations = res.iterations
        report.est_parallel_time = res.est_parallel_time
        report.distributed_objective = res.objective
        report.status = res.status

        stage = "gap"
        if ref.solution is None:
            raise ref.error or ExperimentError("centralized", "no solution")
        report.gap_percent = compute_gap(res.objective, ref.solution.objective)
    except ExperimentError as exc:
        report.failed_stage, report.error = exc.stage, str(exc)
    except Exception as exc:
        report.failed_stage, report.error = stage, f"{type(exc).__name__}: {exc}"
    if report.failed_stage:
        log.warning("run K=%d failed at stage %s: %s", K, report.failed_stage, report.error)
    (out / "summary.json").write_text(report.to_json() + "\n")
    return report


def sweep_regions(config: ExperimentConfig) -> list[ExperimentReport]:
    """``run_experiment`` for every K in ``config.regions`` with one shared reference.

    Each run writes into ``<out_dir>/K<k>``; a per-K failure does not stop the sweep.
    """
    ref = prepare_reference(config)
    root = Path(config.out_dir)
    reports = [run_experiment(config, K, ref, root / f"K{K}") for K in config.regions]
    root.mkdir(parents=True, exist_ok=True)
    (root / "sweep.json").write_text(
        json.dumps([asdict(r) for r in reports], indent=2, default=_json_default) + "\n"
    )
    return reports
