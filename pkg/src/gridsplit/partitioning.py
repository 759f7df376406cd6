"""Bus partitioning: KKT/admittance affinity, spectral clustering, and the
electrical-distance baseline."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, dijkstra
from sklearn.cluster import KMeans

from .acopf import KktJacobian
from .network import AdmittanceMatrix, NetworkCase


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class Partition:
    """Region label (1..K) for every bus index, plus the bus ids they refer to."""

    labels: np.ndarray
    bus_ids: np.ndarray
    unreachable: tuple[int, ...] = ()

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=int)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "bus_ids", np.asarray(self.bus_ids, dtype=int))
        if len(labels) != len(self.bus_ids):
            raise PartitionError("labels and bus ids differ in length")
        if len(labels) and labels.min() < 1:
            raise PartitionError("region ids start at 1")

    @classmethod
    def from_assignment(cls, case: NetworkCase, assignment: dict[int, int]) -> "Partition":
        missing = set(case.bus_index) - set(assignment)
        extra = set(assignment) - set(case.bus_index)
        if missing or extra:
            raise PartitionError(f"partition/case mismatch: missing {sorted(missing)[:5]}, unknown {sorted(extra)[:5]}")
        return cls(np.array([assignment[b] for b in case.bus_ids]), case.bus_ids)

    @property
    def K(self) -> int:
        return int(self.labels.max()) if len(self.labels) else 0

    @property
    def assignment(self) -> dict[int, int]:
        return {int(b): int(k) for b, k in zip(self.bus_ids, self.labels)}

    def region_buses(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.K + 1)[1:]

    def check(self, case: NetworkCase) -> None:
        if len(self.labels) != case.n_bus or not np.array_equal(self.bus_ids, case.bus_ids):
            raise PartitionError("partition does not match the case bus list")

    def tie_lines(self, case: NetworkCase) -> list[tuple[int, int]]:
        """Ordered pairs (i, j) of bus indices on branches crossing regions, both orientations."""
        f, t = case.branch_from, case.branch_to
        cross = self.labels[f] != self.labels[t]
        pairs = set()
        for i, j in zip(f[cross], t[cross]):
            pairs.add((int(i), int(j)))
            pairs.add((int(j), int(i)))
        return sorted(pairs)

    def extended_buses(self, case: NetworkCase, k: int) -> np.ndarray:
        """Region buses followed by the sorted neighbour buses across tie lines."""
        own = self.region_buses(k)
        dup = sorted({j for i, j in self.tie_lines(case) if self.labels[i] == k})
        return np.r_[own, np.asarray(dup, dtype=int)].astype(int)

    def canonical(self) -> "Partition":
        """Relabel regions 1..K in order of their lowest bus index."""
        _, first = np.unique(self.labels, return_index=True)
        order = self.labels[np.sort(first)]
        remap = {int(old): new for new, old in enumerate(order, start=1)}
        return Partition(np.array([remap[int(v)] for v in self.labels]), self.bus_ids, self.unreachable)

    def same_as(self, other: "Partition") -> bool:
        """Equality up to relabelling of regions."""
        return np.array_equal(self.canonical().labels, other.canonical().labels)


@dataclass
class PartitionQuality:
    max_region_size: int
    tie_line_count: int
    connected: list[bool]
    boundary_score: float | None = None
    distortion: float | None = None
    trial: int | None = None
    trials: list[tuple[int, float]] = field(default_factory=list)
    unreachable: tuple[int, ...] = ()


# ---------------------------------------------------------------------------
# Affinity
# ---------------------------------------------------------------------------


def _bus_aggregator(var_bus: np.ndarray, n_bus: int) -> sp.csr_matrix:
    return sp.csr_matrix((np.ones(len(var_bus)), (var_bus, np.arange(len(var_bus)))), shape=(n_bus, len(var_bus)))


def _finish(A: np.ndarray) -> np.ndarray:
    A = 0.5 * (A + A.T)
    np.fill_diagonal(A, 0.0)
    return A


def affinity_matrix(H: KktJacobian, Y: AdmittanceMatrix | sp.spmatrix) -> np.ndarray:
    """Bus affinity ``sum_{m in S_i, n in S_j} |H_mn| + |Y_ij|``, symmetrised, zero diagonal."""
    Ybus = Y.Y if isinstance(Y, AdmittanceMatrix) else sp.csr_matrix(Y)
    n_bus = Ybus.shape[0]
    S = _bus_aggregator(H.var_bus, n_bus)
    A = (S @ abs(H.H) @ S.T).toarray() + abs(Ybus).toarray()
    return _finish(A)


def admittance_only_affinity(Y: AdmittanceMatrix | sp.spmatrix) -> np.ndarray:
    Ybus = Y.Y if isinstance(Y, AdmittanceMatrix) else sp.csr_matrix(Y)
    return _finish(abs(Ybus).toarray())


def merge_congested_tielines(
    A: np.ndarray, case: NetworkCase, congested: Iterable[int], boost: float = 10.0
) -> np.ndarray:
    """Scale the affinity of each listed branch's endpoint pair by ``boost``."""
    if boost <= 1:
        raise ValueError("boost must be > 1")
    out = np.array(A, dtype=float, copy=True)
    pairs = set()
    for k in congested:
        if not 0 <= int(k) < case.n_branch:
            raise PartitionError(f"branch {k} not in case")
        i, j = int(case.branch_from[k]), int(case.branch_to[k])
        pairs.add((min(i, j), max(i, j)))
    for i, j in pairs:
        out[i, j] *= boost
        out[j, i] *= boost
    return out


# ---------------------------------------------------------------------------
# Spectral partitioning
# ---------------------------------------------------------------------------


def spectral_embedding(A: np.ndarray, K: int) -> np.ndarray:
    """Row-normalised top-K eigenvectors of ``D^-1/2 A D^-1/2``."""
    A = np.asarray(A, dtype=float)
    d = A.sum(axis=1)
    isolated = np.flatnonzero(d <= 0)
    if len(isolated):
        raise PartitionError(f"zero-degree bus indices in affinity matrix: {isolated.tolist()}")
    dm = 1.0 / np.sqrt(d)
    L = dm[:, None] * A * dm[None, :]
    _, vecs = np.linalg.eigh(L)
    U = vecs[:, -K:][:, ::-1]
    return U / np.linalg.norm(U, axis=1, keepdims=True)


def _trial_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def region_connectivity(labels: np.ndarray, adjacency: sp.spmatrix) -> list[bool]:
    adj = sp.csr_matrix(adjacency)
    flags = []
    for k in range(1, int(labels.max()) + 1):
        idx = np.flatnonzero(labels == k)
        if len(idx) == 0:
            flags.append(False)
            continue
        ncomp, _ = connected_components(adj[idx][:, idx], directed=False)
        flags.append(ncomp == 1)
    return flags


def spectral_partition(
    A: np.ndarray,
    K: int,
    N: int = 30,
    seed: int = 0,
    bus_ids: Sequence[int] | None = None,
    workers: int | None = None,
) -> tuple[Partition, PartitionQuality]:
    """Normalised spectral clustering with ``N`` K-means trials.

    The returned partition has the smallest largest region among the trials;
    ties go to lower K-means distortion, then to the earlier trial.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    ids = np.arange(1, n + 1) if bus_ids is None else np.asarray(bus_ids)
    if K < 1:
        raise PartitionError("K must be >= 1")
    if K > n:
        raise PartitionError(f"K={K} exceeds the number of buses ({n})")
    if K == 1:
        labels = np.ones(n, dtype=int)
        q = PartitionQuality(n, 0, region_connectivity(labels, A > 0), distortion=0.0, trial=0, trials=[(n, 0.0)])
        return Partition(labels, ids), q

    X = spectral_embedding(A, K)
    seeds = _trial_seeds(seed, N)

    def trial(s: int):
        km = KMeans(n_clusters=K, init="k-means++", n_init=1, random_state=s).fit(X)
        labels = km.labels_ + 1
        return labels, int(np.bincount(labels).max()), float(km.inertia_)

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(trial, seeds))
    else:
        results = [trial(s) for s in seeds]

    best = min(range(N), key=lambda t: (results[t][1], results[t][2], t))
    labels = results[best][0]
    part = Partition(labels, ids).canonical()
    q = PartitionQuality(
        max_region_size=results[best][1],
        tie_line_count=0,
        connected=region_connectivity(part.labels, A > 0),
        distortion=results[best][2],
        trial=best,
        trials=[(r[1], r[2]) for r in results],
    )
    return part, q


# ---------------------------------------------------------------------------
# Electrical-distance baseline
# ---------------------------------------------------------------------------


def impedance_graph(case: NetworkCase) -> sp.csr_matrix:
    """Symmetric bus graph weighted by |z_series| (minimum over parallel branches)."""
    n = case.n_bus
    W = {}
    for k, br in enumerate(case.branches):
        i, j = int(case.branch_from[k]), int(case.branch_to[k])
        if i == j:
            continue
        key = (min(i, j), max(i, j))
        w = abs(br.impedance)
        W[key] = min(W.get(key, np.inf), w)
    if not W:
        return sp.csr_matrix((n, n))
    (r, c), v = zip(*W.keys()), list(W.values())
    G = sp.coo_matrix((v, (r, c)), shape=(n, n))
    return (G + G.T).tocsr()


def electrical_distance_partition(
    case: NetworkCase, K: int, seed: int = 0, centers: Sequence[int] | None = None
) -> Partition:
    """Assign each bus to the nearest of ``K`` generator-bus centres.

    Centres are drawn uniformly without replacement from the generator buses
    (or given as bus indices). Distance is the shortest path length with
    branch weight |r + jx|. Region k is the k-th centre in bus order; ties go
    to the lower region. Buses no centre can reach land in region 1 and are
    listed in ``Partition.unreachable``.
    """
    gen_buses = np.unique(case.gen_bus)
    if centers is None:
        if K > len(gen_buses):
            raise PartitionError(f"K={K} exceeds the number of generator buses ({len(gen_buses)})")
        rng = np.random.default_rng(seed)
        centers = rng.choice(gen_buses, size=K, replace=False)
    centers = np.sort(np.asarray(centers, dtype=int))
    if len(np.unique(centers)) != K:
        raise PartitionError("need K distinct centres")
    dist = dijkstra(impedance_graph(case), directed=False, indices=centers)
    dist = np.atleast_2d(dist)
    labels = np.argmin(dist, axis=0) + 1
    unreachable = np.flatnonzero(~np.isfinite(dist.min(axis=0)))
    labels[unreachable] = 1
    return Partition(labels, case.bus_ids, tuple(int(case.bus_ids[u]) for u in unreachable))


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------


def boundary_row_mask(H: KktJacobian, partition: Partition) -> np.ndarray:
    M = sp.coo_matrix(H.H)
    region = partition.labels[H.var_bus]
    crossing = (region[M.row] != region[M.col]) & (M.data != 0)
    mask = np.zeros(H.H.shape[0], dtype=bool)
    mask[M.row[crossing]] = True
    return mask


def boundary_rows(H: KktJacobian, partition: Partition) -> float:
    """Sum of |entries| over the rows of H that couple variables of different regions."""
    mask = boundary_row_mask(H, partition)
    if not mask.any():
        return 0.0
    return float(abs(sp.csr_matrix(H.H)[mask]).sum())


def partition_quality(
    case: NetworkCase, partition: Partition, H: KktJacobian | None = None
) -> PartitionQuality:
    adj = (abs(_branch_adjacency(case)) > 0).astype(float)
    sizes = partition.sizes()
    return PartitionQuality(
        max_region_size=int(sizes.max()),
        tie_line_count=len(partition.tie_lines(case)) // 2,
        connected=region_connectivity(partition.labels, adj),
        boundary_score=boundary_rows(H, partition) if H is not None else None,
        unreachable=partition.unreachable,
    )


def _branch_adjacency(case: NetworkCase) -> sp.csr_matrix:
    n = case.n_bus
    f, t = case.branch_from, case.branch_to
    G = sp.coo_matrix((np.ones(len(f)), (f, t)), shape=(n, n))
    return (G + G.T).tocsr()


# ---------------------------------------------------------------------------
# Text format: one "bus_id region_id" pair per line
# ---------------------------------------------------------------------------


def write_partition(partition: Partition, path: str | Path) -> None:
    lines = [f"{b} {k}" for b, k in zip(partition.bus_ids, partition.labels)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_partition(path: str | Path, case: NetworkCase) -> Partition:
    assignment: dict[int, int] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise PartitionError(f"{path}:{lineno}: expected 'bus_id region_id'")
        assignment[int(parts[0])] = int(parts[1])
    return Partition.from_assignment(case, assignment)
